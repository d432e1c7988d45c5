//! Reference-category design matrices.
//!
//! For a margin `M`, `C(I,M)` maps `log p` to the interactions of block `I`
//! and `G(I,M)` holds the corresponding indicator columns; stacked over all
//! blocks, `G(M)` is a right inverse of `C(M)`. The contrast-of-averages
//! matrices `S` and `S̄` and the weighted projectors used by the Q-matrix
//! analysis live here too.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MllpError, Result};
use crate::table::{CellGrid, Margin, ProbVector, VarSet, VariableSpec};

/// One log-linear term: an interaction set and a non-reference level for
/// each of its variables.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TermId {
    pub interaction: VarSet,
    pub levels: Vec<usize>,
}

impl TermId {
    pub fn new(interaction: VarSet, levels: Vec<usize>) -> Result<Self> {
        if interaction.is_empty() {
            return Err(MllpError::InvalidTerm("empty interaction".into()));
        }
        if interaction.len() != levels.len() {
            return Err(MllpError::InvalidTerm(format!(
                "interaction {interaction} needs {} levels, got {}",
                interaction.len(),
                levels.len()
            )));
        }
        if levels.contains(&0) {
            return Err(MllpError::InvalidTerm(format!(
                "reference level 0 cannot appear in a term of {interaction}"
            )));
        }
        Ok(TermId {
            interaction,
            levels,
        })
    }

    /// Level of `var` in this term, if the variable belongs to it.
    pub fn level_of(&self, var: usize) -> Option<usize> {
        self.interaction.position(var).map(|k| self.levels[k])
    }

    /// Parses the `I={1,2};x={1,1}` form used in CSV headers and parameter files.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || MllpError::InvalidTerm(format!("cannot parse term '{text}'"));
        let (i_part, x_part) = text.split_once(';').ok_or_else(bad)?;
        let i_part = i_part.trim().strip_prefix("I=").ok_or_else(bad)?;
        let x_part = x_part.trim().strip_prefix("x=").ok_or_else(bad)?;
        let vars: Vec<usize> = parse_list(i_part).ok_or_else(bad)?;
        let levels: Vec<usize> = parse_list(x_part).ok_or_else(bad)?;
        if vars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MllpError::InvalidTerm(format!(
                "variables of '{text}' must be listed in increasing order"
            )));
        }
        TermId::new(VarSet::new(vars), levels)
    }
}

fn parse_list(text: &str) -> Option<Vec<usize>> {
    let inner = text.trim().strip_prefix('{')?.strip_suffix('}')?;
    inner
        .split(',')
        .map(|s| s.trim().parse::<usize>().ok())
        .collect()
}

impl fmt::Display for TermId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let levels: Vec<String> = self.levels.iter().map(|l| l.to_string()).collect();
        write!(f, "I={};x={{{}}}", self.interaction, levels.join(","))
    }
}

/// Every level assignment of `vars` with all levels >= 1, lexicographic with
/// the last variable fastest.
pub fn level_combinations(spec: &VariableSpec, vars: &VarSet) -> Vec<Vec<usize>> {
    let maxes: Vec<usize> = vars.iter().map(|v| spec.levels_of(v) - 1).collect();
    let total: usize = maxes.iter().product();
    let mut out = Vec::with_capacity(total);
    if vars.is_empty() {
        out.push(Vec::new());
        return out;
    }
    let mut cur = vec![1usize; maxes.len()];
    for _ in 0..total {
        out.push(cur.clone());
        for k in (0..cur.len()).rev() {
            cur[k] += 1;
            if cur[k] <= maxes[k] {
                break;
            }
            cur[k] = 1;
        }
    }
    out
}

/// An ordered collection of distinct terms within one margin.
#[derive(Clone, Debug)]
pub struct TermSelection {
    margin: Margin,
    terms: Vec<TermId>,
    index: HashMap<TermId, usize>,
}

impl PartialEq for TermSelection {
    fn eq(&self, other: &Self) -> bool {
        self.margin == other.margin && self.terms == other.terms
    }
}

impl TermSelection {
    pub fn new(spec: &VariableSpec, margin: &Margin, terms: Vec<TermId>) -> Result<Self> {
        let mut index = HashMap::with_capacity(terms.len());
        for (k, t) in terms.iter().enumerate() {
            if !t.interaction.is_subset(margin) {
                return Err(MllpError::InvalidSelection(format!(
                    "term {t} lies outside margin {margin}"
                )));
            }
            for (var, &level) in t.interaction.iter().zip(&t.levels) {
                let levels = spec.levels_of(var);
                if level >= levels {
                    return Err(MllpError::LevelOutOfRange { var, level, levels });
                }
            }
            if index.insert(t.clone(), k).is_some() {
                return Err(MllpError::InvalidSelection(format!("duplicate term {t}")));
            }
        }
        Ok(TermSelection {
            margin: margin.clone(),
            terms,
            index,
        })
    }

    fn from_trusted(margin: &Margin, terms: Vec<TermId>) -> Self {
        let index = terms
            .iter()
            .enumerate()
            .map(|(k, t)| (t.clone(), k))
            .collect();
        TermSelection {
            margin: margin.clone(),
            terms,
            index,
        }
    }

    pub fn empty(margin: &Margin) -> Self {
        TermSelection::from_trusted(margin, Vec::new())
    }

    /// The full block of interaction `interaction`.
    pub fn block(spec: &VariableSpec, margin: &Margin, interaction: &VarSet) -> Result<Self> {
        TermSelection::blocks(spec, margin, std::slice::from_ref(interaction))
    }

    /// Full blocks of the given interactions, in the order supplied.
    pub fn blocks(spec: &VariableSpec, margin: &Margin, interactions: &[VarSet]) -> Result<Self> {
        let mut terms = Vec::new();
        for i in interactions {
            if i.is_empty() {
                return Err(MllpError::InvalidTerm("empty interaction".into()));
            }
            for levels in level_combinations(spec, i) {
                terms.push(TermId {
                    interaction: i.clone(),
                    levels,
                });
            }
        }
        TermSelection::new(spec, margin, terms)
    }

    /// All terms of `P(M)` in canonical order.
    pub fn full(spec: &VariableSpec, margin: &Margin) -> Self {
        let blocks = margin.subsets();
        TermSelection::blocks(spec, margin, &blocks).expect("full selection is valid")
    }

    /// Terms of interaction `t ∪ h` with the variables of `h` fixed at `j_h`.
    pub fn fixed_block(
        spec: &VariableSpec,
        margin: &Margin,
        t: &VarSet,
        h: &VarSet,
        j_h: &[usize],
    ) -> Result<Self> {
        if !t.is_disjoint(h) {
            return Err(MllpError::InvalidTerm(format!("{t} and {h} overlap")));
        }
        if h.len() != j_h.len() {
            return Err(MllpError::InvalidTerm(format!(
                "{} fixed levels supplied for {h}",
                j_h.len()
            )));
        }
        let v = t.union(h);
        let mut terms = Vec::new();
        for xt in level_combinations(spec, t) {
            let levels = v
                .iter()
                .map(|var| match t.position(var) {
                    Some(k) => xt[k],
                    None => j_h[h.position(var).expect("var in h")],
                })
                .collect();
            terms.push(TermId::new(v.clone(), levels)?);
        }
        TermSelection::new(spec, margin, terms)
    }

    pub fn margin(&self) -> &Margin {
        &self.margin
    }

    pub fn terms(&self) -> &[TermId] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TermId> {
        self.terms.iter()
    }

    pub fn position(&self, term: &TermId) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn contains(&self, term: &TermId) -> bool {
        self.index.contains_key(term)
    }

    pub fn is_disjoint(&self, other: &TermSelection) -> bool {
        other.terms.iter().all(|t| !self.contains(t))
    }

    /// Concatenation; fails on shared terms or differing margins.
    pub fn concat(&self, other: &TermSelection) -> Result<Self> {
        if self.margin != other.margin {
            return Err(MllpError::InvalidSelection(format!(
                "margins {} and {} differ",
                self.margin, other.margin
            )));
        }
        if let Some(t) = other.terms.iter().find(|t| self.contains(t)) {
            return Err(MllpError::InvalidSelection(format!(
                "term {t} selected twice"
            )));
        }
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Ok(TermSelection::from_trusted(&self.margin, terms))
    }

    /// Terms of `self` not in `other`, order preserved.
    pub fn difference(&self, other: &TermSelection) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|t| !other.contains(t))
            .cloned()
            .collect();
        TermSelection::from_trusted(&self.margin, terms)
    }

    /// Same terms in canonical order.
    pub fn canonicalized(&self) -> Self {
        let mut terms = self.terms.clone();
        terms.sort_by(|a, b| {
            a.interaction
                .cmp(&b.interaction)
                .then_with(|| a.levels.cmp(&b.levels))
        });
        TermSelection::from_trusted(&self.margin, terms)
    }

    /// Terms reordered by `perm` (a permutation of `0..len`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let terms = perm.iter().map(|&k| self.terms[k].clone()).collect();
        TermSelection::from_trusted(&self.margin, terms)
    }

    /// Distinct interaction sets touched by the selection, canonical order.
    pub fn interactions(&self) -> Vec<VarSet> {
        let mut out: Vec<VarSet> = self.terms.iter().map(|t| t.interaction.clone()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Whether the selection is exactly a term-level partition member of `P(M)`.
    pub fn same_terms(&self, other: &TermSelection) -> bool {
        self.len() == other.len() && other.terms.iter().all(|t| self.contains(t))
    }
}

/// Dense integer matrix used for the exact `C` and `G` constructions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DesignMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i64>,
}

impl DesignMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DesignMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.data[r * self.cols + c]
    }

    fn set(&mut self, r: usize, c: usize, v: i64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[i64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Exact integer product, skipping zero entries of `self`.
    pub fn mul_exact(&self, other: &DesignMatrix) -> Result<DesignMatrix> {
        if self.cols != other.rows {
            return Err(MllpError::InvalidSelection(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DesignMatrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn is_identity(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|r| {
                self.row(r)
                    .iter()
                    .enumerate()
                    .all(|(c, &v)| v == i64::from(r == c))
            })
    }

    pub fn to_f64(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c) as f64)
    }
}

/// Contrast matrix `C` for `selection` (terms × cells).
pub fn build_c(selection: &TermSelection, spec: &VariableSpec) -> DesignMatrix {
    let grid = CellGrid::new(spec, selection.margin());
    let margin = selection.margin();
    let mut c = DesignMatrix::zeros(selection.len(), grid.n_cells());
    for (row, term) in selection.iter().enumerate() {
        for cell in 0..grid.n_cells() {
            let coords = grid.cell(cell);
            let mut v = 1i64;
            for (pos, var) in margin.iter().enumerate() {
                let x = coords[pos];
                v *= match term.level_of(var) {
                    Some(_) if x == 0 => -1,
                    Some(l) if x == l => 1,
                    Some(_) => 0,
                    None if x == 0 => 1,
                    None => 0,
                };
                if v == 0 {
                    break;
                }
            }
            c.set(row, cell, v);
        }
    }
    c
}

/// Indicator matrix `G` for `selection` (cells × terms).
pub fn build_g(selection: &TermSelection, spec: &VariableSpec) -> DesignMatrix {
    let grid = CellGrid::new(spec, selection.margin());
    let mut g = DesignMatrix::zeros(grid.n_cells(), selection.len());
    for (col, term) in selection.iter().enumerate() {
        let positions: Vec<usize> = term
            .interaction
            .iter()
            .map(|v| selection.margin().position(v).expect("term inside margin"))
            .collect();
        for cell in 0..grid.n_cells() {
            let coords = grid.cell(cell);
            if positions
                .iter()
                .zip(&term.levels)
                .all(|(&p, &l)| coords[p] == l)
            {
                g.set(cell, col, 1);
            }
        }
    }
    g
}

/// `G` as a floating-point matrix; the form used by every numerical routine.
pub fn indicator_matrix(selection: &TermSelection, spec: &VariableSpec) -> DMatrix<f64> {
    build_g(selection, spec).to_f64()
}

/// Contrast-of-averages matrix: `S(I,M)` rows when `averaged` is false
/// (conditioning variables at the reference level), `S̄(I,M)` rows otherwise
/// (conditioning variables averaged out).
pub fn build_s(selection: &TermSelection, spec: &VariableSpec, averaged: bool) -> DMatrix<f64> {
    let grid = CellGrid::new(spec, selection.margin());
    let margin = selection.margin();
    let mut s = DMatrix::zeros(selection.len(), grid.n_cells());
    for (row, term) in selection.iter().enumerate() {
        for cell in 0..grid.n_cells() {
            let coords = grid.cell(cell);
            let mut v = 1.0;
            for (pos, var) in margin.iter().enumerate() {
                let x = coords[pos];
                let width = spec.levels_of(var) as f64;
                v *= match term.level_of(var) {
                    Some(l) => f64::from(u8::from(x == l)) - 1.0 / width,
                    None if averaged => 1.0 / width,
                    None => f64::from(u8::from(x == 0)),
                };
            }
            s[(row, cell)] = v;
        }
    }
    s
}

/// Linear maps from reference-category interactions to contrast-of-averages
/// interactions for block `interaction` within `margin`.
#[derive(Clone, Debug)]
pub struct ConversionMatrices {
    /// `S(I,M) G(I,M)`: conditional-at-reference interactions of block `I`.
    pub a: DMatrix<f64>,
    /// `S̄(I,M) [G(J,M)]` over the ascending class `I ⊆ J ⊆ M`.
    pub b: DMatrix<f64>,
    /// Column layout of `b`.
    pub ascending: TermSelection,
}

pub fn conversion_matrices(
    spec: &VariableSpec,
    interaction: &VarSet,
    margin: &Margin,
) -> Result<ConversionMatrices> {
    if !interaction.is_subset(margin) {
        return Err(MllpError::NotSubset {
            target: interaction.to_string(),
            source_set: margin.to_string(),
        });
    }
    let block = TermSelection::block(spec, margin, interaction)?;
    let ascending_sets: Vec<VarSet> = margin
        .subsets()
        .into_iter()
        .filter(|j| interaction.is_subset(j))
        .collect();
    let ascending = TermSelection::blocks(spec, margin, &ascending_sets)?;
    let a = build_s(&block, spec, false) * indicator_matrix(&block, spec);
    let b = build_s(&block, spec, true) * indicator_matrix(&ascending, spec);
    Ok(ConversionMatrices { a, b, ascending })
}

/// `X_a`: indicator of the configuration of `a` for every cell of `margin`
/// (cells × configurations of `a`). `a = ∅` gives the column of ones.
pub fn configuration_indicator(spec: &VariableSpec, margin: &Margin, a: &VarSet) -> DMatrix<f64> {
    let grid = CellGrid::new(spec, margin);
    let positions: Vec<usize> = a
        .iter()
        .map(|v| margin.position(v).expect("subset of margin"))
        .collect();
    let shape: Vec<usize> = a.iter().map(|v| spec.levels_of(v)).collect();
    let n_cfg: usize = shape.iter().product();
    let mut x = DMatrix::zeros(grid.n_cells(), n_cfg);
    for cell in 0..grid.n_cells() {
        let coords = grid.cell(cell);
        let col = positions
            .iter()
            .zip(&shape)
            .fold(0, |acc, (&p, &s)| acc * s + coords[p]);
        x[(cell, col)] = 1.0;
    }
    x
}

/// `P_a = X_a (X_a' D X_a)^{-1} X_a' D`, the `D_π`-orthogonal projector onto
/// the span of `X_a`.
pub fn weighted_projector(spec: &VariableSpec, a: &VarSet, p: &ProbVector) -> Result<DMatrix<f64>> {
    if !a.is_subset(p.margin()) {
        return Err(MllpError::NotSubset {
            target: a.to_string(),
            source_set: p.margin().to_string(),
        });
    }
    let x = configuration_indicator(spec, p.margin(), a);
    let d = DVector::from_column_slice(p.values());
    let xd = weighted_rows(&x, &d);
    let gram = x.transpose() * &xd;
    let inv = gram
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| MllpError::SingularMatrix(format!("Gram matrix of X_{a}")))?;
    Ok(&x * inv * xd.transpose())
}

/// `D_π`-orthogonal projector onto the column span of an arbitrary `x`,
/// tolerating rank deficiency.
pub fn span_projector(x: &DMatrix<f64>, pi: &[f64]) -> DMatrix<f64> {
    let n = x.nrows();
    let sqrt_d: Vec<f64> = pi.iter().map(|v| v.sqrt()).collect();
    let y = DMatrix::from_fn(n, x.ncols(), |r, c| x[(r, c)] * sqrt_d[r]);
    let svd = y.svd(true, false);
    let u = svd.u.expect("left singular vectors");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = smax * 1e-10 * (n.max(x.ncols()) as f64);
    let keep: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&k| svd.singular_values[k] > tol)
        .collect();
    let basis = DMatrix::from_fn(n, keep.len(), |r, c| u[(r, keep[c])]);
    let uu = &basis * basis.transpose();
    DMatrix::from_fn(n, n, |r, c| uu[(r, c)] * sqrt_d[c] / sqrt_d[r])
}

/// `diag(d) * x` without materializing the diagonal matrix.
pub(crate) fn weighted_rows(x: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| x[(r, c)] * d[r])
}
