//! Variables, margins, cell indexing and probability tables.
//!
//! Variables are identified by 1-based indices and take values `0..levels`,
//! with category 0 acting as the reference. Cells of a margin are laid out
//! lexicographically with the last listed variable varying fastest, which
//! lines up index-for-index with Kronecker products taken in variable order.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{MllpError, Result};

/// A sorted set of variable indices.
///
/// Ordering is by cardinality first and lexicographic second, which is the
/// canonical order of interaction blocks throughout the crate.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VarSet(Vec<usize>);

impl VarSet {
    pub fn new<I: IntoIterator<Item = usize>>(vars: I) -> Self {
        let mut v: Vec<usize> = vars.into_iter().collect();
        v.sort_unstable();
        v.dedup();
        VarSet(v)
    }

    pub fn empty() -> Self {
        VarSet(Vec::new())
    }

    /// Parses either a digit string (`"123"`) or a comma list (`"1,2,13"`).
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim().trim_start_matches('{').trim_end_matches('}');
        if text.is_empty() {
            return Ok(VarSet::empty());
        }
        let parts: Vec<&str> = if text.contains(',') {
            text.split(',').map(str::trim).collect()
        } else {
            text.split("").filter(|s| !s.is_empty()).collect()
        };
        let mut vars = Vec::with_capacity(parts.len());
        for p in parts {
            let v: usize = p
                .parse()
                .map_err(|_| MllpError::InvalidSpec(format!("cannot parse variable '{p}'")))?;
            vars.push(v);
        }
        Ok(VarSet::new(vars))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, var: usize) -> bool {
        self.0.binary_search(&var).is_ok()
    }

    pub fn is_subset(&self, other: &VarSet) -> bool {
        self.0.iter().all(|v| other.contains(*v))
    }

    pub fn is_disjoint(&self, other: &VarSet) -> bool {
        self.0.iter().all(|v| !other.contains(*v))
    }

    pub fn intersection(&self, other: &VarSet) -> VarSet {
        VarSet(
            self.0
                .iter()
                .copied()
                .filter(|v| other.contains(*v))
                .collect(),
        )
    }

    pub fn union(&self, other: &VarSet) -> VarSet {
        VarSet::new(self.0.iter().chain(other.0.iter()).copied())
    }

    pub fn difference(&self, other: &VarSet) -> VarSet {
        VarSet(
            self.0
                .iter()
                .copied()
                .filter(|v| !other.contains(*v))
                .collect(),
        )
    }

    /// Position of `var` inside the set, if present.
    pub fn position(&self, var: usize) -> Option<usize> {
        self.0.binary_search(&var).ok()
    }

    /// All non-empty subsets in canonical order.
    pub fn subsets(&self) -> Vec<VarSet> {
        let n = self.0.len();
        assert!(n < 31, "too many variables to enumerate subsets");
        let mut out: Vec<VarSet> = (1u32..(1u32 << n))
            .map(|mask| {
                VarSet(
                    (0..n)
                        .filter(|i| mask & (1 << i) != 0)
                        .map(|i| self.0[i])
                        .collect(),
                )
            })
            .collect();
        out.sort();
        out
    }

    /// Compact label: `"123"` when every index is a single digit, else `"1.2.13"`.
    pub fn label(&self) -> String {
        if self.0.iter().all(|v| *v < 10) {
            self.0.iter().map(|v| v.to_string()).collect()
        } else {
            self.0
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(".")
        }
    }
}

impl Ord for VarSet {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .len()
            .cmp(&other.0.len())
            .then_with(|| self.0.cmp(&other.0))
    }
}

impl PartialOrd for VarSet {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for VarSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, v) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "}}")
    }
}

impl From<&[usize]> for VarSet {
    fn from(v: &[usize]) -> Self {
        VarSet::new(v.iter().copied())
    }
}

impl<const N: usize> From<[usize; N]> for VarSet {
    fn from(v: [usize; N]) -> Self {
        VarSet::new(v)
    }
}

/// Shorthand used heavily in tests and examples: `vs("123")`.
pub fn vs(text: &str) -> VarSet {
    VarSet::parse(text).expect("valid variable set literal")
}

/// Category counts per variable; `levels[j - 1]` is the count for variable `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableSpec {
    levels: Vec<usize>,
}

impl VariableSpec {
    pub fn new(levels: Vec<usize>) -> Result<Self> {
        if levels.is_empty() {
            return Err(MllpError::InvalidSpec("no variables declared".into()));
        }
        if let Some((j, l)) = levels.iter().enumerate().find(|(_, l)| **l < 2) {
            return Err(MllpError::InvalidSpec(format!(
                "variable {} has {} levels, at least 2 required",
                j + 1,
                l
            )));
        }
        Ok(VariableSpec { levels })
    }

    pub fn binary(d: usize) -> Self {
        VariableSpec::new(vec![2; d]).expect("binary spec")
    }

    pub fn d(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// Number of categories of `var` (1-based).
    pub fn levels_of(&self, var: usize) -> usize {
        self.levels[var - 1]
    }

    pub fn all_vars(&self) -> VarSet {
        VarSet::new(1..=self.d())
    }

    pub fn contains_var(&self, var: usize) -> bool {
        var >= 1 && var <= self.d()
    }

    pub fn shape(&self, vars: &VarSet) -> Vec<usize> {
        vars.iter().map(|v| self.levels_of(v)).collect()
    }

    pub fn n_cells(&self, vars: &VarSet) -> usize {
        vars.iter().map(|v| self.levels_of(v)).product()
    }
}

/// A non-empty set of declared variables over which a marginal table lives.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Margin(VarSet);

impl Margin {
    pub fn new(spec: &VariableSpec, vars: VarSet) -> Result<Self> {
        if vars.is_empty() {
            return Err(MllpError::InvalidMargin("margin is empty".into()));
        }
        if let Some(v) = vars.iter().find(|v| !spec.contains_var(*v)) {
            return Err(MllpError::InvalidMargin(format!(
                "variable {v} is not declared (d = {})",
                spec.d()
            )));
        }
        Ok(Margin(vars))
    }

    pub fn full(spec: &VariableSpec) -> Self {
        Margin(spec.all_vars())
    }

    pub fn vars(&self) -> &VarSet {
        &self.0
    }
}

impl Deref for Margin {
    type Target = VarSet;
    fn deref(&self) -> &VarSet {
        &self.0
    }
}

impl fmt::Display for Margin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Assignment of categories to variables.
pub type CellConfig = BTreeMap<usize, usize>;

/// Position of the cell `config` within `margin` under the lexicographic,
/// last-variable-fastest order.
pub fn cell_index(config: &CellConfig, margin: &Margin, spec: &VariableSpec) -> Result<usize> {
    let mut index = 0usize;
    for var in margin.iter() {
        let levels = spec.levels_of(var);
        let level = *config
            .get(&var)
            .ok_or(MllpError::MissingAssignment { var })?;
        if level >= levels {
            return Err(MllpError::LevelOutOfRange { var, level, levels });
        }
        index = index * levels + level;
    }
    Ok(index)
}

/// Inverse of [`cell_index`].
pub fn cell_config(index: usize, margin: &Margin, spec: &VariableSpec) -> CellConfig {
    let shape = spec.shape(margin);
    let coords = decode(index, &shape);
    margin.iter().zip(coords).collect()
}

fn decode(mut index: usize, shape: &[usize]) -> Vec<usize> {
    let mut coords = vec![0; shape.len()];
    for k in (0..shape.len()).rev() {
        coords[k] = index % shape[k];
        index /= shape[k];
    }
    coords
}

/// Precomputed coordinates for every cell of a margin.
#[derive(Clone, Debug)]
pub struct CellGrid {
    margin: Margin,
    shape: Vec<usize>,
    coords: Vec<usize>,
}

impl CellGrid {
    pub fn new(spec: &VariableSpec, margin: &Margin) -> Self {
        let shape = spec.shape(margin);
        let n: usize = shape.iter().product();
        let m = shape.len();
        let mut coords = vec![0usize; n * m];
        let mut cur = vec![0usize; m];
        for i in 0..n {
            coords[i * m..(i + 1) * m].copy_from_slice(&cur);
            for k in (0..m).rev() {
                cur[k] += 1;
                if cur[k] < shape[k] {
                    break;
                }
                cur[k] = 0;
            }
        }
        CellGrid {
            margin: margin.clone(),
            shape,
            coords,
        }
    }

    pub fn margin(&self) -> &Margin {
        &self.margin
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn n_cells(&self) -> usize {
        self.coords.len() / self.shape.len().max(1)
    }

    /// Coordinates of cell `i`, aligned with the margin's variables.
    pub fn cell(&self, i: usize) -> &[usize] {
        let m = self.shape.len();
        &self.coords[i * m..(i + 1) * m]
    }

    pub fn index_of(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (c, s)| acc * s + c)
    }
}

/// Strictly positive probability vector over a margin.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbVector {
    margin: Margin,
    shape: Vec<usize>,
    values: Vec<f64>,
}

pub const SUM_TOLERANCE: f64 = 1e-12;

impl ProbVector {
    pub fn new(spec: &VariableSpec, margin: Margin, values: Vec<f64>) -> Result<Self> {
        let shape = spec.shape(&margin);
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(MllpError::InvalidMargin(format!(
                "expected {n} cells for margin {margin}, got {}",
                values.len()
            )));
        }
        if let Some((index, value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(MllpError::NonPositiveCell {
                index,
                value: *value,
            });
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(MllpError::NotNormalized { sum });
        }
        Ok(ProbVector {
            margin,
            shape,
            values,
        })
    }

    /// Builds a table from positive weights, normalizing them first.
    pub fn from_weights(spec: &VariableSpec, margin: Margin, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(MllpError::NotNormalized { sum });
        }
        ProbVector::new(spec, margin, weights.into_iter().map(|w| w / sum).collect())
    }

    pub fn uniform(spec: &VariableSpec, margin: Margin) -> Self {
        let n = spec.n_cells(&margin);
        ProbVector {
            shape: spec.shape(&margin),
            margin,
            values: vec![1.0 / n as f64; n],
        }
    }

    pub fn margin(&self) -> &Margin {
        &self.margin
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, coords: &[usize]) -> f64 {
        let idx = coords
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (c, s)| acc * s + c);
        self.values[idx]
    }

    /// Sums out every variable not in `target`.
    pub fn marginalize(&self, target: &Margin) -> Result<ProbVector> {
        if !target.is_subset(&self.margin) {
            return Err(MllpError::NotSubset {
                target: target.to_string(),
                source_set: self.margin.to_string(),
            });
        }
        let keep: Vec<usize> = target
            .iter()
            .map(|v| self.margin.position(v).expect("subset"))
            .collect();
        let out_shape: Vec<usize> = keep.iter().map(|&k| self.shape[k]).collect();
        let n_out: usize = out_shape.iter().product();
        let mut out = vec![0.0; n_out];
        let m = self.shape.len();
        let mut cur = vec![0usize; m];
        for &v in &self.values {
            let idx = keep
                .iter()
                .zip(&out_shape)
                .fold(0, |acc, (&k, s)| acc * s + cur[k]);
            out[idx] += v;
            for k in (0..m).rev() {
                cur[k] += 1;
                if cur[k] < self.shape[k] {
                    break;
                }
                cur[k] = 0;
            }
        }
        Ok(ProbVector {
            margin: target.clone(),
            shape: out_shape,
            values: out,
        })
    }

    /// Largest absolute entrywise difference; margins must match.
    pub fn max_abs_diff(&self, other: &ProbVector) -> f64 {
        assert_eq!(self.margin, other.margin, "margins differ");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    General,
    CompleteIndependence,
}

fn positive_exp(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let x: f64 = rng.sample(Exp1);
        if x > 0.0 {
            return x;
        }
    }
}

/// Seeded random strictly positive table over `margin`.
///
/// `General` draws a flat Dirichlet; `CompleteIndependence` draws a flat
/// Dirichlet per variable and takes the outer product.
pub fn random_distribution(
    spec: &VariableSpec,
    margin: &Margin,
    mode: SamplingMode,
    seed: u64,
) -> ProbVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = spec.shape(margin);
    let n: usize = shape.iter().product();
    let values = match mode {
        SamplingMode::General => {
            let w: Vec<f64> = (0..n).map(|_| positive_exp(&mut rng)).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        }
        SamplingMode::CompleteIndependence => {
            let factors: Vec<Vec<f64>> = shape
                .iter()
                .map(|&l| {
                    let w: Vec<f64> = (0..l).map(|_| positive_exp(&mut rng)).collect();
                    let s: f64 = w.iter().sum();
                    w.into_iter().map(|x| x / s).collect()
                })
                .collect();
            let grid = CellGrid::new(spec, margin);
            (0..n)
                .map(|i| {
                    grid.cell(i)
                        .iter()
                        .zip(&factors)
                        .map(|(c, f)| f[*c])
                        .product()
                })
                .collect()
        }
    };
    ProbVector {
        margin: margin.clone(),
        shape,
        values,
    }
}

/// Outer product of per-variable marginal distributions, in variable order.
pub fn independence_product(
    spec: &VariableSpec,
    margin: &Margin,
    factors: &[Vec<f64>],
) -> Result<ProbVector> {
    if factors.len() != margin.len() {
        return Err(MllpError::InvalidMargin(
            "one factor per margin variable required".into(),
        ));
    }
    let grid = CellGrid::new(spec, margin);
    let values = (0..grid.n_cells())
        .map(|i| {
            grid.cell(i)
                .iter()
                .zip(factors)
                .map(|(c, f)| f[*c])
                .product()
        })
        .collect();
    ProbVector::from_weights(spec, margin.clone(), values)
}
