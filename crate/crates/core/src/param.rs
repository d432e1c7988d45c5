//! Canonical and mean parameters of a marginal table and the mixed
//! parameterization solver.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::design::{build_c, indicator_matrix, weighted_rows, TermId, TermSelection};
use crate::error::{MllpError, Result};
use crate::table::{CellGrid, Margin, ProbVector, VariableSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Canonical,
    Mean,
}

/// Parameter values aligned with a term selection.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    pub selection: TermSelection,
    pub values: Vec<f64>,
    pub kind: ParamKind,
}

impl ParamVector {
    pub fn new(selection: TermSelection, values: Vec<f64>, kind: ParamKind) -> Result<Self> {
        if selection.len() != values.len() {
            return Err(MllpError::InvalidSelection(format!(
                "{} values for {} terms",
                values.len(),
                selection.len()
            )));
        }
        Ok(ParamVector {
            selection,
            values,
            kind,
        })
    }

    pub fn zeros(selection: TermSelection, kind: ParamKind) -> Self {
        let values = vec![0.0; selection.len()];
        ParamVector {
            selection,
            values,
            kind,
        }
    }

    pub fn get(&self, term: &TermId) -> Option<f64> {
        self.selection.position(term).map(|k| self.values[k])
    }

    /// Values re-read in the order of `selection`, which must be a subset.
    pub fn restrict(&self, selection: &TermSelection) -> Result<ParamVector> {
        let values = selection
            .iter()
            .map(|t| {
                self.get(t)
                    .ok_or_else(|| MllpError::InvalidSelection(format!("term {t} not available")))
            })
            .collect::<Result<Vec<_>>>()?;
        ParamVector::new(selection.clone(), values, self.kind)
    }

    /// Concatenation of two vectors of the same kind.
    pub fn concat(&self, other: &ParamVector) -> Result<ParamVector> {
        if self.kind != other.kind {
            return Err(MllpError::InvalidSelection(
                "cannot concatenate canonical and mean parameters".into(),
            ));
        }
        let selection = self.selection.concat(&other.selection)?;
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        ParamVector::new(selection, values, self.kind)
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Canonical parameters over the full selection `P(M)`: `η = C(M) log p`.
pub fn eta_of(p: &ProbVector, spec: &VariableSpec) -> ParamVector {
    let full = TermSelection::full(spec, p.margin());
    eta_on(p, &full, spec)
}

/// Canonical parameters on an arbitrary selection of `p`'s margin.
pub fn eta_on(p: &ProbVector, selection: &TermSelection, spec: &VariableSpec) -> ParamVector {
    let c = build_c(selection, spec);
    let logp: Vec<f64> = p.values().iter().map(|v| v.ln()).collect();
    let values = (0..c.nrows())
        .map(|r| {
            c.row(r)
                .iter()
                .zip(&logp)
                .filter(|(w, _)| **w != 0)
                .map(|(w, l)| *w as f64 * l)
                .sum()
        })
        .collect();
    ParamVector {
        selection: selection.clone(),
        values,
        kind: ParamKind::Canonical,
    }
}

/// Interaction `term` with the remaining margin variables held at `context`
/// (one category per margin variable; entries for the term's own variables
/// are ignored), computed straight from the alternating sum of log cell
/// probabilities.
pub fn eta_conditional(p: &ProbVector, term: &TermId, context: &[usize]) -> f64 {
    let margin = p.margin();
    let positions: Vec<usize> = term
        .interaction
        .iter()
        .map(|v| margin.position(v).expect("term within margin"))
        .collect();
    let k = positions.len();
    let mut total = 0.0;
    for mask in 0u32..(1u32 << k) {
        let mut coords = context.to_vec();
        let mut zeros = 0;
        for (bit, (&pos, &level)) in positions.iter().zip(&term.levels).enumerate() {
            if mask & (1 << bit) != 0 {
                coords[pos] = level;
            } else {
                coords[pos] = 0;
                zeros += 1;
            }
        }
        let sign = if zeros % 2 == 0 { 1.0 } else { -1.0 };
        total += sign * p.get(&coords).ln();
    }
    total
}

fn log_sum_exp(x: &DVector<f64>) -> f64 {
    let max = x.max();
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax(x: &DVector<f64>) -> DVector<f64> {
    let max = x.max();
    let mut e = x.map(|v| (v - max).exp());
    let s = e.sum();
    e /= s;
    e
}

/// Reconstruction `log p = Gη − 1 log(1' exp(Gη))` from the full canonical vector.
pub fn p_of_eta(eta: &ParamVector, spec: &VariableSpec) -> Result<ProbVector> {
    let margin = eta.selection.margin().clone();
    let full = TermSelection::full(spec, &margin);
    if eta.kind != ParamKind::Canonical || !eta.selection.same_terms(&full) {
        return Err(MllpError::InvalidSelection(
            "p_of_eta needs canonical parameters over the full selection".into(),
        ));
    }
    let ordered = eta.restrict(&full)?;
    let g = indicator_matrix(&full, spec);
    let logits = g * DVector::from_vec(ordered.values);
    prob_from_logits(spec, margin, &logits)
}

fn prob_from_logits(
    spec: &VariableSpec,
    margin: Margin,
    logits: &DVector<f64>,
) -> Result<ProbVector> {
    let p = softmax(logits);
    ProbVector::new(spec, margin, p.iter().copied().collect())
}

/// Mean parameters `G_sel' p`: marginal probabilities of the indicator events.
pub fn mu_of(
    p: &ProbVector,
    selection: &TermSelection,
    spec: &VariableSpec,
) -> Result<ParamVector> {
    if selection.margin() != p.margin() {
        return Err(MllpError::InvalidSelection(format!(
            "selection on {} but table on {}",
            selection.margin(),
            p.margin()
        )));
    }
    let grid = CellGrid::new(spec, p.margin());
    let values = selection
        .iter()
        .map(|term| {
            let positions: Vec<usize> = term
                .interaction
                .iter()
                .map(|v| p.margin().position(v).expect("term within margin"))
                .collect();
            (0..grid.n_cells())
                .filter(|&c| {
                    let coords = grid.cell(c);
                    positions
                        .iter()
                        .zip(&term.levels)
                        .all(|(&pos, &l)| coords[pos] == l)
                })
                .map(|c| p.values()[c])
                .sum()
        })
        .collect();
    ParamVector::new(selection.clone(), values, ParamKind::Mean)
}

/// `G_rows' (D_π − ππ') G_cols`.
pub fn fisher_f(
    p: &ProbVector,
    rows: &TermSelection,
    cols: &TermSelection,
    spec: &VariableSpec,
) -> DMatrix<f64> {
    let gr = indicator_matrix(rows, spec);
    let gc = indicator_matrix(cols, spec);
    fisher_from_indicators(p.values(), &gr, &gc)
}

pub(crate) fn fisher_from_indicators(
    pi: &[f64],
    gr: &DMatrix<f64>,
    gc: &DMatrix<f64>,
) -> DMatrix<f64> {
    let d = DVector::from_column_slice(pi);
    let mu_r = gr.transpose() * &d;
    let mu_c = gc.transpose() * &d;
    gr.transpose() * weighted_rows(gc, &d) - mu_r * mu_c.transpose()
}

/// One side mean, one side canonical; together a term-level partition of `P(M)`.
#[derive(Clone, Debug)]
pub struct MixedSpec {
    pub margin: Margin,
    pub mean: ParamVector,
    pub canonical: ParamVector,
}

impl MixedSpec {
    pub fn new(
        spec: &VariableSpec,
        margin: Margin,
        mean: ParamVector,
        canonical: ParamVector,
    ) -> Result<Self> {
        if mean.kind != ParamKind::Mean || canonical.kind != ParamKind::Canonical {
            return Err(MllpError::InvalidSelection(
                "mixed parameterization needs a mean side and a canonical side".into(),
            ));
        }
        if mean.selection.margin() != &margin || canonical.selection.margin() != &margin {
            return Err(MllpError::InvalidSelection(
                "selections on a different margin".into(),
            ));
        }
        let union = mean.selection.concat(&canonical.selection)?;
        let full = TermSelection::full(spec, &margin);
        if !union.same_terms(&full) {
            return Err(MllpError::InvalidSelection(format!(
                "mean and canonical sides cover {} of {} terms of P({margin})",
                union.len(),
                full.len()
            )));
        }
        Ok(MixedSpec {
            margin,
            mean,
            canonical,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Minimum per-iteration residual decrease before a stall is counted.
    pub stall_decrease: f64,
    pub stall_iterations: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            tol: 1e-10,
            max_iter: 100,
            max_halvings: 20,
            stall_decrease: 1e-14,
            stall_iterations: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MixedSolution {
    pub p: ProbVector,
    /// Canonical parameters over the full selection at the solution.
    pub eta: ParamVector,
    pub iterations: usize,
    pub residual: f64,
}

/// Finds the table with the given mean-side and canonical-side values.
pub fn mixed_solve(
    spec: &VariableSpec,
    mixed: &MixedSpec,
    opts: &NewtonOptions,
) -> Result<MixedSolution> {
    mixed_solve_from(spec, mixed, opts, None)
}

/// As [`mixed_solve`], starting the free canonical coordinates (those of the
/// mean-side terms) at `start` instead of zero.
pub fn mixed_solve_from(
    spec: &VariableSpec,
    mixed: &MixedSpec,
    opts: &NewtonOptions,
    start: Option<&[f64]>,
) -> Result<MixedSolution> {
    let full = TermSelection::full(spec, &mixed.margin);
    let g = indicator_matrix(&full, spec);
    let mean_idx: Vec<usize> = mixed
        .mean
        .selection
        .iter()
        .map(|t| full.position(t).expect("validated partition"))
        .collect();
    let targets = DVector::from_column_slice(&mixed.mean.values);
    if let Some(bad) = targets
        .iter()
        .find(|v| !(v.is_finite() && **v > 0.0 && **v < 1.0))
    {
        return Err(MllpError::Infeasible { residual: *bad });
    }
    if mixed.canonical.values.iter().any(|v| !v.is_finite()) {
        return Err(MllpError::InvalidSelection(
            "non-finite canonical target".into(),
        ));
    }

    let mut eta = DVector::zeros(full.len());
    for (t, v) in mixed
        .canonical
        .selection
        .iter()
        .zip(&mixed.canonical.values)
    {
        eta[full.position(t).expect("validated partition")] = *v;
    }
    if let Some(s) = start {
        if s.len() != mean_idx.len() {
            return Err(MllpError::InvalidSelection(
                "start vector has wrong length".into(),
            ));
        }
        for (&k, v) in mean_idx.iter().zip(s) {
            eta[k] = *v;
        }
    }
    let gv = DMatrix::from_fn(g.nrows(), mean_idx.len(), |r, c| g[(r, mean_idx[c])]);

    let objective = |eta: &DVector<f64>| -> f64 {
        let logits = &g * eta;
        log_sum_exp(&logits)
            - mean_idx
                .iter()
                .zip(targets.iter())
                .map(|(&k, t)| eta[k] * t)
                .sum::<f64>()
    };
    let state = |eta: &DVector<f64>| -> (DVector<f64>, DVector<f64>) {
        let p = softmax(&(&g * eta));
        let r = &targets - gv.transpose() * &p;
        (p, r)
    };

    let (mut p, mut r) = state(&eta);
    let mut res = r.amax();
    let mut obj = objective(&eta);
    let mut stalls = 0;
    let mut iterations = 0;
    while res >= opts.tol {
        if iterations >= opts.max_iter {
            return Err(MllpError::NonConvergence {
                context: "mixed parameterization Newton solve".into(),
                iterations,
                residual: res,
            });
        }
        iterations += 1;
        let fvv = fisher_from_indicators(p.as_slice(), &gv, &gv);
        // The block is positive definite for any strictly positive table, so a
        // failed factorization means the iterate has run off to the boundary.
        let delta = solve_spd(fvv, &r).ok_or(MllpError::Infeasible { residual: res })?;
        let slope = -r.dot(&delta);
        let mut lambda = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut trial = eta.clone();
            for (k, &idx) in mean_idx.iter().enumerate() {
                trial[idx] += lambda * delta[k];
            }
            let (tp, tr) = state(&trial);
            let tres = tr.amax();
            let tobj = objective(&trial);
            // Sufficient decrease of the convex dual objective; near the
            // solution, where it is flat to rounding, a smaller residual will do.
            let armijo = tobj <= obj + 1e-4 * lambda * slope;
            let flat = tobj <= obj + 1e-14 * obj.abs().max(1.0);
            if tres.is_finite() && (armijo || (flat && tres < res)) {
                accepted = Some((trial, tp, tr, tres, tobj));
                break;
            }
            lambda *= 0.5;
        }
        let Some((trial, tp, tr, tres, tobj)) = accepted else {
            return Err(MllpError::Infeasible { residual: res });
        };
        if res - tres < opts.stall_decrease {
            stalls += 1;
            if stalls >= opts.stall_iterations {
                return Err(MllpError::Infeasible { residual: tres });
            }
        } else {
            stalls = 0;
        }
        eta = trial;
        p = tp;
        r = tr;
        res = tres;
        obj = tobj;
    }

    let prob = ProbVector::new(spec, mixed.margin.clone(), p.iter().copied().collect())
        .map_err(|_| MllpError::Infeasible { residual: res })?;
    Ok(MixedSolution {
        p: prob,
        eta: ParamVector {
            selection: full,
            values: eta.iter().copied().collect(),
            kind: ParamKind::Canonical,
        },
        iterations,
        residual: res,
    })
}

pub(crate) fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if b.is_empty() {
        return Some(DVector::zeros(0));
    }
    match a.clone().cholesky() {
        Some(ch) => Some(ch.solve(b)),
        None => a.lu().solve(b),
    }
}
