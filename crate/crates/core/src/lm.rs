//! Two-step fixed-point reconstruction of a margin whose interactions are
//! constrained both here and in an earlier margin, together with the
//! linearization of one step.
//!
//! The fixed-point variable is `η_H`, the canonical parameters of the
//! replacement terms. The M-step fixes the means of `R ∪ I` and the canonical
//! parameters of `L_free ∪ H` and reads off `μ_H`; the L-step fixes the means
//! of `R ∪ H` and the canonical parameters of `I ∪ L_free` and reads off `η_H`.

use nalgebra::{Complex, DMatrix, Schur, SymmetricEigen};

use crate::design::{configuration_indicator, indicator_matrix, span_projector, TermSelection};
use crate::error::{MllpError, Result};
use crate::param::{
    eta_on, fisher_from_indicators, mixed_solve_from, mu_of, MixedSpec, NewtonOptions, ParamKind,
    ParamVector,
};
use crate::table::{Margin, ProbVector, VarSet, VariableSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct LmOptions {
    /// Convergence threshold on `‖η_H^(s) − η_H^(s−1)‖_∞`.
    pub tol: f64,
    pub max_iter: usize,
    /// `‖η_H‖_∞` beyond which the iteration is declared divergent.
    pub blowup: f64,
    /// The step norm must decrease at least once over this many iterations.
    pub window: usize,
    pub newton: NewtonOptions,
    /// Starting `η_H`, aligned with `H`; zeros when absent.
    pub start: Option<Vec<f64>>,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            tol: 1e-9,
            max_iter: 500,
            blowup: 1e3,
            window: 50,
            // Inner solves well below the outer step tolerance, so that a
            // fixed point is recognized in a single pass.
            newton: NewtonOptions {
                tol: 1e-12,
                ..NewtonOptions::default()
            },
            start: None,
        }
    }
}

/// Everything needed to reconstruct one margin by the LM iteration.
#[derive(Clone, Debug)]
pub struct LmInputs {
    pub margin: Margin,
    /// Previously defined terms that are not redefined here.
    pub r: TermSelection,
    /// Previously defined terms that are constrained again here.
    pub i_dup: TermSelection,
    /// Replacement terms, left free to make room for `i_dup`.
    pub h: TermSelection,
    /// The remaining terms of the margin.
    pub l_free: TermSelection,
    pub mu_r: Vec<f64>,
    pub mu_i: Vec<f64>,
    pub eta_i: Vec<f64>,
    pub eta_l: Vec<f64>,
    pub options: LmOptions,
}

impl LmInputs {
    /// `l_free` is everything of `P(M)` outside `r`, `i_dup` and `h`, in
    /// canonical order; `eta_l` must follow that order.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: &VariableSpec,
        r: TermSelection,
        i_dup: TermSelection,
        h: TermSelection,
        mu_r: Vec<f64>,
        mu_i: Vec<f64>,
        eta_i: Vec<f64>,
        eta_l: Vec<f64>,
    ) -> Result<Self> {
        let margin = r.margin().clone();
        let l_free = free_terms(spec, &margin, &r, &i_dup, &h);
        let inputs = LmInputs {
            margin,
            r,
            i_dup,
            h,
            l_free,
            mu_r,
            mu_i,
            eta_i,
            eta_l,
            options: LmOptions::default(),
        };
        inputs.validate(spec)?;
        Ok(inputs)
    }

    /// Targets read off a single distribution; `p` is then a fixed point.
    pub fn from_distribution(
        spec: &VariableSpec,
        p: &ProbVector,
        r: TermSelection,
        i_dup: TermSelection,
        h: TermSelection,
    ) -> Result<Self> {
        let margin = p.margin().clone();
        let l_free = free_terms(spec, &margin, &r, &i_dup, &h);
        let mu_r = mu_of(p, &r, spec)?.values;
        let mu_i = mu_of(p, &i_dup, spec)?.values;
        let eta_i = eta_on(p, &i_dup, spec).values;
        let eta_l = eta_on(p, &l_free, spec).values;
        LmInputs::new(spec, r, i_dup, h, mu_r, mu_i, eta_i, eta_l)
    }

    pub fn with_options(mut self, options: LmOptions) -> Self {
        self.options = options;
        self
    }

    pub fn validate(&self, spec: &VariableSpec) -> Result<()> {
        let parts = [&self.r, &self.i_dup, &self.h, &self.l_free];
        if parts.iter().any(|s| s.margin() != &self.margin) {
            return Err(MllpError::InvalidSelection(
                "selections on different margins".into(),
            ));
        }
        let union = self
            .r
            .concat(&self.i_dup)
            .and_then(|u| u.concat(&self.h))
            .and_then(|u| u.concat(&self.l_free))?;
        if !union.same_terms(&TermSelection::full(spec, &self.margin)) {
            return Err(MllpError::InvalidSelection(
                "R, I, H and L do not cover the margin".into(),
            ));
        }
        if self.h.len() != self.i_dup.len() {
            return Err(MllpError::InvalidPlan(format!(
                "{} replacement terms for {} duplicated terms",
                self.h.len(),
                self.i_dup.len()
            )));
        }
        let lens = [
            (self.mu_r.len(), self.r.len(), "mean targets of R"),
            (self.mu_i.len(), self.i_dup.len(), "mean targets of I"),
            (self.eta_i.len(), self.i_dup.len(), "canonical targets of I"),
            (
                self.eta_l.len(),
                self.l_free.len(),
                "canonical targets of L",
            ),
        ];
        for (got, want, what) in lens {
            if got != want {
                return Err(MllpError::InvalidSelection(format!(
                    "{what}: {got} values for {want} terms"
                )));
            }
        }
        let all = self
            .mu_r
            .iter()
            .chain(&self.mu_i)
            .chain(&self.eta_i)
            .chain(&self.eta_l);
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(MllpError::InvalidSelection("non-finite target".into()));
        }
        if let Some(s) = &self.options.start {
            if s.len() != self.h.len() {
                return Err(MllpError::InvalidSelection(
                    "start vector has wrong length".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Terms of the margin outside `r`, `i_dup` and `h`, canonical order.
pub fn free_terms(
    spec: &VariableSpec,
    margin: &Margin,
    r: &TermSelection,
    i_dup: &TermSelection,
    h: &TermSelection,
) -> TermSelection {
    TermSelection::full(spec, margin)
        .difference(r)
        .difference(i_dup)
        .difference(h)
}

#[derive(Clone, Debug)]
pub struct LmResult {
    /// Distribution from the final M-step.
    pub p: ProbVector,
    pub iterations: usize,
    pub step_norm: f64,
    pub eta_h: ParamVector,
}

/// Output of one full M-step/L-step pass.
#[derive(Clone, Debug)]
pub struct LmStep {
    pub eta_h: Vec<f64>,
    /// Distribution produced by the M-step.
    pub p_m: ProbVector,
    /// Distribution produced by the L-step.
    pub p_l: ProbVector,
}

#[derive(Default)]
struct WarmStart {
    m: Option<Vec<f64>>,
    l: Option<Vec<f64>>,
}

fn read_eta(eta: &ParamVector, sel: &TermSelection) -> Vec<f64> {
    sel.iter()
        .map(|t| eta.get(t).expect("full canonical vector"))
        .collect()
}

fn pv(sel: &TermSelection, values: Vec<f64>, kind: ParamKind) -> Result<ParamVector> {
    ParamVector::new(sel.clone(), values, kind)
}

fn m_step(
    spec: &VariableSpec,
    inputs: &LmInputs,
    eta_h: &[f64],
    warm: &mut WarmStart,
) -> Result<ProbVector> {
    let mean_sel = inputs.r.concat(&inputs.i_dup)?;
    let mut mean_vals = inputs.mu_r.clone();
    mean_vals.extend_from_slice(&inputs.mu_i);
    let canon_sel = inputs.l_free.concat(&inputs.h)?;
    let mut canon_vals = inputs.eta_l.clone();
    canon_vals.extend_from_slice(eta_h);
    let mixed = MixedSpec::new(
        spec,
        inputs.margin.clone(),
        pv(&mean_sel, mean_vals, ParamKind::Mean)?,
        pv(&canon_sel, canon_vals, ParamKind::Canonical)?,
    )?;
    let sol = mixed_solve_from(spec, &mixed, &inputs.options.newton, warm.m.as_deref())?;
    warm.m = Some(read_eta(&sol.eta, &mean_sel));
    Ok(sol.p)
}

fn l_step(
    spec: &VariableSpec,
    inputs: &LmInputs,
    mu_h: &[f64],
    warm: &mut WarmStart,
) -> Result<(Vec<f64>, ProbVector)> {
    let mean_sel = inputs.r.concat(&inputs.h)?;
    let mut mean_vals = inputs.mu_r.clone();
    mean_vals.extend_from_slice(mu_h);
    let canon_sel = inputs.i_dup.concat(&inputs.l_free)?;
    let mut canon_vals = inputs.eta_i.clone();
    canon_vals.extend_from_slice(&inputs.eta_l);
    let mixed = MixedSpec::new(
        spec,
        inputs.margin.clone(),
        pv(&mean_sel, mean_vals, ParamKind::Mean)?,
        pv(&canon_sel, canon_vals, ParamKind::Canonical)?,
    )?;
    let sol = mixed_solve_from(spec, &mixed, &inputs.options.newton, warm.l.as_deref())?;
    warm.l = Some(read_eta(&sol.eta, &mean_sel));
    Ok((read_eta(&sol.eta, &inputs.h), sol.p))
}

fn step_warm(
    spec: &VariableSpec,
    inputs: &LmInputs,
    eta_h: &[f64],
    warm: &mut WarmStart,
) -> Result<LmStep> {
    let p_m = m_step(spec, inputs, eta_h, warm)?;
    let mu_h = mu_of(&p_m, &inputs.h, spec)?.values;
    let (eta_out, p_l) = l_step(spec, inputs, &mu_h, warm)?;
    Ok(LmStep {
        eta_h: eta_out,
        p_m,
        p_l,
    })
}

/// One LM pass from `η_H = eta_h`, solved from cold starts.
pub fn lm_step(spec: &VariableSpec, inputs: &LmInputs, eta_h: &[f64]) -> Result<LmStep> {
    step_warm(spec, inputs, eta_h, &mut WarmStart::default())
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn lm_reconstruct(spec: &VariableSpec, inputs: &LmInputs) -> Result<LmResult> {
    inputs.validate(spec)?;
    let opts = &inputs.options;
    let mut eta_h = opts
        .start
        .clone()
        .unwrap_or_else(|| vec![0.0; inputs.h.len()]);
    let mut warm = WarmStart::default();
    let mut norms: Vec<f64> = Vec::new();
    let inner = |err: MllpError, iterations: usize, residual: f64| MllpError::NonConvergence {
        context: format!(
            "LM iteration on margin {}: inner solve failed ({err})",
            inputs.margin
        ),
        iterations,
        residual,
    };
    loop {
        let s = norms.len() + 1;
        let last = norms.last().copied().unwrap_or(f64::INFINITY);
        if s > opts.max_iter {
            return Err(MllpError::NonConvergence {
                context: format!("LM iteration on margin {}", inputs.margin),
                iterations: s - 1,
                residual: last,
            });
        }
        let step = step_warm(spec, inputs, &eta_h, &mut warm).map_err(|e| inner(e, s, last))?;
        let norm = eta_h
            .iter()
            .zip(&step.eta_h)
            .fold(0.0, |m: f64, (a, b)| m.max((a - b).abs()));
        eta_h = step.eta_h;
        norms.push(norm);
        if norm < opts.tol {
            let p = m_step(spec, inputs, &eta_h, &mut warm).map_err(|e| inner(e, s, norm))?;
            return Ok(LmResult {
                p,
                iterations: s,
                step_norm: norm,
                eta_h: ParamVector::new(inputs.h.clone(), eta_h, ParamKind::Canonical)?,
            });
        }
        if sup_norm(&eta_h) > opts.blowup || !norm.is_finite() {
            return Err(MllpError::NonConvergence {
                context: format!("LM iteration on margin {}: η_H diverged", inputs.margin),
                iterations: s,
                residual: norm,
            });
        }
        if s > opts.window && norm >= norms[s - 1 - opts.window] {
            return Err(MllpError::NonConvergence {
                context: format!(
                    "LM iteration on margin {}: step norm did not decrease over {} iterations",
                    inputs.margin, opts.window
                ),
                iterations: s,
                residual: norm,
            });
        }
    }
}

/// Information blocks for a list of term selections, all on one margin.
struct FisherBlocks {
    f: DMatrix<f64>,
    offsets: Vec<usize>,
}

impl FisherBlocks {
    fn new(spec: &VariableSpec, p: &ProbVector, parts: &[&TermSelection]) -> Self {
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        for part in parts {
            let g = indicator_matrix(part, spec);
            offsets.push(offsets.last().unwrap() + g.ncols());
            cols.push(g);
        }
        let n = p.len();
        let total = *offsets.last().unwrap();
        let mut g = DMatrix::zeros(n, total);
        for (k, part) in cols.iter().enumerate() {
            g.view_mut((0, offsets[k]), (n, part.ncols()))
                .copy_from(part);
        }
        let f = fisher_from_indicators(p.values(), &g, &g);
        FisherBlocks { f, offsets }
    }

    fn block(&self, a: usize, b: usize) -> DMatrix<f64> {
        let (r0, r1) = (self.offsets[a], self.offsets[a + 1]);
        let (c0, c1) = (self.offsets[b], self.offsets[b + 1]);
        self.f.view((r0, c0), (r1 - r0, c1 - c0)).into_owned()
    }
}

fn check_same_margin(p: &ProbVector, parts: &[&TermSelection]) -> Result<()> {
    for (k, a) in parts.iter().enumerate() {
        if a.margin() != p.margin() {
            return Err(MllpError::InvalidSelection(format!(
                "selection on {} but table on {}",
                a.margin(),
                p.margin()
            )));
        }
        for b in &parts[k + 1..] {
            if !a.is_disjoint(b) {
                return Err(MllpError::InvalidSelection("selections overlap".into()));
            }
        }
    }
    Ok(())
}

fn inverse_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    m.clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| MllpError::SingularMatrix(what.into()))
}

/// `x − y_a z⁻¹ y_b` with an empty conditioning block handled.
fn schur(
    x: DMatrix<f64>,
    ya: &DMatrix<f64>,
    zinv: &DMatrix<f64>,
    yb: &DMatrix<f64>,
) -> DMatrix<f64> {
    if zinv.nrows() == 0 {
        x
    } else {
        x - ya * zinv * yb
    }
}

/// `Q = F_IH − F_IR F_RR⁻¹ F_RH`, cross-checked against the projector form
/// `G_I' D (I − P_R̄)(I − P_∅) P_{I∪R} G_H`.
pub fn compute_q(
    spec: &VariableSpec,
    p: &ProbVector,
    i_dup: &TermSelection,
    h: &TermSelection,
    r: &TermSelection,
) -> Result<DMatrix<f64>> {
    check_same_margin(p, &[i_dup, h, r])?;
    let fb = FisherBlocks::new(spec, p, &[i_dup, h, r]);
    let frr_inv = inverse_spd(&fb.block(2, 2), "F_RR")?;
    let q = schur(fb.block(0, 1), &fb.block(0, 2), &frr_inv, &fb.block(2, 1));

    let alt = q_projector_form(spec, p, i_dup, h, r, &frr_inv);
    let scale = 1.0 + q.amax();
    let gap = (&q - &alt).amax();
    if gap > 1e-9 * scale {
        return Err(MllpError::Consistency(format!("Q forms differ by {gap:e}")));
    }
    Ok(q)
}

fn q_projector_form(
    spec: &VariableSpec,
    p: &ProbVector,
    i_dup: &TermSelection,
    h: &TermSelection,
    r: &TermSelection,
    frr_inv: &DMatrix<f64>,
) -> DMatrix<f64> {
    let n = p.len();
    let pi = p.values();
    let d = nalgebra::DVector::from_column_slice(pi);
    let ones = nalgebra::DVector::from_element(n, 1.0);
    // I − P_∅ with P_∅ = 1π'.
    let centre = DMatrix::identity(n, n) - &ones * d.transpose();
    let gi = indicator_matrix(i_dup, spec);
    let gh = indicator_matrix(h, spec);

    let mut sets: Vec<VarSet> = i_dup.interactions();
    sets.extend(r.interactions());
    sets.sort();
    sets.dedup();
    let blocks: Vec<DMatrix<f64>> = sets
        .iter()
        .map(|a| configuration_indicator(spec, p.margin(), a))
        .collect();
    let width: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut x = DMatrix::zeros(n, width);
    let mut off = 0;
    for b in &blocks {
        x.view_mut((0, off), (n, b.ncols())).copy_from(b);
        off += b.ncols();
    }
    let p_span = span_projector(&x, pi);

    let dmat = DMatrix::from_diagonal(&d);
    let residual = if r.is_empty() {
        DMatrix::identity(n, n)
    } else {
        let gr = centre.clone() * indicator_matrix(r, spec);
        let p_rbar = &gr * frr_inv * gr.transpose() * &dmat;
        DMatrix::identity(n, n) - p_rbar
    };
    gi.transpose() * dmat * residual * centre * p_span * gh
}

/// Linearization of one LM step at `p`.
#[derive(Clone, Debug)]
pub struct LmJacobian {
    /// `J = A⁻¹ B`.
    pub j: DMatrix<f64>,
    /// `F_HH − F_HR F_RR⁻¹ F_RH` (L-step sensitivity).
    pub a: DMatrix<f64>,
    /// `F_HH − F_HV F_VV⁻¹ F_VH` with `V = R ∪ I` (M-step sensitivity).
    pub b: DMatrix<f64>,
    /// `A − B`.
    pub c: DMatrix<f64>,
    pub spectral_radius: f64,
}

pub fn lm_jacobian(
    spec: &VariableSpec,
    p: &ProbVector,
    i_dup: &TermSelection,
    h: &TermSelection,
    r: &TermSelection,
) -> Result<LmJacobian> {
    check_same_margin(p, &[i_dup, h, r])?;
    let v = r.concat(i_dup)?;
    let fb = FisherBlocks::new(spec, p, &[h, r, &v]);
    let fhh = fb.block(0, 0);
    let frr_inv = inverse_spd(&fb.block(1, 1), "F_RR")?;
    let fvv_inv = inverse_spd(&fb.block(2, 2), "F_VV")?;
    let a = schur(fhh.clone(), &fb.block(0, 1), &frr_inv, &fb.block(1, 0));
    let b = schur(fhh, &fb.block(0, 2), &fvv_inv, &fb.block(2, 0));
    if a.nrows() > 0 && singular_value_ratio(&a) < 1e-12 {
        return Err(MllpError::SingularMatrix(
            "A is singular: the replacement terms are degenerate given R".into(),
        ));
    }
    let a_inv = a
        .clone()
        .try_inverse()
        .ok_or_else(|| MllpError::SingularMatrix("A".into()))?;
    let j = &a_inv * &b;
    let c = &a - &b;
    let spectral_radius =
        similar_symmetric_radius(&a, &b).map_or_else(|| spectral_radius(&j), Ok)?;
    Ok(LmJacobian {
        j,
        a,
        b,
        c,
        spectral_radius,
    })
}

/// Largest eigenvalue modulus, complex eigenvalues included.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(MllpError::InvalidSelection(
            "spectral radius of a non-square matrix".into(),
        ));
    }
    if m.nrows() == 0 {
        return Ok(0.0);
    }
    // the QR sweep can stall at machine epsilon on nearly defective input
    let schur = [f64::EPSILON, 1e-14, 1e-12]
        .iter()
        .find_map(|&eps| Schur::try_new(m.clone(), eps, 10_000))
        .ok_or(MllpError::EigenFailure)?;
    let eig = schur.complex_eigenvalues();
    Ok(eig
        .iter()
        .map(|z: &Complex<f64>| z.norm())
        .fold(0.0, f64::max))
}

/// `A⁻¹B` with `A` positive definite and `B` symmetric is similar to
/// `L⁻¹ B L⁻ᵀ` (`A = LLᵀ`), whose spectrum is real and cheap to get.
fn similar_symmetric_radius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    if a.nrows() == 0 {
        return Some(0.0);
    }
    let l = a.clone().cholesky()?.l();
    let l_inv = l.try_inverse()?;
    let s = &l_inv * b * l_inv.transpose();
    let s = (&s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(s, f64::EPSILON, 10_000)?;
    Some(eig.eigenvalues.iter().fold(0.0, |m, v| m.max(v.abs())))
}

/// `σ_min / σ_max`; zero for a null matrix.
pub fn singular_value_ratio(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 1.0;
    }
    let s = m.singular_values();
    let max = s.max();
    if max == 0.0 {
        0.0
    } else {
        s.min() / max
    }
}
