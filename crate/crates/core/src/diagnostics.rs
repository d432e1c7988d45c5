//! Numerical smoothness evidence for replacement plans, and structural
//! checks of the projector and contrast-conversion identities.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::design::{
    build_s, configuration_indicator, indicator_matrix, span_projector, weighted_projector,
    TermSelection,
};
use crate::error::{MllpError, Result};
use crate::lm::{compute_q, lm_jacobian, singular_value_ratio};
use crate::param::fisher_f;
use crate::replacement::{check_valid_replacement, ReplacementPlan, ValidityReport};
use crate::table::{random_distribution, Margin, SamplingMode, VarSet, VariableSpec};

/// Full rank when `σ_min / σ_max` exceeds this.
pub const RANK_TOLERANCE: f64 = 1e-8;
/// Null when `‖Q‖_F` falls below this multiple of `‖F_II‖_F`.
pub const NULL_TOLERANCE: f64 = 1e-10;
pub const DEFAULT_TRIALS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Classification {
    Smooth,
    NonIdentifiable,
    Inconclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Independence,
    General,
}

/// Q statistics at one random distribution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QTrial {
    pub trial: usize,
    pub seed: u64,
    pub singular_value_ratio: f64,
    pub q_norm: f64,
    pub f_ii_norm: f64,
    /// Spectral radius of the LM Jacobian; absent when it could not be formed.
    pub spectral_radius: Option<f64>,
}

impl QTrial {
    pub fn full_rank(&self) -> bool {
        self.singular_value_ratio > RANK_TOLERANCE
    }

    pub fn null(&self) -> bool {
        self.q_norm < NULL_TOLERANCE * self.f_ii_norm
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SmoothnessVerdict {
    pub classification: Classification,
    /// "analytically certified at independence" or "numerically supported"
    /// for smooth verdicts.
    pub certification: Option<String>,
    pub validity: ValidityReport,
    pub independence: Vec<QTrial>,
    pub general: Vec<QTrial>,
    pub trials: usize,
    pub seed: u64,
    /// Set when the plan could not be evaluated at all.
    pub problem: Option<String>,
    pub tool_version: String,
}

pub fn trial_seed(master: u64, stratum: Stratum, trial: usize) -> u64 {
    let lane = match stratum {
        Stratum::Independence => 0u64,
        Stratum::General => 1u64,
    };
    let mut z = master ^ ((lane << 32) | trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn q_trial(
    spec: &VariableSpec,
    margin: &Margin,
    sel: &(TermSelection, TermSelection, TermSelection),
    stratum: Stratum,
    trial: usize,
    master: u64,
) -> Result<QTrial> {
    let (r, i, h) = sel;
    let seed = trial_seed(master, stratum, trial);
    let mode = match stratum {
        Stratum::Independence => SamplingMode::CompleteIndependence,
        Stratum::General => SamplingMode::General,
    };
    let p = random_distribution(spec, margin, mode, seed);
    let q = compute_q(spec, &p, i, h, r)?;
    let f_ii = fisher_f(&p, i, i, spec);
    let spectral_radius = lm_jacobian(spec, &p, i, h, r)
        .ok()
        .map(|j| j.spectral_radius);
    Ok(QTrial {
        trial,
        seed,
        singular_value_ratio: singular_value_ratio(&q),
        q_norm: q.norm(),
        f_ii_norm: f_ii.norm(),
        spectral_radius,
    })
}

/// Evaluates `Q` at `trials` complete-independence and `trials` general
/// random tables over the plan's margin.
pub fn classify_smoothness(
    spec: &VariableSpec,
    plan: &ReplacementPlan,
    trials: usize,
    seed: u64,
) -> SmoothnessVerdict {
    let validity = check_valid_replacement(plan);
    let mut verdict = SmoothnessVerdict {
        classification: Classification::Inconclusive,
        certification: None,
        validity,
        independence: Vec::new(),
        general: Vec::new(),
        trials,
        seed,
        problem: None,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let prepared = Margin::new(spec, plan.margin.clone()).and_then(|m| {
        let sel = plan.selections(spec)?;
        if sel.2.len() != sel.1.len() {
            return Err(MllpError::InvalidPlan(format!(
                "{} replacement terms for {} duplicated terms",
                sel.2.len(),
                sel.1.len()
            )));
        }
        Ok((m, sel))
    });
    let (margin, sel) = match prepared {
        Ok(x) => x,
        Err(e) => {
            verdict.problem = Some(e.to_string());
            return verdict;
        }
    };
    let run = |stratum: Stratum| -> Result<Vec<QTrial>> {
        (0..trials)
            .into_par_iter()
            .map(|k| q_trial(spec, &margin, &sel, stratum, k, seed))
            .collect()
    };
    let (ind, gen) = match (run(Stratum::Independence), run(Stratum::General)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            verdict.problem = Some(e.to_string());
            return verdict;
        }
    };
    let nonempty = trials > 0 && !sel.1.is_empty();
    verdict.classification = if nonempty && ind.iter().chain(&gen).all(QTrial::full_rank) {
        Classification::Smooth
    } else if nonempty && ind.iter().all(QTrial::null) {
        Classification::NonIdentifiable
    } else {
        Classification::Inconclusive
    };
    if verdict.classification == Classification::Smooth {
        verdict.certification = Some(if verdict.validity.is_valid() {
            "analytically certified at independence".to_string()
        } else {
            "numerically supported".to_string()
        });
    }
    verdict.independence = ind;
    verdict.general = gen;
    verdict
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectorCheck {
    pub trials: usize,
    /// Worst `‖P_a G_{t,h} − G_t P(x_h = j_h)‖_∞`; only when `t ⊆ a` and `a ∩ h = ∅`.
    pub max_product_error: Option<f64>,
    /// Worst residual of `P_a G_{t,h}` outside the span for `a ∩ (t ∪ h)`.
    pub max_containment_residual: f64,
}

fn factor_cases(a: &VarSet, t: &VarSet, h: &VarSet, all: &VarSet) -> String {
    all.iter()
        .map(|j| {
            let role = if t.contains(j) {
                "in t"
            } else if h.contains(j) {
                "in h"
            } else {
                "outside t ∪ h"
            };
            let side = if a.contains(j) { "in a" } else { "outside a" };
            format!("X{j} {role}, {side}")
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Projections of fixed-category indicator columns onto configuration spans
/// under complete independence.
pub fn verify_projector_factorization(
    spec: &VariableSpec,
    a: &VarSet,
    t: &VarSet,
    h: &VarSet,
    j_h: &[usize],
    trials: usize,
    seed: u64,
) -> Result<ProjectorCheck> {
    let margin = Margin::full(spec);
    let block = TermSelection::fixed_block(spec, &margin, t, h, j_h)?;
    let g_th = indicator_matrix(&block, spec);
    let g_t = indicator_matrix(&TermSelection::block(spec, &margin, t)?, spec);
    let target = a.intersection(&t.union(h));
    let span = configuration_indicator(spec, &margin, &target);
    let ones = vec![1.0; span.nrows()];
    let contain = span_projector(&span, &ones);
    let product_case = t.is_subset(a) && a.is_disjoint(h);

    let mut max_product: f64 = 0.0;
    let mut max_resid: f64 = 0.0;
    for k in 0..trials {
        let p = random_distribution(
            spec,
            &margin,
            SamplingMode::CompleteIndependence,
            trial_seed(seed, Stratum::Independence, k),
        );
        let pa = weighted_projector(spec, a, &p)?;
        let projected = &pa * &g_th;
        let resid = (&projected - &contain * &projected).amax();
        max_resid = max_resid.max(resid);
        if resid >= 1e-9 {
            return Err(MllpError::Consistency(format!(
                "P_a G leaves the span of X_{target} by {resid:e} ({})",
                factor_cases(a, t, h, &margin)
            )));
        }
        if product_case {
            let grid = crate::table::CellGrid::new(spec, &margin);
            let prob: f64 = (0..grid.n_cells())
                .filter(|&c| {
                    h.iter()
                        .zip(j_h)
                        .all(|(v, &l)| grid.cell(c)[margin.position(v).unwrap()] == l)
                })
                .map(|c| p.values()[c])
                .sum();
            let err = (&projected - &g_t * prob).amax();
            max_product = max_product.max(err);
            if err >= 1e-10 {
                return Err(MllpError::Consistency(format!(
                    "P_a G differs from G_t P(x_h = j_h) by {err:e} ({})",
                    factor_cases(a, t, h, &margin)
                )));
            }
        }
    }
    Ok(ProjectorCheck {
        trials,
        max_product_error: product_case.then_some(max_product),
        max_containment_residual: max_resid,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConversionCheck {
    pub pairs: usize,
    pub max_forbidden: f64,
}

/// For every `I ⊆ M`: averaged contrasts of `I` vanish on every block `J ⊉ I`,
/// and reference-level contrasts vanish on every block `J ≠ I`.
pub fn verify_conversion_structure(
    spec: &VariableSpec,
    margin: &Margin,
) -> Result<ConversionCheck> {
    let subsets = margin.subsets();
    let gs: Vec<DMatrix<f64>> = subsets
        .iter()
        .map(|j| {
            indicator_matrix(
                &TermSelection::block(spec, margin, j).expect("subset"),
                spec,
            )
        })
        .collect();
    let mut pairs = 0;
    let mut worst: f64 = 0.0;
    for i in &subsets {
        let block = TermSelection::block(spec, margin, i)?;
        let s_avg = build_s(&block, spec, true);
        let s_ref = build_s(&block, spec, false);
        for (j, gj) in subsets.iter().zip(&gs) {
            let mut check = |m: &DMatrix<f64>, what: &str| -> Result<()> {
                let v = (m * gj).amax();
                pairs += 1;
                worst = worst.max(v);
                if v >= 1e-12 {
                    return Err(MllpError::Consistency(format!(
                        "{what} contrasts of {i} do not vanish on block {j} ({v:e})"
                    )));
                }
                Ok(())
            };
            if !i.is_subset(j) {
                check(&s_avg, "averaged")?;
            }
            if i != j {
                check(&s_ref, "reference-level")?;
            }
        }
    }
    Ok(ConversionCheck {
        pairs,
        max_forbidden: worst,
    })
}
