//! Marginal log-linear parameterizations of contingency tables: design
//! matrices, mixed-parameter reconstruction, the two-step fixed-point
//! algorithm for interactions constrained in more than one margin, and
//! smoothness diagnostics for the replacement plans it needs.

pub mod design;
pub mod diagnostics;
pub mod error;
pub mod lm;
pub mod model;
pub mod param;
pub mod replacement;
pub mod table;

pub use design::{build_c, build_g, build_s, indicator_matrix, TermId, TermSelection};
pub use diagnostics::{classify_smoothness, Classification, SmoothnessVerdict};
pub use error::{MllpError, Result};
pub use lm::{
    compute_q, lm_jacobian, lm_reconstruct, spectral_radius, LmInputs, LmOptions, LmResult,
};
pub use model::{parse_model, run_pipeline, ModelSpec, PipelineOptions, PipelineResult};
pub use param::{
    eta_of, fisher_f, mixed_solve, mu_of, p_of_eta, MixedSpec, ParamKind, ParamVector,
};
pub use replacement::{
    check_valid_replacement, ci_to_interactions, construct_replacement, context_restriction,
    CiStatement, ContextSpec, ReplacementElement, ReplacementPlan,
};
pub use table::{Margin, ProbVector, SamplingMode, VarSet, VariableSpec};
