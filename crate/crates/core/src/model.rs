//! JSON model format and the margin-by-margin reconstruction pipeline.
//!
//! ```json
//! {"levels": [2, 2, 2, 2],
//!  "margins": [
//!    {"vars": [1, 2, 3], "statements": [{"a": [1], "b": [2], "c": [3]}]},
//!    {"vars": [1, 2, 3, 4], "statements": [{"a": [1], "b": [2], "c": [3, 4]}],
//!     "plan": {"i": [[1, 2], [1, 2, 3]],
//!              "h": [{"t": [1, 2], "h": [4]}, {"t": [1, 2, 3], "h": [4]}]}}],
//!  "free_params": {"I={4};x={1}": 0.2}}
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::design::{TermId, TermSelection};
use crate::diagnostics::{classify_smoothness, Classification, SmoothnessVerdict, DEFAULT_TRIALS};
use crate::error::{MllpError, Result};
use crate::lm::{free_terms, lm_reconstruct, LmInputs, LmOptions};
use crate::param::{eta_on, mixed_solve, mu_of, MixedSpec, NewtonOptions, ParamKind, ParamVector};
use crate::replacement::{
    ci_to_interactions, context_restriction, defined_within, suggest_plan, CiStatement,
    ContextSpec, ReplacementElement, ReplacementPlan,
};
use crate::table::{Margin, ProbVector, VarSet, VariableSpec};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    levels: Vec<usize>,
    margins: Vec<RawMargin>,
    #[serde(default)]
    free_params: BTreeMap<String, f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMargin {
    vars: Vec<usize>,
    #[serde(default)]
    statements: Vec<RawStatement>,
    #[serde(default)]
    plan: Option<RawPlan>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStatement {
    a: Vec<usize>,
    b: Vec<usize>,
    #[serde(default)]
    c: Vec<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    i: Vec<Vec<usize>>,
    h: Vec<RawElement>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawElement {
    t: Vec<usize>,
    #[serde(default)]
    h: Vec<usize>,
    #[serde(default)]
    j: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginSpec {
    pub margin: Margin,
    pub statements: Vec<CiStatement>,
    pub plan: Option<ReplacementPlan>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSpec {
    pub spec: VariableSpec,
    pub margins: Vec<MarginSpec>,
    pub free_params: BTreeMap<TermId, f64>,
    pub warnings: Vec<String>,
}

fn model_err(location: impl Into<String>, message: impl Into<String>) -> MllpError {
    MllpError::Model {
        location: location.into(),
        message: message.into(),
    }
}

fn var_set(spec: &VariableSpec, vars: &[usize], location: &str) -> Result<VarSet> {
    if let Some(v) = vars.iter().find(|v| !spec.contains_var(**v)) {
        return Err(model_err(location, format!("unknown variable {v}")));
    }
    let set = VarSet::new(vars.iter().copied());
    if set.len() != vars.len() {
        return Err(model_err(location, "variable listed twice"));
    }
    Ok(set)
}

fn syntax_err(e: serde_json::Error) -> MllpError {
    let location = format!("line {}, column {}", e.line(), e.column());
    // serde_json appends the same location to its message
    let text = e.to_string();
    let suffix = format!(" at line {} column {}", e.line(), e.column());
    let message = text.strip_suffix(&suffix).unwrap_or(&text).to_string();
    model_err(location, message)
}

pub fn parse_model(text: &str) -> Result<ModelSpec> {
    let raw: RawModel = serde_json::from_str(text).map_err(syntax_err)?;
    let spec =
        VariableSpec::new(raw.levels.clone()).map_err(|e| model_err("levels", e.to_string()))?;
    if raw.margins.is_empty() {
        return Err(model_err("margins", "at least one margin is required"));
    }

    let mut margins: Vec<MarginSpec> = Vec::new();
    let mut warnings = Vec::new();
    for (k, rm) in raw.margins.iter().enumerate() {
        let loc = format!("margins[{k}]");
        let vars = var_set(&spec, &rm.vars, &format!("{loc}.vars"))?;
        let margin = Margin::new(&spec, vars)
            .map_err(|e| model_err(format!("{loc}.vars"), e.to_string()))?;
        if let Some(prev) = margins.last() {
            if prev.margin.len() > margin.len() {
                return Err(model_err(
                    format!("{loc}.vars"),
                    format!(
                        "margins must be listed in non-decreasing size: {} follows {}",
                        margin, prev.margin
                    ),
                ));
            }
        }
        if margins.iter().any(|m| m.margin == margin) {
            return Err(model_err(
                format!("{loc}.vars"),
                format!("margin {margin} listed twice"),
            ));
        }
        let mut statements: Vec<CiStatement> = Vec::new();
        for (s, rs) in rm.statements.iter().enumerate() {
            let sloc = format!("{loc}.statements[{s}]");
            let stmt = CiStatement::new(
                var_set(&spec, &rs.a, &format!("{sloc}.a"))?,
                var_set(&spec, &rs.b, &format!("{sloc}.b"))?,
                var_set(&spec, &rs.c, &format!("{sloc}.c"))?,
            )
            .map_err(|e| model_err(&sloc, e.to_string()))?;
            if &stmt.margin() != margin.vars() {
                return Err(model_err(
                    &sloc,
                    format!("statement {stmt} does not span margin {margin}"),
                ));
            }
            if statements.contains(&stmt) {
                return Err(model_err(&sloc, format!("statement {stmt} repeated")));
            }
            statements.push(stmt);
        }
        let prior: Vec<VarSet> = margins.iter().map(|m| m.margin.vars().clone()).collect();
        let defined = defined_within(&prior, margin.vars());
        let duplicating: Vec<usize> = statements
            .iter()
            .enumerate()
            .filter(|(_, st)| ci_to_interactions(st).iter().any(|i| defined.contains(i)))
            .map(|(s, _)| s)
            .collect();
        if duplicating.len() > 1 {
            return Err(model_err(
                format!("{loc}.statements"),
                "more than one statement constrains interactions defined in earlier margins; \
                 split them over separate margins",
            ));
        }
        let plan = match &rm.plan {
            None => None,
            Some(rp) => {
                let ploc = format!("{loc}.plan");
                if duplicating.is_empty() {
                    return Err(model_err(
                        &ploc,
                        "plan given but no statement constrains an earlier interaction",
                    ));
                }
                Some(parse_plan(
                    &spec,
                    &margin,
                    rp,
                    &prior,
                    &statements[duplicating[0]],
                    &ploc,
                )?)
            }
        };
        margins.push(MarginSpec {
            margin,
            statements,
            plan,
        });
    }

    let full = Margin::full(&spec);
    if margins.last().map(|m| &m.margin) != Some(&full) {
        warnings.push(format!(
            "last margin is not {full}; appending it with no statements"
        ));
        margins.push(MarginSpec {
            margin: full.clone(),
            statements: Vec::new(),
            plan: None,
        });
    }

    let mut free_params = BTreeMap::new();
    for key in raw.free_params.keys() {
        let term = TermId::parse(key)
            .map_err(|e| model_err(format!("free_params.{key}"), e.to_string()))?;
        free_params.insert(term, raw.free_params[key]);
    }
    let model = ModelSpec {
        spec,
        margins,
        free_params,
        warnings,
    };
    check_free_params(&model, &model.free_params)?;
    Ok(model)
}

fn parse_plan(
    spec: &VariableSpec,
    margin: &Margin,
    rp: &RawPlan,
    prior: &[VarSet],
    stmt: &CiStatement,
    loc: &str,
) -> Result<ReplacementPlan> {
    let defined = defined_within(prior, margin.vars());
    let a = ci_to_interactions(stmt);
    let mut i_dup = Vec::new();
    for (k, raw) in rp.i.iter().enumerate() {
        let iloc = format!("{loc}.i[{k}]");
        let s = var_set(spec, raw, &iloc)?;
        if !(defined.contains(&s) && a.contains(&s)) {
            return Err(model_err(
                &iloc,
                format!("{s} is not an earlier interaction constrained by {stmt}"),
            ));
        }
        i_dup.push(s);
    }
    let mut h = Vec::new();
    for (k, raw) in rp.h.iter().enumerate() {
        let hloc = format!("{loc}.h[{k}]");
        let t = var_set(spec, &raw.t, &format!("{hloc}.t"))?;
        let hv = var_set(spec, &raw.h, &format!("{hloc}.h"))?;
        let j = raw.j.clone().unwrap_or_else(|| vec![1; hv.len()]);
        let element = ReplacementElement::with_levels(t, hv, j);
        if defined.contains(&element.interaction()) {
            return Err(model_err(
                &hloc,
                format!(
                    "{} was defined in an earlier margin and cannot be freed here",
                    element.interaction()
                ),
            ));
        }
        h.push(element);
    }
    let plan = ReplacementPlan::with_prior(margin.vars().clone(), i_dup, h, prior)
        .map_err(|e| model_err(loc, e.to_string()))?;
    let (_, i_sel, h_sel) = plan
        .selections(spec)
        .map_err(|e| model_err(loc, e.to_string()))?;
    if i_sel.len() != h_sel.len() {
        return Err(model_err(
            loc,
            format!(
                "{} replacement terms for {} duplicated terms",
                h_sel.len(),
                i_sel.len()
            ),
        ));
    }
    Ok(plan)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PlainMixed,
    Lm,
}

/// Static analysis of one margin: what it redefines and how.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginAnalysis {
    pub margin: Margin,
    pub method: Method,
    /// Earlier interactions constrained again here.
    pub duplicated: Vec<VarSet>,
    pub plan: Option<ReplacementPlan>,
    pub plan_source: Option<String>,
    pub verdict: Option<SmoothnessVerdict>,
    pub context: Option<ContextSpec>,
    /// The statement as it can actually be imposed.
    pub restricted_statement: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineOptions {
    pub trials: usize,
    pub seed: u64,
    pub newton: NewtonOptions,
    /// LM step tolerance.
    pub lm_tol: f64,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            trials: DEFAULT_TRIALS,
            seed: 1,
            newton: NewtonOptions::default(),
            lm_tol: LmOptions::default().tol,
        }
    }
}

fn prior_of(model: &ModelSpec, k: usize) -> Vec<VarSet> {
    model.margins[..k]
        .iter()
        .map(|m| m.margin.vars().clone())
        .collect()
}

pub fn analyze_margin(
    model: &ModelSpec,
    k: usize,
    opts: &PipelineOptions,
) -> Result<MarginAnalysis> {
    let entry = &model.margins[k];
    let prior = prior_of(model, k);
    let defined = defined_within(&prior, entry.margin.vars());
    let dup_stmt = entry
        .statements
        .iter()
        .find(|s| ci_to_interactions(s).iter().any(|i| defined.contains(i)));
    let Some(stmt) = dup_stmt else {
        return Ok(MarginAnalysis {
            margin: entry.margin.clone(),
            method: Method::PlainMixed,
            duplicated: Vec::new(),
            plan: None,
            plan_source: None,
            verdict: None,
            context: None,
            restricted_statement: None,
        });
    };
    let a = ci_to_interactions(stmt);
    let duplicated: Vec<VarSet> = a.iter().filter(|i| defined.contains(i)).cloned().collect();
    let (plan, source) = match &entry.plan {
        Some(p) => (p.clone(), "model"),
        None => (
            suggest_plan(&model.spec, entry.margin.vars(), &a, &prior)?,
            "suggested",
        ),
    };
    let verdict = classify_smoothness(&model.spec, &plan, opts.trials, opts.seed);
    let context = context_restriction(stmt, &plan);
    let restricted = context.render_statement(stmt);
    Ok(MarginAnalysis {
        margin: entry.margin.clone(),
        method: Method::Lm,
        duplicated,
        plan: Some(plan),
        plan_source: Some(source.to_string()),
        verdict: Some(verdict),
        context: Some(context),
        restricted_statement: Some(restricted),
    })
}

pub fn analyze_model(model: &ModelSpec, opts: &PipelineOptions) -> Result<Vec<MarginAnalysis>> {
    (0..model.margins.len())
        .map(|k| analyze_margin(model, k, opts))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginResult {
    pub analysis: MarginAnalysis,
    pub p: ProbVector,
    pub iterations: usize,
    /// Last LM step size; `None` for plain mixed margins.
    pub step_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineResult {
    pub margins: Vec<MarginResult>,
    pub joint: ProbVector,
    pub warnings: Vec<String>,
}

/// Canonical target of an interaction owned by the current margin.
fn own_eta(term: &TermId, constrained: &BTreeSet<VarSet>, free: &BTreeMap<TermId, f64>) -> f64 {
    if constrained.contains(&term.interaction) {
        0.0
    } else {
        free.get(term).copied().unwrap_or(0.0)
    }
}

/// Marginal probabilities of `terms` read from the latest earlier margin
/// that contains each interaction.
fn prior_means(
    spec: &VariableSpec,
    done: &[MarginResult],
    terms: &TermSelection,
) -> Result<Vec<f64>> {
    terms
        .iter()
        .map(|t| {
            let src = done
                .iter()
                .rev()
                .find(|m| t.interaction.is_subset(m.p.margin()))
                .ok_or_else(|| MllpError::Consistency(format!("no earlier margin holds {t}")))?;
            let sel = TermSelection::new(spec, src.p.margin(), vec![t.clone()])?;
            Ok(mu_of(&src.p, &sel, spec)?.values[0])
        })
        .collect()
}

pub fn run_pipeline(
    model: &ModelSpec,
    free_params: &BTreeMap<TermId, f64>,
    opts: &PipelineOptions,
) -> Result<PipelineResult> {
    let spec = &model.spec;
    let mut free = model.free_params.clone();
    free.extend(free_params.iter().map(|(k, v)| (k.clone(), *v)));
    check_free_params(model, &free)?;

    let mut done: Vec<MarginResult> = Vec::new();
    for (k, entry) in model.margins.iter().enumerate() {
        let analysis = analyze_margin(model, k, opts)?;
        let margin = &entry.margin;
        let prior = prior_of(model, k);
        let defined = defined_within(&prior, margin.vars());
        let full = TermSelection::full(spec, margin);
        let v_sel = TermSelection::blocks(spec, margin, &defined)?;
        let own = full.difference(&v_sel);
        let constrained: BTreeSet<VarSet> = entry
            .statements
            .iter()
            .flat_map(ci_to_interactions)
            .collect();

        let (p, iterations, step_norm) = match &analysis.plan {
            None => {
                let mean = ParamVector::new(
                    v_sel.clone(),
                    prior_means(spec, &done, &v_sel)?,
                    ParamKind::Mean,
                )?;
                let eta: Vec<f64> = own
                    .iter()
                    .map(|t| own_eta(t, &constrained, &free))
                    .collect();
                let canon = ParamVector::new(own.clone(), eta, ParamKind::Canonical)?;
                let mixed = MixedSpec::new(spec, margin.clone(), mean, canon)?;
                let sol = mixed_solve(spec, &mixed, &opts.newton)?;
                (sol.p, sol.iterations, None)
            }
            Some(plan) => {
                let verdict = analysis
                    .verdict
                    .as_ref()
                    .expect("LM margins carry a verdict");
                if verdict.classification == Classification::NonIdentifiable {
                    return Err(MllpError::NonIdentifiable {
                        margin: margin.to_string(),
                    });
                }
                let (r, i, h) = plan.selections(spec)?;
                if let Some(t) = h.iter().find(|t| free.contains_key(t)) {
                    return Err(model_err(
                        format!("free_params.{t}"),
                        format!("{t} is a replacement term in margin {margin} and is not free"),
                    ));
                }
                let l_free = free_terms(spec, margin, &r, &i, &h);
                let mu_r = prior_means(spec, &done, &r)?;
                let mu_i = prior_means(spec, &done, &i)?;
                let eta_i = vec![0.0; i.len()];
                let eta_l = l_free
                    .iter()
                    .map(|t| own_eta(t, &constrained, &free))
                    .collect();
                let lm_opts = LmOptions {
                    tol: opts.lm_tol,
                    newton: NewtonOptions {
                        tol: opts.newton.tol.min(LmOptions::default().newton.tol),
                        ..opts.newton
                    },
                    ..LmOptions::default()
                };
                let inputs =
                    LmInputs::new(spec, r, i, h, mu_r, mu_i, eta_i, eta_l)?.with_options(lm_opts);
                let res = lm_reconstruct(spec, &inputs).map_err(|e| match e {
                    MllpError::NonConvergence {
                        context,
                        iterations,
                        residual,
                    } => MllpError::NonConvergence {
                        context: format!("{context} (verdict {:?})", verdict.classification),
                        iterations,
                        residual,
                    },
                    other => other,
                })?;
                (res.p, res.iterations, Some(res.step_norm))
            }
        };
        done.push(MarginResult {
            analysis,
            p,
            iterations,
            step_norm,
        });
    }
    let joint = done.last().expect("at least one margin").p.clone();
    Ok(PipelineResult {
        margins: done,
        joint,
        warnings: model.warnings.clone(),
    })
}

fn check_free_params(model: &ModelSpec, free: &BTreeMap<TermId, f64>) -> Result<()> {
    let full = Margin::full(&model.spec);
    for (term, value) in free {
        let loc = format!("free_params.{term}");
        TermSelection::new(&model.spec, &full, vec![term.clone()])
            .map_err(|e| model_err(&loc, e.to_string()))?;
        if !value.is_finite() {
            return Err(model_err(&loc, "value must be finite"));
        }
        let owner = model
            .margins
            .iter()
            .find(|m| term.interaction.is_subset(m.margin.vars()))
            .expect("full margin contains every term");
        if owner
            .statements
            .iter()
            .any(|s| ci_to_interactions(s).contains(&term.interaction))
        {
            return Err(model_err(
                &loc,
                format!("{term} is constrained to zero in margin {}", owner.margin),
            ));
        }
    }
    Ok(())
}

/// Free-parameter file: a JSON object from term names to values.
pub fn parse_free_params(text: &str) -> Result<BTreeMap<TermId, f64>> {
    let raw: BTreeMap<String, f64> = serde_json::from_str(text).map_err(syntax_err)?;
    raw.into_iter()
        .map(|(k, v)| {
            let t = TermId::parse(&k)
                .map_err(|e| model_err(format!("free_params.{k}"), e.to_string()))?;
            Ok((t, v))
        })
        .collect()
}

/// Canonical parameters of every term of the joint, for reports.
pub fn joint_parameters(spec: &VariableSpec, joint: &ProbVector) -> ParamVector {
    let full = TermSelection::full(spec, joint.margin());
    eta_on(joint, &full, spec)
}
