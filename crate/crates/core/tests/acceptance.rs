//! Acceptance suite. Runs every check, prints one PASS/FAIL line each and
//! exits non-zero when any fails.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mllp::design::{build_c, build_g, TermId, TermSelection};
use mllp::diagnostics::{
    classify_smoothness, trial_seed, verify_conversion_structure, verify_projector_factorization,
    Classification, Stratum,
};
use mllp::lm::{compute_q, lm_jacobian, lm_step, singular_value_ratio, spectral_radius, LmInputs};
use mllp::model::{parse_model, run_pipeline, PipelineOptions};
use mllp::param::{eta_conditional, eta_of, eta_on, fisher_f, mixed_solve, mu_of, p_of_eta};
use mllp::param::{MixedSpec, NewtonOptions, ParamKind, ParamVector};
use mllp::replacement::{
    check_valid_replacement, ci_to_interactions, construct_replacement, context_restriction,
    defined_within, maximal_sets, suggest_plan, CiStatement, ContextConstraint, Relation,
    ReplacementElement, ReplacementPlan,
};
use mllp::table::{
    random_distribution, vs, Margin, ProbVector, SamplingMode, VarSet, VariableSpec,
};
use mllp::MllpError;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn sets(s: &[&str]) -> Vec<VarSet> {
    s.iter().map(|x| vs(x)).collect()
}

fn random_spec(rng: &mut ChaCha8Rng, d_min: usize, d_max: usize, max_level: usize) -> VariableSpec {
    let d = rng.random_range(d_min..=d_max);
    let levels = (0..d).map(|_| rng.random_range(2..=max_level)).collect();
    VariableSpec::new(levels).unwrap()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

fn ex1_plan(spec: &VariableSpec) -> ReplacementPlan {
    let st = CiStatement::new(vs("1"), vs("2"), vs("34")).unwrap();
    suggest_plan(spec, &vs("1234"), &ci_to_interactions(&st), &sets(&["123"])).unwrap()
}

// p -> eta -> p
fn round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let spec = random_spec(&mut rng, 1, 5, 3);
        let margin = Margin::full(&spec);
        let p = random_distribution(&spec, &margin, SamplingMode::General, 1000 + k);
        let back = p_of_eta(&eta_of(&p, &spec), &spec).map_err(|e| e.to_string())?;
        worst = worst.max(p.max_abs_diff(&back));
    }
    ensure(worst < 1e-10, || format!("max error {worst:e}"))?;
    Ok(format!("200 tables, max |p - p(eta(p))| = {worst:.2e}"))
}

fn level_vectors(d: usize, all_orders: bool) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![vec![]];
    for _ in 0..d {
        out = out
            .into_iter()
            .flat_map(|v| {
                (2..=4).filter_map(move |l| {
                    if !all_orders && v.last().is_some_and(|&x| x > l) {
                        return None;
                    }
                    let mut w = v.clone();
                    w.push(l);
                    Some(w)
                })
            })
            .collect();
    }
    out
}

// C(M) G(M) = I in integer arithmetic
fn right_inverse() -> Outcome {
    let mut count = 0;
    for d in 1..=5 {
        for levels in level_vectors(d, d <= 3) {
            let spec = VariableSpec::new(levels.clone()).unwrap();
            let sel = TermSelection::full(&spec, &Margin::full(&spec));
            let prod = build_c(&sel, &spec)
                .mul_exact(&build_g(&sel, &spec))
                .map_err(|e| e.to_string())?;
            ensure(prod.is_identity(), || {
                format!("C G != I for levels {levels:?}")
            })?;
            count += 1;
        }
    }
    Ok(format!(
        "{count} level layouts up to 5 variables with 2-4 categories, all exact"
    ))
}

// first-difference recursion and expansion over higher-order interactions
fn recursion_and_expansion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst_rec: f64 = 0.0;
    let mut worst_exp: f64 = 0.0;
    for d in 3..=5 {
        for k in 0..50 {
            let levels: Vec<usize> = (0..d).map(|_| rng.random_range(2..=3)).collect();
            let spec = VariableSpec::new(levels).unwrap();
            let margin = Margin::full(&spec);
            let p = random_distribution(
                &spec,
                &margin,
                SamplingMode::General,
                3000 + 100 * d as u64 + k,
            );
            let eta = eta_of(&p, &spec);
            let value: BTreeMap<TermId, f64> = eta
                .selection
                .iter()
                .cloned()
                .zip(eta.values.iter().copied())
                .collect();
            for (term, &v) in &value {
                // recursion: drop each variable in turn
                for j in term.interaction.iter() {
                    let rest: Vec<usize> = term.interaction.iter().filter(|&x| x != j).collect();
                    let mut at_level = vec![0; d];
                    at_level[margin.position(j).unwrap()] = term.level_of(j).unwrap();
                    let diff = if rest.is_empty() {
                        // the empty interaction is the log cell probability
                        p.get(&at_level).ln() - p.get(&vec![0; d]).ln()
                    } else {
                        let lower_levels: Vec<usize> =
                            rest.iter().map(|&x| term.level_of(x).unwrap()).collect();
                        let lower = TermId::new(VarSet::new(rest), lower_levels).unwrap();
                        eta_conditional(&p, &lower, &at_level)
                            - eta_conditional(&p, &lower, &vec![0; d])
                    };
                    worst_rec = worst_rec.max((diff - v).abs());
                }
                // expansion at a random context
                let context: Vec<usize> = (1..=d)
                    .map(|x| rng.random_range(0..spec.levels_of(x)))
                    .collect();
                let lhs = eta_conditional(&p, term, &context);
                let support: Vec<usize> = (1..=d)
                    .filter(|&x| !term.interaction.contains(x) && context[x - 1] != 0)
                    .collect();
                let mut rhs = 0.0;
                for s in VarSet::new(support)
                    .subsets()
                    .into_iter()
                    .chain([VarSet::empty()])
                {
                    let h = term.interaction.union(&s);
                    let levels = h
                        .iter()
                        .map(|x| term.level_of(x).unwrap_or(context[x - 1]))
                        .collect();
                    rhs += value[&TermId::new(h, levels).unwrap()];
                }
                worst_exp = worst_exp.max((lhs - rhs).abs());
            }
        }
    }
    ensure(worst_rec < 1e-10 && worst_exp < 1e-10, || {
        format!("recursion {worst_rec:e}, expansion {worst_exp:e}")
    })?;
    Ok(format!(
        "150 tables on 3-5 variables: recursion {worst_rec:.2e}, expansion {worst_exp:.2e}"
    ))
}

// mixed parameterization round trip
fn mixed_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    let mut most_iter = 0;
    for k in 0..100 {
        let spec = random_spec(&mut rng, 2, 4, 3);
        let margin = Margin::full(&spec);
        let p = random_distribution(&spec, &margin, SamplingMode::General, 4000 + k);
        let full = TermSelection::full(&spec, &margin);
        let mut mean_terms = Vec::new();
        let mut canon_terms = Vec::new();
        for t in full.iter() {
            if rng.random_bool(0.5) {
                mean_terms.push(t.clone());
            } else {
                canon_terms.push(t.clone());
            }
        }
        let mean_sel = TermSelection::new(&spec, &margin, mean_terms).unwrap();
        let canon_sel = TermSelection::new(&spec, &margin, canon_terms).unwrap();
        let mean = mu_of(&p, &mean_sel, &spec).map_err(|e| e.to_string())?;
        let canon = eta_on(&p, &canon_sel, &spec);
        let mixed =
            MixedSpec::new(&spec, margin.clone(), mean, canon).map_err(|e| e.to_string())?;
        let sol =
            mixed_solve(&spec, &mixed, &NewtonOptions::default()).map_err(|e| e.to_string())?;
        worst = worst.max(sol.p.max_abs_diff(&p));
        most_iter = most_iter.max(sol.iterations);
    }
    ensure(worst < 1e-8 && most_iter <= 100, || {
        format!("error {worst:e}, iterations {most_iter}")
    })?;
    Ok(format!(
        "100 partitions: max error {worst:.2e}, at most {most_iter} Newton iterations"
    ))
}

// information matrix is positive definite
fn fisher_positive_definite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut smallest = f64::INFINITY;
    for k in 0..100 {
        let spec = random_spec(&mut rng, 1, 4, 3);
        let margin = Margin::full(&spec);
        let p = random_distribution(&spec, &margin, SamplingMode::General, 5000 + k);
        let full = TermSelection::full(&spec, &margin);
        smallest = smallest.min(min_eigenvalue(&fisher_f(&p, &full, &full, &spec)));
    }
    ensure(smallest > 0.0, || format!("min eigenvalue {smallest:e}"))?;
    Ok(format!("100 tables: smallest eigenvalue {smallest:.2e}"))
}

// LM Jacobian spectrum bound
fn spectral_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst_rho: f64 = 0.0;
    let mut worst_c = f64::INFINITY;
    let mut worst_gap: f64 = 0.0;
    let mut done = 0;
    while done < 100 {
        let spec = random_spec(&mut rng, 2, 4, 3);
        let margin = Margin::full(&spec);
        let mut groups: [Vec<TermId>; 4] = Default::default();
        for t in TermSelection::full(&spec, &margin).iter() {
            groups[rng.random_range(0..4)].push(t.clone());
        }
        if groups[1].is_empty() || groups[2].is_empty() {
            continue;
        }
        let [r, i, h, _] = groups.map(|g| TermSelection::new(&spec, &margin, g).unwrap());
        let mode = if done % 2 == 0 {
            SamplingMode::General
        } else {
            SamplingMode::CompleteIndependence
        };
        let p = random_distribution(&spec, &margin, mode, 6000 + done as u64);
        let jac = lm_jacobian(&spec, &p, &i, &h, &r).map_err(|e| e.to_string())?;
        let general = spectral_radius(&jac.j).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.max((general - jac.spectral_radius).abs());
        worst_rho = worst_rho.max(jac.spectral_radius);
        worst_c = worst_c.min(min_eigenvalue(&jac.c));
        done += 1;
    }
    ensure(worst_rho <= 1.0 + 1e-8 && worst_c > -1e-9, || {
        format!("spectral radius {worst_rho}, min eigenvalue of C {worst_c:e}")
    })?;
    ensure(worst_gap < 1e-8, || {
        format!("Schur and symmetric radii differ by {worst_gap:e}")
    })?;
    Ok(format!(
        "100 configurations: max spectral radius {worst_rho:.6}, min eigenvalue of C {worst_c:.2e}, Schur agrees to {worst_gap:.1e}"
    ))
}

const IDENTITY_MODEL: &str = r#"{"levels": [2,2,2,2], "margins": [
    {"vars": [1,2,3], "statements": [{"a": [1], "b": [2], "c": [3]}]},
    {"vars": [1,2,3,4], "statements": [{"a": [1], "b": [2], "c": [3,4]}],
     "plan": {"i": [[1,2],[1,2,3]], "h": [{"t": [3,4], "h": []}, {"t": [2,3,4], "h": []}]}}]}"#;

const LITERAL_MODEL: &str = r#"{"levels": [2,2,2,2], "margins": [
    {"vars": [1,2,3], "statements": [{"a": [1], "b": [2], "c": [3]}]},
    {"vars": [1,2,3,4], "statements": [{"a": [1], "b": [2], "c": [3,4]}],
     "plan": {"i": [[1,2],[1,2,3]], "h": [{"t": [2,3], "h": []}, {"t": [2,3,4], "h": []}]}}]}"#;

// replacement terms outside the constrained class give an identity Jacobian
fn identity_jacobian() -> Outcome {
    let spec = VariableSpec::binary(4);
    let margin = Margin::full(&spec);
    let p = ProbVector::uniform(&spec, margin.clone());
    let model = parse_model(IDENTITY_MODEL).map_err(|e| e.to_string())?;
    let plan = model.margins[1].plan.clone().ok_or("plan missing")?;
    let (r, i, h) = plan.selections(&spec).map_err(|e| e.to_string())?;
    let q = compute_q(&spec, &p, &i, &h, &r).map_err(|e| e.to_string())?;
    let q_norm = q.norm();
    let jac = lm_jacobian(&spec, &p, &i, &h, &r).map_err(|e| e.to_string())?;
    let dev = &jac.j - DMatrix::<f64>::identity(h.len(), h.len());
    let j_err = (0..dev.nrows())
        .map(|row| dev.row(row).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let verdict = classify_smoothness(&spec, &plan, 50, 7);
    ensure(q_norm < 1e-12, || format!("|Q|_F = {q_norm:e}"))?;
    ensure(j_err < 1e-8, || format!("|J - I| = {j_err:e}"))?;
    ensure(
        verdict.classification == Classification::NonIdentifiable,
        || format!("verdict {:?}", verdict.classification),
    )?;
    let refused = matches!(
        run_pipeline(&model, &BTreeMap::new(), &PipelineOptions::default()),
        Err(MllpError::NonIdentifiable { .. })
    );
    ensure(refused, || "pipeline reported a joint".into())?;

    // 23 is already a free term of the margin here, so the literal choice overlaps R
    let literal_rejected = parse_model(LITERAL_MODEL).is_err();
    let blocks = TermSelection::blocks(&spec, &margin, &sets(&["23", "234"])).unwrap();
    let overlap_rejected = compute_q(&spec, &p, &i, &blocks, &r).is_err();
    ensure(literal_rejected && overlap_rejected, || {
        "H = {23,234} was accepted although 23 is already defined".into()
    })?;
    Ok(format!(
        "H = {{34,234}} (23 is already defined in 123, so H = {{23,234}} is rejected): |Q|_F = {q_norm:.1e}, |J - I| = {j_err:.1e}, NonIdentifiable, pipeline refuses"
    ))
}

struct Example {
    name: &'static str,
    d: usize,
    statement: (&'static str, &'static str, &'static str),
    prior: Vec<&'static str>,
    margin: &'static str,
    plan: &'static str,
}

fn examples() -> Vec<Example> {
    vec![
        Example {
            name: "1 indep 2 | 3,4",
            d: 4,
            statement: ("1", "2", "34"),
            prior: vec!["123"],
            margin: "1234",
            plan: "I = {12,123}, H = {(12,4),(123,4)}",
        },
        Example {
            name: "2 indep 4 | 1,3",
            d: 4,
            statement: ("2", "4", "13"),
            prior: vec!["124"],
            margin: "1234",
            plan: "I = {24,124}, H = {(24,3),(124,3)}",
        },
        Example {
            name: "1 indep 2,3 | 4,5",
            d: 5,
            statement: ("1", "23", "45"),
            prior: vec!["123", "134"],
            margin: "12345",
            plan: "I = {12,13,123,134}, H = {(12,5),(13,5),(123,5),(134,5)}",
        },
        Example {
            name: "1 indep 2 | 4,5,6",
            d: 6,
            statement: ("1", "2", "456"),
            prior: vec!["1234", "1235", "1236"],
            margin: "12456",
            plan: "I = {12,124}, H = {(12,56),(124,56)}",
        },
    ]
}

fn example_plan(ex: &Example) -> Result<(VariableSpec, CiStatement, ReplacementPlan), String> {
    let spec = VariableSpec::binary(ex.d);
    let (a, b, c) = ex.statement;
    let st = CiStatement::new(vs(a), vs(b), vs(c)).map_err(|e| e.to_string())?;
    let plan = suggest_plan(
        &spec,
        &vs(ex.margin),
        &ci_to_interactions(&st),
        &sets(&ex.prior),
    )
    .map_err(|e| e.to_string())?;
    ensure(plan.to_string() == ex.plan, || {
        format!("{}: plan {plan}, expected {}", ex.name, ex.plan)
    })?;
    Ok((spec, st, plan))
}

// full rank of Q at complete independence for the valid plans
fn q_full_rank() -> Outcome {
    let mut parts = Vec::new();
    for ex in examples() {
        let (spec, _, plan) = example_plan(&ex)?;
        let margin = Margin::new(&spec, vs(ex.margin)).unwrap();
        let (r, i, h) = plan.selections(&spec).map_err(|e| e.to_string())?;
        let mut worst = f64::INFINITY;
        for k in 0..50 {
            let seed = trial_seed(88, Stratum::Independence, k);
            let p = random_distribution(&spec, &margin, SamplingMode::CompleteIndependence, seed);
            let q = compute_q(&spec, &p, &i, &h, &r).map_err(|e| e.to_string())?;
            worst = worst.min(singular_value_ratio(&q));
        }
        ensure(worst > 1e-8, || {
            format!("{}: sigma ratio {worst:e}", ex.name)
        })?;
        parts.push(format!("{}: {worst:.2e}", ex.name));
    }
    Ok(format!(
        "min sigma ratio over 50 draws; {}",
        parts.join("; ")
    ))
}

fn plan_of(margin: &str, i: &[&str], h: &[(&str, &str)], prior: &[&str]) -> ReplacementPlan {
    let elements = h
        .iter()
        .map(|(t, h)| ReplacementElement::new(vs(t), vs(h)))
        .collect();
    ReplacementPlan::with_prior(vs(margin), sets(i), elements, &sets(prior)).unwrap()
}

fn families(s: &[&[&str]]) -> Vec<Vec<VarSet>> {
    s.iter().map(|g| sets(g)).collect()
}

// the three validity conditions on the worked plans
fn validity_battery() -> Outcome {
    for ex in examples().iter().take(3) {
        let (_, _, plan) = example_plan(ex)?;
        let rep = check_valid_replacement(&plan);
        ensure(rep.is_valid(), || format!("{}: {rep:?}", ex.name))?;
    }

    let six = plan_of(
        "12345",
        &["12", "13", "123", "134"],
        &[("12", "5"), ("13", "5"), ("123", "5"), ("134", "5")],
        &["123", "134"],
    );
    let rep = check_valid_replacement(&six);
    ensure(rep.is_valid(), || format!("four-term plan: {rep:?}"))?;
    let fam = |t: &str| rep.families.iter().find(|f| f.t == vs(t)).unwrap();
    ensure(fam("12").k == sets(&["123", "134"]), || "K".into())?;
    let expected_kth: [(&str, Vec<Vec<VarSet>>); 4] = [
        ("134", families(&[&["134"]])),
        ("123", families(&[&["123"]])),
        ("13", families(&[&["123"], &["134"], &["123", "134"]])),
        ("12", families(&[&["123"]])),
    ];
    for (t, kth) in &expected_kth {
        ensure(&fam(t).k_th == kth, || {
            format!("K({t},5) = {:?}", fam(t).k_th)
        })?;
    }
    let expected_kbar: [(&str, Vec<Vec<VarSet>>); 4] = [
        ("134", families(&[&["123"], &["123", "134"]])),
        ("123", families(&[&["134"], &["123", "134"]])),
        ("12", families(&[&["134"], &["123", "134"]])),
        ("13", vec![]),
    ];
    for (t, kbar) in &expected_kbar {
        ensure(&fam(t).k_bar == kbar, || {
            format!("complement for {t}: {:?}", fam(t).k_bar)
        })?;
    }
    // traces: 13 for t = 134, 123 and 1 for t = 12
    let trace = |t: &str| -> Vec<VarSet> {
        let f = fam(t);
        let v = f.t.union(&f.h);
        f.k_bar
            .iter()
            .map(|g| {
                g.iter()
                    .skip(1)
                    .fold(g[0].clone(), |acc, m| acc.intersection(m))
                    .intersection(&v)
            })
            .collect()
    };
    ensure(trace("134") == sets(&["13", "13"]), || {
        format!("{:?}", trace("134"))
    })?;
    ensure(trace("123") == sets(&["13", "13"]), || {
        format!("{:?}", trace("123"))
    })?;
    ensure(trace("12") == sets(&["1", "1"]), || {
        format!("{:?}", trace("12"))
    })?;

    let prior8 = ["124", "125", "126"];
    let eight = plan_of(
        "12456",
        &["12", "124"],
        &[("12", "56"), ("124", "56")],
        &prior8,
    );
    let rep = check_valid_replacement(&eight);
    ensure(rep.is_valid(), || format!("two-term plan: {rep:?}"))?;
    let f = rep.families.iter().find(|f| f.t == vs("124")).unwrap();
    ensure(
        f.k == sets(&prior8) && f.k_th == families(&[&["124"]]),
        || format!("{f:?}"),
    )?;
    ensure(f.k_bar.len() == 6, || format!("{:?}", f.k_bar))?;
    let v = vs("12456");
    let traces: Vec<VarSet> = f
        .k_bar
        .iter()
        .map(|g| {
            g.iter()
                .skip(1)
                .fold(g[0].clone(), |acc, m| acc.intersection(m))
                .intersection(&v)
        })
        .collect();
    ensure(
        traces == sets(&["125", "126", "12", "12", "12", "12"]),
        || format!("{traces:?}"),
    )?;

    let extended = plan_of(
        "12456",
        &["12", "124", "125", "126"],
        &[("12", "56"), ("124", "56"), ("125", "4"), ("126", "4")],
        &prior8,
    );
    let rep = check_valid_replacement(&extended);
    ensure(
        rep.condition_i && rep.condition_ii && !rep.condition_iii,
        || format!("extended plan: {rep:?}"),
    )?;

    let short = plan_of(
        "123456",
        &["12", "123"],
        &[("12", "46"), ("123", "46")],
        &["1234", "1235"],
    );
    let rep = check_valid_replacement(&short);
    ensure(
        rep.condition_i && !rep.condition_ii && rep.condition_iii,
        || format!("short plan: {rep:?}"),
    )?;
    Ok("three valid plans pass with the stated K families and traces; extended plan fails only the order condition; short plan fails only the sum condition".into())
}

struct RandomConfig {
    spec: VariableSpec,
    margin: VarSet,
    a: Vec<VarSet>,
    prior: Vec<VarSet>,
}

fn random_config(rng: &mut ChaCha8Rng) -> RandomConfig {
    loop {
        let d = rng.random_range(3..=6);
        let spec = VariableSpec::binary(d);
        let margin = spec.all_vars();
        // roles: 0 -> a, 1 -> b, 2 -> c
        let roles: Vec<u8> = (0..d).map(|_| rng.random_range(0..3)).collect();
        let pick = |r: u8| VarSet::new((1..=d).filter(|&x| roles[x - 1] == r));
        let (a, b, c) = (pick(0), pick(1), pick(2));
        let Ok(st) = CiStatement::new(a, b, c) else {
            continue;
        };
        let n_prior = rng.random_range(1..=3);
        let prior: Vec<VarSet> = (0..n_prior)
            .map(|_| {
                let size = rng.random_range(2..d);
                let mut vars: Vec<usize> = (1..=d).collect();
                for k in (1..vars.len()).rev() {
                    vars.swap(k, rng.random_range(0..=k));
                }
                VarSet::new(vars.into_iter().take(size))
            })
            .collect();
        let a = ci_to_interactions(&st);
        let defined = defined_within(&prior, &margin);
        if a.iter().any(|s| defined.contains(s)) {
            return RandomConfig {
                spec,
                margin,
                a,
                prior,
            };
        }
    }
}

/// h from the constructive rule, computed independently of the library.
fn rule_h(t: &VarSet, margin: &VarSet, k_t: &[VarSet]) -> VarSet {
    if let [only] = k_t {
        return margin.difference(only);
    }
    VarSet::new(
        margin
            .difference(t)
            .iter()
            .filter(|&x| k_t.iter().filter(|m| m.contains(x)).count() <= 1),
    )
}

// the constructive single-interaction replacement
fn constructive_replacement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut built = 0;
    let mut no_h = 0;
    let mut multi = 0;
    let mut identity_holds = 0;
    let mut counterexamples = Vec::new();
    for _ in 0..200 {
        let cfg = random_config(&mut rng);
        let defined = defined_within(&cfg.prior, &cfg.margin);
        let k = maximal_sets(&defined);
        match construct_replacement(&cfg.spec, &cfg.margin, &cfg.a, &cfg.prior) {
            Ok(plan) => {
                built += 1;
                let rep = check_valid_replacement(&plan);
                ensure(rep.is_valid(), || {
                    format!("prior {:?}: {plan} invalid: {rep:?}", cfg.prior)
                })?;
                let e = &plan.h[0];
                let k_t: Vec<VarSet> = k.iter().filter(|m| e.t.is_subset(m)).cloned().collect();
                ensure(e.h == rule_h(&e.t, &cfg.margin, &k_t), || {
                    format!("{plan}: h differs")
                })?;
                if k_t.len() > 1 {
                    multi += 1;
                    let sum = rep.families[0].alternating_sum;
                    if sum == 1 - k_t.len() as i64 {
                        identity_holds += 1;
                    } else {
                        counterexamples.push(format!(
                            "K({}) = {:?}, h = {}: sum {sum}",
                            e.t.label(),
                            k_t.iter().map(|s| s.label()).collect::<Vec<_>>(),
                            e.h.label()
                        ));
                    }
                }
            }
            Err(MllpError::NoAdmissibleReplacement(_)) => {
                // only legitimate when the rule leaves h empty for every minimal t
                let dup: Vec<VarSet> = cfg
                    .a
                    .iter()
                    .filter(|s| defined.contains(s))
                    .cloned()
                    .collect();
                let minimal: Vec<&VarSet> = dup
                    .iter()
                    .filter(|s| !dup.iter().any(|o| o != *s && o.is_subset(s)))
                    .collect();
                for t in minimal {
                    let k_t: Vec<VarSet> = k.iter().filter(|m| t.is_subset(m)).cloned().collect();
                    ensure(rule_h(t, &cfg.margin, &k_t).is_empty(), || {
                        format!("no plan although t = {} has a non-empty h", t.label())
                    })?;
                }
                no_h += 1;
            }
            Err(e) => return Err(e.to_string()),
        }
    }

    let spec = VariableSpec::binary(6);
    let st = CiStatement::new(vs("1"), vs("2"), vs("456")).unwrap();
    let plan = construct_replacement(
        &spec,
        &vs("12456"),
        &ci_to_interactions(&st),
        &sets(&["1234", "1235", "1236"]),
    )
    .map_err(|e| e.to_string())?;
    let rep = check_valid_replacement(&plan);
    let sum = rep.families[0].alternating_sum;
    ensure(
        plan.to_string() == "I = {12}, H = {(12,456)}" && sum == -2,
        || format!("{plan}: sum {sum}"),
    )?;

    ensure(counterexamples.is_empty(), || {
        format!(
            "{built} plans valid, {no_h} configurations without an admissible h; alternating sum = 1 - |K(t)| held in {identity_holds} of {multi} cases. Counterexamples: {}",
            counterexamples.join(" | ")
        )
    })?;
    Ok(format!(
        "{built} of 200 configurations built and valid ({no_h} have empty h for every minimal t); sum = 1 - |K(t)| in all {multi} non-singleton cases; three-set case sum = -2"
    ))
}

const EX1_MODEL: &str = r#"{"levels": [2,2,2,2], "margins": [
    {"vars": [1,2,3], "statements": [{"a": [1], "b": [2], "c": [3]}]},
    {"vars": [1,2,3,4], "statements": [{"a": [1], "b": [2], "c": [3,4]}]}]}"#;

// two-step reconstruction end to end
fn lm_end_to_end() -> Outcome {
    let model = parse_model(EX1_MODEL).map_err(|e| e.to_string())?;
    let spec = model.spec.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut free = BTreeMap::new();
    for s in [
        "1", "2", "3", "13", "23", "4", "14", "24", "34", "134", "234",
    ] {
        let v = vs(s);
        let t = TermId::new(v.clone(), vec![1; v.len()]).unwrap();
        free.insert(t, rng.random_range(-1.0..1.0));
    }
    let res =
        run_pipeline(&model, &free, &PipelineOptions::default()).map_err(|e| e.to_string())?;
    let last = &res.margins[1];
    let step = last
        .step_norm
        .ok_or("second margin not reconstructed by LM")?;
    ensure(last.iterations <= 500 && step < 1e-9, || {
        format!("{} iterations, step {step:e}", last.iterations)
    })?;
    let joint = &res.joint;
    let m123 = Margin::new(&spec, vs("123")).unwrap();
    let low = joint.marginalize(&m123).map_err(|e| e.to_string())?;
    let blocks = TermSelection::blocks(&spec, &m123, &sets(&["12", "123"])).unwrap();
    let eta_low = eta_on(&low, &blocks, &spec);
    let worst_eta = eta_low.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let t12 = TermId::new(vs("12"), vec![1, 1]).unwrap();
    let worst_or = (0..2)
        .map(|x3| eta_conditional(joint, &t12, &[0, 0, x3, 0]).abs())
        .fold(0.0, f64::max);
    let other_or = (0..2)
        .map(|x3| eta_conditional(joint, &t12, &[0, 0, x3, 1]).abs())
        .fold(0.0, f64::max);
    let full123 = TermSelection::full(&spec, &m123);
    let mu_err = mu_of(&low, &full123, &spec)
        .unwrap()
        .max_abs_diff(&mu_of(&res.margins[0].p, &full123, &spec).unwrap());
    let l_terms = TermSelection::blocks(
        &spec,
        last.p.margin(),
        &sets(&["4", "14", "24", "34", "134", "234"]),
    )
    .unwrap();
    let eta_l = eta_on(joint, &l_terms, &spec);
    let free_err = l_terms
        .iter()
        .zip(&eta_l.values)
        .map(|(t, v)| (v - free[t]).abs())
        .fold(0.0, f64::max);
    let context = last
        .analysis
        .context
        .as_ref()
        .map(|c| c.render())
        .unwrap_or_default();
    ensure(worst_eta < 1e-8, || {
        format!("eta_12, eta_123 in 123: {worst_eta:e}")
    })?;
    ensure(worst_or < 1e-8, || {
        format!("log odds ratio at x4 = 0: {worst_or:e}")
    })?;
    ensure(mu_err < 1e-8, || {
        format!("123 marginal moved by {mu_err:e}")
    })?;
    ensure(free_err < 1e-8, || {
        format!("free parameters off by {free_err:e}")
    })?;
    ensure(context == "X4 ≠ 1", || format!("context {context}"))?;
    Ok(format!(
        "{} iterations, step {step:.1e}; eta 12/123 in 123 {worst_eta:.1e}; log OR at x4 = 0 {worst_or:.1e} (at x4 = 1 it is {other_or:.2}); 123 marginal {mu_err:.1e}; context {context}",
        last.iterations
    ))
}

// context restrictions implied by the plans
fn context_structure() -> Outcome {
    let ne = |var, level| ContextConstraint {
        var,
        relation: Relation::NotEqual,
        level,
    };
    let eq0 = |var| ContextConstraint {
        var,
        relation: Relation::Equal,
        level: 0,
    };
    let ex = examples();
    let (_, st6, plan6) = example_plan(&ex[2])?;
    let (_, st8, plan8) = example_plan(&ex[3])?;
    let st5 = CiStatement::new(vs("1"), vs("2"), vs("345")).unwrap();
    let plan5 = plan_of(
        "12345",
        &["12", "123"],
        &[("12", "45"), ("123", "45")],
        &["1234", "1235"],
    );
    let cases = [
        ("1 indep 2,3 | 4,5", &st6, &plan6, vec![ne(5, 1)]),
        ("1 indep 2 | 3,4,5", &st5, &plan5, vec![eq0(4), eq0(5)]),
        ("1 indep 2 | 4,5,6", &st8, &plan8, vec![eq0(5), eq0(6)]),
    ];
    let mut parts = Vec::new();
    for (name, st, plan, expected) in cases {
        let ctx = context_restriction(st, plan);
        ensure(
            ctx.constraints == expected && ctx.unrestricted.is_empty(),
            || format!("{name}: {ctx:?}"),
        )?;
        parts.push(format!("{name}: {}", ctx.render()));
    }
    Ok(parts.join("; "))
}

// zero blocks of the contrast conversions and projections under independence
fn appendix_checks() -> Outcome {
    let mut pairs = 0;
    let mut worst_conv: f64 = 0.0;
    for levels in [vec![2, 2, 2, 2], vec![2, 3, 4, 2], vec![3, 3, 2, 3]] {
        let spec = VariableSpec::new(levels).unwrap();
        for vars in spec.all_vars().subsets() {
            let margin = Margin::new(&spec, vars).unwrap();
            let c = verify_conversion_structure(&spec, &margin).map_err(|e| e.to_string())?;
            pairs += c.pairs;
            worst_conv = worst_conv.max(c.max_forbidden);
        }
    }
    let mut cases = 0;
    let mut worst_prod: f64 = 0.0;
    let mut worst_span: f64 = 0.0;
    for (k, levels) in [vec![2, 3, 2], vec![2, 2, 2, 2]].into_iter().enumerate() {
        let spec = VariableSpec::new(levels).unwrap();
        let d = spec.d();
        let all = spec.all_vars();
        let mut a_sets = all.subsets();
        a_sets.push(VarSet::empty());
        for roles in 0..3usize.pow(d as u32) {
            let role = |x: usize| (roles / 3usize.pow(x as u32 - 1)) % 3;
            let t = VarSet::new((1..=d).filter(|&x| role(x) == 1));
            let h = VarSet::new((1..=d).filter(|&x| role(x) == 2));
            if t.is_empty() {
                continue;
            }
            let j_h: Vec<usize> = h.iter().map(|x| spec.levels_of(x) - 1).collect();
            for a in &a_sets {
                let seed = 13_000 + 1000 * k as u64 + roles as u64;
                let check = verify_projector_factorization(&spec, a, &t, &h, &j_h, 50, seed)
                    .map_err(|e| format!("a = {a}, t = {t}, h = {h}: {e}"))?;
                cases += 1;
                worst_span = worst_span.max(check.max_containment_residual);
                if let Some(e) = check.max_product_error {
                    worst_prod = worst_prod.max(e);
                }
            }
        }
    }
    Ok(format!(
        "{pairs} contrast/block pairs, worst forbidden entry {worst_conv:.1e}; {cases} projector cases x 50 draws, product {worst_prod:.1e}, span residual {worst_span:.1e}"
    ))
}

fn relative_error(approx: &DMatrix<f64>, exact: &DMatrix<f64>) -> f64 {
    (approx - exact).amax() / exact.amax().max(f64::MIN_POSITIVE)
}

// analytic derivatives against central differences
fn finite_differences() -> Outcome {
    let eps = 1e-5;
    let mut worst_f: f64 = 0.0;
    for k in 0..10 {
        let spec = VariableSpec::new(vec![2, 3, 2]).unwrap();
        let margin = Margin::full(&spec);
        let p = random_distribution(&spec, &margin, SamplingMode::General, 14_000 + k);
        let full = TermSelection::full(&spec, &margin);
        let eta = eta_of(&p, &spec);
        let mu_at = |values: Vec<f64>| -> Vec<f64> {
            let e = ParamVector::new(full.clone(), values, ParamKind::Canonical).unwrap();
            mu_of(&p_of_eta(&e, &spec).unwrap(), &full, &spec)
                .unwrap()
                .values
        };
        let n = full.len();
        let mut fd = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut up = eta.values.clone();
            let mut down = eta.values.clone();
            up[c] += eps;
            down[c] -= eps;
            let (mu_up, mu_down) = (mu_at(up), mu_at(down));
            for r in 0..n {
                fd[(r, c)] = (mu_up[r] - mu_down[r]) / (2.0 * eps);
            }
        }
        worst_f = worst_f.max(relative_error(&fd, &fisher_f(&p, &full, &full, &spec)));
    }

    let mut worst_j: f64 = 0.0;
    for k in 0..10 {
        let levels = if k % 2 == 0 {
            vec![2, 2, 2, 2]
        } else {
            vec![3, 2, 2, 2]
        };
        let spec = VariableSpec::new(levels).unwrap();
        let plan = ex1_plan(&spec);
        let margin = Margin::full(&spec);
        let p = random_distribution(&spec, &margin, SamplingMode::General, 14_100 + k);
        let (r, i, h) = plan.selections(&spec).map_err(|e| e.to_string())?;
        let inputs = LmInputs::from_distribution(&spec, &p, r.clone(), i.clone(), h.clone())
            .map_err(|e| e.to_string())?;
        let star = eta_on(&p, &h, &spec).values;
        let n = star.len();
        let mut fd = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut up = star.clone();
            let mut down = star.clone();
            up[c] += eps;
            down[c] -= eps;
            let f_up = lm_step(&spec, &inputs, &up)
                .map_err(|e| e.to_string())?
                .eta_h;
            let f_down = lm_step(&spec, &inputs, &down)
                .map_err(|e| e.to_string())?
                .eta_h;
            for r in 0..n {
                fd[(r, c)] = (f_up[r] - f_down[r]) / (2.0 * eps);
            }
        }
        let jac = lm_jacobian(&spec, &p, &i, &h, &r).map_err(|e| e.to_string())?;
        worst_j = worst_j.max(relative_error(&fd, &jac.j));
    }
    ensure(worst_f < 1e-4 && worst_j < 1e-4, || {
        format!("information matrix {worst_f:e}, LM step {worst_j:e}")
    })?;
    Ok(format!(
        "10 points each: information matrix {worst_f:.1e}, LM step Jacobian {worst_j:.1e}"
    ))
}

fn main() -> ExitCode {
    let checks: [Check; 14] = [
        ("round trip p -> eta -> p", round_trip),
        ("C G = I in integers", right_inverse),
        (
            "recursion and expansion identities",
            recursion_and_expansion,
        ),
        ("mixed parameterization round trip", mixed_round_trip),
        (
            "information matrix positive definite",
            fisher_positive_definite,
        ),
        ("LM Jacobian spectral bound", spectral_bound),
        (
            "identity Jacobian when H avoids the constrained class",
            identity_jacobian,
        ),
        ("Q full rank at independence for valid plans", q_full_rank),
        ("validity conditions on worked plans", validity_battery),
        ("constructive replacement", constructive_replacement),
        ("LM reconstruction end to end", lm_end_to_end),
        ("context restrictions", context_structure),
        (
            "contrast conversion and projector factorization",
            appendix_checks,
        ),
        (
            "derivatives against central differences",
            finite_differences,
        ),
    ];
    // keep panic messages inside the report line
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("acceptance {:02} PASS {name} [{secs:.1}s]: {detail}", k + 1),
            Err(detail) => {
                failed += 1;
                println!("acceptance {:02} FAIL {name} [{secs:.1}s]: {detail}", k + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        checks.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
