//! Bookkeeping for interactions constrained in more than one margin: which
//! previously defined interactions a new independence statement touches, how
//! to free replacement terms for them, and in which context the statement
//! then actually holds.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::design::TermSelection;
use crate::error::{MllpError, Result};
use crate::table::{Margin, VarSet, VariableSpec};

/// `a ⊥ b | c`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CiStatement {
    pub a: VarSet,
    pub b: VarSet,
    #[serde(default)]
    pub c: VarSet,
}

impl CiStatement {
    pub fn new(a: VarSet, b: VarSet, c: VarSet) -> Result<Self> {
        let s = CiStatement { a, b, c };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a.is_empty() || self.b.is_empty() {
            return Err(MllpError::InvalidStatement(format!(
                "{self}: both sides must be non-empty"
            )));
        }
        if !self.a.is_disjoint(&self.b)
            || !self.a.is_disjoint(&self.c)
            || !self.b.is_disjoint(&self.c)
        {
            return Err(MllpError::InvalidStatement(format!(
                "{self}: the three sets must be disjoint"
            )));
        }
        Ok(())
    }

    pub fn margin(&self) -> VarSet {
        self.a.union(&self.b).union(&self.c)
    }
}

fn join(v: &VarSet) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl fmt::Display for CiStatement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ⊥ {}", join(&self.a), join(&self.b))?;
        if !self.c.is_empty() {
            write!(f, " | {}", join(&self.c))?;
        }
        Ok(())
    }
}

/// Interactions whose vanishing is equivalent to the statement: every subset
/// of `a ∪ b ∪ c` meeting both `a` and `b`.
pub fn ci_to_interactions(stmt: &CiStatement) -> Vec<VarSet> {
    stmt.margin()
        .subsets()
        .into_iter()
        .filter(|i| !i.is_disjoint(&stmt.a) && !i.is_disjoint(&stmt.b))
        .collect()
}

/// One replacement term: interaction `t ∪ h` with the variables of `h`
/// fixed at non-reference levels `j_h`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementElement {
    pub t: VarSet,
    pub h: VarSet,
    #[serde(rename = "j")]
    pub j_h: Vec<usize>,
}

impl ReplacementElement {
    /// Fixed levels default to the first non-reference category.
    pub fn new(t: VarSet, h: VarSet) -> Self {
        let j_h = vec![1; h.len()];
        ReplacementElement { t, h, j_h }
    }

    pub fn with_levels(t: VarSet, h: VarSet, j_h: Vec<usize>) -> Self {
        ReplacementElement { t, h, j_h }
    }

    pub fn interaction(&self) -> VarSet {
        self.t.union(&self.h)
    }
}

impl fmt::Display for ReplacementElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.h.is_empty() {
            write!(f, "{}", self.t.label())
        } else {
            write!(f, "({},{})", self.t.label(), self.h.label())
        }
    }
}

/// Duplicated interactions `i_dup` (in the order used by condition (iii)),
/// their replacements `h` aligned one-to-one, and the remaining previously
/// defined interactions `r`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplacementPlan {
    pub margin: VarSet,
    pub i_dup: Vec<VarSet>,
    pub h: Vec<ReplacementElement>,
    pub r: Vec<VarSet>,
}

impl ReplacementPlan {
    pub fn new(
        margin: VarSet,
        i_dup: Vec<VarSet>,
        h: Vec<ReplacementElement>,
        r: Vec<VarSet>,
    ) -> Result<Self> {
        let plan = ReplacementPlan {
            margin,
            i_dup,
            h,
            r,
        };
        plan.well_formed()?;
        Ok(plan)
    }

    /// Plan whose `r` is everything previously defined in the margin apart
    /// from `i_dup`.
    pub fn with_prior(
        margin: VarSet,
        i_dup: Vec<VarSet>,
        h: Vec<ReplacementElement>,
        prior: &[VarSet],
    ) -> Result<Self> {
        let r = defined_within(prior, &margin)
            .into_iter()
            .filter(|v| !i_dup.contains(v))
            .collect();
        ReplacementPlan::new(margin, i_dup, h, r)
    }

    fn well_formed(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for s in self.i_dup.iter().chain(&self.r) {
            if s.is_empty() || !s.is_subset(&self.margin) {
                return Err(MllpError::InvalidPlan(format!(
                    "interaction {s} is not a non-empty subset of {}",
                    self.margin
                )));
            }
            if !seen.insert(s.clone()) {
                return Err(MllpError::InvalidPlan(format!(
                    "interaction {s} listed twice"
                )));
            }
        }
        let mut seen_h = BTreeSet::new();
        for e in &self.h {
            if e.h.len() != e.j_h.len() {
                return Err(MllpError::InvalidPlan(format!(
                    "{e}: {} levels for {} fixed variables",
                    e.j_h.len(),
                    e.h.len()
                )));
            }
            let v = e.interaction();
            if e.t.is_empty() || !e.t.is_disjoint(&e.h) || !v.is_subset(&self.margin) {
                return Err(MllpError::InvalidPlan(format!(
                    "{e}: need disjoint t and h inside {}",
                    self.margin
                )));
            }
            if e.j_h.contains(&0) {
                return Err(MllpError::InvalidPlan(format!(
                    "{e}: fixed categories must differ from the reference category"
                )));
            }
            if !seen_h.insert((v, e.j_h.clone(), e.h.clone())) {
                return Err(MllpError::InvalidPlan(format!("{e} listed twice")));
            }
        }
        Ok(())
    }

    /// `(R, I, H)` as term selections of the margin.
    pub fn selections(
        &self,
        spec: &VariableSpec,
    ) -> Result<(TermSelection, TermSelection, TermSelection)> {
        let margin = Margin::new(spec, self.margin.clone())?;
        let r = TermSelection::blocks(spec, &margin, &self.r)?;
        let i = TermSelection::blocks(spec, &margin, &self.i_dup)?;
        let mut h = TermSelection::empty(&margin);
        for e in &self.h {
            let block = TermSelection::fixed_block(spec, &margin, &e.t, &e.h, &e.j_h)?;
            h = h.concat(&block)?;
        }
        Ok((r, i, h))
    }
}

impl fmt::Display for ReplacementPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i: Vec<String> = self.i_dup.iter().map(|s| s.label()).collect();
        let h: Vec<String> = self.h.iter().map(|e| e.to_string()).collect();
        write!(f, "I = {{{}}}, H = {{{}}}", i.join(","), h.join(","))
    }
}

/// Previously defined interactions (union of power sets of `prior`
/// margins) that fall inside `margin`, canonical order.
pub fn defined_within(prior: &[VarSet], margin: &VarSet) -> Vec<VarSet> {
    let mut out = BTreeSet::new();
    for m in prior {
        let inside = m.intersection(margin);
        if !inside.is_empty() {
            out.extend(inside.subsets());
        }
    }
    out.into_iter().collect()
}

/// Inclusion-maximal members, canonical order.
pub fn maximal_sets(family: &[VarSet]) -> Vec<VarSet> {
    let mut out: Vec<VarSet> = family
        .iter()
        .filter(|s| !family.iter().any(|o| o != *s && s.is_subset(o)))
        .cloned()
        .collect();
    out.sort();
    out.dedup();
    out
}

fn minimal_sets(family: &[VarSet]) -> Vec<VarSet> {
    let mut out: Vec<VarSet> = family
        .iter()
        .filter(|s| !family.iter().any(|o| o != *s && o.is_subset(s)))
        .cloned()
        .collect();
    out.sort();
    out.dedup();
    out
}

fn intersect_all(g: &[VarSet]) -> VarSet {
    let mut it = g.iter();
    let first = it.next().cloned().unwrap_or_default();
    it.fold(first, |acc, m| acc.intersection(m))
}

/// Non-empty sub-families of `family`, by size then position.
fn sub_families(family: &[VarSet]) -> Vec<Vec<VarSet>> {
    let n = family.len();
    let mut picks: Vec<Vec<usize>> = (1u32..(1u32 << n))
        .map(|mask| (0..n).filter(|k| mask & (1 << k) != 0).collect())
        .collect();
    picks.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    picks
        .into_iter()
        .map(|pick| pick.into_iter().map(|k| family[k].clone()).collect())
        .collect()
}

const MAX_FAMILY: usize = 20;

/// The families behind conditions (ii) and (iii) for one replacement element.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KFamilies {
    pub t: VarSet,
    pub h: VarSet,
    /// Maximal sets of `I ∪ R`.
    pub k: Vec<VarSet>,
    /// Maximal sets containing `t`.
    pub k_t: Vec<VarSet>,
    /// Sub-families of `k_t` whose intersection misses `h`.
    pub k_th: Vec<Vec<VarSet>>,
    /// Sub-families of `k` not in `k_th`.
    pub k_bar: Vec<Vec<VarSet>>,
    /// `Σ (−1)^{|G|+1}` over `k_th`.
    pub alternating_sum: i64,
}

pub fn k_families(t: &VarSet, h: &VarSet, defined: &[VarSet]) -> Result<KFamilies> {
    if !t.is_disjoint(h) {
        return Err(MllpError::InvalidPlan(format!("{t} and {h} overlap")));
    }
    let k = maximal_sets(defined);
    let k_t: Vec<VarSet> = k.iter().filter(|m| t.is_subset(m)).cloned().collect();
    if k_t.is_empty() {
        return Err(MllpError::InvalidPlan(format!(
            "{t} lies in no maximal previously defined set"
        )));
    }
    if k.len() > MAX_FAMILY {
        return Err(MllpError::InvalidPlan(format!(
            "{} maximal sets: too many sub-families to enumerate",
            k.len()
        )));
    }
    let k_th: Vec<Vec<VarSet>> = sub_families(&k_t)
        .into_iter()
        .filter(|g| intersect_all(g).is_disjoint(h))
        .collect();
    let k_bar = sub_families(&k)
        .into_iter()
        .filter(|g| !k_th.contains(g))
        .collect();
    let alternating_sum = k_th
        .iter()
        .map(|g| if g.len() % 2 == 1 { 1 } else { -1 })
        .sum();
    Ok(KFamilies {
        t: t.clone(),
        h: h.clone(),
        k,
        k_t,
        k_th,
        k_bar,
        alternating_sum,
    })
}

/// A sub-family `g` whose trace `s` on `t ∪ h` is not covered.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OrderWitness {
    pub t: VarSet,
    pub h: VarSet,
    pub g: Vec<VarSet>,
    pub s: VarSet,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidityReport {
    pub condition_i: bool,
    pub condition_i_problems: Vec<String>,
    pub condition_ii: bool,
    /// Replacement elements whose alternating sum vanishes.
    pub condition_ii_failures: Vec<(VarSet, VarSet)>,
    pub condition_iii: bool,
    /// Violations under the supplied order.
    pub condition_iii_witnesses: Vec<OrderWitness>,
    /// An order satisfying (iii), when one exists.
    pub order: Option<Vec<VarSet>>,
    pub families: Vec<KFamilies>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.condition_i && self.condition_ii && self.condition_iii
    }
}

pub fn check_valid_replacement(plan: &ReplacementPlan) -> ValidityReport {
    let mut problems = Vec::new();
    if plan.h.len() != plan.i_dup.len() {
        problems.push(format!(
            "{} replacement elements for {} duplicated interactions",
            plan.h.len(),
            plan.i_dup.len()
        ));
    }
    let defined: Vec<VarSet> = plan.i_dup.iter().chain(&plan.r).cloned().collect();
    for (t, e) in plan.i_dup.iter().zip(&plan.h) {
        if &e.t != t {
            problems.push(format!("{e} does not extend {}", t.label()));
        }
        if e.h.is_empty() {
            problems.push(format!("{e}: no fixed variables"));
        }
        if defined.contains(&e.interaction()) {
            problems.push(format!("{e} is already defined"));
        }
    }
    for (a, b) in plan
        .i_dup
        .iter()
        .enumerate()
        .flat_map(|(k, a)| plan.i_dup[k + 1..].iter().map(move |b| (a, b)))
    {
        if b.is_subset(a) {
            problems.push(format!(
                "order lists {} before its subset {}",
                a.label(),
                b.label()
            ));
        }
    }

    let mut families = Vec::new();
    let mut ii_fail = Vec::new();
    let mut witnesses = Vec::new();
    let mut hard = false;
    // precede[k] holds indices that must come before i_dup[k].
    let mut precede: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); plan.i_dup.len()];
    let position: HashMap<&VarSet, usize> =
        plan.i_dup.iter().enumerate().map(|(k, s)| (s, k)).collect();
    for (k, e) in plan.h.iter().enumerate() {
        let fam = match k_families(&e.t, &e.h, &defined) {
            Ok(f) => f,
            Err(err) => {
                problems.push(format!("{e}: {err}"));
                hard = true;
                continue;
            }
        };
        if fam.alternating_sum == 0 {
            ii_fail.push((e.t.clone(), e.h.clone()));
        }
        let v = e.interaction();
        let tk = position.get(&e.t).copied().filter(|_| k < plan.i_dup.len());
        for g in &fam.k_bar {
            let s = intersect_all(g).intersection(&v);
            if s.is_empty() || plan.r.contains(&s) {
                continue;
            }
            let covered = match (position.get(&s), tk) {
                (Some(&si), Some(ti)) if si != ti => {
                    precede[ti].insert(si);
                    si < ti
                }
                _ => {
                    hard = true;
                    false
                }
            };
            if !covered {
                witnesses.push(OrderWitness {
                    t: e.t.clone(),
                    h: e.h.clone(),
                    g: g.clone(),
                    s,
                });
            }
        }
        families.push(fam);
    }
    for (a, sa) in plan.i_dup.iter().enumerate() {
        for (b, sb) in plan.i_dup.iter().enumerate() {
            if a != b && sb.is_subset(sa) {
                precede[a].insert(b);
            }
        }
    }
    let order = if hard {
        None
    } else {
        topological_order(&precede).map(|o| o.into_iter().map(|k| plan.i_dup[k].clone()).collect())
    };
    ValidityReport {
        condition_i: problems.is_empty(),
        condition_i_problems: problems,
        condition_ii: ii_fail.is_empty(),
        condition_ii_failures: ii_fail,
        condition_iii: order.is_some(),
        condition_iii_witnesses: witnesses,
        order,
        families,
    }
}

/// Any order respecting `precede`; ties broken by original position.
fn topological_order(precede: &[BTreeSet<usize>]) -> Option<Vec<usize>> {
    let n = precede.len();
    let mut placed = vec![false; n];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let next = (0..n).find(|&k| !placed[k] && precede[k].iter().all(|&j| placed[j]))?;
        placed[next] = true;
        out.push(next);
    }
    Some(out)
}

/// The single-interaction replacement that always exists: `t` a minimal
/// duplicated interaction, `h` the variables of `M \ t` lying in at most one
/// maximal set containing `t` (or outside that set when it is unique).
pub fn construct_replacement(
    spec: &VariableSpec,
    margin: &VarSet,
    a: &[VarSet],
    prior: &[VarSet],
) -> Result<ReplacementPlan> {
    let defined = defined_within(prior, margin);
    let dup: Vec<VarSet> = a.iter().filter(|s| defined.contains(s)).cloned().collect();
    if dup.is_empty() {
        return Err(MllpError::NoAdmissibleReplacement(format!(
            "no constrained interaction was defined before margin {margin}"
        )));
    }
    let k = maximal_sets(&defined);
    let mut reasons = Vec::new();
    for t in minimal_sets(&dup) {
        let h = constructive_h(&t, margin, &k);
        if h.is_empty() {
            reasons.push(format!(
                "t = {}: every other variable lies in two maximal sets",
                t.label()
            ));
            continue;
        }
        let levels = h.iter().map(|_| 1).collect();
        let element = ReplacementElement::with_levels(t.clone(), h, levels);
        let plan =
            ReplacementPlan::with_prior(margin.clone(), vec![t.clone()], vec![element], prior)?;
        if plan.selections(spec).is_err() {
            reasons.push(format!(
                "t = {}: terms outside the declared levels",
                t.label()
            ));
            continue;
        }
        let report = check_valid_replacement(&plan);
        if report.is_valid() {
            return Ok(plan);
        }
        reasons.push(format!(
            "t = {}: candidate {plan} fails the validity check",
            t.label()
        ));
    }
    Err(MllpError::NoAdmissibleReplacement(reasons.join("; ")))
}

const MAX_SEARCH: usize = 10;

fn constructive_h(t: &VarSet, margin: &VarSet, k: &[VarSet]) -> VarSet {
    let k_t: Vec<&VarSet> = k.iter().filter(|m| t.is_subset(m)).collect();
    if k_t.len() == 1 {
        margin.difference(k_t[0])
    } else {
        VarSet::new(
            margin
                .difference(t)
                .iter()
                .filter(|&v| k_t.iter().filter(|m| m.contains(v)).count() <= 1),
        )
    }
}

/// Redefines as many duplicated interactions as possible: the largest
/// inclusion-closed subset of them that admits a valid replacement, either
/// with one shared `h` (the variables outside all redefined sets) or with
/// each interaction's own constructive `h`. Falls back to
/// [`construct_replacement`].
pub fn suggest_plan(
    spec: &VariableSpec,
    margin: &VarSet,
    a: &[VarSet],
    prior: &[VarSet],
) -> Result<ReplacementPlan> {
    let defined = defined_within(prior, margin);
    let mut dup: Vec<VarSet> = a.iter().filter(|s| defined.contains(s)).cloned().collect();
    dup.sort();
    if dup.len() <= MAX_SEARCH {
        let k = maximal_sets(&defined);
        let mut candidates: Vec<Vec<VarSet>> = (1u32..(1u32 << dup.len()))
            .map(|mask| {
                (0..dup.len())
                    .filter(|j| mask & (1 << j) != 0)
                    .map(|j| dup[j].clone())
                    .collect::<Vec<_>>()
            })
            .filter(|i: &Vec<VarSet>| {
                i.iter().all(|s| {
                    dup.iter()
                        .filter(|o| o.is_subset(s) && *o != s)
                        .all(|o| i.contains(o))
                })
            })
            .collect();
        candidates.sort_by(|x, y| y.len().cmp(&x.len()).then_with(|| x.cmp(y)));
        for i_dup in candidates {
            let covered = i_dup.iter().fold(VarSet::empty(), |acc, s| acc.union(s));
            let shared = margin.difference(&covered);
            let mut options: Vec<Vec<VarSet>> = Vec::new();
            if !shared.is_empty() {
                options.push(vec![shared; i_dup.len()]);
            }
            options.push(i_dup.iter().map(|t| constructive_h(t, margin, &k)).collect());
            for hs in options {
                if hs.iter().any(|h| h.is_empty()) {
                    continue;
                }
                let h = i_dup
                    .iter()
                    .zip(hs)
                    .map(|(t, h)| ReplacementElement::new(t.clone(), h))
                    .collect();
                let Ok(plan) = ReplacementPlan::with_prior(margin.clone(), i_dup.clone(), h, prior)
                else {
                    continue;
                };
                if plan.selections(spec).is_ok() && check_valid_replacement(&plan).is_valid() {
                    return Ok(plan);
                }
            }
        }
    }
    construct_replacement(spec, margin, a, prior)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "=")]
    Equal,
    #[serde(rename = "≠")]
    NotEqual,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextConstraint {
    pub var: usize,
    pub relation: Relation,
    pub level: usize,
}

impl fmt::Display for ContextConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.relation {
            Relation::Equal => "=",
            Relation::NotEqual => "≠",
        };
        write!(f, "X{} {op} {}", self.var, self.level)
    }
}

/// Configurations of the conditioning variables on which a statement still
/// holds after replacement.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ContextSpec {
    pub constraints: Vec<ContextConstraint>,
    /// Interactions that cannot be released by any restriction of the
    /// conditioning variables.
    pub unrestricted: Vec<VarSet>,
}

impl ContextSpec {
    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty() && self.unrestricted.is_empty()
    }

    /// Whether a configuration (variable to level) lies in the context.
    pub fn admits(&self, config: &BTreeMap<usize, usize>) -> bool {
        self.constraints.iter().all(|c| match config.get(&c.var) {
            None => true,
            Some(&x) => match c.relation {
                Relation::Equal => x == c.level,
                Relation::NotEqual => x != c.level,
            },
        })
    }

    /// "X4 ≠ 1, X5 = 0".
    pub fn render(&self) -> String {
        self.constraints
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// "1 ⊥ 2 | 3,4 [x4≠1]".
    pub fn render_statement(&self, stmt: &CiStatement) -> String {
        if self.constraints.is_empty() {
            return stmt.to_string();
        }
        let inner: Vec<String> = self
            .constraints
            .iter()
            .map(|c| {
                let op = match c.relation {
                    Relation::Equal => "=",
                    Relation::NotEqual => "≠",
                };
                format!("x{}{op}{}", c.var, c.level)
            })
            .collect();
        format!("{stmt} [{}]", inner.join(","))
    }
}

impl fmt::Display for ContextSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Context in which `stmt` can still be imposed once `plan` frees its
/// replacement terms and leaves `A ∩ R` as defined earlier.
pub fn context_restriction(stmt: &CiStatement, plan: &ReplacementPlan) -> ContextSpec {
    let a = ci_to_interactions(stmt);
    let c = &stmt.c;
    let mut fixed: BTreeSet<usize> = BTreeSet::new();
    let mut differ: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut unrestricted = BTreeSet::new();

    for e in &plan.h {
        let mut any = false;
        for (var, &level) in e.h.iter().zip(&e.j_h) {
            if c.contains(var) {
                differ.insert((var, level));
                any = true;
            }
        }
        if !any {
            unrestricted.insert(e.interaction());
        }
    }
    let tops = maximal_sets(&plan.i_dup);
    for v in a.iter().filter(|v| plan.r.contains(v)) {
        for m in &tops {
            for w in v.difference(m).iter() {
                if c.contains(w) {
                    fixed.insert(w);
                } else {
                    unrestricted.insert(v.clone());
                }
            }
        }
        if tops.is_empty() {
            unrestricted.insert(v.clone());
        }
    }

    let mut constraints: Vec<ContextConstraint> = fixed
        .iter()
        .map(|&var| ContextConstraint {
            var,
            relation: Relation::Equal,
            level: 0,
        })
        .collect();
    constraints.extend(
        differ
            .into_iter()
            .filter(|(var, _)| !fixed.contains(var))
            .map(|(var, level)| ContextConstraint {
                var,
                relation: Relation::NotEqual,
                level,
            }),
    );
    constraints.sort_by_key(|c| (c.var, c.relation, c.level));
    ContextSpec {
        constraints,
        unrestricted: unrestricted.into_iter().collect(),
    }
}
