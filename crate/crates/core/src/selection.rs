//! Iterative reduction of a maximal random-effects structure to a
//! parsimonious one, with every step recorded.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{ColumnData, ContrastScheme, Dataset};
use crate::error::{Error, Result};
use crate::fitter::{fit, refit, Criterion, Fit, FitOptions};
use crate::formula::{parse_formula, zcp_transform, Component, FormulaAst, RandomTerm};
use crate::inference::{information_criteria, lr_test, LrtResult};
use crate::repca::{repca, DEFAULT_DIM_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DropOrder {
    /// Highest interaction order first, then smallest estimated variance.
    #[default]
    InteractionOrderThenSmallest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub alpha: f64,
    pub dim_tol: f64,
    pub drop_order: DropOrder,
    pub max_steps: usize,
    pub criterion: Criterion,
    /// Correlations with |r| below this are nominated for pruning.
    pub prune_threshold: f64,
    pub contrasts: ContrastScheme,
    /// Options for every fit; the criterion is overridden by `criterion`.
    pub fit: FitOptions,
    /// Evaluation budget for the maximal model only.
    pub maximal_max_evals: Option<usize>,
    /// Worker threads for candidate fits; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            alpha: 0.05,
            dim_tol: DEFAULT_DIM_TOL,
            drop_order: DropOrder::default(),
            max_steps: 100,
            criterion: Criterion::Reml,
            prune_threshold: 0.15,
            contrasts: ContrastScheme::default(),
            fit: FitOptions::default(),
            maximal_max_evals: None,
            threads: None,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if !(self.dim_tol >= 0.0 && self.dim_tol < 1.0) {
            return Err(Error::Config(format!("dim_tol must lie in [0, 1), got {}", self.dim_tol)));
        }
        if !(self.prune_threshold >= 0.0 && self.prune_threshold <= 1.0) {
            return Err(Error::Config("prune_threshold must lie in [0, 1]".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    fn fit_options(&self) -> FitOptions {
        FitOptions {
            criterion: self.criterion,
            ..self.fit.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    StartMaximal,
    FallbackZcp,
    DropComponents,
    LrtDrop,
    AddCorrelations,
    PruneCorrelations,
    Stop,
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Action::StartMaximal => "start-maximal",
            Action::FallbackZcp => "fallback-zcp",
            Action::DropComponents => "drop-components",
            Action::LrtDrop => "lrt-drop",
            Action::AddCorrelations => "add-correlations",
            Action::PruneCorrelations => "prune-correlations",
            Action::Stop => "stop",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub deviance: f64,
    pub criterion: Criterion,
    pub converged: bool,
    pub singular: bool,
    pub n_evals: usize,
    pub budget: usize,
    pub n_theta: usize,
    pub n_params: usize,
    pub sigma: f64,
    pub aic: f64,
    pub bic: f64,
}

impl FitSummary {
    pub fn of(fit: &Fit) -> Self {
        let ic = information_criteria(fit);
        FitSummary {
            deviance: fit.result.deviance,
            criterion: fit.result.criterion,
            converged: fit.result.converged,
            singular: fit.result.singular,
            n_evals: fit.result.n_evals,
            budget: fit.result.budget,
            n_theta: fit.n_theta(),
            n_params: fit.n_params(),
            sigma: fit.result.sigma,
            aic: ic.aic,
            bic: ic.bic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub action: Action,
    pub formula: String,
    /// Whether the proposed model became the current model.
    pub accepted: bool,
    pub fit: Option<FitSummary>,
    /// Effective dimensionality per grouping factor.
    pub repca_dims: Vec<(String, usize)>,
    pub lrt: Option<LrtResult>,
    /// Components removed (`group: component`) or correlations added/removed.
    pub changes: Vec<String>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub config: SelectionConfig,
    pub steps: Vec<TraceStep>,
    pub final_formula: String,
    pub final_singular: bool,
    pub final_converged: bool,
    pub notes: Vec<String>,
}

impl SelectionTrace {
    /// Formulas of the accepted models, in order.
    pub fn accepted_formulas(&self) -> Vec<&str> {
        self.steps
            .iter()
            .filter(|s| s.accepted && s.action != Action::Stop)
            .map(|s| s.formula.as_str())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SelectionOutcome {
    pub trace: SelectionTrace,
    pub final_fit: Fit,
}

/// A grouping factor and the experimental factors that vary within its levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupWithin {
    pub group: String,
    pub within: Vec<String>,
}

/// Factors among `candidates` that take more than one value inside at
/// least one level of `group`.
pub fn infer_within(data: &Dataset, group: &str, candidates: &[String]) -> Result<Vec<String>> {
    let codes = match &data.column(group)?.data {
        ColumnData::Factor { codes, .. } => codes.clone(),
        ColumnData::Numeric(_) => return Err(Error::NonFactorGroup(group.to_string())),
    };
    let mut out = Vec::new();
    for name in candidates {
        let col = data.column(name)?;
        let mut first: BTreeMap<usize, usize> = BTreeMap::new();
        let varies = match &col.data {
            ColumnData::Factor { codes: vals, .. } => codes.iter().zip(vals).any(|(&g, &v)| *first.entry(g).or_insert(v) != v),
            ColumnData::Numeric(vals) => {
                let mut firstv: BTreeMap<usize, f64> = BTreeMap::new();
                codes.iter().zip(vals).any(|(&g, &v)| *firstv.entry(g).or_insert(v) != v)
            }
        };
        if varies {
            out.push(name.clone());
        }
    }
    Ok(out)
}

/// Fixed part of `fixed` plus, per grouping factor, a correlated term with
/// an intercept and every within-unit main effect and interaction.
pub fn maximal_formula(fixed: &FormulaAst, groups: &[GroupWithin], data: &Dataset) -> Result<FormulaAst> {
    let mut base = fixed.clone();
    base.random.clear();
    let mut text = base.to_string();
    for g in groups {
        match &data.column(&g.group)?.data {
            ColumnData::Factor { .. } => {}
            ColumnData::Numeric(_) => return Err(Error::NonFactorGroup(g.group.clone())),
        }
        for w in &g.within {
            data.column(w)?;
        }
        let inner = if g.within.is_empty() {
            "1".to_string()
        } else {
            format!("1 + {}", g.within.join("*"))
        };
        text.push_str(&format!(" + ({} | {})", inner, g.group));
    }
    Ok(parse_formula(&text)?)
}

/// Single-component terms are written in correlated form and empty terms
/// removed, so equal structures print identically.
pub fn normalize(ast: &FormulaAst) -> FormulaAst {
    let mut out = ast.clone();
    out.random.retain(|r| !r.is_empty());
    for r in &mut out.random {
        if r.components().len() == 1 {
            r.correlated = true;
        }
    }
    out
}

/// Random-effects structure as sets: components and correlated pairs per group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomStructure {
    pub groups: BTreeMap<String, (BTreeSet<Component>, BTreeSet<(Component, Component)>)>,
}

impl RandomStructure {
    pub fn of(ast: &FormulaAst) -> Self {
        let mut groups: BTreeMap<String, (BTreeSet<Component>, BTreeSet<(Component, Component)>)> = BTreeMap::new();
        for r in &ast.random {
            let entry = groups.entry(r.group.clone()).or_default();
            let cs = r.components();
            entry.0.extend(cs.iter().cloned());
            if r.correlated {
                for i in 0..cs.len() {
                    for j in 0..i {
                        let (a, b) = if cs[i] < cs[j] { (&cs[i], &cs[j]) } else { (&cs[j], &cs[i]) };
                        entry.1.insert((a.clone(), b.clone()));
                    }
                }
            }
        }
        groups.retain(|_, v| !v.0.is_empty());
        RandomStructure { groups }
    }

    pub fn n_components(&self) -> usize {
        self.groups.values().map(|v| v.0.len()).sum()
    }

    pub fn n_correlations(&self) -> usize {
        self.groups.values().map(|v| v.1.len()).sum()
    }

    pub fn is_subset_of(&self, other: &RandomStructure) -> bool {
        self.groups.iter().all(|(g, (c, p))| {
            other
                .groups
                .get(g)
                .is_some_and(|(oc, op)| c.is_subset(oc) && p.is_subset(op))
        })
    }
}

fn remove_component(ast: &FormulaAst, group: &str, comp: &Component) -> FormulaAst {
    let mut out = ast.clone();
    for r in out.random.iter_mut().filter(|r| r.group == group) {
        let kept: Vec<Component> = r.components().into_iter().filter(|c| c != comp).collect();
        *r = RandomTerm::from_components(&kept, r.group.clone(), r.correlated);
    }
    normalize(&out)
}

fn merge_group(ast: &FormulaAst, group: &str) -> FormulaAst {
    let comps = ast.components_of(group);
    let mut out = ast.clone();
    let first = out.random.iter().position(|r| r.group == group);
    let mut random = Vec::new();
    for (i, r) in out.random.iter().enumerate() {
        if r.group != group {
            random.push(r.clone());
        } else if Some(i) == first {
            random.push(RandomTerm::from_components(&comps, group, true));
        }
    }
    out.random = random;
    normalize(&out)
}

fn eligible(components: &[Component], comp: &Component) -> bool {
    match comp {
        Component::Intercept => components.len() == 1,
        Component::Effect(t) => !components.iter().any(|c| match c {
            Component::Effect(u) => u != t && t.is_contained_in(u),
            Component::Intercept => false,
        }),
    }
}

/// Components that may be removed without breaking marginality: no
/// interaction containing them remains, and an intercept only goes when it
/// is the factor's last component. The model's last component is kept.
pub fn removable_components(ast: &FormulaAst) -> Vec<(String, Component)> {
    let total: usize = ast.groups().iter().map(|g| ast.components_of(g).len()).sum();
    if total <= 1 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for g in ast.groups() {
        let comps = ast.components_of(&g);
        for c in &comps {
            if eligible(&comps, c) {
                out.push((g.clone(), c.clone()));
            }
        }
    }
    out
}

/// Estimated relative SD of each component: the largest row norm of Λ
/// over its columns, with the sum of squares as its variance.
fn component_scales(fit: &Fit) -> Vec<(String, Component, f64, f64)> {
    let sds = fit.relative_sds();
    let mut out: Vec<(String, Component, f64, f64)> = Vec::new();
    for (f, factor) in fit.matrices.factors.iter().enumerate() {
        let mut col = 0;
        for &b in &factor.blocks {
            let blk = &fit.matrices.blocks[b];
            for comp in &blk.components {
                let sd = sds[f][col];
                col += 1;
                match out.iter_mut().find(|e| e.0 == factor.name && &e.1 == comp) {
                    Some(e) => {
                        e.2 = e.2.max(sd);
                        e.3 += sd * sd;
                    }
                    None => out.push((factor.name.clone(), comp.clone(), sd, sd * sd)),
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DropProposal {
    pub formula: FormulaAst,
    pub removed: Vec<(String, Component)>,
    /// True when components were removed for a zero estimate rather than
    /// to resolve a rank deficiency.
    pub batch: bool,
}

/// Proposes a smaller model for an over-parameterized fit.
///
/// All components whose relative SD is below the singularity tolerance
/// (relative to the largest on the same factor) go at once, subject to
/// marginality. Failing that, a singular factor loses a single component:
/// highest interaction order first, then smallest variance.
pub fn drop_components(fit: &Fit, config: &SelectionConfig) -> Result<DropProposal> {
    let tol = config.fit.singular_tol;
    let scales = component_scales(fit);
    let mut max_by_group: BTreeMap<&str, f64> = BTreeMap::new();
    for (g, _, sd, _) in &scales {
        let e = max_by_group.entry(g.as_str()).or_insert(0.0);
        *e = e.max(*sd);
    }
    let mut zero: BTreeSet<(String, Component)> = scales
        .iter()
        .filter(|(g, _, sd, _)| {
            let max = max_by_group[g.as_str()];
            max <= 0.0 || *sd < tol * max
        })
        .map(|(g, c, _, _)| (g.clone(), c.clone()))
        .collect();
    // Marginality: keep anything a retained component depends on.
    loop {
        let blocked: Vec<(String, Component)> = zero
            .iter()
            .filter(|(g, c)| {
                scales.iter().any(|(g2, c2, _, _)| {
                    g2 == g
                        && !zero.contains(&(g2.clone(), c2.clone()))
                        && match (c, c2) {
                            (Component::Intercept, _) => true,
                            (Component::Effect(t), Component::Effect(u)) => t.is_contained_in(u),
                            (Component::Effect(_), Component::Intercept) => false,
                        }
                })
            })
            .cloned()
            .collect();
        if blocked.is_empty() {
            break;
        }
        for b in blocked {
            zero.remove(&b);
        }
    }
    if !zero.is_empty() && zero.len() < scales.len() {
        let mut formula = fit.formula.clone();
        let mut removed = Vec::new();
        for (g, c, _, _) in &scales {
            if zero.contains(&(g.clone(), c.clone())) {
                formula = remove_component(&formula, g, c);
                removed.push((g.clone(), c.clone()));
            }
        }
        return Ok(DropProposal {
            formula,
            removed,
            batch: true,
        });
    }
    if fit.result.singular {
        let singular_groups: BTreeSet<&str> = fit
            .matrices
            .factors
            .iter()
            .zip(&fit.result.factor_singular)
            .filter(|(_, &s)| s)
            .map(|(f, _)| f.name.as_str())
            .collect();
        let removable = removable_components(&fit.formula);
        let mut best: Option<&(String, Component, f64, f64)> = None;
        for entry in &scales {
            if !singular_groups.contains(entry.0.as_str()) || !removable.iter().any(|(g, c)| g == &entry.0 && c == &entry.1) {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => entry.1.order() > b.1.order() || (entry.1.order() == b.1.order() && entry.3 < b.3),
            };
            if better {
                best = Some(entry);
            }
        }
        if let Some((g, c, _, _)) = best {
            return Ok(DropProposal {
                formula: remove_component(&fit.formula, g, c),
                removed: vec![(g.clone(), c.clone())],
                batch: false,
            });
        }
    }
    Err(Error::NothingRemovable("every component is reliably estimated".into()))
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads.and_then(|n| rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()) {
        Some(pool) => pool.install(f),
        None => f(),
    }
}

/// One elimination round: every removable component is refitted away and
/// tested; the removal with the largest p-value is returned if it exceeds
/// `alpha`, together with the candidates' results.
fn elimination_round(current: &Fit, config: &SelectionConfig) -> Vec<(String, Component, Result<(Fit, LrtResult)>)> {
    let candidates = removable_components(&current.formula);
    let run = || {
        candidates
            .par_iter()
            .map(|(g, c)| {
                let formula = remove_component(&current.formula, g, c);
                let res = refit(current, Some(&formula), None, Some(&config.fit_options())).and_then(|f| {
                    let l = lr_test(&f, current)?;
                    Ok((f, l))
                });
                (g.clone(), c.clone(), res)
            })
            .collect::<Vec<_>>()
    };
    with_pool(config.threads, run)
}

fn step(action: Action, fit: &Fit, accepted: bool, config: &SelectionConfig) -> TraceStep {
    TraceStep {
        action,
        formula: normalize(&fit.formula).to_string(),
        accepted,
        fit: Some(FitSummary::of(fit)),
        repca_dims: repca(fit, config.dim_tol).map(|r| r.dims()).unwrap_or_default(),
        lrt: None,
        changes: Vec::new(),
        note: None,
    }
}

/// Backward elimination by likelihood-ratio tests, one component at a time.
pub fn lrt_backward_elimination(start: &Fit, config: &SelectionConfig) -> Result<(Fit, Vec<TraceStep>)> {
    config.validate()?;
    let mut current = start.clone();
    let mut steps = Vec::new();
    while steps.len() < config.max_steps {
        let results = elimination_round(&current, config);
        let mut best: Option<(String, Component, Fit, LrtResult)> = None;
        for (g, c, res) in results {
            if let Ok((f, l)) = res {
                if best.as_ref().map_or(true, |b| l.p_value > b.3.p_value) {
                    best = Some((g, c, f, l));
                }
            }
        }
        match best {
            Some((g, c, f, l)) if l.p_value > config.alpha => {
                let mut s = step(Action::LrtDrop, &f, true, config);
                s.changes = vec![format!("{}: {}", g, c)];
                s.lrt = Some(l);
                steps.push(s);
                current = f;
            }
            _ => break,
        }
    }
    Ok((current, steps))
}

/// Tests adding all correlations among the components of each grouping
/// factor that is not already a single correlated term.
pub fn extend_correlations(start: &Fit, config: &SelectionConfig) -> Result<(Fit, Vec<TraceStep>)> {
    config.validate()?;
    let mut current = start.clone();
    let mut steps = Vec::new();
    for g in current.formula.groups() {
        let terms: Vec<&RandomTerm> = current.formula.random.iter().filter(|r| r.group == g).collect();
        let n_comp: usize = terms.iter().map(|r| r.components().len()).sum();
        if n_comp < 2 || (terms.len() == 1 && terms[0].correlated) {
            continue;
        }
        let formula = merge_group(&current.formula, &g);
        let res = refit(&current, Some(&formula), None, Some(&config.fit_options())).and_then(|f| {
            let l = lr_test(&current, &f)?;
            Ok((f, l))
        });
        match res {
            Ok((f, l)) => {
                let accept = l.p_value < config.alpha;
                let mut s = step(Action::AddCorrelations, &f, accept, config);
                s.changes = vec![format!("{}: correlations among {}", g, join_components(&formula.components_of(&g)))];
                s.lrt = Some(l);
                steps.push(s);
                if accept {
                    current = f;
                }
            }
            Err(e) => steps.push(error_step(Action::AddCorrelations, &formula, &e)),
        }
    }
    Ok((current, steps))
}

fn join_components(cs: &[Component]) -> String {
    cs.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(", ")
}

fn error_step(action: Action, formula: &FormulaAst, e: &Error) -> TraceStep {
    TraceStep {
        action,
        formula: normalize(formula).to_string(),
        accepted: false,
        fit: None,
        repca_dims: Vec::new(),
        lrt: None,
        changes: Vec::new(),
        note: Some(format!("fit failed: {}", e)),
    }
}

/// Splits correlated terms so that correlations with |r| below the prune
/// threshold are removed; kept when the likelihood-ratio test shows no
/// significant loss.
pub fn prune_correlations(start: &Fit, config: &SelectionConfig) -> Result<(Fit, Option<TraceStep>)> {
    config.validate()?;
    let current = start;
    let summaries = current.covariance_summaries()?;
    let mut formula = current.formula.clone();
    let mut new_random = Vec::new();
    let mut changes = Vec::new();
    // Column position of each (group, component) inside its factor.
    for r in &current.formula.random {
        let comps = r.components();
        if !r.correlated || comps.len() < 2 {
            new_random.push(r.clone());
            continue;
        }
        let f = current.matrices.factors.iter().position(|f| f.name == r.group).expect("fitted group");
        let factor = &current.matrices.factors[f];
        let mut cols: Vec<(usize, Component)> = Vec::new();
        let mut col = 0;
        for &b in &factor.blocks {
            for c in &current.matrices.blocks[b].components {
                cols.push((col, c.clone()));
                col += 1;
            }
        }
        let cor = &summaries[f].cor;
        let strong = |a: &Component, b: &Component| {
            cols.iter().filter(|(_, c)| c == a).any(|(i, _)| {
                cols.iter()
                    .filter(|(_, c)| c == b)
                    .any(|(j, _)| cor[*i][*j].is_some_and(|v| v.abs() >= config.prune_threshold))
            })
        };
        // Connected components of the strong-correlation graph.
        let mut part: Vec<usize> = (0..comps.len()).collect();
        let find = |part: &Vec<usize>, mut x: usize| {
            while part[x] != x {
                x = part[x];
            }
            x
        };
        for i in 0..comps.len() {
            for j in 0..i {
                if strong(&comps[i], &comps[j]) {
                    let (a, b) = (find(&part, i), find(&part, j));
                    if a != b {
                        part[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut blocks: BTreeMap<usize, Vec<Component>> = BTreeMap::new();
        for (i, c) in comps.iter().enumerate() {
            blocks.entry(find(&part, i)).or_default().push(c.clone());
        }
        if blocks.len() == 1 {
            new_random.push(r.clone());
            continue;
        }
        for (i, a) in comps.iter().enumerate() {
            for b in &comps[..i] {
                if find(&part, i) != find(&part, comps.iter().position(|c| c == b).unwrap()) {
                    changes.push(format!("{}: {} ~ {}", r.group, b, a));
                }
            }
        }
        for cs in blocks.values() {
            new_random.push(RandomTerm::from_components(cs, r.group.clone(), true));
        }
    }
    if changes.is_empty() {
        return Ok((current.clone(), None));
    }
    formula.random = new_random;
    let formula = normalize(&formula);
    let res = refit(current, Some(&formula), None, Some(&config.fit_options())).and_then(|f| {
        let l = lr_test(&f, current)?;
        Ok((f, l))
    });
    match res {
        Ok((f, l)) => {
            let accept = l.p_value > config.alpha;
            let mut s = step(Action::PruneCorrelations, &f, accept, config);
            s.changes = changes;
            s.lrt = Some(l);
            Ok((if accept { f } else { current.clone() }, Some(s)))
        }
        Err(e) => {
            let mut s = error_step(Action::PruneCorrelations, &formula, &e);
            s.changes = changes;
            Ok((current.clone(), Some(s)))
        }
    }
}

/// Runs the whole reduction from `maximal`.
pub fn run_workflow(maximal: &FormulaAst, data: Arc<Dataset>, config: &SelectionConfig) -> Result<SelectionOutcome> {
    config.validate()?;
    for g in maximal.groups() {
        let comps = maximal.components_of(&g);
        let unique: BTreeSet<&Component> = comps.iter().collect();
        if unique.len() != comps.len() {
            return Err(Error::Config(format!("a component appears twice for `{}`", g)));
        }
    }
    let opts = config.fit_options();
    let mut steps: Vec<TraceStep> = Vec::new();
    let notes = vec![
        "components removed before correlations are added are not revisited".to_string(),
    ];

    let max_opts = FitOptions {
        max_evals: config.maximal_max_evals.or(opts.max_evals),
        ..opts.clone()
    };
    let maximal = normalize(maximal);
    let maximal_fit = fit(&maximal, data.clone(), &config.contrasts, &max_opts);
    let mut current = match &maximal_fit {
        Ok(f) => {
            steps.push(step(Action::StartMaximal, f, true, config));
            Some(f.clone())
        }
        Err(e) => {
            steps.push(error_step(Action::StartMaximal, &maximal, e));
            None
        }
    };

    let needs_fallback = current
        .as_ref()
        .map_or(true, |f| !f.result.converged || f.result.singular);
    if needs_fallback {
        let zcp = normalize(&zcp_transform(&maximal));
        if current.as_ref().map_or(true, |f| normalize(&f.formula) != zcp) {
            let res = match &current {
                Some(f) => refit(f, Some(&zcp), None, Some(&opts)),
                None => fit(&zcp, data.clone(), &config.contrasts, &opts),
            };
            match res {
                Ok(f) => {
                    let mut s = step(Action::FallbackZcp, &f, true, config);
                    s.note = Some(match &current {
                        Some(m) if !m.result.converged => "maximal model did not converge".into(),
                        Some(_) => "maximal model is singular".into(),
                        None => "maximal model could not be fitted".into(),
                    });
                    steps.push(s);
                    current = Some(f);
                }
                Err(e) => {
                    steps.push(error_step(Action::FallbackZcp, &zcp, &e));
                }
            }
        }
    }
    let mut current = match current {
        Some(f) => f,
        None => return Err(maximal_fit.err().unwrap_or(Error::NotPositiveDefinite)),
    };

    let mut stopped_early = false;
    while current.result.singular && steps.len() < config.max_steps {
        let proposal = match drop_components(&current, config) {
            Ok(p) => p,
            Err(_) => break,
        };
        match refit(&current, Some(&proposal.formula), None, Some(&opts)) {
            Ok(f) => {
                let mut s = step(Action::DropComponents, &f, true, config);
                s.changes = proposal.removed.iter().map(|(g, c)| format!("{}: {}", g, c)).collect();
                s.note = Some(if proposal.batch {
                    "estimates below the singularity tolerance".into()
                } else {
                    "rank-deficient covariance".into()
                });
                steps.push(s);
                current = f;
            }
            Err(e) => {
                steps.push(error_step(Action::DropComponents, &proposal.formula, &e));
                stopped_early = true;
                break;
            }
        }
    }

    if !stopped_early {
        let budget = config.max_steps.saturating_sub(steps.len()).max(1);
        let cfg = SelectionConfig {
            max_steps: budget,
            ..config.clone()
        };
        let (f, s) = lrt_backward_elimination(&current, &cfg)?;
        steps.extend(s);
        current = f;
        let (f, s) = extend_correlations(&current, config)?;
        steps.extend(s);
        current = f;
        let (f, s) = prune_correlations(&current, config)?;
        steps.extend(s);
        current = f;
    }

    let mut stop = step(Action::Stop, &current, true, config);
    if current.result.singular {
        stop.note = Some("final model is singular".into());
    } else if !current.result.converged {
        stop.note = Some("final model did not converge".into());
    }
    steps.push(stop);
    let trace = SelectionTrace {
        config: config.clone(),
        final_formula: normalize(&current.formula).to_string(),
        final_singular: current.result.singular,
        final_converged: current.result.converged,
        steps,
        notes,
    };
    Ok(SelectionOutcome {
        trace,
        final_fit: current,
    })
}
