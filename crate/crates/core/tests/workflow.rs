mod common;

use std::sync::Arc;

use common::*;
use parsimix_core::formula::{Component, FormulaAst};
use parsimix_core::inference::formula_nested;
use parsimix_core::selection::*;
use parsimix_core::*;

const MAXIMAL: &str = "Y ~ 1 + A*B + (1 + A*B | Subject) + (1 + A*B | Item)";

fn design_truth(seed: u64, random: Vec<(&str, &str, Vec<Vec<f64>>)>) -> Arc<Dataset> {
    let spec = truth(
        vec![group("Subject", 24), group("Item", 16)],
        vec![factor("A", &["a1", "a2"]), factor("B", &["b1", "b2"])],
        1,
        "1 + A*B",
        vec![3.0, 0.3, -0.2, 0.1],
        random,
        1.0,
        seed,
    );
    Arc::new(simulate_lmm(&spec).unwrap())
}

fn intercepts_only(seed: u64) -> Arc<Dataset> {
    design_truth(
        seed,
        vec![("Subject", "1", vec![vec![0.5]]), ("Item", "1", vec![vec![0.3]])],
    )
}

fn reduce(data: Arc<Dataset>) -> SelectionOutcome {
    run_workflow(&parse_formula(MAXIMAL).unwrap(), data, &SelectionConfig::default()).unwrap()
}

/// Every effect keeps the intercept and all of its lower-order margins.
fn marginal(ast: &FormulaAst) -> bool {
    ast.groups().iter().all(|g| {
        let comps = ast.components_of(g);
        comps.iter().all(|c| match c {
            Component::Intercept => true,
            Component::Effect(t) => {
                let fs = t.factors();
                comps.contains(&Component::Intercept)
                    && (1..(1usize << fs.len()) - 1).all(|mask| {
                        let sub: Vec<&String> = fs.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, f)| f).collect();
                        comps.contains(&Component::Effect(Term::new(sub)))
                    })
            }
        })
    })
}

fn check_trace(trace: &SelectionTrace, alpha: f64) {
    let formulas: Vec<FormulaAst> = trace
        .accepted_formulas()
        .iter()
        .map(|t| parse_formula(t).unwrap())
        .collect();
    assert!(!formulas.is_empty());
    for w in formulas.windows(2) {
        assert!(
            formula_nested(&w[0], &w[1]) || formula_nested(&w[1], &w[0]),
            "{} / {}",
            w[0],
            w[1]
        );
    }
    for f in &formulas {
        assert!(marginal(f), "marginality broken in {}", f);
    }
    for s in &trace.steps {
        match (s.action, &s.lrt) {
            (Action::LrtDrop, Some(l)) if s.accepted => assert!(l.p_value > alpha),
            (Action::LrtDrop, Some(l)) => assert!(l.p_value <= alpha),
            (Action::AddCorrelations, Some(l)) if s.accepted => assert!(l.p_value < alpha),
            (Action::PruneCorrelations, Some(l)) if s.accepted => assert!(l.p_value > alpha),
            _ => {}
        }
    }
    let last = trace.steps.last().unwrap();
    assert_eq!(last.action, Action::Stop);
    assert_eq!(last.formula, trace.final_formula);
    if trace.final_singular {
        assert!(last.note.is_some());
    }
}

#[test]
fn intercepts_only_truth_reduces_to_intercepts() {
    let out = reduce(intercepts_only(1));
    check_trace(&out.trace, 0.05);
    let want = parse_formula("Y ~ 1 + A*B + (1 | Subject) + (1 | Item)").unwrap();
    assert_eq!(RandomStructure::of(&out.final_fit.formula), RandomStructure::of(&want), "{}", out.trace.final_formula);
    assert_eq!(out.trace.steps[0].action, Action::StartMaximal);
}

#[test]
fn strong_item_slope_survives() {
    let data = design_truth(
        2,
        vec![
            ("Subject", "1", vec![vec![0.5]]),
            ("Item", "1 + A", vec![vec![0.4, 0.0], vec![0.0, 0.6]]),
        ],
    );
    let out = reduce(data);
    check_trace(&out.trace, 0.05);
    let item = out.final_fit.formula.components_of("Item");
    assert!(item.contains(&Component::Effect(Term::main("A"))), "{}", out.trace.final_formula);
}

#[test]
fn workflow_is_deterministic() {
    let a = reduce(intercepts_only(3));
    let b = reduce(intercepts_only(3));
    assert_eq!(a.trace, b.trace);
}

#[test]
fn thread_count_does_not_change_the_trace() {
    let data = intercepts_only(4);
    let maximal = parse_formula(MAXIMAL).unwrap();
    let one = SelectionConfig {
        threads: Some(1),
        ..SelectionConfig::default()
    };
    let four = SelectionConfig {
        threads: Some(4),
        ..SelectionConfig::default()
    };
    let a = run_workflow(&maximal, data.clone(), &one).unwrap();
    let b = run_workflow(&maximal, data, &four).unwrap();
    assert_eq!(a.trace.steps, b.trace.steps);
}

#[test]
fn reliable_fit_has_nothing_to_drop() {
    let data = intercepts_only(5);
    let f = fit_text("Y ~ 1 + A*B + (1 | Subject) + (1 | Item)", &data, Criterion::Reml);
    assert!(!f.result.singular);
    assert!(matches!(
        drop_components(&f, &SelectionConfig::default()),
        Err(Error::NothingRemovable(_))
    ));
}

#[test]
fn zero_components_go_in_one_batch() {
    let data = intercepts_only(6);
    let f = fit_text("Y ~ 1 + A*B + (1 + A*B || Subject) + (1 + A*B || Item)", &data, Criterion::Reml);
    let p = drop_components(&f, &SelectionConfig::default()).unwrap();
    let orders: Vec<usize> = p.removed.iter().map(|(_, c)| c.order()).collect();
    assert!(!p.removed.is_empty());
    if !p.batch {
        assert_eq!(p.removed.len(), 1);
    }
    for (g, c) in &p.removed {
        if let Component::Effect(t) = c {
            for kept in p.formula.components_of(g) {
                if let Component::Effect(k) = kept {
                    assert!(!t.is_contained_in(&k), "{} kept while {} dropped", k, t);
                }
            }
        }
    }
    assert!(orders.iter().all(|&o| o <= 2));
}

#[test]
fn pruning_without_correlations_is_a_no_op() {
    let data = intercepts_only(7);
    let f = fit_text("Y ~ 1 + A*B + (1 | Subject) + (1 | Item)", &data, Criterion::Reml);
    let (kept, step) = prune_correlations(&f, &SelectionConfig::default()).unwrap();
    assert!(step.is_none());
    assert_eq!(kept.formula, f.formula);
    let (ext, steps) = extend_correlations(&f, &SelectionConfig::default()).unwrap();
    assert!(steps.is_empty());
    assert_eq!(ext.formula, f.formula);
}

#[test]
fn between_factor_stays_out_of_its_group() {
    let mut b = factor("G", &["g1", "g2"]);
    b.between = Some("Subject".into());
    let spec = truth(
        vec![group("Subject", 8), group("Item", 4)],
        vec![factor("A", &["a1", "a2"]), b],
        1,
        "1 + A*G",
        vec![0.0; 4],
        vec![],
        1.0,
        0,
    );
    let data = simulate_lmm(&spec).unwrap();
    let fixed = parse_formula("Y ~ 1 + A*G").unwrap();
    let groups: Vec<GroupWithin> = ["Subject", "Item"]
        .iter()
        .map(|g| GroupWithin {
            group: g.to_string(),
            within: infer_within(&data, g, &["A".to_string(), "G".to_string()]).unwrap(),
        })
        .collect();
    assert_eq!(groups[0].within, vec!["A".to_string()]);
    let m = maximal_formula(&fixed, &groups, &data).unwrap();
    assert_eq!(m.components_of("Subject").len(), 2);
    assert_eq!(m.components_of("Item").len(), 4);
}

#[test]
fn invalid_alpha_is_rejected() {
    let cfg = SelectionConfig {
        alpha: 1.5,
        ..SelectionConfig::default()
    };
    assert!(matches!(
        run_workflow(&parse_formula(MAXIMAL).unwrap(), intercepts_only(8), &cfg),
        Err(Error::Config(_))
    ));
}
