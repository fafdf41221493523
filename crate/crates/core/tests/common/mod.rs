#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use parsimix_core::covparam::{count_params, lambda_to_cov, lambda_to_theta, theta_to_lambda};
use parsimix_core::fitter::{fit, Fit};
use parsimix_core::formula::format_formula;
use parsimix_core::simulate::{DesignSpec, FactorSpec, GroupSpec, RandomTruth};
use parsimix_core::{parse_formula, simulate_lmm, ContrastScheme, Criterion, Dataset, FitOptions, FormulaAst, RandomTerm, Term, TruthSpec};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

pub fn group(name: &str, levels: usize) -> GroupSpec {
    GroupSpec {
        name: name.into(),
        levels,
    }
}

pub fn factor(name: &str, levels: &[&str]) -> FactorSpec {
    FactorSpec {
        name: name.into(),
        levels: levels.iter().map(|s| s.to_string()).collect(),
        between: None,
    }
}

pub fn truth(
    groups: Vec<GroupSpec>,
    factors: Vec<FactorSpec>,
    replicates: usize,
    fixed: &str,
    beta: Vec<f64>,
    random: Vec<(&str, &str, Vec<Vec<f64>>)>,
    sigma: f64,
    seed: u64,
) -> TruthSpec {
    TruthSpec {
        design: DesignSpec {
            groups,
            factors,
            replicates,
        },
        response: "Y".into(),
        fixed: fixed.into(),
        beta,
        random: random
            .into_iter()
            .map(|(g, t, cov)| RandomTruth {
                group: g.into(),
                terms: t.into(),
                cov,
            })
            .collect(),
        sigma,
        seed,
        contrasts: ContrastScheme::default(),
    }
}

/// Ten groups of eight with a two-level within factor and a correlated
/// intercept/slope truth.
pub fn slope_truth(seed: u64, sd0: f64, sd1: f64, r: f64) -> TruthSpec {
    let c = r * sd0 * sd1;
    truth(
        vec![group("g", 10)],
        vec![factor("A", &["a1", "a2"])],
        4,
        "1 + A",
        vec![1.0, 0.5],
        vec![("g", "1 + A", vec![vec![sd0 * sd0, c], vec![c, sd1 * sd1]])],
        1.0,
        seed,
    )
}

pub fn fit_text(text: &str, data: &Arc<Dataset>, criterion: Criterion) -> Fit {
    fit(
        &parse_formula(text).unwrap(),
        data.clone(),
        &ContrastScheme::default(),
        &FitOptions::with_criterion(criterion),
    )
    .unwrap()
}

pub fn scale_response(data: &Dataset, c: f64) -> Dataset {
    let y = match &data.column("Y").unwrap().data {
        parsimix_core::design::ColumnData::Numeric(v) => v.iter().map(|x| x * c).collect(),
        _ => unreachable!(),
    };
    data.with_numeric("Y", y).unwrap()
}

fn arb_theta() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..7).prop_flat_map(|d| {
        (
            Just(d),
            prop::collection::vec(-3.0f64..3.0, count_params(d)).prop_map(move |mut v| {
                let mut k = 0;
                for j in 0..d {
                    v[k] = v[k].abs();
                    k += d - j;
                }
                v
            }),
        )
    })
}

fn arb_slope_truth() -> impl Strategy<Value = TruthSpec> {
    (any::<u64>(), 0.5f64..1.5, 0.3f64..1.0, -0.6f64..0.6)
        .prop_map(|(seed, sd0, sd1, r)| slope_truth(seed, sd0, sd1, r))
}

fn arb_name() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["A", "B", "C", "load", "x.1", "Cond_2"]).prop_map(String::from)
}

fn arb_terms() -> impl Strategy<Value = Vec<Term>> {
    prop::collection::vec(prop::collection::btree_set(arb_name(), 1..4).prop_map(Term::new), 0..5).prop_map(|v| {
        let mut out: Vec<Term> = Vec::new();
        for t in v {
            if !out.contains(&t) {
                out.push(t);
            }
        }
        out
    })
}

fn arb_formula() -> impl Strategy<Value = FormulaAst> {
    let random = (
        any::<bool>(),
        arb_terms(),
        prop::sample::select(vec!["Subject", "Item", "g"]),
        any::<bool>(),
    )
        .prop_map(|(intercept, terms, group, correlated)| RandomTerm {
            intercept: intercept || terms.is_empty(),
            terms,
            group: group.to_string(),
            correlated,
        });
    (any::<bool>(), arb_terms(), prop::collection::vec(random, 0..4)).prop_map(|(intercept, fixed, random)| {
        let mut seen = BTreeSet::new();
        let random = random
            .into_iter()
            .filter(|r| seen.insert((r.group.clone(), r.intercept, r.terms.iter().cloned().collect::<BTreeSet<_>>())))
            .collect();
        FormulaAst {
            response: "Y".into(),
            intercept,
            fixed,
            random,
        }
    })
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

pub fn theta_lambda_round_trip(cases: u32) -> Result<(), String> {
    run(cases, arb_theta(), |(d, theta)| {
        let l = theta_to_lambda(&theta, d).unwrap();
        for i in 0..d {
            for j in i + 1..d {
                prop_assert_eq!(l[(i, j)], 0.0);
            }
        }
        prop_assert_eq!(lambda_to_theta(&l), theta);
        Ok(())
    })
}

pub fn covariance_psd(cases: u32) -> Result<(), String> {
    run(cases, (arb_theta(), 0.01f64..10.0), |((d, theta), sigma)| {
        let l = theta_to_lambda(&theta, d).unwrap();
        let cov = lambda_to_cov(&l, sigma);
        prop_assert_eq!(cov.clone(), cov.transpose());
        let scale = cov.trace().max(1e-300);
        for e in cov.symmetric_eigenvalues().iter() {
            prop_assert!(*e >= -1e-10 * scale, "eigenvalue {}", e);
        }
        Ok(())
    })
}

pub fn response_scale_equivariance(cases: u32) -> Result<(), String> {
    run(cases, (arb_slope_truth(), 0.05f64..20.0), |(spec, c)| {
        let data = Arc::new(simulate_lmm(&spec).unwrap());
        let scaled = Arc::new(scale_response(&data, c));
        let a = fit_text("Y ~ 1 + A + (1 + A | g)", &data, Criterion::Reml);
        let b = fit_text("Y ~ 1 + A + (1 + A | g)", &scaled, Criterion::Reml);
        prop_assume!(a.result.converged && b.result.converged);
        for (x, y) in a.result.theta.iter().zip(&b.result.theta) {
            prop_assert!((x - y).abs() <= 1e-4, "theta {:?} vs {:?} at c = {}", a.result.theta, b.result.theta, c);
        }
        prop_assert!((b.result.sigma / (c * a.result.sigma) - 1.0).abs() <= 1e-4);
        Ok(())
    })
}

pub fn interior_stationarity(cases: u32) -> Result<(), String> {
    run(cases, arb_slope_truth(), |spec| {
        let data = Arc::new(simulate_lmm(&spec).unwrap());
        let f = fit_text("Y ~ 1 + A + (1 + A | g)", &data, Criterion::Reml);
        let theta = f.result.theta.clone();
        let diag = [theta[0], theta[2]];
        prop_assume!(f.result.converged && diag.iter().all(|&t| t > 1e-2));
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[i] += h;
            down[i] -= h;
            let g = (f.evaluator.deviance(&up, Criterion::Reml).unwrap()
                - f.evaluator.deviance(&down, Criterion::Reml).unwrap())
                / (2.0 * h);
            prop_assert!(g.abs() < 1e-3, "gradient {} at {:?}", g, theta);
        }
        Ok(())
    })
}

pub fn nesting_monotonicity(cases: u32) -> Result<(), String> {
    run(cases, arb_slope_truth(), |spec| {
        let data = Arc::new(simulate_lmm(&spec).unwrap());
        let chain = [
            "Y ~ 1 + (1 | g)",
            "Y ~ 1 + A + (1 | g)",
            "Y ~ 1 + A + (1 + A || g)",
            "Y ~ 1 + A + (1 + A | g)",
        ];
        let devs: Vec<f64> = chain.iter().map(|t| fit_text(t, &data, Criterion::Ml).result.deviance).collect();
        for w in devs.windows(2) {
            prop_assert!(w[0] >= w[1] - 1e-3, "deviances {:?}", devs);
        }
        Ok(())
    })
}

pub fn formula_round_trip(cases: u32) -> Result<(), String> {
    run(cases, arb_formula(), |ast| {
        let text = format_formula(&ast);
        let back = parse_formula(&text).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(format_formula(&back), text);
        prop_assert_eq!(back, ast);
        Ok(())
    })
}

pub type Suite = (&'static str, fn(u32) -> Result<(), String>);

pub const PROPERTY_SUITES: [Suite; 6] = [
    ("theta-lambda round trip", theta_lambda_round_trip),
    ("covariance PSD", covariance_psd),
    ("response-scale equivariance", response_scale_equivariance),
    ("interior stationarity", interior_stationarity),
    ("deviance nesting monotonicity", nesting_monotonicity),
    ("formula round trip", formula_round_trip),
];
