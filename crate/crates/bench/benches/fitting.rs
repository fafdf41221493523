use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion as Bench};
use parsimix_bench::*;
use parsimix_core::fitter::{fit, DevianceEvaluator};
use parsimix_core::{repca, ContrastScheme, Criterion, FitOptions};

fn deviance(c: &mut Bench) {
    let mut group = c.benchmark_group("deviance");
    for (name, spec, formula) in [
        ("small_target", SMALL_SPEC, SMALL_TARGET),
        ("small_maximal", SMALL_SPEC, SMALL_MAXIMAL),
        ("kb_maximal", KB_SPEC, KB_MAXIMAL),
    ] {
        let fx = fixture(spec, formula);
        let ev = DevianceEvaluator::new(&fx.matrices).unwrap();
        let theta = ev.layout().initial();
        group.bench_function(name, |b| b.iter(|| ev.deviance(black_box(&theta), Criterion::Reml).unwrap()));
    }
    group.finish();
}

fn optimization(c: &mut Bench) {
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    for (name, formula) in [("small_target", SMALL_TARGET), ("small_maximal", SMALL_MAXIMAL)] {
        let fx = fixture(SMALL_SPEC, formula);
        group.bench_function(name, |b| {
            b.iter_batched(
                || fx.data.clone(),
                |data| fit(&fx.formula, data, &ContrastScheme::default(), &FitOptions::default()).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn diagnostics(c: &mut Bench) {
    let fx = fixture(SMALL_SPEC, SMALL_MAXIMAL);
    let m = fit(&fx.formula, fx.data.clone(), &ContrastScheme::default(), &FitOptions::default()).unwrap();
    c.bench_function("repca/small_maximal", |b| b.iter(|| repca(black_box(&m), 1e-4).unwrap()));
}

criterion_group!(benches, deviance, optimization, diagnostics);
criterion_main!(benches);
