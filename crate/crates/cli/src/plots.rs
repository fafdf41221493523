//! Tidy CSV files for dot plots of fixed effects, standard deviations,
//! correlations, scree curves and reduction traces.

use std::path::{Path, PathBuf};

use parsimix_core::selection::SelectionTrace;
use parsimix_core::RePcaResult;

use crate::report::FitPayload;

fn writer(dir: &Path, name: &str) -> csv::Result<(csv::Writer<std::fs::File>, PathBuf)> {
    let path = dir.join(name);
    Ok((csv::Writer::from_path(&path)?, path))
}

fn num(x: f64) -> String {
    format!("{}", x)
}

pub fn write_fit(dir: &Path, prefix: &str, fit: &FitPayload) -> csv::Result<Vec<PathBuf>> {
    let (mut w, fixed) = writer(dir, &format!("{}fixed_effects.csv", prefix))?;
    w.write_record(["term", "estimate", "std_error", "ci_lower", "ci_upper"])?;
    for r in &fit.fixed_effects {
        w.write_record([r.term.clone(), num(r.estimate), num(r.std_error), num(r.ci_lower), num(r.ci_upper)])?;
    }
    w.flush()?;

    let (mut w, sds) = writer(dir, &format!("{}random_sds.csv", prefix))?;
    w.write_record(["group", "column", "sd"])?;
    for g in &fit.random_effects {
        for (c, sd) in g.columns.iter().zip(&g.sd) {
            w.write_record([g.group.clone(), c.clone(), num(*sd)])?;
        }
    }
    w.write_record(["Residual".to_string(), String::new(), num(fit.sigma)])?;
    w.flush()?;

    let (mut w, cors) = writer(dir, &format!("{}random_correlations.csv", prefix))?;
    w.write_record(["group", "column_a", "column_b", "correlation"])?;
    for g in &fit.random_effects {
        for c in &g.correlations {
            w.write_record([g.group.clone(), c.a.clone(), c.b.clone(), c.r.map(num).unwrap_or_default()])?;
        }
    }
    w.flush()?;
    Ok(vec![fixed, sds, cors])
}

pub fn write_scree(dir: &Path, res: &RePcaResult) -> csv::Result<PathBuf> {
    let (mut w, path) = writer(dir, "scree.csv")?;
    w.write_record(["group", "component", "singular_value", "proportion", "cumulative"])?;
    for f in &res.factors {
        for i in 0..f.singular_values.len() {
            w.write_record([
                f.group.clone(),
                (i + 1).to_string(),
                num(f.singular_values[i]),
                num(f.proportions[i]),
                num(f.cumulative[i]),
            ])?;
        }
    }
    w.flush()?;
    Ok(path)
}

pub fn write_trace(dir: &Path, trace: &SelectionTrace) -> csv::Result<PathBuf> {
    let (mut w, path) = writer(dir, "trace.csv")?;
    w.write_record(["step", "action", "accepted", "formula", "deviance", "n_params", "chisq", "df", "p_value"])?;
    for (i, s) in trace.steps.iter().enumerate() {
        let (dev, k) = s
            .fit
            .as_ref()
            .map_or((String::new(), String::new()), |f| (num(f.deviance), f.n_params.to_string()));
        let (chisq, df, p) = s.lrt.as_ref().map_or((String::new(), String::new(), String::new()), |l| {
            (num(l.chisq), l.df.to_string(), num(l.p_value))
        });
        w.write_record([
            (i + 1).to_string(),
            s.action.to_string(),
            s.accepted.to_string(),
            s.formula.clone(),
            dev,
            k,
            chisq,
            df,
            p,
        ])?;
    }
    w.flush()?;
    Ok(path)
}
