use std::fmt::Write;

use parsimix_core::selection::{Action, SelectionTrace};
use parsimix_core::{Criterion, RePcaResult};

use crate::report::{FitPayload, Report};

fn criterion_name(c: Criterion) -> &'static str {
    match c {
        Criterion::Ml => "maximum likelihood",
        Criterion::Reml => "REML",
    }
}

fn short(c: Criterion) -> &'static str {
    match c {
        Criterion::Ml => "ML",
        Criterion::Reml => "REML",
    }
}

pub fn fit_text(fit: &FitPayload) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Linear mixed model fit by {}", criterion_name(fit.criterion));
    let _ = writeln!(out, "Formula: {}", fit.formula);
    let _ = writeln!(
        out,
        "{} deviance {:.4}  logLik {:.4}  AIC {:.4}  BIC {:.4}",
        short(fit.criterion),
        fit.deviance,
        fit.loglik,
        fit.aic,
        fit.bic
    );
    let _ = writeln!(
        out,
        "Observations {}  fixed effects {}  covariance parameters {}",
        fit.n_obs, fit.n_fixed, fit.n_theta
    );
    out.push('\n');
    out.push_str("Random effects:\n");
    let name_w = fit
        .random_effects
        .iter()
        .flat_map(|g| g.columns.iter().map(String::len))
        .chain(["Residual".len(), "Name".len()])
        .max()
        .unwrap_or(8);
    let group_w = fit
        .random_effects
        .iter()
        .map(|g| g.group.len())
        .chain(["Residual".len(), "Group".len()])
        .max()
        .unwrap_or(8);
    let _ = writeln!(out, " {:<gw$}  {:<nw$}  {:>9}  Corr", "Group", "Name", "Std.Dev.", gw = group_w, nw = name_w);
    for g in &fit.random_effects {
        for (i, (col, sd)) in g.columns.iter().zip(&g.sd).enumerate() {
            let label = if i == 0 { g.group.as_str() } else { "" };
            let cors: Vec<String> = g
                .correlations
                .iter()
                .filter(|c| c.b == *col)
                .map(|c| c.r.map_or_else(|| "   NA".to_string(), |r| format!("{:>5.2}", r)))
                .collect();
            let line = format!(
                " {:<gw$}  {:<nw$}  {:>9.4}  {}",
                label,
                col,
                sd,
                cors.join(" "),
                gw = group_w,
                nw = name_w
            );
            let _ = writeln!(out, "{}", line.trim_end());
        }
    }
    let _ = writeln!(out, " {:<gw$}  {:<nw$}  {:>9.4}", "Residual", "", fit.sigma, gw = group_w, nw = name_w);
    out.push('\n');
    out.push_str("Fixed effects:\n");
    let term_w = fit
        .fixed_effects
        .iter()
        .map(|r| r.term.len())
        .chain(["Term".len()])
        .max()
        .unwrap_or(4);
    let _ = writeln!(
        out,
        " {:<tw$}  {:>10}  {:>10}  {:>8}  {:>10}  {:>10}",
        "Term",
        "Estimate",
        "Std.Error",
        "t value",
        "2.5%",
        "97.5%",
        tw = term_w
    );
    for r in &fit.fixed_effects {
        let _ = writeln!(
            out,
            " {:<tw$}  {:>10.4}  {:>10.4}  {:>8.2}  {:>10.4}  {:>10.4}",
            r.term,
            r.estimate,
            r.std_error,
            r.t_value,
            r.ci_lower,
            r.ci_upper,
            tw = term_w
        );
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "Converged: {} ({} of {} evaluations)  Singular: {}",
        if fit.converged { "yes" } else { "no" },
        fit.n_evals,
        fit.budget,
        if fit.singular { "yes" } else { "no" }
    );
    out
}

/// Cumulative proportions per grouping factor, one row each.
pub fn repca_table(res: &RePcaResult) -> String {
    let mut out = String::new();
    let width = res.factors.iter().map(|f| f.cumulative.len()).max().unwrap_or(0);
    let name_w = res.factors.iter().map(|f| f.group.len()).max().unwrap_or(0).max(6);
    let _ = writeln!(
        out,
        "Cumulative proportion of random-effects variance (tolerance {:e})",
        res.tol
    );
    let _ = write!(out, "{:<w$}", "", w = name_w);
    for i in 1..=width {
        let _ = write!(out, "  {:>5}", i);
    }
    out.push_str("    dim\n");
    for f in &res.factors {
        let _ = write!(out, "{:<w$}", f.group, w = name_w);
        for i in 0..width {
            match f.cumulative.get(i) {
                Some(c) => {
                    let _ = write!(out, "  {:>5.2}", c);
                }
                None => out.push_str("       "),
            }
        }
        let _ = writeln!(out, "  {:>2}/{}", f.dim, f.cumulative.len());
    }
    out
}

pub fn lrt_line(chisq: f64, df: usize, p: f64) -> String {
    let p = if p < 0.001 {
        "p < .001".to_string()
    } else {
        format!("p = {:.3}", p)
    };
    format!("chi2({}) = {:.2}, {}", df, chisq, p)
}

pub fn trace_narrative(trace: &SelectionTrace) -> String {
    let mut out = String::new();
    let mut n = 0;
    for s in &trace.steps {
        n += 1;
        let verdict = match (s.action, s.accepted) {
            (Action::Stop, _) => "",
            (_, true) => " [accepted]",
            (_, false) => " [rejected]",
        };
        let _ = writeln!(out, "{:>2}. {}{}", n, s.action, verdict);
        let _ = writeln!(out, "    {}", s.formula);
        if let Some(f) = &s.fit {
            let _ = writeln!(
                out,
                "    {} deviance {:.2}, {} parameters, converged {}, singular {}",
                short(f.criterion),
                f.deviance,
                f.n_params,
                if f.converged { "yes" } else { "no" },
                if f.singular { "yes" } else { "no" }
            );
        }
        if !s.repca_dims.is_empty() {
            let dims: Vec<String> = s.repca_dims.iter().map(|(g, d)| format!("{} {}", g, d)).collect();
            let _ = writeln!(out, "    rePCA dimensions: {}", dims.join(", "));
        }
        if !s.changes.is_empty() {
            let _ = writeln!(out, "    changes: {}", s.changes.join("; "));
        }
        if let Some(l) = &s.lrt {
            let _ = writeln!(out, "    {}", lrt_line(l.chisq, l.df, l.p_value));
        }
        if let Some(note) = &s.note {
            let _ = writeln!(out, "    note: {}", note);
        }
    }
    let _ = writeln!(out, "\nFinal model: {}", trace.final_formula);
    if trace.final_singular {
        out.push_str("warning: the final model is singular\n");
    }
    if !trace.final_converged {
        out.push_str("warning: the final model did not converge\n");
    }
    for note in &trace.notes {
        let _ = writeln!(out, "note: {}", note);
    }
    out
}

pub fn warnings(report: &Report) -> String {
    report.warnings.iter().map(|w| format!("warning: {}\n", w)).collect()
}
