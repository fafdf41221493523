//! Data generation from fully specified mixed models, and a closed-form
//! oracle for the balanced one-way layout.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::{build_model_matrices, Column, ColumnData, ContrastScheme, Dataset};
use crate::error::{Error, Result};
use crate::formula::parse_formula;
use crate::linalg::pivoted_cholesky;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub levels: Vec<String>,
    /// Grouping factor this experimental factor varies between; `None`
    /// means it varies within every grouping factor.
    #[serde(default)]
    pub between: Option<String>,
}

/// Crossed layout: every combination of grouping levels, times `replicates`.
/// Within-unit conditions rotate Latin-square style so that each grouping
/// level sees every condition cell equally often when sizes divide evenly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub groups: Vec<GroupSpec>,
    #[serde(default)]
    pub factors: Vec<FactorSpec>,
    #[serde(default = "one")]
    pub replicates: usize,
}

fn one() -> usize {
    1
}

/// Seed used when neither the spec nor the caller supplies one.
pub const DEFAULT_SEED: u64 = 42;

fn default_seed() -> u64 {
    DEFAULT_SEED
}

fn default_response() -> String {
    "Y".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomTruth {
    pub group: String,
    /// Inner expression of the random term, e.g. `"1 + P"`.
    pub terms: String,
    /// Covariance of the term's columns in response units²; may be singular.
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub design: DesignSpec,
    #[serde(default = "default_response")]
    pub response: String,
    /// Right-hand side of the fixed part, e.g. `"1 + S*P*C"`.
    pub fixed: String,
    pub beta: Vec<f64>,
    #[serde(default)]
    pub random: Vec<RandomTruth>,
    pub sigma: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub contrasts: ContrastScheme,
}

/// Design columns (grouping factors and experimental factors), no response.
pub fn design_dataset(design: &DesignSpec) -> Result<Dataset> {
    if design.groups.is_empty() {
        return Err(Error::Config("design needs at least one grouping factor".into()));
    }
    if design.replicates == 0 || design.groups.iter().any(|g| g.levels == 0) {
        return Err(Error::Config("empty design".into()));
    }
    for f in &design.factors {
        if f.levels.len() < 2 {
            return Err(Error::SingleLevel(f.name.clone()));
        }
        if let Some(b) = &f.between {
            if !design.groups.iter().any(|g| &g.name == b) {
                return Err(Error::UnknownColumn(b.clone()));
            }
        }
    }
    let within: Vec<&FactorSpec> = design.factors.iter().filter(|f| f.between.is_none()).collect();
    let n_cells: usize = within.iter().map(|f| f.levels.len()).product();

    let mut group_cols: Vec<Vec<String>> = vec![Vec::new(); design.groups.len()];
    let mut factor_cols: Vec<Vec<String>> = vec![Vec::new(); design.factors.len()];

    let total: usize = design.groups.iter().map(|g| g.levels).product::<usize>() * design.replicates;
    let mut idx = vec![0usize; design.groups.len()];
    for row in 0..total {
        let rep = row % design.replicates;
        let mut rest = row / design.replicates;
        for g in (0..design.groups.len()).rev() {
            idx[g] = rest % design.groups[g].levels;
            rest /= design.groups[g].levels;
        }
        for (g, spec) in design.groups.iter().enumerate() {
            let width = spec.levels.to_string().len();
            group_cols[g].push(format!("{}{:0w$}", spec.name, idx[g] + 1, w = width));
        }
        let mut cell = (idx.iter().sum::<usize>() + rep) % n_cells.max(1);
        let mut within_levels = vec![0usize; within.len()];
        for k in (0..within.len()).rev() {
            within_levels[k] = cell % within[k].levels.len();
            cell /= within[k].levels.len();
        }
        let mut wk = 0;
        for (fi, f) in design.factors.iter().enumerate() {
            let level = match &f.between {
                Some(b) => {
                    let g = design.groups.iter().position(|g| &g.name == b).expect("checked");
                    idx[g] % f.levels.len()
                }
                None => {
                    wk += 1;
                    within_levels[wk - 1]
                }
            };
            factor_cols[fi].push(f.levels[level].clone());
        }
    }

    let mut columns = Vec::new();
    for (g, vals) in design.groups.iter().zip(&group_cols) {
        columns.push(Column::factor(g.name.clone(), vals));
    }
    for (f, vals) in design.factors.iter().zip(&factor_cols) {
        let mut col = Column::factor(f.name.clone(), vals);
        // Keep the declared level order.
        if let ColumnData::Factor { levels, codes } = &mut col.data {
            let map: Vec<usize> = levels
                .iter()
                .map(|l| f.levels.iter().position(|x| x == l).expect("declared level"))
                .collect();
            for c in codes.iter_mut() {
                *c = map[*c];
            }
            *levels = f.levels.clone();
        }
        columns.push(col);
    }
    Dataset::new(columns)
}

/// Draws `y = Xβ + Σ Z_f b_f + e` for the design in `spec`.
pub fn simulate_lmm(spec: &TruthSpec) -> Result<Dataset> {
    if !(spec.sigma >= 0.0) {
        return Err(Error::Config("sigma must be nonnegative".into()));
    }
    let base = design_dataset(&spec.design)?;
    let n = base.n_rows();
    let base = base.with_numeric(&spec.response, vec![0.0; n])?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);

    let fixed = parse_formula(&format!("{} ~ {}", spec.response, spec.fixed))?;
    let mm = build_model_matrices(&fixed, &base, &spec.contrasts)?;
    if spec.beta.len() != mm.p() {
        return Err(Error::Dimension(format!(
            "beta has {} entries, fixed part has {} columns ({})",
            spec.beta.len(),
            mm.p(),
            mm.x_labels.join(", ")
        )));
    }
    let mut y: DVector<f64> = &mm.x * DVector::from_column_slice(&spec.beta);

    for truth in &spec.random {
        let f = parse_formula(&format!("{} ~ 1 + ({} | {})", spec.response, truth.terms, truth.group))?;
        let rm = build_model_matrices(&f, &base, &spec.contrasts)?;
        let blk = &rm.blocks[0];
        let d = blk.d;
        if truth.cov.len() != d || truth.cov.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension(format!(
                "covariance for ({} | {}) must be {}×{} ({})",
                truth.terms,
                truth.group,
                d,
                d,
                blk.labels.join(", ")
            )));
        }
        let cov = DMatrix::from_fn(d, d, |i, j| truth.cov[i][j]);
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * (1.0 + cov[(i, j)].abs()) {
                    return Err(Error::NotPsd("asymmetric truth covariance".into()));
                }
            }
        }
        let (factor, _rank) = pivoted_cholesky(&cov).map_err(Error::NotPsd)?;
        let codes = &rm.factors[blk.factor].codes;
        let effects: Vec<DVector<f64>> = (0..blk.k)
            .map(|_| {
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                &factor * z
            })
            .collect();
        for i in 0..n {
            let b = &effects[codes[i]];
            for c in 0..d {
                y[i] += blk.values[(i, c)] * b[c];
            }
        }
    }
    for v in y.iter_mut() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += spec.sigma * e;
    }
    base.with_numeric(&spec.response, y.iter().copied().collect())
}

/// REML estimates and deviance of the balanced one-way random-intercept model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneWayOracle {
    pub groups: usize,
    pub per_group: usize,
    pub msb: f64,
    pub msw: f64,
    pub sigma_b2: f64,
    pub sigma2: f64,
    pub reml_deviance: f64,
}

pub fn closed_form_one_way(data: &Dataset, response: &str, group: &str) -> Result<OneWayOracle> {
    let y = match &data.column(response)?.data {
        ColumnData::Numeric(v) => v,
        _ => return Err(Error::Data(format!("`{}` is not numeric", response))),
    };
    let (levels, codes) = match &data.column(group)?.data {
        ColumnData::Factor { levels, codes } => (levels, codes),
        _ => return Err(Error::NonFactorGroup(group.to_string())),
    };
    let k = levels.len();
    if k < 2 {
        return Err(Error::Unbalanced("need at least two groups".into()));
    }
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0; k];
    for (&c, &v) in codes.iter().zip(y) {
        counts[c] += 1;
        sums[c] += v;
    }
    let per = counts[0];
    if counts.iter().any(|&c| c != per) {
        return Err(Error::Unbalanced(format!("group sizes {:?}", counts)));
    }
    if per < 2 {
        return Err(Error::Unbalanced("need at least two observations per group".into()));
    }
    let n_total = (k * per) as f64;
    let means: Vec<f64> = sums.iter().map(|s| s / per as f64).collect();
    let grand = sums.iter().sum::<f64>() / n_total;
    let ssb: f64 = means.iter().map(|m| per as f64 * (m - grand).powi(2)).sum();
    let ssw: f64 = codes.iter().zip(y).map(|(&c, &v)| (v - means[c]).powi(2)).sum();
    let msb = ssb / (k - 1) as f64;
    let msw = ssw / (k * (per - 1)) as f64;

    let (sigma2, sigma_b2) = if msb > msw {
        (msw, (msb - msw) / per as f64)
    } else {
        ((ssb + ssw) / (n_total - 1.0), 0.0)
    };
    // −2 × REML log-likelihood via the eigenstructure of V = σ²I + σ_b²J per group.
    let tau = sigma2 + per as f64 * sigma_b2;
    let kf = k as f64;
    let nw = kf * (per as f64 - 1.0);
    let reml_deviance = (n_total - 1.0) * (2.0 * std::f64::consts::PI).ln()
        + nw * sigma2.ln()
        + kf * tau.ln()
        + (n_total / tau).ln()
        + ssw / sigma2
        + ssb / tau;
    Ok(OneWayOracle {
        groups: k,
        per_group: per,
        msb,
        msw,
        sigma_b2,
        sigma2,
        reml_deviance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oneway_data(y: &[f64], per: usize) -> Dataset {
        let g: Vec<String> = (0..y.len()).map(|i| format!("g{}", i / per)).collect();
        Dataset::new(vec![Column::numeric("Y", y.to_vec()), Column::factor("G", &g)]).unwrap()
    }

    #[test]
    fn hand_anova() {
        let ds = oneway_data(&[0.5, 1.5, 1.5, 2.5, 2.5, 3.5], 2);
        let o = closed_form_one_way(&ds, "Y", "G").unwrap();
        assert!((o.msb - 2.0).abs() < 1e-12);
        assert!((o.msw - 0.5).abs() < 1e-12);
        assert!((o.sigma_b2 - 0.75).abs() < 1e-12);
        assert!((o.sigma2 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn truncation_and_errors() {
        let ds = oneway_data(&[1.0, 3.0, 3.0, 1.0, 2.0, 2.0], 2);
        let o = closed_form_one_way(&ds, "Y", "G").unwrap();
        assert_eq!(o.sigma_b2, 0.0);
        let single = oneway_data(&[1.0, 2.0, 3.0], 3);
        assert!(closed_form_one_way(&single, "Y", "G").is_err());
        let unbalanced = Dataset::new(vec![
            Column::numeric("Y", vec![1.0, 2.0, 3.0]),
            Column::factor("G", &["a", "a", "b"]),
        ])
        .unwrap();
        assert!(matches!(closed_form_one_way(&unbalanced, "Y", "G"), Err(Error::Unbalanced(_))));
    }

    fn kb_design(subjects: usize, items: usize) -> DesignSpec {
        DesignSpec {
            groups: vec![
                GroupSpec {
                    name: "Subject".into(),
                    levels: subjects,
                },
                GroupSpec {
                    name: "Item".into(),
                    levels: items,
                },
            ],
            factors: ["S", "P", "C"]
                .iter()
                .map(|n| FactorSpec {
                    name: n.to_string(),
                    levels: vec![format!("{}1", n.to_lowercase()), format!("{}2", n.to_lowercase())],
                    between: None,
                })
                .collect(),
            replicates: 1,
        }
    }

    #[test]
    fn latin_square_is_balanced() {
        let ds = design_dataset(&kb_design(16, 8)).unwrap();
        assert_eq!(ds.n_rows(), 128);
        let codes = |name: &str| match &ds.column(name).unwrap().data {
            ColumnData::Factor { codes, .. } => codes.clone(),
            _ => unreachable!(),
        };
        let subj = codes("Subject");
        let s = codes("S");
        let p = codes("P");
        let c = codes("C");
        for subject in 0..16 {
            let mut cells = [0usize; 8];
            for i in 0..128 {
                if subj[i] == subject {
                    cells[s[i] * 4 + p[i] * 2 + c[i]] += 1;
                }
            }
            assert!(cells.iter().all(|&n| n == 1), "{:?}", cells);
        }
    }

    #[test]
    fn between_factor_is_constant_within_group() {
        let mut d = kb_design(6, 4);
        d.factors.push(FactorSpec {
            name: "G".into(),
            levels: vec!["g1".into(), "g2".into()],
            between: Some("Subject".into()),
        });
        let ds = design_dataset(&d).unwrap();
        let (subj, g) = match (&ds.column("Subject").unwrap().data, &ds.column("G").unwrap().data) {
            (ColumnData::Factor { codes: a, .. }, ColumnData::Factor { codes: b, .. }) => (a.clone(), b.clone()),
            _ => unreachable!(),
        };
        for i in 0..ds.n_rows() {
            assert_eq!(g[i], subj[i] % 2);
        }
    }

    fn spec(seed: u64) -> TruthSpec {
        TruthSpec {
            design: kb_design(8, 8),
            response: "Y".into(),
            fixed: "1 + P".into(),
            beta: vec![2.0, 0.5],
            random: vec![RandomTruth {
                group: "Item".into(),
                terms: "1 + P".into(),
                cov: vec![vec![1.0, -0.5], vec![-0.5, 1.0]],
            }],
            sigma: 1.0,
            seed,
            contrasts: ContrastScheme::default(),
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        assert_eq!(simulate_lmm(&spec(42)).unwrap(), simulate_lmm(&spec(42)).unwrap());
        assert_ne!(simulate_lmm(&spec(42)).unwrap(), simulate_lmm(&spec(43)).unwrap());
    }

    #[test]
    fn zero_variances_give_a_linear_model() {
        let mut s = spec(7);
        s.random[0].cov = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        s.sigma = 0.0;
        let ds = simulate_lmm(&s).unwrap();
        let y = match &ds.column("Y").unwrap().data {
            ColumnData::Numeric(v) => v.clone(),
            _ => unreachable!(),
        };
        let p = match &ds.column("P").unwrap().data {
            ColumnData::Factor { codes, .. } => codes.clone(),
            _ => unreachable!(),
        };
        for (v, c) in y.iter().zip(p) {
            let want = 2.0 + if c == 0 { 0.5 } else { -0.5 };
            assert_eq!(*v, want);
        }
    }

    #[test]
    fn spec_errors() {
        let mut s = spec(1);
        s.beta = vec![1.0];
        assert!(simulate_lmm(&s).is_err());
        let mut s = spec(1);
        s.random[0].cov = vec![vec![1.0, 0.0], vec![0.0, -1.0]];
        assert!(matches!(simulate_lmm(&s), Err(Error::NotPsd(_))));
        let mut s = spec(1);
        s.random[0].cov = vec![vec![1.0]];
        assert!(simulate_lmm(&s).is_err());
    }

    #[test]
    fn effect_covariance_recovered_over_many_levels() {
        // 10,000 subjects, one observation each: recover b via the design.
        let s = TruthSpec {
            design: DesignSpec {
                groups: vec![GroupSpec {
                    name: "Subject".into(),
                    levels: 10_000,
                }],
                factors: vec![FactorSpec {
                    name: "A".into(),
                    levels: vec!["a1".into(), "a2".into()],
                    between: None,
                }],
                replicates: 2,
            },
            response: "Y".into(),
            fixed: "1".into(),
            beta: vec![0.0],
            random: vec![RandomTruth {
                group: "Subject".into(),
                terms: "1 + A".into(),
                cov: vec![vec![2.0, 0.6], vec![0.6, 0.5]],
            }],
            sigma: 0.0,
            seed: 99,
            contrasts: ContrastScheme::default(),
        };
        let ds = simulate_lmm(&s).unwrap();
        let y = match &ds.column("Y").unwrap().data {
            ColumnData::Numeric(v) => v.clone(),
            _ => unreachable!(),
        };
        let a = match &ds.column("A").unwrap().data {
            ColumnData::Factor { codes, .. } => codes.clone(),
            _ => unreachable!(),
        };
        // Each subject has one row per level: y = b0 ± b1.
        let mut sxx = [[0.0; 2]; 2];
        for sidx in 0..10_000 {
            let (r0, r1) = (2 * sidx, 2 * sidx + 1);
            let (ya, yb) = if a[r0] == 0 { (y[r0], y[r1]) } else { (y[r1], y[r0]) };
            let b = [(ya + yb) / 2.0, (ya - yb) / 2.0];
            for i in 0..2 {
                for j in 0..2 {
                    sxx[i][j] += b[i] * b[j] / 10_000.0;
                }
            }
        }
        let truth = [[2.0, 0.6], [0.6, 0.5]];
        for i in 0..2 {
            for j in 0..2 {
                let rel = (sxx[i][j] - truth[i][j]).abs() / truth[i][j].abs();
                assert!(rel < 0.05, "entry ({}, {}): {} vs {}", i, j, sxx[i][j], truth[i][j]);
            }
        }
    }
}
