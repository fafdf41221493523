//! Tabular data and model-matrix construction.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::formula::{Component, FormulaAst, Term};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Factor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    /// Level labels in their stable order plus one level index per row.
    Factor { levels: Vec<String>, codes: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
}

impl Column {
    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        Column {
            name: name.into(),
            data: ColumnData::Numeric(values),
        }
    }

    /// Factor column with levels ordered by first appearance.
    pub fn factor<S: AsRef<str>>(name: impl Into<String>, values: &[S]) -> Self {
        let mut levels: Vec<String> = Vec::new();
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let mut codes = Vec::with_capacity(values.len());
        for v in values {
            let v = v.as_ref();
            let code = *index.entry(v).or_insert_with(|| {
                levels.push(v.to_string());
                levels.len() - 1
            });
            codes.push(code);
        }
        Column {
            name: name.into(),
            data: ColumnData::Factor { levels, codes },
        }
    }

    pub fn kind(&self) -> ColumnKind {
        match self.data {
            ColumnData::Numeric(_) => ColumnKind::Numeric,
            ColumnData::Factor { .. } => ColumnKind::Factor,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Factor { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn cell(&self, row: usize) -> String {
        match &self.data {
            ColumnData::Numeric(v) => format_number(v[row]),
            ColumnData::Factor { levels, codes } => levels[codes[row]].clone(),
        }
    }
}

/// Shortest text that parses back to the same `f64`.
fn format_number(x: f64) -> String {
    format!("{}", x)
}

/// Row count, column schema and a content hash identifying a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFingerprint {
    pub rows: usize,
    pub schema: Vec<(String, ColumnKind)>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    n_rows: usize,
    /// Rows removed during ingestion because a cell was missing.
    pub dropped_rows: usize,
}

impl Dataset {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let n_rows = columns.first().map_or(0, Column::len);
        for c in &columns {
            if c.len() != n_rows {
                return Err(Error::Data(format!(
                    "column `{}` has {} rows, expected {}",
                    c.name,
                    c.len(),
                    n_rows
                )));
            }
            if let ColumnData::Factor { levels, .. } = &c.data {
                if levels.is_empty() && n_rows > 0 {
                    return Err(Error::Data(format!("factor `{}` has no levels", c.name)));
                }
            }
        }
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::Data(format!("duplicate column `{}`", c.name)));
            }
        }
        Ok(Dataset {
            columns,
            n_rows,
            dropped_rows: 0,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    }

    /// Returns a copy with column `name` replaced by `values` (numeric).
    pub fn with_numeric(&self, name: &str, values: Vec<f64>) -> Result<Dataset> {
        if values.len() != self.n_rows {
            return Err(Error::Dimension(format!(
                "{} values for {} rows",
                values.len(),
                self.n_rows
            )));
        }
        let mut out = self.clone();
        match out.columns.iter_mut().find(|c| c.name == name) {
            Some(c) => c.data = ColumnData::Numeric(values),
            None => out.columns.push(Column::numeric(name, values)),
        }
        Ok(out)
    }

    /// Reorders rows; `perm[i]` is the source row of output row `i`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Dataset> {
        if perm.len() != self.n_rows {
            return Err(Error::Dimension("permutation length".into()));
        }
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                name: c.name.clone(),
                data: match &c.data {
                    ColumnData::Numeric(v) => ColumnData::Numeric(perm.iter().map(|&i| v[i]).collect()),
                    ColumnData::Factor { levels, codes } => ColumnData::Factor {
                        levels: levels.clone(),
                        codes: perm.iter().map(|&i| codes[i]).collect(),
                    },
                },
            })
            .collect();
        Ok(Dataset {
            columns,
            n_rows: self.n_rows,
            dropped_rows: self.dropped_rows,
        })
    }

    pub fn fingerprint(&self) -> DataFingerprint {
        let mut hasher = Sha256::new();
        for c in &self.columns {
            hasher.update(c.name.as_bytes());
            hasher.update([0u8]);
            match &c.data {
                ColumnData::Numeric(v) => {
                    hasher.update([1u8]);
                    for x in v {
                        hasher.update(x.to_le_bytes());
                    }
                }
                ColumnData::Factor { levels, codes } => {
                    hasher.update([2u8]);
                    for code in codes {
                        hasher.update(levels[*code].as_bytes());
                        hasher.update([0u8]);
                    }
                }
            }
        }
        let digest = hasher.finalize();
        DataFingerprint {
            rows: self.n_rows,
            schema: self.columns.iter().map(|c| (c.name.clone(), c.kind())).collect(),
            sha256: digest.iter().map(|b| format!("{:02x}", b)).collect(),
        }
    }

    /// Writes the dataset as CSV with a header row.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))?;
        for row in 0..self.n_rows {
            w.write_record(self.columns.iter().map(|c| c.cell(row)))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-column type overrides and level orders for CSV ingestion.
#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub kinds: BTreeMap<String, ColumnKind>,
    pub level_order: BTreeMap<String, Vec<String>>,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

pub fn ingest_csv(path: impl AsRef<Path>, options: &IngestOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, options)
}

/// Reads a CSV with a header row. Rows with any missing cell are dropped
/// and counted in [`Dataset::dropped_rows`]. A column is numeric when every
/// remaining cell parses as a number, unless overridden.
pub fn read_csv<R: Read>(reader: R, options: &IngestOptions) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Data("empty file: no header row".into()));
    }
    for name in options.kinds.keys().chain(options.level_order.keys()) {
        if !header.contains(name) {
            return Err(Error::Data(format!("override names unknown column `{}`", name)));
        }
    }

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    let mut dropped = 0usize;
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => {
                Error::Data(format!("ragged row {} (data line {})", i + 1, i + 2))
            }
            _ => Error::Csv(e),
        })?;
        if record.iter().any(is_missing) {
            dropped += 1;
            continue;
        }
        for (j, cell) in record.iter().enumerate() {
            cells[j].push(cell.trim().to_string());
        }
    }
    if cells[0].is_empty() && dropped == 0 {
        return Err(Error::Data("empty file: no data rows".into()));
    }

    let mut columns = Vec::with_capacity(header.len());
    for (name, values) in header.iter().zip(cells) {
        let parsed: Option<Vec<f64>> = values.iter().map(|v| v.parse::<f64>().ok()).collect();
        let kind = options.kinds.get(name).copied().unwrap_or(if parsed.is_some() {
            ColumnKind::Numeric
        } else {
            ColumnKind::Factor
        });
        let column = match kind {
            ColumnKind::Numeric => match parsed {
                Some(v) => Column::numeric(name.clone(), v),
                None => {
                    return Err(Error::Data(format!(
                        "column `{}` declared numeric but has non-numeric cells",
                        name
                    )))
                }
            },
            ColumnKind::Factor => {
                let mut col = Column::factor(name.clone(), &values);
                if let Some(order) = options.level_order.get(name) {
                    reorder_levels(&mut col, order)?;
                }
                col
            }
        };
        columns.push(column);
    }
    let mut ds = Dataset::new(columns)?;
    ds.dropped_rows = dropped;
    Ok(ds)
}

fn reorder_levels(col: &mut Column, order: &[String]) -> Result<()> {
    let name = col.name.clone();
    if let ColumnData::Factor { levels, codes } = &mut col.data {
        let mut new_levels: Vec<String> = order.to_vec();
        for l in levels.iter() {
            if !new_levels.contains(l) {
                return Err(Error::Data(format!(
                    "level `{}` of `{}` missing from the level order",
                    l, name
                )));
            }
        }
        // Drop requested levels that never occur in the data.
        new_levels.retain(|l| levels.contains(l));
        let map: Vec<usize> = levels
            .iter()
            .map(|l| new_levels.iter().position(|n| n == l).expect("checked above"))
            .collect();
        for c in codes.iter_mut() {
            *c = map[*c];
        }
        *levels = new_levels;
        Ok(())
    } else {
        Err(Error::Data(format!("level order given for numeric column `{}`", name)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ContrastKind {
    Treatment,
    #[default]
    Sum,
}

impl fmt::Display for ContrastKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastKind::Treatment => "treatment",
            ContrastKind::Sum => "sum",
        })
    }
}

impl std::str::FromStr for ContrastKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "treatment" => Ok(ContrastKind::Treatment),
            "sum" => Ok(ContrastKind::Sum),
            other => Err(Error::Config(format!("unknown contrast scheme `{}`", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ContrastScheme {
    pub default: ContrastKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_factor: BTreeMap<String, ContrastKind>,
}

impl ContrastScheme {
    pub fn uniform(kind: ContrastKind) -> Self {
        ContrastScheme {
            default: kind,
            per_factor: BTreeMap::new(),
        }
    }

    pub fn kind_for(&self, factor: &str) -> ContrastKind {
        self.per_factor.get(factor).copied().unwrap_or(self.default)
    }
}

/// k × (k−1) coding matrix for a k-level factor.
pub fn contrast_matrix(k: usize, kind: ContrastKind) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(k, k.saturating_sub(1));
    for j in 0..k.saturating_sub(1) {
        match kind {
            ContrastKind::Treatment => m[(j + 1, j)] = 1.0,
            ContrastKind::Sum => {
                m[(j, j)] = 1.0;
                m[(k - 1, j)] = -1.0;
            }
        }
    }
    m
}

/// Contrast-coded numeric columns (one per non-reference level) and labels.
pub fn apply_contrasts(column: &Column, kind: ContrastKind) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let (levels, codes) = match &column.data {
        ColumnData::Factor { levels, codes } => (levels, codes),
        ColumnData::Numeric(v) => return Ok((vec![column.name.clone()], vec![v.clone()])),
    };
    let k = levels.len();
    if k < 2 {
        return Err(Error::SingleLevel(column.name.clone()));
    }
    let cm = contrast_matrix(k, kind);
    let mut labels = Vec::with_capacity(k - 1);
    let mut cols = Vec::with_capacity(k - 1);
    for j in 0..k - 1 {
        let level = match kind {
            ContrastKind::Treatment => &levels[j + 1],
            ContrastKind::Sum => &levels[j],
        };
        labels.push(format!("{}[{}]", column.name, level));
        cols.push(codes.iter().map(|&c| cm[(c, j)]).collect());
    }
    Ok((labels, cols))
}

/// Numeric columns of one term: the elementwise product of the coded
/// columns of each of its factors, over all combinations.
pub fn expand_term(term: &Term, data: &Dataset, scheme: &ContrastScheme) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut labels = vec![String::new()];
    let mut cols = vec![vec![1.0; data.n_rows()]];
    for (i, name) in term.factors().iter().enumerate() {
        let col = data.column(name)?;
        let (l2, c2) = apply_contrasts(col, scheme.kind_for(name))?;
        let mut nl = Vec::with_capacity(labels.len() * l2.len());
        let mut nc = Vec::with_capacity(labels.len() * l2.len());
        for (la, ca) in labels.iter().zip(&cols) {
            for (lb, cb) in l2.iter().zip(&c2) {
                nl.push(if i == 0 { lb.clone() } else { format!("{}:{}", la, lb) });
                nc.push(ca.iter().zip(cb).map(|(a, b)| a * b).collect());
            }
        }
        labels = nl;
        cols = nc;
    }
    Ok((labels, cols))
}

/// One grouping factor: its levels, per-row level index and the random
/// blocks that use it.
#[derive(Debug, Clone)]
pub struct GroupFactor {
    pub name: String,
    pub levels: Vec<String>,
    pub codes: Vec<usize>,
    /// Total dimension over all blocks on this factor.
    pub dim: usize,
    pub blocks: Vec<usize>,
}

impl GroupFactor {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

/// One random-effects block after `||` expansion. Rows of its Z block are
/// nonzero only in the `d` columns of the row's group level; `values`
/// holds those `d` entries per row.
#[derive(Debug, Clone)]
pub struct ReBlock {
    pub group: String,
    pub factor: usize,
    /// Position of this block's first dimension inside its factor.
    pub offset: usize,
    pub d: usize,
    pub k: usize,
    pub labels: Vec<String>,
    /// Formula component each column came from.
    pub components: Vec<Component>,
    pub correlated: bool,
    pub values: DMatrix<f64>,
}

impl ReBlock {
    pub fn n_theta(&self) -> usize {
        self.d * (self.d + 1) / 2
    }

    pub fn width(&self) -> usize {
        self.d * self.k
    }
}

#[derive(Debug, Clone)]
pub struct ModelMatrices {
    pub x: DMatrix<f64>,
    pub x_labels: Vec<String>,
    pub y: DVector<f64>,
    pub blocks: Vec<ReBlock>,
    pub factors: Vec<GroupFactor>,
    pub contrasts: ContrastScheme,
    pub fingerprint: DataFingerprint,
}

impl ModelMatrices {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Total number of random effects, Σ d·k.
    pub fn q(&self) -> usize {
        self.blocks.iter().map(ReBlock::width).sum()
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.d).collect()
    }

    /// Dense n × (d·k) Z block with columns ordered level-major.
    pub fn z_block_dense(&self, b: usize) -> DMatrix<f64> {
        let blk = &self.blocks[b];
        let codes = &self.factors[blk.factor].codes;
        let mut z = DMatrix::zeros(self.n(), blk.width());
        for (i, &lvl) in codes.iter().enumerate() {
            for c in 0..blk.d {
                z[(i, lvl * blk.d + c)] = blk.values[(i, c)];
            }
        }
        z
    }
}

/// Builds X, y and the random-effects blocks for `ast` on `data`.
pub fn build_model_matrices(ast: &FormulaAst, data: &Dataset, scheme: &ContrastScheme) -> Result<ModelMatrices> {
    let n = data.n_rows();
    let y = match &data.column(&ast.response)?.data {
        ColumnData::Numeric(v) => DVector::from_vec(v.clone()),
        ColumnData::Factor { .. } => {
            return Err(Error::Data(format!("response `{}` is not numeric", ast.response)))
        }
    };

    let mut x_labels = Vec::new();
    let mut x_cols: Vec<Vec<f64>> = Vec::new();
    if ast.intercept {
        x_labels.push("(Intercept)".to_string());
        x_cols.push(vec![1.0; n]);
    }
    for t in &ast.fixed {
        let (l, c) = expand_term(t, data, scheme)?;
        x_labels.extend(l);
        x_cols.extend(c);
    }
    let x = DMatrix::from_fn(n, x_cols.len(), |i, j| x_cols[j][i]);
    if x.ncols() > 0 {
        let rank = numeric_rank(&x);
        if rank < x.ncols() {
            return Err(Error::RankDeficientX {
                rank,
                cols: x.ncols(),
            });
        }
    }

    let mut factors: Vec<GroupFactor> = Vec::new();
    let mut blocks: Vec<ReBlock> = Vec::new();
    for r in &ast.random {
        let fi = match factors.iter().position(|f| f.name == r.group) {
            Some(i) => i,
            None => {
                let col = data.column(&r.group)?;
                let (levels, codes) = match &col.data {
                    ColumnData::Factor { levels, codes } => (levels.clone(), codes.clone()),
                    ColumnData::Numeric(_) => return Err(Error::NonFactorGroup(r.group.clone())),
                };
                factors.push(GroupFactor {
                    name: r.group.clone(),
                    levels,
                    codes,
                    dim: 0,
                    blocks: Vec::new(),
                });
                factors.len() - 1
            }
        };

        let mut labels = Vec::new();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        let mut comps = Vec::new();
        if r.intercept {
            labels.push("(Intercept)".to_string());
            cols.push(vec![1.0; n]);
            comps.push(Component::Intercept);
        }
        for t in &r.terms {
            let (l, c) = expand_term(t, data, scheme)?;
            comps.extend(std::iter::repeat(Component::Effect(t.clone())).take(l.len()));
            labels.extend(l);
            cols.extend(c);
        }

        // `||` splits after contrast expansion: one scalar block per column.
        let pieces: Vec<Vec<usize>> = if r.correlated {
            vec![(0..labels.len()).collect()]
        } else {
            (0..labels.len()).map(|i| vec![i]).collect()
        };
        for piece in pieces {
            let d = piece.len();
            let values = DMatrix::from_fn(n, d, |i, j| cols[piece[j]][i]);
            let f = &mut factors[fi];
            blocks.push(ReBlock {
                group: r.group.clone(),
                factor: fi,
                offset: f.dim,
                d,
                k: f.levels.len(),
                labels: piece.iter().map(|&i| labels[i].clone()).collect(),
                components: piece.iter().map(|&i| comps[i].clone()).collect(),
                correlated: r.correlated,
                values,
            });
            f.dim += d;
            f.blocks.push(blocks.len() - 1);
        }
    }

    Ok(ModelMatrices {
        x,
        x_labels,
        y,
        blocks,
        factors,
        contrasts: scheme.clone(),
        fingerprint: data.fingerprint(),
    })
}

pub(crate) fn numeric_rank(x: &DMatrix<f64>) -> usize {
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let tol = max * (x.nrows().max(x.ncols()) as f64) * f64::EPSILON * 16.0;
    sv.iter().filter(|&&s| s > tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::parse_formula;

    fn toy() -> Dataset {
        Dataset::new(vec![
            Column::numeric("Y", vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            Column::factor("A", &["a1", "a2", "a1", "a2", "a1", "a2"]),
            Column::factor("G", &["g1", "g2", "g3", "g1", "g2", "g3"]),
            Column::factor("S", &["s1", "s1", "s2", "s2", "s3", "s3"]),
        ])
        .unwrap()
    }

    #[test]
    fn csv_basic_and_missing_rows() {
        let text = "Y,A\n1.5,a1\n2.5,a2\n";
        let ds = read_csv(text.as_bytes(), &IngestOptions::default()).unwrap();
        assert_eq!(ds.n_rows(), 2);
        assert_eq!(ds.column("Y").unwrap().kind(), ColumnKind::Numeric);
        assert_eq!(ds.column("A").unwrap().kind(), ColumnKind::Factor);

        let text = "Y,A\n1.5,a1\n,a2\n3,NA\n4,a1\n";
        let ds = read_csv(text.as_bytes(), &IngestOptions::default()).unwrap();
        assert_eq!(ds.n_rows(), 2);
        assert_eq!(ds.dropped_rows, 2);
    }

    #[test]
    fn csv_overrides_and_errors() {
        let text = "Y,Subject\n1,101\n2,102\n3,101\n";
        let mut opts = IngestOptions::default();
        opts.kinds.insert("Subject".into(), ColumnKind::Factor);
        let ds = read_csv(text.as_bytes(), &opts).unwrap();
        match &ds.column("Subject").unwrap().data {
            ColumnData::Factor { levels, codes } => {
                assert_eq!(levels, &["101", "102"]);
                assert_eq!(codes, &[0, 1, 0]);
            }
            _ => panic!("expected factor"),
        }

        let mut bad = IngestOptions::default();
        bad.kinds.insert("Nope".into(), ColumnKind::Factor);
        assert!(read_csv(text.as_bytes(), &bad).is_err());

        assert!(read_csv("Y,A\n1,a\n2\n".as_bytes(), &IngestOptions::default()).is_err());
        assert!(read_csv("".as_bytes(), &IngestOptions::default()).is_err());

        let mut order = IngestOptions::default();
        order.level_order.insert("A".into(), vec!["a2".into(), "a1".into()]);
        let ds = read_csv("Y,A\n1,a1\n2,a2\n".as_bytes(), &order).unwrap();
        match &ds.column("A").unwrap().data {
            ColumnData::Factor { levels, codes } => {
                assert_eq!(levels, &["a2", "a1"]);
                assert_eq!(codes, &[1, 0]);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn csv_write_read_round_trip() {
        let ds = toy();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), &IngestOptions::default()).unwrap();
        assert_eq!(back.fingerprint(), ds.fingerprint());
    }

    #[test]
    fn contrast_codings() {
        let two = Column::factor("A", &["a", "b"]);
        let (_, c) = apply_contrasts(&two, ContrastKind::Treatment).unwrap();
        assert_eq!(c, vec![vec![0.0, 1.0]]);
        let (_, c) = apply_contrasts(&two, ContrastKind::Sum).unwrap();
        assert_eq!(c, vec![vec![1.0, -1.0]]);

        let three = Column::factor("B", &["x", "y", "z"]);
        let (labels, c) = apply_contrasts(&three, ContrastKind::Sum).unwrap();
        assert_eq!(labels.len(), 2);
        assert_eq!((c[0][2], c[1][2]), (-1.0, -1.0));
        assert_eq!((c[0][0], c[1][0]), (1.0, 0.0));
        assert_eq!((c[0][1], c[1][1]), (0.0, 1.0));

        let one = Column::factor("C", &["only", "only"]);
        assert!(matches!(apply_contrasts(&one, ContrastKind::Sum), Err(Error::SingleLevel(_))));
    }

    #[test]
    fn matrices_for_correlated_and_split_terms() {
        let ds = toy();
        let scheme = ContrastScheme::default();
        let f = parse_formula("Y ~ 1 + A + (1 + A | S) + (1 | G)").unwrap();
        let mm = build_model_matrices(&f, &ds, &scheme).unwrap();
        assert_eq!(mm.p(), 2);
        assert_eq!(mm.blocks.len(), 2);
        assert_eq!((mm.blocks[0].d, mm.blocks[0].k), (2, 3));
        assert_eq!(mm.blocks[0].width(), 6);
        assert_eq!(mm.q(), 9);

        let z = mm.z_block_dense(0);
        for i in 0..ds.n_rows() {
            let lvl = mm.factors[0].codes[i];
            for c in 0..z.ncols() {
                if c / 2 != lvl {
                    assert_eq!(z[(i, c)], 0.0);
                }
            }
        }

        let g = parse_formula("Y ~ 1 + A + (1 + A || S)").unwrap();
        let mm = build_model_matrices(&g, &ds, &scheme).unwrap();
        assert_eq!(mm.blocks.len(), 2);
        assert!(mm.blocks.iter().all(|b| b.d == 1));
        assert_eq!(mm.factors[0].dim, 2);
        assert_eq!(mm.blocks[1].offset, 1);
    }

    #[test]
    fn split_happens_after_contrast_expansion() {
        let ds = toy();
        let f = parse_formula("Y ~ 1 + (1 + G || S)").unwrap();
        let mm = build_model_matrices(&f, &ds, &ContrastScheme::default()).unwrap();
        // intercept plus two contrast columns for the three-level G
        assert_eq!(mm.blocks.len(), 3);
        assert_eq!(mm.blocks[1].components[0], Component::Effect(Term::main("G")));
    }

    #[test]
    fn full_factorial_has_eight_columns() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut c = Vec::new();
        let mut y = Vec::new();
        for i in 0..16 {
            a.push(if i & 1 == 0 { "a1" } else { "a2" });
            b.push(if i & 2 == 0 { "b1" } else { "b2" });
            c.push(if i & 4 == 0 { "c1" } else { "c2" });
            y.push(i as f64);
        }
        let ds = Dataset::new(vec![
            Column::numeric("Y", y),
            Column::factor("A", &a),
            Column::factor("B", &b),
            Column::factor("C", &c),
        ])
        .unwrap();
        let f = parse_formula("Y ~ A*B*C").unwrap();
        let mm = build_model_matrices(&f, &ds, &ContrastScheme::default()).unwrap();
        assert_eq!(mm.p(), 8);
    }

    #[test]
    fn matrix_errors() {
        let ds = toy();
        let scheme = ContrastScheme::default();
        let f = parse_formula("Y ~ 1 + Nope").unwrap();
        assert!(matches!(build_model_matrices(&f, &ds, &scheme), Err(Error::UnknownColumn(_))));
        let f = parse_formula("Y ~ 1 + (1 | Y)").unwrap();
        assert!(matches!(build_model_matrices(&f, &ds, &scheme), Err(Error::NonFactorGroup(_))));
        // A and A-copy columns are collinear
        let ds2 = ds.with_numeric("A2", vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
        let f = parse_formula("Y ~ 1 + A + A2").unwrap();
        assert!(matches!(build_model_matrices(&f, &ds2, &scheme), Err(Error::RankDeficientX { .. })));
    }
}
