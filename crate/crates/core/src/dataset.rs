//! Tables, CSV ingestion, and the incremental-column withholding protocol.
//!
//! A scenario partitions rows into five disjoint splits and columns into
//! original, incremental and target roles. Labels never leave the scenario
//! except through [`IncrementalScenario::train_labels`],
//! [`IncrementalScenario::val_labels`] and the single scoring entry point
//! [`IncrementalScenario::score`]; every access is counted in an audit.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TabiiError};
use crate::rng::rng_for;

/// Index reserved for unseen or missing categories.
pub const UNK: usize = 0;
/// Floor applied to train standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnRole {
    Original,
    Incremental,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
    pub role: ColumnRole,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, kind: ColumnKind, role: ColumnRole) -> Self {
        ColumnSpec {
            name: name.into(),
            kind,
            role,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Cat(String),
    Missing,
}

impl Cell {
    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    schema: Vec<ColumnSpec>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    /// Build a table, checking schema and cell invariants.
    pub fn new(schema: Vec<ColumnSpec>, rows: Vec<Vec<Cell>>) -> Result<Self> {
        validate_schema(&schema)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != schema.len() {
                return Err(TabiiError::Schema(format!(
                    "row {i} has {} cells, schema has {} columns",
                    row.len(),
                    schema.len()
                )));
            }
            for (cell, spec) in row.iter().zip(&schema) {
                match (cell, spec.kind) {
                    (Cell::Missing, _) => {}
                    (Cell::Num(v), ColumnKind::Numeric) if v.is_finite() => {}
                    (Cell::Cat(_), ColumnKind::Categorical) => {}
                    _ => {
                        return Err(TabiiError::Schema(format!(
                            "row {i}: cell {cell:?} does not fit column `{}`",
                            spec.name
                        )))
                    }
                }
            }
        }
        Ok(Table { schema, rows })
    }

    pub fn schema(&self) -> &[ColumnSpec] {
        &self.schema
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.schema.len()
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.schema
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| TabiiError::UnknownColumn(name.to_string()))
    }

    pub fn target_index(&self) -> usize {
        self.schema
            .iter()
            .position(|c| c.role == ColumnRole::Target)
            .expect("validated schema has a target")
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = &Cell> {
        self.rows.iter().map(move |r| &r[j])
    }

    /// Keep only the named columns, in the given order.
    pub fn select_columns(&self, names: &[&str]) -> Result<Table> {
        let idx = names
            .iter()
            .map(|n| self.column_index(n))
            .collect::<Result<Vec<_>>>()?;
        let schema = idx.iter().map(|&j| self.schema[j].clone()).collect();
        let rows = self
            .rows
            .iter()
            .map(|r| idx.iter().map(|&j| r[j].clone()).collect())
            .collect();
        Table::new(schema, rows)
    }

    /// Replace the schema roles, keeping names, kinds and data.
    pub fn with_roles(&self, roles: &[ColumnRole]) -> Result<Table> {
        if roles.len() != self.schema.len() {
            return Err(TabiiError::shape("with_roles", "role count differs from column count"));
        }
        let schema = self
            .schema
            .iter()
            .zip(roles)
            .map(|(c, &role)| ColumnSpec { role, ..c.clone() })
            .collect();
        Table::new(schema, self.rows.clone())
    }

    pub fn count_missing(&self) -> usize {
        self.rows.iter().flatten().filter(|c| c.is_missing()).count()
    }
}

fn validate_schema(schema: &[ColumnSpec]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for c in schema {
        if !seen.insert(c.name.as_str()) {
            return Err(TabiiError::Schema(format!("duplicate column name `{}`", c.name)));
        }
    }
    let targets = schema.iter().filter(|c| c.role == ColumnRole::Target).count();
    if targets != 1 {
        return Err(TabiiError::Schema(format!("expected exactly one target column, found {targets}")));
    }
    if !schema.iter().any(|c| c.role == ColumnRole::Original) {
        return Err(TabiiError::Schema("no original column".into()));
    }
    Ok(())
}

/// Options for [`load_csv`]. Without a schema file, kinds are inferred and the
/// target is `target` if given, else the last header column.
#[derive(Clone, Debug, Default)]
pub struct LoadOptions<'a> {
    pub schema: Option<&'a Path>,
    pub target: Option<&'a str>,
}

pub fn load_csv(path: &Path, options: &LoadOptions) -> Result<Table> {
    let text = fs::read_to_string(path).map_err(|e| TabiiError::io(path, e))?;
    let schema = match options.schema {
        Some(p) => {
            let raw = fs::read_to_string(p).map_err(|e| TabiiError::io(p, e))?;
            let specs: Vec<ColumnSpec> = serde_json::from_str(&raw).map_err(|e| TabiiError::Format {
                path: p.to_path_buf(),
                message: e.to_string(),
            })?;
            Some(specs)
        }
        None => None,
    };
    parse_csv(&text, schema, options.target)
}

/// Parse CSV text; see [`load_csv`].
pub fn parse_csv(text: &str, schema: Option<Vec<ColumnSpec>>, target: Option<&str>) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_error)?
        .iter()
        .map(str::to_string)
        .collect();
    let mut raw: Vec<Vec<String>> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(csv_error)?;
        raw.push(rec.iter().map(str::to_string).collect());
    }

    let schema = match schema {
        Some(s) => {
            let names: Vec<&str> = s.iter().map(|c| c.name.as_str()).collect();
            if names != header.iter().map(String::as_str).collect::<Vec<_>>() {
                return Err(TabiiError::Schema(format!(
                    "schema columns {names:?} do not match header {header:?}"
                )));
            }
            s
        }
        None => {
            let target = target.unwrap_or_else(|| header.last().map(String::as_str).unwrap_or(""));
            if !header.iter().any(|h| h == target) {
                return Err(TabiiError::UnknownColumn(target.to_string()));
            }
            header
                .iter()
                .enumerate()
                .map(|(j, name)| {
                    let numeric = raw
                        .iter()
                        .map(|r| r[j].as_str())
                        .filter(|c| !c.is_empty())
                        .all(|c| c.trim().parse::<f64>().is_ok_and(f64::is_finite));
                    let kind = if numeric {
                        ColumnKind::Numeric
                    } else {
                        ColumnKind::Categorical
                    };
                    let role = if name == target {
                        ColumnRole::Target
                    } else {
                        ColumnRole::Original
                    };
                    ColumnSpec::new(name.clone(), kind, role)
                })
                .collect()
        }
    };

    let mut rows = Vec::with_capacity(raw.len());
    for (i, r) in raw.into_iter().enumerate() {
        let line = i as u64 + 2;
        let row = r
            .into_iter()
            .zip(&schema)
            .map(|(s, spec)| {
                if s.is_empty() {
                    return Ok(Cell::Missing);
                }
                match spec.kind {
                    ColumnKind::Numeric => match s.trim().parse::<f64>() {
                        Ok(v) if v.is_finite() => Ok(Cell::Num(v)),
                        _ => Err(TabiiError::Csv {
                            line,
                            message: format!("`{s}` is not a finite number in column `{}`", spec.name),
                        }),
                    },
                    ColumnKind::Categorical => Ok(Cell::Cat(s)),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Table::new(schema, rows)
}

fn csv_error(e: csv::Error) -> TabiiError {
    let line = e.position().map_or(0, |p| p.line());
    TabiiError::Csv {
        line,
        message: e.to_string(),
    }
}

/// Write a table as CSV with header; missing cells become empty strings.
pub fn write_csv(table: &Table, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<&str> = table.schema.iter().map(|c| c.name.as_str()).collect();
    w.write_record(&header).map_err(csv_error)?;
    for row in &table.rows {
        let rec: Vec<String> = row
            .iter()
            .map(|c| match c {
                Cell::Num(v) => format!("{v}"),
                Cell::Cat(s) => s.clone(),
                Cell::Missing => String::new(),
            })
            .collect();
        w.write_record(&rec).map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| TabiiError::io(path, e.into_error()))?;
    fs::write(path, bytes).map_err(|e| TabiiError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    /// Fractions of the test block for TrainFromTest, ValFromTest and TestFromTest.
    pub test_subsplit: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_frac: 0.6,
            val_frac: 0.2,
            test_frac: 0.2,
            test_subsplit: [1.0 / 3.0; 3],
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        SplitSpec {
            seed,
            ..SplitSpec::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        let ok = |f: &[f64]| f.iter().all(|&x| x > 0.0 && x < 1.0) && (f.iter().sum::<f64>() - 1.0).abs() < 1e-9;
        if !ok(&fr) || !ok(&self.test_subsplit) {
            return Err(TabiiError::Config(format!(
                "split fractions must lie in (0,1) and sum to 1: {fr:?} / {:?}",
                self.test_subsplit
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    TrainFromTest,
    ValFromTest,
    TestFromTest,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Train,
        Split::Val,
        Split::TrainFromTest,
        Split::ValFromTest,
        Split::TestFromTest,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub train_from_test: Vec<usize>,
    pub val_from_test: Vec<usize>,
    pub test_from_test: Vec<usize>,
}

impl SplitIndices {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::TrainFromTest => &self.train_from_test,
            Split::ValFromTest => &self.val_from_test,
            Split::TestFromTest => &self.test_from_test,
        }
    }

    pub fn sizes(&self) -> [usize; 5] {
        Split::ALL.map(|s| self.get(s).len())
    }

    /// Rows available, without labels, for adaptation.
    pub fn inference_pool(&self) -> Vec<usize> {
        self.train_from_test.iter().chain(&self.val_from_test).copied().collect()
    }
}

/// Realize the five index sets by seeded shuffling. Sizes use floor for the
/// leading parts, so the last part absorbs rounding.
pub fn realize_split(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(spec.seed, "split"));
    let n_train = (n as f64 * spec.train_frac).floor() as usize;
    let n_val = (n as f64 * spec.val_frac).floor() as usize;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    let m = test.len();
    let a = (m as f64 * spec.test_subsplit[0]).floor() as usize;
    let b = (m as f64 * spec.test_subsplit[1]).floor() as usize;
    Ok(SplitIndices {
        train: idx,
        val,
        train_from_test: test[..a].to_vec(),
        val_from_test: test[a..a + b].to_vec(),
        test_from_test: test[a + b..].to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnStats {
    Numeric { mean: f64, std: f64 },
    /// `categories[i]` maps to index `i + 1`; index 0 is [`UNK`].
    Categorical { categories: Vec<String> },
}

impl ColumnStats {
    /// Number of category indices including UNK (1 for numeric columns).
    pub fn cardinality(&self) -> usize {
        match self {
            ColumnStats::Numeric { .. } => 1,
            ColumnStats::Categorical { categories } => categories.len() + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// Original columns only.
    Train,
    /// Original columns followed by incremental columns.
    Inference,
}

/// One row after normalization. All vectors have one entry per view column:
/// `values` holds z-scored numerics (0 for categorical or missing cells),
/// `categories` holds category indices (0 for numeric columns), `missing`
/// flags missing cells.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedRow {
    pub values: Vec<f64>,
    pub categories: Vec<usize>,
    pub missing: Vec<bool>,
}

/// Row-major batch of normalized rows with `n_cols` slots each.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub n_rows: usize,
    pub n_cols: usize,
    pub values: Vec<f64>,
    pub categories: Vec<usize>,
    pub missing: Vec<bool>,
}

impl EncodedBatch {
    pub fn empty(n_cols: usize) -> Self {
        EncodedBatch {
            n_rows: 0,
            n_cols,
            values: Vec::new(),
            categories: Vec::new(),
            missing: Vec::new(),
        }
    }

    pub fn push(&mut self, row: &NormalizedRow) {
        debug_assert_eq!(row.values.len(), self.n_cols);
        self.values.extend_from_slice(&row.values);
        self.categories.extend_from_slice(&row.categories);
        self.missing.extend_from_slice(&row.missing);
        self.n_rows += 1;
    }

    pub fn row(&self, i: usize) -> NormalizedRow {
        let r = i * self.n_cols..(i + 1) * self.n_cols;
        NormalizedRow {
            values: self.values[r.clone()].to_vec(),
            categories: self.categories[r.clone()].to_vec(),
            missing: self.missing[r].to_vec(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> EncodedBatch {
        let mut out = EncodedBatch::empty(self.n_cols);
        for &i in rows {
            out.push(&self.row(i));
        }
        out
    }

    /// Keep the first `n` slots of every row.
    pub fn truncate_cols(&self, n: usize) -> EncodedBatch {
        let mut out = EncodedBatch::empty(n);
        for i in 0..self.n_rows {
            let r = self.row(i);
            out.push(&NormalizedRow {
                values: r.values[..n].to_vec(),
                categories: r.categories[..n].to_vec(),
                missing: r.missing[..n].to_vec(),
            });
        }
        out
    }

    pub fn concat(parts: &[&EncodedBatch]) -> Result<EncodedBatch> {
        let n_cols = parts.first().map_or(0, |p| p.n_cols);
        let mut out = EncodedBatch::empty(n_cols);
        for p in parts {
            if p.n_cols != n_cols {
                return Err(TabiiError::shape("EncodedBatch::concat", "column counts differ"));
            }
            out.values.extend_from_slice(&p.values);
            out.categories.extend_from_slice(&p.categories);
            out.missing.extend_from_slice(&p.missing);
            out.n_rows += p.n_rows;
        }
        Ok(out)
    }
}

/// Per-split counters of feature and label reads.
#[derive(Debug, Default)]
pub struct AccessAudit {
    feature_reads: [AtomicUsize; 5],
    label_reads: [AtomicUsize; 5],
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditSnapshot {
    pub feature_reads: BTreeMap<Split, usize>,
    pub label_reads: BTreeMap<Split, usize>,
}

impl AuditSnapshot {
    pub fn labels(&self, split: Split) -> usize {
        self.label_reads.get(&split).copied().unwrap_or(0)
    }

    pub fn features(&self, split: Split) -> usize {
        self.feature_reads.get(&split).copied().unwrap_or(0)
    }
}

impl AccessAudit {
    fn feature(&self, split: Split, n: usize) {
        self.feature_reads[split.slot()].fetch_add(n, Ordering::Relaxed);
    }

    fn label(&self, split: Split, n: usize) {
        self.label_reads[split.slot()].fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> AuditSnapshot {
        let mk = |a: &[AtomicUsize; 5]| Split::ALL.iter().map(|&s| (s, a[s.slot()].load(Ordering::Relaxed))).collect();
        AuditSnapshot {
            feature_reads: mk(&self.feature_reads),
            label_reads: mk(&self.label_reads),
        }
    }

    pub fn reset(&self) {
        for a in self.feature_reads.iter().chain(&self.label_reads) {
            a.store(0, Ordering::Relaxed);
        }
    }
}

/// A table with its incremental columns, realized splits and train-only
/// normalization statistics.
#[derive(Debug)]
pub struct IncrementalScenario {
    full_table: Table,
    train_view: Table,
    inference_view: Table,
    incremental: Vec<String>,
    split: SplitIndices,
    split_of: Vec<Split>,
    /// Stats for inference-view columns, in inference-view order.
    stats: Vec<ColumnStats>,
    classes: Vec<String>,
    labels: Vec<usize>,
    audit: AccessAudit,
    spec: SplitSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub target: String,
    pub original_columns: Vec<String>,
    pub incremental_columns: Vec<String>,
    pub classes: Vec<String>,
    pub split: SplitSpec,
    pub split_sizes: BTreeMap<Split, usize>,
    pub normalization: BTreeMap<String, ColumnStats>,
    pub n_rows: usize,
}

pub fn make_scenario(table: &Table, incremental_names: &[&str], split: &SplitSpec) -> Result<IncrementalScenario> {
    let target_idx = table.target_index();
    let mut roles: Vec<ColumnRole> = table
        .schema()
        .iter()
        .map(|c| match c.role {
            ColumnRole::Target => ColumnRole::Target,
            _ => ColumnRole::Original,
        })
        .collect();
    let mut seen = BTreeSet::new();
    for &name in incremental_names {
        let j = table.column_index(name)?;
        if j == target_idx {
            return Err(TabiiError::Config(format!("target column `{name}` cannot be incremental")));
        }
        if !seen.insert(name) {
            return Err(TabiiError::Config(format!("column `{name}` listed twice")));
        }
        roles[j] = ColumnRole::Incremental;
    }
    if !roles.contains(&ColumnRole::Original) {
        return Err(TabiiError::Config("incremental columns cover every feature column".into()));
    }
    let full = table.with_roles(&roles)?;
    let originals: Vec<&str> = full
        .schema()
        .iter()
        .filter(|c| c.role == ColumnRole::Original)
        .map(|c| c.name.as_str())
        .collect();
    let target_name = full.schema()[target_idx].name.clone();
    let mut train_cols = originals.clone();
    train_cols.push(&target_name);
    let mut inf_cols = originals.clone();
    inf_cols.extend_from_slice(incremental_names);
    inf_cols.push(&target_name);
    let train_view = full.select_columns(&train_cols)?;
    let inference_view = full.select_columns(&inf_cols)?;

    let n = full.n_rows();
    let indices = realize_split(n, split)?;
    if indices.train.is_empty() {
        return Err(TabiiError::Empty("train split".into()));
    }
    let mut split_of = vec![Split::Train; n];
    for s in Split::ALL {
        for &i in indices.get(s) {
            split_of[i] = s;
        }
    }

    let (classes, labels) = encode_target(&full, target_idx)?;

    let stats = inference_view.schema()[..inf_cols.len() - 1]
        .iter()
        .enumerate()
        .map(|(j, spec)| column_stats(&inference_view, j, spec.kind, &indices.train))
        .collect();

    Ok(IncrementalScenario {
        full_table: full,
        train_view,
        inference_view,
        incremental: incremental_names.iter().map(|s| s.to_string()).collect(),
        split: indices,
        split_of,
        stats,
        classes,
        labels,
        audit: AccessAudit::default(),
        spec: split.clone(),
    })
}

fn encode_target(table: &Table, j: usize) -> Result<(Vec<String>, Vec<usize>)> {
    let keys: Vec<String> = table
        .column(j)
        .enumerate()
        .map(|(i, c)| match c {
            Cell::Num(v) => Ok(format!("{v}")),
            Cell::Cat(s) => Ok(s.clone()),
            Cell::Missing => Err(TabiiError::Schema(format!("row {i} has a missing target"))),
        })
        .collect::<Result<_>>()?;
    let mut classes: Vec<String> = keys.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if table.schema()[j].kind == ColumnKind::Numeric {
        classes.sort_by(|a, b| a.parse::<f64>().unwrap().total_cmp(&b.parse::<f64>().unwrap()));
    }
    let lookup: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels = keys.iter().map(|k| lookup[k.as_str()]).collect();
    Ok((classes, labels))
}

fn column_stats(table: &Table, j: usize, kind: ColumnKind, train: &[usize]) -> ColumnStats {
    match kind {
        ColumnKind::Numeric => {
            let vals: Vec<f64> = train
                .iter()
                .filter_map(|&i| match table.rows()[i][j] {
                    Cell::Num(v) => Some(v),
                    _ => None,
                })
                .collect();
            if vals.is_empty() {
                return ColumnStats::Numeric { mean: 0.0, std: 1.0 };
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            ColumnStats::Numeric {
                mean,
                std: var.sqrt().max(STD_FLOOR),
            }
        }
        ColumnKind::Categorical => {
            let cats: BTreeSet<String> = train
                .iter()
                .filter_map(|&i| match &table.rows()[i][j] {
                    Cell::Cat(s) => Some(s.clone()),
                    _ => None,
                })
                .collect();
            ColumnStats::Categorical {
                categories: cats.into_iter().collect(),
            }
        }
    }
}

impl IncrementalScenario {
    pub fn full_table(&self) -> &Table {
        &self.full_table
    }

    pub fn train_view(&self) -> &Table {
        &self.train_view
    }

    pub fn inference_view(&self) -> &Table {
        &self.inference_view
    }

    pub fn split(&self) -> &SplitIndices {
        &self.split
    }

    pub fn split_spec(&self) -> &SplitSpec {
        &self.spec
    }

    pub fn split_of(&self, row: usize) -> Split {
        self.split_of[row]
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn incremental_names(&self) -> &[String] {
        &self.incremental
    }

    pub fn original_names(&self) -> Vec<String> {
        self.column_specs(View::Train).iter().map(|c| c.name.clone()).collect()
    }

    pub fn target_name(&self) -> &str {
        let t = self.full_table.target_index();
        &self.full_table.schema()[t].name
    }

    pub fn n_original(&self) -> usize {
        self.train_view.n_cols() - 1
    }

    pub fn n_incremental(&self) -> usize {
        self.incremental.len()
    }

    pub fn arity(&self, view: View) -> usize {
        match view {
            View::Train => self.n_original(),
            View::Inference => self.n_original() + self.n_incremental(),
        }
    }

    /// Feature columns of the view, target excluded.
    pub fn column_specs(&self, view: View) -> &[ColumnSpec] {
        let t = match view {
            View::Train => &self.train_view,
            View::Inference => &self.inference_view,
        };
        &t.schema()[..t.n_cols() - 1]
    }

    /// Normalization stats for the view's feature columns.
    pub fn stats(&self, view: View) -> &[ColumnStats] {
        &self.stats[..self.arity(view)]
    }

    pub fn audit(&self) -> &AccessAudit {
        &self.audit
    }

    /// Normalize one row given as the view's feature cells.
    pub fn normalize_row(&self, cells: &[Cell], view: View) -> Result<NormalizedRow> {
        let stats = self.stats(view);
        if cells.len() != stats.len() {
            return Err(TabiiError::shape(
                "normalize_row",
                format!("{} cells for a view of arity {}", cells.len(), stats.len()),
            ));
        }
        Ok(normalize_cells(cells, stats))
    }

    /// Normalize the given table rows through a view, counting feature reads.
    pub fn encode_rows(&self, rows: &[usize], view: View) -> EncodedBatch {
        let table = match view {
            View::Train => &self.train_view,
            View::Inference => &self.inference_view,
        };
        let arity = self.arity(view);
        let stats = self.stats(view);
        let mut out = EncodedBatch::empty(arity);
        for &i in rows {
            self.audit.feature(self.split_of[i], 1);
            out.push(&normalize_cells(&table.rows()[i][..arity], stats));
        }
        out
    }

    pub fn encode_split(&self, split: Split, view: View) -> EncodedBatch {
        self.encode_rows(self.split.get(split), view)
    }

    pub fn train_labels(&self) -> Vec<usize> {
        self.labels_of(Split::Train)
    }

    pub fn val_labels(&self) -> Vec<usize> {
        self.labels_of(Split::Val)
    }

    fn labels_of(&self, split: Split) -> Vec<usize> {
        let rows = self.split.get(split);
        self.audit.label(split, rows.len());
        rows.iter().map(|&i| self.labels[i]).collect()
    }

    /// Accuracy of `predictions` on the TestFromTest rows. This is the only
    /// path that reads those labels.
    pub fn score(&self, predictions: &[usize]) -> Result<f64> {
        let rows = &self.split.test_from_test;
        if predictions.len() != rows.len() {
            return Err(TabiiError::shape(
                "score",
                format!("{} predictions for {} test rows", predictions.len(), rows.len()),
            ));
        }
        if rows.is_empty() {
            return Err(TabiiError::Empty("TestFromTest".into()));
        }
        self.audit.label(Split::TestFromTest, rows.len());
        let hits = rows.iter().zip(predictions).filter(|(&i, &p)| self.labels[i] == p).count();
        Ok(hits as f64 / rows.len() as f64)
    }

    /// Labels of any split for offline diagnostics (pseudo-label quality and
    /// similar). Reads are counted like every other label access.
    pub fn reveal_labels(&self, split: Split) -> Vec<usize> {
        self.labels_of(split)
    }

    pub fn manifest(&self) -> ScenarioManifest {
        let specs = self.column_specs(View::Inference);
        ScenarioManifest {
            target: self.target_name().to_string(),
            original_columns: self.original_names(),
            incremental_columns: self.incremental.clone(),
            classes: self.classes.clone(),
            split: self.spec.clone(),
            split_sizes: Split::ALL.iter().map(|&s| (s, self.split.get(s).len())).collect(),
            normalization: specs
                .iter()
                .zip(&self.stats)
                .map(|(c, s)| (c.name.clone(), s.clone()))
                .collect(),
            n_rows: self.full_table.n_rows(),
        }
    }

    /// Same data with a different table (e.g. after a stress transform)
    /// sharing this scenario's column roles and split seed.
    pub fn rebuild(&self, table: &Table) -> Result<IncrementalScenario> {
        let names: Vec<&str> = self.incremental.iter().map(String::as_str).collect();
        make_scenario(table, &names, &self.spec)
    }
}

fn normalize_cells(cells: &[Cell], stats: &[ColumnStats]) -> NormalizedRow {
    let n = cells.len();
    let mut row = NormalizedRow {
        values: vec![0.0; n],
        categories: vec![UNK; n],
        missing: vec![false; n],
    };
    for (j, (cell, st)) in cells.iter().zip(stats).enumerate() {
        match (cell, st) {
            (Cell::Missing, _) => row.missing[j] = true,
            (Cell::Num(v), ColumnStats::Numeric { mean, std }) => row.values[j] = (v - mean) / std.max(STD_FLOOR),
            (Cell::Cat(s), ColumnStats::Categorical { categories }) => {
                row.categories[j] = categories.binary_search(s).map_or(UNK, |k| k + 1);
            }
            // Kinds are validated at table construction; anything else is treated as missing.
            _ => row.missing[j] = true,
        }
    }
    row
}

/// Set every non-target cell to missing with probability `rate`.
pub fn inject_missing(table: &Table, rate: f64, seed: u64) -> Result<Table> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TabiiError::InvalidArgument(format!("missing rate {rate} outside [0, 1)")));
    }
    let t = table.target_index();
    let mut rng = rng_for(seed, "inject_missing");
    let rows = table
        .rows()
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, c)| {
                    if j == t {
                        return c.clone();
                    }
                    // Draw for every cell so the mask does not depend on cell contents.
                    if rng.random::<f64>() < rate {
                        Cell::Missing
                    } else {
                        c.clone()
                    }
                })
                .collect()
        })
        .collect();
    Table::new(table.schema().to_vec(), rows)
}

/// Replace every non-target column name with a seeded 8-character token.
pub fn randomize_column_names(table: &Table, seed: u64) -> Result<Table> {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut rng = rng_for(seed, "column_names");
    let mut used: BTreeSet<String> = table.schema().iter().map(|c| c.name.clone()).collect();
    let schema = table
        .schema()
        .iter()
        .map(|c| {
            if c.role == ColumnRole::Target {
                return c.clone();
            }
            loop {
                let name: String = (0..8)
                    .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
                    .collect();
                if used.insert(name.clone()) {
                    return ColumnSpec { name, ..c.clone() };
                }
            }
        })
        .collect();
    Table::new(schema, table.rows().to_vec())
}

/// Rename columns according to `mapping` (old → new).
pub fn rename_columns(table: &Table, mapping: &BTreeMap<String, String>) -> Result<Table> {
    let schema = table
        .schema()
        .iter()
        .map(|c| ColumnSpec {
            name: mapping.get(&c.name).cloned().unwrap_or_else(|| c.name.clone()),
            ..c.clone()
        })
        .collect();
    Table::new(schema, table.rows().to_vec())
}

/// Anything that maps encoded rows to class predictions.
pub trait Classifier {
    fn predict_batch(&self, batch: &EncodedBatch) -> Result<Vec<usize>>;
}

/// Permutation importance on validation rows of the inference view: the mean
/// accuracy drop over `k` seeded permutations of each column. Sorted by
/// descending importance; ties keep column order.
pub fn rank_attributes(
    scenario: &IncrementalScenario,
    model: &dyn Classifier,
    k: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    if k == 0 {
        return Err(TabiiError::InvalidArgument("k must be at least 1".into()));
    }
    let batch = scenario.encode_split(Split::Val, View::Inference);
    let labels = scenario.val_labels();
    if labels.is_empty() {
        return Err(TabiiError::Empty("validation split".into()));
    }
    let accuracy = |pred: &[usize]| {
        pred.iter().zip(&labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
    };
    let base = accuracy(&model.predict_batch(&batch)?);
    let specs = scenario.column_specs(View::Inference);
    let mut scores = Vec::with_capacity(specs.len());
    for (j, spec) in specs.iter().enumerate() {
        let mut rng = rng_for(seed, &format!("permute/{}", spec.name));
        let mut drop = 0.0;
        for _ in 0..k {
            let mut perm: Vec<usize> = (0..batch.n_rows).collect();
            perm.shuffle(&mut rng);
            let mut shuffled = batch.clone();
            for (dst, &src) in perm.iter().enumerate() {
                let (d, s) = (dst * batch.n_cols + j, src * batch.n_cols + j);
                shuffled.values[d] = batch.values[s];
                shuffled.categories[d] = batch.categories[s];
                shuffled.missing[d] = batch.missing[s];
            }
            drop += base - accuracy(&model.predict_batch(&shuffled)?);
        }
        scores.push((spec.name.clone(), drop / k as f64));
    }
    // Stable sort keeps column order among ties.
    scores.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scores)
}
