//! Experiment orchestration: seeded runs of the discard, direct, adapted and
//! supervised-upper-bound methods, ablations, attribute tiers, stress
//! transforms, mutual-information probes and rank tables.
//!
//! Every seed fits all requested methods first and records their TestFromTest
//! predictions; scoring happens once afterwards, so the audit snapshot taken
//! between the two phases shows what was read before any labels were seen.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{
    ablation_components, adapt_with_base, prepare_base, Ablation, AdaptationConfig, AdaptedModel, AdapterMode,
    CondenseMode, Components,
};
use crate::dataset::{
    inject_missing, load_csv, make_scenario, rank_attributes, randomize_column_names, realize_split, AuditSnapshot,
    Cell, ColumnKind, ColumnRole, ColumnSpec, IncrementalScenario, LoadOptions, ScenarioManifest, Split, SplitSpec,
    Table, View,
};
use crate::encoder::{
    train_direct, train_model, train_original, BackboneConfig, DirectModel, ExtensionInit, OriginalModel, TrainConfig,
};
use crate::error::{Result, TabiiError};
use crate::mine::{probe_model, MineConfig, ProbeReport, ProbedModel, Which};
use crate::placeholders::PretrainedBase;
use crate::rng::rng_for;
use crate::synthetic;

pub const DEFAULT_SEEDS: usize = 4;

/// Where rows come from. Synthetic names follow [`synthetic::by_name`] and are
/// regenerated per seed; a CSV table is fixed and only the split varies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic {
        name: String,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        target: Option<String>,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            name: "informative".into(),
        }
    }
}

impl DataSource {
    /// Short label used in tables.
    pub fn label(&self) -> String {
        match self {
            DataSource::Synthetic { name } => name.clone(),
            DataSource::Csv { path, .. } => path
                .file_stem()
                .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned()),
        }
    }

    /// The table for `seed` and its default incremental columns (empty for CSV).
    pub fn load(&self, seed: u64) -> Result<(Table, Vec<String>)> {
        match self {
            DataSource::Synthetic { name } => {
                let d = synthetic::by_name(name, seed)?;
                Ok((d.table, d.incremental))
            }
            DataSource::Csv { path, target } => {
                let t = load_csv(
                    path,
                    &LoadOptions {
                        schema: None,
                        target: target.as_deref(),
                    },
                )?;
                Ok((t, Vec::new()))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Discard,
    Direct,
    Tabii,
    /// Supervised training on all columns with labels.
    Optimal,
    /// Adapted model without sample condensation, used by the probes.
    PlaceholderOnly,
    Ablation(Ablation),
}

impl Method {
    fn is_adapted(self) -> bool {
        matches!(self, Method::Tabii | Method::PlaceholderOnly | Method::Ablation(_))
    }

    fn components(self) -> Option<Components> {
        match self {
            Method::Tabii => Some(Components::default()),
            Method::PlaceholderOnly => Some(Components {
                condense: CondenseMode::Bypass,
                ..Components::default()
            }),
            Method::Ablation(a) => Some(ablation_components(a)),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Discard => f.write_str("discard"),
            Method::Direct => f.write_str("direct"),
            Method::Tabii => f.write_str("tabii"),
            Method::Optimal => f.write_str("optimal"),
            Method::PlaceholderOnly => f.write_str("placeholder_only"),
            Method::Ablation(a) => write!(f, "ablation:{}", a.name()),
        }
    }
}

impl FromStr for Method {
    type Err = TabiiError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "discard" => Method::Discard,
            "direct" => Method::Direct,
            "tabii" => Method::Tabii,
            "optimal" => Method::Optimal,
            "placeholder_only" => Method::PlaceholderOnly,
            _ => match s.strip_prefix("ablation:") {
                Some(flag) => Method::Ablation(Ablation::parse(flag)?),
                None => return Err(TabiiError::Config(format!("unknown method `{s}`"))),
            },
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Incremental column names; empty means the data source's default.
    pub incremental: Vec<String>,
    pub method: Method,
    pub seeds: usize,
    pub first_seed: u64,
    /// Split fractions; the seed field is replaced by each run seed.
    pub split: SplitSpec,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub direct_init: ExtensionInit,
    pub adaptation: AdaptationConfig,
    pub mine: MineConfig,
    /// Also train the supervised upper bound to report comparative performance.
    pub with_optimal: bool,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let backbone = BackboneConfig {
            embed_dim: 16,
            layers: 2,
            heads: 2,
            ff_mult: 2,
            dropout: 0.1,
        };
        let mut adaptation = AdaptationConfig::default();
        adaptation.base.heads = backbone.heads;
        ExperimentConfig {
            data: DataSource::default(),
            incremental: Vec::new(),
            method: Method::Tabii,
            seeds: DEFAULT_SEEDS,
            first_seed: 0,
            split: SplitSpec::default(),
            backbone,
            train: TrainConfig {
                max_epochs: 40,
                batch_size: 64,
                lr: 2e-3,
                patience: 8,
            },
            direct_init: ExtensionInit::default(),
            adaptation,
            mine: MineConfig::default(),
            with_optimal: true,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(TabiiError::Config("seeds must be at least 1".into()));
        }
        self.backbone.validate()?;
        self.adaptation.validate()?;
        self.mine.validate()?;
        if self.train.max_epochs == 0 || self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(TabiiError::Config("training epochs, batch size and lr must be positive".into()));
        }
        if let DataSource::Csv { path, .. } = &self.data {
            if self.incremental.is_empty() {
                return Err(TabiiError::Config(format!(
                    "no incremental columns named for {}",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.first_seed + i).collect()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// The seed's table and its incremental column names.
    pub fn table_for(&self, seed: u64) -> Result<(Table, Vec<String>)> {
        let (table, default) = self.data.load(seed)?;
        let names = if self.incremental.is_empty() {
            default
        } else {
            self.incremental.clone()
        };
        if names.is_empty() {
            return Err(TabiiError::Config("no incremental columns".into()));
        }
        Ok((table, names))
    }

    pub fn split_for(&self, seed: u64) -> SplitSpec {
        SplitSpec {
            seed,
            ..self.split.clone()
        }
    }
}

/// Trained models and TestFromTest predictions for one seed of one scenario.
pub struct SeedRun {
    pub seed: u64,
    pub scenario: IncrementalScenario,
    original: Option<OriginalModel>,
    base: Option<PretrainedBase>,
    direct: Option<DirectModel>,
    optimal: Option<OriginalModel>,
    adapted: BTreeMap<Method, AdaptedModel>,
    predictions: BTreeMap<Method, Vec<usize>>,
    scores: BTreeMap<Method, f64>,
    pre_scoring: Option<AuditSnapshot>,
}

impl SeedRun {
    pub fn new(scenario: IncrementalScenario, seed: u64) -> Self {
        SeedRun {
            seed,
            scenario,
            original: None,
            base: None,
            direct: None,
            optimal: None,
            adapted: BTreeMap::new(),
            predictions: BTreeMap::new(),
            scores: BTreeMap::new(),
            pre_scoring: None,
        }
    }

    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let (table, names) = cfg.table_for(seed)?;
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        Ok(SeedRun::new(make_scenario(&table, &refs, &cfg.split_for(seed))?, seed))
    }

    fn ensure_original(&mut self, cfg: &ExperimentConfig) -> Result<()> {
        if self.original.is_none() {
            self.original = Some(train_original(&self.scenario, &cfg.backbone, &cfg.train, self.seed)?.0);
        }
        Ok(())
    }

    pub fn original(&self) -> Option<&OriginalModel> {
        self.original.as_ref()
    }

    pub fn direct(&self) -> Option<&DirectModel> {
        self.direct.as_ref()
    }

    pub fn adapted(&self, method: Method) -> Option<&AdaptedModel> {
        self.adapted.get(&method)
    }

    /// Train `method` (reusing anything already trained for this seed) and
    /// record its TestFromTest predictions. Must precede [`SeedRun::score`].
    pub fn fit(&mut self, cfg: &ExperimentConfig, method: Method) -> Result<()> {
        if self.pre_scoring.is_some() {
            return Err(TabiiError::InvalidArgument("seed already scored".into()));
        }
        if self.predictions.contains_key(&method) {
            return Ok(());
        }
        let test_inf = self.scenario.encode_split(Split::TestFromTest, View::Inference);
        let pred = match method {
            Method::Discard => {
                self.ensure_original(cfg)?;
                let test = self.scenario.encode_split(Split::TestFromTest, View::Train);
                self.original.as_ref().expect("trained").predict(&test)?
            }
            Method::Direct => {
                let (m, _) = train_direct(&self.scenario, &cfg.backbone, &cfg.train, cfg.direct_init, self.seed)?;
                let p = m.predict(&test_inf)?;
                self.direct = Some(m);
                p
            }
            Method::Optimal => {
                let (m, _) = train_model(&self.scenario, View::Inference, &cfg.backbone, &cfg.train, self.seed)?;
                let p = m.predict(&test_inf)?;
                self.optimal = Some(m);
                p
            }
            _ => {
                let acfg = AdaptationConfig {
                    components: method.components().expect("adapted method"),
                    ..cfg.adaptation.clone()
                };
                self.ensure_original(cfg)?;
                let original = self.original.as_ref().expect("trained");
                let needs_base = acfg.components.adapter == AdapterMode::Trainable;
                if needs_base && self.base.is_none() {
                    self.base = Some(prepare_base(&self.scenario, original, &acfg, self.seed)?);
                }
                let base = if needs_base { self.base.as_ref() } else { None };
                let (m, _) = adapt_with_base(&self.scenario, original, base, &acfg, self.seed)?;
                let p = m.predict(&test_inf)?;
                self.adapted.insert(method, m);
                p
            }
        };
        debug_assert!(method.is_adapted() || !self.adapted.contains_key(&method));
        self.predictions.insert(method, pred);
        Ok(())
    }

    /// Score every fitted method. The audit is snapshotted first.
    pub fn score(&mut self) -> Result<&BTreeMap<Method, f64>> {
        if self.pre_scoring.is_none() {
            self.pre_scoring = Some(self.scenario.audit().snapshot());
            for (m, p) in &self.predictions {
                self.scores.insert(*m, self.scenario.score(p)?);
            }
        }
        Ok(&self.scores)
    }

    pub fn audit_before_scoring(&self) -> Option<&AuditSnapshot> {
        self.pre_scoring.as_ref()
    }

    /// Probe a fitted family. Only allowed after scoring.
    pub fn probe(&self, cfg: &ExperimentConfig, method: Method, which: Which) -> Result<ProbeReport> {
        if self.pre_scoring.is_none() {
            return Err(TabiiError::InvalidArgument("probe before scoring".into()));
        }
        let model = match method {
            Method::Discard => ProbedModel::FtTrans(self.original.as_ref().ok_or_else(|| untrained(method))?),
            Method::Direct => ProbedModel::FtTransStar(self.direct.as_ref().ok_or_else(|| untrained(method))?),
            Method::PlaceholderOnly => {
                ProbedModel::Placeholder(self.adapted.get(&method).ok_or_else(|| untrained(method))?)
            }
            Method::Tabii => ProbedModel::Tabii(self.adapted.get(&method).ok_or_else(|| untrained(method))?),
            _ => return Err(TabiiError::InvalidArgument(format!("no probe for {method}"))),
        };
        probe_model(model, &self.scenario, which, &cfg.mine, self.seed)
    }
}

fn untrained(m: Method) -> TabiiError {
    TabiiError::Untrained(m.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimal_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparative: Option<f64>,
    pub audit_before_scoring: AuditSnapshot,
    pub manifest: ScenarioManifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub dataset: String,
    pub seeds: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
    /// Mean over seeds of accuracy divided by the supervised upper bound.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparative: Option<f64>,
    pub config: ExperimentConfig,
    /// Kept out of the result file so reruns stay byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Sample mean and standard deviation; the deviation of one value is 0.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-seed transform applied to the loaded table and incremental names.
pub type TableTransform<'a> = dyn Fn(&Table, &[String], u64) -> Result<(Table, Vec<String>)> + 'a;

/// Fit `methods` (plus the upper bound when configured) on every seed and
/// collect one result per method, in the given order.
pub fn run_methods(cfg: &ExperimentConfig, methods: &[Method]) -> Result<Vec<RunResult>> {
    run_with(cfg, methods, &|t, n, _| Ok((t.clone(), n.to_vec())))
}

pub fn run_with(cfg: &ExperimentConfig, methods: &[Method], transform: &TableTransform) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    if methods.is_empty() {
        return Err(TabiiError::Config("no methods requested".into()));
    }
    let start = Instant::now();
    let mut per_method: Vec<Vec<SeedResult>> = vec![Vec::new(); methods.len()];
    for seed in cfg.seed_list() {
        let (table, names) = cfg.table_for(seed)?;
        let (table, names) = transform(&table, &names, seed)?;
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let scenario = make_scenario(&table, &refs, &cfg.split_for(seed))?;
        let mut run = SeedRun::new(scenario, seed);
        for &m in methods {
            run.fit(cfg, m)?;
        }
        if cfg.with_optimal {
            run.fit(cfg, Method::Optimal)?;
        }
        let scores = run.score()?.clone();
        let optimal = scores.get(&Method::Optimal).copied();
        let audit = run.audit_before_scoring().cloned().unwrap_or_default();
        let manifest = run.scenario.manifest();
        for (k, m) in methods.iter().enumerate() {
            let acc = scores[m];
            per_method[k].push(SeedResult {
                seed,
                accuracy: acc,
                optimal_accuracy: optimal,
                comparative: optimal.filter(|o| *o > 0.0).map(|o| acc / o),
                audit_before_scoring: audit.clone(),
                manifest: manifest.clone(),
            });
        }
    }
    let wall = start.elapsed().as_secs_f64();
    Ok(methods
        .iter()
        .zip(per_method)
        .map(|(&m, seeds)| {
            let accs: Vec<f64> = seeds.iter().map(|s| s.accuracy).collect();
            let (mean, std) = mean_std(&accs);
            let comps: Option<Vec<f64>> = seeds.iter().map(|s| s.comparative).collect();
            RunResult {
                method: m,
                dataset: cfg.data.label(),
                comparative: comps.map(|c| mean_std(&c).0),
                seeds,
                mean,
                std,
                config: ExperimentConfig {
                    method: m,
                    ..cfg.clone()
                },
                wall_time_s: wall,
            }
        })
        .collect())
}

/// Run `cfg.method` over the configured seeds.
pub fn run(cfg: &ExperimentConfig) -> Result<RunResult> {
    Ok(run_methods(cfg, &[cfg.method])?.remove(0))
}

/// Run the adapted model with one component removed.
pub fn ablate(cfg: &ExperimentConfig, drop: Ablation) -> Result<RunResult> {
    run(&ExperimentConfig {
        method: Method::Ablation(drop),
        ..cfg.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMode {
    ImportanceTiers,
    CountTiers,
}

impl FromStr for StudyMode {
    type Err = TabiiError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "importance" | "importance_tiers" => Ok(StudyMode::ImportanceTiers),
            "count" | "count_tiers" => Ok(StudyMode::CountTiers),
            _ => Err(TabiiError::Config(format!("unknown study mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierResult {
    pub tier: String,
    pub columns: Vec<String>,
    pub result: RunResult,
}

/// Candidate columns for count tiers: few = 1, moderate = half, many = all,
/// each a prefix of the next.
pub fn count_tiers(candidates: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    if candidates.len() < 6 {
        return Err(TabiiError::Config(format!(
            "count tiers need at least 6 candidate columns, got {}",
            candidates.len()
        )));
    }
    let half = candidates.len() / 2;
    Ok(vec![
        ("few".into(), candidates[..1].to_vec()),
        ("moderate".into(), candidates[..half].to_vec()),
        ("many".into(), candidates.to_vec()),
    ])
}

/// Split candidates ordered most to least important into thirds.
pub fn importance_tiers(ranked: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    if ranked.len() < 3 {
        return Err(TabiiError::Config("importance tiers need at least 3 candidate columns".into()));
    }
    let n = ranked.len();
    let (a, b) = (n.div_ceil(3), n - n / 3);
    Ok(vec![
        ("unimportant".into(), ranked[b..].to_vec()),
        ("moderate".into(), ranked[a..b].to_vec()),
        ("very_important".into(), ranked[..a].to_vec()),
    ])
}

/// Rank the candidate columns by permutation importance under a supervised
/// model on all columns (first seed), most important first.
pub fn rank_candidates(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let seed = cfg.first_seed;
    let (table, names) = cfg.table_for(seed)?;
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let scenario = make_scenario(&table, &refs, &cfg.split_for(seed))?;
    let (model, _) = train_model(&scenario, View::Inference, &cfg.backbone, &cfg.train, seed)?;
    let ranked = rank_attributes(&scenario, &model, 3, seed)?;
    let cand: BTreeSet<&String> = names.iter().collect();
    Ok(ranked.into_iter().map(|(n, _)| n).filter(|n| cand.contains(n)).collect())
}

/// Run the adapted model once per tier, keeping only that tier's candidate
/// columns in the table.
pub fn attribute_study(cfg: &ExperimentConfig, mode: StudyMode) -> Result<Vec<TierResult>> {
    cfg.validate()?;
    let tiers = match mode {
        StudyMode::CountTiers => count_tiers(&cfg.table_for(cfg.first_seed)?.1)?,
        StudyMode::ImportanceTiers => importance_tiers(&rank_candidates(cfg)?)?,
    };
    let method = match cfg.method {
        Method::Discard | Method::Optimal => Method::Tabii,
        m => m,
    };
    tiers
        .into_iter()
        .map(|(tier, columns)| {
            let keep = columns.clone();
            let transform = move |t: &Table, names: &[String], _seed: u64| {
                let dropped: BTreeSet<&String> = names.iter().filter(|n| !keep.contains(n)).collect();
                let cols: Vec<&str> = t
                    .schema()
                    .iter()
                    .map(|c| c.name.as_str())
                    .filter(|n| !dropped.iter().any(|d| d.as_str() == *n))
                    .collect();
                Ok((t.select_columns(&cols)?, keep.clone()))
            };
            let result = run_with(cfg, &[method], &transform)?.remove(0);
            Ok(TierResult { tier, columns, result })
        })
        .collect()
}

pub const PLACEHOLDER_FACTORS: [f64; 4] = [1.0, 1.25, 1.5, 2.0];
pub const MISSING_RATES: [f64; 3] = [0.5, 0.75, 0.9];

/// Append `round((factor − 1)·k)` all-missing numeric columns as extra
/// incremental slots, where `k` is the number of incremental columns.
pub fn add_blank_columns(table: &Table, incremental: &[String], factor: f64) -> Result<(Table, Vec<String>)> {
    if factor < 1.0 {
        return Err(TabiiError::InvalidArgument(format!("placeholder factor {factor} below 1")));
    }
    let extra = ((factor - 1.0) * incremental.len() as f64).round() as usize;
    let mut schema = table.schema().to_vec();
    let t = table.target_index();
    let target = schema.remove(t);
    let mut names = incremental.to_vec();
    for k in 0..extra {
        let mut name = format!("blank{}", k + 1);
        while schema.iter().any(|c| c.name == name) {
            name.push('_');
        }
        schema.push(ColumnSpec::new(name.clone(), ColumnKind::Numeric, ColumnRole::Original));
        names.push(name);
    }
    schema.push(target);
    let rows = table
        .rows()
        .iter()
        .map(|r| {
            let mut out: Vec<Cell> = r.iter().enumerate().filter(|(j, _)| *j != t).map(|(_, c)| c.clone()).collect();
            out.extend(std::iter::repeat_n(Cell::Missing, extra));
            out.push(r[t].clone());
            out
        })
        .collect();
    Ok((Table::new(schema, rows)?, names))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    /// Train-split mean (numeric) or most frequent category.
    Mean,
    /// Uniform within the observed train range, or a uniformly drawn observed category.
    Random,
}

/// Fill missing feature cells from statistics of the `train` rows.
pub fn impute(table: &Table, train: &[usize], mode: Imputation, seed: u64) -> Result<Table> {
    let t = table.target_index();
    let mut rng = rng_for(seed, "impute");
    let fills: Vec<Option<Box<dyn Fn(&mut crate::rng::Rng) -> Cell>>> = table
        .schema()
        .iter()
        .enumerate()
        .map(|(j, spec)| -> Option<Box<dyn Fn(&mut crate::rng::Rng) -> Cell>> {
            if j == t {
                return None;
            }
            match spec.kind {
                ColumnKind::Numeric => {
                    let vals: Vec<f64> = train
                        .iter()
                        .filter_map(|&i| match table.rows()[i][j] {
                            Cell::Num(v) => Some(v),
                            _ => None,
                        })
                        .collect();
                    if vals.is_empty() {
                        return None;
                    }
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    Some(match mode {
                        Imputation::Mean => Box::new(move |_| Cell::Num(mean)),
                        Imputation::Random => Box::new(move |r| {
                            Cell::Num(if hi > lo { r.random_range(lo..=hi) } else { lo })
                        }),
                    })
                }
                ColumnKind::Categorical => {
                    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
                    for &i in train {
                        if let Cell::Cat(s) = &table.rows()[i][j] {
                            *counts.entry(s.clone()).or_default() += 1;
                        }
                    }
                    if counts.is_empty() {
                        return None;
                    }
                    let cats: Vec<String> = counts.keys().cloned().collect();
                    let mode_cat = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))?.0.clone();
                    Some(match mode {
                        Imputation::Mean => Box::new(move |_| Cell::Cat(mode_cat.clone())),
                        Imputation::Random => Box::new(move |r| Cell::Cat(cats[r.random_range(0..cats.len())].clone())),
                    })
                }
            }
        })
        .collect();
    let rows = table
        .rows()
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(j, c)| match (c, &fills[j]) {
                    (Cell::Missing, Some(f)) => f(&mut rng),
                    _ => c.clone(),
                })
                .collect()
        })
        .collect();
    Table::new(table.schema().to_vec(), rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaceholderRow {
    pub factor: f64,
    pub result: RunResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MissingRow {
    pub rate: f64,
    pub tabii: RunResult,
    pub mean_imputation: RunResult,
    pub random_imputation: RunResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StressReport {
    pub full: RunResult,
    pub placeholder: Vec<PlaceholderRow>,
    pub missing: Vec<MissingRow>,
    pub randomized_names: RunResult,
    pub test_only: RunResult,
}

fn tabii_cfg(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        method: Method::Tabii,
        with_optimal: false,
        ..cfg.clone()
    }
}

pub fn placeholder_stress(cfg: &ExperimentConfig, factor: f64) -> Result<RunResult> {
    let cfg = tabii_cfg(cfg);
    let tf = move |t: &Table, n: &[String], _s: u64| add_blank_columns(t, n, factor);
    Ok(run_with(&cfg, &[Method::Tabii], &tf)?.remove(0))
}

/// The adapted model on a table with `rate` of feature cells missing, and the
/// same pipeline on that table after imputation.
pub fn missing_stress(cfg: &ExperimentConfig, rate: f64) -> Result<MissingRow> {
    let cfg = tabii_cfg(cfg);
    let holed = move |t: &Table, n: &[String], s: u64| Ok((inject_missing(t, rate, s)?, n.to_vec()));
    let tabii = run_with(&cfg, &[Method::Tabii], &holed)?.remove(0);
    let split = cfg.split.clone();
    let filled = |mode: Imputation| {
        let split = split.clone();
        move |t: &Table, n: &[String], s: u64| {
            let holed = inject_missing(t, rate, s)?;
            let train = realize_split(holed.n_rows(), &SplitSpec { seed: s, ..split.clone() })?.train;
            Ok((impute(&holed, &train, mode, s)?, n.to_vec()))
        }
    };
    let mean_imputation = run_with(&cfg, &[Method::Tabii], &filled(Imputation::Mean))?.remove(0);
    let random_imputation = run_with(&cfg, &[Method::Tabii], &filled(Imputation::Random))?.remove(0);
    Ok(MissingRow {
        rate,
        tabii,
        mean_imputation,
        random_imputation,
    })
}

/// Replace every feature name with a random string before adaptation.
pub fn randomized_names(cfg: &ExperimentConfig) -> Result<RunResult> {
    let cfg = tabii_cfg(cfg);
    let tf = |t: &Table, n: &[String], s: u64| {
        let renamed = randomize_column_names(t, s)?;
        let names = n
            .iter()
            .map(|old| t.column_index(old).map(|j| renamed.schema()[j].name.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok((renamed, names))
    };
    Ok(run_with(&cfg, &[Method::Tabii], &tf)?.remove(0))
}

/// Adaptation without train-split rows: pseudo-labels on inference rows only.
pub fn test_only(cfg: &ExperimentConfig) -> Result<RunResult> {
    let mut cfg = tabii_cfg(cfg);
    cfg.adaptation.test_only = true;
    run(&cfg)
}

pub fn stress_suite(cfg: &ExperimentConfig) -> Result<StressReport> {
    let full = run(&tabii_cfg(cfg))?;
    let placeholder = PLACEHOLDER_FACTORS
        .iter()
        .map(|&factor| {
            let result = if factor == 1.0 {
                full.clone()
            } else {
                placeholder_stress(cfg, factor)?
            };
            Ok(PlaceholderRow { factor, result })
        })
        .collect::<Result<_>>()?;
    let missing = MISSING_RATES
        .iter()
        .map(|&r| missing_stress(cfg, r))
        .collect::<Result<_>>()?;
    Ok(StressReport {
        placeholder,
        missing,
        randomized_names: randomized_names(cfg)?,
        test_only: test_only(cfg)?,
        full,
    })
}

/// Families compared by the probes, in report order.
pub const PROBE_METHODS: [Method; 4] = [Method::Direct, Method::Discard, Method::PlaceholderOnly, Method::Tabii];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedProbes {
    pub seed: u64,
    pub accuracy: BTreeMap<Method, f64>,
    pub probes: Vec<ProbeReport>,
}

impl SeedProbes {
    pub fn value(&self, method: Method, which: Which) -> Option<f64> {
        let variant = match method {
            Method::Discard => crate::mine::ProbeVariant::FtTrans,
            Method::Direct => crate::mine::ProbeVariant::FtTransStar,
            Method::PlaceholderOnly => crate::mine::ProbeVariant::Placeholder,
            Method::Tabii => crate::mine::ProbeVariant::Tabii,
            _ => return None,
        };
        self.probes
            .iter()
            .find(|p| p.variant == variant && p.which == which)
            .map(|p| p.value_nats)
    }
}

/// Probe one fitted and scored seed: four families × {I(Z;Y), I(X;Z)}.
pub fn probe_seed(cfg: &ExperimentConfig, run: &SeedRun) -> Result<Vec<ProbeReport>> {
    let mut out = Vec::with_capacity(8);
    for m in PROBE_METHODS {
        for which in [Which::IZy, Which::IXz] {
            out.push(run.probe(cfg, m, which)?);
        }
    }
    Ok(out)
}

/// Train the four probed families per seed, score them, then probe.
pub fn mi_report(cfg: &ExperimentConfig) -> Result<Vec<SeedProbes>> {
    cfg.validate()?;
    cfg.seed_list()
        .into_iter()
        .map(|seed| {
            let mut run = SeedRun::from_config(cfg, seed)?;
            for m in PROBE_METHODS {
                run.fit(cfg, m)?;
            }
            let accuracy = run.score()?.clone();
            Ok(SeedProbes {
                seed,
                accuracy,
                probes: probe_seed(cfg, &run)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub method: String,
    pub mean_rank: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub datasets: Vec<String>,
    pub rows: Vec<RankRow>,
}

/// Rank methods per dataset (1 = highest accuracy, ties share the average
/// rank), then report each method's mean rank and sample deviation. Rows keep
/// the input order.
pub fn rank(methods: &[String], datasets: &[String], acc: &BTreeMap<(String, String), f64>) -> Result<RankTable> {
    if methods.is_empty() || datasets.is_empty() {
        return Err(TabiiError::Empty("rank matrix".into()));
    }
    let mut ranks: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
    for d in datasets {
        let col = methods
            .iter()
            .map(|m| {
                acc.get(&(m.clone(), d.clone()))
                    .copied()
                    .ok_or_else(|| TabiiError::InvalidArgument(format!("missing cell ({m}, {d})")))
            })
            .collect::<Result<Vec<f64>>>()?;
        for (i, &v) in col.iter().enumerate() {
            let higher = col.iter().filter(|&&w| w > v).count() as f64;
            let ties = col.iter().filter(|&&w| w == v).count() as f64;
            ranks[i].push(higher + (ties + 1.0) / 2.0);
        }
    }
    Ok(RankTable {
        datasets: datasets.to_vec(),
        rows: methods
            .iter()
            .zip(&ranks)
            .map(|(m, r)| {
                let (mean_rank, std) = mean_std(r);
                RankRow {
                    method: m.clone(),
                    mean_rank,
                    std,
                }
            })
            .collect(),
    })
}

/// Method × dataset accuracy table with a trailing `Rank(Std)` column.
pub fn markdown_table(table: &RankTable, acc: &BTreeMap<(String, String), f64>) -> String {
    let mut s = String::from("| Method |");
    for d in &table.datasets {
        s.push_str(&format!(" {d} |"));
    }
    s.push_str(" Rank(Std) |\n|---|");
    s.push_str(&"---|".repeat(table.datasets.len() + 1));
    s.push('\n');
    for row in &table.rows {
        s.push_str(&format!("| {} |", row.method));
        for d in &table.datasets {
            let v = acc.get(&(row.method.clone(), d.clone())).copied().unwrap_or(f64::NAN);
            s.push_str(&format!(" {v:.3} |"));
        }
        s.push_str(&format!(" {:.2}({:.2}) |\n", row.mean_rank, row.std));
    }
    s
}

/// Summary of results: mean ± std and comparative performance per method.
pub fn results_markdown(results: &[RunResult]) -> String {
    let mut s = String::from("| Method | Dataset | Accuracy | Comparative |\n|---|---|---|---|\n");
    for r in results {
        let comp = r.comparative.map_or_else(|| "-".to_string(), |c| format!("{c:.3}"));
        s.push_str(&format!(
            "| {} | {} | {:.3} ± {:.3} | {comp} |\n",
            r.method, r.dataset, r.mean, r.std
        ));
    }
    s
}

/// Write `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| TabiiError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| TabiiError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| TabiiError::io(path, e))
}

/// File stem for a result: method and dataset plus a config fingerprint prefix.
pub fn result_stem(r: &RunResult) -> String {
    let method = r.method.to_string().replace(':', "-");
    format!("{method}__{}__{}", r.dataset.replace([':', '/'], "-"), &r.config.fingerprint()[..12])
}

/// Write `<stem>.json` and `<stem>.timing.json` under `dir`.
pub fn save_result(dir: &Path, r: &RunResult) -> Result<PathBuf> {
    let stem = result_stem(r);
    let path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(r)?;
    text.push('\n');
    write_atomic(&path, text.as_bytes())?;
    let timing = serde_json::json!({ "wall_time_s": r.wall_time_s });
    write_atomic(&dir.join(format!("{stem}.timing.json")), timing.to_string().as_bytes())?;
    Ok(path)
}

/// Load every result file (`<stem>.json` as written by [`save_result`]) in
/// `dir`, sorted by name. Other JSON files are ignored.
pub fn load_results(dir: &Path) -> Result<Vec<RunResult>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| TabiiError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.ends_with(".json") && name.contains("__") && !name.ends_with(".timing.json")
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).map_err(|e| TabiiError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| TabiiError::Format {
                path: p.clone(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Accuracy matrix from results: method × dataset → mean accuracy. Methods
/// and datasets keep first-seen order.
pub fn accuracy_matrix(results: &[RunResult]) -> (Vec<String>, Vec<String>, BTreeMap<(String, String), f64>) {
    let mut methods = Vec::new();
    let mut datasets = Vec::new();
    let mut acc = BTreeMap::new();
    for r in results {
        let m = r.method.to_string();
        if !methods.contains(&m) {
            methods.push(m.clone());
        }
        if !datasets.contains(&r.dataset) {
            datasets.push(r.dataset.clone());
        }
        acc.insert((m, r.dataset.clone()), r.mean);
    }
    (methods, datasets, acc)
}
