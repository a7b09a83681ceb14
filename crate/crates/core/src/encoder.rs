//! Tabular backbone: a per-column feature tokenizer feeding a pre-norm
//! transformer with a CLS readout, the supervised training loop shared by all
//! fixed-schema classifiers, and the linear-embedding direct variant.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Classifier, ColumnKind, ColumnStats, EncodedBatch, IncrementalScenario, Split, View};
use crate::error::{Result, TabiiError};
use crate::rng::{rng_for, rng_from_seed};
use crate::tensor::nn::{first_token_rows, Linear, TransformerStack};
use crate::tensor::{checkpoint, Adam, Graph, Matrix, ParamId, ParamStore, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            embed_dim: 32,
            layers: 3,
            heads: 4,
            ff_mult: 2,
            dropout: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(TabiiError::Config(format!(
                "backbone needs layers >= 1 and embed_dim divisible by heads (got {self:?})"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TabiiError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            patience: 10,
        }
    }
}

/// What the tokenizer needs to know about a column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub kind: ColumnKind,
    /// Category indices including UNK; 1 for numeric columns.
    pub cardinality: usize,
}

pub fn column_infos(scenario: &IncrementalScenario, view: View) -> Vec<ColumnInfo> {
    scenario
        .column_specs(view)
        .iter()
        .zip(scenario.stats(view))
        .map(|(c, s)| ColumnInfo {
            kind: c.kind,
            cardinality: s.cardinality(),
        })
        .collect()
}

/// Hex SHA-256 over column names and kinds, in view order.
pub fn schema_fingerprint(scenario: &IncrementalScenario, view: View) -> String {
    let mut h = Sha256::new();
    for (c, s) in scenario.column_specs(view).iter().zip(scenario.stats(view)) {
        h.update(c.name.as_bytes());
        h.update([0u8]);
        h.update(match s {
            ColumnStats::Numeric { .. } => b"n".as_slice(),
            ColumnStats::Categorical { .. } => b"c".as_slice(),
        });
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Debug)]
enum ColumnTokens {
    Numeric { weight: ParamId, bias: ParamId, missing: ParamId },
    Categorical { table: ParamId },
}

/// Per-column token maps plus a CLS token.
#[derive(Clone, Debug)]
pub struct FeatureTokenizer {
    columns: Vec<ColumnTokens>,
    cls: ParamId,
    dim: usize,
}

impl FeatureTokenizer {
    /// Columns are named `{prefix}.col{j}`; a column's initialization depends
    /// only on `(seed, its name)`.
    pub fn new(store: &mut ParamStore, prefix: &str, columns: &[ColumnInfo], dim: usize, seed: u64) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let cls = store.add(
            format!("{prefix}.cls"),
            Matrix::uniform(1, dim, bound, &mut rng_for(seed, &format!("{prefix}.cls"))),
            true,
        )?;
        let mut tok = FeatureTokenizer {
            columns: Vec::new(),
            cls,
            dim,
        };
        for (j, c) in columns.iter().enumerate() {
            tok.push_column(store, &format!("{prefix}.col{j}"), *c, seed)?;
        }
        Ok(tok)
    }

    fn push_column(&mut self, store: &mut ParamStore, name: &str, info: ColumnInfo, seed: u64) -> Result<()> {
        let mut rng = rng_for(seed, name);
        let bound = 1.0 / (self.dim as f64).sqrt();
        let d = self.dim;
        let t = match info.kind {
            ColumnKind::Numeric => ColumnTokens::Numeric {
                weight: store.add(format!("{name}.w"), Matrix::uniform(1, d, bound, &mut rng), true)?,
                bias: store.add(format!("{name}.b"), Matrix::uniform(1, d, bound, &mut rng), true)?,
                missing: store.add(format!("{name}.m"), Matrix::uniform(1, d, bound, &mut rng), true)?,
            },
            ColumnKind::Categorical => ColumnTokens::Categorical {
                table: store.add(
                    format!("{name}.emb"),
                    Matrix::uniform(info.cardinality.max(1), d, bound, &mut rng),
                    true,
                )?,
            },
        };
        self.columns.push(t);
        Ok(())
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn seq_len(&self) -> usize {
        self.columns.len() + 1
    }

    /// Parameters of column `j`.
    pub fn column_params(&self, j: usize) -> Vec<ParamId> {
        match &self.columns[j] {
            ColumnTokens::Numeric { weight, bias, missing } => vec![*weight, *bias, *missing],
            ColumnTokens::Categorical { table } => vec![*table],
        }
    }

    pub fn cls(&self) -> ParamId {
        self.cls
    }

    /// Tokens of column `j` for every batch row, `n_rows×dim`.
    pub fn column_tokens(&self, g: &mut Graph, batch: &EncodedBatch, j: usize) -> Result<Var> {
        let n = batch.n_rows;
        let c = batch.n_cols;
        match &self.columns[j] {
            ColumnTokens::Numeric { weight, bias, missing } => {
                let vals = Matrix::column_vector((0..n).map(|i| batch.values[i * c + j]).collect());
                let miss =
                    Matrix::column_vector((0..n).map(|i| f64::from(u8::from(batch.missing[i * c + j]))).collect());
                let (w, b, m) = (g.param(*weight), g.param(*bias), g.param(*missing));
                let v = g.constant(vals)?;
                let t = g.matmul(v, w)?;
                let t = g.add_row(t, b)?;
                if miss.data().iter().any(|&x| x != 0.0) {
                    let mv = g.constant(miss)?;
                    let mt = g.matmul(mv, m)?;
                    g.add(t, mt)
                } else {
                    Ok(t)
                }
            }
            ColumnTokens::Categorical { table } => {
                let idx: Vec<usize> = (0..n).map(|i| batch.categories[i * c + j]).collect();
                let t = g.param(*table);
                g.gather(t, &idx)
            }
        }
    }

    /// Token sequences `[CLS, col_0, …]` stacked row-major: `(n·seq_len)×dim`.
    pub fn tokenize(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<Var> {
        if batch.n_cols != self.columns.len() {
            return Err(TabiiError::shape(
                "tokenize",
                format!("{} slots for a tokenizer of {} columns", batch.n_cols, self.columns.len()),
            ));
        }
        let mut parts = Vec::with_capacity(self.seq_len());
        let cls = g.param(self.cls);
        parts.push(g.gather(cls, &vec![0; batch.n_rows])?);
        for j in 0..self.columns.len() {
            parts.push(self.column_tokens(g, batch, j)?);
        }
        let wide = g.concat_cols(&parts)?;
        g.reshape(wide, batch.n_rows * self.seq_len(), self.dim)
    }
}

/// A model mapping encoded rows to per-class scores through a graph.
pub trait ScoreModel {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Per-class scores, `n_rows×n_classes`.
    fn scores(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<Var>;
    /// Representation read before the classification head.
    fn representation(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<Var>;
    fn n_cols(&self) -> usize;
}

const EVAL_CHUNK: usize = 256;

/// Evaluation-mode softmax probabilities, computed in chunks.
pub fn predict_proba(model: &dyn ScoreModel, batch: &EncodedBatch) -> Result<Matrix> {
    eval_rows(model, batch, |m, g, b| {
        let s = m.scores(g, b)?;
        g.softmax(s)
    })
}

/// Evaluation-mode representations, computed in chunks.
pub fn representations(model: &dyn ScoreModel, batch: &EncodedBatch) -> Result<Matrix> {
    eval_rows(model, batch, |m, g, b| m.representation(g, b))
}

fn eval_rows(
    model: &dyn ScoreModel,
    batch: &EncodedBatch,
    f: impl Fn(&dyn ScoreModel, &mut Graph, &EncodedBatch) -> Result<Var>,
) -> Result<Matrix> {
    if batch.n_cols != model.n_cols() {
        return Err(TabiiError::shape(
            "predict",
            format!("{} slots for a model of arity {}", batch.n_cols, model.n_cols()),
        ));
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(batch.n_rows);
    let idx: Vec<usize> = (0..batch.n_rows).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let sub = batch.select(chunk);
        let mut g = Graph::new(model.store());
        let out = f(model, &mut g, &sub)?;
        rows.extend(g.value(out).to_rows());
    }
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    Matrix::from_rows(&rows)
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let r = m.row(i);
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub final_train_loss: f64,
    pub train_accuracy: f64,
}

/// Minibatch cross-entropy training with Adam, early-stopped on validation
/// accuracy; the best parameters are restored at the end.
pub fn fit_supervised(
    model: &mut dyn ScoreModel,
    train: &EncodedBatch,
    train_labels: &[usize],
    val: &EncodedBatch,
    val_labels: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainReport> {
    if train.n_rows == 0 {
        return Err(TabiiError::Empty("training rows".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(TabiiError::Config("batch_size and max_epochs must be positive".into()));
    }
    let mut opt = Adam::with_lr(cfg.lr);
    let mut order_rng = rng_for(seed, "fit/order");
    let mut dropout_rng = rng_for(seed, "fit/dropout");
    let mut order: Vec<usize> = (0..train.n_rows).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut report = TrainReport::default();
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let sub = train.select(chunk);
            let targets: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let w = vec![1.0 / chunk.len() as f64; chunk.len()];
            let grads = {
                let mut g = Graph::training(model.store(), rng_from_seed(dropout_rng.random()));
                let s = model.scores(&mut g, &sub)?;
                let loss = g.cross_entropy(s, &targets, &w)?;
                loss_sum += g.value(loss).item() * chunk.len() as f64;
                g.backward(loss)?
            };
            model.store_mut().accumulate(&grads);
            opt.step(model.store_mut());
        }
        report.epochs_run = epoch + 1;
        report.final_train_loss = loss_sum / train.n_rows as f64;
        let val_acc = if val.n_rows > 0 {
            accuracy(&argmax_rows(&predict_proba(model, val)?), val_labels)
        } else {
            0.0
        };
        if best.as_ref().is_none_or(|(b, _, _)| val_acc > *b) {
            best = Some((val_acc, epoch, model.store().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((acc, epoch, store)) = best {
        *model.store_mut() = store;
        report.best_val_accuracy = acc;
        report.best_epoch = epoch;
    }
    report.train_accuracy = accuracy(&argmax_rows(&predict_proba(model, train)?), train_labels);
    Ok(report)
}

/// Feature-tokenizer transformer classifier over a fixed column set.
#[derive(Clone, Debug)]
pub struct OriginalModel {
    pub config: BackboneConfig,
    pub columns: Vec<ColumnInfo>,
    pub n_classes: usize,
    pub seed: u64,
    pub fingerprint: String,
    store: ParamStore,
    tokenizer: FeatureTokenizer,
    stack: TransformerStack,
    head: Linear,
    trained: bool,
}

/// Parameter name prefixes of the backbone, shared with models that embed it.
pub const TOKENIZER_PREFIX: &str = "enc.tok";
pub const STACK_PREFIX: &str = "enc.stack";
pub const HEAD_PREFIX: &str = "enc.head";

impl OriginalModel {
    pub fn new(columns: &[ColumnInfo], n_classes: usize, config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_classes == 0 {
            return Err(TabiiError::InvalidArgument("at least one class is required".into()));
        }
        let mut store = ParamStore::new();
        let tokenizer = FeatureTokenizer::new(&mut store, TOKENIZER_PREFIX, columns, config.embed_dim, seed)?;
        let stack = build_stack(&mut store, STACK_PREFIX, config, seed)?;
        let head = Linear::new(
            &mut store,
            HEAD_PREFIX,
            config.embed_dim,
            n_classes,
            true,
            &mut rng_for(seed, HEAD_PREFIX),
        )?;
        Ok(OriginalModel {
            config: config.clone(),
            columns: columns.to_vec(),
            n_classes,
            seed,
            fingerprint: String::new(),
            store,
            tokenizer,
            stack,
            head,
            trained: false,
        })
    }

    pub fn tokenizer(&self) -> &FeatureTokenizer {
        &self.tokenizer
    }

    pub fn stack(&self) -> &TransformerStack {
        &self.stack
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// CLS output of the final layer norm, `n×embed_dim`.
    pub fn encode(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<Var> {
        let tokens = self.tokenizer.tokenize(g, batch)?;
        encode_tokens(g, &self.stack, tokens, batch.n_rows, self.tokenizer.seq_len())
    }

    pub fn predict(&self, batch: &EncodedBatch) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(batch)?))
    }

    pub fn predict_proba(&self, batch: &EncodedBatch) -> Result<Matrix> {
        if !self.trained {
            return Err(TabiiError::Untrained("original model".into()));
        }
        predict_proba(self, batch)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| TabiiError::io(dir, e))?;
        checkpoint::save(&self.store, &dir.join("params.json"))?;
        let sidecar = ModelSidecar {
            model: "original".into(),
            fingerprint: self.fingerprint.clone(),
            config: self.config.clone(),
            columns: self.columns.clone(),
            n_classes: self.n_classes,
            seed: self.seed,
        };
        let p = dir.join("model.json");
        fs::write(&p, serde_json::to_string_pretty(&sidecar)?).map_err(|e| TabiiError::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("model.json");
        let text = fs::read_to_string(&p).map_err(|e| TabiiError::io(&p, e))?;
        let side: ModelSidecar = serde_json::from_str(&text).map_err(|e| TabiiError::Format {
            path: p.clone(),
            message: e.to_string(),
        })?;
        let mut m = OriginalModel::new(&side.columns, side.n_classes, &side.config, side.seed)?;
        checkpoint::load_into(&dir.join("params.json"), &mut m.store)?;
        m.fingerprint = side.fingerprint;
        m.trained = true;
        Ok(m)
    }
}

pub(crate) fn build_stack(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, seed: u64) -> Result<TransformerStack> {
    TransformerStack::new(
        store,
        prefix,
        cfg.embed_dim,
        cfg.layers,
        cfg.heads,
        cfg.ff_mult,
        cfg.dropout,
        &mut rng_for(seed, prefix),
    )
}

/// Run `stack` over stacked token sequences and read the first token per row.
pub(crate) fn encode_tokens(g: &mut Graph, stack: &TransformerStack, tokens: Var, n: usize, seq_len: usize) -> Result<Var> {
    let h = stack.forward(g, tokens, seq_len, None)?;
    g.gather(h, &first_token_rows(n, seq_len))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelSidecar {
    model: String,
    fingerprint: String,
    config: BackboneConfig,
    columns: Vec<ColumnInfo>,
    n_classes: usize,
    seed: u64,
}

impl ScoreModel for OriginalModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn scores(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<Var> {
        let t = self.encode(g, batch)?;
        self.head.forward(g, t)
    }

    fn representation(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<Var> {
        self.encode(g, batch)
    }

    fn n_cols(&self) -> usize {
        self.columns.len()
    }
}

impl Classifier for OriginalModel {
    fn predict_batch(&self, batch: &EncodedBatch) -> Result<Vec<usize>> {
        self.predict(batch)
    }
}

/// Train a backbone on the train split through `view`, early-stopping on the
/// validation split. Reads features and labels of Train and Val only.
pub fn train_model(
    scenario: &IncrementalScenario,
    view: View,
    backbone: &BackboneConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(OriginalModel, TrainReport)> {
    let columns = column_infos(scenario, view);
    let mut model = OriginalModel::new(&columns, scenario.n_classes(), backbone, derive_model_seed(seed, view))?;
    model.fingerprint = schema_fingerprint(scenario, view);
    let tr = scenario.encode_split(Split::Train, view);
    let va = scenario.encode_split(Split::Val, view);
    let report = fit_supervised(
        &mut model,
        &tr,
        &scenario.train_labels(),
        &va,
        &scenario.val_labels(),
        train,
        seed,
    )?;
    model.trained = true;
    Ok((model, report))
}

fn derive_model_seed(seed: u64, view: View) -> u64 {
    crate::rng::derive_seed(
        seed,
        match view {
            View::Train => "model/original",
            View::Inference => "model/full",
        },
    )
}

/// The discard-mode model: trained on the original columns only.
pub fn train_original(
    scenario: &IncrementalScenario,
    backbone: &BackboneConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(OriginalModel, TrainReport)> {
    train_model(scenario, View::Train, backbone, train, seed)
}

/// How the direct variant initializes input weights of slots unseen in training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtensionInit {
    /// Left at their random initialization; training rows are zero in these
    /// slots, so the weights never receive gradient.
    #[default]
    Random,
    Zero,
}

/// Linear-embedding backbone: one shared map from the raw concatenated row
/// (numeric values, one-hot categories) to `n_tokens` tokens, then the
/// transformer. The map is sized for the inference arity.
#[derive(Clone, Debug)]
pub struct DirectModel {
    pub config: BackboneConfig,
    pub columns: Vec<ColumnInfo>,
    pub n_train_cols: usize,
    pub n_classes: usize,
    pub n_tokens: usize,
    store: ParamStore,
    embed: Linear,
    cls: ParamId,
    stack: TransformerStack,
    head: Linear,
    trained: bool,
}

pub const DIRECT_TOKENS: usize = 4;

impl DirectModel {
    pub fn new(
        columns: &[ColumnInfo],
        n_train_cols: usize,
        n_classes: usize,
        config: &BackboneConfig,
        init: ExtensionInit,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if n_train_cols > columns.len() {
            return Err(TabiiError::shape("DirectModel::new", "training arity exceeds inference arity"));
        }
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let in_dim = raw_width(columns);
        let embed = Linear::new(&mut store, "direct.embed", in_dim, DIRECT_TOKENS * d, true, &mut rng_for(seed, "direct.embed"))?;
        if init == ExtensionInit::Zero {
            let start = raw_width(&columns[..n_train_cols]);
            let w = store.value_mut(embed.w);
            for r in start..in_dim {
                w.row_mut(r).fill(0.0);
            }
        }
        let cls = store.add(
            "direct.cls",
            Matrix::uniform(1, d, 1.0 / (d as f64).sqrt(), &mut rng_for(seed, "direct.cls")),
            true,
        )?;
        let stack = build_stack(&mut store, "direct.stack", config, seed)?;
        let head = Linear::new(&mut store, "direct.head", d, n_classes, true, &mut rng_for(seed, "direct.head"))?;
        Ok(DirectModel {
            config: config.clone(),
            columns: columns.to_vec(),
            n_train_cols,
            n_classes,
            n_tokens: DIRECT_TOKENS,
            store,
            embed,
            cls,
            stack,
            head,
            trained: false,
        })
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn predict(&self, batch: &EncodedBatch) -> Result<Vec<usize>> {
        if !self.trained {
            return Err(TabiiError::Untrained("direct model".into()));
        }
        Ok(argmax_rows(&predict_proba(self, batch)?))
    }

    fn encode(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<Var> {
        let d = self.config.embed_dim;
        let raw = g.constant(raw_matrix(batch, &self.columns))?;
        let toks = self.embed.forward(g, raw)?;
        let cls = g.param(self.cls);
        let cls = g.gather(cls, &vec![0; batch.n_rows])?;
        let wide = g.concat_cols(&[cls, toks])?;
        let seq = self.n_tokens + 1;
        let tokens = g.reshape(wide, batch.n_rows * seq, d)?;
        encode_tokens(g, &self.stack, tokens, batch.n_rows, seq)
    }
}

impl ScoreModel for DirectModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn scores(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<Var> {
        let t = self.encode(g, batch)?;
        self.head.forward(g, t)
    }

    fn representation(&self, g: &mut Graph, batch: &EncodedBatch) -> Result<Var> {
        self.encode(g, batch)
    }

    fn n_cols(&self) -> usize {
        self.columns.len()
    }
}

impl Classifier for DirectModel {
    fn predict_batch(&self, batch: &EncodedBatch) -> Result<Vec<usize>> {
        self.predict(batch)
    }
}

fn raw_width(columns: &[ColumnInfo]) -> usize {
    columns
        .iter()
        .map(|c| match c.kind {
            ColumnKind::Numeric => 1,
            ColumnKind::Categorical => c.cardinality,
        })
        .sum()
}

/// Raw concatenated input: numeric values (0 when missing) and one-hot
/// categories (all zero when missing).
pub fn raw_matrix(batch: &EncodedBatch, columns: &[ColumnInfo]) -> Matrix {
    let w = raw_width(columns);
    let mut m = Matrix::zeros(batch.n_rows, w);
    for i in 0..batch.n_rows {
        let row = m.row_mut(i);
        let mut off = 0;
        for (j, c) in columns.iter().enumerate() {
            let k = i * batch.n_cols + j;
            match c.kind {
                ColumnKind::Numeric => {
                    row[off] = batch.values[k];
                    off += 1;
                }
                ColumnKind::Categorical => {
                    if !batch.missing[k] {
                        row[off + batch.categories[k]] = 1.0;
                    }
                    off += c.cardinality;
                }
            }
        }
    }
    m
}

/// Append zero/UNK/missing slots so a train-view batch reaches `arity`.
pub fn zero_pad(batch: &EncodedBatch, arity: usize) -> Result<EncodedBatch> {
    if arity < batch.n_cols {
        return Err(TabiiError::shape(
            "zero_pad",
            format!("target arity {arity} below row arity {}", batch.n_cols),
        ));
    }
    let extra = arity - batch.n_cols;
    let mut out = EncodedBatch::empty(arity);
    for i in 0..batch.n_rows {
        let mut r = batch.row(i);
        r.values.extend(std::iter::repeat_n(0.0, extra));
        r.categories.extend(std::iter::repeat_n(crate::dataset::UNK, extra));
        r.missing.extend(std::iter::repeat_n(true, extra));
        out.push(&r);
    }
    Ok(out)
}

/// FT-Trans* baseline: train the linear-embedding model on zero-padded train
/// rows so its input map already spans the inference arity.
pub fn train_direct(
    scenario: &IncrementalScenario,
    backbone: &BackboneConfig,
    train: &TrainConfig,
    init: ExtensionInit,
    seed: u64,
) -> Result<(DirectModel, TrainReport)> {
    let columns = column_infos(scenario, View::Inference);
    let d = scenario.arity(View::Train);
    let mut model = DirectModel::new(
        &columns,
        d,
        scenario.n_classes(),
        backbone,
        init,
        crate::rng::derive_seed(seed, "model/direct"),
    )?;
    let arity = columns.len();
    let tr = zero_pad(&scenario.encode_split(Split::Train, View::Train), arity)?;
    let va = zero_pad(&scenario.encode_split(Split::Val, View::Train), arity)?;
    let report = fit_supervised(
        &mut model,
        &tr,
        &scenario.train_labels(),
        &va,
        &scenario.val_labels(),
        train,
        seed,
    )?;
    model.trained = true;
    Ok((model, report))
}
