//! The three representation paths concatenated before condensation: the
//! zero-padded tabular path `t`, the low-rank adapted base encoder `p`, and
//! the prompt embedding `l`.

use std::cell::Cell as StdCell;
use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{ColumnKind, EncodedBatch, IncrementalScenario};
use crate::encoder::ColumnInfo;
use crate::error::{Result, TabiiError};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::nn::{AttentionDeltas, Linear, LowRank, TransformerStack};
use crate::tensor::{Adam, Graph, Matrix, ParamId, ParamStore, Var};

pub use crate::encoder::zero_pad;

thread_local! {
    static PROVIDERS_BUILT: StdCell<usize> = const { StdCell::new(0) };
    static ADAPTERS_BUILT: StdCell<usize> = const { StdCell::new(0) };
}

/// Embedding providers and adapters constructed on this thread so far.
pub fn construction_counts() -> (usize, usize) {
    (PROVIDERS_BUILT.with(StdCell::get), ADAPTERS_BUILT.with(StdCell::get))
}

fn bump(counter: &'static std::thread::LocalKey<StdCell<usize>>) {
    counter.with(|c| c.set(c.get() + 1));
}

const SLOT_TARGET: &str = "{target}";
const SLOT_FEATURES: &str = "{feature description}";
const SLOT_INCREMENTAL: &str = "{incremental features}";

pub const DEFAULT_TEMPLATE: &str =
    "Classify {target} for a record described by {feature description}; columns added after training: {incremental features}.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(template: &str) -> Result<Self> {
        for slot in [SLOT_TARGET, SLOT_FEATURES, SLOT_INCREMENTAL] {
            let n = template.matches(slot).count();
            if n != 1 {
                return Err(TabiiError::Config(format!("prompt template must contain {slot} exactly once (found {n})")));
            }
        }
        Ok(PromptTemplate(template.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate(DEFAULT_TEMPLATE.to_string())
    }
}

pub fn render(template: &PromptTemplate, target: &str, originals: &[String], incrementals: &[String]) -> String {
    let inc = if incrementals.is_empty() {
        "none".to_string()
    } else {
        incrementals.join(", ")
    };
    template
        .0
        .replace(SLOT_TARGET, target)
        .replace(SLOT_FEATURES, &originals.join(", "))
        .replace(SLOT_INCREMENTAL, &inc)
}

/// One prompt per scenario, from its target, original and incremental names.
pub fn render_prompt(template: &PromptTemplate, scenario: &IncrementalScenario) -> String {
    render(
        template,
        scenario.target_name(),
        &scenario.original_names(),
        scenario.incremental_names(),
    )
}

/// Text to vector, deterministic per text with constant dimension.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
}

/// Hex SHA-256 of the UTF-8 text: the key of the embedding cache.
pub fn cache_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Bag-of-tokens hashed projection: every lowercase alphanumeric token maps
/// to a seeded Gaussian vector; the sum is unit-normalized.
#[derive(Clone, Debug)]
pub struct HashEmbeddingProvider {
    dim: usize,
    seed: u64,
}

impl HashEmbeddingProvider {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(TabiiError::InvalidArgument(format!("hash embedding dim {dim} below 8")));
        }
        bump(&PROVIDERS_BUILT);
        Ok(HashEmbeddingProvider { dim, seed })
    }
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let lower = text.to_lowercase();
        let mut tokens: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).collect();
        if tokens.is_empty() {
            tokens.push("");
        }
        let mut v = vec![0.0; self.dim];
        for tok in tokens {
            let mut rng = rng_for(self.seed, &format!("token/{tok}"));
            for x in v.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += z;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

/// One line of the embedding cache file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub dim: usize,
    pub vector: Vec<f64>,
}

/// Vectors looked up by content hash from a JSON Lines cache file.
#[derive(Clone, Debug)]
pub struct FileEmbeddingProvider {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
    path: PathBuf,
}

impl FileEmbeddingProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TabiiError::io(path, e))?;
        let fmt = |line: usize, message: String| TabiiError::Format {
            path: path.to_path_buf(),
            message: format!("line {line}: {message}"),
        };
        let mut dim = None;
        let mut entries = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheRecord = serde_json::from_str(line).map_err(|e| fmt(i + 1, e.to_string()))?;
            if rec.key.len() != 64 || !rec.key.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(fmt(i + 1, format!("key `{}` is not a hex SHA-256", rec.key)));
            }
            if rec.vector.len() != rec.dim || !rec.vector.iter().all(|x| x.is_finite()) {
                return Err(fmt(i + 1, "vector length differs from dim or is not finite".into()));
            }
            match dim {
                None => dim = Some(rec.dim),
                Some(d) if d != rec.dim => return Err(fmt(i + 1, format!("dim {} differs from {d}", rec.dim))),
                _ => {}
            }
            entries.insert(rec.key, rec.vector);
        }
        let dim = dim.ok_or_else(|| fmt(0, "empty cache".into()))?;
        bump(&PROVIDERS_BUILT);
        Ok(FileEmbeddingProvider {
            dim,
            entries,
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl EmbeddingProvider for FileEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let key = cache_key(text);
        self.entries.get(&key).cloned().ok_or(TabiiError::CacheMiss(key))
    }
}

/// Write `(text, vector)` pairs as a cache file; duplicate texts keep the first.
pub fn write_embedding_cache(path: &Path, items: &[(String, Vec<f64>)]) -> Result<()> {
    let mut out = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (text, v) in items {
        let key = cache_key(text);
        if !seen.insert(key.clone()) {
            continue;
        }
        let rec = CacheRecord {
            key,
            dim: v.len(),
            vector: v.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| TabiiError::io(path, e))?;
    f.write_all(&out).map_err(|e| TabiiError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseEncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_rate: f64,
    /// Rows used to estimate the Fisher diagonal.
    pub fisher_samples: usize,
}

impl Default for BaseEncoderConfig {
    fn default() -> Self {
        BaseEncoderConfig {
            dim: 32,
            layers: 1,
            heads: 4,
            ff_mult: 2,
            epochs: 10,
            batch_size: 64,
            lr: 2e-3,
            mask_rate: 0.3,
            fisher_samples: 64,
        }
    }
}

pub const BASE_PREFIX: &str = "base";

/// Column-agnostic set encoder. Each cell becomes one token: a fixed random
/// identity vector derived from the column name plus a shared value
/// embedding; tokens are mean-pooled after the transformer.
#[derive(Clone, Debug)]
pub struct BaseEncoder {
    pub dim: usize,
    value_w: ParamId,
    value_b: ParamId,
    missing: ParamId,
    category: ParamId,
    mask_token: ParamId,
    pub stack: TransformerStack,
    recon: Linear,
    id_seed: u64,
}

impl BaseEncoder {
    pub fn new(store: &mut ParamStore, cfg: &BaseEncoderConfig, seed: u64) -> Result<Self> {
        let d = cfg.dim;
        let mut rng = rng_for(seed, "base/embed");
        let bound = 1.0 / (d as f64).sqrt();
        let mut add = |name: &str, rng: &mut crate::rng::Rng| {
            store.add(format!("{BASE_PREFIX}.{name}"), Matrix::uniform(1, d, bound, rng), true)
        };
        let value_w = add("value_w", &mut rng)?;
        let value_b = add("value_b", &mut rng)?;
        let missing = add("missing", &mut rng)?;
        let category = add("category", &mut rng)?;
        let mask_token = add("mask", &mut rng)?;
        let stack = TransformerStack::new(
            store,
            &format!("{BASE_PREFIX}.stack"),
            d,
            cfg.layers,
            cfg.heads,
            cfg.ff_mult,
            0.0,
            &mut rng_for(seed, "base/stack"),
        )?;
        let recon = Linear::new(store, &format!("{BASE_PREFIX}.recon"), d, 1, true, &mut rng_for(seed, "base/recon"))?;
        Ok(BaseEncoder {
            dim: d,
            value_w,
            value_b,
            missing,
            category,
            mask_token,
            stack,
            recon,
            id_seed: derive_seed(seed, "base/identity"),
        })
    }

    /// Fixed identity vector of a column name.
    pub fn identity(&self, name: &str) -> Vec<f64> {
        let mut rng = rng_for(self.id_seed, &format!("column/{name}"));
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn category_vector(&self, name: &str, index: usize) -> Vec<f64> {
        let mut rng = rng_for(self.id_seed, &format!("category/{name}/{index}"));
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Cell tokens `(n·C)×dim` in row-major order. `masked[i·C+j]` hides the value.
    pub fn tokens(
        &self,
        g: &mut Graph,
        batch: &EncodedBatch,
        columns: &[ColumnInfo],
        names: &[String],
        masked: Option<&[bool]>,
    ) -> Result<Var> {
        let (n, c, d) = (batch.n_rows, batch.n_cols, self.dim);
        if columns.len() != c || names.len() != c {
            return Err(TabiiError::shape("BaseEncoder::tokens", "column metadata does not match batch arity"));
        }
        let cells = n * c;
        let mut fixed = Matrix::zeros(cells, d);
        let mut value = Matrix::zeros(cells, 1);
        let mut is_num = Matrix::zeros(cells, 1);
        let mut is_missing = Matrix::zeros(cells, 1);
        let mut is_cat = Matrix::zeros(cells, 1);
        let mut is_masked = Matrix::zeros(cells, 1);
        let ids: Vec<Vec<f64>> = names.iter().map(|nm| self.identity(nm)).collect();
        let mut cat_cache: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        for i in 0..n {
            for j in 0..c {
                let k = i * c + j;
                let row = fixed.row_mut(k);
                row.copy_from_slice(&ids[j]);
                if masked.is_some_and(|m| m[k]) {
                    is_masked.data_mut()[k] = 1.0;
                    continue;
                }
                if batch.missing[k] {
                    is_missing.data_mut()[k] = 1.0;
                    continue;
                }
                match columns[j].kind {
                    ColumnKind::Numeric => {
                        value.data_mut()[k] = batch.values[k];
                        is_num.data_mut()[k] = 1.0;
                    }
                    ColumnKind::Categorical => {
                        let idx = batch.categories[k];
                        let v = cat_cache
                            .entry((j, idx))
                            .or_insert_with(|| self.category_vector(&names[j], idx));
                        for (x, y) in row.iter_mut().zip(v.iter()) {
                            *x += y;
                        }
                        is_cat.data_mut()[k] = 1.0;
                    }
                }
            }
        }
        let base = g.constant(fixed)?;
        let mut acc = base;
        for (coef, pid) in [
            (value, self.value_w),
            (is_num, self.value_b),
            (is_missing, self.missing),
            (is_cat, self.category),
            (is_masked, self.mask_token),
        ] {
            if coef.data().iter().all(|&x| x == 0.0) {
                continue;
            }
            let cv = g.constant(coef)?;
            let p = g.param(pid);
            let t = g.matmul(cv, p)?;
            acc = g.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Transformer outputs per cell, optionally with low-rank deltas.
    pub fn encode_cells(
        &self,
        g: &mut Graph,
        tokens: Var,
        seq_len: usize,
        deltas: Option<&[AttentionDeltas]>,
    ) -> Result<Var> {
        self.stack.forward(g, tokens, seq_len, deltas)
    }

    /// Masked-cell reconstruction loss (mean squared error over hidden
    /// numeric cells) and the number of such cells.
    pub fn reconstruction_loss(
        &self,
        g: &mut Graph,
        batch: &EncodedBatch,
        columns: &[ColumnInfo],
        names: &[String],
        masked: &[bool],
    ) -> Result<Option<Var>> {
        let c = batch.n_cols;
        let targets: Vec<(usize, f64)> = (0..batch.n_rows * c)
            .filter(|&k| masked[k] && !batch.missing[k] && columns[k % c].kind == ColumnKind::Numeric)
            .map(|k| (k, batch.values[k]))
            .collect();
        if targets.is_empty() {
            return Ok(None);
        }
        let tok = self.tokens(g, batch, columns, names, Some(masked))?;
        let h = self.encode_cells(g, tok, c, None)?;
        let idx: Vec<usize> = targets.iter().map(|t| t.0).collect();
        let sel = g.gather(h, &idx)?;
        let pred = self.recon.forward(g, sel)?;
        let y = g.constant(Matrix::column_vector(targets.iter().map(|t| t.1).collect()))?;
        let diff = g.sub(pred, y)?;
        let sq = g.mul(diff, diff)?;
        g.mean(sq).map(Some)
    }

    /// Weight matrices that receive low-rank factors: every attention projection.
    pub fn adapted_weights(&self) -> Vec<ParamId> {
        self.stack
            .layers
            .iter()
            .flat_map(|l| l.attn.linears().map(|lin| lin.w))
            .collect()
    }
}

/// Column subset (at least two, when available) and order used for one
/// pretraining batch.
fn augment(n_cols: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    let mut cols: Vec<usize> = (0..n_cols).collect();
    cols.shuffle(rng);
    let keep = if n_cols <= 2 { n_cols } else { rng.random_range(2..=n_cols) };
    cols.truncate(keep);
    cols
}

fn select_cols(batch: &EncodedBatch, cols: &[usize]) -> EncodedBatch {
    let mut out = EncodedBatch::empty(cols.len());
    for i in 0..batch.n_rows {
        let r = batch.row(i);
        out.push(&crate::dataset::NormalizedRow {
            values: cols.iter().map(|&j| r.values[j]).collect(),
            categories: cols.iter().map(|&j| r.categories[j]).collect(),
            missing: cols.iter().map(|&j| r.missing[j]).collect(),
        });
    }
    out
}

fn cell_mask(n: usize, rate: f64, rng: &mut crate::rng::Rng) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() < rate).collect()
}

/// One table of a pretraining corpus.
#[derive(Clone, Debug)]
pub struct CorpusTable {
    pub batch: EncodedBatch,
    pub columns: Vec<ColumnInfo>,
    pub names: Vec<String>,
}

/// A pretrained, frozen base encoder with its anchor and Fisher diagonal.
#[derive(Clone, Debug)]
pub struct PretrainedBase {
    pub config: BaseEncoderConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub encoder: BaseEncoder,
    /// Fisher diagonal of each adapted weight, aligned with `encoder.adapted_weights()`.
    pub fisher: Vec<Matrix>,
    pub epoch_losses: Vec<f64>,
}

impl PretrainedBase {
    /// Anchor values θ* of the adapted weights.
    pub fn anchor(&self) -> Vec<Matrix> {
        self.encoder.adapted_weights().iter().map(|&id| self.store.value(id).clone()).collect()
    }
}

/// Self-supervised masked-cell reconstruction over column-subset and
/// column-shuffle augmented views of the corpus; parameters are frozen at the end.
pub fn pretrain_base_encoder(corpus: &[CorpusTable], cfg: &BaseEncoderConfig, seed: u64) -> Result<PretrainedBase> {
    if corpus.is_empty() || corpus.iter().all(|t| t.batch.n_rows == 0) {
        return Err(TabiiError::Empty("pretraining corpus".into()));
    }
    let mut store = ParamStore::new();
    let encoder = BaseEncoder::new(&mut store, cfg, seed)?;
    let mut opt = Adam::with_lr(cfg.lr);
    let mut rng = rng_for(seed, "base/pretrain");
    let probe = ReconstructionProbe::new(corpus, cfg, seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        for table in corpus {
            let mut order: Vec<usize> = (0..table.batch.n_rows).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let cols = augment(table.batch.n_cols, &mut rng);
                let sub = select_cols(&table.batch.select(chunk), &cols);
                let infos: Vec<ColumnInfo> = cols.iter().map(|&j| table.columns[j]).collect();
                let names: Vec<String> = cols.iter().map(|&j| table.names[j].clone()).collect();
                let masked = cell_mask(sub.n_rows * sub.n_cols, cfg.mask_rate, &mut rng);
                let grads = {
                    let mut g = Graph::new(&store);
                    let Some(loss) = encoder.reconstruction_loss(&mut g, &sub, &infos, &names, &masked)? else {
                        continue;
                    };
                    g.backward(loss)?
                };
                store.accumulate(&grads);
                opt.step(&mut store);
            }
        }
        epoch_losses.push(probe.loss(&store, &encoder)?);
    }
    let fisher = base_fisher(&mut store, &encoder, corpus, cfg, seed)?;
    store.freeze_all();
    Ok(PretrainedBase {
        config: cfg.clone(),
        seed,
        store,
        encoder,
        fisher,
        epoch_losses,
    })
}

/// Fixed masks over up to 512 corpus rows with every column present; its loss
/// is the per-epoch progress measure of pretraining.
struct ReconstructionProbe<'a> {
    parts: Vec<(&'a CorpusTable, EncodedBatch, Vec<bool>)>,
}

impl<'a> ReconstructionProbe<'a> {
    fn new(corpus: &'a [CorpusTable], cfg: &BaseEncoderConfig, seed: u64) -> Self {
        let mut rng = rng_for(seed, "base/probe");
        let parts = corpus
            .iter()
            .filter(|t| t.batch.n_rows > 0)
            .map(|t| {
                let rows: Vec<usize> = (0..t.batch.n_rows.min(512)).collect();
                let b = t.batch.select(&rows);
                let m = cell_mask(b.n_rows * b.n_cols, cfg.mask_rate, &mut rng);
                (t, b, m)
            })
            .collect();
        ReconstructionProbe { parts }
    }

    fn loss(&self, store: &ParamStore, encoder: &BaseEncoder) -> Result<f64> {
        let (mut total, mut count) = (0.0, 0usize);
        for (t, b, m) in &self.parts {
            let mut g = Graph::new(store);
            if let Some(l) = encoder.reconstruction_loss(&mut g, b, &t.columns, &t.names, m)? {
                total += g.value(l).item();
                count += 1;
            }
        }
        Ok(if count > 0 { total / count as f64 } else { 0.0 })
    }
}

/// Empirical Fisher diagonal: the mean over samples of squared per-sample
/// gradients of a log-likelihood. `loglik(g, i)` builds sample `i`'s value.
pub fn empirical_fisher<F>(store: &ParamStore, ids: &[ParamId], n_samples: usize, mut loglik: F) -> Result<Vec<Matrix>>
where
    F: FnMut(&mut Graph, usize) -> Result<Option<Var>>,
{
    if n_samples == 0 {
        return Err(TabiiError::Empty("Fisher sample set".into()));
    }
    let mut acc: Vec<Matrix> = ids
        .iter()
        .map(|&id| {
            let (r, c) = store.value(id).shape();
            Matrix::zeros(r, c)
        })
        .collect();
    let mut used = 0usize;
    for i in 0..n_samples {
        let mut g = Graph::new(store);
        let Some(ll) = loglik(&mut g, i)? else { continue };
        let grads = g.backward(ll)?;
        used += 1;
        for (a, &id) in acc.iter_mut().zip(ids) {
            if let Some(gm) = grads.get(id) {
                for (x, y) in a.data_mut().iter_mut().zip(gm.data()) {
                    *x += y * y;
                }
            }
        }
    }
    if used == 0 {
        return Err(TabiiError::Empty("no sample produced a log-likelihood".into()));
    }
    for a in &mut acc {
        a.scale_assign(1.0 / used as f64);
    }
    Ok(acc)
}

/// Fisher of the base encoder's adapted weights under a unit-variance Gaussian
/// reconstruction likelihood of masked cells, one corpus row per sample.
fn base_fisher(
    store: &mut ParamStore,
    encoder: &BaseEncoder,
    corpus: &[CorpusTable],
    cfg: &BaseEncoderConfig,
    seed: u64,
) -> Result<Vec<Matrix>> {
    let ids = encoder.adapted_weights();
    let table = corpus.iter().find(|t| t.batch.n_rows > 0).expect("non-empty corpus checked by caller");
    let n = cfg.fisher_samples.min(table.batch.n_rows).max(1);
    let mut rng = rng_for(seed, "base/fisher");
    let rows: Vec<usize> = {
        let mut r: Vec<usize> = (0..table.batch.n_rows).collect();
        r.shuffle(&mut rng);
        r.truncate(n);
        r
    };
    let masks: Vec<Vec<bool>> = rows.iter().map(|_| cell_mask(table.batch.n_cols, cfg.mask_rate.max(0.3), &mut rng)).collect();
    empirical_fisher(store, &ids, n, |g, i| {
        let row = table.batch.select(&[rows[i]]);
        let Some(mse) = encoder.reconstruction_loss(g, &row, &table.columns, &table.names, &masks[i])? else {
            return Ok(None);
        };
        // Per-sample log-likelihood up to a constant: −½ Σ (x − x̂)².
        let cells = masks[i]
            .iter()
            .enumerate()
            .filter(|&(k, &m)| m && !row.missing[k] && table.columns[k].kind == ColumnKind::Numeric)
            .count();
        g.scale(mse, -0.5 * cells as f64).map(Some)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub rank: usize,
    /// Standard deviation of the initial `A` factor entries.
    pub init_std: f64,
    pub ewc_lambda: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 4,
            init_std: 0.01,
            ewc_lambda: 1.0,
        }
    }
}

/// Frozen base weights with trainable low-rank factors on every attention
/// projection, an EWC anchor and Fisher diagonal.
#[derive(Clone, Debug)]
pub struct AdapterState {
    pub encoder: BaseEncoder,
    pub deltas: Vec<AttentionDeltas>,
    pub rank: usize,
    /// Anchor θ* of each adapted weight (equal to the frozen W₀).
    pub anchor: Vec<Matrix>,
    pub fisher: Vec<Matrix>,
    pub ewc_lambda: f64,
}

impl AdapterState {
    /// Install the pretrained base into `store` (frozen) and add factors
    /// `A` (out×r, small random) and `B` (in×r, zero), so ΔW starts at 0.
    pub fn new(store: &mut ParamStore, base: &PretrainedBase, cfg: &AdapterConfig, seed: u64) -> Result<Self> {
        let encoder = BaseEncoder::new(store, &base.config, base.seed)?;
        for (id, p) in base.store.iter() {
            let dst = store
                .id(&p.name)
                .ok_or_else(|| TabiiError::Graph(format!("missing base parameter {}", p.name)))?;
            if store.value(dst).shape() != base.store.value(id).shape() {
                return Err(TabiiError::shape("AdapterState::new", format!("base parameter {}", p.name)));
            }
            *store.value_mut(dst) = p.value.clone();
            store.set_trainable(dst, false);
        }
        let mut rng = rng_for(seed, "adapter/factors");
        let mut deltas = Vec::new();
        for (li, layer) in encoder.stack.layers.iter().enumerate() {
            let mut mk = |tag: &str, lin: &Linear| -> Result<LowRank> {
                let a = store.add(
                    format!("lora.layer{li}.{tag}.a"),
                    Matrix::normal(lin.out_dim, cfg.rank, cfg.init_std, &mut rng),
                    true,
                )?;
                let b = store.add(format!("lora.layer{li}.{tag}.b"), Matrix::zeros(lin.in_dim, cfg.rank), true)?;
                Ok(LowRank { a, b, rank: cfg.rank })
            };
            deltas.push(AttentionDeltas {
                q: Some(mk("q", &layer.attn.q)?),
                k: Some(mk("k", &layer.attn.k)?),
                v: Some(mk("v", &layer.attn.v)?),
                o: Some(mk("o", &layer.attn.o)?),
            });
        }
        if base.fisher.len() != deltas.len() * 4 {
            return Err(TabiiError::shape("AdapterState::new", "Fisher diagonal count differs from adapted weights"));
        }
        bump(&ADAPTERS_BUILT);
        Ok(AdapterState {
            encoder,
            deltas,
            rank: cfg.rank,
            anchor: base.anchor(),
            fisher: base.fisher.clone(),
            ewc_lambda: cfg.ewc_lambda,
        })
    }

    pub fn factors(&self) -> Vec<&LowRank> {
        self.deltas
            .iter()
            .flat_map(|d| [&d.q, &d.k, &d.v, &d.o])
            .flatten()
            .collect()
    }

    pub fn factor_params(&self) -> Vec<ParamId> {
        self.factors().iter().flat_map(|f| [f.a, f.b]).collect()
    }

    /// Current ΔW = B·Aᵀ for each adapted weight.
    pub fn delta_values(&self, store: &ParamStore) -> Result<Vec<Matrix>> {
        self.factors()
            .iter()
            .map(|f| store.value(f.b).matmul(&store.value(f.a).transpose()))
            .collect()
    }
}

/// Pooled adapter output `p` (mean over cell tokens), `n×dim`.
pub fn adapter_forward(
    g: &mut Graph,
    adapter: &AdapterState,
    batch: &EncodedBatch,
    columns: &[ColumnInfo],
    names: &[String],
) -> Result<Var> {
    let tok = adapter.encoder.tokens(g, batch, columns, names, None)?;
    let h = adapter.encoder.encode_cells(g, tok, batch.n_cols, Some(&adapter.deltas))?;
    g.group_mean(h, batch.n_cols)
}

/// Pooled output of the frozen base encoder without deltas.
pub fn base_forward(g: &mut Graph, encoder: &BaseEncoder, batch: &EncodedBatch, columns: &[ColumnInfo], names: &[String]) -> Result<Var> {
    let tok = encoder.tokens(g, batch, columns, names, None)?;
    let h = encoder.encode_cells(g, tok, batch.n_cols, None)?;
    g.group_mean(h, batch.n_cols)
}

/// Σ (λ/2)·F⊙(W − θ*)² over the adapted weights, with W − θ* = B·Aᵀ.
pub fn ewc_loss(g: &mut Graph, adapter: &AdapterState) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (f, fisher) in adapter.factors().iter().zip(&adapter.fisher) {
        let a = g.param(f.a);
        let b = g.param(f.b);
        let at = g.transpose(a)?;
        let delta = g.matmul(b, at)?;
        let sq = g.mul(delta, delta)?;
        let fc = g.constant(fisher.clone())?;
        let w = g.mul(sq, fc)?;
        let s = g.sum(w)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let t = match total {
        Some(t) => t,
        None => g.constant(Matrix::scalar(0.0))?,
    };
    g.scale(t, adapter.ewc_lambda / 2.0)
}

/// Σ (λ/2)·F_i·(θ_i − θ*_i)² on plain vectors.
pub fn ewc_penalty(fisher: &[f64], theta: &[f64], anchor: &[f64], lambda: f64) -> Result<f64> {
    if fisher.len() != theta.len() || theta.len() != anchor.len() {
        return Err(TabiiError::shape("ewc_penalty", "F, θ and θ* lengths differ"));
    }
    Ok(fisher
        .iter()
        .zip(theta.iter().zip(anchor))
        .map(|(f, (t, a))| lambda / 2.0 * f * (t - a).powi(2))
        .sum())
}

/// Widths of the assembled representation `[t; p; l]`; absent parts are 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub t: usize,
    pub p: usize,
    pub l: usize,
}

impl Layout {
    pub fn total(&self) -> usize {
        self.t + self.p + self.l
    }

    pub fn segments(&self) -> usize {
        [self.t, self.p, self.l].iter().filter(|&&w| w > 0).count()
    }
}

/// `[t; p; l]` on graph values, checked against `layout`.
pub fn assemble(g: &mut Graph, layout: &Layout, t: Var, p: Option<Var>, l: Option<Var>) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    for (v, w, name) in [(Some(t), layout.t, "t"), (p, layout.p, "p"), (l, layout.l, "l")] {
        match v {
            Some(v) => {
                if g.shape(v).1 != w {
                    return Err(TabiiError::shape(
                        "assemble",
                        format!("{name} has width {} but the layout expects {w}", g.shape(v).1),
                    ));
                }
                parts.push(v);
            }
            None if w == 0 => {}
            None => return Err(TabiiError::shape("assemble", format!("{name} missing from layout"))),
        }
    }
    g.concat_cols(&parts)
}

/// `[t; p; l]` on plain vectors.
pub fn assemble_vectors(t: &[f64], p: &[f64], l: &[f64]) -> Vec<f64> {
    t.iter().chain(p).chain(l).copied().collect()
}

/// Corpus made of the scenario's train rows through the train view.
pub fn default_corpus(scenario: &IncrementalScenario) -> CorpusTable {
    use crate::dataset::{Split, View};
    CorpusTable {
        batch: scenario.encode_split(Split::Train, View::Train),
        columns: crate::encoder::column_infos(scenario, View::Train),
        names: scenario.original_names(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::NormalizedRow;
    use crate::rng::rng_from_seed;
    use crate::tensor::gradcheck::check_gradients;

    fn small_cfg() -> BaseEncoderConfig {
        BaseEncoderConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            epochs: 3,
            batch_size: 32,
            fisher_samples: 8,
            ..BaseEncoderConfig::default()
        }
    }

    /// Three numeric columns where the third is the sum of the first two.
    fn correlated(n: usize, seed: u64) -> CorpusTable {
        let mut rng = rng_from_seed(seed);
        let mut batch = EncodedBatch::empty(3);
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            batch.push(&NormalizedRow {
                values: vec![a, b, (a + b) / 2f64.sqrt()],
                categories: vec![0; 3],
                missing: vec![false; 3],
            });
        }
        CorpusTable {
            batch,
            columns: vec![
                ColumnInfo {
                    kind: ColumnKind::Numeric,
                    cardinality: 1
                };
                3
            ],
            names: vec!["a".into(), "b".into(), "s".into()],
        }
    }

    #[test]
    fn prompt_rendering() {
        let t = PromptTemplate::default();
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let text = render(
            &t,
            "Outcome",
            &names(&["Age", "BMI", "Glucose", "BloodPressure"]),
            &names(&["Insulin", "SkinThickness", "DPF", "Pregnancies"]),
        );
        for n in ["Outcome", "Age", "BMI", "Glucose", "BloodPressure", "Insulin", "SkinThickness", "DPF", "Pregnancies"] {
            assert!(text.contains(n), "{n}");
        }
        assert_eq!(text.matches('.').count(), 1);
        assert!(render(&t, "y", &names(&["a"]), &[]).contains("none"));
        assert!(PromptTemplate::new("{target} only").is_err());
        assert!(PromptTemplate::new("{target} {target} {feature description} {incremental features}").is_err());
    }

    #[test]
    fn hash_provider_properties() {
        let p = HashEmbeddingProvider::new(64, 1).unwrap();
        let v = p.embed("glucose level").unwrap();
        assert_eq!(v, p.embed("glucose level").unwrap());
        assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        let mut rng = rng_from_seed(3);
        let texts: Vec<String> = (0..100)
            .map(|_| (0..10).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect())
            .collect();
        let vecs: Vec<Vec<f64>> = texts.iter().map(|t| p.embed(t).unwrap()).collect();
        let mut sum = 0.0;
        let mut cnt = 0.0;
        for i in 0..100 {
            for j in i + 1..100 {
                sum += crate::tensor::dot(&vecs[i], &vecs[j]).abs();
                cnt += 1.0;
            }
        }
        assert!(sum / cnt < 0.2, "{}", sum / cnt);
        assert!(HashEmbeddingProvider::new(4, 0).is_err());
    }

    #[test]
    fn file_provider_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let v = vec![0.1, -1.0 / 3.0, 2.5e-300, 7.0];
        write_embedding_cache(&path, &[("hello".into(), v.clone()), ("hello".into(), vec![9.0; 4])]).unwrap();
        let p = FileEmbeddingProvider::load(&path).unwrap();
        assert_eq!(p.len(), 1);
        let got = p.embed("hello").unwrap();
        assert!(got.iter().zip(&v).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(p.embed("other"), Err(TabiiError::CacheMiss(_))));

        write_embedding_cache(&path, &[("a".into(), vec![1.0, 2.0]), ("b".into(), vec![1.0])]).unwrap();
        assert!(matches!(FileEmbeddingProvider::load(&path), Err(TabiiError::Format { .. })));
    }

    #[test]
    fn pretraining_loss_decreases_and_is_seeded() {
        let corpus = [correlated(512, 1)];
        let cfg = BaseEncoderConfig {
            epochs: 10,
            lr: 1e-3,
            ..small_cfg()
        };
        let a = pretrain_base_encoder(&corpus, &cfg, 7).unwrap();
        for w in a.epoch_losses.windows(2) {
            assert!(w[1] < w[0], "{:?}", a.epoch_losses);
        }
        let b = pretrain_base_encoder(&corpus, &cfg, 7).unwrap();
        assert_eq!(a.anchor(), b.anchor());
        assert!(a.store.trainable_ids().is_empty());
        assert!(a.fisher.iter().all(|f| f.data().iter().all(|&x| x >= 0.0)));
        assert!(pretrain_base_encoder(&[], &cfg, 7).is_err());
    }

    fn adapter_fixture() -> (ParamStore, AdapterState, CorpusTable) {
        let corpus = correlated(64, 2);
        let base = pretrain_base_encoder(std::slice::from_ref(&corpus), &small_cfg(), 3).unwrap();
        let mut store = ParamStore::new();
        let adapter = AdapterState::new(&mut store, &base, &AdapterConfig::default(), 5).unwrap();
        (store, adapter, corpus)
    }

    #[test]
    fn adapter_starts_as_identity_and_anchor() {
        let (store, adapter, corpus) = adapter_fixture();
        let b = corpus.batch.select(&[0, 1, 2]);
        let mut g = Graph::new(&store);
        let p = adapter_forward(&mut g, &adapter, &b, &corpus.columns, &corpus.names).unwrap();
        let q = base_forward(&mut g, &adapter.encoder, &b, &corpus.columns, &corpus.names).unwrap();
        assert_eq!(g.value(p), g.value(q));
        let e = ewc_loss(&mut g, &adapter).unwrap();
        assert_eq!(g.value(e).item(), 0.0);
        for (id, anchor) in adapter.encoder.adapted_weights().iter().zip(&adapter.anchor) {
            assert_eq!(store.value(*id), anchor);
        }
    }

    #[test]
    fn adapter_gradients_reach_factors_only() {
        let (mut store, adapter, corpus) = adapter_fixture();
        // Move B off zero so gradients w.r.t. A are non-trivial.
        let mut rng = rng_from_seed(9);
        for f in adapter.factors() {
            let (r, c) = store.value(f.b).shape();
            *store.value_mut(f.b) = Matrix::normal(r, c, 0.1, &mut rng);
        }
        let b = corpus.batch.select(&[0, 1]);
        let w = Matrix::normal(2, 8, 1.0, &mut rng);
        let ids = adapter.factor_params();
        let (cols, names) = (corpus.columns.clone(), corpus.names.clone());
        let report = check_gradients(&mut store, &ids, 1e-5, Some(12), |g| {
            let p = adapter_forward(g, &adapter, &b, &cols, &names)?;
            let wc = g.constant(w.clone())?;
            let y = g.mul(p, wc)?;
            let s = g.sum(y)?;
            let e = ewc_loss(g, &adapter)?;
            g.add(s, e)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
        let mut g = Graph::new(&store);
        let p = adapter_forward(&mut g, &adapter, &b, &cols, &names).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        for id in adapter.encoder.adapted_weights() {
            assert!(!grads.contains(id));
        }
    }

    #[test]
    fn full_rank_factors_fit_any_delta() {
        // Least-squares oracle: fit B·Aᵀ to a random 4×4 target by gradient descent.
        let mut rng = rng_from_seed(4);
        let target = Matrix::normal(4, 4, 1.0, &mut rng);
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::normal(4, 4, 0.5, &mut rng), true).unwrap();
        let b = store.add("b", Matrix::normal(4, 4, 0.5, &mut rng), true).unwrap();
        let mut opt = Adam::with_lr(0.02);
        let mut err = f64::INFINITY;
        for _ in 0..4000 {
            let grads = {
                let mut g = Graph::new(&store);
                let (av, bv) = (g.param(a), g.param(b));
                let at = g.transpose(av).unwrap();
                let d = g.matmul(bv, at).unwrap();
                let t = g.constant(target.clone()).unwrap();
                let diff = g.sub(d, t).unwrap();
                let sq = g.mul(diff, diff).unwrap();
                let l = g.mean(sq).unwrap();
                err = g.value(l).item();
                g.backward(l).unwrap()
            };
            store.accumulate(&grads);
            opt.step(&mut store);
        }
        let fit = store.value(b).matmul(&store.value(a).transpose()).unwrap();
        let max = fit.zip_map(&target, |x, y| (x - y).abs()).max_abs();
        assert!(max <= 1e-3, "mse {err}, max {max}");
    }

    #[test]
    fn ewc_identities() {
        assert_eq!(ewc_penalty(&[1.0, 1.0], &[1.0, 2.0], &[0.0, 0.0], 2.0).unwrap(), 5.0);
        assert_eq!(ewc_penalty(&[3.0, 1.0], &[1.0, 2.0], &[1.0, 2.0], 2.0).unwrap(), 0.0);
        let a = ewc_penalty(&[0.5, 2.0], &[1.0, -1.0], &[0.2, 0.0], 1.0).unwrap();
        let b = ewc_penalty(&[0.5, 2.0], &[1.0, -1.0], &[0.2, 0.0], 2.0).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
        assert!(ewc_penalty(&[1.0], &[1.0, 2.0], &[0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn ewc_graph_matches_plain_penalty() {
        let (mut store, adapter, _) = adapter_fixture();
        let mut rng = rng_from_seed(6);
        for f in adapter.factors() {
            let (r, c) = store.value(f.b).shape();
            *store.value_mut(f.b) = Matrix::normal(r, c, 0.3, &mut rng);
        }
        let deltas = adapter.delta_values(&store).unwrap();
        let mut expected = 0.0;
        for (d, f) in deltas.iter().zip(&adapter.fisher) {
            let zeros = vec![0.0; d.len()];
            expected += ewc_penalty(f.data(), d.data(), &zeros, adapter.ewc_lambda).unwrap();
        }
        let mut g = Graph::new(&store);
        let e = ewc_loss(&mut g, &adapter).unwrap();
        assert!((g.value(e).item() - expected).abs() < 1e-12 * expected.max(1.0));
    }

    #[test]
    fn logistic_fisher_matches_analytic() {
        // p(y=1|x) = σ(θx); with y drawn from the model, E[(y−p)²x²] = E[p(1−p)x²].
        let theta = 0.8;
        let mut rng = rng_from_seed(12);
        let n = 4000;
        let xs: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
        let ys: Vec<usize> = xs.iter().map(|&x| usize::from(rng.random::<f64>() < sig(theta * x))).collect();
        let mut store = ParamStore::new();
        let id = store.add("theta", Matrix::scalar(theta), true).unwrap();
        let f = empirical_fisher(&store, &[id], n, |g, i| {
            let t = g.param(id);
            let x = g.constant(Matrix::scalar(xs[i]))?;
            let z = g.mul(t, x)?;
            let zero = g.constant(Matrix::scalar(0.0))?;
            let logits = g.concat_cols(&[zero, z])?;
            let ce = g.cross_entropy(logits, &[ys[i]], &[1.0])?;
            g.scale(ce, -1.0).map(Some)
        })
        .unwrap();
        let analytic: f64 = xs.iter().map(|&x| sig(theta * x) * (1.0 - sig(theta * x)) * x * x).sum::<f64>() / n as f64;
        let rel = (f[0].item() - analytic).abs() / analytic;
        assert!(rel < 0.1, "empirical {} analytic {analytic}", f[0].item());

        let dead = store.add("dead", Matrix::scalar(1.0), true).unwrap();
        let f = empirical_fisher(&store, &[dead], 3, |g, _| {
            let t = g.param(id);
            g.sum(t).map(Some)
        })
        .unwrap();
        assert_eq!(f[0].item(), 0.0);
    }

    #[test]
    fn assemble_layout() {
        let r = assemble_vectors(&[1.0; 32], &[2.0; 32], &[0.0; 64]);
        assert_eq!(r.len(), 128);
        assert!(r[64..].iter().all(|&x| x == 0.0));
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let layout = Layout { t: 2, p: 3, l: 1 };
        let t = g.constant(Matrix::filled(2, 2, 1.0)).unwrap();
        let p = g.constant(Matrix::filled(2, 3, 2.0)).unwrap();
        let l = g.constant(Matrix::filled(2, 1, 3.0)).unwrap();
        let r = assemble(&mut g, &layout, t, Some(p), Some(l)).unwrap();
        assert_eq!(g.value(r).row(0), &[1.0, 1.0, 2.0, 2.0, 2.0, 3.0]);
        assert!(assemble(&mut g, &layout, t, Some(l), Some(l)).is_err());
        assert!(assemble(&mut g, &layout, t, None, Some(l)).is_err());
    }
}
