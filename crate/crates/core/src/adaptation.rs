//! Label-free adaptation to incremental columns: frozen-model pseudo-labels on
//! inference rows, a contrastive term between a batch and its randomly masked
//! view, and an EWC penalty keeping the adapter near its pretrained anchor.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Classifier, EncodedBatch, IncrementalScenario, Split, View, UNK};
use crate::encoder::{
    accuracy, argmax_rows, build_stack, column_infos, ColumnInfo, FeatureTokenizer, OriginalModel, ScoreModel,
    HEAD_PREFIX, STACK_PREFIX, TOKENIZER_PREFIX,
};
use crate::error::{Result, TabiiError};
use crate::isc::{reference_rows, Isc, IscConfig, RowMixing};
use crate::placeholders::{
    adapter_forward, assemble, default_corpus, ewc_loss, pretrain_base_encoder, render_prompt, zero_pad,
    AdapterConfig, AdapterState, BaseEncoderConfig, CorpusTable, EmbeddingProvider, FileEmbeddingProvider,
    HashEmbeddingProvider, Layout, PretrainedBase, PromptTemplate,
};
use crate::rng::{derive_seed, rng_for, Rng};
use crate::tensor::nn::{first_token_rows, Linear, TransformerStack};
use crate::tensor::{Adam, AttentionMask, Graph, Matrix, ParamStore, Var};

/// Where the prompt embedding comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSource {
    Hash { dim: usize },
    File { path: std::path::PathBuf },
}

impl Default for EmbeddingSource {
    fn default() -> Self {
        EmbeddingSource::Hash { dim: 64 }
    }
}

impl EmbeddingSource {
    pub fn build(&self, seed: u64) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match self {
            EmbeddingSource::Hash { dim } => Box::new(HashEmbeddingProvider::new(*dim, seed)?),
            EmbeddingSource::File { path } => Box::new(FileEmbeddingProvider::load(path)?),
        })
    }
}

/// How the adapted-encoder path `p` participates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    #[default]
    Trainable,
    Off,
}

/// How the condensation stage participates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondenseMode {
    #[default]
    Iisa,
    /// Cross-row attention replaced by a second segment attention.
    Msa,
    /// `z = r`.
    Bypass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Components {
    pub adapter: AdapterMode,
    pub prompt: bool,
    pub condense: CondenseMode,
    pub contrastive: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components {
            adapter: AdapterMode::Trainable,
            prompt: true,
            condense: CondenseMode::Iisa,
            contrastive: true,
        }
    }
}

/// A component removed for an ablation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Zero padding only: no `p`, no `l`.
    Placeholder,
    /// No prompt embedding `l`.
    LlmEncoder,
    /// No adapter path `p`.
    TabAdapter,
    /// Cross-row attention replaced by segment attention.
    Isc,
    /// Pseudo-label training only: tabular path, no condensation, no contrastive term.
    All,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Placeholder,
        Ablation::LlmEncoder,
        Ablation::TabAdapter,
        Ablation::Isc,
        Ablation::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Placeholder => "placeholder",
            Ablation::LlmEncoder => "llm_encoder",
            Ablation::TabAdapter => "tab_adapter",
            Ablation::Isc => "isc",
            Ablation::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| TabiiError::Config(format!("unknown ablation `{s}`")))
    }
}

/// Components left after removing `a` from the full model.
pub fn ablation_components(a: Ablation) -> Components {
    let full = Components::default();
    match a {
        Ablation::Placeholder => Components {
            adapter: AdapterMode::Off,
            prompt: false,
            ..full
        },
        Ablation::LlmEncoder => Components { prompt: false, ..full },
        Ablation::TabAdapter => Components {
            adapter: AdapterMode::Off,
            ..full
        },
        Ablation::Isc => Components {
            condense: CondenseMode::Msa,
            ..full
        },
        Ablation::All => Components {
            adapter: AdapterMode::Off,
            prompt: false,
            condense: CondenseMode::Bypass,
            contrastive: false,
        },
    }
}

/// Which outputs the contrastive term compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveTarget {
    /// Class scores from the head.
    #[default]
    Scores,
    /// The condensed representation `z`.
    Representation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    pub tau: f64,
    pub alpha: f64,
    pub pseudo_lambda: f64,
    pub mask_rate: f64,
    /// Rows drawn from the train split per step.
    pub train_batch: usize,
    /// Pseudo-labeled inference rows per step.
    pub pseudo_batch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Pseudo-labels below this confidence are dropped.
    pub pseudo_threshold: f64,
    pub contrastive_target: ContrastiveTarget,
    /// Train only on inference rows; no train-split rows are used.
    pub test_only: bool,
    /// Keep the epoch with the lowest cross-entropy on the zero-padded
    /// validation split (ignored in test-only mode).
    pub select_on_val: bool,
    pub components: Components,
    pub base: BaseEncoderConfig,
    pub adapter: AdapterConfig,
    pub isc: IscConfig,
    pub embedding: EmbeddingSource,
    pub prompt_template: String,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            tau: 0.2,
            alpha: 0.5,
            pseudo_lambda: 0.3,
            mask_rate: 0.3,
            train_batch: 64,
            pseudo_batch: 64,
            epochs: 10,
            lr: 1e-3,
            pseudo_threshold: 0.0,
            contrastive_target: ContrastiveTarget::Scores,
            test_only: false,
            select_on_val: true,
            components: Components::default(),
            base: BaseEncoderConfig::default(),
            adapter: AdapterConfig::default(),
            isc: IscConfig::default(),
            embedding: EmbeddingSource::default(),
            prompt_template: crate::placeholders::DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TabiiError::Config(m.to_string()));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.alpha < 0.0 || self.pseudo_lambda < 0.0 || self.adapter.ewc_lambda < 0.0 {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return bad("mask_rate must lie in [0, 1)");
        }
        if self.train_batch == 0 || self.pseudo_batch == 0 || self.epochs == 0 {
            return bad("batch sizes and epochs must be positive");
        }
        PromptTemplate::new(&self.prompt_template)?;
        Ok(())
    }
}

/// Copy of `batch` where each slot is hidden with probability `rate`
/// (numeric → 0, categorical → UNK). A row whose every slot was drawn hidden
/// is redrawn.
pub fn masked_view(batch: &EncodedBatch, rate: f64, rng: &mut Rng) -> EncodedBatch {
    let mut out = batch.clone();
    let c = batch.n_cols;
    let mut mask = vec![false; c];
    for i in 0..batch.n_rows {
        loop {
            for m in mask.iter_mut() {
                *m = rng.random::<f64>() < rate;
            }
            if c <= 1 || !mask.iter().all(|&m| m) {
                break;
            }
        }
        for (j, &m) in mask.iter().enumerate() {
            if m {
                out.values[i * c + j] = 0.0;
                out.categories[i * c + j] = UNK;
            }
        }
    }
    out
}

/// InfoNCE between paired rows of `h` and `h_tilde` under cosine similarity
/// with temperature `tau`: the mean over `i` of `−log softmax_j(sim(h_i, h̃_j)/τ)[i]`.
pub fn contrastive_loss(g: &mut Graph, h: Var, h_tilde: Var, tau: f64) -> Result<Var> {
    if g.shape(h) != g.shape(h_tilde) {
        return Err(TabiiError::shape("contrastive_loss", "views differ in shape"));
    }
    for v in [h, h_tilde] {
        let m = g.value(v);
        if (0..m.rows()).any(|i| m.row(i).iter().all(|&x| x == 0.0)) {
            return Err(TabiiError::InvalidArgument("zero-norm embedding in contrastive loss".into()));
        }
    }
    let n = g.shape(h).0;
    let a = g.l2_normalize_rows(h)?;
    let b = g.l2_normalize_rows(h_tilde)?;
    let bt = g.transpose(b)?;
    let sim = g.matmul(a, bt)?;
    let logits = g.scale(sim, 1.0 / tau)?;
    let targets: Vec<usize> = (0..n).collect();
    g.cross_entropy(logits, &targets, &vec![1.0 / n as f64; n])
}

/// Frozen-model labels for the inference pool.
#[derive(Clone, Debug)]
pub struct PseudoLabels {
    /// Full-table row indices (TrainFromTest then ValFromTest).
    pub rows: Vec<usize>,
    /// Rows through the inference view.
    pub batch: EncodedBatch,
    pub labels: Vec<usize>,
    pub confidence: Vec<f64>,
}

impl PseudoLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keep rows with confidence at least `threshold`.
    pub fn filtered(&self, threshold: f64) -> PseudoLabels {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.confidence[i] >= threshold).collect();
        PseudoLabels {
            rows: keep.iter().map(|&i| self.rows[i]).collect(),
            batch: self.batch.select(&keep),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            confidence: keep.iter().map(|&i| self.confidence[i]).collect(),
        }
    }
}

/// Argmax predictions of the frozen original model on TrainFromTest ∪
/// ValFromTest, with the winning probability as confidence. No labels of
/// these rows are read.
pub fn generate_pseudo_labels(original: &OriginalModel, scenario: &IncrementalScenario) -> Result<PseudoLabels> {
    let rows = scenario.split().inference_pool();
    let probs = original.predict_proba(&scenario.encode_rows(&rows, View::Train))?;
    let labels = argmax_rows(&probs);
    let confidence = labels.iter().enumerate().map(|(i, &k)| probs.get(i, k)).collect();
    Ok(PseudoLabels {
        batch: scenario.encode_rows(&rows, View::Inference),
        rows,
        labels,
        confidence,
    })
}

/// Weighted terms of one loss evaluation; `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_train: f64,
    /// Already multiplied by the pseudo-label weight.
    pub ce_pseudo: f64,
    /// Already multiplied by `alpha`.
    pub contrastive: f64,
    pub ewc: f64,
    pub total: f64,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss_total: f64,
    pub loss_ce_train: f64,
    pub loss_ce_pseudo: f64,
    pub loss_contrastive: f64,
    pub loss_ewc: f64,
}

pub fn write_log(path: &Path, log: &[LogRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in log {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| TabiiError::io(path, e))?;
    f.write_all(&buf).map_err(|e| TabiiError::io(path, e))
}

/// Keys hidden from the frozen backbone: incremental slots flagged missing,
/// which includes every zero-padded slot. `None` when nothing is hidden.
pub fn absent_slot_mask(batch: &EncodedBatch, n_original: usize) -> Option<AttentionMask> {
    let (n, c) = (batch.n_rows, batch.n_cols);
    let hidden = |i: usize, j: usize| j >= n_original && batch.missing[i * c + j];
    if !(0..n).any(|i| (n_original..c).any(|j| hidden(i, j))) {
        return None;
    }
    let t = c + 1;
    let mut m = Vec::with_capacity(n * t * t);
    for i in 0..n {
        for _ in 0..t {
            m.push(true);
            m.extend((0..c).map(|j| !hidden(i, j)));
        }
    }
    Some(Rc::new(m))
}

/// The adapted classifier over the inference view.
#[derive(Clone, Debug)]
pub struct AdaptedModel {
    pub config: AdaptationConfig,
    pub columns: Vec<ColumnInfo>,
    pub names: Vec<String>,
    pub n_classes: usize,
    pub n_original: usize,
    pub layout: Layout,
    store: ParamStore,
    tokenizer: FeatureTokenizer,
    stack: TransformerStack,
    adapter: Option<AdapterState>,
    prompt: Option<(Matrix, Linear)>,
    isc: Option<Isc>,
    head: Linear,
    references: EncodedBatch,
}

const EVAL_CHUNK: usize = 192;

impl AdaptedModel {
    /// Build from a trained original model. The backbone is copied and frozen
    /// apart from the tokens of incremental columns.
    pub fn new(
        scenario: &IncrementalScenario,
        original: &OriginalModel,
        base: Option<&PretrainedBase>,
        cfg: &AdaptationConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if !original.is_trained() {
            return Err(TabiiError::Untrained("original model".into()));
        }
        let columns = column_infos(scenario, View::Inference);
        let names: Vec<String> = scenario.column_specs(View::Inference).iter().map(|c| c.name.clone()).collect();
        let e = original.config.embed_dim;
        let mut store = ParamStore::new();
        let tokenizer = FeatureTokenizer::new(&mut store, TOKENIZER_PREFIX, &columns, e, original.seed)?;
        let stack = build_stack(&mut store, STACK_PREFIX, &original.config, original.seed)?;
        store.copy_values_from(original.store())?;
        store.freeze_all();
        for j in scenario.n_original()..columns.len() {
            for id in tokenizer.column_params(j) {
                store.set_trainable(id, true);
            }
        }
        let comp = cfg.components;
        let adapter = match comp.adapter {
            AdapterMode::Off => None,
            AdapterMode::Trainable => {
                let base = base.ok_or_else(|| TabiiError::Config("adapter path needs a pretrained base encoder".into()))?;
                if base.config.dim != e {
                    return Err(TabiiError::Config(format!(
                        "base encoder width {} differs from backbone width {e}",
                        base.config.dim
                    )));
                }
                Some(AdapterState::new(&mut store, base, &cfg.adapter, derive_seed(seed, "adapter"))?)
            }
        };
        let prompt = if comp.prompt {
            let provider = cfg.embedding.build(derive_seed(seed, "embedding"))?;
            let text = render_prompt(&PromptTemplate::new(&cfg.prompt_template)?, scenario);
            let v = provider.embed(&text)?;
            let lin = Linear::new(&mut store, "adapt.prompt", v.len(), e, true, &mut rng_for(seed, "adapt.prompt"))?;
            Some((Matrix::row_vector(v), lin))
        } else {
            None
        };
        let layout = Layout {
            t: e,
            p: if adapter.is_some() { e } else { 0 },
            l: if prompt.is_some() { e } else { 0 },
        };
        let isc = match comp.condense {
            CondenseMode::Bypass => None,
            mode => {
                let icfg = IscConfig {
                    row_mixing: if mode == CondenseMode::Msa { RowMixing::Msa } else { RowMixing::Iisa },
                    ..cfg.isc.clone()
                };
                Some(Isc::new(&mut store, "adapt.isc", layout.segments(), e, &icfg, derive_seed(seed, "isc"))?)
            }
        };
        // With only the tabular path and no condensation, z = t and the
        // original head applies unchanged as a starting point.
        let reuse_head = isc.is_none() && layout.total() == e;
        let head_name = if reuse_head { HEAD_PREFIX } else { "adapt.head" };
        let head = Linear::new(
            &mut store,
            head_name,
            layout.total(),
            scenario.n_classes(),
            true,
            &mut rng_for(seed, head_name),
        )?;
        if reuse_head {
            for id in head.params() {
                let name = store.get(id).name.clone();
                let src = original.store().id(&name).ok_or_else(|| TabiiError::Graph(format!("missing {name}")))?;
                *store.value_mut(id) = original.store().value(src).clone();
            }
        }
        let pool = scenario.split().inference_pool();
        let refs: Vec<usize> = reference_rows(pool.len(), cfg.isc.reference_size, derive_seed(seed, "references"))
            .into_iter()
            .map(|i| pool[i])
            .collect();
        let references = scenario.encode_rows(&refs, View::Inference);
        Ok(AdaptedModel {
            config: cfg.clone(),
            columns,
            names,
            n_classes: scenario.n_classes(),
            n_original: scenario.n_original(),
            layout,
            store,
            tokenizer,
            stack,
            adapter,
            prompt,
            isc,
            head,
            references,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn adapter(&self) -> Option<&AdapterState> {
        self.adapter.as_ref()
    }

    /// Assembled `r`, condensed `z` and class scores for a batch whose rows
    /// are flagged as inference rows or not.
    pub fn forward(&self, g: &mut Graph, batch: &EncodedBatch, inference: &[bool]) -> Result<(Var, Var, Var)> {
        let n = batch.n_rows;
        let tokens = self.tokenizer.tokenize(g, batch)?;
        let seq = self.tokenizer.seq_len();
        let mask = absent_slot_mask(batch, self.n_original);
        let h = self.stack.forward_masked(g, tokens, seq, mask.as_ref(), None)?;
        let t = g.gather(h, &first_token_rows(n, seq))?;
        let p = match &self.adapter {
            Some(a) => Some(adapter_forward(g, a, batch, &self.columns, &self.names)?),
            None => None,
        };
        let l = match &self.prompt {
            Some((v, lin)) => {
                let c = g.constant(v.clone())?;
                let rows = g.gather(c, &vec![0; n])?;
                Some(lin.forward(g, rows)?)
            }
            None => None,
        };
        let r = assemble(g, &self.layout, t, p, l)?;
        let z = match &self.isc {
            Some(isc) => isc.forward(g, r, inference)?,
            None => r,
        };
        let s = self.head.forward(g, z)?;
        Ok((r, z, s))
    }

    /// Evaluate `f` on scored rows, each chunk joined with the fixed reference
    /// rows; a scored row attends only to itself and the references.
    fn eval_rows(&self, batch: &EncodedBatch, pick: impl Fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<Matrix> {
        if batch.n_cols != self.columns.len() {
            return Err(TabiiError::shape(
                "predict",
                format!("{} slots for an adapted model of arity {}", batch.n_cols, self.columns.len()),
            ));
        }
        let use_refs = matches!(self.config.components.condense, CondenseMode::Iisa);
        let k = if use_refs { self.references.n_rows } else { 0 };
        let mut rows = Vec::with_capacity(batch.n_rows);
        let idx: Vec<usize> = (0..batch.n_rows).collect();
        for chunk in idx.chunks(EVAL_CHUNK) {
            let sub = batch.select(chunk);
            let joined = if use_refs { EncodedBatch::concat(&[&self.references, &sub])? } else { sub };
            let mut flags = vec![true; k];
            flags.resize(k + chunk.len(), false);
            let mut g = Graph::new(&self.store);
            let (_, z, s) = self.forward(&mut g, &joined, &flags)?;
            let out = pick(&mut g, z, s)?;
            let m = g.value(out);
            rows.extend((k..k + chunk.len()).map(|i| m.row(i).to_vec()));
        }
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, 0));
        }
        Matrix::from_rows(&rows)
    }

    pub fn predict_proba(&self, batch: &EncodedBatch) -> Result<Matrix> {
        self.eval_rows(batch, |g, _, s| g.softmax(s))
    }

    pub fn predict(&self, batch: &EncodedBatch) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict_proba(batch)?))
    }

    /// Condensed representations `z` (read before the head).
    pub fn representations(&self, batch: &EncodedBatch) -> Result<Matrix> {
        self.eval_rows(batch, |_, z, _| Ok(z))
    }

    /// Total loss and its breakdown for one step's train rows, pseudo rows and
    /// masked view of their concatenation.
    #[allow(clippy::too_many_arguments)]
    pub fn total_loss(
        &self,
        g: &mut Graph,
        train: &EncodedBatch,
        train_labels: &[usize],
        pseudo: &EncodedBatch,
        pseudo_labels: &[usize],
        masked: Option<&EncodedBatch>,
    ) -> Result<(Var, LossBreakdown)> {
        let cfg = &self.config;
        let (nt, np) = (train.n_rows, pseudo.n_rows);
        if train_labels.len() != nt || pseudo_labels.len() != np {
            return Err(TabiiError::shape("total_loss", "label counts differ from row counts"));
        }
        let joined = EncodedBatch::concat(&[train, pseudo])?;
        let mut flags = vec![false; nt];
        flags.resize(nt + np, true);
        let (_, z, s) = self.forward(g, &joined, &flags)?;
        let mut terms: Vec<(Var, &str)> = Vec::new();
        let mut bd = LossBreakdown::default();
        if nt > 0 {
            let st = g.gather(s, &(0..nt).collect::<Vec<_>>())?;
            let ce = g.cross_entropy(st, train_labels, &vec![1.0 / nt as f64; nt])?;
            terms.push((ce, "ce_train"));
        }
        if np > 0 && cfg.pseudo_lambda > 0.0 {
            // Without train rows the pseudo term is the only supervised one.
            let lambda = if cfg.test_only { 1.0 } else { cfg.pseudo_lambda };
            let sp = g.gather(s, &(nt..nt + np).collect::<Vec<_>>())?;
            let ce = g.cross_entropy(sp, pseudo_labels, &vec![lambda / np as f64; np])?;
            terms.push((ce, "ce_pseudo"));
        }
        if let Some(mv) = masked {
            if cfg.components.contrastive && cfg.alpha > 0.0 {
                if mv.n_rows != nt + np {
                    return Err(TabiiError::shape("total_loss", "masked view row count"));
                }
                let (_, zm, sm) = self.forward(g, mv, &flags)?;
                let (a, b) = match cfg.contrastive_target {
                    ContrastiveTarget::Scores => (s, sm),
                    ContrastiveTarget::Representation => (z, zm),
                };
                let c = contrastive_loss(g, a, b, cfg.tau)?;
                let c = g.scale(c, cfg.alpha)?;
                terms.push((c, "contrastive"));
            }
        }
        if let Some(a) = &self.adapter {
            let e = ewc_loss(g, a)?;
            terms.push((e, "ewc"));
        }
        let mut total: Option<Var> = None;
        for (v, name) in &terms {
            let x = g.value(*v).item();
            match *name {
                "ce_train" => bd.ce_train = x,
                "ce_pseudo" => bd.ce_pseudo = x,
                "contrastive" => bd.contrastive = x,
                _ => bd.ewc = x,
            }
            total = Some(match total {
                Some(t) => g.add(t, *v)?,
                None => *v,
            });
        }
        let total = total.ok_or_else(|| TabiiError::Empty("no loss term is active".into()))?;
        bd.total = g.value(total).item();
        Ok((total, bd))
    }
}

impl Classifier for AdaptedModel {
    fn predict_batch(&self, batch: &EncodedBatch) -> Result<Vec<usize>> {
        self.predict(batch)
    }
}

/// What adaptation produced besides the model.
#[derive(Clone, Debug)]
pub struct AdaptReport {
    pub log: Vec<LogRecord>,
    pub pseudo_count: usize,
    pub pseudo_mean_confidence: f64,
    pub base_losses: Vec<f64>,
    /// Validation cross-entropy after each epoch, when epoch selection is on.
    pub val_losses: Vec<f64>,
    pub best_epoch: usize,
}

/// Pretrain the base encoder on the scenario's train rows (or, in test-only
/// mode, on the unlabeled inference pool), at the backbone width.
pub fn prepare_base(
    scenario: &IncrementalScenario,
    original: &OriginalModel,
    cfg: &AdaptationConfig,
    seed: u64,
) -> Result<PretrainedBase> {
    let corpus = if cfg.test_only {
        CorpusTable {
            batch: scenario.encode_rows(&scenario.split().inference_pool(), View::Inference),
            columns: column_infos(scenario, View::Inference),
            names: scenario.column_specs(View::Inference).iter().map(|c| c.name.clone()).collect(),
        }
    } else {
        default_corpus(scenario)
    };
    let bcfg = BaseEncoderConfig {
        dim: original.config.embed_dim,
        ..cfg.base.clone()
    };
    pretrain_base_encoder(&[corpus], &bcfg, derive_seed(seed, "base"))
}

/// Adapt `original` to the scenario's incremental columns.
pub fn adapt(
    scenario: &IncrementalScenario,
    original: &OriginalModel,
    cfg: &AdaptationConfig,
    seed: u64,
) -> Result<(AdaptedModel, AdaptReport)> {
    let base = match cfg.components.adapter {
        AdapterMode::Trainable => Some(prepare_base(scenario, original, cfg, seed)?),
        AdapterMode::Off => None,
    };
    adapt_with_base(scenario, original, base.as_ref(), cfg, seed)
}

/// [`adapt`] with a given pretrained base encoder.
pub fn adapt_with_base(
    scenario: &IncrementalScenario,
    original: &OriginalModel,
    base: Option<&PretrainedBase>,
    cfg: &AdaptationConfig,
    seed: u64,
) -> Result<(AdaptedModel, AdaptReport)> {
    cfg.validate()?;
    let all_pseudo = generate_pseudo_labels(original, scenario)?;
    let pseudo = all_pseudo.filtered(cfg.pseudo_threshold);
    if pseudo.is_empty() && cfg.pseudo_lambda > 0.0 {
        return Err(TabiiError::Config("pseudo-label weight is positive but no pseudo-labeled rows remain".into()));
    }
    let (train, train_labels) = if cfg.test_only {
        (EncodedBatch::empty(scenario.arity(View::Inference)), Vec::new())
    } else {
        (
            zero_pad(&scenario.encode_split(Split::Train, View::Train), scenario.arity(View::Inference))?,
            scenario.train_labels(),
        )
    };
    if train.n_rows == 0 && pseudo.is_empty() {
        return Err(TabiiError::Empty("no rows to adapt on".into()));
    }
    let mut model = AdaptedModel::new(scenario, original, base, cfg, seed)?;
    let mut opt = Adam::with_lr(cfg.lr);
    let mut order_rng = rng_for(seed, "adapt/order");
    let mut mask_rng = rng_for(seed, "adapt/mask");
    let with_mask = cfg.components.contrastive && cfg.alpha > 0.0;
    // Test-only runs keep the step budget of a full run; only the split size is read.
    let steps = if cfg.test_only {
        scenario.split().train.len().div_ceil(cfg.train_batch).max(pseudo.len().div_ceil(cfg.pseudo_batch))
    } else {
        train.n_rows.div_ceil(cfg.train_batch)
    };
    let mut train_order: Vec<usize> = (0..train.n_rows).collect();
    let mut pseudo_order: Vec<usize> = (0..pseudo.len()).collect();
    let mut pseudo_pos = pseudo.len();
    let mut log = Vec::with_capacity(cfg.epochs * steps);
    let mut step = 0;
    let val = if cfg.select_on_val && !cfg.test_only {
        let rows = zero_pad(&scenario.encode_split(Split::Val, View::Train), scenario.arity(View::Inference))?;
        Some((rows, scenario.val_labels())).filter(|(r, _)| r.n_rows > 0)
    } else {
        None
    };
    let mut val_losses = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        train_order.shuffle(&mut order_rng);
        for s in 0..steps {
            let ti: &[usize] = if train.n_rows > 0 {
                let lo = s * cfg.train_batch;
                &train_order[lo..(lo + cfg.train_batch).min(train.n_rows)]
            } else {
                &[]
            };
            let mut pi = Vec::with_capacity(cfg.pseudo_batch);
            while pi.len() < cfg.pseudo_batch.min(pseudo.len()) {
                if pseudo_pos == pseudo.len() {
                    pseudo_order.shuffle(&mut order_rng);
                    pseudo_pos = 0;
                }
                pi.push(pseudo_order[pseudo_pos]);
                pseudo_pos += 1;
            }
            let tb = train.select(ti);
            let tl: Vec<usize> = ti.iter().map(|&i| train_labels[i]).collect();
            let pb = pseudo.batch.select(&pi);
            let pl: Vec<usize> = pi.iter().map(|&i| pseudo.labels[i]).collect();
            let masked = if with_mask {
                Some(masked_view(&EncodedBatch::concat(&[&tb, &pb])?, cfg.mask_rate, &mut mask_rng))
            } else {
                None
            };
            let (grads, bd) = {
                let mut g = Graph::new(&model.store);
                let (loss, bd) = model.total_loss(&mut g, &tb, &tl, &pb, &pl, masked.as_ref())?;
                (g.backward(loss)?, bd)
            };
            model.store.accumulate(&grads);
            opt.step(&mut model.store);
            log.push(LogRecord {
                epoch,
                step,
                loss_total: bd.total,
                loss_ce_train: bd.ce_train,
                loss_ce_pseudo: bd.ce_pseudo,
                loss_contrastive: bd.contrastive,
                loss_ewc: bd.ewc,
            });
            step += 1;
        }
        if let Some((rows, labels)) = &val {
            let v = mean_cross_entropy(&model.predict_proba(rows)?, labels);
            val_losses.push(v);
            if best.as_ref().is_none_or(|b| v < b.0) {
                best = Some((v, epoch, model.store.clone()));
            }
        }
    }
    let best_epoch = match best {
        Some((_, e, store)) => {
            model.store = store;
            e
        }
        None => cfg.epochs - 1,
    };
    let n = all_pseudo.len().max(1) as f64;
    let report = AdaptReport {
        log,
        pseudo_count: pseudo.len(),
        pseudo_mean_confidence: all_pseudo.confidence.iter().sum::<f64>() / n,
        base_losses: base.map(|b| b.epoch_losses.clone()).unwrap_or_default(),
        val_losses,
        best_epoch,
    };
    Ok((model, report))
}

fn mean_cross_entropy(proba: &Matrix, labels: &[usize]) -> f64 {
    let n = labels.len().max(1) as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -proba.get(i, y).max(1e-12).ln())
        .sum::<f64>()
        / n
}

/// Accuracy of the adapted model on TestFromTest through the scoring path.
pub fn score_adapted(model: &AdaptedModel, scenario: &IncrementalScenario) -> Result<f64> {
    let test = scenario.encode_split(Split::TestFromTest, View::Inference);
    scenario.score(&model.predict(&test)?)
}

/// Fraction of pseudo-labels equal to `truth`, for test oracles.
pub fn pseudo_accuracy(p: &PseudoLabels, truth: &[usize]) -> f64 {
    accuracy(&p.labels, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_scenario, Cell, NormalizedRow, SplitSpec};
    use crate::encoder::{train_original, BackboneConfig, TrainConfig};
    use crate::rng::rng_from_seed;
    use crate::synthetic;

    #[test]
    fn masked_view_rate_and_rules() {
        let mut b = EncodedBatch::empty(10);
        for i in 0..1000 {
            b.push(&NormalizedRow {
                values: vec![1.0 + i as f64; 10],
                categories: vec![3; 10],
                missing: vec![false; 10],
            });
        }
        let m = masked_view(&b, 0.3, &mut rng_from_seed(1));
        let hidden = m.values.iter().filter(|&&v| v == 0.0).count();
        let frac = hidden as f64 / 10_000.0;
        assert!((0.285..=0.315).contains(&frac), "{frac}");
        for k in 0..10_000 {
            assert_eq!(m.values[k] == 0.0, m.categories[k] == UNK);
        }
        for i in 0..1000 {
            assert!((0..10).any(|j| m.values[i * 10 + j] != 0.0));
        }
        let all = masked_view(&b, 0.99, &mut rng_from_seed(2));
        for i in 0..1000 {
            assert!((0..10).any(|j| all.values[i * 10 + j] != 0.0));
        }
    }

    fn contrastive_value(h: Vec<Vec<f64>>, ht: Vec<Vec<f64>>, tau: f64) -> Result<f64> {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Matrix::from_rows(&h)?)?;
        let b = g.constant(Matrix::from_rows(&ht)?)?;
        let l = contrastive_loss(&mut g, a, b, tau)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn contrastive_reference_values() {
        let v = contrastive_value(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((v - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((v - 0.3133).abs() < 1e-4);
        for n in [2usize, 5, 17] {
            let same = vec![vec![0.3, -0.7, 1.1]; n];
            let v = contrastive_value(same.clone(), same, 0.2).unwrap();
            assert!((v - (n as f64).ln()).abs() < 1e-12);
        }
        assert!(contrastive_value(vec![vec![0.0, 0.0]], vec![vec![1.0, 0.0]], 1.0).is_err());
    }

    #[test]
    fn gradcheck_contrastive() {
        let mut rng = rng_from_seed(4);
        let mut store = ParamStore::new();
        let a = store.add("a", Matrix::normal(4, 3, 1.0, &mut rng), true).unwrap();
        let b = store.add("b", Matrix::normal(4, 3, 1.0, &mut rng), true).unwrap();
        let report = crate::tensor::gradcheck::check_gradients(&mut store, &[a, b], 1e-5, None, |g| {
            let (x, y) = (g.param(a), g.param(b));
            contrastive_loss(g, x, y, 0.2)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    fn small_backbone() -> BackboneConfig {
        BackboneConfig {
            embed_dim: 8,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            dropout: 0.0,
        }
    }

    fn quick_train() -> TrainConfig {
        TrainConfig {
            max_epochs: 8,
            batch_size: 64,
            lr: 3e-3,
            patience: 4,
        }
    }

    fn small_adapt() -> AdaptationConfig {
        AdaptationConfig {
            epochs: 2,
            base: BaseEncoderConfig {
                layers: 1,
                heads: 2,
                epochs: 2,
                fisher_samples: 8,
                ..BaseEncoderConfig::default()
            },
            embedding: EmbeddingSource::Hash { dim: 16 },
            ..AdaptationConfig::default()
        }
    }

    fn informative(n: usize, seed: u64) -> IncrementalScenario {
        let d = synthetic::GaussianSpec::informative(n).generate(seed).unwrap();
        make_scenario(&d.table, &d.incremental_refs(), &SplitSpec::with_seed(seed)).unwrap()
    }

    #[test]
    fn pseudo_labels_on_separable_data() {
        let table = synthetic::separable(1200, 0.05, 3).unwrap();
        let sc = make_scenario(&table, &[], &SplitSpec::with_seed(3)).unwrap();
        let (orig, _) = train_original(&sc, &small_backbone(), &quick_train(), 3).unwrap();
        let p = generate_pseudo_labels(&orig, &sc).unwrap();
        let y = table.target_index();
        let truth: Vec<usize> = p
            .rows
            .iter()
            .map(|&r| match &table.rows()[r][y] {
                Cell::Num(v) => *v as usize,
                _ => unreachable!(),
            })
            .collect();
        assert!(pseudo_accuracy(&p, &truth) >= 0.9);
        assert!(p.confidence.iter().all(|&c| (0.5..=1.0).contains(&c)));
        let audit = sc.audit().snapshot();
        assert_eq!(audit.labels(Split::TrainFromTest), 0);
        assert_eq!(audit.labels(Split::ValFromTest), 0);
        assert_eq!(p.filtered(1.1).len(), 0);
    }

    #[test]
    fn breakdown_sums_and_ewc_starts_at_zero() {
        let sc = informative(600, 2);
        let (orig, _) = train_original(&sc, &small_backbone(), &quick_train(), 2).unwrap();
        let cfg = small_adapt();
        let base = prepare_base(&sc, &orig, &cfg, 2).unwrap();
        let model = AdaptedModel::new(&sc, &orig, Some(&base), &cfg, 2).unwrap();
        let p = generate_pseudo_labels(&orig, &sc).unwrap();
        let tr = zero_pad(&sc.encode_split(Split::Train, View::Train), sc.arity(View::Inference)).unwrap();
        let idx: Vec<usize> = (0..16).collect();
        let (tb, pb) = (tr.select(&idx), p.batch.select(&idx));
        let tl: Vec<usize> = sc.train_labels()[..16].to_vec();
        let pl = p.labels[..16].to_vec();
        let mv = masked_view(&EncodedBatch::concat(&[&tb, &pb]).unwrap(), 0.3, &mut rng_from_seed(5));
        let mut g = Graph::new(model.store());
        let (loss, bd) = model.total_loss(&mut g, &tb, &tl, &pb, &pl, Some(&mv)).unwrap();
        assert_eq!(bd.ewc, 0.0);
        assert!((bd.ce_train + bd.ce_pseudo + bd.contrastive + bd.ewc - bd.total).abs() < 1e-10);
        assert_eq!(g.value(loss).item(), bd.total);
        assert!(bd.ce_pseudo > 0.0 && bd.contrastive > 0.0);
    }

    #[test]
    fn adaptation_runs_deterministically_and_respects_audit() {
        let sc = informative(600, 4);
        let (orig, _) = train_original(&sc, &small_backbone(), &quick_train(), 4).unwrap();
        sc.audit().reset();
        let cfg = small_adapt();
        let (m1, r1) = adapt(&sc, &orig, &cfg, 9).unwrap();
        let audit = sc.audit().snapshot();
        for s in [Split::TrainFromTest, Split::ValFromTest, Split::TestFromTest] {
            assert_eq!(audit.labels(s), 0, "{s:?}");
        }
        let (m2, r2) = adapt(&sc, &orig, &cfg, 9).unwrap();
        assert_eq!(r1.log, r2.log);
        let test = sc.encode_split(Split::TestFromTest, View::Inference);
        assert_eq!(m1.predict_proba(&test).unwrap(), m2.predict_proba(&test).unwrap());
        assert_eq!(r1.log.len(), 2 * sc.split().train.len().div_ceil(64));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_log(&path, &r1.log).unwrap();
        let first = fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
        let v: serde_json::Value = serde_json::from_str(&first).unwrap();
        for k in ["epoch", "step", "loss_total", "loss_ce_train", "loss_ce_pseudo", "loss_contrastive", "loss_ewc"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    #[test]
    fn scored_rows_are_independent_of_batch_composition() {
        let sc = informative(600, 5);
        let (orig, _) = train_original(&sc, &small_backbone(), &quick_train(), 5).unwrap();
        let cfg = AdaptationConfig {
            epochs: 1,
            ..small_adapt()
        };
        let (m, _) = adapt(&sc, &orig, &cfg, 1).unwrap();
        let test = sc.encode_split(Split::TestFromTest, View::Inference);
        let all = m.predict_proba(&test).unwrap();
        let one = m.predict_proba(&test.select(&[7])).unwrap();
        for (a, b) in all.row(7).iter().zip(one.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_rows_match_original_before_training() {
        let sc = informative(400, 7);
        let (orig, _) = train_original(&sc, &small_backbone(), &quick_train(), 7).unwrap();
        let cfg = AdaptationConfig {
            components: ablation_components(Ablation::All),
            ..small_adapt()
        };
        let m = AdaptedModel::new(&sc, &orig, None, &cfg, 1).unwrap();
        let rows = sc.encode_split(Split::Val, View::Train);
        let padded = zero_pad(&rows, sc.arity(View::Inference)).unwrap();
        let a = orig.predict_proba(&rows).unwrap();
        let b = m.predict_proba(&padded).unwrap();
        assert!(a.zip_map(&b, |x, y| (x - y).abs()).max_abs() < 1e-12);
    }

    #[test]
    fn duplicated_pseudo_rows_leave_the_loss_unchanged() {
        let sc = informative(400, 8);
        let (orig, _) = train_original(&sc, &small_backbone(), &quick_train(), 8).unwrap();
        let cfg = AdaptationConfig {
            components: Components {
                contrastive: false,
                ..Components::default()
            },
            ..small_adapt()
        };
        let base = prepare_base(&sc, &orig, &cfg, 8).unwrap();
        let m = AdaptedModel::new(&sc, &orig, Some(&base), &cfg, 8).unwrap();
        let p = generate_pseudo_labels(&orig, &sc).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let pb = p.batch.select(&idx);
        let pl = p.labels[..8].to_vec();
        let pb2 = EncodedBatch::concat(&[&pb, &pb]).unwrap();
        let pl2: Vec<usize> = pl.iter().chain(&pl).copied().collect();
        let empty = EncodedBatch::empty(pb.n_cols);
        let mut g = Graph::new(m.store());
        let (_, a) = m.total_loss(&mut g, &empty, &[], &pb, &pl, None).unwrap();
        let (_, b) = m.total_loss(&mut g, &empty, &[], &pb2, &pl2, None).unwrap();
        assert!((a.ce_pseudo - b.ce_pseudo).abs() < 1e-12, "{a:?} {b:?}");
    }

    #[test]
    fn switched_off_terms_leave_train_ce() {
        let sc = informative(400, 9);
        let (orig, _) = train_original(&sc, &small_backbone(), &quick_train(), 9).unwrap();
        let cfg = AdaptationConfig {
            alpha: 0.0,
            pseudo_lambda: 0.0,
            ..small_adapt()
        };
        let base = prepare_base(&sc, &orig, &cfg, 9).unwrap();
        let m = AdaptedModel::new(&sc, &orig, Some(&base), &cfg, 9).unwrap();
        let tr = zero_pad(&sc.encode_split(Split::Train, View::Train), sc.arity(View::Inference)).unwrap();
        let idx: Vec<usize> = (0..12).collect();
        let tb = tr.select(&idx);
        let tl = sc.train_labels()[..12].to_vec();
        let p = generate_pseudo_labels(&orig, &sc).unwrap();
        let pb = p.batch.select(&idx);
        let mv = masked_view(&EncodedBatch::concat(&[&tb, &pb]).unwrap(), 0.3, &mut rng_from_seed(1));
        let mut g = Graph::new(m.store());
        let (_, bd) = m.total_loss(&mut g, &tb, &tl, &pb, &p.labels[..12], Some(&mv)).unwrap();
        assert_eq!(bd.total, bd.ce_train);
        assert_eq!((bd.ce_pseudo, bd.contrastive, bd.ewc), (0.0, 0.0, 0.0));
    }

    #[test]
    fn gradcheck_total_loss_subset() {
        let sc = informative(300, 10);
        let (orig, _) = train_original(&sc, &small_backbone(), &quick_train(), 10).unwrap();
        let cfg = small_adapt();
        let base = prepare_base(&sc, &orig, &cfg, 10).unwrap();
        let mut m = AdaptedModel::new(&sc, &orig, Some(&base), &cfg, 10).unwrap();
        let mut rng = rng_from_seed(3);
        if let Some(a) = m.adapter.clone() {
            for f in a.factors() {
                let (r, c) = m.store.value(f.b).shape();
                *m.store.value_mut(f.b) = Matrix::normal(r, c, 0.05, &mut rng);
            }
        }
        let tr = zero_pad(&sc.encode_split(Split::Train, View::Train), sc.arity(View::Inference)).unwrap();
        let idx: Vec<usize> = (0..4).collect();
        let tb = tr.select(&idx);
        let tl = sc.train_labels()[..4].to_vec();
        let p = generate_pseudo_labels(&orig, &sc).unwrap();
        let pb = p.batch.select(&idx);
        let pl = p.labels[..4].to_vec();
        let mv = masked_view(&EncodedBatch::concat(&[&tb, &pb]).unwrap(), 0.3, &mut rng_from_seed(2));
        let ids = m.store.trainable_ids();
        let model = m.clone();
        let report = crate::tensor::gradcheck::check_gradients(&mut m.store, &ids, 1e-5, Some(3), |g| {
            model.total_loss(g, &tb, &tl, &pb, &pl, Some(&mv)).map(|r| r.0)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn config_errors() {
        let sc = informative(300, 6);
        let (orig, _) = train_original(&sc, &small_backbone(), &quick_train(), 6).unwrap();
        let cfg = AdaptationConfig {
            pseudo_threshold: 2.0,
            ..small_adapt()
        };
        assert!(matches!(adapt(&sc, &orig, &cfg, 1), Err(TabiiError::Config(_))));
        let cfg = AdaptationConfig {
            tau: 0.0,
            ..small_adapt()
        };
        assert!(adapt(&sc, &orig, &cfg, 1).is_err());
        let cfg = AdaptationConfig {
            prompt_template: "{target}".into(),
            ..small_adapt()
        };
        assert!(adapt(&sc, &orig, &cfg, 1).is_err());
    }
}
