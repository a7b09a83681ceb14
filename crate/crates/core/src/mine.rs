//! Neural mutual-information estimation with the Donsker-Varadhan bound
//! `I(A;B) ≥ E_joint[T] − log E_marginal[e^T]`, plus probes that measure
//! `I(Z;Y)` and `I(X;Z)` for trained models.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::AdaptedModel;
use crate::dataset::{IncrementalScenario, Split, View};
use crate::encoder::{column_infos, raw_matrix, representations, DirectModel, OriginalModel};
use crate::error::{Result, TabiiError};
use crate::rng::rng_for;
use crate::tensor::nn::Linear;
use crate::tensor::{Adam, Graph, Matrix, ParamId, ParamStore, Var};

/// Statistic outputs are clamped to this range before exponentiation.
pub const T_CLAMP: f64 = 20.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
    Gelu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MineConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// Fraction of the trace averaged into the estimate.
    pub tail_fraction: f64,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            steps: 2000,
            batch_size: 512,
            lr: 1e-4,
            ema_decay: 0.99,
            tail_fraction: 0.1,
        }
    }
}

impl MineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TabiiError::Config(format!("mine: {m}")));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be nonempty and ≥ 1");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema decay must lie in (0,1)");
        }
        if self.steps == 0 || self.batch_size < 2 {
            return bad("need at least one step and a batch of 2");
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return bad("tail fraction must lie in (0,1]");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// `mean(joint) − log mean(exp(marginal))`, with a max-shift for stability.
pub fn dv_bound(t_joint: &[f64], t_marginal: &[f64]) -> Result<f64> {
    if t_joint.is_empty() || t_marginal.is_empty() {
        return Err(TabiiError::Empty("dv_bound batch".into()));
    }
    let mj = t_joint.iter().sum::<f64>() / t_joint.len() as f64;
    let mx = t_marginal.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s = t_marginal.iter().map(|t| (t - mx).exp()).sum::<f64>() / t_marginal.len() as f64;
    Ok(mj - (mx + s.ln()))
}

/// The statistic `T(a, b)`: an MLP over the concatenated pair.
#[derive(Clone, Debug)]
pub struct StatisticsNet {
    layers: Vec<Linear>,
    activation: Activation,
}

impl StatisticsNet {
    pub fn new(store: &mut ParamStore, in_dim: usize, cfg: &MineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, "mine/net");
        let mut dims = vec![in_dim];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("mine.l{i}"), w[0], w[1], true, &mut rng))
            .collect::<Result<_>>()?;
        Ok(StatisticsNet {
            layers,
            activation: cfg.activation,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    /// Clamped statistic for paired rows of `a` and `b`, one column.
    pub fn forward(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let mut h = g.concat_cols(&[a, b])?;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i < last {
                h = match self.activation {
                    Activation::Relu => g.relu(h)?,
                    Activation::Tanh => g.tanh(h)?,
                    Activation::Gelu => g.gelu(h)?,
                };
            }
        }
        g.clamp(h, -T_CLAMP, T_CLAMP)
    }

    /// Negated surrogate objective `mean T_joint − mean e^{T_marg} / ema`,
    /// whose gradient replaces `∇ log E e^T` by its moving-average estimate.
    /// Returns the loss and the two statistic columns.
    pub fn surrogate_loss(
        &self,
        g: &mut Graph,
        a: Var,
        b: Var,
        b_shuffled: Var,
        ema: f64,
    ) -> Result<(Var, Var, Var)> {
        let tj = self.forward(g, a, b)?;
        let tm = self.forward(g, a, b_shuffled)?;
        Ok((surrogate(g, tj, tm, ema)?, tj, tm))
    }
}

fn surrogate(g: &mut Graph, tj: Var, tm: Var, ema: f64) -> Result<Var> {
    let mj = g.mean(tj)?;
    let e = g.exp(tm)?;
    let me = g.mean(e)?;
    let me = g.scale(me, 1.0 / ema)?;
    let obj = g.sub(mj, me)?;
    g.scale(obj, -1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    pub trace: Vec<f64>,
    pub n_samples: usize,
    pub config_fingerprint: String,
}

/// Z-score each column; constant columns become zero.
fn standardize(m: &Matrix) -> Matrix {
    let (n, d) = m.shape();
    let mut out = m.clone();
    for j in 0..d {
        let mean = (0..n).map(|i| m.get(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (m.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        for i in 0..n {
            out.set(i, j, if sd > 1e-12 { (m.get(i, j) - mean) / sd } else { 0.0 });
        }
    }
    out
}

/// Train a statistics network on paired rows of `a` and `b` and report the
/// mean of the last `tail_fraction` of the per-step bound trace.
pub fn mine_estimate(a: &Matrix, b: &Matrix, cfg: &MineConfig, seed: u64) -> Result<MiEstimate> {
    cfg.validate()?;
    let n = a.rows();
    if b.rows() != n {
        return Err(TabiiError::shape("mine_estimate", format!("{n} vs {} samples", b.rows())));
    }
    if n < 2 {
        return Err(TabiiError::InvalidArgument("mine_estimate needs at least 2 samples".into()));
    }
    let (a, b) = (standardize(a), standardize(b));
    let mut store = ParamStore::new();
    let net = StatisticsNet::new(&mut store, a.cols() + b.cols(), cfg, seed)?;
    let mut opt = Adam::with_lr(cfg.lr);
    let mut rng = rng_for(seed, "mine/batches");
    let bs = cfg.batch_size.min(n);
    let mut ema: Option<f64> = None;
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let idx = sample(&mut rng, n, bs).into_vec();
        let mut perm = idx.clone();
        perm.shuffle(&mut rng);
        let grads = {
            let mut g = Graph::new(&store);
            let va = g.constant(a.select_rows(&idx))?;
            let vb = g.constant(b.select_rows(&idx))?;
            let vm = g.constant(b.select_rows(&perm))?;
            let tj = net.forward(&mut g, va, vb)?;
            let tm = net.forward(&mut g, va, vm)?;
            // The current batch enters the average before it scales the gradient.
            let me = g.value(tm).data().iter().map(|x| x.exp()).sum::<f64>() / bs as f64;
            let e = ema.map_or(me, |prev| cfg.ema_decay * prev + (1.0 - cfg.ema_decay) * me);
            ema = Some(e);
            let loss = surrogate(&mut g, tj, tm, e)?;
            trace.push(dv_bound(g.value(tj).data(), g.value(tm).data())?);
            g.backward(loss)?
        };
        store.accumulate(&grads);
        opt.step(&mut store);
    }
    let tail = ((cfg.steps as f64 * cfg.tail_fraction).ceil() as usize).clamp(1, cfg.steps);
    let value = trace[cfg.steps - tail..].iter().sum::<f64>() / tail as f64;
    Ok(MiEstimate {
        value,
        trace,
        n_samples: n,
        config_fingerprint: cfg.fingerprint(),
    })
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), n_classes);
    for (i, &y) in labels.iter().enumerate() {
        m.set(i, y, 1.0);
    }
    m
}

/// The four model families compared by the probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeVariant {
    /// Original-column model (discard).
    FtTrans,
    /// Linear-embedding model over all columns (direct).
    FtTransStar,
    /// Adapted model without sample condensation.
    Placeholder,
    Tabii,
}

impl ProbeVariant {
    pub const ALL: [ProbeVariant; 4] = [
        ProbeVariant::FtTrans,
        ProbeVariant::FtTransStar,
        ProbeVariant::Placeholder,
        ProbeVariant::Tabii,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeVariant::FtTrans => "ft_trans",
            ProbeVariant::FtTransStar => "ft_trans_star",
            ProbeVariant::Placeholder => "placeholder",
            ProbeVariant::Tabii => "tabii",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Which {
    #[serde(rename = "I_ZY")]
    IZy,
    #[serde(rename = "I_XZ")]
    IXz,
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Which::IZy => "I_ZY",
            Which::IXz => "I_XZ",
        }
    }
}

/// A trained model in one of the probed families.
#[derive(Clone, Copy, Debug)]
pub enum ProbedModel<'a> {
    FtTrans(&'a OriginalModel),
    FtTransStar(&'a DirectModel),
    Placeholder(&'a AdaptedModel),
    Tabii(&'a AdaptedModel),
}

impl ProbedModel<'_> {
    pub fn variant(&self) -> ProbeVariant {
        match self {
            ProbedModel::FtTrans(_) => ProbeVariant::FtTrans,
            ProbedModel::FtTransStar(_) => ProbeVariant::FtTransStar,
            ProbedModel::Placeholder(_) => ProbeVariant::Placeholder,
            ProbedModel::Tabii(_) => ProbeVariant::Tabii,
        }
    }

    /// Representation before the head and the raw input it was computed
    /// from, for the TestFromTest rows.
    pub fn test_representations(&self, scenario: &IncrementalScenario) -> Result<(Matrix, Matrix)> {
        let view = match self {
            ProbedModel::FtTrans(_) => View::Train,
            _ => View::Inference,
        };
        let batch = scenario.encode_split(Split::TestFromTest, view);
        let x = raw_matrix(&batch, &column_infos(scenario, view));
        let z = match self {
            ProbedModel::FtTrans(m) => {
                if !m.is_trained() {
                    return Err(TabiiError::Untrained("original model".into()));
                }
                representations(*m, &batch)?
            }
            ProbedModel::FtTransStar(m) => {
                if !m.is_trained() {
                    return Err(TabiiError::Untrained("direct model".into()));
                }
                representations(*m, &batch)?
            }
            ProbedModel::Placeholder(m) | ProbedModel::Tabii(m) => m.representations(&batch)?,
        };
        Ok((z, x))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub variant: ProbeVariant,
    pub which: Which,
    pub value_nats: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub config: MineConfig,
}

/// Estimate `I(Z;Y)` (labels one-hot) or `I(X;Z)` on the TestFromTest rows.
/// Reading labels for `I(Z;Y)` counts as a TestFromTest label access, so
/// call this only after the model has been scored.
pub fn probe_model(
    model: ProbedModel,
    scenario: &IncrementalScenario,
    which: Which,
    cfg: &MineConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let (z, x) = model.test_representations(scenario)?;
    let other = match which {
        Which::IZy => one_hot(&scenario.reveal_labels(Split::TestFromTest), scenario.n_classes()),
        Which::IXz => x,
    };
    let est = mine_estimate(&z, &other, cfg, seed)?;
    Ok(ProbeReport {
        variant: model.variant(),
        which,
        value_nats: est.value,
        n_samples: est.n_samples,
        seed,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tensor::gradcheck::check_gradients;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussians(n: usize, rho: f64, seed: u64) -> (Matrix, Matrix) {
        let mut rng = rng_from_seed(seed);
        let mut a = Matrix::zeros(n, 1);
        let mut b = Matrix::zeros(n, 1);
        for i in 0..n {
            let x: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            a.set(i, 0, x);
            b.set(i, 0, rho * x + (1.0 - rho * rho).sqrt() * e);
        }
        (a, b)
    }

    #[test]
    fn dv_bound_hand_values() {
        assert_eq!(dv_bound(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!((dv_bound(&[1.0, 2.0], &[0.0, 0.0]).unwrap() - 1.5).abs() < 1e-15);
        assert!(dv_bound(&[3.7; 5], &[3.7; 4]).unwrap().abs() < 1e-12);
        let base = dv_bound(&[0.3, -1.0, 2.0], &[0.5, 0.1]).unwrap();
        let shifted = dv_bound(&[5.3, 4.0, 7.0], &[5.5, 5.1]).unwrap();
        assert!((base - shifted).abs() < 1e-12);
        assert!(dv_bound(&[], &[1.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(MineConfig::default().validate().is_ok());
        for bad in [
            MineConfig { hidden: vec![], ..Default::default() },
            MineConfig { hidden: vec![8, 0], ..Default::default() },
            MineConfig { ema_decay: 1.0, ..Default::default() },
            MineConfig { batch_size: 1, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn gradcheck_statistics_network() {
        let cfg = MineConfig { hidden: vec![5, 4], activation: Activation::Tanh, ..Default::default() };
        let mut store = ParamStore::new();
        let net = StatisticsNet::new(&mut store, 3, &cfg, 1).unwrap();
        let mut rng = rng_from_seed(4);
        let a = Matrix::normal(6, 2, 1.0, &mut rng);
        let b = Matrix::normal(6, 1, 1.0, &mut rng);
        let m = b.select_rows(&[3, 1, 5, 0, 2, 4]);
        let ids = net.params();
        let report = check_gradients(&mut store, &ids, 1e-5, None, |g| {
            let (va, vb, vm) = (g.constant(a.clone())?, g.constant(b.clone())?, g.constant(m.clone())?);
            Ok(net.surrogate_loss(g, va, vb, vm, 1.3)?.0)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = MineConfig::default();
        assert!(mine_estimate(&Matrix::zeros(1, 1), &Matrix::zeros(1, 1), &cfg, 0).is_err());
        assert!(mine_estimate(&Matrix::zeros(3, 1), &Matrix::zeros(4, 1), &cfg, 0).is_err());
    }

    #[test]
    fn correlated_gaussians_near_closed_form() {
        let (a, b) = gaussians(5000, 0.9, 1);
        let truth = -0.5 * (1.0f64 - 0.81).ln();
        let est = mine_estimate(&a, &b, &MineConfig::default(), 7).unwrap();
        assert!((est.value - truth).abs() <= 0.15 * truth, "{} vs {truth}", est.value);
        assert!(est.trace.iter().all(|v| v.is_finite()));
        assert_eq!(est.trace.len(), 2000);
    }

    #[test]
    fn independent_gaussians_near_zero() {
        let (a, b) = gaussians(5000, 0.0, 2);
        let est = mine_estimate(&a, &b, &MineConfig::default(), 7).unwrap();
        assert!((-0.02..=0.05).contains(&est.value), "{}", est.value);
    }

    #[test]
    fn discrete_copy_approaches_entropy() {
        let mut rng = rng_from_seed(3);
        let x: Vec<usize> = (0..5000).map(|_| rng.random_range(0..8)).collect();
        let a = one_hot(&x, 8);
        let est = mine_estimate(&a, &a.clone(), &MineConfig::default(), 5).unwrap();
        assert!(est.value >= 1.8 && est.value <= 8f64.ln() + 0.05, "{}", est.value);
    }

    #[test]
    fn processing_does_not_add_information() {
        // X uniform on 8 symbols, Z = X, g(Z) = Z mod 2.
        let mut rng = rng_from_seed(6);
        let x: Vec<usize> = (0..3000).map(|_| rng.random_range(0..8)).collect();
        let gz: Vec<usize> = x.iter().map(|v| v % 2).collect();
        let cfg = MineConfig { steps: 1000, ..Default::default() };
        let full = mine_estimate(&one_hot(&x, 8), &one_hot(&x, 8), &cfg, 1).unwrap().value;
        let coarse = mine_estimate(&one_hot(&x, 8), &one_hot(&gz, 2), &cfg, 1).unwrap().value;
        assert!(coarse <= full + 0.05, "{coarse} vs {full}");
        assert!((coarse - 2f64.ln()).abs() < 0.1, "{coarse}");
    }

    #[test]
    fn estimates_are_deterministic_per_seed() {
        let (a, b) = gaussians(600, 0.5, 9);
        let cfg = MineConfig { steps: 50, ..Default::default() };
        let x = mine_estimate(&a, &b, &cfg, 3).unwrap();
        let y = mine_estimate(&a, &b, &cfg, 3).unwrap();
        assert_eq!(x, y);
        assert_ne!(x.trace, mine_estimate(&a, &b, &cfg, 4).unwrap().trace);
    }
}
