//! Information-condensation blocks. Each block runs self-attention over the
//! segment tokens of a row (`t`, `p`, `l`) and then attention across rows in
//! which a row may attend to itself and to inference rows only.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TabiiError};
use crate::rng::rng_for;
use crate::tensor::nn::{mask_from_fn, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tensor::{AttentionMask, Graph, ParamStore, Var};

/// What the cross-row stage of each block does.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowMixing {
    /// Attention over `{i} ∪ inference rows`.
    #[default]
    Iisa,
    /// A second segment self-attention; rows never exchange information.
    Msa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IscConfig {
    pub depth: usize,
    pub segment_heads: usize,
    pub ff_mult: usize,
    /// Inference rows joined to every evaluation batch.
    pub reference_size: usize,
    pub row_mixing: RowMixing,
}

impl Default for IscConfig {
    fn default() -> Self {
        IscConfig {
            depth: 2,
            segment_heads: 1,
            ff_mult: 2,
            reference_size: 64,
            row_mixing: RowMixing::Iisa,
        }
    }
}

/// Post-norm self-attention over the `segments` tokens of each row.
#[derive(Clone, Debug)]
pub struct SegmentAttention {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

impl SegmentAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, ff_mult: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, name);
        Ok(SegmentAttention {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, &mut rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, dim * ff_mult, &mut rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
        })
    }

    /// `x` is `n×(S·E)`; the result has the same shape.
    pub fn forward(&self, g: &mut Graph, x: Var, segments: usize) -> Result<Var> {
        let (n, w) = g.shape(x);
        if segments == 0 || w % segments != 0 {
            return Err(TabiiError::shape("msa", format!("width {w} not divisible into {segments} segments")));
        }
        let tokens = g.reshape(x, n * segments, w / segments)?;
        let a = self.attn.forward(g, tokens, segments, None, None)?;
        let h = g.add(tokens, a)?;
        let h = self.norm1.forward(g, h)?;
        let f = self.ff.forward(g, h, 0.0)?;
        let h = g.add(h, f)?;
        let h = self.norm2.forward(g, h)?;
        g.reshape(h, n, w)
    }
}

/// Allowed keys of every row: itself and the inference rows.
pub fn inference_mask(inference: &[bool]) -> AttentionMask {
    mask_from_fn(inference.len(), |i, j| i == j || inference[j])
}

/// Single-head attention across the rows of a batch with key set
/// `K(i) = {i} ∪ {j : inference[j]}`, output projection, residual and norm.
#[derive(Clone, Debug)]
pub struct Iisa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    norm: LayerNorm,
}

impl Iisa {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, name);
        Ok(Iisa {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, &mut rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, &mut rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, &mut rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, &mut rng)?,
            norm: LayerNorm::new(store, &format!("{name}.ln"), dim)?,
        })
    }

    /// Projected attention output before the residual.
    pub fn attend(&self, g: &mut Graph, x: Var, inference: &[bool]) -> Result<Var> {
        let a = self.mix(g, x, inference)?;
        self.o.forward(g, a)
    }

    /// Attention node alone (before the output projection); its weights are
    /// available through [`Graph::attention_probs`].
    pub fn mix(&self, g: &mut Graph, x: Var, inference: &[bool]) -> Result<Var> {
        let n = g.shape(x).0;
        if inference.len() != n {
            return Err(TabiiError::shape("iisa", format!("{} flags for {n} rows", inference.len())));
        }
        let mask = inference_mask(inference);
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        g.attention(q, k, v, n, 1, Some(&mask))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, inference: &[bool]) -> Result<Var> {
        let a = self.attend(g, x, inference)?;
        let h = g.add(x, a)?;
        self.norm.forward(g, h)
    }
}

#[derive(Clone, Debug)]
enum RowStage {
    Iisa(Iisa),
    Msa(SegmentAttention),
}

#[derive(Clone, Debug)]
pub struct IscBlock {
    pub msa: SegmentAttention,
    row: RowStage,
}

/// Stack of condensation blocks over `segments` tokens of width `segment_dim`.
#[derive(Clone, Debug)]
pub struct Isc {
    pub blocks: Vec<IscBlock>,
    pub segments: usize,
    pub segment_dim: usize,
    pub config: IscConfig,
}

impl Isc {
    pub fn new(store: &mut ParamStore, prefix: &str, segments: usize, segment_dim: usize, cfg: &IscConfig, seed: u64) -> Result<Self> {
        if cfg.depth == 0 || segments == 0 {
            return Err(TabiiError::Config("condensation needs depth ≥ 1 and at least one segment".into()));
        }
        let dim = segments * segment_dim;
        let blocks = (0..cfg.depth)
            .map(|b| {
                let name = format!("{prefix}.block{b}");
                let msa = SegmentAttention::new(store, &format!("{name}.msa"), segment_dim, cfg.segment_heads, cfg.ff_mult, seed)?;
                let row = match cfg.row_mixing {
                    RowMixing::Iisa => RowStage::Iisa(Iisa::new(store, &format!("{name}.iisa"), dim, seed)?),
                    RowMixing::Msa => RowStage::Msa(SegmentAttention::new(
                        store,
                        &format!("{name}.msa2"),
                        segment_dim,
                        cfg.segment_heads,
                        cfg.ff_mult,
                        seed,
                    )?),
                };
                Ok(IscBlock { msa, row })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Isc {
            blocks,
            segments,
            segment_dim,
            config: cfg.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.segments * self.segment_dim
    }

    /// `r` is `n×dim`; `inference[i]` marks rows other rows may attend to.
    pub fn forward(&self, g: &mut Graph, r: Var, inference: &[bool]) -> Result<Var> {
        if g.shape(r).1 != self.dim() {
            return Err(TabiiError::shape("isc", format!("width {} but expected {}", g.shape(r).1, self.dim())));
        }
        let mut h = r;
        for b in &self.blocks {
            h = b.msa.forward(g, h, self.segments)?;
            h = match &b.row {
                RowStage::Iisa(iisa) => iisa.forward(g, h, inference)?,
                RowStage::Msa(m) => m.forward(g, h, self.segments)?,
            };
        }
        Ok(h)
    }
}

/// Seeded choice of `k` reference rows out of an inference pool of `pool`
/// rows, returned in ascending order.
pub fn reference_rows(pool: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, "isc/reference");
    let mut idx = sample(&mut rng, pool, k.min(pool)).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::tensor::gradcheck::check_gradients;
    use crate::tensor::{Matrix, ParamId};

    fn identity_iisa(dim: usize) -> (ParamStore, Iisa) {
        let mut store = ParamStore::new();
        let iisa = Iisa::new(&mut store, "iisa", dim, 1).unwrap();
        for lin in [&iisa.q, &iisa.k, &iisa.v, &iisa.o] {
            let mut eye = Matrix::zeros(dim, dim);
            for i in 0..dim {
                eye.set(i, i, 1.0);
            }
            *store.value_mut(lin.w) = eye;
            *store.value_mut(lin.b.unwrap()) = Matrix::zeros(1, dim);
        }
        (store, iisa)
    }

    #[test]
    fn hand_example_three_rows() {
        let (store, iisa) = identity_iisa(2);
        let x = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let inference = [false, true, true];
        let mut g = Graph::new(&store);
        let xv = g.constant(Matrix::from_rows(&x.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()).unwrap();
        let mixed = iisa.mix(&mut g, xv, &inference).unwrap();
        let probs = g.attention_probs(mixed).unwrap().to_vec();
        let out = iisa.o.forward(&mut g, mixed).unwrap();
        // Oracle: softmax over allowed keys of x_i·x_j/√2, then the weighted sum of rows.
        let s = 2f64.sqrt();
        for i in 0..3 {
            let keys: Vec<usize> = (0..3).filter(|&j| j == i || inference[j]).collect();
            let logits: Vec<f64> = keys.iter().map(|&j| (x[i][0] * x[j][0] + x[i][1] * x[j][1]) / s).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let mut expect = [0.0; 2];
            let mut w = [0.0; 3];
            for (&j, l) in keys.iter().zip(&logits) {
                w[j] = l.exp() / z;
                expect[0] += w[j] * x[j][0];
                expect[1] += w[j] * x[j][1];
            }
            for j in 0..3 {
                assert!((probs[i * 3 + j] - w[j]).abs() < 1e-10);
                if !keys.contains(&j) {
                    assert_eq!(probs[i * 3 + j], 0.0);
                }
            }
            let row = g.value(out).row(i);
            assert!((row[0] - expect[0]).abs() < 1e-10 && (row[1] - expect[1]).abs() < 1e-10);
        }
    }

    #[test]
    fn single_row_returns_projected_value() {
        let mut store = ParamStore::new();
        let iisa = Iisa::new(&mut store, "iisa", 3, 4).unwrap();
        let x = Matrix::row_vector(vec![0.3, -1.2, 0.8]);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone()).unwrap();
        let out = iisa.attend(&mut g, xv, &[false]).unwrap();
        let v = iisa.v.forward(&mut g, xv).unwrap();
        let ov = iisa.o.forward(&mut g, v).unwrap();
        let (a, b) = (g.value(out).row(0).to_vec(), g.value(ov).row(0).to_vec());
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    fn isc_fixture(mode: RowMixing) -> (ParamStore, Isc) {
        let mut store = ParamStore::new();
        let cfg = IscConfig {
            row_mixing: mode,
            ..IscConfig::default()
        };
        let isc = Isc::new(&mut store, "isc", 3, 4, &cfg, 8).unwrap();
        (store, isc)
    }

    #[test]
    fn permutation_equivariance() {
        let (store, isc) = isc_fixture(RowMixing::Iisa);
        let mut rng = rng_from_seed(3);
        let r = Matrix::normal(6, 12, 1.0, &mut rng);
        let inf = [true, false, true, false, true, true];
        let perm = [4, 2, 0, 5, 1, 3];
        let mut g = Graph::new(&store);
        let rv = g.constant(r.clone()).unwrap();
        let z = isc.forward(&mut g, rv, &inf).unwrap();
        let rp = g.constant(r.select_rows(&perm)).unwrap();
        let infp: Vec<bool> = perm.iter().map(|&i| inf[i]).collect();
        let zp = isc.forward(&mut g, rp, &infp).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in g.value(zp).row(k).iter().zip(g.value(z).row(i)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_inference_rows_do_not_influence_others() {
        let (store, isc) = isc_fixture(RowMixing::Iisa);
        let mut rng = rng_from_seed(5);
        let mut r = Matrix::normal(4, 12, 1.0, &mut rng);
        let inf = [true, true, false, false];
        let mut g = Graph::new(&store);
        let a = g.constant(r.clone()).unwrap();
        let za = isc.forward(&mut g, a, &inf).unwrap();
        r.row_mut(3).iter_mut().for_each(|x| *x += 5.0);
        let b = g.constant(r).unwrap();
        let zb = isc.forward(&mut g, b, &inf).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(za).row(i), g.value(zb).row(i));
        }
        assert_ne!(g.value(za).row(3), g.value(zb).row(3));
    }

    #[test]
    fn msa_mode_is_row_independent() {
        let (store, isc) = isc_fixture(RowMixing::Msa);
        let mut rng = rng_from_seed(6);
        let r = Matrix::normal(5, 12, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let all = g.constant(r.clone()).unwrap();
        let z = isc.forward(&mut g, all, &[true; 5]).unwrap();
        let one = g.constant(r.select_rows(&[2])).unwrap();
        let z1 = isc.forward(&mut g, one, &[true]).unwrap();
        for (a, b) in g.value(z).row(2).iter().zip(g.value(z1).row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcheck_isc_stack() {
        let (mut store, isc) = isc_fixture(RowMixing::Iisa);
        let mut rng = rng_from_seed(7);
        let x = store.add("x", Matrix::normal(4, 12, 1.0, &mut rng), true).unwrap();
        let w = Matrix::normal(4, 12, 1.0, &mut rng);
        let ids: Vec<ParamId> = store.ids().collect();
        let report = check_gradients(&mut store, &ids, 1e-5, Some(6), |g| {
            let xv = g.param(x);
            let z = isc.forward(g, xv, &[false, true, true, false])?;
            let wc = g.constant(w.clone())?;
            let p = g.mul(z, wc)?;
            g.sum(p)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn reference_rows_are_seeded_and_sorted() {
        let a = reference_rows(500, 64, 3);
        assert_eq!(a, reference_rows(500, 64, 3));
        assert_eq!(a.len(), 64);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(reference_rows(10, 64, 3), (0..10).collect::<Vec<_>>());
    }
}
