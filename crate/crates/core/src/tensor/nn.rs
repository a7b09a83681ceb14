//! Parameterized building blocks shared by the encoders, the condensation
//! blocks and the statistics network. Weights are stored `in×out`, so a layer
//! computes `x·W + b` on row-major batches.

use std::rc::Rc;

use crate::error::{Result, TabiiError};
use crate::rng::Rng;
use crate::tensor::{AttentionMask, Graph, Matrix, ParamId, ParamStore, Var};

/// Low-rank update `ΔW = B·Aᵀ` for a weight stored `in×out`
/// (`A` is `out×r`, `B` is `in×r`).
#[derive(Clone, Debug)]
pub struct LowRank {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Matrix::uniform(in_dim, out_dim, bound, rng), true)?;
        let b = if bias {
            Some(store.add(format!("{name}.b"), Matrix::uniform(1, out_dim, bound, rng), true)?)
        } else {
            None
        };
        Ok(Linear {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.forward_with(g, x, None)
    }

    /// Forward with an optional low-rank delta: `x·(W + B·Aᵀ) + b`.
    pub fn forward_with(&self, g: &mut Graph, x: Var, delta: Option<&LowRank>) -> Result<Var> {
        let w = g.param(self.w);
        let mut y = g.matmul(x, w)?;
        if let Some(lr) = delta {
            let b = g.param(lr.b);
            let a = g.param(lr.a);
            let xb = g.matmul(x, b)?;
            let at = g.transpose(a)?;
            let d = g.matmul(xb, at)?;
            y = g.add(y, d)?;
        }
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        v.extend(self.b);
        v
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Matrix::filled(1, dim, 1.0), true)?,
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, dim), true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma)?;
        g.add_row(y, beta)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Low-rank deltas for the four projections of one attention block.
#[derive(Clone, Debug, Default)]
pub struct AttentionDeltas {
    pub q: Option<LowRank>,
    pub k: Option<LowRank>,
    pub v: Option<LowRank>,
    pub o: Option<LowRank>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TabiiError::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim, true, rng)?,
            heads,
        })
    }

    /// Self-attention within groups of `seq_len` consecutive rows of `x`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        seq_len: usize,
        mask: Option<&AttentionMask>,
        deltas: Option<&AttentionDeltas>,
    ) -> Result<Var> {
        let d = deltas.cloned().unwrap_or_default();
        let q = self.q.forward_with(g, x, d.q.as_ref())?;
        let k = self.k.forward_with(g, x, d.k.as_ref())?;
        let v = self.v.forward_with(g, x, d.v.as_ref())?;
        let a = g.attention(q, k, v, seq_len, self.heads, mask)?;
        self.o.forward_with(g, a, d.o.as_ref())
    }

    pub fn linears(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, dropout: f64) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h)?;
        let h = g.dropout(h, dropout)?;
        self.down.forward(g, h)
    }
}

/// Pre-norm transformer layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl TransformerLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_mult: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, dim * ff_mult, rng)?,
            dropout,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        seq_len: usize,
        deltas: Option<&AttentionDeltas>,
    ) -> Result<Var> {
        self.forward_masked(g, x, seq_len, None, deltas)
    }

    pub fn forward_masked(
        &self,
        g: &mut Graph,
        x: Var,
        seq_len: usize,
        mask: Option<&AttentionMask>,
        deltas: Option<&AttentionDeltas>,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = self.attn.forward(g, h, seq_len, mask, deltas)?;
        let h = g.dropout(h, self.dropout)?;
        let x = g.add(x, h)?;
        let h = self.norm2.forward(g, x)?;
        let h = self.ff.forward(g, h, self.dropout)?;
        let h = g.dropout(h, self.dropout)?;
        g.add(x, h)
    }
}

/// Stack of pre-norm layers followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub layers: Vec<TransformerLayer>,
    pub final_norm: LayerNorm,
    pub dim: usize,
}

impl TransformerStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        layers: usize,
        heads: usize,
        ff_mult: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|i| TransformerLayer::new(store, &format!("{name}.layer{i}"), dim, heads, ff_mult, dropout, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformerStack {
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.ln_out"), dim)?,
            dim,
        })
    }

    /// `x` is `(batch·seq_len)×dim`; `deltas[i]` adapts layer `i`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        seq_len: usize,
        deltas: Option<&[AttentionDeltas]>,
    ) -> Result<Var> {
        self.forward_masked(g, x, seq_len, None, deltas)
    }

    /// [`Self::forward`] with an attention mask applied in every layer.
    pub fn forward_masked(
        &self,
        g: &mut Graph,
        x: Var,
        seq_len: usize,
        mask: Option<&AttentionMask>,
        deltas: Option<&[AttentionDeltas]>,
    ) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_masked(g, h, seq_len, mask, deltas.map(|d| &d[i]))?;
        }
        self.final_norm.forward(g, h)
    }
}

/// Row indices `0, seq_len, 2·seq_len, …` selecting the first token of each group.
pub fn first_token_rows(batch: usize, seq_len: usize) -> Vec<usize> {
    (0..batch).map(|b| b * seq_len).collect()
}

/// Build a shared attention mask from a predicate over (query, key).
pub fn mask_from_fn(seq_len: usize, allowed: impl Fn(usize, usize) -> bool) -> AttentionMask {
    let mut m = vec![false; seq_len * seq_len];
    for i in 0..seq_len {
        for j in 0..seq_len {
            m[i * seq_len + j] = allowed(i, j);
        }
    }
    Rc::new(m)
}
