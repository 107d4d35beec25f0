use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Axis, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std²) truncated to ±2·std by rejection.
pub fn truncated_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}

pub fn normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Low-rank additive update `(alpha / rank) · B · A` on a frozen `d_out × d_in` weight.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub target: ParamId,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Affine map `y = x · Wᵀ + b` with `W: d_out × d_in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Tensor::matrix(d_out, d_in, truncated_normal(rng, d_out * d_in, INIT_STD))?;
        Self::from_weight(store, name, w, bias)
    }

    pub fn zeros(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::from_weight(store, name, Tensor::zeros(vec![d_out, d_in]), bias)
    }

    fn from_weight(store: &mut ParamStore, name: &str, w: Tensor, bias: bool) -> Result<Self> {
        let (d_out, d_in) = (w.rows(), w.cols());
        let weight = store.add(format!("{name}.weight"), w, true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![1, d_out]), true)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            d_in,
            d_out,
            lora: None,
        })
    }

    /// Attaches a LoRA adapter (A ~ N(0, 0.02²), B = 0) and freezes the base weight.
    pub fn attach_lora<R: Rng>(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<()> {
        let a = store.add(
            format!("{}.lora_a", self.name),
            Tensor::matrix(rank, self.d_in, normal(rng, rank * self.d_in, INIT_STD))?,
            true,
        )?;
        let b = store.add(
            format!("{}.lora_b", self.name),
            Tensor::zeros(vec![self.d_out, rank]),
            true,
        )?;
        store.set_trainable(self.weight, false);
        self.lora = Some(LoraAdapter {
            target: self.weight,
            a,
            b,
            rank,
            alpha,
        });
        Ok(())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        if let Some(l) = &self.lora {
            v.extend([l.a, l.b]);
        }
        v
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul_t(x, w)?;
        if let Some(lora) = &self.lora {
            let a = tape.param(store, lora.a);
            let b = tape.param(store, lora.b);
            let xa = tape.matmul_t(x, a)?;
            let xab = tape.matmul_t(xa, b)?;
            let scaled = tape.scale(xab, lora.scaling());
            y = tape.add(y, scaled)?;
        }
        if let Some(bias) = self.bias {
            let b = tape.param(store, bias);
            y = tape.add(y, b)?;
        }
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(
            format!("{name}.gamma"),
            Tensor::matrix(1, dim, vec![1.0; dim])?,
            true,
        )?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![1, dim]), true)?;
        Ok(Self { gamma, beta })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layernorm(x, g, b)
    }
}

/// Pre-norm transformer block: multi-head self-attention then a ReLU MLP,
/// each wrapped in a residual connection. Attention never crosses sequence
/// boundaries.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub n_heads: usize,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = 2 * dim;
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            wq: Linear::new(store, &format!("{name}.attn.wq"), dim, dim, true, rng)?,
            wk: Linear::new(store, &format!("{name}.attn.wk"), dim, dim, true, rng)?,
            wv: Linear::new(store, &format!("{name}.attn.wv"), dim, dim, true, rng)?,
            wo: Linear::new(store, &format!("{name}.attn.wo"), dim, dim, true, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, hidden, true, rng)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, dim, true, rng)?,
            n_heads,
        })
    }

    /// `x` stacks the tokens of every sequence; `seq_lens` gives each length.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        seq_lens: &[usize],
    ) -> Result<Var> {
        let dim = tape.value(x).cols();
        let head_dim = dim / self.n_heads;
        let inv_sqrt = 1.0 / (head_dim as f64).sqrt();

        let h = self.ln1.forward(tape, store, x)?;
        let q = self.wq.forward(tape, store, h)?;
        let k = self.wk.forward(tape, store, h)?;
        let v = self.wv.forward(tape, store, h)?;

        let mut heads_q = Vec::with_capacity(self.n_heads);
        let mut heads_k = Vec::with_capacity(self.n_heads);
        let mut heads_v = Vec::with_capacity(self.n_heads);
        for hd in 0..self.n_heads {
            heads_q.push(tape.slice(q, Axis::Cols, hd * head_dim, head_dim)?);
            heads_k.push(tape.slice(k, Axis::Cols, hd * head_dim, head_dim)?);
            heads_v.push(tape.slice(v, Axis::Cols, hd * head_dim, head_dim)?);
        }

        let mut seq_outputs = Vec::with_capacity(seq_lens.len());
        let mut offset = 0;
        for &len in seq_lens {
            let mut head_outputs = Vec::with_capacity(self.n_heads);
            for hd in 0..self.n_heads {
                let qs = tape.slice(heads_q[hd], Axis::Rows, offset, len)?;
                let ks = tape.slice(heads_k[hd], Axis::Rows, offset, len)?;
                let vs = tape.slice(heads_v[hd], Axis::Rows, offset, len)?;
                let scores = tape.matmul_t(qs, ks)?;
                let scores = tape.scale(scores, inv_sqrt);
                let att = tape.softmax_rows(scores)?;
                head_outputs.push(tape.matmul(att, vs)?);
            }
            seq_outputs.push(tape.concat(&head_outputs, Axis::Cols)?);
            offset += len;
        }
        let attn = tape.concat(&seq_outputs, Axis::Rows)?;
        let attn = self.wo.forward(tape, store, attn)?;
        let x = tape.add(x, attn)?;

        let h = self.ln2.forward(tape, store, x)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = self.fc2.forward(tape, store, h)?;
        tape.add(x, h)
    }

    pub fn linears(&self) -> [&Linear; 6] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.fc1, &self.fc2]
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.ln1.gamma, self.ln1.beta, self.ln2.gamma, self.ln2.beta];
        for l in self.linears() {
            v.extend(l.params());
        }
        v
    }
}

/// Row offsets of each sequence's first token in a stacked token matrix.
pub fn sequence_starts(seq_lens: &[usize]) -> Vec<usize> {
    seq_lens
        .iter()
        .scan(0, |acc, &l| {
            let start = *acc;
            *acc += l;
            Some(start)
        })
        .collect()
}
