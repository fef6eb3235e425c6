//! Neural network building blocks over the autodiff graph: linear layers,
//! layer norm, multi-head self-attention, a transformer layer, the AdamW
//! optimizer with global-norm clipping, and a linear warmup schedule.
//!
//! Modules own their weights as plain [`Tensor`]s. A forward pass first
//! `bind`s the module into a graph (as trainable leaves or frozen
//! constants), which keeps one leaf per parameter per graph so gradients
//! accumulate correctly when a module is applied several times.

use rand::Rng;

use crate::tensor::{Graph, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    /// [in × out]
    pub w: Tensor,
    /// [1 × out]
    pub b: Tensor,
}

impl Linear {
    pub fn new(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: Tensor::randn(rng, d_in, d_out, 1.0 / (d_in as f64).sqrt()),
            b: Tensor::zeros(1, d_out),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLinear {
        let (w, b) = if trainable {
            (g.leaf(self.w.clone()), g.leaf(self.b.clone()))
        } else {
            (g.constant(self.w.clone()), g.constant(self.b.clone()))
        };
        BoundLinear { w, b }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.matmul(x, self.w);
        g.add_row_broadcast(y, self.b)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::from_vec(1, d, vec![1.0; d]),
            beta: Tensor::zeros(1, d),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLayerNorm {
        let (gamma, beta) = if trainable {
            (g.leaf(self.gamma.clone()), g.leaf(self.beta.clone()))
        } else {
            (g.constant(self.gamma.clone()), g.constant(self.beta.clone()))
        };
        BoundLayerNorm { gamma, beta }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        vec![&self.gamma, &self.beta]
    }
}

#[derive(Clone, Copy)]
pub struct BoundLayerNorm {
    pub gamma: Var,
    pub beta: Var,
}

impl BoundLayerNorm {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        g.layer_norm_rows(x, self.gamma, self.beta, LN_EPS)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.gamma, self.beta]
    }
}

/// Multi-head self-attention with fused QKV projections per head slice.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut impl Rng, d_model: usize, n_heads: usize) -> Self {
        assert!(
            d_model.is_multiple_of(n_heads),
            "d_model {d_model} not divisible by {n_heads} heads"
        );
        MultiHeadAttention {
            wq: Linear::new(rng, d_model, d_model),
            wk: Linear::new(rng, d_model, d_model),
            wv: Linear::new(rng, d_model, d_model),
            wo: Linear::new(rng, d_model, d_model),
            n_heads,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMultiHeadAttention {
        BoundMultiHeadAttention {
            wq: self.wq.bind(g, trainable),
            wk: self.wk.bind(g, trainable),
            wv: self.wv.bind(g, trainable),
            wo: self.wo.bind(g, trainable),
            n_heads: self.n_heads,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.wq.params_mut();
        p.extend(self.wk.params_mut());
        p.extend(self.wv.params_mut());
        p.extend(self.wo.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.wq.params();
        p.extend(self.wk.params());
        p.extend(self.wv.params());
        p.extend(self.wo.params());
        p
    }
}

pub struct BoundMultiHeadAttention {
    pub wq: BoundLinear,
    pub wk: BoundLinear,
    pub wv: BoundLinear,
    pub wo: BoundLinear,
    pub n_heads: usize,
}

impl BoundMultiHeadAttention {
    pub fn forward(&self, g: &mut Graph, x: Var, causal: bool) -> Var {
        let t = g.value(x).rows();
        let d = g.value(x).cols();
        let dh = d / self.n_heads;
        let q = self.wq.forward(g, x);
        let k = self.wk.forward(g, x);
        let v = self.wv.forward(g, x);
        let mask = if causal {
            let mut m = Tensor::zeros(t, t);
            for i in 0..t {
                for j in (i + 1)..t {
                    m.set(i, j, -1e9);
                }
            }
            Some(g.constant(m))
        } else {
            None
        };
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_nt(qh, kh);
            let mut scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            if let Some(m) = mask {
                scores = g.add(scores, m);
            }
            let attn = g.softmax_rows(scores);
            heads.push(g.matmul(attn, vh));
        }
        let merged = g.concat_cols(&heads);
        self.wo.forward(g, merged)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.wq.vars();
        v.extend(self.wk.vars());
        v.extend(self.wv.vars());
        v.extend(self.wo.vars());
        v
    }
}

/// Pre-norm transformer layer: attention and feed-forward sublayers with
/// residual connections.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerLayer {
    pub fn new(rng: &mut impl Rng, d_model: usize, n_heads: usize, d_ff: usize) -> Self {
        TransformerLayer {
            attn: MultiHeadAttention::new(rng, d_model, n_heads),
            ln1: LayerNorm::new(d_model),
            ln2: LayerNorm::new(d_model),
            ff1: Linear::new(rng, d_model, d_ff),
            ff2: Linear::new(rng, d_ff, d_model),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundTransformerLayer {
        BoundTransformerLayer {
            attn: self.attn.bind(g, trainable),
            ln1: self.ln1.bind(g, trainable),
            ln2: self.ln2.bind(g, trainable),
            ff1: self.ff1.bind(g, trainable),
            ff2: self.ff2.bind(g, trainable),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.attn.params_mut();
        p.extend(self.ln1.params_mut());
        p.extend(self.ln2.params_mut());
        p.extend(self.ff1.params_mut());
        p.extend(self.ff2.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.attn.params();
        p.extend(self.ln1.params());
        p.extend(self.ln2.params());
        p.extend(self.ff1.params());
        p.extend(self.ff2.params());
        p
    }
}

pub struct BoundTransformerLayer {
    pub attn: BoundMultiHeadAttention,
    pub ln1: BoundLayerNorm,
    pub ln2: BoundLayerNorm,
    pub ff1: BoundLinear,
    pub ff2: BoundLinear,
}

impl BoundTransformerLayer {
    pub fn forward(&self, g: &mut Graph, x: Var, causal: bool) -> Var {
        let normed = self.ln1.forward(g, x);
        let attended = self.attn.forward(g, normed, causal);
        let x = g.add(x, attended);
        let normed = self.ln2.forward(g, x);
        let h = self.ff1.forward(g, normed);
        let h = g.gelu(h);
        let h = self.ff2.forward(g, h);
        g.add(x, h)
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.attn.vars();
        v.extend(self.ln1.vars());
        v.extend(self.ln2.vars());
        v.extend(self.ff1.vars());
        v.extend(self.ff2.vars());
        v
    }
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total: f64 = grads.iter().map(|g| g.frob_norm().powi(2)).sum::<f64>().sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for g in grads.iter_mut() {
            g.scale_assign(scale);
        }
    }
    total
}

/// AdamW: adaptive moments with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![],
            v: vec![],
            t: 0,
        }
    }

    /// One update; `params` and `grads` must stay in the same order across
    /// calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / b1t;
                let vhat = vi / b2t;
                let x = p.data()[i];
                p.data_mut()[i] =
                    x - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * x);
            }
        }
    }
}

/// Linear warmup to `base_lr`, then linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct WarmupLinearSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupLinearSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.base_lr;
        }
        let remaining = (self.total_steps - step) as f64;
        let span = (self.total_steps - self.warmup_steps) as f64;
        self.base_lr * (remaining / span).clamp(0.0, 1.0)
    }
}

/// FNV-1a over the raw bit patterns of every parameter, for frozen-weight
/// checks.
pub fn fingerprint_params(params: &[&Tensor]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for p in params {
        for v in p.data() {
            for byte in v.to_le_bytes() {
                hash ^= byte as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
    }
    hash
}
