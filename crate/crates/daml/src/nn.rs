//! Layers and parameter storage shared by both encoders.
//!
//! Parameters live in a [`ParamStore`] (value + SGD momentum buffer per
//! tensor). A forward pass first materializes every parameter as a tape leaf
//! via [`ParamStore::leaves`]; after backward, [`ParamStore::sgd_step`] folds
//! the gradients back in.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ArrD, Grads, Tape, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrD,
    pub momentum: ArrD,
}

/// Named parameter tensors with their optimizer momentum buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Plain SGD with momentum and decoupled-from-nothing weight decay
/// (decay is added to the gradient, the common formulation).
#[derive(Debug, Clone, Copy)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip over the parameter collection being
    /// stepped; 0 disables clipping.
    pub grad_clip: f64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: ArrD) -> ParamId {
        let momentum = ArrD::zeros(value.raw_dim());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            momentum,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn value(&self, id: ParamId) -> &ArrD {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrD {
        &mut self.entries[id.0].value
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Put every parameter on the tape as a leaf, in id order.
    pub fn leaves(&self, tape: &Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.leaf(e.value.clone()))
            .collect()
    }

    /// One SGD step: v <- mu*v + (g + wd*w); w <- w - lr*v.
    /// Parameters that received no gradient are left untouched. With
    /// `grad_clip` active the raw gradients are rescaled so their global
    /// norm (across this store) stays below the clip.
    pub fn sgd_step(&mut self, leaves: &[Var], grads: &Grads, opt: &SgdConfig) {
        let scale = if opt.grad_clip > 0.0 {
            let sq: f64 = leaves
                .iter()
                .filter_map(|l| grads.get(l))
                .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                .sum();
            let norm = sq.sqrt();
            if norm > opt.grad_clip {
                opt.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        for (entry, leaf) in self.entries.iter_mut().zip(leaves) {
            if let Some(g) = grads.get(leaf) {
                let step = g * scale + &(&entry.value * opt.weight_decay);
                entry.momentum = &entry.momentum * opt.momentum + &step;
                entry.value = &entry.value - &(&entry.momentum * opt.lr);
            }
        }
    }
}

/// He-style normal init scaled by fan-in.
pub fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrD {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Small-variance normal init (token/positional embeddings).
pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrD {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            // resample outside two std, matching the usual truncation
            loop {
                let v = dist.sample(rng);
                if v.abs() <= 2.0 * std {
                    return v;
                }
            }
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrD {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Fully connected layer, `x (n,in) -> x.W^T + b (n,out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            kaiming(rng, &[out_dim, in_dim], in_dim),
        );
        let bias = bias.then(|| store.add(&format!("{name}.bias"), ArrD::zeros(IxDyn(&[out_dim]))));
        Self { weight, bias }
    }

    pub fn forward(&self, leaves: &[Var], x: &Var) -> Var {
        let w = &leaves[self.weight.0];
        let y = x.matmul(&w.transpose2());
        match self.bias {
            Some(b) => y.add(&leaves[b.0]),
            None => y,
        }
    }
}

/// 2-D convolution via im2col. Weight layout (out_ch, in_ch*k*k).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.add(&format!("{name}.weight"), kaiming(rng, &[out_ch, fan_in], fan_in));
        let bias = store.add(&format!("{name}.bias"), ArrD::zeros(IxDyn(&[out_ch])));
        Self {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
        }
    }

    /// x (N,C,H,W) -> (N,out_ch,OH,OW).
    pub fn forward(&self, leaves: &[Var], x: &Var) -> Var {
        let shape = x.shape();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        let cols = x.im2col(self.kernel, self.stride, self.pad);
        let wv = &leaves[self.weight.0];
        let out = cols.matmul(&wv.transpose2()).add(&leaves[self.bias.0]);
        out.reshape(&[n, oh, ow, self.out_ch]).permute(&[0, 3, 1, 2])
    }
}

/// Per-sample, per-channel normalization over the spatial extent, with affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl InstanceNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), ArrD::ones(IxDyn(&[channels, 1, 1])));
        let beta = store.add(&format!("{name}.beta"), ArrD::zeros(IxDyn(&[channels, 1, 1])));
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    /// x (N,C,H,W) -> same shape.
    pub fn forward(&self, leaves: &[Var], x: &Var) -> Var {
        let mu = x.mean_axis(3, true).mean_axis(2, true);
        let centered = x.sub(&mu);
        let var = centered.mul(&centered).mean_axis(3, true).mean_axis(2, true);
        let xhat = centered.div(&var.add_scalar(self.eps).sqrt());
        xhat.mul(&leaves[self.gamma.0]).add(&leaves[self.beta.0])
    }
}

/// Normalization over the last axis, with affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), ArrD::ones(IxDyn(&[dim])));
        let beta = store.add(&format!("{name}.beta"), ArrD::zeros(IxDyn(&[dim])));
        Self {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, leaves: &[Var], x: &Var) -> Var {
        let last = x.shape().len() - 1;
        let mu = x.mean_axis(last, true);
        let centered = x.sub(&mu);
        let var = centered.mul(&centered).mean_axis(last, true);
        let xhat = centered.div(&var.add_scalar(self.eps).sqrt());
        xhat.mul(&leaves[self.gamma.0]).add(&leaves[self.beta.0])
    }
}

/// Multi-head self-attention over (B, T, D).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(dim % heads, 0, "embedding dim must divide across heads");
        Self {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim, true),
            heads,
            dim,
        }
    }

    pub fn forward(&self, leaves: &[Var], x: &Var) -> Var {
        let shape = x.shape();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let (h, dh) = (self.heads, d / self.heads);
        let qkv = self.qkv.forward(leaves, &x.reshape(&[b * t, d])); // (B*T, 3D)
        let split = |off: usize| -> Var {
            // (B*T, D) slice -> (B*H, T, dh)
            let cols: Vec<usize> = (off * d..(off + 1) * d).collect();
            qkv.transpose2()
                .index_select0(&cols)
                .transpose2()
                .reshape(&[b, t, h, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[b * h, t, dh])
        };
        let (q, k, v) = (split(0), split(1), split(2));
        let scale = 1.0 / (dh as f64).sqrt();
        let attn = q
            .bmm(&k.transpose_last2())
            .mul_scalar(scale)
            .reshape(&[b * h * t, t])
            .softmax_rows()
            .reshape(&[b * h, t, t]);
        let out = attn
            .bmm(&v)
            .reshape(&[b, h, t, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b * t, d]);
        self.proj.forward(leaves, &out).reshape(&[b, t, d])
    }
}

/// Pre-norm transformer block: x + MHSA(LN(x)); x + MLP(LN(x)).
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let block = Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, dim * mlp_ratio, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), dim * mlp_ratio, dim, true),
        };
        // residual branches start small so the stack is near-identity
        for pid in [block.attn.proj.weight, block.fc2.weight] {
            store.value_mut(pid).mapv_inplace(|v| v * 0.25);
        }
        block
    }

    pub fn forward(&self, leaves: &[Var], x: &Var) -> Var {
        let shape = x.shape();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let x = x.add(&self.attn.forward(leaves, &self.norm1.forward(leaves, x)));
        let h = self
            .fc1
            .forward(leaves, &self.norm2.forward(leaves, &x).reshape(&[b * t, d]))
            .gelu();
        let h = self.fc2.forward(leaves, &h).reshape(&[b, t, d]);
        x.add(&h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fd_probe(
        store: &ParamStore,
        forward: impl Fn(&ParamStore) -> f64,
        analytic: &[(usize, ArrD)],
        rtol: f64,
    ) {
        // spot-check a few coordinates of each parameter via central differences
        let h = 1e-5;
        for &(pid, ref grad) in analytic {
            let len = store.entries()[pid].value.len();
            let picks: Vec<usize> = (0..len).step_by((len / 3).max(1)).take(3).collect();
            for &i in &picks {
                let mut plus = store.clone();
                plus.entries_mut()[pid].value.as_slice_mut().unwrap()[i] += h;
                let mut minus = store.clone();
                minus.entries_mut()[pid].value.as_slice_mut().unwrap()[i] -= h;
                let fd = (forward(&plus) - forward(&minus)) / (2.0 * h);
                let an = grad.as_slice().unwrap()[i];
                assert!(
                    (fd - an).abs() <= 1e-7 + rtol * fd.abs().max(an.abs()),
                    "param {pid} coord {i}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn linear_and_norm_layers_backprop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "lin", 5, 3, true);
        let ln = LayerNorm::new(&mut store, "ln", 3);
        let x = uniform(&mut rng, &[4, 5], -1.0, 1.0);

        let forward = |ps: &ParamStore| -> f64 {
            let tape = Tape::new();
            let leaves = ps.leaves(&tape);
            let xv = tape.constant(x.clone());
            ln.forward(&leaves, &lin.forward(&leaves, &xv))
                .gelu()
                .mean_all()
                .scalar()
        };

        let tape = Tape::new();
        let leaves = store.leaves(&tape);
        let xv = tape.constant(x.clone());
        let loss = ln
            .forward(&leaves, &lin.forward(&leaves, &xv))
            .gelu()
            .mean_all();
        let grads = tape.backward(&loss).unwrap();
        let analytic: Vec<(usize, ArrD)> = (0..store.len())
            .filter_map(|i| grads.get(&leaves[i]).map(|g| (i, g.clone())))
            .collect();
        assert!(!analytic.is_empty());
        fd_probe(&store, forward, &analytic, 1e-5);
    }

    #[test]
    fn attention_block_backprop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, &mut rng, "blk", 8, 2, 2);
        let x = uniform(&mut rng, &[2, 3, 8], -1.0, 1.0);

        let forward = |ps: &ParamStore| -> f64 {
            let tape = Tape::new();
            let leaves = ps.leaves(&tape);
            let xv = tape.constant(x.clone());
            block.forward(&leaves, &xv).mul(&xv).mean_all().scalar()
        };

        let tape = Tape::new();
        let leaves = store.leaves(&tape);
        let xv = tape.constant(x.clone());
        let loss = block.forward(&leaves, &xv).mul(&xv).mean_all();
        let grads = tape.backward(&loss).unwrap();
        let analytic: Vec<(usize, ArrD)> = (0..store.len())
            .filter_map(|i| grads.get(&leaves[i]).map(|g| (i, g.clone())))
            .collect();
        assert_eq!(analytic.len(), store.len(), "all block params should get grads");
        fd_probe(&store, forward, &analytic, 1e-4);
    }

    #[test]
    fn conv_instance_norm_backprop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, &mut rng, "conv", 2, 3, 3, 1, 1);
        let inorm = InstanceNorm2d::new(&mut store, "in", 3);
        let x = uniform(&mut rng, &[2, 2, 5, 4], -1.0, 1.0);

        let forward = |ps: &ParamStore| -> f64 {
            let tape = Tape::new();
            let leaves = ps.leaves(&tape);
            let xv = tape.constant(x.clone());
            inorm
                .forward(&leaves, &conv.forward(&leaves, &xv))
                .relu()
                .mean_all()
                .scalar()
        };

        let tape = Tape::new();
        let leaves = store.leaves(&tape);
        let xv = tape.constant(x.clone());
        let loss = inorm
            .forward(&leaves, &conv.forward(&leaves, &xv))
            .relu()
            .mean_all();
        let grads = tape.backward(&loss).unwrap();
        let analytic: Vec<(usize, ArrD)> = (0..store.len())
            .filter_map(|i| grads.get(&leaves[i]).map(|g| (i, g.clone())))
            .collect();
        fd_probe(&store, forward, &analytic, 1e-4);
    }

    #[test]
    fn sgd_momentum_step_matches_reference() {
        let mut store = ParamStore::new();
        let id = store.add("w", ndarray::arr1(&[1.0, -2.0]).into_dyn());
        let tape = Tape::new();
        let leaves = store.leaves(&tape);
        let loss = leaves[id.0].mul(&leaves[id.0]).sum_all();
        let grads = tape.backward(&loss).unwrap();
        let opt = SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.5,
            grad_clip: 0.0,
        };
        store.sgd_step(&leaves, &grads, &opt);
        // g = 2w + 0.5w = 2.5w; v = 2.5w; w' = w - 0.25w = 0.75w
        let w = store.value(id).as_slice().unwrap().to_vec();
        assert!((w[0] - 0.75).abs() < 1e-12);
        assert!((w[1] + 1.5).abs() < 1e-12);
    }
}
