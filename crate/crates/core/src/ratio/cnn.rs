//! Causal convolutional scorer with hand-written backpropagation.
//!
//! Token embeddings feed a stack of left-padded (causal) 1-D convolutions
//! with `tanh` activations. The last feature map is max-pooled over the
//! first `i` positions, which gives the score of every prefix in a single
//! pass: the pooled vector of prefix `i` is the running maximum up to `i`.
//! A linear read-out maps the pooled vector to a logit. The empty prefix pools
//! to the zero vector, so its logit is the read-out bias.
//!
//! Parameters live in one flat vector, in declaration order: embedding
//! `[V × D]`, then per convolution `W [F × K × C_in]` and `b [F]`, then the
//! read-out `w [F_last]` and `b [1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub convs: Vec<ConvSpec>,
}

impl Arch {
    /// Embedding width 16 with convolutions (10, 5) and (5, 5).
    pub fn standard(vocab_size: usize) -> Self {
        Arch {
            vocab_size,
            embed_dim: 16,
            convs: vec![
                ConvSpec {
                    filters: 10,
                    kernel: 5,
                },
                ConvSpec {
                    filters: 5,
                    kernel: 5,
                },
            ],
        }
    }

    fn channels_in(&self, layer: usize) -> usize {
        if layer == 0 {
            self.embed_dim
        } else {
            self.convs[layer - 1].filters
        }
    }

    pub fn pooled_dim(&self) -> usize {
        self.convs.last().map_or(self.embed_dim, |c| c.filters)
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.vocab_size * self.embed_dim;
        for (l, c) in self.convs.iter().enumerate() {
            n += c.filters * c.kernel * self.channels_in(l) + c.filters;
        }
        n + self.pooled_dim() + 1
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvOffsets {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<ConvOffsets>,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    fn new(arch: &Arch) -> Self {
        let mut off = arch.vocab_size * arch.embed_dim;
        let mut convs = Vec::with_capacity(arch.convs.len());
        for (l, c) in arch.convs.iter().enumerate() {
            let w = off;
            off += c.filters * c.kernel * arch.channels_in(l);
            let b = off;
            off += c.filters;
            convs.push(ConvOffsets { w, b });
        }
        let out_w = off;
        let out_b = off + arch.pooled_dim();
        Layout {
            convs,
            out_w,
            out_b,
        }
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    len: usize,
    /// `acts[0]` is the embedded input; `acts[l + 1]` the output of conv `l`.
    /// Each is `len × channels`, row-major by position.
    acts: Vec<Vec<f64>>,
    /// `pooled[i]` is the pooled vector of prefix `i + 1`.
    pooled: Vec<Vec<f64>>,
    /// `argmax[i][f]` is the position attaining `pooled[i][f]`.
    argmax: Vec<Vec<usize>>,
    /// Logit of prefix `i`, `i = 0..=len` (index 0 is the empty prefix).
    pub logits: Vec<f64>,
}

impl Forward {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Arch,
    params: Vec<f64>,
}

impl Network {
    /// Normal initialization with standard deviation `scale / sqrt(fan_in)`;
    /// embeddings use `scale`. Biases and the read-out weights start at zero,
    /// so an untrained network scores every input with logit 0 (`γ = 1`).
    pub fn init<R: Rng + ?Sized>(arch: Arch, scale: f64, rng: &mut R) -> Self {
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; arch.param_count()];
        let mut fill = |range: std::ops::Range<usize>, std: f64, rng: &mut R| {
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[range] {
                *p = normal.sample(rng);
            }
        };
        fill(0..arch.vocab_size * arch.embed_dim, scale, rng);
        for (l, c) in arch.convs.iter().enumerate() {
            let fan_in = (c.kernel * arch.channels_in(l)) as f64;
            let o = layout.convs[l];
            fill(o.w..o.b, scale / fan_in.sqrt(), rng);
        }
        Network { arch, params }
    }

    pub fn from_params(arch: Arch, params: Vec<f64>) -> Option<Self> {
        (params.len() == arch.param_count()).then_some(Network { arch, params })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, ids: &[TokenId]) -> Forward {
        let arch = &self.arch;
        let layout = Layout::new(arch);
        let n = ids.len();
        let d = arch.embed_dim;
        let mut acts = Vec::with_capacity(arch.convs.len() + 1);

        let mut emb = vec![0.0; n * d];
        for (t, &id) in ids.iter().enumerate() {
            let row = id as usize * d;
            emb[t * d..(t + 1) * d].copy_from_slice(&self.params[row..row + d]);
        }
        acts.push(emb);

        for (l, spec) in arch.convs.iter().enumerate() {
            let cin = arch.channels_in(l);
            let (k, f_out) = (spec.kernel, spec.filters);
            let o = layout.convs[l];
            let w = &self.params[o.w..o.b];
            let b = &self.params[o.b..o.b + f_out];
            let input = &acts[l];
            let mut out = vec![0.0; n * f_out];
            for t in 0..n {
                for f in 0..f_out {
                    let mut z = b[f];
                    for j in 0..k {
                        // tap j reads position t - (k - 1) + j
                        let Some(src) = (t + j + 1).checked_sub(k) else {
                            continue;
                        };
                        let wrow = &w[(f * k + j) * cin..(f * k + j + 1) * cin];
                        let xrow = &input[src * cin..(src + 1) * cin];
                        z += wrow.iter().zip(xrow).map(|(a, x)| a * x).sum::<f64>();
                    }
                    out[t * f_out + f] = z.tanh();
                }
            }
            acts.push(out);
        }

        let fd = arch.pooled_dim();
        let last = acts.last().expect("at least the embedding");
        let out_w = &self.params[layout.out_w..layout.out_b];
        let out_b = self.params[layout.out_b];
        let mut pooled = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        let mut logits = Vec::with_capacity(n + 1);
        logits.push(out_b);
        let mut run = vec![f64::NEG_INFINITY; fd];
        let mut arg = vec![0usize; fd];
        for t in 0..n {
            for f in 0..fd {
                let h = last[t * fd + f];
                // strict comparison: ties keep the earliest position
                if h > run[f] {
                    run[f] = h;
                    arg[f] = t;
                }
            }
            logits.push(out_b + out_w.iter().zip(&run).map(|(a, x)| a * x).sum::<f64>());
            pooled.push(run.clone());
            argmax.push(arg.clone());
        }

        Forward {
            len: n,
            acts,
            pooled,
            argmax,
            logits,
        }
    }

    /// Logit of every prefix, index `i` covering the first `i` tokens.
    pub fn prefix_logits(&self, ids: &[TokenId]) -> Vec<f64> {
        self.forward(ids).logits
    }

    /// Logit of the whole sequence.
    pub fn logit(&self, ids: &[TokenId]) -> f64 {
        *self.forward(ids).logits.last().expect("non-empty logits")
    }

    /// Accumulates `dlogit · ∂logit_prefix/∂θ` into `grad`, where
    /// `logit_prefix` is the logit of the first `prefix` tokens.
    pub fn backward(
        &self,
        ids: &[TokenId],
        fwd: &Forward,
        prefix: usize,
        dlogit: f64,
        grad: &mut [f64],
    ) {
        let arch = &self.arch;
        let layout = Layout::new(arch);
        grad[layout.out_b] += dlogit;
        if prefix == 0 {
            return;
        }
        let n = fwd.len;
        let fd = arch.pooled_dim();
        let pooled = &fwd.pooled[prefix - 1];
        let argmax = &fwd.argmax[prefix - 1];
        let out_w = &self.params[layout.out_w..layout.out_b];

        let mut dh = vec![0.0; n * fd];
        for f in 0..fd {
            grad[layout.out_w + f] += dlogit * pooled[f];
            dh[argmax[f] * fd + f] += dlogit * out_w[f];
        }

        for (l, spec) in arch.convs.iter().enumerate().rev() {
            let cin = arch.channels_in(l);
            let (k, f_out) = (spec.kernel, spec.filters);
            let o = layout.convs[l];
            let out = &fwd.acts[l + 1];
            let input = &fwd.acts[l];
            let mut dz = vec![0.0; n * f_out];
            for i in 0..n * f_out {
                dz[i] = dh[i] * (1.0 - out[i] * out[i]);
            }
            let mut dinput = vec![0.0; n * cin];
            for t in 0..n {
                for f in 0..f_out {
                    let g = dz[t * f_out + f];
                    if g == 0.0 {
                        continue;
                    }
                    grad[o.b + f] += g;
                    for j in 0..k {
                        let Some(src) = (t + j + 1).checked_sub(k) else {
                            continue;
                        };
                        let wi = o.w + (f * k + j) * cin;
                        for c in 0..cin {
                            grad[wi + c] += g * input[src * cin + c];
                            dinput[src * cin + c] += g * self.params[wi + c];
                        }
                    }
                }
            }
            dh = dinput;
        }

        let d = arch.embed_dim;
        for (t, &id) in ids.iter().enumerate() {
            let row = id as usize * d;
            for c in 0..d {
                grad[row + c] += dh[t * d + c];
            }
        }
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against `label` (1 = model sample).
pub fn bce(logit: f64, label: f64) -> f64 {
    softplus(logit) - label * logit
}
