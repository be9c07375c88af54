//! Uncertainty-augmented transformer blocks and the unpatchify head.
//!
//! Each block is pre-norm:
//!
//! ```text
//! E' = E + attn(LN1(E)) + g(E) ⊙ (σ·z)
//! E'' = E' + mlp(LN2(E'))
//! ```
//!
//! with `g(E) = gain · softplus(LN1(E)·W_g + b_g)`. The gain is stored as
//! its logarithm so it stays positive. Attention runs
//! independently within each level over its `L` tokens.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Unary, Var};
use crate::error::{Error, Result};
use crate::params::{Params, Tape};

/// Starting value of every block's learnable noise gain.
pub const NOISE_GAIN_INIT: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// No noise term at all.
    Off,
    /// The fixed seed-0 draw, identical on every call.
    Deterministic,
    /// Draws from the configured seed.
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    /// 1-based block indices receiving noise; `None` means every block.
    pub enabled_layers: Option<Vec<usize>>,
    pub mode: NoiseMode,
    pub seed: u64,
    /// Replaces the learnable scale map `g` by this constant.
    pub fixed_scale: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::deterministic(1.0)
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        NoiseConfig { sigma: 0.0, enabled_layers: None, mode: NoiseMode::Off, seed: 0, fixed_scale: None }
    }

    pub fn deterministic(sigma: f64) -> Self {
        NoiseConfig { sigma, enabled_layers: None, mode: NoiseMode::Deterministic, seed: 0, fixed_scale: None }
    }

    pub fn stochastic(sigma: f64, seed: u64) -> Self {
        NoiseConfig { sigma, enabled_layers: None, mode: NoiseMode::Stochastic, seed, fixed_scale: None }
    }

    pub fn with_layers(mut self, layers: Option<Vec<usize>>) -> Self {
        self.enabled_layers = layers;
        self
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise sigma must be finite and non-negative, got {}", self.sigma)));
        }
        if let Some(layers) = &self.enabled_layers {
            if let Some(bad) = layers.iter().find(|&&l| l == 0 || l > depth) {
                return Err(Error::InvalidArgument(format!("noise layer {bad} outside 1..={depth}")));
            }
        }
        if let Some(c) = self.fixed_scale {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!("fixed noise scale must be non-negative, got {c}")));
            }
        }
        Ok(())
    }

    pub fn layer_enabled(&self, layer: usize) -> bool {
        self.mode != NoiseMode::Off && self.enabled_layers.as_ref().map_or(true, |l| l.contains(&layer))
    }

    fn stream_seed(&self) -> u64 {
        match self.mode {
            NoiseMode::Stochastic => self.seed,
            _ => 0,
        }
    }

    /// `σ·z` for one block, `z ~ N(0, I)` from the stream of `(seed, layer)`.
    pub fn draw<T: Real>(&self, layer: usize, n: usize) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.stream_seed());
        rng.set_stream(layer as u64);
        (0..n).map(|_| T::lit(self.sigma * rng.sample::<f64, _>(StandardNormal))).collect()
    }
}

#[derive(Debug, Clone)]
pub struct BlockIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub noise_w: usize,
    pub noise_b: usize,
    pub gain: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub struct BackboneIds {
    pub blocks: Vec<BlockIds>,
    pub final_g: usize,
    pub final_b: usize,
    pub dec_surface_w: usize,
    pub dec_surface_b: usize,
    pub dec_upper_w: usize,
    pub dec_upper_b: usize,
}

pub(crate) struct BackboneDims {
    pub dim: usize,
    pub depth: usize,
    pub hidden: usize,
    pub surface_out: usize,
    pub upper_out: usize,
}

impl BackboneIds {
    pub(crate) fn init<T: Real>(p: &mut Params<T>, dims: &BackboneDims, rng: &mut ChaCha8Rng) -> Self {
        let BackboneDims { dim: d, depth, hidden, surface_out, upper_out } = *dims;
        let sd = 1.0 / (d as f64).sqrt();
        let blocks = (0..depth)
            .map(|n| {
                let name = |s: &str| format!("blocks.{n}.{s}");
                BlockIds {
                    ln1_g: p.filled(name("ln1.g"), &[d], true, 1.0),
                    ln1_b: p.zeros(name("ln1.b"), &[d], true),
                    wq: p.normal(name("attn.wq"), &[d, d], sd, rng),
                    wk: p.normal(name("attn.wk"), &[d, d], sd, rng),
                    wv: p.normal(name("attn.wv"), &[d, d], sd, rng),
                    wo: p.normal(name("attn.wo"), &[d, d], sd / (2.0 * depth as f64).sqrt(), rng),
                    bo: p.zeros(name("attn.bo"), &[d], true),
                    noise_w: p.normal(name("noise.w"), &[d, d], 0.1 * sd, rng),
                    noise_b: p.zeros(name("noise.b"), &[d], true),
                    gain: p.filled(name("noise.log_gain"), &[1], false, NOISE_GAIN_INIT.ln()),
                    ln2_g: p.filled(name("ln2.g"), &[d], true, 1.0),
                    ln2_b: p.zeros(name("ln2.b"), &[d], true),
                    w1: p.normal(name("mlp.w1"), &[d, hidden], sd, rng),
                    b1: p.zeros(name("mlp.b1"), &[hidden], true),
                    w2: p.normal(name("mlp.w2"), &[hidden, d], 1.0 / (hidden as f64 * 2.0 * depth as f64).sqrt(), rng),
                    b2: p.zeros(name("mlp.b2"), &[d], true),
                }
            })
            .collect();
        BackboneIds {
            blocks,
            final_g: p.filled("final_ln.g", &[d], true, 1.0),
            final_b: p.zeros("final_ln.b", &[d], true),
            dec_surface_w: p.normal("decoder.surface.w", &[d, surface_out], sd, rng),
            dec_surface_b: p.zeros("decoder.surface.b", &[surface_out], true),
            dec_upper_w: p.normal("decoder.upper.w", &[d, upper_out], sd, rng),
            dec_upper_b: p.zeros("decoder.upper.b", &[upper_out], true),
        }
    }
}

/// Permutations between `[levels·L, D]` rows and `[levels·heads, L, D/heads]`.
#[derive(Debug, Clone)]
pub struct HeadLayout {
    pub levels: usize,
    pub tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub split: Arc<[u32]>,
    pub merge: Arc<[u32]>,
    pub broadcast_scalar: Arc<[u32]>,
}

impl HeadLayout {
    pub fn new(levels: usize, tokens: usize, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide dimension {dim}")));
        }
        let dh = dim / heads;
        let n = levels * tokens * dim;
        let mut split = vec![0u32; n];
        let mut merge = vec![0u32; n];
        for lev in 0..levels {
            for t in 0..tokens {
                for hd in 0..heads {
                    for c in 0..dh {
                        let flat = (lev * tokens + t) * dim + hd * dh + c;
                        let headed = ((lev * heads + hd) * tokens + t) * dh + c;
                        split[headed] = flat as u32;
                        merge[flat] = headed as u32;
                    }
                }
            }
        }
        Ok(HeadLayout {
            levels,
            tokens,
            heads,
            head_dim: dh,
            split: split.into(),
            merge: merge.into(),
            broadcast_scalar: vec![0u32; n].into(),
        })
    }
}

/// Nodes produced by one block, for inspection.
#[derive(Debug, Clone, Copy)]
pub struct BlockNodes {
    pub attention: Var,
    pub scale: Option<Var>,
    pub noise_term: Option<Var>,
    pub output: Var,
}

pub(crate) struct BackboneCtx<'a> {
    pub ids: &'a BackboneIds,
    pub heads: &'a HeadLayout,
    pub dim: usize,
}

impl BackboneCtx<'_> {
    /// Multi-head self-attention within each level over `x = LN1(E)`,
    /// including the output projection.
    pub fn attention<T: Real>(&self, t: &mut Tape<'_, T>, x: Var, b: &BlockIds) -> Var {
        let hl = self.heads;
        let (nl, l, d, dh) = (hl.levels, hl.tokens, self.dim, hl.head_dim);
        let batch = nl * hl.heads;
        let proj = |t: &mut Tape<'_, T>, w: usize| {
            let w = t.p(w);
            let y = t.g.linear(x, w, None);
            t.g.gather(y, hl.split.clone(), &[batch, l, dh])
        };
        let q = proj(t, b.wq);
        let k = proj(t, b.wk);
        let v = proj(t, b.wv);
        let scores = t.g.bmm(q, k, batch, l, dh, l, true);
        let scores = t.g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let att = t.g.softmax(scores);
        let ctx = t.g.bmm(att, v, batch, l, l, dh, false);
        let ctx = t.g.gather(ctx, hl.merge.clone(), &[nl * l, d]);
        let (wo, bo) = (t.p(b.wo), t.p(b.bo));
        t.g.linear(ctx, wo, Some(bo))
    }

    /// One uncertainty-augmented block (1-based `layer`).
    pub fn block<T: Real>(&self, t: &mut Tape<'_, T>, e: Var, layer: usize, noise: &NoiseConfig) -> BlockNodes {
        let b = &self.ids.blocks[layer - 1];
        let (g1, b1) = (t.p(b.ln1_g), t.p(b.ln1_b));
        let x = t.g.layer_norm(e, g1, b1);
        let attention = self.attention(t, x, b);
        let mut h = t.g.add(e, attention);
        let mut scale = None;
        let mut noise_term = None;
        if noise.layer_enabled(layer) {
            let n = t.g.value(e).len();
            let shape = t.g.shape(e).to_vec();
            let g = match noise.fixed_scale {
                Some(c) => t.g.constant(vec![T::lit(c); n], &shape),
                None => {
                    let (nw, nb) = (t.p(b.noise_w), t.p(b.noise_b));
                    let a = t.g.linear(x, nw, Some(nb));
                    let sp = t.g.unary(a, Unary::Softplus);
                    let gain = t.p(b.gain);
                    let gain = t.g.unary(gain, Unary::Exp);
                    let gain = t.g.gather(gain, self.heads.broadcast_scalar.clone(), &shape);
                    t.g.mul(sp, gain)
                }
            };
            let z = t.g.constant(noise.draw(layer, n), &shape);
            let term = t.g.mul(g, z);
            h = t.g.add(h, term);
            scale = Some(g);
            noise_term = Some(term);
        }
        let (g2, b2) = (t.p(b.ln2_g), t.p(b.ln2_b));
        let y = t.g.layer_norm(h, g2, b2);
        let (w1, bb1) = (t.p(b.w1), t.p(b.b1));
        let y = t.g.linear(y, w1, Some(bb1));
        let y = t.g.unary(y, Unary::Gelu);
        let (w2, bb2) = (t.p(b.w2), t.p(b.b2));
        let y = t.g.linear(y, w2, Some(bb2));
        let output = t.g.add(h, y);
        BlockNodes { attention, scale, noise_term, output }
    }

    /// All blocks followed by the final layer norm.
    pub fn encode<T: Real>(&self, t: &mut Tape<'_, T>, mut e: Var, noise: &NoiseConfig) -> (Var, Vec<BlockNodes>) {
        let mut nodes = Vec::with_capacity(self.ids.blocks.len());
        for layer in 1..=self.ids.blocks.len() {
            let bn = self.block(t, e, layer, noise);
            e = bn.output;
            nodes.push(bn);
        }
        let (g, b) = (t.p(self.ids.final_g), t.p(self.ids.final_b));
        (t.g.layer_norm(e, g, b), nodes)
    }

    /// Linear decoders per level kind and reassembly into `[S, K, H, W]`.
    pub fn decode<T: Real>(&self, t: &mut Tape<'_, T>, encoded: Var, unpatchify: &Arc<[u32]>, out_shape: &[usize]) -> Var {
        let l = self.heads.tokens;
        let nl = self.heads.levels;
        let d = self.dim;
        let surf_idx: Arc<[u32]> = (0..(l * d) as u32).collect();
        let up_idx: Arc<[u32]> = ((l * d) as u32..(nl * l * d) as u32).collect();
        let s = t.g.gather(encoded, surf_idx, &[l, d]);
        let u = t.g.gather(encoded, up_idx, &[(nl - 1) * l, d]);
        let (sw, sb) = (t.p(self.ids.dec_surface_w), t.p(self.ids.dec_surface_b));
        let ys = t.g.linear(s, sw, Some(sb));
        let (uw, ub) = (t.p(self.ids.dec_upper_w), t.p(self.ids.dec_upper_b));
        let yu = t.g.linear(u, uw, Some(ub));
        let n_s = t.g.value(ys).len();
        let n_u = t.g.value(yu).len();
        let ys = t.g.reshape(ys, &[n_s]);
        let yu = t.g.reshape(yu, &[n_u]);
        let flat = t.g.concat(&[ys, yu]);
        t.g.gather(flat, unpatchify.clone(), out_shape)
    }
}
