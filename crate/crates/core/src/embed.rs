//! Climatology-fused patch embedding.
//!
//! The pipeline, per sample: a 1×1 convolution folds the stacked input
//! history to `K` channels; a climatology branch convolves pixel-pair
//! difference maps of the climatology; spatial and channel branches pool the
//! state and convolve; an attention fusion blends both feature sets per
//! variable; the fused field is cut into `P×P` patches, projected to `D` and
//! offset by position, level, time and lead encodings.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Real, Unary, Var};
use crate::error::{Error, Result};
use crate::grid::{day_of_year, DayIndex, GridSpec, VariableCatalog};
use crate::params::{Params, Tape};

pub const TIME_WAVELENGTHS: (f64, f64) = (1.0, 365.0);
pub const POSITION_WAVELENGTHS: (f64, f64) = (0.1, 360.0);

/// Geometric wavelength ladder `λ_i = λmin·(λmax/λmin)^((i−1)/(D/2−1))`.
pub fn fourier_wavelengths(d: usize, lambda_min: f64, lambda_max: f64) -> Result<Vec<f64>> {
    if d % 2 != 0 || d < 4 {
        return Err(Error::InvalidArgument(format!("Fourier dimension must be even and at least 4, got {d}")));
    }
    if !(lambda_min > 0.0 && lambda_max > lambda_min) {
        return Err(Error::InvalidArgument(format!("wavelengths must satisfy 0 < min < max, got ({lambda_min}, {lambda_max})")));
    }
    let half = d / 2;
    let ratio = lambda_max / lambda_min;
    Ok((0..half).map(|i| lambda_min * ratio.powf(i as f64 / (half - 1) as f64)).collect())
}

/// Interleaved `[sin(2πx/λ_1), cos(2πx/λ_1), …]`.
pub fn fourier_encode(x: f64, d: usize, lambda_min: f64, lambda_max: f64) -> Result<Vec<f64>> {
    let lambdas = fourier_wavelengths(d, lambda_min, lambda_max)?;
    let mut out = Vec::with_capacity(d);
    for l in lambdas {
        let (s, c) = (std::f64::consts::TAU * x / l).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

/// Number of difference directions per channel.
pub const DIFF_DIRECTIONS: usize = 4;

/// Forward pixel-pair differences of a `[K, H, W]` field, direction-major
/// `[4K, H, W]`: east, south, south-east, south-west. Longitude wraps,
/// latitude replicates the edge row (so the last row's southward
/// differences vanish).
pub fn difference_maps<T: Real>(x: &[T], k: usize, h: usize, w: usize) -> Vec<T> {
    assert_eq!(x.len(), k * h * w, "difference map input");
    let hw = h * w;
    let mut out = vec![T::zero(); DIFF_DIRECTIONS * k * hw];
    let at = |c: usize, i: usize, j: usize| x[c * hw + i * w + j];
    for c in 0..k {
        for i in 0..h {
            let s = (i + 1).min(h - 1);
            for j in 0..w {
                let e = (j + 1) % w;
                let west = (j + w - 1) % w;
                let v = at(c, i, j);
                let vals = [at(c, i, e) - v, at(c, s, j) - v, at(c, s, e) - v, at(c, s, west) - v];
                for (dir, d) in vals.into_iter().enumerate() {
                    out[(dir * k + c) * hw + i * w + j] = d;
                }
            }
        }
    }
    out
}

/// Pre-convolution fusion `f_clim·W + f_x·(1 − W) + f_clim + f_x`.
pub fn fusion_combine<T: Real>(f_clim: &[T], f_x: &[T], w_att: &[T]) -> Vec<T> {
    f_clim.iter().zip(f_x).zip(w_att).map(|((&c, &x), &a)| c * a + x * (T::one() - a) + c + x).collect()
}

/// Gather tables mapping gridded fields to token rows and back.
#[derive(Debug, Clone)]
pub struct PatchLayout {
    pub tokens: usize,
    pub levels: usize,
    pub surface_features: usize,
    pub upper_features: usize,
    /// `[K, H, W]` → `[L, V_S·P·P]`.
    pub surface: Arc<[u32]>,
    /// `[K, H, W]` → `[C·L, V_A·P·P]`, rows level-major.
    pub upper: Arc<[u32]>,
}

impl PatchLayout {
    pub fn new(grid: &GridSpec, catalog: &VariableCatalog) -> Self {
        let (h, w, p) = (grid.h(), grid.w(), grid.patch());
        let (pr, pc) = (grid.patch_rows(), grid.patch_cols());
        let l = pr * pc;
        let (vs, va, c) = (catalog.n_surface(), catalog.n_upper(), catalog.n_levels());
        let cell = |ch: usize, t: usize, pi: usize, pj: usize| {
            let (r, q) = (t / pc, t % pc);
            (ch * h * w + (r * p + pi) * w + q * p + pj) as u32
        };
        let mut surface = Vec::with_capacity(l * vs * p * p);
        for t in 0..l {
            for v in 0..vs {
                for pi in 0..p {
                    for pj in 0..p {
                        surface.push(cell(catalog.surface_channel(v), t, pi, pj));
                    }
                }
            }
        }
        let mut upper = Vec::with_capacity(c * l * va * p * p);
        for lev in 0..c {
            for t in 0..l {
                for a in 0..va {
                    for pi in 0..p {
                        for pj in 0..p {
                            upper.push(cell(catalog.upper_channel(a, lev), t, pi, pj));
                        }
                    }
                }
            }
        }
        PatchLayout {
            tokens: l,
            levels: c + 1,
            surface_features: vs * p * p,
            upper_features: va * p * p,
            surface: surface.into(),
            upper: upper.into(),
        }
    }

    /// Inverse map for decoder outputs. The decoder emits `segments` frames
    /// per token; the surface buffer `[L, S·V_S·P·P]` is followed by the upper
    /// buffer `[C·L, S·V_A·P·P]`. Returns indices producing `[S, K, H, W]`.
    pub fn unpatchify(&self, grid: &GridSpec, catalog: &VariableCatalog, segments: usize) -> Arc<[u32]> {
        let k = catalog.k();
        let hw = grid.cells();
        let l = self.tokens;
        let surf_row = segments * self.surface_features;
        let up_row = segments * self.upper_features;
        let surface_len = l * surf_row;
        let mut out = vec![0u32; segments * k * hw];
        for s in 0..segments {
            for (t, chunk) in self.surface.chunks(self.surface_features).enumerate() {
                for (f, &src) in chunk.iter().enumerate() {
                    out[s * k * hw + src as usize] = (t * surf_row + s * self.surface_features + f) as u32;
                }
            }
            for (r, chunk) in self.upper.chunks(self.upper_features).enumerate() {
                for (f, &src) in chunk.iter().enumerate() {
                    out[s * k * hw + src as usize] = (surface_len + r * up_row + s * self.upper_features + f) as u32;
                }
            }
        }
        out.into()
    }
}

/// Parameter ids of the embedding stage.
#[derive(Debug, Clone)]
pub struct EmbedIds {
    pub hist_w: usize,
    pub hist_b: usize,
    pub clim_w: usize,
    pub clim_b: usize,
    pub spatial_w: usize,
    pub spatial_b: usize,
    pub channel_w: usize,
    pub channel_b: usize,
    pub fusion: [FusionIds; 2],
    pub patch_surface_w: usize,
    pub patch_surface_b: usize,
    pub patch_upper_w: usize,
    pub patch_upper_b: usize,
    pub pos_w: usize,
    pub pos_b: usize,
    pub level: usize,
    pub time_w: usize,
    pub time_b: usize,
    pub lead_w: usize,
    pub lead_b: usize,
}

/// Factored query/key/value maps and the output convolution for one kind of
/// variable (upper-air or surface).
#[derive(Debug, Clone)]
pub struct FusionIds {
    pub uq: usize,
    pub vq: usize,
    pub uk: usize,
    pub vk: usize,
    pub uv: usize,
    pub vv: usize,
    pub conv_w: usize,
    pub conv_b: usize,
}

pub(crate) struct EmbedDims {
    pub k: usize,
    pub history: usize,
    pub cells: usize,
    pub dim: usize,
    pub rank: usize,
    pub levels: usize,
}

fn conv_std(cin: usize, k: usize) -> f64 {
    1.0 / ((cin * k * k) as f64).sqrt()
}

impl EmbedIds {
    pub(crate) fn init<T: Real>(p: &mut Params<T>, dims: &EmbedDims, layout: &PatchLayout, rng: &mut ChaCha8Rng) -> Self {
        let EmbedDims { k, history, cells: n, dim: d, rank: r, levels } = *dims;
        let hk = history * k;
        let hist_w = p.normal("embed.hist.w", &[k, hk, 1, 1], conv_std(hk, 1), rng);
        let hist_b = p.zeros("embed.hist.b", &[k], true);
        let ck = DIFF_DIRECTIONS * k;
        let clim_w = p.normal("embed.clim.w", &[k, ck, 3, 3], conv_std(ck, 3), rng);
        let clim_b = p.zeros("embed.clim.b", &[k], true);
        let spatial_w = p.normal("embed.spatial.w", &[k, 2, 3, 3], conv_std(2, 3), rng);
        let spatial_b = p.zeros("embed.spatial.b", &[k], true);
        let channel_w = p.normal("embed.channel.w", &[k, k, 3, 3], conv_std(k, 3), rng);
        let channel_b = p.zeros("embed.channel.b", &[k], true);
        let c_upper = levels - 1;
        let mut fusion_kind = |kind: &str, group: usize, p: &mut Params<T>| {
            let mut f = |name: &str, shape: &[usize], std: f64, p: &mut Params<T>| {
                p.normal(format!("fusion.{kind}.{name}"), shape, std, rng)
            };
            let uq = f("uq", &[n, r], 1.0 / (n as f64).sqrt(), p);
            let vq = f("vq", &[r, n], 1.0 / (r as f64).sqrt(), p);
            let uk = f("uk", &[n, r], 1.0 / (n as f64).sqrt(), p);
            let vk = f("vk", &[r, n], 1.0 / (r as f64).sqrt(), p);
            let uv = f("uv", &[n, r], 1.0 / (n as f64).sqrt(), p);
            let vv = f("vv", &[r, n], 1.0 / (r as f64).sqrt(), p);
            let conv_w = f("conv.w", &[group, group, 3, 3], conv_std(group, 3), p);
            let conv_b = p.zeros(format!("fusion.{kind}.conv.b"), &[group], true);
            FusionIds { uq, vq, uk, vk, uv, vv, conv_w, conv_b }
        };
        let upper = fusion_kind("upper", c_upper, p);
        let surface = fusion_kind("surface", 1, p);
        let sf = layout.surface_features;
        let uf = layout.upper_features;
        let patch_surface_w = p.normal("patch.surface.w", &[sf, d], 0.02, rng);
        let patch_surface_b = p.zeros("patch.surface.b", &[d], true);
        let patch_upper_w = p.normal("patch.upper.w", &[uf, d], 0.02, rng);
        let patch_upper_b = p.zeros("patch.upper.b", &[d], true);
        let pos_w = p.normal("pos.w", &[2 * d, d], 0.02, rng);
        let pos_b = p.zeros("pos.b", &[d], false);
        let level = p.normal("pos.level", &[levels, d], 0.02, rng);
        for id in [pos_w, level] {
            p.set_decay(id, false);
        }
        let time_w = p.normal("time.w", &[2 * d, d], 0.02, rng);
        let time_b = p.zeros("time.b", &[d], true);
        let lead_w = p.normal("lead.w", &[d, d], 0.02, rng);
        let lead_b = p.zeros("lead.b", &[d], true);
        EmbedIds {
            hist_w,
            hist_b,
            clim_w,
            clim_b,
            spatial_w,
            spatial_b,
            channel_w,
            channel_b,
            fusion: [upper, surface],
            patch_surface_w,
            patch_surface_b,
            patch_upper_w,
            patch_upper_b,
            pos_w,
            pos_b,
            level,
            time_w,
            time_b,
            lead_w,
            lead_b,
        }
    }
}

/// Intermediate graph nodes of one embedding pass.
#[derive(Debug, Clone, Copy)]
pub struct EmbedNodes {
    pub state: Var,
    pub f_clim: Var,
    pub f_s: Var,
    pub f_c: Var,
    pub f_x: Var,
    pub w_att: Var,
    pub pre_fusion: Var,
    pub fused: Var,
    pub raw_tokens: Var,
    pub tokens: Var,
}

/// Precomputed constant inputs shared by every embedding pass.
#[derive(Debug, Clone)]
pub struct EmbedStatics {
    pub layout: PatchLayout,
    /// Fourier features of every patch centre, `[L, 2D]`.
    pub position_features: Vec<f64>,
    /// Row ranges for the upper-air and surface fusion groups in `[K, N]`.
    pub upper_rows: Arc<[u32]>,
    pub surface_rows: Arc<[u32]>,
    pub broadcast_tokens: Arc<[u32]>,
    pub broadcast_levels: Arc<[u32]>,
    pub broadcast_vector: Arc<[u32]>,
}

impl EmbedStatics {
    pub fn new(grid: &GridSpec, catalog: &VariableCatalog, dim: usize) -> Result<Self> {
        let layout = PatchLayout::new(grid, catalog);
        let mut position_features = Vec::with_capacity(layout.tokens * 2 * dim);
        let (lmin, lmax) = POSITION_WAVELENGTHS;
        for (lat, lon) in grid.patch_centres() {
            position_features.extend(fourier_encode(lat, dim, lmin, lmax)?);
            position_features.extend(fourier_encode(lon, dim, lmin, lmax)?);
        }
        let n = grid.cells() as u32;
        let n_up = (catalog.n_upper() * catalog.n_levels()) as u32;
        let k = catalog.k() as u32;
        let upper_rows = (0..n_up * n).collect();
        let surface_rows = (n_up * n..k * n).collect();
        let (nl, l, d) = (layout.levels, layout.tokens, dim);
        let mut bt = Vec::with_capacity(nl * l * d);
        let mut bl = Vec::with_capacity(nl * l * d);
        let mut bv = Vec::with_capacity(nl * l * d);
        for lev in 0..nl {
            for t in 0..l {
                for c in 0..d {
                    bt.push((t * d + c) as u32);
                    bl.push((lev * d + c) as u32);
                    bv.push(c as u32);
                }
            }
        }
        Ok(EmbedStatics {
            layout,
            position_features,
            upper_rows,
            surface_rows,
            broadcast_tokens: bt.into(),
            broadcast_levels: bl.into(),
            broadcast_vector: bv.into(),
        })
    }
}

/// Time features of the initialisation date: absolute day and day of year.
pub fn time_features(day: DayIndex, dim: usize) -> Result<Vec<f64>> {
    let (lmin, lmax) = TIME_WAVELENGTHS;
    let mut f = fourier_encode(day as f64, dim, lmin, lmax)?;
    f.extend(fourier_encode(day_of_year(day) as f64, dim, lmin, lmax)?);
    Ok(f)
}

pub fn lead_features(lead: u32, dim: usize) -> Result<Vec<f64>> {
    let (lmin, lmax) = TIME_WAVELENGTHS;
    fourier_encode(lead as f64, dim, lmin, lmax)
}

fn consts<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

/// Inputs of one embedding pass, already standardised.
pub struct EmbedInput<'a, T> {
    /// `[history·K, H, W]`, oldest day first.
    pub history: &'a [T],
    /// `[K, H, W]`, or `None` to drop the climatology branch.
    pub climatology: Option<&'a [T]>,
    pub init_day: DayIndex,
    pub lead: u32,
}

pub(crate) struct EmbedCtx<'a> {
    pub ids: &'a EmbedIds,
    pub statics: &'a EmbedStatics,
    pub grid: &'a GridSpec,
    pub catalog: &'a VariableCatalog,
    pub history: usize,
    pub dim: usize,
}

impl EmbedCtx<'_> {
    /// Climatology branch: 3×3 convolution over the difference maps.
    pub fn climatology_conv<T: Real>(&self, t: &mut Tape<'_, T>, clim: &[T]) -> Var {
        let (k, h, w) = (self.catalog.k(), self.grid.h(), self.grid.w());
        let diffs = difference_maps(clim, k, h, w);
        let x = t.g.constant(diffs, &[DIFF_DIRECTIONS * k, h, w]);
        let (cw, cb) = (t.p(self.ids.clim_w), t.p(self.ids.clim_b));
        t.g.conv2d(x, cw, cb, 3)
    }

    /// Spatial and channel branches; returns `(f_s, f_c, f_x)`.
    pub fn spatial_channel_conv<T: Real>(&self, t: &mut Tape<'_, T>, x: Var) -> (Var, Var, Var) {
        let mean = t.g.channel_mean(x);
        let max = t.g.channel_max(x);
        let pooled = t.g.concat(&[mean, max]);
        let (sw, sb) = (t.p(self.ids.spatial_w), t.p(self.ids.spatial_b));
        let f_s = t.g.conv2d(pooled, sw, sb, 3);
        let blocks = t.g.block_mean(x, self.grid.patch());
        let (cw, cb) = (t.p(self.ids.channel_w), t.p(self.ids.channel_b));
        let f_c = t.g.conv2d(blocks, cw, cb, 3);
        let f_x = t.g.add(f_s, f_c);
        (f_s, f_c, f_x)
    }

    /// Attention weights `W_att ∈ [0, 1]` for one kind of variable, given its
    /// rows of `A = f_x + f_clim` as `[groups·size, N]`.
    fn fusion_weights<T: Real>(
        &self,
        t: &mut Tape<'_, T>,
        a: Var,
        ids: &crate::embed::FusionIds,
        groups: usize,
        size: usize,
    ) -> Var {
        let n = self.grid.cells();
        let proj = |t: &mut Tape<'_, T>, u: usize, v: usize| {
            let (u, v) = (t.p(u), t.p(v));
            let low = t.g.linear(a, u, None);
            t.g.linear(low, v, None)
        };
        let q = proj(t, ids.uq, ids.vq);
        let kk = proj(t, ids.uk, ids.vk);
        let v = proj(t, ids.uv, ids.vv);
        let scores = t.g.bmm(q, kk, groups, size, n, size, true);
        let scores = t.g.scale(scores, T::lit(1.0 / (n as f64).sqrt()));
        let att = t.g.softmax(scores);
        let mixed = t.g.bmm(att, v, groups, size, size, n, false);
        let mixed = t.g.reshape(mixed, &[groups * size, n]);
        t.g.unary(mixed, Unary::Sigmoid)
    }

    /// Fusion: returns `(W_att, pre-conv fusion, fused)` over all `K`
    /// channels.
    pub fn attention_fusion<T: Real>(&self, t: &mut Tape<'_, T>, f_clim: Var, f_x: Var) -> (Var, Var, Var) {
        let (k, h, w) = (self.catalog.k(), self.grid.h(), self.grid.w());
        let n = h * w;
        let a = t.g.add(f_x, f_clim);
        let c = self.catalog.n_levels();
        let (va, vs) = (self.catalog.n_upper(), self.catalog.n_surface());
        let a_up = t.g.gather(a, self.statics.upper_rows.clone(), &[va * c, n]);
        let a_sf = t.g.gather(a, self.statics.surface_rows.clone(), &[vs, n]);
        let w_up = self.fusion_weights(t, a_up, &self.ids.fusion[0], va, c);
        let w_sf = self.fusion_weights(t, a_sf, &self.ids.fusion[1], vs, 1);
        let w_att = t.g.concat(&[w_up, w_sf]);
        let w_att = t.g.reshape(w_att, &[k, h, w]);
        // f_clim·W + f_x·(1 − W) + f_clim + f_x
        let diff = t.g.sub(f_clim, f_x);
        let gated = t.g.mul(w_att, diff);
        let twice_x = t.g.scale(f_x, T::lit(2.0));
        let base = t.g.add(f_clim, twice_x);
        let pre = t.g.add(base, gated);
        let mut parts = Vec::with_capacity(va + vs);
        let group = |t: &mut Tape<'_, T>, ids: &FusionIds, start: usize, size: usize| {
            let idx: Arc<[u32]> = ((start * n) as u32..((start + size) * n) as u32).collect();
            let x = t.g.gather(pre, idx, &[size, h, w]);
            let (cw, cb) = (t.p(ids.conv_w), t.p(ids.conv_b));
            t.g.conv2d(x, cw, cb, 3)
        };
        for v in 0..va {
            parts.push(group(t, &self.ids.fusion[0], v * c, c));
        }
        for s in 0..vs {
            parts.push(group(t, &self.ids.fusion[1], va * c + s, 1));
        }
        let fused = t.g.concat(&parts);
        (w_att, pre, fused)
    }

    /// Patch tokens `[(C+1)·L, D]`, surface level first.
    pub fn patchify<T: Real>(&self, t: &mut Tape<'_, T>, fused: Var) -> Var {
        let lay = &self.statics.layout;
        let l = lay.tokens;
        let c = lay.levels - 1;
        let s = t.g.gather(fused, lay.surface.clone(), &[l, lay.surface_features]);
        let (sw, sb) = (t.p(self.ids.patch_surface_w), t.p(self.ids.patch_surface_b));
        let es = t.g.linear(s, sw, Some(sb));
        let u = t.g.gather(fused, lay.upper.clone(), &[c * l, lay.upper_features]);
        let (uw, ub) = (t.p(self.ids.patch_upper_w), t.p(self.ids.patch_upper_b));
        let ea = t.g.linear(u, uw, Some(ub));
        t.g.concat(&[es, ea])
    }

    /// Adds position, level, time and lead encodings to the raw tokens.
    pub fn assemble<T: Real>(&self, t: &mut Tape<'_, T>, raw: Var, init_day: DayIndex, lead: u32) -> Result<Var> {
        let st = self.statics;
        let d = self.dim;
        let (nl, l) = (st.layout.levels, st.layout.tokens);
        let posf = t.g.constant(consts(&st.position_features), &[l, 2 * d]);
        let (pw, pb) = (t.p(self.ids.pos_w), t.p(self.ids.pos_b));
        let pos = t.g.linear(posf, pw, Some(pb));
        let pos = t.g.gather(pos, st.broadcast_tokens.clone(), &[nl * l, d]);
        let lev = t.p(self.ids.level);
        let lev = t.g.gather(lev, st.broadcast_levels.clone(), &[nl * l, d]);
        let tf = t.g.constant(consts(&time_features(init_day, d)?), &[1, 2 * d]);
        let (tw, tb) = (t.p(self.ids.time_w), t.p(self.ids.time_b));
        let time = t.g.linear(tf, tw, Some(tb));
        let lf = t.g.constant(consts(&lead_features(lead, d)?), &[1, d]);
        let (lw, lb) = (t.p(self.ids.lead_w), t.p(self.ids.lead_b));
        let lead = t.g.linear(lf, lw, Some(lb));
        let offset = t.g.add(time, lead);
        let offset = t.g.gather(offset, st.broadcast_vector.clone(), &[nl * l, d]);
        let e = t.g.add(raw, pos);
        let e = t.g.add(e, lev);
        Ok(t.g.add(e, offset))
    }

    pub fn run<T: Real>(&self, t: &mut Tape<'_, T>, input: &EmbedInput<'_, T>) -> Result<EmbedNodes> {
        let (k, h, w) = (self.catalog.k(), self.grid.h(), self.grid.w());
        let hk = self.history * k;
        if input.history.len() != hk * h * w {
            return Err(Error::ShapeMismatch(format!(
                "history has {} values, expected {} x {k} x {h} x {w}",
                input.history.len(),
                self.history
            )));
        }
        if input.history.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input history".into()));
        }
        let hist = t.g.constant(input.history.to_vec(), &[hk, h, w]);
        let (hw_, hb) = (t.p(self.ids.hist_w), t.p(self.ids.hist_b));
        let state = t.g.conv2d(hist, hw_, hb, 1);
        let f_clim = match input.climatology {
            Some(clim) => {
                if clim.len() != k * h * w {
                    return Err(Error::ShapeMismatch("climatology frame does not match K x H x W".into()));
                }
                if clim.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("climatology input".into()));
                }
                self.climatology_conv(t, clim)
            }
            None => t.g.constant(vec![T::zero(); k * h * w], &[k, h, w]),
        };
        let (f_s, f_c, f_x) = self.spatial_channel_conv(t, state);
        let (w_att, pre_fusion, fused) = self.attention_fusion(t, f_clim, f_x);
        let raw_tokens = self.patchify(t, fused);
        let tokens = self.assemble(t, raw_tokens, input.init_day, input.lead)?;
        Ok(EmbedNodes { state, f_clim, f_s, f_c, f_x, w_att, pre_fusion, fused, raw_tokens, tokens })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fourier_at_zero_alternates() {
        let f = fourier_encode(0.0, 8, 1.0, 365.0).unwrap();
        assert_eq!(f, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn fourier_four_dims_uses_endpoints() {
        let l = fourier_wavelengths(4, 1.0, 365.0).unwrap();
        assert_eq!(l, vec![1.0, 365.0]);
        assert!(fourier_encode(1.0, 5, 1.0, 2.0).is_err());
        assert!(fourier_encode(1.0, 4, 0.0, 2.0).is_err());
        assert!(fourier_encode(1.0, 4, 3.0, 2.0).is_err());
    }

    #[test]
    fn difference_maps_of_longitude_ramp() {
        let (h, w) = (3, 5);
        let x: Vec<f64> = (0..h * w).map(|i| (i % w) as f64).collect();
        let d = difference_maps(&x, 1, h, w);
        let east = &d[..h * w];
        let south = &d[h * w..2 * h * w];
        for i in 0..h {
            for j in 0..w {
                let expect = if j == w - 1 { -((w - 1) as f64) } else { 1.0 };
                assert_eq!(east[i * w + j], expect);
                assert_eq!(south[i * w + j], 0.0);
            }
        }
    }

    #[test]
    fn fusion_combine_limits() {
        let c = [1.0, -2.0];
        let x = [0.5, 3.0];
        assert_eq!(fusion_combine(&c, &x, &[1.0, 1.0]), vec![2.5, -1.0]);
        assert_eq!(fusion_combine(&c, &x, &[0.0, 0.0]), vec![2.0, 4.0]);
        assert_eq!(fusion_combine(&x, &x, &[0.3, 0.9]), vec![1.5, 9.0]);
    }

    #[test]
    fn token_counts() {
        let cat = VariableCatalog::desk();
        assert_eq!(PatchLayout::new(&GridSpec::uniform(32, 64, 4).unwrap(), &cat).tokens, 128);
        assert_eq!(PatchLayout::new(&GridSpec::desk(), &cat).tokens, 32);
        assert_eq!(PatchLayout::new(&GridSpec::uniform(4, 4, 4).unwrap(), &cat).tokens, 1);
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let grid = GridSpec::uniform(8, 16, 4).unwrap();
        let cat = VariableCatalog::desk();
        let lay = PatchLayout::new(&grid, &cat);
        let field: Vec<u32> = (0..(cat.k() * grid.cells()) as u32).collect();
        let mut buf: Vec<u32> = lay.surface.iter().map(|&i| field[i as usize]).collect();
        buf.extend(lay.upper.iter().map(|&i| field[i as usize]));
        let back: Vec<u32> = lay.unpatchify(&grid, &cat, 1).iter().map(|&i| buf[i as usize]).collect();
        assert_eq!(back, field);
    }
}
