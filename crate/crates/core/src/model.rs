//! The full per-lead network: embedding, transformer and decoders.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamGrads, Real, Var};
use crate::backbone::{BackboneCtx, BackboneDims, BackboneIds, BlockNodes, HeadLayout, NoiseConfig, NoiseMode};
use crate::embed::{EmbedCtx, EmbedDims, EmbedIds, EmbedInput, EmbedNodes, EmbedStatics};
use crate::error::{Error, Result};
use crate::grid::{DayIndex, GridSpec, VariableCatalog};
use crate::params::{Params, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Rank of the factored fusion projections.
    pub fusion_rank: usize,
    /// Input days stacked as channels.
    pub history: usize,
    /// Output days predicted jointly.
    pub segment: usize,
    pub use_climatology: bool,
    /// Kept for reference; not applied.
    pub drop_path: f64,
    /// Kept for reference; not applied.
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            fusion_rank: 16,
            history: 5,
            segment: 5,
            use_climatology: true,
            drop_path: 0.0,
            dropout: 0.0,
        }
    }

    pub fn paper() -> Self {
        ModelConfig { dim: 384, depth: 8, heads: 12, drop_path: 0.1, dropout: 0.12, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 || self.dim % 2 != 0 {
            return Err(Error::Config(format!("model dimension must be even and at least 4, got {}", self.dim)));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide dimension {}", self.heads, self.dim)));
        }
        if self.mlp_ratio == 0 || self.fusion_rank == 0 || self.history == 0 || self.segment == 0 {
            return Err(Error::Config("mlp_ratio, fusion_rank, history and segment must be positive".into()));
        }
        Ok(())
    }
}

/// One forecast request in standardised units.
#[derive(Debug, Clone)]
pub struct ModelInput<T> {
    /// `[history·K, H, W]`, oldest day first.
    pub history: Vec<T>,
    /// Climatology of the target window's centre day, `[K, H, W]`.
    pub climatology: Vec<T>,
    pub init_day: DayIndex,
    pub lead: u32,
}

/// Values of the main intermediate tensors of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    pub f_clim: Vec<T>,
    pub f_s: Vec<T>,
    pub f_c: Vec<T>,
    pub f_x: Vec<T>,
    pub w_att: Vec<T>,
    pub pre_fusion: Vec<T>,
    pub fused: Vec<T>,
    pub raw_tokens: Vec<T>,
    pub tokens: Vec<T>,
    pub encoded: Vec<T>,
    pub noise_terms: Vec<Option<Vec<T>>>,
    pub output: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub grid: GridSpec,
    pub catalog: VariableCatalog,
    pub params: Params<T>,
    embed: EmbedIds,
    backbone: BackboneIds,
    statics: Arc<EmbedStatics>,
    heads: Arc<HeadLayout>,
    unpatchify: Arc<[u32]>,
}

pub(crate) struct Pass<T> {
    embed: EmbedNodes,
    blocks: Vec<BlockNodes>,
    encoded: Var,
    output: Var,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &ModelConfig, grid: &GridSpec, catalog: &VariableCatalog, seed: u64) -> Result<Self> {
        config.validate()?;
        if catalog.n_upper() == 0 {
            return Err(Error::Config("the model needs at least one upper-air variable".into()));
        }
        let statics = EmbedStatics::new(grid, catalog, config.dim)?;
        let heads = HeadLayout::new(statics.layout.levels, statics.layout.tokens, config.dim, config.heads)?;
        let unpatchify = statics.layout.unpatchify(grid, catalog, config.segment);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let dims = EmbedDims {
            k: catalog.k(),
            history: config.history,
            cells: grid.cells(),
            dim: config.dim,
            rank: config.fusion_rank,
            levels: statics.layout.levels,
        };
        let embed = EmbedIds::init(&mut params, &dims, &statics.layout, &mut rng);
        let bdims = BackboneDims {
            dim: config.dim,
            depth: config.depth,
            hidden: config.dim * config.mlp_ratio,
            surface_out: config.segment * statics.layout.surface_features,
            upper_out: config.segment * statics.layout.upper_features,
        };
        let backbone = BackboneIds::init(&mut params, &bdims, &mut rng);
        Ok(Model {
            config: config.clone(),
            grid: grid.clone(),
            catalog: catalog.clone(),
            params,
            embed,
            backbone,
            statics: Arc::new(statics),
            heads: Arc::new(heads),
            unpatchify,
        })
    }

    /// Same architecture with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            grid: self.grid.clone(),
            catalog: self.catalog.clone(),
            params: self.params.cast(),
            embed: self.embed.clone(),
            backbone: self.backbone.clone(),
            statics: self.statics.clone(),
            heads: self.heads.clone(),
            unpatchify: self.unpatchify.clone(),
        }
    }

    /// Replaces the parameter values, keeping the layout.
    pub fn with_params(&self, params: Params<T>) -> Result<Self> {
        if params.specs() != self.params.specs() {
            return Err(Error::ShapeMismatch("parameter layout does not match the model".into()));
        }
        Ok(Model { params, ..self.clone() })
    }

    pub fn frame_len(&self) -> usize {
        self.catalog.k() * self.grid.cells()
    }

    /// Output shape `[segment, K, H, W]`.
    pub fn output_shape(&self) -> [usize; 4] {
        [self.config.segment, self.catalog.k(), self.grid.h(), self.grid.w()]
    }

    pub fn tokens(&self) -> usize {
        self.statics.layout.tokens
    }

    pub fn levels(&self) -> usize {
        self.statics.layout.levels
    }

    fn embed_ctx(&self) -> EmbedCtx<'_> {
        EmbedCtx {
            ids: &self.embed,
            statics: &self.statics,
            grid: &self.grid,
            catalog: &self.catalog,
            history: self.config.history,
            dim: self.config.dim,
        }
    }

    fn backbone_ctx(&self) -> BackboneCtx<'_> {
        BackboneCtx { ids: &self.backbone, heads: &self.heads, dim: self.config.dim }
    }

    pub(crate) fn pass(&self, t: &mut Tape<'_, T>, input: &ModelInput<T>, noise: &NoiseConfig) -> Result<Pass<T>> {
        noise.validate(self.config.depth)?;
        let ein = EmbedInput {
            history: &input.history,
            climatology: self.config.use_climatology.then_some(&input.climatology[..]),
            init_day: input.init_day,
            lead: input.lead,
        };
        let embed = self.embed_ctx().run(t, &ein)?;
        let bb = self.backbone_ctx();
        let (encoded, blocks) = bb.encode(t, embed.tokens, noise);
        let output = bb.decode(t, encoded, &self.unpatchify, &self.output_shape());
        Ok(Pass { embed, blocks, encoded, output, _marker: std::marker::PhantomData })
    }

    fn check_finite(values: &[T], what: &str) -> Result<()> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Divergence(format!("non-finite {what}")))
        }
    }

    /// Standardised `[segment, K, H, W]` prediction.
    pub fn predict(&self, input: &ModelInput<T>, noise: &NoiseConfig) -> Result<Vec<T>> {
        let mut t = Tape::new(&self.params);
        let pass = self.pass(&mut t, input, noise)?;
        let out = t.g.value(pass.output).to_vec();
        Self::check_finite(&out, "model output")?;
        Ok(out)
    }

    pub fn trace(&self, input: &ModelInput<T>, noise: &NoiseConfig) -> Result<Trace<T>> {
        let mut t = Tape::new(&self.params);
        let p = self.pass(&mut t, input, noise)?;
        let v = |x: Var| t.g.value(x).to_vec();
        Ok(Trace {
            f_clim: v(p.embed.f_clim),
            f_s: v(p.embed.f_s),
            f_c: v(p.embed.f_c),
            f_x: v(p.embed.f_x),
            w_att: v(p.embed.w_att),
            pre_fusion: v(p.embed.pre_fusion),
            fused: v(p.embed.fused),
            raw_tokens: v(p.embed.raw_tokens),
            tokens: v(p.embed.tokens),
            encoded: v(p.encoded),
            noise_terms: p.blocks.iter().map(|b| b.noise_term.map(v)).collect(),
            output: v(p.output),
        })
    }

    /// Runs only the transformer stack and final norm on a given token
    /// tensor `[(C+1)·L, D]`.
    pub fn encode_tokens(&self, tokens: &[T], noise: &NoiseConfig) -> Result<Vec<T>> {
        noise.validate(self.config.depth)?;
        let shape = [self.levels() * self.tokens(), self.config.dim];
        if tokens.len() != shape[0] * shape[1] {
            return Err(Error::ShapeMismatch("token tensor does not match (C+1) x L x D".into()));
        }
        let mut t = Tape::new(&self.params);
        let e = t.g.constant(tokens.to_vec(), &shape);
        let (enc, _) = self.backbone_ctx().encode(&mut t, e, noise);
        Ok(t.g.value(enc).to_vec())
    }

    /// Latitude-weighted MSE of the prediction against a standardised target
    /// `[segment, K, H, W]`, with parameter gradients.
    pub fn loss_and_grads(
        &self,
        input: &ModelInput<T>,
        target: &[T],
        row_weights: &Arc<[T]>,
        noise: &NoiseConfig,
    ) -> Result<(T, ParamGrads<T>)> {
        let out_len: usize = self.output_shape().iter().product();
        if target.len() != out_len {
            return Err(Error::ShapeMismatch(format!("target has {} values, expected {out_len}", target.len())));
        }
        let mut t = Tape::new(&self.params);
        let pass = self.pass(&mut t, input, noise)?;
        let loss = t.g.weighted_mse(pass.output, target.into(), row_weights.clone(), self.grid.h(), self.grid.w());
        let l = t.g.scalar(loss);
        if !l.is_finite() {
            return Err(Error::Divergence("non-finite training loss".into()));
        }
        Ok((l, t.g.backward(loss)))
    }

    /// Scalar loss only (used by finite-difference checks).
    pub fn loss(&self, input: &ModelInput<T>, target: &[T], row_weights: &Arc<[T]>, noise: &NoiseConfig) -> Result<T> {
        let mut t = Tape::new(&self.params);
        let pass = self.pass(&mut t, input, noise)?;
        let loss = t.g.weighted_mse(pass.output, target.into(), row_weights.clone(), self.grid.h(), self.grid.w());
        Ok(t.g.scalar(loss))
    }

    /// `M` members: member 0 in deterministic mode, member `m ≥ 1` stochastic
    /// with seed `base_seed + m`.
    pub fn ensemble_forward(
        &self,
        input: &ModelInput<T>,
        members: usize,
        sigma: f64,
        base_seed: u64,
        layers: Option<Vec<usize>>,
    ) -> Result<Vec<Vec<T>>> {
        if members == 0 {
            return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
        }
        (0..members)
            .into_par_iter()
            .map(|m| self.predict(input, &member_noise(m, sigma, base_seed, layers.clone(), None)))
            .collect()
    }
}

/// Noise settings of ensemble member `m`.
pub fn member_noise(m: usize, sigma: f64, base_seed: u64, layers: Option<Vec<usize>>, fixed_scale: Option<f64>) -> NoiseConfig {
    let mode = if m == 0 { NoiseMode::Deterministic } else { NoiseMode::Stochastic };
    NoiseConfig { sigma, enabled_layers: layers, mode, seed: base_seed.wrapping_add(m as u64), fixed_scale }
}
