//! Latitude-weighted training of the per-lead models and multi-model
//! forecasting over days 15–45.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::backbone::NoiseConfig;
use crate::error::{Error, Result};
use crate::grid::{compute_climatology, DayIndex, GridSpec, Normalization, Splits, VariableCatalog, WeatherState};
use crate::model::{Model, ModelConfig, ModelInput};
use crate::params::Params;

/// First and last forecast day of the multi-model window.
pub const FORECAST_FIRST_DAY: u32 = 15;
pub const FORECAST_LAST_DAY: u32 = 45;
pub const LEAD_STEP: u32 = 5;

/// The standard lead set `{15, 20, …, 45}`.
pub fn standard_leads() -> Vec<u32> {
    (FORECAST_FIRST_DAY..=FORECAST_LAST_DAY).step_by(LEAD_STEP as usize).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lead_times: Vec<u32>,
    pub history: usize,
    pub segment: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Noise scale used during training.
    pub sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            lead_times: standard_leads(),
            history: 5,
            segment: 5,
            lr: 1e-3,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            warmup_steps: 200,
            total_steps: 4000,
            batch_size: 4,
            seed: 0,
            sigma: 1.0,
        }
    }

    pub fn paper() -> Self {
        TrainConfig { lr: 5e-5, warmup_steps: 5000, total_steps: 100_000, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lead_times.is_empty() {
            return Err(Error::Config("at least one lead time is required".into()));
        }
        if self.lead_times.windows(2).any(|p| p[1] != p[0] + LEAD_STEP) {
            return Err(Error::Config(format!("lead times must increase in steps of {LEAD_STEP}: {:?}", self.lead_times)));
        }
        if let Some(&bad) = self.lead_times.iter().find(|&&k| (k as usize) < self.segment) {
            return Err(Error::Config(format!("lead {bad} is shorter than the {}-day segment", self.segment)));
        }
        if self.history == 0 || self.segment == 0 {
            return Err(Error::Config("history and segment must be at least one day".into()));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("training sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// `(1/(V·H·W)) Σ L(i)·(pred − truth)²` over `[V, H, W]` buffers.
pub fn weighted_mse(pred: &[f64], truth: &[f64], weights: &[f64], w: usize) -> Result<f64> {
    let h = weights.len();
    if pred.len() != truth.len() || h == 0 || w == 0 || pred.len() % (h * w) != 0 {
        return Err(Error::ShapeMismatch(format!(
            "weighted_mse: pred {} / truth {} values on a {h} x {w} grid",
            pred.len(),
            truth.len()
        )));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("weighted_mse input".into()));
    }
    let s: f64 = pred.iter().zip(truth).enumerate().map(|(i, (p, t))| weights[(i / w) % h] * (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

/// Linear warmup to `lr`, then cosine decay to zero at `total_steps`.
pub fn lr_schedule(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond total_steps {}", cfg.total_steps)));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig { beta1: c.beta1, beta2: c.beta2, eps: c.eps, weight_decay: c.weight_decay }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.specs().iter().map(|s| vec![T::zero(); s.numel()]).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One AdamW update with decoupled weight decay on parameters flagged for
/// decay. Non-finite gradients reject the step and leave everything
/// untouched.
pub fn optimizer_step<T: Real>(
    params: &mut Params<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::ShapeMismatch("gradient list does not match parameters".into()));
    }
    for (id, g) in grads.iter().enumerate() {
        if g.len() != params.spec(id).numel() {
            return Err(Error::ShapeMismatch(format!("gradient for {} has the wrong size", params.spec(id).name)));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at step {}", params.spec(id).name, state.step)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (ob1, ob2) = (T::lit(1.0 - cfg.beta1), T::lit(1.0 - cfg.beta2));
    let step_size = T::lit(lr / bc1);
    let inv_bc2 = T::lit(1.0 / bc2);
    let eps = T::lit(cfg.eps);
    let shrink = T::lit(1.0 - lr * cfg.weight_decay);
    for (id, g) in grads.iter().enumerate() {
        let decay = params.spec(id).decay;
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        for (((p, &gi), mi), vi) in params.get_mut(id).iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            if decay {
                *p *= shrink;
            }
            *mi = b1 * *mi + ob1 * gi;
            *vi = b2 * *vi + ob2 * gi * gi;
            *p -= step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadKind {
    History,
    Target,
    Climatology,
}

/// One frame access made while assembling a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadRecord {
    pub anchor: DayIndex,
    pub lead: u32,
    pub day: DayIndex,
    pub kind: ReadKind,
}

/// Contiguous daily frames in standardised units plus the standardised
/// climatology of the training years.
#[derive(Debug)]
pub struct Dataset {
    pub grid: GridSpec,
    pub catalog: VariableCatalog,
    pub splits: Splits,
    pub norm: Normalization,
    first_day: DayIndex,
    frames: Vec<Vec<f32>>,
    climatology: Vec<Vec<f32>>,
    row_weights: Arc<[f32]>,
    history: usize,
    segment: usize,
    log: Option<Mutex<Vec<ReadRecord>>>,
}

impl Dataset {
    /// Fits normalisation and climatology on the training years. `states`
    /// must be consecutive days.
    pub fn new(states: &[WeatherState], grid: &GridSpec, catalog: &VariableCatalog, splits: Splits) -> Result<Self> {
        Self::with_norm(states, grid, catalog, splits, None)
    }

    /// Like [`Dataset::new`] but with fixed normalisation statistics, as
    /// restored from a checkpoint.
    pub fn with_norm(
        states: &[WeatherState],
        grid: &GridSpec,
        catalog: &VariableCatalog,
        splits: Splits,
        norm: Option<Normalization>,
    ) -> Result<Self> {
        let first = states.first().ok_or_else(|| Error::MissingData("empty dataset".into()))?;
        let frame = catalog.k() * grid.cells();
        for (i, s) in states.iter().enumerate() {
            if s.day != first.day + i as DayIndex {
                return Err(Error::MissingData(format!("dataset is not contiguous at day {}", s.day)));
            }
            if s.values.len() != frame {
                return Err(Error::ShapeMismatch(format!("state for day {} does not match K x H x W", s.day)));
            }
        }
        let (ts, te) = Splits::day_range(splits.train);
        let train: Vec<WeatherState> = states.iter().filter(|s| s.day >= ts && s.day < te).cloned().collect();
        let norm = match norm {
            Some(n) => n,
            None => Normalization::fit(&train, catalog.k())?,
        };
        let clim = compute_climatology(&train, splits.train)?;
        let cells = grid.cells();
        let climatology = (1..=366u32)
            .map(|d| {
                let mut v = clim.slot(d).to_vec();
                norm.apply(&mut v, cells);
                v
            })
            .collect();
        let frames = states
            .iter()
            .map(|s| {
                let mut v = s.values.clone();
                norm.apply(&mut v, cells);
                v
            })
            .collect();
        let row_weights = grid.latitude_weights().into_iter().map(|w| w as f32).collect();
        Ok(Dataset {
            grid: grid.clone(),
            catalog: catalog.clone(),
            splits,
            norm,
            first_day: first.day,
            frames,
            climatology,
            row_weights,
            history: 5,
            segment: 5,
            log: None,
        })
    }

    /// Sets the window lengths used by [`Dataset::input`] and [`Dataset::target`].
    pub fn with_windows(mut self, history: usize, segment: usize) -> Self {
        self.history = history;
        self.segment = segment;
        self
    }

    /// Starts recording every frame access.
    pub fn instrumented(mut self) -> Self {
        self.log = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn reads(&self) -> Vec<ReadRecord> {
        self.log.as_ref().map(|l| l.lock().expect("read log").clone()).unwrap_or_default()
    }

    pub fn clear_reads(&self) {
        if let Some(l) = &self.log {
            l.lock().expect("read log").clear();
        }
    }

    pub fn first_day(&self) -> DayIndex {
        self.first_day
    }

    pub fn last_day(&self) -> DayIndex {
        self.first_day + self.frames.len() as DayIndex - 1
    }

    pub fn history(&self) -> usize {
        self.history
    }

    pub fn segment(&self) -> usize {
        self.segment
    }

    pub fn row_weights(&self) -> &Arc<[f32]> {
        &self.row_weights
    }

    fn log_read(&self, anchor: DayIndex, lead: u32, day: DayIndex, kind: ReadKind) {
        if let Some(l) = &self.log {
            l.lock().expect("read log").push(ReadRecord { anchor, lead, day, kind });
        }
    }

    /// Standardised frame of one day.
    pub fn frame(&self, day: DayIndex) -> Result<&[f32]> {
        if day < self.first_day || day > self.last_day() {
            return Err(Error::InsufficientData(format!("day {day} outside the dataset")));
        }
        Ok(&self.frames[(day - self.first_day) as usize])
    }

    /// Native-unit frame of one day.
    pub fn native_frame(&self, day: DayIndex) -> Result<Vec<f32>> {
        let mut v = self.frame(day)?.to_vec();
        self.norm.invert(&mut v, self.grid.cells());
        Ok(v)
    }

    /// Standardised training-years climatology for a date.
    pub fn climatology_for(&self, day: DayIndex) -> &[f32] {
        &self.climatology[(crate::grid::day_of_year(day) - 1) as usize]
    }

    /// Centre day of the target window of lead `lead` from `anchor`.
    pub fn target_centre(&self, anchor: DayIndex, lead: u32) -> DayIndex {
        anchor + lead as DayIndex - (self.segment as DayIndex - 1) / 2
    }

    /// Model input for an anchor day `t` (the last history day).
    pub fn input(&self, anchor: DayIndex, lead: u32) -> Result<ModelInput<f32>> {
        let mut history = Vec::with_capacity(self.history * self.frames[0].len());
        for back in (0..self.history as DayIndex).rev() {
            let day = anchor - back;
            history.extend_from_slice(self.frame(day)?);
            self.log_read(anchor, lead, day, ReadKind::History);
        }
        let centre = self.target_centre(anchor, lead);
        self.log_read(anchor, lead, centre, ReadKind::Climatology);
        Ok(ModelInput { history, climatology: self.climatology_for(centre).to_vec(), init_day: anchor, lead })
    }

    /// Standardised target segment, days `t−S+1+K ..= t+K`.
    pub fn target(&self, anchor: DayIndex, lead: u32) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.segment * self.frames[0].len());
        for j in 0..self.segment as DayIndex {
            let day = anchor + lead as DayIndex - (self.segment as DayIndex - 1) + j;
            out.extend_from_slice(self.frame(day)?);
            self.log_read(anchor, lead, day, ReadKind::Target);
        }
        Ok(out)
    }

    /// Anchor days whose full history and lead-`K` target lie inside the
    /// given inclusive year range.
    pub fn anchors(&self, years: (i32, i32), lead: u32) -> Vec<DayIndex> {
        let (start, end) = Splits::day_range(years);
        let start = start.max(self.first_day);
        let end = end.min(self.last_day() + 1);
        let lo = start + self.history as DayIndex - 1;
        let hi = end - 1 - lead as DayIndex;
        (lo..=hi).collect()
    }
}

/// Per-step record of the mean batch loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub steps: Vec<u64>,
    pub losses: Vec<f64>,
}

impl LossCurve {
    fn window(&self) -> usize {
        (self.losses.len() / 20).max(1)
    }

    /// Mean of the first 5% of recorded steps (at least one).
    pub fn initial(&self) -> f64 {
        let n = self.window().min(self.losses.len());
        self.losses[..n].iter().sum::<f64>() / n as f64
    }

    /// Mean of the last 5% of recorded steps (at least one).
    pub fn final_loss(&self) -> f64 {
        let n = self.window().min(self.losses.len());
        self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64
    }
}

/// Training state of one PM_K model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub lead: u32,
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub optimizer: AdamState<f32>,
    pub curve: LossCurve,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finaliser over a combined word
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the parameter initialisation for lead `lead`.
pub fn init_seed(seed: u64, lead: u32) -> u64 {
    mix(seed, 0x1000 + lead as u64)
}

impl Trainer {
    pub fn new(
        lead: u32,
        config: &TrainConfig,
        model_cfg: &ModelConfig,
        grid: &GridSpec,
        catalog: &VariableCatalog,
    ) -> Result<Self> {
        config.validate()?;
        if model_cfg.history != config.history || model_cfg.segment != config.segment {
            return Err(Error::Config("model and training history/segment lengths differ".into()));
        }
        let model = Model::new(model_cfg, grid, catalog, init_seed(config.seed, lead))?;
        let optimizer = AdamState::new(&model.params);
        Ok(Trainer { lead, config: config.clone(), model, optimizer, curve: LossCurve::default() })
    }

    pub fn resume(
        lead: u32,
        config: &TrainConfig,
        model: Model<f32>,
        optimizer: AdamState<f32>,
        curve: LossCurve,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Trainer { lead, config: config.clone(), model, optimizer, curve })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Runs one optimizer step and returns the mean batch loss.
    pub fn train_step(&mut self, data: &Dataset) -> Result<f64> {
        let step = self.optimizer.step;
        let anchors = data.anchors(data.splits.train, self.lead);
        if anchors.is_empty() {
            return Err(Error::InsufficientData(format!(
                "training years {:?} are too short for lead {} with {} history days",
                data.splits.train,
                self.lead,
                data.history()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.config.seed, self.lead as u64), step));
        let picks: Vec<(DayIndex, u64)> =
            (0..self.config.batch_size).map(|_| (anchors[rng.gen_range(0..anchors.len())], rng.gen::<u64>())).collect();
        let model = &self.model;
        let sigma = self.config.sigma;
        let lead = self.lead;
        let results: Vec<Result<(f32, Vec<Vec<f32>>)>> = picks
            .par_iter()
            .map(|&(anchor, noise_seed)| {
                let input = data.input(anchor, lead)?;
                let target = data.target(anchor, lead)?;
                let noise = NoiseConfig::stochastic(sigma, noise_seed);
                let (loss, grads) = model.loss_and_grads(&input, &target, data.row_weights(), &noise)?;
                Ok((loss, model.params.dense_grads(&grads)))
            })
            .collect();
        let mut total = 0.0f64;
        let mut acc: Option<Vec<Vec<f32>>> = None;
        for r in results {
            let (loss, grads) = r?;
            total += loss as f64;
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => {
                    for (ap, gp) in a.iter_mut().zip(&grads) {
                        ap.iter_mut().zip(gp).for_each(|(x, &y)| *x += y);
                    }
                }
            }
        }
        let mut grads = acc.expect("non-empty batch");
        let inv = 1.0 / self.config.batch_size as f32;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        let lr = lr_schedule((step + 1).min(self.config.total_steps), &self.config)?;
        optimizer_step(&mut self.model.params, &grads, &mut self.optimizer, lr, &AdamConfig::from(&self.config))?;
        let mean = total / self.config.batch_size as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence(format!("loss became non-finite at step {step}")));
        }
        self.curve.steps.push(step);
        self.curve.losses.push(mean);
        Ok(mean)
    }

    /// Trains until `total_steps`, calling `on_step(step, loss)` after each.
    pub fn run(&mut self, data: &Dataset, mut on_step: impl FnMut(u64, f64)) -> Result<()> {
        while self.optimizer.step < self.config.total_steps {
            let loss = self.train_step(data)?;
            on_step(self.optimizer.step - 1, loss);
        }
        Ok(())
    }
}

/// Trained parameters and loss curve of one lead.
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: AdamState<f32>,
    pub curve: LossCurve,
}

/// Trains PM_K for a single lead time from scratch.
pub fn train_lead_model(data: &Dataset, lead: u32, config: &TrainConfig, model_cfg: &ModelConfig) -> Result<TrainOutcome> {
    if data.history() != config.history || data.segment() != config.segment {
        return Err(Error::Config("dataset windows differ from the training configuration".into()));
    }
    let mut tr = Trainer::new(lead, config, model_cfg, &data.grid, &data.catalog)?;
    tr.run(data, |_, _| {})?;
    Ok(TrainOutcome { model: tr.model, optimizer: tr.optimizer, curve: tr.curve })
}

/// Trained models keyed by lead time.
#[derive(Debug, Clone, Default)]
pub struct ModelFamily {
    pub models: BTreeMap<u32, Model<f32>>,
}

impl ModelFamily {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, lead: u32, model: Model<f32>) {
        self.models.insert(lead, model);
    }

    pub fn leads(&self) -> Vec<u32> {
        self.models.keys().copied().collect()
    }

    pub fn get(&self, lead: u32) -> Result<&Model<f32>> {
        self.models.get(&lead).ok_or(Error::MissingModel(lead))
    }
}

/// Owner lead of every day in `first..=last`: the smallest lead whose
/// segment `K−S+1 ..= K` contains the day.
pub fn tiling(leads: &[u32], segment: u32, first: u32, last: u32) -> Result<Vec<(u32, u32)>> {
    let mut sorted = leads.to_vec();
    sorted.sort_unstable();
    (first..=last)
        .map(|d| {
            sorted
                .iter()
                .find(|&&k| k >= d && k < d + segment)
                .map(|&k| (d, k))
                .ok_or_else(|| Error::MissingModel(nominal_lead(d, segment)))
        })
        .collect()
}

/// The standard lead whose segment would hold day `d`.
fn nominal_lead(d: u32, segment: u32) -> u32 {
    let base = FORECAST_FIRST_DAY;
    if d <= base {
        base
    } else {
        base + segment * (d - base).div_ceil(segment)
    }
}

/// Forecast over days 15–45 from one initialisation.
#[derive(Debug, Clone)]
pub struct RangeForecast {
    pub init_day: DayIndex,
    /// Lead days, `15..=45`.
    pub days: Vec<u32>,
    /// Lead of the model that produced each day.
    pub owners: Vec<u32>,
    /// Native-unit `[K, H, W]` frames per day.
    pub frames: Vec<Vec<f32>>,
    /// Standardised frames per day.
    pub standardized: Vec<Vec<f32>>,
}

/// Perturbation of the standardised history: `(amplitude, seed)`.
pub type InputPerturbation = Option<(f64, u64)>;

/// Runs every required PM_K once on the same history and stitches the
/// owned days of each segment.
pub fn forecast_range(family: &ModelFamily, data: &Dataset, init_day: DayIndex, noise: &NoiseConfig) -> Result<RangeForecast> {
    forecast_range_with(family, data, init_day, noise, None, &standard_leads())
}

/// [`forecast_range`] with an optional input perturbation and an explicit
/// lead set (the window shrinks to the days those leads cover).
pub fn forecast_range_with(
    family: &ModelFamily,
    data: &Dataset,
    init_day: DayIndex,
    noise: &NoiseConfig,
    perturb: InputPerturbation,
    leads: &[u32],
) -> Result<RangeForecast> {
    let segment = data.segment() as u32;
    let first = leads.iter().min().copied().ok_or_else(|| Error::InvalidArgument("no leads".into()))?;
    let last = *leads.iter().max().expect("non-empty");
    let first_day = if first == FORECAST_FIRST_DAY { FORECAST_FIRST_DAY } else { first + 1 - segment };
    for &k in leads {
        family.get(k)?;
    }
    let tiles = tiling(leads, segment, first_day, last)?;
    let frame = data.catalog.k() * data.grid.cells();
    let cells = data.grid.cells();
    let mut frames = vec![Vec::new(); tiles.len()];
    let mut standardized = vec![Vec::new(); tiles.len()];
    let mut owners = vec![0u32; tiles.len()];
    for &k in leads {
        let model = family.get(k)?;
        let mut input = data.input(init_day, k)?;
        if let Some((amp, seed)) = perturb {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in input.history.iter_mut() {
                *v += (amp * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
        let out = model.predict(&input, noise)?;
        for (slot, &(d, owner)) in tiles.iter().enumerate() {
            if owner != k {
                continue;
            }
            let j = (d + segment - 1 - k) as usize;
            let std = out[j * frame..(j + 1) * frame].to_vec();
            let mut native = std.clone();
            data.norm.invert(&mut native, cells);
            standardized[slot] = std;
            frames[slot] = native;
            owners[slot] = k;
        }
    }
    Ok(RangeForecast { init_day, days: tiles.iter().map(|t| t.0).collect(), owners, frames, standardized })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig { lr: 5e-5, warmup_steps: 10, total_steps: 110, ..TrainConfig::desk() };
        assert_eq!(lr_schedule(0, &c).unwrap(), 0.0);
        assert_eq!(lr_schedule(10, &c).unwrap(), 5e-5);
        assert!(lr_schedule(110, &c).unwrap().abs() < 1e-20);
        assert!((lr_schedule(60, &c).unwrap() - 2.5e-5).abs() < 1e-18);
        assert!(lr_schedule(111, &c).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig { lead_times: vec![15, 25], ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { warmup_steps: 10, total_steps: 10, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { history: 0, ..TrainConfig::desk() }.validate().is_err());
    }

    #[test]
    fn weighted_mse_examples() {
        assert_eq!(weighted_mse(&[1.0, 2.0], &[1.0, 2.0], &[1.0], 2).unwrap(), 0.0);
        assert_eq!(weighted_mse(&[3.0], &[1.0], &[1.0], 1).unwrap(), 4.0);
        assert!(weighted_mse(&[1.0], &[1.0, 2.0], &[1.0], 1).is_err());
        assert!(weighted_mse(&[f64::NAN], &[1.0], &[1.0], 1).is_err());
    }

    #[test]
    fn adam_fixed_point_and_decay() {
        let mut p = Params::<f64>::new();
        p.add("a", &[2], true, vec![1.0, -2.0]);
        p.add("pos", &[1], false, vec![3.0]);
        let zero = vec![vec![0.0; 2], vec![0.0]];
        let mut st = AdamState::new(&p);
        let no_decay = AdamConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 };
        let before = p.clone();
        optimizer_step(&mut p, &zero, &mut st, 0.1, &no_decay).unwrap();
        assert_eq!(p, before);
        let decay = AdamConfig { weight_decay: 0.5, ..no_decay };
        for _ in 0..3 {
            optimizer_step(&mut p, &zero, &mut st, 0.1, &decay).unwrap();
        }
        let f = (1.0f64 - 0.05).powi(3);
        assert!((p.get(0)[0] - f).abs() < 1e-15);
        assert!((p.get(0)[1] + 2.0 * f).abs() < 1e-15);
        assert_eq!(p.get(1)[0], 3.0);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = Params::<f64>::new();
        p.add("a", &[1], true, vec![1.0]);
        let mut st = AdamState::new(&p);
        let cfg = AdamConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 };
        assert!(optimizer_step(&mut p, &[vec![f64::NAN]], &mut st, 0.1, &cfg).is_err());
        assert_eq!(st.step, 0);
        assert_eq!(p.get(0)[0], 1.0);
    }

    #[test]
    fn tiling_of_standard_leads() {
        let t = tiling(&standard_leads(), 5, 15, 45).unwrap();
        assert_eq!(t.len(), 31);
        assert_eq!(t[0], (15, 15));
        for d in 16..=20 {
            assert_eq!(t[(d - 15) as usize].1, 20);
        }
        assert_eq!(t[30], (45, 45));
        let missing = tiling(&[15, 20, 30, 35, 40, 45], 5, 15, 45).unwrap_err();
        assert!(matches!(missing, Error::MissingModel(25)));
    }
}
