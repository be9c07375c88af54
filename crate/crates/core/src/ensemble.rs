//! Ensemble construction and ensemble statistics.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{NoiseConfig, NOISE_GAIN_INIT};
use crate::error::{Error, Result};
use crate::grid::DayIndex;
use crate::metrics::{quantile_sorted, rmse};
use crate::model::member_noise;
use crate::train::{forecast_range_with, Dataset, ModelFamily, RangeForecast};

/// Default IC perturbation amplitude, in training-std units.
pub const IC_AMPLITUDE: f64 = 0.1;
/// Constant scale map of the fixed-noise ensemble: the value the learnable
/// map takes at initialisation, `gain · softplus(0)`.
pub const FIXED_NOISE_SCALE: f64 = NOISE_GAIN_INIT * std::f64::consts::LN_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    LayerNoise,
    FixedLayerNoise,
    IcPerturb,
}

impl PerturbKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::LayerNoise => "layer_noise",
            PerturbKind::FixedLayerNoise => "fixed_layer_noise",
            PerturbKind::IcPerturb => "ic_perturb",
        }
    }
}

impl fmt::Display for PerturbKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer_noise" => Ok(PerturbKind::LayerNoise),
            "fixed_layer_noise" | "fln" => Ok(PerturbKind::FixedLayerNoise),
            "ic_perturb" => Ok(PerturbKind::IcPerturb),
            other => Err(Error::InvalidArgument(format!(
                "unknown ensemble strategy '{other}' (expected layer_noise, fixed_layer_noise or ic_perturb)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbStrategy {
    pub kind: PerturbKind,
    pub sigma: f64,
    /// 1-based blocks receiving noise; `None` means all.
    pub enabled_layers: Option<Vec<usize>>,
    pub ic_amplitude: f64,
}

impl PerturbStrategy {
    pub fn new(kind: PerturbKind, sigma: f64) -> Self {
        PerturbStrategy { kind, sigma, enabled_layers: None, ic_amplitude: IC_AMPLITUDE }
    }

    pub fn layer_noise(sigma: f64) -> Self {
        Self::new(PerturbKind::LayerNoise, sigma)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) || !(self.ic_amplitude >= 0.0 && self.ic_amplitude.is_finite()) {
            return Err(Error::InvalidArgument("perturbation scales must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Noise and input perturbation of member `m`. Member 0 is the control.
    pub fn member(&self, m: usize, base_seed: u64) -> (NoiseConfig, Option<(f64, u64)>) {
        match self.kind {
            PerturbKind::LayerNoise => (member_noise(m, self.sigma, base_seed, self.enabled_layers.clone(), None), None),
            PerturbKind::FixedLayerNoise => {
                (member_noise(m, self.sigma, base_seed, self.enabled_layers.clone(), Some(FIXED_NOISE_SCALE)), None)
            }
            PerturbKind::IcPerturb => {
                let perturb = (m > 0).then(|| (self.ic_amplitude, base_seed.wrapping_add(m as u64)));
                (NoiseConfig::off(), perturb)
            }
        }
    }
}

/// Member fields and their pointwise statistics at one lead day.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleForecast {
    pub members: Vec<Vec<f32>>,
    pub mean: Vec<f64>,
    /// Population standard deviation over members.
    pub spread: Vec<f64>,
    pub levels: Vec<f64>,
    /// `quantiles[l]` is the field at level `levels[l]`.
    pub quantiles: Vec<Vec<f64>>,
}

impl EnsembleForecast {
    pub fn new(members: Vec<Vec<f32>>, levels: &[f64]) -> Result<Self> {
        let (mean, spread, quantiles) = ensemble_stats(&members, levels)?;
        Ok(EnsembleForecast { members, mean, spread, levels: levels.to_vec(), quantiles })
    }
}

/// Pointwise mean, population spread and linear-interpolation quantiles.
pub fn ensemble_stats(members: &[Vec<f32>], levels: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
    let Some(first) = members.first() else {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    };
    let n = first.len();
    if members.iter().any(|m| m.len() != n) {
        return Err(Error::ShapeMismatch("ensemble members differ in size".into()));
    }
    if levels.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidArgument("quantile levels must lie in [0, 1]".into()));
    }
    let mf = members.len() as f64;
    let mut mean = vec![0.0; n];
    let mut spread = vec![0.0; n];
    let mut quantiles = vec![vec![0.0; n]; levels.len()];
    let mut col = Vec::with_capacity(members.len());
    for i in 0..n {
        col.clear();
        col.extend(members.iter().map(|m| m[i] as f64));
        let mu = col.iter().sum::<f64>() / mf;
        mean[i] = mu;
        spread[i] = (col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / mf).sqrt();
        col.sort_by(f64::total_cmp);
        for (q, &a) in quantiles.iter_mut().zip(levels) {
            q[i] = quantile_sorted(&col, a);
        }
    }
    Ok((mean, spread, quantiles))
}

/// Ensemble over the forecast range: one [`EnsembleForecast`] per day, in
/// standardised and native units.
#[derive(Debug, Clone)]
pub struct RangeEnsemble {
    pub init_day: DayIndex,
    pub days: Vec<u32>,
    pub owners: Vec<u32>,
    pub native: Vec<EnsembleForecast>,
    pub standardized: Vec<EnsembleForecast>,
}

/// Runs `members` perturbed range forecasts from `init_day` over `leads`.
pub fn run_ensemble(
    family: &ModelFamily,
    data: &Dataset,
    init_day: DayIndex,
    strategy: &PerturbStrategy,
    members: usize,
    base_seed: u64,
    leads: &[u32],
    levels: &[f64],
) -> Result<RangeEnsemble> {
    strategy.validate()?;
    if members == 0 {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    let runs: Vec<RangeForecast> = (0..members)
        .into_par_iter()
        .map(|m| {
            let (noise, perturb) = strategy.member(m, base_seed);
            forecast_range_with(family, data, init_day, &noise, perturb, leads)
        })
        .collect::<Result<_>>()?;
    let days = runs[0].days.clone();
    let owners = runs[0].owners.clone();
    let mut native = Vec::with_capacity(days.len());
    let mut standardized = Vec::with_capacity(days.len());
    for i in 0..days.len() {
        native.push(EnsembleForecast::new(runs.iter().map(|r| r.frames[i].clone()).collect(), levels)?);
        standardized.push(EnsembleForecast::new(runs.iter().map(|r| r.standardized[i].clone()).collect(), levels)?);
    }
    Ok(RangeEnsemble { init_day, days, owners, native, standardized })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub lead: u32,
    pub variable: String,
    pub rmse_ensemble_mean: f64,
}

/// RMSE of the layer-noise ensemble mean per noise scale, lead and
/// variable (native units), plus the standardised channel-mean RMSE used to
/// rank the scales.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// `(sigma, lead, standardised RMSE averaged over dynamic channels)`.
    pub summary: Vec<(f64, u32, f64)>,
}

impl SweepTable {
    /// Noise scale with the lowest standardised RMSE at each lead.
    pub fn argmin_per_lead(&self) -> Vec<(u32, f64)> {
        let mut leads: Vec<u32> = self.summary.iter().map(|s| s.1).collect();
        leads.sort_unstable();
        leads.dedup();
        leads
            .into_iter()
            .map(|lead| {
                let best = self.summary.iter().filter(|s| s.1 == lead).min_by(|a, b| a.2.total_cmp(&b.2)).expect("lead has rows");
                (lead, best.0)
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Evaluates ensemble means at the end day of every lead model's segment
/// for each `sigma`, over `anchors`.
pub fn noise_scale_sweep(
    family: &ModelFamily,
    data: &Dataset,
    anchors: &[DayIndex],
    sigmas: &[f64],
    members: usize,
    base_seed: u64,
) -> Result<SweepTable> {
    if anchors.is_empty() || sigmas.is_empty() {
        return Err(Error::InvalidArgument("sweep needs anchors and noise scales".into()));
    }
    let leads = family.leads();
    let grid = &data.grid;
    let cat = &data.catalog;
    let (h, w, cells) = (grid.h(), grid.w(), grid.cells());
    let weights: Vec<f64> = data.row_weights().iter().map(|&v| v as f64).collect();
    let names = cat.channel_names();
    let dynamic = cat.dynamic_channels();
    let mut table = SweepTable::default();
    for &sigma in sigmas {
        let strategy = PerturbStrategy::layer_noise(sigma);
        // per lead: (native mean preds, standardized mean preds, native truth, standardized truth)
        let mut acc: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = vec![Default::default(); leads.len()];
        for &anchor in anchors {
            let ens = run_ensemble(family, data, anchor, &strategy, members, base_seed, &leads, &[])?;
            for (li, &lead) in leads.iter().enumerate() {
                let i = ens.days.iter().position(|&d| d == lead).expect("lead day in window");
                let day = anchor + lead as DayIndex;
                let slot = &mut acc[li];
                slot.0.extend(&ens.native[i].mean);
                slot.1.extend(&ens.standardized[i].mean);
                slot.2.extend(data.native_frame(day)?.iter().map(|&v| v as f64));
                slot.3.extend(data.frame(day)?.iter().map(|&v| v as f64));
            }
        }
        for (li, &lead) in leads.iter().enumerate() {
            let (pn, ps, tn, ts) = &acc[li];
            let mut std_total = 0.0;
            for &ch in &dynamic {
                let pick = |v: &[f64]| -> Vec<f64> { v.chunks(cells).skip(ch).step_by(names.len()).flatten().copied().collect() };
                let native = rmse(&pick(pn), &pick(tn), &weights, h, w)?;
                std_total += rmse(&pick(ps), &pick(ts), &weights, h, w)?;
                table.rows.push(SweepRow { sigma, lead, variable: names[ch].clone(), rmse_ensemble_mean: native });
            }
            table.summary.push((sigma, lead, std_total / dynamic.len() as f64));
        }
    }
    Ok(table)
}
