//! Ablation variants and the shared train-then-verify loop behind them.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::backbone::NoiseConfig;
use crate::ensemble::{run_ensemble, PerturbKind, PerturbStrategy};
use crate::error::{Error, Result};
use crate::grid::DayIndex;
use crate::metrics::rmse;
use crate::model::ModelConfig;
use crate::train::{forecast_range_with, Dataset, ModelFamily, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    Default,
    NoNoise,
    NoClim,
    NoNoiseNoClim,
    /// Default models sampled with a constant noise scale.
    Fln,
    /// Default models, noise off, perturbed initial state.
    IcPerturb,
    /// Default models with noise only in these 1-based blocks.
    Layers(Vec<usize>),
    /// Default models sampled at each noise scale.
    Sigma(Vec<f64>),
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Default => "default".into(),
            Variant::NoNoise => "no_noise".into(),
            Variant::NoClim => "no_clim".into(),
            Variant::NoNoiseNoClim => "no_noise_no_clim".into(),
            Variant::Fln => "fln".into(),
            Variant::IcPerturb => "ic_perturb".into(),
            Variant::Layers(l) => format!("layers:{}", join(l)),
            Variant::Sigma(s) => format!("sigma:{}", join(s)),
        }
    }

    /// Whether the variant needs its own trained family (as opposed to
    /// sampling the default one differently).
    pub fn trains(&self) -> bool {
        matches!(self, Variant::Default | Variant::NoNoise | Variant::NoClim | Variant::NoNoiseNoClim)
    }

    pub fn uses_climatology(&self) -> bool {
        !matches!(self, Variant::NoClim | Variant::NoNoiseNoClim)
    }

    pub fn uses_noise(&self) -> bool {
        !matches!(self, Variant::NoNoise | Variant::NoNoiseNoClim)
    }
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::InvalidArgument(format!("invalid ablation variant '{s}': {what}"));
        match s {
            "default" => Ok(Variant::Default),
            "no_noise" => Ok(Variant::NoNoise),
            "no_clim" => Ok(Variant::NoClim),
            "no_noise_no_clim" => Ok(Variant::NoNoiseNoClim),
            "fln" => Ok(Variant::Fln),
            "ic_perturb" => Ok(Variant::IcPerturb),
            _ => {
                if let Some(spec) = s.strip_prefix("layers:") {
                    parse_layers(spec).map(Variant::Layers).map_err(|_| bad("expected layers:1-2 or layers:1,3"))
                } else if let Some(list) = s.strip_prefix("sigma:") {
                    let vals: std::result::Result<Vec<f64>, _> = list.split(',').map(|x| x.trim().parse::<f64>()).collect();
                    match vals {
                        Ok(v) if !v.is_empty() && v.iter().all(|x| *x >= 0.0 && x.is_finite()) => Ok(Variant::Sigma(v)),
                        _ => Err(bad("expected sigma:0,0.5,1")),
                    }
                } else {
                    Err(bad("unknown name"))
                }
            }
        }
    }
}

/// Parses a comma-separated variant list. Bare numbers continue the
/// preceding `layers:` or `sigma:` entry, so `default,sigma:0,1,2` holds two
/// variants.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let mut items: Vec<String> = Vec::new();
    for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let numeric = tok.starts_with(|c: char| c.is_ascii_digit() || c == '.');
        match items.last_mut() {
            Some(prev) if numeric && (prev.starts_with("layers:") || prev.starts_with("sigma:")) => {
                prev.push(',');
                prev.push_str(tok);
            }
            _ => items.push(tok.to_string()),
        }
    }
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty variant list".into()));
    }
    items.iter().map(|s| s.parse()).collect()
}

/// Parses `1-3` or `1,2,4` into sorted 1-based block indices.
pub fn parse_layers(spec: &str) -> Result<Vec<usize>> {
    let err = || Error::InvalidArgument(format!("invalid layer list '{spec}'"));
    let mut out = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| err())?, b.trim().parse().map_err(|_| err())?);
            if a == 0 || b < a {
                return Err(err());
            }
            out.extend(a..=b);
        } else {
            let v: usize = part.parse().map_err(|_| err())?;
            if v == 0 {
                return Err(err());
            }
            out.push(v);
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Trains one model per lead of `train.lead_times`, leads in parallel.
pub fn train_family(data: &Dataset, train: &TrainConfig, model: &ModelConfig) -> Result<(ModelFamily, Vec<Trainer>)> {
    let trainers: Vec<Trainer> = train
        .lead_times
        .par_iter()
        .map(|&lead| {
            let mut t = Trainer::new(lead, train, model, &data.grid, &data.catalog)?;
            t.run(data, |_, _| {})?;
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut family = ModelFamily::new();
    for t in &trainers {
        family.insert(t.lead, t.model.clone());
    }
    Ok((family, trainers))
}

/// Configurations of a variant derived from the default ones.
pub fn variant_configs(variant: &Variant, train: &TrainConfig, model: &ModelConfig) -> (TrainConfig, ModelConfig) {
    let mut t = train.clone();
    let mut m = model.clone();
    if !variant.uses_noise() {
        t.sigma = 0.0;
    }
    m.use_climatology = variant.uses_climatology();
    (t, m)
}

/// Standardised verification of one forecasting setup.
#[derive(Debug, Clone, Serialize)]
pub struct DayScore {
    pub day: u32,
    pub variable: String,
    /// Forecast used for the headline score: the ensemble mean when the
    /// setup is stochastic, otherwise the single noise-free forecast.
    pub rmse: f64,
    /// Single forecast: the seed-0 noise draw, or noise off.
    pub rmse_deterministic: f64,
    /// Mean over members of the member RMSE (equals `rmse_deterministic`
    /// without an ensemble).
    pub rmse_member_mean: f64,
}

/// How a family is sampled during verification.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampling {
    /// One forecast with noise disabled.
    NoiseOff,
    /// Deterministic seed-0 forecast plus an ensemble.
    Ensemble { strategy: PerturbStrategy, members: usize, base_seed: u64 },
}

impl Sampling {
    pub fn for_variant(variant: &Variant, members: usize, sigma: f64, base_seed: u64) -> Vec<(f64, Sampling)> {
        let ens = |strategy: PerturbStrategy| Sampling::Ensemble { strategy, members, base_seed };
        match variant {
            Variant::NoNoise | Variant::NoNoiseNoClim => vec![(0.0, Sampling::NoiseOff)],
            Variant::Default | Variant::NoClim => vec![(sigma, ens(PerturbStrategy::layer_noise(sigma)))],
            Variant::Fln => vec![(sigma, ens(PerturbStrategy::new(PerturbKind::FixedLayerNoise, sigma)))],
            Variant::IcPerturb => vec![(sigma, ens(PerturbStrategy::new(PerturbKind::IcPerturb, sigma)))],
            Variant::Layers(l) => {
                let mut s = PerturbStrategy::layer_noise(sigma);
                s.enabled_layers = Some(l.clone());
                vec![(sigma, ens(s))]
            }
            Variant::Sigma(list) => list.iter().map(|&s| (s, ens(PerturbStrategy::layer_noise(s)))).collect(),
        }
    }
}

/// Scores `family` on `anchors` over the forecast days covered by `leads`,
/// in standardised units per dynamic channel.
pub fn score_family(
    family: &ModelFamily,
    data: &Dataset,
    anchors: &[DayIndex],
    leads: &[u32],
    sampling: &Sampling,
) -> Result<Vec<DayScore>> {
    if anchors.is_empty() {
        return Err(Error::InvalidArgument("no verification anchors".into()));
    }
    let cat = &data.catalog;
    let grid = &data.grid;
    let (h, w, cells, k) = (grid.h(), grid.w(), grid.cells(), cat.k());
    let weights: Vec<f64> = data.row_weights().iter().map(|&v| v as f64).collect();
    // per anchor: (days, headline frames, deterministic frames, member frames)
    type Run = (Vec<u32>, Vec<Vec<f64>>, Vec<Vec<f32>>, Vec<Vec<Vec<f32>>>);
    let runs: Vec<Run> = anchors
        .par_iter()
        .map(|&a| -> Result<Run> {
            match sampling {
                Sampling::NoiseOff => {
                    let r = forecast_range_with(family, data, a, &NoiseConfig::off(), None, leads)?;
                    let head = r.standardized.iter().map(|f| f.iter().map(|&v| v as f64).collect()).collect();
                    Ok((r.days, head, r.standardized, Vec::new()))
                }
                Sampling::Ensemble { strategy, members, base_seed } => {
                    let e = run_ensemble(family, data, a, strategy, *members, *base_seed, leads, &[])?;
                    let head = e.standardized.iter().map(|f| f.mean.clone()).collect();
                    let det = e.standardized.iter().map(|f| f.members[0].clone()).collect();
                    let mem = e.standardized.iter().map(|f| f.members.clone()).collect();
                    Ok((e.days, head, det, mem))
                }
            }
        })
        .collect::<Result<_>>()?;
    let days = runs[0].0.clone();
    let names = cat.channel_names();
    let mut out = Vec::new();
    for (di, &day) in days.iter().enumerate() {
        let truth: Vec<&[f32]> = anchors.iter().map(|&a| data.frame(a + day as DayIndex)).collect::<Result<_>>()?;
        for ch in cat.dynamic_channels() {
            let sl = ch * cells..(ch + 1) * cells;
            let t: Vec<f64> = truth.iter().flat_map(|f| f[sl.clone()].iter().map(|&v| v as f64)).collect();
            let head: Vec<f64> = runs.iter().flat_map(|r| r.1[di][sl.clone()].iter().copied()).collect();
            let det: Vec<f64> = runs.iter().flat_map(|r| r.2[di][sl.clone()].iter().map(|&v| v as f64)).collect();
            let rmse_head = rmse(&head, &t, &weights, h, w)?;
            let rmse_det = rmse(&det, &t, &weights, h, w)?;
            let member_mean = if runs[0].3.is_empty() {
                rmse_det
            } else {
                let m = runs[0].3[di].len();
                let mut total = 0.0;
                for j in 0..m {
                    let p: Vec<f64> = runs.iter().flat_map(|r| r.3[di][j][sl.clone()].iter().map(|&v| v as f64)).collect();
                    total += rmse(&p, &t, &weights, h, w)?;
                }
                total / m as f64
            };
            out.push(DayScore {
                day,
                variable: names[ch].clone(),
                rmse: rmse_head,
                rmse_deterministic: rmse_det,
                rmse_member_mean: member_mean,
            });
        }
    }
    debug_assert_eq!(k, names.len());
    Ok(out)
}

/// Mean of a score column over `days` and all variables.
pub fn mean_over(scores: &[DayScore], days: std::ops::RangeInclusive<u32>, pick: impl Fn(&DayScore) -> f64) -> f64 {
    let sel: Vec<f64> = scores.iter().filter(|s| days.contains(&s.day)).map(pick).collect();
    sel.iter().sum::<f64>() / sel.len().max(1) as f64
}
