//! Deterministic and probabilistic verification scores.
//!
//! Gridded scores take `N × H × W` buffers (row-major, latitude rows) and a
//! latitude weight per row.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::VariableCatalog;

/// Quantile levels used by [`rqe`] unless configured otherwise.
pub const RQE_LEVELS: [f64; 11] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95];
/// Observations with `|y|` at or below this are skipped by [`rqe_cases`].
pub const RQE_EPS: f64 = 1e-9;

fn check_grid(pred: &[f64], truth: &[f64], weights: &[f64], h: usize, w: usize) -> Result<usize> {
    let plane = h * w;
    if plane == 0 || weights.len() != h {
        return Err(Error::ShapeMismatch(format!("{} latitude weights for {h} rows", weights.len())));
    }
    if pred.len() != truth.len() || pred.len() % plane != 0 || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!("pred {} / truth {} values on a {h}x{w} grid", pred.len(), truth.len())));
    }
    Ok(pred.len() / plane)
}

/// Mean over samples of the per-sample latitude-weighted RMSE.
pub fn rmse(pred: &[f64], truth: &[f64], weights: &[f64], h: usize, w: usize) -> Result<f64> {
    let n = check_grid(pred, truth, weights, h, w)?;
    let plane = h * w;
    let mut total = 0.0;
    for s in 0..n {
        let mut acc = 0.0;
        for i in 0..h {
            let row = s * plane + i * w;
            let se: f64 = (row..row + w).map(|j| (pred[j] - truth[j]).powi(2)).sum();
            acc += weights[i] * se;
        }
        total += (acc / plane as f64).sqrt();
    }
    Ok(total / n as f64)
}

/// Latitude-weighted anomaly correlation against a fixed `H × W`
/// climatology `clim`.
pub fn acc(pred: &[f64], truth: &[f64], clim: &[f64], weights: &[f64], h: usize, w: usize) -> Result<f64> {
    let n = check_grid(pred, truth, weights, h, w)?;
    let plane = h * w;
    if clim.len() != plane {
        return Err(Error::ShapeMismatch(format!("climatology has {} values for a {h}x{w} grid", clim.len())));
    }
    let (mut num, mut pp, mut tt) = (0.0, 0.0, 0.0);
    for s in 0..n {
        for c in 0..plane {
            let l = weights[c / w];
            let (a, b) = (pred[s * plane + c] - clim[c], truth[s * plane + c] - clim[c]);
            num += l * a * b;
            pp += l * a * a;
            tt += l * b * b;
        }
    }
    if pp <= 0.0 || tt <= 0.0 {
        return Err(Error::UndefinedMetric("ACC with zero anomaly variance".into()));
    }
    Ok(num / (pp * tt).sqrt())
}

/// `(R², MAE, bias)` of paired samples.
pub fn r2_mae_bias(pred: &[f64], truth: &[f64]) -> Result<(f64, f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!("pred {} vs truth {}", pred.len(), truth.len())));
    }
    let n = truth.len();
    if n < 2 {
        return Err(Error::InvalidArgument("R² needs at least two samples".into()));
    }
    let mean = truth.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::UndefinedMetric("R² with zero truth variance".into()));
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, y)| (y - p).powi(2)).sum();
    let mae = pred.iter().zip(truth).map(|(p, y)| (y - p).abs()).sum::<f64>() / n as f64;
    let bias = pred.iter().zip(truth).map(|(p, y)| p - y).sum::<f64>() / n as f64;
    Ok((1.0 - ss_res / ss_tot, mae, bias))
}

/// Empirical-CDF CRPS of one ensemble against one observation.
pub fn crps(members: &[f64], y: f64) -> f64 {
    let m = members.len();
    if m == 0 {
        return f64::NAN;
    }
    let mut x = members.to_vec();
    x.sort_by(f64::total_cmp);
    let mf = m as f64;
    let skill = x.iter().map(|v| (v - y).abs()).sum::<f64>() / mf;
    // Σ_{m,m'} |x_m − x_m'| = 2 Σ_i (2i − M + 1) x_(i) over the sorted values.
    let pair: f64 = x.iter().enumerate().map(|(i, v)| (2.0 * i as f64 - mf + 1.0) * v).sum::<f64>() * 2.0;
    skill - pair / (2.0 * mf * mf)
}

/// Mean of the ensemble spread minus the absolute error of the ensemble
/// mean, over cases.
pub fn sme<M: AsRef<[f64]>>(cases: &[M], ys: &[f64]) -> Result<f64> {
    if cases.len() != ys.len() || cases.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} ensembles for {} observations", cases.len(), ys.len())));
    }
    let mut total = 0.0;
    for (members, &y) in cases.iter().zip(ys) {
        let x = members.as_ref();
        if x.len() < 2 {
            return Err(Error::InvalidArgument("spread needs at least two members".into()));
        }
        let (mu, sd) = mean_std(x);
        total += sd - (y - mu).abs();
    }
    Ok(total / cases.len() as f64)
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Weighted relative error of forecast quantiles against `y`. `None` when
/// `|y| ≤ eps`.
pub fn rqe(quantiles: &[f64], weights: &[f64], y: f64, eps: f64) -> Result<Option<f64>> {
    if quantiles.len() != weights.len() || quantiles.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} quantiles with {} weights", quantiles.len(), weights.len())));
    }
    let wsum: f64 = weights.iter().sum();
    if (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("quantile weights sum to {wsum}, expected 1")));
    }
    if y.abs() <= eps {
        return Ok(None);
    }
    Ok(Some(quantiles.iter().zip(weights).map(|(q, w)| w * ((q - y) / y).abs()).sum()))
}

/// RQE averaged over the cases with a usable observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RqeSummary {
    pub value: f64,
    pub used: usize,
    pub skipped: usize,
}

pub fn rqe_cases<Q: AsRef<[f64]>>(quantiles: &[Q], weights: &[f64], ys: &[f64], eps: f64) -> Result<RqeSummary> {
    if quantiles.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!("{} quantile sets for {} observations", quantiles.len(), ys.len())));
    }
    let (mut total, mut used, mut skipped) = (0.0, 0, 0);
    for (q, &y) in quantiles.iter().zip(ys) {
        match rqe(q.as_ref(), weights, y, eps)? {
            Some(v) => {
                total += v;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(Error::UndefinedMetric("every observation is too close to zero for RQE".into()));
    }
    Ok(RqeSummary { value: total / used as f64, used, skipped })
}

/// Linear-interpolation quantile of already sorted values.
pub fn quantile_sorted(sorted: &[f64], alpha: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = alpha.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Windows of the continuity report, in lead days.
pub const CONTINUITY_WINDOWS: [(u32, u32); 6] = [(15, 20), (20, 25), (25, 30), (30, 35), (35, 40), (40, 45)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityRow {
    pub variable: String,
    pub window: String,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

/// Mean, standard deviation and maximum of `|x(d+1) − x(d)|` within each
/// continuity window, per channel. `frames[i]` is the `K × cells` field at
/// lead day `days[i]`.
pub fn continuity_stats(frames: &[Vec<f32>], days: &[u32], names: &[String], cells: usize) -> Result<Vec<ContinuityRow>> {
    if frames.len() != days.len() || frames.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} frames for {} days", frames.len(), days.len())));
    }
    if let Some(i) = (1..days.len()).find(|&i| days[i] != days[i - 1] + 1) {
        return Err(Error::MissingData(format!("forecast days jump from {} to {}", days[i - 1], days[i])));
    }
    let k = names.len();
    if let Some(f) = frames.iter().find(|f| f.len() != k * cells) {
        return Err(Error::ShapeMismatch(format!("frame of {} values, expected {}", f.len(), k * cells)));
    }
    let at = |d: u32| days.iter().position(|&x| x == d);
    let mut rows = Vec::with_capacity(k * CONTINUITY_WINDOWS.len());
    for (ch, name) in names.iter().enumerate() {
        for &(a, b) in &CONTINUITY_WINDOWS {
            let (Some(ia), Some(ib)) = (at(a), at(b)) else {
                return Err(Error::MissingData(format!("window {a}-{b} is outside the forecast days")));
            };
            let mut diffs = Vec::with_capacity((ib - ia) * cells);
            for i in ia..ib {
                let (x0, x1) = (&frames[i][ch * cells..(ch + 1) * cells], &frames[i + 1][ch * cells..(ch + 1) * cells]);
                diffs.extend(x0.iter().zip(x1).map(|(p, q)| (*q as f64 - *p as f64).abs()));
            }
            let (mean, std) = mean_std(&diffs);
            let max = diffs.iter().copied().fold(0.0, f64::max);
            rows.push(ContinuityRow { variable: name.clone(), window: format!("{a}-{b}"), mean, std, max });
        }
    }
    Ok(rows)
}

pub fn write_continuity_csv(path: &Path, rows: &[ContinuityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serde(format!("{}: {other:?}", path.display())),
    }
}

/// Score names accepted by [`evaluate`].
pub const METRIC_NAMES: [&str; 9] = ["rmse", "acc", "r2", "mae", "bias", "crps", "sme", "rqe", "rqe_skipped"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub variable: String,
    pub lead: u32,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub meta: BTreeMap<String, String>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn get(&self, variable: &str, lead: u32, metric: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.variable == variable && r.lead == lead && r.metric == metric).map(|r| r.value)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Serde(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// One verification case: the forecast of every channel at one lead day,
/// against the truth at the valid day.
#[derive(Debug, Clone)]
pub struct Case<'a> {
    pub lead: u32,
    /// Deterministic forecast, `K × cells`.
    pub forecast: &'a [f32],
    /// Optional ensemble members, each `K × cells`.
    pub members: Option<&'a [Vec<f32>]>,
    pub truth: &'a [f32],
}

/// Per (variable, lead) scores over a set of cases.
///
/// `clim` is the per-channel time mean of the truth over the test period
/// (`K × cells`). Probabilistic scores need `members` on every case and are
/// pooled over grid cells with latitude weights ignored.
pub fn evaluate(
    cases: &[Case<'_>],
    catalog: &VariableCatalog,
    clim: &[f64],
    weights: &[f64],
    h: usize,
    w: usize,
    metrics: &[&str],
) -> Result<EvalReport> {
    for m in metrics {
        if !METRIC_NAMES.contains(m) {
            return Err(Error::InvalidArgument(format!("unknown metric '{m}'")));
        }
    }
    let cells = h * w;
    let names = catalog.channel_names();
    let k = names.len();
    if clim.len() != k * cells {
        return Err(Error::ShapeMismatch("climatology mean does not match K x H x W".into()));
    }
    let mut leads: Vec<u32> = cases.iter().map(|c| c.lead).collect();
    leads.sort_unstable();
    leads.dedup();
    let want = |m: &str| metrics.contains(&m);
    let levels = RQE_LEVELS;
    let qw = vec![1.0 / levels.len() as f64; levels.len()];
    let mut report = EvalReport::default();
    for ch in catalog.dynamic_channels() {
        let sl = ch * cells..(ch + 1) * cells;
        for &lead in &leads {
            let sel: Vec<&Case> = cases.iter().filter(|c| c.lead == lead).collect();
            let pred: Vec<f64> = sel.iter().flat_map(|c| c.forecast[sl.clone()].iter().map(|&v| v as f64)).collect();
            let truth: Vec<f64> = sel.iter().flat_map(|c| c.truth[sl.clone()].iter().map(|&v| v as f64)).collect();
            let mut push = |metric: &str, value: f64| {
                report.rows.push(EvalRow { variable: names[ch].clone(), lead, metric: metric.into(), value });
            };
            if want("rmse") {
                push("rmse", rmse(&pred, &truth, weights, h, w)?);
            }
            if want("acc") {
                push("acc", acc(&pred, &truth, &clim[sl.clone()], weights, h, w)?);
            }
            if want("r2") || want("mae") || want("bias") {
                let (r2, mae, bias) = r2_mae_bias(&pred, &truth)?;
                for (name, v) in [("r2", r2), ("mae", mae), ("bias", bias)] {
                    if want(name) {
                        push(name, v);
                    }
                }
            }
            let probabilistic = ["crps", "sme", "rqe", "rqe_skipped"].iter().any(|m| want(m));
            if !probabilistic {
                continue;
            }
            let mut ens: Vec<Vec<f64>> = Vec::with_capacity(sel.len() * cells);
            let mut ys = Vec::with_capacity(sel.len() * cells);
            for c in &sel {
                let members =
                    c.members.ok_or_else(|| Error::InvalidArgument("probabilistic metrics need ensemble members".into()))?;
                for cell in sl.clone() {
                    ens.push(members.iter().map(|m| m[cell] as f64).collect());
                    ys.push(c.truth[cell] as f64);
                }
            }
            if want("crps") {
                let v = ens.iter().zip(&ys).map(|(x, &y)| crps(x, y)).sum::<f64>() / ys.len() as f64;
                push("crps", v);
            }
            if want("sme") {
                push("sme", sme(&ens, &ys)?);
            }
            if want("rqe") || want("rqe_skipped") {
                let qs: Vec<Vec<f64>> = ens
                    .iter()
                    .map(|x| {
                        let mut s = x.clone();
                        s.sort_by(f64::total_cmp);
                        levels.iter().map(|&a| quantile_sorted(&s, a)).collect()
                    })
                    .collect();
                let summary = rqe_cases(&qs, &qw, &ys, RQE_EPS)?;
                if want("rqe") {
                    push("rqe", summary.value);
                }
                if want("rqe_skipped") {
                    push("rqe_skipped", summary.skipped as f64);
                }
            }
        }
    }
    Ok(report)
}
