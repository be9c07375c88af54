//! Gridded weather states: grid geometry and latitude weighting, the variable
//! catalog, calendar helpers, the synthetic reanalysis surrogate, daily
//! climatology, six-hourly daily averaging, and the `TQS1` binary format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latitude/longitude grid with a patch size for tokenisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    lats: Vec<f64>,
    lons: Vec<f64>,
    patch: usize,
}

impl GridSpec {
    pub fn new(lats: Vec<f64>, lons: Vec<f64>, patch: usize) -> Result<Self> {
        if lats.is_empty() || lons.is_empty() {
            return Err(Error::InvalidGrid("empty latitude or longitude list".into()));
        }
        if patch == 0 {
            return Err(Error::InvalidGrid("patch size must be positive".into()));
        }
        if lats.iter().any(|l| !l.is_finite() || l.abs() > 90.0) {
            return Err(Error::InvalidGrid("latitudes must lie in [-90, 90]".into()));
        }
        if lats.windows(2).any(|p| p[1] >= p[0]) {
            return Err(Error::InvalidGrid("latitudes must be strictly decreasing".into()));
        }
        if lons.iter().any(|l| !l.is_finite() || *l < -180.0 || *l >= 180.0) {
            return Err(Error::InvalidGrid("longitudes must lie in [-180, 180)".into()));
        }
        if lons.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidGrid("longitudes must be strictly increasing".into()));
        }
        if lats.len() % patch != 0 || lons.len() % patch != 0 {
            return Err(Error::InvalidGrid(format!("patch size {patch} must divide the {}x{} grid", lats.len(), lons.len())));
        }
        Ok(GridSpec { lats, lons, patch })
    }

    /// Uniform cell-centred grid: rows sit half a cell away from the poles so
    /// every row has a positive area weight.
    pub fn uniform(h: usize, w: usize, patch: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::InvalidGrid("empty latitude or longitude list".into()));
        }
        let dlat = 180.0 / h as f64;
        let dlon = 360.0 / w as f64;
        let lats = (0..h).map(|i| 90.0 - (i as f64 + 0.5) * dlat).collect();
        let lons = (0..w).map(|j| -180.0 + j as f64 * dlon).collect();
        Self::new(lats, lons, patch)
    }

    /// The 16×32 desk grid with 4×4 patches.
    pub fn desk() -> Self {
        Self::uniform(16, 32, 4).expect("valid desk grid")
    }

    /// The 5.625° grid (32×64).
    pub fn coarse_global() -> Self {
        Self::uniform(32, 64, 4).expect("valid 5.625 degree grid")
    }

    pub fn h(&self) -> usize {
        self.lats.len()
    }

    pub fn w(&self) -> usize {
        self.lons.len()
    }

    pub fn cells(&self) -> usize {
        self.h() * self.w()
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn lats(&self) -> &[f64] {
        &self.lats
    }

    pub fn lons(&self) -> &[f64] {
        &self.lons
    }

    pub fn patch_rows(&self) -> usize {
        self.h() / self.patch
    }

    pub fn patch_cols(&self) -> usize {
        self.w() / self.patch
    }

    /// Token count per level, `(H/P)·(W/P)`.
    pub fn tokens(&self) -> usize {
        self.patch_rows() * self.patch_cols()
    }

    /// Centre `(lat, lon)` of every patch in row-major patch order.
    pub fn patch_centres(&self) -> Vec<(f64, f64)> {
        let p = self.patch;
        let mut out = Vec::with_capacity(self.tokens());
        for pr in 0..self.patch_rows() {
            let lat = self.lats[pr * p..(pr + 1) * p].iter().sum::<f64>() / p as f64;
            for pc in 0..self.patch_cols() {
                let lon = self.lons[pc * p..(pc + 1) * p].iter().sum::<f64>() / p as f64;
                out.push((lat, lon));
            }
        }
        out
    }

    pub fn latitude_weights(&self) -> Vec<f64> {
        latitude_weights(&self.lats).expect("validated grid")
    }
}

/// Area weights `cos(lat_i)` normalised to unit mean over rows.
pub fn latitude_weights(lats: &[f64]) -> Result<Vec<f64>> {
    if lats.is_empty() {
        return Err(Error::InvalidGrid("empty latitude list".into()));
    }
    if let Some(bad) = lats.iter().find(|l| !l.is_finite() || l.abs() > 90.0) {
        return Err(Error::InvalidGrid(format!("latitude {bad} outside [-90, 90]")));
    }
    let cos: Vec<f64> = lats.iter().map(|l| l.to_radians().cos()).collect();
    let mean = cos.iter().sum::<f64>() / cos.len() as f64;
    if mean <= 0.0 {
        return Err(Error::InvalidGrid("latitudes have zero total area weight".into()));
    }
    Ok(cos.iter().map(|c| c / mean).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub units: String,
    #[serde(default)]
    pub is_static: bool,
}

impl Variable {
    pub fn new(name: &str, units: &str) -> Self {
        Variable { name: name.into(), units: units.into(), is_static: false }
    }

    pub fn fixed(name: &str, units: &str) -> Self {
        Variable { name: name.into(), units: units.into(), is_static: true }
    }
}

/// Surface and upper-air variables with their pressure levels.
///
/// Channel order is upper-air first (variable-major, levels ascending), then
/// surface variables in catalog order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableCatalog {
    surface: Vec<Variable>,
    upper: Vec<Variable>,
    levels: Vec<u32>,
}

impl VariableCatalog {
    pub fn new(surface: Vec<Variable>, upper: Vec<Variable>, levels: Vec<u32>) -> Result<Self> {
        if surface.is_empty() {
            return Err(Error::InvalidCatalog("at least one surface variable is required".into()));
        }
        if !upper.is_empty() && levels.is_empty() {
            return Err(Error::InvalidCatalog("upper-air variables need pressure levels".into()));
        }
        if levels.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::InvalidCatalog("levels must be strictly increasing".into()));
        }
        let mut names: Vec<&str> = surface.iter().chain(&upper).map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|p| p[0] == p[1]) {
            return Err(Error::InvalidCatalog("variable names must be unique".into()));
        }
        if upper.iter().any(|v| v.is_static) {
            return Err(Error::InvalidCatalog("static fields belong to the surface group".into()));
        }
        Ok(VariableCatalog { surface, upper, levels })
    }

    /// Desk catalog: land-sea mask, orography, T2m, Wind10 at the surface and
    /// Z, T on 500/850 hPa (K = 8).
    pub fn desk() -> Self {
        Self::new(
            vec![
                Variable::fixed("lsm", "1"),
                Variable::fixed("orography", "m"),
                Variable::new("t2m", "K"),
                Variable::new("wind10", "m s-1"),
            ],
            vec![Variable::new("z", "m2 s-2"), Variable::new("t", "K")],
            vec![500, 850],
        )
        .expect("valid desk catalog")
    }

    /// Six-channel catalog used for gradient checks: four surface fields and
    /// Z on two levels.
    pub fn small() -> Self {
        Self::new(
            vec![
                Variable::fixed("lsm", "1"),
                Variable::fixed("orography", "m"),
                Variable::new("t2m", "K"),
                Variable::new("wind10", "m s-1"),
            ],
            vec![Variable::new("z", "m2 s-2")],
            vec![500, 850],
        )
        .expect("valid small catalog")
    }

    /// Full variable list: five upper-air variables on 13 levels plus two
    /// dynamic surface variables and two static fields.
    pub fn paper() -> Self {
        Self::new(
            vec![
                Variable::fixed("lsm", "1"),
                Variable::fixed("orography", "m"),
                Variable::new("t2m", "K"),
                Variable::new("wind10", "m s-1"),
            ],
            vec![
                Variable::new("z", "m2 s-2"),
                Variable::new("wind", "m s-1"),
                Variable::new("t", "K"),
                Variable::new("q", "kg kg-1"),
                Variable::new("r", "%"),
            ],
            vec![50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000],
        )
        .expect("valid paper catalog")
    }

    pub fn surface(&self) -> &[Variable] {
        &self.surface
    }

    pub fn upper(&self) -> &[Variable] {
        &self.upper
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    /// `V_S`
    pub fn n_surface(&self) -> usize {
        self.surface.len()
    }

    /// `V_A`
    pub fn n_upper(&self) -> usize {
        self.upper.len()
    }

    /// `C`
    pub fn n_levels(&self) -> usize {
        if self.upper.is_empty() {
            0
        } else {
            self.levels.len()
        }
    }

    /// Total channel count `K = V_A·C + V_S`.
    pub fn k(&self) -> usize {
        self.n_upper() * self.n_levels() + self.n_surface()
    }

    /// Channels that evolve in time (static fields excluded).
    pub fn prognostic_channels(&self) -> usize {
        self.k() - self.surface.iter().filter(|v| v.is_static).count()
    }

    pub fn upper_channel(&self, var: usize, level: usize) -> usize {
        var * self.n_levels() + level
    }

    pub fn surface_channel(&self, var: usize) -> usize {
        self.n_upper() * self.n_levels() + var
    }

    /// Channel names such as `z500` or `t2m`.
    pub fn channel_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.k());
        for v in &self.upper {
            for l in self.levels.iter().take(self.n_levels()) {
                out.push(format!("{}{}", v.name, l));
            }
        }
        out.extend(self.surface.iter().map(|v| v.name.clone()));
        out
    }

    pub fn channel_units(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.k());
        for v in &self.upper {
            out.extend(std::iter::repeat(v.units.clone()).take(self.n_levels()));
        }
        out.extend(self.surface.iter().map(|v| v.units.clone()));
        out
    }

    pub fn is_static_channel(&self, ch: usize) -> bool {
        let first_surface = self.n_upper() * self.n_levels();
        ch >= first_surface && self.surface[ch - first_surface].is_static
    }

    /// Channel indices of the time-evolving variables.
    pub fn dynamic_channels(&self) -> Vec<usize> {
        (0..self.k()).filter(|&c| !self.is_static_channel(c)).collect()
    }

    /// Contiguous channel ranges, one per variable: `C` channels for every
    /// upper-air variable, one for every surface variable.
    pub fn variable_groups(&self) -> Vec<std::ops::Range<usize>> {
        let c = self.n_levels();
        let mut out: Vec<_> = (0..self.n_upper()).map(|v| v * c..(v + 1) * c).collect();
        let base = self.n_upper() * c;
        out.extend((0..self.n_surface()).map(|s| base + s..base + s + 1));
        out
    }
}

/// Days since 1970-01-01.
pub type DayIndex = i64;

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("epoch")
}

pub fn day_to_date(day: DayIndex) -> NaiveDate {
    epoch() + Duration::days(day)
}

pub fn date_to_day(date: NaiveDate) -> DayIndex {
    (date - epoch()).num_days()
}

/// First day of a calendar year.
pub fn year_start(year: i32) -> DayIndex {
    date_to_day(NaiveDate::from_ymd_opt(year, 1, 1).expect("valid year"))
}

pub fn days_in_year(year: i32) -> usize {
    (year_start(year + 1) - year_start(year)) as usize
}

/// 1-based ordinal day of year (366 only occurs in leap years).
pub fn day_of_year(day: DayIndex) -> u32 {
    day_to_date(day).ordinal()
}

pub fn year_of(day: DayIndex) -> i32 {
    day_to_date(day).year()
}

/// One day of all channels, `K × H × W` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherState {
    pub day: DayIndex,
    pub values: Vec<f32>,
}

impl WeatherState {
    pub fn new(day: DayIndex, values: Vec<f32>, k: usize, grid: &GridSpec) -> Result<Self> {
        if values.len() != k * grid.cells() {
            return Err(Error::ShapeMismatch(format!("state has {} values, expected {}", values.len(), k * grid.cells())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("state for day {day}")));
        }
        Ok(WeatherState { day, values })
    }

    pub fn channel(&self, ch: usize, cells: usize) -> &[f32] {
        &self.values[ch * cells..(ch + 1) * cells]
    }
}

/// Per-calendar-day mean fields, slot `d - 1` for ordinal day `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    per_day: Vec<f32>,
    frame: usize,
    first_year: i32,
    last_year: i32,
    has_leap_day: bool,
}

pub const CLIMATOLOGY_DAYS: usize = 366;

impl Climatology {
    /// Builds a climatology directly from 366 slot fields.
    pub fn from_slots(per_day: Vec<f32>, frame: usize, years: (i32, i32)) -> Result<Self> {
        if per_day.len() != CLIMATOLOGY_DAYS * frame {
            return Err(Error::ShapeMismatch("climatology needs 366 frames".into()));
        }
        Ok(Climatology { per_day, frame, first_year: years.0, last_year: years.1, has_leap_day: true })
    }

    pub fn frame_len(&self) -> usize {
        self.frame
    }

    pub fn years_used(&self) -> (i32, i32) {
        (self.first_year, self.last_year)
    }

    /// Whether slot 366 was estimated from leap years rather than copied from
    /// slot 365.
    pub fn has_leap_day(&self) -> bool {
        self.has_leap_day
    }

    /// Field for a 1-based ordinal day of year.
    pub fn slot(&self, ordinal: u32) -> &[f32] {
        let d = (ordinal.clamp(1, 366) - 1) as usize;
        &self.per_day[d * self.frame..(d + 1) * self.frame]
    }

    pub fn for_day(&self, day: DayIndex) -> &[f32] {
        self.slot(day_of_year(day))
    }

    /// All 366 slots, `366 × K × H × W`.
    pub fn as_slice(&self) -> &[f32] {
        &self.per_day
    }
}

/// Mean of each calendar slot over the given inclusive year range. States are
/// accumulated in day order, so the result does not depend on input order.
/// Slot 366 averages leap years only; when the range has no leap year it
/// repeats slot 365.
pub fn compute_climatology(states: &[WeatherState], years: (i32, i32)) -> Result<Climatology> {
    let (y0, y1) = years;
    if y1 < y0 {
        return Err(Error::InvalidArgument(format!("empty year range {y0}..={y1}")));
    }
    let frame = states.first().map(|s| s.values.len()).ok_or_else(|| Error::MissingData("no states".into()))?;
    let (start, end) = (year_start(y0), year_start(y1 + 1));
    let mut selected: Vec<&WeatherState> = states.iter().filter(|s| s.day >= start && s.day < end).collect();
    selected.sort_by_key(|s| s.day);
    let expected = (end - start) as usize;
    let distinct = selected.windows(2).filter(|p| p[0].day != p[1].day).count() + usize::from(!selected.is_empty());
    if distinct != expected || selected.len() != expected {
        return Err(Error::MissingData(format!("years {y0}..={y1} need {expected} daily states, found {} distinct", distinct)));
    }
    let mut sums = vec![0.0f64; CLIMATOLOGY_DAYS * frame];
    let mut counts = [0usize; CLIMATOLOGY_DAYS];
    for s in selected {
        if s.values.len() != frame {
            return Err(Error::ShapeMismatch(format!("state for day {} has a different size", s.day)));
        }
        let d = (day_of_year(s.day) - 1) as usize;
        counts[d] += 1;
        for (acc, &v) in sums[d * frame..(d + 1) * frame].iter_mut().zip(&s.values) {
            *acc += v as f64;
        }
    }
    let has_leap_day = counts[365] > 0;
    let mut per_day = vec![0.0f32; CLIMATOLOGY_DAYS * frame];
    for d in 0..CLIMATOLOGY_DAYS {
        let src = if counts[d] == 0 { 364 } else { d };
        let n = counts[src] as f64;
        for i in 0..frame {
            per_day[d * frame + i] = (sums[src * frame + i] / n) as f32;
        }
    }
    Ok(Climatology { per_day, frame, first_year: y0, last_year: y1, has_leap_day })
}

/// Daily mean from 24 hourly frames `[24, K, H, W]`, sampling hours
/// 0, 6, 12 and 18.
///
/// Each `(u, v, target)` pair produces a wind-speed channel at output index
/// `target` from the per-sample magnitude `sqrt(u² + v²)`; the u and v
/// channels themselves are consumed. Remaining channels keep their input
/// order in the free output slots. Output has `K - pairs` channels.
pub fn daily_average(hourly: &[f64], k: usize, cells: usize, wind_pairs: &[(usize, usize, usize)]) -> Result<Vec<f64>> {
    const HOURS: usize = 24;
    const SAMPLES: [usize; 4] = [0, 6, 12, 18];
    if hourly.len() != HOURS * k * cells {
        return Err(Error::ShapeMismatch(format!("hourly block has {} values, expected 24 x {k} x {cells}", hourly.len())));
    }
    let kout = k.checked_sub(wind_pairs.len()).ok_or_else(|| Error::InvalidArgument("too many wind pairs".into()))?;
    let mut used = vec![false; k];
    let mut target_taken = vec![false; kout];
    for &(u, v, t) in wind_pairs {
        if u >= k || v >= k || t >= kout {
            return Err(Error::InvalidArgument(format!("wind pair ({u}, {v}, {t}) out of range")));
        }
        if u == v || used[u] || used[v] || target_taken[t] {
            return Err(Error::InvalidArgument(format!("wind pair ({u}, {v}, {t}) collides with another index")));
        }
        used[u] = true;
        used[v] = true;
        target_taken[t] = true;
    }
    let frame = |hour: usize, ch: usize| &hourly[(hour * k + ch) * cells..(hour * k + ch + 1) * cells];
    let inv = 1.0 / SAMPLES.len() as f64;
    let mut out = vec![0.0; kout * cells];
    for &(u, v, t) in wind_pairs {
        let dst = &mut out[t * cells..(t + 1) * cells];
        for &hr in &SAMPLES {
            for ((d, &uu), &vv) in dst.iter_mut().zip(frame(hr, u)).zip(frame(hr, v)) {
                *d += (uu * uu + vv * vv).sqrt() * inv;
            }
        }
    }
    let mut free_slots = (0..kout).filter(|&t| !target_taken[t]);
    for ch in (0..k).filter(|&c| !used[c]) {
        let t = free_slots.next().expect("slot count matches channel count");
        let dst = &mut out[t * cells..(t + 1) * cells];
        for &hr in &SAMPLES {
            for (d, &x) in dst.iter_mut().zip(frame(hr, ch)) {
                *d += x * inv;
            }
        }
    }
    Ok(out)
}

/// Knobs for the synthetic reanalysis surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub start_year: i32,
    pub years: usize,
    pub seed: u64,
    /// Red-noise amplitude in units of each channel's scale.
    pub noise_amplitude: f64,
    /// Lag-one autocorrelation of the daily red noise.
    pub noise_memory: f64,
    /// Period of the zonally propagating slow mode, days.
    pub slow_period: f64,
    pub slow_wavenumber: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            start_year: 1979,
            years: 8,
            seed: 0,
            noise_amplitude: 0.3,
            noise_memory: 0.9,
            slow_period: 45.0,
            slow_wavenumber: 2,
        }
    }
}

pub const ANNUAL_PERIOD: f64 = 365.0;

/// Per-channel generator coefficients, in units of the channel scale.
#[derive(Debug, Clone)]
pub(crate) struct ChannelModel {
    offset: f64,
    scale: f64,
    base_lat: f64,
    base_land: f64,
    base_orog: f64,
    annual_sym: f64,
    annual_hemi: f64,
    annual_phase: f64,
    annual_phase_lat: f64,
    annual_phase_land: f64,
    annual_amp_tex: f64,
    annual_phase_tex: f64,
    wave_amp: f64,
    wave_phase: f64,
}

fn native_scale(name: &str, level: Option<u32>) -> (f64, f64) {
    let lev = level.unwrap_or(1000) as f64;
    match name {
        "t2m" => (288.0, 10.0),
        "wind10" | "wind" => (6.0 + 10.0 * (1.0 - lev / 1000.0), 2.5),
        "z" => (9.80665 * 16_000.0 * (1000.0 / lev).ln(), 300.0 + 0.4 * (1000.0 - lev)),
        "t" => (288.0 - 40.0 * (1000.0 / lev).ln(), 8.0),
        "q" => (0.01 * lev / 1000.0, 0.003),
        "r" => (60.0, 15.0),
        _ => (0.0, 1.0),
    }
}

/// Synthetic surrogate generator. Every dynamic channel is
/// `offset + scale·(base + annual + slow + red noise)`:
/// a latitude/land/orography dependent mean, an annual harmonic whose
/// amplitude and phase vary with latitude, land cover and a smooth random
/// texture, a zonally propagating wave with a
/// 30–60 day period confined to the tropics, and AR(1) noise.
pub struct SynthGenerator {
    grid: GridSpec,
    catalog: VariableCatalog,
    config: SynthConfig,
    lsm: Vec<f64>,
    orography: Vec<f64>,
    texture: [Vec<f64>; 2],
    channels: Vec<Option<ChannelModel>>,
}

impl SynthGenerator {
    pub fn new(grid: &GridSpec, catalog: &VariableCatalog, config: &SynthConfig) -> Result<Self> {
        if config.years < 2 {
            return Err(Error::InvalidArgument("synthetic data needs at least two years".into()));
        }
        if !(0.0..1.0).contains(&config.noise_memory) || config.noise_amplitude < 0.0 || config.slow_period <= 0.0 {
            return Err(Error::InvalidArgument("invalid synthetic noise or slow-mode settings".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_5A7A);
        let cells = grid.cells();
        // Smooth continents: sum of a few random low-order harmonics.
        let harmonics: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(1.0..3.0f64).round(),
                    rng.gen_range(1.0..3.0f64).round(),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.5..1.0),
                )
            })
            .collect();
        let mut lsm = vec![0.0; cells];
        let mut orography = vec![0.0; cells];
        for (i, &lat) in grid.lats().iter().enumerate() {
            for (j, &lon) in grid.lons().iter().enumerate() {
                let (phi, lam) = (lat.to_radians(), lon.to_radians());
                let s: f64 = harmonics.iter().map(|&(kl, km, ph, a)| a * (kl * lam + ph).sin() * (km * phi).cos()).sum();
                let land = s > 0.2;
                lsm[i * grid.w() + j] = if land { 1.0 } else { 0.0 };
                orography[i * grid.w() + j] = if land { 2000.0 * (s - 0.2).min(1.0) } else { 0.0 };
            }
        }
        let texture = [0, 1].map(|_| smooth_texture(grid, &mut rng));
        let mut channels = Vec::with_capacity(catalog.k());
        let model = |name: &str, level: Option<u32>, rng: &mut ChaCha8Rng| {
            let (offset, scale) = native_scale(name, level);
            ChannelModel {
                offset,
                scale,
                base_lat: rng.gen_range(-1.5..1.5),
                base_land: rng.gen_range(-0.5..0.5),
                base_orog: rng.gen_range(-0.5..0.5),
                annual_sym: rng.gen_range(0.2..0.5),
                annual_hemi: rng.gen_range(0.8..1.3),
                annual_phase: rng.gen_range(0.0..std::f64::consts::TAU),
                annual_phase_lat: rng.gen_range(-0.5..0.5),
                annual_phase_land: rng.gen_range(0.6..1.2) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                annual_amp_tex: rng.gen_range(0.3..0.6),
                annual_phase_tex: rng.gen_range(0.5..1.0),
                wave_amp: rng.gen_range(0.5..0.8),
                wave_phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        };
        for v in catalog.upper() {
            for &l in catalog.levels() {
                channels.push(Some(model(&v.name, Some(l), &mut rng)));
            }
        }
        for v in catalog.surface() {
            if v.is_static {
                channels.push(None);
            } else {
                channels.push(Some(model(&v.name, None, &mut rng)));
            }
        }
        Ok(SynthGenerator {
            grid: grid.clone(),
            catalog: catalog.clone(),
            config: config.clone(),
            lsm,
            orography,
            texture,
            channels,
        })
    }

    pub fn first_day(&self) -> DayIndex {
        year_start(self.config.start_year)
    }

    pub fn day_count(&self) -> usize {
        (year_start(self.config.start_year + self.config.years as i32) - self.first_day()) as usize
    }

    fn static_field(&self, name: &str) -> &[f64] {
        if name == "lsm" {
            &self.lsm
        } else {
            &self.orography
        }
    }

    /// Noise-free value of one dynamic channel at one cell.
    pub fn deterministic_value(&self, ch: usize, cell: usize, day: DayIndex) -> Option<f64> {
        let m = self.channels[ch].as_ref()?;
        Some(m.offset + m.scale * (self.base_term(m, cell) + self.annual_term(m, cell, day) + self.slow_term(m, cell, day)))
    }

    fn base_term(&self, m: &ChannelModel, cell: usize) -> f64 {
        let phi = self.grid.lats()[cell / self.grid.w()].to_radians();
        m.base_lat * (2.0 * phi).cos() + m.base_land * self.lsm[cell] + m.base_orog * self.orography[cell] / 1000.0
    }

    pub fn annual_component(&self, ch: usize, cell: usize, day: DayIndex) -> Option<f64> {
        let m = self.channels[ch].as_ref()?;
        Some(m.scale * self.annual_term(m, cell, day))
    }

    pub fn slow_component(&self, ch: usize, cell: usize, day: DayIndex) -> Option<f64> {
        let m = self.channels[ch].as_ref()?;
        Some(m.scale * self.slow_term(m, cell, day))
    }

    pub fn mean_component(&self, ch: usize, cell: usize) -> Option<f64> {
        let m = self.channels[ch].as_ref()?;
        Some(m.offset + m.scale * self.base_term(m, cell))
    }

    fn annual_term(&self, m: &ChannelModel, cell: usize, day: DayIndex) -> f64 {
        let phi = self.grid.lats()[cell / self.grid.w()].to_radians();
        let amp = m.annual_sym * phi.cos()
            + m.annual_hemi * phi.sin() * (1.0 + 0.5 * self.lsm[cell])
            + m.annual_amp_tex * self.texture[0][cell];
        let phase = m.annual_phase
            + m.annual_phase_lat * phi
            + m.annual_phase_land * self.lsm[cell]
            + m.annual_phase_tex * self.texture[1][cell];
        let theta = std::f64::consts::TAU * day as f64 / ANNUAL_PERIOD;
        amp * (theta - phase).cos()
    }

    fn slow_term(&self, m: &ChannelModel, cell: usize, day: DayIndex) -> f64 {
        let (i, j) = (cell / self.grid.w(), cell % self.grid.w());
        let phi = self.grid.lats()[i].to_radians();
        let lam = self.grid.lons()[j].to_radians();
        let envelope = (-(phi / 0.5).powi(2)).exp() + 0.3;
        let theta = std::f64::consts::TAU * day as f64 / self.config.slow_period;
        m.wave_amp * envelope * (self.config.slow_wavenumber as f64 * lam - theta + m.wave_phase).cos()
    }

    /// Generates every day of the configured years.
    pub fn generate(&self) -> Vec<WeatherState> {
        let cells = self.grid.cells();
        let k = self.catalog.k();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let rho = self.config.noise_memory;
        let innov = (1.0 - rho * rho).sqrt();
        let amp = self.config.noise_amplitude;
        let mut red: Vec<f64> = (0..k * cells).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let first = self.first_day();
        let names: Vec<(String, bool)> = {
            let mut v: Vec<(String, bool)> = Vec::with_capacity(k);
            for u in self.catalog.upper() {
                for _ in 0..self.catalog.n_levels() {
                    v.push((u.name.clone(), false));
                }
            }
            v.extend(self.catalog.surface().iter().map(|s| (s.name.clone(), s.is_static)));
            v
        };
        let mut out = Vec::with_capacity(self.day_count());
        for t in 0..self.day_count() {
            let day = first + t as DayIndex;
            if t > 0 {
                for r in red.iter_mut() {
                    *r = rho * *r + innov * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let mut values = vec![0.0f32; k * cells];
            for ch in 0..k {
                let dst = &mut values[ch * cells..(ch + 1) * cells];
                if names[ch].1 {
                    let src = self.static_field(&names[ch].0);
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s as f32);
                    continue;
                }
                let m = self.channels[ch].as_ref().expect("dynamic channel");
                for (cell, d) in dst.iter_mut().enumerate() {
                    let det = self.deterministic_value(ch, cell, day).expect("dynamic channel");
                    *d = (det + m.scale * amp * red[ch * cells + cell]) as f32;
                }
            }
            out.push(WeatherState { day, values });
        }
        out
    }
}

/// Unit-variance field built from a handful of low-order harmonics.
fn smooth_texture(grid: &GridSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let modes: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.gen_range(1..=4) as f64,
                rng.gen_range(1..=3) as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut f = Vec::with_capacity(grid.cells());
    for &lat in grid.lats() {
        for &lon in grid.lons() {
            let (phi, lam) = (lat.to_radians(), lon.to_radians());
            f.push(modes.iter().map(|&(kz, km, a, b)| (kz * lam + a).cos() * (km * phi + b).cos()).sum::<f64>());
        }
    }
    let n = f.len() as f64;
    let mean = f.iter().sum::<f64>() / n;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
    f.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    f
}

/// Convenience wrapper around [`SynthGenerator`].
pub fn synth_dataset(grid: &GridSpec, catalog: &VariableCatalog, config: &SynthConfig) -> Result<Vec<WeatherState>> {
    Ok(SynthGenerator::new(grid, catalog, config)?.generate())
}

/// Per-channel standardisation statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Mean and population standard deviation over time and space. Channels
    /// with (near) zero spread get unit scale.
    pub fn fit(states: &[WeatherState], k: usize) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::MissingData("cannot fit normalisation without states".into()));
        }
        let cells = states[0].values.len() / k;
        let mut mean = vec![0.0; k];
        let mut sq = vec![0.0; k];
        let n = (states.len() * cells) as f64;
        for s in states {
            for ch in 0..k {
                for &v in s.channel(ch, cells) {
                    mean[ch] += v as f64;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for s in states {
            for ch in 0..k {
                for &v in s.channel(ch, cells) {
                    let d = v as f64 - mean[ch];
                    sq[ch] += d * d;
                }
            }
        }
        let std = sq.iter().map(|s| (s / n).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
        Ok(Normalization { mean, std })
    }

    pub fn identity(k: usize) -> Self {
        Normalization { mean: vec![0.0; k], std: vec![1.0; k] }
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }

    /// Standardises a `[.., K, cells]` buffer in place.
    pub fn apply(&self, values: &mut [f32], cells: usize) {
        let k = self.k();
        for (idx, chunk) in values.chunks_mut(cells).enumerate() {
            let ch = idx % k;
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = ((*v as f64 - m) / s) as f32);
        }
    }

    pub fn invert(&self, values: &mut [f32], cells: usize) {
        let k = self.k();
        for (idx, chunk) in values.chunks_mut(cells).enumerate() {
            let ch = idx % k;
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v as f64 * s + m) as f32);
        }
    }
}

pub const GRIDDED_MAGIC: &[u8; 4] = b"TQS1";
pub const GRIDDED_HEADER_LEN: usize = 4 + 5 * 4 + 8;

/// Contents of a `TQS1` file: `T` frames of `K × H × W` values.
#[derive(Debug, Clone, PartialEq)]
pub struct GriddedData {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub flags: u32,
    pub epoch_day: f64,
    pub frames: Vec<Vec<f32>>,
}

impl GriddedData {
    pub fn frame_len(&self) -> usize {
        self.k * self.h * self.w
    }

    pub fn from_states(states: &[WeatherState], k: usize, grid: &GridSpec) -> Self {
        GriddedData {
            k,
            h: grid.h(),
            w: grid.w(),
            flags: 0,
            epoch_day: states.first().map_or(0.0, |s| s.day as f64),
            frames: states.iter().map(|s| s.values.clone()).collect(),
        }
    }

    /// Frames as consecutive daily states starting at `epoch_day`.
    pub fn to_states(&self) -> Vec<WeatherState> {
        let first = self.epoch_day.round() as DayIndex;
        self.frames.iter().enumerate().map(|(t, f)| WeatherState { day: first + t as DayIndex, values: f.clone() }).collect()
    }
}

pub fn write_gridded(path: &Path, data: &GriddedData) -> Result<()> {
    let n = data.frame_len();
    if let Some(bad) = data.frames.iter().position(|f| f.len() != n) {
        return Err(Error::ShapeMismatch(format!("frame {bad} does not match K x H x W = {n}")));
    }
    if data.frames.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("refusing to write non-finite values to {}", path.display())));
    }
    let dims = [data.k, data.h, data.w, data.frames.len()];
    let mut header = Vec::with_capacity(GRIDDED_HEADER_LEN);
    header.extend_from_slice(GRIDDED_MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument("dimension exceeds u32".into()))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    header.extend_from_slice(&data.flags.to_le_bytes());
    header.extend_from_slice(&data.epoch_day.to_le_bytes());
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(n * 4);
    for f in &data.frames {
        buf.clear();
        for v in f {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_gridded(path: &Path) -> Result<GriddedData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode_gridded(&bytes, path)
}

pub fn decode_gridded(bytes: &[u8], path: &Path) -> Result<GriddedData> {
    if bytes.len() < 4 || &bytes[..4] != GRIDDED_MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "TQS1" });
    }
    if bytes.len() < GRIDDED_HEADER_LEN {
        return Err(Error::TruncatedFile { path: path.into(), expected: GRIDDED_HEADER_LEN as u64, found: bytes.len() as u64 });
    }
    let u = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (k, h, w, t, flags) = (u(0), u(1), u(2), u(3), u(4) as u32);
    let epoch_day = f64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
    let n = k * h * w;
    let expected = GRIDDED_HEADER_LEN as u64 + 4 * (t as u64) * (n as u64);
    if (bytes.len() as u64) < expected {
        return Err(Error::TruncatedFile { path: path.into(), expected, found: bytes.len() as u64 });
    }
    let payload = &bytes[GRIDDED_HEADER_LEN..expected as usize];
    let mut frames = Vec::with_capacity(t);
    for f in payload.chunks_exact(4 * n.max(1)).take(t) {
        let frame: Vec<f32> = f.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("payload of {}", path.display())));
        }
        frames.push(frame);
    }
    if n == 0 {
        frames = vec![Vec::new(); t];
    }
    Ok(GriddedData { k, h, w, flags, epoch_day, frames })
}

/// Inclusive year ranges of the train/validation/test split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: (i32, i32),
    pub val: (i32, i32),
    pub test: (i32, i32),
}

impl Splits {
    /// `N−2` training years, then one validation and one test year.
    pub fn by_years(start_year: i32, years: usize) -> Result<Self> {
        if years < 3 {
            return Err(Error::InvalidArgument(format!("{years} years cannot form train/val/test splits")));
        }
        let last = start_year + years as i32 - 1;
        Ok(Splits { train: (start_year, last - 2), val: (last - 1, last - 1), test: (last, last) })
    }

    pub fn day_range(years: (i32, i32)) -> (DayIndex, DayIndex) {
        (year_start(years.0), year_start(years.1 + 1))
    }
}

/// Plain-text description of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub channels: Vec<String>,
    pub units: Vec<String>,
    pub levels: Vec<u32>,
    pub catalog: VariableCatalog,
    pub grid: GridSpec,
    pub splits: Splits,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_for_equator_and_sixty() {
        let w = latitude_weights(&[0.0, 60.0]).unwrap();
        assert!((w[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn weights_for_repeated_and_symmetric_latitudes() {
        for w in latitude_weights(&[33.0, 33.0, 33.0]).unwrap() {
            assert!((w - 1.0).abs() < 1e-12);
        }
        for w in latitude_weights(&[45.0, -45.0]).unwrap() {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_reject_bad_input() {
        assert!(matches!(latitude_weights(&[]), Err(Error::InvalidGrid(_))));
        assert!(matches!(latitude_weights(&[91.0]), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn grid_requires_divisible_patches() {
        assert!(GridSpec::uniform(16, 30, 4).is_err());
        let g = GridSpec::coarse_global();
        assert_eq!(g.tokens(), 128);
        assert_eq!(GridSpec::desk().tokens(), 32);
        assert_eq!(GridSpec::uniform(4, 4, 4).unwrap().tokens(), 1);
    }

    #[test]
    fn catalog_channel_counts() {
        let d = VariableCatalog::desk();
        assert_eq!(d.k(), 8);
        assert_eq!(d.channel_names()[0], "z500");
        assert_eq!(d.channel_names()[4], "lsm");
        assert_eq!(d.dynamic_channels(), vec![0, 1, 2, 3, 6, 7]);
        assert_eq!(VariableCatalog::small().k(), 6);
        let p = VariableCatalog::paper();
        assert_eq!(p.k(), 69);
        assert_eq!(p.prognostic_channels(), 67);
        let dup = VariableCatalog::new(vec![Variable::new("a", "1")], vec![Variable::new("a", "1")], vec![1]);
        assert!(dup.is_err());
        let bad_levels = VariableCatalog::new(vec![Variable::new("a", "1")], vec![Variable::new("b", "1")], vec![2, 1]);
        assert!(bad_levels.is_err());
    }

    #[test]
    fn groups_partition_channels() {
        let c = VariableCatalog::desk();
        let groups = c.variable_groups();
        let mut covered = vec![0; c.k()];
        for g in groups {
            for ch in g {
                covered[ch] += 1;
            }
        }
        assert!(covered.iter().all(|&n| n == 1));
    }

    fn hourly_const(k: usize, cells: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let mut v = vec![0.0; 24 * k * cells];
        for hr in 0..24 {
            for ch in 0..k {
                for c in 0..cells {
                    v[(hr * k + ch) * cells + c] = f(hr, ch);
                }
            }
        }
        v
    }

    #[test]
    fn daily_wind_from_constant_components() {
        let hourly = hourly_const(3, 2, |_, ch| [3.0, 4.0, 7.5][ch]);
        let out = daily_average(&hourly, 3, 2, &[(0, 1, 0)]).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out[..2].iter().all(|&w| (w - 5.0).abs() < 1e-12));
        assert!(out[2..].iter().all(|&s| (s - 7.5).abs() < 1e-12));
    }

    #[test]
    fn daily_wind_magnitude_taken_before_averaging() {
        // u alternates sign between the sampled hours 0, 6, 12, 18.
        let hourly = hourly_const(2, 1, |hr, ch| {
            if ch == 0 {
                if (hr / 6) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            } else {
                0.0
            }
        });
        let out = daily_average(&hourly, 2, 1, &[(0, 1, 0)]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12);
        let naive_u_mean: f64 = [0, 6, 12, 18].iter().map(|&h| hourly[h * 2]).sum::<f64>() / 4.0;
        assert!(naive_u_mean.abs() < 1e-12);
    }

    #[test]
    fn daily_average_rejects_collisions() {
        let hourly = hourly_const(4, 1, |_, _| 1.0);
        assert!(daily_average(&hourly, 4, 1, &[(0, 0, 0)]).is_err());
        assert!(daily_average(&hourly, 4, 1, &[(0, 1, 0), (1, 2, 1)]).is_err());
        assert!(daily_average(&hourly, 4, 1, &[(0, 1, 0), (2, 3, 0)]).is_err());
        assert!(daily_average(&hourly[1..], 4, 1, &[]).is_err());
    }

    fn states_for_year(year: i32, k: usize, cells: usize, f: impl Fn(DayIndex) -> f32) -> Vec<WeatherState> {
        let s = year_start(year);
        (0..days_in_year(year) as DayIndex).map(|d| WeatherState { day: s + d, values: vec![f(s + d); k * cells] }).collect()
    }

    #[test]
    fn climatology_of_one_year_is_that_year() {
        let st = states_for_year(2001, 1, 2, |d| d as f32 * 0.5);
        let c = compute_climatology(&st, (2001, 2001)).unwrap();
        for s in &st {
            assert_eq!(c.for_day(s.day), &s.values[..]);
        }
        assert!(!c.has_leap_day());
    }

    #[test]
    fn climatology_two_year_mean_and_leap_slot() {
        // 2003 (common) and 2004 (leap): fields f and f + 2 per ordinal day.
        let mut st = states_for_year(2003, 1, 1, |d| day_of_year(d) as f32);
        st.extend(states_for_year(2004, 1, 1, |d| day_of_year(d) as f32 + 2.0));
        let c = compute_climatology(&st, (2003, 2004)).unwrap();
        assert_eq!(c.slot(10)[0], 11.0);
        assert_eq!(c.slot(365)[0], 366.0);
        // Slot 366 exists only in 2004.
        assert_eq!(c.slot(366)[0], 368.0);
        assert!(c.has_leap_day());
    }

    #[test]
    fn climatology_rejects_missing_days() {
        let mut st = states_for_year(2001, 1, 1, |_| 1.0);
        st.remove(40);
        assert!(matches!(compute_climatology(&st, (2001, 2001)), Err(Error::MissingData(_))));
    }

    #[test]
    fn synthetic_generator_rejects_single_year() {
        let cfg = SynthConfig { years: 1, ..SynthConfig::default() };
        assert!(synth_dataset(&GridSpec::uniform(4, 8, 4).unwrap(), &VariableCatalog::small(), &cfg).is_err());
    }

    #[test]
    fn splits_follow_year_rule() {
        let s = Splits::by_years(1979, 4).unwrap();
        assert_eq!(s.train, (1979, 1980));
        assert_eq!(s.val, (1981, 1981));
        assert_eq!(s.test, (1982, 1982));
    }

    #[test]
    fn gridded_header_zero_frames() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.tqs");
        let d = GriddedData { k: 2, h: 4, w: 8, flags: 0, epoch_day: 3.0, frames: vec![] };
        write_gridded(&p, &d).unwrap();
        assert_eq!(read_gridded(&p).unwrap(), d);
    }

    #[test]
    fn gridded_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.tqs");
        let d = GriddedData { k: 1, h: 1, w: 2, flags: 0, epoch_day: 0.0, frames: vec![vec![1.0, 2.0], vec![3.0, 4.0]] };
        write_gridded(&p, &d).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let err = decode_gridded(&bytes[..bytes.len() - 3], &p).unwrap_err();
        assert!(matches!(err, Error::TruncatedFile { .. }));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_gridded(&bad, &p), Err(Error::BadMagic { .. })));
        let mut nan = bytes.clone();
        let off = GRIDDED_HEADER_LEN;
        nan[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_gridded(&nan, &p), Err(Error::NonFinite(_))));
    }
}
