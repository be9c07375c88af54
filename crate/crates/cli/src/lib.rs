//! Command implementations behind the `tqs` binary.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use tqs_core::ablation::{parse_variants, score_family, train_family, variant_configs, Sampling, Variant};
use tqs_core::backbone::NoiseConfig;
use tqs_core::checkpoint::Checkpoint;
use tqs_core::config::RunConfig;
use tqs_core::ensemble::{noise_scale_sweep, run_ensemble, PerturbKind};
use tqs_core::grid::{
    date_to_day, day_to_date, read_gridded, synth_dataset, write_gridded, DatasetManifest, DayIndex, GridSpec, GriddedData,
    Splits, VariableCatalog, WeatherState,
};
use tqs_core::metrics::{evaluate, Case, METRIC_NAMES};
use tqs_core::train::{forecast_range_with, standard_leads, Dataset, ModelFamily, Trainer};
use tqs_core::{parallel, Error, ErrorClass, Result};

/// Verification anchors are every `ANCHOR_STRIDE`-th usable test day.
pub const ANCHOR_STRIDE: usize = 5;
const DETERMINISTIC_METRICS: [&str; 5] = ["rmse", "acc", "r2", "mae", "bias"];

#[derive(Debug, Parser)]
#[command(name = "tqs", version, about = "Subseasonal (15-45 day) gridded forecasting on synthetic data")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Run configuration file (TOML); keys missing from it take preset values [default: none, the --preset values]
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Base configuration when no --config is given
    #[arg(long, global = true, value_name = "NAME", default_value = "desk", value_parser = ["desk", "paper"])]
    pub preset: String,
    /// Seed for data generation and training [default: config `seed`, 0]
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Comma-separated lead times in days [default: config `train.lead_times`, 15,20,...,45]
    #[arg(long, global = true, value_name = "LIST")]
    pub leads: Option<String>,
    /// Ensemble size [default: config `ensemble.members`, 51]
    #[arg(long, global = true, value_name = "M")]
    pub members: Option<usize>,
    /// Ensemble strategy: layer_noise, fixed_layer_noise or ic_perturb [default: config `ensemble.strategy`, layer_noise]
    #[arg(long, global = true, value_name = "NAME")]
    pub strategy: Option<String>,
    /// Noise standard deviation multiplier [default: config `ensemble.sigma`, 1]
    #[arg(long, global = true, value_name = "X")]
    pub sigma: Option<f64>,
    /// Run directory; sets data to DIR/data, checkpoints to DIR/checkpoints and reports to DIR [default: config `paths`]
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its train/val/test split files
    Synth,
    /// Train one model per lead time
    Train {
        /// Continue from existing checkpoints up to train.total_steps [default: off]
        #[arg(long)]
        resume: bool,
    },
    /// Forecast days 15-45 from one initialisation date
    Predict {
        /// Initialisation date, YYYY-MM-DD (required)
        #[arg(long, value_name = "DATE")]
        date: String,
    },
    /// Ensemble forecast: member files plus mean/spread/quantile statistics
    Ensemble {
        /// Initialisation date, YYYY-MM-DD (required)
        #[arg(long, value_name = "DATE")]
        date: String,
    },
    /// Score forecasts against a truth file and write eval.csv
    Evaluate {
        /// Forecast file or ensemble directory; repeat or comma-separate for several (required)
        #[arg(long, value_name = "PATH", required = true, value_delimiter = ',')]
        forecast: Vec<PathBuf>,
        /// Gridded truth file, e.g. the test split (required)
        #[arg(long, value_name = "PATH")]
        truth: PathBuf,
        /// Comma-separated metrics [default: rmse,acc,r2,mae,bias plus crps,sme,rqe for ensembles]
        #[arg(long, value_name = "LIST")]
        metrics: Option<String>,
    },
    /// Train and compare ablation variants with shared seeds
    Ablate {
        /// Comma-separated variants: default, no_noise, no_clim, no_noise_no_clim, fln, ic_perturb, layers:SPEC, sigma:LIST
        #[arg(long, value_name = "LIST", default_value = "default,no_noise,no_clim,no_noise_no_clim")]
        variants: String,
    },
}

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

/// Single-line, machine-parseable rendering of an error.
pub fn error_line(e: &Error) -> String {
    format!("error: code={} msg={}", e.code(), e.to_string().replace(['\n', '\r'], " "))
}

pub fn parse_leads(list: &str) -> Result<Vec<u32>> {
    list.split(',').map(|s| s.trim().parse::<u32>().map_err(|_| Error::Config(format!("invalid lead list '{list}'")))).collect()
}

pub fn parse_date(s: &str) -> Result<DayIndex> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d")
        .map(date_to_day)
        .map_err(|_| Error::Config(format!("invalid date '{s}', expected YYYY-MM-DD")))
}

/// Applies preset, config file and flag overrides, in that order.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::preset(&g.preset)?,
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    if let Some(l) = &g.leads {
        cfg.train.lead_times = parse_leads(l)?;
    }
    if let Some(m) = g.members {
        cfg.ensemble.members = m;
    }
    if let Some(s) = &g.strategy {
        cfg.ensemble.strategy = s.parse::<PerturbKind>().map_err(|e| Error::Config(e.to_string()))?;
    }
    if let Some(s) = g.sigma {
        cfg.ensemble.sigma = s;
    }
    if let Some(dir) = &g.out {
        cfg.paths.data = dir.join("data");
        cfg.paths.checkpoints = dir.join("checkpoints");
        cfg.paths.out = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    parallel::init_from_env()?;
    let cfg = resolve_config(&cli.global)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train { resume } => cmd_train(&cfg, *resume),
        Command::Predict { date } => cmd_predict(&cfg, parse_date(date)?, cli.global.leads.is_some()),
        Command::Ensemble { date } => cmd_ensemble(&cfg, parse_date(date)?, cli.global.leads.is_some()),
        Command::Evaluate { forecast, truth, metrics } => cmd_evaluate(&cfg, forecast, truth, metrics.as_deref()),
        Command::Ablate { variants } => cmd_ablate(&cfg, variants),
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn setup(cfg: &RunConfig) -> Result<(GridSpec, VariableCatalog)> {
    Ok((cfg.grid.grid()?, cfg.grid.catalog.catalog()))
}

const SPLIT_FILES: [&str; 3] = ["train.tqs", "val.tqs", "test.tqs"];

pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let (grid, cat) = setup(cfg)?;
    let splits = Splits::by_years(cfg.grid.start_year, cfg.grid.years)?;
    let states = synth_dataset(&grid, &cat, &cfg.grid.synth(cfg.seed))?;
    let dir = &cfg.paths.data;
    mkdir(dir)?;
    for (name, years) in SPLIT_FILES.iter().zip([splits.train, splits.val, splits.test]) {
        let (a, b) = Splits::day_range(years);
        let part: Vec<WeatherState> = states.iter().filter(|s| s.day >= a && s.day < b).cloned().collect();
        write_gridded(&dir.join(name), &GriddedData::from_states(&part, cat.k(), &grid))?;
    }
    let manifest = DatasetManifest {
        channels: cat.channel_names(),
        units: cat.channel_units(),
        levels: cat.levels().to_vec(),
        catalog: cat.clone(),
        grid: grid.clone(),
        splits,
        seed: cfg.seed,
    };
    write_text(&dir.join("manifest.toml"), &manifest.to_toml()?)?;
    println!("wrote {} days to {}", states.len(), dir.display());
    Ok(())
}

fn read_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let p = cfg.paths.data.join("manifest.toml");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m = DatasetManifest::from_toml(&text)?;
    let (grid, cat) = setup(cfg)?;
    if m.grid != grid || m.catalog != cat {
        return Err(Error::MissingData(format!("{} was generated for a different [grid] section", p.display())));
    }
    Ok(m)
}

/// Loads the split files as one contiguous dataset.
pub fn load_dataset(cfg: &RunConfig, norm: Option<tqs_core::grid::Normalization>) -> Result<Dataset> {
    let m = read_manifest(cfg)?;
    let mut states = Vec::new();
    for name in SPLIT_FILES {
        let g = read_gridded(&cfg.paths.data.join(name))?;
        if g.k != m.catalog.k() || g.h != m.grid.h() || g.w != m.grid.w() {
            return Err(Error::MissingData(format!("{name} does not match the manifest dimensions")));
        }
        states.extend(g.to_states());
    }
    Ok(Dataset::with_norm(&states, &m.grid, &m.catalog, m.splits, norm)?.with_windows(cfg.train.history, cfg.train.segment))
}

pub fn checkpoint_path(cfg: &RunConfig, lead: u32) -> PathBuf {
    cfg.paths.checkpoints.join(format!("pm_{lead:02}.tqck"))
}

#[derive(Serialize)]
struct LossRow {
    lead: u32,
    step: u64,
    loss: f64,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}

fn csv_row<W: std::io::Write, S: Serialize>(w: &mut csv::Writer<W>, row: S) -> Result<()> {
    w.serialize(row).map_err(|e| Error::Serde(e.to_string()))
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<()> {
    let data = load_dataset(cfg, None)?;
    mkdir(&cfg.paths.checkpoints)?;
    mkdir(&cfg.paths.out)?;
    let trainers: Vec<Trainer> = cfg
        .train
        .lead_times
        .par_iter()
        .map(|&lead| {
            let path = checkpoint_path(cfg, lead);
            let mut t = if resume && path.exists() {
                let ck = Checkpoint::load(&path)?;
                if ck.lead != lead || ck.model.config != cfg.model {
                    return Err(Error::Config(format!("{} does not match the configured model", path.display())));
                }
                let opt = ck.optimizer.ok_or_else(|| Error::MissingData(format!("{} has no optimizer state", path.display())))?;
                Trainer::resume(lead, &cfg.train, ck.model, opt, ck.curve)?
            } else {
                Trainer::new(lead, &cfg.train, &cfg.model, &data.grid, &data.catalog)?
            };
            t.run(&data, |_, _| {})?;
            let ck = Checkpoint {
                lead,
                train: cfg.train.clone(),
                norm: data.norm.clone(),
                model: t.model.clone(),
                optimizer: Some(t.optimizer.clone()),
                curve: t.curve.clone(),
            };
            ck.save(&path)?;
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let loss_path = cfg.paths.out.join("loss.csv");
    let mut w = csv_writer(&loss_path)?;
    for t in &trainers {
        for (&step, &loss) in t.curve.steps.iter().zip(&t.curve.losses) {
            csv_row(&mut w, LossRow { lead: t.lead, step, loss })?;
        }
    }
    w.flush().map_err(|e| Error::io(&loss_path, e))?;
    for t in &trainers {
        println!("lead {}: step {} loss {:.4} -> {:.4}", t.lead, t.step(), t.curve.initial(), t.curve.final_loss());
    }
    Ok(())
}

/// Loads the checkpoints of `leads` into a family and the dataset with the
/// stored normalisation.
pub fn load_family(cfg: &RunConfig, leads: &[u32]) -> Result<(ModelFamily, Dataset)> {
    let mut family = ModelFamily::new();
    let mut norm = None;
    for &lead in leads {
        let path = checkpoint_path(cfg, lead);
        if !path.exists() {
            return Err(Error::MissingModel(lead));
        }
        let ck = Checkpoint::load(&path)?;
        norm.get_or_insert(ck.norm.clone());
        family.insert(lead, ck.model);
    }
    let data = load_dataset(cfg, norm)?;
    Ok((family, data))
}

fn forecast_leads(cfg: &RunConfig, explicit: bool) -> Vec<u32> {
    if explicit {
        cfg.train.lead_times.clone()
    } else {
        standard_leads()
    }
}

fn forecast_file(frames: Vec<Vec<f32>>, days: &[u32], init: DayIndex, cat: &VariableCatalog, grid: &GridSpec) -> GriddedData {
    GriddedData { k: cat.k(), h: grid.h(), w: grid.w(), flags: days[0], epoch_day: (init + days[0] as DayIndex) as f64, frames }
}

fn date_tag(day: DayIndex) -> String {
    day_to_date(day).format("%Y%m%d").to_string()
}

pub fn cmd_predict(cfg: &RunConfig, init: DayIndex, explicit_leads: bool) -> Result<()> {
    let leads = forecast_leads(cfg, explicit_leads);
    let (family, data) = load_family(cfg, &leads)?;
    let r = forecast_range_with(&family, &data, init, &NoiseConfig::deterministic(cfg.ensemble.sigma), None, &leads)?;
    mkdir(&cfg.paths.out)?;
    let path = cfg.paths.out.join(format!("forecast_{}.tqs", date_tag(init)));
    write_gridded(&path, &forecast_file(r.frames, &r.days, init, &data.catalog, &data.grid))?;
    println!("wrote {} days ({}..={}) to {}", r.days.len(), r.days[0], r.days[r.days.len() - 1], path.display());
    Ok(())
}

/// Layout of `stats.tqs`: for every day, a mean frame, a spread frame, then
/// one frame per quantile level.
#[derive(Debug, Serialize, serde::Deserialize, PartialEq)]
pub struct StatsLayout {
    pub init_date: String,
    pub strategy: String,
    pub sigma: f64,
    pub members: usize,
    pub days: Vec<u32>,
    pub owners: Vec<u32>,
    pub frames_per_day: Vec<String>,
    pub quantiles: Vec<f64>,
}

pub fn cmd_ensemble(cfg: &RunConfig, init: DayIndex, explicit_leads: bool) -> Result<()> {
    let leads = forecast_leads(cfg, explicit_leads);
    let (family, data) = load_family(cfg, &leads)?;
    let strategy = cfg.strategy();
    let levels = &cfg.ensemble.quantiles;
    let ens = run_ensemble(&family, &data, init, &strategy, cfg.ensemble.members, cfg.ensemble.base_seed, &leads, levels)?;
    let dir = cfg.paths.out.join(format!("ensemble_{}", date_tag(init)));
    mkdir(&dir)?;
    let (cat, grid) = (&data.catalog, &data.grid);
    for m in 0..cfg.ensemble.members {
        let frames = ens.native.iter().map(|f| f.members[m].clone()).collect();
        write_gridded(&dir.join(format!("member_{m:03}.tqs")), &forecast_file(frames, &ens.days, init, cat, grid))?;
    }
    let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let mut frames = Vec::new();
    for f in &ens.native {
        frames.push(to32(&f.mean));
        frames.push(to32(&f.spread));
        frames.extend(f.quantiles.iter().map(|q| to32(q)));
    }
    let mut stats = forecast_file(frames, &ens.days, init, cat, grid);
    stats.flags = 0;
    write_gridded(&dir.join("stats.tqs"), &stats)?;
    let mut names = vec!["mean".to_string(), "spread".to_string()];
    names.extend(levels.iter().map(|q| format!("q{q}")));
    let layout = StatsLayout {
        init_date: day_to_date(init).to_string(),
        strategy: strategy.kind.to_string(),
        sigma: strategy.sigma,
        members: cfg.ensemble.members,
        days: ens.days.clone(),
        owners: ens.owners.clone(),
        frames_per_day: names,
        quantiles: levels.clone(),
    };
    write_text(&dir.join("stats.toml"), &toml::to_string(&layout).map_err(|e| Error::Serde(e.to_string()))?)?;
    println!("wrote {} members and statistics to {}", cfg.ensemble.members, dir.display());
    Ok(())
}

/// A forecast to verify: per-frame leads and valid days, the deterministic
/// fields and optional members.
struct Loaded {
    leads: Vec<u32>,
    valid: Vec<DayIndex>,
    det: Vec<Vec<f32>>,
    members: Option<Vec<Vec<Vec<f32>>>>,
}

fn frame_meta(g: &GriddedData) -> (Vec<u32>, Vec<DayIndex>) {
    let first = g.epoch_day.round() as DayIndex;
    let n = g.frames.len();
    let leads = (0..n).map(|i| if g.flags == 0 { 0 } else { g.flags + i as u32 }).collect();
    (leads, (0..n).map(|i| first + i as DayIndex).collect())
}

fn load_forecast(path: &Path) -> Result<Loaded> {
    if !path.is_dir() {
        let g = read_gridded(path)?;
        let (leads, valid) = frame_meta(&g);
        return Ok(Loaded { leads, valid, det: g.frames, members: None });
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("member_") && n.ends_with(".tqs")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingData(format!("{} holds no member_*.tqs files", path.display())));
    }
    let runs: Vec<GriddedData> = files.iter().map(|p| read_gridded(p)).collect::<Result<_>>()?;
    let (leads, valid) = frame_meta(&runs[0]);
    if runs.iter().any(|r| r.frames.len() != leads.len() || r.epoch_day != runs[0].epoch_day) {
        return Err(Error::ShapeMismatch(format!("members in {} cover different days", path.display())));
    }
    let mf = runs.len() as f64;
    let det = (0..leads.len())
        .map(|i| {
            let n = runs[0].frames[i].len();
            (0..n).map(|c| (runs.iter().map(|r| r.frames[i][c] as f64).sum::<f64>() / mf) as f32).collect()
        })
        .collect();
    let members = (0..leads.len()).map(|i| runs.iter().map(|r| r.frames[i].clone()).collect()).collect();
    Ok(Loaded { leads, valid, det, members: Some(members) })
}

pub fn cmd_evaluate(cfg: &RunConfig, forecasts: &[PathBuf], truth: &Path, metrics: Option<&str>) -> Result<()> {
    let (grid, cat) = setup(cfg)?;
    let t = read_gridded(truth)?;
    if t.k != cat.k() || t.h != grid.h() || t.w != grid.w() {
        return Err(Error::MissingData(format!("{} does not match the configured grid", truth.display())));
    }
    let truth_first = t.epoch_day.round() as DayIndex;
    let loaded: Vec<Loaded> = forecasts.iter().map(|p| load_forecast(p)).collect::<Result<_>>()?;
    let all_ensembles = loaded.iter().all(|l| l.members.is_some());
    let names: Vec<String> = match metrics {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => {
            let mut v: Vec<String> = DETERMINISTIC_METRICS.iter().map(|s| s.to_string()).collect();
            if all_ensembles {
                v.extend(["crps", "sme", "rqe", "rqe_skipped"].map(String::from));
            }
            v
        }
    };
    if let Some(bad) = names.iter().find(|m| !METRIC_NAMES.contains(&m.as_str())) {
        return Err(Error::Config(format!("unknown metric '{bad}' (expected one of {})", METRIC_NAMES.join(","))));
    }
    let cells = grid.cells();
    let k = cat.k();
    let mut clim = vec![0.0f64; k * cells];
    for f in &t.frames {
        clim.iter_mut().zip(f).for_each(|(c, &v)| *c += v as f64);
    }
    clim.iter_mut().for_each(|c| *c /= t.frames.len().max(1) as f64);
    let mut cases = Vec::new();
    for l in &loaded {
        for (i, (&lead, &day)) in l.leads.iter().zip(&l.valid).enumerate() {
            let idx = day - truth_first;
            if idx < 0 || idx as usize >= t.frames.len() {
                return Err(Error::MissingData(format!("truth has no frame for {}", day_to_date(day))));
            }
            if l.det[i].len() != k * cells {
                return Err(Error::ShapeMismatch("forecast frame does not match the configured grid".into()));
            }
            cases.push(Case {
                lead,
                forecast: &l.det[i],
                members: l.members.as_ref().map(|m| m[i].as_slice()),
                truth: &t.frames[idx as usize],
            });
        }
    }
    let weights = grid.latitude_weights();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut report = evaluate(&cases, &cat, &clim, &weights, grid.h(), grid.w(), &refs)?;
    report.meta.insert("truth".into(), truth.display().to_string());
    report.meta.insert("seed".into(), cfg.seed.to_string());
    mkdir(&cfg.paths.out)?;
    let path = cfg.paths.out.join("eval.csv");
    report.write_csv(&path)?;
    println!("wrote {} scores to {}", report.rows.len(), path.display());
    Ok(())
}

#[derive(Serialize)]
struct AblationRow<'a> {
    variant: &'a str,
    sigma: f64,
    lead: u32,
    variable: &'a str,
    rmse: f64,
    rmse_deterministic: f64,
    rmse_member_mean: f64,
}

pub fn cmd_ablate(cfg: &RunConfig, variants: &str) -> Result<()> {
    let variants = parse_variants(variants).map_err(|e| Error::Config(e.to_string()))?;
    let data = load_dataset(cfg, None)?;
    let leads = cfg.train.lead_times.clone();
    let max_lead = *leads.iter().max().expect("validated lead list");
    let anchors: Vec<DayIndex> = data.anchors(data.splits.test, max_lead).into_iter().step_by(ANCHOR_STRIDE).collect();
    if anchors.is_empty() {
        return Err(Error::InsufficientData("the test year is too short for the configured leads".into()));
    }
    let mut families: Vec<(Variant, ModelFamily)> = Vec::new();
    let mut family_for = |v: &Variant| -> Result<ModelFamily> {
        let key = if v.trains() { v.clone() } else { Variant::Default };
        if let Some((_, f)) = families.iter().find(|(k, _)| *k == key) {
            return Ok(f.clone());
        }
        let (t, m) = variant_configs(&key, &cfg.train, &cfg.model);
        let (f, _) = train_family(&data, &t, &m)?;
        families.push((key, f.clone()));
        Ok(f)
    };
    mkdir(&cfg.paths.out)?;
    let path = cfg.paths.out.join("ablation.csv");
    let mut w = csv_writer(&path)?;
    for v in &variants {
        let family = family_for(v)?;
        let name = v.name();
        for (sigma, sampling) in Sampling::for_variant(v, cfg.ensemble.members, cfg.ensemble.sigma, cfg.ensemble.base_seed) {
            for s in score_family(&family, &data, &anchors, &leads, &sampling)? {
                csv_row(
                    &mut w,
                    AblationRow {
                        variant: &name,
                        sigma,
                        lead: s.day,
                        variable: &s.variable,
                        rmse: s.rmse,
                        rmse_deterministic: s.rmse_deterministic,
                        rmse_member_mean: s.rmse_member_mean,
                    },
                )?;
            }
        }
        if let Variant::Sigma(sigmas) = v {
            let sweep = noise_scale_sweep(&family, &data, &anchors, sigmas, cfg.ensemble.members, cfg.ensemble.base_seed)?;
            sweep.write_csv(&cfg.paths.out.join("sweep.csv"))?;
            for (lead, best) in sweep.argmin_per_lead() {
                let note = if best == 1.0 { "matches" } else { "differs from" };
                println!("lead {lead}: lowest ensemble-mean RMSE at sigma {best} ({note} the expected optimum near 1)");
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}
