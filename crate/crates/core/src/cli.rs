//! Pipeline driver behind the `windfs` binary.
//!
//! Every subcommand writes into `<out>/<command>/`, echoes its fully resolved
//! parameters to `run_config.txt` before computing, and reads its inputs from
//! the previous stage's directory unless told otherwise:
//!
//! `synth -> ingest -> decompose -> fs -> map / report`, with `fitdist` reading
//! either the daily means or the remainders.
//!
//! A `--config` file holds `key=value` lines using the long flag names; flags
//! given on the command line win over the file.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::distributions::{
    self, format_kl_boxplot, format_kl_report, rank_families, DistParams, Family, RankOptions, Ranking,
    ReferenceKind,
};
use crate::error::{Error, Result};
use crate::fileio;
use crate::fixtures::{self, Coupling, DailyModel, Sampling, SyntheticSpec};
use crate::infometrics::{self, format_fs_plane, format_fs_results, fs_metrics, fs_plane, FsOutcome};
use crate::ingest::{self, StationQc, StationSet, QC_HEADER};
use crate::kde::{log_spaced_grid, silverman_bandwidth, BandwidthRule};
use crate::quadrature::QuadratureSpec;
use crate::spatial::{
    self, covariate_correlation, feasible_candidates, make_grid_map, reselected_null_skills, select_k, shuffle_test, Bounds, KnnModel,
    Weighting,
};
use crate::stl::{self, SeasonalMode, StlParams};

pub const RUN_CONFIG_FILE: &str = "run_config.txt";
pub const DAILY_DIR: &str = "daily";
pub const DECOMPOSITION_DIR: &str = "decomposition";
pub const MAP_SUMMARY_HEADER: &str =
    "metric,k,observed_skill,null_median,p_value,n_shuffles,shuffled_map_k,null_median_reselected_k";

const SEED_SHUFFLE: u64 = 1_000_000;
const SEED_SHUFFLED_MAP: u64 = 2_000_000;
const SEED_REPORT: u64 = 3_000_000;
const SEED_STRIDE: u64 = 100_000;

#[derive(Debug, Parser)]
#[command(name = "windfs", version, about = "Fisher-Shannon analysis of station wind speed", args_override_self = true)]
pub struct Cli {
    /// Root directory for outputs; each command writes into `<out>/<command>/`.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Global seed; sub-analyses derive their seeds from it by fixed offsets.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// File of `key=value` lines holding default flag values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic station network and its raw measurement files.
    Synth(SynthArgs),
    /// Aggregate raw measurements to daily means with quality control.
    Ingest(IngestArgs),
    /// Split each daily series into trend, seasonal and remainder.
    Decompose(DecomposeArgs),
    /// Fit Weibull, Gamma and GEV and rank them by Kullback-Leibler divergence.
    Fitdist(FitdistArgs),
    /// Fisher information, entropy and entropy power of each remainder.
    Fs(FsArgs),
    /// kNN maps of entropy power and Fisher information plus the shuffle test.
    Map(MapArgs),
    /// Correlation of the information measures with elevation and slope.
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Ingest(_) => "ingest",
            Command::Decompose(_) => "decompose",
            Command::Fitdist(_) => "fitdist",
            Command::Fs(_) => "fs",
            Command::Map(_) => "map",
            Command::Report(_) => "report",
        }
    }
}

/// Sampling step of synthetic records.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepArg {
    Network,
    Seconds(u32),
}

impl FromStr for StepArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "network" => Ok(StepArg::Network),
            v => v
                .parse()
                .map(StepArg::Seconds)
                .map_err(|_| Error::invalid(format!("step must be `network` or seconds, got {v:?}"))),
        }
    }
}

impl std::fmt::Display for StepArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepArg::Network => f.write_str("network"),
            StepArg::Seconds(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CouplingArg {
    Monotone,
    Constant,
}

impl FromStr for CouplingArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "monotone" => Ok(CouplingArg::Monotone),
            "constant" => Ok(CouplingArg::Constant),
            v => Err(Error::invalid(format!("coupling must be `monotone` or `constant`, got {v:?}"))),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 293)]
    pub stations: usize,
    #[arg(long, default_value_t = 5)]
    pub years: usize,
    #[arg(long, default_value_t = 2008)]
    pub start_year: i32,
    /// Record spacing: `network` (600 s NET_A, 1800 s NET_B) or seconds.
    #[arg(long, default_value = "3600")]
    pub step: StepArg,
    /// How anomaly disorder depends on elevation: `monotone` or `constant`.
    #[arg(long, default_value = "monotone")]
    pub coupling: CouplingArg,
    /// Draw independent daily values from this family instead of the seasonal model.
    #[arg(long)]
    pub family: Option<Family>,
    /// Family parameters, comma separated: weibull shape,scale; gamma shape,rate;
    /// gev location,scale,shape.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub params: Vec<f64>,
    #[arg(long, default_value_t = 119.0 / 293.0)]
    pub net_a_share: f64,
    #[arg(long, default_value_t = 0.002)]
    pub missing_rate: f64,
}

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Directory holding `stations.csv` and `measurements/`; defaults to `<out>/synth`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Station table, overriding `<input>/stations.csv`.
    #[arg(long)]
    pub stations: Option<PathBuf>,
    /// Measurement directory, overriding `<input>/measurements`.
    #[arg(long)]
    pub measurements: Option<PathBuf>,
    #[arg(long, default_value_t = ingest::DEFAULT_MIN_COVERAGE)]
    pub min_coverage: f64,
    #[arg(long, default_value_t = 3)]
    pub max_gap_days: usize,
    #[arg(long, default_value_t = ingest::MIN_RETAINED_FRACTION)]
    pub min_retained: f64,
    /// Record unreadable stations in the QC report instead of failing.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub skip_bad: bool,
}

/// Seasonal smoothing: `periodic` or an odd window in cycles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeasonalArg(pub SeasonalMode);

impl FromStr for SeasonalArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "periodic" => Ok(SeasonalArg(SeasonalMode::Periodic)),
            v => v
                .parse()
                .map(|w| SeasonalArg(SeasonalMode::Windowed(w)))
                .map_err(|_| Error::invalid(format!("seasonal must be `periodic` or a window, got {v:?}"))),
        }
    }
}

impl std::fmt::Display for SeasonalArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.0 {
            SeasonalMode::Periodic => f.write_str("periodic"),
            SeasonalMode::Windowed(w) => write!(f, "{w}"),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DecomposeArgs {
    /// Ingest output directory; defaults to `<out>/ingest`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = 365)]
    pub period: usize,
    #[arg(long, default_value = "periodic")]
    pub seasonal: SeasonalArg,
    /// Odd trend window in days; derived from the period when omitted.
    #[arg(long)]
    pub trend_window: Option<usize>,
    /// Odd low-pass window in days; the next odd number >= period when omitted.
    #[arg(long)]
    pub low_pass_window: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub degree: usize,
    #[arg(long, default_value_t = 2)]
    pub inner: usize,
    #[arg(long, default_value_t = 1)]
    pub robust: usize,
    #[arg(long, default_value_t = 0.3)]
    pub max_missing_fraction: f64,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub skip_bad: bool,
}

/// Bandwidth choice: `silverman`, `cv` or a fixed positive value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BandwidthArg {
    Silverman,
    Cv,
    Fixed(f64),
}

impl FromStr for BandwidthArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "silverman" => Ok(BandwidthArg::Silverman),
            "cv" => Ok(BandwidthArg::Cv),
            v => match v.parse::<f64>() {
                Ok(b) if b > 0.0 && b.is_finite() => Ok(BandwidthArg::Fixed(b)),
                _ => Err(Error::invalid(format!("bandwidth must be `silverman`, `cv` or positive, got {v:?}"))),
            },
        }
    }
}

impl std::fmt::Display for BandwidthArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BandwidthArg::Silverman => f.write_str("silverman"),
            BandwidthArg::Cv => f.write_str("cv"),
            BandwidthArg::Fixed(b) => write!(f, "{b}"),
        }
    }
}

const CV_GRID_LO: f64 = 0.2;
const CV_GRID_HI: f64 = 2.0;
const CV_GRID_SIZE: usize = 19;

impl BandwidthArg {
    /// The rule for one sample; cross-validation searches a log grid spanning
    /// 0.2 to 2 times the sample's Silverman bandwidth.
    pub fn rule(self, sample: &[f64]) -> Result<BandwidthRule> {
        Ok(match self {
            BandwidthArg::Silverman => BandwidthRule::Silverman,
            BandwidthArg::Fixed(b) => BandwidthRule::Fixed(b),
            BandwidthArg::Cv => {
                let b = silverman_bandwidth(sample)?;
                BandwidthRule::CrossValidation(log_spaced_grid(CV_GRID_LO * b, CV_GRID_HI * b, CV_GRID_SIZE)?)
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceArg {
    Daily,
    Remainder,
}

impl FromStr for SourceArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "daily" => Ok(SourceArg::Daily),
            "remainder" => Ok(SourceArg::Remainder),
            v => Err(Error::invalid(format!("source must be `daily` or `remainder`, got {v:?}"))),
        }
    }
}

impl std::fmt::Display for SourceArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SourceArg::Daily => "daily",
            SourceArg::Remainder => "remainder",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceArg {
    Kde,
    Histogram,
}

impl FromStr for ReferenceArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "kde" => Ok(ReferenceArg::Kde),
            "histogram" => Ok(ReferenceArg::Histogram),
            v => Err(Error::invalid(format!("reference must be `kde` or `histogram`, got {v:?}"))),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitdistArgs {
    /// Input directory; defaults to `<out>/ingest` for daily means and
    /// `<out>/decompose` for remainders.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Sample to fit: `daily` means or STL `remainder`.
    #[arg(long, default_value = "daily")]
    pub source: SourceArg,
    /// Empirical density compared against each fit: `kde` or `histogram`.
    #[arg(long, default_value = "kde")]
    pub reference: ReferenceArg,
    #[arg(long, default_value = "silverman")]
    pub bandwidth: BandwidthArg,
    #[arg(long, default_value_t = 4096)]
    pub nodes: usize,
    /// Integration padding beyond the sample maximum, in bandwidths.
    #[arg(long, default_value_t = 8.0)]
    pub pad: f64,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub skip_bad: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FsArgs {
    /// Decompose output directory; defaults to `<out>/decompose`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "silverman")]
    pub bandwidth: BandwidthArg,
    #[arg(long, default_value_t = 4096)]
    pub nodes: usize,
    /// Integration padding beyond the sample extremes, in bandwidths.
    #[arg(long, default_value_t = 8.0)]
    pub pad: f64,
    /// Stations with fewer remainder values are excluded.
    #[arg(long, default_value_t = infometrics::DEFAULT_MIN_SAMPLE)]
    pub min_sample: usize,
    #[arg(long, num_args = 0..=1, default_missing_value = "true", default_value_t = false)]
    pub skip_bad: bool,
}

/// Neighbour count: `auto` selects by leave-one-out error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KArg {
    Auto,
    Fixed(usize),
}

impl FromStr for KArg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(KArg::Auto),
            v => v
                .parse()
                .map(KArg::Fixed)
                .map_err(|_| Error::invalid(format!("k must be `auto` or a count, got {v:?}"))),
        }
    }
}

impl std::fmt::Display for KArg {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KArg::Auto => f.write_str("auto"),
            KArg::Fixed(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct MapArgs {
    /// FS output directory; defaults to `<out>/fs`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    pub k: KArg,
    /// `uniform` or `inverse_distance`.
    #[arg(long, default_value = "uniform")]
    pub weighting: Weighting,
    /// Cell size in metres.
    #[arg(long, default_value_t = spatial::DEFAULT_CELLSIZE)]
    pub cellsize: f64,
    /// Margin added around the stations' bounding box, in metres.
    #[arg(long, default_value_t = 5000.0)]
    pub margin: f64,
    #[arg(long, default_value_t = spatial::DEFAULT_MAX_CELLS)]
    pub max_cells: usize,
    #[arg(long, default_value_t = 199)]
    pub shuffles: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// FS output directory; defaults to `<out>/fs`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, default_value_t = spatial::DEFAULT_PERMUTATIONS)]
    pub permutations: usize,
}

/// Runs the CLI on `args` (program name first) and returns the exit status:
/// 0 on success, 2 for input errors, 1 for computational failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match with_config_defaults(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                2
            } else {
                1
            }
        }
    }
}

const SUBCOMMANDS: [&str; 7] = ["synth", "ingest", "decompose", "fitdist", "fs", "map", "report"];

/// Splices `--key=value` pairs from a `--config` file right after the
/// subcommand name, so explicit flags that follow take precedence.
fn with_config_defaults(mut args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        }
    }
    let Some(path) = config else { return Ok(args) };
    let Some(pos) = args.iter().position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref())) else {
        return Ok(args);
    };
    let text = fileio::read_to_string(&path)?;
    let mut extra = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(&path, i + 1, "expected `key=value`"))?;
        let key = k.trim().trim_start_matches("--").replace('_', "-");
        if key == "config" {
            return Err(Error::parse(&path, i + 1, "config files cannot include other config files"));
        }
        extra.push(OsString::from(format!("--{key}={}", v.trim())));
    }
    args.splice(pos + 1..pos + 1, extra);
    Ok(args)
}

/// Shared state of one command run.
struct Ctx {
    out_root: PathBuf,
    dir: PathBuf,
    seed: u64,
}

impl Ctx {
    fn default_input(&self, stage: &str) -> PathBuf {
        self.out_root.join(stage)
    }

    /// Paths under the output root are echoed relative to it so that identical
    /// runs under different roots produce identical configs.
    fn show(&self, p: &Path) -> String {
        match p.strip_prefix(&self.out_root) {
            Ok(rest) => format!("$OUT/{}", rest.display()),
            Err(_) => p.display().to_string(),
        }
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        fileio::write_atomic(&self.dir.join(name), contents.as_bytes())
    }
}

/// Ordered `key=value` listing written to `run_config.txt`.
#[derive(Default)]
struct RunConfig(Vec<(String, String)>);

impl RunConfig {
    fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.0.push((key.to_string(), value.to_string()));
        self
    }

    fn render(&self) -> String {
        self.0.iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let name = cli.command.name();
    let ctx = Ctx {
        out_root: cli.out.clone(),
        dir: cli.out.join(name),
        seed: cli.seed,
    };
    let mut cfg = RunConfig::default();
    cfg.set("command", name).set("seed", cli.seed).set("out", "$OUT");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
    log::info!("{name}: writing to {}", ctx.dir.display());
    pool.install(|| match &cli.command {
        Command::Synth(a) => cmd_synth(&ctx, cfg, a),
        Command::Ingest(a) => cmd_ingest(&ctx, cfg, a),
        Command::Decompose(a) => cmd_decompose(&ctx, cfg, a),
        Command::Fitdist(a) => cmd_fitdist(&ctx, cfg, a),
        Command::Fs(a) => cmd_fs(&ctx, cfg, a),
        Command::Map(a) => cmd_map(&ctx, cfg, a),
        Command::Report(a) => cmd_report(&ctx, cfg, a),
    })
}

fn check_ids(stations: &StationSet) -> Result<()> {
    for s in stations.iter() {
        if s.station_id.contains(['/', '\\']) || s.station_id.starts_with('.') {
            return Err(Error::invalid(format!("station_id {:?} is not usable as a file name", s.station_id)));
        }
    }
    Ok(())
}

fn load_stations(path: &Path) -> Result<StationSet> {
    let st = ingest::parse_station_table(path)?;
    check_ids(&st)?;
    Ok(st)
}

fn subset(stations: &StationSet, keep: &BTreeMap<String, impl Sized>) -> Result<StationSet> {
    StationSet::new(stations.iter().filter(|s| keep.contains_key(&s.station_id)).cloned().collect())
}

/// Collects per-station results in station-id order. Failed stations abort
/// the command unless `skip_bad`, in which case they are logged and returned
/// separately.
fn gather<T>(results: Vec<(String, Result<T>)>, skip_bad: bool) -> Result<(BTreeMap<String, T>, BTreeMap<String, String>)> {
    let mut ok = BTreeMap::new();
    let mut bad = BTreeMap::new();
    let mut sorted = results;
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for (id, r) in sorted {
        match r {
            Ok(v) => {
                ok.insert(id, v);
            }
            Err(e) if skip_bad => {
                log::warn!("station {id} skipped: {e}");
                bad.insert(id, e.to_string());
            }
            Err(e) => {
                return Err(match e {
                    Error::InvalidInput(m) => Error::InvalidInput(format!("station {id}: {m}")),
                    Error::Degenerate(m) => Error::Degenerate(format!("station {id}: {m}")),
                    Error::Numerical(m) => Error::Numerical(format!("station {id}: {m}")),
                    other => other,
                })
            }
        }
    }
    Ok((ok, bad))
}

fn exclusions_csv(bad: &BTreeMap<String, String>) -> String {
    let mut out = String::from("station_id,reason\n");
    for (id, reason) in bad {
        let _ = writeln!(out, "{id},{}", reason.replace([',', '\n'], ";"));
    }
    out
}

fn cmd_synth(ctx: &Ctx, mut cfg: RunConfig, a: &SynthArgs) -> Result<()> {
    let daily_model = match a.family {
        None => {
            if !a.params.is_empty() {
                return Err(Error::invalid("--params needs --family"));
            }
            DailyModel::Seasonal
        }
        Some(f) => DailyModel::Family(family_params(f, &a.params)?),
    };
    let spec = SyntheticSpec {
        n_stations: a.stations,
        net_a_share: a.net_a_share,
        coupling: match a.coupling {
            CouplingArg::Monotone => Coupling::Monotone,
            CouplingArg::Constant => Coupling::Constant,
        },
        daily_model,
        years: a.years,
        start_year: a.start_year,
        sampling: match a.step {
            StepArg::Network => Sampling::Network,
            StepArg::Seconds(s) => Sampling::Fixed(s),
        },
        missing_rate: a.missing_rate,
        seed: ctx.seed,
        ..SyntheticSpec::default()
    };
    cfg.set("stations", a.stations)
        .set("years", a.years)
        .set("start_year", a.start_year)
        .set("step", a.step)
        .set("coupling", format!("{:?}", spec.coupling).to_lowercase())
        .set("daily_model", match spec.daily_model {
            DailyModel::Seasonal => "seasonal".to_string(),
            DailyModel::Family(p) => format!("{p:?}"),
        })
        .set("net_a_share", a.net_a_share)
        .set("missing_rate", a.missing_rate)
        .set("extent_m", format!("{}x{}", spec.extent.0, spec.extent.1))
        .set("origin_m", format!("{},{}", spec.origin.0, spec.origin.1))
        .set("elevation_model", format!("{:?}", spec.elevation));
    ctx.write(RUN_CONFIG_FILE, &cfg.render())?;
    let net = fixtures::generate_network(&spec)?;
    net.write_bundle(&ctx.dir)?;
    log::info!("synth: {} stations, {} days", net.stations.len(), spec.n_days()?);
    Ok(())
}

fn family_params(f: Family, p: &[f64]) -> Result<DistParams> {
    let want = if f == Family::Gev { 3 } else { 2 };
    if p.len() != want {
        return Err(Error::invalid(format!("{f} needs {want} --params values, got {}", p.len())));
    }
    match f {
        Family::Weibull => DistParams::weibull(p[0], p[1]),
        Family::Gamma => DistParams::gamma(p[0], p[1]),
        Family::Gev => DistParams::gev(p[0], p[1], p[2]),
    }
}

fn cmd_ingest(ctx: &Ctx, mut cfg: RunConfig, a: &IngestArgs) -> Result<()> {
    let input = a.input.clone().unwrap_or_else(|| ctx.default_input("synth"));
    let stations_path = a.stations.clone().unwrap_or_else(|| input.join(fixtures::STATIONS_FILE));
    let mdir = a.measurements.clone().unwrap_or_else(|| input.join(fixtures::MEASUREMENTS_DIR));
    if !(a.min_retained >= 0.0 && a.min_retained <= 1.0) {
        return Err(Error::invalid("min_retained must lie in [0, 1]"));
    }
    cfg.set("stations", ctx.show(&stations_path))
        .set("measurements", ctx.show(&mdir))
        .set("min_coverage", a.min_coverage)
        .set("max_gap_days", a.max_gap_days)
        .set("min_retained", a.min_retained)
        .set("skip_bad", a.skip_bad)
        .set("day_boundary", "UTC midnight")
        .set("sampling_step", "inferred per file");
    ctx.write(RUN_CONFIG_FILE, &cfg.render())?;

    let stations = load_stations(&stations_path)?;
    let results: Vec<(String, Result<(StationQc, ingest::DailySeries)>)> = stations
        .as_slice()
        .par_iter()
        .map(|s| {
            let id = s.station_id.clone();
            let r = ingest::parse_measurements(&mdir.join(format!("{id}.csv")), &id, None).and_then(|raw| {
                let daily = ingest::aggregate_daily(&raw, a.min_coverage)?;
                let filled = ingest::fill_short_gaps(&daily, a.max_gap_days);
                Ok((StationQc::assess(&raw, &filled, a.min_retained), filled))
            });
            (id, r)
        })
        .collect();
    let (ok, bad) = gather(results, a.skip_bad)?;

    let mut qc: BTreeMap<String, StationQc> = ok.iter().map(|(id, (q, _))| (id.clone(), q.clone())).collect();
    for (id, reason) in &bad {
        qc.insert(id.clone(), StationQc::rejected(id, reason));
    }
    let mut report = format!("{QC_HEADER}\n");
    for q in qc.values() {
        report.push_str(&q.csv_row());
        report.push('\n');
    }
    ctx.write("qc_report.csv", &report)?;

    let included: BTreeMap<String, &ingest::DailySeries> =
        ok.iter().filter(|(_, (q, _))| q.included).map(|(id, (_, d))| (id.clone(), d)).collect();
    included.par_iter().try_for_each(|(id, d)| {
        ingest::write_daily_csv(&ctx.dir.join(DAILY_DIR).join(format!("{id}.csv")), d)
    })?;
    ingest::write_station_table(&ctx.dir.join(fixtures::STATIONS_FILE), &subset(&stations, &included)?)?;
    log::info!("ingest: {} of {} stations included", included.len(), stations.len());
    if included.is_empty() {
        return Err(Error::Degenerate("no station passed quality control".into()));
    }
    Ok(())
}

fn stl_params(a: &DecomposeArgs, n: usize) -> StlParams {
    let mut p = match a.seasonal.0 {
        SeasonalMode::Periodic => StlParams::periodic(a.period, n),
        SeasonalMode::Windowed(w) => StlParams::windowed(a.period, w),
    };
    if let Some(t) = a.trend_window {
        p.trend_window = t;
    }
    if let Some(l) = a.low_pass_window {
        p.low_pass_window = l;
    }
    p.loess_degree = a.degree;
    p.inner_iterations = a.inner;
    p.robust_iterations = a.robust;
    p.max_missing_fraction = a.max_missing_fraction;
    p
}

const ADDITIVITY_TOL: f64 = 1e-9;

/// Re-reads a written decomposition and checks it still adds up to the input.
fn audit_decomposition(path: &Path, daily: &ingest::DailySeries, period: usize) -> Result<()> {
    let d = stl::read_decomposition_csv(path, period)?;
    if d.len() != daily.len() {
        return Err(Error::Numerical(format!("{}: length changed on write", path.display())));
    }
    for i in 0..d.len() {
        if let (Some(y), Some(r)) = (daily.values[i], d.remainder[i]) {
            let sum = d.trend[i] + d.seasonal[i] + r;
            if (sum - y).abs() > ADDITIVITY_TOL * y.abs().max(1.0) {
                return Err(Error::Numerical(format!(
                    "{}: components do not add up on day {} ({sum} vs {y})",
                    path.display(),
                    daily.date(i)
                )));
            }
        }
    }
    Ok(())
}

fn cmd_decompose(ctx: &Ctx, mut cfg: RunConfig, a: &DecomposeArgs) -> Result<()> {
    let input = a.input.clone().unwrap_or_else(|| ctx.default_input("ingest"));
    let shown = stl_params(a, 0);
    cfg.set("input", ctx.show(&input))
        .set("period", a.period)
        .set("seasonal", a.seasonal)
        .set(
            "trend_window",
            a.trend_window.map_or_else(|| "derived from period and series length".into(), |t| t.to_string()),
        )
        .set("low_pass_window", shown.low_pass_window)
        .set("degree", a.degree)
        .set("inner", a.inner)
        .set("robust", a.robust)
        .set("max_missing_fraction", a.max_missing_fraction)
        .set("skip_bad", a.skip_bad);
    ctx.write(RUN_CONFIG_FILE, &cfg.render())?;

    let stations = load_stations(&input.join(fixtures::STATIONS_FILE))?;
    let results: Vec<(String, Result<usize>)> = stations
        .as_slice()
        .par_iter()
        .map(|s| {
            let id = s.station_id.clone();
            let r = ingest::read_daily_csv(&input.join(DAILY_DIR).join(format!("{id}.csv"))).and_then(|daily| {
                let params = stl_params(a, daily.len());
                let d = stl::stl_decompose(&daily, &params)?;
                let path = ctx.dir.join(DECOMPOSITION_DIR).join(format!("{id}.csv"));
                stl::write_decomposition_csv(&path, &d)?;
                audit_decomposition(&path, &daily, a.period)?;
                Ok(params.trend_window)
            });
            (id, r)
        })
        .collect();
    let (ok, bad) = gather(results, a.skip_bad)?;
    ctx.write("decompose_exclusions.csv", &exclusions_csv(&bad))?;
    ingest::write_station_table(&ctx.dir.join(fixtures::STATIONS_FILE), &subset(&stations, &ok)?)?;
    log::info!("decompose: {} stations", ok.len());
    Ok(())
}

fn read_remainder(dir: &Path, id: &str) -> Result<Vec<f64>> {
    let d = stl::read_decomposition_csv(&dir.join(DECOMPOSITION_DIR).join(format!("{id}.csv")), 0)?;
    Ok(d.remainder_sample())
}

fn cmd_fitdist(ctx: &Ctx, mut cfg: RunConfig, a: &FitdistArgs) -> Result<()> {
    let input = a.input.clone().unwrap_or_else(|| {
        ctx.default_input(match a.source {
            SourceArg::Daily => "ingest",
            SourceArg::Remainder => "decompose",
        })
    });
    let quad = QuadratureSpec {
        range_pad: a.pad,
        ..QuadratureSpec::trapezoid(a.nodes)
    };
    quad.validate()?;
    cfg.set("input", ctx.show(&input))
        .set("source", a.source)
        .set("reference", match a.reference {
            ReferenceArg::Kde => "kde",
            ReferenceArg::Histogram => "histogram (Freedman-Diaconis)",
        })
        .set("bandwidth", a.bandwidth)
        .set("nodes", a.nodes)
        .set("pad", a.pad)
        .set("families", Family::ALL.map(|f| f.as_str()).join(" "))
        .set("max_fit_iterations", distributions::MAX_FIT_ITERATIONS)
        .set("skip_bad", a.skip_bad);
    ctx.write(RUN_CONFIG_FILE, &cfg.render())?;

    let stations = load_stations(&input.join(fixtures::STATIONS_FILE))?;
    let results: Vec<(String, Result<Ranking>)> = stations
        .as_slice()
        .par_iter()
        .map(|s| {
            let id = s.station_id.clone();
            let sample = match a.source {
                SourceArg::Daily => ingest::read_daily_csv(&input.join(DAILY_DIR).join(format!("{id}.csv")))
                    .map(|d| d.present_values()),
                SourceArg::Remainder => read_remainder(&input, &id),
            };
            let r = sample.and_then(|x| {
                let reference = match a.reference {
                    ReferenceArg::Kde => ReferenceKind::Kde(a.bandwidth.rule(&x)?),
                    ReferenceArg::Histogram => ReferenceKind::Histogram,
                };
                rank_families(&x, &RankOptions { reference, quad })
            });
            (id, r)
        })
        .collect();
    let (ok, bad) = gather(results, a.skip_bad)?;
    ctx.write("kl_report.csv", &format_kl_report(&ok))?;
    ctx.write("kl_boxplot.csv", &format_kl_boxplot(&stations, &ok)?)?;
    ctx.write("kl_wins.csv", &format_wins(&stations, &ok))?;
    ctx.write("fitdist_exclusions.csv", &exclusions_csv(&bad))?;
    Ok(())
}

/// Per network, how many stations each family fits best.
fn format_wins(stations: &StationSet, rankings: &BTreeMap<String, Ranking>) -> String {
    let mut wins: BTreeMap<(String, Family), usize> = BTreeMap::new();
    for (id, r) in rankings {
        let Some(meta) = stations.get(id) else { continue };
        for f in Family::ALL {
            wins.entry((meta.network.to_string(), f)).or_default();
        }
        if let Some(best) = r.best() {
            *wins.entry((meta.network.to_string(), best.family)).or_default() += 1;
        }
    }
    let mut out = String::from("network,family,stations_best\n");
    for ((net, f), n) in wins {
        let _ = writeln!(out, "{net},{f},{n}");
    }
    out
}

fn cmd_fs(ctx: &Ctx, mut cfg: RunConfig, a: &FsArgs) -> Result<()> {
    let input = a.input.clone().unwrap_or_else(|| ctx.default_input("decompose"));
    let quad = QuadratureSpec {
        range_pad: a.pad,
        ..QuadratureSpec::trapezoid(a.nodes)
    };
    quad.validate()?;
    cfg.set("input", ctx.show(&input))
        .set("bandwidth", a.bandwidth)
        .set("kernel", "gaussian")
        .set("quadrature", "trapezoid")
        .set("nodes", a.nodes)
        .set("pad", a.pad)
        .set("min_sample", a.min_sample)
        .set("skip_bad", a.skip_bad);
    ctx.write(RUN_CONFIG_FILE, &cfg.render())?;

    let stations = load_stations(&input.join(fixtures::STATIONS_FILE))?;
    let results: Vec<(String, Result<FsOutcome>)> = stations
        .as_slice()
        .par_iter()
        .map(|s| {
            let id = s.station_id.clone();
            let r = read_remainder(&input, &id).and_then(|x| {
                let metrics = a.bandwidth.rule(&x).and_then(|rule| fs_metrics(&x, &rule, &quad, a.min_sample));
                match metrics {
                    Ok(m) => Ok(FsOutcome::Metrics(m)),
                    Err(Error::Degenerate(m)) => Ok(FsOutcome::Excluded(m)),
                    Err(e) => Err(e),
                }
            });
            (id, r)
        })
        .collect();
    let (mut outcomes, bad) = gather(results, a.skip_bad)?;
    for (id, reason) in bad {
        outcomes.insert(id, FsOutcome::Excluded(reason));
    }
    let excluded: BTreeMap<String, String> = outcomes
        .iter()
        .filter_map(|(id, o)| match o {
            FsOutcome::Excluded(r) => Some((id.clone(), r.clone())),
            FsOutcome::Metrics(_) => None,
        })
        .collect();
    ctx.write("fs_results.csv", &format_fs_results(&outcomes))?;
    ctx.write("fs_plane.csv", &format_fs_plane(&fs_plane(&stations, &outcomes)?))?;
    ctx.write("fs_exclusions.csv", &exclusions_csv(&excluded))?;
    ingest::write_station_table(&ctx.dir.join(fixtures::STATIONS_FILE), &stations)?;
    Ok(())
}

/// Stations joined with their FS metrics, in `fs_results.csv` order.
struct FsTable {
    ids: Vec<String>,
    points: Vec<(f64, f64)>,
    elevation: Vec<f64>,
    slope_mu: Vec<f64>,
    fim: Vec<f64>,
    entropy_power: Vec<f64>,
}

fn load_fs_table(input: &Path) -> Result<FsTable> {
    let stations = load_stations(&input.join(fixtures::STATIONS_FILE))?;
    let path = input.join("fs_results.csv");
    let rows = infometrics::parse_fs_results(&fileio::read_to_string(&path)?, &path)?;
    let mut t = FsTable {
        ids: Vec::new(),
        points: Vec::new(),
        elevation: Vec::new(),
        slope_mu: Vec::new(),
        fim: Vec::new(),
        entropy_power: Vec::new(),
    };
    for (id, m) in rows {
        let s = stations
            .get(&id)
            .ok_or_else(|| Error::invalid(format!("{}: station {id:?} not in the station table", path.display())))?;
        t.points.push((s.x, s.y));
        t.elevation.push(s.elevation);
        t.slope_mu.push(s.slope_mu);
        t.fim.push(m.fim);
        t.entropy_power.push(m.entropy_power);
        t.ids.push(id);
    }
    if t.ids.is_empty() {
        return Err(Error::invalid(format!("{}: no stations with metrics", path.display())));
    }
    Ok(t)
}

fn cmd_map(ctx: &Ctx, mut cfg: RunConfig, a: &MapArgs) -> Result<()> {
    let input = a.input.clone().unwrap_or_else(|| ctx.default_input("fs"));
    cfg.set("input", ctx.show(&input))
        .set("k", a.k)
        .set("k_candidates", format!("{:?}", spatial::DEFAULT_K_CANDIDATES))
        .set("weighting", a.weighting)
        .set("cellsize", a.cellsize)
        .set("margin", a.margin)
        .set("max_cells", a.max_cells)
        .set("shuffles", a.shuffles)
        .set("shuffle_seed_offset", SEED_SHUFFLE)
        .set("shuffled_map_seed_offset", SEED_SHUFFLED_MAP);
    ctx.write(RUN_CONFIG_FILE, &cfg.render())?;

    let t = load_fs_table(&input)?;
    let bounds = Bounds::around(&t.points, a.margin)?;
    let cands = feasible_candidates(&spatial::DEFAULT_K_CANDIDATES, t.points.len());
    let mut summary = String::from(MAP_SUMMARY_HEADER);
    summary.push('\n');
    for (i, (name, values)) in [("entropy_power", &t.entropy_power), ("fim", &t.fim)].into_iter().enumerate() {
        let k = match a.k {
            KArg::Fixed(k) => k,
            KArg::Auto => select_k(&t.points, values, &cands, a.weighting)?,
        };
        let model = KnnModel::new(t.points.clone(), values.clone(), k, a.weighting)?;
        make_grid_map(&model, &bounds, a.cellsize, a.max_cells)?.write_ascii_grid(&ctx.dir.join(format!("{name}.asc")))?;

        let seed = ctx.seed.wrapping_add(SEED_SHUFFLE + i as u64 * SEED_STRIDE);
        let rep = shuffle_test(&t.points, values, k, a.weighting, a.shuffles, seed)?;
        rep.write(&ctx.dir.join(format!("shuffle_{name}.txt")))?;

        // the shuffled map is an independent mapping run, so k is chosen afresh
        let mut shuffled = values.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(
            ctx.seed.wrapping_add(SEED_SHUFFLED_MAP + i as u64 * SEED_STRIDE),
        ));
        let k_shuffled = match a.k {
            KArg::Fixed(k) => k,
            KArg::Auto => select_k(&t.points, &shuffled, &cands, a.weighting)?,
        };
        let model = KnnModel::new(t.points.clone(), shuffled, k_shuffled, a.weighting)?;
        make_grid_map(&model, &bounds, a.cellsize, a.max_cells)?
            .write_ascii_grid(&ctx.dir.join(format!("{name}_shuffled.asc")))?;

        let reselected: Vec<f64> = match a.k {
            KArg::Fixed(_) => rep.null_skills.clone(),
            KArg::Auto => reselected_null_skills(&t.points, values, &cands, a.weighting, a.shuffles, seed)?
                .into_iter()
                .map(|x| x.1)
                .collect(),
        };
        let _ = writeln!(
            summary,
            "{name},{k},{},{},{},{},{k_shuffled},{}",
            rep.observed_skill,
            crate::stats::median(&rep.null_skills),
            rep.p_value,
            rep.n_shuffles,
            crate::stats::median(&reselected)
        );
        log::info!("map {name}: k = {k}, LOO R2 = {:.3}, p = {}", rep.observed_skill, rep.p_value);
    }
    ctx.write("map_summary.csv", &summary)
}

fn cmd_report(ctx: &Ctx, mut cfg: RunConfig, a: &ReportArgs) -> Result<()> {
    let input = a.input.clone().unwrap_or_else(|| ctx.default_input("fs"));
    cfg.set("input", ctx.show(&input))
        .set("permutations", a.permutations)
        .set("seed_offset", SEED_REPORT);
    ctx.write(RUN_CONFIG_FILE, &cfg.render())?;

    let t = load_fs_table(&input)?;
    let mut csv = format!("{}\n", spatial::COVARIATE_HEADER);
    let mut text = String::new();
    let metrics = [("fim", &t.fim), ("entropy_power", &t.entropy_power)];
    let covariates = [("elev_m", &t.elevation), ("slope_mu", &t.slope_mu)];
    let mut idx = 0u64;
    for (mname, m) in metrics {
        for (cname, c) in covariates {
            let seed = ctx.seed.wrapping_add(SEED_REPORT + idx * SEED_STRIDE);
            idx += 1;
            let r = covariate_correlation(m, c, a.permutations, seed)
                .map_err(|e| Error::invalid(format!("{mname} vs {cname}: {e}")))?;
            csv.push_str(&spatial::format_correlation_row(mname, cname, &r));
            let direction = if r.spearman_rho < 0.0 { "decreases" } else { "increases" };
            let _ = writeln!(
                text,
                "{mname} {direction} with {cname}: spearman_rho={:.4} (p={}), pearson_r={:.4} (p={}), n={}",
                r.spearman_rho, r.spearman_p, r.pearson_r, r.pearson_p, r.n
            );
        }
    }
    ctx.write("covariate_correlation.csv", &csv)?;
    ctx.write("report.txt", &text)?;
    print!("{text}");
    Ok(())
}
