//! Deterministic synthetic station networks and wind-like series.
//!
//! Two networks share a parametric terrain: a homogeneous cover and a dense
//! cluster around an alpine massif. Every station's daily anomaly blends a
//! Gaussian and a heavier Student-t component, and both the noise scale and
//! the heavy-tail weight can grow with elevation. Output depends only on the
//! spec and its seed: station `i` draws from its own ChaCha stream.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::distr::{Distribution, Open01};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StudentT};
use rayon::prelude::*;

use crate::distributions::DistParams;
use crate::error::{Error, Result};
use crate::fileio;
use crate::ingest::{self, Network, RawSeries, StationMeta, StationSet};

pub const STATIONS_FILE: &str = "stations.csv";
pub const MEASUREMENTS_DIR: &str = "measurements";
pub const TRUNCATION_FILE: &str = "truncation_report.csv";
pub const TRUNCATION_HEADER: &str = "station_id,n_records,n_truncated,truncated_fraction";

const SECONDS_PER_DAY: i64 = 86_400;
const ANNUAL_PERIOD_DAYS: f64 = 365.0;
const HEAVY_TAIL_DOF: f64 = 3.0;

/// Terrain height: `base + peak * exp(-((dx/sx)^2 + (dy/sy)^2) / 2)` around a
/// massif centred at fractions `center` of the extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElevationModel {
    pub base: f64,
    pub peak: f64,
    /// Massif centre as fractions of the extent.
    pub center: (f64, f64),
    /// Massif spread as fractions of the extent.
    pub spread: (f64, f64),
}

impl Default for ElevationModel {
    fn default() -> Self {
        ElevationModel {
            base: 350.0,
            peak: 3000.0,
            center: (0.6, 0.35),
            spread: (0.22, 0.2),
        }
    }
}

impl ElevationModel {
    /// Height at offset `(dx, dy)` from the south-west corner of `extent`.
    pub fn height(&self, extent: (f64, f64), dx: f64, dy: f64) -> f64 {
        let u = (dx / extent.0 - self.center.0) / self.spread.0;
        let v = (dy / extent.1 - self.center.1) / self.spread.1;
        self.base + self.peak * (-(u * u + v * v) / 2.0).exp()
    }

    /// Elevation rescaled to [0, 1] over the model's range.
    pub fn normalised(&self, elevation: f64) -> f64 {
        ((elevation - self.base) / self.peak).clamp(0.0, 1.0)
    }
}

/// Maps normalised elevation to the daily anomaly's noise scale and
/// Student-t mixing weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Coupling {
    /// Scale and weight rise with elevation.
    #[default]
    Monotone,
    /// Every station gets the mid-range scale and weight.
    Constant,
}

impl Coupling {
    /// `(noise scale in m/s, heavy-tail weight)` at normalised elevation `e`.
    pub fn disorder(self, e: f64) -> (f64, f64) {
        let e = match self {
            Coupling::Monotone => e,
            Coupling::Constant => 0.5,
        };
        (0.5 + 1.5 * e, 0.6 * e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    /// Each network's native step: 600 s for NET_A, 1800 s for NET_B.
    #[default]
    Network,
    /// The same step in seconds for every station; must divide a day.
    Fixed(u32),
}

impl Sampling {
    pub fn step(self, network: Network) -> u32 {
        match self {
            Sampling::Network => network.nominal_step(),
            Sampling::Fixed(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DailyModel {
    /// Annual sinusoid plus slow trend plus elevation-coupled anomaly, with a
    /// zero-mean diurnal cycle and small sub-daily noise on top.
    Seasonal,
    /// Independent daily values from a known family, constant within the day.
    Family(DistParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_stations: usize,
    /// Fraction of stations on the homogeneous NET_A cover.
    pub net_a_share: f64,
    /// Width and height in metres.
    pub extent: (f64, f64),
    /// South-west corner in projected metres.
    pub origin: (f64, f64),
    pub elevation: ElevationModel,
    pub coupling: Coupling,
    pub daily_model: DailyModel,
    pub years: usize,
    pub start_year: i32,
    pub sampling: Sampling,
    /// Probability that any single raw record is missing.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_stations: 293,
            net_a_share: 119.0 / 293.0,
            extent: (350_000.0, 220_000.0),
            origin: (2_480_000.0, 1_070_000.0),
            elevation: ElevationModel::default(),
            coupling: Coupling::Monotone,
            daily_model: DailyModel::Seasonal,
            years: 5,
            start_year: 2008,
            sampling: Sampling::Network,
            missing_rate: 0.002,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_stations < 2 {
            return Err(Error::invalid("a synthetic network needs at least 2 stations"));
        }
        if self.years < 2 {
            return Err(Error::invalid("synthetic series need at least 2 years"));
        }
        if !(0.0..=1.0).contains(&self.net_a_share) {
            return Err(Error::invalid("net_a_share must lie in [0, 1]"));
        }
        if !(self.extent.0 > 0.0 && self.extent.1 > 0.0) {
            return Err(Error::invalid("extent must be positive"));
        }
        if !(self.elevation.peak > 0.0 && self.elevation.spread.0 > 0.0 && self.elevation.spread.1 > 0.0) {
            return Err(Error::invalid("elevation peak and spread must be positive"));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::invalid("missing_rate must lie in [0, 1)"));
        }
        for net in [Network::NetA, Network::NetB] {
            let step = i64::from(self.sampling.step(net));
            if step <= 0 || SECONDS_PER_DAY % step != 0 {
                return Err(Error::invalid(format!("sampling step {step} s does not divide a day")));
            }
        }
        if let DailyModel::Family(p) = self.daily_model {
            p.validate()?;
        }
        self.start_date()?;
        Ok(())
    }

    fn start_date(&self) -> Result<NaiveDate> {
        NaiveDate::from_ymd_opt(self.start_year, 1, 1).ok_or_else(|| Error::invalid("bad start year"))
    }

    /// Calendar days covered by the series.
    pub fn n_days(&self) -> Result<usize> {
        let start = self.start_date()?;
        let end = start
            .with_year(self.start_year + self.years as i32)
            .ok_or_else(|| Error::invalid("bad year span"))?;
        Ok((end - start).num_days() as usize)
    }

    pub fn n_net_a(&self) -> usize {
        (self.n_stations as f64 * self.net_a_share).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedNetwork {
    pub stations: StationSet,
    /// Raw series in station order.
    pub series: Vec<RawSeries>,
    /// Records clipped to 0 m/s per station, in station order.
    pub truncated: Vec<usize>,
}

impl GeneratedNetwork {
    /// Writes `stations.csv`, `measurements/<id>.csv` and the truncation report.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        ingest::write_station_table(&dir.join(STATIONS_FILE), &self.stations)?;
        let mdir = dir.join(MEASUREMENTS_DIR);
        self.series
            .par_iter()
            .try_for_each(|s| ingest::write_measurements(&mdir.join(format!("{}.csv", s.station_id)), s))?;
        fileio::write_atomic(&dir.join(TRUNCATION_FILE), self.truncation_report().as_bytes())
    }

    pub fn truncation_report(&self) -> String {
        let mut out = format!("{TRUNCATION_HEADER}\n");
        for (s, &t) in self.series.iter().zip(&self.truncated) {
            let frac = if s.is_empty() { 0.0 } else { t as f64 / s.len() as f64 };
            out.push_str(&format!("{},{},{},{}\n", s.station_id, s.len(), t, frac));
        }
        out
    }
}

fn station_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn layout(spec: &SyntheticSpec) -> Result<StationSet> {
    let mut rng = station_rng(spec.seed, 0);
    let (w, h) = spec.extent;
    let em = &spec.elevation;
    let n_a = spec.n_net_a();
    let width = spec.n_stations.to_string().len().max(3);
    let mut out = Vec::with_capacity(spec.n_stations);
    for i in 0..spec.n_stations {
        let network = if i < n_a { Network::NetA } else { Network::NetB };
        let (dx, dy) = match network {
            Network::NetA => (rng.random::<f64>() * w, rng.random::<f64>() * h),
            Network::NetB => {
                let nx = Normal::new(em.center.0 * w, em.spread.0 * w).expect("positive spread");
                let ny = Normal::new(em.center.1 * h, em.spread.1 * h).expect("positive spread");
                loop {
                    let (x, y) = (nx.sample(&mut rng), ny.sample(&mut rng));
                    if (0.0..=w).contains(&x) && (0.0..=h).contains(&y) {
                        break (x, y);
                    }
                }
            }
        };
        let elevation = em.height(spec.extent, dx, dy);
        let jitter = (rng.random::<f64>() - 0.5) * 0.1;
        let slope_mu = (0.1 + 0.8 * em.normalised(elevation) + jitter).max(0.0);
        out.push(StationMeta {
            station_id: format!("ST{:0width$}", i + 1),
            x: spec.origin.0 + dx,
            y: spec.origin.1 + dy,
            elevation,
            slope_mu,
            network,
        });
    }
    StationSet::new(out)
}

fn daily_values(spec: &SyntheticSpec, meta: &StationMeta, n_days: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match spec.daily_model {
        DailyModel::Family(p) => (0..n_days).map(|_| p.quantile(Open01.sample(rng))).collect(),
        DailyModel::Seasonal => {
            let e = spec.elevation.normalised(meta.elevation);
            let (scale, weight) = spec.coupling.disorder(e);
            let normal = Normal::new(0.0, scale).expect("positive scale");
            let t = StudentT::new(HEAVY_TAIL_DOF).expect("positive dof");
            let level = 3.0 + 1.5 * e;
            let phase = rng.random::<f64>() * 0.5;
            (0..n_days)
                .map(|d| {
                    let d = d as f64;
                    let seasonal = 0.8 * (2.0 * std::f64::consts::PI * (d / ANNUAL_PERIOD_DAYS + phase)).cos();
                    let trend = 0.05 * d / ANNUAL_PERIOD_DAYS;
                    let anomaly = if rng.random::<f64>() < weight {
                        scale * t.sample(rng)
                    } else {
                        normal.sample(rng)
                    };
                    level + seasonal + trend + anomaly
                })
                .collect()
        }
    }
}

fn generate_station(spec: &SyntheticSpec, meta: &StationMeta, index: usize, n_days: usize) -> Result<(RawSeries, usize)> {
    let mut rng = station_rng(spec.seed, index as u64 + 1);
    let daily = daily_values(spec, meta, n_days, &mut rng);
    let step = spec.sampling.step(meta.network);
    let per_day = (SECONDS_PER_DAY / i64::from(step)) as usize;
    let t0 = spec.start_date()?.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp();
    let sub_noise = Normal::new(0.0, 0.25).expect("positive scale");
    let seasonal = matches!(spec.daily_model, DailyModel::Seasonal);
    let mut timestamps = Vec::with_capacity(n_days * per_day);
    let mut values = Vec::with_capacity(n_days * per_day);
    let mut truncated = 0;
    for (d, &base) in daily.iter().enumerate() {
        for j in 0..per_day {
            let offset = j as i64 * i64::from(step);
            timestamps.push(t0 + d as i64 * SECONDS_PER_DAY + offset);
            let mut v = base;
            if seasonal {
                let hour_angle = 2.0 * std::f64::consts::PI * offset as f64 / SECONDS_PER_DAY as f64;
                v += 0.5 * hour_angle.sin() + sub_noise.sample(&mut rng);
            }
            if v < 0.0 {
                v = 0.0;
                truncated += 1;
            }
            let missing = spec.missing_rate > 0.0 && rng.random::<f64>() < spec.missing_rate;
            values.push((!missing).then_some(v));
        }
    }
    Ok((RawSeries::new(meta.station_id.clone(), timestamps, values, step)?, truncated))
}

/// Builds the station layout and every station's raw series.
pub fn generate_network(spec: &SyntheticSpec) -> Result<GeneratedNetwork> {
    spec.validate()?;
    let stations = layout(spec)?;
    let n_days = spec.n_days()?;
    let generated: Vec<(RawSeries, usize)> = stations
        .as_slice()
        .par_iter()
        .enumerate()
        .map(|(i, meta)| generate_station(spec, meta, i, n_days))
        .collect::<Result<_>>()?;
    let (series, truncated) = generated.into_iter().unzip();
    Ok(GeneratedNetwork {
        stations,
        series,
        truncated,
    })
}

/// `m` i.i.d. draws by inverse transform of seeded open-interval uniforms.
pub fn generate_known_density_sample(params: &DistParams, m: usize, seed: u64) -> Result<Vec<f64>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..m).map(|_| params.quantile(Open01.sample(&mut rng))).collect())
}
