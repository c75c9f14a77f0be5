//! Station metadata, raw measurement files and daily aggregation.
//!
//! File formats:
//!
//! - station table: `station_id,x_m,y_m,elev_m,slope_mu,network`
//! - measurements (one file per station): `timestamp_utc,wind_mps`, timestamps as
//!   `YYYY-MM-DDTHH:MM:SSZ`, an empty speed field marks a missing record
//! - daily output: `date,wind_mps,coverage,filled`, dates as `YYYY-MM-DD`

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Days, NaiveDate, NaiveDateTime};

use crate::error::{Error, Result};
use crate::fileio::{self, fmt_opt};

pub const STATION_HEADER: &str = "station_id,x_m,y_m,elev_m,slope_mu,network";
pub const MEASUREMENT_HEADER: &str = "timestamp_utc,wind_mps";
pub const DAILY_HEADER: &str = "date,wind_mps,coverage,filled";

pub const DEFAULT_MIN_COVERAGE: f64 = 0.8;
/// Stations retaining fewer valid days than this fraction are excluded downstream.
pub const MIN_RETAINED_FRACTION: f64 = 0.7;

const SECONDS_PER_DAY: i64 = 86_400;
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Network {
    /// Homogeneous national cover, 10-minute sampling.
    NetA,
    /// Dense alpine cover, 30-minute sampling.
    NetB,
}

impl Network {
    pub fn as_str(self) -> &'static str {
        match self {
            Network::NetA => "NET_A",
            Network::NetB => "NET_B",
        }
    }

    /// Sampling step of the network's raw measurements, in seconds.
    pub fn nominal_step(self) -> u32 {
        match self {
            Network::NetA => 600,
            Network::NetB => 1800,
        }
    }
}

impl fmt::Display for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Network {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "NET_A" => Ok(Network::NetA),
            "NET_B" => Ok(Network::NetB),
            other => Err(Error::invalid(format!("unknown network {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationMeta {
    pub station_id: String,
    /// Projected easting, meters.
    pub x: f64,
    /// Projected northing, meters.
    pub y: f64,
    /// Meters above sea level.
    pub elevation: f64,
    /// Dimensionless slope-related terrain covariate.
    pub slope_mu: f64,
    pub network: Network,
}

/// Stations with unique identifiers, kept in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StationSet {
    stations: Vec<StationMeta>,
    index: HashMap<String, usize>,
}

impl StationSet {
    pub fn new(stations: Vec<StationMeta>) -> Result<Self> {
        let mut index = HashMap::with_capacity(stations.len());
        for (row, s) in stations.iter().enumerate() {
            if s.station_id.is_empty() {
                return Err(Error::invalid(format!("empty station_id at row {}", row + 1)));
            }
            if !s.x.is_finite() || !s.y.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite coordinate for station {:?}",
                    s.station_id
                )));
            }
            if !s.elevation.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite elevation for station {:?}",
                    s.station_id
                )));
            }
            if !s.slope_mu.is_finite() || s.slope_mu < 0.0 {
                return Err(Error::invalid(format!(
                    "slope_mu must be finite and >= 0 for station {:?}",
                    s.station_id
                )));
            }
            if index.insert(s.station_id.clone(), row).is_some() {
                return Err(Error::DuplicateStation {
                    id: s.station_id.clone(),
                    row: row + 1,
                });
            }
        }
        Ok(StationSet { stations, index })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn get(&self, station_id: &str) -> Option<&StationMeta> {
        self.index.get(station_id).map(|&i| &self.stations[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &StationMeta> {
        self.stations.iter()
    }

    pub fn as_slice(&self) -> &[StationMeta] {
        &self.stations
    }

    /// Stations ordered by `station_id`.
    pub fn sorted_by_id(&self) -> Vec<&StationMeta> {
        let mut v: Vec<&StationMeta> = self.stations.iter().collect();
        v.sort_by(|a, b| a.station_id.cmp(&b.station_id));
        v
    }
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes())
}

fn check_header(path: &Path, record: Option<csv::StringRecord>, expected: &str) -> Result<()> {
    let found = record
        .map(|r| r.iter().collect::<Vec<_>>().join(","))
        .unwrap_or_default();
    let found = found.trim_start_matches('\u{feff}');
    if found != expected {
        return Err(Error::parse(
            path,
            1,
            format!("expected header `{expected}`, found `{found}`"),
        ));
    }
    Ok(())
}

fn parse_f64(path: &Path, line: usize, field: &str, name: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::parse(path, line, format!("non-numeric {name} {field:?}")))
}

/// Parses a station table. Rejects duplicate identifiers (naming the offending
/// data row) and non-numeric coordinates.
pub fn parse_station_table(path: &Path) -> Result<StationSet> {
    let text = fileio::read_to_string(path)?;
    parse_station_str(&text, path)
}

pub fn parse_station_str(text: &str, path: &Path) -> Result<StationSet> {
    let mut rdr = csv_reader(text);
    let mut records = rdr.records();
    let header = records
        .next()
        .transpose()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?;
    check_header(path, header, STATION_HEADER)?;

    let mut stations = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, rec) in records.enumerate() {
        let row = i + 1;
        let line = row + 1;
        let rec = rec.map_err(|e| Error::parse(path, line, e.to_string()))?;
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        if rec.len() != 6 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 6 fields, found {}", rec.len()),
            ));
        }
        let id = rec[0].to_string();
        if let Some(first) = seen.insert(id.clone(), row) {
            log::debug!("{id} first seen at row {first}");
            return Err(Error::DuplicateStation { id, row });
        }
        let network = rec[5]
            .parse::<Network>()
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        stations.push(StationMeta {
            station_id: id,
            x: parse_f64(path, line, &rec[1], "x_m")?,
            y: parse_f64(path, line, &rec[2], "y_m")?,
            elevation: parse_f64(path, line, &rec[3], "elev_m")?,
            slope_mu: parse_f64(path, line, &rec[4], "slope_mu")?,
            network,
        });
    }
    let set = StationSet::new(stations)?;
    log::info!("{}: {} stations", path.display(), set.len());
    Ok(set)
}

pub fn format_station_table(stations: &StationSet) -> String {
    let mut out = String::with_capacity(64 * (stations.len() + 1));
    out.push_str(STATION_HEADER);
    out.push('\n');
    for s in stations.iter() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.station_id, s.x, s.y, s.elevation, s.slope_mu, s.network
        ));
    }
    out
}

pub fn write_station_table(path: &Path, stations: &StationSet) -> Result<()> {
    fileio::write_atomic(path, format_station_table(stations).as_bytes())
}

/// Sub-daily measurements of one station.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub station_id: String,
    /// Unix seconds, strictly increasing.
    timestamps: Vec<i64>,
    /// Wind speed in m/s; `None` marks a missing record.
    values: Vec<Option<f64>>,
    /// Nominal sampling step in seconds.
    pub nominal_step: u32,
    /// Records that were negative on input and have been set missing.
    pub n_negative: usize,
}

impl RawSeries {
    /// Builds a series, turning negative and non-finite speeds into missing values.
    pub fn new(
        station_id: impl Into<String>,
        timestamps: Vec<i64>,
        values: Vec<Option<f64>>,
        nominal_step: u32,
    ) -> Result<Self> {
        let station_id = station_id.into();
        if timestamps.len() != values.len() {
            return Err(Error::invalid(format!(
                "{station_id}: {} timestamps but {} values",
                timestamps.len(),
                values.len()
            )));
        }
        if let Some(w) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "{station_id}: timestamps not strictly increasing at record {}",
                w + 2
            )));
        }
        let mut n_negative = 0;
        let values = values
            .into_iter()
            .map(|v| match v {
                Some(x) if x.is_finite() && x >= 0.0 => Some(x),
                Some(x) if x < 0.0 => {
                    n_negative += 1;
                    None
                }
                _ => None,
            })
            .collect();
        Ok(RawSeries {
            station_id,
            timestamps,
            values,
            nominal_step,
            n_negative,
        })
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    /// Multiplies every valid speed by `c`.
    pub fn scaled(&self, c: f64) -> RawSeries {
        RawSeries {
            values: self.values.iter().map(|v| v.map(|x| x * c)).collect(),
            ..self.clone()
        }
    }
}

pub fn format_timestamp(ts: i64) -> String {
    DateTime::from_timestamp(ts, 0)
        .map(|d| d.format(TIMESTAMP_FORMAT).to_string())
        .unwrap_or_default()
}

fn parse_timestamp(s: &str) -> Option<i64> {
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .ok()
        .map(|d| d.and_utc().timestamp())
}

/// Most frequent positive spacing between consecutive timestamps; ties go to
/// the shorter step.
fn infer_step(timestamps: &[i64]) -> Option<u32> {
    let mut counts: HashMap<i64, usize> = HashMap::new();
    for w in timestamps.windows(2) {
        *counts.entry(w[1] - w[0]).or_default() += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .and_then(|(step, _)| u32::try_from(step).ok())
}

/// Parses one station's measurement file. When `nominal_step` is `None` it is
/// inferred from the most common timestamp spacing.
pub fn parse_measurements(
    path: &Path,
    station_id: &str,
    nominal_step: Option<u32>,
) -> Result<RawSeries> {
    let text = fileio::read_to_string(path)?;
    parse_measurement_str(&text, path, station_id, nominal_step)
}

pub fn parse_measurement_str(
    text: &str,
    path: &Path,
    station_id: &str,
    nominal_step: Option<u32>,
) -> Result<RawSeries> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim().trim_start_matches('\u{feff}'));
    if header != Some(MEASUREMENT_HEADER) {
        return Err(Error::parse(
            path,
            1,
            format!(
                "expected header `{MEASUREMENT_HEADER}`, found `{}`",
                header.unwrap_or_default()
            ),
        ));
    }
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (ts, v) = line
            .split_once(',')
            .ok_or_else(|| Error::parse(path, line_no, "expected 2 fields"))?;
        let ts = parse_timestamp(ts.trim())
            .ok_or_else(|| Error::parse(path, line_no, format!("bad timestamp {ts:?}")))?;
        let v = v.trim();
        let v = if v.is_empty() {
            None
        } else {
            Some(
                v.parse::<f64>()
                    .map_err(|_| Error::parse(path, line_no, format!("non-numeric speed {v:?}")))?,
            )
        };
        timestamps.push(ts);
        values.push(v);
    }
    let step = match nominal_step {
        Some(s) => s,
        None => infer_step(&timestamps).ok_or_else(|| {
            Error::parse(path, 1, "cannot infer sampling step from fewer than 2 records")
        })?,
    };
    RawSeries::new(station_id, timestamps, values, step).map_err(|e| match e {
        Error::InvalidInput(m) => Error::parse(path, 0, m),
        other => other,
    })
}

pub fn format_measurements(raw: &RawSeries) -> String {
    let mut out = String::with_capacity(32 * (raw.len() + 1));
    out.push_str(MEASUREMENT_HEADER);
    out.push('\n');
    for (ts, v) in raw.timestamps.iter().zip(&raw.values) {
        out.push_str(&format_timestamp(*ts));
        out.push(',');
        out.push_str(&fmt_opt(*v));
        out.push('\n');
    }
    out
}

pub fn write_measurements(path: &Path, raw: &RawSeries) -> Result<()> {
    fileio::write_atomic(path, format_measurements(raw).as_bytes())
}

/// Daily means on a contiguous calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct DailySeries {
    pub start_date: NaiveDate,
    /// Daily mean in m/s, `None` for a missing day.
    pub values: Vec<Option<f64>>,
    /// Fraction of expected raw samples that were valid on each day.
    pub coverage: Vec<f64>,
    /// Days whose value came from gap interpolation.
    pub filled: Vec<bool>,
}

impl DailySeries {
    /// A gap-free series with full coverage.
    pub fn from_values(start_date: NaiveDate, values: Vec<f64>) -> Self {
        let n = values.len();
        DailySeries {
            start_date,
            values: values.into_iter().map(Some).collect(),
            coverage: vec![1.0; n],
            filled: vec![false; n],
        }
    }

    pub fn from_options(start_date: NaiveDate, values: Vec<Option<f64>>) -> Self {
        let n = values.len();
        let coverage = values.iter().map(|v| if v.is_some() { 1.0 } else { 0.0 }).collect();
        DailySeries {
            start_date,
            values,
            coverage,
            filled: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn date(&self, i: usize) -> NaiveDate {
        self.start_date + Days::new(i as u64)
    }

    pub fn missing_mask(&self) -> Vec<bool> {
        self.values.iter().map(Option::is_none).collect()
    }

    pub fn n_missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn n_filled(&self) -> usize {
        self.filled.iter().filter(|&&f| f).count()
    }

    /// Fraction of days that carry a value.
    pub fn retained_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        (self.len() - self.n_missing()) as f64 / self.len() as f64
    }

    /// Present values in day order.
    pub fn present_values(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

/// Averages valid raw samples per UTC calendar day `[00:00, 24:00)`.
///
/// A day's coverage is its valid sample count over `86400 / nominal_step`; days
/// with coverage below `min_coverage` are missing.
pub fn aggregate_daily(raw: &RawSeries, min_coverage: f64) -> Result<DailySeries> {
    if !(min_coverage > 0.0 && min_coverage <= 1.0) {
        return Err(Error::invalid(format!(
            "min_coverage must lie in (0, 1], got {min_coverage}"
        )));
    }
    if raw.is_empty() {
        return Err(Error::invalid(format!("{}: empty raw series", raw.station_id)));
    }
    let step = i64::from(raw.nominal_step);
    if step <= 0 || SECONDS_PER_DAY % step != 0 {
        return Err(Error::invalid(format!(
            "{}: nominal step {} s does not divide a day",
            raw.station_id, raw.nominal_step
        )));
    }
    let expected = (SECONDS_PER_DAY / step) as f64;
    let first_day = raw.timestamps[0].div_euclid(SECONDS_PER_DAY);
    let last_day = raw.timestamps[raw.len() - 1].div_euclid(SECONDS_PER_DAY);
    let n_days = (last_day - first_day + 1) as usize;

    let mut sums = vec![0.0; n_days];
    let mut counts = vec![0usize; n_days];
    for (ts, v) in raw.timestamps.iter().zip(&raw.values) {
        if let Some(x) = v {
            let d = (ts.div_euclid(SECONDS_PER_DAY) - first_day) as usize;
            sums[d] += x;
            counts[d] += 1;
        }
    }

    let start_date = DateTime::from_timestamp(first_day * SECONDS_PER_DAY, 0)
        .ok_or_else(|| Error::invalid("timestamp out of calendar range"))?
        .date_naive();
    let mut values = Vec::with_capacity(n_days);
    let mut coverage = Vec::with_capacity(n_days);
    for (sum, count) in sums.into_iter().zip(counts) {
        let cov = (count as f64 / expected).min(1.0);
        coverage.push(cov);
        values.push((count > 0 && cov >= min_coverage).then(|| sum / count as f64));
    }
    Ok(DailySeries {
        start_date,
        values,
        coverage,
        filled: vec![false; n_days],
    })
}

/// Linearly interpolates runs of at most `max_gap_days` missing days that have
/// a value on both sides. Longer or unflanked runs are left missing.
pub fn fill_short_gaps(series: &DailySeries, max_gap_days: usize) -> DailySeries {
    let mut out = series.clone();
    let n = series.len();
    let mut i = 0;
    while i < n {
        if series.values[i].is_some() {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && series.values[i].is_none() {
            i += 1;
        }
        let run = i - start;
        if start == 0 || i == n || run > max_gap_days {
            continue;
        }
        let left = series.values[start - 1].unwrap_or_default();
        let right = series.values[i].unwrap_or_default();
        let span = (run + 1) as f64;
        for (j, d) in (start..i).enumerate() {
            let t = (j + 1) as f64 / span;
            out.values[d] = Some(left + (right - left) * t);
            out.filled[d] = true;
        }
    }
    out
}

pub fn format_daily_csv(series: &DailySeries) -> String {
    let mut out = String::with_capacity(40 * (series.len() + 1));
    out.push_str(DAILY_HEADER);
    out.push('\n');
    for i in 0..series.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            series.date(i).format("%Y-%m-%d"),
            fmt_opt(series.values[i]),
            series.coverage[i],
            series.filled[i]
        ));
    }
    out
}

pub fn write_daily_csv(path: &Path, series: &DailySeries) -> Result<()> {
    fileio::write_atomic(path, format_daily_csv(series).as_bytes())
}

pub fn read_daily_csv(path: &Path) -> Result<DailySeries> {
    let text = fileio::read_to_string(path)?;
    parse_daily_str(&text, path)
}

pub fn parse_daily_str(text: &str, path: &Path) -> Result<DailySeries> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l.trim());
    if header != Some(DAILY_HEADER) {
        return Err(Error::parse(path, 1, format!("expected header `{DAILY_HEADER}`")));
    }
    let mut start_date = None;
    let mut values = Vec::new();
    let mut coverage = Vec::new();
    let mut filled = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::parse(path, line_no, "expected 4 fields"));
        }
        let date = NaiveDate::parse_from_str(fields[0], "%Y-%m-%d")
            .map_err(|_| Error::parse(path, line_no, format!("bad date {:?}", fields[0])))?;
        let start = *start_date.get_or_insert(date);
        if date != start + Days::new(values.len() as u64) {
            return Err(Error::parse(path, line_no, "dates are not contiguous"));
        }
        values.push(if fields[1].is_empty() {
            None
        } else {
            Some(parse_f64(path, line_no, fields[1], "wind_mps")?)
        });
        coverage.push(parse_f64(path, line_no, fields[2], "coverage")?);
        filled.push(
            fields[3]
                .parse::<bool>()
                .map_err(|_| Error::parse(path, line_no, "filled must be true or false"))?,
        );
    }
    let start_date = start_date.ok_or_else(|| Error::parse(path, 2, "no daily rows"))?;
    Ok(DailySeries {
        start_date,
        values,
        coverage,
        filled,
    })
}

/// Per-station quality-control summary.
#[derive(Debug, Clone, PartialEq)]
pub struct StationQc {
    pub station_id: String,
    pub n_raw: usize,
    pub n_missing_raw: usize,
    pub n_negative: usize,
    pub days: usize,
    pub days_valid: usize,
    pub days_filled: usize,
    pub retained_fraction: f64,
    pub included: bool,
    pub note: String,
}

pub const QC_HEADER: &str = "station_id,n_raw,n_missing_raw,n_negative,days,days_valid,days_filled,retained_fraction,included,note";

impl StationQc {
    /// Summarises a gap-filled daily series against the retention threshold.
    pub fn assess(raw: &RawSeries, filled: &DailySeries, min_retained: f64) -> Self {
        let retained = filled.retained_fraction();
        let included = retained >= min_retained;
        StationQc {
            station_id: raw.station_id.clone(),
            n_raw: raw.len(),
            n_missing_raw: raw.n_missing(),
            n_negative: raw.n_negative,
            days: filled.len(),
            days_valid: filled.len() - filled.n_missing(),
            days_filled: filled.n_filled(),
            retained_fraction: retained,
            included,
            note: if included {
                String::new()
            } else {
                format!("retained {retained:.3} < {min_retained}")
            },
        }
    }

    pub fn rejected(station_id: &str, reason: &str) -> Self {
        StationQc {
            station_id: station_id.to_string(),
            n_raw: 0,
            n_missing_raw: 0,
            n_negative: 0,
            days: 0,
            days_valid: 0,
            days_filled: 0,
            retained_fraction: 0.0,
            included: false,
            note: reason.replace([',', '\n'], ";"),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.station_id,
            self.n_raw,
            self.n_missing_raw,
            self.n_negative,
            self.days,
            self.days_valid,
            self.days_filled,
            self.retained_fraction,
            self.included,
            self.note
        )
    }
}
