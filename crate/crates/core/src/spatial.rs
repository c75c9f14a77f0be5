//! k-nearest-neighbour mapping of station metrics, raster output, and the
//! permutation tests for spatial structure and covariate association.
//!
//! Distances are Euclidean in projected metres. Neighbours are ordered by
//! distance, with ties going to the earlier training point.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fileio;
use crate::stats;

pub const IDW_EPSILON: f64 = 1e-9;
pub const DEFAULT_K_CANDIDATES: [usize; 7] = [1, 2, 3, 5, 7, 10, 15];
pub const DEFAULT_CELLSIZE: f64 = 250.0;
pub const DEFAULT_MAX_CELLS: usize = 50_000_000;
pub const NODATA: f64 = -9999.0;
pub const MIN_SHUFFLES: usize = 99;
pub const MIN_SHUFFLE_STATIONS: usize = 10;
pub const COVARIATE_HEADER: &str = "metric,covariate,n,pearson_r,pearson_p,spearman_rho,spearman_p";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    #[default]
    Uniform,
    InverseDistance,
}

impl Weighting {
    pub fn as_str(self) -> &'static str {
        match self {
            Weighting::Uniform => "uniform",
            Weighting::InverseDistance => "inverse_distance",
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => Ok(Weighting::Uniform),
            "inverse_distance" | "idw" => Ok(Weighting::InverseDistance),
            other => Err(Error::invalid(format!("unknown weighting {other:?}"))),
        }
    }
}

fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    (dx * dx + dy * dy).sqrt()
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Weighted mean of the values of `neighbours`, taken in the given order.
fn combine(neighbours: &[(f64, usize)], values: &[f64], weighting: Weighting) -> f64 {
    match weighting {
        Weighting::Uniform => {
            let s: f64 = neighbours.iter().map(|&(_, i)| values[i]).sum();
            s / neighbours.len() as f64
        }
        Weighting::InverseDistance => {
            let (mut sw, mut swv) = (0.0, 0.0);
            for &(d, i) in neighbours {
                let w = 1.0 / (d + IDW_EPSILON);
                sw += w;
                swv += w * values[i];
            }
            swv / sw
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    points: Vec<(f64, f64)>,
    values: Vec<f64>,
    k: usize,
    weighting: Weighting,
}

fn check_points(points: &[(f64, f64)], values: &[f64]) -> Result<()> {
    if points.len() != values.len() {
        return Err(Error::invalid(format!(
            "{} points but {} values",
            points.len(),
            values.len()
        )));
    }
    if points.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::invalid("coordinates must be finite"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("training values must be finite"));
    }
    Ok(())
}

impl KnnModel {
    pub fn new(points: Vec<(f64, f64)>, values: Vec<f64>, k: usize, weighting: Weighting) -> Result<Self> {
        check_points(&points, &values)?;
        if k == 0 || k > points.len() {
            return Err(Error::invalid(format!(
                "k = {k} outside [1, {}]",
                points.len()
            )));
        }
        Ok(KnnModel {
            points,
            values,
            k,
            weighting,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weighting(&self) -> Weighting {
        self.weighting
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// The k nearest training points as `(distance, index)`, nearest first.
    pub fn neighbours(&self, query: (f64, f64)) -> Vec<(f64, usize)> {
        let mut d: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, &p)| (distance(query, p), i))
            .collect();
        if self.k < d.len() {
            d.select_nth_unstable_by(self.k - 1, by_distance);
            d.truncate(self.k);
        }
        d.sort_by(by_distance);
        d
    }

    pub fn predict(&self, query: (f64, f64)) -> f64 {
        combine(&self.neighbours(query), &self.values, self.weighting)
    }
}

pub fn knn_predict(model: &KnnModel, query: (f64, f64)) -> f64 {
    model.predict(query)
}

/// For every point, the other points ordered by distance (ties by index),
/// truncated to `max_k`. Shared by leave-one-out scoring of many labelings.
#[derive(Debug, Clone)]
pub struct LooNeighbours {
    lists: Vec<Vec<(f64, usize)>>,
}

impl LooNeighbours {
    pub fn new(points: &[(f64, f64)], max_k: usize) -> Result<Self> {
        let n = points.len();
        if max_k == 0 || max_k >= n {
            return Err(Error::invalid(format!(
                "leave-one-out k = {max_k} must lie in [1, {}]",
                n.saturating_sub(1)
            )));
        }
        let lists = (0..n)
            .map(|i| {
                let mut d: Vec<(f64, usize)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (distance(points[i], points[j]), j))
                    .collect();
                if max_k < d.len() {
                    d.select_nth_unstable_by(max_k - 1, by_distance);
                    d.truncate(max_k);
                }
                d.sort_by(by_distance);
                d
            })
            .collect();
        Ok(LooNeighbours { lists })
    }

    pub fn max_k(&self) -> usize {
        self.lists[0].len()
    }

    /// Leave-one-out predictions with the first `k` neighbours.
    pub fn predictions(&self, values: &[f64], k: usize, weighting: Weighting) -> Vec<f64> {
        self.lists
            .iter()
            .map(|l| combine(&l[..k], values, weighting))
            .collect()
    }

    pub fn mse(&self, values: &[f64], k: usize, weighting: Weighting) -> f64 {
        let pred = self.predictions(values, k, weighting);
        pred.iter().zip(values).map(|(p, v)| (p - v).powi(2)).sum::<f64>() / values.len() as f64
    }

    /// `1 − SS_res / SS_tot` of the leave-one-out predictions.
    pub fn r2(&self, values: &[f64], k: usize, weighting: Weighting) -> Result<f64> {
        let m = stats::mean(values);
        let ss_tot: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
        if !(ss_tot > 0.0) {
            return Err(Error::Degenerate("values have zero variance".into()));
        }
        let pred = self.predictions(values, k, weighting);
        let ss_res: f64 = pred.iter().zip(values).map(|(p, v)| (p - v).powi(2)).sum();
        Ok(1.0 - ss_res / ss_tot)
    }
}

/// The candidate with the smallest leave-one-out mean squared error; ties go
/// to the smaller k.
pub fn select_k(points: &[(f64, f64)], values: &[f64], candidates: &[usize], weighting: Weighting) -> Result<usize> {
    check_points(points, values)?;
    if candidates.is_empty() {
        return Err(Error::invalid("no k candidates given"));
    }
    let n = points.len();
    if let Some(&bad) = candidates.iter().find(|&&k| k == 0 || k >= n) {
        return Err(Error::invalid(format!("k candidate {bad} outside [1, {}]", n.saturating_sub(1))));
    }
    let max_k = *candidates.iter().max().unwrap();
    let loo = LooNeighbours::new(points, max_k)?;
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best = (f64::INFINITY, sorted[0]);
    for k in sorted {
        let mse = loo.mse(values, k, weighting);
        if mse < best.0 {
            best = (mse, k);
        }
    }
    Ok(best.1)
}

/// Default candidates that are usable with `n` stations.
pub fn feasible_candidates(candidates: &[usize], n: usize) -> Vec<usize> {
    candidates.iter().copied().filter(|&k| k >= 1 && k < n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Bounds {
    /// Smallest box around `points`, widened by `margin` on every side.
    pub fn around(points: &[(f64, f64)], margin: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("no points to bound"));
        }
        let mut b = Bounds {
            xmin: f64::INFINITY,
            ymin: f64::INFINITY,
            xmax: f64::NEG_INFINITY,
            ymax: f64::NEG_INFINITY,
        };
        for &(x, y) in points {
            b.xmin = b.xmin.min(x);
            b.ymin = b.ymin.min(y);
            b.xmax = b.xmax.max(x);
            b.ymax = b.ymax.max(y);
        }
        b.xmin -= margin;
        b.ymin -= margin;
        b.xmax += margin;
        b.ymax += margin;
        Ok(b)
    }

    pub fn contains(&self, p: (f64, f64)) -> bool {
        p.0 >= self.xmin && p.0 <= self.xmax && p.1 >= self.ymin && p.1 <= self.ymax
    }
}

/// A north-up raster; `values` are row-major with the northernmost row first.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub xll: f64,
    pub yll: f64,
    pub cellsize: f64,
    pub ncols: usize,
    pub nrows: usize,
    pub values: Vec<f64>,
    pub nodata: f64,
}

impl GridMap {
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.xll + (col as f64 + 0.5) * self.cellsize,
            self.yll + ((self.nrows - row) as f64 - 0.5) * self.cellsize,
        )
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    /// ESRI ASCII grid text. Values use shortest round-trip formatting.
    pub fn to_ascii_grid(&self) -> String {
        let mut out = String::with_capacity(self.values.len() * 20 + 128);
        out.push_str(&format!("ncols {}\n", self.ncols));
        out.push_str(&format!("nrows {}\n", self.nrows));
        out.push_str(&format!("xllcorner {}\n", self.xll));
        out.push_str(&format!("yllcorner {}\n", self.yll));
        out.push_str(&format!("cellsize {}\n", self.cellsize));
        out.push_str(&format!("NODATA_value {}\n", self.nodata));
        for row in self.values.chunks(self.ncols) {
            let line: Vec<String> = row
                .iter()
                .map(|v| if v.is_nan() { self.nodata.to_string() } else { v.to_string() })
                .collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn write_ascii_grid(&self, path: &Path) -> Result<()> {
        fileio::write_atomic(path, self.to_ascii_grid().as_bytes())
    }

    pub fn parse_ascii_grid(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let mut header = |key: &str| -> Result<f64> {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, 0, format!("missing header `{key}`")))?;
            let mut parts = line.split_whitespace();
            let k = parts.next().unwrap_or("");
            if !k.eq_ignore_ascii_case(key) {
                return Err(Error::parse(path, i + 1, format!("expected `{key}`, found `{k}`")));
            }
            parts
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| Error::parse(path, i + 1, format!("bad value for `{key}`")))
        };
        let ncols = header("ncols")?;
        let nrows = header("nrows")?;
        let xll = header("xllcorner")?;
        let yll = header("yllcorner")?;
        let cellsize = header("cellsize")?;
        let nodata = header("NODATA_value")?;
        if !(ncols >= 1.0 && nrows >= 1.0 && ncols.fract() == 0.0 && nrows.fract() == 0.0) {
            return Err(Error::parse(path, 1, "ncols and nrows must be positive integers"));
        }
        let (ncols, nrows) = (ncols as usize, nrows as usize);
        let mut values = Vec::with_capacity(ncols * nrows);
        let mut seen_rows = 0;
        for (i, line) in lines {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, i + 1, "bad cell value"))?;
            if row.len() != ncols {
                return Err(Error::parse(path, i + 1, format!("expected {ncols} values, found {}", row.len())));
            }
            values.extend(row);
            seen_rows += 1;
        }
        if seen_rows != nrows {
            return Err(Error::parse(path, 0, format!("expected {nrows} rows, found {seen_rows}")));
        }
        Ok(GridMap {
            xll,
            yll,
            cellsize,
            ncols,
            nrows,
            values,
            nodata,
        })
    }

    pub fn read_ascii_grid(path: &Path) -> Result<Self> {
        Self::parse_ascii_grid(&fileio::read_to_string(path)?, path)
    }
}

/// Predicts at every cell centre of a raster covering `bounds`. The raster is
/// snapped outward to multiples of `cellsize`.
pub fn make_grid_map(model: &KnnModel, bounds: &Bounds, cellsize: f64, max_cells: usize) -> Result<GridMap> {
    if !(cellsize > 0.0 && cellsize.is_finite()) {
        return Err(Error::invalid(format!("cellsize must be positive, got {cellsize}")));
    }
    if !(bounds.xmax >= bounds.xmin && bounds.ymax >= bounds.ymin) {
        return Err(Error::invalid("bounds are inverted"));
    }
    if let Some(p) = model.points().iter().find(|&&p| !bounds.contains(p)) {
        return Err(Error::invalid(format!(
            "bounds do not cover the station at ({}, {})",
            p.0, p.1
        )));
    }
    let x0 = (bounds.xmin / cellsize).floor();
    let y0 = (bounds.ymin / cellsize).floor();
    let ncols = (((bounds.xmax / cellsize).ceil() - x0) as usize).max(1);
    let nrows = (((bounds.ymax / cellsize).ceil() - y0) as usize).max(1);
    let cells = ncols.checked_mul(nrows).unwrap_or(usize::MAX);
    if cells > max_cells {
        return Err(Error::invalid(format!(
            "grid of {ncols} x {nrows} = {cells} cells exceeds the cap of {max_cells}; use a coarser cellsize"
        )));
    }
    let mut map = GridMap {
        xll: x0 * cellsize,
        yll: y0 * cellsize,
        cellsize,
        ncols,
        nrows,
        values: Vec::new(),
        nodata: NODATA,
    };
    let rows: Vec<Vec<f64>> = (0..nrows)
        .into_par_iter()
        .map(|r| (0..ncols).map(|c| model.predict(map.cell_center(r, c))).collect())
        .collect();
    map.values = rows.concat();
    Ok(map)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleReport {
    pub observed_skill: f64,
    pub null_skills: Vec<f64>,
    pub n_shuffles: usize,
    pub seed: u64,
    pub p_value: f64,
    pub k: usize,
    pub weighting: Weighting,
}

impl ShuffleReport {
    /// Plain-text `key = value` listing of every field.
    pub fn to_text(&self) -> String {
        let nulls: Vec<String> = self.null_skills.iter().map(f64::to_string).collect();
        format!(
            "observed_skill = {}\nnull_skills = [{}]\nn_shuffles = {}\nseed = {}\np_value = {}\nk = {}\nweighting = {}\n",
            self.observed_skill,
            nulls.join(", "),
            self.n_shuffles,
            self.seed,
            self.p_value,
            self.k,
            self.weighting
        )
    }

    pub fn parse_text(text: &str, path: &Path) -> Result<Self> {
        let mut get = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `key = value`"))?;
            get.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let field = |key: &str| {
            get.get(key)
                .cloned()
                .ok_or_else(|| Error::parse(path, 0, format!("missing field `{key}`")))
        };
        fn num<T: FromStr>(path: &Path, (line, v): (usize, String), key: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::parse(path, line, format!("bad value for `{key}`")))
        }
        let (line, nulls) = field("null_skills")?;
        let inner = nulls
            .strip_prefix('[')
            .and_then(|s| s.strip_suffix(']'))
            .ok_or_else(|| Error::parse(path, line, "null_skills must be a [list]"))?;
        let null_skills = if inner.trim().is_empty() {
            Vec::new()
        } else {
            inner
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, line, "bad null skill"))?
        };
        Ok(ShuffleReport {
            observed_skill: num(path, field("observed_skill")?, "observed_skill")?,
            null_skills,
            n_shuffles: num(path, field("n_shuffles")?, "n_shuffles")?,
            seed: num(path, field("seed")?, "seed")?,
            p_value: num(path, field("p_value")?, "p_value")?,
            k: num(path, field("k")?, "k")?,
            weighting: field("weighting")?.1.parse()?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fileio::write_atomic(path, self.to_text().as_bytes())
    }
}

/// Permutation test of spatial structure: leave-one-out R² of the true
/// station labeling against `n_shuffles` random relabelings. Replicate `r`
/// shuffles with its own generator seeded by `seed + r`.
pub fn shuffle_test(
    points: &[(f64, f64)],
    values: &[f64],
    k: usize,
    weighting: Weighting,
    n_shuffles: usize,
    seed: u64,
) -> Result<ShuffleReport> {
    check_points(points, values)?;
    if points.len() < MIN_SHUFFLE_STATIONS {
        return Err(Error::invalid(format!(
            "shuffle test needs at least {MIN_SHUFFLE_STATIONS} stations, got {}",
            points.len()
        )));
    }
    if n_shuffles < MIN_SHUFFLES {
        return Err(Error::invalid(format!(
            "shuffle test needs at least {MIN_SHUFFLES} shuffles, got {n_shuffles}"
        )));
    }
    let loo = LooNeighbours::new(points, k)?;
    let observed_skill = loo.r2(values, k, weighting)?;
    let null_skills: Vec<f64> = (0..n_shuffles)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
            let mut v = values.to_vec();
            v.shuffle(&mut rng);
            loo.r2(&v, k, weighting)
        })
        .collect::<Result<_>>()?;
    let exceed = null_skills.iter().filter(|&&s| s >= observed_skill).count();
    Ok(ShuffleReport {
        observed_skill,
        p_value: (1 + exceed) as f64 / (1 + n_shuffles) as f64,
        null_skills,
        n_shuffles,
        seed,
        k,
        weighting,
    })
}

/// Leave-one-out R² of shuffled labelings when each one gets its own k from
/// `candidates`, as an independent mapping run of the shuffled stations
/// would. Replicate `r` uses the same permutation as in [`shuffle_test`].
/// Returns `(k, R²)` per replicate.
pub fn reselected_null_skills(
    points: &[(f64, f64)],
    values: &[f64],
    candidates: &[usize],
    weighting: Weighting,
    n_shuffles: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    check_points(points, values)?;
    let n = points.len();
    if candidates.is_empty() || candidates.iter().any(|&k| k == 0 || k >= n) {
        return Err(Error::invalid(format!("k candidates must be non-empty and lie in [1, {}]", n.saturating_sub(1))));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let loo = LooNeighbours::new(points, *sorted.last().unwrap())?;
    (0..n_shuffles)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(r as u64));
            let mut v = values.to_vec();
            v.shuffle(&mut rng);
            let mut best = (f64::INFINITY, sorted[0]);
            for &k in &sorted {
                let mse = loo.mse(&v, k, weighting);
                if mse < best.0 {
                    best = (mse, k);
                }
            }
            Ok((best.1, loo.r2(&v, best.1, weighting)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationReport {
    pub n: usize,
    pub pearson_r: f64,
    pub pearson_p: f64,
    pub spearman_rho: f64,
    pub spearman_p: f64,
    pub n_permutations: usize,
    pub seed: u64,
}

pub const DEFAULT_PERMUTATIONS: usize = 9999;

/// Pearson and Spearman correlation with two-sided permutation p-values,
/// `(1 + #{|r*| ≥ |r|}) / (1 + n_permutations)`.
pub fn covariate_correlation(metric: &[f64], covariate: &[f64], n_permutations: usize, seed: u64) -> Result<CorrelationReport> {
    if metric.len() != covariate.len() {
        return Err(Error::invalid("metric and covariate lengths differ"));
    }
    if metric.len() < 3 {
        return Err(Error::invalid("correlation needs at least 3 pairs"));
    }
    if metric.iter().chain(covariate).any(|v| !v.is_finite()) {
        return Err(Error::invalid("correlation inputs must be finite"));
    }
    if n_permutations == 0 {
        return Err(Error::invalid("at least one permutation is required"));
    }
    let zero_var = || Error::Degenerate("correlation input has zero variance".into());
    let r = stats::pearson(metric, covariate).ok_or_else(zero_var)?;
    let (rm, rc) = (stats::average_ranks(metric), stats::average_ranks(covariate));
    let rho = stats::pearson(&rm, &rc).ok_or_else(zero_var)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut cov, mut rcov) = (covariate.to_vec(), rc.clone());
    let mut idx: Vec<usize> = (0..covariate.len()).collect();
    let (mut hit_r, mut hit_rho) = (0usize, 0usize);
    let tol = 1e-12;
    for _ in 0..n_permutations {
        idx.shuffle(&mut rng);
        for (j, &i) in idx.iter().enumerate() {
            cov[j] = covariate[i];
            rcov[j] = rc[i];
        }
        if stats::pearson(metric, &cov).unwrap_or(0.0).abs() >= r.abs() - tol {
            hit_r += 1;
        }
        if stats::pearson(&rm, &rcov).unwrap_or(0.0).abs() >= rho.abs() - tol {
            hit_rho += 1;
        }
    }
    let p = |hits: usize| (1 + hits) as f64 / (1 + n_permutations) as f64;
    Ok(CorrelationReport {
        n: metric.len(),
        pearson_r: r,
        pearson_p: p(hit_r),
        spearman_rho: rho,
        spearman_p: p(hit_rho),
        n_permutations,
        seed,
    })
}

pub fn format_correlation_row(metric: &str, covariate: &str, c: &CorrelationReport) -> String {
    format!(
        "{metric},{covariate},{},{},{},{},{}\n",
        c.n, c.pearson_r, c.pearson_p, c.spearman_rho, c.spearman_p
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, span: f64) -> Vec<(f64, f64)> {
        (0..n)
            .map(|_| (rng.random::<f64>() * span, rng.random::<f64>() * span))
            .collect()
    }

    /// Brute-force oracle: full sort by (distance, index), mean of the first k.
    fn oracle(points: &[(f64, f64)], values: &[f64], k: usize, w: Weighting, q: (f64, f64)) -> f64 {
        let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, &p)| (distance(q, p), i)).collect();
        all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        combine(&all[..k], values, w)
    }

    fn smooth_field(p: (f64, f64)) -> f64 {
        (p.0 / 20_000.0).sin() + (p.1 / 30_000.0).cos()
    }

    #[test]
    fn trivial_cases() {
        let pts = vec![(0.0, 0.0), (1.0, 0.0), (0.0, 2.0), (5.0, 5.0)];
        let vals = vec![1.0, 2.0, 3.0, 10.0];
        let m = KnnModel::new(pts.clone(), vals.clone(), 1, Weighting::Uniform).unwrap();
        for (p, v) in pts.iter().zip(&vals) {
            assert_eq!(m.predict(*p), *v);
        }
        let m = KnnModel::new(pts.clone(), vals.clone(), 4, Weighting::Uniform).unwrap();
        assert_eq!(m.predict((100.0, -3.0)), 4.0);
        let m = KnnModel::new(pts.clone(), vals.clone(), 1, Weighting::InverseDistance).unwrap();
        assert_eq!(m.predict((0.0, 0.0)), 1.0);
        assert!(KnnModel::new(pts.clone(), vals.clone(), 5, Weighting::Uniform).is_err());
        assert!(KnnModel::new(pts, vals, 0, Weighting::Uniform).is_err());
    }

    #[test]
    fn five_point_fixture() {
        let pts = vec![(0.0, 0.0), (3.0, 4.0), (-1.0, 1.0), (6.0, 0.0), (2.0, 2.0)];
        let vals = vec![10.0, 20.0, 30.0, 40.0, 50.0];
        let m = KnnModel::new(pts.clone(), vals.clone(), 3, Weighting::Uniform).unwrap();
        // from (1, 1): distances 1.414 (0), 3.606 (1), 2 (2), 5.099 (3), 1.414 (4)
        assert_eq!(m.predict((1.0, 1.0)), (10.0 + 50.0 + 30.0) / 3.0);
        assert_eq!(m.predict((1.0, 1.0)), oracle(&pts, &vals, 3, Weighting::Uniform, (1.0, 1.0)));
    }

    #[test]
    fn ties_go_to_earlier_points() {
        let pts = vec![(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];
        let vals = vec![1.0, 2.0, 3.0, 4.0];
        let m = KnnModel::new(pts, vals, 2, Weighting::Uniform).unwrap();
        let n = m.neighbours((0.0, 0.0));
        assert_eq!(n.iter().map(|x| x.1).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(m.predict((0.0, 0.0)), 1.5);
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.random_range(5..=50);
            let pts = random_points(&mut rng, n, 1000.0);
            let vals: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let k = rng.random_range(1..=n);
            for w in [Weighting::Uniform, Weighting::InverseDistance] {
                let m = KnnModel::new(pts.clone(), vals.clone(), k, w).unwrap();
                for _ in 0..5 {
                    let q = (rng.random::<f64>() * 1000.0, rng.random::<f64>() * 1000.0);
                    assert_eq!(m.predict(q).to_bits(), oracle(&pts, &vals, k, w, q).to_bits());
                }
            }
        }
    }

    #[test]
    fn select_k_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = random_points(&mut rng, 120, 100_000.0);
        let noise = |rng: &mut ChaCha8Rng| (rng.random::<f64>() - 0.5) * 0.6;
        let vals: Vec<f64> = pts.iter().map(|&p| smooth_field(p) + noise(&mut rng)).collect();
        let k = select_k(&pts, &vals, &DEFAULT_K_CANDIDATES, Weighting::Uniform).unwrap();
        assert!(k > 1);
        assert_eq!(select_k(&pts, &vals, &[5], Weighting::Uniform).unwrap(), 5);
        assert!(select_k(&pts, &vals, &[], Weighting::Uniform).is_err());
        assert!(select_k(&pts, &vals, &[120], Weighting::Uniform).is_err());
        // identical MSE for all k when every value is equal: smallest wins
        let flat = vec![2.0; 120];
        assert_eq!(select_k(&pts, &flat, &[7, 3, 10], Weighting::Uniform).unwrap(), 3);
    }

    #[test]
    fn grid_dimensions_and_constant_field() {
        let pts = vec![(1000.0, 1000.0), (9000.0, 9000.0), (5000.0, 2000.0)];
        let m = KnnModel::new(pts, vec![4.5; 3], 2, Weighting::InverseDistance).unwrap();
        let b = Bounds {
            xmin: 0.0,
            ymin: 0.0,
            xmax: 10_000.0,
            ymax: 10_000.0,
        };
        let g = make_grid_map(&m, &b, 250.0, DEFAULT_MAX_CELLS).unwrap();
        assert_eq!((g.ncols, g.nrows), (40, 40));
        assert!(g.values.iter().all(|&v| (v - 4.5).abs() < 1e-12));
        assert_eq!(g.cell_center(0, 0), (125.0, 9875.0));
        assert!(make_grid_map(&m, &b, 1.0, 1000).unwrap_err().to_string().contains("coarser"));
        let small = Bounds { xmax: 2000.0, ..b };
        assert!(make_grid_map(&m, &small, 250.0, DEFAULT_MAX_CELLS).is_err());
        let odd = Bounds { xmin: 10.0, ..b };
        assert_eq!(make_grid_map(&m, &odd, 250.0, DEFAULT_MAX_CELLS).unwrap().xll, 0.0);
    }

    #[test]
    fn two_cluster_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pts = Vec::new();
        let mut vals = Vec::new();
        for i in 0..40 {
            let east = i % 2 == 1;
            let x = rng.random::<f64>() * 20_000.0 + if east { 30_000.0 } else { 0.0 };
            pts.push((x, rng.random::<f64>() * 20_000.0));
            vals.push(if east { 2.0 } else { 0.5 } + rng.random::<f64>() * 0.1);
        }
        let m = KnnModel::new(pts.clone(), vals, 5, Weighting::Uniform).unwrap();
        let g = make_grid_map(&m, &Bounds::around(&pts, 1000.0).unwrap(), 1000.0, DEFAULT_MAX_CELLS).unwrap();
        let half = g.ncols / 2;
        let (mut west, mut east) = (Vec::new(), Vec::new());
        for r in 0..g.nrows {
            for c in 0..g.ncols {
                if c < half { west.push(g.get(r, c)) } else { east.push(g.get(r, c)) }
            }
        }
        assert!(stats::mean(&west) < stats::mean(&east));
    }

    #[test]
    fn ascii_grid_round_trip() {
        let g = GridMap {
            xll: 2_480_000.5,
            yll: 1_070_000.0,
            cellsize: 250.0,
            ncols: 3,
            nrows: 2,
            values: vec![0.1, 1.0 / 3.0, -2.5e-17, NODATA, 7.0, f64::MAX],
            nodata: NODATA,
        };
        let text = g.to_ascii_grid();
        assert!(text.starts_with("ncols 3\nnrows 2\nxllcorner 2480000.5\n"));
        assert!(text.contains("NODATA_value -9999\n"));
        let back = GridMap::parse_ascii_grid(&text, Path::new("g.asc")).unwrap();
        assert_eq!(back, g);
        assert!(GridMap::parse_ascii_grid("ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1\n", Path::new("x")).is_err());
    }

    #[test]
    fn shuffle_test_detects_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(&mut rng, 80, 100_000.0);
        let vals: Vec<f64> = pts.iter().map(|&p| smooth_field(p)).collect();
        let rep = shuffle_test(&pts, &vals, 5, Weighting::Uniform, 199, 42).unwrap();
        assert!(rep.p_value <= 0.01);
        assert_eq!(rep.null_skills.len(), 199);
        assert_eq!(rep, shuffle_test(&pts, &vals, 5, Weighting::Uniform, 199, 42).unwrap());

        let noise: Vec<f64> = (0..80).map(|_| rng.random::<f64>()).collect();
        let rep = shuffle_test(&pts, &noise, 5, Weighting::Uniform, 99, 1).unwrap();
        assert!((0.0..=1.0).contains(&rep.p_value));

        assert!(shuffle_test(&pts[..9], &vals[..9], 3, Weighting::Uniform, 99, 1).is_err());
        assert!(shuffle_test(&pts, &vals, 3, Weighting::Uniform, 98, 1).is_err());
    }

    #[test]
    fn null_skill_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts = random_points(&mut rng, 100, 100_000.0);
        let vals: Vec<f64> = pts.iter().map(|&p| smooth_field(p)).collect();
        // a shuffled labeling has no structure: LOO MSE is about var (1 + 1/k)
        let fixed = shuffle_test(&pts, &vals, 3, Weighting::Uniform, 199, 4).unwrap();
        let m = stats::median(&fixed.null_skills);
        assert!((m + 1.0 / 3.0).abs() < 0.1, "median {m}");
        let re = reselected_null_skills(&pts, &vals, &DEFAULT_K_CANDIDATES, Weighting::Uniform, 199, 4).unwrap();
        let skills: Vec<f64> = re.iter().map(|x| x.1).collect();
        assert!(stats::median(&skills).abs() < 0.15, "median {}", stats::median(&skills));
        assert!(re.iter().all(|x| DEFAULT_K_CANDIDATES.contains(&x.0)));
    }

    #[test]
    fn shuffle_report_round_trip() {
        let r = ShuffleReport {
            observed_skill: 0.731,
            null_skills: vec![-0.2, 0.013, 1.0 / 7.0],
            n_shuffles: 3,
            seed: 99,
            p_value: 0.25,
            k: 5,
            weighting: Weighting::InverseDistance,
        };
        assert_eq!(ShuffleReport::parse_text(&r.to_text(), Path::new("r.txt")).unwrap(), r);
    }

    #[test]
    fn correlation_extremes_and_direction() {
        let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin() + i as f64 * 0.1).collect();
        let c = covariate_correlation(&x, &x, 999, 1).unwrap();
        assert!((c.pearson_r - 1.0).abs() < 1e-12 && (c.spearman_rho - 1.0).abs() < 1e-12);
        assert!(c.pearson_p <= 0.002);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let c = covariate_correlation(&x, &neg, 999, 1).unwrap();
        assert!((c.pearson_r + 1.0).abs() < 1e-12 && (c.spearman_rho + 1.0).abs() < 1e-12);
        assert!(covariate_correlation(&x, &vec![1.0; 30], 99, 1).is_err());
        assert!(covariate_correlation(&x[..2], &x[..2], 99, 1).is_err());
        assert_eq!(covariate_correlation(&x, &neg, 999, 7).unwrap(), covariate_correlation(&x, &neg, 999, 7).unwrap());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn translation_invariant(seed in 0u64..10_000, dx in -1e5f64..1e5, dy in -1e5f64..1e5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = rng.random_range(5..40);
                let pts = random_points(&mut rng, n, 50_000.0);
                let vals: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let k = rng.random_range(1..=n);
                let shifted: Vec<(f64, f64)> = pts.iter().map(|p| (p.0 + dx, p.1 + dy)).collect();
                for w in [Weighting::Uniform, Weighting::InverseDistance] {
                    let a = KnnModel::new(pts.clone(), vals.clone(), k, w).unwrap();
                    let b = KnnModel::new(shifted.clone(), vals.clone(), k, w).unwrap();
                    let q = (rng.random::<f64>() * 50_000.0, rng.random::<f64>() * 50_000.0);
                    prop_assert!((a.predict(q) - b.predict((q.0 + dx, q.1 + dy))).abs() <= 1e-12);
                }
            }

            #[test]
            fn true_labeling_beats_null_median(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let pts = random_points(&mut rng, 40, 100_000.0);
                let vals: Vec<f64> = pts.iter().map(|&p| smooth_field(p) + 0.2 * rng.random::<f64>()).collect();
                let rep = shuffle_test(&pts, &vals, 3, Weighting::Uniform, 99, seed).unwrap();
                prop_assert!(rep.observed_skill >= stats::median(&rep.null_skills));
            }

            #[test]
            fn grid_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 12), xll in -1e6f64..1e6) {
                let g = GridMap { xll, yll: 0.5, cellsize: 250.0, ncols: 4, nrows: 3, values: vals, nodata: NODATA };
                let back = GridMap::parse_ascii_grid(&g.to_ascii_grid(), Path::new("p")).unwrap();
                prop_assert_eq!(back, g);
            }
        }
    }
}
