//! Seasonal–trend decomposition by loess (STL) for daily series with gaps.
//!
//! The decomposition is additive, `value = trend + seasonal + remainder`. In the
//! default periodic mode the seasonal component is the calendar mean: every
//! position `i` belongs to phase `i mod period`, and after the trend has been
//! estimated each phase's seasonal value is the mean of its detrended values.
//! Missing days get zero weight in every smoother, and their remainder stays
//! missing.

use std::path::Path;

use chrono::{Days, NaiveDate};

use crate::error::{Error, Result};
use crate::fileio::{self, fmt_opt};
use crate::ingest::DailySeries;
use crate::stats;

pub const DECOMPOSITION_HEADER: &str = "date,trend,seasonal,remainder";

/// Local polynomial regression with tricube neighbourhood weights.
///
/// For each evaluation point the `window` nearest abscissae form the
/// neighbourhood; their tricube weights are multiplied by `weights`. When
/// `window` exceeds the number of points the neighbourhood radius is widened
/// proportionally. A local fit that is numerically singular drops to the next
/// lower degree.
pub fn loess_smooth(
    xs: &[f64],
    ys: &[f64],
    weights: &[f64],
    window: usize,
    degree: usize,
    eval_at: &[f64],
) -> Result<Vec<f64>> {
    loess_with_fallback(xs, ys, weights, None, window, degree, eval_at)
}

/// As [`loess_smooth`], but an evaluation point whose neighbourhood has no
/// weight is refitted with `fallback` weights.
fn loess_with_fallback(
    xs: &[f64],
    ys: &[f64],
    weights: &[f64],
    fallback: Option<&[f64]>,
    window: usize,
    degree: usize,
    eval_at: &[f64],
) -> Result<Vec<f64>> {
    let n = xs.len();
    if n == 0 || ys.len() != n || weights.len() != n {
        return Err(Error::invalid("loess inputs must be non-empty and of equal length"));
    }
    if !(1..=2).contains(&degree) {
        return Err(Error::invalid(format!("loess degree must be 1 or 2, got {degree}")));
    }
    if window < degree + 1 {
        return Err(Error::invalid(format!(
            "loess window {window} too small for degree {degree}"
        )));
    }
    if xs.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::invalid("loess abscissae must be strictly increasing"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid("loess weights must be non-negative"));
    }
    let span = xs[n - 1] - xs[0];
    let spacing = if n > 1 { span / (n - 1) as f64 } else { 1.0 };
    let q = window.min(n);
    let extra = if window > n {
        (window - n) as f64 * spacing / 2.0
    } else {
        0.0
    };

    let mut work = LoessWork::default();
    eval_at
        .iter()
        .map(|&x| {
            // grow the neighbourhood outward from x, taking the closer side each time
            let mut lo = xs.partition_point(|&v| v < x);
            let mut hi = lo;
            while hi - lo < q {
                let take_left = if lo == 0 {
                    false
                } else if hi == n {
                    true
                } else {
                    x - xs[lo - 1] <= xs[hi] - x
                };
                if take_left {
                    lo -= 1;
                } else {
                    hi += 1;
                }
            }
            let h = (x - xs[lo]).max(xs[hi - 1] - x).max(0.0) + extra;
            work.fit(&xs[lo..hi], &ys[lo..hi], &weights[lo..hi], x, h, degree, span)
                .or_else(|| fallback.and_then(|fw| work.fit(&xs[lo..hi], &ys[lo..hi], &fw[lo..hi], x, h, degree, span)))
                .ok_or_else(|| Error::Numerical(format!("loess: all weights zero in the neighbourhood of x = {x}")))
        })
        .collect()
}

#[derive(Default)]
struct LoessWork {
    w: Vec<f64>,
}

impl LoessWork {
    #[allow(clippy::too_many_arguments)]
    fn fit(&mut self, xs: &[f64], ys: &[f64], rw: &[f64], x: f64, h: f64, degree: usize, span: f64) -> Option<f64> {
        self.w.clear();
        let (h1, h9) = (0.001 * h, 0.999 * h);
        for (&xj, &r) in xs.iter().zip(rw) {
            let d = (xj - x).abs();
            let t = if d <= h1 {
                1.0
            } else if d <= h9 {
                let u = d / h;
                let v = 1.0 - u * u * u;
                v * v * v
            } else {
                0.0
            };
            self.w.push(t * r);
        }
        let sw: f64 = self.w.iter().sum();
        if !(sw > 0.0) {
            return None;
        }
        // weighted moments about the evaluation point
        let mut m = [0.0f64; 5];
        let mut my = [0.0f64; 3];
        for ((&xj, &yj), &wj) in xs.iter().zip(ys).zip(&self.w) {
            if wj == 0.0 {
                continue;
            }
            let t = xj - x;
            let mut p = wj;
            for k in 0..5 {
                m[k] += p;
                if k < 3 {
                    my[k] += p * yj;
                }
                p *= t;
            }
        }
        let mean_y = my[0] / m[0];
        let mean_t = m[1] / m[0];
        let var_t = m[2] / m[0] - mean_t * mean_t;
        let tiny = (0.001 * span).powi(2);

        if degree == 2 && var_t > tiny {
            // solve the 3x3 normal equations for the intercept (value at x)
            let a = [[m[0], m[1], m[2]], [m[1], m[2], m[3]], [m[2], m[3], m[4]]];
            if let Some(c) = solve3(a, my) {
                if c.is_finite() {
                    return Some(c);
                }
            }
        }
        if var_t > tiny {
            let cov = my[1] / m[0] - mean_t * mean_y;
            let slope = cov / var_t;
            return Some(mean_y - slope * mean_t);
        }
        Some(mean_y)
    }
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<f64> {
    let det = |m: [[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let d = det(a);
    let scale = a[0][0] * a[1][1] * a[2][2];
    if d.abs() <= 1e-12 * scale.abs() {
        return None;
    }
    let mut a0 = a;
    for r in 0..3 {
        a0[r][0] = b[r];
    }
    Some(det(a0) / d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeasonalMode {
    /// Seasonal equals the per-phase (calendar) mean of the detrended series.
    Periodic,
    /// Classic STL cycle-subseries loess with the given odd window.
    Windowed(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StlParams {
    pub period: usize,
    pub seasonal_mode: SeasonalMode,
    /// Odd trend loess window, in days.
    pub trend_window: usize,
    /// Odd low-pass loess window (windowed mode only).
    pub low_pass_window: usize,
    pub loess_degree: usize,
    pub inner_iterations: usize,
    pub robust_iterations: usize,
    /// Series with a larger fraction of missing days are rejected.
    pub max_missing_fraction: f64,
}

fn next_odd(x: f64) -> usize {
    let n = x.ceil() as usize;
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

/// Default trend window for a period and seasonal span.
pub fn default_trend_window(period: usize, seasonal_span: usize) -> usize {
    let p = period as f64;
    next_odd(1.5 * p / (1.0 - 1.5 / seasonal_span as f64)).max(3)
}

impl StlParams {
    /// Periodic-mode defaults for `period`. The trend window is derived for a
    /// series of `n` days, since periodic mode uses a seasonal span of `10n + 1`.
    pub fn periodic(period: usize, n: usize) -> Self {
        StlParams {
            period,
            seasonal_mode: SeasonalMode::Periodic,
            trend_window: default_trend_window(period, 10 * n + 1),
            low_pass_window: next_odd(period as f64).max(3),
            loess_degree: 1,
            inner_iterations: 2,
            robust_iterations: 1,
            max_missing_fraction: 0.3,
        }
    }

    pub fn windowed(period: usize, seasonal_window: usize) -> Self {
        let sw = if seasonal_window % 2 == 0 {
            seasonal_window + 1
        } else {
            seasonal_window
        };
        StlParams {
            seasonal_mode: SeasonalMode::Windowed(sw),
            trend_window: default_trend_window(period, sw),
            ..StlParams::periodic(period, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(Error::invalid("STL period must be at least 2"));
        }
        if self.trend_window < 3 || self.trend_window % 2 == 0 {
            return Err(Error::invalid(format!(
                "trend window must be odd and >= 3, got {}",
                self.trend_window
            )));
        }
        if self.low_pass_window < 3 || self.low_pass_window % 2 == 0 {
            return Err(Error::invalid("low-pass window must be odd and >= 3"));
        }
        if let SeasonalMode::Windowed(w) = self.seasonal_mode {
            if w < 3 || w % 2 == 0 {
                return Err(Error::invalid("seasonal window must be odd and >= 3"));
            }
        }
        if !(1..=2).contains(&self.loess_degree) {
            return Err(Error::invalid("loess degree must be 1 or 2"));
        }
        if !(0.0..=1.0).contains(&self.max_missing_fraction) {
            return Err(Error::invalid("max_missing_fraction must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Additive decomposition of a daily series.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub start_date: NaiveDate,
    pub trend: Vec<f64>,
    pub seasonal: Vec<f64>,
    /// `None` on days missing in the input.
    pub remainder: Vec<Option<f64>>,
    pub period: usize,
}

impl Decomposition {
    pub fn len(&self) -> usize {
        self.trend.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trend.is_empty()
    }

    /// Remainder values of the non-missing days, in day order.
    pub fn remainder_sample(&self) -> Vec<f64> {
        self.remainder.iter().flatten().copied().collect()
    }
}

fn moving_average(xs: &[f64], len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(xs.len() + 1 - len);
    let mut acc: f64 = xs[..len].iter().sum();
    out.push(acc / len as f64);
    for i in len..xs.len() {
        acc += xs[i] - xs[i - len];
        out.push(acc / len as f64);
    }
    out
}

/// Bisquare robustness weights from residuals; missing residuals get weight 0.
/// Returns `None` when the residual scale is negligible against `spread`, since
/// the weights would then be decided by rounding.
fn robustness_weights(resid: &[Option<f64>], spread: f64) -> Option<Vec<f64>> {
    let abs: Vec<f64> = resid.iter().flatten().map(|r| r.abs()).collect();
    let h = 6.0 * stats::median(&abs);
    if !(h > 1e-9 * spread) {
        return None;
    }
    let (c1, c9) = (0.001 * h, 0.999 * h);
    let w = resid
        .iter()
        .map(|r| match r {
            None => 0.0,
            Some(r) => {
                let r = r.abs();
                if r <= c1 {
                    1.0
                } else if r <= c9 {
                    let u = r / h;
                    (1.0 - u * u).powi(2)
                } else {
                    0.0
                }
            }
        })
        .collect();
    Some(w)
}

struct Phases {
    period: usize,
}

impl Phases {
    fn of(&self, i: usize) -> usize {
        i % self.period
    }

    /// Weighted mean of `values` per phase; phases without weight fall back to
    /// the plain mean of present values, and to `None` when none is present.
    fn means(&self, values: &[f64], weights: &[f64], present: &[bool]) -> Vec<Option<f64>> {
        let p = self.period;
        let (mut sw, mut swx) = (vec![0.0; p], vec![0.0; p]);
        let (mut n, mut sx) = (vec![0usize; p], vec![0.0; p]);
        for i in 0..values.len() {
            if !present[i] {
                continue;
            }
            let j = self.of(i);
            sw[j] += weights[i];
            swx[j] += weights[i] * values[i];
            n[j] += 1;
            sx[j] += values[i];
        }
        (0..p)
            .map(|j| {
                if sw[j] > 0.0 {
                    Some(swx[j] / sw[j])
                } else if n[j] > 0 {
                    Some(sx[j] / n[j] as f64)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Phase means centred on their average; empty phases get 0.
    fn centred(&self, means: &[Option<f64>]) -> Vec<f64> {
        let filled: Vec<f64> = means.iter().flatten().copied().collect();
        let level = if filled.is_empty() { 0.0 } else { stats::mean(&filled) };
        means.iter().map(|m| m.map_or(0.0, |m| m - level)).collect()
    }
}

/// Decomposes `series` into trend, seasonal and remainder.
pub fn stl_decompose(series: &DailySeries, params: &StlParams) -> Result<Decomposition> {
    params.validate()?;
    let n = series.len();
    let p = params.period;
    if n < 2 * p {
        return Err(Error::invalid(format!(
            "series of {n} days is shorter than two periods ({})",
            2 * p
        )));
    }
    let n_missing = series.n_missing();
    if n_missing as f64 > params.max_missing_fraction * n as f64 {
        return Err(Error::invalid(format!(
            "{n_missing} of {n} days missing exceeds the cap of {}",
            params.max_missing_fraction
        )));
    }
    let present: Vec<bool> = series.values.iter().map(Option::is_some).collect();
    let y: Vec<f64> = series.values.iter().map(|v| v.unwrap_or(0.0)).collect();
    let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let phases = Phases { period: p };
    let spread = stats::std_dev(&series.present_values());

    let mut rw: Vec<f64> = present.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    let mut trend = vec![0.0; n];
    let mut seasonal = vec![0.0; n];

    for outer in 0..=params.robust_iterations {
        for _ in 0..params.inner_iterations.max(1) {
            let detrended: Vec<f64> = y.iter().zip(&trend).map(|(a, t)| a - t).collect();
            seasonal = match params.seasonal_mode {
                SeasonalMode::Periodic => {
                    let c = phases.centred(&phases.means(&detrended, &rw, &present));
                    (0..n).map(|i| c[phases.of(i)]).collect()
                }
                SeasonalMode::Windowed(width) => windowed_seasonal(&detrended, &rw, &present, width, params)?,
            };
            let deseasonalized: Vec<f64> = y.iter().zip(&seasonal).map(|(a, s)| a - s).collect();
            trend = loess_smooth(&xs, &deseasonalized, &rw, params.trend_window, params.loess_degree, &xs)?;
        }
        if outer < params.robust_iterations {
            let resid: Vec<Option<f64>> = (0..n)
                .map(|i| present[i].then(|| y[i] - trend[i] - seasonal[i]))
                .collect();
            if let Some(w) = robustness_weights(&resid, spread) {
                rw = w;
            }
        }
    }

    if params.seasonal_mode == SeasonalMode::Periodic {
        let detrended: Vec<f64> = y.iter().zip(&trend).map(|(a, t)| a - t).collect();
        let ones = vec![1.0; n];
        let c = phases.means(&detrended, &ones, &present);
        for (i, s) in seasonal.iter_mut().enumerate() {
            if let Some(m) = c[phases.of(i)] {
                *s = m;
            }
        }
    }

    let remainder = (0..n)
        .map(|i| present[i].then(|| y[i] - trend[i] - seasonal[i]))
        .collect();
    Ok(Decomposition {
        start_date: series.start_date,
        trend,
        seasonal,
        remainder,
        period: p,
    })
}

/// Cycle-subseries smoothing, low-pass filtering and its removal.
fn windowed_seasonal(
    detrended: &[f64],
    rw: &[f64],
    present: &[bool],
    width: usize,
    params: &StlParams,
) -> Result<Vec<f64>> {
    let n = detrended.len();
    let p = params.period;
    let mut c_ext = vec![0.0; n + 2 * p];
    for j in 0..p {
        let idx: Vec<usize> = (j..n).step_by(p).collect();
        let k = idx.len();
        let xs: Vec<f64> = (0..k).map(|v| v as f64).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| detrended[i]).collect();
        let ws: Vec<f64> = idx.iter().map(|&i| rw[i]).collect();
        let fw: Vec<f64> = idx.iter().map(|&i| if present[i] { 1.0 } else { 0.0 }).collect();
        let eval: Vec<f64> = (-1..=k as i64).map(|v| v as f64).collect();
        let sm = if k > 1 {
            loess_with_fallback(&xs, &ys, &ws, Some(&fw), width, params.loess_degree, &eval)?
        } else {
            vec![ys[0]; eval.len()]
        };
        for (m, v) in sm.into_iter().enumerate() {
            c_ext[m * p + j] = v;
        }
    }
    let ma = moving_average(&moving_average(&moving_average(&c_ext, p), p), 3);
    let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let low = loess_smooth(&xs, &ma, &vec![1.0; n], params.low_pass_window, params.loess_degree, &xs)?;
    Ok((0..n).map(|i| c_ext[p + i] - low[i]).collect())
}

/// Remainder of the non-missing days, compacted for density estimation; its
/// length is the retained sample size M.
pub fn remainder_of(series: &DailySeries, params: &StlParams) -> Result<Vec<f64>> {
    Ok(stl_decompose(series, params)?.remainder_sample())
}

pub fn format_decomposition_csv(d: &Decomposition) -> String {
    let mut out = String::with_capacity(64 * (d.len() + 1));
    out.push_str(DECOMPOSITION_HEADER);
    out.push('\n');
    for i in 0..d.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            (d.start_date + Days::new(i as u64)).format("%Y-%m-%d"),
            d.trend[i],
            d.seasonal[i],
            fmt_opt(d.remainder[i])
        ));
    }
    out
}

pub fn write_decomposition_csv(path: &Path, d: &Decomposition) -> Result<()> {
    fileio::write_atomic(path, format_decomposition_csv(d).as_bytes())
}

pub fn read_decomposition_csv(path: &Path, period: usize) -> Result<Decomposition> {
    let text = fileio::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l.trim()) != Some(DECOMPOSITION_HEADER) {
        return Err(Error::parse(path, 1, format!("expected header `{DECOMPOSITION_HEADER}`")));
    }
    let mut start = None;
    let (mut trend, mut seasonal, mut remainder) = (Vec::new(), Vec::new(), Vec::new());
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(Error::parse(path, i + 1, "expected 4 fields"));
        }
        let date = NaiveDate::parse_from_str(f[0], "%Y-%m-%d")
            .map_err(|_| Error::parse(path, i + 1, "bad date"))?;
        start.get_or_insert(date);
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::parse(path, i + 1, format!("bad number {s:?}")))
        };
        trend.push(num(f[1])?);
        seasonal.push(num(f[2])?);
        remainder.push(if f[3].is_empty() { None } else { Some(num(f[3])?) });
    }
    Ok(Decomposition {
        start_date: start.ok_or_else(|| Error::parse(path, 2, "no rows"))?,
        trend,
        seasonal,
        remainder,
        period,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    fn d0() -> NaiveDate {
        NaiveDate::from_ymd_opt(2012, 1, 1).unwrap()
    }

    fn rms(xs: &[f64]) -> f64 {
        (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
    }

    fn check_additivity(series: &DailySeries, d: &Decomposition) {
        for (i, v) in series.values.iter().enumerate() {
            if let Some(v) = v {
                let r = d.remainder[i].unwrap();
                assert!((v - (d.trend[i] + d.seasonal[i] + r)).abs() <= 1e-9 * v.abs().max(1.0));
            } else {
                assert!(d.remainder[i].is_none());
            }
        }
    }

    #[test]
    fn loess_reproduces_constants_and_lines() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 * 0.7).collect();
        let w = vec![1.0; 50];
        let c = vec![5.0; 50];
        for (win, deg) in [(3, 1), (7, 2), (21, 1), (200, 2)] {
            let out = loess_smooth(&xs, &c, &w, win, deg, &xs).unwrap();
            assert!(out.iter().all(|v| (v - 5.0).abs() < 1e-12));
        }
        let line: Vec<f64> = xs.iter().map(|x| 2.0 - 0.3 * x).collect();
        for win in [2, 5, 13, 50, 500] {
            let out = loess_smooth(&xs, &line, &w, win, 1, &xs).unwrap();
            for (o, l) in out.iter().zip(&line) {
                assert!((o - l).abs() < 1e-12, "window {win}");
            }
        }
    }

    #[test]
    fn loess_denoises_sine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let xs: Vec<f64> = (0..400).map(|i| i as f64).collect();
        let clean: Vec<f64> = xs.iter().map(|x| (2.0 * PI * x / 200.0).sin()).collect();
        let noisy: Vec<f64> = clean.iter().map(|c| c + noise.sample(&mut rng)).collect();
        let out = loess_smooth(&xs, &noisy, &vec![1.0; 400], 21, 1, &xs).unwrap();
        let mse = |a: &[f64]| a.iter().zip(&clean).map(|(x, c)| (x - c).powi(2)).sum::<f64>() / 400.0;
        assert!(mse(&out) < mse(&noisy) / 5.0);
    }

    #[test]
    fn loess_zero_weight_neighbourhood_errors() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let mut w = vec![1.0; 20];
        for v in w.iter_mut().take(8) {
            *v = 0.0;
        }
        let err = loess_smooth(&xs, &xs, &w, 5, 1, &[1.0]).unwrap_err();
        assert!(err.to_string().contains("x = 1"));
    }

    #[test]
    fn loess_input_validation() {
        let xs = [0.0, 1.0, 1.0];
        assert!(loess_smooth(&xs, &xs, &[1.0; 3], 3, 1, &[0.5]).is_err());
        let xs = [0.0, 1.0, 2.0];
        assert!(loess_smooth(&xs, &xs, &[1.0; 3], 1, 1, &[0.5]).is_err());
        assert!(loess_smooth(&xs, &xs, &[1.0; 3], 3, 3, &[0.5]).is_err());
    }

    #[test]
    fn default_trend_window_matches_formula() {
        let p = StlParams::periodic(365, 1826);
        assert_eq!(p.trend_window, 549);
        assert_eq!(p.low_pass_window, 365);
        assert_eq!(StlParams::windowed(7, 7).trend_window, 15);
    }

    #[test]
    fn constant_series_decomposes_trivially() {
        let s = DailySeries::from_values(d0(), vec![3.0; 800]);
        let d = stl_decompose(&s, &StlParams::periodic(365, 800)).unwrap();
        assert!(d.trend.iter().all(|t| (t - 3.0).abs() < 1e-12));
        assert!(d.seasonal.iter().all(|v| v.abs() < 1e-12));
        assert!(d.remainder_sample().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn sinusoid_is_absorbed_by_seasonal() {
        let n = 1826;
        let amp = 2.0;
        let vals: Vec<f64> = (0..n).map(|i| 5.0 + amp * (2.0 * PI * i as f64 / 365.0).sin()).collect();
        let s = DailySeries::from_values(d0(), vals);
        let d = stl_decompose(&s, &StlParams::periodic(365, n)).unwrap();
        check_additivity(&s, &d);
        assert!(rms(&d.remainder_sample()) < 0.01 * amp);
        for i in 0..n - 365 {
            assert_eq!(d.seasonal[i], d.seasonal[i + 365]);
        }
    }

    #[test]
    fn noisy_trend_plus_season_leaves_noise_variance() {
        // Ten years so the per-phase mean absorbs only a tenth of the noise variance.
        let n = 3650;
        let sigma = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noise = Normal::new(0.0, sigma).unwrap();
        let vals: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64;
                4.0 + 0.0005 * t + 1.5 * (2.0 * PI * t / 365.0).sin() + noise.sample(&mut rng)
            })
            .collect();
        let s = DailySeries::from_values(d0(), vals);
        let d = stl_decompose(&s, &StlParams::periodic(365, n)).unwrap();
        check_additivity(&s, &d);
        let var = stats::variance(&d.remainder_sample());
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.15, "ratio {}", var / (sigma * sigma));
    }

    #[test]
    fn periodic_seasonal_is_calendar_mean_of_detrended() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut vals: Vec<Option<f64>> = (0..1100)
            .map(|i| Some(3.0 + (2.0 * PI * i as f64 / 365.0).cos() + noise.sample(&mut rng)))
            .collect();
        for i in (0..1100).step_by(37) {
            vals[i] = None;
        }
        let s = DailySeries::from_options(d0(), vals);
        let d = stl_decompose(&s, &StlParams::periodic(365, 1100)).unwrap();
        check_additivity(&s, &d);
        for j in 0..365 {
            let det: Vec<f64> = (j..1100)
                .step_by(365)
                .filter_map(|i| s.values[i].map(|v| v - d.trend[i]))
                .collect();
            if !det.is_empty() {
                assert!((d.seasonal[j] - stats::mean(&det)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let vals: Vec<f64> = (0..900).map(|i| 2.0 + (i as f64 / 58.1).sin() + noise.sample(&mut rng)).collect();
        let c = 7.5;
        let a = DailySeries::from_values(d0(), vals.clone());
        let b = DailySeries::from_values(d0(), vals.iter().map(|v| v + c).collect());
        for params in [StlParams::periodic(365, 900), StlParams::windowed(365, 7)] {
            let da = stl_decompose(&a, &params).unwrap();
            let db = stl_decompose(&b, &params).unwrap();
            for i in 0..900 {
                assert!((db.trend[i] - da.trend[i] - c).abs() < 1e-6);
                assert!((db.seasonal[i] - da.seasonal[i]).abs() < 1e-6);
                assert!((db.remainder[i].unwrap() - da.remainder[i].unwrap()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn windowed_mode_tracks_sinusoid() {
        let n = 1095;
        let vals: Vec<f64> = (0..n).map(|i| 1.0 + (2.0 * PI * i as f64 / 365.0).sin()).collect();
        let s = DailySeries::from_values(d0(), vals);
        let d = stl_decompose(&s, &StlParams::windowed(365, 7)).unwrap();
        check_additivity(&s, &d);
        assert!(rms(&d.remainder_sample()) < 0.05);
    }

    #[test]
    fn robust_iterations_downweight_outliers() {
        let n = 800;
        let mut vals: Vec<f64> = (0..n).map(|i| 3.0 + (2.0 * PI * i as f64 / 365.0).sin()).collect();
        for i in (50..n).step_by(97) {
            vals[i] += 40.0;
        }
        let s = DailySeries::from_values(d0(), vals);
        let mut plain = StlParams::periodic(365, n);
        plain.robust_iterations = 0;
        let mut robust = plain;
        robust.robust_iterations = 3;
        let dp = stl_decompose(&s, &plain).unwrap();
        let dr = stl_decompose(&s, &robust).unwrap();
        let dev = |d: &Decomposition| {
            (0..n)
                .map(|i| (d.trend[i] - 3.0).abs())
                .fold(0.0, f64::max)
        };
        assert!(dev(&dr) < dev(&dp));
    }

    #[test]
    fn remainder_compacts_missing_days() {
        let mut vals: Vec<Option<f64>> = (0..800).map(|i| Some((i % 17) as f64)).collect();
        for i in 0..10 {
            vals[i * 70 + 3] = None;
        }
        let s = DailySeries::from_options(d0(), vals);
        let r = remainder_of(&s, &StlParams::periodic(365, 800)).unwrap();
        assert_eq!(r.len(), 790);

        let s = DailySeries::from_values(d0(), vec![1.0; 1826]);
        assert_eq!(remainder_of(&s, &StlParams::periodic(365, 1826)).unwrap().len(), 1826);
    }

    #[test]
    fn short_or_gappy_series_rejected() {
        let s = DailySeries::from_values(d0(), vec![1.0; 700]);
        assert!(stl_decompose(&s, &StlParams::periodic(365, 700)).is_err());
        let vals = (0..800).map(|i| (i % 2 == 0).then_some(1.0)).collect();
        let s = DailySeries::from_options(d0(), vals);
        assert!(stl_decompose(&s, &StlParams::periodic(365, 800)).is_err());
    }

    #[test]
    fn params_validation() {
        let mut p = StlParams::periodic(365, 1000);
        p.trend_window = 4;
        assert!(p.validate().is_err());
        p.trend_window = 1;
        assert!(p.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn series() -> impl Strategy<Value = (Vec<Option<f64>>, usize)> {
            (7usize..30).prop_flat_map(|p| {
                (
                    prop::collection::vec(prop::option::weighted(0.9, 0.0f64..20.0), 2 * p..6 * p),
                    Just(p),
                )
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn additive_and_periodic((vals, p) in series()) {
                let n = vals.len();
                let s = DailySeries::from_options(d0(), vals);
                let mut params = StlParams::periodic(p, n);
                params.max_missing_fraction = 1.0;
                prop_assume!(s.n_missing() < n);
                let d = stl_decompose(&s, &params).unwrap();
                check_additivity(&s, &d);
                for i in 0..n - p {
                    prop_assert_eq!(d.seasonal[i], d.seasonal[i + p]);
                }
            }

            #[test]
            fn shift_moves_only_trend((vals, p) in series(), c in -50.0f64..50.0) {
                let n = vals.len();
                prop_assume!(vals.iter().filter(|v| v.is_none()).count() < n / 4);
                let a = DailySeries::from_options(d0(), vals.clone());
                let b = DailySeries::from_options(d0(), vals.iter().map(|v| v.map(|x| x + c)).collect());
                let params = StlParams::periodic(p, n);
                let (da, db) = (stl_decompose(&a, &params).unwrap(), stl_decompose(&b, &params).unwrap());
                for i in 0..n {
                    prop_assert!((db.trend[i] - da.trend[i] - c).abs() < 1e-6);
                    prop_assert!((db.seasonal[i] - da.seasonal[i]).abs() < 1e-6);
                }
            }

            #[test]
            fn loess_linear_exact(a in -10.0f64..10.0, b in -3.0f64..3.0, n in 3usize..60) {
                let xs: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
                let ys: Vec<f64> = xs.iter().map(|x| a + b * x).collect();
                let out = loess_smooth(&xs, &ys, &vec![1.0; n], n + 5, 1, &xs).unwrap();
                for (o, y) in out.iter().zip(&ys) {
                    prop_assert!((o - y).abs() <= 1e-9 * (1.0 + y.abs()));
                }
            }
        }
    }
}
