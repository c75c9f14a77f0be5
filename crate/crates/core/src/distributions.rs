//! Weibull, Gamma and GEV models for daily mean wind speed: densities,
//! maximum-likelihood fits, and ranking by Kullback–Leibler divergence from
//! the empirical density.
//!
//! The GEV follows the Coles parameterisation: location `μ`, scale `λ` and
//! shape `k`, with support `1 + k(x − μ)/λ > 0`. Its distribution function is
//! `exp{−[1 + k(x − μ)/λ]^(−1/k)}`; the density used everywhere here is the
//! derivative of that expression.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Open01};
use statrs::function::gamma::{digamma, gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::ingest::{Network, StationSet};
use crate::kde::{BandwidthRule, DensityEstimate};
use crate::optim::{nelder_mead, newton_refine, NelderMeadOptions};
use crate::quadrature::{integrate_many, nodes, trapezoid, Integral, QuadratureScheme, QuadratureSpec};
use crate::stats;

pub const KL_REPORT_HEADER: &str = "station_id,family,param1,param2,param3,log_lik,kl_nats,converged";
pub const KL_BOXPLOT_HEADER: &str = "network,family,station_id,kl_nats";

/// Densities below this are raised to it inside the KL logarithm.
pub const KL_DENSITY_FLOOR: f64 = 1e-300;
pub const MIN_FIT_SAMPLE: usize = 30;
pub const MAX_FIT_ITERATIONS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    Weibull,
    Gamma,
    Gev,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Weibull, Family::Gamma, Family::Gev];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Weibull => "weibull",
            Family::Gamma => "gamma",
            Family::Gev => "gev",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "weibull" => Ok(Family::Weibull),
            "gamma" => Ok(Family::Gamma),
            "gev" => Ok(Family::Gev),
            other => Err(Error::invalid(format!("unknown distribution family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistParams {
    /// `f(x) = (k/λ)(x/λ)^(k−1) e^(−(x/λ)^k)` for `x ≥ 0`, zero below.
    Weibull { shape: f64, scale: f64 },
    /// `f(x) = β^k x^(k−1) e^(−βx) / Γ(k)` for `x ≥ 0`.
    Gamma { shape: f64, rate: f64 },
    Gev { location: f64, scale: f64, shape: f64 },
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

impl DistParams {
    pub fn weibull(shape: f64, scale: f64) -> Result<Self> {
        let p = DistParams::Weibull { shape, scale };
        p.validate()?;
        Ok(p)
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        let p = DistParams::Gamma { shape, rate };
        p.validate()?;
        Ok(p)
    }

    pub fn gev(location: f64, scale: f64, shape: f64) -> Result<Self> {
        let p = DistParams::Gev { location, scale, shape };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DistParams::Weibull { shape, scale } => {
                positive("weibull shape", shape)?;
                positive("weibull scale", scale)
            }
            DistParams::Gamma { shape, rate } => {
                positive("gamma shape", shape)?;
                positive("gamma rate", rate)
            }
            DistParams::Gev { location, scale, shape } => {
                positive("gev scale", scale)?;
                if location.is_finite() && shape.is_finite() {
                    Ok(())
                } else {
                    Err(Error::invalid("gev location and shape must be finite"))
                }
            }
        }
    }

    pub fn family(&self) -> Family {
        match self {
            DistParams::Weibull { .. } => Family::Weibull,
            DistParams::Gamma { .. } => Family::Gamma,
            DistParams::Gev { .. } => Family::Gev,
        }
    }

    /// Parameters in report order; the third is `None` for two-parameter families.
    pub fn values(&self) -> [Option<f64>; 3] {
        match *self {
            DistParams::Weibull { shape, scale } => [Some(shape), Some(scale), None],
            DistParams::Gamma { shape, rate } => [Some(shape), Some(rate), None],
            DistParams::Gev { location, scale, shape } => [Some(location), Some(scale), Some(shape)],
        }
    }

    /// Closed support interval (endpoints may be infinite).
    pub fn support(&self) -> (f64, f64) {
        match *self {
            DistParams::Weibull { .. } | DistParams::Gamma { .. } => (0.0, f64::INFINITY),
            DistParams::Gev { location, scale, shape } => {
                if shape > 0.0 {
                    (location - scale / shape, f64::INFINITY)
                } else if shape < 0.0 {
                    (f64::NEG_INFINITY, location - scale / shape)
                } else {
                    (f64::NEG_INFINITY, f64::INFINITY)
                }
            }
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            DistParams::Weibull { shape: k, scale: l } => {
                if x < 0.0 {
                    f64::NEG_INFINITY
                } else if x == 0.0 {
                    match k.partial_cmp(&1.0) {
                        Some(std::cmp::Ordering::Less) => f64::INFINITY,
                        Some(std::cmp::Ordering::Equal) => -l.ln(),
                        _ => f64::NEG_INFINITY,
                    }
                } else {
                    let r = (x / l).ln();
                    k.ln() - l.ln() + (k - 1.0) * r - (k * r).exp()
                }
            }
            DistParams::Gamma { shape: k, rate: b } => {
                if x < 0.0 {
                    f64::NEG_INFINITY
                } else if x == 0.0 {
                    match k.partial_cmp(&1.0) {
                        Some(std::cmp::Ordering::Less) => f64::INFINITY,
                        Some(std::cmp::Ordering::Equal) => b.ln(),
                        _ => f64::NEG_INFINITY,
                    }
                } else {
                    k * b.ln() + (k - 1.0) * x.ln() - b * x - ln_gamma(k)
                }
            }
            DistParams::Gev { location, scale, shape } => match gev_ln_t((x - location) / scale, shape) {
                Some(ln_t) => -scale.ln() + (shape + 1.0) * ln_t - ln_t.exp(),
                None => f64::NEG_INFINITY,
            },
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            DistParams::Weibull { shape, scale } => {
                if x <= 0.0 {
                    0.0
                } else {
                    -(-(x / scale).powf(shape)).exp_m1()
                }
            }
            DistParams::Gamma { shape, rate } => {
                if x <= 0.0 {
                    0.0
                } else {
                    gamma_lr(shape, rate * x)
                }
            }
            DistParams::Gev { location, scale, shape } => match gev_ln_t((x - location) / scale, shape) {
                Some(ln_t) => (-ln_t.exp()).exp(),
                None => {
                    if shape > 0.0 {
                        0.0
                    } else {
                        1.0
                    }
                }
            },
        }
    }

    /// Inverse distribution function for `p ∈ (0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            DistParams::Weibull { shape, scale } => scale * (-(-p).ln_1p()).powf(1.0 / shape),
            DistParams::Gamma { shape, rate } => gamma_quantile(shape, p) / rate,
            DistParams::Gev { location, scale, shape } => {
                let w = -p.ln();
                if shape == 0.0 {
                    location - scale * w.ln()
                } else {
                    location + scale * (-shape * w.ln()).exp_m1() / shape
                }
            }
        }
    }

    /// `n` independent draws.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        match *self {
            DistParams::Weibull { shape, scale } => {
                let d = rand_distr::Weibull::new(scale, shape).expect("validated weibull");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            DistParams::Gamma { shape, rate } => {
                let d = rand_distr::Gamma::new(shape, 1.0 / rate).expect("validated gamma");
                (0..n).map(|_| d.sample(rng)).collect()
            }
            DistParams::Gev { .. } => (0..n)
                .map(|_| {
                    let u: f64 = Open01.sample(rng);
                    self.quantile(u)
                })
                .collect(),
        }
    }

    pub fn log_likelihood(&self, sample: &[f64]) -> f64 {
        sample.iter().map(|&x| self.ln_pdf(x)).sum()
    }
}

/// `ln t` with `t = [1 + k z]^(−1/k)`, or `None` outside the support.
fn gev_ln_t(z: f64, k: f64) -> Option<f64> {
    if k == 0.0 {
        return Some(-z);
    }
    let kz = k * z;
    if 1.0 + kz > 0.0 {
        Some(-kz.ln_1p() / k)
    } else {
        None
    }
}

/// Quantile of the unit-rate Gamma distribution by safeguarded Newton steps.
fn gamma_quantile(k: f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, k.max(1.0));
    while gamma_lr(k, hi) < p {
        lo = hi;
        hi *= 2.0;
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = gamma_lr(k, x) - p;
        if f.abs() <= 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dens = ((k - 1.0) * x.ln() - x - ln_gamma(k)).exp();
        let newton = x - f / dens;
        x = if newton > lo && newton < hi && dens > 0.0 {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    x
}

/// Evaluates a family's density; free-function form of [`DistParams::pdf`].
pub fn pdf(params: &DistParams, x: f64) -> f64 {
    params.pdf(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub family: Family,
    pub params: DistParams,
    /// Summed log-likelihood at `params`, in nats.
    pub log_likelihood: f64,
    /// Divergence of the fitted density from the empirical one, once ranked.
    pub kl_divergence: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Quadrature nodes where the fitted density fell below the KL floor.
    pub kl_floor_activations: usize,
}

// Optimisation runs on transformed parameters: logs of shape/scale/rate, and
// raw location and GEV shape.

fn from_theta(family: Family, t: &[f64]) -> DistParams {
    match family {
        Family::Weibull => DistParams::Weibull {
            shape: t[0].exp(),
            scale: t[1].exp(),
        },
        Family::Gamma => DistParams::Gamma {
            shape: t[0].exp(),
            rate: t[1].exp(),
        },
        Family::Gev => DistParams::Gev {
            location: t[0],
            scale: t[1].exp(),
            shape: t[2],
        },
    }
}

fn to_theta(p: &DistParams) -> Vec<f64> {
    match *p {
        DistParams::Weibull { shape, scale } => vec![shape.ln(), scale.ln()],
        DistParams::Gamma { shape, rate } => vec![shape.ln(), rate.ln()],
        DistParams::Gev { location, scale, shape } => vec![location, scale.ln(), shape],
    }
}

/// Below this GEV shape the likelihood is unbounded at the upper endpoint.
const GEV_MIN_SHAPE: f64 = -1.0;

fn mean_nll(family: Family, t: &[f64], xs: &[f64]) -> f64 {
    if t.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let p = from_theta(family, t);
    if p.validate().is_err() {
        return f64::INFINITY;
    }
    if let DistParams::Gev { shape, .. } = p {
        if shape <= GEV_MIN_SHAPE {
            return f64::INFINITY;
        }
    }
    let ll = p.log_likelihood(xs);
    if ll.is_nan() {
        f64::INFINITY
    } else {
        -ll / xs.len() as f64
    }
}

fn grad_mean_nll(family: Family, t: &[f64], xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let p = from_theta(family, t);
    match p {
        DistParams::Weibull { shape: k, scale: l } => {
            let (mut gk, mut gl) = (0.0, 0.0);
            for &x in xs {
                let r = (x / l).ln();
                let u = (k * r).exp();
                gk += 1.0 / k + r - u * r;
                gl += (k / l) * (u - 1.0);
            }
            vec![-k * gk / n, -l * gl / n]
        }
        DistParams::Gamma { shape: k, rate: b } => {
            let mean_ln: f64 = xs.iter().map(|x| x.ln()).sum::<f64>() / n;
            let mean_x: f64 = xs.iter().sum::<f64>() / n;
            let gk = b.ln() + mean_ln - digamma(k);
            let gb = k / b - mean_x;
            vec![-k * gk, -b * gb]
        }
        DistParams::Gev { location: mu, scale: s, shape: k } => {
            let (mut gm, mut gs, mut gk) = (0.0, 0.0, 0.0);
            for &x in xs {
                let z = (x - mu) / s;
                let y = 1.0 + k * z;
                if !(y > 0.0) {
                    return vec![f64::NAN; 3];
                }
                let ln_t = gev_ln_t(z, k).unwrap_or(f64::NAN);
                let tt = ln_t.exp();
                let a = k + 1.0 - tt;
                gm += a / (s * y);
                gs += -1.0 / s + a * z / (s * y);
                if k.abs() >= 1e-4 {
                    let ln_y = y.ln();
                    gk += (1.0 - tt) * ln_y / (k * k) + (tt - k - 1.0) * z / (k * y);
                }
            }
            let dk = if k.abs() >= 1e-4 {
                -gk / n
            } else {
                let h = 1e-5;
                let mut tp = t.to_vec();
                let mut tm = t.to_vec();
                tp[2] += h;
                tm[2] -= h;
                (mean_nll(family, &tp, xs) - mean_nll(family, &tm, xs)) / (2.0 * h)
            };
            vec![-gm / n, -s * gs / n, dk]
        }
    }
}

fn weibull_moments_start(xs: &[f64]) -> DistParams {
    let m = stats::mean(xs);
    let cv2 = stats::variance(xs) / (m * m);
    // Γ(1+2/k)/Γ(1+1/k)² − 1 decreases in k; bisect on ln k
    let g = |k: f64| (ln_gamma(1.0 + 2.0 / k) - 2.0 * ln_gamma(1.0 + 1.0 / k)).exp() - 1.0 - cv2;
    let (mut lo, mut hi) = (0.05f64.ln(), 100f64.ln());
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if g(mid.exp()) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k = (0.5 * (lo + hi)).exp();
    DistParams::Weibull {
        shape: k,
        scale: m / ln_gamma(1.0 + 1.0 / k).exp(),
    }
}

fn gamma_moments_start(xs: &[f64]) -> DistParams {
    let m = stats::mean(xs);
    let v = stats::variance(xs);
    DistParams::Gamma {
        shape: m * m / v,
        rate: m / v,
    }
}

fn gev_feasible(p: &DistParams, xs: &[f64]) -> bool {
    let (lo, hi) = p.support();
    xs.iter().all(|&x| x > lo && x < hi)
}

fn gumbel_start(xs: &[f64]) -> DistParams {
    let s = stats::std_dev(xs) * 6f64.sqrt() / std::f64::consts::PI;
    DistParams::Gev {
        location: stats::mean(xs) - 0.577_215_664_901_532_9 * s,
        scale: s,
        shape: 0.0,
    }
}

/// Probability-weighted-moment start, falling back to a Gumbel fit when the
/// start would leave sample points outside the support.
fn gev_pwm_start(xs: &[f64]) -> DistParams {
    let sorted = stats::sorted_copy(xs);
    let n = sorted.len() as f64;
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    for (i, &x) in sorted.iter().enumerate() {
        let i = i as f64;
        b0 += x;
        b1 += i / (n - 1.0) * x;
        b2 += i * (i - 1.0) / ((n - 1.0) * (n - 2.0)) * x;
    }
    b0 /= n;
    b1 /= n;
    b2 /= n;
    let c = (2.0 * b1 - b0) / (3.0 * b2 - b0) - 2f64.ln() / 3f64.ln();
    let kappa = 7.8590 * c + 2.9554 * c * c;
    let start = if kappa.abs() < 1e-6 {
        let s = (2.0 * b1 - b0) / 2f64.ln();
        DistParams::Gev {
            location: b0 - 0.577_215_664_901_532_9 * s,
            scale: s,
            shape: 0.0,
        }
    } else {
        let g = ln_gamma(1.0 + kappa).exp();
        let s = (2.0 * b1 - b0) * kappa / (g * (1.0 - 2f64.powf(-kappa)));
        DistParams::Gev {
            location: b0 + s * (g - 1.0) / kappa,
            scale: s,
            shape: -kappa,
        }
    };
    if start.validate().is_ok()
        && matches!(start, DistParams::Gev { shape, .. } if shape > GEV_MIN_SHAPE)
        && gev_feasible(&start, xs)
    {
        start
    } else {
        gumbel_start(xs)
    }
}

/// Maximum-likelihood fit of `family` to `sample`.
///
/// Method-of-moments (Weibull, Gamma) or probability-weighted-moment (GEV)
/// starts are refined by a simplex search and then by Newton steps on the
/// analytic gradient. Convergence means the gradient of the mean negative
/// log-likelihood fell below 1e-8 or the last step below 1e-10; a fit that
/// hits the iteration cap is still returned, flagged as not converged.
pub fn fit_mle(family: Family, sample: &[f64]) -> Result<FitReport> {
    if sample.len() < MIN_FIT_SAMPLE {
        return Err(Error::invalid(format!(
            "{} fit needs at least {MIN_FIT_SAMPLE} values, got {}",
            family,
            sample.len()
        )));
    }
    if sample.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("sample contains non-finite values"));
    }
    if family != Family::Gev && sample.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::invalid(format!("{family} fit requires strictly positive values")));
    }
    if !(stats::std_dev(sample) > 0.0) {
        return Err(Error::Degenerate(format!("{family} fit: sample has no spread")));
    }

    let start = match family {
        Family::Weibull => weibull_moments_start(sample),
        Family::Gamma => gamma_moments_start(sample),
        Family::Gev => gev_pwm_start(sample),
    };
    let t0 = to_theta(&start);
    let step: Vec<f64> = match family {
        Family::Gev => vec![0.1 * start.values()[1].unwrap(), 0.1, 0.05],
        _ => vec![0.1, 0.1],
    };
    let obj = |t: &[f64]| mean_nll(family, t, sample);
    let nm = nelder_mead(
        obj,
        &t0,
        &step,
        NelderMeadOptions {
            max_iter: MAX_FIT_ITERATIONS,
            f_tol: 1e-14,
            x_tol: 1e-9,
        },
    );
    if !nm.value.is_finite() {
        return Err(Error::Numerical(format!("{family} fit found no feasible parameters")));
    }
    let nt = newton_refine(
        obj,
        |t: &[f64]| grad_mean_nll(family, t, sample),
        &nm.x,
        MAX_FIT_ITERATIONS,
        1e-8,
        1e-10,
    );
    let (theta, converged) = if nt.value <= nm.value {
        (nt.x, nt.converged)
    } else {
        (nm.x, false)
    };
    let params = from_theta(family, &theta);
    Ok(FitReport {
        family,
        params,
        log_likelihood: params.log_likelihood(sample),
        kl_divergence: None,
        converged,
        iterations: nm.iterations + nt.iterations,
        kl_floor_activations: 0,
    })
}

/// The Gaussian kernel estimate used as the reference density.
pub fn empirical_density(sample: &[f64], rule: &BandwidthRule) -> Result<DensityEstimate> {
    DensityEstimate::with_rule(sample.to_vec(), rule)
}

/// Equal-width histogram density with Freedman–Diaconis bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub start: f64,
    pub width: f64,
    pub density: Vec<f64>,
}

impl Histogram {
    pub fn new(sample: &[f64]) -> Result<Self> {
        if sample.len() < 2 {
            return Err(Error::invalid("histogram needs at least 2 values"));
        }
        let sorted = stats::sorted_copy(sample);
        let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
        if !(hi > lo) {
            return Err(Error::Degenerate("histogram: sample has no spread".into()));
        }
        let iqr = stats::quantile_sorted(&sorted, 0.75) - stats::quantile_sorted(&sorted, 0.25);
        let spread = if iqr > 0.0 { iqr } else { stats::std_dev(sample) };
        let mut width = 2.0 * spread * (sample.len() as f64).powf(-1.0 / 3.0);
        let bins = ((hi - lo) / width).ceil().clamp(1.0, 1e6) as usize;
        width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for &x in &sorted {
            let i = (((x - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        let norm = sample.len() as f64 * width;
        Ok(Histogram {
            start: lo,
            width,
            density: counts.into_iter().map(|c| c as f64 / norm).collect(),
        })
    }

    pub fn end(&self) -> f64 {
        self.start + self.width * self.density.len() as f64
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.start || x > self.end() {
            return 0.0;
        }
        let i = (((x - self.start) / self.width) as usize).min(self.density.len() - 1);
        self.density[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceKind {
    Kde(BandwidthRule),
    Histogram,
}

impl Default for ReferenceKind {
    fn default() -> Self {
        ReferenceKind::Kde(BandwidthRule::Silverman)
    }
}

#[derive(Debug, Clone)]
pub enum ReferenceDensity {
    Kde(DensityEstimate),
    Histogram(Histogram),
}

impl ReferenceDensity {
    pub fn build(sample: &[f64], kind: &ReferenceKind) -> Result<Self> {
        Ok(match kind {
            ReferenceKind::Kde(rule) => ReferenceDensity::Kde(empirical_density(sample, rule)?),
            ReferenceKind::Histogram => ReferenceDensity::Histogram(Histogram::new(sample)?),
        })
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            ReferenceDensity::Kde(e) => e.pdf_at(x),
            ReferenceDensity::Histogram(h) => h.pdf(x),
        }
    }

    /// Upper end of the KL integration range.
    pub fn upper(&self, pad: f64) -> f64 {
        match self {
            ReferenceDensity::Kde(e) => e.max() + pad * e.bandwidth(),
            ReferenceDensity::Histogram(h) => h.end(),
        }
    }

    /// Values at `n` equally spaced nodes spanning `[a, b]`.
    pub fn values_on(&self, a: f64, b: f64, n: usize) -> Vec<f64> {
        match self {
            ReferenceDensity::Kde(e) => e.pdf_on_grid(a, (b - a) / (n - 1) as f64, n),
            ReferenceDensity::Histogram(h) => nodes(a, b, n).0.into_iter().map(|x| h.pdf(x)).collect(),
        }
    }

    /// Probability mass the reference places below zero.
    pub fn leaked_mass(&self) -> f64 {
        match self {
            ReferenceDensity::Kde(e) => e.mass_below(0.0),
            ReferenceDensity::Histogram(h) => {
                if h.start >= 0.0 {
                    0.0
                } else {
                    let full = ((-h.start) / h.width).floor() as usize;
                    let mut m: f64 = h.density[..full.min(h.density.len())].iter().sum::<f64>() * h.width;
                    if full < h.density.len() {
                        m += h.density[full] * (-h.start - full as f64 * h.width);
                    }
                    m
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub value: f64,
    pub error_estimate: f64,
    /// Nodes with `p > 0` where `q` was raised to the floor.
    pub floor_activations: usize,
}

/// `∫ p̃ ln(p̃/q)` over `[a, b]` by quadrature, where `p̃` is `p` renormalised
/// to unit mass on `[a, b]` and `q` is floored at [`KL_DENSITY_FLOOR`]. Points
/// where `p = 0` contribute nothing. Because `q` has at most unit mass on the
/// range, the result is non-negative up to quadrature error.
pub fn kl_divergence(
    p: impl Fn(f64) -> f64,
    q: impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    quad: &QuadratureSpec,
) -> Result<KlEstimate> {
    if !(a.is_finite() && b.is_finite() && b > a) {
        return Err(Error::invalid(format!("KL integration range [{a}, {b}] is empty or unbounded")));
    }
    let floors = Cell::new(0usize);
    let [cross, mass] = integrate_many(|x| kl_terms(p(x), q(x), &floors), a, b, quad);
    finish_kl(cross, mass, floors.get(), a, b)
}

/// `[p ln(p/q), p]` with the floor applied to `q`.
fn kl_terms(pv: f64, qv: f64, floors: &Cell<usize>) -> [f64; 2] {
    if !(pv > 0.0) {
        return [0.0, 0.0];
    }
    let mut qv = qv;
    if !(qv >= KL_DENSITY_FLOOR) {
        floors.set(floors.get() + 1);
        qv = KL_DENSITY_FLOOR;
    }
    [pv * (pv.ln() - qv.ln()), pv]
}

fn finish_kl(cross: Integral, mass: Integral, floor_activations: usize, a: f64, b: f64) -> Result<KlEstimate> {
    if !(mass.value > 0.0) {
        return Err(Error::Degenerate(format!("reference density has no mass on [{a}, {b}]")));
    }
    // ∫ (p/P) ln((p/P)/q) = (1/P) ∫ p ln(p/q) − ln P
    Ok(KlEstimate {
        value: cross.value / mass.value - mass.value.ln(),
        error_estimate: (cross.error_estimate + mass.error_estimate * cross.value.abs() / mass.value) / mass.value
            + mass.error_estimate / mass.value,
        floor_activations,
    })
}

/// As [`kl_divergence`] on the trapezoid nodes of `[a, b]`, with the reference
/// already evaluated there.
fn kl_from_values(pv: &[f64], q: impl Fn(f64) -> f64, a: f64, b: f64) -> Result<KlEstimate> {
    let (xs, h) = nodes(a, b, pv.len());
    let floors = Cell::new(0usize);
    let (mut c0, mut c1) = (Vec::with_capacity(pv.len()), Vec::with_capacity(pv.len()));
    for (&x, &p) in xs.iter().zip(pv) {
        let [u, v] = kl_terms(p, q(x), &floors);
        c0.push(u);
        c1.push(v);
    }
    finish_kl(trapezoid(&c0, h), trapezoid(&c1, h), floors.get(), a, b)
}

/// KL integration range: `[0, upper]` intersected with the family's support.
/// A left end where the fitted density is infinite (shape below 1) is moved
/// inward by a relative 1e-6 so the endpoint node stays finite.
pub fn kl_range(reference: &ReferenceDensity, params: &DistParams, pad: f64) -> (f64, f64) {
    let (lo, hi) = params.support();
    let (mut a, b) = (lo.max(0.0), hi.min(reference.upper(pad)));
    if params.pdf(a).is_infinite() && b > a {
        a += 1e-6 * (b - a);
    }
    (a, b)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankOptions {
    pub reference: ReferenceKind,
    pub quad: QuadratureSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// Successful fits, ascending by KL divergence.
    pub reports: Vec<FitReport>,
    /// Families whose fit failed, with the reason.
    pub excluded: Vec<(Family, String)>,
    pub leaked_mass: f64,
}

impl Ranking {
    pub fn best(&self) -> Option<&FitReport> {
        self.reports.first()
    }
}

/// Fits every family and orders them by divergence from the empirical density.
pub fn rank_families(sample: &[f64], opts: &RankOptions) -> Result<Ranking> {
    opts.quad.validate()?;
    let reference = ReferenceDensity::build(sample, &opts.reference)?;
    let mut reports = Vec::new();
    let mut excluded = Vec::new();
    // reference values on each distinct integration range, shared across families
    let mut grids: Vec<((f64, f64), Vec<f64>)> = Vec::new();
    for family in Family::ALL {
        let outcome = fit_mle(family, sample).and_then(|mut r| {
            let (a, b) = kl_range(&reference, &r.params, opts.quad.range_pad);
            let kl = match opts.quad.scheme {
                QuadratureScheme::Trapezoid if a.is_finite() && b.is_finite() && b > a => {
                    let i = match grids.iter().position(|(rg, _)| *rg == (a, b)) {
                        Some(i) => i,
                        None => {
                            grids.push(((a, b), reference.values_on(a, b, opts.quad.nodes)));
                            grids.len() - 1
                        }
                    };
                    kl_from_values(&grids[i].1, |x| r.params.pdf(x), a, b)?
                }
                _ => kl_divergence(|x| reference.pdf(x), |x| r.params.pdf(x), a, b, &opts.quad)?,
            };
            r.kl_divergence = Some(kl.value);
            r.kl_floor_activations = kl.floor_activations;
            Ok(r)
        });
        match outcome {
            Ok(r) => reports.push(r),
            Err(e) => {
                log::warn!("{family} excluded from ranking: {e}");
                excluded.push((family, e.to_string()));
            }
        }
    }
    if reports.is_empty() {
        return Err(Error::Degenerate("no distribution family could be fitted".into()));
    }
    reports.sort_by(|a, b| {
        a.kl_divergence
            .unwrap()
            .total_cmp(&b.kl_divergence.unwrap())
            .then(a.family.cmp(&b.family))
    });
    Ok(Ranking {
        reports,
        excluded,
        leaked_mass: reference.leaked_mass(),
    })
}

fn fmt_param(v: Option<f64>) -> String {
    crate::fileio::fmt_opt(v)
}

/// Rows of the KL report, stations in id order and families in rank order.
pub fn format_kl_report(rankings: &BTreeMap<String, Ranking>) -> String {
    let mut out = String::from(KL_REPORT_HEADER);
    out.push('\n');
    for (id, ranking) in rankings {
        for r in &ranking.reports {
            let [p1, p2, p3] = r.params.values();
            out.push_str(&format!(
                "{id},{},{},{},{},{},{},{}\n",
                r.family,
                fmt_param(p1),
                fmt_param(p2),
                fmt_param(p3),
                r.log_likelihood,
                fmt_param(r.kl_divergence),
                r.converged
            ));
        }
    }
    out
}

/// Per-network KL values for box plots, ordered by network, family, station.
pub fn format_kl_boxplot(stations: &StationSet, rankings: &BTreeMap<String, Ranking>) -> Result<String> {
    let mut rows: Vec<(Network, Family, &str, f64)> = Vec::new();
    for (id, ranking) in rankings {
        let meta = stations
            .get(id)
            .ok_or_else(|| Error::invalid(format!("station {id:?} missing from the station table")))?;
        for r in &ranking.reports {
            if let Some(kl) = r.kl_divergence {
                rows.push((meta.network, r.family, id.as_str(), kl));
            }
        }
    }
    rows.sort_by(|a, b| (a.0.as_str(), a.1, a.2).cmp(&(b.0.as_str(), b.1, b.2)));
    let mut out = String::from(KL_BOXPLOT_HEADER);
    out.push('\n');
    for (net, fam, id, kl) in rows {
        out.push_str(&format!("{net},{fam},{id},{kl}\n"));
    }
    Ok(out)
}
