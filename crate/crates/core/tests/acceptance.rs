//! Acceptance suite: one test per criterion, each printing a single
//! `ACCEPTANCE <n> PASS|FAIL` line with the measured values.
//!
//! Run with `cargo test --release -p windfs --test acceptance -- --nocapture`.
//! Criteria share one lock so their runtimes are measured without contention.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};

use windfs::distributions::{kl_divergence, rank_families, DistParams, RankOptions, ReferenceKind};
use windfs::fixtures::{generate_known_density_sample, generate_network, Coupling, Sampling, SyntheticSpec};
use windfs::infometrics::{fs_metrics, FsMetrics};
use windfs::ingest::{aggregate_daily, fill_short_gaps, DailySeries};
use windfs::kde::{BandwidthRule, DensityEstimate};
use windfs::quadrature::QuadratureSpec;
use windfs::spatial::{
    covariate_correlation, feasible_candidates, select_k, shuffle_test, KnnModel, Weighting, DEFAULT_K_CANDIDATES,
};
use windfs::stats;
use windfs::stl::{stl_decompose, StlParams};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, title: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n:>2} {} {title}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {n} ({title}) failed: {detail}");
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn normal_sample(sigma: f64, m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, sigma).unwrap();
    (0..m).map(|_| n.sample(&mut rng)).collect()
}

fn metrics(x: &[f64], rule: &BandwidthRule) -> FsMetrics {
    fs_metrics(x, rule, &QuadratureSpec::default(), 2).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

#[test]
fn criterion_01_gaussian_oracle() {
    let _g = serial();
    let mut pass = true;
    let mut detail = Vec::new();
    for (i, sigma) in [0.5f64, 1.0, 2.0].into_iter().enumerate() {
        let x = normal_sample(sigma, 10_000, 100 + i as u64);
        let t = Instant::now();
        let m = metrics(&x, &BandwidthRule::Silverman);
        let dt = t.elapsed();
        let h = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln();
        let (ef, eh, en) = (rel(m.fim, 1.0 / (sigma * sigma)), rel(m.entropy, h), rel(m.entropy_power, sigma * sigma));
        pass &= ef < 0.10 && eh < 0.02 && en < 0.05 && dt < Duration::from_secs(5);
        detail.push(format!(
            "sigma={sigma}: fim err {:.2}% (<10%), H err {:.2}% (<2%), N_X err {:.2}% (<5%), {}",
            100.0 * ef,
            100.0 * eh,
            100.0 * en,
            secs(dt)
        ));
    }
    verdict(1, "Gaussian oracle", pass, &detail.join("; "));
}

/// Seeded draw from one of several shapes, cycling through them by index.
fn mixed_sample(i: usize, m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match i % 7 {
        0 => normal_sample(1.0 + (i % 5) as f64, m, seed),
        1 => DistParams::gamma(2.0 + (i % 3) as f64, 1.5).unwrap().sample(&mut rng, m),
        2 => DistParams::weibull(1.3 + 0.4 * (i % 4) as f64, 3.0).unwrap().sample(&mut rng, m),
        3 => DistParams::gev(2.0, 1.0, -0.2 + 0.1 * (i % 5) as f64).unwrap().sample(&mut rng, m),
        4 => (0..m).map(|_| rng.random::<f64>() * 4.0).collect(),
        5 => {
            let t = StudentT::new(3.0).unwrap();
            (0..m).map(|_| t.sample(&mut rng)).collect()
        }
        _ => {
            let n = Normal::new(0.0, 0.5).unwrap();
            (0..m)
                .map(|_| n.sample(&mut rng) + if rng.random::<bool>() { 3.0 } else { -3.0 })
                .collect()
        }
    }
}

#[test]
fn criterion_02_stam_bound() {
    let _g = serial();
    let t = Instant::now();
    let sizes = [500usize, 1000, 2000, 5000];
    let mut min_product = f64::INFINITY;
    for i in 0..200 {
        let x = mixed_sample(i, sizes[i % sizes.len()], 2000 + i as u64);
        min_product = min_product.min(metrics(&x, &BandwidthRule::Silverman).fs_complexity);
    }
    let mut medians = Vec::new();
    for m in [500usize, 2000, 10_000] {
        let products: Vec<f64> = (0..25)
            .map(|r| metrics(&normal_sample(1.0, m, 5000 + r), &BandwidthRule::Silverman).fs_complexity)
            .collect();
        medians.push(stats::median(&products));
    }
    let dt = t.elapsed();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let pass = min_product >= 1.0 - 1e-3 && monotone && dt < Duration::from_secs(120);
    verdict(
        2,
        "Stam bound",
        pass,
        &format!(
            "min I*N_X over 200 mixed samples {min_product:.6} (>= 0.999); Gaussian medians at M=500/2000/10000 {:.6}/{:.6}/{:.6} (non-increasing: {monotone}); {}",
            medians[0],
            medians[1],
            medians[2],
            secs(dt)
        ),
    );
}

#[test]
fn criterion_03_scaling_and_translation() {
    let _g = serial();
    let base = DistParams::gamma(3.0, 1.2).unwrap().sample(&mut ChaCha8Rng::seed_from_u64(3), 3000);
    let m0 = metrics(&base, &BandwidthRule::Silverman);
    let mut worst: f64 = 0.0;
    for c in [0.01, 0.37, 2.5, 1000.0] {
        let x: Vec<f64> = base.iter().map(|v| v * c).collect();
        let m = metrics(&x, &BandwidthRule::Silverman);
        worst = worst.max(rel(m.entropy_power, c * c * m0.entropy_power));
        worst = worst.max(rel(m.fim, m0.fim / (c * c)));
    }
    for t in [-40.0, 0.5, 1e3] {
        let x: Vec<f64> = base.iter().map(|v| v + t).collect();
        let m = metrics(&x, &BandwidthRule::Silverman);
        worst = worst.max(rel(m.entropy_power, m0.entropy_power));
        worst = worst.max(rel(m.fim, m0.fim));
    }
    verdict(
        3,
        "Scaling and translation identities",
        worst <= 1e-9,
        &format!("largest relative deviation {worst:.3e} (<= 1e-9)"),
    );
}

#[test]
fn criterion_04_closed_form_kl() {
    let _g = serial();
    let quad = QuadratureSpec::default();
    let n = |mu: f64| move |x: f64| (-(x - mu) * (x - mu) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let self_kl = kl_divergence(n(0.0), n(0.0), -12.0, 12.0, &quad).unwrap().value;
    let (e1, e2) = (DistParams::gamma(1.0, 1.0).unwrap(), DistParams::gamma(1.0, 2.0).unwrap());
    let exp_kl = kl_divergence(|x| e1.pdf(x), |x| e2.pdf(x), 0.0, 60.0, &quad).unwrap().value;
    let gauss_kl = kl_divergence(n(0.0), n(1.0), -12.0, 13.0, &quad).unwrap().value;
    let pass = self_kl.abs() <= 1e-9 && (exp_kl - 0.30685).abs() <= 1e-4 && (gauss_kl - 0.5).abs() <= 1e-4;
    verdict(
        4,
        "Closed-form KL",
        pass,
        &format!("D(p||p) = {self_kl:.2e} (|.| <= 1e-9); Exp(1)||Exp(2) = {exp_kl:.6} (0.30685 +- 1e-4); N(0,1)||N(1,1) = {gauss_kl:.6} (0.5 +- 1e-4)"),
    );
}

fn win_rate(params: &DistParams, reference: &ReferenceKind, seed: u64) -> usize {
    (0..50)
        .filter(|s| {
            let x = generate_known_density_sample(params, 10_000, seed + s).unwrap();
            let opts = RankOptions {
                reference: reference.clone(),
                quad: QuadratureSpec::default(),
            };
            rank_families(&x, &opts).unwrap().best().map(|r| r.family) == Some(params.family())
        })
        .count()
}

#[test]
fn criterion_05_distribution_selection() {
    let _g = serial();
    let fixtures = [
        DistParams::gev(2.0, 1.0, 0.1).unwrap(),
        DistParams::gamma(6.0, 2.0).unwrap(),
        DistParams::weibull(2.5, 3.4).unwrap(),
    ];
    let t = Instant::now();
    let kde: Vec<usize> = fixtures
        .iter()
        .enumerate()
        .map(|(i, p)| win_rate(p, &ReferenceKind::default(), 50_000 + 1000 * i as u64))
        .collect();
    let dt = t.elapsed();
    let hist: Vec<usize> = fixtures
        .iter()
        .enumerate()
        .map(|(i, p)| win_rate(p, &ReferenceKind::Histogram, 50_000 + 1000 * i as u64))
        .collect();
    let names: Vec<String> = fixtures.iter().map(|p| p.family().to_string()).collect();
    let pass = kde.iter().all(|&w| w >= 45) && dt < Duration::from_secs(120);
    verdict(
        5,
        "Distribution selection",
        pass,
        &format!(
            "true family ranked first with the default KDE reference: {}={}/50, {}={}/50, {}={}/50 (each >= 45), {}; histogram reference for comparison: {}/{}/{}",
            names[0], kde[0], names[1], kde[1], names[2], kde[2], secs(dt), hist[0], hist[1], hist[2]
        ),
    );
}

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2009, 1, 1).unwrap()
}

fn stl_fixtures() -> Vec<(String, DailySeries)> {
    let mut out = Vec::new();
    let spec = SyntheticSpec {
        n_stations: 4,
        years: 5,
        sampling: Sampling::Fixed(10_800),
        seed: 6,
        ..SyntheticSpec::default()
    };
    let net = generate_network(&spec).unwrap();
    for raw in &net.series {
        out.push((format!("synthetic {}", raw.station_id), fill_short_gaps(&aggregate_daily(raw, 0.8).unwrap(), 3)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut level = 5.0;
    let walk: Vec<Option<f64>> = (0..1500)
        .map(|i| {
            level += rng.random::<f64>() - 0.5;
            let v = level + 2.0 * (i as f64 * 2.0 * std::f64::consts::PI / 365.0).sin();
            (rng.random::<f64>() > 0.05).then_some(v)
        })
        .collect();
    out.push(("random walk with gaps".into(), DailySeries::from_options(start(), walk)));
    out
}

#[test]
fn criterion_06_stl_identities() {
    let _g = serial();
    let t = Instant::now();
    let mut worst_add: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    for (_, s) in stl_fixtures() {
        let p = StlParams::periodic(365, s.len());
        let d = stl_decompose(&s, &p).unwrap();
        for i in 0..s.len() {
            if let (Some(y), Some(r)) = (s.values[i], d.remainder[i]) {
                worst_add = worst_add.max((d.trend[i] + d.seasonal[i] + r - y).abs() / y.abs().max(1e-300));
            }
        }
        for c in [3.7, -250.0] {
            let shifted = DailySeries::from_options(s.start_date, s.values.iter().map(|v| v.map(|x| x + c)).collect());
            let e = stl_decompose(&shifted, &p).unwrap();
            for i in 0..s.len() {
                worst_shift = worst_shift
                    .max((e.trend[i] - d.trend[i] - c).abs())
                    .max((e.seasonal[i] - d.seasonal[i]).abs());
                if let (Some(a), Some(b)) = (e.remainder[i], d.remainder[i]) {
                    worst_shift = worst_shift.max((a - b).abs());
                }
            }
        }
    }
    let amplitude = 2.0;
    let n = 365 * 6;
    let sine: Vec<f64> =
        (0..n).map(|i| 8.0 + amplitude * (2.0 * std::f64::consts::PI * i as f64 / 365.0).sin()).collect();
    let d = stl_decompose(&DailySeries::from_values(start(), sine), &StlParams::periodic(365, n)).unwrap();
    let rms = (d.remainder_sample().iter().map(|r| r * r).sum::<f64>() / n as f64).sqrt();
    let dt = t.elapsed();
    let pass = worst_add <= 1e-9 && rms < 0.01 * amplitude && worst_shift <= 1e-6 && dt < Duration::from_secs(30);
    verdict(
        6,
        "STL identities",
        pass,
        &format!(
            "additivity rel err {worst_add:.2e} (<= 1e-9); sinusoid remainder RMS {:.4}% of amplitude (< 1%); shift deviation {worst_shift:.2e} (<= 1e-6); {}",
            100.0 * rms / amplitude,
            secs(dt)
        ),
    );
}

#[test]
fn criterion_07_knn_oracle() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(5..=50);
        let pts: Vec<(f64, f64)> =
            (0..n).map(|_| (rng.random::<f64>() * 1e4, rng.random::<f64>() * 1e4)).collect();
        let vals: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
        let k = rng.random_range(1..=n);
        let weighting = if rng.random::<bool>() { Weighting::Uniform } else { Weighting::InverseDistance };
        let model = KnnModel::new(pts.clone(), vals.clone(), k, weighting).unwrap();
        let q = (rng.random::<f64>() * 1e4, rng.random::<f64>() * 1e4);
        // oracle: full sort by distance then index, weighted mean of the first k
        let mut order: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (((q.0 - p.0).powi(2) + (q.1 - p.1).powi(2)).sqrt(), i))
            .collect();
        order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let expected = match weighting {
            Weighting::Uniform => order[..k].iter().map(|&(_, i)| vals[i]).sum::<f64>() / k as f64,
            Weighting::InverseDistance => {
                let (mut sw, mut swv) = (0.0, 0.0);
                for &(d, i) in &order[..k] {
                    let w = 1.0 / (d + 1e-9);
                    sw += w;
                    swv += w * vals[i];
                }
                swv / sw
            }
        };
        if model.predict(q).to_bits() != expected.to_bits() {
            mismatches += 1;
        }
    }
    let dt = t.elapsed();
    verdict(
        7,
        "kNN oracle equivalence",
        mismatches == 0 && dt < Duration::from_secs(30),
        &format!("{mismatches} mismatches in 1000 instances (must be 0), {}", secs(dt)),
    );
}

struct StationMetrics {
    points: Vec<(f64, f64)>,
    elevation: Vec<f64>,
    fim: Vec<f64>,
    entropy_power: Vec<f64>,
}

fn network_metrics(seed: u64) -> StationMetrics {
    let spec = SyntheticSpec {
        n_stations: 100,
        coupling: Coupling::Monotone,
        seed,
        ..SyntheticSpec::default()
    };
    let net = generate_network(&spec).unwrap();
    let mut out = StationMetrics {
        points: Vec::new(),
        elevation: Vec::new(),
        fim: Vec::new(),
        entropy_power: Vec::new(),
    };
    for (meta, raw) in net.stations.iter().zip(&net.series) {
        let daily = fill_short_gaps(&aggregate_daily(raw, 0.8).unwrap(), 3);
        let r = stl_decompose(&daily, &StlParams::periodic(365, daily.len())).unwrap().remainder_sample();
        let m = fs_metrics(&r, &BandwidthRule::Silverman, &QuadratureSpec::default(), 100).unwrap();
        out.points.push((meta.x, meta.y));
        out.elevation.push(meta.elevation);
        out.fim.push(m.fim);
        out.entropy_power.push(m.entropy_power);
    }
    out
}

#[test]
fn criterion_08_structure_test() {
    let _g = serial();
    let t = Instant::now();
    let s = network_metrics(808);
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, values) in [("N_X", &s.entropy_power), ("FIM", &s.fim)] {
        let k = select_k(&s.points, values, &feasible_candidates(&DEFAULT_K_CANDIDATES, 100), Weighting::Uniform).unwrap();
        let rep = shuffle_test(&s.points, values, k, Weighting::Uniform, 199, 8080).unwrap();
        let q99 = stats::quantile_sorted(&stats::sorted_copy(&rep.null_skills), 0.99);
        pass &= rep.observed_skill > q99 && rep.p_value <= 0.01;
        detail.push(format!(
            "{name}: k={k} LOO R2 {:.3} vs null q99 {q99:.3}, p={:.3}",
            rep.observed_skill, rep.p_value
        ));
    }
    for (name, values, negative) in [("FIM", &s.fim, true), ("N_X", &s.entropy_power, false)] {
        let c = covariate_correlation(values, &s.elevation, 9999, 8081).unwrap();
        let signs_ok = if negative {
            c.pearson_r < 0.0 && c.spearman_rho < 0.0
        } else {
            c.pearson_r > 0.0 && c.spearman_rho > 0.0
        };
        pass &= signs_ok && c.pearson_p <= 0.01 && c.spearman_p <= 0.01;
        detail.push(format!(
            "{name}~elevation: r={:.3} (p={:.4}), rho={:.3} (p={:.4})",
            c.pearson_r, c.pearson_p, c.spearman_rho, c.spearman_p
        ));
    }
    let dt = t.elapsed();
    pass &= dt < Duration::from_secs(180);
    detail.push(secs(dt));
    verdict(8, "Structure test reproduction", pass, &detail.join("; "));
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(out: &Path) {
    let stages: [&[&str]; 7] = [
        &["synth", "--stations", "100", "--step", "10800"],
        &["ingest"],
        &["decompose"],
        &["fitdist"],
        &["fs"],
        &["map"],
        &["report"],
    ];
    for args in stages {
        let o = Command::new(env!("CARGO_BIN_EXE_windfs"))
            .args(["--out", out.to_str().unwrap(), "--seed", "2024"])
            .args(args)
            .output()
            .unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn criterion_09_determinism() {
    let _g = serial();
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<&PathBuf> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
    let dt = t.elapsed();
    let pass = ta.len() == tb.len() && differing.is_empty() && !ta.is_empty() && dt < Duration::from_secs(600);
    verdict(
        9,
        "Determinism",
        pass,
        &format!(
            "{} files per tree, {} differ (must be 0), {} for both runs",
            ta.len(),
            differing.len() + ta.len().abs_diff(tb.len()),
            secs(dt)
        ),
    );
}

/// Richardson-extrapolated central difference.
fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let d = |h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    (4.0 * d(h / 2.0) - d(h)) / 3.0
}

#[test]
fn criterion_10_finite_difference_audit() {
    let _g = serial();
    let fixtures: Vec<(&str, Vec<f64>)> = vec![
        ("gaussian", normal_sample(1.0, 2000, 10)),
        ("gamma", DistParams::gamma(2.0, 1.0).unwrap().sample(&mut ChaCha8Rng::seed_from_u64(11), 2000)),
        ("bimodal", mixed_sample(6, 2000, 12)),
    ];
    let mut worst: f64 = 0.0;
    for (_, x) in &fixtures {
        let est = DensityEstimate::with_rule(x.clone(), &BandwidthRule::Silverman).unwrap();
        let b = est.bandwidth();
        let (lo, hi) = (est.min() - 3.0 * b, est.max() + 3.0 * b);
        for i in 0..100 {
            let probe = lo + (hi - lo) * (i as f64 + 0.5) / 100.0;
            let fd = central_difference(|t| est.pdf_at(t), probe, 1e-3 * b);
            let d = est.pdf_derivative_at(probe);
            worst = worst.max((d - fd).abs() / d.abs());
        }
    }
    verdict(
        10,
        "Finite-difference audit",
        worst <= 1e-6,
        &format!("largest relative deviation over 3 x 100 probes {worst:.2e} (<= 1e-6)"),
    );
}
