//! Splits a daily series into trend, seasonal and remainder components.

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use windfs::ingest::DailySeries;
use windfs::stats;
use windfs::stl::{self, StlParams};

fn main() -> windfs::Result<()> {
    let n = 4 * 365;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.8).unwrap();
    let values: Vec<f64> = (0..n)
        .map(|t| {
            let season = 1.5 * (2.0 * std::f64::consts::PI * t as f64 / 365.0).cos();
            let trend = 4.0 + 0.0005 * t as f64;
            (trend + season + noise.sample(&mut rng)).max(0.0)
        })
        .collect();
    let start = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
    let series = DailySeries::from_values(start, values.clone());

    let params = StlParams::periodic(365, n);
    let d = stl::stl_decompose(&series, &params)?;

    let worst = (0..n)
        .map(|i| (values[i] - d.trend[i] - d.seasonal[i] - d.remainder[i].unwrap()).abs())
        .fold(0.0, f64::max);
    let rem = d.remainder_sample();
    println!("days              {n}");
    println!("trend range       {:.3} .. {:.3}", d.trend[0], d.trend[n - 1]);
    println!("seasonal amp      {:.3}", d.seasonal.iter().cloned().fold(f64::MIN, f64::max));
    println!("remainder mean    {:.4}", stats::mean(&rem));
    println!("remainder sd      {:.4}", stats::std_dev(&rem));
    println!("additivity error  {worst:.2e}");
    Ok(())
}
