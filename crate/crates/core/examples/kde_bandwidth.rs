//! Compares the rule-of-thumb bandwidth with leave-one-out likelihood selection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use windfs::kde::{self, BandwidthRule, DensityEstimate};

fn main() -> windfs::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let left = Normal::new(-2.0, 0.6).unwrap();
    let right = Normal::new(2.0, 0.6).unwrap();
    let sample: Vec<f64> = (0..800)
        .map(|i| if i % 2 == 0 { left.sample(&mut rng) } else { right.sample(&mut rng) })
        .collect();

    let silverman = kde::silverman_bandwidth(&sample)?;
    let grid = kde::log_spaced_grid(0.2 * silverman, 2.0 * silverman, 19)?;
    let cv = BandwidthRule::CrossValidation(grid).select(&sample)?;

    println!("silverman  b = {silverman:.4}  loo loglik = {:.2}", kde::loo_log_likelihood(&sample, silverman));
    println!("cv         b = {cv:.4}  loo loglik = {:.2}", kde::loo_log_likelihood(&sample, cv));

    let a = DensityEstimate::new(sample.clone(), silverman)?;
    let b = DensityEstimate::new(sample, cv)?;
    println!("\n     x   f_silverman   f_cv");
    for i in 0..=12 {
        let x = -4.0 + i as f64 * 8.0 / 12.0;
        println!("{x:>6.2}   {:>10.4}   {:>6.4}", a.pdf_at(x), b.pdf_at(x));
    }
    Ok(())
}
