//! Maps a station metric with kNN regression and tests its spatial structure
//! against station-shuffled replicates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use windfs::spatial::{self, Bounds, KnnModel, Weighting, DEFAULT_K_CANDIDATES};

fn main() -> windfs::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let points: Vec<(f64, f64)> = (0..80)
        .map(|_| (rng.random_range(0.0..50_000.0), rng.random_range(0.0..30_000.0)))
        .collect();
    let values: Vec<f64> = points
        .iter()
        .map(|&(x, y)| (x / 12_000.0).sin() + y / 30_000.0 + 0.05 * rng.random::<f64>())
        .collect();

    let weighting = Weighting::InverseDistance;
    let k = spatial::select_k(&points, &values, &DEFAULT_K_CANDIDATES, weighting)?;
    let report = spatial::shuffle_test(&points, &values, k, weighting, 99, 1)?;
    println!("k = {k}");
    println!("observed LOO R2 = {:.3}", report.observed_skill);
    println!("p = {:.3} over {} shuffles", report.p_value, report.n_shuffles);

    let model = KnnModel::new(points.clone(), values, k, weighting)?;
    let bounds = Bounds::around(&points, 2_000.0)?;
    let map = spatial::make_grid_map(&model, &bounds, 1_000.0, 1_000_000)?;
    let path = std::env::temp_dir().join("windfs_knn_map.asc");
    map.write_ascii_grid(&path)?;
    println!("{} x {} grid written to {}", map.ncols, map.nrows, path.display());
    Ok(())
}
