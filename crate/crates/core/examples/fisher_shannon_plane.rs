//! Fisher information, entropy power and their product for known densities
//! and for the remainders of a synthetic network.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use windfs::fixtures::{self, Sampling, SyntheticSpec};
use windfs::infometrics::{self, FsOutcome, DEFAULT_MIN_SAMPLE};
use windfs::ingest;
use windfs::kde::BandwidthRule;
use windfs::quadrature::QuadratureSpec;
use windfs::stl::{self, StlParams};

fn main() -> windfs::Result<()> {
    let quad = QuadratureSpec::default();
    let rule = BandwidthRule::Silverman;

    // A Gaussian sits on the lower bound of the product.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let normal = Normal::new(0.0, 2.0).unwrap();
    let sample: Vec<f64> = (0..4000).map(|_| normal.sample(&mut rng)).collect();
    let m = infometrics::fs_metrics(&sample, &rule, &quad, DEFAULT_MIN_SAMPLE)?;
    println!("gaussian sd=2: fim {:.4} (exact 0.25), power {:.4} (exact 4), product {:.4}", m.fim, m.entropy_power, m.fs_complexity);

    let spec = SyntheticSpec {
        n_stations: 16,
        years: 3,
        sampling: Sampling::Fixed(10800),
        seed: 21,
        ..SyntheticSpec::default()
    };
    let net = fixtures::generate_network(&spec)?;
    let mut outcomes = BTreeMap::new();
    for raw in &net.series {
        let daily = ingest::fill_short_gaps(&ingest::aggregate_daily(raw, ingest::DEFAULT_MIN_COVERAGE)?, 3);
        let rem = stl::remainder_of(&daily, &StlParams::periodic(365, daily.len()))?;
        let outcome = match infometrics::fs_metrics(&rem, &rule, &quad, DEFAULT_MIN_SAMPLE) {
            Ok(m) => FsOutcome::Metrics(m),
            Err(e) => FsOutcome::Excluded(e.to_string()),
        };
        outcomes.insert(raw.station_id.clone(), outcome);
    }

    println!();
    print!("{}", infometrics::format_fs_plane(&infometrics::fs_plane(&net.stations, &outcomes)?));
    Ok(())
}
