//! Generates a small synthetic station network and writes the input bundle.
//!
//! cargo run --release --example synthetic_network -- [out_dir]

use std::path::PathBuf;

use windfs::fixtures::{self, Sampling, SyntheticSpec};

fn main() -> windfs::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("windfs_synthetic_network"));

    let spec = SyntheticSpec {
        n_stations: 12,
        years: 2,
        sampling: Sampling::Fixed(3600),
        seed: 7,
        ..SyntheticSpec::default()
    };
    let net = fixtures::generate_network(&spec)?;

    println!("station    network  elev_m   records  missing  clipped");
    for ((s, raw), clipped) in net.stations.iter().zip(&net.series).zip(&net.truncated) {
        println!(
            "{:<10} {:<8} {:>6.0} {:>9} {:>8} {:>8}",
            s.station_id,
            s.network,
            s.elevation,
            raw.len(),
            raw.n_missing(),
            clipped
        );
    }

    net.write_bundle(&dir)?;
    println!("bundle written to {}", dir.display());
    Ok(())
}
