//! Aggregates raw sub-daily records to daily means and fills short gaps.

use windfs::fixtures::{self, Sampling, SyntheticSpec};
use windfs::ingest::{self, StationQc, DEFAULT_MIN_COVERAGE, MIN_RETAINED_FRACTION};

fn main() -> windfs::Result<()> {
    let spec = SyntheticSpec {
        n_stations: 4,
        years: 2,
        sampling: Sampling::Fixed(1800),
        missing_rate: 0.05,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let net = fixtures::generate_network(&spec)?;

    println!("{}", ingest::QC_HEADER);
    for raw in &net.series {
        let daily = ingest::aggregate_daily(raw, DEFAULT_MIN_COVERAGE)?;
        let filled = ingest::fill_short_gaps(&daily, 3);
        println!("{}", StationQc::assess(raw, &filled, MIN_RETAINED_FRACTION).csv_row());
    }

    let raw = &net.series[0];
    let daily = ingest::fill_short_gaps(&ingest::aggregate_daily(raw, DEFAULT_MIN_COVERAGE)?, 3);
    println!();
    for line in ingest::format_daily_csv(&daily).lines().take(8) {
        println!("{line}");
    }
    Ok(())
}
