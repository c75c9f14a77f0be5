//! Runs every pipeline stage through the command-line driver on a small
//! synthetic network.
//!
//! cargo run --release --example full_pipeline -- [out_dir]

use std::path::PathBuf;

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("windfs_full_pipeline"));
    let out = out.to_string_lossy().into_owned();

    let stages: [&[&str]; 7] = [
        &["synth", "--stations", "30", "--years", "3", "--step", "10800"],
        &["ingest"],
        &["decompose"],
        &["fitdist"],
        &["fs"],
        &["map", "--cellsize", "2000", "--shuffles", "99"],
        &["report"],
    ];
    for stage in stages {
        let mut args = vec!["windfs", "--out", &out, "--seed", "42"];
        args.extend_from_slice(stage);
        println!("== {}", stage.join(" "));
        let code = windfs::cli::run(args);
        if code != 0 {
            eprintln!("stage {} exited with {code}", stage[0]);
            std::process::exit(code);
        }
    }
    println!("outputs under {out}");
}
