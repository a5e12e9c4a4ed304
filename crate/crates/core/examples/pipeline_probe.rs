//! Full-scale end-to-end probe: runs the full three-phase pipeline on the
//! default synthetic dataset to check learning dynamics and metric levels.
//! Run with --release.

use std::time::Instant;

use tfm_core::config::RunConfig;
use tfm_core::data::{generate_synthetic, SyntheticSpec};
use tfm_core::train::run_pipeline;

fn main() {
    let cfg = RunConfig::default();
    let spec = SyntheticSpec::default();
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(&spec, 0, dir.path()).unwrap();
    let t = Instant::now();
    let outcome = run_pipeline(&cfg, &manifest, None).unwrap();
    println!("wall: {:.1}s", t.elapsed().as_secs_f64());
    for r in &outcome.records {
        println!(
            "{} {:2}  lr {:.5}  loss {:.4}  aux {:.4}  codes {:.1}  ({:.1}s)",
            r.phase, r.epoch, r.lr, r.loss, r.aux, r.codes, r.wall_s
        );
    }
    println!("test report: {:?}", outcome.test_report.values);
    println!("token report: {:?}", outcome.token_report.values);
}
