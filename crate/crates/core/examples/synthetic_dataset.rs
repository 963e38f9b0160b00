//! Generates a small synthetic dataset on disk and prints its manifest.
//!
//! cargo run --release -p coral --example synthetic_dataset [out_dir]

use coral::config::RunConfig;
use coral::synth::{make_dataset, read_manifest};

fn main() -> coral::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.data.n_places = 4;
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic_data".into()));
    std::fs::create_dir_all(&out).map_err(|e| coral::CoralError::io(&out, e))?;
    let ds = make_dataset(&cfg.dataset()?, &out)?;
    println!("run gains {:?}", ds.gains);
    for m in read_manifest(&out.join("manifest.csv"))? {
        println!("{:3} run {} at ({:7.2}, {:7.2}) heading {:6.1} -> {}", m.id, m.run, m.x, m.y, m.heading, m.cloud_path.display());
    }
    Ok(())
}
