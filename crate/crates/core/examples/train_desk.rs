//! Trains the desk-scale network on a small synthetic world held in memory,
//! then evaluates cross-run retrieval on the training places.
//!
//! cargo run --release -p coral --example train_desk [overrides.cfg]

use std::time::Instant;

use coral::config::RunConfig;
use coral::network::CoralNet;
use coral::prepare::simulate_inputs;
use coral::retrieval::{evaluate, DescriptorDatabase};
use coral::synth::plan_dataset;
use coral::training::{describe_all, train};

fn main() -> coral::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(p) => RunConfig::from_file(std::path::Path::new(&p), RunConfig::desk())?,
        None => RunConfig::desk(),
    };
    let dcfg = cfg.dataset()?;
    let t0 = Instant::now();
    let ds = plan_dataset(&dcfg)?;
    let inputs = simulate_inputs(&ds, &dcfg, &cfg)?;
    println!("prepared {} samples in {:.1?}", inputs.len(), t0.elapsed());

    let mut net = CoralNet::<f32>::new(cfg.arch.clone(), cfg.seed)?;
    let t1 = Instant::now();
    let report = train(&mut net, &ds.samples, &inputs, &cfg.train_config(), None, |r| {
        if r.step % 20 == 0 {
            println!("step {:4} epoch {} loss {:.4}", r.step, r.epoch, r.loss);
        }
    })?;
    let steps = report.curve.len();
    println!("{steps} steps in {:.1?}", t1.elapsed());
    let first = report.epoch_mean(0).unwrap_or(f64::NAN);
    let last = report.last_epoch().and_then(|e| report.epoch_mean(e)).unwrap_or(f64::NAN);
    println!("mean loss first epoch {first:.4}, last epoch {last:.4}");

    let all: Vec<_> = inputs.iter().collect();
    let descs = describe_all(&net, &all)?;
    let db = DescriptorDatabase::from_samples(&ds.samples, &descs)?;
    let rep = evaluate(&db, &cfg.query_runs(&[0, 1]), cfg.eval.radius)?;
    println!("{}", rep.summary());
    Ok(())
}
