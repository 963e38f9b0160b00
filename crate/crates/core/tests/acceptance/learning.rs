//! Criteria 5 and 6: training runs at desk scale.

use std::path::Path;
use std::process::Command;

use coral::config::RunConfig;
use coral::network::{CoralNet, FusionDepth, FusionMode, Modality};
use coral::prepare::simulate_inputs;
use coral::retrieval::{evaluate, DescriptorDatabase};
use coral::synth::plan_dataset;
use coral::training::{describe_all, train};

use crate::Outcome;

pub const LOSS_RATIO: f64 = 0.1;
pub const OVERFIT_SEED: u64 = 7;
/// Illumination gain of the query run; the reference run keeps gain 1.
pub const QUERY_GAIN: f64 = 0.2;
pub const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn coral(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_coral")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("coral {} exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn epoch_means(loss_csv: &Path) -> Result<Vec<f64>, String> {
    let text = std::fs::read_to_string(loss_csv).map_err(|e| e.to_string())?;
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (epoch, loss): (usize, f64) = (f[1].parse().map_err(|_| "bad epoch")?, f[2].parse().map_err(|_| "bad loss")?);
        if sums.len() <= epoch {
            sums.resize(epoch + 1, (0.0, 0));
        }
        sums[epoch].0 += loss;
        sums[epoch].1 += 1;
    }
    Ok(sums.iter().filter(|s| s.1 > 0).map(|s| s.0 / s.1 as f64).collect())
}

fn overfit_inner(dir: &Path) -> Result<Outcome, String> {
    let p = |q: &Path| q.to_str().unwrap().to_owned();
    let (data, run, eval) = (dir.join("data"), dir.join("run"), dir.join("eval"));
    let seed = OVERFIT_SEED.to_string();
    coral(&["--seed", &seed, "gen-data", "--out", &p(&data)])?;
    coral(&["--seed", &seed, "build-map", "--data", &p(&data)])?;
    coral(&["--seed", &seed, "train", "--data", &p(&data), "--out", &p(&run)])?;
    let ckpt = p(&run.join("checkpoints/final.ckpt"));
    let stdout = coral(&["--seed", &seed, "evaluate", "--data", &p(&data), "--checkpoint", &ckpt, "--out", &p(&eval)])?;
    let summary = stdout.lines().find(|l| l.starts_with("recall@1=")).ok_or("no recall line")?;
    let recall: f64 = summary.trim_start_matches("recall@1=").split_whitespace().next().unwrap().parse().map_err(|_| "bad recall")?;
    let means = epoch_means(&run.join("loss.csv"))?;
    let (first, last) = (means[0], *means.last().unwrap());
    Ok(Outcome {
        pass: last < LOSS_RATIO * first && recall == 1.0,
        detail: format!(
            "seed {OVERFIT_SEED}: epoch-mean loss {first:.4} -> {last:.4} ({:.1}% of initial, need < {:.0}%), {summary}",
            100.0 * last / first,
            100.0 * LOSS_RATIO
        ),
    })
}

pub fn overfit() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    overfit_inner(dir.path()).unwrap_or_else(|e| Outcome { pass: false, detail: e })
}

/// recall@1 of run-1 queries (dark) against run 0 (reference) for each
/// model variant trained on the same data.
fn ablation_seed(seed: u64) -> [f64; 3] {
    let mut cfg = RunConfig::desk();
    cfg.seed = seed;
    cfg.data.run_gains = vec![1.0, QUERY_GAIN];
    let dcfg = cfg.dataset().unwrap();
    let ds = plan_dataset(&dcfg).unwrap();
    let inputs = simulate_inputs(&ds, &dcfg, &cfg).unwrap();
    let all: Vec<_> = inputs.iter().collect();
    [Modality::VisionOnly, Modality::StructureOnly, Modality::Fusion].map(|m| {
        let mut c = cfg.clone();
        c.arch.modality = m;
        c.arch.fusion_mode = FusionMode::Concat;
        c.arch.fusion_depth = FusionDepth::Four;
        let mut net = CoralNet::<f32>::new(c.arch.clone(), seed).unwrap();
        train(&mut net, &ds.samples, &inputs, &c.train_config(), None, |_| {}).unwrap();
        let descs = describe_all(&net, &all).unwrap();
        let db = DescriptorDatabase::from_samples(&ds.samples, &descs).unwrap();
        evaluate(&db, &[1], c.eval.radius).unwrap().recall_1
    })
}

pub fn ablation() -> Outcome {
    let per_seed: Vec<[f64; 3]> = ABLATION_SEEDS.iter().map(|&s| ablation_seed(s)).collect();
    let mean = |k: usize| per_seed.iter().map(|r| r[k]).sum::<f64>() / per_seed.len() as f64;
    let (vision, structure, fusion) = (mean(0), mean(1), mean(2));
    let rows: Vec<String> = per_seed.iter().map(|r| format!("{:.2}/{:.2}/{:.2}", r[0], r[1], r[2])).collect();
    Outcome {
        pass: structure >= vision && fusion >= structure,
        detail: format!(
            "query gain {QUERY_GAIN}: mean recall@1 vision {vision:.3}, structure {structure:.3}, con-four {fusion:.3} (per seed v/s/f: {})",
            rows.join(" ")
        ),
    }
}
