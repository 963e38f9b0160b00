//! Criterion 8: the same seed twice gives identical bytes.

use std::path::{Path, PathBuf};

use coral::commands::{build_maps, evaluate_cmd, gen_data, train_cmd};
use coral::config::RunConfig;

use crate::Outcome;

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn pipeline(cfg: &RunConfig, root: &Path) -> coral::Result<()> {
    let (data, run, eval) = (root.join("data"), root.join("run"), root.join("eval"));
    gen_data(cfg, &data)?;
    build_maps(cfg, &data, &data, true)?;
    train_cmd(cfg, &data, &run, |_, _| {})?;
    evaluate_cmd(cfg, &data, &run.join("checkpoints/final.ckpt"), &eval)?;
    Ok(())
}

pub fn run() -> Outcome {
    let mut cfg = RunConfig::desk();
    cfg.seed = 13;
    cfg.data.n_places = 6;
    cfg.train.max_steps = Some(20);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if let Err(e) = pipeline(&cfg, a.path()).and_then(|_| pipeline(&cfg, b.path())) {
        return Outcome { pass: false, detail: e.to_string() };
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| std::fs::read(a.path().join(f)).ok() != std::fs::read(b.path().join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    let kinds = ["descriptors.desc", "final.ckpt", "report.csv", "loss.csv"];
    let covered = kinds.iter().all(|k| fa.iter().any(|f| f.ends_with(k)));
    Outcome {
        pass: fa == fb && differing.is_empty() && covered,
        detail: format!(
            "{} files compared across two runs (data, maps, tables, checkpoints, descriptors, CSVs); {}",
            fa.len(),
            if differing.is_empty() { "all identical".to_string() } else { format!("differing: {}", differing.join(", ")) }
        ),
    }
}
