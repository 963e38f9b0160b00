//! The command-line operations, callable from code as well.
//!
//! Every command writes only deterministic content (no timestamps), so equal
//! inputs and seeds give byte-identical outputs.

use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::elevation::{read_cloud, read_map, render_elevation_image, write_map, ElevationImage};
use crate::error::{CoralError, Result};
use crate::network::CoralNet;
use crate::prepare::{load_index, load_inputs, prepare_sample};
use crate::retrieval::{evaluate, DescriptorDatabase, EvalReport};
use crate::synth::{make_dataset, read_image};
use crate::training::{describe_all, train, write_loss_csv, TrainReport};

/// Exit status of a failed command.
pub fn exit_code(e: &CoralError) -> i32 {
    match e {
        CoralError::Config(_) | CoralError::Parse { .. } => 1,
        CoralError::NonFinite(_) => 3,
        _ => 2,
    }
}

fn create_dir(d: &Path) -> Result<()> {
    std::fs::create_dir_all(d).map_err(|e| CoralError::io(d, e))
}

fn write_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    let p = out.join("config.txt");
    std::fs::write(&p, cfg.to_text()).map_err(|e| CoralError::io(&p, e))
}

/// Synthetic dataset under `out`, plus the resolved `config.txt`.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    create_dir(out)?;
    let ds = make_dataset(&cfg.dataset()?, out)?;
    write_config(cfg, out)?;
    Ok(ds.samples.len())
}

/// Per sample: `maps/{id}.elv` and `maps/{id}.pgm`; with `dump_tables`,
/// also `tables/{id}.txt` with the projection table.
pub fn build_maps(cfg: &RunConfig, data: &Path, out: &Path, dump_tables: bool) -> Result<usize> {
    let idx = load_index(data)?;
    let cam = cfg.rig()?.camera;
    let maps = out.join("maps");
    create_dir(&maps)?;
    let tables = out.join("tables");
    if dump_tables {
        create_dir(&tables)?;
    }
    for (m, pose) in idx.metas.iter().zip(&idx.poses) {
        let cloud = read_cloud(&data.join(&m.cloud_path))?;
        let rgb = read_image(&data.join(&m.image_path))?;
        let s = prepare_sample(&cloud, pose, &rgb, &cam, cfg)?;
        write_map(&maps.join(format!("{:05}.elv", m.id)), &s.map)?;
        s.elevation.write_pgm(&maps.join(format!("{:05}.pgm", m.id)))?;
        if dump_tables {
            s.input.table.write_text(&tables.join(format!("{:05}.txt", m.id)))?;
        }
    }
    Ok(idx.metas.len())
}

/// PGM from a stored map. Without an explicit window the configured
/// offsets are applied around `sensor_z`.
pub fn render_elev(cfg: &RunConfig, map_path: &Path, out: &Path, window: Option<(f64, f64)>, sensor_z: f64) -> Result<ElevationImage> {
    let map = read_map(map_path)?;
    let (lo, hi) = window.unwrap_or((sensor_z - cfg.map.height_below, sensor_z + cfg.map.height_above));
    let img = render_elevation_image(&map, lo, hi)?;
    img.write_pgm(out)?;
    Ok(img)
}

/// Trains on a dataset directory. Writes `checkpoints/epochNNN.ckpt`,
/// `checkpoints/final.ckpt`, `loss.csv` and `config.txt` under `out`.
pub fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path, mut on_step: impl FnMut(usize, f64)) -> Result<TrainReport> {
    let (idx, inputs) = load_inputs(data, cfg)?;
    let ckpt = out.join("checkpoints");
    create_dir(&ckpt)?;
    write_config(cfg, out)?;
    let mut net = CoralNet::<f32>::new(cfg.arch.clone(), cfg.seed)?;
    let report = train(&mut net, &idx.metas, &inputs, &cfg.train_config(), Some(&ckpt), |r| on_step(r.step, r.loss))?;
    write_loss_csv(&out.join("loss.csv"), &report.curve)?;
    Ok(report)
}

/// Describes every sample with the checkpoint, writes the database
/// (`descriptors.desc` + `descriptors.csv`) and `report.csv`.
pub fn evaluate_cmd(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    let (idx, inputs) = load_inputs(data, cfg)?;
    let mut net = CoralNet::<f32>::new(cfg.arch.clone(), cfg.seed)?;
    net.store.load(checkpoint)?;
    let all: Vec<_> = inputs.iter().collect();
    let descs = describe_all(&net, &all)?;
    if descs.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CoralError::NonFinite("descriptor".into()));
    }
    let db = DescriptorDatabase::from_samples(&idx.metas, &descs)?;
    create_dir(out)?;
    db.save(&out.join("descriptors.desc"))?;
    let mut runs: Vec<u32> = idx.metas.iter().map(|m| m.run).collect();
    runs.sort_unstable();
    runs.dedup();
    let report = evaluate(&db, &cfg.query_runs(&runs), cfg.eval.radius)?;
    report.write_csv(&out.join("report.csv"))?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct QueryArgs {
    pub db: PathBuf,
    /// Descriptor file holding the query; the database itself when `None`.
    pub queries: Option<PathBuf>,
    pub id: u64,
    pub k: usize,
    pub exclude_run: Option<u32>,
}

/// Top-k `(id, squared distance)` for one sample.
pub fn query_cmd(a: &QueryArgs) -> Result<Vec<(u64, f64)>> {
    let db = DescriptorDatabase::load(&a.db)?;
    let src = match &a.queries {
        Some(p) => crate::network::read_descriptors(p)?,
        None => db.records().iter().map(|r| (r.id, r.desc.clone())).collect(),
    };
    let q = src
        .iter()
        .find(|(id, _)| *id == a.id)
        .ok_or_else(|| CoralError::InvalidArgument(format!("no descriptor with id {}", a.id)))?;
    Ok(db.query(a.id, &q.1, a.k, a.exclude_run)?.ranked)
}
