//! Turns raw sensor data (cloud, pose, image) into network inputs.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use image::imageops::{resize, FilterType};
use image::RgbImage;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::elevation::{read_cloud, render_elevation_image, ElevationImage, ElevationMap};
use crate::error::{CoralError, Result};
use crate::geometry::{read_poses, CameraModel, GridSpec, Point3, Pose};
use crate::network::SampleInput;
use crate::nn::Tensor4;
use crate::projection::build_projection_table;
use crate::synth::{read_image, read_manifest, simulate_sample, Dataset, DatasetConfig, SampleMeta};

/// `[1, 3, H, W]` in `[0, 1]`, resized with a triangle filter when needed.
pub fn image_tensor(img: &RgbImage, size: (usize, usize)) -> Tensor4<f32> {
    let (h, w) = size;
    let resized;
    let img = if (img.height() as usize, img.width() as usize) == size {
        img
    } else {
        resized = resize(img, w as u32, h as u32, FilterType::Triangle);
        &resized
    };
    let mut t = Tensor4::zeros([1, 3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, p[c] as f32 / 255.0);
        }
    }
    t
}

/// `[1, 1, cells_y, cells_x]` in `[0, 1]`; row `j`, column `i`.
pub fn elevation_tensor(img: &ElevationImage) -> Tensor4<f32> {
    let data = img.pixels.iter().map(|&v| v as f32 / 255.0).collect();
    Tensor4::from_vec([1, 1, img.height(), img.width()], data).expect("pixel count matches grid")
}

/// Grid centred on the sensor position.
pub fn sample_grid(pose: &Pose, cfg: &RunConfig) -> Result<GridSpec> {
    let (h, w) = cfg.arch.elevation_size;
    let t = pose.translation();
    GridSpec::centered(w, h, cfg.map.resolution, t.x, t.y)
}

/// Single-scan elevation map around the sensor.
pub fn build_sample_map(cloud: &[Point3], pose: &Pose, cfg: &RunConfig) -> Result<ElevationMap> {
    let mut map = ElevationMap::new(sample_grid(pose, cfg)?);
    map.integrate_scan(pose, cloud, &cfg.map.mapper);
    Ok(map)
}

/// Renders with the height window placed relative to the sensor height.
pub fn render_sample(map: &ElevationMap, pose: &Pose, cfg: &RunConfig) -> Result<ElevationImage> {
    let z = pose.translation().z;
    render_elevation_image(map, z - cfg.map.height_below, z + cfg.map.height_above)
}

#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub input: SampleInput,
    pub map: ElevationMap,
    pub elevation: ElevationImage,
}

/// Map, elevation image and projection table for one sample. The table is
/// built on the filtered image so features land on every cell the network sees.
pub fn prepare_sample(cloud: &[Point3], pose: &Pose, rgb: &RgbImage, cam: &CameraModel, cfg: &RunConfig) -> Result<PreparedSample> {
    let map = build_sample_map(cloud, pose, cfg)?;
    let elevation = render_sample(&map, pose, cfg)?;
    let table = build_projection_table(&elevation.to_elevation_map(), pose, cam)?;
    Ok(PreparedSample {
        input: SampleInput {
            image: image_tensor(rgb, cfg.arch.image_size),
            elevation: elevation_tensor(&elevation),
            table: Arc::new(table),
        },
        map,
        elevation,
    })
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub metas: Vec<SampleMeta>,
    pub poses: Vec<Pose>,
}

/// Reads `manifest.csv` and `poses.txt` from a dataset directory; the pose
/// with timestamp equal to a sample id belongs to that sample.
pub fn load_index(dir: &Path) -> Result<LoadedDataset> {
    let metas = read_manifest(&dir.join("manifest.csv"))?;
    let pose_path = dir.join("poses.txt");
    let stamped = read_poses(&pose_path)?;
    let by_stamp: HashMap<u64, Pose> = stamped.iter().map(|s| (s.timestamp as u64, s.pose)).collect();
    let poses = metas
        .iter()
        .map(|m| {
            by_stamp
                .get(&m.id)
                .copied()
                .ok_or_else(|| CoralError::format(&pose_path, format!("no pose for sample {}", m.id)))
        })
        .collect::<Result<_>>()?;
    Ok(LoadedDataset { metas, poses })
}

/// Loads every sample of a dataset directory and prepares it, in parallel.
pub fn load_inputs(dir: &Path, cfg: &RunConfig) -> Result<(LoadedDataset, Vec<SampleInput>)> {
    let idx = load_index(dir)?;
    let cam = cfg.rig()?.camera;
    let inputs = idx
        .metas
        .par_iter()
        .zip(&idx.poses)
        .map(|(m, pose)| {
            let cloud = read_cloud(&dir.join(&m.cloud_path))?;
            let rgb = read_image(&dir.join(&m.image_path))?;
            Ok(prepare_sample(&cloud, pose, &rgb, &cam, cfg)?.input)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((idx, inputs))
}

/// Simulates and prepares every sample in memory, skipping the disk.
pub fn simulate_inputs(ds: &Dataset, dcfg: &DatasetConfig, cfg: &RunConfig) -> Result<Vec<SampleInput>> {
    (0..ds.samples.len())
        .into_par_iter()
        .map(|k| {
            let (cloud, rgb) = simulate_sample(ds, dcfg, k);
            Ok(prepare_sample(&cloud, &ds.poses[k], &rgb, &dcfg.rig.camera, cfg)?.input)
        })
        .collect()
}
