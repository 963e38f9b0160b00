//! Procedural worlds with analytic terrain, and simulated LiDAR scans and
//! camera images taken inside them.

use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::elevation::write_cloud;
use crate::error::{CoralError, Result};
use crate::geometry::{wrap_degrees, write_poses, CameraModel, Frame, Point3, Pose, StampedPose};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bump {
    pub x: f64,
    pub y: f64,
    pub height: f64,
    pub sigma: f64,
}

impl Bump {
    /// Contribution is truncated to zero beyond this many sigmas.
    const SUPPORT: f64 = 5.0;

    #[inline]
    fn eval(&self, x: f64, y: f64) -> f64 {
        let r2 = (x - self.x).powi(2) + (y - self.y).powi(2);
        let s2 = (Self::SUPPORT * self.sigma).powi(2);
        if r2 >= s2 {
            0.0
        } else {
            self.height * (-0.5 * r2 / (self.sigma * self.sigma)).exp()
        }
    }
}

/// Axis-aligned box whose top sits `height` above the underlying terrain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxObstacle {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub height: f64,
    pub color: [u8; 3],
}

impl BoxObstacle {
    #[inline]
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Flat colored disc painted on the terrain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, Copy)]
enum Feature {
    Bump(u32),
    Box(u32),
    Landmark(u32),
}

const BUCKET: f64 = 8.0;

#[derive(Debug, Clone, Default)]
struct Buckets {
    x0: f64,
    y0: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<Feature>>,
}

impl Buckets {
    #[inline]
    fn get(&self, x: f64, y: f64) -> &[Feature] {
        let bx = ((x - self.x0) / BUCKET).floor();
        let by = ((y - self.y0) / BUCKET).floor();
        if bx < 0.0 || by < 0.0 || bx >= self.nx as f64 || by >= self.ny as f64 {
            return &[];
        }
        &self.cells[by as usize * self.nx + bx as usize]
    }
}

/// Analytic terrain `h(x, y)` and ground color `c(x, y)`.
#[derive(Debug, Clone)]
pub struct Heightfield {
    pub base: f64,
    pub bumps: Vec<Bump>,
    pub boxes: Vec<BoxObstacle>,
    pub landmarks: Vec<Landmark>,
    /// Phases of the ground texture.
    pub texture: [f64; 4],
    buckets: Buckets,
}

pub const SKY: [u8; 3] = [140, 175, 230];

impl Heightfield {
    pub fn new(base: f64, bumps: Vec<Bump>, boxes: Vec<BoxObstacle>, landmarks: Vec<Landmark>, texture: [f64; 4]) -> Self {
        let mut hf = Heightfield {
            base,
            bumps,
            boxes,
            landmarks,
            texture,
            buckets: Buckets::default(),
        };
        hf.rebuild_index();
        hf
    }

    pub fn flat(base: f64) -> Self {
        Heightfield::new(base, Vec::new(), Vec::new(), Vec::new(), [0.0; 4])
    }

    fn rebuild_index(&mut self) {
        let mut rects: Vec<(Feature, [f64; 4])> = Vec::new();
        for (k, b) in self.bumps.iter().enumerate() {
            let r = Bump::SUPPORT * b.sigma;
            rects.push((Feature::Bump(k as u32), [b.x - r, b.y - r, b.x + r, b.y + r]));
        }
        for (k, b) in self.boxes.iter().enumerate() {
            rects.push((Feature::Box(k as u32), [b.x0, b.y0, b.x1, b.y1]));
        }
        for (k, l) in self.landmarks.iter().enumerate() {
            rects.push((Feature::Landmark(k as u32), [l.x - l.radius, l.y - l.radius, l.x + l.radius, l.y + l.radius]));
        }
        if rects.is_empty() {
            self.buckets = Buckets::default();
            return;
        }
        let x0 = rects.iter().map(|r| r.1[0]).fold(f64::INFINITY, f64::min);
        let y0 = rects.iter().map(|r| r.1[1]).fold(f64::INFINITY, f64::min);
        let x1 = rects.iter().map(|r| r.1[2]).fold(f64::NEG_INFINITY, f64::max);
        let y1 = rects.iter().map(|r| r.1[3]).fold(f64::NEG_INFINITY, f64::max);
        let nx = ((x1 - x0) / BUCKET).floor() as usize + 1;
        let ny = ((y1 - y0) / BUCKET).floor() as usize + 1;
        let mut cells = vec![Vec::new(); nx * ny];
        for (f, r) in rects {
            let bx0 = ((r[0] - x0) / BUCKET).floor() as usize;
            let by0 = ((r[1] - y0) / BUCKET).floor() as usize;
            let bx1 = (((r[2] - x0) / BUCKET).floor() as usize).min(nx - 1);
            let by1 = (((r[3] - y0) / BUCKET).floor() as usize).min(ny - 1);
            for by in by0..=by1 {
                for bx in bx0..=bx1 {
                    cells[by * nx + bx].push(f);
                }
            }
        }
        self.buckets = Buckets { x0, y0, nx, ny, cells };
    }

    #[inline]
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let mut h = self.base;
        let mut top = 0.0f64;
        for f in self.buckets.get(x, y) {
            match *f {
                Feature::Bump(k) => h += self.bumps[k as usize].eval(x, y),
                Feature::Box(k) => {
                    let b = &self.boxes[k as usize];
                    if b.contains(x, y) {
                        top = top.max(b.height);
                    }
                }
                Feature::Landmark(_) => {}
            }
        }
        h + top
    }

    pub fn color(&self, x: f64, y: f64) -> [u8; 3] {
        let mut box_color = None;
        let mut box_top = 0.0;
        let mut disc = None;
        for f in self.buckets.get(x, y) {
            match *f {
                Feature::Landmark(k) => {
                    let l = &self.landmarks[k as usize];
                    if (x - l.x).powi(2) + (y - l.y).powi(2) <= l.radius * l.radius {
                        disc = Some(l.color);
                    }
                }
                Feature::Box(k) => {
                    let b = &self.boxes[k as usize];
                    if b.contains(x, y) && b.height > box_top {
                        box_top = b.height;
                        box_color = Some(b.color);
                    }
                }
                Feature::Bump(_) => {}
            }
        }
        if let Some(c) = box_color.or(disc) {
            return c;
        }
        let p = &self.texture;
        let g = 0.75 + 0.15 * (0.9 * x + p[0]).sin() * (0.7 * y + p[1]).sin() + 0.1 * (0.23 * x + 0.31 * y + p[2]).sin();
        let tint = 0.5 + 0.5 * (0.05 * x - 0.04 * y + p[3]).sin();
        [
            (g * (90.0 + 50.0 * tint)).clamp(0.0, 255.0) as u8,
            (g * 130.0).clamp(0.0, 255.0) as u8,
            (g * (100.0 - 40.0 * tint)).clamp(0.0, 255.0) as u8,
        ]
    }

    /// Upper bound on `|grad h|` for worlds without boxes; infinite otherwise.
    pub fn lipschitz_bound(&self) -> f64 {
        if !self.boxes.is_empty() {
            return f64::INFINITY;
        }
        // max over r of h r / s^2 exp(-r^2 / 2s^2) is h / s * exp(-1/2)
        self.bumps.iter().map(|b| b.height.abs() / b.sigma * (-0.5f64).exp()).sum()
    }
}

/// Procedural content scattered around each place centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldParams {
    pub feature_radius: f64,
    pub bumps: (usize, usize),
    pub boxes: (usize, usize),
    pub landmarks: (usize, usize),
}

impl Default for WorldParams {
    fn default() -> Self {
        WorldParams {
            feature_radius: 14.0,
            bumps: (4, 8),
            boxes: (3, 6),
            landmarks: (5, 9),
        }
    }
}

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    // bright, saturated: one channel high, one low
    let mut c = [rng.random_range(0..=255u8), rng.random_range(200..=255u8), rng.random_range(0..=60u8)];
    let k = rng.random_range(0..3);
    c.rotate_left(k);
    if rng.random_bool(0.5) {
        c.swap(0, 2);
    }
    c
}

pub fn generate_world(rng: &mut impl Rng, centers: &[(f64, f64)], p: &WorldParams) -> Heightfield {
    let mut bumps = Vec::new();
    let mut boxes = Vec::new();
    let mut landmarks = Vec::new();
    let r = p.feature_radius;
    let around = |rng: &mut ChaCha8Rng, c: (f64, f64), rmin: f64| {
        let rad = rng.random_range(rmin..r);
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        (c.0 + rad * ang.cos(), c.1 + rad * ang.sin())
    };
    let mut local = ChaCha8Rng::from_rng(rng);
    for &c in centers {
        for _ in 0..local.random_range(p.bumps.0..=p.bumps.1) {
            let (x, y) = around(&mut local, c, 0.0);
            bumps.push(Bump {
                x,
                y,
                height: local.random_range(-0.8..2.5),
                sigma: local.random_range(1.5..4.5),
            });
        }
        for _ in 0..local.random_range(p.boxes.0..=p.boxes.1) {
            // keep the sensor spot itself free
            let (x, y) = around(&mut local, c, 4.0);
            let (w, d) = (local.random_range(1.0..4.0), local.random_range(1.0..4.0));
            let g = local.random_range(60..200u8);
            boxes.push(BoxObstacle {
                x0: x - 0.5 * w,
                y0: y - 0.5 * d,
                x1: x + 0.5 * w,
                y1: y + 0.5 * d,
                height: local.random_range(0.6..2.5),
                color: [g, g.saturating_sub(20), g.saturating_add(10)],
            });
        }
        for _ in 0..local.random_range(p.landmarks.0..=p.landmarks.1) {
            let (x, y) = around(&mut local, c, 2.0);
            landmarks.push(Landmark {
                x,
                y,
                radius: local.random_range(0.8..1.6),
                color: random_color(&mut local),
            });
        }
    }
    let texture = [0.0; 4].map(|_: f64| local.random_range(0.0..std::f64::consts::TAU));
    Heightfield::new(0.0, bumps, boxes, landmarks, texture)
}

/// Spinning LiDAR: `azimuths` evenly spaced columns, one ray per elevation
/// angle (degrees, negative is down).
#[derive(Debug, Clone, PartialEq)]
pub struct LidarPattern {
    pub azimuths: usize,
    pub elevations_deg: Vec<f64>,
    pub max_range: f64,
    /// Marching step before bisection refinement.
    pub step: f64,
}

impl LidarPattern {
    /// Rings chosen so that on flat ground `mount_height` below the sensor
    /// they land every `spacing` meters between `d_min` and `d_max`.
    pub fn ground_uniform(azimuths: usize, mount_height: f64, d_min: f64, d_max: f64, spacing: f64, max_range: f64) -> Self {
        let n = ((d_max - d_min) / spacing).floor() as usize + 1;
        let elevations_deg = (0..n)
            .map(|k| -(mount_height / (d_min + k as f64 * spacing)).atan().to_degrees())
            .collect();
        LidarPattern {
            azimuths,
            elevations_deg,
            max_range,
            step: 0.2,
        }
    }

    pub fn num_rays(&self) -> usize {
        self.azimuths * self.elevations_deg.len()
    }
}

/// Bisection stops once the bracket is shorter than this along the ray.
pub const HIT_TOLERANCE: f64 = 1e-4;

/// First crossing of the ray `o + t d` (`d` unit) with the terrain, for
/// `t` in `(0, max_t]`.
pub fn cast_ray(world: &Heightfield, o: &Point3, d: &Vector3<f64>, max_t: f64, step: f64) -> Option<f64> {
    let f = |t: f64| o.z + t * d.z - world.height(o.x + t * d.x, o.y + t * d.y);
    let mut t_prev = 0.0;
    if f(0.0) <= 0.0 {
        return None;
    }
    let mut t = 0.0;
    while t < max_t {
        t = (t + step).min(max_t);
        if f(t) <= 0.0 {
            let (mut lo, mut hi) = (t_prev, t);
            while hi - lo > HIT_TOLERANCE {
                let mid = 0.5 * (lo + hi);
                if f(mid) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        t_prev = t;
    }
    None
}

/// Hit points in the sensor frame. `pose` maps LiDAR into the world.
pub fn simulate_lidar(world: &Heightfield, pose: &Pose, pattern: &LidarPattern) -> Vec<Point3> {
    let t = pose.translation();
    let o = Point3::new(t.x, t.y, t.z);
    let n_el = pattern.elevations_deg.len();
    let rays: Vec<Option<Point3>> = (0..pattern.num_rays())
        .into_par_iter()
        .map(|k| {
            let az = (k / n_el) as f64 / pattern.azimuths as f64 * std::f64::consts::TAU;
            let el = pattern.elevations_deg[k % n_el].to_radians();
            let ds = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let dw = pose.transform_vector(&ds);
            cast_ray(world, &o, &dw, pattern.max_range, pattern.step).map(|r| Point3::from(ds * r))
        })
        .collect();
    rays.into_iter().flatten().collect()
}

/// Range noise along each ray plus random point dropout.
pub fn perturb_cloud(points: &[Point3], range_sigma: f64, dropout: f64, rng: &mut impl Rng) -> Vec<Point3> {
    let normal = Normal::new(0.0, range_sigma.max(0.0)).unwrap();
    points
        .iter()
        .filter_map(|p| {
            if dropout > 0.0 && rng.random_bool(dropout.min(1.0)) {
                return None;
            }
            let r = p.coords.norm();
            let nr = (r + normal.sample(rng)).max(0.0);
            Some(Point3::from(p.coords * (nr / r)))
        })
        .collect()
}

/// LiDAR -> camera transform for a forward-looking camera at `mount` (LiDAR
/// frame) pitched down by `pitch_deg`.
pub fn camera_extrinsic(mount: &Vector3<f64>, pitch_deg: f64) -> Result<Pose> {
    let p = pitch_deg.to_radians();
    let z = Vector3::new(p.cos(), 0.0, -p.sin());
    let y = Vector3::new(-p.sin(), 0.0, -p.cos());
    let x = y.cross(&z);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Pose::new(r, -(r * mount), Frame::Lidar, Frame::Camera)
}

/// Maximum distance a camera ray is marched before it counts as sky.
pub const CAMERA_RANGE: f64 = 60.0;

/// Ray-cast rendering: ground color at the first terrain hit, sky otherwise.
pub fn render_camera(world: &Heightfield, pose: &Pose, cam: &CameraModel) -> RgbImage {
    let cam_to_world = pose.compose(&cam.extrinsic.inverse()).expect("frames chain");
    let t = cam_to_world.translation();
    let o = Point3::new(t.x, t.y, t.z);
    let (w, h) = (cam.width, cam.height);
    let pixels: Vec<[u8; 3]> = (0..w * h)
        .into_par_iter()
        .map(|k| {
            let (u, v) = ((k % w) as f64, (k / w) as f64);
            let d = cam_to_world.transform_vector(&cam.back_project(u, v));
            match cast_ray(world, &o, &d, CAMERA_RANGE, 0.1) {
                Some(r) => world.color(o.x + r * d.x, o.y + r * d.y),
                None => SKY,
            }
        })
        .collect();
    RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb(pixels[y as usize * w + x as usize]))
}

/// Global illumination change: every channel scaled by `gain`, saturating.
pub fn apply_gain(img: &mut RgbImage, gain: f64) {
    for p in img.pixels_mut() {
        for c in p.0.iter_mut() {
            *c = (*c as f64 * gain).round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// One record of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: u64,
    pub run: u32,
    pub x: f64,
    pub y: f64,
    /// Degrees in `[-180, 180)`.
    pub heading: f64,
    pub cloud_path: PathBuf,
    pub image_path: PathBuf,
}

pub fn write_manifest(path: &Path, metas: &[SampleMeta]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for m in metas {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| CoralError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleMeta>> {
    let file = std::fs::File::open(path).map_err(|e| CoralError::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let metas: Vec<SampleMeta> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    for m in &metas {
        if !(m.x.is_finite() && m.y.is_finite() && (-180.0..180.0).contains(&m.heading)) {
            return Err(CoralError::format(path, format!("sample {} has an invalid pose", m.id)));
        }
    }
    Ok(metas)
}

/// Camera and LiDAR mounted on one vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorRig {
    pub lidar: LidarPattern,
    pub camera: CameraModel,
    /// LiDAR height above the terrain.
    pub mount_height: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_places: usize,
    pub revisits: usize,
    pub place_spacing: f64,
    /// Bounds on the position and heading difference between two visits of
    /// one place; each visit is perturbed by half of them.
    pub max_offset: f64,
    pub max_heading_jitter: f64,
    /// Per-run illumination gain. Runs without an entry draw one from `gain_range`.
    pub run_gains: Vec<f64>,
    pub gain_range: (f64, f64),
    pub dropout: f64,
    pub range_noise: f64,
    pub world: WorldParams,
    pub rig: SensorRig,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub world: Heightfield,
    pub samples: Vec<SampleMeta>,
    pub poses: Vec<Pose>,
    pub gains: Vec<f64>,
}

/// Places on a square lattice `spacing` meters apart.
pub fn place_centers(n: usize, spacing: f64) -> Vec<(f64, f64)> {
    let cols = (n as f64).sqrt().ceil() as usize;
    (0..n).map(|k| ((k % cols) as f64 * spacing, (k / cols) as f64 * spacing)).collect()
}

/// Draws the world, per-run gains and every sample pose; no disk access.
pub fn plan_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.n_places < 2 {
        return Err(CoralError::InvalidArgument(format!("need at least 2 places, got {}", cfg.n_places)));
    }
    if cfg.revisits < 1 {
        return Err(CoralError::InvalidArgument("need at least one run".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = place_centers(cfg.n_places, cfg.place_spacing);
    let world = generate_world(&mut rng, &centers, &cfg.world);
    let gains: Vec<f64> = (0..cfg.revisits)
        .map(|r| match cfg.run_gains.get(r) {
            Some(&g) => g,
            None => rng.random_range(cfg.gain_range.0..=cfg.gain_range.1),
        })
        .collect();
    let base_headings: Vec<f64> = (0..cfg.n_places).map(|_| rng.random_range(-180.0..180.0)).collect();
    let mut samples = Vec::new();
    let mut poses = Vec::new();
    for run in 0..cfg.revisits {
        for (place, &(cx, cy)) in centers.iter().enumerate() {
            let id = (run * cfg.n_places + place) as u64;
            let rad = 0.5 * cfg.max_offset * rng.random::<f64>().sqrt();
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let (x, y) = (cx + rad * ang.cos(), cy + rad * ang.sin());
            let heading = wrap_degrees(base_headings[place] + rng.random_range(-0.5..=0.5) * cfg.max_heading_jitter);
            let z = world.height(x, y) + cfg.rig.mount_height;
            poses.push(Pose::from_euler(Vector3::new(x, y, z), 0.0, 0.0, heading.to_radians(), Frame::Lidar, Frame::World));
            samples.push(SampleMeta {
                id,
                run: run as u32,
                x,
                y,
                heading,
                cloud_path: PathBuf::from(format!("clouds/{id:05}.pcl")),
                image_path: PathBuf::from(format!("images/{id:05}.png")),
            });
        }
    }
    Ok(Dataset {
        world,
        samples,
        poses,
        gains,
    })
}

/// Sensor readings of one sample, with its run's perturbations applied.
pub fn simulate_sample(ds: &Dataset, cfg: &DatasetConfig, k: usize) -> (Vec<Point3>, RgbImage) {
    let meta = &ds.samples[k];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(meta.id + 1);
    let clean = simulate_lidar(&ds.world, &ds.poses[k], &cfg.rig.lidar);
    let cloud = perturb_cloud(&clean, cfg.range_noise, cfg.dropout, &mut rng);
    let mut img = render_camera(&ds.world, &ds.poses[k], &cfg.rig.camera);
    apply_gain(&mut img, ds.gains[meta.run as usize]);
    (cloud, img)
}

/// Generates a dataset under `out`: `clouds/`, `images/`, `poses.txt`
/// (timestamp = sample id) and `manifest.csv`. Paths in the manifest are
/// relative to `out`.
pub fn make_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Dataset> {
    let ds = plan_dataset(cfg)?;
    for sub in ["clouds", "images"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| CoralError::io(&d, e))?;
    }
    for k in 0..ds.samples.len() {
        let (cloud, img) = simulate_sample(&ds, cfg, k);
        write_cloud(&out.join(&ds.samples[k].cloud_path), &cloud)?;
        let ip = out.join(&ds.samples[k].image_path);
        img.save_with_format(&ip, image::ImageFormat::Png)?;
    }
    let stamped: Vec<StampedPose> = ds
        .samples
        .iter()
        .zip(&ds.poses)
        .map(|(m, p)| StampedPose {
            timestamp: m.id as f64,
            pose: *p,
        })
        .collect();
    write_poses(&out.join("poses.txt"), &stamped)?;
    write_manifest(&out.join("manifest.csv"), &ds.samples)?;
    Ok(ds)
}

pub fn read_image(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => CoralError::io(path, io),
        other => CoralError::Image(other),
    })?;
    Ok(img.to_rgb8())
}
