//! The single `key = value` configuration schema shared by every command.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected with
//! the key named. [`KEYS`] lists every key with its meaning; the defaults
//! come from the chosen [`Preset`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector3;

use crate::elevation::MapperParams;
use crate::error::{CoralError, Result};
use crate::geometry::CameraModel;
use crate::network::ArchConfig;
use crate::retrieval::DEFAULT_RADIUS;
use crate::synth::{camera_extrinsic, DatasetConfig, LidarPattern, SensorRig, WorldParams};
use crate::training::{MiningRules, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = CoralError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(CoralError::Config(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSettings {
    pub n_places: usize,
    pub revisits: usize,
    pub place_spacing: f64,
    pub max_offset: f64,
    pub max_heading_jitter: f64,
    pub run_gains: Vec<f64>,
    pub gain_range: (f64, f64),
    pub dropout: f64,
    pub range_noise: f64,
    pub world: WorldParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarSettings {
    pub azimuths: usize,
    pub mount_height: f64,
    pub ring_min: f64,
    pub ring_max: f64,
    pub ring_spacing: f64,
    pub max_range: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSettings {
    pub hfov_deg: f64,
    pub pitch_deg: f64,
    /// Camera position in the LiDAR frame.
    pub mount: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapSettings {
    pub resolution: f64,
    /// Rendering window is `[sensor_z - height_below, sensor_z + height_above]`.
    pub height_below: f64,
    pub height_above: f64,
    pub mapper: MapperParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub radius: f64,
    /// Runs used as queries; empty means every run except the first.
    pub query_runs: Vec<u32>,
    pub top_k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub data: DataSettings,
    pub lidar: LidarSettings,
    pub camera: CameraSettings,
    pub map: MapSettings,
    pub eval: EvalSettings,
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed: world, runs, network init and tuple sampling"),
    ("width_multiplier", "channel width factor of both streams"),
    ("fusion_mode", "sum | concat"),
    ("fusion_depth", "first (group 2) | four (groups 2-5)"),
    ("modality", "fusion | vision_only | structure_only"),
    ("vlad_clusters", "NetVLAD cluster count K"),
    ("lateral_width", "FPN lateral width (0 = 64 x width_multiplier)"),
    ("descriptor_dim", "output descriptor size"),
    ("mlp_layers", "affine layers in the head"),
    ("image_size", "camera image side in pixels (square)"),
    ("grid_cells", "elevation grid side in cells (square)"),
    ("grid_resolution", "elevation cell size in meters"),
    ("height_below", "render window below the sensor, meters"),
    ("height_above", "render window above the sensor, meters"),
    ("noise_sigma0", "range sensor noise floor sigma, meters"),
    ("noise_k_range", "range-proportional variance factor"),
    ("gate_sigma", "Mahalanobis gate in sigmas"),
    ("outlier_limit", "gate rejections before a cell is re-seeded"),
    ("clearance_margin", "ray clearing margin, meters"),
    ("learning_rate", "Adam step size"),
    ("lr_halve_every", "epochs between learning-rate halvings"),
    ("epochs", "training epochs"),
    ("max_steps", "stop after this many steps (0 = no limit)"),
    ("stage1_epochs", "epochs with random negatives before hard mining"),
    ("alpha", "first loss margin"),
    ("beta", "second loss margin"),
    ("second_term", "negstar_negatives | anchor_negstar"),
    ("positive_radius", "positive pair distance bound, meters"),
    ("positive_heading", "positive pair heading bound, degrees"),
    ("negative_radius", "negative pair minimum distance, meters"),
    ("positives", "positives per tuple"),
    ("negatives", "negatives per tuple"),
    ("bn_momentum", "batch-norm running statistics momentum"),
    ("fixed_tuples", "replay this many once-drawn tuples every epoch (0 = re-mine)"),
    ("n_places", "places in the synthetic world"),
    ("revisits", "runs over all places"),
    ("place_spacing", "lattice spacing between places, meters"),
    ("max_offset", "revisit position perturbation radius, meters"),
    ("max_heading_jitter", "revisit heading perturbation, degrees"),
    ("run_gains", "comma list of per-run illumination gains"),
    ("gain_min", "lower bound of drawn illumination gains"),
    ("gain_max", "upper bound of drawn illumination gains"),
    ("dropout", "per-point LiDAR dropout probability"),
    ("range_noise", "LiDAR range noise sigma, meters"),
    ("feature_radius", "radius around a place holding terrain features, meters"),
    ("lidar_azimuths", "LiDAR azimuth steps per ring"),
    ("mount_height", "LiDAR height above ground, meters"),
    ("ring_min", "nearest ring ground distance, meters"),
    ("ring_max", "farthest ring ground distance, meters"),
    ("ring_spacing", "ground spacing between rings, meters"),
    ("lidar_range", "LiDAR maximum range, meters"),
    ("camera_hfov", "camera horizontal field of view, degrees"),
    ("camera_pitch", "camera downward pitch, degrees"),
    ("camera_mount", "camera position in the LiDAR frame, x,y,z meters"),
    ("eval_radius", "retrieval success radius, meters"),
    ("query_runs", "comma list of query runs (empty = all but run 0)"),
    ("top_k", "candidates printed by query"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CoralError::Config(format!("bad value {v:?} for key {key:?}")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => RunConfig::desk(),
            Preset::Paper => RunConfig::paper(),
        }
    }

    /// Full-scale settings.
    pub fn paper() -> Self {
        RunConfig {
            seed: 0,
            arch: ArchConfig::paper(),
            train: TrainConfig::default(),
            data: DataSettings {
                n_places: 100,
                revisits: 3,
                place_spacing: 70.0,
                max_offset: 5.0,
                max_heading_jitter: 20.0,
                run_gains: vec![1.0],
                gain_range: (0.2, 1.5),
                dropout: 0.05,
                range_noise: 0.01,
                world: WorldParams::default(),
            },
            lidar: LidarSettings {
                azimuths: 360,
                mount_height: 1.8,
                ring_min: 1.0,
                ring_max: 28.0,
                ring_spacing: 0.4,
                max_range: 40.0,
            },
            camera: CameraSettings {
                hfov_deg: 90.0,
                pitch_deg: 25.0,
                mount: [0.2, 0.0, 0.1],
            },
            map: MapSettings {
                resolution: 0.5,
                height_below: 5.0,
                height_above: 5.0,
                mapper: MapperParams::default(),
            },
            eval: EvalSettings {
                radius: DEFAULT_RADIUS,
                query_runs: Vec::new(),
                top_k: 5,
            },
        }
    }

    /// 1/8-width network on a 20-place world; one revisit, so one positive.
    pub fn desk() -> Self {
        let p = RunConfig::paper();
        RunConfig {
            arch: ArchConfig::desk(),
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 5,
                max_steps: Some(200),
                lr_halve_every: 1,
                rules: MiningRules {
                    positives: 1,
                    negatives: 4,
                    ..MiningRules::default()
                },
                ..TrainConfig::default()
            },
            data: DataSettings {
                n_places: 20,
                revisits: 2,
                ..p.data
            },
            lidar: LidarSettings {
                azimuths: 180,
                ring_max: 17.0,
                max_range: 30.0,
                ..p.lidar
            },
            ..p
        }
    }

    pub fn from_file(path: &Path, base: RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoralError::io(path, e))?;
        let mut cfg = base;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| CoralError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| CoralError::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let a = &mut self.arch;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "width_multiplier" => a.width_multiplier = parse(key, v)?,
            "fusion_mode" => a.fusion_mode = v.parse()?,
            "fusion_depth" => a.fusion_depth = v.parse()?,
            "modality" => a.modality = v.parse()?,
            "vlad_clusters" => a.vlad_clusters = parse(key, v)?,
            "lateral_width" => a.lateral_width = parse(key, v)?,
            "descriptor_dim" => a.descriptor_dim = parse(key, v)?,
            "mlp_layers" => a.mlp_layers = parse(key, v)?,
            "image_size" => {
                let s = parse(key, v)?;
                a.image_size = (s, s);
            }
            "grid_cells" => {
                let s = parse(key, v)?;
                a.elevation_size = (s, s);
            }
            "grid_resolution" => self.map.resolution = parse(key, v)?,
            "height_below" => self.map.height_below = parse(key, v)?,
            "height_above" => self.map.height_above = parse(key, v)?,
            "noise_sigma0" => self.map.mapper.noise.sigma0 = parse(key, v)?,
            "noise_k_range" => self.map.mapper.noise.k_range = parse(key, v)?,
            "gate_sigma" => self.map.mapper.gate = parse(key, v)?,
            "outlier_limit" => self.map.mapper.outlier_limit = parse(key, v)?,
            "clearance_margin" => self.map.mapper.clearance_margin = parse(key, v)?,
            "learning_rate" => t.learning_rate = parse(key, v)?,
            "lr_halve_every" => t.lr_halve_every = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "max_steps" => t.max_steps = Some(parse::<usize>(key, v)?).filter(|&s| s > 0),
            "stage1_epochs" => t.stage1_epochs = parse(key, v)?,
            "alpha" => t.loss.alpha = parse(key, v)?,
            "beta" => t.loss.beta = parse(key, v)?,
            "second_term" => t.second_term = v.parse()?,
            "positive_radius" => t.rules.positive_radius = parse(key, v)?,
            "positive_heading" => t.rules.positive_heading_deg = parse(key, v)?,
            "negative_radius" => t.rules.negative_radius = parse(key, v)?,
            "positives" => t.rules.positives = parse(key, v)?,
            "negatives" => t.rules.negatives = parse(key, v)?,
            "bn_momentum" => t.bn_momentum = parse(key, v)?,
            "fixed_tuples" => t.fixed_tuples = parse(key, v)?,
            "n_places" => d.n_places = parse(key, v)?,
            "revisits" => d.revisits = parse(key, v)?,
            "place_spacing" => d.place_spacing = parse(key, v)?,
            "max_offset" => d.max_offset = parse(key, v)?,
            "max_heading_jitter" => d.max_heading_jitter = parse(key, v)?,
            "run_gains" => d.run_gains = parse_list(key, v)?,
            "gain_min" => d.gain_range.0 = parse(key, v)?,
            "gain_max" => d.gain_range.1 = parse(key, v)?,
            "dropout" => d.dropout = parse(key, v)?,
            "range_noise" => d.range_noise = parse(key, v)?,
            "feature_radius" => d.world.feature_radius = parse(key, v)?,
            "lidar_azimuths" => self.lidar.azimuths = parse(key, v)?,
            "mount_height" => self.lidar.mount_height = parse(key, v)?,
            "ring_min" => self.lidar.ring_min = parse(key, v)?,
            "ring_max" => self.lidar.ring_max = parse(key, v)?,
            "ring_spacing" => self.lidar.ring_spacing = parse(key, v)?,
            "lidar_range" => self.lidar.max_range = parse(key, v)?,
            "camera_hfov" => self.camera.hfov_deg = parse(key, v)?,
            "camera_pitch" => self.camera.pitch_deg = parse(key, v)?,
            "camera_mount" => {
                let m: Vec<f64> = parse_list(key, v)?;
                self.camera.mount = m
                    .try_into()
                    .map_err(|_| CoralError::Config(format!("camera_mount needs 3 values, got {v:?}")))?;
            }
            "eval_radius" => self.eval.radius = parse(key, v)?,
            "query_runs" => self.eval.query_runs = parse_list(key, v)?,
            "top_k" => self.eval.top_k = parse(key, v)?,
            other => return Err(CoralError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// The value of every key in [`KEYS`], as `set` accepts it.
    pub fn get(&self, key: &str) -> Option<String> {
        let a = &self.arch;
        let t = &self.train;
        let d = &self.data;
        let m = &self.map.mapper;
        Some(match key {
            "seed" => self.seed.to_string(),
            "width_multiplier" => a.width_multiplier.to_string(),
            "fusion_mode" => a.fusion_mode.to_string(),
            "fusion_depth" => a.fusion_depth.to_string(),
            "modality" => a.modality.to_string(),
            "vlad_clusters" => a.vlad_clusters.to_string(),
            "lateral_width" => a.lateral_width.to_string(),
            "descriptor_dim" => a.descriptor_dim.to_string(),
            "mlp_layers" => a.mlp_layers.to_string(),
            "image_size" => a.image_size.0.to_string(),
            "grid_cells" => a.elevation_size.0.to_string(),
            "grid_resolution" => self.map.resolution.to_string(),
            "height_below" => self.map.height_below.to_string(),
            "height_above" => self.map.height_above.to_string(),
            "noise_sigma0" => m.noise.sigma0.to_string(),
            "noise_k_range" => m.noise.k_range.to_string(),
            "gate_sigma" => m.gate.to_string(),
            "outlier_limit" => m.outlier_limit.to_string(),
            "clearance_margin" => m.clearance_margin.to_string(),
            "learning_rate" => t.learning_rate.to_string(),
            "lr_halve_every" => t.lr_halve_every.to_string(),
            "epochs" => t.epochs.to_string(),
            "max_steps" => t.max_steps.unwrap_or(0).to_string(),
            "stage1_epochs" => t.stage1_epochs.to_string(),
            "alpha" => t.loss.alpha.to_string(),
            "beta" => t.loss.beta.to_string(),
            "second_term" => t.second_term.to_string(),
            "positive_radius" => t.rules.positive_radius.to_string(),
            "positive_heading" => t.rules.positive_heading_deg.to_string(),
            "negative_radius" => t.rules.negative_radius.to_string(),
            "positives" => t.rules.positives.to_string(),
            "negatives" => t.rules.negatives.to_string(),
            "bn_momentum" => t.bn_momentum.to_string(),
            "fixed_tuples" => t.fixed_tuples.to_string(),
            "n_places" => d.n_places.to_string(),
            "revisits" => d.revisits.to_string(),
            "place_spacing" => d.place_spacing.to_string(),
            "max_offset" => d.max_offset.to_string(),
            "max_heading_jitter" => d.max_heading_jitter.to_string(),
            "run_gains" => join(&d.run_gains),
            "gain_min" => d.gain_range.0.to_string(),
            "gain_max" => d.gain_range.1.to_string(),
            "dropout" => d.dropout.to_string(),
            "range_noise" => d.range_noise.to_string(),
            "feature_radius" => d.world.feature_radius.to_string(),
            "lidar_azimuths" => self.lidar.azimuths.to_string(),
            "mount_height" => self.lidar.mount_height.to_string(),
            "ring_min" => self.lidar.ring_min.to_string(),
            "ring_max" => self.lidar.ring_max.to_string(),
            "ring_spacing" => self.lidar.ring_spacing.to_string(),
            "lidar_range" => self.lidar.max_range.to_string(),
            "camera_hfov" => self.camera.hfov_deg.to_string(),
            "camera_pitch" => self.camera.pitch_deg.to_string(),
            "camera_mount" => join(&self.camera.mount),
            "eval_radius" => self.eval.radius.to_string(),
            "query_runs" => join(&self.eval.query_runs),
            "top_k" => self.eval.top_k.to_string(),
            _ => return None,
        })
    }

    /// Every key, one `key = value` line each; parses back to `self`.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|(k, doc)| format!("# {doc}\n{k} = {}\n", self.get(k).expect("every key has a value")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let d = &self.data;
        let bad = |msg: String| Err(CoralError::Config(msg));
        if !(d.gain_range.0 > 0.0 && d.gain_range.0 <= d.gain_range.1) {
            return bad(format!("gain range {:?} must be positive and ordered", d.gain_range));
        }
        if !(0.0..1.0).contains(&d.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", d.dropout));
        }
        if !(self.map.height_below + self.map.height_above > 0.0) {
            return bad("height window is empty".into());
        }
        if !(self.map.resolution > 0.0) {
            return bad(format!("grid resolution {} must be positive", self.map.resolution));
        }
        if self.train.rules.positives == 0 || self.train.rules.negatives == 0 {
            return bad("tuples need at least one positive and one negative".into());
        }
        if self.eval.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        Ok(())
    }

    pub fn rig(&self) -> Result<SensorRig> {
        let l = &self.lidar;
        let c = &self.camera;
        let ext = camera_extrinsic(&Vector3::from(c.mount), c.pitch_deg)?;
        let (h, w) = self.arch.image_size;
        Ok(SensorRig {
            lidar: LidarPattern::ground_uniform(l.azimuths, l.mount_height, l.ring_min, l.ring_max, l.ring_spacing, l.max_range),
            camera: CameraModel::with_fov(w, h, c.hfov_deg, ext)?,
            mount_height: l.mount_height,
        })
    }

    pub fn dataset(&self) -> Result<DatasetConfig> {
        let d = &self.data;
        Ok(DatasetConfig {
            seed: self.seed,
            n_places: d.n_places,
            revisits: d.revisits,
            place_spacing: d.place_spacing,
            max_offset: d.max_offset,
            max_heading_jitter: d.max_heading_jitter,
            run_gains: d.run_gains.clone(),
            gain_range: d.gain_range,
            dropout: d.dropout,
            range_noise: d.range_noise,
            world: d.world,
            rig: self.rig()?,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Query runs, resolving the empty default against the runs present.
    pub fn query_runs(&self, runs: &[u32]) -> Vec<u32> {
        if self.eval.query_runs.is_empty() {
            let first = runs.iter().min().copied().unwrap_or(0);
            let mut q: Vec<u32> = runs.iter().copied().filter(|&r| r != first).collect();
            q.sort_unstable();
            q.dedup();
            q
        } else {
            self.eval.query_runs.clone()
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}
