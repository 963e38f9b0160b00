//! Two-stream descriptor network: a ResNet18-style visual stream with an
//! FPN, a residual structural stream over the elevation image, BEV fusion of
//! projected visual features, NetVLAD aggregation and an MLP head.

use std::fmt;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoralError, Result};
use crate::nn::params::{kaiming, uniform};
use crate::nn::{ParamId, ParamStore, Real, Tape, Tensor4, Var};
use crate::projection::{gather_plan, ProjectionTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Sum,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionDepth {
    /// Fuse once, at the first residual group.
    First,
    /// Fuse at all four residual groups.
    Four,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Fusion,
    VisionOnly,
    StructureOnly,
}

macro_rules! str_enum {
    ($ty:ident { $($v:ident => $s:literal),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = CoralError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($ty::$v),)+
                    other => Err(CoralError::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?} (expected one of: ", $($s, " ",)+ ")"),
                        other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$v => $s,)+ })
            }
        }
    };
}

str_enum!(FusionMode { Sum => "sum", Concat => "concat" });
str_enum!(FusionDepth { First => "first", Four => "four" });
str_enum!(Modality { Fusion => "fusion", VisionOnly => "vision_only", StructureOnly => "structure_only" });

pub const VISUAL_CHANNELS: [usize; 4] = [64, 128, 256, 512];
pub const STRUCT_CHANNELS: [usize; 5] = [64, 64, 128, 192, 256];
/// Basic blocks per residual group of the structural stream (groups 2-5).
pub const STRUCT_BLOCKS: [usize; 4] = [2, 2, 3, 3];
pub const FPN_WIDTH: usize = 64;
pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub width_multiplier: f64,
    pub fusion_mode: FusionMode,
    pub fusion_depth: FusionDepth,
    pub modality: Modality,
    pub vlad_clusters: usize,
    /// FPN lateral width of both streams; 0 means 64 x width_multiplier.
    pub lateral_width: usize,
    pub descriptor_dim: usize,
    /// Affine layers in the head; hidden layers are `descriptor_dim` wide with ReLU.
    pub mlp_layers: usize,
    /// `(height, width)` of the camera image.
    pub image_size: (usize, usize),
    /// `(height, width)` of the elevation image.
    pub elevation_size: (usize, usize),
}

impl ArchConfig {
    pub fn paper() -> Self {
        ArchConfig {
            width_multiplier: 1.0,
            fusion_mode: FusionMode::Concat,
            fusion_depth: FusionDepth::Four,
            modality: Modality::Fusion,
            vlad_clusters: 64,
            lateral_width: 0,
            descriptor_dim: 256,
            mlp_layers: 1,
            image_size: (112, 112),
            elevation_size: (80, 80),
        }
    }

    pub fn desk() -> Self {
        ArchConfig {
            width_multiplier: 0.125,
            vlad_clusters: 8,
            image_size: (56, 56),
            elevation_size: (48, 48),
            lateral_width: 32,
            ..ArchConfig::paper()
        }
    }

    pub fn width(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn fpn_width(&self) -> usize {
        if self.lateral_width > 0 {
            self.lateral_width
        } else {
            self.width(FPN_WIDTH)
        }
    }

    pub fn uses_vision(&self) -> bool {
        self.modality != Modality::StructureOnly
    }

    pub fn uses_structure(&self) -> bool {
        self.modality != Modality::VisionOnly
    }

    /// Residual groups (2..=5) that receive projected visual features.
    pub fn fused_groups(&self) -> Vec<usize> {
        match (self.modality, self.fusion_depth) {
            (Modality::Fusion, FusionDepth::First) => vec![2],
            (Modality::Fusion, FusionDepth::Four) => vec![2, 3, 4, 5],
            _ => Vec::new(),
        }
    }

    /// Spatial size of the visual FPN output (the first residual stage).
    pub fn visual_fpn_size(&self) -> (usize, usize) {
        let f = |s: usize| {
            let stem = (s + 6 - 7) / 2 + 1;
            (stem + 2 - 3) / 2 + 1
        };
        (f(self.image_size.0), f(self.image_size.1))
    }

    /// Spatial size of each of the five structural groups.
    pub fn struct_sizes(&self) -> [(usize, usize); 5] {
        let mut out = [self.elevation_size; 5];
        for g in 1..5 {
            let (h, w) = out[g - 1];
            out[g] = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if ![1.0, 0.5, 0.25, 0.125].contains(&self.width_multiplier) {
            return Err(CoralError::Config(format!(
                "width_multiplier must be one of 1, 1/2, 1/4, 1/8, got {}",
                self.width_multiplier
            )));
        }
        if self.vlad_clusters == 0 || self.descriptor_dim == 0 || self.mlp_layers == 0 {
            return Err(CoralError::Config("vlad_clusters, descriptor_dim and mlp_layers must be >= 1".into()));
        }
        let (ih, iw) = self.image_size;
        if ih < 32 || iw < 32 {
            return Err(CoralError::Config(format!("image size {ih}x{iw} is too small (min 32)")));
        }
        let (fh, fw) = self.visual_fpn_size();
        if ih % fh != 0 || iw % fw != 0 || ih / fh != iw / fw {
            return Err(CoralError::Config(format!(
                "image {ih}x{iw} is not an integer multiple of its feature map {fh}x{fw}"
            )));
        }
        let (eh, ew) = self.elevation_size;
        if eh < 16 || ew < 16 {
            return Err(CoralError::Config(format!("elevation size {eh}x{ew} is too small (min 16)")));
        }
        let sizes = self.struct_sizes();
        for g in self.fused_groups() {
            let (h, w) = sizes[g - 1];
            if eh % h != 0 || ew % w != 0 || eh / h != ew / w {
                return Err(CoralError::Config(format!(
                    "cannot pool the {eh}x{ew} BEV map to group {g}'s {h}x{w}: ratio is not an integer"
                )));
            }
        }
        Ok(())
    }
}

/// One training or inference sample, already converted to network inputs.
#[derive(Debug, Clone)]
pub struct SampleInput {
    /// `[1, 3, H, W]`, values in `[0, 1]`.
    pub image: Tensor4<f32>,
    /// `[1, 1, h, w]`, values in `[0, 1]`.
    pub elevation: Tensor4<f32>,
    pub table: Arc<ProjectionTable>,
}

pub struct CoralNet<T> {
    pub cfg: ArchConfig,
    pub store: ParamStore<T>,
}

struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Real> Init<'_, T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.store.add(format!("{name}.weight"), kaiming([cout, cin, k, k], self.rng), true);
        if bias {
            self.store.add(format!("{name}.bias"), Tensor4::zeros([1, cout, 1, 1]), true);
        }
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.store.add(format!("{name}.gamma"), Tensor4::filled([1, c, 1, 1], T::one()), true);
        self.store.add(format!("{name}.beta"), Tensor4::zeros([1, c, 1, 1]), true);
        self.store.add(format!("{name}.running_mean"), Tensor4::zeros([1, c, 1, 1]), false);
        self.store.add(format!("{name}.running_var"), Tensor4::filled([1, c, 1, 1], T::one()), false);
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.conv(&format!("{name}.conv"), cin, cout, k, false);
        self.bn(&format!("{name}.bn"), cout);
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize) {
        self.conv_bn(&format!("{name}.a"), cin, cout, 3);
        self.conv_bn(&format!("{name}.b"), cout, cout, 3);
        if stride != 1 || cin != cout {
            self.conv_bn(&format!("{name}.down"), cin, cout, 1);
        }
    }

    fn fpn(&mut self, name: &str, inputs: &[usize], width: usize) {
        for (k, &c) in inputs.iter().enumerate() {
            self.conv(&format!("{name}.lat{k}"), c, width, 1, true);
        }
        self.conv(&format!("{name}.smooth"), width, width, 3, true);
    }
}

impl<T: Real> CoralNet<T> {
    pub fn new(cfg: ArchConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let lw = cfg.fpn_width();
        if cfg.uses_vision() {
            let ch = VISUAL_CHANNELS.map(|c| cfg.width(c));
            init.conv_bn("vis.stem", 3, ch[0], 7);
            let mut cin = ch[0];
            for (l, &c) in ch.iter().enumerate() {
                for b in 0..2 {
                    let stride = if l > 0 && b == 0 { 2 } else { 1 };
                    init.block(&format!("vis.layer{}.{b}", l + 1), cin, c, stride);
                    cin = c;
                }
            }
            init.fpn("vis.fpn", &ch, lw);
        }
        if cfg.uses_structure() {
            let ch = STRUCT_CHANNELS.map(|c| cfg.width(c));
            init.conv_bn("str.g1.0", 1, ch[0], 3);
            init.conv_bn("str.g1.1", ch[0], ch[0], 3);
            let fused = cfg.fused_groups();
            let mut cin = ch[0];
            let mut outs = Vec::new();
            for g in 2..=5 {
                let c = ch[g - 1];
                for b in 0..STRUCT_BLOCKS[g - 2] {
                    init.block(&format!("str.g{g}.{b}"), cin, c, if b == 0 { 2 } else { 1 });
                    cin = c;
                }
                if fused.contains(&g) {
                    init.conv(&format!("str.fuse{g}"), lw, c, 1, false);
                    if cfg.fusion_mode == FusionMode::Concat {
                        cin = 2 * c;
                    }
                }
                outs.push(cin);
            }
            init.fpn("str.fpn", &outs[1..], lw);
        }
        let (k, d) = (cfg.vlad_clusters, lw);
        init.conv("vlad.assign", d, k, 1, true);
        init.store.add("vlad.centers", uniform([k, d, 1, 1], 0.1, init.rng), true);
        let mut nin = k * d;
        for l in 0..cfg.mlp_layers {
            let name = format!("mlp.{l}");
            init.store.add(format!("{name}.weight"), kaiming([cfg.descriptor_dim, nin, 1, 1], init.rng), true);
            init.store.add(format!("{name}.bias"), Tensor4::zeros([1, cfg.descriptor_dim, 1, 1]), true);
            nin = cfg.descriptor_dim;
        }
        Ok(CoralNet { cfg, store })
    }

    fn id(&self, name: &str) -> Result<ParamId> {
        self.store
            .id(name)
            .ok_or_else(|| CoralError::Shape(format!("network has no parameter {name}")))
    }

    fn conv(&self, tape: &mut Tape<'_, T>, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.id(&format!("{name}.weight"))?;
        let k = self.store.get(w).dims()[2];
        let b = self.store.id(&format!("{name}.bias"));
        tape.conv2d(x, w, b, stride, k / 2)
    }

    fn conv_bn(&self, tape: &mut Tape<'_, T>, x: Var, name: &str, stride: usize, relu: bool) -> Result<Var> {
        let y = self.conv(tape, x, &format!("{name}.conv"), stride)?;
        let bn = |s: &str| self.id(&format!("{name}.bn.{s}"));
        let y = tape.batch_norm(y, bn("gamma")?, bn("beta")?, bn("running_mean")?, bn("running_var")?)?;
        Ok(if relu { tape.relu(y) } else { y })
    }

    fn block(&self, tape: &mut Tape<'_, T>, x: Var, name: &str, stride: usize) -> Result<Var> {
        let y = self.conv_bn(tape, x, &format!("{name}.a"), stride, true)?;
        let y = self.conv_bn(tape, y, &format!("{name}.b"), 1, false)?;
        let short = if self.store.id(&format!("{name}.down.conv.weight")).is_some() {
            self.conv_bn(tape, x, &format!("{name}.down"), stride, false)?
        } else {
            x
        };
        let s = tape.add(y, short)?;
        Ok(tape.relu(s))
    }

    /// Top-down merge onto the first (largest) input's resolution.
    fn fpn(&self, tape: &mut Tape<'_, T>, inputs: &[Var], name: &str) -> Result<Var> {
        let mut top: Option<Var> = None;
        for (k, &x) in inputs.iter().enumerate().rev() {
            let lat = self.conv(tape, x, &format!("{name}.lat{k}"), 1)?;
            top = Some(match top {
                None => lat,
                Some(t) => {
                    let d = tape.value(lat).dims();
                    let up = tape.resize_nearest(t, d[2], d[3])?;
                    tape.add(lat, up)?
                }
            });
        }
        self.conv(tape, top.expect("fpn needs inputs"), &format!("{name}.smooth"), 1)
    }

    /// Visual backbone; returns the FPN map at the first residual stage.
    pub fn visual_stream(&self, tape: &mut Tape<'_, T>, img: Var) -> Result<Var> {
        let d = tape.value(img).dims();
        if (d[1], d[2], d[3]) != (3, self.cfg.image_size.0, self.cfg.image_size.1) {
            return Err(CoralError::Shape(format!(
                "image input {:?}, expected [B, 3, {}, {}]",
                d, self.cfg.image_size.0, self.cfg.image_size.1
            )));
        }
        let x = self.conv_bn(tape, img, "vis.stem", 2, true)?;
        let mut x = tape.max_pool(x, 3, 2, 1)?;
        let mut stages = Vec::new();
        for l in 1..=4 {
            for b in 0..2 {
                x = self.block(tape, x, &format!("vis.layer{l}.{b}"), if l > 1 && b == 0 { 2 } else { 1 })?;
            }
            stages.push(x);
        }
        self.fpn(tape, &stages, "vis.fpn")
    }

    /// `Conv(Pool(V))` merged with `s` by sum or channel concatenation.
    pub fn fuse_features(&self, tape: &mut Tape<'_, T>, s: Var, v: Var, group: usize) -> Result<Var> {
        let (sd, vd) = (tape.value(s).dims(), tape.value(v).dims());
        if vd[2] % sd[2] != 0 || vd[3] % sd[3] != 0 || vd[2] / sd[2] != vd[3] / sd[3] {
            return Err(CoralError::Shape(format!(
                "cannot pool BEV map {}x{} to {}x{}",
                vd[2], vd[3], sd[2], sd[3]
            )));
        }
        let r = vd[2] / sd[2];
        let pooled = if r == 1 { v } else { tape.avg_pool(v, r, r)? };
        let cv = self.conv(tape, pooled, &format!("str.fuse{group}"), 1)?;
        match self.cfg.fusion_mode {
            FusionMode::Sum => tape.add(cv, s),
            FusionMode::Concat => tape.concat(cv, s),
        }
    }

    /// Structural stream; `bev` is the raw BEV visual map when fusing.
    pub fn structural_stream(&self, tape: &mut Tape<'_, T>, elev: Var, bev: Option<Var>) -> Result<Var> {
        let d = tape.value(elev).dims();
        if (d[1], d[2], d[3]) != (1, self.cfg.elevation_size.0, self.cfg.elevation_size.1) {
            return Err(CoralError::Shape(format!(
                "elevation input {:?}, expected [B, 1, {}, {}]",
                d, self.cfg.elevation_size.0, self.cfg.elevation_size.1
            )));
        }
        let fused = self.cfg.fused_groups();
        if fused.is_empty() != bev.is_none() {
            return Err(CoralError::Shape("BEV visual map must be given exactly when fusing".into()));
        }
        let x = self.conv_bn(tape, elev, "str.g1.0", 1, true)?;
        let mut x = self.conv_bn(tape, x, "str.g1.1", 1, true)?;
        let mut outs = Vec::new();
        for g in 2..=5 {
            for b in 0..STRUCT_BLOCKS[g - 2] {
                x = self.block(tape, x, &format!("str.g{g}.{b}"), if b == 0 { 2 } else { 1 })?;
            }
            if let (true, Some(v)) = (fused.contains(&g), bev) {
                x = self.fuse_features(tape, x, v, g)?;
            }
            outs.push(x);
        }
        self.fpn(tape, &outs[1..], "str.fpn")
    }

    /// Soft-assignment, residual aggregation, intra and global normalization.
    pub fn netvlad(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let d = tape.value(x).channels();
        let logits = self.conv(tape, x, "vlad.assign", 1)?;
        let a = tape.softmax_channels(logits);
        let v = tape.vlad(x, a, self.id("vlad.centers")?)?;
        let v = tape.l2_normalize(v, d, L2_EPS)?;
        tape.l2_normalize(v, self.cfg.vlad_clusters * d, L2_EPS)
    }

    /// Full forward pass over a batch; returns `[B, descriptor_dim, 1, 1]`
    /// unit-norm descriptors.
    pub fn forward(&self, tape: &mut Tape<'_, T>, batch: &[&SampleInput]) -> Result<Var> {
        if batch.is_empty() {
            return Err(CoralError::InvalidArgument("empty batch".into()));
        }
        let feat = match self.cfg.modality {
            Modality::VisionOnly => {
                let img = tape.input(stack_cast(batch.iter().map(|s| &s.image))?);
                self.visual_stream(tape, img)?
            }
            Modality::StructureOnly => {
                let elev = tape.input(stack_cast(batch.iter().map(|s| &s.elevation))?);
                self.structural_stream(tape, elev, None)?
            }
            Modality::Fusion => {
                let img = tape.input(stack_cast(batch.iter().map(|s| &s.image))?);
                let fv = self.visual_stream(tape, img)?;
                let (fh, fw) = self.cfg.visual_fpn_size();
                let tables: Vec<&ProjectionTable> = batch.iter().map(|s| s.table.as_ref()).collect();
                for t in &tables {
                    if (t.grid.cells_y, t.grid.cells_x) != self.cfg.elevation_size {
                        return Err(CoralError::Shape(format!(
                            "projection table grid {}x{} does not match the elevation input",
                            t.grid.cells_y, t.grid.cells_x
                        )));
                    }
                }
                let plan = Arc::new(gather_plan(&tables, fh, fw)?);
                let bev = tape.gather(fv, plan)?;
                let elev = tape.input(stack_cast(batch.iter().map(|s| &s.elevation))?);
                self.structural_stream(tape, elev, Some(bev))?
            }
        };
        let v = self.netvlad(tape, feat)?;
        let mut h = v;
        for l in 0..self.cfg.mlp_layers {
            if l > 0 {
                h = tape.relu(h);
            }
            let w = self.id(&format!("mlp.{l}.weight"))?;
            let b = self.id(&format!("mlp.{l}.bias"))?;
            h = tape.linear(h, w, Some(b))?;
        }
        tape.l2_normalize(h, self.cfg.descriptor_dim, L2_EPS)
    }

    /// Inference-mode descriptors, one row per sample.
    pub fn describe(&self, batch: &[&SampleInput]) -> Result<Vec<Vec<f32>>> {
        let mut tape = Tape::new(&self.store, false);
        let out = self.forward(&mut tape, batch)?;
        let t = tape.value(out);
        Ok((0..t.batch()).map(|b| t.sample(b).iter().map(|v| v.as_f64() as f32).collect()).collect())
    }

    /// Per-group shape summary of the structural stream.
    pub fn audit(&self) -> Vec<GroupAudit> {
        let sizes = self.cfg.struct_sizes();
        (1..=5)
            .filter_map(|g| {
                let prefix = format!("str.g{g}.");
                let convs: Vec<[usize; 4]> = self
                    .store
                    .iter()
                    .filter(|(_, p)| p.name.starts_with(&prefix) && p.name.ends_with(".conv.weight") && !p.name.contains(".down."))
                    .map(|(_, p)| p.value.dims())
                    .collect();
                let last = convs.last()?;
                Some(GroupAudit {
                    group: g,
                    convs: convs.len(),
                    kernel: last[2],
                    channels: last[0],
                    stride: if g == 1 { 1 } else { 2 },
                    size: sizes[g - 1],
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupAudit {
    pub group: usize,
    /// Main-path convolutions (shortcut projections excluded).
    pub convs: usize,
    pub kernel: usize,
    pub channels: usize,
    /// Stride of the group's first convolution.
    pub stride: usize,
    pub size: (usize, usize),
}

fn stack_cast<'a, T: Real>(items: impl Iterator<Item = &'a Tensor4<f32>>) -> Result<Tensor4<T>> {
    let cast: Vec<Tensor4<T>> = items.map(|t| t.cast()).collect();
    let refs: Vec<&Tensor4<T>> = cast.iter().collect();
    Tensor4::stack(&refs)
}

/// `DESC`, dim `u32`, count `u32`, then `count` records of (id `u64`,
/// `f32` x dim); little-endian.
pub fn write_descriptors(path: &Path, records: &[(u64, Vec<f32>)]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.1.len());
    if records.iter().any(|r| r.1.len() != dim) {
        return Err(CoralError::Shape("descriptors have differing dimensions".into()));
    }
    let file = std::fs::File::create(path).map_err(|e| CoralError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(12 + records.len() * (8 + 4 * dim));
    buf.extend_from_slice(b"DESC");
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (id, d) in records {
        buf.extend_from_slice(&id.to_le_bytes());
        for v in d {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(|e| CoralError::io(path, e))?;
    w.flush().map_err(|e| CoralError::io(path, e))
}

pub fn read_descriptors(path: &Path) -> Result<Vec<(u64, Vec<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| CoralError::io(path, e))?;
    let bad = |msg: &str| CoralError::format(path, msg);
    if bytes.len() < 12 || &bytes[..4] != b"DESC" {
        return Err(bad("missing DESC header"));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let rec = 8 + 4 * dim;
    if bytes.len() != 12 + count * rec {
        return Err(bad("file length does not match header"));
    }
    Ok(bytes[12..]
        .chunks_exact(rec)
        .map(|r| {
            let id = u64::from_le_bytes(r[..8].try_into().unwrap());
            let d = r[8..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            (id, d)
        })
        .collect())
}

/// Random inputs of the right shapes, for tests and examples. Every cell of
/// the elevation grid gets a random projection into the FPN map.
pub fn random_sample(cfg: &ArchConfig, rng: &mut impl Rng) -> SampleInput {
    use crate::geometry::GridSpec;
    use crate::projection::{bilinear_footprint, ProjectionEntry};
    let (ih, iw) = cfg.image_size;
    let (eh, ew) = cfg.elevation_size;
    let image = uniform::<f32>([1, 3, ih, iw], 1.0, rng).map(|v| 0.5 + 0.5 * v);
    let elevation = uniform::<f32>([1, 1, eh, ew], 1.0, rng).map(|v| 0.5 + 0.5 * v);
    let mut entries = Vec::new();
    for j in 0..eh {
        for i in 0..ew {
            if rng.random_bool(0.6) {
                let uv = (rng.random_range(0.0..(iw - 1) as f64), rng.random_range(0.0..(ih - 1) as f64));
                let (pixels, weights) = bilinear_footprint(uv.0, uv.1, iw, ih);
                entries.push(ProjectionEntry {
                    cell: (i, j),
                    uv,
                    pixels,
                    weights,
                });
            }
        }
    }
    SampleInput {
        image,
        elevation,
        table: Arc::new(ProjectionTable {
            entries,
            image_width: iw,
            image_height: ih,
            grid: GridSpec::centered(ew, eh, 0.5, 0.0, 0.0).unwrap(),
        }),
    }
}
