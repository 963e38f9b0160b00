//! 2.5D elevation grid fused from point clouds, plus its 8-bit rendering.
//!
//! Each cell keeps a scalar height estimate with a variance. Measurements are
//! fused by variance weighting when they fall inside a Mahalanobis gate; cells
//! that a LiDAR ray passes underneath are cleared so moving objects do not
//! persist in the map.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoralError, Result};
use crate::geometry::{GridSpec, Point3, Pose};

pub const VAR_FLOOR: f64 = 1e-6;

/// Range-dependent measurement noise: `var = sigma0^2 + k_range * range^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorNoise {
    pub sigma0: f64,
    pub k_range: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        SensorNoise {
            sigma0: 0.01,
            k_range: 1e-4,
        }
    }
}

impl SensorNoise {
    pub fn variance(&self, range: f64) -> f64 {
        (self.sigma0 * self.sigma0 + self.k_range * range * range).max(VAR_FLOOR)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapperParams {
    pub noise: SensorNoise,
    /// Mahalanobis gate in multiples of sigma.
    pub gate: f64,
    /// Consecutive gate rejections before a cell is re-seeded from the measurement.
    pub outlier_limit: u8,
    /// A cell is cleared when its surface is this far above a ray passing through it.
    pub clearance_margin: f64,
}

impl Default for MapperParams {
    fn default() -> Self {
        MapperParams {
            noise: SensorNoise::default(),
            gate: 3.0,
            outlier_limit: 3,
            clearance_margin: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElevationMeasurement {
    pub e_p: f64,
    pub var_p: f64,
    pub source_cell: (usize, usize),
    /// Sensor position, world frame.
    pub ray_origin: Point3,
    /// Hit point, world frame.
    pub point: Point3,
}

/// Transforms a sensor-frame point into the world and turns it into an
/// elevation measurement. `None` when the point falls outside the grid.
pub fn measure(
    pose: &Pose,
    p_sensor: &Point3,
    range: f64,
    spec: &GridSpec,
    noise: &SensorNoise,
) -> Option<ElevationMeasurement> {
    let pw = pose.transform_point(p_sensor);
    let source_cell = spec.world_to_cell(pw.x, pw.y)?;
    let t = pose.translation();
    Some(ElevationMeasurement {
        e_p: pw.z,
        var_p: noise.variance(range),
        source_cell,
        ray_origin: Point3::new(t.x, t.y, t.z),
        point: pw,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElevationCell {
    pub e_g: f64,
    pub var_g: f64,
    pub valid: bool,
    pub outlier_count: u8,
}

impl ElevationCell {
    pub const INVALID: ElevationCell = ElevationCell {
        e_g: 0.0,
        var_g: 0.0,
        valid: false,
        outlier_count: 0,
    };

    fn seeded(m: &ElevationMeasurement) -> Self {
        ElevationCell {
            e_g: m.e_p,
            var_g: m.var_p.max(VAR_FLOOR),
            valid: true,
            outlier_count: 0,
        }
    }
}

/// Variance-weighted fusion of one measurement into one cell.
pub fn fuse(cell: ElevationCell, m: &ElevationMeasurement, gate: f64, outlier_limit: u8) -> ElevationCell {
    if !cell.valid {
        return ElevationCell::seeded(m);
    }
    let var_p = m.var_p.max(VAR_FLOOR);
    let var_sum = var_p + cell.var_g;
    let mahalanobis = (m.e_p - cell.e_g).abs() / var_sum.sqrt();
    if mahalanobis <= gate {
        ElevationCell {
            e_g: (var_p * cell.e_g + cell.var_g * m.e_p) / var_sum,
            var_g: (var_p * cell.var_g / var_sum).max(VAR_FLOOR),
            valid: true,
            outlier_count: 0,
        }
    } else {
        let count = cell.outlier_count.saturating_add(1);
        if count >= outlier_limit {
            ElevationCell::seeded(m)
        } else {
            ElevationCell {
                outlier_count: count,
                ..cell
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElevationMap {
    spec: GridSpec,
    cells: Vec<ElevationCell>,
}

impl ElevationMap {
    pub fn new(spec: GridSpec) -> Self {
        ElevationMap {
            cells: vec![ElevationCell::INVALID; spec.num_cells()],
            spec,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &ElevationCell {
        &self.cells[self.spec.index(i, j)]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut ElevationCell {
        let k = self.spec.index(i, j);
        &mut self.cells[k]
    }

    pub fn cells(&self) -> &[ElevationCell] {
        &self.cells
    }

    pub fn valid_count(&self) -> usize {
        self.cells.iter().filter(|c| c.valid).count()
    }

    pub fn fuse_measurement(&mut self, m: &ElevationMeasurement, params: &MapperParams) {
        let (i, j) = m.source_cell;
        let c = self.cell_mut(i, j);
        *c = fuse(*c, m, params.gate, params.outlier_limit);
    }

    /// Integrates one scan: clears along every ray first, then fuses every
    /// hit. Returns the cells reset by ray tracing.
    pub fn integrate_scan(
        &mut self,
        pose: &Pose,
        points: &[Point3],
        params: &MapperParams,
    ) -> Vec<(usize, usize)> {
        let measurements: Vec<_> = points
            .iter()
            .filter_map(|p| measure(pose, p, p.coords.norm(), &self.spec, &params.noise))
            .collect();
        let mut cleared = Vec::new();
        for m in &measurements {
            cleared.extend(ray_trace_clear(self, m, params.clearance_margin));
        }
        for m in &measurements {
            self.fuse_measurement(m, params);
        }
        cleared
    }
}

/// Visits the cells crossed by the 2D projection of the ray from
/// `m.ray_origin` to `m.point`, excluding the origin and endpoint cells, and
/// invalidates every valid cell whose elevation is more than `margin` above
/// the ray's highest point inside that cell. Returns the reset cells.
pub fn ray_trace_clear(map: &mut ElevationMap, m: &ElevationMeasurement, margin: f64) -> Vec<(usize, usize)> {
    let spec = *map.spec();
    let mut cleared = Vec::new();
    let z0 = m.ray_origin.z;
    let z1 = m.point.z;
    traverse_cells(&spec, &m.ray_origin, &m.point, |i, j, t_in, t_out| {
        let cell = map.cell_mut(i, j);
        if !cell.valid {
            return;
        }
        let z_in = z0 + t_in * (z1 - z0);
        let z_out = z0 + t_out * (z1 - z0);
        if cell.e_g > z_in.max(z_out) + margin {
            *cell = ElevationCell::INVALID;
            cleared.push((i, j));
        }
    });
    cleared
}

/// Amanatides-Woo traversal over the grid cells strictly between the cell of
/// `a` and the cell of `b`. The callback receives the in-grid cell index and
/// the segment parameter interval `[t_in, t_out]` (0 at `a`, 1 at `b`).
pub fn traverse_cells(spec: &GridSpec, a: &Point3, b: &Point3, mut visit: impl FnMut(usize, usize, f64, f64)) {
    let (gx0, gy0) = spec.to_grid_coords(a.x, a.y);
    let (gx1, gy1) = spec.to_grid_coords(b.x, b.y);
    let dx = gx1 - gx0;
    let dy = gy1 - gy0;
    if dx == 0.0 && dy == 0.0 {
        return;
    }
    let mut cx = gx0.floor() as i64;
    let mut cy = gy0.floor() as i64;
    let ex = gx1.floor() as i64;
    let ey = gy1.floor() as i64;
    if cx == ex && cy == ey {
        return;
    }
    let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
    let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
    let axis = |g0: f64, d: f64, c: i64| -> (f64, f64) {
        if d == 0.0 {
            (f64::INFINITY, f64::INFINITY)
        } else {
            let boundary = if d > 0.0 { (c + 1) as f64 } else { c as f64 };
            ((boundary - g0) / d, 1.0 / d.abs())
        }
    };
    let (mut t_max_x, t_delta_x) = axis(gx0, dx, cx);
    let (mut t_max_y, t_delta_y) = axis(gy0, dy, cy);
    let mut t_in;
    let max_steps = ((ex - cx).abs() + (ey - cy).abs() + 2) as usize;
    for _ in 0..max_steps {
        if t_max_x < t_max_y {
            t_in = t_max_x;
            t_max_x += t_delta_x;
            cx += step_x;
        } else {
            t_in = t_max_y;
            t_max_y += t_delta_y;
            cy += step_y;
        }
        if (cx == ex && cy == ey) || t_in >= 1.0 {
            return;
        }
        let t_out = t_max_x.min(t_max_y).min(1.0);
        if cx >= 0 && cy >= 0 && (cx as usize) < spec.cells_x && (cy as usize) < spec.cells_y {
            visit(cx as usize, cy as usize, t_in, t_out);
        }
    }
}

/// 8-bit rendering of an elevation map. `mask` marks pixels that carry a
/// value (observed, or filled by the mean filter).
#[derive(Debug, Clone, PartialEq)]
pub struct ElevationImage {
    pub spec: GridSpec,
    pub h_min: f64,
    pub h_max: f64,
    pub pixels: Vec<u8>,
    pub mask: Vec<bool>,
}

/// Minimum number of valid 3x3 neighbours required to fill an empty cell.
pub const MIN_FILL_NEIGHBORS: usize = 3;

pub fn render_elevation_image(map: &ElevationMap, h_min: f64, h_max: f64) -> Result<ElevationImage> {
    if !(h_min < h_max) || !h_min.is_finite() || !h_max.is_finite() {
        return Err(CoralError::InvalidArgument(format!(
            "degenerate height window ({h_min}, {h_max})"
        )));
    }
    let spec = *map.spec();
    let (w, h) = (spec.cells_x, spec.cells_y);
    let scale = h_max - h_min;
    let raw: Vec<Option<u8>> = map
        .cells()
        .iter()
        .map(|c| {
            c.valid.then(|| {
                let t = ((c.e_g - h_min) / scale).clamp(0.0, 1.0);
                (255.0 * t).round() as u8
            })
        })
        .collect();
    let mut pixels = vec![0u8; w * h];
    let mut mask = vec![false; w * h];
    for j in 0..h {
        for i in 0..w {
            let k = j * w + i;
            if let Some(v) = raw[k] {
                pixels[k] = v;
                mask[k] = true;
                continue;
            }
            let mut sum = 0u32;
            let mut n = 0usize;
            for nj in j.saturating_sub(1)..=(j + 1).min(h - 1) {
                for ni in i.saturating_sub(1)..=(i + 1).min(w - 1) {
                    if let Some(v) = raw[nj * w + ni] {
                        sum += v as u32;
                        n += 1;
                    }
                }
            }
            if n >= MIN_FILL_NEIGHBORS {
                pixels[k] = ((sum as f64) / (n as f64)).round() as u8;
                mask[k] = true;
            }
        }
    }
    Ok(ElevationImage {
        spec,
        h_min,
        h_max,
        pixels,
        mask,
    })
}

impl ElevationImage {
    pub fn width(&self) -> usize {
        self.spec.cells_x
    }

    pub fn height(&self) -> usize {
        self.spec.cells_y
    }

    pub fn pixel(&self, i: usize, j: usize) -> u8 {
        self.pixels[self.spec.index(i, j)]
    }

    /// Height in meters represented by a pixel value.
    pub fn decode(&self, v: u8) -> f64 {
        self.h_min + (v as f64 / 255.0) * (self.h_max - self.h_min)
    }

    /// Dense map rebuilt from the rendered (filtered) image: masked pixels
    /// become valid cells at the decoded height.
    pub fn to_elevation_map(&self) -> ElevationMap {
        let mut map = ElevationMap::new(self.spec);
        for (k, (&v, &m)) in self.pixels.iter().zip(&self.mask).enumerate() {
            if m {
                map.cells[k] = ElevationCell {
                    e_g: self.decode(v),
                    var_g: VAR_FLOOR,
                    valid: true,
                    outlier_count: 0,
                };
            }
        }
        map
    }

    /// Binary PGM (P5). Grid geometry, height window and mask travel in
    /// comment lines so the image can be reloaded losslessly.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| CoralError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let s = &self.spec;
        let mut body = format!(
            "P5\n# coral-grid {} {} {} {} {}\n# coral-window {} {}\n# coral-mask {}\n{} {}\n255\n",
            s.cells_x,
            s.cells_y,
            s.resolution,
            s.origin_x,
            s.origin_y,
            self.h_min,
            self.h_max,
            encode_mask(&self.mask),
            s.cells_x,
            s.cells_y
        )
        .into_bytes();
        body.extend_from_slice(&self.pixels);
        w.write_all(&body).map_err(|e| CoralError::io(path, e))?;
        w.flush().map_err(|e| CoralError::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| CoralError::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut grid = None;
        let mut window = None;
        let mut mask_hex = None;
        let mut tokens: Vec<String> = Vec::new();
        while tokens.len() < 4 {
            let mut line = String::new();
            let n = r.read_line(&mut line).map_err(|e| CoralError::io(path, e))?;
            if n == 0 {
                return Err(CoralError::format(path, "truncated PGM header"));
            }
            let line = line.trim_end_matches(['\n', '\r']);
            if let Some(c) = line.strip_prefix('#') {
                let parts: Vec<&str> = c.split_whitespace().collect();
                match parts.first() {
                    Some(&"coral-grid") if parts.len() == 6 => grid = Some(parse_floats(path, &parts[1..])?),
                    Some(&"coral-window") if parts.len() == 3 => window = Some(parse_floats(path, &parts[1..])?),
                    Some(&"coral-mask") if parts.len() == 2 => mask_hex = Some(parts[1].to_string()),
                    _ => {}
                }
                continue;
            }
            tokens.extend(line.split_whitespace().map(str::to_string));
        }
        if tokens[0] != "P5" || tokens[3] != "255" {
            return Err(CoralError::format(path, "expected 8-bit P5 PGM"));
        }
        let width: usize = tokens[1].parse().map_err(|_| CoralError::format(path, "bad width"))?;
        let height: usize = tokens[2].parse().map_err(|_| CoralError::format(path, "bad height"))?;
        let g = grid.ok_or_else(|| CoralError::format(path, "missing coral-grid comment"))?;
        let win = window.ok_or_else(|| CoralError::format(path, "missing coral-window comment"))?;
        let spec = GridSpec::new(g[0] as usize, g[1] as usize, g[2], g[3], g[4])?;
        if spec.cells_x != width || spec.cells_y != height {
            return Err(CoralError::format(path, "grid comment disagrees with image size"));
        }
        let mut pixels = vec![0u8; width * height];
        r.read_exact(&mut pixels).map_err(|e| CoralError::io(path, e))?;
        let mask = match mask_hex {
            Some(hex) => decode_mask(&hex, width * height)
                .ok_or_else(|| CoralError::format(path, "bad coral-mask comment"))?,
            None => vec![true; width * height],
        };
        Ok(ElevationImage {
            spec,
            h_min: win[0],
            h_max: win[1],
            pixels,
            mask,
        })
    }
}

fn parse_floats(path: &Path, parts: &[&str]) -> Result<Vec<f64>> {
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| CoralError::format(path, format!("bad number {p:?} in header")))
        })
        .collect()
}

fn encode_mask(mask: &[bool]) -> String {
    let mut s = String::with_capacity(mask.len() / 4 + 1);
    for chunk in mask.chunks(4) {
        let mut nibble = 0u8;
        for (b, &m) in chunk.iter().enumerate() {
            if m {
                nibble |= 1 << b;
            }
        }
        s.push(char::from_digit(nibble as u32, 16).unwrap());
    }
    s
}

fn decode_mask(hex: &str, n: usize) -> Option<Vec<bool>> {
    if hex.len() != n.div_ceil(4) {
        return None;
    }
    let mut out = Vec::with_capacity(n);
    for ch in hex.chars() {
        let nibble = ch.to_digit(16)?;
        for b in 0..4 {
            if out.len() < n {
                out.push(nibble & (1 << b) != 0);
            }
        }
    }
    Some(out)
}

const MAP_MAGIC: &[u8; 4] = b"ELV0";

/// Elevation map file: `ELV0`, `u32` cells_x, `u32` cells_y, then resolution,
/// origin_x, origin_y as `f64`, then per cell (row-major) `e_g f64`,
/// `var_g f64`, `valid u8`, `outlier_count u8`. Little-endian.
pub fn write_map(path: &Path, map: &ElevationMap) -> Result<()> {
    let s = map.spec();
    let mut buf = Vec::with_capacity(36 + 18 * s.num_cells());
    buf.extend_from_slice(MAP_MAGIC);
    buf.extend_from_slice(&(s.cells_x as u32).to_le_bytes());
    buf.extend_from_slice(&(s.cells_y as u32).to_le_bytes());
    for v in [s.resolution, s.origin_x, s.origin_y] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in map.cells() {
        buf.extend_from_slice(&c.e_g.to_le_bytes());
        buf.extend_from_slice(&c.var_g.to_le_bytes());
        buf.push(c.valid as u8);
        buf.push(c.outlier_count);
    }
    std::fs::write(path, buf).map_err(|e| CoralError::io(path, e))
}

pub fn read_map(path: &Path) -> Result<ElevationMap> {
    let bytes = std::fs::read(path).map_err(|e| CoralError::io(path, e))?;
    if bytes.len() < 36 || &bytes[..4] != MAP_MAGIC {
        return Err(CoralError::format(path, "missing ELV0 magic"));
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let spec = GridSpec::new(u(4), u(8), f(12), f(20), f(28))?;
    if bytes.len() != 36 + 18 * spec.num_cells() {
        return Err(CoralError::format(path, "cell data does not match the grid size"));
    }
    let mut map = ElevationMap::new(spec);
    for (k, c) in map.cells.iter_mut().enumerate() {
        let o = 36 + 18 * k;
        *c = ElevationCell {
            e_g: f(o),
            var_g: f(o + 8),
            valid: bytes[o + 16] != 0,
            outlier_count: bytes[o + 17],
        };
    }
    Ok(map)
}

const CLOUD_MAGIC: &[u8; 4] = b"PCL0";

/// Point cloud file: `PCL0`, `u32` count, then `count` x (x, y, z) `f32`, little-endian.
pub fn write_cloud(path: &Path, points: &[Point3]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 12 * points.len());
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&(points.len() as u32).to_le_bytes());
    for p in points {
        for v in [p.x, p.y, p.z] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| CoralError::io(path, e))
}

pub fn read_cloud(path: &Path) -> Result<Vec<Point3>> {
    let bytes = std::fs::read(path).map_err(|e| CoralError::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != CLOUD_MAGIC {
        return Err(CoralError::format(path, "missing PCL0 magic"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + 12 * count {
        return Err(CoralError::format(
            path,
            format!("expected {} points, file holds {} bytes", count, bytes.len()),
        ));
    }
    let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64;
    Ok((0..count)
        .map(|k| {
            let o = 8 + 12 * k;
            Point3::new(f(o), f(o + 4), f(o + 8))
        })
        .collect())
}
