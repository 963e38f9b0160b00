//! Point-to-pixel correspondences between elevation cells and the camera
//! image, and the sparse bilinear gather that moves front-view features into
//! the bird-eye-view grid.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::elevation::ElevationMap;
use crate::error::{CoralError, Result};
use crate::geometry::{CameraModel, Frame, GridSpec, Point3, Pose};
use crate::nn::ops::{self, GatherEntry, GatherPlan};
use crate::nn::{Real, Tensor4};

/// Dense `[1, C, H, W]` feature grid (front-view or BEV).
pub type FeatureMap<T> = Tensor4<T>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionEntry {
    /// BEV cell `(i, j)`.
    pub cell: (usize, usize),
    /// Projected sub-pixel position in the full-resolution image.
    pub uv: (f64, f64),
    /// Pixel `(col, row)` corners in the order (u0,v0), (u0+1,v0), (u0,v0+1), (u0+1,v0+1).
    pub pixels: [(usize, usize); 4],
    pub weights: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionTable {
    pub entries: Vec<ProjectionEntry>,
    pub image_width: usize,
    pub image_height: usize,
    pub grid: GridSpec,
}

/// Bilinear footprint of `(u, v)` on a `width x height` pixel lattice whose
/// pixel centres sit at integer coordinates. Requires `(u, v)` inside
/// `[0, width-1] x [0, height-1]`.
pub fn bilinear_footprint(u: f64, v: f64, width: usize, height: usize) -> ([(usize, usize); 4], [f64; 4]) {
    let u0 = (u.floor() as usize).min(width.saturating_sub(2));
    let v0 = (v.floor() as usize).min(height.saturating_sub(2));
    let du = (u - u0 as f64).clamp(0.0, 1.0);
    let dv = (v - v0 as f64).clamp(0.0, 1.0);
    let u1 = (u0 + 1).min(width - 1);
    let v1 = (v0 + 1).min(height - 1);
    (
        [(u0, v0), (u1, v0), (u0, v1), (u1, v1)],
        [(1.0 - du) * (1.0 - dv), du * (1.0 - dv), (1.0 - du) * dv, du * dv],
    )
}

/// Projects every valid cell (centre x, centre y, elevation) into the
/// camera. Cells behind the camera or outside the image get no entry.
pub fn build_projection_table(map: &ElevationMap, sensor_pose: &Pose, cam: &CameraModel) -> Result<ProjectionTable> {
    if sensor_pose.from_frame() != Frame::Lidar || sensor_pose.to_frame() != Frame::World {
        return Err(CoralError::InvalidPose("sensor pose must map lidar -> world".into()));
    }
    if cam.width < 2 || cam.height < 2 {
        return Err(CoralError::InvalidArgument("camera image must be at least 2x2".into()));
    }
    let world_to_cam = cam.extrinsic.compose(&sensor_pose.inverse())?;
    let spec = *map.spec();
    let mut entries = Vec::new();
    for j in 0..spec.cells_y {
        for i in 0..spec.cells_x {
            let c = map.cell(i, j);
            if !c.valid {
                continue;
            }
            let (x, y) = spec.cell_center(i, j);
            let pc = world_to_cam.transform_point(&Point3::new(x, y, c.e_g));
            let Some((u, v)) = cam.project(&pc) else { continue };
            if !cam.contains(u, v) {
                continue;
            }
            let (pixels, weights) = bilinear_footprint(u, v, cam.width, cam.height);
            entries.push(ProjectionEntry {
                cell: (i, j),
                uv: (u, v),
                pixels,
                weights,
            });
        }
    }
    Ok(ProjectionTable {
        entries,
        image_width: cam.width,
        image_height: cam.height,
        grid: spec,
    })
}

impl ProjectionTable {
    /// Integer downsampling factor between the source image and a feature
    /// map of the given size.
    pub fn scale_factor(&self, feat_h: usize, feat_w: usize) -> Result<usize> {
        if feat_w == 0 || feat_h == 0 || self.image_width % feat_w != 0 || self.image_height % feat_h != 0 {
            return Err(CoralError::Shape(format!(
                "feature map {feat_h}x{feat_w} is not an integer downsampling of image {}x{}",
                self.image_height, self.image_width
            )));
        }
        let fx = self.image_width / feat_w;
        let fy = self.image_height / feat_h;
        if fx != fy {
            return Err(CoralError::Shape(format!("anisotropic downsampling {fx} x {fy}")));
        }
        Ok(fx)
    }

    /// Gather entries for a feature map `factor` times smaller than the image.
    /// Pixel centres map as `u' = (u + 0.5) / factor - 0.5`, clamped to the map.
    pub fn gather_entries(&self, feat_h: usize, feat_w: usize) -> Result<Vec<GatherEntry>> {
        let factor = self.scale_factor(feat_h, feat_w)? as f64;
        let gw = self.grid.cells_x;
        Ok(self
            .entries
            .iter()
            .map(|e| {
                let (pixels, weights) = if factor == 1.0 {
                    (e.pixels, e.weights)
                } else {
                    let u = ((e.uv.0 + 0.5) / factor - 0.5).clamp(0.0, (feat_w - 1) as f64);
                    let v = ((e.uv.1 + 0.5) / factor - 0.5).clamp(0.0, (feat_h - 1) as f64);
                    bilinear_footprint(u, v, feat_w, feat_h)
                };
                GatherEntry {
                    cell: e.cell.1 * gw + e.cell.0,
                    src: pixels.map(|(c, r)| r * feat_w + c),
                    weights,
                }
            })
            .collect())
    }

    /// Debug dump, one line per entry: `i j u v w00 w01 w10 w11`.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| CoralError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            writeln!(
                w,
                "{} {} {} {} {} {} {} {}",
                e.cell.0, e.cell.1, e.uv.0, e.uv.1, e.weights[0], e.weights[1], e.weights[2], e.weights[3]
            )
            .map_err(|e| CoralError::io(path, e))?;
        }
        w.flush().map_err(|e| CoralError::io(path, e))
    }
}

/// Builds a batched gather plan, one table per batch entry.
pub fn gather_plan(tables: &[&ProjectionTable], feat_h: usize, feat_w: usize) -> Result<GatherPlan> {
    let first = tables
        .first()
        .ok_or_else(|| CoralError::InvalidArgument("no projection tables".into()))?;
    let (out_h, out_w) = (first.grid.cells_y, first.grid.cells_x);
    let per_sample = tables
        .iter()
        .map(|t| {
            if (t.grid.cells_y, t.grid.cells_x) != (out_h, out_w) {
                return Err(CoralError::Shape("projection tables disagree on grid size".into()));
            }
            t.gather_entries(feat_h, feat_w)
        })
        .collect::<Result<_>>()?;
    Ok(GatherPlan {
        src_h: feat_h,
        src_w: feat_w,
        out_h,
        out_w,
        per_sample,
    })
}

/// Gathers a single-sample front-view map into the BEV grid. Cells without
/// an entry are zero.
pub fn gather_bev_features<T: Real>(table: &ProjectionTable, front_view: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if front_view.batch() != 1 {
        return Err(CoralError::Shape("gather_bev_features expects a single sample".into()));
    }
    let plan = gather_plan(&[table], front_view.height(), front_view.width())?;
    ops::gather_forward(front_view, &plan)
}

/// Adjoint of [`gather_bev_features`]: scatters BEV gradients back onto the
/// four source pixels with the same weights.
pub fn gather_bev_backward<T: Real>(table: &ProjectionTable, front_dims: [usize; 4], d_bev: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let plan = gather_plan(&[table], front_dims[2], front_dims[3])?;
    if d_bev.dims() != [1, front_dims[1], plan.out_h, plan.out_w] {
        return Err(CoralError::Shape(format!("BEV gradient has shape {:?}", d_bev.dims())));
    }
    Ok(ops::gather_backward(front_dims, &plan, d_bev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elevation::{ElevationCell, ElevationMap};
    use crate::nn::{grad_check, GradCheckConfig};
    use nalgebra::{Matrix3, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Camera 10 m above the origin looking straight down (+z of the camera
    /// is world -z), image x along world +x.
    fn down_camera() -> (Pose, CameraModel) {
        let sensor = Pose::from_translation(Vector3::new(0.0, 0.0, 10.0), Frame::Lidar, Frame::World);
        // camera axes in lidar coordinates: x_cam = x, y_cam = -y, z_cam = -z
        let r = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let ext = Pose::new(r, Vector3::zeros(), Frame::Lidar, Frame::Camera).unwrap();
        let cam = CameraModel::new(100.0, 100.0, 32.0, 32.0, 64, 64, ext).unwrap();
        (sensor, cam)
    }

    fn map_with(spec: GridSpec, cells: &[((usize, usize), f64)]) -> ElevationMap {
        let mut map = ElevationMap::new(spec);
        for &((i, j), e) in cells {
            *map.cell_mut(i, j) = ElevationCell {
                e_g: e,
                var_g: 0.01,
                valid: true,
                outlier_count: 0,
            };
        }
        map
    }

    #[test]
    fn on_axis_cell_lands_on_principal_point() {
        let (pose, cam) = down_camera();
        // 1 m cells; cell (2,2) of a 5x5 grid centred on the origin has centre (0, 0)
        let spec = GridSpec::centered(5, 5, 1.0, 0.0, 0.0).unwrap();
        let table = build_projection_table(&map_with(spec, &[((2, 2), 0.0)]), &pose, &cam).unwrap();
        assert_eq!(table.entries.len(), 1);
        let e = table.entries[0];
        assert_eq!(e.uv, (32.0, 32.0));
        assert_eq!(e.pixels[0], (32, 32));
        assert_eq!(e.weights, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cells_behind_camera_are_culled() {
        let (pose, cam) = down_camera();
        let spec = GridSpec::centered(5, 5, 1.0, 0.0, 0.0).unwrap();
        // cell surface above the camera
        let table = build_projection_table(&map_with(spec, &[((2, 2), 12.0)]), &pose, &cam).unwrap();
        assert!(table.entries.is_empty());
    }

    fn random_scene(rng: &mut impl Rng) -> (ElevationMap, Pose, CameraModel) {
        let sensor = Pose::from_euler(
            Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 2.0),
            0.0,
            0.0,
            rng.random_range(-3.0..3.0),
            Frame::Lidar,
            Frame::World,
        );
        let t = sensor.translation();
        let spec = GridSpec::centered(24, 24, 0.5, t.x, t.y).unwrap();
        let mut map = ElevationMap::new(spec);
        for j in 0..24 {
            for i in 0..24 {
                if rng.random_bool(0.7) {
                    *map.cell_mut(i, j) = ElevationCell {
                        e_g: rng.random_range(-0.5..1.0),
                        var_g: 0.01,
                        valid: true,
                        outlier_count: 0,
                    };
                }
            }
        }
        let ext = crate::synth::camera_extrinsic(&Vector3::new(0.0, 0.0, 0.3), 25.0).unwrap();
        let cam = CameraModel::with_fov(48, 40, 90.0, ext).unwrap();
        (map, sensor, cam)
    }

    #[test]
    fn weights_are_convex_and_reproduce_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut total = 0;
        for _ in 0..20 {
            let (map, pose, cam) = random_scene(&mut rng);
            let table = build_projection_table(&map, &pose, &cam).unwrap();
            total += table.entries.len();
            let w2c = cam.extrinsic.compose(&pose.inverse()).unwrap();
            for e in &table.entries {
                let s: f64 = e.weights.iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!(e.weights.iter().all(|&w| w >= 0.0));
                let u: f64 = e.pixels.iter().zip(&e.weights).map(|(p, w)| p.0 as f64 * w).sum();
                let v: f64 = e.pixels.iter().zip(&e.weights).map(|(p, w)| p.1 as f64 * w).sum();
                let (x, y) = map.spec().cell_center(e.cell.0, e.cell.1);
                let direct = cam
                    .project(&w2c.transform_point(&Point3::new(x, y, map.cell(e.cell.0, e.cell.1).e_g)))
                    .unwrap();
                assert!((u - direct.0).abs() < 1e-6 && (v - direct.1).abs() < 1e-6);
                assert!(e.pixels.iter().all(|&(c, r)| c < cam.width && r < cam.height));
            }
        }
        assert!(total > 100, "scene produced too few projections ({total})");
    }

    fn naive_gather(table: &ProjectionTable, fv: &Tensor4<f64>) -> Tensor4<f64> {
        let (gw, gh) = (table.grid.cells_x, table.grid.cells_y);
        let mut out = Tensor4::zeros([1, fv.channels(), gh, gw]);
        for e in &table.entries {
            for c in 0..fv.channels() {
                let mut s = 0.0;
                for q in 0..4 {
                    s += e.weights[q] * fv.at(0, c, e.pixels[q].1, e.pixels[q].0);
                }
                out.set(0, c, e.cell.1, e.cell.0, s);
            }
        }
        out
    }

    #[test]
    fn gather_matches_naive_loop_and_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let (map, pose, cam) = random_scene(&mut rng);
            let table = build_projection_table(&map, &pose, &cam).unwrap();
            let fv: Tensor4<f64> = crate::nn::params::uniform([1, 5, 40, 48], 1.0, &mut rng);
            let got = gather_bev_features(&table, &fv).unwrap();
            let expect = naive_gather(&table, &fv);
            let diff = got.data().iter().zip(expect.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-9);

            let constant = Tensor4::<f64>::filled([1, 2, 40, 48], 0.37);
            let bev = gather_bev_features(&table, &constant).unwrap();
            for e in &table.entries {
                for c in 0..2 {
                    assert!((bev.at(0, c, e.cell.1, e.cell.0) - 0.37).abs() < 1e-12);
                }
            }
            let listed: std::collections::HashSet<_> = table.entries.iter().map(|e| e.cell).collect();
            for j in 0..24 {
                for i in 0..24 {
                    if !listed.contains(&(i, j)) {
                        assert_eq!(bev.at(0, 0, j, i), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn gather_is_linear_and_rejects_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (map, pose, cam) = random_scene(&mut rng);
        let table = build_projection_table(&map, &pose, &cam).unwrap();
        let f1: Tensor4<f64> = crate::nn::params::uniform([1, 3, 20, 24], 1.0, &mut rng);
        let f2: Tensor4<f64> = crate::nn::params::uniform([1, 3, 20, 24], 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let mut mix = f1.clone();
        mix.scale(a);
        let mut t = f2.clone();
        t.scale(b);
        mix.add_assign(&t);
        let lhs = gather_bev_features(&table, &mix).unwrap();
        let mut rhs = gather_bev_features(&table, &f1).unwrap();
        rhs.scale(a);
        let mut r2 = gather_bev_features(&table, &f2).unwrap();
        r2.scale(b);
        rhs.add_assign(&r2);
        let diff = lhs.data().iter().zip(rhs.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9);

        let odd = Tensor4::<f64>::zeros([1, 3, 13, 24]);
        assert!(gather_bev_features(&table, &odd).is_err());
    }

    #[test]
    fn integer_landing_at_pixel_centres() {
        let (pose, cam) = down_camera();
        let spec = GridSpec::centered(5, 5, 1.0, 0.0, 0.0).unwrap();
        let table = build_projection_table(&map_with(spec, &[((2, 2), 0.0), ((3, 2), 0.0)]), &pose, &cam).unwrap();
        let fv = Tensor4::from_vec([1, 1, 64, 64], (0..64 * 64).map(|k| k as f64).collect()).unwrap();
        let bev = gather_bev_features(&table, &fv).unwrap();
        // (2,2) -> pixel (32,32); (3,2) is 1 m east at 10 m depth -> u = 42
        assert_eq!(bev.at(0, 0, 2, 2), (32 * 64 + 32) as f64);
        assert_eq!(bev.at(0, 0, 2, 3), (32 * 64 + 42) as f64);
    }

    #[test]
    fn gather_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (map, pose, cam) = random_scene(&mut rng);
        let table = build_projection_table(&map, &pose, &cam).unwrap();
        let dims = [1, 2, 20, 24];
        let fv: Tensor4<f64> = crate::nn::params::uniform(dims, 1.0, &mut rng);
        let r: Tensor4<f64> = crate::nn::params::uniform([1, 2, 24, 24], 1.0, &mut rng);
        let analytic = gather_bev_backward(&table, dims, &r).unwrap();
        let f = |v: &[f64]| {
            let t = Tensor4::from_vec(dims, v.to_vec()).unwrap();
            let y = gather_bev_features(&table, &t).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let idx: Vec<usize> = (0..60).map(|_| rng.random_range(0..fv.len())).collect();
        let rep = grad_check(f, fv.data(), analytic.data(), Some(&idx), GradCheckConfig::default());
        assert!(rep.max_rel_error < 1e-5, "{rep:?}");
    }

    #[test]
    fn table_text_dump() {
        let (pose, cam) = down_camera();
        let spec = GridSpec::centered(5, 5, 1.0, 0.0, 0.0).unwrap();
        let table = build_projection_table(&map_with(spec, &[((2, 2), 0.0)]), &pose, &cam).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.txt");
        table.write_text(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "2 2 32 32 1 0 0 0\n");
    }
}
