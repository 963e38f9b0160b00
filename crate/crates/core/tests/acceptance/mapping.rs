//! Criteria 3 and 4: geometry through the mapping and projection stages.

use coral::config::RunConfig;
use coral::elevation::{ElevationMap, MapperParams};
use coral::geometry::{Frame, GridSpec, Point3, Pose};
use coral::nn::Tensor4;
use coral::prepare::{build_sample_map, render_sample};
use coral::projection::{build_projection_table, gather_bev_features};
use coral::synth::{cast_ray, generate_world, perturb_cloud, place_centers, simulate_lidar, BoxObstacle, Heightfield, WorldParams};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

pub const LANDMARK_FRACTION: f64 = 0.95;
pub const ELEVATION_FRACTION: f64 = 0.99;
/// Largest per-channel difference (of 255) for a landmark color match.
pub const COLOR_TOL: f64 = 48.0;

fn rgb_tensor(img: &image::RgbImage) -> Tensor4<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor4::zeros([1, 3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t.set(0, c, y as usize, x as usize, p.0[c] as f64);
        }
    }
    t
}

/// Gradient bound of the terrain over the grid: each bump contributes
/// `|h| / s * exp(-1/2)` when its support reaches the grid.
fn local_lipschitz(world: &Heightfield, spec: &GridSpec) -> f64 {
    let (x0, y0) = (spec.origin_x, spec.origin_y);
    let (x1, y1) = (x0 + spec.cells_x as f64 * spec.resolution, y0 + spec.cells_y as f64 * spec.resolution);
    world
        .bumps
        .iter()
        .filter(|b| {
            let dx = (x0 - b.x).max(b.x - x1).max(0.0);
            let dy = (y0 - b.y).max(b.y - y1).max(0.0);
            dx.hypot(dy) < 5.0 * b.sigma
        })
        .map(|b| b.height.abs() / b.sigma * (-0.5f64).exp())
        .sum()
}

pub fn round_trip() -> Outcome {
    let cfg = RunConfig::paper();
    let rig = cfg.rig().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let world_params = WorldParams { boxes: (0, 0), ..cfg.data.world };
    let centers = place_centers(8, cfg.data.place_spacing);
    let world = generate_world(&mut rng, &centers, &world_params);
    let mut bound_max: f64 = 0.0;

    let (mut cells, mut cells_ok) = (0usize, 0usize);
    let (mut seen, mut hit) = (0usize, 0usize);
    for &(cx, cy) in &centers {
        for _ in 0..3 {
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let t = Vector3::new(cx, cy, world.height(cx, cy) + rig.mount_height);
            let pose = Pose::from_euler(t, 0.0, 0.0, yaw, Frame::Lidar, Frame::World);
            let cloud = perturb_cloud(&simulate_lidar(&world, &pose, &rig.lidar), cfg.data.range_noise, cfg.data.dropout, &mut rng);
            let map = build_sample_map(&cloud, &pose, &cfg).unwrap();
            let spec = *map.spec();
            let bound = local_lipschitz(&world, &spec) * cfg.map.resolution / 2f64.sqrt() + 3.0 * cfg.data.range_noise;
            bound_max = bound_max.max(bound);
            for j in 0..spec.cells_y {
                for i in 0..spec.cells_x {
                    let c = map.cell(i, j);
                    if c.valid {
                        let (x, y) = spec.cell_center(i, j);
                        cells += 1;
                        cells_ok += usize::from((c.e_g - world.height(x, y)).abs() <= bound);
                    }
                }
            }

            let image = coral::synth::render_camera(&world, &pose, &rig.camera);
            let elevation = render_sample(&map, &pose, &cfg).unwrap();
            let table = build_projection_table(&elevation.to_elevation_map(), &pose, &rig.camera).unwrap();
            let bev = gather_bev_features(&table, &rgb_tensor(&image)).unwrap();
            let cam_pose = pose.compose(&rig.camera.extrinsic.inverse()).unwrap();
            let eye = Point3::from(*cam_pose.translation());
            for l in &world.landmarks {
                let Some(cell) = spec.world_to_cell(l.x, l.y) else { continue };
                if !table.entries.iter().any(|e| e.cell == cell) {
                    continue;
                }
                // terrain must not hide the landmark centre from the camera
                let target = Point3::new(l.x, l.y, world.height(l.x, l.y));
                let d = target - eye;
                let dist = d.norm();
                if cast_ray(&world, &eye, &(d / dist), dist - 0.05, 0.05).is_some() {
                    continue;
                }
                seen += 1;
                let diff = (0..3).map(|c| (bev.at(0, c, cell.1, cell.0) - l.color[c] as f64).abs()).fold(0.0, f64::max);
                hit += usize::from(diff <= COLOR_TOL);
            }
        }
    }
    let lf = hit as f64 / seen.max(1) as f64;
    let ef = cells_ok as f64 / cells.max(1) as f64;
    Outcome {
        pass: seen > 0 && lf >= LANDMARK_FRACTION && ef >= ELEVATION_FRACTION,
        detail: format!(
            "landmarks {hit}/{seen} = {:.1}% in their cell (need {:.0}%), elevation {:.2}% of {cells} valid cells within a bound of at most {bound_max:.3} m (need {:.0}%)",
            100.0 * lf,
            100.0 * LANDMARK_FRACTION,
            100.0 * ef,
            100.0 * ELEVATION_FRACTION
        ),
    }
}

fn holds_box(map: &ElevationMap, cell: (usize, usize), ground: f64, height: f64) -> bool {
    let c = map.cell(cell.0, cell.1);
    c.valid && c.e_g > ground + 0.5 * height
}

/// Scripted scenario repeated over random boxes: observe the box, remove
/// it, observe again. Returns formerly occupied cells and those still
/// holding the box after each of three scans.
pub fn clearing() -> Outcome {
    let cfg = RunConfig::desk();
    let rig = cfg.rig().unwrap();
    let params = MapperParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut occupied = 0usize;
    let mut stale = [0usize; 3];
    for _ in 0..20 {
        let (r, a) = (rng.random_range(3.0..9.0), rng.random_range(0.0..std::f64::consts::TAU));
        let (w, d) = (rng.random_range(0.8..2.5), rng.random_range(0.8..2.5));
        let (x, y) = (r * a.cos(), r * a.sin());
        let b = BoxObstacle { x0: x - 0.5 * w, y0: y - 0.5 * d, x1: x + 0.5 * w, y1: y + 0.5 * d, height: rng.random_range(0.5..2.0), color: [90, 90, 90] };
        let empty = Heightfield::flat(0.0);
        let with_box = Heightfield::new(0.0, Vec::new(), vec![b], Vec::new(), [0.0; 4]);
        let pose = Pose::from_euler(Vector3::new(0.0, 0.0, rig.mount_height), 0.0, 0.0, rng.random_range(-3.0..3.0), Frame::Lidar, Frame::World);
        let mut map = ElevationMap::new(GridSpec::centered(48, 48, cfg.map.resolution, 0.0, 0.0).unwrap());
        let scan = |world: &Heightfield, rng: &mut ChaCha8Rng| perturb_cloud(&simulate_lidar(world, &pose, &rig.lidar), cfg.data.range_noise, cfg.data.dropout, rng);
        map.integrate_scan(&pose, &scan(&with_box, &mut rng), &params);
        let spec = *map.spec();
        let cells: Vec<(usize, usize)> = (0..spec.cells_y)
            .flat_map(|j| (0..spec.cells_x).map(move |i| (i, j)))
            .filter(|&c| holds_box(&map, c, 0.0, b.height))
            .collect();
        occupied += cells.len();
        for s in &mut stale {
            map.integrate_scan(&pose, &scan(&empty, &mut rng), &params);
            *s += cells.iter().filter(|&&c| holds_box(&map, c, 0.0, b.height)).count();
        }
    }
    Outcome {
        pass: occupied > 0 && stale[2] == 0,
        detail: format!(
            "{occupied} occupied cells over 20 scenarios; still holding the box after scans 1/2/3: {}/{}/{}",
            stale[0], stale[1], stale[2]
        ),
    }
}
