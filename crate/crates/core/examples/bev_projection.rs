//! Projects camera pixels into the bird-eye-view grid: a painted disc in
//! front of the rig shows up in the BEV cell under it.

use coral::config::RunConfig;
use coral::geometry::{Frame, GridSpec, Pose};
use coral::prepare::{build_sample_map, image_tensor, render_sample};
use coral::projection::{build_projection_table, gather_bev_features};
use coral::synth::{render_camera, simulate_lidar, Heightfield, Landmark};
use nalgebra::Vector3;

fn main() -> coral::Result<()> {
    let mut cfg = RunConfig::desk();
    cfg.arch.image_size = (160, 160);
    let rig = cfg.rig()?;
    let disc = Landmark { x: 6.0, y: 1.0, radius: 1.2, color: [250, 30, 30] };
    let world = Heightfield::new(0.0, Vec::new(), Vec::new(), vec![disc], [0.0; 4]);
    let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.8), Frame::Lidar, Frame::World);

    let image = render_camera(&world, &pose, &rig.camera);
    let map = build_sample_map(&simulate_lidar(&world, &pose, &rig.lidar), &pose, &cfg)?;
    let elevation = render_sample(&map, &pose, &cfg)?;
    let table = build_projection_table(&elevation.to_elevation_map(), &pose, &rig.camera)?;
    println!("{} of {} cells receive a pixel", table.entries.len(), table.grid.num_cells());

    let bev = gather_bev_features(&table, &image_tensor(&image, cfg.arch.image_size).cast::<f64>())?;
    let spec: GridSpec = table.grid;
    let (i, j) = spec.world_to_cell(disc.x, disc.y).expect("disc inside the grid");
    let rgb: Vec<f64> = (0..3).map(|c| bev.at(0, c, j, i) * 255.0).collect();
    println!("cell ({i}, {j}) under the disc has colour {:.0?}; painted {:?}", rgb, disc.color);
    Ok(())
}
