//! Builds an elevation map from one simulated LiDAR scan of a bumpy world,
//! renders it as an 8-bit image and writes it as PGM.
//!
//! cargo run --release -p coral --example elevation_mapping [out.pgm]

use coral::config::RunConfig;
use coral::geometry::{Frame, Pose};
use coral::prepare::{build_sample_map, render_sample};
use coral::synth::{simulate_lidar, Bump, Heightfield};
use nalgebra::Vector3;

fn main() -> coral::Result<()> {
    let cfg = RunConfig::desk();
    let bumps = vec![
        Bump { x: 4.0, y: 2.0, height: 1.5, sigma: 2.0 },
        Bump { x: -3.0, y: -5.0, height: -0.6, sigma: 3.0 },
    ];
    let world = Heightfield::new(0.0, bumps, Vec::new(), Vec::new(), [0.0; 4]);
    let pose = Pose::from_euler(Vector3::new(0.0, 0.0, 1.8), 0.0, 0.0, 0.3, Frame::Lidar, Frame::World);
    let cloud = simulate_lidar(&world, &pose, &cfg.rig()?.lidar);
    let map = build_sample_map(&cloud, &pose, &cfg)?;

    let mut worst: f64 = 0.0;
    let spec = *map.spec();
    for j in 0..spec.cells_y {
        for i in 0..spec.cells_x {
            let c = map.cell(i, j);
            if c.valid {
                let (x, y) = spec.cell_center(i, j);
                worst = worst.max((c.e_g - world.height(x, y)).abs());
            }
        }
    }
    println!("{} points, {} of {} cells valid, max error vs terrain {worst:.3} m", cloud.len(), map.valid_count(), spec.num_cells());

    let img = render_sample(&map, &pose, &cfg)?;
    let out = std::env::args().nth(1).unwrap_or_else(|| "elevation.pgm".into());
    img.write_pgm(std::path::Path::new(&out))?;
    println!("wrote {out} ({}x{}, window [{:.1}, {:.1}] m)", img.width(), img.height(), img.h_min, img.h_max);
    Ok(())
}
