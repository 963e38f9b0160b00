//! A box appears in front of the sensor and is then removed. Ray tracing
//! through the cells it occupied clears them once the ground behind it is seen.

use coral::elevation::{ElevationMap, MapperParams};
use coral::geometry::{Frame, GridSpec, Pose};
use coral::synth::{simulate_lidar, BoxObstacle, Heightfield, LidarPattern};
use nalgebra::Vector3;

fn main() -> coral::Result<()> {
    let pattern = LidarPattern::ground_uniform(360, 1.8, 1.0, 12.0, 0.25, 20.0);
    let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.8), Frame::Lidar, Frame::World);
    let obstacle = BoxObstacle { x0: 3.0, y0: -1.0, x1: 4.0, y1: 1.0, height: 1.0, color: [200, 40, 40] };
    let with_box = Heightfield::new(0.0, Vec::new(), vec![obstacle], Vec::new(), [0.0; 4]);
    let empty = Heightfield::flat(0.0);

    let mut map = ElevationMap::new(GridSpec::centered(48, 48, 0.5, 0.0, 0.0)?);
    let params = MapperParams::default();
    map.integrate_scan(&pose, &simulate_lidar(&with_box, &pose, &pattern), &params);
    let spec = *map.spec();
    let occupied: Vec<(usize, usize)> = (0..spec.cells_y)
        .flat_map(|j| (0..spec.cells_x).map(move |i| (i, j)))
        .filter(|&(i, j)| map.cell(i, j).valid && map.cell(i, j).e_g > 0.5)
        .collect();
    println!("box occupies {} cells", occupied.len());

    for scan in 1..=3 {
        map.integrate_scan(&pose, &simulate_lidar(&empty, &pose, &pattern), &params);
        let left = occupied.iter().filter(|&&(i, j)| map.cell(i, j).valid && map.cell(i, j).e_g > 0.5).count();
        println!("after scan {scan}: {left} cells still hold the box");
    }
    Ok(())
}
