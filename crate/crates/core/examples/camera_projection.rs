//! Poses, frames and the pinhole camera: project a world point into the
//! image of a camera mounted on a LiDAR rig, then back again.

use coral::geometry::{CameraModel, Frame, Point3, Pose};
use coral::synth::camera_extrinsic;
use nalgebra::Vector3;

fn main() -> coral::Result<()> {
    // rig at (10, 5, 1.8) facing +y, camera 0.2 m ahead of the LiDAR, pitched 25 deg down
    let rig = Pose::from_euler(Vector3::new(10.0, 5.0, 1.8), 0.0, 0.0, 90f64.to_radians(), Frame::Lidar, Frame::World);
    let cam = CameraModel::with_fov(112, 112, 90.0, camera_extrinsic(&Vector3::new(0.2, 0.0, 0.1), 25.0)?)?;
    let world_to_cam = cam.extrinsic.compose(&rig.inverse())?;

    let p_world = Point3::new(10.5, 12.0, 0.0);
    let p_cam = world_to_cam.transform_point(&p_world);
    match cam.project(&p_cam) {
        Some((u, v)) => {
            println!("world {:?} -> pixel ({u:.2}, {v:.2}), inside: {}", p_world.coords.as_slice(), cam.contains(u, v));
            let ray = cam.back_project(u, v);
            let back = ray * (p_cam.z / ray.z);
            println!("back-projected at depth {:.3}: {:?}", p_cam.z, back.as_slice());
        }
        None => println!("point is behind the camera"),
    }
    println!("rig heading {:.1} deg", rig.heading_deg());
    Ok(())
}
