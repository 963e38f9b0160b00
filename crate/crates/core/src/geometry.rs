//! Rigid transforms, pinhole projection and grid indexing.
//!
//! Conventions: the LiDAR (sensor) frame is x forward, y left, z up; the
//! camera frame is x right, y down, z along the optical axis.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{CoralError, Result};

pub type Point3 = nalgebra::Point3<f64>;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Depth below which a camera-frame point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Frame {
    World,
    Lidar,
    Camera,
}

impl fmt::Display for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Frame::World => "world",
            Frame::Lidar => "lidar",
            Frame::Camera => "camera",
        };
        f.write_str(s)
    }
}

/// Rigid transform mapping points expressed in `from` into `to`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    from: Frame,
    to: Frame,
}

impl Pose {
    pub fn new(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        from: Frame,
        to: Frame,
    ) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(CoralError::InvalidPose("non-finite entries".into()));
        }
        let gram = rotation.transpose() * rotation;
        let off = (gram - Matrix3::identity()).abs().max();
        if off > ORTHONORMAL_TOL {
            return Err(CoralError::InvalidPose(format!(
                "rotation not orthonormal (|R^T R - I| = {off:e})"
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(CoralError::InvalidPose(format!(
                "rotation determinant {det} != +1"
            )));
        }
        Ok(Pose {
            rotation,
            translation,
            from,
            to,
        })
    }

    pub fn identity(from: Frame, to: Frame) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            from,
            to,
        }
    }

    pub fn from_translation(t: Vector3<f64>, from: Frame, to: Frame) -> Self {
        Pose {
            translation: t,
            ..Pose::identity(from, to)
        }
    }

    /// Quaternion components in scalar-last order, as stored in poses files.
    /// The quaternion is renormalized; a zero quaternion is rejected.
    pub fn from_quaternion(
        t: Vector3<f64>,
        qx: f64,
        qy: f64,
        qz: f64,
        qw: f64,
        from: Frame,
        to: Frame,
    ) -> Result<Self> {
        let q = Quaternion::new(qw, qx, qy, qz);
        if !(q.norm() > 1e-12) || !q.norm().is_finite() {
            return Err(CoralError::InvalidPose("degenerate quaternion".into()));
        }
        let uq = UnitQuaternion::from_quaternion(q);
        Pose::new(uq.to_rotation_matrix().into_inner(), t, from, to)
    }

    /// Z-Y-X (yaw, pitch, roll) Euler angles in radians.
    pub fn from_euler(
        t: Vector3<f64>,
        roll: f64,
        pitch: f64,
        yaw: f64,
        from: Frame,
        to: Frame,
    ) -> Self {
        let r = Rotation3::from_euler_angles(roll, pitch, yaw).into_inner();
        Pose {
            rotation: r,
            translation: t,
            from,
            to,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn from_frame(&self) -> Frame {
        self.from
    }

    pub fn to_frame(&self) -> Frame {
        self.to
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// Heading of the `from` frame's x axis in the `to` frame, degrees in [-180, 180).
    pub fn heading_deg(&self) -> f64 {
        let x = self.rotation[(0, 0)];
        let y = self.rotation[(1, 0)];
        wrap_degrees(y.atan2(x).to_degrees())
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
            from: self.to,
            to: self.from,
        }
    }

    /// `self ∘ inner`: apply `inner` first. Requires `inner.to == self.from`.
    pub fn compose(&self, inner: &Pose) -> Result<Pose> {
        if inner.to != self.from {
            return Err(CoralError::InvalidPose(format!(
                "cannot compose {}->{} after {}->{}",
                self.from, self.to, inner.from, inner.to
            )));
        }
        Ok(Pose {
            rotation: self.rotation * inner.rotation,
            translation: self.rotation * inner.translation + self.translation,
            from: inner.from,
            to: self.to,
        })
    }

    pub fn homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    #[inline]
    pub fn transform_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    #[inline]
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }
}

pub fn transform_point(pose: &Pose, p: &Point3) -> Point3 {
    pose.transform_point(p)
}

pub fn wrap_degrees(d: f64) -> f64 {
    let w = (d + 180.0).rem_euclid(360.0) - 180.0;
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

/// Undistorted pinhole camera with its mounting relative to the LiDAR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// camera <- LiDAR
    pub extrinsic: Pose,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        extrinsic: Pose,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CoralError::InvalidArgument(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(CoralError::InvalidArgument(format!(
                "principal point ({cx}, {cy}) outside {width}x{height} image"
            )));
        }
        if extrinsic.from_frame() != Frame::Lidar || extrinsic.to_frame() != Frame::Camera {
            return Err(CoralError::InvalidPose(
                "camera extrinsic must map lidar -> camera".into(),
            ));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            extrinsic,
        })
    }

    /// Pinhole camera with square pixels and the given horizontal field of view.
    pub fn with_fov(width: usize, height: usize, hfov_deg: f64, extrinsic: Pose) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        CameraModel::new(
            f,
            f,
            0.5 * width as f64,
            0.5 * height as f64,
            width,
            height,
            extrinsic,
        )
    }

    /// Returns `None` when the point is behind (or on) the camera plane.
    #[inline]
    pub fn project(&self, p_cam: &Point3) -> Option<(f64, f64)> {
        project_to_pixel(self, p_cam)
    }

    /// Unit ray direction in the camera frame through pixel coordinate (u, v).
    pub fn back_project(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0).normalize()
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

#[inline]
pub fn project_to_pixel(cam: &CameraModel, p_cam: &Point3) -> Option<(f64, f64)> {
    if p_cam.z <= MIN_DEPTH {
        return None;
    }
    let u = cam.fx * p_cam.x / p_cam.z + cam.cx;
    let v = cam.fy * p_cam.y / p_cam.z + cam.cy;
    Some((u, v))
}

/// Axis-aligned 2D grid. Cell `(i, j)` covers
/// `[origin_x + i*res, origin_x + (i+1)*res) x [origin_y + j*res, ...)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub cells_x: usize,
    pub cells_y: usize,
    pub resolution: f64,
    pub origin_x: f64,
    pub origin_y: f64,
}

impl GridSpec {
    pub fn new(
        cells_x: usize,
        cells_y: usize,
        resolution: f64,
        origin_x: f64,
        origin_y: f64,
    ) -> Result<Self> {
        if cells_x == 0 || cells_y == 0 {
            return Err(CoralError::InvalidArgument("grid needs at least one cell".into()));
        }
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(CoralError::InvalidArgument(format!(
                "grid resolution must be positive, got {resolution}"
            )));
        }
        Ok(GridSpec {
            cells_x,
            cells_y,
            resolution,
            origin_x,
            origin_y,
        })
    }

    /// Grid whose geometric center sits at `(x, y)`.
    pub fn centered(cells_x: usize, cells_y: usize, resolution: f64, x: f64, y: f64) -> Result<Self> {
        GridSpec::new(
            cells_x,
            cells_y,
            resolution,
            x - 0.5 * cells_x as f64 * resolution,
            y - 0.5 * cells_y as f64 * resolution,
        )
    }

    /// 80 x 80 cells at 0.5 m.
    pub fn default_80(x: f64, y: f64) -> Self {
        GridSpec::centered(80, 80, 0.5, x, y).expect("valid preset")
    }

    /// 40 x 40 cells at 0.5 m.
    pub fn preset_40(x: f64, y: f64) -> Self {
        GridSpec::centered(40, 40, 0.5, x, y).expect("valid preset")
    }

    pub fn num_cells(&self) -> usize {
        self.cells_x * self.cells_y
    }

    /// Floor-based cell index; `None` outside the grid.
    #[inline]
    pub fn world_to_cell(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fi = ((x - self.origin_x) / self.resolution).floor();
        let fj = ((y - self.origin_y) / self.resolution).floor();
        if fi >= 0.0 && fj >= 0.0 && fi < self.cells_x as f64 && fj < self.cells_y as f64 {
            Some((fi as usize, fj as usize))
        } else {
            None
        }
    }

    #[inline]
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin_x + (i as f64 + 0.5) * self.resolution,
            self.origin_y + (j as f64 + 0.5) * self.resolution,
        )
    }

    /// Continuous grid coordinates (cell units) of a world position.
    #[inline]
    pub fn to_grid_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.resolution,
            (y - self.origin_y) / self.resolution,
        )
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.cells_x + i
    }
}

pub fn world_to_cell(spec: &GridSpec, p: &Point3) -> Option<(usize, usize)> {
    spec.world_to_cell(p.x, p.y)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

/// Reads `timestamp tx ty tz qx qy qz qw` lines (LiDAR -> world poses).
/// Blank lines and `#` comments are skipped.
pub fn read_poses(path: &Path) -> Result<Vec<StampedPose>> {
    let file = std::fs::File::open(path).map_err(|e| CoralError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CoralError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| CoralError::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(format!("{t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != 8 {
            return Err(parse_err(format!("expected 8 fields, found {}", vals.len())));
        }
        let pose = Pose::from_quaternion(
            Vector3::new(vals[1], vals[2], vals[3]),
            vals[4],
            vals[5],
            vals[6],
            vals[7],
            Frame::Lidar,
            Frame::World,
        )
        .map_err(|e| parse_err(e.to_string()))?;
        out.push(StampedPose {
            timestamp: vals[0],
            pose,
        });
    }
    Ok(out)
}

pub fn write_poses(path: &Path, poses: &[StampedPose]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CoralError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for sp in poses {
        let t = sp.pose.translation();
        let q = sp.pose.quaternion();
        writeln!(
            w,
            "{} {} {} {} {} {} {} {}",
            sp.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
        .map_err(|e| CoralError::io(path, e))?;
    }
    w.flush().map_err(|e| CoralError::io(path, e))
}
