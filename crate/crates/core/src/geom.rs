//! Small rotation helpers shared by the skeleton and the camera.
//!
//! Angles are radians. Each helper that is differentiated returns the
//! rotation together with its partial derivatives so callers can chain
//! adjoints without re-deriving trigonometry.

use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    Mat3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Intrinsic XYZ Euler rotation `Rx(a) * Ry(b) * Rz(c)`.
pub fn euler_xyz(angles: [f64; 3]) -> Mat3 {
    rot_x(angles[0]) * rot_y(angles[1]) * rot_z(angles[2])
}

/// Rotation plus its derivative with respect to each of the three angles.
pub fn euler_xyz_grad(angles: [f64; 3]) -> (Mat3, [Mat3; 3]) {
    let (rx, ry, rz) = (rot_x(angles[0]), rot_y(angles[1]), rot_z(angles[2]));
    let (dx, dy, dz) = (d_rot_x(angles[0]), d_rot_y(angles[1]), d_rot_z(angles[2]));
    (
        rx * ry * rz,
        [dx * ry * rz, rx * dy * rz, rx * ry * dz],
    )
}

/// Axis flip taking world coordinates (y up, viewer on +z) to camera
/// coordinates (y down, looking along +z).
pub fn camera_flip() -> Mat3 {
    Mat3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0)
}

/// Object-to-camera rotation `F * Rz(roll) * Rx(elevation) * Ry(azimuth)`.
pub fn view_rotation(azimuth: f64, elevation: f64, roll: f64) -> Mat3 {
    camera_flip() * rot_z(roll) * rot_x(elevation) * rot_y(azimuth)
}

/// View rotation and its partials in (azimuth, elevation, roll) order.
pub fn view_rotation_grad(azimuth: f64, elevation: f64, roll: f64) -> (Mat3, [Mat3; 3]) {
    let f = camera_flip();
    let (rz, rx, ry) = (rot_z(roll), rot_x(elevation), rot_y(azimuth));
    let (dz, dx, dy) = (d_rot_z(roll), d_rot_x(elevation), d_rot_y(azimuth));
    (
        f * rz * rx * ry,
        [f * rz * rx * dy, f * rz * dx * ry, f * dz * rx * ry],
    )
}

/// Frobenius inner product, used to pull a matrix adjoint back onto a scalar.
pub fn frob(a: &Mat3, b: &Mat3) -> f64 {
    a.component_mul(b).sum()
}

/// Rotation taking the canonical `+y` axis onto `dir`, keeping the canonical
/// `+x` axis as close to world `+x` as possible.
pub fn align_y_to(dir: &Vec3) -> Mat3 {
    let y = dir.normalize();
    let mut reference = Vec3::x();
    if y.dot(&reference).abs() > 0.99 {
        reference = Vec3::z();
    }
    let x = (reference - y * y.dot(&reference)).normalize();
    let z = x.cross(&y);
    Mat3::from_columns(&[x, y, z])
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let r = a.transpose() * b;
    ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
}

pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).abs().max()
}
