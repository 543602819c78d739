//! Perspective camera, soft silhouette rasterization and z-buffered hard
//! rasterization.
//!
//! Image coordinates are normalized to `[0, 1]^2` with `u` along columns and
//! `v` along rows (down). Pixel `(row, col)` has its center at
//! `((col + 0.5) / w, (row + 0.5) / h)`.

use serde::{Deserialize, Serialize};

use crate::geom::{view_rotation, view_rotation_grad, Mat3, Vec3};

/// Points closer than this to the camera plane are treated as behind it.
pub const NEAR_PLANE: f64 = 1e-3;

/// Default horizontal field of view in degrees.
pub const DEFAULT_FOV_DEG: f64 = 30.0;

/// Face/pixel pairs whose outside logit falls below `-SOFT_CUTOFF` contribute
/// less than `exp(-SOFT_CUTOFF)` coverage and are skipped.
pub const SOFT_CUTOFF: f64 = 30.0;

/// Pinhole camera. Rotation is `(azimuth, elevation, roll)`; the translation
/// is applied in camera coordinates after rotating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation: f64,
    pub roll: f64,
    pub translation: [f64; 3],
    /// Focal length in units of image width.
    pub focal: f64,
    #[serde(default = "centered")]
    pub principal: [f64; 2],
    pub height: usize,
    pub width: usize,
}

fn centered() -> [f64; 2] {
    [0.5, 0.5]
}

pub fn focal_from_fov(fov_deg: f64) -> f64 {
    0.5 / (fov_deg.to_radians() * 0.5).tan()
}

impl Camera {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            azimuth: 0.0,
            elevation: 0.0,
            roll: 0.0,
            translation: [0.0, 0.0, 5.0],
            focal: focal_from_fov(DEFAULT_FOV_DEG),
            principal: centered(),
            height,
            width,
        }
    }

    /// Optimizable parameters: azimuth, elevation, roll, tx, ty, tz.
    pub fn params(&self) -> [f64; 6] {
        [
            self.azimuth,
            self.elevation,
            self.roll,
            self.translation[0],
            self.translation[1],
            self.translation[2],
        ]
    }

    pub fn set_params(&mut self, p: &[f64]) {
        self.azimuth = p[0];
        self.elevation = p[1];
        self.roll = p[2];
        self.translation = [p[3], p[4], p[5]];
    }

    pub fn rotation(&self) -> Mat3 {
        view_rotation(self.azimuth, self.elevation, self.roll)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + Vec3::from(self.translation)
    }

    fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }
}

/// Projected points in normalized image coordinates.
#[derive(Debug, Clone)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    /// True when the point is at or behind the near plane; its coordinates are
    /// then meaningless.
    pub behind: Vec<bool>,
}

pub fn project(camera: &Camera, points: &[Vec3]) -> Projection {
    let r = camera.rotation();
    let t = Vec3::from(camera.translation);
    let (fx, fy) = (camera.focal, camera.focal * camera.aspect());
    let mut coords = Vec::with_capacity(points.len());
    let mut depth = Vec::with_capacity(points.len());
    let mut behind = Vec::with_capacity(points.len());
    for p in points {
        let c = r * p + t;
        let z = c.z;
        let is_behind = z <= NEAR_PLANE;
        let zs = if is_behind { NEAR_PLANE } else { z };
        coords.push([
            camera.principal[0] + fx * c.x / zs,
            camera.principal[1] + fy * c.y / zs,
        ]);
        depth.push(z);
        behind.push(is_behind);
    }
    Projection {
        coords,
        depth,
        behind,
    }
}

/// Adjoint of [`project`] for gradients on the 2D coordinates. Returns the
/// gradient with respect to every point and accumulates the camera gradient
/// (azimuth, elevation, roll, tx, ty, tz) into `g_camera`.
pub fn project_backward(
    camera: &Camera,
    points: &[Vec3],
    g_coords: &[[f64; 2]],
    g_camera: &mut [f64; 6],
) -> Vec<Vec3> {
    let (r, dr) = view_rotation_grad(camera.azimuth, camera.elevation, camera.roll);
    let t = Vec3::from(camera.translation);
    let (fx, fy) = (camera.focal, camera.focal * camera.aspect());
    let rt = r.transpose();
    let mut g_rot = Mat3::zeros();
    let mut out = Vec::with_capacity(points.len());
    for (p, g) in points.iter().zip(g_coords) {
        let c = r * p + t;
        if c.z <= NEAR_PLANE || (g[0] == 0.0 && g[1] == 0.0) {
            out.push(Vec3::zeros());
            continue;
        }
        let iz = 1.0 / c.z;
        let gc = Vec3::new(
            g[0] * fx * iz,
            g[1] * fy * iz,
            -(g[0] * fx * c.x + g[1] * fy * c.y) * iz * iz,
        );
        g_camera[3] += gc.x;
        g_camera[4] += gc.y;
        g_camera[5] += gc.z;
        g_rot += gc * p.transpose();
        out.push(rt * gc);
    }
    for axis in 0..3 {
        g_camera[axis] += crate::geom::frob(&g_rot, &dr[axis]);
    }
    out
}

/// Triangles in world space, tagged with the part each face belongs to.
#[derive(Debug, Clone, Default)]
pub struct SceneMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
    pub face_part: Vec<usize>,
    /// Part owning each vertex.
    pub vertex_part: Vec<usize>,
}

impl SceneMesh {
    /// Concatenates per-part meshes that share one face list.
    pub fn from_parts(parts: &[Vec<Vec3>], faces: &[[usize; 3]]) -> Self {
        let mut scene = SceneMesh::default();
        for (i, verts) in parts.iter().enumerate() {
            let offset = scene.vertices.len();
            scene.vertices.extend_from_slice(verts);
            scene.vertex_part.extend(std::iter::repeat_n(i, verts.len()));
            for f in faces {
                scene.faces.push([f[0] + offset, f[1] + offset, f[2] + offset]);
                scene.face_part.push(i);
            }
        }
        scene
    }
}

fn pixel_center(row: usize, col: usize, h: usize, w: usize) -> [f64; 2] {
    [(col as f64 + 0.5) / w as f64, (row as f64 + 0.5) / h as f64]
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Squared distance from `p` to segment `ab` and the clamped segment parameter.
fn segment_dist2(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> (f64, f64) {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let c = [a[0] + t * ab[0] - p[0], a[1] + t * ab[1] - p[1]];
    (c[0] * c[0] + c[1] * c[1], t)
}

struct FacePixel {
    pixel: usize,
    /// Signed logit `±d²/σ`.
    logit: f64,
    inside: bool,
    edge: usize,
    t: f64,
    p: [f64; 2],
}

/// Visits every (face, pixel) pair that can carry non-negligible coverage.
fn for_each_face_pixel(
    tri: [[f64; 2]; 3],
    h: usize,
    w: usize,
    sigma: f64,
    mut visit: impl FnMut(FacePixel),
) {
    let margin = (SOFT_CUTOFF * sigma).sqrt();
    let min_u = tri.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min) - margin;
    let max_u = tri.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max) + margin;
    let min_v = tri.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min) - margin;
    let max_v = tri.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max) + margin;
    if max_u < 0.0 || max_v < 0.0 || min_u > 1.0 || min_v > 1.0 {
        return;
    }
    let c0 = ((min_u * w as f64 - 0.5).floor().max(0.0)) as usize;
    let c1 = ((max_u * w as f64 - 0.5).ceil().min(w as f64 - 1.0)).max(0.0) as usize;
    let r0 = ((min_v * h as f64 - 0.5).floor().max(0.0)) as usize;
    let r1 = ((max_v * h as f64 - 0.5).ceil().min(h as f64 - 1.0)).max(0.0) as usize;
    let area = edge(tri[0], tri[1], tri[2]);
    for row in r0..=r1 {
        for col in c0..=c1 {
            let p = pixel_center(row, col, h, w);
            let e0 = edge(tri[1], tri[2], p);
            let e1 = edge(tri[2], tri[0], p);
            let e2 = edge(tri[0], tri[1], p);
            let inside = area != 0.0
                && ((e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0));
            let mut best = (f64::INFINITY, 0usize, 0.0);
            for e in 0..3 {
                let (d2, t) = segment_dist2(p, tri[e], tri[(e + 1) % 3]);
                if d2 < best.0 {
                    best = (d2, e, t);
                }
            }
            let logit = if inside { best.0 / sigma } else { -best.0 / sigma };
            if !inside && logit < -SOFT_CUTOFF {
                continue;
            }
            visit(FacePixel {
                pixel: row * w + col,
                logit,
                inside,
                edge: best.1,
                t: best.2,
                p,
            });
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn face_coords(coords: &[[f64; 2]], behind: &[bool], f: &[usize; 3]) -> Option<[[f64; 2]; 3]> {
    if f.iter().any(|&i| behind[i]) {
        None
    } else {
        Some([coords[f[0]], coords[f[1]], coords[f[2]]])
    }
}

/// Soft silhouette `A(p) = 1 - prod_f (1 - sigmoid(±d²(p, f) / sigma))`.
/// Returns a row-major `h x w` map.
pub fn soft_silhouette(
    projection: &Projection,
    faces: &[[usize; 3]],
    h: usize,
    w: usize,
    sigma: f64,
) -> Vec<f64> {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut log_bg = vec![0.0; h * w];
    for f in faces {
        if let Some(tri) = face_coords(&projection.coords, &projection.behind, f) {
            for_each_face_pixel(tri, h, w, sigma, |fp| {
                log_bg[fp.pixel] -= softplus(fp.logit);
            });
        }
    }
    log_bg.into_iter().map(|s| 1.0 - s.exp()).collect()
}

/// Adjoint of [`soft_silhouette`] with respect to projected coordinates.
pub fn soft_silhouette_backward(
    projection: &Projection,
    faces: &[[usize; 3]],
    h: usize,
    w: usize,
    sigma: f64,
    silhouette: &[f64],
    g_image: &[f64],
) -> Vec<[f64; 2]> {
    let mut g = vec![[0.0; 2]; projection.coords.len()];
    for f in faces {
        let Some(tri) = face_coords(&projection.coords, &projection.behind, f) else {
            continue;
        };
        for_each_face_pixel(tri, h, w, sigma, |fp| {
            let gi = g_image[fp.pixel];
            if gi == 0.0 {
                return;
            }
            // dA/dlogit = (1 - A) * D
            let g_logit = gi * (1.0 - silhouette[fp.pixel]) * sigmoid(fp.logit);
            let sign = if fp.inside { 1.0 } else { -1.0 };
            let g_d2 = g_logit * sign / sigma;
            let (a, b) = (fp.edge, (fp.edge + 1) % 3);
            let (pa, pb) = (tri[a], tri[b]);
            let c = [
                pa[0] + fp.t * (pb[0] - pa[0]),
                pa[1] + fp.t * (pb[1] - pa[1]),
            ];
            // d(d²)/dc = 2 (c - p); c = (1 - t) a + t b at the optimal t.
            let dc = [2.0 * (c[0] - fp.p[0]) * g_d2, 2.0 * (c[1] - fp.p[1]) * g_d2];
            let (ia, ib) = (f[a], f[b]);
            g[ia][0] += dc[0] * (1.0 - fp.t);
            g[ia][1] += dc[1] * (1.0 - fp.t);
            g[ib][0] += dc[0] * fp.t;
            g[ib][1] += dc[1] * fp.t;
        });
    }
    g
}

/// Hard (non-differentiable) rasterization buffers.
#[derive(Debug, Clone)]
pub struct RenderBuffers {
    pub height: usize,
    pub width: usize,
    /// Owning part per pixel, `-1` for background.
    pub part_index: Vec<i32>,
    /// Owning face per pixel, `-1` for background.
    pub face_index: Vec<i32>,
    /// Camera-space depth per pixel, infinite for background.
    pub depth: Vec<f64>,
    /// Screen-space barycentric coordinates of the pixel center in its face.
    pub barycentric: Vec<[f64; 3]>,
    /// Per-vertex visibility.
    pub visible: Vec<bool>,
}

impl RenderBuffers {
    pub fn mask(&self) -> Vec<bool> {
        self.part_index.iter().map(|&p| p >= 0).collect()
    }

    pub fn mask_f64(&self) -> Vec<f64> {
        self.part_index
            .iter()
            .map(|&p| if p >= 0 { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Relative depth slack used by the vertex visibility test.
pub const VISIBILITY_EPS: f64 = 0.01;

/// Pixel containing a normalized coordinate, if it is inside the image.
pub fn pixel_of(coord: [f64; 2], h: usize, w: usize) -> Option<(usize, usize)> {
    let col = (coord[0] * w as f64).floor();
    let row = (coord[1] * h as f64).floor();
    if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
        None
    } else {
        Some((row as usize, col as usize))
    }
}

/// Z-buffered triangle fill plus per-vertex visibility.
pub fn hard_rasterize(mesh: &SceneMesh, camera: &Camera) -> RenderBuffers {
    let (h, w) = (camera.height, camera.width);
    let projection = project(camera, &mesh.vertices);
    let mut part_index = vec![-1i32; h * w];
    let mut face_index = vec![-1i32; h * w];
    let mut depth = vec![f64::INFINITY; h * w];
    let mut barycentric = vec![[0.0; 3]; h * w];
    for (fi, f) in mesh.faces.iter().enumerate() {
        let Some(tri) = face_coords(&projection.coords, &projection.behind, f) else {
            continue;
        };
        let area = edge(tri[0], tri[1], tri[2]);
        if area == 0.0 {
            continue;
        }
        let min_u = tri.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        let max_u = tri.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_v = tri.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        let max_v = tri.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        if max_u < 0.0 || max_v < 0.0 || min_u > 1.0 || min_v > 1.0 {
            continue;
        }
        let c0 = ((min_u * w as f64 - 0.5).floor().max(0.0)) as usize;
        let c1 = ((max_u * w as f64 - 0.5).ceil().min(w as f64 - 1.0)).max(0.0) as usize;
        let r0 = ((min_v * h as f64 - 0.5).floor().max(0.0)) as usize;
        let r1 = ((max_v * h as f64 - 0.5).ceil().min(h as f64 - 1.0)).max(0.0) as usize;
        let inv_z = [
            1.0 / projection.depth[f[0]],
            1.0 / projection.depth[f[1]],
            1.0 / projection.depth[f[2]],
        ];
        for row in r0..=r1 {
            for col in c0..=c1 {
                let p = pixel_center(row, col, h, w);
                let b0 = edge(tri[1], tri[2], p) / area;
                let b1 = edge(tri[2], tri[0], p) / area;
                let b2 = edge(tri[0], tri[1], p) / area;
                if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                    continue;
                }
                let z = 1.0 / (b0 * inv_z[0] + b1 * inv_z[1] + b2 * inv_z[2]);
                let idx = row * w + col;
                if z < depth[idx] {
                    depth[idx] = z;
                    part_index[idx] = mesh.face_part[fi] as i32;
                    face_index[idx] = fi as i32;
                    barycentric[idx] = [b0, b1, b2];
                }
            }
        }
    }
    let visible = projection
        .coords
        .iter()
        .zip(&projection.depth)
        .zip(&projection.behind)
        .map(|((c, &z), &behind)| {
            if behind {
                return false;
            }
            match pixel_of(*c, h, w) {
                None => false,
                Some((row, col)) => {
                    let buf = depth[row * w + col];
                    !buf.is_finite() || z <= buf * (1.0 + VISIBILITY_EPS)
                }
            }
        })
        .collect();
    RenderBuffers {
        height: h,
        width: w,
        part_index,
        face_index,
        depth,
        barycentric,
        visible,
    }
}
