//! Metrics (IOU, keypoint-transfer PCK, part-transfer PCP, parameter
//! recovery) and the synthetic testbed with known ground truth.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LassieError, Result};
use crate::features::{
    save_ensemble, ColorImage, FeatureEnsemble, FeatureMap, InstanceData, Keypoint, LabelMap,
};
use crate::geom::{euler_xyz, rotation_angle_between, Vec3};
use crate::losses::{LossHistory, VertexFeatures};
use crate::objective::{scene_for, Params, ShapeMode};
use crate::parts::{make_sphere, MlpParams, SphereTopology};
use crate::pipeline::{framing_camera, part_color, LassieConfig, LassieResult, PartMapSource};
use crate::prior::{Primitive, VaeConfig};
use crate::render::{hard_rasterize, pixel_of, project, Camera, RenderBuffers, SceneMesh, VISIBILITY_EPS};
use crate::skeleton::{
    build_skeleton, forward_kinematics, resting_pose, BoneScales, PoseParams, Skeleton, SkeletonSpec,
};

/// Intersection over union; an empty union scores 0.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LassieError::ShapeMismatch(format!("masks of {} and {} pixels", a.len(), b.len())));
    }
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// Mean per-part IOU over the parts present in `gt` (`-1` = background).
pub fn part_iou(pred: &[i32], gt: &[i32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(LassieError::ShapeMismatch(format!("label maps of {} and {} pixels", pred.len(), gt.len())));
    }
    let parts: std::collections::BTreeSet<i32> = gt.iter().copied().filter(|&l| l >= 0).collect();
    if parts.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for &p in &parts {
        let a: Vec<bool> = pred.iter().map(|&l| l == p).collect();
        let b: Vec<bool> = gt.iter().map(|&l| l == p).collect();
        sum += iou(&a, &b)?;
    }
    Ok(sum / parts.len() as f64)
}

/// One instance of a result seen through its camera at image resolution.
#[derive(Debug, Clone)]
pub struct InstanceView {
    pub scene: SceneMesh,
    pub buffers: RenderBuffers,
    /// Vertex projections in pixels (`x` right, `y` down).
    pub pixels: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub camera: Camera,
}

impl InstanceView {
    pub fn new(scene: SceneMesh, camera: &Camera) -> Self {
        let buffers = hard_rasterize(&scene, camera);
        let proj = project(camera, &scene.vertices);
        let (h, w) = (camera.height as f64, camera.width as f64);
        let pixels = proj.coords.iter().map(|c| [c[0] * w, c[1] * h]).collect();
        Self {
            scene,
            buffers,
            pixels,
            depth: proj.depth,
            camera: camera.clone(),
        }
    }
}

pub fn instance_views(result: &LassieResult, height: usize, width: usize) -> Result<Vec<InstanceView>> {
    (0..result.num_instances())
        .map(|j| Ok(InstanceView::new(result.instance_scene(j)?, &result.camera_at(j, height, width))))
        .collect()
}

/// Lifts `kp` (pixels) to the visible vertex of `src` projecting nearest to it
/// (ties go to the smaller depth) and returns that vertex's projection in
/// `dst`. `None` when no visible vertex lies within `r_max` pixels.
pub fn transfer_keypoint(src: &InstanceView, kp: [f64; 2], dst: &InstanceView, r_max: f64) -> Option<[f64; 2]> {
    let v = nearest_visible_vertex(src, kp)?;
    let d = ((src.pixels[v][0] - kp[0]).powi(2) + (src.pixels[v][1] - kp[1]).powi(2)).sqrt();
    (d <= r_max).then(|| dst.pixels[v])
}

pub fn default_r_max(height: usize, width: usize) -> f64 {
    0.05 * height.max(width) as f64
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PckReport {
    /// Percentage in `[0, 100]`.
    pub pck: f64,
    pub correct: usize,
    pub evaluated: usize,
    pub untransferable: usize,
}

/// Keypoint-transfer PCK over all ordered instance pairs. A keypoint counts
/// when it is visible in both images; untransferable ones are left out.
pub fn pck(
    views: &[InstanceView],
    keypoints: &[Vec<Keypoint>],
    image_size: (usize, usize),
    threshold_frac: f64,
) -> Result<PckReport> {
    if views.len() != keypoints.len() {
        return Err(LassieError::ShapeMismatch(format!(
            "{} views for {} keypoint sets",
            views.len(),
            keypoints.len()
        )));
    }
    let (h, w) = image_size;
    let thresh = threshold_frac * h.max(w) as f64;
    let r_max = default_r_max(h, w);
    let mut report = PckReport::default();
    for s in 0..views.len() {
        for t in 0..views.len() {
            if s == t {
                continue;
            }
            for kp in keypoints[s].iter().filter(|k| k.visible) {
                let Some(target) = keypoints[t].iter().find(|k| k.name == kp.name && k.visible) else {
                    continue;
                };
                match transfer_keypoint(&views[s], [kp.x, kp.y], &views[t], r_max) {
                    None => report.untransferable += 1,
                    Some(p) => {
                        report.evaluated += 1;
                        if ((p[0] - target.x).powi(2) + (p[1] - target.y).powi(2)).sqrt() <= thresh {
                            report.correct += 1;
                        }
                    }
                }
            }
        }
    }
    report.pck = if report.evaluated == 0 {
        0.0
    } else {
        100.0 * report.correct as f64 / report.evaluated as f64
    };
    Ok(report)
}

/// Visible vertex whose projection lies nearest to `p` (pixels); ties go to
/// the smaller depth, then the lower index.
fn nearest_visible_vertex(view: &InstanceView, p: [f64; 2]) -> Option<usize> {
    let mut best: Option<(f64, f64, usize)> = None;
    for (v, q) in view.pixels.iter().enumerate() {
        if !view.buffers.visible[v] {
            continue;
        }
        let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
        let better = match best {
            None => true,
            Some((bd, bz, _)) => d < bd || (d == bd && view.depth[v] < bz),
        };
        if better {
            best = Some((d, view.depth[v], v));
        }
    }
    best.map(|(_, _, v)| v)
}

/// A surface point under a pixel center as a perspective-correct blend of
/// the rendered face's vertices, or the nearest visible vertex when the
/// pixel is not covered.
fn lift_pixel(view: &InstanceView, row: usize, col: usize) -> Option<([usize; 3], [f64; 3])> {
    let idx = row * view.buffers.width + col;
    let face = view.buffers.face_index[idx];
    if face >= 0 {
        let f = view.scene.faces[face as usize];
        let b = view.buffers.barycentric[idx];
        let mut wts = [b[0] / view.depth[f[0]], b[1] / view.depth[f[1]], b[2] / view.depth[f[2]]];
        let s: f64 = wts.iter().sum();
        wts.iter_mut().for_each(|x| *x /= s);
        return Some((f, wts));
    }
    let v = nearest_visible_vertex(view, [col as f64 + 0.5, row as f64 + 0.5])?;
    Some(([v, v, v], [1.0, 0.0, 0.0]))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PcpReport {
    pub pcp: f64,
    pub correct: usize,
    pub evaluated: usize,
    /// Transfers that land on surface not visible in the target.
    pub occluded: usize,
}

/// Part-transfer PCP over all ordered pairs. Each source foreground pixel is
/// lifted to the surface point under it, re-posed into the target and
/// projected. A point counts as visible in the target only when the depth
/// buffer at its pixel holds it (within the visibility slack); hidden points
/// and points the target render does not cover at that pixel are left out.
/// Projections outside the target image count as wrong.
pub fn transfer_part_pcp(views: &[InstanceView], gt_masks: &[LabelMap]) -> Result<PcpReport> {
    if views.len() != gt_masks.len() {
        return Err(LassieError::ShapeMismatch(format!(
            "{} views for {} part masks",
            views.len(),
            gt_masks.len()
        )));
    }
    let mut report = PcpReport::default();
    for s in 0..views.len() {
        let src = &views[s];
        let sm = &gt_masks[s];
        if (sm.height, sm.width) != (src.buffers.height, src.buffers.width) {
            return Err(LassieError::ShapeMismatch("part mask and view resolution differ".into()));
        }
        let lifted: Vec<(i32, [usize; 3], [f64; 3])> = (0..sm.labels.len())
            .filter(|&p| sm.labels[p] >= 0)
            .filter_map(|p| lift_pixel(src, p / sm.width, p % sm.width).map(|(f, b)| (sm.labels[p], f, b)))
            .collect();
        for t in 0..views.len() {
            if s == t {
                continue;
            }
            let dst = &views[t];
            let tm = &gt_masks[t];
            for (label, f, b) in &lifted {
                let point: Vec3 = (0..3).map(|k| dst.scene.vertices[f[k]] * b[k]).sum();
                let proj = project(&dst.camera, std::slice::from_ref(&point));
                if proj.behind[0] {
                    report.occluded += 1;
                    continue;
                }
                let Some((row, col)) = pixel_of(proj.coords[0], tm.height, tm.width) else {
                    report.evaluated += 1;
                    continue;
                };
                let idx = row * tm.width + col;
                let zbuf = dst.buffers.depth[idx];
                if !(zbuf.is_finite() && (proj.depth[0] - zbuf).abs() <= VISIBILITY_EPS * zbuf) {
                    report.occluded += 1;
                    continue;
                }
                report.evaluated += 1;
                if tm.labels[idx] == *label {
                    report.correct += 1;
                }
            }
        }
    }
    report.pcp = if report.evaluated == 0 {
        0.0
    } else {
        100.0 * report.correct as f64 / report.evaluated as f64
    };
    Ok(report)
}

/// Mean squared umbrella-Laplacian length over all part vertices, divided by
/// the squared mean edge length so it does not depend on scale.
pub fn laplacian_energy(shapes: &[Vec<Vec3>], topology: &SphereTopology) -> f64 {
    let mut energy = 0.0;
    let mut count = 0usize;
    for verts in shapes {
        let mut edge_sum = 0.0;
        let mut edges = 0usize;
        let mut lap = 0.0;
        for (v, nb) in topology.neighbors.iter().enumerate() {
            if nb.is_empty() {
                continue;
            }
            let mean: Vec3 = nb.iter().map(|&u| verts[u]).sum::<Vec3>() / nb.len() as f64;
            lap += (verts[v] - mean).norm_squared();
            for &u in nb {
                if u > v {
                    edge_sum += (verts[u] - verts[v]).norm();
                    edges += 1;
                }
            }
        }
        let mean_edge = edge_sum / edges.max(1) as f64;
        if mean_edge > 0.0 {
            energy += lap / verts.len() as f64 / (mean_edge * mean_edge);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        energy / count as f64
    }
}

/// Absolute angle between two azimuths, wrapped to `[0, 180]` degrees.
pub fn azimuth_error_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d).to_degrees()
}

/// Geodesic angle between two local bone rotations, degrees.
pub fn bone_error_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    rotation_angle_between(&euler_xyz(a), &euler_xyz(b)).to_degrees()
}

/// Synthetic ensemble description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Skeleton template name.
    pub template: String,
    pub n: usize,
    /// Standard deviation of the Gaussian noise added to every feature channel.
    pub noise: f64,
    pub image_size: usize,
    pub feature_size: usize,
    pub feature_dim: usize,
    pub grid: [usize; 2],
    /// Largest leg swing about the bone's x axis, degrees.
    pub leg_swing_deg: f64,
    pub neck_swing_deg: f64,
    pub elevation_deg: [f64; 2],
    pub fill: f64,
    /// Part shapes; empty picks defaults from the part names.
    pub shapes: Vec<Primitive>,
    /// Feature cluster of every part; empty gives each part its own cluster.
    pub part_clusters: Vec<usize>,
    pub with_images: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            template: "quadruped".into(),
            n: 8,
            noise: 0.1,
            image_size: 128,
            feature_size: 64,
            feature_dim: 16,
            grid: [16, 10],
            leg_swing_deg: 25.0,
            neck_swing_deg: 10.0,
            elevation_deg: [5.0, 15.0],
            fill: 0.7,
            shapes: Vec::new(),
            part_clusters: Vec::new(),
            with_images: true,
        }
    }
}

/// Default primitive for a part, chosen by name.
pub fn default_part_shape(name: &str) -> Primitive {
    let e = |a: f64, b: f64| Primitive::Ellipsoid { axes: [a, 1.0, b] };
    if name.contains("torso") {
        e(0.55, 0.65)
    } else if name.contains("neck") {
        e(0.5, 0.5)
    } else if name.contains("head") {
        e(0.7, 0.75)
    } else if name.contains("upper") {
        e(0.55, 0.55)
    } else if name.contains("middle") {
        e(0.5, 0.5)
    } else {
        e(0.45, 0.45)
    }
}

/// Known parameters behind a synthetic ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub skeleton: SkeletonSpec,
    pub grid: [usize; 2],
    pub shapes: Vec<Primitive>,
    pub part_clusters: Vec<usize>,
    /// Cameras at image resolution.
    pub cameras: Vec<Camera>,
    pub poses: Vec<PoseParams>,
    pub scales: BoneScales,
    /// Keypoint name and the global mesh vertex it sits on.
    pub keypoint_vertices: Vec<(String, usize)>,
    pub noise: f64,
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

impl GroundTruth {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(LassieError::MissingFile {
                path: path.to_path_buf(),
            });
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn canonical_shapes(&self, topology: &SphereTopology) -> Result<Vec<Vec<Vec3>>> {
        self.shapes
            .iter()
            .map(|s| {
                s.validate()?;
                Ok(topology.vertices.iter().map(|d| s.surface_point(d)).collect())
            })
            .collect()
    }

    /// The true parameters packaged as a fixed-shape result.
    pub fn to_result(&self) -> Result<LassieResult> {
        let skeleton = build_skeleton(&self.skeleton)?;
        let topology = make_sphere(self.grid[0], self.grid[1])?;
        let b = skeleton.num_bones();
        Ok(LassieResult {
            skeleton: self.skeleton.clone(),
            grid: self.grid,
            shape_mode: ShapeMode::Fixed,
            prior: None,
            fixed_shapes: self.canonical_shapes(&topology)?,
            params: Params {
                cameras: self.cameras.clone(),
                poses: self.poses.clone(),
                rest_pose: resting_pose(&skeleton),
                scales: self.scales.clone(),
                codes: vec![Vec::new(); b],
                deform: (0..b)
                    .map(|_| MlpParams::init_zero_output(0, 1, &mut ChaCha8Rng::seed_from_u64(0)))
                    .collect(),
            },
            features: VertexFeatures::uninitialized(b * topology.num_vertices(), 1),
            history: LossHistory::default(),
            instance_ids: (0..self.cameras.len()).map(|j| format!("synth_{j}")).collect(),
        })
    }
}

fn random_pose<R: Rng + ?Sized>(skeleton: &Skeleton, spec: &SyntheticSpec, rng: &mut R) -> PoseParams {
    let mut pose = resting_pose(skeleton);
    let names = skeleton.part_names();
    for (k, name) in names.iter().enumerate() {
        let swing = if skeleton.leg_bones.contains(&k) {
            let s = spec.leg_swing_deg.to_radians();
            if name.contains("upper") { s } else { 0.5 * s }
        } else if name.contains("neck") || name.contains("head") {
            spec.neck_swing_deg.to_radians()
        } else {
            0.0
        };
        if swing > 0.0 {
            pose.bone_rotations[k][0] = rng.random_range(-swing..=swing);
        }
    }
    pose
}

/// Renders the articulated primitive model for every instance and builds the
/// feature ensemble: one-hot cluster features plus noise on the foreground,
/// a separate background channel, saliency equal to the true mask, part
/// labels, keypoints and (optionally) flat-shaded part-colored images.
pub fn make_synth(spec: &SyntheticSpec, seed: u64) -> Result<(FeatureEnsemble, GroundTruth)> {
    let skel_spec = SkeletonSpec::template(&spec.template)
        .ok_or_else(|| LassieError::InvalidParameter(format!("unknown skeleton template `{}`", spec.template)))?;
    let skeleton = build_skeleton(&skel_spec)?;
    let b = skeleton.num_bones();
    let names = skeleton.part_names();
    let shapes = if spec.shapes.is_empty() {
        names.iter().map(|n| default_part_shape(n)).collect()
    } else {
        spec.shapes.clone()
    };
    let part_clusters = if spec.part_clusters.is_empty() {
        (0..b).collect()
    } else {
        spec.part_clusters.clone()
    };
    if shapes.len() != b || part_clusters.len() != b {
        return Err(LassieError::ShapeMismatch(format!(
            "{} shapes and {} cluster labels for {b} parts",
            shapes.len(),
            part_clusters.len()
        )));
    }
    let clusters_used = part_clusters.iter().max().map_or(0, |c| c + 1);
    if spec.feature_dim < clusters_used + 1 {
        return Err(LassieError::InvalidParameter(format!(
            "feature_dim {} cannot hold {clusters_used} clusters plus background",
            spec.feature_dim
        )));
    }
    if spec.n == 0 || spec.image_size == 0 || spec.feature_size == 0 {
        return Err(LassieError::InvalidParameter("n, image_size and feature_size must be positive".into()));
    }
    let topology = make_sphere(spec.grid[0], spec.grid[1])?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales = BoneScales::ones(b);
    let mut gt = GroundTruth {
        skeleton: skel_spec,
        grid: spec.grid,
        shapes,
        part_clusters,
        cameras: Vec::new(),
        poses: Vec::new(),
        scales: scales.clone(),
        keypoint_vertices: Vec::new(),
        noise: spec.noise,
    };
    let canonical = gt.canonical_shapes(&topology)?;

    let rest_scene = scene_for(&skeleton, &topology.faces, &canonical, &resting_pose(&skeleton), &scales);
    let rest_t = forward_kinematics(&skeleton, &resting_pose(&skeleton), &scales);
    for (j, name) in skeleton.joint_names.iter().enumerate() {
        let target = rest_t.joints[j];
        let v = (0..rest_scene.vertices.len())
            .min_by(|&a, &c| {
                (rest_scene.vertices[a] - target)
                    .norm_squared()
                    .total_cmp(&(rest_scene.vertices[c] - target).norm_squared())
            })
            .expect("mesh has vertices");
        gt.keypoint_vertices.push((name.clone(), v));
    }

    let (hi, fi) = (spec.image_size, spec.feature_size);
    let f = spec.feature_dim;
    let mut instances = Vec::with_capacity(spec.n);
    for j in 0..spec.n {
        let az = std::f64::consts::TAU * (j as f64 + rng.random_range(0.15..0.85)) / spec.n as f64;
        let el = rng.random_range(spec.elevation_deg[0]..=spec.elevation_deg[1]).to_radians();
        let fill = spec.fill * rng.random_range(0.95..1.05);
        let mut cam = framing_camera(&skeleton, &scales, az, el, fill, hi, hi);
        cam.translation[0] += rng.random_range(-0.05..0.05);
        cam.translation[1] += rng.random_range(-0.05..0.05);
        let pose = random_pose(&skeleton, spec, &mut rng);
        let scene = scene_for(&skeleton, &topology.faces, &canonical, &pose, &scales);

        let img_buf = hard_rasterize(&scene, &cam);
        let mut feat_cam = cam.clone();
        feat_cam.height = fi;
        feat_cam.width = fi;
        let feat_buf = hard_rasterize(&scene, &feat_cam);

        let mut data = Vec::with_capacity(fi * fi * f);
        let mut saliency = Vec::with_capacity(fi * fi);
        for &p in &feat_buf.part_index {
            let channel = if p >= 0 { gt.part_clusters[p as usize] } else { f - 1 };
            for c in 0..f {
                let base = if c == channel { 1.0 } else { 0.0 };
                let noise: f64 = rng.sample(StandardNormal);
                data.push(base + spec.noise * noise);
            }
            saliency.push(if p >= 0 { 1.0 } else { 0.0 });
        }

        let proj = project(&cam, &scene.vertices);
        let keypoints = gt
            .keypoint_vertices
            .iter()
            .map(|(name, v)| Keypoint {
                name: name.clone(),
                x: proj.coords[*v][0] * hi as f64,
                y: proj.coords[*v][1] * hi as f64,
                visible: img_buf.visible[*v],
            })
            .collect();

        let image = spec.with_images.then(|| shaded_image(&scene, &img_buf, &cam));
        instances.push(InstanceData {
            id: format!("synth_{j}"),
            features: FeatureMap::new(fi, fi, f, data)?,
            saliency,
            image,
            keypoints: Some(keypoints),
            part_mask: Some(LabelMap {
                height: hi,
                width: hi,
                labels: img_buf.part_index.clone(),
            }),
        });
        gt.cameras.push(cam);
        gt.poses.push(pose);
    }
    let ensemble = FeatureEnsemble {
        instances,
        image_size: (hi, hi),
        provenance: serde_json::json!({
            "generator": "make_synth",
            "seed": seed,
            "noise": spec.noise,
            "template": spec.template,
        }),
    };
    Ok((ensemble, gt))
}

/// Part colors with Lambert shading from a light at the camera.
fn shaded_image(scene: &SceneMesh, buffers: &RenderBuffers, camera: &Camera) -> ColorImage {
    let r = camera.rotation();
    let mut pixels = vec![[0.5, 0.5, 0.5]; buffers.height * buffers.width];
    for (i, &face) in buffers.face_index.iter().enumerate() {
        if face < 0 {
            continue;
        }
        let f = scene.faces[face as usize];
        let [a, b, c] = f.map(|v| r * scene.vertices[v]);
        let n = (b - a).cross(&(c - a));
        let shade = if n.norm() > 0.0 { 0.4 + 0.6 * (n.z / n.norm()).abs() } else { 1.0 };
        let base = part_color(scene.face_part[face as usize]);
        pixels[i] = base.map(|v| v as f64 / 255.0 * shade);
    }
    ColorImage {
        height: buffers.height,
        width: buffers.width,
        pixels,
    }
}

/// Optimizer settings sized for the synthetic testbed: one cluster per part
/// cluster label, part map from the annotated masks, a sharp soft
/// rasterizer at 128 pixels and a short three-phase schedule.
pub fn testbed_config(spec: &SyntheticSpec) -> LassieConfig {
    let clusters = if spec.part_clusters.is_empty() {
        SkeletonSpec::template(&spec.template).map_or(1, |s| s.joints.len() - 1)
    } else {
        spec.part_clusters.iter().max().map_or(1, |c| c + 1)
    };
    let mut config = LassieConfig {
        skeleton: spec.template.clone(),
        part_map: PartMapSource::Annotated,
        grid: spec.grid,
        deform_hidden: 64,
        clusters,
        pca_dim: None,
        render_size: 128,
        sigma: 2.5e-6,
        max_pixels: 256,
        max_vertices: 256,
        ..Default::default()
    };
    config.weights.sem = 0.05;
    config.schedule.phases = [150, 150, 300];
    config
}

/// Part VAE settings that train in well under a minute on one core.
pub fn testbed_vae_config() -> VaeConfig {
    VaeConfig {
        latent_dim: 16,
        hidden: 64,
        samples: 1000,
        epochs: 30,
        lr: 2e-3,
        ..Default::default()
    }
}

/// Writes the bundle and `ground_truth.json` into `dir`.
pub fn write_synth(spec: &SyntheticSpec, seed: u64, dir: impl AsRef<Path>) -> Result<GroundTruth> {
    let dir = dir.as_ref();
    let (ensemble, gt) = make_synth(spec, seed)?;
    save_ensemble(&ensemble, dir)?;
    gt.save(dir.join(GROUND_TRUTH_FILE))?;
    Ok(gt)
}

/// How close an optimized result is to the synthetic ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub mean_iou: f64,
    /// Mean geodesic error over all non-root bones and instances, degrees.
    pub mean_bone_error_deg: f64,
    pub mean_azimuth_error_deg: f64,
}

pub fn recovery_metrics(result: &LassieResult, gt: &GroundTruth, ensemble: &FeatureEnsemble) -> Result<RecoveryReport> {
    let n = gt.cameras.len();
    if result.num_instances() != n || ensemble.instances.len() != n {
        return Err(LassieError::ShapeMismatch(format!(
            "result has {} instances, ground truth {n}",
            result.num_instances()
        )));
    }
    let skeleton = build_skeleton(&gt.skeleton)?;
    let root = skeleton.bones.iter().position(|b| b.parent_bone.is_none());
    let mut report = RecoveryReport::default();
    let mut bones = 0usize;
    for j in 0..n {
        let mask = ensemble.instances[j]
            .part_mask
            .as_ref()
            .ok_or_else(|| LassieError::InvalidParameter(format!("instance {j} has no true mask")))?;
        let (_, buffers) = result.render(j, mask.height, mask.width)?;
        report.mean_iou += iou(&buffers.mask(), &mask.foreground())?;
        report.mean_azimuth_error_deg += azimuth_error_deg(result.params.cameras[j].azimuth, gt.cameras[j].azimuth);
        for k in 0..skeleton.num_bones() {
            if Some(k) == root {
                continue;
            }
            report.mean_bone_error_deg +=
                bone_error_deg(result.params.poses[j].bone_rotations[k], gt.poses[j].bone_rotations[k]);
            bones += 1;
        }
    }
    report.mean_iou /= n as f64;
    report.mean_azimuth_error_deg /= n as f64;
    report.mean_bone_error_deg /= bones.max(1) as f64;
    Ok(report)
}

/// Full metric report for the `eval` command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pck_01: Option<PckReport>,
    pub pck_005: Option<PckReport>,
    pub pcp: Option<PcpReport>,
    pub mean_iou: Option<f64>,
    pub mean_part_iou: Option<f64>,
    pub recovery: Option<RecoveryReport>,
    pub laplacian_energy: f64,
}

/// Every metric the ensemble's annotations allow.
pub fn evaluate_result(
    result: &LassieResult,
    ensemble: &FeatureEnsemble,
    gt: Option<&GroundTruth>,
) -> Result<EvalReport> {
    let (h, w) = ensemble.image_size;
    let views = instance_views(result, h, w)?;
    let mut report = EvalReport {
        laplacian_energy: laplacian_energy(&result.canonical()?, &result.topology()?),
        ..Default::default()
    };
    let kps: Option<Vec<Vec<Keypoint>>> = ensemble.instances.iter().map(|i| i.keypoints.clone()).collect();
    if let Some(kps) = kps {
        if kps.len() >= 2 {
            report.pck_01 = Some(pck(&views, &kps, (h, w), 0.1)?);
            report.pck_005 = Some(pck(&views, &kps, (h, w), 0.05)?);
        }
    }
    let masks: Option<Vec<LabelMap>> = ensemble.instances.iter().map(|i| i.part_mask.clone()).collect();
    if let Some(masks) = masks {
        if masks.len() >= 2 {
            report.pcp = Some(transfer_part_pcp(&views, &masks)?);
        }
        let mut overall = 0.0;
        let mut parts = 0.0;
        for (v, m) in views.iter().zip(&masks) {
            overall += iou(&v.buffers.mask(), &m.foreground())?;
            parts += part_iou(&v.buffers.part_index, &m.labels)?;
        }
        report.mean_iou = Some(overall / masks.len() as f64);
        report.mean_part_iou = Some(parts / masks.len() as f64);
    }
    if let Some(gt) = gt {
        report.recovery = Some(recovery_metrics(result, gt, ensemble)?);
    }
    Ok(report)
}
