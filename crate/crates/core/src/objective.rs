//! Model parameters, the full objective and its gradient.
//!
//! The forward chain is
//! MLPs -> mirror -> bone placement -> forward kinematics -> projection ->
//! soft silhouette / semantic Chamfer, and every stage has a hand-written
//! adjoint. Everything that changes only between iterations (jittered sphere
//! samples, visible-vertex samples, pixel samples, per-vertex features) is
//! frozen in an [`IterationContext`], which keeps the objective a smooth
//! function of the parameters within one iteration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LassieError, Result};
use crate::geom::Vec3;
use crate::losses::{
    angle_loss, laplacian_loss, normal_loss, pose_prior_loss, semantic_chamfer, silhouette_loss,
    total_objective, LossTerms, LossWeights, SemanticPoints, VertexFeatures, VertexView,
};
use crate::optim::Group;
use crate::parts::{
    encode_points, mlp_backward, mlp_forward, place_part, place_part_backward, points_to_rows,
    rows_to_points, symmetrize, MlpCache, MlpParams, SphereTopology,
};
use crate::render::{
    hard_rasterize, project, project_backward, soft_silhouette, soft_silhouette_backward,
    Camera, RenderBuffers, SceneMesh,
};
use crate::skeleton::{
    forward_kinematics, forward_kinematics_backward, BoneScales, BoneTransforms, PoseParams,
    Skeleton, TransformGrads,
};

/// How canonical part shapes are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeMode {
    /// Frozen prior decoder conditioned on a latent code, plus deformation.
    Prior,
    /// The deformation MLP alone maps sphere points to the part surface.
    NoPrior,
    /// Explicit canonical vertices that are not optimized.
    Fixed,
}

#[derive(Debug, Clone)]
pub struct ShapeModel {
    pub topology: SphereTopology,
    pub mode: ShapeMode,
    pub prior: Option<MlpParams>,
    /// Canonical vertices per part, used in [`ShapeMode::Fixed`].
    pub fixed: Vec<Vec<Vec3>>,
}

impl ShapeModel {
    pub fn faces(&self) -> &[[usize; 3]] {
        &self.topology.faces
    }
}

/// All optimizable quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub cameras: Vec<Camera>,
    pub poses: Vec<PoseParams>,
    /// Shared resting pose the per-instance poses are pulled towards.
    pub rest_pose: PoseParams,
    pub scales: BoneScales,
    pub codes: Vec<Vec<f64>>,
    pub deform: Vec<MlpParams>,
}

impl Params {
    pub fn num_instances(&self) -> usize {
        self.cameras.len()
    }

    pub fn group_len(&self, g: Group) -> usize {
        match g {
            Group::Camera => 6 * self.cameras.len(),
            Group::Pose => 3 * (self.poses.iter().map(PoseParams::len).sum::<usize>() + self.rest_pose.len()),
            Group::Scales => self.scales.scales.len(),
            Group::Codes => self.codes.iter().map(Vec::len).sum(),
            Group::Deform => self.deform.iter().map(MlpParams::num_params).sum(),
        }
    }

    /// Flat copy of one group, in the same layout as its gradient.
    pub fn read_group(&self, g: Group) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.group_len(g));
        match g {
            Group::Camera => self.cameras.iter().for_each(|c| out.extend(c.params())),
            Group::Pose => {
                for p in self.poses.iter().chain(std::iter::once(&self.rest_pose)) {
                    p.bone_rotations.iter().for_each(|r| out.extend(r));
                }
            }
            Group::Scales => out.extend(&self.scales.scales),
            Group::Codes => self.codes.iter().for_each(|c| out.extend(c)),
            Group::Deform => self.deform.iter().for_each(|d| d.write_flat(&mut out)),
        }
        out
    }

    pub fn write_group(&mut self, g: Group, values: &[f64]) {
        assert_eq!(values.len(), self.group_len(g), "group `{}` length", g.name());
        let mut at = 0;
        match g {
            Group::Camera => {
                for c in &mut self.cameras {
                    c.set_params(&values[at..at + 6]);
                    at += 6;
                }
            }
            Group::Pose => {
                for p in self.poses.iter_mut().chain(std::iter::once(&mut self.rest_pose)) {
                    for r in &mut p.bone_rotations {
                        r.copy_from_slice(&values[at..at + 3]);
                        at += 3;
                    }
                }
            }
            Group::Scales => self.scales.scales.copy_from_slice(values),
            Group::Codes => {
                for c in &mut self.codes {
                    let n = c.len();
                    c.copy_from_slice(&values[at..at + n]);
                    at += n;
                }
            }
            Group::Deform => {
                for d in &mut self.deform {
                    at += d.read_flat(&values[at..]);
                }
            }
        }
    }
}

/// Canonical shapes plus what the backward pass needs.
pub struct CanonicalCache {
    prior: Vec<Option<MlpCache>>,
    deform: Vec<Option<MlpCache>>,
}

/// Canonical part shapes decoded at the given sphere points.
pub fn canonical_shapes(
    shape: &ShapeModel,
    params: &Params,
    sphere_points: &[Vec3],
) -> Result<(Vec<Vec<Vec3>>, CanonicalCache)> {
    let b = params.scales.scales.len();
    if shape.mode == ShapeMode::Fixed {
        if shape.fixed.len() != b {
            return Err(LassieError::ShapeMismatch(format!(
                "{} fixed part shapes for {b} bones",
                shape.fixed.len()
            )));
        }
        return Ok((
            shape.fixed.clone(),
            CanonicalCache {
                prior: vec![None; b],
                deform: vec![None; b],
            },
        ));
    }
    let encoded = encode_points(sphere_points);
    let mut shapes = Vec::with_capacity(b);
    let mut prior_caches = Vec::with_capacity(b);
    let mut deform_caches = Vec::with_capacity(b);
    for i in 0..b {
        let (delta, dc) = mlp_forward(&params.deform[i], &encoded, &[])?;
        let raw = match shape.mode {
            ShapeMode::Prior => {
                let prior = shape
                    .prior
                    .as_ref()
                    .ok_or_else(|| LassieError::InvalidParameter("prior mode without a prior".into()))?;
                let (base, pc) = mlp_forward(prior, &encoded, &params.codes[i])?;
                prior_caches.push(Some(pc));
                base + delta
            }
            _ => {
                prior_caches.push(None);
                delta
            }
        };
        deform_caches.push(Some(dc));
        shapes.push(symmetrize(&rows_to_points(&raw), &shape.topology)?);
    }
    Ok((
        shapes,
        CanonicalCache {
            prior: prior_caches,
            deform: deform_caches,
        },
    ))
}

/// Posed vertices of all parts, concatenated part by part.
pub fn posed_vertices(canonical: &[Vec<Vec3>], transforms: &BoneTransforms) -> Vec<Vec3> {
    canonical
        .iter()
        .enumerate()
        .flat_map(|(i, c)| place_part(c, transforms, i))
        .collect()
}

pub fn scene_for(
    skeleton: &Skeleton,
    faces: &[[usize; 3]],
    canonical: &[Vec<Vec3>],
    pose: &PoseParams,
    scales: &BoneScales,
) -> SceneMesh {
    let t = forward_kinematics(skeleton, pose, scales);
    let parts: Vec<Vec<Vec3>> = canonical
        .iter()
        .enumerate()
        .map(|(i, c)| place_part(c, &t, i))
        .collect();
    SceneMesh::from_parts(&parts, faces)
}

/// Per-instance supervision that stays fixed for the whole optimization.
#[derive(Debug, Clone)]
pub struct InstanceTargets {
    /// Pseudo ground-truth mask at render resolution, values in {0, 1}.
    pub mask: Vec<f64>,
    /// Every foreground pixel of the feature grid with its feature.
    pub pixels: SemanticPoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveSettings {
    pub weights: LossWeights,
    pub sigma: f64,
    pub render_height: usize,
    pub render_width: usize,
    /// Optimize the shared resting pose; when false it stays at its value.
    pub learn_rest_pose: bool,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            sigma: 1e-4,
            render_height: 64,
            render_width: 64,
            learn_rest_pose: true,
        }
    }
}

/// Quantities frozen for one iteration.
#[derive(Debug, Clone)]
pub struct IterationContext {
    pub sphere_points: Vec<Vec3>,
    pub pixel_samples: Vec<SemanticPoints>,
    /// Global vertex indices (`part * m + local`) sampled per instance.
    pub vertex_samples: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub terms: LossTerms,
    pub total: f64,
    /// Flat gradient per group in [`Group::ALL`] order; empty when inactive.
    pub grads: [Vec<f64>; 5],
}

impl Evaluation {
    pub fn grad(&self, g: Group) -> &[f64] {
        &self.grads[g.index()]
    }
}

/// `k` indices spread evenly over `0..len` with a random phase.
pub fn stratified<R: Rng + ?Sized>(len: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    let u: f64 = rng.random();
    let step = len as f64 / k as f64;
    (0..k)
        .map(|i| (((i as f64 + u) * step) as usize).min(len - 1))
        .collect()
}

fn subsample_points(points: &SemanticPoints, idx: &[usize]) -> SemanticPoints {
    let mut out = SemanticPoints {
        coords: Vec::with_capacity(idx.len()),
        dim: points.dim,
        features: Vec::with_capacity(idx.len() * points.dim),
        has_feature: Vec::with_capacity(idx.len()),
    };
    for &i in idx {
        out.coords.push(points.coords[i]);
        out.features.extend_from_slice(points.feature(i));
        out.has_feature.push(points.has_feature[i]);
    }
    out
}

/// Hard-rasterized views of every instance (projections and visibility).
pub fn render_instances(
    skeleton: &Skeleton,
    shape: &ShapeModel,
    params: &Params,
    canonical: &[Vec<Vec3>],
) -> Vec<(SceneMesh, RenderBuffers, VertexView)> {
    params
        .cameras
        .iter()
        .zip(&params.poses)
        .map(|(cam, pose)| {
            let scene = scene_for(skeleton, shape.faces(), canonical, pose, &params.scales);
            let buffers = hard_rasterize(&scene, cam);
            let proj = project(cam, &scene.vertices);
            let view = VertexView {
                coords: proj.coords,
                visible: buffers.visible.clone(),
            };
            (scene, buffers, view)
        })
        .collect()
}

/// Freezes sphere jitter and pixel/vertex samples for one iteration.
#[allow(clippy::too_many_arguments)]
pub fn build_context<R: Rng + ?Sized>(
    skeleton: &Skeleton,
    shape: &ShapeModel,
    params: &Params,
    targets: &[InstanceTargets],
    jitter: f64,
    max_pixels: usize,
    max_vertices: usize,
    rng: &mut R,
) -> Result<IterationContext> {
    let sphere_points = if jitter > 0.0 && shape.mode != ShapeMode::Fixed {
        shape.topology.jittered(jitter, rng)
    } else {
        shape.topology.vertices.clone()
    };
    let (canonical, _) = canonical_shapes(shape, params, &sphere_points)?;
    let views = render_instances(skeleton, shape, params, &canonical);
    let mut pixel_samples = Vec::with_capacity(targets.len());
    let mut vertex_samples = Vec::with_capacity(targets.len());
    for (t, (_, _, view)) in targets.iter().zip(&views) {
        let idx = stratified(t.pixels.len(), max_pixels, rng);
        pixel_samples.push(subsample_points(&t.pixels, &idx));
        let visible: Vec<usize> = (0..view.visible.len()).filter(|&v| view.visible[v]).collect();
        let pick = stratified(visible.len(), max_vertices, rng);
        vertex_samples.push(pick.into_iter().map(|i| visible[i]).collect());
    }
    Ok(IterationContext {
        sphere_points,
        pixel_samples,
        vertex_samples,
    })
}

/// Evaluates the weighted objective and the gradient of every active group.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    skeleton: &Skeleton,
    shape: &ShapeModel,
    params: &Params,
    targets: &[InstanceTargets],
    ctx: &IterationContext,
    q: &VertexFeatures,
    settings: &ObjectiveSettings,
    active: &[Group],
) -> Result<Evaluation> {
    let n = params.num_instances();
    if targets.len() != n || params.poses.len() != n {
        return Err(LassieError::ShapeMismatch(format!(
            "{n} cameras, {} poses, {} targets",
            params.poses.len(),
            targets.len()
        )));
    }
    let w = &settings.weights;
    let is_on = |g: Group| active.contains(&g);
    let shape_on = shape.mode != ShapeMode::Fixed && (is_on(Group::Codes) || is_on(Group::Deform));
    let b = skeleton.num_bones();
    let m = shape.topology.num_vertices();
    let (h, wd) = (settings.render_height, settings.render_width);

    let (canonical, cache) = canonical_shapes(shape, params, &ctx.sphere_points)?;
    let mut g_canon = vec![vec![Vec3::zeros(); m]; b];
    let mut g_cameras = vec![[0.0; 6]; n];
    let mut g_poses = vec![vec![[0.0; 3]; b]; n];
    let mut g_scales = vec![0.0; b];
    let mut terms = LossTerms::default();

    let mut faces = Vec::with_capacity(b * shape.topology.faces.len());
    for i in 0..b {
        let off = i * m;
        faces.extend(shape.topology.faces.iter().map(|f| [f[0] + off, f[1] + off, f[2] + off]));
    }

    for j in 0..n {
        let cam = &params.cameras[j];
        if cam.height != h || cam.width != wd {
            return Err(LassieError::ShapeMismatch(format!(
                "camera {j} renders {}x{}, objective expects {h}x{wd}",
                cam.height, cam.width
            )));
        }
        let transforms = forward_kinematics(skeleton, &params.poses[j], &params.scales);
        let verts = posed_vertices(&canonical, &transforms);
        let proj = project(cam, &verts);
        let sil = soft_silhouette(&proj, &faces, h, wd, settings.sigma);
        let (l_mask, g_img) = silhouette_loss(&sil, &targets[j].mask)?;
        terms.mask += l_mask;
        let mut g_coords = soft_silhouette_backward(&proj, &faces, h, wd, settings.sigma, &sil, &g_img);

        let samples = &ctx.vertex_samples[j];
        if w.sem > 0.0 && !samples.is_empty() && !ctx.pixel_samples[j].is_empty() {
            let mut vs = SemanticPoints {
                coords: Vec::with_capacity(samples.len()),
                dim: q.dim,
                features: Vec::with_capacity(samples.len() * q.dim),
                has_feature: Vec::with_capacity(samples.len()),
            };
            for &v in samples {
                vs.coords.push(proj.coords[v]);
                vs.features.extend_from_slice(q.row(v));
                vs.has_feature.push(q.is_initialized(v));
            }
            let (l_sem, g_sem) = semantic_chamfer(&ctx.pixel_samples[j], &vs, w.alpha)?;
            terms.sem += l_sem;
            for (k, &v) in samples.iter().enumerate() {
                g_coords[v][0] += w.sem * g_sem[k][0];
                g_coords[v][1] += w.sem * g_sem[k][1];
            }
        }

        let g_world = project_backward(cam, &verts, &g_coords, &mut g_cameras[j]);
        if is_on(Group::Pose) || is_on(Group::Scales) || shape_on {
            let mut tg = TransformGrads::zeros(b);
            for i in 0..b {
                let gc = place_part_backward(&canonical[i], &transforms, i, &g_world[i * m..(i + 1) * m], &mut tg);
                if shape_on {
                    for (acc, g) in g_canon[i].iter_mut().zip(gc) {
                        *acc += g;
                    }
                }
            }
            let (ga, gs) = forward_kinematics_backward(skeleton, &params.poses[j], &params.scales, &transforms, &tg);
            g_poses[j] = ga;
            for (acc, g) in g_scales.iter_mut().zip(gs) {
                *acc += g;
            }
        }
    }

    let (l_pose, gp, g_rest) = pose_prior_loss(&params.poses, &params.rest_pose);
    let (l_ang, ga) = angle_loss(&params.poses, &skeleton.leg_bones);
    terms.pose = l_pose;
    terms.ang = l_ang;
    for j in 0..n {
        for k in 0..b {
            for a in 0..3 {
                g_poses[j][k][a] += w.pose * gp[j][k][a] + w.ang * ga[j][k][a];
            }
        }
    }

    for (i, c) in canonical.iter().enumerate() {
        let (l_lap, g_lap) = laplacian_loss(c, &shape.topology.neighbors);
        let (l_norm, g_norm) = normal_loss(c, &shape.topology.faces, &shape.topology.adjacent_faces);
        terms.lap += l_lap;
        terms.norm += l_norm;
        if shape_on {
            for v in 0..m {
                g_canon[i][v] += g_lap[v] * w.lap + g_norm[v] * w.norm;
            }
        }
    }

    let total = total_objective(&terms, w)?;

    let mut grads: [Vec<f64>; 5] = Default::default();
    if is_on(Group::Camera) {
        grads[Group::Camera.index()] = g_cameras.iter().flatten().copied().collect();
    }
    if is_on(Group::Pose) {
        let mut g: Vec<f64> = g_poses.iter().flatten().flatten().copied().collect();
        for r in &g_rest {
            for a in 0..3 {
                g.push(if settings.learn_rest_pose { w.pose * r[a] } else { 0.0 });
            }
        }
        grads[Group::Pose.index()] = g;
    }
    if is_on(Group::Scales) {
        grads[Group::Scales.index()] = g_scales;
    }
    if shape_on {
        let mut g_codes = Vec::new();
        let mut g_deform = Vec::new();
        for i in 0..b {
            let g_raw = points_to_rows(&symmetrize(&g_canon[i], &shape.topology)?);
            if is_on(Group::Codes) && shape.mode == ShapeMode::Prior {
                let prior = shape.prior.as_ref().expect("checked in canonical_shapes");
                let pc = cache.prior[i].as_ref().expect("prior cache");
                let (_, gc) = mlp_backward(prior, pc, &params.codes[i], &g_raw);
                g_codes.extend(gc);
            }
            if is_on(Group::Deform) {
                let dc = cache.deform[i].as_ref().expect("deform cache");
                let (gd, _) = mlp_backward(&params.deform[i], dc, &[], &g_raw);
                gd.write_flat(&mut g_deform);
            }
        }
        if is_on(Group::Codes) {
            if shape.mode != ShapeMode::Prior {
                g_codes = vec![0.0; params.group_len(Group::Codes)];
            }
            grads[Group::Codes.index()] = g_codes;
        }
        grads[Group::Deform.index()] = g_deform;
    } else {
        for g in [Group::Codes, Group::Deform] {
            if is_on(g) {
                grads[g.index()] = vec![0.0; params.group_len(g)];
            }
        }
    }
    for g in Group::ALL {
        if let Some(i) = grads[g.index()].iter().position(|v| !v.is_finite()) {
            return Err(LassieError::non_finite(format!(
                "gradient of group `{}` at coordinate {i}",
                g.name()
            )));
        }
    }
    Ok(Evaluation { terms, total, grads })
}

/// Gradient of the objective with respect to the active groups only.
#[allow(clippy::too_many_arguments)]
pub fn compute_gradients(
    skeleton: &Skeleton,
    shape: &ShapeModel,
    params: &Params,
    targets: &[InstanceTargets],
    ctx: &IterationContext,
    q: &VertexFeatures,
    settings: &ObjectiveSettings,
    active: &[Group],
) -> Result<[Vec<f64>; 5]> {
    Ok(evaluate(skeleton, shape, params, targets, ctx, q, settings, active)?.grads)
}
