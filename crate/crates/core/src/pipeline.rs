//! Optimization driver, result checkpoints, texture sampling, re-posing and
//! mesh export.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{snap, TensorBundle};
use crate::error::{LassieError, Result};
use crate::features::{
    init_vertex_features, kmeans, load_ensemble, map_parts_from_labels, map_parts_heuristic,
    map_parts_manual, normalize_features, pca_reduce, pseudo_silhouette, resize_nearest,
    ClusterModel, ColorImage, FeatureEnsemble, FeatureMap, PartClusterMap,
};
use crate::geom::Vec3;
use crate::losses::{e_step, LossHistory, LossWeights, SemanticPoints, VertexFeatures};
use crate::objective::{
    build_context, canonical_shapes, evaluate, render_instances, scene_for, InstanceTargets,
    IterationContext, ObjectiveSettings, Params, ShapeMode, ShapeModel,
};
use crate::optim::{adam_step, schedule, AdamState, Group, LearningRates, Schedule};
use crate::parts::{make_sphere, MlpParams, SphereTopology, MLP_TENSORS};
use crate::prior::prior_from_bundle;
use crate::render::{hard_rasterize, project, Camera, RenderBuffers, SceneMesh};
use crate::skeleton::{
    build_skeleton, forward_kinematics, resting_pose, BoneScales, PoseParams, Skeleton,
    SkeletonSpec,
};

/// Where the part-to-cluster map comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartMapSource {
    /// Image-height heuristic (requires four clusters).
    Heuristic,
    /// JSON file `{part_name: cluster_index}`.
    File { path: PathBuf },
    /// Majority cluster under each part's annotated pixels (`mask_k.bin`).
    Annotated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassieConfig {
    pub ensemble: PathBuf,
    /// Template name (`quadruped`, `biped`) or path to a skeleton JSON.
    pub skeleton: String,
    /// Part prior checkpoint; required in `prior` shape mode.
    pub prior: Option<PathBuf>,
    pub part_map: PartMapSource,
    pub shape_mode: ShapeMode,
    pub grid: [usize; 2],
    pub deform_hidden: usize,
    pub clusters: usize,
    /// Feature width after PCA; `None` keeps the raw features.
    pub pca_dim: Option<usize>,
    pub weights: LossWeights,
    pub schedule: Schedule,
    pub learning_rates: LearningRates,
    pub render_size: usize,
    pub sigma: f64,
    pub max_pixels: usize,
    pub max_vertices: usize,
    /// Angular jitter of sphere samples, radians.
    pub jitter: f64,
    /// Azimuths tried per instance before optimizing; 0 keeps the spread.
    pub view_hypotheses: usize,
    pub init_elevation_deg: f64,
    /// Fraction of the image height the rest skeleton spans at init.
    pub init_fill: f64,
    /// Keep the root bone's rotation at zero so global orientation lives in
    /// the camera only.
    pub fix_root_rotation: bool,
    pub learn_rest_pose: bool,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for LassieConfig {
    fn default() -> Self {
        Self {
            ensemble: PathBuf::from("ensemble"),
            skeleton: "quadruped".into(),
            prior: None,
            part_map: PartMapSource::Heuristic,
            shape_mode: ShapeMode::Prior,
            grid: [32, 16],
            deform_hidden: 256,
            clusters: 4,
            pca_dim: Some(64),
            weights: LossWeights::default(),
            schedule: Schedule::default(),
            learning_rates: LearningRates::default(),
            render_size: 64,
            sigma: 1e-4,
            max_pixels: 1024,
            max_vertices: 1024,
            jitter: 1e-3,
            view_hypotheses: 8,
            init_elevation_deg: 10.0,
            init_fill: 0.7,
            fix_root_rotation: true,
            learn_rest_pose: true,
            seed: 0,
            out_dir: None,
        }
    }
}

impl LassieConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(LassieError::MissingFile {
                path: path.to_path_buf(),
            });
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks values that do not depend on input files.
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let positive = [
            ("render_size", self.render_size),
            ("clusters", self.clusters),
            ("deform_hidden", self.deform_hidden),
            ("max_pixels", self.max_pixels),
            ("max_vertices", self.max_vertices),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(LassieError::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if !(self.sigma > 0.0) {
            return Err(LassieError::InvalidParameter("sigma must be positive".into()));
        }
        if !(self.init_fill > 0.0 && self.init_fill <= 1.0) {
            return Err(LassieError::InvalidParameter("init_fill must lie in (0, 1]".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(LassieError::InvalidParameter("jitter must be non-negative".into()));
        }
        if self.shape_mode == ShapeMode::Fixed {
            return Err(LassieError::InvalidParameter(
                "fixed shapes cannot be optimized; use `prior` or `no_prior`".into(),
            ));
        }
        Ok(())
    }

    /// Checks that every referenced file exists.
    pub fn check_files(&self) -> Result<()> {
        let mut files = vec![self.ensemble.join("manifest.json")];
        if self.shape_mode == ShapeMode::Prior {
            files.push(self.prior.clone().ok_or_else(|| {
                LassieError::InvalidParameter("prior shape mode needs a prior checkpoint".into())
            })?);
        }
        if let PartMapSource::File { path } = &self.part_map {
            files.push(path.clone());
        }
        if SkeletonSpec::template(&self.skeleton).is_none() {
            files.push(PathBuf::from(&self.skeleton));
        }
        for path in files {
            if !path.exists() {
                return Err(LassieError::MissingFile { path });
            }
        }
        Ok(())
    }

    pub fn skeleton_spec(&self) -> Result<SkeletonSpec> {
        match SkeletonSpec::template(&self.skeleton) {
            Some(spec) => Ok(spec),
            None => SkeletonSpec::load(&self.skeleton),
        }
    }
}

/// Shared shape and per-instance camera/pose after optimization.
#[derive(Debug, Clone)]
pub struct LassieResult {
    pub skeleton: SkeletonSpec,
    pub grid: [usize; 2],
    pub shape_mode: ShapeMode,
    /// Frozen prior decoder, stored so the result is self-contained.
    pub prior: Option<MlpParams>,
    /// Canonical shapes for [`ShapeMode::Fixed`].
    pub fixed_shapes: Vec<Vec<Vec3>>,
    pub params: Params,
    pub features: VertexFeatures,
    pub history: LossHistory,
    pub instance_ids: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResultSidecar {
    skeleton: SkeletonSpec,
    grid: [usize; 2],
    shape_mode: ShapeMode,
    instance_ids: Vec<String>,
    camera_sizes: Vec<[usize; 2]>,
    code_dim: usize,
    deform_hidden: usize,
    deform_slope: f64,
    prior: Option<[f64; 2]>,
    feature_dim: usize,
    history: LossHistory,
}

pub const RESULT_TENSORS: &str = "result.lsbn";
pub const RESULT_SIDECAR: &str = "result.json";

impl LassieResult {
    pub fn num_instances(&self) -> usize {
        self.params.num_instances()
    }

    pub fn build_skeleton(&self) -> Result<Skeleton> {
        build_skeleton(&self.skeleton)
    }

    pub fn topology(&self) -> Result<SphereTopology> {
        make_sphere(self.grid[0], self.grid[1])
    }

    pub fn shape_model(&self) -> Result<ShapeModel> {
        Ok(ShapeModel {
            topology: self.topology()?,
            mode: self.shape_mode,
            prior: self.prior.clone(),
            fixed: self.fixed_shapes.clone(),
        })
    }

    /// Canonical part shapes on the unjittered sphere grid.
    pub fn canonical(&self) -> Result<Vec<Vec<Vec3>>> {
        let shape = self.shape_model()?;
        Ok(canonical_shapes(&shape, &self.params, &shape.topology.vertices)?.0)
    }

    /// Posed mesh of all parts under an arbitrary pose.
    pub fn posed_scene(&self, pose: &PoseParams) -> Result<SceneMesh> {
        let skeleton = self.build_skeleton()?;
        if pose.len() != skeleton.num_bones() {
            return Err(LassieError::ShapeMismatch(format!(
                "pose has {} bones, skeleton {}",
                pose.len(),
                skeleton.num_bones()
            )));
        }
        let topo = self.topology()?;
        Ok(scene_for(&skeleton, &topo.faces, &self.canonical()?, pose, &self.params.scales))
    }

    pub fn instance_scene(&self, instance: usize) -> Result<SceneMesh> {
        self.posed_scene(self.pose(instance)?)
    }

    pub fn pose(&self, instance: usize) -> Result<&PoseParams> {
        self.params.poses.get(instance).ok_or_else(|| {
            LassieError::InvalidParameter(format!(
                "instance {instance} out of range (n = {})",
                self.num_instances()
            ))
        })
    }

    /// Instance camera re-targeted to another image resolution.
    pub fn camera_at(&self, instance: usize, height: usize, width: usize) -> Camera {
        let mut c = self.params.cameras[instance].clone();
        c.height = height;
        c.width = width;
        c
    }

    pub fn render(&self, instance: usize, height: usize, width: usize) -> Result<(SceneMesh, RenderBuffers)> {
        let scene = self.instance_scene(instance)?;
        let buffers = hard_rasterize(&scene, &self.camera_at(instance, height, width));
        Ok((scene, buffers))
    }

    /// Rounds every stored quantity to float32, as the checkpoint does.
    pub fn snap(&mut self) {
        let p = &mut self.params;
        for c in &mut p.cameras {
            let v: Vec<f64> = c.params().iter().map(|&x| snap(x)).collect();
            c.set_params(&v);
            c.focal = snap(c.focal);
            c.principal = c.principal.map(snap);
        }
        for pose in p.poses.iter_mut().chain(std::iter::once(&mut p.rest_pose)) {
            for r in &mut pose.bone_rotations {
                *r = r.map(snap);
            }
        }
        p.scales.scales.iter_mut().for_each(|s| *s = snap(*s));
        p.codes.iter_mut().flatten().for_each(|c| *c = snap(*c));
        for d in &mut p.deform {
            let mut flat = Vec::new();
            d.write_flat(&mut flat);
            let flat: Vec<f64> = flat.into_iter().map(snap).collect();
            d.read_flat(&flat);
        }
        if let Some(prior) = &mut self.prior {
            let mut flat = Vec::new();
            prior.write_flat(&mut flat);
            let flat: Vec<f64> = flat.into_iter().map(snap).collect();
            prior.read_flat(&flat);
        }
        for s in self.fixed_shapes.iter_mut().flatten() {
            *s = s.map(snap);
        }
        self.features.data.iter_mut().for_each(|v| *v = snap(*v));
    }

    pub fn to_bundle(&self) -> Result<(TensorBundle, String)> {
        let p = &self.params;
        let n = p.num_instances();
        let b = p.scales.scales.len();
        let mut t = TensorBundle::new(serde_json::json!({ "kind": "lassie_result" }));
        let cams: Vec<f64> = p.cameras.iter().flat_map(|c| c.params()).collect();
        t.insert("cameras", vec![n, 6], &cams);
        let intr: Vec<f64> = p
            .cameras
            .iter()
            .flat_map(|c| [c.focal, c.principal[0], c.principal[1]])
            .collect();
        t.insert("intrinsics", vec![n, 3], &intr);
        t.insert("poses", vec![n, b, 3], &flatten_poses(&p.poses));
        t.insert("rest_pose", vec![b, 3], &flatten_poses(std::slice::from_ref(&p.rest_pose)));
        t.insert("scales", vec![b], &p.scales.scales);
        let code_dim = p.codes.first().map_or(0, Vec::len);
        let codes: Vec<f64> = p.codes.iter().flatten().copied().collect();
        t.insert("codes", vec![p.codes.len(), code_dim], &codes);
        for (i, d) in p.deform.iter().enumerate() {
            for (name, shape, data) in d.tensors() {
                t.insert(format!("deform.{i}.{name}"), shape, data);
            }
        }
        if let Some(prior) = &self.prior {
            for (name, shape, data) in prior.tensors() {
                t.insert(format!("prior.{name}"), shape, data);
            }
        }
        if !self.fixed_shapes.is_empty() {
            let m = self.fixed_shapes[0].len();
            let flat: Vec<f64> = self.fixed_shapes.iter().flatten().flat_map(|v| [v.x, v.y, v.z]).collect();
            t.insert("fixed_shapes", vec![self.fixed_shapes.len(), m, 3], &flat);
        }
        t.insert("features", vec![self.features.rows(), self.features.dim], &self.features.data);
        let counts: Vec<f64> = self.features.counts.iter().map(|&c| c as f64).collect();
        t.insert("feature_counts", vec![counts.len()], &counts);
        let deform0 = p.deform.first();
        let sidecar = ResultSidecar {
            skeleton: self.skeleton.clone(),
            grid: self.grid,
            shape_mode: self.shape_mode,
            instance_ids: self.instance_ids.clone(),
            camera_sizes: p.cameras.iter().map(|c| [c.height, c.width]).collect(),
            code_dim,
            deform_hidden: deform0.map_or(0, |d| d.hidden),
            deform_slope: deform0.map_or(0.01, |d| d.slope),
            prior: self.prior.as_ref().map(|m| [m.hidden as f64, m.slope]),
            feature_dim: self.features.dim,
            history: self.history.clone(),
        };
        Ok((t, serde_json::to_string_pretty(&sidecar)?))
    }

    pub fn from_bundle(t: &TensorBundle, sidecar: &str) -> Result<Self> {
        let s: ResultSidecar = serde_json::from_str(sidecar)?;
        let skeleton = build_skeleton(&s.skeleton)?;
        let b = skeleton.num_bones();
        let n = s.camera_sizes.len();
        let check = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
            let data = t.require(name)?;
            if t.shape(name) != Some(shape) {
                return Err(LassieError::ShapeMismatch(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape(name)
                )));
            }
            Ok(data)
        };
        let cams = check("cameras", &[n, 6])?;
        let intr = check("intrinsics", &[n, 3])?;
        let cameras = (0..n)
            .map(|j| {
                let [h, w] = s.camera_sizes[j];
                let mut c = Camera::new(h, w);
                c.set_params(&cams[6 * j..6 * j + 6]);
                c.focal = intr[3 * j];
                c.principal = [intr[3 * j + 1], intr[3 * j + 2]];
                c
            })
            .collect();
        let poses = unflatten_poses(&check("poses", &[n, b, 3])?, b);
        let rest_pose = unflatten_poses(&check("rest_pose", &[b, 3])?, b).remove(0);
        let scales = BoneScales {
            scales: check("scales", &[b])?,
        };
        let codes_flat = check("codes", &[b, s.code_dim])?;
        let codes = codes_flat.chunks(s.code_dim.max(1)).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let codes = if s.code_dim == 0 { vec![Vec::new(); b] } else { codes };
        let mut deform = Vec::with_capacity(b);
        for i in 0..b {
            deform.push(MlpParams::from_tensors(0, s.deform_hidden, s.deform_slope, |name| {
                t.get(&format!("deform.{i}.{name}"))
            })?);
        }
        let prior = match s.prior {
            Some([hidden, slope]) => {
                for name in MLP_TENSORS {
                    t.require(&format!("prior.{name}"))?;
                }
                Some(MlpParams::from_tensors(s.code_dim, hidden as usize, slope, |name| {
                    t.get(&format!("prior.{name}"))
                })?)
            }
            None => None,
        };
        let m = make_sphere(s.grid[0], s.grid[1])?.num_vertices();
        let fixed_shapes = match t.get("fixed_shapes") {
            Some(flat) => {
                if t.shape("fixed_shapes") != Some(&[b, m, 3][..]) {
                    return Err(LassieError::ShapeMismatch("fixed shapes do not match the grid".into()));
                }
                flat.chunks(3 * m)
                    .map(|part| part.chunks(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
                    .collect()
            }
            None => Vec::new(),
        };
        let data = check("features", &[b * m, s.feature_dim])?;
        let counts = check("feature_counts", &[b * m])?;
        let features = VertexFeatures {
            dim: s.feature_dim,
            data,
            counts: counts.iter().map(|&c| c as u32).collect(),
        };
        Ok(Self {
            skeleton: s.skeleton,
            grid: s.grid,
            shape_mode: s.shape_mode,
            prior,
            fixed_shapes,
            params: Params {
                cameras,
                poses,
                rest_pose,
                scales,
                codes,
                deform,
            },
            features,
            history: s.history,
            instance_ids: s.instance_ids,
        })
    }

    /// Writes `result.lsbn` (tensors) and `result.json` (scalars) into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let (t, sidecar) = self.to_bundle()?;
        t.save(dir.join(RESULT_TENSORS))?;
        std::fs::write(dir.join(RESULT_SIDECAR), sidecar)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let sidecar = dir.join(RESULT_SIDECAR);
        if !sidecar.exists() {
            return Err(LassieError::MissingFile { path: sidecar });
        }
        let t = TensorBundle::load(dir.join(RESULT_TENSORS))?;
        Self::from_bundle(&t, &std::fs::read_to_string(sidecar)?)
    }
}

fn flatten_poses(poses: &[PoseParams]) -> Vec<f64> {
    poses.iter().flat_map(|p| p.bone_rotations.iter().flatten().copied()).collect()
}

fn unflatten_poses(flat: &[f64], b: usize) -> Vec<PoseParams> {
    flat.chunks(3 * b)
        .map(|p| PoseParams {
            bone_rotations: p.chunks(3).map(|r| [r[0], r[1], r[2]]).collect(),
        })
        .collect()
}

/// Camera looking at the rest skeleton's bounding-box center from the given
/// azimuth, far enough that the skeleton spans `fill` of the image height.
pub fn framing_camera(
    skeleton: &Skeleton,
    scales: &BoneScales,
    azimuth: f64,
    elevation: f64,
    fill: f64,
    height: usize,
    width: usize,
) -> Camera {
    let t = forward_kinematics(skeleton, &resting_pose(skeleton), scales);
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for j in &t.joints {
        lo = lo.inf(j);
        hi = hi.sup(j);
    }
    let center = (lo + hi) * 0.5;
    let mut extent: f64 = 0.0;
    for a in &t.joints {
        for b in &t.joints {
            extent = extent.max((a - b).norm());
        }
    }
    let mut cam = Camera::new(height, width);
    cam.azimuth = azimuth;
    cam.elevation = elevation;
    let fy = cam.focal * width as f64 / height as f64;
    let dist = fy * extent.max(1e-6) / fill;
    let shift = -(cam.rotation() * center) + Vec3::new(0.0, 0.0, dist);
    cam.translation = [shift.x, shift.y, shift.z];
    cam
}

/// Everything derived from the feature ensemble before optimization.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub ensemble: FeatureEnsemble,
    pub clusters: ClusterModel,
    pub part_map: PartClusterMap,
    pub targets: Vec<InstanceTargets>,
    /// Feature maps with non-silhouette pixels zeroed, sampled by the E-step.
    pub masked_maps: Vec<FeatureMap>,
    /// Pseudo-silhouettes at render resolution.
    pub silhouettes: Vec<Vec<bool>>,
}

/// PCA, normalization, clustering, pseudo-silhouettes and the part map.
pub fn preprocess(
    config: &LassieConfig,
    ensemble: &FeatureEnsemble,
    skeleton: &Skeleton,
) -> Result<Preprocessed> {
    let mut ens = match config.pca_dim {
        Some(d) => {
            let f_raw = ensemble.instances[0].features.dim;
            pca_reduce(ensemble, d.min(f_raw))?.0
        }
        None => ensemble.clone(),
    };
    normalize_features(&mut ens);
    let clusters = kmeans(&ens, config.clusters, config.seed)?;
    let names = skeleton.part_names();
    let part_map = match &config.part_map {
        PartMapSource::Heuristic => map_parts_heuristic(&clusters, skeleton)?,
        PartMapSource::File { path } => {
            if !path.exists() {
                return Err(LassieError::MissingFile { path: path.clone() });
            }
            map_parts_manual(&std::fs::read_to_string(path)?, &names, clusters.num_clusters())?
        }
        PartMapSource::Annotated => map_parts_from_labels(&clusters, &ens, names.len())?,
    };
    let r = config.render_size;
    let mut targets = Vec::with_capacity(ens.instances.len());
    let mut masked_maps = Vec::with_capacity(ens.instances.len());
    let mut silhouettes = Vec::with_capacity(ens.instances.len());
    for inst in &ens.instances {
        let f = &inst.features;
        let sil = pseudo_silhouette(inst, &clusters);
        let mut pixels = SemanticPoints {
            coords: Vec::new(),
            dim: f.dim,
            features: Vec::new(),
            has_feature: Vec::new(),
        };
        let mut masked = FeatureMap::zeros(f.height, f.width, f.dim);
        for (p, &on) in sil.iter().enumerate() {
            if on {
                let (row, col) = (p / f.width, p % f.width);
                pixels.coords.push([
                    (col as f64 + 0.5) / f.width as f64,
                    (row as f64 + 0.5) / f.height as f64,
                ]);
                pixels.features.extend_from_slice(f.at(row, col));
                pixels.has_feature.push(true);
                masked.at_mut(row, col).copy_from_slice(f.at(row, col));
            }
        }
        if pixels.coords.is_empty() {
            return Err(LassieError::Empty(format!(
                "instance `{}` has an empty pseudo-silhouette",
                inst.id
            )));
        }
        let up = resize_nearest(&sil, f.height, f.width, r, r);
        targets.push(InstanceTargets {
            mask: up.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            pixels,
        });
        masked_maps.push(masked);
        silhouettes.push(up);
    }
    Ok(Preprocessed {
        ensemble: ens,
        clusters,
        part_map,
        targets,
        masked_maps,
        silhouettes,
    })
}

/// Loads the inputs named in the config and runs [`optimize_loaded`].
pub fn optimize_ensemble(config: &LassieConfig) -> Result<LassieResult> {
    config.validate()?;
    config.check_files()?;
    let ensemble = load_ensemble(&config.ensemble).map_err(|e| e.at_stage("load"))?;
    let prior = match (&config.shape_mode, &config.prior) {
        (ShapeMode::Prior, Some(path)) => {
            Some(prior_from_bundle(&TensorBundle::load(path)?).map_err(|e| e.at_stage("prior"))?)
        }
        _ => None,
    };
    optimize_loaded(config, &ensemble, prior)
}

/// Optimizes an in-memory ensemble. `prior` is required in prior mode.
pub fn optimize_loaded(
    config: &LassieConfig,
    ensemble: &FeatureEnsemble,
    prior: Option<MlpParams>,
) -> Result<LassieResult> {
    config.validate()?;
    if ensemble.instances.is_empty() {
        return Err(LassieError::Empty("feature ensemble has no instances".into()));
    }
    let spec = config.skeleton_spec().map_err(|e| e.at_stage("skeleton"))?;
    let skeleton = build_skeleton(&spec).map_err(|e| e.at_stage("skeleton"))?;
    let topology = make_sphere(config.grid[0], config.grid[1]).map_err(|e| e.at_stage("topology"))?;
    if config.shape_mode == ShapeMode::Prior && prior.is_none() {
        return Err(LassieError::InvalidParameter("prior shape mode needs a prior decoder".into()).at_stage("prior"));
    }
    let pre = preprocess(config, ensemble, &skeleton).map_err(|e| e.at_stage("features"))?;
    let mut state = OptimizerState::new(config, &skeleton, topology, prior, &pre)?;
    state.run(config, &skeleton, &pre)?;
    let mut result = state.into_result(spec, config, &pre);
    result.snap();
    if let Some(dir) = &config.out_dir {
        result.save(dir).map_err(|e| e.at_stage("checkpoint"))?;
        result.history.write_csv(dir.join("loss_history.csv"))?;
    }
    Ok(result)
}

struct OptimizerState {
    shape: ShapeModel,
    params: Params,
    q: VertexFeatures,
    adam: Vec<AdamState>,
    history: LossHistory,
    settings: ObjectiveSettings,
    rng: ChaCha8Rng,
    root_bone: Option<usize>,
}

impl OptimizerState {
    fn new(
        config: &LassieConfig,
        skeleton: &Skeleton,
        topology: SphereTopology,
        prior: Option<MlpParams>,
        pre: &Preprocessed,
    ) -> Result<Self> {
        let n = pre.targets.len();
        let b = skeleton.num_bones();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let code_dim = prior.as_ref().map_or(0, |p| p.code_dim);
        let scales = BoneScales::ones(b);
        let r = config.render_size;
        let elevation = config.init_elevation_deg.to_radians();
        let cameras = (0..n)
            .map(|j| {
                let az = std::f64::consts::TAU * j as f64 / n as f64;
                framing_camera(skeleton, &scales, az, elevation, config.init_fill, r, r)
            })
            .collect();
        let params = Params {
            cameras,
            poses: vec![resting_pose(skeleton); n],
            rest_pose: resting_pose(skeleton),
            scales,
            codes: vec![vec![0.0; code_dim]; b],
            // With a prior the deformation starts at zero so the first shapes
            // are pure prior decodings; without one it is the whole surface.
            deform: (0..b)
                .map(|_| match config.shape_mode {
                    ShapeMode::Prior => MlpParams::init_zero_output(0, config.deform_hidden, &mut rng),
                    _ => MlpParams::init(0, config.deform_hidden, &mut rng),
                })
                .collect(),
        };
        let m = topology.num_vertices();
        let q = init_vertex_features(&pre.part_map, &pre.clusters, m);
        let adam = Group::ALL.iter().map(|&g| AdamState::new(params.group_len(g))).collect();
        let settings = ObjectiveSettings {
            weights: config.weights,
            sigma: config.sigma,
            render_height: r,
            render_width: r,
            learn_rest_pose: config.learn_rest_pose,
        };
        let root_bone = config
            .fix_root_rotation
            .then(|| skeleton.bones.iter().position(|bone| bone.parent_bone.is_none()))
            .flatten();
        Ok(Self {
            shape: ShapeModel {
                topology,
                mode: config.shape_mode,
                prior,
                fixed: Vec::new(),
            },
            params,
            q,
            adam,
            history: LossHistory::default(),
            settings,
            rng,
            root_bone,
        })
    }

    fn context(&mut self, config: &LassieConfig, skeleton: &Skeleton, pre: &Preprocessed) -> Result<IterationContext> {
        build_context(
            skeleton,
            &self.shape,
            &self.params,
            &pre.targets,
            config.jitter,
            config.max_pixels,
            config.max_vertices,
            &mut self.rng,
        )
    }

    /// Tries evenly spread azimuths for every instance and keeps the one with
    /// the lowest data term.
    fn select_views(&mut self, config: &LassieConfig, skeleton: &Skeleton, pre: &Preprocessed) -> Result<()> {
        let k = config.view_hypotheses;
        if k == 0 {
            return Ok(());
        }
        let ctx = build_context(
            skeleton,
            &self.shape,
            &self.params,
            &pre.targets,
            0.0,
            config.max_pixels,
            config.max_vertices,
            &mut self.rng,
        )?;
        let r = config.render_size;
        let elevation = config.init_elevation_deg.to_radians();
        let w = &self.settings.weights;
        for j in 0..self.params.num_instances() {
            let mut best = (f64::INFINITY, self.params.cameras[j].clone());
            for h in 0..k {
                let az = std::f64::consts::TAU * h as f64 / k as f64;
                let cam = framing_camera(skeleton, &self.params.scales, az, elevation, config.init_fill, r, r);
                let single = Params {
                    cameras: vec![cam.clone()],
                    poses: vec![self.params.poses[j].clone()],
                    rest_pose: self.params.rest_pose.clone(),
                    scales: self.params.scales.clone(),
                    codes: self.params.codes.clone(),
                    deform: self.params.deform.clone(),
                };
                // Visible vertices depend on the camera, so each hypothesis
                // gets its own vertex sample.
                let views = render_instances(skeleton, &self.shape, &single, &canonical_shapes(&self.shape, &single, &ctx.sphere_points)?.0);
                let visible: Vec<usize> = (0..views[0].2.visible.len()).filter(|&v| views[0].2.visible[v]).collect();
                let pick = crate::objective::stratified(visible.len(), config.max_vertices, &mut self.rng);
                let sub = IterationContext {
                    sphere_points: ctx.sphere_points.clone(),
                    pixel_samples: vec![ctx.pixel_samples[j].clone()],
                    vertex_samples: vec![pick.into_iter().map(|i| visible[i]).collect()],
                };
                let e = evaluate(
                    skeleton,
                    &self.shape,
                    &single,
                    std::slice::from_ref(&pre.targets[j]),
                    &sub,
                    &self.q,
                    &self.settings,
                    &[],
                )?;
                let score = e.terms.mask + w.sem * e.terms.sem;
                if score < best.0 {
                    best = (score, cam);
                }
            }
            self.params.cameras[j] = best.1;
        }
        Ok(())
    }

    fn run(&mut self, config: &LassieConfig, skeleton: &Skeleton, pre: &Preprocessed) -> Result<()> {
        self.select_views(config, skeleton, pre).map_err(|e| e.at_stage("view selection"))?;
        let total = config.schedule.total();
        for it in 0..total {
            let last_good = self.params.clone();
            match self.step(it, config, skeleton, pre) {
                Ok(()) => {}
                Err(e) => {
                    self.params = last_good;
                    if let Some(dir) = &config.out_dir {
                        let spec = config.skeleton_spec()?;
                        let mut partial = self.snapshot(spec, config, pre);
                        partial.snap();
                        partial.save(dir.join("last_good"))?;
                    }
                    return Err(e.at_stage("optimize"));
                }
            }
        }
        Ok(())
    }

    fn step(&mut self, it: usize, config: &LassieConfig, skeleton: &Skeleton, pre: &Preprocessed) -> Result<()> {
        let (active, e_flag) = schedule(it, &config.schedule);
        if e_flag && self.settings.weights.sem > 0.0 {
            let canonical = canonical_shapes(&self.shape, &self.params, &self.shape.topology.vertices)?.0;
            let views: Vec<_> = render_instances(skeleton, &self.shape, &self.params, &canonical)
                .into_iter()
                .map(|(_, _, v)| v)
                .collect();
            self.q = e_step(&self.q, &views, &pre.masked_maps);
        }
        let ctx = self.context(config, skeleton, pre)?;
        let eval = evaluate(
            skeleton,
            &self.shape,
            &self.params,
            &pre.targets,
            &ctx,
            &self.q,
            &self.settings,
            &active,
        )?;
        self.history.push(it, eval.terms, eval.total);
        let b = skeleton.num_bones();
        for &g in &active {
            let mut grad = eval.grad(g).to_vec();
            if g == Group::Pose {
                if let Some(root) = self.root_bone {
                    for chunk in grad.chunks_mut(3 * b) {
                        chunk[3 * root..3 * root + 3].iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
            let mut values = self.params.read_group(g);
            adam_step(&mut values, &grad, &mut self.adam[g.index()], config.learning_rates.get(g), g.name())?;
            if g == Group::Scales {
                values.iter_mut().for_each(|s| *s = s.max(0.05));
            }
            self.params.write_group(g, &values);
        }
        Ok(())
    }

    fn snapshot(&self, spec: SkeletonSpec, config: &LassieConfig, pre: &Preprocessed) -> LassieResult {
        LassieResult {
            skeleton: spec,
            grid: config.grid,
            shape_mode: self.shape.mode,
            prior: self.shape.prior.clone(),
            fixed_shapes: Vec::new(),
            params: self.params.clone(),
            features: self.q.clone(),
            history: self.history.clone(),
            instance_ids: pre.ensemble.instances.iter().map(|i| i.id.clone()).collect(),
        }
    }

    fn into_result(self, spec: SkeletonSpec, config: &LassieConfig, pre: &Preprocessed) -> LassieResult {
        self.snapshot(spec, config, pre)
    }
}

/// Per-vertex colors for one instance. Visible vertices take the bilinear
/// image color at their projection; hidden ones take their mirror partner's
/// color, then the nearest visible vertex on the same part, then the nearest
/// visible vertex anywhere.
pub fn sample_texture(result: &LassieResult, instance: usize, image: &ColorImage) -> Result<Vec<[f64; 3]>> {
    let topo = result.topology()?;
    let m = topo.num_vertices();
    let camera = result.camera_at(instance, image.height, image.width);
    let scene = result.instance_scene(instance)?;
    let buffers = hard_rasterize(&scene, &camera);
    let proj = project(&camera, &scene.vertices);
    let total = scene.vertices.len();
    let visible = &buffers.visible;
    if !visible.iter().any(|&v| v) {
        return Err(LassieError::Degenerate(format!(
            "instance {instance} shows no vertex; nothing to sample"
        )));
    }
    let mut colors: Vec<Option<[f64; 3]>> = (0..total)
        .map(|v| visible[v].then(|| image.sample(proj.coords[v])))
        .collect();
    if let Some(mirror) = &topo.mirror {
        for v in 0..total {
            if colors[v].is_none() {
                let (part, local) = (v / m, v % m);
                let partner = part * m + mirror[local];
                if visible[partner] {
                    colors[v] = colors[partner];
                }
            }
        }
    }
    let nearest = |v: usize, range: std::ops::Range<usize>| -> Option<usize> {
        range
            .filter(|&u| visible[u])
            .min_by(|&a, &b| {
                let da = (scene.vertices[a] - scene.vertices[v]).norm_squared();
                let db = (scene.vertices[b] - scene.vertices[v]).norm_squared();
                da.total_cmp(&db).then(a.cmp(&b))
            })
    };
    let snapshot = colors.clone();
    for v in 0..total {
        if colors[v].is_some() {
            continue;
        }
        let part = v / m;
        let src = nearest(v, part * m..(part + 1) * m).or_else(|| nearest(v, 0..total));
        colors[v] = src.and_then(|u| snapshot[u]);
    }
    Ok(colors.into_iter().map(|c| c.expect("a visible vertex exists")).collect())
}

/// Meshes for an arbitrary pose; canonical shapes are untouched.
pub fn repose(result: &LassieResult, pose: &PoseParams) -> Result<SceneMesh> {
    result.posed_scene(pose)
}

/// Copies per-vertex colors between results that share skeleton and grid.
pub fn transfer_texture(src: &LassieResult, colors: &[[f64; 3]], dst: &LassieResult) -> Result<Vec<[f64; 3]>> {
    let (bs, bd) = (src.params.scales.scales.len(), dst.params.scales.scales.len());
    if src.grid != dst.grid || bs != bd {
        return Err(LassieError::ShapeMismatch(format!(
            "source topology {:?} x {bs} parts, target {:?} x {bd} parts",
            src.grid, dst.grid
        )));
    }
    let expected = bs * src.topology()?.num_vertices();
    if colors.len() != expected {
        return Err(LassieError::ShapeMismatch(format!(
            "{} colors for {expected} vertices",
            colors.len()
        )));
    }
    Ok(colors.to_vec())
}

/// Writes an OBJ with one group per part.
pub fn write_obj(path: &Path, mesh: &SceneMesh, part_names: &[String]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "# {} vertices, {} faces", mesh.vertices.len(), mesh.faces.len())?;
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    let mut current = usize::MAX;
    for (f, &part) in mesh.faces.iter().zip(&mesh.face_part) {
        if part != current {
            current = part;
            let name = part_names.get(part).cloned().unwrap_or_else(|| format!("part_{part}"));
            writeln!(out, "g {name}")?;
        }
        writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    out.flush()?;
    Ok(())
}

/// Vertex and face counts plus group names of an OBJ file.
pub fn read_obj_counts(path: &Path) -> Result<(usize, usize, Vec<String>)> {
    let text = std::fs::read_to_string(path)?;
    let (mut v, mut f, mut groups) = (0, 0, Vec::new());
    for line in text.lines() {
        match line.split_whitespace().next() {
            Some("v") => v += 1,
            Some("f") => f += 1,
            Some("g") => groups.push(line[1..].trim().to_string()),
            _ => {}
        }
    }
    Ok((v, f, groups))
}

/// ASCII PLY with 8-bit vertex colors.
pub fn write_ply(path: &Path, mesh: &SceneMesh, colors: &[[f64; 3]]) -> Result<()> {
    if colors.len() != mesh.vertices.len() {
        return Err(LassieError::ShapeMismatch(format!(
            "{} colors for {} vertices",
            colors.len(),
            mesh.vertices.len()
        )));
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "ply\nformat ascii 1.0")?;
    writeln!(out, "element vertex {}", mesh.vertices.len())?;
    writeln!(out, "property float x\nproperty float y\nproperty float z")?;
    writeln!(out, "property uchar red\nproperty uchar green\nproperty uchar blue")?;
    writeln!(out, "element face {}", mesh.faces.len())?;
    writeln!(out, "property list uchar int vertex_indices\nend_header")?;
    for (v, c) in mesh.vertices.iter().zip(colors) {
        let [r, g, b] = c.map(to_u8);
        writeln!(out, "{} {} {} {r} {g} {b}", v.x as f32, v.y as f32, v.z as f32)?;
    }
    for f in &mesh.faces {
        writeln!(out, "3 {} {} {}", f[0], f[1], f[2])?;
    }
    out.flush()?;
    Ok(())
}

fn to_u8(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Fixed, well-separated colors for part overlays.
pub fn part_color(part: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 16] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
    ];
    PALETTE[part % PALETTE.len()]
}

/// Silhouette (white on black) and part-index overlays.
pub fn write_overlays(dir: &Path, stem: &str, buffers: &RenderBuffers) -> Result<()> {
    let (w, h) = (buffers.width as u32, buffers.height as u32);
    let mut sil = image::GrayImage::new(w, h);
    let mut parts = image::RgbImage::new(w, h);
    for (i, &p) in buffers.part_index.iter().enumerate() {
        let (x, y) = ((i % buffers.width) as u32, (i / buffers.width) as u32);
        if p >= 0 {
            sil.put_pixel(x, y, image::Luma([255]));
            parts.put_pixel(x, y, image::Rgb(part_color(p as usize)));
        }
    }
    sil.save(dir.join(format!("{stem}_silhouette.png")))?;
    parts.save(dir.join(format!("{stem}_parts.png")))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Obj,
    Ply,
    Overlays,
}

/// Writes the chosen artifacts for one instance and returns their paths.
pub fn export(
    result: &LassieResult,
    instance: usize,
    formats: &[ExportFormat],
    image: Option<&ColorImage>,
    overlay_size: (usize, usize),
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let scene = result.instance_scene(instance)?;
    let names = result.build_skeleton()?.part_names();
    let stem = format!("instance_{instance}");
    let mut written = Vec::new();
    for f in formats {
        match f {
            ExportFormat::Obj => {
                let p = dir.join(format!("{stem}.obj"));
                write_obj(&p, &scene, &names)?;
                written.push(p);
            }
            ExportFormat::Ply => {
                let colors = match image {
                    Some(img) => sample_texture(result, instance, img)?,
                    None => scene
                        .vertex_part
                        .iter()
                        .map(|&p| part_color(p).map(|c| c as f64 / 255.0))
                        .collect(),
                };
                let p = dir.join(format!("{stem}.ply"));
                write_ply(&p, &scene, &colors)?;
                written.push(p);
            }
            ExportFormat::Overlays => {
                let cam = result.camera_at(instance, overlay_size.0, overlay_size.1);
                write_overlays(dir, &stem, &hard_rasterize(&scene, &cam))?;
                written.push(dir.join(format!("{stem}_silhouette.png")));
                written.push(dir.join(format!("{stem}_parts.png")));
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{make_synth, testbed_config, SyntheticSpec};

    fn tiny(n: usize) -> (FeatureEnsemble, crate::eval::GroundTruth, LassieConfig) {
        let spec = SyntheticSpec {
            n,
            image_size: 64,
            feature_size: 32,
            grid: [6, 4],
            ..Default::default()
        };
        // Seed 3 shows every part in the single-view case.
        let (ens, gt) = make_synth(&spec, 3).unwrap();
        let mut config = testbed_config(&spec);
        config.shape_mode = ShapeMode::NoPrior;
        config.render_size = 16;
        config.deform_hidden = 8;
        config.max_pixels = 32;
        config.max_vertices = 32;
        config.view_hypotheses = 2;
        config.schedule.phases = [2, 2, 3];
        (ens, gt, config)
    }

    fn tiny_prior(code_dim: usize) -> MlpParams {
        MlpParams::init(code_dim, 8, &mut ChaCha8Rng::seed_from_u64(4))
    }

    fn checkpoint_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
            .collect();
        files.sort();
        files
    }

    #[test]
    fn single_instance_runs_every_iteration() {
        let (ens, _, config) = tiny(1);
        let result = optimize_loaded(&config, &ens, None).unwrap();
        assert_eq!(result.num_instances(), 1);
        assert_eq!(result.history.rows.len(), config.schedule.total());
        assert!(result.params.cameras[0].params().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn same_seed_gives_identical_checkpoints() {
        let (ens, _, mut config) = tiny(2);
        config.shape_mode = ShapeMode::Prior;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        config.out_dir = Some(a.path().to_path_buf());
        optimize_loaded(&config, &ens, Some(tiny_prior(4))).unwrap();
        config.out_dir = Some(b.path().to_path_buf());
        optimize_loaded(&config, &ens, Some(tiny_prior(4))).unwrap();
        let (fa, fb) = (checkpoint_files(a.path()), checkpoint_files(b.path()));
        assert!(fa.iter().any(|(name, _)| name == RESULT_TENSORS));
        assert_eq!(fa, fb);
    }

    #[test]
    fn checkpoint_round_trip_renders_identically() {
        let (ens, _, mut config) = tiny(2);
        config.shape_mode = ShapeMode::Prior;
        let result = optimize_loaded(&config, &ens, Some(tiny_prior(3))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        result.save(dir.path()).unwrap();
        let loaded = LassieResult::load(dir.path()).unwrap();
        assert_eq!(loaded.to_bundle().unwrap().1, result.to_bundle().unwrap().1);
        for j in 0..2 {
            let (sa, ba) = result.render(j, 24, 24).unwrap();
            let (sb, bb) = loaded.render(j, 24, 24).unwrap();
            assert_eq!(sa.vertices, sb.vertices);
            assert_eq!(ba.part_index, bb.part_index);
        }
    }

    #[test]
    fn failed_run_keeps_last_good_parameters() {
        let (ens, _, mut config) = tiny(1);
        let dir = tempfile::tempdir().unwrap();
        config.out_dir = Some(dir.path().to_path_buf());
        config.learning_rates.camera = f64::MAX;
        let err = optimize_loaded(&config, &ens, None).unwrap_err();
        assert!(err.to_string().contains("optimize"), "{err}");
        let partial = LassieResult::load(dir.path().join("last_good")).unwrap();
        assert!(partial.params.cameras[0].params().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn config_checks_modes_and_files() {
        let (ens, _, mut config) = tiny(1);
        config.shape_mode = ShapeMode::Fixed;
        assert!(config.validate().is_err());
        config.shape_mode = ShapeMode::Prior;
        assert!(optimize_loaded(&config, &ens, None).is_err());
        config.shape_mode = ShapeMode::NoPrior;
        config.ensemble = PathBuf::from("/nonexistent/bundle");
        match config.check_files() {
            Err(LassieError::MissingFile { path }) => assert!(path.starts_with("/nonexistent/bundle")),
            other => panic!("expected a missing file, got {other:?}"),
        }
        let parsed = LassieConfig::from_json(r#"{"clusters": 6, "part_map": {"kind": "annotated"}}"#).unwrap();
        assert_eq!(parsed.clusters, 6);
        assert_eq!(parsed.part_map, PartMapSource::Annotated);
        assert_eq!(parsed.render_size, LassieConfig::default().render_size);
    }

    #[test]
    fn texture_covers_every_vertex_and_mirrors_hidden_ones() {
        let (ens, gt, _) = tiny(1);
        let result = gt.to_result().unwrap();
        let image = ens.instances[0].image.as_ref().unwrap();
        let colors = sample_texture(&result, 0, image).unwrap();
        let topo = result.topology().unwrap();
        let m = topo.num_vertices();
        assert_eq!(colors.len(), 15 * m);
        assert!(colors.iter().flatten().all(|c| (0.0..=1.0).contains(c)));
        let scene = result.instance_scene(0).unwrap();
        let buffers = hard_rasterize(&scene, &result.camera_at(0, image.height, image.width));
        let mirror = topo.mirror.as_ref().unwrap();
        let mut mirrored = 0;
        for v in 0..colors.len() {
            let partner = (v / m) * m + mirror[v % m];
            if !buffers.visible[v] && buffers.visible[partner] {
                assert_eq!(colors[v], colors[partner]);
                mirrored += 1;
            }
        }
        assert!(mirrored > 0);
    }

    #[test]
    fn repose_with_own_pose_is_identity_and_small_changes_stay_small() {
        let (_, gt, _) = tiny(1);
        let result = gt.to_result().unwrap();
        let pose = result.pose(0).unwrap().clone();
        assert_eq!(repose(&result, &pose).unwrap().vertices, result.instance_scene(0).unwrap().vertices);
        let mut nudged = pose.clone();
        nudged.bone_rotations[3][0] += 1e-4;
        let a = repose(&result, &pose).unwrap();
        let b = repose(&result, &nudged).unwrap();
        let moved = a.vertices.iter().zip(&b.vertices).map(|(p, q)| (p - q).norm()).fold(0.0, f64::max);
        assert!(moved > 0.0 && moved < 1e-3);
    }

    #[test]
    fn texture_transfer_needs_matching_topology() {
        let (_, gt, _) = tiny(1);
        let src = gt.to_result().unwrap();
        let colors = vec![[0.5; 3]; 15 * src.topology().unwrap().num_vertices()];
        assert_eq!(transfer_texture(&src, &colors, &src).unwrap(), colors);
        assert!(transfer_texture(&src, &colors[1..], &src).is_err());
        let mut other = src.clone();
        other.grid = [8, 6];
        assert!(transfer_texture(&src, &colors, &other).is_err());
    }

    #[test]
    fn exports_have_one_group_per_part_and_valid_colors() {
        let (ens, gt, _) = tiny(1);
        let result = gt.to_result().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let formats = [ExportFormat::Obj, ExportFormat::Ply, ExportFormat::Overlays];
        let written = export(&result, 0, &formats, ens.instances[0].image.as_ref(), (32, 32), dir.path()).unwrap();
        assert!(written.iter().all(|p| p.exists()));
        let scene = result.instance_scene(0).unwrap();
        let (verts, faces, groups) = read_obj_counts(&dir.path().join("instance_0.obj")).unwrap();
        assert_eq!((verts, faces), (scene.vertices.len(), scene.faces.len()));
        assert_eq!(groups, result.build_skeleton().unwrap().part_names());
        let ply = std::fs::read_to_string(dir.path().join("instance_0.ply")).unwrap();
        let body: Vec<&str> = ply.lines().skip_while(|l| *l != "end_header").skip(1).collect();
        for line in &body[..scene.vertices.len()] {
            let fields: Vec<&str> = line.split_whitespace().collect();
            assert_eq!(fields.len(), 6);
            assert!(fields[3..].iter().all(|c| c.parse::<u8>().is_ok()));
        }
    }
}
