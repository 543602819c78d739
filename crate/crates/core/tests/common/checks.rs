//! Property checks shared by the proptest suite and the acceptance run. Each
//! returns a measurement so callers choose how to report it.

use lassie_core::features::{lloyd, FeatureMap};
use lassie_core::geom::Vec3;
use lassie_core::losses::{e_step, semantic_chamfer, SemanticPoints, VertexFeatures, VertexView};
use lassie_core::parts::{canonical_shape, encode_points, make_sphere, MlpParams, PartModel};
use lassie_core::render::{hard_rasterize, project, soft_silhouette, Camera, SceneMesh};
use lassie_core::skeleton::{build_skeleton, forward_kinematics, BoneScales, PoseParams, SkeletonSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Largest gap between a bone's placed canonical end points (`±y` of the
/// part frame) and the joints it connects, over a random pose and scaling.
pub fn fk_connectivity_error(template: &str, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let skeleton = build_skeleton(&SkeletonSpec::template(template).unwrap()).unwrap();
    let b = skeleton.num_bones();
    let pose = PoseParams {
        bone_rotations: (0..b)
            .map(|_| [0; 3].map(|_| rng.random_range(-3.1..3.1)))
            .collect(),
    };
    let scales = BoneScales {
        scales: (0..b).map(|_| rng.random_range(0.5..2.0)).collect(),
    };
    let t = forward_kinematics(&skeleton, &pose, &scales);
    let mut worst = 0.0f64;
    for (k, bone) in skeleton.bones.iter().enumerate() {
        let half = t.frame[k] * Vec3::new(0.0, t.length[k], 0.0);
        let (a, b) = (t.centroid[k] + half, t.centroid[k] - half);
        let (p, d) = (t.joints[bone.proximal], t.joints[bone.distal]);
        let gap = ((a - d).norm().max((b - p).norm())).min((a - p).norm().max((b - d).norm()));
        worst = worst.max(gap);
        if let Some(pb) = bone.parent_bone {
            worst = worst.max((t.joints[skeleton.bones[pb].distal] - p).norm());
        }
    }
    worst
}

/// Largest deviation from `x -> -x` symmetry of a canonical shape decoded
/// from random prior, deformation and code.
pub fn mirror_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu = 2 * rng.random_range(2..9);
    let nv = rng.random_range(3..9);
    let topo = make_sphere(nu, nv).unwrap();
    let code_dim = rng.random_range(1..6);
    let prior = MlpParams::init(code_dim, 16, &mut rng);
    let model = PartModel {
        code: (0..code_dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
        deform: MlpParams::init(0, 16, &mut rng),
    };
    let shape = canonical_shape(&topo, &encode_points(&topo.vertices), &model, &prior).unwrap();
    let mirror = topo.mirror.as_ref().unwrap();
    mirror
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let (p, q) = (shape[i], shape[j]);
            (p - Vec3::new(-q.x, q.y, q.z)).norm()
        })
        .fold(0.0, f64::max)
}

/// Mean absolute gap between soft and hard silhouettes of a random
/// ellipsoid, for each `sigma` in the sweep.
pub fn soft_hard_gaps(seed: u64, sigmas: &[f64]) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 32;
    let topo = make_sphere(12, 8).unwrap();
    let axes = [0; 3].map(|_| rng.random_range(0.2..0.9));
    let center = Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), 0.0);
    let verts: Vec<Vec3> = topo
        .vertices
        .iter()
        .map(|v| Vec3::new(axes[0] * v.x, axes[1] * v.y, axes[2] * v.z) + center)
        .collect();
    let mesh = SceneMesh::from_parts(&[verts], &topo.faces);
    let mut camera = Camera::new(size, size);
    camera.azimuth = rng.random_range(-3.0..3.0);
    camera.elevation = rng.random_range(-0.5..0.5);
    let hard = hard_rasterize(&mesh, &camera).mask_f64();
    let proj = project(&camera, &mesh.vertices);
    sigmas
        .iter()
        .map(|&s| {
            let soft = soft_silhouette(&proj, &mesh.faces, size, size, s);
            soft.iter().zip(&hard).map(|(a, b)| (a - b).abs()).sum::<f64>() / hard.len() as f64
        })
        .collect()
}

/// Within-cluster SSE after every Lloyd assignment step on random blobs.
pub fn kmeans_sse_history(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..6);
    let c = rng.random_range(1..6);
    let n = rng.random_range(c.max(2)..80);
    let data: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let points: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
    lloyd(&points, c, 50, &mut rng).unwrap().2
}

/// Runs the E-step twice on identical views; returns the largest change in
/// any feature between the first and second application.
pub fn e_step_repeat_change(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, dim, views) = (rng.random_range(1..40), rng.random_range(1..6), rng.random_range(1..4));
    let maps: Vec<FeatureMap> = (0..views)
        .map(|_| {
            let (h, w) = (rng.random_range(2..9), rng.random_range(2..9));
            let data = (0..h * w * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            FeatureMap::new(h, w, dim, data).unwrap()
        })
        .collect();
    let vs: Vec<VertexView> = (0..views)
        .map(|_| VertexView {
            coords: (0..rows).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect(),
            visible: (0..rows).map(|_| rng.random_bool(0.6)).collect(),
        })
        .collect();
    let first = e_step(&VertexFeatures::uninitialized(rows, dim), &vs, &maps);
    let second = e_step(&first, &vs, &maps);
    first.data.iter().zip(&second.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn random_points<R: Rng>(rng: &mut R, n: usize, dim: usize, partial: bool) -> SemanticPoints {
    SemanticPoints {
        coords: (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect(),
        dim,
        features: (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
        has_feature: (0..n).map(|_| !partial || rng.random_bool(0.7)).collect(),
    }
}

/// Symmetric Chamfer by the plain double loop over every pixel-vertex pair.
pub fn brute_force_chamfer(pixels: &SemanticPoints, vertices: &SemanticPoints, alpha: f64) -> f64 {
    let d = |p: usize, v: usize| {
        let (a, b) = (pixels.coords[p], vertices.coords[v]);
        let mut s = (b[0] - a[0]) * (b[0] - a[0]) + (b[1] - a[1]) * (b[1] - a[1]);
        if vertices.has_feature[v] {
            let mut f = 0.0;
            for k in 0..pixels.dim {
                let e = vertices.features[v * vertices.dim + k] - pixels.features[p * pixels.dim + k];
                f += e * e;
            }
            s += alpha * f;
        }
        s
    };
    let mut to_vertex = 0.0;
    for p in 0..pixels.len() {
        to_vertex += (0..vertices.len()).map(|v| d(p, v)).fold(f64::INFINITY, f64::min);
    }
    let mut to_pixel = 0.0;
    for v in 0..vertices.len() {
        to_pixel += (0..pixels.len()).map(|p| d(p, v)).fold(f64::INFINITY, f64::min);
    }
    to_vertex + to_pixel
}

/// Library Chamfer and brute force on one random case with at most 50
/// points per side.
pub fn chamfer_case(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..9);
    let (n, m) = (rng.random_range(1..=50), rng.random_range(1..=50));
    let pixels = random_points(&mut rng, n, dim, false);
    let vertices = random_points(&mut rng, m, dim, true);
    let alpha = rng.random_range(0.0..2.0);
    let (lib, _) = semantic_chamfer(&pixels, &vertices, alpha).unwrap();
    (lib, brute_force_chamfer(&pixels, &vertices, alpha))
}

/// Monte-Carlo `KL(N(mu, exp(lv)) || N(0, I))` from samples of the posterior.
pub fn kl_by_sampling(mu: &[f64], lv: &[f64], samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..samples {
        for (m, l) in mu.iter().zip(lv) {
            let eps: f64 = rng.sample(StandardNormal);
            let z = m + (0.5 * l).exp() * eps;
            // log q - log p; the 2*pi terms cancel.
            acc += -0.5 * l - 0.5 * eps * eps + 0.5 * z * z;
        }
    }
    acc / samples as f64
}
