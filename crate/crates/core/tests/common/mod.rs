#![allow(dead_code)]
pub mod checks;

use lassie_core::geom::Vec3;
use lassie_core::losses::{LossWeights, SemanticPoints, VertexFeatures};
use lassie_core::objective::{
    evaluate, IterationContext, InstanceTargets, ObjectiveSettings, Params, ShapeMode, ShapeModel,
};
use lassie_core::optim::Group;
use lassie_core::parts::{make_sphere, MlpParams};
use lassie_core::render::Camera;
use lassie_core::skeleton::{build_skeleton, BoneScales, JointSpec, PoseParams, Skeleton, SkeletonSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Toy {
    pub skeleton: Skeleton,
    pub shape: ShapeModel,
    pub params: Params,
    pub targets: Vec<InstanceTargets>,
    pub ctx: IterationContext,
    pub q: VertexFeatures,
    pub settings: ObjectiveSettings,
}

fn joint(name: &str, parent: Option<usize>, rest: [f64; 3]) -> JointSpec {
    JointSpec {
        name: name.into(),
        parent,
        rest,
    }
}

/// Two-bone chain, two instances, 16x16 images, every loss term active.
pub fn toy_scene(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = SkeletonSpec {
        name: "toy".into(),
        joints: vec![
            joint("base", None, [0.0, 0.0, -0.3]),
            joint("mid", Some(0), [0.0, 0.05, 0.3]),
            joint("tip", Some(1), [0.05, -0.45, 0.35]),
        ],
        part_names: vec!["body".into(), "leg".into()],
        symmetry_pairs: vec![],
        leg_bones: vec![1],
    };
    let skeleton = build_skeleton(&spec).unwrap();
    let topology = make_sphere(8, 6).unwrap();
    let m = topology.num_vertices();
    let code_dim = 4;
    let prior = MlpParams::init(code_dim, 12, &mut rng);
    let mut deform = Vec::new();
    for _ in 0..2 {
        let mut d = MlpParams::init(0, 8, &mut rng);
        d.w3.mapv_inplace(|v| 0.2 * v);
        deform.push(d);
    }
    let codes = (0..2)
        .map(|_| (0..code_dim).map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect();
    let mut cameras = Vec::new();
    let mut poses = Vec::new();
    for j in 0..2 {
        let mut c = Camera::new(16, 16);
        c.set_params(&[0.4 + 1.3 * j as f64, 0.15, 0.05, 0.02, -0.03, 2.6]);
        cameras.push(c);
        let mut p = PoseParams::zeros(2);
        for r in &mut p.bone_rotations {
            for a in r.iter_mut() {
                *a = rng.random_range(-0.2..0.2);
            }
        }
        poses.push(p);
    }
    let mut rest_pose = PoseParams::zeros(2);
    rest_pose.bone_rotations[1] = [0.05, -0.02, 0.03];
    let params = Params {
        cameras,
        poses,
        rest_pose,
        scales: BoneScales {
            scales: vec![1.1, 0.9],
        },
        codes,
        deform,
    };
    let shape = ShapeModel {
        topology,
        mode: ShapeMode::Prior,
        prior: Some(prior),
        fixed: vec![],
    };
    let dim = 3;
    let mut targets = Vec::new();
    let mut pixel_samples = Vec::new();
    let mut vertex_samples = Vec::new();
    for _ in 0..2 {
        let mask: Vec<f64> = (0..256)
            .map(|i| {
                let (r, c) = ((i / 16) as f64, (i % 16) as f64);
                if (r - 8.0).powi(2) / 30.0 + (c - 7.5).powi(2) / 20.0 < 1.0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mut pixels = SemanticPoints {
            coords: vec![],
            dim,
            features: vec![],
            has_feature: vec![],
        };
        for i in 0..30 {
            pixels.coords.push([0.2 + 0.02 * i as f64, rng.random_range(0.2..0.8)]);
            pixels.features.extend((0..dim).map(|_| rng.random_range(-1.0..1.0)));
            pixels.has_feature.push(true);
        }
        pixel_samples.push(pixels.clone());
        targets.push(InstanceTargets { mask, pixels });
        vertex_samples.push((0..2 * m).step_by(3).collect());
    }
    let mut q = VertexFeatures::uninitialized(2 * m, dim);
    for v in 0..2 * m {
        let row: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        q.set_row(v, &row);
        q.counts[v] = 1;
    }
    let sphere_points = shape.topology.vertices.clone();
    let settings = ObjectiveSettings {
        weights: LossWeights {
            alpha: 0.1,
            sem: 0.5,
            pose: 0.1,
            ang: 1.0,
            lap: 0.1,
            norm: 0.01,
        },
        sigma: 1e-4,
        render_height: 16,
        render_width: 16,
        learn_rest_pose: true,
    };
    Toy {
        skeleton,
        shape,
        params,
        targets,
        ctx: IterationContext {
            sphere_points,
            pixel_samples,
            vertex_samples,
        },
        q,
        settings,
    }
}

impl Toy {
    pub fn total(&self, params: &Params) -> f64 {
        evaluate(
            &self.skeleton,
            &self.shape,
            params,
            &self.targets,
            &self.ctx,
            &self.q,
            &self.settings,
            &[],
        )
        .unwrap()
        .total
    }

    pub fn grads(&self) -> [Vec<f64>; 5] {
        evaluate(
            &self.skeleton,
            &self.shape,
            &self.params,
            &self.targets,
            &self.ctx,
            &self.q,
            &self.settings,
            &Group::ALL,
        )
        .unwrap()
        .grads
    }

    /// Central difference of the total objective along one coordinate.
    pub fn numeric(&self, g: Group, i: usize, eps: f64) -> f64 {
        let base = self.params.read_group(g);
        let mut p = self.params.clone();
        let mut v = base.clone();
        v[i] = base[i] + eps;
        p.write_group(g, &v);
        let fp = self.total(&p);
        v[i] = base[i] - eps;
        p.write_group(g, &v);
        let fm = self.total(&p);
        (fp - fm) / (2.0 * eps)
    }
}

/// Relative error with a small absolute floor for near-zero gradients.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

pub fn canonical_sphere_points(m: usize) -> Vec<Vec3> {
    make_sphere(8, 6).unwrap().vertices[..m].to_vec()
}
