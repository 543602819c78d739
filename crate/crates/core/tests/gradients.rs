mod common;

use common::{rel_err, toy_scene};
use lassie_core::objective::evaluate;
use lassie_core::optim::Group;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn total_gradient_matches_central_differences() {
    let toy = toy_scene(7);
    let grads = toy.grads();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for g in Group::ALL {
        let len = toy.params.group_len(g);
        assert_eq!(grads[g.index()].len(), len);
        for _ in 0..10 {
            let i = rng.random_range(0..len);
            let a = grads[g.index()][i];
            let n = toy.numeric(g, i, 1e-4);
            let e = rel_err(a, n);
            worst = worst.max(e);
            assert!(e < 1e-2, "{} [{i}]: analytic {a} numeric {n}", g.name());
        }
    }
    eprintln!("worst relative error {worst:.2e}");
}

#[test]
fn disabled_groups_have_empty_gradients() {
    let toy = toy_scene(3);
    let ev = evaluate(
        &toy.skeleton,
        &toy.shape,
        &toy.params,
        &toy.targets,
        &toy.ctx,
        &toy.q,
        &toy.settings,
        &[Group::Camera],
    )
    .unwrap();
    assert_eq!(ev.grad(Group::Camera).len(), 12);
    for g in [Group::Pose, Group::Scales, Group::Codes, Group::Deform] {
        assert!(ev.grad(g).is_empty());
    }
}

#[test]
fn pose_prior_only_gradient_is_twice_the_offset() {
    let mut toy = toy_scene(5);
    toy.settings.weights.sem = 0.0;
    toy.settings.weights.ang = 0.0;
    toy.settings.weights.lap = 0.0;
    toy.settings.weights.norm = 0.0;
    toy.settings.weights.pose = 1.0;
    // Move everything off-screen so the silhouette term has no gradient.
    for c in &mut toy.params.cameras {
        c.translation[0] = 50.0;
    }
    for t in &mut toy.targets {
        t.mask.iter_mut().for_each(|v| *v = 0.0);
    }
    let ev = evaluate(
        &toy.skeleton,
        &toy.shape,
        &toy.params,
        &toy.targets,
        &toy.ctx,
        &toy.q,
        &toy.settings,
        &[Group::Pose],
    )
    .unwrap();
    let g = ev.grad(Group::Pose);
    let mut at = 0;
    for pose in &toy.params.poses {
        for (k, r) in pose.bone_rotations.iter().enumerate() {
            for a in 0..3 {
                let expected = 2.0 * (r[a] - toy.params.rest_pose.bone_rotations[k][a]);
                assert!((g[at] - expected).abs() < 1e-12);
                at += 1;
            }
        }
    }
}

#[test]
fn toy_scene_exercises_every_term() {
    let toy = toy_scene(7);
    let ev = evaluate(
        &toy.skeleton,
        &toy.shape,
        &toy.params,
        &toy.targets,
        &toy.ctx,
        &toy.q,
        &toy.settings,
        &[],
    )
    .unwrap();
    eprintln!("{:?}", ev.terms);
    for v in ev.terms.values() {
        assert!(v > 0.0);
    }
}
