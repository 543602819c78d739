//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::time::{Duration, Instant};

use common::checks::*;
use common::{rel_err, toy_scene};
use lassie_core::eval::{evaluate_result, make_synth, testbed_config, testbed_vae_config, EvalReport, SyntheticSpec};
use lassie_core::features::FeatureEnsemble;
use lassie_core::objective::ShapeMode;
use lassie_core::optim::Group;
use lassie_core::parts::{make_sphere, MlpParams};
use lassie_core::pipeline::{optimize_loaded, LassieConfig, LassieResult};
use lassie_core::prior::{gen_dataset, kl_divergence, mean_point_error, reconstruct, train_part_vae};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_contract() -> Outcome {
    let start = Instant::now();
    let toy = toy_scene(7);
    let grads = toy.grads();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut worst, mut checked) = (0.0f64, 0);
    for g in Group::ALL {
        let len = toy.params.group_len(g);
        for _ in 0..10 {
            let i = rng.random_range(0..len);
            worst = worst.max(rel_err(grads[g.index()][i], toy.numeric(g, i, 1e-4)));
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        checked >= 50 && worst < 1e-2 && secs < 60.0,
        format!("{checked} coordinates, worst relative error {worst:.2e}, {secs:.1}s"),
    )
}

fn chamfer_oracle() -> Outcome {
    let mismatches = (0..100u64)
        .filter(|&s| {
            let (lib, brute) = chamfer_case(1000 + s);
            lib.to_bits() != brute.to_bits()
        })
        .count();
    outcome(mismatches == 0, format!("{mismatches} of 100 cases differ from the double loop"))
}

fn part_vae(decoder_out: &mut Option<MlpParams>) -> Outcome {
    let config = testbed_vae_config();
    let topo = make_sphere(16, 10).unwrap();
    let start = Instant::now();
    let train = gen_dataset(config.samples, &topo, 1).unwrap();
    let (vae, _) = train_part_vae(&train, &topo, &config).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let held_out = gen_dataset(100, &topo, 424_242).unwrap();
    let err = held_out
        .iter()
        .map(|s| mean_point_error(&reconstruct(&vae, &topo, &s.points).unwrap(), &s.points))
        .sum::<f64>()
        / held_out.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_kl = 0.0f64;
    for case in 0..10 {
        let d = rng.random_range(2..17);
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (kl, _, _) = kl_divergence(&mu, &lv);
        let mc = kl_by_sampling(&mu, &lv, 200_000, 77 + case);
        worst_kl = worst_kl.max((kl - mc).abs() / kl);
    }
    *decoder_out = Some(vae.decoder);
    outcome(
        err < 0.05 && worst_kl < 0.05,
        format!("held-out error {err:.4} over 100 shapes (trained in {secs:.0}s), worst KL gap {:.2}%", 100.0 * worst_kl),
    )
}

fn tiny_determinism_run(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let spec = SyntheticSpec {
        n: 3,
        image_size: 64,
        feature_size: 32,
        grid: [8, 6],
        ..Default::default()
    };
    let (ens, _) = make_synth(&spec, 2).unwrap();
    let mut config = testbed_config(&spec);
    config.render_size = 32;
    config.deform_hidden = 16;
    config.schedule.phases = [5, 5, 10];
    config.out_dir = Some(dir.to_path_buf());
    let prior = MlpParams::init(4, 16, &mut ChaCha8Rng::seed_from_u64(3));
    optimize_loaded(&config, &ens, Some(prior)).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn invariant_suites() -> Outcome {
    let cases = 200u64;
    let fk = (0..cases)
        .map(|s| fk_connectivity_error(if s % 2 == 0 { "quadruped" } else { "biped" }, s))
        .fold(0.0, f64::max);
    let mirror = (0..cases).map(mirror_error).fold(0.0, f64::max);
    let sigmas = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7];
    let soft_ok = (0..cases)
        .filter(|&s| soft_hard_gaps(s, &sigmas).windows(2).all(|w| w[1] <= w[0] + 1e-12))
        .count();
    let sse_ok = (0..cases)
        .filter(|&s| kmeans_sse_history(s).windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12))
        .count();
    let e_step = (0..cases).map(e_step_repeat_change).fold(0.0, f64::max);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let same = tiny_determinism_run(a.path()) == tiny_determinism_run(b.path());
    let n = cases as usize;
    outcome(
        fk <= 1e-9 && mirror <= 1e-6 && soft_ok == n && sse_ok == n && e_step == 0.0 && same,
        format!(
            "FK gap {fk:.1e}, mirror gap {mirror:.1e}, soft->hard monotone {soft_ok}/{n}, \
             SSE monotone {sse_ok}/{n}, E-step repeat change {e_step:.1e}, checkpoints identical: {same}"
        ),
    )
}

struct Testbed {
    spec: SyntheticSpec,
    ensemble: FeatureEnsemble,
    gt: lassie_core::eval::GroundTruth,
    config: LassieConfig,
}

fn testbed() -> Testbed {
    let spec = SyntheticSpec::default();
    let (ensemble, gt) = make_synth(&spec, 7).unwrap();
    let config = testbed_config(&spec);
    Testbed { spec, ensemble, gt, config }
}

fn run(tb: &Testbed, config: &LassieConfig, prior: Option<MlpParams>) -> (LassieResult, EvalReport, Duration) {
    let start = Instant::now();
    let result = optimize_loaded(config, &tb.ensemble, prior).unwrap();
    let took = start.elapsed();
    let report = evaluate_result(&result, &tb.ensemble, Some(&tb.gt)).unwrap();
    (result, report, took)
}

fn synthetic_recovery(report: &EvalReport, took: Duration, tb: &Testbed) -> Outcome {
    let r = report.recovery.unwrap();
    let mins = took.as_secs_f64() / 60.0;
    outcome(
        r.mean_iou >= 0.85 && r.mean_bone_error_deg <= 15.0 && r.mean_azimuth_error_deg <= 10.0 && mins < 15.0,
        format!(
            "{} instances, noise {}: IOU {:.3}, bone error {:.1} deg, azimuth error {:.1} deg, {:.1} min",
            tb.spec.n, tb.spec.noise, r.mean_iou, r.mean_bone_error_deg, r.mean_azimuth_error_deg, mins
        ),
    )
}

fn metric_oracles(report: &EvalReport, tb: &Testbed) -> Outcome {
    let truth = evaluate_result(&tb.gt.to_result().unwrap(), &tb.ensemble, Some(&tb.gt)).unwrap();
    let gt_pck = truth.pck_005.unwrap().pck;
    let gt_pcp = truth.pcp.unwrap().pcp;
    let fit_pck = report.pck_01.unwrap().pck;
    outcome(
        gt_pck == 100.0 && gt_pcp >= 99.0 && fit_pck >= 80.0,
        format!("true parameters: PCK@0.05 {gt_pck:.2}, PCP {gt_pcp:.2}; optimized PCK@0.1 {fit_pck:.2}"),
    )
}

fn ablations(full: &EvalReport, tb: &Testbed, prior: &MlpParams) -> Outcome {
    let mut no_sem = tb.config.clone();
    no_sem.weights.sem = 0.0;
    let (_, without_sem, _) = run(tb, &no_sem, Some(prior.clone()));
    let mut no_prior = tb.config.clone();
    no_prior.shape_mode = ShapeMode::NoPrior;
    let (_, without_prior, _) = run(tb, &no_prior, None);
    let pck_drop = full.pck_01.unwrap().pck - without_sem.pck_01.unwrap().pck;
    let lap_rise = without_prior.laplacian_energy / full.laplacian_energy - 1.0;
    outcome(
        pck_drop >= 10.0 && lap_rise >= 0.2,
        format!(
            "no semantic loss: PCK@0.1 -{pck_drop:.1} points; no prior: Laplacian energy {:+.0}% ({:.3} vs {:.3})",
            100.0 * lap_rise,
            without_prior.laplacian_energy,
            full.laplacian_energy
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut line = |name: &str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed += 1;
        }
    };
    line("gradient contract", gradient_contract());
    line("chamfer oracle", chamfer_oracle());
    let mut decoder = None;
    line("part VAE", part_vae(&mut decoder));
    let prior = decoder.unwrap();
    line("invariant suites", invariant_suites());
    let tb = testbed();
    let (_, full, took) = run(&tb, &tb.config, Some(prior.clone()));
    line("synthetic recovery", synthetic_recovery(&full, took, &tb));
    line("metric oracles", metric_oracles(&full, &tb));
    line("ablations", ablations(&full, &tb, &prior));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
