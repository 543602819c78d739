use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lassie_core::eval::{evaluate_result, testbed_config, testbed_vae_config, write_synth, GroundTruth, SyntheticSpec, GROUND_TRUTH_FILE};
use lassie_core::features::{load_ensemble, FeatureEnsemble};
use lassie_core::objective::ShapeMode;
use lassie_core::parts::make_sphere;
use lassie_core::pipeline::{
    export, optimize_ensemble, repose, sample_texture, transfer_texture, write_obj, write_ply, ExportFormat,
    LassieConfig, LassieResult,
};
use lassie_core::prior::{gen_dataset, train_part_vae, VaeConfig};
use lassie_core::skeleton::{build_skeleton, resting_pose, PoseParams};

#[derive(Parser)]
#[command(name = "lassie", version, about = "Articulated part-based shapes from sparse image ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the part-shape VAE on random primitives and save the decoder.
    TrainPrior {
        /// VAE settings as JSON; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the small, fast settings used by the synthetic testbed.
        #[arg(long)]
        testbed: bool,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Sphere grid as `NU NV`.
        #[arg(long, num_args = 2, default_values_t = [32, 16])]
        grid: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit skeleton, part shapes, cameras and poses to a feature bundle.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ensemble: Option<PathBuf>,
        #[arg(long)]
        prior: Option<PathBuf>,
        /// `prior` or `no_prior`.
        #[arg(long)]
        shape_mode: Option<String>,
        /// Phase lengths as `CAMERA POSE ALL`.
        #[arg(long, num_args = 3)]
        phases: Option<Vec<usize>>,
        #[command(flatten)]
        common: Common,
    },
    /// Write OBJ/PLY meshes and render overlays for optimized instances.
    Export {
        #[arg(long)]
        result: PathBuf,
        /// Bundle with RGB images; without it PLY colors are per part.
        #[arg(long)]
        ensemble: Option<PathBuf>,
        /// Instance index; all instances when omitted.
        #[arg(long)]
        instance: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "obj,ply")]
        format: Vec<String>,
        /// Overlay PNG size as `H W`.
        #[arg(long, num_args = 2, default_values_t = [256, 256])]
        overlay_size: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Compute keypoint, part-transfer and mask metrics as JSON.
    Eval {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        ensemble: PathBuf,
        /// Synthetic ground truth; defaults to the one next to the bundle.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Pose the shared shape anew and write an OBJ.
    Repose {
        #[arg(long)]
        result: PathBuf,
        /// Pose JSON (`{"bone_rotations": [[x, y, z], ...]}`).
        #[arg(long, conflicts_with_all = ["instance", "rest"])]
        pose: Option<PathBuf>,
        /// Use this instance's pose.
        #[arg(long)]
        instance: Option<usize>,
        /// Blend towards this instance's pose.
        #[arg(long, requires = "instance")]
        blend_with: Option<usize>,
        /// Blend weight in `[0, 1]`.
        #[arg(long, default_value_t = 0.5)]
        t: f64,
        /// Rest pose.
        #[arg(long)]
        rest: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Sample one instance's texture and copy it onto another result.
    TransferTexture {
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        src_ensemble: PathBuf,
        #[arg(long, default_value_t = 0)]
        src_instance: usize,
        #[arg(long)]
        dst: PathBuf,
        #[arg(long, default_value_t = 0)]
        dst_instance: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Write a synthetic bundle, its ground truth and a matching optimize config.
    MakeSynth {
        /// Generator settings as JSON; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn parse_format(name: &str) -> Result<ExportFormat> {
    Ok(match name {
        "obj" => ExportFormat::Obj,
        "ply" => ExportFormat::Ply,
        "overlays" => ExportFormat::Overlays,
        other => bail!("unknown export format `{other}` (obj, ply, overlays)"),
    })
}

fn parse_shape_mode(name: &str) -> Result<ShapeMode> {
    Ok(match name {
        "prior" => ShapeMode::Prior,
        "no_prior" | "no-prior" => ShapeMode::NoPrior,
        other => bail!("unknown shape mode `{other}` (prior, no_prior)"),
    })
}

fn train_prior(
    config: Option<PathBuf>,
    testbed: bool,
    samples: Option<usize>,
    epochs: Option<usize>,
    grid: &[usize],
    common: Common,
) -> Result<()> {
    let mut vae: VaeConfig = match config {
        Some(p) => read_json(&p)?,
        None if testbed => testbed_vae_config(),
        None => VaeConfig::default(),
    };
    vae.samples = samples.unwrap_or(vae.samples);
    vae.epochs = epochs.unwrap_or(vae.epochs);
    vae.seed = common.seed.unwrap_or(vae.seed);
    let topology = make_sphere(grid[0], grid[1])?;
    let dataset = gen_dataset(vae.samples, &topology, vae.seed)?;
    let (model, log) = train_part_vae(&dataset, &topology, &vae)?;
    fs::create_dir_all(&common.out_dir)?;
    let path = common.out_dir.join("prior.lsbn");
    model.save(&topology, &path)?;
    write_json(&common.out_dir.join("prior_history.json"), &log)?;
    if let Some(last) = log.last() {
        eprintln!("final epoch: recon {:.5} kl {:.5}", last.recon, last.kl);
    }
    println!("{}", path.display());
    Ok(())
}

fn load_ensemble_opt(path: Option<&Path>) -> Result<Option<FeatureEnsemble>> {
    path.map(|p| load_ensemble(p).with_context(|| format!("loading bundle {}", p.display())))
        .transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainPrior {
            config,
            testbed,
            samples,
            epochs,
            grid,
            common,
        } => train_prior(config, testbed, samples, epochs, &grid, common),
        Command::Optimize {
            config,
            ensemble,
            prior,
            shape_mode,
            phases,
            common,
        } => {
            let mut cfg = LassieConfig::load(&config)?;
            // Relative paths in the config are relative to the config file.
            let base = config.parent().unwrap_or(Path::new("."));
            cfg.ensemble = ensemble.unwrap_or_else(|| base.join(&cfg.ensemble));
            cfg.prior = prior.or_else(|| cfg.prior.as_ref().map(|p| base.join(p)));
            if let Some(mode) = shape_mode {
                cfg.shape_mode = parse_shape_mode(&mode)?;
            }
            if let Some(p) = phases {
                cfg.schedule.phases = [p[0], p[1], p[2]];
            }
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.out_dir = Some(common.out_dir.clone());
            let result = optimize_ensemble(&cfg)?;
            if let Some(last) = result.history.rows.last() {
                eprintln!("final loss {:.6} after {} iterations", last.2, result.history.rows.len());
            }
            println!("{}", common.out_dir.display());
            Ok(())
        }
        Command::Export {
            result,
            ensemble,
            instance,
            format,
            overlay_size,
            common,
        } => {
            let result = LassieResult::load(&result)?;
            let ensemble = load_ensemble_opt(ensemble.as_deref())?;
            let formats = format.iter().map(|f| parse_format(f)).collect::<Result<Vec<_>>>()?;
            let instances: Vec<usize> = match instance {
                Some(j) => vec![j],
                None => (0..result.num_instances()).collect(),
            };
            for j in instances {
                let image = ensemble
                    .as_ref()
                    .and_then(|e| e.instances.get(j))
                    .and_then(|i| i.image.as_ref());
                let size = (overlay_size[0], overlay_size[1]);
                for path in export(&result, j, &formats, image, size, &common.out_dir)? {
                    println!("{}", path.display());
                }
            }
            Ok(())
        }
        Command::Eval {
            result,
            ensemble,
            ground_truth,
            common,
        } => {
            let result = LassieResult::load(&result)?;
            let gt_path = ground_truth.unwrap_or_else(|| ensemble.join(GROUND_TRUTH_FILE));
            let ens = load_ensemble(&ensemble)?;
            let gt = if gt_path.exists() { Some(GroundTruth::load(&gt_path)?) } else { None };
            let report = evaluate_result(&result, &ens, gt.as_ref())?;
            fs::create_dir_all(&common.out_dir)?;
            write_json(&common.out_dir.join("metrics.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Repose {
            result,
            pose,
            instance,
            blend_with,
            t,
            rest,
            common,
        } => {
            let result = LassieResult::load(&result)?;
            let pose: PoseParams = match (pose, instance) {
                (Some(p), _) => read_json(&p)?,
                (None, Some(j)) => {
                    let a = result.pose(j)?.clone();
                    match blend_with {
                        Some(k) => blend(&a, result.pose(k)?, t),
                        None => a,
                    }
                }
                (None, None) if rest => resting_pose(&build_skeleton(&result.skeleton)?),
                (None, None) => bail!("give one of --pose, --instance or --rest"),
            };
            let mesh = repose(&result, &pose)?;
            fs::create_dir_all(&common.out_dir)?;
            let path = common.out_dir.join("reposed.obj");
            write_obj(&path, &mesh, &result.build_skeleton()?.part_names())?;
            println!("{}", path.display());
            Ok(())
        }
        Command::TransferTexture {
            src,
            src_ensemble,
            src_instance,
            dst,
            dst_instance,
            common,
        } => {
            let src = LassieResult::load(&src)?;
            let dst = LassieResult::load(&dst)?;
            let ens = load_ensemble(&src_ensemble)?;
            let image = ens
                .instances
                .get(src_instance)
                .and_then(|i| i.image.as_ref())
                .with_context(|| format!("instance {src_instance} of the source bundle has no image"))?;
            let colors = sample_texture(&src, src_instance, image)?;
            let moved = transfer_texture(&src, &colors, &dst)?;
            fs::create_dir_all(&common.out_dir)?;
            let path = common.out_dir.join(format!("transfer_{dst_instance}.ply"));
            write_ply(&path, &dst.instance_scene(dst_instance)?, &moved)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::MakeSynth {
            config,
            n,
            noise,
            common,
        } => {
            let mut spec: SyntheticSpec = match config {
                Some(p) => read_json(&p)?,
                None => SyntheticSpec::default(),
            };
            spec.n = n.unwrap_or(spec.n);
            spec.noise = noise.unwrap_or(spec.noise);
            let seed = common.seed.unwrap_or(0);
            fs::create_dir_all(&common.out_dir)?;
            write_synth(&spec, seed, &common.out_dir)?;
            let mut cfg = testbed_config(&spec);
            cfg.ensemble = PathBuf::from(".");
            cfg.seed = seed;
            write_json(&common.out_dir.join("config.json"), &cfg)?;
            println!("{}", common.out_dir.display());
            Ok(())
        }
    }
}

fn blend(a: &PoseParams, b: &PoseParams, t: f64) -> PoseParams {
    PoseParams {
        bone_rotations: a
            .bone_rotations
            .iter()
            .zip(&b.bone_rotations)
            .map(|(x, y)| [0, 1, 2].map(|k| (1.0 - t) * x[k] + t * y[k]))
            .collect(),
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
