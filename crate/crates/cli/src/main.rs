//! Command-line entry points: synthetic data generation, training,
//! inference, evaluation and plot emission.
//!
//! Exit codes: 2 configuration error, 3 non-finite training loss,
//! 4 checkpoint/version mismatch, 5 input parse failure, 1 anything else.

mod plot;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use rvo_core::checkpoint::{load_checkpoint, restore};
use rvo_core::config::RunConfig;
use rvo_core::data::synthetic::{generate_synthetic, DynamicCluster, SyntheticSceneConfig};
use rvo_core::data::{image_statistics, load_split, sample_seed};
use rvo_core::error::RvoError;
use rvo_core::eval::{rpe, segment_errors, write_length_csv, MetricReport, Trajectory};
use rvo_core::network::Network;
use rvo_core::nn::adam::Adam;
use rvo_core::nn::layers::Phase;
use rvo_core::train::{prepare_pair, train};

#[derive(Parser)]
#[command(
    name = "rvo",
    about = "4D radar-visual odometry: data generation, training, inference, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Run configuration file (JSON). Defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override for all stochastic choices.
    #[arg(long)]
    seed: Option<u64>,
    /// Pin the full determinism contract (fixed seeds, serialized updates).
    #[arg(long)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset in the standard layout.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Scene description file (JSON); defaults when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        /// Sequence id inside the dataset.
        #[arg(long, default_value = "000")]
        sequence: String,
        /// Comma-separated split names to register the sequence under.
        #[arg(long, default_value = "train,val,test")]
        splits: String,
        /// Number of default dynamic clusters to add to the scene.
        #[arg(long)]
        dynamic_clusters: Option<usize>,
        /// Position noise sigma in meters.
        #[arg(long)]
        noise: Option<f64>,
        /// Static point count override.
        #[arg(long)]
        static_points: Option<usize>,
    },
    /// Train the network on a dataset split.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset root (falls back to RVO_DATA_ROOT).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stop after this many optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run odometry inference over a sequence and dump confidences.
    Infer {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "000")]
        sequence: String,
    },
    /// Compare an estimated trajectory against ground truth.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        estimate: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Frame interval for the relative pose error.
        #[arg(long, default_value_t = 1)]
        rpe_delta: usize,
    },
    /// Emit static plot images from trajectory and confidence files.
    Plot {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Confidence dump CSV from `infer`.
        #[arg(long)]
        confidence: Option<PathBuf>,
    },
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<RvoError>() {
        Some(RvoError::ConfigError(_)) => 2,
        Some(RvoError::NonFiniteLoss { .. }) => 3,
        Some(RvoError::CheckpointMismatch(_)) => 4,
        Some(RvoError::ParseFailure { .. }) => 5,
        _ => 1,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code_for(&err));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            common,
            scene,
            frames,
            sequence,
            splits,
            dynamic_clusters,
            noise,
            static_points,
        } => cmd_generate(
            common,
            scene,
            frames,
            &sequence,
            &splits,
            dynamic_clusters,
            noise,
            static_points,
        ),
        Command::Train {
            common,
            data,
            steps,
            epochs,
            batch,
            resume,
        } => cmd_train(common, data, steps, epochs, batch, resume),
        Command::Infer {
            common,
            checkpoint,
            data,
            sequence,
        } => cmd_infer(common, &checkpoint, data, &sequence),
        Command::Eval {
            common,
            estimate,
            gt,
            rpe_delta,
        } => cmd_eval(common, &estimate, &gt, rpe_delta),
        Command::Plot {
            common,
            trajectory,
            gt,
            confidence,
        } => cmd_plot(common, &trajectory, gt.as_deref(), confidence.as_deref()),
    }
}

fn data_root(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Ok(env) = std::env::var("RVO_DATA_ROOT") {
        return Ok(PathBuf::from(env));
    }
    Err(anyhow!(RvoError::ConfigError(
        "no dataset root: pass --data or set RVO_DATA_ROOT".into()
    )))
}

fn load_run_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    Ok(cfg)
}

#[allow(clippy::too_many_arguments)]
fn cmd_generate(
    common: CommonArgs,
    scene_path: Option<PathBuf>,
    frames: usize,
    sequence: &str,
    splits: &str,
    dynamic_clusters: Option<usize>,
    noise: Option<f64>,
    static_points: Option<usize>,
) -> Result<()> {
    let mut scene: SyntheticSceneConfig = match &scene_path {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(|e| RvoError::ConfigError(format!("scene file: {e}")))?
        }
        None => SyntheticSceneConfig::default(),
    };
    if let Some(n) = static_points {
        scene.static_points = n;
    }
    if let Some(sigma) = noise {
        if sigma < 0.0 {
            return Err(anyhow!(RvoError::ConfigError(format!(
                "noise_sigma must be non-negative, got {sigma}"
            ))));
        }
        scene.noise_sigma = sigma;
    }
    if let Some(n) = dynamic_clusters {
        scene.clusters = (0..n)
            .map(|i| {
                let side = if i % 2 == 0 { 1.0 } else { -1.0 };
                DynamicCluster {
                    center: [10.0 + 3.0 * i as f64, 4.0 * side, 0.5],
                    velocity: [2.5 * side, 1.0 * side, 0.0],
                    points: 12,
                    radius: 0.5,
                    velocity_jitter: 0.0,
                }
            })
            .collect();
    }
    scene.validate()?;
    let seed = common.seed.unwrap_or(0);
    let split_names: Vec<&str> = splits.split(',').filter(|s| !s.is_empty()).collect();
    std::fs::create_dir_all(&common.out)?;
    generate_synthetic(&scene, frames, seed, &common.out, sequence, &split_names)?;
    println!(
        "generated sequence {sequence}: {frames} frames, {} static points, {} clusters -> {}",
        scene.static_points,
        scene.clusters.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_train(
    common: CommonArgs,
    data: Option<PathBuf>,
    steps: Option<usize>,
    epochs: Option<usize>,
    batch: Option<usize>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_run_config(&common)?;
    if let Some(s) = steps {
        cfg.steps = Some(s);
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(b) = batch {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    let root = data_root(data)?;
    let samples = load_split::<f32>(&root, &cfg.train_split)?;
    if cfg.normalize_from_data {
        let (mean, std) = image_statistics(&samples, 16);
        cfg.image_mean = mean;
        cfg.image_std = std;
    }
    let resume_data = match &resume {
        Some(path) => Some(load_checkpoint(path)?),
        None => None,
    };
    let mut net = Network::<f32>::new(cfg.clone())?;
    let outcome = train(&mut net, &samples, &common.out, resume_data.as_ref())?;
    println!(
        "trained {} steps (epoch {}), loss {:.6}; checkpoint {}",
        outcome.steps_run,
        outcome.final_epoch,
        outcome.last_total_loss,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

fn cmd_infer(
    common: CommonArgs,
    checkpoint: &Path,
    data: Option<PathBuf>,
    sequence: &str,
) -> Result<()> {
    let data_dir = data_root(data)?;
    let ckpt = load_checkpoint(checkpoint)?;
    let mut cfg = ckpt.config()?;
    if let Some(path) = &common.config {
        // An explicit config must agree with the checkpoint architecture;
        // restore() verifies that below.
        cfg = RunConfig::load(path)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let mut net = Network::<f32>::new(cfg.clone())?;
    let mut adam = Adam::new(&net.store);
    restore(&mut net, &mut adam, &ckpt)?;

    let seq_dir = data_dir.join("sequences").join(sequence);
    let samples = rvo_core::data::load_sequence::<f32>(&seq_dir, sequence)?;
    if samples.is_empty() {
        return Err(anyhow!(RvoError::DataFormatError(format!(
            "sequence {sequence} holds no usable pairs"
        ))));
    }
    std::fs::create_dir_all(&common.out)?;
    let mut relatives = Vec::with_capacity(samples.len());
    let conf_path = common.out.join("confidence.csv");
    let mut conf = std::io::BufWriter::new(std::fs::File::create(&conf_path)?);
    writeln!(conf, "frame,level,point,x,y,z,rrv,confidence")?;
    for (idx, sample) in samples.iter().enumerate() {
        let (f1, f2) = prepare_pair(
            sample,
            cfg.points_per_frame,
            sample_seed(cfg.seed, 0, idx * 2),
            sample_seed(cfg.seed, 0, idx * 2 + 1),
        );
        let out = net.forward(&f1, &f2, &sample.calib, Phase::Eval)?;
        for (level_idx, level) in out.levels.iter().enumerate() {
            let conf_values = out.tape.value(level.confidence);
            for (p, raw) in level.raw5.iter().enumerate() {
                writeln!(
                    conf,
                    "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                    sample.frame_index,
                    level_idx + 1,
                    p,
                    raw[0],
                    raw[1],
                    raw[2],
                    raw[3],
                    conf_values.get(p, 0)
                )?;
            }
        }
        let pose = out.final_pose();
        relatives.push(rvo_core::geometry::Pose::<f64>::new(
            [
                pose.eula[0] as f64,
                pose.eula[1] as f64,
                pose.eula[2] as f64,
            ],
            [pose.t[0] as f64, pose.t[1] as f64, pose.t[2] as f64],
        ));
    }
    conf.flush()?;
    let trajectory = Trajectory::assemble(&relatives);
    let traj_path = common.out.join("trajectory.txt");
    trajectory.save(&traj_path)?;
    cfg.save(&common.out.join("config.json"))?;
    println!(
        "inferred {} pairs -> {} and {}",
        samples.len(),
        traj_path.display(),
        conf_path.display()
    );
    Ok(())
}

fn cmd_eval(common: CommonArgs, estimate: &Path, gt: &Path, rpe_delta: usize) -> Result<()> {
    let est = Trajectory::<f64>::load(estimate)?;
    let gt_traj = Trajectory::<f64>::load(gt)?;
    let segments = segment_errors(&est, &gt_traj)?;
    let rpe_report = rpe(&est, &gt_traj, rpe_delta.max(1))?;
    std::fs::create_dir_all(&common.out)?;
    let report = MetricReport {
        segments: segments.clone(),
        rpe: rpe_report,
    };
    let json_path = common.out.join("metrics.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;
    write_length_csv(&segments, &common.out.join("per_length.csv"))?;
    println!(
        "t_rel {:.6} m/m ({:.4} %), r_rel {:.6} deg/m, rpe t {:.6} m, rpe r {:.6} deg -> {}",
        report.segments.t_rel,
        report.segments.t_rel_percent,
        report.segments.r_rel,
        report.rpe.translation_rmse_m,
        report.rpe.rotation_rmse_deg,
        json_path.display()
    );
    Ok(())
}

fn read_confidence_csv(path: &Path) -> Result<Vec<(f64, f64, f64)>> {
    let file = std::fs::File::open(path).map_err(|e| {
        anyhow!(RvoError::ParseFailure {
            path: path.to_path_buf(),
            line: 0,
            reason: e.to_string(),
        })
    })?;
    let mut out = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(anyhow!(RvoError::ParseFailure {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected 8 fields, found {}", fields.len()),
            }));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| {
                anyhow!(RvoError::ParseFailure {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason: format!("bad float {s:?}: {e}"),
                })
            })
        };
        let x = parse(fields[3])?;
        let y = parse(fields[4])?;
        let c = parse(fields[7])?;
        out.push((x, y, c));
    }
    Ok(out)
}

fn cmd_plot(
    common: CommonArgs,
    trajectory: &Path,
    gt: Option<&Path>,
    confidence: Option<&Path>,
) -> Result<()> {
    let est = Trajectory::<f64>::load(trajectory)?;
    let gt_traj = match gt {
        Some(path) => Some(Trajectory::<f64>::load(path)?),
        None => None,
    };
    std::fs::create_dir_all(&common.out)?;
    let traj_png = common.out.join("trajectory.png");
    plot::plot_trajectories(
        &est.xy(),
        gt_traj.as_ref().map(|t| t.xy()).as_deref(),
        &traj_png,
    )?;
    println!("wrote {}", traj_png.display());
    if let Some(conf_path) = confidence {
        let points = read_confidence_csv(conf_path)?;
        let conf_png = common.out.join("confidence.png");
        plot::plot_confidence(&points, &conf_png)?;
        println!("wrote {}", conf_png.display());
    }
    Ok(())
}
