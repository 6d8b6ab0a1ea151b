//! Training loop: gradient accumulation over a batch, global-norm clipping,
//! adaptive-moment updates with step-decayed learning rate, CSV logging and
//! checkpointing.
//!
//! All stochastic choices (epoch shuffles, per-frame point subsets) are
//! stateless functions of the seed and structural indices, so a resumed run
//! continues exactly where the checkpoint left off.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, snapshot, CheckpointData};
use crate::data::{sample_seed, sample_to_n, SequenceSample};
use crate::error::{Result, RvoError};
use crate::network::{ForwardOutput, FrameInput, Network};
use crate::nn::adam::{Adam, GradMap};
use crate::nn::layers::Phase;
use crate::scalar::Scalar;

pub struct TrainOutcome {
    pub steps_run: u64,
    pub final_epoch: u64,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub last_total_loss: f64,
}

/// Prepare a training pair: sample both radar frames to the configured
/// point count with stateless seeds.
pub fn prepare_pair<S: Scalar>(
    sample: &SequenceSample<S>,
    n: usize,
    seed1: u64,
    seed2: u64,
) -> (FrameInput<S>, FrameInput<S>) {
    let r1 = sample_to_n(&sample.radar1, n, seed1);
    let r2 = sample_to_n(&sample.radar2, n, seed2);
    (
        FrameInput {
            image: sample.image1.clone(),
            points: r1.to_feature_set(),
        },
        FrameInput {
            image: sample.image2.clone(),
            points: r2.to_feature_set(),
        },
    )
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x2545_f491_4f6c_dd1d)
            .wrapping_add(epoch.wrapping_mul(0x9e37_79b9)),
    );
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn dump_diagnostics<S: Scalar>(
    out_dir: &Path,
    step: u64,
    net: &Network<S>,
    level_losses: &[f64],
    context: &str,
) -> PathBuf {
    let path = out_dir.join(format!("nonfinite_step{step}.json"));
    let diag = serde_json::json!({
        "step": step,
        "context": context,
        "level_losses": level_losses,
        "s_e": net.store.get(net.s_e).data[0].as_f64(),
        "s_t": net.store.get(net.s_t).data[0].as_f64(),
    });
    let _ = std::fs::write(&path, serde_json::to_string_pretty(&diag).unwrap());
    path
}

/// Run training until the step budget is exhausted. `resume` continues from
/// a checkpoint's counters and state.
pub fn train<S: Scalar>(
    net: &mut Network<S>,
    samples: &[SequenceSample<S>],
    out_dir: &Path,
    resume: Option<&CheckpointData>,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(RvoError::DataFormatError(
            "training split holds no sample pairs".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)?;
    let cfg = net.cfg.clone();
    let n_samples = samples.len();
    let steps_per_epoch = n_samples.div_ceil(cfg.batch_size).max(1);
    let total_steps = cfg
        .steps
        .map(|s| s as u64)
        .unwrap_or((cfg.epochs * steps_per_epoch) as u64);

    let mut adam = Adam::new(&net.store);
    let mut start_step = 0u64;
    if let Some(data) = resume {
        let (_, step) = crate::checkpoint::restore(net, &mut adam, data)?;
        start_step = step;
    }

    let log_path = out_dir.join("train_log.csv");
    let fresh_log = !log_path.exists() || resume.is_none();
    let mut log = std::io::BufWriter::new(if fresh_log {
        std::fs::File::create(&log_path)?
    } else {
        std::fs::OpenOptions::new().append(true).open(&log_path)?
    });
    if fresh_log {
        let level_cols: Vec<String> = (1..=cfg.levels).map(|l| format!("L{l}")).collect();
        writeln!(log, "step,total_loss,{},s_e,s_t,lr", level_cols.join(","))?;
    }

    let ckpt_path = out_dir.join("checkpoint.bin");
    let mut last_total = f64::NAN;
    let mut step = start_step;
    while step < total_steps {
        let epoch = step / steps_per_epoch as u64;
        let order = epoch_order(n_samples, cfg.seed, epoch);
        let batch_start = (step % steps_per_epoch as u64) as usize * cfg.batch_size;
        let batch: Vec<usize> = (batch_start..(batch_start + cfg.batch_size).min(n_samples))
            .map(|i| order[i])
            .collect();
        let lr = cfg.lr_at_epoch(epoch as usize);
        let phase = if cfg.bn_freeze_last_steps > 0
            && step >= total_steps.saturating_sub(cfg.bn_freeze_last_steps as u64)
        {
            Phase::Eval
        } else {
            Phase::Train
        };

        let mut grads = GradMap::new(&net.store);
        let inv_batch = S::from_f64(1.0 / batch.len() as f64);
        let mut total_acc = 0.0f64;
        let mut level_acc = vec![0.0f64; cfg.levels];
        for &sample_idx in &batch {
            let (f1, f2) = prepare_pair(
                &samples[sample_idx],
                cfg.points_per_frame,
                sample_seed(cfg.seed, epoch as usize, sample_idx * 2),
                sample_seed(cfg.seed, epoch as usize, sample_idx * 2 + 1),
            );
            let (out, total, levels): (ForwardOutput<S>, _, Vec<f64>) = net.forward_with_loss(
                &f1,
                &f2,
                &samples[sample_idx].calib,
                &samples[sample_idx].gt_relative,
                phase,
            )?;
            let total_value = out.tape.value(total).item().as_f64();
            if !total_value.is_finite() {
                let dump = dump_diagnostics(out_dir, step, net, &levels, "forward loss");
                return Err(RvoError::NonFiniteLoss { step: step as usize, dump });
            }
            total_acc += total_value / batch.len() as f64;
            for (acc, l) in level_acc.iter_mut().zip(&levels) {
                *acc += l / batch.len() as f64;
            }
            let g = out.tape.backward(total);
            grads.accumulate(&out.tape, &g, inv_batch);
        }
        if !grads.is_finite() {
            let dump = dump_diagnostics(out_dir, step, net, &level_acc, "gradients");
            return Err(RvoError::NonFiniteLoss { step: step as usize, dump });
        }
        grads.clip_global_norm(cfg.grad_clip);
        adam.step(&mut net.store, &grads, lr);
        last_total = total_acc;
        step += 1;

        if step % cfg.log_every_steps as u64 == 0 || step == total_steps {
            let levels_csv: Vec<String> =
                level_acc.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(
                log,
                "{step},{:.17e},{},{:.17e},{:.17e},{lr:.17e}",
                total_acc,
                levels_csv.join(","),
                net.store.get(net.s_e).data[0].as_f64(),
                net.store.get(net.s_t).data[0].as_f64(),
            )?;
        }

        let at_epoch_end = step % steps_per_epoch as u64 == 0;
        let epoch_done = step / steps_per_epoch as u64;
        if (at_epoch_end && epoch_done % cfg.checkpoint_every_epochs.max(1) as u64 == 0)
            || step == total_steps
        {
            let data = snapshot(net, &adam, epoch_done, step);
            save_checkpoint(&ckpt_path, &data)?;
        }
    }
    log.flush()?;
    // Config snapshot next to the artifacts.
    cfg.save(&out_dir.join("config.json"))?;
    Ok(TrainOutcome {
        steps_run: step - start_step,
        final_epoch: step / steps_per_epoch as u64,
        checkpoint_path: ckpt_path,
        log_path,
        last_total_loss: last_total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::data::load_split;
    use crate::data::synthetic::{generate_synthetic, SyntheticSceneConfig};

    fn micro_cfg(steps: usize) -> RunConfig {
        RunConfig {
            points_per_frame: 32,
            image_width: 32,
            image_height: 32,
            levels: 2,
            point_widths: vec![8, 8],
            image_widths: vec![8, 8],
            group_k: 4,
            fusion_samples: 2,
            fusion_heads: 2,
            cost_k1: 4,
            cost_k2: 3,
            embed_width: 8,
            level_weights: vec![1.0, 2.0],
            steps: Some(steps),
            batch_size: 2,
            seed: 7,
            ..RunConfig::default()
        }
    }

    fn tiny_dataset(dir: &Path) -> Vec<SequenceSample<f32>> {
        let scene = SyntheticSceneConfig {
            static_points: 48,
            image_width: 32,
            image_height: 32,
            focal: 32.0,
            ..SyntheticSceneConfig::default()
        };
        generate_synthetic(&scene, 6, 11, dir, "000", &["train"]).unwrap();
        load_split::<f32>(dir, "train").unwrap()
    }

    #[test]
    fn short_training_runs_and_logs() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_dataset(dir.path());
        let mut net = Network::<f32>::new(micro_cfg(3)).unwrap();
        let out = dir.path().join("run");
        let outcome = train(&mut net, &samples, &out, None).unwrap();
        assert_eq!(outcome.steps_run, 3);
        assert!(outcome.checkpoint_path.exists());
        let log = std::fs::read_to_string(&outcome.log_path).unwrap();
        let lines: Vec<&str> = log.trim().lines().collect();
        assert_eq!(lines.len(), 4, "header plus three steps");
        assert!(lines[0].starts_with("step,total_loss,L1,L2,s_e,s_t,lr"));
        assert!(outcome.last_total_loss.is_finite());
    }

    #[test]
    fn identical_seeds_produce_identical_logs() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_dataset(dir.path());
        let run = |out: &Path| {
            let mut net = Network::<f32>::new(micro_cfg(3)).unwrap();
            train(&mut net, &samples, out, None).unwrap();
            std::fs::read_to_string(out.join("train_log.csv")).unwrap()
        };
        let a = run(&dir.path().join("a"));
        let b = run(&dir.path().join("b"));
        assert_eq!(a, b);
    }

    #[test]
    fn resume_reproduces_next_step_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_dataset(dir.path());

        // Continuous run: four steps.
        let mut net_full = Network::<f32>::new(micro_cfg(4)).unwrap();
        let out_full = dir.path().join("full");
        train(&mut net_full, &samples, &out_full, None).unwrap();
        let full_log = std::fs::read_to_string(out_full.join("train_log.csv")).unwrap();
        let step4_full = full_log
            .lines()
            .find(|l| l.starts_with("4,"))
            .unwrap()
            .to_string();

        // Stop at three, then resume one more step.
        let mut net_a = Network::<f32>::new(micro_cfg(3)).unwrap();
        let out_a = dir.path().join("a");
        let outcome_a = train(&mut net_a, &samples, &out_a, None).unwrap();
        let data = crate::checkpoint::load_checkpoint(&outcome_a.checkpoint_path).unwrap();
        let mut net_b = Network::<f32>::new(micro_cfg(4)).unwrap();
        let out_b = dir.path().join("b");
        train(&mut net_b, &samples, &out_b, Some(&data)).unwrap();
        let resumed_log = std::fs::read_to_string(out_b.join("train_log.csv")).unwrap();
        let step4_resumed = resumed_log
            .lines()
            .find(|l| l.starts_with("4,"))
            .unwrap()
            .to_string();
        assert_eq!(step4_full, step4_resumed, "resumed step must match bitwise");
    }

    #[test]
    fn loss_scales_become_trainable() {
        let dir = tempfile::tempdir().unwrap();
        let samples = tiny_dataset(dir.path());
        let mut net = Network::<f32>::new(micro_cfg(5)).unwrap();
        let s_e_before = net.store.get(net.s_e).data[0];
        train(&mut net, &samples, &dir.path().join("run"), None).unwrap();
        let s_e_after = net.store.get(net.s_e).data[0];
        assert_ne!(s_e_before, s_e_after, "s_e must move during training");
    }
}
