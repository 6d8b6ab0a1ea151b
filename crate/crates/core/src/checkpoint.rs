//! Checkpoint archive: every parameter tensor keyed by name, optimizer
//! moments, the loss-scale parameters, epoch/step counters and the full
//! configuration snapshot.
//!
//! Values are stored as little-endian f64 bits regardless of the training
//! precision; f32 round-trips through f64 exactly, which the bitwise
//! checkpoint-resume contract relies on.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Result, RvoError};
use crate::network::Network;
use crate::nn::adam::Adam;
use crate::nn::params::ParamKind;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"RVOCKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct ParamRecord {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<f64>,
}

#[derive(Debug, Clone)]
pub struct CheckpointData {
    pub config_json: String,
    pub epoch: u64,
    pub step: u64,
    pub adam_steps: u64,
    pub params: Vec<ParamRecord>,
    pub adam_m: Vec<Tensor<f64>>,
    pub adam_v: Vec<Tensor<f64>>,
}

impl CheckpointData {
    pub fn config(&self) -> Result<RunConfig> {
        Ok(serde_json::from_str(&self.config_json)?)
    }
}

/// Capture the full training state of a network and its optimizer.
pub fn snapshot<S: Scalar>(
    net: &Network<S>,
    adam: &Adam<S>,
    epoch: u64,
    step: u64,
) -> CheckpointData {
    let params = net
        .store
        .ids()
        .map(|id| ParamRecord {
            name: net.store.name(id).to_string(),
            kind: net.store.kind(id),
            tensor: net.store.get(id).cast::<f64>(),
        })
        .collect();
    let (m, v) = adam.state();
    CheckpointData {
        config_json: serde_json::to_string_pretty(&net.cfg).expect("config serializes"),
        epoch,
        step,
        adam_steps: adam.step_count,
        params,
        adam_m: m.iter().map(Tensor::cast::<f64>).collect(),
        adam_v: v.iter().map(Tensor::cast::<f64>).collect(),
    }
}

/// Architecture fields that must match for a checkpoint to load.
fn arch_compatible(a: &RunConfig, b: &RunConfig) -> bool {
    a.levels == b.levels
        && a.point_widths == b.point_widths
        && a.image_widths == b.image_widths
        && a.group_k == b.group_k
        && a.fusion_samples == b.fusion_samples
        && a.fusion_heads == b.fusion_heads
        && a.attn_over == b.attn_over
        && a.cost_k1 == b.cost_k1
        && a.cost_k2 == b.cost_k2
        && a.embed_width == b.embed_width
        && a.confidence_feature == b.confidence_feature
        && a.neighbor_pool == b.neighbor_pool
}

/// Load a checkpoint into an existing network and optimizer. Returns
/// `(epoch, step)` to resume from.
pub fn restore<S: Scalar>(
    net: &mut Network<S>,
    adam: &mut Adam<S>,
    data: &CheckpointData,
) -> Result<(u64, u64)> {
    let stored_cfg = data.config()?;
    if !arch_compatible(&stored_cfg, &net.cfg) {
        return Err(RvoError::CheckpointMismatch(
            "architecture fields differ between checkpoint and configuration".into(),
        ));
    }
    if data.params.len() != net.store.len() {
        return Err(RvoError::CheckpointMismatch(format!(
            "parameter count {} vs {}",
            data.params.len(),
            net.store.len()
        )));
    }
    for record in &data.params {
        let id = net.store.lookup(&record.name).ok_or_else(|| {
            RvoError::CheckpointMismatch(format!("unknown parameter {}", record.name))
        })?;
        let target = net.store.get_mut(id);
        if target.rows != record.tensor.rows || target.cols != record.tensor.cols {
            return Err(RvoError::CheckpointMismatch(format!(
                "shape of {}: {}x{} vs {}x{}",
                record.name, record.tensor.rows, record.tensor.cols, target.rows, target.cols
            )));
        }
        *target = record.tensor.cast::<S>();
    }
    adam.restore(
        data.adam_m.iter().map(Tensor::cast::<S>).collect(),
        data.adam_v.iter().map(Tensor::cast::<S>).collect(),
        data.adam_steps,
    );
    Ok((data.epoch, data.step))
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, t: &Tensor<f64>) -> Result<()> {
    write_u64(w, t.rows as u64)?;
    write_u64(w, t.cols as u64)?;
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_tensor(r: &mut impl Read) -> Result<Tensor<f64>> {
    let rows = read_u64(r)? as usize;
    let cols = read_u64(r)? as usize;
    let mut data = vec![0.0f64; rows * cols];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(Tensor::new(rows, cols, data))
}

pub fn save_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let cfg_bytes = data.config_json.as_bytes();
    write_u64(&mut w, cfg_bytes.len() as u64)?;
    w.write_all(cfg_bytes)?;
    write_u64(&mut w, data.epoch)?;
    write_u64(&mut w, data.step)?;
    write_u64(&mut w, data.adam_steps)?;
    write_u64(&mut w, data.params.len() as u64)?;
    for p in &data.params {
        let name = p.name.as_bytes();
        write_u64(&mut w, name.len() as u64)?;
        w.write_all(name)?;
        w.write_all(&[match p.kind {
            ParamKind::Trainable => 0u8,
            ParamKind::Buffer => 1u8,
        }])?;
        write_tensor(&mut w, &p.tensor)?;
    }
    for t in data.adam_m.iter().chain(&data.adam_v) {
        write_tensor(&mut w, t)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        RvoError::CheckpointMismatch(format!("cannot open {}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(RvoError::CheckpointMismatch("bad magic".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    if u32::from_le_bytes(ver) != VERSION {
        return Err(RvoError::CheckpointMismatch(format!(
            "unsupported version {}",
            u32::from_le_bytes(ver)
        )));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes)?;
    let config_json = String::from_utf8(cfg_bytes)
        .map_err(|e| RvoError::CheckpointMismatch(format!("config not utf-8: {e}")))?;
    let epoch = read_u64(&mut r)?;
    let step = read_u64(&mut r)?;
    let adam_steps = read_u64(&mut r)?;
    let count = read_u64(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let mut kind = [0u8; 1];
        r.read_exact(&mut kind)?;
        let kind = match kind[0] {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            other => {
                return Err(RvoError::CheckpointMismatch(format!(
                    "bad parameter kind {other}"
                )))
            }
        };
        params.push(ParamRecord {
            name: String::from_utf8(name)
                .map_err(|e| RvoError::CheckpointMismatch(format!("name not utf-8: {e}")))?,
            kind,
            tensor: read_tensor(&mut r)?,
        });
    }
    let mut adam_m = Vec::with_capacity(count);
    for _ in 0..count {
        adam_m.push(read_tensor(&mut r)?);
    }
    let mut adam_v = Vec::with_capacity(count);
    for _ in 0..count {
        adam_v.push(read_tensor(&mut r)?);
    }
    Ok(CheckpointData {
        config_json,
        epoch,
        step,
        adam_steps,
        params,
        adam_m,
        adam_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn micro_cfg() -> RunConfig {
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
            ..RunConfig::default()
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let net = Network::<f32>::new(micro_cfg()).unwrap();
        let adam = Adam::new(&net.store);
        let data = snapshot(&net, &adam, 3, 117);
        save_checkpoint(&path, &data).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, 3);
        assert_eq!(loaded.step, 117);
        assert_eq!(loaded.params.len(), data.params.len());
        for (a, b) in loaded.params.iter().zip(&data.params) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.kind, b.kind);
            // Bitwise equality of the stored f64 values.
            for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }

        // Restoring into a fresh network reproduces every f32 value.
        let mut net2 = Network::<f32>::new(micro_cfg()).unwrap();
        let mut adam2 = Adam::new(&net2.store);
        let (epoch, step) = restore(&mut net2, &mut adam2, &loaded).unwrap();
        assert_eq!((epoch, step), (3, 117));
        for id in net.store.ids() {
            let (a, b) = (net.store.get(id), net2.store.get(id));
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // Loss scales are in the checkpoint via the parameter store.
        assert!(loaded.params.iter().any(|p| p.name == "loss.s_e"));
        assert!(loaded.params.iter().any(|p| p.name == "loss.s_t"));
    }

    #[test]
    fn incompatible_architecture_is_rejected() {
        let net = Network::<f32>::new(micro_cfg()).unwrap();
        let adam = Adam::new(&net.store);
        let data = snapshot(&net, &adam, 0, 0);
        let mut other_cfg = micro_cfg();
        other_cfg.embed_width = 16;
        let mut net2 = Network::<f32>::new(other_cfg).unwrap();
        let mut adam2 = Adam::new(&net2.store);
        assert!(matches!(
            restore(&mut net2, &mut adam2, &data),
            Err(RvoError::CheckpointMismatch(_))
        ));
    }

    #[test]
    fn missing_file_reports_mismatch() {
        assert!(matches!(
            load_checkpoint(Path::new("/nonexistent/ckpt.bin")),
            Err(RvoError::CheckpointMismatch(_))
        ));
    }
}
