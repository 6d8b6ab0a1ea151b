//! Adaptive radar-camera fusion at one pyramid level.
//!
//! Each radar point projects into the image feature map, predicts K
//! deformable sample offsets and softmax weights from its own feature query,
//! gathers the sampled image features, and cross-attends to them. The
//! adaptive image feature is concatenated with the point feature; points
//! whose projection is invalid get an exactly-zero image half so index
//! alignment survives into the correlation stage.
//!
//! Attention granularity is configurable: `Samples` keeps the K sampled
//! features as the key/value sequence with the weighted aggregate as a
//! residual path; `Aggregated` attends over the single aggregated feature.

use rand_chacha::ChaCha8Rng;

use crate::config::{AttnOver, RunConfig};
use crate::error::{Result, RvoError};
use crate::geometry::{project_points, Calibration, Vec3};
use crate::nn::layers::{Lbr, Linear, Phase};
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Value};
use crate::nn::tensor::Tensor;
use crate::backbone::LevelMap;
use crate::scalar::Scalar;

pub struct FusionLevel {
    query: Linear,
    offset_head: Linear,
    weight_head: Linear,
    key: Linear,
    value: Linear,
    out: Lbr,
    pub width: usize,
    pub samples: usize,
    pub heads: usize,
}

impl FusionLevel {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        samples: usize,
        heads: usize,
    ) -> Self {
        assert!(width % heads == 0, "feature width must divide into heads");
        // Offset and weight heads start at zero: training begins from the
        // plain projection with uniform sample weights.
        FusionLevel {
            query: Linear::projection(store, rng, &format!("{name}.wp"), width, width),
            offset_head: Linear::zeroed(store, &format!("{name}.offsets"), width, samples * 2),
            weight_head: Linear::zeroed(store, &format!("{name}.weights"), width, samples),
            key: Linear::projection(store, rng, &format!("{name}.wk"), width, width),
            value: Linear::projection(store, rng, &format!("{name}.wv"), width, width),
            out: Lbr::new(store, rng, &format!("{name}.out"), width, width),
            width,
            samples,
            heads,
        }
    }
}

pub struct FusedLevel {
    /// `M x 2C`: adaptive image feature next to the original point feature.
    pub fused: Value,
    pub valid: Vec<bool>,
}

/// Fuse one pyramid level of point features with the matching image map.
#[allow(clippy::too_many_arguments)]
pub fn fuse_level<S: Scalar>(
    tape: &mut Tape<S>,
    store: &mut ParamStore<S>,
    params: &FusionLevel,
    coords: &[Vec3<S>],
    point_feat: Value,
    image: LevelMap,
    calib: &Calibration<S>,
    full_width: usize,
    full_height: usize,
    level: usize,
    cfg: &RunConfig,
    phase: Phase,
) -> Result<FusedLevel> {
    let m = coords.len();
    let feat = tape.value(point_feat);
    if feat.rows != m || feat.cols != params.width {
        return Err(RvoError::shape(format!(
            "fusion expects {}x{} features, got {}x{}",
            m, params.width, feat.rows, feat.cols
        )));
    }
    let k = params.samples;
    let heads = params.heads;
    let head_width = params.width / heads;

    let (uv, _depth, valid) = project_points(coords, calib, full_width, full_height);
    let stride_inv = S::from_f64(1.0 / (1u64 << level) as f64);
    let mut base = Tensor::zeros(m * k, 2);
    for (i, p) in uv.iter().enumerate() {
        for j in 0..k {
            base.set(i * k + j, 0, p[0] * stride_inv);
            base.set(i * k + j, 1, p[1] * stride_inv);
        }
    }
    let base = tape.constant(base);

    let q = params.query.apply(tape, store, point_feat);
    let offsets = params.offset_head.apply(tape, store, q);
    let offsets = tape.reshape(offsets, m * k, 2);
    let loc = tape.add(base, offsets);
    let sampled = tape.bilinear_sample(image.feat, loc, image.h, image.w);

    // Weighted aggregation over the K samples.
    let logits = params.weight_head.apply(tape, store, q);
    let logits = tape.reshape(logits, m * k, 1);
    let alpha = tape.group_softmax(logits, k);
    let weighted = tape.mul_col(sampled, alpha);
    let aggregated = tape.sum_pool(weighted, k);

    let scale = S::from_f64(1.0 / (head_width as f64).sqrt());
    let attended = match cfg.attn_over {
        AttnOver::Samples => {
            let keys = params.key.apply(tape, store, sampled);
            let values = params.value.apply(tape, store, sampled);
            let q_rep = tape.repeat_rows(q, k);
            let qk = tape.mul(q_rep, keys);
            let scores = tape.channel_block_sum(qk, head_width);
            let scores = tape.scale(scores, scale);
            let attn = tape.group_softmax(scores, k);
            let picked = tape.channel_block_mul(attn, values, head_width);
            let ctx = tape.sum_pool(picked, k);
            // Aggregated feature as the residual path.
            tape.add(ctx, aggregated)
        }
        AttnOver::Aggregated => {
            let keys = params.key.apply(tape, store, aggregated);
            let values = params.value.apply(tape, store, aggregated);
            let qk = tape.mul(q, keys);
            let scores = tape.channel_block_sum(qk, head_width);
            let scores = tape.scale(scores, scale);
            let attn = tape.group_softmax(scores, 1);
            let picked = tape.channel_block_mul(attn, values, head_width);
            tape.sum_pool(picked, 1)
        }
    };

    // Gate invalid projections to zero before the output stack (keeps batch
    // statistics bounded) and after it (makes the image half exactly zero).
    let mask = Tensor::new(
        m,
        1,
        valid
            .iter()
            .map(|&v| if v { S::one() } else { S::zero() })
            .collect(),
    );
    let mask = tape.constant(mask);
    let gated = tape.mul_col(attended, mask);
    let image_half = params.out.apply(tape, store, gated, phase);
    let image_half = tape.mul_col(image_half, mask);
    let fused = tape.concat_cols(&[image_half, point_feat]);
    Ok(FusedLevel { fused, valid })
}
