//! Multi-scale radar point feature pyramid.
//!
//! Each level samples half the points of the previous one by farthest point
//! sampling, gathers K neighbors, and encodes spatial offset, radial
//! velocity and intensity through separate linear-BN-ReLU stacks before deep
//! fusion and neighborhood pooling. Keeping the three channel families in
//! separate encoders avoids collapsing them into one feature space.

use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::config::{NeighborPool, RunConfig};
use crate::error::{Result, RvoError};
use crate::nn::layers::{Lbr, Phase};
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Value};
use crate::pointcloud::{farthest_point_sample, group, knn, FeatureSet};
use crate::scalar::Scalar;

/// Three separate channel encoders, a fusion stack, and the final stack
/// applied to the concatenated neighborhood descriptor.
pub struct AggregationBlock {
    spatial: Lbr,
    velocity: Lbr,
    intensity: Lbr,
    fuse: Lbr,
    final_lbr: Lbr,
    in_features: usize,
    pub out_width: usize,
}

impl AggregationBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_width: usize,
    ) -> Self {
        let c_s = (out_width / 2).max(2);
        let c_v = (out_width / 4).max(1);
        let c_p = (out_width / 4).max(1);
        let c_f = (out_width / 2).max(2);
        let spatial = Lbr::new(store, rng, &format!("{name}.spatial"), 3, c_s);
        let velocity = Lbr::new(store, rng, &format!("{name}.velocity"), 1, c_v);
        let intensity = Lbr::new(store, rng, &format!("{name}.intensity"), 1, c_p);
        let fuse = Lbr::new(store, rng, &format!("{name}.fuse"), c_s + c_v + c_p, c_f);
        let final_lbr = Lbr::new(
            store,
            rng,
            &format!("{name}.final"),
            in_features + c_f + 5,
            out_width,
        );
        AggregationBlock {
            spatial,
            velocity,
            intensity,
            fuse,
            final_lbr,
            in_features,
            out_width,
        }
    }

    /// Encode a grouped neighborhood tensor `(M*K) x (5 + C)` into per-group
    /// features `M x out_width`.
    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        grouped: Value,
        k: usize,
        pool: NeighborPool,
        phase: Phase,
    ) -> Result<Value> {
        let width = tape.value(grouped).cols;
        if width != 5 + self.in_features {
            return Err(RvoError::shape(format!(
                "grouped width {width}, expected {}",
                5 + self.in_features
            )));
        }
        let rows = tape.value(grouped).rows;
        if rows % k != 0 {
            return Err(RvoError::shape(format!("{rows} rows not divisible by k={k}")));
        }
        let s = tape.slice_cols(grouped, 0, 3);
        let v = tape.slice_cols(grouped, 3, 1);
        let p = tape.slice_cols(grouped, 4, 1);
        let s_enc = self.spatial.apply(tape, store, s, phase);
        let v_enc = self.velocity.apply(tape, store, v, phase);
        let p_enc = self.intensity.apply(tape, store, p, phase);
        let stacked = tape.concat_cols(&[s_enc, v_enc, p_enc]);
        let fused = self.fuse.apply(tape, store, stacked, phase);
        let pooled = tape.mean_pool(fused, k);
        let pooled = tape.repeat_rows(pooled, k);
        let descriptor = if self.in_features > 0 {
            let f = tape.slice_cols(grouped, 5, self.in_features);
            tape.concat_cols(&[f, pooled, s, v, p])
        } else {
            tape.concat_cols(&[pooled, s, v, p])
        };
        let encoded = self.final_lbr.apply(tape, store, descriptor, phase);
        Ok(match pool {
            NeighborPool::Max => tape.max_pool(encoded, k),
            NeighborPool::Avg => tape.mean_pool(encoded, k),
        })
    }
}

/// One pyramid level: the sampled point subset and its feature value.
pub struct PyramidLevel<S: Scalar> {
    pub set: FeatureSet<S>,
    pub feat: Value,
}

pub struct PointPyramid<S: Scalar> {
    /// Levels ordered coarse-ward: index 0 holds N/2 points, the last N/2^L.
    pub levels: Vec<PyramidLevel<S>>,
}

pub struct PointEncoder {
    pub blocks: Vec<AggregationBlock>,
}

impl PointEncoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        widths: &[usize],
    ) -> Self {
        let mut blocks = Vec::with_capacity(widths.len());
        let mut in_features = 0;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push(AggregationBlock::new(
                store,
                rng,
                &format!("{name}.l{}", i + 1),
                in_features,
                w,
            ));
            in_features = w;
        }
        PointEncoder { blocks }
    }

    /// Build the feature pyramid for one frame sampled to N points.
    /// N must be divisible by 2^levels so every level halves exactly.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        frame: &FeatureSet<S>,
        cfg: &RunConfig,
        phase: Phase,
    ) -> Result<PointPyramid<S>> {
        let n = frame.len();
        if n % (1 << self.blocks.len()) != 0 {
            return Err(RvoError::BadSampleCount { n });
        }
        let mut levels: Vec<PyramidLevel<S>> = Vec::with_capacity(self.blocks.len());
        let mut prev_set = frame.clone();
        let mut prev_feat: Option<Value> = None;
        for (li, block) in self.blocks.iter().enumerate() {
            let m = n >> (li + 1);
            let picked = farthest_point_sample(&prev_set.coords, m)?;
            let centers = prev_set.subset(&picked);
            let k = cfg.group_k.min(prev_set.len());
            let neighbors = knn(&centers.coords, &prev_set.coords, k)?;
            // Offsets, velocity and intensity channels are plain data; only
            // the previous level's features carry gradients.
            let raw_only = FeatureSet {
                coords: prev_set.coords.clone(),
                raw5: prev_set.raw5.clone(),
                features: crate::nn::tensor::Tensor::zeros(prev_set.len(), 0),
            };
            let const_part = group(&raw_only, &neighbors, &centers.coords)?;
            let const_part = tape.constant(const_part);
            let grouped = match prev_feat {
                Some(f) => {
                    let gathered = tape.gather_rows(f, Rc::new(neighbors.flat_indices()));
                    tape.concat_cols(&[const_part, gathered])
                }
                None => const_part,
            };
            let feat = block.apply(tape, store, grouped, k, cfg.neighbor_pool, phase)?;
            prev_feat = Some(feat);
            prev_set = centers.clone();
            levels.push(PyramidLevel { set: centers, feat });
        }
        Ok(PointPyramid { levels })
    }
}
