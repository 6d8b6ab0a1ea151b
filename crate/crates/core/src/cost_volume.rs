//! Patch-to-patch correlation between two fused point sets.
//!
//! Stage one pairs every first-frame point with its K1 nearest second-frame
//! points, encodes each pair (features of both sides plus the relative
//! position) through a shared trunk, and aggregates with direction-aware
//! softmax weights from the same trunk. Stage two smooths the per-point
//! embeddings over K2 first-frame neighbors with distance-conditioned
//! weights. The output is aligned to the first frame's point order.
//!
//! Second-frame coordinates arrive as a tape value so that, when they are
//! pose-warped upstream, correlation gradients reach the pose.

use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::error::{Result, RvoError};
use crate::geometry::Vec3;
use crate::nn::layers::{Linear, Mlp};
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Value};
use crate::nn::tensor::Tensor;
use crate::pointcloud::knn;
use crate::scalar::Scalar;

pub struct CostVolume {
    pair_trunk: Mlp,
    pair_score: Linear,
    smooth_score: Mlp,
    pub feat_width: usize,
    pub embed_width: usize,
    pub k1: usize,
    pub k2: usize,
}

impl CostVolume {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        feat_width: usize,
        embed_width: usize,
        k1: usize,
        k2: usize,
    ) -> Self {
        let pair_in = 2 * feat_width + 3;
        CostVolume {
            pair_trunk: Mlp::new(
                store,
                rng,
                &format!("{name}.pair"),
                &[pair_in, embed_width, embed_width],
            ),
            pair_score: Linear::new(store, rng, &format!("{name}.score"), embed_width, 1),
            smooth_score: Mlp::new(store, rng, &format!("{name}.smooth"), &[3, 16, 1]),
            feat_width,
            embed_width,
            k1,
            k2,
        }
    }

    /// Correlate `(pc1, feat1)` against `(pc2, feat2)`; `pc2_coords` is a
    /// `N2 x 3` tape value (possibly warped). Returns `N1 x embed_width`.
    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        pc1: &[Vec3<S>],
        feat1: Value,
        pc2_coords: Value,
        feat2: Value,
    ) -> Result<Value> {
        let n1 = pc1.len();
        let n2 = tape.value(pc2_coords).rows;
        if n1 == 0 || n2 == 0 {
            return Err(RvoError::EmptyCloud {
                context: "cost volume",
            });
        }
        let (f1, f2) = (tape.value(feat1), tape.value(feat2));
        if f1.cols != self.feat_width || f2.cols != self.feat_width {
            return Err(RvoError::shape(format!(
                "cost volume features {} / {} vs width {}",
                f1.cols, f2.cols, self.feat_width
            )));
        }
        if f1.rows != n1 || f2.rows != n2 {
            return Err(RvoError::shape(format!(
                "cost volume rows {}x{} vs clouds {n1}/{n2}",
                f1.rows, f2.rows
            )));
        }
        let k1 = self.k1.min(n2);
        let k2 = self.k2.min(n1);

        // Stage 1: cross-frame pairing on current (possibly warped) coords.
        let pc2_now: Vec<Vec3<S>> = {
            let t = tape.value(pc2_coords);
            (0..n2).map(|i| [t.get(i, 0), t.get(i, 1), t.get(i, 2)]).collect()
        };
        let nn12 = knn(pc1, &pc2_now, k1)?;
        let idx = Rc::new(nn12.flat_indices());
        let g_feat2 = tape.gather_rows(feat2, idx.clone());
        let g_xyz2 = tape.gather_rows(pc2_coords, idx);
        let mut centers = Tensor::zeros(n1 * k1, 3);
        for (i, c) in pc1.iter().enumerate() {
            for j in 0..k1 {
                centers.row_mut(i * k1 + j).copy_from_slice(c);
            }
        }
        let centers = tape.constant(centers);
        let rel = tape.sub(g_xyz2, centers);
        let f1_rep = tape.repeat_rows(feat1, k1);
        let pair_in = tape.concat_cols(&[f1_rep, g_feat2, rel]);
        let pair_embed = self.pair_trunk.apply(tape, store, pair_in);
        let scores = self.pair_score.apply(tape, store, pair_embed);
        let weights = tape.group_softmax(scores, k1);
        let weighted = tape.mul_col(pair_embed, weights);
        let stage1 = tape.sum_pool(weighted, k1);

        // Stage 2: smooth within the first frame.
        let nn11 = knn(pc1, pc1, k2)?;
        let idx2 = Rc::new(nn11.flat_indices());
        let mut rel2 = Tensor::zeros(n1 * k2, 3);
        for (i, c) in pc1.iter().enumerate() {
            for (j, &src) in nn11.idx[i].iter().enumerate() {
                let row = rel2.row_mut(i * k2 + j);
                for a in 0..3 {
                    row[a] = pc1[src][a] - c[a];
                }
            }
        }
        let rel2 = tape.constant(rel2);
        let s_scores = self.smooth_score.apply(tape, store, rel2);
        let s_weights = tape.group_softmax(s_scores, k2);
        let gathered = tape.gather_rows(stage1, idx2);
        let smoothed = tape.mul_col(gathered, s_weights);
        Ok(tape.sum_pool(smoothed, k2))
    }
}
