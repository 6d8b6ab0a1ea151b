//! Full network assembly: feature extraction and fusion for both frames,
//! initial correlation/confidence/pose at the coarsest level, then the
//! coarse-to-fine refinement loop — interpolate embeddings and confidence
//! to the next denser level, warp the second cloud by the current estimate,
//! re-correlate, refine, and compose the residual pose onto the estimate.
//! The per-level losses and their weighted total live here too.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{ImageBackbone, ImageFrame, ImagePyramid};
use crate::config::{ConfidenceFeature, RunConfig};
use crate::confidence::{velocity_feature, ConfidenceHead, PoseHead};
use crate::cost_volume::CostVolume;
use crate::error::Result;
use crate::fusion::{fuse_level, FusionLevel};
use crate::geometry::{Calibration, Pose, Vec3};
use crate::nn::layers::{Mlp, Phase};
use crate::nn::params::{ParamId, ParamStore};
use crate::nn::pose_ops::{compose_pose_values, warp_points_value};
use crate::nn::tape::{Tape, Value};
use crate::nn::tensor::Tensor;
use crate::pointcloud::{interpolation_weights, FeatureSet};
use crate::pointnet::PointEncoder;
use crate::scalar::Scalar;
use std::rc::Rc;

pub struct FrameInput<S: Scalar> {
    pub image: ImageFrame<S>,
    pub points: FeatureSet<S>,
}

/// Per-level network output, ordered fine to coarse (index 0 = level 1).
pub struct LevelOutput<S: Scalar> {
    pub eula: Value,
    pub t: Value,
    pub confidence: Value,
    pub coords: Vec<Vec3<S>>,
    pub raw5: Vec<[S; 5]>,
}

pub struct ForwardOutput<S: Scalar> {
    pub tape: Tape<S>,
    pub levels: Vec<LevelOutput<S>>,
}

impl<S: Scalar> ForwardOutput<S> {
    pub fn pose_at_level(&self, level_index: usize) -> Pose<S> {
        let lvl = &self.levels[level_index];
        let e = self.tape.value(lvl.eula);
        let t = self.tape.value(lvl.t);
        Pose::new(
            [e.data[0], e.data[1], e.data[2]],
            [t.data[0], t.data[1], t.data[2]],
        )
    }

    /// Finest-level pose, the network's odometry output.
    pub fn final_pose(&self) -> Pose<S> {
        self.pose_at_level(0)
    }
}

pub struct Network<S: Scalar> {
    pub cfg: RunConfig,
    pub store: ParamStore<S>,
    backbone: ImageBackbone,
    point_encoder: PointEncoder,
    fusion: Vec<FusionLevel>,
    cost: Vec<CostVolume>,
    conf_init: ConfidenceHead,
    conf_refine: Vec<ConfidenceHead>,
    embed_refine: Vec<Mlp>,
    pose_heads: Vec<PoseHead>,
    pub s_e: ParamId,
    pub s_t: ParamId,
}

impl<S: Scalar> Network<S> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let levels = cfg.levels;
        let backbone = ImageBackbone::new(&mut store, &mut rng, "image", &cfg.image_widths);
        let point_encoder = PointEncoder::new(&mut store, &mut rng, "points", &cfg.point_widths);
        let mut fusion = Vec::with_capacity(levels);
        let mut cost = Vec::with_capacity(levels);
        let mut pose_heads = Vec::with_capacity(levels);
        for (i, &w) in cfg.point_widths.iter().enumerate() {
            fusion.push(FusionLevel::new(
                &mut store,
                &mut rng,
                &format!("fusion.l{}", i + 1),
                w,
                cfg.fusion_samples,
                cfg.fusion_heads,
            ));
            cost.push(CostVolume::new(
                &mut store,
                &mut rng,
                &format!("cost.l{}", i + 1),
                2 * w,
                cfg.embed_width,
                cfg.cost_k1,
                cfg.cost_k2,
            ));
            pose_heads.push(PoseHead::new(
                &mut store,
                &mut rng,
                &format!("pose.l{}", i + 1),
                cfg.embed_width,
            ));
        }
        let conf_width = |level_idx: usize| match cfg.confidence_feature {
            ConfidenceFeature::Pyramid => cfg.point_widths[level_idx],
            ConfidenceFeature::Fused => 2 * cfg.point_widths[level_idx],
        };
        let conf_init = ConfidenceHead::new(
            &mut store,
            &mut rng,
            &format!("conf.l{levels}"),
            conf_width(levels - 1) + 2,
        );
        let mut conf_refine = Vec::with_capacity(levels - 1);
        let mut embed_refine = Vec::with_capacity(levels - 1);
        for i in 0..levels - 1 {
            conf_refine.push(ConfidenceHead::new(
                &mut store,
                &mut rng,
                &format!("conf.l{}", i + 1),
                conf_width(i) + 2 + 1,
            ));
            embed_refine.push(Mlp::new(
                &mut store,
                &mut rng,
                &format!("embed.l{}", i + 1),
                &[2 * cfg.embed_width, cfg.embed_width, cfg.embed_width],
            ));
        }
        let s_e = store.trainable("loss.s_e", Tensor::scalar(S::from_f64(cfg.s_e_init)));
        let s_t = store.trainable("loss.s_t", Tensor::scalar(S::from_f64(cfg.s_t_init)));
        Ok(Network {
            cfg,
            store,
            backbone,
            point_encoder,
            fusion,
            cost,
            conf_init,
            conf_refine,
            embed_refine,
            pose_heads,
            s_e,
            s_t,
        })
    }

    fn fused_levels(
        &mut self,
        tape: &mut Tape<S>,
        frame: &FrameInput<S>,
        images: &ImagePyramid,
        calib: &Calibration<S>,
        phase: Phase,
    ) -> Result<(Vec<crate::pointnet::PyramidLevel<S>>, Vec<Value>)> {
        let pyramid =
            self.point_encoder
                .forward(tape, &mut self.store, &frame.points, &self.cfg, phase)?;
        let mut fused = Vec::with_capacity(self.cfg.levels);
        for (idx, level) in pyramid.levels.iter().enumerate() {
            let out = fuse_level(
                tape,
                &mut self.store,
                &self.fusion[idx],
                &level.set.coords,
                level.feat,
                images.levels[idx],
                calib,
                frame.image.width,
                frame.image.height,
                idx + 1,
                &self.cfg,
                phase,
            )?;
            fused.push(out.fused);
        }
        Ok((pyramid.levels, fused))
    }

    fn confidence_input(&self, pyramid_feat: Value, fused: Value) -> Value {
        match self.cfg.confidence_feature {
            ConfidenceFeature::Pyramid => pyramid_feat,
            ConfidenceFeature::Fused => fused,
        }
    }

    /// Run the full two-frame forward pass. Returns per-level poses and
    /// confidences ordered fine to coarse.
    pub fn forward(
        &mut self,
        frame1: &FrameInput<S>,
        frame2: &FrameInput<S>,
        calib: &Calibration<S>,
        phase: Phase,
    ) -> Result<ForwardOutput<S>> {
        let mut tape = Tape::new();
        let images1 = self.backbone.forward(
            &mut tape,
            &mut self.store,
            &frame1.image,
            &self.cfg.image_mean,
            &self.cfg.image_std,
            phase,
        );
        let images2 = self.backbone.forward(
            &mut tape,
            &mut self.store,
            &frame2.image,
            &self.cfg.image_mean,
            &self.cfg.image_std,
            phase,
        );
        let (levels1, fused1) = self.fused_levels(&mut tape, frame1, &images1, calib, phase)?;
        let (levels2, fused2) = self.fused_levels(&mut tape, frame2, &images2, calib, phase)?;

        let last = self.cfg.levels - 1;
        let vel: Vec<Tensor<S>> = levels1
            .iter()
            .map(|l| velocity_feature(&l.set.raw5))
            .collect();

        // Initial estimate at the coarsest level.
        let pc2_coarse = tape.constant(coords_tensor(&levels2[last].set.coords));
        let e_init = self.cost[last].apply(
            &mut tape,
            &self.store,
            &levels1[last].set.coords,
            fused1[last],
            pc2_coarse,
            fused2[last],
        )?;
        let vel_init = tape.constant(vel[last].clone());
        let conf_feat = self.confidence_input(levels1[last].feat, fused1[last]);
        let c_init = self
            .conf_init
            .apply(&mut tape, &self.store, &[conf_feat, vel_init])?;
        let (mut eula, mut t) =
            self.pose_heads[last].apply(&mut tape, &self.store, e_init, c_init)?;

        let mut outputs: Vec<LevelOutput<S>> = Vec::with_capacity(self.cfg.levels);
        outputs.push(LevelOutput {
            eula,
            t,
            confidence: c_init,
            coords: levels1[last].set.coords.clone(),
            raw5: levels1[last].set.raw5.clone(),
        });

        let mut e_prev = e_init;
        let mut c_prev = c_init;
        for idx in (0..last).rev() {
            // Sparse-to-dense interpolation of the coarser embedding and
            // confidence onto this level's first-frame points.
            let sparse = &levels1[idx + 1].set.coords;
            let dense = &levels1[idx].set.coords;
            let k = self.cfg.interp_k.min(sparse.len());
            let (neighbors, weights) = interpolation_weights(sparse, dense, k)?;
            let flat = Rc::new(neighbors.flat_indices());
            let w_flat = Tensor::new(
                dense.len() * k,
                1,
                weights.iter().flatten().copied().collect(),
            );
            let w_flat = tape.constant(w_flat);
            let e_gathered = tape.gather_rows(e_prev, flat.clone());
            let e_weighted = tape.mul_col(e_gathered, w_flat);
            let e_knn = tape.sum_pool(e_weighted, k);
            let c_gathered = tape.gather_rows(c_prev, flat);
            let c_weighted = tape.mul_col(c_gathered, w_flat);
            let c_knn = tape.sum_pool(c_weighted, k);

            // Warp the second cloud by the current estimate and
            // re-correlate against it.
            let pc2_const = tape.constant(coords_tensor(&levels2[idx].set.coords));
            let warped = warp_points_value(&mut tape, pc2_const, eula, t);
            let e_coarse = self.cost[idx].apply(
                &mut tape,
                &self.store,
                &levels1[idx].set.coords,
                fused1[idx],
                warped,
                fused2[idx],
            )?;
            let e_cat = tape.concat_cols(&[e_knn, e_coarse]);
            let e_level = self.embed_refine[idx].apply(&mut tape, &self.store, e_cat);

            let vel_level = tape.constant(vel[idx].clone());
            let conf_feat = self.confidence_input(levels1[idx].feat, fused1[idx]);
            let c_level = self.conf_refine[idx].apply(
                &mut tape,
                &self.store,
                &[conf_feat, vel_level, c_knn],
            )?;

            let (d_eula, d_t) =
                self.pose_heads[idx].apply(&mut tape, &self.store, e_level, c_level)?;
            let (eula_new, t_new) = compose_pose_values(&mut tape, d_eula, d_t, eula, t);
            eula = eula_new;
            t = t_new;
            e_prev = e_level;
            c_prev = c_level;
            outputs.push(LevelOutput {
                eula,
                t,
                confidence: c_level,
                coords: levels1[idx].set.coords.clone(),
                raw5: levels1[idx].set.raw5.clone(),
            });
        }
        outputs.reverse();
        Ok(ForwardOutput {
            tape,
            levels: outputs,
        })
    }

    /// Per-level supervision: L2 gaps in rotation and translation, balanced
    /// by the learnable log-scale parameters.
    pub fn level_loss(
        &self,
        tape: &mut Tape<S>,
        pred_eula: Value,
        pred_t: Value,
        gt: &Pose<S>,
    ) -> Value {
        let s_e = tape.param(&self.store, self.s_e);
        let s_t = tape.param(&self.store, self.s_t);
        let gt_e = tape.constant(Tensor::new(1, 3, gt.eula.to_vec()));
        let gt_t = tape.constant(Tensor::new(1, 3, gt.t.to_vec()));
        let l_e = l2_norm(tape, pred_eula, gt_e);
        let l_t = l2_norm(tape, pred_t, gt_t);
        let neg_se = tape.neg(s_e);
        let exp_se = tape.exp(neg_se);
        let term_e = tape.mul(l_e, exp_se);
        let term_e = tape.add(term_e, s_e);
        let neg_st = tape.neg(s_t);
        let exp_st = tape.exp(neg_st);
        let term_t = tape.mul(l_t, exp_st);
        let term_t = tape.add(term_t, s_t);
        tape.add(term_e, term_t)
    }

    /// Weighted sum of the per-level losses, ordered fine to coarse.
    pub fn total_loss(&self, tape: &mut Tape<S>, per_level: &[Value]) -> Value {
        assert_eq!(per_level.len(), self.cfg.level_weights.len());
        let mut acc: Option<Value> = None;
        for (lvl, &w) in per_level.iter().zip(&self.cfg.level_weights) {
            let scaled = tape.scale(*lvl, S::from_f64(w));
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled),
                None => scaled,
            });
        }
        acc.expect("at least one level")
    }

    /// Forward plus multi-level loss against a ground-truth relative pose.
    pub fn forward_with_loss(
        &mut self,
        frame1: &FrameInput<S>,
        frame2: &FrameInput<S>,
        calib: &Calibration<S>,
        gt: &Pose<S>,
        phase: Phase,
    ) -> Result<(ForwardOutput<S>, Value, Vec<f64>)> {
        let mut out = self.forward(frame1, frame2, calib, phase)?;
        let mut per_level = Vec::with_capacity(out.levels.len());
        for lvl in &out.levels {
            per_level.push(self.level_loss(&mut out.tape, lvl.eula, lvl.t, gt));
        }
        let total = self.total_loss(&mut out.tape, &per_level);
        let level_values = per_level
            .iter()
            .map(|&v| out.tape.value(v).item().as_f64())
            .collect();
        Ok((out, total, level_values))
    }
}

fn coords_tensor<S: Scalar>(coords: &[Vec3<S>]) -> Tensor<S> {
    Tensor::new(
        coords.len(),
        3,
        coords.iter().flatten().copied().collect(),
    )
}

fn l2_norm<S: Scalar>(tape: &mut Tape<S>, a: Value, b: Value) -> Value {
    let d = tape.sub(a, b);
    let sq = tape.mul(d, d);
    let s = tape.sum_all(sq);
    tape.sqrt(s)
}
