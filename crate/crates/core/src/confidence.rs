//! Velocity-guided point confidence and the pose regression heads.
//!
//! The volatility of each point's radial velocity relative to the frame
//! median is a direct cue for dynamic objects: most points see the static
//! world, so the median absolute radial velocity tracks ego motion and
//! outliers from it mark movers. Confidence is learned only through the
//! pose loss; there is no direct supervision.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RvoError};
use crate::nn::layers::{Linear, Mlp};
use crate::nn::params::ParamStore;
use crate::nn::tape::{Tape, Value};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Per-point velocity descriptor: `|rrv|` and `||rrv| - median(|rrv|)|`.
/// Even point counts use the lower median so the result is deterministic.
pub fn velocity_feature<S: Scalar>(raw5: &[[S; 5]]) -> Tensor<S> {
    let n = raw5.len();
    assert!(n >= 1, "velocity feature needs at least one point");
    let mut abs: Vec<S> = raw5.iter().map(|p| p[3].abs()).collect();
    let mut sorted = abs.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[(n - 1) / 2];
    let mut out = Tensor::zeros(n, 2);
    for (i, a) in abs.drain(..).enumerate() {
        out.set(i, 0, a);
        out.set(i, 1, (a - median).abs());
    }
    out
}

/// Sigmoid confidence head over point features joined with the velocity
/// descriptor (and, during refinement, the interpolated coarse confidence).
pub struct ConfidenceHead {
    mlp: Mlp,
    in_dim: usize,
}

impl ConfidenceHead {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
    ) -> Self {
        let hidden = (in_dim / 2).max(8);
        ConfidenceHead {
            mlp: Mlp::new(store, rng, name, &[in_dim, hidden, 1]),
            in_dim,
        }
    }

    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        parts: &[Value],
    ) -> Result<Value> {
        let joined = tape.concat_cols(parts);
        let width = tape.value(joined).cols;
        if width != self.in_dim {
            return Err(RvoError::shape(format!(
                "confidence input width {width}, expected {}",
                self.in_dim
            )));
        }
        let logits = self.mlp.apply(tape, store, joined);
        Ok(tape.sigmoid(logits))
    }
}

/// Two separate regression heads over the confidence-weighted embedding.
pub struct PoseHead {
    rot: Mlp,
    trans: Mlp,
}

impl PoseHead {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        embed_width: usize,
    ) -> Self {
        let hidden = (embed_width / 2).max(16);
        // Zero-initialized output layers: every level starts by predicting
        // the identity residual, so refinement only moves away from the
        // coarser estimate once the correlation signal asks for it.
        let make = |store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, prefix: String| {
            let trunk = Linear::new(store, rng, &format!("{prefix}.0"), embed_width, hidden);
            let out = Linear::zeroed(store, &format!("{prefix}.1"), hidden, 3);
            Mlp {
                layers: vec![trunk, out],
            }
        };
        PoseHead {
            rot: make(store, rng, format!("{name}.rot")),
            trans: make(store, rng, format!("{name}.trans")),
        }
    }

    /// Average-pool the confidence-weighted embedding (plain mean over
    /// points, not normalized by the confidence sum) and regress rotation
    /// and translation separately. Returns `(eula 1x3, t 1x3)`.
    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &ParamStore<S>,
        embedding: Value,
        confidence: Value,
    ) -> Result<(Value, Value)> {
        let e = tape.value(embedding);
        let c = tape.value(confidence);
        if e.rows != c.rows || c.cols != 1 {
            return Err(RvoError::shape(format!(
                "pose head: embedding {}x{} vs confidence {}x{}",
                e.rows, e.cols, c.rows, c.cols
            )));
        }
        let n = e.rows;
        let weighted = tape.mul_col(embedding, confidence);
        let pooled = tape.mean_pool(weighted, n);
        let eula = self.rot.apply(tape, store, pooled);
        let t = self.trans.apply(tape, store, pooled);
        Ok((eula, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn velocity_feature_all_static() {
        let raw = vec![[0.0f64, 0.0, 0.0, 0.0, 0.5]; 4];
        let v = velocity_feature(&raw);
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn velocity_feature_hand_median() {
        let raw = vec![
            [0.0f64, 0.0, 0.0, -2.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 2.0, 0.0],
        ];
        let v = velocity_feature(&raw);
        assert_eq!(v.row(0), &[2.0, 0.0]);
        assert_eq!(v.row(1), &[0.0, 2.0]);
        assert_eq!(v.row(2), &[2.0, 0.0]);
    }

    #[test]
    fn velocity_feature_single_point() {
        let v = velocity_feature(&[[0.0f64, 0.0, 0.0, -3.0, 0.0]]);
        assert_eq!(v.row(0), &[3.0, 0.0]);
    }

    #[test]
    fn velocity_feature_even_count_uses_lower_median() {
        let raw = vec![
            [0.0f64, 0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 2.0, 0.0],
            [0.0, 0.0, 0.0, 3.0, 0.0],
            [0.0, 0.0, 0.0, 4.0, 0.0],
        ];
        let v = velocity_feature(&raw);
        // lower median of {1,2,3,4} is 2
        assert_eq!(v.get(0, 1), 1.0);
        assert_eq!(v.get(1, 1), 0.0);
    }

    #[test]
    fn zeroed_final_layer_gives_half_confidence() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let head = ConfidenceHead::new(&mut store, &mut rng, "conf", 6);
        // Zero the final layer so the logit is exactly zero.
        let final_linear = head.mlp.layers.last().unwrap();
        store.get_mut(final_linear.w).data.fill(0.0);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::filled(5, 4, 0.3));
        let v = tape.constant(Tensor::filled(5, 2, 1.0));
        let c = head.apply(&mut tape, &store, &[f, v]).unwrap();
        for &x in &tape.value(c).data {
            assert_eq!(x, 0.5);
        }
    }

    #[test]
    fn confidence_stays_in_open_unit_interval_and_is_pointwise() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let head = ConfidenceHead::new(&mut store, &mut rng, "conf", 4);
        let mut tape = Tape::new();
        let rows: Vec<[f64; 2]> = (0..6).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]).collect();
        let f = tape.constant(Tensor::from_rows(&rows));
        let v = tape.constant(Tensor::from_rows(
            &rows.iter().map(|r| [r[1].abs(), r[0].abs()]).collect::<Vec<_>>(),
        ));
        let c = head.apply(&mut tape, &store, &[f, v]).unwrap();
        let vals = tape.value(c).data.clone();
        assert!(vals.iter().all(|&x| x > 0.0 && x < 1.0));
        // Duplicating a row duplicates its confidence: pointwise map.
        let mut rows2 = rows.clone();
        rows2.push(rows[2]);
        let f2 = tape.constant(Tensor::from_rows(&rows2));
        let v2 = tape.constant(Tensor::from_rows(
            &rows2.iter().map(|r| [r[1].abs(), r[0].abs()]).collect::<Vec<_>>(),
        ));
        let c2 = head.apply(&mut tape, &store, &[f2, v2]).unwrap();
        assert!((tape.value(c2).get(6, 0) - vals[2]).abs() < 1e-12);
    }

    #[test]
    fn zero_confidence_pools_to_bias_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let head = PoseHead::new(&mut store, &mut rng, "pose", 8);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::filled(4, 8, 1.7));
        let c = tape.constant(Tensor::zeros(4, 1));
        let (eula, t) = head.apply(&mut tape, &store, e, c).unwrap();
        // pooled = 0, so the output is the bias chain; biases are zero-init.
        assert!(tape.value(eula).data.iter().all(|&v| v == 0.0));
        assert!(tape.value(t).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_confidence_scales_pooled_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let e_data = Tensor::new(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut tape = Tape::<f64>::new();
        let e = tape.constant(e_data);
        let c1 = tape.constant(Tensor::filled(5, 1, 1.0));
        let ck = tape.constant(Tensor::filled(5, 1, 0.25));
        let w1 = tape.mul_col(e, c1);
        let p1 = tape.mean_pool(w1, 5);
        let wk = tape.mul_col(e, ck);
        let pk = tape.mean_pool(wk, 5);
        for (a, b) in tape.value(p1).data.iter().zip(&tape.value(pk).data) {
            assert!((a * 0.25 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_head_is_permutation_invariant() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let head = PoseHead::new(&mut store, &mut rng, "pose", 6);
        let e_data = Tensor::new(7, 6, (0..42).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let c_data = Tensor::new(7, 1, (0..7).map(|_| rng.gen_range(0.1..0.9)).collect());
        let mut perm: Vec<usize> = (0..7).collect();
        for i in (1..7).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        let mut e_perm = Tensor::zeros(7, 6);
        let mut c_perm = Tensor::zeros(7, 1);
        for (r, &i) in perm.iter().enumerate() {
            e_perm.row_mut(r).copy_from_slice(e_data.row(i));
            c_perm.row_mut(r).copy_from_slice(c_data.row(i));
        }
        let mut tape = Tape::new();
        let (e1, c1) = (tape.constant(e_data), tape.constant(c_data));
        let (ep, cp) = (tape.constant(e_perm), tape.constant(c_perm));
        let (r1, t1) = head.apply(&mut tape, &store, e1, c1).unwrap();
        let (r2, t2) = head.apply(&mut tape, &store, ep, cp).unwrap();
        for i in 0..3 {
            assert!((tape.value(r1).data[i] - tape.value(r2).data[i]).abs() < 1e-6);
            assert!((tape.value(t1).data[i] - tape.value(t2).data[i]).abs() < 1e-6);
        }
    }
}
