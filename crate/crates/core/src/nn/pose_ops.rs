//! Differentiable rigid-motion operations, composed from tape primitives so
//! the chain rule covers rotation construction, point warping, pose
//! composition and Euler extraction without hand-derived Jacobians.
//!
//! Convention matches [`crate::geometry`]: intrinsic Z-Y-X Euler angles.

use crate::nn::tape::{Tape, Value};
use crate::scalar::Scalar;

/// Build the 3x3 rotation matrix for a `1 x 3` Euler-angle value.
pub fn rotation_from_euler<S: Scalar>(tape: &mut Tape<S>, eula: Value) -> Value {
    debug_assert_eq!(tape.value(eula).len(), 3);
    let sin = tape.sin(eula);
    let cos = tape.cos(eula);
    let sa = tape.slice_cols(sin, 0, 1);
    let sb = tape.slice_cols(sin, 1, 1);
    let sc = tape.slice_cols(sin, 2, 1);
    let ca = tape.slice_cols(cos, 0, 1);
    let cb = tape.slice_cols(cos, 1, 1);
    let cc = tape.slice_cols(cos, 2, 1);

    let ca_sb = tape.mul(ca, sb);
    let sa_sb = tape.mul(sa, sb);

    let r00 = tape.mul(ca, cb);
    let r01 = {
        let a = tape.mul(ca_sb, sc);
        let b = tape.mul(sa, cc);
        tape.sub(a, b)
    };
    let r02 = {
        let a = tape.mul(ca_sb, cc);
        let b = tape.mul(sa, sc);
        tape.add(a, b)
    };
    let r10 = tape.mul(sa, cb);
    let r11 = {
        let a = tape.mul(sa_sb, sc);
        let b = tape.mul(ca, cc);
        tape.add(a, b)
    };
    let r12 = {
        let a = tape.mul(sa_sb, cc);
        let b = tape.mul(ca, sc);
        tape.sub(a, b)
    };
    let r20 = tape.neg(sb);
    let r21 = tape.mul(cb, sc);
    let r22 = tape.mul(cb, cc);

    let flat = tape.concat_cols(&[r00, r01, r02, r10, r11, r12, r20, r21, r22]);
    tape.reshape(flat, 3, 3)
}

/// Recover `1 x 3` Euler angles from a `3 x 3` rotation value.
pub fn euler_from_rotation<S: Scalar>(tape: &mut Tape<S>, r: Value) -> Value {
    let flat = tape.reshape(r, 1, 9);
    let r00 = tape.slice_cols(flat, 0, 1);
    let r10 = tape.slice_cols(flat, 3, 1);
    let r20 = tape.slice_cols(flat, 6, 1);
    let r21 = tape.slice_cols(flat, 7, 1);
    let r22 = tape.slice_cols(flat, 8, 1);
    let yaw = tape.atan2(r10, r00);
    let neg_r20 = tape.neg(r20);
    let pitch = tape.asin(neg_r20);
    let roll = tape.atan2(r21, r22);
    tape.concat_cols(&[yaw, pitch, roll])
}

/// Warp `N x 3` points: `R(eula) * p + t` applied row-wise.
/// `eula` and `t` are `1 x 3` values; points may be a constant.
pub fn warp_points_value<S: Scalar>(
    tape: &mut Tape<S>,
    points: Value,
    eula: Value,
    t: Value,
) -> Value {
    let r = rotation_from_euler(tape, eula);
    let rt = tape.transpose(r);
    let rotated = tape.matmul(points, rt);
    tape.add_bias(rotated, t)
}

/// Compose a residual pose onto a previous estimate:
/// `R_out = R(delta) * R(prev)`, `t_out = R(delta) * t_prev + delta_t`.
/// Returns `(eula 1x3, t 1x3)`.
pub fn compose_pose_values<S: Scalar>(
    tape: &mut Tape<S>,
    delta_eula: Value,
    delta_t: Value,
    prev_eula: Value,
    prev_t: Value,
) -> (Value, Value) {
    let r_delta = rotation_from_euler(tape, delta_eula);
    let r_prev = rotation_from_euler(tape, prev_eula);
    let r_out = tape.matmul(r_delta, r_prev);
    let eula_out = euler_from_rotation(tape, r_out);
    let r_delta_t = tape.transpose(r_delta);
    let rotated_t = tape.matmul(prev_t, r_delta_t);
    let t_out = tape.add(rotated_t, delta_t);
    (eula_out, t_out)
}
