//! Rigid-motion algebra shared by every other module: Euler/rotation
//! conversions, pose composition, point warping and pinhole projection.
//!
//! Euler convention is intrinsic Z-Y-X: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`,
//! angles in radians. The same convention is used for supervision targets and
//! network outputs, so any self-consistent choice is valid; this one matches
//! common odometry tooling.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RvoError};
use crate::scalar::Scalar;

/// Minimum camera-frame depth for a projection to count as valid.
/// Prevents division blow-up near the image plane.
pub const Z_MIN: f64 = 0.1;

pub type Vec3<S> = [S; 3];
pub type Mat3<S> = [[S; 3]; 3];
pub type Mat4<S> = [[S; 4]; 4];

/// Rotation as Euler angles plus translation. The network's per-level output
/// and the ground-truth supervision unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<S: Scalar> {
    /// Euler angles (yaw, pitch, roll) in radians, intrinsic Z-Y-X.
    pub eula: Vec3<S>,
    /// Translation in meters.
    pub t: Vec3<S>,
}

impl<S: Scalar> Pose<S> {
    pub fn new(eula: Vec3<S>, t: Vec3<S>) -> Self {
        Pose { eula, t }
    }

    pub fn identity() -> Self {
        Pose {
            eula: [S::zero(); 3],
            t: [S::zero(); 3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.eula.iter().chain(self.t.iter()).all(|v| v.is_finite())
    }

    pub fn to_rigid(&self) -> RigidTransform<S> {
        RigidTransform {
            r: euler_to_rotation(&self.eula),
            t: self.t,
        }
    }

    pub fn to_homogeneous(&self) -> Mat4<S> {
        self.to_rigid().to_homogeneous()
    }
}

/// Rotation matrix plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<S: Scalar> {
    pub r: Mat3<S>,
    pub t: Vec3<S>,
}

impl<S: Scalar> RigidTransform<S> {
    pub fn identity() -> Self {
        RigidTransform {
            r: mat3_identity(),
            t: [S::zero(); 3],
        }
    }

    pub fn to_homogeneous(&self) -> Mat4<S> {
        let mut m = mat4_identity();
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = self.r[i][j];
            }
            m[i][3] = self.t[i];
        }
        m
    }

    pub fn from_homogeneous(m: &Mat4<S>) -> Self {
        let mut r = [[S::zero(); 3]; 3];
        let mut t = [S::zero(); 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = m[i][j];
            }
            t[i] = m[i][3];
        }
        RigidTransform { r, t }
    }

    pub fn inverse(&self) -> Self {
        let rt = mat3_transpose(&self.r);
        let t = mat3_mul_vec(&rt, &self.t);
        RigidTransform {
            r: rt,
            t: [-t[0], -t[1], -t[2]],
        }
    }

    pub fn compose(&self, other: &RigidTransform<S>) -> Self {
        RigidTransform {
            r: mat3_mul(&self.r, &other.r),
            t: vec3_add(&mat3_mul_vec(&self.r, &other.t), &self.t),
        }
    }

    pub fn apply(&self, p: &Vec3<S>) -> Vec3<S> {
        vec3_add(&mat3_mul_vec(&self.r, p), &self.t)
    }

    /// Max-norm residual of `R^T R - I`.
    pub fn orthonormality_residual(&self) -> S {
        let rt_r = mat3_mul(&mat3_transpose(&self.r), &self.r);
        let mut res = S::zero();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { S::one() } else { S::zero() };
                res = res.max((rt_r[i][j] - target).abs());
            }
        }
        res
    }
}

/// Camera intrinsics and the radar-to-camera extrinsic transform.
#[derive(Debug, Clone, Copy)]
pub struct Calibration<S: Scalar> {
    /// 3x3 upper-triangular intrinsic matrix, pixels.
    pub k: Mat3<S>,
    /// Rigid transform mapping radar-frame points into the camera frame.
    pub t_cr: RigidTransform<S>,
}

/// Serialized calibration file: `K` as 9 and `T_cr` as 16 row-major floats.
#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    #[serde(rename = "K")]
    k: Vec<f64>,
    #[serde(rename = "T_cr")]
    t_cr: Vec<f64>,
}

impl<S: Scalar> Calibration<S> {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(RvoError::MissingCalibration(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        let file: CalibrationFile = serde_json::from_str(&text)?;
        if file.k.len() != 9 || file.t_cr.len() != 16 {
            return Err(RvoError::DataFormatError(format!(
                "calibration {} must hold 9 K floats and 16 T_cr floats",
                path.display()
            )));
        }
        let mut k = [[S::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                k[i][j] = S::from_f64(file.k[i * 3 + j]);
            }
        }
        let mut m = mat4_identity();
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = S::from_f64(file.t_cr[i * 4 + j]);
            }
        }
        Ok(Calibration {
            k,
            t_cr: RigidTransform::from_homogeneous(&m),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut k = Vec::with_capacity(9);
        for i in 0..3 {
            for j in 0..3 {
                k.push(self.k[i][j].as_f64());
            }
        }
        let m = self.t_cr.to_homogeneous();
        let mut t_cr = Vec::with_capacity(16);
        for i in 0..4 {
            for j in 0..4 {
                t_cr.push(m[i][j].as_f64());
            }
        }
        let file = CalibrationFile { k, t_cr };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }
}

/// Build the rotation matrix for intrinsic Z-Y-X Euler angles.
pub fn euler_to_rotation<S: Scalar>(eula: &Vec3<S>) -> Mat3<S> {
    let (sa, ca) = eula[0].sin_cos();
    let (sb, cb) = eula[1].sin_cos();
    let (sc, cc) = eula[2].sin_cos();
    [
        [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
        [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
        [-sb, cb * sc, cb * cc],
    ]
}

/// Recover Z-Y-X Euler angles from a rotation matrix.
///
/// In the gimbal-lock branch (`|R[2][0]| > 1 - 1e-7`) only `yaw - roll` (or
/// `yaw + roll`) is determined; the `roll = 0` representative is returned.
pub fn rotation_to_euler<S: Scalar>(r: &Mat3<S>) -> Result<Vec3<S>> {
    let rt = RigidTransform {
        r: *r,
        t: [S::zero(); 3],
    };
    let residual = rt.orthonormality_residual().as_f64();
    if residual > 1e-5 {
        return Err(RvoError::NonOrthonormalInput { residual });
    }
    let gimbal = S::from_f64(1.0 - 1e-7);
    if r[2][0].abs() > gimbal {
        let pitch = if r[2][0] <= -S::one() {
            S::from_f64(std::f64::consts::FRAC_PI_2)
        } else if r[2][0] >= S::one() {
            S::from_f64(-std::f64::consts::FRAC_PI_2)
        } else {
            (-r[2][0]).asin()
        };
        let yaw = (-r[0][1]).atan2(r[1][1]);
        return Ok([yaw, pitch, S::zero()]);
    }
    let yaw = r[1][0].atan2(r[0][0]);
    let pitch = (-r[2][0]).asin();
    let roll = r[2][1].atan2(r[2][2]);
    Ok([yaw, pitch, roll])
}

/// Apply `R(pose.eula) * p + pose.t` to every point.
pub fn warp_points<S: Scalar>(points: &[Vec3<S>], pose: &Pose<S>) -> Vec<Vec3<S>> {
    let rt = pose.to_rigid();
    points.iter().map(|p| rt.apply(p)).collect()
}

/// Compose two poses: `R_out = R_outer * R_inner`,
/// `t_out = R_outer * t_inner + t_outer`.
pub fn compose_pose<S: Scalar>(outer: &Pose<S>, inner: &Pose<S>) -> Pose<S> {
    let composed = outer.to_rigid().compose(&inner.to_rigid());
    let eula = rotation_to_euler(&composed.r).expect("composition of rotations stays orthonormal");
    Pose {
        eula,
        t: composed.t,
    }
}

/// Pinhole projection of radar-frame points.
///
/// Returns continuous pixel coordinates, camera-frame depth and a validity
/// flag per point. Invalid points are flagged, never dropped, so downstream
/// fusion keeps index alignment.
pub fn project_points<S: Scalar>(
    points: &[Vec3<S>],
    calib: &Calibration<S>,
    width: usize,
    height: usize,
) -> (Vec<[S; 2]>, Vec<S>, Vec<bool>) {
    let z_min = S::from_f64(Z_MIN);
    let w_max = S::from_usize(width) - S::one();
    let h_max = S::from_usize(height) - S::one();
    let mut uv = Vec::with_capacity(points.len());
    let mut depth = Vec::with_capacity(points.len());
    let mut valid = Vec::with_capacity(points.len());
    for p in points {
        let c = calib.t_cr.apply(p);
        let z = c[2];
        let kp = mat3_mul_vec(&calib.k, &c);
        let (u, v) = if z.abs() > S::epsilon() {
            (kp[0] / z, kp[1] / z)
        } else {
            (S::zero(), S::zero())
        };
        let inside = u >= S::zero() && u <= w_max && v >= S::zero() && v <= h_max;
        uv.push([u, v]);
        depth.push(z);
        valid.push(z > z_min && inside);
    }
    (uv, depth, valid)
}

/// Rotation angle in radians via the trace formula, clamped for safety near 0.
pub fn rotation_angle<S: Scalar>(r: &Mat3<S>) -> S {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let two = S::from_f64(2.0);
    let cos = ((tr - S::one()) / two).max(-S::one()).min(S::one());
    cos.acos()
}

// Small fixed-size helpers. Kept local: nothing here warrants a linear
// algebra dependency.

pub fn mat3_identity<S: Scalar>() -> Mat3<S> {
    let mut m = [[S::zero(); 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = S::one();
    }
    m
}

pub fn mat4_identity<S: Scalar>() -> Mat4<S> {
    let mut m = [[S::zero(); 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = S::one();
    }
    m
}

pub fn mat3_mul<S: Scalar>(a: &Mat3<S>, b: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = S::zero();
            for (k, bk) in b.iter().enumerate() {
                acc = acc + a[i][k] * bk[j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn mat4_mul<S: Scalar>(a: &Mat4<S>, b: &Mat4<S>) -> Mat4<S> {
    let mut out = [[S::zero(); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = S::zero();
            for (k, bk) in b.iter().enumerate() {
                acc = acc + a[i][k] * bk[j];
            }
            out[i][j] = acc;
        }
    }
    out
}

pub fn mat3_transpose<S: Scalar>(a: &Mat3<S>) -> Mat3<S> {
    let mut out = [[S::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn mat3_mul_vec<S: Scalar>(a: &Mat3<S>, v: &Vec3<S>) -> Vec3<S> {
    let mut out = [S::zero(); 3];
    for i in 0..3 {
        out[i] = a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2];
    }
    out
}

pub fn mat3_det<S: Scalar>(a: &Mat3<S>) -> S {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn vec3_add<S: Scalar>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn vec3_sub<S: Scalar>(a: &Vec3<S>, b: &Vec3<S>) -> Vec3<S> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn vec3_norm<S: Scalar>(a: &Vec3<S>) -> S {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn vec3_dot<S: Scalar>(a: &Vec3<S>, b: &Vec3<S>) -> S {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Write a trajectory as one `3x4 [R|t]` row-major line per pose.
pub fn write_trajectory<S: Scalar>(path: &Path, poses: &[Mat4<S>]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in poses {
        let mut fields = Vec::with_capacity(12);
        for row in m.iter().take(3) {
            for v in row.iter() {
                fields.push(format!("{:.16e}", v.as_f64()));
            }
        }
        writeln!(file, "{}", fields.join(" "))?;
    }
    Ok(())
}

/// Parse a trajectory file of 12-float `[R|t]` lines into 4x4 transforms.
pub fn read_trajectory<S: Scalar>(path: &Path) -> Result<Vec<Mat4<S>>> {
    let file = std::fs::File::open(path).map_err(|e| RvoError::ParseFailure {
        path: path.to_path_buf(),
        line: 0,
        reason: e.to_string(),
    })?;
    let reader = BufReader::new(file);
    let mut poses = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| RvoError::ParseFailure {
                    path: path.to_path_buf(),
                    line: line_no,
                    reason: format!("bad float {tok:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != 12 {
            return Err(RvoError::ParseFailure {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("expected 12 fields, found {}", vals.len()),
            });
        }
        let mut m = mat4_identity();
        for i in 0..3 {
            for j in 0..4 {
                m[i][j] = S::from_f64(vals[i * 4 + j]);
            }
        }
        poses.push(m);
    }
    Ok(poses)
}
