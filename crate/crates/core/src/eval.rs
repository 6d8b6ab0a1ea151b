//! Trajectory assembly and odometry error metrics: segment-averaged
//! translational/rotational RMSE over 20-160 m sub-paths and relative pose
//! error at a fixed frame interval.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, RvoError};
use crate::geometry::{
    mat4_mul, read_trajectory, rotation_angle, vec3_norm, write_trajectory, Mat4, Pose,
    RigidTransform,
};
use crate::scalar::Scalar;

/// Segment lengths evaluated, meters.
pub const SEGMENT_LENGTHS: [f64; 8] = [20.0, 40.0, 60.0, 80.0, 100.0, 120.0, 140.0, 160.0];

/// Ordered absolute poses with cumulative arclength per frame.
#[derive(Debug, Clone)]
pub struct Trajectory<S: Scalar> {
    pub poses: Vec<Mat4<S>>,
    pub arclength: Vec<S>,
}

impl<S: Scalar> Trajectory<S> {
    /// Chain relative poses into absolute transforms starting from identity.
    pub fn assemble(relatives: &[Pose<S>]) -> Self {
        let mut poses = Vec::with_capacity(relatives.len() + 1);
        let mut arclength = Vec::with_capacity(relatives.len() + 1);
        poses.push(crate::geometry::mat4_identity());
        arclength.push(S::zero());
        let mut acc = S::zero();
        for rel in relatives {
            let prev = *poses.last().unwrap();
            poses.push(mat4_mul(&prev, &rel.to_homogeneous()));
            acc = acc + vec3_norm(&rel.t);
            arclength.push(acc);
        }
        Trajectory { poses, arclength }
    }

    pub fn from_poses(poses: Vec<Mat4<S>>) -> Self {
        let mut arclength = Vec::with_capacity(poses.len());
        let mut acc = S::zero();
        arclength.push(S::zero());
        for i in 1..poses.len() {
            let d = [
                poses[i][0][3] - poses[i - 1][0][3],
                poses[i][1][3] - poses[i - 1][1][3],
                poses[i][2][3] - poses[i - 1][2][3],
            ];
            acc = acc + vec3_norm(&d);
            arclength.push(acc);
        }
        Trajectory { poses, arclength }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_poses(read_trajectory(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_trajectory(path, &self.poses)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    fn rigid(&self, i: usize) -> RigidTransform<S> {
        RigidTransform::from_homogeneous(&self.poses[i])
    }

    /// Relative motion from frame `i` to frame `j`.
    fn relative(&self, i: usize, j: usize) -> RigidTransform<S> {
        self.rigid(i).inverse().compose(&self.rigid(j))
    }

    /// XY positions, for plotting.
    pub fn xy(&self) -> Vec<(f64, f64)> {
        self.poses
            .iter()
            .map(|m| (m[0][3].as_f64(), m[1][3].as_f64()))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LengthRow {
    pub length_m: f64,
    pub available: bool,
    pub segments: usize,
    /// Mean translational error over segments of this length, m/m.
    pub t_rel: Option<f64>,
    /// Mean rotational error, deg/m.
    pub r_rel: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentReport {
    /// Average translational RMSE across available lengths, m/m.
    pub t_rel: f64,
    /// Same value scaled to percent, for table comparison.
    pub t_rel_percent: f64,
    /// Average rotational RMSE across available lengths, deg/m.
    pub r_rel: f64,
    pub per_length: Vec<LengthRow>,
    /// True when no segment length fit inside the trajectory.
    pub insufficient_length: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpeReport {
    pub delta_frames: usize,
    pub translation_errors_m: Vec<f64>,
    pub rotation_errors_deg: Vec<f64>,
    pub translation_rmse_m: f64,
    pub rotation_rmse_deg: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub segments: SegmentReport,
    pub rpe: RpeReport,
}

fn check_lengths<S: Scalar>(estimate: &Trajectory<S>, gt: &Trajectory<S>) -> Result<()> {
    if estimate.len() != gt.len() {
        return Err(RvoError::LengthMismatch {
            a: estimate.len(),
            b: gt.len(),
        });
    }
    Ok(())
}

/// Segment drift errors over 20-160 m sub-paths in 20 m steps. Segment
/// start frames advance every frame; each segment ends at the first frame
/// whose ground-truth arclength exceeds `start + length`.
pub fn segment_errors<S: Scalar>(
    estimate: &Trajectory<S>,
    gt: &Trajectory<S>,
) -> Result<SegmentReport> {
    check_lengths(estimate, gt)?;
    let n = gt.len();
    let mut per_length = Vec::with_capacity(SEGMENT_LENGTHS.len());
    let mut available_t = Vec::new();
    let mut available_r = Vec::new();
    for &length in &SEGMENT_LENGTHS {
        let mut t_acc = 0.0f64;
        let mut r_acc = 0.0f64;
        let mut count = 0usize;
        for start in 0..n {
            let target = gt.arclength[start].as_f64() + length;
            let Some(end) = (start + 1..n).find(|&j| gt.arclength[j].as_f64() > target) else {
                continue;
            };
            let delta_gt = gt.relative(start, end);
            let delta_est = estimate.relative(start, end);
            let err = delta_gt.inverse().compose(&delta_est);
            t_acc += vec3_norm(&err.t).as_f64() / length;
            r_acc += rotation_angle(&err.r).as_f64().to_degrees() / length;
            count += 1;
        }
        if count > 0 {
            let t_mean = t_acc / count as f64;
            let r_mean = r_acc / count as f64;
            available_t.push(t_mean);
            available_r.push(r_mean);
            per_length.push(LengthRow {
                length_m: length,
                available: true,
                segments: count,
                t_rel: Some(t_mean),
                r_rel: Some(r_mean),
            });
        } else {
            per_length.push(LengthRow {
                length_m: length,
                available: false,
                segments: 0,
                t_rel: None,
                r_rel: None,
            });
        }
    }
    let insufficient = available_t.is_empty();
    let t_rel = if insufficient {
        0.0
    } else {
        available_t.iter().sum::<f64>() / available_t.len() as f64
    };
    let r_rel = if insufficient {
        0.0
    } else {
        available_r.iter().sum::<f64>() / available_r.len() as f64
    };
    Ok(SegmentReport {
        t_rel,
        t_rel_percent: t_rel * 100.0,
        r_rel,
        per_length,
        insufficient_length: insufficient,
    })
}

/// Relative pose error at a fixed frame interval.
pub fn rpe<S: Scalar>(
    estimate: &Trajectory<S>,
    gt: &Trajectory<S>,
    delta_frames: usize,
) -> Result<RpeReport> {
    assert!(delta_frames >= 1, "delta must be at least one frame");
    check_lengths(estimate, gt)?;
    let n = gt.len();
    let mut trans = Vec::new();
    let mut rot = Vec::new();
    for i in 0..n.saturating_sub(delta_frames) {
        let j = i + delta_frames;
        let err = gt
            .relative(i, j)
            .inverse()
            .compose(&estimate.relative(i, j));
        trans.push(vec3_norm(&err.t).as_f64());
        rot.push(rotation_angle(&err.r).as_f64().to_degrees());
    }
    let rmse = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
        }
    };
    Ok(RpeReport {
        delta_frames,
        translation_rmse_m: rmse(&trans),
        rotation_rmse_deg: rmse(&rot),
        translation_errors_m: trans,
        rotation_errors_deg: rot,
    })
}

/// Write the per-length breakdown as CSV next to the JSON report.
pub fn write_length_csv(report: &SegmentReport, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "length_m,available,segments,t_rel_m_per_m,r_rel_deg_per_m")?;
    for row in &report.per_length {
        writeln!(
            f,
            "{},{},{},{},{}",
            row.length_m,
            row.available,
            row.segments,
            row.t_rel.map_or(String::from(""), |v| format!("{v:.9e}")),
            row.r_rel.map_or(String::from(""), |v| format!("{v:.9e}")),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::compose_pose;

    fn straight_path(step: f64, frames: usize) -> Vec<Pose<f64>> {
        (0..frames - 1)
            .map(|_| Pose::new([0.0; 3], [step, 0.0, 0.0]))
            .collect()
    }

    #[test]
    fn assemble_identity_relatives() {
        let rels: Vec<Pose<f64>> = vec![Pose::identity(); 4];
        let traj = Trajectory::assemble(&rels);
        assert_eq!(traj.len(), 5);
        for m in &traj.poses {
            assert_eq!(*m, crate::geometry::mat4_identity::<f64>());
        }
        assert_eq!(traj.arclength[4], 0.0);
    }

    #[test]
    fn assemble_constant_forward_steps() {
        let rels = straight_path(1.0, 6);
        let traj = Trajectory::assemble(&rels);
        for (i, m) in traj.poses.iter().enumerate() {
            assert!((m[0][3] - i as f64).abs() < 1e-12);
        }
        assert!((traj.arclength[5] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn assemble_matches_composed_pose_oracle() {
        let rels = vec![
            Pose::new([0.1, 0.0, 0.05], [1.0, 0.2, 0.0]),
            Pose::new([-0.05, 0.02, 0.0], [0.8, -0.1, 0.05]),
            Pose::new([0.0, -0.03, 0.02], [1.2, 0.0, -0.1]),
        ];
        let traj = Trajectory::assemble(&rels);
        let mut acc: Pose<f64> = Pose::identity();
        for (i, rel) in rels.iter().enumerate() {
            acc = compose_pose(&acc, rel);
            let m = acc.to_homogeneous();
            for r in 0..3 {
                for c in 0..4 {
                    assert!((traj.poses[i + 1][r][c] - m[r][c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn identical_trajectories_have_zero_errors() {
        let rels = straight_path(1.0, 101);
        let traj = Trajectory::assemble(&rels);
        let report = segment_errors(&traj, &traj).unwrap();
        assert_eq!(report.t_rel, 0.0);
        assert_eq!(report.r_rel, 0.0);
        let rpe_report = rpe(&traj, &traj, 1).unwrap();
        assert_eq!(rpe_report.translation_rmse_m, 0.0);
        assert_eq!(rpe_report.rotation_rmse_deg, 0.0);
    }

    #[test]
    fn per_length_rows_cover_20_to_160() {
        let rels = straight_path(1.0, 200);
        let traj = Trajectory::assemble(&rels);
        let report = segment_errors(&traj, &traj).unwrap();
        let lengths: Vec<f64> = report.per_length.iter().map(|r| r.length_m).collect();
        assert_eq!(lengths, SEGMENT_LENGTHS.to_vec());
        assert!(report.per_length.iter().all(|r| r.available));
    }

    #[test]
    fn short_path_marks_all_lengths_unavailable() {
        let rels = straight_path(1.0, 16); // 15 m total
        let traj = Trajectory::assemble(&rels);
        let report = segment_errors(&traj, &traj).unwrap();
        assert!(report.insufficient_length);
        assert!(report.per_length.iter().all(|r| !r.available));
    }

    #[test]
    fn single_injected_error_matches_hand_computation() {
        // 100 m straight ground truth at 1 m/frame; the estimate adds one
        // extra meter at frame 50. Any 20 m segment spanning the defect
        // sees exactly 1 m of translational error; its end frame is the
        // first with arclength > start + 20, i.e. 21 frames later.
        let gt_rels = straight_path(1.0, 101);
        let mut est_rels = gt_rels.clone();
        est_rels[50].t[0] += 1.0;
        let gt = Trajectory::assemble(&gt_rels);
        let est = Trajectory::assemble(&est_rels);
        let report = segment_errors(&est, &gt).unwrap();
        let row20 = &report.per_length[0];
        // Starts 30..=50 span frame-interval (50, 51): 21 of the 80
        // segments of nominal length 20 m carry error 1/20.
        assert_eq!(row20.segments, 80);
        let expect = (21.0 / 80.0) * (1.0 / 20.0);
        assert!(
            (row20.t_rel.unwrap() - expect).abs() < 1e-9,
            "got {}, expected {expect}",
            row20.t_rel.unwrap()
        );
        assert!(row20.r_rel.unwrap().abs() < 1e-12);
    }

    #[test]
    fn rpe_single_corruption_hits_one_interval() {
        let gt_rels = straight_path(1.0, 31);
        let mut est_rels = gt_rels.clone();
        est_rels[10].t[1] += 0.5;
        let gt = Trajectory::assemble(&gt_rels);
        let est = Trajectory::assemble(&est_rels);
        let report = rpe(&est, &gt, 1).unwrap();
        let nonzero: Vec<usize> = report
            .translation_errors_m
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 1e-12)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero, vec![10]);
        assert!((report.translation_errors_m[10] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rpe_rotation_rmse_arithmetic() {
        // One 1-degree yaw error across 30 intervals: RMSE = 1/sqrt(30).
        let gt_rels = straight_path(1.0, 31);
        let mut est_rels = gt_rels.clone();
        est_rels[5].eula[0] += 1.0f64.to_radians();
        let gt = Trajectory::assemble(&gt_rels);
        let est = Trajectory::assemble(&est_rels);
        let report = rpe(&est, &gt, 1).unwrap();
        let expect = 1.0 / (30.0f64).sqrt();
        assert!((report.rotation_rmse_deg - expect).abs() < 1e-9);
    }

    #[test]
    fn segment_errors_invariant_to_global_rigid_transform() {
        // Every frame carries some rotation error: the trace-formula angle
        // is numerically stable away from zero, where rounding noise from
        // the global transform would otherwise dominate.
        let gt_rels: Vec<Pose<f64>> = (0..80)
            .map(|i| {
                Pose::new(
                    [0.01 * ((i % 5) as f64 - 2.0), 0.0, 0.0],
                    [1.0, 0.02 * (i % 3) as f64, 0.0],
                )
            })
            .collect();
        let mut est_rels = gt_rels.clone();
        for (i, rel) in est_rels.iter_mut().enumerate() {
            rel.eula[0] += 0.004 + 0.002 * (i as f64 * 0.3).sin();
            rel.t[1] += 0.01;
        }
        let gt = Trajectory::assemble(&gt_rels);
        let est = Trajectory::assemble(&est_rels);
        let base = segment_errors(&est, &gt).unwrap();

        let g = Pose::new([0.4, -0.2, 0.3], [12.0, -7.0, 3.0]).to_homogeneous();
        let apply = |t: &Trajectory<f64>| Trajectory::<f64> {
            poses: t.poses.iter().map(|m| mat4_mul(&g, m)).collect(),
            arclength: t.arclength.clone(),
        };
        let moved = segment_errors(&apply(&est), &apply(&gt)).unwrap();
        assert!((base.t_rel - moved.t_rel).abs() < 1e-9);
        assert!((base.r_rel - moved.r_rel).abs() < 1e-9);
    }

    #[test]
    fn swapping_estimate_and_gt_preserves_errors() {
        // Rotation-only corruption keeps per-step translation norms equal,
        // so both directions segment identically and the inverse relative
        // error has the same translation norm and rotation angle.
        let gt_rels = straight_path(1.0, 120);
        let mut est_rels = gt_rels.clone();
        est_rels[40].eula[0] += 0.015;
        est_rels[70].eula[2] -= 0.02;
        let gt = Trajectory::assemble(&gt_rels);
        let est = Trajectory::assemble(&est_rels);
        let a = segment_errors(&est, &gt).unwrap();
        let b = segment_errors(&gt, &est).unwrap();
        assert!((a.r_rel - b.r_rel).abs() < 1e-9);
        assert!((a.t_rel - b.t_rel).abs() < 1e-9);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let a = Trajectory::assemble(&straight_path(1.0, 10));
        let b = Trajectory::assemble(&straight_path(1.0, 11));
        assert!(matches!(
            segment_errors(&a, &b),
            Err(RvoError::LengthMismatch { .. })
        ));
        assert!(matches!(rpe(&a, &b, 1), Err(RvoError::LengthMismatch { .. })));
    }
}
