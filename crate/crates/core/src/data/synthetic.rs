//! Synthetic scene generator: the desk-scale verification substrate.
//!
//! A static point field and optional constant-velocity dynamic clusters are
//! observed from a moving sensor. Points carry the relative radial velocity
//! measured along the line of sight (negative approaching) and a fixed
//! intensity. Images are rendered as point splats over a procedural
//! texture, enough structure for the image branch to carry signal.
//!
//! Sensor axes: x forward, y left, z up. The default extrinsic maps them
//! into a standard camera frame (z forward, x right, y down).

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{write_radar_bin, write_splits};
use crate::error::{Result, RvoError};
use crate::geometry::{
    compose_pose, project_points, rotation_to_euler, vec3_dot,
    vec3_norm, vec3_sub, write_trajectory, Calibration, Mat4, Pose, RigidTransform, Vec3,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicCluster {
    pub center: [f64; 3],
    /// World-frame velocity, m/s.
    pub velocity: [f64; 3],
    pub points: usize,
    pub radius: f64,
    /// Per-frame isotropic velocity perturbation (std dev, m/s); movers
    /// with jitter cannot be exploited as stable landmarks.
    #[serde(default)]
    pub velocity_jitter: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EgoMotion {
    Static,
    /// The same relative pose every frame, expressed in the previous frame.
    Constant { eula: [f64; 3], t: [f64; 3] },
    /// Explicit per-frame relative poses.
    Steps { steps: Vec<PoseStep> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseStep {
    pub eula: [f64; 3],
    pub t: [f64; 3],
}

impl EgoMotion {
    fn step_at(&self, k: usize) -> Pose<f64> {
        match self {
            EgoMotion::Static => Pose::identity(),
            EgoMotion::Constant { eula, t } => Pose::new(*eula, *t),
            EgoMotion::Steps { steps } => {
                if steps.is_empty() {
                    Pose::identity()
                } else {
                    let s = &steps[k.min(steps.len() - 1)];
                    Pose::new(s.eula, s.t)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneConfig {
    pub static_points: usize,
    pub clusters: Vec<DynamicCluster>,
    pub ego: EgoMotion,
    /// Standard deviation of position noise, meters.
    pub noise_sigma: f64,
    pub image_width: usize,
    pub image_height: usize,
    /// Focal length in pixels; the principal point sits at the center.
    pub focal: f64,
    pub world_x: [f64; 2],
    pub world_y: [f64; 2],
    pub world_z: [f64; 2],
    pub frame_dt: f64,
    pub splat_radius: i64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            static_points: 320,
            clusters: Vec::new(),
            ego: EgoMotion::Constant {
                eula: [0.0; 3],
                t: [0.1, 0.0, 0.0],
            },
            noise_sigma: 0.0,
            image_width: 64,
            image_height: 64,
            focal: 64.0,
            world_x: [2.0, 30.0],
            world_y: [-12.0, 12.0],
            world_z: [-1.0, 4.0],
            frame_dt: 0.1,
            splat_radius: 1,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 {
            return Err(RvoError::ConfigError(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.static_points == 0 && self.clusters.is_empty() {
            return Err(RvoError::ConfigError(
                "scene needs static points or clusters".into(),
            ));
        }
        if self.frame_dt <= 0.0 {
            return Err(RvoError::ConfigError("frame_dt must be positive".into()));
        }
        if self.focal <= 0.0 {
            return Err(RvoError::ConfigError("focal must be positive".into()));
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if c.points == 0 || c.radius < 0.0 {
                return Err(RvoError::ConfigError(format!(
                    "cluster {i}: points must be > 0 and radius non-negative"
                )));
            }
        }
        Ok(())
    }

    pub fn calibration(&self) -> Calibration<f64> {
        let cx = self.image_width as f64 / 2.0;
        let cy = self.image_height as f64 / 2.0;
        Calibration {
            k: [
                [self.focal, 0.0, cx],
                [0.0, self.focal, cy],
                [0.0, 0.0, 1.0],
            ],
            // x_cam = -y_radar, y_cam = -z_radar, z_cam = x_radar.
            t_cr: RigidTransform {
                r: [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]],
                t: [0.0, 0.0, 0.0],
            },
        }
    }
}

/// One generated frame in sensor coordinates (f64, pre-quantization).
#[derive(Debug, Clone)]
pub struct SynthFrame {
    /// x, y, z, rrv, intensity per point; static points first.
    pub points: Vec<[f64; 5]>,
    /// World positions matching `points` (before sensor noise).
    pub world: Vec<Vec3<f64>>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<SynthFrame>,
    /// Absolute sensor poses, sensor frame k to world.
    pub poses: Vec<Mat4<f64>>,
    /// Configured relative poses: `inv(T_k) * T_{k+1}`.
    pub relatives: Vec<Pose<f64>>,
    pub calib: Calibration<f64>,
    pub static_count: usize,
    pub config: SyntheticSceneConfig,
}

/// Generate the full sequence in memory (f64).
pub fn synthesize(
    cfg: &SyntheticSceneConfig,
    frames: usize,
    seed: u64,
) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // World scene: static field plus clusters, intensity fixed per point.
    let mut base_points: Vec<Vec3<f64>> = Vec::new();
    let mut cluster_of: Vec<Option<usize>> = Vec::new();
    let mut intensities: Vec<f64> = Vec::new();
    for _ in 0..cfg.static_points {
        base_points.push([
            rng.gen_range(cfg.world_x[0]..cfg.world_x[1]),
            rng.gen_range(cfg.world_y[0]..cfg.world_y[1]),
            rng.gen_range(cfg.world_z[0]..cfg.world_z[1]),
        ]);
        cluster_of.push(None);
        intensities.push(rng.gen_range(0.0..1.0));
    }
    for (ci, cluster) in cfg.clusters.iter().enumerate() {
        let spread = Normal::new(0.0, cluster.radius.max(1e-9)).unwrap();
        for _ in 0..cluster.points {
            base_points.push([
                cluster.center[0] + spread.sample(&mut rng),
                cluster.center[1] + spread.sample(&mut rng),
                cluster.center[2] + spread.sample(&mut rng),
            ]);
            cluster_of.push(Some(ci));
            intensities.push(rng.gen_range(0.0..1.0));
        }
    }
    // Per-cluster velocity tracks: base velocity plus optional per-frame
    // jitter. Positions integrate the track, so the stored radial velocity
    // always matches the analytic formula at that frame.
    let cluster_velocities: Vec<Vec<Vec3<f64>>> = cfg
        .clusters
        .iter()
        .map(|cluster| {
            let jitter = Normal::new(0.0, cluster.velocity_jitter.max(f64::MIN_POSITIVE)).unwrap();
            (0..frames)
                .map(|_| {
                    let mut v = cluster.velocity;
                    if cluster.velocity_jitter > 0.0 {
                        for a in &mut v {
                            *a += jitter.sample(&mut rng);
                        }
                    }
                    v
                })
                .collect()
        })
        .collect();
    let cluster_positions_offsets: Vec<Vec<Vec3<f64>>> = cluster_velocities
        .iter()
        .map(|track| {
            let mut acc = [0.0f64; 3];
            let mut offsets = Vec::with_capacity(frames);
            for v in track {
                offsets.push(acc);
                for a in 0..3 {
                    acc[a] += v[a] * cfg.frame_dt;
                }
            }
            offsets
        })
        .collect();

    // Absolute trajectory: T_k = T_{k-1} * step_k.
    let mut abs: Vec<Pose<f64>> = Vec::with_capacity(frames);
    let mut current = Pose::identity();
    abs.push(current);
    for k in 1..frames {
        current = compose_pose(&current, &cfg.ego.step_at(k - 1));
        abs.push(current);
    }
    let poses: Vec<Mat4<f64>> = abs.iter().map(|p| p.to_homogeneous()).collect();
    let relatives: Vec<Pose<f64>> = (0..frames.saturating_sub(1))
        .map(|k| {
            let t1 = RigidTransform::from_homogeneous(&poses[k]);
            let t2 = RigidTransform::from_homogeneous(&poses[k + 1]);
            let rel = t1.inverse().compose(&t2);
            Pose::new(rotation_to_euler(&rel.r).unwrap(), rel.t)
        })
        .collect();

    // Ego world positions and finite-difference velocities.
    let positions: Vec<Vec3<f64>> = abs.iter().map(|p| p.t).collect();
    let velocity_at = |k: usize| -> Vec3<f64> {
        if frames < 2 {
            return [0.0; 3];
        }
        let (a, b) = if k == 0 { (0, 1) } else { (k - 1, k) };
        let d = vec3_sub(&positions[b], &positions[a]);
        [
            d[0] / cfg.frame_dt,
            d[1] / cfg.frame_dt,
            d[2] / cfg.frame_dt,
        ]
    };

    let mut out_frames = Vec::with_capacity(frames);
    for k in 0..frames {
        let sensor = RigidTransform::from_homogeneous(&poses[k]);
        let sensor_inv = sensor.inverse();
        let ego_vel = velocity_at(k);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_0000 ^ (k as u64) << 8);
        let normal = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
        let mut points = Vec::with_capacity(base_points.len());
        let mut world = Vec::with_capacity(base_points.len());
        for i in 0..base_points.len() {
            let (offset, vel_i) = match cluster_of[i] {
                Some(ci) => (cluster_positions_offsets[ci][k], cluster_velocities[ci][k]),
                None => ([0.0; 3], [0.0; 3]),
            };
            let p_world = [
                base_points[i][0] + offset[0],
                base_points[i][1] + offset[1],
                base_points[i][2] + offset[2],
            ];
            let to_point = vec3_sub(&p_world, &positions[k]);
            let range = vec3_norm(&to_point).max(1e-9);
            let dir = [to_point[0] / range, to_point[1] / range, to_point[2] / range];
            let rel_vel = vec3_sub(&vel_i, &ego_vel);
            let rrv = vec3_dot(&rel_vel, &dir);
            let mut local = sensor_inv.apply(&p_world);
            if cfg.noise_sigma > 0.0 {
                for a in &mut local {
                    *a += normal.sample(&mut noise_rng);
                }
            }
            points.push([local[0], local[1], local[2], rrv, intensities[i]]);
            world.push(p_world);
        }
        out_frames.push(SynthFrame { points, world });
    }
    Ok(SyntheticSequence {
        frames: out_frames,
        poses,
        relatives,
        calib: cfg.calibration(),
        static_count: cfg.static_points,
        config: cfg.clone(),
    })
}

/// Analytic radial velocity for a world point seen from a sensor at
/// `sensor_pos` moving at `ego_vel`. Negative means approaching.
pub fn radial_velocity(
    point_world: &Vec3<f64>,
    point_vel: &Vec3<f64>,
    sensor_pos: &Vec3<f64>,
    ego_vel: &Vec3<f64>,
) -> f64 {
    let to_point = vec3_sub(point_world, sensor_pos);
    let range = vec3_norm(&to_point).max(1e-9);
    let dir = [
        to_point[0] / range,
        to_point[1] / range,
        to_point[2] / range,
    ];
    vec3_dot(&vec3_sub(point_vel, ego_vel), &dir)
}

fn render_image(
    seq: &SyntheticSequence,
    frame_idx: usize,
    width: usize,
    height: usize,
) -> image::RgbImage {
    let mut img = image::RgbImage::new(width as u32, height as u32);
    // Procedural plaid background.
    for y in 0..height {
        for x in 0..width {
            let fx = x as f64;
            let fy = y as f64;
            let r = 0.45 + 0.2 * (fx / 3.0).sin() + 0.1 * (fy / 7.0).cos();
            let g = 0.45 + 0.2 * (fy / 4.0).sin() + 0.1 * (fx / 9.0).cos();
            let b = 0.45 + 0.15 * ((fx + fy) / 5.0).sin();
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_u8(r), to_u8(g), to_u8(b)]),
            );
        }
    }
    let frame = &seq.frames[frame_idx];
    let coords: Vec<Vec3<f64>> = frame.points.iter().map(|p| [p[0], p[1], p[2]]).collect();
    let (uv, depth, valid) = project_points(&coords, &seq.calib, width, height);
    let radius = seq.config.splat_radius;
    for i in 0..coords.len() {
        if !valid[i] {
            continue;
        }
        let intensity = frame.points[i][4];
        let near = (1.0 - (depth[i] / 30.0).min(1.0)).max(0.0);
        let color = [
            to_u8(0.25 + 0.75 * intensity),
            to_u8(0.2 + 0.8 * near),
            to_u8(0.85 - 0.6 * intensity),
        ];
        let (cu, cv) = (uv[i][0].round() as i64, uv[i][1].round() as i64);
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let (px, py) = (cu + dx, cv + dy);
                if px >= 0 && py >= 0 && (px as usize) < width && (py as usize) < height {
                    img.put_pixel(px as u32, py as u32, image::Rgb(color));
                }
            }
        }
    }
    img
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a generated sequence into the standard dataset layout and register
/// it under the given split names.
pub fn write_dataset(
    root: &Path,
    sequence_id: &str,
    seq: &SyntheticSequence,
    splits: &[&str],
) -> Result<()> {
    let seq_dir = root.join("sequences").join(sequence_id);
    std::fs::create_dir_all(seq_dir.join("radar"))?;
    std::fs::create_dir_all(seq_dir.join("image"))?;
    for (k, frame) in seq.frames.iter().enumerate() {
        write_radar_bin(&seq_dir.join("radar").join(format!("{k:06}.bin")), &frame.points)?;
        let img = render_image(seq, k, seq.config.image_width, seq.config.image_height);
        img.save(seq_dir.join("image").join(format!("{k:06}.png")))
            .map_err(crate::error::RvoError::Image)?;
    }
    write_trajectory(&seq_dir.join("poses.txt"), &seq.poses)?;
    seq.calib.save(&seq_dir.join("calib.json"))?;
    // Manifest: the generating configuration next to the artifact.
    std::fs::write(
        seq_dir.join("config.json"),
        serde_json::to_string_pretty(&seq.config)?,
    )?;
    let mut manifest: BTreeMap<String, Vec<String>> = if root.join("splits.json").exists() {
        crate::data::read_splits(root)?
    } else {
        BTreeMap::new()
    };
    for split in splits {
        let ids = manifest.entry(split.to_string()).or_default();
        if !ids.iter().any(|i| i == sequence_id) {
            ids.push(sequence_id.to_string());
        }
    }
    write_splits(root, &manifest)?;
    Ok(())
}

/// Generate and persist a synthetic sequence in one call.
pub fn generate_synthetic(
    cfg: &SyntheticSceneConfig,
    frames: usize,
    seed: u64,
    root: &Path,
    sequence_id: &str,
    splits: &[&str],
) -> Result<SyntheticSequence> {
    let seq = synthesize(cfg, frames, seed)?;
    write_dataset(root, sequence_id, &seq, splits)?;
    Ok(seq)
}
