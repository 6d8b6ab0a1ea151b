//! Adapter stub for ingesting real automotive radar-camera recordings.
//!
//! Real datasets ship their own layouts; this crate consumes the canonical
//! layout documented in [`crate::data`]. Converting a recording means
//! producing, per sequence:
//!
//! | target file            | content                                        |
//! |------------------------|------------------------------------------------|
//! | `radar/<frame>.bin`    | f32 LE, 5 per point: x y z rrv intensity, sensor frame (x fwd, y left, z up) |
//! | `image/<frame>.png`    | 8-bit RGB, undistorted                         |
//! | `calib.json`           | `K` 9 floats, `T_cr` 16 floats, row-major      |
//! | `poses.txt`            | absolute sensor poses, 3x4 `[R|t]` per line    |
//! | `../splits.json`       | split name -> sequence ids                     |
//!
//! Things a converter must resolve against the source format before any
//! large-scale run:
//!
//! - the sign convention of the radial velocity channel (this crate uses
//!   negative = approaching) and whether it is ego-motion compensated
//!   (it must NOT be: the confidence features expect raw relative values);
//! - the frame the ground-truth odometry lives in (convert to the radar
//!   sensor frame so that `inv(T1) * T2` warps frame-2 points onto
//!   frame-1, matching the pose-warp direction used in refinement);
//! - Euler conventions of any source pose format (this crate re-derives
//!   angles from rotation matrices, so only `poses.txt` matters);
//! - image undistortion, since the pinhole projection here has no
//!   distortion model.

use std::path::Path;

use crate::error::{Result, RvoError};

/// Placeholder entry point for a real-dataset converter.
///
/// Not implemented: desk-scale verification runs on the synthetic
/// generator. The table above documents the full contract a converter has
/// to satisfy.
pub fn convert_external_recording(_source: &Path, _dest: &Path) -> Result<()> {
    Err(RvoError::ConfigError(
        "no external-dataset converter is bundled; see data::adapter docs for the layout contract"
            .into(),
    ))
}
