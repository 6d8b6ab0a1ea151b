//! Residual-block image feature pyramid and the bilinear feature sampler.
//!
//! Each level halves the spatial resolution with a stride-2 convolution and
//! applies two residual blocks. The same parameters process both input
//! frames, so identical frames produce identical pyramids.

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, RvoError};
use crate::nn::layers::{BatchNorm, Phase};
use crate::nn::params::{he_uniform, ParamId, ParamStore};
use crate::nn::tape::{conv_out_dims, Tape, Value};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// RGB image with pixels in `[0, 1]`, stored `(h*w) x 3` row-major by pixel.
#[derive(Debug, Clone)]
pub struct ImageFrame<S: Scalar> {
    pub height: usize,
    pub width: usize,
    pub pixels: Tensor<S>,
}

impl<S: Scalar> ImageFrame<S> {
    pub fn new(height: usize, width: usize, pixels: Tensor<S>) -> Result<Self> {
        if height < 32 || width < 32 || height % 16 != 0 || width % 16 != 0 {
            return Err(RvoError::ShapeError {
                h: height,
                w: width,
            });
        }
        if pixels.rows != height * width || pixels.cols != 3 {
            return Err(RvoError::shape(format!(
                "image pixels {}x{} vs {}x{}x3",
                pixels.rows, pixels.cols, height, width
            )));
        }
        Ok(ImageFrame {
            height,
            width,
            pixels,
        })
    }

    /// Per-channel normalized copy of the pixel data.
    pub fn normalized(&self, mean: &[f64; 3], std: &[f64; 3]) -> Tensor<S> {
        let mean: Vec<S> = mean.iter().map(|&v| S::from_f64(v)).collect();
        let inv_std: Vec<S> = std.iter().map(|&v| S::from_f64(1.0 / v)).collect();
        let mut out = self.pixels.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for c in 0..3 {
                row[c] = (row[c] - mean[c]) * inv_std[c];
            }
        }
        out
    }
}

/// One pyramid level: feature map plus its spatial dimensions.
#[derive(Debug, Clone, Copy)]
pub struct LevelMap {
    pub feat: Value,
    pub h: usize,
    pub w: usize,
}

pub struct ImagePyramid {
    pub levels: Vec<LevelMap>,
}

struct ConvBn {
    w: ParamId,
    bn: BatchNorm,
}

impl ConvBn {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        let w = store.trainable(
            format!("{name}.w"),
            he_uniform(rng, cout, 9 * cin, 9 * cin),
        );
        ConvBn {
            w,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: Value,
        h: usize,
        w: usize,
        stride: usize,
        phase: Phase,
    ) -> Value {
        let weights = tape.param(store, self.w);
        let y = tape.conv3x3(x, weights, h, w, stride);
        self.bn.apply(tape, store, y, phase)
    }
}

struct ResidualBlock {
    conv1: ConvBn,
    conv2: ConvBn,
}

impl ResidualBlock {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        ch: usize,
    ) -> Self {
        ResidualBlock {
            conv1: ConvBn::new(store, rng, &format!("{name}.conv1"), ch, ch),
            conv2: ConvBn::new(store, rng, &format!("{name}.conv2"), ch, ch),
        }
    }

    fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        x: Value,
        h: usize,
        w: usize,
        phase: Phase,
    ) -> Value {
        let y = self.conv1.apply(tape, store, x, h, w, 1, phase);
        let y = tape.relu(y);
        let y = self.conv2.apply(tape, store, y, h, w, 1, phase);
        let y = tape.add(y, x);
        tape.relu(y)
    }
}

struct BackboneLevel {
    down: ConvBn,
    res1: ResidualBlock,
    res2: ResidualBlock,
}

pub struct ImageBackbone {
    levels: Vec<BackboneLevel>,
}

impl ImageBackbone {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        widths: &[usize],
    ) -> Self {
        let mut levels = Vec::with_capacity(widths.len());
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            let prefix = format!("{name}.l{}", i + 1);
            levels.push(BackboneLevel {
                down: ConvBn::new(store, rng, &format!("{prefix}.down"), cin, cout),
                res1: ResidualBlock::new(store, rng, &format!("{prefix}.res1"), cout),
                res2: ResidualBlock::new(store, rng, &format!("{prefix}.res2"), cout),
            });
            cin = cout;
        }
        ImageBackbone { levels }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        store: &mut ParamStore<S>,
        frame: &ImageFrame<S>,
        mean: &[f64; 3],
        std: &[f64; 3],
        phase: Phase,
    ) -> ImagePyramid {
        let mut x = tape.constant(frame.normalized(mean, std));
        let (mut h, mut w) = (frame.height, frame.width);
        let mut out = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let y = level.down.apply(tape, store, x, h, w, 2, phase);
            let y = tape.relu(y);
            let (ho, wo) = conv_out_dims(h, w, 2);
            let y = level.res1.apply(tape, store, y, ho, wo, phase);
            let y = level.res2.apply(tape, store, y, ho, wo, phase);
            out.push(LevelMap {
                feat: y,
                h: ho,
                w: wo,
            });
            x = y;
            h = ho;
            w = wo;
        }
        ImagePyramid { levels: out }
    }
}

/// Bilinear sampling of a pyramid level at full-image pixel coordinates.
/// Coordinates are divided by the level stride before interpolation;
/// out-of-bounds queries clamp to the border.
pub fn sample_features<S: Scalar>(
    tape: &mut Tape<S>,
    map: LevelMap,
    uv_full: Value,
    level: usize,
) -> Value {
    let scale = S::from_f64(1.0 / (1u64 << level) as f64);
    let scaled = tape.scale(uv_full, scale);
    tape.bilinear_sample(map.feat, scaled, map.h, map.w)
}
