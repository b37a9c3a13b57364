//! Binary interaction labels from consecutive frames.
//!
//! A step counts as an interaction when enough pixels outside the robot mask
//! move. Motion is measured with a per-pixel squared frame difference, which
//! at this resolution is an exact stand-in for dense optical flow magnitude.

use crate::config::InteractionConfig;
use crate::error::{Error, Result};
use crate::sim::{Image, Mask};

/// Squared motion magnitude per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionField {
    pub width: usize,
    pub height: usize,
    pub flow_sq_mag: Vec<f64>,
}

impl MotionField {
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.flow_sq_mag[v * self.width + u]
    }
}

/// Anything that turns a frame pair into a motion-magnitude field. The frame
/// difference is the only implementation shipped; a learned flow estimator
/// would slot in here.
pub trait MotionEstimator {
    fn estimate(&self, prev: &Image, next: &Image) -> Result<MotionField>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FrameDifference;

impl MotionEstimator for FrameDifference {
    fn estimate(&self, prev: &Image, next: &Image) -> Result<MotionField> {
        motion_field(prev, next)
    }
}

/// Per-pixel squared difference summed over channels.
pub fn motion_field(prev: &Image, next: &Image) -> Result<MotionField> {
    if !prev.same_dims(next) {
        return Err(Error::Shape(format!(
            "frame dims differ: {}x{}x{} vs {}x{}x{}",
            prev.width, prev.height, prev.channels, next.width, next.height, next.channels
        )));
    }
    let c = prev.channels;
    let flow_sq_mag = prev
        .data
        .chunks_exact(c)
        .zip(next.data.chunks_exact(c))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| {
                    let d = (y as f64 - x as f64) / 255.0;
                    d * d
                })
                .sum()
        })
        .collect();
    Ok(MotionField {
        width: prev.width,
        height: prev.height,
        flow_sq_mag,
    })
}

/// Number of pixels outside `mask` whose squared motion exceeds `delta_flow`.
pub fn moving_pixels(field: &MotionField, mask: &Mask, delta_flow: f64) -> Result<usize> {
    if field.width != mask.width || field.height != mask.height {
        return Err(Error::Shape(format!(
            "motion field {}x{} vs mask {}x{}",
            field.width, field.height, mask.width, mask.height
        )));
    }
    let mut n = 0;
    for v in 0..field.height {
        for u in 0..field.width {
            if !mask.get(u, v) && field.get(u, v) > delta_flow {
                n += 1;
            }
        }
    }
    Ok(n)
}

/// True iff strictly more than `ig_pixel_threshold` non-robot pixels move.
pub fn interaction_label(field: &MotionField, mask: &Mask, cfg: &InteractionConfig) -> Result<bool> {
    Ok(moving_pixels(field, mask, cfg.ig_flow_threshold)? > cfg.ig_pixel_threshold)
}

/// Per-frame labels for a frame sequence. Frame `t >= 1` is labelled from the
/// pair `(t-1, t)` with the union of both robot masks excluded; frame 0 has no
/// predecessor and copies frame 1.
pub fn label_frames(frames: &[Image], masks: &[Mask], cfg: &InteractionConfig) -> Result<Vec<bool>> {
    label_frames_with(&FrameDifference, frames, masks, cfg)
}

pub fn label_frames_with<E: MotionEstimator>(
    estimator: &E,
    frames: &[Image],
    masks: &[Mask],
    cfg: &InteractionConfig,
) -> Result<Vec<bool>> {
    if frames.len() < 2 {
        return Err(Error::Annotation(format!(
            "need at least two frames, got {}",
            frames.len()
        )));
    }
    if masks.len() != frames.len() {
        return Err(Error::Annotation(format!(
            "{} frames but {} robot masks",
            frames.len(),
            masks.len()
        )));
    }
    let mut labels = Vec::with_capacity(frames.len());
    labels.push(false);
    for t in 1..frames.len() {
        let field = estimator.estimate(&frames[t - 1], &frames[t])?;
        let mask = masks[t - 1].union(&masks[t])?;
        labels.push(interaction_label(&field, &mask, cfg)?);
    }
    labels[0] = labels[1];
    Ok(labels)
}
