//! Flip test-time augmentation and Soft-NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, FlipHorizontal, FlipVertical};
use crate::grouping::{Detection, Source};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftNmsMethod {
    /// `score *= exp(-iou^2 / sigma)`
    #[default]
    Gaussian,
    /// `score *= 1 - iou` when `iou > linear_threshold`
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftNmsConfig {
    pub sigma: f64,
    /// Decayed detections scoring below this are dropped.
    pub score_floor: f64,
    pub method: SoftNmsMethod,
    pub linear_threshold: f64,
}

impl Default for SoftNmsConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            score_floor: 0.001,
            method: SoftNmsMethod::Gaussian,
            linear_threshold: 0.3,
        }
    }
}

impl SoftNmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "soft-nms sigma must be positive, got {}",
                self.sigma
            )));
        }
        if !(self.score_floor >= 0.0) {
            return Err(Error::InvalidArgument("score_floor must be >= 0".into()));
        }
        Ok(())
    }

    fn decay(&self, overlap: f64) -> f64 {
        match self.method {
            SoftNmsMethod::Gaussian => (-(overlap * overlap) / self.sigma).exp(),
            SoftNmsMethod::Linear if overlap > self.linear_threshold => 1.0 - overlap,
            SoftNmsMethod::Linear => 1.0,
        }
    }
}

/// Total order used wherever detections are ranked: score descending, then
/// box and extreme coordinates ascending, then source.
pub fn rank_detections(a: &Detection, b: &Detection) -> Ordering {
    let geometry = |d: &Detection| {
        let mut key = d.bbox.to_array().to_vec();
        for p in d.extremes.points() {
            key.push(p.x);
            key.push(p.y);
        }
        key
    };
    b.score
        .total_cmp(&a.score)
        .then_with(|| {
            geometry(a)
                .iter()
                .zip(geometry(b).iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.source.cmp(&b.source))
}

/// Mirror used for the second test-time view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    /// `x -> width - 1 - x`
    #[default]
    Horizontal,
    /// `y -> height - 1 - y`
    Vertical,
}

/// Maps detections made on a horizontally mirrored image back to the
/// original frame. Left and right extremes swap roles.
pub fn unflip_detections(dets: &[Detection], image_width: f64) -> Vec<Detection> {
    unflip_detections_along(dets, FlipAxis::Horizontal, image_width)
}

/// Like [`unflip_detections`] for either mirror; `extent` is the image size
/// along the flipped axis.
pub fn unflip_detections_along(dets: &[Detection], axis: FlipAxis, extent: f64) -> Vec<Detection> {
    dets.iter()
        .map(|d| {
            let e = match axis {
                FlipAxis::Horizontal => d.extremes.flip_horizontal(extent),
                FlipAxis::Vertical => d.extremes.flip_vertical(extent),
            };
            Detection::new(e, d.score, Source::Flipped)
        })
        .collect()
}

/// Soft non-maximum suppression; result sorted best first.
pub fn soft_nms(dets: &[Detection], cfg: &SoftNmsConfig) -> Vec<Detection> {
    let mut pool = dets.to_vec();
    let mut kept = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best_idx = (0..pool.len())
            .min_by(|&i, &j| rank_detections(&pool[i], &pool[j]))
            .expect("non-empty pool");
        let best = pool.swap_remove(best_idx);
        for d in pool.iter_mut() {
            d.score *= cfg.decay(iou(&best.bbox, &d.bbox));
        }
        pool.retain(|d| d.score >= cfg.score_floor);
        kept.push(best);
    }
    kept.sort_by(rank_detections);
    kept
}

/// Pools original-view detections with un-flipped mirror-view detections
/// and filters the union with Soft-NMS.
pub fn fuse_tta(
    original: &[Detection],
    flipped_raw: &[Detection],
    image_width: f64,
    cfg: &SoftNmsConfig,
) -> Vec<Detection> {
    fuse_tta_along(
        original,
        flipped_raw,
        FlipAxis::Horizontal,
        image_width,
        cfg,
    )
}

/// [`fuse_tta`] with the mirror chosen by `axis`.
pub fn fuse_tta_along(
    original: &[Detection],
    flipped_raw: &[Detection],
    axis: FlipAxis,
    extent: f64,
    cfg: &SoftNmsConfig,
) -> Vec<Detection> {
    let mut pooled = original.to_vec();
    pooled.extend(unflip_detections_along(flipped_raw, axis, extent));
    soft_nms(&pooled, cfg)
}
