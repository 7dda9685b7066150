//! Synthetic scenes and a controllable stand-in for a trained detector.
//!
//! All randomness comes from [`SimRng`]: xoshiro256** seeded through
//! SplitMix64, consumed in a fixed order so fixtures are reproducible in
//! any language that implements the same two generators.

use std::f64::consts::PI;

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::dataio::{RecistAnnotation, Split};
use crate::error::{Error, Result};
use crate::fusion::FlipAxis;
use crate::geometry::{
    bbox_from_extremes, extremes_from_recist, pad_bbox, BBox, ExtremePoints, FlipHorizontal,
    FlipVertical, Point2, RecistDiameters, Role, DEFAULT_BOX_PAD,
};
use crate::targets::{
    annotation_radius, draw_gaussian, offset_target, HeatmapBundle, TargetConfig,
};

/// Coordinates are multiples of this, so every offset is exact in `f32`.
pub const COORD_QUANTUM: f64 = 1.0 / 16.0;

/// Radius of the kernel stamped for a spurious peak, in cells.
pub const SPURIOUS_RADIUS: u32 = 2;

/// Spurious peaks keep at least this Chebyshev distance (cells) from every
/// true peak of the same map, exclusive.
pub const SPURIOUS_EXCLUSION: usize = 2;

const SPURIOUS_ATTEMPTS: usize = 64;

/// Seeded generator with the few distributions the simulator needs.
#[derive(Debug, Clone)]
pub struct SimRng(Xoshiro256StarStar);

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self(Xoshiro256StarStar::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal by Box-Muller, one pair of uniforms per draw.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    /// Knuth's multiplication method; fine for the small rates used here.
    pub fn poisson(&mut self, lambda: f64) -> usize {
        if !(lambda > 0.0) {
            return 0;
        }
        let limit = (-lambda).exp();
        let mut k = 0;
        let mut p = self.uniform();
        while p > limit {
            k += 1;
            p *= self.uniform();
        }
        k
    }
}

/// Controls scene packing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// In-plane pixel spacing, mm per pixel.
    pub pixel_spacing_mm: f64,
    /// Minimum separation between padded lesion boxes, pixels.
    pub min_gap: f64,
    /// Placement attempts per lesion before giving up.
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            pixel_spacing_mm: 0.8,
            min_gap: 8.0,
            max_retries: 2000,
        }
    }
}

/// Synthetic image: a size plus procedurally generated lesions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub key: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<RecistAnnotation>,
}

impl SyntheticScene {
    pub fn extremes(&self) -> Vec<ExtremePoints> {
        self.annotations
            .iter()
            .map(RecistAnnotation::extremes)
            .collect()
    }

    /// Padded ground-truth boxes, as recorded in annotation files.
    pub fn gt_boxes(&self) -> Vec<BBox> {
        self.annotations.iter().map(|a| a.bbox).collect()
    }

    /// The same scene mirrored left-right.
    pub fn flipped(&self) -> SyntheticScene {
        self.mirrored(FlipAxis::Horizontal)
    }

    /// The same scene mirrored along `axis`.
    pub fn mirrored(&self, axis: FlipAxis) -> SyntheticScene {
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        SyntheticScene {
            key: self.key.clone(),
            width: self.width,
            height: self.height,
            annotations: self
                .annotations
                .iter()
                .map(|a| match axis {
                    FlipAxis::Horizontal => RecistAnnotation {
                        diameters: a.diameters.flip_horizontal(w),
                        bbox: a.bbox.flip_horizontal(w),
                        ..a.clone()
                    },
                    FlipAxis::Vertical => RecistAnnotation {
                        diameters: a.diameters.flip_vertical(h),
                        bbox: a.bbox.flip_vertical(h),
                        ..a.clone()
                    },
                })
                .collect(),
        }
    }
}

/// Gap between two boxes along the separating axis; negative when they overlap.
pub fn box_gap(a: &BBox, b: &BBox) -> f64 {
    (b.x1 - a.x2)
        .max(a.x1 - b.x2)
        .max(b.y1 - a.y2)
        .max(a.y1 - b.y2)
}

fn quantize(v: f64) -> f64 {
    (v / COORD_QUANTUM).round() * COORD_QUANTUM
}

pub fn generate_scene(
    n_lesions: usize,
    image_size: (u32, u32),
    size_range_mm: (f64, f64),
    seed: u64,
) -> Result<SyntheticScene> {
    generate_scene_with(
        &SceneConfig::default(),
        n_lesions,
        image_size,
        size_range_mm,
        seed,
    )
}

/// Places `n_lesions` elliptical lesions, each described by its long axis
/// and the perpendicular short axis (`short = long * U(0.4, 0.95)`) at a
/// uniform orientation. Every keypoint lies in `[0, W-1] x [0, H-1]`.
pub fn generate_scene_with(
    cfg: &SceneConfig,
    n_lesions: usize,
    image_size: (u32, u32),
    size_range_mm: (f64, f64),
    seed: u64,
) -> Result<SyntheticScene> {
    let (lo, hi) = size_range_mm;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "size range must satisfy 0 < min <= max, got {lo}..{hi}"
        )));
    }
    if !(cfg.pixel_spacing_mm > 0.0) || !(cfg.min_gap >= 0.0) {
        return Err(Error::InvalidArgument(
            "pixel spacing must be positive and min_gap non-negative".into(),
        ));
    }
    let (w, h) = image_size;
    if w < 2 || h < 2 {
        return Err(Error::InvalidArgument(format!(
            "image size {w}x{h} is too small"
        )));
    }
    let (xmax, ymax) = (f64::from(w - 1), f64::from(h - 1));
    let mut rng = SimRng::new(seed);
    let mut annotations: Vec<RecistAnnotation> = Vec::with_capacity(n_lesions);
    let slice_intervals = [1.0, 2.5, 5.0];

    for k in 0..n_lesions {
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let long = rng.uniform_in(lo, hi) / cfg.pixel_spacing_mm;
            let short = long * rng.uniform_in(0.4, 0.95);
            let theta = rng.uniform_in(0.0, PI);
            let cx = rng.uniform_in(0.0, xmax);
            let cy = rng.uniform_in(0.0, ymax);
            let (c, s) = (theta.cos(), theta.sin());
            let p = |along: f64, across: f64| {
                Point2::new(
                    quantize(cx + along * c - across * s),
                    quantize(cy + along * s + across * c),
                )
            };
            let diameters = RecistDiameters::from_segments(
                (p(-long / 2.0, 0.0), p(long / 2.0, 0.0)),
                (p(0.0, -short / 2.0), p(0.0, short / 2.0)),
            );
            let in_bounds = diameters
                .endpoints()
                .iter()
                .all(|q| (0.0..=xmax).contains(&q.x) && (0.0..=ymax).contains(&q.y));
            let extremes = extremes_from_recist(&diameters);
            if !in_bounds || extremes.is_degenerate() {
                continue;
            }
            let bbox = pad_bbox(&bbox_from_extremes(&extremes), DEFAULT_BOX_PAD, None);
            if annotations
                .iter()
                .any(|a| box_gap(&a.bbox, &bbox) < cfg.min_gap)
            {
                continue;
            }
            placed = Some((diameters, bbox));
            break;
        }
        let Some((diameters, bbox)) = placed else {
            return Err(Error::InfeasibleScene(format!(
                "could not place lesion {} of {n_lesions} in {w}x{h} after {} attempts",
                k + 1,
                cfg.max_retries
            )));
        };
        let lesion_type = 1 + rng.below(8) as i32;
        let interval = slice_intervals[rng.below(slice_intervals.len())];
        annotations.push(RecistAnnotation {
            file_name: format!("scene_{seed}.png"),
            diameters_px: (diameters.long_length(), diameters.short_length()),
            diameters,
            bbox,
            lesion_type,
            spacing: (cfg.pixel_spacing_mm, cfg.pixel_spacing_mm, interval),
            split: Split::Test,
        });
    }
    Ok(SyntheticScene {
        key: format!("scene_{seed}.png"),
        width: w,
        height: h,
        annotations,
    })
}

/// How far simulated heatmaps depart from perfect targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationConfig {
    /// Standard deviation of additive Gaussian noise on keypoint maps.
    pub noise_sigma: f64,
    /// Probability that one keypoint's kernel is omitted.
    pub peak_drop_prob: f64,
    /// Expected number of spurious peaks per keypoint map.
    pub spurious_rate: f64,
    /// Peak cells move by up to this many cells along each axis.
    pub jitter_cells: u32,
    /// Spurious peak scores are drawn from `U(spurious_min_score, 1)`.
    pub spurious_min_score: f64,
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            peak_drop_prob: 0.0,
            spurious_rate: 0.0,
            jitter_cells: 0,
            spurious_min_score: 0.1,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.peak_drop_prob) {
            return Err(Error::InvalidArgument(
                "peak_drop_prob must lie in [0, 1]".into(),
            ));
        }
        if !(self.spurious_rate >= 0.0 && self.spurious_rate.is_finite()) {
            return Err(Error::InvalidArgument("spurious_rate must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.spurious_min_score) {
            return Err(Error::InvalidArgument(
                "spurious_min_score must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Renders the scene's targets and degrades them.
///
/// Draw order: for each lesion and each role (top, left, bottom, right,
/// center) one drop draw and two jitter draws; then for each map a Poisson
/// count followed by, per spurious peak, cell draws and a score draw; then
/// one normal per cell of each keypoint map in raster order (skipped when
/// `noise_sigma` is zero). Offsets stay exact at surviving peaks, follow a
/// jittered peak to its new cell, and are absent for dropped peaks.
pub fn simulate_heatmaps(
    scene: &SyntheticScene,
    cfg: &DegradationConfig,
    stride: u32,
) -> Result<HeatmapBundle> {
    cfg.validate()?;
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let target_cfg = TargetConfig::default();
    let mut bundle = HeatmapBundle::for_input(scene.width, scene.height, stride);
    let (rows, cols) = (bundle.rows(), bundle.cols());
    let s = f64::from(stride);
    let mut rng = SimRng::new(cfg.seed);
    let mut true_cells: [Vec<(usize, usize)>; 5] = Default::default();
    let jitter = cfg.jitter_cells as i64;
    let shift = |v: usize, d: i64, n: usize| (v as i64 + d).clamp(0, n as i64 - 1) as usize;

    for (k, ann) in scene.annotations.iter().enumerate() {
        let e = ann.extremes();
        let radius = annotation_radius(&e, stride, &target_cfg)?;
        let sigma = f64::from(radius) / target_cfg.sigma_divisor;
        for role in Role::ALL {
            let p = e.get(role);
            let (qx, qy) = (p.x / s, p.y / s);
            if !(qx >= 0.0 && qy >= 0.0 && qx < cols as f64 && qy < rows as f64) {
                return Err(Error::KeypointOutOfBounds {
                    annotation: k,
                    role: role.name(),
                    x: p.x,
                    y: p.y,
                    cols,
                    rows,
                    stride,
                });
            }
            let (row, col) = (qy.floor() as usize, qx.floor() as usize);
            true_cells[role.index()].push((row, col));

            let dropped = rng.uniform() < cfg.peak_drop_prob;
            let dr = rng.below(2 * cfg.jitter_cells as usize + 1) as i64 - jitter;
            let dc = rng.below(2 * cfg.jitter_cells as usize + 1) as i64 - jitter;
            if dropped {
                continue;
            }
            let (row, col) = (shift(row, dr, rows), shift(col, dc, cols));
            draw_gaussian(bundle.keypoint_mut(role), row, col, radius, sigma, 1.0);
            if role != Role::Center {
                let (dx, dy) = offset_target(&p, stride);
                let i = 2 * role.index();
                bundle.offsets[i].set(row, col, dx as f32);
                bundle.offsets[i + 1].set(row, col, dy as f32);
            }
        }
    }

    let spurious_sigma = f64::from(SPURIOUS_RADIUS) / target_cfg.sigma_divisor;
    for role in Role::ALL {
        let count = rng.poisson(cfg.spurious_rate);
        for _ in 0..count {
            let mut cell = None;
            for _ in 0..SPURIOUS_ATTEMPTS {
                let (r, c) = (rng.below(rows), rng.below(cols));
                let clear = true_cells[role.index()]
                    .iter()
                    .all(|&(tr, tc)| tr.abs_diff(r).max(tc.abs_diff(c)) > SPURIOUS_EXCLUSION);
                if clear {
                    cell = Some((r, c));
                    break;
                }
            }
            let score = rng.uniform_in(cfg.spurious_min_score, 1.0) as f32;
            if let Some((r, c)) = cell {
                draw_gaussian(
                    bundle.keypoint_mut(role),
                    r,
                    c,
                    SPURIOUS_RADIUS,
                    spurious_sigma,
                    score,
                );
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        for role in Role::ALL {
            for v in bundle.keypoint_mut(role).as_mut_slice() {
                let noisy = f64::from(*v) + cfg.noise_sigma * rng.normal();
                *v = noisy.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(bundle)
}
