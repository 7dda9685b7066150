//! Ground-truth rendering: Gaussian keypoint heatmaps and sub-cell offsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ExtremePoints, Point2, Role};
use crate::grid::Grid2;

/// Down-sampling factor between input pixels and heatmap cells.
pub const DEFAULT_STRIDE: u32 = 4;

/// Names of the 13 planes of a bundle, in storage order.
pub const CHANNEL_NAMES: [&str; 13] = [
    "top",
    "left",
    "bottom",
    "right",
    "center",
    "top.dx",
    "top.dy",
    "left.dx",
    "left.dy",
    "bottom.dx",
    "bottom.dy",
    "right.dx",
    "right.dy",
];

/// Five keypoint heatmaps plus eight offset planes at output resolution.
///
/// Keypoint maps are indexed by [`Role::index`]. Offset planes are stored as
/// `(dx, dy)` pairs for the four extreme roles; the center has none.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapBundle {
    pub keypoints: [Grid2<f32>; 5],
    pub offsets: [Grid2<f32>; 8],
    pub stride: u32,
    /// `(width, height)` in input pixels.
    pub input_size: (u32, u32),
}

impl HeatmapBundle {
    pub fn zeros(rows: usize, cols: usize, stride: u32, input_size: (u32, u32)) -> Self {
        Self {
            keypoints: std::array::from_fn(|_| Grid2::zeros(rows, cols)),
            offsets: std::array::from_fn(|_| Grid2::zeros(rows, cols)),
            stride,
            input_size,
        }
    }

    /// An all-zero bundle whose grid covers `input_size` at `stride`.
    pub fn for_input(input_width: u32, input_height: u32, stride: u32) -> Self {
        let (rows, cols) = output_shape(input_width, input_height, stride);
        Self::zeros(rows, cols, stride, (input_width, input_height))
    }

    pub fn rows(&self) -> usize {
        self.keypoints[0].rows()
    }

    pub fn cols(&self) -> usize {
        self.keypoints[0].cols()
    }

    pub fn keypoint(&self, role: Role) -> &Grid2<f32> {
        &self.keypoints[role.index()]
    }

    pub fn keypoint_mut(&mut self, role: Role) -> &mut Grid2<f32> {
        &mut self.keypoints[role.index()]
    }

    /// `(dx, dy)` planes of an extreme role. Panics for [`Role::Center`].
    pub fn offset(&self, role: Role) -> (&Grid2<f32>, &Grid2<f32>) {
        assert!(role != Role::Center, "the center role has no offset planes");
        let i = 2 * role.index();
        (&self.offsets[i], &self.offsets[i + 1])
    }

    /// All 13 planes in storage order.
    pub fn planes(&self) -> impl Iterator<Item = &Grid2<f32>> {
        self.keypoints.iter().chain(self.offsets.iter())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        let (rows, cols) = (self.rows(), self.cols());
        for plane in self.planes() {
            plane.ensure_shape(rows, cols)?;
        }
        for map in &self.keypoints {
            if map.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidArgument(
                    "keypoint heatmap values must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Grid shape `(rows, cols)` covering an input image at a given stride.
pub fn output_shape(input_width: u32, input_height: u32, stride: u32) -> (usize, usize) {
    let s = stride.max(1);
    (
        input_height.div_ceil(s) as usize,
        input_width.div_ceil(s) as usize,
    )
}

/// Controls the Gaussian kernel size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    /// IoU a perturbed box must keep with the original.
    pub min_overlap: f64,
    /// `sigma = radius / sigma_divisor`.
    pub sigma_divisor: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            min_overlap: 0.3,
            sigma_divisor: 3.0,
        }
    }
}

/// Kernel radius in output cells for a box of the given size (also in cells).
///
/// The radius is the largest `r` such that moving the box corners by `r`
/// (translating the box diagonally, shrinking it, or growing it) keeps an
/// IoU of at least `min_overlap` with the original. Floored to an integer,
/// never below 1.
pub fn gaussian_radius(box_width: f64, box_height: f64, min_overlap: f64) -> Result<u32> {
    if !(box_width > 0.0 && box_height > 0.0) || !box_width.is_finite() || !box_height.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "box dimensions must be positive, got {box_width}x{box_height}"
        )));
    }
    if !(min_overlap > 0.0 && min_overlap < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "min_overlap must lie in (0, 1), got {min_overlap}"
        )));
    }
    let (w, h, o) = (box_width, box_height, min_overlap);
    let sum = w + h;
    let prod = w * h;

    // translated by (r, r): (w-r)(h-r) >= 2o/(1+o) * wh
    let c = prod * (1.0 - o) / (1.0 + o);
    let translated = (sum - (sum * sum - 4.0 * c).sqrt()) / 2.0;

    // shrunk by r on each side: (w-2r)(h-2r) >= o * wh
    let shrunk = (2.0 * sum - (4.0 * sum * sum - 16.0 * prod * (1.0 - o)).sqrt()) / 8.0;

    // grown by r on each side: wh >= o * (w+2r)(h+2r)
    let grown = (-2.0 * o * sum + (4.0 * o * o * sum * sum + 16.0 * o * (1.0 - o) * prod).sqrt())
        / (8.0 * o);

    let r = translated.min(shrunk).min(grown).floor();
    Ok((r as u32).max(1))
}

/// Fractional cell offset of `p` at stride `s`: `p/s - floor(p/s)`.
pub fn offset_target(p: &Point2, stride: u32) -> (f64, f64) {
    let s = f64::from(stride);
    let (qx, qy) = (p.x / s, p.y / s);
    (qx - qx.floor(), qy - qy.floor())
}

/// One annotation's ground-truth location for a role.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtCell {
    pub row: usize,
    pub col: usize,
    pub dx: f64,
    pub dy: f64,
}

/// Rendered targets plus the per-annotation bookkeeping the losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBundle {
    pub bundle: HeatmapBundle,
    pub n_objects: usize,
    /// Indexed by [`Role::index`]; entry `k` belongs to annotation `k`.
    pub gt_cells: [Vec<GtCell>; 5],
}

fn locate(
    p: &Point2,
    stride: u32,
    rows: usize,
    cols: usize,
    annotation: usize,
    role: Role,
) -> Result<GtCell> {
    let s = f64::from(stride);
    let (qx, qy) = (p.x / s, p.y / s);
    let inside = p.is_finite() && qx >= 0.0 && qy >= 0.0 && qx < cols as f64 && qy < rows as f64;
    if !inside {
        return Err(Error::KeypointOutOfBounds {
            annotation,
            role: role.name(),
            x: p.x,
            y: p.y,
            cols,
            rows,
            stride,
        });
    }
    let (dx, dy) = offset_target(p, stride);
    Ok(GtCell {
        row: qy.floor() as usize,
        col: qx.floor() as usize,
        dx,
        dy,
    })
}

/// Stamps a Gaussian of the given radius at `(row, col)` with element-wise max.
pub fn draw_gaussian(
    map: &mut Grid2<f32>,
    row: usize,
    col: usize,
    radius: u32,
    sigma: f64,
    peak: f32,
) {
    let r = radius as isize;
    let denom = 2.0 * sigma * sigma;
    let (rows, cols) = (map.rows() as isize, map.cols() as isize);
    for dr in -r..=r {
        let rr = row as isize + dr;
        if rr < 0 || rr >= rows {
            continue;
        }
        for dc in -r..=r {
            let cc = col as isize + dc;
            if cc < 0 || cc >= cols {
                continue;
            }
            let d2 = (dr * dr + dc * dc) as f64;
            let v = ((-d2 / denom).exp() as f32) * peak;
            let slot = map.get_mut(rr as usize, cc as usize);
            if v > *slot {
                *slot = v;
            }
        }
    }
}

/// Kernel radius used for one annotation's keypoints.
pub fn annotation_radius(e: &ExtremePoints, stride: u32, cfg: &TargetConfig) -> Result<u32> {
    let s = f64::from(stride);
    let w = ((e.right.x - e.left.x) / s).max(1.0);
    let h = ((e.bottom.y - e.top.y) / s).max(1.0);
    gaussian_radius(w, h, cfg.min_overlap)
}

/// Renders multi-peak Gaussian keypoint targets and exact offset targets.
///
/// Each role's map is the element-wise max of one kernel per annotation,
/// centred on `floor(p / stride)`. Offset planes hold `p/s - floor(p/s)` at
/// ground-truth cells and zero elsewhere.
pub fn render_targets(
    annotations: &[ExtremePoints],
    rows: usize,
    cols: usize,
    stride: u32,
    cfg: &TargetConfig,
) -> Result<TargetBundle> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if !(cfg.sigma_divisor > 0.0) {
        return Err(Error::InvalidArgument(
            "sigma_divisor must be positive".into(),
        ));
    }
    let input_size = (cols as u32 * stride, rows as u32 * stride);
    let mut bundle = HeatmapBundle::zeros(rows, cols, stride, input_size);
    let mut gt_cells: [Vec<GtCell>; 5] = Default::default();

    for (k, e) in annotations.iter().enumerate() {
        let radius = annotation_radius(e, stride, cfg)?;
        let sigma = f64::from(radius) / cfg.sigma_divisor;
        for role in Role::ALL {
            let cell = locate(&e.get(role), stride, rows, cols, k, role)?;
            draw_gaussian(
                bundle.keypoint_mut(role),
                cell.row,
                cell.col,
                radius,
                sigma,
                1.0,
            );
            if role != Role::Center {
                let i = 2 * role.index();
                bundle.offsets[i].set(cell.row, cell.col, cell.dx as f32);
                bundle.offsets[i + 1].set(cell.row, cell.col, cell.dy as f32);
            }
            gt_cells[role.index()].push(cell);
        }
    }

    Ok(TargetBundle {
        bundle,
        n_objects: annotations.len(),
        gt_cells,
    })
}

/// [`render_targets`] on the grid that covers `input_size` at `stride`.
pub fn render_targets_for_input(
    annotations: &[ExtremePoints],
    input_width: u32,
    input_height: u32,
    stride: u32,
    cfg: &TargetConfig,
) -> Result<TargetBundle> {
    let (rows, cols) = output_shape(input_width, input_height, stride.max(1));
    let mut t = render_targets(annotations, rows, cols, stride, cfg)?;
    t.bundle.input_size = (input_width, input_height);
    Ok(t)
}
