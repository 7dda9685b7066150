//! Geometric primitives for RECIST annotations.
//!
//! All coordinates are 0-based continuous pixel positions at input
//! resolution. Boxes use the corner convention with `width = x2 - x1`
//! (no `+1`), which keeps sub-pixel refinement and evaluation consistent.

use serde::{Deserialize, Serialize};

/// Padding applied around RECIST measurements when deriving boxes.
pub const DEFAULT_BOX_PAD: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// The two RECIST line segments of one lesion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecistDiameters {
    pub long_a: Point2,
    pub long_b: Point2,
    pub short_a: Point2,
    pub short_b: Point2,
}

impl RecistDiameters {
    /// Builds diameters from two segments, assigning the longer one to the
    /// long diameter. The first segment wins exact ties.
    pub fn from_segments(first: (Point2, Point2), second: (Point2, Point2)) -> Self {
        let first_len = first.0.distance(&first.1);
        let second_len = second.0.distance(&second.1);
        let (long, short) = if second_len > first_len {
            (second, first)
        } else {
            (first, second)
        };
        Self {
            long_a: long.0,
            long_b: long.1,
            short_a: short.0,
            short_b: short.1,
        }
    }

    pub fn long_length(&self) -> f64 {
        self.long_a.distance(&self.long_b)
    }

    pub fn short_length(&self) -> f64 {
        self.short_a.distance(&self.short_b)
    }

    /// Endpoints in priority order: long diameter first.
    pub fn endpoints(&self) -> [Point2; 4] {
        [self.long_a, self.long_b, self.short_a, self.short_b]
    }
}

/// Keypoint roles, in the fixed channel order used by heatmap bundles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Top = 0,
    Left = 1,
    Bottom = 2,
    Right = 3,
    Center = 4,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::Top,
        Role::Left,
        Role::Bottom,
        Role::Right,
        Role::Center,
    ];
    pub const EXTREMES: [Role; 4] = [Role::Top, Role::Left, Role::Bottom, Role::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Top => "top",
            Role::Left => "left",
            Role::Bottom => "bottom",
            Role::Right => "right",
            Role::Center => "center",
        }
    }
}

/// Top-, left-, bottom- and right-most points of a lesion plus the center
/// of the box they span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremePoints {
    pub top: Point2,
    pub left: Point2,
    pub bottom: Point2,
    pub right: Point2,
    pub center: Point2,
}

impl ExtremePoints {
    /// Assembles extremes and derives the center from them.
    pub fn new(top: Point2, left: Point2, bottom: Point2, right: Point2) -> Self {
        let center = Point2::new((left.x + right.x) / 2.0, (top.y + bottom.y) / 2.0);
        Self {
            top,
            left,
            bottom,
            right,
            center,
        }
    }

    pub fn get(&self, role: Role) -> Point2 {
        match role {
            Role::Top => self.top,
            Role::Left => self.left,
            Role::Bottom => self.bottom,
            Role::Right => self.right,
            Role::Center => self.center,
        }
    }

    pub fn points(&self) -> [Point2; 5] {
        [self.top, self.left, self.bottom, self.right, self.center]
    }

    /// Zero width or zero height: all endpoints on an axis-parallel line.
    pub fn is_degenerate(&self) -> bool {
        self.right.x - self.left.x <= 0.0 || self.bottom.y - self.top.y <= 0.0
    }

    /// Checks the ordering invariants (`top.y <= bottom.y`, `left.x <= right.x`).
    pub fn is_ordered(&self) -> bool {
        self.top.y <= self.bottom.y && self.left.x <= self.right.x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.x1 && p.x <= self.x2 && p.y >= self.y1 && p.y <= self.y2
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

// Sort key for choosing an extreme: primary coordinate, then diameter
// priority (long first), then the secondary coordinate.
fn pick<F>(d: &RecistDiameters, key: F) -> Point2
where
    F: Fn(&Point2) -> (f64, f64),
{
    let mut best: Option<(usize, Point2)> = None;
    for (i, p) in d.endpoints().into_iter().enumerate() {
        let candidate = (i / 2, p);
        best = match best {
            None => Some(candidate),
            Some((bi, bp)) => {
                let (kp, sp) = key(&p);
                let (kb, sb) = key(&bp);
                let better = kp
                    .total_cmp(&kb)
                    .then((i / 2).cmp(&bi))
                    .then(sp.total_cmp(&sb))
                    .is_lt();
                if better {
                    Some(candidate)
                } else {
                    Some((bi, bp))
                }
            }
        };
    }
    best.map(|(_, p)| p).expect("four endpoints")
}

/// Extracts the four extreme points of a RECIST annotation.
///
/// Ties prefer long-diameter endpoints, then the smaller x (for top/bottom)
/// or smaller y (for left/right). One endpoint may fill two roles. Check
/// [`ExtremePoints::is_degenerate`] for zero-width or zero-height inputs.
pub fn extremes_from_recist(d: &RecistDiameters) -> ExtremePoints {
    let top = pick(d, |p| (p.y, p.x));
    let bottom = pick(d, |p| (-p.y, p.x));
    let left = pick(d, |p| (p.x, p.y));
    let right = pick(d, |p| (-p.x, p.y));
    ExtremePoints::new(top, left, bottom, right)
}

pub fn bbox_from_extremes(e: &ExtremePoints) -> BBox {
    BBox::new(e.left.x, e.top.y, e.right.x, e.bottom.y)
}

/// Grows a box by `pad` on every side, clamping to `[0, w] x [0, h]` when
/// `bounds = Some((w, h))`.
pub fn pad_bbox(b: &BBox, pad: f64, bounds: Option<(f64, f64)>) -> BBox {
    let mut out = BBox::new(b.x1 - pad, b.y1 - pad, b.x2 + pad, b.y2 + pad);
    if let Some((w, h)) = bounds {
        out.x1 = out.x1.clamp(0.0, w);
        out.y1 = out.y1.clamp(0.0, h);
        out.x2 = out.x2.clamp(0.0, w);
        out.y2 = out.y2.clamp(0.0, h);
    }
    out
}

/// Intersection over union with continuous geometry; 0 for an empty union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Horizontal mirror about the image's vertical axis (`x -> width - 1 - x`).
pub trait FlipHorizontal {
    fn flip_horizontal(&self, image_width: f64) -> Self;
}

impl FlipHorizontal for Point2 {
    fn flip_horizontal(&self, image_width: f64) -> Self {
        Point2::new(image_width - 1.0 - self.x, self.y)
    }
}

impl FlipHorizontal for BBox {
    fn flip_horizontal(&self, image_width: f64) -> Self {
        BBox::new(
            image_width - 1.0 - self.x2,
            self.y1,
            image_width - 1.0 - self.x1,
            self.y2,
        )
    }
}

impl FlipHorizontal for ExtremePoints {
    // left and right trade places under the mirror
    fn flip_horizontal(&self, image_width: f64) -> Self {
        ExtremePoints {
            top: self.top.flip_horizontal(image_width),
            left: self.right.flip_horizontal(image_width),
            bottom: self.bottom.flip_horizontal(image_width),
            right: self.left.flip_horizontal(image_width),
            center: self.center.flip_horizontal(image_width),
        }
    }
}

impl FlipHorizontal for RecistDiameters {
    fn flip_horizontal(&self, image_width: f64) -> Self {
        RecistDiameters {
            long_a: self.long_a.flip_horizontal(image_width),
            long_b: self.long_b.flip_horizontal(image_width),
            short_a: self.short_a.flip_horizontal(image_width),
            short_b: self.short_b.flip_horizontal(image_width),
        }
    }
}

/// Vertical mirror about the image's horizontal axis (`y -> height - 1 - y`).
pub trait FlipVertical {
    fn flip_vertical(&self, image_height: f64) -> Self;
}

impl FlipVertical for Point2 {
    fn flip_vertical(&self, image_height: f64) -> Self {
        Point2::new(self.x, image_height - 1.0 - self.y)
    }
}

impl FlipVertical for BBox {
    fn flip_vertical(&self, image_height: f64) -> Self {
        BBox::new(
            self.x1,
            image_height - 1.0 - self.y2,
            self.x2,
            image_height - 1.0 - self.y1,
        )
    }
}

impl FlipVertical for ExtremePoints {
    // top and bottom trade places under the mirror
    fn flip_vertical(&self, image_height: f64) -> Self {
        ExtremePoints {
            top: self.bottom.flip_vertical(image_height),
            left: self.left.flip_vertical(image_height),
            bottom: self.top.flip_vertical(image_height),
            right: self.right.flip_vertical(image_height),
            center: self.center.flip_vertical(image_height),
        }
    }
}

impl FlipVertical for RecistDiameters {
    fn flip_vertical(&self, image_height: f64) -> Self {
        RecistDiameters {
            long_a: self.long_a.flip_vertical(image_height),
            long_b: self.long_b.flip_vertical(image_height),
            short_a: self.short_a.flip_vertical(image_height),
            short_b: self.short_b.flip_vertical(image_height),
        }
    }
}
