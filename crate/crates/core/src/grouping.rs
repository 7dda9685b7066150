//! Geometric grouping of keypoint heatmaps into scored detections.
//!
//! Three steps: local-peak extraction per extreme map, brute-force
//! quadruple enumeration validated by the center map, and sub-cell
//! refinement with the offset planes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bbox_from_extremes, BBox, ExtremePoints, Point2, Role};
use crate::grid::Grid2;
use crate::targets::HeatmapBundle;

/// How the center response of a quadruple is looked up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CenterLookup {
    /// Cell containing the midpoint of the offset-refined extremes
    /// (`floor` per component). Matches how center targets are rendered.
    #[default]
    Refined,
    /// Nearest cell to the midpoint of the raw peak cells (round half up).
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupingConfig {
    /// Extreme-point peak threshold (strict).
    pub tau_e: f64,
    /// Center-point validation threshold (strict).
    pub tau_c: f64,
    /// Peaks kept per extreme map.
    pub k1: usize,
    /// Quadruples kept per image.
    pub k2: usize,
    /// Side of the square max-pooling window.
    pub kernel: usize,
    pub center_lookup: CenterLookup,
    /// Also require every extreme to lie inside the box the quadruple
    /// spans (top and bottom within `[left.x, right.x]`, left and right
    /// within `[top.y, bottom.y]`). Off leaves only the top/bottom and
    /// left/right order checks.
    pub enclosing: bool,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            tau_e: 0.1,
            tau_c: 0.1,
            k1: 40,
            k2: 100,
            kernel: 3,
            center_lookup: CenterLookup::Refined,
            enclosing: true,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_e) || !(0.0..=1.0).contains(&self.tau_c) {
            return Err(Error::InvalidArgument(
                "thresholds must lie in [0, 1]".into(),
            ));
        }
        if self.k1 == 0 || self.k2 == 0 {
            return Err(Error::InvalidArgument("k1 and k2 must be >= 1".into()));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "kernel must be odd and >= 1, got {}",
                self.kernel
            )));
        }
        Ok(())
    }
}

/// A local maximum of one extreme-point heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub role: Role,
    /// Sub-cell offset read from the offset planes; zero until attached.
    pub dx: f64,
    pub dy: f64,
}

impl Peak {
    /// Refined column coordinate in cell units.
    pub fn x(&self) -> f64 {
        self.col as f64 + self.dx
    }

    /// Refined row coordinate in cell units.
    pub fn y(&self) -> f64 {
        self.row as f64 + self.dy
    }
}

/// Peaks of the four extreme maps, in role order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolePeaks {
    pub top: Vec<Peak>,
    pub left: Vec<Peak>,
    pub bottom: Vec<Peak>,
    pub right: Vec<Peak>,
}

impl RolePeaks {
    pub fn get(&self, role: Role) -> &[Peak] {
        match role {
            Role::Top => &self.top,
            Role::Left => &self.left,
            Role::Bottom => &self.bottom,
            Role::Right => &self.right,
            Role::Center => &[],
        }
    }

    fn get_mut(&mut self, role: Role) -> &mut Vec<Peak> {
        match role {
            Role::Top => &mut self.top,
            Role::Left => &mut self.left,
            Role::Bottom => &mut self.bottom,
            Role::Right => &mut self.right,
            Role::Center => unreachable!("no center peaks"),
        }
    }
}

/// Which test-time view a detection was produced from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    #[default]
    Original,
    Flipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Input-pixel coordinates.
    pub extremes: ExtremePoints,
    /// Sum of the four extreme scores plus twice the center score.
    pub score: f64,
    /// Tight, unpadded box around the extremes.
    pub bbox: BBox,
    pub source: Source,
}

impl Detection {
    pub fn new(extremes: ExtremePoints, score: f64, source: Source) -> Self {
        Self {
            bbox: bbox_from_extremes(&extremes),
            extremes,
            score,
            source,
        }
    }
}

/// A grouped, not yet refined quadruple in grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadruple {
    /// Top, left, bottom, right.
    pub peaks: [Peak; 4],
    pub center_cell: (usize, usize),
    pub center_score: f64,
    pub score: f64,
}

impl Quadruple {
    fn cells(&self) -> [(usize, usize); 4] {
        self.peaks.map(|p| (p.row, p.col))
    }
}

/// Ranking order: score descending, then peak cells ascending in role order.
pub fn rank_quadruples(a: &Quadruple, b: &Quadruple) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.cells().cmp(&b.cells()))
}

fn rank_peaks(a: &Peak, b: &Peak) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

// Separable sliding max over a (2h+1)^2 window clipped to the grid.
fn neighborhood_max(map: &Grid2<f32>, half: usize) -> Grid2<f32> {
    let (rows, cols) = map.shape();
    let mut horiz = Grid2::<f32>::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let lo = c.saturating_sub(half);
            let hi = (c + half).min(cols - 1);
            let mut m = f32::NEG_INFINITY;
            for cc in lo..=hi {
                m = m.max(map.get(r, cc));
            }
            horiz.set(r, c, m);
        }
    }
    let mut out = Grid2::<f32>::zeros(rows, cols);
    for r in 0..rows {
        let lo = r.saturating_sub(half);
        let hi = (r + half).min(rows - 1);
        for c in 0..cols {
            let mut m = f32::NEG_INFINITY;
            for rr in lo..=hi {
                m = m.max(horiz.get(rr, c));
            }
            out.set(r, c, m);
        }
    }
    out
}

/// Local maxima of `map` scoring above `tau_e`, best `k1` first.
///
/// A cell qualifies when it equals the max of its `kernel x kernel`
/// neighborhood, so every cell of a plateau qualifies.
pub fn extract_peaks(map: &Grid2<f32>, cfg: &GroupingConfig, role: Role) -> Vec<Peak> {
    if map.rows() == 0 || map.cols() == 0 {
        return Vec::new();
    }
    let pooled = neighborhood_max(map, cfg.kernel / 2);
    let mut peaks: Vec<Peak> = map
        .as_slice()
        .iter()
        .zip(pooled.as_slice())
        .enumerate()
        .filter(|&(_, (&v, &m))| v == m && f64::from(v) > cfg.tau_e)
        .map(|(i, (&v, _))| Peak {
            row: i / map.cols(),
            col: i % map.cols(),
            score: f64::from(v),
            role,
            dx: 0.0,
            dy: 0.0,
        })
        .collect();
    peaks.sort_by(rank_peaks);
    peaks.truncate(cfg.k1);
    peaks
}

/// Reads each peak's sub-cell offset from the bundle's offset planes.
pub fn attach_offsets(peaks: &mut [Peak], bundle: &HeatmapBundle) {
    for p in peaks {
        let (dx, dy) = bundle.offset(p.role);
        p.dx = f64::from(dx.get(p.row, p.col));
        p.dy = f64::from(dy.get(p.row, p.col));
    }
}

/// Cell of the center map checked for a quadruple, or `None` if it falls
/// outside the grid.
pub fn center_cell(
    t: &Peak,
    l: &Peak,
    b: &Peak,
    r: &Peak,
    lookup: CenterLookup,
    rows: usize,
    cols: usize,
) -> Option<(usize, usize)> {
    let (row, col) = match lookup {
        CenterLookup::Refined => (
            ((t.y() + b.y()) / 2.0).floor(),
            ((l.x() + r.x()) / 2.0).floor(),
        ),
        CenterLookup::Nearest => (
            (t.row + b.row).div_ceil(2) as f64,
            (l.col + r.col).div_ceil(2) as f64,
        ),
    };
    if row >= 0.0 && col >= 0.0 && row < rows as f64 && col < cols as f64 {
        Some((row as usize, col as usize))
    } else {
        None
    }
}

// Max-heap on rank, so the worst kept candidate sits on top.
struct Ranked(Quadruple);

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        rank_quadruples(&self.0, &other.0) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_quadruples(&self.0, &other.0)
    }
}

fn push_bounded(heap: &mut BinaryHeap<Ranked>, q: Quadruple, k: usize) {
    if heap.len() < k {
        heap.push(Ranked(q));
    } else if let Some(worst) = heap.peek() {
        if rank_quadruples(&q, &worst.0) == Ordering::Less {
            heap.pop();
            heap.push(Ranked(q));
        }
    }
}

fn quadruples_for_top(
    t: &Peak,
    peaks: &RolePeaks,
    center: &Grid2<f32>,
    cfg: &GroupingConfig,
) -> BinaryHeap<Ranked> {
    let most = peaks.bottom.len() * peaks.left.len() * peaks.right.len();
    let mut heap = BinaryHeap::with_capacity(cfg.k2.min(most) + 1);
    let (rows, cols) = center.shape();
    for b in peaks.bottom.iter().filter(|b| b.y() >= t.y()) {
        let spans_rows = |p: &Peak| !cfg.enclosing || (p.y() >= t.y() && p.y() <= b.y());
        for l in peaks
            .left
            .iter()
            .filter(|l| spans_rows(l) && (!cfg.enclosing || (l.x() <= t.x() && l.x() <= b.x())))
        {
            for r in peaks.right.iter().filter(|r| {
                r.x() >= l.x()
                    && spans_rows(r)
                    && (!cfg.enclosing || (r.x() >= t.x() && r.x() >= b.x()))
            }) {
                let Some(cell) = center_cell(t, l, b, r, cfg.center_lookup, rows, cols) else {
                    continue;
                };
                let cs = f64::from(center.get(cell.0, cell.1));
                if cs <= cfg.tau_c {
                    continue;
                }
                let score = t.score + l.score + b.score + r.score + 2.0 * cs;
                let q = Quadruple {
                    peaks: [*t, *l, *b, *r],
                    center_cell: cell,
                    center_score: cs,
                    score,
                };
                push_bounded(&mut heap, q, cfg.k2);
            }
        }
    }
    heap
}

fn merge(mut a: BinaryHeap<Ranked>, b: BinaryHeap<Ranked>, k: usize) -> BinaryHeap<Ranked> {
    for q in b {
        push_bounded(&mut a, q.0, k);
    }
    a
}

/// Enumerates every top/left/bottom/right combination, keeps those whose
/// center response exceeds `tau_c`, and returns the best `k2` by rank.
///
/// Quadruples with `top` below `bottom` or `left` right of `right` (in
/// refined cell coordinates) are skipped, as are non-enclosing ones when
/// `cfg.enclosing` is set. Work is split across the rayon
/// pool by top peak; the output does not depend on the worker count or on
/// the order of the input peak lists.
pub fn enumerate_quadruples(
    peaks: &RolePeaks,
    center: &Grid2<f32>,
    cfg: &GroupingConfig,
) -> Vec<Quadruple> {
    let k = cfg.k2;
    #[cfg(feature = "parallel")]
    let heap = {
        use rayon::prelude::*;
        peaks
            .top
            .par_iter()
            .map(|t| quadruples_for_top(t, peaks, center, cfg))
            .reduce(BinaryHeap::new, |a, b| merge(a, b, k))
    };
    #[cfg(not(feature = "parallel"))]
    let heap = peaks
        .top
        .iter()
        .map(|t| quadruples_for_top(t, peaks, center, cfg))
        .fold(BinaryHeap::new(), |a, b| merge(a, b, k));

    let mut out: Vec<Quadruple> = heap.into_iter().map(|r| r.0).collect();
    out.sort_by(rank_quadruples);
    out
}

/// Maps quadruples to input pixels: each extreme becomes
/// `stride * (cell + offset_at_cell)`; center and box are re-derived.
pub fn refine_with_offsets(
    quads: &[Quadruple],
    offsets: &[Grid2<f32>; 8],
    stride: u32,
) -> Vec<Detection> {
    let s = f64::from(stride);
    quads
        .iter()
        .map(|q| {
            let [t, l, b, r] = q.peaks.map(|p| {
                let i = 2 * p.role.index();
                let dx = f64::from(offsets[i].get(p.row, p.col));
                let dy = f64::from(offsets[i + 1].get(p.row, p.col));
                Point2::new(s * (p.col as f64 + dx), s * (p.row as f64 + dy))
            });
            Detection::new(ExtremePoints::new(t, l, b, r), q.score, Source::Original)
        })
        .collect()
}

/// Extracts and offset-annotates peaks for the four extreme maps.
pub fn bundle_peaks(bundle: &HeatmapBundle, cfg: &GroupingConfig) -> RolePeaks {
    let mut peaks = RolePeaks::default();
    for role in Role::EXTREMES {
        let mut found = extract_peaks(bundle.keypoint(role), cfg, role);
        attach_offsets(&mut found, bundle);
        *peaks.get_mut(role) = found;
    }
    peaks
}

/// Full grouping pipeline for one image, best detection first.
pub fn detect(bundle: &HeatmapBundle, cfg: &GroupingConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    bundle.validate()?;
    let peaks = bundle_peaks(bundle, cfg);
    let quads = enumerate_quadruples(&peaks, bundle.keypoint(Role::Center), cfg);
    Ok(refine_with_offsets(&quads, &bundle.offsets, bundle.stride))
}
