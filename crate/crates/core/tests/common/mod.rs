//! Brute-force reference implementations and random fixture builders shared
//! by the integration and acceptance tests. Nothing here calls the code it
//! is used to check, apart from plain data types.

#![allow(dead_code)]

use recist_core::geometry::{BBox, ExtremePoints, Point2, Role};
use recist_core::grid::Grid2;
use recist_core::grouping::{Detection, GroupingConfig, Source};
use recist_core::oracle::SimRng;
use recist_core::targets::HeatmapBundle;

/// Cells equal to the max of their clipped `kernel x kernel` window and
/// strictly above `tau`, ordered by score desc, row asc, col asc, first `k`.
pub fn naive_peaks(
    map: &Grid2<f32>,
    tau: f64,
    k: usize,
    kernel: usize,
) -> Vec<(usize, usize, f32)> {
    let h = (kernel / 2) as isize;
    let (rows, cols) = (map.rows() as isize, map.cols() as isize);
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let v = map.get(r as usize, c as usize);
            if f64::from(v) <= tau {
                continue;
            }
            let mut is_max = true;
            for rr in (r - h).max(0)..=(r + h).min(rows - 1) {
                for cc in (c - h).max(0)..=(c + h).min(cols - 1) {
                    if map.get(rr as usize, cc as usize) > v {
                        is_max = false;
                    }
                }
            }
            if is_max {
                out.push((r as usize, c as usize, v));
            }
        }
    }
    out.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    out.truncate(k);
    out
}

struct RefPeak {
    row: usize,
    col: usize,
    score: f64,
    x: f64,
    y: f64,
}

/// Score, peak cells in role order, refined detection.
type Ranked = (f64, [(usize, usize); 4], Detection);

/// Full grouping by exhaustive enumeration: every top/left/bottom/right
/// tuple, validity and center checks, global sort, then truncation.
pub fn exhaustive_detect(bundle: &HeatmapBundle, cfg: &GroupingConfig) -> Vec<Detection> {
    let s = f64::from(bundle.stride);
    let peaks: Vec<Vec<RefPeak>> = Role::EXTREMES
        .iter()
        .map(|&role| {
            let i = 2 * role.index();
            naive_peaks(bundle.keypoint(role), cfg.tau_e, cfg.k1, cfg.kernel)
                .into_iter()
                .map(|(row, col, v)| {
                    let dx = f64::from(bundle.offsets[i].get(row, col));
                    let dy = f64::from(bundle.offsets[i + 1].get(row, col));
                    RefPeak {
                        row,
                        col,
                        score: f64::from(v),
                        x: col as f64 + dx,
                        y: row as f64 + dy,
                    }
                })
                .collect()
        })
        .collect();
    let center = bundle.keypoint(Role::Center);
    let (rows, cols) = (center.rows() as f64, center.cols() as f64);

    let mut found: Vec<Ranked> = Vec::new();
    for t in &peaks[0] {
        for l in &peaks[1] {
            for b in &peaks[2] {
                for r in &peaks[3] {
                    if b.y < t.y || r.x < l.x {
                        continue;
                    }
                    // Enclosing: the min/max box of the four points is the
                    // one spanned by their roles.
                    let xs = [t.x, l.x, b.x, r.x];
                    let ys = [t.y, l.y, b.y, r.y];
                    let min = |v: [f64; 4]| v.into_iter().fold(f64::INFINITY, f64::min);
                    let max = |v: [f64; 4]| v.into_iter().fold(f64::NEG_INFINITY, f64::max);
                    if cfg.enclosing
                        && (min(xs) != l.x || max(xs) != r.x || min(ys) != t.y || max(ys) != b.y)
                    {
                        continue;
                    }
                    let cy = ((t.y + b.y) / 2.0).floor();
                    let cx = ((l.x + r.x) / 2.0).floor();
                    if cy < 0.0 || cx < 0.0 || cy >= rows || cx >= cols {
                        continue;
                    }
                    let cs = f64::from(center.get(cy as usize, cx as usize));
                    if !(cs > cfg.tau_c) {
                        continue;
                    }
                    let score = t.score + l.score + b.score + r.score + 2.0 * cs;
                    let px = |p: &RefPeak| Point2::new(s * p.x, s * p.y);
                    let (tp, lp, bp, rp) = (px(t), px(l), px(b), px(r));
                    let extremes = ExtremePoints {
                        top: tp,
                        left: lp,
                        bottom: bp,
                        right: rp,
                        center: Point2::new((lp.x + rp.x) / 2.0, (tp.y + bp.y) / 2.0),
                    };
                    let det = Detection {
                        extremes,
                        score,
                        bbox: BBox::new(lp.x, tp.y, rp.x, bp.y),
                        source: Source::Original,
                    };
                    let cells = [
                        (t.row, t.col),
                        (l.row, l.col),
                        (b.row, b.col),
                        (r.row, r.col),
                    ];
                    found.push((score, cells, det));
                }
            }
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    found.truncate(cfg.k2);
    found.into_iter().map(|f| f.2).collect()
}

/// Sparse random bundle: up to `max_peaks` point peaks per extreme map with
/// scores from a small set (to force ties), offsets on a 1/8 lattice, and a
/// center map drawn from values straddling the default threshold.
pub fn random_sparse_bundle(rng: &mut SimRng, max_peaks: usize) -> HeatmapBundle {
    let rows = 8 + rng.below(17);
    let cols = 8 + rng.below(17);
    let mut b = HeatmapBundle::zeros(rows, cols, 4, (cols as u32 * 4, rows as u32 * 4));
    let scores = [0.05f32, 0.1, 0.3, 0.5, 0.7, 1.0];
    for role in Role::EXTREMES {
        let n = rng.below(max_peaks + 1);
        for _ in 0..n {
            let (r, c) = (rng.below(rows), rng.below(cols));
            let v = scores[rng.below(scores.len())];
            b.keypoint_mut(role).set(r, c, v);
            let i = 2 * role.index();
            b.offsets[i].set(r, c, rng.below(8) as f32 / 8.0);
            b.offsets[i + 1].set(r, c, rng.below(8) as f32 / 8.0);
        }
    }
    let center_values = [0.0f32, 0.05, 0.1, 0.2, 0.6, 1.0];
    for v in b.keypoint_mut(Role::Center).as_mut_slice() {
        *v = center_values[rng.below(center_values.len())];
    }
    b
}

/// Dense random grid with values from a coarse lattice so plateaus occur.
pub fn random_lattice_grid(
    rng: &mut SimRng,
    rows: usize,
    cols: usize,
    levels: usize,
) -> Grid2<f32> {
    Grid2::from_fn(rows, cols, |_, _| {
        rng.below(levels + 1) as f32 / levels as f32
    })
}

/// Every plane filled with arbitrary bit patterns that are valid heatmap
/// values (keypoints in [0, 1], offsets any finite float).
pub fn random_dense_bundle(rng: &mut SimRng) -> HeatmapBundle {
    let rows = 1 + rng.below(40);
    let cols = 1 + rng.below(40);
    let stride = [1u32, 2, 4, 8][rng.below(4)];
    let mut b = HeatmapBundle::zeros(
        rows,
        cols,
        stride,
        (cols as u32 * stride, rows as u32 * stride),
    );
    for map in b.keypoints.iter_mut() {
        for v in map.as_mut_slice() {
            *v = rng.uniform() as f32;
        }
    }
    for map in b.offsets.iter_mut() {
        for v in map.as_mut_slice() {
            *v = f32::from_bits(rng.next_u64() as u32 & 0x7f7f_ffff)
                * if rng.below(2) == 0 { 1.0 } else { -1.0 };
        }
    }
    b
}
