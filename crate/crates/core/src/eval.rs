//! Lesion-level sensitivity at fixed false positives per image (FROC).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, pad_bbox, BBox, DEFAULT_BOX_PAD};

/// Operating points reported by default, in false positives per image.
pub const DEFAULT_FP_TARGETS: [f64; 5] = [0.5, 1.0, 2.0, 3.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Padding added to detection boxes before matching.
    pub pad: f64,
    pub fp_targets: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            pad: DEFAULT_BOX_PAD,
            fp_targets: DEFAULT_FP_TARGETS.to_vec(),
        }
    }
}

/// A detection as seen by the evaluator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedDetection {
    /// Index into the image's detection list.
    pub index: usize,
    pub score: f64,
    pub is_tp: bool,
    pub gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImageMatches {
    /// In processing order (score descending, index ascending).
    pub detections: Vec<MatchedDetection>,
    pub n_gt: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub images: Vec<ImageMatches>,
}

/// Greedy matching for one image. Detections are visited best first; each
/// takes the unmatched ground truth with the highest IoU against its padded
/// box and is a true positive when that IoU reaches `iou_threshold`.
pub fn match_image(dets: &[ScoredBox], gts: &[BBox], iou_threshold: f64, pad: f64) -> ImageMatches {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let detections = order
        .into_iter()
        .map(|i| {
            let padded = pad_bbox(&dets[i].bbox, pad, None);
            let best = gts
                .iter()
                .enumerate()
                .filter(|(g, _)| !taken[*g])
                .map(|(g, gt)| (g, iou(&padded, gt)))
                .fold(None, |acc: Option<(usize, f64)>, (g, v)| match acc {
                    Some((_, bv)) if bv >= v => acc,
                    _ => Some((g, v)),
                });
            let gt = match best {
                Some((g, v)) if v >= iou_threshold => {
                    taken[g] = true;
                    Some(g)
                }
                _ => None,
            };
            MatchedDetection {
                index: i,
                score: dets[i].score,
                is_tp: gt.is_some(),
                gt,
            }
        })
        .collect();
    ImageMatches {
        detections,
        n_gt: gts.len(),
    }
}

/// Matches every image. `dets` and `gts` are indexed by image.
pub fn match_detections(
    dets: &[Vec<ScoredBox>],
    gts: &[Vec<BBox>],
    iou_threshold: f64,
    pad: f64,
) -> Result<MatchResult> {
    if dets.len() != gts.len() {
        return Err(Error::SizeMismatch(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    Ok(MatchResult {
        images: dets
            .iter()
            .zip(gts)
            .map(|(d, g)| match_image(d, g, iou_threshold, pad))
            .collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub fp_per_image: f64,
    pub sensitivity: f64,
    /// Lowest score kept at this point.
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub fp_target: f64,
    pub sensitivity: f64,
    /// Score threshold realising the point; `None` when no detection is kept.
    pub threshold: Option<f64>,
    /// FPs per image actually incurred at `threshold`.
    pub fp_per_image: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrocResult {
    pub operating_points: Vec<OperatingPoint>,
    pub n_images: usize,
    pub n_lesions: usize,
    /// One point per distinct detection score, in decreasing-threshold order.
    pub curve: Vec<CurvePoint>,
}

impl FrocResult {
    pub fn sensitivities(&self) -> Vec<f64> {
        self.operating_points
            .iter()
            .map(|p| p.sensitivity)
            .collect()
    }
}

// (score, counts_as_tp, counts_as_fp)
fn sweep(
    mut events: Vec<(f64, bool, bool)>,
    n_images: usize,
    n_lesions: usize,
    fp_targets: &[f64],
) -> Result<FrocResult> {
    if n_images == 0 {
        return Err(Error::InvalidArgument(
            "evaluation needs at least one image".into(),
        ));
    }
    if n_lesions == 0 {
        return Err(Error::NoLesions);
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (ni, nl) = (n_images as f64, n_lesions as f64);
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let threshold = events[i].0;
        while i < events.len() && events[i].0 == threshold {
            tp += usize::from(events[i].1);
            fp += usize::from(events[i].2);
            i += 1;
        }
        curve.push(CurvePoint {
            fp_per_image: fp as f64 / ni,
            sensitivity: tp as f64 / nl,
            threshold,
        });
    }
    let operating_points = fp_targets
        .iter()
        .map(|&target| {
            // sensitivity only grows along the curve, so the last admissible
            // point is the best one
            match curve.iter().rev().find(|p| p.fp_per_image <= target) {
                Some(p) => OperatingPoint {
                    fp_target: target,
                    sensitivity: p.sensitivity,
                    threshold: Some(p.threshold),
                    fp_per_image: p.fp_per_image,
                },
                None => OperatingPoint {
                    fp_target: target,
                    sensitivity: 0.0,
                    threshold: None,
                    fp_per_image: 0.0,
                },
            }
        })
        .collect();
    Ok(FrocResult {
        operating_points,
        n_images,
        n_lesions,
        curve,
    })
}

/// Step-function FROC: sensitivity at each target is the best sensitivity
/// over thresholds whose FP rate does not exceed it.
pub fn froc(matches: &MatchResult, fp_targets: &[f64]) -> Result<FrocResult> {
    let n_lesions = matches.images.iter().map(|m| m.n_gt).sum();
    let events = matches
        .images
        .iter()
        .flat_map(|m| m.detections.iter().map(|d| (d.score, d.is_tp, !d.is_tp)))
        .collect();
    sweep(events, matches.images.len(), n_lesions, fp_targets)
}

/// Attribute a result is broken down by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratifyKey {
    LesionType,
    Diameter,
    SliceInterval,
}

impl std::str::FromStr for StratifyKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "type" | "lesion_type" => Ok(StratifyKey::LesionType),
            "diameter" => Ok(StratifyKey::Diameter),
            "interval" | "slice_interval" => Ok(StratifyKey::SliceInterval),
            other => Err(Error::InvalidArgument(format!(
                "unknown stratification key `{other}` (expected type, diameter or interval)"
            ))),
        }
    }
}

/// Per-lesion attributes used for stratification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionMeta {
    /// Coarse type code 1-8, or -1 when unknown.
    pub lesion_type: i32,
    /// Long diameter in millimetres.
    pub long_diameter_mm: f64,
    /// Distance between slices in millimetres.
    pub slice_interval_mm: f64,
}

pub const OTHER_STRATUM: &str = "other";

/// Type abbreviations in reporting order, with their annotation codes.
pub const LESION_TYPES: [(&str, i32); 8] = [
    ("LU", 5),
    ("ME", 3),
    ("LV", 4),
    ("ST", 7),
    ("PV", 8),
    ("AB", 2),
    ("KD", 6),
    ("BN", 1),
];

impl StratifyKey {
    /// Stratum labels in reporting order.
    pub fn labels(self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = match self {
            StratifyKey::LesionType => LESION_TYPES.iter().map(|(n, _)| *n).collect(),
            StratifyKey::Diameter => vec!["<10", "10-30", ">30"],
            StratifyKey::SliceInterval => vec!["<2.5", ">=2.5"],
        };
        out.push(OTHER_STRATUM);
        out
    }

    /// Diameter buckets are `[0, 10)`, `[10, 30]` and `(30, inf)` mm; slice
    /// intervals split at 2.5 mm with 2.5 itself in the upper bucket.
    pub fn label(self, meta: &LesionMeta) -> &'static str {
        match self {
            StratifyKey::LesionType => LESION_TYPES
                .iter()
                .find(|(_, code)| *code == meta.lesion_type)
                .map_or(OTHER_STRATUM, |(n, _)| n),
            StratifyKey::Diameter => {
                let d = meta.long_diameter_mm;
                if !(d >= 0.0) {
                    OTHER_STRATUM
                } else if d < 10.0 {
                    "<10"
                } else if d <= 30.0 {
                    "10-30"
                } else {
                    ">30"
                }
            }
            StratifyKey::SliceInterval => {
                let z = meta.slice_interval_mm;
                if !(z >= 0.0) {
                    OTHER_STRATUM
                } else if z < 2.5 {
                    "<2.5"
                } else {
                    ">=2.5"
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    pub result: FrocResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub key: StratifyKey,
    /// Only strata that contain at least one lesion, in reporting order.
    pub strata: Vec<Stratum>,
}

/// FROC per stratum. False positives are counted over the whole image set;
/// a true positive counts toward the stratum of the lesion it matched.
/// `lesions[i][g]` describes ground truth `g` of image `i`.
pub fn stratified_froc(
    matches: &MatchResult,
    lesions: &[Vec<LesionMeta>],
    key: StratifyKey,
    fp_targets: &[f64],
) -> Result<Strata> {
    if lesions.len() != matches.images.len() {
        return Err(Error::SizeMismatch(format!(
            "lesion metadata for {} images, matches for {}",
            lesions.len(),
            matches.images.len()
        )));
    }
    for (m, l) in matches.images.iter().zip(lesions) {
        if m.n_gt != l.len() {
            return Err(Error::SizeMismatch(format!(
                "image has {} lesions but {} metadata entries",
                m.n_gt,
                l.len()
            )));
        }
    }
    let mut strata = Vec::new();
    for label in key.labels() {
        let n_lesions = lesions
            .iter()
            .flatten()
            .filter(|meta| key.label(meta) == label)
            .count();
        if n_lesions == 0 {
            continue;
        }
        let events = matches
            .images
            .iter()
            .zip(lesions)
            .flat_map(|(m, metas)| {
                m.detections.iter().filter_map(move |d| match d.gt {
                    Some(g) if key.label(&metas[g]) == label => Some((d.score, true, false)),
                    Some(_) => None,
                    None => Some((d.score, false, true)),
                })
            })
            .collect();
        strata.push(Stratum {
            label: label.to_string(),
            result: sweep(events, matches.images.len(), n_lesions, fp_targets)?,
        });
    }
    Ok(Strata { key, strata })
}

/// Header line naming the matching criterion.
pub fn criterion_header(cfg: &EvalConfig) -> String {
    format!(
        "# lesion sensitivity at FPs per image; match criterion: IoU >= {:.2} with detection boxes padded by {} px",
        cfg.iou_threshold, cfg.pad
    )
}

/// Plain-text table: one header row of FP targets, then one row per result.
pub fn render_table(cfg: &EvalConfig, rows: &[(&str, &FrocResult)]) -> String {
    let mut out = criterion_header(cfg);
    out.push('\n');
    let _ = write!(out, "{:<16}", "FPs per image");
    for f in &cfg.fp_targets {
        let _ = write!(out, "{:>9}", format!("{f}"));
    }
    out.push_str(&format!("{:>10}{:>8}\n", "lesions", "images"));
    for (name, r) in rows {
        let _ = write!(out, "{name:<16}");
        for p in &r.operating_points {
            let _ = write!(out, "{:>9.4}", p.sensitivity);
        }
        let _ = writeln!(out, "{:>10}{:>8}", r.n_lesions, r.n_images);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sb(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> ScoredBox {
        ScoredBox {
            bbox: BBox::new(x1, y1, x2, y2),
            score,
        }
    }

    #[test]
    fn exact_padded_match_is_tp() {
        let gt = BBox::new(95., 45., 145., 95.);
        let m = match_image(&[sb(100., 50., 140., 90., 0.7)], &[gt], 0.5, 5.0);
        assert!(m.detections[0].is_tp);
        assert_eq!(m.detections[0].gt, Some(0));
    }

    #[test]
    fn one_gt_matches_once() {
        let gt = BBox::new(0., 0., 30., 30.);
        let dets = [sb(5., 5., 25., 25., 0.4), sb(5., 5., 25., 25., 0.9)];
        let m = match_image(&dets, &[gt], 0.5, 5.0);
        assert_eq!(m.detections[0].index, 1);
        assert!(m.detections[0].is_tp);
        assert!(!m.detections[1].is_tp);
    }

    #[test]
    fn perfect_and_empty_froc() {
        let gt = vec![
            vec![BBox::new(0., 0., 30., 30.)],
            vec![BBox::new(50., 50., 90., 90.)],
        ];
        let dets = vec![
            vec![sb(5., 5., 25., 25., 1.0)],
            vec![sb(55., 55., 85., 85., 1.0)],
        ];
        let m = match_detections(&dets, &gt, 0.5, 5.0).unwrap();
        let r = froc(&m, &DEFAULT_FP_TARGETS).unwrap();
        assert_eq!(r.sensitivities(), vec![1.0; 5]);

        let none = match_detections(&[vec![], vec![]], &gt, 0.5, 5.0).unwrap();
        let r = froc(&none, &DEFAULT_FP_TARGETS).unwrap();
        assert_eq!(r.sensitivities(), vec![0.0; 5]);
        assert!(r.operating_points.iter().all(|p| p.threshold.is_none()));
    }

    #[test]
    fn no_lesions_is_an_error() {
        let m = match_detections(&[vec![sb(0., 0., 1., 1., 0.5)]], &[vec![]], 0.5, 5.0).unwrap();
        assert!(matches!(
            froc(&m, &DEFAULT_FP_TARGETS),
            Err(Error::NoLesions)
        ));
    }

    #[test]
    fn diameter_and_interval_buckets() {
        let meta = |d: f64, z: f64| LesionMeta {
            lesion_type: -1,
            long_diameter_mm: d,
            slice_interval_mm: z,
        };
        let k = StratifyKey::Diameter;
        assert_eq!(k.label(&meta(9.9, 1.0)), "<10");
        assert_eq!(k.label(&meta(10.0, 1.0)), "10-30");
        assert_eq!(k.label(&meta(30.0, 1.0)), "10-30");
        assert_eq!(k.label(&meta(30.01, 1.0)), ">30");
        assert_eq!(k.label(&meta(f64::NAN, 1.0)), OTHER_STRATUM);
        let k = StratifyKey::SliceInterval;
        assert_eq!(k.label(&meta(5.0, 2.49)), "<2.5");
        assert_eq!(k.label(&meta(5.0, 2.5)), ">=2.5");
        assert_eq!(
            StratifyKey::LesionType.label(&meta(5.0, 1.0)),
            OTHER_STRATUM
        );
        let lung = LesionMeta {
            lesion_type: 5,
            ..meta(5.0, 1.0)
        };
        assert_eq!(StratifyKey::LesionType.label(&lung), "LU");
    }

    #[test]
    fn table_has_one_column_per_target() {
        let gt = vec![vec![BBox::new(0., 0., 30., 30.)]];
        let m = match_detections(&[vec![sb(5., 5., 25., 25., 1.0)]], &gt, 0.5, 5.0).unwrap();
        let cfg = EvalConfig::default();
        let r = froc(&m, &cfg.fp_targets).unwrap();
        let table = render_table(&cfg, &[("all", &r)]);
        let lines: Vec<_> = table.lines().collect();
        assert!(lines[0].contains("IoU >= 0.50"));
        assert!(lines[1].starts_with("FPs per image"));
        assert!(lines[2].starts_with("all"));
        assert_eq!(lines[2].matches("1.0000").count(), 5);
    }
}
