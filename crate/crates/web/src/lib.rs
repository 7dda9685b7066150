//! Browser bindings for the demo page. Every operation has a plain Rust
//! function returning a JSON string, so it can be tested natively, and a
//! thin `#[wasm_bindgen]` wrapper.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use recist_core::eval::{match_image, ScoredBox};
use recist_core::fusion::{fuse_tta, soft_nms, SoftNmsConfig, SoftNmsMethod};
use recist_core::geometry::{iou, ExtremePoints, Point2, Role};
use recist_core::grid::Grid2;
use recist_core::grouping::{detect, Detection, GroupingConfig, Source};
use recist_core::loss::{focal_loss, focal_loss_grad, FocalParams};
use recist_core::oracle::{generate_scene, simulate_heatmaps, DegradationConfig};
use recist_core::targets::HeatmapBundle;

const SCENE_SIZE: u32 = 512;
const STRIDE: u32 = 4;
/// Degradation seeds of the mirrored view are offset from the original's.
const FLIP_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

/// Knobs of the scene explorer.
#[derive(Debug, Clone, Copy)]
pub struct SceneRequest {
    pub seed: u64,
    pub n_lesions: usize,
    pub noise: f64,
    pub drop: f64,
    pub spurious: f64,
    pub jitter: u32,
    pub flip: bool,
    pub shown: usize,
}

#[derive(Serialize)]
struct ShownDetection {
    bbox: [f64; 4],
    extremes: [[f64; 2]; 5],
    score: f64,
    source: Source,
    tp: bool,
}

#[derive(Serialize)]
struct SceneReply {
    width: u32,
    height: u32,
    rows: usize,
    cols: usize,
    /// Row-major max over the four extreme maps, scaled to 0..=255.
    extreme_heat: Vec<u8>,
    center_heat: Vec<u8>,
    ground_truth: Vec<[f64; 4]>,
    detections: Vec<ShownDetection>,
    n_original: usize,
    n_flipped: usize,
    /// Lesions hit by the `shown` best detections.
    found: usize,
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn extreme_heat(b: &HeatmapBundle) -> Vec<u8> {
    let n = b.rows() * b.cols();
    (0..n)
        .map(|i| {
            let v = Role::EXTREMES
                .iter()
                .map(|&r| b.keypoint(r).as_slice()[i])
                .fold(0.0f32, f32::max);
            to_u8(v)
        })
        .collect()
}

fn points(e: &ExtremePoints) -> [[f64; 2]; 5] {
    e.points().map(|p| [p.x, p.y])
}

pub fn scene_json(req: &SceneRequest) -> Result<String, String> {
    let err = |e: recist_core::Error| e.to_string();
    let scene = generate_scene(
        req.n_lesions,
        (SCENE_SIZE, SCENE_SIZE),
        (10.0, 60.0),
        req.seed,
    )
    .map_err(err)?;
    let deg = DegradationConfig {
        noise_sigma: req.noise,
        peak_drop_prob: req.drop,
        spurious_rate: req.spurious,
        jitter_cells: req.jitter,
        seed: req.seed,
        ..Default::default()
    };
    let cfg = GroupingConfig::default();
    let bundle = simulate_heatmaps(&scene, &deg, STRIDE).map_err(err)?;
    let original = detect(&bundle, &cfg).map_err(err)?;
    let (flipped, fused) = if req.flip {
        let mirror_deg = DegradationConfig {
            seed: req.seed.wrapping_add(FLIP_SEED_OFFSET),
            ..deg
        };
        let mirrored = simulate_heatmaps(&scene.flipped(), &mirror_deg, STRIDE).map_err(err)?;
        let raw = detect(&mirrored, &cfg).map_err(err)?;
        let fused = fuse_tta(
            &original,
            &raw,
            f64::from(SCENE_SIZE),
            &SoftNmsConfig::default(),
        );
        (raw.len(), fused)
    } else {
        (0, soft_nms(&original, &SoftNmsConfig::default()))
    };
    let top: Vec<Detection> = fused.into_iter().take(req.shown).collect();
    let gts = scene.gt_boxes();
    let boxes: Vec<ScoredBox> = top
        .iter()
        .map(|d| ScoredBox {
            bbox: d.bbox,
            score: d.score,
        })
        .collect();
    let matched = match_image(&boxes, &gts, 0.5, 5.0);
    let mut tp = vec![false; top.len()];
    for m in &matched.detections {
        tp[m.index] = m.is_tp;
    }
    let reply = SceneReply {
        width: scene.width,
        height: scene.height,
        rows: bundle.rows(),
        cols: bundle.cols(),
        extreme_heat: extreme_heat(&bundle),
        center_heat: bundle
            .keypoint(Role::Center)
            .as_slice()
            .iter()
            .copied()
            .map(to_u8)
            .collect(),
        ground_truth: gts.iter().map(|b| b.to_array()).collect(),
        detections: top
            .iter()
            .zip(&tp)
            .map(|(d, &tp)| ShownDetection {
                bbox: d.bbox.to_array(),
                extremes: points(&d.extremes),
                score: d.score,
                source: d.source,
                tp,
            })
            .collect(),
        n_original: original.len(),
        n_flipped: flipped,
        found: tp.iter().filter(|&&t| t).count(),
    };
    serde_json::to_string(&reply).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct FocalReply {
    pred: Vec<f64>,
    loss: Vec<f64>,
    grad: Vec<f64>,
}

/// Per-cell focal loss and its derivative over predictions in (0, 1) for a
/// fixed target value.
pub fn focal_curve_json(
    target: f64,
    alpha: f64,
    beta: f64,
    samples: usize,
) -> Result<String, String> {
    if !(0.0..=1.0).contains(&target) {
        return Err(format!("target must lie in [0, 1], got {target}"));
    }
    let p = FocalParams {
        alpha,
        beta,
        ..Default::default()
    };
    let y = Grid2::filled(1, 1, target);
    let n = samples.clamp(2, 2000);
    let mut reply = FocalReply {
        pred: Vec::new(),
        loss: Vec::new(),
        grad: Vec::new(),
    };
    for i in 0..n {
        let q = 0.005 + 0.99 * i as f64 / (n - 1) as f64;
        let x = Grid2::filled(1, 1, q);
        reply.pred.push(q);
        reply
            .loss
            .push(focal_loss(&x, &y, 1, &p).map_err(|e| e.to_string())?);
        reply.grad.push(
            focal_loss_grad(&x, &y, 1, &p)
                .map_err(|e| e.to_string())?
                .get(0, 0),
        );
    }
    serde_json::to_string(&reply).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct PairPoint {
    shift: f64,
    iou: f64,
    /// Score of the weaker box after suppression, 0 once dropped.
    decayed: f64,
}

#[derive(Serialize)]
struct PairReply {
    current: PairPoint,
    curve: Vec<PairPoint>,
}

fn square(x: f64, score: f64) -> Detection {
    let (y1, y2, w) = (100.0, 140.0, 40.0);
    let e = ExtremePoints::new(
        Point2::new(x + w / 2.0, y1),
        Point2::new(x, (y1 + y2) / 2.0),
        Point2::new(x + w / 2.0, y2),
        Point2::new(x + w, (y1 + y2) / 2.0),
    );
    Detection::new(e, score, Source::Original)
}

fn pair_point(shift: f64, scores: (f64, f64), cfg: &SoftNmsConfig) -> PairPoint {
    let (a, b) = (square(100.0, scores.0), square(100.0 + shift, scores.1));
    let out = soft_nms(&[a, b], cfg);
    let decayed = out
        .iter()
        .find(|d| d.bbox == b.bbox && d.score <= scores.1)
        .map_or(0.0, |d| d.score);
    PairPoint {
        shift,
        iou: iou(&a.bbox, &b.bbox),
        decayed,
    }
}

/// Two 40 px boxes, the weaker one shifted right by `shift` px, filtered by
/// Soft-NMS; also returns the whole decay curve over shifts 0..=50.
pub fn soft_nms_pair_json(
    shift: f64,
    strong: f64,
    weak: f64,
    sigma: f64,
    linear: bool,
) -> Result<String, String> {
    if !(weak < strong) {
        return Err("the shifted box must score below the fixed one".into());
    }
    let cfg = SoftNmsConfig {
        sigma,
        method: if linear {
            SoftNmsMethod::Linear
        } else {
            SoftNmsMethod::Gaussian
        },
        ..Default::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    let reply = PairReply {
        current: pair_point(shift, (strong, weak), &cfg),
        curve: (0..=100)
            .map(|i| pair_point(0.5 * i as f64, (strong, weak), &cfg))
            .collect(),
    };
    serde_json::to_string(&reply).map_err(|e| e.to_string())
}

#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn simulate_scene(
    seed: u32,
    n_lesions: u32,
    noise: f64,
    drop: f64,
    spurious: f64,
    jitter: u32,
    flip: bool,
    shown: u32,
) -> Result<String, JsValue> {
    let req = SceneRequest {
        seed: u64::from(seed),
        n_lesions: n_lesions as usize,
        noise,
        drop,
        spurious,
        jitter,
        flip,
        shown: shown as usize,
    };
    scene_json(&req).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn focal_curve(target: f64, alpha: f64, beta: f64, samples: u32) -> Result<String, JsValue> {
    focal_curve_json(target, alpha, beta, samples as usize).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn soft_nms_pair(
    shift: f64,
    strong: f64,
    weak: f64,
    sigma: f64,
    linear: bool,
) -> Result<String, JsValue> {
    soft_nms_pair_json(shift, strong, weak, sigma, linear).map_err(|e| JsValue::from_str(&e))
}
