use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde_json::{json, Value};

use recist_core::dataio::{
    decode_heatmaps, encode_detections, encode_heatmaps, parse_annotations, read_detections,
    window_values, write_annotations, DetectionsFile, ParsedAnnotations, Split, HEATMAP_EXTENSION,
};
use recist_core::eval::{
    froc, match_detections, render_table, stratified_froc, ScoredBox, StratifyKey,
};
use recist_core::fusion::{fuse_tta_along, FlipAxis};
use recist_core::geometry::{ExtremePoints, Point2};
use recist_core::grid::Grid2;
use recist_core::grouping::detect as group;
use recist_core::loss::{
    check_focal_gradient, finite_diff_check, offset_loss, offset_loss_grad, SmoothL1,
};
use recist_core::oracle::{
    generate_scene_with, simulate_heatmaps, DegradationConfig, SceneConfig, SimRng,
};
use recist_core::targets::{render_targets as render_target_maps, render_targets_for_input};
use recist_core::Error as CoreError;

use crate::config::RunConfig;
use crate::output::Outputs;
use crate::{
    CheckGradientsArgs, DetectArgs, EvalArgs, FuseArgs, RenderTargetsArgs, SimulateArgs,
    UsageError, WindowArgs,
};

/// Offset added to a scene's degradation seed for its mirrored view.
const FLIPPED_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

fn provenance(command: &str, cfg: &RunConfig, inputs: Value) -> Value {
    json!({
        "tool": "recist",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "inputs": inputs,
        "config": cfg,
    })
}

fn pretty(v: &Value) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(v).expect("json value serialises");
    out.push(b'\n');
    out
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn heatmap_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.{HEATMAP_EXTENSION}"))
}

fn warn_rows(parsed: &ParsedAnnotations) {
    for issue in &parsed.inconsistent {
        eprintln!(
            "recist: warning: line {} ({}): {}",
            issue.line, issue.file_name, issue.detail
        );
    }
    for issue in &parsed.degenerate {
        eprintln!(
            "recist: warning: line {} ({}): {}",
            issue.line, issue.file_name, issue.detail
        );
    }
}

fn row_summary(parsed: &ParsedAnnotations) -> Value {
    json!({
        "records": parsed.records.len(),
        "excluded": parsed.excluded,
        "inconsistent_boxes": parsed.inconsistent,
        "degenerate": parsed.degenerate,
    })
}

pub fn render_targets(cfg: &mut RunConfig, a: RenderTargetsArgs) -> anyhow::Result<()> {
    if let Some(v) = a.input_size {
        cfg.input_size = v;
    }
    if let Some(v) = a.stride {
        cfg.stride = v;
    }
    cfg.validate()?;
    let parsed = parse_annotations(&a.annotations, a.exclude.as_deref())?;
    warn_rows(&parsed);
    let images: Vec<(String, Vec<ExtremePoints>)> = parsed
        .by_image()
        .into_iter()
        .map(|(k, anns)| (k.to_string(), anns.iter().map(|r| r.extremes()).collect()))
        .collect();
    let size = cfg.input_size;
    let encoded: Vec<Vec<u8>> = images
        .par_iter()
        .map(|(key, extremes)| {
            let t = render_targets_for_input(extremes, size, size, cfg.stride, &cfg.targets)
                .with_context(|| format!("image {key}"))?;
            Ok(encode_heatmaps(&t.bundle)?)
        })
        .collect::<anyhow::Result<_>>()?;

    let mut out = Outputs::new();
    out.dir(&a.out)?;
    for ((key, _), bytes) in images.iter().zip(&encoded) {
        out.write(&heatmap_path(&a.out, key), bytes)?;
    }
    let prov = provenance(
        "render-targets",
        cfg,
        json!({
            "annotations": path_str(&a.annotations),
            "exclude": a.exclude.as_deref().map(path_str),
            "rows": row_summary(&parsed),
            "images": images.len(),
        }),
    );
    out.write(&a.out.join("provenance.json"), &pretty(&prov))?;
    out.commit();
    eprintln!("recist: rendered {} images", images.len());
    Ok(())
}

fn heatmap_files(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    let entries = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some(HEATMAP_EXTENSION) {
            continue;
        }
        let key = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| UsageError(format!("non UTF-8 file name {}", path.display())))?
            .to_string();
        found.push((key, path));
    }
    found.sort();
    Ok(found)
}

pub fn detect(cfg: &mut RunConfig, a: DetectArgs) -> anyhow::Result<()> {
    let g = &a.grouping;
    let gc = &mut cfg.grouping;
    if let Some(v) = g.tau_e {
        gc.tau_e = v;
    }
    if let Some(v) = g.tau_c {
        gc.tau_c = v;
    }
    if let Some(v) = g.k1 {
        gc.k1 = v;
    }
    if let Some(v) = g.k2 {
        gc.k2 = v;
    }
    if let Some(v) = g.kernel {
        gc.kernel = v;
    }
    cfg.validate()?;
    let files = heatmap_files(&a.heatmaps)?;
    let grouping = cfg.grouping;
    let results: Vec<_> = files
        .par_iter()
        .map(|(key, path)| {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let bundle = decode_heatmaps(&bytes)
                .with_context(|| format!("heatmap file {}", path.display()))?;
            Ok((key.clone(), group(&bundle, &grouping)?))
        })
        .collect::<anyhow::Result<_>>()?;
    let file = DetectionsFile {
        provenance: Some(provenance(
            "detect",
            cfg,
            json!({ "heatmaps": path_str(&a.heatmaps), "images": files.len() }),
        )),
        images: results.into_iter().collect(),
    };
    let mut out = Outputs::new();
    out.write(&a.out, &encode_detections(&file)?)?;
    out.commit();
    Ok(())
}

pub fn fuse(cfg: &mut RunConfig, a: FuseArgs) -> anyhow::Result<()> {
    if let Some(v) = a.sigma {
        cfg.soft_nms.sigma = v;
    }
    if let Some(v) = a.score_floor {
        cfg.soft_nms.score_floor = v;
    }
    let width = a.image_width.unwrap_or(cfg.input_size);
    let height = a.image_height.unwrap_or(cfg.input_size);
    let (axis, extent) = if a.vertical {
        (FlipAxis::Vertical, height)
    } else {
        (FlipAxis::Horizontal, width)
    };
    cfg.validate()?;
    let original = read_detections(&a.original)
        .with_context(|| format!("reading {}", a.original.display()))?;
    let flipped =
        read_detections(&a.flipped).with_context(|| format!("reading {}", a.flipped.display()))?;
    let keys: Vec<&String> = {
        let mut k: Vec<_> = original
            .images
            .keys()
            .chain(flipped.images.keys())
            .collect();
        k.sort();
        k.dedup();
        k
    };
    let nms = cfg.soft_nms;
    let fused: BTreeMap<String, _> = keys
        .par_iter()
        .map(|&key| {
            let o = original.images.get(key).map_or(&[][..], Vec::as_slice);
            let f = flipped.images.get(key).map_or(&[][..], Vec::as_slice);
            (
                key.clone(),
                fuse_tta_along(o, f, axis, f64::from(extent), &nms),
            )
        })
        .collect();
    let file = DetectionsFile {
        provenance: Some(provenance(
            "fuse",
            cfg,
            json!({
                "original": path_str(&a.original),
                "flipped": path_str(&a.flipped),
                "axis": axis,
                "extent": extent,
            }),
        )),
        images: fused,
    };
    let mut out = Outputs::new();
    out.write(&a.out, &encode_detections(&file)?)?;
    out.commit();
    Ok(())
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn eval(cfg: &mut RunConfig, a: EvalArgs) -> anyhow::Result<()> {
    if let Some(v) = a.iou {
        cfg.eval.iou_threshold = v;
    }
    if let Some(v) = a.pad {
        cfg.eval.pad = v;
    }
    if let Some(v) = &a.fps {
        cfg.eval.fp_targets = v.clone();
    }
    cfg.validate()?;
    let split = match a.split.as_deref() {
        None | Some("all") => None,
        Some("train") => Some(Split::Train),
        Some("val") => Some(Split::Val),
        Some("test") => Some(Split::Test),
        Some(other) => bail!(UsageError(format!("unknown split {other:?}"))),
    };
    let stratify = a
        .stratify
        .as_deref()
        .map(|s| s.parse::<StratifyKey>())
        .transpose()
        .map_err(|e| UsageError(e.to_string()))?;

    let mut parsed = parse_annotations(&a.annotations, a.exclude.as_deref())?;
    warn_rows(&parsed);
    if let Some(split) = split {
        parsed.records.retain(|r| r.split == split);
    }
    let dets = read_detections(&a.detections)
        .with_context(|| format!("reading {}", a.detections.display()))?;
    let by_image = parsed.by_image();
    let unknown: Vec<&String> = dets
        .images
        .keys()
        .filter(|k| !by_image.contains_key(k.as_str()))
        .collect();
    if !unknown.is_empty() {
        eprintln!(
            "recist: warning: ignoring detections for {} images without annotations",
            unknown.len()
        );
    }
    let mut det_lists = Vec::new();
    let mut gt_lists = Vec::new();
    let mut metas = Vec::new();
    for (key, anns) in &by_image {
        let scored = dets
            .images
            .get(*key)
            .map(|v| {
                v.iter()
                    .map(|d| ScoredBox {
                        bbox: d.bbox,
                        score: d.score,
                    })
                    .collect()
            })
            .unwrap_or_default();
        det_lists.push(scored);
        gt_lists.push(anns.iter().map(|r| r.bbox).collect());
        metas.push(anns.iter().map(|r| r.meta()).collect());
    }
    if by_image.is_empty() {
        return Err(CoreError::NoLesions.into());
    }
    let matches = match_detections(&det_lists, &gt_lists, cfg.eval.iou_threshold, cfg.eval.pad)?;
    let overall = froc(&matches, &cfg.eval.fp_targets)?;
    let strata = stratify
        .map(|key| stratified_froc(&matches, &metas, key, &cfg.eval.fp_targets))
        .transpose()?;

    let mut rows = vec![("all", &overall)];
    if let Some(s) = &strata {
        rows.extend(s.strata.iter().map(|st| (st.label.as_str(), &st.result)));
    }
    let mut text = render_table(&cfg.eval, &rows);
    let _ = writeln!(
        text,
        "# {} images, {} lesions, {} detections",
        overall.n_images,
        overall.n_lesions,
        det_lists.iter().map(Vec::len).sum::<usize>()
    );
    let report = json!({
        "provenance": provenance(
            "eval",
            cfg,
            json!({
                "detections": path_str(&a.detections),
                "annotations": path_str(&a.annotations),
                "exclude": a.exclude.as_deref().map(path_str),
                "split": a.split,
                "rows": row_summary(&parsed),
                "ignored_detection_images": unknown,
            }),
        ),
        "overall": overall,
        "strata": strata,
    });
    let mut out = Outputs::new();
    out.write(&with_suffix(&a.out, "txt"), text.as_bytes())?;
    out.write(&with_suffix(&a.out, "json"), &pretty(&report))?;
    out.commit();
    print!("{text}");
    Ok(())
}

pub fn simulate(cfg: &mut RunConfig, a: SimulateArgs) -> anyhow::Result<()> {
    if let Some(v) = a.stride {
        cfg.stride = v;
    }
    cfg.validate()?;
    let scene_cfg = SceneConfig::default();
    let base_noise_seed = a.noise_seed.unwrap_or(a.scene_seed);
    let degradation = |i: u64| DegradationConfig {
        noise_sigma: a.noise,
        peak_drop_prob: a.drop,
        spurious_rate: a.spurious,
        jitter_cells: a.jitter,
        seed: base_noise_seed.wrapping_add(i),
        ..Default::default()
    };
    degradation(0)
        .validate()
        .map_err(|e| UsageError(e.to_string()))?;
    let stride = cfg.stride;
    let axis = if a.vertical {
        FlipAxis::Vertical
    } else {
        FlipAxis::Horizontal
    };
    let size = (a.image_size, a.image_size);
    let range = (a.min_size_mm, a.max_size_mm);
    let scenes: Vec<_> = (0..a.images)
        .into_par_iter()
        .map(|i| -> anyhow::Result<_> {
            let scene = generate_scene_with(
                &scene_cfg,
                a.n_lesions,
                size,
                range,
                a.scene_seed.wrapping_add(i),
            )?;
            let deg = degradation(i);
            let bundle = encode_heatmaps(&simulate_heatmaps(&scene, &deg, stride)?)?;
            let flipped = if a.flipped {
                let fdeg = DegradationConfig {
                    seed: deg.seed.wrapping_add(FLIPPED_SEED_OFFSET),
                    ..deg
                };
                Some(encode_heatmaps(&simulate_heatmaps(
                    &scene.mirrored(axis),
                    &fdeg,
                    stride,
                )?)?)
            } else {
                None
            };
            Ok((scene, bundle, flipped))
        })
        .collect::<anyhow::Result<_>>()?;

    let mut out = Outputs::new();
    out.dir(&a.out)?;
    let mut records = Vec::new();
    for (scene, bundle, flipped) in &scenes {
        out.write(&heatmap_path(&a.out, &scene.key), bundle)?;
        if let Some(f) = flipped {
            out.write(&heatmap_path(&a.out.join("flipped"), &scene.key), f)?;
        }
        records.extend(scene.annotations.iter().cloned());
    }
    let mut csv = Vec::new();
    write_annotations(&mut csv, &records)?;
    out.write(&a.out.join("annotations.csv"), &csv)?;
    let prov = provenance(
        "simulate",
        cfg,
        json!({
            "scene_seed": a.scene_seed,
            "images": a.images,
            "n_lesions": a.n_lesions,
            "image_size": a.image_size,
            "size_range_mm": [a.min_size_mm, a.max_size_mm],
            "scene": scene_cfg,
            "degradation": degradation(0),
            "flipped": a.flipped,
            "flip_axis": axis,
            "flipped_seed_offset": FLIPPED_SEED_OFFSET,
        }),
    );
    out.write(&a.out.join("provenance.json"), &pretty(&prov))?;
    out.commit();
    eprintln!("recist: wrote {} scenes", scenes.len());
    Ok(())
}

pub fn check_gradients(cfg: &mut RunConfig, a: CheckGradientsArgs) -> anyhow::Result<()> {
    cfg.validate()?;
    if a.trials == 0 || !(a.tol > 0.0) || !(a.step > 0.0) {
        bail!(UsageError("trials, tol and step must be positive".into()));
    }
    let mut rng = SimRng::new(a.seed);
    let (mut focal_worst, mut offset_worst) = (0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for trial in 0..a.trials {
        let target = Grid2::from_fn(8, 8, |_, _| {
            if rng.below(10) == 0 {
                1.0
            } else {
                rng.uniform() * 0.99
            }
        });
        let pred = Grid2::from_fn(8, 8, |_, _| rng.uniform_in(0.05, 0.95));
        let n = 1 + rng.below(3);
        let focal = check_focal_gradient(&pred, &target, n, &cfg.focal, a.step, a.tol)?;
        focal_worst = focal_worst.max(focal.max_rel_err);

        // one annotation inside an 8x8 grid at stride 4, offsets perturbed
        // by up to 2 so both smooth-L1 branches are exercised
        let q = |rng: &mut SimRng, lo: f64, hi: f64| (rng.uniform_in(lo, hi) * 16.0).round() / 16.0;
        let (cx, cy) = (q(&mut rng, 10.0, 22.0), q(&mut rng, 10.0, 22.0));
        let e = ExtremePoints::new(
            Point2::new(cx + q(&mut rng, -2.0, 2.0), cy - q(&mut rng, 3.0, 9.0)),
            Point2::new(cx - q(&mut rng, 3.0, 9.0), cy + q(&mut rng, -2.0, 2.0)),
            Point2::new(cx + q(&mut rng, -2.0, 2.0), cy + q(&mut rng, 3.0, 9.0)),
            Point2::new(cx + q(&mut rng, 3.0, 9.0), cy + q(&mut rng, -2.0, 2.0)),
        );
        let t = render_target_maps(&[e], 8, 8, 4, &cfg.targets)?;
        let preds: [Grid2<f64>; 8] =
            std::array::from_fn(|_| Grid2::from_fn(8, 8, |_, _| rng.uniform_in(-2.0, 2.0)));
        let sl1 = SmoothL1::default();
        let grad = offset_loss_grad(&preds, &t, &sl1)?;
        let flat: Vec<f64> = preds.iter().flat_map(|g| g.as_slice().to_vec()).collect();
        let flat_grad: Vec<f64> = grad.iter().flat_map(|g| g.as_slice().to_vec()).collect();
        let loss = |x: &[f64]| {
            let planes: [Grid2<f64>; 8] = std::array::from_fn(|i| {
                Grid2::from_vec(8, 8, x[i * 64..(i + 1) * 64].to_vec()).unwrap()
            });
            offset_loss(&planes, &t, &sl1).unwrap()
        };
        // the smooth-L1 second derivative jumps at the breakpoint; skip
        // stencils that straddle it
        let residual = |i: usize| {
            let (plane, cell) = (i / 64, i % 64);
            let role = plane / 2;
            let gt = t.gt_cells[role][0];
            if cell != gt.row * 8 + gt.col {
                return None;
            }
            let target = if plane % 2 == 0 { gt.dx } else { gt.dy };
            Some(flat[i] - target)
        };
        let skip =
            |i: usize| residual(i).is_some_and(|r| (r.abs() - sl1.breakpoint).abs() < 2.0 * a.step);
        let offset = finite_diff_check(loss, &flat, &flat_grad, a.step, a.tol, skip)?;
        offset_worst = offset_worst.max(offset.max_rel_err);
        if !focal.passed || !offset.passed {
            failures.push(json!({
                "trial": trial,
                "focal_max_rel_err": focal.max_rel_err,
                "focal_worst_cell": focal.worst_cell,
                "offset_max_rel_err": offset.max_rel_err,
                "offset_worst_cell": offset.worst_cell,
            }));
        }
    }
    let passed = failures.is_empty();
    println!(
        "focal loss:  max relative error {focal_worst:.3e} over {} trials (tol {:.0e})",
        a.trials, a.tol
    );
    println!(
        "offset loss: max relative error {offset_worst:.3e} over {} trials",
        a.trials
    );
    println!("{}", if passed { "PASS" } else { "FAIL" });
    if let Some(path) = &a.out {
        let report = json!({
            "provenance": provenance("check-gradients", cfg, json!({
                "trials": a.trials, "tol": a.tol, "step": a.step, "seed": a.seed,
            })),
            "focal_max_rel_err": focal_worst,
            "offset_max_rel_err": offset_worst,
            "passed": passed,
            "failures": failures,
        });
        let mut out = Outputs::new();
        out.write(path, &pretty(&report))?;
        out.commit();
    }
    if !passed {
        return Err(CoreError::Invariant(format!(
            "{} of {} gradient trials exceeded tolerance {}",
            failures.len(),
            a.trials,
            a.tol
        ))
        .into());
    }
    Ok(())
}

pub fn window(cfg: &mut RunConfig, a: WindowArgs) -> anyhow::Result<()> {
    let (level, width) = match (&a.preset, a.level, a.width) {
        (Some(name), _, _) => {
            let p = cfg
                .windows
                .iter()
                .find(|p| &p.name == name)
                .ok_or_else(|| UsageError(format!("unknown window preset {name:?}")))?;
            (p.level, p.width)
        }
        (None, Some(l), Some(w)) => (l, w),
        _ => bail!(UsageError("give --level and --width, or --preset".into())),
    };
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    if bytes.len() % 4 != 0 {
        return Err(CoreError::SizeMismatch(format!(
            "{} bytes is not a whole number of f32 values",
            bytes.len()
        ))
        .into());
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let windowed = window_values(&values, level, width).map_err(|e| UsageError(e.to_string()))?;
    let out_bytes: Vec<u8> = windowed.iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut out = Outputs::new();
    out.write(&a.out, &out_bytes)?;
    out.commit();
    Ok(())
}
