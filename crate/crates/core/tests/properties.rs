mod common;

use common::{
    exhaustive_detect, naive_peaks, random_dense_bundle, random_lattice_grid, random_sparse_bundle,
};
use proptest::prelude::*;

use recist_core::dataio::{
    decode_detections, decode_heatmaps, encode_detections, encode_heatmaps, DetectionsFile,
};
use recist_core::eval::{froc, ImageMatches, MatchResult, MatchedDetection, DEFAULT_FP_TARGETS};
use recist_core::fusion::{
    fuse_tta, fuse_tta_along, soft_nms, unflip_detections, unflip_detections_along, FlipAxis,
    SoftNmsConfig,
};
use recist_core::geometry::{iou, BBox, ExtremePoints, Point2, Role};
use recist_core::grid::Grid2;
use recist_core::grouping::{detect, extract_peaks, Detection, GroupingConfig, Source};
use recist_core::loss::{
    check_focal_gradient, finite_diff_check, focal_loss, focal_loss_grad, FocalParams,
};
use recist_core::oracle::{generate_scene, simulate_heatmaps, DegradationConfig, SimRng};
use recist_core::targets::{offset_target, render_targets_for_input, TargetConfig};

fn boxed(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> Detection {
    let e = ExtremePoints::new(
        Point2::new((x1 + x2) / 2.0, y1),
        Point2::new(x1, (y1 + y2) / 2.0),
        Point2::new((x1 + x2) / 2.0, y2),
        Point2::new(x2, (y1 + y2) / 2.0),
    );
    Detection::new(e, score, Source::Original)
}

fn random_detections(rng: &mut SimRng, n: usize, span: f64) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x = rng.uniform_in(0.0, span);
            let y = rng.uniform_in(0.0, span);
            let w = rng.uniform_in(1.0, 40.0);
            let h = rng.uniform_in(1.0, 40.0);
            boxed(x, y, x + w, y + h, rng.uniform_in(0.0, 6.0))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn peaks_equal_naive_scan(seed in any::<u64>(), levels in 2usize..8, k1 in 1usize..60) {
        let mut rng = SimRng::new(seed);
        let g = random_lattice_grid(&mut rng, 16, 16, levels);
        let cfg = GroupingConfig { k1, ..Default::default() };
        let got: Vec<_> = extract_peaks(&g, &cfg, Role::Top)
            .iter()
            .map(|p| (p.row, p.col, p.score as f32))
            .collect();
        prop_assert_eq!(got, naive_peaks(&g, cfg.tau_e, k1, 3));
    }

    #[test]
    fn wide_kernel_peaks_equal_naive_scan(seed in any::<u64>(), kernel in prop::sample::select(vec![1usize, 5, 7])) {
        let mut rng = SimRng::new(seed);
        let g = random_lattice_grid(&mut rng, 12, 20, 5);
        let cfg = GroupingConfig { kernel, k1: 1000, ..Default::default() };
        let got: Vec<_> = extract_peaks(&g, &cfg, Role::Left)
            .iter()
            .map(|p| (p.row, p.col, p.score as f32))
            .collect();
        prop_assert_eq!(got, naive_peaks(&g, cfg.tau_e, 1000, kernel));
    }

    #[test]
    fn grouping_equals_exhaustive_enumeration(seed in any::<u64>(), k2 in prop::sample::select(vec![1usize, 7, 100, 100_000]), enclosing in any::<bool>()) {
        let mut rng = SimRng::new(seed);
        let bundle = random_sparse_bundle(&mut rng, 6);
        let cfg = GroupingConfig { k2, enclosing, ..Default::default() };
        prop_assert_eq!(detect(&bundle, &cfg).unwrap(), exhaustive_detect(&bundle, &cfg));
    }

    #[test]
    fn soft_nms_never_raises_scores(seed in any::<u64>(), n in 0usize..30) {
        let mut rng = SimRng::new(seed);
        let dets = random_detections(&mut rng, n, 100.0);
        let out = soft_nms(&dets, &SoftNmsConfig::default());
        prop_assert!(out.len() <= dets.len());
        for d in &out {
            let original = dets.iter().find(|o| o.bbox == d.bbox && o.extremes == d.extremes).unwrap();
            prop_assert!(d.score <= original.score);
        }
        prop_assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
        if let Some(best) = dets.iter().max_by(|a, b| a.score.total_cmp(&b.score)) {
            prop_assert_eq!(out[0].score, best.score);
        }
    }

    #[test]
    fn soft_nms_leaves_disjoint_boxes_alone(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = SimRng::new(seed);
        let dets: Vec<_> = (0..n)
            .map(|i| {
                let x = 50.0 * i as f64;
                boxed(x, 0.0, x + rng.uniform_in(1.0, 49.0), 30.0, rng.uniform_in(0.01, 5.0))
            })
            .collect();
        let mut expected = dets.clone();
        expected.sort_by(|a, b| b.score.total_cmp(&a.score));
        let out = soft_nms(&dets, &SoftNmsConfig::default());
        prop_assert_eq!(out.iter().map(|d| d.score).collect::<Vec<_>>(),
                        expected.iter().map(|d| d.score).collect::<Vec<_>>());
    }

    #[test]
    fn soft_nms_ignores_input_order(seed in any::<u64>(), n in 0usize..25) {
        let mut rng = SimRng::new(seed);
        let dets = random_detections(&mut rng, n, 60.0);
        let mut reversed = dets.clone();
        reversed.reverse();
        let cfg = SoftNmsConfig::default();
        prop_assert_eq!(soft_nms(&dets, &cfg), soft_nms(&reversed, &cfg));
    }

    #[test]
    fn froc_is_monotone(seed in any::<u64>()) {
        let mut rng = SimRng::new(seed);
        let images: Vec<ImageMatches> = (0..1 + rng.below(8))
            .map(|_| {
                let n_gt = rng.below(5);
                let detections = (0..rng.below(10))
                    .map(|index| MatchedDetection {
                        index,
                        score: rng.below(20) as f64 / 4.0,
                        is_tp: false,
                        gt: None,
                    })
                    .collect();
                let mut m = ImageMatches { detections, n_gt };
                for (g, d) in m.detections.iter_mut().take(n_gt).enumerate() {
                    if rng.below(2) == 0 {
                        d.is_tp = true;
                        d.gt = Some(g);
                    }
                }
                m
            })
            .collect();
        let matches = MatchResult { images };
        let targets = [0.125, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 8.0];
        match froc(&matches, &targets) {
            Ok(r) => {
                let s = r.sensitivities();
                prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
                prop_assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
                for p in &r.operating_points {
                    prop_assert!(p.fp_per_image <= p.fp_target);
                }
                prop_assert!(r.curve.windows(2).all(|w| w[0].sensitivity <= w[1].sensitivity
                    && w[0].fp_per_image <= w[1].fp_per_image));
                // dropping every false positive can only help
                let mut tp_only = matches.clone();
                for m in &mut tp_only.images {
                    m.detections.retain(|d| d.is_tp);
                }
                let better = froc(&tp_only, &targets).unwrap().sensitivities();
                prop_assert!(better.iter().zip(&s).all(|(b, a)| b >= a));
            }
            Err(_) => prop_assert_eq!(matches.images.iter().map(|m| m.n_gt).sum::<usize>(), 0),
        }
    }

    #[test]
    fn focal_gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = SimRng::new(seed);
        let target = Grid2::from_fn(8, 8, |_, _| if rng.below(10) == 0 { 1.0 } else { rng.uniform() * 0.99 });
        let pred = Grid2::from_fn(8, 8, |_, _| rng.uniform_in(0.05, 0.95));
        let n = 1 + rng.below(3);
        let p = FocalParams::default();
        let report = check_focal_gradient(&pred, &target, n, &p, 1e-6, 1e-5).unwrap();
        prop_assert_eq!(report.rel_errors.len(), 64);
        // the cellwise decomposition is sound: terms sum to the full loss
        let full = focal_loss(&pred, &target, n, &p).unwrap();
        let parts: f64 = pred.as_slice().iter().zip(target.as_slice())
            .map(|(&q, &y)| focal_loss(&Grid2::filled(1, 1, q), &Grid2::filled(1, 1, y), n, &p).unwrap())
            .sum();
        prop_assert!((full - parts).abs() <= 1e-12 * full.abs().max(1.0));
        // differencing the whole sum agrees wherever the partial is large
        // enough to survive rounding of the total
        let analytic = focal_loss_grad(&pred, &target, n, &p).unwrap();
        let loss = |x: &[f64]| focal_loss(&Grid2::from_vec(8, 8, x.to_vec()).unwrap(), &target, n, &p).unwrap();
        let coarse = finite_diff_check(loss, pred.as_slice(), analytic.as_slice(), 1e-6, 1e-5,
            |i| analytic.as_slice()[i].abs() < 1e-2).unwrap();
        prop_assert!(coarse.passed, "full-sum check: {}", coarse.max_rel_err);
        prop_assert!(report.passed, "max relative error {}", report.max_rel_err);
    }

    #[test]
    fn offsets_reconstruct_points(x in 0u32..1 << 20, y in 0u32..1 << 20, s in prop::sample::select(vec![1u32, 2, 4, 8])) {
        let p = Point2::new(f64::from(x) / 1024.0, f64::from(y) / 1024.0);
        let (dx, dy) = offset_target(&p, s);
        let sf = f64::from(s);
        prop_assert_eq!(sf * ((p.x / sf).floor() + dx), p.x);
        prop_assert_eq!(sf * ((p.y / sf).floor() + dy), p.y);
        prop_assert!((0.0..1.0).contains(&dx) && (0.0..1.0).contains(&dy));
    }

    #[test]
    fn heatmap_files_round_trip_bitwise(seed in any::<u64>()) {
        let mut rng = SimRng::new(seed);
        let b = random_dense_bundle(&mut rng);
        let bytes = encode_heatmaps(&b).unwrap();
        let back = decode_heatmaps(&bytes).unwrap();
        for (x, y) in b.planes().zip(back.planes()) {
            prop_assert!(x.as_slice().iter().zip(y.as_slice()).all(|(a, c)| a.to_bits() == c.to_bits()));
        }
        prop_assert_eq!(encode_heatmaps(&back).unwrap(), bytes);
    }

    #[test]
    fn detections_files_round_trip_bitwise(seed in any::<u64>()) {
        let mut rng = SimRng::new(seed);
        let mut file = DetectionsFile::default();
        for i in 0..rng.below(4) {
            let count = rng.below(6);
            let dets = random_detections(&mut rng, count, 500.0)
                .into_iter()
                .map(|mut d| { d.score = f64::from_bits(rng.next_u64() >> 2); d })
                .collect();
            file.images.insert(format!("img_{i}.png"), dets);
        }
        let bytes = encode_detections(&file).unwrap();
        let back = decode_detections(&bytes).unwrap();
        prop_assert_eq!(&back, &file);
        for (a, b) in back.images.values().flatten().zip(file.images.values().flatten()) {
            prop_assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
        prop_assert_eq!(encode_detections(&back).unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    // Mirroring the scene, detecting, and mapping back reproduces the
    // detections made on the original view.
    #[test]
    fn flip_detect_unflip_round_trip(seed in 0u64..10_000, n in 1usize..4) {
        let scene = generate_scene(n, (256, 256), (10.0, 50.0), seed).unwrap();
        let cfg = GroupingConfig::default();
        let plain = detect(&simulate_heatmaps(&scene, &DegradationConfig::default(), 4).unwrap(), &cfg).unwrap();
        let mirrored = detect(&simulate_heatmaps(&scene.flipped(), &DegradationConfig::default(), 4).unwrap(), &cfg).unwrap();
        let back = unflip_detections(&mirrored, 256.0);
        for gt in scene.extremes() {
            let a = plain.iter().find(|d| d.extremes == gt).unwrap();
            let b = back.iter().find(|d| d.extremes == gt).unwrap();
            prop_assert_eq!(a.score, b.score);
            prop_assert_eq!(a.bbox, b.bbox);
        }
        let fused = fuse_tta(&plain, &mirrored, 256.0, &SoftNmsConfig::default());
        for gt in scene.extremes() {
            let hit = fused.iter().any(|d| iou(&d.bbox, &BBox::new(gt.left.x, gt.top.y, gt.right.x, gt.bottom.y)) == 1.0);
            prop_assert!(hit);
        }
    }

    // Same round trip through the vertical mirror, on a non-square image so
    // that width and height cannot be confused.
    #[test]
    fn vertical_flip_round_trip(seed in 0u64..10_000, n in 1usize..4) {
        let scene = generate_scene(n, (320, 256), (10.0, 50.0), seed).unwrap();
        let cfg = GroupingConfig::default();
        let plain = detect(&simulate_heatmaps(&scene, &DegradationConfig::default(), 4).unwrap(), &cfg).unwrap();
        let mirrored_scene = scene.mirrored(FlipAxis::Vertical);
        let mirrored = detect(&simulate_heatmaps(&mirrored_scene, &DegradationConfig::default(), 4).unwrap(), &cfg).unwrap();
        let back = unflip_detections_along(&mirrored, FlipAxis::Vertical, 256.0);
        for gt in scene.extremes() {
            let a = plain.iter().find(|d| d.extremes == gt).unwrap();
            let b = back.iter().find(|d| d.extremes == gt).unwrap();
            prop_assert_eq!(a.score, b.score);
            prop_assert_eq!(a.bbox, b.bbox);
        }
        let fused = fuse_tta_along(&plain, &mirrored, FlipAxis::Vertical, 256.0, &SoftNmsConfig::default());
        for gt in scene.extremes() {
            let hit = fused.iter().any(|d| iou(&d.bbox, &BBox::new(gt.left.x, gt.top.y, gt.right.x, gt.bottom.y)) == 1.0);
            prop_assert!(hit);
        }
    }

    #[test]
    fn simulated_targets_render_exactly(seed in 0u64..10_000) {
        let scene = generate_scene(1 + (seed % 5) as usize, (512, 512), (10.0, 60.0), seed).unwrap();
        let sim = simulate_heatmaps(&scene, &DegradationConfig { seed, ..Default::default() }, 4).unwrap();
        let exact = render_targets_for_input(&scene.extremes(), 512, 512, 4, &TargetConfig::default()).unwrap();
        prop_assert_eq!(sim, exact.bundle);
    }
}

#[test]
fn detection_is_identical_across_pool_sizes() {
    let mut rng = SimRng::new(77);
    let cfg = GroupingConfig::default();
    for _ in 0..20 {
        let bundle = random_sparse_bundle(&mut rng, 6);
        let runs: Vec<_> = [1, 2, 3]
            .iter()
            .map(|&t| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .unwrap()
                    .install(|| detect(&bundle, &cfg).unwrap())
            })
            .collect();
        assert!(runs.windows(2).all(|w| w[0] == w[1]));
    }
}

#[test]
fn default_fp_targets() {
    assert_eq!(DEFAULT_FP_TARGETS, [0.5, 1.0, 2.0, 3.0, 4.0]);
}
