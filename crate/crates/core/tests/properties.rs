use proptest::prelude::*;

use r2d2::autodiff::Tape;
use r2d2::datagen::{build_correspondences, sample_homography, synthesize_pair, Homography, HomographyRanges, PairConfig};
use r2d2::eval::{matching_score, mma, repeatability_score};
use r2d2::kernels::l2_normalize_last;
use r2d2::losses::{ap_kappa_loss, cosim_loss, peakiness_loss, soft_ap, warp_heatmap};
use r2d2::{
    evaluate_pair, extract_keypoints, mutual_nn_match, DenseModel, EvalConfig, ExtractConfig, Keypoint, KeypointSet,
    Network, NetworkConfig, NetworkOutputs, PairGeometry, Result, Tensor, DESCRIPTOR_DIM,
};

const SIDE: usize = 64;

fn unit(raw: &[f32]) -> Vec<f32> {
    let mut d = vec![0.0f32; DESCRIPTOR_DIM];
    d[..raw.len()].copy_from_slice(raw);
    d[raw.len()] = 0.1;
    let n = d.iter().map(|v| v * v).sum::<f32>().sqrt();
    d.iter().map(|v| v / n).collect()
}

fn keypoint_set() -> impl Strategy<Value = KeypointSet> {
    prop::collection::vec(((0.0f32..63.0), (0.0f32..63.0), prop::collection::vec(-1.0f32..1.0, 4)), 0..25).prop_map(
        |pts| KeypointSet {
            keypoints: pts
                .into_iter()
                .map(|(x, y, d)| Keypoint {
                    x,
                    y,
                    scale: 1.0,
                    score: 0.5,
                    descriptor: unit(&d),
                })
                .collect(),
            width: SIDE,
            height: SIDE,
        },
    )
}

fn geometry(seed: u64) -> PairGeometry {
    let h = sample_homography(seed, &HomographyRanges::default(), SIDE, SIDE).unwrap();
    PairGeometry::new(h, (SIDE, SIDE), (SIDE, SIDE))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_lie_in_unit_interval_and_mma_is_monotone(a in keypoint_set(), b in keypoint_set(), seed in any::<u64>()) {
        let geom = geometry(seed);
        let cfg = EvalConfig::default();
        let r = evaluate_pair(&a, &b, &geom, &cfg).unwrap();
        if let Some(rep) = &r.repeatability {
            prop_assert!((0.0..=1.0).contains(&rep.value));
        }
        if let Some(m) = r.matching_score.value {
            prop_assert!((0.0..=1.0).contains(&m));
        }
        for w in r.mma.ratios.windows(2) {
            prop_assert!((0.0..=1.0).contains(&w[0].value));
            prop_assert!(w[0].value <= w[1].value, "thresholds ascend, MMA must not drop");
        }
    }

    #[test]
    fn mutual_matching_is_symmetric(a in keypoint_set(), b in keypoint_set()) {
        let ab = mutual_nn_match(&a, &b).unwrap();
        let ba = mutual_nn_match(&b, &a).unwrap();
        prop_assert_eq!(ab.transposed().matches, ba.matches);
    }

    #[test]
    fn repeatability_ignores_descriptors(a in keypoint_set(), b in keypoint_set(), seed in any::<u64>(), shift in 0usize..4) {
        prop_assume!(!a.is_empty() || !b.is_empty());
        let geom = geometry(seed);
        let mut scrambled = b.clone();
        for k in &mut scrambled.keypoints {
            k.descriptor.rotate_left(shift + 1);
        }
        let r1 = repeatability_score(&a, &b, &geom, 3.0).unwrap();
        let r2 = repeatability_score(&a, &scrambled, &geom, 3.0).unwrap();
        prop_assert_eq!(r1, r2);
    }

    #[test]
    fn planted_detector_scores_one(seed in any::<u64>(), pts in prop::collection::vec(((8.0f64..56.0), (8.0f64..56.0)), 1..20)) {
        let h = Homography::translation(2.5, -1.5);
        let geom = PairGeometry::new(h, (SIDE, SIDE), (SIDE, SIDE));
        let mut a = KeypointSet { keypoints: vec![], width: SIDE, height: SIDE };
        let mut b = a.clone();
        // One distinct axis per point so nearest neighbours are the planted ones.
        for (i, &(x, y)) in pts.iter().enumerate() {
            let mut d = vec![0.0f32; DESCRIPTOR_DIM];
            d[i] = 1.0;
            let (u, v) = h.apply(x, y).unwrap();
            a.keypoints.push(Keypoint { x: x as f32, y: y as f32, scale: 1.0, score: 1.0, descriptor: d.clone() });
            b.keypoints.push(Keypoint { x: u as f32, y: v as f32, scale: 1.0, score: 1.0, descriptor: d });
        }
        let _ = seed;
        // Points closer than the tolerance can be assigned to each other's twins.
        let spread = pts.iter().enumerate().all(|(i, p)| pts[..i].iter().all(|q| (p.0 - q.0).hypot(p.1 - q.1) > 6.0));
        prop_assume!(spread);
        prop_assert_eq!(repeatability_score(&a, &b, &geom, 3.0).unwrap().value, 1.0);
        let matches = mutual_nn_match(&a, &b).unwrap();
        let curve = mma(&matches, &a, &b, &h, &[0.0, 1e-3, 1.0, 3.0]).unwrap();
        for r in &curve.ratios[1..] {
            prop_assert_eq!(r.value, 1.0);
        }
        prop_assert!(curve.ratios[0].value >= 0.0);
        prop_assert_eq!(matching_score(&a, &b, &geom, 3.0).unwrap().value, Some(1.0));
    }
}

/// S, R and descriptors read straight from the image channels.
struct ChannelModel;

impl DenseModel for ChannelModel {
    fn infer(&self, image: &Tensor<f32>) -> Result<NetworkOutputs<f32>> {
        let (h, w) = (image.shape()[0], image.shape()[1]);
        let px = image.data().chunks_exact(3);
        let s = px.clone().map(|p| p[0]).collect();
        let r = px.clone().map(|p| p[1]).collect();
        let mut d = Vec::with_capacity(h * w * DESCRIPTOR_DIM);
        for p in px {
            d.extend_from_slice(&unit(&[p[0], p[2], 1.0 - p[1]]));
        }
        Ok(NetworkOutputs {
            descriptors: Tensor::new([h, w, DESCRIPTOR_DIM], d)?,
            repeatability: Tensor::new([h, w], s)?,
            reliability: Tensor::new([h, w], r)?,
        })
    }
}

fn image(side: usize) -> impl Strategy<Value = Tensor<f32>> {
    prop::collection::vec(0.0f32..1.0, side * side * 3).prop_map(move |v| Tensor::new([side, side, 3], v).unwrap())
}

fn extract_cfg(top_k: usize) -> ExtractConfig {
    ExtractConfig {
        top_k,
        repeatability_threshold: 0.2,
        reliability_threshold: 0.2,
        min_size: 16,
        ..ExtractConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn extraction_is_idempotent(img in image(32)) {
        let a = extract_keypoints(&img, &ChannelModel, &extract_cfg(100)).unwrap();
        let b = extract_keypoints(&img, &ChannelModel, &extract_cfg(100)).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn smaller_k_is_a_prefix(img in image(32), k in 1usize..40) {
        let big = extract_keypoints(&img, &ChannelModel, &extract_cfg(60)).unwrap();
        let small = extract_keypoints(&img, &ChannelModel, &extract_cfg(k)).unwrap();
        prop_assert_eq!(&small.keypoints[..], &big.keypoints[..k.min(big.len())]);
    }

    #[test]
    fn detections_are_spaced_sorted_and_scored(img in image(32)) {
        let set = extract_keypoints(&img, &ChannelModel, &extract_cfg(500)).unwrap();
        for w in set.keypoints.windows(2) {
            prop_assert!(w[0].score >= w[1].score);
        }
        for (i, p) in set.keypoints.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&p.score));
            for q in &set.keypoints[..i] {
                if p.scale == q.scale {
                    prop_assert!((p.x - q.x).hypot(p.y - q.y) > 1.0);
                }
            }
            if p.scale == 1.0 {
                let at = (p.y as usize * 32 + p.x as usize) * 3;
                prop_assert_eq!(p.score, img.data()[at] * img.data()[at + 1]);
            }
        }
    }
}

fn heatmap(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n * n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn repeatability_losses_are_bounded(s1 in heatmap(16), s2 in heatmap(16), seed in any::<u64>()) {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_f64([16, 16], &s1).unwrap(), false);
        let b = tape.leaf(Tensor::from_f64([16, 16], &s2).unwrap(), false);
        let ranges = HomographyRanges { perspective: 0.0, ..HomographyRanges::default() };
        let h = sample_homography(seed, &ranges, 16, 16).unwrap();
        let field = build_correspondences(&h, (16, 16), (16, 16));
        let (warped, mask) = warp_heatmap(&mut tape, b, &field).unwrap();
        let cosim = cosim_loss(&mut tape, a, warped, &mask, 8, 1).unwrap();
        let peaky = peakiness_loss(&mut tape, a, 8, 1).unwrap();
        for v in [tape.value(cosim).item(), tape.value(peaky).item()] {
            prop_assert!((0.0..=2.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn cosim_is_invariant_to_a_joint_transpose(s1 in heatmap(12), s2 in heatmap(12)) {
        let t = |v: &[f64]| (0..144).map(|i| v[(i % 12) * 12 + i / 12]).collect::<Vec<f64>>();
        let loss = |x: &[f64], y: &[f64]| {
            let mut tape = Tape::<f64>::new();
            let a = tape.leaf(Tensor::from_f64([12, 12], x).unwrap(), false);
            let b = tape.leaf(Tensor::from_f64([12, 12], y).unwrap(), false);
            let l = cosim_loss(&mut tape, a, b, &[true; 144], 4, 1).unwrap();
            tape.value(l).item()
        };
        prop_assert!((loss(&s1, &s2) - loss(&t(&s1), &t(&s2))).abs() < 1e-12);
    }

    #[test]
    fn gated_ap_loss_is_bounded_with_slope_kappa_minus_ap(ap in 0.0f64..=1.0, r in 0.0f64..=0.9, kappa in 0.0f64..=1.0) {
        let l = ap_kappa_loss(ap, r, kappa).unwrap();
        prop_assert!((0.0..=1.0).contains(&l));
        let slope = (ap_kappa_loss(ap, r + 0.1, kappa).unwrap() - l) / 0.1;
        prop_assert!((slope - (kappa - ap)).abs() < 1e-9);
        prop_assert_eq!(slope < 0.0, ap - kappa > 1e-9);
    }

    #[test]
    fn soft_ap_rewards_a_closer_positive(d_pos in 0.0f64..2.0, d_neg in 0.0f64..2.0, bins_closer in 0usize..25) {
        // Moves are whole bin widths: within a bin the quantized score is not
        // monotone (see `soft_ap_is_not_monotone_within_a_bin`).
        let closer = d_pos - bins_closer as f64 * (2.0 / 24.0);
        prop_assume!(closer >= 0.0);
        let before = soft_ap(&[d_pos, d_neg], &[true, false], 25).unwrap();
        let after = soft_ap(&[closer, d_neg], &[true, false], 25).unwrap();
        prop_assert!(after >= before - 1e-12, "{before} -> {after}");
    }

    #[test]
    fn normalized_descriptors_have_unit_norm(v in prop::collection::vec(-3.0f32..3.0, 6 * DESCRIPTOR_DIM)) {
        let x = Tensor::new([2, 3, DESCRIPTOR_DIM], v).unwrap();
        let y = l2_normalize_last(&x);
        for (raw, unit) in x.data().chunks(DESCRIPTOR_DIM).zip(y.data().chunks(DESCRIPTOR_DIM)) {
            if raw.iter().map(|a| a * a).sum::<f32>().sqrt() > 1e-3 {
                let n = unit.iter().map(|a| a * a).sum::<f32>().sqrt();
                prop_assert!((n - 1.0).abs() <= 1e-5, "{n}");
            }
        }
    }

    #[test]
    fn correspondences_are_exact(seed in any::<u64>()) {
        let h = sample_homography(seed, &HomographyRanges::default(), 40, 40).unwrap();
        let field = build_correspondences(&h, (40, 40), (40, 40));
        for y in 0..40 {
            for x in 0..40 {
                if let Some((u, v)) = field.target(x, y) {
                    let (eu, ev) = h.apply(x as f64, y as f64).unwrap();
                    prop_assert!((u - eu).hypot(v - ev) <= 1e-6);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn network_keeps_resolution_and_ranges(h in 16usize..28, w in 16usize..28, seed in any::<u64>()) {
        let cfg = NetworkConfig { seed, ..NetworkConfig::toy() };
        let net = Network::<f32>::new(cfg).unwrap();
        let img = Tensor::new([h, w, 3], (0..h * w * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect()).unwrap();
        let out = net.infer_generic(&img).unwrap();
        prop_assert_eq!(out.descriptors.shape(), &[h, w, DESCRIPTOR_DIM]);
        for map in [&out.repeatability, &out.reliability] {
            prop_assert_eq!(map.shape(), &[h, w]);
            prop_assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

/// Mean valid fraction of crop 1 over `seeds` pairs with the given translation
/// range and everything else fixed.
fn mean_coverage(translation_frac: f64, seeds: u64) -> f64 {
    let cfg = PairConfig {
        scene_size: 64,
        crop_size: 48,
        homography: HomographyRanges {
            translation_frac,
            ..HomographyRanges::default()
        },
        min_valid_fraction: 0.0,
        ..PairConfig::default()
    };
    (0..seeds).map(|s| synthesize_pair(&cfg, s).unwrap().field.valid_fraction()).sum::<f64>() / seeds as f64
}

#[test]
fn wider_translation_never_raises_coverage() {
    let fractions = [0.0, 0.1, 0.2, 0.3];
    let coverage: Vec<f64> = fractions.iter().map(|&t| mean_coverage(t, 100)).collect();
    for w in coverage.windows(2) {
        assert!(w[1] <= w[0] + 0.01, "{coverage:?}");
    }
}

#[test]
fn soft_ap_is_not_monotone_within_a_bin() {
    // A positive behind a negative earns half credit on a bin center but
    // only 5/12 when split evenly across two bins, so half a bin closer scores lower.
    let delta = 2.0 / 24.0;
    let on_center = soft_ap(&[1.0 + delta, 0.0], &[true, false], 25).unwrap();
    let split = soft_ap(&[1.0 + delta / 2.0, 0.0], &[true, false], 25).unwrap();
    assert!((on_center - 0.5).abs() < 1e-12, "{on_center}");
    assert!((split - 5.0 / 12.0).abs() < 1e-12, "{split}");
}
