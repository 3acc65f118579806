use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use geolandmark::dataset::{parse_dataset, write_records, ParseMode};
use geolandmark::geometry::{geometric_loss, geometric_loss_from_directions, UnitDirection};
use geolandmark::heatmap::{encode_gaussian, soft_argmax, softmax_probabilities, Heatmap, Role};
use geolandmark::losses::{geo_heatmap_grad, mse_heatmap_grad, total_loss, LossParams};
use geolandmark::metrics::{evaluate_corpus, SpacingSource};
use geolandmark::optim::LrSchedule;
use geolandmark::schema::{line_groups_default, validate_landmark_set, AnnotationRecord, LandmarkId, LandmarkSet, LossMode, Point};
use geolandmark::synth::{generate_dataset, generate_tooth_config, perturb, sample_params, ParamRanges, SynthConfig};
use geolandmark::NUM_LANDMARKS;

fn heatmap(max_side: usize, amp: f64) -> impl Strategy<Value = Heatmap> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(w, h)| {
        prop::collection::vec(-amp..amp, w * h).prop_map(move |v| Heatmap::new(w, h, v).unwrap())
    })
}

fn tooth(seed: u64) -> LandmarkSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = sample_params(&mut rng, &ParamRanges::default(), 957, 555);
    p.noise_sigma = 0.0;
    generate_tooth_config(&p).unwrap()
}

fn mode() -> impl Strategy<Value = LossMode> {
    prop_oneof![Just(LossMode::PaperLiteral), Just(LossMode::Absolute), Just(LossMode::Squared)]
}

#[test]
fn line_groups_cover_exactly_the_root_points() {
    use LandmarkId::*;
    let s = line_groups_default();
    let constrained: Vec<LandmarkId> = (0..NUM_LANDMARKS)
        .map(|i| LandmarkId::from_index(i).unwrap())
        .filter(|&id| s.constrains(id))
        .collect();
    assert_eq!(
        constrained,
        vec![CP, AP, AB_AP, PB_AP, AB_13, AR_13, PR_13, PB_13, AB_12, AR_12, PR_12, PB_12]
    );
    for id in [CEJ_A, CEJ_P, A_crest, P_crest] {
        assert!(!s.constrains(id));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_normalizes(h in heatmap(128, 10.0), t in prop::sample::select(vec![1.0, 0.5, 0.1, 0.01])) {
        let p = softmax_probabilities(&h, t).unwrap();
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn soft_argmax_ignores_constant_shifts(h in heatmap(40, 10.0), c in -1e3..1e3f64) {
        let shifted = Heatmap::new(h.width(), h.height(), h.values().iter().map(|v| v + c).collect()).unwrap();
        let a = soft_argmax(&h, 0.1).unwrap();
        let b = soft_argmax(&shifted, 0.1).unwrap();
        prop_assert!((a.x - b.x).abs() <= 1e-10 && (a.y - b.y).abs() <= 1e-10);
    }

    #[test]
    fn soft_argmax_stays_on_the_lattice(h in heatmap(40, 50.0), t in 1e-3..10.0f64) {
        let p = soft_argmax(&h, t).unwrap();
        prop_assert!(p.x >= 0.0 && p.x <= (h.width() - 1) as f64);
        prop_assert!(p.y >= 0.0 && p.y <= (h.height() - 1) as f64);
    }

    #[test]
    fn geometric_loss_is_invariant_under_similarity(
        seed in any::<u64>(),
        noise in 0.0..5.0f64,
        angle in -3.2..3.2f64,
        shift in (-500.0..500.0f64, -500.0..500.0f64),
        scale in 0.1..10.0f64,
        m in mode(),
    ) {
        let set = perturb(&tooth(seed), noise, seed ^ 1);
        let (s, c) = angle.sin_cos();
        let similar = |rot: bool| {
            let (s, c) = if rot { (s, c) } else { (0.0, 1.0) };
            set.map(|p| Point::new(scale * (c * p.x - s * p.y) + shift.0, scale * (s * p.x + c * p.y) + shift.1))
        };
        let schema = line_groups_default().with_loss_mode(m);
        let a = geometric_loss(&set, &schema).unwrap();
        let scaled = geometric_loss(&similar(false), &schema).unwrap();
        let rotated = geometric_loss(&similar(true), &schema).unwrap();
        prop_assert!((a.total - scaled.total).abs() <= 1e-9);
        for j in 0..3 {
            prop_assert!((a.parallel_terms[j] - rotated.parallel_terms[j]).abs() <= 1e-9);
            prop_assert!((a.perpendicular_terms[j].abs() - rotated.perpendicular_terms[j].abs()).abs() <= 1e-9);
        }
        // the signed dot of the literal mode flips when a rotation carries a
        // line across vertical, so only the unsigned modes keep the total
        if m != LossMode::PaperLiteral {
            prop_assert!((a.total - rotated.total).abs() <= 1e-9, "{} vs {}", a.total, rotated.total);
        }
    }

    #[test]
    fn geometric_loss_bounds(seed in any::<u64>(), noise in 0.0..60.0f64, m in mode()) {
        let set = perturb(&tooth(seed), noise, seed.wrapping_add(3));
        let schema = line_groups_default().with_loss_mode(m);
        if let Ok(v) = geometric_loss(&set, &schema) {
            let (lo, hi) = if m == LossMode::PaperLiteral { (-0.5, 1.0) } else { (0.0, 1.0) };
            prop_assert!(v.total >= lo - 1e-15 && v.total <= hi + 1e-15, "{}", v.total);
        }
    }

    #[test]
    fn absolute_loss_vanishes_only_for_the_exact_construction(
        axis in -1.5..1.5f64,
        tilts in prop::array::uniform3(prop_oneof![Just(0.0), 1e-6..0.3f64, -0.3..-1e-6f64]),
    ) {
        let a = UnitDirection::from_angle(axis);
        let levels = tilts.map(|d| UnitDirection::from_angle(axis + std::f64::consts::FRAC_PI_2 + d));
        let v = geometric_loss_from_directions(&a, &levels, LossMode::Absolute).total;
        if tilts.iter().all(|d| *d == 0.0) {
            prop_assert!(v <= 1e-15);
        } else {
            prop_assert!(v > 0.0);
        }
    }

    #[test]
    fn loss_is_linear_in_lambda_and_gradients_add(seed in any::<u64>(), lambda in 0.0..10.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = tooth(seed);
        // a small crop so the decoded points are well spread
        let frame = set.map(|p| Point::new(2.0 + p.x * 20.0 / 957.0, 2.0 + p.y * 20.0 / 555.0));
        let target = encode_gaussian(&frame, 24, 24, 2.0).unwrap();
        let noise: Vec<f64> = (0..target.len()).map(|_| rand::Rng::random_range(&mut rng, -0.2..0.2)).collect();
        let pred = target.with_flat_values(
            Role::Logits,
            &target.flat_values().zip(&noise).map(|(t, n)| 3.0 * t + n).collect::<Vec<_>>(),
        ).unwrap();
        let schema = line_groups_default();
        let base = LossParams { lambda: 0.0, ..LossParams::default() };
        let t0 = total_loss(&pred, &frame, &schema, base).unwrap();
        let t1 = total_loss(&pred, &frame, &schema, LossParams { lambda, ..base }).unwrap();
        prop_assume!(!t1.degenerate);
        prop_assert_eq!(t1.breakdown.total, t1.breakdown.mse + lambda * t1.breakdown.geo);
        prop_assert_eq!(t0.breakdown.mse, t1.breakdown.mse);
        let diff = t1.breakdown.total - t0.breakdown.total;
        prop_assert!((diff - lambda * t1.breakdown.geo).abs() <= 2.0 * f64::EPSILON * t1.breakdown.total.abs());

        let mse_g = mse_heatmap_grad(&pred, &target).unwrap();
        let (_, geo_g) = geo_heatmap_grad(&pred, &schema, base.temperature).unwrap();
        for ((c, m), g) in t1.grad.flat_values().zip(mse_g.flat_values()).zip(geo_g.flat_values()) {
            prop_assert!((c - (m + lambda * g)).abs() <= 1e-12);
        }
    }

    #[test]
    fn sdr_is_monotone_and_order_free(seed in any::<u64>(), n in 1usize..8, mut t in prop::array::uniform3(0.05..5.0f64)) {
        t.sort_by(f64::total_cmp);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gts = generate_dataset(&SynthConfig { n_images: n, split: [n, 0, 0], seed, ..SynthConfig::default() })
            .unwrap()
            .splits[0]
            .clean
            .clone();
        let preds: Vec<AnnotationRecord> = gts
            .iter()
            .map(|g| AnnotationRecord {
                landmarks: perturb(&g.landmarks, rand::Rng::random_range(&mut rng, 1.0..20.0), rand::Rng::random(&mut rng)),
                ..g.clone()
            })
            .collect();
        let a = evaluate_corpus(&preds, &gts, &t, SpacingSource::FromGroundTruth).unwrap();
        prop_assert!(a.sdr.windows(2).all(|w| w[0].1 <= w[1].1));
        let (mut rp, mut rg) = (preds.clone(), gts.clone());
        rp.reverse();
        rg.rotate_left(n / 2);
        let b = evaluate_corpus(&rp, &rg, &t, SpacingSource::FromGroundTruth).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn annotation_files_round_trip_bit_exactly(seed in any::<u64>(), noise in 0.0..4.0f64) {
        let d = generate_dataset(&SynthConfig { n_images: 3, split: [3, 0, 0], seed, noise_sigma: noise, ..SynthConfig::default() }).unwrap();
        let records = &d.splits[0].noisy;
        let back = parse_dataset(write_records(records).as_bytes(), ParseMode::Predictions).unwrap();
        prop_assert_eq!(&back, records);
        for r in records {
            prop_assert!(validate_landmark_set(&r.landmarks, r.width, r.height).is_valid());
        }
    }

    #[test]
    fn warmup_is_continuous_and_decay_piecewise_constant(step in 0usize..2000, epoch in 0usize..300) {
        let s = LrSchedule::default();
        let w = s.warmup_steps;
        if step < w {
            let jump = (s.lr_factor(step + 1, epoch) - s.lr_factor(step, epoch)).abs();
            let per_step = (1.0 - s.warmup_start_factor) / w as f64;
            prop_assert!(jump <= per_step * s.lr_factor(w, epoch) + 1e-15);
        } else {
            prop_assert_eq!(s.lr_factor(step, epoch), s.lr_factor(step + 1, epoch));
            if !s.milestones.contains(&(epoch + 1)) {
                prop_assert_eq!(s.lr_factor(step, epoch), s.lr_factor(step, epoch + 1));
            }
        }
    }
}

#[test]
fn residual_grows_with_noise_over_200_configurations() {
    let schema = line_groups_default().with_loss_mode(LossMode::Absolute);
    let configs: Vec<LandmarkSet> = (0..200).map(tooth).collect();
    let means: Vec<f64> = [0.0, 0.5, 1.0, 2.0, 4.0]
        .iter()
        .map(|&sigma| {
            configs
                .iter()
                .enumerate()
                .map(|(i, c)| geometric_loss(&perturb(c, sigma, 1000 + i as u64), &schema).unwrap().total)
                .sum::<f64>()
                / 200.0
        })
        .collect();
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
}
