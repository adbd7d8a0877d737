use proptest::prelude::*;
use rand::SeedableRng;
use wmr_core::loss::softmax;
use wmr_core::net::{
    fuse_region_scores, predict_frame, Architecture, DropoutPlan, FusionConfig, LossBreakdown,
    WmrModel,
};
use wmr_core::optim::TrainConfig;
use wmr_core::region::{
    filter_secondary, iou, BoundingBox, ProposalFilterConfig, ProposalSet, RegionAnnotation,
};
use wmr_core::runtime::{
    fuse_streams, latency_model, linear_score_fusion_train, mean_probs, sample_test_frames,
    sample_training_frames, LinearFusionConfig,
};
use wmr_core::synth::{generate_dataset, read_manifest, SynthConfig};
use wmr_core::tensor::Tensor;
use wmr_core::{Error, Model32, Model64, WmrRng};

fn arb_box(extent: i32) -> impl Strategy<Value = BoundingBox> {
    (0..extent, 0..extent, 1..=extent, 1..=extent).prop_map(move |(x, y, w, h)| {
        BoundingBox::new(x, y, (x + w).min(extent + 1), (y + h).min(extent + 1)).unwrap()
    })
}

fn scores(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, k)
}

fn distribution(k: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..1.0, k).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(40), b in arb_box(40)) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
        if a.contains(&b) {
            prop_assert!((v - b.area() as f64 / a.area() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn filter_ignores_proposal_order(
        boxes in prop::collection::vec(arb_box(30), 0..25),
        primary in arb_box(30),
        seed in any::<u64>(),
    ) {
        let cfg = ProposalFilterConfig::default();
        let a = filter_secondary(&ProposalSet::new(boxes.clone(), 0, 31, 31), &primary, &cfg);
        let mut shuffled = boxes.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut WmrRng::seed_from_u64(seed));
        let b = filter_secondary(&ProposalSet::new(shuffled, 0, 31, 31), &primary, &cfg);
        prop_assert_eq!(&a, &b);
        prop_assert!(!a.secondary.is_empty() && a.secondary.len() <= cfg.max_secondary);
        let in_band = boxes.iter().any(|b| (cfg.l..=cfg.u).contains(&iou(b, &primary)));
        if in_band {
            for s in &a.secondary {
                prop_assert!((cfg.l..=cfg.u).contains(&iou(s, &primary)));
            }
        } else {
            prop_assert_eq!(a.secondary, vec![BoundingBox::full(31, 31)]);
        }
    }

    #[test]
    fn softmax_lies_on_the_simplex(s in prop::collection::vec(-800.0f64..800.0, 1..12)) {
        let p = softmax(&s).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let top = wmr_core::tensor::argmax(&s);
        prop_assert_eq!(wmr_core::tensor::argmax(&p), top);
    }

    #[test]
    fn region_fusion_ignores_secondary_order(
        primary in scores(4),
        rows in prop::collection::vec(scores(4), 1..8),
        w in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let cfg = FusionConfig::default().with_primary_weight(w);
        let (fused, winners) = fuse_region_scores(&primary, &rows, &cfg).unwrap();
        let mut shuffled = rows.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut WmrRng::seed_from_u64(seed));
        let (again, _) = fuse_region_scores(&primary, &shuffled, &cfg).unwrap();
        prop_assert_eq!(&fused, &again);
        for k in 0..4 {
            let best = rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(rows[winners[k]][k], best);
            prop_assert_eq!(fused[k], w * primary[k] + (1.0 - w) * best);
        }
    }

    #[test]
    fn stream_fusion_is_a_convex_combination(p in distribution(5), q in distribution(5), w in 0.0f64..=1.0) {
        let cfg = FusionConfig::default().with_rgb_weight(w);
        let fused = fuse_streams(&p, &q, &cfg).unwrap();
        prop_assert!((fused.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for ((f, a), b) in fused.iter().zip(&p).zip(&q) {
            prop_assert!(*f >= a.min(*b) - 1e-15 && *f <= a.max(*b) + 1e-15);
        }
    }

    #[test]
    fn mean_of_distributions_is_a_distribution(rows in prop::collection::vec(distribution(4), 1..30)) {
        let m = mean_probs(&rows).unwrap();
        prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn learning_rate_is_a_step_function(it in 0u64..500_000) {
        let cfg = TrainConfig::default();
        let lr = cfg.learning_rate_at(it);
        let steps = it / cfg.lr_decay_every;
        prop_assert!((lr - 1e-4 / 10f64.powi(steps as i32)).abs() <= 1e-18);
        let start = steps * cfg.lr_decay_every;
        prop_assert_eq!(lr, cfg.learning_rate_at(start));
    }

    #[test]
    fn loss_total_is_cls_plus_weighted_reg(cls in 0.0f64..10.0, reg in 0.0f64..10.0, alpha in 0.0f64..2.0) {
        let l = LossBreakdown::new(cls, reg, alpha);
        prop_assert!(l.is_consistent());
        prop_assert_eq!(l.total, cls + alpha * reg);
    }

    #[test]
    fn test_frames_are_spread_over_the_video(len in 1usize..200, count in 1usize..40) {
        let idx = sample_test_frames(len, count);
        prop_assert_eq!(idx.len(), count);
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(idx.iter().all(|&i| i < len));
        prop_assert_eq!(idx[0], 0);
    }
}

#[test]
fn test_frame_examples() {
    assert_eq!(sample_test_frames(16, 4), vec![0, 4, 8, 12]);
    assert_eq!(sample_test_frames(100, 25)[..4], [0, 4, 8, 12]);
    let idx = sample_test_frames(16, 25);
    assert_eq!(idx.len(), 25);
    assert_eq!(idx[24], 15);
}

#[test]
fn latency_model_examples() {
    assert_eq!(format!("{:.4}", latency_model(30.0, 10)), "0.3333");
    assert_eq!(format!("{:.4}", latency_model(30.0, 16)), "0.5333");
    assert_eq!(latency_model(25.0, 10), 0.4);
}

/// Pearson chi-square of the training frame and stack-start draws against
/// the uniform distribution; 0.999 quantiles for 15 and 5 degrees of
/// freedom are 37.70 and 20.52.
#[test]
fn training_draws_are_uniform() {
    let mut rng = WmrRng::seed_from_u64(42);
    let (frames, n) = (16usize, 60_000usize);
    let mut rgb = vec![0usize; frames];
    let mut starts = vec![0usize; frames - 10];
    for _ in 0..n {
        let (r, s) = sample_training_frames(frames, &mut rng).unwrap();
        rgb[r] += 1;
        starts[s] += 1;
    }
    let chi = |counts: &[usize]| {
        let e = n as f64 / counts.len() as f64;
        counts
            .iter()
            .map(|&c| (c as f64 - e).powi(2) / e)
            .sum::<f64>()
    };
    assert!(chi(&rgb) < 37.70, "rgb chi-square {}", chi(&rgb));
    assert!(chi(&starts) < 20.52, "start chi-square {}", chi(&starts));
    assert!(matches!(
        sample_training_frames(10, &mut rng),
        Err(Error::Input(_))
    ));
}

#[test]
fn linear_fusion_separates_separable_scores() {
    // class k has the largest primary score at k
    let mut pairs = Vec::new();
    for i in 0..40 {
        let k = i % 3;
        let mut p = vec![0.0; 3];
        p[k] = 2.0 + (i as f64) * 0.01;
        let s = vec![0.1 * i as f64 % 1.0; 3];
        pairs.push((p, s, k));
    }
    let model = linear_score_fusion_train(&pairs, 3, &LinearFusionConfig::default()).unwrap();
    assert!(!model.degenerate);
    for (p, s, k) in &pairs {
        assert_eq!(model.predict(p, s), *k);
    }
}

#[test]
fn linear_fusion_on_constant_scores_predicts_majority() {
    let pairs = vec![
        (vec![1.0, 0.0], vec![0.0, 0.0], 1),
        (vec![1.0, 0.0], vec![0.0, 0.0], 1),
        (vec![1.0, 0.0], vec![0.0, 0.0], 0),
    ];
    let model = linear_score_fusion_train(&pairs, 2, &LinearFusionConfig::default()).unwrap();
    assert!(model.degenerate);
    assert_eq!(model.predict(&[1.0, 0.0], &[0.0, 0.0]), 1);
    let one_class = vec![(vec![1.0, 0.0], vec![0.0, 0.0], 0)];
    assert!(linear_score_fusion_train(&one_class, 2, &LinearFusionConfig::default()).is_err());
}

fn sample_frame(seed: u64) -> (Tensor<f64>, RegionAnnotation) {
    let mut rng = WmrRng::seed_from_u64(seed);
    let data = (0..16 * 16)
        .map(|_| rand::Rng::random_range(&mut rng, -0.5..0.5))
        .collect();
    let input = Tensor::from_vec(&[1, 16, 16], data).unwrap();
    let ann = RegionAnnotation {
        primary: BoundingBox::new(4, 4, 12, 12).unwrap(),
        secondary: vec![
            BoundingBox::new(0, 0, 10, 10).unwrap(),
            BoundingBox::new(6, 2, 16, 14).unwrap(),
            BoundingBox::new(2, 6, 14, 16).unwrap(),
        ],
        frame_id: 0,
    };
    (input, ann)
}

#[test]
fn backbone_runs_once_per_frame() {
    let model = Model64::new(Architecture::small(1, 4), 3).unwrap();
    let (input, mut ann) = sample_frame(1);
    for n in 1..=3 {
        ann.secondary.truncate(n);
        let before = model.backbone_call_count();
        model
            .forward_frame(&input, &ann, &mut DropoutPlan::Eval, true)
            .unwrap();
        assert_eq!(model.backbone_call_count(), before + 1);
    }
    ann.secondary.clear();
    assert!(matches!(
        model.forward_frame(&input, &ann, &mut DropoutPlan::Eval, false),
        Err(Error::Invariant(_))
    ));
}

#[test]
fn model_survives_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.wmr");
    let model = Model64::new(Architecture::small(1, 4), 9).unwrap();
    model.save(&path).unwrap();
    let loaded = Model64::load(&path).unwrap();
    let (input, ann) = sample_frame(2);
    let cfg = FusionConfig::default();
    assert_eq!(
        predict_frame(&model, &input, &ann, &cfg).unwrap(),
        predict_frame(&loaded, &input, &ann, &cfg).unwrap()
    );
    assert!(matches!(
        Model64::load(&dir.path().join("absent.wmr")),
        Err(Error::MissingFile(_))
    ));
}

#[test]
fn single_precision_model_agrees_with_double() {
    let m64 = Model64::new(Architecture::small(1, 4), 5).unwrap();
    let m32: Model32 = WmrModel::new(Architecture::small(1, 4), 5).unwrap();
    let (input, ann) = sample_frame(3);
    let cfg = FusionConfig::default();
    let p64 = predict_frame(&m64, &input, &ann, &cfg).unwrap();
    let p32 = predict_frame(&m32, &input.cast::<f32>(), &ann, &cfg).unwrap();
    for (a, b) in p64.iter().zip(&p32) {
        assert!((a - *b as f64).abs() < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn manifest_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        train_videos: 4,
        test_videos: 2,
        ..SynthConfig::default()
    };
    let written = generate_dataset(&cfg, dir.path()).unwrap();
    let read = read_manifest(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(read.entries, written.entries);
    let video = read.load_video(&read.entries[0], cfg.fps).unwrap();
    assert_eq!(video.frames.len(), cfg.frames_per_video);
    assert_eq!(video.label, read.entries[0].label);

    std::fs::remove_file(dir.path().join(&read.entries[1].path).join("0003.pgm")).unwrap();
    assert!(matches!(
        read.load_video(&read.entries[1], cfg.fps),
        Err(Error::MissingFile(_))
    ));
    assert!(matches!(
        read_manifest(&dir.path().join("nope.json")),
        Err(Error::MissingFile(_))
    ));
}
