use dpspg::datagen::{generate_dataset, leave_one_out_split, DatasetSpec};
use dpspg::encoders::*;
use dpspg::error::Error;
use dpspg::generators::*;
use dpspg::inference::*;
use dpspg::promptlabels::{train_domain_labels, Polarity, Stage1Config};
use proptest::prelude::*;

fn naive_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| (v / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn scores() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..8).prop_flat_map(|k| {
        (
            prop::collection::vec(-1.0f64..1.0, k),
            prop::collection::vec(-1.0f64..1.0, k),
        )
    })
}

#[test]
fn two_class_reference() {
    let f = FusionScores::from_similarities(vec![0.8, 0.2], vec![0.1, 0.9], 0.2, 1.0).unwrap();
    assert!((f.g[0] - 0.78).abs() < 1e-15);
    assert!((f.g[1] - 0.02).abs() < 1e-15);
    assert!((f.probs[0] - 0.6812).abs() < 2e-4);
    assert!((f.probs[1] - 0.3188).abs() < 2e-4);
}

proptest! {
    #[test]
    fn fusion_matches_weighted_difference_oracle((sp, sn) in scores(), alpha in 0.0f64..1.0, tau in 0.05f64..1.0) {
        let f = FusionScores::from_similarities(sp.clone(), sn.clone(), alpha, tau).unwrap();
        let g: Vec<f64> = sp.iter().zip(&sn).map(|(p, n)| p - alpha * n).collect();
        let probs = naive_softmax(&g, tau);
        for i in 0..g.len() {
            prop_assert!((f.g[i] - g[i]).abs() < 1e-15);
            prop_assert!((f.probs[i] - probs[i]).abs() < 1e-12);
        }
        let best = f.probs.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(f.probs[f.predicted], best);
    }

    #[test]
    fn zero_alpha_reduces_to_positive_scores((sp, sn) in scores(), tau in 0.05f64..1.0) {
        let f = FusionScores::from_similarities(sp.clone(), sn, 0.0, tau).unwrap();
        let only = FusionScores::from_similarities(sp.clone(), vec![0.0; sp.len()], 0.0, tau).unwrap();
        prop_assert_eq!(f.probs, only.probs);
    }

    #[test]
    fn positive_shift_leaves_probabilities_unchanged((sp, sn) in scores(), c in -5.0f64..5.0) {
        let a = FusionScores::from_similarities(sp.clone(), sn.clone(), 0.2, 0.1).unwrap();
        let shifted = sp.iter().map(|v| v + c).collect();
        let b = FusionScores::from_similarities(shifted, sn, 0.2, 0.1).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn positive_only_is_full_with_zero_alpha_on_random_models() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    let vocab = build_vocabulary(5, 32, 11).unwrap();
    let enc = EncoderPair::new(&EncoderConfig::default(), 16).unwrap();
    let cfg = Stage2Config::default().generator_config(&enc).unwrap();
    let pos = GeneratorModel::new(cfg, Polarity::Positive, 1).unwrap();
    let neg = GeneratorModel::new(cfg, Polarity::Negative, 2).unwrap();
    for noise in [None, Some(0.1)] {
        let prov = Provenance {
            sources: vec![1, 2, 3],
            oracle: false,
            input_noise: noise,
        };
        let p = Pipeline::new(&enc, &vocab).with_generators(&pos, Some(&neg), &prov).with_noise_seed(4);
        let x = ds.inputs(&ds.domain_indices(0)[..100]).unwrap();
        let full = p.classify(&x, EvalMode::Full, 0.0, 0.1).unwrap();
        let only = p.classify(&x, EvalMode::PositiveOnly, 0.2, 0.1).unwrap();
        for (a, b) in full.iter().zip(&only) {
            assert_eq!(a.probs, b.probs);
            assert_eq!(a.predicted, b.predicted);
        }
    }
}

#[test]
fn unaligned_random_models_sit_near_chance() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    let mut accs = Vec::new();
    for seed in 0..6u64 {
        let vocab = build_vocabulary(5, 32, 100 + seed).unwrap();
        let enc = EncoderPair::new(
            &EncoderConfig {
                seed,
                ..Default::default()
            },
            16,
        )
        .unwrap();
        let cfg = Stage2Config::default().generator_config(&enc).unwrap();
        let pos = GeneratorModel::new(cfg, Polarity::Positive, seed).unwrap();
        let neg = GeneratorModel::new(cfg, Polarity::Negative, seed + 50).unwrap();
        let prov = Provenance {
            sources: vec![1, 2, 3],
            oracle: false,
            input_noise: None,
        };
        let p = Pipeline::new(&enc, &vocab).with_generators(&pos, Some(&neg), &prov);
        accs.push(evaluate_lodo(&ds, 0, &p, EvalMode::Full, 0.2, 0.1, seed).unwrap().accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.2).abs() <= 0.1, "{accs:?}");
}

#[test]
fn contaminated_or_incomplete_pipelines_are_refused() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    let vocab = build_vocabulary(5, 32, 11).unwrap();
    let enc = EncoderPair::new(&EncoderConfig::default(), 16).unwrap();
    let cfg = Stage2Config::default().generator_config(&enc).unwrap();
    let pos = GeneratorModel::new(cfg, Polarity::Positive, 1).unwrap();
    let leaky = Provenance {
        sources: vec![0, 1, 2],
        oracle: false,
        input_noise: None,
    };
    let p = Pipeline::new(&enc, &vocab).with_generators(&pos, None, &leaky);
    let err = evaluate_lodo(&ds, 2, &p, EvalMode::PositiveOnly, 0.2, 0.1, 0).unwrap_err();
    assert!(matches!(err, Error::Contamination(_)));
    assert_eq!(err.exit_code(), 5);
    let oracle = Provenance {
        sources: vec![],
        oracle: true,
        input_noise: None,
    };
    let p = Pipeline::new(&enc, &vocab).with_generators(&pos, None, &oracle);
    assert!(matches!(evaluate_lodo(&ds, 3, &p, EvalMode::PositiveOnly, 0.2, 0.1, 0), Err(Error::Contamination(_))));
    let clean = Provenance {
        sources: vec![0, 1, 2],
        oracle: false,
        input_noise: None,
    };
    let p = Pipeline::new(&enc, &vocab).with_generators(&pos, None, &clean);
    assert!(matches!(evaluate_lodo(&ds, 3, &p, EvalMode::Full, 0.2, 0.1, 0), Err(Error::InvalidState(_))));
    assert!(matches!(evaluate_lodo(&ds, 3, &p, EvalMode::FixedPrompt, 0.2, 0.1, 0), Err(Error::InvalidState(_))));
}

#[test]
fn shift_free_domains_are_classified_after_training() {
    let spec = DatasetSpec {
        domain_rotation_angle: 0.0,
        domain_shift_scale: 0.0,
        n_per_class_per_domain: 20,
        ..Default::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    let vocab = build_vocabulary(5, 32, 11).unwrap();
    let mut enc = EncoderPair::new(&EncoderConfig::default(), 16).unwrap();
    enc.align_to_prototypes(&vocab, &ds.prototypes).unwrap();
    let s1 = Stage1Config {
        epochs: 30,
        ..Default::default()
    };
    let labels: Vec<_> = (0..4)
        .map(|d| train_domain_labels(&ds, d, &enc, &vocab, &s1).unwrap().pair)
        .collect();
    let split = leave_one_out_split(&ds, 0).unwrap();
    let s2 = Stage2Config {
        epochs: 20,
        warmup_epochs: 2,
        ..Default::default()
    };
    let t = train_generators(&ds, &split, &labels, &enc, &s2, GeneratorVariant::DualPath, None).unwrap();
    let p = Pipeline::new(&enc, &vocab).with_generators(&t.positive, t.negative.as_ref(), &t.provenance);
    let report = evaluate_lodo(&ds, 0, &p, EvalMode::Full, 0.2, 0.1, 0).unwrap();
    assert!(report.accuracy >= 0.95, "{report:?}");
    assert_eq!(report.n_test, 100);
    let csv = String::from_utf8(eval_csv_bytes(&[report]).unwrap()).unwrap();
    assert!(csv.starts_with("target,mode,alpha,tau,seed,accuracy,class0,class1,class2,class3,class4\n0,full,0.2,0.1,0,"));
}
