use dpspg::datagen::{generate_dataset, DatasetSpec};
use dpspg::encoders::*;
use dpspg::numkernel::{dot, l2_norm, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pair() -> EncoderPair {
    EncoderPair::new(&EncoderConfig::default(), 16).unwrap()
}

#[test]
fn vocabulary_shapes_and_seeding() {
    let v = build_vocabulary(7, 32, 3).unwrap();
    assert_eq!(v.class_embeddings.shape(), &[7, 32]);
    assert_eq!(v.positive_template.shape(), &[TEMPLATE_LEN, 32]);
    assert_eq!(v, build_vocabulary(7, 32, 3).unwrap());
    assert_ne!(v.positive_template, build_vocabulary(7, 32, 4).unwrap().positive_template);
    assert!(build_vocabulary(1, 32, 0).is_err());
}

#[test]
fn image_embedding_is_deterministic_and_not_homogeneous() {
    let enc = pair();
    let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
    let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
    let a = enc.encode_image(&x).unwrap();
    assert_eq!(a, enc.encode_image(&x).unwrap());
    let b = enc.encode_image(&x2).unwrap();
    assert!(a.iter().zip(&b).any(|(u, v)| (u - v).abs() > 1e-6));
}

#[test]
fn text_feature_is_deterministic_unit_and_matches_batch() {
    let enc = pair();
    let vocab = build_vocabulary(5, 32, 11).unwrap();
    let prompt = Tensor::randn(&[4, 32], 0.2, &mut ChaCha8Rng::seed_from_u64(1));
    let single = enc.encode_text(&prompt, &vocab.positive_template, vocab.class_embeddings.row(3)).unwrap();
    assert_eq!(single, enc.encode_text(&prompt, &vocab.positive_template, vocab.class_embeddings.row(3)).unwrap());
    assert!((l2_norm(&single) - 1.0).abs() < 1e-9);
    let batch = enc.encode_text_batch(&prompt, &vocab.positive_template, &vocab).unwrap();
    assert_eq!(batch.rows(), 5);
    for (u, v) in batch.row(3).iter().zip(&single) {
        assert!((u - v).abs() < 1e-12);
    }
    assert!(enc.encode_text(&Tensor::zeros(&[3, 32]), &vocab.positive_template, vocab.class_embeddings.row(0)).is_err());
}

#[test]
fn alignment_gives_positive_zero_shot_margin_on_default_data() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    let vocab = build_vocabulary(5, 32, 11).unwrap();
    let mut enc = pair();
    let report = enc.align_to_prototypes(&vocab, &ds.prototypes).unwrap();
    assert!(report.positive_zero_shot_margin > 0.0, "{report:?}");
    let img = enc.encode_images(&ds.prototypes).unwrap();
    let prompt = enc.template_prompt(&vocab.positive_template);
    let text = enc.encode_text_batch(&prompt, &vocab.positive_template, &vocab).unwrap();
    for c in 0..5 {
        let sims: Vec<f64> = (0..5).map(|j| dot(img.row(c), text.row(j))).collect();
        let best = (0..5).max_by(|&a, &b| sims[a].total_cmp(&sims[b])).unwrap();
        assert_eq!(best, c);
    }
}

#[test]
fn checkpoint_round_trip_keeps_hash_and_outputs() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    let vocab = build_vocabulary(5, 32, 11).unwrap();
    let mut enc = pair();
    enc.align_to_prototypes(&vocab, &ds.prototypes).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.dpv1");
    enc.save(&vocab, "abc123", &path).unwrap();
    let (back, v2, hash) = EncoderPair::load(&path, &EncoderConfig::default()).unwrap();
    assert_eq!(hash, "abc123");
    assert_eq!(v2, vocab);
    let x = ds.inputs(&[0, 5, 17]).unwrap();
    assert_eq!(enc.encode_images(&x).unwrap(), back.encode_images(&x).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn embeddings_have_unit_norm(x in prop::collection::vec(-20.0f64..20.0, 16)) {
        let enc = pair();
        let e = enc.encode_image(&x).unwrap();
        prop_assert_eq!(e.len(), enc.config.d_feat);
        prop_assert!((l2_norm(&e) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn text_features_have_unit_norm(seed in 0u64..1000, scale in 0.01f64..3.0) {
        let enc = pair();
        let vocab = build_vocabulary(3, 32, seed).unwrap();
        let prompt = Tensor::randn(&[4, 32], scale, &mut ChaCha8Rng::seed_from_u64(seed));
        let t = enc.encode_text_batch(&prompt, &vocab.negative_template, &vocab).unwrap();
        for r in 0..t.rows() {
            prop_assert!((l2_norm(t.row(r)) - 1.0).abs() < 1e-9);
        }
    }
}
