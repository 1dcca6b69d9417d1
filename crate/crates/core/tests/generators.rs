use std::sync::OnceLock;

use dpspg::datagen::{generate_dataset, leave_one_out_split, DatasetSpec, DomainDataset};
use dpspg::encoders::*;
use dpspg::error::Error;
use dpspg::generators::*;
use dpspg::numkernel::{grad_check, Tensor};
use dpspg::promptlabels::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Fixture {
    ds: DomainDataset,
    enc: EncoderPair,
    labels: Vec<DomainPromptLabelPair>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let ds = generate_dataset(&DatasetSpec::default()).unwrap();
        let vocab = build_vocabulary(5, 32, 11).unwrap();
        let mut enc = EncoderPair::new(&EncoderConfig::default(), 16).unwrap();
        enc.align_to_prototypes(&vocab, &ds.prototypes).unwrap();
        let cfg = Stage1Config::default();
        let labels = (0..4)
            .map(|d| train_domain_labels(&ds, d, &enc, &vocab, &cfg).unwrap().pair)
            .collect();
        Fixture { ds, enc, labels }
    })
}

fn small() -> GeneratorConfig {
    GeneratorConfig {
        d_feat: 6,
        d_tok: 4,
        context_len: 3,
        heads: 2,
        d_ff: 8,
    }
}

fn prompt(data: Vec<f64>) -> PromptVector {
    PromptVector::new(Tensor::matrix(1, data.len(), data).unwrap()).unwrap()
}

#[test]
fn loss_reference_values() {
    let zero = prompt(vec![0.0; 4]);
    let pos = prompt(vec![0.5f64.sqrt(); 4]);
    let neg = prompt(vec![1.0; 4]);
    assert!((generator_loss(&pos, &neg, &zero, &zero, 0.2).unwrap() - 0.7).abs() < 1e-12);
    assert_eq!(generator_loss(&pos, &neg, &pos, &neg, 0.2).unwrap(), 0.0);
    assert_eq!(
        generator_loss(&pos, &neg, &zero, &zero, 0.0).unwrap(),
        generator_loss(&pos, &zero, &zero, &zero, 0.0).unwrap()
    );
}

proptest! {
    #[test]
    fn loss_matches_mean_squared_oracle(
        a in prop::collection::vec(-2.0f64..2.0, 8),
        b in prop::collection::vec(-2.0f64..2.0, 8),
        c in prop::collection::vec(-2.0f64..2.0, 8),
        d in prop::collection::vec(-2.0f64..2.0, 8),
        alpha in 0.0f64..2.0,
    ) {
        let mse = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / 8.0;
        let want = mse(&a, &c) + alpha * mse(&b, &d);
        let got = generator_loss(&prompt(a), &prompt(b), &prompt(c), &prompt(d), alpha).unwrap();
        prop_assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn generated_prompts_have_context_shape(e in prop::collection::vec(-1.0f64..1.0, 6), seed in 0u64..100) {
        let g = GeneratorModel::new(small(), Polarity::Negative, seed).unwrap();
        let p = g.generate_prompt(&e).unwrap();
        prop_assert_eq!(p.tokens().shape(), &[3, 4]);
        prop_assert_eq!(p.clone(), g.generate_prompt(&e).unwrap());
    }
}

#[test]
fn combined_loss_passes_gradient_check_on_three_seeds() {
    for seed in 0..3u64 {
        let pos = GeneratorModel::new(small(), Polarity::Positive, seed).unwrap();
        let neg = GeneratorModel::new(small(), Polarity::Negative, seed + 100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let e = Tensor::randn(&[4, 6], 0.4, &mut rng);
        let tp = Tensor::randn(&[12, 4], 0.3, &mut rng);
        let tn = Tensor::randn(&[12, 4], 0.3, &mut rng);
        let alpha = 0.2;
        let neg_out = neg.generate_batch(&e).unwrap();
        let pos_out = pos.generate_batch(&e).unwrap();
        // each path's gradient only flows through its own term
        let wrt_pos = grad_check(
            |g, p| {
                let ev = g.constant(e.clone());
                let out = pos.forward_with(g, p, ev)?;
                let lp = g.mse(out, &tp)?;
                let on = g.constant(neg_out.clone());
                let ln = g.mse(on, &tn)?;
                let ln = g.scale(ln, alpha);
                g.add(lp, ln)
            },
            pos.params(),
            1e-5,
        )
        .unwrap();
        let wrt_neg = grad_check(
            |g, p| {
                let op = g.constant(pos_out.clone());
                let lp = g.mse(op, &tp)?;
                let ev = g.constant(e.clone());
                let out = neg.forward_with(g, p, ev)?;
                let ln = g.mse(out, &tn)?;
                let ln = g.scale(ln, alpha);
                g.add(lp, ln)
            },
            neg.params(),
            1e-5,
        )
        .unwrap();
        assert!(wrt_pos.max_relative_error <= 1e-4, "{wrt_pos:?}");
        assert!(wrt_neg.max_relative_error <= 1e-4, "{wrt_neg:?}");
    }
}

#[test]
fn noise_scale_matches_population_std_oracle() {
    let t = Tensor::matrix(4, 2, vec![0.0, 1.0, 2.0, 1.0, 0.0, 3.0, 2.0, 3.0]).unwrap();
    // per-column population variance is 1 in both columns
    assert!((matched_noise_scale(&t) - 1.0).abs() < 1e-12);
    let p = perturb_embeddings(&t, 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for r in 0..4 {
        assert!((dpspg::numkernel::l2_norm(p.row(r)) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip_keeps_provenance() {
    let g = GeneratorModel::new(small(), Polarity::Negative, 3).unwrap();
    let prov = Provenance {
        sources: vec![0, 2, 3],
        oracle: false,
        input_noise: Some(0.125),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.dpg1");
    g.save(&prov, "h1", &path).unwrap();
    let (back, p2, hash) = GeneratorModel::load(&path).unwrap();
    assert_eq!((p2, hash.as_str()), (prov, "h1"));
    assert_eq!(back.polarity, Polarity::Negative);
    let e = [0.1, -0.2, 0.3, 0.0, 0.5, -0.4];
    assert_eq!(back.generate_prompt(&e).unwrap(), g.generate_prompt(&e).unwrap());
}

#[test]
fn training_refuses_missing_and_oracle_labels() {
    let f = fixture();
    let split = leave_one_out_split(&f.ds, 0).unwrap();
    let cfg = Stage2Config {
        epochs: 5,
        ..Default::default()
    };
    let missing = train_generators(&f.ds, &split, &f.labels[..2], &f.enc, &cfg, GeneratorVariant::DualPath, None);
    assert!(matches!(missing, Err(Error::InvalidState(_))));
    let mut tainted = f.labels.clone();
    tainted[2].oracle = true;
    let bad = train_generators(&f.ds, &split, &tainted, &f.enc, &cfg, GeneratorVariant::DualPath, None);
    assert!(matches!(bad, Err(Error::Contamination(_))));
}

#[test]
fn short_training_is_deterministic_per_seed() {
    let f = fixture();
    let split = leave_one_out_split(&f.ds, 3).unwrap();
    let cfg = Stage2Config {
        epochs: 5,
        warmup_epochs: 1,
        seed: 9,
        ..Default::default()
    };
    let variant = GeneratorVariant::NoisySinglePath { noise: 0.05 };
    let a = train_generators(&f.ds, &split, &f.labels, &f.enc, &cfg, variant, None).unwrap();
    let b = train_generators(&f.ds, &split, &f.labels, &f.enc, &cfg, variant, None).unwrap();
    assert_eq!(a.positive.params().values(), b.positive.params().values());
    assert_eq!(a.history, b.history);
    assert!(a.negative.is_none());
    assert_eq!(a.provenance.input_noise, Some(0.05));
    assert_eq!(a.provenance.sources, vec![0, 1, 2]);
}

#[test]
fn default_dual_training_fits_the_labels() {
    let f = fixture();
    let split = leave_one_out_split(&f.ds, 1).unwrap();
    let cfg = Stage2Config::default();
    let t = train_generators(&f.ds, &split, &f.labels, &f.enc, &cfg, GeneratorVariant::DualPath, None).unwrap();
    let first = t.history[0].loss;
    let last = t.history.last().unwrap().loss;
    assert!(first >= 10.0 * last, "loss {first} -> {last}");
    assert!(t.history.last().unwrap().val_metric < t.initial_val_metric);
    let csv = String::from_utf8(history_csv_bytes(&t.history).unwrap()).unwrap();
    assert_eq!(csv.lines().count(), cfg.epochs + 1);
    assert!(csv.starts_with("epoch,loss,val_metric"));
}
