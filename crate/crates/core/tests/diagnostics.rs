use std::collections::BTreeMap;

use dpspg::cli::RunConfig;
use dpspg::datagen::{generate_dataset, leave_one_out_split, DatasetSpec};
use dpspg::diagnostics::*;
use dpspg::encoders::*;
use dpspg::error::Error;
use dpspg::generators::{train_generators, GeneratorVariant, Stage2Config};
use dpspg::inference::EvalMode;
use dpspg::numkernel::euclidean_distance;
use dpspg::promptlabels::{train_domain_labels, Stage1Config};
use proptest::prelude::*;

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.dataset.num_domains = 3;
    cfg.dataset.n_per_class_per_domain = 10;
    cfg.stage1.epochs = 8;
    cfg.stage2.epochs = 11;
    cfg.stage2.warmup_epochs = 1;
    cfg
}

fn mean_pairwise(v: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            total += euclidean_distance(&v[i], &v[j]);
            n += 1;
        }
    }
    total / n as f64
}

fn centroid(v: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; v[0].len()];
    for p in v {
        c.iter_mut().zip(p).for_each(|(a, b)| *a += b / v.len() as f64);
    }
    c
}

#[test]
fn two_domain_reference() {
    let mut sets = BTreeMap::new();
    sets.insert(0, vec![vec![0.0, 0.0], vec![1.0, 0.0]]);
    sets.insert(1, vec![vec![4.0, 0.0], vec![5.0, 0.0]]);
    let r = variability_flat(&sets, 0).unwrap();
    assert_eq!(r.domains[0].r, 1.0);
    assert_eq!(r.domains[1].r, 1.0);
    assert_eq!(r.d, 4.0);
    assert_eq!(r.lambda, 0.25);
    sets.insert(0, vec![vec![0.5, 0.0]; 3]);
    assert_eq!(variability_flat(&sets, 0).unwrap().lambda, 0.0);
    sets.insert(2, vec![vec![1.0, 1.0]]);
    assert!(matches!(variability_flat(&sets, 0), Err(Error::InvalidInput(_))));
}

fn prompt_sets() -> impl Strategy<Value = BTreeMap<usize, Vec<Vec<f64>>>> {
    prop::collection::vec(prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 2..5), 2..5)
        .prop_map(|v| v.into_iter().enumerate().collect())
}

proptest! {
    #[test]
    fn variability_matches_brute_force(sets in prompt_sets()) {
        let r = variability_flat(&sets, 1).unwrap();
        let cents: Vec<Vec<f64>> = sets.values().map(|v| centroid(v)).collect();
        let d = mean_pairwise(&cents);
        prop_assume!(d > 1e-9);
        prop_assert!((r.d - d).abs() < 1e-12);
        for s in &r.domains {
            prop_assert!((s.r - mean_pairwise(&sets[&s.domain])).abs() < 1e-12);
        }
        prop_assert!((r.lambda - mean_pairwise(&sets[&1]) / d).abs() < 1e-12);
    }

    #[test]
    fn lambda_is_scale_covariant(sets in prompt_sets(), c in 0.01f64..100.0) {
        let base = variability_flat(&sets, 0).unwrap();
        prop_assume!(base.d > 1e-6);
        let scaled: BTreeMap<usize, Vec<Vec<f64>>> = sets
            .iter()
            .map(|(&k, v)| (k, v.iter().map(|p| p.iter().map(|x| x * c).collect()).collect()))
            .collect();
        let r = variability_flat(&scaled, 0).unwrap();
        prop_assert!((r.d - c * base.d).abs() <= 1e-12 * c * base.d.max(1.0) * 10.0);
        prop_assert!((r.lambda - base.lambda).abs() < 1e-12);
    }

    #[test]
    fn stability_is_population_std_of_the_tail(h in prop::collection::vec(0.0f64..1.0, 10..30)) {
        let r = training_stability(&h).unwrap();
        let tail = &h[h.len() - 10..];
        let m = tail.iter().sum::<f64>() / 10.0;
        let sd = (tail.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 10.0).sqrt();
        prop_assert!((r.std_last_10 - sd).abs() < 1e-12);
        prop_assert_eq!(r.final_accuracy, h[h.len() - 1]);
    }

    #[test]
    fn projection_keeps_within_pca_bound(pts in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 5), 3..9)) {
        let p = project_2d(&pts).unwrap();
        let n = pts.len() as f64;
        let kept: f64 = p.coords.iter().map(|(x, y)| x * x + y * y).sum::<f64>() / n;
        prop_assert!(kept <= p.total_variance * (1.0 + 1e-9) + 1e-12);
        prop_assert!((kept - (p.explained.0 + p.explained.1)).abs() < 1e-9);
        prop_assert!(p.explained.0 + 1e-12 >= p.explained.1);
    }

    #[test]
    fn planar_projection_is_an_isometry(pts in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 2), 3..9)) {
        let p = project_2d(&pts).unwrap();
        prop_assume!(!p.rank_deficient);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let (a, b) = (p.coords[i], p.coords[j]);
                let proj = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                prop_assert!((proj - euclidean_distance(&pts[i], &pts[j])).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn stability_reference_values() {
    assert!(training_stability(&[0.8; 12]).unwrap().std_last_10 < 1e-15);
    let alt: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
    assert_eq!(training_stability(&alt).unwrap().std_last_10, 0.5);
    assert!(training_stability(&[0.5; 9]).is_err());
}

#[test]
fn collinear_points_project_onto_one_axis() {
    let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
    let p = project_2d(&pts).unwrap();
    assert!(p.rank_deficient);
    assert!(p.coords.iter().all(|c| c.1 == 0.0));
    let xs: Vec<f64> = p.coords.iter().map(|c| c.0).collect();
    assert!(xs.windows(2).all(|w| w[1] > w[0]));
    assert!(project_2d(&pts[..2]).is_err());
}

#[test]
fn oracle_prompt_is_tagged_and_rejected_by_training() {
    let ds = generate_dataset(&DatasetSpec {
        n_per_class_per_domain: 15,
        ..Default::default()
    })
    .unwrap();
    let vocab = build_vocabulary(5, 32, 11).unwrap();
    let mut enc = EncoderPair::new(&EncoderConfig::default(), 16).unwrap();
    enc.align_to_prototypes(&vocab, &ds.prototypes).unwrap();
    let cfg = Stage1Config {
        epochs: 10,
        ..Default::default()
    };
    let a = oracle_prompt(&ds, 2, &enc, &vocab, &cfg).unwrap();
    assert!(a.oracle);
    assert_eq!(a, oracle_prompt(&ds, 2, &enc, &vocab, &cfg).unwrap());
    let mut labels: Vec<_> = [0, 1, 3]
        .iter()
        .map(|&d| train_domain_labels(&ds, d, &enc, &vocab, &cfg).unwrap().pair)
        .collect();
    let mut leaked = a.clone();
    leaked.domain = 1;
    labels[1] = leaked;
    let split = leave_one_out_split(&ds, 2).unwrap();
    let s2 = Stage2Config {
        epochs: 3,
        warmup_epochs: 1,
        ..Default::default()
    };
    let r = train_generators(&ds, &split, &labels, &enc, &s2, GeneratorVariant::DualPath, None);
    assert!(matches!(r, Err(Error::Contamination(_))));
}

#[test]
fn sweep_needs_two_distinct_seeds() {
    let cfg = tiny_config();
    assert!(matches!(seed_sweep(&cfg, &[3], 1), Err(Error::InvalidInput(_))));
    assert!(matches!(seed_sweep(&cfg, &[3, 3], 1), Err(Error::InvalidInput(_))));
}

#[test]
fn tiny_sweep_is_reproducible_and_complete() {
    let cfg = tiny_config();
    let seeds = [4, 9];
    let a = seed_sweep(&cfg, &seeds, 2).unwrap();
    let b = seed_sweep(&cfg, &seeds, 1).unwrap();
    assert!(a.failures.is_empty());
    let (fa, fb) = (a.files().unwrap(), b.files().unwrap());
    assert_eq!(fa, fb);

    let eval = &fa.iter().find(|(n, _)| n == "eval.csv").unwrap().1;
    let mut rdr = csv::Reader::from_reader(eval.as_slice());
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        *counts.entry((rec[1].to_string(), rec[0].to_string())).or_default() += 1;
    }
    assert_eq!(counts.len(), EvalMode::ALL.len() * 3);
    assert!(counts.values().all(|&c| c == seeds.len()));

    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["aggregate.csv", "variability.csv", "stability.csv", "oracle.csv", "projection_dual.csv"] {
        assert!(names.contains(&want), "{names:?}");
    }
    let proj = String::from_utf8(fa.iter().find(|(n, _)| n == "projection_dual.csv").unwrap().1.clone()).unwrap();
    assert!(proj.starts_with("domain,seed,x,y\n"));

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], cfg.config_hash().unwrap());
    assert!(manifest["definitions"].as_str().unwrap().contains("R_d"));
}
