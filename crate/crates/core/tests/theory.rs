use approx::assert_relative_eq;
use dpspg::error::Result;
use dpspg::theory::*;
use proptest::prelude::*;

/// `g(x) = W tanh(A x)`, a smooth stand-in for a trained pipeline.
struct TanhNet {
    a: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
}

impl TanhNet {
    fn new() -> Self {
        let a = (0..4)
            .map(|i| (0..3).map(|j| ((i * 3 + j) as f64 * 1.7).sin()).collect())
            .collect();
        let w = (0..3)
            .map(|i| (0..4).map(|j| ((i * 4 + j) as f64 * 0.9 + 0.3).cos() * 2.0).collect())
            .collect();
        TanhNet { a, w }
    }
}

impl LogitMap for TanhNet {
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let h: Vec<f64> = self.a.iter().map(|r| r.iter().zip(x).map(|(u, v)| u * v).sum::<f64>().tanh()).collect();
        Ok(self.w.iter().map(|r| r.iter().zip(&h).map(|(u, v)| u * v).sum()).collect())
    }
}

fn tuple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize, f64)> {
    (2usize..10).prop_flat_map(|k| {
        (
            prop::collection::vec(-1.0f64..1.0, k),
            prop::collection::vec(-1.0f64..1.0, k),
            0..k,
            0.0f64..1.0,
        )
    })
}

#[test]
fn margin_reference_example() {
    let r = margin_report(&[2.0, 1.0], &[0.5, 1.5], 0, 0.2).unwrap();
    let e = &r.entries[0];
    assert_relative_eq!(e.delta_plus, 1.0);
    assert_relative_eq!(e.neg_gap, 1.0);
    assert_relative_eq!(e.delta_combined, 1.2, epsilon = 1e-15);
    assert_relative_eq!(r.delta_constraint, 1.0);
    assert!(r.bound_satisfied);
    assert!(margin_report(&[1.0], &[1.0], 0, 0.2).is_err());
}

#[test]
fn binary_bound_reference_values() {
    let r = binary_jacobian_bound_check(2.0, 1.0).unwrap();
    assert_relative_eq!(r.analytic_norm, 0.11920 * 0.88080, epsilon = 1e-5);
    assert_relative_eq!(r.analytic_norm, 0.10499, epsilon = 1e-5);
    assert_relative_eq!(r.bound, 0.13534, epsilon = 1e-5);
    assert!(r.bound_satisfied);
    let u = binary_jacobian_bound_check(0.0, 1.0).unwrap();
    assert_relative_eq!(u.analytic_norm, 0.25, epsilon = 1e-15);
    assert_relative_eq!(u.bound, 1.0, epsilon = 1e-15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn margin_identity_and_bound((sp, sn, y, alpha) in tuple()) {
        let r = margin_report(&sp, &sn, y, alpha).unwrap();
        prop_assert!(r.identity_error <= 1e-12);
        prop_assert!(r.bound_satisfied);
        let delta = (0..sp.len()).filter(|&i| i != y).map(|i| sn[i] - sn[y]).fold(f64::INFINITY, f64::min);
        prop_assert!((r.delta_constraint - delta).abs() < 1e-15);
        for e in &r.entries {
            let gy = sp[y] - alpha * sn[y];
            let gi = sp[e.class] - alpha * sn[e.class];
            prop_assert!((e.delta_combined - (gy - gi)).abs() < 1e-12);
            prop_assert!(e.delta_combined >= e.delta_plus + alpha * delta - 1e-12);
        }
    }

    #[test]
    fn zero_weight_or_flat_negatives_leave_margins_alone((sp, sn, y, alpha) in tuple(), c in -1.0f64..1.0) {
        let r = margin_report(&sp, &sn, y, 0.0).unwrap();
        for e in &r.entries {
            prop_assert_eq!(e.delta_combined, e.delta_plus);
        }
        let flat = vec![c; sp.len()];
        let r = margin_report(&sp, &flat, y, alpha).unwrap();
        for e in &r.entries {
            prop_assert!((e.delta_combined - e.delta_plus).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_bound_holds(delta in 0.0f64..10.0, tau in 0.05f64..2.0) {
        let r = binary_jacobian_bound_check(delta, tau).unwrap();
        prop_assert!(r.bound_satisfied);
        let z = delta / tau;
        let (fy, fi) = (1.0 / (1.0 + (-z).exp()), 1.0 / (1.0 + z.exp()));
        prop_assert!((r.analytic_norm - fy * fi / tau).abs() <= 1e-12 * (1.0 + r.analytic_norm));
        prop_assert!(r.analytic_norm <= r.bound);
    }

    #[test]
    fn softmax_jacobian_matches_differences(z in prop::collection::vec(-1.0f64..1.0, 2..11), ti in 0usize..3) {
        let tau = [0.05, 0.1, 1.0][ti];
        prop_assert!(softmax_jacobian_fd_error(&z, tau, 1e-6).unwrap() <= 1e-6);
    }
}

#[test]
fn linearization_residual_decays_quadratically() {
    let net = TanhNet::new();
    for (x, d) in [([0.3, -0.2, 0.5], [1.0, 0.5, -0.3]), ([-0.4, 0.1, 0.2], [0.2, -1.0, 0.4])] {
        let (r1, r2) = linearization_residuals(&net, &x, &d, 1e-2, 1.0).unwrap();
        let ratio = r1 / r2;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }
    let (r1, r2) = linearization_residuals(&net, &[0.1, 0.2, 0.3], &[0.0; 3], 1e-2, 1.0).unwrap();
    assert_eq!((r1, r2), (0.0, 0.0));
}

#[test]
fn input_sensitivity_respects_the_lipschitz_bound_and_falls_with_margin() {
    let net = TanhNet::new();
    let mut probes = Vec::new();
    for s in 0..40 {
        let t = s as f64;
        let x = vec![(t * 0.61).sin() * 1.5, (t * 1.3).cos() * 1.5, (t * 0.27).sin() * 1.5];
        let g = net.logits(&x).unwrap();
        let y = (0..3).max_by(|&a, &b| g[a].total_cmp(&g[b])).unwrap();
        let i = (0..3).filter(|&c| c != y).max_by(|&a, &b| g[a].total_cmp(&g[b])).unwrap();
        probes.push((x, y, i));
    }
    let l = estimate_lipschitz(&net, &probes, 1e-6).unwrap();
    let mut margins = Vec::new();
    let mut norms = Vec::new();
    for (x, y, i) in &probes {
        let r = input_jacobian_report(&net, x, *y, *i, 0.5, l, 1e-6).unwrap();
        assert!(r.bound_satisfied, "{r:?}");
        margins.push(r.delta);
        norms.push(r.fd_norm);
    }
    assert!(rank_correlation(&margins, &norms).unwrap() < 0.0);
}

#[test]
fn rank_correlation_matches_pearson_of_ranks() {
    let a = [0.3, 1.2, -0.7, 2.5, 0.9, -1.1];
    let b = [1.0, 0.2, 0.4, -0.3, 0.8, 2.0];
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter().map(|x| v.iter().filter(|y| *y < x).count() as f64).collect()
    };
    let (ra, rb) = (rank(&a), rank(&b));
    let n = a.len() as f64;
    let m = (n - 1.0) / 2.0;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - m) * (y - m)).sum();
    let var: f64 = ra.iter().map(|x| (x - m).powi(2)).sum();
    assert_relative_eq!(rank_correlation(&a, &b).unwrap(), cov / var, epsilon = 1e-12);
    assert_relative_eq!(rank_correlation(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
}

#[test]
fn analytic_sweep_rows_all_pass_and_serialize() {
    let checks = analytic_checks(3).unwrap();
    assert_eq!(checks.len(), 100 + 1000 + 1000 + 1000);
    assert!(checks.iter().all(|c| c.pass));
    let csv = String::from_utf8(theory_csv_bytes(&checks).unwrap()).unwrap();
    assert!(csv.starts_with("check,params,lhs,rhs,pass\n"));
    assert_eq!(csv.lines().count(), checks.len() + 1);
}
