//! Numeric checks of the margin and gradient-norm arguments behind fusion.
//!
//! Everything here is either closed-form arithmetic on scores or a
//! finite-difference probe of a black-box `x -> logits` map, so the checks
//! run the same on hand-picked numbers and on a trained pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{EvalMode, Pipeline};
use crate::numkernel::{l2_norm, softmax, softmax_jacobian, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginEntry {
    pub class: usize,
    /// `s+_y - s+_i`.
    pub delta_plus: f64,
    /// `g_y - g_i` with `g = s+ - alpha s-`.
    pub delta_combined: f64,
    /// `s-_i - s-_y`.
    pub neg_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginReport {
    pub true_class: usize,
    pub alpha: f64,
    pub entries: Vec<MarginEntry>,
    /// Smallest negative gap over the incorrect classes.
    pub delta_constraint: f64,
    /// Largest `|delta_combined - (delta_plus - alpha (s-_y - s-_i))|`.
    pub identity_error: f64,
    /// Every incorrect class with `neg_gap >= delta_constraint` also has
    /// `delta_combined >= delta_plus + alpha * delta_constraint`.
    pub bound_satisfied: bool,
}

/// Rounding allowance for comparisons that hold exactly in real arithmetic.
fn slack(values: &[f64]) -> f64 {
    1e-12 * values.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

pub fn margin_report(s_pos: &[f64], s_neg: &[f64], y: usize, alpha: f64) -> Result<MarginReport> {
    let k = s_pos.len();
    if k < 2 {
        return Err(Error::input("margins need at least two classes"));
    }
    if s_neg.len() != k {
        return Err(Error::input(format!("{k} positive scores but {} negative", s_neg.len())));
    }
    if y >= k {
        return Err(Error::input(format!("class {y} out of range for {k} classes")));
    }
    let g: Vec<f64> = s_pos.iter().zip(s_neg).map(|(p, n)| p - alpha * n).collect();
    let entries: Vec<MarginEntry> = (0..k)
        .filter(|&i| i != y)
        .map(|i| MarginEntry {
            class: i,
            delta_plus: s_pos[y] - s_pos[i],
            delta_combined: g[y] - g[i],
            neg_gap: s_neg[i] - s_neg[y],
        })
        .collect();
    let delta_constraint = entries.iter().map(|e| e.neg_gap).fold(f64::INFINITY, f64::min);
    let identity_error = entries
        .iter()
        .map(|e| (e.delta_combined - (e.delta_plus - alpha * (s_neg[y] - s_neg[e.class]))).abs())
        .fold(0.0, f64::max);
    let bound_satisfied = entries.iter().filter(|e| e.neg_gap >= delta_constraint).all(|e| {
        let rhs = e.delta_plus + alpha * delta_constraint;
        e.delta_combined >= rhs - slack(&[e.delta_combined, rhs, s_pos[y], s_neg[y]])
    });
    Ok(MarginReport {
        true_class: y,
        alpha,
        entries,
        delta_constraint,
        identity_error,
        bound_satisfied,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct JacobianReport {
    pub delta: f64,
    pub tau: f64,
    /// `(1/tau) f_y f_i` on the two-class problem `{y, i}`.
    pub analytic_norm: f64,
    pub fd_norm: f64,
    /// `(1/tau) exp(-delta/tau)`.
    pub bound: f64,
    /// `(L/tau) exp(-delta/tau)`, present when `L` was estimated.
    pub lipschitz_bound: Option<f64>,
    /// Empirical, not certified: the largest sampled finite-difference norm
    /// of the logit gap's input gradient.
    pub l_estimate: Option<f64>,
    pub bound_satisfied: bool,
}

/// Two-class probabilities `(f_y, f_i)` for logit gap `delta`.
fn binary_probs(delta: f64, tau: f64) -> (f64, f64) {
    let z = delta / tau;
    if z >= 0.0 {
        let e = (-z).exp();
        (1.0 / (1.0 + e), e / (1.0 + e))
    } else {
        let e = z.exp();
        (e / (1.0 + e), 1.0 / (1.0 + e))
    }
}

pub fn binary_jacobian_bound_check(delta: f64, tau: f64) -> Result<JacobianReport> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    if !delta.is_finite() {
        return Err(Error::param("margin must be finite"));
    }
    let (fy, fi) = binary_probs(delta, tau);
    let analytic_norm = fy * fi / tau;
    let eps = 1e-6;
    // d f_y / d g_i on logits (delta, 0).
    let f_at = |gi: f64| softmax(&[delta, gi], tau).map(|p| p[0]);
    let fd_norm = ((f_at(eps)? - f_at(-eps)?) / (2.0 * eps)).abs();
    let bound = (-delta / tau).exp() / tau;
    Ok(JacobianReport {
        delta,
        tau,
        analytic_norm,
        fd_norm,
        bound,
        lipschitz_bound: None,
        l_estimate: None,
        bound_satisfied: delta < 0.0 || analytic_norm <= bound,
    })
}

/// Largest `|J_ij - FD_ij|` between the closed-form softmax Jacobian and
/// central differences of `softmax(z / tau)` in `z`.
pub fn softmax_jacobian_fd_error(logits: &[f64], tau: f64, eps: f64) -> Result<f64> {
    let p = softmax(logits, tau)?;
    let j = softmax_jacobian(&p, tau)?;
    let k = logits.len();
    let mut worst = 0.0f64;
    let mut z = logits.to_vec();
    for col in 0..k {
        z[col] = logits[col] + eps;
        let up = softmax(&z, tau)?;
        z[col] = logits[col] - eps;
        let down = softmax(&z, tau)?;
        z[col] = logits[col];
        for row in 0..k {
            let fd = (up[row] - down[row]) / (2.0 * eps);
            worst = worst.max((j.data()[row * k + col] - fd).abs());
        }
    }
    Ok(worst)
}

/// A deterministic map from a raw input to class logits.
pub trait LogitMap {
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Logits for several inputs; override when batching is cheaper.
    fn logits_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.logits(x)).collect()
    }
}

/// The fused logits `g = s+ - alpha s-` of a pipeline, before temperature.
pub struct FusedLogits<'a> {
    pub pipeline: Pipeline<'a>,
    pub mode: EvalMode,
    pub alpha: f64,
}

impl LogitMap for FusedLogits<'_> {
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.logits_batch(&[x.to_vec()])?.remove(0))
    }

    fn logits_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let d = xs[0].len();
        let data: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
        let t = Tensor::new(vec![xs.len(), d], data)?;
        // Tau only shapes probabilities, which are discarded here.
        let scores = self.pipeline.classify(&t, self.mode, self.alpha, 1.0)?;
        Ok(scores.into_iter().map(|s| s.g).collect())
    }
}

/// Central-difference gradient of `h(x)` where `h` reads the logits of `x`.
fn fd_gradient(map: &dyn LogitMap, x: &[f64], eps: f64, h: impl Fn(&[f64]) -> f64) -> Result<Vec<f64>> {
    let mut probes = Vec::with_capacity(2 * x.len());
    for j in 0..x.len() {
        for sign in [1.0, -1.0] {
            let mut p = x.to_vec();
            p[j] += sign * eps;
            probes.push(p);
        }
    }
    let out = map.logits_batch(&probes)?;
    let grad: Vec<f64> = (0..x.len())
        .map(|j| (h(&out[2 * j]) - h(&out[2 * j + 1])) / (2.0 * eps))
        .collect();
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("finite-difference gradient is not finite"));
    }
    Ok(grad)
}

/// Finite-difference norm of `grad_x (g_y - g_i)`.
pub fn logit_gap_gradient_norm(map: &dyn LogitMap, x: &[f64], y: usize, i: usize, eps: f64) -> Result<f64> {
    Ok(l2_norm(&fd_gradient(map, x, eps, |g| g[y] - g[i])?))
}

/// Largest logit-gap gradient norm over the sampled `(x, y, i)` triples.
pub fn estimate_lipschitz(map: &dyn LogitMap, probes: &[(Vec<f64>, usize, usize)], eps: f64) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::input("no probes for the Lipschitz estimate"));
    }
    probes
        .iter()
        .map(|(x, y, i)| logit_gap_gradient_norm(map, x, *y, *i, eps))
        .try_fold(0.0f64, |m, v| Ok(m.max(v?)))
}

/// Finite-difference input sensitivity of the two-class probability `f_y`
/// on classes `{y, i}`, with the analytic and Lipschitz bounds alongside.
#[allow(clippy::too_many_arguments)]
pub fn input_jacobian_report(
    map: &dyn LogitMap,
    x: &[f64],
    y: usize,
    i: usize,
    tau: f64,
    l_estimate: f64,
    eps: f64,
) -> Result<JacobianReport> {
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    let g = map.logits(x)?;
    if y >= g.len() || i >= g.len() || y == i {
        return Err(Error::input(format!("bad class pair ({y}, {i}) for {} classes", g.len())));
    }
    let delta = g[y] - g[i];
    let (fy, fi) = binary_probs(delta, tau);
    let grad = fd_gradient(map, x, eps, |g| binary_probs(g[y] - g[i], tau).0)?;
    let fd_norm = l2_norm(&grad);
    let bound = (-delta / tau).exp() / tau;
    let lipschitz_bound = l_estimate * bound;
    Ok(JacobianReport {
        delta,
        tau,
        analytic_norm: fy * fi / tau,
        fd_norm,
        bound,
        lipschitz_bound: Some(lipschitz_bound),
        l_estimate: Some(l_estimate),
        bound_satisfied: fd_norm <= lipschitz_bound * (1.0 + 1e-6),
    })
}

/// Residual `||f(x + h d) - f(x) - J (h d)||` of the first-order expansion of
/// `f = softmax(g / tau)`, for step `h` and `h / 2`. `J d` is a central
/// difference with a much smaller step.
pub fn linearization_residuals(map: &dyn LogitMap, x: &[f64], dir: &[f64], h: f64, tau: f64) -> Result<(f64, f64)> {
    if dir.len() != x.len() {
        return Err(Error::shape("direction and input differ in length"));
    }
    let shifted = |t: f64| x.iter().zip(dir).map(|(a, d)| a + t * d).collect::<Vec<f64>>();
    let jstep = h * 1e-3;
    let steps = [0.0, h, h / 2.0, jstep, -jstep];
    let g = map.logits_batch(&steps.iter().map(|&t| shifted(t)).collect::<Vec<_>>())?;
    let f = g.iter().map(|gi| softmax(gi, tau)).collect::<Result<Vec<_>>>()?;
    let jd: Vec<f64> = f[3].iter().zip(&f[4]).map(|(a, b)| (a - b) / (2.0 * jstep)).collect();
    let residual = |fi: &[f64], t: f64| {
        let r: Vec<f64> = fi
            .iter()
            .zip(&f[0])
            .zip(&jd)
            .map(|((a, b), j)| a - b - t * j)
            .collect();
        l2_norm(&r)
    };
    let out = (residual(&f[1], h), residual(&f[2], h / 2.0));
    if !(out.0.is_finite() && out.1.is_finite()) {
        return Err(Error::numeric("linearization residual is not finite"));
    }
    Ok(out)
}

/// Spearman rank correlation (average ranks for ties).
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::input("rank correlation needs two equal series of length >= 2"));
    }
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut s = 0;
        while s < idx.len() {
            let mut e = s;
            while e + 1 < idx.len() && v[idx[e + 1]] == v[idx[s]] {
                e += 1;
            }
            let avg = (s + e) as f64 / 2.0;
            for &k in &idx[s..=e] {
                r[k] = avg;
            }
            s = e + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::input("rank correlation of a constant series"));
    }
    Ok(cov / (va * vb).sqrt())
}

/// One row of the verification CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoryCheck {
    pub check: String,
    pub params: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

impl TheoryCheck {
    pub fn new(check: &str, params: String, lhs: f64, rhs: f64, pass: bool) -> Self {
        TheoryCheck {
            check: check.to_string(),
            params,
            lhs,
            rhs,
            pass,
        }
    }
}

pub fn theory_csv_bytes(checks: &[TheoryCheck]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["check", "params", "lhs", "rhs", "pass"])?;
    for c in checks {
        w.write_record([
            c.check.clone(),
            c.params.clone(),
            c.lhs.to_string(),
            c.rhs.to_string(),
            c.pass.to_string(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
}

/// Seeded sweeps over the closed-form checks: softmax Jacobian against
/// finite differences, the margin identity and bound, and the binary
/// gradient-norm bound.
pub fn analytic_checks(seed: u64) -> Result<Vec<TheoryCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let taus = [0.05, 0.1, 1.0];
    for t in 0..100 {
        let k = rng.random_range(2..=10);
        let tau = taus[t % taus.len()];
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = softmax_jacobian_fd_error(&z, tau, 1e-6)?;
        out.push(TheoryCheck::new("softmax_jacobian", format!("k={k};tau={tau}"), err, 1e-6, err <= 1e-6));
    }
    for _ in 0..1000 {
        let k = rng.random_range(2..=10);
        let s_pos: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s_neg: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = rng.random_range(0..k);
        let alpha = rng.random_range(0.0..1.0);
        let r = margin_report(&s_pos, &s_neg, y, alpha)?;
        let params = format!("k={k};y={y};alpha={alpha}");
        out.push(TheoryCheck::new("margin_identity", params.clone(), r.identity_error, 1e-12, r.identity_error <= 1e-12));
        let worst = r
            .entries
            .iter()
            .map(|e| e.delta_combined - e.delta_plus - alpha * r.delta_constraint)
            .fold(f64::INFINITY, f64::min);
        out.push(TheoryCheck::new("margin_bound", params, worst, 0.0, r.bound_satisfied));
    }
    for _ in 0..1000 {
        let delta = rng.random_range(0.0..=10.0);
        let tau = rng.random_range(0.05..=2.0);
        let r = binary_jacobian_bound_check(delta, tau)?;
        out.push(TheoryCheck::new(
            "binary_jacobian_bound",
            format!("delta={delta};tau={tau}"),
            r.analytic_norm,
            r.bound,
            r.bound_satisfied,
        ));
    }
    Ok(out)
}
