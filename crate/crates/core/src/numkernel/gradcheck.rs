//! Central finite-difference oracle for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numkernel::{Graph, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    /// Coordinates sampled per parameter; parameters with fewer entries are
    /// checked exhaustively.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            coords_per_param: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares the tape gradient of the scalar built by `build` against central
/// differences, over sampled coordinates of every unfrozen parameter.
///
/// The error for one coordinate is `|analytic - fd| / max(1, |analytic|, |fd|)`.
pub fn grad_check<F>(build: F, params: &ParamStore, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_with(
        build,
        params,
        &GradCheckOptions {
            epsilon,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with<F>(
    build: F,
    params: &ParamStore,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::param(format!(
            "epsilon {} outside [1e-7, 1e-3]",
            opts.epsilon
        )));
    }
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, p)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::numeric("loss is not finite"));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let out = build(&mut g, params)?;
    let analytic = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let names: Vec<String> = params
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, _)| n.clone())
        .collect();
    for name in names {
        let n = params.get(&name)?.len();
        let coords: Vec<usize> = if n <= opts.coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let orig = params.get(&name)?.data()[idx];
            probe.value_mut(&name)?.data_mut()[idx] = orig + opts.epsilon;
            let up = eval(&probe)?;
            probe.value_mut(&name)?.data_mut()[idx] = orig - opts.epsilon;
            let down = eval(&probe)?;
            probe.value_mut(&name)?.data_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * opts.epsilon);
            let an = analytic.get(&name).map_or(0.0, |t| t.data()[idx]);
            let err = (an - fd).abs() / 1f64.max(an.abs()).max(fd.abs());
            report.coords_checked += 1;
            if err > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst_param = name.clone();
                report.worst_index = idx;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.insert(
            "w",
            Tensor::vector(vec![0.3, -1.2, 2.5, 0.0, 4.0]).unwrap(),
            false,
        );
        let report = grad_check(
            |g, p| {
                let w = g.param(p, "w")?;
                let s = g.sum_squares(w);
                Ok(g.scale(s, 0.5))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error <= 1e-9, "{report:?}");
        assert_eq!(report.coords_checked, 5);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // `sum_squares` of a scaled copy, but the tape is told nothing is wrong:
        // compare against a function whose analytic path differs from its value.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0]).unwrap(), false);
        let report = grad_check(
            |g, p| {
                let w = g.param(p, "w")?;
                let shifted = p.get("w")?.map(|v| v * v * v);
                let c = g.constant(shifted);
                let s = g.sum_squares(w);
                let t = g.sum_squares(c);
                g.add(s, t)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error > 0.5);
    }

    #[test]
    fn rejects_out_of_range_epsilon() {
        let store = ParamStore::new();
        let r = grad_check(|g, _| Ok(g.constant(Tensor::scalar(0.0))), &store, 1e-2);
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn non_finite_loss_is_a_numeric_failure() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0]).unwrap(), false);
        let r = grad_check(
            |g, p| {
                let w = g.param(p, "w")?;
                let s = g.sum_squares(w);
                Ok(g.scale(s, f64::INFINITY))
            },
            &store,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NumericFailure(_))));
    }
}
