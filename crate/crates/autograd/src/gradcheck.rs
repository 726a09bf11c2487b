//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::{Graph, ParamId, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub passed: usize,
    pub max_rel_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` for failures.
    pub failures: Vec<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 0.0;
        }
        self.passed as f64 / self.checked as f64
    }
}

/// Compares `d loss / d theta` from [`Graph::backward`] against
/// `(L(theta + eps) - L(theta - eps)) / (2 eps)` on up to `per_param`
/// randomly sampled coordinates of every parameter.
///
/// A coordinate passes when `|a - n| <= abs_floor + rel_tol * max(|a|, |n|)`.
/// `abs_floor` absorbs the round-off of the difference quotient, roughly
/// `|loss| * machine_eps / eps`, which dominates for near-zero gradients.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients<T, F, R>(
    params: &mut ParamStore<T>,
    loss: F,
    per_param: usize,
    eps: f64,
    rel_tol: f64,
    abs_floor: f64,
    rng: &mut R,
) -> GradCheckReport
where
    T: Scalar,
    F: Fn(&mut Graph<'_, T>) -> Var,
    R: Rng + ?Sized,
{
    let analytic = {
        let mut g = Graph::new(params);
        let l = loss(&mut g);
        g.backward(l)
    };
    let eval = |ps: &ParamStore<T>| -> f64 {
        let mut g = Graph::inference(ps);
        let l = loss(&mut g);
        g.item(l).as_f64()
    };
    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        max_rel_error: 0.0,
        failures: Vec::new(),
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let picks = sample(rng, n, per_param.min(n)).into_vec();
        for flat in picks {
            let a = analytic.get(id).map_or(0.0, |t| t.data()[flat].as_f64());
            let orig = params.get(id).data()[flat];
            params.get_mut(id).data_mut()[flat] = T::lit(orig.as_f64() + eps);
            let up = eval(params);
            params.get_mut(id).data_mut()[flat] = T::lit(orig.as_f64() - eps);
            let down = eval(params);
            params.get_mut(id).data_mut()[flat] = orig;
            let num = (up - down) / (2.0 * eps);
            let diff = (a - num).abs();
            let scale = a.abs().max(num.abs());
            let ok = diff <= abs_floor + rel_tol * scale;
            report.checked += 1;
            if scale > abs_floor {
                report.max_rel_error = report.max_rel_error.max(diff / scale);
            }
            if ok {
                report.passed += 1;
            } else {
                report.failures.push((params.name(id).to_string(), flat, a, num));
            }
        }
    }
    report
}
