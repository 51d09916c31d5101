//! Finite-difference gradient checking.
//!
//! Used by the test suites to compare analytic gradients against central
//! differences at 64-bit precision. Kept in the library so integration
//! tests and examples can share it.

use std::collections::BTreeMap;

use super::{Arr, ParamStore};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with an absolute floor, symmetric in its arguments.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Report from a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub n_checked: usize,
    /// `(param name, flat coordinate, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Central finite difference of `f` w.r.t. one flat coordinate of one
/// parameter. The parameter is restored afterwards.
pub fn finite_diff<F>(params: &mut ParamStore, name: &str, coord: usize, step: f64, f: &F) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    let orig = {
        let p = params.get_mut(name).expect("known parameter");
        let v = p.as_slice_mut().expect("standard layout");
        let orig = v[coord];
        v[coord] = orig + step;
        orig
    };
    let fp = f(params);
    {
        let p = params.get_mut(name).expect("known parameter");
        p.as_slice_mut().expect("standard layout")[coord] = orig - step;
    }
    let fm = f(params);
    {
        let p = params.get_mut(name).expect("known parameter");
        p.as_slice_mut().expect("standard layout")[coord] = orig;
    }
    (fp - fm) / (2.0 * step)
}

/// Checks analytic gradients against central differences.
///
/// For each parameter, up to `max_coords_per_param` evenly spaced flat
/// coordinates are probed (all of them when the tensor is small enough), so
/// the check is deterministic. Parameters with no analytic gradient entry
/// are treated as all-zero gradients.
pub fn check_param_grads<F>(
    params: &mut ParamStore,
    analytic: &BTreeMap<String, Arr>,
    f: F,
    step: f64,
    floor: f64,
    max_coords_per_param: usize,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    let names: Vec<String> = params.names().cloned().collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        n_checked: 0,
        worst: None,
    };
    for name in names {
        let n = params.get(&name).expect("known parameter").len();
        let coords: Vec<usize> = if n <= max_coords_per_param {
            (0..n).collect()
        } else {
            (0..max_coords_per_param)
                .map(|i| i * n / max_coords_per_param)
                .collect()
        };
        for coord in coords {
            let a = analytic
                .get(&name)
                .map(|g| g.as_slice().expect("standard layout")[coord])
                .unwrap_or(0.0);
            let num = finite_diff(params, &name, coord, step, &f);
            let err = rel_err(a, num, floor);
            report.n_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), coord, a, num));
            }
        }
    }
    report
}

/// Full gradient check of a scalar-valued graph builder against central
/// differences. `build` is called once per evaluation, so it must be a pure
/// function of the parameter store.
pub fn gradcheck_scalar_fn<F>(
    params: &mut ParamStore,
    build: F,
    step: f64,
    floor: f64,
    max_coords_per_param: usize,
) -> GradCheckReport
where
    F: for<'a> Fn(&'a super::Session<'a>) -> super::Tensor<'a>,
{
    let analytic = {
        let sess = super::Session::new(params);
        let loss = build(&sess);
        let grads = sess.backward(loss);
        sess.param_grads(&grads)
    };
    let eval = |p: &ParamStore| {
        let sess = super::Session::new(p);
        build(&sess).scalar()
    };
    check_param_grads(params, &analytic, eval, step, floor, max_coords_per_param)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ops, Session};
    use ndarray::arr2;

    fn quadratic_loss(ps: &ParamStore) -> f64 {
        let sess = Session::new(ps);
        let w = sess.param("w");
        let y = ops::mul(w, w);
        ops::sum_all(y).scalar()
    }

    #[test]
    fn finite_diff_matches_analytic_quadratic() {
        let mut ps = ParamStore::new();
        ps.insert("w", arr2(&[[1.5, -2.0], [0.5, 3.0]]).into_dyn());
        let sess = Session::new(&ps);
        let w = sess.param("w");
        let loss = ops::sum_all(ops::mul(w, w));
        let grads = sess.backward(loss);
        let analytic = sess.param_grads(&grads);
        drop(sess);
        let report =
            check_param_grads(&mut ps, &analytic, quadratic_loss, DEFAULT_STEP, 1e-8, 64);
        assert!(report.passes(1e-7), "report: {report:?}");
        assert_eq!(report.n_checked, 4);
    }
}
