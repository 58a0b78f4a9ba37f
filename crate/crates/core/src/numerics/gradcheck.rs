//! Central finite-difference gradient oracle.

use super::{Gradients, ParamId, ParamStore};
use crate::Exec;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between `analytic` and central differences
/// `(L(θ + h·eᵢ) − L(θ − h·eᵢ)) / 2h` over every scalar in `params`.
pub fn finite_difference_check<F>(loss_fn: F, params: &ParamStore, analytic: &Gradients, h: f64) -> f64
where
    F: Fn(&ParamStore) -> f64 + Sync + Send,
{
    finite_difference_check_with(Exec::default(), loss_fn, params, analytic, h)
}

pub fn finite_difference_check_with<F>(exec: Exec, loss_fn: F, params: &ParamStore, analytic: &Gradients, h: f64) -> f64
where
    F: Fn(&ParamStore) -> f64 + Sync + Send,
{
    let coords: Vec<(ParamId, usize)> = params
        .ids()
        .flat_map(|id| (0..params.get(id).len()).map(move |i| (id, i)))
        .collect();
    let errors = exec.map(&coords, |&(id, i)| {
        let mut probe = params.clone();
        let base = probe.get(id).as_slice()[i];
        probe.get_mut(id).as_mut_slice()[i] = base + h;
        let plus = loss_fn(&probe);
        probe.get_mut(id).as_mut_slice()[i] = base - h;
        let minus = loss_fn(&probe);
        let numeric = (plus - minus) / (2.0 * h);
        relative_error(analytic.get(id).as_slice()[i], numeric)
    });
    errors.into_iter().fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, Tape};

    fn quadratic(p: &ParamStore) -> (f64, Gradients) {
        let id = p.ids().next().unwrap();
        let mut t = Tape::new(p);
        let loss = t.param_sq_norm(id);
        let g = t.backward(loss).unwrap();
        (t.scalar(loss), g)
    }

    #[test]
    fn quadratic_at_three() {
        let mut p = ParamStore::new();
        let id = p.add("theta", Matrix::from_vec(1, 1, vec![3.0]).unwrap());
        let (_, g) = quadratic(&p);
        assert_eq!(g.get(id).as_slice(), &[6.0]);
        let err = finite_difference_check(|p: &ParamStore| quadratic(p).0, &p, &g, 1e-5);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut p = ParamStore::new();
        let id = p.add("theta", Matrix::from_vec(1, 1, vec![3.0]).unwrap());
        let (_, mut g) = quadratic(&p);
        g.get_mut(id).as_mut_slice()[0] *= 2.0;
        let err = finite_difference_check(|p: &ParamStore| quadratic(p).0, &p, &g, 1e-5);
        // |12 − 6| / (12 + 6) = 1/3
        assert!((err - 1.0 / 3.0).abs() < 1e-8, "{err}");
    }

    #[test]
    fn sequential_and_parallel_agree() {
        let mut p = ParamStore::new();
        p.add("theta", Matrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let (_, g) = quadratic(&p);
        let f = |p: &ParamStore| quadratic(p).0;
        let a = finite_difference_check_with(Exec::Sequential, f, &p, &g, 1e-5);
        let b = finite_difference_check_with(Exec::Parallel, f, &p, &g, 1e-5);
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
