//! Central finite differences, the oracle for every analytic gradient.

mod suite;

pub use suite::{graph_suite, op_suite, worst_by_op, GradCheck, GraphCheckError, FD_STEP};

use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    input: &Tensor<f64>,
    h: f64,
) -> Tensor<f64> {
    let mut probe = input.clone();
    let mut grad = Vec::with_capacity(input.len());
    for i in 0..input.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::from_parts(input.dims().to_vec(), grad)
}

/// Finite differences for a subset of coordinates only.
pub fn finite_difference_at(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    input: &Tensor<f64>,
    h: f64,
    coords: &[usize],
) -> Vec<f64> {
    let mut probe = input.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Worst coordinate of [`rel_err`] and where it occurs.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .enumerate()
        .fold((0.0, 0), |(best, at), (i, e)| {
            if e > best || e.is_nan() {
                (e, i)
            } else {
                (best, at)
            }
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_sum_is_ones() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 2.0).unwrap();
        let g = finite_difference_gradient(|t| t.sum(), &x, 1e-5);
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn gradient_of_square_is_2x() {
        let x = Tensor::from_fn(&[2, 3], |i| (i as f64 * 0.7).cos() * 3.0).unwrap();
        let g = finite_difference_gradient(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        for (gv, xv) in g.data().iter().zip(x.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-8);
        }
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-3).abs() < 1e-15);
        assert!(rel_err(f64::NAN, 0.0).is_nan());
        assert!(max_rel_err(&[0.0, f64::NAN], &[0.0, 0.0]).0.is_nan());
    }
}
