//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use crate::error::{shape_err, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub eps: f64,
    /// Check at most this many coordinates per tensor (sampled with `seed`).
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
    /// Coordinates whose analytic and numeric values are both below this are
    /// counted as agreeing zeros rather than scored by relative error, which
    /// is meaningless when the true derivative is exactly 0 and the central
    /// difference returns rounding noise (about `ulp(f) / eps`).
    pub zero_tol: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_per_tensor: None,
            seed: 0,
            zero_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// `(tensor, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    /// `(tensor, flat index)` of coordinates classified as agreeing zeros.
    pub zeros: Vec<(usize, usize)>,
}

/// Compares `analytic[i]` against `(f(p + eps e_j) - f(p - eps e_j)) / 2 eps`
/// for every checked coordinate `j` of every tensor `i`.
///
/// `f` must be deterministic; anything stateful (batch-norm running
/// statistics, random draws) has to be frozen by the caller.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    opts: &FdOptions,
) -> Result<FdReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(shape_err!(
            "{} parameter tensors but {} gradients",
            params.len(),
            analytic.len()
        ));
    }
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        zeros: Vec::new(),
    };
    for (ti, (p, g)) in params.iter().zip(analytic).enumerate() {
        if p.shape() != g.shape() {
            return Err(shape_err!("param {ti}: {:?} vs grad {:?}", p.shape(), g.shape()));
        }
        let n = p.numel();
        let coords: Vec<usize> = match opts.max_per_tensor {
            Some(m) if m < n => {
                let mut rng = SeededRng::derive(opts.seed, &[ti as u64]).generator();
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for j in coords {
            let orig = p.data()[j];
            work[ti].data_mut()[j] = orig + opts.eps;
            let up = f(&work)?;
            work[ti].data_mut()[j] = orig - opts.eps;
            let down = f(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = g.data()[j];
            report.checked += 1;
            if a.abs() < opts.zero_tol && numeric.abs() < opts.zero_tol {
                report.zeros.push((ti, j));
                continue;
            }
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((ti, j, a, numeric));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let p = [Tensor::from_f64(&[1], &[3.0]).unwrap()];
        let g = [Tensor::from_f64(&[1], &[6.0]).unwrap()];
        let r = finite_diff_check(|ps| Ok(ps[0].item().powi(2)), &p, &g, &FdOptions::default()).unwrap();
        assert!(r.max_rel_error * 6.0 < 1e-8, "{r:?}");
    }

    #[test]
    fn linear_is_exact() {
        let p = [Tensor::from_f64(&[3], &[0.1, -2.0, 7.0]).unwrap()];
        let coef = [2.0, -0.5, 1.25];
        let g = [Tensor::from_f64(&[3], &coef).unwrap()];
        let r = finite_diff_check(
            |ps| Ok(ps[0].data().iter().zip(coef).map(|(a, b)| a * b).sum()),
            &p,
            &g,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn catches_wrong_gradient() {
        let p = [Tensor::from_f64(&[1], &[3.0]).unwrap()];
        let g = [Tensor::from_f64(&[1], &[5.0]).unwrap()];
        let r = finite_diff_check(|ps| Ok(ps[0].item().powi(2)), &p, &g, &FdOptions::default()).unwrap();
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn zero_derivative_is_classified_not_scored() {
        // f ignores its second input entirely
        let p = [Tensor::from_f64(&[2], &[1.3, 0.7]).unwrap()];
        let g = [Tensor::from_f64(&[2], &[2.6, 0.0]).unwrap()];
        let r = finite_diff_check(|ps| Ok(ps[0].data()[0].powi(2)), &p, &g, &FdOptions::default()).unwrap();
        assert_eq!(r.zeros, vec![(0, 1)]);
        assert!(r.max_rel_error < 1e-8);
        // a wrong gradient on a zero-derivative input is still caught
        let bad = [Tensor::from_f64(&[2], &[2.6, 1e-3]).unwrap()];
        let r = finite_diff_check(|ps| Ok(ps[0].data()[0].powi(2)), &p, &bad, &FdOptions::default()).unwrap();
        assert!(r.zeros.is_empty() && r.max_rel_error > 0.5);
    }
}
