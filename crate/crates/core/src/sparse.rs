//! Convolutional sparse coding: minimize
//! `f(z) = 0.5 * ||x - D * z||^2 + lambda * ||z||_1` over activation maps.
//!
//! `fista` is the production solver (accelerated proximal gradient);
//! `ista` is the plain proximal gradient, kept as a slow reference that the
//! tests run to convergence.

use crate::conv::{self, ConvOperator};
use crate::error::{Error, Result};
use crate::tensor::{ActivationMap, Dictionary, SignalTensor};

/// Settings for one sparse-coding solve.
#[derive(Debug, Clone)]
pub struct SparseCodeConfig {
    /// l1 penalty weight, `>= 0`.
    pub lambda: f64,
    /// Number of proximal-gradient iterations to run.
    pub n_iters: usize,
    /// Gradient step size; `None` uses `1 / operator_norm_sq(d, T)`.
    pub step: Option<f64>,
}

impl SparseCodeConfig {
    pub fn new(lambda: f64, n_iters: usize) -> Self {
        SparseCodeConfig { lambda, n_iters, step: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.n_iters == 0 {
            return Err(Error::Config("n_iters must be at least 1".into()));
        }
        if let Some(s) = self.step {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::Config(format!("step must be finite and > 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// Value of the coding objective, split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub data_term: f64,
    pub l1_term: f64,
    pub total: f64,
}

/// Scalar soft threshold `sign(v) * max(|v| - theta, 0)`.
#[inline]
pub fn soft_threshold(v: f64, theta: f64) -> f64 {
    if v > theta {
        v - theta
    } else if v < -theta {
        v + theta
    } else {
        0.0
    }
}

fn check_coding_shapes(x: &SignalTensor, d: &Dictionary) -> Result<()> {
    if x.channels() != d.channels() {
        return Err(Error::DimensionMismatch(format!(
            "signal has {} channels but dictionary has {}",
            x.channels(),
            d.channels()
        )));
    }
    if x.length() < d.atom_len() {
        return Err(Error::OutOfRange(format!(
            "signal length {} is shorter than atom length {}; nothing to code",
            x.length(),
            d.atom_len()
        )));
    }
    Ok(())
}

/// `0.5 * ||x - D * z||^2 + lambda * ||z||_1`, exact.
pub fn objective(
    x: &SignalTensor,
    d: &Dictionary,
    z: &ActivationMap,
    lambda: f64,
) -> Result<ObjectiveValue> {
    check_coding_shapes(x, d)?;
    let recon = conv::convolve(d, z)?;
    if recon.length() != x.length() {
        return Err(Error::DimensionMismatch(format!(
            "activation map codes a signal of length {}, input has {}",
            recon.length(),
            x.length()
        )));
    }
    let data_term = 0.5
        * x.data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    let l1_term = lambda * z.l1_norm();
    Ok(ObjectiveValue { data_term, l1_term, total: data_term + l1_term })
}

/// Smallest `lambda` for which the all-zero code is optimal:
/// the sup-norm of the correlation between every atom and the signal.
pub fn lambda_max(x: &SignalTensor, d: &Dictionary) -> Result<f64> {
    check_coding_shapes(x, d)?;
    let g = conv::correlate_signal(d, x)?;
    Ok(g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Sup-norm violation of the first-order optimality conditions at `z`:
/// on the support the negative gradient must equal `lambda * sign(z)`, off
/// the support its magnitude must not exceed `lambda`. Zero at a minimizer.
pub fn kkt_residual(
    x: &SignalTensor,
    d: &Dictionary,
    z: &ActivationMap,
    lambda: f64,
) -> Result<f64> {
    check_coding_shapes(x, d)?;
    let recon = conv::convolve(d, z)?;
    let residual = SignalTensor::new(
        x.channels(),
        x.length(),
        recon.data().iter().zip(x.data()).map(|(r, xv)| r - xv).collect(),
    )?;
    let grad = conv::correlate_signal(d, &residual)?;
    let mut worst = 0.0f64;
    for (zv, gv) in z.data().iter().zip(grad.data()) {
        let viol = if *zv > 0.0 {
            (gv + lambda).abs()
        } else if *zv < 0.0 {
            (gv - lambda).abs()
        } else {
            (gv.abs() - lambda).max(0.0)
        };
        worst = worst.max(viol);
    }
    Ok(worst)
}

fn resolve_step(d: &Dictionary, signal_len: usize, cfg: &SparseCodeConfig) -> Result<f64> {
    match cfg.step {
        Some(s) => Ok(s),
        None => {
            let ns = conv::operator_norm_sq(d, signal_len)?;
            if ns > 0.0 {
                Ok(1.0 / ns)
            } else {
                Ok(1.0)
            }
        }
    }
}

fn initial_code(
    op: &ConvOperator,
    n_atoms: usize,
    warm: Option<&ActivationMap>,
) -> Result<Vec<f64>> {
    let v = op.valid_len();
    match warm {
        None => Ok(vec![0.0; n_atoms * v]),
        Some(w) => {
            if w.n_atoms() != n_atoms || w.valid_len() != v {
                return Err(Error::DimensionMismatch(format!(
                    "warm start has shape {}x{}, expected {}x{}",
                    w.n_atoms(),
                    w.valid_len(),
                    n_atoms,
                    v
                )));
            }
            Ok(w.data().to_vec())
        }
    }
}

fn check_iterate(z: &[f64], iter: usize) -> Result<()> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "sparse coding diverged at iteration {iter}; non-finite iterate (step size too large?)"
        )));
    }
    Ok(())
}

/// Accelerated proximal gradient, run for exactly `cfg.n_iters` iterations
/// from zero or a warm start.
pub fn fista(
    x: &SignalTensor,
    d: &Dictionary,
    cfg: &SparseCodeConfig,
    warm: Option<&ActivationMap>,
) -> Result<ActivationMap> {
    cfg.validate()?;
    check_coding_shapes(x, d)?;
    let op = ConvOperator::new(d, x.length())?;
    let step = resolve_step(d, x.length(), cfg)?;
    fista_with_op(&op, d.n_atoms(), x, cfg.lambda, cfg.n_iters, step, warm)
}

pub(crate) fn fista_with_op(
    op: &ConvOperator,
    n_atoms: usize,
    x: &SignalTensor,
    lambda: f64,
    n_iters: usize,
    step: f64,
    warm: Option<&ActivationMap>,
) -> Result<ActivationMap> {
    let v = op.valid_len();
    let mut z = initial_code(op, n_atoms, warm)?;
    let mut y = z.clone();
    let mut t = 1.0f64;
    let mut recon = vec![0.0; x.channels() * x.length()];
    let mut grad = vec![0.0; n_atoms * v];
    let theta = step * lambda;
    for iter in 0..n_iters {
        op.forward(&y, &mut recon);
        for (r, xv) in recon.iter_mut().zip(x.data()) {
            *r -= xv;
        }
        op.adjoint_z(&recon, &mut grad);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        for i in 0..z.len() {
            let z_new = soft_threshold(y[i] - step * grad[i], theta);
            y[i] = z_new + beta * (z_new - z[i]);
            z[i] = z_new;
        }
        check_iterate(&z, iter)?;
        t = t_next;
    }
    ActivationMap::new(n_atoms, v, z)
}

/// Plain proximal gradient (no acceleration). Reference implementation;
/// converges slowly but monotonically.
pub fn ista(
    x: &SignalTensor,
    d: &Dictionary,
    cfg: &SparseCodeConfig,
    warm: Option<&ActivationMap>,
) -> Result<ActivationMap> {
    cfg.validate()?;
    check_coding_shapes(x, d)?;
    let op = ConvOperator::new(d, x.length())?;
    let step = resolve_step(d, x.length(), cfg)?;
    let v = op.valid_len();
    let k = d.n_atoms();
    let mut z = initial_code(&op, k, warm)?;
    let mut recon = vec![0.0; x.channels() * x.length()];
    let mut grad = vec![0.0; k * v];
    let theta = step * cfg.lambda;
    for iter in 0..cfg.n_iters {
        op.forward(&z, &mut recon);
        for (r, xv) in recon.iter_mut().zip(x.data()) {
            *r -= xv;
        }
        op.adjoint_z(&recon, &mut grad);
        for (zi, gi) in z.iter_mut().zip(&grad) {
            *zi = soft_threshold(*zi - step * gi, theta);
        }
        check_iterate(&z, iter)?;
    }
    ActivationMap::new(k, v, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stage};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_dictionary() -> Dictionary {
        let a0 = [0.5f64, -0.5, 0.5, 0.5];
        let a1 = [0.3f64, 0.9, 0.1, -0.3];
        let n1: f64 = a1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut data = a0.to_vec();
        data.extend(a1.iter().map(|v| v / n1));
        Dictionary::new(2, 1, 4, data).unwrap()
    }

    fn toy_signal(d: &Dictionary, seed: u64) -> SignalTensor {
        let mut z = ActivationMap::zeros(2, 27).data().to_vec();
        let mut rng = stream(seed, Stage::Activations, 0);
        for v in z.iter_mut() {
            if rng.random_range(0.0..1.0) < 0.1 {
                *v = rng.random_range(0.5..1.5);
            }
        }
        let z = ActivationMap::new(2, 27, z).unwrap();
        let clean = conv::convolve(d, &z).unwrap();
        let mut noisy = clean.data().to_vec();
        for v in noisy.iter_mut() {
            *v += 0.05 * rng.random_range(-1.0..1.0);
        }
        SignalTensor::new(1, clean.length(), noisy).unwrap()
    }

    #[test]
    fn soft_threshold_worked_examples() {
        assert_relative_eq!(soft_threshold(1.2019, 0.5), 0.7019, epsilon = 1e-12);
        assert_eq!(soft_threshold(-0.3, 0.5), 0.0);
        assert_eq!(soft_threshold(0.5, 0.5), 0.0);
        assert_eq!(soft_threshold(-2.0, 0.5), -1.5);
    }

    #[test]
    fn objective_splits_terms() {
        let d = toy_dictionary();
        let z = ActivationMap::zeros(2, 5);
        let x = SignalTensor::new(1, 8, vec![1.0; 8]).unwrap();
        let o = objective(&x, &d, &z, 0.7).unwrap();
        assert_eq!(o.data_term, 4.0);
        assert_eq!(o.l1_term, 0.0);
        assert_eq!(o.total, 4.0);
    }

    #[test]
    fn lambda_max_of_single_atom_signal_is_unit() {
        let d = toy_dictionary();
        let x = SignalTensor::new(1, 4, d.atom_row(0, 0).to_vec()).unwrap();
        // T = L so the only lag aligns the atom with itself; atom 1 is not
        // orthogonal to atom 0 but has smaller correlation
        assert_relative_eq!(lambda_max(&x, &d).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lambda_max_of_zero_signal_is_zero() {
        let d = toy_dictionary();
        let x = SignalTensor::zeros(1, 16);
        assert_eq!(lambda_max(&x, &d).unwrap(), 0.0);
    }

    #[test]
    fn lambda_above_lambda_max_gives_zero_code() {
        let d = toy_dictionary();
        let x = toy_signal(&d, 5);
        let lmax = lambda_max(&x, &d).unwrap();
        let cfg = SparseCodeConfig::new(1.01 * lmax, 40);
        let z = fista(&x, &d, &cfg, None).unwrap();
        assert_eq!(z.support_count(0.0), 0);
    }

    #[test]
    fn fista_matches_ista_run_to_convergence() {
        let d = toy_dictionary();
        for seed in [1u64, 2, 3] {
            let x = toy_signal(&d, seed);
            let lambda = 0.2 * lambda_max(&x, &d).unwrap();
            let z_fast = fista(&x, &d, &SparseCodeConfig::new(lambda, 300), None).unwrap();
            let z_slow = ista(&x, &d, &SparseCodeConfig::new(lambda, 20_000), None).unwrap();
            let sup = z_fast
                .data()
                .iter()
                .zip(z_slow.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(sup <= 1e-6, "sup deviation {sup} for seed {seed}");
            assert!(kkt_residual(&x, &d, &z_fast, lambda).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn warm_start_at_solution_stays_put() {
        let d = toy_dictionary();
        let x = toy_signal(&d, 9);
        let lambda = 0.2 * lambda_max(&x, &d).unwrap();
        let z_star = fista(&x, &d, &SparseCodeConfig::new(lambda, 500), None).unwrap();
        let z_again = fista(&x, &d, &SparseCodeConfig::new(lambda, 50), Some(&z_star)).unwrap();
        let sup = z_star
            .data()
            .iter()
            .zip(z_again.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(sup <= 1e-8, "warm start drifted by {sup}");
    }

    #[test]
    fn ista_objective_never_increases() {
        let d = toy_dictionary();
        let x = toy_signal(&d, 11);
        let lambda = 0.15 * lambda_max(&x, &d).unwrap();
        let mut prev = objective(&x, &d, &ActivationMap::zeros(2, x.length() - 3), lambda)
            .unwrap()
            .total;
        let mut warm = None;
        for _ in 0..30 {
            let z = ista(&x, &d, &SparseCodeConfig::new(lambda, 5), warm.as_ref()).unwrap();
            let cur = objective(&x, &d, &z, lambda).unwrap().total;
            assert!(cur <= prev + 1e-12, "objective rose from {prev} to {cur}");
            prev = cur;
            warm = Some(z);
        }
    }

    #[test]
    fn refuses_signal_shorter_than_atom() {
        let d = toy_dictionary();
        let x = SignalTensor::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let err = fista(&x, &d, &SparseCodeConfig::new(0.1, 10), None).unwrap_err();
        assert!(matches!(err, Error::OutOfRange(_)), "got {err:?}");
    }

    #[test]
    fn rejects_bad_config() {
        let d = toy_dictionary();
        let x = toy_signal(&d, 13);
        assert!(fista(&x, &d, &SparseCodeConfig::new(-0.1, 10), None).is_err());
        assert!(fista(&x, &d, &SparseCodeConfig::new(0.1, 0), None).is_err());
        let mut cfg = SparseCodeConfig::new(0.1, 10);
        cfg.step = Some(0.0);
        assert!(fista(&x, &d, &cfg, None).is_err());
    }

    #[test]
    fn oversized_step_reports_divergence() {
        let d = toy_dictionary();
        let x = toy_signal(&d, 17);
        let mut cfg = SparseCodeConfig::new(0.01, 4000);
        cfg.step = Some(50.0);
        let err = fista(&x, &d, &cfg, None).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "got {err:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn soft_threshold_shrinks(v in -10.0f64..10.0, theta in 0.0f64..5.0) {
            let s = soft_threshold(v, theta);
            prop_assert!(s.abs() <= (v.abs() - theta).max(0.0) + 1e-15);
            prop_assert!(s * v >= 0.0);
            prop_assert!((v - s).abs() <= theta + 1e-15);
        }
    }
}
