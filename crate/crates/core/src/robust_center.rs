//! Robust kernel mean element by kernelized IRWLS (KIRWLS) and the
//! robust-centered Gram matrix `C K C'` with `C = I - 1 w'`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::GramMatrix;
use crate::loss::{RobustLoss, TuningPolicy};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KirwlsOptions {
    /// Relative objective change that stops the iteration.
    pub threshold: f64,
    pub max_iter: usize,
    /// Number of weight updates after the initial tuning at which the loss
    /// constants are re-tuned before being frozen. Ignored for fixed losses.
    pub retune_iterations: usize,
}

impl Default for KirwlsOptions {
    fn default() -> Self {
        KirwlsOptions { threshold: 1e-8, max_iter: 200, retune_iterations: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct RobustCentering {
    pub weights: DVector<f64>,
    pub centered: GramMatrix,
    /// Total number of weight updates, tuning updates included.
    pub iterations: usize,
    /// Objective values under the frozen loss, one per iterate.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub threshold: f64,
    /// Loss with the constants that were frozen for the iteration.
    pub loss: RobustLoss,
}

/// RKHS distances `|Phi(x_i) - sum_a w_a Phi(x_a)|`, computed as
/// `sqrt(K_ii - 2 (K w)_i + w' K w)` with the radicand clamped at zero.
pub fn rkhs_distances(k: &GramMatrix, w: &DVector<f64>) -> DVector<f64> {
    let kw = k.matrix() * w;
    let wkw = w.dot(&kw);
    DVector::from_fn(k.order(), |i, _| (k.matrix()[(i, i)] - 2.0 * kw[i] + wkw).max(0.0).sqrt())
}

/// `J = (1/n) sum_i rho(eps_i)` for the mean element with weights `w`.
pub fn kirwls_objective(k: &GramMatrix, loss: &RobustLoss, w: &DVector<f64>) -> Result<f64> {
    check_weights(k, w)?;
    Ok(objective(&rkhs_distances(k, w), loss))
}

fn objective(distances: &DVector<f64>, loss: &RobustLoss) -> f64 {
    distances.iter().map(|&e| loss.rho_unchecked(e)).sum::<f64>() / distances.len() as f64
}

fn reweight(distances: &DVector<f64>, loss: &RobustLoss) -> Result<DVector<f64>> {
    let phi = distances.map(|e| loss.weight_unchecked(e));
    let total = phi.sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    Ok(phi / total)
}

fn check_weights(k: &GramMatrix, w: &DVector<f64>) -> Result<()> {
    if w.len() != k.order() {
        return Err(Error::DimensionMismatch(format!("{} weights for order {}", w.len(), k.order())));
    }
    if w.iter().any(|v| *v < 0.0 || !v.is_finite()) || (w.sum() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("weights must lie on the probability simplex".into()));
    }
    Ok(())
}

/// Runs KIRWLS to estimate the robust kernel mean element and returns its
/// weights with the robust-centered Gram matrix.
///
/// Starts from uniform weights. For data-tuned losses the constants are set
/// from the initial distances, re-tuned `retune_iterations` times, then
/// frozen; the objective trace is recorded under the frozen loss. Stops when
/// `|J_new - J| / J < threshold`, when `J = 0`, or after `max_iter` updates
/// with `converged = false`.
pub fn kirwls_weights(k: &GramMatrix, loss: &RobustLoss, opts: &KirwlsOptions) -> Result<RobustCentering> {
    loss.validate()?;
    let n = k.order();
    if n == 0 {
        return Err(Error::DimensionMismatch("empty Gram matrix".into()));
    }
    let mut w = DVector::from_element(n, 1.0 / n as f64);
    let mut eps = rkhs_distances(k, &w);
    let mut loss = *loss;
    let mut iterations = 0;

    if !matches!(loss.policy(), TuningPolicy::Fixed) && loss.kind().is_tunable() {
        loss = loss.tune_constants(eps.as_slice())?;
        for _ in 0..opts.retune_iterations {
            w = reweight(&eps, &loss)?;
            eps = rkhs_distances(k, &w);
            iterations += 1;
            loss = loss.tune_constants(eps.as_slice())?;
        }
    }

    let mut j = objective(&eps, &loss);
    let mut trace = vec![j];
    let mut converged = false;
    while iterations < opts.max_iter {
        if j == 0.0 {
            converged = true;
            break;
        }
        let w_next = reweight(&eps, &loss)?;
        let eps_next = rkhs_distances(k, &w_next);
        let j_next = objective(&eps_next, &loss);
        iterations += 1;
        trace.push(j_next);
        w = w_next;
        eps = eps_next;
        let change = (j_next - j).abs() / j;
        j = j_next;
        if change < opts.threshold {
            converged = true;
            break;
        }
    }
    let centered = center_unchecked(k, &w);
    Ok(RobustCentering { weights: w, centered, iterations, objective_trace: trace, converged, threshold: opts.threshold, loss })
}

/// `(I - 1 w') K (I - 1 w')'` for weights on the simplex.
pub fn robust_center(k: &GramMatrix, w: &DVector<f64>) -> Result<GramMatrix> {
    check_weights(k, w)?;
    Ok(center_unchecked(k, w))
}

fn center_unchecked(k: &GramMatrix, w: &DVector<f64>) -> GramMatrix {
    let kw = k.matrix() * w;
    let wkw = w.dot(&kw);
    let n = k.order();
    let mut out = k.matrix().clone();
    for j in 0..n {
        for i in 0..=j {
            out[(i, j)] = k.matrix()[(i, j)] - kw[i] - kw[j] + wkw;
        }
    }
    GramMatrix::symmetrized(out)
}
