//! Multi-view kernel mixed model
//!
//! ```text
//! y = X beta + sum_m h_m + e,   h_m ~ N(0, tau_m K_m),   e ~ N(0, sigma2 I)
//! ```
//!
//! fitted by restricted maximum likelihood with Fisher scoring. With three
//! views the components are the three main kernels, the three pairwise
//! Hadamard products and the triple product.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{RngExt, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{hadamard, GramMatrix};
use crate::linalg::{check_design, ols, solve_psd, trace_of_product, trace_with_symmetric};

pub const COMPONENT_LABELS: [&str; 7] = ["1", "2", "3", "1x2", "1x3", "2x3", "1x2x3"];

/// Ordered list of variance-component kernels sharing one sample order.
#[derive(Clone, Debug)]
pub struct ComponentSet {
    kernels: Vec<GramMatrix>,
    labels: Vec<String>,
}

impl ComponentSet {
    pub fn new(kernels: Vec<GramMatrix>, labels: Vec<String>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::InvalidArgument("a component set needs at least one kernel".into()));
        }
        if labels.len() != kernels.len() {
            return Err(Error::DimensionMismatch(format!("{} labels for {} kernels", labels.len(), kernels.len())));
        }
        let n = kernels[0].order();
        if let Some(k) = kernels.iter().find(|k| k.order() != n) {
            return Err(Error::DimensionMismatch(format!("kernel orders {} and {}", n, k.order())));
        }
        Ok(ComponentSet { kernels, labels })
    }

    /// Single unlabeled-style set, mostly for tests and the CLI.
    pub fn from_kernels(kernels: Vec<GramMatrix>) -> Result<Self> {
        let labels = (1..=kernels.len()).map(|i| format!("k{i}")).collect();
        Self::new(kernels, labels)
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn order(&self) -> usize {
        self.kernels[0].order()
    }

    pub fn kernels(&self) -> &[GramMatrix] {
        &self.kernels
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// The set with component `index` removed.
    pub fn without(&self, index: usize) -> Result<ComponentSet> {
        if index >= self.len() || self.len() == 1 {
            return Err(Error::InvalidArgument(format!("cannot drop component {index} of {}", self.len())));
        }
        let mut kernels = self.kernels.clone();
        let mut labels = self.labels.clone();
        kernels.remove(index);
        labels.remove(index);
        Ok(ComponentSet { kernels, labels })
    }

    /// Sum of all component kernels.
    pub fn sum(&self) -> DMatrix<f64> {
        let mut total = self.kernels[0].matrix().clone();
        for k in &self.kernels[1..] {
            total += k.matrix();
        }
        total
    }
}

/// The seven components of the three-view model: mains, pairwise Hadamard
/// products and the triple product, in [`COMPONENT_LABELS`] order.
pub fn assemble_components(k1: &GramMatrix, k2: &GramMatrix, k3: &GramMatrix) -> Result<ComponentSet> {
    let k12 = hadamard(k1, k2)?;
    let k13 = hadamard(k1, k3)?;
    let k23 = hadamard(k2, k3)?;
    let k123 = hadamard(&k12, k3)?;
    ComponentSet::new(
        vec![k1.clone(), k2.clone(), k3.clone(), k12, k13, k23, k123],
        COMPONENT_LABELS.iter().map(|s| s.to_string()).collect(),
    )
}

/// Residual variance and one variance component per kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams {
    pub sigma2: f64,
    pub tau: Vec<f64>,
}

impl VarianceParams {
    pub fn new(sigma2: f64, tau: Vec<f64>) -> Self {
        VarianceParams { sigma2, tau }
    }

    fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.tau.len() + 1, std::iter::once(self.sigma2).chain(self.tau.iter().copied()))
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        VarianceParams { sigma2: v[0], tau: v.iter().skip(1).copied().collect() }
    }

    fn check(&self, comps: &ComponentSet) -> Result<()> {
        if self.tau.len() != comps.len() {
            return Err(Error::DimensionMismatch(format!("{} taus for {} components", self.tau.len(), comps.len())));
        }
        if !(self.sigma2 > 0.0) || self.tau.iter().any(|t| !(*t >= 0.0)) || !self.sigma2.is_finite() {
            return Err(Error::InvalidArgument(format!("variance parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

/// Curvature used for the scoring step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Information {
    /// `1/2 tr(P K_a P K_b)`.
    Expected,
    /// `1/2 y'P K_a P K_b P y`, falling back to the expected information when
    /// its step fails to increase the likelihood.
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemlOptions {
    pub information: Information,
    pub max_iter: usize,
    /// Stop when an accepted step changes the restricted log-likelihood by less than this.
    pub reml_tol: f64,
    /// Stop when the largest parameter change, relative to the largest parameter, is below this.
    pub step_tol: f64,
    /// Largest free-parameter score, times the OLS residual variance, accepted at convergence.
    pub score_tol: f64,
    pub max_halvings: usize,
    /// Lower clamp for variance parameters, relative to the OLS residual variance.
    pub boundary: f64,
    /// Joint starting fractions of the OLS residual variance for every tau.
    pub grid_fractions: Vec<f64>,
    pub random_starts: usize,
    pub seed: u64,
}

impl Default for RemlOptions {
    fn default() -> Self {
        RemlOptions {
            information: Information::Average,
            max_iter: 100,
            reml_tol: 1e-6,
            step_tol: 1e-6,
            score_tol: 1e-6,
            max_halvings: 10,
            boundary: 1e-8,
            grid_fractions: vec![0.1, 0.5, 0.9],
            random_starts: 2,
            seed: 0x5eed_2f17,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MixedModelFit {
    pub beta: DVector<f64>,
    pub sigma2: f64,
    pub tau: Vec<f64>,
    /// `h_m = tau_m K_m Sigma^{-1} (y - X beta)`.
    pub blups: Vec<DVector<f64>>,
    /// Dual coefficients with `h_m = K_m alpha_m`.
    pub alpha: Vec<DVector<f64>>,
    pub reml_loglik: f64,
    pub converged: bool,
    pub n_iter: usize,
    /// `sigma2 I + sum_m tau_m K_m` at the estimate.
    pub sigma: DMatrix<f64>,
    /// Restricted-likelihood gradient over `(sigma2, tau)` at the estimate.
    pub score: DVector<f64>,
    pub fisher_information: DMatrix<f64>,
    pub start_index: usize,
    /// Restricted log-likelihood reached from every start (`None` if it failed).
    pub start_logliks: Vec<Option<f64>>,
    pub labels: Vec<String>,
}

impl MixedModelFit {
    pub fn params(&self) -> VarianceParams {
        VarianceParams::new(self.sigma2, self.tau.clone())
    }
}

struct Factor {
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
}

/// Cholesky of `sigma` with jitter escalation: `1e-10` up to `1e-6` times
/// the mean diagonal.
fn factor(mut sigma: DMatrix<f64>) -> Result<Factor> {
    let n = sigma.nrows();
    let scale = sigma.trace() / n as f64;
    let mut jitter = 0.0;
    loop {
        if let Some(chol) = Cholesky::new(sigma.clone()) {
            let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            if logdet.is_finite() {
                return Ok(Factor { chol, logdet });
            }
        }
        let next = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if next > 1e-6 * (1.0 + 1e-9) {
            return Err(Error::SingularCovariance(jitter * scale));
        }
        for i in 0..n {
            sigma[(i, i)] += (next - jitter) * scale;
        }
        jitter = next;
    }
}

pub(crate) fn covariance(comps: &ComponentSet, params: &VarianceParams) -> DMatrix<f64> {
    let n = comps.order();
    let mut sigma = DMatrix::identity(n, n) * params.sigma2;
    for (k, tau) in comps.kernels().iter().zip(&params.tau) {
        if *tau != 0.0 {
            sigma += k.matrix() * *tau;
        }
    }
    sigma
}

/// Restricted-likelihood quantities at one parameter value.
pub(crate) struct Profile {
    pub loglik: f64,
    pub beta: DVector<f64>,
    /// `P y = Sigma^{-1} (y - X beta)`.
    pub py: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// The projection `P`, only when requested.
    pub p: Option<DMatrix<f64>>,
}

pub(crate) fn profile(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    comps: &ComponentSet,
    params: &VarianceParams,
    with_projection: bool,
) -> Result<Profile> {
    let sigma = covariance(comps, params);
    let f = factor(sigma.clone())?;
    let si_y = f.chol.solve(y);
    let si_x = f.chol.solve(x);
    let xsx = x.tr_mul(&si_x);
    let xsx_chol = Cholesky::new(xsx).ok_or(Error::RankDeficient)?;
    let logdet_xsx = 2.0 * xsx_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let beta = xsx_chol.solve(&x.tr_mul(&si_y));
    let py = &si_y - &si_x * &beta;
    let quad = y.dot(&py);
    let loglik = -0.5 * (f.logdet + logdet_xsx + quad);
    if !loglik.is_finite() {
        return Err(Error::NonFinite("restricted log-likelihood".into()));
    }
    let p = if with_projection {
        let mut p = f.chol.inverse();
        let w = xsx_chol.solve(&si_x.transpose());
        p.gemm(-1.0, &si_x, &w, 1.0);
        Some(p)
    } else {
        None
    };
    Ok(Profile { loglik, beta, py, sigma, p })
}

fn score_from(comps: &ComponentSet, p: &DMatrix<f64>, py: &DVector<f64>) -> DVector<f64> {
    let mut s = DVector::zeros(comps.len() + 1);
    s[0] = -0.5 * (p.trace() - py.norm_squared());
    for (m, k) in comps.kernels().iter().enumerate() {
        let kpy = k.matrix() * py;
        s[m + 1] = -0.5 * (trace_with_symmetric(p, k.matrix()) - py.dot(&kpy));
    }
    s
}

/// Average of observed and expected information, `1/2 y'P K_a P K_b P y`.
fn average_information_from(comps: &ComponentSet, p: &DMatrix<f64>, py: &DVector<f64>) -> DMatrix<f64> {
    let mut u: Vec<DVector<f64>> = Vec::with_capacity(comps.len() + 1);
    u.push(py.clone());
    for k in comps.kernels() {
        u.push(k.matrix() * py);
    }
    let pu: Vec<DVector<f64>> = u.iter().map(|v| p * v).collect();
    let d = u.len();
    DMatrix::from_fn(d, d, |a, b| 0.5 * u[a].dot(&pu[b]))
}

fn information_from(comps: &ComponentSet, p: &DMatrix<f64>) -> DMatrix<f64> {
    let mut products: Vec<DMatrix<f64>> = Vec::with_capacity(comps.len() + 1);
    products.push(p.clone());
    for k in comps.kernels() {
        products.push(p * k.matrix());
    }
    let d = products.len();
    let mut info = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v = 0.5 * trace_of_product(&products[a], &products[b]);
            info[(a, b)] = v;
            info[(b, a)] = v;
        }
    }
    info
}

/// Restricted log-likelihood `-1/2 [log|Sigma| + log|X' Sigma^{-1} X| + y' P y]`.
pub fn reml_loglik(y: &DVector<f64>, x: &DMatrix<f64>, comps: &ComponentSet, params: &VarianceParams) -> Result<f64> {
    check_inputs(y, x, comps)?;
    params.check(comps)?;
    Ok(profile(y, x, comps, params, false)?.loglik)
}

/// Analytic gradient over `(sigma2, tau_1, ..)`:
/// `-1/2 [tr(P K_m) - y' P K_m P y]` with `K_0 = I`.
pub fn reml_score(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    comps: &ComponentSet,
    params: &VarianceParams,
) -> Result<DVector<f64>> {
    check_inputs(y, x, comps)?;
    params.check(comps)?;
    let prof = profile(y, x, comps, params, true)?;
    Ok(score_from(comps, prof.p.as_ref().unwrap(), &prof.py))
}

/// Expected information `1/2 tr(P K_a P K_b)` over `(sigma2, tau_1, ..)`.
pub fn fisher_information(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    comps: &ComponentSet,
    params: &VarianceParams,
) -> Result<DMatrix<f64>> {
    check_inputs(y, x, comps)?;
    params.check(comps)?;
    let prof = profile(y, x, comps, params, true)?;
    Ok(information_from(comps, prof.p.as_ref().unwrap()))
}

fn check_inputs(y: &DVector<f64>, x: &DMatrix<f64>, comps: &ComponentSet) -> Result<()> {
    if y.len() != comps.order() {
        return Err(Error::DimensionMismatch(format!("{} outcomes for kernels of order {}", y.len(), comps.order())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("outcome".into()));
    }
    check_design(x, y.len())
}

/// Starting points: `sigma2` at the OLS residual variance `s2`, every tau at
/// each grid fraction of `s2`, then random fractions in (0, 1).
pub fn default_init_grid(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    comps: &ComponentSet,
    opts: &RemlOptions,
) -> Result<Vec<VarianceParams>> {
    let s2 = ols_scale(y, x)?;
    let m = comps.len();
    let mut grid: Vec<VarianceParams> =
        opts.grid_fractions.iter().map(|f| VarianceParams::new(s2, vec![f * s2; m])).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.random_starts {
        let tau = (0..m).map(|_| rng.random_range(0.0..1.0) * s2).collect::<Vec<f64>>();
        grid.push(VarianceParams::new(s2, tau.into_iter().map(|t: f64| t.max(1e-3 * s2)).collect()));
    }
    Ok(grid)
}

fn ols_scale(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<f64> {
    let fit = ols(y, x)?;
    let s2 = fit.residual_variance(x.ncols());
    if s2 > 0.0 {
        Ok(s2)
    } else {
        Err(Error::PerfectFit)
    }
}

struct StartOutcome {
    params: VarianceParams,
    loglik: f64,
    converged: bool,
    iterations: usize,
}

fn fisher_scoring(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    comps: &ComponentSet,
    start: &VarianceParams,
    scale: f64,
    opts: &RemlOptions,
) -> Result<StartOutcome> {
    let lower = opts.boundary * scale;
    let clamp = |v: &mut DVector<f64>| {
        for t in v.iter_mut() {
            if *t < lower {
                *t = lower;
            }
        }
    };
    let mut theta = start.to_vector();
    clamp(&mut theta);
    let d = theta.len();
    let mut current = profile(y, x, comps, &VarianceParams::from_vector(&theta), true)?;
    let mut converged = false;
    let mut stalled = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let p = current.p.as_ref().expect("projection requested");
        let score = score_from(comps, p, &current.py);

        // parameters pinned at the clamp with an outward gradient stay frozen
        let active: Vec<usize> =
            (0..d).filter(|&i| !(theta[i] <= lower * (1.0 + 1e-9) && score[i] <= 0.0)).collect();
        if active.is_empty() {
            converged = true;
            break;
        }
        let free_score = active.iter().map(|&i| score[i].abs()).fold(0.0, f64::max);
        if stalled && free_score * scale <= opts.score_tol {
            converged = true;
            break;
        }

        let direction = |info: &DMatrix<f64>| {
            let info_a = DMatrix::from_fn(active.len(), active.len(), |i, j| info[(active[i], active[j])]);
            let score_a = DVector::from_fn(active.len(), |i, _| score[active[i]]);
            let delta_a = solve_psd(&info_a, &score_a);
            let mut delta = DVector::zeros(d);
            for (i, &a) in active.iter().enumerate() {
                delta[a] = delta_a[i];
            }
            delta
        };
        let line_search = |delta: &DVector<f64>| {
            let mut step = 1.0;
            for _ in 0..=opts.max_halvings {
                let mut trial = &theta + delta * step;
                clamp(&mut trial);
                let params = VarianceParams::from_vector(&trial);
                if let Ok(ll) = profile(y, x, comps, &params, false).map(|p| p.loglik) {
                    if ll > current.loglik {
                        return Some((trial, ll));
                    }
                }
                step *= 0.5;
            }
            None
        };

        let mut accepted = match opts.information {
            Information::Average => line_search(&direction(&average_information_from(comps, p, &current.py))),
            Information::Expected => None,
        };
        if accepted.is_none() {
            accepted = line_search(&direction(&information_from(comps, p)));
        }
        let Some((next, ll)) = accepted else {
            // no ascent along the scoring direction: numerically stationary
            converged = true;
            break;
        };
        let gain = ll - current.loglik;
        let rel_step = (&next - &theta).amax() / next.amax();
        theta = next;
        current = profile(y, x, comps, &VarianceParams::from_vector(&theta), true)?;
        stalled = gain < opts.reml_tol || rel_step < opts.step_tol;
    }

    // parameters left at the clamp are reported on the boundary
    let p = current.p.as_ref().expect("projection requested");
    let score = score_from(comps, p, &current.py);
    let mut reported = theta.clone();
    for i in 1..d {
        if theta[i] <= lower * (1.0 + 1e-9) && score[i] <= 0.0 {
            reported[i] = 0.0;
        }
    }
    let params = VarianceParams::from_vector(&reported);
    let loglik = profile(y, x, comps, &params, false)?.loglik;
    Ok(StartOutcome { params, loglik, converged, iterations })
}

/// Fits the mixed model by ReML Fisher scoring from every start in
/// `init_grid` (the default grid when empty) and keeps the converged start
/// with the largest restricted likelihood; ties go to the earlier start.
pub fn reml_fit(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    comps: &ComponentSet,
    init_grid: &[VarianceParams],
    opts: &RemlOptions,
) -> Result<MixedModelFit> {
    check_inputs(y, x, comps)?;
    let s2 = ols_scale(y, x)?;
    let grid = if init_grid.is_empty() { default_init_grid(y, x, comps, opts)? } else { init_grid.to_vec() };
    for start in &grid {
        start.check(comps)?;
    }
    let outcomes: Vec<Result<StartOutcome>> =
        grid.par_iter().map(|start| fisher_scoring(y, x, comps, start, s2, opts)).collect();

    let start_logliks = outcomes.iter().map(|o| o.as_ref().ok().map(|o| o.loglik)).collect();
    let mut best: Option<(usize, &StartOutcome)> = None;
    for (i, outcome) in outcomes.iter().enumerate() {
        if let Ok(o) = outcome {
            if o.converged && best.is_none_or(|(_, b)| o.loglik > b.loglik) {
                best = Some((i, o));
            }
        }
    }
    let Some((start_index, best)) = best else {
        if let Some(Err(e)) = outcomes.into_iter().find(|o| o.is_err()) {
            log::debug!("every ReML start failed; first error: {e}");
        }
        return Err(Error::NoConvergence);
    };
    finish_fit(y, x, comps, best, start_index, start_logliks)
}

/// [`reml_fit`] with the default starting grid and options.
pub fn reml_fit_default(y: &DVector<f64>, x: &DMatrix<f64>, comps: &ComponentSet) -> Result<MixedModelFit> {
    reml_fit(y, x, comps, &[], &RemlOptions::default())
}

fn finish_fit(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    comps: &ComponentSet,
    best: &StartOutcome,
    start_index: usize,
    start_logliks: Vec<Option<f64>>,
) -> Result<MixedModelFit> {
    let params = &best.params;
    let prof = profile(y, x, comps, params, true)?;
    let p = prof.p.as_ref().unwrap();
    let score = score_from(comps, p, &prof.py);
    let fisher_information = information_from(comps, p);
    let alpha: Vec<DVector<f64>> = params.tau.iter().map(|t| &prof.py * *t).collect();
    let blups = comps.kernels().iter().zip(&alpha).map(|(k, a)| k.matrix() * a).collect();
    Ok(MixedModelFit {
        beta: prof.beta.clone(),
        sigma2: params.sigma2,
        tau: params.tau.clone(),
        blups,
        alpha,
        reml_loglik: prof.loglik,
        converged: best.converged,
        n_iter: best.iterations,
        sigma: prof.sigma,
        score,
        fisher_information,
        start_index,
        start_logliks,
        labels: comps.labels().to_vec(),
    })
}

/// Best linear unbiased predictors `h_m = tau_m K_m Sigma^{-1} (y - X beta)`.
pub fn blup(
    fit: &MixedModelFit,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    comps: &ComponentSet,
) -> Result<Vec<DVector<f64>>> {
    check_inputs(y, x, comps)?;
    if fit.tau.len() != comps.len() {
        return Err(Error::DimensionMismatch("fit and component set disagree".into()));
    }
    let f = factor(fit.sigma.clone())?;
    let resid = y - x * &fit.beta;
    let sr = f.chol.solve(&resid);
    Ok(comps.kernels().iter().zip(&fit.tau).map(|(k, t)| k.matrix() * &sr * *t).collect())
}
