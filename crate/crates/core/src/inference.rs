//! Variance-component score tests with Satterthwaite scaled chi-square
//! p-values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::linalg::{ols, residual_projection, trace_of_product, trace_with_symmetric};
use crate::mixed_model::{profile, ComponentSet, MixedModelFit, VarianceParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    Overall,
    Composite,
}

impl std::str::FromStr for TestKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overall" => Ok(TestKind::Overall),
            "composite" => Ok(TestKind::Composite),
            other => Err(Error::InvalidArgument(format!("unknown test kind `{other}`"))),
        }
    }
}

/// A score statistic with its null moments and scaled chi-square p-value.
/// `gamma` and `nu` are NaN when the statistic is degenerate (zero null mean).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    pub gamma: f64,
    pub nu: f64,
    pub p_value: f64,
    pub mean: f64,
    pub variance: f64,
}

/// Method-of-moments match of `gamma * chi2_nu` to a mean and variance:
/// `gamma = var / (2 e)`, `nu = 2 e^2 / var`.
pub fn satterthwaite(e: f64, var: f64) -> Result<(f64, f64)> {
    if !(e > 0.0 && var > 0.0 && e.is_finite() && var.is_finite()) {
        return Err(Error::InvalidArgument(format!("moments must be positive, got mean {e}, variance {var}")));
    }
    Ok((var / (2.0 * e), 2.0 * e * e / var))
}

/// Upper tail `P(gamma * chi2_nu >= s)`.
pub fn scaled_chisq_pvalue(s: f64, gamma: f64, nu: f64) -> f64 {
    debug_assert!(gamma > 0.0 && nu > 0.0);
    if !(s > 0.0) {
        return 1.0;
    }
    if s.is_infinite() {
        return 0.0;
    }
    regularized_upper_gamma(0.5 * nu, 0.5 * s / gamma)
}

/// `Q(a, x) = Gamma(a, x) / Gamma(a)` by series below `x = a + 1` and a
/// Lentz continued fraction above.
pub fn regularized_upper_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // P(a, x) = e^{-x} x^a / Gamma(a + 1) * sum_k x^k / ((a+1)...(a+k))
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut denom = a;
        for _ in 0..10_000 {
            denom += 1.0;
            term *= x / denom;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        let lower = (log_prefactor + sum.ln()).exp();
        (1.0 - lower).clamp(0.0, 1.0)
    } else {
        const TINY: f64 = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < TINY {
                d = TINY;
            }
            c = b + an / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (log_prefactor + h.ln()).exp().clamp(0.0, 1.0)
    }
}

fn finish(kind: TestKind, statistic: f64, mean: f64, variance: f64) -> Result<TestResult> {
    if !statistic.is_finite() || !mean.is_finite() || !variance.is_finite() {
        return Err(Error::NonFinite("score statistic or its moments".into()));
    }
    let statistic = statistic.max(0.0);
    if mean <= 0.0 || variance <= 0.0 {
        return Ok(TestResult { kind, statistic, gamma: f64::NAN, nu: f64::NAN, p_value: 1.0, mean, variance });
    }
    let (gamma, nu) = satterthwaite(mean, variance)?;
    let p_value = scaled_chisq_pvalue(statistic, gamma, nu);
    Ok(TestResult { kind, statistic, gamma, nu, p_value, mean, variance })
}

/// Overall test of every variance component against the null model
/// `y = X beta + e`:
///
/// `S = (y - X b)' K (y - X b) / (2 s0^2)` with `K` the sum of all
/// components, `b` the OLS estimate and `s0^2 = RSS / (n - q)`.
///
/// With `A = P0 K P0` and `m = n - q`, the null mean is `tr(A) / 2`. Because
/// `s0^2` is estimated, the null variance is the exact variance of the
/// studentized form, `(m tr(A^2) - tr(A)^2) / (2 (m + 2))`, not the
/// known-variance `tr(A^2) / 2`, which overstates the spread and makes the
/// test conservative when `m` is not large against the effective degrees of
/// freedom. [`overall_score_test_known_variance`] called with `s0^2` gives the
/// known-variance moments.
pub fn overall_score_test(y: &DVector<f64>, x: &DMatrix<f64>, comps: &ComponentSet) -> Result<TestResult> {
    overall_with_variance(y, x, comps, None)
}

/// [`overall_score_test`] with the null residual variance supplied instead
/// of estimated. Null moments are `tr(P0 K) / 2` and `tr(P0 K P0 K) / 2`.
pub fn overall_score_test_known_variance(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    comps: &ComponentSet,
    sigma0_sq: f64,
) -> Result<TestResult> {
    if !(sigma0_sq > 0.0) {
        return Err(Error::InvalidArgument(format!("null variance must be positive, got {sigma0_sq}")));
    }
    overall_with_variance(y, x, comps, Some(sigma0_sq))
}

fn overall_with_variance(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    comps: &ComponentSet,
    sigma0_sq: Option<f64>,
) -> Result<TestResult> {
    if y.len() != comps.order() {
        return Err(Error::DimensionMismatch(format!("{} outcomes for kernels of order {}", y.len(), comps.order())));
    }
    let k = comps.sum();
    if k.amax() == 0.0 {
        return Err(Error::DegenerateTest("all component kernels are zero".into()));
    }
    let null = ols(y, x)?;
    let s2 = match sigma0_sq {
        Some(v) => v,
        None => null.residual_variance(x.ncols()),
    };
    if !(s2 > 0.0) || null.rss <= 1e-24 * y.norm_squared() {
        return Err(Error::PerfectFit);
    }
    let r = &null.residuals;
    let statistic = r.dot(&(&k * r)) / (2.0 * s2);
    let p0 = residual_projection(x)?;
    let p0k = &p0 * &k;
    let mean = 0.5 * p0k.trace();
    let variance = 0.5 * trace_of_product(&p0k, &p0k);
    // kernels inside the column space of X leave nothing to test
    let scale = k.amax() * k.nrows() as f64;
    if mean <= 1e-12 * scale {
        return finish(TestKind::Overall, statistic, 0.0, variance.max(0.0));
    }
    if sigma0_sq.is_none() {
        let m = (y.len() - x.ncols()) as f64;
        let studentized = (m * variance - 2.0 * mean * mean) / (m + 2.0);
        // zero when A is a multiple of P0: the statistic is then a constant
        let studentized = if studentized <= 1e-12 * variance { 0.0 } else { studentized };
        return finish(TestKind::Overall, statistic, mean, studentized);
    }
    finish(TestKind::Overall, statistic, mean, variance)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositeOptions {
    /// Divide the statistic by the null residual variance as well, as in the
    /// printed form of the statistic. Leaves the p-value unchanged.
    pub legacy_prefactor: bool,
}

/// Composite test of the last component of `comps` with all other
/// components kept in the null model.
///
/// `null_fit` is the ReML fit of the model without the tested component.
/// With `B` the restricted projection at the null estimate, the statistic is
/// `S = 1/2 y' B K B y`, with null mean `1/2 tr(B K B Sigma)` and variance
/// `1/2 tr((B K B Sigma)^2)`; since `B Sigma B = B` these reduce to
/// `1/2 tr(B K)` and `1/2 tr((B K)^2)`.
pub fn composite_score_test(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    comps: &ComponentSet,
    null_fit: &MixedModelFit,
    opts: &CompositeOptions,
) -> Result<TestResult> {
    if !null_fit.converged {
        return Err(Error::NullFitNotConverged);
    }
    let tested = comps.len() - 1;
    if null_fit.tau.len() != tested {
        return Err(Error::DimensionMismatch(format!(
            "null fit has {} components, expected {}",
            null_fit.tau.len(),
            tested
        )));
    }
    let null_comps = comps.without(tested)?;
    let params = VarianceParams::new(null_fit.sigma2, null_fit.tau.clone());
    let prof = profile(y, x, &null_comps, &params, true)?;
    let b = prof.p.as_ref().expect("projection requested");
    let k = comps.kernels()[tested].matrix();
    let by = &prof.py;
    let mut statistic = 0.5 * by.dot(&(k * by));
    let bk = b * k;
    let mut mean = 0.5 * trace_with_symmetric(b, k);
    let mut variance = 0.5 * trace_of_product(&bk, &bk);
    if opts.legacy_prefactor {
        let s2 = null_fit.sigma2;
        statistic /= s2;
        mean /= s2;
        variance /= s2 * s2;
    }
    let scale = k.amax() * k.nrows() as f64 / null_fit.sigma2;
    if mean <= 1e-12 * scale {
        return finish(TestKind::Composite, statistic, 0.0, variance.max(0.0));
    }
    finish(TestKind::Composite, statistic, mean, variance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::GramMatrix;
    use crate::mixed_model::{reml_fit_default, RemlOptions};
    use rand::{RngExt, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_psd(n: usize, rank: usize, r: &mut rand_chacha::ChaCha8Rng) -> GramMatrix {
        let a = DMatrix::<f64>::from_fn(n, rank, |_, _| StandardNormal.sample(r));
        GramMatrix::new(&a * a.transpose() / rank as f64).unwrap()
    }

    fn design(n: usize, r: &mut rand_chacha::ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { StandardNormal.sample(r) })
    }

    #[test]
    fn satterthwaite_examples() {
        assert_eq!(satterthwaite(5.0, 10.0).unwrap(), (1.0, 5.0));
        assert_eq!(satterthwaite(2.0, 16.0).unwrap(), (4.0, 0.5));
        assert!(satterthwaite(0.0, 1.0).is_err());
        assert!(satterthwaite(1.0, -1.0).is_err());
    }

    #[test]
    fn satterthwaite_round_trips_moments() {
        let mut r = rng(1);
        for _ in 0..1000 {
            let e: f64 = r.random_range(1e-3..1e3);
            let v: f64 = r.random_range(1e-3..1e3);
            let (g, nu) = satterthwaite(e, v).unwrap();
            assert!((g * nu - e).abs() <= 1e-12 * e);
            assert!((2.0 * g * g * nu - v).abs() <= 1e-12 * v);
        }
    }

    #[test]
    fn pvalue_examples() {
        assert_eq!(scaled_chisq_pvalue(0.0, 1.0, 3.0), 1.0);
        let p = scaled_chisq_pvalue(2.0 * 20f64.ln(), 1.0, 2.0);
        assert!((p - 0.05).abs() < 1e-15);
        // chi2_2 tail is exp(-s/2) all the way down
        let p = scaled_chisq_pvalue(1000.0, 1.0, 2.0);
        assert!((p / (-500f64).exp() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pvalue_is_decreasing_in_statistic() {
        for &(g, nu) in &[(0.5, 0.7), (2.0, 3.0), (1.0, 40.0)] {
            let mut last = 1.0;
            for i in 1..400 {
                let p = scaled_chisq_pvalue(i as f64 * 0.25, g, nu);
                assert!(p < last || (p == 1.0 && last == 1.0), "g={g} nu={nu} i={i}");
                last = p;
            }
        }
    }

    #[test]
    fn overall_statistic_is_invariant_to_fixed_effects() {
        let mut r = rng(2);
        let n = 30;
        let x = design(n, &mut r);
        let comps = ComponentSet::from_kernels(vec![random_psd(n, 5, &mut r), random_psd(n, 5, &mut r)]).unwrap();
        let y = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut r));
        let shifted = &y + &x * DVector::from_vec(vec![3.0, -7.5]);
        let a = overall_score_test(&y, &x, &comps).unwrap();
        let b = overall_score_test(&shifted, &x, &comps).unwrap();
        assert!((a.statistic - b.statistic).abs() <= 1e-8 * a.statistic);
        assert!((0.0..=1.0).contains(&a.p_value));
    }

    #[test]
    fn overall_kernel_in_design_span_is_degenerate() {
        let mut r = rng(3);
        let n = 20;
        let x = design(n, &mut r);
        // K = X X' lives in the column space of X
        let k = GramMatrix::new(&x * x.transpose()).unwrap();
        let comps = ComponentSet::from_kernels(vec![k]).unwrap();
        let y = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut r));
        let res = overall_score_test(&y, &x, &comps).unwrap();
        assert_eq!(res.p_value, 1.0);
        assert!(res.statistic < 1e-10);
    }

    #[test]
    fn overall_errors() {
        let n = 10;
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let zero = ComponentSet::from_kernels(vec![GramMatrix::new(DMatrix::zeros(n, n)).unwrap()]).unwrap();
        let y = DVector::from_fn(n, |i, _| i as f64 * 0.3);
        assert!(matches!(overall_score_test(&y, &x, &zero), Err(Error::DegenerateTest(_))));
        let comps = ComponentSet::from_kernels(vec![GramMatrix::identity(n)]).unwrap();
        assert!(matches!(overall_score_test(&y, &x, &comps), Err(Error::PerfectFit)));
    }

    fn composite_fixture(seed: u64) -> (DVector<f64>, DMatrix<f64>, ComponentSet, MixedModelFit) {
        let mut r = rng(seed);
        let n = 40;
        let x = design(n, &mut r);
        let comps = ComponentSet::from_kernels((0..3).map(|_| random_psd(n, 4, &mut r)).collect()).unwrap();
        let y = DVector::from_fn(n, |i, _| 0.5 + x[(i, 1)] + { let z: f64 = StandardNormal.sample(&mut r); z });
        let null_fit = reml_fit_default(&y, &x, &comps.without(2).unwrap()).unwrap();
        (y, x, comps, null_fit)
    }

    #[test]
    fn composite_moments_match_explicit_sigma_form() {
        let (y, x, comps, null_fit) = composite_fixture(4);
        let res = composite_score_test(&y, &x, &comps, &null_fit, &CompositeOptions::default()).unwrap();
        let null_comps = comps.without(2).unwrap();
        let b = profile(&y, &x, &null_comps, &null_fit.params(), true).unwrap().p.unwrap();
        let k = comps.kernels()[2].matrix();
        let m = &b * k * &b * &null_fit.sigma;
        assert!((0.5 * m.trace() - res.mean).abs() <= 1e-8 * res.mean);
        assert!((0.5 * (&m * &m).trace() - res.variance).abs() <= 1e-8 * res.variance);
    }

    #[test]
    fn legacy_prefactor_leaves_pvalue_unchanged() {
        let (y, x, comps, null_fit) = composite_fixture(5);
        let a = composite_score_test(&y, &x, &comps, &null_fit, &CompositeOptions::default()).unwrap();
        let b = composite_score_test(&y, &x, &comps, &null_fit, &CompositeOptions { legacy_prefactor: true })
            .unwrap();
        assert!((a.p_value - b.p_value).abs() <= 1e-12 * a.p_value.max(1e-300));
        assert!((b.statistic * null_fit.sigma2 - a.statistic).abs() <= 1e-10 * a.statistic);
        assert!((a.nu - b.nu).abs() <= 1e-10 * a.nu);
    }

    #[test]
    fn composite_statistic_is_invariant_to_fixed_effects() {
        let (y, x, comps, null_fit) = composite_fixture(6);
        let a = composite_score_test(&y, &x, &comps, &null_fit, &CompositeOptions::default()).unwrap();
        let shifted = &y + &x * DVector::from_vec(vec![-4.0, 2.5]);
        let b = composite_score_test(&shifted, &x, &comps, &null_fit, &CompositeOptions::default()).unwrap();
        assert!((a.statistic - b.statistic).abs() <= 1e-8 * a.statistic);
        let in_span = &x * DVector::from_vec(vec![1.0, 2.0]);
        let c = composite_score_test(&in_span, &x, &comps, &null_fit, &CompositeOptions::default()).unwrap();
        assert!(c.statistic <= 1e-12 * a.statistic.max(1.0));
    }

    #[test]
    fn composite_rejects_unconverged_or_mismatched_null() {
        let (y, x, comps, null_fit) = composite_fixture(7);
        let mut bad = null_fit.clone();
        bad.converged = false;
        assert!(matches!(
            composite_score_test(&y, &x, &comps, &bad, &CompositeOptions::default()),
            Err(Error::NullFitNotConverged)
        ));
        let full = crate::mixed_model::reml_fit(&y, &x, &comps, &[], &RemlOptions::default()).unwrap();
        assert!(composite_score_test(&y, &x, &comps, &full, &CompositeOptions::default()).is_err());
    }
}
