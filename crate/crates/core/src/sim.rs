//! Synthetic three-view data, power estimation and ROC curves.
//!
//! The generative model:
//!
//! * view 1: genotypes, each feature drawn from `Binomial(2, maf)` with
//!   `maf ~ U(0.1, 0.4)` per feature;
//! * views 2 and 3: standard normal features;
//! * covariates `X = [1, age ~ U(40, 90), weight ~ N(70, 10^2)]` with
//!   `beta0 = (1, 0.02, 0.01)`;
//! * `y = X beta0 + a1 g1 + a2 (g12 + g23) + a3 g123 + e`, `e ~ N(0, 1)`.
//!
//! With `m_j^v` the column-centered `j`-th feature of view `v`:
//! `g1 = m_1^1 + m_2^1 + m_1^1 m_2^1`, `g12 = sum_{j<=2} m_j^1 m_j^2`,
//! `g23 = sum_{j<=2} m_j^2 m_j^3` and `g123 = sum_{j<=2} m_j^1 m_j^2 m_j^3`,
//! each standardized to zero mean and unit empirical variance.
//!
//! Contamination replaces `ceil(fraction * n)` randomly chosen outcomes by
//! `magnitude * t_1` draws.
//!
//! Replicate `r` draws from the ChaCha20 stream `r` of the configured seed,
//! so replicates never share random numbers and can run in any order.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Binomial, Cauchy, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{Error, Result};
use crate::inference::{overall_score_test, TestKind};
use crate::kernels::{DataView, ViewKind};
use crate::pipeline::{composite_test, prepare_components, PipelineConfig};

const BETA0: [f64; 3] = [1.0, 0.02, 0.01];
/// Mixed into the seed for the ROC effect-size draws.
const ROC_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Contamination {
    /// Fraction of outcomes replaced, in `[0, 0.5)`.
    pub fraction: f64,
    pub magnitude: f64,
}

impl Default for Contamination {
    fn default() -> Self {
        Contamination { fraction: 0.0, magnitude: 10.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub alphas: [f64; 3],
    pub n_features: [usize; 3],
    pub reps: usize,
    pub seed: u64,
    pub alpha_level: f64,
    pub contamination: Contamination,
    pub test: TestKind,
    pub pipeline: PipelineConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 300,
            alphas: [0.0, 0.0, 0.0],
            n_features: [4, 4, 4],
            reps: 200,
            seed: 1,
            alpha_level: 0.05,
            contamination: Contamination::default(),
            test: TestKind::Composite,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        if self.n < 10 {
            return bad(format!("n must be at least 10, got {}", self.n));
        }
        if !(self.alpha_level > 0.0 && self.alpha_level < 1.0) {
            return bad(format!("alpha_level must lie in (0, 1), got {}", self.alpha_level));
        }
        let f = self.contamination.fraction;
        if !(0.0..0.5).contains(&f) {
            return bad(format!("contamination fraction must lie in [0, 0.5), got {f}"));
        }
        if !(self.contamination.magnitude.is_finite() && self.contamination.magnitude > 0.0) {
            return bad("contamination magnitude must be positive".into());
        }
        if self.n_features.iter().any(|&p| p < 2) {
            return bad(format!("every view needs at least 2 features, got {:?}", self.n_features));
        }
        if self.alphas.iter().any(|a| !a.is_finite()) {
            return bad("effect sizes must be finite".into());
        }
        self.pipeline.loss.build()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimDataset {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub views: [DataView; 3],
    /// Indices of contaminated outcomes, ascending.
    pub contaminated: Vec<usize>,
}

fn replicate_rng(seed: u64, rep_index: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(rep_index as u64);
    rng
}

fn standardize(mut v: DVector<f64>) -> DVector<f64> {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    v.add_scalar_mut(-mean);
    let sd = (v.norm_squared() / n).sqrt();
    if sd > 0.0 {
        v /= sd;
    }
    v
}

fn centered_column(m: &DMatrix<f64>, j: usize) -> DVector<f64> {
    let c = m.column(j).into_owned();
    let mean = c.mean();
    c.add_scalar(-mean)
}

/// Draws replicate `rep_index`; a pure function of `(cfg, rep_index)`.
pub fn simulate_dataset(cfg: &SimConfig, rep_index: usize) -> Result<SimDataset> {
    cfg.validate()?;
    let mut rng = replicate_rng(cfg.seed, rep_index);
    let n = cfg.n;
    let [p1, p2, p3] = cfg.n_features;

    let mafs: Vec<f64> = (0..p1).map(|_| rng.random_range(0.1..0.4)).collect();
    let mut m1 = DMatrix::zeros(n, p1);
    for (j, &maf) in mafs.iter().enumerate() {
        let dist = Binomial::new(2, maf).expect("valid binomial");
        for i in 0..n {
            m1[(i, j)] = dist.sample(&mut rng) as f64;
        }
    }
    let mut normal_view = |p: usize| DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
    let m2: DMatrix<f64> = normal_view(p2);
    let m3: DMatrix<f64> = normal_view(p3);

    let weight = Normal::new(70.0, 10.0).expect("valid normal");
    let mut x = DMatrix::zeros(n, 3);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = rng.random_range(40.0..90.0);
        x[(i, 2)] = weight.sample(&mut rng);
    }

    let c = |m: &DMatrix<f64>, j| centered_column(m, j);
    let g1 = standardize(c(&m1, 0) + c(&m1, 1) + c(&m1, 0).component_mul(&c(&m1, 1)));
    let g12 = standardize(c(&m1, 0).component_mul(&c(&m2, 0)) + c(&m1, 1).component_mul(&c(&m2, 1)));
    let g23 = standardize(c(&m2, 0).component_mul(&c(&m3, 0)) + c(&m2, 1).component_mul(&c(&m3, 1)));
    let g123 = standardize(
        c(&m1, 0).component_mul(&c(&m2, 0)).component_mul(&c(&m3, 0))
            + c(&m1, 1).component_mul(&c(&m2, 1)).component_mul(&c(&m3, 1)),
    );

    let [a1, a2, a3] = cfg.alphas;
    let noise = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let mut y = &x * DVector::from_row_slice(&BETA0) + g1 * a1 + (g12 + g23) * a2 + g123 * a3 + noise;

    let n_bad = (cfg.contamination.fraction * n as f64).ceil() as usize;
    let mut contaminated = Vec::new();
    if n_bad > 0 {
        contaminated = rand::seq::index::sample(&mut rng, n, n_bad).into_vec();
        contaminated.sort_unstable();
        let t1 = Cauchy::new(0.0, 1.0).expect("valid cauchy");
        for &i in &contaminated {
            y[i] = cfg.contamination.magnitude * t1.sample(&mut rng);
        }
    }

    let ids = |v: usize, p: usize| (1..=p).map(|j| format!("v{v}_f{j}")).collect::<Vec<_>>();
    let views = [
        DataView::new(m1, ViewKind::Genotype, ids(1, p1))?,
        DataView::new(m2, ViewKind::Continuous, ids(2, p2))?,
        DataView::new(m3, ViewKind::Continuous, ids(3, p3))?,
    ];
    Ok(SimDataset { y, x, views, contaminated })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub rep_index: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Simulates and analyses one replicate with the configured test.
pub fn run_replicate(cfg: &SimConfig, rep_index: usize) -> Result<ReplicateOutcome> {
    let data = simulate_dataset(cfg, rep_index)?;
    let [v1, v2, v3] = &data.views;
    let (comps, _) = prepare_components([v1, v2, v3], &cfg.pipeline)?;
    let test = match cfg.test {
        TestKind::Overall => overall_score_test(&data.y, &data.x, &comps)?,
        TestKind::Composite => composite_test(&data.y, &data.x, &comps, &cfg.pipeline)?.0,
    };
    Ok(ReplicateOutcome { rep_index, statistic: test.statistic, p_value: test.p_value })
}

/// Every replicate of `cfg`, in replicate order.
pub fn run_replicates(cfg: &SimConfig) -> Result<Vec<Result<ReplicateOutcome>>> {
    cfg.validate()?;
    Ok((0..cfg.reps).into_par_iter().map(|r| run_replicate(cfg, r)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub alphas: [f64; 3],
    pub rejection_rate: f64,
    /// Replicates that produced a p-value.
    pub reps: usize,
    pub excluded: usize,
    pub standard_error: f64,
}

fn check_exclusions(failed: usize, total: usize) -> Result<()> {
    // more than 5% failed replicates invalidates the estimate
    if failed * 20 > total {
        return Err(Error::TooManyFailures { failed, total });
    }
    Ok(())
}

/// Fraction of replicates with `p <= alpha_level`.
pub fn power_from_outcomes(cfg: &SimConfig, outcomes: &[Result<ReplicateOutcome>]) -> Result<PowerRow> {
    let ok: Vec<&ReplicateOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let excluded = outcomes.len() - ok.len();
    for (r, o) in outcomes.iter().enumerate() {
        if let Err(e) = o {
            log::warn!("replicate {r} excluded: {e}");
        }
    }
    check_exclusions(excluded, outcomes.len())?;
    let reps = ok.len();
    let rejected = ok.iter().filter(|o| o.p_value <= cfg.alpha_level).count();
    let rate = rejected as f64 / reps as f64;
    Ok(PowerRow {
        alphas: cfg.alphas,
        rejection_rate: rate,
        reps,
        excluded,
        standard_error: (rate * (1.0 - rate) / reps as f64).sqrt(),
    })
}

pub fn estimate_power(cfg: &SimConfig) -> Result<PowerRow> {
    let outcomes = run_replicates(cfg)?;
    power_from_outcomes(cfg, &outcomes)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RocSettings {
    pub reps: usize,
    /// Upper end of the uniform draw for the interaction effect sizes.
    pub alpha_max: f64,
    pub step: f64,
}

impl Default for RocSettings {
    fn default() -> Self {
        RocSettings { reps: 200, alpha_max: 1.0, step: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
    pub excluded: usize,
}

/// ROC points over thresholds `0, step, 2 step, .., 1`; a replicate is
/// called positive at threshold `t > 0` when `p <= t`, and none are at `t = 0`.
/// The area is the trapezoid rule over the points.
pub fn roc_from_pvalues(labels: &[bool], pvalues: &[f64], step: f64) -> Result<RocCurve> {
    if labels.len() != pvalues.len() {
        return Err(Error::DimensionMismatch(format!("{} labels for {} p-values", labels.len(), pvalues.len())));
    }
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold step must lie in (0, 1], got {step}")));
    }
    let mut pos: Vec<f64> = labels.iter().zip(pvalues).filter(|(l, _)| **l).map(|(_, p)| *p).collect();
    let mut neg: Vec<f64> = labels.iter().zip(pvalues).filter(|(l, _)| !**l).map(|(_, p)| *p).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::InvalidArgument("ROC needs both positive and negative replicates".into()));
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let steps = (1.0 / step).round() as usize;
    let rate = |sorted: &[f64], t: f64| {
        if t <= 0.0 {
            0.0
        } else {
            sorted.partition_point(|p| *p <= t) as f64 / sorted.len() as f64
        }
    };
    let points: Vec<RocPoint> = (0..=steps)
        .map(|k| {
            let t = if k == steps { 1.0 } else { k as f64 * step };
            RocPoint { threshold: t, fpr: rate(&neg, t), tpr: rate(&pos, t) }
        })
        .collect();
    let auc = points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) * 0.5).sum();
    Ok(RocCurve { points, auc, positives: pos.len(), negatives: neg.len(), excluded: 0 })
}

/// Interaction effect size for ROC replicate `rep_index`: zero with
/// probability one half, otherwise uniform on `(0, alpha_max)`.
pub fn roc_effect(seed: u64, rep_index: usize, alpha_max: f64) -> f64 {
    let mut rng = replicate_rng(seed ^ ROC_SALT, rep_index);
    if rng.random_bool(0.5) {
        0.0
    } else {
        rng.random_range(0.0..1.0) * alpha_max
    }
}

/// ROC of the configured test on replicates with `alphas = (1, a, a)`, where
/// `a` is drawn by [`roc_effect`] and replicates with `a > 0` are positives.
/// `cfg.alphas` and `cfg.reps` are ignored.
pub fn roc_curve(cfg: &SimConfig, settings: &RocSettings) -> Result<RocCurve> {
    cfg.validate()?;
    if settings.reps == 0 || !(settings.alpha_max > 0.0) {
        return Err(Error::InvalidArgument("ROC needs reps >= 1 and a positive alpha_max".into()));
    }
    let outcomes: Vec<(bool, Result<ReplicateOutcome>)> = (0..settings.reps)
        .into_par_iter()
        .map(|r| {
            let a = roc_effect(cfg.seed, r, settings.alpha_max);
            let mut rep_cfg = cfg.clone();
            rep_cfg.alphas = [1.0, a, a];
            (a > 0.0, run_replicate(&rep_cfg, r))
        })
        .collect();
    let mut labels = Vec::new();
    let mut pvalues = Vec::new();
    let mut excluded = 0;
    for (r, (label, o)) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                labels.push(label);
                pvalues.push(o.p_value);
            }
            Err(e) => {
                log::warn!("ROC replicate {r} excluded: {e}");
                excluded += 1;
            }
        }
    }
    check_exclusions(excluded, settings.reps)?;
    let mut curve = roc_from_pvalues(&labels, &pvalues, settings.step)?;
    curve.excluded = excluded;
    Ok(curve)
}

/// A power grid over effect sizes plus an optional ROC run, as read from a
/// `simulate` config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub sim: SimConfig,
    pub alpha_grid: Vec<[f64; 3]>,
    pub roc: Option<RocSettings>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            sim: SimConfig::default(),
            alpha_grid: vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.5], [0.0, 0.0, 1.0]],
            roc: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub power: Vec<PowerRow>,
    pub roc: Option<RocCurve>,
}

pub fn run_study(study: &StudyConfig) -> Result<StudyResult> {
    let power = study
        .alpha_grid
        .iter()
        .map(|alphas| {
            let mut cfg = study.sim.clone();
            cfg.alphas = *alphas;
            estimate_power(&cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let roc = study.roc.as_ref().map(|s| roc_curve(&study.sim, s)).transpose()?;
    Ok(StudyResult { power, roc })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub roc_seed: u64,
    pub reps: usize,
    pub files: Vec<String>,
    pub config: StudyConfig,
}

/// Writes `power.tsv`, `roc.tsv` (when a ROC was run) and `manifest.json`.
pub fn write_study(study: &StudyConfig, result: &StudyResult, out_dir: &Path) -> Result<StudyManifest> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = vec!["power.tsv".to_string()];
    let mut power = std::io::BufWriter::new(std::fs::File::create(out_dir.join("power.tsv"))?);
    writeln!(power, "alpha1\talpha2\talpha3\treps\texcluded\trejection_rate\tstandard_error")?;
    for row in &result.power {
        let [a1, a2, a3] = row.alphas;
        writeln!(
            power,
            "{a1}\t{a2}\t{a3}\t{}\t{}\t{:.6}\t{:.6}",
            row.reps, row.excluded, row.rejection_rate, row.standard_error
        )?;
    }
    power.flush()?;
    if let Some(roc) = &result.roc {
        files.push("roc.tsv".to_string());
        let mut out = std::io::BufWriter::new(std::fs::File::create(out_dir.join("roc.tsv"))?);
        writeln!(out, "threshold\tfpr\ttpr")?;
        for p in &roc.points {
            writeln!(out, "{:.6}\t{:.6}\t{:.6}", p.threshold, p.fpr, p.tpr)?;
        }
        out.flush()?;
    }
    files.push("manifest.json".to_string());
    let manifest = StudyManifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash(study)?,
        seed: study.sim.seed,
        roc_seed: study.sim.seed ^ ROC_SALT,
        reps: study.sim.reps,
        files,
        config: study.clone(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(out_dir.join("manifest.json"), json)?;
    Ok(manifest)
}
