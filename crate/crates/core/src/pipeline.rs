//! Shared analysis steps: per-view kernels, robust centering, component
//! assembly and the composite test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::inference::{composite_score_test, CompositeOptions, TestResult};
use crate::kernels::{DataView, KernelSpec, ViewKind};
use crate::loss::{Constants, LossKind, RobustLoss, TuningPolicy};
use crate::mixed_model::{assemble_components, reml_fit, ComponentSet, MixedModelFit, RemlOptions};
use crate::robust_center::{kirwls_weights, KirwlsOptions, RobustCentering};

/// Loss selection as written in a config file. Without explicit constants
/// the kind's default data-driven tuning is used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub constants: Option<Constants>,
    pub policy: Option<TuningPolicy>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { kind: LossKind::Hampel, constants: None, policy: None }
    }
}

impl LossConfig {
    pub fn of_kind(kind: LossKind) -> Self {
        LossConfig { kind, ..Default::default() }
    }

    pub fn build(&self) -> Result<RobustLoss> {
        match self.constants {
            Some(c) => RobustLoss::new(self.kind, c, self.policy.unwrap_or(TuningPolicy::Fixed)),
            None => {
                let loss = RobustLoss::with_default_tuning(self.kind);
                match self.policy {
                    Some(p) => loss.with_policy(p),
                    None => Ok(loss),
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub genotype: KernelSpec,
    pub continuous: KernelSpec,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { genotype: KernelSpec::default_for(ViewKind::Genotype), continuous: KernelSpec::default_for(ViewKind::Continuous) }
    }
}

impl KernelConfig {
    pub fn spec_for(&self, kind: ViewKind) -> KernelSpec {
        match kind {
            ViewKind::Genotype => self.genotype,
            ViewKind::Continuous => self.continuous,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub loss: LossConfig,
    pub kirwls: KirwlsOptions,
    pub kernels: KernelConfig,
    pub reml: RemlOptions,
    pub test: CompositeOptions,
}

/// Builds the view's kernel and robust-centers it.
pub fn center_view(view: &DataView, loss: &RobustLoss, cfg: &PipelineConfig) -> Result<RobustCentering> {
    let k = cfg.kernels.spec_for(view.kind()).build(view)?;
    kirwls_weights(&k, loss, &cfg.kirwls)
}

/// Centers the three views and assembles the seven components.
pub fn prepare_components(views: [&DataView; 3], cfg: &PipelineConfig) -> Result<(ComponentSet, Vec<RobustCentering>)> {
    let loss = cfg.loss.build()?;
    let centered = views.iter().map(|v| center_view(v, &loss, cfg)).collect::<Result<Vec<_>>>()?;
    let comps = assemble_components(&centered[0].centered, &centered[1].centered, &centered[2].centered)?;
    Ok((comps, centered))
}

/// Fits the null model without the last component and tests that component.
pub fn composite_test(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    comps: &ComponentSet,
    cfg: &PipelineConfig,
) -> Result<(TestResult, MixedModelFit)> {
    let null_comps = comps.without(comps.len() - 1)?;
    let null_fit = reml_fit(y, x, &null_comps, &[], &cfg.reml)?;
    let test = composite_score_test(y, x, comps, &null_fit, &cfg.test)?;
    Ok((test, null_fit))
}
