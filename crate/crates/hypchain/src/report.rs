//! Serializable run reports and the pipeline manifest.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::reduction::ReducedCoefficients;
use crate::spectral::ControllabilityReport;
use crate::synthesis::ResidualReport;

#[derive(Debug, Clone, Serialize)]
pub struct KernelReport {
    pub resolution: usize,
    pub condition_violation_sup: f64,
    pub transform_condition: f64,
    /// `(kernel, sup, mean)` interior PDE residuals.
    pub pde_residuals: Vec<(String, f64, f64)>,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReductionReport {
    pub coefficients: ReducedCoefficients,
    pub n_support: f64,
    pub n_sup: f64,
    pub m_tilde_support: f64,
    pub m_tilde_sup: f64,
    pub input_delay_padding: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectrumReport {
    pub principal_margin: f64,
    pub certified_upper_bound: f64,
    pub controllability: ControllabilityReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthesisReport {
    pub unknowns: usize,
    pub condition: f64,
    pub residuals: ResidualReport,
    pub spectral_identity_sup: f64,
    pub gain_sup: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationReport {
    pub dt: f64,
    pub steps: usize,
    pub final_norm: f64,
    pub decay_rate: f64,
    pub fit_r2: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StageInfo {
    pub key: String,
    pub seconds: f64,
    pub artifacts: Vec<String>,
    pub cache_hit: bool,
}

/// Stage bookkeeping written next to the artifacts: a stage re-runs only
/// when its upstream hash key changes.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PipelineManifest {
    pub config_hash: String,
    pub stages: BTreeMap<String, StageInfo>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub index: usize,
    pub name: String,
    pub pass: bool,
    pub details: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {}: {} [{:.1}s] {} - {}",
            self.index,
            if self.pass { "PASS" } else { "FAIL" },
            self.seconds,
            self.name,
            self.details
        )
    }

}
