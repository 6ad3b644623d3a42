//! Input and output documents. Matrices are written as lists of rows.

use apex_core::assignment::{UtilityMatrix, VcgOutcome};
use apex_core::hz::{EquilibriumCertificate, HzOptions, HzSolution};
use apex_core::regularized::{EtaBound, RegularizedOptimum, RegularizerParams};
use apex_core::sim::{AggregateReport, RegretReport};
use serde::{Deserialize, Serialize};

/// Input of `vcg`, `regularized`, `hz-find` and `hz-verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceDoc {
    pub u: UtilityMatrix,
    /// Bids; all ones when absent. `hz-find` uses them as the start point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prices: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budgets: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VcgDoc {
    pub lambda: Vec<f64>,
    pub outcome: VcgOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizedDoc {
    pub lambda: Vec<f64>,
    pub params: RegularizerParams,
    pub optimum: RegularizedOptimum,
    pub payments: Vec<f64>,
    pub quadratic_prices: Vec<f64>,
    pub eta: EtaBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HzFindDoc {
    pub options: HzOptions,
    pub solution: HzSolution,
    pub certificate: EquilibriumCertificate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditDoc {
    pub reports: Vec<RegretReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<AggregateReport>,
}

/// One player of one sweep run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run: usize,
    pub config: String,
    pub seed: u64,
    pub player: usize,
    pub mean_payment: f64,
    pub mean_utility: f64,
    pub strong_regret: f64,
    pub normalized_regret: f64,
    pub certificate_pass: Option<bool>,
}
