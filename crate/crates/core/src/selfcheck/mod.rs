//! Gradient and oracle suites run by `r2d2 selfcheck`.

pub mod gradient;
pub mod oracle;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use gradient::{check_gradient, composite_checks, primitive_checks, relative_error, GradCheckConfig};
pub use oracle::{ap_oracle_stats, descriptors_at_distances, oracle_checks, rank_instance, ApOracleStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Primitive,
    Composite,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub kind: CheckKind,
    /// Accepted instances.
    pub trials: usize,
    /// Instances redrawn because most coordinates had a kink in the stencil.
    pub rejected: usize,
    /// Worst relative error (gradients) or absolute error (oracles).
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "String::is_empty", default)]
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfcheckReport {
    pub checks: Vec<CheckOutcome>,
    pub passed: bool,
    pub seconds: f64,
}

impl SelfcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Instances in the soft-AP oracle.
pub const AP_ORACLE_INSTANCES: usize = 1000;

pub fn run_selfcheck(cfg: &GradCheckConfig) -> SelfcheckReport {
    let start = Instant::now();
    let mut checks = primitive_checks(cfg);
    checks.extend(composite_checks(cfg));
    checks.extend(oracle_checks(AP_ORACLE_INSTANCES, cfg.seed));
    for c in &checks {
        log::info!(
            "{:<28} {:<9} {} value {:.3e} (tol {:.0e}, {} trials, {} redrawn)",
            c.name,
            format!("{:?}", c.kind).to_lowercase(),
            if c.passed { "ok  " } else { "FAIL" },
            c.value,
            c.tolerance,
            c.trials,
            c.rejected
        );
    }
    SelfcheckReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
        seconds: start.elapsed().as_secs_f64(),
    }
}
