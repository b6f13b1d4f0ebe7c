//! Replica sizing: how likely a VM is down, how likely all replicas are down
//! at once, how many replicas a target failure probability needs, and what
//! each deployment plan costs per hour.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SizingError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn invalid(msg: impl Into<String>) -> SizingError {
    SizingError::InvalidArgument(msg.into())
}

/// Mean time between failures and mean downtime per failure, in the same unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VmFailureParams {
    pub mean_uptime: f64,
    pub mean_recovery: f64,
}

impl VmFailureParams {
    pub fn new(mean_uptime: f64, mean_recovery: f64) -> Result<Self, SizingError> {
        let p = Self {
            mean_uptime,
            mean_recovery,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<(), SizingError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.mean_uptime) || !ok(self.mean_recovery) {
            return Err(invalid(format!(
                "uptime and recovery must be positive and finite (got {} and {})",
                self.mean_uptime, self.mean_recovery
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizingResult {
    pub p_vm: f64,
    pub p_system: f64,
    pub n_required: u64,
}

/// Fraction of time a VM is down: recovery / (uptime + recovery).
pub fn vm_failure_probability(params: VmFailureParams) -> Result<f64, SizingError> {
    params.validate()?;
    Ok(params.mean_recovery / (params.mean_uptime + params.mean_recovery))
}

/// Probability that every replica is down at once, assuming independence.
pub fn system_failure_probability(per_vm: &[f64]) -> Result<f64, SizingError> {
    if per_vm.is_empty() {
        return Err(invalid("at least one replica is required"));
    }
    if let Some(bad) = per_vm.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(invalid(format!("{bad} is not a probability")));
    }
    Ok(per_vm.iter().product())
}

/// Relative slack under which `p_vm^n` counts as meeting the target.
const TIE_TOLERANCE: f64 = 1e-12;

fn meets(power: f64, target: f64) -> bool {
    power <= target * (1.0 + TIE_TOLERANCE)
}

/// Smallest `n` with `p_vm^n <= p_target`, i.e. `ceil(ln p_target / ln p_vm)`.
pub fn required_replicas(p_vm: f64, p_target: f64) -> Result<u64, SizingError> {
    if !(p_vm > 0.0 && p_vm < 1.0) {
        return Err(invalid(format!(
            "per-VM failure probability must be in (0, 1), got {p_vm}"
        )));
    }
    if !(p_target > 0.0 && p_target < 1.0) {
        return Err(invalid(format!(
            "target failure probability must be in (0, 1), got {p_target}"
        )));
    }
    if p_target >= p_vm {
        return Ok(1);
    }
    let estimate = (p_target.ln() / p_vm.ln()).ceil().max(1.0);
    if estimate > 1e12 {
        return Err(invalid("target needs an unreasonable number of replicas"));
    }
    let mut n = estimate as u64;
    // The logarithm can land one off at exact powers; settle on the powers.
    while !meets(p_vm.powf(n as f64), p_target) {
        n += 1;
    }
    while n > 1 && meets(p_vm.powf((n - 1) as f64), p_target) {
        n -= 1;
    }
    Ok(n)
}

/// Per-VM and system failure probability plus the replica count for a target.
pub fn plan_replicas(params: VmFailureParams, p_target: f64) -> Result<SizingResult, SizingError> {
    let p_vm = vm_failure_probability(params)?;
    let n_required = required_replicas(p_vm, p_target)?;
    let p_system = system_failure_probability(&vec![p_vm; n_required as usize])?;
    Ok(SizingResult {
        p_vm,
        p_system,
        n_required,
    })
}

/// One deployment option and the hourly prices of its machines.
#[derive(Clone, Debug, PartialEq)]
pub struct CostPlan {
    pub name: String,
    pub hourlies: Vec<f64>,
}

impl CostPlan {
    pub fn new(name: impl Into<String>, hourlies: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            hourlies,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub name: String,
    pub hourly_total: f64,
    /// Hourly total divided by the cheapest plan's total.
    pub ratio: f64,
}

pub fn compare_plans(plans: &[CostPlan]) -> Result<Vec<CostRow>, SizingError> {
    if plans.is_empty() {
        return Err(invalid("no plans to compare"));
    }
    for plan in plans {
        if plan.hourlies.is_empty() {
            return Err(invalid(format!("plan {} has no machines", plan.name)));
        }
        if let Some(bad) = plan.hourlies.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(invalid(format!("price {bad} in plan {} is not positive", plan.name)));
        }
    }
    let totals: Vec<f64> = plans.iter().map(|p| p.hourlies.iter().sum()).collect();
    let cheapest = totals.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(plans
        .iter()
        .zip(totals)
        .map(|(plan, total)| CostRow {
            name: plan.name.clone(),
            hourly_total: total,
            ratio: total / cheapest,
        })
        .collect())
}

/// A single machine against a replicated deployment.
pub fn cost_compare(single_hourly: f64, replica_hourlies: &[f64]) -> Result<Vec<CostRow>, SizingError> {
    compare_plans(&[
        CostPlan::new("single", vec![single_hourly]),
        CostPlan::new("replicated", replica_hourlies.to_vec()),
    ])
}
