use serde::Serialize;

use super::{project_dense, AnalyticLoss, FlowKind, FlowState};
use crate::error::{Error, Result};

/// Slack allowed for a single-step energy increase.
const MONOTONE_SLACK: f64 = 1e-10;
/// Relative tolerance of the dissipation identity `ΔE = −γ∫‖𝒱‖²`.
const IDENTITY_RTOL: f64 = 1e-4;
/// Absolute tolerance (scaled by `max(1, |E₀|)`) used when `ΔE` itself is tiny.
const IDENTITY_ATOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyRecord {
    pub t: f64,
    /// `L(W) + ½‖𝒱‖²`
    pub energy: f64,
    /// `‖𝒱‖²`
    pub mom_norm_sq: f64,
    /// `‖P(W)∇L‖_F`
    pub residual: f64,
}

pub fn energy_record(state: &FlowState, loss: &AnalyticLoss) -> Result<EnergyRecord> {
    let w = state.weight()?;
    let mom = state.momentum()?;
    let g = loss.gradient(&w)?;
    let residual = match &state.kind {
        FlowKind::Projected(p) if p.full => g.frobenius_norm(),
        _ => project_dense(&w, state.rank(), &g)?.frobenius_norm(),
    };
    let m = mom.frobenius_norm();
    let rec = EnergyRecord {
        t: state.t,
        energy: loss.value(&w)? + 0.5 * m * m,
        mom_norm_sq: m * m,
        residual,
    };
    if [rec.energy, rec.mom_norm_sq, rec.residual]
        .iter()
        .all(|x| x.is_finite())
    {
        Ok(rec)
    } else {
        Err(Error::Numeric(format!(
            "non-finite energy record at t = {}",
            rec.t
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    /// First index `i` with `E[i] > E[i−1] + slack`.
    pub first_violation: Option<usize>,
    /// `E_end − E_0`
    pub delta_energy: f64,
    /// Trapezoid rule for `∫‖𝒱‖² dt`.
    pub dissipated: f64,
    /// `|ΔE + γ∫‖𝒱‖²|`
    pub identity_defect: f64,
    /// Defect relative to `|ΔE|`, or `None` when the absolute criterion applied.
    pub identity_rel_error: Option<f64>,
    pub passed: bool,
}

impl EnergyReport {
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            return Ok(self);
        }
        let msg = match self.first_violation {
            Some(i) => format!("energy increases at record {i}"),
            None => format!(
                "dissipation identity defect {:.3e} (ΔE = {:.3e})",
                self.identity_defect, self.delta_energy
            ),
        };
        Err(Error::Verification(msg))
    }
}

/// Check `E` is nonincreasing and `E_end − E_0 = −γ∫‖𝒱‖² dt` along a trace.
pub fn verify_energy_dissipation(trace: &[EnergyRecord], gamma: f64) -> EnergyReport {
    let first_violation = trace
        .windows(2)
        .position(|w| w[1].energy > w[0].energy + MONOTONE_SLACK)
        .map(|i| i + 1);
    let (Some(first), Some(last)) = (trace.first(), trace.last()) else {
        return EnergyReport {
            first_violation: None,
            delta_energy: 0.0,
            dissipated: 0.0,
            identity_defect: 0.0,
            identity_rel_error: None,
            passed: true,
        };
    };
    let delta_energy = last.energy - first.energy;
    let dissipated: f64 = trace
        .windows(2)
        .map(|w| 0.5 * (w[1].t - w[0].t) * (w[0].mom_norm_sq + w[1].mom_norm_sq))
        .sum();
    let identity_defect = (delta_energy + gamma * dissipated).abs();
    let atol = IDENTITY_ATOL * first.energy.abs().max(1.0);
    let (identity_ok, identity_rel_error) = if delta_energy.abs() > atol {
        let rel = identity_defect / delta_energy.abs();
        (rel <= IDENTITY_RTOL, Some(rel))
    } else {
        (identity_defect <= atol, None)
    };
    EnergyReport {
        first_violation,
        delta_energy,
        dissipated,
        identity_defect,
        identity_rel_error,
        passed: first_violation.is_none() && identity_ok,
    }
}
