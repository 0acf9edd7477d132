//! Downlink power allocation schemes.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelRealization, LargeScaleState};
use crate::config::{NetworkConfig, NormSource};
use crate::eh_stats::PowerAllocation;
use crate::error::{Error, Result};
use crate::socp::{build_problem, SolveReport, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Same coefficient on every UE and AP.
    Fpc,
    /// Budget split equally over the APs, all to the target UE.
    Epa,
    /// Budget split in proportion to the target's estimate norms.
    Ccpa,
    /// Interior-point optimum of the min-UE objective.
    Opt,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Fpc, Scheme::Epa, Scheme::Ccpa, Scheme::Opt];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Fpc => "fpc",
            Scheme::Epa => "epa",
            Scheme::Ccpa => "ccpa",
            Scheme::Opt => "opt",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fpc" => Ok(Scheme::Fpc),
            "epa" => Ok(Scheme::Epa),
            "ccpa" => Ok(Scheme::Ccpa),
            "opt" => Ok(Scheme::Opt),
            _ => Err(Error::arg(format!("unknown scheme '{s}'"))),
        }
    }
}

/// Outcome of one PA period.
#[derive(Debug, Clone)]
pub struct PaDecision {
    pub scheme: Scheme,
    pub target_ue: usize,
    pub allocation: PowerAllocation,
    pub solver_report: Option<SolveReport>,
    /// The optimizer did not converge and CCPA was used instead.
    pub fallback: bool,
}

/// Index of the lowest battery; ties go to the lowest index.
pub fn select_min_ue(energies: &[f64]) -> Result<usize> {
    if energies.is_empty() {
        return Err(Error::arg("no UEs to choose from"));
    }
    let mut best = 0;
    for (k, &e) in energies.iter().enumerate() {
        if e < energies[best] {
            best = k;
        }
    }
    Ok(best)
}

/// Full power control: `p / (K L)` on every coefficient.
pub fn fpc(st: &LargeScaleState, total_power: f64) -> Result<PowerAllocation> {
    if !(total_power >= 0.0) {
        return Err(Error::arg("total power must be non-negative"));
    }
    let n = st.num_ues * st.num_aps;
    Ok(PowerAllocation {
        num_ues: st.num_ues,
        num_aps: st.num_aps,
        omega: vec![total_power / n as f64; n],
    })
}

/// Equal per-AP split to the target UE.
pub fn epa(k: usize, num_ues: usize, num_aps: usize, total_power: f64) -> Result<PowerAllocation> {
    if k >= num_ues {
        return Err(Error::IndexOutOfRange(format!("UE {k}")));
    }
    let mut a = PowerAllocation::zeros(num_ues, num_aps);
    for l in 0..num_aps {
        a.set(k, l, total_power / num_aps as f64);
    }
    Ok(a)
}

/// Split in proportion to `norms` (one per AP), all to the target UE.
pub fn ccpa(k: usize, norms: &[f64], num_ues: usize, total_power: f64) -> Result<PowerAllocation> {
    if k >= num_ues {
        return Err(Error::IndexOutOfRange(format!("UE {k}")));
    }
    if norms.iter().any(|n| !(*n >= 0.0)) {
        return Err(Error::arg("estimate norms must be non-negative"));
    }
    let s: f64 = norms.iter().sum();
    if !(s > 0.0) {
        return Err(Error::arg("all channel estimates are zero"));
    }
    let mut a = PowerAllocation::zeros(num_ues, norms.len());
    for (l, n) in norms.iter().enumerate() {
        a.set(k, l, n / s * total_power);
    }
    Ok(a)
}

/// `||ghat_kl||` for each AP in one realization.
pub fn estimate_norms(st: &LargeScaleState, real: &ChannelRealization, k: usize) -> Vec<f64> {
    (0..st.num_aps).map(|l| real.estimate_norm(st, k, l)).collect()
}

/// `sqrt(N_l (varsigma_kl + gamma_kl))` for each AP.
pub fn expected_norms(st: &LargeScaleState, k: usize) -> Vec<f64> {
    (0..st.num_aps).map(|l| st.expected_estimate_norm(k, l)).collect()
}

/// Solve the cone program for target `k`. A non-converged solve falls back
/// to CCPA on the expected norms.
pub fn optimized_pa(k: usize, st: &LargeScaleState, total_power: f64, opts: &SolverOptions) -> Result<PaDecision> {
    let problem = build_problem(k, st, total_power)?;
    let sol = problem.solve(opts)?;
    if sol.report.converged {
        return Ok(PaDecision {
            scheme: Scheme::Opt,
            target_ue: k,
            allocation: sol.allocation,
            solver_report: Some(sol.report),
            fallback: false,
        });
    }
    let allocation = ccpa(k, &expected_norms(st, k), st.num_ues, total_power)?;
    Ok(PaDecision { scheme: Scheme::Opt, target_ue: k, allocation, solver_report: Some(sol.report), fallback: true })
}

/// Run `scheme` for target `k`. `real` supplies instantaneous estimates for
/// CCPA when the config asks for them.
pub fn decide(
    scheme: Scheme,
    k: usize,
    st: &LargeScaleState,
    cfg: &NetworkConfig,
    real: Option<&ChannelRealization>,
) -> Result<PaDecision> {
    let p = cfg.total_power_w;
    let plain = |allocation| PaDecision { scheme, target_ue: k, allocation, solver_report: None, fallback: false };
    match scheme {
        Scheme::Fpc => Ok(plain(fpc(st, p)?)),
        Scheme::Epa => Ok(plain(epa(k, st.num_ues, st.num_aps, p)?)),
        Scheme::Ccpa => {
            let norms = match (cfg.ccpa_norms, real) {
                (NormSource::Instantaneous, Some(r)) => estimate_norms(st, r, k),
                _ => expected_norms(st, k),
            };
            Ok(plain(ccpa(k, &norms, st.num_ues, p)?))
        }
        Scheme::Opt => optimized_pa(k, st, p, &cfg.solver),
    }
}
