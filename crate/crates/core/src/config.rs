//! Scenario constants.

use serde::{Deserialize, Serialize};

use crate::eh_stats::EhCircuit;
use crate::error::{Error, Result};
use crate::socp::SolverOptions;

/// Logistic harvester constants as they appear in a config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EhParams {
    /// Steepness, 1/W.
    pub a: f64,
    /// Turn-on threshold, W.
    pub b: f64,
    /// Saturated DC output, W.
    pub i_max: f64,
}

impl Default for EhParams {
    fn default() -> Self {
        EhParams { a: 150.0, b: 0.014, i_max: 0.024 }
    }
}

/// Which estimate norms drive the channel-proportional heuristic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSource {
    /// Norms of the estimate drawn in the interval at the PA boundary.
    Instantaneous,
    /// Expected norms `sqrt(N (varsigma + gamma))`.
    Expected,
}

/// All scenario constants. Missing JSON fields take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub num_aps: usize,
    pub antennas_per_ap: usize,
    /// When set, this many antennas are spread over the APs and
    /// `antennas_per_ap` is ignored. Remainders go to randomly chosen APs.
    pub total_antennas: Option<usize>,
    pub num_ues: usize,
    pub area_side_m: f64,
    pub ap_height_m: f64,
    pub ue_height_m: f64,
    pub carrier_freq_mhz: f64,
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
    pub coherence_interval_s: f64,
    pub samples_per_interval: usize,
    pub tau_p: f64,
    pub tau_h: f64,
    pub tau_d: f64,
    pub tau_u: f64,
    pub pilot_power_w: f64,
    pub ul_power_w: f64,
    pub total_power_w: f64,
    pub shadowing_std_db: f64,
    /// Apply log-normal shadowing beyond the far breakpoint.
    pub shadowing: bool,
    /// Constant linear Ricean factor overriding the distance model.
    pub ricean_factor: Option<f64>,
    pub battery_capacity_j: f64,
    pub num_states: usize,
    pub pa_period_s: f64,
    pub eh_circuit: EhParams,
    pub ccpa_norms: NormSource,
    pub refresh_large_scale_per_pa: bool,
    /// Fixed initial battery levels; uniform on `[0, E_f]` when absent.
    pub initial_energies_j: Option<Vec<f64>>,
    pub solver: SolverOptions,
    pub rng_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_aps: 4,
            antennas_per_ap: 72,
            total_antennas: None,
            num_ues: 20,
            area_side_m: 100.0,
            ap_height_m: 15.0,
            ue_height_m: 1.65,
            carrier_freq_mhz: 1900.0,
            bandwidth_hz: 20e6,
            noise_figure_db: 9.0,
            coherence_interval_s: 0.2,
            samples_per_interval: 200,
            tau_p: 0.1,
            tau_h: 0.3,
            tau_d: 0.3,
            tau_u: 0.3,
            pilot_power_w: 3e-6,
            ul_power_w: 3e-6,
            total_power_w: 10.0,
            shadowing_std_db: 8.0,
            shadowing: true,
            ricean_factor: None,
            battery_capacity_j: 0.1,
            num_states: 2000,
            pa_period_s: 2.0,
            eh_circuit: EhParams::default(),
            ccpa_norms: NormSource::Instantaneous,
            refresh_large_scale_per_pa: false,
            initial_energies_j: None,
            solver: SolverOptions::default(),
            rng_seed: 1,
        }
    }
}

/// Scale presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

/// Uplink power of the desk preset, W. Chosen near the point where the
/// network-wide harvest under the optimized scheme balances consumption.
pub const DESK_UL_POWER_W: f64 = 1.75e-8;

impl NetworkConfig {
    /// The full-scale parameter set.
    pub fn paper() -> Self {
        Self::default()
    }

    /// A reduced scenario that runs end-to-end in seconds: 32 antennas in
    /// total, 5 UEs, 200 battery states. Powers and capacity are scaled to
    /// the much weaker desk-scale harvest.
    pub fn desk() -> Self {
        NetworkConfig {
            num_aps: 4,
            antennas_per_ap: 8,
            total_antennas: Some(32),
            num_ues: 5,
            num_states: 200,
            pilot_power_w: DESK_UL_POWER_W,
            ul_power_w: DESK_UL_POWER_W,
            battery_capacity_j: 2.0e-5,
            ..Self::default()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Parse a JSON document and validate it.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = serde_json::from_str(text)
            .map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Check ranges; the first offending field is reported.
    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(name, format!("must be positive, got {v}")))
            }
        }
        fn non_negative(name: &str, v: f64) -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(name, format!("must be non-negative, got {v}")))
            }
        }
        fn fraction(name: &str, v: f64) -> Result<()> {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(name, format!("must lie in (0,1), got {v}")))
            }
        }
        if self.num_aps == 0 {
            return Err(Error::config("num_aps", "must be at least 1"));
        }
        if self.num_ues == 0 {
            return Err(Error::config("num_ues", "must be at least 1"));
        }
        match self.total_antennas {
            Some(t) if t < self.num_aps => {
                return Err(Error::config("total_antennas", "must give every AP an antenna"))
            }
            None if self.antennas_per_ap == 0 => {
                return Err(Error::config("antennas_per_ap", "must be at least 1"))
            }
            _ => {}
        }
        if self.samples_per_interval == 0 {
            return Err(Error::config("samples_per_interval", "must be at least 1"));
        }
        if self.num_states < 2 {
            return Err(Error::config("num_states", "must be at least 2"));
        }
        positive("area_side_m", self.area_side_m)?;
        positive("ap_height_m", self.ap_height_m)?;
        positive("ue_height_m", self.ue_height_m)?;
        positive("carrier_freq_mhz", self.carrier_freq_mhz)?;
        positive("bandwidth_hz", self.bandwidth_hz)?;
        positive("coherence_interval_s", self.coherence_interval_s)?;
        fraction("tau_p", self.tau_p)?;
        fraction("tau_h", self.tau_h)?;
        fraction("tau_d", self.tau_d)?;
        fraction("tau_u", self.tau_u)?;
        let sum = self.tau_p + self.tau_h + self.tau_d + self.tau_u;
        if sum > 1.0 + 1e-12 {
            return Err(Error::config("tau_p", format!("phase fractions sum to {sum} > 1")));
        }
        non_negative("pilot_power_w", self.pilot_power_w)?;
        non_negative("ul_power_w", self.ul_power_w)?;
        positive("total_power_w", self.total_power_w)?;
        non_negative("shadowing_std_db", self.shadowing_std_db)?;
        if let Some(kf) = self.ricean_factor {
            non_negative("ricean_factor", kf)?;
        }
        positive("battery_capacity_j", self.battery_capacity_j)?;
        positive("pa_period_s", self.pa_period_s)?;
        positive("eh_circuit.a", self.eh_circuit.a)?;
        positive("eh_circuit.b", self.eh_circuit.b)?;
        positive("eh_circuit.i_max", self.eh_circuit.i_max)?;
        if let Some(e) = &self.initial_energies_j {
            if e.len() != self.num_ues {
                return Err(Error::config("initial_energies_j", "length must equal num_ues"));
            }
            if e.iter().any(|&x| !(0.0..=self.battery_capacity_j).contains(&x)) {
                return Err(Error::config("initial_energies_j", "entries must lie in [0, E_f]"));
            }
        }
        self.solver.validate()?;
        Ok(())
    }

    /// Antennas in the whole network.
    pub fn total_antenna_count(&self) -> usize {
        self.total_antennas.unwrap_or(self.num_aps * self.antennas_per_ap)
    }

    /// Pilot length in symbols.
    pub fn pilot_len(&self) -> usize {
        ((self.tau_p * self.samples_per_interval as f64).round() as usize).max(1)
    }

    /// Coherence intervals per PA period.
    pub fn pa_period_intervals(&self) -> usize {
        ((self.pa_period_s / self.coherence_interval_s).round() as usize).max(1)
    }

    /// Duration of the energy harvesting phase, s.
    pub fn harvest_duration_s(&self) -> f64 {
        self.tau_h * self.coherence_interval_s
    }

    /// Thermal noise power, W.
    pub fn noise_power_w(&self) -> f64 {
        let dbm = -174.0 + 10.0 * self.bandwidth_hz.log10() + self.noise_figure_db;
        10f64.powf((dbm - 30.0) / 10.0)
    }

    /// Battery quantum `E_f / M`, J.
    pub fn state_quantum_j(&self) -> f64 {
        self.battery_capacity_j / self.num_states as f64
    }

    pub fn circuit(&self) -> EhCircuit {
        EhCircuit::new(
            self.eh_circuit.a,
            self.eh_circuit.b,
            self.eh_circuit.i_max,
            self.harvest_duration_s(),
        )
    }

    /// Copy with pilot and uplink power both set to `p`.
    pub fn with_ue_power(&self, p: f64) -> Self {
        NetworkConfig { pilot_power_w: p, ul_power_w: p, ..self.clone() }
    }
}
