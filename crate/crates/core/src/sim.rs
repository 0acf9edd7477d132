//! Monte-Carlo battery trajectories under periodic power allocation.

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelRealization, LargeScaleState};
use crate::config::{NetworkConfig, NormSource};
use crate::eh_stats::{mean_harvested_energy, received_power, var_harvested_energy, EhCircuit, PowerAllocation};
use crate::error::{Error, Result};
use crate::markov::{energy_consumption, TransitionTriple};
use crate::power_alloc::{decide, optimized_pa, select_min_ue, PaDecision, Scheme};
use crate::rng::{stream, SimRng};

/// How harvested energy is produced each interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    /// Draw channels and apply the harvester to the received power.
    Exact,
    /// Draw from the moment-matched Gamma law of each UE's harvest.
    Gamma,
}

impl std::str::FromStr for SimMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(SimMode::Exact),
            "gamma" => Ok(SimMode::Gamma),
            _ => Err(Error::arg(format!("unknown mode '{s}'"))),
        }
    }
}

/// Battery levels of all UEs with clamping to `[0, E_f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Battery {
    pub capacity: f64,
    pub num_states: usize,
    pub energy: Vec<f64>,
    /// Energy discarded at the top bound.
    pub overflow: f64,
    /// Deficit not covered at the bottom bound.
    pub shortfall: f64,
}

impl Battery {
    pub fn new(capacity: f64, num_states: usize, energy: Vec<f64>) -> Self {
        Battery { capacity, num_states, energy, overflow: 0.0, shortfall: 0.0 }
    }

    /// Discrete state in `1..=M`.
    pub fn state_of(&self, e: f64) -> usize {
        let s = (self.num_states as f64 * e / self.capacity).ceil() as isize;
        s.clamp(1, self.num_states as isize) as usize
    }

    pub fn states(&self) -> Vec<usize> {
        self.energy.iter().map(|&e| self.state_of(e)).collect()
    }

    pub fn step(&mut self, k: usize, harvested: f64, consumed: f64) {
        let e = self.energy[k] + harvested - consumed;
        if e > self.capacity {
            self.overflow += e - self.capacity;
            self.energy[k] = self.capacity;
        } else if e < 0.0 {
            self.shortfall -= e;
            self.energy[k] = 0.0;
        } else {
            self.energy[k] = e;
        }
    }
}

/// Counts of state changes between consecutive intervals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TransitionCounts {
    pub down: u64,
    pub stay: u64,
    pub up: u64,
    /// Moves of more than one state (also counted in `up` or `down`).
    pub multi: u64,
}

impl TransitionCounts {
    pub fn record(&mut self, from: usize, to: usize) {
        match to.cmp(&from) {
            std::cmp::Ordering::Greater => self.up += 1,
            std::cmp::Ordering::Less => self.down += 1,
            std::cmp::Ordering::Equal => self.stay += 1,
        }
        if from.abs_diff(to) > 1 {
            self.multi += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.down + self.stay + self.up
    }

    pub fn merge(&self, o: &TransitionCounts) -> TransitionCounts {
        TransitionCounts {
            down: self.down + o.down,
            stay: self.stay + o.stay,
            up: self.up + o.up,
            multi: self.multi + o.multi,
        }
    }
}

/// Minimum number of logged intervals for an empirical triple.
pub const MIN_TRANSITION_SAMPLES: u64 = 10_000;

/// Normalized transition counts.
pub fn empirical_transitions(c: &TransitionCounts) -> Result<TransitionTriple> {
    let n = c.total();
    if n < MIN_TRANSITION_SAMPLES {
        return Err(Error::arg(format!("{n} transitions logged, need {MIN_TRANSITION_SAMPLES}")));
    }
    let nf = n as f64;
    TransitionTriple::from_moves(c.down as f64 / nf, c.up as f64 / nf)
}

/// Harvest bookkeeping for one PA period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeriodRecord {
    pub start_interval: u64,
    pub target_ue: usize,
    /// Lowest battery level at the start of the period, J.
    pub min_energy: f64,
    /// Energy harvested by all UEs during the period, J.
    pub sum_harvest: f64,
    /// Energy harvested by the target UE during the period, J.
    pub target_harvest: f64,
}

/// One decimated log line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub interval: u64,
    pub ue: usize,
    pub energy_j: f64,
    pub state: usize,
    pub harvested_j: f64,
    pub consumed_j: f64,
    pub scheme: Scheme,
    pub target_ue: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub scheme: Scheme,
    pub mode: SimMode,
    pub seed: u64,
    pub num_intervals: u64,
    pub initial_energies: Vec<f64>,
    pub final_energies: Vec<f64>,
    pub final_states: Vec<usize>,
    pub transitions: Vec<TransitionCounts>,
    pub harvested: Vec<f64>,
    pub consumed: Vec<f64>,
    pub overflow: f64,
    pub shortfall: f64,
    pub periods: Vec<PeriodRecord>,
    pub fallbacks: u64,
    pub solver_calls: u64,
    pub log: Vec<LogRow>,
    pub wall_clock_s: f64,
}

impl SimReport {
    pub fn transition_triples(&self) -> Result<Vec<TransitionTriple>> {
        self.transitions.iter().map(empirical_transitions).collect()
    }

    /// Transitions pooled over all UEs.
    pub fn pooled_transitions(&self) -> TransitionCounts {
        self.transitions.iter().fold(TransitionCounts::default(), |a, b| a.merge(b))
    }

    pub fn mean_sum_harvest(&self) -> f64 {
        mean(self.periods.iter().map(|p| p.sum_harvest))
    }

    pub fn mean_target_harvest(&self) -> f64 {
        mean(self.periods.iter().map(|p| p.target_harvest))
    }

    pub fn final_min_energy(&self) -> f64 {
        self.final_energies.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Lowest battery level at each PA boundary.
    pub fn min_energy_series(&self) -> Vec<f64> {
        self.periods.iter().map(|p| p.min_energy).collect()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Knobs for one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub scheme: Scheme,
    pub mode: SimMode,
    pub num_intervals: u64,
    /// Log every n-th interval; zero disables the log.
    pub log_every: u64,
}

/// Energy law of one UE under a fixed allocation in gamma mode.
#[derive(Debug, Clone, Copy)]
enum HarvestLaw {
    Fixed(f64),
    Gamma(Gamma<f64>),
}

impl HarvestLaw {
    fn new(mean: f64, var: f64) -> Self {
        if mean > 0.0 && var > 0.0 {
            if let Ok(g) = Gamma::new(mean * mean / var, var / mean) {
                return HarvestLaw::Gamma(g);
            }
        }
        HarvestLaw::Fixed(mean.max(0.0))
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            HarvestLaw::Fixed(m) => *m,
            HarvestLaw::Gamma(g) => g.sample(rng),
        }
    }
}

struct Active {
    decision: PaDecision,
    laws: Vec<HarvestLaw>,
}

fn harvest_laws(alloc: &PowerAllocation, st: &LargeScaleState, circuit: &EhCircuit) -> Result<Vec<HarvestLaw>> {
    (0..st.num_ues)
        .map(|k| {
            let m = mean_harvested_energy(k, alloc, st, circuit)?;
            let v = var_harvested_energy(k, alloc, st, circuit)?;
            Ok(HarvestLaw::new(m, v))
        })
        .collect()
}

/// Initial battery levels: the configured vector or uniform on `[0, E_f]`.
pub fn initial_energies(cfg: &NetworkConfig, rng: &mut SimRng) -> Vec<f64> {
    match &cfg.initial_energies_j {
        Some(e) => e.clone(),
        None => (0..cfg.num_ues).map(|_| rng.random::<f64>() * cfg.battery_capacity_j).collect(),
    }
}

/// Generate the large-scale state for a config and seed.
pub fn network_state(cfg: &NetworkConfig) -> Result<LargeScaleState> {
    Ok(LargeScaleState::generate(cfg, &mut stream(cfg.rng_seed, 0))?.1)
}

/// Evolve the batteries for `opts.num_intervals` coherence intervals.
pub fn run_trajectory(cfg: &NetworkConfig, opts: &RunOptions) -> Result<SimReport> {
    cfg.validate()?;
    let mut ls_rng = stream(cfg.rng_seed, 0);
    let (_, st) = LargeScaleState::generate(cfg, &mut ls_rng)?;
    run_on_state(cfg, st, opts, Some(&mut ls_rng))
}

/// Evolve the batteries over a given large-scale state. When `refresh` is
/// provided and the config asks for it, the state is redrawn each PA period.
pub fn run_on_state(
    cfg: &NetworkConfig,
    mut st: LargeScaleState,
    opts: &RunOptions,
    mut refresh: Option<&mut SimRng>,
) -> Result<SimReport> {
    if opts.num_intervals == 0 {
        return Err(Error::arg("need at least one interval"));
    }
    let started = Instant::now();
    let k_ues = cfg.num_ues;
    let circuit = cfg.circuit();
    let consumption = energy_consumption(cfg);
    let period = cfg.pa_period_intervals() as u64;
    let cacheable = !(opts.scheme == Scheme::Ccpa && cfg.ccpa_norms == NormSource::Instantaneous);

    let init = initial_energies(cfg, &mut stream(cfg.rng_seed, 1));
    let mut battery = Battery::new(cfg.battery_capacity_j, cfg.num_states, init.clone());
    let mut states = battery.states();
    let mut rng = stream(cfg.rng_seed, 2);
    let mut real = ChannelRealization::zeros(st.num_ues, st.total_antennas);

    let mut cache: HashMap<usize, Active> = HashMap::new();
    let mut active: Option<Active> = None;
    let mut transitions = vec![TransitionCounts::default(); k_ues];
    let mut harvested = vec![0.0; k_ues];
    let mut consumed = vec![0.0; k_ues];
    let mut periods: Vec<PeriodRecord> = Vec::new();
    let mut log = Vec::new();
    let mut fallbacks = 0;
    let mut solver_calls = 0;
    let mut this_harvest = vec![0.0; k_ues];

    for n in 0..opts.num_intervals {
        let boundary = n % period == 0;
        if boundary {
            if n > 0 && cfg.refresh_large_scale_per_pa {
                if let Some(r) = refresh.as_deref_mut() {
                    st = LargeScaleState::generate(cfg, r)?.1;
                    cache.clear();
                }
            }
            let target = select_min_ue(&battery.energy)?;
            if opts.mode == SimMode::Exact || !cacheable {
                st.draw_into(&mut rng, &mut real);
            }
            let reuse = if cacheable { cache.remove(&target) } else { None };
            let next = match reuse {
                Some(a) => a,
                None => {
                    let decision = decide(opts.scheme, target, &st, cfg, Some(&real))?;
                    if opts.scheme == Scheme::Opt {
                        solver_calls += 1;
                    }
                    let laws = match opts.mode {
                        SimMode::Gamma => harvest_laws(&decision.allocation, &st, &circuit)?,
                        SimMode::Exact => Vec::new(),
                    };
                    Active { decision, laws }
                }
            };
            if next.decision.fallback {
                fallbacks += 1;
            }
            if let Some(prev) = active.take() {
                if cacheable {
                    cache.insert(prev.decision.target_ue, prev);
                }
            }
            periods.push(PeriodRecord {
                start_interval: n,
                target_ue: target,
                min_energy: battery.energy[target],
                sum_harvest: 0.0,
                target_harvest: 0.0,
            });
            active = Some(next);
        } else if opts.mode == SimMode::Exact {
            st.draw_into(&mut rng, &mut real);
        }
        let act = active.as_ref().expect("decision made at the first interval");
        let alloc = &act.decision.allocation;
        match opts.mode {
            SimMode::Exact => {
                for (k, h) in this_harvest.iter_mut().enumerate() {
                    *h = circuit.energy(received_power(k, alloc, &st, &real)).max(0.0);
                }
            }
            SimMode::Gamma => {
                for (h, law) in this_harvest.iter_mut().zip(&act.laws) {
                    *h = law.sample(&mut rng);
                }
            }
        }
        let rec = periods.last_mut().expect("period opened");
        for k in 0..k_ues {
            let h = this_harvest[k];
            battery.step(k, h, consumption);
            harvested[k] += h;
            consumed[k] += consumption;
            rec.sum_harvest += h;
            if k == rec.target_ue {
                rec.target_harvest += h;
            }
            let s = battery.state_of(battery.energy[k]);
            transitions[k].record(states[k], s);
            states[k] = s;
        }
        if opts.log_every > 0 && n % opts.log_every == 0 {
            for k in 0..k_ues {
                log.push(LogRow {
                    interval: n,
                    ue: k,
                    energy_j: battery.energy[k],
                    state: states[k],
                    harvested_j: this_harvest[k],
                    consumed_j: consumption,
                    scheme: opts.scheme,
                    target_ue: rec.target_ue,
                });
            }
        }
    }

    Ok(SimReport {
        scheme: opts.scheme,
        mode: opts.mode,
        seed: cfg.rng_seed,
        num_intervals: opts.num_intervals,
        initial_energies: init,
        final_states: battery.states(),
        final_energies: battery.energy.clone(),
        transitions,
        harvested,
        consumed,
        overflow: battery.overflow,
        shortfall: battery.shortfall,
        periods,
        fallbacks,
        solver_calls,
        log,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// Per-scheme summary of a paired comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SchemeSummary {
    pub scheme: Scheme,
    pub mean_sum_harvest: f64,
    pub mean_target_harvest: f64,
    pub final_min_energy: f64,
    pub fallbacks: u64,
}

/// Run each scheme on the same seed and summarize.
pub fn scheme_comparison(
    cfg: &NetworkConfig,
    schemes: &[Scheme],
    num_intervals: u64,
    mode: SimMode,
) -> Result<Vec<SchemeSummary>> {
    schemes
        .iter()
        .map(|&scheme| {
            let r = run_trajectory(cfg, &RunOptions { scheme, mode, num_intervals, log_every: 0 })?;
            Ok(SchemeSummary {
                scheme,
                mean_sum_harvest: r.mean_sum_harvest(),
                mean_target_harvest: r.mean_target_harvest(),
                final_min_energy: r.final_min_energy(),
                fallbacks: r.fallbacks,
            })
        })
        .collect()
}

/// `H[t][k]`: mean per-interval harvest of UE `k` while the optimized
/// allocation targets UE `t`, J.
pub fn opt_harvest_matrix(cfg: &NetworkConfig, st: &LargeScaleState) -> Result<Vec<Vec<f64>>> {
    let circuit = cfg.circuit();
    (0..st.num_ues)
        .map(|t| {
            let d = optimized_pa(t, st, cfg.total_power_w, &cfg.solver)?;
            (0..st.num_ues).map(|k| mean_harvested_energy(k, &d.allocation, st, &circuit)).collect()
        })
        .collect()
}

/// Per-interval consumption at which min-UE targeting neither fills nor
/// drains the batteries on average, given a harvest matrix from
/// [`opt_harvest_matrix`].
///
/// Targeting shares `f` that equalize every UE's drift satisfy
/// `H^T f = (E^C + d) 1`, `sum f = 1`, so the neutral consumption is
/// `1 / (1^T H^{-T} 1)`. UEs with a negative share are never the minimum
/// and are removed before re-solving.
pub fn neutral_consumption(h: &[Vec<f64>]) -> Result<f64> {
    let mut members: Vec<usize> = (0..h.len()).collect();
    while !members.is_empty() {
        let n = members.len();
        let ht = nalgebra::DMatrix::from_fn(n, n, |r, c| h[members[c]][members[r]]);
        let ones = nalgebra::DVector::from_element(n, 1.0);
        let x = ht.lu().solve(&ones).ok_or_else(|| Error::Numerical("singular harvest matrix".into()))?;
        let s: f64 = x.iter().sum();
        if !(s > 0.0) {
            return Err(Error::Numerical("harvest matrix has no positive balance".into()));
        }
        match x.iter().enumerate().filter(|(_, v)| **v < 0.0).min_by(|a, b| a.1.total_cmp(b.1)) {
            Some((j, _)) => {
                members.remove(j);
            }
            None => return Ok(1.0 / s),
        }
    }
    Err(Error::Numerical("no balanced UE subset".into()))
}

/// Uplink power at which the optimized scheme is energy-neutral, W.
pub fn neutral_ul_power(cfg: &NetworkConfig, st: &LargeScaleState) -> Result<f64> {
    let ec = neutral_consumption(&opt_harvest_matrix(cfg, st)?)?;
    let tc = cfg.coherence_interval_s;
    Ok((ec - cfg.tau_p * tc * cfg.pilot_power_w) / (cfg.tau_u * tc))
}

/// Trend of a series: mean of its last quarter minus mean of the quarter
/// before it.
pub fn late_drift(series: &[f64]) -> f64 {
    let n = series.len();
    let q = n / 4;
    if q == 0 {
        return 0.0;
    }
    let last = mean(series[n - q..].iter().cloned());
    let prev = mean(series[n - 2 * q..n - q].iter().cloned());
    last - prev
}
