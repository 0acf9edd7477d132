//! Battery energy as a birth-death chain over `M` equal quanta.

use crate::config::NetworkConfig;
use crate::eh_stats::GammaFit;
use crate::error::{Error, Result};

/// Energy spent on UL training and data in one coherence interval, J.
pub fn energy_consumption(cfg: &NetworkConfig) -> f64 {
    let tc = cfg.coherence_interval_s;
    cfg.tau_p * tc * cfg.pilot_power_w + cfg.tau_u * tc * cfg.ul_power_w
}

/// `P(E_harvested <= E^C)`, i.e. the chance that the energy differential is
/// not positive.
pub fn prob_nonpositive_differential(consumption: f64, fit: &GammaFit) -> f64 {
    crate::eh_stats::harvested_energy_cdf(consumption, fit)
}

/// One-interval transition probabilities out of a state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionTriple {
    pub p_down: f64,
    pub p_stay: f64,
    pub p_up: f64,
}

impl TransitionTriple {
    pub const IDLE: TransitionTriple = TransitionTriple { p_down: 0.0, p_stay: 1.0, p_up: 0.0 };

    /// Build from the two moving probabilities; `p_stay` takes the rest.
    pub fn from_moves(p_down: f64, p_up: f64) -> Result<Self> {
        if !(p_down >= 0.0 && p_up >= 0.0 && p_down + p_up <= 1.0) {
            return Err(Error::arg(format!("invalid moves ({p_down}, {p_up})")));
        }
        Ok(TransitionTriple { p_down, p_stay: 1.0 - (p_down + p_up), p_up })
    }

    pub fn sum(&self) -> f64 {
        self.p_down + self.p_stay + self.p_up
    }
}

/// Per-UE energy bookkeeping for one allocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyLedger {
    pub consumption: f64,
    pub state_quantum: f64,
    pub mean_differential: f64,
    pub fit: GammaFit,
}

impl EnergyLedger {
    pub fn new(consumption: f64, mean_harvest: f64, fit: GammaFit, cfg: &NetworkConfig) -> Self {
        EnergyLedger {
            consumption,
            state_quantum: cfg.state_quantum_j(),
            mean_differential: mean_harvest - consumption,
            fit,
        }
    }

    /// The chain only moves one state per interval when `|E{dE}| < dE`.
    pub fn is_valid(&self) -> bool {
        self.mean_differential.abs() < self.state_quantum
    }

    pub fn triple(&self, num_states: usize, capacity: f64) -> Result<TransitionTriple> {
        transition_triple(self.mean_differential, self.consumption, &self.fit, num_states, capacity)
    }
}

/// Transition probabilities for a mean differential `mean_de`.
///
/// With `w = M |E{dE}| / E_f`: `p_stay = 1 - w`, `p_up = w P(dE > 0)`,
/// `p_down = w P(dE <= 0)`.
pub fn transition_triple(
    mean_de: f64,
    consumption: f64,
    fit: &GammaFit,
    num_states: usize,
    capacity: f64,
) -> Result<TransitionTriple> {
    if !(fit.shape > 0.0 && fit.scale > 0.0) {
        return Err(Error::arg("invalid Gamma fit"));
    }
    if !(capacity > 0.0) || num_states == 0 {
        return Err(Error::arg("capacity and number of states must be positive"));
    }
    let w = num_states as f64 * mean_de.abs() / capacity;
    if !(w < 1.0) {
        return Err(Error::ModelInvalid(format!("|E{{dE}}| spans {w} states per interval")));
    }
    let p_neg = prob_nonpositive_differential(consumption, fit);
    let p_down = w * p_neg;
    Ok(TransitionTriple { p_down, p_stay: 1.0 - w, p_up: w - p_down })
}

/// Tridiagonal row-stochastic matrix over states `0..M`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub down: Vec<f64>,
    pub stay: Vec<f64>,
    pub up: Vec<f64>,
}

/// Assemble the chain from one triple per state. At the bottom state the
/// down mass folds into staying; at the top the up mass does.
pub fn build_transition_matrix(triples: &[TransitionTriple]) -> Result<TransitionMatrix> {
    let m = triples.len();
    if m < 2 {
        return Err(Error::arg("chain needs at least two states"));
    }
    for (j, t) in triples.iter().enumerate() {
        let ok = [t.p_down, t.p_stay, t.p_up].iter().all(|p| (0.0..=1.0).contains(p));
        if !ok || (t.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::arg(format!("row {j} is not stochastic")));
        }
    }
    let mut down: Vec<f64> = triples.iter().map(|t| t.p_down).collect();
    let mut up: Vec<f64> = triples.iter().map(|t| t.p_up).collect();
    down[0] = 0.0;
    up[m - 1] = 0.0;
    let stay = (0..m).map(|j| 1.0 - (down[j] + up[j])).collect();
    Ok(TransitionMatrix { down, stay, up })
}

/// Same triple in every state.
pub fn uniform_transition_matrix(t: TransitionTriple, num_states: usize) -> Result<TransitionMatrix> {
    build_transition_matrix(&vec![t; num_states])
}

impl TransitionMatrix {
    pub fn num_states(&self) -> usize {
        self.stay.len()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let m = self.num_states();
        let mut p = vec![vec![0.0; m]; m];
        for j in 0..m {
            p[j][j] = self.stay[j];
            if j > 0 {
                p[j][j - 1] = self.down[j];
            }
            if j + 1 < m {
                p[j][j + 1] = self.up[j];
            }
        }
        p
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.num_states()).map(|j| self.down[j] + self.stay[j] + self.up[j]).collect()
    }

    /// One step `pi P`, written as mass flows so the total is preserved.
    pub fn step(&self, pi: &[f64], out: &mut [f64]) {
        let m = self.num_states();
        for j in 0..m {
            let mut v = pi[j] - pi[j] * self.up[j] - pi[j] * self.down[j];
            if j > 0 {
                v += pi[j - 1] * self.up[j - 1];
            }
            if j + 1 < m {
                v += pi[j + 1] * self.down[j + 1];
            }
            out[j] = v;
        }
    }
}

/// `pi_n = pi_0 P^n` by repeated vector-matrix products.
pub fn n_step_distribution(p: &TransitionMatrix, pi0: &[f64], n: u64) -> Result<Vec<f64>> {
    if pi0.len() != p.num_states() {
        return Err(Error::arg("distribution length differs from the number of states"));
    }
    let mut a = pi0.to_vec();
    let mut b = vec![0.0; a.len()];
    for _ in 0..n {
        p.step(&a, &mut b);
        std::mem::swap(&mut a, &mut b);
    }
    Ok(a)
}

/// Uniform initial distribution.
pub fn uniform_distribution(num_states: usize) -> Vec<f64> {
    vec![1.0 / num_states as f64; num_states]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn table_consumption() {
        let cfg = NetworkConfig::default();
        assert!((energy_consumption(&cfg) - 0.24e-6).abs() < 1e-20);
        let zero = cfg.with_ue_power(0.0);
        assert_eq!(energy_consumption(&zero), 0.0);
        let double = cfg.with_ue_power(6e-6);
        assert!((energy_consumption(&double) / energy_consumption(&cfg) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn nonpositive_probability() {
        let fit = GammaFit { shape: 1.0, scale: 0.5e-6 };
        assert_eq!(prob_nonpositive_differential(0.0, &fit), 0.0);
        assert!((prob_nonpositive_differential(1e3, &fit) - 1.0).abs() < 1e-15);
        let p = prob_nonpositive_differential(0.24e-6, &fit);
        assert!((p - (1.0 - (-0.48f64).exp())).abs() < 1e-12);
        assert!((p - 0.3812).abs() < 1e-4);
    }

    #[test]
    fn triple_normalization() {
        // P(dE <= 0) = 0.3 for this fit and consumption.
        let fit = GammaFit { shape: 1.0, scale: 1.0 };
        let ec = -(0.7f64.ln());
        let t = transition_triple(0.01, ec, &fit, 100, 100.0).unwrap();
        assert!((t.p_down - 0.003).abs() < 1e-15);
        assert!((t.p_stay - 0.99).abs() < 1e-15);
        assert!((t.p_up - 0.007).abs() < 1e-15);
        assert!((t.sum() - 1.0).abs() < 1e-15);
        let idle = transition_triple(0.0, ec, &fit, 100, 100.0).unwrap();
        assert_eq!(idle, TransitionTriple::IDLE);
    }

    #[test]
    fn oversized_differential_rejected() {
        let fit = GammaFit { shape: 1.0, scale: 1.0 };
        let err = transition_triple(-1.0, 0.5, &fit, 10, 10.0).unwrap_err();
        assert!(matches!(err, Error::ModelInvalid(_)));
        let bad = GammaFit { shape: 0.0, scale: 1.0 };
        assert!(transition_triple(0.1, 0.5, &bad, 10, 10.0).is_err());
    }

    #[test]
    fn idle_triples_give_identity() {
        let p = uniform_transition_matrix(TransitionTriple::IDLE, 5).unwrap();
        let d = p.to_dense();
        for (j, row) in d.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                assert_eq!(v, if j == c { 1.0 } else { 0.0 });
            }
        }
        let pi0 = vec![0.1, 0.2, 0.3, 0.15, 0.25];
        assert_eq!(n_step_distribution(&p, &pi0, 1000).unwrap(), pi0);
    }

    #[test]
    fn boundary_rows_clamp() {
        let t = TransitionTriple::from_moves(0.25, 0.25).unwrap();
        let d = uniform_transition_matrix(t, 3).unwrap().to_dense();
        assert_eq!(d[0], vec![0.75, 0.25, 0.0]);
        assert_eq!(d[1], vec![0.25, 0.5, 0.25]);
        assert_eq!(d[2], vec![0.0, 0.25, 0.75]);
    }

    #[test]
    fn shape_errors() {
        assert!(build_transition_matrix(&[TransitionTriple::IDLE]).is_err());
        let bad = TransitionTriple { p_down: 0.5, p_stay: 0.6, p_up: 0.0 };
        assert!(build_transition_matrix(&[bad, bad]).is_err());
        let p = uniform_transition_matrix(TransitionTriple::IDLE, 3).unwrap();
        assert!(n_step_distribution(&p, &[1.0, 0.0], 1).is_err());
        assert_eq!(n_step_distribution(&p, &[0.2, 0.3, 0.5], 0).unwrap(), vec![0.2, 0.3, 0.5]);
    }

    fn brute_force(p: &[Vec<f64>], pi0: &[f64], n: usize) -> Vec<f64> {
        let m = pi0.len();
        let mut out = vec![0.0; m];
        let mut path = vec![0usize; n + 1];
        let total = m.pow(n as u32 + 1);
        for code in 0..total {
            let mut c = code;
            for s in path.iter_mut() {
                *s = c % m;
                c /= m;
            }
            let mut w = pi0[path[0]];
            for s in 0..n {
                w *= p[path[s]][path[s + 1]];
            }
            out[path[n]] += w;
        }
        out
    }

    #[test]
    fn path_enumeration_agrees() {
        let t = TransitionTriple::from_moves(0.25, 0.25).unwrap();
        let p = uniform_transition_matrix(t, 3).unwrap();
        let pi0 = uniform_distribution(3);
        for n in [1usize, 2, 5] {
            let got = n_step_distribution(&p, &pi0, n as u64).unwrap();
            let want = brute_force(&p.to_dense(), &pi0, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-14, "n={n}");
            }
        }
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(moves in proptest::collection::vec((0.0..0.5f64, 0.0..0.5f64), 2..40)) {
            let triples: Vec<_> = moves.iter().map(|&(d, u)| TransitionTriple::from_moves(d, u).unwrap()).collect();
            let p = build_transition_matrix(&triples).unwrap();
            for s in p.row_sums() {
                prop_assert!((s - 1.0).abs() <= 1e-15);
            }
            prop_assert!(p.stay.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn mass_is_conserved(d in 0.0..0.5f64, u in 0.0..0.5f64, m in 2usize..30, n in 0u64..2000) {
            let p = uniform_transition_matrix(TransitionTriple::from_moves(d, u).unwrap(), m).unwrap();
            let pi = n_step_distribution(&p, &uniform_distribution(m), n).unwrap();
            prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(pi.iter().all(|&x| x >= 0.0));
        }

        // With the scale held, a larger shape raises the harvest and moves
        // probability from the down move to the up move.
        #[test]
        fn higher_harvest_tilts_moves_upward(
            shape in 0.5..20.0f64, bump in 0.01..5.0f64, ec in 0.05..5.0f64, w in 0.0..0.9f64,
        ) {
            let m = 100;
            let cap = 100.0;
            let lo = GammaFit { shape, scale: 1.0 };
            let hi = GammaFit { shape: shape + bump, scale: 1.0 };
            let a = transition_triple(w, ec, &lo, m, cap).unwrap();
            let b = transition_triple(w, ec, &hi, m, cap).unwrap();
            prop_assert!(b.p_up >= a.p_up - 1e-15);
            prop_assert!(b.p_down <= a.p_down + 1e-15);
        }

        #[test]
        fn triple_sums_to_one(de in -0.99..0.99f64, ec in 0.0..3.0f64, shape in 0.2..10.0f64) {
            let t = transition_triple(de, ec, &GammaFit { shape, scale: 1.0 }, 50, 50.0).unwrap();
            prop_assert!((t.sum() - 1.0).abs() <= 1e-15);
            prop_assert!(t.p_down >= 0.0 && t.p_up >= 0.0 && t.p_stay >= 0.0);
        }
    }
}
