//! Statistics of received RF power and non-linearly harvested energy.

use num_complex::Complex64;

use crate::channel::{ChannelRealization, LargeScaleState};
use crate::error::{Error, Result};
use crate::moments::received_power_moments;
use crate::special::reg_lower_gamma;
use rand::Rng;

/// Downlink power coefficients `Omega[i * L + l]`, W.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation {
    pub num_ues: usize,
    pub num_aps: usize,
    pub omega: Vec<f64>,
}

impl PowerAllocation {
    pub fn zeros(num_ues: usize, num_aps: usize) -> Self {
        PowerAllocation { num_ues, num_aps, omega: vec![0.0; num_ues * num_aps] }
    }

    pub fn from_vec(num_ues: usize, num_aps: usize, omega: Vec<f64>) -> Result<Self> {
        if omega.len() != num_ues * num_aps {
            return Err(Error::arg("allocation must have K*L entries"));
        }
        Ok(PowerAllocation { num_ues, num_aps, omega })
    }

    #[inline]
    pub fn get(&self, i: usize, l: usize) -> f64 {
        self.omega[i * self.num_aps + l]
    }

    #[inline]
    pub fn set(&mut self, i: usize, l: usize, v: f64) {
        self.omega[i * self.num_aps + l] = v;
    }

    pub fn total(&self) -> f64 {
        self.omega.iter().sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        PowerAllocation { omega: self.omega.iter().map(|x| x * c).collect(), ..self.clone() }
    }

    /// Non-negative entries summing to at most `budget` (with slack `tol`).
    pub fn check(&self, budget: f64, tol: f64) -> Result<()> {
        if self.omega.iter().any(|&x| !(x >= -tol)) {
            return Err(Error::arg("negative power coefficient"));
        }
        if self.total() > budget + tol {
            return Err(Error::arg(format!("allocation total {} exceeds budget {budget}", self.total())));
        }
        Ok(())
    }

    fn ensure_shape(&self, st: &LargeScaleState) -> Result<()> {
        if self.num_ues != st.num_ues || self.num_aps != st.num_aps {
            return Err(Error::arg("allocation shape does not match the network"));
        }
        if self.omega.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::arg("power coefficients must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Logistic energy harvester.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EhCircuit {
    pub a: f64,
    pub b: f64,
    pub i_max: f64,
    /// Length of the harvesting phase, s.
    pub harvest_duration: f64,
    /// Zero-input response `1 / (1 + e^{ab})`.
    pub phi: f64,
    /// `I_max / (1 - phi)`.
    pub psi: f64,
}

impl EhCircuit {
    pub fn new(a: f64, b: f64, i_max: f64, harvest_duration: f64) -> Self {
        let phi = 1.0 / (1.0 + (a * b).exp());
        EhCircuit { a, b, i_max, harvest_duration, phi, psi: i_max / (1.0 - phi) }
    }

    /// `Lambda(I) = 1 / (1 + e^{-a (I - b)})`.
    pub fn logistic(&self, i: f64) -> f64 {
        1.0 / (1.0 + (-self.a * (i - self.b)).exp())
    }

    /// First derivative `a Lambda (1 - Lambda)`.
    pub fn logistic_d1(&self, i: f64) -> f64 {
        let l = self.logistic(i);
        self.a * l * (1.0 - l)
    }

    /// Second derivative `a^2 Lambda (1 - Lambda)(1 - 2 Lambda)`.
    pub fn logistic_d2(&self, i: f64) -> f64 {
        let l = self.logistic(i);
        self.a * self.a * l * (1.0 - l) * (1.0 - 2.0 * l)
    }

    /// Energy harvested in one interval from received power `i`, J.
    pub fn energy(&self, i: f64) -> f64 {
        self.harvest_duration * self.psi * (self.logistic(i) - self.phi)
    }
}

/// Mean coefficient `Xi_{ik,ll'} = E{ (g_kl^T conj(ghat_il)) conj(g_kl'^T conj(ghat_il')) }`
/// (real part).
///
/// The coherent branch is `|m_l|^2 + N_l (varsigma_kl gamma_il + beta_kl varsigma_il + beta_kl gamma_il)`
/// and the non-coherent branch `Re(m_l conj(m_l'))`, where
/// `m_l = N_l (zeta_ik,l omega_ik,l + alpha_ik,l gamma_kl)` is the mean of the
/// inner product.
pub fn xi_term(i: usize, k: usize, l: usize, lp: usize, st: &LargeScaleState) -> Result<f64> {
    if i >= st.num_ues || k >= st.num_ues || l >= st.num_aps || lp >= st.num_aps {
        return Err(Error::IndexOutOfRange(format!("xi({i},{k},{l},{lp})")));
    }
    let m = |l: usize| {
        let n = st.antennas[l] as f64;
        (st.omega(i, k, l) * st.los_cross(i, k, l) + st.alpha(i, k, l) * st.gamma[st.idx(k, l)]) * n
    };
    if l == lp {
        let (jk, ji) = (st.idx(k, l), st.idx(i, l));
        let n = st.antennas[l] as f64;
        let diffuse = st.varsigma[jk] * st.gamma[ji] + st.beta[jk] * (st.varsigma[ji] + st.gamma[ji]);
        Ok(m(l).norm_sqr() + n * diffuse)
    } else {
        Ok((m(l) * m(lp).conj()).re)
    }
}

fn weight(st: &LargeScaleState, alloc: &PowerAllocation, i: usize, l: usize) -> f64 {
    st.kappa[st.idx(i, l)] * alloc.get(i, l).sqrt()
}

/// `E{I_k}` from the `Xi` coefficients, W.
pub fn mean_received_power(k: usize, alloc: &PowerAllocation, st: &LargeScaleState) -> Result<f64> {
    alloc.ensure_shape(st)?;
    if k >= st.num_ues {
        return Err(Error::IndexOutOfRange(format!("UE {k}")));
    }
    let mut s = 0.0;
    for i in 0..st.num_ues {
        for l in 0..st.num_aps {
            let wl = weight(st, alloc, i, l);
            if wl == 0.0 {
                continue;
            }
            for lp in 0..st.num_aps {
                let wlp = weight(st, alloc, i, lp);
                if wlp != 0.0 {
                    s += wl * wlp * xi_term(i, k, l, lp, st)?;
                }
            }
        }
    }
    Ok(s.max(0.0))
}

/// `V{I_k}`, exact second-order statistics including all cross-UE and
/// cross-AP covariances, W^2.
pub fn var_received_power(k: usize, alloc: &PowerAllocation, st: &LargeScaleState) -> Result<f64> {
    alloc.ensure_shape(st)?;
    if k >= st.num_ues {
        return Err(Error::IndexOutOfRange(format!("UE {k}")));
    }
    Ok(received_power_moments(k, alloc, st).var)
}

/// Term-wise variance: a weighted sum of per-(i, l, l') variances with the
/// coherent and non-coherent `Upsilon` coefficients, ignoring covariances
/// between different terms. Kept for comparison with the exact form.
pub fn var_received_power_termwise(k: usize, alloc: &PowerAllocation, st: &LargeScaleState) -> Result<f64> {
    alloc.ensure_shape(st)?;
    if k >= st.num_ues {
        return Err(Error::IndexOutOfRange(format!("UE {k}")));
    }
    let mut s = 0.0;
    for i in 0..st.num_ues {
        for l in 0..st.num_aps {
            for lp in 0..st.num_aps {
                let w = (weight(st, alloc, i, l) * weight(st, alloc, i, lp)).powi(2);
                if w == 0.0 {
                    continue;
                }
                let u = if l == lp { upsilon_coh(i, k, l, st) } else { upsilon_noncoh(i, k, l, lp, st) };
                s += w * u;
            }
        }
    }
    Ok(s.max(0.0))
}

fn upsilon_coh(i: usize, k: usize, l: usize, st: &LargeScaleState) -> f64 {
    let n = st.antennas[l] as f64;
    let (jk, ji) = (st.idx(k, l), st.idx(i, l));
    let (bk, sk, gk, si) = (st.beta[jk], st.varsigma[jk], st.gamma[jk], st.varsigma[ji]);
    let a2 = st.alpha(i, k, l).powi(2);
    let a4 = a2 * a2;
    let z2 = st.los_cross(i, k, l).powi(2);
    let w2 = st.omega(i, k, l).norm_sqr();
    2.0 * n * n * z2 * (n * a2 * sk * w2 * gk + n * bk * w2 * si + a2 * w2 * gk * (bk + n * gk) + a2 * bk * gk)
        + n * n * (a4 * sk * sk * gk * gk + bk * bk * si * si)
        + 2.0 * a2 * gk * n * (n + 1.0)
            * (a2 * sk * gk * ((n + 1.0) * gk + bk) + si * ((n - 1.0) * bk * gk + bk * bk + 2.0 * gk * gk))
        + n * a4 * gk * gk
            * ((n + 1.0) * (n + 2.0) * gk * ((n + 3.0) * gk + 4.0 * (bk - gk))
                + (bk - gk).powi(2) * (2.0 * n + 1.0)
                - (bk + n * gk).powi(2))
}

fn upsilon_noncoh(i: usize, k: usize, l: usize, lp: usize, st: &LargeScaleState) -> f64 {
    let nn = st.antennas[l] as f64 * st.antennas[lp] as f64;
    let n = nn.sqrt();
    let (jk, jkp, ji, jip) = (st.idx(k, l), st.idx(k, lp), st.idx(i, l), st.idx(i, lp));
    let (bk, bkp) = (st.beta[jk], st.beta[jkp]);
    let (sk, skp) = (st.varsigma[jk], st.varsigma[jkp]);
    let (gk, gkp) = (st.gamma[jk], st.gamma[jkp]);
    let (si, sip) = (st.varsigma[ji], st.varsigma[jip]);
    let a2 = st.alpha(i, k, l) * st.alpha(i, k, lp);
    let a4 = a2 * a2;
    let (z2, z2p) = (st.los_cross(i, k, l).powi(2), st.los_cross(i, k, lp).powi(2));
    let (w2, w2p) = (st.omega(i, k, l).norm_sqr(), st.omega(i, k, lp).norm_sqr());
    nn * w2p * z2p * (a2 * gk * (bk + n * (gk + sk)) + n * bk * si)
        + nn * w2 * z2 * (a2 * gkp * (bkp + n * (gkp + skp)) + n * bkp * sip)
        + nn * a2 * (bk * si * gkp * (bkp + skp + n * gkp) + bkp * sip * gk * (bk + sk + n * gk))
        + nn * bk * bkp * si * sip
        + nn * a4 * gk * gkp * ((sk + bk) * (skp + bkp) + n * (gk * (bkp + skp) + gkp * (bk + sk)))
}

/// Mean harvested energy with the logistic evaluated at the mean power, J.
pub fn mean_harvested_energy(
    k: usize,
    alloc: &PowerAllocation,
    st: &LargeScaleState,
    circuit: &EhCircuit,
) -> Result<f64> {
    let m = mean_received_power(k, alloc, st)?;
    Ok(circuit.energy(m).max(0.0))
}

/// Variance `(tau_h psi)^2 V{I} Lambda'^2` at the mean power.
///
/// Expanding `E{Lambda^2}` to second order adds `V{I} Lambda Lambda''`, but
/// `E{Lambda}^2` picks up the same term from the mean correction, so the two
/// cancel and only the slope survives.
pub fn harvested_energy_variance(mean_power: f64, var_power: f64, circuit: &EhCircuit) -> f64 {
    let d1 = circuit.logistic_d1(mean_power);
    let f = circuit.harvest_duration * circuit.psi;
    f * f * var_power * d1 * d1
}

/// The uncancelled form `(tau_h psi)^2 V{I} (Lambda'' Lambda + Lambda'^2)`,
/// clamped at zero. Overstates the variance by `1 + (1 - 2 Lambda) / (1 - Lambda)`.
pub fn harvested_energy_variance_uncancelled(mean_power: f64, var_power: f64, circuit: &EhCircuit) -> f64 {
    let l = circuit.logistic(mean_power);
    let d1 = circuit.logistic_d1(mean_power);
    let d2 = circuit.logistic_d2(mean_power);
    let f = circuit.harvest_duration * circuit.psi;
    (f * f * var_power * (d2 * l + d1 * d1)).max(0.0)
}

/// `V{E_k}`, J^2.
pub fn var_harvested_energy(
    k: usize,
    alloc: &PowerAllocation,
    st: &LargeScaleState,
    circuit: &EhCircuit,
) -> Result<f64> {
    let m = mean_received_power(k, alloc, st)?;
    let v = var_received_power(k, alloc, st)?;
    Ok(harvested_energy_variance(m, v, circuit))
}

/// Moment-matched Gamma law of the harvested energy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaFit {
    pub shape: f64,
    pub scale: f64,
}

impl GammaFit {
    /// `k = mean^2 / var`, `theta = var / mean`.
    pub fn from_moments(mean: f64, var: f64) -> Result<Self> {
        if !(mean > 0.0) || !(var > 0.0) || !mean.is_finite() || !var.is_finite() {
            return Err(Error::arg(format!("Gamma fit needs positive moments, got ({mean}, {var})")));
        }
        Ok(GammaFit { shape: mean * mean / var, scale: var / mean })
    }

    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn var(&self) -> f64 {
        self.shape * self.scale * self.scale
    }

    pub fn pdf(&self, e: f64) -> f64 {
        if e <= 0.0 {
            return 0.0;
        }
        let k = self.shape;
        ((k - 1.0) * e.ln() - e / self.scale - k * self.scale.ln() - crate::special::ln_gamma(k)).exp()
    }

    pub fn cdf(&self, e: f64) -> f64 {
        harvested_energy_cdf(e, self)
    }
}

/// `P(E <= e)` under the fitted Gamma law.
pub fn harvested_energy_cdf(e: f64, fit: &GammaFit) -> f64 {
    if e <= 0.0 {
        return 0.0;
    }
    reg_lower_gamma(fit.shape, e / fit.scale).unwrap_or(f64::NAN)
}

/// Fit the Gamma law to the closed-form moments of UE `k`'s harvest.
pub fn fit_harvest(k: usize, alloc: &PowerAllocation, st: &LargeScaleState, circuit: &EhCircuit) -> Result<GammaFit> {
    GammaFit::from_moments(
        mean_harvested_energy(k, alloc, st, circuit)?,
        var_harvested_energy(k, alloc, st, circuit)?,
    )
}

/// Received RF power `I_k` in one realization, W.
pub fn received_power(
    k: usize,
    alloc: &PowerAllocation,
    st: &LargeScaleState,
    real: &ChannelRealization,
) -> f64 {
    let nt = st.total_antennas;
    let gk = &real.g[k * nt..(k + 1) * nt];
    let mut total = 0.0;
    for i in 0..st.num_ues {
        let mut s = Complex64::new(0.0, 0.0);
        for l in 0..st.num_aps {
            let w = weight(st, alloc, i, l);
            if w == 0.0 {
                continue;
            }
            let r = st.offsets[l]..st.offsets[l] + st.antennas[l];
            let gi = &real.ghat[i * nt..(i + 1) * nt];
            let mut t = Complex64::new(0.0, 0.0);
            for a in r {
                t += gk[a] * gi[a].conj();
            }
            s += t * w;
        }
        total += s.norm_sqr();
    }
    total
}

/// Empirical statistics from direct sampling.
#[derive(Debug, Clone)]
pub struct OracleStats {
    pub mean_power: f64,
    pub var_power: f64,
    pub mean_energy: f64,
    pub var_energy: f64,
    pub power_samples: Vec<f64>,
    pub energy_samples: Vec<f64>,
}

/// Sample mean and unbiased variance (zero for a single sample).
pub fn sample_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Monte-Carlo oracle for `I_k` and `E_k`: draws `n` independent channel
/// realizations and evaluates the received power and harvest directly.
pub fn mc_oracle<R: Rng + ?Sized>(
    k: usize,
    alloc: &PowerAllocation,
    st: &LargeScaleState,
    circuit: &EhCircuit,
    n: usize,
    rng: &mut R,
) -> Result<OracleStats> {
    if n == 0 {
        return Err(Error::arg("oracle needs at least one sample"));
    }
    alloc.ensure_shape(st)?;
    let mut real = ChannelRealization::zeros(st.num_ues, st.total_antennas);
    let mut power = Vec::with_capacity(n);
    for _ in 0..n {
        st.draw_into(rng, &mut real);
        power.push(received_power(k, alloc, st, &real));
    }
    let energy: Vec<f64> = power.iter().map(|&i| circuit.energy(i)).collect();
    let (mean_power, var_power) = sample_moments(&power);
    let (mean_energy, var_energy) = sample_moments(&energy);
    Ok(OracleStats { mean_power, var_power, mean_energy, var_energy, power_samples: power, energy_samples: energy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::LargeScaleInputs;

    fn circuit() -> EhCircuit {
        EhCircuit::new(150.0, 0.014, 0.024, 0.06)
    }

    fn rayleigh_single() -> LargeScaleState {
        LargeScaleState::derive(LargeScaleInputs {
            antennas: vec![6, 6],
            zeta: vec![2e-9, 5e-10, 1e-9, 3e-9],
            ricean: vec![0.0; 4],
            aoa: vec![0.2, -0.5, 0.9, 0.1],
            pilot: vec![0, 1],
            noise_power: 6e-13,
            pilot_len: 20,
            pilot_power: 1e-4,
        })
        .unwrap()
    }

    #[test]
    fn logistic_landmarks() {
        let c = circuit();
        assert!((c.logistic(c.b) - 0.5).abs() < 1e-15);
        assert!((c.logistic(0.0) - c.phi).abs() < 1e-15);
        assert!((c.logistic(1e3) - 1.0).abs() < 1e-15);
        assert!(c.psi > c.i_max && c.phi > 0.0 && c.phi < 1.0);
    }

    #[test]
    fn energy_limits() {
        let c = circuit();
        assert!(c.energy(0.0).abs() < 1e-18);
        assert!((c.energy(1e3) - c.harvest_duration * c.i_max).abs() < 1e-15);
    }

    #[test]
    fn logistic_derivatives_match_finite_differences() {
        let c = circuit();
        let h = 1e-8 * c.b;
        for i in [0.0, 0.3 * c.b, c.b, 2.0 * c.b, 4.0 * c.b] {
            let x = i.max(h);
            let d1 = (c.logistic(x + h) - c.logistic(x - h)) / (2.0 * h);
            let rel1 = (d1 - c.logistic_d1(x)).abs() / c.logistic_d1(x).abs();
            assert!(rel1 < 1e-5, "d1 at {x}: {rel1}");
            // Second differences of the first derivative keep round-off small.
            let d2 = (c.logistic_d1(x + h) - c.logistic_d1(x - h)) / (2.0 * h);
            let exact = c.logistic_d2(x);
            if exact.abs() > 1e-6 {
                assert!(((d2 - exact) / exact).abs() < 1e-5, "d2 at {x}");
            }
        }
    }

    #[test]
    fn rayleigh_coherent_xi() {
        let st = rayleigh_single();
        let (n, g, b) = (6.0, st.gamma[0], st.beta[0]);
        let xi = xi_term(0, 0, 0, 0, &st).unwrap();
        let want = n * g * (b + n * g);
        assert!((xi - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn unshared_nlos_noncoherent_xi_vanishes() {
        let st = rayleigh_single();
        assert_eq!(xi_term(1, 0, 0, 1, &st).unwrap(), 0.0);
        assert!(xi_term(0, 0, 0, 2, &st).is_err());
    }

    #[test]
    fn zero_allocation_and_homogeneity() {
        let st = rayleigh_single();
        let z = PowerAllocation::zeros(2, 2);
        assert_eq!(mean_received_power(0, &z, &st).unwrap(), 0.0);
        assert_eq!(var_received_power(0, &z, &st).unwrap(), 0.0);
        let a = PowerAllocation::from_vec(2, 2, vec![1.0, 2.0, 0.5, 3.0]).unwrap();
        let m1 = mean_received_power(0, &a, &st).unwrap();
        let m3 = mean_received_power(0, &a.scaled(3.0), &st).unwrap();
        assert!((m3 / m1 - 3.0).abs() < 1e-12);
        let v1 = var_received_power(0, &a, &st).unwrap();
        let v3 = var_received_power(0, &a.scaled(3.0), &st).unwrap();
        assert!((v3 / v1 - 9.0).abs() < 1e-10);
    }

    #[test]
    fn negative_allocation_rejected() {
        let st = rayleigh_single();
        let a = PowerAllocation::from_vec(2, 2, vec![-1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(mean_received_power(0, &a, &st).is_err());
    }

    #[test]
    fn exact_engine_mean_matches_xi_mean() {
        let st = rayleigh_single();
        let a = PowerAllocation::from_vec(2, 2, vec![1.0, 2.0, 0.5, 3.0]).unwrap();
        for k in 0..2 {
            let xi = mean_received_power(k, &a, &st).unwrap();
            let exact = received_power_moments(k, &a, &st).mean;
            assert!((xi - exact).abs() <= 1e-12 * xi, "{xi} vs {exact}");
        }
    }

    #[test]
    fn gamma_fit_arithmetic() {
        let f = GammaFit::from_moments(2.0, 4.0).unwrap();
        assert_eq!((f.shape, f.scale), (1.0, 2.0));
        let f = GammaFit::from_moments(3.7e-7, 2.1e-15).unwrap();
        assert!((f.mean() / 3.7e-7 - 1.0).abs() < 1e-14);
        assert!((f.var() / 2.1e-15 - 1.0).abs() < 1e-14);
        assert!(GammaFit::from_moments(0.0, 1.0).is_err());
        assert!(GammaFit::from_moments(1.0, -1.0).is_err());
    }

    #[test]
    fn exponential_cdf() {
        let f = GammaFit { shape: 1.0, scale: 0.7 };
        assert_eq!(harvested_energy_cdf(0.0, &f), 0.0);
        for e in [0.01, 0.5, 2.0, 9.0] {
            assert!((harvested_energy_cdf(e, &f) - (1.0 - (-e / 0.7f64).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_input_has_no_energy_variance() {
        assert_eq!(harvested_energy_variance(1e-3, 0.0, &circuit()), 0.0);
        assert_eq!(harvested_energy_variance_uncancelled(1e-3, 0.0, &circuit()), 0.0);
    }

    #[test]
    fn uncancelled_variance_ratio() {
        let c = circuit();
        for i in [0.0, 0.5 * c.b, c.b, 3.0 * c.b] {
            let l = c.logistic(i);
            let r = harvested_energy_variance_uncancelled(i, 1e-6, &c) / harvested_energy_variance(i, 1e-6, &c);
            assert!((r - (1.0 + (1.0 - 2.0 * l) / (1.0 - l)).max(0.0)).abs() < 1e-9, "{i}: {r}");
        }
    }

    #[test]
    fn single_sample_oracle() {
        let st = rayleigh_single();
        let a = PowerAllocation::from_vec(2, 2, vec![1.0, 2.0, 0.5, 3.0]).unwrap();
        let s = mc_oracle(0, &a, &st, &circuit(), 1, &mut crate::rng::stream(1, 0)).unwrap();
        assert_eq!(s.mean_power, s.power_samples[0]);
        assert_eq!(s.var_power, 0.0);
        assert!(mc_oracle(0, &a, &st, &circuit(), 0, &mut crate::rng::stream(1, 0)).is_err());
    }
}
