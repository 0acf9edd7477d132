//! Network geometry, large-scale fading, MMSE estimation statistics and
//! small-scale channel draws.
//!
//! Antennas of all APs are stacked on one axis: AP `l` owns indices
//! `offsets[l] .. offsets[l] + antennas[l]`. Per-(UE, AP) quantities are
//! stored at `k * L + l`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::rng::cn;

/// Near breakpoint of the three-slope model, m.
pub const D0_M: f64 = 10.0;
/// Far breakpoint of the three-slope model, m.
pub const D1_M: f64 = 50.0;

/// Planar AP and UE coordinates, m.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub aps: Vec<[f64; 2]>,
    pub ues: Vec<[f64; 2]>,
}

/// Place APs on a grid of cell centres and UEs uniformly at random.
///
/// A perfect-square `L` gives a `sqrt(L) x sqrt(L)` grid. Otherwise the grid
/// has `ceil(sqrt(L))` columns and the cells are filled row by row.
pub fn place_network<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Result<Geometry> {
    if cfg.num_aps == 0 || cfg.num_ues == 0 {
        return Err(Error::arg("network needs at least one AP and one UE"));
    }
    if !(cfg.area_side_m > 0.0) {
        return Err(Error::arg("area side must be positive"));
    }
    let side = cfg.area_side_m;
    let l = cfg.num_aps;
    let cols = (l as f64).sqrt().ceil() as usize;
    let rows = l.div_ceil(cols);
    let aps = (0..l)
        .map(|j| {
            let (r, c) = (j / cols, j % cols);
            [(c as f64 + 0.5) * side / cols as f64, (r as f64 + 0.5) * side / rows as f64]
        })
        .collect();
    let ues = (0..cfg.num_ues)
        .map(|_| [rng.random::<f64>() * side, rng.random::<f64>() * side])
        .collect();
    Ok(Geometry { aps, ues })
}

/// Distance between AP and UE antennas including the height difference, m.
pub fn distance_3d(ap: [f64; 2], ue: [f64; 2], cfg: &NetworkConfig) -> f64 {
    let dx = ap[0] - ue[0];
    let dy = ap[1] - ue[1];
    let dh = cfg.ap_height_m - cfg.ue_height_m;
    (dx * dx + dy * dy + dh * dh).sqrt()
}

/// Hata-style constant `LP` in dB, with `f` in MHz and heights in m.
pub fn hata_constant(f_mhz: f64, h_ap: f64, h_ue: f64) -> f64 {
    let lf = f_mhz.log10();
    46.3 + 33.9 * lf - 13.82 * h_ap.log10() - (1.1 * lf - 0.7) * h_ue + (1.56 * lf - 0.8)
}

/// Three-slope path loss (a positive loss in dB) at distance `d_m` metres.
///
/// Distances enter the logarithms in km.
pub fn path_loss_db(d_m: f64, cfg: &NetworkConfig) -> Result<f64> {
    if !(d_m > 0.0) {
        return Err(Error::arg(format!("distance must be positive, got {d_m}")));
    }
    let lp = hata_constant(cfg.carrier_freq_mhz, cfg.ap_height_m, cfg.ue_height_m);
    let (d, d0, d1) = (d_m / 1e3, D0_M / 1e3, D1_M / 1e3);
    Ok(if d > d1 {
        lp + 35.0 * d.log10()
    } else if d > d0 {
        lp + 15.0 * d1.log10() + 20.0 * d.log10()
    } else {
        lp + 15.0 * d1.log10() + 20.0 * d0.log10()
    })
}

/// Linear gain from path loss and shadowing, both in dB.
pub fn large_scale_gain(pl_db: f64, shadowing_db: f64) -> f64 {
    10f64.powf(-(pl_db + shadowing_db) / 10.0)
}

/// Distance-decay Ricean factor (linear), distance in metres.
pub fn ricean_factor(d_m: f64) -> f64 {
    10f64.powf(1.3 - 0.003 * d_m)
}

/// Spread `total` antennas over `l` APs; the remainder goes to randomly
/// chosen APs, one extra antenna each.
pub fn antenna_counts<R: Rng + ?Sized>(cfg: &NetworkConfig, rng: &mut R) -> Vec<usize> {
    let l = cfg.num_aps;
    match cfg.total_antennas {
        None => vec![cfg.antennas_per_ap; l],
        Some(total) => {
            let mut counts = vec![total / l; l];
            let rem = total % l;
            if rem > 0 {
                for j in sample(rng, l, rem) {
                    counts[j] += 1;
                }
            }
            counts
        }
    }
}

/// Inputs from which a [`LargeScaleState`] is derived.
#[derive(Debug, Clone)]
pub struct LargeScaleInputs {
    /// Antennas per AP.
    pub antennas: Vec<usize>,
    /// `zeta[k * L + l]`, linear.
    pub zeta: Vec<f64>,
    /// Ricean factor per (k, l), linear.
    pub ricean: Vec<f64>,
    /// Angle of arrival per (k, l), rad.
    pub aoa: Vec<f64>,
    /// Pilot index of each UE.
    pub pilot: Vec<usize>,
    pub noise_power: f64,
    /// Pilot length in symbols.
    pub pilot_len: usize,
    pub pilot_power: f64,
}

/// Slow-varying channel statistics, frozen over a run.
#[derive(Debug, Clone)]
pub struct LargeScaleState {
    pub num_ues: usize,
    pub num_aps: usize,
    pub antennas: Vec<usize>,
    pub offsets: Vec<usize>,
    pub total_antennas: usize,
    pub zeta: Vec<f64>,
    pub ricean: Vec<f64>,
    pub beta: Vec<f64>,
    pub varsigma: Vec<f64>,
    pub aoa: Vec<f64>,
    /// LoS steering entries, `k * NT + offsets[l] + t`.
    pub steering: Vec<Complex64>,
    pub pilot: Vec<usize>,
    pub noise_power: f64,
    pub pilot_len: usize,
    pub pilot_power: f64,
    pub c: Vec<f64>,
    pub gamma: Vec<f64>,
    pub kappa: Vec<f64>,
    omega: Vec<Complex64>,
    alpha: Vec<f64>,
}

impl LargeScaleState {
    /// Draw geometry, fading and AoAs for `cfg`, then derive estimation
    /// statistics.
    pub fn generate<R: Rng + ?Sized>(
        cfg: &NetworkConfig,
        rng: &mut R,
    ) -> Result<(Geometry, LargeScaleState)> {
        cfg.validate()?;
        let antennas = antenna_counts(cfg, rng);
        let geo = place_network(cfg, rng)?;
        let (k, l) = (cfg.num_ues, cfg.num_aps);
        let mut zeta = Vec::with_capacity(k * l);
        let mut ricean = Vec::with_capacity(k * l);
        let mut aoa = Vec::with_capacity(k * l);
        for ue in &geo.ues {
            for ap in &geo.aps {
                let d = distance_3d(*ap, *ue, cfg);
                let pl = path_loss_db(d, cfg)?;
                let z: f64 = rng.sample(StandardNormal);
                let psi = if cfg.shadowing && d > D1_M { cfg.shadowing_std_db * z } else { 0.0 };
                zeta.push(large_scale_gain(pl, psi));
                ricean.push(cfg.ricean_factor.unwrap_or_else(|| ricean_factor(d)));
                aoa.push(rng.random_range(-PI / 2.0..PI / 2.0));
            }
        }
        let pilot_len = cfg.pilot_len();
        let pilot = (0..k).map(|i| i % pilot_len).collect();
        let state = LargeScaleState::derive(LargeScaleInputs {
            antennas,
            zeta,
            ricean,
            aoa,
            pilot,
            noise_power: cfg.noise_power_w(),
            pilot_len,
            pilot_power: cfg.pilot_power_w,
        })?;
        Ok((geo, state))
    }

    /// Build the state and fill in `c`, `gamma`, `kappa`, `alpha`, `omega`.
    pub fn derive(inp: LargeScaleInputs) -> Result<LargeScaleState> {
        let l = inp.antennas.len();
        if l == 0 || inp.antennas.contains(&0) {
            return Err(Error::arg("every AP needs at least one antenna"));
        }
        let k = inp.pilot.len();
        if k == 0 {
            return Err(Error::arg("at least one UE required"));
        }
        for (name, v) in [("zeta", &inp.zeta), ("ricean", &inp.ricean), ("aoa", &inp.aoa)] {
            if v.len() != k * l {
                return Err(Error::arg(format!("{name} must have K*L entries")));
            }
        }
        if inp.zeta.iter().chain(&inp.ricean).any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::arg("gains and Ricean factors must be finite and non-negative"));
        }
        let mut offsets = Vec::with_capacity(l);
        let mut nt = 0;
        for &n in &inp.antennas {
            offsets.push(nt);
            nt += n;
        }
        let beta: Vec<f64> = inp.zeta.iter().zip(&inp.ricean).map(|(z, kf)| z / (kf + 1.0)).collect();
        let varsigma: Vec<f64> = beta.iter().zip(&inp.ricean).map(|(b, kf)| b * kf).collect();
        let mut steering = vec![Complex64::new(0.0, 0.0); k * nt];
        for ue in 0..k {
            for ap in 0..l {
                let s = inp.aoa[ue * l + ap].sin();
                for t in 0..inp.antennas[ap] {
                    steering[ue * nt + offsets[ap] + t] = Complex64::from_polar(1.0, PI * t as f64 * s);
                }
            }
        }
        let mut st = LargeScaleState {
            num_ues: k,
            num_aps: l,
            antennas: inp.antennas,
            offsets,
            total_antennas: nt,
            zeta: inp.zeta,
            ricean: inp.ricean,
            beta,
            varsigma,
            aoa: inp.aoa,
            steering,
            pilot: inp.pilot,
            noise_power: inp.noise_power,
            pilot_len: inp.pilot_len,
            pilot_power: inp.pilot_power,
            c: vec![],
            gamma: vec![],
            kappa: vec![],
            omega: vec![],
            alpha: vec![],
        };
        st.derive_estimation_stats()?;
        Ok(st)
    }

    /// Recompute the MMSE estimation statistics from the current gains and
    /// pilot assignment.
    pub fn derive_estimation_stats(&mut self) -> Result<()> {
        let (k, l) = (self.num_ues, self.num_aps);
        let tp = self.pilot_len as f64 * self.pilot_power;
        self.c = vec![0.0; k * l];
        self.gamma = vec![0.0; k * l];
        self.kappa = vec![0.0; k * l];
        for ue in 0..k {
            for ap in 0..l {
                let denom: f64 = (0..k)
                    .filter(|&i| self.pilot[i] == self.pilot[ue])
                    .map(|i| self.beta[i * l + ap])
                    .sum::<f64>()
                    * tp
                    + self.noise_power;
                let j = ue * l + ap;
                let c = if denom > 0.0 { tp.sqrt() * self.beta[j] / denom } else { 0.0 };
                self.c[j] = c;
                self.gamma[j] = tp.sqrt() * self.beta[j] * c;
                let e = self.antennas[ap] as f64 * (self.varsigma[j] + self.gamma[j]);
                // An estimate with no energy gets no beam.
                self.kappa[j] = if e > 0.0 { 1.0 / e.sqrt() } else { 0.0 };
            }
        }
        self.omega = vec![Complex64::new(0.0, 0.0); k * k * l];
        self.alpha = vec![0.0; k * k * l];
        let nt = self.total_antennas;
        for i in 0..k {
            for ue in 0..k {
                for ap in 0..l {
                    let n = self.antennas[ap];
                    let base = self.offsets[ap];
                    let mut s = Complex64::new(0.0, 0.0);
                    for t in 0..n {
                        s += self.steering[ue * nt + base + t] * self.steering[i * nt + base + t].conj();
                    }
                    let idx = (i * k + ue) * l + ap;
                    self.omega[idx] = s / n as f64;
                    let bk = self.beta[ue * l + ap];
                    if self.pilot[i] == self.pilot[ue] && bk > 0.0 {
                        self.alpha[idx] = self.beta[i * l + ap] / bk;
                    }
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn idx(&self, k: usize, l: usize) -> usize {
        k * self.num_aps + l
    }

    /// UEs sharing UE `k`'s pilot, `k` included.
    pub fn pilot_set(&self, k: usize) -> Vec<usize> {
        (0..self.num_ues).filter(|&i| self.pilot[i] == self.pilot[k]).collect()
    }

    /// Number of distinct pilots in use.
    pub fn num_pilots(&self) -> usize {
        self.pilot.iter().max().map_or(0, |m| m + 1)
    }

    /// Steering overlap `h_kl^T conj(h_il) / N_l`.
    #[inline]
    pub fn omega(&self, i: usize, k: usize, l: usize) -> Complex64 {
        self.omega[(i * self.num_ues + k) * self.num_aps + l]
    }

    /// Ratio between the NLoS estimate parts of UE `i` and UE `k` at AP `l`;
    /// zero when they use different pilots.
    #[inline]
    pub fn alpha(&self, i: usize, k: usize, l: usize) -> f64 {
        self.alpha[(i * self.num_ues + k) * self.num_aps + l]
    }

    /// LoS cross gain `sqrt(varsigma_kl varsigma_il)`.
    #[inline]
    pub fn los_cross(&self, i: usize, k: usize, l: usize) -> f64 {
        (self.varsigma[self.idx(k, l)] * self.varsigma[self.idx(i, l)]).sqrt()
    }

    /// LoS mean of `g_kl` at antenna `t` of AP `l`.
    #[inline]
    pub fn los_mean(&self, k: usize, l: usize, t: usize) -> Complex64 {
        self.steering[k * self.total_antennas + self.offsets[l] + t] * self.varsigma[self.idx(k, l)].sqrt()
    }

    /// Expected estimate norm `sqrt(N_l (varsigma + gamma))`.
    pub fn expected_estimate_norm(&self, k: usize, l: usize) -> f64 {
        let j = self.idx(k, l);
        (self.antennas[l] as f64 * (self.varsigma[j] + self.gamma[j])).sqrt()
    }

    /// Draw one coherence interval of channels and their estimates.
    pub fn draw_realization<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelRealization {
        let mut real = ChannelRealization::zeros(self.num_ues, self.total_antennas);
        self.draw_into(rng, &mut real);
        real
    }

    /// As [`draw_realization`](Self::draw_realization), reusing buffers.
    pub fn draw_into<R: Rng + ?Sized>(&self, rng: &mut R, real: &mut ChannelRealization) {
        let (k, l, nt) = (self.num_ues, self.num_aps, self.total_antennas);
        let tp = (self.pilot_len as f64 * self.pilot_power).sqrt();
        let sigma = self.noise_power.sqrt();
        let np = self.num_pilots();
        let mut u = vec![Complex64::new(0.0, 0.0); k];
        let mut pilot_sum = vec![Complex64::new(0.0, 0.0); np];
        for ap in 0..l {
            for t in 0..self.antennas[ap] {
                let a = self.offsets[ap] + t;
                pilot_sum.iter_mut().for_each(|s| *s = Complex64::new(0.0, 0.0));
                for ue in 0..k {
                    u[ue] = cn(rng);
                    pilot_sum[self.pilot[ue]] += u[ue] * (tp * self.beta[ue * l + ap].sqrt());
                }
                for s in pilot_sum.iter_mut() {
                    *s += cn(rng) * sigma;
                }
                for ue in 0..k {
                    let j = ue * l + ap;
                    let mean = self.steering[ue * nt + a] * self.varsigma[j].sqrt();
                    let nlos = u[ue] * self.beta[j].sqrt();
                    let est = pilot_sum[self.pilot[ue]] * self.c[j];
                    real.g[ue * nt + a] = mean + nlos;
                    real.ghat[ue * nt + a] = mean + est;
                    real.eps[ue * nt + a] = nlos - est;
                }
            }
        }
    }
}

/// One small-scale draw: true channels, MMSE estimates and errors, stacked
/// over all antennas at `k * NT + a`.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub num_ues: usize,
    pub total_antennas: usize,
    pub g: Vec<Complex64>,
    pub ghat: Vec<Complex64>,
    pub eps: Vec<Complex64>,
}

impl ChannelRealization {
    pub fn zeros(num_ues: usize, total_antennas: usize) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); num_ues * total_antennas];
        ChannelRealization { num_ues, total_antennas, g: z.clone(), ghat: z.clone(), eps: z }
    }

    /// `||ghat_kl||` for the antennas of AP `l`.
    pub fn estimate_norm(&self, st: &LargeScaleState, k: usize, l: usize) -> f64 {
        let base = k * self.total_antennas + st.offsets[l];
        self.ghat[base..base + st.antennas[l]].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}
