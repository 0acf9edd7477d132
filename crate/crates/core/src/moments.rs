//! Exact mean and variance of the received RF power.
//!
//! The received power is `I_k = sum_i |S_i|^2` with
//! `S_i = sum_l w_il g_kl^T conj(ghat_il)` and `w_il = kappa_il sqrt(Omega_il)`.
//! Splitting the antenna axis into cells `c = (l, t)`, `S = sum_c Y_c` where
//! the vectors `Y_c` are independent across cells and each entry
//! `Y_ci = w_il A conj(B_i)` is a product of two jointly circular Gaussian
//! scalars (`A = g_kl[t]`, `B_i = ghat_il[t]`). Per-cell moments up to fourth
//! order are computed from the Gaussian moment theorem; the network-wide
//! variance then follows from cumulant additivity over independent cells.

use num_complex::Complex64;

use crate::channel::LargeScaleState;
use crate::eh_stats::PowerAllocation;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

/// A jointly circular complex Gaussian vector.
#[derive(Debug, Clone)]
pub struct CircularGaussian {
    dim: usize,
    mean: Vec<Complex64>,
    /// `cov[p * dim + q] = E[(v_p - m_p) conj(v_q - m_q)]`.
    cov: Vec<Complex64>,
}

impl CircularGaussian {
    pub fn new(mean: Vec<Complex64>, cov: Vec<Complex64>) -> Self {
        let dim = mean.len();
        assert_eq!(cov.len(), dim * dim, "covariance must be dim x dim");
        CircularGaussian { dim, mean, cov }
    }

    /// `E[prod_{p in unconj} v_p * prod_{q in conj} conj(v_q)]`.
    ///
    /// At most 8 conjugated factors are supported.
    pub fn raw_moment(&self, unconj: &[usize], conj: &[usize]) -> Complex64 {
        assert!(conj.len() <= 8);
        self.rec(unconj, conj, 0)
    }

    fn rec(&self, unconj: &[usize], conj: &[usize], used: u8) -> Complex64 {
        let Some((&p, rest)) = unconj.split_first() else {
            let mut acc = Complex64::new(1.0, 0.0);
            for (j, &q) in conj.iter().enumerate() {
                if used & (1 << j) == 0 {
                    acc *= self.mean[q].conj();
                }
            }
            return acc;
        };
        let mut s = ZERO;
        let m = self.mean[p];
        if m != ZERO {
            s += m * self.rec(rest, conj, used);
        }
        for (j, &q) in conj.iter().enumerate() {
            if used & (1 << j) != 0 {
                continue;
            }
            let c = self.cov[p * self.dim + q];
            if c != ZERO {
                s += c * self.rec(rest, conj, used | (1 << j));
            }
        }
        s
    }

    /// Central moment of a product of bilinear factors
    /// `prod_r (X_r - E X_r)`, where `X_r = v_{u_r} conj(v_{c_r})`.
    pub fn central_bilinear(&self, factors: &[(usize, usize)]) -> Complex64 {
        let r = factors.len();
        assert!(r <= 4);
        let means: Vec<Complex64> =
            factors.iter().map(|&(u, c)| self.raw_moment(&[u], &[c])).collect();
        let mut total = ZERO;
        let mut uu = [0usize; 4];
        let mut cc = [0usize; 4];
        for mask in 0u32..(1 << r) {
            let mut n = 0;
            let mut coef = Complex64::new(1.0, 0.0);
            for (j, &(u, c)) in factors.iter().enumerate() {
                if mask & (1 << j) != 0 {
                    uu[n] = u;
                    cc[n] = c;
                    n += 1;
                } else {
                    coef *= -means[j];
                }
            }
            if coef == ZERO {
                continue;
            }
            total += coef * self.raw_moment(&uu[..n], &cc[..n]);
        }
        total
    }
}

/// Mean and variance of a scalar quantity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub var: f64,
}

/// Gaussian law of `(g_kl[t], ghat_i1 l[t], ghat_i2 l[t], ...)` for the
/// listed UEs at antenna `t` of AP `l`.
fn cell_gaussian(st: &LargeScaleState, k: usize, l: usize, t: usize, ues: &[usize]) -> CircularGaussian {
    let dim = 1 + ues.len();
    let tp = st.pilot_len as f64 * st.pilot_power;
    let mut mean = Vec::with_capacity(dim);
    mean.push(st.los_mean(k, l, t));
    for &i in ues {
        mean.push(st.los_mean(i, l, t));
    }
    let mut cov = vec![ZERO; dim * dim];
    let jk = st.idx(k, l);
    cov[0] = Complex64::new(st.beta[jk], 0.0);
    for (a, &i) in ues.iter().enumerate() {
        let ji = st.idx(i, l);
        if st.pilot[i] == st.pilot[k] {
            let x = Complex64::new(st.c[ji] * tp.sqrt() * st.beta[jk], 0.0);
            cov[1 + a] = x;
            cov[(1 + a) * dim] = x;
        }
        for (b, &j) in ues.iter().enumerate() {
            if st.pilot[i] != st.pilot[j] {
                continue;
            }
            let denom: f64 = (0..st.num_ues)
                .filter(|&u| st.pilot[u] == st.pilot[i])
                .map(|u| st.beta[st.idx(u, l)])
                .sum::<f64>()
                * tp
                + st.noise_power;
            let jj = st.idx(j, l);
            cov[(1 + a) * dim + 1 + b] = Complex64::new(st.c[ji] * st.c[jj] * denom, 0.0);
        }
    }
    CircularGaussian::new(mean, cov)
}

/// Exact mean and variance of the received RF power at UE `k`.
pub fn received_power_moments(k: usize, alloc: &PowerAllocation, st: &LargeScaleState) -> Moments {
    let (nk, nl) = (st.num_ues, st.num_aps);
    let weight = |i: usize, l: usize| st.kappa[st.idx(i, l)] * alloc.get(i, l).max(0.0).sqrt();

    // First pass: the mean vector of S.
    let mut mu = vec![ZERO; nk];
    let mut cells = Vec::new();
    for l in 0..nl {
        let ues: Vec<usize> = (0..nk).filter(|&i| weight(i, l) > 0.0).collect();
        if ues.is_empty() {
            continue;
        }
        let w: Vec<f64> = ues.iter().map(|&i| weight(i, l)).collect();
        for t in 0..st.antennas[l] {
            let g = cell_gaussian(st, k, l, t, &ues);
            for (a, &i) in ues.iter().enumerate() {
                mu[i] += g.raw_moment(&[0], &[1 + a]) * w[a];
            }
            cells.push((g, ues.clone(), w.clone()));
        }
    }

    // Second pass: per-cell second, third and fourth central moments.
    let mut cmat = vec![ZERO; nk * nk];
    let mut pmat = vec![ZERO; nk * nk];
    let mut third = ZERO;
    let mut fourth_excess = 0.0;
    for (g, ues, w) in &cells {
        let n = ues.len();
        let mut cc = vec![ZERO; n * n];
        let mut pc = vec![ZERO; n * n];
        let mut fourth = 0.0;
        for a in 0..n {
            let za = (0, 1 + a);
            let zab = (1 + a, 0);
            for b in 0..n {
                let zb = (0, 1 + b);
                let zbb = (1 + b, 0);
                let wab = w[a] * w[b];
                cc[a * n + b] = g.central_bilinear(&[za, zbb]) * wab;
                pc[a * n + b] = g.central_bilinear(&[za, zb]) * wab;
                third += mu[ues[a]].conj() * g.central_bilinear(&[za, zb, zbb]) * (w[a] * w[b] * w[b]);
                fourth += g.central_bilinear(&[za, zab, zb, zbb]).re * (wab * wab);
            }
        }
        let tr: f64 = (0..n).map(|a| cc[a * n + a].re).sum();
        let p2: f64 = pc.iter().map(|z| z.norm_sqr()).sum();
        let c2: f64 = (0..n).flat_map(|a| (0..n).map(move |b| (a, b)))
            .map(|(a, b)| (cc[a * n + b] * cc[b * n + a]).re)
            .sum();
        fourth_excess += fourth - tr * tr - p2 - c2;
        for a in 0..n {
            for b in 0..n {
                cmat[ues[a] * nk + ues[b]] += cc[a * n + b];
                pmat[ues[a] * nk + ues[b]] += pc[a * n + b];
            }
        }
    }

    let mean = mu.iter().map(|z| z.norm_sqr()).sum::<f64>() + (0..nk).map(|i| cmat[i * nk + i].re).sum::<f64>();
    let mut quad_c = ZERO;
    let mut quad_p = ZERO;
    for i in 0..nk {
        for j in 0..nk {
            quad_c += mu[i].conj() * cmat[i * nk + j] * mu[j];
            quad_p += mu[i].conj() * pmat[i * nk + j] * mu[j].conj();
        }
    }
    let c_f: f64 = cmat.iter().map(|z| z.norm_sqr()).sum();
    let p_f: f64 = pmat.iter().map(|z| z.norm_sqr()).sum();
    let var = 2.0 * quad_c.re + 2.0 * quad_p.re + 4.0 * third.re + c_f + p_f + fourth_excess;
    Moments { mean, var: var.max(0.0) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn scalar_moments() {
        let z = CircularGaussian::new(vec![ZERO], vec![c(1.0, 0.0)]);
        assert!((z.raw_moment(&[0, 0], &[0, 0]) - c(2.0, 0.0)).norm() < 1e-15);
        assert!((z.raw_moment(&[0, 0, 0], &[0, 0, 0]) - c(6.0, 0.0)).norm() < 1e-15);
        assert_eq!(z.raw_moment(&[0, 0], &[]), ZERO);
        let m = c(0.3, -1.2);
        let z = CircularGaussian::new(vec![m], vec![c(0.5, 0.0)]);
        let want = m.norm_sqr() + 0.5;
        assert!((z.raw_moment(&[0], &[0]).re - want).abs() < 1e-15);
        // E|v|^4 = |m|^4 + 4|m|^2 s + 2 s^2
        let want4 = m.norm_sqr().powi(2) + 4.0 * m.norm_sqr() * 0.5 + 2.0 * 0.25;
        assert!((z.raw_moment(&[0, 0], &[0, 0]).re - want4).abs() < 1e-14);
    }

    #[test]
    fn bilinear_variance_of_independent_pair() {
        // Var(A conj B) = E|A|^2 E|B|^2 - |m_A|^2 |m_B|^2 for independent A, B.
        let (ma, mb) = (c(1.0, 0.5), c(-0.2, 0.7));
        let g = CircularGaussian::new(vec![ma, mb], vec![c(0.3, 0.0), ZERO, ZERO, c(0.8, 0.0)]);
        let v = g.central_bilinear(&[(0, 1), (1, 0)]).re;
        let want = (ma.norm_sqr() + 0.3) * (mb.norm_sqr() + 0.8) - ma.norm_sqr() * mb.norm_sqr();
        assert!((v - want).abs() < 1e-14);
    }
}
