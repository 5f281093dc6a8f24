//! Special functions and quadratures: Legendre polynomials, spherical
//! harmonics, Wigner-3j and Gaunt coefficients, Gauss-Legendre and
//! Fibonacci sphere rules, and the Gaussian radial shell basis.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Largest Legendre degree accepted by [`legendre_p`].
pub const MAX_LEGENDRE_DEGREE: usize = 4096;
/// Largest degree supported by the 3j/Gaunt routines.
pub const MAX_COUPLING_DEGREE: i64 = 64;

const LN_FACT_LEN: usize = 4 * MAX_COUPLING_DEGREE as usize + 8;

fn ln_factorials() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = vec![0.0; LN_FACT_LEN];
        for n in 1..LN_FACT_LEN {
            t[n] = t[n - 1] + (n as f64).ln();
        }
        t
    })
}

#[inline]
fn ln_fact(n: i64) -> f64 {
    ln_factorials()[n as usize]
}

/// Legendre polynomial P_ℓ(x) by the three-term recurrence.
pub fn legendre_p(ell: usize, x: f64) -> Result<f64> {
    if ell > MAX_LEGENDRE_DEGREE {
        return invalid(format!("legendre degree {ell} exceeds {MAX_LEGENDRE_DEGREE}"));
    }
    if !(x.abs() <= 1.0 + 1e-12) {
        return invalid(format!("legendre argument {x} outside [-1, 1]"));
    }
    Ok(legendre_unchecked(ell, x))
}

pub(crate) fn legendre_unchecked(ell: usize, x: f64) -> f64 {
    let mut p0 = 1.0;
    if ell == 0 {
        return p0;
    }
    let mut p1 = x;
    for k in 2..=ell {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// All P_0..P_lmax at x.
pub fn legendre_all(lmax: usize, x: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(lmax + 1);
    out.push(1.0);
    if lmax >= 1 {
        out.push(x);
    }
    for k in 2..=lmax {
        let kf = k as f64;
        let v = ((2.0 * kf - 1.0) * x * out[k - 1] - (kf - 1.0) * out[k - 2]) / kf;
        out.push(v);
    }
    out
}

/// Flat index of (ℓ, m) in a table holding every order of degrees 0..=L.
#[inline]
pub fn lm_index(ell: usize, m: i64) -> usize {
    ((ell * ell + ell) as i64 + m) as usize
}

/// Number of (ℓ, m) pairs with ℓ ≤ lmax.
#[inline]
pub fn lm_count(lmax: usize) -> usize {
    (lmax + 1) * (lmax + 1)
}

/// Orthonormal Y_ℓm for all ℓ ≤ lmax, Condon-Shortley phase, written at
/// [`lm_index`] positions.
pub fn sph_harm_all(lmax: usize, theta: f64, phi: f64, out: &mut [Complex64]) {
    debug_assert!(out.len() >= lm_count(lmax));
    let x = theta.cos();
    let s = theta.sin();
    // normalized associated Legendre values for fixed m, walking ℓ upward
    let mut pmm = (1.0 / (4.0 * PI)).sqrt();
    for m in 0..=lmax {
        if m > 0 {
            let mf = m as f64;
            pmm *= -((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s;
        }
        let eim = Complex64::from_polar(1.0, m as f64 * phi);
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        let mut store = |ell: usize, p: f64| {
            let y = eim * p;
            out[ell * ell + ell + m] = y;
            if m > 0 {
                out[ell * ell + ell - m] = y.conj() * sign;
            }
        };
        store(m, pmm);
        if m == lmax {
            break;
        }
        let mut p_prev = pmm;
        let mut p_cur = (2.0 * m as f64 + 3.0).sqrt() * x * pmm;
        store(m + 1, p_cur);
        for ell in (m + 2)..=lmax {
            let l = ell as f64;
            let mf = m as f64;
            let a = ((4.0 * l * l - 1.0) / (l * l - mf * mf)).sqrt();
            let b = (((l - 1.0) * (l - 1.0) - mf * mf) / (4.0 * (l - 1.0) * (l - 1.0) - 1.0)).sqrt();
            let p_next = a * (x * p_cur - b * p_prev);
            p_prev = p_cur;
            p_cur = p_next;
            store(ell, p_cur);
        }
    }
}

/// Orthonormal complex spherical harmonic Y_ℓm(θ, φ).
pub fn sph_harm(ell: usize, m: i64, theta: f64, phi: f64) -> Result<Complex64> {
    if m.unsigned_abs() as usize > ell {
        return invalid(format!("|m| = {} exceeds degree {ell}", m.abs()));
    }
    if !(0.0..=PI).contains(&theta) {
        return invalid(format!("colatitude {theta} outside [0, π]"));
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); lm_count(ell)];
    sph_harm_all(ell, theta, phi, &mut buf);
    Ok(buf[lm_index(ell, m)])
}

fn triangle_ok(l1: i64, l2: i64, l3: i64) -> bool {
    l1 >= 0 && l2 >= 0 && l3 >= 0 && l3 <= l1 + l2 && l3 >= (l1 - l2).abs()
}

/// Wigner 3j symbol via the Racah sum in log-factorial form. Returns an exact
/// zero whenever a selection rule fails.
pub fn wigner3j(l1: i64, l2: i64, l3: i64, m1: i64, m2: i64, m3: i64) -> f64 {
    if m1 + m2 + m3 != 0 || !triangle_ok(l1, l2, l3) {
        return 0.0;
    }
    if m1.abs() > l1 || m2.abs() > l2 || m3.abs() > l3 {
        return 0.0;
    }
    if m1 == 0 && m2 == 0 && m3 == 0 && (l1 + l2 + l3) % 2 != 0 {
        return 0.0;
    }
    if l1.max(l2).max(l3) > MAX_COUPLING_DEGREE {
        return f64::NAN;
    }
    let ln_delta = ln_fact(l1 + l2 - l3) + ln_fact(l1 - l2 + l3) + ln_fact(-l1 + l2 + l3)
        - ln_fact(l1 + l2 + l3 + 1);
    let ln_pre = 0.5
        * (ln_delta
            + ln_fact(l1 + m1)
            + ln_fact(l1 - m1)
            + ln_fact(l2 + m2)
            + ln_fact(l2 - m2)
            + ln_fact(l3 + m3)
            + ln_fact(l3 - m3));
    let kmin = 0.max(l2 - l3 - m1).max(l1 - l3 + m2);
    let kmax = (l1 + l2 - l3).min(l1 - m1).min(l2 + m2);
    if kmin > kmax {
        return 0.0;
    }
    let terms: Vec<(f64, f64)> = (kmin..=kmax)
        .map(|k| {
            let ln_den = ln_fact(k)
                + ln_fact(l3 - l2 + k + m1)
                + ln_fact(l3 - l1 + k - m2)
                + ln_fact(l1 + l2 - l3 - k)
                + ln_fact(l1 - k - m1)
                + ln_fact(l2 - k + m2);
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            (sign, ln_pre - ln_den)
        })
        .collect();
    let top = terms.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|&(s, l)| s * (l - top).exp()).sum();
    let phase = if (l1 - l2 - m3).rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    phase * sum * top.exp()
}

/// Gaunt coefficient ∫ Y_{ℓ1m1} Y_{ℓ2m2} Y_{ℓ3m3} dω.
pub fn gaunt(l1: i64, l2: i64, l3: i64, m1: i64, m2: i64, m3: i64) -> f64 {
    if m1 + m2 + m3 != 0 || !triangle_ok(l1, l2, l3) || (l1 + l2 + l3) % 2 != 0 {
        return 0.0;
    }
    if m1.abs() > l1 || m2.abs() > l2 || m3.abs() > l3 {
        return 0.0;
    }
    let norm = (((2 * l1 + 1) * (2 * l2 + 1) * (2 * l3 + 1)) as f64 / (4.0 * PI)).sqrt();
    norm * wigner3j(l1, l2, l3, 0, 0, 0) * wigner3j(l1, l2, l3, m1, m2, m3)
}

/// True when (ℓ1, ℓ2, ℓ3) satisfies the triangle rule with even sum.
pub fn admissible(l1: usize, l2: usize, l3: usize) -> bool {
    triangle_ok(l1 as i64, l2 as i64, l3 as i64) && (l1 + l2 + l3) % 2 == 0
}

/// Dense Gaunt table for all degree triples up to `lmax`. Each admissible
/// (ℓ1, ℓ2, ℓ3) owns a (2ℓ1+1)×(2ℓ2+1) block of G(ℓ1,ℓ2,ℓ3; m1, m2, −m1−m2).
#[derive(Clone, Debug)]
pub struct GauntTable {
    lmax: usize,
    offsets: Vec<Option<usize>>,
    values: Vec<f64>,
}

impl GauntTable {
    pub fn new(lmax: usize) -> Result<Self> {
        if lmax as i64 > MAX_COUPLING_DEGREE {
            return invalid(format!("lmax {lmax} exceeds {MAX_COUPLING_DEGREE}"));
        }
        let n = lmax + 1;
        let mut offsets = vec![None; n * n * n];
        let mut values = Vec::new();
        for l1 in 0..n {
            for l2 in 0..n {
                for l3 in 0..n {
                    if !admissible(l1, l2, l3) {
                        continue;
                    }
                    offsets[(l1 * n + l2) * n + l3] = Some(values.len());
                    let (a, b, c) = (l1 as i64, l2 as i64, l3 as i64);
                    for m1 in -a..=a {
                        for m2 in -b..=b {
                            values.push(gaunt(a, b, c, m1, m2, -m1 - m2));
                        }
                    }
                }
            }
        }
        Ok(Self { lmax, offsets, values })
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    /// Block for an admissible triple, row-major in (m1 + ℓ1, m2 + ℓ2).
    pub fn block(&self, l1: usize, l2: usize, l3: usize) -> Option<&[f64]> {
        let n = self.lmax + 1;
        if l1 >= n || l2 >= n || l3 >= n {
            return None;
        }
        let off = self.offsets[(l1 * n + l2) * n + l3]?;
        Some(&self.values[off..off + (2 * l1 + 1) * (2 * l2 + 1)])
    }

    /// G(ℓ1,ℓ2,ℓ3; m1, m2, −m1−m2), zero outside the table.
    pub fn get(&self, l1: usize, l2: usize, l3: usize, m1: i64, m2: i64) -> f64 {
        match self.block(l1, l2, l3) {
            Some(b) if m1.unsigned_abs() as usize <= l1 && m2.unsigned_abs() as usize <= l2 => {
                b[(m1 + l1 as i64) as usize * (2 * l2 + 1) + (m2 + l2 as i64) as usize]
            }
            _ => 0.0,
        }
    }
}

/// One-dimensional quadrature rule on [−1, 1].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Quadrature1D {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Gauss-Legendre rule with `k` nodes from Newton iteration on the roots of P_k.
pub fn gauss_legendre(k: usize) -> Result<Quadrature1D> {
    if k == 0 {
        return invalid("gauss_legendre needs at least one node");
    }
    let mut nodes = vec![0.0; k];
    let mut weights = vec![0.0; k];
    let kf = k as f64;
    for i in 0..(k + 1) / 2 {
        let mut x = (PI * (i as f64 + 0.75) / (kf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(k, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(k, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[k - 1 - i] = x;
        weights[i] = w;
        weights[k - 1 - i] = w;
    }
    if k % 2 == 1 {
        nodes[k / 2] = 0.0;
    }
    Ok(Quadrature1D { nodes, weights })
}

fn legendre_with_derivative(k: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if k == 0 {
        return (1.0, 0.0);
    }
    for j in 2..=k {
        let jf = j as f64;
        let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
        p0 = p1;
        p1 = p2;
    }
    let d = k as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Quadrature rule on the unit sphere.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SphereQuadrature {
    pub directions: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl SphereQuadrature {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Colatitude and azimuth of node i.
    pub fn angles(&self, i: usize) -> (f64, f64) {
        let [x, y, z] = self.directions[i];
        (z.clamp(-1.0, 1.0).acos(), y.atan2(x))
    }

    /// Table of Y_ℓm at every node, row i holding [`lm_count`] entries.
    pub fn harmonics_table(&self, lmax: usize) -> Vec<Complex64> {
        let stride = lm_count(lmax);
        let mut out = vec![Complex64::new(0.0, 0.0); stride * self.len()];
        for (i, row) in out.chunks_mut(stride).enumerate() {
            let (t, p) = self.angles(i);
            sph_harm_all(lmax, t, p, row);
        }
        out
    }
}

/// Fibonacci lattice on S² with equal weights 4π/N.
pub fn fibonacci_sphere(n: usize) -> Result<SphereQuadrature> {
    if n < 16 {
        return invalid(format!("fibonacci_sphere needs at least 16 nodes, got {n}"));
    }
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let nf = n as f64;
    let directions = (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / nf;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let phi = 2.0 * PI * (i as f64 / golden).fract();
            [rho * phi.cos(), rho * phi.sin(), z]
        })
        .collect();
    Ok(SphereQuadrature { directions, weights: vec![4.0 * PI / nf; n] })
}

/// Gauss-Legendre in cos θ times a uniform azimuth rule. Exact for
/// band-limited integrands of degree below min(2·n_theta, n_phi).
pub fn gauss_product_sphere(n_theta: usize, n_phi: usize) -> Result<SphereQuadrature> {
    if n_phi == 0 {
        return invalid("gauss_product_sphere needs at least one azimuth");
    }
    let gl = gauss_legendre(n_theta)?;
    let mut directions = Vec::with_capacity(n_theta * n_phi);
    let mut weights = Vec::with_capacity(n_theta * n_phi);
    for (&z, &w) in gl.nodes.iter().zip(&gl.weights) {
        let rho = (1.0 - z * z).max(0.0).sqrt();
        for j in 0..n_phi {
            let phi = 2.0 * PI * j as f64 / n_phi as f64;
            directions.push([rho * phi.cos(), rho * phi.sin(), z]);
            weights.push(w * 2.0 * PI / n_phi as f64);
        }
    }
    Ok(SphereQuadrature { directions, weights })
}

/// Gaussian radial windows W_q(r) = C_q exp(−(r − r_q)²/(2σ²)) normalized in
/// L²([0,1], r² dr), with pairwise and triple overlaps.
#[derive(Clone, Debug)]
pub struct ShellBasis {
    pub centers: Vec<f64>,
    pub width: f64,
    pub normalizers: Vec<f64>,
    /// Radial nodes on [0, 1].
    pub radial_nodes: Vec<f64>,
    /// Radial weights with r² folded in.
    pub radial_weights: Vec<f64>,
    /// W_q(r_n), row q.
    pub values: DMatrix<f64>,
    pub overlap: DMatrix<f64>,
    triple: Vec<f64>,
}

impl ShellBasis {
    pub fn count(&self) -> usize {
        self.centers.len()
    }

    pub fn eval(&self, q: usize, r: f64) -> f64 {
        let d = r - self.centers[q];
        self.normalizers[q] * (-d * d / (2.0 * self.width * self.width)).exp()
    }

    pub fn triple_overlap(&self, a: usize, b: usize, c: usize) -> f64 {
        let n = self.count();
        self.triple[(a * n + b) * n + c]
    }

    /// Default width 0.6/(R_max + 1).
    pub fn default_width(r_max: usize) -> f64 {
        0.6 / (r_max as f64 + 1.0)
    }

    /// Default radial node count max(64, 8·R_max).
    pub fn default_radial_nodes(r_max: usize) -> usize {
        64.max(8 * r_max)
    }

    /// Basis with the standard centers, width and radial node count.
    pub fn standard(r_max: usize) -> Result<Self> {
        make_shell_basis(r_max, Self::default_width(r_max), Self::default_radial_nodes(r_max))
    }

    pub fn with_centers(centers: Vec<f64>, sigma: f64, n_r: usize) -> Result<Self> {
        if !(sigma > 0.0) {
            return invalid(format!("shell width must be positive, got {sigma}"));
        }
        if centers.is_empty() || centers.iter().any(|&c| !(c > 0.0 && c < 1.0)) {
            return invalid("shell centers must lie in (0, 1)");
        }
        let gl = gauss_legendre(n_r)?;
        let radial_nodes: Vec<f64> = gl.nodes.iter().map(|&x| 0.5 * (x + 1.0)).collect();
        let radial_weights: Vec<f64> = gl
            .weights
            .iter()
            .zip(&radial_nodes)
            .map(|(&w, &r)| 0.5 * w * r * r)
            .collect();
        let nq = centers.len();
        let mut values = DMatrix::zeros(nq, n_r);
        let mut normalizers = vec![0.0; nq];
        for (q, &c) in centers.iter().enumerate() {
            let raw: Vec<f64> = radial_nodes
                .iter()
                .map(|&r| (-(r - c) * (r - c) / (2.0 * sigma * sigma)).exp())
                .collect();
            let norm2: f64 = raw.iter().zip(&radial_weights).map(|(v, w)| v * v * w).sum();
            normalizers[q] = 1.0 / norm2.sqrt();
            for n in 0..n_r {
                values[(q, n)] = raw[n] * normalizers[q];
            }
        }
        let mut overlap = DMatrix::zeros(nq, nq);
        for a in 0..nq {
            for b in 0..nq {
                overlap[(a, b)] = (0..n_r).map(|n| radial_weights[n] * values[(a, n)] * values[(b, n)]).sum();
            }
        }
        let mut triple = vec![0.0; nq * nq * nq];
        for a in 0..nq {
            for b in a..nq {
                for c in b..nq {
                    let t: f64 = (0..n_r)
                        .map(|n| radial_weights[n] * values[(a, n)] * values[(b, n)] * values[(c, n)])
                        .sum();
                    for (i, j, k) in [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)] {
                        triple[(i * nq + j) * nq + k] = t;
                    }
                }
            }
        }
        Ok(Self { centers, width: sigma, normalizers, radial_nodes, radial_weights, values, overlap, triple })
    }
}

/// Shell basis with centers q/(R_max+1), q = 1..R_max.
pub fn make_shell_basis(r_max: usize, sigma_sh: f64, n_r: usize) -> Result<ShellBasis> {
    if r_max == 0 {
        return invalid("shell basis needs at least one shell");
    }
    let centers = (1..=r_max).map(|q| q as f64 / (r_max as f64 + 1.0)).collect();
    ShellBasis::with_centers(centers, sigma_sh, n_r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn legendre_low_degrees() {
        assert_eq!(legendre_p(0, 0.3).unwrap(), 1.0);
        assert_eq!(legendre_p(1, -0.7).unwrap(), -0.7);
        assert_abs_diff_eq!(legendre_p(2, 0.5).unwrap(), -0.125, epsilon = 1e-15);
        assert!(legendre_p(MAX_LEGENDRE_DEGREE + 1, 0.1).is_err());
        assert!(legendre_p(3, 1.5).is_err());
    }

    #[test]
    fn harmonic_constants() {
        let y00 = sph_harm(0, 0, 0.4, 1.0).unwrap();
        assert_abs_diff_eq!(y00.re, 1.0 / (4.0 * PI).sqrt(), epsilon = 1e-15);
        let y10 = sph_harm(1, 0, 0.0, 0.3).unwrap();
        assert_abs_diff_eq!(y10.re, (3.0 / (4.0 * PI)).sqrt(), epsilon = 1e-15);
        assert!(sph_harm(2, 3, 0.1, 0.1).is_err());
    }

    #[test]
    fn conjugation_symmetry() {
        for ell in 0..8usize {
            for m in 1..=ell as i64 {
                let a = sph_harm(ell, m, 0.7, 2.1).unwrap();
                let b = sph_harm(ell, -m, 0.7, 2.1).unwrap();
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                assert_abs_diff_eq!((b - a.conj() * sign).norm(), 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn three_j_examples() {
        assert_abs_diff_eq!(wigner3j(1, 1, 0, 0, 0, 0), -1.0 / 3f64.sqrt(), epsilon = 1e-15);
        assert_eq!(wigner3j(1, 1, 1, 0, 0, 0), 0.0);
        assert_eq!(gaunt(1, 2, 4, 0, 0, 0), 0.0);
        assert_abs_diff_eq!(gaunt(0, 0, 0, 0, 0, 0), 1.0 / (4.0 * PI).sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn gauss_legendre_small() {
        assert!(gauss_legendre(0).is_err());
        let q = gauss_legendre(2).unwrap();
        let v: f64 = q.nodes.iter().zip(&q.weights).map(|(x, w)| w * x * x).sum();
        assert_abs_diff_eq!(v, 2.0 / 3.0, epsilon = 1e-14);
        let q = gauss_legendre(4).unwrap();
        let v: f64 = q
            .nodes
            .iter()
            .zip(&q.weights)
            .map(|(&x, w)| w * legendre_unchecked(3, x).powi(2))
            .sum();
        assert_abs_diff_eq!(v, 2.0 / 7.0, epsilon = 1e-14);
        for k in [1, 5, 17, 64] {
            let q = gauss_legendre(k).unwrap();
            assert_abs_diff_eq!(q.weights.iter().sum::<f64>(), 2.0, epsilon = 1e-13);
            assert!(q.nodes.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn fibonacci_basic() {
        assert!(fibonacci_sphere(15).is_err());
        let q = fibonacci_sphere(3072).unwrap();
        assert_abs_diff_eq!(q.weights.iter().sum::<f64>(), 4.0 * PI, epsilon = 1e-10);
        let mut mean = [0.0; 3];
        for d in &q.directions {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-12);
            for k in 0..3 {
                mean[k] += d[k] / q.len() as f64;
            }
        }
        assert!(mean.iter().all(|m| m.abs() < 1e-3));
        let y10: f64 = (0..q.len())
            .map(|i| {
                let (t, p) = q.angles(i);
                q.weights[i] * sph_harm(1, 0, t, p).unwrap().re
            })
            .sum();
        assert!(y10.abs() < 1e-6);
    }

    #[test]
    fn product_rule_orthonormality() {
        let q = gauss_product_sphere(8, 16).unwrap();
        let table = q.harmonics_table(7);
        let n = lm_count(7);
        for a in 0..n {
            for b in 0..n {
                let v: Complex64 = (0..q.len()).map(|i| table[i * n + a].conj() * table[i * n + b] * q.weights[i]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert_abs_diff_eq!((v - want).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn shell_basis_properties() {
        let b = ShellBasis::standard(8).unwrap();
        for a in 0..8 {
            assert_abs_diff_eq!(b.overlap[(a, a)], 1.0, epsilon = 1e-10);
            assert!(b.triple_overlap(a, a, a) > 0.0);
        }
        assert_abs_diff_eq!(b.triple_overlap(1, 3, 5), b.triple_overlap(5, 1, 3), epsilon = 0.0);
        let far = ShellBasis::with_centers(vec![0.2, 0.8], 0.01, 64).unwrap();
        assert!(far.overlap[(0, 1)].abs() < 1e-8);
        assert!(make_shell_basis(4, 0.0, 64).is_err());
    }
}
