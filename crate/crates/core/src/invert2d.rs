//! Image recovery from rotation moments: per-ring bispectrum inversion,
//! spectral angular synchronization between rings and polar resampling.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::extract2d::{dft2_unitary, dft_unitary, idft_unitary, Moment2_2D, Moment3_2D, PolarSpec2D};
use crate::grids_io::Grid;

/// Bins below this fraction of the largest amplitude carry no phase information.
pub const BIN_FLOOR: f64 = 1e-7;
/// Relative size of |c[1]| below which the gauge anchor is unusable.
pub const ANCHOR_FLOOR: f64 = 1e-9;

/// Default harmonic cutoff for N_φ samples.
pub fn default_cutoff(n_phi: usize) -> usize {
    ((n_phi.saturating_sub(1)) / 2).min(64)
}

/// Amplitudes and phases of one ring for m = 0..=K.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingSpectrum {
    pub amplitudes: Vec<f64>,
    pub phases: Vec<f64>,
    pub k: usize,
}

impl RingSpectrum {
    pub fn coefficient(&self, m: i64) -> Complex64 {
        let a = m.unsigned_abs() as usize;
        if a > self.k {
            return Complex64::new(0.0, 0.0);
        }
        let c = Complex64::from_polar(self.amplitudes[a], self.phases[a]);
        if m < 0 {
            c.conj()
        } else {
            c
        }
    }

    /// Spectrum of the ring rotated so that â(φ) = a(φ + α).
    pub fn shifted(&self, alpha: f64) -> Self {
        let phases = self.phases.iter().enumerate().map(|(m, p)| p + m as f64 * alpha).collect();
        Self { amplitudes: self.amplitudes.clone(), phases, k: self.k }
    }
}

/// Offsets θ̂_r with θ̂_1 = 0 and the second-to-first eigenvalue ratio of H.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncSolution {
    pub offsets: Vec<f64>,
    pub affinity_gap: f64,
}

/// |c[m]| = √max(0, √N·F{M²(q,q,·)}[m]) for m = 0..N−1 and the number of
/// bins clamped at zero.
pub fn amplitudes_from_m2(m2: &Moment2_2D, q: usize) -> Result<(Vec<f64>, usize)> {
    if q >= m2.rings {
        return invalid(format!("ring {q} is not present"));
    }
    let slice = m2.slice(q, q);
    if slice.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptyRing(q));
    }
    let n = m2.n_phi as f64;
    let power: Vec<f64> = dft_unitary(slice).iter().map(|z| z.re * n.sqrt()).collect();
    let pmax = power.iter().cloned().fold(0.0, f64::max);
    // powers at roundoff level of the largest bin are zero
    let noise = 64.0 * f64::EPSILON * pmax;
    let mut clamped = 0;
    let amps = power
        .iter()
        .map(|&p| {
            if p < -noise {
                clamped += 1;
            }
            if p <= noise {
                0.0
            } else {
                p.sqrt()
            }
        })
        .collect();
    Ok((amps, clamped))
}

/// B[m1][m2] = c[m1]c[m2]c[−m1−m2] from the (q,q,q) slice, row-major N×N.
pub fn per_ring_bispectrum(m3: &Moment3_2D, q: usize) -> Result<Vec<Complex64>> {
    let slice = m3
        .slice([q, q, q])
        .ok_or_else(|| Error::InvalidArgument(format!("third-order slice for ring {q} is missing")))?;
    let n = m3.n_phi;
    let scale = (n as f64).sqrt();
    Ok(dft2_unitary(slice, n).into_iter().map(|z| z * scale).collect())
}

/// Sequential weighted circular-mean phase recursion with θ_1 = 0. The sign
/// of c[0] comes from B[0,0] = c[0]³.
pub fn recover_phases(b: &[Complex64], amplitudes: &[f64], k: usize) -> Result<Vec<f64>> {
    let n = amplitudes.len();
    if b.len() != n * n {
        return invalid("bispectrum table does not match the amplitude length");
    }
    if k == 0 || 2 * k >= n {
        return invalid(format!("harmonic cutoff {k} must lie in 1..N/2"));
    }
    let amax = amplitudes.iter().cloned().fold(0.0, f64::max);
    if !(amplitudes[1] > ANCHOR_FLOOR * amax) {
        return Err(Error::GaugeAnchorMissing(amplitudes[1], 1));
    }
    let floor = BIN_FLOOR * amax;
    let at = |m1: usize, m2: usize| b[(m1 % n) * n + m2 % n];
    let mut theta = vec![0.0; k + 1];
    theta[0] = if at(0, 0).re < 0.0 { PI } else { 0.0 };
    for m in 2..=k {
        if amplitudes[m] < floor {
            continue;
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 1..m {
            let (a1, a2) = (amplitudes[j], amplitudes[m - j]);
            if a1 < floor || a2 < floor {
                continue;
            }
            let w = a1 * a2 * amplitudes[m];
            acc += Complex64::from_polar(w, theta[j] + theta[m - j] - at(j, m - j).arg());
        }
        theta[m] = if acc.norm() > 0.0 { acc.arg() } else { 0.0 };
    }
    Ok(theta)
}

/// Inverse DFT of the Hermitian-completed coefficients |m| ≤ K.
pub fn assemble_ring(spectrum: &RingSpectrum, n_phi: usize) -> Result<Vec<f64>> {
    if 2 * spectrum.k >= n_phi {
        return invalid("harmonic cutoff exceeds the Nyquist limit");
    }
    let mut c = vec![Complex64::new(0.0, 0.0); n_phi];
    for m in 0..=spectrum.k as i64 {
        c[m as usize] = spectrum.coefficient(m);
        if m > 0 {
            c[n_phi - m as usize] = spectrum.coefficient(-m);
        }
    }
    Ok(idft_unitary(&c).into_iter().map(|z| z.re).collect())
}

/// Full single-ring inversion from the moment tensors.
pub fn invert_ring(m2: &Moment2_2D, m3: &Moment3_2D, q: usize, k: usize) -> Result<(RingSpectrum, usize)> {
    let (amps, clamped) = amplitudes_from_m2(m2, q)?;
    let b = per_ring_bispectrum(m3, q)?;
    let phases = recover_phases(&b, &amps, k)?;
    Ok((RingSpectrum { amplitudes: amps[..=k].to_vec(), phases, k }, clamped))
}

/// Pooled relative offset α_i − α_j with harmonics de-scaled by branch
/// continuation from the lowest usable harmonic.
fn pool_edge(x: &[Complex64], ci: &RingSpectrum, cj: &RingSpectrum, k_set: &[usize]) -> Complex64 {
    let mut items: Vec<(usize, f64, f64)> = Vec::new();
    let xmax = k_set.iter().map(|&k| x[k].norm()).fold(0.0, f64::max);
    for &k in k_set {
        let (a, b) = (ci.coefficient(k as i64), cj.coefficient(k as i64));
        let w = x[k].norm() * a.norm() * b.norm();
        if x[k].norm() <= BIN_FLOOR * xmax || w == 0.0 {
            continue;
        }
        let q = a * b.conj() / x[k];
        items.push((k, q.arg(), w));
    }
    items.sort_by_key(|it| it.0);
    let mut acc = Complex64::new(0.0, 0.0);
    for (k, phase, w) in items {
        let kf = k as f64;
        let angle = if acc.norm() == 0.0 {
            phase / kf
        } else {
            let est = acc.arg();
            let n = ((kf * est - phase) / (2.0 * PI)).round();
            (phase + 2.0 * PI * n) / kf
        };
        acc += Complex64::from_polar(w, angle);
    }
    acc
}

fn leading_eigenvector(h: &DMatrix<Complex64>) -> Vec<Complex64> {
    let n = h.nrows();
    let shift = (0..n).map(|i| (0..n).map(|j| h[(i, j)].norm()).sum::<f64>()).fold(0.0, f64::max);
    let mut v = vec![Complex64::new(1.0 / (n as f64).sqrt(), 0.0); n];
    for _ in 0..1_000_000 {
        let mut w: Vec<Complex64> = (0..n)
            .map(|i| (0..n).map(|j| h[(i, j)] * v[j]).sum::<Complex64>() + v[i] * shift)
            .collect();
        let norm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        w.iter_mut().for_each(|z| *z /= norm);
        let diff = w.iter().zip(&v).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        v = w;
        if diff < 1e-12 {
            break;
        }
    }
    v
}

/// Spectral synchronization of per-ring rotations from cross slices of M².
/// `k_set` defaults to 1..=K when empty.
pub fn sync_rings(m2: &Moment2_2D, rings: &[RingSpectrum], k_set: &[usize]) -> Result<SyncSolution> {
    let r = rings.len();
    if r < 2 {
        return invalid("synchronization needs at least two rings");
    }
    if r > m2.rings {
        return invalid("more ring estimates than second-order rings");
    }
    let n = m2.n_phi;
    let kmax = rings.iter().map(|s| s.k).min().unwrap_or(0);
    let ks: Vec<usize> = if k_set.is_empty() { (1..=kmax).collect() } else { k_set.to_vec() };
    if ks.iter().any(|&k| k == 0 || k > kmax || 2 * k >= n) {
        return invalid("harmonic set must lie in 1..=K");
    }
    let mut h = DMatrix::<Complex64>::zeros(r, r);
    let root_n = (n as f64).sqrt();
    for i in 0..r {
        for j in (i + 1)..r {
            let x: Vec<Complex64> = dft_unitary(m2.slice(i, j)).into_iter().map(|z| (z * root_n).conj()).collect();
            let e = pool_edge(&x, &rings[i], &rings[j], &ks);
            h[(i, j)] = e;
            h[(j, i)] = e.conj();
        }
    }
    let wmax = h.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let mut seen = vec![false; r];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for j in 0..r {
            if !seen[j] && h[(i, j)].norm() > 1e-12 * wmax && wmax > 0.0 {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::SyncDisconnected(missing));
    }
    let u = leading_eigenvector(&h);
    let base = u[0].arg();
    let offsets = u.iter().map(|z| (z.arg() - base).rem_euclid(2.0 * PI)).collect();
    let mut eig: Vec<f64> = h.clone().symmetric_eigenvalues().iter().cloned().collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let gap = if eig[0] > 0.0 { (eig[1].abs() / eig[0]).clamp(0.0, 1.0) } else { 1.0 };
    Ok(SyncSolution { offsets, affinity_gap: gap })
}

/// Output raster for [`reconstruct_image_2d`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageLayout {
    pub n: usize,
    pub spacing: f64,
    pub radius: f64,
}

/// Ring samples onto a Cartesian grid: linear in r and φ, the centre blended
/// toward the innermost ring mean, radii beyond the last ring held at the
/// last ring up to R, zero outside R.
pub fn polar_to_cartesian(rings: &[Vec<f64>], radii: &[f64], layout: ImageLayout) -> Result<Grid> {
    let n_phi = rings.first().map(|r| r.len()).unwrap_or(0);
    if n_phi == 0 || rings.len() != radii.len() {
        return invalid("ring table does not match the radii");
    }
    let centre = rings[0].iter().sum::<f64>() / n_phi as f64;
    let last = radii.len() - 1;
    let along = |q: usize, phi: f64| {
        let u = phi.rem_euclid(2.0 * PI) / (2.0 * PI) * n_phi as f64;
        let i = (u.floor() as usize) % n_phi;
        let f = u - u.floor();
        rings[q][i] * (1.0 - f) + rings[q][(i + 1) % n_phi] * f
    };
    Grid::from_fn(&[layout.n, layout.n], layout.spacing, layout.radius, |p| {
        let r = p[0].hypot(p[1]);
        if r > layout.radius {
            return 0.0;
        }
        let phi = p[1].atan2(p[0]);
        if r <= radii[0] {
            let w = r / radii[0];
            return centre * (1.0 - w) + along(0, phi) * w;
        }
        if r >= radii[last] {
            return along(last, phi);
        }
        let q = radii.partition_point(|&x| x <= r) - 1;
        let w = (r - radii[q]) / (radii[q + 1] - radii[q]);
        along(q, phi) * (1.0 - w) + along(q + 1, phi) * w
    })
}

/// Diagnostics of a full planar inversion.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Inversion2D {
    pub spectra: Vec<RingSpectrum>,
    pub sync: SyncSolution,
    pub clamped_bins: usize,
}

/// Per-ring inversion, synchronization and polar resampling.
pub fn reconstruct_image_2d(
    m2: &Moment2_2D,
    m3: &Moment3_2D,
    spec: &PolarSpec2D,
    layout: ImageLayout,
    k: Option<usize>,
) -> Result<(Grid, Inversion2D)> {
    let rings = spec.r_max();
    if m2.rings != rings || m2.n_phi != spec.n_phi {
        return invalid("moments do not match the polar specification");
    }
    let k = k.unwrap_or_else(|| default_cutoff(spec.n_phi));
    let per_ring: Vec<Result<(RingSpectrum, usize)>> =
        (0..rings).into_par_iter().map(|q| invert_ring(m2, m3, q, k)).collect();
    let mut spectra = Vec::with_capacity(rings);
    let mut clamped = 0;
    for res in per_ring {
        let (s, c) = res?;
        spectra.push(s);
        clamped += c;
    }
    let sync = if rings >= 2 {
        sync_rings(m2, &spectra, &[])?
    } else {
        SyncSolution { offsets: vec![0.0], affinity_gap: 0.0 }
    };
    let aligned: Vec<RingSpectrum> = spectra.iter().zip(&sync.offsets).map(|(s, &t)| s.shifted(-t)).collect();
    let samples: Vec<Vec<f64>> = aligned.iter().map(|s| assemble_ring(s, spec.n_phi)).collect::<Result<_>>()?;
    let grid = polar_to_cartesian(&samples, &spec.ring_radii, layout)?;
    Ok((grid, Inversion2D { spectra: aligned, sync, clamped_bins: clamped }))
}
