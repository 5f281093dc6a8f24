//! Reduction of planar rigid-motion autocorrelations to rotation moments:
//! ring sampling, antipodal boundary weights, spectral accumulators and the
//! direct moment oracle.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grids_io::{grid_from_bytes, grid_to_bytes, Grid};
use crate::observe::SeObservationSet;

/// How the image is evaluated off the node lattice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Bilinear interpolation.
    #[default]
    Bilinear,
    /// Bilinear interpolation cut to the closed support disk about the origin.
    SupportMasked,
}

/// Which third-order ring triples are materialized.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripleSet {
    #[default]
    All,
    Diagonal,
    List(Vec<[usize; 3]>),
    None,
}

impl TripleSet {
    pub fn expand(&self, rings: usize) -> Result<Vec<[usize; 3]>> {
        Ok(match self {
            TripleSet::All => {
                let mut v = Vec::new();
                for a in 0..rings {
                    for b in a..rings {
                        for c in b..rings {
                            v.push([a, b, c]);
                        }
                    }
                }
                v
            }
            TripleSet::Diagonal => (0..rings).map(|q| [q, q, q]).collect(),
            TripleSet::List(list) => {
                let mut v: Vec<[usize; 3]> = Vec::with_capacity(list.len());
                for t in list {
                    if t.iter().any(|&q| q >= rings) {
                        return invalid(format!("triple {t:?} references a missing ring"));
                    }
                    let mut s = *t;
                    s.sort_unstable();
                    if !v.contains(&s) {
                        v.push(s);
                    }
                }
                v
            }
            TripleSet::None => Vec::new(),
        })
    }
}

/// Discretization of the planar extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarSpec2D {
    pub ring_radii: Vec<f64>,
    pub n_phi: usize,
    pub n_theta: usize,
    pub delta: f64,
    pub translation_grid: Vec<[f64; 2]>,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub triples: TripleSet,
}

impl PolarSpec2D {
    /// `rings` radii at midpoints of equal bins over (0, extent].
    pub fn midpoint_radii(extent: f64, rings: usize) -> Vec<f64> {
        (0..rings).map(|q| (q as f64 + 0.5) * extent / rings as f64).collect()
    }

    /// Boundary sample count resolving the circle of radius R at twice the grid rate.
    pub fn default_n_theta(support_radius: f64, spacing: f64) -> usize {
        let n = (4.0 * PI * support_radius / spacing).ceil() as usize;
        (n.max(64) + 1) & !1
    }

    pub fn r_max(&self) -> usize {
        self.ring_radii.len()
    }

    pub fn validate(&self, support_radius: f64) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return invalid(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.n_phi < 2 || self.n_phi % 2 != 0 {
            return invalid(format!("N_phi must be even and positive, got {}", self.n_phi));
        }
        if self.n_theta == 0 {
            return invalid("N_theta must be positive");
        }
        if self.ring_radii.is_empty() {
            return invalid("at least one ring is required");
        }
        if self.ring_radii[0] <= 0.0 || self.ring_radii.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("ring radii must be positive and strictly increasing");
        }
        if *self.ring_radii.last().unwrap() > support_radius * (1.0 + 1e-12) {
            return invalid("ring radii exceed the support radius");
        }
        if self.translation_grid.is_empty() {
            return invalid("translation grid is empty");
        }
        Ok(())
    }
}

/// Nodes within R·√(1−(1−δ)²) + margin·h of the origin, outside of which
/// the boundary weight of a centered signal vanishes.
pub fn translation_grid_centered(grid: &Grid, delta: f64, margin_px: f64) -> Vec<[f64; 2]> {
    let rad = grid.support_radius * (1.0 - (1.0 - delta).powi(2)).sqrt() + margin_px * grid.spacing;
    (0..grid.len())
        .map(|i| grid.node_position(i))
        .filter(|p| p[0] * p[0] + p[1] * p[1] <= rad * rad)
        .map(|p| [p[0], p[1]])
        .collect()
}

/// Every node of a centered lattice of the given shape.
pub fn translation_grid_all(shape: &[usize], spacing: f64) -> Vec<[f64; 2]> {
    let c = |n: usize, i: usize| (i as f64 - 0.5 * (n as f64 - 1.0)) * spacing;
    let mut v = Vec::with_capacity(shape[0] * shape[1]);
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            v.push([c(shape[0], i), c(shape[1], j)]);
        }
    }
    v
}

#[inline]
fn sample(grid: &Grid, mode: Sampling, x: f64, y: f64) -> f64 {
    match mode {
        Sampling::Bilinear => grid.sample2(x, y),
        Sampling::SupportMasked => {
            let r = grid.support_radius;
            if x * x + y * y > r * r {
                0.0
            } else {
                grid.sample2(x, y)
            }
        }
    }
}

fn unit_circle(n: usize) -> Vec<(f64, f64)> {
    (0..n)
        .map(|l| {
            let a = 2.0 * PI * l as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .collect()
}

/// a_q(φ_ℓ) = f(t + r_q(cos φ_ℓ, sin φ_ℓ)), rows indexed by ring.
pub fn ring_signals(grid: &Grid, center: [f64; 2], spec: &PolarSpec2D) -> Vec<Vec<f64>> {
    let dirs = unit_circle(spec.n_phi);
    ring_signals_with(grid, center, spec, &dirs)
}

fn ring_signals_with(grid: &Grid, t: [f64; 2], spec: &PolarSpec2D, dirs: &[(f64, f64)]) -> Vec<Vec<f64>> {
    spec.ring_radii
        .iter()
        .map(|&r| dirs.iter().map(|&(c, s)| sample(grid, spec.sampling, t[0] + r * c, t[1] + r * s)).collect())
        .collect()
}

fn boundary_weight_at(grid: &Grid, t: [f64; 2], spec: &PolarSpec2D, dirs: &[(f64, f64)]) -> f64 {
    let rb = grid.support_radius * (1.0 - spec.delta);
    let mut acc = 0.0;
    for &(c, s) in dirs {
        let a = sample(grid, spec.sampling, t[0] + rb * c, t[1] + rb * s);
        if a != 0.0 {
            acc += a * sample(grid, spec.sampling, t[0] - rb * c, t[1] - rb * s);
        }
    }
    acc * 2.0 * PI / dirs.len() as f64
}

/// s_h(t_j) for every center of Λ and D_h = Σ_j s_h(t_j).
pub fn boundary_weights(grid: &Grid, spec: &PolarSpec2D) -> Result<(Vec<f64>, f64)> {
    if grid.dim != 2 {
        return invalid("planar extraction needs a 2D grid");
    }
    spec.validate(grid.support_radius)?;
    let dirs = unit_circle(spec.n_theta);
    let s: Vec<f64> =
        spec.translation_grid.par_iter().map(|&t| boundary_weight_at(grid, t, spec, &dirs)).collect();
    let d: f64 = s.iter().sum();
    if !(d.abs() > 0.0) || !d.is_finite() {
        return Err(Error::DegenerateBoundary(d));
    }
    Ok((s, d))
}

/// Second-order tensor over all ring pairs; index (q1, q2, Δφ index).
#[derive(Clone, Debug, PartialEq)]
pub struct Moment2_2D {
    pub rings: usize,
    pub n_phi: usize,
    pub values: Vec<f64>,
}

impl Moment2_2D {
    pub fn zeros(rings: usize, n_phi: usize) -> Self {
        Self { rings, n_phi, values: vec![0.0; rings * rings * n_phi] }
    }

    #[inline]
    pub fn get(&self, q1: usize, q2: usize, j: usize) -> f64 {
        self.values[(q1 * self.rings + q2) * self.n_phi + j % self.n_phi]
    }

    pub fn slice(&self, q1: usize, q2: usize) -> &[f64] {
        let o = (q1 * self.rings + q2) * self.n_phi;
        &self.values[o..o + self.n_phi]
    }

    fn slice_mut(&mut self, q1: usize, q2: usize) -> &mut [f64] {
        let o = (q1 * self.rings + q2) * self.n_phi;
        &mut self.values[o..o + self.n_phi]
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|v| *v *= k);
    }
}

/// Third-order tensor stored per sorted ring triple; each slice is indexed
/// (Δφ1, Δφ2) with ring q1 at lag 0, q2 at Δφ1 and q3 at Δφ2.
#[derive(Clone, Debug, PartialEq)]
pub struct Moment3_2D {
    pub rings: usize,
    pub n_phi: usize,
    pub slices: BTreeMap<[usize; 3], Vec<f64>>,
}

impl Moment3_2D {
    pub fn new(rings: usize, n_phi: usize) -> Self {
        Self { rings, n_phi, slices: BTreeMap::new() }
    }

    /// Value for any ring order; the stored sorted triple is re-referenced
    /// to the lag of its first ring.
    pub fn get(&self, q: [usize; 3], j1: usize, j2: usize) -> Option<f64> {
        let n = self.n_phi as i64;
        let lags = [0i64, j1 as i64, j2 as i64];
        let mut order = [0usize, 1, 2];
        order.sort_by_key(|&i| (q[i], i));
        let key = [q[order[0]], q[order[1]], q[order[2]]];
        let slice = self.slices.get(&key)?;
        let base = lags[order[0]];
        let a = (lags[order[1]] - base).rem_euclid(n) as usize;
        let b = (lags[order[2]] - base).rem_euclid(n) as usize;
        Some(slice[a * self.n_phi + b])
    }

    pub fn slice(&self, q: [usize; 3]) -> Option<&[f64]> {
        self.slices.get(&q).map(|v| v.as_slice())
    }

    pub fn scale(&mut self, k: f64) {
        for s in self.slices.values_mut() {
            s.iter_mut().for_each(|v| *v *= k);
        }
    }
}

const OBS_CHUNK: usize = 64;

struct Planner {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Planner {
    fn new(n: usize) -> Self {
        let mut p = FftPlanner::new();
        Self { fwd: p.plan_fft_forward(n), inv: p.plan_fft_inverse(n) }
    }
}

/// Streaming accumulator of the spectral sums Σ_j s_j c_{q1}[−m] c_{q2}[m]
/// and Σ_j s_j c_{q1}[−m1−m2] c_{q2}[m1] c_{q3}[m2].
struct SpectralAccumulator {
    rings: usize,
    n: usize,
    plan: Planner,
    pairs: Vec<Complex64>,
    triples: Vec<[usize; 3]>,
    triple_acc: Vec<Vec<Complex64>>,
    ring_mean: Vec<Vec<f64>>,
    weight_sum: f64,
}

impl SpectralAccumulator {
    fn new(rings: usize, n: usize, triples: Vec<[usize; 3]>) -> Self {
        let half = n / 2 + 1;
        let triple_acc = triples.iter().map(|_| vec![Complex64::new(0.0, 0.0); half * n]).collect();
        Self {
            rings,
            n,
            plan: Planner::new(n),
            pairs: vec![Complex64::new(0.0, 0.0); rings * rings * half],
            triples,
            triple_acc,
            ring_mean: vec![vec![0.0; n]; rings],
            weight_sum: 0.0,
        }
    }

    /// Unitary spectra of each ring row.
    fn spectra(&self, rows: &[Vec<f64>]) -> Vec<Vec<Complex64>> {
        let norm = 1.0 / (self.n as f64).sqrt();
        rows.iter()
            .map(|row| {
                let mut buf: Vec<Complex64> = row.iter().map(|&v| Complex64::new(v * norm, 0.0)).collect();
                self.plan.fwd.process(&mut buf);
                buf
            })
            .collect()
    }

    fn add(&mut self, s: f64, rows: &[Vec<f64>]) {
        self.weight_sum += s;
        if s == 0.0 {
            return;
        }
        for (acc, row) in self.ring_mean.iter_mut().zip(rows) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += s * v);
        }
        let c = self.spectra(rows);
        let n = self.n;
        let half = n / 2 + 1;
        let rings = self.rings;
        self.pairs.par_chunks_mut(rings * half).enumerate().for_each(|(q1, block)| {
            for q2 in 0..rings {
                let dst = &mut block[q2 * half..(q2 + 1) * half];
                for m in 0..half {
                    dst[m] += s * c[q1][m].conj() * c[q2][m];
                }
            }
        });
        let triples = &self.triples;
        self.triple_acc.par_iter_mut().zip(triples.par_iter()).for_each(|(acc, &[q1, q2, q3])| {
            let (c1, c2, c3) = (&c[q1], &c[q2], &c[q3]);
            for m1 in 0..half {
                let w = c2[m1] * s;
                let row = &mut acc[m1 * n..(m1 + 1) * n];
                let split = n - m1;
                for m2 in 0..split {
                    row[m2] += w * c3[m2] * c1[m1 + m2].conj();
                }
                for m2 in split..n {
                    row[m2] += w * c3[m2] * c1[m1 + m2 - n].conj();
                }
            }
        });
    }

    fn merge(&mut self, other: SpectralAccumulator) {
        self.weight_sum += other.weight_sum;
        self.pairs.iter_mut().zip(other.pairs).for_each(|(a, b)| *a += b);
        for (a, b) in self.triple_acc.iter_mut().zip(other.triple_acc) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        for (a, b) in self.ring_mean.iter_mut().zip(other.ring_mean) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    /// Raw numerators Γ² and Γ³ (not normalized).
    fn finish(&self) -> (Moment2_2D, Moment3_2D) {
        let n = self.n;
        let half = n / 2 + 1;
        let rings = self.rings;
        let mut m2 = Moment2_2D::zeros(rings, n);
        let inv_n = 1.0 / n as f64;
        let rows: Vec<Vec<f64>> = (0..rings * rings)
            .into_par_iter()
            .map(|pq| {
                let src = &self.pairs[pq * half..(pq + 1) * half];
                let mut buf = vec![Complex64::new(0.0, 0.0); n];
                for m in 0..n {
                    buf[m] = if m < half { src[m] } else { src[n - m].conj() };
                }
                self.plan.inv.process(&mut buf);
                buf.iter().map(|z| z.re * inv_n).collect()
            })
            .collect();
        for (pq, row) in rows.into_iter().enumerate() {
            m2.slice_mut(pq / rings, pq % rings).copy_from_slice(&row);
        }
        let scale = (n as f64).powf(-1.5);
        let slices: Vec<Vec<f64>> = self
            .triple_acc
            .par_iter()
            .map(|acc| {
                let mut full = vec![Complex64::new(0.0, 0.0); n * n];
                full[..half * n].copy_from_slice(acc);
                for m1 in half..n {
                    for m2 in 0..n {
                        full[m1 * n + m2] = acc[(n - m1) * n + (n - m2) % n].conj();
                    }
                }
                inverse_fft2(&self.plan, &mut full, n);
                full.iter().map(|z| z.re * scale).collect()
            })
            .collect();
        let mut m3 = Moment3_2D::new(rings, n);
        for (t, s) in self.triples.iter().zip(slices) {
            m3.slices.insert(*t, s);
        }
        (m2, m3)
    }
}

fn inverse_fft2(plan: &Planner, data: &mut [Complex64], n: usize) {
    for row in data.chunks_mut(n) {
        plan.inv.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = data[i * n + j];
        }
        plan.inv.process(&mut col);
        for i in 0..n {
            data[i * n + j] = col[i];
        }
    }
}

fn forward_fft2(plan: &Planner, data: &mut [Complex64], n: usize) {
    for row in data.chunks_mut(n) {
        plan.fwd.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        for i in 0..n {
            col[i] = data[i * n + j];
        }
        plan.fwd.process(&mut col);
        for i in 0..n {
            data[i * n + j] = col[i];
        }
    }
}

/// Unitary 2D DFT of an n×n real table.
pub fn dft2_unitary(values: &[f64], n: usize) -> Vec<Complex64> {
    let plan = Planner::new(n);
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v / n as f64, 0.0)).collect();
    forward_fft2(&plan, &mut buf, n);
    buf
}

/// Unitary 1D DFT of a real sequence.
pub fn dft_unitary(values: &[f64]) -> Vec<Complex64> {
    let n = values.len();
    let plan = Planner::new(n);
    let norm = 1.0 / (n as f64).sqrt();
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v * norm, 0.0)).collect();
    plan.fwd.process(&mut buf);
    buf
}

/// Unitary inverse DFT.
pub fn idft_unitary(spectrum: &[Complex64]) -> Vec<Complex64> {
    let n = spectrum.len();
    let plan = Planner::new(n);
    let norm = 1.0 / (n as f64).sqrt();
    let mut buf = spectrum.to_vec();
    plan.inv.process(&mut buf);
    buf.iter_mut().for_each(|z| *z *= norm);
    buf
}

fn check_weights(spec: &PolarSpec2D, weights: &[f64]) -> Result<()> {
    if weights.len() != spec.translation_grid.len() {
        return invalid("one weight per translation center is required");
    }
    Ok(())
}

fn accumulate(grid: &Grid, spec: &PolarSpec2D, weights: &[f64], triples: Vec<[usize; 3]>) -> SpectralAccumulator {
    let dirs = unit_circle(spec.n_phi);
    let mut acc = SpectralAccumulator::new(spec.r_max(), spec.n_phi, triples);
    for (t, &s) in spec.translation_grid.iter().zip(weights) {
        if s != 0.0 {
            let rows = ring_signals_with(grid, *t, spec, &dirs);
            acc.add(s, &rows);
        }
    }
    acc
}

/// Γ² with explicit per-center weights.
pub fn gamma2_fft_weighted(grid: &Grid, spec: &PolarSpec2D, weights: &[f64]) -> Result<Moment2_2D> {
    spec.validate(grid.support_radius)?;
    check_weights(spec, weights)?;
    Ok(accumulate(grid, spec, weights, Vec::new()).finish().0)
}

/// Γ³ with explicit per-center weights, for the spec's triple set.
pub fn gamma3_fft_weighted(grid: &Grid, spec: &PolarSpec2D, weights: &[f64]) -> Result<Moment3_2D> {
    spec.validate(grid.support_radius)?;
    check_weights(spec, weights)?;
    let triples = spec.triples.expand(spec.r_max())?;
    Ok(accumulate(grid, spec, weights, triples).finish().1)
}

/// Raw second-order numerator Γ²_h.
pub fn gamma2_fft(grid: &Grid, spec: &PolarSpec2D) -> Result<Moment2_2D> {
    let (s, _) = boundary_weights(grid, spec)?;
    gamma2_fft_weighted(grid, spec, &s)
}

/// Raw third-order numerator Γ³_h.
pub fn gamma3_fft(grid: &Grid, spec: &PolarSpec2D) -> Result<Moment3_2D> {
    let (s, _) = boundary_weights(grid, spec)?;
    gamma3_fft_weighted(grid, spec, &s)
}

/// O(N_φ²) spatial-domain Γ².
pub fn gamma2_direct(grid: &Grid, spec: &PolarSpec2D, weights: &[f64]) -> Result<Moment2_2D> {
    spec.validate(grid.support_radius)?;
    check_weights(spec, weights)?;
    let n = spec.n_phi;
    let rings = spec.r_max();
    let mut out = Moment2_2D::zeros(rings, n);
    for (t, &s) in spec.translation_grid.iter().zip(weights) {
        let a = ring_signals(grid, *t, spec);
        for q1 in 0..rings {
            for q2 in 0..rings {
                let dst = out.slice_mut(q1, q2);
                for (j, d) in dst.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for l in 0..n {
                        acc += a[q1][l] * a[q2][(l + j) % n];
                    }
                    *d += s * acc / n as f64;
                }
            }
        }
    }
    Ok(out)
}

/// O(N_φ³) spatial-domain Γ³ for the spec's triple set.
pub fn gamma3_direct(grid: &Grid, spec: &PolarSpec2D, weights: &[f64]) -> Result<Moment3_2D> {
    spec.validate(grid.support_radius)?;
    check_weights(spec, weights)?;
    let n = spec.n_phi;
    let triples = spec.triples.expand(spec.r_max())?;
    let mut out = Moment3_2D::new(spec.r_max(), n);
    for t in &triples {
        out.slices.insert(*t, vec![0.0; n * n]);
    }
    for (t, &s) in spec.translation_grid.iter().zip(weights) {
        let a = ring_signals(grid, *t, spec);
        for [q1, q2, q3] in &triples {
            let dst = out.slices.get_mut(&[*q1, *q2, *q3]).unwrap();
            for j1 in 0..n {
                for j2 in 0..n {
                    let mut acc = 0.0;
                    for l in 0..n {
                        acc += a[*q1][l] * a[*q2][(l + j1) % n] * a[*q3][(l + j2) % n];
                    }
                    dst[j1 * n + j2] += s * acc / n as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Extracted moments M = Γ / D_h.
pub fn extract_moments_2d(grid: &Grid, spec: &PolarSpec2D) -> Result<(Moment2_2D, Moment3_2D)> {
    let (s, d) = boundary_weights(grid, spec)?;
    let triples = spec.triples.expand(spec.r_max())?;
    let (mut m2, mut m3) = accumulate(grid, spec, &s, triples).finish();
    m2.scale(1.0 / d);
    m3.scale(1.0 / d);
    Ok((m2, m3))
}

/// Bilinear stencil of a point relative to a node: (node offset, weight).
fn stencil(p: [f64; 2], h: f64) -> [([i64; 2], f64); 4] {
    let u = p[0] / h;
    let v = p[1] / h;
    let (i, j) = (u.floor(), v.floor());
    let (fx, fy) = (u - i, v - j);
    let (i, j) = (i as i64, j as i64);
    [
        ([i, j], (1.0 - fx) * (1.0 - fy)),
        ([i, j + 1], (1.0 - fx) * fy),
        ([i + 1, j], fx * (1.0 - fy)),
        ([i + 1, j + 1], fx * fy),
    ]
}

/// Noise covariance between ring samples through shared interpolation nodes:
/// pairs (q_a, ℓ_a, q_b, ℓ_b, σ²/h²·Σ w_a w_b) over ordered pairs, including self pairs.
fn ring_noise_covariances(spec: &PolarSpec2D, h: f64, sigma: f64) -> Vec<(usize, usize, usize, usize, f64)> {
    let dirs = unit_circle(spec.n_phi);
    let mut nodes: HashMap<[i64; 2], Vec<(usize, usize, f64)>> = HashMap::new();
    for (q, &r) in spec.ring_radii.iter().enumerate() {
        for (l, &(c, s)) in dirs.iter().enumerate() {
            for (node, w) in stencil([r * c, r * s], h) {
                if w != 0.0 {
                    nodes.entry(node).or_default().push((q, l, w));
                }
            }
        }
    }
    let k = sigma * sigma / (h * h);
    let mut merged: HashMap<(usize, usize, usize, usize), f64> = HashMap::new();
    for list in nodes.values() {
        for &(qa, la, wa) in list {
            for &(qb, lb, wb) in list {
                *merged.entry((qa, la, qb, lb)).or_insert(0.0) += k * wa * wb;
            }
        }
    }
    let mut out: Vec<_> = merged.into_iter().map(|((a, b, c, d), v)| (a, b, c, d, v)).collect();
    out.sort_by(|x, y| (x.0, x.1, x.2, x.3).cmp(&(y.0, y.1, y.2, y.3)));
    out
}

/// Streaming form of [`extract_moments_2d_empirical`]. Observations are
/// pushed one at a time; partial extractors over disjoint observations merge.
pub struct EmpiricalExtractor2D<'a> {
    spec: &'a PolarSpec2D,
    sigma: f64,
    shape: Vec<usize>,
    spacing: f64,
    dirs_theta: Vec<(f64, f64)>,
    dirs_phi: Vec<(f64, f64)>,
    acc: SpectralAccumulator,
    count: usize,
}

impl<'a> EmpiricalExtractor2D<'a> {
    /// `layout` is the padded observation layout D̄ and `pad` the node margin
    /// separating it from the integration domain D.
    pub fn new(spec: &'a PolarSpec2D, layout: &Grid, pad: usize, sigma: f64) -> Result<Self> {
        if layout.dim != 2 {
            return invalid("planar extraction needs 2D observations");
        }
        if !(sigma >= 0.0) {
            return invalid("sigma must be non-negative");
        }
        let radius = layout.support_radius;
        spec.validate(radius)?;
        let h = layout.spacing;
        let gap = radius * (1.0 - spec.delta) - spec.ring_radii.last().unwrap();
        if sigma > 0.0 && gap < 2.0 * std::f64::consts::SQRT_2 * h {
            return invalid(format!(
                "outer ring must stay {:.4} inside the boundary circle, gap is {gap:.4}",
                2.0 * std::f64::consts::SQRT_2 * h
            ));
        }
        if layout.shape.iter().any(|&n| n <= 2 * pad) {
            return invalid("padding leaves an empty integration domain");
        }
        let half: Vec<f64> = layout.shape.iter().map(|&n| 0.5 * ((n - 2 * pad) as f64 - 1.0) * h + 1e-9).collect();
        if spec.translation_grid.iter().any(|t| t[0].abs() > half[0] || t[1].abs() > half[1]) {
            return invalid("translation centers leave the integration domain");
        }
        let triples = spec.triples.expand(spec.r_max())?;
        Ok(Self {
            spec,
            sigma,
            shape: layout.shape.clone(),
            spacing: h,
            dirs_theta: unit_circle(spec.n_theta),
            dirs_phi: unit_circle(spec.n_phi),
            acc: SpectralAccumulator::new(spec.r_max(), spec.n_phi, triples),
            count: 0,
        })
    }

    pub fn push(&mut self, obs: &Grid) -> Result<()> {
        if obs.shape != self.shape || obs.spacing != self.spacing {
            return invalid("observations have mixed layouts");
        }
        for t in &self.spec.translation_grid {
            let s = boundary_weight_at(obs, *t, self.spec, &self.dirs_theta);
            if s != 0.0 {
                self.acc.add(s, &ring_signals_with(obs, *t, self.spec, &self.dirs_phi));
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Absorbs an extractor built with the same specification and layout.
    pub fn merge(&mut self, other: EmpiricalExtractor2D<'_>) -> Result<()> {
        if other.shape != self.shape || other.spacing != self.spacing || other.sigma != self.sigma {
            return invalid("cannot merge extractors with different layouts");
        }
        self.acc.merge(other.acc);
        self.count += other.count;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Normalized, noise-corrected moments.
    pub fn finish(self) -> Result<(Moment2_2D, Moment3_2D)> {
        if self.count == 0 {
            return invalid("empty observation set");
        }
        let (spec, total, h) = (self.spec, self.acc, self.spacing);
        let sigma = self.sigma;
        let d = total.weight_sum;
        if !(d.abs() > 0.0) || !d.is_finite() {
            return Err(Error::DegenerateBoundary(d));
        }
        let (mut m2, mut m3) = total.finish();
        m2.scale(1.0 / d);
        m3.scale(1.0 / d);
        if sigma > 0.0 {
            let n = spec.n_phi;
            let cov = ring_noise_covariances(spec, h, sigma);
            for &(qa, la, qb, lb, c) in &cov {
                let j = (lb + n - la) % n;
                m2.slice_mut(qa, qb)[j] -= c / n as f64;
            }
            let ring_mean = &total.ring_mean;
            let inv = 1.0 / (n as f64 * d);
            for (&key, slice) in m3.slices.iter_mut() {
                for &(qa, la, qb, lb, c) in &cov {
                    // slot pairs (0,1), (0,2), (1,2) with the third slot free
                    for (sa, sb, sf) in [(0usize, 1usize, 2usize), (0, 2, 1), (1, 2, 0)] {
                        if key[sa] != qa || key[sb] != qb {
                            continue;
                        }
                        let free = &ring_mean[key[sf]];
                        for x in 0..n {
                            let mut angle = [0usize; 3];
                            angle[sa] = la;
                            angle[sb] = lb;
                            angle[sf] = x;
                            let l1 = (angle[1] + n - angle[0]) % n;
                            let l2 = (angle[2] + n - angle[0]) % n;
                            slice[l1 * n + l2] -= c * free[angle[sf]] * inv;
                        }
                    }
                }
            }
        }
        Ok((m2, m3))
    }
}

/// Empirical extracted moments from noisy rigid-motion observations. Every
/// center of `spec.translation_grid` must lie in the integration domain D.
/// Pairing corrections use the interpolation-stencil noise covariance; ring
/// samples must stay at least 2√2·h from the boundary circle.
pub fn extract_moments_2d_empirical(
    set: &SeObservationSet,
    spec: &PolarSpec2D,
) -> Result<(Moment2_2D, Moment3_2D)> {
    let first = set.observations.first().ok_or_else(|| Error::InvalidArgument("empty observation set".into()))?;
    EmpiricalExtractor2D::new(spec, first, set.pad, set.sigma)?;
    // fixed chunks merged in order keep the sums independent of the thread count
    let parts: Vec<Result<EmpiricalExtractor2D>> = set
        .observations
        .par_chunks(OBS_CHUNK)
        .map(|chunk| {
            let mut ext = EmpiricalExtractor2D::new(spec, first, set.pad, set.sigma)?;
            for obs in chunk {
                ext.push(obs)?;
            }
            Ok(ext)
        })
        .collect();
    let mut parts = parts.into_iter();
    let mut total = parts.next().unwrap()?;
    for ext in parts {
        total.merge(ext?)?;
    }
    total.finish()
}

/// Ground-truth rotation moments at the origin from N_rot uniform rotations.
/// N_rot must be a multiple of N_φ so lags are whole fine-grid shifts.
pub fn so2_moments_direct(grid: &Grid, spec: &PolarSpec2D, n_rot: usize) -> Result<(Moment2_2D, Moment3_2D)> {
    if grid.dim != 2 {
        return invalid("planar moments need a 2D grid");
    }
    let n = spec.n_phi;
    if n == 0 || n_rot < n || n_rot % n != 0 {
        return invalid(format!("N_rot = {n_rot} must be a positive multiple of N_phi = {n}"));
    }
    let k = n_rot / n;
    let dirs = unit_circle(n_rot);
    let rings = spec.r_max();
    let b = ring_signals_with(grid, [0.0, 0.0], spec, &dirs);
    let inv = 1.0 / n_rot as f64;
    let mut m2 = Moment2_2D::zeros(rings, n);
    let rows: Vec<Vec<f64>> = (0..rings * rings)
        .into_par_iter()
        .map(|pq| {
            let (q1, q2) = (pq / rings, pq % rings);
            (0..n)
                .map(|j| (0..n_rot).map(|l| b[q1][l] * b[q2][(l + j * k) % n_rot]).sum::<f64>() * inv)
                .collect()
        })
        .collect();
    for (pq, row) in rows.into_iter().enumerate() {
        m2.slice_mut(pq / rings, pq % rings).copy_from_slice(&row);
    }
    let mut m3 = Moment3_2D::new(rings, n);
    for key in spec.triples.expand(rings)? {
        let [q1, q2, q3] = key;
        let slice: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|jj| {
                let (j1, j2) = (jj / n, jj % n);
                (0..n_rot).map(|l| b[q1][l] * b[q2][(l + j1 * k) % n_rot] * b[q3][(l + j2 * k) % n_rot]).sum::<f64>()
                    * inv
            })
            .collect();
        m3.slices.insert(key, slice);
    }
    Ok((m2, m3))
}

/// Normalized MSE ‖a − b‖²/‖a‖² with `a` the reference tensor.
pub fn mse_m2(a: &Moment2_2D, b: &Moment2_2D) -> Result<f64> {
    if a.rings != b.rings || a.n_phi != b.n_phi {
        return invalid("second-order tensors have different shapes");
    }
    let diff: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum();
    normalized(diff, a.values.iter().map(|x| x * x).sum())
}

/// Normalized MSE over the triples present in both tensors, `a` the reference.
pub fn mse_m3(a: &Moment3_2D, b: &Moment3_2D) -> Result<f64> {
    if a.n_phi != b.n_phi {
        return invalid("third-order tensors have different lag grids");
    }
    let (mut diff, mut norm) = (0.0, 0.0);
    let mut shared = false;
    for (k, va) in &a.slices {
        if let Some(vb) = b.slices.get(k) {
            diff += va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            norm += va.iter().map(|x| x * x).sum::<f64>();
            shared = true;
        }
    }
    if !shared {
        return invalid("no common triples");
    }
    normalized(diff, norm)
}

fn normalized(diff: f64, norm: f64) -> Result<f64> {
    if !(norm > 0.0) {
        return invalid("reference tensor is zero");
    }
    Ok(diff / norm)
}

#[derive(Serialize, Deserialize)]
struct MomentSidecar {
    order: usize,
    ring_radii: Vec<f64>,
    n_phi: usize,
    delta: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    triples: Vec<[usize; 3]>,
}

/// Writes `<stem>.m2.orgd`/`.json` and `<stem>.m3.orgd`/`.json`.
pub fn save_moments_2d(
    m2: &Moment2_2D,
    m3: &Moment3_2D,
    spec: &PolarSpec2D,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<()> {
    let dir = dir.as_ref();
    let mut g2 = Grid::zeros(&[m2.rings, m2.rings, m2.n_phi], 1.0, 0.0)?;
    g2.values.copy_from_slice(&m2.values);
    std::fs::write(dir.join(format!("{stem}.m2.orgd")), grid_to_bytes(&g2)?)?;
    let side2 = MomentSidecar {
        order: 2,
        ring_radii: spec.ring_radii.clone(),
        n_phi: spec.n_phi,
        delta: spec.delta,
        triples: Vec::new(),
    };
    std::fs::write(dir.join(format!("{stem}.m2.json")), serde_json::to_string_pretty(&side2)?)?;
    let triples: Vec<[usize; 3]> = m3.slices.keys().copied().collect();
    if !triples.is_empty() {
        let n = m3.n_phi;
        let mut g3 = Grid::zeros(&[triples.len().max(2), n, n], 1.0, 0.0)?;
        for (i, s) in m3.slices.values().enumerate() {
            g3.values[i * n * n..(i + 1) * n * n].copy_from_slice(s);
        }
        std::fs::write(dir.join(format!("{stem}.m3.orgd")), grid_to_bytes(&g3)?)?;
        let side3 = MomentSidecar { order: 3, triples, ..side2 };
        std::fs::write(dir.join(format!("{stem}.m3.json")), serde_json::to_string_pretty(&side3)?)?;
    }
    Ok(())
}

/// Reads tensors written by [`save_moments_2d`]; returns the ring radii too.
pub fn load_moments_2d(dir: impl AsRef<Path>, stem: &str) -> Result<(Moment2_2D, Moment3_2D, Vec<f64>)> {
    let dir = dir.as_ref();
    let g2 = grid_from_bytes(&std::fs::read(dir.join(format!("{stem}.m2.orgd")))?)?;
    let side2: MomentSidecar = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.m2.json")))?)?;
    let rings = side2.ring_radii.len();
    if g2.shape != [rings, rings, side2.n_phi] {
        return invalid("second-order payload does not match its sidecar");
    }
    let m2 = Moment2_2D { rings, n_phi: side2.n_phi, values: g2.values };
    let mut m3 = Moment3_2D::new(rings, side2.n_phi);
    let p3 = dir.join(format!("{stem}.m3.orgd"));
    if p3.exists() {
        let g3 = grid_from_bytes(&std::fs::read(p3)?)?;
        let side3: MomentSidecar =
            serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.m3.json")))?)?;
        let n = side3.n_phi;
        if g3.shape[1] != n || g3.shape[2] != n || g3.shape[0] < side3.triples.len() {
            return invalid("third-order payload does not match its sidecar");
        }
        for (i, t) in side3.triples.iter().enumerate() {
            m3.slices.insert(*t, g3.values[i * n * n..(i + 1) * n * n].to_vec());
        }
    }
    Ok((m2, m3, side2.ring_radii))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(n: usize, seed: u64) -> Grid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Grid::zeros(&[n, n], 1.0, 0.5 * (n as f64 - 1.0)).unwrap();
        g.values.iter_mut().for_each(|v| *v = rng.gen::<f64>());
        g
    }

    fn small_spec() -> PolarSpec2D {
        PolarSpec2D {
            ring_radii: PolarSpec2D::midpoint_radii(6.0, 4),
            n_phi: 16,
            n_theta: 64,
            delta: 0.3,
            translation_grid: vec![[0.5, 0.5], [-1.5, 0.5], [2.5, -1.5]],
            sampling: Sampling::Bilinear,
            triples: TripleSet::List(vec![[0, 1, 3], [2, 2, 2], [1, 1, 3]]),
        }
    }

    #[test]
    fn fft_matches_direct() {
        let g = random_image(32, 5);
        let spec = small_spec();
        let w = [0.7, 1.3, -0.4];
        let a = gamma2_fft_weighted(&g, &spec, &w).unwrap();
        let b = gamma2_direct(&g, &spec, &w).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        let a = gamma3_fft_weighted(&g, &spec, &w).unwrap();
        let b = gamma3_direct(&g, &spec, &w).unwrap();
        for (k, va) in &a.slices {
            for (x, y) in va.iter().zip(&b.slices[k]) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constant_rings() {
        let g = Grid::from_fn(&[33, 33], 1.0, 16.0, |p| if p[0].hypot(p[1]) < 5.0 { 2.0 } else { 3.0 }).unwrap();
        let spec = PolarSpec2D {
            ring_radii: vec![2.0, 9.0],
            n_phi: 12,
            n_theta: 64,
            delta: 0.1,
            translation_grid: vec![[0.0, 0.0]],
            sampling: Sampling::Bilinear,
            triples: TripleSet::All,
        };
        let m2 = gamma2_fft_weighted(&g, &spec, &[1.0]).unwrap();
        for j in 0..12 {
            assert_abs_diff_eq!(m2.get(0, 1, j), 6.0, epsilon = 1e-12);
        }
        let m3 = gamma3_fft_weighted(&g, &spec, &[1.0]).unwrap();
        assert_abs_diff_eq!(m3.get([0, 1, 1], 3, 7).unwrap(), 18.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m3.get([1, 0, 1], 5, 2).unwrap(), 18.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_disk_boundary_weight() {
        let g = Grid::from_fn(&[41, 41], 0.5, 10.0, |_| 1.5).unwrap();
        let spec = PolarSpec2D {
            ring_radii: vec![1.0],
            n_phi: 8,
            n_theta: 100,
            delta: 0.05,
            translation_grid: vec![[0.0, 0.0]],
            sampling: Sampling::SupportMasked,
            triples: TripleSet::None,
        };
        let (s, d) = boundary_weights(&g, &spec).unwrap();
        assert_abs_diff_eq!(s[0], 2.0 * PI * 2.25, epsilon = 1e-12);
        assert_abs_diff_eq!(d, s[0]);
    }

    #[test]
    fn vanishing_boundary_is_degenerate() {
        let g = Grid::from_fn(&[41, 41], 0.5, 10.0, |p| if p[0].hypot(p[1]) < 5.0 { 1.0 } else { 0.0 }).unwrap();
        let spec = PolarSpec2D {
            ring_radii: vec![1.0],
            n_phi: 8,
            n_theta: 100,
            delta: 0.05,
            translation_grid: translation_grid_centered(&g, 0.05, 2.0),
            sampling: Sampling::Bilinear,
            triples: TripleSet::None,
        };
        assert_eq!(extract_moments_2d(&g, &spec).unwrap_err().code(), "degenerate-boundary");
    }

    #[test]
    fn permuted_triple_lookup() {
        let g = random_image(24, 9);
        let mut spec = small_spec();
        spec.triples = TripleSet::List(vec![[0, 1, 2]]);
        spec.translation_grid = vec![[0.0, 0.0]];
        let m3 = gamma3_direct(&g, &spec, &[1.0]).unwrap();
        let a = ring_signals(&g, [0.0, 0.0], &spec);
        let n = spec.n_phi;
        let (j1, j2) = (3usize, 11usize);
        // ring 2 at lag 0, ring 0 at j1, ring 1 at j2
        let direct: f64 = (0..n).map(|l| a[2][l] * a[0][(l + j1) % n] * a[1][(l + j2) % n]).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(m3.get([2, 0, 1], j1, j2).unwrap(), direct, epsilon = 1e-12);
    }

    #[test]
    fn direct_moments_of_constant() {
        let g = Grid::from_fn(&[21, 21], 1.0, 10.0, |_| 0.5).unwrap();
        let spec = PolarSpec2D {
            ring_radii: vec![2.0, 5.0],
            n_phi: 8,
            n_theta: 64,
            delta: 0.1,
            translation_grid: vec![[0.0, 0.0]],
            sampling: Sampling::Bilinear,
            triples: TripleSet::All,
        };
        let (m2, m3) = so2_moments_direct(&g, &spec, 16).unwrap();
        assert!(m2.values.iter().all(|v| (v - 0.25).abs() < 1e-14));
        assert!(m3.slices.values().flatten().all(|v| (v - 0.125).abs() < 1e-14));
        assert!(so2_moments_direct(&g, &spec, 12).is_err());
    }

    #[test]
    fn moments_round_trip_files() {
        let g = random_image(24, 1);
        let spec = small_spec();
        let (m2, m3) = so2_moments_direct(&g, &spec, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_moments_2d(&m2, &m3, &spec, dir.path(), "x").unwrap();
        let (a2, a3, radii) = load_moments_2d(dir.path(), "x").unwrap();
        assert_eq!(radii, spec.ring_radii);
        assert!(mse_m2(&a2, &m2).unwrap() < 1e-12);
        assert!(mse_m3(&a3, &m3).unwrap() < 1e-12);
    }
}
