//! Simulation of rigid-motion observations and micrographs, empirical
//! autocorrelations, Gaussian pairing corrections and mixture unmixing.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grids_io::{Grid, Rotation};

/// A real signal that can be evaluated anywhere in space.
pub trait Signal: Sync {
    fn dim(&self) -> usize;
    fn support_radius(&self) -> f64;
    fn eval(&self, p: &[f64]) -> f64;
}

impl Signal for Grid {
    fn dim(&self) -> usize {
        self.dim
    }
    fn support_radius(&self) -> f64 {
        self.support_radius
    }
    fn eval(&self, p: &[f64]) -> f64 {
        self.sample_fast(p)
    }
}

/// Uniformly distributed rotation.
pub fn haar_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Rotation {
    if dim == 2 {
        Rotation::Planar(rng.gen::<f64>() * 2.0 * PI)
    } else {
        loop {
            let v: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                    v[0] / n,
                    v[1] / n,
                    v[2] / n,
                    v[3] / n,
                ));
                return Rotation::from_quaternion(q);
            }
        }
    }
}

/// Distribution of the translation component of each observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TranslationLaw {
    Identity,
    /// Uniform on [−a, a]^n.
    UniformBox { half_width: f64 },
    /// Uniform over grid nodes in [−k, k]^n (units of spacing).
    UniformLattice { half_width: i64 },
}

impl Default for TranslationLaw {
    fn default() -> Self {
        TranslationLaw::UniformBox { half_width: 0.0 }
    }
}

impl TranslationLaw {
    /// Largest possible translation norm.
    pub fn reach(&self, dim: usize, spacing: f64) -> f64 {
        let s = (dim as f64).sqrt();
        match *self {
            TranslationLaw::Identity => 0.0,
            TranslationLaw::UniformBox { half_width } => half_width * s,
            TranslationLaw::UniformLattice { half_width } => half_width as f64 * spacing * s,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, dim: usize, spacing: f64, rng: &mut R) -> Vec<f64> {
        match *self {
            TranslationLaw::Identity => vec![0.0; dim],
            TranslationLaw::UniformBox { half_width } => {
                (0..dim).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * half_width).collect()
            }
            TranslationLaw::UniformLattice { half_width } => {
                (0..dim).map(|_| rng.gen_range(-half_width..=half_width) as f64 * spacing).collect()
            }
        }
    }
}

/// Rotation and translation applied to the signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Motion {
    pub rotation: Rotation,
    pub translation: Vec<f64>,
}

/// Noisy rigid-motion observations on the padded domain D̄. The integration
/// domain D is the set of nodes at least `pad` nodes from every face.
#[derive(Clone, Debug)]
pub struct SeObservationSet {
    pub observations: Vec<Grid>,
    pub sigma: f64,
    pub pad: usize,
    pub true_motions: Option<Vec<Motion>>,
}

impl SeObservationSet {
    /// Shape of D.
    pub fn domain_shape(&self) -> Vec<usize> {
        self.observations[0].shape.iter().map(|n| n - 2 * self.pad).collect()
    }

    /// |D| as a measure (node count times h^n).
    pub fn domain_measure(&self) -> f64 {
        let g = &self.observations[0];
        self.domain_shape().iter().product::<usize>() as f64 * g.cell_volume()
    }
}

/// Draws observations g·f + ξ on a padded domain, one at a time.
pub struct SeSimulator<'a, S: Signal + ?Sized> {
    pub signal: &'a S,
    pub layout: Grid,
    pub pad: usize,
    pub sigma: f64,
    pub law: TranslationLaw,
}

impl<'a, S: Signal + ?Sized> SeSimulator<'a, S> {
    /// `domain` fixes D (shape, spacing); the padded layout adds ⌈R/h⌉ + 1 nodes per face.
    pub fn new(signal: &'a S, domain: &Grid, sigma: f64, law: TranslationLaw) -> Result<Self> {
        if signal.dim() != domain.dim {
            return invalid("signal and domain dimensions differ");
        }
        if !(sigma >= 0.0) {
            return invalid("sigma must be non-negative");
        }
        let h = domain.spacing;
        let reach = law.reach(domain.dim, h) + signal.support_radius();
        if reach > domain.half_extent() + 1e-9 {
            return invalid(format!(
                "translated support reaches {reach:.4} but the domain half-width is {:.4}",
                domain.half_extent()
            ));
        }
        let pad = (signal.support_radius() / h).ceil() as usize + 1;
        let shape: Vec<usize> = domain.shape.iter().map(|n| n + 2 * pad).collect();
        let layout = Grid::zeros(&shape, h, domain.support_radius)?;
        Ok(Self { signal, layout, pad, sigma, law })
    }

    /// Clean transformed signal g·f on the padded layout.
    pub fn render(&self, motion: &Motion) -> Grid {
        let rinv = motion.rotation.matrix().transpose();
        let dim = self.layout.dim;
        let mut t = [0.0; 3];
        t[..dim].copy_from_slice(&motion.translation);
        let mut g = self.layout.clone();
        for (i, v) in g.values.iter_mut().enumerate() {
            let p = self.layout.node_position(i);
            let q = rinv * Vector3::new(p[0] - t[0], p[1] - t[1], p[2] - t[2]);
            *v = self.signal.eval(&q.as_slice()[..dim]);
        }
        g
    }

    pub fn draw_motion<R: Rng + ?Sized>(&self, rng: &mut R) -> Motion {
        let dim = self.layout.dim;
        let rotation = haar_rotation(dim, rng);
        let translation = self.law.draw(dim, self.layout.spacing, rng);
        Motion { rotation, translation }
    }

    /// Adds white noise of per-node variance σ²/h^n in place.
    pub fn add_noise<R: Rng + ?Sized>(&self, grid: &mut Grid, rng: &mut R) {
        if self.sigma == 0.0 {
            return;
        }
        let s = self.sigma / self.layout.cell_volume().sqrt();
        for v in grid.values.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += s * z;
        }
    }

    pub fn observe<R: Rng + ?Sized>(&self, rng: &mut R) -> (Grid, Motion) {
        let motion = self.draw_motion(rng);
        let mut g = self.render(&motion);
        self.add_noise(&mut g, rng);
        (g, motion)
    }
}

/// N i.i.d. observations y_i = g_i·f + ξ_i with the integration domain D
/// equal to the layout of `f`.
pub fn simulate_se_observations<R: Rng + ?Sized>(
    f: &Grid,
    n: usize,
    sigma: f64,
    law: &TranslationLaw,
    rng: &mut R,
) -> Result<SeObservationSet> {
    let sim = SeSimulator::new(f, f, sigma, law.clone())?;
    let mut observations = Vec::with_capacity(n);
    let mut motions = Vec::with_capacity(n);
    for _ in 0..n {
        let (g, m) = sim.observe(rng);
        observations.push(g);
        motions.push(m);
    }
    Ok(SeObservationSet { observations, sigma, pad: sim.pad, true_motions: Some(motions) })
}

/// Lags τ_0..τ_{d−1} as integer node offsets.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LagTuple {
    pub lags: Vec<Vec<i64>>,
}

impl LagTuple {
    pub fn new(lags: Vec<Vec<i64>>) -> Result<Self> {
        if lags.is_empty() || lags.len() > 5 {
            return invalid(format!("lag tuples have order 1..=5, got {}", lags.len()));
        }
        let dim = lags[0].len();
        if lags.iter().any(|l| l.len() != dim) {
            return invalid("lags have mixed dimensions");
        }
        Ok(Self { lags })
    }

    pub fn order(&self) -> usize {
        self.lags.len()
    }

    pub fn dim(&self) -> usize {
        self.lags[0].len()
    }

    /// Largest lag norm in physical units.
    pub fn reach(&self, spacing: f64) -> f64 {
        self.lags
            .iter()
            .map(|l| l.iter().map(|&c| (c * c) as f64).sum::<f64>().sqrt() * spacing)
            .fold(0.0, f64::max)
    }

    fn subset(&self, idx: &[usize]) -> Vec<Vec<i64>> {
        let mut v: Vec<Vec<i64>> = idx.iter().map(|&i| self.lags[i].clone()).collect();
        v.sort();
        v
    }
}

fn offset_of(grid: &Grid, lag: &[i64]) -> isize {
    let mut off = 0isize;
    let mut stride = 1isize;
    for axis in (0..grid.dim).rev() {
        off += lag[axis] as isize * stride;
        stride *= grid.shape[axis] as isize;
    }
    off
}

/// Σ_{x∈D} Π_j y(x + τ_j)·h^n for one padded observation.
fn lagged_product_sum(g: &Grid, pad: usize, lags: &LagTuple) -> f64 {
    let offs: Vec<isize> = lags.lags.iter().map(|l| offset_of(g, l)).collect();
    let dim = g.dim;
    let inner: Vec<usize> = g.shape.iter().map(|n| n - 2 * pad).collect();
    let count: usize = inner.iter().product();
    let mut acc = 0.0;
    let mut idx = [0usize; 3];
    for c in 0..count {
        let mut rem = c;
        for axis in (0..dim).rev() {
            idx[axis] = rem % inner[axis] + pad;
            rem /= inner[axis];
        }
        let base = g.ravel(&idx[..dim]) as isize;
        let mut p = 1.0;
        for &o in &offs {
            p *= g.values[(base + o) as usize];
        }
        acc += p;
    }
    acc * g.cell_volume()
}

/// Mean over observations of the discrete lagged product sum over D.
pub fn empirical_autocorr(set: &SeObservationSet, lags: &LagTuple) -> Result<f64> {
    if set.observations.is_empty() {
        return invalid("empty observation set");
    }
    let g0 = &set.observations[0];
    if lags.dim() != g0.dim {
        return invalid("lag dimension does not match observations");
    }
    if lags.lags.iter().flatten().any(|c| c.unsigned_abs() as usize > set.pad) {
        return invalid("lags exceed the noise padding");
    }
    let parts: Vec<f64> = set.observations.par_iter().map(|g| lagged_product_sum(g, set.pad, lags)).collect();
    Ok(pairwise_sum(&parts) / parts.len() as f64)
}

/// Pairwise (tree) summation; order fixed by index, independent of threads.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Lower-order autocorrelations A^(k) keyed by sorted lag lists, plus A^(0) = |D|.
#[derive(Clone, Debug, Default)]
pub struct LowerOrderTable {
    pub domain_measure: f64,
    pub entries: HashMap<Vec<Vec<i64>>, f64>,
}

impl LowerOrderTable {
    pub fn new(domain_measure: f64) -> Self {
        Self { domain_measure, entries: HashMap::new() }
    }

    pub fn insert(&mut self, lags: &[Vec<i64>], value: f64) {
        let mut k = lags.to_vec();
        k.sort();
        self.entries.insert(k, value);
    }

    fn get(&self, key: &[Vec<i64>]) -> Result<f64> {
        if key.is_empty() {
            return Ok(self.domain_measure);
        }
        self.entries.get(key).copied().ok_or_else(|| Error::MissingLowerOrder(format!("{key:?}")))
    }
}

/// Number of perfect matchings of `idx` whose pairs have coincident lags.
fn coincident_matchings(lags: &LagTuple, idx: &[usize]) -> usize {
    if idx.is_empty() {
        return 1;
    }
    let first = idx[0];
    let mut total = 0;
    for k in 1..idx.len() {
        if lags.lags[first] == lags.lags[idx[k]] {
            let rest: Vec<usize> = idx[1..].iter().enumerate().filter(|&(j, _)| j + 1 != k).map(|(_, &v)| v).collect();
            total += coincident_matchings(lags, &rest);
        }
    }
    total
}

/// Noise contribution P^(d): Σ over proper subsets S with |S^c| even of
/// σ^{|S^c|}·A^{|S|}(τ_S)·Σ_{pairings of S^c} Π Kronecker/h^n.
pub fn noise_correction(
    lags: &LagTuple,
    sigma: f64,
    spacing: f64,
    table: &LowerOrderTable,
) -> Result<f64> {
    let d = lags.order();
    let inv_cell = 1.0 / spacing.powi(lags.dim() as i32);
    let mut total = 0.0;
    for mask in 1u32..(1 << d) {
        let comp: Vec<usize> = (0..d).filter(|i| mask & (1 << i) != 0).collect();
        if comp.len() % 2 != 0 {
            continue;
        }
        let pairings = coincident_matchings(lags, &comp);
        if pairings == 0 {
            continue;
        }
        let keep: Vec<usize> = (0..d).filter(|i| mask & (1 << i) == 0).collect();
        let a = table.get(&lags.subset(&keep))?;
        let k = comp.len() as i32;
        total += sigma.powi(k) * inv_cell.powi(k / 2) * pairings as f64 * a;
    }
    Ok(total)
}

/// raw − P^(d).
pub fn debias_autocorr(
    raw: f64,
    lags: &LagTuple,
    sigma: f64,
    spacing: f64,
    lower_order_estimates: &LowerOrderTable,
) -> Result<f64> {
    Ok(raw - noise_correction(lags, sigma, spacing, lower_order_estimates)?)
}

/// Expected autocorrelation of pure white noise per unit volume at a lag tuple.
pub fn noise_wick_value(lags: &LagTuple, sigma: f64, spacing: f64) -> f64 {
    let d = lags.order();
    if d % 2 != 0 {
        return 0.0;
    }
    let all: Vec<usize> = (0..d).collect();
    let pairings = coincident_matchings(lags, &all);
    let inv_cell = 1.0 / spacing.powi(lags.dim() as i32);
    pairings as f64 * (sigma * sigma * inv_cell).powi(d as i32 / 2)
}

/// Minimum center distance rule for micrograph placement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SeparationMode {
    /// Distance ≥ 4R + one grid spacing.
    WellSeparated,
    MinDistance { distance: f64 },
}

/// A large noisy observation holding many rotated copies.
#[derive(Clone, Debug)]
pub struct Micrograph {
    pub grid: Grid,
    pub placements: Vec<Vec<f64>>,
    pub rotations: Vec<Rotation>,
    pub gamma: f64,
    pub sigma: f64,
    pub half_width: f64,
    pub seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct MicrographSidecar {
    placements: Vec<Vec<f64>>,
    rotations: Vec<Rotation>,
    gamma: f64,
    sigma: f64,
    seed: Option<u64>,
    half_width: f64,
}

impl Micrograph {
    pub fn sidecar_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&MicrographSidecar {
            placements: self.placements.clone(),
            rotations: self.rotations.clone(),
            gamma: self.gamma,
            sigma: self.sigma,
            seed: self.seed,
            half_width: self.half_width,
        })?)
    }

    pub fn from_parts(grid: Grid, sidecar: &str) -> Result<Self> {
        let s: MicrographSidecar = serde_json::from_str(sidecar)?;
        Ok(Self {
            grid,
            placements: s.placements,
            rotations: s.rotations,
            gamma: s.gamma,
            sigma: s.sigma,
            half_width: s.half_width,
            seed: s.seed,
        })
    }
}

/// Volume of the n-ball of radius r.
pub fn ball_volume(dim: usize, r: f64) -> f64 {
    if dim == 2 {
        PI * r * r
    } else {
        4.0 / 3.0 * PI * r * r * r
    }
}

/// Micrograph over [−MR, MR]^n with `n` copies placed by dart throwing on
/// grid nodes (64·n attempts), Haar rotations and white noise.
pub fn simulate_micrograph<R: Rng + ?Sized>(
    f: &Grid,
    n: usize,
    m_scale: f64,
    sigma: f64,
    mode: SeparationMode,
    rng: &mut R,
) -> Result<Micrograph> {
    let dim = f.dim;
    let h = f.spacing;
    let r = f.support_radius;
    if !(r > 0.0) || !(m_scale > 1.0) {
        return invalid("need R > 0 and M > 1");
    }
    let half = m_scale * r;
    let nodes = (2.0 * half / h).round() as usize + 1;
    let shape = vec![nodes; dim];
    let mut grid = Grid::zeros(&shape, h, r)?;
    let min_dist = match mode {
        SeparationMode::WellSeparated => 4.0 * r + h,
        SeparationMode::MinDistance { distance } => distance,
    };
    let lim = ((half - r) / h).floor() as i64 - 1;
    if lim < 0 {
        return invalid("micrograph too small for one copy");
    }
    let mut placements: Vec<Vec<f64>> = Vec::with_capacity(n);
    let budget = 64 * n;
    let mut attempts = 0;
    while placements.len() < n && attempts < budget {
        attempts += 1;
        let c: Vec<f64> = (0..dim).map(|_| rng.gen_range(-lim..=lim) as f64 * h).collect();
        let ok = placements.iter().all(|p| {
            p.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() >= min_dist * min_dist
        });
        if ok {
            placements.push(c);
        }
    }
    if placements.len() < n {
        return Err(Error::PackingFailed { placed: placements.len(), requested: n });
    }
    let rotations: Vec<Rotation> = (0..n).map(|_| haar_rotation(dim, rng)).collect();
    let reach = (r / h).ceil() as i64 + 1;
    for (c, rot) in placements.iter().zip(&rotations) {
        let rinv = rot.matrix().transpose();
        let center: Vec<i64> = (0..dim).map(|a| (c[a] / h).round() as i64).collect();
        let mid = (nodes as i64 - 1) / 2;
        let span = 2 * reach + 1;
        let count = span.pow(dim as u32);
        for k in 0..count {
            let mut rem = k;
            let mut idx = [0usize; 3];
            let mut local = [0.0; 3];
            for axis in (0..dim).rev() {
                let o = rem % span - reach;
                rem /= span;
                idx[axis] = (center[axis] + mid + o) as usize;
                local[axis] = o as f64 * h;
            }
            let q = rinv * Vector3::new(local[0], local[1], local[2]);
            let v = f.sample_fast(&q.as_slice()[..dim]);
            if v != 0.0 {
                let flat = grid.ravel(&idx[..dim]);
                grid.values[flat] += v;
            }
        }
    }
    if sigma > 0.0 {
        let s = sigma / grid.cell_volume().sqrt();
        for v in grid.values.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += s * z;
        }
    }
    let gamma = n as f64 * ball_volume(dim, 2.0 * r) / (2.0 * half).powi(dim as i32);
    Ok(Micrograph { grid, placements, rotations, gamma, sigma, half_width: half, seed: None })
}

/// (1/(2MR)^n)·Σ_x Π_j y(x + τ_j)·h^n with zeros outside the micrograph.
pub fn mtd_autocorr(m: &Micrograph, lags: &LagTuple) -> Result<f64> {
    Ok(mtd_autocorr_blocks(m, lags, 1)?[0])
}

/// Per-block contributions of [`mtd_autocorr`] along axis 0 (they sum to the
/// full value); used for jackknife error bars.
pub fn mtd_autocorr_blocks(m: &Micrograph, lags: &LagTuple, blocks: usize) -> Result<Vec<f64>> {
    let g = &m.grid;
    if lags.dim() != g.dim {
        return invalid("lag dimension does not match micrograph");
    }
    let blocks = blocks.max(1);
    let n0 = g.shape[0];
    let rest: usize = g.shape[1..].iter().product();
    let norm = g.cell_volume() / (2.0 * m.half_width).powi(g.dim as i32);
    let out: Vec<f64> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * n0 / blocks;
            let hi = (b + 1) * n0 / blocks;
            let mut acc = 0.0;
            let mut idx = [0usize; 3];
            for i0 in lo..hi {
                for r in 0..rest {
                    idx[0] = i0;
                    let mut rem = r;
                    for axis in (1..g.dim).rev() {
                        idx[axis] = rem % g.shape[axis];
                        rem /= g.shape[axis];
                    }
                    let mut p = 1.0;
                    for lag in &lags.lags {
                        let mut flat = 0usize;
                        let mut inside = true;
                        for axis in 0..g.dim {
                            let c = idx[axis] as i64 + lag[axis];
                            if c < 0 || c >= g.shape[axis] as i64 {
                                inside = false;
                                break;
                            }
                            flat = flat * g.shape[axis] + c as usize;
                        }
                        if !inside {
                            p = 0.0;
                            break;
                        }
                        p *= g.values[flat];
                    }
                    acc += p;
                }
            }
            acc * norm
        })
        .collect();
    Ok(out)
}

/// (a − (1−γ)·χ)/γ.
pub fn unmix_mtd(a_value: f64, chi_value: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return invalid(format!("density must lie in (0, 1], got {gamma}"));
    }
    Ok((a_value - (1.0 - gamma) * chi_value) / gamma)
}
