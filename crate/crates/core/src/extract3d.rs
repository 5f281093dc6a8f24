//! Spherical extraction of rotation invariants from translation-averaged
//! shell coefficients: boundary weights over antipodal sphere pairs, per-ℓ
//! Gram matrices with their Legendre synthesis, Gaunt-coupled bispectra, and
//! a direct rotation-averaged oracle.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::extract2d::Sampling;
use crate::grids_io::{quaternion_fibonacci, Grid};
use crate::harmonics::{
    admissible, fibonacci_sphere, gauss_legendre, legendre_all, lm_count, lm_index, GauntTable, Quadrature1D,
    ShellBasis, SphereQuadrature, MAX_COUPLING_DEGREE,
};
use crate::observe::Signal;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const CHUNK: usize = 8;

/// Discretization of the spherical extraction.
#[derive(Clone, Debug)]
pub struct SphericalSpec3D {
    pub l_max: usize,
    pub shells: ShellBasis,
    /// Angular rule for the spherical-harmonic transforms.
    pub sphere_quad: SphereQuadrature,
    /// Angular rule for the antipodal boundary weights.
    pub boundary_quad: SphereQuadrature,
    pub delta: f64,
    pub translation_grid: Vec<[f64; 3]>,
    /// μ = cos γ nodes for the Legendre form of the second moment.
    pub gl_nodes: Quadrature1D,
    pub sampling: Sampling,
}

impl SphericalSpec3D {
    /// Minimum sphere nodes for a band limit: 4·(L+1)².
    pub fn min_angular_nodes(l_max: usize) -> usize {
        4 * lm_count(l_max)
    }

    /// Standard shells and Fibonacci rules, translations over the ball A_δ
    /// plus two voxels, boundary rule at about one node per voxel of the
    /// support sphere.
    pub fn for_grid(grid: &Grid, l_max: usize, r_max: usize, n_ang: usize, delta: f64) -> Result<Self> {
        if grid.dim != 3 {
            return invalid("spherical extraction needs a 3D grid");
        }
        let rel = grid.support_radius / grid.spacing;
        let n_bd = n_ang.max((4.0 * std::f64::consts::PI * rel * rel).ceil() as usize);
        let spec = Self {
            l_max,
            shells: ShellBasis::standard(r_max)?,
            sphere_quad: fibonacci_sphere(n_ang)?,
            boundary_quad: fibonacci_sphere(n_bd)?,
            delta,
            translation_grid: translation_grid_ball(grid, delta, 2.0),
            gl_nodes: gauss_legendre(2 * l_max + 2)?,
            sampling: Sampling::Bilinear,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_r(&self) -> usize {
        self.shells.radial_nodes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_max as i64 > MAX_COUPLING_DEGREE {
            return invalid(format!("L_max {} exceeds {MAX_COUPLING_DEGREE}", self.l_max));
        }
        let need = Self::min_angular_nodes(self.l_max);
        if self.sphere_quad.len() < need {
            return invalid(format!("{} sphere nodes, band limit {} needs {need}", self.sphere_quad.len(), self.l_max));
        }
        if self.boundary_quad.is_empty() {
            return invalid("boundary rule is empty");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return invalid(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.translation_grid.is_empty() {
            return invalid("translation grid is empty");
        }
        if self.gl_nodes.nodes.is_empty() {
            return invalid("Legendre rule is empty");
        }
        Ok(())
    }
}

/// Grid nodes within R·√(1 − (1 − δ)²) + margin voxels of the origin.
pub fn translation_grid_ball(grid: &Grid, delta: f64, margin_px: f64) -> Vec<[f64; 3]> {
    let rad = grid.support_radius * (1.0 - (1.0 - delta).powi(2)).sqrt() + margin_px * grid.spacing;
    (0..grid.len())
        .map(|i| grid.node_position(i))
        .filter(|p| p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= rad * rad)
        .collect()
}

/// Complex coefficients H_ℓm[q], stored at (lm_index(ℓ, m), q).
#[derive(Clone, Debug, PartialEq)]
pub struct ShCoeffTable {
    pub l_max: usize,
    pub shells: usize,
    pub values: Vec<Complex64>,
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    l_max: usize,
    shells: usize,
    layout: String,
}

impl ShCoeffTable {
    pub fn zeros(l_max: usize, shells: usize) -> Self {
        Self { l_max, shells, values: vec![ZERO; lm_count(l_max) * shells] }
    }

    #[inline]
    pub fn get(&self, ell: usize, m: i64, q: usize) -> Complex64 {
        self.values[lm_index(ell, m) * self.shells + q]
    }

    #[inline]
    pub fn set(&mut self, ell: usize, m: i64, q: usize, v: Complex64) {
        let s = self.shells;
        self.values[lm_index(ell, m) * s + q] = v;
    }

    /// Rows m = −ℓ..ℓ, columns shells.
    pub fn degree(&self, ell: usize) -> DMatrix<Complex64> {
        let e = ell as i64;
        DMatrix::from_fn(2 * ell + 1, self.shells, |i, q| self.get(ell, i as i64 - e, q))
    }

    pub fn set_degree(&mut self, ell: usize, f: &DMatrix<Complex64>) {
        let e = ell as i64;
        for i in 0..2 * ell + 1 {
            for q in 0..self.shells {
                self.set(ell, i as i64 - e, q, f[(i, q)]);
            }
        }
    }

    /// Frobenius norm of degree ℓ.
    pub fn degree_norm(&self, ell: usize) -> f64 {
        let o = lm_index(ell, -(ell as i64)) * self.shells;
        self.values[o..o + (2 * ell + 1) * self.shells].iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest |H_ℓ,−m − (−1)^m conj H_ℓm| over the largest entry.
    pub fn conjugation_defect(&self) -> f64 {
        let scale = self.values.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for ell in 0..=self.l_max {
            for m in 0..=ell as i64 {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                for q in 0..self.shells {
                    let d = self.get(ell, -m, q) - self.get(ell, m, q).conj() * sign;
                    worst = worst.max(d.norm());
                }
            }
        }
        worst / scale
    }

    /// Projects onto tables of real signals.
    pub fn symmetrize_degree(&mut self, ell: usize) {
        for m in 0..=ell as i64 {
            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
            for q in 0..self.shells {
                let pos = self.get(ell, m, q);
                let neg = self.get(ell, -m, q);
                let avg = 0.5 * (pos + neg.conj() * sign);
                self.set(ell, m, q, avg);
                self.set(ell, -m, q, avg.conj() * sign);
            }
        }
    }

    /// Writes `{stem}.sh.json` and a little-endian f64 payload `{stem}.sh.bin`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let header = TableHeader { l_max: self.l_max, shells: self.shells, layout: "lm-major re,im f64le".into() };
        std::fs::write(dir.join(format!("{stem}.sh.json")), serde_json::to_string_pretty(&header)?)?;
        std::fs::write(dir.join(format!("{stem}.sh.bin")), complex_bytes(&self.values))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let header: TableHeader = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.sh.json")))?)?;
        let n = lm_count(header.l_max) * header.shells;
        let values = complex_from_bytes(&std::fs::read(dir.join(format!("{stem}.sh.bin")))?, n)?;
        Ok(Self { l_max: header.l_max, shells: header.shells, values })
    }
}

fn complex_bytes(v: &[Complex64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 * v.len());
    for z in v {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out
}

fn complex_from_bytes(bytes: &[u8], n: usize) -> Result<Vec<Complex64>> {
    if bytes.len() < 16 * n {
        return Err(Error::Truncated(format!("expected {} complex values, found {} bytes", n, bytes.len())));
    }
    let f = |i: usize| f64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().unwrap());
    Ok((0..n).map(|k| Complex64::new(f(2 * k), f(2 * k + 1))).collect())
}

/// Degree triple and shell triple of one bispectrum entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BispecKey {
    pub ells: [usize; 3],
    pub shells: [usize; 3],
}

/// Admissible degree triples with ℓ1, ℓ2 ≤ ℓ3 ≤ L and shell triples with q1 ≤ q2.
pub fn default_triples(l_max: usize, shells: usize) -> Vec<BispecKey> {
    let mut out = Vec::new();
    for l3 in 0..=l_max {
        for l1 in 0..=l3 {
            for l2 in 0..=l3 {
                if !admissible(l1, l2, l3) {
                    continue;
                }
                for a in 0..shells {
                    for b in a..shells {
                        for c in 0..shells {
                            out.push(BispecKey { ells: [l1, l2, l3], shells: [a, b, c] });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Second moment sampled at μ_k: index (q1, q2, k).
#[derive(Clone, Debug, PartialEq)]
pub struct LegendreM2 {
    pub mu: Vec<f64>,
    pub shells: usize,
    pub values: Vec<f64>,
}

impl LegendreM2 {
    pub fn get(&self, q1: usize, q2: usize, k: usize) -> f64 {
        self.values[(q1 * self.shells + q2) * self.mu.len() + k]
    }

    /// Σ_ℓ (2ℓ+1) Re G_ℓ[q1,q2] P_ℓ(μ).
    pub fn from_gram(gram: &[DMatrix<Complex64>], mu: &[f64]) -> Self {
        let shells = gram.first().map_or(0, |g| g.nrows());
        let l_max = gram.len().saturating_sub(1);
        let mut values = vec![0.0; shells * shells * mu.len()];
        for (k, &x) in mu.iter().enumerate() {
            let p = legendre_all(l_max, x);
            for q1 in 0..shells {
                for q2 in 0..shells {
                    let v: f64 = gram.iter().enumerate().map(|(l, g)| (2 * l + 1) as f64 * g[(q1, q2)].re * p[l]).sum();
                    values[(q1 * shells + q2) * mu.len() + k] = v;
                }
            }
        }
        Self { mu: mu.to_vec(), shells, values }
    }
}

/// Gram matrices per degree and the bispectrum table.
#[derive(Clone, Debug, PartialEq)]
pub struct InvariantSet3D {
    pub l_max: usize,
    pub shells: usize,
    /// G_ℓ[a, b] = Σ_m conj(F_ℓm[a]) F_ℓm[b].
    pub gram: Vec<DMatrix<Complex64>>,
    /// B_ℓ1ℓ2ℓ3(a, b, c), weighted by the triple overlap T_abc.
    pub bispec: BTreeMap<BispecKey, Complex64>,
    pub m2_legendre: Option<LegendreM2>,
}

/// One evaluated bispectrum entry; inadmissible degree triples read exactly 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BispecValue {
    pub key: BispecKey,
    pub value: Complex64,
    pub admissible: bool,
}

#[derive(Serialize, Deserialize)]
struct InvariantHeader {
    l_max: usize,
    shells: usize,
    keys: Vec<BispecKey>,
    mu: Option<Vec<f64>>,
    layout: String,
}

impl InvariantSet3D {
    pub fn bispec_get(&self, ells: [usize; 3], shells: [usize; 3]) -> Option<Complex64> {
        self.bispec.get(&BispecKey { ells, shells }).copied()
    }

    /// Closed-form invariants of a known coefficient table.
    pub fn from_coefficients(
        f: &ShCoeffTable,
        shells: &ShellBasis,
        triples: &[BispecKey],
        mu: Option<&[f64]>,
    ) -> Result<Self> {
        let gaunt = GauntTable::new(f.l_max)?;
        let plan = BispecPlan::new(triples, f.l_max, f.shells)?;
        let mut acc = Accumulator::new(f.l_max, f.shells, plan.len());
        acc.add(f, 1.0, &plan, &gaunt);
        Ok(acc.finish(1.0, &plan, shells, mu))
    }

    /// Writes `{stem}.inv3.json` (index) and `{stem}.inv3.bin` (f64le payload:
    /// Gram blocks, bispectrum, Legendre samples).
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let header = InvariantHeader {
            l_max: self.l_max,
            shells: self.shells,
            keys: self.bispec.keys().copied().collect(),
            mu: self.m2_legendre.as_ref().map(|m| m.mu.clone()),
            layout: "gram[l][a][b] re,im; bispec re,im; m2[q1][q2][k] f64le".into(),
        };
        std::fs::write(dir.join(format!("{stem}.inv3.json")), serde_json::to_string_pretty(&header)?)?;
        let mut payload: Vec<Complex64> = Vec::new();
        for g in &self.gram {
            for a in 0..self.shells {
                for b in 0..self.shells {
                    payload.push(g[(a, b)]);
                }
            }
        }
        payload.extend(self.bispec.values().copied());
        let mut bytes = complex_bytes(&payload);
        if let Some(m) = &self.m2_legendre {
            for v in &m.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(dir.join(format!("{stem}.inv3.bin")), bytes)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let h: InvariantHeader = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{stem}.inv3.json")))?)?;
        let bytes = std::fs::read(dir.join(format!("{stem}.inv3.bin")))?;
        let r = h.shells;
        let n_gram = (h.l_max + 1) * r * r;
        let n_complex = n_gram + h.keys.len();
        let z = complex_from_bytes(&bytes, n_complex)?;
        let gram = (0..=h.l_max).map(|l| DMatrix::from_row_slice(r, r, &z[l * r * r..(l + 1) * r * r])).collect();
        let bispec = h.keys.iter().copied().zip(z[n_gram..].iter().copied()).collect();
        let m2_legendre = match h.mu {
            Some(mu) => {
                let n = r * r * mu.len();
                let rest = &bytes[16 * n_complex..];
                if rest.len() < 8 * n {
                    return Err(Error::Truncated("Legendre block is short".into()));
                }
                let values = (0..n).map(|i| f64::from_le_bytes(rest[8 * i..8 * i + 8].try_into().unwrap())).collect();
                Some(LegendreM2 { mu, shells: r, values })
            }
            None => None,
        };
        Ok(Self { l_max: h.l_max, shells: r, gram, bispec, m2_legendre })
    }
}

/// Requested bispectrum entries grouped by degree triple, with the distinct
/// (a, b) shell pairs of each group.
struct BispecPlan {
    keys: Vec<BispecKey>,
    groups: Vec<PlanGroup>,
}

struct PlanGroup {
    ells: [usize; 3],
    pairs: Vec<[usize; 2]>,
    /// (key index, pair index, c)
    entries: Vec<(usize, usize, usize)>,
}

impl BispecPlan {
    fn new(triples: &[BispecKey], l_max: usize, shells: usize) -> Result<Self> {
        let mut by_ells: BTreeMap<[usize; 3], (BTreeMap<[usize; 2], usize>, Vec<(usize, usize, usize)>)> = BTreeMap::new();
        for (i, k) in triples.iter().enumerate() {
            if k.ells.iter().any(|&l| l > l_max) {
                return invalid(format!("degree triple {:?} exceeds L_max {l_max}", k.ells));
            }
            if k.shells.iter().any(|&q| q >= shells) {
                return invalid(format!("shell triple {:?} exceeds {shells} shells", k.shells));
            }
            if !admissible(k.ells[0], k.ells[1], k.ells[2]) {
                continue;
            }
            let (pairs, entries) = by_ells.entry(k.ells).or_default();
            let next = pairs.len();
            let p = *pairs.entry([k.shells[0], k.shells[1]]).or_insert(next);
            entries.push((i, p, k.shells[2]));
        }
        let groups = by_ells
            .into_iter()
            .map(|(ells, (pairs, entries))| {
                let mut list = vec![[0, 0]; pairs.len()];
                for (ab, i) in pairs {
                    list[i] = ab;
                }
                PlanGroup { ells, pairs: list, entries }
            })
            .collect();
        Ok(Self { keys: triples.to_vec(), groups })
    }

    fn len(&self) -> usize {
        self.keys.len()
    }
}

/// Σ_{m1,m2} (−1)^{m1+m2} G(ℓ1,ℓ2,ℓ3; m1, m2, −m1−m2) H_ℓ1m1[a] H_ℓ2m2[b], indexed by m3 = m1 + m2.
pub(crate) fn coupled_pair(
    h: &ShCoeffTable,
    gaunt: &GauntTable,
    ells: [usize; 3],
    a: usize,
    b: usize,
    out: &mut [Complex64],
) {
    let [l1, l2, l3] = ells;
    out.iter_mut().for_each(|v| *v = ZERO);
    let Some(block) = gaunt.block(l1, l2, l3) else { return };
    let (e1, e2, e3) = (l1 as i64, l2 as i64, l3 as i64);
    let w2 = 2 * l2 + 1;
    for m1 in -e1..=e1 {
        let x1 = h.get(l1, m1, a);
        let row = &block[(m1 + e1) as usize * w2..(m1 + e1 + 1) as usize * w2];
        for m2 in -e2..=e2 {
            let m3 = m1 + m2;
            if m3.abs() > e3 {
                continue;
            }
            let g = row[(m2 + e2) as usize];
            if g == 0.0 {
                continue;
            }
            let g = if m3 % 2 == 0 { g } else { -g };
            out[(m3 + e3) as usize] += x1 * h.get(l2, m2, b) * g;
        }
    }
}

struct Accumulator {
    l_max: usize,
    shells: usize,
    gram: Vec<Vec<Complex64>>,
    bispec: Vec<Complex64>,
    weight: f64,
}

impl Accumulator {
    fn new(l_max: usize, shells: usize, n_keys: usize) -> Self {
        Self {
            l_max,
            shells,
            gram: (0..=l_max).map(|_| vec![ZERO; shells * shells]).collect(),
            bispec: vec![ZERO; n_keys],
            weight: 0.0,
        }
    }

    fn add(&mut self, h: &ShCoeffTable, s: f64, plan: &BispecPlan, gaunt: &GauntTable) {
        self.weight += s;
        if s == 0.0 {
            return;
        }
        let r = self.shells;
        for ell in 0..=self.l_max {
            let e = ell as i64;
            let g = &mut self.gram[ell];
            for m in -e..=e {
                let o = lm_index(ell, m) * r;
                let col = &h.values[o..o + r];
                for a in 0..r {
                    let ca = col[a].conj() * s;
                    for b in 0..r {
                        g[a * r + b] += ca * col[b];
                    }
                }
            }
        }
        let mut buf = vec![ZERO; 2 * self.l_max + 1];
        let mut cache: Vec<Complex64> = Vec::new();
        for grp in &plan.groups {
            let l3 = grp.ells[2];
            let w3 = 2 * l3 + 1;
            cache.clear();
            cache.resize(grp.pairs.len() * w3, ZERO);
            for (p, &[a, b]) in grp.pairs.iter().enumerate() {
                coupled_pair(h, gaunt, grp.ells, a, b, &mut buf[..w3]);
                cache[p * w3..(p + 1) * w3].copy_from_slice(&buf[..w3]);
            }
            let e3 = l3 as i64;
            for &(k, p, c) in &grp.entries {
                let x = &cache[p * w3..(p + 1) * w3];
                let mut acc = ZERO;
                for m3 in -e3..=e3 {
                    acc += x[(m3 + e3) as usize] * h.get(l3, m3, c).conj();
                }
                self.bispec[k] += acc * s;
            }
        }
    }

    fn merge(&mut self, other: Accumulator) {
        self.weight += other.weight;
        for (g, o) in self.gram.iter_mut().zip(other.gram) {
            for (x, y) in g.iter_mut().zip(o) {
                *x += y;
            }
        }
        for (x, y) in self.bispec.iter_mut().zip(other.bispec) {
            *x += y;
        }
    }

    fn finish(self, denom: f64, plan: &BispecPlan, shells: &ShellBasis, mu: Option<&[f64]>) -> InvariantSet3D {
        let r = self.shells;
        let gram: Vec<DMatrix<Complex64>> =
            self.gram.iter().map(|g| DMatrix::from_row_slice(r, r, g).map(|v| v / denom)).collect();
        let bispec = plan
            .keys
            .iter()
            .zip(&self.bispec)
            .map(|(k, &v)| {
                let [a, b, c] = k.shells;
                (*k, v * (shells.triple_overlap(a, b, c) / denom))
            })
            .collect();
        let m2_legendre = mu.map(|mu| LegendreM2::from_gram(&gram, mu));
        InvariantSet3D { l_max: self.l_max, shells: r, gram, bispec, m2_legendre }
    }
}

/// Precomputed radial projector and weighted conjugate harmonics.
struct Transform {
    /// w_n W_q(r_n), shells × N_r.
    proj: DMatrix<f64>,
    /// w_i conj Y_ℓm(ω_i), real and imaginary parts, N_ang × (L+1)².
    yw_re: DMatrix<f64>,
    yw_im: DMatrix<f64>,
}

impl Transform {
    fn new(spec: &SphericalSpec3D) -> Self {
        let sh = &spec.shells;
        let proj = DMatrix::from_fn(sh.count(), sh.radial_nodes.len(), |q, n| sh.radial_weights[n] * sh.values[(q, n)]);
        let lm = lm_count(spec.l_max);
        let y = spec.sphere_quad.harmonics_table(spec.l_max);
        let w = &spec.sphere_quad.weights;
        let yw_re = DMatrix::from_fn(w.len(), lm, |i, k| w[i] * y[i * lm + k].re);
        let yw_im = DMatrix::from_fn(w.len(), lm, |i, k| -w[i] * y[i * lm + k].im);
        Self { proj, yw_re, yw_im }
    }

    /// Shell coefficients of x ↦ f(t + Q x) over the ball of radius R.
    fn coefficients<S: Signal + ?Sized>(
        &self,
        f: &S,
        t: [f64; 3],
        rot: Option<&Matrix3<f64>>,
        spec: &SphericalSpec3D,
    ) -> ShCoeffTable {
        let radius = f.support_radius();
        let dirs = &spec.sphere_quad.directions;
        let radii = &spec.shells.radial_nodes;
        let mut samples = DMatrix::zeros(radii.len(), dirs.len());
        for (i, d) in dirs.iter().enumerate() {
            let d = match rot {
                Some(q) => {
                    let v = q * Vector3::new(d[0], d[1], d[2]);
                    [v.x, v.y, v.z]
                }
                None => *d,
            };
            for (n, &rn) in radii.iter().enumerate() {
                let s = radius * rn;
                samples[(n, i)] = probe(f, spec.sampling, [t[0] + s * d[0], t[1] + s * d[1], t[2] + s * d[2]]);
            }
        }
        let g = &self.proj * samples;
        let hr = &g * &self.yw_re;
        let hi = &g * &self.yw_im;
        let shells = spec.shells.count();
        let mut out = ShCoeffTable::zeros(spec.l_max, shells);
        for k in 0..lm_count(spec.l_max) {
            for q in 0..shells {
                out.values[k * shells + q] = Complex64::new(hr[(q, k)], hi[(q, k)]);
            }
        }
        out
    }
}

#[inline]
fn probe<S: Signal + ?Sized>(f: &S, mode: Sampling, p: [f64; 3]) -> f64 {
    match mode {
        Sampling::Bilinear => f.eval(&p),
        Sampling::SupportMasked => {
            let r = f.support_radius();
            if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] > r * r {
                0.0
            } else {
                f.eval(&p)
            }
        }
    }
}

fn check_signal<S: Signal + ?Sized>(f: &S, spec: &SphericalSpec3D) -> Result<()> {
    if f.dim() != 3 {
        return invalid("spherical extraction needs a 3D signal");
    }
    spec.validate()
}

/// c_ℓm = Σ_i w_i f(t + r ω_i) conj Y_ℓm(ω_i) for one physical radius r,
/// at [`lm_index`] positions.
pub fn sht_at_translation<S: Signal + ?Sized>(
    f: &S,
    t: [f64; 3],
    r: f64,
    spec: &SphericalSpec3D,
) -> Vec<Complex64> {
    let lm = lm_count(spec.l_max);
    let y = spec.sphere_quad.harmonics_table(spec.l_max);
    let mut c = vec![ZERO; lm];
    for (i, (d, &w)) in spec.sphere_quad.directions.iter().zip(&spec.sphere_quad.weights).enumerate() {
        let v = w * probe(f, spec.sampling, [t[0] + r * d[0], t[1] + r * d[1], t[2] + r * d[2]]);
        if v == 0.0 {
            continue;
        }
        for k in 0..lm {
            c[k] += y[i * lm + k].conj() * v;
        }
    }
    c
}

/// H_ℓm[q] = Σ_n w_n W_q(r_n) c_ℓm(r_n), one coefficient row per radial node.
pub fn shell_project(radial: &[Vec<Complex64>], spec: &SphericalSpec3D) -> Result<ShCoeffTable> {
    let sh = &spec.shells;
    if radial.len() != sh.radial_nodes.len() {
        return invalid(format!("{} radial rows for {} radial nodes", radial.len(), sh.radial_nodes.len()));
    }
    let lm = lm_count(spec.l_max);
    let mut out = ShCoeffTable::zeros(spec.l_max, sh.count());
    for (n, row) in radial.iter().enumerate() {
        if row.len() != lm {
            return invalid("radial row has the wrong number of coefficients");
        }
        for q in 0..sh.count() {
            let w = sh.radial_weights[n] * sh.values[(q, n)];
            for k in 0..lm {
                out.values[k * sh.count() + q] += row[k] * w;
            }
        }
    }
    Ok(out)
}

/// Shell coefficients of f about the origin (the intrinsic F̂ table).
pub fn shell_coefficients<S: Signal + ?Sized>(f: &S, spec: &SphericalSpec3D) -> Result<ShCoeffTable> {
    check_signal(f, spec)?;
    Ok(Transform::new(spec).coefficients(f, [0.0; 3], None, spec))
}

fn boundary_weight_at<S: Signal + ?Sized>(f: &S, t: [f64; 3], spec: &SphericalSpec3D) -> f64 {
    let rho = f.support_radius() * (1.0 - spec.delta);
    let q = &spec.boundary_quad;
    let mut acc = 0.0;
    for (d, &w) in q.directions.iter().zip(&q.weights) {
        let a = probe(f, spec.sampling, [t[0] + rho * d[0], t[1] + rho * d[1], t[2] + rho * d[2]]);
        if a == 0.0 {
            continue;
        }
        let b = probe(f, spec.sampling, [t[0] - rho * d[0], t[1] - rho * d[1], t[2] - rho * d[2]]);
        acc += w * a * b;
    }
    acc
}

/// Antipodal weights s_h(t_j) and their sum D_h.
pub fn boundary_weights_3d<S: Signal + ?Sized>(f: &S, spec: &SphericalSpec3D) -> Result<(Vec<f64>, f64)> {
    check_signal(f, spec)?;
    let s: Vec<f64> = spec.translation_grid.par_iter().map(|&t| boundary_weight_at(f, t, spec)).collect();
    let d: f64 = s.iter().sum();
    if !(d.abs() > 0.0) || !d.is_finite() {
        return Err(Error::DegenerateBoundary(d));
    }
    Ok((s, d))
}

/// Full extraction: Gram matrices, Legendre samples and the requested
/// bispectrum entries, each normalized by D_h.
pub fn extract_invariants_3d<S: Signal + ?Sized>(
    f: &S,
    spec: &SphericalSpec3D,
    triples: &[BispecKey],
) -> Result<InvariantSet3D> {
    let (s, d) = boundary_weights_3d(f, spec)?;
    let gaunt = GauntTable::new(spec.l_max)?;
    let plan = BispecPlan::new(triples, spec.l_max, spec.shells.count())?;
    let tr = Transform::new(spec);
    let jobs: Vec<(usize, f64)> = s.iter().copied().enumerate().filter(|&(_, w)| w != 0.0).collect();
    let parts: Vec<Accumulator> = jobs
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Accumulator::new(spec.l_max, spec.shells.count(), plan.len());
            for &(j, w) in chunk {
                let h = tr.coefficients(f, spec.translation_grid[j], None, spec);
                acc.add(&h, w, &plan, &gaunt);
            }
            acc
        })
        .collect();
    let total = tree_merge(parts, spec.l_max, spec.shells.count(), plan.len());
    Ok(total.finish(d, &plan, &spec.shells, Some(&spec.gl_nodes.nodes)))
}

fn tree_merge(mut parts: Vec<Accumulator>, l_max: usize, shells: usize, n_keys: usize) -> Accumulator {
    if parts.is_empty() {
        return Accumulator::new(l_max, shells, n_keys);
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.merge(b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

/// Gram matrices Σ_j s_h(t_j) G_ℓ^{(t_j)} / D_h and their Legendre synthesis at the μ_k nodes.
pub fn gamma2_3d<S: Signal + ?Sized>(f: &S, spec: &SphericalSpec3D) -> Result<(Vec<DMatrix<Complex64>>, LegendreM2)> {
    let inv = extract_invariants_3d(f, spec, &[])?;
    let m2 = inv.m2_legendre.expect("extraction always fills the Legendre form");
    Ok((inv.gram, m2))
}

/// Requested bispectrum entries; inadmissible degree triples come back as exact
/// zeros with `admissible == false`.
pub fn gamma3_3d<S: Signal + ?Sized>(f: &S, spec: &SphericalSpec3D, triples: &[BispecKey]) -> Result<Vec<BispecValue>> {
    let inv = extract_invariants_3d(f, spec, triples)?;
    Ok(triples
        .iter()
        .map(|k| {
            let ok = admissible(k.ells[0], k.ells[1], k.ells[2]);
            let value = if ok { inv.bispec[k] } else { ZERO };
            BispecValue { key: *k, value, admissible: ok }
        })
        .collect())
}

/// Rotation-averaged invariants of f about the origin, over `n_rot`
/// super-Fibonacci rotations. Test oracle.
pub fn so3_moments_direct<S: Signal + ?Sized>(
    f: &S,
    spec: &SphericalSpec3D,
    n_rot: usize,
    triples: &[BispecKey],
) -> Result<InvariantSet3D> {
    check_signal(f, spec)?;
    if n_rot == 0 {
        return invalid("so3_moments_direct needs at least one rotation");
    }
    let gaunt = GauntTable::new(spec.l_max)?;
    let plan = BispecPlan::new(triples, spec.l_max, spec.shells.count())?;
    let tr = Transform::new(spec);
    let rots: Vec<Matrix3<f64>> = quaternion_fibonacci(n_rot).iter().map(|q| q.to_rotation_matrix().into_inner()).collect();
    let parts: Vec<Accumulator> = rots
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Accumulator::new(spec.l_max, spec.shells.count(), plan.len());
            for q in chunk {
                let h = tr.coefficients(f, [0.0; 3], Some(q), spec);
                acc.add(&h, 1.0, &plan, &gaunt);
            }
            acc
        })
        .collect();
    let total = tree_merge(parts, spec.l_max, spec.shells.count(), plan.len());
    Ok(total.finish(n_rot as f64, &plan, &spec.shells, Some(&spec.gl_nodes.nodes)))
}

/// Relative Frobenius distance between Gram stacks.
pub fn gram_rel_error(a: &[DMatrix<Complex64>], b: &[DMatrix<Complex64>]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum();
    let den: f64 = b.iter().map(|y| y.norm_squared()).sum();
    (num / den).sqrt()
}

/// Relative ℓ² distance over bispectrum entries present in both tables.
pub fn bispec_rel_error(a: &BTreeMap<BispecKey, Complex64>, b: &BTreeMap<BispecKey, Complex64>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (k, y) in b {
        if let Some(x) = a.get(k) {
            num += (x - y).norm_sqr();
            den += y.norm_sqr();
        }
    }
    (num / den).sqrt()
}
