//! Sampled signals on Cartesian grids: interpolation, rigid motions, the
//! ORGD file format, and alignment-minimized reconstruction metrics.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::harmonics::fibonacci_sphere;

const MAGIC: &[u8; 4] = b"ORGD";

/// Uniform Cartesian samples of a real signal. Axis 0 varies slowest; the
/// physical origin sits at the geometric center of the array.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub dim: usize,
    pub shape: Vec<usize>,
    pub spacing: f64,
    pub support_radius: f64,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn zeros(shape: &[usize], spacing: f64, support_radius: f64) -> Result<Self> {
        let dim = shape.len();
        if dim != 2 && dim != 3 {
            return invalid(format!("grid dimension must be 2 or 3, got {dim}"));
        }
        if shape.iter().any(|&n| n < 2) {
            return invalid("every axis needs at least two samples");
        }
        if !(spacing > 0.0) || !(support_radius >= 0.0) {
            return invalid("spacing must be positive and support radius non-negative");
        }
        let len = shape.iter().product();
        Ok(Self { dim, shape: shape.to_vec(), spacing, support_radius, values: vec![0.0; len] })
    }

    /// Grid filled by evaluating `f` at every node position.
    pub fn from_fn(
        shape: &[usize],
        spacing: f64,
        support_radius: f64,
        f: impl Fn(&[f64]) -> f64 + Sync,
    ) -> Result<Self> {
        let mut g = Self::zeros(shape, spacing, support_radius)?;
        let proto = g.clone();
        g.values.par_iter_mut().enumerate().for_each(|(i, v)| {
            let p = proto.node_position(i);
            *v = f(&p[..proto.dim]);
        });
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// h^n.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    /// Physical coordinate of index `i` along `axis`.
    #[inline]
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        (i as f64 - 0.5 * (self.shape[axis] as f64 - 1.0)) * self.spacing
    }

    /// Multi-index of a flat offset.
    pub fn unravel(&self, mut flat: usize) -> [usize; 3] {
        let mut idx = [0; 3];
        for axis in (0..self.dim).rev() {
            idx[axis] = flat % self.shape[axis];
            flat /= self.shape[axis];
        }
        idx
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.shape).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    /// Physical position of a flat offset (trailing entries zero in 2D).
    pub fn node_position(&self, flat: usize) -> [f64; 3] {
        let idx = self.unravel(flat);
        let mut p = [0.0; 3];
        for axis in 0..self.dim {
            p[axis] = self.coord(axis, idx[axis]);
        }
        p
    }

    /// Half-width of the sampled extent along the narrowest axis.
    pub fn half_extent(&self) -> f64 {
        self.shape.iter().map(|&n| 0.5 * (n as f64 - 1.0) * self.spacing).fold(f64::INFINITY, f64::min)
    }

    /// Bi/trilinear interpolation; zero outside the sampled extent.
    pub fn sample(&self, p: &[f64]) -> Result<f64> {
        if p.len() != self.dim {
            return invalid(format!("point has {} coordinates, grid is {}D", p.len(), self.dim));
        }
        if p.iter().any(|c| c.is_nan()) {
            return invalid("NaN coordinate");
        }
        Ok(self.sample_fast(p))
    }

    /// [`Grid::sample`] without argument checks.
    #[inline]
    pub fn sample_fast(&self, p: &[f64]) -> f64 {
        if self.dim == 2 {
            self.sample2(p[0], p[1])
        } else {
            self.sample3(p[0], p[1], p[2])
        }
    }

    #[inline]
    fn locate(&self, axis: usize, x: f64) -> Option<(usize, f64)> {
        let n = self.shape[axis];
        let u = x / self.spacing + 0.5 * (n as f64 - 1.0);
        if !(u >= 0.0 && u <= (n - 1) as f64) {
            return None;
        }
        let i = (u as usize).min(n - 2);
        Some((i, u - i as f64))
    }

    #[inline]
    pub fn sample2(&self, x: f64, y: f64) -> f64 {
        let (Some((i, fx)), Some((j, fy))) = (self.locate(0, x), self.locate(1, y)) else {
            return 0.0;
        };
        let n1 = self.shape[1];
        let b = i * n1 + j;
        let v = &self.values;
        let a0 = v[b] + fy * (v[b + 1] - v[b]);
        let a1 = v[b + n1] + fy * (v[b + n1 + 1] - v[b + n1]);
        a0 + fx * (a1 - a0)
    }

    #[inline]
    pub fn sample3(&self, x: f64, y: f64, z: f64) -> f64 {
        let (Some((i, fx)), Some((j, fy)), Some((k, fz))) =
            (self.locate(0, x), self.locate(1, y), self.locate(2, z))
        else {
            return 0.0;
        };
        let n1 = self.shape[1];
        let n2 = self.shape[2];
        let v = &self.values;
        let b = (i * n1 + j) * n2 + k;
        let lerp = |o: usize| v[o] + fz * (v[o + 1] - v[o]);
        let c00 = lerp(b);
        let c01 = lerp(b + n2);
        let c10 = lerp(b + n1 * n2);
        let c11 = lerp(b + n1 * n2 + n2);
        let c0 = c00 + fy * (c01 - c00);
        let c1 = c10 + fy * (c11 - c10);
        c0 + fx * (c1 - c0)
    }

    /// Interpolated value restricted to the closed support ball about the origin.
    #[inline]
    pub fn sample_in_support(&self, p: &[f64]) -> f64 {
        let r2: f64 = p.iter().map(|c| c * c).sum();
        if r2 > self.support_radius * self.support_radius {
            0.0
        } else {
            self.sample_fast(p)
        }
    }

    /// True when every node farther than R (+ tol) from the origin is zero.
    pub fn is_ball_supported(&self, tol: f64) -> bool {
        let r2 = (self.support_radius + tol).powi(2);
        self.values.iter().enumerate().all(|(i, &v)| {
            let p = self.node_position(i);
            v == 0.0 || p.iter().map(|c| c * c).sum::<f64>() <= r2
        })
    }

    /// Σ v² h^n.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() * self.cell_volume()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn same_layout(&self, other: &Grid) -> bool {
        self.dim == other.dim && self.shape == other.shape && self.spacing == other.spacing
    }
}

/// Rotation in the plane (angle) or in space (unit quaternion).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Rotation {
    Planar(f64),
    Spatial([f64; 4]),
}

impl Rotation {
    pub fn identity(dim: usize) -> Self {
        if dim == 2 {
            Rotation::Planar(0.0)
        } else {
            Rotation::Spatial([1.0, 0.0, 0.0, 0.0])
        }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>) -> Self {
        Rotation::Spatial([q.w, q.i, q.j, q.k])
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        match *self {
            Rotation::Planar(a) => UnitQuaternion::from_axis_angle(&Vector3::z_axis(), a),
            Rotation::Spatial([w, x, y, z]) => {
                UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Rotation::Planar(_) => 2,
            Rotation::Spatial(_) => 3,
        }
    }

    /// 3×3 matrix (planar rotations act on the leading 2×2 block).
    pub fn matrix(&self) -> Matrix3<f64> {
        match *self {
            Rotation::Planar(a) => {
                let (s, c) = a.sin_cos();
                Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
            }
            Rotation::Spatial(_) => *self.quaternion().to_rotation_matrix().matrix(),
        }
    }

    pub fn inverse(&self) -> Self {
        match *self {
            Rotation::Planar(a) => Rotation::Planar(-a),
            Rotation::Spatial([w, x, y, z]) => Rotation::Spatial([w, -x, -y, -z]),
        }
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        match (*self, *other) {
            (Rotation::Planar(a), Rotation::Planar(b)) => Rotation::Planar(a + b),
            _ => Rotation::from_quaternion(self.quaternion() * other.quaternion()),
        }
    }
}

/// Deterministic near-uniform set of `n` unit quaternions (super-Fibonacci spiral).
pub fn quaternion_fibonacci(n: usize) -> Vec<UnitQuaternion<f64>> {
    let phi = 2f64.sqrt();
    let psi = 1.533_751_168_755_204_3_f64;
    let nf = n as f64;
    (0..n)
        .map(|i| {
            let s = i as f64 + 0.5;
            let r = (s / nf).sqrt();
            let big_r = (1.0 - s / nf).sqrt();
            let alpha = 2.0 * PI * s / phi;
            let beta = 2.0 * PI * s / psi;
            UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                big_r * beta.cos(),
                r * alpha.sin(),
                r * alpha.cos(),
                big_r * beta.sin(),
            ))
        })
        .collect()
}

/// out(x) = in(R⁻¹(x − t)) on the input layout.
pub fn apply_rigid_motion(grid: &Grid, rotation: &Rotation, translation: &[f64]) -> Result<Grid> {
    if rotation.dim() != grid.dim || translation.len() != grid.dim {
        return invalid("motion dimension does not match grid");
    }
    let rinv = rotation.matrix().transpose();
    let mut t = [0.0; 3];
    t[..grid.dim].copy_from_slice(translation);
    let mut out = grid.clone();
    out.values.par_iter_mut().enumerate().for_each(|(i, v)| {
        let p = grid.node_position(i);
        let d = Vector3::new(p[0] - t[0], p[1] - t[1], p[2] - t[2]);
        let q = rinv * d;
        *v = if grid.dim == 2 { grid.sample2(q[0], q[1]) } else { grid.sample3(q[0], q[1], q[2]) };
    });
    Ok(out)
}

/// Copy whose nodes outside the support ball hold the value sampled at
/// radius R − `inset` along the same ray. Support-masked sampling of the
/// result reproduces a hard edge at R without the one-cell blur of zeros.
pub fn extend_support(grid: &Grid, inset: f64) -> Result<Grid> {
    let r = grid.support_radius;
    if !(inset > 0.0 && inset < r) {
        return invalid(format!("inset must lie in (0, R), got {inset}"));
    }
    let mut out = grid.clone();
    out.values.par_iter_mut().enumerate().for_each(|(i, v)| {
        let p = grid.node_position(i);
        let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if norm > r {
            let k = (r - inset) / norm;
            *v = if grid.dim == 2 { grid.sample2(p[0] * k, p[1] * k) } else { grid.sample3(p[0] * k, p[1] * k, p[2] * k) };
        }
    });
    Ok(out)
}

/// Quadrature of f(rθ)·f(−rθ) over the unit circle (2D) or sphere (3D).
pub fn antipodal_correlation(grid: &Grid, radius: f64, n_dirs: usize) -> Result<f64> {
    if !(radius >= 0.0) || radius > grid.half_extent() {
        return invalid(format!("radius {radius} exceeds grid extent {}", grid.half_extent()));
    }
    if grid.dim == 2 {
        if n_dirs == 0 {
            return invalid("need at least one direction");
        }
        let w = 2.0 * PI / n_dirs as f64;
        Ok((0..n_dirs)
            .map(|k| {
                let (s, c) = (2.0 * PI * k as f64 / n_dirs as f64).sin_cos();
                grid.sample2(radius * c, radius * s) * grid.sample2(-radius * c, -radius * s) * w
            })
            .sum())
    } else {
        let quad = fibonacci_sphere(n_dirs)?;
        Ok(quad
            .directions
            .iter()
            .zip(&quad.weights)
            .map(|(d, w)| {
                let p = [radius * d[0], radius * d[1], radius * d[2]];
                grid.sample3(p[0], p[1], p[2]) * grid.sample3(-p[0], -p[1], -p[2]) * w
            })
            .sum())
    }
}

/// Alignment-minimized reconstruction quality.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub mse_aligned: f64,
    pub mse_identity: f64,
    pub ssim: f64,
    pub best_rotation: Rotation,
}

fn relative_sq_error(a: &[f64], b: &[f64], ref_norm2: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ref_norm2
}

/// min over rotations g of ‖g·est − ref‖²/‖ref‖². `rotation_grid` is the
/// number of uniform angles in 2D and of Fibonacci quaternions in 3D; the
/// best candidate is refined by golden-section search.
pub fn aligned_mse(estimate: &Grid, reference: &Grid, rotation_grid: usize) -> Result<MetricReport> {
    if !estimate.same_layout(reference) {
        return invalid("estimate and reference layouts differ");
    }
    let ref_norm2: f64 = reference.values.iter().map(|v| v * v).sum();
    if ref_norm2 == 0.0 {
        return invalid("reference has zero norm");
    }
    let zero = vec![0.0; estimate.dim];
    let cost = |r: &Rotation| -> f64 {
        let moved = apply_rigid_motion(estimate, r, &zero).expect("layout checked");
        relative_sq_error(&moved.values, &reference.values, ref_norm2)
    };
    let mse_identity = relative_sq_error(&estimate.values, &reference.values, ref_norm2);
    let mut candidates = vec![Rotation::identity(estimate.dim)];
    let count = rotation_grid.max(1);
    if estimate.dim == 2 {
        candidates.extend((1..count).map(|k| Rotation::Planar(2.0 * PI * k as f64 / count as f64)));
    } else {
        candidates.extend(quaternion_fibonacci(count).into_iter().map(Rotation::from_quaternion));
    }
    let costs: Vec<f64> = candidates.par_iter().map(&cost).collect();
    let mut best = 0;
    for (i, &c) in costs.iter().enumerate() {
        if c < costs[best] {
            best = i;
        }
    }
    let mut best_rot = candidates[best];
    let mut best_cost = costs[best];
    if estimate.dim == 2 {
        let Rotation::Planar(a0) = best_rot else { unreachable!() };
        let step = 2.0 * PI / count as f64;
        let (a, c) = golden_section(|a| cost(&Rotation::Planar(a)), a0 - step, a0 + step, 40);
        if c < best_cost {
            best_rot = Rotation::Planar(a.rem_euclid(2.0 * PI));
            best_cost = c;
        }
    } else {
        let cell = (PI * PI / count as f64).cbrt();
        for sweep in 0..3 {
            let half = cell / (1 << sweep) as f64;
            for axis in [Vector3::x_axis(), Vector3::y_axis(), Vector3::z_axis()] {
                let base = best_rot.quaternion();
                let rot_at = |a: f64| Rotation::from_quaternion(UnitQuaternion::from_axis_angle(&axis, a) * base);
                let (a, c) = golden_section(|a| cost(&rot_at(a)), -half, half, 24);
                if c < best_cost {
                    best_cost = c;
                    best_rot = rot_at(a);
                }
            }
        }
    }
    let aligned = apply_rigid_motion(estimate, &best_rot, &zero)?;
    let ssim = ssim(&aligned, reference)?;
    Ok(MetricReport { mse_aligned: best_cost.min(mse_identity), mse_identity, ssim, best_rotation: best_rot })
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc < fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

fn gaussian_window() -> [f64; 11] {
    let mut w = [0.0; 11];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering along every axis.
fn filter_valid(values: &[f64], shape: &[usize], w: &[f64; 11]) -> (Vec<f64>, Vec<usize>) {
    let mut cur = values.to_vec();
    let mut cur_shape = shape.to_vec();
    for axis in 0..shape.len() {
        let n = cur_shape[axis];
        let m = n - 10;
        let inner: usize = cur_shape[axis + 1..].iter().product();
        let outer: usize = cur_shape[..axis].iter().product();
        let mut next = vec![0.0; outer * m * inner];
        for o in 0..outer {
            for i in 0..m {
                for k in 0..inner {
                    let mut acc = 0.0;
                    for (t, wt) in w.iter().enumerate() {
                        acc += wt * cur[(o * n + i + t) * inner + k];
                    }
                    next[(o * m + i) * inner + k] = acc;
                }
            }
        }
        cur = next;
        cur_shape[axis] = m;
    }
    (cur, cur_shape)
}

/// Mean SSIM with an 11-sample Gaussian window (σ = 1.5) and K1 = 0.01,
/// K2 = 0.03 relative to the reference dynamic range.
pub fn ssim(a: &Grid, b: &Grid) -> Result<f64> {
    if !a.same_layout(b) {
        return invalid("ssim layouts differ");
    }
    if a.shape.iter().any(|&n| n < 11) {
        return invalid("ssim needs at least 11 samples per axis");
    }
    let (lo, hi) = b.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let w = gaussian_window();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect()
    };
    let (mu_a, _) = filter_valid(&a.values, &a.shape, &w);
    let (mu_b, _) = filter_valid(&b.values, &b.shape, &w);
    let (saa, _) = filter_valid(&prod(&|x, _| x * x), &a.shape, &w);
    let (sbb, _) = filter_valid(&prod(&|_, y| y * y), &a.shape, &w);
    let (sab, _) = filter_valid(&prod(&|x, y| x * y), &a.shape, &w);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Serialize to the ORGD byte layout.
pub fn grid_to_bytes(grid: &Grid) -> Result<Vec<u8>> {
    grid.check_finite()?;
    let mut out = Vec::with_capacity(4 + 1 + 4 * grid.dim + 16 + 4 * grid.len());
    out.extend_from_slice(MAGIC);
    out.push(grid.dim as u8);
    for &n in &grid.shape {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.extend_from_slice(&grid.spacing.to_le_bytes());
    out.extend_from_slice(&grid.support_radius.to_le_bytes());
    for (i, &v) in grid.values.iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(i));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parse the ORGD byte layout.
pub fn grid_from_bytes(bytes: &[u8]) -> Result<Grid> {
    let need = |n: usize, what: &str| -> Result<()> {
        if bytes.len() < n {
            Err(Error::Truncated(format!("{what}: have {} bytes, need {n}", bytes.len())))
        } else {
            Ok(())
        }
    };
    need(5, "header")?;
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let dim = bytes[4] as usize;
    if dim != 2 && dim != 3 {
        return invalid(format!("unsupported dimension {dim}"));
    }
    let mut pos = 5;
    need(pos + 4 * dim + 16, "shape and scales")?;
    let mut shape = Vec::with_capacity(dim);
    for _ in 0..dim {
        shape.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
        pos += 4;
    }
    let spacing = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
    let support_radius = f64::from_le_bytes(bytes[pos + 8..pos + 16].try_into().unwrap());
    pos += 16;
    let len: usize = shape.iter().product();
    need(pos + 4 * len, "payload")?;
    let mut values = Vec::with_capacity(len);
    for i in 0..len {
        let v = f32::from_le_bytes(bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::NonFinite(i));
        }
        values.push(v as f64);
    }
    let mut grid = Grid::zeros(&shape, spacing, support_radius)?;
    grid.values = values;
    Ok(grid)
}

pub fn save_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let bytes = grid_to_bytes(grid)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    grid_from_bytes(&bytes)
}

/// Write labelled metric reports as an RFC-4180 table.
pub fn write_metrics_csv<W: Write>(out: W, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(out);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(["label", "mse_aligned", "mse_identity", "ssim", "best_rotation"]).map_err(io)?;
    for (label, r) in rows {
        let rot = serde_json::to_string(&r.best_rotation)?;
        w.write_record([
            label.as_str(),
            &format!("{:.9e}", r.mse_aligned),
            &format!("{:.9e}", r.mse_identity),
            &format!("{:.9}", r.ssim),
            &rot,
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
