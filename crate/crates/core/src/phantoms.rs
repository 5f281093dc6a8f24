//! Deterministic analytic test signals.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::extract3d::ShCoeffTable;
use crate::grids_io::Grid;
use crate::harmonics::{lm_count, sph_harm_all, ShellBasis};
use crate::observe::Signal;

/// Edge profile at the support radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Edge {
    /// Indicator of the closed disk.
    Hard,
    /// cos² ramp from 1 at R − width to 0 at R.
    Soft { width: f64 },
}

/// Anisotropic Gaussian bump in normalized coordinates (units of R).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: [f64; 2],
    pub scale: [f64; 2],
    pub amplitude: f64,
}

/// Ellipse plateau with a logistic rim, normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub center: [f64; 2],
    pub axes: [f64; 2],
    pub softness: f64,
    pub amplitude: f64,
}

/// Sum of smooth pieces on a disk of radius R with a chosen edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarPhantom {
    pub radius: f64,
    pub base: f64,
    pub tilt: [f64; 2],
    pub bumps: Vec<Bump>,
    pub plateaus: Vec<Plateau>,
    pub edge: Edge,
}

impl PlanarPhantom {
    /// Interior profile without the edge factor.
    pub fn profile(&self, x: f64, y: f64) -> f64 {
        let (u, v) = (x / self.radius, y / self.radius);
        let mut acc = self.base + self.tilt[0] * u + self.tilt[1] * v;
        for b in &self.bumps {
            let du = (u - b.center[0]) / b.scale[0];
            let dv = (v - b.center[1]) / b.scale[1];
            acc += b.amplitude * (-0.5 * (du * du + dv * dv)).exp();
        }
        for p in &self.plateaus {
            let du = (u - p.center[0]) / p.axes[0];
            let dv = (v - p.center[1]) / p.axes[1];
            let rho = (du * du + dv * dv).sqrt();
            acc += p.amplitude / (1.0 + ((rho - 1.0) / p.softness).exp());
        }
        acc
    }

    pub fn edge_factor(&self, r: f64) -> f64 {
        match self.edge {
            Edge::Hard => {
                if r <= self.radius {
                    1.0
                } else {
                    0.0
                }
            }
            Edge::Soft { width } => {
                if r >= self.radius {
                    0.0
                } else if r <= self.radius - width {
                    1.0
                } else {
                    let s = (self.radius - r) / width;
                    (0.5 * std::f64::consts::PI * s).sin().powi(2)
                }
            }
        }
    }

    /// Samples on an n×n grid centered at the origin. With `extend`, nodes
    /// beyond R carry the interior profile so that support-masked bilinear
    /// sampling reproduces a sharp edge exactly at R.
    pub fn to_grid(&self, n: usize, spacing: f64, extend: bool) -> Result<Grid> {
        if 0.5 * (n as f64 - 1.0) * spacing + 1e-9 < self.radius {
            return invalid("grid does not cover the support disk");
        }
        Grid::from_fn(&[n, n], spacing, self.radius, |p| {
            let r = p[0].hypot(p[1]);
            let e = if extend && r > self.radius { 1.0 } else { self.edge_factor(r) };
            e * self.profile(p[0], p[1])
        })
    }

    /// Positive, non-symmetric image with a hard edge.
    pub fn test_image(radius: f64) -> Self {
        Self {
            radius,
            base: 0.55,
            tilt: [0.12, -0.08],
            bumps: vec![
                Bump { center: [0.35, 0.2], scale: [0.18, 0.12], amplitude: 0.45 },
                Bump { center: [-0.3, 0.35], scale: [0.1, 0.1], amplitude: -0.3 },
                Bump { center: [-0.15, -0.45], scale: [0.25, 0.08], amplitude: 0.35 },
                Bump { center: [0.55, -0.4], scale: [0.08, 0.15], amplitude: 0.3 },
                Bump { center: [0.0, 0.0], scale: [0.12, 0.3], amplitude: 0.2 },
            ],
            plateaus: vec![Plateau { center: [-0.45, -0.05], axes: [0.2, 0.3], softness: 0.05, amplitude: 0.25 }],
            edge: Edge::Hard,
        }
    }

    /// Smooth image with wide features, for low-resolution studies.
    pub fn smooth_image(radius: f64, edge: Edge) -> Self {
        Self {
            radius,
            base: 0.6,
            tilt: [0.25, -0.15],
            bumps: vec![
                Bump { center: [0.35, 0.25], scale: [0.35, 0.3], amplitude: 0.5 },
                Bump { center: [-0.4, -0.2], scale: [0.3, 0.4], amplitude: -0.3 },
                Bump { center: [0.1, -0.5], scale: [0.4, 0.25], amplitude: 0.25 },
            ],
            plateaus: Vec::new(),
            edge,
        }
    }

    /// Stylized head-and-shoulders portrait, positive up to the disk edge.
    pub fn portrait(radius: f64) -> Self {
        let b = |c: [f64; 2], s: [f64; 2], a: f64| Bump { center: c, scale: s, amplitude: a };
        let p = |c: [f64; 2], ax: [f64; 2], soft: f64, a: f64| Plateau { center: c, axes: ax, softness: soft, amplitude: a };
        Self {
            radius,
            base: 0.32,
            tilt: [-0.06, 0.04],
            bumps: vec![
                b([-0.2, -0.17], [0.045, 0.06], -0.32),
                b([-0.2, 0.17], [0.045, 0.06], -0.32),
                b([-0.27, -0.17], [0.025, 0.09], -0.12),
                b([-0.27, 0.17], [0.025, 0.09], -0.12),
                b([0.0, 0.0], [0.12, 0.045], 0.12),
                b([0.06, 0.03], [0.03, 0.03], -0.08),
                b([0.23, 0.0], [0.035, 0.15], -0.25),
                b([-0.05, -0.3], [0.12, 0.08], 0.06),
                b([-0.05, 0.3], [0.12, 0.08], 0.06),
                b([-0.35, 0.45], [0.5, 0.3], 0.1),
            ],
            plateaus: vec![
                p([-0.05, 0.0], [0.55, 0.42], 0.04, 0.42),
                p([-0.45, 0.0], [0.32, 0.5], 0.05, 0.18),
                p([0.95, 0.0], [0.45, 0.85], 0.05, 0.28),
                p([0.55, 0.0], [0.2, 0.13], 0.06, 0.25),
            ],
            edge: Edge::Hard,
        }
    }
}

impl Signal for PlanarPhantom {
    fn dim(&self) -> usize {
        2
    }
    fn support_radius(&self) -> f64 {
        self.radius
    }
    fn eval(&self, p: &[f64]) -> f64 {
        let r = p[0].hypot(p[1]);
        let e = self.edge_factor(r);
        if e == 0.0 {
            0.0
        } else {
            e * self.profile(p[0], p[1])
        }
    }
}

/// Volume f(x) = Σ_ℓm Σ_q α_ℓm[q] W_q(|x|/R) Y_ℓm(x/|x|) inside the ball of
/// radius R, zero outside.
#[derive(Clone, Debug)]
pub struct BandlimitedVolume {
    pub radius: f64,
    pub shells: ShellBasis,
    pub alpha: ShCoeffTable,
}

impl BandlimitedVolume {
    /// Real random expansion: Gaussian coefficients with degree-ℓ scale
    /// 1/(1+ℓ) and a positive radial mean.
    pub fn random<R: Rng + ?Sized>(l_max: usize, shells: &ShellBasis, radius: f64, rng: &mut R) -> Self {
        let n = shells.count();
        let mut alpha = ShCoeffTable::zeros(l_max, n);
        for ell in 0..=l_max {
            let amp = 1.0 / (1.0 + ell as f64);
            for m in 0..=ell as i64 {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                for q in 0..n {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = if m == 0 { 0.0 } else { rng.sample(StandardNormal) };
                    let mut v = Complex64::new(re, im) * amp;
                    if ell == 0 {
                        v += 1.5;
                    }
                    alpha.set(ell, m, q, v);
                    alpha.set(ell, -m, q, v.conj() * sign);
                }
            }
        }
        Self { radius, shells: shells.clone(), alpha }
    }

    /// Shell coefficients in another basis, by that basis' radial rule.
    pub fn shell_coefficients_in(&self, basis: &ShellBasis) -> ShCoeffTable {
        let n = self.shells.count();
        let nq = basis.count();
        let mut cross = vec![0.0; nq * n];
        for (i, &r) in basis.radial_nodes.iter().enumerate() {
            for a in 0..nq {
                let wa = basis.radial_weights[i] * basis.values[(a, i)];
                for b in 0..n {
                    cross[a * n + b] += wa * self.shells.eval(b, r);
                }
            }
        }
        let mut out = ShCoeffTable::zeros(self.alpha.l_max, nq);
        for k in 0..lm_count(self.alpha.l_max) {
            for a in 0..nq {
                let mut acc = Complex64::new(0.0, 0.0);
                for b in 0..n {
                    acc += self.alpha.values[k * n + b] * cross[a * n + b];
                }
                out.values[k * nq + a] = acc;
            }
        }
        out
    }

    /// True shell coefficients F̂ = S·α in the volume's own basis.
    pub fn shell_coefficients(&self) -> ShCoeffTable {
        let n = self.shells.count();
        let mut out = ShCoeffTable::zeros(self.alpha.l_max, n);
        for k in 0..lm_count(self.alpha.l_max) {
            for a in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for b in 0..n {
                    acc += self.alpha.values[k * n + b] * self.shells.overlap[(a, b)];
                }
                out.values[k * n + a] = acc;
            }
        }
        out
    }

    /// Samples on an n³ grid. With `extend`, nodes beyond R carry the
    /// interior expansion, as in [`PlanarPhantom::to_grid`].
    pub fn to_grid(&self, n: usize, spacing: f64, extend: bool) -> Result<Grid> {
        if 0.5 * (n as f64 - 1.0) * spacing + 1e-9 < self.radius {
            return invalid("grid does not cover the support ball");
        }
        Grid::from_fn(&[n, n, n], spacing, self.radius, |p| if extend { self.expansion(p) } else { self.eval(p) })
    }

    /// The expansion evaluated without the support cut.
    pub fn expansion(&self, p: &[f64]) -> f64 {
        let rr = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let r = rr / self.radius;
        let l_max = self.alpha.l_max;
        let n = self.shells.count();
        let w: Vec<f64> = (0..n).map(|q| self.shells.eval(q, r)).collect();
        let mut y = vec![Complex64::new(0.0, 0.0); lm_count(l_max)];
        let theta = if rr > 0.0 { (p[2] / rr).clamp(-1.0, 1.0).acos() } else { 0.0 };
        sph_harm_all(l_max, theta, p[1].atan2(p[0]), &mut y);
        let mut acc = 0.0;
        for (k, yk) in y.iter().enumerate() {
            let radial: Complex64 = (0..n).map(|q| self.alpha.values[k * n + q] * w[q]).sum();
            acc += (radial * yk).re;
        }
        acc
    }
}

impl Signal for BandlimitedVolume {
    fn dim(&self) -> usize {
        3
    }
    fn support_radius(&self) -> f64 {
        self.radius
    }
    fn eval(&self, p: &[f64]) -> f64 {
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] > self.radius * self.radius {
            return 0.0;
        }
        self.expansion(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_positive_inside() {
        for ph in [PlanarPhantom::test_image(10.0), PlanarPhantom::portrait(10.0), PlanarPhantom::smooth_image(10.0, Edge::Hard)] {
            for i in 0..200 {
                let a = i as f64 * 0.7;
                let r = 9.99 * ((i % 20) as f64 / 19.0);
                let v = ph.eval(&[r * a.cos(), r * a.sin()]);
                assert!(v > 0.05, "{v}");
            }
            assert_eq!(ph.eval(&[10.01, 0.0]), 0.0);
        }
    }

    #[test]
    fn soft_edge_is_continuous() {
        let ph = PlanarPhantom::smooth_image(5.0, Edge::Soft { width: 1.0 });
        assert_eq!(ph.eval(&[5.0, 0.0]), 0.0);
        assert!((ph.eval(&[3.999, 0.0]) - ph.profile(3.999, 0.0)).abs() < 1e-5);
    }

    #[test]
    fn extended_grid_matches_inside() {
        let ph = PlanarPhantom::test_image(7.5);
        let g = ph.to_grid(16, 1.0, true).unwrap();
        let c = ph.to_grid(16, 1.0, false).unwrap();
        for i in 0..g.len() {
            let p = g.node_position(i);
            if p[0].hypot(p[1]) <= 7.5 {
                assert_eq!(g.values[i], c.values[i]);
            } else {
                assert_eq!(c.values[i], 0.0);
            }
        }
    }
}
