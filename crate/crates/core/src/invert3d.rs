//! Frequency marching: shell coefficients degree by degree from Gram and
//! bispectrum invariants, then synthesis of the volume.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::extract3d::{coupled_pair, InvariantSet3D, ShCoeffTable};
use crate::grids_io::Grid;
use crate::harmonics::{lm_count, sph_harm_all, GauntTable, ShellBasis};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Ratio λ2/λ1 above which gram0 is reported as not rank one.
pub const RANK_ONE_TOL: f64 = 1e-4;
/// Relative tolerance for an oracle ℓ = 1 factor.
pub const GAUGE_TOL: f64 = 1e-6;
/// Tikhonov shift on the shell overlap matrix during synthesis.
pub const OVERLAP_RIDGE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gauge {
    Oracle,
    Canonical,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LsSolver {
    #[default]
    NormalEquations,
    Qr,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MarchOptions {
    /// Ridge λ; `None` uses 1e-8·tr(AᴴA)/(2ℓ+1).
    pub lambda: Option<f64>,
    pub solver: LsSolver,
}

/// Progress of the march.
#[derive(Clone, Debug)]
pub struct MarchState {
    pub recovered: ShCoeffTable,
    /// ‖A x − b‖ per degree and shell (zero for ℓ ≤ 1).
    pub residuals: Vec<Vec<f64>>,
    /// Condition number of the regularized normal matrix per degree and shell.
    pub conditioning: Vec<Vec<f64>>,
    pub gauge: Gauge,
    pub warnings: Vec<String>,
}

impl MarchState {
    pub fn new(l_max: usize, shells: usize, gauge: Gauge) -> Self {
        Self {
            recovered: ShCoeffTable::zeros(l_max, shells),
            residuals: vec![vec![0.0; shells]; l_max + 1],
            conditioning: vec![vec![1.0; shells]; l_max + 1],
            gauge,
            warnings: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct L0Recovery {
    pub f0: DVector<Complex64>,
    /// λ2/λ1 of gram0.
    pub rank_ratio: f64,
}

/// Principal eigenpair of gram0: F̂_0 = √λ1·v with the largest entry made real positive.
pub fn recover_l0(gram0: &DMatrix<Complex64>) -> L0Recovery {
    let n = gram0.nrows();
    let eig = gram0.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let l1 = eig.eigenvalues[order[0]];
    if !(l1 > 0.0) {
        return L0Recovery { f0: DVector::zeros(n), rank_ratio: 0.0 };
    }
    let rank_ratio = if n > 1 { eig.eigenvalues[order[1]].abs() / l1 } else { 0.0 };
    let v = eig.eigenvectors.column(order[0]).into_owned();
    let big = v.iter().copied().max_by(|a, b| a.norm().total_cmp(&b.norm())).unwrap();
    let phase = big.conj() / big.norm();
    L0Recovery { f0: v * (phase * l1.sqrt()), rank_ratio }
}

/// Complex ℓ = 1 rows (m = −1, 0, 1) of a real signal from its Cartesian-like
/// real coefficients (x, y, z rows).
fn real_to_complex_l1(x: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let i = Complex64::new(0.0, 1.0);
    let mut f = DMatrix::zeros(3, x.ncols());
    for q in 0..x.ncols() {
        f[(0, q)] = (x[(0, q)] + i * x[(1, q)]) * s;
        f[(1, q)] = x[(2, q)];
        f[(2, q)] = (-x[(0, q)] + i * x[(1, q)]) * s;
    }
    f
}

/// ℓ = 1 factor with F̂_1ᴴ F̂_1 = gram1: the oracle after a consistency check,
/// or the canonical factor from the three leading eigenpairs.
pub fn fix_gauge_l1(gram1: &DMatrix<Complex64>, oracle: Option<&DMatrix<Complex64>>) -> Result<DMatrix<Complex64>> {
    let scale = gram1.norm().max(f64::MIN_POSITIVE);
    if let Some(f) = oracle {
        if f.nrows() != 3 || f.ncols() != gram1.ncols() {
            return invalid(format!("oracle is {}×{}, expected 3×{}", f.nrows(), f.ncols(), gram1.ncols()));
        }
        let defect = (f.adjoint() * f - gram1).norm() / scale;
        if defect > GAUGE_TOL {
            return Err(Error::GaugeMismatch(defect));
        }
        return Ok(f.clone());
    }
    let n = gram1.nrows();
    let eig = gram1.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut x = DMatrix::zeros(3, n);
    for (row, &k) in order.iter().take(3).enumerate() {
        let lam = eig.eigenvalues[k];
        if !(lam > 0.0) {
            continue;
        }
        let mut v = eig.eigenvectors.column(k).into_owned();
        if let Some(first) = v.iter().copied().find(|z| z.norm() > 1e-12) {
            v *= first.conj() / first.norm();
        }
        for q in 0..n {
            x[(row, q)] = v[q].conj() * lam.sqrt();
        }
    }
    Ok(real_to_complex_l1(&x))
}

/// One row per stored B_ℓ1ℓ2ℓ(a, b, c) with ℓ1, ℓ2 < ℓ. The row is the
/// conjugate of T_abc·Σ G̃ F̂_ℓ1m1[a] F̂_ℓ2m2[b] and the entry is conj(B), so
/// that A·f̂_ℓ(c) = b.
pub fn assemble_system(
    ell: usize,
    c: usize,
    state: &MarchState,
    invariants: &InvariantSet3D,
    shells: &ShellBasis,
) -> Result<(DMatrix<Complex64>, DVector<Complex64>)> {
    let gaunt = GauntTable::new(ell.max(state.recovered.l_max))?;
    assemble_with(ell, c, state, invariants, shells, &gaunt)
}

fn assemble_with(
    ell: usize,
    c: usize,
    state: &MarchState,
    invariants: &InvariantSet3D,
    shells: &ShellBasis,
    gaunt: &GauntTable,
) -> Result<(DMatrix<Complex64>, DVector<Complex64>)> {
    let w = 2 * ell + 1;
    let mut rows: Vec<Complex64> = Vec::new();
    let mut rhs: Vec<Complex64> = Vec::new();
    let mut buf = vec![ZERO; w];
    for (k, &b) in &invariants.bispec {
        let [l1, l2, l3] = k.ells;
        if l3 != ell || l1 >= ell || l2 >= ell || k.shells[2] != c {
            continue;
        }
        let [qa, qb, _] = k.shells;
        coupled_pair(&state.recovered, gaunt, k.ells, qa, qb, &mut buf);
        let t = shells.triple_overlap(qa, qb, c);
        rows.extend(buf.iter().map(|u| u.conj() * t));
        rhs.push(b.conj());
    }
    let n = rhs.len();
    if n < w {
        return Err(Error::Underdetermined { ell, shell: c, rows: n, unknowns: w });
    }
    Ok((DMatrix::from_row_slice(n, w, &rows), DVector::from_vec(rhs)))
}

struct Solved {
    x: DVector<Complex64>,
    residual: f64,
    condition: f64,
}

fn solve_ridge(
    a: &DMatrix<Complex64>,
    b: &DVector<Complex64>,
    opts: &MarchOptions,
    ell: usize,
    shell: usize,
) -> Result<Solved> {
    let w = a.ncols();
    let normal = a.adjoint() * a;
    let trace = normal.trace().re;
    let lambda = opts.lambda.unwrap_or(1e-8 * trace / w as f64);
    if !(lambda >= 0.0) {
        return invalid(format!("ridge must be non-negative, got {lambda}"));
    }
    if trace == 0.0 && lambda == 0.0 {
        if opts.lambda.is_some() {
            return Err(Error::SingularSystem { ell, shell });
        }
        return Ok(Solved { x: DVector::zeros(w), residual: b.norm(), condition: f64::INFINITY });
    }
    let reg = &normal + DMatrix::<Complex64>::identity(w, w) * Complex64::new(lambda, 0.0);
    let ev = reg.clone().symmetric_eigenvalues();
    let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if lambda == 0.0 && !(lo > 1e-13 * hi) {
        return Err(Error::SingularSystem { ell, shell });
    }
    let x = match opts.solver {
        LsSolver::NormalEquations => {
            let chol = Cholesky::new(reg).ok_or(Error::SingularSystem { ell, shell })?;
            chol.solve(&(a.adjoint() * b))
        }
        LsSolver::Qr => {
            let n = a.nrows();
            let mut big = DMatrix::zeros(n + w, w);
            big.rows_mut(0, n).copy_from(a);
            let mut rhs = DVector::zeros(n + w);
            rhs.rows_mut(0, n).copy_from(b);
            let s = lambda.sqrt();
            for i in 0..w {
                big[(n + i, i)] = Complex64::new(s, 0.0);
            }
            let qr = big.qr();
            let qtb = qr.q().adjoint() * rhs;
            qr.r().solve_upper_triangular(&qtb).ok_or(Error::SingularSystem { ell, shell })?
        }
    };
    let residual = (a * &x - b).norm();
    Ok(Solved { x, residual, condition })
}

/// Recovers F̂_ℓ for ℓ ≤ `l_max`: degree 0 from gram0 (sign from B_000 when
/// present), degree 1 from the gauge, and each higher degree shell by shell by
/// ridge least squares.
pub fn march(
    invariants: &InvariantSet3D,
    shells: &ShellBasis,
    l_max: usize,
    opts: &MarchOptions,
    gauge_oracle: Option<&DMatrix<Complex64>>,
) -> Result<MarchState> {
    if l_max > invariants.l_max {
        return invalid(format!("march to degree {l_max} but invariants stop at {}", invariants.l_max));
    }
    let r = invariants.shells;
    if shells.count() != r {
        return invalid("shell basis does not match the invariants");
    }
    let gauge = if gauge_oracle.is_some() { Gauge::Oracle } else { Gauge::Canonical };
    let mut state = MarchState::new(l_max, r, gauge);

    let l0 = recover_l0(&invariants.gram[0]);
    if l0.rank_ratio > RANK_ONE_TOL {
        state.warnings.push(format!("gram0 is not rank one: λ2/λ1 = {:.3e}", l0.rank_ratio));
    }
    let mut f0 = l0.f0;
    if bispec_000_disagrees(invariants, shells, &f0) {
        f0.neg_mut();
    }
    for q in 0..r {
        state.recovered.set(0, 0, q, f0[q]);
    }
    if l_max == 0 {
        return Ok(state);
    }
    let f1 = fix_gauge_l1(&invariants.gram[1], gauge_oracle)?;
    state.recovered.set_degree(1, &f1);

    let gaunt = GauntTable::new(l_max)?;
    for ell in 2..=l_max {
        let solved: Vec<Result<Solved>> = (0..r)
            .into_par_iter()
            .map(|c| {
                let (a, b) = assemble_with(ell, c, &state, invariants, shells, &gaunt)?;
                solve_ridge(&a, &b, opts, ell, c)
            })
            .collect();
        let e = ell as i64;
        for (c, s) in solved.into_iter().enumerate() {
            let s = s?;
            for i in 0..2 * ell + 1 {
                state.recovered.set(ell, i as i64 - e, c, s.x[i]);
            }
            state.residuals[ell][c] = s.residual;
            state.conditioning[ell][c] = s.condition;
        }
        state.recovered.symmetrize_degree(ell);
    }
    Ok(state)
}

/// True when the stored (0,0,0) entries favour −F̂_0 over F̂_0.
fn bispec_000_disagrees(invariants: &InvariantSet3D, shells: &ShellBasis, f0: &DVector<Complex64>) -> bool {
    let g = 1.0 / (4.0 * std::f64::consts::PI).sqrt();
    let mut score = 0.0;
    for (k, b) in &invariants.bispec {
        if k.ells != [0, 0, 0] {
            continue;
        }
        let [a, bb, c] = k.shells;
        let pred = f0[a] * f0[bb] * f0[c].conj() * (g * shells.triple_overlap(a, bb, c));
        score += (pred.conj() * b).re;
    }
    score < 0.0
}

/// Cubic output grid centered at the origin; the support ball has radius `radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeLayout {
    pub n: usize,
    pub spacing: f64,
    pub radius: f64,
}

/// Real volume Σ_ℓm Σ_q α_ℓm[q] W_q(|x|/R) Y_ℓm with α = (S + εI)⁻¹ F̂.
pub fn synthesize_volume(f: &ShCoeffTable, shells: &ShellBasis, layout: VolumeLayout) -> Result<Grid> {
    let r = shells.count();
    if f.shells != r {
        return invalid("coefficient table and shell basis disagree on the shell count");
    }
    let defect = f.conjugation_defect();
    if defect > 1e-9 {
        return Err(Error::ConjugationViolated(defect));
    }
    let s = &shells.overlap + DMatrix::<f64>::identity(r, r) * OVERLAP_RIDGE;
    let chol = Cholesky::new(s).ok_or_else(|| Error::InvalidArgument("shell overlap is not positive definite".into()))?;
    let lm = lm_count(f.l_max);
    let mut alpha = vec![ZERO; lm * r];
    for k in 0..lm {
        let re = DVector::from_fn(r, |q, _| f.values[k * r + q].re);
        let im = DVector::from_fn(r, |q, _| f.values[k * r + q].im);
        let (xr, xi) = (chol.solve(&re), chol.solve(&im));
        for q in 0..r {
            alpha[k * r + q] = Complex64::new(xr[q], xi[q]);
        }
    }
    let mut grid = Grid::zeros(&[layout.n; 3], layout.spacing, layout.radius)?;
    let l_max = f.l_max;
    let out: Vec<(f64, f64)> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let p = grid.node_position(i);
            let rr = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if rr > layout.radius {
                return (0.0, 0.0);
            }
            let rel = rr / layout.radius;
            let w: Vec<f64> = (0..r).map(|q| shells.eval(q, rel)).collect();
            let mut y = vec![ZERO; lm];
            let theta = if rr > 0.0 { (p[2] / rr).clamp(-1.0, 1.0).acos() } else { 0.0 };
            sph_harm_all(l_max, theta, p[1].atan2(p[0]), &mut y);
            let mut acc = ZERO;
            for (k, yk) in y.iter().enumerate() {
                let radial: Complex64 = (0..r).map(|q| alpha[k * r + q] * w[q]).sum();
                acc += radial * yk;
            }
            (acc.re, acc.im)
        })
        .collect();
    let peak = out.iter().map(|v| v.0.abs()).fold(0.0, f64::max);
    let imag = out.iter().map(|v| v.1.abs()).fold(0.0, f64::max);
    if imag > 1e-9 * peak.max(f64::MIN_POSITIVE) {
        return Err(Error::ConjugationViolated(imag / peak.max(f64::MIN_POSITIVE)));
    }
    grid.values = out.into_iter().map(|v| v.0).collect();
    Ok(grid)
}

/// March, then synthesize.
pub fn reconstruct_volume_3d(
    invariants: &InvariantSet3D,
    shells: &ShellBasis,
    layout: VolumeLayout,
    opts: &MarchOptions,
    gauge_oracle: Option<&DMatrix<Complex64>>,
) -> Result<(Grid, MarchState)> {
    let state = march(invariants, shells, invariants.l_max, opts, gauge_oracle)?;
    let grid = synthesize_volume(&state.recovered, shells, layout)?;
    Ok((grid, state))
}

/// Relative Frobenius error of degree ℓ.
pub fn degree_rel_error(est: &ShCoeffTable, truth: &ShCoeffTable, ell: usize) -> f64 {
    let d = (est.degree(ell) - truth.degree(ell)).norm();
    d / truth.degree_norm(ell).max(f64::MIN_POSITIVE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extract3d::{default_triples, BispecKey};
    use crate::phantoms::BandlimitedVolume;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn synthetic(l: usize, r: usize, seed: u64) -> (ShCoeffTable, ShellBasis, InvariantSet3D) {
        let shells = ShellBasis::standard(r).unwrap();
        let vol = BandlimitedVolume::random(l, &shells, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let f = vol.shell_coefficients();
        let inv = InvariantSet3D::from_coefficients(&f, &shells, &default_triples(l, r), None).unwrap();
        (f, shells, inv)
    }

    #[test]
    fn rank_one_gram_gives_its_vector() {
        let u = DVector::from_vec(vec![Complex64::new(0.3, 0.0), Complex64::new(-1.2, 0.0), Complex64::new(0.5, 0.0)]);
        let g = &u * u.adjoint();
        let rec = recover_l0(&g);
        assert!((rec.f0.clone() + &u).norm() < 1e-12 || (rec.f0 - &u).norm() < 1e-12);
        let z = recover_l0(&DMatrix::zeros(3, 3));
        assert_eq!(z.f0, DVector::zeros(3));
    }

    #[test]
    fn canonical_gauge_reproduces_gram() {
        let (f, _, inv) = synthetic(2, 5, 1);
        let f1 = fix_gauge_l1(&inv.gram[1], None).unwrap();
        assert!((f1.adjoint() * &f1 - &inv.gram[1]).norm() < 1e-12 * inv.gram[1].norm());
        let mut t = ShCoeffTable::zeros(1, 5);
        t.set_degree(1, &f1);
        assert!(t.conjugation_defect() < 1e-14);
        let oracle = f.degree(1);
        assert_eq!(fix_gauge_l1(&inv.gram[1], Some(&oracle)).unwrap(), oracle);
        let bad = oracle.map(|v| v * 1.01);
        assert!(matches!(fix_gauge_l1(&inv.gram[1], Some(&bad)), Err(Error::GaugeMismatch(_))));
    }

    #[test]
    fn rank_deficient_gram1_gives_zero_rows() {
        let x = DMatrix::from_fn(1, 4, |_, q| Complex64::new(q as f64 + 1.0, 0.0));
        let g = x.adjoint() * &x;
        let f1 = fix_gauge_l1(&g, None).unwrap();
        assert!((f1.adjoint() * &f1 - &g).norm() < 1e-12 * g.norm());
    }

    #[test]
    fn system_rows_reproduce_bispectrum() {
        let (f, shells, inv) = synthetic(3, 4, 2);
        let mut state = MarchState::new(3, 4, Gauge::Oracle);
        for l in 0..2 {
            state.recovered.set_degree(l, &f.degree(l));
        }
        let (a, b) = assemble_system(2, 1, &state, &inv, &shells).unwrap();
        let rows = inv.bispec.keys().filter(|k| k.ells[2] == 2 && k.ells[0] < 2 && k.ells[1] < 2 && k.shells[2] == 1).count();
        assert_eq!(a.nrows(), rows);
        let x = DVector::from_fn(5, |i, _| f.get(2, i as i64 - 2, 1));
        assert!((a * x - b).norm() < 1e-10);
    }

    #[test]
    fn missing_rows_are_underdetermined() {
        let (_, shells, mut inv) = synthetic(2, 3, 3);
        inv.bispec.retain(|k: &BispecKey, _| k.ells[2] < 2);
        let state = MarchState::new(2, 3, Gauge::Canonical);
        assert!(matches!(
            assemble_system(2, 0, &state, &inv, &shells),
            Err(Error::Underdetermined { rows: 0, unknowns: 5, .. })
        ));
    }

    #[test]
    fn oracle_march_recovers_coefficients() {
        let (f, shells, inv) = synthetic(6, 6, 4);
        let exact = MarchOptions { lambda: Some(0.0), ..Default::default() };
        let state = march(&inv, &shells, 6, &exact, Some(&f.degree(1))).unwrap();
        for ell in 0..=6 {
            assert!(degree_rel_error(&state.recovered, &f, ell) < 1e-6, "degree {ell}");
        }
    }

    #[test]
    fn isotropic_volume_has_no_higher_degrees() {
        let (mut f, shells, _) = synthetic(4, 4, 5);
        for k in 1..lm_count(4) {
            for q in 0..4 {
                f.values[k * 4 + q] = ZERO;
            }
        }
        let inv = InvariantSet3D::from_coefficients(&f, &shells, &default_triples(4, 4), None).unwrap();
        let state = march(&inv, &shells, 4, &MarchOptions::default(), None).unwrap();
        for ell in 1..=4 {
            assert!(state.recovered.degree_norm(ell) <= 1e-8);
        }
        assert!(degree_rel_error(&state.recovered, &f, 0) < 1e-12);
    }

    #[test]
    fn negative_mean_sign_comes_from_bispectrum() {
        let (mut f, shells, _) = synthetic(2, 3, 6);
        f.values.iter_mut().for_each(|v| *v = -*v);
        let inv = InvariantSet3D::from_coefficients(&f, &shells, &default_triples(2, 3), None).unwrap();
        let state = march(&inv, &shells, 2, &MarchOptions::default(), Some(&f.degree(1))).unwrap();
        assert!(degree_rel_error(&state.recovered, &f, 0) < 1e-10);
    }

    #[test]
    fn synthesis_checks_conjugation_and_handles_trivial_tables() {
        let shells = ShellBasis::standard(3).unwrap();
        let layout = VolumeLayout { n: 9, spacing: 1.0, radius: 4.0 };
        let zero = synthesize_volume(&ShCoeffTable::zeros(2, 3), &shells, layout).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        let mut bad = ShCoeffTable::zeros(2, 3);
        bad.set(1, 1, 0, Complex64::new(1.0, 0.0));
        assert!(matches!(synthesize_volume(&bad, &shells, layout), Err(Error::ConjugationViolated(_))));
        let mut iso = ShCoeffTable::zeros(2, 3);
        iso.set(0, 0, 1, Complex64::new(1.0, 0.0));
        let g = synthesize_volume(&iso, &shells, layout).unwrap();
        let c = 4;
        let at = |i: usize, j: usize, k: usize| g.values[(i * 9 + j) * 9 + k];
        assert!((at(c + 2, c, c) - at(c, c - 2, c)).abs() < 1e-12);
        assert!((at(c, c, c + 2) - at(c - 2, c, c)).abs() < 1e-12);
    }

    #[test]
    fn ridge_sensitivity_on_well_posed_system() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut c = || Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let a = DMatrix::from_fn(40, 5, |_, _| c());
        let b = DVector::from_fn(40, |_, _| c());
        let exact = solve_ridge(&a, &b, &MarchOptions { lambda: Some(0.0), ..Default::default() }, 2, 0).unwrap();
        let ridge = solve_ridge(&a, &b, &MarchOptions { lambda: Some(1e-6), ..Default::default() }, 2, 0).unwrap();
        assert!(exact.condition < 100.0);
        assert!((ridge.x - &exact.x).norm() <= 1e-4 * exact.x.norm());
        let zero = DMatrix::zeros(6, 5);
        assert!(matches!(
            solve_ridge(&zero, &b.rows(0, 6).into_owned(), &MarchOptions { lambda: Some(0.0), ..Default::default() }, 2, 0),
            Err(Error::SingularSystem { .. })
        ));
    }

    #[test]
    fn qr_and_normal_equations_agree() {
        let (f, shells, inv) = synthetic(4, 5, 7);
        let o = f.degree(1);
        let exact = march(&inv, &shells, 4, &MarchOptions { lambda: Some(0.0), ..Default::default() }, Some(&o)).unwrap();
        let qr = march(&inv, &shells, 4, &MarchOptions { lambda: Some(0.0), solver: LsSolver::Qr }, Some(&o)).unwrap();
        for ell in 2..=4 {
            assert!(degree_rel_error(&qr.recovered, &exact.recovered, ell) <= 1e-8);
            assert!(degree_rel_error(&qr.recovered, &f, ell) <= 1e-6);
        }
    }
}
