//! Planar commands: extraction, inversion, the δ and noise studies and the
//! micrograph pipeline.

use std::f64::consts::SQRT_2;
use std::path::{Path, PathBuf};

use orbit_core::extract2d::{
    extract_moments_2d, load_moments_2d, mse_m2, mse_m3, save_moments_2d, so2_moments_direct,
    EmpiricalExtractor2D, Moment2_2D, Moment3_2D, PolarSpec2D, Sampling, TripleSet,
};
use orbit_core::grids_io::{aligned_mse, save_grid, write_metrics_csv, Grid};
use orbit_core::invert2d::{default_cutoff, reconstruct_image_2d, ImageLayout};
use orbit_core::observe::{ball_volume, simulate_micrograph, Micrograph, SeSimulator, SeparationMode, Signal, TranslationLaw};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, positive, require_file, ImageSource, PhantomName};
use crate::error::{CliError, CliResult};
use crate::manifest::RunRecorder;
use crate::table::{csv_bytes, gnuplot_script, loglog_slope, num, strictly_decreasing};

/// Column header of the SNR axis; states the convention used.
pub const SNR_HEADER: &str = "snr=|f|^2/(sigma^2*|support|)";

const STREAM_BLOCK: usize = 256;
const STREAM_CHUNK: usize = 64;

/// Polar discretization shared by the planar commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarParams {
    pub rings: usize,
    pub n_phi: usize,
    /// Boundary directions; default max(64, 4πR/h).
    #[serde(default)]
    pub n_theta: Option<usize>,
    /// Radius covered by the rings. Defaults to R for clean data and to
    /// R(1 − δ) − 2√2·h for noisy data.
    #[serde(default)]
    pub ring_extent: Option<f64>,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default = "diagonal")]
    pub triples: TripleSet,
    /// Translation-set margin beyond R·√(1 − (1 − δ)²), in grid spacings.
    #[serde(default = "two")]
    pub margin_px: f64,
}

fn diagonal() -> TripleSet {
    TripleSet::Diagonal
}

fn two() -> f64 {
    2.0
}

impl PolarParams {
    fn validate(&self) -> CliResult<()> {
        if self.rings == 0 {
            return Err(CliError::Config("rings must be positive".into()));
        }
        if self.n_phi < 2 || self.n_phi % 2 != 0 {
            return Err(CliError::Config(format!("n_phi must be even and at least 2, got {}", self.n_phi)));
        }
        if !(self.margin_px >= 0.0) {
            return Err(CliError::Config("margin_px must be non-negative".into()));
        }
        Ok(())
    }

    /// Specification for an image of support radius R and spacing h whose
    /// translations reach `reach`. `shape` is the lattice holding Λ.
    pub fn spec(&self, radius: f64, h: f64, shape: &[usize], delta: f64, reach: f64, noisy: bool) -> CliResult<PolarSpec2D> {
        self.validate()?;
        if !(delta > 0.0 && delta < 1.0) {
            return Err(CliError::Config(format!("delta must lie in (0, 1), got {delta}")));
        }
        let rings = self.rings as f64;
        let extent = match self.ring_extent {
            Some(e) => e,
            // midpoint rings put the outer ring at extent·(1 − 1/(2·rings))
            None if noisy => (radius * (1.0 - delta) - 2.0 * SQRT_2 * h - 1e-6 * h) * rings / (rings - 0.5),
            None => radius,
        };
        positive("ring_extent", extent)?;
        let rad = radius * (1.0 - (1.0 - delta).powi(2)).sqrt() + self.margin_px * h + reach;
        Ok(PolarSpec2D {
            ring_radii: PolarSpec2D::midpoint_radii(extent, self.rings),
            n_phi: self.n_phi,
            n_theta: self.n_theta.unwrap_or_else(|| PolarSpec2D::default_n_theta(radius, h)),
            delta,
            translation_grid: ball_nodes(shape, h, rad),
            sampling: self.sampling,
            triples: self.triples.clone(),
        })
    }
}

/// Nodes of a centered lattice within `rad` of the origin.
pub fn ball_nodes(shape: &[usize], h: f64, rad: f64) -> Vec<[f64; 2]> {
    let c = |n: usize, i: usize| (i as f64 - 0.5 * (n as f64 - 1.0)) * h;
    let mut v = Vec::new();
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            let p = [c(shape[0], i), c(shape[1], j)];
            if p[0].hypot(p[1]) <= rad {
                v.push(p);
            }
        }
    }
    v
}

/// σ with ‖f‖² / (σ²·πR²) = snr.
pub fn sigma_for_snr(image: &Grid, snr: f64) -> CliResult<f64> {
    positive("snr", snr)?;
    let r = image.support_radius;
    Ok((image.energy() / (snr * ball_volume(2, r))).sqrt())
}

/// Empirical moments from `count` observations drawn in sequence from `rng`.
/// Blocks are generated serially and extracted in fixed chunks, so the result
/// does not depend on the thread count.
pub fn stream_moments<S: Signal + ?Sized>(
    sim: &SeSimulator<'_, S>,
    spec: &PolarSpec2D,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> CliResult<(Moment2_2D, Moment3_2D)> {
    if count == 0 {
        return Err(CliError::Config("observation count must be positive".into()));
    }
    let mut total = EmpiricalExtractor2D::new(spec, &sim.layout, sim.pad, sim.sigma)?;
    let mut done = 0;
    while done < count {
        let block: Vec<Grid> = (0..STREAM_BLOCK.min(count - done)).map(|_| sim.observe(rng).0).collect();
        done += block.len();
        let parts: Vec<CliResult<EmpiricalExtractor2D>> = block
            .par_chunks(STREAM_CHUNK)
            .map(|chunk| {
                let mut ext = EmpiricalExtractor2D::new(spec, &sim.layout, sim.pad, sim.sigma)?;
                for g in chunk {
                    ext.push(g)?;
                }
                Ok(ext)
            })
            .collect();
        for p in parts {
            total.merge(p?)?;
        }
    }
    Ok(total.finish()?)
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn default_seed() -> u64 {
    0
}

fn moments_stem() -> String {
    "moments".into()
}

fn moment_suffixes() -> [&'static str; 5] {
    ["m2.orgd", "m2.json", "m3.orgd", "m3.json", "spec.json"]
}

/// Noisy rigid-motion observations to draw instead of using the image itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationParams {
    pub count: usize,
    /// Omitted means noise-free.
    #[serde(default)]
    pub snr: Option<f64>,
    /// Translations uniform over lattice offsets in [−k, k]², k in spacings.
    #[serde(default)]
    pub translation_half_width: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extract2dConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub image: ImageSource,
    pub polar: PolarParams,
    pub delta: f64,
    #[serde(default)]
    pub observations: Option<ObservationParams>,
    #[serde(default = "moments_stem")]
    pub stem: String,
}

fn write_spec(rec: &mut RunRecorder, stem: &str, spec: &PolarSpec2D) -> CliResult<()> {
    let text = serde_json::to_string_pretty(spec).map_err(|e| CliError::Io(e.to_string()))?;
    rec.write(&format!("{stem}.spec.json"), text.as_bytes())?;
    Ok(())
}

pub fn extract2d(config: &Path, overrides: &[String], out: &Path) -> CliResult<()> {
    let mut cfg: Extract2dConfig = config::load(config, overrides)?;
    cfg.image.resolve(&base_dir(config));
    let mut rec = RunRecorder::new(out)?;
    if let Some(p) = cfg.image.input_path() {
        require_file(p)?;
        rec.input(p);
    }
    let planar = cfg.image.load()?;
    let (m2, m3, spec) = match &cfg.observations {
        None => {
            let masked = cfg.polar.sampling == Sampling::SupportMasked;
            let grid = planar.grid(masked)?;
            let spec = cfg.polar.spec(grid.support_radius, grid.spacing, &grid.shape, cfg.delta, 0.0, false)?;
            let (m2, m3) = extract_moments_2d(&grid, &spec)?;
            (m2, m3, spec)
        }
        Some(obs) => {
            if cfg.polar.sampling != Sampling::Bilinear {
                return Err(CliError::Config("observations are sampled bilinearly; set polar.sampling to bilinear".into()));
            }
            if obs.translation_half_width < 0 {
                return Err(CliError::Config("translation_half_width must be non-negative".into()));
            }
            let clean = planar.grid(false)?;
            let sigma = match obs.snr {
                Some(snr) => sigma_for_snr(&clean, snr)?,
                None => 0.0,
            };
            let (h, law) = (clean.spacing, lattice_law(obs.translation_half_width));
            let shape = padded_shape(&clean, &law);
            let domain = Grid::zeros(&shape, h, clean.support_radius)?;
            let sim = SeSimulator::new(planar.signal(), &domain, sigma, law.clone())?;
            let spec =
                cfg.polar.spec(clean.support_radius, h, &shape, cfg.delta, law.reach(2, h), sigma > 0.0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (m2, m3) = stream_moments(&sim, &spec, obs.count, &mut rng)?;
            (m2, m3, spec)
        }
    };
    save_moments_2d(&m2, &m3, &spec, out, &cfg.stem)?;
    write_spec(&mut rec, &cfg.stem, &spec)?;
    rec.outputs_with_stem(&cfg.stem, &moment_suffixes());
    println!("extracted {} rings x {} lags over {} translations", spec.r_max(), spec.n_phi, spec.translation_grid.len());
    rec.finish("extract2d", cfg.seed, &json!(cfg))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Invert2dConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// The `<stem>.m2.json` sidecar written by extract2d.
    pub moments: PathBuf,
    /// Output raster edge length.
    pub size: usize,
    /// Support radius of the output; default (size − 1)/2.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Highest harmonic kept per ring; default N_φ/2 − 1.
    #[serde(default)]
    pub cutoff: Option<usize>,
    /// Image to score the reconstruction against.
    #[serde(default)]
    pub reference: Option<ImageSource>,
    #[serde(default = "default_rotation_grid_2d")]
    pub rotation_grid: usize,
}

fn default_rotation_grid_2d() -> usize {
    360
}

/// Splits `<dir>/<stem>.<suffix>` into the directory and stem.
pub fn split_stem(path: &Path, suffix: &str) -> CliResult<(PathBuf, String)> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let stem = name
        .strip_suffix(suffix)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| CliError::Config(format!("{} does not end in {suffix}", path.display())))?;
    Ok((path.parent().map(Path::to_path_buf).unwrap_or_default(), stem.to_string()))
}

pub fn invert2d(config: &Path, overrides: &[String], out: &Path) -> CliResult<()> {
    let mut cfg: Invert2dConfig = config::load(config, overrides)?;
    let base = base_dir(config);
    config::resolve(&base, &mut cfg.moments);
    if let Some(r) = cfg.reference.as_mut() {
        r.resolve(&base);
    }
    let (dir, stem) = split_stem(&cfg.moments, ".m2.json")?;
    require_file(&cfg.moments)?;
    let mut rec = RunRecorder::new(out)?;
    for s in moment_suffixes() {
        let p = dir.join(format!("{stem}.{s}"));
        if p.is_file() {
            rec.input(&p);
        }
    }
    if let Some(p) = cfg.reference.as_ref().and_then(|r| r.input_path()) {
        require_file(p)?;
        rec.input(p);
    }
    if cfg.size < 3 {
        return Err(CliError::Config("size must be at least 3".into()));
    }
    let (m2, m3, radii) = load_moments_2d(&dir, &stem)?;
    let spec = PolarSpec2D {
        ring_radii: radii,
        n_phi: m2.n_phi,
        n_theta: 64,
        delta: 0.5,
        translation_grid: vec![[0.0, 0.0]],
        sampling: Sampling::Bilinear,
        triples: TripleSet::List(m3.slices.keys().copied().collect()),
    };
    let radius = cfg.radius.unwrap_or(0.5 * (cfg.size as f64 - 1.0));
    positive("radius", radius)?;
    let layout = ImageLayout { n: cfg.size, spacing: 1.0, radius };
    let (image, inv) = reconstruct_image_2d(&m2, &m3, &spec, layout, cfg.cutoff)?;
    save_grid(&image, out.join("image.orgd"))?;
    rec.output("image.orgd");
    let summary = json!({
        "cutoff": cfg.cutoff.unwrap_or_else(|| default_cutoff(spec.n_phi)),
        "affinity_gap": inv.sync.affinity_gap,
        "clamped_bins": inv.clamped_bins,
        "ring_offsets": inv.sync.offsets,
    });
    rec.write("inversion.json", serde_json::to_string_pretty(&summary).unwrap().as_bytes())?;
    if let Some(r) = &cfg.reference {
        let truth = r.load()?.grid(false)?;
        if truth.shape != image.shape {
            return Err(CliError::Config("reference and output sizes differ".into()));
        }
        let report = aligned_mse(&image, &truth, cfg.rotation_grid)?;
        println!("aligned mse {:.4} ssim {:.4}", report.mse_aligned, report.ssim);
        let mut bytes = Vec::new();
        write_metrics_csv(&mut bytes, &[("reconstruction".to_string(), report)])?;
        rec.write("metrics.csv", &bytes)?;
    }
    rec.finish("invert2d", cfg.seed, &json!(cfg))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyDeltaConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub image: ImageSource,
    pub polar: PolarParams,
    /// Strictly decreasing boundary parameters.
    pub deltas: Vec<f64>,
    /// Ground-truth rotations per angular lag (N_rot = k·N_φ).
    #[serde(default = "four")]
    pub rotations_per_lag: usize,
    #[serde(default)]
    pub gnuplot: bool,
}

fn four() -> usize {
    4
}

/// Normalized MSE of both orders against the ground truth, `None` for a
/// third order without triples.
fn moment_errors(truth: &(Moment2_2D, Moment3_2D), est: &(Moment2_2D, Moment3_2D)) -> CliResult<(f64, Option<f64>)> {
    let e2 = mse_m2(&truth.0, &est.0)?;
    let e3 = if truth.1.slices.is_empty() { None } else { Some(mse_m3(&truth.1, &est.1)?) };
    Ok((e2, e3))
}

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn study_delta(config: &Path, overrides: &[String], out: &Path) -> CliResult<()> {
    let mut cfg: StudyDeltaConfig = config::load(config, overrides)?;
    cfg.image.resolve(&base_dir(config));
    if cfg.deltas.is_empty() {
        return Err(CliError::Config("deltas is empty".into()));
    }
    if !strictly_decreasing(&cfg.deltas) {
        return Err(CliError::Config("deltas must be strictly decreasing".into()));
    }
    if cfg.rotations_per_lag == 0 {
        return Err(CliError::Config("rotations_per_lag must be positive".into()));
    }
    let mut rec = RunRecorder::new(out)?;
    if let Some(p) = cfg.image.input_path() {
        require_file(p)?;
        rec.input(p);
    }
    let grid = cfg.image.load()?.grid(cfg.polar.sampling == Sampling::SupportMasked)?;
    let (r, h) = (grid.support_radius, grid.spacing);
    let first = cfg.polar.spec(r, h, &grid.shape, cfg.deltas[0], 0.0, false)?;
    let truth = so2_moments_direct(&grid, &first, cfg.rotations_per_lag * cfg.polar.n_phi)?;
    let mut rows = Vec::new();
    let (mut e2s, mut e3s) = (Vec::new(), Vec::new());
    for &d in &cfg.deltas {
        let spec = cfg.polar.spec(r, h, &grid.shape, d, 0.0, false)?;
        let est = extract_moments_2d(&grid, &spec)?;
        let (e2, e3) = moment_errors(&truth, &est)?;
        println!("delta {d}: mse_m2 {e2:.4e} mse_m3 {}", opt_num(e3));
        rows.push(vec![num(d), num(e2), opt_num(e3)]);
        e2s.push(e2);
        e3s.extend(e3);
    }
    let n = rows.len();
    let mono3 = if e3s.is_empty() { String::new() } else { strictly_decreasing(&e3s).to_string() };
    rows.push(vec!["monotone".into(), strictly_decreasing(&e2s).to_string(), mono3]);
    rec.write("study_delta.csv", &csv_bytes(&["delta", "mse_m2", "mse_m3"], &rows)?)?;
    if cfg.gnuplot {
        let gp = gnuplot_script("study_delta.csv", n, 1, "delta", &[(2, "M2"), (3, "M3")]);
        rec.write("study_delta.gp", gp.as_bytes())?;
    }
    rec.finish("study-delta", cfg.seed, &json!(cfg))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyNoiseConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub image: ImageSource,
    pub polar: PolarParams,
    pub delta: f64,
    pub snrs: Vec<f64>,
    /// Observation counts N per point.
    pub counts: Vec<usize>,
    pub trials: usize,
    #[serde(default)]
    pub translation_half_width: i64,
    /// Points with SNR at or above this enter the high-SNR slope.
    #[serde(default = "ten")]
    pub high_snr_min: f64,
    /// Points with SNR at or below this enter the low-SNR slope.
    #[serde(default = "tenth")]
    pub low_snr_max: f64,
    /// Noise-free observations behind the reference moments; default max(counts).
    #[serde(default)]
    pub reference_count: Option<usize>,
    #[serde(default)]
    pub gnuplot: bool,
}

fn ten() -> f64 {
    10.0
}

fn tenth() -> f64 {
    0.1
}

/// One row of the noise study.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePoint {
    pub snr: f64,
    pub count: usize,
    pub mse_m2: f64,
    pub mse_m3: Option<f64>,
}

/// Log-log slopes summarizing a noise study.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NoiseSlopes {
    pub high_snr: (Option<f64>, Option<f64>),
    pub low_snr: (Option<f64>, Option<f64>),
    /// (snr, slope in N for M², for M³)
    pub per_count: Vec<(f64, Option<f64>, Option<f64>)>,
}

fn fit(points: &[&NoisePoint], x: impl Fn(&NoisePoint) -> f64) -> (Option<f64>, Option<f64>) {
    let xs: Vec<f64> = points.iter().map(|p| x(p)).collect();
    let y2: Vec<f64> = points.iter().map(|p| p.mse_m2).collect();
    let s3 = if points.iter().all(|p| p.mse_m3.is_some()) {
        let y3: Vec<f64> = points.iter().map(|p| p.mse_m3.unwrap()).collect();
        loglog_slope(&xs, &y3)
    } else {
        None
    };
    (loglog_slope(&xs, &y2), s3)
}

/// SNR slopes at the largest N and N slopes at each SNR.
pub fn noise_slopes(points: &[NoisePoint], high_min: f64, low_max: f64) -> NoiseSlopes {
    let n_max = points.iter().map(|p| p.count).max().unwrap_or(0);
    let at_max: Vec<&NoisePoint> = points.iter().filter(|p| p.count == n_max).collect();
    let high: Vec<&NoisePoint> = at_max.iter().copied().filter(|p| p.snr >= high_min).collect();
    let low: Vec<&NoisePoint> = at_max.iter().copied().filter(|p| p.snr <= low_max).collect();
    let mut snrs: Vec<f64> = Vec::new();
    for p in points {
        if !snrs.contains(&p.snr) {
            snrs.push(p.snr);
        }
    }
    let per_count = snrs
        .iter()
        .filter_map(|&s| {
            let pts: Vec<&NoisePoint> = points.iter().filter(|p| p.snr == s).collect();
            (pts.len() >= 2).then(|| {
                let (a, b) = fit(&pts, |p| p.count as f64);
                (s, a, b)
            })
        })
        .collect();
    NoiseSlopes { high_snr: fit(&high, |p| p.snr), low_snr: fit(&low, |p| p.snr), per_count }
}

/// Runs the Monte Carlo study; trials use seeds `seed ^ trial`.
pub fn run_noise_study(cfg: &StudyNoiseConfig) -> CliResult<Vec<NoisePoint>> {
    if cfg.snrs.is_empty() || cfg.counts.is_empty() || cfg.trials == 0 {
        return Err(CliError::Config("snrs, counts and trials must be non-empty".into()));
    }
    if cfg.counts.contains(&0) {
        return Err(CliError::Config("observation counts must be positive".into()));
    }
    if cfg.polar.sampling != Sampling::Bilinear {
        return Err(CliError::Config("observations are sampled bilinearly; set polar.sampling to bilinear".into()));
    }
    if cfg.translation_half_width < 0 {
        return Err(CliError::Config("translation_half_width must be non-negative".into()));
    }
    let planar = cfg.image.load()?;
    let clean = planar.grid(false)?;
    let (h, law) = (clean.spacing, lattice_law(cfg.translation_half_width));
    let shape = padded_shape(&clean, &law);
    let domain = Grid::zeros(&shape, h, clean.support_radius)?;
    let spec = cfg.polar.spec(clean.support_radius, h, &shape, cfg.delta, law.reach(2, h), true)?;
    let reference = {
        let sim = SeSimulator::new(planar.signal(), &domain, 0.0, law.clone())?;
        let count = cfg.reference_count.unwrap_or_else(|| *cfg.counts.iter().max().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        stream_moments(&sim, &spec, count, &mut rng)?
    };
    let mut points = Vec::new();
    for &snr in &cfg.snrs {
        let sigma = sigma_for_snr(&clean, snr)?;
        let sim = SeSimulator::new(planar.signal(), &domain, sigma, law.clone())?;
        for &count in &cfg.counts {
            let errs: Vec<CliResult<(f64, Option<f64>)>> = (0..cfg.trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ t as u64);
                    let est = stream_moments(&sim, &spec, count, &mut rng)?;
                    moment_errors(&reference, &est)
                })
                .collect();
            let (mut s2, mut s3) = (0.0, Some(0.0));
            for e in errs {
                let (e2, e3) = e?;
                s2 += e2;
                s3 = s3.zip(e3).map(|(a, b)| a + b);
            }
            let n = cfg.trials as f64;
            let p = NoisePoint { snr, count, mse_m2: s2 / n, mse_m3: s3.map(|v| v / n) };
            println!("snr {snr:e} N {count}: mse_m2 {:.4e} mse_m3 {}", p.mse_m2, opt_num(p.mse_m3));
            points.push(p);
        }
    }
    Ok(points)
}

pub fn study_noise(config: &Path, overrides: &[String], out: &Path) -> CliResult<()> {
    let mut cfg: StudyNoiseConfig = config::load(config, overrides)?;
    cfg.image.resolve(&base_dir(config));
    let mut rec = RunRecorder::new(out)?;
    if let Some(p) = cfg.image.input_path() {
        require_file(p)?;
        rec.input(p);
    }
    let points = run_noise_study(&cfg)?;
    let slopes = noise_slopes(&points, cfg.high_snr_min, cfg.low_snr_max);
    let mut rows: Vec<Vec<String>> =
        points.iter().map(|p| vec![num(p.snr), p.count.to_string(), num(p.mse_m2), opt_num(p.mse_m3)]).collect();
    let n = rows.len();
    let n_max = cfg.counts.iter().max().unwrap().to_string();
    rows.push(vec!["slope_high_snr".into(), n_max.clone(), opt_num(slopes.high_snr.0), opt_num(slopes.high_snr.1)]);
    rows.push(vec!["slope_low_snr".into(), n_max, opt_num(slopes.low_snr.0), opt_num(slopes.low_snr.1)]);
    for (snr, a, b) in &slopes.per_count {
        rows.push(vec![format!("slope_n@{}", num(*snr)), String::new(), opt_num(*a), opt_num(*b)]);
    }
    println!(
        "slopes: high-SNR {} / {}, low-SNR {} / {}",
        opt_num(slopes.high_snr.0),
        opt_num(slopes.high_snr.1),
        opt_num(slopes.low_snr.0),
        opt_num(slopes.low_snr.1)
    );
    rec.write("study_noise.csv", &csv_bytes(&[SNR_HEADER, "n", "mse_m2", "mse_m3"], &rows)?)?;
    if cfg.gnuplot {
        let gp = gnuplot_script("study_noise.csv", n, 1, "SNR", &[(3, "M2"), (4, "M3")]);
        rec.write("study_noise.gp", gp.as_bytes())?;
    }
    rec.finish("study-noise", cfg.seed, &json!(cfg))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateMtdConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub image: ImageSource,
    pub copies: usize,
    /// Target density γ = N·V(2R)/(2MR)²; sets M. Exclusive with `m_scale`.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub m_scale: Option<f64>,
    /// Omitted means noise-free.
    #[serde(default)]
    pub snr: Option<f64>,
    #[serde(default = "well_separated")]
    pub separation: SeparationMode,
    #[serde(default = "micrograph_stem")]
    pub stem: String,
}

fn well_separated() -> SeparationMode {
    SeparationMode::WellSeparated
}

fn micrograph_stem() -> String {
    "micrograph".into()
}

/// M with N·V(2R)/(2MR)^n = γ.
pub fn scale_for_density(dim: usize, copies: usize, radius: f64, gamma: f64) -> CliResult<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(CliError::Config(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let side = (copies as f64 * ball_volume(dim, 2.0 * radius) / gamma).powf(1.0 / dim as f64);
    Ok(side / (2.0 * radius))
}

pub fn simulate_mtd(config: &Path, overrides: &[String], out: &Path) -> CliResult<()> {
    let mut cfg: SimulateMtdConfig = config::load(config, overrides)?;
    cfg.image.resolve(&base_dir(config));
    let mut rec = RunRecorder::new(out)?;
    if let Some(p) = cfg.image.input_path() {
        require_file(p)?;
        rec.input(p);
    }
    let f = cfg.image.load()?.grid(false)?;
    let m = match (cfg.gamma, cfg.m_scale) {
        (Some(g), None) => scale_for_density(2, cfg.copies, f.support_radius, g)?,
        (None, Some(m)) => m,
        _ => return Err(CliError::Config("set exactly one of gamma and m_scale".into())),
    };
    let sigma = match cfg.snr {
        Some(s) => sigma_for_snr(&f, s)?,
        None => 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mg = simulate_micrograph(&f, cfg.copies, m, sigma, cfg.separation, &mut rng)?;
    mg.seed = Some(cfg.seed);
    save_grid(&mg.grid, out.join(format!("{}.orgd", cfg.stem)))?;
    rec.output(&format!("{}.orgd", cfg.stem));
    rec.write(&format!("{}.json", cfg.stem), mg.sidecar_json()?.as_bytes())?;
    println!("placed {} copies, gamma {:.6}, sigma {:.6e}", mg.placements.len(), mg.gamma, sigma);
    rec.finish("simulate-mtd", cfg.seed, &json!(cfg))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MtdRecoverConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Micrograph grid; its sidecar `<stem>.json` sits next to it.
    pub micrograph: PathBuf,
    pub polar: PolarParams,
    pub delta: f64,
    /// Known density; default from the sidecar.
    #[serde(default)]
    pub gamma: Option<f64>,
    /// Known noise level; default from the sidecar.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "moments_stem")]
    pub stem: String,
}

/// Moments of one micrograph: the extraction runs over every translation of
/// the interior, where well-separated copies contribute disjointly.
pub fn recover_from_micrograph(
    mg: &Micrograph,
    polar: &PolarParams,
    delta: f64,
    sigma: f64,
) -> CliResult<(Moment2_2D, Moment3_2D, PolarSpec2D)> {
    let g = &mg.grid;
    if g.dim != 2 {
        return Err(CliError::Config("micrograph recovery is planar".into()));
    }
    if polar.sampling != Sampling::Bilinear {
        return Err(CliError::Config("micrographs are sampled bilinearly; set polar.sampling to bilinear".into()));
    }
    let (r, h) = (g.support_radius, g.spacing);
    let pad = (r / h).ceil() as usize + 1;
    if g.shape.iter().any(|&n| n <= 2 * pad) {
        return Err(CliError::Config("micrograph is smaller than one signal window".into()));
    }
    let inner: Vec<usize> = g.shape.iter().map(|n| n - 2 * pad).collect();
    let mut spec = polar.spec(r, h, &inner, delta, 0.0, sigma > 0.0)?;
    spec.translation_grid = ball_nodes(&inner, h, f64::INFINITY);
    let mut ext = EmpiricalExtractor2D::new(&spec, g, pad, sigma)?;
    ext.push(g)?;
    let (m2, m3) = ext.finish()?;
    Ok((m2, m3, spec))
}

pub fn mtd_recover(config: &Path, overrides: &[String], out: &Path) -> CliResult<()> {
    let mut cfg: MtdRecoverConfig = config::load(config, overrides)?;
    config::resolve(&base_dir(config), &mut cfg.micrograph);
    require_file(&cfg.micrograph)?;
    let sidecar = cfg.micrograph.with_extension("json");
    require_file(&sidecar)?;
    let mut rec = RunRecorder::new(out)?;
    rec.input(&cfg.micrograph);
    rec.input(&sidecar);
    let grid = orbit_core::grids_io::load_grid(&cfg.micrograph)?;
    let mut mg = Micrograph::from_parts(grid, &std::fs::read_to_string(&sidecar)?)?;
    if let Some(g) = cfg.gamma {
        if !(g > 0.0 && g <= 1.0) {
            return Err(CliError::Config(format!("gamma must lie in (0, 1], got {g}")));
        }
        mg.gamma = g;
    }
    if let Some(s) = cfg.sigma {
        if !(s >= 0.0) {
            return Err(CliError::Config("sigma must be non-negative".into()));
        }
        mg.sigma = s;
    }
    let (m2, m3, spec) = recover_from_micrograph(&mg, &cfg.polar, cfg.delta, mg.sigma)?;
    save_moments_2d(&m2, &m3, &spec, out, &cfg.stem)?;
    rec.outputs_with_stem(&cfg.stem, &moment_suffixes());
    let summary = json!({
        "gamma": mg.gamma,
        "sigma": mg.sigma,
        "copies": mg.placements.len(),
        "translations": spec.translation_grid.len(),
    });
    rec.write(&format!("{}.mtd.json", cfg.stem), serde_json::to_string_pretty(&summary).unwrap().as_bytes())?;
    println!("recovered moments from {} copies at gamma {:.4}", mg.placements.len(), mg.gamma);
    rec.finish("mtd-recover", cfg.seed, &json!(cfg))?;
    Ok(())
}

fn lattice_law(half_width: i64) -> TranslationLaw {
    if half_width == 0 {
        TranslationLaw::Identity
    } else {
        TranslationLaw::UniformLattice { half_width }
    }
}

/// Image shape grown so every translated copy stays inside; lattice offsets reach k√2.
fn padded_shape(clean: &Grid, law: &TranslationLaw) -> Vec<usize> {
    let pad = (law.reach(clean.dim, clean.spacing) / clean.spacing - 1e-9).ceil() as usize;
    clean.shape.iter().map(|n| n + 2 * pad).collect()
}

/// Bundled portrait generator: the 256² raster stored in `assets/`.
pub fn portrait_asset() -> CliResult<Grid> {
    ImageSource::Phantom { name: PhantomName::Portrait, size: 256 }.load()?.grid(false)
}
