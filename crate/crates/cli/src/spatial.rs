//! Volumetric commands: invariant extraction and frequency-marching inversion.

use std::path::{Path, PathBuf};

use orbit_core::extract2d::Sampling;
use orbit_core::extract3d::{
    default_triples, extract_invariants_3d, so3_moments_direct, translation_grid_ball, InvariantSet3D,
    ShCoeffTable, SphericalSpec3D,
};
use orbit_core::grids_io::{aligned_mse, load_grid, save_grid, write_metrics_csv};
use orbit_core::harmonics::{make_shell_basis, ShellBasis};
use orbit_core::invert3d::{degree_rel_error, reconstruct_volume_3d, LsSolver, MarchOptions, VolumeLayout};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{self, positive, require_file, Volume, VolumeSource};
use crate::error::{CliError, CliResult};
use crate::manifest::RunRecorder;
use crate::planar::split_stem;

/// Radial basis parameters, stored beside the invariants as `<stem>.basis.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisParams {
    pub count: usize,
    pub width: f64,
    pub radial_nodes: usize,
}

impl BasisParams {
    pub fn standard(count: usize) -> Self {
        Self { count, width: ShellBasis::default_width(count), radial_nodes: ShellBasis::default_radial_nodes(count) }
    }

    pub fn build(&self) -> CliResult<ShellBasis> {
        Ok(make_shell_basis(self.count, self.width, self.radial_nodes)?)
    }
}

/// How the invariants are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvariantMethod {
    /// Boundary-limit extraction over translations.
    #[default]
    Extraction,
    /// Rotation average about the true center.
    Direct,
    /// Closed form from the expansion of a random volume.
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Extract3dConfig {
    #[serde(default)]
    pub seed: u64,
    pub volume: VolumeSource,
    pub l_max: usize,
    pub shells: usize,
    pub n_ang: usize,
    pub delta: f64,
    #[serde(default)]
    pub method: InvariantMethod,
    /// Rotations for the direct method.
    #[serde(default = "default_rotations")]
    pub rotations: usize,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default = "two")]
    pub margin_px: f64,
    #[serde(default)]
    pub shell_width: Option<f64>,
    #[serde(default)]
    pub radial_nodes: Option<usize>,
    #[serde(default = "invariants_stem")]
    pub stem: String,
}

fn default_rotations() -> usize {
    576
}

fn two() -> f64 {
    2.0
}

fn invariants_stem() -> String {
    "invariants".into()
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn extract3d(config: &Path, overrides: &[String], out: &Path) -> CliResult<()> {
    let mut cfg: Extract3dConfig = config::load(config, overrides)?;
    cfg.volume.resolve(&base_dir(config));
    let mut rec = RunRecorder::new(out)?;
    if let Some(p) = cfg.volume.input_path() {
        require_file(p)?;
        rec.input(p);
    }
    if cfg.shells == 0 {
        return Err(CliError::Config("shells must be positive".into()));
    }
    let mut params = BasisParams::standard(cfg.shells);
    if let Some(w) = cfg.shell_width {
        positive("shell_width", w)?;
        params.width = w;
    }
    if let Some(n) = cfg.radial_nodes {
        params.radial_nodes = n;
    }
    let basis = params.build()?;
    let volume = cfg.volume.load(cfg.seed)?;
    let grid = volume.grid(cfg.sampling == Sampling::SupportMasked)?;
    let mut spec = SphericalSpec3D::for_grid(&grid, cfg.l_max, cfg.shells, cfg.n_ang, cfg.delta)?;
    spec.shells = basis.clone();
    spec.sampling = cfg.sampling;
    if !(cfg.margin_px >= 0.0) {
        return Err(CliError::Config("margin_px must be non-negative".into()));
    }
    spec.translation_grid = translation_grid_ball(&grid, cfg.delta, cfg.margin_px);
    let triples = default_triples(cfg.l_max, cfg.shells);
    let inv = match cfg.method {
        InvariantMethod::Extraction => extract_invariants_3d(&grid, &spec, &triples)?,
        InvariantMethod::Direct => {
            if cfg.rotations == 0 {
                return Err(CliError::Config("rotations must be positive".into()));
            }
            so3_moments_direct(&grid, &spec, cfg.rotations, &triples)?
        }
        InvariantMethod::Analytic => match &volume {
            Volume::Analytic { volume, .. } => {
                let f = volume.shell_coefficients_in(&basis);
                InvariantSet3D::from_coefficients(&f, &basis, &triples, Some(&spec.gl_nodes.nodes))?
            }
            Volume::Sampled(_) => {
                return Err(CliError::Config("the analytic method needs a random_volume source".into()));
            }
        },
    };
    inv.save(out, &cfg.stem)?;
    rec.outputs_with_stem(&cfg.stem, &["inv3.json", "inv3.bin"]);
    let basis_json = serde_json::to_string_pretty(&params).map_err(|e| CliError::Io(e.to_string()))?;
    rec.write(&format!("{}.basis.json", cfg.stem), basis_json.as_bytes())?;
    if let Volume::Analytic { volume, .. } = &volume {
        let truth_stem = format!("{}.truth", cfg.stem);
        volume.shell_coefficients_in(&basis).save(out, &truth_stem)?;
        rec.outputs_with_stem(&truth_stem, &["sh.json", "sh.bin"]);
        save_grid(&volume.to_grid(grid.shape[0], grid.spacing, false)?, out.join("truth.orgd"))?;
        rec.output("truth.orgd");
    }
    println!(
        "{} invariants: L={} shells={} bispectrum entries={} translations={}",
        match cfg.method {
            InvariantMethod::Extraction => "extracted",
            InvariantMethod::Direct => "rotation-averaged",
            InvariantMethod::Analytic => "analytic",
        },
        inv.l_max,
        inv.shells,
        inv.bispec.len(),
        spec.translation_grid.len()
    );
    rec.finish("extract3d", cfg.seed, &json!(cfg))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Invert3dConfig {
    #[serde(default)]
    pub seed: u64,
    /// The `<stem>.inv3.json` index written by extract3d.
    pub invariants: PathBuf,
    /// Radial basis; default `<stem>.basis.json` beside the invariants.
    #[serde(default)]
    pub basis: Option<PathBuf>,
    /// `<name>.sh.json` table whose degree-1 block fixes the gauge.
    #[serde(default)]
    pub oracle: Option<PathBuf>,
    /// Ridge λ; omitted uses the trace-scaled default.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub solver: LsSolver,
    /// March up to this degree; default all.
    #[serde(default)]
    pub l_max: Option<usize>,
    pub size: usize,
    #[serde(default)]
    pub radius: Option<f64>,
    /// Volume grid to score against.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(default = "default_rotations")]
    pub rotation_grid: usize,
}

pub fn invert3d(config: &Path, overrides: &[String], out: &Path) -> CliResult<()> {
    let mut cfg: Invert3dConfig = config::load(config, overrides)?;
    let base = base_dir(config);
    config::resolve(&base, &mut cfg.invariants);
    for p in [cfg.basis.as_mut(), cfg.oracle.as_mut(), cfg.reference.as_mut()].into_iter().flatten() {
        config::resolve(&base, p);
    }
    let (dir, stem) = split_stem(&cfg.invariants, ".inv3.json")?;
    let basis_path = cfg.basis.clone().unwrap_or_else(|| dir.join(format!("{stem}.basis.json")));
    let bin = dir.join(format!("{stem}.inv3.bin"));
    let mut inputs = vec![cfg.invariants.clone(), bin, basis_path.clone()];
    let oracle = match &cfg.oracle {
        Some(p) => {
            let (odir, ostem) = split_stem(p, ".sh.json")?;
            inputs.push(p.clone());
            inputs.push(odir.join(format!("{ostem}.sh.bin")));
            Some((odir, ostem))
        }
        None => None,
    };
    inputs.extend(cfg.reference.clone());
    for p in &inputs {
        require_file(p)?;
    }
    let mut rec = RunRecorder::new(out)?;
    for p in &inputs {
        rec.input(p);
    }
    if cfg.size < 3 {
        return Err(CliError::Config("size must be at least 3".into()));
    }
    if let Some(l) = cfg.lambda {
        if !(l >= 0.0) {
            return Err(CliError::Config("lambda must be non-negative".into()));
        }
    }
    let params: BasisParams = serde_json::from_str(&std::fs::read_to_string(&basis_path)?)
        .map_err(|e| CliError::Config(format!("{}: {e}", basis_path.display())))?;
    let basis = params.build()?;
    let mut inv = InvariantSet3D::load(&dir, &stem)?;
    if let Some(l) = cfg.l_max {
        if l > inv.l_max {
            return Err(CliError::Config(format!("l_max {l} exceeds the invariants' {}", inv.l_max)));
        }
        inv = truncate(inv, l);
    }
    let truth = match &oracle {
        Some((d, s)) => Some(ShCoeffTable::load(d, s)?),
        None => None,
    };
    if let Some(t) = &truth {
        if t.shells != inv.shells || t.l_max < 1 {
            return Err(CliError::Config("oracle table does not match the invariants".into()));
        }
    }
    let gauge = truth.as_ref().map(|t| t.degree(1));
    let radius = cfg.radius.unwrap_or(0.5 * (cfg.size as f64 - 1.0));
    positive("radius", radius)?;
    let layout = VolumeLayout { n: cfg.size, spacing: 1.0, radius };
    let opts = MarchOptions { lambda: cfg.lambda, solver: cfg.solver };
    let (volume, state) = reconstruct_volume_3d(&inv, &basis, layout, &opts, gauge.as_ref())?;
    save_grid(&volume, out.join("volume.orgd"))?;
    rec.output("volume.orgd");
    state.recovered.save(out, "recovered")?;
    rec.outputs_with_stem("recovered", &["sh.json", "sh.bin"]);
    let degree_errors: Option<Vec<f64>> = truth
        .as_ref()
        .filter(|t| t.l_max >= inv.l_max)
        .map(|t| (0..=inv.l_max).map(|l| degree_rel_error(&state.recovered, t, l)).collect());
    let summary = json!({
        "gauge": state.gauge,
        "residuals": state.residuals,
        "conditioning": state.conditioning,
        "warnings": state.warnings,
        "degree_errors": degree_errors,
    });
    rec.write("march.json", serde_json::to_string_pretty(&summary).unwrap().as_bytes())?;
    for w in &state.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(p) = &cfg.reference {
        let truth_grid = load_grid(p)?;
        if truth_grid.shape != volume.shape {
            return Err(CliError::Config("reference and output sizes differ".into()));
        }
        let report = aligned_mse(&volume, &truth_grid, cfg.rotation_grid)?;
        println!("aligned mse {:.4e} ssim {:.4}", report.mse_aligned, report.ssim);
        let mut bytes = Vec::new();
        write_metrics_csv(&mut bytes, &[("reconstruction".to_string(), report)])?;
        rec.write("metrics.csv", &bytes)?;
    }
    rec.finish("invert3d", cfg.seed, &json!(cfg))?;
    Ok(())
}

/// Invariants restricted to degrees ≤ `l`.
fn truncate(mut inv: InvariantSet3D, l: usize) -> InvariantSet3D {
    inv.gram.truncate(l + 1);
    inv.bispec.retain(|k, _| k.ells.iter().all(|&e| e <= l));
    inv.l_max = l;
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_params_round_trip() {
        let p = BasisParams::standard(8);
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<BasisParams>(&text).unwrap(), p);
        let b = p.build().unwrap();
        assert_eq!(b.count(), 8);
        assert!(serde_json::from_str::<BasisParams>(r#"{"count":2,"width":0.1,"radial_nodes":64,"x":1}"#).is_err());
    }

    #[test]
    fn truncation_drops_high_degrees() {
        let basis = ShellBasis::standard(2).unwrap();
        let mut f = ShCoeffTable::zeros(3, 2);
        f.set(0, 0, 0, 1.0.into());
        f.set(2, 0, 1, 0.5.into());
        let triples = default_triples(3, 2);
        let inv = InvariantSet3D::from_coefficients(&f, &basis, &triples, None).unwrap();
        let t = truncate(inv, 2);
        assert_eq!(t.gram.len(), 3);
        assert!(t.bispec.keys().all(|k| k.ells.iter().all(|&e| e <= 2)));
        assert!(!t.bispec.is_empty());
    }
}
