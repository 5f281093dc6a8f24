use std::fs;
use std::path::{Path, PathBuf};

use orbit_core::grids_io::{extend_support, load_grid, Grid};
use orbit_core::harmonics::ShellBasis;
use orbit_core::observe::Signal;
use orbit_core::phantoms::{BandlimitedVolume, Edge, PlanarPhantom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

/// Inset used when a sampled image is extended past its support for
/// support-masked sampling.
pub const EDGE_INSET: f64 = 1.5;

/// Reads a JSON config, applies `key=value` overrides and deserializes it.
pub fn load<T: DeserializeOwned>(path: &Path, overrides: &[String]) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

/// Sets a dotted key. The value is parsed as JSON and falls back to a string.
pub fn apply_override(root: &mut Value, spec: &str) -> CliResult<()> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override `{spec}` has an empty key")));
    }
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{part}` is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!()
}

/// Joins relative paths onto the config directory.
pub fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

pub fn require_file(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("input {} does not exist", p.display())))
    }
}

pub fn positive(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {v}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomName {
    TestImage,
    SmoothImage,
    Portrait,
}

/// Planar input: a grid file or a built-in phantom on a size² lattice with
/// unit spacing and R = (size − 1)/2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ImageSource {
    File { path: PathBuf },
    Phantom { name: PhantomName, size: usize },
}

impl ImageSource {
    pub fn resolve(&mut self, base: &Path) {
        if let ImageSource::File { path } = self {
            resolve(base, path);
        }
    }

    pub fn input_path(&self) -> Option<&Path> {
        match self {
            ImageSource::File { path } => Some(path),
            ImageSource::Phantom { .. } => None,
        }
    }

    pub fn load(&self) -> CliResult<Planar> {
        match self {
            ImageSource::File { path } => {
                let g = load_grid(path)?;
                if g.dim != 2 {
                    return Err(CliError::Config(format!("{} is not a 2D grid", path.display())));
                }
                Ok(Planar::Sampled(g))
            }
            ImageSource::Phantom { name, size } => {
                if *size < 9 {
                    return Err(CliError::Config(format!("phantom size must be at least 9, got {size}")));
                }
                let r = 0.5 * (*size as f64 - 1.0);
                let phantom = match name {
                    PhantomName::TestImage => PlanarPhantom::test_image(r),
                    PhantomName::SmoothImage => PlanarPhantom::smooth_image(r, Edge::Hard),
                    PhantomName::Portrait => PlanarPhantom::portrait(r),
                };
                Ok(Planar::Analytic { phantom, size: *size })
            }
        }
    }
}

pub enum Planar {
    Analytic { phantom: PlanarPhantom, size: usize },
    Sampled(Grid),
}

impl Planar {
    /// The image on its lattice. `extend` fills nodes past R for
    /// support-masked sampling: exactly for phantoms, by radial continuation
    /// from R − 1.5h for sampled grids.
    pub fn grid(&self, extend: bool) -> CliResult<Grid> {
        Ok(match self {
            Planar::Analytic { phantom, size } => phantom.to_grid(*size, 1.0, extend)?,
            Planar::Sampled(g) if extend => extend_support(g, EDGE_INSET * g.spacing)?,
            Planar::Sampled(g) => g.clone(),
        })
    }

    pub fn signal(&self) -> &dyn Signal {
        match self {
            Planar::Analytic { phantom, .. } => phantom,
            Planar::Sampled(g) => g,
        }
    }
}

/// Volumetric input: a grid file or a random band-limited volume drawn from
/// the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolumeSource {
    File { path: PathBuf },
    RandomVolume { l_max: usize, shells: usize, size: usize },
}

impl VolumeSource {
    pub fn resolve(&mut self, base: &Path) {
        if let VolumeSource::File { path } = self {
            resolve(base, path);
        }
    }

    pub fn input_path(&self) -> Option<&Path> {
        match self {
            VolumeSource::File { path } => Some(path),
            VolumeSource::RandomVolume { .. } => None,
        }
    }

    pub fn load(&self, seed: u64) -> CliResult<Volume> {
        match self {
            VolumeSource::File { path } => {
                let g = load_grid(path)?;
                if g.dim != 3 {
                    return Err(CliError::Config(format!("{} is not a 3D grid", path.display())));
                }
                Ok(Volume::Sampled(g))
            }
            VolumeSource::RandomVolume { l_max, shells, size } => {
                if *size < 9 {
                    return Err(CliError::Config(format!("volume size must be at least 9, got {size}")));
                }
                let basis = ShellBasis::standard(*shells)?;
                let r = 0.5 * (*size as f64 - 1.0);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(Volume::Analytic { volume: BandlimitedVolume::random(*l_max, &basis, r, &mut rng), size: *size })
            }
        }
    }
}

pub enum Volume {
    Analytic { volume: BandlimitedVolume, size: usize },
    Sampled(Grid),
}

impl Volume {
    pub fn grid(&self, extend: bool) -> CliResult<Grid> {
        Ok(match self {
            Volume::Analytic { volume, size } => volume.to_grid(*size, 1.0, extend)?,
            Volume::Sampled(g) if extend => extend_support(g, EDGE_INSET * g.spacing)?,
            Volume::Sampled(g) => g.clone(),
        })
    }

    pub fn signal(&self) -> &dyn Signal {
        match self {
            Volume::Analytic { volume, .. } => volume,
            Volume::Sampled(g) => g,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_nest_and_parse() {
        let mut v = json!({"a": 1, "b": {"c": "x"}});
        apply_override(&mut v, "a=2.5").unwrap();
        apply_override(&mut v, "b.c=[1,2]").unwrap();
        apply_override(&mut v, "b.d=plain").unwrap();
        apply_override(&mut v, "e.f=true").unwrap();
        assert_eq!(v, json!({"a": 2.5, "b": {"c": [1, 2], "d": "plain"}, "e": {"f": true}}));
    }

    #[test]
    fn malformed_overrides_are_config_errors() {
        let mut v = json!({"a": 1});
        for bad in ["a", "=3", "a..b=1", "a.b=1"] {
            assert_eq!(apply_override(&mut v, bad).unwrap_err().exit_code(), 2, "{bad}");
        }
    }

    #[test]
    fn unknown_source_fields_rejected() {
        let ok: ImageSource = serde_json::from_value(json!({"kind": "phantom", "name": "portrait", "size": 33})).unwrap();
        assert_eq!(ok, ImageSource::Phantom { name: PhantomName::Portrait, size: 33 });
        let bad = serde_json::from_value::<ImageSource>(json!({"kind": "phantom", "name": "portrait", "size": 33, "x": 1}));
        assert!(bad.is_err());
    }

    #[test]
    fn relative_paths_join_the_config_dir() {
        let mut s = ImageSource::File { path: "img.orgd".into() };
        s.resolve(Path::new("/data/run"));
        assert_eq!(s.input_path().unwrap(), Path::new("/data/run/img.orgd"));
        let mut abs = ImageSource::File { path: "/x/img.orgd".into() };
        abs.resolve(Path::new("/data/run"));
        assert_eq!(abs.input_path().unwrap(), Path::new("/x/img.orgd"));
    }
}
