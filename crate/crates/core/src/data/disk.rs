//! Dataset directories: image files plus a `manifest.toml` listing them.
//!
//! ```toml
//! [[samples]]
//! left = "000000_left.png"
//! right = "000000_right.png"
//! disparity = "000000_disp.pfm"   # or a 16-bit PNG
//! valid = "000000_valid.png"      # optional
//! edges = "000000_edges.png"      # optional
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::disparity_edges;
use super::{pfm, png16, visual, Dataset, StereoSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub left: PathBuf,
    pub right: PathBuf,
    pub disparity: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            format: "manifest",
            reason: format!("{}: {e}", path.display()),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = toml::to_string(self).map_err(|e| Error::Format {
            format: "manifest",
            reason: e.to_string(),
        })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn squeeze(t: Tensor<f32>) -> Result<Tensor<f32>> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    t.reshape(&[1, h, w])
}

/// Reads a disparity map and the validity implied by its encoding: zero in
/// a 16-bit PNG, non-finite or negative in a PFM.
pub fn read_disparity(path: &Path) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("pfm") => {
            let d = pfm::read_pfm(path)?;
            let valid = d.map(|v| if v.is_finite() && v >= 0.0 { 1.0 } else { 0.0 });
            let d = d.map(|v| if v.is_finite() { v } else { 0.0 });
            Ok((squeeze(d)?, squeeze(valid)?))
        }
        Some("png") => {
            let (d, m) = png16::read_png16(path)?;
            Ok((squeeze(d)?, squeeze(m)?))
        }
        _ => Err(Error::Format {
            format: "disparity",
            reason: format!("{}: expected a .pfm or .png file", path.display()),
        }),
    }
}

impl Dataset {
    /// Writes every sample and the manifest into `dir`, creating it if
    /// needed.
    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest::default();
        for (i, s) in self.samples().iter().enumerate() {
            let name = |suffix: &str| PathBuf::from(format!("{i:06}_{suffix}"));
            let entry = ManifestEntry {
                left: name("left.png"),
                right: name("right.png"),
                disparity: name("disp.pfm"),
                valid: Some(name("valid.png")),
                edges: Some(name("edges.png")),
            };
            visual::write_rgb(&dir.join(&entry.left), &s.left)?;
            visual::write_rgb(&dir.join(&entry.right), &s.right)?;
            pfm::write_pfm(&dir.join(&entry.disparity), &s.disparity)?;
            visual::write_gray(&dir.join(entry.valid.as_ref().expect("set")), &s.valid)?;
            visual::write_gray(&dir.join(entry.edges.as_ref().expect("set")), &s.edges)?;
            manifest.samples.push(entry);
        }
        manifest.write(dir)?;
        Ok(manifest)
    }

    /// Loads a dataset directory. Missing masks are derived from the
    /// disparity encoding, missing edges from disparity discontinuities.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let samples = manifest
            .samples
            .iter()
            .map(|e| load_entry(dir, e))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }
}

fn load_entry(dir: &Path, e: &ManifestEntry) -> Result<StereoSample> {
    let (disparity, implied) = read_disparity(&dir.join(&e.disparity))?;
    let valid = match &e.valid {
        Some(p) => visual::read_mask(&dir.join(p))?,
        None => implied,
    };
    let edges = match &e.edges {
        Some(p) => visual::read_mask(&dir.join(p))?,
        None => disparity_edges(&disparity),
    };
    Ok(StereoSample {
        left: visual::read_rgb(&dir.join(&e.left))?,
        right: visual::read_rgb(&dir.join(&e.right))?,
        disparity,
        valid,
        edges,
    })
}
