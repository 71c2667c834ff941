//! `manifest.json`: the index of a generated phantom dataset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ynet_core::phantom::{Dataset, PhantomPair, PhantomSpec, PhantomStyle};
use ynet_core::volume::{read_volume, Volume3D};

use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub split: Split,
    pub seed: u64,
    pub image: String,
    pub label: String,
    pub foreground_fraction: f64,
    pub spec: PhantomSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub style: PhantomStyle,
    pub volumes: Vec<ManifestEntry>,
}

/// An image/label pair loaded from a dataset directory.
pub struct LoadedPair {
    pub name: String,
    pub image: Volume3D,
    pub label: Volume3D,
}

pub fn image_file(name: &str) -> String {
    format!("{name}.img.yvol")
}

pub fn label_file(name: &str) -> String {
    format!("{name}.lbl.yvol")
}

impl Manifest {
    pub fn from_dataset(seed: u64, style: &PhantomStyle, ds: &Dataset) -> Self {
        let entry = |p: &PhantomPair, split| ManifestEntry {
            name: p.name.clone(),
            split,
            seed: p.spec.seed,
            image: image_file(&p.name),
            label: label_file(&p.name),
            foreground_fraction: p.foreground_fraction(),
            spec: p.spec.clone(),
        };
        let volumes = ds
            .train
            .iter()
            .map(|p| entry(p, Split::Train))
            .chain(ds.val.iter().map(|p| entry(p, Split::Val)))
            .chain(ds.test.iter().map(|p| entry(p, Split::Test)))
            .collect();
        Manifest {
            seed,
            style: style.clone(),
            volumes,
        }
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }

    /// Loads every pair of one split, in manifest order.
    pub fn load_split(&self, dir: &Path, split: Split) -> CliResult<Vec<LoadedPair>> {
        let pairs: Vec<LoadedPair> = self
            .volumes
            .iter()
            .filter(|e| e.split == split)
            .map(|e| {
                Ok(LoadedPair {
                    name: e.name.clone(),
                    image: read_volume(dir.join(&e.image))?,
                    label: read_volume(dir.join(&e.label))?,
                })
            })
            .collect::<CliResult<_>>()?;
        if pairs.is_empty() {
            return Err(CliError::Usage(format!(
                "manifest in {} lists no {split:?} volumes",
                dir.display()
            )));
        }
        Ok(pairs)
    }
}
