//! On-disk synthetic dataset: one FBT1 file per modality per tile plus a
//! JSON manifest recording the generator seed and scene spec.

use std::path::{Path, PathBuf};

use rgbh_tensor::{fbt, Tensor};
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_dataset, GeneratedTile, ModalitySample, SceneSpec, Split, SplitCounts};
use crate::error::{Error, Result};
use crate::segnet::IGNORE_INDEX;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT: &str = "rgbh-dataset-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TileEntry {
    pub split: Split,
    pub index: usize,
    pub city: usize,
    pub seed: u64,
    pub rgb: String,
    pub height: String,
    /// Class ids stored as f32 values.
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub seed: u64,
    pub spec_hash: String,
    pub spec: SceneSpec,
    pub counts: SplitCounts,
    /// Split sizes of the full-scale dataset this one stands in for.
    pub full_scale_counts: SplitCounts,
    pub tiles: Vec<TileEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub tiles: Vec<GeneratedTile>,
}

impl Dataset {
    pub fn generate(seed: u64, spec: &SceneSpec, counts: SplitCounts) -> Result<Self> {
        let tiles = generate_dataset(seed, spec, counts)?;
        let entries = tiles.iter().map(entry_for).collect();
        Ok(Self {
            manifest: DatasetManifest {
                format: FORMAT.into(),
                seed,
                spec_hash: spec.hash(),
                spec: spec.clone(),
                counts,
                full_scale_counts: SplitCounts::FULL_SCALE,
                tiles: entries,
            },
            tiles,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&ModalitySample> {
        self.tiles.iter().filter(|t| t.split == split).map(|t| &t.sample).collect()
    }

    pub fn city_name(&self, city: usize) -> &str {
        self.manifest.spec.cities.get(city).map_or("?", |c| c.name.as_str())
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for split in Split::ALL {
            let sub = dir.join(split.name());
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        }
        for (t, e) in self.tiles.iter().zip(&self.manifest.tiles) {
            let s = &t.sample;
            let labels: Vec<f32> = s.labels.iter().map(|&l| l as f32).collect();
            let labels = Tensor::new(&[s.size, s.size], labels)?;
            fbt::write_file(dir.join(&e.rgb), &s.rgb)?;
            fbt::write_file(dir.join(&e.height), &s.height)?;
            fbt::write_file(dir.join(&e.labels), &labels)?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::DatasetMissing(path.display().to_string()));
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        if manifest.format != FORMAT {
            return Err(Error::DatasetCorrupt(format!("unknown format `{}`", manifest.format)));
        }
        if manifest.spec.hash() != manifest.spec_hash {
            return Err(Error::DatasetCorrupt("scene spec does not match its recorded hash".into()));
        }
        let size = manifest.spec.tile_size;
        let classes = manifest.spec.colors.len();
        let mut tiles = Vec::with_capacity(manifest.tiles.len());
        for e in &manifest.tiles {
            let rgb: Tensor<f32> = read(dir, &e.rgb)?;
            let height: Tensor<f32> = read(dir, &e.height)?;
            let raw: Tensor<f32> = read(dir, &e.labels)?;
            if rgb.shape() != [3, size, size] || height.shape() != [1, size, size] || raw.shape() != [size, size] {
                return Err(Error::DatasetCorrupt(format!("tile {}/{} has unexpected shapes", e.split.name(), e.index)));
            }
            let labels = raw
                .data()
                .iter()
                .map(|&v| {
                    let ok = v.fract() == 0.0 && ((v >= 0.0 && (v as usize) < classes) || v == IGNORE_INDEX as f32);
                    ok.then_some(v as u8)
                        .ok_or_else(|| Error::DatasetCorrupt(format!("label value {v} in {}", e.labels)))
                })
                .collect::<Result<Vec<u8>>>()?;
            tiles.push(GeneratedTile {
                split: e.split,
                index: e.index,
                city: e.city,
                seed: e.seed,
                sample: ModalitySample {
                    rgb,
                    height,
                    labels,
                    size,
                },
            });
        }
        Ok(Self { manifest, tiles })
    }
}

fn entry_for(t: &GeneratedTile) -> TileEntry {
    let stem = format!("{}/{:05}", t.split.name(), t.index);
    TileEntry {
        split: t.split,
        index: t.index,
        city: t.city,
        seed: t.seed,
        rgb: format!("{stem}.rgb.fbt"),
        height: format!("{stem}.height.fbt"),
        labels: format!("{stem}.labels.fbt"),
    }
}

fn read(dir: &Path, rel: &str) -> Result<Tensor<f32>> {
    let path: PathBuf = dir.join(rel);
    if !path.is_file() {
        return Err(Error::DatasetMissing(path.display().to_string()));
    }
    Ok(fbt::read_file(&path)?)
}
