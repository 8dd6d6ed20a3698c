//! Deterministic synthetic RGB / height / label tiles.
//!
//! Ground, low vegetation, water and road share one low height prior and
//! are told apart only by colour. Buildings and trees share one colour
//! distribution and are told apart only by height texture: flat roofs
//! versus rugged canopies. Neither modality alone separates all six classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rgbh_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const GROUND: u8 = 0;
pub const LOW_VEGETATION: u8 = 1;
pub const BUILDING: u8 = 2;
pub const WATER: u8 = 3;
pub const ROAD: u8 = 4;
pub const TREE: u8 = 5;

pub const CLASS_NAMES: [&str; 6] = ["Ground", "Vegetation", "Building", "Water", "Road", "Tree"];

/// Per pseudo-city perturbation of the base scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityProfile {
    pub name: String,
    /// Relative frequency of each class among placed regions; index 0
    /// (ground) is the background and its weight is ignored.
    pub class_weights: [f64; 6],
    /// Added to every class colour in this city.
    pub color_shift: [f64; 3],
    /// Multiplies the building and tree height priors.
    pub height_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub tile_size: usize,
    pub regions: (usize, usize),
    /// Half-extent range of a region in pixels.
    pub region_half_size: (usize, usize),
    /// Height prior (low, high) in meters per class.
    pub height_priors: [(f64, f64); 6],
    /// Mean RGB per class in `[0, 1]`.
    pub colors: [[f64; 3]; 6],
    pub color_noise: f64,
    pub color_texture: f64,
    pub height_noise: f64,
    pub canopy_roughness: f64,
    /// Ground and low vegetation draw heights from the same prior.
    pub ground_veg_same_height: bool,
    /// Buildings and trees draw colours from the same distribution.
    pub building_tree_same_rgb: bool,
    pub cities: Vec<CityProfile>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let low = (0.0, 0.8);
        let city = |name: &str, w: [f64; 6], shift: [f64; 3], hf: f64| CityProfile {
            name: name.into(),
            class_weights: w,
            color_shift: shift,
            height_factor: hf,
        };
        Self {
            tile_size: 64,
            regions: (5, 10),
            region_half_size: (4, 14),
            height_priors: [low, low, (9.0, 22.0), low, low, (3.0, 8.0)],
            colors: [
                [0.58, 0.48, 0.36],
                [0.36, 0.58, 0.26],
                [0.38, 0.36, 0.42],
                [0.14, 0.26, 0.48],
                [0.62, 0.62, 0.64],
                [0.38, 0.36, 0.42],
            ],
            color_noise: 0.05,
            color_texture: 0.06,
            height_noise: 0.05,
            canopy_roughness: 1.5,
            ground_veg_same_height: true,
            building_tree_same_rgb: true,
            cities: vec![
                city("city-a", [0.0, 1.0, 1.0, 0.4, 0.8, 1.0], [0.0, 0.0, 0.0], 1.0),
                city("city-b", [0.0, 1.4, 1.6, 0.2, 1.0, 0.6], [0.03, 0.02, 0.0], 1.2),
                city("city-c", [0.0, 1.6, 0.5, 0.8, 0.5, 1.6], [-0.02, 0.02, -0.02], 0.9),
                city("city-d", [0.0, 0.8, 1.2, 0.6, 1.4, 0.8], [0.02, -0.02, 0.03], 1.1),
                city("city-e", [0.0, 1.2, 0.8, 1.2, 0.6, 1.2], [-0.03, 0.0, 0.02], 0.8),
            ],
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size < 32 {
            return Err(Error::ConfigInvalid(format!("tile size {} below 32", self.tile_size)));
        }
        if self.cities.is_empty() {
            return Err(Error::ConfigInvalid("at least one pseudo-city is required".into()));
        }
        if self.regions.0 > self.regions.1 || self.region_half_size.0 == 0 || self.region_half_size.0 > self.region_half_size.1 {
            return Err(Error::ConfigInvalid("region count/size ranges must be ordered and positive".into()));
        }
        let priors = self.effective_height_priors();
        let low_top = [GROUND, LOW_VEGETATION, WATER, ROAD]
            .iter()
            .map(|&c| priors[c as usize].1)
            .fold(f64::MIN, f64::max);
        let min_factor = self.cities.iter().map(|c| c.height_factor).fold(f64::MAX, f64::min);
        for c in [BUILDING, TREE] {
            let lo = priors[c as usize].0 * min_factor;
            if lo <= low_top {
                return Err(Error::ConfigInvalid(format!(
                    "{} height prior must lie strictly above the low classes",
                    CLASS_NAMES[c as usize]
                )));
            }
        }
        for (lo, hi) in priors {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::ConfigInvalid(format!("bad height prior ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    /// Height priors after applying the confusability switch.
    pub fn effective_height_priors(&self) -> [(f64, f64); 6] {
        let mut p = self.height_priors;
        if self.ground_veg_same_height {
            p[LOW_VEGETATION as usize] = p[GROUND as usize];
        }
        p
    }

    pub fn effective_colors(&self) -> [[f64; 3]; 6] {
        let mut c = self.colors;
        if self.building_tree_same_rgb {
            c[TREE as usize] = c[BUILDING as usize];
        }
        c
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scene spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// One co-registered tile.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySample {
    /// `3×S×S`, values in `[0, 1]`.
    pub rgb: Tensor<f32>,
    /// `1×S×S`, meters above terrain.
    pub height: Tensor<f32>,
    /// `S·S` row-major class ids.
    pub labels: Vec<u8>,
    pub size: usize,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

/// Generates one tile for the given pseudo-city.
pub fn generate_scene(seed: u64, spec: &SceneSpec, city: usize) -> Result<ModalitySample> {
    spec.validate()?;
    let profile = spec
        .cities
        .get(city)
        .ok_or_else(|| Error::InvalidArgument(format!("pseudo-city {city} out of range")))?;
    let s = spec.tile_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut labels = vec![GROUND; s * s];
    let mut region = vec![usize::MAX; s * s];
    let n_regions = rng.random_range(spec.regions.0..=spec.regions.1);
    let weights = &profile.class_weights[1..];
    let total: f64 = weights.iter().sum();
    for r in 0..n_regions {
        let class = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = 1u8;
            for (i, &w) in weights.iter().enumerate() {
                pick = i as u8 + 1;
                if u < w {
                    break;
                }
                u -= w;
            }
            pick
        } else {
            GROUND
        };
        let shape = if rng.random::<bool>() { Shape::Rect } else { Shape::Ellipse };
        let cy = rng.random_range(0..s) as f64 + 0.5;
        let cx = rng.random_range(0..s) as f64 + 0.5;
        let hy = rng.random_range(spec.region_half_size.0..=spec.region_half_size.1) as f64;
        let hx = rng.random_range(spec.region_half_size.0..=spec.region_half_size.1) as f64;
        for i in 0..s {
            for j in 0..s {
                let dy = (i as f64 + 0.5 - cy) / hy;
                let dx = (j as f64 + 0.5 - cx) / hx;
                let inside = match shape {
                    Shape::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    Shape::Ellipse => dy * dy + dx * dx <= 1.0,
                };
                if inside {
                    labels[i * s + j] = class;
                    region[i * s + j] = r;
                }
            }
        }
    }

    let priors = spec.effective_height_priors();
    let colors = spec.effective_colors();
    let roof: Vec<f64> = (0..n_regions)
        .map(|_| rng.random::<f64>())
        .collect();
    let terrain = value_noise(&mut rng, s, 4);
    let texture: Vec<Vec<f64>> = (0..3).map(|_| value_noise(&mut rng, s, 8)).collect();

    let mut height = vec![0f32; s * s];
    let mut rgb = vec![0f32; 3 * s * s];
    for p in 0..s * s {
        let c = labels[p] as usize;
        let (lo, hi) = priors[c];
        let noise: f64 = rng.sample::<f64, _>(StandardNormal);
        let h = match labels[p] {
            BUILDING => {
                let (lo, hi) = (lo * profile.height_factor, hi * profile.height_factor);
                lo + roof[region[p]] * (hi - lo) + spec.height_noise * noise
            }
            TREE => {
                let (lo, hi) = (lo * profile.height_factor, hi * profile.height_factor);
                let top = lo + roof[region[p]] * (hi - lo);
                (top + spec.canopy_roughness * noise).max(lo)
            }
            _ => lo + terrain[p] * (hi - lo) + spec.height_noise * noise,
        };
        height[p] = h.max(0.0) as f32;
        for ch in 0..3 {
            let n: f64 = rng.sample::<f64, _>(StandardNormal);
            let v = colors[c][ch] + profile.color_shift[ch] + spec.color_texture * (texture[ch][p] - 0.5) + spec.color_noise * n;
            rgb[ch * s * s + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(ModalitySample {
        rgb: Tensor::new(&[3, s, s], rgb)?,
        height: Tensor::new(&[1, s, s], height)?,
        labels,
        size: s,
    })
}

/// Bilinearly interpolated random lattice in `[0, 1]`, `cells` per side.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f64> {
    let n = cells + 1;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; size * size];
    for i in 0..size {
        let fy = i as f64 / size as f64 * cells as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for j in 0..size {
            let fx = j as f64 / size as f64 * cells as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let a = lattice[y0 * n + x0];
            let b = lattice[y0 * n + x0 + 1];
            let c = lattice[(y0 + 1) * n + x0];
            let d = lattice[(y0 + 1) * n + x0 + 1];
            out[i * size + j] = (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// Tile counts of the full-scale dataset; documentation only.
    pub const FULL_SCALE: SplitCounts = SplitCounts {
        train: 6304,
        val: 1059,
        test: 4144,
    };

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            train: 200,
            val: 50,
            test: 50,
        }
    }
}

/// Seed of tile `index` in `split`; distinct for every (split, index).
pub fn tile_seed(seed: u64, split: Split, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003) ^ ((split.code() << 40) | index as u64)
}

/// Pseudo-city assignment, drawn from a stream separate from the scene's.
pub fn tile_city(tile_seed: u64, cities: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(tile_seed ^ 0x5eed_c17e);
    rng.random_range(0..cities)
}

#[derive(Debug, Clone)]
pub struct GeneratedTile {
    pub split: Split,
    pub index: usize,
    pub city: usize,
    pub seed: u64,
    pub sample: ModalitySample,
}

pub fn generate_split(seed: u64, spec: &SceneSpec, split: Split, count: usize) -> Result<Vec<GeneratedTile>> {
    (0..count)
        .map(|index| {
            let ts = tile_seed(seed, split, index);
            let city = tile_city(ts, spec.cities.len());
            Ok(GeneratedTile {
                split,
                index,
                city,
                seed: ts,
                sample: generate_scene(ts, spec, city)?,
            })
        })
        .collect()
}

pub fn generate_dataset(seed: u64, spec: &SceneSpec, counts: SplitCounts) -> Result<Vec<GeneratedTile>> {
    if Split::ALL.iter().any(|&s| counts.get(s) == 0) {
        return Err(Error::ConfigInvalid("every split needs at least one tile".into()));
    }
    let mut out = Vec::new();
    for split in Split::ALL {
        out.extend(generate_split(seed, spec, split, counts.get(split))?);
    }
    Ok(out)
}
