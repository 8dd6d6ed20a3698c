//! Seed-deterministic training and evaluation over in-memory tiles.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbh_tensor::{Adam, AdamConfig, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::datagen::ModalitySample;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::segnet::{Batch, SegModel, HEIGHT_SCALE, IGNORE_INDEX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Random horizontal/vertical flips and padded random crops.
    pub augment: bool,
    pub crop_pad: usize,
    /// Batch size used for validation and test forward passes.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            augment: true,
            crop_pad: 4,
            eval_batch_size: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::ConfigInvalid("batch sizes must be positive".into()));
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::ConfigInvalid("optimizer settings out of range".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// `None` when no epoch ran and the initial weights were kept.
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
}

/// Stacks samples into a batch, scaling heights.
pub fn make_batch(samples: &[&ModalitySample]) -> Result<Batch<f32>> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let s = first.size;
    let mut rgb = Vec::with_capacity(samples.len() * 3 * s * s);
    let mut height = Vec::with_capacity(samples.len() * s * s);
    let mut labels = Vec::with_capacity(samples.len() * s * s);
    for x in samples {
        if x.size != s {
            return Err(Error::MixedTileSizes);
        }
        rgb.extend_from_slice(x.rgb.data());
        height.extend(x.height.data().iter().map(|&h| (h as f64 * HEIGHT_SCALE) as f32));
        labels.extend_from_slice(&x.labels);
    }
    Ok(Batch {
        rgb: Tensor::new(&[samples.len(), 3, s, s], rgb)?,
        height: Tensor::new(&[samples.len(), 1, s, s], height)?,
        labels,
    })
}

/// Applies one joint flip/crop draw to every modality and the labels.
/// Pixels brought in by the crop are zero in the images and ignored in
/// the labels.
pub fn augment<R: Rng + ?Sized>(x: &ModalitySample, pad: usize, rng: &mut R) -> ModalitySample {
    let s = x.size;
    let flip_h = rng.random::<bool>();
    let flip_v = rng.random::<bool>();
    let oy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let ox = rng.random_range(0..=2 * pad) as isize - pad as isize;
    // output (i, j) reads source (map(i) + oy, map(j) + ox)
    let src = |i: usize, j: usize| -> Option<usize> {
        let i = if flip_v { s - 1 - i } else { i } as isize + oy;
        let j = if flip_h { s - 1 - j } else { j } as isize + ox;
        (i >= 0 && j >= 0 && (i as usize) < s && (j as usize) < s).then(|| i as usize * s + j as usize)
    };
    let mut rgb = vec![0f32; 3 * s * s];
    let mut height = vec![0f32; s * s];
    let mut labels = vec![IGNORE_INDEX; s * s];
    for i in 0..s {
        for j in 0..s {
            if let Some(p) = src(i, j) {
                let q = i * s + j;
                for c in 0..3 {
                    rgb[c * s * s + q] = x.rgb.data()[c * s * s + p];
                }
                height[q] = x.height.data()[p];
                labels[q] = x.labels[p];
            }
        }
    }
    ModalitySample {
        rgb: Tensor::new(&[3, s, s], rgb).expect("same shape"),
        height: Tensor::new(&[1, s, s], height).expect("same shape"),
        labels,
        size: s,
    }
}

/// Confusion matrix of `params` over `tiles`, in tile order.
pub fn confusion(model: &SegModel<f32>, tiles: &[&ModalitySample], batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.classes);
    for chunk in tiles.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk)?;
        let pred = model.predict(&batch)?;
        cm.update(&pred, &batch.labels, IGNORE_INDEX)?;
    }
    Ok(cm)
}

pub fn evaluate_tiles(model: &SegModel<f32>, tiles: &[&ModalitySample], batch_size: usize) -> Result<MetricsReport> {
    Ok(MetricsReport::from_confusion(&confusion(model, tiles, batch_size)?))
}

/// Trains in place and leaves the best-on-validation weights in `model`.
///
/// Epoch `e` shuffles and augments from a stream seeded by `(seed, e)`, so
/// a run is a pure function of its inputs.
pub fn train(
    model: &mut SegModel<f32>,
    train_tiles: &[&ModalitySample],
    val_tiles: &[&ModalitySample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_tiles.is_empty() {
        return Err(Error::DatasetMissing("no training tiles".into()));
    }
    let mut opt = Adam::new(cfg.adam());
    let mut best: Option<(usize, f64, ParamStore<f32>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x7a11_0000_0000 + epoch as u64));
        let mut order: Vec<usize> = (0..train_tiles.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let owned: Vec<ModalitySample> = chunk
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(train_tiles[i], cfg.crop_pad, &mut rng)
                    } else {
                        train_tiles[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&ModalitySample> = owned.iter().collect();
            let batch = make_batch(&refs)?;
            let (loss, grads) = match model.loss_and_grads(&batch) {
                Err(Error::Tensor(rgbh_tensor::TensorError::AllPixelsIgnored)) => continue,
                r => r?,
            };
            opt.step(&mut model.params, &grads);
            loss_sum += loss;
            steps += 1;
        }
        let val_miou = if val_tiles.is_empty() {
            None
        } else {
            confusion(model, val_tiles, cfg.eval_batch_size)?.mean_iou()
        };
        let entry = EpochLog {
            epoch,
            train_loss: if steps > 0 { loss_sum / steps as f64 } else { f64::NAN },
            val_miou,
        };
        on_epoch(&entry);
        log.push(entry);
        let score = val_miou.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(_, b, _)| score > *b) {
            best = Some((epoch, score, model.params.clone()));
        }
    }
    let (best_epoch, best_val_miou) = match best {
        Some((e, s, params)) => {
            model.params = params;
            (Some(e), s.is_finite().then_some(s))
        }
        None => (None, None),
    };
    Ok(TrainLog {
        epochs: log,
        best_epoch,
        best_val_miou,
    })
}
