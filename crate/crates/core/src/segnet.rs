//! Segmentation models: parameter initialization per paradigm, batched
//! forward pass, loss and prediction.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgbh_tensor::{init, Element, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, Backbone, Dims, Inputs, ParadigmKind, ParadigmSpec, TimfNames};
use crate::graph::{named_gradients, Graph};
use crate::transformer::{self as tf, TransformerConfig};

pub const CLASSES: usize = 6;
pub const IGNORE_INDEX: u8 = 255;
/// Heights in meters are multiplied by this before entering a model.
pub const HEIGHT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub classes: usize,
    pub image_size: usize,
    #[serde(default)]
    pub transformer: TransformerConfig,
    #[serde(default)]
    pub conv: ConvConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Transformer,
            classes: CLASSES,
            image_size: 64,
            transformer: TransformerConfig::default(),
            conv: ConvConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > IGNORE_INDEX as usize {
            return Err(Error::ConfigInvalid(format!("class count {} out of range", self.classes)));
        }
        match self.backbone {
            Backbone::Transformer => {
                self.transformer.validate()?;
                self.transformer.grid(self.image_size, self.image_size)?;
            }
            Backbone::Conv => {
                self.conv.validate()?;
                if !self.image_size.is_multiple_of(self.conv.reduction()) {
                    return Err(Error::IndivisibleSpatialExtent {
                        extent: self.image_size,
                        patch: self.conv.reduction(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            classes: self.classes,
            transformer: self.transformer,
            conv: self.conv.clone(),
        }
    }

    fn max_tokens(&self) -> usize {
        let n = self.image_size / self.transformer.patch;
        n * n
    }
}

/// Independent RNG stream per named component, so a component's initial
/// weights depend only on the seed and its name.
fn component_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

pub fn init_params<T: Element>(spec: ParadigmSpec, cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    spec.validate()?;
    cfg.validate()?;
    let mut s = ParamStore::new();
    let t = &cfg.transformer;
    let c = cfg.classes;
    match cfg.backbone {
        Backbone::Transformer => {
            let n = cfg.max_tokens();
            let enc = |s: &mut ParamStore<T>, p: &str, ch: usize| tf::init_encoder(s, p, ch, n, t, &mut component_rng(seed, p));
            let dec = |s: &mut ParamStore<T>, p: &str| tf::init_decoder(s, p, c, t, &mut component_rng(seed, p));
            let merge = |s: &mut ParamStore<T>| tf::init_linear(s, "fuse.merge", 2 * t.dim, t.dim, &mut component_rng(seed, "fuse.merge"));
            match spec.kind {
                ParadigmKind::SingleRgb => {
                    enc(&mut s, "rgb.enc", 3);
                    dec(&mut s, "dec");
                }
                ParadigmKind::SingleHeight => {
                    enc(&mut s, "h.enc", 1);
                    dec(&mut s, "dec");
                }
                ParadigmKind::Early => {
                    enc(&mut s, "rgbh.enc", 4);
                    dec(&mut s, "dec");
                }
                ParadigmKind::Feature => {
                    enc(&mut s, "rgb.enc", 3);
                    enc(&mut s, "h.enc", 1);
                    merge(&mut s);
                    dec(&mut s, "dec");
                }
                ParadigmKind::Late => {
                    enc(&mut s, "rgb.enc", 3);
                    dec(&mut s, "rgb.dec");
                    enc(&mut s, "h.enc", 1);
                    dec(&mut s, "h.dec");
                }
                ParadigmKind::Cross => {
                    enc(&mut s, "rgb.enc", 3);
                    enc(&mut s, "h.enc", 1);
                    for p in ["fuse.cross.rgb", "fuse.cross.h"] {
                        tf::init_layer(&mut s, p, t, &mut component_rng(seed, p));
                    }
                    merge(&mut s);
                    dec(&mut s, "dec");
                }
                ParadigmKind::Intermediary => {
                    enc(&mut s, "rgb.enc", 3);
                    enc(&mut s, "h.enc", 1);
                    let names = TimfNames::under("fuse");
                    s.insert(names.m.clone(), init::trunc_normal(&[1, t.dim], 0.02, &mut component_rng(seed, &names.m)));
                    for p in [&names.stage1, &names.stage2_rgb, &names.stage2_h] {
                        tf::init_layer(&mut s, p, t, &mut component_rng(seed, p));
                    }
                    merge(&mut s);
                    dec(&mut s, "dec");
                }
            }
        }
        Backbone::Conv => {
            let cc = &cfg.conv;
            let f = cc.feature_width();
            let enc = |s: &mut ParamStore<T>, p: &str, ch: usize| conv::init_encoder(s, p, ch, cc, &mut component_rng(seed, p));
            let dec = |s: &mut ParamStore<T>, p: &str, inp: usize| conv::init_decoder(s, p, inp, c, cc, &mut component_rng(seed, p));
            match spec.kind {
                ParadigmKind::SingleRgb => {
                    enc(&mut s, "rgb.enc", 3);
                    dec(&mut s, "dec", f);
                }
                ParadigmKind::SingleHeight => {
                    enc(&mut s, "h.enc", 1);
                    dec(&mut s, "dec", f);
                }
                ParadigmKind::Early => {
                    enc(&mut s, "rgbh.enc", 4);
                    dec(&mut s, "dec", f);
                }
                ParadigmKind::Feature => {
                    enc(&mut s, "rgb.enc", 3);
                    enc(&mut s, "h.enc", 1);
                    dec(&mut s, "dec", 2 * f);
                }
                ParadigmKind::Late => {
                    enc(&mut s, "rgb.enc", 3);
                    dec(&mut s, "rgb.dec", f);
                    enc(&mut s, "h.enc", 1);
                    dec(&mut s, "h.dec", f);
                }
                ParadigmKind::Cross | ParadigmKind::Intermediary => unreachable!("rejected by validate"),
            }
        }
    }
    Ok(s)
}

/// A stack of co-registered samples. Heights are already scaled.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `B×3×H×W`, values in `[0, 1]`.
    pub rgb: Tensor<T>,
    /// `B×1×H×W`.
    pub height: Tensor<T>,
    /// `B·H·W` labels, row-major.
    pub labels: Vec<u8>,
}

impl<T: Element> Batch<T> {
    pub fn size(&self) -> usize {
        self.rgb.shape()[0]
    }

    pub fn cast<U: Element>(&self) -> Batch<U> {
        Batch {
            rgb: self.rgb.cast(),
            height: self.height.cast(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegModel<T: Element> {
    pub spec: ParadigmSpec,
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Element> SegModel<T> {
    pub fn new(kind: ParadigmKind, config: ModelConfig, seed: u64) -> Result<Self> {
        let spec = ParadigmSpec::new(kind, config.backbone)?;
        let params = init_params(spec, &config, seed)?;
        Ok(Self { spec, config, params })
    }

    /// Records the forward pass; returns the `B×C×H×W` logits.
    pub fn forward(&self, g: &mut Graph<'_, T>, batch: &Batch<T>) -> Result<Var> {
        let inputs = bind_inputs(g, self.spec.kind, batch);
        fusion::forward(g, &inputs, self.spec, &self.config.dims())
    }

    pub fn logits(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.params, false);
        let out = self.forward(&mut g, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Mean cross entropy and its gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &Batch<T>) -> Result<(f64, BTreeMap<String, Tensor<T>>)> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.params, true);
        let logits = self.forward(&mut g, batch)?;
        let loss = cross_entropy_loss(&mut g, logits, &batch.labels)?;
        let bound = g.into_bound();
        let value = tape.value(loss).item().as_f64();
        let grads = tape.backward(loss)?;
        Ok((value, named_gradients(&bound, &grads)))
    }

    /// Per-pixel argmax labels, `B·H·W` row-major.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Vec<u8>> {
        Ok(argmax_labels(&self.logits(batch)?))
    }
}

pub fn bind_inputs<T: Element>(g: &mut Graph<'_, T>, kind: ParadigmKind, batch: &Batch<T>) -> Inputs {
    Inputs {
        rgb: kind.uses_rgb().then(|| g.input(batch.rgb.clone())),
        height: kind.uses_height().then(|| g.input(batch.height.clone())),
    }
}

pub fn cross_entropy_loss<T: Element>(g: &mut Graph<'_, T>, logits: Var, labels: &[u8]) -> Result<Var> {
    Ok(g.tape.cross_entropy(logits, labels, IGNORE_INDEX)?)
}

/// Argmax over the class axis of `B×C×H×W` logits; ties go to the lowest class.
pub fn argmax_labels<T: Element>(logits: &Tensor<T>) -> Vec<u8> {
    let s = logits.shape();
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = logits.data();
    let mut out = vec![0u8; b * hw];
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = d[base + p];
            for k in 1..c {
                let v = d[base + k * hw + p];
                if v > best_v {
                    best_v = v;
                    best = k;
                }
            }
            out[bi * hw + p] = best as u8;
        }
    }
    out
}
