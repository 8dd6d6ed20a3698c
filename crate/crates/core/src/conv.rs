//! Plain convolutional encoder/decoder used for the CNN-style paradigms.
//!
//! Encoder stages are `3×3` stride-2 convolutions; the decoder mirrors them
//! with `4×4` stride-2 transposed convolutions and ends in a `1×1` head.

use rand::Rng;
use rgbh_tensor::{init, Element, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvConfig {
    pub widths: Vec<usize>,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
        }
    }
}

impl ConvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::ConfigInvalid("conv widths must be nonempty and positive".into()));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Total downsampling factor of the encoder.
    pub fn reduction(&self) -> usize {
        1 << self.widths.len()
    }
}

pub fn init_encoder<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, channels: usize, cfg: &ConvConfig, rng: &mut R) {
    let mut c_in = channels;
    for (i, &c_out) in cfg.widths.iter().enumerate() {
        store.insert(format!("{prefix}.c{i}.w"), init::he_normal(&[c_out, c_in, 3, 3], c_in * 9, rng));
        store.insert(format!("{prefix}.c{i}.b"), Tensor::zeros(&[c_out]));
        c_in = c_out;
    }
}

pub fn encoder<T: Element>(g: &mut Graph<'_, T>, image: Var, prefix: &str, cfg: &ConvConfig) -> Result<Var> {
    let mut x = image;
    for i in 0..cfg.widths.len() {
        let w = g.param(&format!("{prefix}.c{i}.w"))?;
        let b = g.param(&format!("{prefix}.c{i}.b"))?;
        x = g.tape.conv2d(x, w, Some(b), 2, 1)?;
        x = g.tape.gelu(x)?;
    }
    Ok(x)
}

/// Decoder from `in_channels` features back to `classes` logits at input
/// resolution.
pub fn init_decoder<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    in_channels: usize,
    classes: usize,
    cfg: &ConvConfig,
    rng: &mut R,
) {
    let mut c_in = in_channels;
    for (i, c_out) in up_widths(cfg).into_iter().enumerate() {
        store.insert(format!("{prefix}.u{i}.w"), init::he_normal(&[c_in, c_out, 4, 4], c_in * 4, rng));
        store.insert(format!("{prefix}.u{i}.b"), Tensor::zeros(&[c_out]));
        c_in = c_out;
    }
    store.insert(format!("{prefix}.head.w"), init::he_normal(&[classes, c_in, 1, 1], c_in, rng));
    store.insert(format!("{prefix}.head.b"), Tensor::zeros(&[classes]));
}

pub fn decoder<T: Element>(g: &mut Graph<'_, T>, features: Var, prefix: &str, cfg: &ConvConfig) -> Result<Var> {
    let mut x = features;
    for i in 0..cfg.widths.len() {
        let w = g.param(&format!("{prefix}.u{i}.w"))?;
        let b = g.param(&format!("{prefix}.u{i}.b"))?;
        x = g.tape.conv_transpose2d(x, w, Some(b), 2, 1)?;
        x = g.tape.gelu(x)?;
    }
    let w = g.param(&format!("{prefix}.head.w"))?;
    let b = g.param(&format!("{prefix}.head.b"))?;
    Ok(g.tape.conv2d(x, w, Some(b), 1, 0)?)
}

// 128,64,32,16 encoder -> 64,32,16,16 decoder
fn up_widths(cfg: &ConvConfig) -> Vec<usize> {
    let mut w: Vec<usize> = cfg.widths.iter().rev().skip(1).copied().collect();
    w.push(cfg.widths[0]);
    w
}
