//! Patch embedding, multi-head attention with explicit query/key/value
//! sources, and the pre-norm transformer layer.
//!
//! Token sequences are `B×N×d` tape variables. Parameter names are built
//! from a caller-supplied prefix, e.g. `rgb.enc.l0.attn.q.w`.

use rand::Rng;
use rgbh_tensor::{init, Element, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch: usize,
    /// Transformer layers per encoder.
    pub depth: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            mlp_ratio: 4.0,
            patch: 8,
            depth: 2,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::ConfigInvalid(format!(
                "embed dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || self.mlp_hidden() == 0 {
            return Err(Error::ConfigInvalid("patch size and mlp width must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Token grid for an `h×w` image.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        for e in [h, w] {
            if e % self.patch != 0 {
                return Err(Error::IndivisibleSpatialExtent {
                    extent: e,
                    patch: self.patch,
                });
            }
        }
        Ok((h / self.patch, w / self.patch))
    }
}

pub fn init_linear<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    store.insert(format!("{prefix}.w"), init::trunc_normal(&[fan_in, fan_out], INIT_STD, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_layer_norm<T: Element>(store: &mut ParamStore<T>, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.g"), Tensor::ones(&[dim]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dim]));
}

pub fn init_msa<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, dim: usize, rng: &mut R) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{p}"), dim, dim, rng);
    }
}

pub fn init_layer<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, cfg: &TransformerConfig, rng: &mut R) {
    init_layer_norm(store, &format!("{prefix}.ln1"), cfg.dim);
    init_msa(store, &format!("{prefix}.attn"), cfg.dim, rng);
    init_layer_norm(store, &format!("{prefix}.ln2"), cfg.dim);
    init_linear(store, &format!("{prefix}.mlp.fc1"), cfg.dim, cfg.mlp_hidden(), rng);
    init_linear(store, &format!("{prefix}.mlp.fc2"), cfg.mlp_hidden(), cfg.dim, rng);
}

/// Scalar count of one transformer layer's parameters.
pub fn layer_param_count(cfg: &TransformerConfig) -> usize {
    let d = cfg.dim;
    let h = cfg.mlp_hidden();
    4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
}

pub fn init_patch_embed<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
    max_tokens: usize,
    cfg: &TransformerConfig,
    rng: &mut R,
) {
    init_linear(store, &format!("{prefix}.proj"), channels * cfg.patch * cfg.patch, cfg.dim, rng);
    store.insert(format!("{prefix}.pos"), init::trunc_normal(&[max_tokens, cfg.dim], INIT_STD, rng));
}

/// Affine map over the last axis of any-rank input.
pub fn linear<T: Element>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let shape = g.tape.shape(x).to_vec();
    let fan_in = *shape.last().unwrap();
    let fan_out = g.tape.shape(w)[1];
    let rows = shape.iter().product::<usize>() / fan_in;
    let flat = g.tape.reshape(x, &[rows, fan_in])?;
    let y = g.tape.matmul(flat, w)?;
    let y = g.tape.add_bias(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = fan_out;
    Ok(g.tape.reshape(y, &out_shape)?)
}

pub fn layer_norm<T: Element>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let gain = g.param(&format!("{prefix}.g"))?;
    let bias = g.param(&format!("{prefix}.b"))?;
    Ok(g.tape.layer_norm(x, gain, bias, LN_EPS)?)
}

/// Splits `B×C×H×W` into row-major `P×P` patches, giving `B×N×(C·P·P)`.
pub fn patchify<T: Element>(g: &mut Graph<'_, T>, image: Var, patch: usize) -> Result<Var> {
    let (b, c, h, w) = image_dims(g.tape.shape(image))?;
    for e in [h, w] {
        if e % patch != 0 {
            return Err(Error::IndivisibleSpatialExtent { extent: e, patch });
        }
    }
    let (gh, gw) = (h / patch, w / patch);
    let r = g.tape.reshape(image, &[b, c, gh, patch, gw, patch])?;
    let p = g.tape.permute(r, &[0, 2, 4, 1, 3, 5])?;
    Ok(g.tape.reshape(p, &[b, gh * gw, c * patch * patch])?)
}

/// Inverse of [`patchify`]: `B×N×(C·P·P)` back to `B×C×H×W`.
pub fn unpatchify<T: Element>(g: &mut Graph<'_, T>, tokens: Var, channels: usize, patch: usize, grid: (usize, usize)) -> Result<Var> {
    let b = g.tape.shape(tokens)[0];
    let (gh, gw) = grid;
    let r = g.tape.reshape(tokens, &[b, gh, gw, channels, patch, patch])?;
    let p = g.tape.permute(r, &[0, 3, 1, 4, 2, 5])?;
    Ok(g.tape.reshape(p, &[b, channels, gh * patch, gw * patch])?)
}

/// `p(x) + x_pos`: linear projection of each flattened patch plus its
/// positional row.
pub fn patch_embed<T: Element>(g: &mut Graph<'_, T>, image: Var, prefix: &str, cfg: &TransformerConfig) -> Result<Var> {
    let b = g.tape.shape(image)[0];
    let patches = patchify(g, image, cfg.patch)?;
    let n = g.tape.shape(patches)[1];
    let tokens = linear(g, patches, &format!("{prefix}.proj"))?;
    let pos = g.param(&format!("{prefix}.pos"))?;
    let max = g.tape.shape(pos)[0];
    if n > max {
        return Err(Error::ShapeMismatch {
            op: "patch_embed",
            detail: format!("{n} tokens exceed the {max} positional rows"),
        });
    }
    let pos = if n < max { g.tape.slice(pos, 0, 0, n)? } else { pos };
    let pos = g.tape.expand(pos, b)?;
    Ok(g.tape.add(tokens, pos)?)
}

/// Attention output together with the attention node, whose probabilities
/// are available through `Tape::attention_probs`.
pub struct Attended {
    pub out: Var,
    pub attention: Var,
}

/// Multi-head attention with queries from `q_src` and keys/values from
/// `k_src`/`v_src`.
pub fn msa_traced<T: Element>(g: &mut Graph<'_, T>, q_src: Var, k_src: Var, v_src: Var, prefix: &str, heads: usize) -> Result<Attended> {
    let (qs, ks, vs) = (g.tape.shape(q_src), g.tape.shape(k_src), g.tape.shape(v_src));
    if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::ShapeMismatch {
            op: "msa",
            detail: format!("q {qs:?}, k {ks:?}, v {vs:?}"),
        });
    }
    let q = linear(g, q_src, &format!("{prefix}.q"))?;
    let k = linear(g, k_src, &format!("{prefix}.k"))?;
    let v = linear(g, v_src, &format!("{prefix}.v"))?;
    let attention = g.tape.attention(q, k, v, heads)?;
    let out = linear(g, attention, &format!("{prefix}.o"))?;
    Ok(Attended { out, attention })
}

pub fn msa<T: Element>(g: &mut Graph<'_, T>, q_src: Var, k_src: Var, v_src: Var, prefix: &str, heads: usize) -> Result<Var> {
    Ok(msa_traced(g, q_src, k_src, v_src, prefix, heads)?.out)
}

pub fn mlp<T: Element>(g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{prefix}.fc1"))?;
    let h = g.tape.gelu(h)?;
    linear(g, h, &format!("{prefix}.fc2"))
}

/// `z' = x + MSA(LN(x))`, `z = z' + MLP(LN(z'))`.
pub fn transformer_layer<T: Element>(g: &mut Graph<'_, T>, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let h = layer_norm(g, x, &format!("{prefix}.ln1"))?;
    let a = msa(g, h, h, h, &format!("{prefix}.attn"), heads)?;
    let z = g.tape.add(x, a)?;
    mlp_residual(g, z, prefix)
}

/// Second half of a layer: `z + MLP(LN(z))`.
pub fn mlp_residual<T: Element>(g: &mut Graph<'_, T>, z: Var, prefix: &str) -> Result<Var> {
    let h = layer_norm(g, z, &format!("{prefix}.ln2"))?;
    let m = mlp(g, h, &format!("{prefix}.mlp"))?;
    Ok(g.tape.add(z, m)?)
}

pub fn init_encoder<T: Element, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
    max_tokens: usize,
    cfg: &TransformerConfig,
    rng: &mut R,
) {
    init_patch_embed(store, &format!("{prefix}.embed"), channels, max_tokens, cfg, rng);
    for l in 0..cfg.depth {
        init_layer(store, &format!("{prefix}.l{l}"), cfg, rng);
    }
}

/// Patch embedding followed by `cfg.depth` layers.
pub fn encoder<T: Element>(g: &mut Graph<'_, T>, image: Var, prefix: &str, cfg: &TransformerConfig) -> Result<Var> {
    let mut z = patch_embed(g, image, &format!("{prefix}.embed"), cfg)?;
    for l in 0..cfg.depth {
        z = transformer_layer(g, z, &format!("{prefix}.l{l}"), cfg.heads)?;
    }
    Ok(z)
}

pub fn init_decoder<T: Element, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, classes: usize, cfg: &TransformerConfig, rng: &mut R) {
    init_layer_norm(store, &format!("{prefix}.ln"), cfg.dim);
    init_linear(store, &format!("{prefix}.head"), cfg.dim, classes * cfg.patch * cfg.patch, rng);
}

/// Per-token linear head to `C·P·P` logits, re-assembled into `B×C×H×W`.
pub fn decoder<T: Element>(g: &mut Graph<'_, T>, tokens: Var, prefix: &str, classes: usize, cfg: &TransformerConfig, grid: (usize, usize)) -> Result<Var> {
    let n = g.tape.shape(tokens)[1];
    if n != grid.0 * grid.1 {
        return Err(Error::ShapeMismatch {
            op: "decoder",
            detail: format!("{n} tokens for a {grid:?} grid"),
        });
    }
    let h = layer_norm(g, tokens, &format!("{prefix}.ln"))?;
    let logits = linear(g, h, &format!("{prefix}.head"))?;
    unpatchify(g, logits, classes, cfg.patch, grid)
}

pub(crate) fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(Error::ShapeMismatch {
            op: "image",
            detail: format!("expected B×C×H×W, got {s:?}"),
        }),
    }
}
