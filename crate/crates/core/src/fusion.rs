//! Fusion paradigms over the transformer and convolutional backbones.
//!
//! Two-stream transformer paradigms (feature, cross, intermediary) all
//! produce `B×2N×d` tokens: the RGB stream followed by the height stream.
//! [`merge_streams`] pairs token `i` with token `N+i` and projects the
//! `2d` concatenation back to `d` before the shared decoder.

use std::fmt;
use std::str::FromStr;

use rgbh_tensor::{Element, Var};
use serde::{Deserialize, Serialize};

use crate::conv::{self, ConvConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::transformer::{self as tf, TransformerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParadigmKind {
    SingleRgb,
    SingleHeight,
    Early,
    Feature,
    Late,
    Cross,
    Intermediary,
}

impl ParadigmKind {
    pub const ALL: [ParadigmKind; 7] = [
        ParadigmKind::SingleRgb,
        ParadigmKind::SingleHeight,
        ParadigmKind::Early,
        ParadigmKind::Feature,
        ParadigmKind::Late,
        ParadigmKind::Cross,
        ParadigmKind::Intermediary,
    ];

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            ParadigmKind::SingleRgb => "Single-RGB",
            ParadigmKind::SingleHeight => "Single-Height",
            ParadigmKind::Early => "Early",
            ParadigmKind::Feature => "Feature",
            ParadigmKind::Late => "Late",
            ParadigmKind::Cross => "Cross",
            ParadigmKind::Intermediary => "Intermediary",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ParadigmKind::SingleRgb => "single-rgb",
            ParadigmKind::SingleHeight => "single-height",
            ParadigmKind::Early => "early",
            ParadigmKind::Feature => "feature",
            ParadigmKind::Late => "late",
            ParadigmKind::Cross => "cross",
            ParadigmKind::Intermediary => "intermediary",
        }
    }

    pub fn uses_rgb(self) -> bool {
        self != ParadigmKind::SingleHeight
    }

    pub fn uses_height(self) -> bool {
        self != ParadigmKind::SingleRgb
    }
}

impl fmt::Display for ParadigmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for ParadigmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParadigmKind::ALL
            .into_iter()
            .find(|k| k.key() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown paradigm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    Conv,
    Transformer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParadigmSpec {
    pub kind: ParadigmKind,
    pub backbone: Backbone,
}

impl ParadigmSpec {
    pub fn new(kind: ParadigmKind, backbone: Backbone) -> Result<Self> {
        let spec = Self { kind, backbone };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbone == Backbone::Conv && matches!(self.kind, ParadigmKind::Cross | ParadigmKind::Intermediary) {
            return Err(Error::ConfigInvalid(format!("{} fusion requires the transformer backbone", self.kind)));
        }
        Ok(())
    }
}

/// Modality inputs as `B×C×H×W` variables.
#[derive(Debug, Clone, Copy)]
pub struct Inputs {
    pub rgb: Option<Var>,
    pub height: Option<Var>,
}

impl Inputs {
    fn rgb<T: Element>(&self, g: &Graph<'_, T>) -> Result<Var> {
        let v = self.rgb.ok_or(Error::ModalityMissing("rgb"))?;
        check_channels(g, v, 3)?;
        Ok(v)
    }

    fn height<T: Element>(&self, g: &Graph<'_, T>) -> Result<Var> {
        let v = self.height.ok_or(Error::ModalityMissing("height"))?;
        check_channels(g, v, 1)?;
        Ok(v)
    }
}

fn check_channels<T: Element>(g: &Graph<'_, T>, v: Var, expected: usize) -> Result<()> {
    let (_, c, _, _) = tf::image_dims(g.tape.shape(v))?;
    if c != expected {
        return Err(Error::ChannelMismatch { expected, got: c });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Rgb,
    Height,
}

impl Modality {
    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Height => "h",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Modality::Rgb => 3,
            Modality::Height => 1,
        }
    }
}

/// Shared settings the forward functions need.
#[derive(Debug, Clone)]
pub struct Dims {
    pub classes: usize,
    pub transformer: TransformerConfig,
    pub conv: ConvConfig,
}

/// `y* = f^d(f^e(X_m))` for one modality.
pub fn forward_single<T: Element>(g: &mut Graph<'_, T>, x: &Inputs, which: Modality, backbone: Backbone, dims: &Dims) -> Result<Var> {
    let image = match which {
        Modality::Rgb => x.rgb(g)?,
        Modality::Height => x.height(g)?,
    };
    let enc = format!("{}.enc", which.prefix());
    match backbone {
        Backbone::Transformer => {
            let grid = token_grid(g, image, &dims.transformer)?;
            let z = tf::encoder(g, image, &enc, &dims.transformer)?;
            tf::decoder(g, z, "dec", dims.classes, &dims.transformer, grid)
        }
        Backbone::Conv => {
            let f = conv::encoder(g, image, &enc, &dims.conv)?;
            conv::decoder(g, f, "dec", &dims.conv)
        }
    }
}

/// `f^d(f^e(X_rgb ∥ X_h))` on the stacked R,G,B,H input.
pub fn forward_early<T: Element>(g: &mut Graph<'_, T>, x: &Inputs, backbone: Backbone, dims: &Dims) -> Result<Var> {
    let rgb = x.rgb(g)?;
    let h = x.height(g)?;
    let stacked = g.tape.concat(&[rgb, h], 1)?;
    match backbone {
        Backbone::Transformer => {
            let grid = token_grid(g, stacked, &dims.transformer)?;
            let z = tf::encoder(g, stacked, "rgbh.enc", &dims.transformer)?;
            tf::decoder(g, z, "dec", dims.classes, &dims.transformer, grid)
        }
        Backbone::Conv => {
            let f = conv::encoder(g, stacked, "rgbh.enc", &dims.conv)?;
            conv::decoder(g, f, "dec", &dims.conv)
        }
    }
}

/// `f^d(f^e_rgb(X_rgb) ∥ f^e_h(X_h))` with one seam at the encoder output.
pub fn forward_feature<T: Element>(g: &mut Graph<'_, T>, x: &Inputs, backbone: Backbone, dims: &Dims) -> Result<Var> {
    let rgb = x.rgb(g)?;
    let h = x.height(g)?;
    match backbone {
        Backbone::Transformer => {
            let grid = token_grid(g, rgb, &dims.transformer)?;
            let zr = tf::encoder(g, rgb, "rgb.enc", &dims.transformer)?;
            let zh = tf::encoder(g, h, "h.enc", &dims.transformer)?;
            let both = g.tape.concat(&[zr, zh], 1)?;
            let merged = merge_streams(g, both, "fuse.merge")?;
            tf::decoder(g, merged, "dec", dims.classes, &dims.transformer, grid)
        }
        Backbone::Conv => {
            let fr = conv::encoder(g, rgb, "rgb.enc", &dims.conv)?;
            let fh = conv::encoder(g, h, "h.enc", &dims.conv)?;
            let both = g.tape.concat(&[fr, fh], 1)?;
            conv::decoder(g, both, "dec", &dims.conv)
        }
    }
}

/// Sum of the two towers' raw logits.
pub fn forward_late<T: Element>(g: &mut Graph<'_, T>, x: &Inputs, backbone: Backbone, dims: &Dims) -> Result<Var> {
    let rgb = tower(g, x, Modality::Rgb, backbone, dims)?;
    let h = tower(g, x, Modality::Height, backbone, dims)?;
    if g.tape.shape(rgb) != g.tape.shape(h) {
        return Err(Error::ShapeMismatch {
            op: "late fusion",
            detail: format!("{:?} vs {:?}", g.tape.shape(rgb), g.tape.shape(h)),
        });
    }
    Ok(g.tape.add(rgb, h)?)
}

/// One complete encoder-decoder tower, prefixed by its modality.
pub fn tower<T: Element>(g: &mut Graph<'_, T>, x: &Inputs, which: Modality, backbone: Backbone, dims: &Dims) -> Result<Var> {
    let image = match which {
        Modality::Rgb => x.rgb(g)?,
        Modality::Height => x.height(g)?,
    };
    let p = which.prefix();
    match backbone {
        Backbone::Transformer => {
            let grid = token_grid(g, image, &dims.transformer)?;
            let z = tf::encoder(g, image, &format!("{p}.enc"), &dims.transformer)?;
            tf::decoder(g, z, &format!("{p}.dec"), dims.classes, &dims.transformer, grid)
        }
        Backbone::Conv => {
            let f = conv::encoder(g, image, &format!("{p}.enc"), &dims.conv)?;
            conv::decoder(g, f, &format!("{p}.dec"), &dims.conv)
        }
    }
}

/// Cross-attention block for one stream: queries come from the other
/// modality, keys and values from this one, followed by the usual MLP
/// residual. Both sources go through the same `ln1`.
pub fn cross_block<T: Element>(g: &mut Graph<'_, T>, own: Var, other: Var, prefix: &str, heads: usize) -> Result<Var> {
    let n_own = g.tape.shape(own)[1];
    let n_other = g.tape.shape(other)[1];
    if n_own != n_other {
        return Err(Error::TokenCountMismatch {
            rgb: n_own,
            height: n_other,
        });
    }
    let ln = format!("{prefix}.ln1");
    let kv = tf::layer_norm(g, own, &ln)?;
    let q = tf::layer_norm(g, other, &ln)?;
    let a = tf::msa(g, q, kv, kv, &format!("{prefix}.attn"), heads)?;
    let z = g.tape.add(own, a)?;
    tf::mlp_residual(g, z, prefix)
}

/// Both cross blocks; returns `(z_rgb, z_h)`.
pub fn cross_fuse<T: Element>(g: &mut Graph<'_, T>, z_rgb: Var, z_h: Var, prefix_rgb: &str, prefix_h: &str, heads: usize) -> Result<(Var, Var)> {
    let nr = g.tape.shape(z_rgb)[1];
    let nh = g.tape.shape(z_h)[1];
    if nr != nh {
        return Err(Error::TokenCountMismatch { rgb: nr, height: nh });
    }
    let r = cross_block(g, z_rgb, z_h, prefix_rgb, heads)?;
    let h = cross_block(g, z_h, z_rgb, prefix_h, heads)?;
    Ok((r, h))
}

pub fn forward_cross<T: Element>(g: &mut Graph<'_, T>, x: &Inputs, dims: &Dims) -> Result<Var> {
    let rgb = x.rgb(g)?;
    let h = x.height(g)?;
    let cfg = &dims.transformer;
    let grid = token_grid(g, rgb, cfg)?;
    let zr = tf::encoder(g, rgb, "rgb.enc", cfg)?;
    let zh = tf::encoder(g, h, "h.enc", cfg)?;
    let (fr, fh) = cross_fuse(g, zr, zh, "fuse.cross.rgb", "fuse.cross.h", cfg.heads)?;
    let both = g.tape.concat(&[fr, fh], 1)?;
    let merged = merge_streams(g, both, "fuse.merge")?;
    tf::decoder(g, merged, "dec", dims.classes, cfg, grid)
}

/// Stage-1 result: the joint layer's output split back by position.
#[derive(Debug, Clone, Copy)]
pub struct Stage1 {
    pub z_rgb: Var,
    pub z_h: Var,
    pub m: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutputs {
    pub z_rgb: Var,
    pub z_h: Var,
    pub m_rgb: Var,
    pub m_h: Var,
}

/// `z_a = TL(z_rgb ∥ z_h ∥ M)`, sliced into `(z_rgb, z_h, M′)`.
///
/// `m` is the `1×d` intermediary parameter; it is repeated over the batch.
pub fn timf_stage1<T: Element>(g: &mut Graph<'_, T>, z_rgb: Var, z_h: Var, m: Var, prefix: &str, heads: usize) -> Result<Stage1> {
    let b = g.tape.shape(z_rgb)[0];
    let d = g.tape.shape(z_rgb)[2];
    if g.tape.shape(m) != [1, d] {
        return Err(Error::ShapeMismatch {
            op: "timf_stage1",
            detail: format!("intermediary token {:?} for dim {d}", g.tape.shape(m)),
        });
    }
    let nr = g.tape.shape(z_rgb)[1];
    let nh = g.tape.shape(z_h)[1];
    let mb = g.tape.expand(m, b)?;
    let joint = g.tape.concat(&[z_rgb, z_h, mb], 1)?;
    let za = tf::transformer_layer(g, joint, prefix, heads)?;
    Ok(Stage1 {
        z_rgb: g.tape.slice(za, 1, 0, nr)?,
        z_h: g.tape.slice(za, 1, nr, nr + nh)?,
        m: g.tape.slice(za, 1, nr + nh, nr + nh + 1)?,
    })
}

/// `TL_rgb(z_rgb ∥ M′)` and `TL_h(z_h ∥ M′)`; `m` is `B×1×d`.
pub fn timf_stage2<T: Element>(g: &mut Graph<'_, T>, s: &Stage1, prefix_rgb: &str, prefix_h: &str, heads: usize) -> Result<FusionOutputs> {
    if g.tape.shape(s.m)[1] != 1 {
        return Err(Error::ShapeMismatch {
            op: "timf_stage2",
            detail: format!("intermediary {:?} is not a single token", g.tape.shape(s.m)),
        });
    }
    let (z_rgb, m_rgb) = with_intermediary(g, s.z_rgb, s.m, prefix_rgb, heads)?;
    let (z_h, m_h) = with_intermediary(g, s.z_h, s.m, prefix_h, heads)?;
    Ok(FusionOutputs { z_rgb, z_h, m_rgb, m_h })
}

fn with_intermediary<T: Element>(g: &mut Graph<'_, T>, z: Var, m: Var, prefix: &str, heads: usize) -> Result<(Var, Var)> {
    let n = g.tape.shape(z)[1];
    let joint = g.tape.concat(&[z, m], 1)?;
    let out = tf::transformer_layer(g, joint, prefix, heads)?;
    Ok((g.tape.slice(out, 1, 0, n)?, g.tape.slice(out, 1, n, n + 1)?))
}

/// Parameter name prefixes of one intermediary fusion point.
#[derive(Debug, Clone)]
pub struct TimfNames {
    pub m: String,
    pub stage1: String,
    pub stage2_rgb: String,
    pub stage2_h: String,
}

impl TimfNames {
    pub fn under(prefix: &str) -> Self {
        Self {
            m: format!("{prefix}.m"),
            stage1: format!("{prefix}.tl1"),
            stage2_rgb: format!("{prefix}.tl_rgb"),
            stage2_h: format!("{prefix}.tl_h"),
        }
    }
}

/// Stage 1 then stage 2; returns `z_rgb′ ∥ z_h′` (`B×(N_rgb+N_h)×d`) and
/// the stage outputs.
pub fn timf_fuse<T: Element>(g: &mut Graph<'_, T>, z_rgb: Var, z_h: Var, names: &TimfNames, heads: usize) -> Result<(Var, FusionOutputs)> {
    let m = g.param(&names.m)?;
    let s1 = timf_stage1(g, z_rgb, z_h, m, &names.stage1, heads)?;
    let out = timf_stage2(g, &s1, &names.stage2_rgb, &names.stage2_h, heads)?;
    let fused = g.tape.concat(&[out.z_rgb, out.z_h], 1)?;
    Ok((fused, out))
}

pub fn forward_intermediary<T: Element>(g: &mut Graph<'_, T>, x: &Inputs, dims: &Dims) -> Result<Var> {
    let rgb = x.rgb(g)?;
    let h = x.height(g)?;
    let cfg = &dims.transformer;
    let grid = token_grid(g, rgb, cfg)?;
    let zr = tf::encoder(g, rgb, "rgb.enc", cfg)?;
    let zh = tf::encoder(g, h, "h.enc", cfg)?;
    let (fused, _) = timf_fuse(g, zr, zh, &TimfNames::under("fuse"), cfg.heads)?;
    let merged = merge_streams(g, fused, "fuse.merge")?;
    tf::decoder(g, merged, "dec", dims.classes, cfg, grid)
}

/// Pairs token `i` of the first half with token `N+i` of the second half
/// and applies a `2d → d` linear map.
pub fn merge_streams<T: Element>(g: &mut Graph<'_, T>, tokens: Var, prefix: &str) -> Result<Var> {
    let n2 = g.tape.shape(tokens)[1];
    if !n2.is_multiple_of(2) {
        return Err(Error::TokenCountMismatch {
            rgb: n2 / 2 + 1,
            height: n2 / 2,
        });
    }
    let n = n2 / 2;
    let a = g.tape.slice(tokens, 1, 0, n)?;
    let b = g.tape.slice(tokens, 1, n, n2)?;
    let paired = g.tape.concat(&[a, b], 2)?;
    tf::linear(g, paired, prefix)
}

fn token_grid<T: Element>(g: &Graph<'_, T>, image: Var, cfg: &TransformerConfig) -> Result<(usize, usize)> {
    let (_, _, h, w) = tf::image_dims(g.tape.shape(image))?;
    cfg.grid(h, w)
}

pub fn forward<T: Element>(g: &mut Graph<'_, T>, x: &Inputs, spec: ParadigmSpec, dims: &Dims) -> Result<Var> {
    spec.validate()?;
    match spec.kind {
        ParadigmKind::SingleRgb => forward_single(g, x, Modality::Rgb, spec.backbone, dims),
        ParadigmKind::SingleHeight => forward_single(g, x, Modality::Height, spec.backbone, dims),
        ParadigmKind::Early => forward_early(g, x, spec.backbone, dims),
        ParadigmKind::Feature => forward_feature(g, x, spec.backbone, dims),
        ParadigmKind::Late => forward_late(g, x, spec.backbone, dims),
        ParadigmKind::Cross => forward_cross(g, x, dims),
        ParadigmKind::Intermediary => forward_intermediary(g, x, dims),
    }
}
