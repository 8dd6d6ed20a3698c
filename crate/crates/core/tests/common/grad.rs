//! Finite-difference checks of tape operations and of whole paradigm models.

use rand::Rng;
use rgbh::conv::ConvConfig;
use rgbh::fusion::{self, Backbone, ParadigmKind, ParadigmSpec};
use rgbh::graph::Graph;
use rgbh::segnet::{bind_inputs, cross_entropy_loss, init_params, Batch, ModelConfig};
use rgbh::transformer::TransformerConfig;
use rgbh::Error;
use rgbh_tensor::gradcheck;
use rgbh_tensor::{Element, Result, Tape, Tensor, Var};

use super::{randomize, rng};

pub const TOL_F64: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;

#[derive(Debug, Clone, Copy, Default)]
pub struct Worst {
    pub f64: f64,
    pub f32: f64,
}

impl Worst {
    pub fn passes(&self) -> bool {
        self.f64 < TOL_F64 && self.f32 < TOL_F32
    }
}

type OpFn<T> = fn(&mut Tape<T>, &[Var]) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub range: (f64, f64),
    pub f64: OpFn<f64>,
    pub f32: OpFn<f32>,
}

/// Fixed pseudo-random projection to a scalar so no output gradient is uniform.
fn project<T: Element>(t: &mut Tape<T>, out: Var) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 1.37 + 0.4).sin()).collect();
    let wv = t.constant(Tensor::from_f64(&shape, &w)?);
    let prod = t.mul(out, wv)?;
    t.sum(prod)
}

fn matmul<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    t.matmul(v[0], v[1])
}
fn elementwise<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    let a = t.add(v[0], v[1])?;
    let m = t.mul(a, v[1])?;
    let s = t.sub(m, v[0])?;
    t.scale(s, T::from_f64(0.7))
}
fn add_bias<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    t.add_bias(v[0], v[1])
}
fn layout<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    let a = t.transpose(v[0])?;
    let r = t.reshape(a, &[2, 3, 2])?;
    t.permute(r, &[2, 0, 1])
}
fn concat_slice<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    let c = t.concat(&[v[0], v[1], v[0]], 1)?;
    t.slice(c, 1, 1, 7)
}
fn expand_mean<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    let e = t.expand(v[0], 3)?;
    let m = t.mean(e)?;
    let s = t.expand(m, 2)?;
    t.mul(s, s)
}
fn gelu<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    t.gelu(v[0])
}
fn relu<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    t.relu(v[0])
}
fn softmax<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    t.softmax(v[0])
}
fn layer_norm<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    t.layer_norm(v[0], v[1], v[2], 1e-5)
}
fn attention<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    t.attention(v[0], v[1], v[2], 2)
}
fn conv2d<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    t.conv2d(v[0], v[1], Some(v[2]), 2, 1)
}
fn conv_transpose<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)
}
fn cross_entropy<T: Element>(t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    t.cross_entropy(v[0], &[0, 5, 3, 255, 1, 1, 2, 4], 255)
}

/// Every differentiable tape operation.
pub fn op_cases() -> Vec<OpCase> {
    macro_rules! case {
        ($name:literal, $f:ident, [$($s:expr),*], $lo:expr, $hi:expr) => {
            OpCase { name: $name, shapes: vec![$($s.to_vec()),*], range: ($lo, $hi), f64: $f::<f64>, f32: $f::<f32> }
        };
    }
    vec![
        case!("matmul", matmul, [[5, 7], [7, 3]], -1.0, 1.0),
        case!("add/sub/mul/scale", elementwise, [[3, 4], [3, 4]], -1.0, 1.0),
        case!("add_bias", add_bias, [[2, 3, 4], [4]], -1.0, 1.0),
        case!("transpose/reshape/permute", layout, [[4, 3]], -1.0, 1.0),
        case!("concat/slice", concat_slice, [[2, 3], [2, 2]], -1.0, 1.0),
        case!("expand/mean", expand_mean, [[2, 2]], -1.0, 1.0),
        case!("gelu", gelu, [[4, 5]], -3.0, 3.0),
        // kept away from the kink at zero
        case!("relu", relu, [[12]], 0.05, 2.0),
        case!("softmax", softmax, [[3, 5]], -2.0, 2.0),
        case!("layer_norm", layer_norm, [[3, 8], [8], [8]], -1.0, 1.0),
        case!("attention", attention, [[2, 3, 4], [2, 5, 4], [2, 5, 4]], -1.0, 1.0),
        case!("conv2d", conv2d, [[2, 2, 6, 6], [3, 2, 3, 3], [3]], -1.0, 1.0),
        case!("conv_transpose2d", conv_transpose, [[2, 3, 3, 3], [3, 2, 4, 4], [2]], -1.0, 1.0),
        case!("cross_entropy", cross_entropy, [[2, 6, 2, 2]], -2.0, 2.0),
    ]
}

fn random_inputs(shapes: &[Vec<usize>], seed: u64, lo: f64, hi: f64) -> Vec<Tensor<f64>> {
    let mut r = rng(seed);
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            Tensor::new(s, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
        })
        .collect()
}

/// Worst relative errors of an op over `draws` random input draws. The
/// 32-bit tape is compared with central differences of the 64-bit
/// evaluation at the same f32-representable points.
pub fn check_op(case: &OpCase, draws: u64) -> Worst {
    let mut worst = Worst::default();
    let f64_fn = |t: &mut Tape<f64>, v: &[Var]| {
        let o = (case.f64)(t, v)?;
        project(t, o)
    };
    let f32_fn = |t: &mut Tape<f32>, v: &[Var]| {
        let o = (case.f32)(t, v)?;
        project(t, o)
    };
    for draw in 0..draws {
        let inputs = random_inputs(&case.shapes, 1000 + draw, case.range.0, case.range.1);
        let coords = gradcheck::pick_coords(&inputs, 40, &mut rng(draw ^ 0xabc));
        let r = gradcheck::check(f64_fn, &inputs, &coords, 1e-3).unwrap();
        worst.f64 = worst.f64.max(r.max_rel_error());
        let inputs32: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
        let eval64 = |xs: &[Tensor<f32>]| {
            let promoted: Vec<Tensor<f64>> = xs.iter().map(|t| t.cast()).collect();
            gradcheck::evaluate(&f64_fn, &promoted)
        };
        let r32 = gradcheck::check_against(&f32_fn, &eval64, &inputs32, &coords, 1e-3).unwrap();
        worst.f32 = worst.f32.max(r32.max_rel_error());
    }
    worst
}

/// Smallest useful model: 8×8 images, one layer per encoder, four tokens.
pub fn small_config(backbone: Backbone) -> ModelConfig {
    ModelConfig {
        backbone,
        classes: 6,
        image_size: 8,
        transformer: TransformerConfig {
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            patch: 4,
            depth: 1,
        },
        conv: ConvConfig { widths: vec![3, 4] },
    }
}

pub fn random_batch(size: usize, b: usize, seed: u64) -> Batch<f64> {
    let mut r = rng(seed);
    let n = b * size * size;
    let rgb: Vec<f64> = (0..3 * n).map(|_| r.random_range(0.0..1.0)).collect();
    let height: Vec<f64> = (0..n).map(|_| r.random_range(0.0..2.0)).collect();
    let labels = (0..n)
        .map(|_| if r.random_range(0..10) == 0 { 255 } else { r.random_range(0..6u8) })
        .collect();
    Batch {
        rgb: Tensor::new(&[b, 3, size, size], rgb).unwrap(),
        height: Tensor::new(&[b, 1, size, size], height).unwrap(),
        labels,
    }
}

fn model_loss<T: Element>(t: &mut Tape<T>, vars: &[Var], names: &[String], spec: ParadigmSpec, cfg: &ModelConfig, batch: &Batch<T>) -> Result<Var> {
    let bound = names.iter().cloned().zip(vars.iter().copied()).collect();
    let mut g = Graph::prebound(t, bound);
    let inputs = bind_inputs(&mut g, spec.kind, batch);
    let unwrap = |e: Error| match e {
        Error::Tensor(te) => te,
        other => panic!("model error: {other}"),
    };
    let logits = fusion::forward(&mut g, &inputs, spec, &cfg.dims()).map_err(unwrap)?;
    cross_entropy_loss(&mut g, logits, &batch.labels).map_err(unwrap)
}

/// Gradient of the mean cross entropy with respect to every parameter
/// tensor, `per_tensor` random coordinates each, over `draws` random
/// parameter and input draws.
pub fn check_model(kind: ParadigmKind, backbone: Backbone, draws: u64, per_tensor: usize) -> Worst {
    let cfg = small_config(backbone);
    let spec = ParadigmSpec::new(kind, backbone).unwrap();
    let mut worst = Worst::default();
    for draw in 0..draws {
        let store = randomize(&init_params::<f64>(spec, &cfg, draw).unwrap(), 0.3, 77 + draw);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let params: Vec<Tensor<f64>> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        let batch32 = random_batch(cfg.image_size, 2, 500 + draw).cast::<f32>();
        let batch64 = batch32.cast::<f64>();
        let f64_fn = |t: &mut Tape<f64>, v: &[Var]| model_loss(t, v, &names, spec, &cfg, &batch64);
        let f32_fn = |t: &mut Tape<f32>, v: &[Var]| model_loss(t, v, &names, spec, &cfg, &batch32);
        let coords = gradcheck::pick_coords(&params, per_tensor, &mut rng(draw ^ 0x5151));
        let r = gradcheck::check(f64_fn, &params, &coords, 1e-3).unwrap();
        worst.f64 = worst.f64.max(model_error(&r, &names));
        let params32: Vec<Tensor<f32>> = params.iter().map(|t| t.cast()).collect();
        let eval64 = |xs: &[Tensor<f32>]| {
            let promoted: Vec<Tensor<f64>> = xs.iter().map(|t| t.cast()).collect();
            gradcheck::evaluate(&f64_fn, &promoted)
        };
        let r32 = gradcheck::check_against(&f32_fn, &eval64, &params32, &coords, 1e-3).unwrap();
        worst.f32 = worst.f32.max(model_error(&r32, &names));
    }
    worst
}

/// Key biases shift every score in a softmax row by the same amount, so
/// their true gradient is exactly zero and a relative error is undefined.
/// Those tensors must instead be zero on both sides to within `1e-6` of
/// the overall gradient norm; all others are scored by relative error.
pub const ZERO_GRAD_FRACTION: f64 = 1e-6;

fn model_error(r: &gradcheck::GradCheckReport, names: &[String]) -> f64 {
    let scale = r.numeric.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let mut worst = 0.0f64;
    for (i, name) in names.iter().enumerate() {
        if name.ends_with(".attn.k.b") {
            let peak = r.analytic[i].iter().chain(&r.numeric[i]).map(|v| v.abs()).fold(0.0, f64::max);
            if peak > ZERO_GRAD_FRACTION * scale {
                return f64::INFINITY;
            }
        } else {
            worst = worst.max(r.per_input[i]);
        }
    }
    worst
}

/// Every (paradigm, backbone) pair the models support.
pub fn model_cases() -> Vec<(ParadigmKind, Backbone)> {
    let mut v: Vec<(ParadigmKind, Backbone)> = ParadigmKind::ALL.iter().map(|&k| (k, Backbone::Transformer)).collect();
    v.extend(
        ParadigmKind::ALL
            .iter()
            .filter(|&&k| ParadigmSpec::new(k, Backbone::Conv).is_ok())
            .map(|&k| (k, Backbone::Conv)),
    );
    v
}
