//! Structural identities shared by the fusion tests and the acceptance suite.

use rgbh::fusion::{self, Backbone, ParadigmKind, ParadigmSpec, TimfNames};
use rgbh::graph::Graph;
use rgbh::segnet::{init_params, Batch, SegModel};
use rgbh::transformer::{self as tf, TransformerConfig};
use rgbh_tensor::{ParamStore, Tape, Tensor};

use super::grad::{random_batch, small_config};
use super::{max_abs_diff, randomize, rng, tokens_of, Dense, Mat};

pub fn tcfg(dim: usize, heads: usize) -> TransformerConfig {
    TransformerConfig {
        dim,
        heads,
        mlp_ratio: 2.0,
        patch: 4,
        depth: 1,
    }
}

pub fn timf_store(seed: u64) -> ParamStore<f64> {
    let spec = ParadigmSpec::new(ParadigmKind::Intermediary, Backbone::Transformer).unwrap();
    randomize(&init_params(spec, &small_config(Backbone::Transformer), seed).unwrap(), 0.4, seed + 50)
}

pub fn logits(store: &ParamStore<f64>, kind: ParadigmKind, backbone: Backbone, batch: &Batch<f64>) -> Tensor<f64> {
    let model = SegModel {
        spec: ParadigmSpec::new(kind, backbone).unwrap(),
        config: small_config(backbone),
        params: store.clone(),
    };
    model.logits(batch).unwrap()
}

/// A layer with every weight zero applied to random tokens: `(input, output)`.
pub fn zero_layer(dim: usize, heads: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let c = tcfg(dim, heads);
    let mut s = ParamStore::new();
    tf::init_layer(&mut s, "l", &c, &mut rng(seed));
    let store = s.map_values(|_, t| Tensor::zeros(t.shape()));
    let x = super::random_tensor(&[2, 5, dim], 3.0, &mut rng(seed + 1));
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, false);
    let xv = g.input(x.clone());
    let y = tf::transformer_layer(&mut g, xv, "l", heads).unwrap();
    let y = g.tape.value(y).clone();
    (x, y)
}

/// Logits of late fusion with the height tower zeroed, and of the single
/// RGB model holding the same RGB tower.
pub fn late_without_height(backbone: Backbone, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    let cfg = small_config(backbone);
    let late_spec = ParadigmSpec::new(ParadigmKind::Late, backbone).unwrap();
    let late = randomize(&init_params(late_spec, &cfg, seed).unwrap(), 0.3, seed + 1);
    let late = super::zero_prefix(&late, "h.");
    // the single-modality model names its decoder plainly
    let mut single = ParamStore::new();
    for (name, t) in late.iter().filter(|(n, _)| n.starts_with("rgb.")) {
        single.insert(name.replacen("rgb.dec", "dec", 1), t.clone());
    }
    let batch = random_batch(cfg.image_size, 2, seed + 4);
    let a = logits(&late, ParadigmKind::Late, backbone, &batch);
    let b = logits(&single, ParadigmKind::SingleRgb, backbone, &batch);
    (a, b)
}

/// Largest gap between both cross-fusion outputs and plain self-attention
/// when the two blocks share weights and see the same tokens.
pub fn cross_vs_self_attention(seed: u64) -> f64 {
    let c = tcfg(8, 2);
    let mut store = ParamStore::new();
    tf::init_layer(&mut store, "x", &c, &mut rng(seed));
    let store = randomize(&store, 0.4, seed + 10);
    let mut both = store.clone();
    for (name, t) in store.iter() {
        both.insert(name.replacen("x.", "fuse.cross.rgb.", 1), t.clone());
        both.insert(name.replacen("x.", "fuse.cross.h.", 1), t.clone());
    }
    let z = super::random_tensor(&[2, 4, 8], 1.0, &mut rng(seed + 20));
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &both, false);
    let zv = g.input(z);
    let (r, h) = fusion::cross_fuse(&mut g, zv, zv, "fuse.cross.rgb", "fuse.cross.h", c.heads).unwrap();
    let selfattn = tf::transformer_layer(&mut g, zv, "x", c.heads).unwrap();
    let mut worst = 0.0f64;
    for b in 0..2 {
        let want = tokens_of(g.tape.value(selfattn), b);
        worst = worst.max(max_abs_diff(&tokens_of(g.tape.value(r), b), &want));
        worst = worst.max(max_abs_diff(&tokens_of(g.tape.value(h), b), &want));
    }
    worst
}

/// Runs both TIMF stages on the tape and on the dense reference and
/// returns the largest gap over every intermediate output.
pub fn timf_dense_error(nr: usize, nh: usize, seed: u64) -> f64 {
    let heads = 2;
    let store = timf_store(seed);
    let mut r = rng(seed + 1);
    let zr = super::random_tensor(&[2, nr, 8], 1.0, &mut r);
    let zh = super::random_tensor(&[2, nh, 8], 1.0, &mut r);
    let names = TimfNames::under("fuse");
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &store, false);
    let (a, b) = (g.input(zr.clone()), g.input(zh.clone()));
    let m = g.param(&names.m).unwrap();
    let s1 = fusion::timf_stage1(&mut g, a, b, m, &names.stage1, heads).unwrap();
    let s2 = fusion::timf_stage2(&mut g, &s1, &names.stage2_rgb, &names.stage2_h, heads).unwrap();

    let dense = Dense { p: &store };
    let m0 = store.get(&names.m).unwrap().to_vec();
    let mut worst = 0.0f64;
    for i in 0..2 {
        let (r1, h1, m1) = dense.timf_stage1(&tokens_of(&zr, i), &tokens_of(&zh, i), &m0, &names.stage1, heads);
        let (r2, mr) = dense.timf_stage2(&r1, &m1, &names.stage2_rgb, heads);
        let (h2, mh) = dense.timf_stage2(&h1, &m1, &names.stage2_h, heads);
        let pairs: [(&Tensor<f64>, Mat); 7] = [
            (g.tape.value(s1.z_rgb), r1),
            (g.tape.value(s1.z_h), h1),
            (g.tape.value(s1.m), vec![m1]),
            (g.tape.value(s2.z_rgb), r2),
            (g.tape.value(s2.z_h), h2),
            (g.tape.value(s2.m_rgb), vec![mr]),
            (g.tape.value(s2.m_h), vec![mh]),
        ];
        for (got, want) in &pairs {
            worst = worst.max(max_abs_diff(&tokens_of(got, i), want));
        }
    }
    worst
}

/// Token-count pairs with at most five tokens in total.
pub const TIMF_CASES: [(usize, usize); 5] = [(1, 1), (2, 2), (1, 3), (3, 1), (2, 1)];
