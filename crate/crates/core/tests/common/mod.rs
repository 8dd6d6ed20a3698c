//! Independent reference implementations used as test oracles. Everything
//! here works on plain nested vectors with explicit loops and shares no
//! code with the library's tape.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbh::pointcloud::Point;
use rgbh_tensor::{ParamStore, Tensor};

/// Token rows, `N×d`.
pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, d).unwrap()
}

/// Replaces every parameter with uniform noise of the given scale; layer
/// norm gains are drawn around 1 so they stay well away from zero.
pub fn randomize(store: &ParamStore<f64>, scale: f64, seed: u64) -> ParamStore<f64> {
    let mut r = rng(seed);
    store.map_values(|name, t| {
        let base = if name.ends_with(".g") { 1.0 } else { 0.0 };
        let d: Vec<f64> = (0..t.len()).map(|_| base + r.random_range(-scale..scale)).collect();
        Tensor::new(t.shape(), d).unwrap()
    })
}

/// Every parameter under `prefix` set to zero.
pub fn zero_prefix<T: rgbh_tensor::Element>(store: &ParamStore<T>, prefix: &str) -> ParamStore<T> {
    store.map_values(|name, t| if name.starts_with(prefix) { Tensor::zeros(t.shape()) } else { t.clone() })
}

/// Batch element `b` of a `B×N×d` tensor.
pub fn tokens_of(t: &Tensor<f64>, b: usize) -> Mat {
    let s = t.shape();
    let (n, d) = (s[1], s[2]);
    (0..n).map(|i| t.data()[(b * n + i) * d..(b * n + i + 1) * d].to_vec()).collect()
}

pub fn to_tensor(batch: &[Mat]) -> Tensor<f64> {
    let (n, d) = (batch[0].len(), batch[0][0].len());
    let data: Vec<f64> = batch.iter().flat_map(|m| m.iter().flat_map(|r| r.iter().copied())).collect();
    Tensor::new(&[batch.len(), n, d], data).unwrap()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

pub fn concat_rows(parts: &[&Mat]) -> Mat {
    parts.iter().flat_map(|m| m.iter().cloned()).collect()
}

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

/// Dense reference of the transformer building blocks over named parameters.
pub struct Dense<'a> {
    pub p: &'a ParamStore<f64>,
}

impl<'a> Dense<'a> {
    fn get(&self, name: &str) -> &'a Tensor<f64> {
        self.p.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    pub fn linear(&self, x: &Mat, prefix: &str) -> Mat {
        let w = self.get(&format!("{prefix}.w"));
        let b = self.get(&format!("{prefix}.b"));
        let (fin, fout) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                assert_eq!(row.len(), fin);
                (0..fout)
                    .map(|o| b.data()[o] + (0..fin).map(|i| row[i] * w.data()[i * fout + o]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn layer_norm(&self, x: &Mat, prefix: &str) -> Mat {
        let g = self.get(&format!("{prefix}.g")).data();
        let b = self.get(&format!("{prefix}.b")).data();
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    pub fn msa(&self, q_src: &Mat, k_src: &Mat, v_src: &Mat, prefix: &str, heads: usize) -> Mat {
        let q = self.linear(q_src, &format!("{prefix}.q"));
        let k = self.linear(k_src, &format!("{prefix}.k"));
        let v = self.linear(v_src, &format!("{prefix}.v"));
        let a = attention(&q, &k, &v, heads).0;
        self.linear(&a, &format!("{prefix}.o"))
    }

    pub fn mlp(&self, x: &Mat, prefix: &str) -> Mat {
        let h = self.linear(x, &format!("{prefix}.fc1"));
        let h: Mat = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        self.linear(&h, &format!("{prefix}.fc2"))
    }

    pub fn mlp_residual(&self, z: &Mat, prefix: &str) -> Mat {
        let h = self.layer_norm(z, &format!("{prefix}.ln2"));
        add(z, &self.mlp(&h, &format!("{prefix}.mlp")))
    }

    pub fn layer(&self, x: &Mat, prefix: &str, heads: usize) -> Mat {
        let h = self.layer_norm(x, &format!("{prefix}.ln1"));
        let z = add(x, &self.msa(&h, &h, &h, &format!("{prefix}.attn"), heads));
        self.mlp_residual(&z, prefix)
    }

    /// Queries from `other`, keys and values from `own`, residual on `own`.
    pub fn cross_block(&self, own: &Mat, other: &Mat, prefix: &str, heads: usize) -> Mat {
        let kv = self.layer_norm(own, &format!("{prefix}.ln1"));
        let q = self.layer_norm(other, &format!("{prefix}.ln1"));
        let z = add(own, &self.msa(&q, &kv, &kv, &format!("{prefix}.attn"), heads));
        self.mlp_residual(&z, prefix)
    }

    /// Stage 1 over `z_rgb ∥ z_h ∥ m`; returns the three slices.
    pub fn timf_stage1(&self, zr: &Mat, zh: &Mat, m: &[f64], prefix: &str, heads: usize) -> (Mat, Mat, Vec<f64>) {
        let joint = concat_rows(&[zr, zh, &vec![m.to_vec()]]);
        let out = self.layer(&joint, prefix, heads);
        let (nr, nh) = (zr.len(), zh.len());
        (out[..nr].to_vec(), out[nr..nr + nh].to_vec(), out[nr + nh].clone())
    }

    /// Stage 2 for one stream: `TL(z ∥ m)` split into tokens and intermediary.
    pub fn timf_stage2(&self, z: &Mat, m: &[f64], prefix: &str, heads: usize) -> (Mat, Vec<f64>) {
        let joint = concat_rows(&[z, &vec![m.to_vec()]]);
        let out = self.layer(&joint, prefix, heads);
        (out[..z.len()].to_vec(), out[z.len()].clone())
    }

    /// Pairs token i with token N+i and applies the `2d → d` map.
    pub fn merge(&self, both: &Mat, prefix: &str) -> Mat {
        let n = both.len() / 2;
        let paired: Mat = (0..n).map(|i| [both[i].clone(), both[n + i].clone()].concat()).collect();
        self.linear(&paired, prefix)
    }
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Multi-head attention on contiguous column groups; also returns the
/// probability rows per head as `heads × Nq × Nk`.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut ph = Vec::with_capacity(q.len());
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|x| x / z).collect();
            for c in cols.clone() {
                out[i][c] = p.iter().zip(v).map(|(pj, vj)| pj * vj[c]).sum();
            }
            ph.push(p);
        }
        probs.push(ph);
    }
    (out, probs)
}

/// Per-class scores from explicit pixel sets; `None` where undefined.
pub struct OracleScores {
    pub iou: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
}

pub fn oracle_scores(pred: &[u8], gt: &[u8], classes: usize, ignore: u8) -> OracleScores {
    use std::collections::BTreeSet;
    let mut iou = Vec::new();
    let mut acc = Vec::new();
    for c in 0..classes as u8 {
        let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| gt[i] != ignore && pred[i] == c).collect();
        let g: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
        let inter = p.intersection(&g).count();
        let union = p.union(&g).count();
        iou.push((union > 0).then(|| inter as f64 / union as f64));
        acc.push((!g.is_empty()).then(|| inter as f64 / g.len() as f64));
    }
    let mean = |v: &[Option<f64>]| {
        let xs: Vec<f64> = v.iter().flatten().copied().collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    };
    OracleScores {
        miou: mean(&iou),
        macc: mean(&acc),
        iou,
        acc,
    }
}

/// A random 16×16 prediction/label pair over 6 classes. Each pair draws
/// its own subset of classes so some are absent, and ~5% of labels are 255.
pub fn random_label_pair(seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut r = rng(seed);
    let present: Vec<u8> = (0..6u8).filter(|_| r.random_bool(0.7)).collect();
    let present = if present.is_empty() { vec![r.random_range(0..6u8)] } else { present };
    let pick = |r: &mut ChaCha8Rng| present[r.random_range(0..present.len())];
    let gt: Vec<u8> = (0..256).map(|_| if r.random_bool(0.05) { 255 } else { pick(&mut r) }).collect();
    // predictions agree with the label most of the time
    let pred: Vec<u8> = gt
        .iter()
        .map(|&g| if g != 255 && r.random_bool(0.6) { g } else { r.random_range(0..6u8) })
        .collect();
    (pred, gt)
}

/// Cell bounds by explicit comparison: `x0 + c·cell ≤ x < x0 + (c+1)·cell`.
pub fn in_cell(p: &Point, x0: f64, y0: f64, cell: f64, r: usize, c: usize) -> bool {
    let (xl, yl) = (x0 + c as f64 * cell, y0 + r as f64 * cell);
    p.x >= xl && p.x < xl + cell && p.y >= yl && p.y < yl + cell
}

/// A seconds-long experiment: 32 px tiles, a one-layer 16-dim transformer,
/// 12/4/4 tiles and two epochs, with the dataset under `dir`.
pub fn tiny_experiment(dir: &std::path::Path) -> rgbh::config::ExperimentConfig {
    let mut cfg = rgbh::config::ExperimentConfig::default();
    cfg.data.dir = dir.join("data");
    cfg.data.train = 12;
    cfg.data.val = 4;
    cfg.data.test = 4;
    cfg.data.scene.tile_size = 32;
    cfg.data.scene.regions = (2, 4);
    cfg.data.scene.region_half_size = (3, 8);
    cfg.model.image_size = 32;
    cfg.model.transformer = rgbh::transformer::TransformerConfig {
        dim: 16,
        heads: 2,
        mlp_ratio: 2.0,
        patch: 8,
        depth: 1,
    };
    cfg.model.conv = rgbh::conv::ConvConfig { widths: vec![4, 8] };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    cfg.train.eval_batch_size = 4;
    cfg.train.crop_pad = 2;
    cfg.run.out_dir = dir.join("runs");
    cfg.matrix.out_dir = dir.join("matrix");
    cfg.validate().unwrap();
    cfg
}

/// Generates and writes the configured dataset.
pub fn write_dataset(cfg: &rgbh::config::ExperimentConfig) -> rgbh::dataset::Dataset {
    let ds = rgbh::dataset::Dataset::generate(cfg.data.seed, &cfg.data.scene, cfg.data.counts()).unwrap();
    ds.write(&cfg.data.dir).unwrap();
    ds
}

pub mod grad;
pub mod identities;
pub mod scenes;
