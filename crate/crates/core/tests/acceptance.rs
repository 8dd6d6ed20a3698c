//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! fails. Numeric arguments select a subset, e.g. `-- 2 4`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::grad::{check_model, check_op, model_cases, op_cases, Worst};
use common::identities::{cross_vs_self_attention, late_without_height, timf_dense_error, zero_layer, TIMF_CASES};
use common::scenes::{oracle_grid, oracle_labels, pt, random_cloud, scene, scene_ndsm_violation, GROUND};
use common::{oracle_scores, random_label_pair, rng};
use rand::seq::SliceRandom;
use rand::Rng;
use rgbh::config::ExperimentConfig;
use rgbh::datagen::Split;
use rgbh::dataset::Dataset;
use rgbh::fusion::{Backbone, ParadigmKind};
use rgbh::harness;
use rgbh::metrics::{ConfusionMatrix, MetricsReport};
use rgbh::ndsm::{self, GridSpec, PipelineConfig, RasterGrid, NODATA};
use rgbh::pointcloud::PointCloud;
use rgbh::stats::GroupKey;
use rgbh_tensor::{Element, Tape};

struct Verdict {
    pass: bool,
    detail: String,
}

type Check = (u32, &'static str, fn() -> Verdict);

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn gradients() -> Verdict {
    let budget = Duration::from_secs(300);
    let t = Instant::now();
    let mut worst = Worst::default();
    let mut failed = Vec::new();
    let mut record = |name: String, w: Worst| {
        worst.f64 = worst.f64.max(w.f64);
        worst.f32 = worst.f32.max(w.f32);
        if !w.passes() {
            failed.push(format!("{name} (f64 {:.1e}, f32 {:.1e})", w.f64, w.f32));
        }
    };
    for case in op_cases() {
        record(case.name.to_string(), check_op(&case, 10));
    }
    for (kind, backbone) in model_cases() {
        record(format!("{kind}/{backbone:?}"), check_model(kind, backbone, 10, 3));
    }
    let elapsed = t.elapsed();
    let detail = format!(
        "worst relative error f64 {:.2e}, f32 {:.2e} in {:.0}s{}",
        worst.f64,
        worst.f32,
        elapsed.as_secs_f64(),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
    );
    verdict(failed.is_empty() && elapsed < budget, detail)
}

/// Largest `|Σ p − 1|` over the attention rows of one random configuration.
fn attention_row_error<T: Element>(r: &mut rand_chacha::ChaCha8Rng) -> (f64, bool) {
    let (b, nq, nk) = (r.random_range(1..=3), r.random_range(1..=8), r.random_range(1..=8));
    let (heads, dh) = (r.random_range(1..=4), r.random_range(1..=8));
    let d = heads * dh;
    let scale = 10f64.powf(r.random_range(-1.0..1.5));
    let mut tape = Tape::<T>::new();
    let mut draw = |n: usize, s: f64| {
        let t = common::random_tensor(&[b, n, d], s, r);
        tape.constant(t.cast())
    };
    let (q, k, v) = (draw(nq, scale), draw(nk, scale), draw(nk, 1.0));
    let a = tape.attention(q, k, v, heads).unwrap();
    let probs = tape.attention_probs(a).unwrap();
    assert_eq!(probs.len(), b * heads * nq * nk);
    let mut worst = 0.0f64;
    let mut in_range = true;
    for row in probs.chunks(nk) {
        let s: f64 = row.iter().map(|p| p.as_f64()).sum();
        worst = worst.max((s - 1.0).abs());
        in_range &= row.iter().all(|p| (0.0..=1.0).contains(&p.as_f64()));
    }
    (worst, in_range)
}

fn attention_rows() -> Verdict {
    let mut r = rng(2024);
    let (mut w64, mut w32, mut in_range) = (0.0f64, 0.0f64, true);
    for i in 0..1000 {
        let (e, ok) = if i % 2 == 0 { attention_row_error::<f64>(&mut r) } else { attention_row_error::<f32>(&mut r) };
        if i % 2 == 0 {
            w64 = w64.max(e);
        } else {
            w32 = w32.max(e);
        }
        in_range &= ok;
    }
    verdict(
        w64 <= 1e-6 && w32 <= 1e-6 && in_range,
        format!("1000 configurations, worst |row sum - 1| f64 {w64:.1e}, f32 {w32:.1e}"),
    )
}

fn metrics() -> Verdict {
    let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..100).map(random_label_pair).collect();
    let mut mismatches = 0;
    let mut single = ConfusionMatrix::new(6);
    for (pred, gt) in &pairs {
        let mut cm = ConfusionMatrix::new(6);
        cm.update(pred, gt, 255).unwrap();
        single.update(pred, gt, 255).unwrap();
        let got = MetricsReport::from_confusion(&cm);
        let want = oracle_scores(pred, gt, 6, 255);
        if got.iou != want.iou || got.acc != want.acc || got.miou != want.miou || got.macc != want.macc {
            mismatches += 1;
        }
    }
    let whole = MetricsReport::from_confusion(&single);
    // random shardings: each pair cut at a random pixel, pieces dealt to
    // a random number of shards and merged in shuffled order
    let mut r = rng(33);
    let mut bad_merges = 0;
    for _ in 0..20 {
        let n = r.random_range(2..=9);
        let mut shards: Vec<ConfusionMatrix> = (0..n).map(|_| ConfusionMatrix::new(6)).collect();
        for (pred, gt) in &pairs {
            let cut = r.random_range(0..=pred.len());
            for (lo, hi) in [(0, cut), (cut, pred.len())] {
                let s = r.random_range(0..n);
                shards[s].update(&pred[lo..hi], &gt[lo..hi], 255).unwrap();
            }
        }
        shards.shuffle(&mut r);
        let merged = shards.iter().fold(ConfusionMatrix::new(6), |acc, s| acc.merge(s).unwrap());
        if merged != single || MetricsReport::from_confusion(&merged) != whole {
            bad_merges += 1;
        }
    }
    verdict(
        mismatches == 0 && bad_merges == 0,
        format!("{mismatches}/100 pairs differ from the oracle, {bad_merges}/20 shardings differ from a single pass"),
    )
}

fn identities() -> Verdict {
    let mut problems = Vec::new();
    for (dim, heads) in [(8, 2), (12, 3), (16, 4)] {
        let (x, y) = zero_layer(dim, heads, dim as u64);
        if x != y {
            problems.push(format!("zero layer d={dim}"));
        }
    }
    for backbone in [Backbone::Transformer, Backbone::Conv] {
        for seed in 0..3 {
            let (late, single) = late_without_height(backbone, seed);
            if late != single {
                problems.push(format!("late {backbone:?} seed {seed}"));
            }
        }
    }
    let cross = (0..10).map(cross_vs_self_attention).fold(0.0, f64::max);
    if cross >= 1e-6 {
        problems.push(format!("cross {cross:.1e}"));
    }
    let timf = TIMF_CASES
        .iter()
        .flat_map(|&(nr, nh)| (0..5).map(move |s| timf_dense_error(nr, nh, s)))
        .fold(0.0, f64::max);
    if timf >= 1e-6 {
        problems.push(format!("TIMF {timf:.1e}"));
    }
    let detail = format!("zero-weight layers and zeroed late tower exact; cross vs self-attention {cross:.1e}; TIMF vs dense {timf:.1e}");
    if problems.is_empty() {
        verdict(true, detail)
    } else {
        verdict(false, format!("{detail}; failing: {}", problems.join(", ")))
    }
}

fn ndsm_checks() -> Verdict {
    let mut problems = Vec::new();
    let (pc, spec) = scene();
    let dsm = ndsm::rasterize_dsm(&pc, &spec).unwrap();
    let dtm = ndsm::rasterize_dtm(&pc, &spec, GROUND).unwrap();
    if let Some(p) = scene_ndsm_violation(&ndsm::derive_ndsm(&dsm, &dtm).unwrap()) {
        problems.push(format!("scene: {p}"));
    }
    // the full pipeline, with a corner point pinning the grid origin
    let mut points = pc.points.clone();
    points.push(pt(0.0, 0.0, 2.0, GROUND));
    let cfg = PipelineConfig {
        cell_size: 0.5,
        ..PipelineConfig::default()
    };
    let out = ndsm::run_pipeline(&PointCloud::new(points).unwrap(), &cfg).unwrap();
    let inner = RasterGrid {
        spec,
        values: (0..40).flat_map(|r| (0..40).map(move |c| (r, c))).map(|(r, c)| out.ndsm.get(r, c)).collect(),
        nodata: NODATA,
    };
    if let Some(p) = scene_ndsm_violation(&inner) {
        problems.push(format!("pipeline: {p}"));
    }
    let mut negative = out.ndsm.values.iter().filter(|&&v| v < 0.0).count();

    let grid = GridSpec::new(0.0, 0.0, 0.5, 20, 20).unwrap();
    for seed in 0..10 {
        let pc = random_cloud(seed);
        if ndsm::dsm_raw(&pc, &grid).unwrap().values != oracle_grid(&pc, &grid, |_| true, |a, b| a > b) {
            problems.push(format!("dsm seed {seed}"));
        }
        if ndsm::dtm_raw(&pc, &grid, GROUND).unwrap().values != oracle_grid(&pc, &grid, |p| p.class == GROUND, |a, b| a < b) {
            problems.push(format!("dtm seed {seed}"));
        }
        if ndsm::rasterize_labels(&pc, &grid).unwrap().labels != oracle_labels(&pc, &grid) {
            problems.push(format!("labels seed {seed}"));
        }
        let n = ndsm::derive_ndsm(
            &ndsm::rasterize_dsm(&pc, &grid).unwrap(),
            &ndsm::rasterize_dtm(&pc, &grid, GROUND).unwrap(),
        )
        .unwrap();
        negative += n.values.iter().filter(|&&v| v < 0.0).count();
    }
    if negative > 0 {
        problems.push(format!("{negative} negative cells"));
    }
    let detail = "box exactly 10 m, open ground 0, no negative cells, 10 clouds of 1000 points binned like the oracle";
    if problems.is_empty() {
        verdict(true, detail)
    } else {
        verdict(false, format!("failing: {}", problems.join(", ")))
    }
}

/// Largest pairwise total-variation distance between city class shares
/// above which the cities count as differently distributed.
const CITY_TV_THRESHOLD: f64 = 0.05;

fn statistics(ds: &Dataset) -> Verdict {
    let s = harness::dataset_stats(ds, 0.5, GroupKey::City).unwrap();
    let lt = &s.long_tail;
    verdict(
        lt.long_tailed && s.max_total_variation > CITY_TV_THRESHOLD && s.class_distribution.len() > 1,
        format!(
            "height mean {:.2} m, median {:.2} m, skewness {:.2}, long-tailed {}; {} cities, max TV {:.3}, chi² {:.0}",
            lt.mean,
            lt.median,
            lt.skewness,
            lt.long_tailed,
            s.class_distribution.len(),
            s.max_total_variation,
            s.chi_squared
        ),
    )
}

fn fusion_ordering(cfg: &ExperimentConfig, ds: &Dataset) -> Verdict {
    use ParadigmKind::*;
    let budget = Duration::from_secs(45 * 60);
    let t = Instant::now();
    let threads = cfg.threads().unwrap();
    let report = harness::run_matrix(cfg, ds, threads, |run| {
        println!(
            "    {} seed {}: test mIoU {:.4} ({:.0}s)",
            run.kind,
            run.seed,
            run.report.metrics.miou.unwrap_or(f64::NAN),
            t.elapsed().as_secs_f64()
        );
        Ok(())
    })
    .unwrap();
    let elapsed = t.elapsed();
    let mean = |k| report.seed_mean(k).unwrap_or(f64::NAN);
    let baseline = mean(SingleRgb).max(mean(SingleHeight));
    let fused = [Early, Late, Cross, Intermediary];
    let mut problems = Vec::new();
    for k in fused {
        if !(mean(k) >= baseline + 0.05) {
            problems.push(format!("{k} {:.4} < best single {:.4} + 0.05", mean(k), baseline));
        }
    }
    for k in [Early, Late, Cross] {
        if !(mean(Intermediary) >= mean(k) - 0.01) {
            problems.push(format!("intermediary {:.4} < {k} {:.4} - 0.01", mean(Intermediary), mean(k)));
        }
    }
    if elapsed >= budget {
        problems.push(format!("took {:.0}s", elapsed.as_secs_f64()));
    }
    let means: Vec<String> = [SingleRgb, SingleHeight, Early, Late, Cross, Intermediary]
        .iter()
        .map(|&k| format!("{k} {:.4}", mean(k)))
        .collect();
    let mut detail = format!("seed-mean mIoU: {} ({:.0}s, {threads} thread(s))", means.join(", "), elapsed.as_secs_f64());
    if !problems.is_empty() {
        detail = format!("{detail}; failing: {}", problems.join("; "));
    }
    verdict(problems.is_empty(), detail)
}

fn determinism(cfg: &ExperimentConfig) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::load(&cfg.data.dir).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let art = harness::train_command(cfg, &out, |_| {}).unwrap();
        let stem = out.join("eval");
        harness::evaluate_command(&art.checkpoint, &ds, Split::Test, cfg.train.eval_batch_size, Some(&stem)).unwrap();
        [
            std::fs::read(&art.checkpoint).unwrap(),
            std::fs::read(&art.log_path).unwrap(),
            std::fs::read(stem.with_extension("json")).unwrap(),
            std::fs::read(stem.with_extension("csv")).unwrap(),
        ]
    };
    let t = Instant::now();
    let (a, b) = (run("a"), run("b"));
    let same = a == b;
    verdict(
        same,
        format!(
            "{} seed {}: checkpoint, training log and evaluation report {} ({:.0}s)",
            cfg.run.paradigm,
            cfg.run.seed,
            if same { "byte-identical across two runs" } else { "differ between runs" },
            t.elapsed().as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut all_pass = true;
    let mut report = |n: u32, name: &str, v: Verdict| {
        all_pass &= v.pass;
        println!("criterion {n} {name:<22} {}  {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };

    let fast: [Check; 5] = [
        (1, "gradients", gradients),
        (2, "attention rows", attention_rows),
        (3, "metrics", metrics),
        (4, "structural identities", identities),
        (6, "nDSM", ndsm_checks),
    ];
    for (n, name, f) in fast {
        if wanted(n) {
            report(n, name, f());
        }
    }

    if wanted(5) || wanted(7) || wanted(8) {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.data.dir = dir.path().join("data");
        cfg.run.out_dir = dir.path().join("runs");
        cfg.matrix.out_dir = dir.path().join("matrix");
        let ds = Dataset::generate(cfg.data.seed, &cfg.data.scene, cfg.data.counts()).unwrap();
        ds.write(&cfg.data.dir).unwrap();
        if wanted(7) {
            report(7, "statistics", statistics(&ds));
        }
        if wanted(5) {
            report(5, "fusion ordering", fusion_ordering(&cfg, &ds));
        }
        if wanted(8) {
            report(8, "determinism", determinism(&cfg));
        }
    }

    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
