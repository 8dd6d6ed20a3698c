//! Experiment runner: training runs with checkpoints, evaluation reports,
//! the paradigm comparison matrix and dataset statistics.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rgbh_tensor::params::{decode_archive, encode_archive};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::datagen::{Split, CLASS_NAMES};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fusion::{ParadigmKind, ParadigmSpec};
use crate::metrics::{fmt_opt, mean_present, MetricsReport};
use crate::segnet::{init_params, ModelConfig, SegModel};
use crate::stats::{self, ClassShare, GroupKey, Histogram, LongTailReport};
use crate::train::{self, EpochLog, TrainLog};

pub const CHECKPOINT_FORMAT: &str = "rgbh-checkpoint-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub paradigm: ParadigmKind,
    pub seed: u64,
    pub model: ModelConfig,
    pub dataset_hash: String,
    pub best_epoch: Option<usize>,
    pub best_val_miou: Option<f64>,
}

pub struct RunOutcome {
    pub model: SegModel<f32>,
    pub log: TrainLog,
    pub meta: CheckpointMeta,
}

/// Trains one paradigm on the train split, selecting on the val split.
pub fn train_model(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    kind: ParadigmKind,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<RunOutcome> {
    if ds.manifest.spec.tile_size != cfg.model.image_size {
        return Err(Error::ConfigInvalid(format!(
            "dataset tiles are {} px, model expects {}",
            ds.manifest.spec.tile_size, cfg.model.image_size
        )));
    }
    let mut model = SegModel::new(kind, cfg.model.clone(), seed)?;
    let log = train::train(&mut model, &ds.split(Split::Train), &ds.split(Split::Val), &cfg.train, seed, on_epoch)?;
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        paradigm: kind,
        seed,
        model: cfg.model.clone(),
        dataset_hash: ds.manifest.spec_hash.clone(),
        best_epoch: log.best_epoch,
        best_val_miou: log.best_val_miou,
    };
    Ok(RunOutcome { model, log, meta })
}

pub fn encode_checkpoint(model: &SegModel<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    Ok(encode_archive(&model.params, serde_json::to_value(meta)?))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &SegModel<f32>, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model, meta)?).map_err(|e| Error::io(path, e))
}

/// Decodes a checkpoint and checks its tensors against the parameter set
/// its recorded paradigm and model config would create.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(SegModel<f32>, CheckpointMeta)> {
    let corrupt = |m: String| Error::CheckpointCorrupt(m);
    let (params, manifest) = decode_archive::<f32>(bytes).map_err(|e| corrupt(e.to_string()))?;
    let meta: CheckpointMeta = serde_json::from_value(manifest.meta).map_err(|e| corrupt(format!("metadata: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(corrupt(format!("unknown format `{}`", meta.format)));
    }
    meta.model.validate().map_err(|e| corrupt(e.to_string()))?;
    let spec = ParadigmSpec::new(meta.paradigm, meta.model.backbone).map_err(|e| corrupt(e.to_string()))?;
    let expected = init_params::<f32>(spec, &meta.model, 0)?;
    if expected.len() != params.len() {
        return Err(corrupt(format!("{} tensors, expected {}", params.len(), expected.len())));
    }
    for (name, t) in expected.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {
                if !p.all_finite() {
                    return Err(corrupt(format!("{name} holds non-finite values")));
                }
            }
            Some(p) => return Err(corrupt(format!("{name} has shape {:?}, expected {:?}", p.shape(), t.shape()))),
            None => return Err(corrupt(format!("missing tensor {name}"))),
        }
    }
    let model = SegModel {
        spec,
        config: meta.model.clone(),
        params,
    };
    Ok((model, meta))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(SegModel<f32>, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

pub fn checkpoint_name(kind: ParadigmKind, seed: u64) -> String {
    format!("{}-s{seed}", kind.key())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub meta: CheckpointMeta,
    pub log: TrainLog,
}

pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub record: TrainRecord,
}

/// `train` command: loads the configured dataset, trains `cfg.run` and
/// writes `<paradigm>-s<seed>.fbta` and its `.log.json` into `out_dir`.
pub fn train_command(cfg: &ExperimentConfig, out_dir: &Path, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let ds = Dataset::load(&cfg.data.dir)?;
    let out = train_model(cfg, &ds, cfg.run.paradigm, cfg.run.seed, on_epoch)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = checkpoint_name(cfg.run.paradigm, cfg.run.seed);
    let checkpoint = out_dir.join(format!("{stem}.fbta"));
    save_checkpoint(&checkpoint, &out.model, &out.meta)?;
    let record = TrainRecord {
        meta: out.meta,
        log: out.log,
    };
    let log_path = out_dir.join(format!("{stem}.log.json"));
    write_json(&log_path, &record)?;
    Ok(TrainArtifacts {
        checkpoint,
        log_path,
        record,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub paradigm: ParadigmKind,
    pub seed: u64,
    pub split: Split,
    pub tiles: usize,
    pub dataset_hash: String,
    pub metrics: MetricsReport,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Header and one row: per-class IoU, mIoU, mAcc.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.metrics.csv_header(), self.metrics.csv_row())
    }
}

pub fn evaluate_model(model: &SegModel<f32>, seed: u64, ds: &Dataset, split: Split, batch_size: usize) -> Result<EvaluationReport> {
    let tiles = ds.split(split);
    if tiles.is_empty() {
        return Err(Error::InvalidArgument(format!("split {} is empty", split.name())));
    }
    let metrics = train::evaluate_tiles(model, &tiles, batch_size)?;
    Ok(EvaluationReport {
        paradigm: model.spec.kind,
        seed,
        split,
        tiles: tiles.len(),
        dataset_hash: ds.manifest.spec_hash.clone(),
        metrics,
    })
}

/// `evaluate` command; writes `<out_stem>.json` and `<out_stem>.csv` when
/// a stem is given.
pub fn evaluate_command(checkpoint: &Path, ds: &Dataset, split: Split, batch_size: usize, out_stem: Option<&Path>) -> Result<EvaluationReport> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let report = evaluate_model(&model, meta.seed, ds, split, batch_size)?;
    if let Some(stem) = out_stem {
        write_text(&stem.with_extension("json"), &report.to_json())?;
        write_text(&stem.with_extension("csv"), &report.to_csv())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub paradigm: ParadigmKind,
    /// `None` on the seed-mean row.
    pub seed: Option<u64>,
    pub iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub macc: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl MatrixRow {
    fn from_report(r: &EvaluationReport, best_epoch: Option<usize>) -> Self {
        Self {
            paradigm: r.paradigm,
            seed: Some(r.seed),
            iou: r.metrics.iou.clone(),
            miou: r.metrics.miou,
            macc: r.metrics.macc,
            best_epoch,
        }
    }

    fn mean_of(kind: ParadigmKind, rows: &[MatrixRow]) -> Self {
        let classes = rows.first().map_or(0, |r| r.iou.len());
        let iou = (0..classes)
            .map(|c| mean_present(&rows.iter().map(|r| r.iou[c]).collect::<Vec<_>>()))
            .collect();
        Self {
            paradigm: kind,
            seed: None,
            iou,
            miou: mean_present(&rows.iter().map(|r| r.miou).collect::<Vec<_>>()),
            macc: mean_present(&rows.iter().map(|r| r.macc).collect::<Vec<_>>()),
            best_epoch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub classes: Vec<String>,
    pub dataset_hash: String,
    pub split: Split,
    pub rows: Vec<MatrixRow>,
}

impl MatrixReport {
    pub fn seed_mean(&self, kind: ParadigmKind) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.paradigm == kind && r.seed.is_none())
            .and_then(|r| r.miou)
    }

    fn header(&self) -> Vec<String> {
        let mut h = vec!["Paradigm".to_string(), "Seed".to_string()];
        h.extend(self.classes.iter().cloned());
        h.push("mIoU".into());
        h.push("mAcc".into());
        h
    }

    fn cells(row: &MatrixRow) -> Vec<String> {
        let mut c = vec![
            row.paradigm.label().to_string(),
            row.seed.map_or_else(|| "mean".to_string(), |s| s.to_string()),
        ];
        c.extend(row.iou.iter().map(|v| fmt_opt(*v)));
        c.push(fmt_opt(row.miou));
        c.push(fmt_opt(row.macc));
        c
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&Self::cells(r).join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let header = self.header();
        let mut out = format!("| {} |\n", header.join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
        for r in &self.rows {
            out.push_str(&format!("| {} |\n", Self::cells(r).join(" | ")));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One finished matrix cell, handed to the progress callback.
pub struct MatrixRun<'a> {
    pub kind: ParadigmKind,
    pub seed: u64,
    pub outcome: &'a RunOutcome,
    pub report: &'a EvaluationReport,
}

/// Trains and tests every (paradigm, seed) pair on up to `threads`
/// threads. Rows follow the declared paradigm order, seeds in the given
/// order, each paradigm closed by its seed-mean row. Every run owns its
/// model and RNG streams, so the table does not depend on `threads`.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    threads: usize,
    on_run: impl Fn(&MatrixRun<'_>) -> Result<()> + Sync,
) -> Result<MatrixReport> {
    cfg.validate()?;
    let mut kinds = cfg.matrix.paradigms.clone();
    kinds.sort();
    kinds.dedup();
    let jobs: Vec<(ParadigmKind, u64)> = kinds
        .iter()
        .flat_map(|&k| cfg.matrix.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results: Mutex<Vec<Option<Result<MatrixRow>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(kind, seed)) = jobs.get(i) else { break };
        let row = train_model(cfg, ds, kind, seed, |_| {}).and_then(|outcome| {
            let report = evaluate_model(&outcome.model, seed, ds, Split::Test, cfg.train.eval_batch_size)?;
            on_run(&MatrixRun {
                kind,
                seed,
                outcome: &outcome,
                report: &report,
            })?;
            Ok(MatrixRow::from_report(&report, outcome.log.best_epoch))
        });
        results.lock().expect("no poisoned lock")[i] = Some(row);
    };
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(work);
        }
    });
    let results = results.into_inner().expect("no poisoned lock");
    let mut rows = Vec::with_capacity(jobs.len() + kinds.len());
    let mut per_kind: Vec<MatrixRow> = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let row = r.expect("every job ran")?;
        per_kind.push(row);
        let last_of_kind = jobs.get(i + 1).is_none_or(|j| j.0 != jobs[i].0);
        if last_of_kind {
            let mean = MatrixRow::mean_of(jobs[i].0, &per_kind);
            rows.append(&mut per_kind);
            rows.push(mean);
        }
    }
    Ok(MatrixReport {
        classes: CLASS_NAMES[..cfg.model.classes.min(CLASS_NAMES.len())]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        dataset_hash: ds.manifest.spec_hash.clone(),
        split: Split::Test,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub tiles: usize,
    pub histogram: Histogram,
    pub long_tail: LongTailReport,
    pub group_key: GroupKey,
    pub class_distribution: BTreeMap<String, ClassShare>,
    pub chi_squared: f64,
    /// Largest class-distribution distance between two groups.
    pub max_total_variation: f64,
    pub tile_size: usize,
    /// Row-major per-pixel mean height over all tiles.
    pub mean_map: Vec<f64>,
}

pub fn dataset_stats(ds: &Dataset, bin_width: f64, group: GroupKey) -> Result<DatasetStats> {
    let heights = || ds.tiles.iter().map(|t| t.sample.height.data());
    let histogram = stats::height_histogram(heights(), bin_width)?;
    let long_tail = stats::long_tail_report(&histogram)?;
    let names: Vec<String> = ds
        .tiles
        .iter()
        .map(|t| match group {
            GroupKey::Split => t.split.name().to_string(),
            GroupKey::City => ds.city_name(t.city).to_string(),
        })
        .collect();
    let class_distribution = stats::class_distribution(
        names.iter().zip(&ds.tiles).map(|(n, t)| (n.as_str(), t.sample.labels.as_slice())),
        ds.manifest.spec.colors.len(),
    );
    Ok(DatasetStats {
        tiles: ds.tiles.len(),
        chi_squared: stats::chi_squared(&class_distribution),
        max_total_variation: stats::max_total_variation(&class_distribution),
        histogram,
        long_tail,
        group_key: group,
        class_distribution,
        tile_size: ds.manifest.spec.tile_size,
        mean_map: stats::spatial_mean_map(heights())?,
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
