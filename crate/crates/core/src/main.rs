use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rgbh::config::ExperimentConfig;
use rgbh::datagen::Split;
use rgbh::dataset::Dataset;
use rgbh::fusion::ParadigmKind;
use rgbh::harness::{self, MatrixReport};
use rgbh::ndsm::{self, AlignedRasters};
use rgbh::pointcloud::PointCloud;
use rgbh::stats::{self, GroupKey};
use rgbh::{Error, Result};
use rgbh_tensor::{fbt, Tensor};

#[derive(Parser)]
#[command(name = "rgbh", version, about = "RGB + height fusion segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic RGB/height/label dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Rasterize a point cloud into DSM, DTM, nDSM and label grids.
    DeriveNdsm {
        /// ASCII `x y z class` or PCB1 binary point cloud.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `ndsm.cell_size` (meters).
        #[arg(long)]
        cell_size: Option<f64>,
        /// Also cut nodata-free tiles of this many cells.
        #[arg(long)]
        tile: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Height histogram, long-tail report, class distribution and mean map.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        bin_width: f64,
        #[arg(long, default_value = "city")]
        group: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Writes the spatial mean-height map as a P5 image.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Train one paradigm and save its best-on-validation checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        paradigm: Option<ParadigmKind>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `run.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 25)]
        batch_size: usize,
        /// Writes `<out>.json` and `<out>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and test every configured (paradigm, seed) pair.
    RunMatrix {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `matrix.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a saved matrix as a table.
    Report {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(d) = out {
                cfg.data.dir = d;
            }
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            cfg.validate()?;
            let ds = Dataset::generate(cfg.data.seed, &cfg.data.scene, cfg.data.counts())?;
            ds.write(&cfg.data.dir)?;
            eprintln!("wrote {} tiles to {}", ds.tiles.len(), cfg.data.dir.display());
        }
        Command::DeriveNdsm {
            input,
            out,
            config,
            cell_size,
            tile,
            stride,
        } => {
            let mut pc_cfg = load_config(config.as_deref())?.ndsm;
            if let Some(c) = cell_size {
                pc_cfg.cell_size = c;
            }
            let cloud = PointCloud::read(&input)?;
            let result = ndsm::run_pipeline(&cloud, &pc_cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            result.dsm.write(out.join("dsm.fbt"))?;
            result.dtm.write(out.join("dtm.fbt"))?;
            result.ndsm.write(out.join("ndsm.fbt"))?;
            result.labels.write(out.join("labels.fbt"))?;
            let mut summary = serde_json::json!({
                "points": cloud.len(),
                "points_after_filter": result.filtered.len(),
                "rows": result.ndsm.spec.rows,
                "cols": result.ndsm.spec.cols,
                "cell_size": result.ndsm.spec.cell,
            });
            if let Some(t) = tile {
                let src = AlignedRasters {
                    height: result.ndsm.clone(),
                    labels: result.labels.clone(),
                    rgb: None,
                };
                let set = ndsm::crop_tiles(&src, t, stride.unwrap_or(t))?;
                let dir = out.join("tiles");
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for tl in &set.tiles {
                    let stem = dir.join(format!("r{:05}_c{:05}", tl.row, tl.col));
                    let h = Tensor::<f32>::from_f64(&[1, t, t], &tl.height)?;
                    let l: Vec<f64> = tl.labels.iter().map(|&v| v as f64).collect();
                    fbt::write_file(stem.with_extension("height.fbt"), &h)?;
                    fbt::write_file(stem.with_extension("labels.fbt"), &Tensor::<f32>::from_f64(&[t, t], &l)?)?;
                }
                summary["tiles_kept"] = set.tiles.len().into();
                summary["tiles_considered"] = set.candidates.into();
            }
            harness::write_json(&out.join("summary.json"), &summary)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Stats {
            data,
            bin_width,
            group,
            out,
            pgm,
        } => {
            let group: GroupKey = group.parse()?;
            let ds = Dataset::load(&data)?;
            let st = harness::dataset_stats(&ds, bin_width, group)?;
            if let Some(p) = pgm {
                stats::write_pgm(&p, &st.mean_map, st.tile_size, st.tile_size)?;
            }
            let json = serde_json::to_string_pretty(&st)?;
            match out {
                Some(p) => harness::write_text(&p, &json)?,
                None => println!("{json}"),
            }
            eprintln!(
                "mean {:.3} m, median {:.3} m, skewness {:.3}, long-tailed: {}",
                st.long_tail.mean, st.long_tail.median, st.long_tail.skewness, st.long_tail.long_tailed
            );
        }
        Command::Train {
            config,
            paradigm,
            seed,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(p) = paradigm {
                cfg.run.paradigm = p;
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            let out = out.unwrap_or_else(|| cfg.run.out_dir.clone());
            let art = harness::train_command(&cfg, &out, |e| {
                let val = e.val_miou.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
                eprintln!("epoch {:>3}  loss {:.4}  val mIoU {val}", e.epoch, e.train_loss);
            })?;
            println!("{}", art.checkpoint.display());
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            batch_size,
            out,
        } => {
            let ds = Dataset::load(&data)?;
            let report = harness::evaluate_command(&checkpoint, &ds, split, batch_size, out.as_deref())?;
            print!("{}", report.to_csv());
        }
        Command::RunMatrix { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.matrix.out_dir.clone());
            let ds = Dataset::load(&cfg.data.dir)?;
            let report = harness::run_matrix(&cfg, &ds, cfg.threads()?, |run| {
                let stem = harness::checkpoint_name(run.kind, run.seed);
                std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                harness::save_checkpoint(out.join(format!("{stem}.fbta")), &run.outcome.model, &run.outcome.meta)?;
                harness::write_text(&out.join(format!("{stem}.eval.json")), &run.report.to_json())?;
                eprintln!("{} seed {}: test mIoU {}", run.kind.label(), run.seed, rgbh::metrics::fmt_opt(run.report.metrics.miou));
                Ok(())
            })?;
            harness::write_text(&out.join("matrix.json"), &report.to_json())?;
            harness::write_text(&out.join("matrix.csv"), &report.to_csv())?;
            print!("{}", report.to_markdown());
        }
        Command::Report { matrix, format } => {
            let bytes = std::fs::read(&matrix).map_err(|e| Error::io(&matrix, e))?;
            let report: MatrixReport = serde_json::from_slice(&bytes)?;
            match format {
                Format::Markdown => print!("{}", report.to_markdown()),
                Format::Csv => print!("{}", report.to_csv()),
            }
        }
    }
    Ok(())
}

fn error_json(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json("Usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
