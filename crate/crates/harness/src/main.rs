use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use drd_core::data::{
    generate_synthetic, isprs_colors_to_labels, load_dataset, read_image, write_dataset, DatasetLayout, PadMode,
    ShapeFamily, SyntheticSpec, TileSpec, DEFAULT_IGNORE_INDEX,
};
use drd_core::models::{build_model, model_report, FlopConvention, ModelSpec};
use drd_harness::artifacts::{self, create_run_dir, find_records, load_checkpoint, load_record, save_last_good, save_outcome};
use drd_harness::config::ExperimentConfig;
use drd_harness::evaluate::evaluate_model;
use drd_harness::report::plot_report;
use drd_harness::train::{distill, load_data, train_student_baseline, train_teacher, Aborted, TrainOutcome};

#[derive(Parser)]
#[command(name = "drd", version, about = "Relation distillation for semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Rects,
    Blobs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    Macs,
    TwiceMacs,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher with cross-entropy.
    TrainTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Train the student against a frozen teacher checkpoint.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "baseline")]
        teacher: Option<PathBuf>,
        /// Cross-entropy only, no teacher.
        #[arg(long)]
        baseline: bool,
        #[arg(long, default_value = "runs")]
        runs_dir: PathBuf,
    },
    /// Tiled evaluation of a checkpoint on a folder-pairs dataset.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 600)]
        tile: usize,
        #[arg(long, default_value_t = 500)]
        stride: usize,
        #[arg(long, default_value_t = DEFAULT_IGNORE_INDEX)]
        ignore_index: u8,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Parameter and FLOP counts of a named architecture, as JSON.
    ModelReport {
        #[arg(long)]
        spec: String,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [512, 1024])]
        hw: Vec<usize>,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, value_enum, default_value_t = Convention::Macs)]
        convention: Convention,
    },
    /// Write a synthetic dataset as `out/train` and `out/val`.
    GenSynthetic {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, value_enum, default_value_t = Family::Rects)]
        family: Family,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plots and a snapshot table over run directories.
    Plot {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert colour-coded aerial label PNGs to single-band class indices.
    ConvertIsprs {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_IGNORE_INDEX)]
        ignore_index: u8,
    },
    /// Print the default small-scale configuration as TOML.
    InitConfig {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn finish(result: std::result::Result<TrainOutcome, Aborted>, spec: &ModelSpec, seed: u64, dir: &Path) -> Result<()> {
    match result {
        Ok(out) => {
            save_outcome(&out, seed, dir)?;
            println!("{}", serde_json::to_string_pretty(&out.record.final_metrics)?);
            eprintln!("run written to {}", dir.display());
            Ok(())
        }
        Err(aborted) => {
            let path = save_last_good(&aborted, spec, seed, dir).context("saving last good parameters")?;
            eprintln!("last good parameters saved to {}", path.display());
            Err(aborted.error)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainTeacher { config, runs_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = load_data(&cfg)?;
            let dir = create_run_dir(&runs_dir, &format!("{}-teacher", cfg.name))?;
            finish(train_teacher(&cfg, &data), &cfg.teacher, cfg.seed, &dir)
        }
        Command::Distill {
            config,
            teacher,
            baseline,
            runs_dir,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = load_data(&cfg)?;
            if baseline {
                let dir = create_run_dir(&runs_dir, &format!("{}-baseline", cfg.name))?;
                return finish(train_student_baseline(&cfg, &data), &cfg.student, cfg.seed, &dir);
            }
            let path = teacher.expect("clap requires --teacher without --baseline");
            let (mut t, _) = load_checkpoint(&path)?;
            if t.spec().backbone != cfg.teacher.backbone || t.num_classes() != cfg.num_classes() {
                bail!("teacher checkpoint {} does not match the configured teacher", path.display());
            }
            let dir = create_run_dir(&runs_dir, &format!("{}-distill", cfg.name))?;
            finish(distill(&cfg, &data, &mut t), &cfg.student, cfg.seed, &dir)
        }
        Command::Evaluate {
            ckpt,
            data,
            tile,
            stride,
            ignore_index,
            oracle,
        } => {
            let (mut model, _) = load_checkpoint(&ckpt)?;
            let ds = load_dataset(&data, DatasetLayout::FolderPairs, model.num_classes(), ignore_index)?;
            let spec = TileSpec::square(tile, stride, PadMode::Reflect)?;
            let report = evaluate_model(&mut model, &ds, &spec, oracle)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::ModelReport {
            spec,
            hw,
            classes,
            convention,
        } => {
            let s = ModelSpec::from_name(&spec, classes)?;
            let mut model = build_model(&s, 0)?;
            let conv = match convention {
                Convention::Macs => FlopConvention::Macs,
                Convention::TwiceMacs => FlopConvention::TwiceMacs,
            };
            let report = model_report(&mut model, hw[0], hw[1], conv)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::GenSynthetic {
            seed,
            classes,
            size,
            count,
            family,
            out,
        } => {
            let d = generate_synthetic(&SyntheticSpec {
                num_images: count,
                size: (size, size),
                num_classes: classes,
                shape_family: match family {
                    Family::Rects => ShapeFamily::Rects,
                    Family::Blobs => ShapeFamily::Blobs,
                },
                seed,
            })?;
            write_dataset(&d.train, &out.join("train"))?;
            write_dataset(&d.val, &out.join("val"))?;
            eprintln!("{} train and {} val images written to {}", d.train.len(), d.val.len(), out.display());
            Ok(())
        }
        Command::Plot { runs, out } => {
            let mut records = Vec::new();
            for r in &runs {
                let found = find_records(r)?;
                if found.is_empty() {
                    bail!("no {} under {}", artifacts::RECORD_FILE, r.display());
                }
                for p in found {
                    records.push(load_record(&p)?);
                }
            }
            let files = plot_report(&records, &out)?;
            eprintln!("{files:#?}");
            Ok(())
        }
        Command::ConvertIsprs {
            input,
            out,
            ignore_index,
        } => {
            std::fs::create_dir_all(&out)?;
            let mut entries: Vec<_> = std::fs::read_dir(&input)
                .with_context(|| format!("reading {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("tif")))
                .collect();
            entries.sort();
            for p in &entries {
                let mask = isprs_colors_to_labels(&read_image(p)?, ignore_index).with_context(|| p.display().to_string())?;
                let (h, w) = (mask.height() as u32, mask.width() as u32);
                let target = out.join(p.with_extension("png").file_name().expect("file has a name"));
                image::GrayImage::from_raw(w, h, mask.data().iter().copied().collect())
                    .expect("buffer matches dims")
                    .save(&target)
                    .with_context(|| format!("writing {}", target.display()))?;
            }
            eprintln!("{} label rasters converted", entries.len());
            Ok(())
        }
        Command::InitConfig { seed } => {
            print!("{}", ExperimentConfig::desk(seed).to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
