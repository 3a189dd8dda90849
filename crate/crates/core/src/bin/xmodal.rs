use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use xmodal_distill::data::SplitName;
use xmodal_distill::experiment::{self, ExperimentConfig, ExperimentReport};
use xmodal_distill::{Error, Result};

#[derive(Parser)]
#[command(
    name = "xmodal",
    version,
    about = "Cross-modal distillation experiments on synthetic paired data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated seed list.
    #[arg(long)]
    seeds: Option<String>,
    /// Suppress progress and summary output.
    #[arg(long)]
    quiet: bool,
    /// Directory holding split files written by `gen-data`; generated from the config when absent.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Teacher model written by `train-teacher`; trained from the config when absent.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    /// Override any config key, e.g. `--set noise_sigma=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the teacher-train / student-train / test split files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the modality-A teacher and report its accuracy.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised students under label noise.
    SweepNoise {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fractions: Option<String>,
    },
    /// Single-student KL distillation over temperatures.
    SweepTemperature {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        taus: Option<String>,
    },
    /// Student count, mutual learning and ensemble combination.
    SweepStudents {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        students: Option<String>,
        #[arg(long)]
        modes: Option<String>,
    },
    /// KL vs cross-entropy vs cross-entropy with mutual learning.
    CompareLosses {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        taus: Option<String>,
    },
    /// Summarize an existing results.csv.
    Report {
        /// Path to results.csv.
        #[arg(long)]
        input: PathBuf,
        /// Directory for summary.txt; printed only when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
}

fn resolve(common: &Common, extra: &[(&str, &Option<String>)]) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let flags = [
        ("seeds", &common.seeds),
        ("epochs", &common.epochs),
        ("learning_rate", &common.learning_rate),
        ("batch_size", &common.batch_size),
    ];
    for (key, value) in flags.iter().chain(extra) {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn finish(report: &ExperimentReport, out: &Path, quiet: bool) -> Result<()> {
    let (csv, summary) = report.write(out)?;
    if !quiet {
        print!("{}", report.summary());
        eprintln!("wrote {} and {}", csv.display(), summary.display());
    }
    Ok(())
}

fn sweep(
    common: &Common,
    extra: &[(&str, &Option<String>)],
    run: impl Fn(&ExperimentConfig, &experiment::Prepared) -> Result<ExperimentReport>,
) -> Result<()> {
    let cfg = resolve(common, extra)?;
    progress(common.quiet, "preparing dataset and teacher");
    let prepared = experiment::prepare(&cfg, common.dataset.as_deref(), common.teacher.as_deref())?;
    progress(
        common.quiet,
        format!(
            "teacher accuracy on student-train: {:.4}",
            prepared.teacher_acc_student_train
        ),
    );
    let report = run(&cfg, &prepared)?;
    finish(&report, &common.out, common.quiet)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = resolve(&common, &[])?;
            let dataset = experiment::generate_dataset(&cfg.data)?;
            let paths = dataset.write_dir(&common.out)?;
            let config_path = common.out.join("config.txt");
            fs::write(&config_path, cfg.to_text()).map_err(|e| Error::Io {
                path: config_path.clone(),
                source: e,
            })?;
            if !common.quiet {
                for (name, path) in SplitName::ALL.iter().zip(&paths) {
                    println!("{}: {} samples", path.display(), dataset.split(*name).len());
                }
            }
            Ok(())
        }
        Command::TrainTeacher { common } => {
            let cfg = resolve(&common, &[])?;
            let start = Instant::now();
            let prepared =
                experiment::prepare(&cfg, common.dataset.as_deref(), common.teacher.as_deref())?;
            let report = experiment::teacher_report(&prepared, start.elapsed().as_secs_f64());
            fs::create_dir_all(&common.out).map_err(|e| Error::Io {
                path: common.out.clone(),
                source: e,
            })?;
            let model = common.out.join("teacher.model");
            fs::write(&model, prepared.teacher.to_text()).map_err(|e| Error::Io {
                path: model.clone(),
                source: e,
            })?;
            progress(common.quiet, format!("wrote {}", model.display()));
            finish(&report, &common.out, common.quiet)
        }
        Command::SweepNoise { common, fractions } => sweep(
            &common,
            &[("fractions", &fractions)],
            experiment::sweep_noise,
        ),
        Command::SweepTemperature { common, taus } => {
            sweep(&common, &[("taus", &taus)], experiment::sweep_temperature)
        }
        Command::SweepStudents {
            common,
            students,
            modes,
        } => sweep(
            &common,
            &[("students", &students), ("modes", &modes)],
            experiment::sweep_students,
        ),
        Command::CompareLosses { common, taus } => {
            sweep(&common, &[("taus", &taus)], experiment::compare_losses)
        }
        Command::Report { input, out, quiet } => {
            let text = fs::read_to_string(&input).map_err(|e| Error::Io {
                path: input.clone(),
                source: e,
            })?;
            let report = ExperimentReport::from_csv(&text)?;
            let summary = report.summary();
            if let Some(dir) = out {
                fs::create_dir_all(&dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                let path = dir.join("summary.txt");
                fs::write(&path, &summary).map_err(|e| Error::Io { path, source: e })?;
            }
            if !quiet {
                print!("{summary}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
