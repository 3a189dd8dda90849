//! Experiment configuration, sweeps and reporting.
//!
//! A run resolves an [`ExperimentConfig`] (defaults, then an optional
//! `key = value` file, then command-line overrides), prepares a dataset and a
//! frozen teacher, executes the sweep points in parallel and emits rows in a
//! fixed order so `results.csv` is reproducible byte for byte apart from the
//! wall-time column.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::{
    cache_teacher_predictions, generate, inject_label_noise, DatasetSplit, GenConfig, Modality,
    PairedSample, SplitName, TeacherCache,
};
use crate::error::{Error, Result};
use crate::losses::{KlOptions, LossKind, PeerKind, TeacherLoss, DEFAULT_PEER_TAU};
use crate::nn::Mlp;
use crate::trainer::{
    distill_single, evaluate, init_students, mix_seed, student_seed, train_students,
    train_supervised, CombineMode, DistillConfig, Ensemble, TrainHyper, TrainedEnsemble,
};

const NOISE_STREAM: u64 = 0x4E4F_4953;
const TEACHER_STREAM: u64 = 0x5445_4143;

pub const CSV_HEADER: &str = "experiment_id,config_fingerprint,seed,regime,K,tau,loss_kind,combine_mode,noise_fraction,teacher_acc_on_student_train,test_accuracy,wall_time_s";

/// Everything a sweep needs, with defaults for every key.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: GenConfig,
    pub hidden: Vec<usize>,
    pub teacher_epochs: usize,
    pub teacher_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Temperature of the KL teacher term.
    pub tau: f64,
    /// Teacher term used by `sweep-students`.
    pub teacher_loss: TeacherLossName,
    pub peer_tau: f64,
    pub peer_kind: PeerKind,
    pub kl_reversed: bool,
    pub kl_tau_squared: bool,
    pub fractions: Vec<f64>,
    pub taus: Vec<f64>,
    pub students: Vec<usize>,
    pub modes: Vec<CombineMode>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherLossName {
    Kl,
    Ce,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let hyper = TrainHyper::default();
        Self {
            data: GenConfig::default(),
            hidden: vec![32, 32],
            teacher_epochs: hyper.epochs,
            teacher_seed: 0,
            epochs: hyper.epochs,
            batch_size: hyper.batch_size,
            learning_rate: hyper.learning_rate,
            tau: 2.0,
            teacher_loss: TeacherLossName::Kl,
            peer_tau: DEFAULT_PEER_TAU,
            peer_kind: PeerKind::Kl,
            kl_reversed: false,
            kl_tau_squared: false,
            fractions: vec![0.0, 0.1, 0.25, 0.5],
            taus: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0],
            students: vec![1, 2, 3, 4],
            modes: vec![CombineMode::Average, CombineMode::Max],
            seeds: (0..5).collect(),
        }
    }
}

fn parse_list<T>(value: &str, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| {
            parse(v.trim())
                .ok_or_else(|| Error::Config(format!("bad value {v:?} in list for `{key}`")))
        })
        .collect()
}

fn parse_one<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for `{key}`")))
}

fn parse_bool(value: &str, key: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for `{key}`"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "batch_size",
        "classes",
        "data_seed",
        "dim_a",
        "dim_b",
        "epochs",
        "fractions",
        "hidden",
        "kl_reversed",
        "kl_tau_squared",
        "learning_rate",
        "modes",
        "noise_sigma",
        "peer_kind",
        "peer_tau",
        "samples_per_subject_per_class",
        "seeds",
        "students",
        "subject_sigma",
        "subjects",
        "tau",
        "taus",
        "teacher_epochs",
        "teacher_loss",
        "teacher_seed",
        "train_subjects",
    ];

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        match key {
            "classes" => d.classes = parse_one(value, key)?,
            "subjects" => d.subjects = parse_one(value, key)?,
            "train_subjects" => d.train_subjects = parse_one(value, key)?,
            "samples_per_subject_per_class" => {
                d.samples_per_subject_per_class = parse_one(value, key)?
            }
            "dim_a" => d.dim_a = parse_one(value, key)?,
            "dim_b" => d.dim_b = parse_one(value, key)?,
            "noise_sigma" => d.noise_sigma = parse_one(value, key)?,
            "subject_sigma" => d.subject_sigma = parse_one(value, key)?,
            "data_seed" => d.seed = parse_one(value, key)?,
            "hidden" => self.hidden = parse_list(value, key, |v| v.parse().ok())?,
            "teacher_epochs" => self.teacher_epochs = parse_one(value, key)?,
            "teacher_seed" => self.teacher_seed = parse_one(value, key)?,
            "epochs" => self.epochs = parse_one(value, key)?,
            "batch_size" => self.batch_size = parse_one(value, key)?,
            "learning_rate" => self.learning_rate = parse_one(value, key)?,
            "tau" => self.tau = parse_one(value, key)?,
            "teacher_loss" => {
                self.teacher_loss = match value.trim().to_ascii_lowercase().as_str() {
                    "kl" => TeacherLossName::Kl,
                    "ce" => TeacherLossName::Ce,
                    _ => {
                        return Err(Error::Config(format!(
                            "bad value {value:?} for `{key}` (kl or ce)"
                        )))
                    }
                }
            }
            "peer_tau" => self.peer_tau = parse_one(value, key)?,
            "peer_kind" => self.peer_kind = value.parse()?,
            "kl_reversed" => self.kl_reversed = parse_bool(value, key)?,
            "kl_tau_squared" => self.kl_tau_squared = parse_bool(value, key)?,
            "fractions" => self.fractions = parse_list(value, key, |v| v.parse().ok())?,
            "taus" => self.taus = parse_list(value, key, |v| v.parse().ok())?,
            "students" => self.students = parse_list(value, key, |v| v.parse().ok())?,
            "modes" => self.modes = parse_list(value, key, |v| v.parse().ok())?,
            "seeds" => self.seeds = parse_list(value, key, |v| v.parse().ok())?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`",
                    origin.display(),
                    n + 1
                ))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("{}:{}: {e}", origin.display(), n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, path)?;
        Ok(cfg)
    }

    /// Every key with its resolved value, sorted by key.
    pub fn resolved(&self) -> BTreeMap<&'static str, String> {
        let d = &self.data;
        let values = [
            ("batch_size", self.batch_size.to_string()),
            ("classes", d.classes.to_string()),
            ("data_seed", d.seed.to_string()),
            ("dim_a", d.dim_a.to_string()),
            ("dim_b", d.dim_b.to_string()),
            ("epochs", self.epochs.to_string()),
            ("fractions", join(&self.fractions)),
            ("hidden", join(&self.hidden)),
            ("kl_reversed", self.kl_reversed.to_string()),
            ("kl_tau_squared", self.kl_tau_squared.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("modes", join(&self.modes)),
            ("noise_sigma", d.noise_sigma.to_string()),
            ("peer_kind", self.peer_kind.to_string()),
            ("peer_tau", self.peer_tau.to_string()),
            (
                "samples_per_subject_per_class",
                d.samples_per_subject_per_class.to_string(),
            ),
            ("seeds", join(&self.seeds)),
            ("students", join(&self.students)),
            ("subject_sigma", d.subject_sigma.to_string()),
            ("subjects", d.subjects.to_string()),
            ("tau", self.tau.to_string()),
            ("taus", join(&self.taus)),
            ("teacher_epochs", self.teacher_epochs.to_string()),
            (
                "teacher_loss",
                match self.teacher_loss {
                    TeacherLossName::Kl => "kl".to_string(),
                    TeacherLossName::Ce => "ce".to_string(),
                },
            ),
            ("teacher_seed", self.teacher_seed.to_string()),
            ("train_subjects", d.train_subjects.to_string()),
        ];
        values.into_iter().collect()
    }

    pub fn to_text(&self) -> String {
        self.resolved()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.student_hyper(0).validate()?;
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("tau", self.tau)?;
        positive("peer_tau", self.peer_tau)?;
        for &t in &self.taus {
            positive("taus entry", t)?;
        }
        if let Some(f) = self.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
            return Err(Error::Config(format!("noise fraction {f} outside [0, 1]")));
        }
        if self.students.contains(&0) {
            return Err(Error::Config("student counts must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("combine mode list is empty".into()));
        }
        Ok(())
    }

    pub fn teacher_dims(&self) -> Vec<usize> {
        self.dims(self.data.dim_a)
    }

    pub fn student_dims(&self) -> Vec<usize> {
        self.dims(self.data.dim_b)
    }

    fn dims(&self, input: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.data.classes))
            .collect()
    }

    pub fn student_hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed,
        }
    }

    pub fn teacher_hyper(&self) -> TrainHyper {
        TrainHyper {
            epochs: self.teacher_epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.teacher_seed,
        }
    }

    pub fn kl_options(&self) -> KlOptions {
        KlOptions {
            reversed: self.kl_reversed,
            tau_squared: self.kl_tau_squared,
        }
    }

    fn teacher_term(&self) -> TeacherLoss {
        match self.teacher_loss {
            TeacherLossName::Kl => TeacherLoss::Kl { tau: self.tau },
            TeacherLossName::Ce => TeacherLoss::CrossEntropyHard,
        }
    }
}

/// Dataset and frozen teacher shared by every point of a sweep.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: DatasetSplit,
    pub teacher: Mlp,
    /// Teacher logits on the student-train split.
    pub cache: TeacherCache,
    pub teacher_acc_student_train: f64,
    pub teacher_acc_test: f64,
    pub fingerprint: String,
}

pub fn features(samples: &[PairedSample], modality: Modality) -> Vec<&[f64]> {
    samples.iter().map(|s| s.features(modality)).collect()
}

pub fn labels(samples: &[PairedSample]) -> Vec<usize> {
    samples.iter().map(|s| s.label).collect()
}

/// Generates the dataset at file precision so in-memory and on-disk runs agree.
pub fn generate_dataset(cfg: &GenConfig) -> Result<DatasetSplit> {
    quantize(generate(cfg)?)
}

/// Rounds every feature to the precision of the split files.
fn quantize(mut out: DatasetSplit) -> Result<DatasetSplit> {
    for name in SplitName::ALL {
        let samples = match name {
            SplitName::TeacherTrain => &mut out.teacher_train,
            SplitName::StudentTrain => &mut out.student_train,
            SplitName::Test => &mut out.test,
        };
        for s in samples.iter_mut() {
            for v in s.modality_a.iter_mut().chain(s.modality_b.iter_mut()) {
                *v = crate::data::format_sig9(*v)
                    .parse()
                    .map_err(|e| Error::Numeric(format!("cannot reparse feature: {e}")))?;
            }
        }
    }
    Ok(out)
}

/// Trains the modality-A teacher on teacher-train.
pub fn train_teacher(cfg: &ExperimentConfig, dataset: &DatasetSplit) -> Result<Mlp> {
    let mut teacher = Mlp::seeded(
        &cfg.teacher_dims(),
        mix_seed(cfg.teacher_seed, TEACHER_STREAM),
    )?;
    let samples = &dataset.teacher_train;
    train_supervised(
        &mut teacher,
        &features(samples, Modality::A),
        &labels(samples),
        &cfg.teacher_hyper(),
    )?;
    Ok(teacher)
}

fn check_dataset(cfg: &ExperimentConfig, dataset: &DatasetSplit) -> Result<()> {
    if dataset.classes != cfg.data.classes
        || dataset.dim_a != cfg.data.dim_a
        || dataset.dim_b != cfg.data.dim_b
    {
        return Err(Error::Config(format!(
            "dataset has C={} D_a={} D_b={} but config says C={} D_a={} D_b={}",
            dataset.classes,
            dataset.dim_a,
            dataset.dim_b,
            cfg.data.classes,
            cfg.data.dim_a,
            cfg.data.dim_b
        )));
    }
    for name in SplitName::ALL {
        if dataset.split(name).is_empty() {
            return Err(Error::Config(format!(
                "split {} is empty",
                name.file_name()
            )));
        }
    }
    Ok(())
}

/// Loads or generates the dataset, then loads or trains the teacher.
pub fn prepare(
    cfg: &ExperimentConfig,
    dataset_dir: Option<&Path>,
    teacher_file: Option<&Path>,
) -> Result<Prepared> {
    cfg.validate()?;
    let dataset = match dataset_dir {
        Some(dir) => DatasetSplit::read_dir(dir)?,
        None => generate_dataset(&cfg.data)?,
    };
    check_dataset(cfg, &dataset)?;
    let teacher = match teacher_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let net = Mlp::from_text(&text).map_err(|e| e.in_file(path))?;
            if net.dims() != cfg.teacher_dims() {
                return Err(Error::Config(format!(
                    "teacher has layers {:?}, config implies {:?}",
                    net.dims(),
                    cfg.teacher_dims()
                )));
            }
            net
        }
        None => train_teacher(cfg, &dataset)?,
    };
    let cache = cache_teacher_predictions(&teacher, &dataset.student_train)?;
    let teacher_acc_student_train = cache.accuracy(&labels(&dataset.student_train))?;
    let teacher_acc_test = evaluate(
        &teacher,
        &features(&dataset.test, Modality::A),
        &labels(&dataset.test),
    )?;
    let mut hasher = Sha256::new();
    hasher.update(cfg.to_text().as_bytes());
    hasher.update(dataset.fingerprint().as_bytes());
    hasher.update(teacher.to_text().as_bytes());
    let fingerprint = hex::encode(hasher.finalize())[..16].to_string();
    Ok(Prepared {
        dataset,
        teacher,
        cache,
        teacher_acc_student_train,
        teacher_acc_test,
        fingerprint,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub fingerprint: String,
    pub seed: u64,
    pub regime: String,
    pub students: usize,
    pub tau: Option<f64>,
    pub loss_kind: String,
    pub combine_mode: Option<CombineMode>,
    pub noise_fraction: f64,
    pub teacher_acc: Option<f64>,
    pub test_accuracy: f64,
    pub wall_time_s: f64,
}

impl ReportRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{:.3}",
            self.experiment,
            self.fingerprint,
            self.seed,
            self.regime,
            self.students,
            opt(self.tau),
            self.loss_kind,
            self.combine_mode.map(|m| m.to_string()).unwrap_or_default(),
            self.noise_fraction,
            opt(self.teacher_acc),
            self.test_accuracy,
            self.wall_time_s
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let bad = |msg: String| Error::Config(format!("bad CSV row {line:?}: {msg}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(bad(format!("expected 12 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
        let opt = |s: &str| {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s).map(Some)
            }
        };
        Ok(Self {
            experiment: f[0].to_string(),
            fingerprint: f[1].to_string(),
            seed: f[2].parse().map_err(|e| bad(format!("seed: {e}")))?,
            regime: f[3].to_string(),
            students: f[4].parse().map_err(|e| bad(format!("K: {e}")))?,
            tau: opt(f[5])?,
            loss_kind: f[6].to_string(),
            combine_mode: if f[7].is_empty() {
                None
            } else {
                Some(f[7].parse()?)
            },
            noise_fraction: num(f[8])?,
            teacher_acc: opt(f[9])?,
            test_accuracy: num(f[10])?,
            wall_time_s: num(f[11])?,
        })
    }

    fn group_key(&self) -> String {
        format!(
            "{}|{}|{}|{:?}|{:?}|{}",
            self.regime,
            self.loss_kind,
            self.students,
            self.tau,
            self.combine_mode,
            self.noise_fraction
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub experiment: String,
    pub rows: Vec<ReportRow>,
}

/// Mean and sample standard deviation of test accuracy for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub regime: String,
    pub loss_kind: String,
    pub students: usize,
    pub tau: Option<f64>,
    pub combine_mode: Option<CombineMode>,
    pub noise_fraction: f64,
    pub n: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(Error::Config(
                    "results file lacks the expected CSV header".into(),
                ))
            }
        }
        let rows = lines.map(ReportRow::from_csv).collect::<Result<Vec<_>>>()?;
        let experiment = rows
            .first()
            .map(|r| r.experiment.clone())
            .unwrap_or_default();
        Ok(Self { experiment, rows })
    }

    /// Groups rows by configuration in order of first appearance.
    pub fn stats(&self) -> Vec<GroupStats> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: BTreeMap<String, Vec<&ReportRow>> = BTreeMap::new();
        for r in &self.rows {
            let key = r.group_key();
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        order
            .iter()
            .map(|key| {
                let rows = &groups[key];
                let accs: Vec<f64> = rows.iter().map(|r| r.test_accuracy).collect();
                let (mean, std) = mean_std(&accs);
                let first = rows[0];
                GroupStats {
                    regime: first.regime.clone(),
                    loss_kind: first.loss_kind.clone(),
                    students: first.students,
                    tau: first.tau,
                    combine_mode: first.combine_mode,
                    noise_fraction: first.noise_fraction,
                    n: rows.len(),
                    mean,
                    std,
                }
            })
            .collect()
    }

    /// Mean test accuracy of rows matching a predicate.
    pub fn mean_where(&self, pred: impl Fn(&ReportRow) -> bool) -> Option<f64> {
        let accs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| pred(r))
            .map(|r| r.test_accuracy)
            .collect();
        (!accs.is_empty()).then(|| mean_std(&accs).0)
    }

    /// Plain-text table of per-configuration means, 4 decimal places.
    pub fn summary(&self) -> String {
        let stats = self.stats();
        let mut out = String::new();
        let _ = writeln!(out, "experiment: {}", self.experiment);
        if let Some(r) = self.rows.first() {
            let _ = writeln!(out, "fingerprint: {}", r.fingerprint);
            if let Some(t) = r.teacher_acc {
                let _ = writeln!(out, "teacher accuracy on student-train: {t:.4}");
            }
        }
        let best_kl = stats
            .iter()
            .filter(|s| s.regime == "kd_single" && s.loss_kind == "kl")
            .max_by(|a, b| {
                a.mean
                    .total_cmp(&b.mean)
                    .then(b.tau.unwrap_or(0.0).total_cmp(&a.tau.unwrap_or(0.0)))
            });
        let mut taus: Vec<f64> = stats
            .iter()
            .filter(|s| s.regime == "kd_single" && s.loss_kind == "kl")
            .filter_map(|s| s.tau)
            .collect();
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        let kl_taus = taus.len();
        let _ = writeln!(
            out,
            "{:<22} {:<14} {:>3} {:>6} {:>8} {:>6} {:>8} {:>8} {:>4}",
            "regime", "loss", "K", "tau", "combine", "noise", "mean", "std", "n"
        );
        for s in &stats {
            let marker = if best_kl.is_some_and(|b| std::ptr::eq(b, s)) && kl_taus > 1 {
                " *best kl tau"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "{:<22} {:<14} {:>3} {:>6} {:>8} {:>6} {:>8.4} {:>8} {:>4}{}",
                s.regime,
                s.loss_kind,
                s.students,
                s.tau.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
                s.combine_mode
                    .map(|m| m.to_string())
                    .unwrap_or_else(|| "-".into()),
                s.noise_fraction,
                s.mean,
                s.std
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "-".into()),
                s.n,
                marker
            );
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("results.csv");
        let summary = dir.join("summary.txt");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        fs::write(&summary, self.summary()).map_err(|e| Error::io(&summary, e))?;
        Ok((csv, summary))
    }
}

/// Removes the wall-time column so reruns can be compared byte for byte.
pub fn strip_wall_time(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

pub const REGIME_TEACHER: &str = "teacher";
pub const REGIME_FULL: &str = "full_supervision";
pub const REGIME_SUPERVISED: &str = "supervised";
pub const REGIME_SINGLE: &str = "kd_single";
pub const REGIME_INDEPENDENT: &str = "ensemble_independent";
pub const REGIME_MUTUAL: &str = "mutual";

struct RowTemplate<'a> {
    experiment: &'a str,
    prepared: &'a Prepared,
    seed: u64,
}

impl RowTemplate<'_> {
    #[allow(clippy::too_many_arguments)]
    fn row(
        &self,
        regime: &str,
        students: usize,
        tau: Option<f64>,
        loss_kind: String,
        mode: Option<CombineMode>,
        noise: f64,
        with_teacher: bool,
        acc: f64,
        wall: f64,
    ) -> ReportRow {
        ReportRow {
            experiment: self.experiment.to_string(),
            fingerprint: self.prepared.fingerprint.clone(),
            seed: self.seed,
            regime: regime.to_string(),
            students,
            tau,
            loss_kind,
            combine_mode: mode,
            noise_fraction: noise,
            teacher_acc: with_teacher.then_some(self.prepared.teacher_acc_student_train),
            test_accuracy: acc,
            wall_time_s: wall,
        }
    }
}

fn test_set(p: &Prepared) -> (Vec<&[f64]>, Vec<usize>) {
    (
        features(&p.dataset.test, Modality::B),
        labels(&p.dataset.test),
    )
}

/// Supervised modality-B student on student-train with a fraction of wrong labels.
pub fn run_supervised(
    cfg: &ExperimentConfig,
    p: &Prepared,
    fraction: f64,
    seed: u64,
) -> Result<f64> {
    let samples = &p.dataset.student_train;
    let noisy = inject_label_noise(
        &labels(samples),
        fraction,
        cfg.data.classes,
        mix_seed(seed, NOISE_STREAM),
    )?;
    let mut net = Mlp::seeded(&cfg.student_dims(), student_seed(seed, 0))?;
    train_supervised(
        &mut net,
        &features(samples, Modality::B),
        &noisy,
        &cfg.student_hyper(seed),
    )?;
    let (x, y) = test_set(p);
    evaluate(&net, &x, &y)
}

/// One student distilled from the cached teacher.
pub fn run_single(cfg: &ExperimentConfig, p: &Prepared, loss: LossKind, seed: u64) -> Result<f64> {
    let mut net = Mlp::seeded(&cfg.student_dims(), student_seed(seed, 0))?;
    let objective = crate::losses::Objective::new(loss).with_kl_options(cfg.kl_options());
    distill_single(
        &mut net,
        &features(&p.dataset.student_train, Modality::B),
        &p.cache,
        objective,
        &cfg.student_hyper(seed),
    )?;
    let (x, y) = test_set(p);
    evaluate(&net, &x, &y)
}

/// `k` students trained together (mutual when `loss` is mutual, independent otherwise).
pub fn run_ensemble(
    cfg: &ExperimentConfig,
    p: &Prepared,
    loss: LossKind,
    k: usize,
    seed: u64,
) -> Result<TrainedEnsemble> {
    let config = DistillConfig {
        loss,
        kl: cfg.kl_options(),
        students: k,
        combine: CombineMode::Average,
        hyper: cfg.student_hyper(seed),
    };
    config.validate()?;
    let students = init_students(&cfg.student_dims(), &config)?;
    train_students(
        students,
        &features(&p.dataset.student_train, Modality::B),
        &p.cache,
        &config,
    )
}

fn ensemble_accuracy(p: &Prepared, ensemble: &TrainedEnsemble, mode: CombineMode) -> Result<f64> {
    let (x, y) = test_set(p);
    evaluate(
        &Ensemble {
            students: &ensemble.students,
            mode,
        },
        &x,
        &y,
    )
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let v = f()?;
    Ok((v, start.elapsed().as_secs_f64()))
}

fn execute<J: Sync>(
    jobs: &[J],
    run: impl Fn(&J) -> Result<Vec<ReportRow>> + Sync + Send,
) -> Result<Vec<ReportRow>> {
    let parts = jobs.par_iter().map(run).collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Supervised students under label noise: one row per (fraction, seed).
pub fn sweep_noise(cfg: &ExperimentConfig, p: &Prepared) -> Result<ExperimentReport> {
    let jobs: Vec<(f64, u64)> = cfg
        .fractions
        .iter()
        .flat_map(|&f| cfg.seeds.iter().map(move |&s| (f, s)))
        .collect();
    let rows = execute(&jobs, |&(fraction, seed)| {
        let t = RowTemplate {
            experiment: "sweep-noise",
            prepared: p,
            seed,
        };
        let (acc, wall) = timed(|| run_supervised(cfg, p, fraction, seed))?;
        Ok(vec![t.row(
            REGIME_SUPERVISED,
            1,
            None,
            "ce".into(),
            None,
            fraction,
            false,
            acc,
            wall,
        )])
    })?;
    Ok(ExperimentReport {
        experiment: "sweep-noise".into(),
        rows,
    })
}

/// Single-student KL distillation for each temperature.
pub fn sweep_temperature(cfg: &ExperimentConfig, p: &Prepared) -> Result<ExperimentReport> {
    let jobs: Vec<(f64, u64)> = cfg
        .taus
        .iter()
        .flat_map(|&t| cfg.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let rows = execute(&jobs, |&(tau, seed)| {
        let t = RowTemplate {
            experiment: "sweep-temperature",
            prepared: p,
            seed,
        };
        let loss = LossKind::Kl { tau };
        let (acc, wall) = timed(|| run_single(cfg, p, loss, seed))?;
        Ok(vec![t.row(
            REGIME_SINGLE,
            1,
            Some(tau),
            loss.to_string(),
            None,
            0.0,
            true,
            acc,
            wall,
        )])
    })?;
    Ok(ExperimentReport {
        experiment: "sweep-temperature".into(),
        rows,
    })
}

fn teacher_loss_kind(term: TeacherLoss) -> LossKind {
    match term {
        TeacherLoss::Kl { tau } => LossKind::Kl { tau },
        TeacherLoss::CrossEntropyHard => LossKind::CrossEntropyHard,
    }
}

fn loss_tau(loss: LossKind) -> Option<f64> {
    match loss {
        LossKind::Kl { tau } | LossKind::Mutual { tau, .. } => Some(tau),
        LossKind::CrossEntropyHard => None,
    }
}

/// Full supervision, single student, independent ensembles and mutual
/// ensembles for each student count, under every combine mode.
pub fn sweep_students(cfg: &ExperimentConfig, p: &Prepared) -> Result<ExperimentReport> {
    #[derive(Clone, Copy)]
    enum Job {
        Full(u64),
        Single(u64),
        Independent(usize, u64),
        Mutual(usize, u64),
    }
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        jobs.push(Job::Full(seed));
        for &k in &cfg.students {
            if k == 1 {
                jobs.push(Job::Single(seed));
            } else {
                jobs.push(Job::Independent(k, seed));
                jobs.push(Job::Mutual(k, seed));
            }
        }
    }
    let single = teacher_loss_kind(cfg.teacher_term());
    let mutual = LossKind::Mutual {
        teacher: cfg.teacher_term(),
        peer: cfg.peer_kind,
        tau: cfg.peer_tau,
    };
    let rows = execute(&jobs, |job| {
        let seed = match *job {
            Job::Full(s) | Job::Single(s) | Job::Independent(_, s) | Job::Mutual(_, s) => s,
        };
        let t = RowTemplate {
            experiment: "sweep-students",
            prepared: p,
            seed,
        };
        match *job {
            Job::Full(_) => {
                let (acc, wall) = timed(|| run_supervised(cfg, p, 0.0, seed))?;
                Ok(vec![t.row(
                    REGIME_FULL,
                    1,
                    None,
                    "ce".into(),
                    None,
                    0.0,
                    true,
                    acc,
                    wall,
                )])
            }
            Job::Single(_) => {
                let (acc, wall) = timed(|| run_single(cfg, p, single, seed))?;
                Ok(cfg
                    .modes
                    .iter()
                    .map(|&m| {
                        t.row(
                            REGIME_SINGLE,
                            1,
                            loss_tau(single),
                            single.to_string(),
                            Some(m),
                            0.0,
                            true,
                            acc,
                            wall,
                        )
                    })
                    .collect())
            }
            Job::Independent(k, _) | Job::Mutual(k, _) => {
                let (regime, loss) = match *job {
                    Job::Mutual(..) => (REGIME_MUTUAL, mutual),
                    _ => (REGIME_INDEPENDENT, single),
                };
                let (ens, wall) = timed(|| run_ensemble(cfg, p, loss, k, seed))?;
                cfg.modes
                    .iter()
                    .map(|&m| {
                        let acc = ensemble_accuracy(p, &ens, m)?;
                        Ok(t.row(
                            regime,
                            k,
                            loss_tau(loss),
                            loss.to_string(),
                            Some(m),
                            0.0,
                            true,
                            acc,
                            wall,
                        ))
                    })
                    .collect()
            }
        }
    })?;
    Ok(ExperimentReport {
        experiment: "sweep-students".into(),
        rows,
    })
}

/// Full supervision, KL at every swept temperature, cross-entropy, and
/// cross-entropy with mutual learning (K = 2, 3, plus the cross-entropy peer
/// ablation at K = 2). Ensembles are combined by averaging.
pub fn compare_losses(cfg: &ExperimentConfig, p: &Prepared) -> Result<ExperimentReport> {
    #[derive(Clone, Copy)]
    enum Job {
        Full,
        Kl(f64),
        Ce,
        Mutual(usize, PeerKind),
    }
    let mut per_seed = vec![Job::Full];
    per_seed.extend(cfg.taus.iter().map(|&t| Job::Kl(t)));
    per_seed.push(Job::Ce);
    per_seed.push(Job::Mutual(2, PeerKind::Kl));
    per_seed.push(Job::Mutual(3, PeerKind::Kl));
    per_seed.push(Job::Mutual(2, PeerKind::CrossEntropyHard));
    let jobs: Vec<(Job, u64)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| per_seed.iter().map(move |&j| (j, s)))
        .collect();
    let rows = execute(&jobs, |&(job, seed)| {
        let t = RowTemplate {
            experiment: "compare-losses",
            prepared: p,
            seed,
        };
        let row = match job {
            Job::Full => {
                let (acc, wall) = timed(|| run_supervised(cfg, p, 0.0, seed))?;
                t.row(
                    REGIME_FULL,
                    1,
                    None,
                    "ce".into(),
                    None,
                    0.0,
                    true,
                    acc,
                    wall,
                )
            }
            Job::Kl(tau) => {
                let loss = LossKind::Kl { tau };
                let (acc, wall) = timed(|| run_single(cfg, p, loss, seed))?;
                t.row(
                    REGIME_SINGLE,
                    1,
                    Some(tau),
                    loss.to_string(),
                    None,
                    0.0,
                    true,
                    acc,
                    wall,
                )
            }
            Job::Ce => {
                let loss = LossKind::CrossEntropyHard;
                let (acc, wall) = timed(|| run_single(cfg, p, loss, seed))?;
                t.row(
                    REGIME_SINGLE,
                    1,
                    None,
                    loss.to_string(),
                    None,
                    0.0,
                    true,
                    acc,
                    wall,
                )
            }
            Job::Mutual(k, peer) => {
                let loss = LossKind::Mutual {
                    teacher: TeacherLoss::CrossEntropyHard,
                    peer,
                    tau: cfg.peer_tau,
                };
                let (ens, wall) = timed(|| run_ensemble(cfg, p, loss, k, seed))?;
                let acc = ensemble_accuracy(p, &ens, CombineMode::Average)?;
                t.row(
                    REGIME_MUTUAL,
                    k,
                    Some(cfg.peer_tau),
                    loss.to_string(),
                    Some(CombineMode::Average),
                    0.0,
                    true,
                    acc,
                    wall,
                )
            }
        };
        Ok(vec![row])
    })?;
    Ok(ExperimentReport {
        experiment: "compare-losses".into(),
        rows,
    })
}

/// Report row for the teacher itself: accuracy on student-train and on test (modality A).
pub fn teacher_report(p: &Prepared, wall: f64) -> ExperimentReport {
    let row = ReportRow {
        experiment: "train-teacher".into(),
        fingerprint: p.fingerprint.clone(),
        seed: 0,
        regime: REGIME_TEACHER.into(),
        students: 1,
        tau: None,
        loss_kind: "ce".into(),
        combine_mode: None,
        noise_fraction: 0.0,
        teacher_acc: Some(p.teacher_acc_student_train),
        test_accuracy: p.teacher_acc_test,
        wall_time_s: wall,
    };
    ExperimentReport {
        experiment: "train-teacher".into(),
        rows: vec![row],
    }
}
