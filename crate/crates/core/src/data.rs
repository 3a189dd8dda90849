//! Synthetic paired-modality classification data.
//!
//! Each class has an independent prototype in each modality. Modality A is
//! linear-Gaussian around its prototype; modality B passes the prototype plus a
//! subject offset through `tanh` before adding noise. The two modalities share
//! only the latent class and subject of a sample.
//!
//! Subjects are partitioned into three disjoint groups: teacher-train,
//! student-train and test.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{softened_softmax, Mlp, ProbVector};

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub modality_a: Vec<f64>,
    pub modality_b: Vec<f64>,
    pub label: usize,
    pub subject: usize,
}

/// Which feature vector of a [`PairedSample`] a network consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    A,
    B,
}

impl PairedSample {
    pub fn features(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::A => &self.modality_a,
            Modality::B => &self.modality_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub classes: usize,
    pub subjects: usize,
    /// Subjects used for training; half go to teacher-train, half to student-train.
    /// The remaining `subjects - train_subjects` form the test split.
    pub train_subjects: usize,
    pub samples_per_subject_per_class: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub noise_sigma: f64,
    pub subject_sigma: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            subjects: 12,
            train_subjects: 8,
            samples_per_subject_per_class: 30,
            dim_a: 16,
            dim_b: 16,
            noise_sigma: 0.5,
            subject_sigma: 0.35,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("classes", self.classes),
            ("subjects", self.subjects),
            (
                "samples_per_subject_per_class",
                self.samples_per_subject_per_class,
            ),
            ("dim_a", self.dim_a),
            ("dim_b", self.dim_b),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::Config("classes must be at least 2".into()));
        }
        if self.train_subjects == 0 || !self.train_subjects.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "train_subjects must be a positive even number, got {}",
                self.train_subjects
            )));
        }
        if self.train_subjects >= self.subjects {
            return Err(Error::Config(format!(
                "train_subjects ({}) must leave at least one test subject out of {}",
                self.train_subjects, self.subjects
            )));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("subject_sigma", self.subject_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    TeacherTrain,
    StudentTrain,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [
        SplitName::TeacherTrain,
        SplitName::StudentTrain,
        SplitName::Test,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            SplitName::TeacherTrain => "teacher_train.txt",
            SplitName::StudentTrain => "student_train.txt",
            SplitName::Test => "test.txt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub classes: usize,
    pub subjects: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    pub teacher_train: Vec<PairedSample>,
    pub student_train: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
}

impl DatasetSplit {
    pub fn split(&self, name: SplitName) -> &[PairedSample] {
        match name {
            SplitName::TeacherTrain => &self.teacher_train,
            SplitName::StudentTrain => &self.student_train,
            SplitName::Test => &self.test,
        }
    }

    /// SHA-256 over the serialized splits, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for name in SplitName::ALL {
            hasher.update(self.split_to_text(name).as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Header `C S D_a D_b`, then `subject label a_1 .. a_Da b_1 .. b_Db` per sample,
    /// reals in plain decimal with 9 significant digits.
    pub fn split_to_text(&self, name: SplitName) -> String {
        let mut out = format!(
            "{} {} {} {}\n",
            self.classes, self.subjects, self.dim_a, self.dim_b
        );
        for s in self.split(name) {
            let _ = write!(out, "{} {}", s.subject, s.label);
            for v in s.modality_a.iter().chain(&s.modality_b) {
                out.push(' ');
                out.push_str(&format_sig9(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_dir(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        SplitName::ALL
            .iter()
            .map(|&name| {
                let path = dir.join(name.file_name());
                fs::write(&path, self.split_to_text(name)).map_err(|e| Error::io(&path, e))?;
                Ok(path)
            })
            .collect()
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut parts = Vec::with_capacity(3);
        for name in SplitName::ALL {
            let path = dir.join(name.file_name());
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            parts.push(parse_split(&text, &path)?);
        }
        let header = parts[0].0;
        if parts.iter().any(|(h, _)| *h != header) {
            return Err(Error::Parse {
                path: dir.to_path_buf(),
                line: 1,
                msg: "split headers disagree".into(),
            });
        }
        let mut samples = parts.into_iter().map(|(_, s)| s);
        let (classes, subjects, dim_a, dim_b) = header;
        let split = DatasetSplit {
            classes,
            subjects,
            dim_a,
            dim_b,
            teacher_train: samples.next().unwrap_or_default(),
            student_train: samples.next().unwrap_or_default(),
            test: samples.next().unwrap_or_default(),
        };
        split.check_disjoint()?;
        Ok(split)
    }

    pub fn subjects_of(&self, name: SplitName) -> Vec<usize> {
        let mut s: Vec<usize> = self.split(name).iter().map(|p| p.subject).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn check_disjoint(&self) -> Result<()> {
        let t = self.subjects_of(SplitName::TeacherTrain);
        let s = self.subjects_of(SplitName::StudentTrain);
        let e = self.subjects_of(SplitName::Test);
        let overlap =
            t.iter().any(|x| s.contains(x) || e.contains(x)) || s.iter().any(|x| e.contains(x));
        if overlap {
            return Err(Error::Config("dataset splits share subjects".into()));
        }
        Ok(())
    }
}

type Header = (usize, usize, usize, usize);

fn parse_split(text: &str, path: &Path) -> Result<(Header, Vec<PairedSample>)> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines
        .next()
        .ok_or_else(|| err(1, "missing header".into()))?;
    let nums = head
        .split_whitespace()
        .map(|f| {
            f.parse::<usize>()
                .map_err(|e| err(1, format!("bad header field {f:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let [classes, subjects, dim_a, dim_b] = nums[..] else {
        return Err(err(1, format!("header needs 4 fields, got {}", nums.len())));
    };
    let mut samples = Vec::new();
    for (n, line) in lines {
        let lineno = n + 1;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 + dim_a + dim_b {
            return Err(err(
                lineno,
                format!(
                    "expected {} fields, got {}",
                    2 + dim_a + dim_b,
                    fields.len()
                ),
            ));
        }
        let subject: usize = fields[0]
            .parse()
            .map_err(|e| err(lineno, format!("bad subject: {e}")))?;
        let label: usize = fields[1]
            .parse()
            .map_err(|e| err(lineno, format!("bad label: {e}")))?;
        if subject >= subjects || label >= classes {
            return Err(err(
                lineno,
                format!("subject {subject} or label {label} out of range"),
            ));
        }
        let values = fields[2..]
            .iter()
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                Ok(v) => Err(err(lineno, format!("non-finite feature {v}"))),
                Err(e) => Err(err(lineno, format!("bad feature {f:?}: {e}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(PairedSample {
            modality_a: values[..dim_a].to_vec(),
            modality_b: values[dim_a..].to_vec(),
            label,
            subject,
        });
    }
    Ok(((classes, subjects, dim_a, dim_b), samples))
}

/// Plain decimal notation with 9 significant digits (no exponent).
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0.00000000".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci
        .split_once('e')
        .expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(m) => ("-", m),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    // digits holds d0 d1 .. d8 representing d0.d1..d8 * 10^exp
    let body = if exp >= 8 {
        format!("{digits}{}", "0".repeat((exp - 8) as usize))
    } else if exp >= 0 {
        let split = (exp + 1) as usize;
        format!("{}.{}", &digits[..split], &digits[split..])
    } else {
        format!("0.{}{digits}", "0".repeat((-exp - 1) as usize))
    };
    format!("{sign}{body}")
}

fn uniform_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

fn normal_vec(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect()
}

/// Draws a dataset; the output is a deterministic function of the config.
///
/// Subjects `0..train/2` form teacher-train, `train/2..train` student-train and
/// the rest the test split.
pub fn generate(config: &GenConfig) -> Result<DatasetSplit> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let proto_a: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| uniform_vec(&mut rng, config.dim_a))
        .collect();
    let proto_b: Vec<Vec<f64>> = (0..config.classes)
        .map(|_| uniform_vec(&mut rng, config.dim_b))
        .collect();
    let offset_a: Vec<Vec<f64>> = (0..config.subjects)
        .map(|_| normal_vec(&mut rng, config.dim_a, config.subject_sigma))
        .collect();
    let offset_b: Vec<Vec<f64>> = (0..config.subjects)
        .map(|_| normal_vec(&mut rng, config.dim_b, config.subject_sigma))
        .collect();

    let half = config.train_subjects / 2;
    let mut split = DatasetSplit {
        classes: config.classes,
        subjects: config.subjects,
        dim_a: config.dim_a,
        dim_b: config.dim_b,
        teacher_train: Vec::new(),
        student_train: Vec::new(),
        test: Vec::new(),
    };
    for subject in 0..config.subjects {
        for class in 0..config.classes {
            for _ in 0..config.samples_per_subject_per_class {
                let noise_a = normal_vec(&mut rng, config.dim_a, config.noise_sigma);
                let noise_b = normal_vec(&mut rng, config.dim_b, config.noise_sigma);
                let modality_a = proto_a[class]
                    .iter()
                    .zip(&offset_a[subject])
                    .zip(&noise_a)
                    .map(|((m, o), e)| m + o + e)
                    .collect();
                let modality_b = proto_b[class]
                    .iter()
                    .zip(&offset_b[subject])
                    .zip(&noise_b)
                    .map(|((m, o), e)| (m + o).tanh() + e)
                    .collect();
                let sample = PairedSample {
                    modality_a,
                    modality_b,
                    label: class,
                    subject,
                };
                match subject {
                    s if s < half => split.teacher_train.push(sample),
                    s if s < config.train_subjects => split.student_train.push(sample),
                    _ => split.test.push(sample),
                }
            }
        }
    }
    Ok(split)
}

/// Replaces exactly `round(fraction * N)` labels, at positions chosen uniformly
/// without replacement, with a uniformly drawn different label.
pub fn inject_label_noise(
    labels: &[usize],
    fraction: f64,
    classes: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "noise fraction must lie in [0, 1], got {fraction}"
        )));
    }
    if classes < 2 {
        return Err(Error::Config("label noise needs at least 2 classes".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Shape(format!(
            "label {l} out of range for {classes} classes"
        )));
    }
    let n = labels.len();
    let flips = (fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = labels.to_vec();
    let mut positions = index::sample(&mut rng, n, flips).into_vec();
    positions.sort_unstable();
    for i in positions {
        let r = rng.random_range(0..classes - 1);
        out[i] = if r >= labels[i] { r + 1 } else { r };
    }
    Ok(out)
}

/// Frozen teacher outputs for a set of samples.
///
/// Logits are stored; probability views at any temperature are derived on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    logits: Vec<Vec<f64>>,
}

impl TeacherCache {
    pub fn from_logits(logits: Vec<Vec<f64>>) -> Self {
        Self { logits }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn probs(&self, tau: f64) -> Result<Vec<ProbVector>> {
        self.logits
            .iter()
            .map(|z| softened_softmax(z, tau))
            .collect()
    }

    /// Teacher argmax labels taken from the temperature-1 probabilities.
    pub fn pseudo_labels(&self) -> Result<Vec<usize>> {
        Ok(self.probs(1.0)?.iter().map(ProbVector::argmax).collect())
    }

    /// Fraction of samples whose pseudo-label equals `labels`.
    pub fn accuracy(&self, labels: &[usize]) -> Result<f64> {
        if labels.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} labels for {} cached predictions",
                labels.len(),
                self.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Config("accuracy of an empty set".into()));
        }
        let hits = self
            .pseudo_labels()?
            .iter()
            .zip(labels)
            .filter(|(a, b)| a == b)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Runs the teacher once over the samples' modality-A features.
pub fn cache_teacher_predictions(teacher: &Mlp, samples: &[PairedSample]) -> Result<TeacherCache> {
    let logits = samples
        .iter()
        .map(|s| teacher.forward(&s.modality_a).map(|z| z.into_inner()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TeacherCache { logits })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            classes: 3,
            subjects: 6,
            train_subjects: 4,
            samples_per_subject_per_class: 4,
            dim_a: 3,
            dim_b: 2,
            ..GenConfig::default()
        }
    }

    #[test]
    fn split_sizes_and_disjoint_subjects() {
        let cfg = small();
        let d = generate(&cfg).unwrap();
        assert_eq!(d.teacher_train.len(), 2 * 3 * 4);
        assert_eq!(d.student_train.len(), 2 * 3 * 4);
        assert_eq!(d.test.len(), 2 * 3 * 4);
        assert_eq!(d.subjects_of(SplitName::TeacherTrain), vec![0, 1]);
        assert_eq!(d.subjects_of(SplitName::StudentTrain), vec![2, 3]);
        assert_eq!(d.subjects_of(SplitName::Test), vec![4, 5]);
        d.check_disjoint().unwrap();
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = small();
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = GenConfig {
            seed: 1,
            ..cfg.clone()
        };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn noiseless_samples_collapse_to_prototypes() {
        let cfg = GenConfig {
            noise_sigma: 0.0,
            subject_sigma: 0.0,
            ..small()
        };
        let d = generate(&cfg).unwrap();
        let all: Vec<&PairedSample> = d
            .teacher_train
            .iter()
            .chain(&d.student_train)
            .chain(&d.test)
            .collect();
        for c in 0..cfg.classes {
            let of_class: Vec<_> = all.iter().filter(|s| s.label == c).collect();
            assert!(of_class
                .iter()
                .all(|s| s.modality_a == of_class[0].modality_a));
            assert!(of_class
                .iter()
                .all(|s| s.modality_b == of_class[0].modality_b));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            GenConfig {
                classes: 1,
                ..small()
            },
            GenConfig {
                train_subjects: 3,
                ..small()
            },
            GenConfig {
                train_subjects: 6,
                ..small()
            },
            GenConfig {
                noise_sigma: -0.1,
                ..small()
            },
            GenConfig {
                dim_b: 0,
                ..small()
            },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn label_noise_counts() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert_eq!(inject_label_noise(&labels, 0.0, 10, 1).unwrap(), labels);
        let all = inject_label_noise(&labels, 1.0, 10, 1).unwrap();
        assert!(all.iter().zip(&labels).all(|(a, b)| a != b));
        let some = inject_label_noise(&labels, 0.14, 10, 1).unwrap();
        assert_eq!(some.iter().zip(&labels).filter(|(a, b)| a != b).count(), 14);
        assert!(matches!(
            inject_label_noise(&labels, 1.5, 10, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            inject_label_noise(&labels, -0.1, 10, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0.00000000");
        assert_eq!(format_sig9(1.0), "1.00000000");
        assert_eq!(format_sig9(-0.123456789123), "-0.123456789");
        assert_eq!(format_sig9(12.3456789012), "12.3456789");
        assert_eq!(format_sig9(0.000123456789), "0.000123456789");
        assert_eq!(format_sig9(123456789012.0), "123456789000");
        assert_eq!(format_sig9(9.999999999), "10.0000000");
    }

    #[test]
    fn zero_teacher_gives_uniform_cache() {
        let d = generate(&small()).unwrap();
        let teacher = Mlp::zeros(&[3, 4, 3]).unwrap();
        let cache = cache_teacher_predictions(&teacher, &d.student_train).unwrap();
        for p in cache.probs(1.0).unwrap() {
            assert_eq!(&*p, &[1.0 / 3.0; 3]);
        }
        let bad = Mlp::zeros(&[2, 3]).unwrap();
        assert!(matches!(
            cache_teacher_predictions(&bad, &d.student_train),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn text_round_trip_is_stable() {
        let d = generate(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write_dir(dir.path()).unwrap();
        let back = DatasetSplit::read_dir(dir.path()).unwrap();
        for name in SplitName::ALL {
            assert_eq!(back.split_to_text(name), d.split_to_text(name));
        }
        assert_eq!(back.fingerprint(), d.fingerprint());
    }
}
