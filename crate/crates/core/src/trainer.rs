//! Training regimes: supervised (teacher, baselines, noisy labels), single
//! student distillation and K-student mutual distillation, plus ensemble
//! inference and evaluation.
//!
//! All regimes share one mini-batch loop: for every batch, each student is
//! evaluated with its current parameters, every student's gradient is formed
//! against those frozen predictions, and then all students are updated. The
//! sample order is a seeded shuffle shared by all students, so a run is a
//! deterministic function of its inputs and seed.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::TeacherCache;
use crate::error::{Error, Result};
use crate::losses::{label_cross_entropy, KlOptions, LossKind, LossTerms, Objective};
use crate::nn::{argmax, softened_softmax, GradientSet, Mlp, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// Initialization seed of student `k` in a run seeded with `seed`.
pub fn student_seed(seed: u64, k: usize) -> u64 {
    mix_seed(seed, k as u64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CombineMode {
    Average,
    Max,
}

impl fmt::Display for CombineMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombineMode::Average => "average",
            CombineMode::Max => "max",
        })
    }
}

impl FromStr for CombineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "average" | "avg" | "mean" => Ok(CombineMode::Average),
            "max" => Ok(CombineMode::Max),
            other => Err(Error::Config(format!(
                "unknown combine mode {other:?} (expected average or max)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub loss: LossKind,
    pub kl: KlOptions,
    pub students: usize,
    pub combine: CombineMode,
    pub hyper: TrainHyper,
}

impl DistillConfig {
    pub fn objective(&self) -> Objective {
        Objective::new(self.loss).with_kl_options(self.kl)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.hyper.validate()?;
        if self.students == 0 {
            return Err(Error::Config("need at least one student".into()));
        }
        if self.loss.is_mutual() && self.students < 2 {
            return Err(Error::Config(format!(
                "mutual learning needs at least 2 students, got {}",
                self.students
            )));
        }
        Ok(())
    }
}

/// Per-epoch means over the training samples, one entry per student.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub teacher_loss: Vec<f64>,
    pub peer_loss: Vec<f64>,
    /// Agreement with the training targets, measured on the pre-update predictions.
    pub train_accuracy: Vec<f64>,
}

pub type History = Vec<EpochRecord>;

#[derive(Debug, Clone)]
pub struct TrainedEnsemble {
    pub students: Vec<Mlp>,
    pub config: DistillConfig,
    pub history: History,
}

impl TrainedEnsemble {
    pub fn predictor(&self) -> Ensemble<'_> {
        Ensemble {
            students: &self.students,
            mode: self.config.combine,
        }
    }
}

/// Per-sample training signal: returns the loss split and the logit gradient
/// for student `k` on sample `i`, given every student's logits on that sample.
trait Signal {
    fn sample(&self, i: usize, k: usize, logits: &[&[f64]]) -> (LossTerms, Vec<f64>, usize);
}

struct Labels<'a>(&'a [usize]);

impl Signal for Labels<'_> {
    fn sample(&self, i: usize, k: usize, logits: &[&[f64]]) -> (LossTerms, Vec<f64>, usize) {
        let (teacher, grad) = label_cross_entropy(logits[k], self.0[i]);
        (LossTerms { teacher, peer: 0.0 }, grad, self.0[i])
    }
}

struct Distill<'a> {
    objective: Objective,
    teacher: &'a [Vec<f64>],
    targets: Vec<usize>,
}

impl Signal for Distill<'_> {
    fn sample(&self, i: usize, k: usize, logits: &[&[f64]]) -> (LossTerms, Vec<f64>, usize) {
        let peers: Vec<&[f64]> = if self.objective.kind.is_mutual() {
            logits
                .iter()
                .enumerate()
                .filter(|&(l, _)| l != k)
                .map(|(_, z)| *z)
                .collect()
        } else {
            Vec::new()
        };
        let (terms, grad) = self
            .objective
            .evaluate_unchecked(logits[k], &self.teacher[i], &peers);
        (terms, grad, self.targets[i])
    }
}

fn check_inputs(students: &[Mlp], inputs: &[&[f64]], targets: usize) -> Result<()> {
    if inputs.len() != targets {
        return Err(Error::Shape(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets
        )));
    }
    if inputs.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let dims = students[0].dims();
    if students.iter().any(|s| s.dims() != dims) {
        return Err(Error::Shape("students must share one architecture".into()));
    }
    if let Some(x) = inputs.iter().find(|x| x.len() != students[0].input_dim()) {
        return Err(Error::Shape(format!(
            "input has length {}, network expects {}",
            x.len(),
            students[0].input_dim()
        )));
    }
    Ok(())
}

fn run(
    students: &mut [Mlp],
    inputs: &[&[f64]],
    signal: &dyn Signal,
    hyper: &TrainHyper,
    observer: &mut dyn FnMut(&EpochRecord, &[Mlp]),
) -> Result<History> {
    hyper.validate()?;
    let n = inputs.len();
    let k_count = students.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(hyper.seed, SHUFFLE_STREAM));
    let mut history = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut teacher_sum = vec![0.0; k_count];
        let mut peer_sum = vec![0.0; k_count];
        let mut hits = vec![0usize; k_count];
        for batch in order.chunks(hyper.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let logits: Vec<Vec<Vec<f64>>> = batch
                .iter()
                .map(|&i| {
                    students
                        .iter()
                        .map(|s| s.logits_unchecked(inputs[i]))
                        .collect()
                })
                .collect();
            let mut grads: Vec<GradientSet> =
                students.iter().map(GradientSet::zeros_like).collect();
            for (b, &i) in batch.iter().enumerate() {
                let views: Vec<&[f64]> = logits[b].iter().map(Vec::as_slice).collect();
                for k in 0..k_count {
                    let (terms, g, target) = signal.sample(i, k, &views);
                    if !terms.total().is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite loss at epoch {epoch}, student {k}"
                        )));
                    }
                    teacher_sum[k] += terms.teacher;
                    peer_sum[k] += terms.peer;
                    if argmax(views[k]) == target {
                        hits[k] += 1;
                    }
                    students[k].backward_into(inputs[i], &g, scale, &mut grads[k])?;
                }
            }
            for (s, g) in students.iter_mut().zip(&grads) {
                s.sgd_step(g, hyper.learning_rate)?;
            }
        }
        let record = EpochRecord {
            epoch,
            teacher_loss: teacher_sum.iter().map(|v| v / n as f64).collect(),
            peer_loss: peer_sum.iter().map(|v| v / n as f64).collect(),
            train_accuracy: hits.iter().map(|&h| h as f64 / n as f64).collect(),
        };
        observer(&record, students);
        history.push(record);
    }
    Ok(history)
}

/// Mini-batch SGD on softmax cross-entropy against `labels`.
pub fn train_supervised(
    net: &mut Mlp,
    inputs: &[&[f64]],
    labels: &[usize],
    hyper: &TrainHyper,
) -> Result<History> {
    train_supervised_observed(net, inputs, labels, hyper, &mut |_, _| {})
}

/// [`train_supervised`] with a callback after every epoch.
pub fn train_supervised_observed(
    net: &mut Mlp,
    inputs: &[&[f64]],
    labels: &[usize],
    hyper: &TrainHyper,
    observer: &mut dyn FnMut(&EpochRecord, &[Mlp]),
) -> Result<History> {
    let students = std::slice::from_mut(net);
    check_inputs(students, inputs, labels.len())?;
    let classes = students[0].num_classes();
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Shape(format!(
            "label {l} out of range for {classes} classes"
        )));
    }
    run(students, inputs, &Labels(labels), hyper, observer)
}

fn distill_signal<'a>(
    objective: Objective,
    cache: &'a TeacherCache,
    classes: usize,
) -> Result<Distill<'a>> {
    objective.kind.validate()?;
    if let Some(z) = cache.logits().iter().find(|z| z.len() != classes) {
        return Err(Error::Shape(format!(
            "teacher predicts {} classes, students {classes}",
            z.len()
        )));
    }
    Ok(Distill {
        objective,
        teacher: cache.logits(),
        targets: cache.pseudo_labels()?,
    })
}

/// Trains one student against frozen teacher predictions with a KL or
/// hard-label cross-entropy objective.
pub fn distill_single(
    student: &mut Mlp,
    inputs: &[&[f64]],
    cache: &TeacherCache,
    objective: Objective,
    hyper: &TrainHyper,
) -> Result<History> {
    distill_single_observed(student, inputs, cache, objective, hyper, &mut |_, _| {})
}

pub fn distill_single_observed(
    student: &mut Mlp,
    inputs: &[&[f64]],
    cache: &TeacherCache,
    objective: Objective,
    hyper: &TrainHyper,
    observer: &mut dyn FnMut(&EpochRecord, &[Mlp]),
) -> Result<History> {
    if objective.kind.is_mutual() {
        return Err(Error::Config(
            "single-student distillation takes a non-mutual loss".into(),
        ));
    }
    let students = std::slice::from_mut(student);
    check_inputs(students, inputs, cache.len())?;
    let signal = distill_signal(objective, cache, students[0].num_classes())?;
    run(students, inputs, &signal, hyper, observer)
}

/// Trains `students` jointly. With a mutual objective each student also
/// matches the other students' current predictions; otherwise the students
/// are trained independently on the same data order.
pub fn train_students(
    students: Vec<Mlp>,
    inputs: &[&[f64]],
    cache: &TeacherCache,
    config: &DistillConfig,
) -> Result<TrainedEnsemble> {
    train_students_observed(students, inputs, cache, config, &mut |_, _| {})
}

pub fn train_students_observed(
    mut students: Vec<Mlp>,
    inputs: &[&[f64]],
    cache: &TeacherCache,
    config: &DistillConfig,
    observer: &mut dyn FnMut(&EpochRecord, &[Mlp]),
) -> Result<TrainedEnsemble> {
    config.validate()?;
    if students.len() != config.students {
        return Err(Error::Config(format!(
            "config asks for {} students, got {}",
            config.students,
            students.len()
        )));
    }
    check_inputs(&students, inputs, cache.len())?;
    let signal = distill_signal(config.objective(), cache, students[0].num_classes())?;
    let history = run(&mut students, inputs, &signal, &config.hyper, observer)?;
    Ok(TrainedEnsemble {
        students,
        config: config.clone(),
        history,
    })
}

/// Freshly initialized students for `config`, student `k` seeded with
/// [`student_seed`]`(config.hyper.seed, k)`.
pub fn init_students(dims: &[usize], config: &DistillConfig) -> Result<Vec<Mlp>> {
    (0..config.students)
        .map(|k| Mlp::seeded(dims, student_seed(config.hyper.seed, k)))
        .collect()
}

/// K-student mutual distillation from fresh initializations.
pub fn mutual_distill(
    dims: &[usize],
    inputs: &[&[f64]],
    cache: &TeacherCache,
    config: &DistillConfig,
) -> Result<TrainedEnsemble> {
    if !config.loss.is_mutual() {
        return Err(Error::Config(format!(
            "{} is not a mutual-learning loss",
            config.loss
        )));
    }
    config.validate()?;
    train_students(init_students(dims, config)?, inputs, cache, config)
}

/// Maps an input to a class distribution.
pub trait Classifier: Sync {
    fn predict(&self, input: &[f64]) -> Result<ProbVector>;
}

impl Classifier for Mlp {
    fn predict(&self, input: &[f64]) -> Result<ProbVector> {
        softened_softmax(&self.forward(input)?, 1.0)
    }
}

/// Students combined at inference time.
#[derive(Debug, Clone, Copy)]
pub struct Ensemble<'a> {
    pub students: &'a [Mlp],
    pub mode: CombineMode,
}

impl Classifier for Ensemble<'_> {
    fn predict(&self, input: &[f64]) -> Result<ProbVector> {
        ensemble_predict(self.students, input, self.mode)
    }
}

/// Averages the students' class probabilities, or takes the per-class maximum
/// and renormalizes.
pub fn ensemble_predict(students: &[Mlp], input: &[f64], mode: CombineMode) -> Result<ProbVector> {
    let probs = students
        .iter()
        .map(|s| s.predict(input))
        .collect::<Result<Vec<_>>>()?;
    combine(&probs, mode)
}

/// Combines per-student distributions.
pub fn combine(probs: &[ProbVector], mode: CombineMode) -> Result<ProbVector> {
    let first = probs
        .first()
        .ok_or_else(|| Error::Config("ensemble has no students".into()))?;
    if probs.len() == 1 {
        return Ok(first.clone());
    }
    if probs.iter().any(|p| p.len() != first.len()) {
        return Err(Error::Shape("students disagree on class count".into()));
    }
    let combined: Vec<f64> = match mode {
        CombineMode::Average => {
            let k = probs.len() as f64;
            (0..first.len())
                .map(|c| probs.iter().map(|p| p[c]).sum::<f64>() / k)
                .collect()
        }
        CombineMode::Max => {
            let raw: Vec<f64> = (0..first.len())
                .map(|c| probs.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max))
                .collect();
            let sum: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / sum).collect()
        }
    };
    Ok(ProbVector::from_raw(combined))
}

/// Fraction of samples whose predicted argmax (lowest index on ties) equals the label.
pub fn evaluate(predictor: &dyn Classifier, inputs: &[&[f64]], labels: &[usize]) -> Result<f64> {
    if inputs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    if inputs.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty set".into()));
    }
    let hits = inputs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| predictor.predict(x).map(|p| usize::from(p.argmax() == y)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(hits as f64 / inputs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn toy() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let t = i as f64 / 40.0;
            xs.push(vec![1.0 + t, 0.5 - t]);
            ys.push(0);
            xs.push(vec![-1.0 - t, -0.5 + t]);
            ys.push(1);
        }
        (xs, ys)
    }

    fn views(xs: &[Vec<f64>]) -> Vec<&[f64]> {
        xs.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn combine_examples() {
        let a = pv(&[0.6, 0.4]);
        let b = pv(&[0.2, 0.8]);
        let avg = combine(&[a.clone(), b.clone()], CombineMode::Average).unwrap();
        assert!((avg[0] - 0.4).abs() < 1e-15 && (avg[1] - 0.6).abs() < 1e-15);
        let max = combine(&[a.clone(), b.clone()], CombineMode::Max).unwrap();
        assert!((max[0] - 3.0 / 7.0).abs() < 1e-15 && (max[1] - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(max.argmax(), 1);
        for mode in [CombineMode::Average, CombineMode::Max] {
            assert_eq!(combine(std::slice::from_ref(&a), mode).unwrap(), a);
        }
        assert!(matches!(
            combine(&[], CombineMode::Average),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let (xs, ys) = toy();
        let mut net = Mlp::seeded(&[2, 8, 2], 3).unwrap();
        let hyper = TrainHyper {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.1,
            seed: 1,
        };
        train_supervised(&mut net, &views(&xs), &ys, &hyper).unwrap();
        assert_eq!(evaluate(&net, &views(&xs), &ys).unwrap(), 1.0);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (xs, ys) = toy();
        let mut net = Mlp::seeded(&[2, 8, 2], 3).unwrap();
        let before = net.clone();
        let hyper = TrainHyper {
            epochs: 0,
            ..TrainHyper::default()
        };
        let h = train_supervised(&mut net, &views(&xs), &ys, &hyper).unwrap();
        assert!(h.is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn single_sample_overfits() {
        let xs = vec![vec![0.3, -0.7, 1.2]];
        let ys = vec![2];
        let mut net = Mlp::seeded(&[3, 8, 4], 5).unwrap();
        let hyper = TrainHyper {
            epochs: 1000,
            batch_size: 1,
            learning_rate: 0.05,
            seed: 0,
        };
        let h = train_supervised(&mut net, &views(&xs), &ys, &hyper).unwrap();
        let last = h.last().unwrap().teacher_loss[0];
        let p = net.predict(&xs[0]).unwrap();
        assert!(
            -p[2].ln() < 1e-3,
            "final loss {}, logged {last}",
            -p[2].ln()
        );
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let (xs, ys) = toy();
        let mut net = Mlp::seeded(&[2, 8, 2], 3).unwrap();
        let r = train_supervised(&mut net, &views(&xs), &ys[1..], &TrainHyper::default());
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn evaluate_edge_cases() {
        struct Oracle;
        impl Classifier for Oracle {
            fn predict(&self, x: &[f64]) -> Result<ProbVector> {
                ProbVector::one_hot(3, x[0] as usize)
            }
        }
        struct Constant;
        impl Classifier for Constant {
            fn predict(&self, _: &[f64]) -> Result<ProbVector> {
                ProbVector::one_hot(3, 1)
            }
        }
        let xs: Vec<Vec<f64>> = (0..9).map(|i| vec![(i % 3) as f64]).collect();
        let ys: Vec<usize> = (0..9).map(|i| i % 3).collect();
        assert_eq!(evaluate(&Oracle, &views(&xs), &ys).unwrap(), 1.0);
        assert!((evaluate(&Constant, &views(&xs), &ys).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(evaluate(&Oracle, &[], &[]), Err(Error::Config(_))));
    }

    #[test]
    fn mutual_needs_two_students() {
        let (xs, _) = toy();
        let cache = TeacherCache::from_logits(vec![vec![1.0, 0.0]; xs.len()]);
        let config = DistillConfig {
            loss: LossKind::mutual_default(),
            kl: KlOptions::default(),
            students: 1,
            combine: CombineMode::Average,
            hyper: TrainHyper::default(),
        };
        assert!(matches!(
            mutual_distill(&[2, 4, 2], &views(&xs), &cache, &config),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn students_must_share_architecture() {
        let (xs, _) = toy();
        let cache = TeacherCache::from_logits(vec![vec![1.0, 0.0]; xs.len()]);
        let config = DistillConfig {
            loss: LossKind::mutual_default(),
            kl: KlOptions::default(),
            students: 2,
            combine: CombineMode::Average,
            hyper: TrainHyper::default(),
        };
        let a = Mlp::seeded(&[2, 4, 2], 0).unwrap();
        let b =
            Mlp::from_layers(vec![Dense::new(2, 2, vec![0.0; 4], vec![0.0; 2]).unwrap()]).unwrap();
        assert!(matches!(
            train_students(vec![a, b], &views(&xs), &cache, &config),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn seeds_are_distinct() {
        let s: Vec<u64> = (0..5).map(|k| student_seed(7, k)).collect();
        for i in 0..5 {
            for j in i + 1..5 {
                assert_ne!(s[i], s[j]);
            }
        }
    }
}
