//! Distillation losses and their gradients with respect to student logits.
//!
//! * KL distillation: `KL(P_S^tau || P_T^tau)`, student distribution first.
//! * Hard-label cross-entropy: `-log P_S(c_T)` where `c_T` is the teacher's argmax.
//! * Mutual learning for student `k` of `K`: a teacher term plus the mean of
//!   `K - 1` peer terms computed against the other students at temperature `tau`.
//!
//! Teacher and peer predictions are constants inside a student's loss; no
//! gradient flows into them.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{
    argmax, log_softmax_unchecked, softened_softmax, softmax_unchecked, LogitLoss, LogitVector,
    ProbVector,
};

/// Lower clamp applied to probabilities before logs and divisions.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default temperature of the peer term in mutual learning.
pub const DEFAULT_PEER_TAU: f64 = 10.0;

/// The loss a student uses against the teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TeacherLoss {
    Kl { tau: f64 },
    CrossEntropyHard,
}

/// The loss a student uses against each peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PeerKind {
    Kl,
    CrossEntropyHard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    Kl {
        tau: f64,
    },
    CrossEntropyHard,
    /// Teacher term plus averaged peer term at temperature `tau`.
    Mutual {
        teacher: TeacherLoss,
        peer: PeerKind,
        tau: f64,
    },
}

impl LossKind {
    /// Cross-entropy teacher term with a KL peer term at the default temperature.
    pub fn mutual_default() -> Self {
        LossKind::Mutual {
            teacher: TeacherLoss::CrossEntropyHard,
            peer: PeerKind::Kl,
            tau: DEFAULT_PEER_TAU,
        }
    }

    pub fn teacher_loss(&self) -> TeacherLoss {
        match *self {
            LossKind::Kl { tau } => TeacherLoss::Kl { tau },
            LossKind::CrossEntropyHard => TeacherLoss::CrossEntropyHard,
            LossKind::Mutual { teacher, .. } => teacher,
        }
    }

    pub fn is_mutual(&self) -> bool {
        matches!(self, LossKind::Mutual { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let check = |tau: f64| {
            if tau > 0.0 && tau.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "temperature must be positive, got {tau}"
                )))
            }
        };
        match *self {
            LossKind::Kl { tau } => check(tau),
            LossKind::CrossEntropyHard => Ok(()),
            LossKind::Mutual { teacher, tau, .. } => {
                if let TeacherLoss::Kl { tau } = teacher {
                    check(tau)?;
                }
                check(tau)
            }
        }
    }
}

impl fmt::Display for TeacherLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TeacherLoss::Kl { .. } => f.write_str("kl"),
            TeacherLoss::CrossEntropyHard => f.write_str("ce"),
        }
    }
}

impl fmt::Display for PeerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PeerKind::Kl => f.write_str("kl"),
            PeerKind::CrossEntropyHard => f.write_str("ce"),
        }
    }
}

impl FromStr for PeerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kl" => Ok(PeerKind::Kl),
            "ce" | "cross-entropy" | "cross_entropy" => Ok(PeerKind::CrossEntropyHard),
            other => Err(Error::Config(format!(
                "unknown peer loss {other:?} (expected kl or ce)"
            ))),
        }
    }
}

/// Label CSV form: `kl`, `ce`, `ce+mutual(kl)`, `kl+mutual(ce)`, ...
impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Kl { .. } => f.write_str("kl"),
            LossKind::CrossEntropyHard => f.write_str("ce"),
            LossKind::Mutual { teacher, peer, .. } => write!(f, "{teacher}+mutual({peer})"),
        }
    }
}

/// Variants of the KL term that deviate from the literal student-first form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct KlOptions {
    /// Compute `KL(target || student)` instead of `KL(student || target)`.
    pub reversed: bool,
    /// Multiply KL terms by `tau^2`.
    pub tau_squared: bool,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "distributions have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let sum: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(PROB_FLOOR)).ln())
        .sum();
    sum.max(0.0)
}

fn ce_unchecked(p_s: &[f64], label: usize) -> f64 {
    -p_s[label].max(PROB_FLOOR).ln()
}

/// `sum_c p_s(c) log(p_s(c) / p_t(c))`; zero-probability student entries contribute
/// nothing and `p_t` is clamped below at [`PROB_FLOOR`].
pub fn kl_loss(p_s: &ProbVector, p_t: &ProbVector) -> Result<f64> {
    check_pair(p_s, p_t)?;
    Ok(kl_unchecked(p_s, p_t))
}

/// The teacher's hard decision: argmax of its probabilities, lowest index on ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TeacherLabel(pub usize);

impl TeacherLabel {
    pub fn from_probs(p_t: &ProbVector) -> Self {
        TeacherLabel(p_t.argmax())
    }
}

/// `-log p_s(argmax p_t)`, with `p_s` clamped below at [`PROB_FLOOR`].
pub fn ce_hard_loss(p_s: &ProbVector, p_t: &ProbVector) -> Result<f64> {
    check_pair(p_s, p_t)?;
    Ok(ce_unchecked(p_s, TeacherLabel::from_probs(p_t).0))
}

/// Loss of student `k` in a `K`-student ensemble with a cross-entropy teacher term:
/// `CE(p_k, p_T) + 1/(K-1) * sum_{l != k} peer(p_k, p_l)`.
///
/// `probs` are the students' predictions at temperature 1; the tempered peer
/// distributions are recomputed from `logits`.
pub fn mutual_loss(
    k: usize,
    probs: &[ProbVector],
    logits: &[LogitVector],
    p_t: &ProbVector,
    tau: f64,
    peer: PeerKind,
) -> Result<f64> {
    let students = probs.len();
    if students < 2 {
        return Err(Error::Config(format!(
            "mutual learning needs at least 2 students, got {students}"
        )));
    }
    if logits.len() != students {
        return Err(Error::Shape(format!(
            "{} probability vectors but {} logit vectors",
            students,
            logits.len()
        )));
    }
    if k >= students {
        return Err(Error::Shape(format!(
            "student index {k} out of range for {students}"
        )));
    }
    let teacher_term = ce_hard_loss(&probs[k], p_t)?;
    let mut peer_sum = 0.0;
    match peer {
        PeerKind::Kl => {
            let own = softened_softmax(&logits[k], tau)?;
            for (l, z) in logits.iter().enumerate() {
                if l != k {
                    peer_sum += kl_loss(&own, &softened_softmax(z, tau)?)?;
                }
            }
        }
        PeerKind::CrossEntropyHard => {
            for (l, p) in probs.iter().enumerate() {
                if l != k {
                    peer_sum += ce_hard_loss(&probs[k], p)?;
                }
            }
        }
    }
    Ok(teacher_term + peer_sum / (students - 1) as f64)
}

/// Loss value split into its teacher and peer parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub teacher: f64,
    pub peer: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.teacher + self.peer
    }
}

/// A [`LossKind`] together with the KL variant flags; evaluates losses and
/// exact logit gradients for one student.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub kind: LossKind,
    pub kl: KlOptions,
}

impl Objective {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            kl: KlOptions::default(),
        }
    }

    pub fn with_kl_options(mut self, kl: KlOptions) -> Self {
        self.kl = kl;
        self
    }

    /// Loss terms and `d(total)/d(student_logits)`.
    ///
    /// `teacher_logits` are the frozen teacher outputs for the same sample;
    /// `peers` holds the other students' logits and must be non-empty exactly
    /// when the objective is mutual.
    pub fn evaluate(
        &self,
        student_logits: &[f64],
        teacher_logits: &[f64],
        peers: &[&[f64]],
    ) -> Result<(LossTerms, Vec<f64>)> {
        self.kind.validate()?;
        let classes = student_logits.len();
        check_pair(student_logits, teacher_logits)?;
        if let Some(p) = peers.iter().find(|p| p.len() != classes) {
            return Err(Error::Shape(format!(
                "peer logits have length {}, student has {classes}",
                p.len()
            )));
        }
        match self.kind {
            LossKind::Mutual { .. } if peers.is_empty() => {
                return Err(Error::Config(
                    "mutual learning needs at least 2 students".into(),
                ))
            }
            LossKind::Kl { .. } | LossKind::CrossEntropyHard if !peers.is_empty() => {
                return Err(Error::Config(format!("{} loss takes no peers", self.kind)))
            }
            _ => {}
        }
        Ok(self.evaluate_unchecked(student_logits, teacher_logits, peers))
    }

    pub(crate) fn evaluate_unchecked(
        &self,
        z: &[f64],
        teacher_logits: &[f64],
        peers: &[&[f64]],
    ) -> (LossTerms, Vec<f64>) {
        let mut grad = vec![0.0; z.len()];
        let teacher = match self.kind.teacher_loss() {
            TeacherLoss::CrossEntropyHard => {
                let label = argmax(&softmax_unchecked(teacher_logits, 1.0));
                ce_term(z, label, 1.0, &mut grad)
            }
            TeacherLoss::Kl { tau } => {
                let target = softmax_unchecked(teacher_logits, tau);
                self.kl_term(z, &target, tau, 1.0, &mut grad)
            }
        };
        let mut peer = 0.0;
        if let LossKind::Mutual {
            peer: kind, tau, ..
        } = self.kind
        {
            let weight = 1.0 / peers.len() as f64;
            for p in peers {
                peer += weight
                    * match kind {
                        PeerKind::Kl => {
                            let target = softmax_unchecked(p, tau);
                            self.kl_term(z, &target, tau, weight, &mut grad)
                        }
                        PeerKind::CrossEntropyHard => {
                            let label = argmax(&softmax_unchecked(p, 1.0));
                            ce_term(z, label, weight, &mut grad)
                        }
                    };
            }
        }
        (LossTerms { teacher, peer }, grad)
    }

    /// KL term against a constant target at temperature `tau`; adds
    /// `weight * gradient` into `grad` and returns the unweighted value.
    fn kl_term(&self, z: &[f64], target: &[f64], tau: f64, weight: f64, grad: &mut [f64]) -> f64 {
        let p = softmax_unchecked(z, tau);
        let scale = if self.kl.tau_squared { tau * tau } else { 1.0 };
        if self.kl.reversed {
            let value = kl_unchecked(target, &p);
            for ((g, &pj), &qj) in grad.iter_mut().zip(&p).zip(target) {
                *g += weight * scale * (pj - qj) / tau;
            }
            scale * value
        } else {
            let value = kl_unchecked(&p, target);
            let log_p = log_softmax_unchecked(z, tau);
            for (((g, &pj), &lpj), &qj) in grad.iter_mut().zip(&p).zip(&log_p).zip(target) {
                *g += weight * scale * pj * ((lpj - qj.max(PROB_FLOOR).ln()) - value) / tau;
            }
            scale * value
        }
    }
}

/// Hard-label cross-entropy on a label; adds `weight * (softmax(z) - onehot)` into `grad`.
///
/// The gradient is that of the unclamped `-log softmax(z)[label]`.
fn ce_term(z: &[f64], label: usize, weight: f64, grad: &mut [f64]) -> f64 {
    let p = softmax_unchecked(z, 1.0);
    for (j, (g, &pj)) in grad.iter_mut().zip(&p).enumerate() {
        let target = if j == label { 1.0 } else { 0.0 };
        *g += weight * (pj - target);
    }
    ce_unchecked(&p, label)
}

/// Softmax cross-entropy against a given label and its logit gradient.
pub fn label_cross_entropy(z: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; z.len()];
    let value = ce_term(z, label, 1.0, &mut grad);
    (value, grad)
}

/// Exact gradient of the chosen loss with respect to the student logits.
pub fn loss_grad_wrt_logits(
    objective: &Objective,
    student_logits: &[f64],
    teacher_logits: &[f64],
    peers: &[&[f64]],
) -> Result<Vec<f64>> {
    objective
        .evaluate(student_logits, teacher_logits, peers)
        .map(|(_, g)| g)
}

/// An [`Objective`] bound to a fixed teacher and peer context, usable as a
/// [`LogitLoss`] for gradient checking.
pub struct BoundObjective<'a> {
    pub objective: Objective,
    pub teacher_logits: &'a [f64],
    pub peers: &'a [&'a [f64]],
}

impl LogitLoss for BoundObjective<'_> {
    fn value(&self, logits: &[f64]) -> f64 {
        self.objective
            .evaluate_unchecked(logits, self.teacher_logits, self.peers)
            .0
            .total()
    }

    fn gradient(&self, logits: &[f64]) -> Vec<f64> {
        self.objective
            .evaluate_unchecked(logits, self.teacher_logits, self.peers)
            .1
    }
}
