//! Dense feed-forward classifiers with hand-derived backpropagation.
//!
//! Hidden layers use the rectifier, the output layer is linear and produces
//! class logits. Weights are stored row-major with shape `(out_dim, in_dim)`.
//! All arithmetic is `f64`.

use std::fmt::Write as _;
use std::ops::Deref;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tolerance on the sum of a [`ProbVector`].
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Path reported by model parse errors that did not come from a file.
pub const MODEL_TEXT: &str = "<model text>";

/// Unnormalized class scores produced by the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Shape(format!(
                "logit vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite logit {v}")));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for LogitVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A point on the class-probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates simplex membership: entries in `[0, 1]` summing to one within
    /// [`SIMPLEX_TOLERANCE`].
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Shape(format!(
                "probability vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("probability {v} outside [0, 1]")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Domain(format!("probabilities sum to {sum}")));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(values.len() >= 2);
        Self(values)
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        Self::new(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, class: usize) -> Result<Self> {
        if class >= classes {
            return Err(Error::Shape(format!(
                "class {class} out of range for {classes} classes"
            )));
        }
        let mut v = vec![0.0; classes];
        v[class] = 1.0;
        Self::new(v)
    }

    /// Most probable class, lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / tau`, stabilized by subtracting the maximum logit.
pub fn softened_softmax(logits: &[f64], tau: f64) -> Result<ProbVector> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Domain(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if logits.len() < 2 {
        return Err(Error::Shape(format!(
            "softmax needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite logit {v}")));
    }
    Ok(ProbVector::from_raw(softmax_unchecked(logits, tau)))
}

pub(crate) fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Natural log of `softmax(logits / tau)`, computed without forming the probabilities.
pub(crate) fn log_softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|&z| (z - max) / tau).collect();
    let log_sum = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - log_sum).collect()
}

/// One affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    in_dim: usize,
    out_dim: usize,
    /// Row-major `(out_dim, in_dim)`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Shape("layer dimensions must be positive".into()));
        }
        if weights.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "layer {in_dim}->{out_dim} expects {} weights and {out_dim} biases, got {} and {}",
                in_dim * out_dim,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, &b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

/// A multilayer perceptron classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// Builds a network from explicit layers; consecutive dimensions must agree.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer output {} does not feed layer input {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        if layers.last().map_or(0, |l| l.out_dim) < 2 {
            return Err(Error::Shape("output layer needs at least 2 classes".into()));
        }
        Ok(Self { layers })
    }

    /// All-zero parameters.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::build(dims, |_, _| 0.0)
    }

    /// Parameters drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn seeded(dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(dims, |fan_in, _| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            rng.random_range(-bound..=bound)
        })
    }

    fn build(dims: &[usize], mut init: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Shape(format!(
                "layer dims need input and output sizes, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let weights = (0..i * o).map(|_| init(i, o)).collect();
                let bias = (0..o).map(|_| init(i, o)).collect();
                Dense::new(i, o, weights, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// `[input, hidden.., classes]`.
    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].in_dim)
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<LogitVector> {
        self.check_input(input)?;
        Ok(LogitVector(self.logits_unchecked(input)))
    }

    pub(crate) fn logits_unchecked(&self, input: &[f64]) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut act = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            act = layer.apply(&act);
            if i < last {
                relu_in_place(&mut act);
            }
        }
        act
    }

    /// Pre-activations of every layer; the last entry is the logit vector.
    fn pre_activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let last = self.layers.len() - 1;
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let z = match i {
                0 => layer.apply(input),
                _ => {
                    let mut a = out[i - 1].clone();
                    relu_in_place(&mut a);
                    layer.apply(&a)
                }
            };
            out.push(z);
            debug_assert!(i <= last);
        }
        out
    }

    /// Smallest distance of any hidden pre-activation from the rectifier kink.
    ///
    /// Finite-difference checks are only meaningful when this exceeds the step size.
    pub fn min_hidden_margin(&self, input: &[f64]) -> Result<f64> {
        self.check_input(input)?;
        let pre = self.pre_activations(input);
        Ok(pre[..pre.len() - 1]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs())))
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// gradient of that loss with respect to the logits.
    pub fn backward(&self, input: &[f64], logit_grad: &[f64]) -> Result<GradientSet> {
        let mut grads = GradientSet::zeros_like(self);
        self.backward_into(input, logit_grad, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `scale * d(loss)/d(params)` into `grads`.
    pub fn backward_into(
        &self,
        input: &[f64],
        logit_grad: &[f64],
        scale: f64,
        grads: &mut GradientSet,
    ) -> Result<()> {
        self.check_input(input)?;
        if logit_grad.len() != self.num_classes() {
            return Err(Error::Shape(format!(
                "logit gradient has length {}, network has {} classes",
                logit_grad.len(),
                self.num_classes()
            )));
        }
        grads.check_congruent(self)?;
        let pre = self.pre_activations(input);
        let mut delta: Vec<f64> = logit_grad.iter().map(|g| g * scale).collect();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let below: Vec<f64> = if l == 0 {
                input.to_vec()
            } else {
                pre[l - 1].iter().map(|&z| z.max(0.0)).collect()
            };
            let g = &mut grads.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (gw, &a) in row.iter_mut().zip(&below) {
                    *gw += d * a;
                }
                g.bias[o] += d;
            }
            if l > 0 {
                let mut next = vec![0.0; layer.in_dim];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (n, &w) in next.iter_mut().zip(row) {
                        *n += w * d;
                    }
                }
                for (n, &z) in next.iter_mut().zip(&pre[l - 1]) {
                    if z <= 0.0 {
                        *n = 0.0;
                    }
                }
                delta = next;
            }
        }
        Ok(())
    }

    /// `p <- p - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::Domain(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        grads.check_congruent(self)?;
        if !grads.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (p, d) in layer.weights.iter_mut().zip(&g.weights) {
                *p -= lr * d;
            }
            for (p, d) in layer.bias.iter_mut().zip(&g.bias) {
                *p -= lr * d;
            }
        }
        if !self.is_finite() {
            return Err(Error::Numeric("non-finite parameter after update".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Parameters flattened in layer order: weights row-major, then bias.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            if index < nw {
                return &mut layer.weights[index];
            }
            index -= nw;
            if index < layer.bias.len() {
                return &mut layer.bias[index];
            }
            index -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Line-oriented text form: a `layers d0 d1 .. dn` header, then for each
    /// layer one line per weight row followed by one bias line, 17 significant
    /// digits.
    pub fn to_text(&self) -> String {
        let mut out = String::from("layers");
        for d in self.dims() {
            let _ = write!(out, " {d}");
        }
        out.push('\n');
        for layer in &self.layers {
            for row in layer.weights.chunks_exact(layer.in_dim) {
                push_row(&mut out, row);
            }
            push_row(&mut out, &layer.bias);
        }
        out
    }

    /// Parses the text written by [`Mlp::to_text`]. Parse errors carry the
    /// placeholder path [`MODEL_TEXT`]; callers reading a file replace it.
    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: PathBuf::from(MODEL_TEXT),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| bad(1, "empty model text".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("layers") {
            return Err(bad(1, "model header must start with `layers`".into()));
        }
        let dims = fields
            .map(|f| {
                f.parse::<usize>()
                    .map_err(|e| bad(1, format!("bad layer dim {f:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(&dims)?;
        let total = text.lines().count();
        for layer in &mut net.layers {
            let rows = layer.out_dim;
            for r in 0..=rows {
                let (n, line) = lines
                    .next()
                    .ok_or_else(|| bad(total + 1, "model text truncated".into()))?;
                let values = line
                    .split_whitespace()
                    .map(|f| {
                        f.parse::<f64>()
                            .map_err(|e| bad(n + 1, format!("bad value {f:?}: {e}")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let target = if r < rows {
                    &mut layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim]
                } else {
                    &mut layer.bias[..]
                };
                if values.len() != target.len() {
                    return Err(bad(
                        n + 1,
                        format!("expected {} values, got {}", target.len(), values.len()),
                    ));
                }
                target.copy_from_slice(&values);
            }
        }
        if let Some((n, _)) = lines.next() {
            return Err(bad(n + 1, "unexpected trailing data".into()));
        }
        if !net.is_finite() {
            return Err(Error::Numeric(
                "model contains non-finite parameters".into(),
            ));
        }
        Ok(net)
    }
}

fn push_row(out: &mut String, row: &[f64]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v:.16e}");
    }
    out.push('\n');
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Per-parameter gradients, shape-congruent with an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: vec![0.0; l.weights.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    fn check_congruent(&self, net: &Mlp) -> Result<()> {
        let ok =
            self.layers.len() == net.layers.len()
                && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                    g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len()
                });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(
                "gradient set does not match network shape".into(),
            ))
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weights
                .iter_mut()
                .chain(g.bias.iter_mut())
                .for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weights.iter().chain(&g.bias).all(|v| v.is_finite()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
            .collect()
    }
}

/// A differentiable scalar function of a logit vector.
pub trait LogitLoss {
    fn value(&self, logits: &[f64]) -> f64;
    fn gradient(&self, logits: &[f64]) -> Vec<f64>;
}

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a small floor on the denominator so that two
/// near-zero gradients compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Worst relative error between backpropagated parameter gradients and
/// central finite differences of `loss(forward(net, input))`.
pub fn grad_check(net: &Mlp, input: &[f64], loss: &dyn LogitLoss, step: f64) -> Result<f64> {
    let logits = net.forward(input)?;
    let analytic = net.backward(input, &loss.gradient(&logits))?.flat();
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let p = probe.param_mut(i);
        let orig = *p;
        *p = orig + step;
        let plus = loss.value(&probe.logits_unchecked(input));
        *probe.param_mut(i) = orig - step;
        let minus = loss.value(&probe.logits_unchecked(input));
        *probe.param_mut(i) = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        target: Vec<f64>,
    }

    impl LogitLoss for Quadratic {
        fn value(&self, z: &[f64]) -> f64 {
            z.iter()
                .zip(&self.target)
                .map(|(a, b)| 0.5 * (a - b).powi(2))
                .sum()
        }
        fn gradient(&self, z: &[f64]) -> Vec<f64> {
            z.iter().zip(&self.target).map(|(a, b)| a - b).collect()
        }
    }

    fn two_layer() -> Mlp {
        // 2 -> 2 (relu) -> 2
        let l0 = Dense::new(2, 2, vec![1.0, 2.0, -1.0, 0.5], vec![0.1, 0.2]).unwrap();
        let l1 = Dense::new(2, 2, vec![0.3, -0.7, 1.5, 0.25], vec![0.0, -0.1]).unwrap();
        Mlp::from_layers(vec![l0, l1]).unwrap()
    }

    #[test]
    fn zero_net_gives_zero_logits() {
        let net = Mlp::zeros(&[3, 4, 5]).unwrap();
        assert_eq!(&*net.forward(&[1.0, -2.0, 3.0]).unwrap(), &[0.0; 5]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let net = Mlp::from_layers(vec![Dense::new(3, 3, w, vec![0.0; 3]).unwrap()]).unwrap();
        assert_eq!(&*net.forward(&[0.5, -1.5, 2.0]).unwrap(), &[0.5, -1.5, 2.0]);
    }

    #[test]
    fn hand_set_two_layer_forward() {
        // Straight-line evaluation on [1, -1]:
        // h_pre = [1*1 + 2*-1 + 0.1, -1*1 + 0.5*-1 + 0.2] = [-0.9, -1.3] -> relu [0, 0]
        // logits = bias = [0.0, -0.1]
        let net = two_layer();
        assert_eq!(&*net.forward(&[1.0, -1.0]).unwrap(), &[0.0, -0.1]);
        // On [1, 1]: h_pre = [3.1, -0.3] -> [3.1, 0]; logits = [0.93, 4.55]
        let z = net.forward(&[1.0, 1.0]).unwrap();
        assert!((z[0] - 0.3 * 3.1).abs() < 1e-15);
        assert!((z[1] - (1.5 * 3.1 - 0.1)).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = two_layer();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let p = softened_softmax(&[0.0, 0.0], 1.0).unwrap();
        assert_eq!(&*p, &[0.5, 0.5]);
        let p = softened_softmax(&[4f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15 && (p[1] - 0.2).abs() < 1e-15);
        let e = std::f64::consts::E;
        let p = softened_softmax(&[2.0, 0.0], 2.0).unwrap();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.731059).abs() < 1e-6 && (p[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn softmax_domain_errors() {
        assert!(matches!(
            softened_softmax(&[1.0, 2.0], 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            softened_softmax(&[1.0, 2.0], -1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            softened_softmax(&[f64::NAN, 2.0], 1.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            softened_softmax(&[f64::INFINITY, 2.0], 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softened_softmax(&[1e300, -1e300, 0.0], 1.0).unwrap();
        assert_eq!(&*p, &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.45, 0.45]), 1);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let net = Mlp::seeded(&[4, 6, 3], 7).unwrap();
        let g = net.backward(&[1.0, 2.0, 3.0, 4.0], &[0.0; 3]).unwrap();
        assert!(g.flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_backward_matches_input() {
        let net = Mlp::seeded(&[3, 4], 1).unwrap();
        let x = [0.5, -2.0, 3.0];
        let g = net.backward(&x, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(&g.layers[0].weights[..3], &x);
        assert!(g.layers[0].weights[3..].iter().all(|&v| v == 0.0));
        assert_eq!(g.layers[0].bias, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_bad_gradient_length() {
        let net = Mlp::seeded(&[3, 4], 1).unwrap();
        assert!(matches!(
            net.backward(&[0.0; 3], &[1.0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut net = Mlp::from_layers(vec![
            Dense::new(1, 2, vec![1.0, 1.0], vec![0.0, 0.0]).unwrap()
        ])
        .unwrap();
        let mut g = GradientSet::zeros_like(&net);
        g.layers[0].weights[0] = 2.0;
        net.sgd_step(&g, 0.1).unwrap();
        assert!((net.layers()[0].weights()[0] - 0.8).abs() < 1e-15);
        assert_eq!(net.layers()[0].weights()[1], 1.0);
    }

    #[test]
    fn sgd_step_preconditions() {
        let mut net = Mlp::seeded(&[2, 3], 3).unwrap();
        let before = net.clone();
        let zeros = GradientSet::zeros_like(&net);
        assert!(matches!(net.sgd_step(&zeros, 0.0), Err(Error::Domain(_))));
        net.sgd_step(&zeros, 0.5).unwrap();
        assert_eq!(net, before);
        let mut bad = zeros.clone();
        bad.layers[0].bias[1] = f64::NAN;
        assert!(matches!(net.sgd_step(&bad, 0.1), Err(Error::Numeric(_))));
        let other = GradientSet::zeros_like(&Mlp::seeded(&[2, 4], 0).unwrap());
        assert!(matches!(net.sgd_step(&other, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn sgd_step_matches_elementwise_loop() {
        let mut net = Mlp::seeded(&[5, 7, 3], 11).unwrap();
        let x = [0.3, -0.2, 0.9, 1.1, -0.4];
        let g = net.backward(&x, &[0.5, -1.0, 0.25]).unwrap();
        let expected: Vec<f64> = net
            .flat_params()
            .iter()
            .zip(g.flat())
            .map(|(p, d)| p - 0.05 * d)
            .collect();
        net.sgd_step(&g, 0.05).unwrap();
        assert_eq!(net.flat_params(), expected);
    }

    #[test]
    fn seeded_init_respects_fan_in_bound() {
        let net = Mlp::seeded(&[16, 32, 10], 42).unwrap();
        for layer in net.layers() {
            let bound = 1.0 / (layer.in_dim() as f64).sqrt();
            assert!(layer
                .weights()
                .iter()
                .chain(layer.bias())
                .all(|v| v.abs() <= bound));
        }
        assert_eq!(net, Mlp::seeded(&[16, 32, 10], 42).unwrap());
        assert_ne!(net, Mlp::seeded(&[16, 32, 10], 43).unwrap());
    }

    #[test]
    fn quadratic_loss_on_linear_net_is_exact() {
        let net = Mlp::seeded(&[4, 3], 5).unwrap();
        let loss = Quadratic {
            target: vec![0.2, -0.4, 1.0],
        };
        // Quadratic in the parameters, so central differences are exact up to rounding.
        let err = grad_check(&net, &[0.5, -1.0, 0.25, 2.0], &loss, FD_STEP).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn model_text_round_trip() {
        let net = Mlp::seeded(&[3, 5, 2], 9).unwrap();
        let text = net.to_text();
        assert!(text.starts_with("layers 3 5 2\n"));
        assert_eq!(Mlp::from_text(&text).unwrap(), net);
    }

    #[test]
    fn model_text_rejects_truncation() {
        let net = Mlp::seeded(&[3, 5, 2], 9).unwrap();
        let text = net.to_text();
        let cut: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(matches!(Mlp::from_text(&cut), Err(Error::Parse { .. })));
    }
}
