//! Independent reference implementations used as test oracles.
//!
//! The oracles never call into the library's loss or softmax code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmodal_distill::losses::{KlOptions, LossKind, Objective, PeerKind, TeacherLoss};
use xmodal_distill::nn::Mlp;

pub const FLOOR: f64 = 1e-12;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct softmax of `z / tau` without max subtraction (inputs kept small).
pub fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let e: Vec<f64> = z.iter().map(|v| (v / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    let mut i = 1;
    while i < v.len() {
        if v[i] > v[best] {
            best = i;
        }
        i += 1;
    }
    best
}

/// `sum p log p - p log q` term by term.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for c in 0..p.len() {
        if p[c] == 0.0 {
            continue;
        }
        let qc = if q[c] < FLOOR { FLOOR } else { q[c] };
        total += p[c] * p[c].ln() - p[c] * qc.ln();
    }
    total
}

pub fn ce_hard(p_s: &[f64], p_t: &[f64]) -> f64 {
    let c = first_argmax(p_t);
    let p = if p_s[c] < FLOOR { FLOOR } else { p_s[c] };
    -p.ln()
}

/// Student `k`'s mutual loss with a cross-entropy teacher term, evaluated term by term.
pub fn mutual(k: usize, logits: &[Vec<f64>], p_t: &[f64], tau: f64, peer_ce: bool) -> f64 {
    let kk = logits.len();
    let p_k = softmax(&logits[k], 1.0);
    let mut peer = 0.0;
    for (l, z) in logits.iter().enumerate() {
        if l == k {
            continue;
        }
        peer += if peer_ce {
            ce_hard(&p_k, &softmax(z, 1.0))
        } else {
            kl(&softmax(&logits[k], tau), &softmax(z, tau))
        };
    }
    ce_hard(&p_k, p_t) + peer / (kk as f64 - 1.0)
}

/// A random point on the simplex; roughly one draw in five has a zero entry.
pub fn random_prob(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..c)
        .map(|_| rng.random_range(0.0..1.0f64).powi(2))
        .collect();
    if rng.random_range(0..5) == 0 {
        let i = rng.random_range(0..c);
        v[i] = 0.0;
    }
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter().map(|x| x / s).collect()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Central differences of `f` at `x`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let plus = f(&probe);
            probe[i] = x[i] - h;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Rebuilds a network of `template`'s shape from flat parameters by writing
/// the model text by hand, so no library parameter indexing is involved.
pub fn net_from_flat(template: &Mlp, params: &[f64]) -> Mlp {
    let mut text = String::from("layers");
    for d in template.dims() {
        text.push_str(&format!(" {d}"));
    }
    text.push('\n');
    let mut it = params.iter();
    let mut line = |n: usize, text: &mut String| {
        let cells: Vec<String> = (0..n)
            .map(|_| format!("{:e}", it.next().unwrap()))
            .collect();
        text.push_str(&cells.join(" "));
        text.push('\n');
    };
    for layer in template.layers() {
        for _ in 0..layer.out_dim() {
            line(layer.in_dim(), &mut text);
        }
        line(layer.out_dim(), &mut text);
    }
    Mlp::from_text(&text).unwrap()
}

/// Every loss kind and option combination, with the number of peers it needs.
pub fn objectives() -> Vec<(Objective, usize)> {
    let plain = KlOptions::default();
    let rev = KlOptions {
        reversed: true,
        tau_squared: false,
    };
    let sq = KlOptions {
        reversed: false,
        tau_squared: true,
    };
    let mut out = Vec::new();
    for tau in [1.0, 2.0, 10.0] {
        for kl in [plain, rev, sq] {
            out.push((Objective::new(LossKind::Kl { tau }).with_kl_options(kl), 0));
        }
    }
    out.push((Objective::new(LossKind::CrossEntropyHard), 0));
    for peers in [1, 2, 3] {
        for peer in [PeerKind::Kl, PeerKind::CrossEntropyHard] {
            for teacher in [TeacherLoss::CrossEntropyHard, TeacherLoss::Kl { tau: 2.0 }] {
                out.push((
                    Objective::new(LossKind::Mutual {
                        teacher,
                        peer,
                        tau: 10.0,
                    }),
                    peers,
                ));
            }
        }
    }
    out
}

/// A random one-hidden-layer net and an input away from every rectifier kink.
pub fn draw_net(r: &mut ChaCha8Rng, c: usize) -> (Mlp, Vec<f64>) {
    loop {
        let input = r.random_range(2..6);
        let hidden = r.random_range(3..8);
        let net = Mlp::seeded(&[input, hidden, c], r.random()).unwrap();
        let x = random_vec(r, input, 2.0);
        if net.min_hidden_margin(&x).unwrap() > 1e-3 {
            return (net, x);
        }
    }
}
