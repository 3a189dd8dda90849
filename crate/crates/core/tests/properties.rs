mod common;

use proptest::prelude::*;
use xmodal_distill::data::{generate, inject_label_noise, DatasetSplit, GenConfig, SplitName};
use xmodal_distill::losses::{ce_hard_loss, kl_loss};
use xmodal_distill::nn::{softened_softmax, Mlp, ProbVector};
use xmodal_distill::trainer::{combine, CombineMode};

fn logits(max_c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 2..max_c)
}

fn prob(c: usize) -> impl Strategy<Value = ProbVector> {
    prop::collection::vec(0.0f64..1.0, c).prop_filter_map("all zero", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-3).then(|| ProbVector::new(v.iter().map(|x| x / s).collect()).unwrap())
    })
}

fn prob_pair() -> impl Strategy<Value = (ProbVector, ProbVector)> {
    (2usize..8).prop_flat_map(|c| (prob(c), prob(c)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_lands_on_the_simplex(z in logits(12), tau in 0.05f64..100.0) {
        let p = softened_softmax(&z, tau).unwrap();
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_ignores_constant_shifts(z in logits(12), tau in 0.1f64..50.0, shift in -1e3f64..1e3) {
        let p = softened_softmax(&z, tau).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let q = softened_softmax(&shifted, tau).unwrap();
        for (a, b) in p.iter().zip(q.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn entropy_grows_with_temperature(z in logits(10)) {
        let grid = [0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0];
        let h: Vec<f64> = grid.iter().map(|&t| softened_softmax(&z, t).unwrap().entropy()).collect();
        for w in h.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-12, "{h:?}");
        }
    }

    #[test]
    fn huge_temperature_is_uniform(z in prop::collection::vec(-10.0f64..10.0, 2..10)) {
        let p = softened_softmax(&z, 1e6).unwrap();
        let u = 1.0 / z.len() as f64;
        prop_assert!(p.iter().all(|v| (v - u).abs() < 1e-5));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal((p, q) in prob_pair()) {
        prop_assert!(kl_loss(&p, &q).unwrap() >= 0.0);
        prop_assert!(kl_loss(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ce_ignores_everything_but_the_teacher_argmax((ps, pt) in prob_pair()) {
        let hot = ProbVector::one_hot(pt.len(), pt.argmax()).unwrap();
        prop_assert_eq!(ce_hard_loss(&ps, &pt).unwrap(), ce_hard_loss(&ps, &hot).unwrap());
    }

    #[test]
    fn combined_ensemble_is_a_distribution((p, q) in prob_pair(), max in any::<bool>()) {
        let mode = if max { CombineMode::Max } else { CombineMode::Average };
        let out = combine(&[p.clone(), q.clone()], mode).unwrap();
        prop_assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let swapped = combine(&[q, p.clone()], mode).unwrap();
        for (a, b) in out.iter().zip(swapped.iter()) {
            prop_assert!((a - b).abs() < 1e-15);
        }
        let alone = combine(std::slice::from_ref(&p), mode).unwrap();
        prop_assert_eq!(alone.to_vec(), p.to_vec());
    }

    #[test]
    fn label_noise_flips_exactly_the_requested_count(
        n in 1usize..300,
        classes in 2usize..12,
        fraction in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let noisy = inject_label_noise(&labels, fraction, classes, seed).unwrap();
        let flipped = labels.iter().zip(&noisy).filter(|(a, b)| a != b).count();
        prop_assert_eq!(flipped, (fraction * n as f64).round() as usize);
        prop_assert!(noisy.iter().all(|&l| l < classes));
        prop_assert_eq!(noisy, inject_label_noise(&labels, fraction, classes, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn model_text_round_trip_is_exact(
        dims in prop::collection::vec(1usize..6, 2..5),
        seed in any::<u64>(),
    ) {
        let mut dims = dims;
        let last = dims.len() - 1;
        dims[last] = dims[last].max(2);
        let net = Mlp::seeded(&dims, seed).unwrap();
        let back = Mlp::from_text(&net.to_text()).unwrap();
        prop_assert_eq!(back, net);
    }

    #[test]
    fn dataset_text_round_trip_preserves_the_file_form(seed in any::<u64>(), classes in 2usize..5) {
        let cfg = GenConfig {
            classes,
            subjects: 4,
            train_subjects: 2,
            samples_per_subject_per_class: 2,
            dim_a: 3,
            dim_b: 2,
            seed,
            ..GenConfig::default()
        };
        let data = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        data.write_dir(dir.path()).unwrap();
        let back = DatasetSplit::read_dir(dir.path()).unwrap();
        for name in SplitName::ALL {
            prop_assert_eq!(back.split_to_text(name), data.split_to_text(name));
            let a = data.split(name);
            let b = back.split(name);
            prop_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                prop_assert_eq!(x.label, y.label);
                prop_assert_eq!(x.subject, y.subject);
                for (u, v) in x.modality_a.iter().chain(&x.modality_b).zip(y.modality_a.iter().chain(&y.modality_b)) {
                    prop_assert!((u - v).abs() <= 1e-8 * u.abs().max(1e-300));
                }
            }
        }
    }
}
