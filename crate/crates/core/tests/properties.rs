//! Property tests over randomly drawn small instances.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssnn::data::{generate_ssnn_dataset, NormStats};
use ssnn::eval::{label_error, r2_probe, segmentation_error};
use ssnn::generative::{countdown_joint_log_prob, countdown_log_q, countdown_path, GenDims, GenerativeParams, LatentPath, Sequence};
use ssnn::inference::{gumbel_softmax, path_log_prob, Noise, SampleMode, Temperature};
use ssnn::model::{Model, ModelDims};
use ssnn::numerics::{log_sum_exp, softmax, Gradients, Tape, Tensor};
use ssnn::oracle::{enumerate_paths, exact_log_likelihood, map_segmentation_scored};
use ssnn::training::clip_gradients;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_seq(r: &mut ChaCha8Rng, steps: usize, m: usize) -> Sequence {
    let data = (0..steps * m).map(|_| r.random_range(-2.0..2.0)).collect();
    Sequence::new("x", steps, m, data).unwrap()
}

fn model(r: &mut ChaCha8Rng, k: usize, dur: usize) -> Model {
    let dims = ModelDims {
        states: k,
        max_dur: dur,
        obs_dim: 2,
        hidden: 3,
        encoder: 3,
        summary: 3,
    };
    Model::random(dims, r).unwrap()
}

/// A random valid path of length `steps`.
fn random_path(r: &mut ChaCha8Rng, steps: usize, k: usize, dur: usize) -> LatentPath {
    let mut segs = Vec::new();
    let mut covered = 0;
    while covered < steps {
        let d = r.random_range(1..=dur);
        segs.push((r.random_range(0..k), d));
        covered += d;
    }
    LatentPath::from_segments(&segs, steps)
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_and_lse_are_shift_invariant(v in prop::collection::vec(-20.0f64..20.0, 1..8), c in -50.0f64..50.0) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        for (a, b) in softmax(&v).iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&v) - c).abs() < 1e-10);
    }

    #[test]
    fn reverse_mode_is_linear(x in vec_strategy(4), w in vec_strategy(4), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let grads = |ca: f64, cb: f64| -> Gradients {
            let mut tape = Tape::new();
            let xv = tape.param("x", &Tensor::vector(x.clone()));
            let wv = tape.constant_vec(&w);
            let t = tape.tanh(xv);
            let l1 = tape.dot(t, wv);
            let sm = tape.log_sum_exp(xv);
            let e = tape.exp(sm);
            let l1 = tape.affine(l1, ca, 0.0);
            let l2 = tape.affine(e, cb, 0.0);
            let loss = tape.add(l1, l2);
            tape.backward(loss).unwrap()
        };
        let g1 = grads(1.0, 0.0);
        let g2 = grads(0.0, 1.0);
        let g = grads(a, b);
        let (g, g1, g2) = (g.get("x").unwrap(), g1.get("x").unwrap(), g2.get("x").unwrap());
        for i in 0..4 {
            prop_assert!((g.data()[i] - (a * g1.data()[i] + b * g2.data()[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn clipping_preserves_direction(v in vec_strategy(6), max in 0.1f64..5.0) {
        let mut g = Gradients::default();
        g.insert("a".into(), Tensor::vector(v[..3].to_vec()));
        g.insert("b".into(), Tensor::vector(v[3..].to_vec()));
        let before: Vec<f64> = g.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let norm = clip_gradients(&mut g, max);
        let after: Vec<f64> = g.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let scale = if norm > max { max / norm } else { 1.0 };
        for (x, y) in before.iter().zip(&after) {
            prop_assert!((x * scale - y).abs() < 1e-12);
        }
        prop_assert!(g.norm() <= max.max(norm) + 1e-12);
    }

    #[test]
    fn transitions_normalise(seed in any::<u64>(), k in 1usize..4, dur in 1usize..4) {
        let mut r = rng(seed);
        let p = GenerativeParams::random(GenDims { states: k, max_dur: dur, obs_dim: 2, hidden: 3 }, &mut r).unwrap();
        for zp in 0..k {
            for dp in 1..=dur {
                let lp = p.transition_log_probs(zp, dp).unwrap();
                let s: f64 = lp.iter().map(|v| v.exp()).sum();
                prop_assert!((s - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sampled_sequences_have_finite_joint(seed in any::<u64>(), k in 1usize..4, dur in 1usize..5, steps in 1usize..15) {
        let mut r = rng(seed);
        let p = GenerativeParams::random(GenDims { states: k, max_dur: dur, obs_dim: 2, hidden: 3 }, &mut r).unwrap();
        let (x, path) = p.sample_sequence(steps, "s", &mut r).unwrap();
        prop_assert!(path.is_valid(k, dur));
        prop_assert!(p.joint_log_prob(&x, &path).unwrap().is_finite());
    }

    #[test]
    fn any_path_is_bounded_by_the_likelihood_and_map(seed in any::<u64>(), k in 1usize..4, dur in 1usize..4, steps in 1usize..8) {
        let mut r = rng(seed);
        let m = model(&mut r, k, dur);
        let x = random_seq(&mut r, steps, 2);
        let ll = exact_log_likelihood(&x, &m.gen).unwrap();
        let (_, best) = map_segmentation_scored(&x, &m.gen).unwrap();
        for _ in 0..50 {
            let path = random_path(&mut r, steps, k, dur);
            let j = m.gen.joint_log_prob(&x, &path).unwrap();
            prop_assert!(j <= ll + 1e-9 * ll.abs().max(1.0));
            prop_assert!(j <= best + 1e-9 * best.abs().max(1.0));
        }
    }

    #[test]
    fn joint_sums_to_likelihood(seed in any::<u64>(), k in 1usize..4, dur in 1usize..4, steps in 1usize..6) {
        let mut r = rng(seed);
        let m = model(&mut r, k, dur);
        let x = random_seq(&mut r, steps, 2);
        let joints: Vec<f64> = enumerate_paths(steps, k, dur).unwrap().iter().map(|p| m.gen.joint_log_prob(&x, p).unwrap()).collect();
        let ll = exact_log_likelihood(&x, &m.gen).unwrap();
        prop_assert!(((log_sum_exp(&joints) - ll) / ll).abs() < 1e-8);
    }

    #[test]
    fn countdown_with_one_hot_boundaries_is_the_hard_joint(seed in any::<u64>(), k in 1usize..4, dur in 1usize..5, steps in 1usize..12) {
        let mut r = rng(seed);
        let m = model(&mut r, k, dur);
        let x = random_seq(&mut r, steps, 2);
        let path = random_path(&mut r, steps, k, dur);
        let n = k * dur;
        let table = m.inf.posterior_table(&x).unwrap();
        let mut tape = Tape::new();
        let gv = m.gen.bind(&mut tape);
        let mut candidates = Vec::with_capacity(steps);
        let mut log_probs = Vec::with_capacity(steps);
        let mut next_start = 0;
        for t in 0..steps {
            let mut e = vec![0.0; n];
            if t == next_start {
                e[path.z[t] * dur + path.d[t] - 1] = 1.0;
                next_start += path.d[t];
            } else {
                // off-boundary candidates carry no weight, so any simplex point will do
                let raw: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
                e = softmax(&raw);
            }
            candidates.push(tape.constant_vec(&e));
            log_probs.push(tape.constant_vec(table.slice(t)));
        }
        let cd = countdown_path(&mut tape, &candidates, dur);
        let joint = countdown_joint_log_prob(&mut tape, &gv, &x, &cd, &candidates);
        let log_q = countdown_log_q(&mut tape, &cd, &candidates, &log_probs);
        let want = m.gen.joint_log_prob(&x, &path).unwrap();
        prop_assert!((tape.scalar(joint) - want).abs() < 1e-10 * want.abs().max(1.0));
        let want_q = path_log_prob(&table, &path, dur);
        prop_assert!((tape.scalar(log_q) - want_q).abs() < 1e-10 * want_q.abs().max(1.0));
    }

    #[test]
    fn posterior_draws_lie_on_the_simplex_inside_prior_support(seed in any::<u64>(), k in 1usize..4, dur in 1usize..4, steps in 1usize..12, relaxed in any::<bool>()) {
        let mut r = rng(seed);
        let m = model(&mut r, k, dur);
        let x = random_seq(&mut r, steps, 2);
        let mode = if relaxed { SampleMode::Relaxed } else { SampleMode::HardSt };
        let tau = Temperature::new(0.3).unwrap();
        let path = m.inf.sample_posterior_path(&x, tau, Noise::Fresh(&mut r), mode).unwrap();
        for draw in &path.draws {
            prop_assert!(draw.y.iter().all(|v| *v >= 0.0));
            prop_assert!((draw.y.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
        prop_assert!(path.hard.is_valid(k, dur));
        prop_assert!(m.gen.joint_log_prob(&x, &path.hard).unwrap().is_finite());
        prop_assert!(m.inf.posterior_log_prob(&path.hard, &x).unwrap().is_finite());
    }

    #[test]
    fn inference_is_deterministic_under_a_seed(seed in any::<u64>()) {
        let mut r = rng(seed);
        let m = model(&mut r, 2, 3);
        let x = random_seq(&mut r, 7, 2);
        let tau = Temperature::new(0.5).unwrap();
        let a = m.inf.sample_posterior_path(&x, tau, Noise::Fresh(&mut rng(seed ^ 1)), SampleMode::HardSt).unwrap();
        let b = m.inf.sample_posterior_path(&x, tau, Noise::Fresh(&mut rng(seed ^ 1)), SampleMode::HardSt).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn gumbel_argmax_ignores_temperature(logits in vec_strategy(5), g in vec_strategy(5), t1 in 0.01f64..5.0, t2 in 0.01f64..5.0) {
        let y1 = gumbel_softmax(&logits, Temperature::new(t1).unwrap(), &g);
        let y2 = gumbel_softmax(&logits, Temperature::new(t2).unwrap(), &g);
        let am = |y: &[f64]| (0..y.len()).fold(0, |b, i| if y[i] > y[b] { i } else { b });
        let perturbed: Vec<f64> = logits.iter().zip(&g).map(|(l, n)| l + n).collect();
        prop_assert_eq!(am(&y1), am(&perturbed));
        prop_assert_eq!(am(&y2), am(&perturbed));
    }

    #[test]
    fn segmentation_error_is_relabel_invariant(labels in prop::collection::vec(0usize..3, 1..40), other in prop::collection::vec(0usize..3, 40), perm in Just([2usize, 0, 1])) {
        let truth: Vec<usize> = labels.clone();
        let pred: Vec<usize> = other[..labels.len()].to_vec();
        let base = label_error(&pred, &truth).unwrap();
        let relabelled: Vec<usize> = pred.iter().map(|&p| perm[p]).collect();
        prop_assert!((label_error(&relabelled, &truth).unwrap() - base).abs() < 1e-12);
        let relabelled_truth: Vec<usize> = truth.iter().map(|&p| perm[p]).collect();
        prop_assert!((label_error(&pred, &relabelled_truth).unwrap() - base).abs() < 1e-12);
        prop_assert!((label_error(&truth, &pred).unwrap() - base).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
        let as_path = |z: &[usize]| LatentPath { z: z.to_vec(), d: vec![1; z.len()] };
        prop_assert!((segmentation_error(&as_path(&pred), &as_path(&truth)).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn r2_is_non_negative_in_sample(seed in any::<u64>(), n in 8usize..40) {
        let mut r = rng(seed);
        let f: Vec<f64> = (0..n * 2).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let fit = r2_probe(&Tensor::matrix(n, 2, f), &Tensor::matrix(n, 1, y)).unwrap();
        prop_assert!(fit.r2[0] >= -1e-12 && fit.r2[0] <= 1.0 + 1e-12);
    }

    #[test]
    fn normalised_data_is_standard(seed in any::<u64>()) {
        let mut r = rng(seed);
        let xs: Vec<Sequence> = (0..3).map(|_| {
            let data = (0..20).map(|_| r.random_range(-3.0..7.0)).collect();
            Sequence::new("x", 10, 2, data).unwrap()
        }).collect();
        let stats = NormStats::compute(&xs).unwrap();
        let ys = stats.apply_all(&xs).unwrap();
        let n = 30.0;
        for j in 0..2 {
            let mean: f64 = ys.iter().flat_map(|y| y.rows().map(move |row| row[j])).sum::<f64>() / n;
            let var: f64 = ys.iter().flat_map(|y| y.rows().map(move |row| (row[j] - mean).powi(2))).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn generators_repeat_under_a_seed(seed in any::<u64>()) {
        let p = GenerativeParams::random(GenDims { states: 2, max_dur: 3, obs_dim: 2, hidden: 2 }, &mut rng(seed)).unwrap();
        let a = generate_ssnn_dataset(&p, 3, 12, &mut rng(seed)).unwrap();
        let b = generate_ssnn_dataset(&p, 3, 12, &mut rng(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}
