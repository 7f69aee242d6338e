use ccps_core::perturbation::{compute_jacobian, compute_logits, log_softmax, perturb, softmax, PerturbationConfig};
use ccps_core::probe_data::LmHead;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_head(rng: &mut ChaCha8Rng, vocab: usize, d_h: usize, bias: bool) -> LmHead {
    let scale = 1.0 / (d_h as f64).sqrt();
    let weights = (0..vocab * d_h).map(|_| (rng.gen_range(-1.7..1.7) * scale) as f32).collect();
    let bias = bias.then(|| (0..vocab).map(|_| rng.gen_range(-0.5f32..0.5)).collect());
    LmHead::new(vocab, d_h, weights, bias).unwrap()
}

fn random_hidden(rng: &mut ChaCha8Rng, d_h: usize) -> Vec<f32> {
    (0..d_h).map(|_| rng.gen_range(-2.0f32..2.0)).collect()
}

/// Double loop over the head, accumulated in f64.
fn naive_logits(head: &LmHead, h: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; head.vocab_size()];
    for (v, zv) in z.iter_mut().enumerate() {
        for (k, hk) in h.iter().enumerate() {
            *zv += head.weights()[v * head.hidden_dim() + k] as f64 * hk;
        }
        if let Some(b) = head.bias() {
            *zv += b[v] as f64;
        }
    }
    z
}

fn naive_loss(head: &LmHead, h: &[f64], t: usize) -> f64 {
    let z = naive_logits(head, h);
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[t]
}

fn to_f64(h: &[f32]) -> Vec<f64> {
    h.iter().map(|&x| x as f64).collect()
}

#[test]
fn logits_match_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for bias in [false, true] {
        let head = random_head(&mut rng, 6, 4, bias);
        let h = random_hidden(&mut rng, 4);
        let z = compute_logits(&head, &h).unwrap();
        for (a, b) in z.iter().zip(naive_logits(&head, &to_f64(&h))) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn jacobian_matches_central_differences_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let step = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let vocab = rng.gen_range(2..40);
        let d_h = rng.gen_range(1..24);
        let bias = rng.gen_bool(0.5);
        let head = random_head(&mut rng, vocab, d_h, bias);
        let h = random_hidden(&mut rng, d_h);
        let t = rng.gen_range(0..vocab);
        let (loss, jac) = compute_jacobian(&head, &h, t).unwrap();
        let base = to_f64(&h);
        assert!((loss - naive_loss(&head, &base, t)).abs() < 1e-10);

        let numeric: Vec<f64> = (0..d_h)
            .map(|k| {
                let mut up = base.clone();
                let mut down = base.clone();
                up[k] += step;
                down[k] -= step;
                (naive_loss(&head, &up, t) - naive_loss(&head, &down, t)) / (2.0 * step)
            })
            .collect();
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let err = jac.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs() / scale));
        worst = worst.max(err);
    }
    assert!(worst < 1e-6, "max relative error {worst}");
}

#[test]
fn moving_along_direction_increases_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let config = PerturbationConfig::default();
    let mut checked = 0;
    for _ in 0..200 {
        let vocab = rng.gen_range(2..20);
        let d_h = rng.gen_range(1..12);
        let head = random_head(&mut rng, vocab, d_h, true);
        let h = random_hidden(&mut rng, d_h);
        let t = rng.gen_range(0..vocab);
        let traj = perturb(&head, &h, t, &config).unwrap();
        let norm: f64 = traj.jacobian.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-8 {
            continue;
        }
        let moved: Vec<f64> = traj.hidden.iter().zip(&traj.direction).map(|(a, d)| a + 1e-3 * d).collect();
        assert!(naive_loss(&head, &moved, t) > traj.loss);
        checked += 1;
    }
    assert!(checked > 150);
}

#[test]
fn steps_lie_on_the_direction_at_scheduled_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let vocab = rng.gen_range(2..20);
        let d_h = rng.gen_range(1..12);
        let head = random_head(&mut rng, vocab, d_h, false);
        let h = random_hidden(&mut rng, d_h);
        let t = rng.gen_range(0..vocab);
        let config = PerturbationConfig {
            eps_max: rng.gen_range(0.5..40.0),
            steps: rng.gen_range(1..9),
        };
        let traj = perturb(&head, &h, t, &config).unwrap();
        if traj.is_degenerate() {
            continue;
        }
        let dnorm: f64 = traj.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((dnorm - 1.0).abs() < 1e-5);

        let mut prev = traj.hidden.clone();
        for (s, step) in traj.steps.iter().enumerate() {
            let eps = (s + 1) as f64 * config.eps_max / config.steps as f64;
            assert!((step.epsilon - eps).abs() < 1e-12);
            let diff: Vec<f64> = step.hidden.iter().zip(&traj.hidden).map(|(a, b)| a - b).collect();
            let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((dist - eps).abs() <= 1e-5 * eps);

            // Consecutive increments are parallel to the direction.
            let inc: Vec<f64> = step.hidden.iter().zip(&prev).map(|(a, b)| a - b).collect();
            let inc_norm = inc.iter().map(|v| v * v).sum::<f64>().sqrt();
            let cos = inc.iter().zip(&traj.direction).map(|(a, b)| a * b).sum::<f64>() / inc_norm;
            assert!((cos - 1.0).abs() < 1e-9);
            prev = step.hidden.clone();

            for (a, b) in step.logits.iter().zip(naive_logits(&head, &step.hidden)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn saturated_token_has_zero_direction_and_frozen_steps() {
    // Z[t] - max other = 100.
    let head = LmHead::new(3, 1, vec![10.0, 0.0, -10.0], None).unwrap();
    let traj = perturb(&head, &[10.0], 0, &PerturbationConfig::default()).unwrap();
    assert!(traj.jacobian.iter().all(|v| v.abs() < 1e-30));
    assert!(traj.is_degenerate());
    for step in &traj.steps {
        assert_eq!(step.hidden, traj.hidden);
        assert_eq!(step.logits, traj.logits);
    }
}

#[test]
fn token_out_of_range_is_an_error() {
    let head = LmHead::new(2, 1, vec![1.0, -1.0], None).unwrap();
    assert!(compute_jacobian(&head, &[1.0], 2).is_err());
    assert!(perturb(&head, &[1.0], 7, &PerturbationConfig::default()).is_err());
    assert!(compute_logits(&head, &[1.0, 2.0]).is_err());
}

proptest! {
    #[test]
    fn softmax_is_finite_for_huge_logits(z in prop::collection::vec(-1e4f64..1e4, 1..50)) {
        let p = softmax(&z);
        let lp = log_softmax(&z);
        prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!(lp.iter().all(|v| v.is_finite()));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn trajectory_is_finite_for_large_states(
        seed in any::<u64>(),
        scale in 1.0f32..1e3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = random_head(&mut rng, 8, 5, true);
        let h: Vec<f32> = random_hidden(&mut rng, 5).into_iter().map(|v| v * scale).collect();
        let traj = perturb(&head, &h, rng.gen_range(0..8), &PerturbationConfig::default()).unwrap();
        prop_assert!(traj.loss.is_finite());
        prop_assert!(traj.direction.iter().chain(&traj.jacobian).all(|v| v.is_finite()));
        for s in &traj.steps {
            prop_assert!(s.logits.iter().chain(&s.hidden).all(|v| v.is_finite()));
        }
        let dn: f64 = traj.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(traj.is_degenerate() || (dn - 1.0).abs() < 1e-5);
    }
}
