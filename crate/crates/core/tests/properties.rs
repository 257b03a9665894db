use proptest::prelude::*;
use stylevar::grpo::{advantage, clipped_pg, k3_kl, panw_scale_weights, panw_weights};
use stylevar::sampler::filter_top_k_top_p;
use stylevar::tokenizer::ScaleSchedule;

const TABLE_1: [f64; 10] = [3.37, 1.28, 0.72, 0.48, 0.35, 0.27, 0.18, 0.13, 0.09, 0.07];

fn distribution(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

proptest! {
    #[test]
    fn filter_is_a_distribution_on_a_small_support(
        raw in prop::collection::vec(0.001f64..1.0, 1..80),
        top_k in 1usize..100,
        top_p in 0.01f64..=1.0,
    ) {
        let p = distribution(&raw);
        let f = filter_top_k_top_p(&p, top_k, top_p).unwrap();
        prop_assert_eq!(f.len(), p.len());
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let support = f.iter().filter(|&&v| v > 0.0).count();
        prop_assert!(support >= 1 && support <= top_k.min(p.len()));
        // Kept entries are at least as likely as dropped ones.
        let kept_min = p.iter().zip(&f).filter(|(_, &q)| q > 0.0).map(|(a, _)| *a).fold(f64::INFINITY, f64::min);
        let dropped_max = p.iter().zip(&f).filter(|(_, &q)| q == 0.0).map(|(a, _)| *a).fold(0.0, f64::max);
        prop_assert!(kept_min >= dropped_max);
    }

    #[test]
    fn filter_keeps_relative_odds(raw in prop::collection::vec(0.001f64..1.0, 2..40), top_p in 0.3f64..=1.0) {
        let p = distribution(&raw);
        let f = filter_top_k_top_p(&p, p.len(), top_p).unwrap();
        let kept: Vec<usize> = (0..p.len()).filter(|&i| f[i] > 0.0).collect();
        let mass: f64 = kept.iter().map(|&i| p[i]).sum();
        prop_assert!(mass + 1e-12 >= top_p);
        for &i in &kept {
            prop_assert!((f[i] - p[i] / mass).abs() <= 1e-12);
        }
    }

    #[test]
    fn advantage_shift_and_scale(
        rewards in prop::collection::vec(-1e3f64..1e3, 2..32),
        shift in -1e3f64..1e3,
        scale in 1e-3f64..1e3,
    ) {
        let base = advantage(&rewards, 0.0);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let scaled: Vec<f64> = rewards.iter().map(|r| r * scale).collect();
        let spread = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - rewards.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        for (a, b) in base.iter().zip(advantage(&shifted, 0.0)) {
            prop_assert!((a - b).abs() <= 1e-6, "{} vs {}", a, b);
        }
        for (a, b) in base.iter().zip(advantage(&scaled, 0.0)) {
            prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        }
    }

    /// Dyadic rewards, integer shifts and power-of-two scales keep the
    /// shifted inputs exact, so the invariances hold bit for bit.
    #[test]
    fn advantage_invariances_exact_on_exact_inputs(
        quarters in prop::collection::vec(-64i32..64, 2..17),
        shift in -16i32..16,
        exp in -4i32..5,
    ) {
        let rewards: Vec<f64> = quarters.iter().map(|&q| q as f64 / 4.0).collect();
        let base = advantage(&rewards, 0.0);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift as f64).collect();
        let scaled: Vec<f64> = rewards.iter().map(|r| r * 2f64.powi(exp)).collect();
        prop_assert_eq!(&base, &advantage(&shifted, 0.0));
        prop_assert_eq!(&base, &advantage(&scaled, 0.0));
    }

    #[test]
    fn advantage_is_standardized(rewards in prop::collection::vec(-10f64..10.0, 2..32)) {
        let a = advantage(&rewards, 0.0);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|v| v * v).sum::<f64>() / n;
        prop_assert!(mean.abs() <= 1e-9);
        let degenerate = rewards.iter().all(|r| *r == rewards[0]);
        if !degenerate {
            prop_assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn k3_is_non_negative(a in -30f64..30.0, b in -30f64..30.0) {
        let k = k3_kl(a, b);
        prop_assert!(k >= 0.0);
        if a == b {
            prop_assert_eq!(k, 0.0);
        }
        if (a - b).abs() > 1e-6 {
            prop_assert!(k > 0.0);
        }
    }

    #[test]
    fn clipped_pg_is_pessimistic(rho in 0.0f64..4.0, a in -3f64..3.0, eps in 0.0f64..0.5) {
        let v = clipped_pg(rho, a, eps);
        prop_assert!(v >= -rho * a - 1e-12);
        prop_assert!(v >= -rho.clamp(1.0 - eps, 1.0 + eps) * a - 1e-12);
    }

    #[test]
    fn panw_weights_sum_to_one(sides in prop::collection::vec(1usize..12, 1..8), alpha in 0.0f64..2.0) {
        let mut sides = sides;
        sides.sort_unstable();
        sides.dedup();
        let s = ScaleSchedule::new(sides).unwrap();
        let w = panw_weights(&s, alpha);
        prop_assert_eq!(w.len(), s.token_count());
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let per = panw_scale_weights(&s, alpha);
        for k in 1..per.len() {
            prop_assert!(per[k] <= per[k - 1]);
        }
    }
}

#[test]
fn k3_over_many_random_pairs() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100_000 {
        let a: f64 = rng.random_range(-20.0..0.0);
        let b: f64 = rng.random_range(-20.0..0.0);
        let k = k3_kl(a, b);
        assert!(k >= 0.0, "k3({a}, {b}) = {k}");
        if a != b && (a - b).abs() > 1e-7 {
            assert!(k > 0.0);
        }
        assert_eq!(k3_kl(a, a), 0.0);
    }
}

#[test]
fn panw_table_matches_published_weights() {
    let w = panw_scale_weights(&ScaleSchedule::full(), 0.7);
    for (k, (v, t)) in w.iter().zip(TABLE_1).enumerate() {
        assert!((v * 100.0 - t).abs() <= 0.005, "scale {k}: {} vs {t}", v * 100.0);
    }
    let s = ScaleSchedule::full();
    let total: f64 = w.iter().enumerate().map(|(k, v)| v * s.tokens_at(k) as f64).sum();
    assert!((total - 1.0).abs() <= 1e-12);
}

#[test]
fn panw_coarse_to_fine_ratio() {
    let w = panw_scale_weights(&ScaleSchedule::full(), 0.7);
    let ratio = w[0] / w[9];
    assert!((ratio - 256f64.powf(0.7)).abs() < 1e-9);
    assert!((ratio - 48.5).abs() < 0.05, "{ratio}");
    // The displayed table rounds to 3.37 / 0.07.
    assert!((3.37f64 / 0.07 - 48.14).abs() < 0.01);
}

#[test]
fn panw_alpha_zero_is_uniform_per_token() {
    let w = panw_weights(&ScaleSchedule::toy(), 0.0);
    assert!(w.iter().all(|&v| (v - 1.0 / 30.0).abs() < 1e-15));
}

#[test]
fn filter_edge_cases() {
    let p = vec![0.1, 0.4, 0.2, 0.3];
    assert_eq!(filter_top_k_top_p(&p, 1, 1.0).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    let id = filter_top_k_top_p(&p, 4, 1.0).unwrap();
    for (a, b) in id.iter().zip(&p) {
        assert!((a - b).abs() < 1e-15);
    }
    let tie = filter_top_k_top_p(&[0.25; 4], 2, 1.0).unwrap();
    assert_eq!(tie, vec![0.5, 0.5, 0.0, 0.0]);
    assert!(filter_top_k_top_p(&p, 0, 0.5).is_err());
    assert!(filter_top_k_top_p(&p, 2, 0.0).is_err());
}
