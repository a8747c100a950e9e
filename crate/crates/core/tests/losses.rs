use mpt_core::tape::Tape;
use mpt_core::train::{ce_loss, ce_loss_renormalized, kld_loss, total_loss};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Rows of a distribution matrix, each row a full distribution.
fn batch(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| random_dist(rng, cols)).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn run_kld(s: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let c = s[0].len();
    let vs = tape.constant(s.len(), c, s.concat()).unwrap();
    let vt = tape.constant(t.len(), c, t.concat()).unwrap();
    let k = kld_loss(&mut tape, vs, vt).unwrap();
    tape.scalar(k)
}

fn run_ce(p: &[Vec<f64>], gold: &[usize], renorm: bool) -> f64 {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(p.len(), p[0].len(), p.concat()).unwrap();
    let l = if renorm {
        ce_loss_renormalized(&mut tape, v, gold).unwrap()
    } else {
        ce_loss(&mut tape, v, gold).unwrap()
    };
    tape.scalar(l)
}

#[test]
fn kld_matches_the_sum_of_both_directed_divergences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..200 {
        let rows = 1 + trial % 5;
        let s = batch(&mut rng, rows, 3);
        let t = batch(&mut rng, rows, 3);
        let oracle: f64 = s.iter().zip(&t).map(|(a, b)| kl(a, b) + kl(b, a)).sum::<f64>() / rows as f64;
        assert!((run_kld(&s, &t) - oracle).abs() < 1e-6, "trial {trial}");
    }
}

#[test]
fn kld_of_a_distribution_with_itself_is_exactly_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let p = batch(&mut rng, 4, 3);
        assert_eq!(run_kld(&p, &p), 0.0);
    }
}

#[test]
fn ce_matches_mean_negative_log_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..200 {
        let rows = 1 + trial % 6;
        // verbalizer rows are sub-distributions: three label words out of a vocabulary
        let p: Vec<Vec<f64>> = batch(&mut rng, rows, 5).into_iter().map(|r| r[..3].to_vec()).collect();
        let gold: Vec<usize> = (0..rows).map(|_| rng.random_range(0..3)).collect();
        let oracle = -p.iter().zip(&gold).map(|(r, &g)| r[g].ln()).sum::<f64>() / rows as f64;
        assert!((run_ce(&p, &gold, false) - oracle).abs() < 1e-6);
        let renorm = -p
            .iter()
            .zip(&gold)
            .map(|(r, &g)| (r[g] / r.iter().sum::<f64>()).ln())
            .sum::<f64>()
            / rows as f64;
        assert!((run_ce(&p, &gold, true) - renorm).abs() < 1e-6);
    }
}

#[test]
fn alpha_boundaries_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let ce: f64 = rng.random_range(0.0..5.0);
        let kld: f64 = rng.random_range(0.0..5.0);
        let mut tape = Tape::<f64>::new();
        let vc = tape.constant(1, 1, vec![ce]).unwrap();
        let vk = tape.constant(1, 1, vec![kld]).unwrap();
        let one = total_loss(&mut tape, 1.0, vc, vk).unwrap();
        let zero = total_loss(&mut tape, 0.0, vc, vk).unwrap();
        let mid = total_loss(&mut tape, 0.5, vc, vk).unwrap();
        assert_eq!(tape.scalar(one), ce);
        assert_eq!(tape.scalar(zero), kld);
        assert!((tape.scalar(mid) - 0.5 * (ce + kld)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn kld_is_symmetric_and_non_negative(seed in any::<u64>(), rows in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = batch(&mut rng, rows, 3);
        let t = batch(&mut rng, rows, 3);
        let st = run_kld(&s, &t);
        prop_assert!(st >= 0.0);
        prop_assert!((st - run_kld(&t, &s)).abs() < 1e-12);
    }

    #[test]
    fn ce_is_non_negative_and_zero_only_at_certainty(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = batch(&mut rng, 3, 3);
        prop_assert!(run_ce(&p, &[0, 1, 2], false) > 0.0);
        let sure = vec![vec![0.0, 1.0, 0.0]];
        prop_assert_eq!(run_ce(&sure, &[1], false), 0.0);
    }
}
