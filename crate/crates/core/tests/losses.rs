mod common;

use affect_bnn::labels::S_MIN;
use affect_bnn::losses::{ccc, gaussian_kl, kl_metric, median_filter, total_loss};
use common::{ccc_two_pass, kl_quadrature, mc_complexity, median_naive};
use proptest::prelude::*;

fn series(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, len)
}

fn pair(len: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    len.prop_flat_map(|n| (prop::collection::vec(-1.0f64..1.0, n), prop::collection::vec(-1.0f64..1.0, n)))
}

proptest! {
    #[test]
    fn ccc_matches_two_pass_oracle((x, y) in pair(2..200)) {
        let got = ccc(&x, &y).unwrap();
        prop_assert!((got - ccc_two_pass(&x, &y)).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&got));
    }

    #[test]
    fn ccc_is_symmetric((x, y) in pair(2..100)) {
        prop_assert!((ccc(&x, &y).unwrap() - ccc(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ccc_penalizes_a_constant_offset(x in series(3..100), c in prop_oneof![-2.0f64..-1e-3, 1e-3f64..2.0]) {
        let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - x.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-6);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        prop_assert!(ccc(&x, &shifted).unwrap() < 1.0);
        prop_assert!((ccc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_the_diagonal(
        mp in -1.0f64..1.0, sp in 1e-3f64..2.0, mq in -1.0f64..1.0, sq in 1e-3f64..2.0,
    ) {
        prop_assert!(gaussian_kl(mp, sp, mq, sq).unwrap() >= 0.0);
        prop_assert!(gaussian_kl(mp, sp, mp, sp).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kl_matches_quadrature(mp in -1.0f64..1.0, sp in 0.05f64..1.0, mq in -1.0f64..1.0, sq in 0.05f64..1.0) {
        let closed = gaussian_kl(mp, sp, mq, sq).unwrap();
        prop_assert!((closed - kl_quadrature(mp, sp, mq, sq)).abs() < 1e-6, "closed {}", closed);
    }

    #[test]
    fn median_matches_naive_oracle(x in series(1..120), window in 1usize..60) {
        prop_assert_eq!(median_filter(&x, window).unwrap(), median_naive(&x, window));
    }

    #[test]
    fn total_loss_structure(c in -2.0f64..2.0, b in -5.0f64..5.0, k in 0.0f64..10.0, alpha in 0.0f64..3.0) {
        let l = total_loss(c, b, k, alpha).unwrap();
        prop_assert!((l.total - (c + b + alpha * k)).abs() < 1e-12);
        prop_assert_eq!(total_loss(c, b, k, 0.0).unwrap().total, total_loss(c, b, k + 1.0, 0.0).unwrap().total);
    }
}

#[test]
fn kl_examples() {
    assert!((gaussian_kl(0.0, 1.0, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
    assert!((gaussian_kl(0.0, 2.0, 0.0, 1.0).unwrap() - 0.806_853).abs() < 1e-6);
    assert!(gaussian_kl(0.0, 0.0, 0.0, 1.0).is_err());
}

#[test]
fn kl_metric_floors_the_predicted_std() {
    let floored = kl_metric(&[0.0], &[0.2], &[0.0], &[0.0]).unwrap();
    assert_eq!(floored, gaussian_kl(0.0, 0.2, 0.0, S_MIN).unwrap());
}

#[test]
fn median_removes_an_isolated_spike() {
    let mut x = vec![0.25; 200];
    x[100] = 5.0;
    assert_eq!(median_filter(&x, 50).unwrap(), vec![0.25; 200]);
    assert_eq!(median_filter(&[1.0, 9.0, 1.0, 1.0], 3).unwrap(), vec![5.0, 1.0, 1.0, 1.0]);
}

#[test]
fn monte_carlo_complexity_matches_closed_form() {
    for seed in 0..5 {
        let (mc, closed) = mc_complexity(seed, 10_000);
        assert!((mc - closed).abs() / closed < 0.05, "seed {seed}: {mc} vs {closed}");
    }
}

#[test]
fn monte_carlo_complexity_is_unbiased() {
    // 200 random posteriors, one n = 30 estimate each; the errors against
    // each closed form must average to zero within three standard errors
    let diffs: Vec<f64> = (0..200)
        .map(|rep| mc_complexity(1000 + rep, 30))
        .map(|(mc, closed)| mc - closed)
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 3.0 * sd / n.sqrt(), "mean error {mean}, se {}", sd / n.sqrt());
}
