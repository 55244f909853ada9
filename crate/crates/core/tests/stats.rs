use affect_bnn::stats::{paired_t_test_one_tailed, student_t_upper_tail, Degenerate};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

proptest! {
    #[test]
    fn upper_tail_matches_reference(t in -8.0f64..8.0, dof in 1.0f64..60.0) {
        let reference = 1.0 - StudentsT::new(0.0, 1.0, dof).unwrap().cdf(t);
        prop_assert!((student_t_upper_tail(t, dof) - reference).abs() < 1e-10);
    }

    #[test]
    fn paired_test_matches_reference(d in prop::collection::vec(-1.0f64..1.0, 3..30)) {
        let zeros = vec![0.0; d.len()];
        let r = paired_t_test_one_tailed(&d, &zeros).unwrap();
        let k = d.len() as f64;
        let mean = d.iter().sum::<f64>() / k;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        prop_assume!(sd > 1e-9);
        let t = mean / (sd / k.sqrt());
        let p = 1.0 - StudentsT::new(0.0, 1.0, k - 1.0).unwrap().cdf(t);
        prop_assert!((r.p_value - p).abs() < 1e-9);
        prop_assert_eq!(r.dof, d.len() - 1);
        // the two directions are complementary
        let back = paired_t_test_one_tailed(&zeros, &d).unwrap();
        prop_assert!((r.p_value + back.p_value - 1.0).abs() < 1e-9);
    }
}

#[test]
fn degenerate_cases_are_flagged() {
    let same = paired_t_test_one_tailed(&[0.4, 0.5, 0.6], &[0.4, 0.5, 0.6]).unwrap();
    assert_eq!((same.p_value, same.degenerate), (1.0, Some(Degenerate::AllZero)));
    let constant = paired_t_test_one_tailed(&[2.0; 4], &[1.0; 4]).unwrap();
    assert!(constant.p_value < 1e-12);
    assert_eq!(constant.degenerate, Some(Degenerate::ZeroVariance));
}
