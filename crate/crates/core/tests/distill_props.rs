mod common;

use common::{kd_values, randn, rng};
use cpd_core::tensor::Tape;
use proptest::prelude::*;

#[test]
fn losses_vanish_when_student_equals_teacher() {
    for seed in 0..100 {
        for (name, v) in kd_values(seed, true) {
            assert!(v.abs() <= 1e-9, "seed {seed}: {name} = {v}");
        }
    }
}

#[test]
fn losses_are_nonnegative_on_random_inputs() {
    for seed in 0..100 {
        for (name, v) in kd_values(seed, false) {
            assert!(v >= 0.0, "seed {seed}: {name} = {v}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distillation_losses_are_nonnegative(seed in any::<u64>()) {
        for (name, v) in kd_values(seed, false) {
            prop_assert!(v >= 0.0, "{} = {}", name, v);
        }
    }

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
        temp in 0.1f64..10.0,
    ) {
        let x = randn(&[3, 5], &mut rng(seed)).map(|v| 4.0 * v);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x.map(|v| v + shift));
        let (pa, pb) = (tape.softmax(a, 1, temp).unwrap(), tape.softmax(b, 1, temp).unwrap());
        for row in tape.value(pa).data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
        prop_assert!(tape.value(pa).max_abs_diff(tape.value(pb)).unwrap() < 1e-12);
    }
}
