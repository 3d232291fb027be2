mod oracle;

use oracle::{exact_op_cases, rng, surrogate_cases, total_loss_case};

const INSTANCES: u64 = 20;

#[test]
fn exact_ops_match_finite_differences() {
    for (name, run) in exact_op_cases() {
        let mut r = rng(0xd1ff);
        for i in 0..INSTANCES {
            let err = run(&mut r);
            assert!(err < 1e-4, "{name} instance {i}: relative error {err:e}");
        }
    }
}

#[test]
fn surrogates_match_smoothed_oracles() {
    for (name, run) in surrogate_cases() {
        let mut r = rng(0x5ee7);
        for i in 0..INSTANCES {
            let err = run(&mut r);
            assert!(err < 1e-3, "{name} instance {i}: relative error {err:e}");
        }
    }
}

#[test]
fn total_loss_gradients() {
    let mut r = rng(0x1055);
    for i in 0..INSTANCES {
        let err = total_loss_case(&mut r);
        assert!(err < 1e-4, "instance {i}: relative error {err:e}");
    }
}
