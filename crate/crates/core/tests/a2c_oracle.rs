//! The hand-worked two-step example against the loss implementation.

mod common;

use arithrl::a2c::{loss_from_outputs, KlMode};
use common::oracle::{breakdown_errors, outputs, prioritized_config, targets, TOL};

#[test]
fn standard_breakdown() {
    let (name, err) = breakdown_errors()[0];
    assert!(err < TOL, "{name} off by {err}");
}

#[test]
fn prioritized_breakdown() {
    assert_eq!(prioritized_config().kl_mode, KlMode::Prioritized);
    let (name, err) = breakdown_errors()[1];
    assert!(err < TOL, "{name} off by {err}");
}

#[test]
fn output_gradients_match_finite_differences() {
    let cfg = prioritized_config();
    let (z, v) = outputs();
    let (_, dz, dv) = loss_from_outputs(&z, &v, &targets(), &cfg);
    let eps = 1e-6;
    for t in 0..2 {
        for j in 0..3 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[t][j] += eps;
            zm[t][j] -= eps;
            let fd = (loss_from_outputs(&zp, &v, &targets(), &cfg).0.total
                - loss_from_outputs(&zm, &v, &targets(), &cfg).0.total)
                / (2.0 * eps);
            assert!((fd - dz[t][j]).abs() < 1e-8, "logit {t},{j}");
        }
        let mut vp = v.clone();
        let mut vm = v.clone();
        vp[t] += eps;
        vm[t] -= eps;
        let fd = (loss_from_outputs(&z, &vp, &targets(), &cfg).0.total
            - loss_from_outputs(&z, &vm, &targets(), &cfg).0.total)
            / (2.0 * eps);
        assert!((fd - dv[t]).abs() < 1e-8, "value {t}");
    }
}
