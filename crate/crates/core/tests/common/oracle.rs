//! A two-step episode over a three-token vocabulary, worked by hand.
//!
//! Step 1: logits (1, 0, -1), action 0, V = 0.5, old log-prob -0.5, old
//! certainty 0.6. Step 2: logits (0, 0, 0), action 2, V = 0.25, old log-prob
//! -1.0, old certainty 0. Reward 1 at the end, gamma 1, so G = (1, 1) and
//! A = (0.5, 0.75).
//!
//! log p(a1) = 1 - ln(e + 1 + 1/e) = -0.4076059644
//! log p(a2) = -ln 3               = -1.0986122887
//! pg      = -(0.5 * -0.40761 + 0.75 * -1.09861) / 2 = 0.5138810994
//! value   = (0.25 + 0.5625) / 2                     = 0.40625
//! entropy = (H(softmax(1,0,-1)) + ln 3) / 2          = 0.9655039353
//! kl      = (0.5 * 0.09239^2 + 0.5 * 0.09861^2) / 2  = 0.0045652603
//! kl with weights (0.6^2, 0^2)                       = 0.0007682992

use arithrl::a2c::{loss_from_outputs, LossBreakdown, RLConfig, StepTarget};

pub const TOL: f64 = 1e-6;

pub fn targets() -> Vec<StepTarget> {
    vec![
        StepTarget { action: 0, logp_old: -0.5, certainty_old: 0.6, ret: 1.0, advantage: 0.5 },
        StepTarget { action: 2, logp_old: -1.0, certainty_old: 0.0, ret: 1.0, advantage: 0.75 },
    ]
}

pub fn outputs() -> (Vec<Vec<f64>>, Vec<f64>) {
    (vec![vec![1.0, 0.0, -1.0], vec![0.0, 0.0, 0.0]], vec![0.5, 0.25])
}

/// Largest absolute field difference.
pub fn worst_field(got: &LossBreakdown, want: &LossBreakdown) -> (&'static str, f64) {
    let mut worst = ("", 0.0f64);
    for (name, g, w) in [
        ("pg_loss", got.pg_loss, want.pg_loss),
        ("value_loss", got.value_loss, want.value_loss),
        ("entropy_term", got.entropy_term, want.entropy_term),
        ("kl_term", got.kl_term, want.kl_term),
        ("total", got.total, want.total),
        ("mean_certainty_weight", got.mean_certainty_weight, want.mean_certainty_weight),
    ] {
        if (g - w).abs() >= worst.1 {
            worst = (name, (g - w).abs());
        }
    }
    worst
}

pub fn standard_expected() -> LossBreakdown {
    LossBreakdown {
        pg_loss: 0.5138810994,
        value_loss: 0.40625,
        entropy_term: 0.9655039353,
        kl_term: 0.0045652603,
        total: 0.5996759506,
        mean_certainty_weight: 1.0,
    }
}

pub fn prioritized_expected() -> LossBreakdown {
    LossBreakdown {
        kl_term: 0.0007682992,
        total: 0.5578648434,
        mean_certainty_weight: 0.18,
        ..standard_expected()
    }
}

pub fn prioritized_config() -> RLConfig {
    RLConfig {
        beta: 2.0,
        ..RLConfig::prioritized_reference()
    }
}

/// Worst field error of the standard and the prioritized breakdowns.
pub fn breakdown_errors() -> [(&'static str, f64); 2] {
    let (z, v) = outputs();
    let (s, _, _) = loss_from_outputs(&z, &v, &targets(), &RLConfig::standard_reference());
    let (p, _, _) = loss_from_outputs(&z, &v, &targets(), &prioritized_config());
    [worst_field(&s, &standard_expected()), worst_field(&p, &prioritized_expected())]
}
