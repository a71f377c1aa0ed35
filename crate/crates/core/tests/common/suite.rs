//! Deterministic bulk checks shared by the invariant suite and the
//! acceptance target. Each returns a description of the first failure.

use arithrl::a2c::{kl_term_standard, loss_from_outputs, KlMode, RLConfig, StepTarget};
use arithrl::model::certainty;
use arithrl::rlenv::discounted_returns;
use arithrl::scratchpad::{parse_answer, problem_with_lengths, render_scratchpad, Vocabulary};
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<(), String>;

pub fn tokenizer_round_trip(n: usize) -> Check {
    let v = Vocabulary::scratchpad();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..n {
        let p = problem_with_lengths(rng.random_range(1..=7), rng.random_range(1..=7), &mut rng);
        let text = render_scratchpad(&p).full_text;
        let ids = v.encode(&text).map_err(|e| e.to_string())?;
        if ids.len() != text.chars().count() || v.decode(&ids).map_err(|e| e.to_string())? != text {
            return Err(format!("{} + {} does not round-trip", p.a, p.b));
        }
    }
    Ok(())
}

/// Renderer against machine addition, plus the arithmetic of every step line.
pub fn oracle_agreement(n: usize, max_digits: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..n {
        let p = problem_with_lengths(rng.random_range(1..=max_digits), rng.random_range(1..=max_digits), &mut rng);
        let a: u128 = p.a.to_string().parse().unwrap();
        let b: u128 = p.b.to_string().parse().unwrap();
        let doc = render_scratchpad(&p);
        if parse_answer(&doc.full_text) != Some(BigUint::from(a + b)) {
            return Err(format!("{a} + {b}: wrong answer line"));
        }
        let steps: Vec<&str> = doc.body_text.lines().filter(|l| l.contains("A->")).collect();
        if steps.len() != p.max_len() {
            return Err(format!("{a} + {b}: {} step lines", steps.len()));
        }
        for line in steps {
            let eq = line.split(" , ").nth(3).ok_or(format!("bad line {line}"))?;
            let (lhs, rhs) = eq.split_once('=').ok_or(format!("bad line {line}"))?;
            let total: u32 = lhs.split('+').map(|d| d.parse::<u32>().unwrap()).sum();
            if total.to_string() != rhs {
                return Err(format!("{a} + {b}: {line}"));
            }
        }
    }
    Ok(())
}

pub fn certainty_extremes() -> Check {
    let uniform = certainty(&[0.0f64; 33]);
    let mut onehot = vec![-1e4f64; 33];
    onehot[7] = 0.0;
    let peaked = certainty(&onehot);
    let h = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
    let two = certainty(&[0.9f64.ln(), 0.1f64.ln()]);
    if uniform.abs() > 1e-9 || (peaked - 1.0).abs() > 1e-9 || (two - (1.0 - h / 2f64.ln())).abs() > 1e-12 {
        return Err(format!("uniform {uniform}, one-hot {peaked}, (0.9, 0.1) {two}"));
    }
    Ok(())
}

pub fn kl_estimator_values() -> Check {
    let same = kl_term_standard(-1.3, -1.3);
    let gap = kl_term_standard(-1.0, -1.2);
    if same != 0.0 || (gap - 0.02).abs() > 1e-12 {
        return Err(format!("equal {same}, gap 0.2 {gap}"));
    }
    Ok(())
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> (Vec<Vec<f64>>, Vec<f64>, Vec<StepTarget>) {
    let logits = (0..n).map(|_| (0..vocab).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).collect();
    let values = (0..n).map(|_| rng.random::<f64>()).collect();
    let t = (0..n)
        .map(|_| StepTarget {
            action: rng.random_range(0..vocab as u32),
            logp_old: -rng.random::<f64>() * 3.0,
            certainty_old: rng.random::<f64>(),
            ret: 1.0,
            advantage: rng.random::<f64>() - 0.5,
        })
        .collect();
    (logits, values, t)
}

pub fn zero_beta_bitwise(n: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let std = RLConfig::standard_reference();
    let pri = RLConfig { kl_mode: KlMode::Prioritized, beta: 0.0, ..std.clone() };
    for i in 0..n {
        let (l, v, t) = random_targets(&mut rng, 6, 5);
        let a = loss_from_outputs(&l, &v, &t, &std);
        let b = loss_from_outputs(&l, &v, &t, &pri);
        if a.0.total.to_bits() != b.0.total.to_bits() || a.0.kl_term.to_bits() != b.0.kl_term.to_bits() || a.1 != b.1 || a.2 != b.2 {
            return Err(format!("case {i} differs"));
        }
    }
    Ok(())
}

pub fn gamma_one_returns(n: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..n {
        let len = rng.random_range(1..400);
        let r = if rng.random::<bool>() { 1.0 } else { 0.0 };
        if !discounted_returns(r, len, 1.0).iter().all(|&g| g == r) {
            return Err(format!("length {len}, reward {r}"));
        }
    }
    Ok(())
}
