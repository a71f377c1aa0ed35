//! Property suites over the tokenizer, the scratchpad renderer, the reward,
//! the certainty measure and the KL terms.

mod common;

use arithrl::a2c::{certainty_weight, kl_term_prioritized, kl_term_standard};
use arithrl::model::certainty;
use arithrl::rlenv::EpisodeState;
use arithrl::scratchpad::{parse_answer, render_scratchpad, verify_answer, AdditionProblem, Verdict, Vocabulary};
use common::suite;
use num_bigint::BigUint;
use proptest::prelude::*;

fn problem(a: u64, b: u64) -> AdditionProblem {
    AdditionProblem::from_u64(a, b)
}

#[test]
fn tokenizer_round_trips_ten_thousand_documents() {
    suite::tokenizer_round_trip(10_000).unwrap();
}

#[test]
fn renderer_agrees_with_machine_addition_up_to_fifteen_digits() {
    suite::oracle_agreement(10_000, 15).unwrap();
}

#[test]
fn certainty_bounds_and_extremes() {
    suite::certainty_extremes().unwrap();
}

#[test]
fn kl_estimator_reference_values() {
    suite::kl_estimator_values().unwrap();
}

#[test]
fn gamma_one_returns_equal_the_reward_on_a_thousand_trajectories() {
    suite::gamma_one_returns(1_000).unwrap();
}

#[test]
fn zero_beta_prioritized_loss_is_bitwise_standard() {
    suite::zero_beta_bitwise(200).unwrap();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn documents_round_trip(a in 0u64..10_000_000, b in 0u64..10_000_000) {
        let v = Vocabulary::scratchpad();
        let text = render_scratchpad(&problem(a, b)).full_text;
        prop_assert_eq!(v.decode(&v.encode(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn answer_is_the_sum(a in 0u64..1_000_000_000_000_000, b in 0u64..1_000_000_000_000_000) {
        let doc = render_scratchpad(&problem(a, b));
        prop_assert_eq!(parse_answer(&doc.full_text), Some(BigUint::from(a as u128 + b as u128)));
        prop_assert_eq!(verify_answer(&doc.full_text, &doc.problem), Verdict::Correct);
    }

    #[test]
    fn reward_ignores_the_body(a in 0u64..100_000, b in 0u64..100_000, pick in any::<prop::sample::Index>(), d in 0u8..10) {
        let p = problem(a, b);
        let doc = render_scratchpad(&p);
        let v = Vocabulary::scratchpad();
        // perturb one digit of the body
        let body: Vec<char> = doc.body_text.chars().collect();
        let digits: Vec<usize> = (0..body.len()).filter(|&i| body[i].is_ascii_digit()).collect();
        let mut changed = body.clone();
        changed[digits[pick.index(digits.len())]] = char::from(b'0' + d);
        let reward = |body: String| {
            let text = format!("{body}{}$", doc.answer_text);
            let mut s = EpisodeState::new(p.clone(), 4096, 8192);
            for id in v.encode(&text).unwrap() {
                if s.step(id).unwrap().done { break; }
            }
            s.reward()
        };
        prop_assert_eq!(reward(body.into_iter().collect()), Some(1.0));
        prop_assert_eq!(reward(changed.into_iter().collect()), Some(1.0));
    }

    #[test]
    fn kl_terms_are_non_negative(lp_new in -20.0f64..0.0, lp_old in -20.0f64..0.0, j in 0.0f64..=1.0, beta in 0.0f64..1e4) {
        prop_assert!(kl_term_standard(lp_new, lp_old) >= 0.0);
        let p = kl_term_prioritized(lp_new, lp_old, j, beta);
        prop_assert!(p >= 0.0);
        prop_assert!(p <= kl_term_standard(lp_new, lp_old));
    }

    #[test]
    fn weight_falls_as_beta_grows(j in 0.0f64..=1.0, b1 in 0.0f64..1e4, b2 in 0.0f64..1e4) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        prop_assert!(certainty_weight(j, hi) <= certainty_weight(j, lo));
        prop_assert!((0.0..=1.0).contains(&certainty_weight(j, lo)));
    }

    #[test]
    fn certainty_is_a_unit_interval_measure(logits in prop::collection::vec(-30.0f64..30.0, 2..40)) {
        let j = certainty(&logits);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&j));
    }
}
