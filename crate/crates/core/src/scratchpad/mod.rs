//! Addition problems rendered as a digit-by-digit scratchpad.
//!
//! A rendered document looks like this (for `128+367`):
//!
//! ```text
//! 128+367=
//! [1,2,8] has 3 digits.
//! [3,6,7] has 3 digits.
//! [1,2,8] + [3,6,7] , A=[] , C=0 , 8+7+0=15 , A->5 , C->1
//! [1,2] + [3,6] , A=[5] , C=1 , 2+6+1=9 , A->9 , C->0
//! [1] + [3] , A=[9,5] , C=0 , 1+3+0=4 , A->4 , C->0
//! [] + [] , A=[4,9,5] , C=0 , END
//! 4 9 5$
//! ```
//!
//! where `$` is the end-of-sequence symbol. A carry left over after the last
//! step is folded into the answer list on the terminator line.

pub mod dataset;
mod vocab;

pub use dataset::{build_dataset, read_dataset, DatasetManifest, DatasetRecord, DatasetSpec, Split};
pub use vocab::{Vocabulary, EOS_CHAR};

use num_bigint::BigUint;
use rand::Rng;
use std::fmt::Write as _;

/// Marks the end of the terminator line; the answer line follows it.
pub const ANSWER_DELIMITER: &str = "END\n";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AdditionProblem {
    pub a: BigUint,
    pub b: BigUint,
    pub len_a: usize,
    pub len_b: usize,
}

impl AdditionProblem {
    pub fn new(a: BigUint, b: BigUint) -> Self {
        let len_a = a.to_str_radix(10).len();
        let len_b = b.to_str_radix(10).len();
        AdditionProblem { a, b, len_a, len_b }
    }

    pub fn from_u64(a: u64, b: u64) -> Self {
        Self::new(BigUint::from(a), BigUint::from(b))
    }

    /// Parses two decimal strings. Leading zeros are rejected except for "0".
    pub fn parse(a: &str, b: &str) -> Option<Self> {
        let ok = |s: &str| {
            !s.is_empty()
                && s.bytes().all(|c| c.is_ascii_digit())
                && (s.len() == 1 || !s.starts_with('0'))
        };
        if !ok(a) || !ok(b) {
            return None;
        }
        Some(Self::new(
            a.parse::<BigUint>().ok()?,
            b.parse::<BigUint>().ok()?,
        ))
    }

    pub fn sum(&self) -> BigUint {
        &self.a + &self.b
    }

    pub fn max_len(&self) -> usize {
        self.len_a.max(self.len_b)
    }

    pub fn digits_a(&self) -> Vec<u8> {
        decimal_digits(&self.a)
    }

    pub fn digits_b(&self) -> Vec<u8> {
        decimal_digits(&self.b)
    }

    pub fn prompt(&self) -> String {
        format!("{}+{}=\n", self.a, self.b)
    }
}

/// Most-significant digit first.
pub fn decimal_digits(n: &BigUint) -> Vec<u8> {
    n.to_str_radix(10).bytes().map(|c| c - b'0').collect()
}

/// Uniform number with exactly `len` digits (a single digit may be 0).
pub fn sample_number<R: Rng + ?Sized>(len: usize, rng: &mut R) -> BigUint {
    assert!(len >= 1);
    let mut s = String::with_capacity(len);
    if len == 1 {
        s.push(char::from(b'0' + rng.random_range(0..10u8)));
    } else {
        s.push(char::from(b'0' + rng.random_range(1..10u8)));
        for _ in 1..len {
            s.push(char::from(b'0' + rng.random_range(0..10u8)));
        }
    }
    s.parse().expect("decimal digits")
}

pub fn problem_with_lengths<R: Rng + ?Sized>(len_a: usize, len_b: usize, rng: &mut R) -> AdditionProblem {
    let a = sample_number(len_a, rng);
    let b = sample_number(len_b, rng);
    AdditionProblem { a, b, len_a, len_b }
}

/// Draws a length class `(len_a, len_b)` uniformly from `1..=n_max` squared,
/// then uniform digits for each operand.
pub fn sample_problem<R: Rng + ?Sized>(n_max: usize, rng: &mut R) -> AdditionProblem {
    assert!(n_max >= 1, "n_max must be at least 1");
    let len_a = rng.random_range(1..=n_max);
    let len_b = rng.random_range(1..=n_max);
    problem_with_lengths(len_a, len_b, rng)
}

/// Longer operand has exactly `n_digits`; the other is uniform in `1..=n_digits`,
/// and which side is longer is a coin flip.
pub fn sample_varying<R: Rng + ?Sized>(n_digits: usize, rng: &mut R) -> AdditionProblem {
    assert!(n_digits >= 1);
    let other = rng.random_range(1..=n_digits);
    if rng.random_bool(0.5) {
        problem_with_lengths(n_digits, other, rng)
    } else {
        problem_with_lengths(other, n_digits, rng)
    }
}

pub fn sample_identical<R: Rng + ?Sized>(n_digits: usize, rng: &mut R) -> AdditionProblem {
    problem_with_lengths(n_digits, n_digits, rng)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScratchpadDoc {
    pub problem: AdditionProblem,
    pub prompt_text: String,
    pub body_text: String,
    pub answer_text: String,
    /// `prompt_text + body_text + answer_text` followed by the EOS symbol.
    pub full_text: String,
}

fn write_list(out: &mut String, digits: &[u8]) {
    out.push('[');
    for (i, d) in digits.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push(char::from(b'0' + d));
    }
    out.push(']');
}

pub fn render_scratchpad(problem: &AdditionProblem) -> ScratchpadDoc {
    let da = problem.digits_a();
    let db = problem.digits_b();
    let steps = da.len().max(db.len());

    let mut body = String::new();
    for digits in [&da, &db] {
        write_list(&mut body, digits);
        let _ = writeln!(body, " has {} digits.", digits.len());
    }

    let mut answer: Vec<u8> = Vec::with_capacity(steps + 1);
    let mut carry = 0u8;
    for i in 0..steps {
        let ra = &da[..da.len().saturating_sub(i)];
        let rb = &db[..db.len().saturating_sub(i)];
        let x = ra.last().copied().unwrap_or(0);
        let y = rb.last().copied().unwrap_or(0);
        let s = x + y + carry;
        let (u, next) = (s % 10, s / 10);

        write_list(&mut body, ra);
        body.push_str(" + ");
        write_list(&mut body, rb);
        body.push_str(" , A=");
        write_list(&mut body, &answer);
        let _ = writeln!(body, " , C={carry} , {x}+{y}+{carry}={s} , A->{u} , C->{next}");

        answer.insert(0, u);
        carry = next;
    }
    if carry > 0 {
        answer.insert(0, carry);
    }
    body.push_str("[] + [] , A=");
    write_list(&mut body, &answer);
    body.push_str(" , C=0 , ");
    body.push_str(ANSWER_DELIMITER);

    let answer_text = answer
        .iter()
        .map(|d| char::from(b'0' + d).to_string())
        .collect::<Vec<_>>()
        .join(" ");
    let prompt_text = problem.prompt();
    let mut full_text = String::with_capacity(prompt_text.len() + body.len() + answer_text.len() + 1);
    full_text.push_str(&prompt_text);
    full_text.push_str(&body);
    full_text.push_str(&answer_text);
    full_text.push(EOS_CHAR);

    ScratchpadDoc {
        problem: problem.clone(),
        prompt_text,
        body_text: body,
        answer_text,
        full_text,
    }
}

/// Length in characters (= tokens) of the longest document whose operands
/// have at most `n_digits` digits, EOS included.
pub fn max_doc_len(n_digits: usize) -> usize {
    let nines: BigUint = "9".repeat(n_digits).parse().expect("digits");
    let p = AdditionProblem::new(nines.clone(), nines);
    render_scratchpad(&p).full_text.chars().count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
    Malformed,
}

/// Parses the answer line that follows the last `END\n`. The line ends at the
/// EOS symbol, a newline or the end of the text.
pub fn parse_answer(text: &str) -> Option<BigUint> {
    let start = text.rfind(ANSWER_DELIMITER)? + ANSWER_DELIMITER.len();
    let rest = &text[start..];
    let end = rest.find([EOS_CHAR, '\n']).unwrap_or(rest.len());
    let line = &rest[..end];
    if line.is_empty() {
        return None;
    }
    let mut digits = String::with_capacity(line.len() / 2 + 1);
    for part in line.split(' ') {
        let mut chars = part.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_digit() => digits.push(c),
            _ => return None,
        }
    }
    digits.parse().ok()
}

pub fn verify_answer(generated_text: &str, problem: &AdditionProblem) -> Verdict {
    match parse_answer(generated_text) {
        None => Verdict::Malformed,
        Some(n) if n == problem.sum() => Verdict::Correct,
        Some(_) => Verdict::Incorrect,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn renders_the_documented_example() {
        let doc = render_scratchpad(&AdditionProblem::from_u64(128, 367));
        let expected = "128+367=\n\
[1,2,8] has 3 digits.\n\
[3,6,7] has 3 digits.\n\
[1,2,8] + [3,6,7] , A=[] , C=0 , 8+7+0=15 , A->5 , C->1\n\
[1,2] + [3,6] , A=[5] , C=1 , 2+6+1=9 , A->9 , C->0\n\
[1] + [3] , A=[9,5] , C=0 , 1+3+0=4 , A->4 , C->0\n\
[] + [] , A=[4,9,5] , C=0 , END\n\
4 9 5$";
        assert_eq!(doc.full_text, expected);
        assert_eq!(doc.answer_text, "4 9 5");
        assert_eq!(doc.body_text.lines().filter(|l| l.contains("A->")).count(), 3);
    }

    #[test]
    fn single_digit_with_final_carry() {
        let doc = render_scratchpad(&AdditionProblem::from_u64(5, 7));
        let steps: Vec<_> = doc.body_text.lines().filter(|l| l.contains("A->")).collect();
        assert_eq!(steps, vec!["[5] + [7] , A=[] , C=0 , 5+7+0=12 , A->2 , C->1"]);
        assert!(doc.body_text.ends_with("[] + [] , A=[1,2] , C=0 , END\n"));
        assert_eq!(doc.answer_text, "1 2");
        assert_eq!(parse_answer(&doc.full_text), Some(BigUint::from(12u32)));
    }

    #[test]
    fn zero_plus_zero() {
        let p = AdditionProblem::from_u64(0, 0);
        assert_eq!((p.len_a, p.len_b), (1, 1));
        let doc = render_scratchpad(&p);
        assert_eq!(doc.answer_text, "0");
        assert!(doc.body_text.starts_with("[0] has 1 digits.\n"));
    }

    #[test]
    fn unequal_lengths_pad_with_zero() {
        let doc = render_scratchpad(&AdditionProblem::from_u64(12, 345));
        assert!(doc
            .body_text
            .contains("[] + [3] , A=[5,7] , C=0 , 0+3+0=3 , A->3 , C->0\n"));
        assert_eq!(doc.answer_text, "3 5 7");
    }

    #[test]
    fn verdicts() {
        let p = AdditionProblem::from_u64(128, 367);
        let doc = render_scratchpad(&p);
        assert_eq!(verify_answer(&doc.full_text, &p), Verdict::Correct);

        let wrong = doc.full_text.replace("4 9 5$", "4 9 6$");
        assert_eq!(verify_answer(&wrong, &p), Verdict::Incorrect);

        let cut = &doc.full_text[..doc.full_text.find("END").unwrap()];
        assert_eq!(verify_answer(cut, &p), Verdict::Malformed);
        assert_eq!(verify_answer("", &p), Verdict::Malformed);
        assert_eq!(verify_answer("END\n$", &p), Verdict::Malformed);
        assert_eq!(verify_answer("END\n4 95$", &p), Verdict::Malformed);
        assert_eq!(verify_answer("END\n4  9 5$", &p), Verdict::Malformed);
        // no EOS: the answer runs to the end of the text
        assert_eq!(verify_answer("END\n4 9 5", &p), Verdict::Correct);
    }

    #[test]
    fn parse_rejects_leading_zeros() {
        assert!(AdditionProblem::parse("012", "3").is_none());
        assert!(AdditionProblem::parse("0", "3").is_some());
        assert!(AdditionProblem::parse("", "3").is_none());
        assert!(AdditionProblem::parse("1a", "3").is_none());
    }

    #[test]
    fn smallest_class_only_produces_single_digits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = sample_problem(1, &mut rng);
            assert_eq!((p.len_a, p.len_b), (1, 1));
            assert!(p.a <= BigUint::from(9u8) && p.b <= BigUint::from(9u8));
        }
    }

    #[test]
    fn class_frequencies_are_uniform() {
        // 9 classes, 30k draws; expected 1/9 each. Bound: 2 percentage points.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [[0usize; 3]; 3];
        let n = 30_000;
        for _ in 0..n {
            let p = sample_problem(3, &mut rng);
            assert!(p.len_a <= 3 && p.len_b <= 3);
            assert_eq!(p.digits_a().len(), p.len_a);
            counts[p.len_a - 1][p.len_b - 1] += 1;
        }
        let mut chi2 = 0.0;
        let e = n as f64 / 9.0;
        for row in counts {
            for c in row {
                assert!((c as f64 / n as f64 - 1.0 / 9.0).abs() < 0.02, "{counts:?}");
                chi2 += (c as f64 - e).powi(2) / e;
            }
        }
        // chi-square 8 dof, p = 0.001 critical value
        assert!(chi2 < 26.12, "chi2 = {chi2}");
    }

    #[test]
    fn varying_pairs_cover_shorter_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [false; 5];
        for _ in 0..1000 {
            let p = sample_varying(4, &mut rng);
            assert_eq!(p.max_len(), 4);
            seen[p.len_a.min(p.len_b)] = true;
        }
        assert!(seen[1..=4].iter().all(|&s| s));
    }

    #[test]
    fn max_doc_len_grows_with_digits() {
        let l3 = max_doc_len(3);
        let l4 = max_doc_len(4);
        assert!(l4 > l3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let p = sample_problem(3, &mut rng);
            assert!(render_scratchpad(&p).full_text.chars().count() <= l3);
        }
    }
}
