//! Critical tokens: places in a scratchpad where a model trained on operands
//! of at most `N` digits must keep copying a longer operand (emit `,`) instead
//! of closing the list after `N` digits (emit `]`). Also per-token certainty
//! profiles, teacher-forced probability traces and coloured transcripts.

use crate::error::Result;
use crate::model::{forward, generate_batch, softmax, Decoding, GenerationConfig, Params, Scalar};
use crate::rlenv::score_actions;
use crate::scratchpad::{render_scratchpad, sample_varying, AdditionProblem, Vocabulary};
use crate::seed::{derive_seed, rng_from};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticalPosition {
    /// Character (= token) index into the full text, prompt included.
    pub index: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CriticalScan {
    pub positions: Vec<CriticalPosition>,
    pub diagnostic: Option<String>,
}

fn parse_prompt(line: &str) -> Option<(usize, usize)> {
    let (a, b) = line.strip_suffix('=')?.split_once('+')?;
    let ok = |s: &str| !s.is_empty() && s.bytes().all(|c| c.is_ascii_digit());
    (ok(a) && ok(b)).then_some((a.len(), b.len()))
}

/// Index just past the `n`-th digit of the list opening at `open`, if the
/// list gets that far on this line.
fn after_nth_digit(line: &[u8], open: usize, n: usize) -> Option<usize> {
    let mut seen = 0;
    for (i, &c) in line.iter().enumerate().skip(open + 1) {
        match c {
            b'0'..=b'9' => {
                seen += 1;
                if seen == n {
                    return (i + 1 < line.len()).then_some(i + 1);
                }
            }
            b']' => return None,
            _ => {}
        }
    }
    None
}

/// Scans a document (prompt first) for critical separators. Lines after the
/// prompt are read as the two header lines and then one step line per digit;
/// an operand list is flagged when the operand still has more than
/// `n_pretrain` digits to copy at that point.
pub fn locate_critical_positions(text: &str, n_pretrain: usize) -> CriticalScan {
    let diag = |m: &str| CriticalScan {
        positions: Vec::new(),
        diagnostic: Some(m.to_string()),
    };
    let mut lines = Vec::new();
    let mut start = 0;
    for line in text.split_inclusive('\n') {
        lines.push((start, line.trim_end_matches('\n')));
        start += line.len();
    }
    let Some(&(_, first)) = lines.first() else {
        return diag("empty text");
    };
    let Some((len_a, len_b)) = parse_prompt(first) else {
        return diag("first line is not an addition prompt");
    };
    let lens = [len_a, len_b];
    let mut positions = Vec::new();
    let mut lists_seen = 0;
    for (li, &(offset, line)) in lines.iter().enumerate().skip(1) {
        let bytes = line.as_bytes();
        let opens: Vec<usize> = bytes.iter().enumerate().filter(|(_, &c)| c == b'[').map(|(i, _)| i).collect();
        lists_seen += opens.len();
        // (operand index, list start, expected remaining digits, label)
        let lists: Vec<(usize, usize, usize, String)> = match li {
            1 | 2 => opens
                .first()
                .map(|&o| (li - 1, o, lens[li - 1], format!("header / operand {li}")))
                .into_iter()
                .collect(),
            _ => {
                let k = li - 2;
                opens
                    .iter()
                    .take(2)
                    .enumerate()
                    .map(|(m, &o)| (m, o, (lens[m] + 1).saturating_sub(k), format!("step {k} / operand {}", m + 1)))
                    .collect()
            }
        };
        for (_, open, remaining, label) in lists {
            if remaining > n_pretrain {
                if let Some(i) = after_nth_digit(bytes, open, n_pretrain) {
                    positions.push(CriticalPosition { index: offset + i, label });
                }
            }
        }
    }
    if lists_seen == 0 {
        return diag("no operand lists found");
    }
    CriticalScan {
        positions,
        diagnostic: None,
    }
}

/// `d_i = j_i - mean_{k != i} j_k`; zero for a single token.
pub fn delta_certainty(j: &[f64]) -> Vec<f64> {
    let n = j.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let sum: f64 = j.iter().sum();
    j.iter().map(|&x| x - (sum - x) / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertaintyProfile {
    pub prompt: String,
    /// Generated tokens only.
    pub tokens: Vec<u32>,
    pub certainty: Vec<f64>,
    pub delta: Vec<f64>,
    pub critical_mask: Vec<bool>,
    pub critical_labels: Vec<Option<String>>,
    pub n_pretrain: usize,
    pub digits: usize,
}

/// Scores each generated token's state under `old`. `critical` indexes the
/// full text, as returned by [`locate_critical_positions`].
pub fn profile_generation<F: Scalar>(
    old: &Params<F>,
    prompt: &[u32],
    generated: &[u32],
    critical: &[CriticalPosition],
    n_pretrain: usize,
    digits: usize,
) -> Result<CertaintyProfile> {
    let (_, _, certainty) = score_actions(old, prompt, generated)?;
    Ok(profile_from_certainty(prompt, generated, certainty, critical, n_pretrain, digits))
}

pub fn profile_from_certainty(
    prompt: &[u32],
    generated: &[u32],
    certainty: Vec<f64>,
    critical: &[CriticalPosition],
    n_pretrain: usize,
    digits: usize,
) -> CertaintyProfile {
    let mut mask = vec![false; generated.len()];
    let mut labels = vec![None; generated.len()];
    for c in critical {
        if let Some(i) = c.index.checked_sub(prompt.len()).filter(|&i| i < generated.len()) {
            mask[i] = true;
            labels[i] = Some(c.label.clone());
        }
    }
    CertaintyProfile {
        prompt: Vocabulary::scratchpad().decode(prompt).unwrap_or_default(),
        tokens: generated.to_vec(),
        delta: delta_certainty(&certainty),
        certainty,
        critical_mask: mask,
        critical_labels: labels,
        n_pretrain,
        digits,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(xs: &[f64]) -> Option<MeanStd> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalTokenStats {
    pub n_generations: usize,
    pub n_critical: usize,
    /// Over every critical position of every generation; absent when none.
    pub mean_dj_critical: Option<MeanStd>,
    /// Per-generation minimum over non-critical positions, then across
    /// generations.
    pub min_dj_noncritical: Option<MeanStd>,
}

pub fn aggregate_stats(profiles: &[CertaintyProfile]) -> CriticalTokenStats {
    let mut crit = Vec::new();
    let mut mins = Vec::new();
    for p in profiles {
        let mut m = f64::INFINITY;
        for (&d, &c) in p.delta.iter().zip(&p.critical_mask) {
            if c {
                crit.push(d);
            } else {
                m = m.min(d);
            }
        }
        if m.is_finite() {
            mins.push(m);
        }
    }
    CriticalTokenStats {
        n_generations: profiles.len(),
        n_critical: crit.len(),
        mean_dj_critical: mean_std(&crit),
        min_dj_noncritical: mean_std(&mins),
    }
}

pub fn format_stats_table(rows: &[(usize, CriticalTokenStats)]) -> String {
    let cell = |m: &Option<MeanStd>| match m {
        Some(m) => format!("{:.4} ± {:.4}", m.mean, m.std),
        None => "absent".to_string(),
    };
    let mut s = String::new();
    let _ = writeln!(s, "{:>4} | {:>22} | {:>22} | {:>11}", "N", "mean dJ (critical)", "min dJ (non-critical)", "generations");
    for (n, st) in rows {
        let _ = writeln!(
            s,
            "{n:>4} | {:>22} | {:>22} | {:>11}",
            cell(&st.mean_dj_critical),
            cell(&st.min_dj_noncritical),
            st.n_generations
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub n_pretrain: usize,
    pub digits: usize,
    pub generations: usize,
    pub decoding: Decoding,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config: AnalysisConfig,
    pub stats: CriticalTokenStats,
    pub profiles: Vec<CertaintyProfile>,
    /// Generations where no operand list could be found.
    pub diagnostics: Vec<String>,
}

/// Decodes `generations` fresh problems with `old` and profiles each one.
pub fn analyze<F: Scalar>(old: &Params<F>, cfg: &AnalysisConfig) -> Result<AnalysisReport> {
    let vocab = Vocabulary::scratchpad();
    let mut rng = rng_from(derive_seed(cfg.seed, "analysis/problems"));
    let problems: Vec<AdditionProblem> = (0..cfg.generations).map(|_| sample_varying(cfg.digits, &mut rng)).collect();
    let prompts: Vec<Vec<u32>> = problems.iter().map(|p| vocab.encode(&p.prompt())).collect::<Result<_>>()?;
    let refs: Vec<&[u32]> = prompts.iter().map(|p| p.as_slice()).collect();
    let seeds: Vec<u64> = (0..problems.len())
        .map(|i| derive_seed(cfg.seed, &format!("analysis/sample/{i}")))
        .collect();
    let ctx = old.config().context_len;
    let gen = GenerationConfig {
        mode: cfg.decoding,
        temperature: 1.0,
        max_new_tokens: crate::eval::generation_budget(cfg.digits, ctx, 2 * cfg.digits + 3),
        seed: 0,
    };
    let gens = generate_batch(old, &refs, &seeds, vocab.eos_id(), &gen)?;
    let mut profiles = Vec::with_capacity(gens.len());
    let mut diagnostics = Vec::new();
    for (prompt, g) in prompts.iter().zip(gens) {
        let mut full = prompt.clone();
        full.extend_from_slice(&g.tokens);
        let scan = locate_critical_positions(&vocab.decode(&full)?, cfg.n_pretrain);
        if let Some(d) = scan.diagnostic {
            diagnostics.push(d);
        }
        profiles.push(profile_generation(old, prompt, &g.tokens, &scan.positions, cfg.n_pretrain, cfg.digits)?);
    }
    Ok(AnalysisReport {
        config: cfg.clone(),
        stats: aggregate_stats(&profiles),
        profiles,
        diagnostics,
    })
}

/// Gold documents with their critical positions, scored teacher-forced.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSet {
    probes: Vec<(Vec<u32>, Vec<CriticalPosition>)>,
    labels: Vec<String>,
}

impl ProbeSet {
    pub fn new(problems: &[AdditionProblem], n_pretrain: usize) -> Result<Self> {
        let vocab = Vocabulary::scratchpad();
        let mut probes = Vec::new();
        let mut labels: Vec<String> = Vec::new();
        for p in problems {
            let doc = render_scratchpad(p);
            let scan = locate_critical_positions(&doc.full_text, n_pretrain);
            for c in &scan.positions {
                if !labels.contains(&c.label) {
                    labels.push(c.label.clone());
                }
            }
            probes.push((vocab.encode(&doc.full_text)?, scan.positions));
        }
        Ok(ProbeSet { probes, labels })
    }

    /// Fresh varying-length problems at `digits`, seeded.
    pub fn sample(n: usize, digits: usize, n_pretrain: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from(derive_seed(seed, "probes"));
        let problems: Vec<AdditionProblem> = (0..n).map(|_| sample_varying(digits, &mut rng)).collect();
        Self::new(&problems, n_pretrain)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Mean probability of the gold token at each label, over the probes that
    /// have that label, in first-seen label order.
    pub fn measure<F: Scalar>(&self, params: &Params<F>) -> Result<Vec<(String, f64)>> {
        let mut sum = vec![0.0; self.labels.len()];
        let mut count = vec![0usize; self.labels.len()];
        for (tokens, positions) in &self.probes {
            if positions.is_empty() {
                continue;
            }
            let last = positions.iter().map(|c| c.index).max().unwrap_or(0);
            let out = forward(params, &tokens[..last])?;
            for c in positions {
                let p = softmax(out.logits_at(c.index - 1))[tokens[c.index] as usize];
                let k = self.labels.iter().position(|l| *l == c.label).expect("label registered");
                sum[k] += p;
                count[k] += 1;
            }
        }
        Ok(self
            .labels
            .iter()
            .enumerate()
            .map(|(k, l)| (l.clone(), sum[k] / count[k].max(1) as f64))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProbTrace {
    pub label: String,
    pub points: Vec<(usize, f64)>,
}

/// One trace per probe label across a stream of `(collect_round, params)`.
pub fn track_critical_probabilities<'a, F: Scalar + 'a>(
    stream: impl IntoIterator<Item = (usize, &'a Params<F>)>,
    probes: &ProbeSet,
) -> Result<Vec<TokenProbTrace>> {
    let mut traces: Vec<TokenProbTrace> = probes
        .labels()
        .iter()
        .map(|l| TokenProbTrace { label: l.clone(), points: Vec::new() })
        .collect();
    for (round, params) in stream {
        for (k, (_, p)) in probes.measure(params)?.into_iter().enumerate() {
            traces[k].points.push((round, p));
        }
    }
    Ok(traces)
}

/// Groups flat trace records (as written during fine-tuning) by label.
pub fn traces_from_records(records: &[crate::a2c::TraceRecord]) -> Vec<TokenProbTrace> {
    let mut out: Vec<TokenProbTrace> = Vec::new();
    for r in records {
        match out.iter_mut().find(|t| t.label == r.label) {
            Some(t) => t.points.push((r.collect_round, r.probability)),
            None => out.push(TokenProbTrace {
                label: r.label.clone(),
                points: vec![(r.collect_round, r.probability)],
            }),
        }
    }
    out
}

/// Green for certainty 1 through to red for certainty 0.
pub fn certainty_rgb(j: f64) -> (u8, u8, u8) {
    let j = j.clamp(0.0, 1.0);
    ((255.0 * (1.0 - j)).round() as u8, (255.0 * j).round() as u8, 0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub ansi: String,
    pub html: String,
}

pub fn render_certainty_transcript(profile: &CertaintyProfile) -> Transcript {
    let vocab = Vocabulary::scratchpad();
    let mut ansi = profile.prompt.clone();
    let mut html = String::from(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>certainty transcript</title></head>\n<body><pre>",
    );
    html.push_str(&escape(&profile.prompt));
    for (i, &tok) in profile.tokens.iter().enumerate() {
        let c = vocab.char_of(tok).unwrap_or('?');
        if c == '\n' {
            ansi.push('\n');
            html.push('\n');
            continue;
        }
        let (r, g, b) = certainty_rgb(profile.certainty[i]);
        let _ = write!(ansi, "\x1b[38;2;{r};{g};{b}m{c}\x1b[0m");
        let deco = if profile.critical_mask[i] { ";text-decoration:underline" } else { "" };
        let _ = write!(
            html,
            "<span style=\"color:#{r:02x}{g:02x}{b:02x}{deco}\" title=\"{:.4}\">{}</span>",
            profile.certainty[i],
            escape(&c.to_string())
        );
    }
    if !ansi.ends_with('\n') {
        ansi.push('\n');
    }
    html.push_str("</pre></body></html>\n");
    Transcript { ansi, html }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(scan: &CriticalScan) -> Vec<&str> {
        scan.positions.iter().map(|c| c.label.as_str()).collect()
    }

    #[test]
    fn four_digit_operands_at_n3() {
        let doc = render_scratchpad(&AdditionProblem::from_u64(1234, 5678));
        let scan = locate_critical_positions(&doc.full_text, 3);
        assert_eq!(
            labels(&scan),
            ["header / operand 1", "header / operand 2", "step 1 / operand 1", "step 1 / operand 2"]
        );
        for c in &scan.positions {
            assert!(doc.full_text.as_bytes()[c.index - 1].is_ascii_digit());
            assert_eq!(&doc.full_text[c.index..=c.index], ",");
        }
        // the separator right after "1,2,3" in the first header
        let h = doc.full_text.find("[1,2,3,4]").unwrap();
        assert_eq!(scan.positions[0].index, h + 6);
    }

    #[test]
    fn six_digit_operand_at_n5() {
        let doc = render_scratchpad(&AdditionProblem::from_u64(987654, 12));
        let scan = locate_critical_positions(&doc.full_text, 5);
        assert_eq!(labels(&scan), ["header / operand 1", "step 1 / operand 1"]);
        let first = &scan.positions[0];
        // the token before the sixth digit is copied
        assert_eq!(&doc.full_text[first.index - 1..first.index + 2], "5,4");
    }

    #[test]
    fn only_flags_lists_longer_than_n() {
        let doc = render_scratchpad(&AdditionProblem::from_u64(123, 45));
        assert!(locate_critical_positions(&doc.full_text, 3).positions.is_empty());
        assert!(locate_critical_positions(&doc.full_text, 3).diagnostic.is_none());
    }

    #[test]
    fn early_closing_bracket_is_still_flagged() {
        let text = "1234+5=\n[1,2,3] has 3 digits.\n";
        let scan = locate_critical_positions(text, 3);
        assert_eq!(labels(&scan), ["header / operand 1"]);
        assert_eq!(&text[scan.positions[0].index..=scan.positions[0].index], "]");
    }

    #[test]
    fn degenerate_text() {
        let s = locate_critical_positions("12+34=\nA->5\n", 1);
        assert!(s.positions.is_empty() && s.diagnostic.is_some());
        assert!(locate_critical_positions("", 1).diagnostic.is_some());
        assert!(locate_critical_positions("hello", 1).diagnostic.is_some());
    }

    #[test]
    fn leave_one_out() {
        assert_eq!(delta_certainty(&[0.7; 5]), vec![0.0; 5]);
        let d = delta_certainty(&[0.9, 0.9, 0.2, 0.9]);
        assert!(d[2] < 0.0 && d[0] > 0.0 && d[1] > 0.0 && d[3] > 0.0);
        let j = [0.3, 0.8, 0.55, 1.0, 0.0];
        for (i, &di) in delta_certainty(&j).iter().enumerate() {
            let others: f64 = j.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, x)| x).sum::<f64>() / 4.0;
            assert!((di - (j[i] - others)).abs() < 1e-12);
        }
    }

    fn profile(j: Vec<f64>, mask: Vec<bool>) -> CertaintyProfile {
        CertaintyProfile {
            prompt: "1+2=\n".into(),
            tokens: vec![0; j.len()],
            delta: delta_certainty(&j),
            critical_labels: vec![None; j.len()],
            certainty: j,
            critical_mask: mask,
            n_pretrain: 1,
            digits: 2,
        }
    }

    #[test]
    fn stats_rules() {
        let one = aggregate_stats(&[profile(vec![1.0, 0.5, 1.0], vec![false, true, false])]);
        assert_eq!(one.n_generations, 1);
        assert_eq!(one.mean_dj_critical.unwrap().std, 0.0);
        assert!((one.mean_dj_critical.unwrap().mean + 0.5).abs() < 1e-12);
        assert!((one.min_dj_noncritical.unwrap().mean - 0.25).abs() < 1e-12);

        let none = aggregate_stats(&[profile(vec![1.0, 0.5], vec![false, false])]);
        assert!(none.mean_dj_critical.is_none());
        assert_eq!(none.n_critical, 0);

        let many: Vec<_> = (0..50).map(|_| profile(vec![1.0, 0.9], vec![false, true])).collect();
        assert_eq!(aggregate_stats(&many).n_generations, 50);
    }

    #[test]
    fn transcript_colours() {
        let p = profile(vec![1.0, 0.0], vec![false, true]);
        let t = render_certainty_transcript(&p);
        assert!(t.ansi.contains("\x1b[38;2;0;255;0m0"));
        assert!(t.ansi.contains("\x1b[38;2;255;0;0m0"));
        assert!(t.html.contains("color:#00ff00\""));
        assert!(t.html.contains("color:#ff0000;text-decoration:underline"));
        assert_eq!(t, render_certainty_transcript(&p));
    }
}
