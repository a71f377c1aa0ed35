use super::kernels::{gelu_forward, layernorm_forward, linear_forward};
use super::{log_softmax, Params, Scalar};
use crate::error::{Error, Result};
use crate::seed::rng_from;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    Greedy,
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub mode: Decoding,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        GenerationConfig {
            mode: Decoding::Greedy,
            temperature: 1.0,
            max_new_tokens,
            seed: 0,
        }
    }

    pub fn sample(max_new_tokens: usize, seed: u64) -> Self {
        GenerationConfig {
            mode: Decoding::Sample,
            temperature: 1.0,
            max_new_tokens,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == Decoding::Sample && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("sampling temperature must be positive".into()));
        }
        Ok(())
    }
}

/// One decoded continuation. `logprobs[i]` is `log pi(tokens[i] | prefix)` under
/// the untempered policy and `values[i]` the value of that prefix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub values: Vec<f64>,
    pub eos: bool,
    /// Stopped by the token budget or the context limit before EOS.
    pub truncated: bool,
}

struct Seq<F> {
    tokens: Vec<u32>,
    fed: usize,
    // [layer][head][pos][hd]
    k: Vec<F>,
    v: Vec<F>,
    cap: usize,
    rng: crate::seed::Rng,
    out: Generation,
    done: bool,
}

pub fn generate<F: Scalar>(
    params: &Params<F>,
    prompt: &[u32],
    eos: u32,
    cfg: &GenerationConfig,
) -> Result<Generation> {
    let mut out = generate_batch(params, &[prompt], &[cfg.seed], eos, cfg)?;
    Ok(out.pop().expect("one sequence"))
}

fn pick<F: Scalar, R: Rng + ?Sized>(logits: &[F], cfg: &GenerationConfig, rng: &mut R) -> u32 {
    match cfg.mode {
        Decoding::Greedy => {
            let mut best = 0;
            for (i, x) in logits.iter().enumerate() {
                if *x > logits[best] {
                    best = i;
                }
            }
            best as u32
        }
        Decoding::Sample => {
            let scaled: Vec<f64> = logits.iter().map(|x| x.as_f64() / cfg.temperature).collect();
            let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i as u32;
                }
            }
            // rounding left u above the total; take the last positive entry
            probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
        }
    }
}

/// Decodes every prompt in lockstep. Sequence `i` samples from its own RNG
/// seeded with `seeds[i]`, so results do not depend on batch composition.
pub fn generate_batch<F: Scalar>(
    params: &Params<F>,
    prompts: &[&[u32]],
    seeds: &[u64],
    eos: u32,
    cfg: &GenerationConfig,
) -> Result<Vec<Generation>> {
    cfg.validate()?;
    assert_eq!(prompts.len(), seeds.len());
    let c = params.config();
    let lay = params.layout();
    let (d, f, vsz, heads, nl) = (c.d_model, c.d_ff, c.vocab_size, c.n_heads, c.n_layers);
    let hd = d / heads;
    let scale = F::one() / F::from_usize(hd).expect("dim").sqrt();

    let mut seqs: Vec<Seq<F>> = Vec::with_capacity(prompts.len());
    for (p, &s) in prompts.iter().zip(seeds) {
        super::transformer::check_input(params, p)?;
        if p.is_empty() {
            return Err(Error::Config("generation needs a non-empty prompt".into()));
        }
        let cap = (p.len() + cfg.max_new_tokens).min(c.context_len);
        let mut seq = Seq {
            tokens: p.to_vec(),
            fed: 0,
            k: vec![F::zero(); nl * heads * cap * hd],
            v: vec![F::zero(); nl * heads * cap * hd],
            cap,
            rng: rng_from(s),
            out: Generation::default(),
            done: false,
        };
        if cfg.max_new_tokens == 0 || p.len() >= c.context_len {
            seq.done = true;
            seq.out.truncated = true;
        }
        seqs.push(seq);
    }

    let mut x = Vec::new();
    let mut ln = Vec::new();
    let mut mean = Vec::new();
    let mut rstd = Vec::new();
    let mut qkv = Vec::new();
    let mut atty = Vec::new();
    let mut branch = Vec::new();
    let mut fch = Vec::new();
    let mut fcg = Vec::new();
    let mut logits = Vec::new();
    let mut values = Vec::new();
    let mut scores: Vec<F> = vec![F::zero(); c.context_len];

    loop {
        let active: Vec<usize> = (0..seqs.len()).filter(|&i| !seqs[i].done).collect();
        if active.is_empty() {
            break;
        }
        let b = active.len();
        let resize = |buf: &mut Vec<F>, n: usize| {
            buf.clear();
            buf.resize(n, F::zero());
        };
        resize(&mut x, b * d);
        resize(&mut ln, b * d);
        resize(&mut mean, b);
        resize(&mut rstd, b);
        resize(&mut qkv, b * 3 * d);
        resize(&mut atty, b * d);
        resize(&mut branch, b * d);
        resize(&mut fch, b * f);
        resize(&mut fcg, b * f);
        resize(&mut logits, b * vsz);
        resize(&mut values, b);

        let wte = params.t(&lay.wte);
        let wpe = params.t(&lay.wpe);
        for (r, &i) in active.iter().enumerate() {
            let s = &seqs[i];
            let tok = s.tokens[s.fed] as usize;
            let pos = s.fed;
            for j in 0..d {
                x[r * d + j] = wte[tok * d + j] + wpe[pos * d + j];
            }
        }

        for (li, lr) in lay.layers.iter().enumerate() {
            layernorm_forward(&mut ln, &mut mean, &mut rstd, &x, params.t(&lr.ln1_g), params.t(&lr.ln1_b), d);
            linear_forward(&mut qkv, &ln, params.t(&lr.qkv_w), params.t(&lr.qkv_b), b, d, 3 * d);
            for (r, &i) in active.iter().enumerate() {
                let s = &mut seqs[i];
                let pos = s.fed;
                let row = &qkv[r * 3 * d..(r + 1) * 3 * d];
                for h in 0..heads {
                    let base = ((li * heads + h) * s.cap) * hd;
                    let at = base + pos * hd;
                    s.k[at..at + hd].copy_from_slice(&row[d + h * hd..d + (h + 1) * hd]);
                    s.v[at..at + hd].copy_from_slice(&row[2 * d + h * hd..2 * d + (h + 1) * hd]);
                    let q = &row[h * hd..(h + 1) * hd];
                    let mut max = F::neg_infinity();
                    for j in 0..=pos {
                        let kj = &s.k[base + j * hd..base + (j + 1) * hd];
                        let dot: F = q.iter().zip(kj).map(|(&a, &b)| a * b).sum::<F>() * scale;
                        scores[j] = dot;
                        max = max.max(dot);
                    }
                    let mut sum = F::zero();
                    for sc in &mut scores[..=pos] {
                        *sc = (*sc - max).exp();
                        sum += *sc;
                    }
                    let out = &mut atty[r * d + h * hd..r * d + (h + 1) * hd];
                    out.fill(F::zero());
                    for j in 0..=pos {
                        let w = scores[j] / sum;
                        let vj = &s.v[base + j * hd..base + (j + 1) * hd];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += w * vv;
                        }
                    }
                }
            }
            linear_forward(&mut branch, &atty, params.t(&lr.proj_w), params.t(&lr.proj_b), b, d, d);
            for (xi, &bi) in x.iter_mut().zip(&branch) {
                *xi += bi;
            }
            layernorm_forward(&mut ln, &mut mean, &mut rstd, &x, params.t(&lr.ln2_g), params.t(&lr.ln2_b), d);
            linear_forward(&mut fch, &ln, params.t(&lr.fc_w), params.t(&lr.fc_b), b, d, f);
            gelu_forward(&mut fcg, &fch);
            linear_forward(&mut branch, &fcg, params.t(&lr.fcproj_w), params.t(&lr.fcproj_b), b, f, d);
            for (xi, &bi) in x.iter_mut().zip(&branch) {
                *xi += bi;
            }
        }
        layernorm_forward(&mut ln, &mut mean, &mut rstd, &x, params.t(&lay.lnf_g), params.t(&lay.lnf_b), d);
        let no_bias = vec![F::zero(); vsz];
        linear_forward(&mut logits, &ln, params.t(&lay.lm_w), &no_bias, b, d, vsz);
        linear_forward(&mut values, &ln, params.t(&lay.val_w), params.t(&lay.val_b), b, d, 1);

        for (r, &i) in active.iter().enumerate() {
            let s = &mut seqs[i];
            s.fed += 1;
            if s.fed < s.tokens.len() {
                continue; // still consuming the prompt
            }
            let row = &logits[r * vsz..(r + 1) * vsz];
            let tok = pick(row, cfg, &mut s.rng);
            s.out.logprobs.push(log_softmax(row)[tok as usize]);
            s.out.values.push(values[r].as_f64());
            s.out.tokens.push(tok);
            s.tokens.push(tok);
            if tok == eos {
                s.done = true;
                s.out.eos = true;
            } else if s.out.tokens.len() >= cfg.max_new_tokens || s.tokens.len() >= s.cap {
                s.done = true;
                s.out.truncated = true;
            }
        }
    }
    Ok(seqs.into_iter().map(|s| s.out).collect())
}
