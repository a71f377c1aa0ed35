//! Addition as an episodic decision process: the state is the prompt plus the
//! tokens emitted so far, an action is one token, and the only reward is 1 at
//! the end of an episode whose final answer is correct.

use crate::error::{Error, Result};
use crate::model::{certainty, forward, generate_batch, log_softmax, GenerationConfig, Params, Scalar};
use crate::scratchpad::{sample_varying, verify_answer, AdditionProblem, Verdict, Vocabulary};
use crate::seed::{derive_seed, rng_from};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalReason {
    Eos,
    Truncated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub problem: AdditionProblem,
    pub prompt: Vec<u32>,
    pub generated: Vec<u32>,
    pub done: bool,
    pub terminal_reason: Option<TerminalReason>,
    max_new_tokens: usize,
    context_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
}

/// Samples a problem whose longer operand has exactly `n_digits` digits.
pub fn reset<R: Rng + ?Sized>(n_digits: usize, rng: &mut R, max_new_tokens: usize, context_len: usize) -> EpisodeState {
    assert!(n_digits >= 1, "n_digits must be at least 1");
    EpisodeState::new(sample_varying(n_digits, rng), max_new_tokens, context_len)
}

impl EpisodeState {
    pub fn new(problem: AdditionProblem, max_new_tokens: usize, context_len: usize) -> Self {
        let prompt = Vocabulary::scratchpad().encode(&problem.prompt()).expect("prompts use digits and +=");
        let mut s = EpisodeState {
            problem,
            prompt,
            generated: Vec::new(),
            done: false,
            terminal_reason: None,
            max_new_tokens,
            context_len,
        };
        if max_new_tokens == 0 || s.prompt.len() >= context_len {
            s.done = true;
            s.terminal_reason = Some(TerminalReason::Truncated);
        }
        s
    }

    pub fn step(&mut self, action: u32) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let vocab = Vocabulary::scratchpad();
        if action as usize >= vocab.size() {
            return Err(Error::TokenOutOfRange {
                id: action,
                position: self.prompt.len() + self.generated.len(),
                vocab_size: vocab.size(),
            });
        }
        self.generated.push(action);
        if action == vocab.eos_id() {
            self.done = true;
            self.terminal_reason = Some(TerminalReason::Eos);
        } else if self.generated.len() >= self.max_new_tokens || self.prompt.len() + self.generated.len() >= self.context_len {
            self.done = true;
            self.terminal_reason = Some(TerminalReason::Truncated);
        }
        Ok(StepOutcome {
            reward: self.reward().unwrap_or(0.0),
            done: self.done,
        })
    }

    pub fn generated_text(&self) -> String {
        Vocabulary::scratchpad().decode(&self.generated).expect("actions were range-checked")
    }

    /// Terminal reward, defined once the episode is done.
    pub fn reward(&self) -> Option<f64> {
        match self.terminal_reason? {
            TerminalReason::Truncated => Some(0.0),
            TerminalReason::Eos => Some(match verify_answer(&self.generated_text(), &self.problem) {
                Verdict::Correct => 1.0,
                _ => 0.0,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub a: String,
    pub b: String,
    pub prompt: Vec<u32>,
    pub actions: Vec<u32>,
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    pub values: Vec<f64>,
    pub certainty_old: Vec<f64>,
    /// Discounted return from each step, fixed at collection time.
    pub returns: Vec<f64>,
    pub reward: f64,
    pub terminal_reason: TerminalReason,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Prompt followed by every action except the last: the inputs whose
    /// outputs score the actions.
    pub fn scored_input(&self) -> Vec<u32> {
        let mut t = self.prompt.clone();
        t.extend_from_slice(&self.actions[..self.actions.len().saturating_sub(1)]);
        t
    }
}

/// `G_t = gamma^(T-1-t) * reward` for a reward paid on the last step.
pub fn discounted_returns(reward: f64, len: usize, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let mut g = reward;
    for x in out.iter_mut().rev() {
        *x = g;
        g *= gamma;
    }
    out
}

/// Log-probabilities of `actions`, state values and certainties when `params`
/// scores the sequence `prompt + actions`.
pub fn score_actions<F: Scalar>(
    params: &Params<F>,
    prompt: &[u32],
    actions: &[u32],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    if actions.is_empty() {
        return Ok(Default::default());
    }
    let mut input = prompt.to_vec();
    input.extend_from_slice(&actions[..actions.len() - 1]);
    let out = forward(params, &input)?;
    let p = prompt.len();
    let mut lps = Vec::with_capacity(actions.len());
    let mut vals = Vec::with_capacity(actions.len());
    let mut js = Vec::with_capacity(actions.len());
    for (t, &a) in actions.iter().enumerate() {
        let row = out.logits_at(p - 1 + t);
        lps.push(log_softmax(row)[a as usize]);
        vals.push(out.values[p - 1 + t].as_f64());
        js.push(certainty(row));
    }
    Ok((lps, vals, js))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeFailure {
    pub episode: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Collected {
    pub trajectories: Vec<Trajectory>,
    pub failures: Vec<EpisodeFailure>,
}

impl Collected {
    /// Mean terminal reward over the collected trajectories.
    pub fn success_rate(&self) -> f64 {
        if self.trajectories.is_empty() {
            return 0.0;
        }
        self.trajectories.iter().map(|t| t.reward).sum::<f64>() / self.trajectories.len() as f64
    }
}

/// Runs `n_episodes` sampled episodes under `policy`. Episode `i` draws its
/// problem and its sampling stream from seeds derived from `(seed, i)`. Each
/// emitted token is rescored under `policy` (log-prob, value) and under `old`
/// (log-prob, certainty). A failing episode is reported and skipped.
pub fn collect<F: Scalar>(
    policy: &Params<F>,
    old: &Params<F>,
    n_episodes: usize,
    n_digits: usize,
    gen: &GenerationConfig,
    gamma: f64,
    seed: u64,
) -> Result<Collected> {
    if !policy.config().same_shape(old.config()) {
        return Err(Error::ConfigMismatch {
            expected: old.config().summary(),
            found: policy.config().summary(),
        });
    }
    let vocab = Vocabulary::scratchpad();
    let ctx = policy.config().context_len;
    let mut states: Vec<EpisodeState> = (0..n_episodes)
        .map(|i| {
            let mut rng = rng_from(derive_seed(seed, &format!("episode/{i}/problem")));
            reset(n_digits, &mut rng, gen.max_new_tokens, ctx)
        })
        .collect();
    let seeds: Vec<u64> = (0..n_episodes)
        .map(|i| derive_seed(seed, &format!("episode/{i}/sample")))
        .collect();
    let prompts: Vec<&[u32]> = states.iter().map(|s| s.prompt.as_slice()).collect();
    let gens = generate_batch(policy, &prompts, &seeds, vocab.eos_id(), gen)?;

    let mut out = Collected::default();
    for (i, (state, g)) in states.iter_mut().zip(gens).enumerate() {
        match finish_episode(policy, old, state, &g.tokens, gamma) {
            Ok(t) => out.trajectories.push(t),
            Err(e) => out.failures.push(EpisodeFailure { episode: i, error: e.to_string() }),
        }
    }
    Ok(out)
}

fn finish_episode<F: Scalar>(
    policy: &Params<F>,
    old: &Params<F>,
    state: &mut EpisodeState,
    tokens: &[u32],
    gamma: f64,
) -> Result<Trajectory> {
    let mut reward = 0.0;
    for &tok in tokens {
        reward = state.step(tok)?.reward;
    }
    let Some(reason) = state.terminal_reason else {
        return Err(Error::Config("generation stopped before the episode ended".into()));
    };
    let (logp_new, values, _) = score_actions(policy, &state.prompt, &state.generated)?;
    let (logp_old, _, certainty_old) = score_actions(old, &state.prompt, &state.generated)?;
    Ok(Trajectory {
        a: state.problem.a.to_string(),
        b: state.problem.b.to_string(),
        prompt: state.prompt.clone(),
        actions: state.generated.clone(),
        returns: discounted_returns(reward, state.generated.len(), gamma),
        logp_new,
        logp_old,
        values,
        certainty_old,
        reward,
        terminal_reason: reason,
    })
}
