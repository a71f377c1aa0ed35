//! Decoder-only transformer with a policy (next-token logits) head and a
//! scalar value head sharing the same trunk.
//!
//! Forward and backward passes are written out by hand over flat parameter
//! buffers. The element type is generic so the same code runs in `f32` for
//! training and in `f64` for finite-difference checks.

mod checkpoint;
mod generate;
mod kernels;
mod scalar;
mod transformer;

pub use checkpoint::{MANIFEST_FILE as CHECKPOINT_MANIFEST, load_checkpoint, params_digest, save_checkpoint, CheckpointManifest};
pub use generate::{generate, generate_batch, Decoding, Generation, GenerationConfig};
pub use scalar::{gemm, Mat, MatMut, Scalar};
pub use transformer::{backward, forward, forward_train, Activations, PolicyValueOutput};

use crate::error::{Error, Result};
use crate::seed::rng_from;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    #[serde(default = "scratchpad_vocab_size")]
    pub vocab_size: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub parameter_init_seed: u64,
}

fn scratchpad_vocab_size() -> usize {
    crate::scratchpad::Vocabulary::scratchpad().size()
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            context_len: 512,
            vocab_size,
            dropout_rate: 0.0,
            parameter_init_seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("layer, width, head and feed-forward sizes must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.context_len == 0 || self.vocab_size < 2 {
            return bad("context_len must be positive and vocab_size at least 2");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        Ok(())
    }

    /// Checks the context fits the longest document for operands of `n_digits`.
    pub fn check_fits(&self, n_digits: usize) -> Result<()> {
        let need = crate::scratchpad::max_doc_len(n_digits);
        if need > self.context_len {
            return Err(Error::Config(format!(
                "context_len {} is shorter than the longest {n_digits}-digit document ({need})",
                self.context_len
            )));
        }
        Ok(())
    }

    /// Same parameter layout, ignoring the init seed and dropout.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        (self.n_layers, self.d_model, self.n_heads, self.d_ff, self.context_len, self.vocab_size)
            == (other.n_layers, other.d_model, other.n_heads, other.d_ff, other.context_len, other.vocab_size)
    }

    pub fn summary(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerRanges {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub proj_w: Range<usize>,
    pub proj_b: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub fc_w: Range<usize>,
    pub fc_b: Range<usize>,
    pub fcproj_w: Range<usize>,
    pub fcproj_b: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub wte: Range<usize>,
    pub wpe: Range<usize>,
    pub layers: Vec<LayerRanges>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub lm_w: Range<usize>,
    pub val_w: Range<usize>,
    pub val_b: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let mut at = 0usize;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let wte = take(v * d);
        let wpe = take(c.context_len * d);
        let layers = (0..c.n_layers)
            .map(|_| LayerRanges {
                ln1_g: take(d),
                ln1_b: take(d),
                qkv_w: take(d * 3 * d),
                qkv_b: take(3 * d),
                proj_w: take(d * d),
                proj_b: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                fc_w: take(d * f),
                fc_b: take(f),
                fcproj_w: take(f * d),
                fcproj_b: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let lm_w = take(d * v);
        let val_w = take(d);
        let val_b = take(1);
        Layout {
            wte,
            wpe,
            layers,
            lnf_g,
            lnf_b,
            lm_w,
            val_w,
            val_b,
            total: at,
        }
    }

    /// Ranges belonging to the value head only.
    pub fn value_head(&self) -> [Range<usize>; 2] {
        [self.val_w.clone(), self.val_b.clone()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    config: ModelConfig,
    layout: Layout,
    pub data: Vec<F>,
}

impl<F: Scalar> Params<F> {
    /// GPT-2 style initialisation: N(0, 0.02) weights, residual projections
    /// scaled by `1/sqrt(2 * n_layers)`, unit layer-norm gains, zero biases
    /// and a zero value head.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![F::zero(); layout.total];
        let mut rng = rng_from(config.parameter_init_seed);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut fill = |data: &mut [F], r: &Range<usize>, s: f64| {
            let normal = Normal::new(0.0, s).expect("valid std");
            for x in &mut data[r.clone()] {
                *x = F::from_f64_lossy(normal.sample(&mut rng));
            }
        };
        fill(&mut data, &layout.wte, std);
        fill(&mut data, &layout.wpe, 0.01);
        for l in &layout.layers {
            fill(&mut data, &l.qkv_w, std);
            fill(&mut data, &l.proj_w, resid_std);
            fill(&mut data, &l.fc_w, std);
            fill(&mut data, &l.fcproj_w, resid_std);
        }
        fill(&mut data, &layout.lm_w, std);
        for r in layout
            .layers
            .iter()
            .flat_map(|l| [&l.ln1_g, &l.ln2_g])
            .chain([&layout.lnf_g])
        {
            data[r.clone()].fill(F::one());
        }
        Ok(Params {
            config,
            layout,
            data,
        })
    }

    /// Overwrites the position table with sinusoids of the given amplitude.
    pub fn from_data(config: ModelConfig, data: Vec<F>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.total,
                data.len()
            )));
        }
        Ok(Params {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<F> {
        vec![F::zero(); self.data.len()]
    }

    pub fn t(&self, r: &Range<usize>) -> &[F] {
        &self.data[r.clone()]
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|&x| G::from_f64_lossy(x.as_f64())).collect(),
        }
    }
}

/// `log softmax` in f64.
pub fn log_softmax<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let max = logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|x| x.as_f64() - lse).collect()
}

pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Natural-log entropy of `softmax(logits)`.
pub fn entropy<F: Scalar>(logits: &[F]) -> f64 {
    log_softmax(logits)
        .into_iter()
        .map(|lp| {
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum()
}

/// Normalised negentropy `(H_max - H) / H_max` with `H_max = ln |V|`, in `[0, 1]`.
pub fn certainty<F: Scalar>(logits: &[F]) -> f64 {
    let h_max = (logits.len() as f64).ln();
    if h_max <= 0.0 {
        return 1.0;
    }
    ((h_max - entropy(logits)) / h_max).clamp(0.0, 1.0)
}
