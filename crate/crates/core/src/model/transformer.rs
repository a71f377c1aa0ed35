use super::kernels::*;
use super::{Params, Scalar};
use crate::error::{Error, Result};
use rand::Rng;

/// Per-position next-token logits (`[t x vocab]`) and state values (`[t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValueOutput<F> {
    pub vocab: usize,
    pub logits: Vec<F>,
    pub values: Vec<F>,
}

impl<F: Scalar> PolicyValueOutput<F> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn logits_at(&self, pos: usize) -> &[F] {
        &self.logits[pos * self.vocab..(pos + 1) * self.vocab]
    }
}

struct LayerActs<F> {
    ln1: Vec<F>,
    ln1_mean: Vec<F>,
    ln1_rstd: Vec<F>,
    qkv: Vec<F>,
    att: Vec<F>,
    atty: Vec<F>,
    resid_mid: Vec<F>,
    ln2: Vec<F>,
    ln2_mean: Vec<F>,
    ln2_rstd: Vec<F>,
    fch: Vec<F>,
    fch_gelu: Vec<F>,
    // dropout scale masks; empty when dropout is off
    drop_attn: Vec<F>,
    drop_mlp: Vec<F>,
}

/// Everything the backward pass needs from one forward pass over one sequence.
pub struct Activations<F> {
    tokens: Vec<u32>,
    /// `resid[0]` is the embedding sum, `resid[l + 1]` the output of layer `l`.
    resid: Vec<Vec<F>>,
    layers: Vec<LayerActs<F>>,
    lnf: Vec<F>,
    lnf_mean: Vec<F>,
    lnf_rstd: Vec<F>,
    pub output: PolicyValueOutput<F>,
}

impl<F> Activations<F> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub(crate) fn check_input<F: Scalar>(params: &Params<F>, tokens: &[u32]) -> Result<()> {
    let c = params.config();
    if tokens.len() > c.context_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: c.context_len,
        });
    }
    if let Some((position, &id)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &id)| id as usize >= c.vocab_size)
    {
        return Err(Error::TokenOutOfRange {
            id,
            position,
            vocab_size: c.vocab_size,
        });
    }
    Ok(())
}

fn apply_dropout<F: Scalar, R: Rng + ?Sized>(x: &mut [F], rate: f64, rng: &mut R) -> Vec<F> {
    let keep = F::from_f64_lossy(1.0 / (1.0 - rate));
    let mask: Vec<F> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
        .collect();
    for (y, &m) in x.iter_mut().zip(&mask) {
        *y *= m;
    }
    mask
}

/// Inference forward pass (no dropout).
pub fn forward<F: Scalar>(params: &Params<F>, tokens: &[u32]) -> Result<PolicyValueOutput<F>> {
    Ok(forward_train::<F, rand_chacha::ChaCha8Rng>(params, tokens, None)?.output)
}

/// Forward pass keeping activations. Dropout is applied only when an RNG is
/// supplied and the configured rate is positive.
pub fn forward_train<F: Scalar, R: Rng + ?Sized>(
    params: &Params<F>,
    tokens: &[u32],
    mut dropout_rng: Option<&mut R>,
) -> Result<Activations<F>> {
    check_input(params, tokens)?;
    let c = params.config();
    let lay = params.layout();
    let (t, d, f, v, heads) = (tokens.len(), c.d_model, c.d_ff, c.vocab_size, c.n_heads);
    let rate = c.dropout_rate;
    let zeros = |n: usize| vec![F::zero(); n];

    let wte = params.t(&lay.wte);
    let wpe = params.t(&lay.wpe);
    let mut x0 = zeros(t * d);
    for (pos, (&tok, row)) in tokens.iter().zip(x0.chunks_exact_mut(d)).enumerate() {
        let te = &wte[tok as usize * d..(tok as usize + 1) * d];
        let pe = &wpe[pos * d..(pos + 1) * d];
        for i in 0..d {
            row[i] = te[i] + pe[i];
        }
    }

    let mut resid = Vec::with_capacity(c.n_layers + 1);
    resid.push(x0);
    let mut layers = Vec::with_capacity(c.n_layers);
    for lr in &lay.layers {
        let x = resid.last().expect("input");
        let mut a = LayerActs {
            ln1: zeros(t * d),
            ln1_mean: zeros(t),
            ln1_rstd: zeros(t),
            qkv: zeros(t * 3 * d),
            att: zeros(heads * t * t),
            atty: zeros(t * d),
            resid_mid: zeros(t * d),
            ln2: zeros(t * d),
            ln2_mean: zeros(t),
            ln2_rstd: zeros(t),
            fch: zeros(t * f),
            fch_gelu: zeros(t * f),
            drop_attn: Vec::new(),
            drop_mlp: Vec::new(),
        };
        layernorm_forward(
            &mut a.ln1,
            &mut a.ln1_mean,
            &mut a.ln1_rstd,
            x,
            params.t(&lr.ln1_g),
            params.t(&lr.ln1_b),
            d,
        );
        linear_forward(&mut a.qkv, &a.ln1, params.t(&lr.qkv_w), params.t(&lr.qkv_b), t, d, 3 * d);
        attention_forward(&mut a.atty, &mut a.att, &a.qkv, t, d, heads);
        let mut branch = zeros(t * d);
        linear_forward(&mut branch, &a.atty, params.t(&lr.proj_w), params.t(&lr.proj_b), t, d, d);
        if let (Some(rng), true) = (dropout_rng.as_deref_mut(), rate > 0.0) {
            a.drop_attn = apply_dropout(&mut branch, rate, rng);
        }
        for i in 0..t * d {
            a.resid_mid[i] = x[i] + branch[i];
        }
        layernorm_forward(
            &mut a.ln2,
            &mut a.ln2_mean,
            &mut a.ln2_rstd,
            &a.resid_mid,
            params.t(&lr.ln2_g),
            params.t(&lr.ln2_b),
            d,
        );
        linear_forward(&mut a.fch, &a.ln2, params.t(&lr.fc_w), params.t(&lr.fc_b), t, d, f);
        gelu_forward(&mut a.fch_gelu, &a.fch);
        linear_forward(
            &mut branch,
            &a.fch_gelu,
            params.t(&lr.fcproj_w),
            params.t(&lr.fcproj_b),
            t,
            f,
            d,
        );
        if let (Some(rng), true) = (dropout_rng.as_deref_mut(), rate > 0.0) {
            a.drop_mlp = apply_dropout(&mut branch, rate, rng);
        }
        for i in 0..t * d {
            branch[i] += a.resid_mid[i];
        }
        resid.push(branch);
        layers.push(a);
    }

    let mut lnf = zeros(t * d);
    let mut lnf_mean = zeros(t);
    let mut lnf_rstd = zeros(t);
    layernorm_forward(
        &mut lnf,
        &mut lnf_mean,
        &mut lnf_rstd,
        resid.last().expect("output"),
        params.t(&lay.lnf_g),
        params.t(&lay.lnf_b),
        d,
    );
    let mut logits = zeros(t * v);
    linear_forward(&mut logits, &lnf, params.t(&lay.lm_w), &zeros(v), t, d, v);
    let mut values = zeros(t);
    linear_forward(&mut values, &lnf, params.t(&lay.val_w), params.t(&lay.val_b), t, d, 1);

    Ok(Activations {
        tokens: tokens.to_vec(),
        resid,
        layers,
        lnf,
        lnf_mean,
        lnf_rstd,
        output: PolicyValueOutput {
            vocab: v,
            logits,
            values,
        },
    })
}

/// Accumulates into `grads` the gradient of a loss whose partial derivatives
/// with respect to the outputs are `dlogits` (`[t x vocab]`) and `dvalues` (`[t]`).
pub fn backward<F: Scalar>(
    params: &Params<F>,
    acts: &Activations<F>,
    dlogits: &[F],
    dvalues: &[F],
    grads: &mut [F],
) {
    let c = params.config();
    let lay = params.layout();
    let (t, d, f, v, heads) = (acts.len(), c.d_model, c.d_ff, c.vocab_size, c.n_heads);
    assert_eq!(dlogits.len(), t * v);
    assert_eq!(dvalues.len(), t);
    assert_eq!(grads.len(), params.len());
    if t == 0 {
        return;
    }
    let zeros = |n: usize| vec![F::zero(); n];

    // heads
    let mut dlnf = zeros(t * d);
    linear_backward_input(&mut dlnf, dlogits, params.t(&lay.lm_w), t, d, v);
    linear_backward_input(&mut dlnf, dvalues, params.t(&lay.val_w), t, d, 1);
    {
        let mut no_bias = zeros(v);
        linear_backward_params(&mut grads[lay.lm_w.clone()], &mut no_bias, dlogits, &acts.lnf, t, d, v);
        let mut db = [F::zero()];
        linear_backward_params(&mut grads[lay.val_w.clone()], &mut db, dvalues, &acts.lnf, t, d, 1);
        grads[lay.val_b.start] += db[0];
    }

    let mut dres = zeros(t * d);
    {
        let (mut dg, mut db) = (zeros(d), zeros(d));
        layernorm_backward(
            &mut dres,
            &mut dg,
            &mut db,
            &dlnf,
            acts.resid.last().expect("output"),
            params.t(&lay.lnf_g),
            &acts.lnf_mean,
            &acts.lnf_rstd,
            d,
        );
        add_into(&mut grads[lay.lnf_g.clone()], &dg);
        add_into(&mut grads[lay.lnf_b.clone()], &db);
    }

    let mut scratch = zeros(2 * t * t);
    for (li, lr) in lay.layers.iter().enumerate().rev() {
        let a = &acts.layers[li];
        let x = &acts.resid[li];

        // MLP branch: resid_out = resid_mid + drop(fcproj(gelu(fc(ln2(resid_mid)))))
        let mut dbranch = dres.clone();
        if !a.drop_mlp.is_empty() {
            for (g, &m) in dbranch.iter_mut().zip(&a.drop_mlp) {
                *g *= m;
            }
        }
        let mut dgelu = zeros(t * f);
        linear_backward_input(&mut dgelu, &dbranch, params.t(&lr.fcproj_w), t, f, d);
        {
            let mut db = zeros(d);
            linear_backward_params(&mut grads[lr.fcproj_w.clone()], &mut db, &dbranch, &a.fch_gelu, t, f, d);
            add_into(&mut grads[lr.fcproj_b.clone()], &db);
        }
        let mut dfch = zeros(t * f);
        gelu_backward(&mut dfch, &a.fch, &dgelu);
        let mut dln2 = zeros(t * d);
        linear_backward_input(&mut dln2, &dfch, params.t(&lr.fc_w), t, d, f);
        {
            let mut db = zeros(f);
            linear_backward_params(&mut grads[lr.fc_w.clone()], &mut db, &dfch, &a.ln2, t, d, f);
            add_into(&mut grads[lr.fc_b.clone()], &db);
        }
        // dres now accumulates d(resid_mid)
        {
            let (mut dg, mut db) = (zeros(d), zeros(d));
            layernorm_backward(
                &mut dres,
                &mut dg,
                &mut db,
                &dln2,
                &a.resid_mid,
                params.t(&lr.ln2_g),
                &a.ln2_mean,
                &a.ln2_rstd,
                d,
            );
            add_into(&mut grads[lr.ln2_g.clone()], &dg);
            add_into(&mut grads[lr.ln2_b.clone()], &db);
        }

        // attention branch: resid_mid = x + drop(proj(attn(qkv(ln1(x)))))
        let mut dbranch = dres.clone();
        if !a.drop_attn.is_empty() {
            for (g, &m) in dbranch.iter_mut().zip(&a.drop_attn) {
                *g *= m;
            }
        }
        let mut datty = zeros(t * d);
        linear_backward_input(&mut datty, &dbranch, params.t(&lr.proj_w), t, d, d);
        {
            let mut db = zeros(d);
            linear_backward_params(&mut grads[lr.proj_w.clone()], &mut db, &dbranch, &a.atty, t, d, d);
            add_into(&mut grads[lr.proj_b.clone()], &db);
        }
        let mut dqkv = zeros(t * 3 * d);
        attention_backward(&mut dqkv, &mut scratch, &datty, &a.att, &a.qkv, t, d, heads);
        let mut dln1 = zeros(t * d);
        linear_backward_input(&mut dln1, &dqkv, params.t(&lr.qkv_w), t, d, 3 * d);
        {
            let mut db = zeros(3 * d);
            linear_backward_params(&mut grads[lr.qkv_w.clone()], &mut db, &dqkv, &a.ln1, t, d, 3 * d);
            add_into(&mut grads[lr.qkv_b.clone()], &db);
        }
        {
            let (mut dg, mut db) = (zeros(d), zeros(d));
            layernorm_backward(
                &mut dres,
                &mut dg,
                &mut db,
                &dln1,
                x,
                params.t(&lr.ln1_g),
                &a.ln1_mean,
                &a.ln1_rstd,
                d,
            );
            add_into(&mut grads[lr.ln1_g.clone()], &dg);
            add_into(&mut grads[lr.ln1_b.clone()], &db);
        }
    }

    // embeddings
    for (pos, (&tok, g)) in acts.tokens.iter().zip(dres.chunks_exact(d)).enumerate() {
        let te = lay.wte.start + tok as usize * d;
        add_into(&mut grads[te..te + d], g);
        let pe = lay.wpe.start + pos * d;
        add_into(&mut grads[pe..pe + d], g);
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
