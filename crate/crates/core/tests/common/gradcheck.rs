//! Central finite differences against the analytic gradients of every
//! training loss, on a 1-layer, width-8 model in f64.

use arithrl::a2c::{a2c_loss_and_grad, KlMode, RLConfig};
use arithrl::model::{GenerationConfig, ModelConfig, Params};
use arithrl::pretrain::{batch_loss_and_grad, encode_records, Example};
use arithrl::rlenv::{collect, Trajectory};
use arithrl::scratchpad::{dataset::generate_records, DatasetSpec, Split, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIRECTIONS: usize = 100;
pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

fn model(seed: u64) -> Params<f64> {
    let mut p = Params::<f64>::init(ModelConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 32,
        context_len: 64,
        vocab_size: Vocabulary::scratchpad().size(),
        dropout_rate: 0.0,
        parameter_init_seed: seed,
    })
    .unwrap();
    // larger weights than the default init so every term has curvature
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in p.data.iter_mut() {
        *x += (rng.random::<f64>() - 0.5) * 0.3;
    }
    p
}

fn shifted(p: &Params<f64>, dir: &[f64], eps: f64) -> Params<f64> {
    let mut q = p.clone();
    for (x, d) in q.data.iter_mut().zip(dir) {
        *x += eps * d;
    }
    q
}

/// Worst relative error of the directional derivative over random directions.
fn check(p: &Params<f64>, loss_and_grad: impl Fn(&Params<f64>, &mut [f64]) -> f64) -> f64 {
    let mut grad = vec![0.0; p.len()];
    loss_and_grad(p, &mut grad);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut scratch = vec![0.0; p.len()];
    let mut worst = 0.0f64;
    for _ in 0..DIRECTIONS {
        let dir: Vec<f64> = (0..p.len()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let plus = loss_and_grad(&shifted(p, &dir, EPS), &mut scratch);
        let minus = loss_and_grad(&shifted(p, &dir, -EPS), &mut scratch);
        let fd = (plus - minus) / (2.0 * EPS);
        let an: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
        worst = worst.max(err);
    }
    worst
}

fn batch() -> (Params<f64>, Vec<Trajectory>) {
    let policy = model(1);
    let old = model(2);
    let gen = GenerationConfig::sample(14, 0);
    let c = collect(&policy, &old, 4, 2, &gen, 0.95, 5).unwrap();
    let mut trajs = c.trajectories;
    // mix in a winning episode so returns differ from zero
    trajs[0].reward = 1.0;
    (policy, trajs)
}

pub fn only(vf: f64, ent: f64, kl: f64, mode: KlMode, beta: f64) -> RLConfig {
    RLConfig {
        gamma: 0.95,
        vf_coef: vf,
        ent_coef: ent,
        kl_coef: kl,
        kl_mode: mode,
        beta,
        ..RLConfig::standard_reference()
    }
}

pub fn a2c_check(cfg: RLConfig) -> f64 {
    let (p, trajs) = batch();
    check(&p, |q, g| {
        g.fill(0.0);
        a2c_loss_and_grad(q, &trajs, &cfg, g).unwrap().total
    })
}

pub fn cross_entropy_check() -> f64 {
    let recs = generate_records(&DatasetSpec { n_max: 2, n_examples: 3, seed: 4, split: Split::Train });
    let ex: Vec<Example> = encode_records(&recs, &Vocabulary::scratchpad())
        .unwrap()
        .into_iter()
        .map(|mut e| {
            e.tokens.truncate(40);
            e
        })
        .collect();
    let refs: Vec<&Example> = ex.iter().collect();
    check(&model(3), |q, g| {
        g.fill(0.0);
        batch_loss_and_grad::<f64, ChaCha8Rng>(q, &refs, g, None).unwrap()
    })
}

pub fn full_loss_check() -> f64 {
    let mut cfg = RLConfig::prioritized_reference();
    cfg.gamma = 0.95;
    cfg.beta = 2.0;
    a2c_check(cfg)
}
