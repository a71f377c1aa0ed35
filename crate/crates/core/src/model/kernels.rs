//! Row-major building blocks and their gradients. Shapes are `[rows x cols]`.

use super::scalar::{gemm, Mat, MatMut, Scalar};

const LN_EPS: f64 = 1e-5;

pub fn layernorm_forward<F: Scalar>(
    out: &mut [F],
    mean: &mut [F],
    rstd: &mut [F],
    inp: &[F],
    g: &[F],
    b: &[F],
    d: usize,
) {
    let eps = F::from_f64_lossy(LN_EPS);
    let n = F::from_usize(d).expect("dim");
    for (t, (x, o)) in inp.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let m = x.iter().copied().sum::<F>() / n;
        let v = x.iter().map(|&xi| (xi - m) * (xi - m)).sum::<F>() / n;
        let s = F::one() / (v + eps).sqrt();
        for i in 0..d {
            o[i] = (x[i] - m) * s * g[i] + b[i];
        }
        mean[t] = m;
        rstd[t] = s;
    }
}

/// Accumulates into `dinp`, `dg` and `db`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<F: Scalar>(
    dinp: &mut [F],
    dg: &mut [F],
    db: &mut [F],
    dout: &[F],
    inp: &[F],
    g: &[F],
    mean: &[F],
    rstd: &[F],
    d: usize,
) {
    let n = F::from_usize(d).expect("dim");
    for t in 0..mean.len() {
        let x = &inp[t * d..(t + 1) * d];
        let dy = &dout[t * d..(t + 1) * d];
        let (m, s) = (mean[t], rstd[t]);
        let mut dnorm_mean = F::zero();
        let mut dnorm_norm_mean = F::zero();
        for i in 0..d {
            let norm = (x[i] - m) * s;
            let dnorm = g[i] * dy[i];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= n;
        dnorm_norm_mean /= n;
        let dx = &mut dinp[t * d..(t + 1) * d];
        for i in 0..d {
            let norm = (x[i] - m) * s;
            let dnorm = g[i] * dy[i];
            db[i] += dy[i];
            dg[i] += norm * dy[i];
            dx[i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * s;
        }
    }
}

/// `out[rows x n] = inp[rows x k] * w[k x n] + bias`.
pub fn linear_forward<F: Scalar>(out: &mut [F], inp: &[F], w: &[F], bias: &[F], rows: usize, k: usize, n: usize) {
    for row in out.chunks_exact_mut(n).take(rows) {
        row.copy_from_slice(bias);
    }
    gemm(F::one(), Mat::new(inp, rows, k), Mat::new(w, k, n), F::one(), MatMut::new(out, rows, n));
}

/// `dinp += dout * w^T`.
pub fn linear_backward_input<F: Scalar>(dinp: &mut [F], dout: &[F], w: &[F], rows: usize, k: usize, n: usize) {
    gemm(
        F::one(),
        Mat::new(dout, rows, n),
        Mat::new(w, k, n).t(),
        F::one(),
        MatMut::new(dinp, rows, k),
    );
}

/// `dw += inp^T * dout`, `db += colsum(dout)`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward_params<F: Scalar>(
    dw: &mut [F],
    db: &mut [F],
    dout: &[F],
    inp: &[F],
    rows: usize,
    k: usize,
    n: usize,
) {
    gemm(
        F::one(),
        Mat::new(inp, rows, k).t(),
        Mat::new(dout, rows, n),
        F::one(),
        MatMut::new(dw, k, n),
    );
    for row in dout.chunks_exact(n).take(rows) {
        for (acc, &x) in db.iter_mut().zip(row) {
            *acc += x;
        }
    }
}

fn gelu_consts<F: Scalar>() -> (F, F, F) {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    (c, F::from_f64_lossy(0.044715), F::from_f64_lossy(0.5))
}

/// Tanh approximation.
pub fn gelu_forward<F: Scalar>(out: &mut [F], inp: &[F]) {
    let (c, k, half) = gelu_consts::<F>();
    for (o, &x) in out.iter_mut().zip(inp) {
        let u = c * (x + k * x * x * x);
        *o = half * x * (F::one() + u.tanh());
    }
}

/// `dinp += gelu'(inp) * dout`.
pub fn gelu_backward<F: Scalar>(dinp: &mut [F], inp: &[F], dout: &[F]) {
    let (c, k, half) = gelu_consts::<F>();
    let three = F::from_f64_lossy(3.0);
    for ((di, &x), &dy) in dinp.iter_mut().zip(inp).zip(dout) {
        let u = c * (x + k * x * x * x);
        let th = u.tanh();
        let sech2 = F::one() - th * th;
        let grad = half * (F::one() + th) + half * x * sech2 * c * (F::one() + three * k * x * x);
        *di += grad * dy;
    }
}

/// Causal multi-head attention over `qkv[t x 3d]` (q, k, v blocks per row).
/// Writes the mixed values to `out[t x d]` and the probabilities to
/// `att[h x t x t]` (zero above the diagonal).
pub fn attention_forward<F: Scalar>(out: &mut [F], att: &mut [F], qkv: &[F], t: usize, d: usize, heads: usize) {
    let hd = d / heads;
    let scale = F::one() / F::from_usize(hd).expect("dim").sqrt();
    for h in 0..heads {
        let p = &mut att[h * t * t..(h + 1) * t * t];
        let q = Mat::strided(&qkv[h * hd..], t, hd, 3 * d, 1);
        let k = Mat::strided(&qkv[d + h * hd..], t, hd, 3 * d, 1);
        gemm(scale, q, k.t(), F::zero(), MatMut::new(p, t, t));
        for row in 0..t {
            let r = &mut p[row * t..(row + 1) * t];
            let max = r[..=row].iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for x in &mut r[..=row] {
                *x = (*x - max).exp();
                sum += *x;
            }
            let inv = F::one() / sum;
            for x in &mut r[..=row] {
                *x *= inv;
            }
            r[row + 1..].fill(F::zero());
        }
        let v = Mat::strided(&qkv[2 * d + h * hd..], t, hd, 3 * d, 1);
        gemm(
            F::one(),
            Mat::new(p, t, t),
            v,
            F::zero(),
            MatMut::strided(&mut out[h * hd..], t, hd, d, 1),
        );
    }
}

/// Accumulates into `dqkv`. `scratch` must hold at least `2 * t * t` elements.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<F: Scalar>(
    dqkv: &mut [F],
    scratch: &mut [F],
    dout: &[F],
    att: &[F],
    qkv: &[F],
    t: usize,
    d: usize,
    heads: usize,
) {
    let hd = d / heads;
    let scale = F::one() / F::from_usize(hd).expect("dim").sqrt();
    let (dp, ds) = scratch[..2 * t * t].split_at_mut(t * t);
    for h in 0..heads {
        let p = &att[h * t * t..(h + 1) * t * t];
        let dy = Mat::strided(&dout[h * hd..], t, hd, d, 1);
        let v = Mat::strided(&qkv[2 * d + h * hd..], t, hd, 3 * d, 1);
        gemm(F::one(), dy, v.t(), F::zero(), MatMut::new(dp, t, t));
        // dV += P^T dY
        gemm(
            F::one(),
            Mat::new(p, t, t).t(),
            dy,
            F::one(),
            MatMut::strided(&mut dqkv[2 * d + h * hd..], t, hd, 3 * d, 1),
        );
        for row in 0..t {
            let pr = &p[row * t..(row + 1) * t];
            let dpr = &dp[row * t..(row + 1) * t];
            let dot: F = pr[..=row].iter().zip(&dpr[..=row]).map(|(&a, &b)| a * b).sum();
            let dsr = &mut ds[row * t..(row + 1) * t];
            for s in 0..=row {
                dsr[s] = pr[s] * (dpr[s] - dot);
            }
            dsr[row + 1..].fill(F::zero());
        }
        let q = Mat::strided(&qkv[h * hd..], t, hd, 3 * d, 1);
        let k = Mat::strided(&qkv[d + h * hd..], t, hd, 3 * d, 1);
        gemm(
            scale,
            Mat::new(ds, t, t),
            k,
            F::one(),
            MatMut::strided(&mut dqkv[h * hd..], t, hd, 3 * d, 1),
        );
        gemm(
            scale,
            Mat::new(ds, t, t).t(),
            q,
            F::one(),
            MatMut::strided(&mut dqkv[d + h * hd..], t, hd, 3 * d, 1),
        );
    }
}
