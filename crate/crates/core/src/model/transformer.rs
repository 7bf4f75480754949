//! Pre-norm decoder blocks with explicit forward caches and hand-written
//! backward passes.
//!
//! ```text
//! x   = tok_emb[token] + pos_emb[position]
//! per layer:
//!   a = LN1(x);  x = x + Attn(a) Wo + bo
//!   f = LN2(x);  x = x + GELU(f W1 + b1) W2 + b2
//! h   = LN_f(x)
//! ```
//!
//! Attention rows with no allowed key (padding) produce a zero output.

use super::float::Float;
use super::params::{LayerParams, Params};
use super::ModelConfig;
use crate::packing::AttentionMask;

const LN_EPS: f64 = 1e-5;

/// `x[rows, inner] @ w[inner, cols]`.
pub(crate) fn matmul<T: Float>(x: &[T], w: &[T], rows: usize, inner: usize, cols: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let yr = &mut y[r * cols..(r + 1) * cols];
        for (k, &a) in x[r * inner..(r + 1) * inner].iter().enumerate() {
            let wr = &w[k * cols..(k + 1) * cols];
            for (yv, &wv) in yr.iter_mut().zip(wr) {
                *yv += a * wv;
            }
        }
    }
    y
}

/// Dot product with eight interleaved partial sums so the loop vectorizes.
/// The summation order depends only on the length.
pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8 * 8;
    for (ca, cb) in a[..chunks].chunks_exact(8).zip(b[..chunks].chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in a[chunks..].iter().zip(&b[chunks..]) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn add_bias<T: Float>(y: &mut [T], b: &[T]) {
    for row in y.chunks_mut(b.len()) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
}

/// `dy[rows, cols] @ w[inner, cols]^T`, accumulated into `dx[rows, inner]`.
fn matmul_bt_acc<T: Float>(
    dy: &[T],
    w: &[T],
    rows: usize,
    inner: usize,
    cols: usize,
    dx: &mut [T],
) {
    for r in 0..rows {
        let dyr = &dy[r * cols..(r + 1) * cols];
        for k in 0..inner {
            let wr = &w[k * cols..(k + 1) * cols];
            dx[r * inner + k] += dot(dyr, wr);
        }
    }
}

/// `dw[inner, cols] += x[rows, inner]^T @ dy[rows, cols]`.
fn matmul_at_acc<T: Float>(
    x: &[T],
    dy: &[T],
    rows: usize,
    inner: usize,
    cols: usize,
    dw: &mut [T],
) {
    for r in 0..rows {
        let dyr = &dy[r * cols..(r + 1) * cols];
        for (k, &a) in x[r * inner..(r + 1) * inner].iter().enumerate() {
            let dwr = &mut dw[k * cols..(k + 1) * cols];
            for (d, &g) in dwr.iter_mut().zip(dyr) {
                *d += a * g;
            }
        }
    }
}

fn bias_grad_acc<T: Float>(dy: &[T], db: &mut [T]) {
    for row in dy.chunks(db.len()) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
    out: Vec<T>,
}

fn layernorm<T: Float>(x: &[T], gain: &[T], bias: &[T]) -> LnCache<T> {
    let d = gain.len();
    let rows = x.len() / d;
    let inv_d = T::of(1.0 / d as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for i in 0..d {
            let h = (xr[i] - mean) * rs;
            xhat[r * d + i] = h;
            out[r * d + i] = h * gain[i] + bias[i];
        }
    }
    LnCache { xhat, rstd, out }
}

fn layernorm_backward<T: Float>(
    dout: &[T],
    cache: &LnCache<T>,
    gain: &[T],
    dx: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
) {
    let d = gain.len();
    let inv_d = T::of(1.0 / d as f64);
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let dr = &dout[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for i in 0..d {
            let dxhat = dr[i] * gain[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xh[i];
            dgain[i] += dr[i] * xh[i];
            dbias[i] += dr[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for i in 0..d {
            let dxhat = dr[i] * gain[i];
            dx[r * d + i] += rs * (dxhat - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

const GELU_K: f64 = 0.044_715;

fn gelu<T: Float>(x: T) -> T {
    let s = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (s * (x + T::of(GELU_K) * x * x * x)).tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let s = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    let th = (s * (x + T::of(GELU_K) * x * x * x)).tanh();
    half * (T::one() + th)
        + half * x * (T::one() - th * th) * s * (T::one() + T::of(3.0 * GELU_K) * x * x)
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[head, query, key]`, zero where blocked.
    probs: Vec<T>,
    att: Vec<T>,
    ln2: LnCache<T>,
    ff_pre: Vec<T>,
    ff_act: Vec<T>,
}

/// Activations kept for the backward pass.
pub(crate) struct ForwardPass<T> {
    pub(crate) len: usize,
    tokens: Vec<u32>,
    positions: Vec<usize>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
}

impl<T: Float> ForwardPass<T> {
    /// Final normalized hidden states, `[len, d_model]`.
    pub(crate) fn hidden(&self) -> &[T] {
        &self.lnf.out
    }
}

pub(crate) fn forward<T: Float>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[u32],
    positions: &[usize],
    mask: &AttentionMask,
) -> ForwardPass<T> {
    let n = tokens.len();
    let d = cfg.d_model;
    let mut x = vec![T::zero(); n * d];
    for (t, (&tok, &pos)) in tokens.iter().zip(positions).enumerate() {
        let e = params.tok_emb.row(tok as usize);
        let p = params.pos_emb.row(pos);
        for i in 0..d {
            x[t * d + i] = e[i] + p[i];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let (cache, next) = layer_forward(cfg, lp, &x, mask);
        layers.push(cache);
        x = next;
    }
    let lnf = layernorm(&x, &params.lnf_gain.data, &params.lnf_bias.data);
    ForwardPass {
        len: n,
        tokens: tokens.to_vec(),
        positions: positions.to_vec(),
        layers,
        lnf,
    }
}

fn layer_forward<T: Float>(
    cfg: &ModelConfig,
    lp: &LayerParams<T>,
    x: &[T],
    mask: &AttentionMask,
) -> (LayerCache<T>, Vec<T>) {
    let d = cfg.d_model;
    let n = x.len() / d;
    let ln1 = layernorm(x, &lp.ln1_gain.data, &lp.ln1_bias.data);
    let mut q = matmul(&ln1.out, &lp.wq.data, n, d, d);
    add_bias(&mut q, &lp.bq.data);
    let mut k = matmul(&ln1.out, &lp.wk.data, n, d, d);
    add_bias(&mut k, &lp.bk.data);
    let mut v = matmul(&ln1.out, &lp.wv.data, n, d, d);
    add_bias(&mut v, &lp.bv.data);

    let (probs, att) = attention(cfg, &q, &k, &v, mask);
    let mut proj = matmul(&att, &lp.wo.data, n, d, d);
    add_bias(&mut proj, &lp.bo.data);
    let mid: Vec<T> = x.iter().zip(&proj).map(|(&a, &b)| a + b).collect();

    let ln2 = layernorm(&mid, &lp.ln2_gain.data, &lp.ln2_bias.data);
    let mut ff_pre = matmul(&ln2.out, &lp.w1.data, n, d, cfg.d_ff);
    add_bias(&mut ff_pre, &lp.b1.data);
    let ff_act: Vec<T> = ff_pre.iter().map(|&z| gelu(z)).collect();
    let mut ff_out = matmul(&ff_act, &lp.w2.data, n, cfg.d_ff, d);
    add_bias(&mut ff_out, &lp.b2.data);
    let out: Vec<T> = mid.iter().zip(&ff_out).map(|(&a, &b)| a + b).collect();

    let cache = LayerCache {
        ln1,
        q,
        k,
        v,
        probs,
        att,
        ln2,
        ff_pre,
        ff_act,
    };
    (cache, out)
}

fn attention<T: Float>(
    cfg: &ModelConfig,
    q: &[T],
    k: &[T],
    v: &[T],
    mask: &AttentionMask,
) -> (Vec<T>, Vec<T>) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let n = q.len() / d;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); cfg.n_heads * n * n];
    let mut out = vec![T::zero(); n * d];
    let mut scores = vec![T::zero(); n];
    for h in 0..cfg.n_heads {
        let off = h * dh;
        for i in 0..n {
            let row = mask.row(i);
            let qi = &q[i * d + off..i * d + off + dh];
            let mut max = T::neg_infinity();
            for j in 0..n {
                if row[j] {
                    let kj = &k[j * d + off..j * d + off + dh];
                    let s = dot(qi, kj) * scale;
                    scores[j] = s;
                    if s > max {
                        max = s;
                    }
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let p = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
            let mut sum = T::zero();
            for j in 0..n {
                if row[j] {
                    let e = (scores[j] - max).exp();
                    p[j] = e;
                    sum += e;
                }
            }
            let inv = T::one() / sum;
            let oi = &mut out[i * d + off..i * d + off + dh];
            for j in 0..n {
                if row[j] {
                    p[j] *= inv;
                    let vj = &v[j * d + off..j * d + off + dh];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += p[j] * vv;
                    }
                }
            }
        }
    }
    (probs, out)
}

/// Backpropagates `d_hidden` (gradient w.r.t. the final normalized hidden
/// states) through the stack, accumulating into `grads`.
pub(crate) fn backward<T: Float>(
    cfg: &ModelConfig,
    params: &Params<T>,
    fwd: &ForwardPass<T>,
    d_hidden: &[T],
    grads: &mut Params<T>,
) {
    let d = cfg.d_model;
    let n = fwd.len;
    let mut dx = vec![T::zero(); n * d];
    layernorm_backward(
        d_hidden,
        &fwd.lnf,
        &params.lnf_gain.data,
        &mut dx,
        &mut grads.lnf_gain.data,
        &mut grads.lnf_bias.data,
    );

    for (li, cache) in fwd.layers.iter().enumerate().rev() {
        let lp = &params.layers[li];
        let lg = &mut grads.layers[li];
        let dff = cfg.d_ff;

        // feed-forward branch; dx is the gradient at the block output
        matmul_at_acc(&cache.ff_act, &dx, n, dff, d, &mut lg.w2.data);
        bias_grad_acc(&dx, &mut lg.b2.data);
        let mut d_act = vec![T::zero(); n * dff];
        matmul_bt_acc(&dx, &lp.w2.data, n, dff, d, &mut d_act);
        for (g, &z) in d_act.iter_mut().zip(&cache.ff_pre) {
            *g *= gelu_grad(z);
        }
        matmul_at_acc(&cache.ln2.out, &d_act, n, d, dff, &mut lg.w1.data);
        bias_grad_acc(&d_act, &mut lg.b1.data);
        let mut d_ln2 = vec![T::zero(); n * d];
        matmul_bt_acc(&d_act, &lp.w1.data, n, d, dff, &mut d_ln2);
        let mut d_mid = dx.clone();
        layernorm_backward(
            &d_ln2,
            &cache.ln2,
            &lp.ln2_gain.data,
            &mut d_mid,
            &mut lg.ln2_gain.data,
            &mut lg.ln2_bias.data,
        );

        // attention branch
        matmul_at_acc(&cache.att, &d_mid, n, d, d, &mut lg.wo.data);
        bias_grad_acc(&d_mid, &mut lg.bo.data);
        let mut d_att = vec![T::zero(); n * d];
        matmul_bt_acc(&d_mid, &lp.wo.data, n, d, d, &mut d_att);
        let (dq, dk, dv) = attention_backward(cfg, cache, &d_att);

        let mut d_ln1 = vec![T::zero(); n * d];
        for (w, g, gw, gb) in [
            (&lp.wq, &dq, &mut lg.wq, &mut lg.bq),
            (&lp.wk, &dk, &mut lg.wk, &mut lg.bk),
            (&lp.wv, &dv, &mut lg.wv, &mut lg.bv),
        ] {
            matmul_at_acc(&cache.ln1.out, g, n, d, d, &mut gw.data);
            bias_grad_acc(g, &mut gb.data);
            matmul_bt_acc(g, &w.data, n, d, d, &mut d_ln1);
        }
        let mut d_in = d_mid;
        layernorm_backward(
            &d_ln1,
            &cache.ln1,
            &lp.ln1_gain.data,
            &mut d_in,
            &mut lg.ln1_gain.data,
            &mut lg.ln1_bias.data,
        );
        dx = d_in;
    }

    for (t, (&tok, &pos)) in fwd.tokens.iter().zip(&fwd.positions).enumerate() {
        let g = &dx[t * d..(t + 1) * d];
        let te = &mut grads.tok_emb.data[tok as usize * d..(tok as usize + 1) * d];
        for (a, &b) in te.iter_mut().zip(g) {
            *a += b;
        }
        let pe = &mut grads.pos_emb.data[pos * d..(pos + 1) * d];
        for (a, &b) in pe.iter_mut().zip(g) {
            *a += b;
        }
    }
}

fn attention_backward<T: Float>(
    cfg: &ModelConfig,
    cache: &LayerCache<T>,
    d_att: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let n = d_att.len() / d;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut dp = vec![T::zero(); n];
    for h in 0..cfg.n_heads {
        let off = h * dh;
        for i in 0..n {
            let p = &cache.probs[(h * n + i) * n..(h * n + i + 1) * n];
            let go = &d_att[i * d + off..i * d + off + dh];
            let mut p_dp = T::zero();
            for j in 0..n {
                if p[j] == T::zero() {
                    dp[j] = T::zero();
                    continue;
                }
                let vj = &cache.v[j * d + off..j * d + off + dh];
                dp[j] = dot(go, vj);
                p_dp += p[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (a, &g) in dvj.iter_mut().zip(go) {
                    *a += p[j] * g;
                }
            }
            for j in 0..n {
                if p[j] == T::zero() {
                    continue;
                }
                let ds = p[j] * (dp[j] - p_dp) * scale;
                let qi = &cache.q[i * d + off..i * d + off + dh];
                let kj = &cache.k[j * d + off..j * d + off + dh];
                let dqi = &mut dq[i * d + off..i * d + off + dh];
                for (a, &b) in dqi.iter_mut().zip(kj) {
                    *a += ds * b;
                }
                let dkj = &mut dk[j * d + off..j * d + off + dh];
                for (a, &b) in dkj.iter_mut().zip(qi) {
                    *a += ds * b;
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn matmul_small() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let w = [1.0, 0.0, 2.0, 0.0, 1.0, 3.0];
        assert_eq!(matmul(&x, &w, 2, 2, 3), vec![1.0, 2.0, 8.0, 3.0, 4.0, 18.0]);
    }

    #[test]
    fn layernorm_output_is_normalized() {
        let x = [1.0f64, 2.0, 3.0, 4.0, -2.0, 0.0, 2.0, 4.0];
        let ln = layernorm(&x, &[1.0; 4], &[0.0; 4]);
        for row in ln.out.chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }
}
