//! Row kernels shared by the batched graph and incremental inference.

pub(crate) const LN_EPS: f64 = 1e-5;

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out = x · W + b` for one row; `w` is `din × dout` row-major.
#[inline]
pub(crate) fn linear_row(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let dout = b.len();
    out.copy_from_slice(b);
    for (k, &xk) in x.iter().enumerate() {
        if xk != 0.0 {
            axpy(xk, &w[k * dout..(k + 1) * dout], out);
        }
    }
}

pub(crate) fn linear(x: &[f64], rows: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let dout = b.len();
    let din = x.len() / rows.max(1);
    let mut out = vec![0.0; rows * dout];
    for i in 0..rows {
        linear_row(
            &x[i * din..(i + 1) * din],
            w,
            b,
            &mut out[i * dout..(i + 1) * dout],
        );
    }
    out
}

/// Accumulates gradients of `y = x · W + b`. `dx` may be `None` when the
/// input is not differentiable.
pub(crate) fn linear_backward(
    x: &[f64],
    rows: usize,
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: &mut [f64],
    db: &mut [f64],
) {
    let dout = db.len();
    let din = x.len() / rows.max(1);
    for i in 0..rows {
        let dyi = &dy[i * dout..(i + 1) * dout];
        let xi = &x[i * din..(i + 1) * din];
        for (k, &xk) in xi.iter().enumerate() {
            if xk != 0.0 {
                axpy(xk, dyi, &mut dw[k * dout..(k + 1) * dout]);
            }
        }
        for (d, g) in db.iter_mut().zip(dyi) {
            *d += g;
        }
    }
    if let Some(dx) = dx {
        for i in 0..rows {
            let dyi = &dy[i * dout..(i + 1) * dout];
            for k in 0..din {
                dx[i * din + k] += dot(dyi, &w[k * dout..(k + 1) * dout]);
            }
        }
    }
}

/// Layer norm of one row; writes the normalized (pre-gain) row to `xhat` and
/// returns the reciprocal standard deviation.
#[inline]
pub(crate) fn layer_norm_row(
    x: &[f64],
    g: &[f64],
    b: &[f64],
    xhat: &mut [f64],
    out: &mut [f64],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = g[i] * xhat[i] + b[i];
    }
    rstd
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LnCache {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm(x: &[f64], rows: usize, g: &[f64], b: &[f64]) -> LnCache {
    let d = g.len();
    let mut c = LnCache {
        out: vec![0.0; rows * d],
        xhat: vec![0.0; rows * d],
        rstd: vec![0.0; rows],
    };
    for i in 0..rows {
        let r = i * d..(i + 1) * d;
        c.rstd[i] = layer_norm_row(&x[r.clone()], g, b, &mut c.xhat[r.clone()], &mut c.out[r]);
    }
    c
}

/// Accumulates `dx`, `dg`, `db` for a layer norm whose output gradient is `dy`.
pub(crate) fn layer_norm_backward(
    c: &LnCache,
    g: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    let d = g.len();
    let n = d as f64;
    let mut dxhat = vec![0.0; d];
    for i in 0..c.rstd.len() {
        let r = i * d..(i + 1) * d;
        let (dyi, xh) = (&dy[r.clone()], &c.xhat[r.clone()]);
        let mut sum = 0.0;
        let mut sum_x = 0.0;
        for j in 0..d {
            dg[j] += dyi[j] * xh[j];
            db[j] += dyi[j];
            dxhat[j] = dyi[j] * g[j];
            sum += dxhat[j];
            sum_x += dxhat[j] * xh[j];
        }
        let k = c.rstd[i] / n;
        let dxi = &mut dx[r];
        for j in 0..d {
            dxi[j] += k * (n * dxhat[j] - sum - xh[j] * sum_x);
        }
    }
}

/// Multi-head attention for one query row over the first `n_keys` rows of
/// `keys`/`values` (each `n × d`). Writes the context row and the per-head
/// attention weights (`heads × n_keys`) into `probs`.
pub(crate) fn attend_row(
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    n_keys: usize,
    heads: usize,
    out: &mut [f64],
    probs: &mut [f64],
) {
    let d = q.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    out.fill(0.0);
    for h in 0..heads {
        let hs = h * dh..(h + 1) * dh;
        let qh = &q[hs.clone()];
        let p = &mut probs[h * n_keys..(h + 1) * n_keys];
        let mut max = f64::NEG_INFINITY;
        for j in 0..n_keys {
            let s = dot(qh, &keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
            p[j] = s;
            max = max.max(s);
        }
        let mut sum = 0.0;
        for pj in p.iter_mut() {
            *pj = (*pj - max).exp();
            sum += *pj;
        }
        let inv = 1.0 / sum;
        let oh = &mut out[hs];
        for j in 0..n_keys {
            p[j] *= inv;
            axpy(p[j], &values[j * d + h * dh..j * d + (h + 1) * dh], oh);
        }
    }
}

/// Batched attention cache: query row `i` sees `key_lens[i]` keys.
#[derive(Debug, Clone, Default)]
pub(crate) struct AttnCache {
    pub ctx: Vec<f64>,
    pub probs: Vec<f64>,
    pub offsets: Vec<usize>,
}

pub(crate) fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    key_lens: &[usize],
    heads: usize,
    d: usize,
) -> AttnCache {
    let rows = key_lens.len();
    let mut offsets = Vec::with_capacity(rows);
    let mut total = 0;
    for &n in key_lens {
        offsets.push(total);
        total += heads * n;
    }
    let mut c = AttnCache {
        ctx: vec![0.0; rows * d],
        probs: vec![0.0; total],
        offsets,
    };
    for i in 0..rows {
        let n = key_lens[i];
        let off = c.offsets[i];
        attend_row(
            &q[i * d..(i + 1) * d],
            k,
            v,
            n,
            heads,
            &mut c.ctx[i * d..(i + 1) * d],
            &mut c.probs[off..off + heads * n],
        );
    }
    c
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    cache: &AttnCache,
    key_lens: &[usize],
    heads: usize,
    d: usize,
    dctx: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = Vec::new();
    for (i, &n) in key_lens.iter().enumerate() {
        let off = cache.offsets[i];
        for h in 0..heads {
            let p = &cache.probs[off + h * n..off + (h + 1) * n];
            let dc = &dctx[i * d + h * dh..i * d + (h + 1) * dh];
            let qh = &q[i * d + h * dh..i * d + (h + 1) * dh];
            dp.clear();
            let mut s = 0.0;
            for j in 0..n {
                let kv = j * d + h * dh..j * d + (h + 1) * dh;
                let g = dot(dc, &v[kv.clone()]);
                axpy(p[j], dc, &mut dv[kv]);
                dp.push(g);
                s += p[j] * g;
            }
            for j in 0..n {
                let ds = p[j] * (dp[j] - s) * scale;
                if ds != 0.0 {
                    let kv = j * d + h * dh..j * d + (h + 1) * dh;
                    axpy(
                        ds,
                        &k[kv.clone()],
                        &mut dq[i * d + h * dh..i * d + (h + 1) * dh],
                    );
                    axpy(ds, qh, &mut dk[kv]);
                }
            }
        }
    }
}

pub(crate) fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// In-place log-softmax.
pub(crate) fn log_softmax(x: &mut [f64]) {
    let lse = log_sum_exp(x);
    for v in x {
        *v -= lse;
    }
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Sinusoidal position encoding added in place to one row.
pub(crate) fn add_position(pos: usize, row: &mut [f64]) {
    let d = row.len();
    for i in 0..d / 2 {
        let freq = (10000f64).powf(-((2 * i) as f64) / d as f64);
        let a = pos as f64 * freq;
        row[2 * i] += a.sin();
        row[2 * i + 1] += a.cos();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..19).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-9);
    }

    #[test]
    fn attention_weights_normalize() {
        let q = [0.3, -0.2, 0.5, 0.1];
        let k = [0.1, 0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9, 0.0, 0.1, 0.2];
        let mut out = [0.0; 4];
        let mut p = [0.0; 6];
        attend_row(&q, &k, &k, 3, 2, &mut out, &mut p);
        assert!((p[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut x = vec![1.0, 2.0, 3.0, -100.0];
        log_softmax(&mut x);
        assert!(log_sum_exp(&x).abs() < 1e-12);
    }
}
