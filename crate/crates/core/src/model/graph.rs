//! Batched teacher-forced forward pass with cached activations and the
//! matching hand-written backward pass.

use super::infer::{check_token, embed_row};
use super::ops::{
    attention, attention_backward, axpy, dot, layer_norm, layer_norm_backward, linear,
    linear_backward, log_softmax, relu_inplace, AttnCache, LnCache,
};
use super::params::{AttnIds, FfnIds, Gradients, LnIds, Parameters};
use crate::data::BOS;
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone)]
struct AttnFwd {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    cache: AttnCache,
    key_lens: Vec<usize>,
}

#[derive(Debug, Clone)]
struct FfnFwd {
    ln: LnCache,
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn ffn_forward(p: &Parameters, ln: LnIds, ids: FfnIds, h: &mut [f64], rows: usize) -> FfnFwd {
    let lnc = layer_norm(h, rows, p.w(ln.g), p.w(ln.b));
    let pre = linear(&lnc.out, rows, p.w(ids.fc1.w), p.w(ids.fc1.b));
    let mut act = pre.clone();
    relu_inplace(&mut act);
    let out = linear(&act, rows, p.w(ids.fc2.w), p.w(ids.fc2.b));
    for (x, y) in h.iter_mut().zip(&out) {
        *x += y;
    }
    FfnFwd { ln: lnc, pre, act }
}

/// Backprop through `h_out = h_in + ffn(ln(h_in))`; `dh` holds d/dh_out on
/// entry and d/dh_in on exit.
fn ffn_backward(
    p: &Parameters,
    ln: LnIds,
    ids: FfnIds,
    f: &FfnFwd,
    dh: &mut [f64],
    rows: usize,
    g: &mut Gradients,
) {
    let d = p.config().d_model;
    let ff = p.config().d_ffn;
    let mut dact = vec![0.0; rows * ff];
    {
        let (dw, db) = two(g, ids.fc2.w, ids.fc2.b);
        linear_backward(&f.act, rows, p.w(ids.fc2.w), dh, Some(&mut dact), dw, db);
    }
    for (da, &pre) in dact.iter_mut().zip(&f.pre) {
        if pre <= 0.0 {
            *da = 0.0;
        }
    }
    let mut dln = vec![0.0; rows * d];
    {
        let (dw, db) = two(g, ids.fc1.w, ids.fc1.b);
        linear_backward(
            &f.ln.out,
            rows,
            p.w(ids.fc1.w),
            &dact,
            Some(&mut dln),
            dw,
            db,
        );
    }
    let (dg, db) = two(g, ln.g, ln.b);
    layer_norm_backward(&f.ln, p.w(ln.g), &dln, dh, dg, db);
}

/// Two distinct gradient slots borrowed mutably at once.
fn two(g: &mut Gradients, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = g.slots.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = g.slots.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

/// Self-attention sublayer forward: `h += W_o · attn(ln(h))` with causal masking.
fn self_attn_forward(
    p: &Parameters,
    ln: LnIds,
    ids: AttnIds,
    h: &mut [f64],
    rows: usize,
) -> (LnCache, AttnFwd) {
    let c = p.config();
    let lnc = layer_norm(h, rows, p.w(ln.g), p.w(ln.b));
    let q = linear(&lnc.out, rows, p.w(ids.q.w), p.w(ids.q.b));
    let k = linear(&lnc.out, rows, p.w(ids.k.w), p.w(ids.k.b));
    let v = linear(&lnc.out, rows, p.w(ids.v.w), p.w(ids.v.b));
    let key_lens: Vec<usize> = (1..=rows).collect();
    let cache = attention(&q, &k, &v, &key_lens, c.n_heads, c.d_model);
    let o = linear(&cache.ctx, rows, p.w(ids.o.w), p.w(ids.o.b));
    for (x, y) in h.iter_mut().zip(&o) {
        *x += y;
    }
    (
        lnc,
        AttnFwd {
            q,
            k,
            v,
            cache,
            key_lens,
        },
    )
}

/// Backprop through an attention sublayer. Query-side input gradient is
/// added into `dh`; key/value-side input gradient goes to `dkv_in` when the
/// keys come from another sequence (cross-attention), or into `dh` as well
/// when `dkv_in` is `None` (self-attention).
#[allow(clippy::too_many_arguments)]
fn attn_backward(
    p: &Parameters,
    ln: LnIds,
    ids: AttnIds,
    lnc: &LnCache,
    a: &AttnFwd,
    kv_input: Option<&[f64]>,
    kv_rows: usize,
    dh: &mut [f64],
    dkv_in: Option<&mut [f64]>,
    g: &mut Gradients,
) {
    let c = p.config();
    let (d, rows) = (c.d_model, a.key_lens.len());
    let mut dctx = vec![0.0; rows * d];
    {
        let (dw, db) = two(g, ids.o.w, ids.o.b);
        linear_backward(
            &a.cache.ctx,
            rows,
            p.w(ids.o.w),
            dh,
            Some(&mut dctx),
            dw,
            db,
        );
    }
    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; kv_rows * d];
    let mut dv = vec![0.0; kv_rows * d];
    attention_backward(
        &a.q,
        &a.k,
        &a.v,
        &a.cache,
        &a.key_lens,
        c.n_heads,
        d,
        &dctx,
        &mut dq,
        &mut dk,
        &mut dv,
    );
    let mut dln = vec![0.0; rows * d];
    {
        let (dw, db) = two(g, ids.q.w, ids.q.b);
        linear_backward(&lnc.out, rows, p.w(ids.q.w), &dq, Some(&mut dln), dw, db);
    }
    match (kv_input, dkv_in) {
        (Some(src), Some(dsrc)) => {
            let (dw, db) = two(g, ids.k.w, ids.k.b);
            linear_backward(src, kv_rows, p.w(ids.k.w), &dk, Some(&mut *dsrc), dw, db);
            let (dw, db) = two(g, ids.v.w, ids.v.b);
            linear_backward(src, kv_rows, p.w(ids.v.w), &dv, Some(dsrc), dw, db);
        }
        _ => {
            let (dw, db) = two(g, ids.k.w, ids.k.b);
            linear_backward(&lnc.out, rows, p.w(ids.k.w), &dk, Some(&mut dln), dw, db);
            let (dw, db) = two(g, ids.v.w, ids.v.b);
            linear_backward(&lnc.out, rows, p.w(ids.v.w), &dv, Some(&mut dln), dw, db);
        }
    }
    let (dg, db) = two(g, ln.g, ln.b);
    layer_norm_backward(lnc, p.w(ln.g), &dln, dh, dg, db);
}

#[derive(Debug, Clone)]
struct EncLayerFwd {
    ln_self: LnCache,
    attn: AttnFwd,
    ffn: FfnFwd,
}

/// Full-source causal encoding with activations kept for backprop. Because
/// the encoder is causal, one graph serves every wait-k path.
#[derive(Debug, Clone)]
pub struct EncoderGraph {
    tokens: Vec<TokenId>,
    layers: Vec<EncLayerFwd>,
    ln_final: LnCache,
}

impl EncoderGraph {
    pub fn forward(params: &Parameters, x: &[TokenId]) -> Result<Self> {
        let c = params.config();
        if x.is_empty() {
            return Err(Error::invalid("empty source"));
        }
        for &t in x {
            check_token(t, c.src_vocab_size)?;
        }
        let (d, rows) = (c.d_model, x.len());
        let mut h = vec![0.0; rows * d];
        for (i, &t) in x.iter().enumerate() {
            embed_row(
                params,
                params.layout.src_embed,
                t,
                i,
                &mut h[i * d..(i + 1) * d],
            );
        }
        let mut layers = Vec::with_capacity(c.n_enc_layers);
        for ids in &params.layout.enc {
            let (ln_self, attn) =
                self_attn_forward(params, ids.ln_self, ids.self_attn, &mut h, rows);
            let ffn = ffn_forward(params, ids.ln_ffn, ids.ffn, &mut h, rows);
            layers.push(EncLayerFwd { ln_self, attn, ffn });
        }
        let l = params.layout.enc_ln;
        let ln_final = layer_norm(&h, rows, params.w(l.g), params.w(l.b));
        Ok(EncoderGraph {
            tokens: x.to_vec(),
            layers,
            ln_final,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn memory(&self) -> &[f64] {
        &self.ln_final.out
    }

    /// Accumulates parameter gradients given d(loss)/d(memory).
    pub fn backward(&self, params: &Parameters, dmem: &[f64], g: &mut Gradients) {
        let c = params.config();
        let (d, rows) = (c.d_model, self.tokens.len());
        let mut dh = vec![0.0; rows * d];
        {
            let l = params.layout.enc_ln;
            let (dg, db) = two(g, l.g, l.b);
            layer_norm_backward(&self.ln_final, params.w(l.g), dmem, &mut dh, dg, db);
        }
        for (ids, f) in params.layout.enc.iter().zip(&self.layers).rev() {
            ffn_backward(params, ids.ln_ffn, ids.ffn, &f.ffn, &mut dh, rows, g);
            attn_backward(
                params,
                ids.ln_self,
                ids.self_attn,
                &f.ln_self,
                &f.attn,
                None,
                rows,
                &mut dh,
                None,
                g,
            );
        }
        let scale = (d as f64).sqrt();
        let emb = g.g(params.layout.src_embed);
        for (i, &t) in self.tokens.iter().enumerate() {
            axpy(
                scale,
                &dh[i * d..(i + 1) * d],
                &mut emb[t as usize * d..(t as usize + 1) * d],
            );
        }
    }
}

#[derive(Debug, Clone)]
struct DecLayerFwd {
    ln_self: LnCache,
    self_attn: AttnFwd,
    ln_cross: LnCache,
    cross: AttnFwd,
    ffn: FfnFwd,
}

/// Teacher-forced decoder pass along one read path.
#[derive(Debug, Clone)]
pub struct DecoderGraph {
    inputs: Vec<TokenId>,
    layers: Vec<DecLayerFwd>,
    ln_final: LnCache,
    logprobs: Vec<f64>,
    vocab: usize,
}

pub(crate) fn validate_path(path: &[usize], tgt_len: usize, src_len: usize) -> Result<()> {
    if path.len() != tgt_len {
        return Err(Error::MalformedPath(format!(
            "path has {} steps for {tgt_len} targets",
            path.len()
        )));
    }
    if path.iter().any(|&z| z == 0 || z > src_len) {
        return Err(Error::MalformedPath(format!(
            "path values must lie in [1, {src_len}]"
        )));
    }
    if path.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::MalformedPath("path is decreasing".into()));
    }
    Ok(())
}

impl DecoderGraph {
    /// `y` is the gold target (ending in EOS); the decoder input is
    /// `BOS, y_1 .. y_{T-1}` and step `t` sees `path[t]` source positions.
    pub fn forward(
        params: &Parameters,
        enc: &EncoderGraph,
        y: &[TokenId],
        path: &[usize],
    ) -> Result<Self> {
        let c = params.config();
        if y.is_empty() {
            return Err(Error::invalid("empty target"));
        }
        validate_path(path, y.len(), enc.len())?;
        for &t in y {
            check_token(t, c.tgt_vocab_size)?;
        }
        let (d, rows, src_rows) = (c.d_model, y.len(), enc.len());
        let inputs: Vec<TokenId> = std::iter::once(BOS)
            .chain(y[..rows - 1].iter().copied())
            .collect();
        let mut h = vec![0.0; rows * d];
        for (i, &t) in inputs.iter().enumerate() {
            embed_row(
                params,
                params.layout.tgt_embed,
                t,
                i,
                &mut h[i * d..(i + 1) * d],
            );
        }
        let mem = enc.memory();
        let mut layers = Vec::with_capacity(c.n_dec_layers);
        for ids in &params.layout.dec {
            let (ln_self, self_attn) =
                self_attn_forward(params, ids.ln_self, ids.self_attn, &mut h, rows);

            let ca = ids.cross_attn;
            let ln_cross = layer_norm(&h, rows, params.w(ids.ln_cross.g), params.w(ids.ln_cross.b));
            let q = linear(&ln_cross.out, rows, params.w(ca.q.w), params.w(ca.q.b));
            let k = linear(mem, src_rows, params.w(ca.k.w), params.w(ca.k.b));
            let v = linear(mem, src_rows, params.w(ca.v.w), params.w(ca.v.b));
            let key_lens = path.to_vec();
            let cache = attention(&q, &k, &v, &key_lens, c.n_heads, d);
            let o = linear(&cache.ctx, rows, params.w(ca.o.w), params.w(ca.o.b));
            for (x, y) in h.iter_mut().zip(&o) {
                *x += y;
            }
            let cross = AttnFwd {
                q,
                k,
                v,
                cache,
                key_lens,
            };

            let ffn = ffn_forward(params, ids.ln_ffn, ids.ffn, &mut h, rows);
            layers.push(DecLayerFwd {
                ln_self,
                self_attn,
                ln_cross,
                cross,
                ffn,
            });
        }
        let l = params.layout.dec_ln;
        let ln_final = layer_norm(&h, rows, params.w(l.g), params.w(l.b));
        let vsz = c.tgt_vocab_size;
        let emb = params.w(params.layout.out_proj);
        let bias = params.w(params.layout.out_bias);
        let mut logprobs = vec![0.0; rows * vsz];
        for t in 0..rows {
            let o = &ln_final.out[t * d..(t + 1) * d];
            let row = &mut logprobs[t * vsz..(t + 1) * vsz];
            for v in 0..vsz {
                row[v] = dot(o, &emb[v * d..(v + 1) * d]) + bias[v];
            }
            log_softmax(row);
        }
        Ok(DecoderGraph {
            inputs,
            layers,
            ln_final,
            logprobs,
            vocab: vsz,
        })
    }

    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Log-distribution at step `t` (0-based).
    pub fn logprobs(&self, t: usize) -> &[f64] {
        &self.logprobs[t * self.vocab..(t + 1) * self.vocab]
    }

    pub fn gold_logprobs(&self, y: &[TokenId]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(t, &g)| self.logprobs(t)[g as usize])
            .collect()
    }

    /// Accumulates parameter gradients given d(loss)/d(logits), `steps × V`,
    /// and adds d(loss)/d(memory) into `dmem`.
    pub fn backward(
        &self,
        params: &Parameters,
        enc: &EncoderGraph,
        dlogits: &[f64],
        g: &mut Gradients,
        dmem: &mut [f64],
    ) {
        let c = params.config();
        let (d, rows, vsz) = (c.d_model, self.inputs.len(), self.vocab);
        let lay = &params.layout;
        let mut dout = vec![0.0; rows * d];
        {
            let emb = params.w(lay.out_proj);
            for t in 0..rows {
                let dl = &dlogits[t * vsz..(t + 1) * vsz];
                let o = &self.ln_final.out[t * d..(t + 1) * d];
                for v in 0..vsz {
                    if dl[v] != 0.0 {
                        axpy(
                            dl[v],
                            &emb[v * d..(v + 1) * d],
                            &mut dout[t * d..(t + 1) * d],
                        );
                    }
                }
                let gemb = g.g(lay.out_proj);
                for v in 0..vsz {
                    if dl[v] != 0.0 {
                        axpy(dl[v], o, &mut gemb[v * d..(v + 1) * d]);
                    }
                }
                let gb = g.g(lay.out_bias);
                for v in 0..vsz {
                    gb[v] += dl[v];
                }
            }
        }
        let mut dh = vec![0.0; rows * d];
        {
            let (dg, db) = two(g, lay.dec_ln.g, lay.dec_ln.b);
            layer_norm_backward(
                &self.ln_final,
                params.w(lay.dec_ln.g),
                &dout,
                &mut dh,
                dg,
                db,
            );
        }
        let mem = enc.memory();
        for (ids, f) in lay.dec.iter().zip(&self.layers).rev() {
            ffn_backward(params, ids.ln_ffn, ids.ffn, &f.ffn, &mut dh, rows, g);
            attn_backward(
                params,
                ids.ln_cross,
                ids.cross_attn,
                &f.ln_cross,
                &f.cross,
                Some(mem),
                enc.len(),
                &mut dh,
                Some(dmem),
                g,
            );
            attn_backward(
                params,
                ids.ln_self,
                ids.self_attn,
                &f.ln_self,
                &f.self_attn,
                None,
                rows,
                &mut dh,
                None,
                g,
            );
        }
        let scale = (d as f64).sqrt();
        let emb = g.g(lay.tgt_embed);
        for (i, &t) in self.inputs.iter().enumerate() {
            axpy(
                scale,
                &dh[i * d..(i + 1) * d],
                &mut emb[t as usize * d..(t as usize + 1) * d],
            );
        }
    }
}

/// Gold-token log-probabilities of `y` given `x` when step `t` reads
/// `path[t]` source tokens: the addends of the path log-likelihood.
pub fn forward_teacher_forced(
    params: &Parameters,
    x: &[TokenId],
    y: &[TokenId],
    path: &[usize],
) -> Result<Vec<f64>> {
    let enc = EncoderGraph::forward(params, x)?;
    let dec = DecoderGraph::forward(params, &enc, y, path)?;
    Ok(dec.gold_logprobs(y))
}
