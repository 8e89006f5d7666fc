use super::ops::{
    add_position, attend_row, dot, layer_norm_row, linear_row, log_softmax, relu_inplace,
};
use super::params::{AttnIds, FfnIds, LnIds, Parameters};
use crate::{Error, Result, TokenId};

/// Embedding row scaled by `sqrt(d)` plus the position encoding.
pub(crate) fn embed_row(p: &Parameters, slot: usize, tok: TokenId, pos: usize, out: &mut [f64]) {
    let d = out.len();
    let scale = (d as f64).sqrt();
    let e = &p.w(slot)[tok as usize * d..(tok as usize + 1) * d];
    for (o, v) in out.iter_mut().zip(e) {
        *o = v * scale;
    }
    add_position(pos, out);
}

pub(crate) fn check_token(tok: TokenId, vocab: usize) -> Result<()> {
    if tok as usize >= vocab {
        return Err(Error::TokenOutOfRange {
            id: tok,
            size: vocab,
        });
    }
    Ok(())
}

struct RowScratch {
    xhat: Vec<f64>,
    a: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    ctx: Vec<f64>,
    o: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl RowScratch {
    fn new(d: usize, f: usize) -> Self {
        RowScratch {
            xhat: vec![0.0; d],
            a: vec![0.0; d],
            q: vec![0.0; d],
            k: vec![0.0; d],
            v: vec![0.0; d],
            ctx: vec![0.0; d],
            o: vec![0.0; d],
            hidden: vec![0.0; f],
            probs: Vec::new(),
        }
    }

    fn ln(&mut self, p: &Parameters, ln: LnIds, h: &[f64]) {
        layer_norm_row(h, p.w(ln.g), p.w(ln.b), &mut self.xhat, &mut self.a);
    }

    /// Attends `self.q` over the first `n` cached keys, adds the projected
    /// context to `h`.
    fn attend_into(
        &mut self,
        p: &Parameters,
        ids: AttnIds,
        heads: usize,
        keys: &[f64],
        values: &[f64],
        n: usize,
        h: &mut [f64],
    ) {
        self.probs.resize(heads * n, 0.0);
        attend_row(
            &self.q,
            keys,
            values,
            n,
            heads,
            &mut self.ctx,
            &mut self.probs,
        );
        linear_row(&self.ctx, p.w(ids.o.w), p.w(ids.o.b), &mut self.o);
        for (x, y) in h.iter_mut().zip(&self.o) {
            *x += y;
        }
    }

    fn ffn_into(&mut self, p: &Parameters, ln: LnIds, ffn: FfnIds, h: &mut [f64]) {
        self.ln(p, ln, h);
        linear_row(&self.a, p.w(ffn.fc1.w), p.w(ffn.fc1.b), &mut self.hidden);
        relu_inplace(&mut self.hidden);
        linear_row(&self.hidden, p.w(ffn.fc2.w), p.w(ffn.fc2.b), &mut self.o);
        for (x, y) in h.iter_mut().zip(&self.o) {
            *x += y;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncLayerState {
    keys: Vec<f64>,
    values: Vec<f64>,
    outputs: Vec<f64>,
}

/// Cached causal encoding of the source prefix read so far.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    d: usize,
    tokens: Vec<TokenId>,
    layers: Vec<EncLayerState>,
    memory: Vec<f64>,
}

impl EncoderState {
    pub fn empty(params: &Parameters) -> Self {
        let c = params.config();
        EncoderState {
            d: c.d_model,
            tokens: Vec::new(),
            layers: (0..c.n_enc_layers)
                .map(|_| EncLayerState {
                    keys: Vec::new(),
                    values: Vec::new(),
                    outputs: Vec::new(),
                })
                .collect(),
            memory: Vec::new(),
        }
    }

    /// Number of source positions encoded.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Final (post layer-norm) encodings, `len × d`.
    pub fn memory(&self) -> &[f64] {
        &self.memory
    }

    /// Output of encoder layer `layer` at every position, `len × d`.
    pub fn layer_outputs(&self, layer: usize) -> &[f64] {
        &self.layers[layer].outputs
    }

    /// Encodes `new_tokens` on top of the cached prefix.
    pub fn extend(&mut self, params: &Parameters, new_tokens: &[TokenId]) -> Result<()> {
        let c = params.config();
        if new_tokens.is_empty() {
            return Err(Error::invalid("encode_prefix needs at least one new token"));
        }
        for &t in new_tokens {
            check_token(t, c.src_vocab_size)?;
        }
        let d = self.d;
        let lay = &params.layout;
        let mut s = RowScratch::new(d, c.d_ffn);
        let mut h = vec![0.0; d];
        for &tok in new_tokens {
            let pos = self.tokens.len();
            embed_row(params, lay.src_embed, tok, pos, &mut h);
            for (ids, st) in lay.enc.iter().zip(self.layers.iter_mut()) {
                s.ln(params, ids.ln_self, &h);
                let at = ids.self_attn;
                linear_row(&s.a, params.w(at.q.w), params.w(at.q.b), &mut s.q);
                linear_row(&s.a, params.w(at.k.w), params.w(at.k.b), &mut s.k);
                linear_row(&s.a, params.w(at.v.w), params.w(at.v.b), &mut s.v);
                st.keys.extend_from_slice(&s.k);
                st.values.extend_from_slice(&s.v);
                s.attend_into(params, at, c.n_heads, &st.keys, &st.values, pos + 1, &mut h);
                s.ffn_into(params, ids.ln_ffn, ids.ffn, &mut h);
                st.outputs.extend_from_slice(&h);
            }
            s.ln(params, lay.enc_ln, &h);
            self.memory.extend_from_slice(&s.a);
            self.tokens.push(tok);
        }
        Ok(())
    }
}

/// Encodes `new_tokens` after the prefix held in `state` (or from scratch).
/// Cached positions are reused untouched.
pub fn encode_prefix(
    params: &Parameters,
    new_tokens: &[TokenId],
    state: Option<EncoderState>,
) -> Result<EncoderState> {
    let mut st = state.unwrap_or_else(|| EncoderState::empty(params));
    st.extend(params, new_tokens)?;
    Ok(st)
}

#[derive(Debug, Clone, PartialEq)]
struct DecLayerState {
    keys: Vec<f64>,
    values: Vec<f64>,
    cross_keys: Vec<f64>,
    cross_values: Vec<f64>,
    cross_len: usize,
}

/// Cached target-side keys/values plus projected source keys/values.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    step: usize,
    layers: Vec<DecLayerState>,
}

impl DecoderState {
    pub fn new(params: &Parameters) -> Self {
        DecoderState {
            step: 0,
            layers: (0..params.config().n_dec_layers)
                .map(|_| DecLayerState {
                    keys: Vec::new(),
                    values: Vec::new(),
                    cross_keys: Vec::new(),
                    cross_values: Vec::new(),
                    cross_len: 0,
                })
                .collect(),
        }
    }

    /// Number of target tokens fed so far.
    pub fn step(&self) -> usize {
        self.step
    }
}

/// One decoder step: feeds `prev_token`, attends over the first `z_t`
/// source positions and returns the log-distribution of the next token.
pub fn decode_step(
    params: &Parameters,
    enc: &EncoderState,
    dec: &mut DecoderState,
    prev_token: TokenId,
    z_t: usize,
) -> Result<Vec<f64>> {
    let c = params.config();
    if z_t == 0 || z_t > enc.len() {
        return Err(Error::PrefixTooLong {
            requested: z_t,
            available: enc.len(),
        });
    }
    check_token(prev_token, c.tgt_vocab_size)?;
    let d = c.d_model;
    let lay = &params.layout;
    let mut s = RowScratch::new(d, c.d_ffn);
    let mut h = vec![0.0; d];
    let pos = dec.step;
    embed_row(params, lay.tgt_embed, prev_token, pos, &mut h);
    for (ids, st) in lay.dec.iter().zip(dec.layers.iter_mut()) {
        s.ln(params, ids.ln_self, &h);
        let at = ids.self_attn;
        linear_row(&s.a, params.w(at.q.w), params.w(at.q.b), &mut s.q);
        linear_row(&s.a, params.w(at.k.w), params.w(at.k.b), &mut s.k);
        linear_row(&s.a, params.w(at.v.w), params.w(at.v.b), &mut s.v);
        st.keys.extend_from_slice(&s.k);
        st.values.extend_from_slice(&s.v);
        s.attend_into(params, at, c.n_heads, &st.keys, &st.values, pos + 1, &mut h);

        let ca = ids.cross_attn;
        while st.cross_len < z_t {
            let j = st.cross_len;
            let m = &enc.memory()[j * d..(j + 1) * d];
            linear_row(m, params.w(ca.k.w), params.w(ca.k.b), &mut s.k);
            linear_row(m, params.w(ca.v.w), params.w(ca.v.b), &mut s.v);
            st.cross_keys.extend_from_slice(&s.k);
            st.cross_values.extend_from_slice(&s.v);
            st.cross_len += 1;
        }
        s.ln(params, ids.ln_cross, &h);
        linear_row(&s.a, params.w(ca.q.w), params.w(ca.q.b), &mut s.q);
        s.attend_into(
            params,
            ca,
            c.n_heads,
            &st.cross_keys,
            &st.cross_values,
            z_t,
            &mut h,
        );

        s.ffn_into(params, ids.ln_ffn, ids.ffn, &mut h);
    }
    s.ln(params, lay.dec_ln, &h);
    let emb = params.w(lay.out_proj);
    let bias = params.w(lay.out_bias);
    let mut logits: Vec<f64> = (0..c.tgt_vocab_size)
        .map(|v| dot(&s.a, &emb[v * d..(v + 1) * d]) + bias[v])
        .collect();
    log_softmax(&mut logits);
    dec.step += 1;
    Ok(logits)
}
