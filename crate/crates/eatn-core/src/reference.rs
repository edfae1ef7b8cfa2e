//! Straight-line reference forwards, written with plain `f64` loops and no
//! tape machinery, for differential testing against the autodiff model.
//!
//! Two independent implementations live here:
//! - the *vanilla* transformer (no attention convolution, no logit residual
//!   chain) — the baseline that an all-zero `(alpha, beta)` EA model must
//!   reproduce, and
//! - the *evolving-attention* forward with the full Eq. 4 semantics.

use crate::attention::PosMode;
use crate::blocks::{AttentionParams, BlockParams, DecoderBlockParams, FfnParams, LayerNormParams};
use crate::error::{Error, Result};
use crate::evolve::{ConvMode, EaConfig};
use crate::model::{Model, ModelParams};
use crate::tensor::{BoolMat, Tensor};

// ---- textbook pieces ----

fn matmul(a: &[f64], b: &[f64], n: usize, m: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..n {
        for t in 0..m {
            let av = a[i * m + t];
            for j in 0..p {
                out[i * p + j] += av * b[t * p + j];
            }
        }
    }
    out
}

fn add_bias(x: &mut [f64], b: &[f64], n: usize, c: usize) {
    for i in 0..n {
        for k in 0..c {
            x[i * c + k] += b[k];
        }
    }
}

fn layer_norm(x: &[f64], p: &LayerNormParams<f64>, n: usize, c: usize) -> Vec<f64> {
    let gamma = p.gamma.data();
    let offset = p.offset.data();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let row = &x[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for k in 0..c {
            out[i * c + k] = (row[k] - mean) * inv * gamma[k] + offset[k];
        }
    }
    out
}

fn residual_norm(x: &[f64], sub: &[f64], p: &LayerNormParams<f64>, n: usize, c: usize) -> Vec<f64> {
    let summed: Vec<f64> = x.iter().zip(sub).map(|(a, b)| a + b).collect();
    layer_norm(&summed, p, n, c)
}

fn ffn(x: &[f64], p: &FfnParams<f64>, n: usize, c: usize, c_ff: usize) -> Vec<f64> {
    let mut h = matmul(x, p.w1.data(), n, c, c_ff);
    add_bias(&mut h, p.b1.data(), n, c_ff);
    for v in h.iter_mut() {
        *v = v.max(0.0);
    }
    let mut y = matmul(&h, p.w2.data(), n, c_ff, c);
    add_bias(&mut y, p.b2.data(), n, c);
    y
}

fn clip_offset(off: isize, r_max: usize) -> usize {
    let r = r_max as isize;
    (off.clamp(-r, r) + r) as usize
}

/// Raw attention logits `[n_q, n_k, K]` including the configured relative
/// bias (no masking applied here).
#[allow(clippy::too_many_arguments)]
fn raw_logits(
    x_q: &[f64],
    n_q: usize,
    x_kv: &[f64],
    n_k: usize,
    p: &AttentionParams<f64>,
    c: usize,
    grid: Option<(usize, usize)>,
) -> Vec<f64> {
    let heads = p.heads;
    let d = c / heads;
    let q = matmul(x_q, p.w_q.data(), n_q, c, c);
    let k = matmul(x_kv, p.w_k.data(), n_k, c, c);
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut logits = vec![0.0; n_q * n_k * heads];
    for i in 0..n_q {
        for j in 0..n_k {
            for h in 0..heads {
                let mut acc = 0.0;
                for t in 0..d {
                    acc += q[i * c + h * d + t] * k[j * c + h * d + t];
                }
                logits[(i * n_k + j) * heads + h] = acc * inv_sqrt_d;
            }
        }
    }
    match p.pos.mode {
        PosMode::None | PosMode::Absolute => {}
        PosMode::Relative1d => {
            let e = p.pos.e_rel.as_ref().expect("relative_1d table").data();
            let r_max = p.pos.r_max;
            for i in 0..n_q {
                for j in 0..n_k {
                    let row = clip_offset(i as isize - j as isize, r_max);
                    for h in 0..heads {
                        let mut acc = 0.0;
                        for t in 0..d {
                            acc += q[i * c + h * d + t] * e[row * d + t];
                        }
                        logits[(i * n_k + j) * heads + h] += acc;
                    }
                }
            }
        }
        PosMode::Relative2d => {
            let (gh, gw) = grid.expect("relative_2d grid");
            assert_eq!(gh * gw, n_q);
            let eh = p.pos.e_h.as_ref().expect("e_h").data();
            let ew = p.pos.e_w.as_ref().expect("e_w").data();
            let r_max = p.pos.r_max;
            for i in 0..n_q {
                let (ri, ci) = ((i / gw) as isize, (i % gw) as isize);
                for j in 0..n_k {
                    let (rj, cj) = ((j / gw) as isize, (j % gw) as isize);
                    let hr = clip_offset(rj - ri, r_max);
                    let wr = clip_offset(cj - ci, r_max);
                    for h in 0..heads {
                        let mut acc = 0.0;
                        for t in 0..d {
                            acc += q[i * c + h * d + t] * (eh[hr * d + t] + ew[wr * d + t]);
                        }
                        logits[(i * n_k + j) * heads + h] += acc;
                    }
                }
            }
        }
    }
    logits
}

fn softmax_masked(logits: &[f64], mask: &BoolMat, n_q: usize, n_k: usize, heads: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_q * n_k * heads];
    for i in 0..n_q {
        for h in 0..heads {
            let mut m = f64::NEG_INFINITY;
            for j in 0..n_k {
                if !mask.get(i, j) {
                    m = m.max(logits[(i * n_k + j) * heads + h]);
                }
            }
            let mut z = 0.0;
            for j in 0..n_k {
                if !mask.get(i, j) {
                    let e = (logits[(i * n_k + j) * heads + h] - m).exp();
                    out[(i * n_k + j) * heads + h] = e;
                    z += e;
                }
            }
            for j in 0..n_k {
                if !mask.get(i, j) {
                    out[(i * n_k + j) * heads + h] /= z;
                }
            }
        }
    }
    out
}

fn apply_attention(
    probs: &[f64],
    x_kv: &[f64],
    n_q: usize,
    n_k: usize,
    p: &AttentionParams<f64>,
    c: usize,
) -> Vec<f64> {
    let heads = p.heads;
    let d = c / heads;
    let v = matmul(x_kv, p.w_v.data(), n_k, c, c);
    let mut ctx = vec![0.0; n_q * c];
    for i in 0..n_q {
        for j in 0..n_k {
            for h in 0..heads {
                let a = probs[(i * n_k + j) * heads + h];
                for t in 0..d {
                    ctx[i * c + h * d + t] += a * v[j * c + h * d + t];
                }
            }
        }
    }
    matmul(&ctx, p.w_o.data(), n_q, c, c)
}

fn causal_mask(n: usize) -> BoolMat {
    BoolMat::from_fn(n, n, |i, j| j > i)
}

fn open_mask(n_q: usize, n_k: usize) -> BoolMat {
    BoolMat::filled(n_q, n_k, false)
}

fn sinusoid(n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for pos in 0..n {
        for j in 0..c {
            let pair = (j / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / c as f64);
            out[pos * c + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

fn embed(table: &Tensor<f64>, ids: &[usize], c: usize, absolute: bool) -> Vec<f64> {
    let scale = (c as f64).sqrt();
    let mut x = vec![0.0; ids.len() * c];
    for (i, &id) in ids.iter().enumerate() {
        for k in 0..c {
            x[i * c + k] = table.data()[id * c + k] * scale;
        }
    }
    if absolute {
        let pe = sinusoid(ids.len(), c);
        for (xv, pv) in x.iter_mut().zip(&pe) {
            *xv += pv;
        }
    }
    x
}

fn mean_pool_head(
    h: &[f64],
    n: usize,
    c: usize,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    n_out: usize,
) -> Vec<f64> {
    let mut pooled = vec![0.0; c];
    for i in 0..n {
        for k in 0..c {
            pooled[k] += h[i * c + k];
        }
    }
    for v in pooled.iter_mut() {
        *v /= n as f64;
    }
    let mut logits = matmul(&pooled, w.data(), 1, c, n_out);
    add_bias(&mut logits, b.data(), 1, n_out);
    logits
}

// ---- vanilla transformer ----

#[allow(clippy::too_many_arguments)] // oracle signatures stay flat scalars on purpose
fn vanilla_attention(
    x_q: &[f64],
    n_q: usize,
    x_kv: &[f64],
    n_k: usize,
    p: &AttentionParams<f64>,
    c: usize,
    mask: &BoolMat,
    grid: Option<(usize, usize)>,
) -> Vec<f64> {
    let logits = raw_logits(x_q, n_q, x_kv, n_k, p, c, grid);
    let probs = softmax_masked(&logits, mask, n_q, n_k, p.heads);
    apply_attention(&probs, x_kv, n_q, n_k, p, c)
}

fn vanilla_block(
    x: &[f64],
    n: usize,
    b: &BlockParams<f64>,
    c: usize,
    c_ff: usize,
    mask: &BoolMat,
    grid: Option<(usize, usize)>,
) -> Vec<f64> {
    let attn = vanilla_attention(x, n, x, n, &b.attn, c, mask, grid);
    let h = residual_norm(x, &attn, &b.norm1, n, c);
    let f = ffn(&h, &b.ffn, n, c, c_ff);
    residual_norm(&h, &f, &b.norm2, n, c)
}

fn vanilla_decoder_block(
    x: &[f64],
    t_len: usize,
    enc: &[f64],
    s_len: usize,
    b: &DecoderBlockParams<f64>,
    c: usize,
    c_ff: usize,
) -> Vec<f64> {
    let causal = causal_mask(t_len);
    let self_attn = vanilla_attention(x, t_len, x, t_len, &b.self_attn, c, &causal, None);
    let h1 = residual_norm(x, &self_attn, &b.norm1, t_len, c);
    let cross_mask = open_mask(t_len, s_len);
    let cross = vanilla_attention(&h1, t_len, enc, s_len, &b.cross_attn, c, &cross_mask, None);
    let h2 = residual_norm(&h1, &cross, &b.norm2, t_len, c);
    let f = ffn(&h2, &b.ffn, t_len, c, c_ff);
    residual_norm(&h2, &f, &b.norm3, t_len, c)
}

/// Vanilla encoder-classifier forward; ignores all EA configuration.
pub fn vanilla_classifier_logits(m: &Model<f64>, tokens: &[usize]) -> Result<Vec<f64>> {
    let ModelParams::EncoderClassifier { embed: table, encoder, head } = &m.params else {
        return Err(Error::Contract("not an encoder classifier".into()));
    };
    let c = m.spec.c_model;
    let n = tokens.len();
    let mut h = embed(table, tokens, c, m.spec.pos_mode == PosMode::Absolute);
    let mask = open_mask(n, n);
    for b in encoder {
        h = vanilla_block(&h, n, b, c, m.spec.c_ff, &mask, None);
    }
    Ok(mean_pool_head(&h, n, c, &head.w, &head.b, m.spec.n_classes))
}

/// Vanilla teacher-forced seq2seq forward.
pub fn vanilla_seq2seq_logits(m: &Model<f64>, src: &[usize], gold: &[usize]) -> Result<Vec<f64>> {
    let ModelParams::Seq2Seq { src_embed, tgt_embed, encoder, decoder, out } = &m.params else {
        return Err(Error::Contract("not a seq2seq model".into()));
    };
    let c = m.spec.c_model;
    let absolute = m.spec.pos_mode == PosMode::Absolute;
    let s_len = src.len();
    let mut enc = embed(src_embed, src, c, absolute);
    let src_mask = open_mask(s_len, s_len);
    for b in encoder {
        enc = vanilla_block(&enc, s_len, b, c, m.spec.c_ff, &src_mask, None);
    }
    let mut dec_ids = vec![m.spec.bos_id()];
    dec_ids.extend_from_slice(&gold[..gold.len() - 1]);
    let t_len = dec_ids.len();
    let mut h = embed(tgt_embed, &dec_ids, c, absolute);
    for b in decoder {
        h = vanilla_decoder_block(&h, t_len, &enc, s_len, b, c, m.spec.c_ff);
    }
    let mut logits = matmul(&h, out.w.data(), t_len, c, m.spec.tgt_vocab);
    add_bias(&mut logits, out.b.data(), t_len, m.spec.tgt_vocab);
    Ok(logits)
}

/// Vanilla image-classifier forward.
pub fn vanilla_image_logits(m: &Model<f64>, pixels: &Tensor<f64>) -> Result<Vec<f64>> {
    let ModelParams::ImageClassifier { in_proj, encoder, head } = &m.params else {
        return Err(Error::Contract("not an image classifier".into()));
    };
    let img = m.spec.image.expect("validated");
    let c = m.spec.c_model;
    let n = img.tokens();
    let mut h = matmul(pixels.data(), in_proj.w.data(), n, img.channels, c);
    add_bias(&mut h, in_proj.b.data(), n, c);
    let mask = open_mask(n, n);
    for b in encoder {
        h = vanilla_block(&h, n, b, c, m.spec.c_ff, &mask, Some((img.height, img.width)));
    }
    Ok(mean_pool_head(&h, n, c, &head.w, &head.b, m.spec.n_classes))
}

// ---- evolving attention ----

/// Zeroes masked positions of a `[n_q, n_k, heads]` logit buffer in place.
pub fn zero_masked(x: &mut [f64], mask: &BoolMat, n_q: usize, n_k: usize, heads: usize) {
    for i in 0..n_q {
        for j in 0..n_k {
            if mask.get(i, j) {
                for h in 0..heads {
                    x[(i * n_k + j) * heads + h] = 0.0;
                }
            }
        }
    }
}

/// Whether the kernel tap at offset `(di, dj)` participates for `mode`.
pub fn tap_active(mode: ConvMode, ksize: usize, di: isize, dj: isize) -> bool {
    match mode {
        ConvMode::Encoder | ConvMode::EncoderDecoder => true,
        ConvMode::DecoderSelf => match ksize {
            1 => true,
            3 => !matches!((di, dj), (-1, 0) | (-1, 1) | (0, 1)),
            _ => !(dj > 0 || (di < 0 && dj >= 0)),
        },
    }
}

/// The per-mode convolution strategy (tap-masked conv, ReLU, shift) on a
/// `[n_q, n_k, heads]` attention image; straight-line loops, no tape.
#[allow(clippy::too_many_arguments)] // oracle signatures stay flat scalars on purpose
pub fn conv_strategy(
    a: &[f64],
    n_q: usize,
    n_k: usize,
    heads: usize,
    kernel: &[f64],
    bias: &[f64],
    ksize: usize,
    mode: ConvMode,
) -> Vec<f64> {
    let half = (ksize / 2) as isize;
    let mut conv = vec![0.0; n_q * n_k * heads];
    for y in 0..n_q {
        for x in 0..n_k {
            for co in 0..heads {
                let mut acc = bias[co];
                for ti in 0..ksize {
                    for tj in 0..ksize {
                        let (di, dj) = (ti as isize - half, tj as isize - half);
                        if !tap_active(mode, ksize, di, dj) {
                            continue;
                        }
                        let (sy, sx) = (y as isize + di, x as isize + dj);
                        if sy < 0 || sy >= n_q as isize || sx < 0 || sx >= n_k as isize {
                            continue;
                        }
                        for ci in 0..heads {
                            acc += a[((sy as usize) * n_k + sx as usize) * heads + ci]
                                * kernel[((ti * ksize + tj) * heads + ci) * heads + co];
                        }
                    }
                }
                conv[(y * n_k + x) * heads + co] = acc.max(0.0);
            }
        }
    }
    let (dy, dx) = match mode {
        ConvMode::Encoder => (0, 0),
        ConvMode::DecoderSelf => (ksize / 2, ksize / 2),
        ConvMode::EncoderDecoder => (0, ksize / 2),
    };
    if (dy, dx) == (0, 0) {
        return conv;
    }
    let mut shifted = vec![0.0; n_q * n_k * heads];
    for y in dy..n_q {
        for x in dx..n_k {
            for h in 0..heads {
                shifted[(y * n_k + x) * heads + h] = conv[((y - dy) * n_k + (x - dx)) * heads + h];
            }
        }
    }
    shifted
}

/// One EA attention instance. `prev` is the previous block's threaded
/// (masked, post-convolution) logits. Returns the sublayer output and the
/// logits to thread forward.
#[allow(clippy::too_many_arguments)]
fn ea_attention(
    x_q: &[f64],
    n_q: usize,
    x_kv: &[f64],
    n_k: usize,
    p: &AttentionParams<f64>,
    c: usize,
    mask: &BoolMat,
    grid: Option<(usize, usize)>,
    cfg: &EaConfig,
    prev: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let heads = p.heads;
    let mut cur = raw_logits(x_q, n_q, x_kv, n_k, p, c, grid);
    zero_masked(&mut cur, mask, n_q, n_k, heads);
    let alpha = match prev {
        Some(_) => cfg.effective_alpha(),
        None => 0.0,
    };
    let mut a_input = match prev {
        Some(pl) if alpha > 0.0 => {
            cur.iter().zip(pl).map(|(cv, pv)| alpha * pv + (1.0 - alpha) * cv).collect()
        }
        _ => cur,
    };
    zero_masked(&mut a_input, mask, n_q, n_k, heads);
    let beta = cfg.effective_beta();
    let state = if beta > 0.0 {
        let conv = p.conv.as_ref().expect("conv params when beta > 0");
        let refined = conv_strategy(
            &a_input,
            n_q,
            n_k,
            heads,
            conv.kernel.data(),
            conv.bias.data(),
            cfg.kernel_size,
            cfg.mode,
        );
        let mut z: Vec<f64> =
            refined.iter().zip(&a_input).map(|(r, p)| beta * r + (1.0 - beta) * p).collect();
        zero_masked(&mut z, mask, n_q, n_k, heads);
        z
    } else {
        a_input
    };
    let probs = softmax_masked(&state, mask, n_q, n_k, heads);
    let out = apply_attention(&probs, x_kv, n_q, n_k, p, c);
    (out, state)
}

#[allow(clippy::too_many_arguments)]
fn ea_block(
    x: &[f64],
    n: usize,
    b: &BlockParams<f64>,
    c: usize,
    c_ff: usize,
    cfg: &EaConfig,
    mask: &BoolMat,
    grid: Option<(usize, usize)>,
    prev: Option<&[f64]>,
) -> (Vec<f64>, Vec<f64>) {
    let (attn, state) = ea_attention(x, n, x, n, &b.attn, c, mask, grid, cfg, prev);
    let h = residual_norm(x, &attn, &b.norm1, n, c);
    let f = ffn(&h, &b.ffn, n, c, c_ff);
    (residual_norm(&h, &f, &b.norm2, n, c), state)
}

#[allow(clippy::too_many_arguments)] // oracle signatures stay flat scalars on purpose
fn ea_encoder_stack(
    x: Vec<f64>,
    n: usize,
    blocks: &[BlockParams<f64>],
    c: usize,
    c_ff: usize,
    cfg: &EaConfig,
    mask: &BoolMat,
    grid: Option<(usize, usize)>,
) -> Vec<f64> {
    let mut h = x;
    let mut state: Option<Vec<f64>> = None;
    for b in blocks {
        let (y, s) = ea_block(&h, n, b, c, c_ff, cfg, mask, grid, state.as_deref());
        h = y;
        state = Some(s);
    }
    h
}

/// Full evolving-attention encoder-classifier forward.
pub fn ea_classifier_logits(m: &Model<f64>, tokens: &[usize]) -> Result<Vec<f64>> {
    let ModelParams::EncoderClassifier { embed: table, encoder, head } = &m.params else {
        return Err(Error::Contract("not an encoder classifier".into()));
    };
    let c = m.spec.c_model;
    let n = tokens.len();
    let x = embed(table, tokens, c, m.spec.pos_mode == PosMode::Absolute);
    let mask = open_mask(n, n);
    let h = ea_encoder_stack(x, n, encoder, c, m.spec.c_ff, &m.spec.ea_encoder, &mask, None);
    Ok(mean_pool_head(&h, n, c, &head.w, &head.b, m.spec.n_classes))
}

/// Full evolving-attention teacher-forced seq2seq forward.
pub fn ea_seq2seq_logits(m: &Model<f64>, src: &[usize], gold: &[usize]) -> Result<Vec<f64>> {
    let ModelParams::Seq2Seq { src_embed, tgt_embed, encoder, decoder, out } = &m.params else {
        return Err(Error::Contract("not a seq2seq model".into()));
    };
    let c = m.spec.c_model;
    let c_ff = m.spec.c_ff;
    let absolute = m.spec.pos_mode == PosMode::Absolute;
    let s_len = src.len();
    let xs = embed(src_embed, src, c, absolute);
    let src_mask = open_mask(s_len, s_len);
    let enc = ea_encoder_stack(xs, s_len, encoder, c, c_ff, &m.spec.ea_encoder, &src_mask, None);

    let mut dec_ids = vec![m.spec.bos_id()];
    dec_ids.extend_from_slice(&gold[..gold.len() - 1]);
    let t_len = dec_ids.len();
    let mut h = embed(tgt_embed, &dec_ids, c, absolute);
    let causal = causal_mask(t_len);
    let cross_mask = open_mask(t_len, s_len);
    let mut self_state: Option<Vec<f64>> = None;
    let mut cross_state: Option<Vec<f64>> = None;
    for b in decoder {
        let (self_out, s_state) = ea_attention(
            &h,
            t_len,
            &h,
            t_len,
            &b.self_attn,
            c,
            &causal,
            None,
            &m.spec.ea_decoder_self,
            self_state.as_deref(),
        );
        let h1 = residual_norm(&h, &self_out, &b.norm1, t_len, c);
        let (cross_out, c_state) = ea_attention(
            &h1,
            t_len,
            &enc,
            s_len,
            &b.cross_attn,
            c,
            &cross_mask,
            None,
            &m.spec.ea_encoder_decoder,
            cross_state.as_deref(),
        );
        let h2 = residual_norm(&h1, &cross_out, &b.norm2, t_len, c);
        let f = ffn(&h2, &b.ffn, t_len, c, c_ff);
        h = residual_norm(&h2, &f, &b.norm3, t_len, c);
        self_state = Some(s_state);
        cross_state = Some(c_state);
    }
    let mut logits = matmul(&h, out.w.data(), t_len, c, m.spec.tgt_vocab);
    add_bias(&mut logits, out.b.data(), t_len, m.spec.tgt_vocab);
    Ok(logits)
}

/// Full evolving-attention image-classifier forward.
pub fn ea_image_logits(m: &Model<f64>, pixels: &Tensor<f64>) -> Result<Vec<f64>> {
    let ModelParams::ImageClassifier { in_proj, encoder, head } = &m.params else {
        return Err(Error::Contract("not an image classifier".into()));
    };
    let img = m.spec.image.expect("validated");
    let c = m.spec.c_model;
    let n = img.tokens();
    let mut x = matmul(pixels.data(), in_proj.w.data(), n, img.channels, c);
    add_bias(&mut x, in_proj.b.data(), n, c);
    let mask = open_mask(n, n);
    let h = ea_encoder_stack(
        x,
        n,
        encoder,
        c,
        m.spec.c_ff,
        &m.spec.ea_encoder,
        &mask,
        Some((img.height, img.width)),
    );
    Ok(mean_pool_head(&h, n, c, &head.w, &head.b, m.spec.n_classes))
}
