//! Transformer blocks: attention sublayer (generation + evolution + value
//! projection), position-wise feed-forward, residual adds, and post-norm
//! layer normalization.
//!
//! Parameter structs own plain tensors; `bind_*` functions register them on a
//! tape for one forward/backward pass and record `(name, Var)` pairs so the
//! optimizer and checkpoint code can address every parameter by name.

use crate::attention::{
    attention_logits, masked_row_softmax, AttentionState, PosMode, PositionalEncoding, PosVars,
};
use crate::error::{Error, Result};
use crate::evolve::{evolve_logits, AttentionConvParams, ConvVars, EaConfig};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{BoolMat, Tensor};

// ---- owned parameters ----

#[derive(Clone, Debug)]
pub struct LinearParams<S: Scalar = f64> {
    pub w: Tensor<S>,
    pub b: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<S: Scalar = f64> {
    pub gamma: Tensor<S>,
    pub offset: Tensor<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn identity(c: usize) -> Self {
        Self { gamma: Tensor::full(vec![c], S::one()), offset: Tensor::zeros(vec![c]) }
    }
}

/// One attention instance: Q/K/V/O projections, optional attention-image
/// convolution, and positional-encoding tables.
#[derive(Clone, Debug)]
pub struct AttentionParams<S: Scalar = f64> {
    pub heads: usize,
    /// `[C, d*K_heads]`; head `k` owns output columns `[k*d, (k+1)*d)`.
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    /// `[d*K_heads, C]`.
    pub w_o: Tensor<S>,
    pub conv: Option<AttentionConvParams<S>>,
    pub pos: PositionalEncoding<S>,
}

#[derive(Clone, Debug)]
pub struct FfnParams<S: Scalar = f64> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

/// Encoder block: attention + FFN, each wrapped in residual + post-norm.
#[derive(Clone, Debug)]
pub struct BlockParams<S: Scalar = f64> {
    pub attn: AttentionParams<S>,
    pub norm1: LayerNormParams<S>,
    pub ffn: FfnParams<S>,
    pub norm2: LayerNormParams<S>,
}

/// Decoder block: causal self-attention, encoder-decoder attention, FFN.
#[derive(Clone, Debug)]
pub struct DecoderBlockParams<S: Scalar = f64> {
    pub self_attn: AttentionParams<S>,
    pub norm1: LayerNormParams<S>,
    pub cross_attn: AttentionParams<S>,
    pub norm2: LayerNormParams<S>,
    pub ffn: FfnParams<S>,
    pub norm3: LayerNormParams<S>,
}

// ---- tape bindings ----

/// Collects `(name, Var)` pairs in binding order; this order is the canonical
/// parameter order for optimizers and checkpoints.
pub type NamedVars = Vec<(String, Var)>;

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLayerNorm {
    pub gamma: Var,
    pub offset: Var,
}

#[derive(Clone, Debug)]
pub struct BoundAttention {
    pub heads: usize,
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub conv: Option<ConvVars>,
    pub pos_mode: PosMode,
    pub r_max: usize,
    pub pos_vars: PosVars,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundFfn {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub attn: BoundAttention,
    pub norm1: BoundLayerNorm,
    pub ffn: BoundFfn,
    pub norm2: BoundLayerNorm,
}

#[derive(Clone, Debug)]
pub struct BoundDecoderBlock {
    pub self_attn: BoundAttention,
    pub norm1: BoundLayerNorm,
    pub cross_attn: BoundAttention,
    pub norm2: BoundLayerNorm,
    pub ffn: BoundFfn,
    pub norm3: BoundLayerNorm,
}

pub fn bind_linear<S: Scalar>(
    tape: &mut Tape<S>,
    p: &LinearParams<S>,
    prefix: &str,
    names: &mut NamedVars,
) -> BoundLinear {
    let w = tape.leaf(p.w.clone());
    names.push((format!("{prefix}.w"), w));
    let b = tape.leaf(p.b.clone());
    names.push((format!("{prefix}.b"), b));
    BoundLinear { w, b }
}

pub fn bind_layer_norm<S: Scalar>(
    tape: &mut Tape<S>,
    p: &LayerNormParams<S>,
    prefix: &str,
    names: &mut NamedVars,
) -> BoundLayerNorm {
    let gamma = tape.leaf(p.gamma.clone());
    names.push((format!("{prefix}.gamma"), gamma));
    let offset = tape.leaf(p.offset.clone());
    names.push((format!("{prefix}.offset"), offset));
    BoundLayerNorm { gamma, offset }
}

pub fn bind_attention<S: Scalar>(
    tape: &mut Tape<S>,
    p: &AttentionParams<S>,
    prefix: &str,
    names: &mut NamedVars,
) -> BoundAttention {
    let w_q = tape.leaf(p.w_q.clone());
    names.push((format!("{prefix}.w_q"), w_q));
    let w_k = tape.leaf(p.w_k.clone());
    names.push((format!("{prefix}.w_k"), w_k));
    let w_v = tape.leaf(p.w_v.clone());
    names.push((format!("{prefix}.w_v"), w_v));
    let w_o = tape.leaf(p.w_o.clone());
    names.push((format!("{prefix}.w_o"), w_o));
    let conv = p.conv.as_ref().map(|c| {
        let kernel = tape.leaf(c.kernel.clone());
        names.push((format!("{prefix}.conv.kernel"), kernel));
        let bias = tape.leaf(c.bias.clone());
        names.push((format!("{prefix}.conv.bias"), bias));
        ConvVars { kernel, bias }
    });
    let mut pos_vars = PosVars::default();
    if let Some(e) = &p.pos.e_rel {
        let v = tape.leaf(e.clone());
        names.push((format!("{prefix}.rel.e"), v));
        pos_vars.e_rel = Some(v);
    }
    if let Some(e) = &p.pos.e_h {
        let v = tape.leaf(e.clone());
        names.push((format!("{prefix}.rel.e_h"), v));
        pos_vars.e_h = Some(v);
    }
    if let Some(e) = &p.pos.e_w {
        let v = tape.leaf(e.clone());
        names.push((format!("{prefix}.rel.e_w"), v));
        pos_vars.e_w = Some(v);
    }
    BoundAttention {
        heads: p.heads,
        w_q,
        w_k,
        w_v,
        w_o,
        conv,
        pos_mode: p.pos.mode,
        r_max: p.pos.r_max,
        pos_vars,
    }
}

pub fn bind_ffn<S: Scalar>(
    tape: &mut Tape<S>,
    p: &FfnParams<S>,
    prefix: &str,
    names: &mut NamedVars,
) -> BoundFfn {
    let w1 = tape.leaf(p.w1.clone());
    names.push((format!("{prefix}.w1"), w1));
    let b1 = tape.leaf(p.b1.clone());
    names.push((format!("{prefix}.b1"), b1));
    let w2 = tape.leaf(p.w2.clone());
    names.push((format!("{prefix}.w2"), w2));
    let b2 = tape.leaf(p.b2.clone());
    names.push((format!("{prefix}.b2"), b2));
    BoundFfn { w1, b1, w2, b2 }
}

pub fn bind_block<S: Scalar>(
    tape: &mut Tape<S>,
    p: &BlockParams<S>,
    prefix: &str,
    names: &mut NamedVars,
) -> BoundBlock {
    BoundBlock {
        attn: bind_attention(tape, &p.attn, &format!("{prefix}.attn"), names),
        norm1: bind_layer_norm(tape, &p.norm1, &format!("{prefix}.norm1"), names),
        ffn: bind_ffn(tape, &p.ffn, &format!("{prefix}.ffn"), names),
        norm2: bind_layer_norm(tape, &p.norm2, &format!("{prefix}.norm2"), names),
    }
}

pub fn bind_decoder_block<S: Scalar>(
    tape: &mut Tape<S>,
    p: &DecoderBlockParams<S>,
    prefix: &str,
    names: &mut NamedVars,
) -> BoundDecoderBlock {
    BoundDecoderBlock {
        self_attn: bind_attention(tape, &p.self_attn, &format!("{prefix}.self_attn"), names),
        norm1: bind_layer_norm(tape, &p.norm1, &format!("{prefix}.norm1"), names),
        cross_attn: bind_attention(tape, &p.cross_attn, &format!("{prefix}.cross_attn"), names),
        norm2: bind_layer_norm(tape, &p.norm2, &format!("{prefix}.norm2"), names),
        ffn: bind_ffn(tape, &p.ffn, &format!("{prefix}.ffn"), names),
        norm3: bind_layer_norm(tape, &p.norm3, &format!("{prefix}.norm3"), names),
    }
}

// ---- forward pieces ----

/// Eq. 5–6 value path: per-head value slices weighted by the attention maps,
/// heads concatenated, then the output projection.
pub fn value_project<S: Scalar>(
    tape: &mut Tape<S>,
    probs: Var,
    x_kv: Var,
    w_v: Var,
    w_o: Var,
    heads: usize,
) -> Result<Var> {
    let v = tape.matmul(x_kv, w_v)?;
    let ctx = tape.attn_apply(probs, v, heads)?;
    tape.matmul(ctx, w_o)
}

/// Position-wise feed-forward: `ReLU(X W1 + b1) W2 + b2`.
pub fn ffn_forward<S: Scalar>(tape: &mut Tape<S>, x: Var, f: &BoundFfn) -> Result<Var> {
    let h = tape.matmul(x, f.w1)?;
    let h = tape.add(h, f.b1)?;
    let h = tape.relu(h);
    let y = tape.matmul(h, f.w2)?;
    tape.add(y, f.b2)
}

/// Post-norm residual: `LayerNorm(x + sublayer)`.
pub fn residual_norm<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    sublayer: Var,
    norm: &BoundLayerNorm,
) -> Result<Var> {
    let sum = tape.add(x, sublayer)?;
    tape.layer_norm(sum, norm.gamma, norm.offset)
}

/// The three exportable stages of one attention instance.
#[derive(Clone, Copy, Debug)]
pub struct StageVars {
    pub pre_conv: Var,
    pub post_conv: Var,
    pub post_softmax: Var,
}

/// Attention sublayer output: features plus the evolved state (threaded to
/// the next block) and the exportable stages.
#[derive(Clone, Debug)]
pub struct AttnSublayerOut {
    pub out: Var,
    pub state: AttentionState,
    pub stages: StageVars,
}

/// Runs one attention instance end to end: projections, logit generation
/// (with relative bias per mode), evolution, softmax, value projection.
#[allow(clippy::too_many_arguments)]
pub fn attention_sublayer<S: Scalar>(
    tape: &mut Tape<S>,
    x_q: Var,
    x_kv: Var,
    bound: &BoundAttention,
    mask: &BoolMat,
    prev: Option<&AttentionState>,
    cfg: &EaConfig,
    grid: Option<(usize, usize)>,
) -> Result<AttnSublayerOut> {
    let q = crate::attention::project_heads(tape, x_q, bound.w_q, bound.heads)?;
    let k = crate::attention::project_heads(tape, x_kv, bound.w_k, bound.heads)?;
    let current =
        attention_logits(tape, q, k, bound.pos_mode, bound.r_max, &bound.pos_vars, grid, mask)?;
    let evolved = evolve_logits(tape, prev, &current, bound.conv.as_ref(), cfg)?;
    let probs = masked_row_softmax(tape, &evolved.state)?;
    let out = value_project(tape, probs, x_kv, bound.w_v, bound.w_o, bound.heads)?;
    Ok(AttnSublayerOut {
        out,
        state: evolved.state,
        stages: StageVars {
            pre_conv: evolved.pre_conv,
            post_conv: evolved.post_conv,
            post_softmax: probs,
        },
    })
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub y: Var,
    /// Post-convolution logit state for the next block's residual chain.
    pub state: AttentionState,
    pub stages: StageVars,
}

/// One encoder block: attention sublayer + FFN, residual + post-norm around
/// each.
pub fn ea_block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    prev: Option<&AttentionState>,
    block: &BoundBlock,
    cfg: &EaConfig,
    mask: &BoolMat,
    grid: Option<(usize, usize)>,
) -> Result<BlockOutput> {
    let attn = attention_sublayer(tape, x, x, &block.attn, mask, prev, cfg, grid)?;
    let h = residual_norm(tape, x, attn.out, &block.norm1)?;
    let f = ffn_forward(tape, h, &block.ffn)?;
    let y = residual_norm(tape, h, f, &block.norm2)?;
    Ok(BlockOutput { y, state: attn.state, stages: attn.stages })
}

#[derive(Clone, Debug)]
pub struct DecoderBlockOutput {
    pub y: Var,
    pub self_state: AttentionState,
    pub cross_state: AttentionState,
    pub self_stages: StageVars,
    pub cross_stages: StageVars,
}

/// One decoder block: causal self-attention, encoder-decoder attention, FFN.
///
/// The two attention instances maintain separate residual chains (their
/// shapes differ).
#[allow(clippy::too_many_arguments)]
pub fn ea_decoder_block_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    enc_features: Var,
    prev_self: Option<&AttentionState>,
    prev_cross: Option<&AttentionState>,
    block: &BoundDecoderBlock,
    cfg_self: &EaConfig,
    cfg_cross: &EaConfig,
    causal_mask: &BoolMat,
    cross_mask: &BoolMat,
) -> Result<DecoderBlockOutput> {
    let self_attn =
        attention_sublayer(tape, x, x, &block.self_attn, causal_mask, prev_self, cfg_self, None)?;
    let h1 = residual_norm(tape, x, self_attn.out, &block.norm1)?;
    let cross = attention_sublayer(
        tape,
        h1,
        enc_features,
        &block.cross_attn,
        cross_mask,
        prev_cross,
        cfg_cross,
        None,
    )?;
    let h2 = residual_norm(tape, h1, cross.out, &block.norm2)?;
    let f = ffn_forward(tape, h2, &block.ffn)?;
    let y = residual_norm(tape, h2, f, &block.norm3)?;
    Ok(DecoderBlockOutput {
        y,
        self_state: self_attn.state,
        cross_state: cross.state,
        self_stages: self_attn.stages,
        cross_stages: cross.stages,
    })
}

/// Uniform fan-in-scaled initialization bound `1/sqrt(fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Validates that an attention parameter set is internally consistent.
pub fn validate_attention<S: Scalar>(p: &AttentionParams<S>, c: usize) -> Result<()> {
    let dk = p
        .w_q
        .shape()
        .get(1)
        .copied()
        .ok_or_else(|| Error::Dimension("w_q must be rank 2".into()))?;
    if p.w_q.shape() != [c, dk] || p.w_k.shape() != [c, dk] || p.w_v.shape() != [c, dk] {
        return Err(Error::Dimension(format!(
            "attention projections must be [{}, {}]",
            c, dk
        )));
    }
    if p.w_o.shape() != [dk, c] {
        return Err(Error::Dimension(format!("w_o must be [{}, {}]", dk, c)));
    }
    if p.heads == 0 || dk % p.heads != 0 {
        return Err(Error::Config(format!("width {} not divisible by {} heads", dk, p.heads)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::no_mask;
    use crate::testutil::TestRng;

    fn eye(n: usize) -> Tensor<f64> {
        Tensor::from_fn(vec![n, n], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 })
    }

    #[test]
    fn value_project_identity_attention_returns_input() {
        // A_k = I per head, W_V = W_O = I: output = X.
        let n = 4;
        let c = 6;
        let mut rng = TestRng::new(311);
        let x: Tensor<f64> = rng.tensor(vec![n, c], -1.0, 1.0);
        let probs = Tensor::from_fn(vec![n, n, 2], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
        let mut tape: Tape = Tape::new();
        let pv = tape.leaf(probs);
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(eye(c));
        let wo = tape.leaf(eye(c));
        let out = value_project(&mut tape, pv, xv, wv, wo, 2).unwrap();
        for (got, want) in tape.value(out).data().iter().zip(x.data()) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn value_project_uniform_rows_average_values() {
        let n = 3;
        let c = 4;
        let mut rng = TestRng::new(313);
        let x: Tensor<f64> = rng.tensor(vec![n, c], -1.0, 1.0);
        let probs = Tensor::full(vec![n, n, 1], 1.0 / n as f64);
        let mut tape: Tape = Tape::new();
        let pv = tape.leaf(probs);
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(eye(c));
        let wo = tape.leaf(eye(c));
        let out = value_project(&mut tape, pv, xv, wv, wo, 1).unwrap();
        for i in 0..n {
            for k in 0..c {
                let mean: f64 = (0..n).map(|j| x.data()[j * c + k]).sum::<f64>() / n as f64;
                assert!((tape.value(out).data()[i * c + k] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn value_project_single_head_matches_triple_loop() {
        let (n, c) = (3usize, 4usize);
        let mut rng = TestRng::new(317);
        let probs: Tensor<f64> = rng.tensor(vec![n, n, 1], 0.0, 1.0);
        let x: Tensor<f64> = rng.tensor(vec![n, c], -1.0, 1.0);
        let w_v: Tensor<f64> = rng.tensor(vec![c, c], -1.0, 1.0);
        let w_o: Tensor<f64> = rng.tensor(vec![c, c], -1.0, 1.0);
        let mut tape: Tape = Tape::new();
        let pv = tape.leaf(probs.clone());
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w_v.clone());
        let wo = tape.leaf(w_o.clone());
        let out = value_project(&mut tape, pv, xv, wv, wo, 1).unwrap();
        // Oracle: V = X W_V; H = A V; Y = H W_O with explicit loops.
        let mut v = vec![0.0; n * c];
        for i in 0..n {
            for k in 0..c {
                for t in 0..c {
                    v[i * c + k] += x.data()[i * c + t] * w_v.data()[t * c + k];
                }
            }
        }
        let mut h = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..n {
                for k in 0..c {
                    h[i * c + k] += probs.data()[i * n + j] * v[j * c + k];
                }
            }
        }
        for i in 0..n {
            for k in 0..c {
                let mut want = 0.0;
                for t in 0..c {
                    want += h[i * c + t] * w_o.data()[t * c + k];
                }
                let got = tape.value(out).data()[i * c + k];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ffn_identity_weights_act_as_relu() {
        let mut rng = TestRng::new(331);
        let x: Tensor<f64> = rng.tensor(vec![3, 4], -1.0, 1.0);
        let mut tape: Tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let f = BoundFfn {
            w1: tape.leaf(eye(4)),
            b1: tape.leaf(Tensor::zeros(vec![4])),
            w2: tape.leaf(eye(4)),
            b2: tape.leaf(Tensor::zeros(vec![4])),
        };
        let y = ffn_forward(&mut tape, xv, &f).unwrap();
        for (got, &want) in tape.value(y).data().iter().zip(x.data()) {
            assert_eq!(*got, want.max(0.0));
        }
    }

    #[test]
    fn ffn_matches_loop_oracle() {
        let (n, c, cf) = (2usize, 3usize, 5usize);
        let mut rng = TestRng::new(337);
        let x: Tensor<f64> = rng.tensor(vec![n, c], -1.0, 1.0);
        let w1: Tensor<f64> = rng.tensor(vec![c, cf], -1.0, 1.0);
        let b1: Tensor<f64> = rng.tensor(vec![cf], -1.0, 1.0);
        let w2: Tensor<f64> = rng.tensor(vec![cf, c], -1.0, 1.0);
        let b2: Tensor<f64> = rng.tensor(vec![c], -1.0, 1.0);
        let mut tape: Tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let f = BoundFfn {
            w1: tape.leaf(w1.clone()),
            b1: tape.leaf(b1.clone()),
            w2: tape.leaf(w2.clone()),
            b2: tape.leaf(b2.clone()),
        };
        let y = ffn_forward(&mut tape, xv, &f).unwrap();
        for i in 0..n {
            for k in 0..c {
                let mut want = b2.data()[k];
                for t in 0..cf {
                    let mut pre = b1.data()[t];
                    for s in 0..c {
                        pre += x.data()[i * c + s] * w1.data()[s * cf + t];
                    }
                    want += pre.max(0.0) * w2.data()[t * c + k];
                }
                let got = tape.value(y).data()[i * c + k];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    fn tiny_attention(rng: &mut TestRng, c: usize, heads: usize, with_conv: bool) -> AttentionParams<f64> {
        AttentionParams {
            heads,
            w_q: rng.tensor(vec![c, c], -0.5, 0.5),
            w_k: rng.tensor(vec![c, c], -0.5, 0.5),
            w_v: rng.tensor(vec![c, c], -0.5, 0.5),
            w_o: rng.tensor(vec![c, c], -0.5, 0.5),
            conv: with_conv.then(|| AttentionConvParams {
                kernel: rng.tensor(vec![3, 3, heads, heads], -0.3, 0.3),
                bias: rng.tensor(vec![heads], -0.1, 0.1),
            }),
            pos: PositionalEncoding::none(),
        }
    }

    fn tiny_block(rng: &mut TestRng, c: usize, heads: usize, with_conv: bool) -> BlockParams<f64> {
        BlockParams {
            attn: tiny_attention(rng, c, heads, with_conv),
            norm1: LayerNormParams::identity(c),
            ffn: FfnParams {
                w1: rng.tensor(vec![c, c], -0.5, 0.5),
                b1: rng.tensor(vec![c], -0.1, 0.1),
                w2: rng.tensor(vec![c, c], -0.5, 0.5),
                b2: rng.tensor(vec![c], -0.1, 0.1),
            },
            norm2: LayerNormParams::identity(c),
        }
    }

    #[test]
    fn stacked_blocks_with_alpha_one_share_logits() {
        // Two blocks, alpha = 1, beta = 0: block 2's pre-softmax logits are
        // bitwise block 1's (pure inheritance through the residual chain).
        let (n, c, heads) = (5usize, 6usize, 2usize);
        let mut rng = TestRng::new(347);
        let b1 = tiny_block(&mut rng, c, heads, false);
        let b2 = tiny_block(&mut rng, c, heads, false);
        let x: Tensor<f64> = rng.tensor(vec![n, c], -1.0, 1.0);
        let mask = no_mask(n, n);
        let cfg = EaConfig { alpha: 1.0, beta: 0.0, ..EaConfig::new(1.0, 0.0, 3, crate::evolve::ConvMode::Encoder) };

        let mut tape: Tape = Tape::new();
        let mut names = NamedVars::new();
        let bb1 = bind_block(&mut tape, &b1, "encoder.0", &mut names);
        let bb2 = bind_block(&mut tape, &b2, "encoder.1", &mut names);
        let xv = tape.leaf(x);
        let o1 = ea_block_forward(&mut tape, xv, None, &bb1, &cfg, &mask, None).unwrap();
        let o2 = ea_block_forward(&mut tape, o1.y, Some(&o1.state), &bb2, &cfg, &mask, None).unwrap();
        assert_eq!(
            tape.value(o1.state.logits).data(),
            tape.value(o2.state.logits).data()
        );
    }

    #[test]
    fn binding_names_follow_structure() {
        let mut rng = TestRng::new(349);
        let block = tiny_block(&mut rng, 4, 2, true);
        let mut tape: Tape = Tape::new();
        let mut names = NamedVars::new();
        bind_block(&mut tape, &block, "encoder.0", &mut names);
        let got: Vec<&str> = names.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(
            got,
            vec![
                "encoder.0.attn.w_q",
                "encoder.0.attn.w_k",
                "encoder.0.attn.w_v",
                "encoder.0.attn.w_o",
                "encoder.0.attn.conv.kernel",
                "encoder.0.attn.conv.bias",
                "encoder.0.norm1.gamma",
                "encoder.0.norm1.offset",
                "encoder.0.ffn.w1",
                "encoder.0.ffn.b1",
                "encoder.0.ffn.w2",
                "encoder.0.ffn.b2",
                "encoder.0.norm2.gamma",
                "encoder.0.norm2.offset",
            ]
        );
    }

    #[test]
    fn block_forward_is_finite_and_differentiable() {
        let (n, c, heads) = (4usize, 6usize, 2usize);
        let mut rng = TestRng::new(353);
        let block = tiny_block(&mut rng, c, heads, true);
        let x: Tensor<f64> = rng.tensor(vec![n, c], -1.0, 1.0);
        let mask = no_mask(n, n);
        let cfg = EaConfig::new(0.5, 0.5, 3, crate::evolve::ConvMode::Encoder);
        let mut tape: Tape = Tape::new();
        let mut names = NamedVars::new();
        let bb = bind_block(&mut tape, &block, "encoder.0", &mut names);
        let xv = tape.leaf(x);
        let out = ea_block_forward(&mut tape, xv, None, &bb, &cfg, &mask, None).unwrap();
        assert!(tape.value(out.y).all_finite());
        let sq = tape.mul(out.y, out.y).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        for (name, var) in &names {
            let g = tape.grad(*var).unwrap_or(&[]);
            assert!(!g.is_empty(), "no gradient for {}", name);
            assert!(g.iter().all(|v| v.is_finite()), "non-finite gradient in {}", name);
        }
    }
}
