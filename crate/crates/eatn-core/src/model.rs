//! Whole-model assembly: specs, parameter containers, seeded initialization,
//! named-tensor traversal (the canonical order for checkpoints and
//! optimizers), and the three forward paths — encoder classifier, seq2seq
//! with teacher forcing and incremental decoding, and flattened-image
//! classifier.

use serde::{Deserialize, Serialize};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    build_causal_mask, no_mask, sinusoidal_table, AttentionState, PosMode, PositionalEncoding,
};
use crate::blocks::{
    bind_block, bind_decoder_block, bind_linear, ea_block_forward, ea_decoder_block_forward,
    AttentionParams, BlockParams, BoundBlock, BoundDecoderBlock, BoundLinear, DecoderBlockParams,
    FfnParams, LayerNormParams, LinearParams, NamedVars, StageVars,
};
use crate::error::{Error, Result};
use crate::evolve::{AttentionConvParams, EaConfig};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{BoolMat, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    EncoderClassifier,
    Seq2Seq,
    ImageClassifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Architecture description; every model is a pure function of
/// `(ModelSpec, seed)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Model width C; must be divisible by `k_heads`.
    pub c_model: usize,
    pub k_heads: usize,
    /// FFN inner width (4·C in the Base preset, C in the Lite preset).
    pub c_ff: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub n_classes: usize,
    pub image: Option<ImageShape>,
    /// Maximum sequence length (sequence kinds).
    pub max_len: usize,
    pub pos_mode: PosMode,
    pub ea_encoder: EaConfig,
    pub ea_decoder_self: EaConfig,
    pub ea_encoder_decoder: EaConfig,
}

impl ModelSpec {
    pub fn head_dim(&self) -> usize {
        self.c_model / self.k_heads
    }

    /// Beginning-of-sequence id fed to the decoder; one past the target
    /// vocabulary (the target embedding has `tgt_vocab + 1` rows).
    pub fn bos_id(&self) -> usize {
        self.tgt_vocab
    }

    /// Relative-offset clipping radius: covers every offset reachable at the
    /// configured maximum length (sequences) or grid (images), so clipping
    /// never truncates in-range offsets.
    pub fn r_max(&self) -> usize {
        match self.image {
            Some(img) => img.height.max(img.width).saturating_sub(1),
            None => self.max_len.saturating_sub(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_model == 0 || self.k_heads == 0 {
            return Err(Error::Config("c_model and k_heads must be positive".into()));
        }
        if !self.c_model.is_multiple_of(self.k_heads) {
            return Err(Error::Config(format!(
                "c_model {} not divisible by k_heads {}",
                self.c_model, self.k_heads
            )));
        }
        if self.c_ff == 0 {
            return Err(Error::Config("c_ff must be positive".into()));
        }
        if self.n_enc_layers == 0 {
            return Err(Error::Config("n_enc_layers must be at least 1".into()));
        }
        self.ea_encoder.validate()?;
        self.ea_decoder_self.validate()?;
        self.ea_encoder_decoder.validate()?;
        match self.kind {
            ModelKind::EncoderClassifier => {
                if self.src_vocab == 0 {
                    return Err(Error::Config("src_vocab must be positive".into()));
                }
                if self.n_classes < 2 {
                    return Err(Error::Config("n_classes must be at least 2".into()));
                }
                if self.max_len == 0 {
                    return Err(Error::Config("max_len must be positive".into()));
                }
                if !matches!(self.pos_mode, PosMode::None | PosMode::Absolute | PosMode::Relative1d)
                {
                    return Err(Error::Config(
                        "sequence models support pos_mode none/absolute/relative_1d".into(),
                    ));
                }
            }
            ModelKind::Seq2Seq => {
                if self.src_vocab == 0 || self.tgt_vocab == 0 {
                    return Err(Error::Config("src_vocab and tgt_vocab must be positive".into()));
                }
                if self.n_dec_layers == 0 {
                    return Err(Error::Config("seq2seq needs n_dec_layers >= 1".into()));
                }
                if self.max_len == 0 {
                    return Err(Error::Config("max_len must be positive".into()));
                }
                if !matches!(self.pos_mode, PosMode::None | PosMode::Absolute | PosMode::Relative1d)
                {
                    return Err(Error::Config(
                        "sequence models support pos_mode none/absolute/relative_1d".into(),
                    ));
                }
            }
            ModelKind::ImageClassifier => {
                let img = self
                    .image
                    .ok_or_else(|| Error::Config("image_classifier needs an image shape".into()))?;
                if img.height == 0 || img.width == 0 || img.channels == 0 {
                    return Err(Error::Config("image dimensions must be positive".into()));
                }
                if self.n_classes < 2 {
                    return Err(Error::Config("n_classes must be at least 2".into()));
                }
                if !matches!(self.pos_mode, PosMode::None | PosMode::Relative2d) {
                    return Err(Error::Config(
                        "image models support pos_mode none/relative_2d".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

// ---- parameters ----

#[derive(Clone, Debug)]
pub enum ModelParams<S: Scalar = f64> {
    EncoderClassifier {
        /// `[src_vocab, C]` token table.
        embed: Tensor<S>,
        encoder: Vec<BlockParams<S>>,
        head: LinearParams<S>,
    },
    Seq2Seq {
        src_embed: Tensor<S>,
        /// `[tgt_vocab + 1, C]`; the extra row is the BOS embedding.
        tgt_embed: Tensor<S>,
        encoder: Vec<BlockParams<S>>,
        decoder: Vec<DecoderBlockParams<S>>,
        out: LinearParams<S>,
    },
    ImageClassifier {
        /// `[channels, C]` pixel-feature projection.
        in_proj: LinearParams<S>,
        encoder: Vec<BlockParams<S>>,
        head: LinearParams<S>,
    },
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar = f64> {
    pub spec: ModelSpec,
    pub params: ModelParams<S>,
}

fn uniform_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::from_f64(rng.gen_range(-bound..bound)))
}

fn init_positional<S: Scalar>(
    rng: &mut ChaCha8Rng,
    mode: PosMode,
    r_max: usize,
    d: usize,
) -> PositionalEncoding<S> {
    let rows = 2 * r_max + 1;
    let bound = 1.0 / (d.max(1) as f64).sqrt();
    match mode {
        PosMode::None => PositionalEncoding::none(),
        PosMode::Absolute => PositionalEncoding::absolute(),
        PosMode::Relative1d => PositionalEncoding {
            mode,
            e_rel: Some(uniform_tensor(rng, vec![rows, d], bound)),
            e_h: None,
            e_w: None,
            r_max,
        },
        PosMode::Relative2d => PositionalEncoding {
            mode,
            e_rel: None,
            e_h: Some(uniform_tensor(rng, vec![rows, d], bound)),
            e_w: Some(uniform_tensor(rng, vec![rows, d], bound)),
            r_max,
        },
    }
}

fn init_attention<S: Scalar>(
    rng: &mut ChaCha8Rng,
    spec: &ModelSpec,
    cfg: &EaConfig,
    pos_mode: PosMode,
) -> AttentionParams<S> {
    let c = spec.c_model;
    let k = spec.k_heads;
    let d = spec.head_dim();
    let wb = 1.0 / (c as f64).sqrt();
    let w_q = uniform_tensor(rng, vec![c, c], wb);
    let w_k = uniform_tensor(rng, vec![c, c], wb);
    let w_v = uniform_tensor(rng, vec![c, c], wb);
    let w_o = uniform_tensor(rng, vec![c, c], wb);
    let conv = cfg.uses_conv().then(|| {
        let ks = cfg.kernel_size;
        let kb = 1.0 / ((ks * ks * k) as f64).sqrt();
        AttentionConvParams {
            kernel: uniform_tensor(rng, vec![ks, ks, k, k], kb),
            bias: Tensor::zeros(vec![k]),
        }
    });
    let pos = init_positional(rng, pos_mode, spec.r_max(), d);
    AttentionParams { heads: k, w_q, w_k, w_v, w_o, conv, pos }
}

fn init_ffn<S: Scalar>(rng: &mut ChaCha8Rng, c: usize, c_ff: usize) -> FfnParams<S> {
    FfnParams {
        w1: uniform_tensor(rng, vec![c, c_ff], 1.0 / (c as f64).sqrt()),
        b1: Tensor::zeros(vec![c_ff]),
        w2: uniform_tensor(rng, vec![c_ff, c], 1.0 / (c_ff as f64).sqrt()),
        b2: Tensor::zeros(vec![c]),
    }
}

fn init_block<S: Scalar>(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> BlockParams<S> {
    BlockParams {
        attn: init_attention(rng, spec, &spec.ea_encoder, spec.pos_mode),
        norm1: LayerNormParams::identity(spec.c_model),
        ffn: init_ffn(rng, spec.c_model, spec.c_ff),
        norm2: LayerNormParams::identity(spec.c_model),
    }
}

fn init_decoder_block<S: Scalar>(rng: &mut ChaCha8Rng, spec: &ModelSpec) -> DecoderBlockParams<S> {
    DecoderBlockParams {
        self_attn: init_attention(rng, spec, &spec.ea_decoder_self, spec.pos_mode),
        norm1: LayerNormParams::identity(spec.c_model),
        // Cross attention carries no relative bias: offsets between target
        // and source positions are not comparable.
        cross_attn: init_attention(rng, spec, &spec.ea_encoder_decoder, PosMode::None),
        norm2: LayerNormParams::identity(spec.c_model),
        ffn: init_ffn(rng, spec.c_model, spec.c_ff),
        norm3: LayerNormParams::identity(spec.c_model),
    }
}

fn init_linear<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> LinearParams<S> {
    LinearParams {
        w: uniform_tensor(rng, vec![rows, cols], 1.0 / (rows as f64).sqrt()),
        b: Tensor::zeros(vec![cols]),
    }
}

impl<S: Scalar> Model<S> {
    /// Builds a model with fan-in-scaled uniform initialization; the result
    /// is a pure function of `(spec, seed)`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = spec.c_model;
        let eb = 1.0 / (c as f64).sqrt();
        let params = match spec.kind {
            ModelKind::EncoderClassifier => ModelParams::EncoderClassifier {
                embed: uniform_tensor(&mut rng, vec![spec.src_vocab, c], eb),
                encoder: (0..spec.n_enc_layers).map(|_| init_block(&mut rng, &spec)).collect(),
                head: init_linear(&mut rng, c, spec.n_classes),
            },
            ModelKind::Seq2Seq => ModelParams::Seq2Seq {
                src_embed: uniform_tensor(&mut rng, vec![spec.src_vocab, c], eb),
                tgt_embed: uniform_tensor(&mut rng, vec![spec.tgt_vocab + 1, c], eb),
                encoder: (0..spec.n_enc_layers).map(|_| init_block(&mut rng, &spec)).collect(),
                decoder: (0..spec.n_dec_layers)
                    .map(|_| init_decoder_block(&mut rng, &spec))
                    .collect(),
                out: init_linear(&mut rng, c, spec.tgt_vocab),
            },
            ModelKind::ImageClassifier => {
                let img = spec.image.expect("validated");
                ModelParams::ImageClassifier {
                    in_proj: init_linear(&mut rng, img.channels, c),
                    encoder: (0..spec.n_enc_layers).map(|_| init_block(&mut rng, &spec)).collect(),
                    head: init_linear(&mut rng, c, spec.n_classes),
                }
            }
        };
        Ok(Self { spec, params })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_tensors(&mut |_, t| n += t.data().len());
        n
    }

    /// Visits every parameter tensor in the canonical (binding) order.
    pub fn visit_tensors(&self, f: &mut dyn FnMut(&str, &Tensor<S>)) {
        match &self.params {
            ModelParams::EncoderClassifier { embed, encoder, head } => {
                f("embed", embed);
                for (i, b) in encoder.iter().enumerate() {
                    visit_block(b, &format!("encoder.{i}"), f);
                }
                visit_linear(head, "head", f);
            }
            ModelParams::Seq2Seq { src_embed, tgt_embed, encoder, decoder, out } => {
                f("src_embed", src_embed);
                f("tgt_embed", tgt_embed);
                for (i, b) in encoder.iter().enumerate() {
                    visit_block(b, &format!("encoder.{i}"), f);
                }
                for (i, b) in decoder.iter().enumerate() {
                    visit_decoder_block(b, &format!("decoder.{i}"), f);
                }
                visit_linear(out, "out", f);
            }
            ModelParams::ImageClassifier { in_proj, encoder, head } => {
                visit_linear(in_proj, "in_proj", f);
                for (i, b) in encoder.iter().enumerate() {
                    visit_block(b, &format!("encoder.{i}"), f);
                }
                visit_linear(head, "head", f);
            }
        }
    }

    /// Mutable counterpart of [`visit_tensors`], same order.
    pub fn visit_tensors_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>)) {
        match &mut self.params {
            ModelParams::EncoderClassifier { embed, encoder, head } => {
                f("embed", embed);
                for (i, b) in encoder.iter_mut().enumerate() {
                    visit_block_mut(b, &format!("encoder.{i}"), f);
                }
                visit_linear_mut(head, "head", f);
            }
            ModelParams::Seq2Seq { src_embed, tgt_embed, encoder, decoder, out } => {
                f("src_embed", src_embed);
                f("tgt_embed", tgt_embed);
                for (i, b) in encoder.iter_mut().enumerate() {
                    visit_block_mut(b, &format!("encoder.{i}"), f);
                }
                for (i, b) in decoder.iter_mut().enumerate() {
                    visit_decoder_block_mut(b, &format!("decoder.{i}"), f);
                }
                visit_linear_mut(out, "out", f);
            }
            ModelParams::ImageClassifier { in_proj, encoder, head } => {
                visit_linear_mut(in_proj, "in_proj", f);
                for (i, b) in encoder.iter_mut().enumerate() {
                    visit_block_mut(b, &format!("encoder.{i}"), f);
                }
                visit_linear_mut(head, "head", f);
            }
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        let mut out = Vec::new();
        self.visit_tensors(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Registers every parameter on `tape`; names and order match
    /// [`visit_tensors`].
    pub fn bind(&self, tape: &mut Tape<S>) -> (BoundParams, NamedVars) {
        let mut names = NamedVars::new();
        let bound = match &self.params {
            ModelParams::EncoderClassifier { embed, encoder, head } => {
                let e = tape.leaf(embed.clone());
                names.push(("embed".into(), e));
                let blocks = encoder
                    .iter()
                    .enumerate()
                    .map(|(i, b)| bind_block(tape, b, &format!("encoder.{i}"), &mut names))
                    .collect();
                let h = bind_linear(tape, head, "head", &mut names);
                BoundParams::EncoderClassifier { embed: e, encoder: blocks, head: h }
            }
            ModelParams::Seq2Seq { src_embed, tgt_embed, encoder, decoder, out } => {
                let se = tape.leaf(src_embed.clone());
                names.push(("src_embed".into(), se));
                let te = tape.leaf(tgt_embed.clone());
                names.push(("tgt_embed".into(), te));
                let enc = encoder
                    .iter()
                    .enumerate()
                    .map(|(i, b)| bind_block(tape, b, &format!("encoder.{i}"), &mut names))
                    .collect();
                let dec = decoder
                    .iter()
                    .enumerate()
                    .map(|(i, b)| bind_decoder_block(tape, b, &format!("decoder.{i}"), &mut names))
                    .collect();
                let o = bind_linear(tape, out, "out", &mut names);
                BoundParams::Seq2Seq { src_embed: se, tgt_embed: te, encoder: enc, decoder: dec, out: o }
            }
            ModelParams::ImageClassifier { in_proj, encoder, head } => {
                let ip = bind_linear(tape, in_proj, "in_proj", &mut names);
                let blocks = encoder
                    .iter()
                    .enumerate()
                    .map(|(i, b)| bind_block(tape, b, &format!("encoder.{i}"), &mut names))
                    .collect();
                let h = bind_linear(tape, head, "head", &mut names);
                BoundParams::ImageClassifier { in_proj: ip, encoder: blocks, head: h }
            }
        };
        (bound, names)
    }
}

fn visit_linear<S: Scalar>(p: &LinearParams<S>, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
    f(&format!("{prefix}.w"), &p.w);
    f(&format!("{prefix}.b"), &p.b);
}

fn visit_attention<S: Scalar>(
    p: &AttentionParams<S>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &Tensor<S>),
) {
    f(&format!("{prefix}.w_q"), &p.w_q);
    f(&format!("{prefix}.w_k"), &p.w_k);
    f(&format!("{prefix}.w_v"), &p.w_v);
    f(&format!("{prefix}.w_o"), &p.w_o);
    if let Some(c) = &p.conv {
        f(&format!("{prefix}.conv.kernel"), &c.kernel);
        f(&format!("{prefix}.conv.bias"), &c.bias);
    }
    if let Some(e) = &p.pos.e_rel {
        f(&format!("{prefix}.rel.e"), e);
    }
    if let Some(e) = &p.pos.e_h {
        f(&format!("{prefix}.rel.e_h"), e);
    }
    if let Some(e) = &p.pos.e_w {
        f(&format!("{prefix}.rel.e_w"), e);
    }
}

fn visit_norm<S: Scalar>(
    p: &LayerNormParams<S>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &Tensor<S>),
) {
    f(&format!("{prefix}.gamma"), &p.gamma);
    f(&format!("{prefix}.offset"), &p.offset);
}

fn visit_ffn<S: Scalar>(p: &FfnParams<S>, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
    f(&format!("{prefix}.w1"), &p.w1);
    f(&format!("{prefix}.b1"), &p.b1);
    f(&format!("{prefix}.w2"), &p.w2);
    f(&format!("{prefix}.b2"), &p.b2);
}

fn visit_block<S: Scalar>(p: &BlockParams<S>, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<S>)) {
    visit_attention(&p.attn, &format!("{prefix}.attn"), f);
    visit_norm(&p.norm1, &format!("{prefix}.norm1"), f);
    visit_ffn(&p.ffn, &format!("{prefix}.ffn"), f);
    visit_norm(&p.norm2, &format!("{prefix}.norm2"), f);
}

fn visit_decoder_block<S: Scalar>(
    p: &DecoderBlockParams<S>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &Tensor<S>),
) {
    visit_attention(&p.self_attn, &format!("{prefix}.self_attn"), f);
    visit_norm(&p.norm1, &format!("{prefix}.norm1"), f);
    visit_attention(&p.cross_attn, &format!("{prefix}.cross_attn"), f);
    visit_norm(&p.norm2, &format!("{prefix}.norm2"), f);
    visit_ffn(&p.ffn, &format!("{prefix}.ffn"), f);
    visit_norm(&p.norm3, &format!("{prefix}.norm3"), f);
}

fn visit_linear_mut<S: Scalar>(
    p: &mut LinearParams<S>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &mut Tensor<S>),
) {
    f(&format!("{prefix}.w"), &mut p.w);
    f(&format!("{prefix}.b"), &mut p.b);
}

fn visit_attention_mut<S: Scalar>(
    p: &mut AttentionParams<S>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &mut Tensor<S>),
) {
    f(&format!("{prefix}.w_q"), &mut p.w_q);
    f(&format!("{prefix}.w_k"), &mut p.w_k);
    f(&format!("{prefix}.w_v"), &mut p.w_v);
    f(&format!("{prefix}.w_o"), &mut p.w_o);
    if let Some(c) = &mut p.conv {
        f(&format!("{prefix}.conv.kernel"), &mut c.kernel);
        f(&format!("{prefix}.conv.bias"), &mut c.bias);
    }
    if let Some(e) = &mut p.pos.e_rel {
        f(&format!("{prefix}.rel.e"), e);
    }
    if let Some(e) = &mut p.pos.e_h {
        f(&format!("{prefix}.rel.e_h"), e);
    }
    if let Some(e) = &mut p.pos.e_w {
        f(&format!("{prefix}.rel.e_w"), e);
    }
}

fn visit_norm_mut<S: Scalar>(
    p: &mut LayerNormParams<S>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &mut Tensor<S>),
) {
    f(&format!("{prefix}.gamma"), &mut p.gamma);
    f(&format!("{prefix}.offset"), &mut p.offset);
}

fn visit_ffn_mut<S: Scalar>(
    p: &mut FfnParams<S>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &mut Tensor<S>),
) {
    f(&format!("{prefix}.w1"), &mut p.w1);
    f(&format!("{prefix}.b1"), &mut p.b1);
    f(&format!("{prefix}.w2"), &mut p.w2);
    f(&format!("{prefix}.b2"), &mut p.b2);
}

fn visit_block_mut<S: Scalar>(
    p: &mut BlockParams<S>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &mut Tensor<S>),
) {
    visit_attention_mut(&mut p.attn, &format!("{prefix}.attn"), f);
    visit_norm_mut(&mut p.norm1, &format!("{prefix}.norm1"), f);
    visit_ffn_mut(&mut p.ffn, &format!("{prefix}.ffn"), f);
    visit_norm_mut(&mut p.norm2, &format!("{prefix}.norm2"), f);
}

fn visit_decoder_block_mut<S: Scalar>(
    p: &mut DecoderBlockParams<S>,
    prefix: &str,
    f: &mut dyn FnMut(&str, &mut Tensor<S>),
) {
    visit_attention_mut(&mut p.self_attn, &format!("{prefix}.self_attn"), f);
    visit_norm_mut(&mut p.norm1, &format!("{prefix}.norm1"), f);
    visit_attention_mut(&mut p.cross_attn, &format!("{prefix}.cross_attn"), f);
    visit_norm_mut(&mut p.norm2, &format!("{prefix}.norm2"), f);
    visit_ffn_mut(&mut p.ffn, &format!("{prefix}.ffn"), f);
    visit_norm_mut(&mut p.norm3, &format!("{prefix}.norm3"), f);
}

// ---- bound model & forward ----

#[derive(Clone, Debug)]
pub enum BoundParams {
    EncoderClassifier { embed: Var, encoder: Vec<BoundBlock>, head: BoundLinear },
    Seq2Seq {
        src_embed: Var,
        tgt_embed: Var,
        encoder: Vec<BoundBlock>,
        decoder: Vec<BoundDecoderBlock>,
        out: BoundLinear,
    },
    ImageClassifier { in_proj: BoundLinear, encoder: Vec<BoundBlock>, head: BoundLinear },
}

/// Which of the three attention types a trace entry came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnSite {
    Encoder,
    DecoderSelf,
    EncoderDecoder,
}

impl AttnSite {
    pub fn tag(self) -> &'static str {
        match self {
            AttnSite::Encoder => "encoder",
            AttnSite::DecoderSelf => "decoder_self",
            AttnSite::EncoderDecoder => "encoder_decoder",
        }
    }
}

/// Tape handles for one attention instance's exportable stages.
#[derive(Clone, Debug)]
pub struct TraceVars {
    pub layer: usize,
    pub site: AttnSite,
    pub stages: StageVars,
    pub mask: BoolMat,
}

/// Output handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// Classifiers: `[1, n_classes]`. Seq2seq: `[T, tgt_vocab]` per-position
    /// next-token logits under teacher forcing.
    pub logits: Var,
    /// Final pre-head features (`[N, C]` / `[T, C]`).
    pub features: Var,
    pub trace: Vec<TraceVars>,
}

fn embed_sequence<S: Scalar>(
    tape: &mut Tape<S>,
    table: Var,
    ids: &[usize],
    c: usize,
    absolute: bool,
) -> Result<Var> {
    let x = tape.gather(table, ids)?;
    let x = tape.scale(x, S::from_f64((c as f64).sqrt()));
    if absolute {
        let pe = tape.leaf(sinusoidal_table(ids.len(), c));
        tape.add(x, pe)
    } else {
        Ok(x)
    }
}

#[allow(clippy::too_many_arguments)]
fn run_encoder_stack<S: Scalar>(
    tape: &mut Tape<S>,
    blocks: &[BoundBlock],
    x: Var,
    cfg: &EaConfig,
    mask: &BoolMat,
    grid: Option<(usize, usize)>,
    site: AttnSite,
    trace: &mut Vec<TraceVars>,
) -> Result<Var> {
    let mut h = x;
    let mut state: Option<AttentionState> = None;
    for (i, b) in blocks.iter().enumerate() {
        let out = ea_block_forward(tape, h, state.as_ref(), b, cfg, mask, grid)?;
        trace.push(TraceVars { layer: i, site, stages: out.stages, mask: mask.clone() });
        state = Some(out.state);
        h = out.y;
    }
    Ok(h)
}

impl<S: Scalar> Model<S> {
    fn check_tokens(&self, ids: &[usize], what: &str) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::Contract(format!("{} sequence is empty", what)));
        }
        if ids.len() > self.spec.max_len {
            return Err(Error::Input(format!(
                "{} length {} exceeds max_len {}",
                what,
                ids.len(),
                self.spec.max_len
            )));
        }
        Ok(())
    }

    /// Encoder-classifier forward: embed, encode, mean-pool, linear head.
    pub fn forward_classifier(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        tokens: &[usize],
    ) -> Result<ForwardOut> {
        let BoundParams::EncoderClassifier { embed, encoder, head } = bound else {
            return Err(Error::Contract("bound params are not an encoder classifier".into()));
        };
        self.check_tokens(tokens, "input")?;
        let c = self.spec.c_model;
        let absolute = self.spec.pos_mode == PosMode::Absolute;
        let x = embed_sequence(tape, *embed, tokens, c, absolute)?;
        let mask = no_mask(tokens.len(), tokens.len());
        let mut trace = Vec::new();
        let h = run_encoder_stack(
            tape,
            encoder,
            x,
            &self.spec.ea_encoder,
            &mask,
            None,
            AttnSite::Encoder,
            &mut trace,
        )?;
        let pooled = tape.mean_rows(h)?;
        let pooled2 = tape.reshape(pooled, vec![1, c])?;
        let scores = tape.matmul(pooled2, head.w)?;
        let logits = tape.add(scores, head.b)?;
        Ok(ForwardOut { logits, features: h, trace })
    }

    /// Teacher-forced seq2seq forward. `tgt_gold` is the expected output
    /// sequence; position `t` of the returned logits predicts `tgt_gold[t]`
    /// from BOS plus the gold prefix before `t`.
    pub fn forward_seq2seq(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        src: &[usize],
        tgt_gold: &[usize],
    ) -> Result<ForwardOut> {
        let BoundParams::Seq2Seq { src_embed, tgt_embed, encoder, decoder, out } = bound else {
            return Err(Error::Contract("bound params are not a seq2seq model".into()));
        };
        self.check_tokens(src, "source")?;
        self.check_tokens(tgt_gold, "target")?;
        let c = self.spec.c_model;
        let absolute = self.spec.pos_mode == PosMode::Absolute;

        let xs = embed_sequence(tape, *src_embed, src, c, absolute)?;
        let src_mask = no_mask(src.len(), src.len());
        let mut trace = Vec::new();
        let enc = run_encoder_stack(
            tape,
            encoder,
            xs,
            &self.spec.ea_encoder,
            &src_mask,
            None,
            AttnSite::Encoder,
            &mut trace,
        )?;

        // Shift right: BOS then all gold tokens but the last.
        let mut dec_ids = Vec::with_capacity(tgt_gold.len());
        dec_ids.push(self.spec.bos_id());
        dec_ids.extend_from_slice(&tgt_gold[..tgt_gold.len() - 1]);
        // Gold ids must be in-vocabulary even though the last one is not fed
        // back in; it is still a loss target.
        if let Some(&bad) = tgt_gold.iter().find(|&&t| t >= self.spec.tgt_vocab) {
            return Err(Error::Input(format!(
                "target token {} out of vocabulary (size {})",
                bad, self.spec.tgt_vocab
            )));
        }
        let xt = embed_sequence(tape, *tgt_embed, &dec_ids, c, absolute)?;

        let t_len = dec_ids.len();
        let causal = build_causal_mask(t_len);
        let cross_mask = no_mask(t_len, src.len());
        let mut h = xt;
        let mut self_state: Option<AttentionState> = None;
        let mut cross_state: Option<AttentionState> = None;
        for (i, b) in decoder.iter().enumerate() {
            let o = ea_decoder_block_forward(
                tape,
                h,
                enc,
                self_state.as_ref(),
                cross_state.as_ref(),
                b,
                &self.spec.ea_decoder_self,
                &self.spec.ea_encoder_decoder,
                &causal,
                &cross_mask,
            )?;
            trace.push(TraceVars {
                layer: i,
                site: AttnSite::DecoderSelf,
                stages: o.self_stages,
                mask: causal.clone(),
            });
            trace.push(TraceVars {
                layer: i,
                site: AttnSite::EncoderDecoder,
                stages: o.cross_stages,
                mask: cross_mask.clone(),
            });
            self_state = Some(o.self_state);
            cross_state = Some(o.cross_state);
            h = o.y;
        }
        let scores = tape.matmul(h, out.w)?;
        let logits = tape.add(scores, out.b)?;
        Ok(ForwardOut { logits, features: h, trace })
    }

    /// Image-classifier forward: flatten row-major (each pixel one token),
    /// project, encode with the token grid, mean-pool, linear head.
    pub fn forward_image(
        &self,
        tape: &mut Tape<S>,
        bound: &BoundParams,
        pixels: &Tensor<S>,
    ) -> Result<ForwardOut> {
        let BoundParams::ImageClassifier { in_proj, encoder, head } = bound else {
            return Err(Error::Contract("bound params are not an image classifier".into()));
        };
        let img = self.spec.image.expect("validated");
        if pixels.shape() != [img.height, img.width, img.channels] {
            return Err(Error::Input(format!(
                "pixel shape {:?} does not match spec {}x{}x{}",
                pixels.shape(),
                img.height,
                img.width,
                img.channels
            )));
        }
        let n = img.tokens();
        let flat = Tensor::new(vec![n, img.channels], pixels.data().to_vec())?;
        let xv = tape.leaf(flat);
        let proj = tape.matmul(xv, in_proj.w)?;
        let x = tape.add(proj, in_proj.b)?;
        let mask = no_mask(n, n);
        let mut trace = Vec::new();
        let h = run_encoder_stack(
            tape,
            encoder,
            x,
            &self.spec.ea_encoder,
            &mask,
            Some((img.height, img.width)),
            AttnSite::Encoder,
            &mut trace,
        )?;
        let pooled = tape.mean_rows(h)?;
        let pooled2 = tape.reshape(pooled, vec![1, self.spec.c_model])?;
        let scores = tape.matmul(pooled2, head.w)?;
        let logits = tape.add(scores, head.b)?;
        Ok(ForwardOut { logits, features: h, trace })
    }

    /// Logits for the next token after `prefix` (empty prefix = first
    /// token). Runs a fresh teacher-forced pass over the prefix; by decoder
    /// causality this equals the corresponding row of any longer run.
    pub fn decode_next_logits(&self, src: &[usize], prefix: &[usize]) -> Result<Vec<S>> {
        let mut tape: Tape<S> = Tape::new();
        let (bound, _) = self.bind(&mut tape);
        let BoundParams::Seq2Seq { .. } = &bound else {
            return Err(Error::Contract("decode on a non-seq2seq model".into()));
        };
        // Feed BOS + prefix by treating `prefix + [dummy]` as the gold
        // sequence; the dummy is never embedded (shift-right drops it).
        let mut gold = prefix.to_vec();
        gold.push(0);
        let out = self.forward_seq2seq(&mut tape, &bound, src, &gold)?;
        let v = tape.value(out.logits);
        let vocab = self.spec.tgt_vocab;
        let t = prefix.len();
        Ok(v.data()[t * vocab..(t + 1) * vocab].to_vec())
    }

    /// Greedy decoding for `steps` tokens.
    pub fn greedy_decode(&self, src: &[usize], steps: usize) -> Result<Vec<usize>> {
        let mut outp = Vec::with_capacity(steps);
        for _ in 0..steps {
            let logits = self.decode_next_logits(src, &outp)?;
            let mut best = 0;
            for (i, v) in logits.iter().enumerate() {
                if *v > logits[best] {
                    best = i;
                }
            }
            outp.push(best);
        }
        Ok(outp)
    }
}
