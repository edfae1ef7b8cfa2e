//! Closed-form parameter and FLOP accounting, vanilla vs evolving-attention.
//!
//! Parameter counts are exact: they must equal the instantiated model's
//! tensor-size sum (tested against `Model::param_count`). FLOP estimates
//! count matrix-multiply multiply-adds as 2 FLOPs plus explicit bias adds
//! and the attention convolution; layer norm, softmax, residual adds, and
//! embedding lookups are excluded (they are the same for vanilla and EA
//! models and vanish from the overhead ratio).

use serde::Serialize;

use crate::attention::PosMode;
use crate::error::Result;
use crate::evolve::EaConfig;
use crate::model::{ModelKind, ModelSpec};

/// Extra parameters one convolved attention instance carries:
/// `k² · K²` kernel weights plus `K` channel biases.
pub fn conv_param_count(k_heads: usize, kernel: usize) -> usize {
    kernel * kernel * k_heads * k_heads + k_heads
}

/// FLOPs of one attention convolution over an `N_q x N_k` attention image
/// with `K` channels: `2 · N_q · N_k · K² · k²` for the multiply-adds plus
/// `N_q · N_k · K` bias adds.
pub fn conv_flops(n_q: usize, n_k: usize, k_heads: usize, kernel: usize) -> u64 {
    let macs = 2 * n_q * n_k * k_heads * k_heads * kernel * kernel;
    (macs + n_q * n_k * k_heads) as u64
}

fn pos_param_count(mode: PosMode, r_max: usize, head_dim: usize) -> usize {
    let rows = 2 * r_max + 1;
    match mode {
        PosMode::None | PosMode::Absolute => 0,
        PosMode::Relative1d => rows * head_dim,
        PosMode::Relative2d => 2 * rows * head_dim,
    }
}

fn attn_param_count(spec: &ModelSpec, cfg: &EaConfig, pos: PosMode, with_conv: bool) -> usize {
    let c = spec.c_model;
    let mut n = 4 * c * c;
    if with_conv && cfg.uses_conv() {
        n += conv_param_count(spec.k_heads, cfg.kernel_size);
    }
    n + pos_param_count(pos, spec.r_max(), spec.head_dim())
}

fn ffn_param_count(c: usize, c_ff: usize) -> usize {
    2 * c * c_ff + c_ff + c
}

/// Attention FLOPs excluding the convolution: Q/K/V/O projections, logits,
/// application, and (when present) relative-bias dot products.
fn attn_flops(n_q: usize, n_k: usize, c: usize, pos: PosMode) -> u64 {
    let proj = 2 * c * c * (2 * n_q + 2 * n_k);
    let logits_apply = 4 * n_q * n_k * c;
    let rel = match pos {
        PosMode::None | PosMode::Absolute => 0,
        PosMode::Relative1d => 2 * n_q * n_k * c,
        PosMode::Relative2d => 4 * n_q * n_k * c,
    };
    (proj + logits_apply + rel) as u64
}

fn ffn_flops(n: usize, c: usize, c_ff: usize) -> u64 {
    (4 * n * c * c_ff + n * c_ff + n * c) as u64
}

/// Per-module parameter count (one entry per embedding, block, head).
#[derive(Clone, Debug, Serialize)]
pub struct ModuleParams {
    pub name: String,
    pub params: usize,
}

/// Per-block FLOP estimate at the report's sequence length.
#[derive(Clone, Debug, Serialize)]
pub struct BlockFlops {
    pub name: String,
    pub attn: u64,
    pub ffn: u64,
    /// Evolving-attention convolution cost; 0 for vanilla configurations.
    pub conv: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    /// Token count the FLOP numbers assume (`h·w` for image models).
    pub seq_len: usize,
    pub modules: Vec<ModuleParams>,
    pub blocks: Vec<BlockFlops>,
    pub total_params: usize,
    pub vanilla_params: usize,
    /// `total_params - vanilla_params`, the sum of conv_param_count over
    /// all convolved attention instances.
    pub conv_params: usize,
    pub total_flops: u64,
    pub vanilla_flops: u64,
    pub conv_flops: u64,
    /// `total_flops / vanilla_flops - 1`.
    pub flops_overhead: f64,
}

impl std::fmt::Display for CostReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "parameters (EA {} / vanilla {}):", self.total_params, self.vanilla_params)?;
        for m in &self.modules {
            writeln!(f, "  {:<24} {:>10}", m.name, m.params)?;
        }
        writeln!(f, "flops at {} tokens (EA {} / vanilla {}):", self.seq_len, self.total_flops, self.vanilla_flops)?;
        for b in &self.blocks {
            writeln!(f, "  {:<24} attn {:>12}  ffn {:>12}  conv {:>12}", b.name, b.attn, b.ffn, b.conv)?;
        }
        write!(
            f,
            "conv params +{}, conv flops +{} ({:.4}% overhead)",
            self.conv_params,
            self.conv_flops,
            self.flops_overhead * 100.0
        )
    }
}

/// Closed-form cost accounting for `spec` at sequence length `seq_len`
/// (ignored for image models, which use their pixel count).
pub fn count_costs(spec: &ModelSpec, seq_len: usize) -> Result<CostReport> {
    spec.validate()?;
    let c = spec.c_model;
    let n = match spec.kind {
        ModelKind::ImageClassifier => {
            let img = spec.image.expect("validated image spec");
            img.height * img.width
        }
        _ => seq_len,
    };

    let mut modules = Vec::new();
    let mut blocks = Vec::new();
    let mut conv_params = 0usize;
    let mut conv_total = 0u64;

    let push_block =
        |modules: &mut Vec<ModuleParams>,
         blocks: &mut Vec<BlockFlops>,
         conv_params: &mut usize,
         conv_total: &mut u64,
         name: String,
         sites: &[(&EaConfig, PosMode, usize, usize)],
         norms: usize| {
            let mut params = norms * 2 * c + ffn_param_count(c, spec.c_ff);
            let mut attn = 0u64;
            let mut conv = 0u64;
            for (cfg, pos, n_q, n_k) in sites {
                params += attn_param_count(spec, cfg, *pos, true);
                attn += attn_flops(*n_q, *n_k, c, *pos);
                if cfg.uses_conv() {
                    let cp = conv_param_count(spec.k_heads, cfg.kernel_size);
                    *conv_params += cp;
                    conv += conv_flops(*n_q, *n_k, spec.k_heads, cfg.kernel_size);
                }
            }
            *conv_total += conv;
            modules.push(ModuleParams { name: name.clone(), params });
            blocks.push(BlockFlops { name, attn, ffn: ffn_flops(n, c, spec.c_ff), conv });
        };

    match spec.kind {
        ModelKind::EncoderClassifier => {
            modules.push(ModuleParams { name: "embed".into(), params: spec.src_vocab * c });
            for i in 0..spec.n_enc_layers {
                push_block(
                    &mut modules,
                    &mut blocks,
                    &mut conv_params,
                    &mut conv_total,
                    format!("encoder.{i}"),
                    &[(&spec.ea_encoder, spec.pos_mode, n, n)],
                    2,
                );
            }
            modules.push(ModuleParams {
                name: "head".into(),
                params: c * spec.n_classes + spec.n_classes,
            });
        }
        ModelKind::Seq2Seq => {
            modules.push(ModuleParams { name: "src_embed".into(), params: spec.src_vocab * c });
            modules.push(ModuleParams {
                name: "tgt_embed".into(),
                params: (spec.tgt_vocab + 1) * c,
            });
            for i in 0..spec.n_enc_layers {
                push_block(
                    &mut modules,
                    &mut blocks,
                    &mut conv_params,
                    &mut conv_total,
                    format!("encoder.{i}"),
                    &[(&spec.ea_encoder, spec.pos_mode, n, n)],
                    2,
                );
            }
            for i in 0..spec.n_dec_layers {
                push_block(
                    &mut modules,
                    &mut blocks,
                    &mut conv_params,
                    &mut conv_total,
                    format!("decoder.{i}"),
                    &[
                        (&spec.ea_decoder_self, spec.pos_mode, n, n),
                        (&spec.ea_encoder_decoder, PosMode::None, n, n),
                    ],
                    3,
                );
            }
            modules.push(ModuleParams {
                name: "out".into(),
                params: c * spec.tgt_vocab + spec.tgt_vocab,
            });
        }
        ModelKind::ImageClassifier => {
            let img = spec.image.expect("validated image spec");
            modules.push(ModuleParams { name: "in_proj".into(), params: img.channels * c + c });
            for i in 0..spec.n_enc_layers {
                push_block(
                    &mut modules,
                    &mut blocks,
                    &mut conv_params,
                    &mut conv_total,
                    format!("encoder.{i}"),
                    &[(&spec.ea_encoder, spec.pos_mode, n, n)],
                    2,
                );
            }
            modules.push(ModuleParams {
                name: "head".into(),
                params: c * spec.n_classes + spec.n_classes,
            });
        }
    }

    let total_params: usize = modules.iter().map(|m| m.params).sum();
    let total_flops: u64 = blocks.iter().map(|b| b.attn + b.ffn + b.conv).sum();
    let vanilla_flops = total_flops - conv_total;
    Ok(CostReport {
        seq_len: n,
        modules,
        blocks,
        total_params,
        vanilla_params: total_params - conv_params,
        conv_params,
        total_flops,
        vanilla_flops,
        conv_flops: conv_total,
        flops_overhead: conv_total as f64 / vanilla_flops as f64,
    })
}
