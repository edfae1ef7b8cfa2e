//! Evolving attention: blend the previous block's attention logits with the
//! current block's (weight `alpha`), refine the blend with a K-channel 2D
//! convolution plus ReLU, and mix the refinement back in (weight `beta`).
//!
//! For one block:
//! ```text
//! A_input = alpha * prev_logits + (1 - alpha) * current_logits
//! A_logit = beta * ConvStrategy(A_input) + (1 - beta) * A_input
//! A       = softmax(A_logit)        (done by the caller)
//! ```
//! `ConvStrategy` depends on where the attention sits:
//! * encoder: standard same-padded convolution, then ReLU;
//! * decoder self-attention: convolution with the three upper-right taps
//!   disabled, ReLU, then the result shifted one pixel down and right —
//!   output row `q` never reads input rows beyond `q`;
//! * encoder-decoder attention: full convolution, ReLU, then a one-pixel
//!   right shift — output column `s` never reads source columns beyond `s`.
//!
//! Masked positions of `A_input` are zeroed before the convolution so the
//! kernel only ever sees clean zeros where the softmax will later exclude.

use serde::{Deserialize, Serialize};
use crate::attention::{mask_logits, AttentionState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{BoolMat, Tensor};

/// Where an attention instance sits, which selects its convolution strategy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvMode {
    Encoder,
    DecoderSelf,
    EncoderDecoder,
}

/// Per-attention-type evolving-attention settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EaConfig {
    /// Weight of the previous block's logits in the input blend, in [0, 1].
    pub alpha: f64,
    /// Weight of the convolution branch in the output blend, in [0, 1].
    pub beta: f64,
    /// Convolution kernel side length: 1, 3, or 5.
    pub kernel_size: usize,
    pub mode: ConvMode,
    /// When false the convolution path is the identity blend (as if beta = 0).
    pub conv_enabled: bool,
    /// When false the previous block's logits are ignored (as if alpha = 0).
    pub skip_enabled: bool,
}

impl EaConfig {
    pub fn new(alpha: f64, beta: f64, kernel_size: usize, mode: ConvMode) -> Self {
        Self { alpha, beta, kernel_size, mode, conv_enabled: true, skip_enabled: true }
    }

    /// A plain transformer block: no skip chain, no convolution.
    pub fn vanilla(mode: ConvMode) -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            kernel_size: 3,
            mode,
            conv_enabled: false,
            skip_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !matches!(self.kernel_size, 1 | 3 | 5) {
            return Err(Error::Config(format!(
                "kernel_size {} not in {{1, 3, 5}}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn effective_alpha(&self) -> f64 {
        if self.skip_enabled {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn effective_beta(&self) -> f64 {
        if self.conv_enabled {
            self.beta
        } else {
            0.0
        }
    }

    /// Whether this config instantiates convolution parameters at all.
    pub fn uses_conv(&self) -> bool {
        self.conv_enabled && self.beta > 0.0
    }
}

/// Owned convolution parameters of one attention instance: kernel
/// `[k, k, K_heads, K_heads]` and per-channel bias `[K_heads]`.
#[derive(Clone, Debug)]
pub struct AttentionConvParams<S: Scalar = f64> {
    pub kernel: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> AttentionConvParams<S> {
    pub fn zeros(k_heads: usize, kernel_size: usize) -> Self {
        Self {
            kernel: Tensor::zeros(vec![kernel_size, kernel_size, k_heads, k_heads]),
            bias: Tensor::zeros(vec![k_heads]),
        }
    }

    /// Identity refinement: center tap routes each channel to itself.
    pub fn delta(k_heads: usize, kernel_size: usize) -> Self {
        let mut p = Self::zeros(k_heads, kernel_size);
        let mid = kernel_size / 2;
        for c in 0..k_heads {
            let idx = ((mid * kernel_size + mid) * k_heads + c) * k_heads + c;
            p.kernel.data_mut()[idx] = S::one();
        }
        p
    }
}

/// Tape handles for one instance's bound convolution parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
}

/// Which kernel taps participate for a mode. `true` = active.
///
/// Decoder self-attention disables taps that would read attention entries up
/// and to the right of the (shifted) output pixel: for 3x3 these are the
/// offsets (-1,0), (-1,+1), (0,+1), leaving the 6-tap receptive field; for
/// 5x5 the rule generalizes to disabling every tap with `dj > 0` or
/// (`di < 0` and `dj >= 0`).
pub fn tap_mask(mode: ConvMode, kernel_size: usize) -> BoolMat {
    let mid = kernel_size as isize / 2;
    match (mode, kernel_size) {
        (ConvMode::DecoderSelf, 3) => BoolMat::from_fn(3, 3, |ti, tj| {
            let (di, dj) = (ti as isize - 1, tj as isize - 1);
            !matches!((di, dj), (-1, 0) | (-1, 1) | (0, 1))
        }),
        (ConvMode::DecoderSelf, k) if k > 1 => BoolMat::from_fn(k, k, |ti, tj| {
            let (di, dj) = (ti as isize - mid, tj as isize - mid);
            !(dj > 0 || (di < 0 && dj >= 0))
        }),
        _ => BoolMat::filled(kernel_size, kernel_size, true),
    }
}

/// Post-convolution translation `(down, right)` for a mode.
pub fn conv_shift(mode: ConvMode, kernel_size: usize) -> (usize, usize) {
    let s = (kernel_size - 1) / 2;
    match mode {
        ConvMode::Encoder => (0, 0),
        ConvMode::DecoderSelf => (s, s),
        ConvMode::EncoderDecoder => (0, s),
    }
}

/// Applies the mode's convolution strategy: masked-tap convolution, ReLU,
/// then the mode's zero-fill shift.
pub fn conv_strategy<S: Scalar>(
    tape: &mut Tape<S>,
    a: Var,
    conv: &ConvVars,
    mode: ConvMode,
    kernel_size: usize,
) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    if mode == ConvMode::DecoderSelf && shape[0] != shape[1] {
        return Err(Error::Contract(format!(
            "decoder self-attention image must be square, got {}x{}",
            shape[0], shape[1]
        )));
    }
    let taps = tap_mask(mode, kernel_size);
    let convolved = tape.conv2d(a, conv.kernel, conv.bias, &taps)?;
    let activated = tape.relu(convolved);
    let (dy, dx) = conv_shift(mode, kernel_size);
    if dy == 0 && dx == 0 {
        Ok(activated)
    } else {
        tape.shift2d(activated, dy, dx)
    }
}

/// Encoder strategy: standard convolution + ReLU, no shift.
pub fn conv_encoder<S: Scalar>(
    tape: &mut Tape<S>,
    a: Var,
    conv: &ConvVars,
    kernel_size: usize,
) -> Result<Var> {
    conv_strategy(tape, a, conv, ConvMode::Encoder, kernel_size)
}

/// Decoder self-attention strategy: upper-right taps masked, ReLU, shift
/// down-right. Output row `q` depends only on input rows `<= q`.
pub fn conv_decoder_self<S: Scalar>(
    tape: &mut Tape<S>,
    a: Var,
    conv: &ConvVars,
    kernel_size: usize,
) -> Result<Var> {
    conv_strategy(tape, a, conv, ConvMode::DecoderSelf, kernel_size)
}

/// Encoder-decoder strategy: full convolution, ReLU, shift right. Output
/// column `s` depends only on input columns `<= s`.
pub fn conv_encoder_decoder<S: Scalar>(
    tape: &mut Tape<S>,
    a: Var,
    conv: &ConvVars,
    kernel_size: usize,
) -> Result<Var> {
    conv_strategy(tape, a, conv, ConvMode::EncoderDecoder, kernel_size)
}

/// Parameters added by one attention instance's convolution:
/// `kernel_size^2 * K_heads^2` weights plus `K_heads` biases.
pub fn conv_param_count(k_heads: usize, kernel_size: usize) -> usize {
    kernel_size * kernel_size * k_heads * k_heads + k_heads
}

/// Everything one evolution step produces.
#[derive(Debug)]
pub struct EvolveOutcome {
    /// The mask-zeroed blend `A_input` — the convolution's input (exported as
    /// the `pre_conv` stage).
    pub pre_conv: Var,
    /// The raw blend `beta * ConvStrategy(A_input) + (1 - beta) * A_input`
    /// (exported as the `post_conv` stage).
    pub post_conv: Var,
    /// The state threaded to softmax and the next block: `post_conv` with
    /// masked positions re-zeroed, restoring the storage convention.
    pub state: AttentionState,
}

/// Applies Eq. 4 for one block.
///
/// `prev` is the previous block's post-convolution state (`None` for the
/// first block, where `alpha` acts as 0). `current` is this block's freshly
/// generated state. `conv` must be `Some` whenever the effective `beta` is
/// nonzero. Blend weights of exactly 0 or 1 pass operands through untouched,
/// so ablation configs are bitwise-exact.
pub fn evolve_logits<S: Scalar>(
    tape: &mut Tape<S>,
    prev: Option<&AttentionState>,
    current: &AttentionState,
    conv: Option<&ConvVars>,
    cfg: &EaConfig,
) -> Result<EvolveOutcome> {
    cfg.validate()?;
    if let Some(p) = prev {
        if tape.shape(p.logits) != tape.shape(current.logits) {
            return Err(Error::Contract(format!(
                "evolve_logits: previous logits {:?} vs current {:?}",
                tape.shape(p.logits),
                tape.shape(current.logits)
            )));
        }
        if p.mask != current.mask {
            return Err(Error::Contract("evolve_logits: mask changed between blocks".into()));
        }
    }
    let mask = &current.mask;

    let alpha = match prev {
        Some(_) => cfg.effective_alpha(),
        None => 0.0,
    };
    let a_input = if alpha == 0.0 {
        current.logits
    } else if alpha == 1.0 {
        prev.expect("alpha > 0 implies prev").logits
    } else {
        let pa = tape.scale(prev.expect("alpha > 0 implies prev").logits, S::from_f64(alpha));
        let ca = tape.scale(current.logits, S::from_f64(1.0 - alpha));
        tape.add(pa, ca)?
    };
    let pre_conv = mask_logits(tape, a_input, mask)?;

    let beta = cfg.effective_beta();
    let post_conv = if beta == 0.0 {
        pre_conv
    } else {
        let conv = conv.ok_or_else(|| {
            Error::Contract("evolve_logits: beta > 0 but no convolution parameters bound".into())
        })?;
        let refined = conv_strategy(tape, pre_conv, conv, cfg.mode, cfg.kernel_size)?;
        if beta == 1.0 {
            refined
        } else {
            let rb = tape.scale(refined, S::from_f64(beta));
            let pb = tape.scale(pre_conv, S::from_f64(1.0 - beta));
            tape.add(rb, pb)?
        }
    };

    let state_logits = if beta == 0.0 {
        // post_conv == pre_conv, already zero at masked positions.
        post_conv
    } else {
        mask_logits(tape, post_conv, mask)?
    };
    Ok(EvolveOutcome {
        pre_conv,
        post_conv,
        state: AttentionState { logits: state_logits, mask: mask.clone() },
    })
}
