//! Attention-map generation: projections, scaled dot-product logits,
//! positional encodings, masks, and masked row-softmax.
//!
//! An attention instance produces an `[N_q, N_k, K_heads]` logit tensor — the
//! "K-channel attention image" that the evolving-attention module convolves.
//! Masking is carried as a separate boolean matrix (`true` = forbidden), never
//! as -inf sentinels inside the logits: the convolution stage must see clean
//! zeros at masked positions. Logits at masked positions are stored as 0 and
//! excluded only at softmax time.

use serde::{Deserialize, Serialize};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{BoolMat, Tensor};

/// Positional encoding mode for one attention stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosMode {
    None,
    /// Sinusoidal table added to embeddings at the stack input.
    Absolute,
    /// Learned per-offset bias added to the logits (sequences).
    Relative1d,
    /// Learned per-(row, column)-offset bias added to the logits (images).
    Relative2d,
}

/// Positional-encoding parameters for one attention instance.
///
/// The embedding tables are owned here as plain tensors and bound onto a tape
/// per forward pass. Relative indices are clipped to `[-r_max, r_max]`; tables
/// have `2*r_max + 1` rows with row 0 holding offset `-r_max`.
#[derive(Clone, Debug)]
pub struct PositionalEncoding<S: Scalar = f64> {
    pub mode: PosMode,
    pub e_rel: Option<Tensor<S>>,
    pub e_h: Option<Tensor<S>>,
    pub e_w: Option<Tensor<S>>,
    pub r_max: usize,
}

impl<S: Scalar> PositionalEncoding<S> {
    pub fn none() -> Self {
        Self { mode: PosMode::None, e_rel: None, e_h: None, e_w: None, r_max: 0 }
    }

    pub fn absolute() -> Self {
        Self { mode: PosMode::Absolute, e_rel: None, e_h: None, e_w: None, r_max: 0 }
    }
}

/// One attention instance's pre-softmax state on a tape.
///
/// `logits` is `[N_q, N_k, K_heads]`; `mask` is shared across heads. The
/// logits are finite everywhere and exactly 0 at masked positions.
#[derive(Clone, Debug)]
pub struct AttentionState {
    pub logits: Var,
    pub mask: BoolMat,
}

/// Bound tape handles for the positional-encoding tables of one instance.
#[derive(Clone, Copy, Debug, Default)]
pub struct PosVars {
    pub e_rel: Option<Var>,
    pub e_h: Option<Var>,
    pub e_w: Option<Var>,
}

/// Strictly-upper-triangular mask: position `(i, j)` is forbidden iff `j > i`.
pub fn build_causal_mask(n: usize) -> BoolMat {
    BoolMat::from_fn(n, n, |i, j| j > i)
}

/// All-permitted mask.
pub fn no_mask(n_q: usize, n_k: usize) -> BoolMat {
    BoolMat::filled(n_q, n_k, false)
}

/// Sinusoidal absolute positional table `[n, c]`:
/// `PE[pos, 2i] = sin(pos / 10000^(2i/c))`, `PE[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_table<S: Scalar>(n: usize, c: usize) -> Tensor<S> {
    Tensor::from_fn(vec![n, c], |idx| {
        let (pos, j) = (idx[0], idx[1]);
        let pair = (j / 2) * 2;
        let angle = pos as f64 / 10000f64.powf(pair as f64 / c as f64);
        S::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Projects `[N, C]` features into head-major `[N, K_heads, d]` slices; head
/// `k` owns columns `[k*d, (k+1)*d)` of the projection.
pub fn project_heads<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    w: Var,
    heads: usize,
) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let sw = tape.shape(w).to_vec();
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] {
        return Err(Error::Dimension(format!("project_heads: x {:?} vs w {:?}", sx, sw)));
    }
    if heads == 0 || !sw[1].is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "project_heads: width {} not divisible by {} heads",
            sw[1], heads
        )));
    }
    let n = sx[0];
    let d = sw[1] / heads;
    let flat = tape.matmul(x, w)?;
    tape.reshape(flat, vec![n, heads, d])
}

/// Scaled dot-product logits `[N_q, N_k, K_heads]` from head-major Q and K.
pub fn scaled_dot_product_logits<S: Scalar>(tape: &mut Tape<S>, q: Var, k: Var) -> Result<Var> {
    tape.attn_logits(q, k)
}

/// 1D relative bias `R[i,j,h] = q_i^{(h)} . e_{clip(i-j)}` added to logits.
pub fn relative_bias_1d<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    e_rel: Var,
    r_max: usize,
) -> Result<Var> {
    tape.rel_bias_1d(q, e_rel, r_max)
}

/// 2D relative bias for a row-major `grid_h x grid_w` token grid:
/// `R[i,j,h] = q_i . e_h[clip(row(j)-row(i))] + q_i . e_w[clip(col(j)-col(i))]`.
pub fn relative_bias_2d<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    e_h: Var,
    e_w: Var,
    r_max: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<Var> {
    tape.rel_bias_2d(q, e_h, e_w, r_max, grid_h, grid_w)
}

/// Raw attention logits for one instance: scaled dot products plus the
/// configured relative bias, then zeroed at masked positions (the storage
/// convention for [`AttentionState`]).
///
/// `grid` must be provided for [`PosMode::Relative2d`].
#[allow(clippy::too_many_arguments)] // q/k plus every positional input, spelled out
pub fn attention_logits<S: Scalar>(
    tape: &mut Tape<S>,
    q: Var,
    k: Var,
    mode: PosMode,
    r_max: usize,
    pos_vars: &PosVars,
    grid: Option<(usize, usize)>,
    mask: &BoolMat,
) -> Result<AttentionState> {
    let mut logits = scaled_dot_product_logits(tape, q, k)?;
    match mode {
        PosMode::None | PosMode::Absolute => {}
        PosMode::Relative1d => {
            let e = pos_vars
                .e_rel
                .ok_or_else(|| Error::Config("relative_1d mode without e_rel".into()))?;
            let bias = relative_bias_1d(tape, q, e, r_max)?;
            logits = tape.add(logits, bias)?;
        }
        PosMode::Relative2d => {
            let (gh, gw) =
                grid.ok_or_else(|| Error::Config("relative_2d mode needs a token grid".into()))?;
            let (e_h, e_w) = match (pos_vars.e_h, pos_vars.e_w) {
                (Some(h), Some(w)) => (h, w),
                _ => return Err(Error::Config("relative_2d mode without e_h/e_w".into())),
            };
            let bias = relative_bias_2d(tape, q, e_h, e_w, r_max, gh, gw)?;
            logits = tape.add(logits, bias)?;
        }
    }
    let logits = mask_logits(tape, logits, mask)?;
    Ok(AttentionState { logits, mask: mask.clone() })
}

/// Zeroes logits at masked positions (no-op for an all-permitted mask).
pub fn mask_logits<S: Scalar>(tape: &mut Tape<S>, logits: Var, mask: &BoolMat) -> Result<Var> {
    if mask.count_true() == 0 {
        return Ok(logits);
    }
    tape.mask_zero(logits, mask)
}

/// Row-softmax over an attention state; masked entries get probability
/// exactly 0 and rows must contain at least one permitted position.
pub fn masked_row_softmax<S: Scalar>(tape: &mut Tape<S>, state: &AttentionState) -> Result<Var> {
    tape.masked_softmax(state.logits, &state.mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::TestRng;

    #[test]
    fn causal_mask_shapes_and_counts() {
        let m1 = build_causal_mask(1);
        assert!(!m1.get(0, 0));
        let m3 = build_causal_mask(3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(m3.get(i, j), j > i, "({}, {})", i, j);
            }
        }
        // Strict upper triangle of an NxN matrix has N(N-1)/2 entries.
        for n in [2usize, 5, 9] {
            assert_eq!(build_causal_mask(n).count_true(), n * (n - 1) / 2);
        }
    }

    #[test]
    fn sinusoidal_row_zero_alternates_sin_cos() {
        let t: Tensor<f64> = sinusoidal_table(4, 6);
        for j in 0..6 {
            let want = if j % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(t.data()[j], want, "dim {}", j);
        }
        // First dimension oscillates as sin(pos).
        for pos in 0..4 {
            assert!((t.data()[pos * 6] - (pos as f64).sin()).abs() < 1e-15);
        }
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn project_heads_slices_head_major() {
        // Identity input and projection: head h of token i holds columns
        // [h*d, (h+1)*d) of row i.
        let eye = Tensor::<f64>::from_fn(vec![4, 4], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
        let mut tape: Tape = Tape::new();
        let x = tape.leaf(eye.clone());
        let w = tape.leaf(eye);
        let q = project_heads(&mut tape, x, w, 2).unwrap();
        assert_eq!(tape.shape(q), &[4, 2, 2]);
        for i in 0..4 {
            for h in 0..2 {
                for t in 0..2 {
                    let want = if h * 2 + t == i { 1.0 } else { 0.0 };
                    assert_eq!(tape.value(q).data()[(i * 2 + h) * 2 + t], want);
                }
            }
        }
    }

    #[test]
    fn project_heads_zero_weights_zero_output() {
        let mut rng = TestRng::new(101);
        let x: Tensor<f64> = rng.tensor(vec![3, 4], -1.0, 1.0);
        let mut tape: Tape = Tape::new();
        let xv = tape.leaf(x);
        let w = tape.leaf(Tensor::zeros(vec![4, 4]));
        let q = project_heads(&mut tape, xv, w, 2).unwrap();
        assert!(tape.value(q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn project_heads_matches_slice_oracle() {
        let mut rng = TestRng::new(103);
        let x: Tensor<f64> = rng.tensor(vec![3, 4], -1.0, 1.0);
        let w: Tensor<f64> = rng.tensor(vec![4, 6], -1.0, 1.0);
        let mut tape: Tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w.clone());
        let q = project_heads(&mut tape, xv, wv, 3).unwrap();
        // Brute-force: full matmul then explicit column slicing per head.
        for i in 0..3 {
            for h in 0..3 {
                for t in 0..2 {
                    let col = h * 2 + t;
                    let mut want = 0.0;
                    for c in 0..4 {
                        want += x.data()[i * 4 + c] * w.data()[c * 6 + col];
                    }
                    let got = tape.value(q).data()[(i * 3 + h) * 2 + t];
                    assert!((got - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn identity_queries_give_identity_structure() {
        // Q = K = I as head-major [2,1,2]: logits = I / sqrt(2).
        let eye = Tensor::<f64>::from_fn(vec![2, 1, 2], |ix| if ix[0] == ix[2] { 1.0 } else { 0.0 });
        let mut tape: Tape = Tape::new();
        let q = tape.leaf(eye.clone());
        let k = tape.leaf(eye);
        let l = scaled_dot_product_logits(&mut tape, q, k).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_eq!(tape.value(l).data(), &[s, 0.0, 0.0, s]);
    }

    #[test]
    fn logits_match_double_loop_oracle() {
        let mut rng = TestRng::new(107);
        let q: Tensor<f64> = rng.tensor(vec![3, 2, 4], -1.0, 1.0);
        let k: Tensor<f64> = rng.tensor(vec![3, 2, 4], -1.0, 1.0);
        let mut tape: Tape = Tape::new();
        let qv = tape.leaf(q.clone());
        let kv = tape.leaf(k.clone());
        let l = scaled_dot_product_logits(&mut tape, qv, kv).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for h in 0..2 {
                    let mut dot = 0.0;
                    for t in 0..4 {
                        dot += q.data()[(i * 2 + h) * 4 + t] * k.data()[(j * 2 + h) * 4 + t];
                    }
                    let want = dot / 2.0;
                    let got = tape.value(l).data()[(i * 3 + j) * 2 + h];
                    assert!((got - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn logits_are_bilinear_in_q() {
        let mut rng = TestRng::new(109);
        let q: Tensor<f64> = rng.tensor(vec![3, 1, 4], -1.0, 1.0);
        let k: Tensor<f64> = rng.tensor(vec![3, 1, 4], -1.0, 1.0);
        let c = 2.5;
        let scaled = Tensor::new(vec![3, 1, 4], q.data().iter().map(|&v| v * c).collect()).unwrap();
        let mut t1: Tape = Tape::new();
        let (q1, k1) = (t1.leaf(q), t1.leaf(k.clone()));
        let l1 = scaled_dot_product_logits(&mut t1, q1, k1).unwrap();
        let mut t2: Tape = Tape::new();
        let (q2, k2) = (t2.leaf(scaled), t2.leaf(k));
        let l2 = scaled_dot_product_logits(&mut t2, q2, k2).unwrap();
        for (a, b) in t1.value(l1).data().iter().zip(t2.value(l2).data()) {
            assert!((a * c - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relative_bias_clipping_is_idempotent() {
        // Offsets beyond +-r_max hit the same clamped row: with n much larger
        // than r_max, distant pairs share the edge row's bias.
        let mut rng = TestRng::new(113);
        let q: Tensor<f64> = rng.tensor(vec![6, 1, 3], -1.0, 1.0);
        let e: Tensor<f64> = rng.tensor(vec![5, 3], -1.0, 1.0); // r_max = 2
        let mut tape: Tape = Tape::new();
        let qv = tape.leaf(q);
        let ev = tape.leaf(e);
        let b = relative_bias_1d(&mut tape, qv, ev, 2).unwrap();
        let d = tape.value(b).data();
        // Row 5: offsets to columns 0..=3 are 5,4,3,2 — all clip to +2.
        for j in 0..4 {
            assert_eq!(d[(5 * 6 + j) * 1], d[(5 * 6 + 3) * 1], "col {}", j);
        }
        // Row 0: offsets to columns 2..=5 are -2..-5 — all clip to -2.
        for j in 2..6 {
            assert_eq!(d[(0 * 6 + j) * 1], d[(0 * 6 + 2) * 1], "col {}", j);
        }
    }

    #[test]
    fn relative_bias_zero_embeddings_give_zero() {
        let mut rng = TestRng::new(127);
        let q: Tensor<f64> = rng.tensor(vec![4, 2, 3], -1.0, 1.0);
        let mut tape: Tape = Tape::new();
        let qv = tape.leaf(q);
        let ev = tape.leaf(Tensor::zeros(vec![9, 3]));
        let b = relative_bias_1d(&mut tape, qv, ev, 4).unwrap();
        assert!(tape.value(b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_bias_1d_matches_double_loop_oracle() {
        let mut rng = TestRng::new(131);
        let q: Tensor<f64> = rng.tensor(vec![4, 1, 2], -1.0, 1.0);
        let e: Tensor<f64> = rng.tensor(vec![5, 2], -1.0, 1.0); // r_max = 2
        let mut tape: Tape = Tape::new();
        let qv = tape.leaf(q.clone());
        let ev = tape.leaf(e.clone());
        let b = relative_bias_1d(&mut tape, qv, ev, 2).unwrap();
        for i in 0..4i64 {
            for j in 0..4i64 {
                let off = (i - j).clamp(-2, 2) + 2;
                let mut want = 0.0;
                for t in 0..2 {
                    want += q.data()[(i as usize * 1) * 2 + t] * e.data()[off as usize * 2 + t];
                }
                let got = tape.value(b).data()[(i as usize * 4 + j as usize) * 1];
                assert!((got - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn relative_bias_2d_degenerates_to_1d_on_one_row_grid() {
        // On a 1xN grid the height offset is always 0, so with e_h = 0 the 2D
        // bias reduces to a width-only lookup. The 2D rule indexes by j-i
        // (key minus query) while the 1D rule uses i-j, so the 1D table must
        // be the row-reversed width table for the two to agree.
        let n = 5;
        let r = 4; // no clipping at this length
        let mut rng = TestRng::new(137);
        let q: Tensor<f64> = rng.tensor(vec![n, 1, 3], -1.0, 1.0);
        let e_w: Tensor<f64> = rng.tensor(vec![2 * r + 1, 3], -1.0, 1.0);
        let flipped = Tensor::from_fn(vec![2 * r + 1, 3], |ix| {
            e_w.data()[(2 * r - ix[0]) * 3 + ix[1]]
        });
        let mut t2: Tape = Tape::new();
        let q2 = t2.leaf(q.clone());
        let eh = t2.leaf(Tensor::zeros(vec![2 * r + 1, 3]));
        let ew = t2.leaf(e_w);
        let b2 = relative_bias_2d(&mut t2, q2, eh, ew, r, 1, n).unwrap();
        let mut t1: Tape = Tape::new();
        let q1 = t1.leaf(q);
        let ef = t1.leaf(flipped);
        let b1 = relative_bias_1d(&mut t1, q1, ef, r).unwrap();
        assert_eq!(t2.value(b2).data(), t1.value(b1).data());
    }

    #[test]
    fn relative_bias_2d_matches_pixel_pair_oracle() {
        let (gh, gw, d) = (2usize, 3usize, 2usize);
        let n = gh * gw;
        let r = 2usize;
        let mut rng = TestRng::new(139);
        let q: Tensor<f64> = rng.tensor(vec![n, 1, d], -1.0, 1.0);
        let e_h: Tensor<f64> = rng.tensor(vec![2 * r + 1, d], -1.0, 1.0);
        let e_w: Tensor<f64> = rng.tensor(vec![2 * r + 1, d], -1.0, 1.0);
        let mut tape: Tape = Tape::new();
        let qv = tape.leaf(q.clone());
        let ehv = tape.leaf(e_h.clone());
        let ewv = tape.leaf(e_w.clone());
        let b = relative_bias_2d(&mut tape, qv, ehv, ewv, r, gh, gw).unwrap();
        for i in 0..n {
            for j in 0..n {
                let dr = ((j / gw) as i64 - (i / gw) as i64).clamp(-(r as i64), r as i64);
                let dc = ((j % gw) as i64 - (i % gw) as i64).clamp(-(r as i64), r as i64);
                let (hr, wr) = ((dr + r as i64) as usize, (dc + r as i64) as usize);
                let mut want = 0.0;
                for t in 0..d {
                    want += q.data()[i * d + t] * (e_h.data()[hr * d + t] + e_w.data()[wr * d + t]);
                }
                let got = tape.value(b).data()[(i * n + j) * 1];
                assert!((got - want).abs() < 1e-14, "({}, {})", i, j);
            }
        }
    }

    #[test]
    fn softmax_uniform_logits_uniform_rows() {
        let mut tape: Tape = Tape::new();
        let logits = tape.leaf(Tensor::full(vec![2, 3, 1], 0.7));
        let state = AttentionState { logits, mask: no_mask(2, 3) };
        let p = masked_row_softmax(&mut tape, &state).unwrap();
        for &v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_permitted_column_gets_probability_one() {
        let mut rng = TestRng::new(149);
        let logits: Tensor<f64> = rng.tensor(vec![3, 4, 2], -2.0, 2.0);
        let mut mask = BoolMat::filled(3, 4, true);
        for i in 0..3 {
            mask.set(i, 1, false);
        }
        let mut tape: Tape = Tape::new();
        let lv = tape.leaf(logits);
        let state = AttentionState { logits: lv, mask };
        let p = masked_row_softmax(&mut tape, &state).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                for h in 0..2 {
                    let got = tape.value(p).data()[(i * 4 + j) * 2 + h];
                    assert_eq!(got, if j == 1 { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant_per_row() {
        let mut rng = TestRng::new(151);
        let logits: Tensor<f64> = rng.tensor(vec![2, 4, 1], -1.0, 1.0);
        let shifted = Tensor::from_fn(vec![2, 4, 1], |ix| {
            logits.data()[(ix[0] * 4 + ix[1]) * 1] + if ix[0] == 0 { 3.25 } else { -7.5 }
        });
        let mask = {
            let mut m = no_mask(2, 4);
            m.set(0, 3, true);
            m
        };
        let mut t1: Tape = Tape::new();
        let l1 = t1.leaf(logits);
        let p1 = masked_row_softmax(&mut t1, &AttentionState { logits: l1, mask: mask.clone() }).unwrap();
        let mut t2: Tape = Tape::new();
        let l2 = t2.leaf(shifted);
        let p2 = masked_row_softmax(&mut t2, &AttentionState { logits: l2, mask }).unwrap();
        for (a, b) in t1.value(p1).data().iter().zip(t2.value(p2).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_logits_store_zero_at_masked_positions() {
        let mut rng = TestRng::new(157);
        let q: Tensor<f64> = rng.tensor(vec![3, 2, 2], -1.0, 1.0);
        let k: Tensor<f64> = rng.tensor(vec![3, 2, 2], -1.0, 1.0);
        let mask = build_causal_mask(3);
        let mut tape: Tape = Tape::new();
        let qv = tape.leaf(q);
        let kv = tape.leaf(k);
        let state = attention_logits(
            &mut tape,
            qv,
            kv,
            PosMode::None,
            0,
            &PosVars::default(),
            None,
            &mask,
        )
        .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for h in 0..2 {
                    let v = tape.value(state.logits).data()[(i * 3 + j) * 2 + h];
                    if j > i {
                        assert_eq!(v, 0.0, "masked ({}, {})", i, j);
                    } else {
                        assert!(v.is_finite());
                    }
                }
            }
        }
    }
}
