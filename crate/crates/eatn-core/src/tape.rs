//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive operation of one forward pass in
//! topological order; [`Tape::backward`] replays the records in reverse and
//! accumulates gradients for every node. The tape is rebuilt each forward
//! pass and is confined to one thread; parallelism happens across tapes.
//!
//! Gradient conventions baked in here:
//! * ReLU subgradient at exactly 0 is 0.
//! * Disabled convolution taps contribute nothing forward and receive a
//!   bitwise-zero gradient.
//! * Masked softmax entries get probability exactly 0 and propagate exactly
//!   zero gradient.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BoolMat, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: S },
    Relu { a: Var },
    Matmul { a: Var, b: Var },
    Reshape { a: Var },
    Gather { table: Var, ids: Vec<usize> },
    Conv2d { input: Var, kernel: Var, bias: Var, taps: BoolMat },
    Shift2d { a: Var, dy: usize, dx: usize },
    MaskZero { a: Var, mask: BoolMat },
    AttnLogits { q: Var, k: Var },
    RelBias1d { q: Var, e: Var, r_max: usize },
    RelBias2d { q: Var, e_h: Var, e_w: Var, r_max: usize, grid_h: usize, grid_w: usize },
    MaskedSoftmax { a: Var, mask: BoolMat },
    AttnApply { a: Var, v: Var, heads: usize },
    LayerNorm { x: Var, gamma: Var, offset: Var, mean: Vec<S>, inv_std: Vec<S> },
    MeanRows { a: Var },
    Sum { a: Var },
    CrossEntropyLs { logits: Var, probs: Vec<S>, smooth: Vec<S>, active: Vec<bool>, n_active: usize },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    op: Op<S>,
}

/// Layer-norm variance floor.
const LN_EPS: f64 = 1e-5;

pub struct Tape<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tracked input (parameter or data) on the tape.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Tensor<S> {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad shape mirrors value"),
            None => Tensor::zeros(value.shape().to_vec()),
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- elementwise ----

    /// Pointwise sum. `b` may have a shape that is a suffix of `a`'s (it is
    /// broadcast over the leading dimensions) or be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        broadcast_check("add", &sa, &sb)?;
        let bn = self.nodes[b.0].value.numel().max(1);
        let data: Vec<S> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.nodes[b.0].value.data()[i % bn])
            .collect();
        let value = Tensor::new(sa, data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!("sub: {:?} vs {:?}", sa, sb)));
        }
        let data: Vec<S> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!("mul: {:?} vs {:?}", sa, sb)));
        }
        let data: Vec<S> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Multiplies every element by the untracked constant `c`.
    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.nodes[a.0].value.data().iter().map(|&x| x * c).collect(),
        )
        .expect("same shape");
        self.push(value, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = Tensor::new(
            self.shape(a).to_vec(),
            self.nodes[a.0]
                .value
                .data()
                .iter()
                .map(|&x| if x > S::zero() { x } else { S::zero() })
                .collect(),
        )
        .expect("same shape");
        self.push(value, Op::Relu { a })
    }

    // ---- linear algebra ----

    /// Matrix product with optional leading batch dimensions. Either operand
    /// may omit the batch dimensions entirely (it is then shared across the
    /// batch); otherwise the leading dimensions must match.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Dimension(format!("matmul needs rank>=2: {:?} x {:?}", sa, sb)));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(Error::Dimension(format!("matmul inner dims: {:?} x {:?}", sa, sb)));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch_shape: Vec<usize> = if ba == bb {
            ba.to_vec()
        } else if ba.is_empty() {
            bb.to_vec()
        } else if bb.is_empty() {
            ba.to_vec()
        } else {
            return Err(Error::Dimension(format!("matmul batch dims: {:?} x {:?}", sa, sb)));
        };
        let batch: usize = batch_shape.iter().product();
        let a_step = if ba.is_empty() { 0 } else { m * ka };
        let b_step = if bb.is_empty() { 0 } else { kb * n };

        let mut out = vec![S::zero(); batch * m * n];
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            for t in 0..batch {
                mm_acc(
                    &ad[t * a_step..t * a_step + m * ka],
                    &bd[t * b_step..t * b_step + ka * n],
                    m,
                    ka,
                    n,
                    &mut out[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let mut shape = batch_shape;
        shape.push(m);
        shape.push(n);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    /// Same data viewed under a new shape.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.reshaped(shape)?;
        Ok(self.push(value, Op::Reshape { a }))
    }

    /// Row lookup: `out[i, :] = table[ids[i], :]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::Dimension(format!("gather table must be rank 2, got {:?}", st)));
        }
        let (rows, cols) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Input(format!("token id {} out of vocabulary (size {})", bad, rows)));
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            out.extend_from_slice(&self.nodes[table.0].value.data()[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        Ok(self.push(value, Op::Gather { table, ids: ids.to_vec() }))
    }

    // ---- convolution over images ----

    /// Same-padded 2D convolution with a boolean tap mask.
    ///
    /// `input` is `[H, W, C_in]`, `kernel` is `[kh, kw, C_in, C_out]` with odd
    /// spatial dims, `bias` is `[C_out]`. A tap with `taps[di,dj] == false`
    /// contributes nothing and its kernel entries receive zero gradient.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, taps: &BoolMat) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let sb = self.shape(bias).to_vec();
        if si.len() != 3 || sk.len() != 4 || sb.len() != 1 {
            return Err(Error::Dimension(format!(
                "conv2d expects input [H,W,Cin], kernel [kh,kw,Cin,Cout], bias [Cout]; got {:?}, {:?}, {:?}",
                si, sk, sb
            )));
        }
        let (h, w, c_in) = (si[0], si[1], si[2]);
        let (kh, kw, kc_in, c_out) = (sk[0], sk[1], sk[2], sk[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel dims must be odd, got {}x{}", kh, kw)));
        }
        if kc_in != c_in || sb[0] != c_out {
            return Err(Error::Dimension(format!(
                "conv2d channels: input {:?} kernel {:?} bias {:?}",
                si, sk, sb
            )));
        }
        if taps.rows() != kh || taps.cols() != kw {
            return Err(Error::Dimension(format!(
                "tap mask {}x{} for {}x{} kernel",
                taps.rows(),
                taps.cols(),
                kh,
                kw
            )));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let mut out = vec![S::zero(); h * w * c_out];
        {
            let ind = self.nodes[input.0].value.data();
            let kerd = self.nodes[kernel.0].value.data();
            let biasd = self.nodes[bias.0].value.data();
            for i in 0..h {
                for j in 0..w {
                    for o in 0..c_out {
                        let mut acc = biasd[o];
                        for ti in 0..kh {
                            for tj in 0..kw {
                                if !taps.get(ti, tj) {
                                    continue;
                                }
                                let ii = i as isize + ti as isize - ph as isize;
                                let jj = j as isize + tj as isize - pw as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                let (ii, jj) = (ii as usize, jj as usize);
                                for c in 0..c_in {
                                    acc += ind[(ii * w + jj) * c_in + c]
                                        * kerd[((ti * kw + tj) * c_in + c) * c_out + o];
                                }
                            }
                        }
                        out[(i * w + j) * c_out + o] = acc;
                    }
                }
            }
        }
        let value = Tensor::new(vec![h, w, c_out], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, taps: taps.clone() }))
    }

    /// Translates an `[H, W, C]` image `dy` rows down and `dx` columns right,
    /// zero-filling the vacated border.
    pub fn shift2d(&mut self, a: Var, dy: usize, dx: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!("shift2d expects [H,W,C], got {:?}", s)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut out = vec![S::zero(); h * w * c];
        {
            let ad = self.nodes[a.0].value.data();
            for i in dy..h {
                for j in dx..w {
                    for ch in 0..c {
                        out[(i * w + j) * c + ch] = ad[((i - dy) * w + (j - dx)) * c + ch];
                    }
                }
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::Shift2d { a, dy, dx }))
    }

    /// Zeroes every channel of positions where `mask` is true.
    pub fn mask_zero(&mut self, a: Var, mask: &BoolMat) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[0] != mask.rows() || s[1] != mask.cols() {
            return Err(Error::Dimension(format!(
                "mask_zero: tensor {:?} vs mask {}x{}",
                s,
                mask.rows(),
                mask.cols()
            )));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let mut out = self.nodes[a.0].value.data().to_vec();
        for i in 0..h {
            for j in 0..w {
                if mask.get(i, j) {
                    for ch in 0..c {
                        out[(i * w + j) * c + ch] = S::zero();
                    }
                }
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::MaskZero { a, mask: mask.clone() }))
    }

    // ---- attention primitives ----

    /// Scaled dot-product logits across heads.
    ///
    /// `q` and `k` are `[N, heads, d]`; the result is `[N_q, N_k, heads]` with
    /// `out[i,j,h] = q[i,h,:].k[j,h,:] / sqrt(d)`.
    pub fn attn_logits(&mut self, q: Var, k: Var) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sk = self.shape(k).to_vec();
        if sq.len() != 3 || sk.len() != 3 || sq[1] != sk[1] || sq[2] != sk[2] {
            return Err(Error::Dimension(format!("attn_logits: q {:?} vs k {:?}", sq, sk)));
        }
        let (nq, heads, d) = (sq[0], sq[1], sq[2]);
        let nk = sk[0];
        if d == 0 {
            return Err(Error::Config("attn_logits: head dimension must be positive".into()));
        }
        let inv_sqrt_d = S::one() / S::from_f64(d as f64).sqrt();
        let mut out = vec![S::zero(); nq * nk * heads];
        {
            let qd = self.nodes[q.0].value.data();
            let kd = self.nodes[k.0].value.data();
            for i in 0..nq {
                for j in 0..nk {
                    for h in 0..heads {
                        let mut acc = S::zero();
                        for t in 0..d {
                            acc += qd[(i * heads + h) * d + t] * kd[(j * heads + h) * d + t];
                        }
                        out[(i * nk + j) * heads + h] = acc * inv_sqrt_d;
                    }
                }
            }
        }
        let value = Tensor::new(vec![nq, nk, heads], out)?;
        Ok(self.push(value, Op::AttnLogits { q, k }))
    }

    /// Relative positional bias for sequences: `out[i,j,h] = q[i,h,:].e[clip(i-j),:]`
    /// where the relative index is clamped to `[-r_max, r_max]` and `e` has
    /// `2*r_max+1` rows (row 0 = offset `-r_max`).
    pub fn rel_bias_1d(&mut self, q: Var, e: Var, r_max: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let se = self.shape(e).to_vec();
        if sq.len() != 3 || se.len() != 2 || se[1] != sq[2] {
            return Err(Error::Dimension(format!("rel_bias_1d: q {:?} vs e {:?}", sq, se)));
        }
        if se[0] != 2 * r_max + 1 {
            return Err(Error::Config(format!(
                "rel_bias_1d: embedding has {} rows, expected {} for r_max {}",
                se[0],
                2 * r_max + 1,
                r_max
            )));
        }
        let (n, heads, d) = (sq[0], sq[1], sq[2]);
        let mut out = vec![S::zero(); n * n * heads];
        {
            let qd = self.nodes[q.0].value.data();
            let ed = self.nodes[e.0].value.data();
            for i in 0..n {
                for j in 0..n {
                    let row = clip_rel(i as isize - j as isize, r_max);
                    for h in 0..heads {
                        let mut acc = S::zero();
                        for t in 0..d {
                            acc += qd[(i * heads + h) * d + t] * ed[row * d + t];
                        }
                        out[(i * n + j) * heads + h] = acc;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, n, heads], out)?;
        Ok(self.push(value, Op::RelBias1d { q, e, r_max }))
    }

    /// Relative positional bias for a flattened `grid_h x grid_w` image in
    /// row-major pixel order:
    /// `out[i,j,h] = q[i,h,:].e_h[clip(row(j)-row(i)),:] + q[i,h,:].e_w[clip(col(j)-col(i)),:]`.
    pub fn rel_bias_2d(
        &mut self,
        q: Var,
        e_h: Var,
        e_w: Var,
        r_max: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        let sh = self.shape(e_h).to_vec();
        let sw = self.shape(e_w).to_vec();
        let (n, heads, d) = (sq[0], sq[1], sq[2]);
        if sq.len() != 3 || sh.len() != 2 || sw.len() != 2 || sh[1] != d || sw[1] != d {
            return Err(Error::Dimension(format!(
                "rel_bias_2d: q {:?}, e_h {:?}, e_w {:?}",
                sq, sh, sw
            )));
        }
        if grid_h * grid_w != n {
            return Err(Error::Dimension(format!(
                "rel_bias_2d: grid {}x{} does not cover {} tokens",
                grid_h, grid_w, n
            )));
        }
        let rows = 2 * r_max + 1;
        if sh[0] != rows || sw[0] != rows {
            return Err(Error::Config(format!(
                "rel_bias_2d: embeddings must have {} rows for r_max {}",
                rows, r_max
            )));
        }
        let mut out = vec![S::zero(); n * n * heads];
        {
            let qd = self.nodes[q.0].value.data();
            let ehd = self.nodes[e_h.0].value.data();
            let ewd = self.nodes[e_w.0].value.data();
            for i in 0..n {
                let (ri, ci) = ((i / grid_w) as isize, (i % grid_w) as isize);
                for j in 0..n {
                    let (rj, cj) = ((j / grid_w) as isize, (j % grid_w) as isize);
                    let hr = clip_rel(rj - ri, r_max);
                    let wr = clip_rel(cj - ci, r_max);
                    for h in 0..heads {
                        let mut acc = S::zero();
                        for t in 0..d {
                            acc += qd[(i * heads + h) * d + t] * (ehd[hr * d + t] + ewd[wr * d + t]);
                        }
                        out[(i * n + j) * heads + h] = acc;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, n, heads], out)?;
        Ok(self.push(value, Op::RelBias2d { q, e_h, e_w, r_max, grid_h, grid_w }))
    }

    /// Row softmax over `[N_q, N_k, heads]` logits with a shared boolean mask
    /// (`true` = forbidden). Masked entries get probability exactly 0; each
    /// unmasked row is stabilized by max subtraction.
    pub fn masked_softmax(&mut self, a: Var, mask: &BoolMat) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[0] != mask.rows() || s[1] != mask.cols() {
            return Err(Error::Dimension(format!(
                "masked_softmax: logits {:?} vs mask {}x{}",
                s,
                mask.rows(),
                mask.cols()
            )));
        }
        let (nq, nk, heads) = (s[0], s[1], s[2]);
        for i in 0..nq {
            if (0..nk).all(|j| mask.get(i, j)) {
                return Err(Error::Contract(format!("masked_softmax: row {} is fully masked", i)));
            }
        }
        let mut out = vec![S::zero(); nq * nk * heads];
        {
            let ad = self.nodes[a.0].value.data();
            for i in 0..nq {
                for h in 0..heads {
                    let mut m = S::neg_infinity();
                    for j in 0..nk {
                        if !mask.get(i, j) {
                            m = m.max(ad[(i * nk + j) * heads + h]);
                        }
                    }
                    let mut z = S::zero();
                    for j in 0..nk {
                        if !mask.get(i, j) {
                            let e = (ad[(i * nk + j) * heads + h] - m).exp();
                            out[(i * nk + j) * heads + h] = e;
                            z += e;
                        }
                    }
                    for j in 0..nk {
                        if !mask.get(i, j) {
                            out[(i * nk + j) * heads + h] /= z;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(s, out)?;
        Ok(self.push(value, Op::MaskedSoftmax { a, mask: mask.clone() }))
    }

    /// Applies attention maps to per-head value slices:
    /// `out[i, h*d+t] = sum_j a[i,j,h] * v[j, h*d+t]`.
    pub fn attn_apply(&mut self, a: Var, v: Var, heads: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sv = self.shape(v).to_vec();
        if sa.len() != 3 || sv.len() != 2 || sa[2] != heads || sv[0] != sa[1] {
            return Err(Error::Dimension(format!(
                "attn_apply: maps {:?} vs values {:?} ({} heads)",
                sa, sv, heads
            )));
        }
        if !sv[1].is_multiple_of(heads) {
            return Err(Error::Dimension(format!(
                "attn_apply: value width {} not divisible by {} heads",
                sv[1], heads
            )));
        }
        let (nq, nk) = (sa[0], sa[1]);
        let d = sv[1] / heads;
        let mut out = vec![S::zero(); nq * heads * d];
        {
            let ad = self.nodes[a.0].value.data();
            let vd = self.nodes[v.0].value.data();
            for i in 0..nq {
                for h in 0..heads {
                    for t in 0..d {
                        let mut acc = S::zero();
                        for j in 0..nk {
                            acc += ad[(i * nk + j) * heads + h] * vd[j * heads * d + h * d + t];
                        }
                        out[i * heads * d + h * d + t] = acc;
                    }
                }
            }
        }
        let value = Tensor::new(vec![nq, heads * d], out)?;
        Ok(self.push(value, Op::AttnApply { a, v, heads }))
    }

    /// Per-row layer normalization with learned per-feature scale and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, offset: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sg = self.shape(gamma).to_vec();
        let so = self.shape(offset).to_vec();
        if sx.len() != 2 || sg != vec![sx[1]] || so != vec![sx[1]] {
            return Err(Error::Dimension(format!(
                "layer_norm: x {:?}, gamma {:?}, offset {:?}",
                sx, sg, so
            )));
        }
        let (n, c) = (sx[0], sx[1]);
        let eps = S::from_f64(LN_EPS);
        let inv_c = S::one() / S::from_f64(c as f64);
        let mut out = vec![S::zero(); n * c];
        let mut means = vec![S::zero(); n];
        let mut inv_stds = vec![S::zero(); n];
        {
            let xd = self.nodes[x.0].value.data();
            let gd = self.nodes[gamma.0].value.data();
            let od = self.nodes[offset.0].value.data();
            for i in 0..n {
                let row = &xd[i * c..(i + 1) * c];
                let mean = row.iter().copied().sum::<S>() * inv_c;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
                let inv_std = S::one() / (var + eps).sqrt();
                means[i] = mean;
                inv_stds[i] = inv_std;
                for k in 0..c {
                    out[i * c + k] = (row[k] - mean) * inv_std * gd[k] + od[k];
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, offset, mean: means, inv_std: inv_stds }))
    }

    /// Mean over the leading dimension: `[N, C] -> [C]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("mean_rows expects rank 2, got {:?}", s)));
        }
        let (n, c) = (s[0], s[1]);
        if n == 0 {
            return Err(Error::Contract("mean_rows over zero rows".into()));
        }
        let inv_n = S::one() / S::from_f64(n as f64);
        let mut out = vec![S::zero(); c];
        {
            let ad = self.nodes[a.0].value.data();
            for i in 0..n {
                for k in 0..c {
                    out[k] += ad[i * c + k];
                }
            }
            for v in out.iter_mut() {
                *v *= inv_n;
            }
        }
        let value = Tensor::new(vec![c], out)?;
        Ok(self.push(value, Op::MeanRows { a }))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: S = self.nodes[a.0].value.data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum { a })
    }

    /// Label-smoothed cross entropy averaged over non-padding positions.
    ///
    /// The smoothed target distribution spreads `eps` uniformly over the whole
    /// vocabulary: `q_k = (1-eps)*[k == target] + eps/V`.
    pub fn cross_entropy_ls(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
        pad: Option<usize>,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy_ls: logits {:?} vs {} targets",
                s,
                targets.len()
            )));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Config(format!("label smoothing eps {} outside [0,1)", eps)));
        }
        let (n, v) = (s[0], s[1]);
        let active: Vec<bool> = targets.iter().map(|&t| pad != Some(t)).collect();
        if let Some(&bad) = targets
            .iter()
            .zip(&active)
            .find(|(&t, &a)| a && t >= v)
            .map(|(t, _)| t)
        {
            return Err(Error::Input(format!("target {} out of range for vocab {}", bad, v)));
        }
        let n_active = active.iter().filter(|&&a| a).count();
        if n_active == 0 {
            return Err(Error::Contract("cross_entropy_ls: every position is padding".into()));
        }
        let eps_s = S::from_f64(eps);
        let uniform = eps_s / S::from_f64(v as f64);
        let confident = S::one() - eps_s;
        let mut probs = vec![S::zero(); n * v];
        let mut smooth = vec![S::zero(); n * v];
        let mut total = S::zero();
        {
            let ld = self.nodes[logits.0].value.data();
            for i in 0..n {
                if !active[i] {
                    continue;
                }
                let row = &ld[i * v..(i + 1) * v];
                let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                let mut z = S::zero();
                for k in 0..v {
                    let e = (row[k] - m).exp();
                    probs[i * v + k] = e;
                    z += e;
                }
                let log_z = z.ln();
                let mut loss_i = S::zero();
                for k in 0..v {
                    probs[i * v + k] /= z;
                    let q = if k == targets[i] { confident + uniform } else { uniform };
                    smooth[i * v + k] = q;
                    let log_p = row[k] - m - log_z;
                    loss_i -= q * log_p;
                }
                total += loss_i;
            }
        }
        let mean = total / S::from_f64(n_active as f64);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::CrossEntropyLs { logits, probs, smooth, active, n_active },
        ))
    }

    // ---- backward ----

    /// Populates gradients of every node reachable from `loss`.
    ///
    /// Repeated calls without [`Tape::zero_grads`] accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("backward: unknown node".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut scratch: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = scratch[id].take() else { continue };
            let op = self.nodes[id].op.clone();
            {
                let node = &mut self.nodes[id];
                let acc = node.grad.get_or_insert_with(|| vec![S::zero(); node.value.numel()]);
                for (a, g) in acc.iter_mut().zip(&gout) {
                    *a += *g;
                }
            }
            self.propagate(&op, id, &gout, &mut scratch);
        }
        Ok(())
    }

    fn buf<'a>(&self, scratch: &'a mut [Option<Vec<S>>], v: Var) -> &'a mut [S] {
        let numel = self.nodes[v.0].value.numel();
        scratch[v.0].get_or_insert_with(|| vec![S::zero(); numel]).as_mut_slice()
    }

    fn propagate(&self, op: &Op<S>, out_id: usize, gout: &[S], scratch: &mut [Option<Vec<S>>]) {
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                {
                    let ga = self.buf(scratch, *a);
                    for (g, &go) in ga.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                let bn = self.nodes[b.0].value.numel().max(1);
                let gb = self.buf(scratch, *b);
                for (i, &go) in gout.iter().enumerate() {
                    gb[i % bn] += go;
                }
            }
            Op::Sub { a, b } => {
                {
                    let ga = self.buf(scratch, *a);
                    for (g, &go) in ga.iter_mut().zip(gout) {
                        *g += go;
                    }
                }
                let gb = self.buf(scratch, *b);
                for (g, &go) in gb.iter_mut().zip(gout) {
                    *g -= go;
                }
            }
            Op::Mul { a, b } => {
                {
                    let bd = self.nodes[b.0].value.data().to_vec();
                    let ga = self.buf(scratch, *a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bd[i];
                    }
                }
                let ad = self.nodes[a.0].value.data().to_vec();
                let gb = self.buf(scratch, *b);
                for i in 0..gout.len() {
                    gb[i] += gout[i] * ad[i];
                }
            }
            Op::Scale { a, c } => {
                let ga = self.buf(scratch, *a);
                for (g, &go) in ga.iter_mut().zip(gout) {
                    *g += go * *c;
                }
            }
            Op::Relu { a } => {
                let ad = self.nodes[a.0].value.data().to_vec();
                let ga = self.buf(scratch, *a);
                for i in 0..gout.len() {
                    if ad[i] > S::zero() {
                        ga[i] += gout[i];
                    }
                }
            }
            Op::Matmul { a, b } => self.backward_matmul(*a, *b, gout, scratch),
            Op::Reshape { a } => {
                let ga = self.buf(scratch, *a);
                for (g, &go) in ga.iter_mut().zip(gout) {
                    *g += go;
                }
            }
            Op::Gather { table, ids } => {
                let cols = self.nodes[table.0].value.shape()[1];
                let gt = self.buf(scratch, *table);
                for (row, &id) in ids.iter().enumerate() {
                    for k in 0..cols {
                        gt[id * cols + k] += gout[row * cols + k];
                    }
                }
            }
            Op::Conv2d { input, kernel, bias, taps } => {
                self.backward_conv2d(*input, *kernel, *bias, taps, gout, scratch)
            }
            Op::Shift2d { a, dy, dx } => {
                let s = self.nodes[out_id].value.shape().to_vec();
                let (h, w, c) = (s[0], s[1], s[2]);
                let ga = self.buf(scratch, *a);
                for i in *dy..h {
                    for j in *dx..w {
                        for ch in 0..c {
                            ga[((i - dy) * w + (j - dx)) * c + ch] += gout[(i * w + j) * c + ch];
                        }
                    }
                }
            }
            Op::MaskZero { a, mask } => {
                let s = self.nodes[out_id].value.shape().to_vec();
                let (h, w, c) = (s[0], s[1], s[2]);
                let ga = self.buf(scratch, *a);
                for i in 0..h {
                    for j in 0..w {
                        if !mask.get(i, j) {
                            for ch in 0..c {
                                ga[(i * w + j) * c + ch] += gout[(i * w + j) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::AttnLogits { q, k } => self.backward_attn_logits(*q, *k, gout, scratch),
            Op::RelBias1d { q, e, r_max } => self.backward_rel_bias_1d(*q, *e, *r_max, gout, scratch),
            Op::RelBias2d { q, e_h, e_w, r_max, grid_h, grid_w } => {
                self.backward_rel_bias_2d(*q, *e_h, *e_w, *r_max, *grid_h, *grid_w, gout, scratch)
            }
            Op::MaskedSoftmax { a, mask } => {
                let y = self.nodes[out_id].value.data().to_vec();
                let s = self.nodes[out_id].value.shape().to_vec();
                let (nq, nk, heads) = (s[0], s[1], s[2]);
                let ga = self.buf(scratch, *a);
                for i in 0..nq {
                    for h in 0..heads {
                        let mut dot = S::zero();
                        for j in 0..nk {
                            if !mask.get(i, j) {
                                let idx = (i * nk + j) * heads + h;
                                dot += gout[idx] * y[idx];
                            }
                        }
                        for j in 0..nk {
                            if !mask.get(i, j) {
                                let idx = (i * nk + j) * heads + h;
                                ga[idx] += y[idx] * (gout[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::AttnApply { a, v, heads } => self.backward_attn_apply(*a, *v, *heads, gout, scratch),
            Op::LayerNorm { x, gamma, offset, mean, inv_std } => {
                self.backward_layer_norm(*x, *gamma, *offset, mean, inv_std, gout, scratch)
            }
            Op::MeanRows { a } => {
                let s = self.nodes[a.0].value.shape().to_vec();
                let (n, c) = (s[0], s[1]);
                let inv_n = S::one() / S::from_f64(n as f64);
                let ga = self.buf(scratch, *a);
                for i in 0..n {
                    for k in 0..c {
                        ga[i * c + k] += gout[k] * inv_n;
                    }
                }
            }
            Op::Sum { a } => {
                let ga = self.buf(scratch, *a);
                for g in ga.iter_mut() {
                    *g += gout[0];
                }
            }
            Op::CrossEntropyLs { logits, probs, smooth, active, n_active } => {
                let v = self.nodes[logits.0].value.shape()[1];
                let inv = S::one() / S::from_f64(*n_active as f64);
                let gl = self.buf(scratch, *logits);
                for (i, &is_active) in active.iter().enumerate() {
                    if !is_active {
                        continue;
                    }
                    for k in 0..v {
                        let idx = i * v + k;
                        gl[idx] += gout[0] * (probs[idx] - smooth[idx]) * inv;
                    }
                }
            }
        }
    }

    fn backward_matmul(&self, a: Var, b: Var, gout: &[S], scratch: &mut [Option<Vec<S>>]) {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch = gout.len() / (m * n);
        let a_step = if sa.len() == 2 { 0 } else { m * k };
        let b_step = if sb.len() == 2 { 0 } else { k * n };
        {
            let bd = self.nodes[b.0].value.data().to_vec();
            let ga = self.buf(scratch, a);
            for t in 0..batch {
                // dA += G . B^T
                let g = &gout[t * m * n..(t + 1) * m * n];
                let bb = &bd[t * b_step..t * b_step + k * n];
                let da = &mut ga[t * a_step..t * a_step + m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = S::zero();
                        for j in 0..n {
                            acc += g[i * n + j] * bb[p * n + j];
                        }
                        da[i * k + p] += acc;
                    }
                }
            }
        }
        let ad = self.nodes[a.0].value.data().to_vec();
        let gb = self.buf(scratch, b);
        for t in 0..batch {
            // dB += A^T . G
            let g = &gout[t * m * n..(t + 1) * m * n];
            let aa = &ad[t * a_step..t * a_step + m * k];
            let db = &mut gb[t * b_step..t * b_step + k * n];
            for p in 0..k {
                for j in 0..n {
                    let mut acc = S::zero();
                    for i in 0..m {
                        acc += aa[i * k + p] * g[i * n + j];
                    }
                    db[p * n + j] += acc;
                }
            }
        }
    }

    fn backward_conv2d(
        &self,
        input: Var,
        kernel: Var,
        bias: Var,
        taps: &BoolMat,
        gout: &[S],
        scratch: &mut [Option<Vec<S>>],
    ) {
        let si = self.nodes[input.0].value.shape().to_vec();
        let sk = self.nodes[kernel.0].value.shape().to_vec();
        let (h, w, c_in) = (si[0], si[1], si[2]);
        let (kh, kw, _, c_out) = (sk[0], sk[1], sk[2], sk[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let kerd = self.nodes[kernel.0].value.data().to_vec();
        let ind = self.nodes[input.0].value.data().to_vec();
        {
            let gi = self.buf(scratch, input);
            for i in 0..h {
                for j in 0..w {
                    for o in 0..c_out {
                        let go = gout[(i * w + j) * c_out + o];
                        for ti in 0..kh {
                            for tj in 0..kw {
                                if !taps.get(ti, tj) {
                                    continue;
                                }
                                let ii = i as isize + ti as isize - ph as isize;
                                let jj = j as isize + tj as isize - pw as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                let (ii, jj) = (ii as usize, jj as usize);
                                for c in 0..c_in {
                                    gi[(ii * w + jj) * c_in + c] +=
                                        go * kerd[((ti * kw + tj) * c_in + c) * c_out + o];
                                }
                            }
                        }
                    }
                }
            }
        }
        {
            let gk = self.buf(scratch, kernel);
            for i in 0..h {
                for j in 0..w {
                    for o in 0..c_out {
                        let go = gout[(i * w + j) * c_out + o];
                        for ti in 0..kh {
                            for tj in 0..kw {
                                if !taps.get(ti, tj) {
                                    continue;
                                }
                                let ii = i as isize + ti as isize - ph as isize;
                                let jj = j as isize + tj as isize - pw as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                let (ii, jj) = (ii as usize, jj as usize);
                                for c in 0..c_in {
                                    gk[((ti * kw + tj) * c_in + c) * c_out + o] +=
                                        go * ind[(ii * w + jj) * c_in + c];
                                }
                            }
                        }
                    }
                }
            }
        }
        let gb = self.buf(scratch, bias);
        for i in 0..h {
            for j in 0..w {
                for o in 0..c_out {
                    gb[o] += gout[(i * w + j) * c_out + o];
                }
            }
        }
    }

    fn backward_attn_logits(&self, q: Var, k: Var, gout: &[S], scratch: &mut [Option<Vec<S>>]) {
        let sq = self.nodes[q.0].value.shape().to_vec();
        let sk = self.nodes[k.0].value.shape().to_vec();
        let (nq, heads, d) = (sq[0], sq[1], sq[2]);
        let nk = sk[0];
        let inv_sqrt_d = S::one() / S::from_f64(d as f64).sqrt();
        let kd = self.nodes[k.0].value.data().to_vec();
        let qd = self.nodes[q.0].value.data().to_vec();
        {
            let gq = self.buf(scratch, q);
            for i in 0..nq {
                for j in 0..nk {
                    for h in 0..heads {
                        let go = gout[(i * nk + j) * heads + h] * inv_sqrt_d;
                        for t in 0..d {
                            gq[(i * heads + h) * d + t] += go * kd[(j * heads + h) * d + t];
                        }
                    }
                }
            }
        }
        let gk = self.buf(scratch, k);
        for i in 0..nq {
            for j in 0..nk {
                for h in 0..heads {
                    let go = gout[(i * nk + j) * heads + h] * inv_sqrt_d;
                    for t in 0..d {
                        gk[(j * heads + h) * d + t] += go * qd[(i * heads + h) * d + t];
                    }
                }
            }
        }
    }

    fn backward_rel_bias_1d(
        &self,
        q: Var,
        e: Var,
        r_max: usize,
        gout: &[S],
        scratch: &mut [Option<Vec<S>>],
    ) {
        let sq = self.nodes[q.0].value.shape().to_vec();
        let (n, heads, d) = (sq[0], sq[1], sq[2]);
        let ed = self.nodes[e.0].value.data().to_vec();
        let qd = self.nodes[q.0].value.data().to_vec();
        {
            let gq = self.buf(scratch, q);
            for i in 0..n {
                for j in 0..n {
                    let row = clip_rel(i as isize - j as isize, r_max);
                    for h in 0..heads {
                        let go = gout[(i * n + j) * heads + h];
                        for t in 0..d {
                            gq[(i * heads + h) * d + t] += go * ed[row * d + t];
                        }
                    }
                }
            }
        }
        let ge = self.buf(scratch, e);
        for i in 0..n {
            for j in 0..n {
                let row = clip_rel(i as isize - j as isize, r_max);
                for h in 0..heads {
                    let go = gout[(i * n + j) * heads + h];
                    for t in 0..d {
                        ge[row * d + t] += go * qd[(i * heads + h) * d + t];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_rel_bias_2d(
        &self,
        q: Var,
        e_h: Var,
        e_w: Var,
        r_max: usize,
        grid_h: usize,
        grid_w: usize,
        gout: &[S],
        scratch: &mut [Option<Vec<S>>],
    ) {
        let _ = grid_h;
        let sq = self.nodes[q.0].value.shape().to_vec();
        let (n, heads, d) = (sq[0], sq[1], sq[2]);
        let qd = self.nodes[q.0].value.data().to_vec();
        let ehd = self.nodes[e_h.0].value.data().to_vec();
        let ewd = self.nodes[e_w.0].value.data().to_vec();
        {
            let gq = self.buf(scratch, q);
            for i in 0..n {
                let (ri, ci) = ((i / grid_w) as isize, (i % grid_w) as isize);
                for j in 0..n {
                    let (rj, cj) = ((j / grid_w) as isize, (j % grid_w) as isize);
                    let hr = clip_rel(rj - ri, r_max);
                    let wr = clip_rel(cj - ci, r_max);
                    for h in 0..heads {
                        let go = gout[(i * n + j) * heads + h];
                        for t in 0..d {
                            gq[(i * heads + h) * d + t] += go * (ehd[hr * d + t] + ewd[wr * d + t]);
                        }
                    }
                }
            }
        }
        {
            let geh = self.buf(scratch, e_h);
            for i in 0..n {
                let ri = (i / grid_w) as isize;
                for j in 0..n {
                    let rj = (j / grid_w) as isize;
                    let hr = clip_rel(rj - ri, r_max);
                    for h in 0..heads {
                        let go = gout[(i * n + j) * heads + h];
                        for t in 0..d {
                            geh[hr * d + t] += go * qd[(i * heads + h) * d + t];
                        }
                    }
                }
            }
        }
        let gew = self.buf(scratch, e_w);
        for i in 0..n {
            let ci = (i % grid_w) as isize;
            for j in 0..n {
                let cj = (j % grid_w) as isize;
                let wr = clip_rel(cj - ci, r_max);
                for h in 0..heads {
                    let go = gout[(i * n + j) * heads + h];
                    for t in 0..d {
                        gew[wr * d + t] += go * qd[(i * heads + h) * d + t];
                    }
                }
            }
        }
    }

    fn backward_attn_apply(
        &self,
        a: Var,
        v: Var,
        heads: usize,
        gout: &[S],
        scratch: &mut [Option<Vec<S>>],
    ) {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sv = self.nodes[v.0].value.shape().to_vec();
        let (nq, nk) = (sa[0], sa[1]);
        let d = sv[1] / heads;
        let vd = self.nodes[v.0].value.data().to_vec();
        let ad = self.nodes[a.0].value.data().to_vec();
        {
            let ga = self.buf(scratch, a);
            for i in 0..nq {
                for j in 0..nk {
                    for h in 0..heads {
                        let mut acc = S::zero();
                        for t in 0..d {
                            acc += gout[i * heads * d + h * d + t] * vd[j * heads * d + h * d + t];
                        }
                        ga[(i * nk + j) * heads + h] += acc;
                    }
                }
            }
        }
        let gv = self.buf(scratch, v);
        for j in 0..nk {
            for h in 0..heads {
                for t in 0..d {
                    let mut acc = S::zero();
                    for i in 0..nq {
                        acc += ad[(i * nk + j) * heads + h] * gout[i * heads * d + h * d + t];
                    }
                    gv[j * heads * d + h * d + t] += acc;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)] // one arg per saved forward intermediate
    fn backward_layer_norm(
        &self,
        x: Var,
        gamma: Var,
        offset: Var,
        mean: &[S],
        inv_std: &[S],
        gout: &[S],
        scratch: &mut [Option<Vec<S>>],
    ) {
        let sx = self.nodes[x.0].value.shape().to_vec();
        let (n, c) = (sx[0], sx[1]);
        let inv_c = S::one() / S::from_f64(c as f64);
        let xd = self.nodes[x.0].value.data().to_vec();
        let gd = self.nodes[gamma.0].value.data().to_vec();
        {
            let gg = self.buf(scratch, gamma);
            for i in 0..n {
                for k in 0..c {
                    let xhat = (xd[i * c + k] - mean[i]) * inv_std[i];
                    gg[k] += gout[i * c + k] * xhat;
                }
            }
        }
        {
            let go = self.buf(scratch, offset);
            for i in 0..n {
                for k in 0..c {
                    go[k] += gout[i * c + k];
                }
            }
        }
        let gx = self.buf(scratch, x);
        for i in 0..n {
            // dL/dxhat = g * gamma; project out mean and variance directions.
            let mut mean_dxhat = S::zero();
            let mut mean_dxhat_xhat = S::zero();
            for k in 0..c {
                let dxhat = gout[i * c + k] * gd[k];
                let xhat = (xd[i * c + k] - mean[i]) * inv_std[i];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
            }
            mean_dxhat *= inv_c;
            mean_dxhat_xhat *= inv_c;
            for k in 0..c {
                let dxhat = gout[i * c + k] * gd[k];
                let xhat = (xd[i * c + k] - mean[i]) * inv_std[i];
                gx[i * c + k] += inv_std[i] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
}

/// Clamps a relative offset to `[-r_max, r_max]` and maps it to a table row.
fn clip_rel(offset: isize, r_max: usize) -> usize {
    let r = r_max as isize;
    (offset.clamp(-r, r) + r) as usize
}

/// `out[i,j] += sum_p a[i,p] * b[p,j]`
fn mm_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
}

fn broadcast_check(op: &str, sa: &[usize], sb: &[usize]) -> Result<()> {
    if sa == sb {
        return Ok(());
    }
    let nb: usize = sb.iter().product();
    if nb == 1 {
        return Ok(());
    }
    if sb.len() <= sa.len() && &sa[sa.len() - sb.len()..] == sb {
        return Ok(());
    }
    Err(Error::Dimension(format!("{}: {:?} vs {:?}", op, sa, sb)))
}
