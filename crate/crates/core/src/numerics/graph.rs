//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node ids are a
//! topological order by construction. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients into every node that depends on a
//! parameter leaf.
//!
//! Complex tensors are treated as pairs of reals. The gradient of a real loss
//! with respect to `z = a + ib` is stored as `dL/da + i dL/db`.

use std::sync::Arc;

use num_complex::Complex64;

use super::fft::{fft_axis, Direction};
use super::tensor::{softmax_in_place, MatmulPlan, Tensor};
use crate::error::{Error, Result};
use crate::geo::HeadProjection;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
/// Additive score for regions with no member stations.
pub const EMPTY_REGION_SCORE: f64 = -1e9;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var, MatmulPlan),
    Gelu(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    MulGate {
        x: Var,
        gates: Var,
        k: usize,
    },
    MaskReplace {
        x: Var,
        token: Var,
        mask: Arc<[bool]>,
    },
    Lookup {
        table: Var,
        codes: Arc<[usize]>,
    },
    RegionPool {
        x: Var,
        head: Arc<HeadProjection>,
        orient: Option<Arc<[u8]>>,
    },
    RegionAttention(Box<AttentionTape>),
    ToComplex(Var),
    RealPart(Var),
    Fft {
        x: Var,
        axis: usize,
        dir: Direction,
    },
    BlockLinear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftThreshold {
        x: Var,
        lambda: f64,
    },
}

struct AttentionTape {
    q: Var,
    k: Var,
    v: Var,
    bias: Var,
    head: Arc<HeadProjection>,
    orient: Option<Arc<[u8]>>,
    alpha: f64,
    // [B, N, G] attention weights; pooled keys and values are recomputed in
    // the backward pass so the tape stays O(N G).
    attn: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The differentiation tape. Confined to one thread; build one per pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn rows_of(t: &Tensor) -> usize {
    t.numel() / t.last_dim().max(1)
}

fn cplx(d: &[f64], i: usize) -> Complex64 {
    Complex64::new(d[2 * i], d[2 * i + 1])
}

fn put(d: &mut [f64], i: usize, z: Complex64) {
    d[2 * i] = z.re;
    d[2 * i + 1] = z.im;
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn real(&self, v: Var, what: &str) -> Result<&Tensor> {
        let t = self.value(v);
        if t.is_complex() {
            return Err(Error::Usage(format!("{what} expects a real tensor")));
        }
        Ok(t)
    }

    fn complex(&self, v: Var, what: &str) -> Result<&Tensor> {
        let t = self.value(v);
        if !t.is_complex() {
            return Err(Error::Usage(format!("{what} expects a complex tensor")));
        }
        Ok(t)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.is_complex() != tb.is_complex() {
            return Err(Error::shapes(what, ta.shape(), tb.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product of real tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.real(a, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// `x + bias` with `bias` broadcast along every axis but the last.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.real(x, "add_bias")?, self.real(bias, "add_bias")?);
        if tb.rank() != 1 || tb.numel() != tx.last_dim() {
            return Err(Error::shapes("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        let b = tb.data();
        for row in out.data_mut().chunks_mut(b.len()) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.value(a), self.value(b))?;
        let mut out = vec![0.0; plan.out_len()];
        plan.run(self.value(a).data(), self.value(b).data(), &mut out);
        let v = Tensor::new(&plan.out_shape, out)?;
        Ok(self.push(v, Op::MatMul(a, b, plan), &[a, b]))
    }

    /// `x @ w + b`, the fully connected layer used throughout the model.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.real(x, "gelu")?.map(|a| {
            let t = (GELU_C * (a + GELU_A * a * a * a)).tanh();
            0.5 * a * (1.0 + t)
        });
        Ok(self.push(v, Op::Gelu(x), &[x]))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let v = self.real(x, "abs")?.map(f64::abs);
        Ok(self.push(v, Op::Abs(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.real(x, "sum")?.sum());
        Ok(self.push(v, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.real(x, "mean")?;
        let v = Tensor::scalar(t.sum() / t.numel().max(1) as f64);
        Ok(self.push(v, Op::Mean(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).softmax_lastdim()?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.real(x, "layer_norm")?;
        let c = tx.last_dim();
        for p in [gamma, beta] {
            let t = self.value(p);
            if t.rank() != 1 || t.numel() != c {
                return Err(Error::shapes("layer_norm affine", tx.shape(), t.shape()));
            }
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let rows = rows_of(tx);
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gd[j] + bd[j];
            }
        }
        let v = Tensor::new(tx.shape(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Concatenates real tensors along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let lead = self.real(first, "concat")?.shape().split_last().map(|(_, l)| l.to_vec());
        let lead = lead.unwrap_or_default();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.real(p, "concat")?;
            if t.rank() == 0 || t.shape()[..t.rank() - 1] != lead[..] {
                return Err(Error::shapes("concat leading axes", self.value(first).shape(), t.shape()));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.real(x, "slice")?;
        let c = t.last_dim();
        if start >= end || end > c {
            return Err(Error::Dimension(format!(
                "slice {start}..{end} out of range for shape {:?}",
                t.shape()
            )));
        }
        let w = end - start;
        let rows = rows_of(t);
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * c + start..r * c + end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Slice { x, start, end }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// `x * gates[..., k]`, broadcasting the gate column over `x`'s last axis.
    pub fn mul_gate(&mut self, x: Var, gates: Var, k: usize) -> Result<Var> {
        let (tx, tg) = (self.real(x, "mul_gate")?, self.real(gates, "mul_gate")?);
        if rows_of(tx) != rows_of(tg) || k >= tg.last_dim() {
            return Err(Error::shapes("mul_gate", tx.shape(), tg.shape()));
        }
        let (c, kk) = (tx.last_dim(), tg.last_dim());
        let mut out = tx.clone();
        for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
            let w = tg.data()[r * kk + k];
            for a in row {
                *a *= w;
            }
        }
        Ok(self.push(out, Op::MulGate { x, gates, k }, &[x, gates]))
    }

    /// Replaces every masked row of `x` with `token` tiled across the row.
    ///
    /// Masked rows are copies of the token, so nothing about the original
    /// contents of those rows survives into the output.
    pub fn mask_replace(&mut self, x: Var, token: Var, mask: Arc<[bool]>) -> Result<Var> {
        let (tx, tt) = (self.real(x, "mask_replace")?, self.real(token, "mask_replace")?);
        let (f, d) = (tx.last_dim(), tt.numel());
        if tt.rank() != 1 || d == 0 || f % d != 0 || rows_of(tx) != mask.len() {
            return Err(Error::Dimension(format!(
                "mask_replace: rows of {:?}, token {:?}, mask of {}",
                tx.shape(),
                tt.shape(),
                mask.len()
            )));
        }
        let mut out = tx.clone();
        let tok = tt.data();
        for (row, &m) in out.data_mut().chunks_mut(f).zip(mask.iter()) {
            if m {
                for chunk in row.chunks_mut(d) {
                    chunk.copy_from_slice(tok);
                }
            }
        }
        Ok(self.push(out, Op::MaskReplace { x, token, mask }, &[x, token]))
    }

    /// Embedding lookup: rows of `table` selected by `codes`, shaped `lead + [d]`.
    pub fn lookup(&mut self, table: Var, codes: Arc<[usize]>, lead: &[usize]) -> Result<Var> {
        let t = self.real(table, "lookup")?;
        if t.rank() != 2 || lead.iter().product::<usize>() != codes.len() {
            return Err(Error::Dimension(format!(
                "lookup: table {:?}, {} codes for leading shape {lead:?}",
                t.shape(),
                codes.len()
            )));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(codes.len() * d);
        for &c in codes.iter() {
            if c >= vocab {
                return Err(Error::Validation(format!("code {c} outside vocabulary of {vocab}")));
            }
            out.extend_from_slice(&t.data()[c * d..(c + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Lookup { table, codes }, &[table]))
    }

    fn check_regions(
        &self,
        x: Var,
        head: &HeadProjection,
        orient: &Option<Arc<[u8]>>,
    ) -> Result<(usize, usize, usize)> {
        let t = self.real(x, "region op")?;
        if t.rank() != 3 || t.shape()[1] != head.node_count() {
            return Err(Error::Dimension(format!(
                "region op expects [batch, {}, channels], got {:?}",
                head.node_count(),
                t.shape()
            )));
        }
        let (b, n) = (t.shape()[0], t.shape()[1]);
        if let Some(o) = orient {
            if o.len() != b * n {
                return Err(Error::Dimension(format!(
                    "orientation codes: expected {}, got {}",
                    b * n,
                    o.len()
                )));
            }
        }
        Ok((b, n, t.shape()[2]))
    }

    /// Mean-pools node features into each node's dartboard regions:
    /// `[B, N, C] -> [B, N, G, C]`, empty regions give zero rows.
    pub fn region_pool(
        &mut self,
        x: Var,
        head: Arc<HeadProjection>,
        orient: Option<Arc<[u8]>>,
    ) -> Result<Var> {
        let (b, n, c) = self.check_regions(x, &head, &orient)?;
        let g = head.regions();
        let mut out = vec![0.0; b * n * g * c];
        let src = self.value(x).data();
        for bi in 0..b {
            for i in 0..n {
                let idx = head.orientation(orient.as_ref().map_or(0, |o| o[bi * n + i]));
                for r in 0..g {
                    pool_mean(
                        idx.members(i, r),
                        &src[bi * n * c..],
                        c,
                        &mut out[((bi * n + i) * g + r) * c..][..c],
                    );
                }
            }
        }
        let v = Tensor::new(&[b, n, g, c], out)?;
        Ok(self.push(v, Op::RegionPool { x, head, orient }, &[x]))
    }

    /// Dartboard attention for one head.
    ///
    /// `q`, `k`, `v` are per-node `[B, N, dh]`; keys and values are mean-pooled
    /// into regions, scored against the query with scale `alpha` plus the
    /// position bias (`[N, G]`, or `[G]` shared across nodes), and combined.
    #[allow(clippy::too_many_arguments)]
    pub fn region_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        head: Arc<HeadProjection>,
        orient: Option<Arc<[u8]>>,
        alpha: f64,
    ) -> Result<Var> {
        let (b, n, dh) = self.check_regions(q, &head, &orient)?;
        self.same_shape(q, k, "attention keys")?;
        self.same_shape(q, v, "attention values")?;
        let g = head.regions();
        let tb = self.real(bias, "attention bias")?;
        let shared = match tb.shape() {
            [gg] if *gg == g => true,
            [nn, gg] if *nn == n && *gg == g => false,
            s => {
                return Err(Error::Dimension(format!(
                    "position bias must be [{n}, {g}] or [{g}], got {s:?}"
                )))
            }
        };
        let (qd, kd, vd, bd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            tb.data(),
        );
        let mut kp = vec![0.0; g * dh];
        let mut vp = vec![0.0; g * dh];
        let mut attn = vec![0.0; b * n * g];
        let mut out = vec![0.0; b * n * dh];
        for bi in 0..b {
            for i in 0..n {
                let row = bi * n + i;
                let idx = head.orientation(orient.as_ref().map_or(0, |o| o[row]));
                let qi = &qd[row * dh..(row + 1) * dh];
                let scores = &mut attn[row * g..(row + 1) * g];
                for r in 0..g {
                    let members = idx.members(i, r);
                    let base = r * dh;
                    pool_mean(members, &kd[bi * n * dh..], dh, &mut kp[base..base + dh]);
                    pool_mean(members, &vd[bi * n * dh..], dh, &mut vp[base..base + dh]);
                    let dot: f64 = qi.iter().zip(&kp[base..base + dh]).map(|(a, c)| a * c).sum();
                    let pb = if shared { bd[r] } else { bd[i * g + r] };
                    let mut s = alpha * dot + pb;
                    if members.is_empty() {
                        s += EMPTY_REGION_SCORE;
                    }
                    scores[r] = s;
                }
                softmax_in_place(scores);
                let o = &mut out[row * dh..(row + 1) * dh];
                for r in 0..g {
                    let a = scores[r];
                    let base = r * dh;
                    for (od, vv) in o.iter_mut().zip(&vp[base..base + dh]) {
                        *od += a * vv;
                    }
                }
            }
        }
        let value = Tensor::new(&[b, n, dh], out)?;
        let tape = AttentionTape {
            q,
            k,
            v,
            bias,
            head,
            orient,
            alpha,
            attn,
        };
        Ok(self.push(value, Op::RegionAttention(Box::new(tape)), &[q, k, v, bias]))
    }

    pub fn to_complex(&mut self, x: Var) -> Result<Var> {
        let v = self.real(x, "to_complex")?.promote();
        Ok(self.push(v, Op::ToComplex(x), &[x]))
    }

    pub fn real_part(&mut self, x: Var) -> Result<Var> {
        let v = self.complex(x, "real_part")?.real();
        Ok(self.push(v, Op::RealPart(x), &[x]))
    }

    pub fn fft(&mut self, x: Var, axis: usize, dir: Direction) -> Result<Var> {
        let v = fft_axis(self.value(x), axis, dir)?;
        Ok(self.push(v, Op::Fft { x, axis, dir }, &[x]))
    }

    /// Block-diagonal complex linear map over the last axis.
    ///
    /// `w` is `[K, c, c]` complex, `b` is `[K, c]` complex, and the last axis of
    /// `x` is split into `K` blocks of width `c`: `y_k = W_k x_k + b_k`.
    pub fn block_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let tx = self.complex(x, "block_linear")?;
        let tw = self.complex(w, "block_linear weight")?;
        let tb = self.complex(b, "block_linear bias")?;
        let (kb, cb) = match tw.shape() {
            [kb, c1, c2] if c1 == c2 => (*kb, *c1),
            s => return Err(Error::Dimension(format!("block weights must be [K, c, c], got {s:?}"))),
        };
        if tb.shape() != [kb, cb] || tx.last_dim() != kb * cb {
            return Err(Error::Dimension(format!(
                "block_linear: input {:?}, weights {:?}, bias {:?}",
                tx.shape(),
                tw.shape(),
                tb.shape()
            )));
        }
        let c = kb * cb;
        let rows = rows_of(tx);
        let (xd, wd, bd) = (tx.data(), tw.data(), tb.data());
        let mut out = vec![0.0; 2 * rows * c];
        for r in 0..rows {
            for blk in 0..kb {
                for j in 0..cb {
                    let mut acc = cplx(bd, blk * cb + j);
                    for i in 0..cb {
                        acc += cplx(wd, (blk * cb + j) * cb + i) * cplx(xd, r * c + blk * cb + i);
                    }
                    put(&mut out, r * c + blk * cb + j, acc);
                }
            }
        }
        let v = Tensor::new_complex(tx.shape(), out)?;
        Ok(self.push(v, Op::BlockLinear { x, w, b }, &[x, w, b]))
    }

    /// Complex soft-thresholding `z -> z/|z| * max(|z| - lambda, 0)`.
    pub fn soft_threshold(&mut self, x: Var, lambda: f64) -> Result<Var> {
        let v = soft_threshold(self.complex(x, "soft_threshold")?, lambda)?;
        Ok(self.push(v, Op::SoftThreshold { x, lambda }, &[x]))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 || lt.is_complex() {
            return Err(Error::Usage(format!(
                "backward needs a real scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(tb, |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(ta, |x, y| x * y));
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.nodes[b.0].needs_grad {
                    let c = g.last_dim();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&[c], db)?);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::MatMul(a, b, plan) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (da, db) = plan.backward(ta.data(), tb.data(), g.data());
                self.accumulate(grads, *a, Tensor::new(ta.shape(), da)?);
                self.accumulate(grads, *b, Tensor::new(tb.shape(), db)?);
            }
            Op::Gelu(x) => {
                let d = self.value(*x).zip_map(g, |a, gy| {
                    let u = GELU_C * (a + GELU_A * a * a * a);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * a * a);
                    gy * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du)
                });
                self.accumulate(grads, *x, d);
            }
            Op::Abs(x) => {
                // Subgradient 0 at the kink.
                let d = self.value(*x).zip_map(g, |a, gy| {
                    if a > 0.0 {
                        gy
                    } else if a < 0.0 {
                        -gy
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let t = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(t.shape(), g.item()));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                let s = g.item() / t.numel().max(1) as f64;
                self.accumulate(grads, *x, Tensor::full(t.shape(), s));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.last_dim().max(1);
                let mut d = vec![0.0; y.numel()];
                for ((yr, gr), dr) in y.data().chunks(c).zip(g.data().chunks(c)).zip(d.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape(), d)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.last_dim();
                let gd = self.value(*gamma).data();
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for j in 0..c {
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gd[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * hr[j];
                    }
                    let cf = c as f64;
                    for j in 0..c {
                        dx[r * c + j] = is / cf * (cf * dxhat[j] - s1 - hr[j] * s2);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?);
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
            }
            Op::Concat(parts) => {
                let total = g.last_dim();
                let rows = rows_of(g);
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    let w = t.last_dim();
                    if self.nodes[p.0].needs_grad {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(t.shape(), d)?);
                    }
                    off += w;
                }
            }
            Op::Slice { x, start, end } => {
                let t = self.value(*x);
                let c = t.last_dim();
                let w = end - start;
                let mut d = vec![0.0; t.numel()];
                for (r, gr) in g.data().chunks(w).enumerate() {
                    d[r * c + start..r * c + end].copy_from_slice(gr);
                }
                self.accumulate(grads, *x, Tensor::new(t.shape(), d)?);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.clone().with_shape(self.value(*x).shape()));
            }
            Op::MulGate { x, gates, k } => {
                let (tx, tg) = (self.value(*x), self.value(*gates));
                let (c, kk) = (tx.last_dim(), tg.last_dim());
                let mut dx = g.clone();
                let mut dg = vec![0.0; tg.numel()];
                for (r, row) in dx.data_mut().chunks_mut(c).enumerate() {
                    let w = tg.data()[r * kk + k];
                    let xr = &tx.data()[r * c..(r + 1) * c];
                    dg[r * kk + k] = row.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for a in row {
                        *a *= w;
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gates, Tensor::new(tg.shape(), dg)?);
            }
            Op::MaskReplace { x, token, mask } => {
                let d = self.value(*token).numel();
                let f = g.last_dim();
                let mut dx = g.clone();
                let mut dt = vec![0.0; d];
                for (row, &m) in dx.data_mut().chunks_mut(f).zip(mask.iter()) {
                    if m {
                        for chunk in row.chunks(d) {
                            for (a, b) in dt.iter_mut().zip(chunk) {
                                *a += b;
                            }
                        }
                        row.fill(0.0);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *token, Tensor::new(&[d], dt)?);
            }
            Op::Lookup { table, codes } => {
                let t = self.value(*table);
                let d = t.shape()[1];
                let mut dt = vec![0.0; t.numel()];
                for (gr, &c) in g.data().chunks(d).zip(codes.iter()) {
                    for (a, b) in dt[c * d..(c + 1) * d].iter_mut().zip(gr) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(t.shape(), dt)?);
            }
            Op::RegionPool { x, head, orient } => {
                let t = self.value(*x);
                let (b, n, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let gg = head.regions();
                let mut dx = vec![0.0; t.numel()];
                for bi in 0..b {
                    for i in 0..n {
                        let idx = head.orientation(orient.as_ref().map_or(0, |o| o[bi * n + i]));
                        for r in 0..gg {
                            let src = &g.data()[((bi * n + i) * gg + r) * c..][..c];
                            scatter_mean(idx.members(i, r), src, c, &mut dx[bi * n * c..]);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(t.shape(), dx)?);
            }
            Op::RegionAttention(tape) => self.attention_backward(tape, g, grads)?,
            Op::ToComplex(x) => self.accumulate(grads, *x, g.real()),
            Op::RealPart(x) => self.accumulate(grads, *x, g.promote()),
            Op::Fft { x, axis, dir } => {
                // Adjoint of the unnormalized DFT is N * inverse; of the
                // inverse (which carries 1/N) it is forward / N.
                let n = g.shape()[*axis] as f64;
                let d = match dir {
                    Direction::Forward => fft_axis(g, *axis, Direction::Inverse)?.map(|v| v * n),
                    Direction::Inverse => fft_axis(g, *axis, Direction::Forward)?.map(|v| v / n),
                };
                self.accumulate(grads, *x, d);
            }
            Op::BlockLinear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (kb, cb) = (tw.shape()[0], tw.shape()[1]);
                let c = kb * cb;
                let rows = rows_of(tx);
                let (xd, wd, gd) = (tx.data(), tw.data(), g.data());
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wd.len()];
                let mut db = vec![0.0; 2 * c];
                for r in 0..rows {
                    for blk in 0..kb {
                        for j in 0..cb {
                            let gy = cplx(gd, r * c + blk * cb + j);
                            let acc = cplx(&db, blk * cb + j) + gy;
                            put(&mut db, blk * cb + j, acc);
                            for i in 0..cb {
                                let wi = (blk * cb + j) * cb + i;
                                let xi = r * c + blk * cb + i;
                                let ax = cplx(&dx, xi) + cplx(wd, wi).conj() * gy;
                                put(&mut dx, xi, ax);
                                let aw = cplx(&dw, wi) + gy * cplx(xd, xi).conj();
                                put(&mut dw, wi, aw);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new_complex(tx.shape(), dx)?);
                self.accumulate(grads, *w, Tensor::new_complex(tw.shape(), dw)?);
                self.accumulate(grads, *b, Tensor::new_complex(&[kb, cb], db)?);
            }
            Op::SoftThreshold { x, lambda } => {
                let tx = self.value(*x);
                let mut d = vec![0.0; tx.data().len()];
                for i in 0..tx.numel() {
                    let z = cplx(tx.data(), i);
                    let r = z.norm();
                    if r <= *lambda || r == 0.0 {
                        continue;
                    }
                    let gy = cplx(g.data(), i);
                    let s = 1.0 - lambda / r;
                    let proj = (gy.conj() * z).re;
                    put(&mut d, i, gy * s + z * (lambda / (r * r * r) * proj));
                }
                self.accumulate(grads, *x, Tensor::new_complex(tx.shape(), d)?);
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        tape: &AttentionTape,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let tq = self.value(tape.q);
        let (b, n, dh) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
        let gg = tape.head.regions();
        let shared = self.value(tape.bias).rank() == 1;
        let qd = tq.data();
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; qd.len()];
        let mut dv = vec![0.0; qd.len()];
        let mut dbias = vec![0.0; self.value(tape.bias).numel()];
        let mut da = vec![0.0; gg];
        let mut dkp = vec![0.0; dh];
        let mut dvp = vec![0.0; dh];
        let (kd, vd) = (self.value(tape.k).data(), self.value(tape.v).data());
        let mut kp = vec![0.0; gg * dh];
        let mut vp = vec![0.0; gg * dh];
        for bi in 0..b {
            for i in 0..n {
                let row = bi * n + i;
                let idx = tape
                    .head
                    .orientation(tape.orient.as_ref().map_or(0, |o| o[row]));
                let go = &g.data()[row * dh..(row + 1) * dh];
                let a = &tape.attn[row * gg..(row + 1) * gg];
                let mut dot = 0.0;
                for r in 0..gg {
                    let base = r * dh;
                    let members = idx.members(i, r);
                    pool_mean(members, &kd[bi * n * dh..], dh, &mut kp[base..base + dh]);
                    pool_mean(members, &vd[bi * n * dh..], dh, &mut vp[base..base + dh]);
                    da[r] = go.iter().zip(&vp[base..base + dh]).map(|(x, y)| x * y).sum();
                    dot += a[r] * da[r];
                }
                let qi = &qd[row * dh..(row + 1) * dh];
                for r in 0..gg {
                    let members = idx.members(i, r);
                    let ds = a[r] * (da[r] - dot);
                    if shared {
                        dbias[r] += ds;
                    } else {
                        dbias[i * gg + r] += ds;
                    }
                    if members.is_empty() {
                        continue;
                    }
                    let base = r * dh;
                    for j in 0..dh {
                        dq[row * dh + j] += tape.alpha * ds * kp[base + j];
                        dkp[j] = tape.alpha * ds * qi[j];
                        dvp[j] = a[r] * go[j];
                    }
                    scatter_mean(members, &dkp, dh, &mut dk[bi * n * dh..]);
                    scatter_mean(members, &dvp, dh, &mut dv[bi * n * dh..]);
                }
            }
        }
        let shape = tq.shape().to_vec();
        self.accumulate(grads, tape.q, Tensor::new(&shape, dq)?);
        self.accumulate(grads, tape.k, Tensor::new(&shape, dk)?);
        self.accumulate(grads, tape.v, Tensor::new(&shape, dv)?);
        let bshape = self.value(tape.bias).shape().to_vec();
        self.accumulate(grads, tape.bias, Tensor::new(&bshape, dbias)?);
        Ok(())
    }
}

fn pool_mean(members: &[u32], src: &[f64], c: usize, out: &mut [f64]) {
    out.fill(0.0);
    if members.is_empty() {
        return;
    }
    for &j in members {
        let row = &src[j as usize * c..(j as usize + 1) * c];
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = 1.0 / members.len() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn scatter_mean(members: &[u32], grad: &[f64], c: usize, dst: &mut [f64]) {
    if members.is_empty() {
        return;
    }
    let inv = 1.0 / members.len() as f64;
    for &j in members {
        let row = &mut dst[j as usize * c..(j as usize + 1) * c];
        for (d, gv) in row.iter_mut().zip(grad) {
            *d += gv * inv;
        }
    }
}

/// Complex soft-thresholding: shrinks each magnitude by `lambda`, keeps phase.
pub fn soft_threshold(x: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!(
            "soft-threshold lambda must be >= 0, got {lambda}"
        )));
    }
    if !x.is_complex() {
        return Err(Error::Usage("soft_threshold expects a complex tensor".into()));
    }
    let mut out = x.data().to_vec();
    for pair in out.chunks_mut(2) {
        let r = pair[0].hypot(pair[1]);
        let s = if r > lambda { 1.0 - lambda / r } else { 0.0 };
        pair[0] *= s;
        pair[1] *= s;
    }
    Tensor::new_complex(x.shape(), out)
}
