//! Reverse-mode tape.
//!
//! Nodes are appended in execution order, so the node list is always a
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;

use super::gemm::{gemm, View};
use super::params::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBias { x: Var, b: Var },
    AddChannelBias { x: Var, b: Var },
    Silu(Var),
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    GroupNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Im2Col {
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    /// `out[i] = x[index[i]]`, a bijection.
    Gather { x: Var, index: Vec<usize> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-threaded gradient tape. One tape per forward/backward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which nothing requires gradients (sampling, evaluation).
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant (never receives a gradient).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a free leaf that collects a gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter once per tape; later calls return the same node,
    /// so every use of a shared weight accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let e = store.get(id);
        let v = self.push(e.value.clone(), Op::Leaf, e.trainable);
        self.params.insert(id, v);
        v
    }

    /// Whether `id` was used on this tape.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    // ---- forward ops -------------------------------------------------

    /// Matrix product `op(a) * op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let [ar, ac] = self.value(a).dims2("matmul")?;
        let [br, bc] = self.value(b).dims2("matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let va = if ta { View::transposed(ac) } else { View::row_major(ac) };
        let vb = if tb { View::transposed(bc) } else { View::row_major(bc) };
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            va,
            self.value(b).data(),
            vb,
            T::zero(),
            &mut out,
            View::row_major(n),
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&e| e * c).collect(),
        };
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Scale(x, c), rg)
    }

    /// `x[n×d] + b[d]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [_, d] = self.value(x).dims2("add_row_bias")?;
        if self.value(b).numel() != d {
            return Err(Error::dim("add_row_bias", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(t, Op::AddRowBias { x, b }, rg))
    }

    /// `x[C×...] + b[C]` broadcast over everything but the leading axis.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.value(b).numel() != c {
            return Err(Error::dim("add_channel_bias", self.shape(x), self.shape(b)));
        }
        let inner = self.value(x).numel() / c;
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for (ch, chunk) in data.chunks_mut(inner.max(1)).enumerate() {
            let bv = bias[ch];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(t, Op::AddChannelBias { x, b }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&e| e * sigmoid(e)).collect(),
        };
        let rg = self.any_grad(&[x]);
        self.push(t, Op::Silu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Transpose(x), rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rest = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            if self.shape(x)[1..] != rest[..] {
                return Err(Error::dim("concat", self.shape(*first), self.shape(x)));
            }
            lead += self.shape(x)[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(rest);
        let t = Tensor::new(shape, data)?;
        let rg = self.any_grad(xs);
        Ok(self.push(t, Op::Concat(xs.to_vec()), rg))
    }

    /// Softmax over the last axis, stabilised by per-slice max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let last = *v
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax", v.shape(), &[1]))?;
        if last == 0 {
            return Err(Error::dim("softmax", v.shape(), &[1]));
        }
        if !v.all_finite() {
            return Err(Error::Numeric {
                op: "softmax",
                detail: "non-finite input".into(),
            });
        }
        let mut data = v.data().to_vec();
        data.chunks_mut(last).for_each(softmax_in_place);
        let t = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    /// Group normalisation over `x[C×...]` with optional per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        groups: usize,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim("group_norm", &shape, &[groups]));
        }
        for p in [gamma, beta].into_iter().flatten() {
            if self.value(p).numel() != c {
                return Err(Error::dim("group_norm", &shape, self.shape(p)));
            }
        }
        let inner = self.value(x).numel() / c;
        let gsize = (c / groups) * inner;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        let mut mean = Vec::with_capacity(groups);
        let mut rstd = Vec::with_capacity(groups);
        let n = T::of(gsize as f64);
        for g in 0..groups {
            let seg = &src[g * gsize..(g + 1) * gsize];
            let mu = seg.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = seg.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / n;
            let r = T::one() / (var + T::of(eps)).sqrt();
            for (o, &v) in out[g * gsize..(g + 1) * gsize].iter_mut().zip(seg) {
                *o = (v - mu) * r;
            }
            mean.push(mu);
            rstd.push(r);
        }
        if gamma.is_some() || beta.is_some() {
            let gv = gamma.map(|g| self.value(g).data());
            let bv = beta.map(|b| self.value(b).data());
            for (ch, chunk) in out.chunks_mut(inner).enumerate() {
                let s = gv.map_or(T::one(), |g| g[ch]);
                let o = bv.map_or(T::zero(), |b| b[ch]);
                chunk.iter_mut().for_each(|v| *v = *v * s + o);
            }
        }
        let mut ins = vec![x];
        ins.extend(gamma);
        ins.extend(beta);
        let rg = self.any_grad(&ins);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Unfolds `x[C×H×W]` into `[(C·k·k) × (Ho·Wo)]` patch columns.
    pub fn im2col(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        let [c, h, w] = self.value(x).dims3("im2col")?;
        if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim("im2col", &[c, h, w], &[k, stride, pad]));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * k * k * ho * wo];
        im2col_into(src, &mut out, c, h, w, k, stride, pad, ho, wo);
        let t = Tensor::new(vec![c * k * k, ho * wo], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Im2Col { x, k, stride, pad }, rg))
    }

    /// Cross-correlation of `x[C_in×H×W]` with `kernel[C_out×C_in×k×k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (cols, ho, wo) = self.conv_cols(x, kernel, stride, pad)?;
        self.conv_from_cols(cols, kernel, bias, ho, wo)
    }

    /// Patch columns for a convolution with `kernel`, plus the output extent.
    pub fn conv_cols(
        &mut self,
        x: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
    ) -> Result<(Var, usize, usize)> {
        let [cin, h, w] = self.value(x).dims3("conv2d")?;
        let ks = self.shape(kernel).to_vec();
        let [_, kcin, kh, kw] = ks[..] else {
            return Err(Error::dim("conv2d", &[cin, h, w], &ks));
        };
        if kcin != cin || kh != kw {
            return Err(Error::dim("conv2d", &[cin, h, w], &ks));
        }
        let cols = self.im2col(x, kh, stride, pad)?;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kh) / stride + 1;
        Ok((cols, ho, wo))
    }

    pub fn conv_from_cols(
        &mut self,
        cols: Var,
        kernel: Var,
        bias: Option<Var>,
        ho: usize,
        wo: usize,
    ) -> Result<Var> {
        let cout = self.shape(kernel)[0];
        let flat = self.value(kernel).numel() / cout;
        let wmat = self.reshape(kernel, &[cout, flat])?;
        let mut y = self.matmul(wmat, cols)?;
        if let Some(b) = bias {
            y = self.add_channel_bias(y, b)?;
        }
        self.reshape(y, &[cout, ho, wo])
    }

    /// Nearest-neighbour 2× upsampling of `x[C×H×W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [c, h, w] = self.value(x).dims3("upsample2x")?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let t = Tensor::new(vec![c, h2, w2], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Upsample2x(x), rg))
    }

    /// Rearranges `x[C×H×W]` into `[C·f²×H/f×W/f]`; channel `c·f² + dy·f + dx`
    /// holds pixel offset `(dy, dx)` of channel `c`.
    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Result<Var> {
        let [c, h, w] = self.value(x).dims3("space_to_depth")?;
        if f == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::dim("space_to_depth", &[c, h, w], &[f, f]));
        }
        let (ho, wo) = (h / f, w / f);
        let mut index = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for dy in 0..f {
                for dx in 0..f {
                    for y in 0..ho {
                        for xx in 0..wo {
                            index.push((ch * h + y * f + dy) * w + xx * f + dx);
                        }
                    }
                }
            }
        }
        self.gather(x, index, vec![c * f * f, ho, wo])
    }

    /// Inverse of [`Tape::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Result<Var> {
        let [cf, ho, wo] = self.value(x).dims3("depth_to_space")?;
        if f == 0 || cf % (f * f) != 0 {
            return Err(Error::dim("depth_to_space", &[cf, ho, wo], &[f, f]));
        }
        let c = cf / (f * f);
        let (h, w) = (ho * f, wo * f);
        let mut index = vec![0; cf * ho * wo];
        let mut src = 0;
        for ch in 0..c {
            for dy in 0..f {
                for dx in 0..f {
                    for y in 0..ho {
                        for xx in 0..wo {
                            index[(ch * h + y * f + dy) * w + xx * f + dx] = src;
                            src += 1;
                        }
                    }
                }
            }
        }
        self.gather(x, index, vec![c, h, w])
    }

    fn gather(&mut self, x: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(t, Op::Gather { x, index }, rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q[n×D]`, `k[m×D]`, `v[m×D]`; heads split `D` into contiguous column
    /// blocks of width `D/heads`, and the per-head results are concatenated
    /// back along columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let [n, d] = self.value(q).dims2("attention")?;
        let [m, dk] = self.value(k).dims2("attention")?;
        if dk != d || self.shape(v) != self.shape(k) {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", &[n, d], &[heads]));
        }
        if m == 0 {
            return Err(Error::dim("attention", &[n, d], &[m, dk]));
        }
        let hd = d / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let mut probs = vec![T::zero(); heads * n * m];
        let mut out = vec![T::zero(); n * d];
        {
            let (qd, kd, vd) = (
                self.value(q).data(),
                self.value(k).data(),
                self.value(v).data(),
            );
            for h in 0..heads {
                let p = &mut probs[h * n * m..(h + 1) * n * m];
                gemm(
                    n,
                    hd,
                    m,
                    scale,
                    qd,
                    View::row_major(d).at(h * hd),
                    kd,
                    View::transposed(d).at(h * hd),
                    T::zero(),
                    p,
                    View::row_major(m),
                );
                if !p.iter().all(|x| x.is_finite()) {
                    return Err(Error::Numeric {
                        op: "attention",
                        detail: "non-finite attention logits".into(),
                    });
                }
                p.chunks_mut(m).for_each(softmax_in_place);
                gemm(
                    n,
                    m,
                    hd,
                    T::one(),
                    p,
                    View::row_major(m),
                    vd,
                    View::row_major(d).at(h * hd),
                    T::zero(),
                    &mut out,
                    View::row_major(d).at(h * hd),
                );
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = T::of(self.value(a).numel() as f64);
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    // ---- backward ----------------------------------------------------

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g);
        }
        Ok(())
    }

    /// Gradient of a node after `backward` (leaves only retain theirs).
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[T]> {
        self.param_var(id).and_then(|v| self.grad(v))
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let g = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    fn acc_slice(&mut self, v: Var, src: &[T]) {
        self.acc(v, |g| g.iter_mut().zip(src).for_each(|(a, &b)| *a += b));
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        // Temporarily move the op out so `self` can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => self.back_matmul(*a, *b, *ta, *tb, i, g),
            Op::Add(a, b) => {
                self.acc_slice(*a, g);
                self.acc_slice(*b, g);
            }
            Op::Sub(a, b) => {
                self.acc_slice(*a, g);
                self.acc(*b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.acc(*a, |ga| {
                    for ((x, &y), &gv) in ga.iter_mut().zip(&bv).zip(g) {
                        *x += y * gv;
                    }
                });
                self.acc(*b, |gb| {
                    for ((x, &y), &gv) in gb.iter_mut().zip(&av).zip(g) {
                        *x += y * gv;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, &b)| *a += b * c));
            }
            Op::AddRowBias { x, b } => {
                self.acc_slice(*x, g);
                let d = self.nodes[b.0].value.numel();
                self.acc(*b, |gb| {
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                });
            }
            Op::AddChannelBias { x, b } => {
                self.acc_slice(*x, g);
                let c = self.nodes[b.0].value.numel();
                let inner = g.len() / c;
                self.acc(*b, |gb| {
                    for (ch, chunk) in g.chunks(inner.max(1)).enumerate() {
                        gb[ch] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.nodes[x.0].value.data().to_vec();
                self.acc(*x, |gx| {
                    for ((a, &v), &gv) in gx.iter_mut().zip(&xv).zip(g) {
                        let s = sigmoid(v);
                        *a += gv * s * (T::one() + v * (T::one() - s));
                    }
                });
            }
            Op::Reshape(x) => self.acc_slice(*x, g),
            Op::Transpose(x) => {
                let [r, c] = self.nodes[x.0].value.dims2("transpose").unwrap();
                // output is c×r; g[j*r + i] flows to x[i*c + j]
                self.acc(*x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.nodes[x.0].value.numel();
                    self.acc_slice(x, &g[off..off + n]);
                    off += n;
                }
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let last = *self.nodes[i].value.shape().last().unwrap();
                self.acc(*x, |gx| {
                    for ((gxr, yr), gr) in gx.chunks_mut(last).zip(y.chunks(last)).zip(g.chunks(last)) {
                        let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
                        for ((a, &p), &q) in gxr.iter_mut().zip(yr).zip(gr) {
                            *a += p * (q - dot);
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => self.back_group_norm(*x, *gamma, *beta, *groups, mean, rstd, g),
            Op::Im2Col { x, k, stride, pad } => {
                let [c, h, w] = self.nodes[x.0].value.dims3("im2col").unwrap();
                let (k, stride, pad) = (*k, *stride, *pad);
                let ho = (h + 2 * pad - k) / stride + 1;
                let wo = (w + 2 * pad - k) / stride + 1;
                self.acc(*x, |gx| col2im_add(g, gx, c, h, w, k, stride, pad, ho, wo));
            }
            Op::Gather { x, index } => {
                self.acc(*x, |gx| {
                    for (&j, &gv) in index.iter().zip(g) {
                        gx[j] += gv;
                    }
                });
            }
            Op::Upsample2x(x) => {
                let [c, h, w] = self.nodes[x.0].value.dims3("upsample2x").unwrap();
                let (h2, w2) = (2 * h, 2 * w);
                self.acc(*x, |gx| {
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                gx[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.back_attention(*q, *k, *v, *heads, probs, g),
            Op::Mse(a, b) => {
                let n = T::of(self.nodes[a.0].value.numel() as f64);
                let two = T::of(2.0) * g[0] / n;
                let diff: Vec<T> = self.nodes[a.0]
                    .value
                    .data()
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(&x, &y)| (x - y) * two)
                    .collect();
                self.acc_slice(*a, &diff);
                self.acc(*b, |gb| gb.iter_mut().zip(&diff).for_each(|(a, &d)| *a -= d));
            }
            Op::Sum(x) => {
                let s = g[0];
                self.acc(*x, |gx| gx.iter_mut().for_each(|a| *a += s));
            }
        }
        self.nodes[i].op = op;
    }

    fn back_matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool, out: usize, g: &[T]) {
        let [ar, ac] = self.nodes[a.0].value.dims2("matmul").unwrap();
        let [br, bc] = self.nodes[b.0].value.dims2("matmul").unwrap();
        let [m, n] = self.nodes[out].value.dims2("matmul").unwrap();
        let k = if ta { ar } else { ac };
        let gv = View::row_major(n);
        if self.nodes[a.0].requires_grad {
            // dA' = G·B'ᵀ  (A' = op(A), B' = op(B)); store into A layout.
            let bval = self.nodes[b.0].value.data().to_vec();
            let vb_t = if tb { View::row_major(bc) } else { View::transposed(bc) };
            self.acc(a, |ga| {
                // When ta, dA = (dA')ᵀ: write through a transposed view.
                let vc = if ta { View::transposed(ac) } else { View::row_major(ac) };
                gemm(m, n, k, T::one(), g, gv, &bval, vb_t, T::one(), ga, vc);
            });
        }
        if self.nodes[b.0].requires_grad {
            // dB' = A'ᵀ·G
            let aval = self.nodes[a.0].value.data().to_vec();
            let va_t = if ta { View::row_major(ac) } else { View::transposed(ac) };
            self.acc(b, |gb| {
                let vc = if tb { View::transposed(bc) } else { View::row_major(bc) };
                gemm(k, m, n, T::one(), &aval, va_t, g, gv, T::one(), gb, vc);
            });
        }
        let _ = br;
    }

    #[allow(clippy::too_many_arguments)]
    fn back_group_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        groups: usize,
        mean: &[T],
        rstd: &[T],
        g: &[T],
    ) {
        let xv = self.nodes[x.0].value.data().to_vec();
        let c = self.nodes[x.0].value.shape()[0];
        let inner = xv.len() / c;
        let gsize = (c / groups) * inner;
        let gam = gamma.map(|v| self.nodes[v.0].value.data().to_vec());
        let xhat: Vec<T> = xv
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let grp = idx / gsize;
                (v - mean[grp]) * rstd[grp]
            })
            .collect();
        if let Some(b) = beta {
            self.acc(b, |gb| {
                for (ch, chunk) in g.chunks(inner).enumerate() {
                    gb[ch] += chunk.iter().fold(T::zero(), |a, &v| a + v);
                }
            });
        }
        if let Some(gm) = gamma {
            self.acc(gm, |gg| {
                for (ch, (gc, xc)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    gg[ch] += gc.iter().zip(xc).fold(T::zero(), |a, (&p, &q)| a + p * q);
                }
            });
        }
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let dxhat: Vec<T> = g
            .iter()
            .enumerate()
            .map(|(idx, &gv)| match &gam {
                Some(gm) => gv * gm[idx / inner],
                None => gv,
            })
            .collect();
        let n = T::of(gsize as f64);
        let mut dx = vec![T::zero(); xv.len()];
        for grp in 0..groups {
            let r = grp * gsize..(grp + 1) * gsize;
            let dh = &dxhat[r.clone()];
            let xh = &xhat[r.clone()];
            let m1 = dh.iter().fold(T::zero(), |a, &v| a + v) / n;
            let m2 = dh.iter().zip(xh).fold(T::zero(), |a, (&p, &q)| a + p * q) / n;
            for ((o, &d), &xx) in dx[r].iter_mut().zip(dh).zip(xh) {
                *o = rstd[grp] * (d - m1 - xx * m2);
            }
        }
        self.acc_slice(x, &dx);
    }

    fn back_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, probs: &[T], g: &[T]) {
        let [n, d] = self.nodes[q.0].value.dims2("attention").unwrap();
        let m = self.nodes[k.0].value.shape()[0];
        let hd = d / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let qd = self.nodes[q.0].value.data().to_vec();
        let kd = self.nodes[k.0].value.data().to_vec();
        let vd = self.nodes[v.0].value.data().to_vec();
        let mut dq = vec![T::zero(); n * d];
        let mut dk = vec![T::zero(); m * d];
        let mut dv = vec![T::zero(); m * d];
        let mut dp = vec![T::zero(); n * m];
        for h in 0..heads {
            let p = &probs[h * n * m..(h + 1) * n * m];
            let col = View::row_major(d).at(h * hd);
            // dV_h = Pᵀ·dO_h
            gemm(m, n, hd, T::one(), p, View::transposed(m), g, col, T::zero(), &mut dv, col);
            // dP = dO_h·V_hᵀ
            gemm(
                n,
                hd,
                m,
                T::one(),
                g,
                col,
                &vd,
                View::transposed(d).at(h * hd),
                T::zero(),
                &mut dp,
                View::row_major(m),
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for (dr, pr) in dp.chunks_mut(m).zip(p.chunks(m)) {
                let dot = dr.iter().zip(pr).fold(T::zero(), |a, (&x, &y)| a + x * y);
                for (x, &y) in dr.iter_mut().zip(pr) {
                    *x = y * (*x - dot);
                }
            }
            // dQ_h = dS·K_h·scale ; dK_h = dSᵀ·Q_h·scale
            gemm(n, m, hd, scale, &dp, View::row_major(m), &kd, col, T::zero(), &mut dq, col);
            gemm(m, n, hd, scale, &dp, View::transposed(m), &qd, col, T::zero(), &mut dk, col);
        }
        self.acc_slice(q, &dq);
        self.acc_slice(k, &dk);
        self.acc_slice(v, &dv);
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col_into<T: Real>(
    src: &[T],
    out: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let ncol = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut out[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[base + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    cols: &[T],
    gx: &mut [T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let ncol = ho * wo;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ch * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            gx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
