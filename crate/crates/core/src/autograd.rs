//! Reverse-mode automatic differentiation over a flat tape.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with the operation that produced it. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every node that requires them, including
//! intermediate activations (Grad-CAM reads those directly).
//!
//! Layout conventions: image-like tensors are `[batch, height, width, channels]`;
//! "last axis" operations (linear maps, layer norm, softmax) act on the
//! innermost, contiguous dimension.

use crate::error::{Error, Result};
use crate::tensor::{numel, Float, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `x + b` where `b`'s shape is a suffix of `x`'s shape.
    AddSuffix(Var, Var),
    /// `x * s` where `s`'s shape is a suffix of `x`'s shape.
    MulSuffix(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    /// `x * s` for a single-element `s`.
    MulScalar(Var, Var),
    Abs(Var),
    /// `alpha * x + (1 - alpha) * y` for a single-element `alpha`.
    Convex(Var, Var, Var),
    Sigmoid(Var),
    Gelu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Roll {
        x: Var,
        shift_h: isize,
        shift_w: isize,
    },
    PadHw(Var),
    CropHw(Var),
    ConcatLast(Vec<Var>),
    MeanMiddle(Var),
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<T>,
        weights: Vec<T>,
        norm: T,
    },
    Sum(Var),
    Mean(Var),
    PickSum {
        x: Var,
        index: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn suffix_groups(x: &[usize], s: &[usize]) -> Result<usize> {
    if s.len() > x.len() || x[x.len() - s.len()..] != *s {
        return Err(Error::Shape(format!(
            "shape {s:?} is not a suffix of {x:?}"
        )));
    }
    Ok(numel(&x[..x.len() - s.len()]))
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn nhwc(op: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::Shape(format!(
            "{op}: expected [batch, height, width, channels], got {shape:?}"
        ))),
    }
}

#[inline]
fn gelu<T: Float>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gelu_grad<T: Float>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// `alpha * x + (1 - alpha) * y`, kept inside `[min(x, y), max(x, y)]` despite
/// rounding. Exact at `alpha` 0 and 1.
pub fn convex_combination<T: Float>(x: T, y: T, alpha: T) -> T {
    if x == y {
        return x;
    }
    let v = alpha * x + (T::one() - alpha) * y;
    v.max(x.min(y)).min(x.max(y))
}

fn softmax_rows<T: Float>(data: &mut [T], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        let inv = T::one() / total;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_suffix(&mut self, x: Var, b: Var) -> Result<Var> {
        suffix_groups(self.shape(x), self.shape(b))?;
        let mut v = self.value(x).clone();
        let bias = self.value(b).data();
        for chunk in v.data_mut().chunks_mut(bias.len()) {
            for (o, &s) in chunk.iter_mut().zip(bias) {
                *o += s;
            }
        }
        Ok(self.push(v, Op::AddSuffix(x, b), &[x, b]))
    }

    pub fn mul_suffix(&mut self, x: Var, s: Var) -> Result<Var> {
        suffix_groups(self.shape(x), self.shape(s))?;
        let mut v = self.value(x).clone();
        let scale = self.value(s).data();
        for chunk in v.data_mut().chunks_mut(scale.len()) {
            for (o, &s) in chunk.iter_mut().zip(scale) {
                *o *= s;
            }
        }
        Ok(self.push(v, Op::MulSuffix(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let v = self.value(x).map(|a| a + c);
        self.push(v, Op::AddScalar(x), &[x])
    }

    /// Multiply every element of `x` by the single value held in `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Shape(format!(
                "mul_scalar: scale must hold one value, has shape {:?}",
                self.shape(s)
            )));
        }
        let c = self.value(s).item();
        let v = self.value(x).map(|a| a * c);
        Ok(self.push(v, Op::MulScalar(x, s), &[x, s]))
    }

    /// Elementwise `alpha * x + (1 - alpha) * y` with `alpha` a single value in
    /// `[0, 1]`; every output lies between its two inputs.
    pub fn convex(&mut self, x: Var, y: Var, alpha: Var) -> Result<Var> {
        same_shape("convex", self.shape(x), self.shape(y))?;
        if self.value(alpha).numel() != 1 {
            return Err(Error::Shape(format!(
                "convex: weight must hold one value, has shape {:?}",
                self.shape(alpha)
            )));
        }
        let a = self.value(alpha).item();
        let v = self.value(x).zip_map(self.value(y), |p, q| convex_combination(p, q, a));
        Ok(self.push(v, Op::Convex(x, y, alpha), &[x, y, alpha]))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.abs());
        self.push(v, Op::Abs(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| T::one() / (T::one() + (-a).exp()));
        self.push(v, Op::Sigmoid(x), &[x])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    // ---- linear algebra ---------------------------------------------

    /// `x @ w (+ b)` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let k = *xs.last().ok_or_else(|| Error::Shape("linear: scalar input".into()))?;
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::Shape(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let n = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} does not match output width {n}",
                    self.shape(b)
                )));
            }
        }
        let m = self.value(x).numel() / k.max(1);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                for (o, &s) in row.iter_mut().zip(bias) {
                    *o += s;
                }
            }
        }
        let value = Tensor::from_vec(&out_shape, out)?;
        let parents: Vec<Var> = std::iter::once(x).chain(Some(w)).chain(b).collect();
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    /// Batched `a @ b` (or `a @ b^T`) on rank-3 tensors.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ([ba, m, k], [bb, p, q]) = (
            <[usize; 3]>::try_from(sa.as_slice())
                .map_err(|_| Error::Shape(format!("batch_matmul: lhs {sa:?} not rank 3")))?,
            <[usize; 3]>::try_from(sb.as_slice())
                .map_err(|_| Error::Shape(format!("batch_matmul: rhs {sb:?} not rank 3")))?,
        );
        let (kb, n) = if trans_b { (q, p) } else { (p, q) };
        if ba != bb || kb != k {
            return Err(Error::Shape(format!(
                "batch_matmul: {sa:?} x {sb:?} (trans_b={trans_b}) incompatible"
            )));
        }
        let mut out = vec![T::zero(); ba * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..ba {
                T::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let value = Tensor::from_vec(&[ba, m, n], out)?;
        Ok(self.push(value, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let mut v = self.value(x).clone();
        softmax_rows(v.data_mut(), cols);
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "layer_norm: affine shapes {:?}/{:?} do not match width {c}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::lit(eps);
        let inv_c = T::one() / T::lit(c as f64);
        let xv = self.value(x);
        let rows = xv.numel() / c;
        let mut out = Vec::with_capacity(xv.numel());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = T::one() / (var + eps).sqrt();
            for ((&v, &gi), &bi) in row.iter().zip(g).zip(bt) {
                out.push((v - mean) * rstd * gi + bi);
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::from_vec(xv.shape(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        ))
    }

    /// Depthwise 2-D convolution on NHWC input; `w` is `[k, k, C]`, stride 1,
    /// symmetric zero padding `pad`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (bs, h, wd, c) = nhwc("depthwise_conv", self.shape(x))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != ws[1] || ws[2] != c || self.shape(b) != [c] {
            return Err(Error::Shape(format!(
                "depthwise_conv: kernel {ws:?} / bias {:?} incompatible with {c} channels",
                self.shape(b)
            )));
        }
        let k = ws[0];
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!(
                "depthwise_conv: kernel {k} larger than padded input {h}x{wd}"
            )));
        }
        let oh = h + 2 * pad - k + 1;
        let ow = wd + 2 * pad - k + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); bs * oh * ow * c];
        for n in 0..bs {
            for i in 0..oh {
                for j in 0..ow {
                    let o = &mut out[((n * oh + i) * ow + j) * c..][..c];
                    o.copy_from_slice(bv);
                    for ky in 0..k {
                        let iy = i + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let iy = iy - pad;
                        for kx in 0..k {
                            let ix = j + kx;
                            if ix < pad || ix - pad >= wd {
                                continue;
                            }
                            let ix = ix - pad;
                            let xs = &xv[((n * h + iy) * wd + ix) * c..][..c];
                            let wk = &wv[(ky * k + kx) * c..][..c];
                            for ((o, &a), &b) in o.iter_mut().zip(xs).zip(wk) {
                                *o += a * b;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[bs, oh, ow, c], out)?;
        Ok(self.push(value, Op::DepthwiseConv { x, w, b, pad }, &[x, w, b]))
    }

    // ---- shape manipulation -----------------------------------------

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!(
                "permute: {axes:?} is not a permutation of rank {rank}"
            )));
        }
        let v = self.value(x).permute(axes);
        Ok(self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Cyclic shift of an NHWC tensor along height and width.
    pub fn roll(&mut self, x: Var, shift_h: isize, shift_w: isize) -> Result<Var> {
        let v = roll_nhwc(self.value(x), shift_h, shift_w)?;
        Ok(self.push(
            v,
            Op::Roll {
                x,
                shift_h,
                shift_w,
            },
            &[x],
        ))
    }

    /// Zero-pad an NHWC tensor at the bottom/right to `h x w`.
    pub fn pad_hw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (bs, ih, iw, c) = nhwc("pad_hw", self.shape(x))?;
        if h < ih || w < iw {
            return Err(Error::Shape(format!(
                "pad_hw: target {h}x{w} smaller than {ih}x{iw}"
            )));
        }
        let mut out = Tensor::zeros(&[bs, h, w, c]);
        copy_window(self.value(x), &mut out, ih, iw);
        Ok(self.push(out, Op::PadHw(x), &[x]))
    }

    /// Keep the top-left `h x w` window of an NHWC tensor.
    pub fn crop_hw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (bs, ih, iw, c) = nhwc("crop_hw", self.shape(x))?;
        if h > ih || w > iw {
            return Err(Error::Shape(format!(
                "crop_hw: target {h}x{w} larger than {ih}x{iw}"
            )));
        }
        let mut out = Tensor::zeros(&[bs, h, w, c]);
        copy_window(self.value(x), &mut out, h, w);
        Ok(self.push(out, Op::CropHw(x), &[x]))
    }

    /// Concatenate along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?)
            .to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!(
                    "concat_last: {s:?} incompatible with {first:?}"
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = numel(lead);
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &wdt) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * wdt..(r + 1) * wdt]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Mean over every axis between the first and the last: `[B, ..., C] -> [B, C]`.
    pub fn mean_middle(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::Shape(format!("mean_middle: rank of {s:?} below 3")));
        }
        let (b, c) = (s[0], s[s.len() - 1]);
        let n = numel(&s[1..s.len() - 1]);
        let inv = T::one() / T::lit(n as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * c];
        for i in 0..b {
            let o = &mut out[i * c..(i + 1) * c];
            for row in xv[i * n * c..(i + 1) * n * c].chunks(c) {
                for (a, &v) in o.iter_mut().zip(row) {
                    *a += v;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::from_vec(&[b, c], out)?;
        Ok(self.push(value, Op::MeanMiddle(x), &[x]))
    }

    /// Rows of a `[rows, width]` table selected by `index`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || index.iter().any(|&i| i >= s[0]) {
            return Err(Error::Shape(format!(
                "gather_rows: bad index into table {s:?}"
            )));
        }
        let w = s[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index {
            out.extend_from_slice(&tv[i * w..(i + 1) * w]);
        }
        let value = Tensor::from_vec(&[index.len(), w], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                index: index.to_vec(),
            },
            &[table],
        ))
    }

    // ---- reductions and losses ----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let v = Tensor::scalar(self.value(x).sum() / n);
        self.push(v, Op::Mean(x), &[x])
    }

    /// `sum_i x[i, index[i]]` for a `[rows, cols]` input.
    pub fn pick_sum(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != index.len() || index.iter().any(|&i| i >= s[1]) {
            return Err(Error::Shape(format!("pick_sum: bad index for {s:?}")));
        }
        let xv = self.value(x).data();
        let total = index
            .iter()
            .enumerate()
            .map(|(r, &c)| xv[r * s[1] + c])
            .sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::PickSum {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits.
    ///
    /// With `class_weights`, each sample is weighted by its true class and the
    /// sum is normalized by the total weight.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        class_weights: Option<&[f64]>,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [b, k] = <[usize; 2]>::try_from(s.as_slice())
            .map_err(|_| Error::Shape(format!("cross_entropy: logits {s:?} not rank 2")))?;
        if labels.len() != b {
            return Err(Error::Shape(format!(
                "cross_entropy: {} labels for batch {b}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Invalid(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        if let Some(w) = class_weights {
            if w.len() != k {
                return Err(Error::Invalid(format!(
                    "{} class weights for {k} classes",
                    w.len()
                )));
            }
        }
        let mut probs = self.value(logits).clone();
        let lv = self.value(logits).data();
        let mut weights = Vec::with_capacity(b);
        let mut total = T::zero();
        let mut norm = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            let w = class_weights.map_or(T::one(), |cw| T::lit(cw[label]));
            total += w * (lse - row[label]);
            norm += w;
            weights.push(w);
        }
        softmax_rows(probs.data_mut(), k);
        let value = Tensor::scalar(total / norm);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                weights,
                norm,
            },
            &[logits],
        ))
    }

    // ---- reverse pass --------------------------------------------------

    /// Backpropagate from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: root must be scalar, has shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddSuffix(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let mut gb = Tensor::zeros(self.shape(*b));
                    let n = gb.numel();
                    for chunk in g.data().chunks(n) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MulSuffix(x, s) => {
                let sv = self.value(*s).data();
                let n = sv.len();
                if self.wants(*x) {
                    let mut gx = g.clone();
                    for chunk in gx.data_mut().chunks_mut(n) {
                        for (o, &v) in chunk.iter_mut().zip(sv) {
                            *o *= v;
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*s) {
                    let mut gs = Tensor::zeros(self.shape(*s));
                    for (gc, xc) in g.data().chunks(n).zip(self.value(*x).data().chunks(n)) {
                        for ((o, &gv), &xv) in gs.data_mut().iter_mut().zip(gc).zip(xc) {
                            *o += gv * xv;
                        }
                    }
                    self.accumulate(grads, *s, gs);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::MulScalar(x, s) => {
                if self.wants(*x) {
                    let c = self.value(*s).item();
                    self.accumulate(grads, *x, g.map(|v| v * c));
                }
                if self.wants(*s) {
                    let dot = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&a, &b)| a * b)
                        .sum::<T>();
                    let gs = Tensor::full(self.shape(*s), dot);
                    self.accumulate(grads, *s, gs);
                }
            }
            Op::Convex(x, y, alpha) => {
                let a = self.value(*alpha).item();
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * a));
                }
                if self.wants(*y) {
                    self.accumulate(grads, *y, g.map(|v| v * (T::one() - a)));
                }
                if self.wants(*alpha) {
                    let dot = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data().iter().zip(self.value(*y).data()))
                        .map(|(&gv, (&p, &q))| gv * (p - q))
                        .sum::<T>();
                    self.accumulate(grads, *alpha, Tensor::full(self.shape(*alpha), dot));
                }
            }
            Op::Abs(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y));
                self.accumulate(grads, *x, gx);
            }
            Op::Gelu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| gv * gelu_grad(xv));
                self.accumulate(grads, *x, gx);
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = g.numel() / n.max(1);
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), false, self.value(*w).data(), true, &mut gx, false);
                    let gx = Tensor::from_vec(self.shape(*x), gx).expect("linear grad shape");
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*x).data(), true, g.data(), false, &mut gw, false);
                    self.accumulate(grads, *w, Tensor::from_vec(&[k, n], gw).unwrap());
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut gb = vec![T::zero(); n];
                        for row in g.data().chunks(n) {
                            for (o, &v) in gb.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(&[n], gb).unwrap());
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a).to_vec();
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.dim(2);
                let gd = g.data();
                if self.wants(*a) {
                    // dA = dC @ op(B)^T
                    let bv = self.value(*b).data();
                    let mut ga = vec![T::zero(); bt * m * k];
                    for i in 0..bt {
                        T::gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(&sa, ga).unwrap());
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let sb = self.shape(*b).to_vec();
                    let mut gb = vec![T::zero(); bt * k * n];
                    for i in 0..bt {
                        let (ai, gi) = (&av[i * m * k..(i + 1) * m * k], &gd[i * m * n..(i + 1) * m * n]);
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]; dB = dC^T @ A
                            T::gemm(n, m, k, gi, true, ai, false, out, false);
                        } else {
                            // B is [k, n]; dB = A^T @ dC
                            T::gemm(k, m, n, ai, true, gi, false, out, false);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&sb, gb).unwrap());
                }
            }
            Op::Softmax(x) => {
                let cols = *g.shape().last().unwrap();
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(cols).zip(node.value.data().chunks(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for (o, &y) in gr.iter_mut().zip(yr) {
                        *o = y * (*o - dot);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let c = *g.shape().last().unwrap();
                let inv_c = T::one() / T::lit(c as f64);
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut ggam = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let want_x = self.wants(*x);
                let mut gx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut xhat = vec![T::zero(); c];
                let mut gxhat = vec![T::zero(); c];
                for (r, (gr, xr)) in g.data().chunks(c).zip(xv.chunks(c)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    for j in 0..c {
                        xhat[j] = (xr[j] - mu) * rs;
                        gbeta[j] += gr[j];
                        ggam[j] += gr[j] * xhat[j];
                        gxhat[j] = gr[j] * gam[j];
                    }
                    if want_x {
                        let m1: T = gxhat.iter().copied().sum::<T>() * inv_c;
                        let m2: T = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                        for j in 0..c {
                            gx[r * c + j] = rs * (gxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), gx).unwrap());
                }
                self.accumulate(grads, *gamma, Tensor::from_vec(&[c], ggam).unwrap());
                self.accumulate(grads, *beta, Tensor::from_vec(&[c], gbeta).unwrap());
            }
            Op::DepthwiseConv { x, w, b, pad } => {
                let (bs, h, wd, c) = nhwc("depthwise_conv", self.shape(*x)).unwrap();
                let k = self.shape(*w)[0];
                let (oh, ow) = (g.dim(1), g.dim(2));
                let pad = *pad;
                let (want_x, want_w) = (self.wants(*x), self.wants(*w));
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let gd = g.data();
                let mut gx = if want_x { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut gw = vec![T::zero(); wv.len()];
                let mut gb = vec![T::zero(); c];
                for n in 0..bs {
                    for i in 0..oh {
                        for j in 0..ow {
                            let go = &gd[((n * oh + i) * ow + j) * c..][..c];
                            for (o, &v) in gb.iter_mut().zip(go) {
                                *o += v;
                            }
                            for ky in 0..k {
                                let iy = i + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for kx in 0..k {
                                    let ix = j + kx;
                                    if ix < pad || ix - pad >= wd {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    let off = ((n * h + iy) * wd + ix) * c;
                                    let koff = (ky * k + kx) * c;
                                    if want_w {
                                        let xs = &xv[off..off + c];
                                        for ((o, &gv), &xval) in gw[koff..koff + c].iter_mut().zip(go).zip(xs) {
                                            *o += gv * xval;
                                        }
                                    }
                                    if want_x {
                                        let wk = &wv[koff..koff + c];
                                        for ((o, &gv), &wval) in gx[off..off + c].iter_mut().zip(go).zip(wk) {
                                            *o += gv * wval;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), gx).unwrap());
                }
                self.accumulate(grads, *w, Tensor::from_vec(self.shape(*w), gw).unwrap());
                self.accumulate(grads, *b, Tensor::from_vec(&[c], gb).unwrap());
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                self.accumulate(grads, *x, g.permute(&inverse));
            }
            Op::Reshape(x) => {
                let gx = g.clone().reshape(self.shape(*x)).unwrap();
                self.accumulate(grads, *x, gx);
            }
            Op::Roll {
                x,
                shift_h,
                shift_w,
            } => {
                self.accumulate(grads, *x, roll_nhwc(g, -shift_h, -shift_w).unwrap());
            }
            Op::PadHw(x) => {
                let s = self.shape(*x);
                let mut gx = Tensor::zeros(s);
                copy_window(g, &mut gx, s[1], s[2]);
                self.accumulate(grads, *x, gx);
            }
            Op::CropHw(x) => {
                let mut gx = Tensor::zeros(self.shape(*x));
                copy_window(g, &mut gx, g.dim(1), g.dim(2));
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatLast(parts) => {
                let total = *g.shape().last().unwrap();
                let rows = g.numel() / total;
                let mut offset = 0;
                for &p in parts {
                    let wdt = *self.shape(p).last().unwrap();
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(rows * wdt);
                        for r in 0..rows {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + wdt]);
                        }
                        self.accumulate(grads, p, Tensor::from_vec(self.shape(p), gp).unwrap());
                    }
                    offset += wdt;
                }
            }
            Op::MeanMiddle(x) => {
                let s = self.shape(*x);
                let (b, c) = (s[0], s[s.len() - 1]);
                let n = numel(&s[1..s.len() - 1]);
                let inv = T::one() / T::lit(n as f64);
                let mut gx = Tensor::zeros(s);
                for i in 0..b {
                    let gi = &g.data()[i * c..(i + 1) * c];
                    for row in gx.data_mut()[i * n * c..(i + 1) * n * c].chunks_mut(c) {
                        for (o, &v) in row.iter_mut().zip(gi) {
                            *o = v * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { table, index } => {
                let s = self.shape(*table);
                let w = s[1];
                let mut gt = Tensor::zeros(s);
                for (r, &i) in index.iter().enumerate() {
                    for (o, &v) in gt.data_mut()[i * w..(i + 1) * w]
                        .iter_mut()
                        .zip(&g.data()[r * w..(r + 1) * w])
                    {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                weights,
                norm,
            } => {
                let k = probs.dim(1);
                let scale = g.item() / *norm;
                let mut gl = probs.clone();
                for (r, (&label, &w)) in labels.iter().zip(weights).enumerate() {
                    let row = &mut gl.data_mut()[r * k..(r + 1) * k];
                    row[label] -= T::one();
                    for v in row.iter_mut() {
                        *v *= w * scale;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.shape(*x), g.item());
                self.accumulate(grads, *x, gx);
            }
            Op::Mean(x) => {
                let n = T::lit(self.value(*x).numel() as f64);
                let gx = Tensor::full(self.shape(*x), g.item() / n);
                self.accumulate(grads, *x, gx);
            }
            Op::PickSum { x, index } => {
                let s = self.shape(*x);
                let mut gx = Tensor::zeros(s);
                for (r, &c) in index.iter().enumerate() {
                    gx.data_mut()[r * s[1] + c] = g.item();
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

fn roll_nhwc<T: Float>(x: &Tensor<T>, shift_h: isize, shift_w: isize) -> Result<Tensor<T>> {
    let (bs, h, w, c) = nhwc("roll", x.shape())?;
    let mut out = Tensor::zeros(x.shape());
    let sh = shift_h.rem_euclid(h.max(1) as isize) as usize;
    let sw = shift_w.rem_euclid(w.max(1) as isize) as usize;
    let src = x.data();
    let dst = out.data_mut();
    for n in 0..bs {
        for i in 0..h {
            let oi = (i + sh) % h;
            for j in 0..w {
                let oj = (j + sw) % w;
                let s = ((n * h + i) * w + j) * c;
                let d = ((n * h + oi) * w + oj) * c;
                dst[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Ok(out)
}

/// Copy the top-left `h x w` window of `src` into the top-left of `dst`.
fn copy_window<T: Float>(src: &Tensor<T>, dst: &mut Tensor<T>, h: usize, w: usize) {
    let (bs, c) = (src.dim(0), src.dim(3));
    let (sh, sw) = (src.dim(1), src.dim(2));
    let (dh, dw) = (dst.dim(1), dst.dim(2));
    let s = src.data();
    let d = dst.data_mut();
    for n in 0..bs {
        for i in 0..h {
            let so = ((n * sh + i) * sw) * c;
            let doff = ((n * dh + i) * dw) * c;
            d[doff..doff + w * c].copy_from_slice(&s[so..so + w * c]);
        }
    }
}
