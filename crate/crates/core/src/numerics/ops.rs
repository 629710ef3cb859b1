//! The differentiable operation library.
//!
//! Every op validates shapes, computes its forward value eagerly and
//! records a backward closure on the tape.

use super::scalar::{gemm, MatRef, Scalar};
use super::tape::{BackwardCtx, Op, Tape, Var};
use super::tensor::{shape_str, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

fn zeros<T: Scalar>(n: usize) -> Vec<T> {
    vec![T::zero(); n]
}

/// `(outer, len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct MatMul {
    ta: bool,
    tb: bool,
}

impl<T: Scalar> Op<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
        let mut aref = MatRef::new(a.data(), a.shape()[0], a.shape()[1]);
        let mut bref = MatRef::new(b.data(), b.shape()[0], b.shape()[1]);
        if self.ta {
            aref = aref.t();
        }
        if self.tb {
            bref = bref.t();
        }
        let out = ctx.output;
        let dc = MatRef::new(ctx.grad, out.shape()[0], out.shape()[1]);
        let da = ctx.needs[0].then(|| {
            let mut da = zeros(a.numel());
            if self.ta {
                gemm(bref, dc.t(), T::zero(), &mut da);
            } else {
                gemm(dc, bref.t(), T::zero(), &mut da);
            }
            da
        });
        let db = ctx.needs[1].then(|| {
            let mut db = zeros(b.numel());
            if self.tb {
                gemm(dc.t(), aref, T::zero(), &mut db);
            } else {
                gemm(aref.t(), dc, T::zero(), &mut db);
            }
            db
        });
        vec![da, db]
    }
}

struct Add;

impl<T: Scalar> Op<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad.to_vec();
        vec![ctx.needs[0].then(|| g.clone()), ctx.needs[1].then_some(g)]
    }
}

struct Sub;

impl<T: Scalar> Op<T> for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![
            ctx.needs[0].then(|| ctx.grad.to_vec()),
            ctx.needs[1].then(|| ctx.grad.iter().map(|&g| -g).collect()),
        ]
    }
}

struct Mul;

impl<T: Scalar> Op<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        vec![
            ctx.needs[0].then(|| ctx.grad.iter().zip(b).map(|(&g, &y)| g * y).collect()),
            ctx.needs[1].then(|| ctx.grad.iter().zip(a).map(|(&g, &x)| g * x).collect()),
        ]
    }
}

struct AddBias;

impl<T: Scalar> Op<T> for AddBias {
    fn name(&self) -> &'static str {
        "add_bias"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let n = ctx.inputs[1].numel();
        let db = ctx.needs[1].then(|| {
            let mut db = zeros(n);
            for row in ctx.grad.chunks(n) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            db
        });
        vec![ctx.needs[0].then(|| ctx.grad.to_vec()), db]
    }
}

struct Scale<T> {
    factor: T,
}

impl<T: Scalar> Op<T> for Scale<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.iter().map(|&g| g * self.factor).collect())]
    }
}

struct Act(Activation);

impl<T: Scalar> Op<T> for Act {
    fn name(&self) -> &'static str {
        match self.0 {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let y = ctx.output.data();
        let one = T::one();
        let g: Vec<T> = match self.0 {
            Activation::Relu => ctx.grad.iter().zip(y).map(|(&g, &y)| if y > T::zero() { g } else { T::zero() }).collect(),
            Activation::Sigmoid => ctx.grad.iter().zip(y).map(|(&g, &s)| g * s * (one - s)).collect(),
            Activation::Tanh => ctx.grad.iter().zip(y).map(|(&g, &t)| g * (one - t * t)).collect(),
        };
        vec![Some(g)]
    }
}

struct Softmax {
    axis: usize,
}

impl<T: Scalar> Op<T> for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let y = ctx.output.data();
        let (outer, len, inner) = split_axis(ctx.output.shape(), self.axis);
        let mut dx = zeros(y.len());
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut dot = T::zero();
                for l in 0..len {
                    let ix = base + l * inner;
                    dot += ctx.grad[ix] * y[ix];
                }
                for l in 0..len {
                    let ix = base + l * inner;
                    dx[ix] = y[ix] * (ctx.grad[ix] - dot);
                }
            }
        }
        vec![Some(dx)]
    }
}

/// Normalization over contiguous groups: shared by layer norm (group = last
/// extent, with affine) and the joint point/channel normalization (no affine).
struct Normalize<T> {
    group: usize,
    affine: bool,
    rstd: Vec<T>,
}

fn normalize_forward<T: Scalar>(x: &[T], group: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut xhat = zeros(x.len());
    let mut rstds = Vec::with_capacity(x.len() / group);
    let inv_n = T::one() / T::of(group as f64);
    for (src, dst) in x.chunks(group).zip(xhat.chunks_mut(group)) {
        let mean = src.iter().copied().sum::<T>() * inv_n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * rstd;
        }
        rstds.push(rstd);
    }
    (xhat, rstds)
}

impl<T: Scalar> Op<T> for Normalize<T> {
    fn name(&self) -> &'static str {
        if self.affine {
            "layer_norm"
        } else {
            "group_norm"
        }
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = self.group;
        let x = ctx.inputs[0].data();
        let n = T::of(g as f64);
        // Recover xhat from the input and the cached statistics.
        let mut xhat = zeros(x.len());
        for ((src, dst), &rstd) in x.chunks(g).zip(xhat.chunks_mut(g)).zip(&self.rstd) {
            let mean = src.iter().copied().sum::<T>() / n;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * rstd;
            }
        }
        let (dxhat, dgamma, dbeta) = if self.affine {
            let gamma = ctx.inputs[1].data();
            let mut dxhat = zeros(x.len());
            let mut dgamma = zeros(g);
            let mut dbeta = zeros(g);
            for ((grow, xrow), drow) in ctx.grad.chunks(g).zip(xhat.chunks(g)).zip(dxhat.chunks_mut(g)) {
                for j in 0..g {
                    dgamma[j] += grow[j] * xrow[j];
                    dbeta[j] += grow[j];
                    drow[j] = grow[j] * gamma[j];
                }
            }
            (dxhat, Some(dgamma), Some(dbeta))
        } else {
            (ctx.grad.to_vec(), None, None)
        };
        let dx = ctx.needs[0].then(|| {
            let mut dx = zeros(x.len());
            for (((drow, xrow), out), &rstd) in
                dxhat.chunks(g).zip(xhat.chunks(g)).zip(dx.chunks_mut(g)).zip(&self.rstd)
            {
                let mean_d = drow.iter().copied().sum::<T>() / n;
                let mean_dx = drow.iter().zip(xrow).map(|(&d, &xh)| d * xh).sum::<T>() / n;
                for j in 0..g {
                    out[j] = rstd * (drow[j] - mean_d - xrow[j] * mean_dx);
                }
            }
            dx
        });
        if self.affine {
            vec![dx, dgamma.filter(|_| ctx.needs[1]), dbeta.filter(|_| ctx.needs[2])]
        } else {
            vec![dx]
        }
    }
}

struct SwapLast2 {
    batch: usize,
    m: usize,
    n: usize,
}

fn swap_last2<T: Scalar>(x: &[T], batch: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = zeros(x.len());
    for b in 0..batch {
        let src = &x[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

impl<T: Scalar> Op<T> for SwapLast2 {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(swap_last2(ctx.grad, self.batch, self.n, self.m))]
    }
}

struct Reshape;

impl<T: Scalar> Op<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        vec![Some(ctx.grad.to_vec())]
    }
}

struct SliceCols {
    start: usize,
}

impl<T: Scalar> Op<T> for SliceCols {
    fn name(&self) -> &'static str {
        "slice_cols"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0];
        let cols = x.cols();
        let len = ctx.output.cols();
        let mut dx = zeros(x.numel());
        for (drow, grow) in dx.chunks_mut(cols).zip(ctx.grad.chunks(len)) {
            drow[self.start..self.start + len].copy_from_slice(grow);
        }
        vec![Some(dx)]
    }
}

struct ConcatCols;

impl<T: Scalar> Op<T> for ConcatCols {
    fn name(&self) -> &'static str {
        "concat_cols"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let total = ctx.output.cols();
        let mut start = 0;
        let mut out = Vec::with_capacity(ctx.inputs.len());
        for (x, &need) in ctx.inputs.iter().zip(&ctx.needs) {
            let w = x.cols();
            if need {
                let mut dx = Vec::with_capacity(x.numel());
                for grow in ctx.grad.chunks(total) {
                    dx.extend_from_slice(&grow[start..start + w]);
                }
                out.push(Some(dx));
            } else {
                out.push(None);
            }
            start += w;
        }
        out
    }
}

struct ConcatRows;

impl<T: Scalar> Op<T> for ConcatRows {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(ctx.inputs.len());
        for (x, &need) in ctx.inputs.iter().zip(&ctx.needs) {
            let n = x.numel();
            out.push(need.then(|| ctx.grad[start..start + n].to_vec()));
            start += n;
        }
        out
    }
}

struct GatherRows {
    index: Vec<usize>,
}

impl<T: Scalar> Op<T> for GatherRows {
    fn name(&self) -> &'static str {
        "gather_rows"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let x = ctx.inputs[0];
        let c = x.cols();
        let mut dx = zeros(x.numel());
        for (grow, &r) in ctx.grad.chunks(c).zip(&self.index) {
            for (d, &g) in dx[r * c..(r + 1) * c].iter_mut().zip(grow) {
                *d += g;
            }
        }
        vec![Some(dx)]
    }
}

struct RowScale<T> {
    scale: Vec<T>,
}

impl<T: Scalar> Op<T> for RowScale<T> {
    fn name(&self) -> &'static str {
        "row_scale"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let c = ctx.output.cols();
        let mut dx = ctx.grad.to_vec();
        for (row, &s) in dx.chunks_mut(c).zip(&self.scale) {
            for v in row {
                *v *= s;
            }
        }
        vec![Some(dx)]
    }
}

struct Sum {
    factor: f64,
}

impl<T: Scalar> Op<T> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let g = ctx.grad[0] * T::of(self.factor);
        vec![Some(vec![g; ctx.inputs[0].numel()])]
    }
}

struct MeanAxis {
    axis: usize,
}

impl<T: Scalar> Op<T> for MeanAxis {
    fn name(&self) -> &'static str {
        "mean_axis"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let (outer, len, inner) = split_axis(ctx.inputs[0].shape(), self.axis);
        let inv = T::one() / T::of(len as f64);
        let mut dx = zeros(outer * len * inner);
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    dx[(o * len + l) * inner + i] = ctx.grad[o * inner + i] * inv;
                }
            }
        }
        vec![Some(dx)]
    }
}

/// 3x3 patch extraction with zero padding over an `h x w x c` map; patch
/// layout is `(dy, dx, channel)`.
struct Im2Col3 {
    h: usize,
    w: usize,
    c: usize,
}

impl Im2Col3 {
    fn taps(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let (h, w) = (self.h as isize, self.w as isize);
        (0..h).flat_map(move |y| (0..w).map(move |x| (y, x))).enumerate().flat_map(move |(pix, (y, x))| {
            (0..9).filter_map(move |t| {
                let (sy, sx) = (y + t / 3 - 1, x + t % 3 - 1);
                (sy >= 0 && sy < h && sx >= 0 && sx < w).then_some((pix, t as usize, sy as usize, sx as usize))
            })
        })
    }
}

impl<T: Scalar> Op<T> for Im2Col3 {
    fn name(&self) -> &'static str {
        "im2col3"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> {
        let c = self.c;
        let mut dx = zeros(self.h * self.w * c);
        for (pix, t, sy, sx) in self.taps() {
            let src = &ctx.grad[pix * 9 * c + t * c..pix * 9 * c + (t + 1) * c];
            let dst = &mut dx[(sy * self.w + sx) * c..(sy * self.w + sx + 1) * c];
            for (d, &g) in dst.iter_mut().zip(src) {
                *d += g;
            }
        }
        vec![Some(dx)]
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(
            op,
            format!("shapes {} and {} differ", shape_str(tape.shape(a)), shape_str(tape.shape(b))),
        ));
    }
    Ok(())
}

fn require_rank2<T: Scalar>(tape: &Tape<T>, op: &'static str, v: Var) -> Result<(usize, usize)> {
    match tape.shape(v) {
        &[r, c] => Ok((r, c)),
        s => Err(Error::dim(op, format!("expected a matrix, got {}", shape_str(s)))),
    }
}

impl<T: Scalar> Tape<T> {
    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = require_rank2(self, "matmul", a)?;
        let (br, bc) = require_rank2(self, "matmul", b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!(
                    "inner extents differ: {}{} x {}{}",
                    shape_str(self.shape(a)),
                    if ta { "^T" } else { "" },
                    shape_str(self.shape(b)),
                    if tb { "^T" } else { "" }
                ),
            ));
        }
        let mut out = zeros(m * n);
        {
            let mut aref = MatRef::new(self.value(a).data(), ar, ac);
            let mut bref = MatRef::new(self.value(b).data(), br, bc);
            if ta {
                aref = aref.t();
            }
            if tb {
                bref = bref.t();
            }
            gemm(aref, bref, T::zero(), &mut out);
        }
        let value = Tensor::new(&[m, n], out)?;
        self.push(Box::new(MatMul { ta, tb }), &[a, b], value)
    }

    /// `a · b` for matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(Box::new(Add), &[a, b], value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(Box::new(Sub), &[a, b], value)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        self.push(Box::new(Mul), &[a, b], value)
    }

    /// `x + bias` with `bias` broadcast over all leading extents.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(bias).numel();
        if self.value(x).cols() != n || self.value(bias).rank() != 1 {
            return Err(Error::dim(
                "add_bias",
                format!("bias {} does not match {}", shape_str(self.shape(bias)), shape_str(self.shape(x))),
            ));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push(Box::new(AddBias), &[x, bias], value)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let data = self.value(x).data().iter().map(|&v| v * f).collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(Box::new(Scale { factor: f }), &[x], value)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let one = T::one();
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(T::zero()),
                Activation::Sigmoid => one / (one + (-v).exp()),
                Activation::Tanh => v.tanh(),
            })
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        self.push(Box::new(Act(kind)), &[x], value)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", format!("axis {axis} out of range for {}", shape_str(&shape))));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut y = zeros(src.len());
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for l in 0..len {
                    max = max.max(src[base + l * inner]);
                }
                let mut total = T::zero();
                for l in 0..len {
                    let e = (src[base + l * inner] - max).exp();
                    y[base + l * inner] = e;
                    total += e;
                }
                let inv = T::one() / total;
                for l in 0..len {
                    y[base + l * inner] *= inv;
                }
            }
        }
        let value = Tensor::new(&shape, y)?;
        self.push(Box::new(Softmax { axis }), &[x], value)
    }

    /// Layer normalization over the last axis with per-channel gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim("layer_norm", format!("gain/shift must have {d} entries")));
        }
        let (mut y, rstd) = normalize_forward(self.value(x).data(), d, T::of(eps));
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        for row in y.chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x), y)?;
        self.push(Box::new(Normalize { group: d, affine: true, rstd }), &[x, gamma, beta], value)
    }

    /// Normalizes each contiguous block of `group` entries with one shared
    /// mean and variance (no learnable affine).
    pub fn group_norm(&mut self, x: Var, group: usize, eps: f64) -> Result<Var> {
        let n = self.value(x).numel();
        if group < 2 || n % group != 0 {
            return Err(Error::dim("group_norm", format!("group {group} does not tile {n} entries")));
        }
        let (y, rstd) = normalize_forward(self.value(x).data(), group, T::of(eps));
        let value = Tensor::new(self.shape(x), y)?;
        self.push(Box::new(Normalize { group, affine: false, rstd }), &[x], value)
    }

    /// Swaps the two trailing axes (a batched matrix transpose).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::dim("transpose", format!("rank < 2: {}", shape_str(&shape))));
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batch = shape[..r - 2].iter().product();
        let mut out_shape = shape.clone();
        out_shape.swap(r - 2, r - 1);
        let value = Tensor::new(&out_shape, swap_last2(self.value(x).data(), batch, m, n))?;
        self.push(Box::new(SwapLast2 { batch, m, n }), &[x], value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(Box::new(Reshape), &[x], value)
    }

    /// Columns `[start, start + len)` of the trailing axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if len == 0 || start + len > cols {
            return Err(Error::dim("slice_cols", format!("[{start}, {}) outside {cols} columns", start + len)));
        }
        let mut data = Vec::with_capacity(t.rows() * len);
        for row in t.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let value = Tensor::new(&shape, data)?;
        self.push(Box::new(SliceCols { start }), &[x], value)
    }

    /// Concatenates along the trailing axis; leading extents must agree.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::dim("concat_cols", format!("leading extents differ: {}", shape_str(s))));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                let t = self.value(x);
                let c = t.cols();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, data)?;
        self.push(Box::new(ConcatCols), xs, value)
    }

    /// Stacks matrices with equal column count vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.value(x);
            if t.cols() != cols {
                return Err(Error::dim("concat_rows", format!("column counts {} and {cols} differ", t.cols())));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(&[rows, cols], data)?;
        self.push(Box::new(ConcatRows), xs, value)
    }

    /// Row `i` of the result is row `index[i]` of `x` (viewed as a matrix).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = (t.rows(), t.cols());
        if index.is_empty() {
            return Err(Error::dim("gather_rows", "empty index"));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &r in index {
            if r >= rows {
                return Err(Error::dim("gather_rows", format!("row {r} out of {rows}")));
            }
            data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(&[index.len(), c], data)?;
        self.push(Box::new(GatherRows { index: index.to_vec() }), &[x], value)
    }

    /// Multiplies row `r` by the constant `scale[r]`.
    pub fn row_scale(&mut self, x: Var, scale: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.rows() != scale.len() {
            return Err(Error::dim("row_scale", format!("{} rows vs {} factors", t.rows(), scale.len())));
        }
        let c = t.cols();
        let scale: Vec<T> = scale.iter().map(|&s| T::of(s)).collect();
        let mut data = t.data().to_vec();
        for (row, &s) in data.chunks_mut(c).zip(&scale) {
            for v in row {
                *v *= s;
            }
        }
        let value = Tensor::new(self.shape(x), data)?;
        self.push(Box::new(RowScale { scale }), &[x], value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Box::new(Sum { factor: 1.0 }), &[x], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Box::new(Sum { factor: 1.0 / n }), &[x], Tensor::scalar(s / T::of(n)))
    }

    /// Averages along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return Err(Error::dim("mean_axis", format!("axis {axis} invalid for {}", shape_str(&shape))));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let inv = T::one() / T::of(len as f64);
        let mut out = zeros(outer * inner);
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + l) * inner + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v *= inv;
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        self.push(Box::new(MeanAxis { axis }), &[x], value)
    }

    /// 3x3 zero-padded patches of an `h x w x c` map, one row per pixel.
    pub fn im2col3(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = match *self.shape(x) {
            [h, w, c] => (h, w, c),
            ref s => return Err(Error::dim("im2col3", format!("expected h x w x c, got {}", shape_str(s)))),
        };
        let op = Im2Col3 { h, w, c };
        let src = self.value(x).data();
        let mut out = zeros(h * w * 9 * c);
        for (pix, t, sy, sx) in op.taps() {
            out[pix * 9 * c + t * c..pix * 9 * c + (t + 1) * c]
                .copy_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
        let value = Tensor::new(&[h * w, 9 * c], out)?;
        self.push(Box::new(op), &[x], value)
    }

    /// `x · weight + bias` over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (d_in, d_out) = require_rank2(self, "linear", weight)?;
        if *shape.last().expect("rank >= 1") != d_in {
            return Err(Error::dim(
                "linear",
                format!("input {} vs weight {}", shape_str(&shape), shape_str(self.shape(weight))),
            ));
        }
        let rows = self.value(x).rows();
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, d_in])? };
        let mut y = self.matmul(flat, weight)?;
        if let Some(b) = bias {
            y = self.add_bias(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = d_out;
        self.reshape(y, &out_shape)
    }
}
