//! Dense row-major `f64` tensors and the numeric kernels the rest of the
//! crate is built on.
//!
//! Every public operation checks its result for NaN/Inf and reports
//! [`Error::NonFinite`] instead of letting a non-finite value escape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor")?;
        Ok(t)
    }

    /// Builds a tensor whose finiteness the caller has already established.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("shape {:?} is not scalar", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let out = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        };
        out.check_finite(op)?;
        Ok(out)
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let out = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        };
        out.check_finite(op)?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map("scale", |v| v * c)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::ShapeMismatch {
                op: "dot",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Vector p-norm over all elements (`p = inf` gives the max norm).
    pub fn norm(&self, p: f64) -> f64 {
        norm_slice(&self.data, p)
    }

    /// Index of the largest element; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax_slice(&self.data)
    }

    /// Sub-tensor at `index` along the leading axis.
    pub fn slice_outer(&self, index: usize) -> Result<Tensor> {
        let (&outer, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::shape("slice_outer", "scalar has no leading axis"))?;
        if index >= outer {
            return Err(Error::shape("slice_outer", format!("index {index} >= extent {outer}")));
        }
        let inner = numel(rest);
        Ok(Tensor {
            shape: rest.to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Gathers leading-axis slices in the given order.
    pub fn select_outer(&self, indices: &[usize]) -> Result<Tensor> {
        let (&outer, rest) = self
            .shape
            .split_first()
            .ok_or_else(|| Error::shape("select_outer", "scalar has no leading axis"))?;
        if indices.is_empty() {
            return Err(Error::shape("select_outer", "empty selection"));
        }
        let inner = numel(rest);
        let mut data = Vec::with_capacity(inner * indices.len());
        for &i in indices {
            if i >= outer {
                return Err(Error::shape("select_outer", format!("index {i} >= extent {outer}")));
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(rest);
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn argmax_slice(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn expect_rank(t: &Tensor, rank: usize, op: &'static str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(op, format!("expected rank {rank}, got shape {:?}", t.shape)));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`.
/// `‖values‖_p` for `p ≥ 1`, including `p = ∞`.
pub fn norm_slice(values: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        values.iter().fold(0.0, |m, v| m.max(v.abs()))
    } else if p == 2.0 {
        values.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else if p == 1.0 {
        values.iter().map(|v| v.abs()).sum()
    } else {
        values.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "matmul")?;
    expect_rank(b, 2, "matmul")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let out = Tensor::from_parts(vec![m, n], out);
    out.check_finite("matmul")?;
    Ok(out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    expect_rank(a, 2, "transpose")?;
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Geometry shared by the three batched convolution kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.height + 2 * self.pad + 1 - self.kernel_h
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.pad + 1 - self.kernel_w
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_channels, self.height, self.width]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    fn from_input_kernel(input: &Tensor, kernels: &Tensor, pad: usize, op: &'static str) -> Result<Self> {
        expect_rank(input, 4, op)?;
        expect_rank(kernels, 4, op)?;
        let g = ConvGeometry {
            batch: input.shape[0],
            in_channels: input.shape[1],
            out_channels: kernels.shape[0],
            height: input.shape[2],
            width: input.shape[3],
            kernel_h: kernels.shape[2],
            kernel_w: kernels.shape[3],
            pad,
        };
        if kernels.shape[1] != g.in_channels
            || g.kernel_h > g.height + 2 * pad
            || g.kernel_w > g.width + 2 * pad
        {
            return Err(Error::ShapeMismatch {
                op,
                lhs: input.shape.clone(),
                rhs: kernels.shape.clone(),
            });
        }
        Ok(g)
    }

    /// Visits every (output row, input row) and column range pairing for a
    /// kernel tap `(p, q)`. `f(i, xi, j0, j1, xj0)` covers output columns
    /// `j0..j1`, reading input columns starting at `xj0`.
    #[inline]
    fn for_tap(&self, p: usize, q: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let j0 = self.pad.saturating_sub(q);
        let j1 = ow.min((self.width + self.pad).saturating_sub(q));
        if j0 >= j1 {
            return;
        }
        let xj0 = j0 + q - self.pad;
        for i in 0..oh {
            let xi = i + p;
            if xi < self.pad || xi - self.pad >= self.height {
                continue;
            }
            f(i, xi - self.pad, j0, j1, xj0);
        }
    }
}

impl ConvGeometry {
    fn patch_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Unfolds image `n` of `x` into `cols[(c·kh + p)·kw + q][i·ow + j]`.
    fn im2col(&self, x: &[f64], n: usize, cols: &mut [f64]) {
        let positions = self.out_h() * self.out_w();
        let ow = self.out_w();
        let (h, wd) = (self.height, self.width);
        cols.fill(0.0);
        for c in 0..self.in_channels {
            let xbase = (n * self.in_channels + c) * h * wd;
            for p in 0..self.kernel_h {
                for q in 0..self.kernel_w {
                    let r = (c * self.kernel_h + p) * self.kernel_w + q;
                    let row = &mut cols[r * positions..(r + 1) * positions];
                    self.for_tap(p, q, |i, xi, j0, j1, xj0| {
                        row[i * ow + j0..i * ow + j1]
                            .copy_from_slice(&x[xbase + xi * wd + xj0..xbase + xi * wd + xj0 + (j1 - j0)]);
                    });
                }
            }
        }
    }

    /// Adds unfolded columns back onto image `n` of `out`.
    fn col2im(&self, cols: &[f64], n: usize, out: &mut [f64]) {
        let positions = self.out_h() * self.out_w();
        let ow = self.out_w();
        let (h, wd) = (self.height, self.width);
        for c in 0..self.in_channels {
            let xbase = (n * self.in_channels + c) * h * wd;
            for p in 0..self.kernel_h {
                for q in 0..self.kernel_w {
                    let r = (c * self.kernel_h + p) * self.kernel_w + q;
                    let row = &cols[r * positions..(r + 1) * positions];
                    self.for_tap(p, q, |i, xi, j0, j1, xj0| {
                        let dst = &mut out[xbase + xi * wd + xj0..xbase + xi * wd + xj0 + (j1 - j0)];
                        for (d, &v) in dst.iter_mut().zip(&row[i * ow + j0..i * ow + j1]) {
                            *d += v;
                        }
                    });
                }
            }
        }
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for t in 0..4 {
            acc[t] += x[t] * y[t];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Batched cross-correlation: `x[N×C×H×W] ⋆ w[O×C×kh×kw]` with symmetric
/// zero padding `pad`. No bias.
pub fn conv2d_batch(x: &Tensor, w: &Tensor, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::from_input_kernel(x, w, pad, "conv2d")?;
    let positions = g.out_h() * g.out_w();
    let rows = g.patch_rows();
    let mut out = vec![0.0; g.batch * g.out_channels * positions];
    let mut cols = vec![0.0; rows * positions];
    for n in 0..g.batch {
        g.im2col(&x.data, n, &mut cols);
        for o in 0..g.out_channels {
            let obase = (n * g.out_channels + o) * positions;
            let orow = &mut out[obase..obase + positions];
            for (r, &wv) in w.data[o * rows..(o + 1) * rows].iter().enumerate() {
                if wv != 0.0 {
                    axpy(wv, &cols[r * positions..(r + 1) * positions], orow);
                }
            }
        }
    }
    let out = Tensor::from_parts(g.output_shape(), out);
    out.check_finite("conv2d")?;
    Ok(out)
}

/// Gradient of `<gy, conv2d_batch(x, w)>` with respect to `x`.
pub fn conv2d_input_grad(gy: &Tensor, w: &Tensor, pad: usize, height: usize, width: usize) -> Result<Tensor> {
    expect_rank(gy, 4, "conv2d_input_grad")?;
    expect_rank(w, 4, "conv2d_input_grad")?;
    let g = ConvGeometry {
        batch: gy.shape[0],
        in_channels: w.shape[1],
        out_channels: w.shape[0],
        height,
        width,
        kernel_h: w.shape[2],
        kernel_w: w.shape[3],
        pad,
    };
    if gy.shape[1] != g.out_channels
        || g.kernel_h > height + 2 * pad
        || g.kernel_w > width + 2 * pad
        || gy.shape[2] != g.out_h()
        || gy.shape[3] != g.out_w()
    {
        return Err(Error::ShapeMismatch {
            op: "conv2d_input_grad",
            lhs: gy.shape.clone(),
            rhs: w.shape.clone(),
        });
    }
    let positions = g.out_h() * g.out_w();
    let rows = g.patch_rows();
    let mut out = vec![0.0; g.batch * g.in_channels * height * width];
    let mut cols = vec![0.0; rows * positions];
    for n in 0..g.batch {
        cols.fill(0.0);
        for o in 0..g.out_channels {
            let gbase = (n * g.out_channels + o) * positions;
            let grow = &gy.data[gbase..gbase + positions];
            for (r, &wv) in w.data[o * rows..(o + 1) * rows].iter().enumerate() {
                if wv != 0.0 {
                    axpy(wv, grow, &mut cols[r * positions..(r + 1) * positions]);
                }
            }
        }
        g.col2im(&cols, n, &mut out);
    }
    let out = Tensor::from_parts(g.input_shape(), out);
    out.check_finite("conv2d_input_grad")?;
    Ok(out)
}

/// Gradient of `<gy, conv2d_batch(x, w)>` with respect to `w`.
pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, pad: usize, kernel_h: usize, kernel_w: usize) -> Result<Tensor> {
    expect_rank(x, 4, "conv2d_weight_grad")?;
    expect_rank(gy, 4, "conv2d_weight_grad")?;
    let g = ConvGeometry {
        batch: x.shape[0],
        in_channels: x.shape[1],
        out_channels: gy.shape[1],
        height: x.shape[2],
        width: x.shape[3],
        kernel_h,
        kernel_w,
        pad,
    };
    if gy.shape[0] != g.batch
        || kernel_h > g.height + 2 * pad
        || kernel_w > g.width + 2 * pad
        || gy.shape[2] != g.out_h()
        || gy.shape[3] != g.out_w()
    {
        return Err(Error::ShapeMismatch {
            op: "conv2d_weight_grad",
            lhs: x.shape.clone(),
            rhs: gy.shape.clone(),
        });
    }
    let positions = g.out_h() * g.out_w();
    let rows = g.patch_rows();
    let mut out = vec![0.0; g.out_channels * rows];
    let mut cols = vec![0.0; rows * positions];
    for n in 0..g.batch {
        g.im2col(&x.data, n, &mut cols);
        for o in 0..g.out_channels {
            let gbase = (n * g.out_channels + o) * positions;
            let grow = &gy.data[gbase..gbase + positions];
            if grow.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (r, acc) in out[o * rows..(o + 1) * rows].iter_mut().enumerate() {
                *acc += dot4(grow, &cols[r * positions..(r + 1) * positions]);
            }
        }
    }
    let out = Tensor::from_parts(g.kernel_shape(), out);
    out.check_finite("conv2d_weight_grad")?;
    Ok(out)
}

/// Single-image convolution `input[C_in×H×W]` with `kernels[C_out×C_in×kh×kw]`
/// plus per-channel `bias[C_out]`. With `pad = 0` this is valid
/// cross-correlation, `H' = H − kh + 1`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, pad: usize) -> Result<Tensor> {
    expect_rank(input, 3, "conv2d")?;
    let batched = Tensor::from_parts(
        [&[1usize][..], &input.shape].concat(),
        input.data.clone(),
    );
    let y = conv2d_batch(&batched, kernels, pad)?;
    let out_c = kernels.shape[0];
    if bias.shape != [out_c] {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: kernels.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let plane = y.shape[2] * y.shape[3];
    let mut data = y.data;
    for (c, chunk) in data.chunks_mut(plane).enumerate() {
        for v in chunk {
            *v += bias.data[c];
        }
    }
    let out = Tensor::from_parts(vec![out_c, y.shape[2], y.shape[3]], data);
    out.check_finite("conv2d")?;
    Ok(out)
}

/// Output extents and flat source index of each pooled maximum over a
/// `[N×C×H×W]` batch. Ties go to the lowest flat index.
pub fn max_pool_indices(
    input: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Vec<usize>, Vec<usize>)> {
    expect_rank(input, 4, "max_pool")?;
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (ph, pw) = window;
    let (sh, sw) = stride;
    if ph == 0 || pw == 0 || sh == 0 || sw == 0 {
        return Err(Error::shape("max_pool", "window and stride must be positive"));
    }
    if ph > h || pw > w {
        return Err(Error::shape(
            "max_pool",
            format!("window {ph}x{pw} exceeds input {h}x{w}"),
        ));
    }
    let oh = (h - ph) / sh + 1;
    let ow = (w - pw) / sw + 1;
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + (i * sh) * w + j * sw;
                for a in 0..ph {
                    for b in 0..pw {
                        let k = base + (i * sh + a) * w + j * sw + b;
                        // row-major scan order equals flat-index order
                        if input.data[k] > input.data[best] {
                            best = k;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((vec![n, c, oh, ow], idx))
}

/// Single-image max pooling over `input[C×H×W]`. Returns the pooled tensor
/// and, per output cell, the flat index into `input` that won.
pub fn max_pool(
    input: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    expect_rank(input, 3, "max_pool")?;
    input.check_finite("max_pool")?;
    let batched = Tensor::from_parts([&[1usize][..], &input.shape].concat(), input.data.clone());
    let (shape, idx) = max_pool_indices(&batched, window, stride)?;
    let out = gather(input, &idx, shape[1..].to_vec())?;
    Ok((out, idx))
}

/// `out[k] = x[index[k]]` over flat storage.
pub fn gather(x: &Tensor, index: &[usize], shape: Vec<usize>) -> Result<Tensor> {
    if numel(&shape) != index.len() {
        return Err(Error::shape("gather", format!("{} indices for shape {shape:?}", index.len())));
    }
    let data = index
        .iter()
        .map(|&i| {
            x.data
                .get(i)
                .copied()
                .ok_or_else(|| Error::shape("gather", format!("index {i} out of range {}", x.len())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_parts(shape, data))
}

/// `out = 0; out[index[k]] += x[k]`, the adjoint of [`gather`].
pub fn scatter_add(x: &Tensor, index: &[usize], shape: Vec<usize>) -> Result<Tensor> {
    if x.len() != index.len() {
        return Err(Error::shape("scatter_add", format!("{} indices for {} values", index.len(), x.len())));
    }
    let mut out = vec![0.0; numel(&shape)];
    for (&i, &v) in index.iter().zip(&x.data) {
        *out
            .get_mut(i)
            .ok_or_else(|| Error::shape("scatter_add", format!("index {i} out of range")))? += v;
    }
    let out = Tensor::from_parts(shape, out);
    out.check_finite("scatter_add")?;
    Ok(out)
}

/// Flat indices selecting, for a `[outer × groups·pieces × inner]` layout,
/// the largest of each run of `pieces` consecutive channels. Ties go to the
/// lowest piece.
pub fn group_max_indices(x: &Tensor, outer: usize, groups: usize, pieces: usize, inner: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(outer * groups * inner);
    for o in 0..outer {
        for g in 0..groups {
            for r in 0..inner {
                let first = (o * groups * pieces + g * pieces) * inner + r;
                let mut best = first;
                for p in 1..pieces {
                    let k = first + p * inner;
                    if x.data[k] > x.data[best] {
                        best = k;
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReduceOp {
    Sum,
    Max,
    Mean,
}

/// Reduces over one axis, or over everything when `axis` is `None`.
pub fn reduce(input: &Tensor, op: ReduceOp, axis: Option<usize>) -> Result<Tensor> {
    input.check_finite("reduce")?;
    let fold = |xs: &mut dyn Iterator<Item = f64>, count: usize| -> f64 {
        match op {
            ReduceOp::Sum => xs.sum(),
            ReduceOp::Mean => xs.sum::<f64>() / count as f64,
            ReduceOp::Max => xs.fold(f64::NEG_INFINITY, f64::max),
        }
    };
    let Some(axis) = axis else {
        let v = fold(&mut input.data.iter().copied(), input.len());
        return Ok(Tensor::scalar(v));
    };
    if axis >= input.rank() {
        return Err(Error::InvalidAxis {
            op: "reduce",
            axis,
            rank: input.rank(),
        });
    }
    let outer: usize = input.shape[..axis].iter().product();
    let extent = input.shape[axis];
    let inner: usize = input.shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for r in 0..inner {
            let mut it = (0..extent).map(|a| input.data[(o * extent + a) * inner + r]);
            out.push(fold(&mut it, extent));
        }
    }
    let mut shape = input.shape.clone();
    shape.remove(axis);
    let out = Tensor::from_parts(shape, out);
    out.check_finite("reduce")?;
    Ok(out)
}
