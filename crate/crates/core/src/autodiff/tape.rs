//! Wengert-list reverse mode: every operation appends a node holding its
//! value and the handles of its inputs; `backward` walks the list once in
//! reverse.

use crate::autodiff::fault;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over a `[height*width, channels]` token map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    // Calls `f(out_row, patch_col, in_row_offset)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let c = self.channels;
        for oy in 0..oh {
            for ox in 0..ow {
                let out_row = oy * ow + ox;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.height as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.width as isize {
                            continue;
                        }
                        let in_off = (iy as usize * self.width + ix as usize) * c;
                        let col = (ky * self.kernel + kx) * c;
                        f(out_row, col, in_off);
                    }
                }
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    AddRowVector(Var, Var),
    ScaleColumns(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumSquares(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Im2Col { x: Var, geom: ConvGeometry },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one accumulated gradient per node that
/// requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` requires grad but did not
    /// influence the loss, `None` when `v` does not require grad.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        if !self.requires[v.0] {
            return None;
        }
        let shape = self.shapes[v.0].clone();
        Some(match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix("matmul", self.value(a))?;
        let (k2, n) = matrix("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    /// `x[n×d] + b` with `b` holding `d` elements, broadcast over rows.
    pub fn add_row_vector(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, d) = matrix("add_row_vector", self.value(x))?;
        if self.value(b).numel() != d {
            return Err(Error::shape("add_row_vector", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for (o, &bv) in data[i * d..(i + 1) * d].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        Ok(self.push(value, Op::AddRowVector(x, b), &[x, b]))
    }

    /// Scales column `j` of `x[n×m]` by `v[j]` (`v` holds `m` elements).
    pub fn scale_columns(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, m) = matrix("scale_columns", self.value(x))?;
        if self.value(v).numel() != m {
            return Err(Error::shape("scale_columns", self.shape(x), self.shape(v)));
        }
        let s = self.value(v).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for (o, &sv) in data[i * m..(i + 1) * m].iter_mut().zip(s) {
                *o *= sv;
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.push(value, Op::ScaleColumns(x, v), &[x, v]))
    }

    /// Scales row `i` of `x[n×m]` by `v[i]` (`v` holds `n` elements).
    pub fn scale_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, m) = matrix("scale_rows", self.value(x))?;
        if self.value(v).numel() != n {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(v)));
        }
        let s = self.value(v).data();
        let mut data = self.value(x).data().to_vec();
        for (i, &sv) in s.iter().enumerate() {
            for o in &mut data[i * m..(i + 1) * m] {
                *o *= sv;
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.push(value, Op::ScaleRows(x, v), &[x, v]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, f64::exp, Op::Exp(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, f64::abs, Op::Abs(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix("transpose", self.value(x))?;
        let data = transpose_raw(self.value(x).data(), r, c);
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Param(format!(
                "concat needs at least one part and axis 0 or 1, got {} parts on axis {axis}",
                parts.len()
            )));
        }
        let (r0, c0) = matrix("concat", self.value(parts[0]))?;
        for &p in &parts[1..] {
            let (r, c) = matrix("concat", self.value(p))?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) {
                return Err(Error::shape("concat", self.shape(parts[0]), self.shape(p)));
            }
        }
        let value = if axis == 0 {
            let rows = parts.iter().map(|&p| self.value(p).shape()[0]).sum();
            let data = parts
                .iter()
                .flat_map(|&p| self.value(p).data().iter().copied())
                .collect();
            Tensor::new(vec![rows, c0], data)?
        } else {
            let cols: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = matrix("slice_cols", self.value(x))?;
        if start + len > c || len == 0 {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, len]));
        }
        let t = self.value(x);
        let data = (0..r)
            .flat_map(|i| t.row(i)[start..start + len].iter().copied())
            .collect();
        let value = Tensor::new(vec![r, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, &[x]))
    }

    /// Selects rows of a matrix in the given order.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = matrix("gather_rows", self.value(x))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", self.shape(x), &[bad]));
        }
        let t = self.value(x);
        let data = index.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let value = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix("softmax_rows", self.value(x))?;
        let t = self.value(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        fault::perturb_softmax(&mut data, c);
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Row-wise normalization to zero mean and unit variance followed by
    /// `gain`/`bias`. Zero-variance rows map to `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, d) = matrix("layer_norm", self.value(x))?;
        if eps <= 0.0 {
            return Err(Error::Param(format!("layer_norm eps must be > 0, got {eps}")));
        }
        if self.value(gain).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.value(bias).numel() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(bias)));
        }
        let (t, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let (xhat, _) = normalize_row(t.row(i), eps);
            for j in 0..d {
                data[i * d + j] = g.data()[j] * xhat[j] + b.data()[j];
            }
        }
        let value = Tensor::new(vec![n, d], data)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                eps,
            },
            &[x, gain, bias],
        ))
    }

    /// Unfolds convolution patches: `[H*W, C]` to `[Ho*Wo, k*k*C]`.
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let t = self.value(x);
        let expected = [geom.height * geom.width, geom.channels];
        if t.shape() != expected {
            return Err(Error::shape("im2col", t.shape(), &expected));
        }
        if geom.kernel == 0 || geom.stride == 0 || geom.height + 2 * geom.pad < geom.kernel {
            return Err(Error::Param(format!("degenerate convolution geometry {geom:?}")));
        }
        let rows = geom.out_height() * geom.out_width();
        let cols = geom.patch_len();
        let mut data = vec![0.0; rows * cols];
        let src = t.data();
        let c = geom.channels;
        geom.for_each_tap(|r, col, off| {
            data[r * cols + col..r * cols + col + c].copy_from_slice(&src[off..off + c]);
        });
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::Im2Col { x, geom }, &[x]))
    }

    /// Weighted mean of per-row negative log-likelihoods:
    /// `sum_i w_i * -log softmax(x_i)[t_i] / sum_i w_i`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (r, c) = matrix("cross_entropy", self.value(logits))?;
        if targets.len() != r || weights.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                self.shape(logits),
                &[targets.len(), weights.len()],
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Param(format!("target class {t} out of range for {c} classes")));
        }
        let total_w: f64 = weights.iter().sum();
        if total_w <= 0.0 || weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Param("cross_entropy weights must be >= 0 with positive sum".into()));
        }
        let t = self.value(logits);
        let mut loss = 0.0;
        for i in 0..r {
            let row = t.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += weights[i] * (lse - row[targets[i]]);
        }
        let value = Tensor::scalar(loss / total_w);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(val(*b).data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(val(*a).data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(tb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(ta).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, g.iter().zip(tb).map(|(g, y)| g / y).collect());
                acc(
                    *b,
                    g.iter()
                        .zip(ta.iter().zip(tb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect(),
                );
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(self.nodes[idx].op, Op::Maximum(..));
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let pick_a: Vec<bool> = ta
                    .iter()
                    .zip(tb)
                    .map(|(x, y)| if is_max { x >= y } else { x <= y })
                    .collect();
                acc(
                    *a,
                    g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect(),
                );
                acc(
                    *b,
                    g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect(),
                );
            }
            Op::AddRowVector(x, b) => {
                let d = out.cols();
                let mut gb = vec![0.0; d];
                for row in g.chunks_exact(d) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                acc(*x, g.to_vec());
                acc(*b, gb);
            }
            Op::ScaleColumns(x, v) => {
                let m = out.cols();
                let (tx, tv) = (val(*x).data(), val(*v).data());
                let mut gx = g.to_vec();
                let mut gv = vec![0.0; m];
                for (i, grow) in g.chunks_exact(m).enumerate() {
                    for j in 0..m {
                        gx[i * m + j] = grow[j] * tv[j];
                        gv[j] += grow[j] * tx[i * m + j];
                    }
                }
                acc(*x, gx);
                acc(*v, gv);
            }
            Op::ScaleRows(x, v) => {
                let m = out.cols();
                let (tx, tv) = (val(*x).data(), val(*v).data());
                let mut gx = g.to_vec();
                let mut gv = vec![0.0; tv.len()];
                for (i, grow) in g.chunks_exact(m).enumerate() {
                    for j in 0..m {
                        gx[i * m + j] = grow[j] * tv[i];
                        gv[i] += grow[j] * tx[i * m + j];
                    }
                }
                acc(*x, gx);
                acc(*v, gv);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Exp(x) => acc(*x, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Sigmoid(x) => acc(
                *x,
                g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            ),
            Op::Abs(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else if v < 0.0 { -g } else { 0.0 })
                    .collect(),
            ),
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                acc(*x, transpose_raw(g, r, c));
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut at = 0;
                    for &p in parts {
                        let len = val(p).numel();
                        acc(p, g[at..at + len].to_vec());
                        at += len;
                    }
                } else {
                    let total = out.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = (val(p).shape()[0], val(p).shape()[1]);
                        let mut gp = Vec::with_capacity(r * c);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                        }
                        acc(p, gp);
                        offset += c;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let len = out.cols();
                let mut gx = vec![0.0; val(*x).numel()];
                for (i, grow) in g.chunks_exact(len).enumerate() {
                    gx[i * c + start..i * c + start + len].copy_from_slice(grow);
                }
                acc(*x, gx);
            }
            Op::GatherRows { x, index } => {
                let c = val(*x).cols();
                let mut gx = vec![0.0; val(*x).numel()];
                for (k, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        gx[i * c + j] += g[k * c + j];
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                acc(*x, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::SumSquares(x) => acc(*x, val(*x).data().iter().map(|v| 2.0 * v * g[0]).collect()),
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut gx = vec![0.0; g.len()];
                for (i, (grow, yrow)) in g.chunks_exact(c).zip(out.data().chunks_exact(c)).enumerate() {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let t = val(*x);
                let d = t.cols();
                let gain_v = val(*gain).data();
                let mut gx = vec![0.0; t.numel()];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for i in 0..t.rows() {
                    let (xhat, inv_std) = normalize_row(t.row(i), *eps);
                    let grow = &g[i * d..(i + 1) * d];
                    let dxhat: Vec<f64> = grow.iter().zip(gain_v).map(|(g, w)| g * w).collect();
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[i * d + j] =
                            inv_std / d as f64 * (d as f64 * dxhat[j] - sum_d - xhat[j] * sum_dx);
                        gg[j] += grow[j] * xhat[j];
                        gb[j] += grow[j];
                    }
                }
                acc(*x, gx);
                acc(*gain, gg);
                acc(*bias, gb);
            }
            Op::Im2Col { x, geom } => {
                let cols = geom.patch_len();
                let c = geom.channels;
                let mut gx = vec![0.0; val(*x).numel()];
                geom.for_each_tap(|r, col, off| {
                    for ch in 0..c {
                        gx[off + ch] += g[r * cols + col + ch];
                    }
                });
                acc(*x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                let t = val(*logits);
                let c = t.cols();
                let total_w: f64 = weights.iter().sum();
                let mut gx = vec![0.0; t.numel()];
                for i in 0..t.rows() {
                    let row = t.row(i);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let scale = g[0] * weights[i] / total_w;
                    for j in 0..c {
                        let p = (row[j] - max).exp() / z;
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        gx[i * c + j] = scale * (p - onehot);
                    }
                }
                acc(*logits, gx);
            }
        }
    }
}

fn normalize_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + eps).sqrt();
    (row.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}
