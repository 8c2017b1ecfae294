//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and whatever
//! it needs for the backward pass. Nodes are only ever appended, so the
//! tape is always in topological order and a single reverse sweep visits
//! each node once.

use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskRows(Var, Vec<bool>),
    MeanRows(Var, Vec<bool>),
    MaxRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        target: Vec<f64>,
        eps: f64,
    },
}

/// Lazily allocates and hands out the gradient accumulator of `v`, or
/// `None` when `v` does not need a gradient.
fn acc<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward evaluation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    min_kink_distance: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient buffer of `var`, or `None` when no gradient reached it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var` as a tensor; zeros when nothing flowed into it.
    pub fn tensor(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match self.get(var) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `out[m×p] (+)= a[m×n] · b[n×p]`
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * p..(k + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×n] += g[m×p] · b[n×p]ᵀ`
fn gemm_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        for k in 0..n {
            let b_row = &b[k * p..(k + 1) * p];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + k] += dot;
        }
    }
}

/// `out[n×p] += a[m×n]ᵀ · g[m×p]`
fn gemm_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[k * p..(k + 1) * p];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aik * gv;
            }
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            min_kink_distance: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest |input| seen by any ReLU or LeakyReLU on this tape.
    pub fn min_kink_distance(&self) -> f64 {
        self.min_kink_distance
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str, inputs: &[Var]) -> Result<Var> {
        check_finite(&value, name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = ta.dims2()?;
        let (n2, p) = tb.dims2()?;
        if n != n2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * p];
        gemm(ta.data(), tb.data(), &mut out, m, n, p);
        let value = Tensor::matrix(m, p, out)?;
        self.push(value, Op::MatMul(a, b), "matmul", &[a, b])
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        self.push(value, Op::Add(a, b), "add", &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), "mul", &[a, b])
    }

    /// `x[m×n] + b[1×n]`, broadcasting `b` over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let (m, n) = tx.dims2()?;
        if tb.dims2()? != (1, n) {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for (o, &bv) in data[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push(value, Op::AddRow(x, b), "add_row", &[x, b])
    }

    /// `x[m×n] ⊙ w[m×1]`, broadcasting `w` over columns.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, n) = tx.dims2()?;
        if tw.dims2()? != (m, 1) {
            return Err(shape_err("mul_col", tx, tw));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            let wi = tw.data()[i];
            for o in &mut data[i * n..(i + 1) * n] {
                *o *= wi;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push(value, Op::MulCol(x, w), "mul_col", &[x, w])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())?;
        self.push(value, Op::Scale(x, c), "scale", &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| sigmoid_scalar(v)).collect(),
        )?;
        self.push(value, Op::Sigmoid(x), "sigmoid", &[x])
    }

    /// Exact zeros are ignored: they come from masked rows, which stay zero
    /// under any parameter perturbation.
    fn note_kinks(&mut self, x: Var) {
        let m = self
            .value(x)
            .data()
            .iter()
            .filter(|v| **v != 0.0)
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
        self.min_kink_distance = self.min_kink_distance.min(m);
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.note_kinks(x);
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v.max(0.0)).collect())?;
        self.push(value, Op::Relu(x), "relu", &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.note_kinks(x);
        let tx = self.value(x);
        let value = Tensor::new(
            tx.shape().to_vec(),
            tx.data().iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
        )?;
        self.push(value, Op::LeakyRelu(x, slope), "leaky_relu", &[x])
    }

    /// Row-wise softmax. Columns with `key_mask[j] == false` receive exactly
    /// zero probability.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        if let Some(mask) = key_mask {
            if mask.len() != n {
                return Err(TensorError::Shape {
                    op: "softmax_rows",
                    lhs: tx.shape().to_vec(),
                    rhs: vec![mask.len()],
                });
            }
            if !mask.iter().any(|&k| k) {
                return Err(TensorError::Contract("softmax over an empty key set".into()));
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|mk| mk[j]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for j in 0..n {
                if keep(j) {
                    out[j] = (row[j] - max).exp();
                    sum += out[j];
                }
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push(value, Op::Softmax(x), "softmax_rows", &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = tx.data()[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, data)?;
        self.push(value, Op::Transpose(x), "transpose", &[x])
    }

    /// Selects rows by index. Indices are constants for differentiation;
    /// repeated indices accumulate gradient on the source row.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: m,
                });
            }
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::matrix(idx.len(), n, data)?;
        self.push(value, Op::Gather(x, idx.to_vec()), "gather_rows", &[x])
    }

    /// Concatenation along the column (channel) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::Contract("empty concat".into()))?);
        let m = first.dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2()?;
            if r != m {
                return Err(shape_err("concat_cols", first, t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::matrix(m, total, data)?;
        self.push(value, Op::Concat(parts.to_vec()), "concat_cols", parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        if start + len > n {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        self.push(value, Op::SliceCols(x, start), "slice_cols", &[x])
    }

    /// 1-D temporal convolution, stride 1, zero padding that preserves length.
    ///
    /// `x` is `[T, c_in]`, `w` is `[kernel, c_in, c_out]` with odd `kernel`,
    /// and the optional bias is `[1, c_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (t_len, c_in) = tx.dims2()?;
        let [kernel, w_in, c_out] = *tw.shape() else {
            return Err(shape_err("conv1d", tx, tw));
        };
        if w_in != c_in || kernel % 2 == 0 {
            return Err(shape_err("conv1d", tx, tw));
        }
        let pad = kernel / 2;
        let mut out = vec![0.0; t_len * c_out];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.dims2()? != (1, c_out) {
                return Err(shape_err("conv1d", tw, tb));
            }
            for t in 0..t_len {
                out[t * c_out..(t + 1) * c_out].copy_from_slice(tb.data());
            }
        }
        for j in 0..kernel {
            let wj = &tw.data()[j * c_in * c_out..(j + 1) * c_in * c_out];
            // output rows t whose source row t + j - pad is in range
            let lo = pad.saturating_sub(j);
            let hi = (t_len + pad).saturating_sub(j).min(t_len);
            if lo >= hi {
                continue;
            }
            let src0 = lo + j - pad;
            let rows = hi - lo;
            gemm(
                &tx.data()[src0 * c_in..(src0 + rows) * c_in],
                wj,
                &mut out[lo * c_out..hi * c_out],
                rows,
                c_in,
                c_out,
            );
        }
        let value = Tensor::matrix(t_len, c_out, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv1d { x, w, b }, "conv1d", &inputs)
    }

    /// Per-row layer normalization with learned `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = tx.dims2()?;
        if tg.dims2()? != (1, n) || tb.dims2()? != (1, n) {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
            &[x, gain, bias],
        )
    }

    /// Zeroes rows where `mask` is false.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        if mask.len() != m {
            return Err(TensorError::Shape {
                op: "mask_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut data = tx.data().to_vec();
        for (i, &keep) in mask.iter().enumerate() {
            if !keep {
                data[i * n..(i + 1) * n].fill(0.0);
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        self.push(value, Op::MaskRows(x, mask.to_vec()), "mask_rows", &[x])
    }

    fn check_row_mask(&self, x: Var, mask: &[bool], op: &'static str) -> Result<(usize, usize)> {
        let tx = self.value(x);
        let (m, n) = tx.dims2()?;
        if mask.len() != m {
            return Err(TensorError::Shape {
                op,
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&v| v) {
            return Err(TensorError::Contract(format!("{op}: no valid rows")));
        }
        Ok((m, n))
    }

    /// Column means over rows where `mask` is true, `[1, n]`.
    pub fn mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.check_row_mask(x, mask, "mean_rows")?;
        let tx = self.value(x);
        let count = mask.iter().filter(|&&v| v).count() as f64;
        let mut out = vec![0.0; n];
        for i in (0..m).filter(|&i| mask[i]) {
            for (o, &v) in out.iter_mut().zip(tx.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= count;
        }
        let value = Tensor::matrix(1, n, out)?;
        self.push(value, Op::MeanRows(x, mask.to_vec()), "mean_rows", &[x])
    }

    /// Column maxima over rows where `mask` is true, `[1, n]`. Ties go to
    /// the earliest row.
    pub fn max_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.check_row_mask(x, mask, "max_rows")?;
        let tx = self.value(x);
        let mut arg = vec![usize::MAX; n];
        let mut out = vec![f64::NEG_INFINITY; n];
        for i in (0..m).filter(|&i| mask[i]) {
            for j in 0..n {
                let v = tx.data()[i * n + j];
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        let value = Tensor::matrix(1, n, out)?;
        self.push(value, Op::MaxRows(x, arg), "max_rows", &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum", &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean", &[x])
    }

    /// Binary cross-entropy averaged over all entries, with `p` clamped to
    /// `[eps, 1 - eps]` before the logarithm.
    pub fn bce(&mut self, p: Var, target: &[f64], eps: f64) -> Result<Var> {
        let tp = self.value(p);
        if tp.numel() != target.len() {
            return Err(TensorError::Shape {
                op: "bce",
                lhs: tp.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = target.len() as f64;
        let loss = tp
            .data()
            .iter()
            .zip(target)
            .map(|(&pv, &y)| {
                let q = pv.clamp(eps, 1.0 - eps);
                -(y * q.ln() + (1.0 - y) * (1.0 - q).ln())
            })
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.to_vec(),
                eps,
            },
            "bce",
            &[p],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        // only gradients of nodes that require them are meaningful
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, n) = val(*a).dims2().unwrap();
                let p = val(*b).cols();
                if let Some(ga) = acc(&self.nodes, grads, *a) {
                    gemm_bt(g, val(*b).data(), ga, m, n, p);
                }
                if let Some(gb) = acc(&self.nodes, grads, *b) {
                    gemm_at(val(*a).data(), g, gb, m, n, p);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = acc(&self.nodes, grads, v) {
                        gv.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc(&self.nodes, grads, *a) {
                    for ((o, &d), &y) in ga.iter_mut().zip(g).zip(val(*b).data()) {
                        *o += d * y;
                    }
                }
                if let Some(gb) = acc(&self.nodes, grads, *b) {
                    for ((o, &d), &x) in gb.iter_mut().zip(g).zip(val(*a).data()) {
                        *o += d * x;
                    }
                }
            }
            Op::AddRow(x, b) => {
                let n = out.cols();
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                }
                if let Some(gb) = acc(&self.nodes, grads, *b) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::MulCol(x, w) => {
                let n = out.cols();
                let (xv, wv) = (val(*x).data(), val(*w).data());
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for (i, (orow, grow)) in gx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        orow.iter_mut().zip(grow).for_each(|(o, &d)| *o += d * wv[i]);
                    }
                }
                if let Some(gw) = acc(&self.nodes, grads, *w) {
                    for (i, (xrow, grow)) in xv.chunks(n).zip(g.chunks(n)).enumerate() {
                        gw[i] += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(o, &d)| *o += d * c);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for ((o, &d), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *o += d * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for ((o, &d), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *o += d;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = val(*x).data();
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for ((o, &d), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += if xi > 0.0 { d } else { slope * d };
                    }
                }
            }
            Op::Softmax(x) => {
                let n = out.cols();
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for ((orow, grow), yrow) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((o, &d), &y) in orow.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (d - dot);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = val(*x).dims2().unwrap();
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Gather(x, idx) => {
                let n = out.cols();
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        let grow = &g[r * n..(r + 1) * n];
                        gx[src * n..(src + 1) * n]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let m = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if let Some(gp) = acc(&self.nodes, grads, p) {
                        for i in 0..m {
                            let src = &g[i * total + offset..i * total + offset + w];
                            gp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, &d)| *o += d);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let n = val(*x).cols();
                let w = out.cols();
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for (i, grow) in g.chunks(w).enumerate() {
                        gx[i * n + start..i * n + start + w]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let (t_len, c_in) = val(*x).dims2().unwrap();
                let tw = val(*w);
                let kernel = tw.shape()[0];
                let c_out = tw.shape()[2];
                let pad = kernel / 2;
                let spans: Vec<(usize, usize)> = (0..kernel)
                    .map(|j| {
                        let lo = pad.saturating_sub(j);
                        let hi = (t_len + pad).saturating_sub(j).min(t_len);
                        (lo, hi)
                    })
                    .collect();
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for (j, &(lo, hi)) in spans.iter().enumerate() {
                        if lo >= hi {
                            continue;
                        }
                        let src0 = lo + j - pad;
                        let rows = hi - lo;
                        let wj = &tw.data()[j * c_in * c_out..(j + 1) * c_in * c_out];
                        gemm_bt(
                            &g[lo * c_out..hi * c_out],
                            wj,
                            &mut gx[src0 * c_in..(src0 + rows) * c_in],
                            rows,
                            c_in,
                            c_out,
                        );
                    }
                }
                if let Some(gw) = acc(&self.nodes, grads, *w) {
                    let xv = val(*x).data();
                    for (j, &(lo, hi)) in spans.iter().enumerate() {
                        if lo >= hi {
                            continue;
                        }
                        let src0 = lo + j - pad;
                        let rows = hi - lo;
                        gemm_at(
                            &xv[src0 * c_in..(src0 + rows) * c_in],
                            &g[lo * c_out..hi * c_out],
                            &mut gw[j * c_in * c_out..(j + 1) * c_in * c_out],
                            rows,
                            c_in,
                            c_out,
                        );
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = acc(&self.nodes, grads, *b) {
                        for row in g.chunks(c_out) {
                            gb.iter_mut().zip(row).for_each(|(o, &d)| *o += d);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = out.cols();
                let gv = val(*gain).data();
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    let nf = n as f64;
                    for (i, grow) in g.chunks(n).enumerate() {
                        let hrow = &xhat[i * n..(i + 1) * n];
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(d, gg)| d * gg).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] / nf * (nf * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
                if let Some(gg) = acc(&self.nodes, grads, *gain) {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = acc(&self.nodes, grads, *bias) {
                    for grow in g.chunks(n) {
                        gb.iter_mut().zip(grow).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::MaskRows(x, mask) => {
                let n = out.cols();
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for (i, &keep) in mask.iter().enumerate() {
                        if keep {
                            gx[i * n..(i + 1) * n]
                                .iter_mut()
                                .zip(&g[i * n..(i + 1) * n])
                                .for_each(|(o, &d)| *o += d);
                        }
                    }
                }
            }
            Op::MeanRows(x, mask) => {
                let n = out.cols();
                let count = mask.iter().filter(|&&v| v).count() as f64;
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for (i, &keep) in mask.iter().enumerate() {
                        if keep {
                            gx[i * n..(i + 1) * n]
                                .iter_mut()
                                .zip(g)
                                .for_each(|(o, &d)| *o += d / count);
                        }
                    }
                }
            }
            Op::MaxRows(x, arg) => {
                let n = out.cols();
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    for (j, &i) in arg.iter().enumerate() {
                        gx[i * n + j] += g[j];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc(&self.nodes, grads, *x) {
                    let n = gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::Bce { p, target, eps } => {
                let pv = val(*p).data();
                let n = target.len() as f64;
                if let Some(gp) = acc(&self.nodes, grads, *p) {
                    for ((o, &q), &y) in gp.iter_mut().zip(pv).zip(target) {
                        if q > *eps && q < 1.0 - eps {
                            *o += g[0] * (-y / q + (1.0 - y) / (1.0 - q)) / n;
                        }
                    }
                }
            }
        }
    }
}
