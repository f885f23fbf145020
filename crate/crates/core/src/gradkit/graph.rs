//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it runs. [`Graph::backward`] walks
//! the tape in reverse once, returns gradients for every tracked leaf, and
//! clears the tape.

use super::{GradError, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sum(Var),
    Mse(Var, Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    TimeStep {
        x: Var,
        t: usize,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
        cols: Vec<f64>,
    },
    MaxPool1d {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Per-feature statistics of one train-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` was tracked.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(var, id) in &self.params {
            if let Some(g) = self.wrt(var) {
                store.accumulate_grad(id, g.data());
            }
        }
    }
}

fn shape_err(msg: impl Into<String>) -> GradError {
    GradError::ShapeError(msg.into())
}

/// `c = op(a) * op(b)` (+ `c` when `accumulate`), row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the strides' extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked input not owned by a parameter store.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter; trainable parameters are tracked.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            requires_grad: store.is_trainable(id),
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize), GradError> {
        match self.value(v).shape() {
            [m, n] => Ok((*m, *n)),
            s => Err(shape_err(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    fn dims3(&self, v: Var, what: &str) -> Result<(usize, usize, usize), GradError> {
        match self.value(v).shape() {
            [b, t, c] => Ok((*b, *t, *c)),
            s => Err(shape_err(format!(
                "{what} expects [batch, time, channels], got {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err(format!("matmul [{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, GradError> {
        let (_, n) = self.dims2(x, "add_bias")?;
        if self.value(b).len() != n {
            return Err(shape_err(format!(
                "bias of {} for width {n}",
                self.value(b).len()
            )));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), GradError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(x, y)| *x += y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(x, y)| *x *= y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        self.push(out, Op::Scale(x, factor), &[x])
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        self.push(out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, GradError> {
        self.same_shape(pred, target, "mse")?;
        let p = self.value(pred).data();
        let n = p.len().max(1) as f64;
        let loss = p
            .iter()
            .zip(self.value(target).data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target), &[pred, target]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, GradError> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Columns `start..start + len` of an `[m, n]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, GradError> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start + len > n {
            return Err(shape_err(format!(
                "columns {start}..{} of {n}",
                start + len
            )));
        }
        let src = self.value(x).data();
        let out: Vec<f64> = src
            .chunks_exact(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.push(
            Tensor::new(vec![m, len], out)?,
            Op::SliceCols { x, start },
            &[x],
        ))
    }

    /// Step `t` of a `[batch, time, channels]` sequence as `[batch, channels]`.
    pub fn time_step(&mut self, x: Var, t: usize) -> Result<Var, GradError> {
        let (b, steps, c) = self.dims3(x, "time_step")?;
        if t >= steps {
            return Err(shape_err(format!("step {t} of {steps}")));
        }
        let src = self.value(x).data();
        let out: Vec<f64> = (0..b)
            .flat_map(|i| {
                src[(i * steps + t) * c..(i * steps + t + 1) * c]
                    .iter()
                    .copied()
            })
            .collect();
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::TimeStep { x, t }, &[x]))
    }

    /// 1-D cross-correlation along time with zero "same" padding.
    ///
    /// `x` is `[batch, time, in]`, `w` is `[kernel * in, out]` with row index
    /// `k * in + c`, `b` has length `out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Result<Var, GradError> {
        let (batch, steps, cin) = self.dims3(x, "conv1d")?;
        let (rows, cout) = self.dims2(w, "conv1d weight")?;
        if kernel == 0 || rows != kernel * cin || self.value(b).len() != cout {
            return Err(shape_err(format!(
                "conv1d weight [{rows}, {cout}] does not fit kernel {kernel} over {cin} channels"
            )));
        }
        let left = (kernel - 1) / 2;
        let kc = kernel * cin;
        let src = self.value(x).data();
        let mut cols = vec![0.0; batch * steps * kc];
        for bi in 0..batch {
            for t in 0..steps {
                let dst = &mut cols[(bi * steps + t) * kc..(bi * steps + t + 1) * kc];
                for k in 0..kernel {
                    let s = t as isize + k as isize - left as isize;
                    if s >= 0 && (s as usize) < steps {
                        let from = (bi * steps + s as usize) * cin;
                        dst[k * cin..(k + 1) * cin].copy_from_slice(&src[from..from + cin]);
                    }
                }
            }
        }
        let m = batch * steps;
        let mut out = vec![0.0; m * cout];
        gemm(
            m,
            kc,
            cout,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        let bias = self.value(b).data();
        for row in out.chunks_exact_mut(cout) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::new(vec![batch, steps, cout], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                b,
                kernel,
                cols,
            },
            &[x, w, b],
        ))
    }

    /// Non-overlapping max pooling along time (stride = window); a partial
    /// final window is discarded.
    pub fn max_pool1d(&mut self, x: Var, window: usize) -> Result<Var, GradError> {
        let (batch, steps, c) = self.dims3(x, "max_pool1d")?;
        if window == 0 {
            return Err(shape_err("pool window must be positive"));
        }
        let out_steps = steps / window;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(batch * out_steps * c);
        let mut argmax = Vec::with_capacity(batch * out_steps * c);
        for bi in 0..batch {
            for o in 0..out_steps {
                for ch in 0..c {
                    let mut best = (bi * steps + o * window) * c + ch;
                    for s in 1..window {
                        let i = (bi * steps + o * window + s) * c + ch;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![batch, out_steps, c], out)?;
        Ok(self.push(value, Op::MaxPool1d { x, argmax }, &[x]))
    }

    /// Batch normalization over the last axis. With `running = None` the
    /// batch's own statistics are used and returned; otherwise the given
    /// (mean, var) are applied as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        epsilon: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>), GradError> {
        let shape = self.value(x).shape().to_vec();
        let f = *shape
            .last()
            .ok_or_else(|| shape_err("batch_norm on a scalar"))?;
        if self.value(gamma).len() != f || self.value(beta).len() != f {
            return Err(shape_err(format!("batch_norm over {f} features")));
        }
        let src = self.value(x).data();
        let m = src.len() / f;
        let (mean, var, batch) = match running {
            Some((mean, var)) => {
                if mean.len() != f || var.len() != f {
                    return Err(shape_err("running statistics width"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
            None => {
                if m == 0 {
                    return Err(shape_err("batch_norm needs a non-empty batch"));
                }
                let mut mean = vec![0.0; f];
                for row in src.chunks_exact(f) {
                    mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; f];
                for row in src.chunks_exact(f) {
                    for j in 0..f {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(src.len());
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks_exact(f) {
            for j in 0..f {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + bt[j]);
            }
        }
        let stats = batch.then(|| BatchStats { mean, var });
        let value = Tensor::new(shape, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch,
        };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    /// Reverse pass from a scalar `loss`; the tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, GradError> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(GradError::NoGraph);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar loss, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(
            nodes[loss.0].value.shape().to_vec(),
            vec![1.0],
        )?);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
                continue;
            }
            let needs = |v: &Var| nodes[v.0].requires_grad;
            let dy = gy.data();
            let val = |v: &Var| nodes[v.0].value.data();
            let mut contributions: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
            let mut emit = |v: Var, data: Vec<f64>| contributions.push((v, data));
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (m, k) = dims(&nodes[a.0].value);
                    let n = nodes[b.0].value.shape()[1];
                    if needs(a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, dy, false, val(b), true, &mut da, false);
                        emit(*a, da);
                    }
                    if needs(b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, val(a), true, dy, false, &mut db, false);
                        emit(*b, db);
                    }
                }
                Op::AddBias(x, b) => {
                    let n = nodes[b.0].value.len();
                    if needs(b) {
                        let mut db = vec![0.0; n];
                        for row in dy.chunks_exact(n) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        emit(*b, db);
                    }
                    if needs(x) {
                        emit(*x, dy.to_vec());
                    }
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        emit(*a, dy.to_vec());
                    }
                    if needs(b) {
                        emit(*b, dy.to_vec());
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        emit(*a, dy.iter().zip(val(b)).map(|(g, v)| g * v).collect());
                    }
                    if needs(b) {
                        emit(*b, dy.iter().zip(val(a)).map(|(g, v)| g * v).collect());
                    }
                }
                Op::Scale(x, f) => emit(*x, dy.iter().map(|g| g * f).collect()),
                Op::Relu(x) => emit(
                    *x,
                    dy.iter()
                        .zip(node.value.data())
                        .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                        .collect(),
                ),
                Op::Sigmoid(x) => emit(
                    *x,
                    dy.iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect(),
                ),
                Op::Tanh(x) => emit(
                    *x,
                    dy.iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect(),
                ),
                Op::Sum(x) => emit(*x, vec![dy[0]; nodes[x.0].value.len()]),
                Op::Mse(p, t) => {
                    let n = val(p).len().max(1) as f64;
                    let d: Vec<f64> = val(p)
                        .iter()
                        .zip(val(t))
                        .map(|(a, b)| 2.0 * (a - b) / n * dy[0])
                        .collect();
                    if needs(t) {
                        emit(*t, d.iter().map(|v| -v).collect());
                    }
                    if needs(p) {
                        emit(*p, d);
                    }
                }
                Op::Reshape(x) => emit(*x, dy.to_vec()),
                Op::SliceCols { x, start } => {
                    let (m, n) = dims(&nodes[x.0].value);
                    let len = dy.len() / m.max(1);
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        dx[r * n + start..r * n + start + len]
                            .copy_from_slice(&dy[r * len..(r + 1) * len]);
                    }
                    emit(*x, dx);
                }
                Op::TimeStep { x, t } => {
                    let s = nodes[x.0].value.shape();
                    let (b, steps, c) = (s[0], s[1], s[2]);
                    let mut dx = vec![0.0; b * steps * c];
                    for bi in 0..b {
                        dx[(bi * steps + t) * c..(bi * steps + t + 1) * c]
                            .copy_from_slice(&dy[bi * c..(bi + 1) * c]);
                    }
                    emit(*x, dx);
                }
                Op::Conv1d {
                    x,
                    w,
                    b,
                    kernel,
                    cols,
                } => {
                    let s = nodes[x.0].value.shape();
                    let (batch, steps, cin) = (s[0], s[1], s[2]);
                    let cout = nodes[b.0].value.len();
                    let kc = kernel * cin;
                    let m = batch * steps;
                    if needs(b) {
                        let mut db = vec![0.0; cout];
                        for row in dy.chunks_exact(cout) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        emit(*b, db);
                    }
                    if needs(w) {
                        let mut dw = vec![0.0; kc * cout];
                        gemm(kc, m, cout, cols, true, dy, false, &mut dw, false);
                        emit(*w, dw);
                    }
                    if needs(x) {
                        let mut dcols = vec![0.0; m * kc];
                        gemm(m, cout, kc, dy, false, val(w), true, &mut dcols, false);
                        let left = (kernel - 1) / 2;
                        let mut dx = vec![0.0; batch * steps * cin];
                        for bi in 0..batch {
                            for t in 0..steps {
                                let src = &dcols[(bi * steps + t) * kc..(bi * steps + t + 1) * kc];
                                for k in 0..*kernel {
                                    let s = t as isize + k as isize - left as isize;
                                    if s >= 0 && (s as usize) < steps {
                                        let to = (bi * steps + s as usize) * cin;
                                        dx[to..to + cin]
                                            .iter_mut()
                                            .zip(&src[k * cin..(k + 1) * cin])
                                            .for_each(|(a, v)| *a += v);
                                    }
                                }
                            }
                        }
                        emit(*x, dx);
                    }
                }
                Op::MaxPool1d { x, argmax } => {
                    let mut dx = vec![0.0; nodes[x.0].value.len()];
                    for (g, &j) in dy.iter().zip(argmax) {
                        dx[j] += g;
                    }
                    emit(*x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let f = inv_std.len();
                    let m = (xhat.len() / f) as f64;
                    let mut dgamma = vec![0.0; f];
                    let mut dbeta = vec![0.0; f];
                    for (gr, hr) in dy.chunks_exact(f).zip(xhat.chunks_exact(f)) {
                        for j in 0..f {
                            dgamma[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    if needs(x) {
                        let g = val(gamma);
                        let mut dx = Vec::with_capacity(dy.len());
                        for (gr, hr) in dy.chunks_exact(f).zip(xhat.chunks_exact(f)) {
                            for j in 0..f {
                                let dxhat = gr[j] * g[j];
                                dx.push(if *batch {
                                    // mean/var depend on x through the batch
                                    g[j] * inv_std[j] / m
                                        * (m * gr[j] - dbeta[j] - hr[j] * dgamma[j])
                                } else {
                                    dxhat * inv_std[j]
                                });
                            }
                        }
                        emit(*x, dx);
                    }
                    if needs(gamma) {
                        emit(*gamma, dgamma);
                    }
                    if needs(beta) {
                        emit(*beta, dbeta);
                    }
                }
            }
            for (v, data) in contributions {
                match &mut grads[v.0] {
                    Some(t) => t
                        .data_mut()
                        .iter_mut()
                        .zip(&data)
                        .for_each(|(a, b)| *a += b),
                    slot => {
                        let shape = nodes[v.0].value.shape().to_vec();
                        *slot =
                            Some(Tensor::new(shape, data).expect("gradient matches value shape"));
                    }
                }
            }
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_same_padding_hand_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let w = g.constant(Tensor::new(vec![3, 1], vec![1.0, 0.0, -1.0]).unwrap());
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv1d(x, w, b, 3).unwrap();
        assert_eq!(g.value(y).data(), &[-2.0, -2.0, 2.0]);
    }

    #[test]
    fn max_pool_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 5, 1], vec![1.0, 3.0, 2.0, 5.0, 4.0]).unwrap());
        let y = g.max_pool1d(x, 5).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
    }

    #[test]
    fn linear_sum_gradient_is_input() {
        let mut g = Graph::new();
        let xs = vec![0.5, -1.0, 2.0];
        let w = g.leaf(Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap());
        let x = g.constant(Tensor::new(vec![1, 3], xs.clone()).unwrap());
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(w).unwrap().data(), xs.as_slice());
        assert!(grads.wrt(x).is_none());
    }

    #[test]
    fn mse_at_target_has_zero_gradient() {
        let mut g = Graph::new();
        let t = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let w = g.leaf(t.clone());
        let target = g.constant(t);
        let loss = g.mse(w, target).unwrap();
        assert_eq!(g.value(loss).data(), &[0.0]);
        let grads = g.backward(loss).unwrap();
        assert!(grads.wrt(w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_requires_a_graph() {
        let mut g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(GradError::NoGraph)));
        let a = g.leaf(Tensor::scalar(2.0));
        let l = g.sum(a);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(GradError::NoGraph)));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(GradError::ShapeError(_))));
    }

    #[test]
    fn batch_norm_normalizes_batch() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..40)
            .map(|i| ((i * 37 % 11) as f64) * 10.0 + i as f64)
            .collect();
        let x = g.constant(Tensor::new(vec![10, 4], data).unwrap());
        let gamma = g.constant(Tensor::full(vec![4], 1.0));
        let beta = g.constant(Tensor::zeros(vec![4]));
        let (y, stats) = g.batch_norm(x, gamma, beta, 1e-5, None).unwrap();
        assert!(stats.is_some());
        let out = g.value(y).data();
        for j in 0..4 {
            let col: Vec<f64> = out.iter().skip(j).step_by(4).copied().collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(
                mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6,
                "mean {mean} var {var}"
            );
        }
    }
}
