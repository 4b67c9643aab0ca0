use std::fmt;
use std::str::FromStr;

use super::{Tape, Var};
use crate::error::{shape_str, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        };
        f.write_str(s)
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

/// Spatial arithmetic of a 2-D convolution over an `h x w x c` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 2],
        out_c: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [in_h, in_w, in_c] = input;
        let [kernel_h, kernel_w] = kernel;
        if stride == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::Dimension(
                "conv stride and kernel must be positive".into(),
            ));
        }
        if in_h + 2 * padding < kernel_h || in_w + 2 * padding < kernel_w {
            return Err(Error::Dimension(format!(
                "kernel {kernel_h}x{kernel_w} does not fit input {in_h}x{in_w} with padding {padding}"
            )));
        }
        Ok(ConvGeometry {
            in_h,
            in_w,
            in_c,
            kernel_h,
            kernel_w,
            out_c,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kernel_h) / stride + 1,
            out_w: (in_w + 2 * padding - kernel_w) / stride + 1,
        })
    }

    /// Input coordinate for an output coordinate and kernel offset, if inside the image.
    #[inline]
    fn source(&self, out: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.padding as isize;
        if pos >= 0 && (pos as usize) < limit {
            Some(pos as usize)
        } else {
            None
        }
    }
}

pub(super) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Activation(Var, Activation),
    Softmax(Var),
    L2Normalize {
        x: Var,
        norm: f64,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Dot(Var, Var),
    MeanRows {
        x: Var,
        rows: usize,
        cols: usize,
    },
    MaxRows {
        x: Var,
        cols: usize,
        argmax: Vec<usize>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
}

impl Op {
    pub(super) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Dot(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Activation(x, _)
            | Op::Softmax(x)
            | Op::Reshape(x)
            | Op::Sum(x) => vec![*x],
            Op::L2Normalize { x, .. } | Op::MeanRows { x, .. } | Op::MaxRows { x, .. } => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::MaxPool2d { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub(super) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Activation(_, Activation::Sigmoid) => "sigmoid",
            Op::Activation(_, Activation::Tanh) => "tanh",
            Op::Activation(_, Activation::Relu) => "relu",
            Op::Softmax(_) => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Dot(..) => "dot",
            Op::MeanRows { .. } => "mean_rows",
            Op::MaxRows { .. } => "max_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::Dimension(format!(
            "{what}: shapes {} and {} differ",
            shape_str(sa),
            shape_str(sb)
        )));
    }
    Ok(())
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op output matches its shape")
}

impl Tape {
    /// Matrix product. A 1-D left operand is a row vector and a 1-D right
    /// operand is a column vector; the corresponding output axis is dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || {
            Error::Dimension(format!(
                "matmul: shapes {} and {} are incompatible",
                shape_str(&sa),
                shape_str(&sb)
            ))
        };
        let (m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (2, 2) => (sa[0], sa[1], sb[1], vec![sa[0], sb[1]]),
            (2, 1) => (sa[0], sa[1], 1, vec![sa[0]]),
            (1, 2) => (1, sa[0], sb[1], vec![sb[1]]),
            _ => return Err(mismatch()),
        };
        let kb = if sb.len() == 2 { sb[0] } else { sb[0] };
        if kb != k {
            return Err(mismatch());
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(tensor(out_shape, out), Op::MatMul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = map(self.value(x), |v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = map(self.value(x), |v| v + c);
        self.push(out, Op::AddScalar(x))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let out = map(self.value(x), |v| kind.apply(v));
        self.push(out, Op::Activation(x, kind))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    /// Numerically stable softmax over all entries.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Dimension("softmax of an empty tensor".into()));
        }
        let out = tensor(v.shape().to_vec(), softmax_slice(v.data()));
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// `x / ||x||_2`, failing when the norm is below `1e-12`.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let norm = v.norm();
        if !(norm > L2_EPS) {
            return Err(Error::Degenerate(format!(
                "cannot normalize a vector with norm {norm:e}"
            )));
        }
        let out = map(v, |e| e / norm);
        Ok(self.push(out, Op::L2Normalize { x, norm }))
    }

    /// Flat concatenation of the given tensors, in order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(self.value(*p).data());
        }
        let out = Tensor::vector(data);
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::Dimension(format!(
                "dot: shapes {} and {} differ in length",
                shape_str(self.shape(a)),
                shape_str(self.shape(b))
            )));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    /// Column means of a `[rows, cols]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.shape(x), "mean_rows")?;
        let v = self.value(x).data();
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, &e) in out.iter_mut().zip(&v[r * cols..(r + 1) * cols]) {
                *o += e;
            }
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(Tensor::vector(out), Op::MeanRows { x, rows, cols }))
    }

    /// Column maxima of a `[rows, cols]` matrix; ties go to the first row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.shape(x), "max_rows")?;
        let v = self.value(x).data();
        let mut out = v[..cols].to_vec();
        let mut argmax: Vec<usize> = (0..cols).collect();
        for r in 1..rows {
            for c in 0..cols {
                let e = v[r * cols + c];
                if e > out[c] {
                    out[c] = e;
                    argmax[c] = r * cols + c;
                }
            }
        }
        Ok(self.push(Tensor::vector(out), Op::MaxRows { x, cols, argmax }))
    }

    /// Cross-correlation of an `[h, w, cin]` input with `[kh, kw, cin, cout]`
    /// weights plus a `[cout]` bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (si, sw, sb) = (
            self.shape(input).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        if si.len() != 3 || sw.len() != 4 || sb.len() != 1 || sw[2] != si[2] || sb[0] != sw[3] {
            return Err(Error::Dimension(format!(
                "conv2d: input {}, weight {}, bias {} are incompatible",
                shape_str(&si),
                shape_str(&sw),
                shape_str(&sb)
            )));
        }
        let geom = ConvGeometry::new([si[0], si[1], si[2]], [sw[0], sw[1]], sw[3], stride, padding)?;
        let out = conv_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let out = tensor(vec![geom.out_h, geom.out_w, geom.out_c], out);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Max pooling over `window x window` patches of an `[h, w, c]` input.
    /// The gradient goes to the first maximal cell in row-major scan order.
    pub fn maxpool2d(&mut self, input: Var, window: usize, stride: usize) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!(
                "maxpool2d expects [h, w, c], got {}",
                shape_str(&s)
            )));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if window == 0 || stride == 0 || window > h || window > w {
            return Err(Error::Dimension(format!(
                "pool window {window} (stride {stride}) does not fit input {h}x{w}"
            )));
        }
        let (oh, ow) = ((h - window) / stride + 1, (w - window) / stride + 1);
        let v = self.value(input).data();
        let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (oy * ow + ox) * c;
                for ky in 0..window {
                    for kx in 0..window {
                        let base = ((oy * stride + ky) * w + ox * stride + kx) * c;
                        for ch in 0..c {
                            let e = v[base + ch];
                            if e > out[o + ch] || (ky == 0 && kx == 0) {
                                out[o + ch] = e;
                                argmax[o + ch] = base + ch;
                            }
                        }
                    }
                }
            }
        }
        let out = tensor(vec![oh, ow, c], out);
        Ok(self.push(out, Op::MaxPool2d { input, argmax }))
    }

    /// `-log softmax(logits)[label]` as a scalar.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let v = self.value(logits);
        if label >= v.len() {
            return Err(Error::Usage(format!(
                "label {label} out of range for {} classes",
                v.len()
            )));
        }
        let probs = softmax_slice(v.data());
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.data().iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - v.data()[label];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }
}

pub(crate) const L2_EPS: f64 = 1e-12;

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Dimension(format!(
            "{what} expects a matrix, got {}",
            shape_str(shape)
        ))),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    tensor(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    tensor(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn conv_forward(g: &ConvGeometry, x: &[f64], wt: &[f64], bias: &[f64]) -> Vec<f64> {
    let (cin, cout) = (g.in_c, g.out_c);
    let mut y = vec![0.0; g.out_h * g.out_w * cout];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let out = &mut y[(oy * g.out_w + ox) * cout..][..cout];
            out.copy_from_slice(bias);
            for ky in 0..g.kernel_h {
                let Some(iy) = g.source(oy, ky, g.in_h) else {
                    continue;
                };
                for kx in 0..g.kernel_w {
                    let Some(ix) = g.source(ox, kx, g.in_w) else {
                        continue;
                    };
                    let xin = &x[(iy * g.in_w + ix) * cin..][..cin];
                    let wk = &wt[(ky * g.kernel_w + kx) * cin * cout..][..cin * cout];
                    for (ci, &a) in xin.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let wrow = &wk[ci * cout..][..cout];
                        for (o, &w) in out.iter_mut().zip(wrow) {
                            *o += a * w;
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradients of a convolution. `dx`/`dw`/`db` are accumulated into when present.
fn conv_backward(
    geom: &ConvGeometry,
    x: &[f64],
    wt: &[f64],
    gy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (cin, cout) = (geom.in_c, geom.out_c);
    if let Some(db) = db {
        for pix in gy.chunks_exact(cout) {
            for (d, &g) in db.iter_mut().zip(pix) {
                *d += g;
            }
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let gout = &gy[(oy * geom.out_w + ox) * cout..][..cout];
            for ky in 0..geom.kernel_h {
                let Some(iy) = geom.source(oy, ky, geom.in_h) else {
                    continue;
                };
                for kx in 0..geom.kernel_w {
                    let Some(ix) = geom.source(ox, kx, geom.in_w) else {
                        continue;
                    };
                    let xoff = (iy * geom.in_w + ix) * cin;
                    let woff = (ky * geom.kernel_w + kx) * cin * cout;
                    if let Some(dw) = dw.as_deref_mut() {
                        let xin = &x[xoff..xoff + cin];
                        let dwk = &mut dw[woff..woff + cin * cout];
                        for (ci, &a) in xin.iter().enumerate() {
                            if a == 0.0 {
                                continue;
                            }
                            for (d, &g) in dwk[ci * cout..][..cout].iter_mut().zip(gout) {
                                *d += a * g;
                            }
                        }
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wk = &wt[woff..woff + cin * cout];
                        for ci in 0..cin {
                            let s: f64 = wk[ci * cout..][..cout]
                                .iter()
                                .zip(gout)
                                .map(|(w, g)| w * g)
                                .sum();
                            dx[xoff + ci] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Adds the contribution `f` writes into the gradient buffer of `v`.
fn accumulate(tape: &Tape, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !tape.nodes[v.0].requires_grad {
        return;
    }
    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; tape.nodes[v.0].value.len()]);
    f(buf);
}

pub(super) fn backward_op(tape: &Tape, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &tape.nodes[i];
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            let av = tape.value(*a).data();
            let bv = tape.value(*b).data();
            accumulate(tape, grads, *a, |da| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let s: f64 = grow.iter().zip(&bv[p * n..(p + 1) * n]).map(|(x, y)| x * y).sum();
                        da[i * k + p] += s;
                    }
                }
            });
            accumulate(tape, grads, *b, |db| {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = av[i * k + p];
                        for (d, &y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += x * y;
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(tape, grads, *a, |d| add_into(d, g));
            accumulate(tape, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(tape, grads, *a, |d| add_into(d, g));
            accumulate(tape, grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (tape.value(*a).data(), tape.value(*b).data());
            accumulate(tape, grads, *a, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(bv) {
                    *d += g * y;
                }
            });
            accumulate(tape, grads, *b, |d| {
                for ((d, g), x) in d.iter_mut().zip(g).zip(av) {
                    *d += g * x;
                }
            });
        }
        Op::Scale(x, c) => accumulate(tape, grads, *x, |d| {
            d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)
        }),
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(tape, grads, *x, |d| add_into(d, g)),
        Op::Activation(x, kind) => {
            let xv = tape.value(*x).data();
            accumulate(tape, grads, *x, |d| {
                for (((d, g), &xi), &yi) in d.iter_mut().zip(g).zip(xv).zip(out) {
                    *d += g * kind.derivative(xi, yi);
                }
            });
        }
        Op::Softmax(x) => {
            let dot: f64 = g.iter().zip(out).map(|(g, y)| g * y).sum();
            accumulate(tape, grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    *d += y * (g - dot);
                }
            });
        }
        Op::L2Normalize { x, norm } => {
            let dot: f64 = g.iter().zip(out).map(|(g, y)| g * y).sum();
            accumulate(tape, grads, *x, |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    *d += (g - y * dot) / norm;
                }
            });
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = tape.value(*p).len();
                accumulate(tape, grads, *p, |d| add_into(d, &g[offset..offset + n]));
                offset += n;
            }
        }
        Op::Sum(x) => accumulate(tape, grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
        Op::Dot(a, b) => {
            let (av, bv) = (tape.value(*a).data(), tape.value(*b).data());
            accumulate(tape, grads, *a, |d| {
                d.iter_mut().zip(bv).for_each(|(d, y)| *d += g[0] * y)
            });
            accumulate(tape, grads, *b, |d| {
                d.iter_mut().zip(av).for_each(|(d, x)| *d += g[0] * x)
            });
        }
        Op::MeanRows { x, rows, cols } => {
            let inv = 1.0 / *rows as f64;
            accumulate(tape, grads, *x, |d| {
                for row in d.chunks_exact_mut(*cols) {
                    row.iter_mut().zip(g).for_each(|(d, g)| *d += g * inv);
                }
            });
        }
        Op::MaxRows { x, cols, argmax } => accumulate(tape, grads, *x, |d| {
            for c in 0..*cols {
                d[argmax[c]] += g[c];
            }
        }),
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let xv = tape.value(*input).data();
            let wv = tape.value(*weight).data();
            let mut take = |v: Var| -> Option<Vec<f64>> {
                if tape.nodes[v.0].requires_grad {
                    Some(
                        grads[v.0]
                            .take()
                            .unwrap_or_else(|| vec![0.0; tape.nodes[v.0].value.len()]),
                    )
                } else {
                    None
                }
            };
            let mut dx = take(*input);
            let mut dw = take(*weight);
            let mut db = take(*bias);
            conv_backward(
                geom,
                xv,
                wv,
                g,
                dx.as_deref_mut(),
                dw.as_deref_mut(),
                db.as_deref_mut(),
            );
            for (v, d) in [(*input, dx), (*weight, dw), (*bias, db)] {
                if let Some(d) = d {
                    grads[v.0] = Some(d);
                }
            }
        }
        Op::MaxPool2d { input, argmax } => accumulate(tape, grads, *input, |d| {
            for (&src, &gv) in argmax.iter().zip(g) {
                d[src] += gv;
            }
        }),
        Op::CrossEntropy {
            logits,
            label,
            probs,
        } => accumulate(tape, grads, *logits, |d| {
            for (j, (d, p)) in d.iter_mut().zip(probs).enumerate() {
                let target = if j == *label { 1.0 } else { 0.0 };
                *d += g[0] * (p - target);
            }
        }),
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}
