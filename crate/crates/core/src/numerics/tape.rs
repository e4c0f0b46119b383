//! Tape-based reverse-mode automatic differentiation over batched tensors.
//!
//! Operations are recorded on a [`Tape`] in execution order, so the node list
//! is topologically sorted by construction. [`Tape::backward`] walks it once in
//! reverse, applying each node's local backward rule, and returns the
//! gradients of every leaf that requires them.
//!
//! Leaves created with [`Tape::param`] borrow their values from a [`Tensor`]
//! owned elsewhere (usually a model), so binding a model to a fresh tape for
//! each mini-batch costs no copies.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::numerics::tensor::{numel, rectify, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kernel: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Hinge(Var),
    Reshape(Var),
    RowDistance(Var, Var),
    RowSqDistance(Var, Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of each bound parameter into its tensor's grad
    /// buffer. Parameters bound to `None` (not on this tape) receive an
    /// explicit zero gradient so the optimizer sees a complete set.
    pub fn accumulate_into(&self, vars: &[Option<Var>], params: Vec<&mut Tensor>) -> Result<()> {
        if vars.len() != params.len() {
            return Err(Error::LengthMismatch {
                what: "bound vars vs parameters",
                left: vars.len(),
                right: params.len(),
            });
        }
        for (v, p) in vars.iter().zip(params) {
            match v.and_then(|v| self.get(v)) {
                Some(g) => p.accumulate_grad(g)?,
                None => p.ensure_grad(),
            }
        }
        Ok(())
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op` optionally transposes.
/// `a` is stored row-major with logical shape `[m, k]` after `op`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Row-major strides for op(a) of shape [m, k]: stored [m, k] or [k, m].
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized m*k, k*n and m*n by every caller; strides
    // above address exactly those ranges.
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

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let patch = g.patch();
    let pos = g.positions();
    let mut cols = vec![0.0; g.batch * pos * patch];
    let pad = g.padding as isize;
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (n * pos + oy * g.out_w + ox) * patch;
                for c in 0..g.in_ch {
                    let plane = (n * g.in_ch + c) * g.height * g.width;
                    for ky in 0..g.kernel {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            cols[row + (c * g.kernel + ky) * g.kernel + kx] =
                                x[plane + iy as usize * g.width + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let patch = g.patch();
    let pos = g.positions();
    let pad = g.padding as isize;
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = (n * pos + oy * g.out_w + ox) * patch;
                for c in 0..g.in_ch {
                    let plane = (n * g.in_ch + c) * g.height * g.width;
                    for ky in 0..g.kernel {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let ix = ox as isize + kx as isize - pad;
                            if ix < 0 || ix >= g.width as isize {
                                continue;
                            }
                            dx[plane + iy as usize * g.width + ix as usize] +=
                                dcols[row + (c * g.kernel + ky) * g.kernel + kx];
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn add_scaled_into(dst: &mut Option<Vec<f64>>, src: &[f64], s: f64) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += s * b),
        None => *dst = Some(src.iter().map(|b| s * b).collect()),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf borrowing `t`'s values.
    pub fn param(&self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.values()), Op::Leaf, true)
    }

    /// Binds every tensor in order, returning one var per tensor.
    pub fn params(&self, ts: &[&'a Tensor]) -> Vec<Var> {
        ts.iter().map(|t| self.param(t)).collect()
    }

    /// Leaf that requires a gradient but owns its values.
    pub fn variable(&self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_values()), Op::Leaf, true)
    }

    /// Leaf excluded from differentiation (inputs, targets).
    pub fn constant(&self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_values()), Op::Leaf, false)
    }

    /// Constant leaf borrowing a slice, e.g. a view into a dataset.
    pub fn constant_slice(&self, shape: Vec<usize>, values: &'a [f64]) -> Result<Var> {
        if numel(&shape) != values.len() {
            return Err(Error::BadLength {
                expected: numel(&shape),
                shape,
                actual: values.len(),
            });
        }
        Ok(self.push(shape, Cow::Borrowed(values), Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<f64> {
        self.nodes.borrow()[v.0].value.to_vec()
    }

    /// Borrowed view of a node's values; do not record ops while held.
    pub fn value_ref(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value[0]
    }

    fn binary_same_shape(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape != nb.shape {
            return Err(mismatch(name, &na.shape, &nb.shape));
        }
        let out = na.value.iter().zip(nb.value.iter()).map(|(&x, &y)| f(x, y)).collect();
        Ok((na.shape.clone(), out))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        (na.shape.clone(), na.value.iter().map(|&x| f(x)).collect())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary_same_shape("add", a, b, |x, y| x + y)?;
        Ok(self.push(shape, Cow::Owned(out), Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary_same_shape("subtract", a, b, |x, y| x - y)?;
        Ok(self.push(shape, Cow::Owned(out), Op::Sub(a, b), self.rg(&[a, b])))
    }

    /// Elementwise product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.binary_same_shape("multiply", a, b, |x, y| x * y)?;
        Ok(self.push(shape, Cow::Owned(out), Op::Mul(a, b), self.rg(&[a, b])))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let (shape, out) = self.unary(a, |x| c * x);
        self.push(shape, Cow::Owned(out), Op::Scale(a, c), self.rg(&[a]))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let (shape, out) = self.unary(a, |x| x + c);
        self.push(shape, Cow::Owned(out), Op::AddScalar(a), self.rg(&[a]))
    }

    /// `x[n, m] + bias[m]`, broadcasting the bias over rows.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (nx, nb) = (&nodes[x.0], &nodes[bias.0]);
            let cols = match as_matrix(&nx.shape) {
                Some((_, c)) if nb.shape == [c] => c,
                _ => return Err(mismatch("add_bias", &nx.shape, &nb.shape)),
            };
            let mut out = nx.value.to_vec();
            for row in out.chunks_mut(cols) {
                row.iter_mut().zip(nb.value.iter()).for_each(|(o, b)| *o += b);
            }
            (nx.shape.clone(), out)
        };
        Ok(self.push(shape, Cow::Owned(out), Op::AddBias(x, bias), self.rg(&[x, bias])))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let ((n, k), (k2, m)) = match (as_matrix(&na.shape), as_matrix(&nb.shape)) {
                (Some(x), Some(y)) if x.1 == y.0 => (x, y),
                _ => return Err(mismatch("matmul", &na.shape, &nb.shape)),
            };
            debug_assert_eq!(k, k2);
            let mut out = vec![0.0; n * m];
            gemm(n, k, m, &na.value, false, &nb.value, false, &mut out, 0.0);
            (vec![n, m], out)
        };
        Ok(self.push(shape, Cow::Owned(out), Op::MatMul(a, b), self.rg(&[a, b])))
    }

    pub fn relu(&self, a: Var) -> Var {
        let (shape, out) = self.unary(a, rectify);
        self.push(shape, Cow::Owned(out), Op::Relu(a), self.rg(&[a]))
    }

    /// `[x]_+ = max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn hinge(&self, a: Var) -> Var {
        let (shape, out) = self.unary(a, rectify);
        self.push(shape, Cow::Owned(out), Op::Hinge(a), self.rg(&[a]))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            if numel(&shape) != na.value.len() {
                return Err(mismatch("reshape", &na.shape, &shape));
            }
            na.value.to_vec()
        };
        Ok(self.push(shape, Cow::Owned(out), Op::Reshape(a), self.rg(&[a])))
    }

    /// Collapses all trailing dimensions: `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(a, vec![n, rest])
    }

    fn row_pairs(&self, name: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.shape != nb.shape {
            return Err(mismatch(name, &na.shape, &nb.shape));
        }
        match na.shape.as_slice() {
            [m] => Ok((1, *m)),
            [n, m] => Ok((*n, *m)),
            _ => Err(mismatch(name, &na.shape, &nb.shape)),
        }
    }

    /// Per-row Euclidean distance of two `[n, m]` tensors, giving `[n]`.
    ///
    /// Where two rows coincide the gradient is the unit subgradient
    /// `(1, ..., 1) / sqrt(m)` with respect to `a` (negated for `b`).
    pub fn row_distance(&self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.row_pairs("row_distance", a, b)?;
        let out = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            (0..rows)
                .map(|r| {
                    let s = r * cols;
                    (s..s + cols).map(|i| (va[i] - vb[i]).powi(2)).sum::<f64>().sqrt()
                })
                .collect()
        };
        Ok(self.push(vec![rows], Cow::Owned(out), Op::RowDistance(a, b), self.rg(&[a, b])))
    }

    /// Per-row squared Euclidean distance.
    pub fn row_sq_distance(&self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.row_pairs("row_sq_distance", a, b)?;
        let out = {
            let nodes = self.nodes.borrow();
            let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
            (0..rows)
                .map(|r| {
                    let s = r * cols;
                    (s..s + cols).map(|i| (va[i] - vb[i]).powi(2)).sum::<f64>()
                })
                .collect()
        };
        Ok(self.push(vec![rows], Cow::Owned(out), Op::RowSqDistance(a, b), self.rg(&[a, b])))
    }

    /// `‖a − b‖₂` of two 1-D tensors as a scalar.
    pub fn euclidean_distance(&self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 1 {
            return Err(mismatch("euclidean_distance", &sa, &self.shape(b)));
        }
        let d = self.row_distance(a, b)?;
        self.reshape(d, vec![])
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.iter().sum::<f64>();
        self.push(vec![], Cow::Owned(vec![s]), Op::Sum(a), self.rg(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            v.iter().sum::<f64>() / v.len() as f64
        };
        self.push(vec![], Cow::Owned(vec![s]), Op::Mean(a), self.rg(&[a]))
    }

    /// Stride-1 square-kernel convolution. `x: [n, c, h, w]`,
    /// `weight: [out, c * k * k]`, `bias: [out]`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Var, kernel: usize, padding: usize) -> Result<Var> {
        let (shape, out, geom, cols) = {
            let nodes = self.nodes.borrow();
            let (nx, nw, nb) = (&nodes[x.0], &nodes[weight.0], &nodes[bias.0]);
            let (batch, in_ch, height, width) = match nx.shape.as_slice() {
                [n, c, h, w] => (*n, *c, *h, *w),
                _ => return Err(mismatch("conv2d", &nx.shape, &nw.shape)),
            };
            let out_ch = match as_matrix(&nw.shape) {
                Some((o, p)) if p == in_ch * kernel * kernel => o,
                _ => return Err(mismatch("conv2d", &nx.shape, &nw.shape)),
            };
            if nb.shape != [out_ch] {
                return Err(mismatch("conv2d bias", &nw.shape, &nb.shape));
            }
            if height + 2 * padding < kernel || width + 2 * padding < kernel {
                return Err(mismatch("conv2d", &nx.shape, &nw.shape));
            }
            let geom = ConvGeometry {
                batch,
                in_ch,
                height,
                width,
                out_ch,
                kernel,
                padding,
                out_h: height + 2 * padding - kernel + 1,
                out_w: width + 2 * padding - kernel + 1,
            };
            let cols = im2col(&nx.value, &geom);
            let rows = batch * geom.positions();
            let mut flat = vec![0.0; rows * out_ch];
            gemm(rows, geom.patch(), out_ch, &cols, false, &nw.value, true, &mut flat, 0.0);
            // [n, pos, o] -> [n, o, pos] with bias.
            let pos = geom.positions();
            let mut out = vec![0.0; rows * out_ch];
            for n in 0..batch {
                for p in 0..pos {
                    let src = (n * pos + p) * out_ch;
                    for o in 0..out_ch {
                        out[(n * out_ch + o) * pos + p] = flat[src + o] + nb.value[o];
                    }
                }
            }
            (vec![batch, out_ch, geom.out_h, geom.out_w], out, geom, cols)
        };
        let rg = self.rg(&[x, weight, bias]);
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::Conv2d {
                input: x,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// 2x2 max pooling with stride 2 over `[n, c, h, w]` (odd edges dropped).
    pub fn max_pool2d(&self, x: Var) -> Result<Var> {
        let (shape, out, argmax) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let (n, c, h, w) = match nx.shape.as_slice() {
                [n, c, h, w] if *h >= 2 && *w >= 2 => (*n, *c, *h, *w),
                _ => return Err(mismatch("max_pool2d", &nx.shape, &[2, 2])),
            };
            let (oh, ow) = (h / 2, w / 2);
            let mut out = Vec::with_capacity(n * c * oh * ow);
            let mut argmax = Vec::with_capacity(n * c * oh * ow);
            for plane in 0..n * c {
                let base = plane * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = base + 2 * oy * w + 2 * ox;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                            if nx.value[i] > nx.value[best] {
                                best = i;
                            }
                        }
                        out.push(nx.value[best]);
                        argmax.push(best);
                    }
                }
            }
            (vec![n, c, oh, ow], out, argmax)
        };
        Ok(self.push(shape, Cow::Owned(out), Op::MaxPool2d { input: x, argmax }, self.rg(&[x])))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let rg = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if rg(*a) {
                        add_into(&mut grads[a.0], &g);
                    }
                    if rg(*b) {
                        add_into(&mut grads[b.0], &g);
                    }
                }
                Op::Sub(a, b) => {
                    if rg(*a) {
                        add_into(&mut grads[a.0], &g);
                    }
                    if rg(*b) {
                        add_scaled_into(&mut grads[b.0], &g, -1.0);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if rg(*a) {
                        let d: Vec<f64> = g.iter().zip(vb.iter()).map(|(g, y)| g * y).collect();
                        add_into(&mut grads[a.0], &d);
                    }
                    if rg(*b) {
                        let d: Vec<f64> = g.iter().zip(va.iter()).map(|(g, x)| g * x).collect();
                        add_into(&mut grads[b.0], &d);
                    }
                }
                Op::Scale(a, c) => add_scaled_into(&mut grads[a.0], &g, *c),
                Op::AddScalar(a) | Op::Reshape(a) => add_into(&mut grads[a.0], &g),
                Op::AddBias(x, b) => {
                    if rg(*x) {
                        add_into(&mut grads[x.0], &g);
                    }
                    if rg(*b) {
                        let cols = nodes[b.0].value.len();
                        let mut db = vec![0.0; cols];
                        for row in g.chunks(cols) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        add_into(&mut grads[b.0], &db);
                    }
                }
                Op::MatMul(a, b) => {
                    let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                    let (n, k) = (na.shape[0], na.shape[1]);
                    let m = nb.shape[1];
                    if rg(*a) {
                        // dA = G · Bᵀ
                        let mut da = vec![0.0; n * k];
                        gemm(n, m, k, &g, false, &nb.value, true, &mut da, 0.0);
                        add_into(&mut grads[a.0], &da);
                    }
                    if rg(*b) {
                        // dB = Aᵀ · G
                        let mut db = vec![0.0; k * m];
                        gemm(k, n, m, &na.value, true, &g, false, &mut db, 0.0);
                        add_into(&mut grads[b.0], &db);
                    }
                }
                Op::Relu(a) | Op::Hinge(a) => {
                    let va = &nodes[a.0].value;
                    let d: Vec<f64> = g
                        .iter()
                        .zip(va.iter())
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    add_into(&mut grads[a.0], &d);
                }
                Op::RowDistance(a, b) | Op::RowSqDistance(a, b) => {
                    let squared = matches!(node.op, Op::RowSqDistance(..));
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let rows = node.value.len();
                    let cols = va.len() / rows;
                    let mut da = vec![0.0; va.len()];
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        if squared {
                            for i in span {
                                da[i] = 2.0 * g[r] * (va[i] - vb[i]);
                            }
                        } else if node.value[r] > 0.0 {
                            let coef = g[r] / node.value[r];
                            for i in span {
                                da[i] = coef * (va[i] - vb[i]);
                            }
                        } else {
                            // Coincident rows: use the unit subgradient
                            // (1, ..., 1) / sqrt(m) so collapsed points separate.
                            let coef = g[r] / (cols as f64).sqrt();
                            da[span].iter_mut().for_each(|d| *d = coef);
                        }
                    }
                    if rg(*a) {
                        add_into(&mut grads[a.0], &da);
                    }
                    if rg(*b) {
                        add_scaled_into(&mut grads[b.0], &da, -1.0);
                    }
                }
                Op::Sum(a) => {
                    let n = nodes[a.0].value.len();
                    add_into(&mut grads[a.0], &vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[a.0].value.len();
                    add_into(&mut grads[a.0], &vec![g[0] / n as f64; n]);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => {
                    let pos = geom.positions();
                    let rows = geom.batch * pos;
                    let oc = geom.out_ch;
                    // [n, o, pos] -> [n*pos, o]
                    let mut gflat = vec![0.0; rows * oc];
                    for n in 0..geom.batch {
                        for o in 0..oc {
                            let src = (n * oc + o) * pos;
                            for p in 0..pos {
                                gflat[(n * pos + p) * oc + o] = g[src + p];
                            }
                        }
                    }
                    if rg(*bias) {
                        let mut db = vec![0.0; oc];
                        for row in gflat.chunks(oc) {
                            db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                        }
                        add_into(&mut grads[bias.0], &db);
                    }
                    if rg(*weight) {
                        let mut dw = vec![0.0; oc * geom.patch()];
                        gemm(oc, rows, geom.patch(), &gflat, true, cols, false, &mut dw, 0.0);
                        add_into(&mut grads[weight.0], &dw);
                    }
                    if rg(*input) {
                        let mut dcols = vec![0.0; rows * geom.patch()];
                        gemm(rows, oc, geom.patch(), &gflat, false, &nodes[weight.0].value, false, &mut dcols, 0.0);
                        let mut dx = vec![0.0; nodes[input.0].value.len()];
                        col2im_add(&dcols, geom, &mut dx);
                        add_into(&mut grads[input.0], &dx);
                    }
                }
                Op::MaxPool2d { input, argmax } => {
                    let mut dx = vec![0.0; nodes[input.0].value.len()];
                    for (gi, &src) in g.iter().zip(argmax) {
                        dx[src] += gi;
                    }
                    add_into(&mut grads[input.0], &dx);
                }
            }
        }

        for (i, n) in nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.requires_grad) {
                grads[i] = None;
            } else if let Some(g) = &grads[i] {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
            }
        }
        Ok(Gradients { grads })
    }
}
