use super::conv::{col2im_add, gemm, im2col, Geometry};
use super::tensor::{validate_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Mean(Var),
    BiasAdd { x: Var, bias: Var },
    Conv2d { input: Var, kernel: Var, geom: Geometry },
    ConvTranspose2d { input: Var, kernel: Var, geom: Geometry },
    L1 { pred: Var, target: Var },
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, so
/// insertion order is already a topological order.
///
/// A graph supports exactly one [`Graph::backward`] call; afterwards the
/// intermediate values are released and only leaf gradients remain.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
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

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records a leaf holding a copy of `tensor`. Gradients are tracked when
    /// the tensor is marked `requires_grad`.
    pub fn input(&mut self, tensor: &Tensor) -> Result<Var> {
        self.leaf(tensor.shape(), tensor.values().to_vec(), tensor.requires_grad())
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Result<Var> {
        self.leaf(tensor.shape(), tensor.values().to_vec(), false)
    }

    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Var> {
        validate_shape(shape, "leaf")?;
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::InvalidShape {
                op: "leaf",
                reason: format!("shape {shape:?} does not hold {} values", values.len()),
            });
        }
        self.push(shape.to_vec(), values, Op::Leaf, requires_grad, "leaf")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let node = self.node(v)?;
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        Ok(node.value[0])
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Result<Tensor> {
        let node = self.node(v)?;
        Tensor::new(&node.shape, node.value.clone())
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// participated in it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar(v.0))
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        needs_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape != nb.shape {
            return Err(Error::ShapeMismatch {
                op,
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let needs = na.needs_grad || nb.needs_grad;
        let shape = na.shape.clone();
        self.push(shape, value, op, needs, name)
    }

    fn unary(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let nx = self.node(x)?;
        let value = nx.value.iter().map(|&v| f(v)).collect();
        let (shape, needs) = (nx.shape.clone(), nx.needs_grad);
        self.push(shape, value, op, needs, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, Op::Neg(x), |v| -v)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        self.unary("scale", x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, Op::Square(x), |v| v * v)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "clamp bounds must satisfy lo <= hi, got [{lo}, {hi}]"
            )));
        }
        self.unary("clamp", x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Mean over every element, producing a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let nx = self.node(x)?;
        let m = nx.value.iter().sum::<f64>() / nx.value.len() as f64;
        let needs = nx.needs_grad;
        self.push(vec![1], vec![m], Op::Mean(x), needs, "mean")
    }

    /// Adds a per-channel bias to an `N×C×…` tensor.
    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (nx, nb) = (self.node(x)?, self.node(bias)?);
        if nx.shape.len() < 2 || nb.value.len() != nx.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                left: nx.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let channels = nx.shape[1];
        let plane: usize = nx.shape[2..].iter().product();
        let mut value = nx.value.clone();
        for (i, chunk) in value.chunks_mut(plane).enumerate() {
            let b = nb.value[i % channels];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        let needs = nx.needs_grad || nb.needs_grad;
        let shape = nx.shape.clone();
        self.push(shape, value, Op::BiasAdd { x, bias }, needs, "bias_add")
    }

    /// 2-D cross-correlation of an `N×C×H×W` input with an `O×C×kH×kW`
    /// kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ni, nk) = (self.node(input)?, self.node(kernel)?);
        if ni.shape.len() != 4 || nk.shape.len() != 4 || ni.shape[1] != nk.shape[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                left: ni.shape.clone(),
                right: nk.shape.clone(),
            });
        }
        let (batch, out_c) = (ni.shape[0], nk.shape[0]);
        let geom = Geometry::for_conv(
            ni.shape[1],
            ni.shape[2],
            ni.shape[3],
            nk.shape[2],
            nk.shape[3],
            stride,
            padding,
        )?;
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * cols_n];
        let mut out = vec![0.0; batch * out_c * cols_n];
        for (src, dst) in ni
            .value
            .chunks(geom.image_len())
            .zip(out.chunks_mut(out_c * cols_n))
        {
            im2col(src, &geom, &mut cols);
            gemm(out_c, rows, cols_n, &nk.value, false, &cols, false, 0.0, dst);
        }
        let needs = ni.needs_grad || nk.needs_grad;
        self.push(
            vec![batch, out_c, geom.out_h, geom.out_w],
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            needs,
            "conv2d",
        )
    }

    /// Transposed convolution (the adjoint of [`Graph::conv2d`]) of an
    /// `N×I×H×W` input with an `I×O×kH×kW` kernel.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ni, nk) = (self.node(input)?, self.node(kernel)?);
        if ni.shape.len() != 4 || nk.shape.len() != 4 || ni.shape[1] != nk.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                left: ni.shape.clone(),
                right: nk.shape.clone(),
            });
        }
        let (batch, in_c, out_c) = (ni.shape[0], ni.shape[1], nk.shape[1]);
        let geom = Geometry::for_transpose(
            out_c,
            ni.shape[2],
            ni.shape[3],
            nk.shape[2],
            nk.shape[3],
            stride,
            padding,
        )?;
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * cols_n];
        let mut out = vec![0.0; batch * geom.image_len()];
        for (src, dst) in ni
            .value
            .chunks(in_c * cols_n)
            .zip(out.chunks_mut(geom.image_len()))
        {
            gemm(rows, in_c, cols_n, &nk.value, true, src, false, 0.0, &mut cols);
            col2im_add(&cols, &geom, dst);
        }
        let needs = ni.needs_grad || nk.needs_grad;
        self.push(
            vec![batch, out_c, geom.height, geom.width],
            out,
            Op::ConvTranspose2d {
                input,
                kernel,
                geom,
            },
            needs,
            "conv_transpose2d",
        )
    }

    /// Mean absolute error. The subgradient at an exact tie is 0.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, target)?;
        let (np, nt) = (&self.nodes[pred.0], &self.nodes[target.0]);
        let n = np.value.len() as f64;
        let total: f64 = np.value.iter().zip(&nt.value).map(|(p, t)| (p - t).abs()).sum();
        let needs = np.needs_grad || nt.needs_grad;
        self.push(vec![1], vec![total / n], Op::L1 { pred, target }, needs, "l1_loss")
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let (np, nt) = (&self.nodes[pred.0], &self.nodes[target.0]);
        let n = np.value.len() as f64;
        let total: f64 = np
            .value
            .iter()
            .zip(&nt.value)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let needs = np.needs_grad || nt.needs_grad;
        self.push(vec![1], vec![total / n], Op::Mse { pred, target }, needs, "mse_loss")
    }

    /// Reverse pass from a scalar `loss`. Consumes the graph: intermediate
    /// values are dropped and a second call is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let node = self.node(loss)?;
        if node.value.len() != 1 {
            return Err(Error::NotScalar(node.shape.clone()));
        }
        let loss_needs_grad = node.needs_grad;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.consumed = true;
        if !loss_needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(upstream) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &upstream);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.grads[idx] = Some(upstream);
            }
        }

        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.value = Vec::new();
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot, &self.nodes);
    }

    fn propagate(&mut self, idx: usize, up: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, |g, _| add_into(g, up));
                self.accumulate(b, |g, _| add_into(g, up));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |g, _| add_into(g, up));
                self.accumulate(b, |g, _| g.iter_mut().zip(up).for_each(|(g, u)| *g -= u));
            }
            Op::Mul(a, b) => {
                self.accumulate(a, |g, nodes| {
                    for ((g, u), y) in g.iter_mut().zip(up).zip(&nodes[b.0].value) {
                        *g += u * y;
                    }
                });
                self.accumulate(b, |g, nodes| {
                    for ((g, u), x) in g.iter_mut().zip(up).zip(&nodes[a.0].value) {
                        *g += u * x;
                    }
                });
            }
            Op::Neg(x) => {
                self.accumulate(x, |g, _| g.iter_mut().zip(up).for_each(|(g, u)| *g -= u));
            }
            Op::Scale(x, c) => {
                self.accumulate(x, |g, _| g.iter_mut().zip(up).for_each(|(g, u)| *g += c * u));
            }
            Op::Relu(x) => self.accumulate(x, |g, nodes| {
                for ((g, u), v) in g.iter_mut().zip(up).zip(&nodes[x.0].value) {
                    if *v > 0.0 {
                        *g += u;
                    }
                }
            }),
            Op::Abs(x) => self.accumulate(x, |g, nodes| {
                for ((g, u), v) in g.iter_mut().zip(up).zip(&nodes[x.0].value) {
                    *g += u * sign(*v);
                }
            }),
            Op::Square(x) => self.accumulate(x, |g, nodes| {
                for ((g, u), v) in g.iter_mut().zip(up).zip(&nodes[x.0].value) {
                    *g += 2.0 * v * u;
                }
            }),
            Op::Clamp { x, lo, hi } => self.accumulate(x, |g, nodes| {
                // boundary values count as clipped
                for ((g, u), v) in g.iter_mut().zip(up).zip(&nodes[x.0].value) {
                    if *v > lo && *v < hi {
                        *g += u;
                    }
                }
            }),
            Op::Mean(x) => self.accumulate(x, |g, _| {
                let d = up[0] / g.len() as f64;
                g.iter_mut().for_each(|g| *g += d);
            }),
            Op::BiasAdd { x, bias } => {
                self.accumulate(x, |g, _| add_into(g, up));
                let channels = self.nodes[bias.0].value.len();
                let plane: usize = self.nodes[idx].shape[2..].iter().product();
                self.accumulate(bias, |g, _| {
                    for (i, chunk) in up.chunks(plane).enumerate() {
                        g[i % channels] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => self.conv2d_backward(input, kernel, &geom, up),
            Op::ConvTranspose2d {
                input,
                kernel,
                geom,
            } => self.conv_transpose2d_backward(input, kernel, &geom, up),
            Op::L1 { pred, target } => {
                let scale = up[0] / self.nodes[pred.0].value.len() as f64;
                let diff_sign: Vec<f64> = self.nodes[pred.0]
                    .value
                    .iter()
                    .zip(&self.nodes[target.0].value)
                    .map(|(p, t)| scale * sign(p - t))
                    .collect();
                self.accumulate(pred, |g, _| add_into(g, &diff_sign));
                self.accumulate(target, |g, _| {
                    g.iter_mut().zip(&diff_sign).for_each(|(g, d)| *g -= d)
                });
            }
            Op::Mse { pred, target } => {
                let scale = 2.0 * up[0] / self.nodes[pred.0].value.len() as f64;
                let diff: Vec<f64> = self.nodes[pred.0]
                    .value
                    .iter()
                    .zip(&self.nodes[target.0].value)
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                self.accumulate(pred, |g, _| add_into(g, &diff));
                self.accumulate(target, |g, _| g.iter_mut().zip(&diff).for_each(|(g, d)| *g -= d));
            }
        }
    }

    fn conv2d_backward(&mut self, input: Var, kernel: Var, geom: &Geometry, up: &[f64]) {
        let out_c = self.nodes[kernel.0].shape[0];
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let want_input = self.nodes[input.0].needs_grad;
        let want_kernel = self.nodes[kernel.0].needs_grad;
        let mut cols = vec![0.0; rows * cols_n];

        if want_kernel {
            self.accumulate(kernel, |gk, nodes| {
                let src = &nodes[input.0].value;
                for (img, dout) in src.chunks(geom.image_len()).zip(up.chunks(out_c * cols_n)) {
                    im2col(img, geom, &mut cols);
                    // dK (O×R) += dOut (O×P) · colsᵀ (P×R)
                    gemm(out_c, cols_n, rows, dout, false, &cols, true, 1.0, gk);
                }
            });
        }
        if want_input {
            self.accumulate(input, |gi, nodes| {
                let k = &nodes[kernel.0].value;
                for (gimg, dout) in gi.chunks_mut(geom.image_len()).zip(up.chunks(out_c * cols_n)) {
                    // dCols (R×P) = Kᵀ (R×O) · dOut (O×P)
                    gemm(rows, out_c, cols_n, k, true, dout, false, 0.0, &mut cols);
                    col2im_add(&cols, geom, gimg);
                }
            });
        }
    }

    fn conv_transpose2d_backward(&mut self, input: Var, kernel: Var, geom: &Geometry, up: &[f64]) {
        let in_c = self.nodes[kernel.0].shape[0];
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let want_input = self.nodes[input.0].needs_grad;
        let want_kernel = self.nodes[kernel.0].needs_grad;
        let mut cols = vec![0.0; rows * cols_n];

        if want_kernel {
            self.accumulate(kernel, |gk, nodes| {
                let src = &nodes[input.0].value;
                for (x, dout) in src.chunks(in_c * cols_n).zip(up.chunks(geom.image_len())) {
                    im2col(dout, geom, &mut cols);
                    // dK (I×R) += x (I×P) · colsᵀ (P×R)
                    gemm(in_c, cols_n, rows, x, false, &cols, true, 1.0, gk);
                }
            });
        }
        if want_input {
            self.accumulate(input, |gi, nodes| {
                let k = &nodes[kernel.0].value;
                for (gx, dout) in gi.chunks_mut(in_c * cols_n).zip(up.chunks(geom.image_len())) {
                    im2col(dout, geom, &mut cols);
                    // dx (I×P) += K (I×R) · cols (R×P)
                    gemm(in_c, rows, cols_n, k, false, &cols, false, 1.0, gx);
                }
            });
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
