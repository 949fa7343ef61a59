//! Operation tape with reverse-mode differentiation.
//!
//! A [`Graph`] owns every intermediate value. Each op pushes a node that
//! remembers its inputs; [`Graph::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products into a [`Gradients`] table.
//! Nodes whose inputs carry no gradient are recorded as constants, so a
//! graph built purely from constants costs nothing extra to differentiate.

use super::conv::ConvGeom;
use super::resample::{Direction, ResampleGeom, ResampleMode};
use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleRows(Var, Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Reshape(Var),
    StopGradient,
    Conv2d(Var, Var, ConvGeom),
    Resample(Var, ResampleGeom),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every tracked node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that gradients are computed for.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t, Op::Leaf, false)
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push("scale", v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, Op::AddScalar(a), &[a])
    }

    /// `out[b, ..] = s[b] * x[b, ..]` for `s` of shape `[B]` or `[B,1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let xv = self.value(x);
        let sv = self.value(s);
        let b = xv.shape()[0];
        if sv.len() != b {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} rows vs {:?} scales", xv.shape(), sv.shape()),
            ));
        }
        let n = xv.row_len();
        let mut out = xv.clone();
        for (row, &c) in out.data_mut().chunks_mut(n).zip(sv.data()) {
            row.iter_mut().for_each(|v| *v *= c);
        }
        self.push("scale_rows", out, Op::ScaleRows(x, s), &[x, s])
    }

    /// Matrix product of `[M,K]` and `[K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let v = Tensor::new([m, n], out)?;
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    /// Adds a `[N]` bias to every row of a `[M,N]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::shape("add_bias", format!("{xs:?} + {bs:?}")));
        }
        let n = xs[1];
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
        }
        self.push("add_bias", out, Op::AddBias(x, bias), &[x, bias])
    }

    /// Adds a per-sample, per-channel bias `[B,C]` to a `[B,C,H,W]` map.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 4 || bs != [xs[0], xs[1]] {
            return Err(Error::shape("add_channel_bias", format!("{xs:?} + {bs:?}")));
        }
        let hw = xs[2] * xs[3];
        let mut out = self.value(x).clone();
        let bv = self.value(bias).data();
        for (plane, b) in out.data_mut().chunks_mut(hw).zip(bv) {
            plane.iter_mut().for_each(|v| *v += b);
        }
        self.push("add_channel_bias", out, Op::AddChannelBias(x, bias), &[x, bias])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push("tanh", v, Op::Tanh(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push("mean", v, Op::Mean(a), &[a])
    }

    /// Sums each leading-axis row, giving shape `[B]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.row_len();
        let v = Tensor::from_vec(t.data().chunks(n).map(|r| r.iter().sum()).collect());
        self.push("sum_rows", v, Op::SumRows(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    /// Value-identical copy through which no gradient flows.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push_unchecked(v, Op::StopGradient, false)
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(kernel), padding)?;
        let out = geom.forward(self.value(x).data(), self.value(kernel).data());
        let v = Tensor::new(geom.out_shape(self.value(x).ndim() == 4), out)?;
        self.push("conv2d", v, Op::Conv2d(x, kernel, geom), &[x, kernel])
    }

    pub fn resample(&mut self, x: Var, factor: usize, direction: Direction, mode: ResampleMode) -> Result<Var> {
        let geom = ResampleGeom::new(self.shape(x), factor, direction, mode)?;
        let v = Tensor::new(geom.out_shape(self.shape(x)), geom.forward(self.value(x).data()))?;
        self.push("resample", v, Op::Resample(x, geom), &[x])
    }

    /// Squared L2 norm of each row, `[B,..] -> [B]`.
    pub fn row_sq_norm(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum_rows(sq)
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(out)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=out.0).map(|_| None).collect();
        if !self.nodes[out.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(Tensor::full(self.shape(out).to_vec(), 1.0));

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, delta: Tensor| match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        };
        match node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                if self.wants(a) {
                    acc(grads, a, g.clone());
                }
                if self.wants(b) {
                    acc(grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    acc(grads, a, g.clone());
                }
                if self.wants(b) {
                    acc(grads, b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    acc(grads, a, g.zip_map(self.value(b), |x, y| x * y).unwrap());
                }
                if self.wants(b) {
                    acc(grads, b, g.zip_map(self.value(a), |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, c) => acc(grads, a, g.scale(c)),
            Op::AddScalar(a) => acc(grads, a, g.clone()),
            Op::ScaleRows(x, s) => {
                let xv = self.value(x);
                let n = xv.row_len();
                let sv = self.value(s);
                if self.wants(x) {
                    let mut dx = g.clone();
                    for (row, &c) in dx.data_mut().chunks_mut(n).zip(sv.data()) {
                        row.iter_mut().for_each(|v| *v *= c);
                    }
                    acc(grads, x, dx);
                }
                if self.wants(s) {
                    let ds: Vec<f64> = g
                        .data()
                        .chunks(n)
                        .zip(xv.data().chunks(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(grads, s, Tensor::new(sv.shape().to_vec(), ds).unwrap());
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    acc(grads, a, Tensor::new([m, k], da).unwrap());
                }
                if self.wants(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    acc(grads, b, Tensor::new([k, n], db).unwrap());
                }
            }
            Op::AddBias(x, bias) => {
                if self.wants(x) {
                    acc(grads, x, g.clone());
                }
                if self.wants(bias) {
                    let n = self.shape(bias)[0];
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    acc(grads, bias, Tensor::from_vec(db));
                }
            }
            Op::AddChannelBias(x, bias) => {
                if self.wants(x) {
                    acc(grads, x, g.clone());
                }
                if self.wants(bias) {
                    let xs = self.shape(x);
                    let hw = xs[2] * xs[3];
                    let db: Vec<f64> = g.data().chunks(hw).map(|p| p.iter().sum()).collect();
                    acc(grads, bias, Tensor::new(self.shape(bias).to_vec(), db).unwrap());
                }
            }
            Op::Tanh(a) => {
                // derivative from the saved output: 1 - tanh^2
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y)).unwrap();
                acc(grads, a, d);
            }
            Op::Sum(a) => acc(grads, a, Tensor::full(self.shape(a).to_vec(), g.data()[0])),
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                acc(grads, a, Tensor::full(self.shape(a).to_vec(), g.data()[0] / n));
            }
            Op::SumRows(a) => {
                let av = self.value(a);
                let n = av.row_len();
                let mut d = Vec::with_capacity(av.len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv, n));
                }
                acc(grads, a, Tensor::new(av.shape().to_vec(), d).unwrap());
            }
            Op::Reshape(a) => {
                let d = g.clone().reshape(self.shape(a).to_vec()).unwrap();
                acc(grads, a, d);
            }
            Op::Conv2d(x, k, geom) => {
                let (dx, dk) = geom.backward(
                    self.value(x).data(),
                    self.value(k).data(),
                    g.data(),
                    self.wants(x),
                    self.wants(k),
                );
                if let Some(dx) = dx {
                    acc(grads, x, Tensor::new(self.shape(x).to_vec(), dx).unwrap());
                }
                if let Some(dk) = dk {
                    acc(grads, k, Tensor::new(self.shape(k).to_vec(), dk).unwrap());
                }
            }
            Op::Resample(x, geom) => {
                let dx = geom.backward(g.data());
                acc(grads, x, Tensor::new(self.shape(x).to_vec(), dx).unwrap());
            }
        }
    }
}
