use std::fmt;
use std::str::FromStr;

use super::special::{digamma, lgamma, trigamma};
use super::tensor::{broadcast_index_map, broadcast_shape, Tensor};
use super::DiffError;

/// The differentiable operations the reward model is built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Primitive {
    /// Rank-2 matrix product `[m,k] x [k,n] -> [m,n]`.
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Softplus,
    Lgamma,
    Digamma,
    /// Sum of all elements to a scalar.
    Sum,
    /// Mean of all elements to a scalar.
    Mean,
    BroadcastTo(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Neg => "neg",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Relu => "relu",
            Primitive::Softplus => "softplus",
            Primitive::Lgamma => "lgamma",
            Primitive::Digamma => "digamma",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::BroadcastTo(_) => "broadcast",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = DiffError;

    /// Parses the parameter-free primitives by name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "matmul" => Primitive::MatMul,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "mul" => Primitive::Mul,
            "div" => Primitive::Div,
            "neg" => Primitive::Neg,
            "exp" => Primitive::Exp,
            "log" => Primitive::Log,
            "sigmoid" => Primitive::Sigmoid,
            "relu" => Primitive::Relu,
            "softplus" => Primitive::Softplus,
            "lgamma" => Primitive::Lgamma,
            "digamma" => Primitive::Digamma,
            "sum" => Primitive::Sum,
            "mean" => Primitive::Mean,
            other => return Err(DiffError::UnknownPrimitive(other.to_string())),
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn map_unary(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
}

fn map_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, DiffError> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let shape = broadcast_shape(a.shape(), b.shape())?;
    let ia = broadcast_index_map(a.shape(), &shape);
    let ib = broadcast_index_map(b.shape(), &shape);
    let (da, db) = (a.data(), b.data());
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
    Ok(Tensor::from_parts(shape, data))
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, DiffError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(DiffError::ShapeMismatch(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    let (da, db) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = da[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &db[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let d = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = d[i * n + j];
        }
    }
    Tensor::from_parts(vec![n, m], out)
}

fn require_positive(op: &'static str, a: &Tensor) -> Result<(), DiffError> {
    match a.data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
        Some(v) => Err(DiffError::Domain {
            op,
            detail: format!("argument {v} is not strictly positive"),
        }),
        None => Ok(()),
    }
}

/// Evaluates one primitive on concrete tensors, without recording anything.
pub fn apply_primitive(prim: &Primitive, inputs: &[&Tensor]) -> Result<Tensor, DiffError> {
    if inputs.len() != prim.arity() {
        return Err(DiffError::Arity {
            op: prim.name(),
            expected: prim.arity(),
            got: inputs.len(),
        });
    }
    let a = inputs[0];
    let out = match prim {
        Primitive::MatMul => matmul(a, inputs[1])?,
        Primitive::Add => map_binary(a, inputs[1], |x, y| x + y)?,
        Primitive::Sub => map_binary(a, inputs[1], |x, y| x - y)?,
        Primitive::Mul => map_binary(a, inputs[1], |x, y| x * y)?,
        Primitive::Div => {
            if inputs[1].data().contains(&0.0) {
                return Err(DiffError::Domain {
                    op: "div",
                    detail: "division by zero".into(),
                });
            }
            map_binary(a, inputs[1], |x, y| x / y)?
        }
        Primitive::Neg => map_unary(a, |x| -x),
        Primitive::Exp => map_unary(a, f64::exp),
        Primitive::Log => {
            require_positive("log", a)?;
            map_unary(a, f64::ln)
        }
        Primitive::Sigmoid => map_unary(a, sigmoid),
        Primitive::Relu => map_unary(a, |x| if x > 0.0 { x } else { 0.0 }),
        Primitive::Softplus => map_unary(a, softplus),
        Primitive::Lgamma => {
            require_positive("lgamma", a)?;
            map_unary(a, lgamma)
        }
        Primitive::Digamma => {
            require_positive("digamma", a)?;
            map_unary(a, digamma)
        }
        Primitive::Sum => Tensor::scalar(a.data().iter().fold(0.0, |s, &v| s + v)),
        Primitive::Mean => {
            if a.numel() == 0 {
                return Err(DiffError::ShapeMismatch("mean of empty tensor".into()));
            }
            Tensor::scalar(a.data().iter().fold(0.0, |s, &v| s + v) / a.numel() as f64)
        }
        Primitive::BroadcastTo(shape) => {
            if broadcast_shape(a.shape(), shape)? != *shape {
                return Err(DiffError::ShapeMismatch(format!(
                    "cannot broadcast {:?} to {:?}",
                    a.shape(),
                    shape
                )));
            }
            let map = broadcast_index_map(a.shape(), shape);
            Tensor::from_parts(shape.clone(), map.iter().map(|&i| a.data()[i]).collect())
        }
    };
    if !out.is_finite() {
        return Err(DiffError::NonFinite(prim.name()));
    }
    Ok(out)
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<(Primitive, Vec<NodeId>)>,
    tracked: bool,
}

/// Tape of one forward pass. Rebuilt for every evaluation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    /// Every relu input on the tape, in tape order.
    pub fn relu_inputs(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Some((Primitive::Relu, inputs)) = &node.op {
                out.extend_from_slice(self.nodes[inputs[0].0].value.data());
            }
        }
        out
    }

    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Option<(Primitive, Vec<NodeId>)>, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let value = value.with_requires_grad(true);
        self.push(value, None, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let value = value.with_requires_grad(false);
        self.push(value, None, false)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf carrying whatever `requires_grad` flag the tensor has.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let tracked = value.requires_grad();
        self.push(value, None, tracked)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    pub fn apply(&mut self, prim: Primitive, inputs: &[NodeId]) -> Result<NodeId, DiffError> {
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            apply_primitive(&prim, &vals)?
        };
        let tracked = inputs.iter().any(|id| self.nodes[id.0].tracked);
        let value = value.with_requires_grad(tracked);
        // untracked results are plain constants; no need to keep the edge
        let op = tracked.then(|| (prim, inputs.to_vec()));
        Ok(self.push(value, op, tracked))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Div, &[a, b])
    }
    pub fn neg(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Neg, &[a])
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Softplus, &[a])
    }
    pub fn lgamma(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Lgamma, &[a])
    }
    pub fn digamma(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Digamma, &[a])
    }
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Sum, &[a])
    }
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.apply(Primitive::Mean, &[a])
    }
    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        self.apply(Primitive::BroadcastTo(shape.to_vec()), &[a])
    }

    /// `a + c` for a constant scalar `c`.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let c = self.scalar(c);
        self.add(a, c)
    }

    /// `a * c` for a constant scalar `c`.
    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId, DiffError> {
        let c = self.scalar(c);
        self.mul(a, c)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients, DiffError> {
        let out = &self.nodes[output.0];
        if out.value.numel() != 1 {
            return Err(DiffError::NotScalar(out.value.shape().to_vec()));
        }
        if !out.tracked {
            return Err(DiffError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some((prim, inputs)) = &node.op {
                self.propagate(prim, inputs, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes[..=output.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect::<Vec<_>>();
        let grads = grads
            .into_iter()
            .zip(shapes)
            .map(|(g, s)| g.map(|d| Tensor::from_parts(s, d)))
            .collect();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
        if !self.nodes[id.0].tracked {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Sum a gradient of shape `out_shape` back down to a broadcast source.
    fn reduce_to(src_shape: &[usize], out_shape: &[usize], g: &[f64]) -> Vec<f64> {
        if src_shape == out_shape {
            return g.to_vec();
        }
        let n: usize = src_shape.iter().product();
        let mut acc = vec![0.0; n];
        for (gi, &si) in g.iter().zip(&broadcast_index_map(src_shape, out_shape)) {
            acc[si] += gi;
        }
        acc
    }

    fn propagate(
        &self,
        prim: &Primitive,
        inputs: &[NodeId],
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let a = &self.nodes[inputs[0].0].value;
        let out_shape = out.shape();
        let unary = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..g.len()).map(f).collect() };
        match prim {
            Primitive::MatMul => {
                let b = &self.nodes[inputs[1].0].value;
                let gt = Tensor::from_parts(out_shape.to_vec(), g.to_vec());
                if self.nodes[inputs[0].0].tracked {
                    let ga = matmul(&gt, &transpose(b)).expect("shapes checked in forward");
                    self.accumulate(grads, inputs[0], ga.into_data());
                }
                if self.nodes[inputs[1].0].tracked {
                    let gb = matmul(&transpose(a), &gt).expect("shapes checked in forward");
                    self.accumulate(grads, inputs[1], gb.into_data());
                }
            }
            Primitive::Add | Primitive::Sub => {
                let b = &self.nodes[inputs[1].0].value;
                let ga = Self::reduce_to(a.shape(), out_shape, g);
                self.accumulate(grads, inputs[0], ga);
                let mut gb = Self::reduce_to(b.shape(), out_shape, g);
                if *prim == Primitive::Sub {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                self.accumulate(grads, inputs[1], gb);
            }
            Primitive::Mul | Primitive::Div => {
                let b = &self.nodes[inputs[1].0].value;
                let ia = broadcast_index_map(a.shape(), out_shape);
                let ib = broadcast_index_map(b.shape(), out_shape);
                let (da, db) = (a.data(), b.data());
                if self.nodes[inputs[0].0].tracked {
                    let full: Vec<f64> = if *prim == Primitive::Mul {
                        g.iter().zip(&ib).map(|(gv, &j)| gv * db[j]).collect()
                    } else {
                        g.iter().zip(&ib).map(|(gv, &j)| gv / db[j]).collect()
                    };
                    self.accumulate(grads, inputs[0], Self::reduce_to(a.shape(), out_shape, &full));
                }
                if self.nodes[inputs[1].0].tracked {
                    let full: Vec<f64> = if *prim == Primitive::Mul {
                        g.iter().zip(&ia).map(|(gv, &i)| gv * da[i]).collect()
                    } else {
                        g.iter()
                            .zip(ia.iter().zip(&ib))
                            .map(|(gv, (&i, &j))| -gv * da[i] / (db[j] * db[j]))
                            .collect()
                    };
                    self.accumulate(grads, inputs[1], Self::reduce_to(b.shape(), out_shape, &full));
                }
            }
            Primitive::Neg => self.accumulate(grads, inputs[0], unary(&|i| -g[i])),
            Primitive::Exp => self.accumulate(grads, inputs[0], unary(&|i| g[i] * out.data()[i])),
            Primitive::Log => self.accumulate(grads, inputs[0], unary(&|i| g[i] / a.data()[i])),
            Primitive::Sigmoid => {
                let s = out.data();
                self.accumulate(grads, inputs[0], unary(&|i| g[i] * s[i] * (1.0 - s[i])))
            }
            Primitive::Relu => self.accumulate(
                grads,
                inputs[0],
                unary(&|i| if a.data()[i] > 0.0 { g[i] } else { 0.0 }),
            ),
            Primitive::Softplus => {
                self.accumulate(grads, inputs[0], unary(&|i| g[i] * sigmoid(a.data()[i])))
            }
            Primitive::Lgamma => {
                self.accumulate(grads, inputs[0], unary(&|i| g[i] * digamma(a.data()[i])))
            }
            Primitive::Digamma => {
                self.accumulate(grads, inputs[0], unary(&|i| g[i] * trigamma(a.data()[i])))
            }
            Primitive::Sum => self.accumulate(grads, inputs[0], vec![g[0]; a.numel()]),
            Primitive::Mean => {
                let n = a.numel() as f64;
                self.accumulate(grads, inputs[0], vec![g[0] / n; a.numel()])
            }
            Primitive::BroadcastTo(_) => {
                self.accumulate(grads, inputs[0], Self::reduce_to(a.shape(), out_shape, g))
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `id`; zeros when `id` is not upstream of the output.
    pub fn get(&self, id: NodeId) -> Tensor {
        match self.grads.get(id.0) {
            Some(Some(t)) => t.clone(),
            _ => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}
