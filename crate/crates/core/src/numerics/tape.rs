//! Tape-based reverse-mode automatic differentiation over small dense tensors.
//!
//! Every operation appends one node to the tape. Parents always precede
//! children, so a single reverse sweep over the node list propagates adjoints.
//! Parameters are registered by name; [`Tape::backward`] returns a gradient for
//! every registered parameter, zero-filled when the loss does not depend on it.
//! Values entered through [`Tape::constant`] are detached: no gradient is
//! reported for them.

use std::collections::BTreeMap;

use super::tensor::{log_softmax_slice, sigmoid_scalar, softmax_slice, Tensor};
use crate::error::{Error, Result};
use crate::params::{GradMap, ParameterSet};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { w: Var, x: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    SumSq(Var),
    Dot(Var, Var),
    Pick(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    params: GradMap,
}

impl Gradients {
    /// Gradient for every registered parameter.
    pub fn params(&self) -> &GradMap {
        &self.params
    }

    pub fn into_params(self) -> GradMap {
        self.params
    }

    /// Adjoint of an arbitrary node (zeros when the loss does not reach it).
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.adjoints[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Registers a named, differentiable parameter. Registering the same name
    /// twice returns the original handle.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.shape().to_vec(), value.data().to_vec(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Looks up `name` in `set` and registers it.
    pub fn param_from(&mut self, set: &ParameterSet, name: &str) -> Result<Var> {
        let t = set
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
        Ok(self.param(name, t))
    }

    /// A detached input: participates in the forward pass only.
    pub fn constant(&mut self, value: &Tensor) -> Var {
        self.push(value.shape().to_vec(), value.data().to_vec(), Op::Leaf)
    }

    pub fn constant_slice(&mut self, value: &[f64]) -> Var {
        self.push(vec![value.len()], value.to_vec(), Op::Leaf)
    }

    /// Copies the value of `v` into a fresh detached leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf)
    }

    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let (m, n) = match self.nodes[w.0].shape.as_slice() {
            [m, n] => (*m, *n),
            other => return Err(Error::dim("affine", "rank-2 weight", format!("{other:?}"))),
        };
        let xv = &self.nodes[x.0].value;
        if xv.len() != n {
            return Err(Error::dim("affine", n, xv.len()));
        }
        if self.nodes[b.0].value.len() != m {
            return Err(Error::dim("affine", m, self.nodes[b.0].value.len()));
        }
        let wv = &self.nodes[w.0].value;
        let mut out = self.nodes[b.0].value.clone();
        for (i, o) in out.iter_mut().enumerate() {
            let row = &wv[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for (a, c) in row.iter().zip(xv) {
                acc += a * c;
            }
            *o += acc;
        }
        Ok(self.push(vec![m], out, Op::Affine { w, x, b }))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(Error::dim(op, format!("{:?}", na.shape), format!("{:?}", nb.shape)));
        }
        let f: fn(f64, f64) -> f64 = match op {
            "add" => |x, y| x + y,
            "sub" => |x, y| x - y,
            _ => |x, y| x * y,
        };
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        Ok((na.shape.clone(), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add")?;
        Ok(self.push(s, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub")?;
        Ok(self.push(s, v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "mul")?;
        Ok(self.push(s, v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let n = &self.nodes[a.0];
        let (s, v) = (n.shape.clone(), n.value.iter().map(|x| x * c).collect());
        self.push(s, v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let n = &self.nodes[a.0];
        let (s, v) = (n.shape.clone(), n.value.iter().map(|x| x + c).collect());
        self.push(s, v, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = &self.nodes[a.0];
        let (s, v) = (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect());
        self.push(s, v, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Elementwise clamp; the gradient is zero where the input is clamped.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        if n.value.is_empty() {
            return Err(Error::Contract("softmax of an empty tensor".into()));
        }
        let (s, v) = (n.shape.clone(), softmax_slice(&n.value));
        Ok(self.push(s, v, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        if n.value.is_empty() {
            return Err(Error::Contract("log_softmax of an empty tensor".into()));
        }
        let (s, v) = (n.shape.clone(), log_softmax_slice(&n.value));
        Ok(self.push(s, v, Op::LogSoftmax(a)))
    }

    /// Concatenates rank-1 nodes.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        for p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let n = value.len();
        self.push(vec![n], value, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if start + len > src.len() {
            return Err(Error::dim("slice", format!("<= {}", src.len()), start + len));
        }
        let v = src[start..start + len].to_vec();
        Ok(self.push(vec![len], v, Op::Slice(a, start)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().sum();
        self.push(vec![1], vec![v], Op::Sum(a))
    }

    pub fn sum_sq(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.iter().map(|x| x * x).sum();
        self.push(vec![1], vec![v], Op::SumSq(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.value.len() != nb.value.len() {
            return Err(Error::dim("dot", na.value.len(), nb.value.len()));
        }
        let v = na.value.iter().zip(&nb.value).map(|(x, y)| x * y).sum();
        Ok(self.push(vec![1], vec![v], Op::Dot(a, b)))
    }

    /// Selects one element as a scalar node.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        let v = *src
            .get(index)
            .ok_or_else(|| Error::dim("pick", format!("< {}", src.len()), index))?;
        Ok(self.push(vec![1], vec![v], Op::Pick(a, index)))
    }

    /// Sum of scalar nodes weighted by constants.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(c, v) in terms {
            let scaled = self.scale(v, c);
            acc = Some(match acc {
                None => scaled,
                // both operands are scalars, shapes always agree
                Some(a) => self.add(a, scaled).expect("scalar add"),
            });
        }
        acc.unwrap_or_else(|| self.constant_slice(&[0.0]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            adj[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Affine { w, x, b } => {
                    let n = self.nodes[x.0].value.len();
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    {
                        let gw = acc(&mut adj, *w, wv.len());
                        for (r, gi) in g.iter().enumerate() {
                            if *gi != 0.0 {
                                for (dst, xj) in gw[r * n..(r + 1) * n].iter_mut().zip(xv) {
                                    *dst += gi * xj;
                                }
                            }
                        }
                    }
                    {
                        let gx = acc(&mut adj, *x, n);
                        for (r, gi) in g.iter().enumerate() {
                            if *gi != 0.0 {
                                for (dst, wrj) in gx.iter_mut().zip(&wv[r * n..(r + 1) * n]) {
                                    *dst += gi * wrj;
                                }
                            }
                        }
                    }
                    let gb = acc(&mut adj, *b, g.len());
                    for (dst, gi) in gb.iter_mut().zip(&g) {
                        *dst += gi;
                    }
                }
                Op::Add(a, b) => {
                    for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                        let ga = acc(&mut adj, v, g.len());
                        for (dst, gi) in ga.iter_mut().zip(&g) {
                            *dst += sign * gi;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                        let ga = acc(&mut adj, v, g.len());
                        for (dst, gi) in ga.iter_mut().zip(&g) {
                            *dst += sign * gi;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(gi, y)| gi * y).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(gi, x)| gi * x).collect();
                    add_into(acc(&mut adj, *a, ga.len()), &ga);
                    add_into(acc(&mut adj, *b, gb.len()), &gb);
                }
                Op::Scale(a, c) => {
                    let ga = acc(&mut adj, *a, g.len());
                    for (dst, gi) in ga.iter_mut().zip(&g) {
                        *dst += c * gi;
                    }
                }
                Op::AddScalar(a) => add_into(acc(&mut adj, *a, g.len()), &g),
                Op::Tanh(a) => {
                    let local: Vec<f64> =
                        g.iter().zip(&node.value).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                    add_into(acc(&mut adj, *a, g.len()), &local);
                }
                Op::Sigmoid(a) => {
                    let local: Vec<f64> =
                        g.iter().zip(&node.value).map(|(gi, y)| gi * y * (1.0 - y)).collect();
                    add_into(acc(&mut adj, *a, g.len()), &local);
                }
                Op::Relu(a) => {
                    let xv = &self.nodes[a.0].value;
                    let local: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    add_into(acc(&mut adj, *a, g.len()), &local);
                }
                Op::Exp(a) => {
                    let local: Vec<f64> = g.iter().zip(&node.value).map(|(gi, y)| gi * y).collect();
                    add_into(acc(&mut adj, *a, g.len()), &local);
                }
                Op::Clamp(a, lo, hi) => {
                    let xv = &self.nodes[a.0].value;
                    let local: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(gi, x)| if x < lo || x > hi { 0.0 } else { *gi })
                        .collect();
                    add_into(acc(&mut adj, *a, g.len()), &local);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    let local: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| yi * (gi - gy)).collect();
                    add_into(acc(&mut adj, *a, g.len()), &local);
                }
                Op::LogSoftmax(a) => {
                    let gsum: f64 = g.iter().sum();
                    let local: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(gi, ly)| gi - ly.exp() * gsum)
                        .collect();
                    add_into(acc(&mut adj, *a, g.len()), &local);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        add_into(acc(&mut adj, *p, len), &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Slice(a, start) => {
                    let len = self.nodes[a.0].value.len();
                    let ga = acc(&mut adj, *a, len);
                    add_into(&mut ga[*start..*start + g.len()], &g);
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    for dst in acc(&mut adj, *a, len).iter_mut() {
                        *dst += g[0];
                    }
                }
                Op::SumSq(a) => {
                    let xv = &self.nodes[a.0].value;
                    let ga = acc(&mut adj, *a, xv.len());
                    for (dst, x) in ga.iter_mut().zip(xv) {
                        *dst += 2.0 * x * g[0];
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = bv.iter().map(|y| y * g[0]).collect();
                    let gb: Vec<f64> = av.iter().map(|x| x * g[0]).collect();
                    add_into(acc(&mut adj, *a, ga.len()), &ga);
                    add_into(acc(&mut adj, *b, gb.len()), &gb);
                }
                Op::Pick(a, index) => {
                    let len = self.nodes[a.0].value.len();
                    acc(&mut adj, *a, len)[*index] += g[0];
                }
            }
            adj[i] = Some(g);
        }

        let mut params = GradMap::new();
        for (name, v) in &self.params {
            let shape = self.nodes[v.0].shape.clone();
            let t = match adj.get(v.0).and_then(|a| a.as_ref()) {
                Some(g) => Tensor::from_parts(shape, g.clone()),
                None => Tensor::zeros(&shape),
            };
            params.insert(name.clone(), t);
        }
        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            params,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
