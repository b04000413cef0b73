use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    Conv3d { input: usize, kernel: usize, stride: usize, padding: usize },
    Dense { input: usize, weights: usize, bias: usize },
    Relu(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    AddN(Vec<usize>),
    GlobalAvgPool(usize),
    Distance(usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Linear record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A tape belongs to a single thread; build a fresh one per forward/backward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of parameter leaves registered so far.
    pub fn param_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Param)).count()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    /// Registers a differentiable leaf. [`Tape::backward`] reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Param, value)
    }

    /// Registers a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "var from a different tape");
        &self.nodes[v.index].value
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (i, k) = (self.idx(input)?, self.idx(kernel)?);
        let out = kernels::conv3d(&self.nodes[i].value, &self.nodes[k].value, stride, padding)?;
        Ok(self.push(Op::Conv3d { input: i, kernel: k, stride, padding }, out))
    }

    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let (i, w, b) = (self.idx(input)?, self.idx(weights)?, self.idx(bias)?);
        let out =
            kernels::dense(&self.nodes[i].value, &self.nodes[w].value, &self.nodes[b].value)?;
        Ok(self.push(Op::Dense { input: i, weights: w, bias: b }, out))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let out = self.nodes[i].value.map(|v| v.max(0.0));
        Ok(self.push(Op::Relu(i), out))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok((ia, ib))
    }

    fn zip(&self, a: usize, b: usize, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::checked(op, ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "add")?;
        let out = self.zip(ia, ib, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(ia, ib), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "sub")?;
        let out = self.zip(ia, ib, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(ia, ib), out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "mul")?;
        let out = self.zip(ia, ib, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(ia, ib), out))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.idx(x)?;
        let t = &self.nodes[i].value;
        let out = Tensor::checked("scale", t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        Ok(self.push(Op::Scale(i, c), out))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let i = self.idx(x)?;
        let t = &self.nodes[i].value;
        let out =
            Tensor::checked("add_scalar", t.shape().to_vec(), t.data().iter().map(|v| v + c).collect())?;
        Ok(self.push(Op::AddScalar(i), out))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let s: f64 = self.nodes[i].value.data().iter().sum();
        let out = Tensor::checked("sum", Vec::new(), vec![s])?;
        Ok(self.push(Op::Sum(i), out))
    }

    /// Sum of equally shaped values, accumulated left to right.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::shape("add_n", "no operands"));
        };
        let idx = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let shape = self.nodes[self.idx(first)?].value.shape().to_vec();
        let mut acc = vec![0.0; self.nodes[idx[0]].value.len()];
        for &i in &idx {
            let t = &self.nodes[i].value;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("add_n", format!("{shape:?} vs {:?}", t.shape())));
            }
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        let out = Tensor::checked("add_n", shape, acc)?;
        Ok(self.push(Op::AddN(idx), out))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let out = kernels::global_avg_pool(&self.nodes[i].value)?;
        Ok(self.push(Op::GlobalAvgPool(i), out))
    }

    /// Euclidean distance between two equally shaped values, as a scalar.
    pub fn euclidean_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary(a, b, "euclidean_distance")?;
        let d = kernels::euclidean_distance(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(Op::Distance(ia, ib), Tensor::scalar(d)))
    }

    /// Reverse sweep from a scalar `loss`. Every parameter leaf gets an entry in the
    /// result, zero when it does not reach the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.idx(loss)?;
        if !self.nodes[root].value.is_scalar() {
            return Err(Error::NotScalar { shape: self.nodes[root].value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::filled(self.nodes[root].value.shape(), 1.0));

        for n in (0..=root).rev() {
            let Some(g) = grads[n].take() else { continue };
            let node = &self.nodes[n];
            match &node.op {
                Op::Param | Op::Constant => {
                    grads[n] = Some(g);
                    continue;
                }
                Op::Conv3d { input, kernel, stride, padding } => {
                    let (gi, gk) = kernels::conv3d_backward(
                        &self.nodes[*input].value,
                        &self.nodes[*kernel].value,
                        *stride,
                        *padding,
                        &g,
                    )?;
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernel, gk);
                }
                Op::Dense { input, weights, bias } => {
                    let (gx, gw, gb) = kernels::dense_backward(
                        &self.nodes[*input].value,
                        &self.nodes[*weights].value,
                        &self.nodes[*bias].value,
                        &g,
                    )?;
                    accumulate(&mut grads, *input, gx);
                    accumulate(&mut grads, *weights, gw);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Relu(x) => {
                    let xs = self.nodes[*x].value.data();
                    let data = g.data().iter().zip(xs).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, Tensor::checked("relu_backward", g.shape().to_vec(), data)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                    let gb = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, Tensor::checked("mul_backward", g.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::checked("mul_backward", g.shape().to_vec(), gb)?);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::AddScalar(x) => accumulate(&mut grads, *x, g),
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::filled(self.nodes[*x].value.shape(), gv));
                }
                Op::AddN(xs) => {
                    for &x in xs {
                        accumulate(&mut grads, x, g.clone());
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let input = &self.nodes[*x].value;
                    let per = input.len() / input.shape()[0];
                    let scale = 1.0 / per as f64;
                    let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv * scale, per)).collect();
                    accumulate(&mut grads, *x, Tensor::checked("gap_backward", input.shape().to_vec(), data)?);
                }
                Op::Distance(a, b) => {
                    let d = node.value.data()[0];
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let gv = g.data()[0];
                    let ga: Vec<f64> = if d > 0.0 {
                        va.data().iter().zip(vb.data()).map(|(x, y)| gv * (x - y) / d).collect()
                    } else {
                        vec![0.0; va.len()]
                    };
                    let gb = ga.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *a, Tensor::checked("distance_backward", va.shape().to_vec(), ga)?);
                    accumulate(&mut grads, *b, Tensor::checked("distance_backward", vb.shape().to_vec(), gb)?);
                }
            }
        }

        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                out.push((i, g));
            }
        }
        Ok(Gradients { tape: self.id, grads: out })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a scalar loss with respect to the parameter leaves of one tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<(usize, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.binary_search_by_key(&v.index, |(i, _)| *i).ok().map(|k| &self.grads[k].1)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_subgradient() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![-1.0, 2.0]));
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![0.0]));
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(vec![0.5, -2.0, 7.0]));
        let s = t.sum(p).unwrap();
        assert_eq!(t.backward(s).unwrap().get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn distance_gradient_is_unit_vector() {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(vec![3.0, 4.0]));
        let z = t.constant(Tensor::zeros(&[2]));
        let d = t.euclidean_distance(p, z).unwrap();
        assert_eq!(t.value(d).item().unwrap(), 5.0);
        let g = t.backward(d).unwrap();
        let gp = g.get(p).unwrap().data();
        assert!((gp[0] - 0.6).abs() < 1e-15 && (gp[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn distance_at_coincident_points() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0, -1.0]));
        let b = t.param(Tensor::vector(vec![1.0, -1.0]));
        let d = t.euclidean_distance(a, b).unwrap();
        assert_eq!(t.value(d).item().unwrap(), 0.0);
        let g = t.backward(d).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(g.get(b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn unreached_param_gets_zero_gradient() {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(vec![1.0, 2.0]));
        let q = t.param(Tensor::zeros(&[2, 2]));
        let s = t.sum(p).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(q).unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.backward(p), Err(Error::NotScalar { .. })));

        let mut other = Tape::new();
        let q = other.param(Tensor::scalar(1.0));
        assert!(matches!(t.backward(q), Err(Error::ForeignVar)));
    }

    #[test]
    fn shared_value_accumulates() {
        // d/dx of sum(x + x) = 2
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1.0, 2.0]));
        let y = t.add(x, x).unwrap();
        let s = t.sum(y).unwrap();
        assert_eq!(t.backward(s).unwrap().get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn overflow_is_a_numeric_error() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(vec![1e300]));
        assert!(matches!(t.scale(x, 1e300), Err(Error::NonFinite { .. })));
    }
}
