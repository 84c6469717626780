//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] records every value produced during a forward pass together with
//! the operation that produced it. [`Tape::backward`] walks the records in
//! reverse, propagating adjoints and accumulating parameter gradients into a
//! [`ParamStore`]. Losses used by the pipeline are recorded as fused nodes with
//! closed-form adjoints.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{check_rate, dropout_mask, matmul_into, Tensor};

/// Trainable tensor with its gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; re-inserting an existing name replaces its value.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.params[i] = Parameter::new(value);
            return ParamId(i);
        }
        let i = self.params.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.params.push(Parameter::new(value));
        ParamId(i)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    /// Ids of every parameter whose name starts with one of `prefixes`.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| prefixes.iter().any(|p| self.name(id).starts_with(p)))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Mask(Var, Vec<f64>),
    Reshape(Var),
    GatherRows(Vec<(Var, usize)>),
    L1Mean {
        pred: Var,
        target: Tensor,
    },
    WeightedBce {
        pred: Var,
        target: Tensor,
        weights: Vec<f64>,
        delta: f64,
    },
    WeightedDice {
        pred: Var,
        target: Tensor,
        weights: Vec<f64>,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Forward trace of one computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a (m×n) + bias (1×n)` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.shape().len() != 2 || bv.shape() != [1, av.cols()] {
            return Err(shape_err("add_row_bias", av, bv));
        }
        let cols = av.cols();
        let mut out = av.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += bv.data()[i % cols];
        }
        Ok(self.push(out, Op::AddRowBias(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))
            .map_err(|_| shape_err("add", self.value(a), self.value(b)))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scale(factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).sigmoid();
        self.push(out, Op::Sigmoid(a))
    }

    /// Inverted dropout; identity (and no node) when `train` is false or the
    /// rate is zero.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, rng: &mut SeededRng) -> Result<Var> {
        check_rate(rate)?;
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let mask = dropout_mask(self.value(a).len(), rate, rng)?;
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mask(a, mask)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Matrix whose i-th row is row `parts[i].1` of `parts[i].0`.
    pub fn gather_rows(&mut self, parts: &[(Var, usize)]) -> Result<Var> {
        let Some(&(first, _)) = parts.first() else {
            return Err(Error::Param("gather_rows needs at least one row".into()));
        };
        let width = self.value(first).cols();
        let mut data = Vec::with_capacity(parts.len() * width);
        for &(v, row) in parts {
            let t = self.value(v);
            if t.shape().len() != 2 || t.cols() != width || row >= t.rows() {
                return Err(shape_err("gather_rows", self.value(first), t));
            }
            data.extend_from_slice(t.row(row));
        }
        let out = Tensor::new(vec![parts.len(), width], data)?;
        Ok(self.push(out, Op::GatherRows(parts.to_vec())))
    }

    /// Mean absolute difference between `pred` and a constant target.
    pub fn l1_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err("l1_mean", p, target));
        }
        let n = p.len() as f64;
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (b - a).abs())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1Mean {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Row-averaged, class-weighted binary cross-entropy on probabilities
    /// `pred` (rows = samples, columns = classes), clamped into
    /// `[delta, 1 - delta]`.
    pub fn weighted_bce(&mut self, pred: Var, target: &Tensor, weights: &[f64], delta: f64) -> Result<Var> {
        let p = self.value(pred);
        check_loss_shapes("weighted_bce", p, target, weights)?;
        let loss = bce_value(p, target, weights, delta);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
                delta,
            },
        ))
    }

    /// Row-averaged, class-weighted soft Dice loss on probabilities `pred`.
    pub fn weighted_dice(&mut self, pred: Var, target: &Tensor, weights: &[f64], eps: f64) -> Result<Var> {
        let p = self.value(pred);
        check_loss_shapes("weighted_dice", p, target, weights)?;
        let loss = dice_value(p, target, weights, eps);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedDice {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
                eps,
            },
        ))
    }

    /// Propagates adjoints from the scalar `loss` and accumulates parameter
    /// gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Param(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.get_mut(*id).grad.add_assign(&g)?,
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bv.transpose()?.data(), &mut da, m, n, k);
                    let mut db = vec![0.0; k * n];
                    matmul_into(av.transpose()?.data(), g.data(), &mut db, k, m, n);
                    accumulate(&mut grads, *a, Tensor::new(vec![m, k], da)?)?;
                    accumulate(&mut grads, *b, Tensor::new(vec![k, n], db)?)?;
                }
                Op::AddRowBias(a, bias) => {
                    let cols = g.cols();
                    let mut db = vec![0.0; cols];
                    for (i, v) in g.data().iter().enumerate() {
                        db[i % cols] += v;
                    }
                    accumulate(&mut grads, *bias, Tensor::new(vec![1, cols], db)?)?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Scale(a, factor) => accumulate(&mut grads, *a, g.scale(*factor))?,
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), data)?)?;
                }
                Op::Sigmoid(a) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, s)| gv * s * (1.0 - s))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), data)?)?;
                }
                Op::Mask(a, mask) => {
                    let data = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    accumulate(&mut grads, *a, Tensor::new(g.shape().to_vec(), data)?)?;
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::new(shape, g.into_data())?)?;
                }
                Op::GatherRows(parts) => {
                    for (i, &(v, row)) in parts.iter().enumerate() {
                        let src = self.value(v);
                        let mut d = Tensor::zeros(src.shape());
                        let cols = src.cols();
                        d.data_mut()[row * cols..(row + 1) * cols].copy_from_slice(g.row(i));
                        accumulate(&mut grads, v, d)?;
                    }
                }
                Op::L1Mean { pred, target } => {
                    let p = self.value(*pred);
                    let scale = g.value() / p.len() as f64;
                    let data = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| {
                            let diff = a - b;
                            if diff > 0.0 {
                                scale
                            } else if diff < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *pred, Tensor::new(p.shape().to_vec(), data)?)?;
                }
                Op::WeightedBce {
                    pred,
                    target,
                    weights,
                    delta,
                } => {
                    let p = self.value(*pred);
                    let (rows, cols) = (p.rows() as f64, p.cols());
                    let data = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .enumerate()
                        .map(|(i, (&pv, &y))| {
                            if pv <= *delta || pv >= 1.0 - delta {
                                return 0.0;
                            }
                            let w = weights[i % cols];
                            -g.value() * w / (cols as f64 * rows) * (y / pv - (1.0 - y) / (1.0 - pv))
                        })
                        .collect();
                    accumulate(&mut grads, *pred, Tensor::new(p.shape().to_vec(), data)?)?;
                }
                Op::WeightedDice {
                    pred,
                    target,
                    weights,
                    eps,
                } => {
                    let p = self.value(*pred);
                    let (rows, cols) = (p.rows() as f64, p.cols());
                    let data = p
                        .data()
                        .iter()
                        .zip(target.data())
                        .enumerate()
                        .map(|(i, (&pv, &y))| {
                            let w = weights[i % cols];
                            let num = 2.0 * y * pv + eps;
                            let den = y * y + pv * pv + eps;
                            let d_ratio = (2.0 * y * den - num * 2.0 * pv) / (den * den);
                            -g.value() * w / (cols as f64 * rows) * d_ratio
                        })
                        .collect();
                    accumulate(&mut grads, *pred, Tensor::new(p.shape().to_vec(), data)?)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn check_loss_shapes(op: &'static str, p: &Tensor, target: &Tensor, weights: &[f64]) -> Result<()> {
    if p.shape().len() != 2 || p.shape() != target.shape() {
        return Err(shape_err(op, p, target));
    }
    if weights.len() != p.cols() {
        return Err(Error::Shape {
            op,
            lhs: p.shape().to_vec(),
            rhs: vec![weights.len()],
        });
    }
    Ok(())
}

pub(crate) fn bce_value(p: &Tensor, target: &Tensor, weights: &[f64], delta: f64) -> f64 {
    let cols = p.cols();
    let total: f64 = p
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .map(|(i, (&pv, &y))| {
            let q = pv.clamp(delta, 1.0 - delta);
            weights[i % cols] * (y * q.ln() + (1.0 - y) * (1.0 - q).ln())
        })
        .sum();
    -total / (cols as f64 * p.rows() as f64)
}

pub(crate) fn dice_value(p: &Tensor, target: &Tensor, weights: &[f64], eps: f64) -> f64 {
    let cols = p.cols();
    let total: f64 = p
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .map(|(i, (&pv, &y))| weights[i % cols] * (1.0 - (2.0 * y * pv + eps) / (y * y + pv * pv + eps)))
        .sum();
    total / (cols as f64 * p.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(build: impl Fn(&mut Tape, Var) -> Var, x: f64) -> f64 {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(x));
        let mut tape = Tape::new();
        let v = tape.param(&store, id);
        let out = build(&mut tape, v);
        tape.backward(out, &mut store).unwrap();
        store.get(id).grad.value()
    }

    #[test]
    fn relu_gradient_convention() {
        let relu = |t: &mut Tape, v: Var| t.relu(v);
        assert_eq!(scalar_grad(relu, 2.0), 1.0);
        assert_eq!(scalar_grad(relu, -1.0), 0.0);
        assert_eq!(scalar_grad(relu, 0.0), 0.0);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        assert_eq!(scalar_grad(|t, v| t.sigmoid(v), 0.0), 0.25);
    }

    #[test]
    fn matmul_gradients_match_hand_rule() {
        // loss = sum(A·B) ⇒ dA = 1·Bᵀ, dB = Aᵀ·1
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = store.insert("b", Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&store, a), tape.param(&store, b));
        let prod = tape.matmul(va, vb).unwrap();
        let ones = tape.input(Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap());
        let total = tape.matmul(ones, prod).unwrap();
        tape.backward(total, &mut store).unwrap();
        assert_eq!(store.get(a).grad.data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(store.get(b).grad.data(), &[4.0, 6.0]);
    }

    #[test]
    fn shared_use_accumulates() {
        // x used twice: d(x + x)/dx = 2
        assert_eq!(scalar_grad(|t, v| t.add(v, v).unwrap(), 3.0), 2.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let v = tape.input(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(v, &mut store).is_err());
    }

    #[test]
    fn gather_rows_routes_gradient() {
        let mut store = ParamStore::new();
        let id = store.insert("m", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let mut tape = Tape::new();
        let m = tape.param(&store, id);
        let g = tape.gather_rows(&[(m, 1), (m, 1)]).unwrap();
        assert_eq!(tape.value(g).data(), &[3.0, 4.0, 3.0, 4.0]);
        let target = Tensor::zeros(&[2, 2]);
        let loss = tape.l1_mean(g, &target).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[0.0, 0.0, 0.5, 0.5]);
    }
}
