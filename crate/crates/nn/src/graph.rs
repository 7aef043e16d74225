//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Each
//! parameter enters the tape at most once per graph, so a tensor reused by
//! several sub-networks accumulates its gradient from every use.

use std::collections::HashMap;

use crate::conv::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{matmul, MatRef, Scalar};
use crate::tensor::Tensor;
use crate::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    ConvT { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, T),
    LeakyRelu(usize, T),
    Sigmoid(usize),
    Tanh(usize),
    GlobalAvgPool(usize),
    /// Input node and the flat index of each channel's maximum.
    GlobalMaxPool(usize, Vec<usize>),
    Linear { x: usize, w: usize, b: usize },
    MeanAbsDiff(usize, usize),
    MeanSquare(usize),
    Mean(usize),
    BceLogits { logits: usize, targets: Vec<T>, weights: Vec<T> },
    SumScalars(Vec<usize>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, usize>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a leaf variable (input or parameter).
    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|g| g.all_finite())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf holding a copy of `v`'s value; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&idx) = self.params.get(&id) {
            return Var(idx);
        }
        let v = self.push(self.store.get(id).clone(), Op::Param);
        self.params.insert(id, v.0);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: ParamId, b: Option<ParamId>, geom: ConvGeom) -> Result<Var, NnError> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let out = conv::conv2d(self.value(x), self.value(wv), bv.map(|b| self.value(b)), geom)?;
        Ok(self.push(out, Op::Conv { x: x.0, w: wv.0, b: bv.map(|b| b.0), geom }))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
        geom: ConvGeom,
    ) -> Result<Var, NnError> {
        let wv = self.param(w);
        let bv = b.map(|b| self.param(b));
        let out = conv::conv_transpose2d(self.value(x), self.value(wv), bv.map(|b| self.value(b)), geom, 0)?;
        Ok(self.push(out, Op::ConvT { x: x.0, w: wv.0, b: bv.map(|b| b.0), geom }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NnError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::Shape(format!(
                "{}: {:?} vs {:?}",
                what,
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a.0, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let out = self.value(a).map(|v| if v > T::zero() { v } else { v * s });
        self.push(out, Op::LeakyRelu(a.0, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.tanh());
        self.push(out, Op::Tanh(a.0))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var, NnError> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let hw = h * w;
        let inv = T::lit(1.0 / hw as f64);
        let data = self.value(a).data().chunks(hw).map(|ch| ch.iter().fold(T::zero(), |s, &v| s + v) * inv).collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push(out, Op::GlobalAvgPool(a.0)))
    }

    /// `[N, C, H, W] -> [N, C]`; the gradient flows to the first maximum.
    pub fn global_max_pool(&mut self, a: Var) -> Result<Var, NnError> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let hw = h * w;
        let mut arg = Vec::with_capacity(n * c);
        let mut data = Vec::with_capacity(n * c);
        for (k, ch) in self.value(a).data().chunks(hw).enumerate() {
            let (i, &m) = ch.iter().enumerate().fold((0, &ch[0]), |best, (i, v)| if *v > *best.1 { (i, v) } else { best });
            arg.push(k * hw + i);
            data.push(m);
        }
        let out = Tensor::from_vec(&[n, c], data)?;
        Ok(self.push(out, Op::GlobalMaxPool(a.0, arg)))
    }

    /// `x: [N, K]`, `w: [M, K]`, `b: [M]` -> `[N, M]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var, NnError> {
        let wv = self.param(w);
        let bv = self.param(b);
        let (n, k) = match self.value(x).shape() {
            &[n, k] => (n, k),
            s => return Err(NnError::Shape(format!("linear input must be rank 2, got {:?}", s))),
        };
        let m = match self.value(wv).shape() {
            &[m, wk] if wk == k => m,
            s => return Err(NnError::Shape(format!("linear weight {:?} vs input width {}", s, k))),
        };
        let mut out = Tensor::zeros(&[n, m]);
        matmul(
            MatRef::row_major(self.value(x).data(), n, k),
            MatRef::transposed(self.value(wv).data(), m, k),
            out.data_mut(),
            false,
        );
        let bias = self.value(bv).data().to_vec();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &bb) in row.iter_mut().zip(&bias) {
                *o = *o + bb;
            }
        }
        Ok(self.push(out, Op::Linear { x: x.0, w: wv.0, b: bv.0 }))
    }

    /// Scalar `mean(|a - b|)`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.same_shape(a, b, "mean_abs_diff")?;
        let n = self.value(a).len();
        let s: f64 = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| (x - y).abs().as_f64()).sum();
        Ok(self.push(Tensor::scalar(T::lit(s / n as f64)), Op::MeanAbsDiff(a.0, b.0)))
    }

    /// Scalar `mean(a^2)`.
    pub fn mean_square(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s: f64 = self.value(a).data().iter().map(|&x| (x * x).as_f64()).sum();
        self.push(Tensor::scalar(T::lit(s / n as f64)), Op::MeanSquare(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s: f64 = self.value(a).data().iter().map(|&x| x.as_f64()).sum();
        self.push(Tensor::scalar(T::lit(s / n as f64)), Op::Mean(a.0))
    }

    /// Scalar `sum_i w_i * BCE(sigmoid(l_i), t_i) / n`, computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<T>, weights: Vec<T>) -> Result<Var, NnError> {
        let n = self.value(logits).len();
        if targets.len() != n || weights.len() != n {
            return Err(NnError::Shape(format!(
                "bce: {} logits, {} targets, {} weights",
                n,
                targets.len(),
                weights.len()
            )));
        }
        let s: f64 = self
            .value(logits)
            .data()
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((&l, &t), &w)| (w * (softplus(l) - t * l)).as_f64())
            .sum();
        Ok(self.push(Tensor::scalar(T::lit(s / n as f64)), Op::BceLogits { logits: logits.0, targets, weights }))
    }

    /// Same target and unit weight for every element.
    pub fn bce_with_logits_const(&mut self, logits: Var, target: f64) -> Result<Var, NnError> {
        let n = self.value(logits).len();
        self.bce_with_logits(logits, vec![T::lit(target); n], vec![T::one(); n])
    }

    pub fn sum_scalars(&mut self, terms: &[Var]) -> Var {
        let s = terms.iter().fold(T::zero(), |acc, v| acc + self.value(*v).item());
        self.push(Tensor::scalar(s), Op::SumScalars(terms.iter().map(|v| v.0).collect()))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |i: usize| &self.nodes[i].value;
            match &node.op {
                Op::Input | Op::Param => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = conv::conv2d_backward(val(*x), val(*w), *geom, &dy)?;
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*w], dw);
                    if let Some(b) = b {
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::ConvT { x, w, b, geom } => {
                    let (dx, dw, db) = conv::conv_transpose2d_backward(val(*x), val(*w), *geom, &dy)?;
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*w], dw);
                    if let Some(b) = b {
                        accumulate(&mut grads[*b], db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[*a], dy.clone());
                    accumulate(&mut grads[*b], dy);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[*b], dy.map(|v| -v));
                    accumulate(&mut grads[*a], dy);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads[*a], dy.map(|v| v * c));
                }
                Op::LeakyRelu(a, s) => {
                    let x = val(*a);
                    let data = dy.data().iter().zip(x.data()).map(|(&g, &xv)| if xv > T::zero() { g } else { g * *s }).collect();
                    accumulate(&mut grads[*a], Tensor::from_vec(x.shape(), data)?);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let data = dy.data().iter().zip(y.data()).map(|(&g, &yv)| g * yv * (T::one() - yv)).collect();
                    accumulate(&mut grads[*a], Tensor::from_vec(y.shape(), data)?);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = dy.data().iter().zip(y.data()).map(|(&g, &yv)| g * (T::one() - yv * yv)).collect();
                    accumulate(&mut grads[*a], Tensor::from_vec(y.shape(), data)?);
                }
                Op::GlobalAvgPool(a) => {
                    let x = val(*a);
                    let (_, _, h, w) = x.dims4()?;
                    let inv = T::lit(1.0 / (h * w) as f64);
                    let mut dx = Tensor::zeros(x.shape());
                    for (chunk, &g) in dx.data_mut().chunks_mut(h * w).zip(dy.data()) {
                        chunk.iter_mut().for_each(|v| *v = g * inv);
                    }
                    accumulate(&mut grads[*a], dx);
                }
                Op::GlobalMaxPool(a, arg) => {
                    let mut dx = Tensor::zeros(val(*a).shape());
                    for (&i, &g) in arg.iter().zip(dy.data()) {
                        dx.data_mut()[i] = g;
                    }
                    accumulate(&mut grads[*a], dx);
                }
                Op::Linear { x, w, b } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let (n, k) = (xv.shape()[0], xv.shape()[1]);
                    let m = wv.shape()[0];
                    let mut dx = Tensor::zeros(xv.shape());
                    matmul(MatRef::row_major(dy.data(), n, m), MatRef::row_major(wv.data(), m, k), dx.data_mut(), false);
                    let mut dw = Tensor::zeros(wv.shape());
                    matmul(MatRef::transposed(dy.data(), n, m), MatRef::row_major(xv.data(), n, k), dw.data_mut(), false);
                    let mut db = Tensor::zeros(&[m]);
                    for row in dy.data().chunks(m) {
                        for (d, &g) in db.data_mut().iter_mut().zip(row) {
                            *d = *d + g;
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                    accumulate(&mut grads[*w], dw);
                    accumulate(&mut grads[*b], db);
                }
                Op::MeanAbsDiff(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let g = dy.item() / T::lit(av.len() as f64);
                    let data: Vec<T> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(&x, &y)| {
                            if x > y {
                                g
                            } else if x < y {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    let da = Tensor::from_vec(av.shape(), data)?;
                    accumulate(&mut grads[*b], da.map(|v| -v));
                    accumulate(&mut grads[*a], da);
                }
                Op::MeanSquare(a) => {
                    let av = val(*a);
                    let g = dy.item() * T::lit(2.0 / av.len() as f64);
                    accumulate(&mut grads[*a], av.map(|v| v * g));
                }
                Op::Mean(a) => {
                    let av = val(*a);
                    let g = dy.item() / T::lit(av.len() as f64);
                    accumulate(&mut grads[*a], Tensor::full(av.shape(), g));
                }
                Op::BceLogits { logits, targets, weights } => {
                    let lv = val(*logits);
                    let g = dy.item() / T::lit(lv.len() as f64);
                    let data = lv
                        .data()
                        .iter()
                        .zip(targets)
                        .zip(weights)
                        .map(|((&l, &t), &w)| g * w * (sigmoid(l) - t))
                        .collect();
                    accumulate(&mut grads[*logits], Tensor::from_vec(lv.shape(), data)?);
                }
                Op::SumScalars(terms) => {
                    for &t in terms {
                        accumulate(&mut grads[t], dy.clone());
                    }
                }
            }
        }
        let mut params: Vec<Option<Tensor<T>>> = (0..self.store.len()).map(|_| None).collect();
        for (&id, &node) in &self.params {
            params[id.index()] = grads[node].clone();
        }
        Ok(Gradients { params, nodes: grads })
    }
}
