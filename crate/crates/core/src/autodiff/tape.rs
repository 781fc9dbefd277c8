//! Eager reverse-mode tape over the fixed operator set.
//!
//! Values are computed as operations are recorded; [`Tape::backward`] then
//! replays adjoints in exact reverse order. Each call to [`Tape::param`]
//! creates a new *instance* of a named parameter. Adjoints of all instances
//! of a name are averaged, which is how weight sharing across unrolled
//! iterations is expressed.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gemm::{gemm, Mat};
use crate::maps::LabelMap;
use crate::ops::{self, ConvGeometry, Padding, UpsampleGeometry};
use crate::tensor::Tensor;

use super::params::ParamStore;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    /// Parameter name and the number of instances the node stands for.
    Param(String, usize),
    Conv2d {
        input: Var,
        kernel: Var,
        geo: ConvGeometry,
        cols: Vec<f32>,
    },
    Upsample {
        input: Var,
        kernel: Var,
        geo: UpsampleGeometry,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Concat(Vec<Var>),
    Select {
        input: Var,
        channel: usize,
    },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        labels: LabelMap,
    },
    SoftmaxCrossEntropy {
        scores: Var,
        probs: Tensor,
        labels: LabelMap,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    /// Full-precision copy of scalar reductions.
    scalar: Option<f64>,
    op: Op,
}

/// Averaged parameter adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
    instances: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    /// How many tape instances contributed to `name`.
    pub fn instances(&self, name: &str) -> usize {
        self.instances.get(name).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        let name = name.into();
        self.instances.insert(name.clone(), 1);
        self.grads.insert(name, grad);
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            scalar: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_scalar(&mut self, value: f64, op: Op) -> Var {
        self.nodes.push(Node {
            value: Tensor::scalar(value as f32),
            scalar: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of `v`, in `f64` when the producing op reduced in `f64`.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a scalar, got {:?}",
                node.value.shape()
            )));
        }
        Ok(node.scalar.unwrap_or(node.value.data()[0] as f64))
    }

    /// Which ReLU outputs are active, over every ReLU node in order. Two
    /// evaluations with equal patterns lie on the same linear piece.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu(_)))
            .flat_map(|n| n.value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Records a fresh instance of the named parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .value(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?
            .clone();
        Ok(self.push(value, Op::Param(name.to_string(), 1)))
    }

    /// Records one node that counts as `instances` instances of the named
    /// parameter, for a value computed once but shared by several unrolled
    /// iterations. Its adjoint is averaged like that of separate instances.
    pub fn param_repeated(&mut self, store: &ParamStore, name: &str, instances: usize) -> Result<Var> {
        if instances == 0 {
            return Err(Error::InvalidArgument(format!("`{name}` needs at least one instance")));
        }
        let v = self.param(store, name)?;
        if let Op::Param(_, n) = &mut self.nodes[v.0].op {
            *n = instances;
        }
        Ok(v)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let geo = ConvGeometry::new(x.grid()?, k.shape(), stride, padding)?;
        let cols = geo.im2col(x.data());
        let out = Tensor::new(&geo.output_shape(), geo.apply_cols(&cols, k.data()))?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                geo,
                cols,
            },
        ))
    }

    pub fn upsample(&mut self, input: Var, kernel: Var, factor: usize) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let geo = UpsampleGeometry::new(x.grid()?, k.shape(), factor)?;
        let out = ops::upsample_learned(x, k, factor)?;
        Ok(self.push(out, Op::Upsample { input, kernel, geo }))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::dense(self.value(input), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::Dense { input, weight, bias }))
    }

    /// Adds a `[C]` bias to every pixel of an `[H, W, C]` map.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        let c = x.grid()?.channels;
        if b.shape() != [c] {
            return Err(Error::Shape(format!("bias {:?} for {c} channels", b.shape())));
        }
        let mut out = x.clone();
        for px in out.data_mut().chunks_exact_mut(c) {
            for (v, &bv) in px.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::BiasAdd { input, bias }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    /// Concatenates `[H, W, C_i]` maps along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?)
            .grid()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let g = self.value(p).grid()?;
            if (g.height, g.width) != (first.height, first.width) {
                return Err(Error::Shape(format!(
                    "concat of {}x{} and {}x{} maps",
                    first.height, first.width, g.height, g.width
                )));
            }
            widths.push(g.channels);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(first.pixels() * total);
        for px in 0..first.pixels() {
            for (&p, &c) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[px * c..][..c]);
            }
        }
        let out = Tensor::new(&[first.height, first.width, total], data)?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    pub fn select_channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let out = self.value(input).channel(channel)?;
        Ok(self.push(out, Op::Select { input, channel }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push_scalar(s, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push_scalar(s, Op::Mean(x))
    }

    pub fn softmax(&mut self, scores: Var) -> Result<Var> {
        let out = ops::softmax_channels(self.value(scores))?;
        Ok(self.push(out, Op::Softmax(scores)))
    }

    pub fn cross_entropy(&mut self, probs: Var, labels: &LabelMap) -> Result<Var> {
        let loss = ops::cross_entropy(self.value(probs), labels)?;
        Ok(self.push_scalar(
            loss,
            Op::CrossEntropy {
                probs,
                labels: labels.clone(),
            },
        ))
    }

    /// Fused softmax + mean cross-entropy over pixels.
    pub fn softmax_cross_entropy(&mut self, scores: Var, labels: &LabelMap) -> Result<Var> {
        let probs = ops::softmax_channels(self.value(scores))?;
        let loss = ops::cross_entropy(&probs, labels)?;
        Ok(self.push_scalar(
            loss,
            Op::SoftmaxCrossEntropy {
                scores,
                probs,
                labels: labels.clone(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`; returns per-name adjoints averaged
    /// over parameter instances.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("an empty tape (no forward pass recorded)".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward(format!("node {} not on this tape", loss.0)));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "a non-scalar node of shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::filled(self.nodes[loss.0].value.shape(), 1.0));
        let mut sums: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else {
                if let Op::Param(name, n) = &self.nodes[i].op {
                    *counts.entry(name.clone()).or_default() += n;
                    sums.entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(self.nodes[i].value.shape()));
                }
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(name, n) => {
                    *counts.entry(name.clone()).or_default() += n;
                    match sums.get_mut(name) {
                        Some(acc) => acc.add_assign(&dy)?,
                        None => {
                            sums.insert(name.clone(), dy);
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    kernel,
                    geo,
                    cols,
                } => {
                    let p = geo.out_pixels();
                    let plen = geo.patch_len();
                    let cout = geo.out_channels;
                    let k = self.value(*kernel);
                    let mut dk = vec![0.0; cout * plen];
                    gemm(Mat::new(dy.data(), p, cout).t(), Mat::new(cols, p, plen), &mut dk, 0.0);
                    let mut dcols = vec![0.0; p * plen];
                    gemm(Mat::new(dy.data(), p, cout), Mat::new(k.data(), cout, plen), &mut dcols, 0.0);
                    let dx = geo.col2im(&dcols);
                    accumulate(&mut adj, *kernel, Tensor::new(k.shape(), dk)?)?;
                    accumulate(&mut adj, *input, Tensor::new(self.value(*input).shape(), dx)?)?;
                }
                Op::Upsample { input, kernel, geo } => {
                    let x = self.value(*input);
                    let k = self.value(*kernel);
                    let (cin, cout) = (geo.input.channels, geo.out_channels);
                    let mut dx = vec![0.0f32; x.len()];
                    let mut dk = vec![0.0f32; k.len()];
                    let (xd, kd, dyd) = (x.data(), k.data(), dy.data());
                    geo.for_each_tap(|src, dst, ky, kx| {
                        for co in 0..cout {
                            let g = dyd[dst * cout + co];
                            for ci in 0..cin {
                                let ki = geo.kernel_index(co, ci, ky, kx);
                                dx[src * cin + ci] += g * kd[ki];
                                dk[ki] += g * xd[src * cin + ci];
                            }
                        }
                    });
                    accumulate(&mut adj, *kernel, Tensor::new(k.shape(), dk)?)?;
                    accumulate(&mut adj, *input, Tensor::new(x.shape(), dx)?)?;
                }
                Op::Dense { input, weight, bias } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (cout, cin) = (w.shape()[0], w.shape()[1]);
                    let rows = x.len() / cin;
                    let mut dx = vec![0.0; rows * cin];
                    gemm(Mat::new(dy.data(), rows, cout), Mat::new(w.data(), cout, cin), &mut dx, 0.0);
                    let mut dw = vec![0.0; cout * cin];
                    gemm(Mat::new(dy.data(), rows, cout).t(), Mat::new(x.data(), rows, cin), &mut dw, 0.0);
                    let mut db = vec![0.0f64; cout];
                    for row in dy.data().chunks_exact(cout) {
                        for (acc, &g) in db.iter_mut().zip(row) {
                            *acc += g as f64;
                        }
                    }
                    let db = db.into_iter().map(|v| v as f32).collect();
                    accumulate(&mut adj, *bias, Tensor::new(&[cout], db)?)?;
                    accumulate(&mut adj, *weight, Tensor::new(w.shape(), dw)?)?;
                    accumulate(&mut adj, *input, Tensor::new(x.shape(), dx)?)?;
                }
                Op::BiasAdd { input, bias } => {
                    let c = self.value(*bias).len();
                    let mut db = vec![0.0f64; c];
                    for px in dy.data().chunks_exact(c) {
                        for (acc, &g) in db.iter_mut().zip(px) {
                            *acc += g as f64;
                        }
                    }
                    let db = db.into_iter().map(|v| v as f32).collect();
                    accumulate(&mut adj, *bias, Tensor::new(&[c], db)?)?;
                    accumulate(&mut adj, *input, dy)?;
                }
                Op::Relu(x) => {
                    let dx = node.value.zip_map(&dy, |y, g| if y > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut adj, *x, dx)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, dy.clone())?;
                    accumulate(&mut adj, *b, dy)?;
                }
                Op::Mul(a, b) => {
                    let da = dy.zip_map(self.value(*b), |g, v| g * v)?;
                    let db = dy.zip_map(self.value(*a), |g, v| g * v)?;
                    accumulate(&mut adj, *a, da)?;
                    accumulate(&mut adj, *b, db)?;
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    accumulate(&mut adj, *x, dy.map(|g| g * s))?;
                }
                Op::Concat(parts) => {
                    let total = node.value.grid()?.channels;
                    let mut offset = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let c = shape[2];
                        let data = dy
                            .data()
                            .chunks_exact(total)
                            .flat_map(|px| px[offset..offset + c].iter().copied())
                            .collect();
                        accumulate(&mut adj, p, Tensor::new(&shape, data)?)?;
                        offset += c;
                    }
                }
                Op::Select { input, channel } => {
                    let x = self.value(*input);
                    let c = x.grid()?.channels;
                    let mut dx = Tensor::zeros(x.shape());
                    for (px, &g) in dx.data_mut().chunks_exact_mut(c).zip(dy.data()) {
                        px[*channel] = g;
                    }
                    accumulate(&mut adj, *input, dx)?;
                }
                Op::Sum(x) => {
                    let g = dy.data()[0];
                    accumulate(&mut adj, *x, Tensor::filled(self.value(*x).shape(), g))?;
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len().max(1);
                    let g = (dy.data()[0] as f64 / n as f64) as f32;
                    accumulate(&mut adj, *x, Tensor::filled(self.value(*x).shape(), g))?;
                }
                Op::Softmax(x) => {
                    let c = node.value.grid()?.channels;
                    let mut dx = Vec::with_capacity(dy.len());
                    for (p, g) in node.value.data().chunks_exact(c).zip(dy.data().chunks_exact(c)) {
                        let dot: f64 = p.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum();
                        dx.extend(p.iter().zip(g).map(|(&a, &b)| (a as f64 * (b as f64 - dot)) as f32));
                    }
                    accumulate(&mut adj, *x, Tensor::new(node.value.shape(), dx)?)?;
                }
                Op::CrossEntropy { probs, labels } => {
                    let p = self.value(*probs);
                    let c = p.grid()?.channels;
                    let scale = dy.data()[0] as f64 / labels.len() as f64;
                    let mut dp = Tensor::zeros(p.shape());
                    for ((d, px), &l) in dp
                        .data_mut()
                        .chunks_exact_mut(c)
                        .zip(p.data().chunks_exact(c))
                        .zip(labels.data())
                    {
                        let pl = px[l as usize].max(f32::MIN_POSITIVE) as f64;
                        d[l as usize] = (-scale / pl) as f32;
                    }
                    accumulate(&mut adj, *probs, dp)?;
                }
                Op::SoftmaxCrossEntropy {
                    scores,
                    probs,
                    labels,
                } => {
                    let c = probs.grid()?.channels;
                    let scale = dy.data()[0] as f64 / labels.len() as f64;
                    let mut ds = Vec::with_capacity(probs.len());
                    for (px, &l) in probs.data().chunks_exact(c).zip(labels.data()) {
                        for (k, &p) in px.iter().enumerate() {
                            let target = if k == l as usize { 1.0 } else { 0.0 };
                            ds.push(((p as f64 - target) * scale) as f32);
                        }
                    }
                    accumulate(&mut adj, *scores, Tensor::new(probs.shape(), ds)?)?;
                }
            }
        }

        let mut out = Gradients::default();
        for (name, mut g) in sums {
            let n = counts[&name];
            if n > 1 {
                g.scale_in_place(1.0 / n as f32);
            }
            out.instances.insert(name.clone(), n);
            out.grads.insert(name, g);
        }
        Ok(out)
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, grad: Tensor) -> Result<()> {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&grad),
        slot @ None => {
            *slot = Some(grad);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_on_empty_tape_fails() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Backward(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 2, 1]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut store = ParamStore::new();
        let w = Tensor::new(&[1, 4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let x = Tensor::new(&[1, 4], vec![3.0, 1.5, -2.0, 7.0]).unwrap();
        store.insert("w", w).unwrap();
        let mut tape = Tape::new();
        let wv = tape.param(&store, "w").unwrap();
        let xv = tape.input(x.clone());
        let prod = tape.mul(wv, xv).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap(), &x);
        assert_eq!(grads.instances("w"), 1);
    }

    #[test]
    fn repeated_instances_are_averaged() {
        // loss = sum(w * x1) + sum(w * x2): instance adjoints x1 and x2.
        let mut store = ParamStore::new();
        store.insert("w", Tensor::filled(&[3], 1.0)).unwrap();
        let x1 = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let x2 = Tensor::new(&[3], vec![5.0, -2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let w1 = tape.param(&store, "w").unwrap();
        let w2 = tape.param(&store, "w").unwrap();
        let a = tape.input(x1);
        let b = tape.input(x2);
        let p1 = tape.mul(w1, a).unwrap();
        let p2 = tape.mul(w2, b).unwrap();
        let s = tape.add(p1, p2).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[3.0, 0.0, 1.5]);
        assert_eq!(g.instances("w"), 2);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::filled(&[2], 1.0)).unwrap();
        let mut tape = Tape::new();
        let _ = tape.param(&store, "w").unwrap();
        let x = tape.input(Tensor::filled(&[2], 1.0));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("w").unwrap().data(), &[0.0, 0.0]);
    }
}
