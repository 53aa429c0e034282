//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar node with
//! respect to every recorded node. Parameters enter the tape through
//! [`Graph::param`] and their gradients are folded back into the
//! [`ParamStore`] with [`Gradients::accumulate_into`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::kernels::{self, ConvGeometry};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Conv3d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
    },
    TemporalEdgeSum(Var),
    AddScaled {
        a: Var,
        b: Var,
        coeff: f64,
    },
    Sum(Vec<Var>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Concat(Vec<Var>),
    SelectChannels {
        x: Var,
        channels: Vec<usize>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    SpatialMean(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    SoftmaxMix {
        inputs: Vec<Option<Var>>,
        logits: Var,
        offset: usize,
        weights: Vec<f64>,
    },
    Scalar {
        x: Var,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-channel statistics observed by a batch-statistics normalisation.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new(Exec::default())
    }
}

fn shape5(t: &Tensor) -> Result<[usize; 5]> {
    t.dims5()
}

impl Graph {
    pub fn new(exec: Exec) -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn conv3d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let y = kernels::conv3d_forward(self.value(x), self.value(w), geom, self.exec)?;
        Ok(self.push(y, Op::Conv3d { x, w, geom }))
    }

    /// Sum of the first and last temporal kernel slices over their spatial
    /// taps: `[Cout, Cin, 3, kh, kw]` → `[Cout, Cin, 1, 1, 1]`.
    pub fn temporal_edge_sum(&mut self, w: Var) -> Result<Var> {
        let [co, ci, kt, kh, kw] = shape5(self.value(w))?;
        if kt != 3 {
            return Err(Error::Shape(format!("temporal edge sum needs kt = 3, got {kt}")));
        }
        let area = kh * kw;
        let data = self.value(w).data();
        let out = (0..co * ci)
            .map(|pair| {
                let base = pair * 3 * area;
                data[base..base + area].iter().sum::<f64>() + data[base + 2 * area..base + 3 * area].iter().sum::<f64>()
            })
            .collect();
        let s = Tensor::from_vec(&[co, ci, 1, 1, 1], out)?;
        Ok(self.push(s, Op::TemporalEdgeSum(w)))
    }

    /// `a + coeff · b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, coeff: f64) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        y.scaled_add_assign(coeff, self.value(b));
        Ok(self.push(y, Op::AddScaled { a, b, coeff }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_scaled(a, b, 1.0)
    }

    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let first = *terms.first().ok_or(Error::Empty("sum of no terms"))?;
        if terms.len() == 1 {
            return Ok(first);
        }
        let mut y = self.value(first).clone();
        for &t in &terms[1..] {
            if self.value(t).shape() != y.shape() {
                return Err(Error::Shape(format!(
                    "cannot sum {:?} and {:?}",
                    y.shape(),
                    self.value(t).shape()
                )));
            }
            y.add_assign(self.value(t));
        }
        Ok(self.push(y, Op::Sum(terms.to_vec())))
    }

    /// Per-channel normalisation over batch and spatio-temporal extent
    /// followed by a learned affine map. When `running` is given the stored
    /// statistics are used instead of the batch's.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, BatchStats)> {
        let [n, c, t, h, w] = shape5(self.value(x))?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Shape(format!("normalisation over {c} channels got mismatched affine")));
        }
        let plane = t * h * w;
        let count = n * plane;
        let xs = self.value(x).data();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut acc = 0.0;
                    for b in 0..n {
                        acc += xs[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().sum::<f64>();
                    }
                    let m = acc / count as f64;
                    let mut sq = 0.0;
                    for b in 0..n {
                        sq += xs[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count as f64;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xs.len());
        let mut y = Vec::with_capacity(xs.len());
        for b in 0..n {
            for ch in 0..c {
                for &v in &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    let z = (v - mean[ch]) * inv_std[ch];
                    xhat.push(z);
                    y.push(g[ch] * z + bt[ch]);
                }
            }
        }
        let shape = [n, c, t, h, w];
        let stats = BatchStats { mean, var, count };
        let node = self.push(
            Tensor::from_vec(&shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::from_vec(&shape, xhat)?,
                inv_std,
                batch_stats: running.is_none(),
            },
        );
        Ok((node, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat of no parts"))?;
        let [n, _, t, h, w] = shape5(self.value(first))?;
        let plane = t * h * w;
        let mut channels = 0;
        for &p in parts {
            let [pn, pc, pt, ph, pw] = shape5(self.value(p))?;
            if [pn, pt, ph, pw] != [n, t, h, w] {
                return Err(Error::Shape(format!(
                    "concat mixes {:?} and {:?}",
                    self.value(first).shape(),
                    self.value(p).shape()
                )));
            }
            channels += pc;
        }
        let mut out = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for &p in parts {
                let v = self.value(p);
                let pc = v.shape()[1];
                out.extend_from_slice(&v.data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let y = Tensor::from_vec(&[n, channels, t, h, w], out)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    /// Gather channels by index (subsets and permutations).
    pub fn select_channels(&mut self, x: Var, channels: &[usize]) -> Result<Var> {
        let [n, c, t, h, w] = shape5(self.value(x))?;
        if let Some(&bad) = channels.iter().find(|&&ch| ch >= c) {
            return Err(Error::Shape(format!("channel {bad} out of range for {c} channels")));
        }
        let plane = t * h * w;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * channels.len() * plane);
        for b in 0..n {
            for &ch in channels {
                out.extend_from_slice(&xs[(b * c + ch) * plane..(b * c + ch + 1) * plane]);
            }
        }
        let y = Tensor::from_vec(&[n, channels.len(), t, h, w], out)?;
        Ok(self.push(
            y,
            Op::SelectChannels {
                x,
                channels: channels.to_vec(),
            },
        ))
    }

    pub fn max_pool(&mut self, x: Var, window: [usize; 3]) -> Result<Var> {
        let (y, argmax) = kernels::max_pool3d(self.value(x), window)?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let y = kernels::spatial_mean(self.value(x))?;
        Ok(self.push(y, Op::SpatialMean(x)))
    }

    pub fn temporal_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = kernels::temporal_upsample(self.value(x), factor)?;
        Ok(self.push(y, Op::Upsample { x, factor }))
    }

    /// `Σ_k softmax(logits[offset..offset+K])_k · inputs_k`, where a `None`
    /// input contributes the zero map but keeps its share of the softmax.
    pub fn softmax_mix(&mut self, inputs: &[Option<Var>], logits: Var, offset: usize) -> Result<Var> {
        let k = inputs.len();
        let all = self.value(logits).data();
        if offset + k > all.len() {
            return Err(Error::Shape(format!(
                "softmax mix over {k} inputs needs logits [{offset}, {}) of {}",
                offset + k,
                all.len()
            )));
        }
        let weights = softmax(&all[offset..offset + k]);
        let shape = inputs
            .iter()
            .flatten()
            .map(|v| self.value(*v).shape().to_vec())
            .next()
            .ok_or(Error::Empty("softmax mix with only zero inputs"))?;
        let mut y = Tensor::zeros(&shape);
        for (inp, &wk) in inputs.iter().zip(&weights) {
            if let Some(v) = inp {
                if self.value(*v).shape() != shape.as_slice() {
                    return Err(Error::Shape("softmax mix over mismatched shapes".into()));
                }
                y.scaled_add_assign(wk, self.value(*v));
            }
        }
        Ok(self.push(
            y,
            Op::SoftmaxMix {
                inputs: inputs.to_vec(),
                logits,
                offset,
                weights,
            },
        ))
    }

    /// Scalar node whose gradient with respect to `x` was computed alongside
    /// its value (losses with closed-form derivatives).
    pub fn scalar_fn(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::Shape("scalar function gradient does not match its input".into()));
        }
        Ok(self.push(Tensor::full(&[1], value), Op::Scalar { x, grad }))
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut param_grads = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Param(id) => {
                    param_grads.insert(*id, g);
                }
                Op::Conv3d { x, w, geom } => {
                    let (gx, gw) =
                        kernels::conv3d_backward(self.value(*x), self.value(*w), &g, *geom, self.exec)?;
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::TemporalEdgeSum(w) => {
                    let [co, ci, kt, kh, kw] = shape5(self.value(*w))?;
                    let area = kh * kw;
                    let mut gw = Tensor::zeros(&[co, ci, kt, kh, kw]);
                    let gwd = gw.data_mut();
                    for (pair, &gs) in g.data().iter().enumerate() {
                        let base = pair * 3 * area;
                        gwd[base..base + area].fill(gs);
                        gwd[base + 2 * area..base + 3 * area].fill(gs);
                    }
                    accumulate(&mut grads, *w, gw);
                }
                Op::AddScaled { a, b, coeff } => {
                    accumulate(&mut grads, *b, g.map(|v| coeff * v));
                    accumulate(&mut grads, *a, g);
                }
                Op::Sum(terms) => {
                    for &t in terms {
                        accumulate(&mut grads, t, g.clone());
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let [n, c, t, h, w] = shape5(&g)?;
                    let plane = t * h * w;
                    let m = (n * plane) as f64;
                    let gam = self.value(*gamma).data();
                    let gd = g.data();
                    let xh = xhat.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                            for (gv, zv) in gd[r.clone()].iter().zip(&xh[r]) {
                                dgamma[ch] += gv * zv;
                                dbeta[ch] += gv;
                            }
                        }
                    }
                    let mut gx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            for i in r {
                                gx[i] = if *batch_stats {
                                    scale * (gd[i] - dbeta[ch] / m - xh[i] * dgamma[ch] / m)
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(g.shape(), gx)?);
                    accumulate(&mut grads, *gamma, Tensor::from_vec(&[c], dgamma)?);
                    accumulate(&mut grads, *beta, Tensor::from_vec(&[c], dbeta)?);
                }
                Op::Relu(x) => {
                    let y = &node.value;
                    let gx = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(gv, yv)| if *yv > 0.0 { *gv } else { 0.0 })
                            .collect(),
                    )?;
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat(parts) => {
                    let [n, _, t, h, w] = shape5(&g)?;
                    let plane = t * h * w;
                    let total = g.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.value(p).shape()[1];
                        let mut gp = Vec::with_capacity(n * pc * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            gp.extend_from_slice(&g.data()[start..start + pc * plane]);
                        }
                        accumulate(&mut grads, p, Tensor::from_vec(self.value(p).shape(), gp)?);
                        offset += pc;
                    }
                }
                Op::SelectChannels { x, channels } => {
                    let [n, c, t, h, w] = shape5(self.value(*x))?;
                    let plane = t * h * w;
                    let mut gx = Tensor::zeros(&[n, c, t, h, w]);
                    let gxd = gx.data_mut();
                    for b in 0..n {
                        for (j, &ch) in channels.iter().enumerate() {
                            let src = (b * channels.len() + j) * plane;
                            let dst = (b * c + ch) * plane;
                            for i in 0..plane {
                                gxd[dst + i] += g.data()[src + i];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let gxd = gx.data_mut();
                    for (gv, &src) in g.data().iter().zip(argmax) {
                        gxd[src] += gv;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SpatialMean(x) => {
                    let [n, c, t, h, w] = shape5(self.value(*x))?;
                    let area = h * w;
                    let mut gx = Vec::with_capacity(n * c * t * area);
                    for &gv in g.data() {
                        gx.extend(std::iter::repeat_n(gv / area as f64, area));
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(&[n, c, t, h, w], gx)?);
                }
                Op::Upsample { x, factor } => {
                    let frames = self.value(*x).shape()[2];
                    accumulate(&mut grads, *x, kernels::temporal_upsample_backward(&g, frames, *factor)?);
                }
                Op::SoftmaxMix {
                    inputs,
                    logits,
                    offset,
                    weights,
                } => {
                    let dots: Vec<f64> = inputs
                        .iter()
                        .map(|inp| match inp {
                            Some(v) => g.data().iter().zip(self.value(*v).data()).map(|(a, b)| a * b).sum(),
                            None => 0.0,
                        })
                        .collect();
                    let mean_dot: f64 = weights.iter().zip(&dots).map(|(w, d)| w * d).sum();
                    let mut gl = Tensor::zeros(self.value(*logits).shape());
                    for (k, (w, d)) in weights.iter().zip(&dots).enumerate() {
                        gl.data_mut()[offset + k] = w * (d - mean_dot);
                    }
                    accumulate(&mut grads, *logits, gl);
                    for (inp, &w) in inputs.iter().zip(weights) {
                        if let Some(v) = inp {
                            accumulate(&mut grads, *v, g.map(|x| w * x));
                        }
                    }
                }
                Op::Scalar { x, grad } => {
                    let s = g.data()[0];
                    accumulate(&mut grads, *x, grad.map(|v| s * v));
                }
            }
        }
        Ok(Gradients { grads, param_grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_grads: HashMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient reaching an input leaf, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.param_grads.get(&id)
    }

    /// Add every parameter gradient into the store's `grad` slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.param_grads {
            store.get_mut(*id).grad.add_assign(g);
        }
    }
}
