//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every op reads existing
//! nodes and pushes exactly one new node, so insertion order is a valid
//! topological order and [`Graph::backward`] is a single reverse sweep that
//! visits each recorded op once. A node requires a gradient when any of its
//! inputs does; ops whose inputs are all constant skip saving their adjoint
//! caches.
//!
//! ```
//! use psdet::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use rand::Rng;

use crate::detect::geometry::Roi;
use crate::detect::psroi::{ps_roi_pool_backward, ps_roi_pool_groups, BinLayout};
use crate::error::{Error, Result};
use crate::kernels::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::kernels::norm::{batch_norm_backward, batch_norm_forward, BnCache, RunningStats};
use crate::kernels::pool::max_pool2d_forward;
use crate::kernels::{log_sum_exp, smooth_l1, smooth_l1_grad, softmax_rows};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax {
        x: Var,
        width: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    SmoothL1 {
        pred: Var,
        target: Vec<T>,
        norm: T,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    PsRoiPool {
        maps: Var,
        rois: Vec<Roi>,
        layouts: Vec<BinLayout>,
        k: usize,
        groups: usize,
    },
    MeanSpatial {
        x: Var,
        window: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("operand shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("add", out, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push("mul", out, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, &[a], Op::Scale(a, s))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, &[a], Op::Sum(a))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", out, &[x], Op::Relu(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let keep = self.needs(x) || self.needs(w);
        let (out, geom, cols) = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
            keep,
        )?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", out, &inputs, Op::Conv2d { x, w, b, geom, cols })
    }

    /// Batch normalization. Running statistics live outside the graph and are
    /// updated in place when `training`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: RunningStats<'_, T>,
        training: bool,
    ) -> Result<Var> {
        let (out, cache) = batch_norm_forward(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            training,
        )?;
        self.push("batch_norm", out, &[x, gamma, beta], Op::BatchNorm { x, gamma, beta, cache })
    }

    pub fn max_pool2d(&mut self, x: Var, win: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = max_pool2d_forward(self.value(x), win, stride)?;
        self.push("max_pool2d", out, &[x], Op::MaxPool { x, argmax })
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Outside training (or with `p = 0`) this is the
    /// identity and returns `x` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(vx.shape(), data)?;
        self.push("dropout", out, &[x], Op::Dropout { x, mask })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let width = *vx.shape().last().expect("rank >= 1");
        let mut data = vx.data().to_vec();
        softmax_rows(&mut data, width);
        let out = Tensor::new(vx.shape(), data)?;
        self.push("softmax", out, &[x], Op::Softmax { x, width })
    }

    /// Mean cross-entropy of last-axis logits against class indices, computed
    /// through a stable log-softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let width = *vl.shape().last().expect("rank >= 1");
        let rows = vl.len() / width;
        if targets.len() != rows {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{rows} logit rows but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= width) {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("target class {bad} outside 0..{width}"),
            ));
        }
        let mut loss = T::zero();
        for (row, &t) in vl.data().chunks(width).zip(targets) {
            loss += log_sum_exp(row) - row[t];
        }
        let mut probs = vl.data().to_vec();
        softmax_rows(&mut probs, width);
        let out = Tensor::scalar(loss / T::from_usize_lossy(rows));
        self.push(
            "softmax_cross_entropy",
            out,
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        )
    }

    /// `Σ smoothL1(pred − target) / norm`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[T], norm: T) -> Result<Var> {
        let vp = self.value(pred);
        if vp.len() != target.len() {
            return Err(Error::dim(
                "smooth_l1",
                format!("{} predictions but {} targets", vp.len(), target.len()),
            ));
        }
        if !(norm > T::zero()) {
            return Err(Error::Contract("smooth_l1 normalizer must be positive".into()));
        }
        let total: T = vp.data().iter().zip(target).map(|(&p, &t)| smooth_l1(p - t)).sum();
        self.push(
            "smooth_l1",
            Tensor::scalar(total / norm),
            &[pred],
            Op::SmoothL1 {
                pred,
                target: target.to_vec(),
                norm,
            },
        )
    }

    /// Picks flat elements of `x` into a new tensor of `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= vx.len()) {
            return Err(Error::dim("gather", format!("index {bad} outside {} elements", vx.len())));
        }
        let data = index.iter().map(|&i| vx.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.push("gather", out, &[x], Op::Gather { x, index })
    }

    /// Position-sensitive pooling of many RoIs: `[N, k²G, H, W]` → `[R, G, k, k]`.
    pub fn ps_roi_pool(&mut self, maps: Var, rois: &[Roi], k: usize, groups: usize, stride: usize) -> Result<Var> {
        if rois.is_empty() {
            return Err(Error::Contract("ps_roi_pool needs at least one RoI".into()));
        }
        let vm = self.value(maps);
        let mut data = Vec::with_capacity(rois.len() * groups * k * k);
        let mut layouts = Vec::with_capacity(rois.len());
        for roi in rois {
            let (pooled, layout) = ps_roi_pool_groups(vm, roi, k, groups, stride)?;
            data.extend(pooled);
            layouts.push(layout);
        }
        let out = Tensor::new(&[rois.len(), groups, k, k], data)?;
        self.push(
            "ps_roi_pool",
            out,
            &[maps],
            Op::PsRoiPool {
                maps,
                rois: rois.to_vec(),
                layouts,
                k,
                groups,
            },
        )
    }

    /// Mean over the last two axes (the position vote).
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let s = vx.shape();
        if s.len() < 3 {
            return Err(Error::dim("mean_spatial", format!("need rank >= 3, got {s:?}")));
        }
        let window = s[s.len() - 1] * s[s.len() - 2];
        let inv = T::one() / T::from_usize_lossy(window);
        let data = vx.data().chunks(window).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(&s[..s.len() - 2], data)?;
        self.push("mean_spatial", out, &[x], Op::MeanSpatial { x, window })
    }

    /// Populates gradients of every node that requires one, from a scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.adjoint(i, &gout);
            self.nodes[i].grad = Some(gout);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn adjoint(&self, i: usize, gout: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, gout.to_vec()));
                out.push((*b, gout.to_vec()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, gout.iter().zip(vb).map(|(&g, &y)| g * y).collect()));
                out.push((*b, gout.iter().zip(va).map(|(&g, &x)| g * x).collect()));
            }
            Op::Scale(a, s) => out.push((*a, gout.iter().map(|&g| g * *s).collect())),
            Op::Sum(a) => out.push((*a, vec![gout[0]; self.value(*a).len()])),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                out.push((
                    *x,
                    gout.iter()
                        .zip(vx)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                ));
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let grads = conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    cols,
                    gout,
                    (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b))),
                );
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, grads.db) {
                    out.push((*b, db));
                }
            }
            Op::BatchNorm { x, gamma, beta, cache } => {
                let shape = self.value(*x).dims4("batch_norm").expect("checked on forward");
                let grads = batch_norm_backward(shape, self.value(*gamma).data(), cache, gout);
                out.push((*x, grads.dx));
                out.push((*gamma, grads.dgamma));
                out.push((*beta, grads.dbeta));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &g) in argmax.iter().zip(gout) {
                    dx[src] += g;
                }
                out.push((*x, dx));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, gout.iter().zip(mask).map(|(&g, &m)| g * m).collect()));
            }
            Op::Softmax { x, width } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(*width).zip(y.chunks(*width)).zip(gout.chunks(*width)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dxr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::SoftmaxCrossEntropy { logits, probs, targets } => {
                let width = probs.len() / targets.len();
                let scale = gout[0] / T::from_usize_lossy(targets.len());
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * width + t] -= scale;
                }
                out.push((*logits, dl));
            }
            Op::SmoothL1 { pred, target, norm } => {
                let vp = self.value(*pred).data();
                let s = gout[0] / *norm;
                out.push((*pred, vp.iter().zip(target).map(|(&p, &t)| smooth_l1_grad(p - t) * s).collect()));
            }
            Op::Gather { x, index } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&src, &g) in index.iter().zip(gout) {
                    dx[src] += g;
                }
                out.push((*x, dx));
            }
            Op::PsRoiPool { maps, rois, layouts, k, groups } => {
                let vm = self.value(*maps);
                let mut dm = vec![T::zero(); vm.len()];
                let per = groups * k * k;
                for (r, (roi, layout)) in rois.iter().zip(layouts).enumerate() {
                    ps_roi_pool_backward(vm.shape(), roi, layout, *k, *groups, &gout[r * per..(r + 1) * per], &mut dm);
                }
                out.push((*maps, dm));
            }
            Op::MeanSpatial { x, window } => {
                let inv = T::one() / T::from_usize_lossy(*window);
                let mut dx = Vec::with_capacity(gout.len() * window);
                for &g in gout {
                    dx.extend(std::iter::repeat_n(g * inv, *window));
                }
                out.push((*x, dx));
            }
        }
        out
    }
}
