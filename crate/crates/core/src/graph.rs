//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, records every operation
//! applied to its nodes, and on [`Graph::backward`] returns the gradient of a
//! scalar node with respect to every parameter marked trainable. Parameter
//! updates happen after the graph is dropped.

use crate::conv::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct TripletPick {
    anchor: usize,
    pos: usize,
    neg: usize,
    d_pos: f64,
    d_neg: f64,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    Add(Var, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Upsample2x(Var),
    ConcatChannels(Vec<Var>),
    ConcatBatch(Vec<Var>),
    SliceBatch(Var, usize),
    Gap(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Linear { x: Var, w: Var, b: Var },
    SampleMean(Var),
    MeanLog { p: Var, eps: T, complement: bool },
    L1Mean(Var, Var),
    SoftmaxXent { logits: Var, labels: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    Triplet { u: Var, picks: Vec<TripletPick>, count: usize },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|(_, g)| g.is_finite())
    }
}

pub struct Graph<'p, T: Scalar> {
    store: &'p ParamStore<T>,
    trainable: Vec<bool>,
    param_nodes: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    /// A graph in which no parameter receives gradients.
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Self {
            store,
            trainable: vec![false; store.len()],
            param_nodes: vec![None; store.len()],
            nodes: Vec::new(),
        }
    }

    /// A graph that differentiates with respect to `ids`.
    pub fn with_trainable(store: &'p ParamStore<T>, ids: &[ParamId]) -> Self {
        let mut g = Self::new(store);
        for id in ids {
            g.trainable[id.0] = true;
        }
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.store.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Constant input; never receives gradients.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Input, t, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: self.trainable[id.0],
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Square-kernel 2-D convolution; weight shape `[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, c_in, h, wd) = self.value(x).dims4();
        let (c_out, wc, k, k2) = self.value(w).dims4();
        assert_eq!(wc, c_in, "conv input channels {c_in} vs weight {wc}");
        assert_eq!(k, k2, "square kernels only");
        let geom = ConvGeom { n, c_in, h, w: wd, c_out, k, stride, pad };
        let (ho, wo) = geom.out_hw();
        let bias = b.map(|b| self.value(b).data().to_vec());
        let (out, cols) = conv::conv_forward(self.value(x).data(), self.value(w).data(), bias.as_deref(), &geom);
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let cols = if self.ng(w) { cols } else { Vec::new() };
        self.push(
            Op::Conv { x, w, b, geom, cols },
            Tensor::from_vec(&[n, c_out, ho, wo], out),
            needs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), out, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        let needs = self.ng(a);
        self.push(Op::Relu(a), out, needs)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::c(slope);
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        let needs = self.ng(a);
        self.push(Op::LeakyRelu(a, s), out, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let needs = self.ng(a);
        self.push(Op::Sigmoid(a), out, needs)
    }

    /// Nearest-neighbour ×2 spatial up-sampling.
    pub fn upsample2x(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let src = self.value(a).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for x in 0..w2 {
                    d[y * w2 + x] = s[(y / 2) * w + x / 2];
                }
            }
        }
        let needs = self.ng(a);
        self.push(Op::Upsample2x(a), Tensor::from_vec(&[n, c, h2, w2], out), needs)
    }

    /// Concatenate `[N, C_i, H, W]` maps along channels, in order.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut c_total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat_channels geometry mismatch");
            c_total += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c_total * hw);
        for ni in 0..n {
            for &p in parts {
                let t = self.value(p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[ni * pc * hw..(ni + 1) * pc * hw]);
            }
        }
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(
            Op::ConcatChannels(parts.to_vec()),
            Tensor::from_vec(&[n, c_total, h, w], out),
            needs,
        )
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::cat_outer(&refs);
        let needs = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatBatch(parts.to_vec()), out, needs)
    }

    pub fn slice_batch(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_outer(start, len);
        let needs = self.ng(a);
        self.push(Op::SliceBatch(a, start), out, needs)
    }

    /// Global average pooling `[N, C, H, W] -> [N, C]`.
    pub fn gap(&mut self, a: Var) -> Var {
        let (n, c, h, w) = self.value(a).dims4();
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw).unwrap();
        let out: Vec<T> = self
            .value(a)
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let needs = self.ng(a);
        self.push(Op::Gap(a), Tensor::from_vec(&[n, c], out), needs)
    }

    /// Group normalisation of `x: [N, C, H, W]` over `groups` channel groups
    /// per sample, followed by a per-channel affine map.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert!(groups > 0 && c % groups == 0, "{c} channels in {groups} groups");
        assert_eq!(self.value(gamma).shape(), &[c]);
        assert_eq!(self.value(beta).shape(), &[c]);
        let span = (c / groups) * h * w;
        let hw = h * w;
        let data = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(data.len());
        let mut inv_std = Vec::with_capacity(n * groups);
        for block in data.chunks(span) {
            let len = block.len() as f64;
            let mean = block.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / len;
            let var = block.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / len;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(T::c(inv));
            xhat.extend(block.iter().map(|v| T::c((v.to_f64_lossy() - mean) * inv)));
        }
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / hw) % c;
                v * gd[ch] + bd[ch]
            })
            .collect();
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let shape = [n, c, h, w];
        self.push(Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std }, Tensor::from_vec(&shape, out), needs)
    }

    /// `x·wᵀ + b` with `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, i) = self.value(x).dims2();
        let (o, wi) = self.value(w).dims2();
        assert_eq!(i, wi, "linear input width {i} vs weight {wi}");
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            n,
            i,
            o,
            T::one(),
            self.value(x).data(),
            i as isize,
            1,
            self.value(w).data(),
            1,
            i as isize,
            T::one(),
            &mut out,
            o as isize,
            1,
        );
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Op::Linear { x, w, b }, Tensor::from_vec(&[n, o], out), needs)
    }

    /// Mean over all non-batch axes: `[N, ...] -> [N]`.
    pub fn sample_mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = t.shape()[0];
        let inner = t.numel() / n;
        let inv = T::one() / T::from_usize(inner).unwrap();
        let out: Vec<T> = t.data().chunks(inner).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        let needs = self.ng(a);
        self.push(Op::SampleMean(a), Tensor::from_vec(&[n], out), needs)
    }

    /// `mean(log(clamp(p, eps, 1-eps)))`, or of `log(1 - clamp(p))` when
    /// `complement` is set. The clamp passes no gradient outside its range.
    pub fn mean_log(&mut self, p: Var, eps: f64, complement: bool) -> Var {
        let eps_t = T::c(eps);
        let hi = T::one() - eps_t;
        let t = self.value(p);
        let n = T::from_usize(t.numel()).unwrap();
        let s: T = t
            .data()
            .iter()
            .map(|&x| {
                let c = x.max(eps_t).min(hi);
                if complement {
                    (T::one() - c).ln()
                } else {
                    c.ln()
                }
            })
            .sum();
        let needs = self.ng(p);
        self.push(
            Op::MeanLog { p, eps: eps_t, complement },
            Tensor::scalar(s / n),
            needs,
        )
    }

    /// `mean(|a - b|)` over all elements.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "l1_mean shape mismatch");
        let n = T::from_usize(ta.numel()).unwrap();
        let s: T = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let needs = self.ng(a) || self.ng(b);
        self.push(Op::L1Mean(a, b), Tensor::scalar(s / n), needs)
    }

    /// Mean softmax cross-entropy over rows whose `mask` entry is set.
    /// Evaluates to zero (with zero gradient) when no row is selected.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Var {
        let (n, k) = self.value(logits).dims2();
        assert_eq!(labels.len(), n);
        assert_eq!(mask.len(), n);
        let data = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        let mut count = 0;
        for r in 0..n {
            let row = &data[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            for (p, &x) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (x - m).exp() / z;
            }
            if mask[r] {
                assert!(labels[r] < k, "label {} out of range for {k} classes", labels[r]);
                total += z.ln() + m - row[labels[r]];
                count += 1;
            }
        }
        let value = if count > 0 {
            total / T::from_usize(count).unwrap()
        } else {
            T::zero()
        };
        let needs = self.ng(logits) && count > 0;
        self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            Tensor::scalar(value),
            needs,
        )
    }

    /// Batch-hard triplet hinge on Euclidean distances between rows of `u`.
    ///
    /// For every selected anchor the farthest selected same-label row and the
    /// nearest selected different-label row are mined; anchors lacking either
    /// are skipped. Returns the mean hinge over the remaining anchors (zero
    /// when none remain) and the number of anchors used.
    pub fn batch_hard_triplet(&mut self, u: Var, labels: &[usize], mask: &[bool], margin: f64) -> (Var, usize) {
        let (n, dim) = self.value(u).dims2();
        assert_eq!(labels.len(), n);
        let data = self.value(u).data();
        let mut dist = vec![0.0f64; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = data[i * dim..(i + 1) * dim]
                    .iter()
                    .zip(&data[j * dim..(j + 1) * dim])
                    .map(|(&a, &b)| {
                        let t = (a - b).to_f64_lossy();
                        t * t
                    })
                    .sum::<f64>()
                    .sqrt();
                dist[i * n + j] = d;
                dist[j * n + i] = d;
            }
        }
        let mut picks = Vec::new();
        let mut total = 0.0f64;
        let mut count = 0;
        for a in (0..n).filter(|&a| mask[a]) {
            let mut pos: Option<(usize, f64)> = None;
            let mut neg: Option<(usize, f64)> = None;
            for j in (0..n).filter(|&j| j != a && mask[j]) {
                let d = dist[a * n + j];
                if labels[j] == labels[a] {
                    if pos.is_none_or(|(_, best)| d > best) {
                        pos = Some((j, d));
                    }
                } else if neg.is_none_or(|(_, best)| d < best) {
                    neg = Some((j, d));
                }
            }
            let (Some((p, dp)), Some((q, dn))) = (pos, neg) else {
                continue;
            };
            count += 1;
            let hinge = margin + dp - dn;
            if hinge > 0.0 {
                total += hinge;
                picks.push(TripletPick { anchor: a, pos: p, neg: q, d_pos: dp, d_neg: dn });
            }
        }
        let value = if count > 0 { total / count as f64 } else { 0.0 };
        let needs = self.ng(u) && !picks.is_empty();
        let v = self.push(Op::Triplet { u, picks, count }, Tensor::scalar(T::c(value)), needs);
        (v, count)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let s: T = terms.iter().map(|&(v, w)| self.scalar(v) * w).sum();
        let needs = terms.iter().any(|&(v, w)| self.ng(v) && w != T::zero());
        self.push(Op::WeightedSum(terms.to_vec()), Tensor::scalar(s), needs)
    }

    /// Reverse pass from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar node");
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        out
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) {
        let y = node.value.as_ref();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => match &mut out.grads[id.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            },
            Op::Conv { x, w, b, geom, cols } => {
                let (dx, dw, db) = conv::conv_backward(
                    g.data(),
                    self.value(*w).data(),
                    cols,
                    geom,
                    self.ng(*x),
                    self.ng(*w),
                );
                if let Some(dx) = dx {
                    self.accum(grads, *x, Tensor::from_vec(self.value(*x).shape(), dx));
                }
                if let Some(dw) = dw {
                    self.accum(grads, *w, Tensor::from_vec(self.value(*w).shape(), dw));
                }
                if let Some(b) = b {
                    self.accum(grads, *b, Tensor::from_vec(self.value(*b).shape(), db));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g);
            }
            Op::Relu(a) => {
                let y = y.unwrap();
                let mut d = g;
                for (d, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    if yv <= T::zero() {
                        *d = T::zero();
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::LeakyRelu(a, s) => {
                let mut d = g;
                for (d, &xv) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                    if xv <= T::zero() {
                        *d *= *s;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let y = y.unwrap();
                let mut d = g;
                for (d, &yv) in d.data_mut().iter_mut().zip(y.data()) {
                    *d *= yv * (T::one() - yv);
                }
                self.accum(grads, *a, d);
            }
            Op::Upsample2x(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                let (h2, w2) = (2 * h, 2 * w);
                let mut d = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    let gs = &g.data()[plane * h2 * w2..(plane + 1) * h2 * w2];
                    let ds = &mut d[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h2 {
                        for x in 0..w2 {
                            ds[(y / 2) * w + x / 2] += gs[y * w2 + x];
                        }
                    }
                }
                self.accum(grads, *a, Tensor::from_vec(&[n, c, h, w], d));
            }
            Op::ConcatChannels(parts) => {
                let (n, c_total, h, w) = g.dims4();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    if self.ng(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for ni in 0..n {
                            let start = (ni * c_total + offset) * hw;
                            d.extend_from_slice(&g.data()[start..start + pc * hw]);
                        }
                        self.accum(grads, p, Tensor::from_vec(&[n, pc, h, w], d));
                    }
                    offset += pc;
                }
            }
            Op::ConcatBatch(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[0];
                    if self.ng(p) {
                        self.accum(grads, p, g.slice_outer(start, len));
                    }
                    start += len;
                }
            }
            Op::SliceBatch(a, start) => {
                if self.ng(*a) {
                    let full = self.value(*a);
                    let inner: usize = full.shape()[1..].iter().product();
                    let mut d = Tensor::zeros(full.shape());
                    d.data_mut()[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                    self.accum(grads, *a, d);
                }
            }
            Op::Gap(a) => {
                let (n, c, h, w) = self.value(*a).dims4();
                let hw = h * w;
                let inv = T::one() / T::from_usize(hw).unwrap();
                let mut d = Vec::with_capacity(n * c * hw);
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, hw));
                }
                self.accum(grads, *a, Tensor::from_vec(&[n, c, h, w], d));
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let gd = g.data();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (i, (&dy, &xh)) in gd.iter().zip(xhat).enumerate() {
                        let ch = (i / hw) % c;
                        dg[ch] += dy * xh;
                        db[ch] += dy;
                    }
                    self.accum(grads, *gamma, Tensor::from_vec(&[c], dg));
                    self.accum(grads, *beta, Tensor::from_vec(&[c], db));
                }
                if self.ng(*x) {
                    // dx = inv_std * (dxh - mean(dxh) - xhat * mean(dxh * xhat)) per group
                    let gamma_v = self.value(*gamma).data();
                    let span = (c / groups) * hw;
                    let mut dx = vec![T::zero(); n * c * hw];
                    for (blk, &inv) in inv_std.iter().enumerate() {
                        let base = blk * span;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for i in base..base + span {
                            let dxh = (gd[i] * gamma_v[(i / hw) % c]).to_f64_lossy();
                            s1 += dxh;
                            s2 += dxh * xhat[i].to_f64_lossy();
                        }
                        let (m1, m2) = (s1 / span as f64, s2 / span as f64);
                        for i in base..base + span {
                            let dxh = (gd[i] * gamma_v[(i / hw) % c]).to_f64_lossy();
                            dx[i] = inv * T::c(dxh - m1 - xhat[i].to_f64_lossy() * m2);
                        }
                    }
                    self.accum(grads, *x, Tensor::from_vec(&[n, c, h, w], dx));
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = self.value(*x).dims2();
                let (o, _) = self.value(*w).dims2();
                if self.ng(*x) {
                    let mut dx = vec![T::zero(); n * i];
                    T::gemm(
                        n,
                        o,
                        i,
                        T::one(),
                        g.data(),
                        o as isize,
                        1,
                        self.value(*w).data(),
                        i as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        i as isize,
                        1,
                    );
                    self.accum(grads, *x, Tensor::from_vec(&[n, i], dx));
                }
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); o * i];
                    T::gemm(
                        o,
                        n,
                        i,
                        T::one(),
                        g.data(),
                        1,
                        o as isize,
                        self.value(*x).data(),
                        i as isize,
                        1,
                        T::zero(),
                        &mut dw,
                        i as isize,
                        1,
                    );
                    self.accum(grads, *w, Tensor::from_vec(&[o, i], dw));
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accum(grads, *b, Tensor::from_vec(&[o], db));
                }
            }
            Op::SampleMean(a) => {
                let shape = self.value(*a).shape().to_vec();
                let inner: usize = shape[1..].iter().product();
                let inv = T::one() / T::from_usize(inner).unwrap();
                let mut d = Vec::with_capacity(shape.iter().product());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * inv, inner));
                }
                self.accum(grads, *a, Tensor::from_vec(&shape, d));
            }
            Op::MeanLog { p, eps, complement } => {
                let gv = g.item();
                let t = self.value(*p);
                let n = T::from_usize(t.numel()).unwrap();
                let hi = T::one() - *eps;
                let d = t.map(|x| {
                    if x < *eps || x > hi {
                        T::zero()
                    } else if *complement {
                        -gv / ((T::one() - x) * n)
                    } else {
                        gv / (x * n)
                    }
                });
                self.accum(grads, *p, d);
            }
            Op::L1Mean(a, b) => {
                let gv = g.item();
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = T::from_usize(ta.numel()).unwrap();
                let sign: Vec<T> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| {
                        let diff = x - y;
                        if diff > T::zero() {
                            gv / n
                        } else if diff < T::zero() {
                            -gv / n
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.ng(*b) {
                    let neg = sign.iter().map(|&s| -s).collect();
                    self.accum(grads, *b, Tensor::from_vec(tb.shape(), neg));
                }
                self.accum(grads, *a, Tensor::from_vec(ta.shape(), sign));
            }
            Op::SoftmaxXent { logits, labels, mask, probs, count } => {
                let (n, k) = self.value(*logits).dims2();
                let scale = g.item() / T::from_usize(*count).unwrap();
                let mut d = vec![T::zero(); n * k];
                for r in (0..n).filter(|&r| mask[r]) {
                    for c in 0..k {
                        let onehot = if c == labels[r] { T::one() } else { T::zero() };
                        d[r * k + c] = (probs[r * k + c] - onehot) * scale;
                    }
                }
                self.accum(grads, *logits, Tensor::from_vec(&[n, k], d));
            }
            Op::Triplet { u, picks, count } => {
                let t = self.value(*u);
                let (n, dim) = t.dims2();
                let data = t.data();
                let scale = g.item() / T::from_usize(*count).unwrap();
                let mut d = vec![T::zero(); n * dim];
                // d(dist(a,b))/du_a = (u_a - u_b) / dist
                let mut push_pair = |a: usize, b: usize, dist: f64, sign: T| {
                    if dist <= 1e-12 {
                        return;
                    }
                    let inv = sign * scale / T::c(dist);
                    for c in 0..dim {
                        let diff = (data[a * dim + c] - data[b * dim + c]) * inv;
                        d[a * dim + c] += diff;
                        d[b * dim + c] -= diff;
                    }
                };
                for pk in picks {
                    push_pair(pk.anchor, pk.pos, pk.d_pos, T::one());
                    push_pair(pk.anchor, pk.neg, pk.d_neg, -T::one());
                }
                self.accum(grads, *u, Tensor::from_vec(&[n, dim], d));
            }
            Op::WeightedSum(terms) => {
                let gv = g.item();
                for &(v, w) in terms {
                    if w != T::zero() {
                        self.accum(grads, v, Tensor::scalar(gv * w));
                    }
                }
            }
        }
    }
}
