//! Reverse-mode autodiff tape.
//!
//! Ops are recorded in execution order during the forward pass; `backward`
//! walks the record once in reverse and accumulates gradients into every
//! node that requires them. A tape supports exactly one backward pass.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, ConvDims};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f32 = 1e-8;
pub const JACCARD_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Conv2d { x: NodeId, w: NodeId, b: NodeId, dims: ConvDims },
    Relu { x: NodeId },
    SoftmaxCh { x: NodeId },
    Upsample { x: NodeId, factor: usize },
    GridSample { x: NodeId, flow: Tensor },
    ConcatCh { parts: Vec<NodeId> },
    Crop { x: NodeId, top: usize, left: usize },
    Sum { x: NodeId },
    Mul { a: NodeId, b: NodeId },
    NllWeighted { prob: NodeId, target: Vec<u32>, weights: Vec<f32> },
    SoftJaccard { prob: NodeId, target: Vec<u32>, classes: Vec<usize> },
    CombineLoss { h: NodeId, j: NodeId, w_h: f32, w_logj: f32 },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn value_scalar(&self, id: NodeId) -> Result<f32> {
        self.nodes[id.0].value.item()
    }

    /// Gradient of the last backward pass w.r.t. this node, if any.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Registers a tensor on the tape. Parameters pass `requires_grad =
    /// true`; network inputs (frames, flows, depths) pass `false`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let dims = kernels::conv2d_dims(
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
            stride,
            pad,
        )?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &dims,
        );
        let value = Tensor::from_vec(vec![dims.cout, dims.oh, dims.ow], out)?;
        let rq = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(value, rq, Op::Conv2d { x, w, b, dims }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::from_vec(
            self.value(x).shape().to_vec(),
            kernels::relu_forward(self.value(x).data()),
        )
        .expect("relu preserves shape");
        let rq = self.requires(x);
        self.push(value, rq, Op::Relu { x })
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        if c < 2 {
            return Err(Error::Shape(format!("softmax_channels needs C >= 2, got {c}")));
        }
        let y = kernels::softmax_channels_forward(self.value(x).data(), c, h * w);
        let value = Tensor::from_vec(vec![c, h, w], y)?;
        let rq = self.requires(x);
        Ok(self.push(value, rq, Op::SoftmaxCh { x }))
    }

    pub fn bilinear_upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        if factor < 1 {
            return Err(Error::Shape("upsample factor must be >= 1".into()));
        }
        let (c, h, w) = self.value(x).chw()?;
        let y = kernels::bilinear_upsample_forward(self.value(x).data(), c, h, w, factor);
        let value = Tensor::from_vec(vec![c, h * factor, w * factor], y)?;
        let rq = self.requires(x);
        Ok(self.push(value, rq, Op::Upsample { x, factor }))
    }

    /// Backward warp of `x` by a pixel-displacement flow map. The flow is a
    /// plain tensor, not a node: it is treated as a constant and receives no
    /// gradient.
    pub fn grid_sample_flow(&mut self, x: NodeId, flow: &Tensor) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        let y = kernels::grid_sample_forward(self.value(x).data(), c, h, w, flow)?;
        let value = Tensor::from_vec(vec![c, h, w], y)?;
        let rq = self.requires(x);
        Ok(self.push(value, rq, Op::GridSample { x, flow: flow.clone() }))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_channels on empty list".into()));
        }
        let (_, h, w) = self.value(parts[0]).chw()?;
        let mut total_c = 0;
        for &p in parts {
            let (pc, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::Shape(format!(
                    "concat_channels spatial mismatch: {h}x{w} vs {ph}x{pw}"
                )));
            }
            total_c += pc;
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::from_vec(vec![total_c, h, w], data)?;
        let rq = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(value, rq, Op::ConcatCh { parts: parts.to_vec() }))
    }

    /// Spatial crop of a [C,H,W] node.
    pub fn crop(&mut self, x: NodeId, top: usize, left: usize, ch: usize, cw: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw()?;
        if top + ch > h || left + cw > w {
            return Err(Error::Shape(format!(
                "crop {ch}x{cw}+{top}+{left} exceeds {h}x{w}"
            )));
        }
        let mut data = Vec::with_capacity(c * ch * cw);
        for cc in 0..c {
            let plane = self.value(x).channel(cc);
            for y in top..top + ch {
                data.extend_from_slice(&plane[y * w + left..y * w + left + cw]);
            }
        }
        let value = Tensor::from_vec(vec![c, ch, cw], data)?;
        let rq = self.requires(x);
        Ok(self.push(value, rq, Op::Crop { x, top, left }))
    }

    /// Scalar sum of all elements (accumulated in f64).
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let rq = self.requires(x);
        self.push(Tensor::scalar(s as f32), rq, Op::Sum { x })
    }

    /// Elementwise product. `mul(x, x)` gives a square with the correct
    /// doubled gradient via accumulation.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "mul shape mismatch: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let rq = self.requires(a) || self.requires(b);
        Ok(self.push(value, rq, Op::Mul { a, b }))
    }

    /// Weighted per-pixel negative log-likelihood:
    /// H = sum_p w(t_p) * (-ln max(prob[t_p, p], clamp)) / sum_p w(t_p).
    pub fn nll_weighted(&mut self, prob: NodeId, target: &[u32], weights: &[f32]) -> Result<NodeId> {
        let (c, h, w) = self.value(prob).chw()?;
        if target.len() != h * w {
            return Err(Error::Shape(format!(
                "target has {} labels for a {h}x{w} map",
                target.len()
            )));
        }
        if weights.len() != c {
            return Err(Error::Shape(format!(
                "{} class weights for {c} channels",
                weights.len()
            )));
        }
        if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
            return Err(Error::Validation(format!(
                "target label {bad} out of range for {c} classes"
            )));
        }
        let plane = h * w;
        let data = self.value(prob).data();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (p, &t) in target.iter().enumerate() {
            let wt = weights[t as usize] as f64;
            let pv = data[t as usize * plane + p].max(PROB_CLAMP) as f64;
            num += wt * (-pv.ln());
            den += wt;
        }
        let hval = if den > 0.0 { num / den } else { 0.0 };
        let rq = self.requires(prob);
        Ok(self.push(
            Tensor::scalar(hval as f32),
            rq,
            Op::NllWeighted { prob, target: target.to_vec(), weights: weights.to_vec() },
        ))
    }

    /// Mean soft Jaccard over the given (keypoint) classes:
    /// J_c = (sum p_c g_c + eps) / (sum p_c + sum g_c - sum p_c g_c + eps).
    pub fn soft_jaccard(&mut self, prob: NodeId, target: &[u32], classes: &[usize]) -> Result<NodeId> {
        let (c, h, w) = self.value(prob).chw()?;
        if target.len() != h * w {
            return Err(Error::Shape(format!(
                "target has {} labels for a {h}x{w} map",
                target.len()
            )));
        }
        if classes.is_empty() || classes.iter().any(|&k| k == 0 || k >= c) {
            return Err(Error::Validation(format!(
                "keypoint classes {classes:?} must be non-empty, exclude background, and be < {c}"
            )));
        }
        let plane = h * w;
        let data = self.value(prob).data();
        let mut jsum = 0.0f64;
        for &k in classes {
            let pc = &data[k * plane..(k + 1) * plane];
            let mut inter = 0.0f64;
            let mut psum = 0.0f64;
            let mut gsum = 0.0f64;
            for (p, &t) in target.iter().enumerate() {
                let pv = pc[p] as f64;
                psum += pv;
                if t as usize == k {
                    gsum += 1.0;
                    inter += pv;
                }
            }
            jsum += (inter + JACCARD_EPS) / (psum + gsum - inter + JACCARD_EPS);
        }
        let j = jsum / classes.len() as f64;
        let rq = self.requires(prob);
        Ok(self.push(
            Tensor::scalar(j as f32),
            rq,
            Op::SoftJaccard { prob, target: target.to_vec(), classes: classes.to_vec() },
        ))
    }

    /// total = w_h * H - w_logj * ln(J), both inputs scalar.
    pub fn combine_loss(&mut self, h: NodeId, j: NodeId, w_h: f32, w_logj: f32) -> Result<NodeId> {
        let hv = self.value_scalar(h)? as f64;
        let jv = self.value_scalar(j)? as f64;
        if jv <= 0.0 {
            return Err(Error::Runtime(format!("Jaccard term {jv} is not positive")));
        }
        let total = w_h as f64 * hv - w_logj as f64 * jv.ln();
        let rq = self.requires(h) || self.requires(j);
        Ok(self.push(Tensor::scalar(total as f32), rq, Op::CombineLoss { h, j, w_h, w_logj }))
    }

    /// Runs the single reverse pass from a scalar loss, accumulating
    /// gradients into every requires-grad node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.spent {
            return Err(Error::Usage("tape already consumed by a backward pass".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let lv = self.nodes[loss.0].value.data()[0];
        if !lv.is_finite() {
            return Err(Error::Runtime(format!("non-finite loss {lv}")));
        }
        self.spent = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f32>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(i, &gy, &mut grads);
            self.nodes[i].grad = Some(gy);
        }
        Ok(())
    }

    fn ensure(&self, grads: &mut [Option<Vec<f32>>], id: NodeId) {
        if grads[id.0].is_none() {
            grads[id.0] = Some(vec![0.0; self.nodes[id.0].value.numel()]);
        }
    }

    fn apply_backward(&self, i: usize, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        // Pulls the node apart immutably; parent grads live in the separate
        // `grads` array so there is no aliasing with node values.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, dims } => {
                if self.requires(*x) {
                    self.ensure(grads, *x);
                    kernels::conv2d_backward_input(
                        gy,
                        self.nodes[w.0].value.data(),
                        dims,
                        grads[x.0].as_mut().unwrap(),
                    );
                }
                if self.requires(*w) {
                    self.ensure(grads, *w);
                    kernels::conv2d_backward_weight(
                        gy,
                        self.nodes[x.0].value.data(),
                        dims,
                        grads[w.0].as_mut().unwrap(),
                    );
                }
                if self.requires(*b) {
                    self.ensure(grads, *b);
                    kernels::conv2d_backward_bias(gy, dims, grads[b.0].as_mut().unwrap());
                }
            }
            Op::Relu { x } => {
                if self.requires(*x) {
                    self.ensure(grads, *x);
                    kernels::relu_backward(
                        self.nodes[i].value.data(),
                        gy,
                        grads[x.0].as_mut().unwrap(),
                    );
                }
            }
            Op::SoftmaxCh { x } => {
                if self.requires(*x) {
                    let (c, h, w) = self.nodes[i].value.chw().expect("softmax output is CHW");
                    self.ensure(grads, *x);
                    kernels::softmax_channels_backward(
                        self.nodes[i].value.data(),
                        gy,
                        c,
                        h * w,
                        grads[x.0].as_mut().unwrap(),
                    );
                }
            }
            Op::Upsample { x, factor } => {
                if self.requires(*x) {
                    let (c, h, w) = self.nodes[x.0].value.chw().expect("upsample input is CHW");
                    self.ensure(grads, *x);
                    kernels::bilinear_upsample_backward(
                        gy,
                        c,
                        h,
                        w,
                        *factor,
                        grads[x.0].as_mut().unwrap(),
                    );
                }
            }
            Op::GridSample { x, flow } => {
                if self.requires(*x) {
                    let (c, h, w) = self.nodes[x.0].value.chw().expect("warp input is CHW");
                    self.ensure(grads, *x);
                    kernels::grid_sample_backward(gy, c, h, w, flow, grads[x.0].as_mut().unwrap())
                        .expect("flow validated at forward time");
                }
            }
            Op::ConcatCh { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    if self.requires(p) {
                        self.ensure(grads, p);
                        let dst = grads[p.0].as_mut().unwrap();
                        for (d, g) in dst.iter_mut().zip(&gy[offset..offset + n]) {
                            *d += g;
                        }
                    }
                    offset += n;
                }
            }
            Op::Crop { x, top, left } => {
                if self.requires(*x) {
                    let (c, h, w) = self.nodes[x.0].value.chw().expect("crop input is CHW");
                    let (oc, oh, ow) = self.nodes[i].value.chw().expect("crop output is CHW");
                    debug_assert_eq!(c, oc);
                    self.ensure(grads, *x);
                    let dst = grads[x.0].as_mut().unwrap();
                    for cc in 0..c {
                        for y in 0..oh {
                            let src = (cc * oh + y) * ow;
                            let d0 = cc * h * w + (top + y) * w + left;
                            for xx in 0..ow {
                                dst[d0 + xx] += gy[src + xx];
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.requires(*x) {
                    self.ensure(grads, *x);
                    let g = gy[0];
                    for d in grads[x.0].as_mut().unwrap() {
                        *d += g;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    self.ensure(grads, *a);
                    let bv = self.nodes[b.0].value.data();
                    let dst = grads[a.0].as_mut().unwrap();
                    for k in 0..dst.len() {
                        dst[k] += gy[k] * bv[k];
                    }
                }
                if self.requires(*b) {
                    self.ensure(grads, *b);
                    let av = self.nodes[a.0].value.data();
                    let dst = grads[b.0].as_mut().unwrap();
                    for k in 0..dst.len() {
                        dst[k] += gy[k] * av[k];
                    }
                }
            }
            Op::NllWeighted { prob, target, weights } => {
                if self.requires(*prob) {
                    let (_, h, w) = self.nodes[prob.0].value.chw().expect("prob is CHW");
                    let plane = h * w;
                    let data = self.nodes[prob.0].value.data();
                    let den: f64 = target.iter().map(|&t| weights[t as usize] as f64).sum();
                    self.ensure(grads, *prob);
                    let dst = grads[prob.0].as_mut().unwrap();
                    if den > 0.0 {
                        let g = gy[0] as f64 / den;
                        for (p, &t) in target.iter().enumerate() {
                            let idx = t as usize * plane + p;
                            let pv = data[idx];
                            if pv > PROB_CLAMP {
                                dst[idx] += (-(weights[t as usize] as f64) * g / pv as f64) as f32;
                            }
                        }
                    }
                }
            }
            Op::SoftJaccard { prob, target, classes } => {
                if self.requires(*prob) {
                    let (_, h, w) = self.nodes[prob.0].value.chw().expect("prob is CHW");
                    let plane = h * w;
                    let data = self.nodes[prob.0].value.data();
                    self.ensure(grads, *prob);
                    let dst = grads[prob.0].as_mut().unwrap();
                    let gscale = gy[0] as f64 / classes.len() as f64;
                    for &k in classes {
                        let pc = &data[k * plane..(k + 1) * plane];
                        let mut inter = 0.0f64;
                        let mut psum = 0.0f64;
                        let mut gsum = 0.0f64;
                        for (p, &t) in target.iter().enumerate() {
                            let pv = pc[p] as f64;
                            psum += pv;
                            if t as usize == k {
                                gsum += 1.0;
                                inter += pv;
                            }
                        }
                        let nume = inter + JACCARD_EPS;
                        let deno = psum + gsum - inter + JACCARD_EPS;
                        let dd = deno * deno;
                        for (p, &t) in target.iter().enumerate() {
                            let gk = if t as usize == k { 1.0 } else { 0.0 };
                            let dj = (gk * deno - nume * (1.0 - gk)) / dd;
                            dst[k * plane + p] += (gscale * dj) as f32;
                        }
                    }
                }
            }
            Op::CombineLoss { h, j, w_h, w_logj } => {
                let g = gy[0];
                if self.requires(*h) {
                    self.ensure(grads, *h);
                    grads[h.0].as_mut().unwrap()[0] += g * w_h;
                }
                if self.requires(*j) {
                    self.ensure(grads, *j);
                    let jv = self.nodes[j.0].value.data()[0];
                    grads[j.0].as_mut().unwrap()[0] += -g * w_logj / jv;
                }
            }
        }
    }
}
