//! Reverse-mode automatic differentiation over a per-step tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are parameters
//! or inputs; every other node records the op that produced it along with
//! whatever it needs for the backward sweep. Nodes whose inputs never
//! require gradients are skipped during backward, which is how frozen
//! weights and detached images cost nothing on the way back.

use crate::afm::{self, ModulationFactors};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Project {
        z: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        cols: Vec<f64>,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Tanh {
        x: NodeId,
    },
    Upsample2 {
        x: NodeId,
    },
    AvgPool2 {
        x: NodeId,
    },
    InstanceNorm {
        x: NodeId,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Modulate {
        base: NodeId,
        u: NodeId,
        v: NodeId,
        mask: Tensor,
    },
    Sum {
        x: NodeId,
    },
    ScalarLoss {
        parts: Vec<(NodeId, Tensor)>,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn dims4(t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        &[b, c, h, w] => Ok((b, c, h, w)),
        s => Err(Error::Shape(format!(
            "expected 4-axis activation, got {s:?}"
        ))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// `x·wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (&[batch, fin], &[fout, win]) = (xv.shape(), wv.shape()) else {
            return Err(Error::Shape(format!(
                "linear {:?} x {:?}",
                xv.shape(),
                wv.shape()
            )));
        };
        if fin != win || bv.shape() != [fout] {
            return Err(Error::Shape(format!(
                "linear input {:?}, weight {:?}, bias {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; batch * fout];
        gemm(
            batch,
            fin,
            fout,
            xv.data(),
            fin,
            1,
            wv.data(),
            1,
            fin,
            &mut out,
            fout,
            false,
        );
        for row in out.chunks_mut(fout) {
            for (o, bias) in row.iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        let value = Tensor::new(vec![batch, fout], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Latent projection `out[b, o, y, x] = Σ_i w[o, i, y, x]·z[b, i] + bias[o]`:
    /// a `k×k` transposed convolution applied to a `1×1` input.
    pub fn project(&mut self, z: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (zv, wv, bv) = (self.value(z), self.value(w), self.value(b));
        let (&[batch, zin], &[o_ch, w_in, k, k2]) = (zv.shape(), wv.shape()) else {
            return Err(Error::Shape(format!(
                "project {:?} x {:?}",
                zv.shape(),
                wv.shape()
            )));
        };
        if zin != w_in || k != k2 || bv.shape() != [o_ch] {
            return Err(Error::Shape(format!(
                "project latent {:?}, weight {:?}, bias {:?}",
                zv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let kk = k * k;
        let mut out = vec![0.0; batch * o_ch * kk];
        for o in 0..o_ch {
            let w_o = &wv.data()[o * zin * kk..];
            gemm(
                batch,
                zin,
                kk,
                zv.data(),
                zin,
                1,
                w_o,
                kk,
                1,
                &mut out[o * kk..],
                o_ch * kk,
                false,
            );
        }
        for sample in out.chunks_mut(o_ch * kk) {
            for (o, ch) in sample.chunks_mut(kk).enumerate() {
                let bias = bv.data()[o];
                ch.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::new(vec![batch, o_ch, k, k], out)?;
        Ok(self.push(value, Op::Project { z, w, b }, &[z, w, b]))
    }

    /// Stride-1 convolution with `k/2` zero padding (odd `k` keeps size).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (batch, c_in, h, wd) = dims4(self.value(x))?;
        let (o_ch, w_in, k, k2) = dims4(self.value(w))?;
        if c_in != w_in || k != k2 || k % 2 == 0 || self.value(b).shape() != [o_ch] {
            return Err(Error::Shape(format!(
                "conv input {:?}, weight {:?}, bias {:?}",
                self.value(x).shape(),
                self.value(w).shape(),
                self.value(b).shape()
            )));
        }
        let hw = h * wd;
        let ckk = c_in * k * k;
        let cols = im2col(self.value(x).data(), batch, c_in, h, wd, k);
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * o_ch * hw];
        for n in 0..batch {
            let dst = &mut out[n * o_ch * hw..(n + 1) * o_ch * hw];
            gemm(
                o_ch,
                ckk,
                hw,
                wv,
                ckk,
                1,
                &cols[n * ckk * hw..],
                hw,
                1,
                dst,
                hw,
                false,
            );
            for (o, ch) in dst.chunks_mut(hw).enumerate() {
                let bias = bv[o];
                ch.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::new(vec![batch, o_ch, h, wd], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, cols }, &[x, w, b]))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(value, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh { x }, &[x])
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = dims4(self.value(x))?;
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; b * c * h2 * w2];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
            for y in 0..h2 {
                let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
                for xx in 0..w2 {
                    dst[y * w2 + xx] = row[xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h2, w2], out)?;
        Ok(self.push(value, Op::Upsample2 { x }, &[x]))
    }

    /// 2×2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = dims4(self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "avg_pool2 needs even spatial dims, got {h}x{w}"
            )));
        }
        let src = self.value(x).data();
        let (h2, w2) = (h / 2, w / 2);
        let mut out = vec![0.0; b * c * h2 * w2];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
            for y in 0..h2 {
                for xx in 0..w2 {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * w2 + xx] =
                        0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![b, c, h2, w2], out)?;
        Ok(self.push(value, Op::AvgPool2 { x }, &[x]))
    }

    /// Per-sample, per-channel normalization over spatial positions, with no
    /// running statistics.
    pub fn instance_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let (b, c, h, w) = dims4(self.value(x))?;
        let hw = (h * w) as f64;
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(b * c);
        for plane in out.chunks_mut(h * w) {
            let mean = plane.iter().sum::<f64>() / hw;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
            let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            plane.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(value, Op::InstanceNorm { x, inv_std }, &[x]))
    }

    /// `x·gamma[c] + beta[c]` on a 4-axis activation.
    pub fn channel_affine(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (_, c, h, w) = dims4(self.value(x))?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape(format!("channel affine over {c} channels")));
        }
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).data().to_vec();
        for (i, plane) in out.chunks_mut(h * w).enumerate() {
            let ch = i % c;
            plane.iter_mut().for_each(|v| *v = *v * g[ch] + bt[ch]);
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::ChannelAffine { x, gamma, beta },
            &[x, gamma, beta],
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Effective kernel from a base kernel node and modulation factors.
    pub fn modulate(&mut self, base: NodeId, u: NodeId, v: NodeId) -> Result<NodeId> {
        if self.requires_grad(base) {
            return Err(Error::InvalidArgument(
                "modulated base kernel must not require gradients".into(),
            ));
        }
        let factors = ModulationFactors::new(self.value(u).clone(), self.value(v).clone())?;
        let mask = afm::modulation_mask(&factors);
        let value = afm::apply_mask(self.value(base), &mask)?;
        Ok(self.push(value, Op::Modulate { base, u, v, mask }, &[base, u, v]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    /// A scalar computed outside the tape, together with its gradient with
    /// respect to each input node.
    pub fn scalar_loss(&mut self, value: f64, parts: Vec<(NodeId, Tensor)>) -> Result<NodeId> {
        for (id, g) in &parts {
            if g.shape() != self.value(*id).shape() {
                return Err(Error::Shape(format!(
                    "local gradient {:?} vs node {:?}",
                    g.shape(),
                    self.value(*id).shape()
                )));
            }
        }
        let inputs: Vec<NodeId> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::scalar(value), Op::ScalarLoss { parts }, &inputs))
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let value = terms.iter().map(|(id, w)| w * self.value(*id).item()).sum();
        let inputs: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(value), Op::WeightedSum { terms }, &inputs)
    }

    /// Backpropagate from `root`. With `seed = None` the root must be a
    /// scalar and is seeded with 1.
    pub fn backward(&self, root: NodeId, seed: Option<Tensor>) -> Result<Grads> {
        let seed = match seed {
            Some(s) => {
                if s.shape() != self.value(root).shape() {
                    return Err(Error::Shape("backward seed shape".into()));
                }
                s
            }
            None => {
                if self.value(root).len() != 1 {
                    return Err(Error::Shape(
                        "backward from a non-scalar without a seed".into(),
                    ));
                }
                Tensor::full(self.value(root).shape(), 1.0)
            }
        };
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(dy);
                continue;
            }
            self.backward_node(node, &dy, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if self.wants(*x) {
                    let mut dx = vec![0.0; batch * fin];
                    gemm(
                        batch,
                        fout,
                        fin,
                        dy.data(),
                        fout,
                        1,
                        wv.data(),
                        fin,
                        1,
                        &mut dx,
                        fin,
                        false,
                    );
                    accumulate(grads, *x, Tensor::new(vec![batch, fin], dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; fout * fin];
                    gemm(
                        fout,
                        batch,
                        fin,
                        dy.data(),
                        1,
                        fout,
                        xv.data(),
                        fin,
                        1,
                        &mut dw,
                        fin,
                        false,
                    );
                    accumulate(grads, *w, Tensor::new(vec![fout, fin], dw)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; fout];
                    for row in dy.data().chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    accumulate(grads, *b, Tensor::new(vec![fout], db)?);
                }
            }
            Op::Project { z, w, b } => {
                let (zv, wv) = (self.value(*z), self.value(*w));
                let (batch, zin) = (zv.shape()[0], zv.shape()[1]);
                let (o_ch, k) = (wv.shape()[0], wv.shape()[2]);
                let kk = k * k;
                let d = dy.data();
                if self.wants(*z) {
                    let mut dz = vec![0.0; batch * zin];
                    for o in 0..o_ch {
                        let w_o = &wv.data()[o * zin * kk..];
                        gemm(
                            batch,
                            kk,
                            zin,
                            &d[o * kk..],
                            o_ch * kk,
                            1,
                            w_o,
                            1,
                            kk,
                            &mut dz,
                            zin,
                            true,
                        );
                    }
                    accumulate(grads, *z, Tensor::new(vec![batch, zin], dz)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; o_ch * zin * kk];
                    for o in 0..o_ch {
                        gemm(
                            zin,
                            batch,
                            kk,
                            zv.data(),
                            1,
                            zin,
                            &d[o * kk..],
                            o_ch * kk,
                            1,
                            &mut dw[o * zin * kk..],
                            kk,
                            false,
                        );
                    }
                    accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; o_ch];
                    for sample in d.chunks(o_ch * kk) {
                        for (o, ch) in sample.chunks(kk).enumerate() {
                            db[o] += ch.iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![o_ch], db)?);
                }
            }
            Op::Conv2d { x, w, b, cols } => {
                let (batch, c_in, h, wd) = dims4(self.value(*x))?;
                let wv = self.value(*w);
                let (o_ch, k) = (wv.shape()[0], wv.shape()[2]);
                let hw = h * wd;
                let ckk = c_in * k * k;
                let d = dy.data();
                if self.wants(*w) {
                    let mut dw = vec![0.0; o_ch * ckk];
                    for n in 0..batch {
                        gemm(
                            o_ch,
                            hw,
                            ckk,
                            &d[n * o_ch * hw..],
                            hw,
                            1,
                            &cols[n * ckk * hw..],
                            1,
                            hw,
                            &mut dw,
                            ckk,
                            n > 0,
                        );
                    }
                    accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; o_ch];
                    for sample in d.chunks(o_ch * hw) {
                        for (o, ch) in sample.chunks(hw).enumerate() {
                            db[o] += ch.iter().sum::<f64>();
                        }
                    }
                    accumulate(grads, *b, Tensor::new(vec![o_ch], db)?);
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; ckk * hw];
                    let mut dx = vec![0.0; batch * c_in * hw];
                    for n in 0..batch {
                        gemm(
                            ckk,
                            o_ch,
                            hw,
                            wv.data(),
                            1,
                            ckk,
                            &d[n * o_ch * hw..],
                            hw,
                            1,
                            &mut dcols,
                            hw,
                            false,
                        );
                        col2im_add(
                            &dcols,
                            &mut dx[n * c_in * hw..(n + 1) * c_in * hw],
                            c_in,
                            h,
                            wd,
                            k,
                        );
                    }
                    accumulate(grads, *x, Tensor::new(vec![batch, c_in, h, wd], dx)?);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let dx: Vec<f64> = dy
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                    .collect();
                accumulate(grads, *x, Tensor::new(dy.shape().to_vec(), dx)?);
            }
            Op::Tanh { x } => {
                let dx: Vec<f64> = dy
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                accumulate(grads, *x, Tensor::new(dy.shape().to_vec(), dx)?);
            }
            Op::Upsample2 { x } => {
                let (b, c, h, w) = dims4(self.value(*x))?;
                let w2 = 2 * w;
                let mut dx = vec![0.0; b * c * h * w];
                for (g, dst) in dy.data().chunks(4 * h * w).zip(dx.chunks_mut(h * w)) {
                    for y in 0..2 * h {
                        for xx in 0..w2 {
                            dst[(y / 2) * w + xx / 2] += g[y * w2 + xx];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![b, c, h, w], dx)?);
            }
            Op::AvgPool2 { x } => {
                let (b, c, h, w) = dims4(self.value(*x))?;
                let (h2, w2) = (h / 2, w / 2);
                let mut dx = vec![0.0; b * c * h * w];
                for (g, dst) in dy.data().chunks(h2 * w2).zip(dx.chunks_mut(h * w)) {
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = 0.25 * g[(y / 2) * w2 + xx / 2];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(vec![b, c, h, w], dx)?);
            }
            Op::InstanceNorm { x, inv_std } => {
                let hw = {
                    let s = dy.shape();
                    s[2] * s[3]
                };
                let n = hw as f64;
                let mut dx = vec![0.0; dy.len()];
                for (((g, xh), dst), inv) in dy
                    .data()
                    .chunks(hw)
                    .zip(node.value.data().chunks(hw))
                    .zip(dx.chunks_mut(hw))
                    .zip(inv_std)
                {
                    let mean_g = g.iter().sum::<f64>() / n;
                    let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, gi), xi) in dst.iter_mut().zip(g).zip(xh) {
                        *d = inv * (gi - mean_g - xi * mean_gx);
                    }
                }
                accumulate(grads, *x, Tensor::new(dy.shape().to_vec(), dx)?);
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let (_, c, h, w) = dims4(dy)?;
                let hw = h * w;
                let g = self.value(*gamma).data();
                if self.wants(*x) {
                    let mut dx = dy.data().to_vec();
                    for (i, plane) in dx.chunks_mut(hw).enumerate() {
                        let s = g[i % c];
                        plane.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(grads, *x, Tensor::new(dy.shape().to_vec(), dx)?);
                }
                if self.wants(*gamma) || self.wants(*beta) {
                    let xv = self.value(*x).data();
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (i, (gp, xp)) in dy.data().chunks(hw).zip(xv.chunks(hw)).enumerate() {
                        db[i % c] += gp.iter().sum::<f64>();
                        dg[i % c] += gp.iter().zip(xp).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if self.wants(*gamma) {
                        accumulate(grads, *gamma, Tensor::new(vec![c], dg)?);
                    }
                    if self.wants(*beta) {
                        accumulate(grads, *beta, Tensor::new(vec![c], db)?);
                    }
                }
            }
            Op::Reshape { x } => {
                let dx = dy.clone().reshape(self.value(*x).shape())?;
                accumulate(grads, *x, dx);
            }
            Op::Modulate { base, u, v, mask } => {
                let factors =
                    ModulationFactors::new(self.value(*u).clone(), self.value(*v).clone())?;
                let (du, dv) =
                    afm::modulation_backward_masked(self.value(*base), &factors, mask, dy)?;
                if self.wants(*u) {
                    accumulate(grads, *u, du);
                }
                if self.wants(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::Sum { x } => {
                let g = dy.item();
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::ScalarLoss { parts } => {
                let g = dy.item();
                for (id, local) in parts {
                    if self.wants(*id) {
                        accumulate(grads, *id, local.clone().scale(g));
                    }
                }
            }
            Op::WeightedSum { terms } => {
                let g = dy.item();
                for (id, w) in terms {
                    if self.wants(*id) {
                        accumulate(grads, *id, Tensor::scalar(g * w));
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Patch matrix laid out per sample as `[c·k·k, h·w]`.
fn im2col(x: &[f64], batch: usize, c_in: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let p = (k / 2) as isize;
    let mut cols = vec![0.0; batch * c_in * k * k * hw];
    for n in 0..batch {
        for c in 0..c_in {
            let plane = &x[(n * c_in + c) * hw..(n * c_in + c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[(n * c_in * k * k + row) * hw..][..hw];
                    let dx = kx as isize - p;
                    for y in 0..h {
                        let iy = y as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let out = &mut dst[y * w..(y + 1) * w];
                        let x0 = (-dx).max(0) as usize;
                        let x1 = (w as isize - dx).min(w as isize) as usize;
                        if x0 < x1 {
                            let s0 = (x0 as isize + dx) as usize;
                            out[x0..x1].copy_from_slice(&src[s0..s0 + (x1 - x0)]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], dx: &mut [f64], c_in: usize, h: usize, w: usize, k: usize) {
    let hw = h * w;
    let p = (k / 2) as isize;
    for c in 0..c_in {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dxo = kx as isize - p;
                for y in 0..h {
                    let iy = y as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x0 = (-dxo).max(0) as usize;
                    let x1 = (w as isize - dxo).min(w as isize) as usize;
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s = &src[y * w..(y + 1) * w];
                    for xx in x0..x1 {
                        dst[(xx as isize + dxo) as usize] += s[xx];
                    }
                }
            }
        }
    }
}
