//! Adaptive factorized modulation.
//!
//! A frozen convolution kernel `F` of shape `(c_out, c_in, k, k)` is viewed
//! as a `(c_out·k, c_in·k)` matrix and multiplied elementwise by a per-task
//! mask `sigmoid(U·V)` with `U: (c_out·k, r)` and `V: (r, c_in·k)`. Only `U`
//! and `V` are trained for an incremental task.
//!
//! Layout of the matrix view: element `(o, i, a, b)` of the kernel sits at
//! row `o·k + a`, column `i·k + b`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, sigmoid, Tensor};

/// Standard deviation of the Gaussian used for freshly initialized `U`.
pub const U_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerDims {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

impl LayerDims {
    pub fn new(c_out: usize, c_in: usize, k: usize) -> Self {
        Self { c_out, c_in, k }
    }

    pub fn matrix_shape(&self) -> (usize, usize) {
        (self.c_out * self.k, self.c_in * self.k)
    }

    pub fn max_rank(&self) -> usize {
        let (r, c) = self.matrix_shape();
        r.min(c)
    }

    pub fn weight_count(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    fn check_rank(&self, rank: usize) -> Result<()> {
        if rank == 0 || rank > self.max_rank() {
            return Err(Error::InvalidRank {
                rank,
                max: self.max_rank(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseConvWeights {
    weights: Tensor,
    frozen: bool,
}

impl BaseConvWeights {
    pub fn new(weights: Tensor) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 4 || s.contains(&0) || s[2] != s[3] {
            return Err(Error::Shape(format!(
                "base conv weights must be (c_out, c_in, k, k) with positive dims, got {s:?}"
            )));
        }
        Ok(Self {
            weights,
            frozen: false,
        })
    }

    pub fn dims(&self) -> LayerDims {
        let s = self.weights.shape();
        LayerDims::new(s[0], s[1], s[2])
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Mutable access for base-task training. Fails once frozen.
    pub fn weights_mut(&mut self) -> Result<&mut Tensor> {
        if self.frozen {
            return Err(Error::InvalidArgument("base weights are frozen".into()));
        }
        Ok(&mut self.weights)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModulationFactors {
    u: Tensor,
    v: Tensor,
}

impl ModulationFactors {
    pub fn new(u: Tensor, v: Tensor) -> Result<Self> {
        if u.ndim() != 2 || v.ndim() != 2 || u.shape()[1] != v.shape()[0] {
            return Err(Error::Shape(format!(
                "U {:?} and V {:?} do not conform",
                u.shape(),
                v.shape()
            )));
        }
        let rank = u.shape()[1];
        let max = u.shape()[0].min(v.shape()[1]);
        if rank == 0 || rank > max {
            return Err(Error::InvalidRank { rank, max });
        }
        Ok(Self { u, v })
    }

    pub fn rank(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn u(&self) -> &Tensor {
        &self.u
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn u_mut(&mut self) -> &mut Tensor {
        &mut self.u
    }

    pub fn v_mut(&mut self) -> &mut Tensor {
        &mut self.v
    }

    pub fn mask_shape(&self) -> (usize, usize) {
        (self.u.shape()[0], self.v.shape()[1])
    }

    pub fn param_count(&self) -> usize {
        self.u.len() + self.v.len()
    }

    /// Pre-activation `U·V` as a flat row-major buffer.
    fn logits(&self) -> Vec<f64> {
        let (m, n) = self.mask_shape();
        let r = self.rank();
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            r,
            n,
            self.u.data(),
            r,
            1,
            self.v.data(),
            n,
            1,
            &mut out,
            n,
            false,
        );
        out
    }
}

/// Matrix view `(c_out·k, c_in·k)` of a 4-axis kernel.
pub fn reshape_base(w: &Tensor) -> Result<Tensor> {
    let s = w.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Shape(format!(
            "expected (c_out, c_in, k, k), got {s:?}"
        )));
    }
    let (c_out, c_in, k) = (s[0], s[1], s[2]);
    let cols = c_in * k;
    let mut out = vec![0.0; w.len()];
    let src = w.data();
    for o in 0..c_out {
        for i in 0..c_in {
            for a in 0..k {
                for b in 0..k {
                    out[(o * k + a) * cols + i * k + b] = src[((o * c_in + i) * k + a) * k + b];
                }
            }
        }
    }
    Tensor::new(vec![c_out * k, cols], out)
}

/// Inverse of [`reshape_base`].
pub fn unreshape_base(m: &Tensor, dims: LayerDims) -> Result<Tensor> {
    let (rows, cols) = dims.matrix_shape();
    if m.shape() != [rows, cols] {
        return Err(Error::Shape(format!(
            "matrix {:?} does not match layer {dims:?}",
            m.shape()
        )));
    }
    let LayerDims { c_out, c_in, k } = dims;
    let mut out = vec![0.0; m.len()];
    let src = m.data();
    for o in 0..c_out {
        for i in 0..c_in {
            for a in 0..k {
                for b in 0..k {
                    out[((o * c_in + i) * k + a) * k + b] = src[(o * k + a) * cols + i * k + b];
                }
            }
        }
    }
    Tensor::new(vec![c_out, c_in, k, k], out)
}

/// `sigmoid(U·V)`. Entries lie in the open interval (0, 1) as long as the
/// logits stay within the range where `f64` can represent the sigmoid
/// without rounding to an endpoint (|logit| below roughly 36).
pub fn modulation_mask(m: &ModulationFactors) -> Tensor {
    let (rows, cols) = m.mask_shape();
    let mut logits = m.logits();
    for v in &mut logits {
        *v = sigmoid(*v);
    }
    Tensor::new(vec![rows, cols], logits).expect("mask shape")
}

fn check_conform(w: &Tensor, m: &ModulationFactors) -> Result<LayerDims> {
    let s = w.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Shape(format!(
            "expected (c_out, c_in, k, k), got {s:?}"
        )));
    }
    let dims = LayerDims::new(s[0], s[1], s[2]);
    if dims.matrix_shape() != m.mask_shape() {
        return Err(Error::Shape(format!(
            "mask {:?} does not match reshaped kernel {:?}",
            m.mask_shape(),
            dims.matrix_shape()
        )));
    }
    Ok(dims)
}

/// Effective kernel `unreshape(reshape(W) ⊙ sigmoid(U·V))`.
pub fn apply_modulation(w: &Tensor, m: &ModulationFactors) -> Result<Tensor> {
    check_conform(w, m)?;
    apply_mask(w, &modulation_mask(m))
}

/// `unreshape(reshape(W) ⊙ mask)` for a precomputed mask.
pub(crate) fn apply_mask(w: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let mut out = w.clone();
    for_each_masked(w.shape(), |flat, m| out.data_mut()[flat] *= mask.data()[m]);
    Ok(out)
}

/// Visit every kernel entry in storage order together with its position in
/// the reshaped matrix view.
fn for_each_masked(shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let (c_out, c_in, k) = (shape[0], shape[1], shape[2]);
    let cols = c_in * k;
    let mut flat = 0;
    for o in 0..c_out {
        for i in 0..c_in {
            for a in 0..k {
                let row = (o * k + a) * cols + i * k;
                for b in 0..k {
                    f(flat, row + b);
                    flat += 1;
                }
            }
        }
    }
}

/// Gradients of a scalar loss with respect to `U` and `V`, given the
/// gradient `d_eff` with respect to the effective kernel.
pub fn apply_modulation_backward(
    w: &Tensor,
    m: &ModulationFactors,
    d_eff: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_conform(w, m)?;
    modulation_backward_masked(w, m, &modulation_mask(m), d_eff)
}

/// [`apply_modulation_backward`] reusing the mask from the forward pass.
pub(crate) fn modulation_backward_masked(
    w: &Tensor,
    m: &ModulationFactors,
    mask: &Tensor,
    d_eff: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let dims = check_conform(w, m)?;
    if d_eff.shape() != w.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} vs kernel {:?}",
            d_eff.shape(),
            w.shape()
        )));
    }
    let (rows, cols) = dims.matrix_shape();
    let r = m.rank();
    // d logits = d_eff ⊙ W ⊙ σ'(logits)
    let mut d_logits = vec![0.0; rows * cols];
    let (wd, dd, md) = (w.data(), d_eff.data(), mask.data());
    for_each_masked(w.shape(), |flat, m| {
        let s = md[m];
        d_logits[m] = dd[flat] * wd[flat] * s * (1.0 - s);
    });
    let mut du = vec![0.0; rows * r];
    let mut dv = vec![0.0; r * cols];
    // dU = dL · Vᵀ
    gemm(
        rows,
        cols,
        r,
        &d_logits,
        cols,
        1,
        m.v.data(),
        1,
        cols,
        &mut du,
        r,
        false,
    );
    // dV = Uᵀ · dL
    gemm(
        r,
        rows,
        cols,
        m.u.data(),
        1,
        r,
        &d_logits,
        cols,
        1,
        &mut dv,
        cols,
        false,
    );
    Ok((
        Tensor::new(vec![rows, r], du)?,
        Tensor::new(vec![r, cols], dv)?,
    ))
}

/// Trainable parameters added per task by modulating `layers` at rank `r`.
pub fn modulation_param_count(layers: &[LayerDims], r: usize) -> usize {
    layers
        .iter()
        .map(|d| r * (d.c_out * d.k + d.c_in * d.k))
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskModulationSet {
    pub task_id: u32,
    pub layer_masks: BTreeMap<String, ModulationFactors>,
    pub frozen: bool,
}

impl TaskModulationSet {
    pub fn param_count(&self) -> usize {
        self.layer_masks
            .values()
            .map(ModulationFactors::param_count)
            .sum()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Deep copy under a new id, unfrozen.
    pub fn clone_as(&self, task_id: u32) -> Self {
        Self {
            task_id,
            layer_masks: self.layer_masks.clone(),
            frozen: false,
        }
    }
}

/// Fresh modulation for `layers`: `U ~ N(0, 0.01²)`, `V = 0`, so every mask
/// starts at exactly 0.5.
pub fn init_modulation(
    task_id: u32,
    layers: &[(String, LayerDims)],
    rank: usize,
    seed: u64,
) -> Result<TaskModulationSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer_masks = BTreeMap::new();
    for (id, dims) in layers {
        dims.check_rank(rank)?;
        let (rows, cols) = dims.matrix_shape();
        let u = Tensor::randn(&[rows, rank], U_INIT_STD, &mut rng);
        let v = Tensor::zeros(&[rank, cols]);
        layer_masks.insert(id.clone(), ModulationFactors::new(u, v)?);
    }
    Ok(TaskModulationSet {
        task_id,
        layer_masks,
        frozen: false,
    })
}
