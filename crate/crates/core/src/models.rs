//! Toy conditional GAN.
//!
//! The generator is a latent projection to a `k×k` map followed by
//! upsample + conv blocks. Every convolution can be wrapped with per-task
//! factorized modulation; biases and normalization affine terms are copied
//! per task. The base task (id 0) runs the unmodulated base weights.
//!
//! The discriminator is a stack of conv + 2×2 average-pool blocks, a
//! penultimate feature layer, a scalar logit head and a linear projection
//! head used by the mixup-distance objective.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::afm::{self, LayerDims, ModulationFactors, TaskModulationSet};
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BASE_TASK: u32 = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
    /// Generator: nearest 2× upsample before the conv. Discriminator: 2×2
    /// average pool after the activation.
    pub resample: bool,
}

impl ConvBlock {
    pub fn new(c_out: usize, c_in: usize, k: usize, resample: bool) -> Self {
        Self {
            c_out,
            c_in,
            k,
            resample,
        }
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims::new(self.c_out, self.c_in, self.k)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub image_channels: usize,
    pub image_size: usize,
    /// Block 0 is the latent projection (`c_in == latent_dim`, output
    /// `k×k`); the rest are same-padding convolutions.
    pub blocks: Vec<ConvBlock>,
    pub modulated_layers: Vec<usize>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            image_channels: 3,
            image_size: 32,
            blocks: vec![
                ConvBlock::new(128, 64, 4, false),
                ConvBlock::new(32, 128, 3, true),
                ConvBlock::new(16, 32, 3, true),
                ConvBlock::new(3, 16, 3, true),
            ],
            modulated_layers: vec![0, 1, 2, 3],
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("generator: {m}")));
        let Some(first) = self.blocks.first() else {
            return bad("no blocks".into());
        };
        if first.c_in != self.latent_dim || first.resample {
            return bad("block 0 must project from latent_dim without resampling".into());
        }
        let mut size = first.k;
        let mut ch = first.c_out;
        for (i, b) in self.blocks.iter().enumerate().skip(1) {
            if b.c_in != ch {
                return bad(format!(
                    "block {i} expects {} channels, previous gives {ch}",
                    b.c_in
                ));
            }
            if b.k % 2 == 0 {
                return bad(format!("block {i} kernel must be odd"));
            }
            if b.resample {
                size *= 2;
            }
            ch = b.c_out;
        }
        if self
            .blocks
            .iter()
            .any(|b| b.c_out == 0 || b.c_in == 0 || b.k == 0)
        {
            return bad("zero-sized block".into());
        }
        if size != self.image_size || ch != self.image_channels {
            return bad(format!(
                "blocks produce {ch}x{size}x{size}, declared {}x{}x{}",
                self.image_channels, self.image_size, self.image_size
            ));
        }
        for &l in &self.modulated_layers {
            if l >= self.blocks.len() {
                return bad(format!("modulated layer {l} does not exist"));
            }
        }
        Ok(())
    }

    pub fn layer_id(i: usize) -> String {
        format!("g{i}")
    }

    /// Output shape (channels, size) of each block.
    pub fn block_shapes(&self) -> Vec<[usize; 3]> {
        let mut size = self.blocks[0].k;
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                if i > 0 && b.resample {
                    size *= 2;
                }
                [b.c_out, size, size]
            })
            .collect()
    }

    pub fn modulated_dims(&self) -> Vec<(String, LayerDims)> {
        self.modulated_layers
            .iter()
            .map(|&l| (Self::layer_id(l), self.blocks[l].dims()))
            .collect()
    }

    fn has_norm(&self, i: usize) -> bool {
        i + 1 < self.blocks.len()
    }

    /// Names and shapes of the per-task copied parameters (biases and
    /// normalization affine terms).
    pub fn copied_params(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let id = Self::layer_id(i);
            out.push((format!("{id}.b"), b.c_out));
            if self.has_norm(i) {
                out.push((format!("{id}.gamma"), b.c_out));
                out.push((format!("{id}.beta"), b.c_out));
            }
        }
        out
    }

    pub fn base_param_count(&self) -> usize {
        let weights: usize = self.blocks.iter().map(|b| b.dims().weight_count()).sum();
        weights + self.copied_params().iter().map(|p| p.1).sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub image_channels: usize,
    pub image_size: usize,
    pub blocks: Vec<ConvBlock>,
    pub feature_dim: usize,
    pub proj_dim: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            image_channels: 3,
            image_size: 32,
            blocks: vec![
                ConvBlock::new(16, 3, 3, true),
                ConvBlock::new(32, 16, 3, true),
                ConvBlock::new(64, 32, 3, true),
                ConvBlock::new(128, 64, 3, false),
            ],
            feature_dim: 128,
            proj_dim: 64,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("discriminator: {m}")));
        if self.blocks.is_empty() || self.feature_dim == 0 || self.proj_dim == 0 {
            return bad("needs blocks, feature_dim > 0 and proj_dim > 0".into());
        }
        let mut ch = self.image_channels;
        let mut size = self.image_size;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.c_in != ch || b.k % 2 == 0 || b.c_out == 0 {
                return bad(format!("block {i} is inconsistent"));
            }
            if b.resample {
                if !size.is_multiple_of(2) {
                    return bad(format!("block {i} pools an odd size {size}"));
                }
                size /= 2;
            }
            ch = b.c_out;
        }
        Ok(())
    }

    pub fn flat_dim(&self) -> usize {
        let mut size = self.image_size;
        for b in &self.blocks {
            if b.resample {
                size /= 2;
            }
        }
        self.blocks.last().map_or(0, |b| b.c_out) * size * size
    }

    pub fn param_count(&self) -> usize {
        let conv: usize = self
            .blocks
            .iter()
            .map(|b| b.dims().weight_count() + b.c_out)
            .sum();
        conv + self.flat_dim() * self.feature_dim
            + self.feature_dim
            + self.feature_dim
            + 1
            + self.feature_dim * self.proj_dim
            + self.proj_dim
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in as f64)).sqrt()
}

/// Task-specific generator weights.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskWeights {
    /// Frozen base kernels modulated by low-rank masks.
    Modulated(TaskModulationSet),
    /// Full per-task kernels (the full-finetune control).
    Full(BTreeMap<String, Tensor>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskParams {
    pub weights: TaskWeights,
    /// Per-task copies of biases and normalization affine terms.
    pub copies: BTreeMap<String, Tensor>,
    pub frozen: bool,
}

impl TaskParams {
    pub fn param_count(&self) -> usize {
        let w = match &self.weights {
            TaskWeights::Modulated(set) => set.param_count(),
            TaskWeights::Full(ws) => ws.values().map(Tensor::len).sum(),
        };
        w + self.copies.values().map(Tensor::len).sum::<usize>()
    }

    pub fn modulation(&self) -> Option<&TaskModulationSet> {
        match &self.weights {
            TaskWeights::Modulated(set) => Some(set),
            TaskWeights::Full(_) => None,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        if let TaskWeights::Modulated(set) = &mut self.weights {
            set.freeze();
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
    /// Base kernels `g<i>.w` plus base copies of the copied parameters.
    base: BTreeMap<String, Tensor>,
    base_frozen: bool,
    tasks: BTreeMap<u32, TaskParams>,
}

struct LayerNodes {
    w: NodeId,
    b: NodeId,
    affine: Option<(NodeId, NodeId)>,
}

/// Generator parameters placed on a tape for one task.
pub struct GenBinding {
    task: u32,
    layers: Vec<LayerNodes>,
    trainable: Vec<(String, NodeId)>,
}

impl GenBinding {
    pub fn task(&self) -> u32 {
        self.task
    }

    /// Keys and tape nodes of every trainable leaf.
    pub fn trainable(&self) -> &[(String, NodeId)] {
        &self.trainable
    }
}

pub struct GenForward {
    /// Output of each block that was run; the last block's entry is the
    /// pre-squash output.
    pub activations: Vec<NodeId>,
    pub image: Option<NodeId>,
}

impl Generator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut base = BTreeMap::new();
        for (i, b) in spec.blocks.iter().enumerate() {
            let id = GeneratorSpec::layer_id(i);
            let fan_in = if i == 0 { b.c_in } else { b.c_in * b.k * b.k };
            base.insert(
                format!("{id}.w"),
                Tensor::randn(&[b.c_out, b.c_in, b.k, b.k], he_std(fan_in), &mut rng),
            );
        }
        for (name, n) in spec.copied_params() {
            let init = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            base.insert(name, Tensor::full(&[n], init));
        }
        Ok(Self {
            spec,
            base,
            base_frozen: false,
            tasks: BTreeMap::new(),
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn base_params(&self) -> &BTreeMap<String, Tensor> {
        &self.base
    }

    pub fn base_frozen(&self) -> bool {
        self.base_frozen
    }

    pub fn freeze_base(&mut self) {
        self.base_frozen = true;
    }

    pub fn tasks(&self) -> &BTreeMap<u32, TaskParams> {
        &self.tasks
    }

    pub fn task(&self, id: u32) -> Result<&TaskParams> {
        self.tasks.get(&id).ok_or(Error::UnknownTask(id))
    }

    pub fn has_task(&self, id: u32) -> bool {
        id == BASE_TASK || self.tasks.contains_key(&id)
    }

    /// Base kernels and copies, checksummed; unchanged by incremental training.
    pub fn base_checksum(&self) -> String {
        let parts: Vec<String> = self
            .base
            .iter()
            .map(|(k, v)| format!("{k}:{}", v.checksum()))
            .collect();
        crate::checksum_strings(&parts)
    }

    /// Base copies of the per-task parameters.
    pub fn base_copies(&self) -> BTreeMap<String, Tensor> {
        self.spec
            .copied_params()
            .into_iter()
            .map(|(name, _)| {
                let v = self.base[&name].clone();
                (name, v)
            })
            .collect()
    }

    pub fn insert_task(&mut self, id: u32, params: TaskParams) -> Result<()> {
        if id == BASE_TASK {
            return Err(Error::InvalidArgument("task 0 is the base task".into()));
        }
        if let Some(existing) = self.tasks.get(&id) {
            if existing.frozen {
                return Err(Error::InvalidArgument(format!("task {id} is frozen")));
            }
        }
        if let TaskWeights::Modulated(set) = &params.weights {
            let expected: Vec<String> = self
                .spec
                .modulated_dims()
                .into_iter()
                .map(|d| d.0)
                .collect();
            let got: Vec<String> = set.layer_masks.keys().cloned().collect();
            let mut want = expected.clone();
            want.sort();
            if got != want {
                return Err(Error::InvalidArgument(format!(
                    "modulation covers {got:?}, architecture modulates {want:?}"
                )));
            }
            for (name, dims) in self.spec.modulated_dims() {
                if set.layer_masks[&name].mask_shape() != dims.matrix_shape() {
                    return Err(Error::Shape(format!(
                        "modulation for {name} has the wrong shape"
                    )));
                }
            }
        }
        self.tasks.insert(id, params);
        Ok(())
    }

    pub fn freeze_task(&mut self, id: u32) -> Result<()> {
        self.tasks
            .get_mut(&id)
            .ok_or(Error::UnknownTask(id))?
            .freeze();
        Ok(())
    }

    /// Mutable access to a trainable parameter by binding key.
    pub fn param_mut(&mut self, key: &str) -> Result<&mut Tensor> {
        let unknown = || Error::InvalidArgument(format!("unknown generator parameter {key}"));
        if let Some(name) = key.strip_prefix("base/") {
            if self.base_frozen {
                return Err(Error::InvalidArgument("base generator is frozen".into()));
            }
            return self.base.get_mut(name).ok_or_else(unknown);
        }
        let rest = key.strip_prefix("task/").ok_or_else(unknown)?;
        let (id, rest) = rest.split_once('/').ok_or_else(unknown)?;
        let id: u32 = id.parse().map_err(|_| unknown())?;
        let task = self.tasks.get_mut(&id).ok_or(Error::UnknownTask(id))?;
        if task.frozen {
            return Err(Error::InvalidArgument(format!("task {id} is frozen")));
        }
        let (kind, name) = rest.split_once('/').ok_or_else(unknown)?;
        match (kind, &mut task.weights) {
            ("copy", _) => task.copies.get_mut(name).ok_or_else(unknown),
            ("full", TaskWeights::Full(ws)) => ws.get_mut(name).ok_or_else(unknown),
            ("mod", TaskWeights::Modulated(set)) => {
                let (layer, which) = name.split_once('.').ok_or_else(unknown)?;
                let f = set.layer_masks.get_mut(layer).ok_or_else(unknown)?;
                match which {
                    "U" => Ok(f.u_mut()),
                    "V" => Ok(f.v_mut()),
                    _ => Err(unknown()),
                }
            }
            _ => Err(unknown()),
        }
    }

    /// Put the parameters for `task` on the tape. With `train`, the task's
    /// own parameters (or the base parameters for task 0) become
    /// gradient-requiring leaves.
    pub fn bind(&self, g: &mut Graph, task: u32, train: bool) -> Result<GenBinding> {
        let mut trainable = Vec::new();
        let mut layers = Vec::with_capacity(self.spec.blocks.len());
        let leaf = |g: &mut Graph,
                    key: String,
                    t: &Tensor,
                    train: bool,
                    trainable: &mut Vec<(String, NodeId)>| {
            let id = g.leaf(t.clone(), train);
            if train {
                trainable.push((key, id));
            }
            id
        };
        if task == BASE_TASK {
            if train && self.base_frozen {
                return Err(Error::InvalidArgument("base generator is frozen".into()));
            }
            for i in 0..self.spec.blocks.len() {
                let id = GeneratorSpec::layer_id(i);
                let mut p = |suffix: &str, g: &mut Graph| {
                    let name = format!("{id}.{suffix}");
                    leaf(
                        g,
                        format!("base/{name}"),
                        &self.base[&name],
                        train,
                        &mut trainable,
                    )
                };
                let w = p("w", g);
                let b = p("b", g);
                let affine = if self.spec.has_norm(i) {
                    Some((p("gamma", g), p("beta", g)))
                } else {
                    None
                };
                layers.push(LayerNodes { w, b, affine });
            }
            return Ok(GenBinding {
                task,
                layers,
                trainable,
            });
        }
        let tp = self.task(task)?;
        if train && tp.frozen {
            return Err(Error::InvalidArgument(format!("task {task} is frozen")));
        }
        for i in 0..self.spec.blocks.len() {
            let id = GeneratorSpec::layer_id(i);
            let wname = format!("{id}.w");
            let w = match &tp.weights {
                TaskWeights::Full(ws) => leaf(
                    g,
                    format!("task/{task}/full/{wname}"),
                    &ws[&wname],
                    train,
                    &mut trainable,
                ),
                TaskWeights::Modulated(set) => match set.layer_masks.get(&id) {
                    Some(f) => {
                        let base = g.constant(self.base[&wname].clone());
                        let u = leaf(
                            g,
                            format!("task/{task}/mod/{id}.U"),
                            f.u(),
                            train,
                            &mut trainable,
                        );
                        let v = leaf(
                            g,
                            format!("task/{task}/mod/{id}.V"),
                            f.v(),
                            train,
                            &mut trainable,
                        );
                        g.modulate(base, u, v)?
                    }
                    None => g.constant(self.base[&wname].clone()),
                },
            };
            let mut c = |suffix: &str, g: &mut Graph| {
                let name = format!("{id}.{suffix}");
                leaf(
                    g,
                    format!("task/{task}/copy/{name}"),
                    &tp.copies[&name],
                    train,
                    &mut trainable,
                )
            };
            let b = c("b", g);
            let affine = if self.spec.has_norm(i) {
                Some((c("gamma", g), c("beta", g)))
            } else {
                None
            };
            layers.push(LayerNodes { w, b, affine });
        }
        Ok(GenBinding {
            task,
            layers,
            trainable,
        })
    }

    /// Forward pass through blocks `0..=upto` (all blocks when `None`).
    /// `z` is a `[B, latent_dim]` node.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &GenBinding,
        z: NodeId,
        upto: Option<usize>,
    ) -> Result<GenForward> {
        let n = self.spec.blocks.len();
        let last = match upto {
            Some(l) if l >= n => return Err(Error::InvalidLayer { index: l, count: n }),
            Some(l) => l,
            None => n - 1,
        };
        let mut activations = Vec::with_capacity(last + 1);
        let mut h = z;
        for i in 0..=last {
            let block = &self.spec.blocks[i];
            let nodes = &bind.layers[i];
            h = if i == 0 {
                g.project(h, nodes.w, nodes.b)?
            } else {
                if block.resample {
                    h = g.upsample2(h)?;
                }
                g.conv2d(h, nodes.w, nodes.b)?
            };
            if let Some((gamma, beta)) = nodes.affine {
                let normed = g.instance_norm(h)?;
                let scaled = g.channel_affine(normed, gamma, beta)?;
                h = g.leaky_relu(scaled, LEAKY_SLOPE);
            }
            activations.push(h);
        }
        let image = if last == n - 1 { Some(g.tanh(h)) } else { None };
        Ok(GenForward { activations, image })
    }

    fn latent_tensor(&self, z: &Tensor) -> Result<Tensor> {
        match z.shape() {
            [_, d] if *d == self.spec.latent_dim => Ok(z.clone()),
            [d] if *d == self.spec.latent_dim => z.clone().reshape(&[1, *d]),
            s => Err(Error::Shape(format!(
                "latent batch {s:?}, expected [B, {}]",
                self.spec.latent_dim
            ))),
        }
    }

    /// Images `[B, C, H, W]` in [−1, 1] for latents `[B, latent_dim]`.
    pub fn generate(&self, task: u32, z: &Tensor) -> Result<Tensor> {
        let (img, _) = self.generate_with_activations(task, z)?;
        Ok(img)
    }

    /// Images and every block activation from a single pass.
    pub fn generate_with_activations(
        &self,
        task: u32,
        z: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        if !self.has_task(task) {
            return Err(Error::UnknownTask(task));
        }
        let mut g = Graph::new();
        let bind = self.bind(&mut g, task, false)?;
        let zn = g.constant(self.latent_tensor(z)?);
        let out = self.forward(&mut g, &bind, zn, None)?;
        let acts = out
            .activations
            .iter()
            .map(|&a| g.value(a).clone())
            .collect();
        Ok((g.value(out.image.expect("full pass")).clone(), acts))
    }

    /// Activation after block `layer`.
    pub fn activations(&self, task: u32, z: &Tensor, layer: usize) -> Result<Tensor> {
        if !self.has_task(task) {
            return Err(Error::UnknownTask(task));
        }
        let mut g = Graph::new();
        let bind = self.bind(&mut g, task, false)?;
        let zn = g.constant(self.latent_tensor(z)?);
        let out = self.forward(&mut g, &bind, zn, Some(layer))?;
        Ok(g.value(out.activations[layer]).clone())
    }

    /// Effective kernels for a task (base kernels for task 0).
    pub fn effective_weights(&self, task: u32) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for i in 0..self.spec.blocks.len() {
            let name = format!("{}.w", GeneratorSpec::layer_id(i));
            let w = if task == BASE_TASK {
                self.base[&name].clone()
            } else {
                match &self.task(task)?.weights {
                    TaskWeights::Full(ws) => ws[&name].clone(),
                    TaskWeights::Modulated(set) => {
                        match set.layer_masks.get(&GeneratorSpec::layer_id(i)) {
                            Some(f) => afm::apply_modulation(&self.base[&name], f)?,
                            None => self.base[&name].clone(),
                        }
                    }
                }
            };
            out.insert(name, w);
        }
        Ok(out)
    }

    /// Replace the modulation factors of an unfrozen task wholesale.
    pub fn set_factors(&mut self, task: u32, layer: &str, f: ModulationFactors) -> Result<()> {
        let tp = self.tasks.get_mut(&task).ok_or(Error::UnknownTask(task))?;
        if tp.frozen {
            return Err(Error::InvalidArgument(format!("task {task} is frozen")));
        }
        match &mut tp.weights {
            TaskWeights::Modulated(set) => {
                let slot = set.layer_masks.get_mut(layer).ok_or_else(|| {
                    Error::InvalidArgument(format!("layer {layer} is not modulated"))
                })?;
                if slot.mask_shape() != f.mask_shape() || slot.rank() != f.rank() {
                    return Err(Error::Shape(format!("factors for {layer}")));
                }
                *slot = f;
                Ok(())
            }
            TaskWeights::Full(_) => Err(Error::NoModulation(task)),
        }
    }

    pub(crate) fn from_parts(
        spec: GeneratorSpec,
        base: BTreeMap<String, Tensor>,
        base_frozen: bool,
        tasks: BTreeMap<u32, TaskParams>,
    ) -> Result<Self> {
        spec.validate()?;
        let reference = Generator::new(spec.clone(), 0)?;
        for (k, v) in &reference.base {
            match base.get(k) {
                Some(t) if t.shape() == v.shape() => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "generator parameter {k} missing or misshapen"
                    )))
                }
            }
        }
        Ok(Self {
            spec,
            base,
            base_frozen,
            tasks,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    params: BTreeMap<String, Tensor>,
}

pub struct DiscBinding {
    convs: Vec<(NodeId, NodeId)>,
    feat: (NodeId, NodeId),
    logit: (NodeId, NodeId),
    proj: (NodeId, NodeId),
    trainable: Vec<(String, NodeId)>,
}

impl DiscBinding {
    pub fn trainable(&self) -> &[(String, NodeId)] {
        &self.trainable
    }
}

pub struct DiscForward {
    /// `[B, 1]`
    pub logits: NodeId,
    /// `[B, feature_dim]`
    pub features: NodeId,
}

impl Discriminator {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (i, b) in spec.blocks.iter().enumerate() {
            params.insert(
                format!("d{i}.w"),
                Tensor::randn(
                    &[b.c_out, b.c_in, b.k, b.k],
                    he_std(b.c_in * b.k * b.k),
                    &mut rng,
                ),
            );
            params.insert(format!("d{i}.b"), Tensor::zeros(&[b.c_out]));
        }
        let flat = spec.flat_dim();
        params.insert(
            "feat.w".into(),
            Tensor::randn(&[spec.feature_dim, flat], he_std(flat), &mut rng),
        );
        params.insert("feat.b".into(), Tensor::zeros(&[spec.feature_dim]));
        params.insert(
            "logit.w".into(),
            Tensor::randn(&[1, spec.feature_dim], he_std(spec.feature_dim), &mut rng),
        );
        params.insert("logit.b".into(), Tensor::zeros(&[1]));
        params.insert(
            "proj.w".into(),
            Tensor::randn(
                &[spec.proj_dim, spec.feature_dim],
                (1.0 / spec.feature_dim as f64).sqrt(),
                &mut rng,
            ),
        );
        params.insert("proj.b".into(), Tensor::zeros(&[spec.proj_dim]));
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn param_mut(&mut self, key: &str) -> Result<&mut Tensor> {
        let name = key.strip_prefix("disc/").unwrap_or(key);
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown discriminator parameter {key}")))
    }

    pub fn checksum(&self) -> String {
        let parts: Vec<String> = self
            .params
            .iter()
            .map(|(k, v)| format!("{k}:{}", v.checksum()))
            .collect();
        crate::checksum_strings(&parts)
    }

    pub fn bind(&self, g: &mut Graph, train: bool) -> DiscBinding {
        let mut trainable = Vec::new();
        let mut p = |g: &mut Graph, name: &str| {
            let id = g.leaf(self.params[name].clone(), train);
            if train {
                trainable.push((format!("disc/{name}"), id));
            }
            id
        };
        let convs = (0..self.spec.blocks.len())
            .map(|i| (p(g, &format!("d{i}.w")), p(g, &format!("d{i}.b"))))
            .collect();
        let feat = (p(g, "feat.w"), p(g, "feat.b"));
        let logit = (p(g, "logit.w"), p(g, "logit.b"));
        let proj = (p(g, "proj.w"), p(g, "proj.b"));
        DiscBinding {
            convs,
            feat,
            logit,
            proj,
            trainable,
        }
    }

    /// `x` is `[B, C, H, W]`.
    pub fn forward(&self, g: &mut Graph, bind: &DiscBinding, x: NodeId) -> Result<DiscForward> {
        let s = g.value(x).shape().to_vec();
        if s.len() != 4
            || s[1] != self.spec.image_channels
            || s[2] != self.spec.image_size
            || s[3] != self.spec.image_size
        {
            return Err(Error::Shape(format!(
                "discriminator input {s:?}, expected [B, {}, {}, {}]",
                self.spec.image_channels, self.spec.image_size, self.spec.image_size
            )));
        }
        let batch = s[0];
        let mut h = x;
        for (block, &(w, b)) in self.spec.blocks.iter().zip(&bind.convs) {
            h = g.conv2d(h, w, b)?;
            h = g.leaky_relu(h, LEAKY_SLOPE);
            if block.resample {
                h = g.avg_pool2(h)?;
            }
        }
        let flat = g.reshape(h, &[batch, self.spec.flat_dim()])?;
        let f = g.linear(flat, bind.feat.0, bind.feat.1)?;
        let features = g.leaky_relu(f, LEAKY_SLOPE);
        let logits = g.linear(features, bind.logit.0, bind.logit.1)?;
        Ok(DiscForward { logits, features })
    }

    /// Projection head `[B, feature_dim] → [B, proj_dim]`.
    pub fn project(&self, g: &mut Graph, bind: &DiscBinding, features: NodeId) -> Result<NodeId> {
        g.linear(features, bind.proj.0, bind.proj.1)
    }

    /// Adversarial logits and penultimate features for a batch of images.
    pub fn discriminate(&self, images: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let bind = self.bind(&mut g, false);
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, &bind, x)?;
        Ok((
            g.value(out.logits).data().to_vec(),
            g.value(out.features).clone(),
        ))
    }

    pub(crate) fn from_parts(
        spec: DiscriminatorSpec,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let reference = Discriminator::new(spec.clone(), 0)?;
        for (k, v) in &reference.params {
            match params.get(k) {
                Some(t) if t.shape() == v.shape() => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "discriminator parameter {k} missing or misshapen"
                    )))
                }
            }
        }
        Ok(Self { spec, params })
    }
}
