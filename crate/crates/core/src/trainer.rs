//! Task-sequence training.
//!
//! The base task trains every generator and discriminator parameter. Each
//! incremental task then trains only its own modulation factors (or full
//! kernels in the control) and copies, plus the discriminator, alternating
//! one discriminator step with one generator step.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::afm::init_modulation;
use crate::autograd::Graph;
use crate::checkpoint::TrainingState;
use crate::config::RunConfig;
use crate::dai::{self, TaskDistanceReport};
use crate::data::{FewShotDataset, TaskStream};
use crate::error::{Error, Result};
use crate::eval::FeatureExtractor;
use crate::losses::{
    adversarial_losses, dirichlet_ones, discriminator_adv_grads, generator_adv_grads, mdl_batch,
    mix_latents, r1_penalty, supcon_with_grad, total_discriminator_loss, total_generator_loss,
    DiscriminatorLossParts, GeneratorLossParts, MdlGroup,
};
use crate::models::{Discriminator, Generator, TaskParams, TaskWeights, BASE_TASK};
use crate::registry::{replay_latents, TaskKind, TaskRecord, TaskRegistry};
use crate::tensor::Tensor;

const ADAM_EPS: f64 = 1e-8;
/// RMS size of the input perturbation used for the R1 parameter gradient.
const R1_PROBE: f64 = 1e-3;

/// Adam with per-key moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    slots: BTreeMap<String, (Vec<f64>, Vec<f64>, i32)>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            slots: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, key: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Shape(format!("gradient for {key}")));
        }
        if !grad.all_finite() {
            return Err(Error::Diverged(format!("non-finite gradient for {key}")));
        }
        let (m, v, t) = self
            .slots
            .entry(key.to_string())
            .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()], 0));
        *t += 1;
        let c1 = 1.0 - self.beta1.powi(*t);
        let c2 = 1.0 - self.beta2.powi(*t);
        for (((p, g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub class_id: u32,
    pub shots: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSchedule {
    pub base: TaskSpec,
    pub incremental: Vec<TaskSpec>,
    pub base_steps: usize,
    pub task_steps: usize,
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_task: f64,
    pub lr_disc: f64,
    pub betas: (f64, f64),
    pub seed: u64,
}

impl TaskSchedule {
    pub fn new(cfg: &RunConfig, stream: &TaskStream, seed: u64) -> Result<Self> {
        let spec = |d: &FewShotDataset| TaskSpec {
            class_id: d.class_id(),
            shots: d.len(),
        };
        let s = &cfg.schedule;
        let sched = Self {
            base: spec(stream.base()),
            incremental: stream.incremental().iter().map(spec).collect(),
            base_steps: s.base_steps,
            task_steps: s.task_steps,
            batch_size: s.batch_size,
            lr_base: s.lr_base,
            lr_task: s.lr_task,
            lr_disc: s.lr_disc,
            betas: (s.beta1, s.beta2),
            seed,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn validate(&self) -> Result<()> {
        let all: Vec<&TaskSpec> = std::iter::once(&self.base)
            .chain(&self.incremental)
            .collect();
        if all.iter().any(|t| t.shots == 0) {
            return Err(Error::InvalidArgument(
                "every task needs at least one shot".into(),
            ));
        }
        let ids: BTreeSet<u32> = all.iter().map(|t| t.class_id).collect();
        if ids.len() != all.len() {
            return Err(Error::InvalidArgument(
                "class ids repeat across tasks".into(),
            ));
        }
        Ok(())
    }
}

/// How many replay images to draw from each past task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayBatchSpec {
    pub counts: Vec<(u32, usize)>,
    pub seed: u64,
}

impl ReplayBatchSpec {
    /// `total` images spread evenly, earlier tasks taking the remainder.
    pub fn balanced(tasks: &[u32], total: usize, seed: u64) -> Self {
        let n = tasks.len().max(1);
        let counts = tasks
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, total / n + usize::from(i < total % n)))
            .collect();
        Self { counts, seed }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|c| c.1).sum()
    }
}

/// Images from frozen tasks, labelled with their class ids.
pub fn make_replay_batch(
    registry: &TaskRegistry,
    generator: &Generator,
    spec: &ReplayBatchSpec,
    cap: usize,
) -> Result<(Tensor, Vec<u32>)> {
    if registry.is_empty() {
        return Err(Error::InvalidArgument(
            "replay needs a registered task".into(),
        ));
    }
    let gs = generator.spec();
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for &(task, count) in &spec.counts {
        if count > cap {
            return Err(Error::InvalidArgument(format!(
                "replay count {count} for task {task} exceeds cap {cap}"
            )));
        }
        let rec = registry.get(task)?;
        if !rec.frozen {
            return Err(Error::TaskNotFrozen(task));
        }
        if count == 0 {
            continue;
        }
        let z = replay_latents(task, count, gs.latent_dim, spec.seed);
        images.push(generator.generate(task, &z)?);
        labels.extend(std::iter::repeat_n(rec.class_id, count));
    }
    if images.is_empty() {
        return Ok((
            Tensor::zeros(&[0, gs.image_channels, gs.image_size, gs.image_size]),
            labels,
        ));
    }
    Ok((Tensor::concat(&images.iter().collect::<Vec<_>>())?, labels))
}

/// Every loss component of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct LedgerRow {
    pub task: u32,
    pub step: usize,
    pub d: DiscriminatorLossParts,
    pub d_total: f64,
    pub g: GeneratorLossParts,
    pub g_total: f64,
    pub d_ms: f64,
    pub g_ms: f64,
    pub step_ms: f64,
}

pub const LEDGER_COLUMNS: [&str; 13] = [
    "task", "step", "d_adv", "d_r1", "d_mdl", "d_supcon", "d_total", "g_adv", "g_mdl", "g_total",
    "d_ms", "g_ms", "step_ms",
];

impl LedgerRow {
    pub fn csv_header() -> String {
        LEDGER_COLUMNS.join(",")
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{}", self.task, self.step);
        for v in [
            self.d.adv,
            self.d.r1,
            self.d.mdl,
            self.d.supcon,
            self.d_total,
            self.g.adv,
            self.g.mdl,
            self.g_total,
        ] {
            let _ = write!(s, ",{v:.12e}");
        }
        let _ = write!(s, ",{:.3},{:.3},{:.3}", self.d_ms, self.g_ms, self.step_ms);
        s
    }
}

/// Mean `step_ms` over a task's ledger rows.
pub fn mean_step_ms(rows: &[LedgerRow], task: u32) -> f64 {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.task == task)
        .map(|r| r.step_ms)
        .collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IncrementalOutcome {
    pub task_id: u32,
    pub init_from: Option<u32>,
    pub dai: Option<TaskDistanceReport>,
}

fn mix_seed(seed: u64, task: u32, salt: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (u64::from(task) << 32) ^ salt
}

fn sample_rows<R: Rng>(data: &Tensor, n: usize, rng: &mut R) -> Tensor {
    let rows = data.shape()[0];
    let parts: Vec<Tensor> = (0..n)
        .map(|_| {
            let i = rng.random_range(0..rows);
            data.rows(i, i + 1)
        })
        .collect();
    Tensor::concat(&parts.iter().collect::<Vec<_>>()).expect("rows share a shape")
}

struct Mixup {
    /// `[groups, latent_dim]`
    mixed: Tensor,
    coefficients: Vec<Vec<f64>>,
    anchors: usize,
}

impl Mixup {
    /// Groups over the first `anchors · groups` rows of `z`.
    fn sample<R: Rng>(z: &Tensor, anchors: usize, groups: usize, rng: &mut R) -> Result<Self> {
        let d = z.shape()[1];
        let row = |i: usize| z.data()[i * d..(i + 1) * d].to_vec();
        let mut mixed = Vec::with_capacity(groups * d);
        let mut coefficients = Vec::with_capacity(groups);
        for k in 0..groups {
            let c = dirichlet_ones(anchors, rng)?;
            let a: Vec<Vec<f64>> = (0..anchors).map(|i| row(k * anchors + i)).collect();
            mixed.extend(mix_latents(&a, &c)?);
            coefficients.push(c);
        }
        Ok(Self {
            mixed: Tensor::new(vec![groups, d], mixed)?,
            coefficients,
            anchors,
        })
    }

    /// Anchor rows start at `anchor_offset`, mixed rows at `mixed_offset`.
    fn groups(&self, anchor_offset: usize, mixed_offset: usize) -> Vec<MdlGroup> {
        self.coefficients
            .iter()
            .enumerate()
            .map(|(k, c)| MdlGroup {
                mixed: mixed_offset + k,
                anchors: (0..self.anchors)
                    .map(|i| anchor_offset + k * self.anchors + i)
                    .collect(),
                coefficients: c.clone(),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: RunConfig,
    seed: u64,
    pub state: TrainingState,
    opt_g: Adam,
    opt_d: Adam,
    ledger: Vec<LedgerRow>,
    ledger_path: Option<PathBuf>,
}

impl Trainer {
    /// Fresh models for `cfg`; the config must carry a seed.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg
            .seed
            .ok_or_else(|| Error::Config("a seed is required for training".into()))?;
        let a = &cfg.architecture;
        let state = TrainingState {
            generator: Generator::new(a.generator.clone(), mix_seed(seed, 0, 1))?,
            discriminator: Discriminator::new(a.discriminator.clone(), mix_seed(seed, 0, 2))?,
            registry: TaskRegistry::new(),
            extractor: FeatureExtractor::new(cfg.eval.extractor_seed),
        };
        Self::from_state(cfg, state)
    }

    pub fn from_state(cfg: RunConfig, state: TrainingState) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg
            .seed
            .ok_or_else(|| Error::Config("a seed is required for training".into()))?;
        if state.generator.spec() != &cfg.architecture.generator
            || state.discriminator.spec() != &cfg.architecture.discriminator
        {
            return Err(Error::Config(
                "checkpoint architecture differs from the config".into(),
            ));
        }
        let (b1, b2) = (cfg.schedule.beta1, cfg.schedule.beta2);
        Ok(Self {
            cfg,
            seed,
            state,
            opt_g: Adam::new(b1, b2),
            opt_d: Adam::new(b1, b2),
            ledger: Vec::new(),
            ledger_path: None,
        })
    }

    /// Same models and optimizer state under a different config with the same
    /// architecture; used to branch ablations off one trained base.
    pub fn fork(&self, cfg: RunConfig) -> Result<Self> {
        let mut t = Self::from_state(cfg, self.state.clone())?;
        t.opt_g = self.opt_g.clone();
        t.opt_d = self.opt_d.clone();
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> &[LedgerRow] {
        &self.ledger
    }

    /// Append every subsequent ledger row to a CSV file.
    pub fn set_ledger_path(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
            writeln!(f, "{}", LedgerRow::csv_header()).map_err(|e| Error::io(path, e))?;
        }
        self.ledger_path = Some(path.to_path_buf());
        Ok(())
    }

    fn log(&mut self, row: LedgerRow) -> Result<()> {
        if let Some(p) = &self.ledger_path {
            let mut f = OpenOptions::new()
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(p, e))?;
        }
        self.ledger.push(row);
        Ok(())
    }

    /// Train the base task from scratch, then freeze it and record its
    /// replay table.
    pub fn train_base_task(&mut self, data: &FewShotDataset) -> Result<()> {
        if !self.state.registry.is_empty() {
            return Err(Error::InvalidArgument(
                "the base task is already trained".into(),
            ));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty base dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, BASE_TASK, 3));
        for step in 0..self.cfg.schedule.base_steps {
            self.step(BASE_TASK, data, step, &mut rng)?;
        }
        self.state.generator.freeze_base();
        self.state.registry.push(TaskRecord {
            task_id: BASE_TASK,
            class_id: data.class_id(),
            shots: data.len(),
            kind: TaskKind::Base,
            init_from: None,
            frozen: false,
            replay: None,
        })?;
        self.state.registry.freeze(
            &self.state.generator,
            BASE_TASK,
            mix_seed(self.seed, BASE_TASK, 4),
        )?;
        self.check_replay()
    }

    /// Initial parameters for a new task, and the task they came from.
    pub fn init_task_params(
        &self,
        task_id: u32,
        data: &FewShotDataset,
    ) -> Result<(TaskParams, Option<u32>, Option<TaskDistanceReport>)> {
        let g = &self.state.generator;
        let mut report = None;
        if self.cfg.ablation.dai {
            let n = data.len().min(dai::MAX_REAL_BATCH);
            let r = dai::select_init_task(
                &data.samples.rows(0, n),
                &self.state.registry.frozen_ids(),
                g,
                &self.state.discriminator,
                self.cfg.dai.n_per_task,
                mix_seed(self.seed, task_id, 5),
            )?;
            if r.selected != BASE_TASK {
                let params = dai::clone_task(&self.state.registry, g, r.selected, task_id)?;
                return Ok((params, Some(r.selected), Some(r)));
            }
            report = Some(r);
        }
        let weights = if self.cfg.ablation.afm {
            let mut set = init_modulation(task_id, &[], 1, 0)?;
            for (i, (layer, dims)) in g.spec().modulated_dims().into_iter().enumerate() {
                let rank = self.cfg.architecture.rank_for(&layer);
                let one = init_modulation(
                    task_id,
                    &[(layer, dims)],
                    rank,
                    mix_seed(self.seed, task_id, 100 + i as u64),
                )?;
                set.layer_masks.extend(one.layer_masks);
            }
            TaskWeights::Modulated(set)
        } else {
            TaskWeights::Full(g.effective_weights(BASE_TASK)?)
        };
        let params = TaskParams {
            weights,
            copies: g.base_copies(),
            frozen: false,
        };
        Ok((params, report.as_ref().map(|_| BASE_TASK), report))
    }

    /// Train the next task on `data`, freeze it and record its replay table.
    pub fn train_incremental_task(&mut self, data: &FewShotDataset) -> Result<IncrementalOutcome> {
        if self.state.registry.frozen_ids().is_empty() || !self.state.generator.base_frozen() {
            return Err(Error::InvalidArgument("train the base task first".into()));
        }
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty task dataset".into()));
        }
        let task_id = self.state.registry.next_task_id();
        let (params, init_from, report) = self.init_task_params(task_id, data)?;
        let kind = if matches!(params.weights, TaskWeights::Full(_)) {
            TaskKind::Full
        } else {
            TaskKind::Modulated
        };
        self.state.generator.insert_task(task_id, params)?;
        self.state.registry.push(TaskRecord {
            task_id,
            class_id: data.class_id(),
            shots: data.len(),
            kind,
            init_from,
            frozen: false,
            replay: None,
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, task_id, 3));
        for step in 0..self.cfg.schedule.task_steps {
            self.step(task_id, data, step, &mut rng)?;
        }
        self.state.generator.freeze_task(task_id)?;
        self.state.registry.freeze(
            &self.state.generator,
            task_id,
            mix_seed(self.seed, task_id, 4),
        )?;
        self.check_replay()?;
        Ok(IncrementalOutcome {
            task_id,
            init_from,
            dai: report,
        })
    }

    fn check_replay(&self) -> Result<()> {
        for c in self.state.registry.validate_all(&self.state.generator)? {
            if !c.passed() {
                return Err(Error::Forgetting {
                    task: c.task_id,
                    max_abs_diff: c.max_abs_diff,
                });
            }
        }
        Ok(())
    }

    /// Keys of every parameter the next step on `task` would update.
    pub fn trainable_census(&self, task: u32) -> Result<(Vec<String>, Vec<String>)> {
        let mut g = Graph::new();
        let gb = self.state.generator.bind(&mut g, task, true)?;
        let db = self.state.discriminator.bind(&mut g, true);
        let names = |v: &[(String, _)]| v.iter().map(|p| p.0.clone()).collect();
        Ok((names(gb.trainable()), names(db.trainable())))
    }

    fn step(
        &mut self,
        task: u32,
        data: &FewShotDataset,
        step: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        let t0 = Instant::now();
        let (d, d_total) = self.d_step(task, data, step, rng)?;
        let d_ms = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let (g, g_total) = self.g_step(task, rng)?;
        let g_ms = t1.elapsed().as_secs_f64() * 1e3;
        let step_ms = t0.elapsed().as_secs_f64() * 1e3;
        self.log(LedgerRow {
            task,
            step,
            d,
            d_total,
            g,
            g_total,
            d_ms,
            g_ms,
            step_ms,
        })
    }

    fn latents<R: Rng>(&self, n: usize, rng: &mut R) -> Tensor {
        Tensor::randn(&[n, self.cfg.architecture.generator.latent_dim], 1.0, rng)
    }

    fn d_step(
        &mut self,
        task: u32,
        data: &FewShotDataset,
        step: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(DiscriminatorLossParts, f64)> {
        let w = self.cfg.effective_losses();
        let b = self.cfg.schedule.batch_size;
        let interval = self.cfg.schedule.r1_interval;
        let real = sample_rows(&data.samples, b, rng);
        let z = self.latents(b, rng);
        let mixup = if w.lambda_d_mdl > 0.0 {
            Some(Mixup::sample(
                &z,
                self.cfg.mixup.anchors,
                self.cfg.mixup.groups,
                rng,
            )?)
        } else {
            None
        };
        let z_all = match &mixup {
            Some(m) => Tensor::concat(&[&z, &m.mixed])?,
            None => z,
        };
        let fakes = self.state.generator.generate(task, &z_all)?;
        let n_fake = fakes.shape()[0];
        let past = if w.lambda_supcon > 0.0 && task != BASE_TASK {
            self.state.registry.frozen_ids()
        } else {
            Vec::new()
        };
        let (replay, replay_labels) = if past.is_empty() {
            (None, Vec::new())
        } else {
            let spec = ReplayBatchSpec::balanced(&past, b, rng.random());
            let (imgs, labels) = make_replay_batch(
                &self.state.registry,
                &self.state.generator,
                &spec,
                self.cfg.schedule.replay_cap,
            )?;
            (Some(imgs), labels)
        };
        let mut inputs = vec![&real, &fakes];
        if let Some(r) = &replay {
            inputs.push(r);
        }
        let x = Tensor::concat(&inputs)?;
        let rows = x.shape()[0];
        let r1_step = w.r1_gamma > 0.0 && step.is_multiple_of(interval);

        let disc = &self.state.discriminator;
        let mut g = Graph::new();
        let bind = disc.bind(&mut g, true);
        let xn = g.leaf(x, r1_step);
        let out = disc.forward(&mut g, &bind, xn)?;
        let scores = g.value(out.logits).data().to_vec();
        let (real_s, fake_s) = (&scores[..b], &scores[b..2 * b]);
        let adv = adversarial_losses(real_s, fake_s).discriminator;
        let (gr, gf) = discriminator_adv_grads(real_s, fake_s);
        let mut dlogits = Tensor::zeros(&[rows, 1]);
        dlogits.data_mut()[..b].copy_from_slice(&gr);
        dlogits.data_mut()[b..2 * b].copy_from_slice(&gf);
        let mut parts = vec![(out.logits, dlogits)];

        let mut mdl = 0.0;
        if let Some(m) = &mixup {
            let proj = disc.project(&mut g, &bind, out.features)?;
            let (loss, grad) = mdl_batch(g.value(proj), &m.groups(b, 2 * b))?;
            mdl = loss;
            parts.push((proj, grad.scale(w.lambda_d_mdl)));
        }

        let mut supcon = 0.0;
        if !replay_labels.is_empty() {
            let feats = g.value(out.features);
            let f = feats.shape()[1];
            let replay_start = b + n_fake;
            let sel: Vec<usize> = (0..b).chain(replay_start..rows).collect();
            let mut sub = Vec::with_capacity(sel.len() * f);
            for &i in &sel {
                sub.extend_from_slice(&feats.data()[i * f..(i + 1) * f]);
            }
            let mut labels = vec![data.class_id(); b];
            labels.extend(&replay_labels);
            let (loss, grad) = supcon_with_grad(
                &Tensor::new(vec![sel.len(), f], sub)?,
                &labels,
                w.supcon_temperature,
            )?;
            supcon = loss;
            let mut full = Tensor::zeros(&[rows, f]);
            for (k, &i) in sel.iter().enumerate() {
                for j in 0..f {
                    full.data_mut()[i * f + j] = w.lambda_supcon * grad.data()[k * f + j];
                }
            }
            parts.push((out.features, full));
        }

        let mut r1 = 0.0;
        let mut r1_grads = BTreeMap::new();
        if r1_step {
            let mut seed = Tensor::zeros(&[rows, 1]);
            seed.data_mut()[..b].fill(1.0);
            let gx = g
                .backward(out.logits, Some(seed))?
                .take(xn)
                .expect("input requires grad");
            let v = gx.rows(0, b);
            let gamma = w.r1_gamma * interval as f64;
            r1 = r1_penalty(&v, gamma);
            r1_grads = self.r1_param_grads(&real, &v, gamma)?;
        }

        let parts_d = DiscriminatorLossParts {
            adv,
            r1,
            mdl,
            supcon,
        };
        let total = total_discriminator_loss(&parts_d, &w)?;
        let root = g.scalar_loss(total, parts)?;
        let mut grads = g.backward(root, None)?;
        let lr = self.cfg.schedule.lr_disc;
        let updates: Vec<(String, Tensor)> = bind
            .trainable()
            .iter()
            .map(|(key, id)| {
                let mut grad = grads
                    .take(*id)
                    .unwrap_or_else(|| Tensor::zeros(g.value(*id).shape()));
                if let Some(extra) = r1_grads.get(key) {
                    grad.add_assign(extra);
                }
                (key.clone(), grad)
            })
            .collect();
        for (key, grad) in updates {
            let p = self.state.discriminator.param_mut(&key)?;
            self.opt_d.step(&key, p, &grad, lr)?;
        }
        Ok((parts_d, total))
    }

    /// Parameter gradient of `(γ/2)·mean‖∇ₓD(x)‖²` at the real batch, as a
    /// central difference of parameter gradients along `v = ∇ₓD`.
    fn r1_param_grads(
        &self,
        real: &Tensor,
        v: &Tensor,
        gamma: f64,
    ) -> Result<BTreeMap<String, Tensor>> {
        let b = real.shape()[0] as f64;
        let rms = (v.data().iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        if rms == 0.0 {
            return Ok(BTreeMap::new());
        }
        let eps = R1_PROBE / rms;
        let grad_at = |sign: f64| -> Result<BTreeMap<String, Tensor>> {
            let mut x = real.clone();
            x.add_assign(&v.clone().scale(sign * eps));
            let disc = &self.state.discriminator;
            let mut g = Graph::new();
            let bind = disc.bind(&mut g, true);
            let xn = g.constant(x);
            let out = disc.forward(&mut g, &bind, xn)?;
            let seed = Tensor::full(g.value(out.logits).shape(), 1.0);
            let mut grads = g.backward(out.logits, Some(seed))?;
            Ok(bind
                .trainable()
                .iter()
                .map(|(k, id)| {
                    (
                        k.clone(),
                        grads
                            .take(*id)
                            .unwrap_or_else(|| Tensor::zeros(g.value(*id).shape())),
                    )
                })
                .collect())
        };
        let plus = grad_at(1.0)?;
        let minus = grad_at(-1.0)?;
        let scale = gamma / (b * 2.0 * eps);
        Ok(plus
            .into_iter()
            .map(|(k, mut p)| {
                p.add_assign(&minus[&k].clone().scale(-1.0));
                (k, p.scale(scale))
            })
            .collect())
    }

    fn g_step(&mut self, task: u32, rng: &mut ChaCha8Rng) -> Result<(GeneratorLossParts, f64)> {
        let w = self.cfg.effective_losses();
        let b = self.cfg.schedule.batch_size;
        let z = self.latents(b, rng);
        let mixup = if w.lambda_g_mdl > 0.0 {
            Some(Mixup::sample(
                &z,
                self.cfg.mixup.anchors,
                self.cfg.mixup.groups,
                rng,
            )?)
        } else {
            None
        };
        let z_all = match &mixup {
            Some(m) => Tensor::concat(&[&z, &m.mixed])?,
            None => z,
        };
        let rows = z_all.shape()[0];
        let gen = &self.state.generator;
        let disc = &self.state.discriminator;
        let mut g = Graph::new();
        let gb = gen.bind(&mut g, task, true)?;
        let zn = g.constant(z_all);
        let out = gen.forward(&mut g, &gb, zn, None)?;
        let db = disc.bind(&mut g, false);
        let dout = disc.forward(&mut g, &db, out.image.expect("full pass"))?;
        let scores = g.value(dout.logits).data()[..b].to_vec();
        let adv = adversarial_losses(&[], &scores).generator;
        let mut dlogits = Tensor::zeros(&[rows, 1]);
        dlogits.data_mut()[..b].copy_from_slice(&generator_adv_grads(&scores));
        let mut parts = vec![(dout.logits, dlogits)];

        let mut mdl = 0.0;
        if let Some(m) = &mixup {
            let layers = &self.cfg.mixup.generator_layers;
            let share = 1.0 / layers.len() as f64;
            let groups = m.groups(0, b);
            for &l in layers {
                let act = out.activations[l];
                let (loss, grad) = mdl_batch(g.value(act), &groups)?;
                mdl += share * loss;
                parts.push((act, grad.scale(share * w.lambda_g_mdl)));
            }
        }

        let parts_g = GeneratorLossParts { adv, mdl };
        let total = total_generator_loss(&parts_g, &w)?;
        let root = g.scalar_loss(total, parts)?;
        let mut grads = g.backward(root, None)?;
        let s = &self.cfg.schedule;
        let updates: Vec<(String, Tensor, f64)> = gb
            .trainable()
            .iter()
            .map(|(key, id)| {
                let grad = grads
                    .take(*id)
                    .unwrap_or_else(|| Tensor::zeros(g.value(*id).shape()));
                let lr = if key.starts_with("base/") || key.contains("/full/") {
                    s.lr_base
                } else {
                    s.lr_task
                };
                (key.clone(), grad, lr)
            })
            .collect();
        for (key, grad, lr) in updates {
            let p = self.state.generator.param_mut(&key)?;
            self.opt_g.step(&key, p, &grad, lr)?;
        }
        Ok((parts_g, total))
    }
}
