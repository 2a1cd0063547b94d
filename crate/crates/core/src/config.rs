//! Run configuration.
//!
//! TOML with a versioned schema; unknown keys are rejected and every field
//! has a default, so an empty file (plus `schema_version`) is a valid
//! config. [`RunConfig::to_toml`] materializes all defaults.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::models::{DiscriminatorSpec, GeneratorSpec};

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Base task plus incremental tasks.
    pub n_tasks: usize,
    /// Samples per incremental task.
    pub shots: usize,
    /// The base task gets `base_multiplier · shots` samples.
    pub base_multiplier: usize,
    /// Seed of the synthetic class stream; the run seed when absent.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_tasks: 4,
            shots: 100,
            base_multiplier: 10,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub base_steps: usize,
    pub task_steps: usize,
    pub batch_size: usize,
    /// Generator base weights, and full per-task kernels in the control.
    pub lr_base: f64,
    /// Modulation factors and per-task copies.
    pub lr_task: f64,
    pub lr_disc: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// R1 is applied every `r1_interval` discriminator steps, scaled by the
    /// interval.
    pub r1_interval: usize,
    /// Largest replay count allowed for a single past task per step.
    pub replay_cap: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_steps: 1500,
            task_steps: 300,
            batch_size: 16,
            lr_base: 2e-4,
            lr_task: 1e-3,
            lr_disc: 2e-4,
            beta1: 0.0,
            beta2: 0.99,
            r1_interval: 4,
            replay_cap: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    /// Modulation rank for every modulated layer.
    pub rank: usize,
    /// Per-layer rank overrides keyed by layer id (`g0`, `g1`, ...).
    pub rank_overrides: BTreeMap<String, usize>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorSpec::default(),
            discriminator: DiscriminatorSpec::default(),
            rank: 4,
            rank_overrides: BTreeMap::new(),
        }
    }
}

impl ArchitectureConfig {
    pub fn rank_for(&self, layer: &str) -> usize {
        self.rank_overrides.get(layer).copied().unwrap_or(self.rank)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixupConfig {
    /// Anchors per mixup group.
    pub anchors: usize,
    /// Mixup groups per step.
    pub groups: usize,
    /// Generator blocks whose activations enter the generator-side loss.
    pub generator_layers: Vec<usize>,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            anchors: 4,
            groups: 4,
            generator_layers: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaiConfig {
    /// Generated images per candidate task.
    pub n_per_task: usize,
}

impl Default for DaiConfig {
    fn default() -> Self {
        Self {
            n_per_task: crate::dai::DEFAULT_N_PER_TASK,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_gen: usize,
    pub extractor_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_gen: crate::eval::DEFAULT_N_GEN,
            extractor_seed: crate::eval::DEFAULT_EXTRACTOR_SEED,
        }
    }
}

/// Component toggles. `afm = false` trains full per-task kernels instead of
/// modulation; `mdl`/`supcon = false` zero the matching loss weights;
/// `dai = false` starts every task from a fresh modulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub afm: bool,
    pub mdl: bool,
    pub supcon: bool,
    pub dai: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            afm: true,
            mdl: true,
            supcon: true,
            dai: true,
        }
    }
}

impl Ablation {
    pub const BASELINE: Ablation = Ablation {
        afm: false,
        mdl: false,
        supcon: false,
        dai: false,
    };
    pub const AFM_ONLY: Ablation = Ablation {
        afm: true,
        mdl: false,
        supcon: false,
        dai: false,
    };
    pub const FULL: Ablation = Ablation {
        afm: true,
        mdl: true,
        supcon: true,
        dai: true,
    };

    /// The cumulative ladder: baseline, +AFM, +MDL, +SupCon, +DAI.
    pub fn ladder() -> [(&'static str, Ablation); 5] {
        [
            ("baseline", Self::BASELINE),
            ("+afm", Self::AFM_ONLY),
            (
                "+mdl",
                Ablation {
                    mdl: true,
                    ..Self::AFM_ONLY
                },
            ),
            (
                "+supcon",
                Ablation {
                    mdl: true,
                    supcon: true,
                    ..Self::AFM_ONLY
                },
            ),
            ("+dai", Self::FULL),
        ]
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        for (on, n) in [
            (self.afm, "afm"),
            (self.mdl, "mdl"),
            (self.supcon, "supcon"),
            (self.dai, "dai"),
        ] {
            if on {
                parts.push(n);
            }
        }
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Required before training; may come from the command line.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `<output root>/<config name>-seed<seed>`.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub losses: LossWeights,
    #[serde(default)]
    pub mixup: MixupConfig,
    #[serde(default)]
    pub dai: DaiConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: None,
            output_dir: None,
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            architecture: ArchitectureConfig::default(),
            losses: LossWeights::default(),
            mixup: MixupConfig::default(),
            dai: DaiConfig::default(),
            eval: EvalConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        check(self.schema_version == SCHEMA_VERSION, || {
            format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )
        })?;
        check(!(self.ablation.dai && !self.ablation.afm), || {
            "ablation.dai requires ablation.afm: initialization copies modulation factors".into()
        })?;
        let d = &self.data;
        check(d.n_tasks >= 2, || "data.n_tasks must be >= 2".into())?;
        check(d.shots >= 1 && d.base_multiplier >= 1, || {
            "data.shots and data.base_multiplier must be >= 1".into()
        })?;
        let s = &self.schedule;
        check(s.batch_size >= 2, || {
            "schedule.batch_size must be >= 2".into()
        })?;
        for (name, lr) in [
            ("lr_base", s.lr_base),
            ("lr_task", s.lr_task),
            ("lr_disc", s.lr_disc),
        ] {
            check(lr.is_finite() && lr > 0.0, || {
                format!("schedule.{name} must be positive")
            })?;
        }
        check(
            (0.0..1.0).contains(&s.beta1) && (0.0..1.0).contains(&s.beta2),
            || "schedule.beta1/beta2 must lie in [0, 1)".into(),
        )?;
        check(s.r1_interval >= 1, || {
            "schedule.r1_interval must be >= 1".into()
        })?;
        check(s.replay_cap >= 1, || {
            "schedule.replay_cap must be >= 1".into()
        })?;
        let a = &self.architecture;
        a.generator.validate()?;
        a.discriminator.validate()?;
        check(
            a.generator.image_channels == a.discriminator.image_channels
                && a.generator.image_size == a.discriminator.image_size,
            || "generator and discriminator image shapes differ".into(),
        )?;
        check(
            a.generator.image_channels == crate::data::CHANNELS
                && a.generator.image_size == crate::data::IMAGE_SIZE,
            || "the synthetic data is 3x32x32".into(),
        )?;
        for (id, dims) in a.generator.modulated_dims() {
            let r = a.rank_for(&id);
            check(r >= 1 && r <= dims.max_rank(), || {
                format!("rank {r} is invalid for layer {id}")
            })?;
        }
        for id in a.rank_overrides.keys() {
            check(
                a.generator.modulated_dims().iter().any(|d| &d.0 == id),
                || format!("rank override for unmodulated layer {id}"),
            )?;
        }
        self.losses.validate()?;
        let m = &self.mixup;
        check(m.anchors >= 1 && m.groups >= 1, || {
            "mixup.anchors and mixup.groups must be >= 1".into()
        })?;
        check(m.anchors * m.groups <= s.batch_size, || {
            "mixup.anchors * mixup.groups must not exceed schedule.batch_size".into()
        })?;
        let n_blocks = a.generator.blocks.len();
        check(
            !m.generator_layers.is_empty() && m.generator_layers.iter().all(|&l| l < n_blocks),
            || format!("mixup.generator_layers must name blocks below {n_blocks}"),
        )?;
        check(self.dai.n_per_task >= 1, || {
            "dai.n_per_task must be >= 1".into()
        })?;
        check(self.eval.n_gen >= 2, || "eval.n_gen must be >= 2".into())?;
        Ok(())
    }

    /// Loss weights after the ablation toggles.
    pub fn effective_losses(&self) -> LossWeights {
        let mut w = self.losses;
        if !self.ablation.mdl {
            w.lambda_g_mdl = 0.0;
            w.lambda_d_mdl = 0.0;
        }
        if !self.ablation.supcon {
            w.lambda_supcon = 0.0;
        }
        w
    }

    pub fn data_seed(&self) -> Option<u64> {
        self.data.seed.or(self.seed)
    }

    /// Dotted keys whose values differ between two configs.
    pub fn diff(&self, other: &RunConfig) -> Result<Vec<String>> {
        fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
            match v {
                toml::Value::Table(t) => {
                    for (k, v) in t {
                        let key = if prefix.is_empty() {
                            k.clone()
                        } else {
                            format!("{prefix}.{k}")
                        };
                        flatten(&key, v, out);
                    }
                }
                other => {
                    out.insert(prefix.to_string(), other.to_string());
                }
            }
        }
        let flat = |c: &RunConfig| -> Result<BTreeMap<String, String>> {
            let v = toml::Value::try_from(c).map_err(|e| Error::Config(e.to_string()))?;
            let mut out = BTreeMap::new();
            flatten("", &v, &mut out);
            Ok(out)
        };
        let (a, b) = (flat(self)?, flat(other)?);
        let mut keys: Vec<String> = a.keys().chain(b.keys()).cloned().collect();
        keys.sort();
        keys.dedup();
        Ok(keys.into_iter().filter(|k| a.get(k) != b.get(k)).collect())
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigOverrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub base_steps: Option<usize>,
    pub task_steps: Option<usize>,
    pub afm: Option<bool>,
    pub mdl: Option<bool>,
    pub supcon: Option<bool>,
    pub dai: Option<bool>,
}

impl ConfigOverrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if self.seed.is_some() {
            cfg.seed = self.seed;
        }
        if self.output_dir.is_some() {
            cfg.output_dir.clone_from(&self.output_dir);
        }
        if let Some(v) = self.base_steps {
            cfg.schedule.base_steps = v;
        }
        if let Some(v) = self.task_steps {
            cfg.schedule.task_steps = v;
        }
        let a = &mut cfg.ablation;
        for (slot, v) in [
            (&mut a.afm, self.afm),
            (&mut a.mdl, self.mdl),
            (&mut a.supcon, self.supcon),
            (&mut a.dai, self.dai),
        ] {
            if let Some(v) = v {
                *slot = v;
            }
        }
        cfg.validate()
    }
}
