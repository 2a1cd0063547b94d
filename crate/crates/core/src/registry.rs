//! Ordered record of trained tasks and their replay tables.
//!
//! A replay table pins a handful of seeded latents together with the
//! checksums (and the images themselves) a frozen task produced for them
//! right after it was frozen. Later training must leave every table valid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Generator, BASE_TASK};
use crate::tensor::Tensor;

pub const REPLAY_TABLE_SIZE: usize = 16;
/// Largest elementwise difference accepted when checksums differ, e.g. on
/// another machine with a different floating-point reduction order.
pub const REPLAY_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayTable {
    pub seed: u64,
    /// `[n, latent_dim]`
    pub latents: Tensor,
    /// One checksum per latent row.
    pub checksums: Vec<String>,
    /// `[n, C, H, W]`
    pub reference: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayCheck {
    pub task_id: u32,
    pub exact: bool,
    pub max_abs_diff: f64,
}

impl ReplayCheck {
    pub fn passed(&self) -> bool {
        self.exact || self.max_abs_diff <= REPLAY_TOLERANCE
    }
}

fn per_image_checksums(images: &Tensor) -> Vec<String> {
    (0..images.shape()[0])
        .map(|i| images.rows(i, i + 1).checksum())
        .collect()
}

/// Seeded latents for replay and validation of one task.
pub fn replay_latents(task_id: u32, n: usize, latent_dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(task_id) << 40) ^ 0x7e91a);
    Tensor::randn(&[n, latent_dim], 1.0, &mut rng)
}

impl ReplayTable {
    pub fn record(generator: &Generator, task_id: u32, seed: u64) -> Result<Self> {
        let latents = replay_latents(
            task_id,
            REPLAY_TABLE_SIZE,
            generator.spec().latent_dim,
            seed,
        );
        let reference = generator.generate(task_id, &latents)?;
        Ok(Self {
            seed,
            checksums: per_image_checksums(&reference),
            latents,
            reference,
        })
    }

    pub fn validate(&self, generator: &Generator, task_id: u32) -> Result<ReplayCheck> {
        let now = generator.generate(task_id, &self.latents)?;
        let exact = per_image_checksums(&now) == self.checksums;
        Ok(ReplayCheck {
            task_id,
            exact,
            max_abs_diff: now.max_abs_diff(&self.reference),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Base,
    Modulated,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRecord {
    pub task_id: u32,
    pub class_id: u32,
    pub shots: usize,
    pub kind: TaskKind,
    /// Task the weights were initialized from, if any.
    pub init_from: Option<u32>,
    pub frozen: bool,
    pub replay: Option<ReplayTable>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskRegistry {
    records: Vec<TaskRecord>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[TaskRecord] {
        &self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn get(&self, task_id: u32) -> Result<&TaskRecord> {
        self.records
            .iter()
            .find(|r| r.task_id == task_id)
            .ok_or(Error::UnknownTask(task_id))
    }

    pub fn task_ids(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.task_id).collect()
    }

    pub fn frozen_ids(&self) -> Vec<u32> {
        self.records
            .iter()
            .filter(|r| r.frozen)
            .map(|r| r.task_id)
            .collect()
    }

    pub fn next_task_id(&self) -> u32 {
        self.records
            .iter()
            .map(|r| r.task_id + 1)
            .max()
            .unwrap_or(BASE_TASK)
    }

    /// Append a record. Task ids must be new and ascending and class ids
    /// unique; the first record must be the base task.
    pub fn push(&mut self, record: TaskRecord) -> Result<()> {
        if self.records.is_empty() != (record.task_id == BASE_TASK) {
            return Err(Error::InvalidArgument(
                "the base task must be registered first, and only once".into(),
            ));
        }
        if record.task_id < self.next_task_id() && !self.records.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "task {} is already registered",
                record.task_id
            )));
        }
        if self.records.iter().any(|r| r.class_id == record.class_id) {
            return Err(Error::InvalidArgument(format!(
                "class {} is already registered",
                record.class_id
            )));
        }
        self.records.push(record);
        Ok(())
    }

    /// Mark a task frozen and store its replay table.
    pub fn freeze(&mut self, generator: &Generator, task_id: u32, seed: u64) -> Result<()> {
        let frozen_in_model = if task_id == BASE_TASK {
            generator.base_frozen()
        } else {
            generator.task(task_id)?.frozen
        };
        if !frozen_in_model {
            return Err(Error::TaskNotFrozen(task_id));
        }
        let table = ReplayTable::record(generator, task_id, seed)?;
        let rec = self
            .records
            .iter_mut()
            .find(|r| r.task_id == task_id)
            .ok_or(Error::UnknownTask(task_id))?;
        rec.frozen = true;
        rec.replay = Some(table);
        Ok(())
    }

    /// Re-generate every frozen task's replay table.
    pub fn validate_all(&self, generator: &Generator) -> Result<Vec<ReplayCheck>> {
        self.records
            .iter()
            .filter(|r| r.frozen)
            .map(|r| {
                let table = r.replay.as_ref().ok_or_else(|| {
                    Error::Checkpoint(format!("task {} has no replay table", r.task_id))
                })?;
                table.validate(generator, r.task_id)
            })
            .collect()
    }

    pub(crate) fn from_records(records: Vec<TaskRecord>) -> Result<Self> {
        let mut reg = Self::new();
        for r in records {
            reg.push(r)?;
        }
        Ok(reg)
    }
}
