//! Initialization of a new task from the closest frozen task.
//!
//! Closeness is the Euclidean distance between the centroid of the
//! discriminator features of the new task's real images and the centroid of
//! the features of each past task's generated images.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::afm::TaskModulationSet;
use crate::error::{Error, Result};
use crate::models::{Discriminator, Generator, TaskParams, TaskWeights, BASE_TASK};
use crate::registry::TaskRegistry;
use crate::tensor::Tensor;

pub const DEFAULT_N_PER_TASK: usize = 32;
/// Real images beyond this count are not used for the distance.
pub const MAX_REAL_BATCH: usize = 128;

/// Something that renders images for a task from latents.
pub trait ImageSource {
    fn latent_dim(&self) -> usize;
    fn generate(&self, task: u32, z: &Tensor) -> Result<Tensor>;
}

/// Something that maps images `[B, …]` to features `[B, F]`.
pub trait FeatureSource {
    fn features(&self, images: &Tensor) -> Result<Tensor>;
}

impl ImageSource for Generator {
    fn latent_dim(&self) -> usize {
        self.spec().latent_dim
    }

    fn generate(&self, task: u32, z: &Tensor) -> Result<Tensor> {
        Generator::generate(self, task, z)
    }
}

impl FeatureSource for Discriminator {
    fn features(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.discriminate(images)?.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDistanceReport {
    pub per_task_distance: BTreeMap<u32, f64>,
    pub selected: u32,
    pub batch_size: usize,
    pub n_per_task: usize,
}

impl TaskDistanceReport {
    /// `task_id,distance,selected` rows.
    pub fn to_csv_rows(&self) -> String {
        let mut s = String::new();
        for (t, d) in &self.per_task_distance {
            let _ = writeln!(s, "{t},{d:.9},{}", u8::from(*t == self.selected));
        }
        s
    }
}

fn centroid(features: &Tensor) -> Vec<f64> {
    let n = features.shape()[0];
    let d = features.len() / n;
    let mut c = vec![0.0; d];
    for row in features.data().chunks(d) {
        c.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    c.iter_mut().for_each(|v| *v /= n as f64);
    c
}

/// Argmin over `distances`, ties going to the smallest task id.
pub fn argmin_task(distances: &BTreeMap<u32, f64>) -> Option<u32> {
    // BTreeMap iterates ids in ascending order and `<` keeps the first minimum.
    let mut best: Option<(u32, f64)> = None;
    for (&t, &d) in distances {
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((t, d));
        }
    }
    best.map(|b| b.0)
}

pub fn select_init_task<G: ImageSource, D: FeatureSource>(
    real_batch: &Tensor,
    past_tasks: &[u32],
    generator: &G,
    discriminator: &D,
    n_per_task: usize,
    seed: u64,
) -> Result<TaskDistanceReport> {
    if past_tasks.is_empty() {
        return Err(Error::InvalidArgument(
            "no past tasks to initialize from".into(),
        ));
    }
    if real_batch.is_empty() || real_batch.shape()[0] == 0 {
        return Err(Error::InvalidArgument("empty real batch".into()));
    }
    if n_per_task == 0 {
        return Err(Error::InvalidArgument("n_per_task must be >= 1".into()));
    }
    let real = centroid(&discriminator.features(real_batch)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Tensor::randn(&[n_per_task, generator.latent_dim()], 1.0, &mut rng);
    let mut per_task_distance = BTreeMap::new();
    for &t in past_tasks {
        let fake = centroid(&discriminator.features(&generator.generate(t, &z)?)?);
        if fake.len() != real.len() {
            return Err(Error::Shape(
                "feature widths differ between real and generated batches".into(),
            ));
        }
        let d = real
            .iter()
            .zip(&fake)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if !d.is_finite() {
            return Err(Error::NonFinite(format!("distance to task {t}")));
        }
        per_task_distance.insert(t, d);
    }
    let selected = argmin_task(&per_task_distance).expect("non-empty");
    Ok(TaskDistanceReport {
        per_task_distance,
        selected,
        batch_size: real_batch.shape()[0],
        n_per_task,
    })
}

fn frozen_source<'a>(
    registry: &TaskRegistry,
    generator: &'a Generator,
    from: u32,
) -> Result<&'a TaskParams> {
    if !registry.get(from)?.frozen {
        return Err(Error::TaskNotFrozen(from));
    }
    if from == BASE_TASK {
        return Err(Error::NoModulation(from));
    }
    let tp = generator.task(from)?;
    if !tp.frozen {
        return Err(Error::TaskNotFrozen(from));
    }
    Ok(tp)
}

/// Unfrozen deep copy of a frozen task's modulation under `new_id`.
pub fn clone_modulation(
    registry: &TaskRegistry,
    generator: &Generator,
    from: u32,
    new_id: u32,
) -> Result<TaskModulationSet> {
    frozen_source(registry, generator, from)?
        .modulation()
        .map(|m| m.clone_as(new_id))
        .ok_or(Error::NoModulation(from))
}

/// Unfrozen deep copy of all of a frozen task's parameters (weights or
/// modulation, plus copies).
pub fn clone_task(
    registry: &TaskRegistry,
    generator: &Generator,
    from: u32,
    new_id: u32,
) -> Result<TaskParams> {
    let tp = frozen_source(registry, generator, from)?;
    let weights = match &tp.weights {
        TaskWeights::Modulated(m) => TaskWeights::Modulated(m.clone_as(new_id)),
        TaskWeights::Full(w) => TaskWeights::Full(w.clone()),
    };
    Ok(TaskParams {
        weights,
        copies: tp.copies.clone(),
        frozen: false,
    })
}
