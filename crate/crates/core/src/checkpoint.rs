//! Checkpoint container.
//!
//! A checkpoint is a directory holding
//!
//! - `arrays.bin`: every array back to back as little-endian `f64`,
//! - `manifest.txt`: one line per array, `name<TAB>shape<TAB>offset<TAB>rank`,
//!   where `shape` is `x`-separated, `offset` counts elements into
//!   `arrays.bin` and `rank` is the factor rank for `U`/`V` arrays (`-`
//!   otherwise),
//! - `state.toml`: architecture, task records and flags.
//!
//! Array names: `base/<param>`, `task/<id>/<layer>/{U,V}`,
//! `task/<id>/full/<param>`, `task/<id>/copy/<param>`, `disc/<param>`,
//! `extractor/<param>`, `replay/<id>/{latents,reference}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::afm::{ModulationFactors, TaskModulationSet};
use crate::error::{Error, Result};
use crate::eval::FeatureExtractor;
use crate::models::{
    Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, TaskParams, TaskWeights,
};
use crate::registry::{ReplayTable, TaskKind, TaskRecord, TaskRegistry};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.txt";
const ARRAYS: &str = "arrays.bin";
const STATE: &str = "state.toml";

fn rank_of(name: &str, t: &Tensor) -> Option<usize> {
    match (name.rsplit('/').next(), t.shape()) {
        (Some("U"), [_, r]) => Some(*r),
        (Some("V"), [r, _]) => Some(*r),
        _ => None,
    }
}

/// Write named arrays and a metadata document into `dir`. An existing
/// checkpoint at `dir` is replaced; any other existing content is an error.
pub fn write_container(dir: &Path, arrays: &BTreeMap<String, Tensor>, state: &str) -> Result<()> {
    if dir.exists()
        && !dir.join(MANIFEST).exists()
        && fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some()
    {
        return Err(Error::Checkpoint(format!(
            "{} exists and is not a checkpoint",
            dir.display()
        )));
    }
    let staging = PathBuf::from(format!("{}.partial", dir.display()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    let mut manifest = format!("# checkpoint format {FORMAT_VERSION}\n");
    let mut bytes = Vec::new();
    let mut offset = 0usize;
    for (name, t) in arrays {
        if name.chars().any(char::is_whitespace) {
            return Err(Error::Checkpoint(format!(
                "array name {name:?} contains whitespace"
            )));
        }
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let rank = rank_of(name, t).map_or("-".to_string(), |r| r.to_string());
        let _ = writeln!(manifest, "{name}\t{}\t{offset}\t{rank}", shape.join("x"));
        bytes.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        offset += t.len();
    }
    for (file, content) in [
        (ARRAYS, bytes.as_slice()),
        (MANIFEST, manifest.as_bytes()),
        (STATE, state.as_bytes()),
    ] {
        let p = staging.join(file);
        fs::write(&p, content).map_err(|e| Error::io(&p, e))?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

pub fn read_container(dir: &Path) -> Result<(BTreeMap<String, Tensor>, String)> {
    let read = |f: &str| {
        let p = dir.join(f);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let manifest =
        String::from_utf8(read(MANIFEST)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let bytes = read(ARRAYS)?;
    let state = String::from_utf8(read(STATE)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint(
            "array file is not a whole number of f64 values".into(),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut arrays = BTreeMap::new();
    for line in manifest
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
    {
        let bad = || Error::Checkpoint(format!("bad manifest line {line:?}"));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad());
        }
        let shape: Vec<usize> = if f[1].is_empty() {
            Vec::new()
        } else {
            f[1].split('x')
                .map(|s| s.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?
        };
        let offset: usize = f[2].parse().map_err(|_| bad())?;
        let len: usize = shape.iter().product();
        let data = values.get(offset..offset + len).ok_or_else(bad)?.to_vec();
        let t = Tensor::new(shape, data)?;
        let rank = rank_of(f[0], &t).map_or("-".to_string(), |r| r.to_string());
        if rank != f[3] {
            return Err(bad());
        }
        arrays.insert(f[0].to_string(), t);
    }
    Ok((arrays, state))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateDoc {
    format: u32,
    generator: GeneratorSpec,
    discriminator: DiscriminatorSpec,
    base_frozen: bool,
    extractor_seed: u64,
    #[serde(default)]
    generator_tasks: Vec<GenTaskDoc>,
    #[serde(default)]
    registry: Vec<RecordDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenTaskDoc {
    task_id: u32,
    kind: TaskKind,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordDoc {
    task_id: u32,
    class_id: u32,
    shots: usize,
    kind: TaskKind,
    init_from: Option<u32>,
    frozen: bool,
    replay_seed: Option<u64>,
    #[serde(default)]
    replay_checksums: Vec<String>,
}

/// Everything needed to continue training or evaluate.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub registry: TaskRegistry,
    pub extractor: FeatureExtractor,
}

fn take(arrays: &mut BTreeMap<String, Tensor>, name: &str) -> Result<Tensor> {
    arrays
        .remove(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
}

fn take_prefix(arrays: &mut BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    let keys: Vec<String> = arrays
        .keys()
        .filter(|k| k.starts_with(prefix))
        .cloned()
        .collect();
    keys.into_iter()
        .map(|k| {
            let v = arrays.remove(&k).expect("listed");
            (k[prefix.len()..].to_string(), v)
        })
        .collect()
}

impl TrainingState {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut arrays = BTreeMap::new();
        for (k, v) in self.generator.base_params() {
            arrays.insert(format!("base/{k}"), v.clone());
        }
        let mut generator_tasks = Vec::new();
        for (id, tp) in self.generator.tasks() {
            let kind = match &tp.weights {
                TaskWeights::Modulated(set) => {
                    for (layer, f) in &set.layer_masks {
                        arrays.insert(format!("task/{id}/{layer}/U"), f.u().clone());
                        arrays.insert(format!("task/{id}/{layer}/V"), f.v().clone());
                    }
                    TaskKind::Modulated
                }
                TaskWeights::Full(ws) => {
                    for (k, v) in ws {
                        arrays.insert(format!("task/{id}/full/{k}"), v.clone());
                    }
                    TaskKind::Full
                }
            };
            for (k, v) in &tp.copies {
                arrays.insert(format!("task/{id}/copy/{k}"), v.clone());
            }
            generator_tasks.push(GenTaskDoc {
                task_id: *id,
                kind,
                frozen: tp.frozen,
            });
        }
        for (k, v) in self.discriminator.params() {
            arrays.insert(format!("disc/{k}"), v.clone());
        }
        for (k, v) in self.extractor.params() {
            arrays.insert(format!("extractor/{k}"), v.clone());
        }
        let mut registry = Vec::new();
        for r in self.registry.records() {
            if let Some(t) = &r.replay {
                arrays.insert(format!("replay/{}/latents", r.task_id), t.latents.clone());
                arrays.insert(
                    format!("replay/{}/reference", r.task_id),
                    t.reference.clone(),
                );
            }
            registry.push(RecordDoc {
                task_id: r.task_id,
                class_id: r.class_id,
                shots: r.shots,
                kind: r.kind,
                init_from: r.init_from,
                frozen: r.frozen,
                replay_seed: r.replay.as_ref().map(|t| t.seed),
                replay_checksums: r
                    .replay
                    .as_ref()
                    .map(|t| t.checksums.clone())
                    .unwrap_or_default(),
            });
        }
        let doc = StateDoc {
            format: FORMAT_VERSION,
            generator: self.generator.spec().clone(),
            discriminator: self.discriminator.spec().clone(),
            base_frozen: self.generator.base_frozen(),
            extractor_seed: self.extractor.seed(),
            generator_tasks,
            registry,
        };
        let state = toml::to_string_pretty(&doc).map_err(|e| Error::Checkpoint(e.to_string()))?;
        write_container(dir, &arrays, &state)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (mut arrays, state) = read_container(dir)?;
        let doc: StateDoc = toml::from_str(&state).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {}",
                doc.format
            )));
        }
        let mut tasks = BTreeMap::new();
        for t in &doc.generator_tasks {
            let prefix = format!("task/{}/", t.task_id);
            let copies = take_prefix(&mut arrays, &format!("{prefix}copy/"));
            let weights = match t.kind {
                TaskKind::Full => {
                    TaskWeights::Full(take_prefix(&mut arrays, &format!("{prefix}full/")))
                }
                TaskKind::Modulated => {
                    let mut layer_masks = BTreeMap::new();
                    for (layer, _) in doc.generator.modulated_dims() {
                        let u = take(&mut arrays, &format!("{prefix}{layer}/U"))?;
                        let v = take(&mut arrays, &format!("{prefix}{layer}/V"))?;
                        layer_masks.insert(layer, ModulationFactors::new(u, v)?);
                    }
                    TaskWeights::Modulated(TaskModulationSet {
                        task_id: t.task_id,
                        layer_masks,
                        frozen: t.frozen,
                    })
                }
                TaskKind::Base => {
                    return Err(Error::Checkpoint("generator task with base kind".into()))
                }
            };
            tasks.insert(
                t.task_id,
                TaskParams {
                    weights,
                    copies,
                    frozen: t.frozen,
                },
            );
        }
        let base = take_prefix(&mut arrays, "base/");
        let generator = Generator::from_parts(doc.generator, base, doc.base_frozen, tasks)?;
        let discriminator =
            Discriminator::from_parts(doc.discriminator, take_prefix(&mut arrays, "disc/"))?;
        let extractor = FeatureExtractor::from_params(
            doc.extractor_seed,
            take_prefix(&mut arrays, "extractor/"),
        )?;
        let mut records = Vec::new();
        for r in doc.registry {
            let replay = match r.replay_seed {
                Some(seed) => Some(ReplayTable {
                    seed,
                    latents: take(&mut arrays, &format!("replay/{}/latents", r.task_id))?,
                    reference: take(&mut arrays, &format!("replay/{}/reference", r.task_id))?,
                    checksums: r.replay_checksums,
                }),
                None => None,
            };
            records.push(TaskRecord {
                task_id: r.task_id,
                class_id: r.class_id,
                shots: r.shots,
                kind: r.kind,
                init_from: r.init_from,
                frozen: r.frozen,
                replay,
            });
        }
        if let Some(k) = arrays.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected array {k}")));
        }
        Ok(Self {
            generator,
            discriminator,
            registry: TaskRegistry::from_records(records)?,
            extractor,
        })
    }
}
