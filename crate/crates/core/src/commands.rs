//! Command implementations behind the `incgan` binary.
//!
//! Run directory layout:
//!
//! ```text
//! <run>/config.toml          resolved config, every default materialized
//! <run>/data/                exported task stream
//! <run>/ledger.csv           one row per optimizer step
//! <run>/dai.csv              task_id,candidate,distance,selected
//! <run>/checkpoints/task_NNN checkpoint after each task
//! <run>/metrics.csv          task_id,class_id,toy_fid,added_params,step_ms
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::TrainingState;
use crate::config::RunConfig;
use crate::data::{
    build_task_stream, export_datasets, import_datasets, FewShotDataset, TaskStream,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_task, metrics_csv, parse_metrics_csv, report_table, ReportTable, TaskMetrics,
};
use crate::trainer::{mean_step_ms, LedgerRow, Trainer, LEDGER_COLUMNS};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "INCGAN_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
const LOCK_FILE: &str = ".lock";

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT), PathBuf::from)
}

/// Explicit `output_dir`, else `<root>/<ablation>-seed<seed>`.
pub fn resolve_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(d) = &cfg.output_dir {
        return Ok(d.clone());
    }
    let seed = cfg
        .seed
        .ok_or_else(|| Error::Config("a seed is required".into()))?;
    Ok(output_root().join(format!("{}-seed{seed}", cfg.ablation.name())))
}

fn write(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn task_stream(cfg: &RunConfig) -> Result<TaskStream> {
    let seed = cfg
        .data_seed()
        .ok_or_else(|| Error::Config("a seed is required to build the data".into()))?;
    build_task_stream(
        cfg.data.n_tasks,
        cfg.data.shots,
        cfg.data.base_multiplier,
        seed,
    )
}

/// Render the task stream into `dir` (default `<run>/data`).
pub fn cmd_gen_data(cfg: &RunConfig, dir: Option<&Path>) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = match dir {
        Some(d) => d.to_path_buf(),
        None => resolve_run_dir(cfg)?.join("data"),
    };
    export_datasets(&dir, &task_stream(cfg)?.tasks)?;
    Ok(dir)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    pub metrics: Vec<TaskMetrics>,
}

pub fn checkpoint_dir(run_dir: &Path, task: u32) -> PathBuf {
    run_dir.join("checkpoints").join(format!("task_{task:03}"))
}

/// Train the whole stream, checkpointing after every task, then evaluate.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    if cfg.seed.is_none() {
        return Err(Error::Config("train requires an explicit seed".into()));
    }
    let run_dir = resolve_run_dir(cfg)?;
    let _lock = RunLock::acquire(&run_dir)?;
    if run_dir.join("ledger.csv").exists() {
        return Err(Error::Config(format!(
            "{} already holds a run",
            run_dir.display()
        )));
    }
    write(&run_dir.join("config.toml"), &cfg.to_toml()?)?;
    let stream = task_stream(cfg)?;
    export_datasets(&run_dir.join("data"), &stream.tasks)?;

    let mut trainer = Trainer::new(cfg.clone())?;
    trainer.set_ledger_path(&run_dir.join("ledger.csv"))?;
    let dai_path = run_dir.join("dai.csv");
    write(&dai_path, "task_id,candidate,distance,selected\n")?;
    trainer.train_base_task(stream.base())?;
    trainer.state.save(&checkpoint_dir(&run_dir, 0))?;
    for data in stream.incremental() {
        let out = trainer.train_incremental_task(data)?;
        if let Some(report) = &out.dai {
            let mut f = OpenOptions::new()
                .append(true)
                .open(&dai_path)
                .map_err(|e| Error::io(&dai_path, e))?;
            for row in report.to_csv_rows().lines() {
                writeln!(f, "{},{row}", out.task_id).map_err(|e| Error::io(&dai_path, e))?;
            }
        }
        trainer.state.save(&checkpoint_dir(&run_dir, out.task_id))?;
    }
    let metrics = evaluate_state(&trainer.state, cfg, &stream.tasks, trainer.ledger())?;
    write(&run_dir.join("metrics.csv"), &metrics_csv(&metrics))?;
    Ok(TrainSummary { run_dir, metrics })
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerRow>> {
    let text = read(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LEDGER_COLUMNS.join(",").as_str()) {
        return Err(Error::Config(format!(
            "{} has an unexpected header",
            path.display()
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let bad = || Error::Config(format!("bad ledger row {l:?}"));
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != LEDGER_COLUMNS.len() {
                return Err(bad());
            }
            let n = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(LedgerRow {
                task: f[0].parse().map_err(|_| bad())?,
                step: f[1].parse().map_err(|_| bad())?,
                d: crate::losses::DiscriminatorLossParts {
                    adv: n(2)?,
                    r1: n(3)?,
                    mdl: n(4)?,
                    supcon: n(5)?,
                },
                d_total: n(6)?,
                g: crate::losses::GeneratorLossParts {
                    adv: n(7)?,
                    mdl: n(8)?,
                },
                g_total: n(9)?,
                d_ms: n(10)?,
                g_ms: n(11)?,
                step_ms: n(12)?,
            })
        })
        .collect()
}

/// Metrics for every frozen task in `state`, matching tasks to datasets by
/// class id.
pub fn evaluate_state(
    state: &TrainingState,
    cfg: &RunConfig,
    datasets: &[FewShotDataset],
    ledger: &[LedgerRow],
) -> Result<Vec<TaskMetrics>> {
    let seed = cfg.seed.unwrap_or(0);
    state
        .registry
        .records()
        .iter()
        .filter(|r| r.frozen)
        .map(|r| {
            let real = datasets
                .iter()
                .find(|d| d.class_id() == r.class_id)
                .ok_or_else(|| Error::Config(format!("no data for class {}", r.class_id)))?;
            evaluate_task(
                &state.generator,
                &state.extractor,
                r.task_id,
                r.class_id,
                cfg.eval.n_gen,
                &real.samples,
                mean_step_ms(ledger, r.task_id),
                seed,
            )
        })
        .collect()
}

/// Evaluate a checkpoint. Data and ledger are taken from the enclosing run
/// directory when present, otherwise the data is regenerated from `cfg`.
pub fn cmd_eval(checkpoint: &Path, cfg: &RunConfig) -> Result<String> {
    cfg.validate()?;
    let state = TrainingState::load(checkpoint)?;
    let run_dir = checkpoint.parent().and_then(Path::parent);
    let data = match run_dir.map(|d| d.join("data")) {
        Some(d) if d.join("manifest.toml").exists() => import_datasets(&d)?,
        _ => task_stream(cfg)?.tasks,
    };
    let ledger = match run_dir.map(|d| d.join("ledger.csv")) {
        Some(p) if p.exists() => read_ledger(&p)?,
        _ => Vec::new(),
    };
    Ok(metrics_csv(&evaluate_state(&state, cfg, &data, &ledger)?))
}

/// Toy-FID table over run directories. Runs sharing an ablation setting
/// (different seeds) are averaged into one column.
pub fn cmd_report(run_dirs: &[PathBuf]) -> Result<ReportTable> {
    if run_dirs.is_empty() {
        return Err(Error::InvalidArgument("no run directories given".into()));
    }
    let mut columns: Vec<(String, Vec<Vec<TaskMetrics>>)> = Vec::new();
    for dir in run_dirs {
        let cfg = RunConfig::from_toml(&read(&dir.join("config.toml"))?)?;
        let metrics = parse_metrics_csv(&read(&dir.join("metrics.csv"))?)?;
        let name = cfg.ablation.name();
        match columns.iter_mut().find(|c| c.0 == name) {
            Some(c) => c.1.push(metrics),
            None => columns.push((name, vec![metrics])),
        }
    }
    let runs: Vec<(String, Vec<TaskMetrics>)> = columns
        .into_iter()
        .map(|(name, seeds)| {
            let mut mean = seeds[0].clone();
            for m in &mut mean {
                let vals: Vec<f64> = seeds
                    .iter()
                    .filter_map(|s| s.iter().find(|x| x.task_id == m.task_id).map(|x| x.toy_fid))
                    .collect();
                m.toy_fid = vals.iter().sum::<f64>() / vals.len() as f64;
            }
            (name, mean)
        })
        .collect();
    Ok(report_table(&runs))
}

/// Write `report.csv`, `report.txt` and `report.png` into `dir`.
pub fn write_report(table: &ReportTable, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("report.csv"), &table.to_csv())?;
    let mut f = File::create(dir.join("report.txt")).map_err(|e| Error::io(dir, e))?;
    f.write_all(table.to_text().as_bytes())
        .map_err(|e| Error::io(dir, e))?;
    table.write_plot(&dir.join("report.png"))
}
