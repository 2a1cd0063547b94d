//! Toy-FID and per-task metric tables.
//!
//! Features come from a small convolutional network with seeded random
//! weights that is never trained. Fréchet distances between Gaussian fits of
//! those features are only comparable between runs sharing the extractor
//! seed, which is why the extractor weights travel with each checkpoint.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::models::{Generator, BASE_TASK, LEAKY_SLOPE};
use crate::tensor::Tensor;

pub const DEFAULT_N_GEN: usize = 256;
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0xfea7;
const EXTRACTOR_CHANNELS: [usize; 4] = [3, 16, 32, 64];
const EVAL_BATCH: usize = 64;

/// Frozen random conv net: three conv + leaky-relu + 2×2 average-pool
/// stages, then a global average over space.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    seed: u64,
    params: BTreeMap<String, Tensor>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        for (i, pair) in EXTRACTOR_CHANNELS.windows(2).enumerate() {
            let (c_in, c_out) = (pair[0], pair[1]);
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            params.insert(
                format!("e{i}.w"),
                Tensor::randn(&[c_out, c_in, 3, 3], std, &mut rng),
            );
            params.insert(format!("e{i}.b"), Tensor::randn(&[c_out], 0.1, &mut rng));
        }
        Self { seed, params }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn from_params(seed: u64, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let reference = Self::new(seed);
        for (k, v) in &reference.params {
            match params.get(k) {
                Some(t) if t.shape() == v.shape() => {}
                _ => {
                    return Err(Error::Checkpoint(format!(
                        "extractor parameter {k} missing or misshapen"
                    )))
                }
            }
        }
        Ok(Self { seed, params })
    }

    pub fn feature_dim(&self) -> usize {
        EXTRACTOR_CHANNELS[EXTRACTOR_CHANNELS.len() - 1]
    }

    /// `[B, 3, H, W]` → `[B, feature_dim]`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4
            || s[1] != EXTRACTOR_CHANNELS[0]
            || !s[2].is_multiple_of(8)
            || !s[3].is_multiple_of(8)
        {
            return Err(Error::Shape(format!("extractor input {s:?}")));
        }
        let mut out = Vec::with_capacity(s[0] * self.feature_dim());
        let mut start = 0;
        while start < s[0] {
            let end = (start + EVAL_BATCH).min(s[0]);
            let mut g = Graph::new();
            let mut h = g.constant(images.rows(start, end));
            for i in 0..EXTRACTOR_CHANNELS.len() - 1 {
                let w = g.constant(self.params[&format!("e{i}.w")].clone());
                let b = g.constant(self.params[&format!("e{i}.b")].clone());
                h = g.conv2d(h, w, b)?;
                h = g.leaky_relu(h, LEAKY_SLOPE);
                h = g.avg_pool2(h)?;
            }
            let v = g.value(h);
            let (c, hw) = (v.shape()[1], v.shape()[2] * v.shape()[3]);
            for plane in v.data().chunks(hw) {
                out.push(plane.iter().sum::<f64>() / hw as f64);
            }
            debug_assert_eq!(out.len(), end * c);
            start = end;
        }
        Tensor::new(vec![s[0], self.feature_dim()], out)
    }
}

/// Gaussian moments of a feature set. The covariance uses the `1/n`
/// normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    /// Moments of the rows of a `[N, D]` matrix.
    pub fn from_features(features: &Tensor) -> Result<Self> {
        let [n, d] = features.shape() else {
            return Err(Error::Shape(format!(
                "features {:?}, expected [N, D]",
                features.shape()
            )));
        };
        let (n, d) = (*n, *d);
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 samples, got {n}"
            )));
        }
        let x = DMatrix::from_row_slice(n, d, features.data());
        let mean = DVector::from_iterator(d, x.column_iter().map(|c| c.sum() / n as f64));
        let mut centred = x;
        for mut row in centred.row_iter_mut() {
            row -= mean.transpose();
        }
        let mut cov = centred.transpose() * &centred / n as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self {
            mean,
            cov,
            count: n,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn feature_stats(images: &Tensor, extractor: &FeatureExtractor) -> Result<FeatureStats> {
    if images.shape().first().copied().unwrap_or(0) < 2 {
        return Err(Error::InvalidArgument("need at least 2 images".into()));
    }
    FeatureStats::from_features(&extractor.features(images)?)
}

/// Symmetric PSD square root with negative eigenvalues clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// ‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2}), with the trace of the cross
/// term computed as Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2}).
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "feature dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let diff = &a.mean - &b.mean;
    let ra = psd_sqrt(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let d = diff.norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

pub fn toy_fid(extractor: &FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<f64> {
    frechet_distance(&feature_stats(a, extractor)?, &feature_stats(b, extractor)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub task_id: u32,
    pub class_id: u32,
    pub toy_fid: f64,
    pub added_params: usize,
    pub step_ms: f64,
}

/// Stable column order of the metrics CSV.
pub const METRICS_COLUMNS: [&str; 5] =
    ["task_id", "class_id", "toy_fid", "added_params", "step_ms"];

/// Seeded evaluation latents, shared by every task so metrics are paired.
pub fn eval_latents(n: usize, latent_dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
    Tensor::randn(&[n, latent_dim], 1.0, &mut rng)
}

/// Toy-FID of `n_gen` generated images against `real`, plus accounting.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_task(
    generator: &Generator,
    extractor: &FeatureExtractor,
    task_id: u32,
    class_id: u32,
    n_gen: usize,
    real: &Tensor,
    step_ms: f64,
    seed: u64,
) -> Result<TaskMetrics> {
    if n_gen < 2 {
        return Err(Error::InvalidArgument("n_gen must be >= 2".into()));
    }
    let added_params = if task_id == BASE_TASK {
        if !generator.base_frozen() {
            return Err(Error::TaskNotFrozen(task_id));
        }
        0
    } else {
        let t = generator.task(task_id)?;
        if !t.frozen {
            return Err(Error::TaskNotFrozen(task_id));
        }
        t.param_count()
    };
    let z = eval_latents(n_gen, generator.spec().latent_dim, seed);
    let mut fake = Vec::with_capacity(n_gen);
    let mut start = 0;
    while start < n_gen {
        let end = (start + EVAL_BATCH).min(n_gen);
        fake.push(generator.generate(task_id, &z.rows(start, end))?);
        start = end;
    }
    let fake = Tensor::concat(&fake.iter().collect::<Vec<_>>())?;
    let toy_fid = toy_fid(extractor, &fake, real)?;
    let m = TaskMetrics {
        task_id,
        class_id,
        toy_fid,
        added_params,
        step_ms,
    };
    if !(m.toy_fid.is_finite() && m.step_ms.is_finite()) {
        return Err(Error::NonFinite(format!("metrics for task {task_id}")));
    }
    Ok(m)
}

pub fn metrics_csv(rows: &[TaskMetrics]) -> String {
    let mut s = METRICS_COLUMNS.join(",");
    s.push('\n');
    for m in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.3}",
            m.task_id, m.class_id, m.toy_fid, m.added_params, m.step_ms
        );
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<TaskMetrics>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != METRICS_COLUMNS.join(",") {
        return Err(Error::Config(format!(
            "unexpected metrics header {header:?}"
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Config(format!("bad metrics row {l:?}"));
            if f.len() != METRICS_COLUMNS.len() {
                return Err(bad());
            }
            Ok(TaskMetrics {
                task_id: f[0].parse().map_err(|_| bad())?,
                class_id: f[1].parse().map_err(|_| bad())?,
                toy_fid: f[2].parse().map_err(|_| bad())?,
                added_params: f[3].parse().map_err(|_| bad())?,
                step_ms: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Toy-FID per task (rows) and configuration (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<(u32, Vec<Option<f64>>)>,
}

pub fn report_table(runs: &[(String, Vec<TaskMetrics>)]) -> ReportTable {
    let columns = runs.iter().map(|r| r.0.clone()).collect();
    let mut by_task: BTreeMap<u32, Vec<Option<f64>>> = BTreeMap::new();
    for (j, (_, metrics)) in runs.iter().enumerate() {
        for m in metrics {
            by_task
                .entry(m.task_id)
                .or_insert_with(|| vec![None; runs.len()])[j] = Some(m.toy_fid);
        }
    }
    ReportTable {
        columns,
        rows: by_task.into_iter().collect(),
    }
}

impl ReportTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task");
        for c in &self.columns {
            s.push(',');
            s.push_str(c);
        }
        s.push('\n');
        for (task, vals) in &self.rows {
            s.push_str(&task.to_string());
            for v in vals {
                s.push(',');
                if let Some(v) = v {
                    let _ = write!(s, "{v:.4}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|(t, vals)| {
                let mut r = vec![format!("task {t}")];
                r.extend(
                    vals.iter()
                        .map(|v| v.map_or("-".into(), |v| format!("{v:.3}"))),
                );
                r
            })
            .collect();
        let mut header = vec!["".to_string()];
        header.extend(self.columns.iter().cloned());
        let widths: Vec<usize> = (0..header.len())
            .map(|j| {
                cells
                    .iter()
                    .map(|r| r[j].len())
                    .chain([header[j].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |r: &[String]| {
            r.iter()
                .zip(&widths)
                .enumerate()
                .map(|(j, (c, w))| {
                    if j == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut s = line(&header);
        s.push('\n');
        for r in &cells {
            s.push_str(&line(r));
            s.push('\n');
        }
        s
    }

    /// Grouped bar chart: one group per task, one bar per column, all on a
    /// shared linear scale starting at zero.
    pub fn write_plot(&self, path: &Path) -> Result<()> {
        const PALETTE: [[u8; 3]; 6] = [
            [66, 133, 244],
            [219, 68, 55],
            [244, 180, 0],
            [15, 157, 88],
            [171, 71, 188],
            [0, 172, 193],
        ];
        let (bar_w, gap, height) = (12u32, 10u32, 200u32);
        let ncol = self.columns.len().max(1) as u32;
        let width = gap + self.rows.len() as u32 * (ncol * bar_w + gap);
        let max = self
            .rows
            .iter()
            .flat_map(|r| r.1.iter().flatten())
            .fold(0.0f64, |a, &b| a.max(b));
        let mut img =
            image::RgbImage::from_pixel(width.max(1), height, image::Rgb([255, 255, 255]));
        for (i, (_, vals)) in self.rows.iter().enumerate() {
            let x0 = gap + i as u32 * (ncol * bar_w + gap);
            for (j, v) in vals.iter().enumerate() {
                let Some(v) = v else { continue };
                let h = if max > 0.0 {
                    ((v / max) * (height - 10) as f64).round() as u32
                } else {
                    0
                };
                for x in x0 + j as u32 * bar_w..x0 + (j as u32 + 1) * bar_w - 1 {
                    for y in height - h..height {
                        img.put_pixel(x, y, image::Rgb(PALETTE[j % PALETTE.len()]));
                    }
                }
            }
        }
        img.save(path)?;
        Ok(())
    }
}

/// Tile images `[N, 3, H, W]` in [−1, 1] into a PNG grid `cols` wide.
pub fn write_image_grid(images: &Tensor, cols: usize, path: &Path) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 3 || cols == 0 {
        return Err(Error::Shape(format!("image grid input {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let rows = n.div_ceil(cols);
    let mut img = image::RgbImage::new((cols * (w + 1)) as u32, (rows * (h + 1)) as u32);
    for k in 0..n {
        let (ox, oy) = ((k % cols) * (w + 1), (k / cols) * (h + 1));
        for y in 0..h {
            for x in 0..w {
                let px = |c: usize| {
                    let v = images.data()[((k * 3 + c) * h + y) * w + x];
                    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
                };
                img.put_pixel(
                    (ox + x) as u32,
                    (oy + y) as u32,
                    image::Rgb([px(0), px(1), px(2)]),
                );
            }
        }
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn stats_1d(mu: f64, var: f64) -> FeatureStats {
        FeatureStats {
            mean: DVector::from_element(1, mu),
            cov: DMatrix::from_element(1, 1, var),
            count: 2,
        }
    }

    fn random_images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[n, 3, 16, 16], 0.5, &mut rng).map(|v| v.clamp(-1.0, 1.0))
    }

    #[test]
    fn one_dimensional_closed_form() {
        assert!(
            (frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(1.0, 1.0)).unwrap() - 1.0).abs()
                < 1e-12
        );
        assert!(
            (frechet_distance(&stats_1d(0.0, 1.0), &stats_1d(0.0, 4.0)).unwrap() - 1.0).abs()
                < 1e-12
        );
    }

    #[test]
    fn identity_and_symmetry() {
        let ex = FeatureExtractor::new(1);
        let a = feature_stats(&random_images(20, 1), &ex).unwrap();
        let b = feature_stats(&random_images(20, 2), &ex).unwrap();
        assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-8, "{ab} vs {ba}");
        assert!(ab > 0.0);
    }

    #[test]
    fn identical_images_have_zero_covariance() {
        let ex = FeatureExtractor::new(2);
        let one = random_images(1, 3);
        let imgs = Tensor::concat(&[&one, &one, &one]).unwrap();
        let s = feature_stats(&imgs, &ex).unwrap();
        assert!(s.cov.iter().all(|v| v.abs() < 1e-15));
        assert!(feature_stats(&one, &ex).is_err());
    }

    #[test]
    fn duplication_preserves_moments() {
        let ex = FeatureExtractor::new(2);
        let imgs = random_images(6, 4);
        let twice = Tensor::concat(&[&imgs, &imgs]).unwrap();
        let a = feature_stats(&imgs, &ex).unwrap();
        let b = feature_stats(&twice, &ex).unwrap();
        assert!((&a.mean - &b.mean).amax() < 1e-12);
        assert!((&a.cov - &b.cov).amax() < 1e-12);
    }

    #[test]
    fn noise_level_orders_distance() {
        let ex = FeatureExtractor::new(DEFAULT_EXTRACTOR_SEED);
        for seed in 0..5 {
            let real = random_images(64, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy = |sigma: f64, rng: &mut ChaCha8Rng| {
                let n = Normal::new(0.0, sigma).unwrap();
                let noise = Tensor::from_fn(real.shape(), |_| n.sample(rng));
                let mut out = real.clone();
                out.add_assign(&noise);
                out
            };
            let light = noisy(0.05, &mut rng);
            let heavy = noisy(0.3, &mut rng);
            let fl = toy_fid(&ex, &real, &light).unwrap();
            let fh = toy_fid(&ex, &real, &heavy).unwrap();
            assert!(fh > fl, "seed {seed}: heavy {fh} light {fl}");
        }
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = DMatrix::from_fn(5, 5, |_, _| Normal::new(0.0, 1.0).unwrap().sample(&mut rng));
        let m = &a * a.transpose();
        let r = psd_sqrt(&m);
        assert!((&r * &r - &m).amax() < 1e-10);
    }

    #[test]
    fn table_layout() {
        let mk = |t, f| TaskMetrics {
            task_id: t,
            class_id: t,
            toy_fid: f,
            added_params: 0,
            step_ms: 1.0,
        };
        let runs = vec![
            ("afm".to_string(), vec![mk(1, 3.0), mk(2, 4.0), mk(3, 5.0)]),
            ("full".to_string(), vec![mk(1, 2.0), mk(2, 3.5), mk(3, 6.0)]),
        ];
        let t = report_table(&runs);
        assert_eq!(t.rows.len(), 3);
        assert!(t.rows.iter().all(|r| r.1.len() == 2));
        assert_eq!(t.to_csv().lines().count(), 4);
        assert_eq!(t.to_text().lines().count(), 4);
        let dir = tempfile::tempdir().unwrap();
        t.write_plot(&dir.path().join("fid.png")).unwrap();
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let rows = vec![TaskMetrics {
            task_id: 2,
            class_id: 7,
            toy_fid: 1.25,
            added_params: 6327,
            step_ms: 12.5,
        }];
        let back = parse_metrics_csv(&metrics_csv(&rows)).unwrap();
        assert_eq!(back, rows);
    }
}
