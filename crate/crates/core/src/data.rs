//! Procedural few-shot image classes.
//!
//! Each class is a coloured shape (or stripe pattern) with a sinusoidal
//! texture on a dark background. Intra-class variation comes only from the
//! position, scale and hue jitter of the class spec. Rendering is a pure
//! function of `(spec, shots, seed)`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const CHANNELS: usize = 3;
const BACKGROUND: [f64; 3] = [-0.75, -0.75, -0.7];
const HUES: [f64; 6] = [0.0, 60.0, 120.0, 180.0, 240.0, 300.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Stripes,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [
        ShapeFamily::Circle,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Stripes,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticClassSpec {
    pub class_id: u32,
    pub shape: ShapeFamily,
    /// Degrees in [0, 360).
    pub hue: f64,
    /// Texture cycles across the image width.
    pub texture_frequency: f64,
    /// Maximum centre offset in pixels.
    pub position_jitter: f64,
    /// Maximum relative scale change.
    pub scale_jitter: f64,
    /// Maximum hue offset in degrees.
    pub hue_jitter: f64,
}

impl SyntheticClassSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hue.is_finite()
            && self.texture_frequency.is_finite()
            && self.texture_frequency >= 0.0
            && (0.0..=8.0).contains(&self.position_jitter)
            && (0.0..0.5).contains(&self.scale_jitter)
            && (0.0..=180.0).contains(&self.hue_jitter);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid class spec {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotDataset {
    pub spec: SyntheticClassSpec,
    pub seed: u64,
    /// `[shots, 3, 32, 32]` in [−1, 1].
    pub samples: Tensor,
}

impl FewShotDataset {
    pub fn class_id(&self) -> u32 {
        self.spec.class_id
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Coverage in [0, 1] of a pixel sub-sample at offset `(x, y)` from the
/// shape centre.
fn inside(shape: ShapeFamily, x: f64, y: f64, r: f64, freq: f64) -> bool {
    match shape {
        ShapeFamily::Circle => x * x + y * y <= r * r,
        ShapeFamily::Square => x.abs().max(y.abs()) <= 0.85 * r,
        ShapeFamily::Triangle => {
            let top = -r;
            let bottom = 0.8 * r;
            y >= top && y <= bottom && x.abs() <= r * (y - top) / (bottom - top)
        }
        ShapeFamily::Stripes => {
            let period = IMAGE_SIZE as f64 / (1.0 + freq);
            ((x + y) / period).rem_euclid(1.0) < 0.5 && x.abs().max(y.abs()) <= 1.2 * r
        }
    }
}

fn render_one(spec: &SyntheticClassSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut jitter = |m: f64| {
        if m > 0.0 {
            rng.random_range(-m..=m)
        } else {
            0.0
        }
    };
    let dx = jitter(spec.position_jitter);
    let dy = jitter(spec.position_jitter);
    let scale = 1.0 + jitter(spec.scale_jitter);
    let hue = spec.hue + jitter(spec.hue_jitter);
    let color = hsv_to_rgb(hue, 0.85, 0.95).map(|c| 2.0 * c - 1.0);
    let centre = IMAGE_SIZE as f64 / 2.0;
    let r = 9.0 * scale;
    let n = IMAGE_SIZE;
    let mut img = vec![0.0; CHANNELS * n * n];
    for py in 0..n {
        for px in 0..n {
            let mut cover = 0.0;
            for sy in 0..2 {
                for sx in 0..2 {
                    let x = px as f64 + 0.25 + 0.5 * sx as f64 - centre - dx;
                    let y = py as f64 + 0.25 + 0.5 * sy as f64 - centre - dy;
                    if inside(spec.shape, x, y, r, spec.texture_frequency) {
                        cover += 0.25;
                    }
                }
            }
            let x = px as f64 - centre - dx;
            let shade =
                0.8 + 0.2 * (std::f64::consts::TAU * spec.texture_frequency * x / n as f64).cos();
            for c in 0..CHANNELS {
                let fg = (color[c] + 1.0) * shade - 1.0;
                img[(c * n + py) * n + px] = cover * fg + (1.0 - cover) * BACKGROUND[c];
            }
        }
    }
    img
}

/// `shots` samples of a class, deterministic in `(spec, seed)`.
pub fn render_class(spec: &SyntheticClassSpec, shots: usize, seed: u64) -> Result<FewShotDataset> {
    spec.validate()?;
    if shots == 0 {
        return Err(Error::InvalidArgument("shots must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (u64::from(spec.class_id) << 32));
    let mut data = Vec::with_capacity(shots * CHANNELS * IMAGE_SIZE * IMAGE_SIZE);
    for _ in 0..shots {
        data.extend(render_one(spec, &mut rng));
    }
    let samples = Tensor::new(vec![shots, CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)?;
    Ok(FewShotDataset {
        spec: spec.clone(),
        seed,
        samples,
    })
}

/// All (shape, hue) combinations, with class id `shape_index·6 + hue_index`.
pub fn class_pool(seed: u64) -> Vec<SyntheticClassSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = Vec::new();
    for (si, &shape) in ShapeFamily::ALL.iter().enumerate() {
        for (hi, &hue) in HUES.iter().enumerate() {
            pool.push(SyntheticClassSpec {
                class_id: (si * HUES.len() + hi) as u32,
                shape,
                hue,
                texture_frequency: rng.random_range(1..=3) as f64,
                position_jitter: 1.5,
                scale_jitter: 0.1,
                hue_jitter: 8.0,
            });
        }
    }
    pool
}

/// A base task followed by incremental few-shot tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub seed: u64,
    /// Entry 0 is the base task.
    pub tasks: Vec<FewShotDataset>,
}

impl TaskStream {
    pub fn base(&self) -> &FewShotDataset {
        &self.tasks[0]
    }

    pub fn incremental(&self) -> &[FewShotDataset] {
        &self.tasks[1..]
    }
}

/// `n_tasks` distinct classes drawn from [`class_pool`]; the base task gets
/// `base_multiplier · shots` samples.
pub fn build_task_stream(
    n_tasks: usize,
    shots: usize,
    base_multiplier: usize,
    seed: u64,
) -> Result<TaskStream> {
    if n_tasks < 2 {
        return Err(Error::InvalidArgument(
            "a stream needs a base task and at least one incremental task".into(),
        ));
    }
    let mut pool = class_pool(seed);
    if n_tasks > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "at most {} distinct classes",
            pool.len()
        )));
    }
    if base_multiplier == 0 {
        return Err(Error::InvalidArgument(
            "base_multiplier must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5eed));
    pool.shuffle(&mut rng);
    let tasks = pool
        .into_iter()
        .take(n_tasks)
        .enumerate()
        .map(|(i, spec)| {
            let n = if i == 0 {
                shots * base_multiplier
            } else {
                shots
            };
            render_class(&spec, n, seed.wrapping_add(i as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream { seed, tasks })
}

#[derive(Serialize, Deserialize)]
struct ExportManifest {
    classes: Vec<ExportEntry>,
}

#[derive(Serialize, Deserialize)]
struct ExportEntry {
    file: String,
    seed: u64,
    shape: Vec<usize>,
    spec: SyntheticClassSpec,
}

/// Write each dataset as a raw little-endian `f64` file plus `manifest.toml`.
pub fn export_datasets(dir: &Path, datasets: &[FewShotDataset]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut classes = Vec::new();
    for d in datasets {
        let file = format!("class_{:03}.f64", d.class_id());
        let bytes: Vec<u8> = d
            .samples
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        classes.push(ExportEntry {
            file,
            seed: d.seed,
            shape: d.samples.shape().to_vec(),
            spec: d.spec.clone(),
        });
    }
    let text = toml::to_string_pretty(&ExportManifest { classes })
        .map_err(|e| Error::Config(e.to_string()))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn import_datasets(dir: &Path) -> Result<Vec<FewShotDataset>> {
    let path = dir.join("manifest.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: ExportManifest =
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    manifest
        .classes
        .into_iter()
        .map(|e| {
            let p = dir.join(&e.file);
            let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(FewShotDataset {
                spec: e.spec,
                seed: e.seed,
                samples: Tensor::new(e.shape, data)?,
            })
        })
        .collect()
}

/// Load user images from `root/<class>/<image>` directories, resized to
/// 32×32 RGB in [−1, 1]. Class ids follow sorted directory order.
pub fn load_image_folder(root: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut data = Vec::new();
        let mut count = 0;
        for f in files {
            let Ok(img) = image::open(&f) else { continue };
            let img = img
                .resize_exact(
                    IMAGE_SIZE as u32,
                    IMAGE_SIZE as u32,
                    image::imageops::FilterType::Triangle,
                )
                .to_rgb8();
            for c in 0..CHANNELS {
                for y in 0..IMAGE_SIZE {
                    for x in 0..IMAGE_SIZE {
                        let v = img.get_pixel(x as u32, y as u32)[c] as f64 / 127.5 - 1.0;
                        data.push(v);
                    }
                }
            }
            count += 1;
        }
        if count > 0 {
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            out.push((
                name,
                Tensor::new(vec![count, CHANNELS, IMAGE_SIZE, IMAGE_SIZE], data)?,
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticClassSpec {
        class_pool(0)[3].clone()
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let a = render_class(&spec(), 5, 11).unwrap();
        let b = render_class(&spec(), 5, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.shape(), &[5, 3, 32, 32]);
        assert!(a.samples.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let c = render_class(&spec(), 5, 12).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn zero_jitter_gives_identical_samples() {
        let s = SyntheticClassSpec {
            position_jitter: 0.0,
            scale_jitter: 0.0,
            hue_jitter: 0.0,
            ..spec()
        };
        let d = render_class(&s, 4, 3).unwrap();
        for i in 1..4 {
            assert_eq!(d.samples.rows(i, i + 1).data(), d.samples.rows(0, 1).data());
        }
    }

    #[test]
    fn hundred_shots() {
        let d = render_class(&spec(), 100, 0).unwrap();
        assert_eq!(d.samples.shape(), &[100, 3, 32, 32]);
        assert!(render_class(&spec(), 0, 0).is_err());
        let bad = SyntheticClassSpec {
            scale_jitter: 0.9,
            ..spec()
        };
        assert!(render_class(&bad, 1, 0).is_err());
    }

    #[test]
    fn stream_layout() {
        let s = build_task_stream(4, 100, 10, 7).unwrap();
        assert_eq!(s.tasks.len(), 4);
        assert_eq!(s.base().len(), 1000);
        assert!(s.incremental().iter().all(|d| d.len() == 100));
        let mut ids: Vec<u32> = s.tasks.iter().map(|d| d.class_id()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 4);
        assert_eq!(
            build_task_stream(4, 10, 10, 7).unwrap(),
            build_task_stream(4, 10, 10, 7).unwrap()
        );
        assert!(build_task_stream(1, 10, 10, 7).is_err());
    }

    #[test]
    fn pool_pairs_are_distinct() {
        let pool = class_pool(3);
        for (i, a) in pool.iter().enumerate() {
            for b in &pool[i + 1..] {
                assert!(a.shape != b.shape || a.hue != b.hue);
                assert_ne!(a.class_id, b.class_id);
            }
        }
    }

    #[test]
    fn nearest_centroid_separates_classes() {
        let pool = class_pool(5);
        let train: Vec<_> = pool
            .iter()
            .map(|s| render_class(s, 30, 1).unwrap())
            .collect();
        let test: Vec<_> = pool
            .iter()
            .map(|s| render_class(s, 30, 2).unwrap())
            .collect();
        let dim = CHANNELS * IMAGE_SIZE * IMAGE_SIZE;
        let centroids: Vec<Vec<f64>> = train
            .iter()
            .map(|d| {
                let mut c = vec![0.0; dim];
                for row in d.samples.data().chunks(dim) {
                    c.iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b / d.len() as f64);
                }
                c
            })
            .collect();
        let mut correct = 0;
        let mut total = 0;
        for (label, d) in test.iter().enumerate() {
            for row in d.samples.data().chunks(dim) {
                let best = centroids
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        (
                            i,
                            c.iter()
                                .zip(row)
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum::<f64>(),
                        )
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap()
                    .0;
                correct += usize::from(best == label);
                total += 1;
            }
        }
        let acc = correct as f64 / total as f64;
        assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn export_import_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let s = build_task_stream(3, 4, 2, 1).unwrap();
        export_datasets(dir.path(), &s.tasks).unwrap();
        let back = import_datasets(dir.path()).unwrap();
        assert_eq!(back, s.tasks);
    }

    #[test]
    fn image_folder_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let cls = dir.path().join("cats");
        fs::create_dir_all(&cls).unwrap();
        let img = image::RgbImage::from_pixel(40, 20, image::Rgb([255, 0, 0]));
        img.save(cls.join("a.png")).unwrap();
        let loaded = load_image_folder(dir.path()).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].0, "cats");
        assert_eq!(loaded[0].1.shape(), &[1, 3, 32, 32]);
        assert!((loaded[0].1.data()[0] - 1.0).abs() < 1e-9);
    }
}
