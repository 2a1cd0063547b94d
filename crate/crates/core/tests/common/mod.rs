//! Reference implementations written as plain loops, plus small fixtures
//! shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod checks;

use std::collections::BTreeMap;

use incgan::afm::{init_modulation, ModulationFactors};
use incgan::config::RunConfig;
use incgan::models::{
    ConvBlock, DiscriminatorSpec, Generator, GeneratorSpec, TaskParams, TaskWeights,
};
use incgan::Tensor;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let t = Tensor::randn(&[n], std, rng);
    t.into_data()
}

/// Random point on the probability simplex with every entry > 0.
pub fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    let mut total = 0.0;
    for v in x {
        out.push(v.exp());
        total += v.exp();
    }
    for v in &mut out {
        *v /= total;
    }
    out
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s += p[i] * (p[i].ln() - q[i].ln());
        }
    }
    s
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// KL between the softmax of anchor similarities and the softmax of the
/// mixing coefficients.
pub fn mixup_distance(mixed: &[f64], anchors: &[Vec<f64>], c: &[f64]) -> f64 {
    let mut sims = Vec::new();
    for a in anchors {
        sims.push(cosine(mixed, a));
    }
    kl(&softmax(&sims), &softmax(c))
}

pub fn mix(anchors: &[Vec<f64>], c: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; anchors[0].len()];
    for (i, a) in anchors.iter().enumerate() {
        for j in 0..z.len() {
            z[j] += c[i] * a[j];
        }
    }
    z
}

pub fn supcon(features: &[Vec<f64>], labels: &[u32], t: f64) -> f64 {
    let n = features.len();
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let norm = dot(f, f).sqrt();
            f.iter().map(|v| v / norm).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut anchors = 0;
    for i in 0..n {
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (dot(&z[i], &z[a]) / t).exp();
            }
        }
        let mut li = 0.0;
        let mut pos = 0;
        for p in 0..n {
            if p != i && labels[p] == labels[i] {
                li -= ((dot(&z[i], &z[p]) / t).exp() / denom).ln();
                pos += 1;
            }
        }
        if pos > 0 {
            total += li / pos as f64;
            anchors += 1;
        }
    }
    total / anchors as f64
}

/// Mean and `1/n` covariance of the rows.
pub fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j] / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                cov[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / n;
            }
        }
    }
    (mean, cov)
}

/// Principal square root by the Denman–Beavers iteration.
pub fn sqrtm(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut y = m.clone();
    let mut z = DMatrix::<f64>::identity(n, n);
    for _ in 0..100 {
        let yi = y.clone().try_inverse().expect("invertible iterate");
        let zi = z.clone().try_inverse().expect("invertible iterate");
        let y_next = (&y + zi) * 0.5;
        let z_next = (&z + yi) * 0.5;
        let delta = (&y_next - &y).abs().max();
        y = y_next;
        z = z_next;
        if delta < 1e-15 {
            break;
        }
    }
    y
}

pub fn frechet(m1: &[f64], s1: &DMatrix<f64>, m2: &[f64], s2: &DMatrix<f64>) -> f64 {
    let mut d = 0.0;
    for i in 0..m1.len() {
        d += (m1[i] - m2[i]) * (m1[i] - m2[i]);
    }
    let cross = sqrtm(&(s1 * s2));
    d + s1.trace() + s2.trace() - 2.0 * cross.trace()
}

/// Random symmetric positive definite matrix.
pub fn spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let a = DMatrix::from_vec(d, d, normal_vec(rng, d * d, 1.0));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.5
}

fn lrelu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.2 * v
    }
}

/// First generator block for one latent on the base weights: projection,
/// instance normalization, affine and leaky ReLU.
pub fn generator_block0(gen: &Generator, z: &[f64]) -> Vec<f64> {
    let p = gen.base_params();
    let (w, b, gamma, beta) = (&p["g0.w"], &p["g0.b"], &p["g0.gamma"], &p["g0.beta"]);
    let [c_out, c_in, k, _] = *w.shape() else {
        panic!()
    };
    let mut out = vec![0.0; c_out * k * k];
    for o in 0..c_out {
        for y in 0..k {
            for x in 0..k {
                let mut s = b.data()[o];
                for i in 0..c_in {
                    s += w.data()[((o * c_in + i) * k + y) * k + x] * z[i];
                }
                out[(o * k + y) * k + x] = s;
            }
        }
    }
    let hw = (k * k) as f64;
    for o in 0..c_out {
        let plane = &mut out[o * k * k..(o + 1) * k * k];
        let mean = plane.iter().sum::<f64>() / hw;
        let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
        for v in plane.iter_mut() {
            *v = lrelu((*v - mean) / (var + 1e-5).sqrt() * gamma.data()[o] + beta.data()[o]);
        }
    }
    out
}

/// Same-padded convolution of one `[c, h, w]` image.
pub fn conv(x: &[f64], c_in: usize, size: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let [c_out, _, k, _] = *w.shape() else {
        panic!()
    };
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; c_out * size * size];
    for o in 0..c_out {
        for y in 0..size {
            for xx in 0..size {
                let mut s = b.data()[o];
                for i in 0..c_in {
                    for a in 0..k {
                        for bb in 0..k {
                            let sy = y as isize + a as isize - pad;
                            let sx = xx as isize + bb as isize - pad;
                            if sy < 0 || sx < 0 || sy >= size as isize || sx >= size as isize {
                                continue;
                            }
                            s += w.data()[((o * c_in + i) * k + a) * k + bb]
                                * x[(i * size + sy as usize) * size + sx as usize];
                        }
                    }
                }
                out[(o * size + y) * size + xx] = s;
            }
        }
    }
    out
}

pub fn linear(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let [rows, cols] = *w.shape() else { panic!() };
    (0..rows)
        .map(|r| {
            b.data()[r]
                + (0..cols)
                    .map(|c| w.data()[r * cols + c] * x[c])
                    .sum::<f64>()
        })
        .collect()
}

/// Discriminator projection-head output for one image, assuming every
/// block pools.
pub fn disc_projection(
    params: &BTreeMap<String, Tensor>,
    spec: &DiscriminatorSpec,
    image: &[f64],
) -> Vec<f64> {
    let mut h = image.to_vec();
    let mut size = spec.image_size;
    let mut ch = spec.image_channels;
    for (i, block) in spec.blocks.iter().enumerate() {
        h = conv(
            &h,
            ch,
            size,
            &params[&format!("d{i}.w")],
            &params[&format!("d{i}.b")],
        );
        h.iter_mut().for_each(|v| *v = lrelu(*v));
        ch = block.c_out;
        let half = size / 2;
        let mut pooled = vec![0.0; ch * half * half];
        for c in 0..ch {
            for y in 0..half {
                for x in 0..half {
                    let at = |yy: usize, xx: usize| h[(c * size + yy) * size + xx];
                    pooled[(c * half + y) * half + x] = (at(2 * y, 2 * x)
                        + at(2 * y, 2 * x + 1)
                        + at(2 * y + 1, 2 * x)
                        + at(2 * y + 1, 2 * x + 1))
                        / 4.0;
                }
            }
        }
        h = pooled;
        size = half;
    }
    let f: Vec<f64> = linear(&h, &params["feat.w"], &params["feat.b"])
        .into_iter()
        .map(lrelu)
        .collect();
    linear(&f, &params["proj.w"], &params["proj.b"])
}

/// Generator whose first block yields `2×2×2 = 8` features per latent and
/// whose image is `3×4×4`.
pub fn tiny_generator_spec(latent_dim: usize) -> GeneratorSpec {
    GeneratorSpec {
        latent_dim,
        image_channels: 3,
        image_size: 4,
        blocks: vec![
            ConvBlock::new(2, latent_dim, 2, false),
            ConvBlock::new(3, 2, 3, true),
        ],
        modulated_layers: vec![0, 1],
    }
}

pub fn tiny_discriminator_spec() -> DiscriminatorSpec {
    DiscriminatorSpec {
        image_channels: 3,
        image_size: 4,
        blocks: vec![ConvBlock::new(2, 3, 3, true)],
        feature_dim: 6,
        proj_dim: 4,
    }
}

/// Tiny generator with randomized base copies and a modulated task 1 whose
/// factors are random (so neither factor gradient vanishes).
pub fn tiny_modulated_generator(latent_dim: usize, seed: u64) -> Generator {
    let mut r = rng(seed ^ 0x5eed);
    let mut gen = Generator::new(tiny_generator_spec(latent_dim), seed).unwrap();
    let copies: Vec<String> = gen
        .spec()
        .copied_params()
        .into_iter()
        .map(|p| p.0)
        .collect();
    for name in &copies {
        let p = gen.param_mut(&format!("base/{name}")).unwrap();
        let n = p.len();
        let base = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
        *p = Tensor::new(
            vec![n],
            normal_vec(&mut r, n, 0.3)
                .into_iter()
                .map(|v| v + base)
                .collect(),
        )
        .unwrap();
    }
    gen.freeze_base();
    let set = init_modulation(1, &gen.spec().modulated_dims(), 2, seed).unwrap();
    let params = TaskParams {
        weights: TaskWeights::Modulated(set),
        copies: gen.base_copies(),
        frozen: false,
    };
    gen.insert_task(1, params).unwrap();
    for (layer, dims) in gen.spec().modulated_dims() {
        let (rows, cols) = dims.matrix_shape();
        let u = Tensor::new(vec![rows, 2], normal_vec(&mut r, rows * 2, 0.7)).unwrap();
        let v = Tensor::new(vec![2, cols], normal_vec(&mut r, 2 * cols, 0.7)).unwrap();
        gen.set_factors(1, &layer, ModulationFactors::new(u, v).unwrap())
            .unwrap();
    }
    gen
}

/// Central finite differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max|a − n| / max(max|a|, max|n|)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Full-size images with narrow layers and a handful of steps, small
/// enough to train in well under a second per task.
pub fn tiny_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed: Some(seed),
        ..Default::default()
    };
    cfg.data.n_tasks = 3;
    cfg.data.shots = 12;
    cfg.data.base_multiplier = 2;
    cfg.schedule.base_steps = 4;
    cfg.schedule.task_steps = 3;
    cfg.schedule.batch_size = 8;
    cfg.schedule.r1_interval = 2;
    cfg.architecture.generator = GeneratorSpec {
        latent_dim: 8,
        image_channels: 3,
        image_size: 32,
        blocks: vec![
            ConvBlock::new(8, 8, 4, false),
            ConvBlock::new(4, 8, 3, true),
            ConvBlock::new(4, 4, 3, true),
            ConvBlock::new(3, 4, 3, true),
        ],
        modulated_layers: vec![0, 1, 2, 3],
    };
    cfg.architecture.discriminator = DiscriminatorSpec {
        image_channels: 3,
        image_size: 32,
        blocks: vec![
            ConvBlock::new(4, 3, 3, true),
            ConvBlock::new(4, 4, 3, true),
            ConvBlock::new(8, 4, 3, true),
        ],
        feature_dim: 16,
        proj_dim: 8,
    };
    cfg.architecture.rank = 2;
    cfg.mixup.anchors = 2;
    cfg.mixup.groups = 2;
    cfg.dai.n_per_task = 4;
    cfg.eval.n_gen = 16;
    cfg.validate().unwrap();
    cfg
}
