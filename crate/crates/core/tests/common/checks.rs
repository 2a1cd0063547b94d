//! Library-versus-reference comparisons. Each function returns the worst
//! discrepancy it saw.

use incgan::autograd::Graph;
use incgan::eval::{frechet_distance, FeatureStats};
use incgan::losses::{
    adversarial_losses, discriminator_adv_grads, generator_adv_grads, kl_divergence, mdl_batch,
    mix_latents, softmax_distribution, supcon_with_grad, MdlGroup,
};
use incgan::models::{Discriminator, Generator};
use incgan::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::*;

pub const INSTANCES: u64 = 20;

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    t.data().chunks(t.len() / n).map(<[f64]>::to_vec).collect()
}

fn group(n: usize, c: &[f64]) -> Vec<MdlGroup> {
    vec![MdlGroup {
        mixed: n,
        anchors: (0..n).collect(),
        coefficients: c.to_vec(),
    }]
}

pub fn softmax_error() -> f64 {
    (0..INSTANCES)
        .map(|s| {
            let mut r = rng(s);
            let n = r.random_range(1..=4);
            let x = normal_vec(&mut r, n, 2.0);
            let lib = softmax_distribution(&x).unwrap();
            softmax(&x)
                .iter()
                .zip(&lib)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

pub fn kl_error() -> f64 {
    (0..INSTANCES)
        .map(|s| {
            let mut r = rng(100 + s);
            let n = r.random_range(2..=4);
            let (p, q) = (simplex(&mut r, n), simplex(&mut r, n));
            (kl_divergence(&p, &q).unwrap() - kl(&p, &q)).abs()
        })
        .fold(0.0, f64::max)
}

/// Mixup distance on the first generator block, from latent mixing through
/// the KL, with `N ≤ 4` anchors and 8 features per sample.
pub fn generator_mdl_error() -> f64 {
    (0..INSTANCES)
        .map(|s| {
            let mut r = rng(200 + s);
            let latent = r.random_range(2..=4);
            let n = r.random_range(2..=4);
            let gen = tiny_modulated_generator(latent, s);
            let anchors: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut r, latent, 1.0)).collect();
            let c = simplex(&mut r, n);

            let feats: Vec<Vec<f64>> = anchors.iter().map(|z| generator_block0(&gen, z)).collect();
            let reference = mixup_distance(&generator_block0(&gen, &mix(&anchors, &c)), &feats, &c);

            let mut z = anchors.clone();
            z.push(mix_latents(&anchors, &c).unwrap());
            let z = Tensor::new(vec![n + 1, latent], z.concat()).unwrap();
            let act = gen.activations(0, &z, 0).unwrap();
            let (lib, _) = mdl_batch(&act, &group(n, &c)).unwrap();
            (lib - reference).abs()
        })
        .fold(0.0, f64::max)
}

fn projections(d: &Discriminator, images: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let bind = d.bind(&mut g, false);
    let x = g.constant(images.clone());
    let out = d.forward(&mut g, &bind, x).unwrap();
    let p = d.project(&mut g, &bind, out.features).unwrap();
    g.value(p).clone()
}

/// Mixup distance on discriminator projections of images, `N ≤ 4` anchors
/// and 4 projected features per sample.
pub fn discriminator_mdl_error() -> f64 {
    (0..INSTANCES)
        .map(|s| {
            let mut r = rng(300 + s);
            let n = r.random_range(2..=4);
            let d = Discriminator::new(tiny_discriminator_spec(), s).unwrap();
            let images = Tensor::randn(&[n + 1, 3, 4, 4], 1.0, &mut r);
            let c = simplex(&mut r, n);

            let proj: Vec<Vec<f64>> = rows_of(&images)
                .iter()
                .map(|im| disc_projection(d.params(), d.spec(), im))
                .collect();
            let reference = mixup_distance(&proj[n], &proj[..n], &c);
            let (lib, _) = mdl_batch(&projections(&d, &images), &group(n, &c)).unwrap();
            (lib - reference).abs()
        })
        .fold(0.0, f64::max)
}

pub fn supcon_error() -> f64 {
    (0..INSTANCES)
        .map(|s| {
            let mut r = rng(400 + s);
            let n = r.random_range(2..=4);
            let d = r.random_range(2..=8);
            let mut labels: Vec<u32> = (0..n).map(|_| r.random_range(0..2)).collect();
            labels[1] = labels[0];
            let t = r.random_range(0.1..1.0);
            let f = Tensor::randn(&[n, d], 1.0, &mut r);
            let (lib, _) = supcon_with_grad(&f, &labels, t).unwrap();
            (lib - supcon(&rows_of(&f), &labels, t)).abs()
        })
        .fold(0.0, f64::max)
}

/// Moments of `N ≤ 4` samples and the distance between random Gaussians
/// of dimension ≤ 8.
pub fn frechet_error() -> f64 {
    (0..INSTANCES)
        .map(|s| {
            let mut r = rng(500 + s);
            let d = r.random_range(1..=8);
            let n = r.random_range(2..=4);
            let f = Tensor::randn(&[n, d], 1.0, &mut r);
            let stats = FeatureStats::from_features(&f).unwrap();
            let (mean, cov) = moments(&rows_of(&f));
            let mut err = 0.0f64;
            for a in 0..d {
                err = err.max((stats.mean[a] - mean[a]).abs());
                for b in 0..d {
                    err = err.max((stats.cov[(a, b)] - cov[a][b]).abs());
                }
            }

            let (m1, m2) = (normal_vec(&mut r, d, 1.0), normal_vec(&mut r, d, 1.0));
            let (s1, s2) = (spd(&mut r, d), spd(&mut r, d));
            let stats = |m: &[f64], c: &DMatrix<f64>| FeatureStats {
                mean: DVector::from_column_slice(m),
                cov: c.clone(),
                count: 4,
            };
            let lib = frechet_distance(&stats(&m1, &s1), &stats(&m2, &s2)).unwrap();
            err.max((lib - frechet(&m1, &s1, &m2, &s2)).abs())
        })
        .fold(0.0, f64::max)
}

const H: f64 = 1e-6;

/// Analytic and numeric gradients of `loss` with respect to generator
/// parameter `key`, where `analytic` holds the tape gradients by key.
fn compare_gen_param(
    gen: &Generator,
    key: &str,
    analytic: &BTreeMap<String, Tensor>,
    loss: &dyn Fn(&Generator) -> f64,
) -> f64 {
    let x = {
        let mut g = gen.clone();
        g.param_mut(key).unwrap().clone()
    };
    let numeric = numeric_grad(x.data(), H, |p| {
        let mut g = gen.clone();
        *g.param_mut(key).unwrap() = Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap();
        loss(&g)
    });
    rel_error(analytic[key].data(), &numeric)
}

fn compare_disc_param(
    d: &Discriminator,
    key: &str,
    analytic: &BTreeMap<String, Tensor>,
    loss: &dyn Fn(&Discriminator) -> f64,
) -> f64 {
    let x = d.params()[key.strip_prefix("disc/").unwrap()].clone();
    let numeric = numeric_grad(x.data(), H, |p| {
        let mut dd = d.clone();
        *dd.param_mut(key).unwrap() = Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap();
        loss(&dd)
    });
    rel_error(analytic[key].data(), &numeric)
}

fn factor_keys(gen: &Generator) -> Vec<String> {
    gen.spec()
        .modulated_dims()
        .into_iter()
        .flat_map(|(l, _)| [format!("task/1/mod/{l}.U"), format!("task/1/mod/{l}.V")])
        .collect()
}

/// Gradient of `Σ R ⊙ G(z)` for a modulated task with respect to every
/// modulation factor.
pub fn modulation_grad_error(seed: u64) -> f64 {
    let mut r = rng(600 + seed);
    let gen = tiny_modulated_generator(3, seed);
    let z = Tensor::randn(&[3, 3], 1.0, &mut r);
    let weights = Tensor::randn(&[3, 3, 4, 4], 1.0, &mut r);
    let loss = |g: &Generator| dot(g.generate(1, &z).unwrap().data(), weights.data());

    let mut g = Graph::new();
    let bind = gen.bind(&mut g, 1, true).unwrap();
    let zn = g.constant(z.clone());
    let out = gen.forward(&mut g, &bind, zn, None).unwrap();
    let mut grads = g
        .backward(out.image.unwrap(), Some(weights.clone()))
        .unwrap();
    let analytic: BTreeMap<String, Tensor> = bind
        .trainable()
        .iter()
        .map(|(k, id)| (k.clone(), grads.take(*id).unwrap()))
        .collect();
    factor_keys(&gen)
        .iter()
        .map(|k| compare_gen_param(&gen, k, &analytic, &loss))
        .fold(0.0, f64::max)
}

/// Gradient of the first-block mixup distance with respect to the
/// modulation factors.
pub fn generator_mdl_grad_error(seed: u64) -> f64 {
    let mut r = rng(700 + seed);
    let n = 3;
    let gen = tiny_modulated_generator(4, seed);
    let z = Tensor::randn(&[n + 1, 4], 1.0, &mut r);
    let c = simplex(&mut r, n);
    let groups = group(n, &c);
    let loss = |g: &Generator| {
        mdl_batch(&g.activations(1, &z, 0).unwrap(), &groups)
            .unwrap()
            .0
    };

    let mut g = Graph::new();
    let bind = gen.bind(&mut g, 1, true).unwrap();
    let zn = g.constant(z.clone());
    let out = gen.forward(&mut g, &bind, zn, Some(0)).unwrap();
    let act = out.activations[0];
    let (_, d_act) = mdl_batch(g.value(act), &groups).unwrap();
    let mut grads = g.backward(act, Some(d_act)).unwrap();
    let analytic: BTreeMap<String, Tensor> = bind
        .trainable()
        .iter()
        .filter_map(|(k, id)| grads.take(*id).map(|t| (k.clone(), t)))
        .collect();
    [
        "task/1/mod/g0.U",
        "task/1/mod/g0.V",
        "task/1/copy/g0.gamma",
        "task/1/copy/g0.beta",
    ]
    .iter()
    .map(|k| compare_gen_param(&gen, k, &analytic, &loss))
    .fold(0.0, f64::max)
}

fn disc_keys(d: &Discriminator, except: &[&str]) -> Vec<String> {
    d.params()
        .keys()
        .filter(|k| !except.contains(&k.as_str()))
        .map(|k| format!("disc/{k}"))
        .collect()
}

/// Gradient of the projection-head mixup distance with respect to the
/// discriminator parameters it depends on.
pub fn discriminator_mdl_grad_error(seed: u64) -> f64 {
    let mut r = rng(800 + seed);
    let n = 3;
    let d = Discriminator::new(tiny_discriminator_spec(), seed).unwrap();
    let images = Tensor::randn(&[n + 1, 3, 4, 4], 1.0, &mut r);
    let c = simplex(&mut r, n);
    let groups = group(n, &c);
    let loss = |dd: &Discriminator| mdl_batch(&projections(dd, &images), &groups).unwrap().0;

    let mut g = Graph::new();
    let bind = d.bind(&mut g, true);
    let x = g.constant(images.clone());
    let out = d.forward(&mut g, &bind, x).unwrap();
    let p = d.project(&mut g, &bind, out.features).unwrap();
    let (_, dp) = mdl_batch(g.value(p), &groups).unwrap();
    let mut grads = g.backward(p, Some(dp)).unwrap();
    let analytic: BTreeMap<String, Tensor> = bind
        .trainable()
        .iter()
        .filter_map(|(k, id)| grads.take(*id).map(|t| (k.clone(), t)))
        .collect();
    disc_keys(&d, &["logit.w", "logit.b"])
        .iter()
        .map(|k| compare_disc_param(&d, k, &analytic, &loss))
        .fold(0.0, f64::max)
}

pub fn supcon_grad_error(seed: u64) -> f64 {
    let mut r = rng(900 + seed);
    let n = 6;
    let dim = 5;
    let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
    let f = Tensor::randn(&[n, dim], 1.0, &mut r);
    let (_, analytic) = supcon_with_grad(&f, &labels, 0.3).unwrap();
    let numeric = numeric_grad(f.data(), H, |p| {
        supcon_with_grad(
            &Tensor::new(vec![n, dim], p.to_vec()).unwrap(),
            &labels,
            0.3,
        )
        .unwrap()
        .0
    });
    rel_error(analytic.data(), &numeric)
}

/// Discriminator loss with respect to every discriminator parameter and
/// generator loss with respect to the modulation factors.
pub fn adversarial_grad_error(seed: u64) -> f64 {
    let mut r = rng(1000 + seed);
    let d = Discriminator::new(tiny_discriminator_spec(), seed).unwrap();
    let real = Tensor::randn(&[3, 3, 4, 4], 1.0, &mut r);
    let fake = Tensor::randn(&[3, 3, 4, 4], 1.0, &mut r);
    let both = Tensor::concat(&[&real, &fake]).unwrap();
    let d_loss = |dd: &Discriminator| {
        let (s, _) = dd.discriminate(&both).unwrap();
        adversarial_losses(&s[..3], &s[3..]).discriminator
    };
    let mut g = Graph::new();
    let bind = d.bind(&mut g, true);
    let x = g.constant(both.clone());
    let out = d.forward(&mut g, &bind, x).unwrap();
    let s = g.value(out.logits).data().to_vec();
    let (gr, gf) = discriminator_adv_grads(&s[..3], &s[3..]);
    let seed_t = Tensor::new(vec![6, 1], [gr, gf].concat()).unwrap();
    let mut grads = g.backward(out.logits, Some(seed_t)).unwrap();
    let analytic: BTreeMap<String, Tensor> = bind
        .trainable()
        .iter()
        .filter_map(|(k, id)| grads.take(*id).map(|t| (k.clone(), t)))
        .collect();
    let d_err = disc_keys(&d, &["proj.w", "proj.b"])
        .iter()
        .map(|k| compare_disc_param(&d, k, &analytic, &d_loss))
        .fold(0.0, f64::max);

    let gen = tiny_modulated_generator(3, seed);
    let z = Tensor::randn(&[4, 3], 1.0, &mut r);
    let g_loss = |gg: &Generator| {
        let (s, _) = d.discriminate(&gg.generate(1, &z).unwrap()).unwrap();
        adversarial_losses(&[], &s).generator
    };
    let mut g = Graph::new();
    let gb = gen.bind(&mut g, 1, true).unwrap();
    let zn = g.constant(z.clone());
    let gout = gen.forward(&mut g, &gb, zn, None).unwrap();
    let db = d.bind(&mut g, false);
    let dout = d.forward(&mut g, &db, gout.image.unwrap()).unwrap();
    let s = g.value(dout.logits).data().to_vec();
    let seed_t = Tensor::new(vec![4, 1], generator_adv_grads(&s)).unwrap();
    let mut grads = g.backward(dout.logits, Some(seed_t)).unwrap();
    let analytic: BTreeMap<String, Tensor> = gb
        .trainable()
        .iter()
        .filter_map(|(k, id)| grads.take(*id).map(|t| (k.clone(), t)))
        .collect();
    let g_err = factor_keys(&gen)
        .iter()
        .map(|k| compare_gen_param(&gen, k, &analytic, &g_loss))
        .fold(0.0, f64::max);
    d_err.max(g_err)
}
