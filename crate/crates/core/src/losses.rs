//! Training objectives.
//!
//! Every loss here is a pure function returning its value and, where the
//! trainer needs it, the gradient with respect to its direct inputs. The
//! trainer wraps those pairs into tape nodes with
//! [`Graph::scalar_loss`](crate::autograd::Graph::scalar_loss).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sigmoid, softplus, Tensor};

const NORM_EPS: f64 = 1e-12;
#[cfg(test)]
const SIMPLEX_TOL: f64 = 1e-9;

/// Latent mixup: anchors, Dirichlet coefficients and their convex combination.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupSpec {
    pub anchor_latents: Vec<Vec<f64>>,
    pub coefficients: Vec<f64>,
    pub mixed_latent: Vec<f64>,
}

impl MixupSpec {
    pub fn new(anchor_latents: Vec<Vec<f64>>, coefficients: Vec<f64>) -> Result<Self> {
        let mixed_latent = mix_latents(&anchor_latents, &coefficients)?;
        Ok(Self {
            anchor_latents,
            coefficients,
            mixed_latent,
        })
    }

    /// `n` standard-normal anchors of dimension `latent_dim` and `c ~ Dir(1)`.
    pub fn sample<R: Rng + ?Sized>(n: usize, latent_dim: usize, rng: &mut R) -> Result<Self> {
        let anchors = (0..n)
            .map(|_| {
                (0..latent_dim)
                    .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect()
            })
            .collect();
        let c = dirichlet_ones(n, rng)?;
        Self::new(anchors, c)
    }

    pub fn n(&self) -> usize {
        self.coefficients.len()
    }
}

/// A raw similarity vector and its softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityProfile {
    pub raw: Vec<f64>,
    pub distribution: Vec<f64>,
}

impl SimilarityProfile {
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        let distribution = softmax_distribution(&raw)?;
        Ok(Self { raw, distribution })
    }
}

fn default_lambda() -> f64 {
    1.0
}
fn default_supcon_weight() -> f64 {
    0.5
}
fn default_temperature() -> f64 {
    0.1
}
fn default_r1_gamma() -> f64 {
    10.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_lambda")]
    pub lambda_g_mdl: f64,
    #[serde(default = "default_lambda")]
    pub lambda_d_mdl: f64,
    #[serde(default = "default_supcon_weight")]
    pub lambda_supcon: f64,
    #[serde(default = "default_temperature")]
    pub supcon_temperature: f64,
    /// R1 penalty strength on real samples.
    #[serde(default = "default_r1_gamma")]
    pub r1_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_g_mdl: default_lambda(),
            lambda_d_mdl: default_lambda(),
            lambda_supcon: default_supcon_weight(),
            supcon_temperature: default_temperature(),
            r1_gamma: default_r1_gamma(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_g_mdl", self.lambda_g_mdl),
            ("lambda_d_mdl", self.lambda_d_mdl),
            ("lambda_supcon", self.lambda_supcon),
            ("r1_gamma", self.r1_gamma),
        ];
        for (name, v) in named {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !self.supcon_temperature.is_finite() || self.supcon_temperature <= 0.0 {
            return Err(Error::Config(format!(
                "supcon_temperature must be > 0, got {}",
                self.supcon_temperature
            )));
        }
        Ok(())
    }
}

/// `c ~ Dir(1, …, 1)` from normalized unit exponentials.
pub fn dirichlet_ones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if n < 1 {
        return Err(Error::InvalidArgument(
            "Dirichlet order must be >= 1".into(),
        ));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let e: Vec<f64> = (0..n)
        .map(|_| <Exp1 as Distribution<f64>>::sample(&Exp1, rng))
        .collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / total).collect())
}

pub fn sample_dirichlet(n: usize, seed: u64) -> Result<Vec<f64>> {
    dirichlet_ones(n, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `z₀ = Σ c_i z_i`.
pub fn mix_latents(anchors: &[Vec<f64>], c: &[f64]) -> Result<Vec<f64>> {
    if anchors.len() != c.len() || anchors.is_empty() {
        return Err(Error::Shape(format!(
            "{} anchors vs {} coefficients",
            anchors.len(),
            c.len()
        )));
    }
    let d = anchors[0].len();
    if anchors.iter().any(|a| a.len() != d) {
        return Err(Error::Shape("anchors of unequal dimension".into()));
    }
    let mut z = vec![0.0; d];
    for (a, &ci) in anchors.iter().zip(c) {
        for (zj, aj) in z.iter_mut().zip(a) {
            *zj += ci * aj;
        }
    }
    Ok(z)
}

/// Softmax with max subtraction.
pub fn softmax_distribution(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "{name} has negative or non-finite entries"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidArgument(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `KL(P‖Q) = Σ P_i ln(P_i / Q_i)` with `0·ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!(
            "KL over {} vs {} outcomes",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "P")?;
    check_distribution(q, "Q")?;
    let mut kl = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::InvalidArgument(
                    "Q has a zero where P has mass".into(),
                ));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(NORM_EPS)
}

/// `∂cos/∂a` and `∂cos/∂b`.
fn cosine_grads(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let na2 = a.iter().map(|x| x * x).sum::<f64>().max(NORM_EPS);
    let nb2 = b.iter().map(|x| x * x).sum::<f64>().max(NORM_EPS);
    let denom = (na2 * nb2).sqrt();
    let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / denom;
    let da = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / denom - cos * x / na2)
        .collect();
    let db = a
        .iter()
        .zip(b)
        .map(|(x, y)| x / denom - cos * y / nb2)
        .collect();
    (da, db)
}

/// One mixup-distance term: the profile `softmax(cos(f₀, f_i))`, the target
/// `softmax(c)` and `KL(profile ‖ target)` with gradients for `f₀` and each
/// `f_i`.
#[derive(Clone, Debug)]
pub struct MdlTerm {
    pub loss: f64,
    pub profile: SimilarityProfile,
    pub target: Vec<f64>,
    pub d_mixed: Vec<f64>,
    pub d_anchors: Vec<Vec<f64>>,
}

pub fn mdl_term(mixed: &[f64], anchors: &[&[f64]], c: &[f64]) -> Result<MdlTerm> {
    if anchors.len() != c.len() || anchors.is_empty() {
        return Err(Error::Shape(format!(
            "{} anchor features vs {} coefficients",
            anchors.len(),
            c.len()
        )));
    }
    if anchors.iter().any(|a| a.len() != mixed.len()) {
        return Err(Error::Shape(
            "anchor and mixup features differ in length".into(),
        ));
    }
    let raw: Vec<f64> = anchors
        .iter()
        .map(|a| cosine_similarity(mixed, a))
        .collect();
    let profile = SimilarityProfile::from_raw(raw)?;
    let target = softmax_distribution(c)?;
    let loss = kl_divergence(&profile.distribution, &target)?;
    // ∂KL/∂raw_j = P_j (ln P_j − ln Q_j − KL)
    let d_raw: Vec<f64> = profile
        .distribution
        .iter()
        .zip(&target)
        .map(|(&p, &q)| {
            if p > 0.0 {
                p * ((p / q).ln() - loss)
            } else {
                0.0
            }
        })
        .collect();
    let mut d_mixed = vec![0.0; mixed.len()];
    let mut d_anchors = Vec::with_capacity(anchors.len());
    for (a, g) in anchors.iter().zip(&d_raw) {
        let (dm, da) = cosine_grads(mixed, a);
        d_mixed.iter_mut().zip(&dm).for_each(|(x, y)| *x += g * y);
        d_anchors.push(da.into_iter().map(|v| g * v).collect());
    }
    Ok(MdlTerm {
        loss,
        profile,
        target,
        d_mixed,
        d_anchors,
    })
}

/// Mean mixup-distance loss over groups of rows of `features` (`[rows, …]`,
/// flattened per row). Each group is `(mixed_row, anchor_rows, coefficients)`.
/// Returns the loss and its gradient with respect to `features`.
pub fn mdl_batch(features: &Tensor, groups: &[MdlGroup]) -> Result<(f64, Tensor)> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no mixup groups".into()));
    }
    let rows = features.shape()[0];
    let width = features.len() / rows.max(1);
    let row = |i: usize| &features.data()[i * width..(i + 1) * width];
    let mut grad = Tensor::zeros(features.shape());
    let mut total = 0.0;
    let scale = 1.0 / groups.len() as f64;
    for g in groups {
        if g.mixed >= rows || g.anchors.iter().any(|&a| a >= rows) {
            return Err(Error::Shape("mixup group row out of range".into()));
        }
        let anchors: Vec<&[f64]> = g.anchors.iter().map(|&a| row(a)).collect();
        let term = mdl_term(row(g.mixed), &anchors, &g.coefficients)?;
        total += term.loss * scale;
        let gd = grad.data_mut();
        for (j, v) in term.d_mixed.iter().enumerate() {
            gd[g.mixed * width + j] += scale * v;
        }
        for (&a, da) in g.anchors.iter().zip(&term.d_anchors) {
            for (j, v) in da.iter().enumerate() {
                gd[a * width + j] += scale * v;
            }
        }
    }
    Ok((total, grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MdlGroup {
    pub mixed: usize,
    pub anchors: Vec<usize>,
    pub coefficients: Vec<f64>,
}

/// Supervised contrastive loss over unit-norm embeddings, averaged over the
/// anchors that have at least one positive.
pub fn supcon_loss(embeddings: &[Vec<f64>], labels: &[u32], temperature: f64) -> Result<f64> {
    let n = embeddings.len();
    let d = embeddings.first().map_or(0, Vec::len);
    let flat: Vec<f64> = embeddings.iter().flatten().copied().collect();
    if flat.len() != n * d {
        return Err(Error::Shape("embeddings of unequal dimension".into()));
    }
    let t = Tensor::new(vec![n, d], flat)?;
    supcon_core(&t, labels, temperature).map(|(l, _)| l)
}

/// Supervised contrastive loss on raw features `[n, d]`: rows are
/// L2-normalized first. Returns the loss and its gradient with respect to
/// the raw features.
pub fn supcon_with_grad(
    features: &Tensor,
    labels: &[u32],
    temperature: f64,
) -> Result<(f64, Tensor)> {
    if features.ndim() != 2 {
        return Err(Error::Shape(format!(
            "supcon features {:?}",
            features.shape()
        )));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let mut unit = features.clone();
    let mut norms = Vec::with_capacity(n);
    for r in unit.data_mut().chunks_mut(d) {
        let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
        r.iter_mut().for_each(|x| *x /= norm);
        norms.push(norm);
    }
    let (loss, dz) = supcon_core(&unit, labels, temperature)?;
    let mut df = Tensor::zeros(&[n, d]);
    let rows = unit.data().chunks(d).zip(dz.data().chunks(d)).zip(&norms);
    for (out, ((z, g), norm)) in df.data_mut().chunks_mut(d).zip(rows) {
        let proj: f64 = z.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, gj), zj) in out.iter_mut().zip(g).zip(z) {
            *o = (gj - zj * proj) / norm;
        }
    }
    Ok((loss, df))
}

fn supcon_core(z: &Tensor, labels: &[u32], temperature: f64) -> Result<(f64, Tensor)> {
    let n = z.shape()[0];
    let d = z.shape()[1];
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} embeddings vs {} labels",
            labels.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "supcon needs at least 2 samples".into(),
        ));
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let row = |i: usize| &z.data()[i * d..(i + 1) * d];
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] =
                row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum::<f64>() / temperature;
        }
    }
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Err(Error::InvalidArgument(
            "no anchor has a positive pair".into(),
        ));
    }
    let inv_a = 1.0 / anchors.len() as f64;
    let mut loss = 0.0;
    // weights[i][j] = ∂L/∂S_ij
    let mut weights = vec![0.0; n * n];
    for &i in &anchors {
        let s = &sim[i * n..(i + 1) * n];
        let max = (0..n)
            .filter(|&a| a != i)
            .map(|a| s[a])
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (s[a] - max).exp()).sum();
        let lse = max + denom.ln();
        let positives: Vec<usize> = (0..n)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        let inv_p = 1.0 / positives.len() as f64;
        let li = positives.iter().map(|&p| lse - s[p]).sum::<f64>() * inv_p;
        loss += li * inv_a;
        for a in (0..n).filter(|&a| a != i) {
            weights[i * n + a] += inv_a * (s[a] - lse).exp();
        }
        for &p in &positives {
            weights[i * n + p] -= inv_a * inv_p;
        }
    }
    let mut dz = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for j in 0..n {
            let w = weights[i * n + j] / temperature;
            if w == 0.0 {
                continue;
            }
            for k in 0..d {
                dz.data_mut()[i * d + k] += w * z.data()[j * d + k];
                dz.data_mut()[j * d + k] += w * z.data()[i * d + k];
            }
        }
    }
    Ok((loss, dz))
}

/// Non-saturating logistic losses, averaged over the batch:
/// `L_G = softplus(−s_fake)`, `L_D = softplus(−s_real) + softplus(s_fake)`.
/// The R1 term is accounted separately by [`r1_penalty`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialLosses {
    pub generator: f64,
    pub discriminator: f64,
}

pub fn adversarial_losses(real: &[f64], fake: &[f64]) -> AdversarialLosses {
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len() as f64
        }
    };
    AdversarialLosses {
        generator: mean(fake, &|s| softplus(-s)),
        discriminator: mean(real, &|s| softplus(-s)) + mean(fake, &softplus),
    }
}

/// Gradients of the discriminator loss with respect to real and fake scores.
pub fn discriminator_adv_grads(real: &[f64], fake: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nr = real.len().max(1) as f64;
    let nf = fake.len().max(1) as f64;
    (
        real.iter().map(|&s| -sigmoid(-s) / nr).collect(),
        fake.iter().map(|&s| sigmoid(s) / nf).collect(),
    )
}

/// Gradient of the generator loss with respect to fake scores.
pub fn generator_adv_grads(fake: &[f64]) -> Vec<f64> {
    let nf = fake.len().max(1) as f64;
    fake.iter().map(|&s| -sigmoid(-s) / nf).collect()
}

/// `(γ/2)·mean_b ‖∇ₓ D(x_b)‖²` from per-sample input gradients `[B, …]`.
pub fn r1_penalty(input_grads: &Tensor, gamma: f64) -> f64 {
    let b = input_grads.shape()[0].max(1) as f64;
    0.5 * gamma * input_grads.data().iter().map(|g| g * g).sum::<f64>() / b
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorLossParts {
    pub adv: f64,
    pub mdl: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DiscriminatorLossParts {
    pub adv: f64,
    pub r1: f64,
    pub mdl: f64,
    pub supcon: f64,
}

fn check_finite(terms: &[(&str, f64)]) -> Result<()> {
    for (name, v) in terms {
        if !v.is_finite() {
            return Err(Error::Diverged(format!("{name} = {v}")));
        }
    }
    Ok(())
}

/// `L_adv^G + λ_MDL^G · L_MDL^G`.
pub fn total_generator_loss(p: &GeneratorLossParts, w: &LossWeights) -> Result<f64> {
    check_finite(&[
        ("generator adversarial loss", p.adv),
        ("generator MDL loss", p.mdl),
    ])?;
    Ok(p.adv + w.lambda_g_mdl * p.mdl)
}

/// `L_adv^D + λ_MDL^D · L_MDL^D + λ_SupCon · L_SupCon`, where the
/// adversarial part includes the R1 penalty.
pub fn total_discriminator_loss(p: &DiscriminatorLossParts, w: &LossWeights) -> Result<f64> {
    check_finite(&[
        ("discriminator adversarial loss", p.adv),
        ("R1 penalty", p.r1),
        ("discriminator MDL loss", p.mdl),
        ("SupCon loss", p.supcon),
    ])?;
    Ok(p.adv + p.r1 + w.lambda_d_mdl * p.mdl + w.lambda_supcon * p.supcon)
}
