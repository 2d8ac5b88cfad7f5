//! Victim encoder pretraining: contrastive, supervised-contrastive and plain
//! supervised recipes on augmented Shapes10 batches.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::adam::{Adam, AdamConfig};
use crate::data::{augment_batch_pairs, batch_iter, ImageDataset, NUM_CLASSES};
use crate::error::{diverged, invalid, Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{
    encoder_forward, head_forward, projection_forward, Arch, BoundParams, ModelParams,
};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PretrainMethod {
    SimclrLite,
    SupconLite,
    SupervisedCe,
}

impl PretrainMethod {
    pub const ALL: [PretrainMethod; 3] = [
        PretrainMethod::SimclrLite,
        PretrainMethod::SupconLite,
        PretrainMethod::SupervisedCe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PretrainMethod::SimclrLite => "simclr_lite",
            PretrainMethod::SupconLite => "supcon_lite",
            PretrainMethod::SupervisedCe => "supervised_ce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown pretraining method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub method: PretrainMethod,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            method: PretrainMethod::SimclrLite,
            temperature: 0.1,
            batch_size: 128,
            epochs: 30,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(invalid("pretrain temperature must be positive"));
        }
        if self.epochs == 0 {
            return Err(invalid("pretrain epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid("pretrain batch size must be at least 2"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("pretrain learning rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub method: PretrainMethod,
    pub seed: u64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl PretrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

fn check_temperature<T: Scalar>(tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {tau:?}")));
    }
    Ok(())
}

/// Cosine-similarity logits `normalize(z)·normalize(z)ᵀ / τ` with the
/// diagonal excluded.
fn similarity_logits<T: Scalar>(g: &mut Graph<T>, z: Var, tau: T) -> Result<(Var, Vec<bool>)> {
    let zn = g.normalize_rows(z)?;
    let sim = g.matmul_nt(zn, zn)?;
    let logits = g.scale(sim, T::one() / tau)?;
    let n = g.value(z).shape()[0];
    let mask = (0..n * n).map(|i| i / n == i % n).collect();
    Ok((logits, mask))
}

/// NT-Xent over the `2B` stacked views `[z1; z2]`: each row's positive is its
/// paired view, every other non-self row a negative; mean over the `2B`
/// anchors.
pub fn info_nce_loss<T: Scalar>(g: &mut Graph<T>, z1: Var, z2: Var, tau: T) -> Result<Var> {
    check_temperature(tau)?;
    let (s1, s2) = (g.value(z1).shape(), g.value(z2).shape());
    if s1.len() != 2 || s1 != s2 {
        return Err(crate::error::shape_err(
            "info_nce_loss",
            format!("paired views must share a [B,D] shape, got {s1:?} and {s2:?}"),
        ));
    }
    if s1[0] < 2 {
        return Err(invalid("info_nce_loss needs at least 2 pairs"));
    }
    let z = g.concat_rows(z1, z2)?;
    nt_xent_stacked(g, z, tau)
}

/// [`info_nce_loss`] on views already stacked as `[z1; z2]`.
pub(crate) fn nt_xent_stacked<T: Scalar>(g: &mut Graph<T>, z: Var, tau: T) -> Result<Var> {
    let n = g.value(z).shape()[0];
    let b = n / 2;
    let (logits, mask) = similarity_logits(g, z, tau)?;
    let mut targets = vec![T::zero(); n * n];
    for i in 0..n {
        targets[i * n + (i + b) % n] = T::one();
    }
    let targets = Tensor::from_parts(&[n, n], targets)?;
    g.soft_cross_entropy(logits, &targets, Some(&mask))
}

/// Supervised contrastive loss: each anchor's target is uniform over the
/// other rows sharing its label. Anchors without positives are skipped.
pub fn supcon_loss<T: Scalar>(g: &mut Graph<T>, z: Var, labels: &[usize], tau: T) -> Result<Var> {
    check_temperature(tau)?;
    let zs = g.value(z).shape();
    if zs.len() != 2 || zs[0] != labels.len() {
        return Err(crate::error::shape_err(
            "supcon_loss",
            format!("{} labels for embeddings {zs:?}", labels.len()),
        ));
    }
    let n = labels.len();
    let mut targets = vec![T::zero(); n * n];
    let mut any = false;
    for i in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if positives.is_empty() {
            continue;
        }
        any = true;
        let w = T::one() / T::from_f64(positives.len() as f64);
        for p in positives {
            targets[i * n + p] = w;
        }
    }
    if !any {
        return Err(Error::Degenerate("supcon_loss: no anchor has a positive".into()));
    }
    let (logits, mask) = similarity_logits(g, z, tau)?;
    let targets = Tensor::from_parts(&[n, n], targets)?;
    g.soft_cross_entropy(logits, &targets, Some(&mask))
}

/// Tag space for per-purpose seed derivation.
pub(crate) mod tags {
    pub const ENCODER_INIT: u64 = 1;
    pub const AUX_INIT: u64 = 2;
    pub const SHUFFLE: u64 = 1 << 32;
    pub const AUGMENT: u64 = 2 << 32;
}

/// Trains an encoder from scratch. Returns the encoder (projection or
/// classifier head discarded) and the loss history.
pub fn pretrain_encoder(
    config: &PretrainConfig,
    dataset: &ImageDataset,
) -> Result<(ModelParams, PretrainReport)> {
    config.validate()?;
    if dataset.len() < config.batch_size {
        return Err(invalid(format!(
            "dataset has {} images, fewer than batch size {}",
            dataset.len(),
            config.batch_size
        )));
    }
    let seed = config.seed;
    let mut encoder = ModelParams::init(Arch::Encoder, SplitMix64::derive(seed, tags::ENCODER_INIT));
    let aux_arch = match config.method {
        PretrainMethod::SupervisedCe => Arch::Head {
            classes: NUM_CLASSES,
        },
        _ => Arch::Projection,
    };
    let mut aux = ModelParams::init(aux_arch, SplitMix64::derive(seed, tags::AUX_INIT));
    let mut opt = {
        let mut refs = encoder.tensor_refs();
        refs.extend(aux.tensor_refs());
        Adam::new(AdamConfig::with_lr(config.lr), &refs)
    };
    let tau = config.temperature as f32;
    let mut report = PretrainReport {
        method: config.method,
        seed,
        epoch_losses: Vec::with_capacity(config.epochs),
        step_losses: Vec::new(),
    };
    for epoch in 0..config.epochs {
        let epoch_tag = epoch as u64;
        let batches = batch_iter(
            dataset.len(),
            config.batch_size,
            SplitMix64::derive(seed, tags::SHUFFLE + epoch_tag),
            true,
        )?;
        let aug_seed = SplitMix64::derive(seed, tags::AUGMENT + epoch_tag);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for (step, idx) in batches.iter().enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let (images, labels) = dataset.batch(idx);
            let seeds: Vec<u64> = idx.iter().map(|&i| SplitMix64::derive(aug_seed, i as u64)).collect();
            let (v1, v2) = augment_batch_pairs(&images, &seeds);

            let mut g = Graph::new();
            let ep = encoder.bind(&mut g, true);
            let ap = aux.bind(&mut g, true);
            let loss = step_loss(&mut g, config.method, &ep, &ap, v1, v2, &labels, tau)
                .map_err(|e| diverged("pretrain", e, epoch, step))?;
            let mut leaves = ep.vars.clone();
            leaves.extend(&ap.vars);
            let grads = g.backward(loss, &leaves).map_err(|e| diverged("pretrain", e, epoch, step))?;
            let value = g.value(loss).item() as f64;
            drop(g);

            let mut params = encoder.tensors_mut();
            params.extend(aux.tensors_mut());
            opt.step(&mut params, &grads)?;
            log::debug!(
                "pretrain {} epoch {epoch} step {step} loss {value:.6}",
                config.method.as_str()
            );
            report.step_losses.push(value);
            sum += value;
            steps += 1;
        }
        let mean = sum / steps.max(1) as f64;
        log::info!(
            "pretrain {} epoch {} mean loss {mean:.6}",
            config.method.as_str(),
            epoch + 1
        );
        report.epoch_losses.push(mean);
    }
    Ok((encoder, report))
}

#[allow(clippy::too_many_arguments)]
fn step_loss(
    g: &mut Graph<f32>,
    method: PretrainMethod,
    ep: &BoundParams,
    ap: &BoundParams,
    v1: Tensor<f32>,
    v2: Tensor<f32>,
    labels: &[usize],
    tau: f32,
) -> Result<Var> {
    match method {
        PretrainMethod::SupervisedCe => {
            let x = g.constant(v1);
            let f = encoder_forward(g, ep, x)?;
            let logits = head_forward(g, ap, f)?;
            g.softmax_cross_entropy(logits, labels)
        }
        PretrainMethod::SimclrLite | PretrainMethod::SupconLite => {
            // Both views go through the encoder as one batch: [v1; v2].
            let x = g.constant(Tensor::stack_rows(&[v1, v2])?);
            let f = encoder_forward(g, ep, x)?;
            let z = projection_forward(g, ap, f)?;
            if method == PretrainMethod::SimclrLite {
                nt_xent_stacked(g, z, tau)
            } else {
                let both: Vec<usize> = labels.iter().chain(labels).copied().collect();
                supcon_loss(g, z, &both, tau)
            }
        }
    }
}
