//! Downstream simulation: linear heads on (frozen or fine-tuned) encoders,
//! attack metrics, transfer tables, retrieval and PCA projection.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::adam::{Adam, AdamConfig};
use crate::attack::Perturber;
use crate::data::{batch_iter, ImageDataset};
use crate::error::{diverged, invalid, shape_err, Result};
use crate::graph::Graph;
use crate::models::{
    argmax_rows, encode, encoder_forward, head_forward, head_logits, Arch, ModelParams,
    FEATURE_DIM,
};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

mod metrics;
mod pca;
mod retrieval;

pub use metrics::{ata, tfr, AttackMetrics, ExperimentTags, MetricsRecord};
pub use pca::{pca_project, Projection, POWER_ITERATIONS};
pub use retrieval::{majority_label, nearest, retrieval_topk, RetrievalResult};

/// Rows per forward chunk during evaluation.
pub const EVAL_CHUNK: usize = 250;

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub classes: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Encoder learning rate when fine-tuning.
    pub encoder_lr: f64,
    pub batch_size: usize,
    pub finetune: bool,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            classes: crate::data::NUM_CLASSES,
            epochs: 20,
            lr: 1e-2,
            encoder_lr: 1e-4,
            batch_size: 128,
            finetune: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutcome {
    pub head: ModelParams,
    /// The updated encoder, present only when fine-tuning.
    pub encoder: Option<ModelParams>,
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

mod tags {
    pub const HEAD_INIT: u64 = 21;
    pub const SHUFFLE: u64 = 4 << 32;
}

/// Trains a linear head on `train`. In frozen mode the encoder's features
/// are computed once and only the head is optimized; in fine-tune mode the
/// encoder is updated too, at `encoder_lr`.
pub fn train_head(
    encoder: &ModelParams,
    train: &ImageDataset,
    test: Option<&ImageDataset>,
    config: &HeadConfig,
) -> Result<HeadOutcome> {
    if encoder.arch() != Arch::Encoder {
        return Err(invalid("train_head needs an encoder"));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(invalid("head epochs and batch size must be positive"));
    }
    if !(config.lr > 0.0) || (config.finetune && !(config.encoder_lr > 0.0)) {
        return Err(invalid("head learning rates must be positive"));
    }
    for set in core::iter::once(train).chain(test) {
        let inferred = set.labels().iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        if inferred != config.classes {
            return Err(invalid(format!(
                "labels of the {} split imply {inferred} classes, configured {}",
                set.split.as_str(),
                config.classes
            )));
        }
    }
    let batch = config.batch_size.min(train.len());
    let mut head = ModelParams::init(
        Arch::Head {
            classes: config.classes,
        },
        SplitMix64::derive(config.seed, tags::HEAD_INIT),
    );
    let mut head_opt = Adam::new(AdamConfig::with_lr(config.lr), &head.tensor_refs());
    let labels = train.labels_usize();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    let (tuned, train_features) = if config.finetune {
        let mut enc = encoder.clone();
        let mut enc_opt = Adam::new(AdamConfig::with_lr(config.encoder_lr), &enc.tensor_refs());
        for epoch in 0..config.epochs {
            let mut sum = 0.0;
            let batches = shuffled(train.len(), batch, config.seed, epoch)?;
            for (step, idx) in batches.iter().enumerate() {
                let (images, y) = train.batch(idx);
                let mut g = Graph::new();
                let ep = enc.bind(&mut g, true);
                let hp = head.bind(&mut g, true);
                let x = g.constant(images);
                let (loss, grads) = (|| {
                    let f = encoder_forward(&mut g, &ep, x)?;
                    let logits = head_forward(&mut g, &hp, f)?;
                    let loss = g.softmax_cross_entropy(logits, &y)?;
                    let mut leaves = ep.vars.clone();
                    leaves.extend(&hp.vars);
                    Ok((g.value(loss).item(), g.backward(loss, &leaves)?))
                })()
                .map_err(|e| diverged("finetune", e, epoch, step))?;
                let (enc_grads, head_grads) = grads.split_at(ep.vars.len());
                enc_opt.step(&mut enc.tensors_mut(), enc_grads)?;
                head_opt.step(&mut head.tensors_mut(), head_grads)?;
                sum += loss as f64;
            }
            epoch_losses.push(sum / batches.len() as f64);
            log::info!("finetune epoch {} loss {:.6}", epoch + 1, sum / batches.len() as f64);
        }
        let features = encode(&enc, train.images(), EVAL_CHUNK)?;
        (Some(enc), features)
    } else {
        let features = encode(encoder, train.images(), EVAL_CHUNK)?;
        for epoch in 0..config.epochs {
            let mut sum = 0.0;
            let batches = shuffled(train.len(), batch, config.seed, epoch)?;
            for (step, idx) in batches.iter().enumerate() {
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let mut g = Graph::new();
                let hp = head.bind(&mut g, true);
                let f = g.constant(features.gather_rows(idx));
                let (loss, grads) = (|| {
                    let logits = head_forward(&mut g, &hp, f)?;
                    let loss = g.softmax_cross_entropy(logits, &y)?;
                    Ok((g.value(loss).item(), g.backward(loss, &hp.vars)?))
                })()
                .map_err(|e| diverged("probe", e, epoch, step))?;
                head_opt.step(&mut head.tensors_mut(), &grads)?;
                sum += loss as f64;
            }
            epoch_losses.push(sum / batches.len() as f64);
            log::debug!("probe epoch {} loss {:.6}", epoch + 1, sum / batches.len() as f64);
        }
        (None, features)
    };

    let train_pred = argmax_rows(&head_logits(&head, &train_features)?);
    let train_accuracy = ata(&train_pred, &labels)?;
    let test_accuracy = match test {
        Some(t) => {
            let enc = tuned.as_ref().unwrap_or(encoder);
            Some(ata(&predict(enc, &head, t.images())?, &t.labels_usize())?)
        }
        None => None,
    };
    Ok(HeadOutcome {
        head,
        encoder: tuned,
        epoch_losses,
        train_accuracy,
        test_accuracy,
    })
}

fn shuffled(n: usize, batch: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    batch_iter(n, batch, SplitMix64::derive(seed, tags::SHUFFLE + epoch as u64), true)
}

/// Class predictions of the pipeline `head ∘ encoder` on `images`.
pub fn predict(encoder: &ModelParams, head: &ModelParams, images: &Tensor<f32>) -> Result<Vec<usize>> {
    let f = encode(encoder, images, EVAL_CHUNK)?;
    Ok(argmax_rows(&head_logits(head, &f)?))
}

/// The victim pipeline's own prediction on the threat image.
pub fn target_class(encoder: &ModelParams, head: &ModelParams, threat: &Tensor<f32>) -> Result<usize> {
    let x = threat.clone().reshape(&[1, 3, 32, 32])?;
    Ok(predict(encoder, head, &x)?[0])
}

/// Attacks every image of `test` with `perturber` and measures the victim
/// pipeline `head ∘ encoder`. `y_t` is the pipeline's prediction on
/// `threat`.
pub fn evaluate_attack(
    encoder: &ModelParams,
    head: &ModelParams,
    perturber: &Perturber,
    test: &ImageDataset,
    threat: &Tensor<f32>,
    eps: f64,
) -> Result<AttackMetrics> {
    let Arch::Head { classes } = head.arch() else {
        return Err(invalid("evaluate_attack needs a classification head"));
    };
    if let Some(&l) = test.labels().iter().find(|&&l| l as usize >= classes) {
        return Err(invalid(format!(
            "test label {l} does not fit a {classes}-class head"
        )));
    }
    let y_t = target_class(encoder, head, threat)?;
    let x_adv = perturber.perturb(test.images(), eps, EVAL_CHUNK)?;
    let predictions = predict(encoder, head, &x_adv)?;
    let (l2, linf) = distortion(test.images(), &x_adv)?;
    Ok(AttackMetrics {
        y_t,
        tfr: tfr(&predictions, y_t)?,
        ata: ata(&predictions, &test.labels_usize())?,
        mean_l2: metrics::order_free_mean(l2),
        mean_linf: metrics::order_free_mean(linf),
        predictions,
    })
}

/// Per-image `‖x_adv - x‖₂` and `‖x_adv - x‖∞`.
pub fn distortion(x: &Tensor<f32>, x_adv: &Tensor<f32>) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.shape() != x_adv.shape() || x.rank() < 2 {
        return Err(shape_err(
            "distortion",
            format!("{:?} vs {:?}", x.shape(), x_adv.shape()),
        ));
    }
    let d = x.len() / x.shape()[0];
    Ok(x
        .data()
        .chunks(d)
        .zip(x_adv.data().chunks(d))
        .map(|(a, b)| {
            let mut sq = 0.0;
            let mut max = 0.0f64;
            for (&p, &q) in a.iter().zip(b) {
                let t = (q - p) as f64;
                sq += t * t;
                max = max.max(t.abs());
            }
            (libm::sqrt(sq), max)
        })
        .unzip())
}

/// One victim pipeline in a transfer study.
#[derive(Clone, Copy, Debug)]
pub struct VictimRef<'a> {
    pub name: &'a str,
    pub encoder: &'a ModelParams,
    pub head: &'a ModelParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferTable {
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `tfr[s][t]`: source `s`'s perturbations against target `t`.
    pub tfr: Vec<Vec<f64>>,
}

impl TransferTable {
    /// Mean TFR over entries with differing source and target names.
    pub fn off_diagonal_mean(&self) -> Option<f64> {
        let mut values = Vec::new();
        for (s, row) in self.sources.iter().zip(&self.tfr) {
            for (t, &v) in self.targets.iter().zip(row) {
                if s != t {
                    values.push(v);
                }
            }
        }
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Entry `(s, t)` is [`evaluate_attack`] of source `s`'s perturber against
/// target `t`, with `y_t` recomputed per target.
pub fn transfer_matrix(
    sources: &[(&str, &Perturber)],
    targets: &[VictimRef<'_>],
    test: &ImageDataset,
    threat: &Tensor<f32>,
    eps: f64,
) -> Result<TransferTable> {
    if sources.is_empty() || targets.is_empty() {
        return Err(invalid("transfer matrix needs at least one source and target"));
    }
    let mut tfr = Vec::with_capacity(sources.len());
    for (_, p) in sources {
        let mut row = Vec::with_capacity(targets.len());
        for t in targets {
            row.push(evaluate_attack(t.encoder, t.head, p, test, threat, eps)?.tfr);
        }
        tfr.push(row);
    }
    Ok(TransferTable {
        sources: sources.iter().map(|(n, _)| String::from(*n)).collect(),
        targets: targets.iter().map(|t| String::from(t.name)).collect(),
        tfr,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    /// Majority label among the threat image's own top-k neighbours.
    pub y_t: usize,
    pub result: RetrievalResult,
}

/// Retrieval downstream task: the gallery is `gallery`'s frozen features,
/// queries are the perturbed images of `queries`. The retrieval system's
/// "prediction" for the threat image is the majority label of its top-k,
/// which fixes `y_t`.
pub fn retrieval_topk_tfr(
    encoder: &ModelParams,
    gallery: &ImageDataset,
    perturber: &Perturber,
    queries: &ImageDataset,
    threat: &Tensor<f32>,
    eps: f64,
    k: usize,
) -> Result<RetrievalReport> {
    let gallery_features = encode(encoder, gallery.images(), EVAL_CHUNK)?;
    let labels = gallery.labels_usize();
    if k == 0 || k > labels.len() {
        return Err(invalid(format!("k = {k} exceeds gallery size {}", labels.len())));
    }
    let t = encode(encoder, &threat.clone().reshape(&[1, 3, 32, 32])?, 1)?;
    let y_t = majority_label(&labels, &nearest(&gallery_features, t.data(), k));
    let x_adv = perturber.perturb(queries.images(), eps, EVAL_CHUNK)?;
    let q = encode(encoder, &x_adv, EVAL_CHUNK)?;
    debug_assert_eq!(q.shape()[1], FEATURE_DIM);
    Ok(RetrievalReport {
        y_t,
        result: retrieval_topk(&gallery_features, &labels, &q, y_t, k)?,
    })
}
