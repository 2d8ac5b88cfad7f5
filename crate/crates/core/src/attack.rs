//! Generator-based targeted attack against a frozen encoder, the shared
//! fixed-noise baseline, and the feature-distance criteria.
//!
//! Training objective per batch: `α · adv(E(x_adv), E(x_t)) + con(x_adv, x)`
//! where `x_adv = clamp(x + clamp(G(x), -ε, ε), 0, 1)`. An infinite `α`
//! drops the consistency term and optimizes the adversarial term alone.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::adam::{Adam, AdamConfig};
use crate::data::{batch_iter, ImageDataset};
use crate::error::{diverged, invalid, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{encode, encoder_forward, generator_forward, map_chunks, Arch, BoundParams, ModelParams, FEATURE_DIM, IMAGE_SHAPE};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default ℓ∞ budget, 10/255.
pub const DEFAULT_EPSILON: f64 = 10.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Criterion {
    L2,
    Cosine,
    InfoNce,
}

impl Criterion {
    pub const ALL: [Criterion; 3] = [Criterion::L2, Criterion::Cosine, Criterion::InfoNce];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::L2 => "l2",
            Criterion::Cosine => "cosine",
            Criterion::InfoNce => "infonce",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown criterion {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// `[3,32,32]` threat image in `[0,1]`.
    pub threat: Tensor<f32>,
    /// Weight of the adversarial term; `f64::INFINITY` removes the
    /// consistency term.
    pub alpha: f64,
    pub epsilon: f64,
    /// Alignment bound reported by [`check_alignment`]; may be infinite.
    pub eta: f64,
    pub criterion: Criterion,
    /// Temperature of the `infonce` criterion.
    pub tau: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl AttackConfig {
    /// Defaults: α = 2, ε = 10/255, η = ∞, l2, τ = 0.5, lr 2e-4, batch 64,
    /// 20 epochs, seed 0.
    pub fn new(threat: Tensor<f32>) -> Self {
        AttackConfig {
            threat,
            alpha: 2.0,
            epsilon: DEFAULT_EPSILON,
            eta: f64::INFINITY,
            criterion: Criterion::L2,
            tau: 0.5,
            lr: 2e-4,
            batch_size: 64,
            epochs: 20,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.threat.shape() != IMAGE_SHAPE {
            return Err(shape_err(
                "attack config",
                format!("threat image must be [3,32,32], got {:?}", self.threat.shape()),
            ));
        }
        if self.threat.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(invalid("threat image pixels must lie in [0,1]"));
        }
        if !(self.alpha >= 0.0) {
            return Err(invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        check_epsilon(self.epsilon)?;
        if !(self.eta > 0.0) {
            return Err(invalid(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid("criterion temperature must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("attack learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid("attack batch size and epochs must be positive"));
        }
        Ok(())
    }

    fn consistency_weighted(&self) -> bool {
        self.alpha.is_finite()
    }
}

fn sq(x: f32) -> f64 {
    (x as f64) * (x as f64)
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid(format!("epsilon must lie in (0,1), got {eps}")));
    }
    Ok(())
}

/// Distance between each row of `f_adv: [B,128]` and the anchor `f_t: [128]`,
/// reduced by the batch mean.
pub fn adversarial_loss<T: Scalar>(
    g: &mut Graph<T>,
    f_adv: Var,
    f_t: Var,
    criterion: Criterion,
    tau: T,
) -> Result<Var> {
    let (fa, ft) = (g.value(f_adv), g.value(f_t));
    if fa.rank() != 2 || ft.rank() != 1 || fa.shape()[1] != ft.len() {
        return Err(shape_err(
            "adversarial_loss",
            format!(
                "features {:?} and anchor {:?} must be [B,D] and [D]",
                fa.shape(),
                ft.shape()
            ),
        ));
    }
    let b = fa.shape()[0];
    match criterion {
        Criterion::L2 => {
            let d = g.sub_row(f_adv, f_t)?;
            let n = g.row_norm(d)?;
            g.mean(n)
        }
        Criterion::Cosine => {
            let c = g.cosine_rows(f_adv, f_t)?;
            let ones = g.constant(Tensor::full(&[b], T::one()));
            let d = g.sub(ones, c)?;
            g.mean(d)
        }
        Criterion::InfoNce => {
            if !(tau > T::zero()) {
                return Err(invalid("infonce temperature must be positive"));
            }
            let d = ft.len();
            let na = g.normalize_rows(f_adv)?;
            let t = g.reshape(f_t, &[1, d])?;
            let nt = g.normalize_rows(t)?;
            let all = g.concat_rows(na, nt)?;
            let sim = g.matmul_nt(na, all)?;
            let logits = g.scale(sim, T::one() / tau)?;
            // Row i: positive is the anchor (column B), self-similarity
            // (column i) excluded, other adversarial features are negatives.
            let cols = b + 1;
            let mut targets = vec![T::zero(); b * cols];
            let mut mask = vec![false; b * cols];
            for i in 0..b {
                targets[i * cols + b] = T::one();
                mask[i * cols + i] = true;
            }
            let targets = Tensor::new(&[b, cols], targets)?;
            g.soft_cross_entropy(logits, &targets, Some(&mask))
        }
    }
}

/// Batch mean of the per-image L2 norm of `x_adv - x`.
pub fn consistency_loss<T: Scalar>(g: &mut Graph<T>, x_adv: Var, x: Var) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    if g.value(x_adv).shape() != shape.as_slice() || shape.len() < 2 {
        return Err(shape_err(
            "consistency_loss",
            format!(
                "adversarial {:?} and benign {:?} batches differ",
                g.value(x_adv).shape(),
                shape
            ),
        ));
    }
    let d = g.sub(x_adv, x)?;
    let flat = g.reshape(d, &[shape[0], shape[1..].iter().product()])?;
    let n = g.row_norm(flat)?;
    g.mean(n)
}

/// `x_adv = clamp(x + clamp(G(x), -ε, ε), 0, 1)` on the graph.
pub fn make_dae<T: Scalar>(g: &mut Graph<T>, generator: &BoundParams, x: Var, eps: f64) -> Result<Var> {
    check_epsilon(eps)?;
    let e = T::from_f64(eps);
    let raw = generator_forward(g, generator, x, e)?;
    let delta = g.clamp_st(raw, -e, e)?;
    let sum = g.add(x, delta)?;
    g.clamp_st(sum, T::zero(), T::one())
}

/// `x_adv = clamp(x + δ, 0, 1)` with one shared `δ: [3,32,32]`.
fn apply_noise<T: Scalar>(g: &mut Graph<T>, delta: Var, x: Var) -> Result<Var> {
    let sum = g.add_row(x, delta)?;
    g.clamp_st(sum, T::zero(), T::one())
}

/// A trained perturbation source.
#[derive(Clone, Debug, PartialEq)]
pub enum Perturber {
    Generator(ModelParams),
    FixedNoise(Tensor<f32>),
    /// Emits the benign images unchanged.
    Identity,
}

impl Perturber {
    /// Adversarial counterparts of `images: [N,3,32,32]`, in chunks.
    pub fn perturb(&self, images: &Tensor<f32>, eps: f64, chunk: usize) -> Result<Tensor<f32>> {
        check_epsilon(eps)?;
        match self {
            Perturber::Identity => Ok(images.clone()),
            Perturber::Generator(gen) => map_chunks(images, chunk, |g, x| {
                let p = gen.bind(g, false);
                make_dae(g, &p, x, eps)
            }),
            Perturber::FixedNoise(delta) => {
                if delta.shape() != IMAGE_SHAPE {
                    return Err(shape_err(
                        "fixed noise",
                        format!("expected [3,32,32], got {:?}", delta.shape()),
                    ));
                }
                // Clamp again at emission so a loaded δ can never exceed ε.
                let e = eps as f32;
                let clipped = delta.map(|v| v.clamp(-e, e));
                map_chunks(images, chunk, |g, x| {
                    let d = g.constant(clipped.clone());
                    apply_noise(g, d, x)
                })
            }
        }
    }
}

/// One optimizer step's logged terms. `loss` is the value the gradient was
/// taken of: `alpha * adversarial + consistency` evaluated in `f32`, or
/// `adversarial` alone when the consistency term is removed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub loss: f32,
    pub adversarial: f32,
    pub consistency: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub mean_loss: f64,
    pub mean_adversarial: f64,
    pub mean_consistency: f64,
    /// Mean `‖E(x_adv) - E(x_t)‖₂` over the epoch's samples, whatever the
    /// criterion.
    pub mean_feature_distance: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Per-sample feature distances during the final epoch.
    pub final_epoch_distances: Vec<f64>,
}

/// Called after every completed epoch with the parameters reached so far;
/// the caller may persist them as the last good checkpoint.
pub type EpochHook<'a, P> = &'a mut dyn FnMut(usize, &P, &EpochRecord);

/// Seed tags for the attack's random streams.
mod tags {
    pub const GENERATOR_INIT: u64 = 11;
    pub const NOISE_INIT: u64 = 12;
    pub const SHUFFLE: u64 = 3 << 32;
}

/// Frozen-encoder feature of the threat image.
pub fn anchor_feature(encoder: &ModelParams, threat: &Tensor<f32>) -> Result<Tensor<f32>> {
    let x = threat.clone().reshape(&[1, 3, 32, 32])?;
    encode(encoder, &x, 1)?.reshape(&[FEATURE_DIM])
}

/// Generic epoch loop shared by the generator and the fixed-noise baseline.
fn train_loop<P>(
    stage: &'static str,
    encoder: &ModelParams,
    dataset: &ImageDataset,
    config: &AttackConfig,
    params: &mut P,
    tensors_of: fn(&mut P) -> Vec<&mut Tensor<f32>>,
    bind: fn(&P, &mut Graph<f32>) -> (Vec<Var>, BindKind),
    after_step: fn(&mut P, f32),
    mut hook: Option<EpochHook<'_, P>>,
) -> Result<AttackLog> {
    config.validate()?;
    if encoder.arch() != Arch::Encoder {
        return Err(invalid("attack target must be an encoder"));
    }
    if dataset.len() < config.batch_size {
        return Err(invalid(format!(
            "attacker dataset has {} images, fewer than batch size {}",
            dataset.len(),
            config.batch_size
        )));
    }
    let f_t = anchor_feature(encoder, &config.threat)?;
    let eps = config.epsilon;
    let alpha = config.alpha as f32;
    let tau = config.tau as f32;
    let mut opt = {
        let mut p = tensors_of(params);
        let refs: Vec<&Tensor<f32>> = p.iter_mut().map(|t| &**t).collect();
        Adam::new(AdamConfig::with_lr(config.lr), &refs)
    };
    let mut log = AttackLog::default();
    for epoch in 0..config.epochs {
        let batches = batch_iter(
            dataset.len(),
            config.batch_size,
            SplitMix64::derive(config.seed, tags::SHUFFLE + epoch as u64),
            true,
        )?;
        let (mut sum_loss, mut sum_adv, mut sum_con) = (0.0, 0.0, 0.0);
        let mut distances = Vec::with_capacity(dataset.len());
        for (step, idx) in batches.iter().enumerate() {
            let (images, _) = dataset.batch(idx);
            let mut g = Graph::new();
            let (leaves, kind) = bind(params, &mut g);
            let record = (|| -> Result<(Var, StepRecord)> {
                let x = g.constant(images);
                let x_adv = match kind {
                    BindKind::Generator(ref gp) => make_dae(&mut g, gp, x, eps)?,
                    BindKind::Noise(d) => apply_noise(&mut g, d, x)?,
                };
                let ep = encoder.bind(&mut g, false);
                let f_adv = encoder_forward(&mut g, &ep, x_adv)?;
                let ft = g.constant(f_t.clone());
                let adv = adversarial_loss(&mut g, f_adv, ft, config.criterion, tau)?;
                let con = consistency_loss(&mut g, x_adv, x)?;
                let loss = if config.consistency_weighted() {
                    let weighted = g.scale(adv, alpha)?;
                    g.add(weighted, con)?
                } else {
                    adv
                };
                for row in g.value(f_adv).data().chunks(FEATURE_DIM) {
                    let d2: f64 = row
                        .iter()
                        .zip(f_t.data())
                        .map(|(&a, &b)| sq(a - b))
                        .sum();
                    distances.push(libm::sqrt(d2));
                }
                Ok((
                    loss,
                    StepRecord {
                        loss: g.value(loss).item(),
                        adversarial: g.value(adv).item(),
                        consistency: g.value(con).item(),
                    },
                ))
            })();
            let (loss, rec) = record.map_err(|e| diverged(stage, e, epoch, step))?;
            let grads = g
                .backward(loss, &leaves)
                .map_err(|e| diverged(stage, e, epoch, step))?;
            drop(g);
            opt.step(&mut tensors_of(params), &grads)?;
            after_step(params, eps as f32);
            log::debug!(
                "{stage} epoch {epoch} step {step} loss {:.6} adv {:.6} con {:.6}",
                rec.loss,
                rec.adversarial,
                rec.consistency
            );
            sum_loss += rec.loss as f64;
            sum_adv += rec.adversarial as f64;
            sum_con += rec.consistency as f64;
            log.steps.push(rec);
        }
        let steps = batches.len() as f64;
        let record = EpochRecord {
            mean_loss: sum_loss / steps,
            mean_adversarial: sum_adv / steps,
            mean_consistency: sum_con / steps,
            mean_feature_distance: distances.iter().sum::<f64>() / distances.len() as f64,
        };
        log::info!(
            "{stage} epoch {} loss {:.6} feature distance {:.6}",
            epoch + 1,
            record.mean_loss,
            record.mean_feature_distance
        );
        log.epochs.push(record);
        if epoch + 1 == config.epochs {
            log.final_epoch_distances = distances;
        }
        if let Some(h) = hook.as_mut() {
            h(epoch, params, &record);
        }
    }
    Ok(log)
}

enum BindKind {
    Generator(BoundParams),
    Noise(Var),
}

/// Trains a perturbation generator against the frozen `encoder`. Only the
/// generator's parameters receive updates; the encoder is borrowed
/// immutably.
pub fn train_generator(
    encoder: &ModelParams,
    dataset: &ImageDataset,
    config: &AttackConfig,
    hook: Option<EpochHook<'_, ModelParams>>,
) -> Result<(ModelParams, AttackLog)> {
    let mut gen = ModelParams::init(
        Arch::Generator,
        SplitMix64::derive(config.seed, tags::GENERATOR_INIT),
    );
    let log = train_loop(
        "attack",
        encoder,
        dataset,
        config,
        &mut gen,
        |p| p.tensors_mut(),
        |p, g| {
            let b = p.bind(g, true);
            (b.vars.clone(), BindKind::Generator(b))
        },
        |_, _| {},
        hook,
    )?;
    Ok((gen, log))
}

/// Optimizes one shared `δ: [3,32,32]` with the generator's objective,
/// projecting it onto `[-ε, ε]` after every step. `δ` starts uniform in
/// `[-ε/2, ε/2]`.
pub fn train_fixed_noise(
    encoder: &ModelParams,
    dataset: &ImageDataset,
    config: &AttackConfig,
    hook: Option<EpochHook<'_, Tensor<f32>>>,
) -> Result<(Tensor<f32>, AttackLog)> {
    check_epsilon(config.epsilon)?;
    let mut rng = SplitMix64::new(SplitMix64::derive(config.seed, tags::NOISE_INIT));
    let half = config.epsilon / 2.0;
    let mut delta = Tensor::from_fn(&IMAGE_SHAPE, |_| rng.uniform(-half, half) as f32);
    let log = train_loop(
        "attack-fixed",
        encoder,
        dataset,
        config,
        &mut delta,
        |d| vec![d],
        |d, g| {
            let v = g.leaf(d.clone());
            (vec![v], BindKind::Noise(v))
        },
        |d, e| {
            for v in d.data_mut() {
                *v = v.clamp(-e, e);
            }
        },
        hook,
    )?;
    Ok((delta, log))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentReport {
    pub distances: Vec<f64>,
    pub fraction_within: f64,
}

/// Per-sample `‖E(x_adv) - E(x_t)‖₂` and the fraction at most `eta`.
pub fn check_alignment(
    encoder: &ModelParams,
    x_adv: &Tensor<f32>,
    threat: &Tensor<f32>,
    eta: f64,
) -> Result<AlignmentReport> {
    if !(eta > 0.0) {
        return Err(invalid(format!("eta must be > 0, got {eta}")));
    }
    let f_t = anchor_feature(encoder, threat)?;
    let f = encode(encoder, x_adv, 256)?;
    let distances: Vec<f64> = f
        .data()
        .chunks(FEATURE_DIM)
        .map(|row| {
            row.iter()
                .zip(f_t.data())
                .map(|(&a, &b)| sq(a - b))
                .sum::<f64>()
        })
        .map(libm::sqrt)
        .collect();
    let within = distances.iter().filter(|&&d| d <= eta).count();
    Ok(AlignmentReport {
        fraction_within: within as f64 / distances.len() as f64,
        distances,
    })
}

/// Largest per-image `‖x_adv - x‖∞` and whether every pixel lies in `[0,1]`.
pub fn budget_check(x: &Tensor<f32>, x_adv: &Tensor<f32>) -> Result<(f64, bool)> {
    if x.shape() != x_adv.shape() {
        return Err(Error::Shape {
            op: "budget_check",
            detail: format!("{:?} vs {:?}", x.shape(), x_adv.shape()),
        });
    }
    let max = x
        .data()
        .iter()
        .zip(x_adv.data())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .fold(0.0, f64::max);
    let in_range = x_adv.data().iter().all(|&p| (0.0..=1.0).contains(&p));
    Ok((max, in_range))
}
