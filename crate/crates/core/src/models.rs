//! Fixed architectures: victim encoder, perturbation generator, SSL
//! projection head and downstream linear head.
//!
//! | model      | layers                                                                 |
//! |------------|------------------------------------------------------------------------|
//! | encoder    | conv 3→32 s1, 32→64 s2, 64→128 s2, 128→128 s2 (3×3, pad 1, ReLU), GAP → 128 |
//! | generator  | conv 3→32 s1, 32→64 s2, 64→64 s1, ×2 upsample, 64→32 s1, 32→3 s1, ε·tanh |
//! | projection | linear 128→128, ReLU, linear 128→64                                    |
//! | head       | linear 128→K                                                           |

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 128;
pub const PROJECTION_DIM: usize = 64;
pub const IMAGE_SHAPE: [usize; 3] = [3, 32, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Encoder,
    Generator,
    Projection,
    Head { classes: usize },
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    name: &'static str,
    /// Conv kernels are `[O, C, 3, 3]`; linear weights are `[O, I]`.
    shape: [usize; 4],
    conv: bool,
}

const fn conv(name: &'static str, o: usize, c: usize) -> Layer {
    Layer {
        name,
        shape: [o, c, 3, 3],
        conv: true,
    }
}

const fn fc(name: &'static str, o: usize, i: usize) -> Layer {
    Layer {
        name,
        shape: [o, i, 1, 1],
        conv: false,
    }
}

const ENCODER_LAYERS: [Layer; 4] = [
    conv("conv1", 32, 3),
    conv("conv2", 64, 32),
    conv("conv3", 128, 64),
    conv("conv4", 128, 128),
];
const ENCODER_STRIDES: [usize; 4] = [1, 2, 2, 2];

const GENERATOR_LAYERS: [Layer; 5] = [
    conv("conv1", 32, 3),
    conv("conv2", 64, 32),
    conv("conv3", 64, 64),
    conv("conv4", 32, 64),
    conv("conv5", 3, 32),
];

const PROJECTION_LAYERS: [Layer; 2] = [
    fc("fc1", FEATURE_DIM, FEATURE_DIM),
    fc("fc2", PROJECTION_DIM, FEATURE_DIM),
];

impl Arch {
    /// Parses `encoder`, `generator`, `projection` or `head:<K>`.
    pub fn parse(descriptor: &str) -> Result<Arch> {
        match descriptor {
            "encoder" => Ok(Arch::Encoder),
            "generator" => Ok(Arch::Generator),
            "projection" => Ok(Arch::Projection),
            other => {
                let k = other
                    .strip_prefix("head:")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| invalid(format!("unknown architecture descriptor {other:?}")))?;
                if k < 2 {
                    return Err(invalid(format!("head needs at least 2 classes, got {k}")));
                }
                Ok(Arch::Head { classes: k })
            }
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            Arch::Encoder => "encoder".to_string(),
            Arch::Generator => "generator".to_string(),
            Arch::Projection => "projection".to_string(),
            Arch::Head { classes } => format!("head:{classes}"),
        }
    }

    fn layers(&self) -> Vec<Layer> {
        match self {
            Arch::Encoder => ENCODER_LAYERS.to_vec(),
            Arch::Generator => GENERATOR_LAYERS.to_vec(),
            Arch::Projection => PROJECTION_LAYERS.to_vec(),
            Arch::Head { classes } => alloc::vec![fc("fc", *classes, FEATURE_DIM)],
        }
    }

    /// `(name, shape)` of every parameter tensor in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in self.layers() {
            let w = if l.conv {
                l.shape.to_vec()
            } else {
                l.shape[..2].to_vec()
            };
            out.push((format!("{}.weight", l.name), w));
            out.push((format!("{}.bias", l.name), alloc::vec![l.shape[0]]));
        }
        out
    }
}

/// Named parameter tensors of one model, in [`Arch::layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    arch: Arch,
    tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ModelParams<T> {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`) and zero biases,
    /// drawn from one splitmix64 stream layer by layer, weights row-major.
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".weight") {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = libm::sqrt(6.0 / fan_in as f64);
                    Tensor::from_fn(&shape, |_| T::from_f64(rng.uniform(-bound, bound)))
                } else {
                    Tensor::zeros(&shape)
                };
                (name, t)
            })
            .collect();
        ModelParams { arch, tensors }
    }

    /// Validates names and shapes against the architecture layout.
    pub fn from_tensors(arch: Arch, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let layout = arch.layout();
        if layout.len() != tensors.len() {
            return Err(invalid(format!(
                "{} expects {} tensors, got {}",
                arch.descriptor(),
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, t)) in layout.iter().zip(&tensors) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(shape_err(
                    "model params",
                    format!(
                        "expected {name} {shape:?}, found {got_name} {:?}",
                        t.shape()
                    ),
                ));
            }
        }
        Ok(ModelParams { arch, tensors })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn tensors(&self) -> &[(String, Tensor<T>)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn tensor_refs(&self) -> Vec<&Tensor<T>> {
        self.tensors.iter().map(|(_, t)| t).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn into_tensors(self) -> Vec<(String, Tensor<T>)> {
        self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch,
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Places every tensor on `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            arch: self.arch,
            vars,
        }
    }
}

/// A model's parameters as graph nodes, in layout order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub arch: Arch,
    pub vars: Vec<Var>,
}

impl BoundParams {
    fn expect(&self, arch: Arch) -> Result<()> {
        if self.arch != arch {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                arch.descriptor(),
                self.arch.descriptor()
            )));
        }
        Ok(())
    }

    fn layer(&self, i: usize) -> (Var, Var) {
        (self.vars[2 * i], self.vars[2 * i + 1])
    }
}

fn expect_images<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.rank() != 4 || t.shape()[1..] != IMAGE_SHAPE {
        return Err(shape_err(
            op,
            format!("expected images [N,3,32,32], got {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// `[N,3,32,32]` images in `[0,1]` to `[N,128]` features.
pub fn encoder_forward<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, images: Var) -> Result<Var> {
    p.expect(Arch::Encoder)?;
    let x = g.value(images);
    expect_images("encoder_forward", x)?;
    if x.data().iter().any(|&v| v < T::zero() || v > T::one()) {
        return Err(invalid("encoder_forward: pixel values must lie in [0,1]"));
    }
    let mut h = images;
    for (i, &stride) in ENCODER_STRIDES.iter().enumerate() {
        let (w, b) = p.layer(i);
        h = g.conv2d(h, w, b, stride, 1)?;
        h = g.relu(h)?;
    }
    g.global_avg_pool(h)
}

/// Per-image perturbation with every element in `[-eps, eps]`.
pub fn generator_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    images: Var,
    eps: T,
) -> Result<Var> {
    p.expect(Arch::Generator)?;
    if !(eps > T::zero()) {
        return Err(invalid(format!("generator epsilon must be positive, got {eps:?}")));
    }
    expect_images("generator_forward", g.value(images))?;
    let (w, b) = p.layer(0);
    let h = g.conv2d(images, w, b, 1, 1)?;
    let h = g.relu(h)?;
    let (w, b) = p.layer(1);
    let h = g.conv2d(h, w, b, 2, 1)?;
    let h = g.relu(h)?;
    let (w, b) = p.layer(2);
    let h = g.conv2d(h, w, b, 1, 1)?;
    let h = g.relu(h)?;
    let h = g.upsample2x(h)?;
    let (w, b) = p.layer(3);
    let h = g.conv2d(h, w, b, 1, 1)?;
    let h = g.relu(h)?;
    let (w, b) = p.layer(4);
    let h = g.conv2d(h, w, b, 1, 1)?;
    let h = g.tanh(h)?;
    g.scale(h, eps)
}

pub fn projection_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    features: Var,
) -> Result<Var> {
    p.expect(Arch::Projection)?;
    let (w, b) = p.layer(0);
    let h = g.linear(features, w, b)?;
    let h = g.relu(h)?;
    let (w, b) = p.layer(1);
    g.linear(h, w, b)
}

/// `[N,128]` features to `[N,K]` logits.
pub fn head_forward<T: Scalar>(g: &mut Graph<T>, p: &BoundParams, features: Var) -> Result<Var> {
    let Arch::Head { .. } = p.arch else {
        return Err(invalid(format!(
            "expected head parameters, got {}",
            p.arch.descriptor()
        )));
    };
    let f = g.value(features);
    if f.rank() != 2 || f.shape()[1] != FEATURE_DIM {
        return Err(shape_err(
            "head_forward",
            format!("feature dim (axis 1) must be {FEATURE_DIM}, got {:?}", f.shape()),
        ));
    }
    let (w, b) = p.layer(0);
    g.linear(features, w, b)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Gradient-free encoder features for `images`, evaluated in chunks.
pub fn encode<T: Scalar>(
    encoder: &ModelParams<T>,
    images: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    map_chunks(images, chunk, |g, x| {
        let p = encoder.bind(g, false);
        encoder_forward(g, &p, x)
    })
}

/// Gradient-free head logits for `features`.
pub fn head_logits<T: Scalar>(head: &ModelParams<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let p = head.bind(&mut g, false);
    let f = g.constant(features.clone());
    let out = head_forward(&mut g, &p, f)?;
    Ok(g.value(out).clone())
}

/// Runs `f` on row chunks of `input` on fresh graphs and stacks the outputs.
pub(crate) fn map_chunks<T: Scalar>(
    input: &Tensor<T>,
    chunk: usize,
    f: impl Fn(&mut Graph<T>, Var) -> Result<Var>,
) -> Result<Tensor<T>> {
    let n = input.shape()[0];
    let chunk = chunk.max(1);
    let mut parts = Vec::with_capacity(n.div_ceil(chunk));
    let mut start = 0;
    while start < n {
        let count = chunk.min(n - start);
        let mut g = Graph::new();
        let x = g.constant(input.slice_rows(start, count));
        let out = f(&mut g, x)?;
        parts.push(g.value(out).clone());
        start += count;
    }
    Tensor::stack_rows(&parts)
}
