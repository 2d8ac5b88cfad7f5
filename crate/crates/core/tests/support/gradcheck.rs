//! Central finite differences in f64 against `Graph::backward`.

use tdaa_core::{Graph, Result, SplitMix64, Tensor, Var};

pub const CASES: usize = 20;
pub const TOLERANCE: f64 = 1e-5;
const H: f64 = 1e-6;
/// Coordinates probed per input tensor; larger tensors are subsampled.
const MAX_COORDS: usize = 48;

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

pub fn random(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(lo, hi))
}

/// Like [`random`] but every value at least `gap` away from each of `kinks`.
pub fn away_from(
    rng: &mut SplitMix64,
    shape: &[usize],
    lo: f64,
    hi: f64,
    kinks: &[f64],
    gap: f64,
) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.uniform(lo, hi);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            break v;
        }
    })
}

/// Scalar objective `Σ w ⊙ build(inputs)` with fixed random weights `w`.
fn objective(
    inputs: &[Tensor<f64>],
    build: &Build,
    weights: &mut Option<Tensor<f64>>,
    seed: u64,
) -> Result<(Graph<f64>, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let shape = g.value(out).shape().to_vec();
    let w = weights
        .get_or_insert_with(|| {
            let mut rng = SplitMix64::new(seed);
            Tensor::from_fn(&shape, |_| rng.uniform(-1.0, 1.0))
        })
        .clone();
    let wv = g.constant(w);
    let prod = g.mul(out, wv)?;
    let s = g.sum(prod)?;
    Ok((g, s, vars))
}

/// Worst norm-wise relative error over the inputs, `‖a - n‖ / max(‖a‖, ‖n‖)`
/// on the probed coordinates.
pub fn max_rel_error(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> Result<f64> {
    let mut weights = None;
    let (g, s, vars) = objective(inputs, build, &mut weights, seed)?;
    let grads = g.backward(s, &vars)?;
    let mut rng = SplitMix64::new(seed ^ 0xFD);
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if input.len() <= MAX_COORDS {
            (0..input.len()).collect()
        } else {
            (0..MAX_COORDS).map(|_| rng.below(input.len())).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &c in &coords {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted = inputs.to_vec();
                shifted[k].data_mut()[c] += delta;
                let (g, s, _) = objective(&shifted, build, &mut weights.clone(), seed)?;
                Ok(g.value(s).item())
            };
            let numeric = (eval(H)? - eval(-H)?) / (2.0 * H);
            let analytic = grads[k].data()[c];
            diff += (numeric - analytic).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        let err = if scale < 1e-12 { diff.sqrt() } else { diff.sqrt() / scale };
        worst = worst.max(err);
    }
    Ok(worst)
}

pub struct Primitive {
    pub name: &'static str,
    /// Builds the inputs for case `i` and the op under test.
    pub case: fn(&mut SplitMix64) -> (Vec<Tensor<f64>>, Box<Build>),
}

fn b(f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Box<Build> {
    Box::new(f)
}

fn dims(rng: &mut SplitMix64, lo: i64, hi: i64) -> usize {
    rng.int_in(lo, hi) as usize
}

/// Every differentiable operation of the graph, plus the composite losses.
pub fn primitives() -> Vec<Primitive> {
    vec![
        Primitive {
            name: "conv2d",
            case: |r| {
                let (n, c, o) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3));
                let k = [1usize, 3, 3][r.below(3)];
                let stride = dims(r, 1, 2);
                let pad = if k == 1 { 0 } else { dims(r, 0, 1) };
                let (h, w) = (dims(r, 3, 7), dims(r, 3, 7));
                let inputs = vec![
                    random(r, &[n, c, h, w], -1.0, 1.0),
                    random(r, &[o, c, k, k], -1.0, 1.0),
                    random(r, &[o], -1.0, 1.0),
                ];
                (inputs, b(move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad)))
            },
        },
        Primitive {
            name: "matmul",
            case: |r| {
                let (m, k, n) = (dims(r, 1, 5), dims(r, 1, 5), dims(r, 1, 5));
                let inputs = vec![random(r, &[m, k], -1.0, 1.0), random(r, &[k, n], -1.0, 1.0)];
                (inputs, b(|g, v| g.matmul(v[0], v[1])))
            },
        },
        Primitive {
            name: "matmul_nt",
            case: |r| {
                let (m, k, n) = (dims(r, 1, 5), dims(r, 1, 5), dims(r, 1, 5));
                let inputs = vec![random(r, &[m, k], -1.0, 1.0), random(r, &[n, k], -1.0, 1.0)];
                (inputs, b(|g, v| g.matmul_nt(v[0], v[1])))
            },
        },
        Primitive {
            name: "linear",
            case: |r| {
                let (n, i, o) = (dims(r, 1, 5), dims(r, 1, 6), dims(r, 1, 4));
                let inputs = vec![
                    random(r, &[n, i], -1.0, 1.0),
                    random(r, &[o, i], -1.0, 1.0),
                    random(r, &[o], -1.0, 1.0),
                ];
                (inputs, b(|g, v| g.linear(v[0], v[1], v[2])))
            },
        },
        Primitive {
            name: "add",
            case: |r| {
                let s = [dims(r, 1, 4), dims(r, 1, 4)];
                (vec![random(r, &s, -1.0, 1.0), random(r, &s, -1.0, 1.0)], b(|g, v| g.add(v[0], v[1])))
            },
        },
        Primitive {
            name: "sub",
            case: |r| {
                let s = [dims(r, 1, 4), dims(r, 1, 4)];
                (vec![random(r, &s, -1.0, 1.0), random(r, &s, -1.0, 1.0)], b(|g, v| g.sub(v[0], v[1])))
            },
        },
        Primitive {
            name: "mul",
            case: |r| {
                let s = [dims(r, 1, 4), dims(r, 1, 4)];
                (vec![random(r, &s, -1.0, 1.0), random(r, &s, -1.0, 1.0)], b(|g, v| g.mul(v[0], v[1])))
            },
        },
        Primitive {
            name: "sub_row",
            case: |r| {
                let (n, d) = (dims(r, 1, 4), dims(r, 1, 5));
                (vec![random(r, &[n, d], -1.0, 1.0), random(r, &[d], -1.0, 1.0)], b(|g, v| g.sub_row(v[0], v[1])))
            },
        },
        Primitive {
            name: "add_row",
            case: |r| {
                let (n, c, d) = (dims(r, 1, 4), dims(r, 1, 3), dims(r, 1, 4));
                (vec![random(r, &[n, c, d], -1.0, 1.0), random(r, &[c, d], -1.0, 1.0)], b(|g, v| g.add_row(v[0], v[1])))
            },
        },
        Primitive {
            name: "scale",
            case: |r| {
                let s = r.uniform(-3.0, 3.0);
                let n = dims(r, 1, 6);
                (vec![random(r, &[n], -1.0, 1.0)], b(move |g, v| g.scale(v[0], s)))
            },
        },
        Primitive {
            name: "relu",
            case: |r| {
                let n = dims(r, 1, 12);
                (vec![away_from(r, &[n], -1.0, 1.0, &[0.0], 1e-3)], b(|g, v| g.relu(v[0])))
            },
        },
        Primitive {
            name: "tanh",
            case: |r| {
                let n = dims(r, 1, 12);
                (vec![random(r, &[n], -2.0, 2.0)], b(|g, v| g.tanh(v[0])))
            },
        },
        Primitive {
            name: "clamp_st",
            case: |r| {
                let n = dims(r, 1, 12);
                (
                    vec![away_from(r, &[n], -1.0, 1.0, &[-0.4, 0.4], 1e-3)],
                    b(|g, v| g.clamp_st(v[0], -0.4, 0.4)),
                )
            },
        },
        Primitive {
            name: "reshape",
            case: |r| {
                let (a, c) = (dims(r, 1, 4), dims(r, 1, 4));
                (vec![random(r, &[a, c], -1.0, 1.0)], b(move |g, v| g.reshape(v[0], &[c, a])))
            },
        },
        Primitive {
            name: "sum",
            case: |r| {
                let s = [dims(r, 1, 4), dims(r, 1, 4)];
                (vec![random(r, &s, -1.0, 1.0)], b(|g, v| g.sum(v[0])))
            },
        },
        Primitive {
            name: "mean",
            case: |r| {
                let s = [dims(r, 1, 4), dims(r, 1, 4)];
                (vec![random(r, &s, -1.0, 1.0)], b(|g, v| g.mean(v[0])))
            },
        },
        Primitive {
            name: "upsample2x",
            case: |r| {
                let s = [dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4)];
                (vec![random(r, &s, -1.0, 1.0)], b(|g, v| g.upsample2x(v[0])))
            },
        },
        Primitive {
            name: "global_avg_pool",
            case: |r| {
                let s = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4)];
                (vec![random(r, &s, -1.0, 1.0)], b(|g, v| g.global_avg_pool(v[0])))
            },
        },
        Primitive {
            name: "row_norm",
            case: |r| {
                let (n, d) = (dims(r, 1, 4), dims(r, 1, 6));
                (vec![away_from(r, &[n, d], -1.0, 1.0, &[0.0], 0.05)], b(|g, v| g.row_norm(v[0])))
            },
        },
        Primitive {
            name: "normalize_rows",
            case: |r| {
                let (n, d) = (dims(r, 1, 4), dims(r, 1, 6));
                (vec![away_from(r, &[n, d], -1.0, 1.0, &[0.0], 0.05)], b(|g, v| g.normalize_rows(v[0])))
            },
        },
        Primitive {
            name: "cosine_rows",
            case: |r| {
                let (n, d) = (dims(r, 1, 4), dims(r, 2, 6));
                let shared = r.next_u64() & 1 == 1;
                let other: &[usize] = if shared { &[d] } else { &[n, d] };
                (
                    vec![
                        away_from(r, &[n, d], -1.0, 1.0, &[0.0], 0.05),
                        away_from(r, other, -1.0, 1.0, &[0.0], 0.05),
                    ],
                    b(|g, v| g.cosine_rows(v[0], v[1])),
                )
            },
        },
        Primitive {
            name: "concat_rows",
            case: |r| {
                let (d, n1, n2) = (dims(r, 1, 4), dims(r, 1, 3), dims(r, 1, 3));
                (
                    vec![random(r, &[n1, d], -1.0, 1.0), random(r, &[n2, d], -1.0, 1.0)],
                    b(|g, v| g.concat_rows(v[0], v[1])),
                )
            },
        },
        Primitive {
            name: "softmax_cross_entropy",
            case: |r| {
                let (n, k) = (dims(r, 1, 5), dims(r, 2, 6));
                let labels: Vec<usize> = (0..n).map(|_| r.below(k)).collect();
                (
                    vec![random(r, &[n, k], -3.0, 3.0)],
                    b(move |g, v| g.softmax_cross_entropy(v[0], &labels)),
                )
            },
        },
        Primitive {
            name: "soft_cross_entropy",
            case: |r| {
                let (n, k) = (dims(r, 2, 5), dims(r, 3, 6));
                // Mask one non-target entry per row, give the rest of the
                // row a random distribution (first row left empty).
                let mut mask = vec![false; n * k];
                let mut t = vec![0.0; n * k];
                for i in 0..n {
                    let masked = r.below(k);
                    mask[i * k + masked] = true;
                    if i == 0 {
                        continue;
                    }
                    let mut total = 0.0;
                    for j in 0..k {
                        if j != masked {
                            t[i * k + j] = r.uniform(0.1, 1.0);
                            total += t[i * k + j];
                        }
                    }
                    for j in 0..k {
                        t[i * k + j] /= total;
                    }
                }
                let targets = Tensor::new(&[n, k], t).unwrap();
                (
                    vec![random(r, &[n, k], -3.0, 3.0)],
                    b(move |g, v| g.soft_cross_entropy(v[0], &targets, Some(&mask))),
                )
            },
        },
        Primitive {
            name: "info_nce_loss",
            case: |r| {
                let (n, d) = (dims(r, 2, 4), dims(r, 2, 5));
                (
                    vec![random(r, &[n, d], -1.0, 1.0), random(r, &[n, d], -1.0, 1.0)],
                    b(|g, v| tdaa_core::pretrain::info_nce_loss(g, v[0], v[1], 0.5)),
                )
            },
        },
        Primitive {
            name: "supcon_loss",
            case: |r| {
                let (n, d) = (dims(r, 3, 6), dims(r, 2, 5));
                let labels: Vec<usize> = (0..n).map(|_| r.below(2)).collect();
                (
                    vec![random(r, &[n, d], -1.0, 1.0)],
                    b(move |g, v| tdaa_core::pretrain::supcon_loss(g, v[0], &labels, 0.5)),
                )
            },
        },
        Primitive {
            name: "adversarial_loss",
            case: |r| {
                use tdaa_core::attack::{adversarial_loss, Criterion};
                let (n, d) = (dims(r, 1, 4), dims(r, 2, 6));
                let c = Criterion::ALL[r.below(3)];
                (
                    vec![random(r, &[n, d], -1.0, 1.0), random(r, &[d], -1.0, 1.0)],
                    b(move |g, v| adversarial_loss(g, v[0], v[1], c, 0.5)),
                )
            },
        },
        Primitive {
            name: "consistency_loss",
            case: |r| {
                let s = [dims(r, 1, 3), dims(r, 1, 3), dims(r, 2, 4), dims(r, 2, 4)];
                (
                    vec![random(r, &s, 0.0, 1.0), random(r, &s, 0.0, 1.0)],
                    b(|g, v| tdaa_core::attack::consistency_loss(g, v[0], v[1])),
                )
            },
        },
    ]
}

/// Runs `CASES` random cases of one primitive; returns the worst error.
pub fn check_primitive(p: &Primitive, seed: u64) -> Result<f64> {
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for i in 0..CASES {
        let (inputs, build) = (p.case)(&mut rng);
        worst = worst.max(max_rel_error(&inputs, &*build, seed.wrapping_add(i as u64))?);
    }
    Ok(worst)
}
