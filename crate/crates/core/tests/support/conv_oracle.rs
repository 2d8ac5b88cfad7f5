//! Direct-loop convolution and its adjoints.

use tdaa_core::{Graph, SplitMix64, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct Config {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Config {
    pub fn out(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn random(r: &mut SplitMix64) -> Config {
        let k = [1usize, 3, 3, 5][r.below(4)];
        let pad = if k == 1 { 0 } else { r.below(k / 2 + 1) };
        Config {
            n: 1 + r.below(3),
            c: 1 + r.below(4),
            h: k + r.below(8),
            w: k + r.below(8),
            o: 1 + r.below(4),
            k,
            stride: 1 + r.below(3),
            pad,
        }
    }
}

/// Input coordinate read by output `(oy, ox)` through tap `(ky, kx)`, or
/// `None` when it falls in the zero padding.
fn source(cfg: &Config, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
    let y = (oy * cfg.stride + ky) as isize - cfg.pad as isize;
    let x = (ox * cfg.stride + kx) as isize - cfg.pad as isize;
    (y >= 0 && x >= 0 && (y as usize) < cfg.h && (x as usize) < cfg.w).then(|| (y as usize, x as usize))
}

pub fn forward(cfg: &Config, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
    let (ho, wo) = cfg.out();
    let mut out = vec![0.0; cfg.n * cfg.o * ho * wo];
    for n in 0..cfg.n {
        for o in 0..cfg.o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[o];
                    for c in 0..cfg.c {
                        for ky in 0..cfg.k {
                            for kx in 0..cfg.k {
                                if let Some((y, xx)) = source(cfg, oy, ox, ky, kx) {
                                    s += x[((n * cfg.c + c) * cfg.h + y) * cfg.w + xx]
                                        * k[((o * cfg.c + c) * cfg.k + ky) * cfg.k + kx];
                                }
                            }
                        }
                    }
                    out[((n * cfg.o + o) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

/// Gradients of `Σ gy ⊙ conv(x, k, b)` with respect to `x`, `k`, `b`.
pub fn backward(cfg: &Config, x: &[f64], k: &[f64], gy: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = cfg.out();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; cfg.o];
    for n in 0..cfg.n {
        for o in 0..cfg.o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = gy[((n * cfg.o + o) * ho + oy) * wo + ox];
                    gb[o] += g;
                    for c in 0..cfg.c {
                        for ky in 0..cfg.k {
                            for kx in 0..cfg.k {
                                if let Some((y, xx)) = source(cfg, oy, ox, ky, kx) {
                                    let xi = ((n * cfg.c + c) * cfg.h + y) * cfg.w + xx;
                                    let ki = ((o * cfg.c + c) * cfg.k + ky) * cfg.k + kx;
                                    gx[xi] += g * k[ki];
                                    gk[ki] += g * x[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Largest absolute deviation between the graph's conv2d (value and all
/// three gradients) and the direct loops.
pub fn max_deviation(cfg: &Config, seed: u64) -> f64 {
    let mut r = SplitMix64::new(seed);
    let mut rand = |len: usize| -> Vec<f64> { (0..len).map(|_| r.uniform(-1.0, 1.0)).collect() };
    let x = rand(cfg.n * cfg.c * cfg.h * cfg.w);
    let k = rand(cfg.o * cfg.c * cfg.k * cfg.k);
    let b = rand(cfg.o);
    let (ho, wo) = cfg.out();
    let gy = rand(cfg.n * cfg.o * ho * wo);

    let mut g = Graph::<f64>::new();
    let xv = g.leaf(Tensor::new(&[cfg.n, cfg.c, cfg.h, cfg.w], x.clone()).unwrap());
    let kv = g.leaf(Tensor::new(&[cfg.o, cfg.c, cfg.k, cfg.k], k.clone()).unwrap());
    let bv = g.leaf(Tensor::new(&[cfg.o], b.clone()).unwrap());
    let y = g.conv2d(xv, kv, bv, cfg.stride, cfg.pad).unwrap();
    let w = g.constant(Tensor::new(&[cfg.n, cfg.o, ho, wo], gy.clone()).unwrap());
    let p = g.mul(y, w).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s, &[xv, kv, bv]).unwrap();

    let expect_y = forward(cfg, &x, &k, &b);
    let (gx, gk, gb) = backward(cfg, &x, &k, &gy);
    let dev = |a: &[f64], e: &[f64]| a.iter().zip(e).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    assert_eq!(g.value(y).len(), expect_y.len());
    dev(g.value(y).data(), &expect_y)
        .max(dev(grads[0].data(), &gx))
        .max(dev(grads[1].data(), &gk))
        .max(dev(grads[2].data(), &gb))
}
