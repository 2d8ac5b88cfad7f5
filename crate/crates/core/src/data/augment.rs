use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Random stream for augmentation; identical seeds give identical views.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AugmentationRng(SplitMix64);

impl AugmentationRng {
    pub fn new(seed: u64) -> Self {
        AugmentationRng(SplitMix64::new(seed))
    }

    pub fn draws(&self) -> u64 {
        self.0.draws()
    }
}

/// One view's random choices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Crop side in `24..=32`.
    pub side: usize,
    pub off_x: usize,
    pub off_y: usize,
    pub flip: bool,
    /// Per-channel multiplier in `[0.8, 1.2)`.
    pub jitter: [f32; 3],
}

impl AugmentParams {
    /// Draw order: side, y offset, x offset, flip bit, R/G/B jitter.
    pub fn draw(rng: &mut AugmentationRng) -> Self {
        let r = &mut rng.0;
        let side = r.int_in(24, 32) as usize;
        let off_y = r.int_in(0, (32 - side) as i64) as usize;
        let off_x = r.int_in(0, (32 - side) as i64) as usize;
        let flip = r.next_u64() & 1 == 1;
        let jitter = core::array::from_fn(|_| r.uniform(0.8, 1.2) as f32);
        AugmentParams {
            side,
            off_x,
            off_y,
            flip,
            jitter,
        }
    }

    pub fn identity() -> Self {
        AugmentParams {
            side: 32,
            off_x: 0,
            off_y: 0,
            flip: false,
            jitter: [1.0; 3],
        }
    }
}

/// Crop, nearest-neighbour resize back to 32, optional horizontal flip,
/// per-channel jitter clamped to `[0,1]`. `out` receives 3072 values.
pub(crate) fn augment_into(image: &[f32], p: &AugmentParams, out: &mut [f32]) {
    for c in 0..3 {
        let plane = &image[c * 1024..(c + 1) * 1024];
        for y in 0..32 {
            let sy = p.off_y + (y * p.side) / 32;
            for x in 0..32 {
                let xx = if p.flip { 31 - x } else { x };
                let sx = p.off_x + (xx * p.side) / 32;
                let v = plane[sy * 32 + sx] * p.jitter[c];
                out[c * 1024 + y * 32 + x] = v.clamp(0.0, 1.0);
            }
        }
    }
}

fn expect_image(image: &Tensor<f32>) -> Result<()> {
    if image.shape() != [3, 32, 32] {
        return Err(shape_err(
            "augment",
            format!("expected [3,32,32], got {:?}", image.shape()),
        ));
    }
    Ok(())
}

pub fn augment_view(image: &Tensor<f32>, params: &AugmentParams) -> Result<Tensor<f32>> {
    expect_image(image)?;
    let mut out = alloc::vec![0.0; 3072];
    augment_into(image.data(), params, &mut out);
    Tensor::new(&[3, 32, 32], out)
}

/// Two independently augmented views of one image.
pub fn augment_pair(
    image: &Tensor<f32>,
    rng: &mut AugmentationRng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    expect_image(image)?;
    let p1 = AugmentParams::draw(rng);
    let p2 = AugmentParams::draw(rng);
    Ok((augment_view(image, &p1)?, augment_view(image, &p2)?))
}

/// Augments every row of `images: [B,3,32,32]`, row `i` with its own stream
/// seeded `SplitMix64::derive(seed, i)`. Returns `(views1, views2)`.
pub(crate) fn augment_batch_pairs(
    images: &Tensor<f32>,
    seeds: &[u64],
) -> (Tensor<f32>, Tensor<f32>) {
    let b = images.shape()[0];
    let pairs: Vec<(Vec<f32>, Vec<f32>)> = crate::par::map_indexed(b, |i| {
        let mut rng = AugmentationRng::new(seeds[i]);
        let p1 = AugmentParams::draw(&mut rng);
        let p2 = AugmentParams::draw(&mut rng);
        let mut v1 = alloc::vec![0.0; 3072];
        let mut v2 = alloc::vec![0.0; 3072];
        augment_into(images.row(i), &p1, &mut v1);
        augment_into(images.row(i), &p2, &mut v2);
        (v1, v2)
    });
    let mut a = Vec::with_capacity(b * 3072);
    let mut c = Vec::with_capacity(b * 3072);
    for (v1, v2) in pairs {
        a.extend(v1);
        c.extend(v2);
    }
    let shape = [b, 3, 32, 32];
    (
        Tensor::from_parts(&shape, a).expect("augmented batch shape"),
        Tensor::from_parts(&shape, c).expect("augmented batch shape"),
    )
}
