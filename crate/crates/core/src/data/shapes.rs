//! Shapes10: ten procedurally rasterized shape classes on 32×32 RGB.
//!
//! Sample `i` has class `i % 10` and its own splitmix64 stream seeded with
//! `seed ^ (split_code << 56) ^ i`. Draws, in order:
//!
//! 1. background R, G, B bytes (variant A: `[0,95]`, variant B: `[32,127]`)
//! 2. foreground R, G, B bytes in `[160,255]`
//! 3. center `cx`, then `cy`, each in `[10,21]`
//! 4. half-size `s` (variant A: `[6,12]`, variant B: `[5,10]`)
//! 5. noise in `[-8,8]` for every pixel, rows top to bottom, columns left to
//!    right, three draws (R, G, B) per pixel
//!
//! A pixel is foreground iff the class predicate holds for
//! `dx = x - cx`, `dy = y - cy` (integer arithmetic, `/` truncates):
//!
//! | class         | predicate                                               |
//! |---------------|---------------------------------------------------------|
//! | circle        | `dx² + dy² ≤ s²`                                        |
//! | square        | `max(|dx|,|dy|) ≤ s`                                    |
//! | triangle-up   | `|dy| ≤ s` and `2|dx| ≤ dy + s`                         |
//! | triangle-down | `|dy| ≤ s` and `2|dx| ≤ s - dy`                         |
//! | cross         | `max(|dx|,|dy|) ≤ s` and (`|dx| ≤ s/3` or `|dy| ≤ s/3`) |
//! | ring          | `s² ≤ 4(dx² + dy²)` and `dx² + dy² ≤ s²`                |
//! | h-bar         | `|dx| ≤ s` and `|dy| ≤ s/3`                             |
//! | v-bar         | `|dy| ≤ s` and `|dx| ≤ s/3`                             |
//! | diamond       | `|dx| + |dy| ≤ s`                                       |
//! | checker       | `max(|dx|,|dy|) ≤ s` and `(dx+s)/q + (dy+s)/q` even, `q = s/2` |
//!
//! The byte value is `clamp(base + noise, 0, 255)` and the stored pixel is
//! that byte divided by 255.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use super::{ImageDataset, Provenance, Split, IMAGE_LEN, NUM_CLASSES};
use crate::error::{invalid, Result};
use crate::par;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeClass {
    Circle,
    Square,
    TriangleUp,
    TriangleDown,
    Cross,
    Ring,
    HBar,
    VBar,
    Diamond,
    Checker,
}

pub const SHAPE_CLASSES: [ShapeClass; NUM_CLASSES] = [
    ShapeClass::Circle,
    ShapeClass::Square,
    ShapeClass::TriangleUp,
    ShapeClass::TriangleDown,
    ShapeClass::Cross,
    ShapeClass::Ring,
    ShapeClass::HBar,
    ShapeClass::VBar,
    ShapeClass::Diamond,
    ShapeClass::Checker,
];

impl ShapeClass {
    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::TriangleUp => "triangle-up",
            ShapeClass::TriangleDown => "triangle-down",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
            ShapeClass::HBar => "h-bar",
            ShapeClass::VBar => "v-bar",
            ShapeClass::Diamond => "diamond",
            ShapeClass::Checker => "checker",
        }
    }

    pub fn contains(self, dx: i64, dy: i64, s: i64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        let r2 = dx * dx + dy * dy;
        let in_box = ax.max(ay) <= s;
        match self {
            ShapeClass::Circle => r2 <= s * s,
            ShapeClass::Square => in_box,
            ShapeClass::TriangleUp => ay <= s && 2 * ax <= dy + s,
            ShapeClass::TriangleDown => ay <= s && 2 * ax <= s - dy,
            ShapeClass::Cross => in_box && (ax <= s / 3 || ay <= s / 3),
            ShapeClass::Ring => s * s <= 4 * r2 && r2 <= s * s,
            ShapeClass::HBar => ax <= s && ay <= s / 3,
            ShapeClass::VBar => ay <= s && ax <= s / 3,
            ShapeClass::Diamond => ax + ay <= s,
            ShapeClass::Checker => {
                let q = (s / 2).max(1);
                in_box && ((dx + s) / q + (dy + s) / q) % 2 == 0
            }
        }
    }
}

/// Style of the generated images. Variant B is the shifted domain used for
/// cross-dataset experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapesVariant {
    A,
    B,
}

impl ShapesVariant {
    fn background(self) -> (i64, i64) {
        match self {
            ShapesVariant::A => (0, 95),
            ShapesVariant::B => (32, 127),
        }
    }

    fn half_size(self) -> (i64, i64) {
        match self {
            ShapesVariant::A => (6, 12),
            ShapesVariant::B => (5, 10),
        }
    }

    pub fn source_name(self) -> &'static str {
        match self {
            ShapesVariant::A => "shapes10",
            ShapesVariant::B => "shapes10b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" | "A" | "shapes10" => Ok(ShapesVariant::A),
            "b" | "B" | "shapes10b" => Ok(ShapesVariant::B),
            other => Err(invalid(format!("unknown Shapes10 variant {other:?}"))),
        }
    }
}

/// Rasterizes one sample as bytes in `[3,32,32]` layout.
pub(crate) fn render_sample(variant: ShapesVariant, seed: u64, split: Split, i: usize) -> Vec<u8> {
    let mut rng = SplitMix64::new(seed ^ (split.code() << 56) ^ i as u64);
    let class = SHAPE_CLASSES[i % NUM_CLASSES];
    let (bg_lo, bg_hi) = variant.background();
    let bg: [i64; 3] = core::array::from_fn(|_| rng.int_in(bg_lo, bg_hi));
    let fg: [i64; 3] = core::array::from_fn(|_| rng.int_in(160, 255));
    let cx = rng.int_in(10, 21);
    let cy = rng.int_in(10, 21);
    let (s_lo, s_hi) = variant.half_size();
    let s = rng.int_in(s_lo, s_hi);
    let mut out = alloc::vec![0u8; IMAGE_LEN];
    for y in 0..32i64 {
        for x in 0..32i64 {
            let base = if class.contains(x - cx, y - cy, s) {
                &fg
            } else {
                &bg
            };
            for c in 0..3 {
                let v = (base[c] + rng.int_in(-8, 8)).clamp(0, 255);
                out[c * 1024 + (y * 32 + x) as usize] = v as u8;
            }
        }
    }
    out
}

/// Generates `count` samples (a multiple of 10, classes exactly balanced).
pub fn gen_shapes10(
    variant: ShapesVariant,
    seed: u64,
    split: Split,
    count: usize,
) -> Result<ImageDataset> {
    if count == 0 || count % NUM_CLASSES != 0 {
        return Err(invalid(format!(
            "Shapes10 count must be a positive multiple of 10, got {count}"
        )));
    }
    let rows = par::map_indexed(count, |i| render_sample(variant, seed, split, i));
    let mut data = Vec::with_capacity(count * IMAGE_LEN);
    for r in &rows {
        data.extend(r.iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::from_parts(&[count, 3, 32, 32], data)?;
    let labels = (0..count).map(|i| (i % NUM_CLASSES) as u8).collect();
    ImageDataset::new(
        images,
        labels,
        split,
        Provenance {
            source: variant.source_name().to_string(),
            seed,
        },
    )
}
