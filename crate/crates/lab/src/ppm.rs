//! Binary PPM (P6) images.

use tdaa_core::data::pixel_to_byte;
use tdaa_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PpmError {
    #[error("not a P6 image: {0}")]
    Format(String),
    #[error("expected a 32x32 image, got {0}x{1}")]
    Size(usize, usize),
}

/// Encodes planar `[3,H,W]` pixels in `[0,1]`.
pub fn encode(image: &Tensor<f32>) -> Vec<u8> {
    let s = image.shape();
    assert!(s.len() == 3 && s[0] == 3, "ppm::encode expects [3,H,W]");
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for p in 0..plane {
        for c in 0..3 {
            out.push(pixel_to_byte(d[c * plane + p]));
        }
    }
    out
}

/// Tiles `[N,3,H,W]` images into `rows` rows of `N / rows` images.
pub fn grid(images: &Tensor<f32>, rows: usize) -> Tensor<f32> {
    let s = images.shape();
    let (n, h, w) = (s[0], s[2], s[3]);
    let cols = n.div_ceil(rows.max(1));
    let (gh, gw) = (rows * h, cols * w);
    let mut out = vec![0.0f32; 3 * gh * gw];
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        let img = images.row(i);
        for ch in 0..3 {
            for y in 0..h {
                let src = &img[(ch * h + y) * w..(ch * h + y + 1) * w];
                let dst = (ch * gh + r * h + y) * gw + c * w;
                out[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Tensor::new(&[3, gh, gw], out).expect("grid shape")
}

fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], PpmError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PpmError::Format("truncated header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize, PpmError> {
    let t = token(bytes, pos)?;
    std::str::from_utf8(t)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PpmError::Format(format!("bad header field {:?}", String::from_utf8_lossy(t))))
}

/// Decodes a 32×32 P6 image with maxval 255 into `[3,32,32]`.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>, PpmError> {
    let mut pos = 0;
    if token(bytes, &mut pos)? != b"P6" {
        return Err(PpmError::Format("missing P6 magic".into()));
    }
    let w = number(bytes, &mut pos)?;
    let h = number(bytes, &mut pos)?;
    let max = number(bytes, &mut pos)?;
    if max != 255 {
        return Err(PpmError::Format(format!("maxval {max} is not 255")));
    }
    if (w, h) != (32, 32) {
        return Err(PpmError::Size(w, h));
    }
    pos += 1;
    let plane = w * h;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 3 * plane {
        return Err(PpmError::Format(format!(
            "expected {} pixel bytes, found {}",
            3 * plane,
            body.len()
        )));
    }
    let mut out = vec![0.0f32; 3 * plane];
    for (p, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * plane + p] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], out).expect("ppm shape"))
}
