//! Binary PGM (P5) export of [-1,1]-scaled grayscale image batches, written
//! atomically. PGM keeps image artifacts bit-exact and diffable in tests.

use std::path::Path;

use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

/// Encode one `[h, w]`-shaped (or `[1, h, w]`) image.
pub fn encode_image(img: &Tensor) -> Result<Vec<u8>> {
    let shape = img.shape();
    let (h, w) = match shape {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        other => return Err(Error::ShapeMismatch(format!("pgm expects [h,w], got {other:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Tile a `[n, 1, h, w]` (or `[n, h*w]` with `hw` given) batch into a grid of
/// `cols` columns with a 1px separator, and encode as one PGM.
pub fn encode_grid(batch: &Tensor, cols: usize) -> Result<Vec<u8>> {
    let shape = batch.shape().to_vec();
    let (n, h, w) = match shape.as_slice() {
        [n, 1, h, w] => (*n, *h, *w),
        [n, h, w] => (*n, *h, *w),
        other => {
            return Err(Error::ShapeMismatch(format!("pgm grid expects [n,1,h,w], got {other:?}")))
        }
    };
    if n == 0 || cols == 0 {
        return Err(Error::Data("pgm grid needs at least one image and column".into()));
    }
    let rows = n.div_ceil(cols);
    let (gh, gw) = (rows * h + rows - 1, cols * w + cols - 1);
    // Separator gray = 0 in [-1,1] scale.
    let mut canvas = vec![0.0f64; gh * gw];
    for i in 0..n {
        let (r, c) = (i / cols, i % cols);
        let img = batch.row(i);
        for y in 0..h {
            let dst = (r * (h + 1) + y) * gw + c * (w + 1);
            canvas[dst..dst + w].copy_from_slice(&img[y * w..(y + 1) * w]);
        }
    }
    encode_image(&Tensor::from_vec(vec![gh, gw], canvas)?)
}

pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    atomic_write(path, &encode_image(img)?)
}

pub fn write_grid(path: &Path, batch: &Tensor, cols: usize) -> Result<()> {
    atomic_write(path, &encode_grid(batch, cols)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_levels() {
        let img = Tensor::from_vec(vec![1, 2], vec![-1.0, 1.0]).unwrap();
        let bytes = encode_image(&img).unwrap();
        assert!(bytes.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(&bytes[bytes.len() - 2..], &[0u8, 255u8]);
    }

    #[test]
    fn grid_is_deterministic_and_sized() {
        let batch = Tensor::zeros(&[4, 1, 3, 3]);
        let a = encode_grid(&batch, 2).unwrap();
        let b = encode_grid(&batch, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(b"P5\n7 7\n255\n")); // 2*3+1 per side
    }
}
