use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Top-left corner `(row, col)` of a patch in the full grid.
pub type Origin = (usize, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Patch<T: Scalar = f32> {
    pub origin: Origin,
    pub data: Tensor<T>,
}

fn check_divisible(h: usize, w: usize, hp: usize, wp: usize) -> Result<()> {
    if hp == 0 || wp == 0 || h % hp != 0 || w % wp != 0 {
        return Err(Error::shape(format!("grid {h}x{w} is not divisible into {hp}x{wp} patches")));
    }
    Ok(())
}

/// Patch origins in row-major order.
pub fn patch_origins(h: usize, w: usize, hp: usize, wp: usize) -> Result<Vec<Origin>> {
    check_divisible(h, w, hp, wp)?;
    Ok((0..h / hp).flat_map(|i| (0..w / wp).map(move |j| (i * hp, j * wp))).collect())
}

/// Copies the `hp x wp` block at `origin` out of an `[H, W]` buffer.
pub(crate) fn crop<T: Scalar>(plane: &[T], w: usize, origin: Origin, hp: usize, wp: usize, out: &mut Vec<T>) {
    for r in 0..hp {
        let start = (origin.0 + r) * w + origin.1;
        out.extend_from_slice(&plane[start..start + wp]);
    }
}

pub fn tile_patches<T: Scalar>(frame: &Tensor<T>, hp: usize, wp: usize) -> Result<Vec<Patch<T>>> {
    frame.expect_shape_rank(2, "frame")?;
    let (h, w) = (frame.shape()[0], frame.shape()[1]);
    patch_origins(h, w, hp, wp)?
        .into_iter()
        .map(|origin| {
            let mut buf = Vec::with_capacity(hp * wp);
            crop(frame.data(), w, origin, hp, wp, &mut buf);
            Ok(Patch { origin, data: Tensor::new(vec![hp, wp], buf)? })
        })
        .collect()
}

pub fn stitch_patches<T: Scalar>(patches: &[Patch<T>], h: usize, w: usize) -> Result<Tensor<T>> {
    let mut out = vec![T::zero(); h * w];
    let mut cover = vec![0u8; h * w];
    for p in patches {
        p.data.expect_shape_rank(2, "patch")?;
        let (hp, wp) = (p.data.shape()[0], p.data.shape()[1]);
        let (r0, c0) = p.origin;
        if r0 + hp > h || c0 + wp > w {
            return Err(Error::shape(format!(
                "patch at ({r0}, {c0}) of size {hp}x{wp} exceeds the {h}x{w} grid"
            )));
        }
        for r in 0..hp {
            for c in 0..wp {
                let k = (r0 + r) * w + c0 + c;
                if cover[k] != 0 {
                    return Err(Error::Data(format!("patches overlap at cell ({}, {})", r0 + r, c0 + c)));
                }
                cover[k] = 1;
                out[k] = p.data.data()[r * wp + c];
            }
        }
    }
    if let Some(k) = cover.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("patches leave cell ({}, {}) uncovered", k / w, k % w)));
    }
    Tensor::new(vec![h, w], out)
}
