use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridRole};

/// Geometry of a weak view; replayable on any grid of the same size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoomTransform {
    pub scale: f64,
}

impl ZoomTransform {
    pub const IDENTITY: ZoomTransform = ZoomTransform { scale: 1.0 };

    /// Applies the zoom, bilinear for images/probabilities and nearest for
    /// binary masks.
    pub fn apply(&self, grid: &Grid) -> Result<Grid> {
        zoom(grid, self.scale)
    }
}

/// Zooms about the image center by `scale`; samples falling outside the
/// source are zero.
pub fn zoom(grid: &Grid, scale: f64) -> Result<Grid> {
    if scale.is_nan() || scale <= 0.0 || !scale.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "zoom scale must be positive, got {scale}"
        )));
    }
    if scale == 1.0 {
        return Ok(grid.clone());
    }
    let (h, w) = (grid.height(), grid.width());
    let cy = h as f64 / 2.0;
    let cx = w as f64 / 2.0;
    let src = grid.data();
    let mut out = vec![0.0; h * w];
    let nearest = grid.role() == GridRole::BinaryMask;
    for y in 0..h {
        let sy = (y as f64 + 0.5 - cy) / scale + cy - 0.5;
        for x in 0..w {
            let sx = (x as f64 + 0.5 - cx) / scale + cx - 0.5;
            out[y * w + x] = if nearest {
                let iy = (sy + 0.5).floor();
                let ix = (sx + 0.5).floor();
                if iy < 0.0 || ix < 0.0 || iy >= h as f64 || ix >= w as f64 {
                    0.0
                } else {
                    src[iy as usize * w + ix as usize]
                }
            } else {
                bilinear(src, h, w, sy, sx)
            };
        }
    }
    Ok(Grid::from_clamped(h, w, out, grid.role()))
}

fn bilinear(src: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let y0 = sy.floor();
    let x0 = sx.floor();
    let fy = sy - y0;
    let fx = sx - x0;
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            src[yy as usize * w + xx as usize]
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1.0) * fx;
    let bottom = at(y0 + 1.0, x0) * (1.0 - fx) + at(y0 + 1.0, x0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Random zoom with `scale ~ U[lo, hi]`. The returned transform replays the
/// same geometry on paired grids.
pub fn weak_augment<R: Rng + ?Sized>(
    image: &Grid,
    mask: Option<&Grid>,
    scale_range: (f64, f64),
    rng: &mut R,
) -> Result<(Grid, Option<Grid>, ZoomTransform)> {
    let (lo, hi) = scale_range;
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "zoom range [{lo}, {hi}] is empty"
        )));
    }
    if lo <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "zoom scale must be positive, got {lo}"
        )));
    }
    let scale = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    weak_augment_with(image, mask, ZoomTransform { scale })
}

pub fn weak_augment_with(
    image: &Grid,
    mask: Option<&Grid>,
    transform: ZoomTransform,
) -> Result<(Grid, Option<Grid>, ZoomTransform)> {
    let img = transform.apply(image)?;
    let m = mask.map(|m| transform.apply(m)).transpose()?;
    Ok((img, m, transform))
}
