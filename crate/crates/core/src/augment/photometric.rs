use rand::Rng;

use crate::grid::{Grid, GridRole};

/// Jitter amplitudes: brightness is an additive shift drawn from
/// `U[-brightness, brightness]`, contrast a factor from
/// `U[1 - contrast, 1 + contrast]` applied around the image mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
        }
    }
}

/// One concrete draw of the strong photometric pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotometricParams {
    pub brightness_shift: f64,
    pub contrast_factor: f64,
    pub blur_sigma: f64,
}

impl PhotometricParams {
    pub const IDENTITY: PhotometricParams = PhotometricParams {
        brightness_shift: 0.0,
        contrast_factor: 1.0,
        blur_sigma: 0.0,
    };
}

/// Blur below this sigma is a no-op.
const MIN_SIGMA: f64 = 1e-3;

pub fn sample_photometric<R: Rng + ?Sized>(
    jitter: Jitter,
    blur_sigma_range: (f64, f64),
    rng: &mut R,
) -> PhotometricParams {
    let mut uniform = |lo: f64, hi: f64| if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let brightness_shift = uniform(-jitter.brightness, jitter.brightness);
    let contrast_factor = uniform(1.0 - jitter.contrast, 1.0 + jitter.contrast);
    let blur_sigma = uniform(blur_sigma_range.0, blur_sigma_range.1);
    PhotometricParams {
        brightness_shift,
        contrast_factor,
        blur_sigma,
    }
}

/// Brightness shift, contrast around the mean, Gaussian blur; each stage
/// clamps into `[0, 1]`. The pixel grid is never moved.
pub fn apply_photometric(image: &Grid, params: &PhotometricParams) -> Grid {
    let (h, w) = (image.height(), image.width());
    let mut data: Vec<f64> = image
        .data()
        .iter()
        .map(|v| (v + params.brightness_shift).clamp(0.0, 1.0))
        .collect();
    if params.contrast_factor != 1.0 {
        let mean = data.iter().sum::<f64>() / data.len().max(1) as f64;
        for v in &mut data {
            *v = ((*v - mean) * params.contrast_factor + mean).clamp(0.0, 1.0);
        }
    }
    let g = Grid::from_clamped(h, w, data, GridRole::Image);
    if params.blur_sigma < MIN_SIGMA {
        return g;
    }
    gaussian_blur(&g, params.blur_sigma)
}

pub fn strong_photometric<R: Rng + ?Sized>(
    image: &Grid,
    jitter: Jitter,
    blur_sigma_range: (f64, f64),
    rng: &mut R,
) -> Grid {
    let params = sample_photometric(jitter, blur_sigma_range, rng);
    apply_photometric(image, &params)
}

/// Separable Gaussian blur with edge clamping and a `ceil(3 sigma)` radius.
pub fn gaussian_blur(image: &Grid, sigma: f64) -> Grid {
    let (h, w) = (image.height(), image.width());
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let src = image.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (k, d) in kernel.iter().zip(-radius..=radius) {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                acc += k * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (k, d) in kernel.iter().zip(-radius..=radius) {
            let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
            let src_row = &tmp[yy * w..(yy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (o, s) in dst.iter_mut().zip(src_row) {
                *o += k * s;
            }
        }
    }
    Grid::from_clamped(h, w, out, GridRole::Image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_amplitudes_and_tiny_sigma_is_identity() {
        let data = (0..64).map(|i| i as f64 / 63.0).collect();
        let img = Grid::new(8, 8, data, GridRole::Image).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let jitter = Jitter {
            brightness: 0.0,
            contrast: 0.0,
        };
        let out = strong_photometric(&img, jitter, (0.0, 0.0), &mut rng);
        assert_eq!(out, img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Grid::filled(20, 20, 0.3, GridRole::Image).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let out = strong_photometric(&img, Jitter::default(), (0.1, 2.0), &mut rng);
            let first = out.data()[0];
            assert!(out.data().iter().all(|v| (v - first).abs() < 1e-12));
        }
    }

    #[test]
    fn brightness_clamps_at_one() {
        let img = Grid::filled(2, 2, 0.8, GridRole::Image).unwrap();
        let params = PhotometricParams {
            brightness_shift: 0.5,
            ..PhotometricParams::IDENTITY
        };
        let out = apply_photometric(&img, &params);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn blur_preserves_mass_away_from_edges() {
        let mut data = vec![0.0; 31 * 31];
        data[15 * 31 + 15] = 1.0;
        let img = Grid::new(31, 31, data, GridRole::Image).unwrap();
        let out = gaussian_blur(&img, 1.5);
        let total: f64 = out.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(out.get(15, 15) > out.get(15, 16));
    }
}
