//! Procedural "lungscape" samples: two elliptical lung fields on a dark
//! background, textured with Gaussian noise, with bright soft-edged lesions
//! that each sit fully inside one cell of the 3x2 position grid.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::pgm::quantize;
use crate::grid::{Grid, GridRole};
use crate::postext::{cell_of, PositionLabel, COL_NAMES, ROW_NAMES};

pub const IMAGE_SIZE: usize = 224;

/// Closed list of single-side severity words.
pub const SEVERITIES: [&str; 5] = ["mild", "moderate", "severe", "patchy", "focal"];
/// Severity wording reserved for captions that mention both sides.
pub const BILATERAL_SEVERITY: &str = "bilateral pulmonary";

const BACKGROUND: f64 = 0.08;
const LUNG: f64 = 0.30;
/// Lung field centers (x) and semi-axes, as fractions of the image size.
const LUNG_CX: [f64; 2] = [0.277, 0.723];
const LUNG_CY: f64 = 0.5;
const LUNG_AX: f64 = 0.196;
const LUNG_AY: f64 = 0.41;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    /// Inclusive lesion count range.
    pub lesion_count: (usize, usize),
    /// Lesion radius range in pixels.
    pub radius: (f64, f64),
    /// Standard deviation of the additive texture noise.
    pub noise: f64,
    /// Range of the lesion peak brightness above the lung field.
    pub amplitude: (f64, f64),
    pub size: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            lesion_count: (1, 2),
            radius: (8.0, 24.0),
            noise: 0.05,
            amplitude: (0.2, 0.45),
            size: IMAGE_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Grid,
    pub mask: Grid,
    pub text: String,
    pub q: PositionLabel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Lesion {
    cy: f64,
    cx: f64,
    radius: f64,
    amplitude: f64,
}

fn cell_bounds(row: usize, col: usize, n: usize) -> (usize, usize, usize, usize) {
    let rows = [0, n / 3, 2 * n / 3, n];
    let cols = [0, n / 2, n];
    (rows[row], rows[row + 1], cols[col], cols[col + 1])
}

fn lung_level(y: f64, x: f64, n: f64) -> f64 {
    let mut best = f64::INFINITY;
    for cx in LUNG_CX {
        let dx = (x - cx * n) / (LUNG_AX * n);
        let dy = (y - LUNG_CY * n) / (LUNG_AY * n);
        best = best.min((dx * dx + dy * dy).sqrt());
    }
    best
}

/// Places a lesion of the given radius so its mask disc stays inside the
/// cell, preferring centers inside a lung field.
fn place_lesion<R: Rng + ?Sized>(rng: &mut R, row: usize, col: usize, spec: &SampleSpec) -> Lesion {
    let n = spec.size;
    let (y0, y1, x0, x1) = cell_bounds(row, col, n);
    let max_r = ((y1 - y0).min(x1 - x0) as f64 / 2.0 - 1.0).max(1.0);
    let radius = rng.gen_range(spec.radius.0..=spec.radius.1).min(max_r);
    // mask pixels satisfy d < radius, so keep every such pixel in the cell
    let lo_y = y0 as f64 + radius;
    let hi_y = y1 as f64 - 1.0 - radius;
    let lo_x = x0 as f64 + radius;
    let hi_x = x1 as f64 - 1.0 - radius;
    let mut center = ((lo_y + hi_y) / 2.0, (lo_x + hi_x) / 2.0);
    for _ in 0..64 {
        let c = (rng.gen_range(lo_y..=hi_y), rng.gen_range(lo_x..=hi_x));
        center = c;
        if lung_level(c.0, c.1, n as f64) < 0.85 {
            break;
        }
    }
    Lesion {
        cy: center.0,
        cx: center.1,
        radius,
        amplitude: rng.gen_range(spec.amplitude.0..=spec.amplitude.1),
    }
}

fn cell_phrase(row: usize, col: usize) -> String {
    format!("{} {}", ROW_NAMES[row], COL_NAMES[col])
}

/// Every phrase the generator can emit for `cells` (one or two cells).
fn phrases(cells: PositionLabel) -> Vec<String> {
    let list: Vec<(usize, usize)> = cells.cells().collect();
    match list.as_slice() {
        [] => Vec::new(),
        [(r, c)] => vec![format!("{} lung", cell_phrase(*r, *c))],
        [(r1, c1), (r2, c2)] => {
            let (a, b) = (cell_phrase(*r1, *c1), cell_phrase(*r2, *c2));
            let mut out = vec![
                format!("{a} lung and {b} lung"),
                format!("{a} and {b} lung"),
                format!("{a} lung, {b} lung"),
            ];
            if r1 == r2 {
                out.push(format!("{} bilateral lung", ROW_NAMES[*r1]));
            }
            out
        }
        _ => panic!("captions cover at most two cells"),
    }
}

fn severities(cells: PositionLabel) -> Vec<&'static str> {
    let mut out = SEVERITIES.to_vec();
    if cells.columns() == 0b11 {
        out.push(BILATERAL_SEVERITY);
    }
    out
}

/// All captions the generator can produce for `cells`.
pub fn caption_variants(cells: PositionLabel) -> Vec<String> {
    if cells.is_empty() {
        return vec!["no infection".to_string()];
    }
    let mut out = Vec::new();
    for sev in severities(cells) {
        for p in phrases(cells) {
            out.push(format!("{sev} infection, {p}"));
        }
    }
    out
}

fn caption<R: Rng + ?Sized>(rng: &mut R, cells: PositionLabel) -> String {
    if cells.is_empty() {
        return "no infection".to_string();
    }
    let sev = *severities(cells).choose(rng).expect("non-empty");
    let phrase = phrases(cells).choose(rng).cloned().expect("non-empty");
    format!("{sev} infection, {phrase}")
}

/// Draws one sample. All randomness comes from `rng`.
pub fn generate_sample<R: Rng + ?Sized>(rng: &mut R, id: &str, spec: &SampleSpec) -> Sample {
    let n = spec.size;
    let count = rng.gen_range(spec.lesion_count.0..=spec.lesion_count.1);
    let mut lesions = Vec::with_capacity(count);
    let mut q = PositionLabel::EMPTY;
    for _ in 0..count {
        let cell = rng.gen_range(0..6);
        let (row, col) = (cell / 2, cell % 2);
        lesions.push(place_lesion(rng, row, col, spec));
        q = q.union(PositionLabel::cell(row, col));
    }
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("valid deviation");
    let nf = n as f64;
    let mut image = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (yf, xf) = (y as f64, x as f64);
            // soft lung boundary over roughly 5% of the semi-axis
            let level = lung_level(yf, xf, nf);
            let inside = 1.0 / (1.0 + ((level - 1.0) / 0.05).exp());
            let mut v = BACKGROUND + (LUNG - BACKGROUND) * inside;
            let mut positive = false;
            for l in &lesions {
                let d2 = (yf - l.cy).powi(2) + (xf - l.cx).powi(2);
                let r2 = l.radius * l.radius;
                v += l.amplitude * (-std::f64::consts::LN_2 * d2 / r2).exp();
                positive |= d2 < r2;
            }
            v += noise.sample(rng);
            image.push(quantize(v) as f64 / 255.0);
            mask.push(if positive { 1.0 } else { 0.0 });
        }
    }
    let text = caption(rng, q);
    Sample {
        id: id.to_string(),
        image: Grid::new(n, n, image, GridRole::Image).expect("quantized values"),
        mask: Grid::new(n, n, mask, GridRole::BinaryMask).expect("binary mask"),
        text,
        q,
    }
}

/// First positive pixel of `mask` that lies outside the cells of `q`.
pub fn mask_outside_label(mask: &Grid, q: PositionLabel) -> Option<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) > 0.5 {
                let (r, c) = cell_of(y, x, h, w);
                if !q.contains(r, c) {
                    return Some((y, x));
                }
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postext::parse_positions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_satisfy_both_invariants() {
        let spec = SampleSpec::default();
        for seed in 0..40 {
            let s = generate_sample(&mut ChaCha8Rng::seed_from_u64(seed), "x", &spec);
            assert_eq!(parse_positions(&s.text).label, s.q, "{}", s.text);
            assert_eq!(mask_outside_label(&s.mask, s.q), None);
            assert!(s.mask.count_positive() > 0);
            assert!(s.text.contains(" infection, "));
        }
    }

    #[test]
    fn zero_lesions_give_an_empty_sample() {
        let spec = SampleSpec {
            lesion_count: (0, 0),
            ..SampleSpec::default()
        };
        let s = generate_sample(&mut ChaCha8Rng::seed_from_u64(1), "z", &spec);
        assert_eq!(s.text, "no infection");
        assert!(s.q.is_empty());
        assert_eq!(s.mask.count_positive(), 0);
    }

    #[test]
    fn every_lesion_cell_is_reachable() {
        let spec = SampleSpec {
            lesion_count: (1, 1),
            ..SampleSpec::default()
        };
        let mut seen = PositionLabel::EMPTY;
        for seed in 0..60 {
            let s = generate_sample(&mut ChaCha8Rng::seed_from_u64(seed), "x", &spec);
            seen = seen.union(s.q);
        }
        assert_eq!(seen, PositionLabel::ALL);
    }

    #[test]
    fn lower_pair_uses_the_shared_lung_form() {
        let q = PositionLabel::cell(2, 0).union(PositionLabel::cell(2, 1));
        let v = caption_variants(q);
        assert!(v.contains(
            &"bilateral pulmonary infection, lower left and lower right lung".to_string()
        ));
        for c in &v {
            assert_eq!(parse_positions(c).label, q, "{c}");
        }
    }
}
