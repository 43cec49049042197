use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridRole};
use crate::postext::{cell_of, laterality_conflict, span_mix, PositionLabel, ReferringExpression};

pub const DEFAULT_GATE_EPS: f64 = 1e-6;

/// Binary mask over `block_size x block_size` pixel blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    rows: usize,
    cols: usize,
    block_size: usize,
    cells: Vec<bool>,
}

impl BlockMask {
    /// Empty mask for a `height x width` image; both must be multiples of
    /// `block_size`.
    pub fn new(height: usize, width: usize, block_size: usize) -> Result<Self> {
        if block_size == 0
            || !height.is_multiple_of(block_size)
            || !width.is_multiple_of(block_size)
        {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} is not divisible into {block_size}-pixel blocks"
            )));
        }
        let rows = height / block_size;
        let cols = width / block_size;
        Ok(Self {
            rows,
            cols,
            block_size,
            cells: vec![false; rows * cols],
        })
    }

    pub fn full(height: usize, width: usize, block_size: usize) -> Result<Self> {
        let mut m = Self::new(height, width, block_size)?;
        m.cells.iter_mut().for_each(|c| *c = true);
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn height(&self) -> usize {
        self.rows * self.block_size
    }

    pub fn width(&self) -> usize {
        self.cols * self.block_size
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.cells[row * self.cols + col] = on;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Active `(row, col)` blocks in row-major order.
    pub fn active(&self) -> Vec<(usize, usize)> {
        (0..self.rows * self.cols)
            .filter(|&i| self.cells[i])
            .map(|i| (i / self.cols, i % self.cols))
            .collect()
    }

    /// Pixel value of the expanded mask.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> f64 {
        if self.get(y / self.block_size, x / self.block_size) {
            1.0
        } else {
            0.0
        }
    }

    /// Pixel-level expansion as a binary grid.
    pub fn expand(&self) -> Grid {
        let (h, w) = (self.height(), self.width());
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                data[y * w + x] = self.pixel(y, x);
            }
        }
        Grid::from_clamped(h, w, data, GridRole::BinaryMask)
    }

    fn cleared(&self) -> Self {
        Self {
            cells: vec![false; self.cells.len()],
            ..self.clone()
        }
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        if grid.height() != self.height() || grid.width() != self.width() {
            return Err(Error::Shape(format!(
                "block mask covers {}x{}, grid is {}x{}",
                self.height(),
                self.width(),
                grid.height(),
                grid.width()
            )));
        }
        Ok(())
    }
}

/// Blocks whose centers fall inside any cell of `label`.
pub fn label_to_region_cells(
    label: PositionLabel,
    height: usize,
    width: usize,
    block_size: usize,
) -> Result<BlockMask> {
    let mut mask = BlockMask::new(height, width, block_size)?;
    for r in 0..mask.rows {
        let cy = r * block_size + block_size / 2;
        for c in 0..mask.cols {
            let cx = c * block_size + block_size / 2;
            let (band, side) = cell_of(cy, cx, height, width);
            if label.contains(band, side) {
                mask.set(r, c, true);
            }
        }
    }
    Ok(mask)
}

fn draw_ratio<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> f64 {
    if range.0 < range.1 {
        rng.gen_range(range.0..=range.1)
    } else {
        range.0
    }
}

/// Picks `max(1, round(phi * |C|))` of the candidate blocks uniformly
/// without replacement.
fn select_blocks<R: Rng + ?Sized>(
    candidates: &BlockMask,
    ratio_range: (f64, f64),
    rng: &mut R,
) -> Option<BlockMask> {
    let pool = candidates.active();
    if pool.is_empty() {
        return None;
    }
    let phi = draw_ratio(ratio_range, rng);
    let k = ((phi * pool.len() as f64).round() as usize).clamp(1, pool.len());
    let mut chosen = candidates.cleared();
    for i in index::sample(rng, pool.len(), k).into_iter() {
        let (r, c) = pool[i];
        chosen.set(r, c, true);
    }
    Some(chosen)
}

/// Samples blocks inside the donor's referenced region. `None` when the
/// donor has no position or the two captions conflict in laterality.
pub fn sample_mask_position_constrained<R: Rng + ?Sized>(
    q_i: PositionLabel,
    q_j: PositionLabel,
    height: usize,
    width: usize,
    block_size: usize,
    ratio_range: (f64, f64),
    rng: &mut R,
) -> Result<Option<BlockMask>> {
    if q_j.is_empty() || laterality_conflict(q_i, q_j) {
        return Ok(None);
    }
    let candidates = label_to_region_cells(q_j, height, width, block_size)?;
    Ok(select_blocks(&candidates, ratio_range, rng))
}

/// Samples blocks whose mean donor probability is at least `delta_gate`.
pub fn sample_mask_probability_driven<R: Rng + ?Sized>(
    p_donor: &Grid,
    delta_gate: f64,
    block_size: usize,
    ratio_range: (f64, f64),
    rng: &mut R,
) -> Result<Option<BlockMask>> {
    let mut candidates = BlockMask::new(p_donor.height(), p_donor.width(), block_size)?;
    let area = (block_size * block_size) as f64;
    for r in 0..candidates.rows {
        for c in 0..candidates.cols {
            let mut sum = 0.0;
            for y in r * block_size..(r + 1) * block_size {
                for x in c * block_size..(c + 1) * block_size {
                    sum += p_donor.get(y, x);
                }
            }
            if sum / area >= delta_gate {
                candidates.set(r, c, true);
            }
        }
    }
    Ok(select_blocks(&candidates, ratio_range, rng))
}

/// Lesion gating: `r = sum(P * M) / (sum(M) + eps)` over pixels; the mask
/// survives only when `r >= delta_gate`.
pub fn lesion_gate(
    p_donor: &Grid,
    mask: &BlockMask,
    delta_gate: f64,
    eps: f64,
) -> Result<(BlockMask, f64)> {
    mask.check_grid(p_donor)?;
    if mask.is_empty() {
        return Err(Error::InvalidArgument(
            "lesion gate needs a non-empty mask".into(),
        ));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "gate eps must be positive, got {eps}"
        )));
    }
    let bs = mask.block_size;
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, c) in mask.active() {
        for y in r * bs..(r + 1) * bs {
            for x in c * bs..(c + 1) * bs {
                num += p_donor.get(y, x);
                den += 1.0;
            }
        }
    }
    let ratio = num / (den + eps);
    if ratio >= delta_gate {
        Ok((mask.clone(), ratio))
    } else {
        Ok((mask.cleared(), ratio))
    }
}

/// `(1 - M) * I_i + M * I_j` with `M` expanded to pixels.
pub fn mix_images(receiver: &Grid, donor: &Grid, mask: &BlockMask) -> Result<Grid> {
    receiver.ensure_same_shape(donor)?;
    mask.check_grid(receiver)?;
    let (h, w) = (receiver.height(), receiver.width());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let m = mask.pixel(y, x);
            out.push((1.0 - m) * receiver.get(y, x) + m * donor.get(y, x));
        }
    }
    Grid::new(h, w, out, receiver.role())
}

/// `1([(1 - M) * P_i + M * P_j] >= 0.5)`.
pub fn mix_pseudo_masks(p_i: &Grid, p_j: &Grid, mask: &BlockMask) -> Result<Grid> {
    p_i.ensure_same_shape(p_j)?;
    mask.check_grid(p_i)?;
    let (h, w) = (p_i.height(), p_i.width());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let m = mask.pixel(y, x);
            let p = (1.0 - m) * p_i.get(y, x) + m * p_j.get(y, x);
            out.push(if p >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    Grid::new(h, w, out, GridRole::BinaryMask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixMode {
    PositionConstrained,
    ProbabilityDriven,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixConfig {
    pub block_size: usize,
    pub ratio_range: (f64, f64),
    pub delta_gate: f64,
    pub eps: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            block_size: 16,
            ratio_range: (0.25, 0.5),
            delta_gate: 0.5,
            eps: DEFAULT_GATE_EPS,
        }
    }
}

/// One side of a T-PatchMix pair: weak-view image, caption and teacher
/// probability map.
#[derive(Debug, Clone, Copy)]
pub struct MixPair<'a> {
    pub image: &'a Grid,
    pub expr: &'a ReferringExpression,
    pub prob: &'a Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixOutcome {
    pub mixed_image: Grid,
    pub mixed_pseudo_mask: Grid,
    pub mixed_text: ReferringExpression,
    pub applied: bool,
    pub mode: MixMode,
    pub gate_ratio: f64,
    /// Gated block mask actually used; `None` for the identity outcome.
    pub mask: Option<BlockMask>,
}

fn identity_outcome(receiver: &MixPair<'_>, gate_ratio: f64) -> MixOutcome {
    // mixing with an all-zero mask: the receiver's own probabilities at 0.5
    let pseudo = receiver
        .prob
        .data()
        .iter()
        .map(|&p| if p >= 0.5 { 1.0 } else { 0.0 })
        .collect();
    MixOutcome {
        mixed_image: receiver.image.clone(),
        mixed_pseudo_mask: Grid::from_clamped(
            receiver.prob.height(),
            receiver.prob.width(),
            pseudo,
            GridRole::BinaryMask,
        ),
        mixed_text: receiver.expr.clone(),
        applied: false,
        mode: MixMode::None,
        gate_ratio,
        mask: None,
    }
}

/// Cross-modal patch mixing of receiver `i` with donor `j`.
///
/// A fair coin picks the first sampler (position-constrained or
/// probability-driven); if it yields nothing the other is tried. The mask is
/// lesion-gated against the donor probabilities; any failure returns the
/// receiver unchanged with `applied = false`. On success the caption's first
/// span becomes `"<pos_i> and <pos_j>"` (or `", <pos_j>"` is appended when
/// the receiver has no span).
pub fn tpatchmix<R: Rng + ?Sized>(
    receiver: MixPair<'_>,
    donor: MixPair<'_>,
    config: &MixConfig,
    rng: &mut R,
) -> Result<MixOutcome> {
    receiver.image.ensure_same_shape(donor.image)?;
    receiver.image.ensure_same_shape(receiver.prob)?;
    receiver.image.ensure_same_shape(donor.prob)?;
    let (h, w) = (receiver.image.height(), receiver.image.width());
    let position_first = rng.gen_bool(0.5);
    let order = if position_first {
        [MixMode::PositionConstrained, MixMode::ProbabilityDriven]
    } else {
        [MixMode::ProbabilityDriven, MixMode::PositionConstrained]
    };
    let mut picked = None;
    for mode in order {
        let m = match mode {
            MixMode::PositionConstrained => sample_mask_position_constrained(
                receiver.expr.label,
                donor.expr.label,
                h,
                w,
                config.block_size,
                config.ratio_range,
                rng,
            )?,
            _ => sample_mask_probability_driven(
                donor.prob,
                config.delta_gate,
                config.block_size,
                config.ratio_range,
                rng,
            )?,
        };
        if let Some(m) = m {
            picked = Some((mode, m));
            break;
        }
    }
    let Some((mode, mask)) = picked else {
        return Ok(identity_outcome(&receiver, 0.0));
    };
    let (gated, ratio) = lesion_gate(donor.prob, &mask, config.delta_gate, config.eps)?;
    if gated.is_empty() {
        return Ok(identity_outcome(&receiver, ratio));
    }
    let mixed_image = mix_images(receiver.image, donor.image, &gated)?;
    let mixed_pseudo_mask = mix_pseudo_masks(receiver.prob, donor.prob, &gated)?;
    let mixed_text = match donor.expr.first_span() {
        Some(pos_j) if receiver.expr.spans.is_empty() => {
            crate::postext::parse_positions(&format!("{}, {}", receiver.expr.text, pos_j.surface))
        }
        Some(pos_j) => span_mix(receiver.expr, &pos_j.surface)?,
        None => receiver.expr.clone(),
    };
    Ok(MixOutcome {
        mixed_image,
        mixed_pseudo_mask,
        mixed_text,
        applied: true,
        mode,
        gate_ratio: ratio,
        mask: Some(gated),
    })
}
