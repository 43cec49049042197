//! Losses and metrics.
//!
//! DiceCE for supervised and pseudo-label supervision, hard pseudo-labels,
//! the position-weighted bidirectional contrastive loss (ITCL), the weighted
//! total objective, and the Dice / IoU evaluation metrics. Everything here is
//! computed in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridRole};
use crate::postext::AffinityMatrix;

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_pair(logits: &[f64], target: &[f64]) -> Result<()> {
    if logits.len() != target.len() {
        return Err(Error::Shape(format!(
            "logits have {} values, target {}",
            logits.len(),
            target.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Shape("empty prediction".into()));
    }
    Ok(())
}

/// Dice term and BCE term separately: `(1 - (2 Σpy + s) / (Σp + Σy + s),
/// mean BCE)` with `p = clamp(sigmoid(z), 1e-7, 1 - 1e-7)` and `s = 1`.
pub fn dice_ce_terms(logits: &[f64], target: &[f64]) -> Result<(f64, f64)> {
    check_pair(logits, target)?;
    let (mut inter, mut sum_p, mut sum_y, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for (&z, &y) in logits.iter().zip(target) {
        let p = sigmoid(z).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        inter += p * y;
        sum_p += p;
        sum_y += y;
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    let dice = 1.0 - (2.0 * inter + DICE_SMOOTH) / (sum_p + sum_y + DICE_SMOOTH);
    Ok((dice, bce / logits.len() as f64))
}

/// Dice loss plus pixel-wise binary cross-entropy.
pub fn dice_ce_loss(logits: &[f64], target: &[f64]) -> Result<f64> {
    let (dice, bce) = dice_ce_terms(logits, target)?;
    Ok(dice + bce)
}

pub fn dice_ce_loss_grid(logits: &[f64], target: &Grid) -> Result<f64> {
    dice_ce_loss(logits, target.data())
}

/// Loss and its gradient with respect to the logits.
pub fn dice_ce_loss_grad(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_pair(logits, target)?;
    let n = logits.len() as f64;
    let mut probs = Vec::with_capacity(logits.len());
    let (mut inter, mut sum_p, mut sum_y, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for (&z, &y) in logits.iter().zip(target) {
        let s = sigmoid(z);
        let p = s.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        inter += p * y;
        sum_p += p;
        sum_y += y;
        bce -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        probs.push((s, p));
    }
    let denom = sum_p + sum_y + DICE_SMOOTH;
    let numer = 2.0 * inter + DICE_SMOOTH;
    let loss = 1.0 - numer / denom + bce / n;
    let grad = probs
        .iter()
        .zip(target)
        .map(|(&(s, p), &y)| {
            if s != p {
                return 0.0;
            }
            let d_dice = -(2.0 * y * denom - numer) / (denom * denom);
            let d_bce = (-y / p + (1.0 - y) / (1.0 - p)) / n;
            (d_dice + d_bce) * s * (1.0 - s)
        })
        .collect();
    Ok((loss, grad))
}

/// Hard pseudo-mask `1(P >= delta)`.
pub fn pseudo_label(prob: &Grid, delta: f64) -> Grid {
    let data = prob
        .data()
        .iter()
        .map(|&p| if p >= delta { 1.0 } else { 0.0 })
        .collect();
    Grid::from_clamped(prob.height(), prob.width(), data, GridRole::BinaryMask)
}

fn check_embeddings(rows: &[Vec<f64>], what: &str, b: usize) -> Result<usize> {
    if rows.len() != b {
        return Err(Error::Shape(format!(
            "{what}: expected {b} rows, got {}",
            rows.len()
        )));
    }
    let d = rows.first().map_or(0, Vec::len);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::Shape(format!(
                "{what} row {i} has dim {} (expected {d})",
                r.len()
            )));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{what} row {i}")));
        }
    }
    Ok(d)
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Similarities `S_ij = v_i . u_j / tau`.
pub fn similarity_matrix(v: &[Vec<f64>], u: &[Vec<f64>], tau: f64) -> Result<Vec<Vec<f64>>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    let b = v.len();
    let dv = check_embeddings(v, "image embeddings", b)?;
    let du = check_embeddings(u, "text embeddings", b)?;
    if dv != du {
        return Err(Error::Shape(format!("embedding dims differ: {dv} vs {du}")));
    }
    Ok(v.iter()
        .map(|vi| {
            u.iter()
                .map(|uj| vi.iter().zip(uj).map(|(a, b)| a * b).sum::<f64>() / tau)
                .collect()
        })
        .collect())
}

/// Output of [`itcl_loss_grad`].
#[derive(Debug, Clone)]
pub struct ItclGrad {
    pub loss: f64,
    pub d_image: Vec<Vec<f64>>,
    pub d_text: Vec<Vec<f64>>,
}

/// Position-weighted bidirectional contrastive loss.
///
/// With row-normalized affinities `w_ij = A_ij / Σ_j A_ij`, the loss is
/// `-(1/2B) Σ_i [Σ_j w_ij log softmax_j(S_ij) + Σ_j w_ij log softmax_j(S_ji)]`.
pub fn itcl_loss(v: &[Vec<f64>], u: &[Vec<f64>], a: &AffinityMatrix, tau: f64) -> Result<f64> {
    Ok(itcl_loss_grad(v, u, a, tau)?.loss)
}

pub fn itcl_loss_grad(
    v: &[Vec<f64>],
    u: &[Vec<f64>],
    a: &AffinityMatrix,
    tau: f64,
) -> Result<ItclGrad> {
    let b = v.len();
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if a.size() != b {
        return Err(Error::Shape(format!(
            "affinity is {0}x{0}, batch is {b}",
            a.size()
        )));
    }
    let s = similarity_matrix(v, u, tau)?;
    let st: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| s[j][i]).collect()).collect();
    let weights: Vec<Vec<f64>> = (0..b)
        .map(|i| {
            let row = a.row(i);
            let total: f64 = row.iter().sum();
            row.iter().map(|x| x / total).collect()
        })
        .collect();

    let mut loss = 0.0;
    // d loss / d S
    let mut ds = vec![vec![0.0; b]; b];
    let scale = 1.0 / (2.0 * b as f64);
    for i in 0..b {
        let row_lsm = log_softmax(&s[i]);
        let col_lsm = log_softmax(&st[i]);
        for j in 0..b {
            let w = weights[i][j];
            loss -= scale * w * (row_lsm[j] + col_lsm[j]);
            // row term: w_ij - softmax_j(S_i.)
            ds[i][j] -= scale * (w - row_lsm[j].exp());
            // column term for text i touches S_ji
            ds[j][i] -= scale * (w - col_lsm[j].exp());
        }
    }
    let d = v[0].len();
    let mut d_image = vec![vec![0.0; d]; b];
    let mut d_text = vec![vec![0.0; d]; b];
    for i in 0..b {
        for j in 0..b {
            let g = ds[i][j] / tau;
            for k in 0..d {
                d_image[i][k] += g * u[j][k];
                d_text[j][k] += g * v[i][k];
            }
        }
    }
    Ok(ItclGrad {
        loss,
        d_image,
        d_text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_u: f64,
    pub lambda_itcl_sup: f64,
    pub lambda_itcl_unsup: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_u: 1.0,
            lambda_itcl_sup: 0.02,
            lambda_itcl_unsup: 0.1,
        }
    }
}

/// Unweighted loss parts of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub sup: f64,
    pub unsup: f64,
    pub itcl_sup: f64,
    pub itcl_unsup: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub unsup: f64,
    pub itcl_sup: f64,
    pub itcl_unsup: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// `sup + λ_u unsup + λ_itcl_sup itcl_sup + λ_itcl_unsup itcl_unsup`.
pub fn total_loss(parts: LossParts, weights: LossWeights) -> LossBreakdown {
    let total = parts.sup
        + weights.lambda_u * parts.unsup
        + weights.lambda_itcl_sup * parts.itcl_sup
        + weights.lambda_itcl_unsup * parts.itcl_unsup;
    LossBreakdown {
        sup: parts.sup,
        unsup: parts.unsup,
        itcl_sup: parts.itcl_sup,
        itcl_unsup: parts.itcl_unsup,
        total,
        weights,
    }
}

fn overlap_counts(pred: &Grid, gt: &Grid) -> Result<(usize, usize, usize)> {
    pred.ensure_same_shape(gt)?;
    let (mut inter, mut a, mut b) = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p > 0.0, g > 0.0);
        inter += usize::from(p && g);
        a += usize::from(p);
        b += usize::from(g);
    }
    Ok((inter, a, b))
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks score 1.
pub fn dice_metric(pred: &Grid, gt: &Grid) -> Result<f64> {
    let (inter, a, b) = overlap_counts(pred, gt)?;
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Per-sample IoU `|A ∩ B| / |A ∪ B|`; two empty masks score 1.
pub fn iou_metric(pred: &Grid, gt: &Grid) -> Result<f64> {
    let (inter, a, b) = overlap_counts(pred, gt)?;
    let union = a + b - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean of per-sample IoU over `(pred, gt)` pairs.
pub fn miou_metric<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a Grid, &'a Grid)>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pairs {
        sum += iou_metric(p, g)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("mIoU over zero samples".into()));
    }
    Ok(sum / n as f64)
}
