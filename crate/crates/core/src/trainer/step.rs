//! Single optimization steps for both phases.

use rand::Rng;

use super::config::TrainConfig;
use super::optim::{optimizer_step, AdamState};
use crate::augment::{
    apply_photometric, sample_photometric, tpatchmix, weak_augment, AugmentConfig, MixConfig,
    MixPair, DEFAULT_GATE_EPS,
};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{
    backward, ema_update, forward, forward_with_cache, ModelConfig, OutputGrads, ParamSet,
    TokenSequence, Vocabulary,
};
use crate::objectives::{
    dice_ce_loss_grad, itcl_loss_grad, pseudo_label, total_loss, LossBreakdown, LossParts,
    LossWeights,
};
use crate::postext::{
    affinity_matrix, parse_positions, posaug, PositionLabel, ReferringExpression,
};
use crate::rng::{stream, Stream};
use crate::synthdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Burnin,
    Ssl,
}

/// Student, teacher and optimizer state. The teacher has no optimizer
/// moments and only changes through [`ema_update`].
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: ParamSet<f32>,
    pub teacher: Option<ParamSet<f32>>,
    pub adam: AdamState<f32>,
    pub step: u64,
    pub phase: Phase,
}

impl TrainState {
    pub fn new(student: ParamSet<f32>) -> Self {
        Self {
            adam: AdamState::new(&student),
            student,
            teacher: None,
            step: 0,
            phase: Phase::Burnin,
        }
    }

    /// Ends burn-in: the teacher becomes an exact copy of the student.
    pub fn start_ssl(&mut self) -> Result<()> {
        if self.phase != Phase::Burnin {
            return Err(Error::Phase("semi-supervised phase already started".into()));
        }
        self.teacher = Some(self.student.clone());
        self.phase = Phase::Ssl;
        Ok(())
    }
}

/// Everything a step reads but never writes.
pub struct TrainContext<'a> {
    pub config: &'a TrainConfig,
    pub model: ModelConfig,
    pub vocab: Vocabulary,
    pub data: &'a Dataset,
    pub augment: AugmentConfig,
    /// Parsed original caption of every sample.
    pub exprs: Vec<ReferringExpression>,
    /// Tokens of every original caption.
    pub tokens: Vec<TokenSequence>,
}

impl<'a> TrainContext<'a> {
    pub fn new(config: &'a TrainConfig, data: &'a Dataset, vocab: Vocabulary) -> Result<Self> {
        let size = data
            .samples
            .first()
            .map(|s| s.image.height())
            .ok_or_else(|| Error::InvalidArgument("dataset has no samples".into()))?;
        let model = ModelConfig::new(vocab.len()).with_image_size(size);
        model.validate()?;
        let exprs = data
            .samples
            .iter()
            .map(|s| ReferringExpression::parse(&s.text))
            .collect();
        let tokens = data
            .samples
            .iter()
            .map(|s| vocab.tokenize(&s.text))
            .collect();
        Ok(Self {
            config,
            model,
            vocab,
            data,
            augment: AugmentConfig::default(),
            exprs,
            tokens,
        })
    }

    fn mix_config(&self) -> MixConfig {
        MixConfig {
            block_size: self.config.block_size,
            delta_gate: self.config.delta_gate,
            eps: DEFAULT_GATE_EPS,
            ..MixConfig::default()
        }
    }
}

/// Loss parts and bookkeeping of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    /// Unlabeled samples whose student view came from T-PatchMix.
    pub n_mixed: usize,
}

const LABELED: u64 = 0;
const UNLABELED: u64 = 1;

fn key(
    ctx: &TrainContext<'_>,
    tag: Stream,
    step: u64,
    branch: u64,
    slot: usize,
) -> rand_chacha::ChaCha8Rng {
    stream(ctx.config.seed, tag, &[step, branch, slot as u64])
}

/// Weak geometry plus photometric jitter for a labeled sample; returns the
/// strong image and the geometrically matched mask.
fn labeled_view(
    ctx: &TrainContext<'_>,
    idx: usize,
    step: u64,
    slot: usize,
) -> Result<(Grid, Grid)> {
    let s = &ctx.data.samples[idx];
    let mut rng = key(ctx, Stream::WeakAug, step, LABELED, slot);
    let (weak, mask, _) = weak_augment(&s.image, Some(&s.mask), ctx.augment.zoom_range, &mut rng)?;
    let mut rng = key(ctx, Stream::Photometric, step, LABELED, slot);
    let params = sample_photometric(ctx.augment.jitter, ctx.augment.blur_sigma_range, &mut rng);
    Ok((
        apply_photometric(&weak, &params),
        mask.expect("mask requested"),
    ))
}

/// Segmentation forward/backward for one sample. Gradients are scaled by
/// `scale`; with `scale == 0` only the loss is computed.
fn segment(
    params: &ParamSet<f32>,
    ctx: &TrainContext<'_>,
    image: &Grid,
    tokens: &TokenSequence,
    target: &Grid,
    scale: f64,
    grads: &mut ParamSet<f32>,
) -> Result<f64> {
    if scale == 0.0 {
        let out = forward(params, &ctx.model, image, tokens)?;
        return crate::objectives::dice_ce_loss(&out.logits_f64(), target.data());
    }
    let (out, cache) = forward_with_cache(params, &ctx.model, image, tokens, true)?;
    let (loss, dl) = dice_ce_loss_grad(&out.logits_f64(), target.data())?;
    let dl: Vec<f32> = dl.iter().map(|g| (g * scale) as f32).collect();
    let seeds = OutputGrads {
        logits: Some(&dl),
        ..OutputGrads::default()
    };
    backward(params, &ctx.model, &cache, seeds, grads)?;
    Ok(loss)
}

/// Contrastive loss over one branch; gradients scaled by `weight`.
fn contrast(
    params: &ParamSet<f32>,
    ctx: &TrainContext<'_>,
    images: &[Grid],
    tokens: &[&TokenSequence],
    labels: &[PositionLabel],
    weight: f64,
    grads: &mut ParamSet<f32>,
) -> Result<f64> {
    if images.len() < 2 {
        // a single pair has nothing to contrast against
        return Ok(0.0);
    }
    let mut caches = Vec::with_capacity(images.len());
    let mut v = Vec::with_capacity(images.len());
    let mut u = Vec::with_capacity(images.len());
    for (img, tok) in images.iter().zip(tokens) {
        let (out, cache) = forward_with_cache(params, &ctx.model, img, tok, false)?;
        v.push(
            out.image_embedding
                .iter()
                .map(|&x| x as f64)
                .collect::<Vec<_>>(),
        );
        u.push(
            out.text_embedding
                .iter()
                .map(|&x| x as f64)
                .collect::<Vec<_>>(),
        );
        caches.push(cache);
    }
    let g = itcl_loss_grad(&v, &u, &affinity_matrix(labels), ctx.config.tau)?;
    if weight != 0.0 {
        for (i, cache) in caches.iter().enumerate() {
            let dv: Vec<f32> = g.d_image[i].iter().map(|x| (x * weight) as f32).collect();
            let du: Vec<f32> = g.d_text[i].iter().map(|x| (x * weight) as f32).collect();
            let seeds = OutputGrads {
                logits: None,
                image_embedding: Some(&dv),
                text_embedding: Some(&du),
            };
            backward(params, &ctx.model, cache, seeds, grads)?;
        }
    }
    Ok(g.loss)
}

fn check_finite(losses: &LossBreakdown, ids: &[&str]) -> Result<()> {
    if losses.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "loss {:?} on samples {}",
            losses,
            ids.join(", ")
        )))
    }
}

fn apply_update(
    state: &mut TrainState,
    grads: &ParamSet<f32>,
    lr: f64,
    config: &TrainConfig,
    ids: &[&str],
) -> Result<()> {
    optimizer_step(
        &mut state.student,
        &mut state.adam,
        grads,
        lr,
        config.weight_decay,
    )
    .map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} on samples {}", ids.join(", "))),
        other => other,
    })
}

/// Supervised step on labeled samples only.
pub fn burnin_step(
    state: &mut TrainState,
    ctx: &TrainContext<'_>,
    labeled: &[usize],
    lr: f64,
) -> Result<StepReport> {
    if state.phase != Phase::Burnin {
        return Err(Error::Phase("burn-in step after burn-in ended".into()));
    }
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("empty labeled batch".into()));
    }
    let mut grads = state.student.zeros_like();
    let scale = 1.0 / labeled.len() as f64;
    let mut sup = 0.0;
    for (slot, &idx) in labeled.iter().enumerate() {
        let (img, mask) = labeled_view(ctx, idx, state.step, slot)?;
        sup += scale
            * segment(
                &state.student,
                ctx,
                &img,
                &ctx.tokens[idx],
                &mask,
                scale,
                &mut grads,
            )?;
    }
    let weights = LossWeights {
        lambda_u: 0.0,
        lambda_itcl_sup: 0.0,
        lambda_itcl_unsup: 0.0,
    };
    let losses = total_loss(
        LossParts {
            sup,
            ..LossParts::default()
        },
        weights,
    );
    let ids: Vec<&str> = labeled
        .iter()
        .map(|&i| ctx.data.samples[i].id.as_str())
        .collect();
    check_finite(&losses, &ids)?;
    apply_update(state, &grads, lr, ctx.config, &ids)?;
    state.step += 1;
    Ok(StepReport { losses, n_mixed: 0 })
}

/// Student view of one unlabeled sample.
struct UnlabeledView {
    /// Weak view with the photometric draw applied and no mixing.
    plain: Grid,
    /// What the student segments (mixed or plain).
    student: Grid,
    target: Grid,
    text: String,
    mixed: bool,
}

/// One teacher-student step. The teacher sees weak views with original
/// captions; the student sees strong (optionally mixed) views with
/// optionally perturbed captions.
pub fn ssl_step(
    state: &mut TrainState,
    ctx: &TrainContext<'_>,
    labeled: &[usize],
    unlabeled: &[usize],
    lr: f64,
) -> Result<StepReport> {
    if state.phase != Phase::Ssl {
        return Err(Error::Phase(
            "semi-supervised step before burn-in completed".into(),
        ));
    }
    if labeled.is_empty() {
        return Err(Error::InvalidArgument("empty labeled batch".into()));
    }
    let cfg = ctx.config;
    let step = state.step;
    let teacher_on = cfg.use_ema_ssl;
    let weights = LossWeights {
        lambda_u: if teacher_on { cfg.lambda_u } else { 0.0 },
        lambda_itcl_sup: if cfg.use_itcl {
            cfg.lambda_itcl_sup
        } else {
            0.0
        },
        lambda_itcl_unsup: if cfg.use_itcl {
            cfg.lambda_itcl_unsup
        } else {
            0.0
        },
    };
    let mut grads = state.student.zeros_like();
    let mut parts = LossParts::default();

    // labeled branch
    let bl = labeled.len() as f64;
    let mut labeled_views = Vec::with_capacity(labeled.len());
    for (slot, &idx) in labeled.iter().enumerate() {
        let (img, mask) = labeled_view(ctx, idx, step, slot)?;
        let text = if cfg.use_posaug {
            let mut rng = key(ctx, Stream::PosAug, step, LABELED, slot);
            posaug(&ctx.exprs[idx], cfg.rho, &mut rng).text
        } else {
            ctx.data.samples[idx].text.clone()
        };
        let tokens = ctx.vocab.tokenize(&text);
        parts.sup += segment(
            &state.student,
            ctx,
            &img,
            &tokens,
            &mask,
            1.0 / bl,
            &mut grads,
        )? / bl;
        labeled_views.push(img);
    }

    // unlabeled branch
    let mut n_mixed = 0;
    let mut unlabeled_views = Vec::new();
    if teacher_on && !unlabeled.is_empty() {
        let teacher = state
            .teacher
            .as_ref()
            .ok_or_else(|| Error::Phase("teacher missing in semi-supervised phase".into()))?;
        let mut weak = Vec::with_capacity(unlabeled.len());
        let mut probs = Vec::with_capacity(unlabeled.len());
        for (slot, &idx) in unlabeled.iter().enumerate() {
            let mut rng = key(ctx, Stream::WeakAug, step, UNLABELED, slot);
            let (w, _, _) = weak_augment(
                &ctx.data.samples[idx].image,
                None,
                ctx.augment.zoom_range,
                &mut rng,
            )?;
            let p = forward(teacher, &ctx.model, &w, &ctx.tokens[idx])?.probabilities();
            weak.push(w);
            probs.push(p);
        }
        let bu = unlabeled.len();
        let offset = if cfg.use_tpatchmix && bu > 1 {
            Some(stream(cfg.seed, Stream::MixPartner, &[step]).gen_range(1..bu))
        } else {
            None
        };
        for (slot, &idx) in unlabeled.iter().enumerate() {
            let mut rng = key(ctx, Stream::Photometric, step, UNLABELED, slot);
            let photo =
                sample_photometric(ctx.augment.jitter, ctx.augment.blur_sigma_range, &mut rng);
            let plain = apply_photometric(&weak[slot], &photo);
            let mut view = UnlabeledView {
                student: plain.clone(),
                plain,
                target: pseudo_label(&probs[slot], cfg.delta_pl),
                text: ctx.data.samples[idx].text.clone(),
                mixed: false,
            };
            if let Some(k) = offset {
                let j = (slot + k) % bu;
                let receiver = MixPair {
                    image: &weak[slot],
                    expr: &ctx.exprs[idx],
                    prob: &probs[slot],
                };
                let donor = MixPair {
                    image: &weak[j],
                    expr: &ctx.exprs[unlabeled[j]],
                    prob: &probs[j],
                };
                let mut rng = key(ctx, Stream::Mix, step, UNLABELED, slot);
                let out = tpatchmix(receiver, donor, &ctx.mix_config(), &mut rng)?;
                if out.applied {
                    view.student = apply_photometric(&out.mixed_image, &photo);
                    view.target = out.mixed_pseudo_mask;
                    view.text = out.mixed_text.text;
                    view.mixed = true;
                    n_mixed += 1;
                }
            }
            if cfg.use_posaug {
                let mut rng = key(ctx, Stream::PosAug, step, UNLABELED, slot);
                view.text = posaug(&parse_positions(&view.text), cfg.rho, &mut rng).text;
            }
            unlabeled_views.push(view);
        }
        let scale = weights.lambda_u / bu as f64;
        for view in &unlabeled_views {
            let tokens = ctx.vocab.tokenize(&view.text);
            parts.unsup += segment(
                &state.student,
                ctx,
                &view.student,
                &tokens,
                &view.target,
                scale,
                &mut grads,
            )? / bu as f64;
        }
    }

    if cfg.use_itcl {
        let tokens: Vec<&TokenSequence> = labeled.iter().map(|&i| &ctx.tokens[i]).collect();
        let labels: Vec<PositionLabel> = labeled.iter().map(|&i| ctx.exprs[i].label).collect();
        parts.itcl_sup = contrast(
            &state.student,
            ctx,
            &labeled_views,
            &tokens,
            &labels,
            weights.lambda_itcl_sup,
            &mut grads,
        )?;
        if !unlabeled.is_empty() {
            let images: Vec<Grid> = if unlabeled_views.is_empty() {
                // no teacher branch ran, build plain strong views here
                unlabeled
                    .iter()
                    .enumerate()
                    .map(|(slot, &idx)| {
                        let mut rng = key(ctx, Stream::WeakAug, step, UNLABELED, slot);
                        let (w, _, _) = weak_augment(
                            &ctx.data.samples[idx].image,
                            None,
                            ctx.augment.zoom_range,
                            &mut rng,
                        )?;
                        let mut rng = key(ctx, Stream::Photometric, step, UNLABELED, slot);
                        let photo = sample_photometric(
                            ctx.augment.jitter,
                            ctx.augment.blur_sigma_range,
                            &mut rng,
                        );
                        Ok(apply_photometric(&w, &photo))
                    })
                    .collect::<Result<_>>()?
            } else {
                unlabeled_views.iter().map(|v| v.plain.clone()).collect()
            };
            let tokens: Vec<&TokenSequence> = unlabeled.iter().map(|&i| &ctx.tokens[i]).collect();
            let labels: Vec<PositionLabel> =
                unlabeled.iter().map(|&i| ctx.exprs[i].label).collect();
            parts.itcl_unsup = contrast(
                &state.student,
                ctx,
                &images,
                &tokens,
                &labels,
                weights.lambda_itcl_unsup,
                &mut grads,
            )?;
        }
    }

    let losses = total_loss(parts, weights);
    let ids: Vec<&str> = labeled
        .iter()
        .chain(unlabeled)
        .map(|&i| ctx.data.samples[i].id.as_str())
        .collect();
    check_finite(&losses, &ids)?;
    apply_update(state, &grads, lr, cfg, &ids)?;
    if teacher_on {
        let teacher = state.teacher.as_mut().expect("checked above");
        ema_update(teacher, &state.student, cfg.m)?;
    }
    state.step += 1;
    Ok(StepReport { losses, n_mixed })
}
