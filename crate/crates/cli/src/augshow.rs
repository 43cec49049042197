//! Writes augmented and mixed views of training pairs for visual checks.
//! The ground-truth masks stand in for teacher probabilities, so the
//! lesion gate sees exact lesions.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use lungref::augment::{
    apply_photometric, sample_photometric, tpatchmix, weak_augment, AugmentConfig, MixConfig,
    MixPair, DEFAULT_GATE_EPS,
};
use lungref::postext::{parse_positions, posaug};
use lungref::rng::{stream, Stream};
use lungref::synthdata::{pgm, Dataset, Split};
use lungref::trainer::TrainConfig;
use lungref::{Grid, GridRole};
use rand::seq::SliceRandom;

pub struct AugshowSummary {
    pub written: usize,
    pub applied: usize,
}

pub fn run(
    data: &Dataset,
    config: &TrainConfig,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<AugshowSummary> {
    let pool = data.split(Split::Train);
    anyhow::ensure!(
        pool.len() >= 2,
        "augshow needs at least two training samples"
    );
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut order = pool.to_vec();
    order.shuffle(&mut stream(seed, Stream::Augshow, &[0]));
    let aug = AugmentConfig::default();
    let mix = MixConfig {
        block_size: config.block_size,
        delta_gate: config.delta_gate,
        eps: DEFAULT_GATE_EPS,
        ..MixConfig::default()
    };
    let mut applied = 0;
    for k in 0..n {
        let (ri, di) = (order[k % order.len()], order[(k + 1) % order.len()]);
        let (r, d) = (&data.samples[ri], &data.samples[di]);
        let key = |part: u64| stream(seed, Stream::Augshow, &[1 + k as u64, part]);
        let (rw, rm, _) = weak_augment(&r.image, Some(&r.mask), aug.zoom_range, &mut key(0))?;
        let (dw, dm, _) = weak_augment(&d.image, Some(&d.mask), aug.zoom_range, &mut key(1))?;
        let as_prob = |m: Option<Grid>| {
            let m = m.expect("mask requested");
            Grid::from_clamped(m.height(), m.width(), m.into_data(), GridRole::Probability)
        };
        let (rp, dp) = (as_prob(rm), as_prob(dm));
        let (re, de) = (parse_positions(&r.text), parse_positions(&d.text));
        let outcome = tpatchmix(
            MixPair {
                image: &rw,
                expr: &re,
                prob: &rp,
            },
            MixPair {
                image: &dw,
                expr: &de,
                prob: &dp,
            },
            &mix,
            &mut key(2),
        )?;
        let photo = sample_photometric(aug.jitter, aug.blur_sigma_range, &mut key(3));
        let strong = apply_photometric(&outcome.mixed_image, &photo);
        let perturbed = if config.use_posaug {
            posaug(&outcome.mixed_text, config.rho, &mut key(4)).text
        } else {
            outcome.mixed_text.text.clone()
        };
        applied += usize::from(outcome.applied);

        let stem = format!("{k:03}");
        let files = [
            ("weak", &rw),
            ("strong", &strong),
            ("mixed", &outcome.mixed_image),
            ("pseudo", &outcome.mixed_pseudo_mask),
        ];
        for (name, grid) in files {
            let path = out.join(format!("{stem}_{name}.pgm"));
            pgm::write(&path, grid)?;
        }
        let mut side = String::new();
        writeln!(side, "receiver: {}", r.id)?;
        writeln!(side, "donor: {}", d.id)?;
        writeln!(side, "original: {}", r.text)?;
        writeln!(side, "span_mixed: {}", outcome.mixed_text.text)?;
        writeln!(side, "posaug: {perturbed}")?;
        writeln!(side, "applied: {}", outcome.applied)?;
        writeln!(side, "mode: {:?}", outcome.mode)?;
        writeln!(side, "gate_ratio: {}", outcome.gate_ratio)?;
        let path = out.join(format!("{stem}_caption.txt"));
        std::fs::write(&path, side).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(AugshowSummary {
        written: n,
        applied,
    })
}
