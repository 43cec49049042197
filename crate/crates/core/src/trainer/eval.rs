use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, Checkpoint, ModelConfig, ParamSet, Real, TokenSequence, Vocabulary};
use crate::objectives::{dice_metric, iou_metric};
use crate::synthdata::{Dataset, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<SampleScore>,
    pub mean_dice: f64,
    pub miou: f64,
}

impl EvalReport {
    /// One `{id, dice, iou}` line per sample, then `{mean_dice, miou}`.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("score serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({ "mean_dice": self.mean_dice, "miou": self.miou });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Scores `params` on the given samples: original captions, no
/// augmentation, prediction `sigmoid(logit) >= 0.5`. Two empty masks score
/// 1 for both metrics.
pub fn evaluate_params<T: Real>(
    params: &ParamSet<T>,
    model: &ModelConfig,
    data: &Dataset,
    indices: &[usize],
    tokens: impl Fn(usize) -> TokenSequence,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty split".into(),
        ));
    }
    let mut samples = Vec::with_capacity(indices.len());
    for &i in indices {
        let s = &data.samples[i];
        let out = forward(params, model, &s.image, &tokens(i))?;
        let pred = out.binary_mask();
        samples.push(SampleScore {
            id: s.id.clone(),
            dice: dice_metric(&pred, &s.mask)?,
            iou: iou_metric(&pred, &s.mask)?,
        });
    }
    let n = samples.len() as f64;
    let mean_dice = samples.iter().map(|s| s.dice).sum::<f64>() / n;
    let miou = samples.iter().map(|s| s.iou).sum::<f64>() / n;
    Ok(EvalReport {
        samples,
        mean_dice,
        miou,
    })
}

/// Evaluates the student of a checkpoint on a dataset split. The dataset's
/// training captions must rebuild the checkpoint's vocabulary.
pub fn evaluate(checkpoint: &Path, data: &Dataset, split: Split) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let vocab = Vocabulary::from_words(ckpt.header.vocabulary.clone())?;
    let expected = Vocabulary::from_corpus(data.train_texts());
    if expected != vocab {
        return Err(Error::Vocabulary(format!(
            "checkpoint has {} words, dataset yields {}",
            vocab.len(),
            expected.len()
        )));
    }
    let indices = data.split(split);
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "split {} is empty",
            split.name()
        )));
    }
    evaluate_params(&ckpt.student, &ckpt.header.model, data, indices, |i| {
        vocab.tokenize(&data.samples[i].text)
    })
}
