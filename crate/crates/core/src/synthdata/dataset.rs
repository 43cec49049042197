//! Dataset directories: `manifest.jsonl`, `images/<id>.pgm`, `masks/<id>.pgm`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::{generate_sample, mask_outside_label, Sample, SampleSpec};
use super::pgm;
use crate::error::{Error, Result};
use crate::postext::{parse_positions, PositionLabel};
use crate::rng::{stream, Stream};

pub const MANIFEST: &str = "manifest.jsonl";
/// Label ratios with a stored labeled subset.
pub const LABEL_RATIOS: [f64; 5] = [0.01, 0.02, 0.05, 0.15, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifestRecord {
    Sample {
        id: String,
        image_path: String,
        mask_path: String,
        text: String,
        q: [u8; 6],
        split: Split,
    },
    LabeledSubset {
        ratio: f64,
        ids: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn sample_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| matches!(r, ManifestRecord::Sample { .. }))
            .count()
    }

    /// Labeled ids per ratio, in manifest order.
    pub fn subsets(&self) -> Vec<(f64, &[String])> {
        self.records
            .iter()
            .filter_map(|r| match r {
                ManifestRecord::LabeledSubset { ratio, ids } => Some((*ratio, ids.as_slice())),
                _ => None,
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })?);
            out.push('\n');
        }
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })?);
        }
        Ok(Self { records })
    }
}

/// Sample id for position `index` of `split`.
pub fn sample_id(split: Split, index: usize) -> String {
    format!("{}-{index:04}", split.name())
}

/// Nested labeled subsets: a prefix of one seeded permutation per ratio,
/// never smaller than one sample.
pub fn labeled_subsets(seed: u64, train_ids: &[String]) -> Vec<(f64, Vec<String>)> {
    let mut order = train_ids.to_vec();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut stream(seed, Stream::Subset, &[]));
    LABEL_RATIOS
        .iter()
        .map(|&r| {
            let k = ((r * train_ids.len() as f64).round() as usize).max(1);
            (r, order[..k.min(order.len())].to_vec())
        })
        .collect()
}

/// Generates the three splits into `out_dir`. Sample `i` of a split draws
/// from a stream keyed by `(seed, split, i)`, so the result does not depend
/// on generation order.
pub fn generate_dataset(
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    out_dir: &Path,
    spec: &SampleSpec,
) -> Result<DatasetManifest> {
    if n_train == 0 {
        return Err(Error::InvalidArgument("n_train must be positive".into()));
    }
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut records = Vec::new();
    let mut train_ids = Vec::new();
    for (split, n) in [
        (Split::Train, n_train),
        (Split::Val, n_val),
        (Split::Test, n_test),
    ] {
        for i in 0..n {
            let id = sample_id(split, i);
            let mut rng = stream(seed, Stream::Sample, &[split as u64, i as u64]);
            let s = generate_sample(&mut rng, &id, spec);
            let image_path = format!("images/{id}.pgm");
            let mask_path = format!("masks/{id}.pgm");
            pgm::write(&out_dir.join(&image_path), &s.image)?;
            pgm::write(&out_dir.join(&mask_path), &s.mask)?;
            if split == Split::Train {
                train_ids.push(id.clone());
            }
            records.push(ManifestRecord::Sample {
                id,
                image_path,
                mask_path,
                text: s.text,
                q: s.q.bits(),
                split,
            });
        }
    }
    for (ratio, ids) in labeled_subsets(seed, &train_ids) {
        records.push(ManifestRecord::LabeledSubset { ratio, ids });
    }
    let manifest = DatasetManifest { records };
    manifest.write(&out_dir.join(MANIFEST))?;
    Ok(manifest)
}

/// A loaded dataset with validated samples.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<Sample>,
    splits: BTreeMap<Split, Vec<usize>>,
    subsets: Vec<(f64, Vec<usize>)>,
}

impl Dataset {
    /// Indices into `samples` for `split`, in manifest order.
    pub fn split(&self, split: Split) -> &[usize] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Labeled train indices for `ratio`.
    pub fn labeled(&self, ratio: f64) -> Result<&[usize]> {
        self.subsets
            .iter()
            .find(|(r, _)| (r - ratio).abs() < 1e-9)
            .map(|(_, ids)| ids.as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("no labeled subset for ratio {ratio}")))
    }

    /// Train indices outside the labeled subset for `ratio`.
    pub fn unlabeled(&self, ratio: f64) -> Result<Vec<usize>> {
        let labeled = self.labeled(ratio)?;
        Ok(self
            .split(Split::Train)
            .iter()
            .copied()
            .filter(|i| !labeled.contains(i))
            .collect())
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.subsets.iter().map(|(r, _)| *r).collect()
    }

    /// Caption texts of the training split.
    pub fn train_texts(&self) -> impl Iterator<Item = &str> {
        self.split(Split::Train)
            .iter()
            .map(|&i| self.samples[i].text.as_str())
    }
}

/// Reads `dir/manifest.jsonl` and every referenced graymap, checking that
/// each caption parses to its stored label and each mask pixel lies in a
/// labeled cell.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = DatasetManifest::read(&dir.join(MANIFEST))?;
    let mut samples = Vec::new();
    let mut splits: BTreeMap<Split, Vec<usize>> = BTreeMap::new();
    let mut index = BTreeMap::new();
    let mut subsets = Vec::new();
    for record in manifest.records {
        match record {
            ManifestRecord::Sample {
                id,
                image_path,
                mask_path,
                text,
                q,
                split,
            } => {
                let violation = |reason: String| Error::InvariantViolation {
                    id: id.clone(),
                    reason,
                };
                let q = PositionLabel::from_bits(&q).map_err(|e| violation(e.to_string()))?;
                let image = pgm::read_image(&dir.join(&image_path))?;
                let mask = pgm::read_mask(&dir.join(&mask_path))?;
                if !image.same_shape(&mask) {
                    return Err(violation("image and mask sizes differ".into()));
                }
                let parsed = parse_positions(&text).label;
                if parsed != q {
                    return Err(violation(format!(
                        "caption {text:?} parses to {parsed:?}, manifest says {q:?}"
                    )));
                }
                if let Some((y, x)) = mask_outside_label(&mask, q) {
                    return Err(violation(format!(
                        "mask pixel ({y}, {x}) outside labeled cells"
                    )));
                }
                if index.insert(id.clone(), samples.len()).is_some() {
                    return Err(violation("duplicate id".into()));
                }
                splits.entry(split).or_default().push(samples.len());
                samples.push(Sample {
                    id,
                    image,
                    mask,
                    text,
                    q,
                });
            }
            ManifestRecord::LabeledSubset { ratio, ids } => subsets.push((ratio, ids)),
        }
    }
    let train: Vec<usize> = splits.get(&Split::Train).cloned().unwrap_or_default();
    let mut resolved = Vec::new();
    for (ratio, ids) in subsets {
        let mut idx = Vec::with_capacity(ids.len());
        for id in ids {
            let i = *index.get(&id).ok_or_else(|| Error::InvariantViolation {
                id: id.clone(),
                reason: format!("labeled subset {ratio} names an unknown sample"),
            })?;
            if !train.contains(&i) {
                return Err(Error::InvariantViolation {
                    id,
                    reason: "labeled sample outside the train split".into(),
                });
            }
            idx.push(i);
        }
        resolved.push((ratio, idx));
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        samples,
        splits,
        subsets: resolved,
    })
}
