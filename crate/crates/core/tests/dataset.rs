use std::fs;
use std::path::Path;

use lungref::synthdata::{
    generate_dataset, load_dataset, DatasetManifest, ManifestRecord, SampleSpec, Split,
    LABEL_RATIOS, MANIFEST,
};
use lungref::{parse_positions, Error};

fn small_spec() -> SampleSpec {
    SampleSpec {
        radius: (3.0, 8.0),
        size: 64,
        ..SampleSpec::default()
    }
}

fn generate(dir: &Path, seed: u64) -> DatasetManifest {
    generate_dataset(seed, 20, 4, 4, dir, &small_spec()).unwrap()
}

#[test]
fn generated_dataset_loads_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), 1);
    let data = load_dataset(tmp.path()).unwrap();
    assert_eq!(data.split(Split::Train).len(), 20);
    assert_eq!(data.split(Split::Val).len(), 4);
    assert_eq!(data.split(Split::Test).len(), 4);
    for s in &data.samples {
        assert_eq!(s.image.height(), 64);
        assert_eq!(parse_positions(&s.text).label, s.q);
        assert!(s.mask.count_positive() > 0 || s.q.is_empty());
    }
}

#[test]
fn labeled_subsets_are_nested_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), 2);
    let data = load_dataset(tmp.path()).unwrap();
    assert_eq!(data.ratios(), LABEL_RATIOS.to_vec());
    let mut prev: Vec<usize> = Vec::new();
    for ratio in LABEL_RATIOS {
        let cur = data.labeled(ratio).unwrap();
        assert!(!cur.is_empty());
        assert!(
            prev.iter().all(|i| cur.contains(i)),
            "subset for {ratio} does not contain the smaller one"
        );
        let unl = data.unlabeled(ratio).unwrap();
        assert_eq!(cur.len() + unl.len(), 20);
        prev = cur.to_vec();
    }
    assert!(data.labeled(0.3).is_err());
}

#[test]
fn generation_is_deterministic_per_seed() {
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    assert_eq!(generate(a.path(), 5), generate(b.path(), 5));
    assert_ne!(generate(a.path(), 5), generate(c.path(), 6));
    let image = |d: &Path| fs::read(d.join("images/train-0003.pgm")).unwrap();
    assert_eq!(image(a.path()), image(b.path()));
}

#[test]
fn corrupted_graymap_is_reported_with_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), 3);
    let victim = tmp.path().join("images/val-0001.pgm");
    let mut bytes = fs::read(&victim).unwrap();
    bytes[1] = b'2';
    fs::write(&victim, bytes).unwrap();
    match load_dataset(tmp.path()) {
        Err(Error::Graymap { path, .. }) => assert_eq!(path, victim),
        other => panic!("expected a graymap error, got {other:?}"),
    }
}

#[test]
fn caption_contradicting_mask_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), 4);
    let path = tmp.path().join(MANIFEST);
    let mut manifest = DatasetManifest::read(&path).unwrap();
    let mut target = None;
    for r in &mut manifest.records {
        if let ManifestRecord::Sample { id, text, q, .. } = r {
            if q.contains(&1) && target.is_none() {
                // claim a cell the sample does not occupy
                let flipped: Vec<u8> = q.iter().map(|b| 1 - b).collect();
                let cells: Vec<&str> = [
                    "upper left",
                    "upper right",
                    "middle left",
                    "middle right",
                    "lower left",
                    "lower right",
                ]
                .iter()
                .zip(&flipped)
                .filter(|(_, &b)| b == 1)
                .map(|(n, _)| *n)
                .take(1)
                .collect();
                *text = format!("mild infection, {} lung", cells[0]);
                *q = parse_positions(text).label.bits();
                target = Some(id.clone());
            }
        }
    }
    manifest.write(&path).unwrap();
    match load_dataset(tmp.path()) {
        Err(Error::InvariantViolation { id, .. }) => assert_eq!(Some(id), target),
        other => panic!("expected an invariant violation, got {other:?}"),
    }
}

#[test]
fn caption_and_label_disagreement_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), 5);
    let path = tmp.path().join(MANIFEST);
    let mut manifest = DatasetManifest::read(&path).unwrap();
    if let Some(ManifestRecord::Sample { q, .. }) = manifest.records.first_mut() {
        *q = [1, 1, 1, 1, 1, 1];
    }
    manifest.write(&path).unwrap();
    assert!(matches!(
        load_dataset(tmp.path()),
        Err(Error::InvariantViolation { .. })
    ));
}

#[test]
fn empty_training_split_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(generate_dataset(0, 0, 4, 4, tmp.path(), &small_spec()).is_err());
}
