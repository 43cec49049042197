use std::path::Path;

use lungref::model::{init_params, Checkpoint, ModelConfig, Vocabulary};
use lungref::synthdata::{generate_dataset, load_dataset, Dataset, SampleSpec, Split};
use lungref::trainer::{
    burnin, burnin_step, evaluate, read_log, ssl_step, train, train_with, LogRecord, Phase,
    TrainConfig, TrainContext, TrainOptions, TrainState,
};
use lungref::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(dir: &Path, seed: u64, n_train: usize, n_eval: usize) -> Dataset {
    let spec = SampleSpec {
        radius: (3.0, 8.0),
        size: 64,
        ..SampleSpec::default()
    };
    generate_dataset(seed, n_train, n_eval, n_eval, dir, &spec).unwrap();
    load_dataset(dir).unwrap()
}

fn config(seed: u64, epochs_total: usize, burnin_fraction: f64, label_ratio: f64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs_total,
        burnin_fraction,
        batch_size: 4,
        label_ratio,
        ..TrainConfig::default()
    }
}

fn sup_losses(log: &[LogRecord]) -> Vec<(usize, f64)> {
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Step { epoch, sup, .. } => Some((*epoch, *sup)),
            _ => None,
        })
        .collect()
}

#[test]
fn burnin_reduces_supervised_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), 0, 20, 4);
    let cfg = TrainConfig {
        lr_max: 3e-3,
        ..config(0, 40, 1.0, 1.0)
    };
    let (state, outcome) = burnin(
        &cfg,
        &data,
        &tmp.path().join("run"),
        &TrainOptions::default(),
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(state.phase, Phase::Ssl);
    assert_eq!(state.teacher.as_ref(), Some(&state.student));
    let losses = sup_losses(&read_log(&outcome.metrics_log).unwrap());
    let mean = |e: usize| {
        let v: Vec<f64> = losses
            .iter()
            .filter(|(k, _)| *k == e)
            .map(|(_, l)| *l)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(
        mean(40) < mean(1),
        "epoch 40 loss {} not below epoch 1 loss {}",
        mean(40),
        mean(1)
    );
}

#[test]
fn zero_burnin_copies_the_initial_student() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), 1, 8, 2);
    let cfg = config(3, 2, 0.0, 1.0);
    let (state, outcome) = burnin(
        &cfg,
        &data,
        &tmp.path().join("run"),
        &TrainOptions::default(),
        &mut |_| {},
    )
    .unwrap();
    assert_eq!(outcome.steps, 0);
    let vocab = Vocabulary::from_corpus(data.train_texts());
    let model = ModelConfig::new(vocab.len()).with_image_size(64);
    let ctx = TrainContext::new(&cfg, &data, vocab).unwrap();
    assert_eq!(ctx.model, model);
    assert_eq!(state.teacher.as_ref(), Some(&state.student));
}

#[test]
fn memorizes_a_small_training_split() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), 2, 10, 2);
    let cfg = TrainConfig {
        lr_max: 3e-3,
        ..config(0, 200, 1.0, 1.0)
    };
    let out = train(&cfg, &data, &tmp.path().join("run")).unwrap();
    let report = evaluate(&out.final_checkpoint, &data, Split::Train).unwrap();
    assert!(report.mean_dice > 0.9, "train dice {}", report.mean_dice);
}

#[test]
fn ssl_step_requires_finished_burnin() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), 3, 8, 2);
    let cfg = config(0, 2, 0.5, 0.15);
    let vocab = Vocabulary::from_corpus(data.train_texts());
    let ctx = TrainContext::new(&cfg, &data, vocab).unwrap();
    let student = init_params(&mut ChaCha8Rng::seed_from_u64(0), &ctx.model).unwrap();
    let mut state = TrainState::new(student);
    let labeled = data.labeled(0.15).unwrap().to_vec();
    let unlabeled = data.unlabeled(0.15).unwrap();
    assert!(matches!(
        ssl_step(&mut state, &ctx, &labeled, &unlabeled[..2], 1e-3),
        Err(Error::Phase(_))
    ));
    assert!(state.teacher.is_none());
    burnin_step(&mut state, &ctx, &labeled, 1e-3).unwrap();
    state.start_ssl().unwrap();
    assert!(matches!(state.start_ssl(), Err(Error::Phase(_))));
    assert!(matches!(
        burnin_step(&mut state, &ctx, &labeled, 1e-3),
        Err(Error::Phase(_))
    ));
    ssl_step(&mut state, &ctx, &labeled, &unlabeled[..2], 1e-3).unwrap();
}

#[test]
fn teacher_changes_only_through_ema() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), 4, 8, 2);
    let mut cfg = config(0, 2, 0.5, 0.15);
    let vocab = Vocabulary::from_corpus(data.train_texts());
    let labeled = data.labeled(0.15).unwrap().to_vec();
    let unlabeled = data.unlabeled(0.15).unwrap();

    let step_with = |cfg: &TrainConfig| {
        let ctx = TrainContext::new(cfg, &data, vocab.clone()).unwrap();
        let student = init_params(&mut ChaCha8Rng::seed_from_u64(0), &ctx.model).unwrap();
        let mut state = TrainState::new(student);
        state.start_ssl().unwrap();
        let before = state.clone();
        ssl_step(&mut state, &ctx, &labeled, &unlabeled[..4], 1e-3).unwrap();
        (before, state)
    };

    // m = 1 freezes the teacher entirely, while the student moves
    cfg.m = 1.0;
    let (before, after) = step_with(&cfg);
    assert_eq!(before.teacher, after.teacher);
    assert_ne!(before.student, after.student);
    // optimizer moments cover the student's tensors only
    assert_eq!(after.adam.first.len(), after.student.len());

    // m = 0 makes the teacher an exact copy of the updated student
    cfg.m = 0.0;
    let (_, after) = step_with(&cfg);
    assert_eq!(after.teacher.as_ref(), Some(&after.student));
}

#[test]
fn disabled_components_contribute_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), 5, 16, 2);
    let base = config(1, 2, 0.5, 0.15);
    type Edit = fn(&mut TrainConfig);
    let cases: [(&str, Edit); 3] = [
        ("baseline", |c| {
            c.disable("all").unwrap();
            c.lambda_u = 0.0;
        }),
        ("no itcl", |c| c.use_itcl = false),
        ("no tpatchmix", |c| c.use_tpatchmix = false),
    ];
    for (name, edit) in cases {
        let mut cfg = base.clone();
        edit(&mut cfg);
        let out = train(&cfg, &data, &tmp.path().join(name)).unwrap();
        for r in read_log(&out.metrics_log).unwrap() {
            let LogRecord::Step {
                phase,
                unsup,
                itcl_sup,
                itcl_unsup,
                n_mixed,
                total,
                sup,
                ..
            } = r
            else {
                continue;
            };
            if phase != Phase::Ssl {
                continue;
            }
            if !cfg.use_itcl {
                assert_eq!((itcl_sup, itcl_unsup), (0.0, 0.0), "{name}");
            }
            if !cfg.use_tpatchmix || !cfg.use_ema_ssl {
                assert_eq!(n_mixed, 0, "{name}");
            }
            if !cfg.use_ema_ssl {
                assert_eq!(unsup, 0.0, "{name}");
                assert_eq!(total, sup, "{name}");
            }
        }
    }
}

#[test]
fn runs_are_reproducible_and_checkpoints_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), 6, 16, 4);
    let cfg = config(9, 3, 0.34, 0.15);
    let mut seen = Vec::new();
    let a = train_with(
        &cfg,
        &data,
        &tmp.path().join("a"),
        &TrainOptions::default(),
        &mut |r| seen.push(r.clone()),
    )
    .unwrap();
    let b = train(&cfg, &data, &tmp.path().join("b")).unwrap();
    assert_eq!(
        std::fs::read(&a.metrics_log).unwrap(),
        std::fs::read(&b.metrics_log).unwrap()
    );
    assert_eq!(read_log(&a.metrics_log).unwrap(), seen);

    let ck = Checkpoint::load(&a.final_checkpoint).unwrap();
    assert_eq!(ck.header.step, a.steps);
    let copy = tmp.path().join("copy.ckpt");
    ck.save(&copy).unwrap();
    assert_eq!(
        std::fs::read(&copy).unwrap(),
        std::fs::read(&a.final_checkpoint).unwrap()
    );
    assert!(ck.teacher.is_some());

    let mut bytes = std::fs::read(&copy).unwrap();
    bytes.truncate(bytes.len() - 7);
    std::fs::write(&copy, bytes).unwrap();
    assert!(matches!(
        Checkpoint::load(&copy),
        Err(Error::Checkpoint { .. })
    ));
}

#[test]
fn epochs_total_zero_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = dataset(&tmp.path().join("data"), 7, 4, 2);
    let cfg = config(0, 0, 0.2, 1.0);
    assert!(matches!(
        train(&cfg, &data, &tmp.path().join("run")),
        Err(Error::Config(_))
    ));
}

#[test]
fn shipped_default_config_matches_the_library_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    assert_eq!(TrainConfig::load(&path).unwrap(), TrainConfig::default());
}

#[test]
fn shipped_desk_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let c = TrainConfig::load(&path).unwrap();
    assert_eq!((c.lr_max, c.m, c.epochs_total), (2e-3, 0.99, 60));
}
