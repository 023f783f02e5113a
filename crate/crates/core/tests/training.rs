use clipdg::clip::{stub_encoder, ClipEncoder};
use clipdg::data::{synth_dataset, Dataset};
use clipdg::model::FusionMode;
use clipdg::model::{ArchConfig, HandPoseNet, PoseModel};
use clipdg::train::{
    cross_validate, evaluate_epe, evaluate_model, fold_epe, kfold_indices, read_log, train, Checkpoint, GridPoint,
    PromptPolicy, TrainConfig, Trainer, LAST_CHECKPOINT, LOG_FILE,
};

fn tiny_config(dir: &std::path::Path) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.arch = ArchConfig::tiny();
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-3;
    cfg.checkpoint_dir = dir.to_path_buf();
    cfg
}

fn data(n: usize) -> Dataset {
    let mut ds = synth_dataset(n, 11);
    ds.materialize().unwrap();
    ds
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ds = data(12);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let full = train(&tiny_config(a.path()), &ds, None).unwrap();

    let mut first = tiny_config(b.path());
    first.epochs = 1;
    train(&first, &ds, None).unwrap();
    let ck = Checkpoint::load(&b.path().join(LAST_CHECKPOINT)).unwrap();
    let resumed = Trainer::resume(tiny_config(b.path()), &ck, true).unwrap().run(&ds, None).unwrap();

    assert_eq!(full.model.params, resumed.model.params);
    let la = read_log(&a.path().join(LOG_FILE)).unwrap();
    let lb = read_log(&b.path().join(LOG_FILE)).unwrap();
    assert_eq!(la, lb);
    assert_eq!(std::fs::read(a.path().join(LOG_FILE)).unwrap(), std::fs::read(b.path().join(LOG_FILE)).unwrap());
}

#[test]
fn resume_discards_log_rows_past_the_checkpoint() {
    let ds = data(8);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.epochs = 1;
    train(&cfg, &ds, None).unwrap();
    let ck = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    cfg.epochs = 2;
    train(&cfg, &ds, None).unwrap();
    assert_eq!(read_log(&dir.path().join(LOG_FILE)).unwrap().len(), 4);
    Trainer::resume(cfg, &ck, true).unwrap();
    let log = read_log(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2]);
}

#[test]
fn thread_count_does_not_change_the_trajectory() {
    let ds = data(10);
    let mut cfg = tiny_config(std::path::Path::new("unused"));
    cfg.batch_size = 5;
    cfg.grad_chunk = 2;
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| Trainer::new(cfg.clone(), false).unwrap().run(&ds, None).unwrap())
    };
    let one = run(1);
    let three = run(3);
    assert_eq!(one.log, three.log);
    assert_eq!(one.model.params, three.model.params);
}

#[test]
fn prompt_policies_all_train() {
    let ds = data(8);
    for policy in [PromptPolicy::PerSample, PromptPolicy::PerBatch, PromptPolicy::PerEpoch] {
        let mut cfg = tiny_config(std::path::Path::new("unused"));
        cfg.prompt_policy = policy;
        cfg.epochs = 1;
        let out = Trainer::new(cfg, false).unwrap().run(&ds, None).unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.log.iter().all(|r| r.total.is_finite() && r.con != 0.0));
    }
}

#[test]
fn checkpoint_reproduces_predictions() {
    let ds = data(6);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.epochs = 1;
    let out = train(&cfg, &ds, Some(&ds)).unwrap();
    let ck = Checkpoint::load(&dir.path().join(LAST_CHECKPOINT)).unwrap();
    let restored = ck.model().unwrap();
    let s = ds.get(0).unwrap();
    assert_eq!(restored.predict(&s.image).unwrap(), out.model.predict(&s.image).unwrap());
    assert_eq!(evaluate_epe(&ck, &ds).unwrap(), evaluate_model(&out.model, &ds).unwrap());
}

#[test]
fn frozen_encoder_is_untouched_by_training() {
    let ds = data(8);
    let enc = stub_encoder(3);
    let before = enc.checksum();
    let mut cfg = tiny_config(std::path::Path::new("unused"));
    cfg.clip.stub_seed = 3;
    cfg.epochs = 1;
    let trainer = Trainer::with_encoder(cfg, Box::new(enc), false).unwrap();
    let out = trainer.run(&ds, None).unwrap();
    assert_eq!(out.checkpoint.meta.clip_checksum.as_deref(), Some(before.as_str()));
}

#[test]
fn branch2_parameters_do_not_affect_prediction() {
    let mut model = PoseModel::new(ArchConfig::tiny(), 5).unwrap();
    let s = data(1).get(0).unwrap();
    let before = model.predict(&s.image).unwrap();
    let specs: Vec<_> = model.net.layout().specs().to_vec();
    for spec in specs.iter().filter(|p| HandPoseNet::is_branch2_param(&p.name)) {
        model.params[spec.offset..spec.offset + spec.len].iter_mut().for_each(|v| *v = 0.0);
    }
    assert_eq!(model.predict(&s.image).unwrap(), before);
}

#[test]
fn cross_validation_folds_replay() {
    let ds = data(9);
    let mut cfg = tiny_config(std::path::Path::new("unused"));
    cfg.epochs = 1;
    let grid = [
        GridPoint { image_ratio: 0.6, lambda3: 0.1, fusion_mode: FusionMode::Concat },
        GridPoint { image_ratio: 0.9, lambda3: 0.1, fusion_mode: FusionMode::Sum },
    ];
    let a = cross_validate(&cfg, &ds, 3, &grid).unwrap();
    let b = cross_validate(&cfg, &ds, 3, &grid).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.fold_epe.len(), 2);
    assert!(a.fold_epe.iter().all(|f| f.len() == 3 && f.iter().all(|e| e.is_finite())));
    let min = a.mean_epe.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(a.mean_epe[a.best_index], min);
    assert_eq!(a.best, grid[a.best_index]);

    let folds = kfold_indices(9, 3, cfg.seed).unwrap();
    let replay = fold_epe(&grid[1].apply(&cfg), &ds, &folds, 2).unwrap();
    assert_eq!(replay, a.fold_epe[1][2]);
}
