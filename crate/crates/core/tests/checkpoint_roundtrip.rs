use taxbox::autodiff::Checkpoint;
use taxbox::synthetic::{generate, SyntheticSpec, SyntheticTask};
use taxbox::taxonomy::{Role, SplitView};
use taxbox::train::{train, Predictor, RunConfig, TrainOutput};

fn small_task() -> (SyntheticTask, SplitView) {
    let task = generate(&SyntheticSpec {
        nodes: 40,
        test_leaves: 4,
        test_internal: 2,
        valid: 4,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let view = task.split.view(&task.taxonomy).unwrap();
    (task, view)
}

fn small_config() -> RunConfig {
    RunConfig {
        d_box: 8,
        epochs: 3,
        batch_queries: 4,
        neg_per_pos: 15,
        seed: 11,
        ..Default::default()
    }
}

#[test]
fn reloaded_checkpoint_scores_like_the_trained_model() {
    let (task, view) = small_task();
    let features = task.embeddings.features_for(&view.seed).unwrap();
    let valid = task.embeddings.queries(&view, Role::Valid).unwrap();
    let test = task.embeddings.queries(&view, Role::Test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (ck, log) = (dir.path().join("m.ckpt"), dir.path().join("log.tsv"));
    let cfg = small_config();
    let out = train(
        &view.seed,
        &features,
        &valid,
        &cfg,
        Some(TrainOutput {
            checkpoint: &ck,
            log: &log,
        }),
    )
    .unwrap();

    let restored = Predictor::from_checkpoint(
        &Checkpoint::read(&ck).unwrap(),
        &cfg,
        features.shape()[1],
        view.seed.candidates(),
    )
    .unwrap();
    for q in &test {
        let a = out.best.score(&q.embedding).unwrap();
        let b = restored.score(&q.embedding).unwrap();
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "query {}: {worst:e}", q.query.id);
    }
    assert_eq!(out.best.evaluate(&test).unwrap(), restored.evaluate(&test).unwrap());

    let rows = std::fs::read_to_string(&log).unwrap();
    assert_eq!(rows.lines().count(), 1 + cfg.epochs);
}

#[test]
fn seeded_training_is_bit_reproducible() {
    let (task, view) = small_task();
    let features = task.embeddings.features_for(&view.seed).unwrap();
    let valid = task.embeddings.queries(&view, Role::Valid).unwrap();
    let run = || {
        let out = train(&view.seed, &features, &valid, &small_config(), None).unwrap();
        (out.best.to_checkpoint().unwrap().to_bytes(), out.log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
}
