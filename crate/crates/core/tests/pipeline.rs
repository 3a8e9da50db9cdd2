use depthprior::model::ModelConfig;
use depthprior::scenegen::{default_catalog, generate_dataset, read_dataset, write_dataset, Dataset, GeneratorConfig};
use depthprior::trainer::{Checkpoint, TrainConfig, Trainer};
use depthprior::Error;

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        height: 8,
        width: 8,
        focal: 16.0,
        ..GeneratorConfig::default()
    }
}

fn data(seed: u64, count: usize) -> Dataset {
    generate_dataset(seed, count, &default_catalog(), &small_generator()).unwrap()
}

fn toy_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        p: 0.25,
        model: ModelConfig::toy(),
        ..TrainConfig::default()
    }
}

#[test]
fn toy_training_improves_and_checkpoint_reloads_exactly() {
    let (train, val) = (data(0, 96), data(1, 16));
    let mut t = Trainer::<f32>::new(toy_config(6), train.header.vocabulary.len()).unwrap();
    let before = t.evaluate(&val).unwrap();
    let fit = t.fit(&train, &val, |_| {}).unwrap();
    assert_eq!(fit.logs.len(), 6);
    assert!(fit
        .logs
        .iter()
        .all(|l| l.train_loss.is_finite() && l.skipped_steps == 0));
    let best = fit.logs.iter().map(|l| l.val.abs_rel).fold(f64::INFINITY, f64::min);
    assert!(best < before.abs_rel, "{best} vs untrained {}", before.abs_rel);
    assert_eq!(fit.logs[fit.best_epoch - 1].val.abs_rel, best);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.wdck");
    fit.best.save(&path).unwrap();
    let mut a = Trainer::<f32>::from_checkpoint(&fit.best).unwrap();
    let mut b = Trainer::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(a.evaluate(&val).unwrap(), b.evaluate(&val).unwrap());
    let caption = &val.samples[0].caption;
    assert_eq!(
        a.infer_text(caption, 4, 9).unwrap(),
        b.infer_text(caption, 4, 9).unwrap()
    );
}

#[test]
fn each_optimizer_step_counts_toward_the_schedule() {
    let train = data(2, 80);
    let mut t = Trainer::<f32>::new(toy_config(2), train.header.vocabulary.len()).unwrap();
    let logs = t.fit(&train, &data(3, 8), |_| {}).unwrap().logs;
    let text: u64 = logs.iter().map(|l| l.text_steps).sum();
    let image: u64 = logs.iter().map(|l| l.image_steps).sum();
    // 10 batches per epoch at p = 0.25.
    assert_eq!((text, image), (5, 15));
    assert_eq!(logs.last().unwrap().step, 20);
}

#[test]
fn f64_and_f32_models_agree_at_initialization() {
    let val = data(4, 4);
    let vocab = val.header.vocabulary.len();
    let mut single = Trainer::<f32>::new(toy_config(1), vocab).unwrap();
    let mut double = Trainer::<f64>::new(toy_config(1), vocab).unwrap();
    let s = &val.samples[0];
    let a = single.infer_image(&s.image, &s.caption).unwrap();
    let b = double.infer_image(&s.image, &s.caption).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!(((*x as f64) - y).abs() <= 1e-5 * y.abs(), "{x} vs {y}");
    }
}

#[test]
fn dataset_files_round_trip_and_reject_mismatched_models() {
    let ds = data(5, 12);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.wdph");
    write_dataset(&ds, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());

    let big = TrainConfig::default();
    let mut t = Trainer::<f32>::new(big, ds.header.vocabulary.len()).unwrap();
    assert!(matches!(t.evaluate(&ds), Err(Error::Config(_))));
}

#[test]
fn generative_samples_depend_only_on_the_seed() {
    let ds = data(6, 4);
    let mut t = Trainer::<f32>::new(toy_config(1), ds.header.vocabulary.len()).unwrap();
    let caption = &ds.samples[0].caption;
    let a = t.infer_text(caption, 3, 1).unwrap();
    let b = t.infer_text(caption, 3, 1).unwrap();
    let c = t.infer_text(caption, 3, 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.iter().all(|m| m.data().iter().all(|&v| v > 0.0)));
}
