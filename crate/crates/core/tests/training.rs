use std::fs;

use capsdense::checkpoint;
use capsdense::data::{self, Dataset};
use capsdense::model::{InputShape, ModelSpec};
use capsdense::train::{self, TrainConfig, Trainer};

fn small_spec() -> ModelSpec {
    ModelSpec::tiny_dcnet(InputShape::new(1, 16, 16), 4, 4, 8, 8)
}

fn cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        seed,
        ..Default::default()
    }
}

fn strip_seconds(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| {
            let mut cols: Vec<&str> = l.split(',').collect();
            cols.remove(7);
            cols.join(",")
        })
        .collect()
}

fn split() -> (Dataset, Dataset) {
    (data::synth_shapes(96, 11), data::synth_shapes(32, 12))
}

/// `0.001 * 0.9^e` as the correctly rounded decimal `9^e / 10^(e+3)`.
fn decimal_lr(e: u32) -> f64 {
    format!("{}e-{}", 9u128.pow(e), e + 3).parse().unwrap()
}

#[test]
fn lr_schedule_matches_closed_form() {
    let c = TrainConfig::default();
    for e in 0..30 {
        let want = decimal_lr(e);
        let got = c.lr_at(e as usize);
        assert!(((got - want) / want).abs() <= 1e-14, "epoch {e}: {got} vs {want}");
    }
    assert_eq!(c.lr_at(0), 0.001);
}

#[test]
fn seeded_runs_write_identical_metrics() {
    let (train_ds, test_ds) = split();
    let mut csvs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(&small_spec(), cfg(2, 4)).unwrap();
        t.fit(&train_ds, Some(&test_ds), Some(dir.path()), |_| {}).unwrap();
        csvs.push(fs::read_to_string(dir.path().join("metrics.csv")).unwrap());
    }
    assert_eq!(csvs[0].lines().next().unwrap(), train::CSV_HEADER);
    assert_eq!(csvs[0].lines().count(), 3);
    assert_eq!(strip_seconds(&csvs[0]), strip_seconds(&csvs[1]));
}

#[test]
fn different_seeds_differ() {
    let (train_ds, _) = split();
    let run = |seed| {
        let mut t = Trainer::new(&small_spec(), cfg(1, seed)).unwrap();
        t.fit(&train_ds, None, None, |_| {}).unwrap()[0].total_loss
    };
    assert_ne!(run(1), run(2));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (train_ds, _) = split();
    let mut straight = Trainer::new(&small_spec(), cfg(2, 7)).unwrap();
    straight.fit(&train_ds, None, None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.cdck");
    let mut first = Trainer::new(&small_spec(), cfg(1, 7)).unwrap();
    first.fit(&train_ds, None, None, |_| {}).unwrap();
    checkpoint::save(&path, &first.checkpoint(), &first.model.spec).unwrap();
    let (spec, ck) = checkpoint::load_with_spec(&path).unwrap();
    let mut resumed = Trainer::resume(&spec, ck, cfg(1, 7)).unwrap();
    let rows = resumed.fit(&train_ds, None, None, |_| {}).unwrap();
    assert_eq!(rows[0].epoch, 1);
    assert_eq!(resumed.adam.step, straight.adam.step);
    for ((name, a), (_, b)) in straight.model.params.iter().zip(resumed.model.params.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-5, "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn loss_decreases() {
    let (train_ds, _) = split();
    let mut t = Trainer::new(&small_spec(), cfg(4, 0)).unwrap();
    let rows = t.fit(&train_ds, None, None, |_| {}).unwrap();
    assert!(rows[3].total_loss < rows[0].total_loss, "{rows:?}");
}

#[test]
fn overfits_64_samples_within_200_steps() {
    let ds = data::synth_shapes(64, 5);
    let mut t = Trainer::new(
        &small_spec(),
        TrainConfig {
            batch_size: 16,
            decay: 1.0,
            ..Default::default()
        },
    )
    .unwrap();
    let mut steps = 0;
    let mut best = 0.0;
    'outer: for epoch in 0.. {
        for b in data::batches(&ds, 16, Some(epoch)).unwrap() {
            t.step(&b, 0.001).unwrap();
            steps += 1;
            if steps % 20 == 0 {
                best = train::evaluate(&t.model, &ds, 64, None).unwrap().accuracy;
                if best == 1.0 || steps >= 200 {
                    break 'outer;
                }
            }
        }
    }
    assert_eq!(best, 1.0, "train accuracy {best} after {steps} steps");
}

#[test]
fn evaluate_constant_predictor() {
    let labels = [0usize, 1, 1, 2, 2, 2];
    let r = train::report_from_predictions(&[2; 6], &labels, 3, 0.0).unwrap();
    assert!((r.accuracy - 0.5).abs() < 1e-12);
    assert_eq!(r.per_class_accuracy, vec![Some(0.0), Some(0.0), Some(1.0)]);
    assert_eq!(r.confusion[1], vec![0, 0, 2]);
    assert!(train::report_from_predictions(&[], &[], 3, 0.0).is_err());
}

#[test]
fn metrics_header_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    fs::write(&path, "something,else\n").unwrap();
    assert!(train::MetricsLog::open(&path, 1).is_err());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    train::MetricsLog::open(&path, 4).unwrap();
    assert!(fs::read_to_string(&path).unwrap().trim_end().ends_with("head4_margin_loss"));
}
