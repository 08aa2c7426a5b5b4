use porank::encoder::EncoderSpec;
use porank::experiment::config::Reduction;
use porank::experiment::report::SignificanceStatus;
use porank::experiment::train::{train, LossSettings};
use porank::experiment::{
    compare_reports, run_experiment, DatasetMode, ExperimentConfig, Labeler, LossKind, LossRun, Model, RunReport, SeedRun,
    Side, TrainingSet,
};
use porank::losses::MarginConfig;
use porank::metrics::{MetricRecord, RankSummary};
use porank::numerics::{Matrix, Metric, SeededRng};
use porank::sinkhorn::SinkhornOptions;
use porank::Error;

/// Two classes on the vertical lines x = 0 and x = 3.
fn two_lines() -> Side {
    let mut rows = Vec::new();
    let mut keys = Vec::new();
    for k in 0..12 {
        let y = k as f64 / 4.0;
        rows.push([0.0, y]);
        keys.push("left".to_string());
        rows.push([3.0, y]);
        keys.push("right".to_string());
    }
    let ids = (0..rows.len()).map(|i| format!("p{i}")).collect();
    Side { features: Matrix::from_rows(&rows).unwrap(), keys, ids }
}

#[test]
fn every_loss_reaches_zero_on_a_separable_toy() {
    let data = TrainingSet::unimodal(two_lines(), Labeler::SameKey);
    for kind in LossKind::ALL {
        // the contrastive positive term is a plain distance, which subgradient
        // descent only drives to within a step of zero, so it gets the mean
        // reduction with a small step and a tolerance
        let (reduction, lr, tol) =
            if kind == LossKind::Contrastive { (Reduction::Mean, 0.005, 1e-2) } else { (Reduction::Sum, 0.05, 0.0) };
        let cfg = ExperimentConfig { epochs: 500, batch_size: 8, lr, reduction, ..Default::default() };
        let settings = LossSettings {
            kind,
            margins: MarginConfig::default(),
            metric: Metric::Euclidean,
            normalize: false,
            sinkhorn: SinkhornOptions::default(),
        };
        let mut rng = SeededRng::new(7);
        let mut model = Model::init(&EncoderSpec::linear(2, 2), None, &mut rng).unwrap();
        let log = train(&mut model, &data, &cfg, &settings, &mut rng).unwrap();
        assert!(log.aborted.is_none());
        let last = *log.epoch_losses.last().unwrap();
        assert!(last <= tol, "{}: final epoch loss {last}", kind.name());
    }
}

fn tenth_means(losses: &[f64]) -> (f64, f64) {
    let k = (losses.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&losses[..k]), mean(&losses[losses.len() - k..]))
}

#[test]
fn final_epochs_are_no_worse_than_the_first() {
    let report = run_experiment(&ExperimentConfig::default()).unwrap();
    for run in &report.runs {
        for seed in &run.seeds {
            let (first, last) = tenth_means(&seed.epoch_losses);
            assert!(last <= first, "{} seed {}: {first} -> {last}", run.loss.name(), seed.seed);
        }
    }
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let cfg = ExperimentConfig {
        losses: vec![LossKind::Mm, LossKind::Po, LossKind::Ot],
        epochs: 15,
        seeds: vec![3, 1, 4],
        ..Default::default()
    };
    let a = run_experiment(&cfg).unwrap().to_json().unwrap();
    let b = run_experiment(&cfg).unwrap().to_json().unwrap();
    assert_eq!(a, b);
    let back = RunReport::from_json(&a).unwrap();
    assert_eq!(back.to_json().unwrap(), a);
}

#[test]
fn zero_epochs_reports_the_untrained_encoder() {
    let cfg = ExperimentConfig { epochs: 0, losses: vec![LossKind::Po], ..Default::default() };
    let report = run_experiment(&cfg).unwrap();
    let run = report.run(LossKind::Po).unwrap();
    assert_eq!(run.seeds.len(), 5);
    assert!(run.seeds.iter().all(|s| s.epoch_losses.is_empty() && s.records.len() == 1));
    let agg = run.aggregate("sym").unwrap();
    let mean_r1 = run.records("sym").iter().map(|r| r.recall(1).unwrap()).sum::<f64>() / 5.0;
    assert!((agg.summary.recall(1).unwrap() - mean_r1).abs() < 1e-12);
}

fn synthetic_report(loss: LossKind, medians: &[f64]) -> RunReport {
    let seeds = medians
        .iter()
        .enumerate()
        .map(|(s, &median)| SeedRun {
            seed: s as u64,
            margins: MarginConfig::default(),
            records: vec![MetricRecord {
                loss: loss.name().into(),
                seed: s as u64,
                split: "test".into(),
                direction: "sym".into(),
                summary: RankSummary { recall: vec![(1, 50.0)], median, mean: median + 1.0 },
            }],
            epoch_losses: vec![],
            sinkhorn_solves: 0,
            sinkhorn_unconverged: 0,
            aborted: None,
        })
        .collect();
    RunReport {
        config: ExperimentConfig { losses: vec![loss], ..Default::default() },
        mode: DatasetMode::Unimodal,
        runs: vec![LossRun::new(loss, seeds)],
        significance: vec![],
    }
}

#[test]
fn compare_flags_identical_reports_as_degenerate() {
    let a = synthetic_report(LossKind::Mm, &[2.0, 3.0, 2.0, 4.0, 3.0]);
    let tests = compare_reports(&a, &a).unwrap();
    assert_eq!(tests.len(), 1);
    assert_eq!(tests[0].status, SignificanceStatus::Degenerate);
    assert_eq!(tests[0].p_two_sided, None);
}

#[test]
fn compare_gives_one_over_32_when_every_seed_improves() {
    let po = synthetic_report(LossKind::Po, &[1.0, 1.0, 2.0, 1.5, 1.0]);
    let mm = synthetic_report(LossKind::Mm, &[2.0, 3.0, 3.0, 2.0, 4.0]);
    let tests = compare_reports(&po, &mm).unwrap();
    assert_eq!(tests[0].p_a_better, Some(1.0 / 32.0));
    assert_eq!(tests[0].p_two_sided, Some(1.0 / 16.0));
    assert_eq!(tests[0].better, "po");
}

#[test]
fn compare_rejects_mismatched_seeds() {
    let a = synthetic_report(LossKind::Po, &[1.0, 2.0, 3.0]);
    let b = synthetic_report(LossKind::Mm, &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(compare_reports(&a, &b), Err(Error::SeedMismatch));
}
