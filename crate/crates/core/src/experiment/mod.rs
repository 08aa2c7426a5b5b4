//! Experiment runner: data preparation, training across losses and seeds,
//! evaluation and reporting.

pub mod config;
pub mod dataset;
pub mod report;
pub mod train;

use rayon::prelude::*;

use crate::encoder::EncoderSpec;
use crate::error::{Error, Result};
use crate::losses::MarginConfig;
use crate::metrics::MetricRecord;
use crate::mining::{build_heuristic_table, RelevanceTable};
use crate::numerics::{Matrix, SeededRng};
use crate::synthetic::generate_rings;

pub use config::{DatasetSource, ExperimentConfig, LossKind, Mining, Optimizer, RelevanceMode};
pub use dataset::{load_dataset, DatasetBundle, DatasetMode, DatasetRecord, Split};
pub use report::{compare_reports, LossRun, RunReport, SeedRun, Significance};
pub use train::{EvalSet, Labeler, LossSettings, Model, Side, TrainingSet};

use config::{MARGIN_GRID_M1, MARGIN_GRID_M2, MARGIN_GRID_N, MARGIN_GRID_P};
use dataset::{ring_class, ring_records};

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_TUNE_SPLIT: u64 = 2;

/// Fraction of training items held out when tuning margins on unimodal data.
pub const TUNE_HOLDOUT: f64 = 0.2;

/// Training data and evaluation sets of one run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub mode: DatasetMode,
    pub train: TrainingSet,
    pub eval: Vec<EvalSet>,
    /// Training subset and held-out sets used to pick margins.
    pub tuning: Option<(TrainingSet, Vec<EvalSet>)>,
}

fn side(records: &[&DatasetRecord]) -> Result<Side> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.features.as_slice()).collect();
    let features = if rows.is_empty() { Matrix::zeros(0, 0) } else { Matrix::from_rows(&rows)? };
    Ok(Side {
        features,
        keys: records.iter().map(|r| r.video_id.clone()).collect(),
        ids: records.iter().map(|r| r.id.clone()).collect(),
    })
}

fn videos_and_captions(records: &[DatasetRecord]) -> Result<(Side, Side)> {
    let videos: Vec<&DatasetRecord> = records.iter().filter(|r| r.caption.is_none()).collect();
    let captions: Vec<&DatasetRecord> = records.iter().filter(|r| r.caption.is_some()).collect();
    Ok((side(&videos)?, side(&captions)?))
}

/// The dataset used by `seed`: ring data are redrawn per seed, files are
/// shared by every seed.
pub fn dataset_for_seed(cfg: &ExperimentConfig, seed: u64) -> Result<DatasetBundle> {
    match &cfg.dataset {
        DatasetSource::Synthetic(spec) => {
            let spec = crate::synthetic::RingSpec { seed: spec.seed.wrapping_add(seed), ..spec.clone() };
            DatasetBundle::from_records(ring_records(&generate_rings(&spec)?))
        }
        DatasetSource::Path(p) => load_dataset(p),
    }
}

fn ring_groups(cfg: &ExperimentConfig, bundle: &DatasetBundle) -> Result<usize> {
    if let DatasetSource::Synthetic(spec) = &cfg.dataset {
        return Ok(spec.n_groups);
    }
    let mut max = 0;
    for r in bundle.all() {
        max = max.max(ring_class(&r.video_id)?);
    }
    Ok((max as usize).div_ceil(2))
}

fn labeler(cfg: &ExperimentConfig, bundle: &DatasetBundle) -> Result<Labeler> {
    match (bundle.mode(), cfg.relevance) {
        (DatasetMode::Unimodal, RelevanceMode::RingRule) => Ok(Labeler::Ring { n_groups: ring_groups(cfg, bundle)? }),
        (DatasetMode::Unimodal, RelevanceMode::None) => Ok(Labeler::SameKey),
        (DatasetMode::Unimodal, _) => {
            Err(Error::Config("caption relevance needs a cross-modal dataset; use ring_rule or none".into()))
        }
        (DatasetMode::CrossModal, RelevanceMode::Manual) => {
            let path = cfg.relevance_table.as_ref().ok_or_else(|| Error::Config("missing relevance_table".into()))?;
            Ok(Labeler::Table(RelevanceTable::load(path)?))
        }
        (DatasetMode::CrossModal, RelevanceMode::Heuristic) => {
            let captions: Vec<_> = bundle.train.iter().filter_map(DatasetRecord::caption_record).collect();
            Ok(Labeler::Table(build_heuristic_table(&captions, cfg.heuristic_top_k)?.0))
        }
        (DatasetMode::CrossModal, RelevanceMode::None) => Ok(Labeler::Table(RelevanceTable::new())),
        (DatasetMode::CrossModal, RelevanceMode::RingRule) => {
            Err(Error::Config("ring_rule relevance needs a unimodal dataset".into()))
        }
    }
}

/// Builds training and evaluation sets for one seed.
pub fn prepare(cfg: &ExperimentConfig, bundle: &DatasetBundle, seed: u64) -> Result<Prepared> {
    let mode = bundle.mode();
    let labeler = labeler(cfg, bundle)?;
    if bundle.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    match mode {
        DatasetMode::Unimodal => {
            let train_side = side(&bundle.train.iter().collect::<Vec<_>>())?;
            let test_side = side(&bundle.test.iter().collect::<Vec<_>>())?;
            let eval = if test_side.is_empty() { vec![] } else { vec![EvalSet::same_key("sym", &test_side, &train_side)?] };
            let tuning = if cfg.tune_margins {
                let mut order: Vec<usize> = (0..train_side.len()).collect();
                SeededRng::derive(seed, STREAM_TUNE_SPLIT).shuffle(&mut order);
                let held = ((train_side.len() as f64) * TUNE_HOLDOUT).round() as usize;
                let (held_idx, fit_idx) = order.split_at(held);
                let fit = train_side.subset(fit_idx);
                let held_out: Vec<usize> =
                    held_idx.iter().copied().filter(|&i| fit.keys.contains(&train_side.keys[i])).collect();
                if held_out.is_empty() || fit.len() < 2 {
                    return Err(Error::Config("training set too small to hold out a tuning split".into()));
                }
                let eval = vec![EvalSet::same_key("sym", &train_side.subset(&held_out), &fit)?];
                Some((TrainingSet::unimodal(fit, labeler.clone()), eval))
            } else {
                None
            };
            Ok(Prepared { mode, train: TrainingSet::unimodal(train_side, labeler), eval, tuning })
        }
        DatasetMode::CrossModal => {
            let (videos, captions) = videos_and_captions(&bundle.train)?;
            let train = TrainingSet::cross_modal(videos, captions, labeler.clone())?;
            let eval = if bundle.test.is_empty() {
                vec![]
            } else {
                let (v, c) = videos_and_captions(&bundle.test)?;
                EvalSet::cross_modal(&v, &c)?.to_vec()
            };
            let tuning = if cfg.tune_margins {
                if bundle.val.is_empty() {
                    return Err(Error::Config("tune_margins needs a val split".into()));
                }
                let (v, c) = videos_and_captions(&bundle.val)?;
                Some((train.clone(), EvalSet::cross_modal(&v, &c)?.to_vec()))
            } else {
                None
            };
            Ok(Prepared { mode, train, eval, tuning })
        }
    }
}

/// Encoder layouts for the two sides; the second is `None` when shared.
pub fn encoder_specs(cfg: &ExperimentConfig, data: &TrainingSet, mode: DatasetMode) -> Result<(EncoderSpec, Option<EncoderSpec>)> {
    let left_dim = data.left.features.cols();
    let right_dim = data.right.features.cols();
    let out = cfg.embed_dim.unwrap_or(left_dim.min(right_dim));
    let spec = |input: usize| {
        let mut sizes = vec![input];
        sizes.extend(&cfg.hidden);
        sizes.push(out);
        EncoderSpec::mlp(sizes, cfg.activation)
    };
    let shared = cfg.shared_encoder.unwrap_or(mode == DatasetMode::Unimodal);
    if shared && left_dim != right_dim {
        return Err(Error::Config(format!("cannot share an encoder between {left_dim}- and {right_dim}-dimensional inputs")));
    }
    Ok((spec(left_dim), if shared { None } else { Some(spec(right_dim)) }))
}

/// Settings for `loss` with the given margins.
pub fn loss_settings(cfg: &ExperimentConfig, loss: LossKind, margins: MarginConfig) -> LossSettings {
    LossSettings { kind: loss, margins, metric: cfg.metric, normalize: cfg.normalize, sinkhorn: cfg.sinkhorn }
}

/// Margin candidates searched for `loss` when tuning.
pub fn margin_candidates(loss: LossKind, base: &MarginConfig) -> Vec<MarginConfig> {
    let mut out = Vec::new();
    match loss {
        LossKind::Po => {
            for &p in &MARGIN_GRID_P {
                for &m1 in &MARGIN_GRID_M1 {
                    for &m2 in &MARGIN_GRID_M2 {
                        for &n in &MARGIN_GRID_N {
                            let c = MarginConfig { p, m1, m2, n, ..*base };
                            if c.validate().is_ok() {
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        LossKind::Mm | LossKind::Ot => out.extend(MARGIN_GRID_N.iter().map(|&m| MarginConfig { m, ..*base })),
        LossKind::Contrastive | LossKind::Triplet => {
            out.extend(MARGIN_GRID_N.iter().map(|&eps| MarginConfig { eps, ..*base }))
        }
    }
    out
}

fn fit(
    cfg: &ExperimentConfig,
    data: &TrainingSet,
    mode: DatasetMode,
    settings: &LossSettings,
    seed: u64,
) -> Result<(Model, train::TrainLog)> {
    let (left, right) = encoder_specs(cfg, data, mode)?;
    let mut model = Model::init(&left, right.as_ref(), &mut SeededRng::derive(seed, STREAM_INIT))?;
    let log = train::train(&mut model, data, cfg, settings, &mut SeededRng::derive(seed, STREAM_TRAIN))?;
    Ok((model, log))
}

/// Picks the candidate margins with the best held-out R@1 (then lowest mean
/// rank); the first candidate wins ties.
pub fn tune_margins(cfg: &ExperimentConfig, prepared: &Prepared, loss: LossKind, seed: u64) -> Result<MarginConfig> {
    let Some((data, eval)) = &prepared.tuning else { return Ok(cfg.margins) };
    let mut best: Option<(f64, f64, MarginConfig)> = None;
    for cand in margin_candidates(loss, &cfg.margins) {
        let settings = loss_settings(cfg, loss, cand);
        let (model, log) = fit(cfg, data, prepared.mode, &settings, seed)?;
        if log.aborted.is_some() {
            continue;
        }
        let (mut r1, mut mnr) = (0.0, 0.0);
        for e in eval {
            let s = e.summary(&model, cfg.metric, cfg.normalize, &[1])?;
            r1 += s.recall(1).unwrap_or(0.0);
            mnr += s.mean;
        }
        if best.is_none_or(|(br, bm, _)| r1 > br || (r1 == br && mnr < bm)) {
            best = Some((r1, mnr, cand));
        }
    }
    Ok(best.map_or(cfg.margins, |b| b.2))
}

/// Tunes (optionally), trains and evaluates one loss on one seed.
pub fn run_seed(cfg: &ExperimentConfig, loss: LossKind, seed: u64, prepared: &Prepared) -> Result<SeedRun> {
    let margins = tune_margins(cfg, prepared, loss, seed)?;
    let settings = loss_settings(cfg, loss, margins);
    let (model, log) = fit(cfg, &prepared.train, prepared.mode, &settings, seed)?;
    let records = if log.aborted.is_some() {
        Vec::new()
    } else {
        prepared
            .eval
            .iter()
            .map(|e| {
                Ok(MetricRecord {
                    loss: loss.name().into(),
                    seed,
                    split: "test".into(),
                    direction: e.direction.clone(),
                    summary: e.summary(&model, cfg.metric, cfg.normalize, &cfg.eval_ks)?,
                })
            })
            .collect::<Result<Vec<_>>>()?
    };
    Ok(SeedRun {
        seed,
        margins,
        records,
        epoch_losses: log.epoch_losses,
        sinkhorn_solves: log.sinkhorn_solves,
        sinkhorn_unconverged: log.sinkhorn_unconverged,
        aborted: log.aborted,
    })
}

/// Runs every configured loss on every seed. Seeds run in parallel; the
/// report depends only on the configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let shared = match &cfg.dataset {
        DatasetSource::Path(p) => Some(load_dataset(p)?),
        DatasetSource::Synthetic(_) => None,
    };
    let prepared: Vec<(u64, Prepared)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let bundle = match &shared {
                Some(b) => b.clone(),
                None => dataset_for_seed(cfg, seed)?,
            };
            Ok((seed, prepare(cfg, &bundle, seed)?))
        })
        .collect::<Result<_>>()?;
    let mode = prepared[0].1.mode;
    let tasks: Vec<(LossKind, usize)> =
        cfg.losses.iter().flat_map(|&l| (0..prepared.len()).map(move |s| (l, s))).collect();
    let results: Vec<SeedRun> = tasks
        .par_iter()
        .map(|&(loss, s)| run_seed(cfg, loss, prepared[s].0, &prepared[s].1))
        .collect::<Result<_>>()?;
    let mut runs = Vec::new();
    let mut it = results.into_iter();
    for &loss in &cfg.losses {
        runs.push(LossRun::new(loss, it.by_ref().take(prepared.len()).collect()));
    }
    let significance = if runs.len() > 1 { report::within_report_tests(&runs)? } else { Vec::new() };
    Ok(RunReport { config: cfg.clone(), mode, runs, significance })
}
