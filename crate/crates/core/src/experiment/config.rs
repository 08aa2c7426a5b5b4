//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, lists are comma separated.
//! Unknown keys and repeated keys are rejected.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::Activation;
use crate::error::{Error, Result};
use crate::losses::MarginConfig;
use crate::numerics::Metric;
use crate::sinkhorn::SinkhornOptions;
use crate::synthetic::RingSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Contrastive,
    Triplet,
    Mm,
    Ot,
    Po,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [LossKind::Contrastive, LossKind::Triplet, LossKind::Mm, LossKind::Ot, LossKind::Po];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Contrastive => "contrastive",
            LossKind::Triplet => "triplet",
            LossKind::Mm => "mm",
            LossKind::Ot => "ot",
            LossKind::Po => "po",
        }
    }

    /// Triplet and transport losses sample one negative per anchor unless
    /// told otherwise.
    pub fn single_negative_by_default(self) -> bool {
        matches!(self, LossKind::Triplet | LossKind::Ot)
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    Default,
    Hardest,
    SemiHard,
    DistanceWeighted,
}

impl FromStr for Mining {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "default" => Mining::Default,
            "hardest" => Mining::Hardest,
            "semi_hard" => Mining::SemiHard,
            "distance_weighted" => Mining::DistanceWeighted,
            _ => return Err(Error::Config(format!("unknown mining `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceMode {
    /// Judgements read from a relevance table file.
    Manual,
    /// Noun-verb judgements computed from the training captions.
    Heuristic,
    /// Disc/annulus rule over `class-k` labels.
    RingRule,
    /// Only matches are positive.
    None,
}

impl FromStr for RelevanceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "manual" => RelevanceMode::Manual,
            "heuristic" => RelevanceMode::Heuristic,
            "ring_rule" => RelevanceMode::RingRule,
            "none" => RelevanceMode::None,
            _ => return Err(Error::Config(format!("unknown relevance source `{s}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// How a batch loss is turned into the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Summed loss divided by the number of entries of the batch distance
    /// matrix.
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(RingSpec),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub losses: Vec<LossKind>,
    pub mining: Mining,
    /// `None` picks per loss.
    pub single_negative: Option<bool>,
    pub relevance: RelevanceMode,
    pub relevance_table: Option<PathBuf>,
    /// Shortlist size for heuristic labelling; `None` compares all pairs.
    pub heuristic_top_k: Option<usize>,
    pub margins: MarginConfig,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub reduction: Reduction,
    pub batch_size: usize,
    pub epochs: usize,
    pub seeds: Vec<u64>,
    pub eval_ks: Vec<usize>,
    pub metric: Metric,
    pub normalize: bool,
    /// Defaults to the input dimension.
    pub embed_dim: Option<usize>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// `None` shares the encoder exactly when both sides come from one modality.
    pub shared_encoder: Option<bool>,
    pub sinkhorn: SinkhornOptions,
    pub dw_clamp: f64,
    pub tune_margins: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(RingSpec::default()),
            losses: vec![LossKind::Mm, LossKind::Po],
            mining: Mining::Default,
            single_negative: None,
            relevance: RelevanceMode::RingRule,
            relevance_table: None,
            heuristic_top_k: Some(10),
            margins: MarginConfig { m: 0.8, ..MarginConfig::default() },
            optimizer: Optimizer::Sgd,
            lr: 0.05,
            reduction: Reduction::Mean,
            batch_size: 32,
            epochs: 300,
            seeds: vec![0, 1, 2, 3, 4],
            eval_ks: vec![1, 5, 10, 50],
            metric: Metric::Euclidean,
            normalize: false,
            embed_dim: None,
            hidden: vec![],
            activation: Activation::Relu,
            shared_encoder: None,
            sinkhorn: SinkhornOptions::default(),
            dw_clamp: 1e4,
            tune_margins: false,
        }
    }
}

/// Candidate values searched when `tune_margins = true`; only orderings with
/// `p < m1 < m2 < n` are tried.
pub const MARGIN_GRID_P: [f64; 2] = [0.05, 0.1];
pub const MARGIN_GRID_M1: [f64; 2] = [0.2, 0.3];
pub const MARGIN_GRID_M2: [f64; 2] = [0.5, 0.6];
pub const MARGIN_GRID_N: [f64; 3] = [0.6, 0.8, 1.0];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn parse_auto_bool(key: &str, value: &str) -> Result<Option<bool>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_bool(key, value).map(Some)
    }
}

impl ExperimentConfig {
    /// Parses config text; relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let d = RingSpec::default();
        let (mut groups, mut radius, mut train_points, mut test_points) =
            (d.n_groups, d.inner_radius, d.train_points, d.test_points_per_class);
        let mut synthetic = true;
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", lineno + 1)));
            }
            let m = &mut cfg.margins;
            match key {
                "dataset" => {
                    if value == "synthetic" {
                        synthetic = true;
                    } else {
                        synthetic = false;
                        cfg.dataset = DatasetSource::Path(base_dir.join(value));
                    }
                }
                "ring.groups" => groups = parse_value(key, value)?,
                "ring.inner_radius" => radius = parse_value(key, value)?,
                "ring.train_points" => train_points = parse_value(key, value)?,
                "ring.test_points_per_class" => test_points = parse_value(key, value)?,
                "loss" => cfg.losses = parse_list(key, value)?,
                "mining" => cfg.mining = parse_value(key, value)?,
                "single_negative" => cfg.single_negative = parse_auto_bool(key, value)?,
                "relevance" => cfg.relevance = parse_value(key, value)?,
                "relevance_table" => cfg.relevance_table = Some(base_dir.join(value)),
                "heuristic.top_k" => {
                    cfg.heuristic_top_k = if value == "all" { None } else { Some(parse_value(key, value)?) }
                }
                "margin.eps" => m.eps = parse_value(key, value)?,
                "margin.m" => m.m = parse_value(key, value)?,
                "margin.p" => m.p = parse_value(key, value)?,
                "margin.m1" => m.m1 = parse_value(key, value)?,
                "margin.m2" => m.m2 = parse_value(key, value)?,
                "margin.n" => m.n = parse_value(key, value)?,
                "margin.gamma" => m.gamma = parse_value(key, value)?,
                "margin.lambda" => m.lambda = parse_value(key, value)?,
                "optimizer" => {
                    cfg.optimizer = match value {
                        "sgd" => Optimizer::Sgd,
                        "adam" => Optimizer::Adam,
                        _ => return Err(Error::Config(format!("unknown optimizer `{value}`"))),
                    }
                }
                "lr" => cfg.lr = parse_value(key, value)?,
                "reduction" => {
                    cfg.reduction = match value {
                        "mean" => Reduction::Mean,
                        "sum" => Reduction::Sum,
                        _ => return Err(Error::Config(format!("unknown reduction `{value}`"))),
                    }
                }
                "batch_size" => cfg.batch_size = parse_value(key, value)?,
                "epochs" => cfg.epochs = parse_value(key, value)?,
                "seeds" => cfg.seeds = parse_list(key, value)?,
                "eval_ks" => cfg.eval_ks = parse_list(key, value)?,
                "metric" => {
                    cfg.metric = Metric::parse(value).ok_or_else(|| Error::Config(format!("unknown metric `{value}`")))?
                }
                "normalize" => cfg.normalize = parse_bool(key, value)?,
                "embed_dim" => cfg.embed_dim = if value == "auto" { None } else { Some(parse_value(key, value)?) },
                "encoder.hidden" => cfg.hidden = parse_list(key, value)?,
                "encoder.activation" => {
                    cfg.activation = match value {
                        "relu" => Activation::Relu,
                        "none" => Activation::None,
                        _ => return Err(Error::Config(format!("unknown activation `{value}`"))),
                    }
                }
                "shared_encoder" => cfg.shared_encoder = parse_auto_bool(key, value)?,
                "sinkhorn.tol" => cfg.sinkhorn.tol = parse_value(key, value)?,
                "sinkhorn.max_iter" => cfg.sinkhorn.max_iter = parse_value(key, value)?,
                "sinkhorn.log_domain" => cfg.sinkhorn.log_domain = parse_bool(key, value)?,
                "dw.clamp" => cfg.dw_clamp = parse_value(key, value)?,
                "tune_margins" => cfg.tune_margins = parse_bool(key, value)?,
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1))),
            }
        }
        if synthetic {
            // the data seed is set per run from the experiment seed
            cfg.dataset = DatasetSource::Synthetic(RingSpec::new(groups, radius, train_points, test_points, 0));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        ExperimentConfig::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.losses.is_empty() {
            return Err(Error::Config("no loss selected".into()));
        }
        let distinct: BTreeSet<_> = self.losses.iter().collect();
        if distinct.len() != self.losses.len() {
            return Err(Error::Config("a loss is listed twice".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let distinct: BTreeSet<_> = self.seeds.iter().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::Config("a seed is listed twice".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return Err(Error::Config("eval_ks must be a non-empty list of positive integers".into()));
        }
        self.margins.validate()?;
        if self.embed_dim == Some(0) || self.hidden.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if !(self.sinkhorn.tol > 0.0) || self.sinkhorn.max_iter == 0 {
            return Err(Error::Config("sinkhorn tolerance and iteration budget must be positive".into()));
        }
        if !(self.dw_clamp > 0.0) {
            return Err(Error::Config(format!("dw.clamp must be positive, got {}", self.dw_clamp)));
        }
        if self.relevance == RelevanceMode::Manual && self.relevance_table.is_none() {
            return Err(Error::Config("relevance = manual needs relevance_table".into()));
        }
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()?;
            if matches!(self.relevance, RelevanceMode::Manual | RelevanceMode::Heuristic) {
                return Err(Error::Config("synthetic data supports relevance = ring_rule or none".into()));
            }
        }
        if self.mining == Mining::DistanceWeighted && !self.normalize {
            return Err(Error::Config("distance_weighted mining needs normalize = true".into()));
        }
        Ok(())
    }

    /// Whether `loss` trains on one negative per anchor.
    pub fn single_negative_for(&self, loss: LossKind) -> bool {
        self.single_negative.unwrap_or_else(|| loss.single_negative_by_default())
    }
}

/// Parses a ring dataset description: `ring.groups`, `ring.inner_radius`,
/// `ring.train_points`, `ring.test_points_per_class` and `seed`, all optional.
pub fn parse_ring_spec(text: &str) -> Result<RingSpec> {
    let d = RingSpec::default();
    let (mut groups, mut radius, mut train, mut test, mut seed) =
        (d.n_groups, d.inner_radius, d.train_points, d.test_points_per_class, d.seed);
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
        match key {
            "ring.groups" => groups = parse_value(key, value)?,
            "ring.inner_radius" => radius = parse_value(key, value)?,
            "ring.train_points" => train = parse_value(key, value)?,
            "ring.test_points_per_class" => test = parse_value(key, value)?,
            "seed" => seed = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", lineno + 1))),
        }
    }
    let spec = RingSpec::new(groups, radius, train, test, seed);
    spec.validate()?;
    Ok(spec)
}
