//! Run reports, aggregation across seeds and paired significance tests.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::MarginConfig;
use crate::metrics::{wilcoxon_signed_rank, MetricRecord, RankSummary};

use super::config::{ExperimentConfig, LossKind};
use super::dataset::DatasetMode;

/// Training trace and evaluation of one (loss, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    /// Margins actually used, after optional tuning.
    pub margins: MarginConfig,
    pub records: Vec<MetricRecord>,
    pub epoch_losses: Vec<f64>,
    pub sinkhorn_solves: usize,
    pub sinkhorn_unconverged: usize,
    pub aborted: Option<String>,
}

/// Mean of each metric over the completed seeds of one loss and direction.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRecord {
    pub loss: String,
    pub split: String,
    pub direction: String,
    pub seeds: usize,
    pub summary: RankSummary,
}

impl Serialize for AggregateRecord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(6 + self.summary.recall.len()))?;
        m.serialize_entry("loss", &self.loss)?;
        m.serialize_entry("split", &self.split)?;
        m.serialize_entry("direction", &self.direction)?;
        m.serialize_entry("seeds", &self.seeds)?;
        for (k, r) in &self.summary.recall {
            m.serialize_entry(&format!("R@{k}"), r)?;
        }
        m.serialize_entry("MdR", &self.summary.median)?;
        m.serialize_entry("MnR", &self.summary.mean)?;
        m.end()
    }
}

impl<'de> Deserialize<'de> for AggregateRecord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let mut map = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
        let seeds = map.remove("seeds").and_then(|v| v.as_u64()).ok_or_else(|| D::Error::custom("missing seeds"))?;
        map.insert("seed".into(), 0.into());
        let rec: MetricRecord = serde_json::from_value(serde_json::Value::Object(map)).map_err(D::Error::custom)?;
        Ok(AggregateRecord {
            loss: rec.loss,
            split: rec.split,
            direction: rec.direction,
            seeds: seeds as usize,
            summary: rec.summary,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRun {
    pub loss: LossKind,
    pub seeds: Vec<SeedRun>,
    pub aggregates: Vec<AggregateRecord>,
}

impl LossRun {
    pub fn new(loss: LossKind, seeds: Vec<SeedRun>) -> Self {
        let aggregates = aggregate(&seeds);
        LossRun { loss, seeds, aggregates }
    }

    pub fn aggregate(&self, direction: &str) -> Option<&AggregateRecord> {
        self.aggregates.iter().find(|a| a.direction == direction)
    }

    /// Per-seed record of `direction`, for seeds that completed.
    pub fn records(&self, direction: &str) -> Vec<&MetricRecord> {
        self.seeds.iter().flat_map(|s| s.records.iter().filter(|r| r.direction == direction)).collect()
    }

    pub fn directions(&self) -> Vec<String> {
        let mut dirs: Vec<String> = Vec::new();
        for r in self.seeds.iter().flat_map(|s| &s.records) {
            if !dirs.contains(&r.direction) {
                dirs.push(r.direction.clone());
            }
        }
        dirs
    }
}

/// Per-direction means over every seed that produced a record, folded in
/// seed order.
pub fn aggregate(seeds: &[SeedRun]) -> Vec<AggregateRecord> {
    let mut out: Vec<AggregateRecord> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for r in seeds.iter().flat_map(|s| &s.records) {
        match out.iter().position(|a| a.direction == r.direction && a.split == r.split) {
            Some(i) => {
                let a = &mut out[i];
                for ((_, acc), (_, v)) in a.summary.recall.iter_mut().zip(&r.summary.recall) {
                    *acc += v;
                }
                a.summary.median += r.summary.median;
                a.summary.mean += r.summary.mean;
                counts[i] += 1;
            }
            None => {
                out.push(AggregateRecord {
                    loss: r.loss.clone(),
                    split: r.split.clone(),
                    direction: r.direction.clone(),
                    seeds: 0,
                    summary: r.summary.clone(),
                });
                counts.push(1);
            }
        }
    }
    for (a, n) in out.iter_mut().zip(counts) {
        let n_f = n as f64;
        a.seeds = n;
        for (_, v) in a.summary.recall.iter_mut() {
            *v /= n_f;
        }
        a.summary.median /= n_f;
        a.summary.mean /= n_f;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignificanceStatus {
    Ok,
    /// Every per-seed difference is zero.
    Degenerate,
    /// Fewer than three non-zero differences.
    TooFewSamples,
}

/// Paired signed-rank test of per-seed median ranks, `a` against `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub a: String,
    pub b: String,
    pub direction: String,
    pub seeds: Vec<u64>,
    pub status: SignificanceStatus,
    pub statistic: Option<f64>,
    pub p_two_sided: Option<f64>,
    /// Small when `a` has the lower (better) median ranks.
    pub p_a_better: Option<f64>,
    pub p_b_better: Option<f64>,
    /// Loss with the lower mean MdR, `none` on a tie.
    pub better: String,
}

/// Pairs the per-seed MdR of two runs in one direction.
pub fn paired_mdr_test(a_name: &str, a: &LossRun, b_name: &str, b: &LossRun, direction: &str) -> Result<Significance> {
    let ra = a.records(direction);
    let rb = b.records(direction);
    let seeds_a: Vec<u64> = ra.iter().map(|r| r.seed).collect();
    let seeds_b: Vec<u64> = rb.iter().map(|r| r.seed).collect();
    if seeds_a.iter().collect::<BTreeSet<_>>() != seeds_b.iter().collect::<BTreeSet<_>>() {
        return Err(Error::SeedMismatch);
    }
    let x: Vec<f64> = ra.iter().map(|r| r.summary.median).collect();
    let y: Vec<f64> = seeds_a
        .iter()
        .map(|s| rb.iter().find(|r| r.seed == *s).unwrap().summary.median)
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let better = match mean(&x).total_cmp(&mean(&y)) {
        std::cmp::Ordering::Less => a_name.to_string(),
        std::cmp::Ordering::Greater => b_name.to_string(),
        std::cmp::Ordering::Equal => "none".to_string(),
    };
    let mut sig = Significance {
        a: a_name.into(),
        b: b_name.into(),
        direction: direction.into(),
        seeds: seeds_a,
        status: SignificanceStatus::Ok,
        statistic: None,
        p_two_sided: None,
        p_a_better: None,
        p_b_better: None,
        better,
    };
    match wilcoxon_signed_rank(&x, &y) {
        Ok(w) => {
            sig.statistic = Some(w.statistic);
            sig.p_two_sided = Some(w.p_two_sided);
            sig.p_a_better = Some(w.p_less);
            sig.p_b_better = Some(w.p_greater);
        }
        Err(Error::DegenerateSample) => sig.status = SignificanceStatus::Degenerate,
        Err(Error::TooFewSamples(_)) => sig.status = SignificanceStatus::TooFewSamples,
        Err(e) => return Err(e),
    }
    Ok(sig)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub mode: DatasetMode,
    pub runs: Vec<LossRun>,
    pub significance: Vec<Significance>,
}

impl RunReport {
    pub fn run(&self, loss: LossKind) -> Option<&LossRun> {
        self.runs.iter().find(|r| r.loss == loss)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Aligned table of aggregate metrics, one row per loss and direction,
    /// followed by the significance tests.
    pub fn table(&self) -> String {
        let ks: Vec<usize> = {
            let mut ks = self.config.eval_ks.clone();
            ks.sort_unstable();
            ks.dedup();
            ks
        };
        let mut out = String::new();
        let _ = write!(out, "{:<12} {:<5} {:>5}", "Method", "Dir", "Seeds");
        for k in &ks {
            let _ = write!(out, " {:>8}", format!("R@{k}"));
        }
        let _ = writeln!(out, " {:>8} {:>8}", "MdR", "MnR");
        for run in &self.runs {
            for a in &run.aggregates {
                let _ = write!(out, "{:<12} {:<5} {:>5}", run.loss.name().to_uppercase(), a.direction, a.seeds);
                for k in &ks {
                    match a.summary.recall(*k) {
                        Some(r) => write!(out, " {r:>8.2}"),
                        None => write!(out, " {:>8}", "-"),
                    }
                    .unwrap();
                }
                let _ = writeln!(out, " {:>8.2} {:>8.2}", a.summary.median, a.summary.mean);
            }
            let aborted = run.seeds.iter().filter(|s| s.aborted.is_some()).count();
            if aborted > 0 {
                let _ = writeln!(out, "  ({aborted} seed(s) of {} aborted)", run.loss.name());
            }
        }
        if !self.significance.is_empty() {
            let _ = writeln!(out);
            out.push_str(&significance_table(&self.significance));
        }
        out
    }
}

pub fn significance_table(tests: &[Significance]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:<5} {:>8} {:>10} {:>10} {:>10}  better", "Pair (MdR)", "Dir", "W", "p", "p(a<b)", "p(b<a)");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for s in tests {
        let pair = format!("{} vs {}", s.a, s.b);
        match s.status {
            SignificanceStatus::Ok => {
                let _ = writeln!(
                    out,
                    "{:<16} {:<5} {:>8} {:>10} {:>10} {:>10}  {}",
                    pair,
                    s.direction,
                    s.statistic.map_or("-".into(), |w| format!("{w}")),
                    fmt(s.p_two_sided),
                    fmt(s.p_a_better),
                    fmt(s.p_b_better),
                    s.better
                );
            }
            SignificanceStatus::Degenerate => {
                let _ = writeln!(out, "{pair:<16} {:<5} identical median ranks on every seed", s.direction);
            }
            SignificanceStatus::TooFewSamples => {
                let _ = writeln!(out, "{pair:<16} {:<5} too few differing seeds to test", s.direction);
            }
        }
    }
    out
}

/// Significance of every pair of runs in the report, per direction.
pub fn within_report_tests(runs: &[LossRun]) -> Result<Vec<Significance>> {
    let mut out = Vec::new();
    for (i, a) in runs.iter().enumerate() {
        for b in &runs[i + 1..] {
            for dir in a.directions() {
                if b.directions().contains(&dir) {
                    out.push(paired_mdr_test(a.loss.name(), a, b.loss.name(), b, &dir)?);
                }
            }
        }
    }
    Ok(out)
}

/// Compares every run of `a` with every run of `b`. The reports must share
/// the dataset and seeds.
pub fn compare_reports(a: &RunReport, b: &RunReport) -> Result<Vec<Significance>> {
    if a.config.dataset != b.config.dataset {
        return Err(Error::Config("reports were produced on different datasets".into()));
    }
    let mut out = Vec::new();
    for ra in &a.runs {
        for rb in &b.runs {
            for dir in ra.directions() {
                if rb.directions().contains(&dir) {
                    out.push(paired_mdr_test(ra.loss.name(), ra, rb.loss.name(), rb, &dir)?);
                }
            }
        }
    }
    Ok(out)
}
