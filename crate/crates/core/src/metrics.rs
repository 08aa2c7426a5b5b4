//! Retrieval ranking under the min-rank protocol, recall / median / mean
//! rank summaries, and the Wilcoxon signed-rank test.

use std::collections::BTreeSet;

use serde::de::Error as _;
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// 1-based rank of the first relevant gallery item, one per query.
pub type RankList = Vec<usize>;

/// Relevant gallery indices for each query.
pub type RelevanceMap = Vec<BTreeSet<usize>>;

/// Largest sample size for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 20;

/// Ranks each query row of `scores` (smaller is closer). The rank is one
/// plus the number of irrelevant items ordered before the closest relevant
/// item, where equal distances are ordered by gallery index.
pub fn rank_queries(scores: &Matrix, relevance: &RelevanceMap) -> Result<RankList> {
    if relevance.len() != scores.rows() {
        return Err(Error::DimensionMismatch { expected: scores.rows(), got: relevance.len() });
    }
    let g = scores.cols();
    let mut ranks = Vec::with_capacity(scores.rows());
    for (q, rel) in relevance.iter().enumerate() {
        let row = scores.row(q);
        if row.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("score row"));
        }
        if let Some(&bad) = rel.iter().find(|&&j| j >= g) {
            return Err(Error::IndexOutOfRange { index: bad, size: g });
        }
        let best = rel
            .iter()
            .copied()
            .min_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)))
            .ok_or(Error::NoRelevant(q))?;
        let ahead = (0..g)
            .filter(|j| !rel.contains(j))
            .filter(|&j| row[j] < row[best] || (row[j] == row[best] && j < best))
            .count();
        ranks.push(ahead + 1);
    }
    Ok(ranks)
}

/// Percentage of queries ranked at or above `k`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    if k == 0 {
        return Err(Error::InvalidProblem("k must be at least 1".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Median rank; even counts average the two middle ranks.
pub fn median_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(if n % 2 == 1 { sorted[n / 2] as f64 } else { (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0 })
}

pub fn mean_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Empty("rank list"));
    }
    Ok(ranks.iter().sum::<usize>() as f64 / ranks.len() as f64)
}

/// Recall at each of `ks` plus median and mean rank.
#[derive(Debug, Clone, PartialEq)]
pub struct RankSummary {
    pub recall: Vec<(usize, f64)>,
    pub median: f64,
    pub mean: f64,
}

impl RankSummary {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self> {
        let mut ks = ks.to_vec();
        ks.sort_unstable();
        ks.dedup();
        let recall = ks.iter().map(|&k| Ok((k, recall_at_k(ranks, k)?))).collect::<Result<Vec<_>>>()?;
        assert!(recall.windows(2).all(|w| w[0].1 <= w[1].1), "recall must be non-decreasing in k: {recall:?}");
        Ok(RankSummary { recall, median: median_rank(ranks)?, mean: mean_rank(ranks)? })
    }

    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

/// One evaluated (loss, seed, split, direction) cell. Serialized as a flat
/// object with `R@k` keys.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub loss: String,
    pub seed: u64,
    pub split: String,
    /// `t2v`, `v2t`, or `sym` when both directions coincide.
    pub direction: String,
    pub summary: RankSummary,
}

impl MetricRecord {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.summary.recall(k)
    }
}

impl Serialize for MetricRecord {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(6 + self.summary.recall.len()))?;
        m.serialize_entry("loss", &self.loss)?;
        m.serialize_entry("seed", &self.seed)?;
        m.serialize_entry("split", &self.split)?;
        m.serialize_entry("direction", &self.direction)?;
        for (k, r) in &self.summary.recall {
            m.serialize_entry(&format!("R@{k}"), r)?;
        }
        m.serialize_entry("MdR", &self.summary.median)?;
        m.serialize_entry("MnR", &self.summary.mean)?;
        m.end()
    }
}

impl<'de> Deserialize<'de> for MetricRecord {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
        let field = |name: &str| map.get(name).ok_or_else(|| D::Error::custom(format!("missing field `{name}`")));
        let text = |name: &str| {
            field(name)?.as_str().map(str::to_owned).ok_or_else(|| D::Error::custom(format!("{name} must be a string")))
        };
        let real = |name: &str| field(name)?.as_f64().ok_or_else(|| D::Error::custom(format!("{name} must be a number")));
        let seed = field("seed")?.as_u64().ok_or_else(|| D::Error::custom("seed must be an unsigned integer"))?;
        let mut recall = Vec::new();
        for (key, value) in &map {
            if let Some(k) = key.strip_prefix("R@") {
                let k: usize = k.parse().map_err(|_| D::Error::custom(format!("bad recall key {key}")))?;
                let r = value.as_f64().ok_or_else(|| D::Error::custom(format!("{key} must be a number")))?;
                recall.push((k, r));
            }
        }
        recall.sort_by_key(|(k, _)| *k);
        Ok(MetricRecord {
            loss: text("loss")?,
            seed,
            split: text("split")?,
            direction: text("direction")?,
            summary: RankSummary { recall, median: real("MdR")?, mean: real("MnR")? },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// min(W+, W-)
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Number of non-zero differences.
    pub n: usize,
    pub p_two_sided: f64,
    /// P(W+ <= observed) under the null; small when `x` tends to be below `y`.
    pub p_less: f64,
    /// P(W+ >= observed) under the null; small when `x` tends to be above `y`.
    pub p_greater: f64,
    pub exact: bool,
}

/// Mid-ranks of `values` (1-based), ties sharing the average of their positions.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Paired signed-rank test on `x - y`. Exact for up to [`EXACT_MAX_N`]
/// non-zero differences, normal approximation with continuity and tie
/// corrections beyond.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wilcoxon sample"));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::DegenerateSample);
    }
    let n = diffs.len();
    if n < 3 {
        return Err(Error::TooFewSamples(n));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = mid_ranks(&abs);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_less, p_greater, exact) = if n <= EXACT_MAX_N {
        let (le, ge) = exact_tails(&ranks, w_plus);
        (le, ge, true)
    } else {
        let mean = total / 2.0;
        let tie_term: f64 = tie_sizes(&abs).iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term;
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let sd = var.sqrt();
        let le = normal.cdf((w_plus - mean + 0.5) / sd);
        let ge = normal.sf((w_plus - mean - 0.5) / sd);
        (le, ge, false)
    };
    Ok(WilcoxonResult {
        statistic: w_plus.min(w_minus),
        w_plus,
        w_minus,
        n,
        p_two_sided: (2.0 * p_less.min(p_greater)).min(1.0),
        p_less,
        p_greater,
        exact,
    })
}

fn tie_sizes(values: &[f64]) -> Vec<usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.chunk_by(|a, b| a == b).map(<[f64]>::len).filter(|&t| t > 1).collect()
}

/// Null tail probabilities of W+ by counting sign assignments. Mid-ranks
/// are multiples of 1/2, so doubled ranks index an integer table.
fn exact_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let denom = 2f64.powi(ranks.len() as i32);
    let obs = (2.0 * w_plus).round() as usize;
    let le: f64 = counts[..=obs].iter().sum();
    let ge: f64 = counts[obs..].iter().sum();
    (le / denom, ge / denom)
}
