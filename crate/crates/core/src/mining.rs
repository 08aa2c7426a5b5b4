//! Relevance judgements, quadruplet set construction and negative samplers.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::QuadrupletSets;
use crate::numerics::{Matrix, Metric, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceLabel {
    Positive,
    Partial,
    Negative,
}

impl RelevanceLabel {
    pub fn name(self) -> &'static str {
        match self {
            RelevanceLabel::Positive => "positive",
            RelevanceLabel::Partial => "partial",
            RelevanceLabel::Negative => "negative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceSource {
    Manual,
    Heuristic,
}

/// A caption with its noun and verb lemmas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    pub video_id: String,
    pub language: String,
    pub text: String,
    /// `None` when the caption carries no noun annotation.
    pub nouns: Option<BTreeSet<String>>,
    pub verbs: Option<BTreeSet<String>>,
    pub features: Vec<f64>,
}

impl CaptionRecord {
    /// Test and fixture helper: builds an annotated caption without features.
    pub fn annotated(id: &str, video_id: &str, text: &str, nouns: &[&str], verbs: &[&str]) -> Self {
        CaptionRecord {
            id: id.into(),
            video_id: video_id.into(),
            language: "en".into(),
            text: text.into(),
            nouns: Some(nouns.iter().map(|s| s.to_string()).collect()),
            verbs: Some(verbs.iter().map(|s| s.to_string()).collect()),
            features: Vec::new(),
        }
    }
}

fn lowered(set: &BTreeSet<String>) -> BTreeSet<String> {
    set.iter().map(|s| s.to_lowercase()).collect()
}

fn annotations(c: &CaptionRecord) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    match (&c.nouns, &c.verbs) {
        (Some(n), Some(v)) => Ok((lowered(n), lowered(v))),
        _ => Err(Error::AnnotationMissing(c.id.clone())),
    }
}

/// Noun-verb judgement between two captions.
///
/// Identical noun and verb sets give `Positive`; exactly one identical set
/// gives `Partial`; no shared noun and no shared verb gives `Negative`.
/// Anything else matches no rule and returns `None`.
pub fn noun_verb_judgement(query: &CaptionRecord, candidate: &CaptionRecord) -> Result<Option<RelevanceLabel>> {
    if query.id == candidate.id {
        return Err(Error::SelfPair(query.id.clone()));
    }
    let (qn, qv) = annotations(query)?;
    let (cn, cv) = annotations(candidate)?;
    let same_nouns = qn == cn;
    let same_verbs = qv == cv;
    Ok(match (same_nouns, same_verbs) {
        (true, true) => Some(RelevanceLabel::Positive),
        (true, false) | (false, true) => Some(RelevanceLabel::Partial),
        (false, false) if qn.is_disjoint(&cn) && qv.is_disjoint(&cv) => Some(RelevanceLabel::Negative),
        _ => None,
    })
}

/// [`noun_verb_judgement`] with unmatched pairs defaulting to `Negative`.
pub fn noun_verb_label(query: &CaptionRecord, candidate: &CaptionRecord) -> Result<RelevanceLabel> {
    Ok(noun_verb_judgement(query, candidate)?.unwrap_or(RelevanceLabel::Negative))
}

/// Sparse directed map `(query, candidate) → label`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelevanceTable {
    entries: BTreeMap<(String, String), (RelevanceLabel, RelevanceSource)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RelevanceLine {
    query: String,
    candidate: String,
    label: RelevanceLabel,
    source: RelevanceSource,
}

impl RelevanceTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts a judgement. Re-inserting the same label is a no-op; a
    /// different label for an existing pair is a collision.
    pub fn insert(&mut self, query: &str, candidate: &str, label: RelevanceLabel, source: RelevanceSource) -> Result<()> {
        if query == candidate {
            return Err(Error::SelfPair(query.into()));
        }
        let key = (query.to_string(), candidate.to_string());
        match self.entries.get(&key) {
            Some((existing, _)) if *existing != label => Err(Error::LabelCollision(key.0, key.1)),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(key, (label, source));
                Ok(())
            }
        }
    }

    pub fn get(&self, query: &str, candidate: &str) -> Option<RelevanceLabel> {
        self.entries.get(&(query.to_string(), candidate.to_string())).map(|(l, _)| *l)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, RelevanceLabel, RelevanceSource)> {
        self.entries.iter().map(|((q, c), (l, s))| (q.as_str(), c.as_str(), *l, *s))
    }

    /// Pairs annotated in one direction only, or with different labels in
    /// the two directions.
    pub fn asymmetric_pairs(&self) -> Vec<(String, String)> {
        self.entries
            .iter()
            .filter(|((q, c), (l, _))| self.get(c, q) != Some(*l))
            .map(|((q, c), _)| (q.clone(), c.clone()))
            .collect()
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self> {
        let mut table = RelevanceTable::new();
        for (k, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RelevanceLine =
                serde_json::from_str(&line).map_err(|e| Error::Schema { line: k + 1, msg: e.to_string() })?;
            table.insert(&rec.query, &rec.candidate, rec.label, rec.source).map_err(|e| Error::Schema {
                line: k + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::read_jsonl(std::io::BufReader::new(file))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for (q, c, label, source) in self.iter() {
            let line = RelevanceLine { query: q.into(), candidate: c.into(), label, source };
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
        Ok(())
    }
}

/// Indices of the `k` captions in `pool` most cosine-similar to `query`,
/// skipping captions of the query's own video.
pub fn shortlist_candidates(query: &CaptionRecord, pool: &[CaptionRecord], k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = pool
        .iter()
        .enumerate()
        .filter(|(_, c)| c.video_id != query.video_id && c.features.len() == query.features.len())
        .map(|(i, c)| (Metric::Cosine.eval(&query.features, &c.features), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Summary of a heuristic labelling pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeuristicAudit {
    pub labelled: usize,
    /// Pairs that matched no noun-verb rule; they default to negative.
    pub unmatched: Vec<(String, String)>,
}

/// Labels each caption against its top-`k` shortlist (or against every
/// other-video caption when `k` is `None`) with the noun-verb heuristic.
pub fn build_heuristic_table(captions: &[CaptionRecord], k: Option<usize>) -> Result<(RelevanceTable, HeuristicAudit)> {
    let mut table = RelevanceTable::new();
    let mut audit = HeuristicAudit::default();
    for q in captions {
        let candidates: Vec<usize> = match k {
            Some(k) => shortlist_candidates(q, captions, k),
            None => (0..captions.len()).filter(|&i| captions[i].video_id != q.video_id).collect(),
        };
        for i in candidates {
            let c = &captions[i];
            match noun_verb_judgement(q, c)? {
                Some(label) => {
                    table.insert(&q.id, &c.id, label, RelevanceSource::Heuristic)?;
                    audit.labelled += 1;
                }
                None => audit.unmatched.push((q.id.clone(), c.id.clone())),
            }
        }
    }
    Ok((table, audit))
}

/// Assigns every pair of an `n`-item batch from a labelling function; the
/// diagonal is always positive.
pub fn sets_from_labels(n: usize, mut label: impl FnMut(usize, usize) -> RelevanceLabel) -> QuadrupletSets {
    let mut sets = QuadrupletSets::default();
    for i in 0..n {
        for j in 0..n {
            let l = if i == j { RelevanceLabel::Positive } else { label(i, j) };
            match l {
                RelevanceLabel::Positive => sets.s_plus.insert((i, j)),
                RelevanceLabel::Partial => sets.s_partial.insert((i, j)),
                RelevanceLabel::Negative => sets.s_minus.insert((i, j)),
            };
        }
    }
    sets
}

/// Builds `S⁺`, `S⁻`, `S~` for a batch of `(video_id, caption_id)` matches.
///
/// Pairs sharing a video are positive; other pairs take the table label of
/// `(caption_i, caption_j)` and default to negative when absent. Only the
/// annotated direction is used.
pub fn build_quadruplet_sets(batch: &[(String, String)], table: &RelevanceTable) -> Result<QuadrupletSets> {
    let mut seen = BTreeSet::new();
    for (_, caption) in batch {
        if !seen.insert(caption) {
            return Err(Error::DuplicateId(caption.clone()));
        }
    }
    Ok(sets_from_labels(batch.len(), |i, j| {
        if batch[i].0 == batch[j].0 {
            RelevanceLabel::Positive
        } else {
            table.get(&batch[i].1, &batch[j].1).unwrap_or(RelevanceLabel::Negative)
        }
    }))
}

fn row_negatives(d: &Matrix, row: usize, sets: &QuadrupletSets) -> Result<Vec<usize>> {
    if row >= d.rows() {
        return Err(Error::IndexOutOfRange { index: row, size: d.rows() });
    }
    let negs = sets.negatives_of(row);
    if negs.is_empty() {
        return Err(Error::EmptyNegatives(row));
    }
    if let Some(&j) = negs.iter().find(|&&j| j >= d.cols()) {
        return Err(Error::IndexOutOfRange { index: j, size: d.cols() });
    }
    Ok(negs)
}

/// Closest negative of `row`; ties go to the lower index.
pub fn hardest_negative(d: &Matrix, row: usize, sets: &QuadrupletSets) -> Result<usize> {
    let negs = row_negatives(d, row, sets)?;
    let mut best = negs[0];
    for &j in &negs[1..] {
        if d[(row, j)] < d[(row, best)] {
            best = j;
        }
    }
    Ok(best)
}

/// Uniform draw among negatives with `d_pos < d < d_pos + margin`, falling
/// back to the hardest negative when that band is empty.
pub fn semi_hard_negative(
    d: &Matrix,
    row: usize,
    sets: &QuadrupletSets,
    d_pos: f64,
    margin: f64,
    rng: &mut SeededRng,
) -> Result<usize> {
    let negs = row_negatives(d, row, sets)?;
    let band: Vec<usize> = negs.into_iter().filter(|&j| d_pos < d[(row, j)] && d[(row, j)] < d_pos + margin).collect();
    if band.is_empty() {
        return hardest_negative(d, row, sets);
    }
    Ok(band[rng.index(band.len())])
}

pub const DW_MIN_DISTANCE: f64 = 0.05;
pub const DW_MAX_DISTANCE: f64 = 1.99;

/// Unnormalized log sampling weight `log min(clamp, 1/q(d))`, where `q` is the
/// density of pairwise distances between uniform points on the unit sphere
/// in `dim` dimensions.
pub fn distance_weight_log(d: f64, dim: usize, clamp: f64) -> f64 {
    let d = d.clamp(DW_MIN_DISTANCE, DW_MAX_DISTANCE);
    let dim = dim as f64;
    let log_q = (dim - 2.0) * d.ln() + 0.5 * (dim - 3.0) * (1.0 - 0.25 * d * d).ln();
    (-log_q).min(clamp.ln())
}

/// Sampling probabilities of the negatives of `row` under distance-weighted
/// sampling, in the order of `sets.negatives_of(row)`.
pub fn distance_weights(d: &Matrix, row: usize, sets: &QuadrupletSets, dim: usize, clamp: f64) -> Result<Vec<(usize, f64)>> {
    if dim < 3 {
        return Err(Error::Config(format!("distance-weighted sampling needs dim >= 3, got {dim}")));
    }
    if !(clamp > 0.0) {
        return Err(Error::Config(format!("clamp must be positive, got {clamp}")));
    }
    let negs = row_negatives(d, row, sets)?;
    let logs: Vec<f64> = negs.iter().map(|&j| distance_weight_log(d[(row, j)], dim, clamp)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(negs.into_iter().zip(w.into_iter().map(|x| x / total)).collect())
}

/// Draws a negative with probability proportional to `min(clamp, 1/q(d))`.
/// Distances should come from unit-normalized embeddings.
pub fn distance_weighted_negative(
    d: &Matrix,
    row: usize,
    sets: &QuadrupletSets,
    dim: usize,
    clamp: f64,
    rng: &mut SeededRng,
) -> Result<usize> {
    let weights = distance_weights(d, row, sets, dim, clamp)?;
    let probs: Vec<f64> = weights.iter().map(|(_, w)| *w).collect();
    let k = rng.weighted_index(&probs).ok_or(Error::EmptyNegatives(row))?;
    Ok(weights[k].0)
}
