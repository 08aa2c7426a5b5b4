//! Minibatch training and retrieval evaluation.

use std::collections::BTreeMap;

use crate::encoder::{
    adam_step, init_params, sgd_step, AdamConfig, AdamState, ActivationTrace, EncoderParams, EncoderSpec, GradientSet,
};
use crate::error::{Error, Result};
use crate::losses::{
    bidirectional_max_margin_over, contrastive_batch_loss, ot_masked_cost, ot_weighted_loss_with_plan,
    partial_order_loss, triplet_batch_loss, MarginConfig, QuadrupletSets,
};
use crate::metrics::{rank_queries, RankSummary, RelevanceMap};
use crate::mining::{
    build_quadruplet_sets, distance_weighted_negative, hardest_negative, semi_hard_negative, sets_from_labels,
    RelevanceLabel, RelevanceTable,
};
use crate::numerics::{
    normalize_l2, normalize_l2_backward, pairwise_distances, pairwise_distances_backward, Matrix,
    Metric, SeededRng,
};
use crate::sinkhorn::{solve_sinkhorn, SinkhornOptions, TransportPlan, TransportProblem};
use crate::synthetic::ring_relevance_in;

use super::config::{ExperimentConfig, LossKind, Mining, Optimizer, Reduction};
use super::dataset::ring_class;

/// One side of the retrieval problem: feature rows with their match keys
/// (class label or video id) and ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Side {
    pub features: Matrix,
    pub keys: Vec<String>,
    pub ids: Vec<String>,
}

impl Side {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Side {
        let rows: Vec<&[f64]> = idx.iter().map(|&i| self.features.row(i)).collect();
        Side {
            features: Matrix::from_rows(&rows).unwrap_or_else(|_| Matrix::zeros(0, self.features.cols())),
            keys: idx.iter().map(|&i| self.keys[i].clone()).collect(),
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    fn rows(&self, idx: impl Iterator<Item = usize>) -> Matrix {
        let rows: Vec<&[f64]> = idx.map(|i| self.features.row(i)).collect();
        Matrix::from_rows(&rows).expect("rows share one width")
    }
}

/// How a batch pair `(i, j)` is judged.
#[derive(Debug, Clone, PartialEq)]
pub enum Labeler {
    /// Same key positive, everything else negative.
    SameKey,
    /// Disc/annulus rule on `class-k` keys.
    Ring { n_groups: usize },
    /// Same video positive, otherwise the caption-level table entry.
    Table(RelevanceTable),
}

/// Training pairs are drawn either by sampling a same-key partner for each
/// anchor, or from a fixed list of `(left, right)` matches.
#[derive(Debug, Clone, PartialEq)]
pub enum PairSource {
    Sampled { by_key: BTreeMap<String, Vec<usize>> },
    Fixed(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub left: Side,
    pub right: Side,
    pub pairs: PairSource,
    pub labeler: Labeler,
}

impl TrainingSet {
    /// Both sides are the same labelled points; each anchor is paired with
    /// another point of its class.
    pub fn unimodal(points: Side, labeler: Labeler) -> Self {
        let mut by_key: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, k) in points.keys.iter().enumerate() {
            by_key.entry(k.clone()).or_default().push(i);
        }
        TrainingSet { left: points.clone(), right: points, pairs: PairSource::Sampled { by_key }, labeler }
    }

    /// Videos on the left, captions on the right, one pair per caption.
    pub fn cross_modal(videos: Side, captions: Side, labeler: Labeler) -> Result<Self> {
        let index: BTreeMap<&str, usize> = videos.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let pairs = captions
            .keys
            .iter()
            .enumerate()
            .map(|(c, v)| {
                index.get(v.as_str()).map(|&vi| (vi, c)).ok_or_else(|| Error::InvalidProblem(format!("caption has unknown video {v}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainingSet { left: videos, right: captions, pairs: PairSource::Fixed(pairs), labeler })
    }

    pub fn num_anchors(&self) -> usize {
        match &self.pairs {
            PairSource::Sampled { .. } => self.left.len(),
            PairSource::Fixed(p) => p.len(),
        }
    }

    /// Shuffled batches of `(left, right)` pairs for one epoch. A trailing
    /// partial batch is dropped unless it is the only batch.
    pub fn epoch_batches(&self, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<(usize, usize)>> {
        let mut order: Vec<usize> = (0..self.num_anchors()).collect();
        rng.shuffle(&mut order);
        let full = order.len() >= batch_size;
        let mut out = Vec::new();
        for chunk in order.chunks(batch_size) {
            if chunk.len() < 2 || (full && chunk.len() < batch_size) {
                continue;
            }
            let batch = chunk
                .iter()
                .map(|&a| match &self.pairs {
                    PairSource::Sampled { by_key } => {
                        let members = &by_key[&self.left.keys[a]];
                        let others: Vec<usize> = members.iter().copied().filter(|&j| j != a).collect();
                        let partner = if others.is_empty() { a } else { others[rng.index(others.len())] };
                        (a, partner)
                    }
                    PairSource::Fixed(pairs) => pairs[a],
                })
                .collect();
            out.push(batch);
        }
        out
    }

    /// Positive, partial and negative sets of a batch.
    pub fn batch_sets(&self, batch: &[(usize, usize)]) -> Result<QuadrupletSets> {
        match &self.labeler {
            Labeler::SameKey => Ok(sets_from_labels(batch.len(), |i, j| {
                if self.left.keys[batch[i].0] == self.right.keys[batch[j].1] {
                    RelevanceLabel::Positive
                } else {
                    RelevanceLabel::Negative
                }
            })),
            Labeler::Ring { n_groups } => {
                let left: Vec<u32> = batch.iter().map(|p| ring_class(&self.left.keys[p.0])).collect::<Result<_>>()?;
                let right: Vec<u32> = batch.iter().map(|p| ring_class(&self.right.keys[p.1])).collect::<Result<_>>()?;
                let mut err = None;
                let sets = sets_from_labels(batch.len(), |i, j| {
                    ring_relevance_in(left[i], right[j], *n_groups).unwrap_or_else(|e| {
                        err = Some(e);
                        RelevanceLabel::Negative
                    })
                });
                err.map_or(Ok(sets), Err)
            }
            Labeler::Table(table) => {
                let ids: Vec<(String, String)> =
                    batch.iter().map(|&(v, c)| (self.left.ids[v].clone(), self.right.ids[c].clone())).collect();
                build_quadruplet_sets(&ids, table)
            }
        }
    }
}

/// Encoders for the two sides; `right` is `None` when they share weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub left: EncoderParams,
    pub right: Option<EncoderParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub left: GradientSet,
    pub right: Option<GradientSet>,
}

impl ModelGrads {
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.left.to_flat();
        if let Some(r) = &self.right {
            v.extend(r.to_flat());
        }
        v
    }
}

impl Model {
    pub fn init(left: &EncoderSpec, right: Option<&EncoderSpec>, rng: &mut SeededRng) -> Result<Self> {
        let l = init_params(left, rng)?;
        let r = right.map(|s| init_params(s, rng)).transpose()?;
        if let Some(r) = &r {
            if r.output_dim() != l.output_dim() {
                return Err(Error::DimensionMismatch { expected: l.output_dim(), got: r.output_dim() });
            }
        }
        Ok(Model { left: l, right: r })
    }

    pub fn right_encoder(&self) -> &EncoderParams {
        self.right.as_ref().unwrap_or(&self.left)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.left.to_flat();
        if let Some(r) = &self.right {
            v.extend(r.to_flat());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.left.num_params();
        let total = n + self.right.as_ref().map_or(0, |r| r.num_params());
        if flat.len() != total {
            return Err(Error::DimensionMismatch { expected: total, got: flat.len() });
        }
        self.left.set_flat(&flat[..n])?;
        if let Some(r) = &mut self.right {
            r.set_flat(&flat[n..])?;
        }
        Ok(())
    }

    /// Embeddings of `xs` through one side's encoder, optionally L2-normalized.
    pub fn embed(&self, right_side: bool, xs: &Matrix, normalize: bool) -> Result<Matrix> {
        let enc = if right_side { self.right_encoder() } else { &self.left };
        let mut out = enc.embed_batch(xs)?;
        if normalize {
            for i in 0..out.rows() {
                let n = normalize_l2(out.row(i))?;
                out.row_mut(i).copy_from_slice(&n);
            }
        }
        Ok(out)
    }
}

/// Loss-independent settings of a batch loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub kind: LossKind,
    pub margins: MarginConfig,
    pub metric: Metric,
    pub normalize: bool,
    pub sinkhorn: SinkhornOptions,
}

/// Forward pass of a batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    left_raw: Matrix,
    left_emb: Matrix,
    left_traces: Vec<ActivationTrace>,
    right_raw: Matrix,
    right_emb: Matrix,
    right_traces: Vec<ActivationTrace>,
    /// `d[(i, j)] = dist(left_i, right_j)`
    pub d: Matrix,
}

fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for i in 0..m.rows() {
        let n = normalize_l2(m.row(i))?;
        out.row_mut(i).copy_from_slice(&n);
    }
    Ok(out)
}

pub fn forward(model: &Model, xa: &Matrix, xb: &Matrix, metric: Metric, normalize: bool) -> Result<Forward> {
    let (left_raw, left_traces) = model.left.forward_batch(xa)?;
    let (right_raw, right_traces) = model.right_encoder().forward_batch(xb)?;
    let (left_emb, right_emb) =
        if normalize { (normalize_rows(&left_raw)?, normalize_rows(&right_raw)?) } else { (left_raw.clone(), right_raw.clone()) };
    let d = pairwise_distances(&left_emb, &right_emb, metric)?.values;
    Ok(Forward { left_raw, left_emb, left_traces, right_raw, right_emb, right_traces, d })
}

/// Result of [`loss_on_batch`]: value, `∂L/∂D` and the transport plan when
/// one was solved.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub value: f64,
    pub d_grad: Matrix,
    pub plan: Option<TransportPlan>,
}

/// Evaluates `settings.kind` on a distance matrix whose sets are already
/// mined. For the transport loss a given `plan` replaces the solved one.
pub fn loss_on_batch(d: &Matrix, sets: &QuadrupletSets, settings: &LossSettings, plan: Option<&Matrix>) -> Result<BatchLoss> {
    let m = &settings.margins;
    let plain = |out: crate::losses::LossOutput| BatchLoss { value: out.value, d_grad: out.d_grad, plan: None };
    Ok(match settings.kind {
        LossKind::Po => plain(partial_order_loss(d, sets, m)?),
        LossKind::Mm => {
            let pairs: Vec<(usize, usize)> = sets.s_minus.iter().copied().collect();
            plain(bidirectional_max_margin_over(d, m.m, &pairs)?)
        }
        LossKind::Contrastive => plain(contrastive_batch_loss(d, sets, m.eps)?),
        LossKind::Triplet => {
            let negatives: Vec<(usize, usize)> = sets.s_minus.iter().copied().collect();
            plain(triplet_batch_loss(d, &negatives, m.eps)?)
        }
        LossKind::Ot => match plan {
            Some(p) => plain(ot_weighted_loss_with_plan(d, sets, p, m.m)?),
            None => {
                let cost = ot_masked_cost(d, sets, m)?;
                let solved = solve_sinkhorn(&TransportProblem::uniform(cost, m.lambda), settings.sinkhorn)?;
                let out = ot_weighted_loss_with_plan(d, sets, &solved.plan, m.m)?;
                BatchLoss { value: out.value, d_grad: out.d_grad, plan: Some(solved) }
            }
        },
    })
}

/// Chains `∂L/∂D` back to encoder parameters.
pub fn backward(model: &Model, fwd: &Forward, d_grad: &Matrix, metric: Metric, normalize: bool) -> Result<ModelGrads> {
    let (mut ga, mut gb) = pairwise_distances_backward(&fwd.left_emb, &fwd.right_emb, metric, d_grad)?;
    if normalize {
        for i in 0..ga.rows() {
            let g = normalize_l2_backward(fwd.left_raw.row(i), ga.row(i))?;
            ga.row_mut(i).copy_from_slice(&g);
        }
        for i in 0..gb.rows() {
            let g = normalize_l2_backward(fwd.right_raw.row(i), gb.row(i))?;
            gb.row_mut(i).copy_from_slice(&g);
        }
    }
    let left = model.left.backward_batch(&fwd.left_traces, &ga)?;
    match &model.right {
        Some(r) => Ok(ModelGrads { left, right: Some(r.backward_batch(&fwd.right_traces, &gb)?) }),
        None => {
            let mut shared = left;
            shared.add_assign(&model.left.backward_batch(&fwd.right_traces, &gb)?);
            Ok(ModelGrads { left: shared, right: None })
        }
    }
}

/// Loss and parameter gradient of one batch with fixed sets. Used by
/// training and by gradient checks; `plan` pins the transport weights.
pub fn batch_loss_and_grad(
    model: &Model,
    xa: &Matrix,
    xb: &Matrix,
    sets: &QuadrupletSets,
    settings: &LossSettings,
    plan: Option<&Matrix>,
) -> Result<(BatchLoss, ModelGrads)> {
    let fwd = forward(model, xa, xb, settings.metric, settings.normalize)?;
    let loss = loss_on_batch(&fwd.d, sets, settings, plan)?;
    let grads = backward(model, &fwd, &loss.d_grad, settings.metric, settings.normalize)?;
    Ok((loss, grads))
}

/// How negatives are picked for one loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NegativePolicy {
    pub mining: Mining,
    /// Keep one negative per anchor even under default mining.
    pub single: bool,
    /// Width of the semi-hard band.
    pub margin: f64,
    pub dw_clamp: f64,
    pub embed_dim: usize,
}

/// Restricts each row's negatives according to `policy`. Rows without
/// negatives are left untouched.
pub fn mine_negatives(d: &Matrix, sets: &QuadrupletSets, policy: &NegativePolicy, rng: &mut SeededRng) -> Result<QuadrupletSets> {
    if policy.mining == Mining::Default && !policy.single {
        return Ok(sets.clone());
    }
    let mut out = sets.clone();
    out.s_minus.clear();
    for i in 0..d.rows() {
        let negs = sets.negatives_of(i);
        if negs.is_empty() {
            continue;
        }
        let j = match policy.mining {
            Mining::Default => negs[rng.index(negs.len())],
            Mining::Hardest => hardest_negative(d, i, sets)?,
            Mining::SemiHard => semi_hard_negative(d, i, sets, d[(i, i)], policy.margin, rng)?,
            Mining::DistanceWeighted => distance_weighted_negative(d, i, sets, policy.embed_dim, policy.dw_clamp, rng)?,
        };
        out.s_minus.insert((i, j));
    }
    Ok(out)
}

/// Margin that defines the semi-hard band for each loss.
pub fn mining_margin(kind: LossKind, m: &MarginConfig) -> f64 {
    match kind {
        LossKind::Contrastive | LossKind::Triplet => m.eps,
        LossKind::Mm | LossKind::Ot => m.m,
        LossKind::Po => m.n,
    }
}

/// Per-epoch training trace of one seed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Mean batch loss per epoch, after the configured reduction.
    pub epoch_losses: Vec<f64>,
    pub sinkhorn_solves: usize,
    pub sinkhorn_unconverged: usize,
    /// Set when training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

enum OptState {
    Sgd,
    Adam(AdamState, Option<AdamState>),
}

fn apply_update(model: &Model, grads: &ModelGrads, state: &mut OptState, lr: f64) -> Result<Model> {
    match state {
        OptState::Sgd => Ok(Model {
            left: sgd_step(&model.left, &grads.left, lr)?,
            right: match (&model.right, &grads.right) {
                (Some(p), Some(g)) => Some(sgd_step(p, g, lr)?),
                _ => None,
            },
        }),
        OptState::Adam(sl, sr) => {
            let cfg = AdamConfig::with_lr(lr);
            let (left, nl) = adam_step(&model.left, &grads.left, std::mem::take(sl), cfg)?;
            *sl = nl;
            let right = match (&model.right, &grads.right) {
                (Some(p), Some(g)) => {
                    let (r, nr) = adam_step(p, g, sr.take().unwrap_or_default(), cfg)?;
                    *sr = Some(nr);
                    Some(r)
                }
                _ => None,
            };
            Ok(Model { left, right })
        }
    }
}

/// Trains `model` in place for `cfg.epochs` epochs.
pub fn train(
    model: &mut Model,
    data: &TrainingSet,
    cfg: &ExperimentConfig,
    settings: &LossSettings,
    rng: &mut SeededRng,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    let mut state = match cfg.optimizer {
        Optimizer::Sgd => OptState::Sgd,
        Optimizer::Adam => OptState::Adam(AdamState::default(), None),
    };
    let policy = NegativePolicy {
        mining: cfg.mining,
        single: cfg.single_negative_for(settings.kind),
        margin: mining_margin(settings.kind, &settings.margins),
        dw_clamp: cfg.dw_clamp,
        embed_dim: model.left.output_dim(),
    };
    for epoch in 0..cfg.epochs {
        let batches = data.epoch_batches(cfg.batch_size, rng);
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let xa = data.left.rows(batch.iter().map(|p| p.0));
            let xb = data.right.rows(batch.iter().map(|p| p.1));
            let fwd = forward(model, &xa, &xb, settings.metric, settings.normalize)?;
            let mut sets = data.batch_sets(batch)?;
            if settings.kind != LossKind::Po {
                sets = sets.fold_partials_into_negatives();
            }
            let sets = mine_negatives(&fwd.d, &sets, &policy, rng)?;
            let mut loss = loss_on_batch(&fwd.d, &sets, settings, None)?;
            if cfg.reduction == Reduction::Mean {
                let scale = 1.0 / (batch.len() * batch.len()) as f64;
                loss.value *= scale;
                loss.d_grad = loss.d_grad.map(|g| g * scale);
            }
            if let Some(plan) = &loss.plan {
                log.sinkhorn_solves += 1;
                if !plan.converged {
                    log.sinkhorn_unconverged += 1;
                }
            }
            let grads = backward(model, &fwd, &loss.d_grad, settings.metric, settings.normalize)?;
            if !loss.value.is_finite() || !grads.to_flat().iter().all(|g| g.is_finite()) {
                log.aborted = Some(format!("non-finite loss or gradient at epoch {epoch}, batch {b}"));
                return Ok(log);
            }
            total += loss.value;
            *model = apply_update(model, &grads, &mut state, cfg.lr)?;
        }
        log.epoch_losses.push(if batches.is_empty() { 0.0 } else { total / batches.len() as f64 });
    }
    Ok(log)
}

/// A query set ranked against a gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub direction: String,
    pub queries: Matrix,
    /// Queries pass through the right-side encoder.
    pub queries_right: bool,
    pub gallery: Matrix,
    pub gallery_right: bool,
    pub relevance: RelevanceMap,
}

impl EvalSet {
    /// Queries and gallery share labels; relevant means same key.
    pub fn same_key(direction: &str, queries: &Side, gallery: &Side) -> Result<Self> {
        let relevance: RelevanceMap = queries
            .keys
            .iter()
            .map(|k| gallery.keys.iter().enumerate().filter(|(_, g)| *g == k).map(|(j, _)| j).collect())
            .collect();
        if let Some(q) = relevance.iter().position(|r| r.is_empty()) {
            return Err(Error::NoRelevant(q));
        }
        Ok(EvalSet {
            direction: direction.into(),
            queries: queries.features.clone(),
            queries_right: false,
            gallery: gallery.features.clone(),
            gallery_right: false,
            relevance,
        })
    }

    /// Caption-to-video and video-to-caption sets; every caption of a video
    /// counts as a match for it.
    pub fn cross_modal(videos: &Side, captions: &Side) -> Result<[Self; 2]> {
        let t2v: RelevanceMap = captions
            .keys
            .iter()
            .map(|v| videos.ids.iter().enumerate().filter(|(_, id)| *id == v).map(|(j, _)| j).collect())
            .collect();
        let v2t: RelevanceMap = videos
            .ids
            .iter()
            .map(|id| captions.keys.iter().enumerate().filter(|(_, v)| *v == id).map(|(j, _)| j).collect())
            .collect();
        if let Some(q) = t2v.iter().position(|r| r.is_empty()) {
            return Err(Error::NoRelevant(q));
        }
        if let Some(q) = v2t.iter().position(|r| r.is_empty()) {
            return Err(Error::NoRelevant(q));
        }
        Ok([
            EvalSet {
                direction: "t2v".into(),
                queries: captions.features.clone(),
                queries_right: true,
                gallery: videos.features.clone(),
                gallery_right: false,
                relevance: t2v,
            },
            EvalSet {
                direction: "v2t".into(),
                queries: videos.features.clone(),
                queries_right: false,
                gallery: captions.features.clone(),
                gallery_right: true,
                relevance: v2t,
            },
        ])
    }

    pub fn ranks(&self, model: &Model, metric: Metric, normalize: bool) -> Result<Vec<usize>> {
        let q = model.embed(self.queries_right, &self.queries, normalize)?;
        let g = model.embed(self.gallery_right, &self.gallery, normalize)?;
        let d = pairwise_distances(&q, &g, metric)?;
        rank_queries(&d, &self.relevance)
    }

    pub fn summary(&self, model: &Model, metric: Metric, normalize: bool, ks: &[usize]) -> Result<RankSummary> {
        RankSummary::from_ranks(&self.ranks(model, metric, normalize)?, ks)
    }
}
