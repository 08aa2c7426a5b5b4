//! Ranking and metric-learning losses over batch distance matrices.
//!
//! Batch losses take a square matrix `D` with `D[(i, j)] = dist(f(v_i), g(t_j))`
//! whose diagonal holds the matched pairs, and return the loss value together
//! with `∂L/∂D`. The subgradient of `[x]+` at `x = 0` is taken as zero.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::sinkhorn::{solve_sinkhorn, SinkhornOptions, TransportPlan, TransportProblem};

/// Margins and optimal-transport parameters shared by all losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    /// Contrastive / triplet margin.
    pub eps: f64,
    /// Bidirectional max-margin margin.
    pub m: f64,
    /// Positive margin.
    pub p: f64,
    /// Lower edge of the partial band.
    pub m1: f64,
    /// Upper edge of the partial band.
    pub m2: f64,
    /// Negative margin.
    pub n: f64,
    /// Sharpness of the transport ground costs.
    pub gamma: f64,
    /// Entropic regularization strength of the transport plan.
    pub lambda: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        MarginConfig { eps: 0.2, m: 0.2, p: 0.05, m1: 0.2, m2: 0.5, n: 0.8, gamma: 1.0, lambda: 10.0 }
    }
}

impl MarginConfig {
    /// Validated constructor for the quadruplet margins; the remaining fields
    /// take their defaults.
    pub fn partial_order(p: f64, m1: f64, m2: f64, n: f64) -> Result<Self> {
        let cfg = MarginConfig { p, m1, m2, n, ..Default::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.eps, self.m, self.p, self.m1, self.m2, self.n, self.gamma, self.lambda];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("margin configuration"));
        }
        if !(self.p < self.m1 && self.m1 < self.m2 && self.m2 < self.n) {
            return Err(Error::MarginOrder { p: self.p, m1: self.m1, m2: self.m2, n: self.n });
        }
        if self.eps < 0.0 || self.m < 0.0 {
            return Err(Error::InvalidMargin("eps and m must be non-negative".into()));
        }
        if self.gamma <= 0.0 || self.lambda <= 0.0 {
            return Err(Error::InvalidMargin("gamma and lambda must be positive".into()));
        }
        Ok(())
    }
}

/// Positive, negative and partial pair sets of one batch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadrupletSets {
    pub s_plus: BTreeSet<(usize, usize)>,
    pub s_minus: BTreeSet<(usize, usize)>,
    pub s_partial: BTreeSet<(usize, usize)>,
}

impl QuadrupletSets {
    /// Diagonal positives, every off-diagonal pair negative.
    pub fn diagonal(n: usize) -> Self {
        let mut sets = QuadrupletSets::default();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    sets.s_plus.insert((i, j));
                } else {
                    sets.s_minus.insert((i, j));
                }
            }
        }
        sets
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for &(i, j) in self.s_plus.iter().chain(&self.s_minus).chain(&self.s_partial) {
            if i >= n || j >= n {
                return Err(Error::IndexOutOfRange { index: i.max(j), size: n });
            }
        }
        for &(i, j) in self.s_minus.iter().chain(&self.s_partial) {
            if i == j {
                return Err(Error::InvalidPair(i, j, "matched pair cannot be negative or partial"));
            }
        }
        for &pair in &self.s_plus {
            if self.s_minus.contains(&pair) || self.s_partial.contains(&pair) {
                return Err(Error::OverlappingSets(pair.0, pair.1));
            }
        }
        if let Some(&(i, j)) = self.s_minus.intersection(&self.s_partial).next() {
            return Err(Error::OverlappingSets(i, j));
        }
        Ok(())
    }

    /// Relabels every partial pair as negative, for losses without a partial
    /// band.
    pub fn fold_partials_into_negatives(&self) -> QuadrupletSets {
        let mut out = self.clone();
        out.s_minus.extend(std::mem::take(&mut out.s_partial));
        out
    }

    /// Negatives of row `i`, as column indices.
    pub fn negatives_of(&self, i: usize) -> Vec<usize> {
        self.s_minus.range((i, 0)..(i + 1, 0)).map(|&(_, j)| j).collect()
    }
}

/// Loss value and `∂L/∂D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub d_grad: Matrix,
}

/// Value and derivative of a loss over a single distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarLoss {
    pub value: f64,
    pub grad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletOutput {
    pub value: f64,
    pub grad_pos: f64,
    pub grad_neg: f64,
}

#[inline]
fn hinge(x: f64) -> (f64, f64) {
    if x > 0.0 {
        (x, 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Accumulates one hinge `[Σ coef·D[idx] + offset]+` into the output.
struct Accumulator {
    value: f64,
    grad: Matrix,
}

impl Accumulator {
    fn new(n: usize, m: usize) -> Self {
        Accumulator { value: 0.0, grad: Matrix::zeros(n, m) }
    }

    fn hinge(&mut self, d: &Matrix, terms: &[((usize, usize), f64)], offset: f64, weight: f64) {
        let x = terms.iter().map(|&(idx, c)| c * d[idx]).sum::<f64>() + offset;
        let (v, active) = hinge(x);
        if active == 0.0 {
            return;
        }
        self.value += weight * v;
        for &(idx, c) in terms {
            self.grad[idx] += weight * c;
        }
    }

    fn finish(self) -> LossOutput {
        LossOutput { value: self.value, d_grad: self.grad }
    }
}

fn require_square(d: &Matrix) -> Result<usize> {
    if !d.is_square() {
        return Err(Error::NotSquare { rows: d.rows(), cols: d.cols() });
    }
    if !d.all_finite() {
        return Err(Error::NonFinite("distance matrix"));
    }
    Ok(d.rows())
}

/// Siamese contrastive loss of one pair: `y·d + (1 − y)·[ε − d]+`.
pub fn contrastive_pair_loss(d: f64, similar: bool, eps: f64) -> ScalarLoss {
    if similar {
        ScalarLoss { value: d, grad: 1.0 }
    } else {
        let (v, a) = hinge(eps - d);
        ScalarLoss { value: v, grad: -a }
    }
}

/// `[d_pos − d_neg + ε]+`.
pub fn triplet_loss(d_pos: f64, d_neg: f64, eps: f64) -> TripletOutput {
    let (v, a) = hinge(d_pos - d_neg + eps);
    TripletOutput { value: v, grad_pos: a, grad_neg: -a }
}

/// Contrastive loss summed over the positive and negative pairs of a batch.
pub fn contrastive_batch_loss(d: &Matrix, sets: &QuadrupletSets, eps: f64) -> Result<LossOutput> {
    let n = require_square(d)?;
    sets.validate(n)?;
    let mut out = Accumulator::new(n, n);
    for &(i, j) in &sets.s_plus {
        let l = contrastive_pair_loss(d[(i, j)], true, eps);
        out.value += l.value;
        out.grad[(i, j)] += l.grad;
    }
    for &(i, j) in &sets.s_minus {
        let l = contrastive_pair_loss(d[(i, j)], false, eps);
        out.value += l.value;
        out.grad[(i, j)] += l.grad;
    }
    Ok(out.finish())
}

/// Triplet loss with anchor row `i`, its matched positive `(i, i)` and one
/// chosen negative `(i, j)` per entry of `negatives`.
pub fn triplet_batch_loss(d: &Matrix, negatives: &[(usize, usize)], eps: f64) -> Result<LossOutput> {
    let n = require_square(d)?;
    let mut out = Accumulator::new(n, n);
    for &(i, j) in negatives {
        if i >= n || j >= n {
            return Err(Error::IndexOutOfRange { index: i.max(j), size: n });
        }
        if i == j {
            return Err(Error::InvalidPair(i, j, "negative cannot be the matched pair"));
        }
        out.hinge(d, &[((i, i), 1.0), ((i, j), -1.0)], eps, 1.0);
    }
    Ok(out.finish())
}

/// The `(i, j)` summand of the bidirectional max-margin loss:
/// `[m + d_ii − d_ij]+ + [m + d_ii − d_ji]+`.
pub fn max_margin_pair(d: &Matrix, i: usize, j: usize, m: f64) -> f64 {
    hinge(m + d[(i, i)] - d[(i, j)]).0 + hinge(m + d[(i, i)] - d[(j, i)]).0
}

fn add_max_margin_pair(out: &mut Accumulator, d: &Matrix, i: usize, j: usize, m: f64, weight: f64) {
    out.hinge(d, &[((i, i), 1.0), ((i, j), -1.0)], m, weight);
    out.hinge(d, &[((i, i), 1.0), ((j, i), -1.0)], m, weight);
}

/// Bidirectional max-margin ranking loss over every off-diagonal pair.
pub fn bidirectional_max_margin(d: &Matrix, m: f64) -> Result<LossOutput> {
    let n = require_square(d)?;
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
    bidirectional_max_margin_over(d, m, &pairs)
}

/// Bidirectional max-margin loss restricted to the listed off-diagonal pairs.
pub fn bidirectional_max_margin_over(d: &Matrix, m: f64, pairs: &[(usize, usize)]) -> Result<LossOutput> {
    let n = require_square(d)?;
    let mut out = Accumulator::new(n, n);
    for &(i, j) in pairs {
        if i >= n || j >= n {
            return Err(Error::IndexOutOfRange { index: i.max(j), size: n });
        }
        if i == j {
            continue;
        }
        add_max_margin_pair(&mut out, d, i, j, m, 1.0);
    }
    Ok(out.finish())
}

/// Per-set contributions of the partial-order loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PartialOrderTerms {
    pub positive: f64,
    pub negative: f64,
    pub partial: f64,
}

/// Partial-order quadruplet loss `L⁺ + L⁻ + L~`.
///
/// Relative to the matched distance `d_ii`, positives are pulled within `p`,
/// negatives pushed beyond `n`, and partials held in the band `[m1, m2]`,
/// each in both directions `d_ij` and `d_ji`.
pub fn partial_order_loss(d: &Matrix, sets: &QuadrupletSets, cfg: &MarginConfig) -> Result<LossOutput> {
    partial_order_loss_detailed(d, sets, cfg).map(|(out, _)| out)
}

pub fn partial_order_loss_detailed(
    d: &Matrix,
    sets: &QuadrupletSets,
    cfg: &MarginConfig,
) -> Result<(LossOutput, PartialOrderTerms)> {
    let n = require_square(d)?;
    cfg.validate()?;
    sets.validate(n)?;
    let mut out = Accumulator::new(n, n);
    let mut terms = PartialOrderTerms::default();

    for &(i, j) in &sets.s_plus {
        let before = out.value;
        out.hinge(d, &[((i, j), 1.0), ((i, i), -1.0)], -cfg.p, 1.0);
        out.hinge(d, &[((j, i), 1.0), ((i, i), -1.0)], -cfg.p, 1.0);
        terms.positive += out.value - before;
    }
    for &(i, j) in &sets.s_minus {
        let before = out.value;
        out.hinge(d, &[((i, i), 1.0), ((i, j), -1.0)], cfg.n, 1.0);
        out.hinge(d, &[((i, i), 1.0), ((j, i), -1.0)], cfg.n, 1.0);
        terms.negative += out.value - before;
    }
    for &(i, j) in &sets.s_partial {
        let before = out.value;
        out.hinge(d, &[((i, i), 1.0), ((i, j), -1.0)], cfg.m1, 1.0);
        out.hinge(d, &[((i, i), 1.0), ((j, i), -1.0)], cfg.m1, 1.0);
        out.hinge(d, &[((i, j), 1.0), ((i, i), -1.0)], -cfg.m2, 1.0);
        out.hinge(d, &[((j, i), 1.0), ((i, i), -1.0)], -cfg.m2, 1.0);
        terms.partial += out.value - before;
    }
    Ok((out.finish(), terms))
}

/// Exponentiated hinge ground costs `(G⁺, G⁻)` for the transport weighting.
pub fn ot_ground_costs(d: &Matrix, cfg: &MarginConfig) -> Result<(Matrix, Matrix)> {
    let n = require_square(d)?;
    if !(cfg.gamma > 0.0) {
        return Err(Error::InvalidMargin("gamma must be positive".into()));
    }
    let mut g_plus = Matrix::zeros(n, n);
    let mut g_minus = Matrix::zeros(n, n);
    for i in 0..n {
        let dii = d[(i, i)];
        for j in 0..n {
            let pos = hinge(d[(i, j)] - dii - cfg.p).0 + hinge(d[(j, i)] - dii - cfg.p).0;
            let neg = hinge(cfg.n - d[(i, j)] + dii).0 + hinge(cfg.n - d[(j, i)] + dii).0;
            g_plus[(i, j)] = (-cfg.gamma * pos).exp();
            g_minus[(i, j)] = (-cfg.gamma * neg).exp();
        }
    }
    Ok((g_plus, g_minus))
}

/// Result of the transport-weighted loss, including the plan used.
#[derive(Debug, Clone, PartialEq)]
pub struct OtOutput {
    pub loss: LossOutput,
    pub plan: TransportPlan,
    /// Masked cost matrix the plan was solved for.
    pub cost: Matrix,
}

/// Cost `P⊙(1−Q)⊙G⁺ + (1−P)⊙Q⊙G⁻` of the batch transport program.
pub fn ot_masked_cost(d: &Matrix, sets: &QuadrupletSets, cfg: &MarginConfig) -> Result<Matrix> {
    let n = require_square(d)?;
    sets.validate(n)?;
    let (g_plus, g_minus) = ot_ground_costs(d, cfg)?;
    let mut cost = Matrix::zeros(n, n);
    for &idx in &sets.s_plus {
        cost[idx] = g_plus[idx];
    }
    for &idx in &sets.s_minus {
        cost[idx] = g_minus[idx];
    }
    Ok(cost)
}

/// Transport-weighted max-margin loss `Σ T*_ij · L^MM_ij` over the pairs of
/// `S⁻`. Positive pairs shape the plan through `G⁺` but carry no ranking
/// term, since the max-margin term would push them apart.
///
/// `T*` is solved with uniform marginals and treated as a constant in the
/// gradient. A plan that fails to converge is still used; check
/// `plan.converged`.
pub fn ot_weighted_loss(
    d: &Matrix,
    sets: &QuadrupletSets,
    cfg: &MarginConfig,
    opts: SinkhornOptions,
) -> Result<OtOutput> {
    let cost = ot_masked_cost(d, sets, cfg)?;
    let plan = solve_sinkhorn(&TransportProblem::uniform(cost.clone(), cfg.lambda), opts)?;
    let loss = ot_weighted_loss_with_plan(d, sets, &plan.plan, cfg.m)?;
    Ok(OtOutput { loss, plan, cost })
}

/// Same as [`ot_weighted_loss`] with a fixed transport plan.
pub fn ot_weighted_loss_with_plan(d: &Matrix, sets: &QuadrupletSets, plan: &Matrix, m: f64) -> Result<LossOutput> {
    let n = require_square(d)?;
    if plan.shape() != (n, n) {
        return Err(Error::ShapeMismatch(format!("plan {:?} for a {n}x{n} batch", plan.shape())));
    }
    let mut out = Accumulator::new(n, n);
    for &(i, j) in &sets.s_minus {
        if i != j {
            add_max_margin_pair(&mut out, d, i, j, m, plan[(i, j)]);
        }
    }
    Ok(out.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    fn cfg() -> MarginConfig {
        MarginConfig::partial_order(0.1, 0.3, 0.6, 0.9).unwrap()
    }

    fn partial_pair(dij: f64) -> (Matrix, QuadrupletSets) {
        let d = m(&[&[0.2, dij], &[dij, 0.2]]);
        let mut sets = QuadrupletSets::default();
        sets.s_partial.insert((0, 1));
        (d, sets)
    }

    #[test]
    fn contrastive_examples() {
        assert_eq!(contrastive_pair_loss(0.5, true, 1.0).value, 0.5);
        assert!((contrastive_pair_loss(0.2, false, 1.0).value - 0.8).abs() < 1e-15);
        assert_eq!(contrastive_pair_loss(1.5, false, 1.0), ScalarLoss { value: 0.0, grad: 0.0 });
        assert_eq!(contrastive_pair_loss(0.2, false, 1.0).grad, -1.0);
    }

    #[test]
    fn triplet_examples() {
        assert_eq!(triplet_loss(0.3, 0.9, 0.5).value, 0.0);
        assert!((triplet_loss(0.9, 0.3, 0.5).value - 1.1).abs() < 1e-15);
        assert_eq!(triplet_loss(0.4, 0.4, 0.0).value, 0.0);
    }

    #[test]
    fn max_margin_examples() {
        let out = bidirectional_max_margin(&m(&[&[0.2, 0.9], &[0.8, 0.1]]), 0.3).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.d_grad.as_slice().iter().all(|&g| g == 0.0));

        let out = bidirectional_max_margin(&m(&[&[0.5, 0.6], &[0.55, 0.4]]), 0.3).unwrap();
        assert!((out.value - 0.7).abs() < 1e-12, "{}", out.value);

        let out = bidirectional_max_margin(&m(&[&[0.1, 0.5, 0.4], &[0.3, 0.0, 0.2], &[0.6, 0.7, 0.1]]), 0.0).unwrap();
        assert_eq!(out.value, 0.0);

        assert_eq!(
            bidirectional_max_margin(&Matrix::zeros(2, 3), 0.1),
            Err(Error::NotSquare { rows: 2, cols: 3 })
        );
    }

    #[test]
    fn partial_band_examples() {
        let (d, sets) = partial_pair(0.7);
        let (_, t) = partial_order_loss_detailed(&d, &sets, &cfg()).unwrap();
        assert_eq!(t.partial, 0.0);

        let (d, sets) = partial_pair(0.4);
        let (_, t) = partial_order_loss_detailed(&d, &sets, &cfg()).unwrap();
        assert!((t.partial - 0.2).abs() < 1e-12, "{}", t.partial);

        let (d, sets) = partial_pair(0.95);
        let (_, t) = partial_order_loss_detailed(&d, &sets, &cfg()).unwrap();
        assert!((t.partial - 0.3).abs() < 1e-12, "{}", t.partial);
    }

    #[test]
    fn satisfied_negatives_give_zero() {
        let d = m(&[&[0.1, 1.2, 1.5], &[1.0, 0.05, 1.3], &[1.4, 1.6, 0.2]]);
        let out = partial_order_loss(&d, &QuadrupletSets::diagonal(3), &cfg()).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn partial_order_errors() {
        let d = Matrix::filled(2, 2, 0.5);
        let mut sets = QuadrupletSets::diagonal(2);
        sets.s_partial.insert((0, 1));
        assert_eq!(partial_order_loss(&d, &sets, &cfg()), Err(Error::OverlappingSets(0, 1)));

        let bad = MarginConfig { m1: 0.7, ..cfg() };
        assert!(matches!(
            partial_order_loss(&d, &QuadrupletSets::diagonal(2), &bad),
            Err(Error::MarginOrder { .. })
        ));
        assert!(MarginConfig::partial_order(0.1, 0.1, 0.5, 0.9).is_err());

        let mut sets = QuadrupletSets::default();
        sets.s_minus.insert((1, 1));
        assert!(matches!(partial_order_loss(&d, &sets, &cfg()), Err(Error::InvalidPair(1, 1, _))));
        let mut sets = QuadrupletSets::default();
        sets.s_minus.insert((0, 5));
        assert!(matches!(partial_order_loss(&d, &sets, &cfg()), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn ground_cost_examples() {
        let c = MarginConfig { gamma: 1.0, ..cfg() };
        let d = m(&[&[0.2, 0.8], &[0.8, 0.2]]);
        let (gp, gm) = ot_ground_costs(&d, &c).unwrap();
        // hinge sum (0.8 - 0.2 - 0.1) * 2 = 1.0
        assert!((gp[(0, 1)] - (-1f64).exp()).abs() < 1e-12);
        assert_eq!(gp[(0, 0)], 1.0);
        let far = m(&[&[0.0, 5.0], &[5.0, 0.0]]);
        assert_eq!(ot_ground_costs(&far, &c).unwrap().1[(0, 1)], 1.0);
        let sharp = MarginConfig { gamma: 1e4, ..c };
        assert!(gm[(0, 1)] < 1.0);
        assert!(ot_ground_costs(&d, &sharp).unwrap().0[(0, 1)] < 1e-300);
    }

    #[test]
    fn ot_loss_zero_when_all_terms_zero() {
        let d = m(&[&[0.0, 2.0, 2.0], &[2.0, 0.0, 2.0], &[2.0, 2.0, 0.0]]);
        let c = MarginConfig { m: 0.5, ..cfg() };
        let out = ot_weighted_loss(&d, &QuadrupletSets::diagonal(3), &c, SinkhornOptions::default()).unwrap();
        assert_eq!(out.loss.value, 0.0);
    }

    #[test]
    fn ot_uniform_costs_give_uniform_plan() {
        // every hinge in G± inactive, so all masked costs equal one
        let d = m(&[&[0.1, 1.3], &[1.2, 0.2]]);
        let c = MarginConfig { m: 2.0, ..cfg() };
        let sets = QuadrupletSets::diagonal(2);
        let out = ot_weighted_loss(&d, &sets, &c, SinkhornOptions::default()).unwrap();
        for &t in out.plan.plan.as_slice() {
            assert!((t - 0.25).abs() < 1e-12);
        }
        let expected = 0.25 * (max_margin_pair(&d, 0, 1, 2.0) + max_margin_pair(&d, 1, 0, 2.0));
        assert!((out.loss.value - expected).abs() < 1e-12);
        let direct = solve_sinkhorn(&TransportProblem::uniform(Matrix::filled(2, 2, 1.0), c.lambda), SinkhornOptions::default())
            .unwrap();
        assert_eq!(direct.plan, out.plan.plan);
    }

    #[test]
    fn ot_hard_pair_gets_more_mass() {
        let n = 4;
        let mut d = Matrix::filled(n, n, 2.0);
        for i in 0..n {
            d[(i, i)] = 0.1;
        }
        d[(1, 2)] = 0.15;
        d[(2, 1)] = 0.15;
        let c = MarginConfig { gamma: 5.0, ..cfg() };
        let out = ot_weighted_loss(&d, &QuadrupletSets::diagonal(n), &c, SinkhornOptions::default()).unwrap();
        assert!(out.cost[(1, 2)] < 0.01);
        assert!(out.plan.plan[(1, 2)] > 1.0 / (n * n) as f64);
    }

    fn dist_matrix(n: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(0.0f64..2.0, n * n).prop_map(move |v| Matrix::from_vec(n, n, v).unwrap())
    }

    proptest! {
        #[test]
        fn reduces_to_max_margin(d in dist_matrix(5), keep in prop::collection::vec(any::<bool>(), 25), margin in 0.05f64..1.0) {
            let mut sets = QuadrupletSets::default();
            let mut pairs = Vec::new();
            for i in 0..5 {
                sets.s_plus.insert((i, i));
                for j in 0..5 {
                    if i != j && keep[i * 5 + j] {
                        sets.s_minus.insert((i, j));
                        pairs.push((i, j));
                    }
                }
            }
            // p = 0 and n = m; m1, m2 are unused without partials
            let c = MarginConfig { p: 0.0, m1: margin * 0.3, m2: margin * 0.6, n: margin, m: margin, ..Default::default() };
            let po = partial_order_loss(&d, &sets, &c).unwrap();
            let mm = bidirectional_max_margin_over(&d, margin, &pairs).unwrap();
            prop_assert!((po.value - mm.value).abs() <= 1e-12);
            for (a, b) in po.d_grad.as_slice().iter().zip(mm.d_grad.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn increasing_negative_distance_never_increases_loss(d in dist_matrix(4), i in 0usize..4, j in 0usize..4, bump in 0.0f64..1.0) {
            prop_assume!(i != j);
            let mut sets = QuadrupletSets::diagonal(4);
            sets.s_minus.remove(&(1, 0));
            sets.s_partial.insert((1, 0));
            // d_ij also enters the (j, i) terms, so that pair must be negative too
            prop_assume!(sets.s_minus.contains(&(i, j)) && sets.s_minus.contains(&(j, i)));
            let before = partial_order_loss(&d, &sets, &cfg()).unwrap().value;
            let mut d2 = d.clone();
            d2[(i, j)] += bump;
            let after = partial_order_loss(&d2, &sets, &cfg()).unwrap().value;
            prop_assert!(after <= before + 1e-12);
        }

        #[test]
        fn increasing_partial_above_band_never_decreases_loss(d in dist_matrix(3), bump in 0.0f64..1.0) {
            let mut sets = QuadrupletSets::diagonal(3);
            sets.s_minus.remove(&(0, 2));
            sets.s_minus.remove(&(2, 0));
            sets.s_partial.insert((0, 2));
            let c = cfg();
            let mut d = d;
            let dii = d[(0, 0)];
            d[(0, 2)] = d[(0, 2)].max(dii + c.m2);
            let before = partial_order_loss(&d, &sets, &c).unwrap().value;
            let mut d2 = d.clone();
            d2[(0, 2)] += bump;
            prop_assert!(partial_order_loss(&d2, &sets, &c).unwrap().value >= before - 1e-12);
        }

        #[test]
        fn ground_costs_in_unit_interval(d in dist_matrix(4), gamma in 0.01f64..50.0) {
            let c = MarginConfig { gamma, ..cfg() };
            let (gp, gm) = ot_ground_costs(&d, &c).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    for g in [gp[(i, j)], gm[(i, j)]] {
                        prop_assert!(g > 0.0 || gamma * 8.0 > 700.0);
                        prop_assert!(g <= 1.0);
                    }
                    let satisfied = d[(i, j)].max(d[(j, i)]) <= d[(i, i)] + c.p;
                    prop_assert_eq!(gp[(i, j)] == 1.0, satisfied);
                }
            }
        }

        #[test]
        fn loss_gradients_match_finite_differences(d in dist_matrix(4)) {
            let mut sets = QuadrupletSets::diagonal(4);
            sets.s_minus.remove(&(0, 1));
            sets.s_partial.insert((0, 1));
            sets.s_minus.remove(&(2, 3));
            sets.s_plus.insert((2, 3));
            let c = MarginConfig { m: 0.4, eps: 0.5, ..cfg() };
            let plan = Matrix::from_vec(4, 4, (0..16).map(|k| 0.01 + k as f64 * 0.003).collect()).unwrap();
            type LossFn<'a> = Box<dyn Fn(&Matrix) -> LossOutput + 'a>;
            let losses: Vec<LossFn> = vec![
                Box::new(|d| partial_order_loss(d, &sets, &c).unwrap()),
                Box::new(|d| bidirectional_max_margin(d, c.m).unwrap()),
                Box::new(|d| contrastive_batch_loss(d, &sets, c.eps).unwrap()),
                Box::new(|d| triplet_batch_loss(d, &[(0, 2), (1, 3), (3, 0)], c.eps).unwrap()),
                Box::new(|d| ot_weighted_loss_with_plan(d, &sets, &plan, c.m).unwrap()),
            ];
            let h = 1e-6;
            for f in &losses {
                let g = f(&d).d_grad;
                for k in 0..16 {
                    let idx = (k / 4, k % 4);
                    let mut p = d.clone();
                    let mut q = d.clone();
                    p[idx] += h;
                    q[idx] -= h;
                    let (fp, fq) = (f(&p), f(&q));
                    // skip entries whose perturbation crosses a hinge kink
                    let kink = fp.d_grad != fq.d_grad;
                    if kink {
                        continue;
                    }
                    let fd = (fp.value - fq.value) / (2.0 * h);
                    let err = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1.0);
                    prop_assert!(err <= 1e-6, "entry {:?}: fd {} vs {}", idx, fd, g[idx]);
                }
            }
        }
    }
}
