//! Entropy-regularized optimal transport by Sinkhorn scaling.
//!
//! With `K = exp(-λM)` the solver alternates `u = r ./ (K v)` and
//! `v = c ./ (Kᵀ u)` and returns `T = diag(u) K diag(v)`. A log-domain
//! variant performs the same updates on `log u`, `log v` with log-sum-exp
//! and does not underflow for large `λ·M`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportProblem {
    pub cost: Matrix,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub iterations_used: usize,
    pub converged: bool,
    /// Largest marginal violation of the returned plan.
    pub marginal_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub log_domain: bool,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        SinkhornOptions { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER, log_domain: false }
    }
}

impl TransportProblem {
    /// Uniform marginals `1/n` on both sides.
    pub fn uniform(cost: Matrix, lambda: f64) -> Self {
        let r = vec![1.0 / cost.rows() as f64; cost.rows()];
        let c = vec![1.0 / cost.cols() as f64; cost.cols()];
        TransportProblem { cost, r, c, lambda }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.cost.shape();
        if n == 0 || m == 0 {
            return Err(Error::InvalidProblem("empty cost matrix".into()));
        }
        if self.r.len() != n || self.c.len() != m {
            return Err(Error::InvalidProblem(format!(
                "marginals of length ({}, {}) for a {n}x{m} cost",
                self.r.len(),
                self.c.len()
            )));
        }
        if !self.cost.all_finite() {
            return Err(Error::NonFinite("transport cost"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidProblem(format!("lambda must be positive, got {}", self.lambda)));
        }
        for (name, v) in [("r", &self.r), ("c", &self.c)] {
            if v.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::InvalidProblem(format!("marginal {name} must be strictly positive")));
            }
            let s: f64 = v.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidProblem(format!("marginal {name} sums to {s}")));
            }
        }
        Ok(())
    }
}

fn marginal_error(plan: &Matrix, r: &[f64], c: &[f64]) -> f64 {
    let rows = plan.row_sums();
    let cols = plan.col_sums();
    rows.iter()
        .zip(r)
        .chain(cols.iter().zip(c))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub fn solve_sinkhorn(problem: &TransportProblem, opts: SinkhornOptions) -> Result<TransportPlan> {
    problem.validate()?;
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidProblem(format!("tolerance must be positive, got {}", opts.tol)));
    }
    if opts.log_domain {
        solve_log_domain(problem, opts)
    } else {
        solve_scaling(problem, opts)
    }
}

fn solve_scaling(problem: &TransportProblem, opts: SinkhornOptions) -> Result<TransportPlan> {
    let (n, m) = problem.cost.shape();
    let kernel = problem.cost.map(|x| (-problem.lambda * x).exp());
    if kernel.row_sums().contains(&0.0) || kernel.col_sums().contains(&0.0) {
        return Err(Error::KernelUnderflow);
    }
    let mut u = vec![1.0; n];
    let mut v = vec![1.0; m];
    let build = |u: &[f64], v: &[f64]| {
        let mut t = kernel.clone();
        for i in 0..n {
            for j in 0..m {
                t[(i, j)] *= u[i] * v[j];
            }
        }
        t
    };
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let kv = kernel.mul_vec(&v)?;
        for i in 0..n {
            u[i] = problem.r[i] / kv[i];
        }
        let ktu = kernel.tr_mul_vec(&u)?;
        for j in 0..m {
            v[j] = problem.c[j] / ktu[j];
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::KernelUnderflow);
        }
        // After the v-update columns are exact; check the rows.
        let kv = kernel.mul_vec(&v)?;
        let row_err = (0..n).map(|i| (u[i] * kv[i] - problem.r[i]).abs()).fold(0.0, f64::max);
        if row_err <= opts.tol {
            converged = true;
            break;
        }
    }
    let plan = build(&u, &v);
    let marginal_error = marginal_error(&plan, &problem.r, &problem.c);
    Ok(TransportPlan { plan, iterations_used: iterations, converged: converged && marginal_error <= opts.tol, marginal_error })
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn solve_log_domain(problem: &TransportProblem, opts: SinkhornOptions) -> Result<TransportPlan> {
    let (n, m) = problem.cost.shape();
    let log_k = problem.cost.map(|x| -problem.lambda * x);
    let log_r: Vec<f64> = problem.r.iter().map(|x| x.ln()).collect();
    let log_c: Vec<f64> = problem.c.iter().map(|x| x.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let log_plan = |f: &[f64], g: &[f64]| {
        let mut t = Matrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                t[(i, j)] = f[i] + log_k[(i, j)] + g[j];
            }
        }
        t
    };
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        for i in 0..n {
            f[i] = log_r[i] - log_sum_exp((0..m).map(|j| log_k[(i, j)] + g[j]));
        }
        for j in 0..m {
            g[j] = log_c[j] - log_sum_exp((0..n).map(|i| log_k[(i, j)] + f[i]));
        }
        let row_err = (0..n)
            .map(|i| (log_sum_exp((0..m).map(|j| f[i] + log_k[(i, j)] + g[j])).exp() - problem.r[i]).abs())
            .fold(0.0, f64::max);
        if row_err <= opts.tol {
            converged = true;
            break;
        }
    }
    let plan = log_plan(&f, &g).map(f64::exp);
    let marginal_error = marginal_error(&plan, &problem.r, &problem.c);
    Ok(TransportPlan { plan, iterations_used: iterations, converged: converged && marginal_error <= opts.tol, marginal_error })
}

/// `h(T) = -Σ T_ij log T_ij` with `0 log 0 = 0`.
pub fn plan_entropy(plan: &Matrix) -> f64 {
    -plan.as_slice().iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum::<f64>()
}

/// Frobenius inner product `⟨T, M⟩`.
pub fn transport_cost(plan: &Matrix, cost: &Matrix) -> Result<f64> {
    if plan.shape() != cost.shape() {
        return Err(Error::ShapeMismatch(format!("plan {:?} vs cost {:?}", plan.shape(), cost.shape())));
    }
    Ok(plan.as_slice().iter().zip(cost.as_slice()).map(|(t, m)| t * m).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn constant_cost_gives_uniform_plan() {
        for log_domain in [false, true] {
            let p = TransportProblem::uniform(Matrix::filled(2, 2, 0.7), 10.0);
            let t = solve_sinkhorn(&p, SinkhornOptions { log_domain, ..Default::default() }).unwrap();
            assert!(t.converged);
            for &x in t.plan.as_slice() {
                assert!((x - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_lambda_approaches_exact_plan() {
        let p = TransportProblem::uniform(m(&[&[0.0, 1.0], &[1.0, 0.0]]), 50.0);
        let t = solve_sinkhorn(&p, SinkhornOptions::default()).unwrap();
        assert!(t.converged);
        assert!(t.plan[(0, 1)] <= 1e-3 && t.plan[(1, 0)] <= 1e-3);
        assert!((t.plan[(0, 0)] - 0.5).abs() <= 1e-3);
    }

    #[test]
    fn nearly_degenerate_marginal() {
        let eps = 1e-6;
        let r = vec![1.0 / (1.0 + eps), eps / (1.0 + eps)];
        let p = TransportProblem { cost: m(&[&[0.2, 0.5], &[0.9, 0.1]]), r, c: vec![0.5, 0.5], lambda: 5.0 };
        let t = solve_sinkhorn(&p, SinkhornOptions { tol: 1e-9, max_iter: 10_000, log_domain: false }).unwrap();
        assert!(t.converged);
        let row0: f64 = t.plan.row(0).iter().sum();
        assert!((row0 - (1.0 - eps)).abs() < 1e-8, "{row0}");
    }

    #[test]
    fn underflow_is_reported() {
        let p = TransportProblem::uniform(m(&[&[1.0, 1.0], &[0.0, 0.0]]), 1000.0);
        assert_eq!(solve_sinkhorn(&p, SinkhornOptions::default()), Err(Error::KernelUnderflow));
        let t = solve_sinkhorn(&p, SinkhornOptions { log_domain: true, ..Default::default() }).unwrap();
        assert!(t.plan.all_finite());
        assert!(t.converged);
    }

    #[test]
    fn non_convergence_is_flagged_not_fatal() {
        let p = TransportProblem::uniform(m(&[&[0.0, 1.0, 0.3], &[0.5, 0.1, 0.9], &[0.7, 0.2, 0.0]]), 1.0);
        let t = solve_sinkhorn(&p, SinkhornOptions { tol: 1e-14, max_iter: 1, log_domain: false }).unwrap();
        assert!(!t.converged);
        assert_eq!(t.iterations_used, 1);
        assert!(t.marginal_error > 1e-14);
        assert!(t.plan.all_finite());
    }

    #[test]
    fn invalid_problems() {
        let cost = Matrix::filled(2, 2, 1.0);
        let bad = TransportProblem { cost: cost.clone(), r: vec![0.6, 0.6], c: vec![0.5, 0.5], lambda: 1.0 };
        assert!(matches!(solve_sinkhorn(&bad, SinkhornOptions::default()), Err(Error::InvalidProblem(_))));
        let bad = TransportProblem::uniform(cost.clone(), 0.0);
        assert!(solve_sinkhorn(&bad, SinkhornOptions::default()).is_err());
        let bad = TransportProblem { cost, r: vec![1.0, 0.0], c: vec![0.5, 0.5], lambda: 1.0 };
        assert!(solve_sinkhorn(&bad, SinkhornOptions::default()).is_err());
    }

    #[test]
    fn entropy_closed_forms() {
        assert!((plan_entropy(&Matrix::filled(2, 2, 0.25)) - 4f64.ln()).abs() < 1e-12);
        assert!((plan_entropy(&m(&[&[0.5, 0.0], &[0.0, 0.5]])) - 2f64.ln()).abs() < 1e-12);
        assert_eq!(plan_entropy(&m(&[&[1.0]])), 0.0);
    }

    #[test]
    fn cost_examples() {
        assert!((transport_cost(&Matrix::filled(2, 2, 0.25), &Matrix::filled(2, 2, 3.5)).unwrap() - 3.5).abs() < 1e-15);
        let t = m(&[&[0.5, 0.0], &[0.0, 0.5]]);
        assert_eq!(transport_cost(&t, &m(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap(), 0.0);
        assert!(transport_cost(&t, &Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn cost_matches_double_loop() {
        let t = m(&[&[0.1, 0.05, 0.2], &[0.0, 0.3, 0.05], &[0.1, 0.1, 0.1]]);
        let c = m(&[&[0.3, 1.2, 0.7], &[2.0, 0.1, 0.4], &[0.9, 0.6, 0.5]]);
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                expected += t[(i, j)] * c[(i, j)];
            }
        }
        assert!((transport_cost(&t, &c).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn plan_is_scaled_kernel() {
        let cost = m(&[&[0.3, 1.2, 0.7], &[2.0, 0.1, 0.4], &[0.9, 0.6, 0.5]]);
        let p = TransportProblem { cost: cost.clone(), r: vec![0.2, 0.5, 0.3], c: vec![0.4, 0.4, 0.2], lambda: 3.0 };
        let t = solve_sinkhorn(&p, SinkhornOptions::default()).unwrap();
        // T_ij / K_ij must factor as u_i v_j: all 2x2 cross ratios equal one.
        let s = |i: usize, j: usize| t.plan[(i, j)] / (-3.0 * cost[(i, j)]).exp();
        for (i, k) in [(0, 1), (1, 2), (0, 2)] {
            for (j, l) in [(0, 1), (1, 2)] {
                assert!((s(i, j) * s(k, l) / (s(i, l) * s(k, j)) - 1.0).abs() < 1e-10);
            }
        }
        let log_t = solve_sinkhorn(&p, SinkhornOptions { log_domain: true, ..Default::default() }).unwrap();
        for (a, b) in t.plan.as_slice().iter().zip(log_t.plan.as_slice()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn shift_invariance_and_lambda_monotonicity() {
        let cost = m(&[&[0.3, 1.2, 0.7], &[2.0, 0.1, 0.4], &[0.9, 0.6, 0.5]]);
        let opts = SinkhornOptions { tol: 1e-13, max_iter: 100_000, log_domain: false };
        let base = solve_sinkhorn(&TransportProblem::uniform(cost.clone(), 4.0), opts).unwrap();
        let shifted = solve_sinkhorn(&TransportProblem::uniform(cost.map(|x| x + 0.8), 4.0), opts).unwrap();
        for (a, b) in base.plan.as_slice().iter().zip(shifted.plan.as_slice()) {
            assert!((a - b).abs() <= 1e-9);
        }
        let mut prev = f64::INFINITY;
        for lambda in [0.5, 1.0, 2.0, 5.0, 10.0, 20.0] {
            let t = solve_sinkhorn(&TransportProblem::uniform(cost.clone(), lambda), opts).unwrap();
            let c = transport_cost(&t.plan, &cost).unwrap();
            assert!(c <= prev + 1e-9);
            prev = c;
        }
    }
}
