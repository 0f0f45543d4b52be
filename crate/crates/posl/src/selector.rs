//! Discrete cross-validation selector and ensemble meta-learners: convex
//! non-negative least squares on the simplex and an X-conditional softmax
//! family.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{SubjectId, Time};
use crate::risk::{LearnerId, RiskError, RiskTable};

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error(transparent)]
    NoMass(#[from] RiskError),
    #[error("meta design has no rows with positive weight")]
    DegenerateDesign,
    #[error("conditional meta objective produced non-finite values")]
    NonFinite,
    #[error("prediction vector length {got} does not match weight length {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("conditional meta-learning needs at least 2 learners and X columns")]
    BadDesign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Discrete,
    Convex,
    Conditional,
}

/// Convex coefficient vector over learners, optionally X-conditional through
/// per-learner softmax parameters `[intercept, X...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub mode: WeightMode,
    pub alpha: Vec<f64>,
    pub beta: Option<Vec<Vec<f64>>>,
}

impl EnsembleWeights {
    pub fn discrete(num_learners: usize, selected: usize) -> Self {
        let mut alpha = vec![0.0; num_learners];
        alpha[selected] = 1.0;
        Self { mode: WeightMode::Discrete, alpha, beta: None }
    }

    pub fn uniform(num_learners: usize) -> Self {
        Self {
            mode: WeightMode::Convex,
            alpha: vec![1.0 / num_learners as f64; num_learners],
            beta: None,
        }
    }

    /// Weights evaluated at baseline covariates `x` (softmax for the
    /// conditional mode, the stored vector otherwise).
    pub fn at(&self, x: Option<&[f64]>) -> Vec<f64> {
        match (&self.beta, x) {
            (Some(beta), Some(x)) => softmax_weights(beta, x),
            (Some(beta), None) => softmax_weights(beta, &[]),
            _ => self.alpha.clone(),
        }
    }
}

/// One validation row of the meta-level regression: per-learner predictions
/// against the realized outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaRow {
    pub subject_id: SubjectId,
    pub chron_time: Time,
    pub subject_time: Time,
    pub x: Vec<f64>,
    pub preds: Vec<f64>,
    pub y: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Default)]
pub struct MetaDesign {
    pub rows: Vec<MetaRow>,
}

impl MetaDesign {
    pub fn num_learners(&self) -> usize {
        self.rows.first().map_or(0, |r| r.preds.len())
    }

    fn weighted_rows(&self) -> impl Iterator<Item = &MetaRow> {
        self.rows.iter().filter(|r| r.weight > 0.0)
    }

    /// Weighted squared-error objective of a fixed weight vector.
    pub fn objective(&self, alpha: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| {
                let yhat: f64 = r.preds.iter().zip(alpha).map(|(p, a)| p * a).sum();
                r.weight * (r.y - yhat) * (r.y - yhat)
            })
            .sum()
    }
}

/// Learner minimizing the mean cross-validated risk; exact and near ties
/// (difference below 1e-12) resolve to the lowest registration index.
pub fn discrete_select(table: &RiskTable, m: Option<Time>) -> Result<LearnerId, SelectorError> {
    let mut best: Option<(LearnerId, f64)> = None;
    for k in table.learners() {
        let Ok(risk) = table.mean_risk(k, m) else { continue };
        match best {
            None => best = Some((k, risk)),
            Some((_, b)) if risk < b - 1e-12 => best = Some((k, risk)),
            _ => {}
        }
    }
    best.map(|(k, _)| k).ok_or(SelectorError::NoMass(RiskError::NoMass { learner: 0, m }))
}

fn softmax_weights(beta: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let scores: Vec<f64> = beta
        .iter()
        .map(|b| b[0] + b[1..].iter().zip(x).map(|(c, v)| c * v).sum::<f64>())
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Lawson-Hanson non-negative least squares on the normal equations
/// `q x = c`, `x >= 0`, where `q` is positive semidefinite.
fn nnls_normal(q: &[Vec<f64>], c: &[f64]) -> Vec<f64> {
    let n = c.len();
    let mut passive = vec![false; n];
    let mut x = vec![0.0; n];
    for _ in 0..10 * n.max(4) {
        // Dual: w = c - Qx on the active (zero) set.
        let w: Vec<f64> = (0..n)
            .map(|j| c[j] - q[j].iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let cand = (0..n)
            .filter(|&j| !passive[j] && w[j] > 1e-12)
            .max_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap());
        let Some(j) = cand else { break };
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let k = idx.len();
            let mut sub_q = nalgebra::DMatrix::zeros(k, k);
            let mut sub_c = nalgebra::DVector::zeros(k);
            for (a, &ia) in idx.iter().enumerate() {
                sub_c[a] = c[ia];
                for (b, &ib) in idx.iter().enumerate() {
                    sub_q[(a, b)] = q[ia][ib];
                }
            }
            let sol = sub_q
                .clone()
                .cholesky()
                .map(|ch| ch.solve(&sub_c))
                .unwrap_or_else(|| sub_q.svd(true, true).solve(&sub_c, 1e-12).unwrap());
            if sol.iter().all(|&v| v > 0.0) {
                x = vec![0.0; n];
                for (a, &ia) in idx.iter().enumerate() {
                    x[ia] = sol[a];
                }
                break;
            }
            // Step toward the subproblem solution until a coordinate hits 0.
            let mut alpha = f64::INFINITY;
            for (a, &ia) in idx.iter().enumerate() {
                if sol[a] <= 0.0 {
                    let step = x[ia] / (x[ia] - sol[a]);
                    alpha = alpha.min(step);
                }
            }
            for (a, &ia) in idx.iter().enumerate() {
                x[ia] += alpha * (sol[a] - x[ia]);
                if x[ia] <= 1e-14 {
                    x[ia] = 0.0;
                    passive[ia] = false;
                }
            }
        }
    }
    x
}

/// Convex ensemble weights minimizing the weighted squared error on the
/// simplex. Solved by sign-constrained least squares, normalization, and a
/// Frank-Wolfe polish of the simplex problem.
pub fn nnls_weights(design: &MetaDesign) -> Result<EnsembleWeights, SelectorError> {
    let k = design.num_learners();
    if k == 0 || design.weighted_rows().next().is_none() {
        return Err(SelectorError::DegenerateDesign);
    }
    if k == 1 {
        return Ok(EnsembleWeights { mode: WeightMode::Convex, alpha: vec![1.0], beta: None });
    }
    // Normal-equation form: Q = sum w p p', c = sum w y p.
    let mut q = vec![vec![0.0; k]; k];
    let mut c = vec![0.0; k];
    for r in design.weighted_rows() {
        for a in 0..k {
            c[a] += r.weight * r.y * r.preds[a];
            for b in 0..k {
                q[a][b] += r.weight * r.preds[a] * r.preds[b];
            }
        }
    }
    let raw = nnls_normal(&q, &c);
    let total: f64 = raw.iter().sum();
    let mut alpha: Vec<f64> = if total > 1e-12 {
        raw.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / k as f64; k]
    };

    // Frank-Wolfe with away steps on the simplex; exact line search for the
    // quadratic objective.
    let grad = |a: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|i| 2.0 * (q[i].iter().zip(a).map(|(u, v)| u * v).sum::<f64>() - c[i]))
            .collect()
    };
    let quad = |d: &[f64]| -> f64 {
        let mut s = 0.0;
        for a in 0..k {
            for b in 0..k {
                s += d[a] * q[a][b] * d[b];
            }
        }
        s
    };
    for _ in 0..20_000 {
        let g = grad(&alpha);
        let fw = (0..k).min_by(|&a, &b| g[a].partial_cmp(&g[b]).unwrap()).unwrap();
        let away = (0..k)
            .filter(|&i| alpha[i] > 1e-15)
            .max_by(|&a, &b| g[a].partial_cmp(&g[b]).unwrap())
            .unwrap();
        let gap: f64 = (0..k).map(|i| g[i] * (alpha[i] - if i == fw { 1.0 } else { 0.0 })).sum();
        if gap <= 1e-13 {
            break;
        }
        // Choose between the toward step and the away step.
        let toward_gap = gap;
        let away_gap: f64 =
            (0..k).map(|i| g[i] * (if i == away { 1.0 } else { 0.0 } - alpha[i])).sum::<f64>();
        let (dir, max_step): (Vec<f64>, f64) = if toward_gap >= -away_gap {
            let d: Vec<f64> =
                (0..k).map(|i| if i == fw { 1.0 } else { 0.0 } - alpha[i]).collect();
            (d, 1.0)
        } else {
            let d: Vec<f64> =
                (0..k).map(|i| alpha[i] - if i == away { 1.0 } else { 0.0 }).collect();
            let m = alpha[away] / (1.0 - alpha[away]).max(1e-15);
            (d, m)
        };
        let denom = 2.0 * quad(&dir);
        let numer: f64 = -(0..k).map(|i| g[i] * dir[i]).sum::<f64>();
        if denom <= 0.0 || !numer.is_finite() {
            break;
        }
        let step = (numer / denom).clamp(0.0, max_step);
        if step <= 0.0 {
            break;
        }
        for i in 0..k {
            alpha[i] += step * dir[i];
        }
    }
    // Tidy tiny negatives from floating point and renormalize.
    let mut sum = 0.0;
    for a in alpha.iter_mut() {
        if *a < 0.0 {
            *a = 0.0;
        }
        sum += *a;
    }
    for a in alpha.iter_mut() {
        *a /= sum;
    }
    Ok(EnsembleWeights { mode: WeightMode::Convex, alpha, beta: None })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalConfig {
    pub iterations: usize,
    pub step: f64,
}

impl Default for ConditionalConfig {
    fn default() -> Self {
        Self { iterations: 500, step: 0.01 }
    }
}

/// Fits the softmax family `alpha_k(X) = exp(b_k0 + b_k . X) / sum_k ...`
/// by first-order descent with step acceptance; the returned objective never
/// exceeds the uniform-weights starting point.
pub fn fit_conditional(
    design: &MetaDesign,
    config: &ConditionalConfig,
) -> Result<EnsembleWeights, SelectorError> {
    let k = design.num_learners();
    if k < 2 {
        return Err(SelectorError::BadDesign);
    }
    if design.weighted_rows().next().is_none() {
        return Err(SelectorError::DegenerateDesign);
    }
    let xdim = design.rows[0].x.len();
    let objective = |beta: &[Vec<f64>]| -> f64 {
        design
            .weighted_rows()
            .map(|r| {
                let w = softmax_weights(beta, &r.x);
                let yhat: f64 = w.iter().zip(&r.preds).map(|(a, p)| a * p).sum();
                r.weight * (r.y - yhat) * (r.y - yhat)
            })
            .sum()
    };
    let gradient = |beta: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut g = vec![vec![0.0; 1 + xdim]; k];
        for r in design.weighted_rows() {
            let w = softmax_weights(beta, &r.x);
            let yhat: f64 = w.iter().zip(&r.preds).map(|(a, p)| a * p).sum();
            let resid = 2.0 * r.weight * (yhat - r.y);
            for j in 0..k {
                let ds = resid * w[j] * (r.preds[j] - yhat);
                g[j][0] += ds;
                for (d, xv) in r.x.iter().enumerate() {
                    g[j][d + 1] += ds * xv;
                }
            }
        }
        g
    };

    let mut beta = vec![vec![0.0; 1 + xdim]; k];
    let mut obj = objective(&beta);
    if !obj.is_finite() {
        return Err(SelectorError::NonFinite);
    }
    let mut step = config.step;
    for _ in 0..config.iterations {
        let g = gradient(&beta);
        if g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SelectorError::NonFinite);
        }
        let cand: Vec<Vec<f64>> = beta
            .iter()
            .zip(&g)
            .map(|(b, gb)| b.iter().zip(gb).map(|(v, d)| v - step * d).collect())
            .collect();
        let cand_obj = objective(&cand);
        if cand_obj.is_finite() && cand_obj <= obj {
            beta = cand;
            obj = cand_obj;
        } else {
            step *= 0.5;
            if step < 1e-12 {
                break;
            }
        }
    }
    let alpha = softmax_weights(&beta, &vec![0.0; xdim]);
    Ok(EnsembleWeights { mode: WeightMode::Conditional, alpha, beta: Some(beta) })
}

/// Dot product of the weight vector (evaluated at `x` for the conditional
/// mode) with the per-learner predictions.
pub fn combine(
    weights: &EnsembleWeights,
    preds: &[f64],
    x: Option<&[f64]>,
) -> Result<f64, SelectorError> {
    let alpha = weights.at(x);
    if alpha.len() != preds.len() {
        return Err(SelectorError::DimensionMismatch { expected: alpha.len(), got: preds.len() });
    }
    Ok(alpha.iter().zip(preds).map(|(a, p)| a * p).sum())
}
