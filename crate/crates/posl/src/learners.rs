//! Candidate base learners with a uniform fit/update/predict contract.
//!
//! Historical learners pool rows across subjects; individual learners are
//! restricted to a single subject's stream. The linear families share one
//! feature map: `[intercept, Z, X]` for historical scope and `[intercept, Z]`
//! for individual scope (baseline covariates are constant within a subject).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{make_summary, PanelError, PanelRecord, SubjectId, SummarySpec, Time};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("training set is empty")]
    EmptyTrain,
    #[error("individual-scope learner received rows from {0} subjects")]
    MixedSubjects(usize),
    #[error("feature vector length {got} does not match trained length {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch contains times at or before trained_through={0}")]
    StaleBatch(Time),
    #[error("invalid hyperparameter: {0}")]
    BadHyper(String),
    #[error(transparent)]
    Panel(#[from] PanelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum LearnerFamily {
    /// Ordinary least squares on the lagged summary, refit on a buffer.
    LagLinear,
    /// Ridge regression maintained through recursive sufficient statistics.
    RidgeRls { lambda: f64 },
    /// Per-subject exponentially smoothed level.
    ExpSmooth { factor: f64 },
    /// The pooled outcome mean.
    GlobalMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Historical,
    Individual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub name: String,
    #[serde(flatten)]
    pub family: LearnerFamily,
    pub scope: Scope,
    pub summary: SummarySpec,
}

impl LearnerSpec {
    pub fn validate(&self) -> Result<(), LearnerError> {
        self.summary.validate().map_err(LearnerError::Panel)?;
        match self.family {
            LearnerFamily::RidgeRls { lambda } if lambda < 0.0 => {
                Err(LearnerError::BadHyper("ridge lambda must be >= 0".into()))
            }
            LearnerFamily::ExpSmooth { factor } if !(factor > 0.0 && factor <= 1.0) => {
                Err(LearnerError::BadHyper("smoothing factor must be in (0, 1]".into()))
            }
            _ => Ok(()),
        }
    }

    fn uses_baseline(&self) -> bool {
        self.scope == Scope::Historical
    }
}

/// One training observation: baseline covariates, summary state, time, and
/// the outcome it predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub subject_id: SubjectId,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub t: Time,
    pub y: f64,
}

fn features(spec: &LearnerSpec, x: &[f64], z: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(1 + z.len() + x.len());
    f.push(1.0);
    f.extend_from_slice(z);
    if spec.uses_baseline() {
        f.extend_from_slice(x);
    }
    f
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    GlobalMean {
        sum: f64,
        count: f64,
    },
    ExpSmooth {
        factor: f64,
        levels: BTreeMap<SubjectId, f64>,
    },
    /// Normal-equation sufficient statistics; the intercept is unpenalized.
    Ridge {
        xtx: DMatrix<f64>,
        xty: DVector<f64>,
        lambda: f64,
        coef: DVector<f64>,
    },
    /// Row buffer refit with plain least squares on every update.
    Buffer {
        rows: Vec<(Vec<f64>, f64)>,
        coef: DVector<f64>,
        jittered: bool,
    },
}

/// A trained predictor. `fit` and `update` return new values; prediction is
/// deterministic given the state.
#[derive(Debug, Clone)]
pub struct FittedLearner {
    pub spec: LearnerSpec,
    state: State,
    trained_through: Time,
    train_count: usize,
}

const JITTER: f64 = 1e-8;

fn solve_penalized(
    xtx: &DMatrix<f64>,
    xty: &DVector<f64>,
    lambda: f64,
) -> (DVector<f64>, bool) {
    let dim = xtx.nrows();
    let mut lhs = xtx.clone();
    for j in 1..dim {
        lhs[(j, j)] += lambda;
    }
    let scale = (0..dim).map(|j| lhs[(j, j)]).fold(1.0_f64, f64::max);
    if let Some(chol) = lhs.clone().cholesky() {
        // A tiny pivot means the design is numerically rank-deficient even
        // when the factorization formally goes through.
        let min_pivot = (0..dim).map(|j| chol.l()[(j, j)]).fold(f64::INFINITY, f64::min);
        if min_pivot > 1e-7 * scale.sqrt() {
            return (chol.solve(xty), false);
        }
    }
    // Singular design: resolve with a small ridge jitter and flag the fit.
    for j in 0..dim {
        lhs[(j, j)] += JITTER;
    }
    let chol = lhs.cholesky().expect("jittered normal equations are positive definite");
    (chol.solve(xty), true)
}

fn normal_equations(rows: &[(Vec<f64>, f64)]) -> (DMatrix<f64>, DVector<f64>) {
    let dim = rows[0].0.len();
    let mut xtx = DMatrix::zeros(dim, dim);
    let mut xty = DVector::zeros(dim);
    for (f, y) in rows {
        for a in 0..dim {
            xty[a] += f[a] * *y;
            for b in 0..dim {
                xtx[(a, b)] += f[a] * f[b];
            }
        }
    }
    (xtx, xty)
}

fn check_rows(spec: &LearnerSpec, rows: &[TrainRow]) -> Result<(), LearnerError> {
    if rows.is_empty() {
        return Err(LearnerError::EmptyTrain);
    }
    if spec.scope == Scope::Individual {
        let distinct: std::collections::BTreeSet<SubjectId> =
            rows.iter().map(|r| r.subject_id).collect();
        if distinct.len() > 1 {
            return Err(LearnerError::MixedSubjects(distinct.len()));
        }
    }
    let zl = rows[0].z.len();
    let xl = rows[0].x.len();
    if rows.iter().any(|r| r.z.len() != zl || r.x.len() != xl) {
        return Err(LearnerError::DimensionMismatch { expected: zl, got: 0 });
    }
    Ok(())
}

/// Trains a learner from scratch on the given rows.
pub fn fit(spec: &LearnerSpec, rows: &[TrainRow]) -> Result<FittedLearner, LearnerError> {
    spec.validate()?;
    check_rows(spec, rows)?;
    let mut ordered: Vec<&TrainRow> = rows.iter().collect();
    ordered.sort_by_key(|r| (r.subject_id, r.t));
    let trained_through = ordered.iter().map(|r| r.t).max().unwrap();
    let state = match spec.family {
        LearnerFamily::GlobalMean => State::GlobalMean {
            sum: ordered.iter().map(|r| r.y).sum(),
            count: ordered.len() as f64,
        },
        LearnerFamily::ExpSmooth { factor } => {
            let mut levels = BTreeMap::new();
            for r in &ordered {
                let level = levels.entry(r.subject_id).or_insert(r.y);
                *level = factor * r.y + (1.0 - factor) * *level;
            }
            State::ExpSmooth { factor, levels }
        }
        LearnerFamily::RidgeRls { lambda } => {
            let frows: Vec<(Vec<f64>, f64)> =
                ordered.iter().map(|r| (features(spec, &r.x, &r.z), r.y)).collect();
            let (xtx, xty) = normal_equations(&frows);
            let (coef, _) = solve_penalized(&xtx, &xty, lambda);
            State::Ridge { xtx, xty, lambda, coef }
        }
        LearnerFamily::LagLinear => {
            let frows: Vec<(Vec<f64>, f64)> =
                ordered.iter().map(|r| (features(spec, &r.x, &r.z), r.y)).collect();
            let (xtx, xty) = normal_equations(&frows);
            let (coef, jittered) = solve_penalized(&xtx, &xty, 0.0);
            State::Buffer { rows: frows, coef, jittered }
        }
    };
    Ok(FittedLearner { spec: spec.clone(), state, trained_through, train_count: rows.len() })
}

impl FittedLearner {
    pub fn trained_through(&self) -> Time {
        self.trained_through
    }

    pub fn train_count(&self) -> usize {
        self.train_count
    }

    /// Whether a singular design was resolved with a ridge jitter.
    pub fn jitter_flagged(&self) -> bool {
        matches!(self.state, State::Buffer { jittered: true, .. })
    }

    /// Linear coefficients for the linear families, `[intercept, Z, X]`.
    pub fn coefficients(&self) -> Option<Vec<f64>> {
        match &self.state {
            State::Ridge { coef, .. } | State::Buffer { coef, .. } => {
                Some(coef.iter().copied().collect())
            }
            _ => None,
        }
    }

    /// Absorbs a batch of later observations without revisiting the past
    /// (the buffered family refits on its internal buffer).
    pub fn update(&self, batch: &[TrainRow]) -> Result<FittedLearner, LearnerError> {
        if batch.is_empty() {
            return Ok(self.clone());
        }
        if batch.iter().any(|r| r.t <= self.trained_through) {
            return Err(LearnerError::StaleBatch(self.trained_through));
        }
        check_rows(&self.spec, batch)?;
        let mut ordered: Vec<&TrainRow> = batch.iter().collect();
        ordered.sort_by_key(|r| (r.subject_id, r.t));
        let mut next = self.clone();
        next.trained_through = ordered.iter().map(|r| r.t).max().unwrap();
        next.train_count += batch.len();
        match &mut next.state {
            State::GlobalMean { sum, count } => {
                *sum += ordered.iter().map(|r| r.y).sum::<f64>();
                *count += ordered.len() as f64;
            }
            State::ExpSmooth { factor, levels } => {
                for r in &ordered {
                    let level = levels.entry(r.subject_id).or_insert(r.y);
                    *level = *factor * r.y + (1.0 - *factor) * *level;
                }
            }
            State::Ridge { xtx, xty, lambda, coef } => {
                let dim = xtx.nrows();
                for r in &ordered {
                    let f = features(&self.spec, &r.x, &r.z);
                    if f.len() != dim {
                        return Err(LearnerError::DimensionMismatch { expected: dim, got: f.len() });
                    }
                    for a in 0..dim {
                        xty[a] += f[a] * r.y;
                        for b in 0..dim {
                            xtx[(a, b)] += f[a] * f[b];
                        }
                    }
                }
                let (c, _) = solve_penalized(xtx, xty, *lambda);
                *coef = c;
            }
            State::Buffer { rows, coef, jittered } => {
                for r in &ordered {
                    rows.push((features(&self.spec, &r.x, &r.z), r.y));
                }
                let (xtx, xty) = normal_equations(rows);
                let (c, j) = solve_penalized(&xtx, &xty, 0.0);
                *coef = c;
                *jittered = j;
            }
        }
        Ok(next)
    }

    /// Predicts the outcome for `(subject, X, Z, t)`.
    pub fn predict(
        &self,
        subject: SubjectId,
        x: &[f64],
        z: &[f64],
        _t: Time,
    ) -> Result<f64, LearnerError> {
        match &self.state {
            State::GlobalMean { sum, count } => Ok(sum / count),
            State::ExpSmooth { levels, .. } => {
                if let Some(level) = levels.get(&subject) {
                    Ok(*level)
                } else {
                    // Unseen subject: fall back to the average level.
                    Ok(levels.values().sum::<f64>() / levels.len() as f64)
                }
            }
            State::Ridge { coef, .. } | State::Buffer { coef, .. } => {
                let f = features(&self.spec, x, z);
                if f.len() != coef.len() {
                    return Err(LearnerError::DimensionMismatch {
                        expected: coef.len(),
                        got: f.len(),
                    });
                }
                Ok(f.iter().zip(coef.iter()).map(|(a, b)| a * b).sum())
            }
        }
    }

    /// Multi-step forecasts from the end of `record`, feeding each prediction
    /// back into the summary state. Time-varying covariates are held at their
    /// last observed values.
    pub fn forecast_recursive(
        &self,
        record: &PanelRecord,
        horizon: usize,
    ) -> Result<Vec<f64>, LearnerError> {
        assert!(horizon >= 1);
        let mut work = record.clone();
        let last_w: Vec<f64> = record
            .covariates_at(record.last_time())
            .map(|w| w.to_vec())
            .unwrap_or_default();
        let mut out = Vec::with_capacity(horizon);
        for step in 0..horizon {
            let t = record.last_time() + 1 + step as Time;
            let z = make_summary(&work, &self.spec.summary, t)?;
            let yhat = self.predict(record.subject_id, &record.baseline, &z.values, t)?;
            out.push(yhat);
            work.push(last_w.clone(), yhat)?;
        }
        Ok(out)
    }
}
