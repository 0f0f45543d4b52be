//! The online personalized ensembling loop: pooled learners are fit on the
//! historical panel, per-subject learners join once the target stream passes
//! the warmup, and every batch re-scores newly completed validation folds
//! into the risk table before refreshing the ensemble weights.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cv::{build_folds, CvError, CvScheme, FoldAssignment, FoldSpec};
use crate::learners::{fit, FittedLearner, LearnerError, LearnerSpec, Scope, TrainRow};
use crate::learners::{LearnerFamily};
use crate::panel::{
    make_summary, Panel, PanelError, PanelRecord, SubjectId, SummarySpec, Time,
};
use crate::risk::{decay_weight, DecaySpec, LearnerId, LossRecord, RiskError, RiskTable};
use crate::selector::{
    discrete_select, fit_conditional, nnls_weights, ConditionalConfig, EnsembleWeights, MetaDesign,
    MetaRow, SelectorError, WeightMode,
};
use crate::simgen::TruthTrace;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid engine configuration: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Cv(#[from] CvError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Selector(#[from] SelectorError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("no truth value for subject {id} at t={t}")]
    NoTruth { id: SubjectId, t: Time },
    #[error("no scored validation losses yet")]
    EmptyRiskTable,
}

/// Everything the loop needs to run: the candidate library, fold geometry,
/// loss decay, ensembling mode, and streaming cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub learners: Vec<LearnerSpec>,
    pub fold_spec: FoldSpec,
    pub decay: DecaySpec,
    pub mode: WeightMode,
    /// Observations absorbed per streaming step.
    pub batch_size: Time,
    /// Subject time before which only pooled learners are candidates.
    pub warmup: Time,
    pub forecast_horizon: usize,
    /// Chronological times at which the pooled learners are refit with the
    /// target's history included. Time 0 means the initial fit only.
    pub historical_refresh_times: BTreeSet<Time>,
    /// Prefer the risk stratum at the current subject time for discrete
    /// selection, falling back to the overall risk.
    pub per_m_selection: bool,
    pub conditional: ConditionalConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            learners: default_library(),
            fold_spec: FoldSpec::rolling_origin(10, 5, 5, 0),
            decay: DecaySpec::default(),
            mode: WeightMode::Convex,
            batch_size: 5,
            warmup: 60,
            forecast_horizon: 5,
            historical_refresh_times: BTreeSet::from([0]),
            per_m_selection: false,
            conditional: ConditionalConfig::default(),
        }
    }
}

/// The stock candidate library: pooled mean, pooled ridge and least squares
/// on five lags, plus per-subject mean, smoothing, and least squares.
pub fn default_library() -> Vec<LearnerSpec> {
    vec![
        LearnerSpec {
            name: "hist_mean".into(),
            family: LearnerFamily::GlobalMean,
            scope: Scope::Historical,
            summary: SummarySpec::lag_window(1),
        },
        LearnerSpec {
            name: "hist_ridge".into(),
            family: LearnerFamily::RidgeRls { lambda: 1.0 },
            scope: Scope::Historical,
            summary: SummarySpec::lag_window(5),
        },
        LearnerSpec {
            name: "hist_lag".into(),
            family: LearnerFamily::LagLinear,
            scope: Scope::Historical,
            summary: SummarySpec::lag_window(5),
        },
        LearnerSpec {
            name: "ind_mean".into(),
            family: LearnerFamily::GlobalMean,
            scope: Scope::Individual,
            summary: SummarySpec::lag_window(1),
        },
        LearnerSpec {
            name: "ind_smooth".into(),
            family: LearnerFamily::ExpSmooth { factor: 0.3 },
            scope: Scope::Individual,
            summary: SummarySpec::lag_window(1),
        },
        LearnerSpec {
            name: "ind_lag".into(),
            family: LearnerFamily::LagLinear,
            scope: Scope::Individual,
            summary: SummarySpec::lag_window(5),
        },
        // A longer lag window than the pooled least squares: the per-subject
        // learner is the one expected to chase structure the pooled fits
        // cannot express, at the cost of needing more history to settle.
        LearnerSpec {
            name: "ind_lag_long".into(),
            family: LearnerFamily::LagLinear,
            scope: Scope::Individual,
            summary: SummarySpec::lag_window(10),
        },
    ]
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.learners.is_empty() {
            return Err(EngineError::BadConfig("learner library is empty".into()));
        }
        for spec in &self.learners {
            spec.validate()?;
        }
        if !self.learners.iter().any(|l| l.scope == Scope::Historical) {
            return Err(EngineError::BadConfig("need at least one pooled learner".into()));
        }
        let max_memory = self.learners.iter().map(|l| l.summary.memory).max().unwrap_or(1);
        if (self.warmup as usize) < max_memory {
            return Err(EngineError::BadConfig(format!(
                "warmup {} is below the largest learner lag {max_memory}",
                self.warmup
            )));
        }
        if self.batch_size < 1 {
            return Err(EngineError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.forecast_horizon < 1 {
            return Err(EngineError::BadConfig("forecast_horizon must be >= 1".into()));
        }
        if matches!(
            self.fold_spec.scheme,
            CvScheme::RollingOriginVfold | CvScheme::RollingWindowVfold
        ) {
            return Err(EngineError::BadConfig(
                "single-stream engine needs a rolling scheme, not a V-fold variant".into(),
            ));
        }
        self.fold_spec.validate()?;
        if self.decay.full_weight_window >= self.decay.zero_weight_cutoff
            || !(0.0..1.0).contains(&self.decay.rate)
        {
            return Err(EngineError::BadConfig("invalid decay schedule".into()));
        }
        Ok(())
    }
}

/// Forecasts and ensembling state emitted after each streaming step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Last observed chronological time of the target stream.
    pub chron_time: Time,
    /// The target's subject time `m` at that point.
    pub subject_time: Time,
    /// Per-learner recursive forecasts; `None` for learners not yet fit.
    pub learner_forecasts: Vec<Option<Vec<f64>>>,
    pub ensemble_forecast: Vec<f64>,
    pub weights: EnsembleWeights,
    /// Discrete-mode pick, when one exists.
    pub selected: Option<LearnerId>,
    /// Validation folds scored during this step.
    pub new_folds_scored: usize,
}

/// Cumulative distances to the data-generating conditional mean, used to
/// grade selection against an oracle that knows the truth.
#[derive(Debug, Clone)]
pub struct OracleReport {
    /// Weighted mean squared distance from each learner's validation
    /// predictions to the true conditional mean.
    pub risks: Vec<(LearnerId, f64)>,
    pub oracle_choice: LearnerId,
    pub selected_choice: LearnerId,
    pub oracle_risk: f64,
    pub selected_risk: f64,
    /// `selected_risk / oracle_risk`, at least 1 by construction.
    pub ratio: f64,
    /// Distance of the current ensemble on rows where every learner
    /// predicted.
    pub ensemble_risk: Option<f64>,
}

pub struct Engine {
    config: EngineConfig,
    historical: Panel,
    target: PanelRecord,
    fitted: Vec<Option<FittedLearner>>,
    risk: RiskTable,
    meta_rows: Vec<MetaRow>,
    weights: EnsembleWeights,
    selected: Option<LearnerId>,
    folds_done: usize,
    refreshes_done: BTreeSet<Time>,
}

/// Training rows for one record over chronological times in `[lo, hi]`,
/// skipping times without enough history for the summary.
fn rows_for(record: &PanelRecord, summary: &SummarySpec, lo: Time, hi: Time) -> Vec<TrainRow> {
    let mut rows = Vec::new();
    for &s in record.times() {
        if s < lo || s > hi {
            continue;
        }
        let Ok(z) = make_summary(record, summary, s) else { continue };
        let Some(y) = record.outcome_at(s) else { continue };
        rows.push(TrainRow {
            subject_id: record.subject_id,
            x: record.baseline.clone(),
            z: z.values,
            t: s,
            y,
        });
    }
    rows
}

impl Engine {
    pub fn new(
        config: EngineConfig,
        historical: Panel,
        target_seed: PanelRecord,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let k = config.learners.len();
        let mut engine = Engine {
            weights: EnsembleWeights::uniform(k),
            fitted: vec![None; k],
            risk: RiskTable::new(),
            meta_rows: Vec::new(),
            selected: None,
            folds_done: 0,
            refreshes_done: BTreeSet::from([0]),
            config,
            historical,
            target: target_seed,
        };
        engine.fit_historical(None)?;
        engine.update_individual_learners(0)?;
        engine.advance()?;
        Ok(engine)
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn target(&self) -> &PanelRecord {
        &self.target
    }

    pub fn risk_table(&self) -> &RiskTable {
        &self.risk
    }

    /// The risk table with the decay schedule applied at the current subject
    /// clock; this is the view selection and weighting run against.
    pub fn decayed_risk_table(&self) -> RiskTable {
        self.risk.decayed(self.subject_clock(), &self.config.decay)
    }

    pub fn weights(&self) -> &EnsembleWeights {
        &self.weights
    }

    pub fn fitted_learner(&self, k: LearnerId) -> Option<&FittedLearner> {
        self.fitted.get(k).and_then(|f| f.as_ref())
    }

    /// The target's subject time `m` at its last observation.
    pub fn subject_clock(&self) -> Time {
        self.target.last_time() - self.target.entry_time()
    }

    fn num_learners(&self) -> usize {
        self.config.learners.len()
    }

    fn is_active(&self, k: LearnerId) -> bool {
        self.config.learners[k].scope == Scope::Historical
            || self.subject_clock() >= self.config.warmup
    }

    /// Minimum training rows before a per-subject learner is worth scoring:
    /// below this a least-squares fit is mostly interpolation and its
    /// validation losses measure noise, not the learner.
    fn min_train_rows(spec: &LearnerSpec) -> usize {
        3 * (2 + spec.summary.memory)
    }

    /// A per-subject learner joins the weight computation once it is past
    /// the warmup and has enough live validation evidence to be compared
    /// fairly against the pooled learners.
    fn has_evidence(&self, k: LearnerId) -> bool {
        const MIN_DESIGN_ROWS: usize = 45;
        if self.config.learners[k].scope == Scope::Historical {
            return true;
        }
        let clock_m = self.subject_clock();
        let live = self
            .meta_rows
            .iter()
            .filter(|r| {
                r.preds[k].is_finite()
                    && decay_weight(clock_m, r.subject_time, &self.config.decay) > 0.0
            })
            .count();
        live >= MIN_DESIGN_ROWS
    }

    /// Refits every pooled learner on the historical panel, optionally with
    /// the target's history through `upto` included.
    fn fit_historical(&mut self, upto: Option<Time>) -> Result<(), EngineError> {
        for (k, spec) in self.config.learners.iter().enumerate() {
            if spec.scope != Scope::Historical {
                continue;
            }
            let mut rows = Vec::new();
            for r in self.historical.records() {
                rows.extend(rows_for(r, &spec.summary, 0, r.last_time()));
            }
            if let Some(cut) = upto {
                if let Some(head) = self.target.truncated(cut) {
                    rows.extend(rows_for(&head, &spec.summary, 0, cut));
                }
            }
            self.fitted[k] = Some(fit(spec, &rows)?);
        }
        Ok(())
    }

    /// Brings the per-subject learners up to the target's clock once the
    /// warmup has passed: a fresh fit the first time, batch updates after.
    fn update_individual_learners(&mut self, batch_from: Time) -> Result<(), EngineError> {
        if self.subject_clock() < self.config.warmup {
            return Ok(());
        }
        for (k, spec) in self.config.learners.iter().enumerate() {
            if spec.scope != Scope::Individual {
                continue;
            }
            let last = self.target.last_time();
            match &self.fitted[k] {
                None => {
                    let rows = rows_for(&self.target, &spec.summary, 0, last);
                    if !rows.is_empty() {
                        self.fitted[k] = Some(fit(spec, &rows)?);
                    }
                }
                Some(f) => {
                    let lo = (f.trained_through() + 1).max(batch_from);
                    let rows = rows_for(&self.target, &spec.summary, lo, last);
                    self.fitted[k] = Some(f.update(&rows)?);
                }
            }
        }
        Ok(())
    }

    /// Scores one newly completed fold: per-subject learners are refit on the
    /// fold's training window, pooled learners predict as trained, and each
    /// validation point yields a loss row plus a meta-level regression row.
    fn score_fold(
        &self,
        fold: &FoldAssignment,
        losses: &mut Vec<LossRecord>,
        meta: &mut Vec<MetaRow>,
    ) -> Result<(), EngineError> {
        let k = self.num_learners();
        let entry = self.target.entry_time();

        // Per-subject learners are cross-validated from the first fold even
        // though they only become forecast candidates after the warmup:
        // their early small-window fits accrue honestly large losses, which
        // is what lets the ensemble weight shift toward them gradually.
        let mut fold_fits: Vec<Option<FittedLearner>> = vec![None; k];
        for (j, spec) in self.config.learners.iter().enumerate() {
            match spec.scope {
                Scope::Historical => fold_fits[j] = self.fitted[j].clone(),
                Scope::Individual => {
                    let rows: Vec<TrainRow> = fold
                        .train
                        .iter()
                        .filter_map(|&(_, m)| {
                            let s = entry + m;
                            let z = make_summary(&self.target, &spec.summary, s).ok()?;
                            let y = self.target.outcome_at(s)?;
                            Some(TrainRow {
                                subject_id: self.target.subject_id,
                                x: self.target.baseline.clone(),
                                z: z.values,
                                t: s,
                                y,
                            })
                        })
                        .collect();
                    if rows.len() >= Self::min_train_rows(spec) {
                        fold_fits[j] = fit(spec, &rows).ok();
                    }
                }
            }
        }

        // Losses and meta rows enter with unit base weight; the decay
        // schedule is applied against the live subject clock whenever risks
        // or ensemble weights are computed, so old losses fade as the stream
        // moves on instead of keeping the weight they had when scored.
        for &(_, m) in &fold.validation {
            let s = entry + m;
            let Some(y) = self.target.outcome_at(s) else { continue };
            let weight = 1.0;
            let mut preds = vec![f64::NAN; k];
            for (j, spec) in self.config.learners.iter().enumerate() {
                let Some(f) = &fold_fits[j] else { continue };
                let Ok(z) = make_summary(&self.target, &spec.summary, s) else { continue };
                let Ok(p) =
                    f.predict(self.target.subject_id, &self.target.baseline, &z.values, s)
                else {
                    continue;
                };
                preds[j] = p;
                losses.push(LossRecord {
                    learner_id: j,
                    subject_id: self.target.subject_id,
                    chron_time: s,
                    subject_time: m,
                    loss: (y - p) * (y - p),
                    weight,
                });
            }
            meta.push(MetaRow {
                subject_id: self.target.subject_id,
                chron_time: s,
                subject_time: m,
                x: self.target.baseline.clone(),
                preds,
                y,
                weight,
            });
        }
        Ok(())
    }

    /// Scores every fold that completed since the last step, then refreshes
    /// the risk table and ensemble weights.
    fn advance(&mut self) -> Result<(), EngineError> {
        let clock_m = self.subject_clock();
        let folds = match build_folds(
            &self.config.fold_spec,
            &BTreeSet::from([self.target.subject_id]),
            clock_m,
        ) {
            Ok(f) => f,
            Err(CvError::SpecDoesNotFit { .. }) => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let mut losses = Vec::new();
        let mut meta = Vec::new();
        let already = self.folds_done;
        for fold in folds.iter().filter(|f| f.fold_index > already) {
            self.score_fold(fold, &mut losses, &mut meta)?;
            self.folds_done = self.folds_done.max(fold.fold_index);
        }
        self.risk = self
            .risk
            .accumulate(&losses, self.target.last_time())?
            .prune(clock_m, &self.config.decay);
        self.meta_rows.extend(meta);
        // Fully decayed meta rows can never matter again either.
        let decay = self.config.decay;
        self.meta_rows.retain(|r| {
            r.subject_time > clock_m || decay_weight(clock_m, r.subject_time, &decay) > 0.0
        });
        let (weights, selected) = self.compute_weights();
        self.weights = weights;
        self.selected = selected;
        Ok(())
    }

    /// Meta design restricted to learners in `active`, keeping rows where all
    /// of them produced predictions. Row weights carry the decay schedule
    /// evaluated at the current subject clock.
    fn project_design(&self, active: &[LearnerId]) -> MetaDesign {
        let clock_m = self.subject_clock();
        MetaDesign {
            rows: self
                .meta_rows
                .iter()
                .filter(|r| active.iter().all(|&k| r.preds[k].is_finite()))
                .filter_map(|r| {
                    let w = r.weight * decay_weight(clock_m, r.subject_time, &self.config.decay);
                    if w <= 0.0 {
                        return None;
                    }
                    Some(MetaRow {
                        preds: active.iter().map(|&k| r.preds[k]).collect(),
                        x: r.x.clone(),
                        weight: w,
                        ..r.clone()
                    })
                })
                .collect(),
        }
    }

    fn embed(&self, small: &[f64], active: &[LearnerId]) -> Vec<f64> {
        let mut alpha = vec![0.0; self.num_learners()];
        for (v, &k) in small.iter().zip(active) {
            alpha[k] = *v;
        }
        alpha
    }

    fn compute_weights(&self) -> (EnsembleWeights, Option<LearnerId>) {
        let k = self.num_learners();
        let active: Vec<LearnerId> =
            (0..k).filter(|&j| self.is_active(j) && self.has_evidence(j)).collect();
        let uniform = EnsembleWeights {
            mode: self.config.mode,
            alpha: self.embed(&vec![1.0 / active.len() as f64; active.len()], &active),
            beta: None,
        };
        match self.config.mode {
            WeightMode::Discrete => {
                let snap = self.risk.decayed(self.subject_clock(), &self.config.decay);
                let pick = if self.config.per_m_selection {
                    discrete_select(&snap, Some(self.subject_clock()))
                        .or_else(|_| discrete_select(&snap, None))
                } else {
                    discrete_select(&snap, None)
                };
                match pick {
                    Ok(j) => (EnsembleWeights::discrete(k, j), Some(j)),
                    Err(_) => (uniform, None),
                }
            }
            WeightMode::Convex => {
                let design = self.project_design(&active);
                match nnls_weights(&design) {
                    Ok(w) => (
                        EnsembleWeights {
                            mode: WeightMode::Convex,
                            alpha: self.embed(&w.alpha, &active),
                            beta: None,
                        },
                        None,
                    ),
                    Err(_) => (uniform, None),
                }
            }
            WeightMode::Conditional => {
                // The softmax family needs the full library; before every
                // learner is a candidate, fall back to flat weights.
                if active.len() < k {
                    return (uniform, None);
                }
                let design = self.project_design(&active);
                match fit_conditional(&design, &self.config.conditional) {
                    Ok(w) => (w, None),
                    Err(_) => (uniform, None),
                }
            }
        }
    }

    /// Absorbs one batch of `(covariates, outcome)` observations and returns
    /// forecasts from the refreshed ensemble.
    pub fn step(&mut self, batch: &[(Vec<f64>, f64)]) -> Result<StepOutput, EngineError> {
        if batch.is_empty() {
            return Err(EngineError::BadConfig("empty batch".into()));
        }
        let batch_from = self.target.last_time() + 1;
        for (w, y) in batch {
            self.target.push(w.clone(), *y)?;
        }
        let folds_before = self.folds_done;

        // Refit the pooled learners at any refresh time this batch crossed.
        let due: Vec<Time> = self
            .config
            .historical_refresh_times
            .iter()
            .copied()
            .filter(|&r| r > 0 && r <= self.target.last_time() && !self.refreshes_done.contains(&r))
            .collect();
        for r in due {
            self.fit_historical(Some(r))?;
            self.refreshes_done.insert(r);
        }

        self.update_individual_learners(batch_from)?;
        self.advance()?;
        Ok(self.output(self.folds_done - folds_before))
    }

    /// Forecasts and current ensembling state without absorbing new data.
    pub fn current_output(&self) -> StepOutput {
        self.output(0)
    }

    fn output(&self, new_folds_scored: usize) -> StepOutput {
        let horizon = self.config.forecast_horizon;
        let learner_forecasts: Vec<Option<Vec<f64>>> = (0..self.num_learners())
            .map(|j| {
                if !self.is_active(j) {
                    return None;
                }
                self.fitted[j]
                    .as_ref()
                    .and_then(|f| f.forecast_recursive(&self.target, horizon).ok())
            })
            .collect();
        let alpha = self.weights.at(Some(&self.target.baseline));
        let ensemble_forecast: Vec<f64> = (0..horizon)
            .map(|h| {
                let mut num = 0.0;
                let mut den = 0.0;
                for (j, fc) in learner_forecasts.iter().enumerate() {
                    if alpha[j] > 0.0 {
                        if let Some(fc) = fc {
                            num += alpha[j] * fc[h];
                            den += alpha[j];
                        }
                    }
                }
                if den > 0.0 {
                    num / den
                } else {
                    f64::NAN
                }
            })
            .collect();
        StepOutput {
            chron_time: self.target.last_time(),
            subject_time: self.subject_clock(),
            learner_forecasts,
            ensemble_forecast,
            weights: self.weights.clone(),
            selected: self.selected,
            new_folds_scored,
        }
    }

    /// Grades selection against an oracle that evaluates every learner's
    /// validation predictions directly against the true conditional mean.
    pub fn oracle_eval(&self, truth: &TruthTrace) -> Result<OracleReport, EngineError> {
        let k = self.num_learners();
        let mut num = vec![0.0; k];
        let mut den = vec![0.0; k];
        let mut ens_num = 0.0;
        let mut ens_den = 0.0;
        let clock_m = self.subject_clock();
        for r in &self.meta_rows {
            let weight = r.weight * decay_weight(clock_m, r.subject_time, &self.config.decay);
            if weight <= 0.0 {
                continue;
            }
            let psi0 = truth
                .get(r.subject_id, r.chron_time)
                .ok_or(EngineError::NoTruth { id: r.subject_id, t: r.chron_time })?;
            for j in 0..k {
                if r.preds[j].is_finite() {
                    num[j] += weight * (r.preds[j] - psi0) * (r.preds[j] - psi0);
                    den[j] += weight;
                }
            }
            if r.preds.iter().all(|p| p.is_finite()) {
                let alpha = self.weights.at(Some(&r.x));
                let yhat: f64 = alpha.iter().zip(&r.preds).map(|(a, p)| a * p).sum();
                ens_num += weight * (yhat - psi0) * (yhat - psi0);
                ens_den += weight;
            }
        }
        let risks: Vec<(LearnerId, f64)> =
            (0..k).filter(|&j| den[j] > 0.0).map(|j| (j, num[j] / den[j])).collect();
        let &(oracle_choice, oracle_risk) = risks
            .iter()
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .ok_or(EngineError::EmptyRiskTable)?;
        let selected_choice =
            discrete_select(&self.risk.decayed(clock_m, &self.config.decay), None)
                .map_err(|_| EngineError::EmptyRiskTable)?;
        let selected_risk = risks
            .iter()
            .find(|&&(j, _)| j == selected_choice)
            .map(|&(_, v)| v)
            .ok_or(EngineError::EmptyRiskTable)?;
        Ok(OracleReport {
            risks,
            oracle_choice,
            selected_choice,
            oracle_risk,
            selected_risk,
            ratio: selected_risk / oracle_risk,
            ensemble_risk: if ens_den > 0.0 { Some(ens_num / ens_den) } else { None },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn wave(phase: f64, len: usize) -> Vec<f64> {
        (1..=len).map(|t| (0.3 * t as f64 + phase).sin() * 2.0 + 1.0).collect()
    }

    fn record_from(id: SubjectId, ys: Vec<f64>) -> PanelRecord {
        let n = ys.len();
        PanelRecord::new(id, vec![], (1..=n as Time).collect(), vec![vec![]; n], ys).unwrap()
    }

    fn historical_panel() -> Panel {
        let records =
            (1..=4).map(|i| record_from(i, wave(i as f64 * 0.7, 80))).collect::<Vec<_>>();
        Panel::new(records, 200).unwrap()
    }

    fn small_config(mode: WeightMode) -> EngineConfig {
        EngineConfig {
            mode,
            fold_spec: FoldSpec::rolling_origin(10, 5, 5, 0),
            warmup: 20,
            batch_size: 5,
            ..EngineConfig::default()
        }
    }

    fn run_stream(mode: WeightMode, len: usize) -> (Engine, Vec<StepOutput>) {
        let target = wave(0.25, len);
        let seed = record_from(9, target[..10].to_vec());
        let mut engine = Engine::new(small_config(mode), historical_panel(), seed).unwrap();
        let mut outs = Vec::new();
        for chunk in target[10..].chunks(5) {
            let batch: Vec<(Vec<f64>, f64)> = chunk.iter().map(|&y| (vec![], y)).collect();
            outs.push(engine.step(&batch).unwrap());
        }
        (engine, outs)
    }

    #[test]
    fn config_rejects_warmup_below_max_lag() {
        let cfg = EngineConfig { warmup: 3, ..EngineConfig::default() };
        assert!(matches!(cfg.validate(), Err(EngineError::BadConfig(_))));
        assert!(EngineConfig::default().validate().is_ok());
    }

    #[test]
    fn config_rejects_vfold_scheme() {
        let cfg = EngineConfig {
            fold_spec: FoldSpec {
                scheme: CvScheme::RollingOriginVfold,
                sample_folds: 2,
                ..FoldSpec::rolling_origin(10, 5, 5, 0)
            },
            ..EngineConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(EngineError::BadConfig(_))));
    }

    #[test]
    fn weights_form_simplex_every_step() {
        for mode in [WeightMode::Discrete, WeightMode::Convex, WeightMode::Conditional] {
            let (_, outs) = run_stream(mode, 100);
            for out in &outs {
                let alpha = out.weights.at(Some(&[]));
                assert!(alpha.iter().all(|&a| a >= -1e-12));
                assert_abs_diff_eq!(alpha.iter().sum::<f64>(), 1.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn individual_learners_inactive_before_warmup() {
        let (engine, outs) = run_stream(WeightMode::Convex, 100);
        let individual: Vec<usize> = engine
            .config()
            .learners
            .iter()
            .enumerate()
            .filter(|(_, l)| l.scope == Scope::Individual)
            .map(|(j, _)| j)
            .collect();
        for out in &outs {
            if out.subject_time < engine.config().warmup {
                for &j in &individual {
                    assert_eq!(out.weights.alpha[j], 0.0, "m={}", out.subject_time);
                    assert!(out.learner_forecasts[j].is_none());
                }
            } else {
                for &j in &individual {
                    assert!(out.learner_forecasts[j].is_some(), "m={}", out.subject_time);
                }
            }
        }
    }

    #[test]
    fn strata_risks_sum_to_overall() {
        let (engine, _) = run_stream(WeightMode::Discrete, 100);
        let table = engine.risk_table();
        for j in table.learners().collect::<Vec<_>>() {
            let (loss, weight) = table.cumulative(j).unwrap();
            let mut sl = 0.0;
            let mut sw = 0.0;
            for m in table.strata(j).collect::<Vec<_>>() {
                let (l, w) = table.cumulative_at(j, m).unwrap();
                sl += l;
                sw += w;
            }
            assert_abs_diff_eq!(loss, sl, epsilon = 1e-9);
            assert_abs_diff_eq!(weight, sw, epsilon = 1e-9);
        }
    }

    #[test]
    fn discrete_picks_lag_learner_on_recurrent_series() {
        // A sinusoid satisfies an exact two-term linear recurrence, so the
        // lagged least-squares learners dominate the means by a wide margin.
        let (engine, outs) = run_stream(WeightMode::Discrete, 120);
        let last = outs.last().unwrap();
        let picked = last.selected.expect("a pick exists after many folds");
        let name = &engine.config().learners[picked].name;
        assert!(name.contains("lag"), "picked {name}");
    }

    #[test]
    fn forecast_shapes_and_finiteness() {
        let (engine, outs) = run_stream(WeightMode::Convex, 100);
        let h = engine.config().forecast_horizon;
        for out in &outs {
            assert_eq!(out.ensemble_forecast.len(), h);
            assert!(out.ensemble_forecast.iter().all(|v| v.is_finite()));
            for fc in out.learner_forecasts.iter().flatten() {
                assert_eq!(fc.len(), h);
            }
        }
    }

    #[test]
    fn stream_is_deterministic() {
        let (_, a) = run_stream(WeightMode::Convex, 100);
        let (_, b) = run_stream(WeightMode::Convex, 100);
        for (u, v) in a.iter().zip(&b) {
            assert_eq!(u.weights.alpha, v.weights.alpha);
            assert_eq!(u.ensemble_forecast, v.ensemble_forecast);
        }
    }

    #[test]
    fn historical_refresh_absorbs_target_history() {
        let target = wave(0.25, 60);
        let seed = record_from(9, target[..10].to_vec());
        let mut cfg = small_config(WeightMode::Discrete);
        cfg.historical_refresh_times = BTreeSet::from([0, 30]);
        let mut engine = Engine::new(cfg, historical_panel(), seed).unwrap();
        let hist_mean = 0;
        let before = engine.fitted_learner(hist_mean).unwrap().train_count();
        for chunk in target[10..].chunks(5) {
            let batch: Vec<(Vec<f64>, f64)> = chunk.iter().map(|&y| (vec![], y)).collect();
            engine.step(&batch).unwrap();
        }
        let after = engine.fitted_learner(hist_mean).unwrap().train_count();
        assert!(after > before, "refit at t=30 should add target rows ({before} -> {after})");
    }

    #[test]
    fn oracle_ratio_at_least_one() {
        let (engine, _) = run_stream(WeightMode::Discrete, 120);
        // Truth for the deterministic wave is the wave itself.
        let mut truth = TruthTrace::default();
        for (i, y) in wave(0.25, 120).iter().enumerate() {
            truth.insert(9, i as Time + 1, *y);
        }
        let report = engine.oracle_eval(&truth).unwrap();
        assert!(report.ratio >= 1.0 - 1e-12);
        assert!(report.oracle_risk <= report.selected_risk + 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let seed = record_from(9, wave(0.25, 10));
        let mut engine =
            Engine::new(small_config(WeightMode::Convex), historical_panel(), seed).unwrap();
        assert!(matches!(engine.step(&[]), Err(EngineError::BadConfig(_))));
    }
}
