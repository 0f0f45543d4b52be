//! Weighted squared-error losses, loss-decay weighting, and the cumulative
//! cross-validated risk table, overall and stratified by subject time.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{SubjectId, Time};

pub type LearnerId = usize;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("update at t={t} is older than the table clock {last}")]
    StaleUpdate { t: Time, last: Time },
    #[error("no cumulative weight for learner {learner} (m={m:?})")]
    NoMass { learner: LearnerId, m: Option<Time> },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One validation loss, already weighted-ready: `weight` multiplies the loss
/// when it enters the table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub learner_id: LearnerId,
    pub subject_id: SubjectId,
    pub chron_time: Time,
    pub subject_time: Time,
    pub loss: f64,
    pub weight: f64,
}

/// Weighted squared error `weight * (y - yhat)^2`.
pub fn squared_error(y: f64, yhat: f64, weight: f64) -> f64 {
    weight * (y - yhat) * (y - yhat)
}

/// Piecewise loss-decay schedule over subject time: full weight inside
/// `full_weight_window`, zero beyond `zero_weight_cutoff`, geometric decay
/// `(1 - rate)^(current - loss)` in between.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecaySpec {
    pub full_weight_window: Time,
    pub zero_weight_cutoff: Time,
    pub rate: f64,
}

impl Default for DecaySpec {
    fn default() -> Self {
        Self { full_weight_window: 30, zero_weight_cutoff: 180, rate: 0.001 }
    }
}

/// Weight for a loss measured at subject time `loss_m` when the subject's
/// clock reads `current_m`.
pub fn decay_weight(current_m: Time, loss_m: Time, spec: &DecaySpec) -> f64 {
    debug_assert!(loss_m <= current_m);
    let lag = current_m - loss_m;
    if lag >= spec.zero_weight_cutoff {
        0.0
    } else if lag <= spec.full_weight_window {
        1.0
    } else {
        (1.0 - spec.rate).powi(lag as i32)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Mass {
    loss: f64,
    weight: f64,
}

/// Per-learner cumulative weighted validation losses keyed by subject time.
/// The overall totals are derived by summing the strata, so the
/// stratification identity holds exactly rather than to rounding.
#[derive(Debug, Clone, Default)]
pub struct RiskTable {
    per_m: BTreeMap<LearnerId, BTreeMap<Time, Mass>>,
    last_updated: Time,
}

impl RiskTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_updated(&self) -> Time {
        self.last_updated
    }

    pub fn learners(&self) -> impl Iterator<Item = LearnerId> + '_ {
        self.per_m.keys().copied()
    }

    pub fn strata(&self, learner: LearnerId) -> impl Iterator<Item = Time> + '_ {
        self.per_m.get(&learner).into_iter().flat_map(|m| m.keys().copied())
    }

    pub fn cumulative(&self, learner: LearnerId) -> Option<(f64, f64)> {
        let strata = self.per_m.get(&learner)?;
        let mut total = Mass::default();
        for v in strata.values() {
            total.loss += v.loss;
            total.weight += v.weight;
        }
        Some((total.loss, total.weight))
    }

    pub fn cumulative_at(&self, learner: LearnerId, m: Time) -> Option<(f64, f64)> {
        self.per_m.get(&learner).and_then(|s| s.get(&m)).map(|v| (v.loss, v.weight))
    }

    /// Folds a batch of validation losses into the table. Zero-weight losses
    /// are dropped; the table keeps bounded per-stratum aggregates only.
    pub fn accumulate(&self, fold_losses: &[LossRecord], t: Time) -> Result<RiskTable, RiskError> {
        if t < self.last_updated {
            return Err(RiskError::StaleUpdate { t, last: self.last_updated });
        }
        let mut next = self.clone();
        next.last_updated = t;
        for rec in fold_losses {
            if rec.weight == 0.0 {
                continue;
            }
            let stratum = next
                .per_m
                .entry(rec.learner_id)
                .or_default()
                .entry(rec.subject_time)
                .or_default();
            stratum.loss += rec.weight * rec.loss;
            stratum.weight += rec.weight;
        }
        Ok(next)
    }

    /// Snapshot with every stratum rescaled by the decay weight at the given
    /// subject clock; fully decayed strata disappear. Risk comparisons should
    /// run against this view so stale losses stop counting.
    pub fn decayed(&self, current_m: Time, spec: &DecaySpec) -> RiskTable {
        let mut next = RiskTable { per_m: BTreeMap::new(), last_updated: self.last_updated };
        for (&learner, strata) in &self.per_m {
            let mut scaled = BTreeMap::new();
            for (&m, mass) in strata {
                if m > current_m {
                    continue;
                }
                let w = decay_weight(current_m, m, spec);
                if w > 0.0 {
                    scaled.insert(m, Mass { loss: w * mass.loss, weight: w * mass.weight });
                }
            }
            if !scaled.is_empty() {
                next.per_m.insert(learner, scaled);
            }
        }
        next
    }

    /// Drops strata whose decay weight is already zero at the given subject
    /// clock; they can never regain mass, so the live table stays bounded.
    pub fn prune(&self, current_m: Time, spec: &DecaySpec) -> RiskTable {
        let mut next = self.clone();
        for strata in next.per_m.values_mut() {
            strata.retain(|&m, _| m > current_m || decay_weight(current_m, m, spec) > 0.0);
        }
        next.per_m.retain(|_, strata| !strata.is_empty());
        next
    }

    /// Weighted mean risk for a learner, optionally restricted to one subject
    /// time stratum.
    pub fn mean_risk(&self, learner: LearnerId, m: Option<Time>) -> Result<f64, RiskError> {
        let mass = match m {
            None => self.cumulative(learner).map(|(loss, weight)| Mass { loss, weight }),
            Some(m) => self.per_m.get(&learner).and_then(|s| s.get(&m)).copied(),
        };
        match mass {
            Some(v) if v.weight > 0.0 => Ok(v.loss / v.weight),
            _ => Err(RiskError::NoMass { learner, m }),
        }
    }

    /// Exports risk trajectories as CSV
    /// `t,learner,m,cum_loss,cum_weight,mean_risk` with `m` blank for the
    /// overall row.
    pub fn write_csv(&self, path: &Path) -> Result<(), RiskError> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["t", "learner", "m", "cum_loss", "cum_weight", "mean_risk"])?;
        for (&k, strata) in &self.per_m {
            if let Some((loss, weight)) = self.cumulative(k) {
                wtr.write_record([
                    self.last_updated.to_string(),
                    k.to_string(),
                    String::new(),
                    loss.to_string(),
                    weight.to_string(),
                    (loss / weight).to_string(),
                ])?;
            }
            for (&m, sm) in strata {
                wtr.write_record([
                    self.last_updated.to_string(),
                    k.to_string(),
                    m.to_string(),
                    sm.loss.to_string(),
                    sm.weight.to_string(),
                    (sm.loss / sm.weight).to_string(),
                ])?;
            }
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn squared_error_cases() {
        assert_eq!(squared_error(2.0, 2.0, 1.0), 0.0);
        assert_eq!(squared_error(3.0, 1.0, 1.0), 4.0);
        assert_eq!(squared_error(3.0, 1.0, 0.5), 2.0);
    }

    #[test]
    fn decay_weight_piecewise() {
        let spec = DecaySpec::default();
        assert_eq!(decay_weight(500, 480, &spec), 1.0);
        assert_eq!(decay_weight(500, 320, &spec), 0.0);
        // 0.999^100 confirmed by repeated multiplication.
        let mut by_mult = 1.0_f64;
        for _ in 0..100 {
            by_mult *= 0.999;
        }
        assert_abs_diff_eq!(decay_weight(500, 400, &spec), by_mult, epsilon = 1e-12);
        assert_abs_diff_eq!(by_mult, 0.904792, epsilon = 1e-6);
    }

    #[test]
    fn decay_weight_non_increasing_in_lag() {
        let spec = DecaySpec::default();
        let mut prev = f64::INFINITY;
        for lag in 0..250 {
            let w = decay_weight(1000, 1000 - lag, &spec);
            assert!(w <= prev);
            assert!((0.0..=1.0).contains(&w));
            prev = w;
        }
    }

    fn rec(learner: LearnerId, m: Time, loss: f64, weight: f64) -> LossRecord {
        LossRecord { learner_id: learner, subject_id: 1, chron_time: m, subject_time: m, loss, weight }
    }

    #[test]
    fn accumulate_sums_per_learner() {
        let table = RiskTable::new();
        let losses =
            vec![rec(0, 1, 1.0, 1.0), rec(0, 2, 1.0, 1.0), rec(1, 1, 4.0, 1.0), rec(1, 2, 0.0, 1.0)];
        let table = table.accumulate(&losses, 2).unwrap();
        assert_eq!(table.cumulative(0), Some((2.0, 2.0)));
        assert_eq!(table.cumulative(1), Some((4.0, 2.0)));
        assert_eq!(table.last_updated(), 2);
    }

    #[test]
    fn empty_accumulate_only_bumps_clock() {
        let table = RiskTable::new().accumulate(&[rec(0, 1, 1.0, 1.0)], 1).unwrap();
        let next = table.accumulate(&[], 5).unwrap();
        assert_eq!(next.cumulative(0), table.cumulative(0));
        assert_eq!(next.last_updated(), 5);
    }

    #[test]
    fn stale_update_rejected() {
        let table = RiskTable::new().accumulate(&[], 5).unwrap();
        assert!(matches!(table.accumulate(&[], 3), Err(RiskError::StaleUpdate { .. })));
    }

    #[test]
    fn single_stratum_increment_matches_overall() {
        let table = RiskTable::new().accumulate(&[rec(0, 3, 2.5, 0.8)], 3).unwrap();
        assert_eq!(table.cumulative(0), table.cumulative_at(0, 3));
    }

    #[test]
    fn mean_risk_normalizes_by_weight() {
        let table =
            RiskTable::new().accumulate(&[rec(0, 1, 2.0, 1.0), rec(0, 2, 4.0, 1.0)], 2).unwrap();
        assert_eq!(table.mean_risk(0, None).unwrap(), 3.0);
        let table = RiskTable::new().accumulate(&[rec(1, 1, 5.0, 0.5)], 1).unwrap();
        assert_eq!(table.mean_risk(1, None).unwrap(), 5.0);
        assert!(matches!(
            table.mean_risk(1, Some(9)),
            Err(RiskError::NoMass { learner: 1, m: Some(9) })
        ));
    }

    #[test]
    fn strata_sum_to_overall() {
        let losses: Vec<LossRecord> =
            (0..40).map(|i| rec(i % 3, (i % 7) as Time, (i as f64) * 0.3, 0.5 + 0.01 * i as f64)).collect();
        let table = RiskTable::new().accumulate(&losses, 40).unwrap();
        for k in table.learners().collect::<Vec<_>>() {
            let (loss, weight) = table.cumulative(k).unwrap();
            let mut sl = 0.0;
            let mut sw = 0.0;
            for m in table.strata(k).collect::<Vec<_>>() {
                let (l, w) = table.cumulative_at(k, m).unwrap();
                sl += l;
                sw += w;
            }
            assert_abs_diff_eq!(loss, sl, epsilon = 1e-12);
            assert_abs_diff_eq!(weight, sw, epsilon = 1e-12);
        }
    }

    #[test]
    fn decayed_view_scales_and_drops_strata() {
        let spec = DecaySpec::default();
        let losses = vec![rec(0, 10, 2.0, 1.0), rec(0, 100, 3.0, 1.0), rec(0, 250, 4.0, 1.0)];
        let table = RiskTable::new().accumulate(&losses, 260).unwrap();
        let view = table.decayed(260, &spec);
        // Lag 250 is past the cutoff, lag 160 is geometric, lag 10 is full.
        assert_eq!(view.cumulative_at(0, 10), None);
        let w = 0.999f64.powi(160);
        let (l, ww) = view.cumulative_at(0, 100).unwrap();
        assert_abs_diff_eq!(l, w * 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ww, w, epsilon = 1e-12);
        assert_eq!(view.cumulative_at(0, 250), Some((4.0, 1.0)));
        // The raw table is untouched.
        assert_eq!(table.cumulative_at(0, 10), Some((2.0, 1.0)));
        // Mean risk under the view favors the recent loss pattern.
        let mean = view.mean_risk(0, None).unwrap();
        assert_abs_diff_eq!(mean, (w * 3.0 + 4.0) / (w + 1.0), epsilon = 1e-12);
    }

    #[test]
    fn prune_drops_only_dead_strata() {
        let spec = DecaySpec::default();
        let losses = vec![rec(0, 10, 2.0, 1.0), rec(0, 100, 3.0, 1.0), rec(1, 5, 1.0, 1.0)];
        let table = RiskTable::new().accumulate(&losses, 260).unwrap().prune(260, &spec);
        assert_eq!(table.cumulative_at(0, 10), None);
        assert_eq!(table.cumulative_at(0, 100), Some((3.0, 1.0)));
        assert_eq!(table.learners().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn accumulation_order_does_not_matter() {
        let mut losses: Vec<LossRecord> =
            (0..30).map(|i| rec(i % 2, (i % 5) as Time, i as f64, 1.0)).collect();
        let once = RiskTable::new().accumulate(&losses, 30).unwrap();
        losses.reverse();
        let mut other = RiskTable::new();
        for chunk in losses.chunks(7) {
            other = other.accumulate(chunk, 30).unwrap();
        }
        for k in [0, 1] {
            let a = once.cumulative(k).unwrap();
            let b = other.cumulative(k).unwrap();
            assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-9);
            assert_abs_diff_eq!(a.1, b.1, epsilon = 1e-9);
        }
    }
}
