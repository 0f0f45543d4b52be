//! Panel time-series data model, summary measures, and the arithmetic that
//! connects chronological time to per-subject time for dynamic streams.
//!
//! Time stamps are non-negative integers on a global grid. A subject enters at
//! `entry_time`, exits at `exit_time`, and its observations form a contiguous
//! run of integer times inside `[entry_time, exit_time]`. Subject time is the
//! shift `m = t - entry_time`.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type SubjectId = u64;
pub type Time = u32;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("subject {subject}: times must be strictly increasing and contiguous")]
    BadTimes { subject: SubjectId },
    #[error("subject {subject}: covariate/outcome lengths do not match times")]
    LengthMismatch { subject: SubjectId },
    #[error("subject {subject}: entry/exit window does not cover observed times")]
    BadWindow { subject: SubjectId },
    #[error("duplicate subject id {subject}")]
    DuplicateSubject { subject: SubjectId },
    #[error("horizon tau {tau} is below the last observed time {last}")]
    BadHorizon { tau: Time, last: Time },
    #[error("subject {subject}: not enough history before t={t} for the requested summary")]
    InsufficientHistory { subject: SubjectId, t: Time },
    #[error("t={t} is before entry time {entry}")]
    NotYetEnrolled { entry: Time, t: Time },
    #[error("summary memory must be at least 1")]
    BadMemory,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv schema: {0}")]
    Schema(String),
}

/// One subject's baseline covariates plus its time-indexed stream of
/// time-varying covariates and outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRecord {
    pub subject_id: SubjectId,
    pub baseline: Vec<f64>,
    times: Vec<Time>,
    covariates: Vec<Vec<f64>>,
    outcomes: Vec<f64>,
    entry_time: Time,
    exit_time: Time,
}

impl PanelRecord {
    /// Builds a record with entry defaulting to 0 and exit to the last
    /// observed time.
    pub fn new(
        subject_id: SubjectId,
        baseline: Vec<f64>,
        times: Vec<Time>,
        covariates: Vec<Vec<f64>>,
        outcomes: Vec<f64>,
    ) -> Result<Self, PanelError> {
        let exit = *times.last().ok_or(PanelError::BadTimes { subject: subject_id })?;
        Self::with_window(subject_id, baseline, times, covariates, outcomes, 0, exit)
    }

    pub fn with_window(
        subject_id: SubjectId,
        baseline: Vec<f64>,
        times: Vec<Time>,
        covariates: Vec<Vec<f64>>,
        outcomes: Vec<f64>,
        entry_time: Time,
        exit_time: Time,
    ) -> Result<Self, PanelError> {
        if times.is_empty() || times.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(PanelError::BadTimes { subject: subject_id });
        }
        if covariates.len() != times.len() || outcomes.len() != times.len() {
            return Err(PanelError::LengthMismatch { subject: subject_id });
        }
        let q = covariates[0].len();
        if covariates.iter().any(|w| w.len() != q) {
            return Err(PanelError::LengthMismatch { subject: subject_id });
        }
        if entry_time > times[0] || exit_time < *times.last().unwrap() || entry_time > exit_time {
            return Err(PanelError::BadWindow { subject: subject_id });
        }
        Ok(Self { subject_id, baseline, times, covariates, outcomes, entry_time, exit_time })
    }

    pub fn entry_time(&self) -> Time {
        self.entry_time
    }

    pub fn exit_time(&self) -> Time {
        self.exit_time
    }

    pub fn times(&self) -> &[Time] {
        &self.times
    }

    pub fn first_time(&self) -> Time {
        self.times[0]
    }

    pub fn last_time(&self) -> Time {
        *self.times.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn covariate_dim(&self) -> usize {
        self.covariates[0].len()
    }

    fn index_of(&self, t: Time) -> Option<usize> {
        if t < self.times[0] || t > self.last_time() {
            None
        } else {
            Some((t - self.times[0]) as usize)
        }
    }

    pub fn outcome_at(&self, t: Time) -> Option<f64> {
        self.index_of(t).map(|i| self.outcomes[i])
    }

    pub fn covariates_at(&self, t: Time) -> Option<&[f64]> {
        self.index_of(t).map(|i| self.covariates[i].as_slice())
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// Keeps only observations with time `<= t`. Returns `None` when nothing
    /// remains.
    pub fn truncated(&self, t: Time) -> Option<PanelRecord> {
        if t < self.times[0] {
            return None;
        }
        let keep = self.times.iter().filter(|&&s| s <= t).count();
        Some(PanelRecord {
            subject_id: self.subject_id,
            baseline: self.baseline.clone(),
            times: self.times[..keep].to_vec(),
            covariates: self.covariates[..keep].to_vec(),
            outcomes: self.outcomes[..keep].to_vec(),
            entry_time: self.entry_time,
            exit_time: self.exit_time,
        })
    }

    /// Appends one observation at `last_time() + 1`.
    pub fn push(&mut self, covariates: Vec<f64>, outcome: f64) -> Result<(), PanelError> {
        if covariates.len() != self.covariate_dim() {
            return Err(PanelError::LengthMismatch { subject: self.subject_id });
        }
        let t = self.last_time() + 1;
        self.times.push(t);
        self.covariates.push(covariates);
        self.outcomes.push(outcome);
        if t > self.exit_time {
            self.exit_time = t;
        }
        Ok(())
    }
}

/// A collection of panel records with a common horizon.
#[derive(Debug, Clone)]
pub struct Panel {
    records: Vec<PanelRecord>,
    horizon_tau: Time,
}

impl Panel {
    pub fn new(records: Vec<PanelRecord>, horizon_tau: Time) -> Result<Self, PanelError> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.subject_id) {
                return Err(PanelError::DuplicateSubject { subject: r.subject_id });
            }
            if r.last_time() > horizon_tau {
                return Err(PanelError::BadHorizon { tau: horizon_tau, last: r.last_time() });
            }
        }
        Ok(Self { records, horizon_tau })
    }

    pub fn horizon(&self) -> Time {
        self.horizon_tau
    }

    pub fn records(&self) -> &[PanelRecord] {
        &self.records
    }

    pub fn record(&self, id: SubjectId) -> Option<&PanelRecord> {
        self.records.iter().find(|r| r.subject_id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    LagWindow,
    RunningMean,
}

/// How a subject's history is condensed into the fixed-dimensional predictor
/// state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummarySpec {
    pub kind: SummaryKind,
    /// Number of lagged observations for `LagWindow`; ignored by
    /// `RunningMean`.
    pub memory: usize,
    pub include_baseline: bool,
    /// Restrict the summary to the outcome component (pure AR state).
    pub y_only: bool,
}

impl SummarySpec {
    pub fn lag_window(memory: usize) -> Self {
        Self { kind: SummaryKind::LagWindow, memory, include_baseline: false, y_only: true }
    }

    pub fn running_mean() -> Self {
        Self { kind: SummaryKind::RunningMean, memory: 1, include_baseline: false, y_only: true }
    }

    pub fn validate(&self) -> Result<(), PanelError> {
        if self.memory < 1 {
            return Err(PanelError::BadMemory);
        }
        Ok(())
    }

    /// Length of the summary vector for a record with `q` time-varying
    /// covariates.
    pub fn dim(&self, q: usize, baseline_dim: usize) -> usize {
        let per_obs = if self.y_only { 1 } else { q + 1 };
        let core = match self.kind {
            SummaryKind::LagWindow => self.memory * per_obs,
            SummaryKind::RunningMean => per_obs,
        };
        core + if self.include_baseline { baseline_dim } else { 0 }
    }
}

/// The summary state `Z` for one subject as of time `t - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryVector {
    pub subject_id: SubjectId,
    pub as_of_time: Time,
    pub values: Vec<f64>,
}

/// Condenses the observations strictly before `t` into the summary state.
///
/// `LagWindow` concatenates the last `memory` observations oldest-first;
/// `RunningMean` averages component-wise over the whole available past.
pub fn make_summary(
    record: &PanelRecord,
    spec: &SummarySpec,
    t: Time,
) -> Result<SummaryVector, PanelError> {
    spec.validate()?;
    let avail = record.times.iter().filter(|&&s| s < t).count();
    let needed = match spec.kind {
        SummaryKind::LagWindow => spec.memory,
        SummaryKind::RunningMean => 1,
    };
    if avail < needed {
        return Err(PanelError::InsufficientHistory { subject: record.subject_id, t });
    }
    let mut values = Vec::new();
    match spec.kind {
        SummaryKind::LagWindow => {
            for idx in avail - spec.memory..avail {
                if !spec.y_only {
                    values.extend_from_slice(&record.covariates[idx]);
                }
                values.push(record.outcomes[idx]);
            }
        }
        SummaryKind::RunningMean => {
            let inv = 1.0 / avail as f64;
            if !spec.y_only {
                for j in 0..record.covariate_dim() {
                    values.push(record.covariates[..avail].iter().map(|w| w[j]).sum::<f64>() * inv);
                }
            }
            values.push(record.outcomes[..avail].iter().sum::<f64>() * inv);
        }
    }
    if spec.include_baseline {
        values.extend_from_slice(&record.baseline);
    }
    Ok(SummaryVector { subject_id: record.subject_id, as_of_time: t - 1, values })
}

/// Maps chronological time to subject time, `m = t - entry`.
pub fn chron_to_subject_time(entry: Time, t: Time) -> Result<Time, PanelError> {
    if t < entry {
        return Err(PanelError::NotYetEnrolled { entry, t });
    }
    Ok(t - entry)
}

/// Subjects enrolled and not yet exited at chronological time `t`.
pub fn active_set(panel: &Panel, t: Time) -> BTreeSet<SubjectId> {
    panel
        .records
        .iter()
        .filter(|r| r.entry_time <= t && t <= r.exit_time)
        .map(|r| r.subject_id)
        .collect()
}

/// Enrollment count `n(t)` and the per-subject-time occupancy `n_m(t)`.
pub fn enrollment_counts(panel: &Panel, t: Time) -> (usize, BTreeMap<Time, usize>) {
    let n_of_t = panel.records.iter().filter(|r| r.entry_time <= t).count();
    let mut n_m = BTreeMap::new();
    for r in &panel.records {
        for &s in r.times.iter().filter(|&&s| s <= t) {
            let m = s - r.entry_time;
            *n_m.entry(m).or_insert(0) += 1;
        }
    }
    (n_of_t, n_m)
}

const FIXED_COLS: [&str; 4] = ["id", "t", "entry", "exit"];

/// Reads a panel from CSV with header `id,t,entry,exit,x1..xp,w1..wq,y`.
/// The `entry`/`exit` columns are optional.
pub fn read_panel_csv(path: &Path, horizon_tau: Option<Time>) -> Result<Panel, PanelError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.first() != Some(&"id") || cols.get(1) != Some(&"t") {
        return Err(PanelError::Schema("expected leading columns id,t".into()));
    }
    let has_entry = cols.contains(&"entry");
    let has_exit = cols.contains(&"exit");
    let x_cols: Vec<usize> =
        cols.iter().enumerate().filter(|(_, c)| c.starts_with('x')).map(|(i, _)| i).collect();
    let w_cols: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| c.starts_with('w') && !FIXED_COLS.contains(c))
        .map(|(i, _)| i)
        .collect();
    let y_col = cols
        .iter()
        .position(|c| *c == "y")
        .ok_or_else(|| PanelError::Schema("missing y column".into()))?;
    let entry_col = cols.iter().position(|c| *c == "entry");
    let exit_col = cols.iter().position(|c| *c == "exit");

    struct Acc {
        baseline: Vec<f64>,
        times: Vec<Time>,
        covs: Vec<Vec<f64>>,
        ys: Vec<f64>,
        entry: Option<Time>,
        exit: Option<Time>,
    }
    let mut order: Vec<SubjectId> = Vec::new();
    let mut by_id: BTreeMap<SubjectId, Acc> = BTreeMap::new();

    for row in rdr.records() {
        let row = row?;
        let get = |i: usize| -> Result<f64, PanelError> {
            row.get(i)
                .ok_or_else(|| PanelError::Schema("short row".into()))?
                .parse()
                .map_err(|_| PanelError::Schema(format!("bad number in column {}", cols[i])))
        };
        let id: SubjectId = get(0)? as SubjectId;
        let t: Time = get(1)? as Time;
        let baseline: Vec<f64> = x_cols.iter().map(|&i| get(i)).collect::<Result<_, _>>()?;
        let w: Vec<f64> = w_cols.iter().map(|&i| get(i)).collect::<Result<_, _>>()?;
        let y = get(y_col)?;
        let acc = by_id.entry(id).or_insert_with(|| {
            order.push(id);
            Acc { baseline: baseline.clone(), times: vec![], covs: vec![], ys: vec![], entry: None, exit: None }
        });
        acc.times.push(t);
        acc.covs.push(w);
        acc.ys.push(y);
        if has_entry {
            acc.entry = Some(get(entry_col.unwrap())? as Time);
        }
        if has_exit {
            acc.exit = Some(get(exit_col.unwrap())? as Time);
        }
    }

    let mut records = Vec::new();
    for id in order {
        let acc = by_id.remove(&id).unwrap();
        let entry = acc.entry.unwrap_or(0);
        let exit = acc.exit.unwrap_or_else(|| *acc.times.last().unwrap_or(&0));
        records.push(PanelRecord::with_window(
            id, acc.baseline, acc.times, acc.covs, acc.ys, entry, exit,
        )?);
    }
    let tau = horizon_tau
        .unwrap_or_else(|| records.iter().map(|r| r.last_time()).max().unwrap_or(0));
    Panel::new(records, tau)
}

/// Writes a panel as CSV, rows sorted by `(id, t)`.
pub fn write_panel_csv(panel: &Panel, path: &Path) -> Result<(), PanelError> {
    let mut wtr = csv::Writer::from_path(path)?;
    let p = panel.records.first().map_or(0, |r| r.baseline.len());
    let q = panel.records.first().map_or(0, |r| r.covariate_dim());
    let mut header = vec!["id".to_string(), "t".to_string(), "entry".to_string(), "exit".to_string()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    header.extend((1..=q).map(|j| format!("w{j}")));
    header.push("y".to_string());
    wtr.write_record(&header)?;
    let mut records: Vec<&PanelRecord> = panel.records.iter().collect();
    records.sort_by_key(|r| r.subject_id);
    for r in records {
        for (idx, &t) in r.times.iter().enumerate() {
            let mut row = vec![
                r.subject_id.to_string(),
                t.to_string(),
                r.entry_time.to_string(),
                r.exit_time.to_string(),
            ];
            row.extend(r.baseline.iter().map(|v| v.to_string()));
            row.extend(r.covariates[idx].iter().map(|v| v.to_string()));
            row.push(r.outcomes[idx].to_string());
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec_y(id: SubjectId, times: Vec<Time>, ys: Vec<f64>) -> PanelRecord {
        let n = times.len();
        PanelRecord::new(id, vec![], times, vec![vec![]; n], ys).unwrap()
    }

    #[test]
    fn lag_window_takes_last_m_before_t() {
        let r = rec_y(1, vec![1, 2, 3], vec![1.0, 2.0, 3.0]);
        let z = make_summary(&r, &SummarySpec::lag_window(2), 4).unwrap();
        assert_eq!(z.values, vec![2.0, 3.0]);
        assert_eq!(z.as_of_time, 3);
    }

    #[test]
    fn running_mean_averages_all_past() {
        let r = rec_y(1, vec![1, 2, 3], vec![1.0, 2.0, 3.0]);
        let z = make_summary(&r, &SummarySpec::running_mean(), 4).unwrap();
        assert_eq!(z.values, vec![2.0]);
    }

    #[test]
    fn insufficient_history_is_an_error() {
        let r = rec_y(1, vec![1], vec![1.0]);
        let err = make_summary(&r, &SummarySpec::lag_window(2), 2).unwrap_err();
        assert!(matches!(err, PanelError::InsufficientHistory { .. }));
    }

    #[test]
    fn summary_length_is_constant_over_valid_times() {
        let r = rec_y(1, (1..=20).collect(), (1..=20).map(|v| v as f64).collect());
        let spec = SummarySpec::lag_window(3);
        let dims: BTreeSet<usize> =
            (4..=21).map(|t| make_summary(&r, &spec, t).unwrap().values.len()).collect();
        assert_eq!(dims, BTreeSet::from([3]));
        assert_eq!(spec.dim(0, 0), 3);
    }

    #[test]
    fn subject_time_arithmetic() {
        assert_eq!(chron_to_subject_time(3, 10).unwrap(), 7);
        assert_eq!(chron_to_subject_time(5, 5).unwrap(), 0);
        assert!(matches!(
            chron_to_subject_time(5, 4),
            Err(PanelError::NotYetEnrolled { entry: 5, t: 4 })
        ));
    }

    fn staggered_panel() -> Panel {
        let r1 = PanelRecord::with_window(
            1,
            vec![],
            (1..=10).collect(),
            vec![vec![]; 10],
            vec![0.0; 10],
            0,
            10,
        )
        .unwrap();
        let r2 = PanelRecord::with_window(
            2,
            vec![],
            (6..=20).collect(),
            vec![vec![]; 15],
            vec![0.0; 15],
            5,
            20,
        )
        .unwrap();
        Panel::new(vec![r1, r2], 25).unwrap()
    }

    #[test]
    fn active_set_respects_entry_and_exit() {
        let p = staggered_panel();
        assert_eq!(active_set(&p, 3), BTreeSet::from([1]));
        assert_eq!(active_set(&p, 7), BTreeSet::from([1, 2]));
        assert!(active_set(&p, 25).is_empty());
    }

    #[test]
    fn active_set_matches_brute_force_scan() {
        let p = staggered_panel();
        for t in 0..=25 {
            let brute: BTreeSet<SubjectId> = p
                .records()
                .iter()
                .filter(|r| r.entry_time() <= t && t <= r.exit_time())
                .map(|r| r.subject_id)
                .collect();
            assert_eq!(active_set(&p, t), brute);
        }
    }

    #[test]
    fn enrollment_counts_basic() {
        let p = staggered_panel();
        let (n, _) = enrollment_counts(&p, 3);
        assert_eq!(n, 1);
        let empty = Panel::new(vec![], 10).unwrap();
        let (n0, nm) = enrollment_counts(&empty, 3);
        assert_eq!(n0, 0);
        assert!(nm.is_empty());
    }

    #[test]
    fn enrollment_counts_full_occupancy() {
        // Two subjects observed at times 0..=2 with entry 0: every subject
        // time 0, 1, 2 is occupied twice.
        let mk = |id| {
            PanelRecord::with_window(id, vec![], vec![0, 1, 2], vec![vec![]; 3], vec![0.0; 3], 0, 2)
                .unwrap()
        };
        let p = Panel::new(vec![mk(1), mk(2)], 5).unwrap();
        let (_, nm) = enrollment_counts(&p, 2);
        assert_eq!(nm, BTreeMap::from([(0, 2), (1, 2), (2, 2)]));
    }

    #[test]
    fn enrollment_counts_sum_equals_observation_count() {
        let p = staggered_panel();
        for t in [0, 5, 12, 25] {
            let (_, nm) = enrollment_counts(&p, t);
            let total: usize = nm.values().sum();
            let brute: usize = p
                .records()
                .iter()
                .map(|r| r.times().iter().filter(|&&s| s <= t).count())
                .sum();
            assert_eq!(total, brute);
        }
    }

    #[test]
    fn rejects_gapped_times() {
        let err = PanelRecord::new(1, vec![], vec![1, 3], vec![vec![], vec![]], vec![0.0, 0.0]);
        assert!(matches!(err, Err(PanelError::BadTimes { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.csv");
        let r = PanelRecord::with_window(
            7,
            vec![1.0, 0.5],
            vec![3, 4, 5],
            vec![vec![0.1], vec![0.2], vec![0.3]],
            vec![9.0, 8.0, 7.0],
            2,
            6,
        )
        .unwrap();
        let panel = Panel::new(vec![r], 10).unwrap();
        write_panel_csv(&panel, &path).unwrap();
        let back = read_panel_csv(&path, Some(10)).unwrap();
        assert_eq!(back.records(), panel.records());
    }
}
