//! Time-series cross-validation schemes materialized as explicit fold
//! assignments over (subject, time) pairs.
//!
//! All window arithmetic is 1-based and inclusive on the subject's own time
//! axis. Fold counts are derived: folds are emitted while the validation
//! window still fits within the available data.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{Panel, SubjectId, Time};

#[derive(Debug, Error)]
pub enum CvError {
    #[error("no cross-validation fold fits within t={t}")]
    SpecDoesNotFit { t: Time },
    #[error("need at least {needed} subjects for {got} sample folds")]
    TooFewSubjects { needed: usize, got: usize },
    #[error("invalid fold spec: {0}")]
    BadSpec(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvScheme {
    RollingOrigin,
    RollingWindow,
    RollingOriginVfold,
    RollingWindowVfold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub scheme: CvScheme,
    /// Initial training size for rolling-origin; fixed window size for
    /// rolling-window.
    pub first_window: Time,
    pub validation_size: Time,
    /// The training window advances by this many observations per fold.
    pub batch: Time,
    /// Gap between the end of training and the start of validation.
    pub gap: Time,
    /// Number of sample folds, V-fold variants only.
    pub sample_folds: usize,
}

impl FoldSpec {
    pub fn rolling_origin(first_window: Time, validation_size: Time, batch: Time, gap: Time) -> Self {
        Self {
            scheme: CvScheme::RollingOrigin,
            first_window,
            validation_size,
            batch,
            gap,
            sample_folds: 0,
        }
    }

    pub fn rolling_window(first_window: Time, validation_size: Time, batch: Time, gap: Time) -> Self {
        Self { scheme: CvScheme::RollingWindow, ..Self::rolling_origin(first_window, validation_size, batch, gap) }
    }

    pub fn validate(&self) -> Result<(), CvError> {
        if self.first_window < 1 || self.validation_size < 1 || self.batch < 1 {
            return Err(CvError::BadSpec(
                "first_window, validation_size and batch must be >= 1".into(),
            ));
        }
        if matches!(self.scheme, CvScheme::RollingOriginVfold | CvScheme::RollingWindowVfold)
            && self.sample_folds < 2
        {
            return Err(CvError::BadSpec("vfold variants need sample_folds >= 2".into()));
        }
        Ok(())
    }

    fn window_grows(&self) -> bool {
        matches!(self.scheme, CvScheme::RollingOrigin | CvScheme::RollingOriginVfold)
    }

    /// Inclusive (train, gap, validation) time windows for 1-based fold `v`.
    fn windows(&self, v: Time) -> (TimeRange, TimeRange, TimeRange) {
        let shift = self.batch * (v - 1);
        let train_end = self.first_window + shift;
        let train_start = if self.window_grows() { 1 } else { shift + 1 };
        let val_start = train_end + self.gap + 1;
        let val_end = train_end + self.gap + self.validation_size;
        (
            TimeRange { start: train_start, end: train_end },
            TimeRange { start: train_end + 1, end: train_end + self.gap },
            TimeRange { start: val_start, end: val_end },
        )
    }

    /// Number of folds whose validation window fits within `t` time points.
    fn fold_count(&self, t: Time) -> Time {
        let mut v = 0;
        while self.windows(v + 1).2.end <= t {
            v += 1;
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TimeRange {
    start: Time,
    end: Time,
}

impl TimeRange {
    fn iter(self) -> impl Iterator<Item = Time> {
        self.start..=self.end
    }
}

/// A materialized split of (subject, time) pairs for one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub fold_index: usize,
    pub train: BTreeSet<(SubjectId, Time)>,
    pub validation: BTreeSet<(SubjectId, Time)>,
    pub unused: BTreeSet<(SubjectId, Time)>,
}

fn cross(subjects: &BTreeSet<SubjectId>, range: TimeRange) -> BTreeSet<(SubjectId, Time)> {
    subjects.iter().flat_map(|&i| range.iter().map(move |s| (i, s))).collect()
}

/// Rolling-origin folds: the training window grows by `batch` per fold while
/// the validation window slides forward.
pub fn rolling_origin_folds(
    spec: &FoldSpec,
    subjects: &BTreeSet<SubjectId>,
    t: Time,
) -> Result<Vec<FoldAssignment>, CvError> {
    same_sample_folds(spec, subjects, t, true)
}

/// Rolling-window folds: a fixed-size training window slides forward with the
/// validation window.
pub fn rolling_window_folds(
    spec: &FoldSpec,
    subjects: &BTreeSet<SubjectId>,
    t: Time,
) -> Result<Vec<FoldAssignment>, CvError> {
    same_sample_folds(spec, subjects, t, false)
}

fn same_sample_folds(
    spec: &FoldSpec,
    subjects: &BTreeSet<SubjectId>,
    t: Time,
    grows: bool,
) -> Result<Vec<FoldAssignment>, CvError> {
    spec.validate()?;
    let spec = FoldSpec {
        scheme: if grows { CvScheme::RollingOrigin } else { CvScheme::RollingWindow },
        ..*spec
    };
    let count = spec.fold_count(t);
    if count == 0 {
        return Err(CvError::SpecDoesNotFit { t });
    }
    Ok((1..=count)
        .map(|v| {
            let (train, gap, val) = spec.windows(v);
            FoldAssignment {
                fold_index: v as usize,
                train: cross(subjects, train),
                validation: cross(subjects, val),
                unused: cross(subjects, gap),
            }
        })
        .collect())
}

/// Deterministic round-robin partition of sorted subject ids into
/// `sample_folds` groups.
fn subject_groups(subjects: &BTreeSet<SubjectId>, v_prime: usize) -> Vec<BTreeSet<SubjectId>> {
    let mut groups = vec![BTreeSet::new(); v_prime];
    for (rank, &id) in subjects.iter().enumerate() {
        groups[rank % v_prime].insert(id);
    }
    groups
}

/// V-fold variants: subjects are partitioned into groups, and each fold
/// validates one group on time points its members were never trained on.
pub fn vfold_variant_folds(
    spec: &FoldSpec,
    subjects: &BTreeSet<SubjectId>,
    t: Time,
) -> Result<Vec<FoldAssignment>, CvError> {
    spec.validate()?;
    let v_prime = spec.sample_folds;
    if subjects.len() < v_prime {
        return Err(CvError::TooFewSubjects { needed: v_prime, got: subjects.len() });
    }
    let count = spec.fold_count(t);
    if count == 0 {
        return Err(CvError::SpecDoesNotFit { t });
    }
    let groups = subject_groups(subjects, v_prime);
    let mut folds = Vec::new();
    for v in 1..=count {
        let (train_w, gap_w, val_w) = spec.windows(v);
        for (gi, val_group) in groups.iter().enumerate() {
            let train_group: BTreeSet<SubjectId> =
                subjects.difference(val_group).copied().collect();
            let mut unused = cross(subjects, gap_w);
            unused.extend(cross(val_group, train_w));
            unused.extend(cross(&train_group, val_w));
            folds.push(FoldAssignment {
                fold_index: (v as usize - 1) * v_prime + gi + 1,
                train: cross(&train_group, train_w),
                validation: cross(val_group, val_w),
                unused,
            });
        }
    }
    Ok(folds)
}

/// Applies the spec's window arithmetic on each subject's own time axis
/// `m = s - entry`. Pairs outside a subject's observed span are unused.
pub fn dynamic_stream_folds(
    spec: &FoldSpec,
    panel: &Panel,
    t: Time,
) -> Result<Vec<FoldAssignment>, CvError> {
    spec.validate()?;
    // Per-subject fold count, limited by both the clock and the exit time.
    let mut per_subject: BTreeMap<SubjectId, Time> = BTreeMap::new();
    for r in panel.records() {
        if r.entry_time() > t {
            continue;
        }
        let extent = t.min(r.exit_time()) - r.entry_time();
        per_subject.insert(r.subject_id, spec.fold_count(extent));
    }
    let max_folds = per_subject.values().copied().max().unwrap_or(0);
    if max_folds == 0 {
        return Err(CvError::SpecDoesNotFit { t });
    }
    let mut folds = Vec::new();
    for v in 1..=max_folds {
        let (train_w, gap_w, val_w) = spec.windows(v);
        let mut fold = FoldAssignment {
            fold_index: v as usize,
            train: BTreeSet::new(),
            validation: BTreeSet::new(),
            unused: BTreeSet::new(),
        };
        for r in panel.records() {
            let Some(&count) = per_subject.get(&r.subject_id) else { continue };
            let observed = |s: Time| s >= r.first_time() && s <= r.last_time() && s <= t;
            let chron = |m: Time| r.entry_time() + m;
            for m in train_w.iter() {
                let s = chron(m);
                if observed(s) {
                    if v <= count {
                        fold.train.insert((r.subject_id, s));
                    } else {
                        fold.unused.insert((r.subject_id, s));
                    }
                }
            }
            for m in gap_w.iter() {
                let s = chron(m);
                if observed(s) {
                    fold.unused.insert((r.subject_id, s));
                }
            }
            for m in val_w.iter() {
                let s = chron(m);
                if observed(s) {
                    if v <= count {
                        fold.validation.insert((r.subject_id, s));
                    } else {
                        fold.unused.insert((r.subject_id, s));
                    }
                }
            }
        }
        folds.push(fold);
    }
    Ok(folds)
}

/// Builds folds according to the spec's scheme over a common set of subjects.
pub fn build_folds(
    spec: &FoldSpec,
    subjects: &BTreeSet<SubjectId>,
    t: Time,
) -> Result<Vec<FoldAssignment>, CvError> {
    match spec.scheme {
        CvScheme::RollingOrigin => rolling_origin_folds(spec, subjects, t),
        CvScheme::RollingWindow => rolling_window_folds(spec, subjects, t),
        CvScheme::RollingOriginVfold | CvScheme::RollingWindowVfold => {
            vfold_variant_folds(spec, subjects, t)
        }
    }
}

/// Exports fold assignments as CSV `fold,id,t,role` for audit.
pub fn write_folds_csv(folds: &[FoldAssignment], path: &Path) -> Result<(), CvError> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["fold", "id", "t", "role"])?;
    for fold in folds {
        for (set, role) in
            [(&fold.train, "train"), (&fold.validation, "val"), (&fold.unused, "unused")]
        {
            for &(id, t) in set.iter() {
                wtr.write_record([
                    fold.fold_index.to_string(),
                    id.to_string(),
                    t.to_string(),
                    role.to_string(),
                ])?;
            }
        }
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::PanelRecord;

    fn ids(v: &[SubjectId]) -> BTreeSet<SubjectId> {
        v.iter().copied().collect()
    }

    fn times_of(set: &BTreeSet<(SubjectId, Time)>, id: SubjectId) -> Vec<Time> {
        set.iter().filter(|(i, _)| *i == id).map(|&(_, s)| s).collect()
    }

    #[test]
    fn rolling_origin_matches_reference_layout() {
        // n0=15, n1=10, m=10, h=5 at t=50: three folds with a growing train
        // window and validation blocks 21-30, 31-40, 41-50.
        let spec = FoldSpec::rolling_origin(15, 10, 10, 5);
        let folds = rolling_origin_folds(&spec, &ids(&[1]), 50).unwrap();
        assert_eq!(folds.len(), 3);
        let expect = [(1..=15, 21..=30), (1..=25, 31..=40), (1..=35, 41..=50)];
        for (fold, (train, val)) in folds.iter().zip(expect) {
            assert_eq!(times_of(&fold.train, 1), train.collect::<Vec<_>>());
            assert_eq!(times_of(&fold.validation, 1), val.collect::<Vec<_>>());
        }
    }

    #[test]
    fn rolling_origin_minimal_fold() {
        let spec = FoldSpec::rolling_origin(1, 1, 1, 0);
        let folds = rolling_origin_folds(&spec, &ids(&[1]), 2).unwrap();
        assert_eq!(folds.len(), 1);
        assert_eq!(times_of(&folds[0].train, 1), vec![1]);
        assert_eq!(times_of(&folds[0].validation, 1), vec![2]);
    }

    #[test]
    fn rolling_origin_does_not_fit() {
        let spec = FoldSpec::rolling_origin(15, 10, 10, 5);
        assert!(matches!(
            rolling_origin_folds(&spec, &ids(&[1]), 20),
            Err(CvError::SpecDoesNotFit { t: 20 })
        ));
    }

    #[test]
    fn rolling_window_matches_reference_layout() {
        let spec = FoldSpec::rolling_window(15, 10, 10, 5);
        let folds = rolling_window_folds(&spec, &ids(&[1]), 60).unwrap();
        assert!(folds.len() >= 3);
        let expect = [(1..=15, 21..=30), (11..=25, 31..=40), (21..=35, 41..=50)];
        for (fold, (train, val)) in folds.iter().zip(expect) {
            assert_eq!(times_of(&fold.train, 1), train.collect::<Vec<_>>());
            assert_eq!(times_of(&fold.validation, 1), val.collect::<Vec<_>>());
        }
    }

    #[test]
    fn rolling_window_small_case() {
        let spec = FoldSpec::rolling_window(2, 1, 1, 0);
        let folds = rolling_window_folds(&spec, &ids(&[1]), 4).unwrap();
        assert_eq!(folds.len(), 2);
        assert_eq!(times_of(&folds[0].train, 1), vec![1, 2]);
        assert_eq!(times_of(&folds[0].validation, 1), vec![3]);
        assert_eq!(times_of(&folds[1].train, 1), vec![2, 3]);
        assert_eq!(times_of(&folds[1].validation, 1), vec![4]);
    }

    #[test]
    fn rolling_window_validation_tiles_axis_when_batch_equals_validation() {
        let spec = FoldSpec::rolling_window(5, 3, 3, 0);
        let folds = rolling_window_folds(&spec, &ids(&[1]), 30).unwrap();
        let mut all_val: Vec<Time> = Vec::new();
        for f in &folds {
            all_val.extend(times_of(&f.validation, 1));
        }
        let mut sorted = all_val.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), all_val.len(), "validation windows overlap");
        assert_eq!(sorted, (6..=6 + all_val.len() as Time - 1).collect::<Vec<_>>());
    }

    #[test]
    fn vfold_rolling_origin_splits_subjects() {
        let spec = FoldSpec {
            scheme: CvScheme::RollingOriginVfold,
            first_window: 15,
            validation_size: 10,
            batch: 10,
            gap: 5,
            sample_folds: 2,
        };
        let folds = vfold_variant_folds(&spec, &ids(&[1, 2]), 40).unwrap();
        // two time folds x two sample folds
        assert_eq!(folds.len(), 4);
        let f = &folds[0];
        assert_eq!(times_of(&f.train, 2), (1..=15).collect::<Vec<_>>());
        assert!(times_of(&f.train, 1).is_empty());
        assert_eq!(times_of(&f.validation, 1), (21..=30).collect::<Vec<_>>());
        assert!(times_of(&f.validation, 2).is_empty());
    }

    #[test]
    fn vfold_validation_groups_partition_subjects() {
        let spec = FoldSpec {
            scheme: CvScheme::RollingOriginVfold,
            first_window: 15,
            validation_size: 10,
            batch: 10,
            gap: 5,
            sample_folds: 2,
        };
        let subjects = ids(&[1, 2]);
        let folds = vfold_variant_folds(&spec, &subjects, 40).unwrap();
        let val_subjects: BTreeSet<SubjectId> = folds[..2]
            .iter()
            .flat_map(|f| f.validation.iter().map(|&(i, _)| i))
            .collect();
        assert_eq!(val_subjects, subjects);
    }

    #[test]
    fn vfold_rejects_too_few_subjects() {
        let spec = FoldSpec {
            scheme: CvScheme::RollingOriginVfold,
            first_window: 15,
            validation_size: 10,
            batch: 10,
            gap: 5,
            sample_folds: 2,
        };
        assert!(matches!(
            vfold_variant_folds(&spec, &ids(&[1]), 40),
            Err(CvError::TooFewSubjects { needed: 2, got: 1 })
        ));
    }

    fn record(id: SubjectId, entry: Time, first: Time, last: Time) -> PanelRecord {
        let n = (last - first + 1) as usize;
        PanelRecord::with_window(
            id,
            vec![],
            (first..=last).collect(),
            vec![vec![]; n],
            (0..n).map(|v| v as f64).collect(),
            entry,
            last,
        )
        .unwrap()
    }

    #[test]
    fn dynamic_folds_shift_by_entry_time() {
        let panel = Panel::new(vec![record(1, 10, 11, 20)], 30).unwrap();
        let spec = FoldSpec::rolling_origin(5, 2, 2, 0);
        let folds = dynamic_stream_folds(&spec, &panel, 20).unwrap();
        assert_eq!(times_of(&folds[0].train, 1), (11..=15).collect::<Vec<_>>());
        assert_eq!(times_of(&folds[0].validation, 1), vec![16, 17]);
    }

    #[test]
    fn dynamic_folds_exit_before_validation() {
        // Subject 2 exits before any validation window opens on its axis.
        let panel = Panel::new(vec![record(1, 0, 1, 20), record(2, 0, 1, 5)], 30).unwrap();
        let spec = FoldSpec::rolling_origin(5, 2, 2, 0);
        let folds = dynamic_stream_folds(&spec, &panel, 20).unwrap();
        for f in &folds {
            assert!(times_of(&f.validation, 2).is_empty());
        }
    }

    #[test]
    fn dynamic_folds_reduce_to_static_when_entries_align() {
        let panel = Panel::new(vec![record(1, 0, 1, 20), record(2, 0, 1, 20)], 30).unwrap();
        let spec = FoldSpec::rolling_origin(5, 2, 2, 0);
        let dynamic = dynamic_stream_folds(&spec, &panel, 20).unwrap();
        let fixed = rolling_origin_folds(&spec, &ids(&[1, 2]), 20).unwrap();
        assert_eq!(dynamic.len(), fixed.len());
        for (d, f) in dynamic.iter().zip(&fixed) {
            assert_eq!(d.train, f.train);
            assert_eq!(d.validation, f.validation);
        }
    }

    #[test]
    fn folds_are_disjoint_and_time_ordered() {
        let specs = [
            FoldSpec::rolling_origin(4, 3, 2, 1),
            FoldSpec::rolling_window(4, 3, 2, 1),
        ];
        for spec in specs {
            let folds = build_folds(&spec, &ids(&[1, 2, 3]), 25).unwrap();
            for f in &folds {
                assert!(f.train.is_disjoint(&f.validation));
                assert!(f.train.is_disjoint(&f.unused));
                assert!(f.validation.is_disjoint(&f.unused));
                let max_train = f.train.iter().map(|&(_, s)| s).max().unwrap();
                let min_val = f.validation.iter().map(|&(_, s)| s).min().unwrap();
                assert!(max_train + spec.gap < min_val);
            }
        }
    }

    #[test]
    fn fold_construction_is_deterministic() {
        let spec = FoldSpec {
            scheme: CvScheme::RollingWindowVfold,
            first_window: 6,
            validation_size: 2,
            batch: 2,
            gap: 1,
            sample_folds: 3,
        };
        let subjects = ids(&[5, 9, 11, 40]);
        let a = vfold_variant_folds(&spec, &subjects, 30).unwrap();
        let b = vfold_variant_folds(&spec, &subjects, 30).unwrap();
        assert_eq!(a, b);
    }
}
