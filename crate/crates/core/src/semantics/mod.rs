//! Trust evaluation math: record normalization, recency-weighted scoring,
//! least-squares trend estimation and task/resource feasibility.

pub mod inference;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypergraph::{DeviceId, TaskId, Timestamp, TrustAnnotation, TrustStatus, TrustTrend};

pub use inference::{RuleEngine, TrustInference};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SemanticsError {
    #[error("no performance records to evaluate")]
    EmptyHistory,
    #[error("records describe more than one subject ({0} and {1})")]
    MixedSubjects(DeviceId, DeviceId),
    #[error("at least two records are needed for a trend, got {0}")]
    InsufficientHistory(usize),
    #[error("all records share the same timestamp")]
    DegenerateTime,
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid resource snapshot: {0}")]
    InvalidSnapshot(String),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedback {
    Satisfied,
    Unsatisfied,
}

/// One observation by `observer` of `subject` executing a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRecord {
    pub observer: DeviceId,
    #[serde(rename = "device")]
    pub subject: DeviceId,
    pub time: Timestamp,
    /// seconds
    pub response_time: f64,
    /// MB/s
    #[serde(rename = "execution_speed")]
    pub exec_speed: f64,
    pub accuracy: f64,
    pub feedback: Feedback,
}

impl PerformanceRecord {
    pub fn validate(&self) -> Result<(), SemanticsError> {
        if self.observer == self.subject {
            return Err(SemanticsError::InvalidRecord(format!(
                "{} observed itself",
                self.subject
            )));
        }
        if !(0.0..=1.0).contains(&self.accuracy) {
            return Err(SemanticsError::InvalidRecord(format!(
                "accuracy {} outside [0,1]",
                self.accuracy
            )));
        }
        if !(self.response_time >= 0.0) || !(self.exec_speed >= 0.0) || !self.time.is_finite() {
            return Err(SemanticsError::InvalidRecord(
                "negative or non-finite measurement".into(),
            ));
        }
        Ok(())
    }

    /// Total order used for sorting and deduplication.
    pub(crate) fn canonical_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| self.observer.cmp(&other.observer))
            .then_with(|| self.subject.cmp(&other.subject))
            .then_with(|| self.response_time.total_cmp(&other.response_time))
            .then_with(|| self.exec_speed.total_cmp(&other.exec_speed))
            .then_with(|| self.accuracy.total_cmp(&other.accuracy))
            .then_with(|| self.feedback.cmp(&other.feedback))
    }
}

/// Sort records by time and drop duplicates sharing `(observer, time)`.
pub fn merge_records<'a>(
    batches: impl IntoIterator<Item = &'a [PerformanceRecord]>,
) -> Vec<PerformanceRecord> {
    let mut all: Vec<PerformanceRecord> = batches
        .into_iter()
        .flat_map(|b| b.iter().cloned())
        .collect();
    all.sort_by(PerformanceRecord::canonical_cmp);
    let mut seen = BTreeSet::new();
    // adding 0.0 folds -0.0 into 0.0 so both count as the same instant
    all.retain(|r| seen.insert((r.observer.clone(), (r.time + 0.0).to_bits())));
    all
}

/// Offloadable task description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    /// megabytes (10^6 bytes)
    pub size: f64,
    /// cycles per bit
    pub processing_density: f64,
    /// seconds
    pub deadline: f64,
}

impl TaskSpec {
    pub fn new(
        task_id: TaskId,
        size: f64,
        processing_density: f64,
        deadline: f64,
    ) -> Result<Self, SemanticsError> {
        let task = Self {
            task_id,
            size,
            processing_density,
            deadline,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), SemanticsError> {
        for (name, v) in [
            ("size", self.size),
            ("processing_density", self.processing_density),
            ("deadline", self.deadline),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(SemanticsError::InvalidTask(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A collaborator's resource offer at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSnapshot {
    #[serde(rename = "device")]
    pub subject: DeviceId,
    pub idle: bool,
    /// seconds the device can dedicate
    pub available_time: f64,
    /// cycles per second
    pub cpu_freq: f64,
    /// available CPU capacity in (0, 1]
    pub cpu_fraction: f64,
    /// megabytes
    pub storage: f64,
    /// megabits per second
    pub bandwidth: f64,
    /// link stability in [0, 1]
    pub stability: f64,
}

impl ResourceSnapshot {
    pub fn validate(&self) -> Result<(), SemanticsError> {
        if !(self.cpu_fraction > 0.0 && self.cpu_fraction <= 1.0) {
            return Err(SemanticsError::InvalidSnapshot(format!(
                "cpu_fraction {} outside (0,1]",
                self.cpu_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.stability) {
            return Err(SemanticsError::InvalidSnapshot(format!(
                "stability {} outside [0,1]",
                self.stability
            )));
        }
        if !(self.cpu_freq > 0.0) || !(self.bandwidth > 0.0) {
            return Err(SemanticsError::InvalidSnapshot(
                "cpu_freq and bandwidth must be positive".into(),
            ));
        }
        if !(self.available_time >= 0.0) || !(self.storage >= 0.0) {
            return Err(SemanticsError::InvalidSnapshot(
                "available_time and storage must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Accuracy,
    ExecSpeed,
    ResponseTime,
    Feedback,
}

impl Factor {
    /// Order used by factor vectors and weights.
    pub const ALL: [Factor; 4] = [
        Factor::Accuracy,
        Factor::ExecSpeed,
        Factor::ResponseTime,
        Factor::Feedback,
    ];

    pub fn index(self) -> usize {
        match self {
            Factor::Accuracy => 0,
            Factor::ExecSpeed => 1,
            Factor::ResponseTime => 2,
            Factor::Feedback => 3,
        }
    }
}

/// Normalized factors in `Factor::ALL` order; higher is better for each.
pub type FactorVector = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendEstimate {
    pub factor: Factor,
    /// per-second change of the normalized factor
    pub slope: f64,
    pub direction: TrustTrend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub trust_threshold: f64,
    pub decline_epsilon: f64,
    /// accuracy, exec_speed, response_time, feedback
    pub factor_weights: FactorVector,
    pub recency_half_life: f64,
    pub response_time_cap: f64,
    pub exec_speed_cap: f64,
    pub min_stability: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trust_threshold: 0.6,
            decline_epsilon: 1e-4,
            factor_weights: [0.25; 4],
            recency_half_life: 3600.0,
            response_time_cap: 2.0,
            exec_speed_cap: 4.0,
            min_stability: 0.9,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), SemanticsError> {
        let bad = |msg: String| Err(SemanticsError::InvalidConfig(msg));
        if !(self.trust_threshold > 0.0 && self.trust_threshold < 1.0) {
            return bad(format!(
                "trust_threshold {} outside (0,1)",
                self.trust_threshold
            ));
        }
        if !(self.decline_epsilon > 0.0) {
            return bad("decline_epsilon must be positive".into());
        }
        if self.factor_weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("factor weights must be non-negative".into());
        }
        let sum: f64 = self.factor_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("factor weights sum to {sum}, expected 1"));
        }
        if !(self.recency_half_life > 0.0)
            || !(self.response_time_cap > 0.0)
            || !(self.exec_speed_cap > 0.0)
        {
            return bad("half life and caps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.min_stability) {
            return bad("min_stability outside [0,1]".into());
        }
        Ok(())
    }
}

/// Map a record onto `[0,1]^4`; response time is inverted so that higher is
/// better for every factor.
pub fn normalize_record(r: &PerformanceRecord, cfg: &EvalConfig) -> FactorVector {
    let accuracy = r.accuracy.clamp(0.0, 1.0);
    let speed = (r.exec_speed / cfg.exec_speed_cap).clamp(0.0, 1.0);
    let response = (1.0 - r.response_time / cfg.response_time_cap).clamp(0.0, 1.0);
    let feedback = match r.feedback {
        Feedback::Satisfied => 1.0,
        Feedback::Unsatisfied => 0.0,
    };
    [accuracy, speed, response, feedback]
}

fn weighted(v: &FactorVector, weights: &FactorVector) -> f64 {
    v.iter().zip(weights).map(|(x, w)| x * w).sum()
}

fn single_subject(records: &[PerformanceRecord]) -> Result<&DeviceId, SemanticsError> {
    let first = records.first().ok_or(SemanticsError::EmptyHistory)?;
    if let Some(other) = records.iter().find(|r| r.subject != first.subject) {
        return Err(SemanticsError::MixedSubjects(
            first.subject.clone(),
            other.subject.clone(),
        ));
    }
    Ok(&first.subject)
}

/// Recency-weighted, factor-weighted trust value in `[0,1]`.
///
/// Each record contributes with weight `2^(-(now - t) / half_life)`. The
/// weights are taken relative to the newest record, which leaves the ratio
/// unchanged but avoids underflow for very old histories; `now` cancels out.
pub fn score_history(
    records: &[PerformanceRecord],
    _now: Timestamp,
    cfg: &EvalConfig,
) -> Result<f64, SemanticsError> {
    single_subject(records)?;
    let newest = records
        .iter()
        .map(|r| r.time)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for r in records {
        let w = (-(newest - r.time) / cfg.recency_half_life).exp2();
        num += w * weighted(&normalize_record(r, cfg), &cfg.factor_weights);
        den += w;
    }
    Ok((num / den).clamp(0.0, 1.0))
}

/// Ordinary least-squares slope of `(t, y)` points.
pub(crate) fn ols_slope(points: &[(f64, f64)]) -> Result<f64, SemanticsError> {
    if points.len() < 2 {
        return Err(SemanticsError::InsufficientHistory(points.len()));
    }
    let n = points.len() as f64;
    let t_mean = points.iter().map(|p| p.0).sum::<f64>() / n;
    let y_mean = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(t, y) in points {
        let dt = t - t_mean;
        sxy += dt * (y - y_mean);
        sxx += dt * dt;
    }
    if sxx == 0.0 {
        return Err(SemanticsError::DegenerateTime);
    }
    Ok(sxy / sxx)
}

/// Least-squares trend of one normalized factor over time.
pub fn estimate_trend(
    records: &[PerformanceRecord],
    factor: Factor,
    cfg: &EvalConfig,
) -> Result<TrendEstimate, SemanticsError> {
    let points: Vec<(f64, f64)> = records
        .iter()
        .map(|r| (r.time, normalize_record(r, cfg)[factor.index()]))
        .collect();
    let slope = ols_slope(&points)?;
    let direction = if slope < -cfg.decline_epsilon {
        TrustTrend::Declining
    } else {
        TrustTrend::Stable
    };
    Ok(TrendEstimate {
        factor,
        slope,
        direction,
    })
}

/// Weighted sum of per-factor slopes; zero when the history has no time spread.
pub fn weighted_trend_slope(records: &[PerformanceRecord], cfg: &EvalConfig) -> f64 {
    Factor::ALL
        .iter()
        .map(|&f| match estimate_trend(records, f, cfg) {
            Ok(est) => cfg.factor_weights[f.index()] * est.slope,
            Err(_) => 0.0,
        })
        .sum()
}

/// Combine local and received history into a trust verdict at `now`.
pub fn infer_trust_semantics(
    local: &[PerformanceRecord],
    received: &[PerformanceRecord],
    now: Timestamp,
    cfg: &EvalConfig,
) -> Result<TrustAnnotation, SemanticsError> {
    let merged = merge_records([local, received]);
    let subject = single_subject(&merged)?.clone();
    let score = score_history(&merged, now, cfg)?;
    let status = if score >= cfg.trust_threshold {
        TrustStatus::Trusted
    } else {
        TrustStatus::Untrusted
    };
    let trend = if weighted_trend_slope(&merged, cfg) < -cfg.decline_epsilon {
        TrustTrend::Declining
    } else {
        TrustTrend::Stable
    };
    Ok(TrustAnnotation::new(subject, now, status, trend))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskRequirements {
    pub total_cycles: f64,
    pub total_megabits: f64,
}

pub fn analyze_task(task: &TaskSpec) -> TaskRequirements {
    let total_megabits = task.size * 8.0;
    TaskRequirements {
        total_cycles: total_megabits * 1e6 * task.processing_density,
        total_megabits,
    }
}

/// Why a snapshot was or was not matched. Checked in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchReason {
    Matched,
    NotIdle,
    InsufficientStorage,
    UnstableLink,
    DeadlineExceeded,
    AvailabilityExceeded,
}

impl fmt::Display for MatchReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MatchReason::Matched => "matched",
            MatchReason::NotIdle => "not_idle",
            MatchReason::InsufficientStorage => "insufficient_storage",
            MatchReason::UnstableLink => "unstable_link",
            MatchReason::DeadlineExceeded => "deadline_exceeded",
            MatchReason::AvailabilityExceeded => "availability_exceeded",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchVerdict {
    pub matched: bool,
    /// seconds to transfer the task
    pub t_comm: f64,
    /// seconds to compute the task
    pub t_comp: f64,
    pub reason: MatchReason,
}

pub fn check_resource_match(
    task: &TaskSpec,
    snap: &ResourceSnapshot,
    cfg: &EvalConfig,
) -> MatchVerdict {
    let req = analyze_task(task);
    let t_comm = req.total_megabits / snap.bandwidth;
    let t_comp = req.total_cycles / (snap.cpu_freq * snap.cpu_fraction);
    let total = t_comm + t_comp;
    let reason = if !snap.idle {
        MatchReason::NotIdle
    } else if snap.storage < task.size {
        MatchReason::InsufficientStorage
    } else if snap.stability < cfg.min_stability {
        MatchReason::UnstableLink
    } else if total > task.deadline {
        MatchReason::DeadlineExceeded
    } else if total > snap.available_time {
        MatchReason::AvailabilityExceeded
    } else {
        MatchReason::Matched
    };
    MatchVerdict {
        matched: reason == MatchReason::Matched,
        t_comm,
        t_comp,
        reason,
    }
}

pub fn evaluate_resources(
    task: &TaskSpec,
    snaps: &[ResourceSnapshot],
    cfg: &EvalConfig,
) -> BTreeSet<DeviceId> {
    snaps
        .iter()
        .filter(|s| check_resource_match(task, s, cfg).matched)
        .map(|s| s.subject.clone())
        .collect()
}
