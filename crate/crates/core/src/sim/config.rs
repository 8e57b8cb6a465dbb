use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::semantics::{SemanticsError, TaskSpec};
use crate::TaskId;

/// Which evaluation strategy every device in a run follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Idle perception from recent samples plus learned pattern, priority
    /// selection of one collaborator, resource queries to the trusted group.
    #[default]
    SemanticChain,
    /// Same pipeline, but idleness is declared from a single low sample.
    StatisticalIdle,
    /// Re-evaluates every cluster member each idle slot and queries every
    /// cluster member for resources.
    EvaluateAllCluster,
    /// Picks a trusted collaborator uniformly at random, no resource check.
    RandomTrustedPick,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::SemanticChain,
        Policy::StatisticalIdle,
        Policy::EvaluateAllCluster,
        Policy::RandomTrustedPick,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::SemanticChain => "semantic_chain",
            Policy::StatisticalIdle => "statistical_idle",
            Policy::EvaluateAllCluster => "evaluate_all_cluster",
            Policy::RandomTrustedPick => "random_trusted_pick",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == norm || format!("{p:?}").to_ascii_lowercase() == norm)
            .ok_or_else(|| format!("unknown policy `{s}`"))
    }
}

/// Closed interval `[lo, hi]` sampled uniformly; `lo == hi` is a constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    pub fn validate(&self, name: &str) -> Result<(), SimError> {
        if !(self.0.is_finite() && self.1.is_finite() && self.0 <= self.1) {
            return Err(SimError::ConfigInvalid(format!(
                "{name}: bad range [{}, {}]",
                self.0, self.1
            )));
        }
        Ok(())
    }
}

/// CPU utilization model. Each slot is idle or busy; a slot's utilization
/// level is uniform in `idle_util` or `busy_util`, and the perceiver sees
/// `samples_per_slot` readings with occasional transient spikes (idle slots)
/// or dips (busy slots).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceModel {
    pub samples_per_slot: usize,
    pub idle_util: Range,
    pub busy_util: Range,
    pub spike_prob: f64,
    pub spike_util: Range,
    pub dip_prob: f64,
    pub dip_util: Range,
    /// prior days averaged into the learned per-slot profile
    pub profile_days: usize,
    /// scripted idle (true) / busy (false) schedules, one per device
    pub fixed_schedules: Option<Vec<Vec<bool>>>,
}

impl Default for TraceModel {
    fn default() -> Self {
        Self {
            samples_per_slot: 5,
            idle_util: Range(0.0, 0.15),
            busy_util: Range(0.5, 1.0),
            spike_prob: 0.1,
            spike_util: Range(0.3, 0.45),
            dip_prob: 0.1,
            dip_util: Range(0.0, 0.15),
            profile_days: 7,
            fixed_schedules: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResourceProfile {
    /// cycles/s
    pub cpu_freq: Range,
    pub cpu_fraction: Range,
    /// MB
    pub storage: Range,
    /// Mb/s
    pub bandwidth: Range,
    pub stability: Range,
    /// s
    pub available_time: Range,
}

impl Default for ResourceProfile {
    fn default() -> Self {
        Self {
            cpu_freq: Range(40e9, 60e9),
            cpu_fraction: Range(0.8, 1.0),
            storage: Range(200.0, 1000.0),
            bandwidth: Range(150.0, 300.0),
            stability: Range(0.92, 1.0),
            available_time: Range(60.0, 300.0),
        }
    }
}

impl ResourceProfile {
    fn validate(&self) -> Result<(), SimError> {
        self.cpu_freq.validate("cpu_freq")?;
        self.cpu_fraction.validate("cpu_fraction")?;
        self.storage.validate("storage")?;
        self.bandwidth.validate("bandwidth")?;
        self.stability.validate("stability")?;
        self.available_time.validate("available_time")?;
        if self.cpu_freq.0 <= 0.0 || self.bandwidth.0 <= 0.0 {
            return Err(SimError::ConfigInvalid(
                "cpu_freq and bandwidth must be positive".into(),
            ));
        }
        if self.cpu_fraction.0 <= 0.0 || self.cpu_fraction.1 > 1.0 {
            return Err(SimError::ConfigInvalid(
                "cpu_fraction must lie in (0,1]".into(),
            ));
        }
        if self.stability.0 < 0.0 || self.stability.1 > 1.0 {
            return Err(SimError::ConfigInvalid(
                "stability must lie in [0,1]".into(),
            ));
        }
        if self.storage.0 < 0.0 || self.available_time.0 < 0.0 {
            return Err(SimError::ConfigInvalid(
                "storage and available_time must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Resource profile for a list of device indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOverride {
    pub devices: Vec<usize>,
    pub profile: ResourceProfile,
}

/// Ground-truth execution quality of a device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceQuality {
    pub accuracy: Range,
    /// MB/s
    pub exec_speed: Range,
    /// s
    pub response_time: Range,
}

impl DeviceQuality {
    pub fn good() -> Self {
        Self {
            accuracy: Range(0.93, 0.99),
            exec_speed: Range(2.5, 4.0),
            response_time: Range(0.3, 0.8),
        }
    }

    pub fn unreliable() -> Self {
        Self {
            accuracy: Range(0.4, 0.7),
            exec_speed: Range(0.5, 1.5),
            response_time: Range(1.2, 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityModel {
    pub unreliable_fraction: f64,
    pub degrading_fraction: f64,
    pub good: DeviceQuality,
    pub unreliable: DeviceQuality,
    /// seconds over which a degrading device slides from good to unreliable
    /// behaviour, starting at t = 0
    pub degrade_period: f64,
    /// feedback is satisfied iff observed accuracy reaches this floor
    pub satisfied_accuracy: f64,
    /// records each device holds about each peer before t = 0
    pub warmup_records: usize,
    pub warmup_spacing: f64,
}

impl Default for QualityModel {
    fn default() -> Self {
        Self {
            unreliable_fraction: 0.3,
            degrading_fraction: 0.2,
            good: DeviceQuality::good(),
            unreliable: DeviceQuality::unreliable(),
            degrade_period: 3600.0,
            satisfied_accuracy: 0.8,
            warmup_records: 3,
            warmup_spacing: 600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskTemplate {
    pub size: f64,
    pub processing_density: f64,
    pub deadline: f64,
}

impl Default for TaskTemplate {
    fn default() -> Self {
        Self {
            size: 100.0,
            processing_density: 2339.0,
            deadline: 60.0,
        }
    }
}

impl TaskTemplate {
    pub fn instantiate(&self, task_id: TaskId) -> Result<TaskSpec, SemanticsError> {
        TaskSpec::new(task_id, self.size, self.processing_density, self.deadline)
    }
}

/// A task injected at a fixed time instead of drawn from the arrival process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedTask {
    pub time: f64,
    pub device: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub n_devices: usize,
    /// seconds
    pub slot_length: f64,
    /// seconds; a multiple of `slot_length`
    pub horizon: f64,
    /// one-way message latency in seconds
    pub link_latency: f64,
    /// extra wait after the reply round trip before a collection closes
    pub collect_window: f64,
    /// probability that a slot is idle
    pub idle_fraction: f64,
    /// per-device override of `idle_fraction`
    pub idle_fractions: Option<Vec<f64>>,
    /// tasks per hour per device
    pub task_rate: f64,
    pub scripted_tasks: Vec<ScriptedTask>,
    pub task: TaskTemplate,
    pub trace_model: TraceModel,
    pub resource_profile: ResourceProfile,
    pub resource_overrides: Vec<ProfileOverride>,
    pub quality: QualityModel,
    /// number of fixed clusters used by the evaluate-all baseline
    pub cluster_count: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_devices: 10,
            slot_length: 30.0,
            horizon: 3600.0,
            link_latency: 0.05,
            collect_window: 1.0,
            idle_fraction: 0.5,
            idle_fractions: None,
            task_rate: 6.0,
            scripted_tasks: Vec::new(),
            task: TaskTemplate::default(),
            trace_model: TraceModel::default(),
            resource_profile: ResourceProfile::default(),
            resource_overrides: Vec::new(),
            quality: QualityModel::default(),
            cluster_count: 1,
        }
    }
}

impl SimConfig {
    pub fn n_slots(&self) -> usize {
        (self.horizon / self.slot_length).round() as usize
    }

    pub fn idle_fraction_of(&self, device: usize) -> f64 {
        self.idle_fractions
            .as_ref()
            .and_then(|v| v.get(device).copied())
            .unwrap_or(self.idle_fraction)
    }

    pub fn profile_of(&self, device: usize) -> &ResourceProfile {
        self.resource_overrides
            .iter()
            .rev()
            .find(|o| o.devices.contains(&device))
            .map_or(&self.resource_profile, |o| &o.profile)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::ConfigInvalid(m));
        if self.n_devices < 2 {
            return bad(format!(
                "n_devices must be at least 2, got {}",
                self.n_devices
            ));
        }
        if !(self.slot_length > 0.0) {
            return bad("slot_length must be positive".into());
        }
        if !(self.horizon > 0.0) {
            return bad("horizon must be positive".into());
        }
        let slots = self.horizon / self.slot_length;
        if (slots - slots.round()).abs() > 1e-9 {
            return bad(format!(
                "horizon {} is not a multiple of slot_length {}",
                self.horizon, self.slot_length
            ));
        }
        if !(self.link_latency >= 0.0) || !(self.collect_window >= 0.0) {
            return bad("link_latency and collect_window must be non-negative".into());
        }
        if 2.0 * self.link_latency + self.collect_window >= self.slot_length {
            return bad("reply collection must close within one slot".into());
        }
        let fractions = std::iter::once(self.idle_fraction)
            .chain(self.idle_fractions.iter().flatten().copied());
        for f in fractions {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("idle fraction {f} outside [0,1]"));
            }
        }
        if !(self.task_rate >= 0.0) {
            return bad("task_rate must be non-negative".into());
        }
        for t in &self.scripted_tasks {
            if t.device >= self.n_devices || !(t.time >= 0.0 && t.time < self.horizon) {
                return bad(format!("scripted task {t:?} out of range"));
            }
        }
        self.task
            .instantiate(TaskId::new("template"))
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        let tm = &self.trace_model;
        if tm.samples_per_slot == 0 || tm.profile_days == 0 {
            return bad("samples_per_slot and profile_days must be positive".into());
        }
        for (name, r) in [
            ("idle_util", tm.idle_util),
            ("busy_util", tm.busy_util),
            ("spike_util", tm.spike_util),
            ("dip_util", tm.dip_util),
        ] {
            r.validate(name)?;
        }
        if !(0.0..=1.0).contains(&tm.spike_prob) || !(0.0..=1.0).contains(&tm.dip_prob) {
            return bad("spike_prob and dip_prob must lie in [0,1]".into());
        }
        if let Some(schedules) = &tm.fixed_schedules {
            if schedules.len() != self.n_devices
                || schedules.iter().any(|s| s.len() != self.n_slots())
            {
                return bad(
                    "fixed_schedules must hold one schedule of n_slots entries per device".into(),
                );
            }
        }
        self.resource_profile.validate()?;
        for o in &self.resource_overrides {
            o.profile.validate()?;
            if o.devices.iter().any(|&d| d >= self.n_devices) {
                return bad("resource override names an unknown device".into());
            }
        }
        let q = &self.quality;
        if !(0.0..=1.0).contains(&q.unreliable_fraction)
            || !(0.0..=1.0).contains(&q.degrading_fraction)
            || q.unreliable_fraction + q.degrading_fraction > 1.0
        {
            return bad("quality fractions must lie in [0,1] and sum to at most 1".into());
        }
        for (name, dq) in [("good", &q.good), ("unreliable", &q.unreliable)] {
            dq.accuracy.validate(name)?;
            dq.exec_speed.validate(name)?;
            dq.response_time.validate(name)?;
            if dq.accuracy.0 < 0.0
                || dq.accuracy.1 > 1.0
                || dq.exec_speed.0 < 0.0
                || dq.response_time.0 < 0.0
            {
                return bad(format!("{name} quality out of range"));
            }
        }
        if !(q.degrade_period > 0.0) {
            return bad("degrade_period must be positive".into());
        }
        if self.cluster_count == 0 {
            return bad("cluster_count must be positive".into());
        }
        Ok(())
    }
}
