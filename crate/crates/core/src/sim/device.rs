use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{DeviceQuality, QualityModel, ResourceProfile, SimConfig};
use super::rng::{stream, uniform};
use super::SimError;
use crate::semantics::{Feedback, PerformanceRecord, ResourceSnapshot};
use crate::{DeviceId, Timestamp};

pub fn device_name(index: usize, n: usize) -> DeviceId {
    let width = n.saturating_sub(1).to_string().len().max(2);
    DeviceId::new(format!("d{index:0width$}")).expect("generated ids are non-empty")
}

/// CPU utilization trace of one device over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpuTrace {
    /// true where the slot is idle
    pub schedule: Vec<bool>,
    /// per-slot readings seen by the state perceiver
    pub samples: Vec<Vec<f64>>,
    /// learned per-slot utilization pattern from prior days
    pub profile: Vec<f64>,
}

impl CpuTrace {
    pub fn generate(cfg: &SimConfig, device: usize) -> Self {
        let tm = &cfg.trace_model;
        let n_slots = cfg.n_slots();
        let mut rng = stream(cfg.seed, "traces", device as u64, 0);
        let p_idle = cfg.idle_fraction_of(device);
        let mut schedule = Vec::with_capacity(n_slots);
        let mut samples = Vec::with_capacity(n_slots);
        let mut profile = Vec::with_capacity(n_slots);
        for slot in 0..n_slots {
            let drawn = rng.random::<f64>() < p_idle;
            let idle = match &tm.fixed_schedules {
                Some(s) => s[device][slot],
                None => drawn,
            };
            let (level, p_transient, transient) = if idle {
                (tm.idle_util, tm.spike_prob, tm.spike_util)
            } else {
                (tm.busy_util, tm.dip_prob, tm.dip_util)
            };
            let readings = (0..tm.samples_per_slot)
                .map(|_| {
                    let hit = rng.random::<f64>() < p_transient;
                    let base = uniform(&mut rng, level);
                    let alt = uniform(&mut rng, transient);
                    if hit {
                        alt
                    } else {
                        base
                    }
                })
                .collect();
            let past = (0..tm.profile_days)
                .map(|_| uniform(&mut rng, level))
                .sum::<f64>()
                / tm.profile_days as f64;
            schedule.push(idle);
            samples.push(readings);
            profile.push(past);
        }
        Self {
            schedule,
            samples,
            profile,
        }
    }

    pub fn n_slots(&self) -> usize {
        self.schedule.len()
    }
}

/// Ground-truth class of a device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityClass {
    Good,
    Unreliable,
    Degrading,
}

/// Assign classes by shuffling device indices with the quality stream.
pub fn assign_quality(cfg: &SimConfig) -> Vec<QualityClass> {
    let n = cfg.n_devices;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(cfg.seed, "quality", 0, 0);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_bad = (cfg.quality.unreliable_fraction * n as f64).round() as usize;
    let n_deg =
        ((cfg.quality.degrading_fraction * n as f64).round() as usize).min(n - n_bad.min(n));
    let mut classes = vec![QualityClass::Good; n];
    for (rank, &d) in order.iter().enumerate() {
        classes[d] = if rank < n_bad {
            QualityClass::Unreliable
        } else if rank < n_bad + n_deg {
            QualityClass::Degrading
        } else {
            QualityClass::Good
        };
    }
    classes
}

/// Observed outcome of one execution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub response_time: f64,
    pub exec_speed: f64,
    pub accuracy: f64,
    pub feedback: Feedback,
}

fn draw_from(rng: &mut impl Rng, q: &DeviceQuality) -> [f64; 3] {
    [
        uniform(rng, q.response_time),
        uniform(rng, q.exec_speed),
        uniform(rng, q.accuracy),
    ]
}

/// Draw an execution outcome. A degrading device mixes a good and an
/// unreliable draw, moving linearly toward the latter over `degrade_period`.
pub fn draw_execution(
    rng: &mut impl Rng,
    model: &QualityModel,
    class: QualityClass,
    at: Timestamp,
) -> ExecutionResult {
    let good = draw_from(rng, &model.good);
    let bad = draw_from(rng, &model.unreliable);
    let w = match class {
        QualityClass::Good => 0.0,
        QualityClass::Unreliable => 1.0,
        QualityClass::Degrading => (at / model.degrade_period).clamp(0.0, 1.0),
    };
    let [response_time, exec_speed, accuracy] = [0, 1, 2].map(|i| good[i] + w * (bad[i] - good[i]));
    let feedback = if accuracy >= model.satisfied_accuracy {
        Feedback::Satisfied
    } else {
        Feedback::Unsatisfied
    };
    ExecutionResult {
        response_time,
        exec_speed,
        accuracy,
        feedback,
    }
}

/// Sample a device's resources at `at`. Pure in (seed, device, at); `idle`
/// comes from the schedule.
pub fn sample_snapshot(
    seed: u64,
    device: usize,
    id: &DeviceId,
    profile: &ResourceProfile,
    idle: bool,
    at: Timestamp,
) -> ResourceSnapshot {
    let mut rng = stream(seed, "resources", device as u64, at.to_bits());
    ResourceSnapshot {
        subject: id.clone(),
        idle,
        available_time: uniform(&mut rng, profile.available_time),
        cpu_freq: uniform(&mut rng, profile.cpu_freq),
        cpu_fraction: uniform(&mut rng, profile.cpu_fraction),
        storage: uniform(&mut rng, profile.storage),
        bandwidth: uniform(&mut rng, profile.bandwidth),
        stability: uniform(&mut rng, profile.stability),
    }
}

/// Performance records a device has observed as task owner, kept in time
/// order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordStore {
    records: Vec<PerformanceRecord>,
}

impl RecordStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(mut records: Vec<PerformanceRecord>) -> Self {
        records.sort_by(|a, b| a.time.total_cmp(&b.time).then_with(|| a.canonical_cmp(b)));
        Self { records }
    }

    /// Append a record. Out-of-order times are inserted after every record
    /// with an equal or earlier time.
    pub fn append(&mut self, record: PerformanceRecord) {
        let at = self.records.partition_point(|r| r.time <= record.time);
        self.records.insert(at, record);
    }

    pub fn records(&self) -> &[PerformanceRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records about `subject` strictly newer than `since`.
    pub fn query(&self, subject: &DeviceId, since: Timestamp) -> Vec<PerformanceRecord> {
        self.records
            .iter()
            .filter(|r| &r.subject == subject && r.time > since)
            .cloned()
            .collect()
    }

    pub fn path_for(dir: &Path, device: &DeviceId) -> PathBuf {
        dir.join(device.as_str()).join("records.jsonl")
    }

    pub fn persist(&self, dir: &Path, device: &DeviceId) -> Result<PathBuf, SimError> {
        let path = Self::path_for(dir, device);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut out = BufWriter::new(fs::File::create(&path)?);
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(path)
    }

    pub fn load(dir: &Path, device: &DeviceId) -> Result<Self, SimError> {
        let path = Self::path_for(dir, device);
        let mut records = Vec::new();
        for line in BufReader::new(fs::File::open(path)?).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: PerformanceRecord = serde_json::from_str(&line)?;
            r.validate().map_err(|e| SimError::Runtime(e.to_string()))?;
            records.push(r);
        }
        Ok(Self::from_records(records))
    }
}

/// Warm-up records `owner` holds about `peer` before the run starts.
pub fn warmup_records(
    cfg: &SimConfig,
    owner: usize,
    owner_id: &DeviceId,
    peer: usize,
    peer_id: &DeviceId,
    class: QualityClass,
) -> Vec<PerformanceRecord> {
    let q = &cfg.quality;
    let mut rng = stream(cfg.seed, "warmup", owner as u64, peer as u64);
    (0..q.warmup_records)
        .map(|j| {
            let at = -((q.warmup_records - j) as f64) * q.warmup_spacing;
            let x = draw_execution(&mut rng, q, class, at);
            PerformanceRecord {
                observer: owner_id.clone(),
                subject: peer_id.clone(),
                time: at,
                response_time: x.response_time,
                exec_speed: x.exec_speed,
                accuracy: x.accuracy,
                feedback: x.feedback,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(subject: &str, time: f64) -> PerformanceRecord {
        PerformanceRecord {
            observer: DeviceId::new("d00").unwrap(),
            subject: DeviceId::new(subject).unwrap(),
            time,
            response_time: 0.5,
            exec_speed: 3.0,
            accuracy: 0.9,
            feedback: Feedback::Satisfied,
        }
    }

    #[test]
    fn names_sort_numerically() {
        let ids: Vec<DeviceId> = (0..12).map(|i| device_name(i, 12)).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
        assert_eq!(device_name(3, 5).as_str(), "d03");
        assert_eq!(device_name(7, 150).as_str(), "d007");
    }

    #[test]
    fn trace_shape_and_profile_separation() {
        let cfg = SimConfig::default();
        let t = CpuTrace::generate(&cfg, 0);
        assert_eq!(t.n_slots(), 120);
        for s in 0..t.n_slots() {
            assert_eq!(t.samples[s].len(), 5);
            if t.schedule[s] {
                assert!(t.profile[s] <= 0.15);
            } else {
                assert!(t.profile[s] >= 0.5);
            }
        }
        assert_eq!(t, CpuTrace::generate(&cfg, 0));
        assert_ne!(t, CpuTrace::generate(&cfg, 1));
    }

    #[test]
    fn fixed_schedule_is_honoured() {
        let cfg = SimConfig {
            n_devices: 2,
            horizon: 90.0,
            trace_model: crate::sim::TraceModel {
                fixed_schedules: Some(vec![vec![true, false, true], vec![false, false, true]]),
                ..Default::default()
            },
            ..SimConfig::default()
        };
        assert_eq!(
            CpuTrace::generate(&cfg, 0).schedule,
            vec![true, false, true]
        );
        assert_eq!(
            CpuTrace::generate(&cfg, 1).schedule,
            vec![false, false, true]
        );
    }

    #[test]
    fn quality_fractions() {
        let cfg = SimConfig::default();
        let classes = assign_quality(&cfg);
        assert_eq!(
            classes
                .iter()
                .filter(|c| **c == QualityClass::Unreliable)
                .count(),
            3
        );
        assert_eq!(
            classes
                .iter()
                .filter(|c| **c == QualityClass::Degrading)
                .count(),
            2
        );
    }

    #[test]
    fn snapshot_is_pure() {
        let id = DeviceId::new("d01").unwrap();
        let p = ResourceProfile::default();
        let a = sample_snapshot(5, 1, &id, &p, true, 12.5);
        assert_eq!(a, sample_snapshot(5, 1, &id, &p, true, 12.5));
        assert_ne!(a, sample_snapshot(5, 1, &id, &p, true, 12.6));
        a.validate().unwrap();
    }

    #[test]
    fn store_stays_sorted_and_queries_by_since() {
        let mut s = RecordStore::new();
        s.append(rec("d01", 10.0));
        s.append(rec("d02", 20.0));
        s.append(rec("d01", 5.0));
        s.append(rec("d01", 30.0));
        let times: Vec<f64> = s.records().iter().map(|r| r.time).collect();
        assert_eq!(times, vec![5.0, 10.0, 20.0, 30.0]);
        let q = s.query(&DeviceId::new("d01").unwrap(), 5.0);
        assert_eq!(
            q.iter().map(|r| r.time).collect::<Vec<_>>(),
            vec![10.0, 30.0]
        );
    }

    #[test]
    fn store_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let id = DeviceId::new("d00").unwrap();
        let s = RecordStore::from_records(vec![rec("d01", 1.0), rec("d02", 2.5)]);
        let path = s.persist(dir.path(), &id).unwrap();
        assert!(path.ends_with("d00/records.jsonl"));
        assert_eq!(RecordStore::load(dir.path(), &id).unwrap(), s);
    }

    #[test]
    fn degrading_device_slides_to_unreliable() {
        let m = QualityModel::default();
        let mut r = stream(9, "x", 0, 0);
        let early = draw_execution(&mut r, &m, QualityClass::Degrading, -100.0);
        assert!(early.accuracy >= 0.93 && early.feedback == Feedback::Satisfied);
        let late = draw_execution(&mut r, &m, QualityClass::Degrading, 7200.0);
        assert!(late.accuracy <= 0.7 && late.feedback == Feedback::Unsatisfied);
    }

    #[test]
    fn warmup_precedes_the_run() {
        let cfg = SimConfig::default();
        let a = DeviceId::new("d00").unwrap();
        let b = DeviceId::new("d01").unwrap();
        let recs = warmup_records(&cfg, 0, &a, 1, &b, QualityClass::Good);
        assert_eq!(recs.len(), 3);
        assert!(recs.windows(2).all(|w| w[0].time < w[1].time));
        assert!(recs.iter().all(|r| r.time < 0.0));
    }
}
