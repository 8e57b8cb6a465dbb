use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::config::Policy;
use super::device::QualityClass;
use super::SimError;
use crate::pipeline::{Evaluation, Topic};
use crate::semantics::{EvalConfig, PerformanceRecord, ResourceSnapshot, TaskSpec};
use crate::{DeviceId, TaskId, Timestamp, TrustHypergraph};

/// First line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub seed: u64,
    pub policy: Policy,
    pub n_devices: usize,
    pub n_slots: usize,
    pub slot_length: f64,
    pub devices: Vec<DeviceId>,
    pub quality: Vec<QualityClass>,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceEvent {
    /// Hypergraph of a device at the start or end of the run.
    Snapshot {
        device: DeviceId,
        label: String,
        graph: TrustHypergraph,
    },
    SlotObserved {
        device: DeviceId,
        slot: usize,
        truly_idle: bool,
        verdict_idle: bool,
        cycle_started: bool,
    },
    HistoricalStarted {
        device: DeviceId,
        slot: usize,
        subjects: Vec<DeviceId>,
    },
    HistoricalCompleted {
        device: DeviceId,
        evaluations: Vec<Evaluation>,
    },
    CycleFailed {
        device: DeviceId,
        error: String,
    },
    Delivered {
        from: DeviceId,
        to: DeviceId,
        topic: Topic,
        sent_at: Timestamp,
    },
    TaskArrived {
        device: DeviceId,
        task: TaskSpec,
    },
    ResourceCycle {
        device: DeviceId,
        task: TaskSpec,
        queried: Vec<DeviceId>,
        snapshots: Vec<ResourceSnapshot>,
        matched: Vec<DeviceId>,
        selected: Vec<DeviceId>,
        /// snapshots of the selected devices, as seen at selection time
        selected_snapshots: Vec<ResourceSnapshot>,
    },
    TaskExecuted {
        device: DeviceId,
        task_id: TaskId,
        executor: DeviceId,
        record: PerformanceRecord,
    },
    TaskDropped {
        device: DeviceId,
        task_id: TaskId,
    },
}

impl TraceEvent {
    pub fn device(&self) -> &DeviceId {
        match self {
            TraceEvent::Snapshot { device, .. }
            | TraceEvent::SlotObserved { device, .. }
            | TraceEvent::HistoricalStarted { device, .. }
            | TraceEvent::HistoricalCompleted { device, .. }
            | TraceEvent::CycleFailed { device, .. }
            | TraceEvent::TaskArrived { device, .. }
            | TraceEvent::ResourceCycle { device, .. }
            | TraceEvent::TaskExecuted { device, .. }
            | TraceEvent::TaskDropped { device, .. } => device,
            TraceEvent::Delivered { to, .. } => to,
        }
    }

    /// Whether the event concerns `device` as actor, sender or recipient.
    pub fn involves(&self, device: &DeviceId) -> bool {
        match self {
            TraceEvent::Delivered { from, to, .. } => from == device || to == device,
            TraceEvent::TaskExecuted {
                device: d,
                executor,
                ..
            } => d == device || executor == device,
            other => other.device() == device,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub seq: u64,
    pub time: Timestamp,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub meta: TraceMeta,
    pub events: Vec<TimedEvent>,
}

impl SimTrace {
    pub fn new(meta: TraceMeta) -> Self {
        Self {
            meta,
            events: Vec::new(),
        }
    }

    pub fn push(&mut self, time: Timestamp, event: TraceEvent) {
        let seq = self.events.len() as u64;
        self.events.push(TimedEvent { seq, time, event });
    }

    pub fn for_device<'a>(
        &'a self,
        device: &'a DeviceId,
    ) -> impl Iterator<Item = &'a TimedEvent> + 'a {
        self.events.iter().filter(move |e| e.event.involves(device))
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<(), SimError> {
        serde_json::to_writer(&mut out, &self.meta)?;
        out.write_all(b"\n")?;
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)
            .expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self, SimError> {
        let mut lines = input
            .lines()
            .filter(|l| l.as_ref().map_or(true, |s| !s.trim().is_empty()));
        let first = lines
            .next()
            .ok_or_else(|| SimError::Runtime("empty trace file".into()))??;
        let meta: TraceMeta = serde_json::from_str(&first)?;
        let mut events = Vec::new();
        for line in lines {
            events.push(serde_json::from_str(&line?)?);
        }
        Ok(Self { meta, events })
    }
}
