//! Deterministic discrete-event simulation of a device network.
//!
//! Events are processed in `(time, insertion order)` order and every random
//! draw comes from a named stream keyed by the run seed (see [`rng`]), so a
//! seed fully determines the trace. Streams that model the world (CPU
//! traces, task arrivals, ground-truth quality, resource snapshots) do not
//! depend on the policy under test.

pub mod config;
pub mod device;
pub mod rng;
pub mod trace;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    DeviceQuality, Policy, ProfileOverride, QualityModel, Range, ResourceProfile, ScriptedTask,
    SimConfig, TaskTemplate, TraceModel,
};
pub use device::{
    assign_quality, device_name, draw_execution, sample_snapshot, warmup_records, CpuTrace,
    ExecutionResult, QualityClass, RecordStore,
};
pub use trace::{SimTrace, TimedEvent, TraceEvent, TraceMeta};

use crate::pipeline::{
    perceive_state, CycleOutcome, Envelope, HistoricalStart, IdleVerdict, Payload, PipelineConfig,
    PipelineError, TrustAgents,
};
use crate::semantics::inference::{RuleEngine, TrustInference};
use crate::semantics::{
    check_resource_match, EvalConfig, PerformanceRecord, ResourceSnapshot, TaskSpec,
};
use crate::{
    infer_trust_semantics, DeviceId, TaskId, Timestamp, TrustAnnotation, TrustHypergraph,
    TrustStatus, TrustTrend,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One simulated device.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceState {
    pub id: DeviceId,
    pub index: usize,
    pub class: QualityClass,
    pub trace: CpuTrace,
    pub store: RecordStore,
    pub agents: TrustAgents,
    tasks_issued: u64,
}

/// A scheduled message delivery.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub to: DeviceId,
    pub time: Timestamp,
    /// recipient is idle at delivery time and so will answer history queries
    pub responds: bool,
}

#[derive(Debug, Clone)]
enum EventKind {
    SlotTick {
        slot: usize,
    },
    TaskArrive {
        device: usize,
    },
    Deliver {
        from: usize,
        to: usize,
        env: Envelope,
    },
    CollectHistory {
        device: usize,
    },
    CollectResource {
        device: usize,
        task: TaskSpec,
    },
}

#[derive(Debug)]
struct Queued {
    time: Timestamp,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

pub struct SimOutcome {
    pub trace: SimTrace,
    pub devices: Vec<DeviceState>,
}

pub struct Simulator {
    cfg: SimConfig,
    eval: EvalConfig,
    pipeline: PipelineConfig,
    policy: Policy,
    devices: Vec<DeviceState>,
    index: BTreeMap<DeviceId, usize>,
    queue: BinaryHeap<Queued>,
    next_seq: u64,
    trace: SimTrace,
    inference: Box<dyn TrustInference>,
}

fn validate_pipeline(cfg: &PipelineConfig) -> Result<(), SimError> {
    let ok = (0.0..=1.0).contains(&cfg.tau_now)
        && (0.0..=1.0).contains(&cfg.tau_hist)
        && [cfg.w_staleness, cfg.w_trend, cfg.w_frequency]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0)
        && cfg.staleness_cap > 0.0
        && cfg.batch_size > 0;
    if ok {
        Ok(())
    } else {
        Err(SimError::ConfigInvalid(format!(
            "bad pipeline configuration {cfg:?}"
        )))
    }
}

impl Simulator {
    pub fn new(
        cfg: SimConfig,
        eval: EvalConfig,
        pipeline: PipelineConfig,
        policy: Policy,
    ) -> Result<Self, SimError> {
        cfg.validate()?;
        eval.validate()
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        validate_pipeline(&pipeline)?;

        let n = cfg.n_devices;
        let ids: Vec<DeviceId> = (0..n).map(|i| device_name(i, n)).collect();
        let classes = assign_quality(&cfg);

        let mut devices = Vec::with_capacity(n);
        for i in 0..n {
            let mut records = Vec::new();
            let mut graph = TrustHypergraph::init_local(ids[i].clone());
            for j in (0..n).filter(|&j| j != i) {
                let warm = warmup_records(&cfg, i, &ids[i], j, &ids[j], classes[j]);
                let annotation = if warm.is_empty() {
                    TrustAnnotation::new(
                        ids[j].clone(),
                        0.0,
                        TrustStatus::Trusted,
                        TrustTrend::Stable,
                    )
                } else {
                    infer_trust_semantics(&warm, &[], 0.0, &eval)
                        .map_err(|e| SimError::Runtime(e.to_string()))?
                };
                graph
                    .place(annotation)
                    .map_err(|e| SimError::Runtime(e.to_string()))?;
                records.extend(warm);
            }
            devices.push(DeviceState {
                id: ids[i].clone(),
                index: i,
                class: classes[i],
                trace: CpuTrace::generate(&cfg, i),
                store: RecordStore::from_records(records),
                agents: TrustAgents::new(graph, pipeline.clone(), eval.clone()),
                tasks_issued: 0,
            });
        }

        let meta = TraceMeta {
            seed: cfg.seed,
            policy,
            n_devices: n,
            n_slots: cfg.n_slots(),
            slot_length: cfg.slot_length,
            devices: ids.clone(),
            quality: classes,
            eval: eval.clone(),
        };
        let mut sim = Self {
            index: ids
                .iter()
                .cloned()
                .enumerate()
                .map(|(i, d)| (d, i))
                .collect(),
            cfg,
            eval,
            pipeline,
            policy,
            devices,
            queue: BinaryHeap::new(),
            next_seq: 0,
            trace: SimTrace::new(meta),
            inference: Box::new(RuleEngine),
        };
        sim.schedule_world();
        Ok(sim)
    }

    /// Replace the rule engine with another inference backend.
    pub fn with_inference(mut self, inference: Box<dyn TrustInference>) -> Self {
        self.inference = inference;
        self
    }

    fn push(&mut self, time: Timestamp, kind: EventKind) {
        self.queue.push(Queued {
            time,
            seq: self.next_seq,
            kind,
        });
        self.next_seq += 1;
    }

    fn schedule_world(&mut self) {
        for slot in 0..self.cfg.n_slots() {
            self.push(
                slot as f64 * self.cfg.slot_length,
                EventKind::SlotTick { slot },
            );
        }
        let mut arrivals: Vec<(Timestamp, usize)> = Vec::new();
        if self.cfg.task_rate > 0.0 {
            let rate = self.cfg.task_rate / 3600.0;
            for d in 0..self.cfg.n_devices {
                let mut r = rng::stream(self.cfg.seed, "tasks", d as u64, 0);
                let mut t = rng::exponential(&mut r, rate);
                while t < self.cfg.horizon {
                    arrivals.push((t, d));
                    t += rng::exponential(&mut r, rate);
                }
            }
        }
        arrivals.extend(self.cfg.scripted_tasks.iter().map(|s| (s.time, s.device)));
        arrivals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (t, device) in arrivals {
            self.push(t, EventKind::TaskArrive { device });
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn device_index(&self, id: &DeviceId) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn slot_at(&self, t: Timestamp) -> usize {
        let n = self.cfg.n_slots();
        ((t / self.cfg.slot_length).floor().max(0.0) as usize).min(n - 1)
    }

    pub fn is_idle(&self, device: usize, t: Timestamp) -> bool {
        self.devices[device].trace.schedule[self.slot_at(t)]
    }

    pub fn sample_snapshot(&self, device: usize, at: Timestamp) -> ResourceSnapshot {
        sample_snapshot(
            self.cfg.seed,
            device,
            &self.devices[device].id,
            self.cfg.profile_of(device),
            self.is_idle(device, at),
            at,
        )
    }

    /// Records `device` holds about `subject` newer than `since`.
    pub fn respond_history(
        &self,
        device: usize,
        subject: &DeviceId,
        since: Timestamp,
    ) -> Vec<PerformanceRecord> {
        self.devices[device].store.query(subject, since)
    }

    /// Append the owner's observation of an execution by `subject`.
    pub fn record_outcome(
        &mut self,
        owner: usize,
        subject: usize,
        result: ExecutionResult,
        at: Timestamp,
    ) -> PerformanceRecord {
        let record = PerformanceRecord {
            observer: self.devices[owner].id.clone(),
            subject: self.devices[subject].id.clone(),
            time: at,
            response_time: result.response_time,
            exec_speed: result.exec_speed,
            accuracy: result.accuracy,
            feedback: result.feedback,
        };
        self.devices[owner].store.append(record.clone());
        record
    }

    /// Schedule delivery of `env` from `from` to every other device.
    pub fn broadcast(&mut self, from: usize, env: Envelope, at: Timestamp) -> Vec<Delivery> {
        let to: Vec<usize> = (0..self.devices.len()).filter(|&d| d != from).collect();
        self.send(from, &to, env, at)
    }

    fn send(&mut self, from: usize, to: &[usize], env: Envelope, at: Timestamp) -> Vec<Delivery> {
        let time = at + self.cfg.link_latency;
        let mut out = Vec::with_capacity(to.len());
        for &d in to {
            out.push(Delivery {
                to: self.devices[d].id.clone(),
                time,
                responds: self.is_idle(d, time),
            });
            self.push(
                time,
                EventKind::Deliver {
                    from,
                    to: d,
                    env: env.clone(),
                },
            );
        }
        out
    }

    fn cluster_peers(&self, device: usize) -> Vec<DeviceId> {
        let k = self.cfg.cluster_count;
        (0..self.devices.len())
            .filter(|&d| d != device && d % k == device % k)
            .map(|d| self.devices[d].id.clone())
            .collect()
    }

    fn collect_delay(&self) -> f64 {
        2.0 * self.cfg.link_latency + self.cfg.collect_window
    }

    pub fn run(mut self) -> Result<SimOutcome, SimError> {
        for i in 0..self.devices.len() {
            let (device, graph) = (
                self.devices[i].id.clone(),
                self.devices[i].agents.graph().clone(),
            );
            self.trace.push(
                0.0,
                TraceEvent::Snapshot {
                    device,
                    label: "initial".into(),
                    graph,
                },
            );
        }
        let mut last = f64::NEG_INFINITY;
        while let Some(Queued { time, kind, .. }) = self.queue.pop() {
            if time < last {
                return Err(SimError::Runtime(format!(
                    "event time went backwards: {time} < {last}"
                )));
            }
            last = time;
            match kind {
                EventKind::SlotTick { slot } => self.on_slot(slot, time)?,
                EventKind::TaskArrive { device } => self.on_task(device, time)?,
                EventKind::Deliver { from, to, env } => self.on_deliver(from, to, env, time),
                EventKind::CollectHistory { device } => self.on_collect_history(device, time),
                EventKind::CollectResource { device, task } => {
                    self.on_collect_resource(device, task, time)?
                }
            }
        }
        let end = last.max(self.cfg.horizon);
        for i in 0..self.devices.len() {
            let (device, graph) = (
                self.devices[i].id.clone(),
                self.devices[i].agents.graph().clone(),
            );
            self.trace.push(
                end,
                TraceEvent::Snapshot {
                    device,
                    label: "final".into(),
                    graph,
                },
            );
        }
        Ok(SimOutcome {
            trace: self.trace,
            devices: self.devices,
        })
    }

    fn verdict(&self, device: usize, slot: usize) -> Result<IdleVerdict, PipelineError> {
        let tr = &self.devices[device].trace;
        match self.policy {
            Policy::StatisticalIdle => {
                let last = *tr.samples[slot].last().ok_or(PipelineError::NoSamples)?;
                Ok(IdleVerdict {
                    idle: last < self.pipeline.tau_now,
                    mean_recent_util: last,
                    pattern_util: tr.profile[slot],
                })
            }
            _ => perceive_state(&tr.samples[slot], &tr.profile, slot, &self.pipeline),
        }
    }

    fn on_slot(&mut self, slot: usize, now: Timestamp) -> Result<(), SimError> {
        for d in 0..self.devices.len() {
            let verdict = self.verdict(d, slot)?;
            let id = self.devices[d].id.clone();
            let mut started = None;
            if verdict.idle && !self.devices[d].agents.history_pending() {
                let begun = match self.policy {
                    Policy::EvaluateAllCluster => {
                        let peers = self.cluster_peers(d);
                        self.devices[d]
                            .agents
                            .begin_historical_cycle_for(&verdict, peers, now)?
                    }
                    _ => self.devices[d]
                        .agents
                        .begin_historical_cycle(&verdict, now)?,
                };
                started = Some(begun);
            }
            self.trace.push(
                now,
                TraceEvent::SlotObserved {
                    device: id.clone(),
                    slot,
                    truly_idle: self.devices[d].trace.schedule[slot],
                    verdict_idle: verdict.idle,
                    cycle_started: started.is_some(),
                },
            );
            match started {
                None => {}
                Some(HistoricalStart::NoneDue) => self.trace.push(
                    now,
                    TraceEvent::HistoricalStarted {
                        device: id,
                        slot,
                        subjects: Vec::new(),
                    },
                ),
                Some(HistoricalStart::Queries(queries)) => {
                    let subjects = queries
                        .iter()
                        .filter_map(|q| match &q.payload {
                            Payload::HisQuery { device, .. } => Some(device.clone()),
                            _ => None,
                        })
                        .collect();
                    self.trace.push(
                        now,
                        TraceEvent::HistoricalStarted {
                            device: id,
                            slot,
                            subjects,
                        },
                    );
                    for q in queries {
                        self.broadcast(d, q, now);
                    }
                    let at = now + self.collect_delay();
                    self.push(at, EventKind::CollectHistory { device: d });
                }
            }
        }
        Ok(())
    }

    fn on_task(&mut self, device: usize, now: Timestamp) -> Result<(), SimError> {
        let seq = self.devices[device].tasks_issued;
        self.devices[device].tasks_issued += 1;
        let id = self.devices[device].id.clone();
        let task = self
            .cfg
            .task
            .instantiate(TaskId::new(format!("{id}-t{seq:04}")))
            .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
        self.trace.push(
            now,
            TraceEvent::TaskArrived {
                device: id.clone(),
                task: task.clone(),
            },
        );
        match self.policy {
            Policy::RandomTrustedPick => {
                let trusted = self.devices[device].agents.graph().trusted();
                if trusted.is_empty() {
                    self.trace.push(
                        now,
                        TraceEvent::TaskDropped {
                            device: id,
                            task_id: task.task_id,
                        },
                    );
                    return Ok(());
                }
                let mut r = rng::stream(self.cfg.seed, "pick", device as u64, seq);
                let pick = trusted[r.random_range(0..trusted.len())].clone();
                let p = self.index[&pick];
                let snap = self.sample_snapshot(p, now);
                self.trace.push(
                    now,
                    TraceEvent::ResourceCycle {
                        device: id,
                        task: task.clone(),
                        queried: Vec::new(),
                        snapshots: Vec::new(),
                        matched: Vec::new(),
                        selected: vec![pick],
                        selected_snapshots: vec![snap],
                    },
                );
                self.execute(device, p, &task, seq, now);
            }
            _ => {
                let start = match self.policy {
                    Policy::EvaluateAllCluster => {
                        let peers = self.cluster_peers(device);
                        self.devices[device].agents.begin_resource_cycle_with(
                            task.clone(),
                            peers,
                            now,
                        )?
                    }
                    _ => self.devices[device]
                        .agents
                        .begin_resource_cycle(task.clone(), now)?,
                };
                let to: Vec<usize> = start.recipients.iter().map(|r| self.index[r]).collect();
                self.send(device, &to, start.query, now);
                let at = now + self.collect_delay();
                self.push(at, EventKind::CollectResource { device, task });
            }
        }
        Ok(())
    }

    fn on_deliver(&mut self, from: usize, to: usize, env: Envelope, now: Timestamp) {
        self.trace.push(
            now,
            TraceEvent::Delivered {
                from: self.devices[from].id.clone(),
                to: self.devices[to].id.clone(),
                topic: env.topic(),
                sent_at: env.time,
            },
        );
        match &env.payload {
            Payload::HisQuery { device, since } => {
                // busy devices keep their CPU for their own work
                if !self.is_idle(to, now) {
                    return;
                }
                let records = self.respond_history(to, device, *since);
                if records.is_empty() {
                    return;
                }
                let reply = Envelope::new(
                    self.devices[to].id.as_str(),
                    now,
                    Payload::HisReply {
                        device: device.clone(),
                        records,
                    },
                );
                self.send(to, &[from], reply, now);
            }
            Payload::ResQuery { task_id, .. } => {
                let reply = Envelope::new(
                    self.devices[to].id.as_str(),
                    now,
                    Payload::ResReply {
                        task_id: task_id.clone(),
                        snapshot: self.sample_snapshot(to, now),
                    },
                );
                self.send(to, &[from], reply, now);
            }
            Payload::HisReply { .. } | Payload::ResReply { .. } => {
                self.devices[to].agents.accept_reply(env);
            }
            _ => {}
        }
    }

    fn on_collect_history(&mut self, device: usize, now: Timestamp) {
        let dev = &mut self.devices[device];
        let outcome =
            dev.agents
                .complete_historical_cycle(dev.store.records(), now, self.inference.as_ref());
        let id = dev.id.clone();
        match outcome {
            Ok(CycleOutcome::Completed(evaluations)) => {
                self.trace.push(
                    now,
                    TraceEvent::HistoricalCompleted {
                        device: id,
                        evaluations,
                    },
                );
            }
            Ok(CycleOutcome::NoneDue) => {}
            Err(e) => {
                dev.agents.abort_historical_cycle();
                self.trace.push(
                    now,
                    TraceEvent::CycleFailed {
                        device: id,
                        error: e.to_string(),
                    },
                );
            }
        }
    }

    fn on_collect_resource(
        &mut self,
        device: usize,
        task: TaskSpec,
        now: Timestamp,
    ) -> Result<(), SimError> {
        let out = self.devices[device].agents.complete_resource_cycle(
            &task.task_id,
            now,
            self.inference.as_ref(),
        )?;
        let selected: Vec<DeviceId> = match &out.task_graph {
            Some(g) => g.edge.iter().cloned().collect(),
            None => out.matched.iter().cloned().collect(),
        };
        let selected_snapshots: Vec<ResourceSnapshot> = out
            .snapshots
            .iter()
            .filter(|s| selected.contains(&s.subject))
            .cloned()
            .collect();
        let executor = selected_snapshots
            .iter()
            .map(|s| {
                let v = check_resource_match(&task, s, &self.eval);
                (v.t_comm + v.t_comp, s.subject.clone())
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
            .map(|(_, d)| d);
        let id = self.devices[device].id.clone();
        self.trace.push(
            now,
            TraceEvent::ResourceCycle {
                device: id.clone(),
                task: task.clone(),
                queried: out.queried,
                snapshots: out.snapshots,
                matched: out.matched.into_iter().collect(),
                selected,
                selected_snapshots,
            },
        );
        let seq = task_seq(&task.task_id);
        match executor {
            Some(e) => {
                let e = self.index[&e];
                self.execute(device, e, &task, seq, now);
            }
            None => self.trace.push(
                now,
                TraceEvent::TaskDropped {
                    device: id,
                    task_id: task.task_id,
                },
            ),
        }
        Ok(())
    }

    fn execute(
        &mut self,
        owner: usize,
        executor: usize,
        task: &TaskSpec,
        seq: u64,
        now: Timestamp,
    ) {
        let mut r = rng::stream(self.cfg.seed, "outcome", owner as u64, seq);
        let result = draw_execution(&mut r, &self.cfg.quality, self.devices[executor].class, now);
        let record = self.record_outcome(owner, executor, result, now);
        self.trace.push(
            now,
            TraceEvent::TaskExecuted {
                device: self.devices[owner].id.clone(),
                task_id: task.task_id.clone(),
                executor: self.devices[executor].id.clone(),
                record,
            },
        );
    }
}

fn task_seq(id: &TaskId) -> u64 {
    id.0.rsplit("-t")
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

/// Build and run a simulation with the rule engine.
pub fn run(
    cfg: SimConfig,
    eval: EvalConfig,
    pipeline: PipelineConfig,
    policy: Policy,
) -> Result<SimOutcome, SimError> {
    Simulator::new(cfg, eval, pipeline, policy)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(policy: Policy) -> SimOutcome {
        let cfg = SimConfig {
            n_devices: 5,
            horizon: 600.0,
            ..SimConfig::default()
        };
        run(
            cfg,
            EvalConfig::default(),
            PipelineConfig::default(),
            policy,
        )
        .unwrap()
    }

    #[test]
    fn queue_orders_by_time_then_seq() {
        let mut h = BinaryHeap::new();
        for (seq, t) in [(0, 2.0), (1, 1.0), (2, 1.0), (3, 0.5)] {
            h.push(Queued {
                time: t,
                seq,
                kind: EventKind::SlotTick { slot: 0 },
            });
        }
        let order: Vec<u64> = std::iter::from_fn(|| h.pop().map(|q| q.seq)).collect();
        assert_eq!(order, vec![3, 1, 2, 0]);
    }

    #[test]
    fn run_is_deterministic() {
        for p in Policy::ALL {
            assert_eq!(small(p).trace.to_jsonl(), small(p).trace.to_jsonl());
        }
    }

    #[test]
    fn event_times_are_monotone() {
        let out = small(Policy::SemanticChain);
        assert!(out.trace.events.windows(2).all(|w| w[0].time <= w[1].time));
        for d in &out.devices {
            d.agents.graph().check_invariants().unwrap();
            d.agents.bus().audit().unwrap();
            assert!(d.store.records().windows(2).all(|w| w[0].time <= w[1].time));
        }
    }

    #[test]
    fn broadcast_marks_busy_recipients() {
        let cfg = SimConfig {
            n_devices: 5,
            horizon: 60.0,
            trace_model: TraceModel {
                fixed_schedules: Some(vec![
                    vec![true, true],
                    vec![false, false],
                    vec![true, true],
                    vec![false, false],
                    vec![true, true],
                ]),
                ..TraceModel::default()
            },
            ..SimConfig::default()
        };
        let mut sim = Simulator::new(
            cfg,
            EvalConfig::default(),
            PipelineConfig::default(),
            Policy::SemanticChain,
        )
        .unwrap();
        let me = sim.devices()[0].id.clone();
        let q = crate::pipeline::build_history_query(&me, &sim.devices()[2].id.clone(), 0.0, 1.0);
        let deliveries = sim.broadcast(0, q, 1.0);
        assert_eq!(deliveries.len(), 4);
        assert_eq!(deliveries.iter().filter(|d| d.responds).count(), 2);
        assert!(deliveries.iter().all(|d| (d.time - 1.05).abs() < 1e-12));
    }

    #[test]
    fn task_ids_parse_back() {
        assert_eq!(task_seq(&TaskId::new("d03-t0012")), 12);
    }
}
