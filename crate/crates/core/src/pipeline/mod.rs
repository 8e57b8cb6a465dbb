//! The six trust agents of a device and their two workflows.
//!
//! Historical workflow (runs in idle slots): the state perceiver publishes an
//! idle verdict, the trust manager picks who to evaluate, the historical data
//! collector queries peers, the historical trust evaluator infers new trust
//! semantics and the trust manager reassigns the device in its hypergraph.
//!
//! Resource workflow (runs per task): the trust manager extracts the trusted
//! group, the resource data collector queries only those devices, and the
//! resource trust evaluator keeps the ones whose resources fit the task.
//!
//! Both workflows are split into a `begin_*` half that produces the outgoing
//! query and a `complete_*` half that consumes replies, so the simulator can
//! deliver replies through its event queue. [`run_historical_cycle`] and
//! [`run_resource_cycle`] glue the halves together over a [`Transport`].

pub mod bus;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bus::{
    AgentRole, BusEntry, Envelope, MessageBus, OutboxEntry, Payload, Recipients, SubscriptionTable,
    Topic,
};

use crate::hypergraph::{
    DeviceId, HypergraphError, TaskId, TaskTrustHypergraph, Timestamp, TrustAnnotation,
    TrustHypergraph, TrustTrend,
};
use crate::semantics::inference::{HistoryContext, ResourceContext, TrustInference};
use crate::semantics::{
    merge_records, EvalConfig, PerformanceRecord, ResourceSnapshot, SemanticsError, TaskSpec,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("no CPU utilization samples")]
    NoSamples,
    #[error("no historical profile entry for slot {0}")]
    UnknownSlot(usize),
    #[error("historical cycle started without an idle verdict")]
    NotIdle,
    #[error("a historical cycle is already in progress")]
    CycleInProgress,
    #[error("no historical cycle in progress")]
    NoCycle,
    #[error("no resource cycle in progress for task {0}")]
    NoTask(TaskId),
    #[error("reply carries records of {found}, expected {expected}")]
    SubjectMismatch { expected: DeviceId, found: DeviceId },
    #[error("unexpected {0:?} envelope")]
    UnexpectedTopic(Topic),
    #[error("{role} may not publish {topic:?}")]
    Unroutable { role: AgentRole, topic: Topic },
    #[error("sender {sender} went back in time ({time} < {last})")]
    NonMonotoneTime {
        sender: String,
        last: Timestamp,
        time: Timestamp,
    },
    #[error("envelope decode failed: {0}")]
    Decode(String),
    #[error(transparent)]
    Hypergraph(#[from] HypergraphError),
    #[error(transparent)]
    Semantics(#[from] SemanticsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdleVerdict {
    pub idle: bool,
    pub mean_recent_util: f64,
    pub pattern_util: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    pub eval_count: u64,
    pub last_eval: Timestamp,
}

/// Per-collaborator evaluation frequency.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    entries: BTreeMap<DeviceId, EvalEntry>,
}

impl EvalLog {
    pub fn get(&self, device: &DeviceId) -> Option<&EvalEntry> {
        self.entries.get(device)
    }

    pub fn record(&mut self, device: &DeviceId, at: Timestamp) {
        let entry = self.entries.entry(device.clone()).or_insert(EvalEntry {
            eval_count: 0,
            last_eval: at,
        });
        entry.eval_count += 1;
        entry.last_eval = entry.last_eval.max(at);
    }

    pub fn max_count(&self) -> u64 {
        self.entries
            .values()
            .map(|e| e.eval_count)
            .max()
            .unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.entries.values().map(|e| e.eval_count).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&DeviceId, &EvalEntry)> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// idle threshold on the mean of recent samples
    pub tau_now: f64,
    /// idle threshold on the learned per-slot pattern
    pub tau_hist: f64,
    pub w_staleness: f64,
    pub w_trend: f64,
    pub w_frequency: f64,
    /// seconds after which a collaborator counts as fully stale
    pub staleness_cap: f64,
    /// collaborators evaluated per idle slot
    pub batch_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_now: 0.3,
            tau_hist: 0.3,
            w_staleness: 1.0,
            w_trend: 1.0,
            w_frequency: 1.0,
            staleness_cap: 300.0,
            batch_size: 1,
        }
    }
}

/// Idle iff the mean of recent samples and the learned utilization of this
/// slot are both below their thresholds.
pub fn perceive_state(
    samples: &[f64],
    profile: &[f64],
    slot: usize,
    cfg: &PipelineConfig,
) -> Result<IdleVerdict, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::NoSamples);
    }
    let pattern_util = *profile.get(slot).ok_or(PipelineError::UnknownSlot(slot))?;
    let mean_recent_util = samples.iter().sum::<f64>() / samples.len() as f64;
    Ok(IdleVerdict {
        idle: mean_recent_util < cfg.tau_now && pattern_util < cfg.tau_hist,
        mean_recent_util,
        pattern_util,
    })
}

/// Evaluation priority of one member; higher is more urgent.
pub fn evaluation_priority(
    graph: &TrustHypergraph,
    log: &EvalLog,
    member: &DeviceId,
    now: Timestamp,
    cfg: &PipelineConfig,
) -> f64 {
    let (staleness, freq) = match log.get(member) {
        Some(e) => {
            let staleness = ((now - e.last_eval) / cfg.staleness_cap).clamp(0.0, 1.0);
            let max = log.max_count();
            let freq = if max == 0 {
                0.0
            } else {
                e.eval_count as f64 / max as f64
            };
            (staleness, freq)
        }
        None => (1.0, 0.0),
    };
    let declining = graph
        .annotation(member)
        .is_some_and(|a| a.trend == TrustTrend::Declining);
    cfg.w_staleness * staleness + cfg.w_trend * f64::from(u8::from(declining))
        - cfg.w_frequency * freq
}

/// Members ordered by descending priority, ties by ascending id.
pub fn rank_for_evaluation(
    graph: &TrustHypergraph,
    log: &EvalLog,
    now: Timestamp,
    cfg: &PipelineConfig,
) -> Vec<DeviceId> {
    let mut scored: Vec<(f64, DeviceId)> = graph
        .all_members()
        .into_iter()
        .map(|m| (evaluation_priority(graph, log, &m, now, cfg), m))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, m)| m).collect()
}

/// Highest-priority member, or `None` when the hypergraph is empty.
pub fn select_for_evaluation(
    graph: &TrustHypergraph,
    log: &EvalLog,
    now: Timestamp,
    cfg: &PipelineConfig,
) -> Option<DeviceId> {
    rank_for_evaluation(graph, log, now, cfg).into_iter().next()
}

pub fn build_history_query(
    sender: &DeviceId,
    subject: &DeviceId,
    since: Timestamp,
    now: Timestamp,
) -> Envelope {
    Envelope::new(
        sender.as_str(),
        now,
        Payload::HisQuery {
            device: subject.clone(),
            since,
        },
    )
}

/// Merge history replies about `subject` into one deduplicated, time-sorted list.
pub fn aggregate_history_responses(
    subject: &DeviceId,
    replies: &[Envelope],
) -> Result<Vec<PerformanceRecord>, PipelineError> {
    let mut batches = Vec::with_capacity(replies.len());
    for reply in replies {
        let Payload::HisReply { records, .. } = &reply.payload else {
            return Err(PipelineError::UnexpectedTopic(reply.topic()));
        };
        if let Some(r) = records.iter().find(|r| &r.subject != subject) {
            return Err(PipelineError::SubjectMismatch {
                expected: subject.clone(),
                found: r.subject.clone(),
            });
        }
        batches.push(records.as_slice());
    }
    Ok(merge_records(batches))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum EvaluationResult {
    Reassigned { annotation: TrustAnnotation },
    NoData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub subject: DeviceId,
    #[serde(flatten)]
    pub result: EvaluationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleOutcome {
    NoneDue,
    Completed(Vec<Evaluation>),
}

impl CycleOutcome {
    /// Devices evaluated in this cycle, in evaluation order.
    pub fn subjects(&self) -> Vec<DeviceId> {
        match self {
            CycleOutcome::NoneDue => Vec::new(),
            CycleOutcome::Completed(evals) => evals.iter().map(|e| e.subject.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HistoricalStart {
    NoneDue,
    Queries(Vec<Envelope>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResourceStart {
    pub recipients: Vec<DeviceId>,
    pub query: Envelope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceOutcome {
    pub task_id: TaskId,
    pub queried: Vec<DeviceId>,
    pub snapshots: Vec<ResourceSnapshot>,
    pub matched: BTreeSet<DeviceId>,
    /// present when candidates were drawn from the trusted group
    pub task_graph: Option<TaskTrustHypergraph>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PendingHistory {
    subjects: Vec<(DeviceId, Timestamp)>,
    replies: BTreeMap<DeviceId, Vec<Envelope>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PendingTask {
    task: TaskSpec,
    recipients: Vec<DeviceId>,
    from_trusted: bool,
    replies: Vec<ResourceSnapshot>,
}

/// The agent group of one device together with the state they share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustAgents {
    id: DeviceId,
    graph: TrustHypergraph,
    log: EvalLog,
    bus: MessageBus,
    cfg: PipelineConfig,
    eval: EvalConfig,
    pending_history: Option<PendingHistory>,
    pending_tasks: BTreeMap<TaskId, PendingTask>,
}

impl TrustAgents {
    pub fn new(graph: TrustHypergraph, cfg: PipelineConfig, eval: EvalConfig) -> Self {
        Self {
            id: graph.owner().clone(),
            graph,
            log: EvalLog::default(),
            bus: MessageBus::new(SubscriptionTable::standard()),
            cfg,
            eval,
            pending_history: None,
            pending_tasks: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &DeviceId {
        &self.id
    }

    pub fn graph(&self) -> &TrustHypergraph {
        &self.graph
    }

    pub fn eval_log(&self) -> &EvalLog {
        &self.log
    }

    pub fn bus(&self) -> &MessageBus {
        &self.bus
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn eval_config(&self) -> &EvalConfig {
        &self.eval
    }

    pub fn history_pending(&self) -> bool {
        self.pending_history.is_some()
    }

    fn agent(&self, role: AgentRole) -> String {
        format!("{}/{}", self.id, role)
    }

    fn unroutable(role: AgentRole, topic: Topic) -> PipelineError {
        PipelineError::Unroutable { role, topic }
    }

    /// Start a historical cycle, letting the trust manager pick the subjects.
    pub fn begin_historical_cycle(
        &mut self,
        verdict: &IdleVerdict,
        now: Timestamp,
    ) -> Result<HistoricalStart, PipelineError> {
        self.begin_historical(verdict, now, None)
    }

    /// Start a historical cycle for an externally chosen subject list.
    pub fn begin_historical_cycle_for(
        &mut self,
        verdict: &IdleVerdict,
        subjects: Vec<DeviceId>,
        now: Timestamp,
    ) -> Result<HistoricalStart, PipelineError> {
        self.begin_historical(verdict, now, Some(subjects))
    }

    fn begin_historical(
        &mut self,
        verdict: &IdleVerdict,
        now: Timestamp,
        forced: Option<Vec<DeviceId>>,
    ) -> Result<HistoricalStart, PipelineError> {
        if !verdict.idle {
            return Err(PipelineError::NotIdle);
        }
        if self.pending_history.is_some() {
            return Err(PipelineError::CycleInProgress);
        }
        let idle = Envelope::new(
            self.agent(AgentRole::StatePerceiver),
            now,
            Payload::SpIdle(verdict.clone()),
        );
        let mut queries = Vec::new();
        let mut subjects = Vec::new();
        for role in self.bus.publish(AgentRole::StatePerceiver, idle)? {
            if role != AgentRole::TrustManager {
                return Err(Self::unroutable(role, Topic::SpIdle));
            }
            let chosen = match &forced {
                Some(list) => list
                    .iter()
                    .filter(|d| self.graph.contains(d))
                    .cloned()
                    .collect(),
                None => {
                    let mut ranked = rank_for_evaluation(&self.graph, &self.log, now, &self.cfg);
                    ranked.truncate(self.cfg.batch_size.max(1));
                    ranked
                }
            };
            for subject in chosen {
                let since = self.graph.annotation(&subject).map_or(0.0, |a| a.eval_time);
                let select = Envelope::new(
                    self.agent(AgentRole::TrustManager),
                    now,
                    Payload::TmSelect {
                        device: subject.clone(),
                        time: since,
                    },
                );
                for role in self.bus.publish(AgentRole::TrustManager, select)? {
                    if role != AgentRole::HistoricalDataCollector {
                        return Err(Self::unroutable(role, Topic::TmSelect));
                    }
                    let query = build_history_query(&self.id, &subject, since, now);
                    self.bus.send_external(
                        AgentRole::HistoricalDataCollector,
                        Recipients::Broadcast,
                        query.clone(),
                    )?;
                    queries.push(query);
                }
                subjects.push((subject, since));
            }
        }
        if subjects.is_empty() {
            return Ok(HistoricalStart::NoneDue);
        }
        self.pending_history = Some(PendingHistory {
            subjects,
            replies: BTreeMap::new(),
        });
        Ok(HistoricalStart::Queries(queries))
    }

    /// Hand a peer's reply to the collector agents. Returns whether it was
    /// accepted by a cycle in progress.
    pub fn accept_reply(&mut self, reply: Envelope) -> bool {
        match &reply.payload {
            Payload::HisReply { device, .. } => match &mut self.pending_history {
                Some(p) if p.subjects.iter().any(|(s, _)| s == device) => {
                    p.replies.entry(device.clone()).or_default().push(reply);
                    true
                }
                _ => false,
            },
            Payload::ResReply { task_id, snapshot } => match self.pending_tasks.get_mut(task_id) {
                Some(p)
                    if p.recipients.contains(&snapshot.subject)
                        && !p.replies.iter().any(|s| s.subject == snapshot.subject) =>
                {
                    p.replies.push(snapshot.clone());
                    true
                }
                _ => false,
            },
            _ => false,
        }
    }

    /// Finish the historical cycle: aggregate, infer and reassign. On error
    /// the hypergraph and evaluation log are left untouched.
    pub fn complete_historical_cycle(
        &mut self,
        local_store: &[PerformanceRecord],
        now: Timestamp,
        inference: &dyn TrustInference,
    ) -> Result<CycleOutcome, PipelineError> {
        let pending = self.pending_history.take().ok_or(PipelineError::NoCycle)?;
        let mut graph = self.graph.clone();
        let mut log = self.log.clone();
        let mut evaluations = Vec::with_capacity(pending.subjects.len());

        for (subject, _since) in &pending.subjects {
            let replies = pending
                .replies
                .get(subject)
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            let received = aggregate_history_responses(subject, replies)?;
            let history = Envelope::new(
                self.agent(AgentRole::HistoricalDataCollector),
                now,
                Payload::HdcHistory {
                    device: subject.clone(),
                    records: received.clone(),
                },
            );
            for role in self
                .bus
                .publish(AgentRole::HistoricalDataCollector, history)?
            {
                if role != AgentRole::HistoricalTrustEvaluator {
                    return Err(Self::unroutable(role, Topic::HdcHistory));
                }
                let local: Vec<PerformanceRecord> = local_store
                    .iter()
                    .filter(|r| &r.subject == subject)
                    .cloned()
                    .collect();
                log.record(subject, now);
                if local.is_empty() && received.is_empty() {
                    evaluations.push(Evaluation {
                        subject: subject.clone(),
                        result: EvaluationResult::NoData,
                    });
                    continue;
                }
                let ctx = HistoryContext {
                    subject: subject.clone(),
                    local,
                    received: received.clone(),
                    now,
                };
                let annotation = inference.infer_history(&ctx, &self.eval)?;
                let verdict = Envelope::new(
                    self.agent(AgentRole::HistoricalTrustEvaluator),
                    now,
                    Payload::HteVerdict(annotation.clone()),
                );
                for role in self
                    .bus
                    .publish(AgentRole::HistoricalTrustEvaluator, verdict)?
                {
                    if role != AgentRole::TrustManager {
                        return Err(Self::unroutable(role, Topic::HteVerdict));
                    }
                    graph.reassign(annotation.clone())?;
                }
                evaluations.push(Evaluation {
                    subject: subject.clone(),
                    result: EvaluationResult::Reassigned { annotation },
                });
            }
        }

        self.graph = graph;
        self.log = log;
        Ok(CycleOutcome::Completed(evaluations))
    }

    /// Abandon the historical cycle in progress, if any.
    pub fn abort_historical_cycle(&mut self) {
        self.pending_history = None;
    }

    /// Start a resource cycle over the current trusted group.
    pub fn begin_resource_cycle(
        &mut self,
        task: TaskSpec,
        now: Timestamp,
    ) -> Result<ResourceStart, PipelineError> {
        let trusted = self.graph.trusted();
        self.begin_resource(task, trusted, true, now)
    }

    /// Start a resource cycle over an explicit candidate list.
    pub fn begin_resource_cycle_with(
        &mut self,
        task: TaskSpec,
        candidates: Vec<DeviceId>,
        now: Timestamp,
    ) -> Result<ResourceStart, PipelineError> {
        self.begin_resource(task, candidates, false, now)
    }

    fn begin_resource(
        &mut self,
        task: TaskSpec,
        candidates: Vec<DeviceId>,
        from_trusted: bool,
        now: Timestamp,
    ) -> Result<ResourceStart, PipelineError> {
        task.validate()?;
        let select = Envelope::new(
            self.agent(AgentRole::TrustManager),
            now,
            Payload::TmTaskSelect {
                task: task.clone(),
                collaborators: candidates.clone(),
            },
        );
        let mut start = None;
        for role in self.bus.publish(AgentRole::TrustManager, select)? {
            if role != AgentRole::ResourceDataCollector {
                return Err(Self::unroutable(role, Topic::TmTaskSelect));
            }
            let query = Envelope::new(
                self.id.as_str(),
                now,
                Payload::ResQuery {
                    task_id: task.task_id.clone(),
                    fields: bus::RESOURCE_FIELDS.iter().map(|s| s.to_string()).collect(),
                },
            );
            self.bus.send_external(
                AgentRole::ResourceDataCollector,
                Recipients::To(candidates.clone()),
                query.clone(),
            )?;
            start = Some(ResourceStart {
                recipients: candidates.clone(),
                query,
            });
        }
        let start = start.ok_or(Self::unroutable(
            AgentRole::TrustManager,
            Topic::TmTaskSelect,
        ))?;
        self.pending_tasks.insert(
            task.task_id.clone(),
            PendingTask {
                task,
                recipients: candidates,
                from_trusted,
                replies: Vec::new(),
            },
        );
        Ok(start)
    }

    /// Finish a resource cycle. Devices that never replied are unmatched.
    pub fn complete_resource_cycle(
        &mut self,
        task_id: &TaskId,
        now: Timestamp,
        inference: &dyn TrustInference,
    ) -> Result<ResourceOutcome, PipelineError> {
        let pending = self
            .pending_tasks
            .remove(task_id)
            .ok_or_else(|| PipelineError::NoTask(task_id.clone()))?;
        let mut snapshots = pending.replies;
        snapshots.sort_by(|a, b| a.subject.cmp(&b.subject));
        let organized = Envelope::new(
            self.agent(AgentRole::ResourceDataCollector),
            now,
            Payload::RdeResources {
                task: pending.task.clone(),
                snapshots: snapshots.clone(),
            },
        );
        let mut matched = BTreeSet::new();
        for role in self
            .bus
            .publish(AgentRole::ResourceDataCollector, organized)?
        {
            if role != AgentRole::ResourceTrustEvaluator {
                return Err(Self::unroutable(role, Topic::RdeResources));
            }
            let ctx = ResourceContext {
                task: pending.task.clone(),
                snapshots: snapshots.clone(),
            };
            matched = inference.infer_matches(&ctx, &self.eval);
            let out = Envelope::new(
                self.agent(AgentRole::ResourceTrustEvaluator),
                now,
                Payload::RteMatched {
                    task_id: task_id.clone(),
                    matched: matched.iter().cloned().collect(),
                },
            );
            self.bus.publish(AgentRole::ResourceTrustEvaluator, out)?;
        }
        let task_graph = if pending.from_trusted {
            // a collaborator demoted while replies were in flight drops out
            let trusted: BTreeSet<DeviceId> = self.graph.trusted().into_iter().collect();
            let still_trusted: Vec<DeviceId> = matched.intersection(&trusted).cloned().collect();
            Some(TaskTrustHypergraph::build(
                self.id.clone(),
                task_id.clone(),
                still_trusted,
                &self.graph,
            )?)
        } else {
            None
        };
        Ok(ResourceOutcome {
            task_id: task_id.clone(),
            queried: pending.recipients,
            snapshots,
            matched,
            task_graph,
        })
    }
}

/// Synchronous request/reply access to peer devices.
pub trait Transport {
    /// Broadcast a history query; returns the replies that came back.
    fn broadcast(&mut self, from: &DeviceId, query: &Envelope) -> Vec<Envelope>;

    /// Send a resource query to `to`; returns the replies that came back.
    fn request(&mut self, from: &DeviceId, to: &[DeviceId], query: &Envelope) -> Vec<Envelope>;
}

/// Run one full historical cycle (steps 2 to 5) after an idle verdict.
pub fn run_historical_cycle(
    agents: &mut TrustAgents,
    verdict: &IdleVerdict,
    local_store: &[PerformanceRecord],
    now: Timestamp,
    net: &mut dyn Transport,
    inference: &dyn TrustInference,
) -> Result<CycleOutcome, PipelineError> {
    let queries = match agents.begin_historical_cycle(verdict, now)? {
        HistoricalStart::NoneDue => return Ok(CycleOutcome::NoneDue),
        HistoricalStart::Queries(q) => q,
    };
    let id = agents.id().clone();
    for query in &queries {
        for reply in net.broadcast(&id, query) {
            agents.accept_reply(reply);
        }
    }
    let outcome = agents.complete_historical_cycle(local_store, now, inference);
    if outcome.is_err() {
        agents.abort_historical_cycle();
    }
    outcome
}

/// Run one full resource cycle for a newly generated task.
pub fn run_resource_cycle(
    agents: &mut TrustAgents,
    task: TaskSpec,
    now: Timestamp,
    net: &mut dyn Transport,
    inference: &dyn TrustInference,
) -> Result<ResourceOutcome, PipelineError> {
    let task_id = task.task_id.clone();
    let start = agents.begin_resource_cycle(task, now)?;
    let id = agents.id().clone();
    for reply in net.request(&id, &start.recipients, &start.query) {
        agents.accept_reply(reply);
    }
    agents.complete_resource_cycle(&task_id, now, inference)
}
