//! Structured envelopes and the per-device subscription bus.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{IdleVerdict, PipelineError};
use crate::hypergraph::{DeviceId, TaskId, Timestamp, TrustAnnotation};
use crate::semantics::{PerformanceRecord, ResourceSnapshot, TaskSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    StatePerceiver,
    TrustManager,
    HistoricalDataCollector,
    HistoricalTrustEvaluator,
    ResourceDataCollector,
    ResourceTrustEvaluator,
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AgentRole::StatePerceiver => "sp",
            AgentRole::TrustManager => "tm",
            AgentRole::HistoricalDataCollector => "hdc",
            AgentRole::HistoricalTrustEvaluator => "hte",
            AgentRole::ResourceDataCollector => "rde",
            AgentRole::ResourceTrustEvaluator => "rte",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topic {
    SpIdle,
    TmSelect,
    HdcHistory,
    HteVerdict,
    TmTaskSelect,
    RdeResources,
    RteMatched,
    HisQuery,
    HisReply,
    ResQuery,
    ResReply,
}

impl Topic {
    /// Whether the topic travels between devices rather than between agents.
    pub fn is_external(self) -> bool {
        matches!(
            self,
            Topic::HisQuery | Topic::HisReply | Topic::ResQuery | Topic::ResReply
        )
    }

    /// The agent allowed to publish an internal topic.
    pub fn producer(self) -> Option<AgentRole> {
        match self {
            Topic::SpIdle => Some(AgentRole::StatePerceiver),
            Topic::TmSelect | Topic::TmTaskSelect => Some(AgentRole::TrustManager),
            Topic::HdcHistory => Some(AgentRole::HistoricalDataCollector),
            Topic::HteVerdict => Some(AgentRole::HistoricalTrustEvaluator),
            Topic::RdeResources => Some(AgentRole::ResourceDataCollector),
            Topic::RteMatched => Some(AgentRole::ResourceTrustEvaluator),
            _ => None,
        }
    }
}

/// Topic-specific message body. The topic is the serde tag, so a payload can
/// never disagree with its topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "topic", content = "payload", rename_all = "snake_case")]
pub enum Payload {
    SpIdle(IdleVerdict),
    TmSelect {
        device: DeviceId,
        /// last evaluation time of the selected device
        time: Timestamp,
    },
    HdcHistory {
        device: DeviceId,
        records: Vec<PerformanceRecord>,
    },
    HteVerdict(TrustAnnotation),
    TmTaskSelect {
        task: TaskSpec,
        collaborators: Vec<DeviceId>,
    },
    RdeResources {
        task: TaskSpec,
        snapshots: Vec<ResourceSnapshot>,
    },
    RteMatched {
        task_id: TaskId,
        matched: Vec<DeviceId>,
    },
    HisQuery {
        device: DeviceId,
        since: Timestamp,
    },
    HisReply {
        device: DeviceId,
        records: Vec<PerformanceRecord>,
    },
    ResQuery {
        task_id: TaskId,
        fields: Vec<String>,
    },
    ResReply {
        task_id: TaskId,
        snapshot: ResourceSnapshot,
    },
}

impl Payload {
    pub fn topic(&self) -> Topic {
        match self {
            Payload::SpIdle(_) => Topic::SpIdle,
            Payload::TmSelect { .. } => Topic::TmSelect,
            Payload::HdcHistory { .. } => Topic::HdcHistory,
            Payload::HteVerdict(_) => Topic::HteVerdict,
            Payload::TmTaskSelect { .. } => Topic::TmTaskSelect,
            Payload::RdeResources { .. } => Topic::RdeResources,
            Payload::RteMatched { .. } => Topic::RteMatched,
            Payload::HisQuery { .. } => Topic::HisQuery,
            Payload::HisReply { .. } => Topic::HisReply,
            Payload::ResQuery { .. } => Topic::ResQuery,
            Payload::ResReply { .. } => Topic::ResReply,
        }
    }
}

/// Resource fields requested by a resource inquiry.
pub const RESOURCE_FIELDS: [&str; 7] = [
    "idle",
    "available_time",
    "cpu_freq",
    "cpu_fraction",
    "storage",
    "bandwidth",
    "stability",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub sender: String,
    pub time: Timestamp,
    #[serde(flatten)]
    pub payload: Payload,
}

impl Envelope {
    pub fn new(sender: impl Into<String>, time: Timestamp, payload: Payload) -> Self {
        Self {
            sender: sender.into(),
            time,
            payload,
        }
    }

    pub fn topic(&self) -> Topic {
        self.payload.topic()
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }

    pub fn decode(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Decode(e.to_string()))
    }
}

/// Fixed topic → subscriber wiring of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubscriptionTable {
    routes: BTreeMap<Topic, Vec<AgentRole>>,
}

impl SubscriptionTable {
    pub fn standard() -> Self {
        let routes = BTreeMap::from([
            (Topic::SpIdle, vec![AgentRole::TrustManager]),
            (Topic::TmSelect, vec![AgentRole::HistoricalDataCollector]),
            (Topic::HdcHistory, vec![AgentRole::HistoricalTrustEvaluator]),
            (Topic::HteVerdict, vec![AgentRole::TrustManager]),
            (Topic::TmTaskSelect, vec![AgentRole::ResourceDataCollector]),
            (Topic::RdeResources, vec![AgentRole::ResourceTrustEvaluator]),
        ]);
        Self { routes }
    }

    pub fn subscribers(&self, topic: Topic) -> &[AgentRole] {
        self.routes.get(&topic).map(Vec::as_slice).unwrap_or(&[])
    }

    /// All `(producer, topic, subscriber)` flows the wiring permits.
    pub fn flows(&self) -> BTreeSet<(AgentRole, Topic, AgentRole)> {
        self.routes
            .iter()
            .flat_map(|(topic, subs)| {
                let producer = topic.producer().expect("routed topics are internal");
                subs.iter().map(move |s| (producer, *topic, *s))
            })
            .collect()
    }
}

impl Default for SubscriptionTable {
    fn default() -> Self {
        Self::standard()
    }
}

/// One internal publication and who it was delivered to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusEntry {
    pub publisher: AgentRole,
    pub delivered_to: Vec<AgentRole>,
    pub envelope: Envelope,
}

/// Where an external envelope was sent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipients {
    Broadcast,
    To(Vec<DeviceId>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutboxEntry {
    pub publisher: AgentRole,
    pub recipients: Recipients,
    pub envelope: Envelope,
}

/// Sequential in-device message bus with a full publication log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageBus {
    table: SubscriptionTable,
    log: Vec<BusEntry>,
    outbox: Vec<OutboxEntry>,
    last_time: BTreeMap<String, Timestamp>,
}

impl MessageBus {
    pub fn new(table: SubscriptionTable) -> Self {
        Self {
            table,
            ..Self::default()
        }
    }

    pub fn table(&self) -> &SubscriptionTable {
        &self.table
    }

    pub fn log(&self) -> &[BusEntry] {
        &self.log
    }

    pub fn outbox(&self) -> &[OutboxEntry] {
        &self.outbox
    }

    fn stamp(&mut self, env: &Envelope) -> Result<(), PipelineError> {
        let last = self
            .last_time
            .entry(env.sender.clone())
            .or_insert(f64::NEG_INFINITY);
        if env.time < *last {
            return Err(PipelineError::NonMonotoneTime {
                sender: env.sender.clone(),
                last: *last,
                time: env.time,
            });
        }
        *last = env.time;
        Ok(())
    }

    /// Publish an internal envelope; returns the subscribers in dispatch order.
    pub fn publish(
        &mut self,
        publisher: AgentRole,
        env: Envelope,
    ) -> Result<Vec<AgentRole>, PipelineError> {
        let topic = env.topic();
        if topic.producer() != Some(publisher) {
            return Err(PipelineError::Unroutable {
                role: publisher,
                topic,
            });
        }
        self.stamp(&env)?;
        let delivered_to = self.table.subscribers(topic).to_vec();
        self.log.push(BusEntry {
            publisher,
            delivered_to: delivered_to.clone(),
            envelope: env,
        });
        Ok(delivered_to)
    }

    /// Record an envelope leaving the device.
    pub fn send_external(
        &mut self,
        publisher: AgentRole,
        recipients: Recipients,
        env: Envelope,
    ) -> Result<(), PipelineError> {
        if !env.topic().is_external() {
            return Err(PipelineError::Unroutable {
                role: publisher,
                topic: env.topic(),
            });
        }
        self.stamp(&env)?;
        self.outbox.push(OutboxEntry {
            publisher,
            recipients,
            envelope: env,
        });
        Ok(())
    }

    /// Verify that every logged internal flow is one the wiring permits.
    pub fn audit(&self) -> Result<(), String> {
        let allowed = self.table.flows();
        for entry in &self.log {
            for sub in &entry.delivered_to {
                let flow = (entry.publisher, entry.envelope.topic(), *sub);
                if !allowed.contains(&flow) {
                    return Err(format!("unexpected flow {flow:?}"));
                }
            }
        }
        Ok(())
    }
}
