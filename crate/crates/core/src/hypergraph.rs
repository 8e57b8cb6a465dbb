//! Semantic trust hypergraphs.
//!
//! A device keeps a *local* hypergraph that sorts its collaborators into four
//! labeled hyperedges: `trusted`, `untrusted`, and the two subgroups of
//! `trusted` (`trusted_stable`, `trusted_declining`). When a task is generated
//! the device narrows its trusted group down to a single-edge *task* hypergraph
//! of collaborators whose resources fit the task. Task hypergraphs of several
//! devices can be chained into a composite that describes a multi-hop path.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Simulation timestamp in seconds since the simulation epoch.
pub type Timestamp = f64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HypergraphError {
    #[error("device identifier must be non-empty")]
    EmptyId,
    #[error("device {0} cannot be placed in its own hypergraph")]
    SelfPlacement(DeviceId),
    #[error("device {0} is not a member of the hypergraph")]
    UnknownMember(DeviceId),
    #[error("annotation for {subject} at t={new} is older than the stored one at t={stored}")]
    StaleAnnotation {
        subject: DeviceId,
        stored: Timestamp,
        new: Timestamp,
    },
    #[error("label {0} is not present in this hypergraph")]
    UnknownLabel(SemanticLabel),
    #[error("label {0} is part of the fixed partition and cannot be used as an extension")]
    ReservedLabel(String),
    #[error("device {0} is not in the trusted edge")]
    NotTrusted(DeviceId),
    #[error(
        "task hypergraph owner {task_owner} does not match local hypergraph owner {local_owner}"
    )]
    OwnerMismatch {
        task_owner: DeviceId,
        local_owner: DeviceId,
    },
    #[error("a composite hypergraph needs at least one part")]
    EmptyChain,
    #[error("chain broken at part {index}: {next_owner} is not in the edge of {owner}")]
    BrokenChain {
        index: usize,
        owner: DeviceId,
        next_owner: DeviceId,
    },
    #[error("owner {0} appears more than once in the chain")]
    DuplicateOwner(DeviceId),
    #[error("no task hypergraph for source device {0}")]
    MissingGraph(DeviceId),
}

/// Opaque, totally ordered device identifier (for example `"b_j"`).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct DeviceId(String);

impl DeviceId {
    pub fn new(id: impl Into<String>) -> Result<Self, HypergraphError> {
        let id = id.into();
        if id.is_empty() {
            return Err(HypergraphError::EmptyId);
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl<'de> Deserialize<'de> for DeviceId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        DeviceId::new(s).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for DeviceId {
    type Err = HypergraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DeviceId::new(s)
    }
}

/// Task identifier carried by task-specific hyperedges.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub String);

impl TaskId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Semantic label attached to a hyperedge.
///
/// `TrustedStable` and `TrustedDeclining` are subgroups of `Trusted`.
/// `Extension` labels are additive and never take part in the partition.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SemanticLabel {
    Trusted,
    Untrusted,
    TrustedStable,
    TrustedDeclining,
    TaskTrusted(TaskId),
    Extension(String),
}

impl SemanticLabel {
    pub const PARTITION: [SemanticLabel; 4] = [
        SemanticLabel::Trusted,
        SemanticLabel::Untrusted,
        SemanticLabel::TrustedStable,
        SemanticLabel::TrustedDeclining,
    ];
}

impl fmt::Display for SemanticLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SemanticLabel::Trusted => f.write_str("trusted"),
            SemanticLabel::Untrusted => f.write_str("untrusted"),
            SemanticLabel::TrustedStable => f.write_str("trusted_stable"),
            SemanticLabel::TrustedDeclining => f.write_str("trusted_declining"),
            SemanticLabel::TaskTrusted(task) => write!(f, "task_trusted:{task}"),
            SemanticLabel::Extension(name) => write!(f, "ext:{name}"),
        }
    }
}

impl FromStr for SemanticLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trusted" => Ok(SemanticLabel::Trusted),
            "untrusted" => Ok(SemanticLabel::Untrusted),
            "trusted_stable" => Ok(SemanticLabel::TrustedStable),
            "trusted_declining" => Ok(SemanticLabel::TrustedDeclining),
            other => {
                if let Some(task) = other.strip_prefix("task_trusted:") {
                    Ok(SemanticLabel::TaskTrusted(TaskId::new(task)))
                } else if let Some(name) = other.strip_prefix("ext:") {
                    Ok(SemanticLabel::Extension(name.to_string()))
                } else {
                    Err(format!("unknown semantic label `{other}`"))
                }
            }
        }
    }
}

impl Serialize for SemanticLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SemanticLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustStatus {
    Trusted,
    Untrusted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrustTrend {
    Stable,
    Declining,
}

/// Semantic trust verdict for one collaborator.
///
/// The trend only influences placement when the status is `Trusted`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustAnnotation {
    #[serde(rename = "device")]
    pub subject: DeviceId,
    #[serde(rename = "time")]
    pub eval_time: Timestamp,
    pub status: TrustStatus,
    pub trend: TrustTrend,
}

impl TrustAnnotation {
    pub fn new(
        subject: DeviceId,
        eval_time: Timestamp,
        status: TrustStatus,
        trend: TrustTrend,
    ) -> Self {
        Self {
            subject,
            eval_time,
            status,
            trend,
        }
    }

    /// Edges implied by this annotation, in partition order.
    pub fn placement(&self) -> &'static [SemanticLabel] {
        const TRUSTED_STABLE: [SemanticLabel; 2] =
            [SemanticLabel::Trusted, SemanticLabel::TrustedStable];
        const TRUSTED_DECLINING: [SemanticLabel; 2] =
            [SemanticLabel::Trusted, SemanticLabel::TrustedDeclining];
        const UNTRUSTED: [SemanticLabel; 1] = [SemanticLabel::Untrusted];
        match (self.status, self.trend) {
            (TrustStatus::Trusted, TrustTrend::Stable) => &TRUSTED_STABLE,
            (TrustStatus::Trusted, TrustTrend::Declining) => &TRUSTED_DECLINING,
            (TrustStatus::Untrusted, _) => &UNTRUSTED,
        }
    }
}

/// A device's local trust hypergraph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustHypergraph {
    owner: DeviceId,
    edges: BTreeMap<SemanticLabel, BTreeSet<DeviceId>>,
    annotations: BTreeMap<DeviceId, TrustAnnotation>,
}

impl TrustHypergraph {
    /// Fresh local hypergraph with the four partition edges, all empty.
    pub fn init_local(owner: DeviceId) -> Self {
        let edges = SemanticLabel::PARTITION
            .iter()
            .cloned()
            .map(|label| (label, BTreeSet::new()))
            .collect();
        Self {
            owner,
            edges,
            annotations: BTreeMap::new(),
        }
    }

    pub fn owner(&self) -> &DeviceId {
        &self.owner
    }

    pub fn annotation(&self, member: &DeviceId) -> Option<&TrustAnnotation> {
        self.annotations.get(member)
    }

    pub fn annotations(&self) -> impl Iterator<Item = &TrustAnnotation> {
        self.annotations.values()
    }

    pub fn contains(&self, member: &DeviceId) -> bool {
        self.annotations.contains_key(member)
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &SemanticLabel> {
        self.edges.keys()
    }

    /// Place `annotation.subject` according to its status and trend, replacing
    /// any earlier placement of the same subject.
    pub fn place(&mut self, annotation: TrustAnnotation) -> Result<(), HypergraphError> {
        if annotation.subject == self.owner {
            return Err(HypergraphError::SelfPlacement(annotation.subject));
        }
        self.detach(&annotation.subject);
        for label in annotation.placement() {
            self.edges
                .get_mut(label)
                .expect("partition edge always present")
                .insert(annotation.subject.clone());
        }
        self.annotations
            .insert(annotation.subject.clone(), annotation);
        Ok(())
    }

    /// Move an existing member to the edges implied by a newer annotation.
    pub fn reassign(&mut self, annotation: TrustAnnotation) -> Result<(), HypergraphError> {
        let stored = self
            .annotations
            .get(&annotation.subject)
            .ok_or_else(|| HypergraphError::UnknownMember(annotation.subject.clone()))?;
        if annotation.eval_time < stored.eval_time {
            return Err(HypergraphError::StaleAnnotation {
                subject: annotation.subject.clone(),
                stored: stored.eval_time,
                new: annotation.eval_time,
            });
        }
        self.place(annotation)
    }

    /// Members of `label`, sorted by device id.
    pub fn members(&self, label: &SemanticLabel) -> Result<Vec<DeviceId>, HypergraphError> {
        self.edges
            .get(label)
            .map(|set| set.iter().cloned().collect())
            .ok_or_else(|| HypergraphError::UnknownLabel(label.clone()))
    }

    pub fn trusted(&self) -> Vec<DeviceId> {
        self.edges[&SemanticLabel::Trusted]
            .iter()
            .cloned()
            .collect()
    }

    pub fn all_members(&self) -> Vec<DeviceId> {
        self.annotations.keys().cloned().collect()
    }

    /// Add `member` to an additive extension edge such as `low-trust`.
    pub fn tag(&mut self, extension: &str, member: &DeviceId) -> Result<(), HypergraphError> {
        let label = SemanticLabel::Extension(extension.to_string());
        if !self.contains(member) {
            return Err(HypergraphError::UnknownMember(member.clone()));
        }
        if extension.is_empty() {
            return Err(HypergraphError::ReservedLabel(extension.to_string()));
        }
        self.edges.entry(label).or_default().insert(member.clone());
        Ok(())
    }

    fn detach(&mut self, member: &DeviceId) {
        for label in SemanticLabel::PARTITION.iter() {
            if let Some(set) = self.edges.get_mut(label) {
                set.remove(member);
            }
        }
    }

    /// Check every structural invariant; returns a description of the first
    /// violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        for label in SemanticLabel::PARTITION.iter() {
            if !self.edges.contains_key(label) {
                return Err(format!("missing partition edge {label}"));
            }
        }
        let trusted = &self.edges[&SemanticLabel::Trusted];
        let untrusted = &self.edges[&SemanticLabel::Untrusted];
        let stable = &self.edges[&SemanticLabel::TrustedStable];
        let declining = &self.edges[&SemanticLabel::TrustedDeclining];
        if trusted.contains(&self.owner) || untrusted.contains(&self.owner) {
            return Err(format!(
                "owner {} is a member of its own hypergraph",
                self.owner
            ));
        }
        if let Some(m) = trusted.intersection(untrusted).next() {
            return Err(format!("{m} is both trusted and untrusted"));
        }
        if let Some(m) = stable.intersection(declining).next() {
            return Err(format!("{m} is both stable and declining"));
        }
        let union: BTreeSet<_> = stable.union(declining).cloned().collect();
        if &union != trusted {
            return Err("trusted edge differs from the union of its subgroups".into());
        }
        let members: BTreeSet<_> = trusted.union(untrusted).cloned().collect();
        let annotated: BTreeSet<_> = self.annotations.keys().cloned().collect();
        if members != annotated {
            return Err("annotated devices differ from edge members".into());
        }
        for (member, annotation) in &self.annotations {
            if &annotation.subject != member {
                return Err(format!(
                    "annotation keyed by {member} describes {}",
                    annotation.subject
                ));
            }
            for label in SemanticLabel::PARTITION.iter() {
                let expected = annotation.placement().contains(label);
                if self.edges[label].contains(member) != expected {
                    return Err(format!(
                        "{member} placement in {label} disagrees with its annotation"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Canonical structured-text snapshot (stable key order, explicit labels).
    pub fn to_canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("hypergraph serializes")
    }

    pub fn from_canonical(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Single-hyperedge hypergraph of collaborators able to run one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTrustHypergraph {
    pub owner: DeviceId,
    pub task_id: TaskId,
    pub edge: BTreeSet<DeviceId>,
}

impl TaskTrustHypergraph {
    /// Wrap `matched` into a task hypergraph; every member must currently sit
    /// in the owner's trusted edge.
    pub fn build(
        owner: DeviceId,
        task_id: TaskId,
        matched: impl IntoIterator<Item = DeviceId>,
        local: &TrustHypergraph,
    ) -> Result<Self, HypergraphError> {
        if &owner != local.owner() {
            return Err(HypergraphError::OwnerMismatch {
                task_owner: owner,
                local_owner: local.owner().clone(),
            });
        }
        let trusted = &local.edges[&SemanticLabel::Trusted];
        let edge: BTreeSet<DeviceId> = matched.into_iter().collect();
        if let Some(outsider) = edge.iter().find(|m| !trusted.contains(*m)) {
            return Err(HypergraphError::NotTrusted(outsider.clone()));
        }
        Ok(Self {
            owner,
            task_id,
            edge,
        })
    }

    pub fn label(&self) -> SemanticLabel {
        SemanticLabel::TaskTrusted(self.task_id.clone())
    }

    pub fn to_canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("task hypergraph serializes")
    }
}

/// Chain of task hypergraphs where each part's owner belongs to the previous
/// part's edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeTrustHypergraph {
    parts: Vec<TaskTrustHypergraph>,
}

impl CompositeTrustHypergraph {
    pub fn chain(parts: Vec<TaskTrustHypergraph>) -> Result<Self, HypergraphError> {
        if parts.is_empty() {
            return Err(HypergraphError::EmptyChain);
        }
        let mut owners = BTreeSet::new();
        for part in &parts {
            if !owners.insert(part.owner.clone()) {
                return Err(HypergraphError::DuplicateOwner(part.owner.clone()));
            }
        }
        for (index, pair) in parts.windows(2).enumerate() {
            if !pair[0].edge.contains(&pair[1].owner) {
                return Err(HypergraphError::BrokenChain {
                    index: index + 1,
                    owner: pair[0].owner.clone(),
                    next_owner: pair[1].owner.clone(),
                });
            }
        }
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &[TaskTrustHypergraph] {
        &self.parts
    }

    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Owners along the chain, first to last.
    pub fn hops(&self) -> Vec<DeviceId> {
        self.parts.iter().map(|p| p.owner.clone()).collect()
    }

    /// Whether `target` is reachable as a collaborator of the last part.
    pub fn reaches(&self, target: &DeviceId) -> bool {
        self.parts.last().is_some_and(|p| p.edge.contains(target))
    }

    pub fn to_canonical(&self) -> String {
        serde_json::to_string_pretty(self).expect("composite hypergraph serializes")
    }
}

/// Shortest trusted path from `src` to `dst` over task hypergraphs.
///
/// An edge `a -> b` exists when `b` is in `graphs[a].edge`. Among shortest
/// paths the one with the lexicographically smallest next hop at every step is
/// returned. `Ok(None)` means `dst` is unreachable.
pub fn find_trust_path(
    src: &DeviceId,
    dst: &DeviceId,
    graphs: &BTreeMap<DeviceId, TaskTrustHypergraph>,
) -> Result<Option<Vec<DeviceId>>, HypergraphError> {
    if !graphs.contains_key(src) {
        return Err(HypergraphError::MissingGraph(src.clone()));
    }
    if src == dst {
        return Ok(Some(vec![src.clone()]));
    }

    // Distances to dst over reversed edges, then a greedy forward walk picks
    // the smallest neighbour that is one step closer.
    let mut reverse: BTreeMap<&DeviceId, Vec<&DeviceId>> = BTreeMap::new();
    for (owner, graph) in graphs {
        for member in &graph.edge {
            reverse.entry(member).or_default().push(owner);
        }
    }
    let mut dist: BTreeMap<&DeviceId, usize> = BTreeMap::new();
    dist.insert(dst, 0);
    let mut queue = VecDeque::from([dst]);
    while let Some(node) = queue.pop_front() {
        let d = dist[node];
        for &pred in reverse.get(node).map(Vec::as_slice).unwrap_or(&[]) {
            if !dist.contains_key(pred) {
                dist.insert(pred, d + 1);
                queue.push_back(pred);
            }
        }
    }

    let Some(&total) = dist.get(src) else {
        return Ok(None);
    };
    let mut path = Vec::with_capacity(total + 1);
    let mut current = src;
    path.push(src.clone());
    for remaining in (0..total).rev() {
        let next = graphs[current]
            .edge
            .iter()
            .find(|m| dist.get(m) == Some(&remaining))
            .expect("a node at distance d has a successor at distance d-1");
        path.push(next.clone());
        current = next;
    }
    Ok(Some(path))
}
