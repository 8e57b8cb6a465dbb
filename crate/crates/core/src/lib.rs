//! Semantic chain-of-trust.
//!
//! Devices keep semantic trust hypergraphs over their collaborators and run a
//! six-agent evaluation pipeline during idle CPU slots. The crate contains the
//! data structures, the evaluation rules, the agent workflows, a deterministic
//! discrete-event simulator and the experiment harness built on top of it.

pub mod harness;
pub mod hypergraph;
pub mod pipeline;
pub mod semantics;
pub mod sim;

pub use hypergraph::{
    find_trust_path, CompositeTrustHypergraph, DeviceId, HypergraphError, SemanticLabel, TaskId,
    TaskTrustHypergraph, Timestamp, TrustAnnotation, TrustHypergraph, TrustStatus, TrustTrend,
};
pub use semantics::{
    analyze_task, check_resource_match, estimate_trend, evaluate_resources, infer_trust_semantics,
    normalize_record, score_history, EvalConfig, Factor, Feedback, MatchReason, MatchVerdict,
    PerformanceRecord, ResourceSnapshot, SemanticsError, TaskSpec, TrendEstimate,
};
