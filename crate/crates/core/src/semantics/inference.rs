//! Pluggable inference behind the two evaluator agents.
//!
//! The deterministic [`RuleEngine`] is the default. [`RemoteInference`] sends
//! the same structured context to a chat-style model endpoint, extracts one
//! structured verdict block from the reply and falls back to the rule engine
//! whenever the reply cannot be used.

use std::collections::BTreeSet;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{
    evaluate_resources, infer_trust_semantics, EvalConfig, PerformanceRecord, ResourceSnapshot,
    SemanticsError, TaskSpec,
};
use crate::hypergraph::{DeviceId, Timestamp, TrustAnnotation, TrustStatus, TrustTrend};

/// Everything the historical trust evaluator sees for one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryContext {
    pub subject: DeviceId,
    pub local: Vec<PerformanceRecord>,
    pub received: Vec<PerformanceRecord>,
    pub now: Timestamp,
}

/// Everything the resource trust evaluator sees for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceContext {
    pub task: TaskSpec,
    pub snapshots: Vec<ResourceSnapshot>,
}

pub trait TrustInference: Send + Sync {
    fn infer_history(
        &self,
        ctx: &HistoryContext,
        cfg: &EvalConfig,
    ) -> Result<TrustAnnotation, SemanticsError>;

    fn infer_matches(&self, ctx: &ResourceContext, cfg: &EvalConfig) -> BTreeSet<DeviceId>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RuleEngine;

impl TrustInference for RuleEngine {
    fn infer_history(
        &self,
        ctx: &HistoryContext,
        cfg: &EvalConfig,
    ) -> Result<TrustAnnotation, SemanticsError> {
        infer_trust_semantics(&ctx.local, &ctx.received, ctx.now, cfg)
    }

    fn infer_matches(&self, ctx: &ResourceContext, cfg: &EvalConfig) -> BTreeSet<DeviceId> {
        evaluate_resources(&ctx.task, &ctx.snapshots, cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transport failure: {0}")]
    Failed(String),
}

/// Sends a chat request and returns the assistant's text.
pub trait ChatTransport: Send {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
    pub model: String,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_secs: 30.0,
            model: "default".into(),
        }
    }
}

const HISTORY_INSTRUCTIONS: &str = "You are the historical trust evaluator. Infer whether the device is trusted \
and whether its trust trend is stable or declining from the performance records. Reply with exactly one JSON \
object {\"device\": string, \"time\": number, \"status\": \"trusted\"|\"untrusted\", \"trend\": \"stable\"|\"declining\"}.";

const RESOURCE_INSTRUCTIONS: &str =
    "You are the resource trust evaluator. First analyze the task requirements, \
then examine each collaborator's resources, then compare them. Reply with exactly one JSON object \
{\"matched\": [device ids whose resources satisfy the task]}.";

pub fn history_request(model: &str, ctx: &HistoryContext) -> ChatRequest {
    ChatRequest {
        model: model.to_string(),
        messages: vec![
            ChatMessage {
                role: "system".into(),
                content: HISTORY_INSTRUCTIONS.into(),
            },
            ChatMessage {
                role: "user".into(),
                content: serde_json::to_string(ctx).expect("context serializes"),
            },
        ],
    }
}

pub fn resource_request(model: &str, ctx: &ResourceContext) -> ChatRequest {
    ChatRequest {
        model: model.to_string(),
        messages: vec![
            ChatMessage {
                role: "system".into(),
                content: RESOURCE_INSTRUCTIONS.into(),
            },
            ChatMessage {
                role: "user".into(),
                content: serde_json::to_string(ctx).expect("context serializes"),
            },
        ],
    }
}

/// Pull the single JSON object out of a model reply. A fenced ```json block
/// wins; otherwise the first balanced `{...}` span is used.
pub fn extract_verdict_block(reply: &str) -> Option<Value> {
    if let Some(start) = reply.find("```json") {
        let body = &reply[start + 7..];
        if let Some(end) = body.find("```") {
            if let Ok(v) = serde_json::from_str::<Value>(body[..end].trim()) {
                return v.is_object().then_some(v);
            }
        }
    }
    let bytes = reply.as_bytes();
    let open = reply.find('{')?;
    let mut depth = 0usize;
    let mut in_str = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(open) {
        if in_str {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_str = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return serde_json::from_str(&reply[open..=i]).ok();
                }
            }
            _ => {}
        }
    }
    None
}

#[derive(Deserialize)]
struct AnnotationBlock {
    device: DeviceId,
    status: TrustStatus,
    trend: TrustTrend,
}

#[derive(Deserialize)]
struct MatchedBlock {
    matched: Vec<DeviceId>,
}

pub fn parse_history_reply(reply: &str, ctx: &HistoryContext) -> Option<TrustAnnotation> {
    let block: AnnotationBlock = serde_json::from_value(extract_verdict_block(reply)?).ok()?;
    // the evaluation time is the owner's clock, whatever the model claims
    (block.device == ctx.subject)
        .then(|| TrustAnnotation::new(block.device, ctx.now, block.status, block.trend))
}

pub fn parse_resource_reply(reply: &str, ctx: &ResourceContext) -> Option<BTreeSet<DeviceId>> {
    let block: MatchedBlock = serde_json::from_value(extract_verdict_block(reply)?).ok()?;
    let offered: BTreeSet<&DeviceId> = ctx.snapshots.iter().map(|s| &s.subject).collect();
    block
        .matched
        .iter()
        .all(|m| offered.contains(m))
        .then(|| block.matched.into_iter().collect())
}

/// Model-backed inference with rule-engine fallback. Calls are serialized.
pub struct RemoteInference<T: ChatTransport> {
    transport: Mutex<T>,
    model: String,
    fallback: RuleEngine,
}

impl<T: ChatTransport> RemoteInference<T> {
    pub fn new(transport: T, model: impl Into<String>) -> Self {
        Self {
            transport: Mutex::new(transport),
            model: model.into(),
            fallback: RuleEngine,
        }
    }

    fn ask(&self, request: &ChatRequest) -> Option<String> {
        let mut transport = self.transport.lock().unwrap_or_else(|e| e.into_inner());
        transport.complete(request).ok()
    }
}

impl<T: ChatTransport> TrustInference for RemoteInference<T> {
    fn infer_history(
        &self,
        ctx: &HistoryContext,
        cfg: &EvalConfig,
    ) -> Result<TrustAnnotation, SemanticsError> {
        if ctx.local.is_empty() && ctx.received.is_empty() {
            return Err(SemanticsError::EmptyHistory);
        }
        self.ask(&history_request(&self.model, ctx))
            .and_then(|reply| parse_history_reply(&reply, ctx))
            .map_or_else(|| self.fallback.infer_history(ctx, cfg), Ok)
    }

    fn infer_matches(&self, ctx: &ResourceContext, cfg: &EvalConfig) -> BTreeSet<DeviceId> {
        self.ask(&resource_request(&self.model, ctx))
            .and_then(|reply| parse_resource_reply(&reply, ctx))
            .unwrap_or_else(|| self.fallback.infer_matches(ctx, cfg))
    }
}

/// HTTP transport posting the chat request as JSON. Accepts replies shaped as
/// `{"choices":[{"message":{"content":..}}]}` or `{"message":{"content":..}}`.
#[cfg(feature = "remote")]
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
}

#[cfg(feature = "remote")]
impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, timeout_secs: f64) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs_f64(timeout_secs)))
            .build()
            .into();
        Self {
            agent,
            endpoint: endpoint.into(),
        }
    }
}

#[cfg(feature = "remote")]
impl ChatTransport for HttpTransport {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, TransportError> {
        let fail = |e: &dyn std::fmt::Display| TransportError::Failed(e.to_string());
        let body: Value = self
            .agent
            .post(&self.endpoint)
            .send_json(request)
            .map_err(|e| fail(&e))?
            .body_mut()
            .read_json()
            .map_err(|e| fail(&e))?;
        body.pointer("/choices/0/message/content")
            .or_else(|| body.pointer("/message/content"))
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| TransportError::Failed("reply carries no message content".into()))
    }
}

/// Inference engine selected by configuration: no endpoint means the rule engine.
pub fn from_config(cfg: &RemoteConfig) -> Box<dyn TrustInference> {
    match &cfg.endpoint {
        #[cfg(feature = "remote")]
        Some(endpoint) => Box::new(RemoteInference::new(
            HttpTransport::new(endpoint.clone(), cfg.timeout_secs),
            cfg.model.clone(),
        )),
        _ => Box::new(RuleEngine),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypergraph::TaskId;
    use crate::semantics::Feedback;

    struct Canned {
        replies: Vec<Result<String, TransportError>>,
        seen: Vec<ChatRequest>,
    }

    impl ChatTransport for Canned {
        fn complete(&mut self, request: &ChatRequest) -> Result<String, TransportError> {
            self.seen.push(request.clone());
            self.replies.remove(0)
        }
    }

    fn id(s: &str) -> DeviceId {
        DeviceId::new(s).unwrap()
    }

    fn history() -> HistoryContext {
        HistoryContext {
            subject: id("b_j"),
            local: vec![PerformanceRecord {
                observer: id("b_i"),
                subject: id("b_j"),
                time: 10.0,
                response_time: 0.6,
                exec_speed: 2.0,
                accuracy: 0.98,
                feedback: Feedback::Satisfied,
            }],
            received: vec![],
            now: 100.0,
        }
    }

    fn resources() -> ResourceContext {
        let snap = |name: &str, freq: f64| ResourceSnapshot {
            subject: id(name),
            idle: true,
            available_time: 120.0,
            cpu_freq: freq,
            cpu_fraction: 0.9,
            storage: 500.0,
            bandwidth: 200.0,
            stability: 0.99,
        };
        ResourceContext {
            task: TaskSpec::new(TaskId::new("c"), 100.0, 2339.0, 60.0).unwrap(),
            snapshots: vec![snap("b_w", 40e9), snap("b_u", 3e9)],
        }
    }

    #[test]
    fn extracts_fenced_and_bare_blocks() {
        let fenced = "Sure.\n```json\n{\"matched\": [\"b_w\"]}\n```\n";
        assert_eq!(extract_verdict_block(fenced).unwrap()["matched"][0], "b_w");
        let bare = "The verdict is {\"device\": \"b_j\", \"note\": \"a } brace\"} done";
        assert_eq!(extract_verdict_block(bare).unwrap()["device"], "b_j");
        assert!(extract_verdict_block("no json here").is_none());
    }

    #[test]
    fn remote_history_uses_model_verdict_with_owner_clock() {
        let canned = Canned {
            replies: vec![Ok(
                r#"{"device":"b_j","time":5,"status":"untrusted","trend":"declining"}"#.into(),
            )],
            seen: vec![],
        };
        let remote = RemoteInference::new(canned, "m");
        let a = remote
            .infer_history(&history(), &EvalConfig::default())
            .unwrap();
        assert_eq!(
            (a.status, a.trend, a.eval_time),
            (TrustStatus::Untrusted, TrustTrend::Declining, 100.0)
        );
        let seen = &remote.transport.lock().unwrap().seen;
        assert_eq!(seen[0].messages[0].role, "system");
        let ctx: HistoryContext = serde_json::from_str(&seen[0].messages[1].content).unwrap();
        assert_eq!(ctx, history());
    }

    #[test]
    fn remote_falls_back_on_garbage_or_failure() {
        let canned = Canned {
            replies: vec![
                Ok("I think it is fine".into()),
                Err(TransportError::Failed("timeout".into())),
                Ok(r#"{"matched": ["b_zz"]}"#.into()),
            ],
            seen: vec![],
        };
        let remote = RemoteInference::new(canned, "m");
        let cfg = EvalConfig::default();
        let expected = RuleEngine.infer_history(&history(), &cfg).unwrap();
        assert_eq!(remote.infer_history(&history(), &cfg).unwrap(), expected);
        let rules = RuleEngine.infer_matches(&resources(), &cfg);
        assert_eq!(remote.infer_matches(&resources(), &cfg), rules);
        // unknown device in the matched list is rejected too
        assert_eq!(remote.infer_matches(&resources(), &cfg), rules);
        assert_eq!(rules, BTreeSet::from([id("b_w")]));
    }

    #[test]
    fn wrong_subject_is_rejected() {
        let reply = r#"{"device":"b_q","status":"trusted","trend":"stable"}"#;
        assert!(parse_history_reply(reply, &history()).is_none());
    }

    #[test]
    fn no_endpoint_selects_rule_engine() {
        let engine = from_config(&RemoteConfig::default());
        let cfg = EvalConfig::default();
        assert_eq!(
            engine.infer_matches(&resources(), &cfg),
            BTreeSet::from([id("b_w")])
        );
    }
}
