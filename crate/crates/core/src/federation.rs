//! Connection-level server engine around a [`Coordinator`].
//!
//! [`FederationServer`] owns every piece of server state and performs no I/O
//! besides optional checkpoint files: transports feed it connection events
//! and decoded messages and carry out the returned [`Output`]s in order. The
//! checkpoint is refreshed before any output is returned, so an
//! acknowledgement never precedes the state it acknowledges.
//!
//! Per-connection handshake:
//!
//! ```text
//! AwaitHello --HELLO--> Challenged --AUTH_PROOF ok--> Authenticated --RESUME_REQ--> Active
//! ```
//!
//! Anything other than the next expected handshake message is answered with
//! an `ERROR` and leaves the connection state unchanged.

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::coordinator::{
    Approval, CoordError, Coordinator, Directive, FederationEvent, Liveness, RoundSummary, SubmitOutcome, UpdateMeta,
};
use crate::metrics::ConfusionCounts;
use crate::proto::{ChallengeRegistry, Message, DEFAULT_NONCE_TTL_MS};
use crate::tensor::TensorMap;

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq)]
pub enum Output {
    Send { conn: ConnId, message: Message },
    Close { conn: ConnId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ConnState {
    AwaitHello,
    Challenged { node_id: String, nonce: [u8; 32] },
    Authenticated { node_id: String },
    Active { node_id: String },
}

impl ConnState {
    fn node_id(&self) -> Option<&str> {
        match self {
            ConnState::Authenticated { node_id } | ConnState::Active { node_id } => Some(node_id),
            _ => None,
        }
    }
}

/// A node the server knows how to authenticate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeCredential {
    pub node_id: String,
    pub token: Vec<u8>,
    pub approved: bool,
}

pub struct FederationServer {
    coord: Coordinator,
    credentials: BTreeMap<String, Vec<u8>>,
    conns: BTreeMap<ConnId, ConnState>,
    node_conn: BTreeMap<String, ConnId>,
    challenges: ChallengeRegistry,
    rng: ChaCha8Rng,
    initial_model: TensorMap,
    checkpoint_path: Option<PathBuf>,
    latest_checkpoint: Vec<u8>,
    event_log: Vec<FederationEvent>,
    persist_failures: u64,
}

impl FederationServer {
    /// `rng_seed` drives nonces and session ids; the sim passes a fixed
    /// seed, a networked server an OS-random one.
    pub fn new(
        mut coord: Coordinator,
        credentials: Vec<NodeCredential>,
        initial_model: TensorMap,
        rng_seed: u64,
    ) -> Self {
        for c in &credentials {
            coord.register_node(&c.node_id, c.approved);
        }
        let mut server = Self {
            coord,
            credentials: credentials.into_iter().map(|c| (c.node_id, c.token)).collect(),
            conns: BTreeMap::new(),
            node_conn: BTreeMap::new(),
            challenges: ChallengeRegistry::new(DEFAULT_NONCE_TTL_MS),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            initial_model,
            checkpoint_path: None,
            latest_checkpoint: Vec::new(),
            event_log: Vec::new(),
            persist_failures: 0,
        };
        server.persist();
        server
    }

    /// Rebuilds a server from checkpoint bytes. All nodes start out disconnected.
    pub fn restore(
        checkpoint: &[u8],
        credentials: Vec<NodeCredential>,
        initial_model: TensorMap,
        rng_seed: u64,
    ) -> Result<Self, CoordError> {
        let mut coord = Coordinator::from_checkpoint_bytes(checkpoint)?;
        let ids: Vec<String> = coord.nodes().keys().cloned().collect();
        for id in ids {
            let seen = coord.node(&id).map_or(0, |n| n.last_seen_ms);
            coord.set_liveness(&id, Liveness::Disconnected, seen);
        }
        Ok(Self::new(coord, credentials, initial_model, rng_seed))
    }

    /// Also write every checkpoint to `path` (atomic replace).
    pub fn with_checkpoint_file(mut self, path: PathBuf) -> Self {
        self.checkpoint_path = Some(path);
        self.persist_now();
        self
    }

    pub fn coordinator(&self) -> &Coordinator {
        &self.coord
    }

    pub fn latest_checkpoint(&self) -> &[u8] {
        &self.latest_checkpoint
    }

    /// Every coordinator event since this server was constructed.
    pub fn event_log(&self) -> &[FederationEvent] {
        &self.event_log
    }

    pub fn persist_failures(&self) -> u64 {
        self.persist_failures
    }

    pub fn connected_nodes(&self) -> Vec<String> {
        self.node_conn.keys().cloned().collect()
    }

    fn persist(&mut self) {
        self.event_log.extend(self.coord.take_events());
        if self.coord.take_dirty() {
            self.persist_now();
        }
    }

    fn persist_now(&mut self) {
        self.latest_checkpoint = self.coord.checkpoint_bytes();
        if let Some(path) = &self.checkpoint_path {
            if let Err(e) = self.coord.checkpoint_save(path) {
                self.persist_failures += 1;
                eprintln!("event=checkpoint_failed path={} error=\"{e}\"", path.display());
            }
        }
    }

    fn route(&self, directives: Vec<Directive>, out: &mut Vec<Output>) {
        for d in directives {
            let Some(&conn) = self.node_conn.get(&d.node_id) else {
                continue;
            };
            let active = matches!(self.conns.get(&conn), Some(ConnState::Active { .. }));
            let shutdown = matches!(d.message, Message::Shutdown { .. });
            if active || shutdown {
                out.push(Output::Send {
                    conn,
                    message: d.message,
                });
                if shutdown {
                    out.push(Output::Close { conn });
                }
            }
        }
    }

    fn finish(&mut self, directives: Vec<Directive>, mut out: Vec<Output>) -> Vec<Output> {
        self.persist();
        self.route(directives, &mut out);
        out
    }

    pub fn connect(&mut self, conn: ConnId) {
        self.conns.insert(conn, ConnState::AwaitHello);
    }

    pub fn disconnect(&mut self, conn: ConnId, now_ms: u64) {
        if let Some(state) = self.conns.remove(&conn) {
            if let Some(node_id) = state.node_id() {
                if self.node_conn.get(node_id) == Some(&conn) {
                    self.node_conn.remove(node_id);
                    self.coord.set_liveness(node_id, Liveness::Disconnected, now_ms);
                }
            }
        }
    }

    fn error(conn: ConnId, code: &str, message: impl Into<String>) -> Output {
        Output::Send {
            conn,
            message: Message::Error {
                code: code.into(),
                message: message.into(),
            },
        }
    }

    pub fn handle_message(&mut self, conn: ConnId, message: Message, now_ms: u64) -> Vec<Output> {
        let Some(state) = self.conns.get(&conn).cloned() else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut directives = Vec::new();
        match (state, message) {
            (ConnState::AwaitHello, Message::Hello { node_id }) => {
                if !self.credentials.contains_key(&node_id) {
                    out.push(Self::error(
                        conn,
                        "unknown_node",
                        format!("node `{node_id}` is not registered"),
                    ));
                    out.push(Output::Close { conn });
                } else if !self.coord.may_connect(&node_id) {
                    out.push(Self::error(conn, "evicted", format!("node `{node_id}` was evicted")));
                    out.push(Output::Close { conn });
                } else {
                    let nonce = self.challenges.issue(&mut self.rng, now_ms);
                    self.conns.insert(conn, ConnState::Challenged { node_id, nonce });
                    out.push(Output::Send {
                        conn,
                        message: Message::Challenge { nonce },
                    });
                }
            }
            (
                ConnState::Challenged { node_id, nonce },
                Message::AuthProof {
                    node_id: claimed,
                    proof,
                },
            ) => {
                let token = &self.credentials[&node_id];
                let verdict = if claimed != node_id {
                    // Burn the nonce all the same.
                    let _ = self.challenges.verify(token, &nonce, &node_id, &[], now_ms);
                    Err("node id differs from HELLO".to_string())
                } else {
                    self.challenges
                        .verify(token, &nonce, &node_id, &proof, now_ms)
                        .map_err(|e| e.to_string())
                };
                match verdict {
                    Ok(()) => {
                        if let Some(old) = self.node_conn.insert(node_id.clone(), conn) {
                            if old != conn {
                                self.conns.remove(&old);
                                out.push(Output::Close { conn: old });
                            }
                        }
                        self.coord.set_liveness(&node_id, Liveness::Connected, now_ms);
                        let approved = self
                            .coord
                            .node(&node_id)
                            .is_some_and(|n| n.approval == Approval::Approved);
                        self.conns.insert(
                            conn,
                            ConnState::Authenticated {
                                node_id: node_id.clone(),
                            },
                        );
                        out.push(Output::Send {
                            conn,
                            message: Message::JoinAck { node_id, approved },
                        });
                    }
                    Err(reason) => {
                        out.push(Self::error(conn, "auth_failed", reason));
                        out.push(Output::Close { conn });
                        self.conns.remove(&conn);
                    }
                }
            }
            (
                ConnState::Authenticated { node_id } | ConnState::Active { node_id },
                Message::ResumeReq {
                    session_id,
                    last_acked_round,
                },
            ) => {
                self.coord.touch(&node_id, now_ms);
                let mut fresh = [0u8; 16];
                self.rng.fill_bytes(&mut fresh);
                let outcome = self
                    .coord
                    .resume_handshake(&node_id, session_id, last_acked_round, fresh);
                out.push(Output::Send {
                    conn,
                    message: Message::ResumeState {
                        decision: outcome.decision,
                        session_id: outcome.session_id,
                        round: outcome.round,
                        acked_round: outcome.acked_round,
                    },
                });
                if let Some(rs) = outcome.round_start {
                    out.push(Output::Send {
                        conn,
                        message: Message::RoundStart(rs),
                    });
                }
                if outcome.session_id.is_some() {
                    self.conns.insert(conn, ConnState::Active { node_id });
                }
            }
            (ConnState::Active { node_id }, Message::RoundResult(result)) => {
                if result.node_id != node_id {
                    out.push(Self::error(conn, "node_mismatch", "result names a different node"));
                } else {
                    match self.coord.submit_update(&result, now_ms) {
                        Ok(SubmitOutcome::Stored | SubmitOutcome::Duplicate) => {
                            out.push(Output::Send {
                                conn,
                                message: Message::RoundAck { round: result.round },
                            });
                            directives = self.coord.try_advance(now_ms);
                        }
                        Err(e) => out.push(Self::error(conn, coord_error_code(&e), e.to_string())),
                    }
                }
            }
            (ConnState::Authenticated { node_id } | ConnState::Active { node_id }, Message::Heartbeat) => {
                self.coord.touch(&node_id, now_ms);
                out.push(Output::Send {
                    conn,
                    message: Message::Heartbeat,
                });
            }
            (ConnState::AwaitHello | ConnState::Challenged { .. }, other) => {
                out.push(Self::error(
                    conn,
                    "unauthenticated",
                    format!("{:?} before authentication", other.msg_type()),
                ));
            }
            (_, other) => {
                out.push(Self::error(
                    conn,
                    "unexpected",
                    format!("unexpected {:?}", other.msg_type()),
                ));
            }
        }
        self.finish(directives, out)
    }

    /// Deadline processing; call periodically.
    pub fn tick(&mut self, now_ms: u64) -> Vec<Output> {
        let directives = self.coord.try_advance(now_ms);
        self.finish(directives, Vec::new())
    }

    pub fn control(&mut self, request: &ControlRequest, now_ms: u64) -> (ControlResponse, Vec<Output>) {
        let mut directives = Vec::new();
        let mut out = Vec::new();
        let response = match request {
            ControlRequest::Status => ControlResponse::ok(serde_json::to_value(self.coord.snapshot()).unwrap()),
            ControlRequest::Nodes => ControlResponse::ok(self.nodes_json()),
            ControlRequest::RoundMetrics(round) => match self.coord.round_summary(*round) {
                Some(s) => ControlResponse::ok(round_metrics_json(s)),
                None => ControlResponse::error(404, "not_found", format!("round {round} has no metrics yet")),
            },
            ControlRequest::EvalMatrix => ControlResponse::ok(self.eval_matrix_json()),
            ControlRequest::Start => match self.coord.start(self.initial_model.clone(), now_ms) {
                Ok(d) => {
                    directives = d;
                    ControlResponse::ok(json!({"started": true}))
                }
                Err(e) => coord_error_response(e),
            },
            ControlRequest::Pause => match self.coord.pause() {
                Ok(()) => ControlResponse::ok(json!({"status": "Paused"})),
                Err(e) => coord_error_response(e),
            },
            ControlRequest::Resume => match self.coord.resume(now_ms) {
                Ok(d) => {
                    directives = d;
                    ControlResponse::ok(json!({"status": self.coord.status()}))
                }
                Err(e) => coord_error_response(e),
            },
            ControlRequest::Abort => match self.coord.abort() {
                Ok(d) => {
                    directives = d;
                    ControlResponse::ok(json!({"status": "Aborted"}))
                }
                Err(e) => coord_error_response(e),
            },
            ControlRequest::Approve(id) => match self.coord.approve(id) {
                Ok(()) => ControlResponse::ok(json!({"node_id": id, "approval": "Approved"})),
                Err(e) => coord_error_response(e),
            },
            ControlRequest::Evict(id) => match self.coord.evict(id) {
                Ok(()) => {
                    if !self.coord.may_connect(id) {
                        if let Some(conn) = self.node_conn.remove(id.as_str()) {
                            self.conns.remove(&conn);
                            out.push(Output::Send {
                                conn,
                                message: Message::Shutdown {
                                    reason: "evicted".into(),
                                },
                            });
                            out.push(Output::Close { conn });
                            self.coord.set_liveness(id, Liveness::Disconnected, now_ms);
                        }
                    }
                    ControlResponse::ok(json!({"node_id": id, "approval": "Evicted"}))
                }
                Err(e) => coord_error_response(e),
            },
        };
        (response, self.finish(directives, out))
    }

    fn nodes_json(&self) -> Value {
        Value::Array(
            self.coord
                .nodes()
                .values()
                .map(|n| {
                    json!({
                        "node_id": n.node_id,
                        "approval": n.approval,
                        "liveness": n.liveness,
                        "last_seen_ms": n.last_seen_ms,
                        "contributed_rounds": n.contributed_rounds,
                    })
                })
                .collect(),
        )
    }

    /// Node-side evaluations of the current global model, one row per site.
    fn eval_matrix_json(&self) -> Value {
        let latest = self
            .coord
            .history()
            .iter()
            .rev()
            .find(|s| s.contributors.iter().any(|m| m.eval.is_some()));
        match latest {
            None => json!({"round": null, "rows": []}),
            Some(s) => json!({
                "round": s.round,
                "rows": s.contributors.iter().filter(|m| m.eval.is_some()).map(|m| {
                    let mut row = metrics_json(m.eval.map(|e| e.counts).unwrap_or_default(), m.eval.and_then(|e| e.roc_auc));
                    row["model_site"] = json!("global");
                    row["test_site"] = json!(m.node_id);
                    row
                }).collect::<Vec<_>>(),
            }),
        }
    }
}

fn metrics_json(c: ConfusionCounts, roc_auc: Option<f64>) -> Value {
    json!({
        "tp": c.tp, "fp": c.fp, "tn": c.tn, "fn": c.fn_,
        "sensitivity": c.sensitivity(),
        "specificity": c.specificity(),
        "balanced_accuracy": c.balanced_accuracy(),
        "accuracy": c.accuracy(),
        "roc_auc": roc_auc,
    })
}

fn contributor_json(m: &UpdateMeta) -> Value {
    let mut v = match m.eval {
        Some(e) => metrics_json(e.counts, e.roc_auc),
        None => json!({}),
    };
    v["node_id"] = json!(m.node_id);
    v["sample_count"] = json!(m.sample_count);
    v["epochs"] = json!(m.epochs);
    v["train_loss"] = json!(m.train_loss);
    v["val_loss"] = json!(m.val_loss);
    v
}

/// Contributors' reports for a round. Evaluations are of the global model
/// the round started from.
fn round_metrics_json(s: &RoundSummary) -> Value {
    json!({
        "round": s.round,
        "contributors": s.contributors.iter().map(contributor_json).collect::<Vec<_>>(),
        "missing": s.missing,
        "mean_val_loss": s.mean_val_loss(),
        "pooled": s.pooled_eval().map(|c| metrics_json(c, None)),
    })
}

fn coord_error_code(e: &CoordError) -> &'static str {
    match e {
        CoordError::InsufficientNodes { .. } => "insufficient_nodes",
        CoordError::AlreadyRunning => "already_running",
        CoordError::WrongRound { .. } => "wrong_round",
        CoordError::NotExpected(_) => "not_expected",
        CoordError::UnknownNode(_) => "unknown_node",
        CoordError::StructureMismatch(_) => "structure_mismatch",
        CoordError::Conflict(_) => "conflict",
        CoordError::InvalidConfig(_) => "invalid_config",
        CoordError::CorruptCheckpoint(_) => "corrupt_checkpoint",
        CoordError::Io(_) => "io",
    }
}

fn coord_error_response(e: CoordError) -> ControlResponse {
    let status = match e {
        CoordError::UnknownNode(_) => 404,
        CoordError::InvalidConfig(_) | CoordError::StructureMismatch(_) => 400,
        CoordError::Io(_) | CoordError::CorruptCheckpoint(_) => 500,
        _ => 409,
    };
    ControlResponse::error(status, coord_error_code(&e), e.to_string())
}

/// Operator requests accepted by the control API.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlRequest {
    Status,
    Nodes,
    RoundMetrics(u32),
    EvalMatrix,
    Start,
    Pause,
    Resume,
    Abort,
    Approve(String),
    Evict(String),
}

impl ControlRequest {
    /// Maps an HTTP method and path to a request; `None` for unknown routes.
    pub fn parse(method: &str, path: &str) -> Option<Self> {
        let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
        match (method, parts.as_slice()) {
            ("GET", ["status"]) => Some(Self::Status),
            ("GET", ["nodes"]) => Some(Self::Nodes),
            ("GET", ["eval-matrix"]) => Some(Self::EvalMatrix),
            ("GET", ["rounds", r, "metrics"]) => r.parse().ok().map(Self::RoundMetrics),
            ("POST", ["federation", "start"]) => Some(Self::Start),
            ("POST", ["federation", "pause"]) => Some(Self::Pause),
            ("POST", ["federation", "resume"]) => Some(Self::Resume),
            ("POST", ["federation", "abort"]) => Some(Self::Abort),
            ("POST", ["nodes", id, "approve"]) if !id.is_empty() => Some(Self::Approve(id.to_string())),
            ("POST", ["nodes", id, "evict"]) if !id.is_empty() => Some(Self::Evict(id.to_string())),
            _ => None,
        }
    }

    pub fn is_mutating(&self) -> bool {
        !matches!(
            self,
            Self::Status | Self::Nodes | Self::RoundMetrics(_) | Self::EvalMatrix
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlResponse {
    pub status: u16,
    pub body: Value,
}

impl ControlResponse {
    pub fn ok(body: Value) -> Self {
        Self { status: 200, body }
    }

    pub fn error(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"error": code, "message": message.into()}),
        }
    }

    pub fn unauthorized() -> Self {
        Self::error(401, "unauthorized", "missing or invalid operator token")
    }
}

/// Checks an `Authorization: Bearer <token>` header value in constant time.
pub fn operator_authorized(expected: &str, header: Option<&str>) -> bool {
    let Some(given) = header.and_then(|h| h.strip_prefix("Bearer ")) else {
        return false;
    };
    let key = ring::hmac::Key::new(ring::hmac::HMAC_SHA256, b"fedorch-operator");
    let tag = ring::hmac::sign(&key, expected.as_bytes());
    !expected.is_empty() && ring::hmac::verify(&key, given.as_bytes(), tag.as_ref()).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordinator::{FederationConfig, RoundStatus};
    use crate::proto::{prove, ResumeDecision, RoundResult};
    use crate::tensor::Tensor;

    fn model(v: f32) -> TensorMap {
        TensorMap::from_entries(vec![Tensor::new("w0", vec![1, 1], vec![v]).unwrap()]).unwrap()
    }

    fn server(nodes: &[(&str, bool)]) -> FederationServer {
        let creds = nodes
            .iter()
            .map(|(id, approved)| NodeCredential {
                node_id: id.to_string(),
                token: format!("tok-{id}").into_bytes(),
                approved: *approved,
            })
            .collect();
        FederationServer::new(
            Coordinator::new(FederationConfig::default()).unwrap(),
            creds,
            model(0.0),
            7,
        )
    }

    fn sent(out: &[Output]) -> Vec<&Message> {
        out.iter()
            .filter_map(|o| match o {
                Output::Send { message, .. } => Some(message),
                _ => None,
            })
            .collect()
    }

    /// Runs HELLO/AUTH_PROOF/RESUME_REQ and returns the outputs of the resume step.
    fn join(s: &mut FederationServer, conn: ConnId, id: &str) -> Vec<Output> {
        s.connect(conn);
        let out = s.handle_message(conn, Message::Hello { node_id: id.into() }, 0);
        let Message::Challenge { nonce } = sent(&out)[0].clone() else {
            panic!("{out:?}")
        };
        let proof = prove(format!("tok-{id}").as_bytes(), &nonce, id);
        let out = s.handle_message(
            conn,
            Message::AuthProof {
                node_id: id.into(),
                proof,
            },
            0,
        );
        assert!(matches!(sent(&out)[0], Message::JoinAck { .. }), "{out:?}");
        s.handle_message(
            conn,
            Message::ResumeReq {
                session_id: None,
                last_acked_round: 0,
            },
            0,
        )
    }

    #[test]
    fn wrong_token_is_rejected_and_nonce_burned() {
        let mut s = server(&[("a", true)]);
        s.connect(1);
        let out = s.handle_message(1, Message::Hello { node_id: "a".into() }, 0);
        let Message::Challenge { nonce } = sent(&out)[0].clone() else {
            panic!()
        };
        let proof = prove(b"wrong", &nonce, "a");
        let out = s.handle_message(
            1,
            Message::AuthProof {
                node_id: "a".into(),
                proof,
            },
            0,
        );
        assert!(matches!(sent(&out)[0], Message::Error { code, .. } if code == "auth_failed"));
        assert!(out.contains(&Output::Close { conn: 1 }));
    }

    #[test]
    fn pre_auth_messages_are_refused() {
        let mut s = server(&[("a", true)]);
        s.connect(1);
        let out = s.handle_message(
            1,
            Message::ResumeReq {
                session_id: None,
                last_acked_round: 0,
            },
            0,
        );
        assert!(matches!(sent(&out)[0], Message::Error { code, .. } if code == "unauthenticated"));
        let out = s.handle_message(
            1,
            Message::Hello {
                node_id: "nobody".into(),
            },
            0,
        );
        assert!(matches!(sent(&out)[0], Message::Error { code, .. } if code == "unknown_node"));
    }

    #[test]
    fn session_flow_and_duplicate_ack() {
        let mut s = server(&[("a", true)]);
        let out = join(&mut s, 1, "a");
        assert!(matches!(
            sent(&out)[0],
            Message::ResumeState {
                decision: ResumeDecision::Wait,
                ..
            }
        ));
        let (resp, out) = s.control(&ControlRequest::Start, 0);
        assert_eq!(resp.status, 200);
        let Message::RoundStart(rs) = sent(&out)[0].clone() else {
            panic!()
        };
        assert_eq!((rs.round, rs.epochs, rs.total_rounds), (1, 10, 20));
        let result = RoundResult {
            round: 1,
            node_id: "a".into(),
            sample_count: 4,
            epochs: 10,
            train_loss: 0.1,
            val_loss: 0.1,
            eval: None,
            model: model(1.0),
        };
        let out = s.handle_message(1, Message::RoundResult(result.clone()), 5);
        assert_eq!(sent(&out)[0], &Message::RoundAck { round: 1 });
        assert!(matches!(sent(&out)[1], Message::RoundStart(rs) if rs.round == 2 && rs.acked_round == 1));
        let out = s.handle_message(1, Message::RoundResult(result), 6);
        assert_eq!(sent(&out), vec![&Message::RoundAck { round: 1 }]);
        assert_eq!(s.coordinator().aggregations(), 1);
        let back = Coordinator::from_checkpoint_bytes(s.latest_checkpoint()).unwrap();
        assert_eq!(back.state(), s.coordinator().state());
    }

    #[test]
    fn control_routes_and_conflicts() {
        assert_eq!(
            ControlRequest::parse("GET", "/rounds/3/metrics"),
            Some(ControlRequest::RoundMetrics(3))
        );
        assert_eq!(
            ControlRequest::parse("POST", "/nodes/x/approve"),
            Some(ControlRequest::Approve("x".into()))
        );
        assert_eq!(ControlRequest::parse("GET", "/federation/start"), None);
        let mut s = server(&[("a", true), ("b", false)]);
        assert_eq!(s.control(&ControlRequest::Pause, 0).0.status, 409);
        assert_eq!(s.control(&ControlRequest::Start, 0).0.status, 200);
        assert_eq!(s.control(&ControlRequest::Start, 0).0.status, 409);
        let (status, _) = s.control(&ControlRequest::Status, 0);
        assert_eq!(status.body["round"], 1);
        assert_eq!(status.body["status"], "InRound");
        assert_eq!(status.body["expected"], 1);
        assert_eq!(s.control(&ControlRequest::Approve("zzz".into()), 0).0.status, 404);
        assert_eq!(s.control(&ControlRequest::RoundMetrics(1), 0).0.status, 404);
        s.control(&ControlRequest::Pause, 0);
        assert_eq!(s.coordinator().status(), RoundStatus::Paused);
    }

    #[test]
    fn paused_federation_sends_no_round_start() {
        let mut s = server(&[("a", true)]);
        s.control(&ControlRequest::Start, 0);
        s.control(&ControlRequest::Pause, 0);
        let out = join(&mut s, 1, "a");
        assert!(matches!(
            sent(&out)[0],
            Message::ResumeState {
                decision: ResumeDecision::Wait,
                ..
            }
        ));
        assert_eq!(sent(&out).len(), 1);
        let (_, out) = s.control(&ControlRequest::Resume, 0);
        assert!(matches!(sent(&out)[0], Message::RoundStart(_)));
    }

    #[test]
    fn operator_token_check() {
        assert!(operator_authorized("s3cret", Some("Bearer s3cret")));
        assert!(!operator_authorized("s3cret", Some("Bearer s3cre")));
        assert!(!operator_authorized("s3cret", Some("s3cret")));
        assert!(!operator_authorized("s3cret", None));
        assert!(!operator_authorized("", Some("Bearer ")));
    }
}
