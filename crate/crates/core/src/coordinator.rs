//! The federation's round state machine.
//!
//! [`Coordinator`] is the single logical writer of federation state. Every
//! mutation (update submission, round advance, operator command) goes through
//! `&mut self`; transports and the control API only hold snapshots. Methods
//! that need to notify nodes return [`Directive`]s for the caller to deliver.
//!
//! Status transitions are restricted to:
//!
//! ```text
//! WaitingForNodes -> InRound
//! InRound         -> Aggregating | Paused | Aborted
//! Aggregating     -> InRound | Finished
//! Paused          -> InRound | Aborted
//! ```
//!
//! Node approval and eviction take effect only when the next round's expected
//! set is drawn.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::ConfusionCounts;
use crate::proto::{Message, NodeEval, ResumeDecision, RoundResult, RoundStart};
use crate::tensor::{self, TensorError, TensorMap, WeightedUpdate};

#[derive(Debug, Error)]
pub enum CoordError {
    #[error("{approved} approved nodes, need at least {required}")]
    InsufficientNodes { approved: usize, required: usize },
    #[error("federation already started")]
    AlreadyRunning,
    #[error("update for round {got}, current round is {current}")]
    WrongRound { current: u32, got: u32 },
    #[error("node `{0}` is not expected this round")]
    NotExpected(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("structure mismatch: {0}")]
    StructureMismatch(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for CoordError {
    fn from(e: TensorError) -> Self {
        CoordError::StructureMismatch(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundStatus {
    WaitingForNodes,
    InRound,
    Aggregating,
    Paused,
    Finished,
    Aborted,
}

impl RoundStatus {
    pub fn can_transition_to(self, next: RoundStatus) -> bool {
        use RoundStatus::*;
        matches!(
            (self, next),
            (WaitingForNodes, InRound)
                | (InRound, Aggregating)
                | (InRound, Paused)
                | (InRound, Aborted)
                | (Aggregating, InRound)
                | (Aggregating, Finished)
                | (Paused, InRound)
                | (Paused, Aborted)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, RoundStatus::Finished | RoundStatus::Aborted)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub total_rounds: u32,
    pub epochs_per_round: u32,
    /// Share of expected updates needed to aggregate once the deadline passes.
    pub quorum_fraction: f64,
    pub round_timeout_ms: Option<u64>,
    pub min_nodes: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Finish early after this many rounds without improvement of the
    /// sample-weighted mean validation loss. Off when `None`.
    pub early_stop_patience: Option<u32>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            total_rounds: 20,
            epochs_per_round: 10,
            quorum_fraction: 1.0,
            round_timeout_ms: None,
            min_nodes: 1,
            checkpoint_dir: None,
            early_stop_patience: None,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), CoordError> {
        let bad = |m: &str| Err(CoordError::InvalidConfig(m.into()));
        if self.total_rounds == 0 {
            return bad("total_rounds must be at least 1");
        }
        if self.epochs_per_round == 0 {
            return bad("epochs_per_round must be at least 1");
        }
        if !(self.quorum_fraction > 0.0 && self.quorum_fraction <= 1.0) {
            return bad("quorum_fraction must lie in (0, 1]");
        }
        if self.min_nodes == 0 {
            return bad("min_nodes must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Approval {
    Pending,
    Approved,
    Evicted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Liveness {
    Connected,
    Disconnected,
    Stale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: String,
    pub approval: Approval,
    pub liveness: Liveness,
    pub last_seen_ms: u64,
    pub contributed_rounds: BTreeSet<u32>,
}

impl NodeRecord {
    fn latest_contribution(&self) -> u32 {
        self.contributed_rounds.iter().next_back().copied().unwrap_or(0)
    }
}

/// Side data a node sent along with its weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMeta {
    pub node_id: String,
    pub sample_count: u64,
    pub epochs: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub counts: ConfusionCounts,
    pub roc_auc: Option<f64>,
}

impl From<NodeEval> for EvalSummary {
    fn from(e: NodeEval) -> Self {
        Self {
            counts: e.counts,
            roc_auc: e.roc_auc,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    pub round_index: u32,
    pub global_model: TensorMap,
    pub expected_nodes: BTreeSet<String>,
    pub received: BTreeMap<String, WeightedUpdate>,
    pub received_meta: BTreeMap<String, UpdateMeta>,
    pub status: RoundStatus,
    pub deadline_ms: Option<u64>,
}

/// What happened in a completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub contributors: Vec<UpdateMeta>,
    /// Expected nodes that were missing when a quorum aggregation ran.
    pub missing: Vec<String>,
    pub aggregated_at_ms: u64,
}

impl RoundSummary {
    /// Pooled node-side evaluation of the model broadcast at the start of this round.
    pub fn pooled_eval(&self) -> Option<ConfusionCounts> {
        self.contributors
            .iter()
            .filter_map(|m| m.eval.map(|e| e.counts))
            .reduce(|a, b| a + b)
    }

    pub fn mean_val_loss(&self) -> f64 {
        let n: u64 = self.contributors.iter().map(|m| m.sample_count).sum();
        self.contributors
            .iter()
            .map(|m| m.val_loss * m.sample_count as f64)
            .sum::<f64>()
            / n.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FederationEvent {
    RoundStarted {
        round: u32,
        expected: Vec<String>,
    },
    UpdateStored {
        round: u32,
        node_id: String,
        epochs: u32,
        sample_count: u64,
    },
    DuplicateUpdate {
        round: u32,
        node_id: String,
    },
    Aggregated {
        round: u32,
        contributors: Vec<(String, u64, u32)>,
    },
    NodeStale {
        round: u32,
        node_id: String,
    },
    Paused {
        round: u32,
        reason: String,
    },
    Resumed {
        round: u32,
    },
    Finished {
        round: u32,
    },
    Aborted {
        round: u32,
    },
    NodeApproved {
        node_id: String,
    },
    NodeEvicted {
        node_id: String,
    },
}

/// A message the coordinator wants delivered to a node.
#[derive(Debug, Clone, PartialEq)]
pub struct Directive {
    pub node_id: String,
    pub message: Message,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubmitOutcome {
    Stored,
    /// Already held for this round; acknowledged without double counting.
    Duplicate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResumeOutcome {
    pub decision: ResumeDecision,
    pub session_id: Option<[u8; 16]>,
    pub round: u32,
    pub acked_round: u32,
    pub round_start: Option<RoundStart>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusSnapshot {
    pub round: u32,
    pub total_rounds: u32,
    pub status: RoundStatus,
    pub received: usize,
    pub expected: usize,
    pub aggregations: u32,
    pub deadline_ms: Option<u64>,
    pub alerts: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Coordinator {
    config: FederationConfig,
    state: RoundState,
    nodes: BTreeMap<String, NodeRecord>,
    /// session id -> node id; one live session per node.
    sessions: BTreeMap<[u8; 16], String>,
    history: Vec<RoundSummary>,
    alerts: Vec<String>,
    events: Vec<FederationEvent>,
    aggregations: u32,
    best_val_loss: f64,
    rounds_without_improvement: u32,
    dirty: bool,
}

impl Coordinator {
    pub fn new(config: FederationConfig) -> Result<Self, CoordError> {
        config.validate()?;
        Ok(Self {
            config,
            state: RoundState {
                round_index: 0,
                global_model: TensorMap::new(),
                expected_nodes: BTreeSet::new(),
                received: BTreeMap::new(),
                received_meta: BTreeMap::new(),
                status: RoundStatus::WaitingForNodes,
                deadline_ms: None,
            },
            nodes: BTreeMap::new(),
            sessions: BTreeMap::new(),
            history: Vec::new(),
            alerts: Vec::new(),
            events: Vec::new(),
            aggregations: 0,
            best_val_loss: f64::INFINITY,
            rounds_without_improvement: 0,
            dirty: true,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn status(&self) -> RoundStatus {
        self.state.status
    }

    pub fn global_model(&self) -> &TensorMap {
        &self.state.global_model
    }

    pub fn nodes(&self) -> &BTreeMap<String, NodeRecord> {
        &self.nodes
    }

    pub fn node(&self, node_id: &str) -> Option<&NodeRecord> {
        self.nodes.get(node_id)
    }

    pub fn history(&self) -> &[RoundSummary] {
        &self.history
    }

    pub fn aggregations(&self) -> u32 {
        self.aggregations
    }

    pub fn alerts(&self) -> &[String] {
        &self.alerts
    }

    pub fn snapshot(&self) -> StatusSnapshot {
        StatusSnapshot {
            round: self.state.round_index,
            total_rounds: self.config.total_rounds,
            status: self.state.status,
            received: self.state.received.len(),
            expected: self.state.expected_nodes.len(),
            aggregations: self.aggregations,
            deadline_ms: self.state.deadline_ms,
            alerts: self.alerts.clone(),
        }
    }

    /// Drains the event log.
    pub fn take_events(&mut self) -> Vec<FederationEvent> {
        std::mem::take(&mut self.events)
    }

    /// True once since the last call if state changed and should be persisted.
    pub fn take_dirty(&mut self) -> bool {
        std::mem::replace(&mut self.dirty, false)
    }

    fn set_status(&mut self, next: RoundStatus) {
        assert!(
            self.state.status.can_transition_to(next),
            "illegal status transition {:?} -> {:?}",
            self.state.status,
            next
        );
        self.state.status = next;
        self.dirty = true;
    }

    fn approved_ids(&self) -> BTreeSet<String> {
        self.nodes
            .values()
            .filter(|n| n.approval == Approval::Approved)
            .map(|n| n.node_id.clone())
            .collect()
    }

    /// Adds a node to the registry (idempotent for known nodes).
    pub fn register_node(&mut self, node_id: &str, approved: bool) {
        self.nodes.entry(node_id.to_string()).or_insert_with(|| NodeRecord {
            node_id: node_id.to_string(),
            approval: if approved {
                Approval::Approved
            } else {
                Approval::Pending
            },
            liveness: Liveness::Disconnected,
            last_seen_ms: 0,
            contributed_rounds: BTreeSet::new(),
        });
        self.dirty = true;
    }

    pub fn approve(&mut self, node_id: &str) -> Result<(), CoordError> {
        let node = self
            .nodes
            .get_mut(node_id)
            .ok_or_else(|| CoordError::UnknownNode(node_id.into()))?;
        if node.approval == Approval::Evicted {
            return Err(CoordError::Conflict(format!("node `{node_id}` was evicted")));
        }
        if node.approval != Approval::Approved {
            node.approval = Approval::Approved;
            self.events.push(FederationEvent::NodeApproved {
                node_id: node_id.into(),
            });
            self.dirty = true;
        }
        Ok(())
    }

    /// Marks the node evicted. It stays in the current round's expected set
    /// and is dropped when the next round begins.
    pub fn evict(&mut self, node_id: &str) -> Result<(), CoordError> {
        let node = self
            .nodes
            .get_mut(node_id)
            .ok_or_else(|| CoordError::UnknownNode(node_id.into()))?;
        if node.approval != Approval::Evicted {
            node.approval = Approval::Evicted;
            self.events.push(FederationEvent::NodeEvicted {
                node_id: node_id.into(),
            });
            self.dirty = true;
        }
        Ok(())
    }

    /// Whether the node may authenticate: not evicted, or still owed to the current round.
    pub fn may_connect(&self, node_id: &str) -> bool {
        match self.nodes.get(node_id) {
            Some(n) if n.approval != Approval::Evicted => true,
            Some(_) => {
                !self.state.status.is_terminal()
                    && self.state.expected_nodes.contains(node_id)
                    && !self.state.received.contains_key(node_id)
            }
            None => false,
        }
    }

    pub fn set_liveness(&mut self, node_id: &str, liveness: Liveness, now_ms: u64) {
        if let Some(n) = self.nodes.get_mut(node_id) {
            n.liveness = liveness;
            n.last_seen_ms = now_ms;
        }
    }

    pub fn touch(&mut self, node_id: &str, now_ms: u64) {
        if let Some(n) = self.nodes.get_mut(node_id) {
            n.last_seen_ms = now_ms;
        }
    }

    fn round_start_for(&self, node_id: &str) -> RoundStart {
        RoundStart {
            round: self.state.round_index,
            total_rounds: self.config.total_rounds,
            epochs: self.config.epochs_per_round,
            acked_round: self.nodes.get(node_id).map_or(0, NodeRecord::latest_contribution),
            model: self.state.global_model.clone(),
        }
    }

    /// ROUND_START for every expected node that has not yet contributed.
    fn broadcast_round_start(&self) -> Vec<Directive> {
        self.state
            .expected_nodes
            .iter()
            .filter(|id| !self.state.received.contains_key(*id))
            .map(|id| Directive {
                node_id: id.clone(),
                message: Message::RoundStart(self.round_start_for(id)),
            })
            .collect()
    }

    fn broadcast_shutdown(&self, reason: &str) -> Vec<Directive> {
        self.nodes
            .keys()
            .map(|id| Directive {
                node_id: id.clone(),
                message: Message::Shutdown { reason: reason.into() },
            })
            .collect()
    }

    pub fn start(&mut self, initial_model: TensorMap, now_ms: u64) -> Result<Vec<Directive>, CoordError> {
        if self.state.status != RoundStatus::WaitingForNodes {
            return Err(CoordError::AlreadyRunning);
        }
        initial_model.check_finite()?;
        let approved = self.approved_ids();
        if approved.len() < self.config.min_nodes {
            return Err(CoordError::InsufficientNodes {
                approved: approved.len(),
                required: self.config.min_nodes,
            });
        }
        self.state.global_model = initial_model;
        self.begin_round(1, approved, now_ms);
        self.set_status(RoundStatus::InRound);
        Ok(self.broadcast_round_start())
    }

    fn begin_round(&mut self, round: u32, expected: BTreeSet<String>, now_ms: u64) {
        self.state.round_index = round;
        self.state.expected_nodes = expected;
        self.state.received.clear();
        self.state.received_meta.clear();
        self.state.deadline_ms = self.config.round_timeout_ms.map(|t| now_ms + t);
        self.events.push(FederationEvent::RoundStarted {
            round,
            expected: self.state.expected_nodes.iter().cloned().collect(),
        });
        self.dirty = true;
    }

    /// Stores a node's update for the current round. Re-submissions for a
    /// round the node already contributed to are acknowledged as duplicates.
    pub fn submit_update(&mut self, result: &RoundResult, now_ms: u64) -> Result<SubmitOutcome, CoordError> {
        let node_id = result.node_id.as_str();
        let node = self
            .nodes
            .get(node_id)
            .ok_or_else(|| CoordError::UnknownNode(node_id.into()))?;
        if node.contributed_rounds.contains(&result.round) {
            self.events.push(FederationEvent::DuplicateUpdate {
                round: result.round,
                node_id: node_id.into(),
            });
            return Ok(SubmitOutcome::Duplicate);
        }
        let accepting = matches!(self.state.status, RoundStatus::InRound | RoundStatus::Paused);
        if !accepting || result.round != self.state.round_index {
            return Err(CoordError::WrongRound {
                current: self.state.round_index,
                got: result.round,
            });
        }
        if !self.state.expected_nodes.contains(node_id) {
            return Err(CoordError::NotExpected(node_id.into()));
        }
        self.state.global_model.check_same_structure(&result.model)?;
        result.model.check_finite()?;
        let update = WeightedUpdate::new(node_id, result.sample_count, result.model.clone())?;
        self.state.received.insert(node_id.into(), update);
        self.state.received_meta.insert(
            node_id.into(),
            UpdateMeta {
                node_id: node_id.into(),
                sample_count: result.sample_count,
                epochs: result.epochs,
                train_loss: result.train_loss,
                val_loss: result.val_loss,
                eval: result.eval.map(EvalSummary::from),
            },
        );
        let node = self.nodes.get_mut(node_id).expect("checked above");
        node.contributed_rounds.insert(result.round);
        node.last_seen_ms = now_ms;
        self.events.push(FederationEvent::UpdateStored {
            round: result.round,
            node_id: node_id.into(),
            epochs: result.epochs,
            sample_count: result.sample_count,
        });
        self.dirty = true;
        Ok(SubmitOutcome::Stored)
    }

    /// Aggregates when every expected update is in, or when the deadline has
    /// passed and the quorum is met. A missed quorum pauses the federation.
    pub fn try_advance(&mut self, now_ms: u64) -> Vec<Directive> {
        if self.state.status != RoundStatus::InRound {
            return Vec::new();
        }
        let expected = self.state.expected_nodes.len();
        let received = self.state.received.len();
        let complete = received == expected && expected > 0;
        let past_deadline = self.state.deadline_ms.is_some_and(|d| now_ms >= d);
        if !complete {
            if !past_deadline {
                return Vec::new();
            }
            let needed = ((self.config.quorum_fraction * expected as f64) - 1e-9).ceil().max(1.0) as usize;
            if received < needed {
                let reason = format!(
                    "round {}: quorum not met at deadline ({received}/{expected}, need {needed})",
                    self.state.round_index
                );
                self.pause_with(reason);
                return Vec::new();
            }
        }
        self.aggregate_round(now_ms)
    }

    fn aggregate_round(&mut self, now_ms: u64) -> Vec<Directive> {
        self.set_status(RoundStatus::Aggregating);
        let round = self.state.round_index;
        let updates: Vec<WeightedUpdate> = self.state.received.values().cloned().collect();
        let missing: Vec<String> = self
            .state
            .expected_nodes
            .iter()
            .filter(|id| !self.state.received.contains_key(*id))
            .cloned()
            .collect();
        // Structure and finiteness were checked on submission.
        self.state.global_model = tensor::aggregate(&updates).expect("validated updates aggregate");
        self.aggregations += 1;
        for id in &missing {
            if let Some(n) = self.nodes.get_mut(id) {
                n.liveness = Liveness::Stale;
            }
            self.events.push(FederationEvent::NodeStale {
                round,
                node_id: id.clone(),
            });
        }
        let summary = RoundSummary {
            round,
            contributors: self.state.received_meta.values().cloned().collect(),
            missing,
            aggregated_at_ms: now_ms,
        };
        self.events.push(FederationEvent::Aggregated {
            round,
            contributors: summary
                .contributors
                .iter()
                .map(|m| (m.node_id.clone(), m.sample_count, m.epochs))
                .collect(),
        });
        let val = summary.mean_val_loss();
        if val < self.best_val_loss {
            self.best_val_loss = val;
            self.rounds_without_improvement = 0;
        } else {
            self.rounds_without_improvement += 1;
        }
        self.history.push(summary);

        let early_stop = self
            .config
            .early_stop_patience
            .is_some_and(|p| self.rounds_without_improvement >= p);
        if round >= self.config.total_rounds || early_stop {
            self.set_status(RoundStatus::Finished);
            self.events.push(FederationEvent::Finished { round });
            return self.broadcast_shutdown("finished");
        }
        let next: BTreeSet<String> = self.approved_ids();
        self.begin_round(round + 1, next, now_ms);
        self.set_status(RoundStatus::InRound);
        if self.state.expected_nodes.len() < self.config.min_nodes {
            let reason = format!(
                "round {}: only {} approved nodes, need {}",
                round + 1,
                self.state.expected_nodes.len(),
                self.config.min_nodes
            );
            self.pause_with(reason);
            return Vec::new();
        }
        let mut out = self.broadcast_round_start();
        out.extend(
            self.nodes
                .values()
                .filter(|n| n.approval == Approval::Evicted && n.contributed_rounds.contains(&round))
                .map(|n| Directive {
                    node_id: n.node_id.clone(),
                    message: Message::Shutdown {
                        reason: "evicted".into(),
                    },
                }),
        );
        out
    }

    fn pause_with(&mut self, reason: String) {
        self.set_status(RoundStatus::Paused);
        self.events.push(FederationEvent::Paused {
            round: self.state.round_index,
            reason: reason.clone(),
        });
        self.alerts.push(reason);
    }

    pub fn pause(&mut self) -> Result<(), CoordError> {
        if self.state.status != RoundStatus::InRound {
            return Err(CoordError::Conflict(format!(
                "cannot pause while {:?}",
                self.state.status
            )));
        }
        self.pause_with(format!("round {}: paused by operator", self.state.round_index));
        Ok(())
    }

    pub fn resume(&mut self, now_ms: u64) -> Result<Vec<Directive>, CoordError> {
        if self.state.status != RoundStatus::Paused {
            return Err(CoordError::Conflict(format!(
                "cannot resume while {:?}",
                self.state.status
            )));
        }
        // Nodes evicted or approved meanwhile are reflected only at the next boundary.
        if self.state.expected_nodes.is_empty() {
            let approved = self.approved_ids();
            if approved.len() < self.config.min_nodes {
                return Err(CoordError::InsufficientNodes {
                    approved: approved.len(),
                    required: self.config.min_nodes,
                });
            }
            self.state.expected_nodes = approved;
        }
        self.set_status(RoundStatus::InRound);
        self.state.deadline_ms = self.config.round_timeout_ms.map(|t| now_ms + t);
        self.events.push(FederationEvent::Resumed {
            round: self.state.round_index,
        });
        let mut out = self.broadcast_round_start();
        out.extend(self.try_advance(now_ms));
        Ok(out)
    }

    pub fn abort(&mut self) -> Result<Vec<Directive>, CoordError> {
        if !matches!(self.state.status, RoundStatus::InRound | RoundStatus::Paused) {
            return Err(CoordError::Conflict(format!(
                "cannot abort while {:?}",
                self.state.status
            )));
        }
        self.set_status(RoundStatus::Aborted);
        self.events.push(FederationEvent::Aborted {
            round: self.state.round_index,
        });
        Ok(self.broadcast_shutdown("aborted"))
    }

    /// Registers a fresh session for `node_id`, replacing any earlier one.
    pub fn open_session(&mut self, node_id: &str, session_id: [u8; 16]) {
        self.sessions.retain(|_, n| n != node_id);
        self.sessions.insert(session_id, node_id.to_string());
        self.dirty = true;
    }

    pub fn session_node(&self, session_id: &[u8; 16]) -> Option<&str> {
        self.sessions.get(session_id).map(String::as_str)
    }

    /// Decides how an authenticated node continues after (re)connecting.
    ///
    /// `session` is the ticket the node presented; `None` means a fresh join,
    /// for which `new_session` is registered. A known ticket whose cursor
    /// shows the node missed a whole round is answered with `Rejoin`.
    pub fn resume_handshake(
        &mut self,
        node_id: &str,
        session: Option<[u8; 16]>,
        last_acked_round: u32,
        new_session: [u8; 16],
    ) -> ResumeOutcome {
        let acked = self.nodes.get(node_id).map_or(0, NodeRecord::latest_contribution);
        let round = self.state.round_index;
        let session_id = match session {
            None => {
                self.open_session(node_id, new_session);
                new_session
            }
            Some(s) if self.session_node(&s) == Some(node_id) => {
                let cursor = last_acked_round.max(acked);
                let in_progress = !self.state.status.is_terminal() && round > 0;
                if in_progress && cursor + 1 < round && !self.state.received.contains_key(node_id) {
                    return ResumeOutcome {
                        decision: ResumeDecision::Rejoin,
                        session_id: None,
                        round,
                        acked_round: acked,
                        round_start: None,
                    };
                }
                s
            }
            Some(_) => {
                return ResumeOutcome {
                    decision: ResumeDecision::Rejoin,
                    session_id: None,
                    round,
                    acked_round: acked,
                    round_start: None,
                }
            }
        };
        let (decision, round_start) = if self.state.status.is_terminal() {
            (ResumeDecision::Done, None)
        } else if self.state.status == RoundStatus::InRound
            && self.state.expected_nodes.contains(node_id)
            && !self.state.received.contains_key(node_id)
        {
            (ResumeDecision::Deliver, Some(self.round_start_for(node_id)))
        } else {
            (ResumeDecision::Wait, None)
        };
        ResumeOutcome {
            decision,
            session_id: Some(session_id),
            round,
            acked_round: acked,
            round_start,
        }
    }

    pub fn round_summary(&self, round: u32) -> Option<&RoundSummary> {
        self.history.iter().find(|s| s.round == round)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCK1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: FederationConfig,
    round_index: u32,
    status: RoundStatus,
    deadline_ms: Option<u64>,
    expected_nodes: Vec<String>,
    received: Vec<UpdateMeta>,
    nodes: Vec<NodeRecord>,
    sessions: Vec<(String, String)>,
    history: Vec<RoundSummary>,
    alerts: Vec<String>,
    aggregations: u32,
    best_val_loss: Option<f64>,
    rounds_without_improvement: u32,
}

fn put_block(out: &mut Vec<u8>, block: &[u8]) {
    out.extend_from_slice(&(block.len() as u32).to_be_bytes());
    out.extend_from_slice(block);
}

impl Coordinator {
    /// `FCK1 | manifest | global model | received updates | CRC32`.
    ///
    /// Every block is `u32 BE length | bytes`; the manifest is JSON, models
    /// are `FTM1`. The trailing big-endian CRC32 covers everything before it.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            config: self.config.clone(),
            round_index: self.state.round_index,
            status: self.state.status,
            deadline_ms: self.state.deadline_ms,
            expected_nodes: self.state.expected_nodes.iter().cloned().collect(),
            received: self.state.received_meta.values().cloned().collect(),
            nodes: self.nodes.values().cloned().collect(),
            sessions: self.sessions.iter().map(|(s, n)| (hex::encode(s), n.clone())).collect(),
            history: self.history.clone(),
            alerts: self.alerts.clone(),
            aggregations: self.aggregations,
            best_val_loss: self.best_val_loss.is_finite().then_some(self.best_val_loss),
            rounds_without_improvement: self.rounds_without_improvement,
        };
        let mut out = CHECKPOINT_MAGIC.to_vec();
        put_block(&mut out, &serde_json::to_vec(&manifest).expect("manifest serializes"));
        put_block(&mut out, &tensor::serialize(&self.state.global_model));
        out.extend_from_slice(&(self.state.received.len() as u32).to_be_bytes());
        for meta in &manifest.received {
            put_block(
                &mut out,
                &tensor::serialize(&self.state.received[&meta.node_id].weights),
            );
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, CoordError> {
        let corrupt = |m: &str| CoordError::CorruptCheckpoint(m.into());
        if bytes.len() < 8 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_be_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut pos = 4;
        let take_u32 = |pos: &mut usize| -> Result<usize, CoordError> {
            let b = body.get(*pos..*pos + 4).ok_or_else(|| corrupt("truncated"))?;
            *pos += 4;
            Ok(u32::from_be_bytes(b.try_into().unwrap()) as usize)
        };
        let block = |pos: &mut usize| -> Result<&[u8], CoordError> {
            let len = take_u32(pos)?;
            let b = body.get(*pos..*pos + len).ok_or_else(|| corrupt("truncated block"))?;
            *pos += len;
            Ok(b)
        };
        let manifest: Manifest =
            serde_json::from_slice(block(&mut pos)?).map_err(|e| CoordError::CorruptCheckpoint(e.to_string()))?;
        let global = tensor::deserialize(block(&mut pos)?).map_err(|e| CoordError::CorruptCheckpoint(e.to_string()))?;
        let count = {
            let b = body.get(pos..pos + 4).ok_or_else(|| corrupt("truncated"))?;
            pos += 4;
            u32::from_be_bytes(b.try_into().unwrap()) as usize
        };
        if count != manifest.received.len() {
            return Err(corrupt("update count disagrees with manifest"));
        }
        let mut received = BTreeMap::new();
        let mut received_meta = BTreeMap::new();
        for meta in manifest.received {
            let w = tensor::deserialize(block(&mut pos)?).map_err(|e| CoordError::CorruptCheckpoint(e.to_string()))?;
            let update = WeightedUpdate::new(meta.node_id.clone(), meta.sample_count, w)
                .map_err(|e| CoordError::CorruptCheckpoint(e.to_string()))?;
            received.insert(meta.node_id.clone(), update);
            received_meta.insert(meta.node_id.clone(), meta);
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let mut sessions = BTreeMap::new();
        for (s, n) in manifest.sessions {
            let id: [u8; 16] = hex::decode(&s)
                .ok()
                .and_then(|v| v.try_into().ok())
                .ok_or_else(|| corrupt("bad session id"))?;
            sessions.insert(id, n);
        }
        manifest.config.validate()?;
        Ok(Self {
            config: manifest.config,
            state: RoundState {
                round_index: manifest.round_index,
                global_model: global,
                expected_nodes: manifest.expected_nodes.into_iter().collect(),
                received,
                received_meta,
                status: manifest.status,
                deadline_ms: manifest.deadline_ms,
            },
            nodes: manifest.nodes.into_iter().map(|n| (n.node_id.clone(), n)).collect(),
            sessions,
            history: manifest.history,
            alerts: manifest.alerts,
            events: Vec::new(),
            aggregations: manifest.aggregations,
            best_val_loss: manifest.best_val_loss.unwrap_or(f64::INFINITY),
            rounds_without_improvement: manifest.rounds_without_improvement,
            dirty: false,
        })
    }

    /// Atomically replaces `path` (write to a sibling temp file, then rename).
    pub fn checkpoint_save(&self, path: &Path) -> Result<(), CoordError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.checkpoint_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn checkpoint_load(path: &Path) -> Result<Self, CoordError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn model(v: f32) -> TensorMap {
        TensorMap::from_entries(vec![
            Tensor::new("w0", vec![1, 1], vec![v]).unwrap(),
            Tensor::new("b0", vec![1], vec![0.0]).unwrap(),
        ])
        .unwrap()
    }

    fn result(node: &str, round: u32, v: f32, n: u64) -> RoundResult {
        RoundResult {
            round,
            node_id: node.into(),
            sample_count: n,
            epochs: 10,
            train_loss: 0.5,
            val_loss: 0.5,
            eval: None,
            model: model(v),
        }
    }

    fn two_node(config: FederationConfig) -> Coordinator {
        let mut c = Coordinator::new(config).unwrap();
        c.register_node("a", true);
        c.register_node("b", true);
        c
    }

    #[test]
    fn start_requires_min_nodes() {
        let mut c = Coordinator::new(FederationConfig {
            min_nodes: 2,
            ..Default::default()
        })
        .unwrap();
        c.register_node("a", true);
        c.register_node("b", false);
        assert!(matches!(
            c.start(model(0.0), 0),
            Err(CoordError::InsufficientNodes {
                approved: 1,
                required: 2
            })
        ));
        c.approve("b").unwrap();
        let out = c.start(model(0.0), 0).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].message, out[1].message);
        assert_eq!(c.status(), RoundStatus::InRound);
        assert!(matches!(c.start(model(0.0), 0), Err(CoordError::AlreadyRunning)));
    }

    #[test]
    fn submit_rules() {
        let mut c = two_node(FederationConfig::default());
        c.start(model(0.0), 0).unwrap();
        assert_eq!(
            c.submit_update(&result("a", 1, 1.0, 3), 1).unwrap(),
            SubmitOutcome::Stored
        );
        assert_eq!(c.state().received.len(), 1);
        assert_eq!(
            c.submit_update(&result("a", 1, 1.0, 3), 2).unwrap(),
            SubmitOutcome::Duplicate
        );
        assert_eq!(c.state().received.len(), 1);
        assert!(matches!(
            c.submit_update(&result("b", 3, 1.0, 3), 2),
            Err(CoordError::WrongRound { .. })
        ));
        let mut bad = result("b", 1, 1.0, 3);
        bad.model = TensorMap::from_entries(vec![Tensor::new("w0", vec![2, 1], vec![1.0, 2.0]).unwrap()]).unwrap();
        assert!(matches!(
            c.submit_update(&bad, 2),
            Err(CoordError::StructureMismatch(_))
        ));
        assert!(matches!(
            c.submit_update(&result("zed", 1, 1.0, 3), 2),
            Err(CoordError::UnknownNode(_))
        ));
    }

    #[test]
    fn full_round_aggregates_everything() {
        let mut c = two_node(FederationConfig {
            total_rounds: 2,
            ..Default::default()
        });
        c.start(model(0.0), 0).unwrap();
        c.submit_update(&result("a", 1, 2.0, 1), 1).unwrap();
        assert!(c.try_advance(1).is_empty());
        c.submit_update(&result("b", 1, 4.0, 1), 1).unwrap();
        let out = c.try_advance(2);
        assert_eq!(c.state().round_index, 2);
        assert_eq!(c.global_model().get("w0").unwrap().data, vec![3.0]);
        assert!(out
            .iter()
            .all(|d| matches!(&d.message, Message::RoundStart(rs) if rs.round == 2 && rs.acked_round == 1)));
        assert!(matches!(
            c.submit_update(&result("a", 1, 9.0, 1), 3),
            Ok(SubmitOutcome::Duplicate)
        ));
        c.submit_update(&result("a", 2, 2.0, 1), 3).unwrap();
        c.submit_update(&result("b", 2, 2.0, 1), 3).unwrap();
        let out = c.try_advance(4);
        assert_eq!(c.status(), RoundStatus::Finished);
        assert!(out.iter().all(|d| matches!(d.message, Message::Shutdown { .. })));
        assert_eq!(c.aggregations(), 2);
    }

    #[test]
    fn strict_quorum_pauses_at_deadline() {
        let mut c = two_node(FederationConfig {
            round_timeout_ms: Some(100),
            ..Default::default()
        });
        c.start(model(0.0), 0).unwrap();
        c.submit_update(&result("a", 1, 1.0, 5), 10).unwrap();
        assert!(c.try_advance(50).is_empty());
        assert_eq!(c.status(), RoundStatus::InRound);
        c.try_advance(100);
        assert_eq!(c.status(), RoundStatus::Paused);
        assert_eq!(c.alerts().len(), 1);
    }

    #[test]
    fn half_quorum_aggregates_singleton() {
        let mut c = two_node(FederationConfig {
            round_timeout_ms: Some(100),
            quorum_fraction: 0.5,
            ..Default::default()
        });
        c.start(model(0.0), 0).unwrap();
        let r = result("a", 1, 0.123, 5);
        c.submit_update(&r, 10).unwrap();
        c.try_advance(100);
        assert!(c.global_model().bit_eq(&r.model));
        assert_eq!(c.state().round_index, 2);
        assert_eq!(c.node("b").unwrap().liveness, Liveness::Stale);
        assert_eq!(c.history()[0].missing, vec!["b".to_string()]);
    }

    #[test]
    fn approval_waits_for_round_boundary() {
        let mut c = two_node(FederationConfig::default());
        c.register_node("x", false);
        c.start(model(0.0), 0).unwrap();
        c.approve("x").unwrap();
        assert!(!c.state().expected_nodes.contains("x"));
        assert!(matches!(
            c.submit_update(&result("x", 1, 1.0, 1), 1),
            Err(CoordError::NotExpected(_))
        ));
        c.submit_update(&result("a", 1, 1.0, 1), 1).unwrap();
        c.submit_update(&result("b", 1, 1.0, 1), 1).unwrap();
        c.try_advance(2);
        assert!(c.state().expected_nodes.contains("x"));
    }

    #[test]
    fn eviction_waits_for_round_boundary() {
        let mut c = two_node(FederationConfig::default());
        c.start(model(0.0), 0).unwrap();
        c.evict("b").unwrap();
        assert!(c.state().expected_nodes.contains("b"));
        assert!(c.may_connect("b"));
        c.submit_update(&result("a", 1, 1.0, 1), 1).unwrap();
        c.submit_update(&result("b", 1, 1.0, 1), 1).unwrap();
        let out = c.try_advance(2);
        assert!(!c.state().expected_nodes.contains("b"));
        assert!(!c.may_connect("b"));
        assert!(out
            .iter()
            .any(|d| d.node_id == "b" && matches!(d.message, Message::Shutdown { .. })));
    }

    #[test]
    fn pause_resume_abort() {
        let mut c = two_node(FederationConfig::default());
        assert!(c.pause().is_err());
        assert!(c.abort().is_err());
        c.start(model(0.0), 0).unwrap();
        c.pause().unwrap();
        assert_eq!(c.status(), RoundStatus::Paused);
        c.submit_update(&result("a", 1, 1.0, 1), 1).unwrap();
        c.submit_update(&result("b", 1, 1.0, 1), 1).unwrap();
        assert!(c.try_advance(2).is_empty());
        assert_eq!(c.state().round_index, 1);
        let out = c.resume(3).unwrap();
        assert_eq!(c.state().round_index, 2);
        assert!(out
            .iter()
            .all(|d| matches!(&d.message, Message::RoundStart(rs) if rs.round == 2)));
        c.abort().unwrap();
        assert_eq!(c.status(), RoundStatus::Aborted);
        assert!(c.resume(4).is_err());
    }

    #[test]
    fn resume_decisions() {
        let mut c = two_node(FederationConfig::default());
        c.start(model(0.0), 0).unwrap();
        let fresh = c.resume_handshake("a", None, 0, [1; 16]);
        assert_eq!(fresh.decision, ResumeDecision::Deliver);
        assert_eq!(fresh.session_id, Some([1; 16]));
        assert_eq!(fresh.round_start.as_ref().unwrap().round, 1);

        c.submit_update(&result("a", 1, 1.0, 1), 1).unwrap();
        let after = c.resume_handshake("a", Some([1; 16]), 0, [9; 16]);
        assert_eq!(after.decision, ResumeDecision::Wait);
        assert_eq!(after.acked_round, 1);

        let unknown = c.resume_handshake("a", Some([7; 16]), 0, [9; 16]);
        assert_eq!(unknown.decision, ResumeDecision::Rejoin);

        // A ticket cannot be used by another node.
        let stolen = c.resume_handshake("b", Some([1; 16]), 0, [9; 16]);
        assert_eq!(stolen.decision, ResumeDecision::Rejoin);
    }

    #[test]
    fn stale_ticket_is_rejoined() {
        let mut c = two_node(FederationConfig {
            round_timeout_ms: Some(10),
            quorum_fraction: 0.5,
            ..Default::default()
        });
        c.start(model(0.0), 0).unwrap();
        c.resume_handshake("b", None, 0, [2; 16]);
        for round in 1..=2 {
            c.submit_update(&result("a", round, 1.0, 1), round as u64 * 10).unwrap();
            c.try_advance(round as u64 * 10 + 10);
        }
        assert_eq!(c.state().round_index, 3);
        assert_eq!(
            c.resume_handshake("b", Some([2; 16]), 0, [3; 16]).decision,
            ResumeDecision::Rejoin
        );
        assert_eq!(
            c.resume_handshake("b", None, 0, [3; 16]).decision,
            ResumeDecision::Deliver
        );
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut c = two_node(FederationConfig::default());
        c.start(model(0.25), 0).unwrap();
        c.open_session("a", [4; 16]);
        c.submit_update(&result("a", 1, 1.5, 7), 1).unwrap();
        let bytes = c.checkpoint_bytes();
        let back = Coordinator::from_checkpoint_bytes(&bytes).unwrap();
        assert!(back.global_model().bit_eq(c.global_model()));
        assert_eq!(back.state(), c.state());
        assert_eq!(back.nodes(), c.nodes());
        assert_eq!(back.session_node(&[4; 16]), Some("a"));
        for i in [0, 5, bytes.len() / 2, bytes.len() - 1] {
            let mut flipped = bytes.clone();
            flipped[i] ^= 0x40;
            assert!(matches!(
                Coordinator::from_checkpoint_bytes(&flipped),
                Err(CoordError::CorruptCheckpoint(_))
            ));
        }
        assert!(Coordinator::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn checkpoint_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut c = two_node(FederationConfig::default());
        c.start(model(0.5), 0).unwrap();
        c.checkpoint_save(&path).unwrap();
        let back = Coordinator::checkpoint_load(&path).unwrap();
        assert_eq!(back.state(), c.state());
        assert!(matches!(
            Coordinator::checkpoint_load(&dir.path().join("none")),
            Err(CoordError::Io(_))
        ));
    }

    #[test]
    fn transitions_table() {
        use RoundStatus::*;
        let all = [WaitingForNodes, InRound, Aggregating, Paused, Finished, Aborted];
        let allowed: Vec<(RoundStatus, RoundStatus)> = all
            .iter()
            .flat_map(|&a| all.iter().map(move |&b| (a, b)))
            .filter(|(a, b)| a.can_transition_to(*b))
            .collect();
        assert_eq!(allowed.len(), 8);
        assert!(!Finished.can_transition_to(InRound));
        assert!(!Paused.can_transition_to(Aggregating));
    }

    #[test]
    fn early_stop_when_enabled() {
        let mut c = Coordinator::new(FederationConfig {
            early_stop_patience: Some(2),
            ..Default::default()
        })
        .unwrap();
        c.register_node("a", true);
        c.start(model(0.0), 0).unwrap();
        for round in 1..=3 {
            c.submit_update(&result("a", round, 1.0, 1), 0).unwrap();
            c.try_advance(0);
        }
        assert_eq!(c.status(), RoundStatus::Finished);
        assert_eq!(c.aggregations(), 3);
    }
}
