//! The site-side participant.
//!
//! [`NodeAgent`] is a sans-IO state machine: feed it connection events and
//! received messages, send what it returns. Trainer state is split into a
//! committed part (after the last round the coordinator acknowledged) and at
//! most one pending round. A retried round restarts from the committed state
//! or resends the pending result, so faults never change the numbers.
//!
//! [`run_agent`] drives it over TCP with reconnection and on-disk persistence.

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::datakit::{self, DataError, SiteDataset, SiteProfile, SplitRatios};
use crate::metrics;
use crate::proto::{self, FrameDecoder, Message, NodeEval, ResumeDecision, RoundResult, RoundStart, SessionTicket};
use crate::trainer::{AdamTrainer, LocalTrainer, TrainError, TrainerConfig};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("config: {0}")]
    Config(String),
    #[error("authentication rejected: {0}")]
    AuthRejected(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconnectPolicy {
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
    /// Each delay is shortened by up to this fraction, at random.
    pub jitter: f64,
}

impl Default for ReconnectPolicy {
    fn default() -> Self {
        Self {
            initial_backoff_ms: 1_000,
            multiplier: 2.0,
            max_backoff_ms: 60_000,
            jitter: 0.1,
        }
    }
}

impl ReconnectPolicy {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.initial_backoff_ms == 0 || self.max_backoff_ms < self.initial_backoff_ms {
            return Err(AgentError::Config(
                "backoff needs 0 < initial_backoff_ms <= max_backoff_ms".into(),
            ));
        }
        if !(self.multiplier >= 1.0 && self.multiplier.is_finite()) {
            return Err(AgentError::Config("backoff multiplier must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(AgentError::Config("backoff jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Capped exponential backoff. Delays never decrease within one outage.
#[derive(Debug, Clone)]
pub struct Backoff {
    policy: ReconnectPolicy,
    base_ms: Option<u64>,
    last_ms: u64,
    rng: ChaCha8Rng,
}

impl Backoff {
    pub fn new(policy: ReconnectPolicy, seed: u64) -> Self {
        Self {
            policy,
            base_ms: None,
            last_ms: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_delay_ms(&mut self) -> u64 {
        let p = &self.policy;
        let base = match self.base_ms {
            None => p.initial_backoff_ms,
            Some(b) => ((b as f64 * p.multiplier) as u64).min(p.max_backoff_ms),
        };
        self.base_ms = Some(base);
        let shrink = if p.jitter > 0.0 {
            self.rng.random_range(0.0..p.jitter)
        } else {
            0.0
        };
        let jittered = (base as f64 * (1.0 - shrink)) as u64;
        self.last_ms = jittered.max(self.last_ms).min(p.max_backoff_ms);
        self.last_ms
    }

    /// Call after a successful authentication.
    pub fn reset(&mut self) {
        self.base_ms = None;
        self.last_ms = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSource {
    pub input_dim: usize,
    pub profile: SiteProfile,
}

/// Node configuration file (TOML).
///
/// ```toml
/// node_id = "ghana"
/// server_address = "10.0.0.5:7700"
/// token_file = "/etc/fedorch/token"      # or token_env = "FEDORCH_NODE_TOKEN"
/// dataset_path = "/data/ghana.csv"       # or a [synthetic] table
/// state_dir = "/var/lib/fedorch"
///
/// [trainer]
/// learning_rate = 0.01
///
/// [reconnect]
/// max_backoff_ms = 60000
/// ```
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node_id: String,
    pub server_address: String,
    pub token_env: Option<String>,
    pub token_file: Option<PathBuf>,
    pub dataset_path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSource>,
    #[serde(default)]
    pub split_seed: u64,
    pub state_dir: Option<PathBuf>,
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_interval_ms: u64,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub reconnect: ReconnectPolicy,
}

fn default_heartbeat_ms() -> u64 {
    10_000
}

impl NodeConfig {
    pub fn parse(text: &str) -> Result<Self, AgentError> {
        let config: NodeConfig = toml::from_str(text).map_err(|e| AgentError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if self.node_id.is_empty() || self.node_id.contains(['\n', '=']) {
            return Err(AgentError::Config(
                "node_id must be non-empty without `=` or newlines".into(),
            ));
        }
        if self.dataset_path.is_some() == self.synthetic.is_some() {
            return Err(AgentError::Config(
                "set exactly one of dataset_path and [synthetic]".into(),
            ));
        }
        if self.token_env.is_some() == self.token_file.is_some() {
            return Err(AgentError::Config("set exactly one of token_env and token_file".into()));
        }
        if self.heartbeat_interval_ms == 0 {
            return Err(AgentError::Config("heartbeat_interval_ms must be positive".into()));
        }
        if let Some(s) = &self.synthetic {
            s.profile.validate()?;
        }
        self.reconnect.validate()?;
        self.trainer.validate().map_err(|e| AgentError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn load_token(&self) -> Result<Vec<u8>, AgentError> {
        load_secret(self.token_env.as_deref(), self.token_file.as_deref())
    }

    pub fn load_dataset(&self) -> Result<SiteDataset, AgentError> {
        let mut data = match (&self.dataset_path, &self.synthetic) {
            (Some(path), _) => datakit::load_csv_with(path, self.split_seed, SplitRatios::STANDARD)?,
            (_, Some(s)) => datakit::generate_site(&s.profile, s.input_dim)?,
            _ => unreachable!("validated"),
        };
        data.site_id = self.node_id.clone();
        Ok(data)
    }
}

/// Reads a shared secret from an environment variable or a private file.
/// Exactly one source must be given; trailing newlines are dropped.
pub fn load_secret(env_var: Option<&str>, file: Option<&Path>) -> Result<Vec<u8>, AgentError> {
    let raw = match (env_var, file) {
        (Some(var), None) => {
            std::env::var(var).map_err(|_| AgentError::Config(format!("environment variable {var} is not set")))?
        }
        (None, Some(path)) => {
            check_private(path)?;
            std::fs::read_to_string(path)?
        }
        _ => return Err(AgentError::Config("set exactly one of token_env and token_file".into())),
    };
    let token = raw.trim_end_matches(['\n', '\r']);
    if token.is_empty() {
        return Err(AgentError::Config("token is empty".into()));
    }
    Ok(token.as_bytes().to_vec())
}

#[cfg(unix)]
fn check_private(path: &Path) -> Result<(), AgentError> {
    use std::os::unix::fs::PermissionsExt;
    let mode = std::fs::metadata(path)?.permissions().mode();
    if mode & 0o077 != 0 {
        return Err(AgentError::Config(format!(
            "token file {} is accessible to group or others (mode {:o}); run chmod 600",
            path.display(),
            mode & 0o777
        )));
    }
    Ok(())
}

#[cfg(not(unix))]
fn check_private(_path: &Path) -> Result<(), AgentError> {
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    round: u32,
    state: Vec<u8>,
    result: RoundResult,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentPhase {
    Disconnected,
    AwaitChallenge,
    AwaitJoin,
    AwaitResume,
    Idle,
    AwaitAck { round: u32 },
    Finished { reason: String },
    Rejected { reason: String },
}

/// Messages to send plus `key=value` log lines.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Step {
    pub send: Vec<Message>,
    pub log: Vec<String>,
}

/// Everything an agent persists across process restarts.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSnapshot {
    pub ticket: Option<SessionTicket>,
    pub committed_round: u32,
    pub committed_state: Vec<u8>,
    pub pending: Option<(u32, Vec<u8>, RoundResult)>,
}

pub struct NodeAgent {
    node_id: String,
    token: Vec<u8>,
    data: SiteDataset,
    trainer: Box<dyn LocalTrainer>,
    committed_round: u32,
    committed_state: Vec<u8>,
    pending: Option<Pending>,
    ticket: Option<SessionTicket>,
    phase: AgentPhase,
    rounds_trained: u32,
    dirty: bool,
}

impl NodeAgent {
    pub fn new(node_id: impl Into<String>, token: Vec<u8>, data: SiteDataset, trainer: Box<dyn LocalTrainer>) -> Self {
        let committed_state = trainer.save_state();
        Self {
            node_id: node_id.into(),
            token,
            data,
            trainer,
            committed_round: 0,
            committed_state,
            pending: None,
            ticket: None,
            phase: AgentPhase::Disconnected,
            rounds_trained: 0,
            dirty: false,
        }
    }

    pub fn from_config(config: &NodeConfig) -> Result<Self, AgentError> {
        let data = config.load_dataset()?;
        let token = config.load_token()?;
        let trainer = AdamTrainer::new(config.trainer.clone())?;
        Ok(Self::new(config.node_id.clone(), token, data, Box::new(trainer)))
    }

    pub fn restore(&mut self, snapshot: AgentSnapshot) -> Result<(), AgentError> {
        self.trainer.restore_state(&snapshot.committed_state)?;
        self.committed_state = snapshot.committed_state;
        self.committed_round = snapshot.committed_round;
        self.ticket = snapshot.ticket;
        self.pending = snapshot
            .pending
            .map(|(round, state, result)| Pending { round, state, result });
        Ok(())
    }

    pub fn snapshot(&self) -> AgentSnapshot {
        AgentSnapshot {
            ticket: self.ticket.clone(),
            committed_round: self.committed_round,
            committed_state: self.committed_state.clone(),
            pending: self
                .pending
                .as_ref()
                .map(|p| (p.round, p.state.clone(), p.result.clone())),
        }
    }

    /// True once after each change that should be persisted.
    pub fn take_dirty(&mut self) -> bool {
        std::mem::replace(&mut self.dirty, false)
    }

    pub fn node_id(&self) -> &str {
        &self.node_id
    }

    pub fn phase(&self) -> &AgentPhase {
        &self.phase
    }

    pub fn data(&self) -> &SiteDataset {
        &self.data
    }

    pub fn ticket(&self) -> Option<&SessionTicket> {
        self.ticket.as_ref()
    }

    pub fn committed_round(&self) -> u32 {
        self.committed_round
    }

    /// Number of `train` calls made, retries included.
    pub fn rounds_trained(&self) -> u32 {
        self.rounds_trained
    }

    pub fn is_done(&self) -> bool {
        matches!(self.phase, AgentPhase::Finished { .. } | AgentPhase::Rejected { .. })
    }

    pub fn on_connected(&mut self) -> Step {
        self.phase = AgentPhase::AwaitChallenge;
        Step {
            send: vec![Message::Hello {
                node_id: self.node_id.clone(),
            }],
            log: vec![format!("event=connected node={}", self.node_id)],
        }
    }

    pub fn on_disconnected(&mut self) -> Step {
        if !self.is_done() {
            self.phase = AgentPhase::Disconnected;
        }
        Step {
            send: Vec::new(),
            log: vec![format!("event=disconnected node={}", self.node_id)],
        }
    }

    fn commit_through(&mut self, acked_round: u32) {
        if let Some(p) = &self.pending {
            if p.round <= acked_round {
                let p = self.pending.take().expect("checked");
                self.committed_state = p.state;
                self.committed_round = p.round;
                self.dirty = true;
            }
        }
        if let Some(t) = &mut self.ticket {
            if acked_round > t.last_acked_round {
                t.ack(acked_round);
                self.dirty = true;
            }
        }
    }

    fn resume_request(&self) -> Message {
        Message::ResumeReq {
            session_id: self.ticket.as_ref().map(|t| t.session_id),
            last_acked_round: self.ticket.as_ref().map_or(0, |t| t.last_acked_round),
        }
    }

    pub fn on_message(&mut self, message: Message) -> Step {
        let mut step = Step::default();
        match message {
            Message::Challenge { nonce } if self.phase == AgentPhase::AwaitChallenge => {
                let proof = proto::prove(&self.token, &nonce, &self.node_id);
                step.send.push(Message::AuthProof {
                    node_id: self.node_id.clone(),
                    proof,
                });
                self.phase = AgentPhase::AwaitJoin;
            }
            Message::JoinAck { approved, .. } if self.phase == AgentPhase::AwaitJoin => {
                step.log
                    .push(format!("event=authenticated node={} approved={approved}", self.node_id));
                step.send.push(self.resume_request());
                self.phase = AgentPhase::AwaitResume;
            }
            Message::ResumeState {
                decision,
                session_id,
                round,
                acked_round,
            } => {
                step.log.push(format!(
                    "event=resume node={} decision={} round={round} acked_round={acked_round}",
                    self.node_id,
                    decision.as_str()
                ));
                if decision == ResumeDecision::Rejoin {
                    self.ticket = None;
                    self.dirty = true;
                    step.send.push(self.resume_request());
                    return step;
                }
                if let Some(sid) = session_id {
                    if self.ticket.as_ref().map(|t| t.session_id) != Some(sid) {
                        self.ticket = Some(SessionTicket {
                            session_id: sid,
                            node_id: self.node_id.clone(),
                            last_acked_round: 0,
                        });
                        self.dirty = true;
                    }
                }
                self.commit_through(acked_round);
                self.phase = match decision {
                    ResumeDecision::Done => AgentPhase::Finished {
                        reason: "finished".into(),
                    },
                    _ => AgentPhase::Idle,
                };
            }
            Message::RoundStart(rs) => match self.phase {
                AgentPhase::Idle | AgentPhase::AwaitAck { .. } | AgentPhase::AwaitResume => {
                    self.commit_through(rs.acked_round);
                    match self.local_round(&rs) {
                        Ok((result, fresh)) => {
                            step.log.push(format!(
                                "event=submit node={} round={} epochs={} samples={} train_loss={:.6} val_loss={:.6} retrained={fresh}",
                                self.node_id, result.round, result.epochs, result.sample_count, result.train_loss, result.val_loss
                            ));
                            self.phase = AgentPhase::AwaitAck { round: rs.round };
                            step.send.push(Message::RoundResult(result));
                        }
                        Err(e) => {
                            step.log.push(format!(
                                "event=round_failed node={} round={} error=\"{e}\"",
                                self.node_id, rs.round
                            ));
                        }
                    }
                }
                _ => step
                    .log
                    .push(format!("event=ignored node={} message=ROUND_START", self.node_id)),
            },
            Message::RoundAck { round } => {
                self.commit_through(round);
                step.log
                    .push(format!("event=acked node={} round={round}", self.node_id));
                if self.phase == (AgentPhase::AwaitAck { round }) {
                    self.phase = AgentPhase::Idle;
                }
            }
            Message::Shutdown { reason } => {
                step.log
                    .push(format!("event=shutdown node={} reason={reason}", self.node_id));
                self.phase = AgentPhase::Finished { reason };
            }
            Message::Error { code, message } => {
                step.log.push(format!(
                    "event=server_error node={} code={code} message=\"{message}\"",
                    self.node_id
                ));
                match code.as_str() {
                    "auth_failed" | "unknown_node" | "evicted" => {
                        self.phase = AgentPhase::Rejected {
                            reason: format!("{code}: {message}"),
                        };
                    }
                    "wrong_round" | "not_expected" => {
                        // The round closed without us; that update will never count.
                        if self.pending.take().is_some() {
                            self.dirty = true;
                        }
                        if matches!(self.phase, AgentPhase::AwaitAck { .. }) {
                            self.phase = AgentPhase::Idle;
                        }
                    }
                    _ => {}
                }
            }
            Message::Heartbeat => {}
            other => step.log.push(format!(
                "event=ignored node={} message={:?}",
                self.node_id,
                other.msg_type()
            )),
        }
        step
    }

    /// Produces this node's result for `rs`: the pending one if this round was
    /// already trained, otherwise a fresh run from the committed state.
    /// Returns whether training actually ran.
    fn local_round(&mut self, rs: &RoundStart) -> Result<(RoundResult, bool), AgentError> {
        if let Some(p) = &self.pending {
            if p.round == rs.round {
                return Ok((p.result.clone(), false));
            }
        }
        let result = self.train_round(rs)?;
        Ok((result, true))
    }

    fn train_round(&mut self, rs: &RoundStart) -> Result<RoundResult, AgentError> {
        rs.model.check_finite().map_err(TrainError::from)?;
        self.trainer.restore_state(&self.committed_state)?;
        let eval = {
            let trainer = &self.trainer;
            metrics::evaluate_with(&self.node_id, &rs.model, &self.data, &|w, x| trainer.predict(w, x))
                .ok()
                .map(|r| NodeEval {
                    counts: r.counts,
                    roc_auc: r.roc_auc,
                })
        };
        let report = self.trainer.train(&rs.model, &self.data, rs.epochs as usize)?;
        self.rounds_trained += 1;
        let result = RoundResult {
            round: rs.round,
            node_id: self.node_id.clone(),
            sample_count: report.sample_count as u64,
            epochs: report.epochs_run as u32,
            train_loss: report.final_train_loss,
            val_loss: report.final_val_loss,
            eval,
            model: report.weights,
        };
        self.pending = Some(Pending {
            round: rs.round,
            state: self.trainer.save_state(),
            result: result.clone(),
        });
        self.dirty = true;
        Ok(result)
    }
}

/// Files under the agent's state directory.
pub struct StateFiles {
    dir: PathBuf,
}

impl StateFiles {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        let tmp = self.path(&format!("{name}.tmp"));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, self.path(name))
    }

    pub fn save(&self, snap: &AgentSnapshot) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        match &snap.ticket {
            Some(t) => self.write("ticket", t.to_text().as_bytes())?,
            None => remove_if_exists(&self.path("ticket"))?,
        }
        self.write("committed.state", &snap.committed_state)?;
        self.write("committed.round", snap.committed_round.to_string().as_bytes())?;
        match &snap.pending {
            Some((round, state, result)) => {
                let msg = Message::RoundResult(result.clone())
                    .encode()
                    .map_err(std::io::Error::other)?;
                self.write("pending.state", state)?;
                self.write("pending.msg", &msg)?;
                self.write("pending.round", round.to_string().as_bytes())?;
            }
            None => remove_if_exists(&self.path("pending.round"))?,
        }
        Ok(())
    }

    /// `None` when nothing has been saved yet.
    pub fn load(&self) -> Result<Option<AgentSnapshot>, AgentError> {
        let committed = self.path("committed.state");
        if !committed.exists() {
            return Ok(None);
        }
        let bad = |what: &str| AgentError::Config(format!("corrupt {what} in {}", self.dir.display()));
        let ticket = match std::fs::read_to_string(self.path("ticket")) {
            Ok(text) => Some(SessionTicket::from_text(&text).ok_or_else(|| bad("ticket"))?),
            Err(e) if e.kind() == ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let committed_round = std::fs::read_to_string(self.path("committed.round"))?
            .trim()
            .parse()
            .map_err(|_| bad("committed.round"))?;
        let pending = match std::fs::read_to_string(self.path("pending.round")) {
            Ok(r) => {
                let round: u32 = r.trim().parse().map_err(|_| bad("pending.round"))?;
                let state = std::fs::read(self.path("pending.state"))?;
                let msg = Message::decode(&std::fs::read(self.path("pending.msg"))?).map_err(|_| bad("pending.msg"))?;
                let Message::RoundResult(result) = msg else {
                    return Err(bad("pending.msg"));
                };
                Some((round, state, result))
            }
            Err(e) if e.kind() == ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        Ok(Some(AgentSnapshot {
            ticket,
            committed_round,
            committed_state: std::fs::read(committed)?,
            pending,
        }))
    }
}

fn remove_if_exists(path: &Path) -> std::io::Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AgentExit {
    Finished(String),
}

fn log_lines(lines: &[String]) {
    for l in lines {
        eprintln!("{l}");
    }
}

/// Runs the agent until the federation finishes. Network failures are
/// retried forever with backoff; configuration and authentication errors
/// are returned.
pub fn run_agent(config: &NodeConfig) -> Result<AgentExit, AgentError> {
    let mut agent = NodeAgent::from_config(config)?;
    let files = config.state_dir.as_ref().map(StateFiles::new);
    if let Some(f) = &files {
        if let Some(snap) = f.load()? {
            eprintln!(
                "event=restored node={} committed_round={}",
                config.node_id, snap.committed_round
            );
            agent.restore(snap)?;
        }
    }
    let mut backoff = Backoff::new(config.reconnect.clone(), rand::rng().random());
    let heartbeat = Duration::from_millis(config.heartbeat_interval_ms);
    loop {
        match connect_and_serve(&mut agent, config, heartbeat, files.as_ref()) {
            Ok(()) => {}
            Err(e) => eprintln!("event=connection_error node={} error=\"{e}\"", config.node_id),
        }
        match agent.phase() {
            AgentPhase::Finished { reason } => return Ok(AgentExit::Finished(reason.clone())),
            AgentPhase::Rejected { reason } => return Err(AgentError::AuthRejected(reason.clone())),
            AgentPhase::Idle | AgentPhase::AwaitAck { .. } => backoff.reset(),
            _ => {}
        }
        log_lines(&agent.on_disconnected().log);
        let delay = backoff.next_delay_ms();
        eprintln!("event=backoff node={} delay_ms={delay}", config.node_id);
        std::thread::sleep(Duration::from_millis(delay));
    }
}

fn connect_and_serve(
    agent: &mut NodeAgent,
    config: &NodeConfig,
    heartbeat: Duration,
    files: Option<&StateFiles>,
) -> std::io::Result<()> {
    let addr = config
        .server_address
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| std::io::Error::new(ErrorKind::NotFound, "server_address did not resolve"))?;
    let mut stream = TcpStream::connect_timeout(&addr, Duration::from_secs(10))?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(heartbeat))?;
    let mut decoder = FrameDecoder::new(proto::DEFAULT_MAX_PAYLOAD);
    let mut buf = vec![0u8; 64 * 1024];
    let mut last_heard = Instant::now();
    let mut step = agent.on_connected();
    loop {
        if agent.take_dirty() {
            if let Some(f) = files {
                f.save(&agent.snapshot())?;
            }
        }
        log_lines(&step.log);
        for m in &step.send {
            let bytes = m.encode().map_err(std::io::Error::other)?;
            stream.write_all(&bytes)?;
        }
        if agent.is_done() {
            return Ok(());
        }
        step = Step::default();
        match stream.read(&mut buf) {
            Ok(0) => {
                return Err(std::io::Error::new(
                    ErrorKind::UnexpectedEof,
                    "server closed the connection",
                ))
            }
            Ok(n) => {
                last_heard = Instant::now();
                decoder.push(&buf[..n]);
                while let Some(frame) = decoder.next_frame().map_err(std::io::Error::other)? {
                    let msg = Message::from_frame(&frame).map_err(std::io::Error::other)?;
                    let s = agent.on_message(msg);
                    step.send.extend(s.send);
                    step.log.extend(s.log);
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if last_heard.elapsed() > heartbeat * 3 {
                    return Err(std::io::Error::new(ErrorKind::TimedOut, "no traffic from server"));
                }
                step.send.push(Message::Heartbeat);
            }
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::generate_site;
    use crate::trainer::{init_model, ModelSpec};

    fn profile() -> SiteProfile {
        SiteProfile {
            site_id: "s".into(),
            n_samples: 60,
            positive_fraction: 0.5,
            mean_shift: 0.0,
            noise_scale: 1.0,
            seed: 3,
        }
    }

    fn agent() -> NodeAgent {
        let data = generate_site(&profile(), 4).unwrap();
        let trainer = AdamTrainer::new(TrainerConfig::default()).unwrap();
        NodeAgent::new("s", b"tok".to_vec(), data, Box::new(trainer))
    }

    fn round_start(round: u32, acked: u32) -> RoundStart {
        RoundStart {
            round,
            total_rounds: 3,
            epochs: 2,
            acked_round: acked,
            model: init_model(&ModelSpec {
                input_dim: 4,
                hidden_dims: vec![],
                seed: 1,
            })
            .unwrap(),
        }
    }

    fn to_idle(a: &mut NodeAgent) {
        a.on_connected();
        a.on_message(Message::Challenge { nonce: [5; 32] });
        a.on_message(Message::JoinAck {
            node_id: "s".into(),
            approved: true,
        });
        a.on_message(Message::ResumeState {
            decision: ResumeDecision::Wait,
            session_id: Some([1; 16]),
            round: 1,
            acked_round: 0,
        });
        assert_eq!(a.phase(), &AgentPhase::Idle);
    }

    fn result_of(step: &Step) -> RoundResult {
        match &step.send[0] {
            Message::RoundResult(r) => r.clone(),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn handshake_proof_matches() {
        let mut a = agent();
        assert_eq!(a.on_connected().send, vec![Message::Hello { node_id: "s".into() }]);
        let step = a.on_message(Message::Challenge { nonce: [9; 32] });
        let Message::AuthProof { proof, .. } = &step.send[0] else {
            panic!()
        };
        assert!(proto::proof_matches(b"tok", &[9; 32], "s", proof));
    }

    #[test]
    fn sample_count_is_train_split() {
        let mut a = agent();
        to_idle(&mut a);
        let r = result_of(&a.on_message(Message::RoundStart(round_start(1, 0))));
        assert_eq!(r.sample_count, 42);
        assert_eq!(r.epochs, 2);
        assert!(r.eval.is_some());
    }

    #[test]
    fn redelivered_round_resends_same_result() {
        let mut a = agent();
        to_idle(&mut a);
        let first = result_of(&a.on_message(Message::RoundStart(round_start(1, 0))));
        a.on_disconnected();
        to_idle(&mut a);
        let again = result_of(&a.on_message(Message::RoundStart(round_start(1, 0))));
        assert!(first.model.bit_eq(&again.model));
        assert_eq!(a.rounds_trained(), 1);
    }

    #[test]
    fn unacked_round_does_not_advance_state() {
        // Acked path: round 1 then round 2.
        let mut a = agent();
        to_idle(&mut a);
        a.on_message(Message::RoundStart(round_start(1, 0)));
        a.on_message(Message::RoundAck { round: 1 });
        let acked = result_of(&a.on_message(Message::RoundStart(round_start(2, 1))));

        // Ack lost, but the next ROUND_START reports round 1 as stored.
        let mut b = agent();
        to_idle(&mut b);
        b.on_message(Message::RoundStart(round_start(1, 0)));
        let implicit = result_of(&b.on_message(Message::RoundStart(round_start(2, 1))));
        assert!(acked.model.bit_eq(&implicit.model));
        assert_eq!(b.committed_round(), 1);
    }

    #[test]
    fn auth_errors_are_fatal() {
        let mut a = agent();
        a.on_connected();
        a.on_message(Message::Error {
            code: "auth_failed".into(),
            message: "bad proof".into(),
        });
        assert!(matches!(a.phase(), AgentPhase::Rejected { .. }));
        assert!(a.is_done());
    }

    #[test]
    fn backoff_is_capped_and_monotone() {
        let mut b = Backoff::new(ReconnectPolicy::default(), 1);
        let delays: Vec<u64> = (0..20).map(|_| b.next_delay_ms()).collect();
        assert!(delays[0] >= 900 && delays[0] <= 1000);
        assert!(delays.windows(2).all(|w| w[0] <= w[1]));
        assert!(delays.iter().all(|&d| d <= 60_000));
        assert!(delays[19] >= 54_000);
        b.reset();
        assert!(b.next_delay_ms() <= 1000);
    }

    #[test]
    fn config_parse_and_guards() {
        let ok = r#"
            node_id = "ghana"
            server_address = "127.0.0.1:7700"
            token_env = "FEDORCH_TEST_TOKEN"
            [synthetic]
            input_dim = 4
            [synthetic.profile]
            site_id = "ghana"
            n_samples = 250
            positive_fraction = 0.17
            mean_shift = 1.0
            noise_scale = 0.6
            seed = 1
        "#;
        let c = NodeConfig::parse(ok).unwrap();
        assert_eq!(c.reconnect, ReconnectPolicy::default());
        assert_eq!(c.load_dataset().unwrap().len(), 250);

        let zero_epochs = format!("{ok}\n[trainer]\nepochs_per_round = 0\n");
        assert!(matches!(NodeConfig::parse(&zero_epochs), Err(AgentError::Config(_))));
        let both = ok.replace(
            "token_env = \"FEDORCH_TEST_TOKEN\"",
            "token_env = \"X\"\ndataset_path = \"d.csv\"",
        );
        assert!(matches!(NodeConfig::parse(&both), Err(AgentError::Config(_))));
        let no_token = ok.replace("token_env = \"FEDORCH_TEST_TOKEN\"", "");
        assert!(matches!(NodeConfig::parse(&no_token), Err(AgentError::Config(_))));
    }

    #[cfg(unix)]
    #[test]
    fn token_file_must_be_private() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("token");
        std::fs::write(&path, "secret\n").unwrap();
        let mut c = NodeConfig::parse(&format!(
            "node_id = \"a\"\nserver_address = \"x:1\"\ntoken_file = \"{}\"\ndataset_path = \"d.csv\"\n",
            path.display()
        ))
        .unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o644)).unwrap();
        assert!(matches!(c.load_token(), Err(AgentError::Config(_))));
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o600)).unwrap();
        assert_eq!(c.load_token().unwrap(), b"secret");
        c.token_file = Some(dir.path().join("missing"));
        assert!(c.load_token().is_err());
    }

    #[test]
    fn state_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let files = StateFiles::new(dir.path().join("st"));
        assert!(files.load().unwrap().is_none());
        let mut a = agent();
        to_idle(&mut a);
        a.on_message(Message::RoundStart(round_start(1, 0)));
        let snap = a.snapshot();
        files.save(&snap).unwrap();
        assert_eq!(files.load().unwrap().unwrap(), snap);
        a.on_message(Message::RoundAck { round: 1 });
        files.save(&a.snapshot()).unwrap();
        let back = files.load().unwrap().unwrap();
        assert!(back.pending.is_none());
        assert_eq!(back.committed_round, 1);
        assert_eq!(back.ticket.unwrap().last_acked_round, 1);
    }
}
