//! Deterministic in-process federation with fault injection.
//!
//! A [`FederationServer`] and one [`NodeAgent`] per site exchange encoded
//! frames over simulated connections. Events run in `(time, sequence)`
//! order and every random choice comes from seeded generators, so a run is a
//! pure function of its inputs.
//!
//! Connections behave like TCP streams: frames on one direction arrive in
//! order, and a dropped frame tears the connection down (both ends observe
//! the close after one latency). Nodes then reconnect with backoff and
//! resume through their session tickets.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentPhase, Backoff, NodeAgent, ReconnectPolicy, Step};
use crate::coordinator::{CoordError, Coordinator, FederationConfig, FederationEvent, RoundStatus};
use crate::datakit::{DataError, SiteDataset, SiteProfile};
use crate::federation::{ConnId, ControlRequest, FederationServer, NodeCredential, Output};
use crate::metrics::{self, EvalReport, MetricsError};
use crate::proto::Message;
use crate::seed::derive_seed;
use crate::tensor::TensorMap;
use crate::trainer::{self, AdamTrainer, ModelSpec, TrainError, TrainerConfig};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid fault plan: {0}")]
    InvalidPlan(String),
    #[error("simulation stalled: {0}")]
    Stalled(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Latency {
    Fixed { ms: u64 },
    Uniform { min_ms: u64, max_ms: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DisconnectPhase {
    /// The connection drops as ROUND_START arrives, before training.
    BeforeTrain,
    /// The node trains, then loses the connection before submitting.
    AfterTrainBeforeSubmit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedDisconnect {
    pub node_id: String,
    pub round: u32,
    pub phase: DisconnectPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub seed: u64,
    pub drop_probability: f64,
    pub latency: Latency,
    pub disconnects: Vec<ScriptedDisconnect>,
    /// Crash right after the first update of this round is stored.
    pub coordinator_crash_at: Option<u32>,
    pub crash_downtime_ms: u64,
}

impl Default for FaultPlan {
    fn default() -> Self {
        Self::none(0)
    }
}

impl FaultPlan {
    pub fn none(seed: u64) -> Self {
        Self {
            seed,
            drop_probability: 0.0,
            latency: Latency::Fixed { ms: 5 },
            disconnects: Vec::new(),
            coordinator_crash_at: None,
            crash_downtime_ms: 5_000,
        }
    }

    pub fn validate(&self, total_rounds: u32, node_ids: &[String]) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidPlan(m));
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return bad(format!("drop_probability {} outside [0, 1]", self.drop_probability));
        }
        if let Latency::Uniform { min_ms, max_ms } = self.latency {
            if min_ms > max_ms {
                return bad("latency min exceeds max".into());
            }
        }
        for d in &self.disconnects {
            if !node_ids.contains(&d.node_id) {
                return bad(format!("disconnect names unknown node `{}`", d.node_id));
            }
            if d.round == 0 || d.round > total_rounds {
                return bad(format!("disconnect round {} outside 1..={total_rounds}", d.round));
            }
        }
        if let Some(r) = self.coordinator_crash_at {
            if r == 0 || r > total_rounds {
                return bad(format!("crash round {r} outside 1..={total_rounds}"));
            }
        }
        Ok(())
    }
}

/// Everything besides data and faults that determines a federated run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub federation: FederationConfig,
    pub trainer: TrainerConfig,
    pub hidden_dims: Vec<usize>,
    pub seed: u64,
    pub reconnect: ReconnectPolicy,
    /// Simulated-time budget before the run is declared stalled.
    pub max_sim_time_ms: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            federation: FederationConfig::default(),
            trainer: TrainerConfig::default(),
            hidden_dims: Vec::new(),
            seed: 0,
            reconnect: ReconnectPolicy::default(),
            max_sim_time_ms: 30 * 24 * 3_600_000,
        }
    }
}

impl SimConfig {
    pub fn model_spec(&self, input_dim: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            seed: derive_seed(self.seed, u64::MAX),
        }
    }

    pub fn initial_model(&self, input_dim: usize) -> Result<TensorMap, SimError> {
        Ok(trainer::init_model(&self.model_spec(input_dim))?)
    }

    /// Trainer settings for the site at `index`; only the shuffle seed differs.
    pub fn trainer_config(&self, index: usize) -> TrainerConfig {
        TrainerConfig {
            seed: derive_seed(self.seed, index as u64),
            ..self.trainer.clone()
        }
    }
}

/// Global-model quality after one aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub contributors: Vec<String>,
    pub epochs: Vec<u32>,
    pub mean_val_loss: f64,
    /// All sites' test splits scored together.
    pub pooled: EvalReport,
    pub per_site: Vec<EvalReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub connections: u64,
    pub scripted_disconnects: u64,
    pub coordinator_restarts: u64,
    pub trainings: u64,
    pub sim_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutcome {
    pub final_model: TensorMap,
    pub status: RoundStatus,
    pub aggregations: u32,
    pub rounds: Vec<RoundMetrics>,
    pub events: Vec<FederationEvent>,
    pub stats: SimStats,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Ev {
    Connect(usize),
    ToServer {
        conn: ConnId,
        incarnation: u64,
        bytes: Vec<u8>,
    },
    ToAgent {
        conn: ConnId,
        bytes: Vec<u8>,
    },
    AgentSeesClose(ConnId),
    ServerSeesClose {
        conn: ConnId,
        incarnation: u64,
    },
    Restart,
    Tick,
}

#[derive(Debug, Clone, Default)]
struct SimConn {
    agent: usize,
    incarnation: u64,
    severed: bool,
    last_up: u64,
    last_down: u64,
}

struct SimAgent {
    agent: NodeAgent,
    conn: Option<ConnId>,
    backoff: Backoff,
    trainings_seen: u32,
}

struct Sim<'a> {
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Ev>,
    rng: ChaCha8Rng,
    plan: &'a FaultPlan,
    config: &'a SimConfig,
    sites: &'a [SiteDataset],
    server: Option<FederationServer>,
    incarnation: u64,
    checkpoint: Vec<u8>,
    credentials: Vec<NodeCredential>,
    initial_model: TensorMap,
    agents: Vec<SimAgent>,
    conns: BTreeMap<ConnId, SimConn>,
    next_conn: ConnId,
    fired: BTreeSet<usize>,
    crashed: bool,
    started: bool,
    events_seen: usize,
    events: Vec<FederationEvent>,
    rounds: BTreeMap<u32, RoundMetrics>,
    stats: SimStats,
}

impl<'a> Sim<'a> {
    fn schedule(&mut self, at: u64, ev: Ev) {
        self.queue.insert((at, self.seq), ev);
        self.seq += 1;
    }

    fn latency(&mut self) -> u64 {
        match self.plan.latency {
            Latency::Fixed { ms } => ms,
            Latency::Uniform { min_ms, max_ms } => self.rng.random_range(min_ms..=max_ms),
        }
    }

    fn dropped(&mut self) -> bool {
        self.stats.messages_sent += 1;
        let p = self.plan.drop_probability;
        if p > 0.0 && self.rng.random::<f64>() < p {
            self.stats.messages_dropped += 1;
            true
        } else {
            false
        }
    }

    fn sever(&mut self, conn: ConnId) {
        let lat = self.latency();
        let Some(c) = self.conns.get_mut(&conn) else { return };
        if c.severed {
            return;
        }
        c.severed = true;
        let (down, up, incarnation) = (
            c.last_down.max(self.now + lat),
            c.last_up.max(self.now + lat),
            c.incarnation,
        );
        self.schedule(down, Ev::AgentSeesClose(conn));
        self.schedule(up, Ev::ServerSeesClose { conn, incarnation });
    }

    fn send_to_server(&mut self, conn: ConnId, message: &Message) {
        if self.conns.get(&conn).is_none_or(|c| c.severed) {
            return;
        }
        if self.dropped() {
            self.sever(conn);
            return;
        }
        let lat = self.latency();
        let bytes = message.encode().expect("agent messages fit in a frame");
        let c = self.conns.get_mut(&conn).expect("checked");
        let at = c.last_up.max(self.now + lat);
        c.last_up = at;
        let incarnation = c.incarnation;
        self.schedule(
            at,
            Ev::ToServer {
                conn,
                incarnation,
                bytes,
            },
        );
    }

    fn send_to_agent(&mut self, conn: ConnId, message: &Message) {
        if self.conns.get(&conn).is_none_or(|c| c.severed) {
            return;
        }
        if self.dropped() {
            self.sever(conn);
            return;
        }
        let lat = self.latency();
        let bytes = message.encode().expect("server messages fit in a frame");
        let c = self.conns.get_mut(&conn).expect("checked");
        let at = c.last_down.max(self.now + lat);
        c.last_down = at;
        self.schedule(at, Ev::ToAgent { conn, bytes });
    }

    fn scripted(&mut self, node: usize, round: u32, phase: DisconnectPhase) -> bool {
        let id = self.agents[node].agent.node_id();
        let hit = self
            .plan
            .disconnects
            .iter()
            .enumerate()
            .find(|(i, d)| !self.fired.contains(i) && d.node_id == id && d.round == round && d.phase == phase)
            .map(|(i, _)| i);
        if let Some(i) = hit {
            self.fired.insert(i);
            self.stats.scripted_disconnects += 1;
            true
        } else {
            false
        }
    }

    fn agent_step(&mut self, node: usize, step: Step) {
        let trained = self.agents[node].agent.rounds_trained();
        self.stats.trainings += u64::from(trained - self.agents[node].trainings_seen);
        self.agents[node].trainings_seen = trained;
        if self.agents[node].agent.phase() == &AgentPhase::AwaitResume {
            self.agents[node].backoff.reset();
        }
        let Some(conn) = self.agents[node].conn else { return };
        for m in &step.send {
            if let Message::RoundResult(r) = m {
                if self.scripted(node, r.round, DisconnectPhase::AfterTrainBeforeSubmit) {
                    self.sever(conn);
                    return;
                }
            }
            self.send_to_server(conn, m);
        }
        if self.agents[node].agent.is_done() {
            self.sever(conn);
        }
    }

    fn agent_disconnected(&mut self, node: usize) {
        let a = &mut self.agents[node];
        a.conn = None;
        a.agent.on_disconnected();
        if !a.agent.is_done() {
            let delay = a.backoff.next_delay_ms();
            self.schedule(self.now + delay, Ev::Connect(node));
        }
    }

    fn handle_outputs(&mut self, outputs: Vec<Output>) {
        for o in outputs {
            match o {
                Output::Send { conn, message } => self.send_to_agent(conn, &message),
                Output::Close { conn } => {
                    if let Some(s) = &mut self.server {
                        s.disconnect(conn, self.now);
                    }
                    self.sever(conn);
                }
            }
        }
    }

    /// Bookkeeping after every server call, including the scripted crash.
    fn after_server_call(&mut self, outputs: Vec<Output>) -> Result<(), SimError> {
        let server = self.server.as_ref().expect("server is up");
        let fresh: Vec<FederationEvent> = server.event_log()[self.events_seen..].to_vec();
        self.events_seen = server.event_log().len();
        let crash_now = !self.crashed
            && self.plan.coordinator_crash_at.is_some_and(|r| {
                fresh
                    .iter()
                    .any(|e| matches!(e, FederationEvent::UpdateStored { round, .. } if *round == r))
            });
        self.events.extend(fresh);
        self.record_rounds()?;
        if crash_now {
            self.crash();
            return Ok(());
        }
        self.handle_outputs(outputs);
        self.maybe_start()
    }

    fn crash(&mut self) {
        self.crashed = true;
        let server = self.server.take().expect("server is up");
        self.checkpoint = server.latest_checkpoint().to_vec();
        self.incarnation += 1;
        let open: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, c)| !c.severed)
            .map(|(&id, _)| id)
            .collect();
        for conn in open {
            self.sever(conn);
        }
        self.schedule(self.now + self.plan.crash_downtime_ms, Ev::Restart);
    }

    fn maybe_start(&mut self) -> Result<(), SimError> {
        if self.started {
            return Ok(());
        }
        let Some(server) = &mut self.server else { return Ok(()) };
        if server.coordinator().status() != RoundStatus::WaitingForNodes {
            self.started = true;
            return Ok(());
        }
        if server.connected_nodes().len() == self.agents.len() {
            self.started = true;
            let (resp, outputs) = server.control(&ControlRequest::Start, self.now);
            if resp.status != 200 {
                return Err(SimError::Stalled(format!("start refused: {}", resp.body)));
            }
            self.after_server_call(outputs)?;
        }
        Ok(())
    }

    fn record_rounds(&mut self) -> Result<(), SimError> {
        let server = self.server.as_ref().expect("server is up");
        let coord = server.coordinator();
        let Some(last) = coord.history().last() else {
            return Ok(());
        };
        if self.rounds.contains_key(&last.round) {
            return Ok(());
        }
        let metrics = round_metrics(coord, self.sites)?;
        self.rounds.insert(last.round, metrics);
        Ok(())
    }

    fn finished(&self) -> bool {
        self.agents.iter().all(|a| a.agent.is_done())
            && self
                .server
                .as_ref()
                .is_some_and(|s| s.coordinator().status().is_terminal())
    }

    fn run(&mut self) -> Result<(), SimError> {
        while let Some(((at, _), ev)) = self.queue.pop_first() {
            self.now = at;
            if self.now > self.config.max_sim_time_ms {
                return Err(SimError::Stalled(format!(
                    "no completion after {} ms of simulated time",
                    self.now
                )));
            }
            match ev {
                Ev::Connect(node) => {
                    if self.agents[node].agent.is_done() || self.agents[node].conn.is_some() {
                        continue;
                    }
                    if self.server.is_none() {
                        self.agent_disconnected(node);
                        continue;
                    }
                    let conn = self.next_conn;
                    self.next_conn += 1;
                    self.stats.connections += 1;
                    self.conns.insert(
                        conn,
                        SimConn {
                            agent: node,
                            incarnation: self.incarnation,
                            ..Default::default()
                        },
                    );
                    self.server.as_mut().expect("checked").connect(conn);
                    self.agents[node].conn = Some(conn);
                    let step = self.agents[node].agent.on_connected();
                    self.agent_step(node, step);
                }
                Ev::ToServer {
                    conn,
                    incarnation,
                    bytes,
                } => {
                    if incarnation != self.incarnation || self.server.is_none() {
                        continue;
                    }
                    let message = Message::decode(&bytes).expect("simulated frames are intact");
                    let outputs = self
                        .server
                        .as_mut()
                        .expect("checked")
                        .handle_message(conn, message, self.now);
                    self.after_server_call(outputs)?;
                }
                Ev::ToAgent { conn, bytes } => {
                    let node = self.conns[&conn].agent;
                    if self.agents[node].conn != Some(conn) {
                        continue;
                    }
                    let message = Message::decode(&bytes).expect("simulated frames are intact");
                    if let Message::RoundStart(rs) = &message {
                        if self.scripted(node, rs.round, DisconnectPhase::BeforeTrain) {
                            self.sever(conn);
                            continue;
                        }
                    }
                    let step = self.agents[node].agent.on_message(message);
                    self.agent_step(node, step);
                }
                Ev::AgentSeesClose(conn) => {
                    let node = self.conns[&conn].agent;
                    if self.agents[node].conn == Some(conn) {
                        self.agent_disconnected(node);
                    }
                }
                Ev::ServerSeesClose { conn, incarnation } => {
                    if incarnation == self.incarnation {
                        if let Some(s) = &mut self.server {
                            s.disconnect(conn, self.now);
                        }
                    }
                }
                Ev::Restart => {
                    let server = FederationServer::restore(
                        &self.checkpoint,
                        self.credentials.clone(),
                        self.initial_model.clone(),
                        derive_seed(self.plan.seed, 1_000 + self.incarnation),
                    )?;
                    self.events_seen = server.event_log().len();
                    self.server = Some(server);
                    self.stats.coordinator_restarts += 1;
                }
                Ev::Tick => {
                    if let Some(s) = &mut self.server {
                        let outputs = s.tick(self.now);
                        self.after_server_call(outputs)?;
                    }
                    if !self.finished() {
                        self.schedule(self.now + 1_000, Ev::Tick);
                    }
                }
            }
            if self.finished() {
                break;
            }
        }
        self.stats.sim_time_ms = self.now;
        Ok(())
    }
}

fn round_metrics(coord: &Coordinator, sites: &[SiteDataset]) -> Result<RoundMetrics, SimError> {
    let summary = coord.history().last().expect("caller checked");
    let model = coord.global_model();
    let mut per_site = Vec::with_capacity(sites.len());
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for site in sites {
        for &i in &site.split.test {
            scores.push(trainer::forward(model, site.row(i))?);
            labels.push(site.label(i));
        }
        per_site.push(metrics::evaluate("global", model, site)?);
    }
    Ok(RoundMetrics {
        round: summary.round,
        contributors: summary.contributors.iter().map(|m| m.node_id.clone()).collect(),
        epochs: summary.contributors.iter().map(|m| m.epochs).collect(),
        mean_val_loss: summary.mean_val_loss(),
        pooled: EvalReport::from_scores("global", "pooled", &scores, &labels)?,
        per_site,
    })
}

/// Runs one federation over `sites`, one node per site, named by `site_id`.
pub fn run_federation(sites: &[SiteDataset], config: &SimConfig, plan: &FaultPlan) -> Result<SimOutcome, SimError> {
    if sites.is_empty() {
        return Err(SimError::InvalidPlan("no sites".into()));
    }
    let ids: Vec<String> = sites.iter().map(|s| s.site_id.clone()).collect();
    if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
        return Err(SimError::InvalidPlan("site ids must be unique".into()));
    }
    plan.validate(config.federation.total_rounds, &ids)?;
    let input_dim = sites[0].dim();
    let initial_model = config.initial_model(input_dim)?;
    let credentials: Vec<NodeCredential> = ids
        .iter()
        .map(|id| NodeCredential {
            node_id: id.clone(),
            token: format!("sim-token-{id}").into_bytes(),
            approved: true,
        })
        .collect();
    let coord = Coordinator::new(config.federation.clone())?;
    let server = FederationServer::new(
        coord,
        credentials.clone(),
        initial_model.clone(),
        derive_seed(plan.seed, 1_000),
    );
    let mut agents = Vec::with_capacity(sites.len());
    for (i, site) in sites.iter().enumerate() {
        let trainer = AdamTrainer::new(config.trainer_config(i))?;
        agents.push(SimAgent {
            agent: NodeAgent::new(
                site.site_id.clone(),
                credentials[i].token.clone(),
                site.clone(),
                Box::new(trainer),
            ),
            conn: None,
            backoff: Backoff::new(config.reconnect.clone(), derive_seed(plan.seed, 2_000 + i as u64)),
            trainings_seen: 0,
        });
    }
    let mut sim = Sim {
        now: 0,
        seq: 0,
        queue: BTreeMap::new(),
        rng: ChaCha8Rng::seed_from_u64(plan.seed),
        plan,
        config,
        sites,
        server: Some(server),
        incarnation: 0,
        checkpoint: Vec::new(),
        credentials,
        initial_model,
        agents,
        conns: BTreeMap::new(),
        next_conn: 1,
        fired: BTreeSet::new(),
        crashed: false,
        started: false,
        events_seen: 0,
        events: Vec::new(),
        rounds: BTreeMap::new(),
        stats: SimStats::default(),
    };
    for i in 0..sites.len() {
        sim.schedule(i as u64, Ev::Connect(i));
    }
    if config.federation.round_timeout_ms.is_some() {
        sim.schedule(1_000, Ev::Tick);
    }
    sim.run()?;
    let server = sim
        .server
        .as_ref()
        .ok_or_else(|| SimError::Stalled("coordinator down at end of run".into()))?;
    let coord = server.coordinator();
    if !coord.status().is_terminal() {
        return Err(SimError::Stalled(format!(
            "event queue drained in round {} with status {:?}",
            coord.state().round_index,
            coord.status()
        )));
    }
    Ok(SimOutcome {
        final_model: coord.global_model().clone(),
        status: coord.status(),
        aggregations: coord.aggregations(),
        rounds: sim.rounds.into_values().collect(),
        events: sim.events,
        stats: sim.stats,
    })
}

/// Generates the sites described by `profiles` and runs one federation.
pub fn run_sim(
    profiles: &[SiteProfile],
    input_dim: usize,
    config: &SimConfig,
    plan: &FaultPlan,
) -> Result<SimOutcome, SimError> {
    let sites = profiles
        .iter()
        .map(|p| crate::datakit::generate_site(p, input_dim))
        .collect::<Result<Vec<_>, _>>()?;
    run_federation(&sites, config, plan)
}
