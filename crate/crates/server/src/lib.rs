//! Networked coordinator.
//!
//! A single actor task owns the [`FederationServer`] and applies commands in
//! arrival order: node connections feed it decoded frames, the HTTP control
//! API feeds it operator requests, and a ticker drives round deadlines. Every
//! other task only moves bytes.
//!
//! Configuration file (TOML):
//!
//! ```toml
//! listen = "0.0.0.0:7700"          # node protocol
//! control_listen = "127.0.0.1:7701" # operator HTTP API
//!
//! [federation]
//! total_rounds = 20
//! epochs_per_round = 10
//! checkpoint_dir = "/var/lib/fedorch"
//!
//! [model]
//! input_dim = 16
//! hidden_dims = []
//! seed = 0
//!
//! [[node]]
//! node_id = "ghana"
//! token_file = "/etc/fedorch/tokens/ghana"   # or token_env = "..."
//! approved = true
//! ```

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Body;
use axum::extract::State;
use axum::http::{header, HeaderMap, Method, StatusCode, Uri};
use axum::response::Response;
use axum::Router;
use fedorch::agent::{load_secret, AgentError};
use fedorch::coordinator::{CoordError, Coordinator, FederationConfig};
use fedorch::federation::{
    operator_authorized, ConnId, ControlRequest, ControlResponse, FederationServer, NodeCredential, Output,
};
use fedorch::proto::{FrameDecoder, Message, DEFAULT_MAX_PAYLOAD};
use fedorch::trainer::{init_model, ModelSpec, TrainError};
use rand::Rng;
use serde::Deserialize;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;

pub const CHECKPOINT_FILE: &str = "federation.ckpt";

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Coord(#[from] CoordError),
    #[error(transparent)]
    Token(#[from] AgentError),
    #[error(transparent)]
    Model(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub node_id: String,
    pub token_env: Option<String>,
    pub token_file: Option<PathBuf>,
    #[serde(default)]
    pub approved: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: String,
    pub control_listen: String,
    #[serde(default)]
    pub federation: FederationConfig,
    pub model: ModelConfig,
    #[serde(rename = "node", default)]
    pub nodes: Vec<NodeEntry>,
    #[serde(default = "default_tick_ms")]
    pub tick_interval_ms: u64,
}

fn default_tick_ms() -> u64 {
    1_000
}

impl ServerConfig {
    pub fn parse(text: &str) -> Result<Self, ServerError> {
        let config: ServerConfig = toml::from_str(text).map_err(|e| ServerError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ServerError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        self.federation.validate()?;
        if self.nodes.is_empty() {
            return Err(ServerError::Config("at least one [[node]] is required".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &self.nodes {
            if n.node_id.is_empty() || n.node_id.contains(['\n', '=']) {
                return Err(ServerError::Config(format!("invalid node_id `{}`", n.node_id)));
            }
            if !seen.insert(&n.node_id) {
                return Err(ServerError::Config(format!("node `{}` listed twice", n.node_id)));
            }
            if n.token_env.is_some() == n.token_file.is_some() {
                return Err(ServerError::Config(format!(
                    "node `{}`: set exactly one of token_env and token_file",
                    n.node_id
                )));
            }
        }
        if self.tick_interval_ms == 0 {
            return Err(ServerError::Config("tick_interval_ms must be positive".into()));
        }
        Ok(())
    }

    pub fn checkpoint_path(&self) -> Option<PathBuf> {
        self.federation.checkpoint_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE))
    }

    fn credentials(&self) -> Result<Vec<NodeCredential>, ServerError> {
        self.nodes
            .iter()
            .map(|n| {
                Ok(NodeCredential {
                    node_id: n.node_id.clone(),
                    token: load_secret(n.token_env.as_deref(), n.token_file.as_deref())?,
                    approved: n.approved,
                })
            })
            .collect()
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

enum Outbound {
    Frame(Vec<u8>),
    Close,
}

enum Command {
    Connected {
        conn: ConnId,
        tx: mpsc::UnboundedSender<Outbound>,
    },
    Received {
        conn: ConnId,
        message: Message,
    },
    Malformed {
        conn: ConnId,
        reason: String,
    },
    Closed {
        conn: ConnId,
    },
    Control {
        request: ControlRequest,
        reply: oneshot::Sender<ControlResponse>,
    },
    Tick,
}

struct Actor {
    server: FederationServer,
    conns: HashMap<ConnId, mpsc::UnboundedSender<Outbound>>,
    logged_events: usize,
}

impl Actor {
    fn apply(&mut self, outputs: Vec<Output>) {
        for o in outputs {
            match o {
                Output::Send { conn, message } => {
                    let Some(tx) = self.conns.get(&conn) else { continue };
                    match message.encode() {
                        Ok(bytes) => {
                            let _ = tx.send(Outbound::Frame(bytes));
                        }
                        Err(e) => eprintln!("event=encode_failed conn={conn} error=\"{e}\""),
                    }
                }
                Output::Close { conn } => {
                    if let Some(tx) = self.conns.remove(&conn) {
                        let _ = tx.send(Outbound::Close);
                    }
                    self.server.disconnect(conn, now_ms());
                }
            }
        }
        let log = self.server.event_log();
        for e in &log[self.logged_events..] {
            eprintln!("event=federation detail=\"{e:?}\"");
        }
        self.logged_events = log.len();
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Connected { conn, tx } => {
                self.server.connect(conn);
                self.conns.insert(conn, tx);
                eprintln!("event=connected conn={conn}");
            }
            Command::Received { conn, message } => {
                let out = self.server.handle_message(conn, message, now_ms());
                self.apply(out);
            }
            Command::Malformed { conn, reason } => {
                eprintln!("event=malformed conn={conn} error=\"{reason}\"");
                self.apply(vec![
                    Output::Send {
                        conn,
                        message: Message::Error {
                            code: "malformed".into(),
                            message: reason,
                        },
                    },
                    Output::Close { conn },
                ]);
            }
            Command::Closed { conn } => {
                if self.conns.remove(&conn).is_some() {
                    self.server.disconnect(conn, now_ms());
                    eprintln!("event=disconnected conn={conn}");
                }
            }
            Command::Control { request, reply } => {
                let (response, out) = self.server.control(&request, now_ms());
                if request.is_mutating() {
                    eprintln!("event=control request=\"{request:?}\" status={}", response.status);
                }
                self.apply(out);
                let _ = reply.send(response);
            }
            Command::Tick => {
                let out = self.server.tick(now_ms());
                self.apply(out);
            }
        }
    }
}

/// A running coordinator. Dropping it leaves the tasks running; call
/// [`RunningServer::shutdown`] to stop them.
pub struct RunningServer {
    pub node_addr: SocketAddr,
    pub control_addr: SocketAddr,
    tasks: Vec<JoinHandle<()>>,
}

impl RunningServer {
    pub fn shutdown(self) {
        for t in self.tasks {
            t.abort();
        }
    }
}

/// Builds the federation state (fresh, or restored from checkpoint bytes),
/// binds both listeners and spawns the service tasks.
pub async fn start(
    config: &ServerConfig,
    operator_token: String,
    resume: Option<&[u8]>,
) -> Result<RunningServer, ServerError> {
    if operator_token.is_empty() {
        return Err(ServerError::Config("operator token is empty".into()));
    }
    let creds = config.credentials()?;
    let initial = init_model(&ModelSpec {
        input_dim: config.model.input_dim,
        hidden_dims: config.model.hidden_dims.clone(),
        seed: config.model.seed,
    })?;
    let rng_seed: u64 = rand::rng().random();
    let mut server = match resume {
        Some(bytes) => FederationServer::restore(bytes, creds, initial, rng_seed)?,
        None => FederationServer::new(Coordinator::new(config.federation.clone())?, creds, initial, rng_seed),
    };
    if let Some(path) = config.checkpoint_path() {
        std::fs::create_dir_all(path.parent().expect("joined onto a directory"))?;
        server = server.with_checkpoint_file(path);
    }

    let node_listener = TcpListener::bind(&config.listen).await?;
    let control_listener = TcpListener::bind(&config.control_listen).await?;
    let node_addr = node_listener.local_addr()?;
    let control_addr = control_listener.local_addr()?;

    let (cmd_tx, mut cmd_rx) = mpsc::unbounded_channel::<Command>();
    let mut actor = Actor {
        server,
        conns: HashMap::new(),
        logged_events: 0,
    };
    let mut tasks = vec![tokio::spawn(async move {
        while let Some(cmd) = cmd_rx.recv().await {
            actor.handle(cmd);
        }
    })];

    let tick_tx = cmd_tx.clone();
    let period = Duration::from_millis(config.tick_interval_ms);
    tasks.push(tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        loop {
            interval.tick().await;
            if tick_tx.send(Command::Tick).is_err() {
                break;
            }
        }
    }));

    let accept_tx = cmd_tx.clone();
    tasks.push(tokio::spawn(async move {
        let mut next: ConnId = 1;
        loop {
            match node_listener.accept().await {
                Ok((stream, peer)) => {
                    eprintln!("event=accepted conn={next} peer={peer}");
                    tokio::spawn(serve_node(stream, next, accept_tx.clone()));
                    next += 1;
                }
                Err(e) => eprintln!("event=accept_failed error=\"{e}\""),
            }
        }
    }));

    let app = control_router(cmd_tx, operator_token);
    tasks.push(tokio::spawn(async move {
        if let Err(e) = axum::serve(control_listener, app).await {
            eprintln!("event=control_api_failed error=\"{e}\"");
        }
    }));

    Ok(RunningServer {
        node_addr,
        control_addr,
        tasks,
    })
}

async fn serve_node(stream: TcpStream, conn: ConnId, commands: mpsc::UnboundedSender<Command>) {
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel();
    if commands.send(Command::Connected { conn, tx }).is_err() {
        return;
    }
    let reader_cmds = commands.clone();
    let reader = tokio::spawn(async move {
        let mut decoder = FrameDecoder::new(DEFAULT_MAX_PAYLOAD);
        let mut buf = vec![0u8; 64 * 1024];
        'read: loop {
            let n = match rd.read(&mut buf).await {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            decoder.push(&buf[..n]);
            loop {
                let parsed = decoder.next_frame().map_err(|e| e.to_string()).and_then(|f| match f {
                    Some(f) => Message::from_frame(&f).map(Some).map_err(|e| e.to_string()),
                    None => Ok(None),
                });
                match parsed {
                    Ok(Some(message)) => {
                        let _ = reader_cmds.send(Command::Received { conn, message });
                    }
                    Ok(None) => break,
                    Err(reason) => {
                        let _ = reader_cmds.send(Command::Malformed { conn, reason });
                        break 'read;
                    }
                }
            }
        }
        let _ = reader_cmds.send(Command::Closed { conn });
    });
    while let Some(out) = rx.recv().await {
        match out {
            Outbound::Frame(bytes) => {
                if wr.write_all(&bytes).await.is_err() {
                    break;
                }
            }
            Outbound::Close => break,
        }
    }
    let _ = wr.shutdown().await;
    reader.abort();
    let _ = commands.send(Command::Closed { conn });
}

#[derive(Clone)]
struct HttpState {
    commands: mpsc::UnboundedSender<Command>,
    operator_token: String,
}

/// The operator HTTP API. Every route requires `Authorization: Bearer <token>`.
fn control_router(commands: mpsc::UnboundedSender<Command>, operator_token: String) -> Router {
    Router::new().fallback(control_handler).with_state(HttpState {
        commands,
        operator_token,
    })
}

fn json_response(r: ControlResponse) -> Response {
    Response::builder()
        .status(StatusCode::from_u16(r.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR))
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(r.body.to_string()))
        .expect("static response parts")
}

async fn control_handler(State(st): State<HttpState>, method: Method, uri: Uri, headers: HeaderMap) -> Response {
    let auth = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok());
    if !operator_authorized(&st.operator_token, auth) {
        return json_response(ControlResponse::unauthorized());
    }
    let Some(request) = ControlRequest::parse(method.as_str(), uri.path()) else {
        return json_response(ControlResponse::error(
            404,
            "not_found",
            format!("no route for {method} {}", uri.path()),
        ));
    };
    let (reply, rx) = oneshot::channel();
    if st.commands.send(Command::Control { request, reply }).is_err() {
        return json_response(ControlResponse::error(
            503,
            "unavailable",
            "coordinator is shutting down",
        ));
    }
    match rx.await {
        Ok(r) => json_response(r),
        Err(_) => json_response(ControlResponse::error(
            503,
            "unavailable",
            "coordinator is shutting down",
        )),
    }
}
