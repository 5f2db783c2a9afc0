//! Wire protocol between the coordinator and site nodes.
//!
//! Every message travels in a frame: `u32` big-endian payload length, `u8`
//! message type, payload. Payloads are canonical text maps (`key=value\n`
//! lines, keys strictly ascending); `ROUND_START` and `ROUND_RESULT` append a
//! blank line and an `FTM1` tensor block. The full layout is documented in
//! `PROTOCOL.md` at the repository root.
//!
//! Nodes authenticate with an HMAC-SHA256 challenge-response over a shared
//! token. Resumption state lives in a [`SessionTicket`] held by the node, so
//! any connection can be dropped and replaced without restarting the
//! federation.

use std::collections::{BTreeMap, HashMap};

use rand::RngCore;
use ring::hmac;
use thiserror::Error;

use crate::metrics::ConfusionCounts;
use crate::tensor::{self, TensorError, TensorMap};

/// Default payload cap (64 MiB).
pub const DEFAULT_MAX_PAYLOAD: usize = 64 * 1024 * 1024;
pub const FRAME_HEADER_LEN: usize = 5;
/// Default challenge lifetime.
pub const DEFAULT_NONCE_TTL_MS: u64 = 30_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtoError {
    #[error("payload of {len} bytes exceeds cap of {cap}")]
    Oversize { len: usize, cap: usize },
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("truncated frame")]
    Truncated,
    #[error("malformed {msg:?} payload: {reason}")]
    MalformedPayload { msg: MsgType, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthError {
    #[error("nonce expired")]
    NonceExpired,
    #[error("nonce already used")]
    NonceReused,
    #[error("nonce was never issued")]
    UnknownNonce,
    #[error("proof does not verify")]
    BadProof,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x01,
    Challenge = 0x02,
    AuthProof = 0x03,
    JoinAck = 0x04,
    RoundStart = 0x05,
    RoundResult = 0x06,
    RoundAck = 0x07,
    Heartbeat = 0x08,
    ResumeReq = 0x09,
    ResumeState = 0x0A,
    Error = 0x0B,
    Shutdown = 0x0C,
}

impl TryFrom<u8> for MsgType {
    type Error = ProtoError;

    fn try_from(code: u8) -> Result<Self, ProtoError> {
        use MsgType::*;
        Ok(match code {
            0x01 => Hello,
            0x02 => Challenge,
            0x03 => AuthProof,
            0x04 => JoinAck,
            0x05 => RoundStart,
            0x06 => RoundResult,
            0x07 => RoundAck,
            0x08 => Heartbeat,
            0x09 => ResumeReq,
            0x0A => ResumeState,
            0x0B => Error,
            0x0C => Shutdown,
            other => return Err(ProtoError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

pub fn encode_frame(msg_type: MsgType, payload: &[u8]) -> Result<Vec<u8>, ProtoError> {
    encode_frame_capped(msg_type, payload, DEFAULT_MAX_PAYLOAD)
}

pub fn encode_frame_capped(msg_type: MsgType, payload: &[u8], cap: usize) -> Result<Vec<u8>, ProtoError> {
    if payload.len() > cap || payload.len() > u32::MAX as usize {
        return Err(ProtoError::Oversize {
            len: payload.len(),
            cap,
        });
    }
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.push(msg_type as u8);
    out.extend_from_slice(payload);
    Ok(out)
}

/// Decodes the frame at the start of `bytes`, returning it and the number of
/// bytes it occupied.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), ProtoError> {
    decode_frame_capped(bytes, DEFAULT_MAX_PAYLOAD)
}

pub fn decode_frame_capped(bytes: &[u8], cap: usize) -> Result<(Frame, usize), ProtoError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(ProtoError::Truncated);
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len > cap {
        return Err(ProtoError::Oversize { len, cap });
    }
    let msg_type = MsgType::try_from(bytes[4])?;
    let end = FRAME_HEADER_LEN + len;
    if bytes.len() < end {
        return Err(ProtoError::Truncated);
    }
    Ok((
        Frame {
            msg_type,
            payload: bytes[FRAME_HEADER_LEN..end].to_vec(),
        },
        end,
    ))
}

/// Incremental decoder for a byte stream. Bytes of an incomplete frame stay
/// buffered; a malformed header is reported once and poisons the decoder.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    cap: usize,
    failed: Option<ProtoError>,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_PAYLOAD)
    }
}

impl FrameDecoder {
    pub fn new(cap: usize) -> Self {
        Self {
            buf: Vec::new(),
            cap,
            failed: None,
        }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, `Ok(None)` if more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, ProtoError> {
        if let Some(e) = &self.failed {
            return Err(e.clone());
        }
        match decode_frame_capped(&self.buf, self.cap) {
            Ok((frame, used)) => {
                self.buf.drain(..used);
                Ok(Some(frame))
            }
            Err(ProtoError::Truncated) => Ok(None),
            Err(e) => {
                self.failed = Some(e.clone());
                Err(e)
            }
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Decodes a whole buffer: every complete frame before the first error, and
/// the error (a trailing partial frame reports `Truncated`).
pub fn decode_stream(bytes: &[u8]) -> (Vec<Frame>, Option<ProtoError>) {
    let mut frames = Vec::new();
    let mut rest = bytes;
    while !rest.is_empty() {
        match decode_frame(rest) {
            Ok((f, used)) => {
                frames.push(f);
                rest = &rest[used..];
            }
            Err(e) => return (frames, Some(e)),
        }
    }
    (frames, None)
}

/// `key=value` lines with strictly ascending keys.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TextMap(BTreeMap<String, String>);

impl TextMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        debug_assert!(!key.contains(['=', '\n']) && !key.is_empty());
        debug_assert!(!value.contains('\n'));
        self.0.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = String::new();
        for (k, v) in &self.0 {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let text = std::str::from_utf8(bytes).map_err(|_| "payload is not UTF-8".to_string())?;
        let mut map = BTreeMap::new();
        let mut last: Option<&str> = None;
        if text.is_empty() {
            return Ok(Self(map));
        }
        let body = text.strip_suffix('\n').ok_or("missing final newline")?;
        for line in body.split('\n') {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line `{line}` has no `=`"))?;
            if k.is_empty() {
                return Err("empty key".into());
            }
            if last.is_some_and(|prev| prev >= k) {
                return Err(format!("key `{k}` out of canonical order"));
            }
            last = Some(k);
            map.insert(k.to_string(), v.to_string());
        }
        Ok(Self(map))
    }
}

/// Resume outcome sent in `RESUME_STATE`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResumeDecision {
    /// Current round re-delivered; a `ROUND_START` follows.
    Deliver,
    /// Nothing to do until the next round starts.
    Wait,
    /// The federation has finished.
    Done,
    /// Ticket unknown or stale; the node must join afresh.
    Rejoin,
}

impl ResumeDecision {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Deliver => "deliver",
            Self::Wait => "wait",
            Self::Done => "done",
            Self::Rejoin => "rejoin",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "deliver" => Self::Deliver,
            "wait" => Self::Wait,
            "done" => Self::Done,
            "rejoin" => Self::Rejoin,
            _ => return None,
        })
    }
}

/// Node-side eval of the received global model on its local test split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeEval {
    pub counts: ConfusionCounts,
    pub roc_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundStart {
    pub round: u32,
    pub total_rounds: u32,
    pub epochs: u32,
    /// Latest round this node's contribution was aggregated or stored for.
    pub acked_round: u32,
    pub model: TensorMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub round: u32,
    pub node_id: String,
    pub sample_count: u64,
    pub epochs: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub eval: Option<NodeEval>,
    pub model: TensorMap,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello {
        node_id: String,
    },
    Challenge {
        nonce: [u8; 32],
    },
    AuthProof {
        node_id: String,
        proof: [u8; 32],
    },
    JoinAck {
        node_id: String,
        approved: bool,
    },
    RoundStart(RoundStart),
    RoundResult(RoundResult),
    RoundAck {
        round: u32,
    },
    Heartbeat,
    ResumeReq {
        session_id: Option<[u8; 16]>,
        last_acked_round: u32,
    },
    ResumeState {
        decision: ResumeDecision,
        session_id: Option<[u8; 16]>,
        round: u32,
        acked_round: u32,
    },
    Error {
        code: String,
        message: String,
    },
    Shutdown {
        reason: String,
    },
}

fn split_header(payload: &[u8]) -> Option<(&[u8], &[u8])> {
    if payload.first() == Some(&b'\n') {
        return Some((&[], &payload[1..]));
    }
    let pos = payload.windows(2).position(|w| w == b"\n\n")?;
    Some((&payload[..pos + 1], &payload[pos + 2..]))
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Hello { .. } => MsgType::Hello,
            Message::Challenge { .. } => MsgType::Challenge,
            Message::AuthProof { .. } => MsgType::AuthProof,
            Message::JoinAck { .. } => MsgType::JoinAck,
            Message::RoundStart(_) => MsgType::RoundStart,
            Message::RoundResult(_) => MsgType::RoundResult,
            Message::RoundAck { .. } => MsgType::RoundAck,
            Message::Heartbeat => MsgType::Heartbeat,
            Message::ResumeReq { .. } => MsgType::ResumeReq,
            Message::ResumeState { .. } => MsgType::ResumeState,
            Message::Error { .. } => MsgType::Error,
            Message::Shutdown { .. } => MsgType::Shutdown,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut m = TextMap::new();
        let mut tensors = None;
        match self {
            Message::Hello { node_id } => {
                m.set("node_id", node_id);
            }
            Message::Challenge { nonce } => {
                m.set("nonce", hex::encode(nonce));
            }
            Message::AuthProof { node_id, proof } => {
                m.set("node_id", node_id).set("proof", hex::encode(proof));
            }
            Message::JoinAck { node_id, approved } => {
                m.set("approval", if *approved { "approved" } else { "pending" })
                    .set("node_id", node_id);
            }
            Message::RoundStart(rs) => {
                m.set("acked_round", rs.acked_round)
                    .set("epochs", rs.epochs)
                    .set("round", rs.round)
                    .set("total_rounds", rs.total_rounds);
                tensors = Some(&rs.model);
            }
            Message::RoundResult(rr) => {
                m.set("epochs", rr.epochs)
                    .set("node_id", &rr.node_id)
                    .set("round", rr.round)
                    .set("sample_count", rr.sample_count)
                    .set("train_loss", rr.train_loss)
                    .set("val_loss", rr.val_loss);
                if let Some(e) = &rr.eval {
                    m.set("eval.fn", e.counts.fn_)
                        .set("eval.fp", e.counts.fp)
                        .set("eval.tn", e.counts.tn)
                        .set("eval.tp", e.counts.tp);
                    if let Some(auc) = e.roc_auc {
                        m.set("eval.auc", auc);
                    }
                }
                tensors = Some(&rr.model);
            }
            Message::RoundAck { round } => {
                m.set("round", round);
            }
            Message::Heartbeat => {}
            Message::ResumeReq {
                session_id,
                last_acked_round,
            } => {
                m.set("last_acked_round", last_acked_round)
                    .set("session_id", session_id.map(hex::encode).unwrap_or_default());
            }
            Message::ResumeState {
                decision,
                session_id,
                round,
                acked_round,
            } => {
                m.set("acked_round", acked_round)
                    .set("decision", decision.as_str())
                    .set("round", round)
                    .set("session_id", session_id.map(hex::encode).unwrap_or_default());
            }
            Message::Error { code, message } => {
                m.set("code", code).set("message", message.replace('\n', " "));
            }
            Message::Shutdown { reason } => {
                m.set("reason", reason);
            }
        }
        let mut out = m.encode();
        if let Some(t) = tensors {
            out.push(b'\n');
            out.extend(tensor::serialize(t));
        }
        out
    }

    pub fn to_frame(&self) -> Frame {
        Frame {
            msg_type: self.msg_type(),
            payload: self.payload(),
        }
    }

    /// Encoded frame bytes.
    pub fn encode(&self) -> Result<Vec<u8>, ProtoError> {
        encode_frame(self.msg_type(), &self.payload())
    }

    pub fn from_frame(frame: &Frame) -> Result<Message, ProtoError> {
        let t = frame.msg_type;
        let bad = |reason: String| ProtoError::MalformedPayload { msg: t, reason };
        let (header, body) = match t {
            MsgType::RoundStart | MsgType::RoundResult => {
                split_header(&frame.payload).ok_or_else(|| bad("missing header terminator".into()))?
            }
            _ => (frame.payload.as_slice(), &[][..]),
        };
        let m = TextMap::decode(header).map_err(&bad)?;
        let text = |k: &str| {
            m.get(k)
                .map(str::to_string)
                .ok_or_else(|| bad(format!("missing `{k}`")))
        };
        fn num<T: std::str::FromStr>(m: &TextMap, k: &str) -> Option<T> {
            m.get(k)?.parse().ok()
        }
        let int = |k: &str| num::<u32>(&m, k).ok_or_else(|| bad(format!("missing or invalid `{k}`")));
        let float = |k: &str| num::<f64>(&m, k).ok_or_else(|| bad(format!("missing or invalid `{k}`")));
        let bytes_n = |k: &str, n: usize| -> Result<Vec<u8>, ProtoError> {
            let v = hex::decode(text(k)?).map_err(|_| bad(format!("`{k}` is not hex")))?;
            if v.len() != n {
                return Err(bad(format!("`{k}` must be {n} bytes")));
            }
            Ok(v)
        };
        let session = |k: &str| -> Result<Option<[u8; 16]>, ProtoError> {
            if m.get(k).unwrap_or("").is_empty() {
                Ok(None)
            } else {
                Ok(Some(bytes_n(k, 16)?.try_into().unwrap()))
            }
        };
        Ok(match t {
            MsgType::Hello => Message::Hello {
                node_id: text("node_id")?,
            },
            MsgType::Challenge => Message::Challenge {
                nonce: bytes_n("nonce", 32)?.try_into().unwrap(),
            },
            MsgType::AuthProof => Message::AuthProof {
                node_id: text("node_id")?,
                proof: bytes_n("proof", 32)?.try_into().unwrap(),
            },
            MsgType::JoinAck => Message::JoinAck {
                node_id: text("node_id")?,
                approved: match text("approval")?.as_str() {
                    "approved" => true,
                    "pending" => false,
                    other => return Err(bad(format!("unknown approval `{other}`"))),
                },
            },
            MsgType::RoundStart => Message::RoundStart(RoundStart {
                round: int("round")?,
                total_rounds: int("total_rounds")?,
                epochs: int("epochs")?,
                acked_round: int("acked_round")?,
                model: tensor::deserialize(body)?,
            }),
            MsgType::RoundResult => {
                let eval = if m.get("eval.tp").is_some() {
                    let c = |k: &str| num::<u64>(&m, k).ok_or_else(|| bad(format!("missing or invalid `{k}`")));
                    Some(NodeEval {
                        counts: ConfusionCounts {
                            tp: c("eval.tp")?,
                            fp: c("eval.fp")?,
                            tn: c("eval.tn")?,
                            fn_: c("eval.fn")?,
                        },
                        roc_auc: match m.get("eval.auc") {
                            Some(_) => Some(float("eval.auc")?),
                            None => None,
                        },
                    })
                } else {
                    None
                };
                let sample_count = num::<u64>(&m, "sample_count")
                    .filter(|&n| n > 0)
                    .ok_or_else(|| bad("sample_count must be a positive integer".into()))?;
                Message::RoundResult(RoundResult {
                    round: int("round")?,
                    node_id: text("node_id")?,
                    sample_count,
                    epochs: int("epochs")?,
                    train_loss: float("train_loss")?,
                    val_loss: float("val_loss")?,
                    eval,
                    model: tensor::deserialize(body)?,
                })
            }
            MsgType::RoundAck => Message::RoundAck { round: int("round")? },
            MsgType::Heartbeat => {
                if !frame.payload.is_empty() {
                    return Err(bad("heartbeat carries no payload".into()));
                }
                Message::Heartbeat
            }
            MsgType::ResumeReq => Message::ResumeReq {
                session_id: session("session_id")?,
                last_acked_round: int("last_acked_round")?,
            },
            MsgType::ResumeState => Message::ResumeState {
                decision: ResumeDecision::parse(&text("decision")?).ok_or_else(|| bad("unknown decision".into()))?,
                session_id: session("session_id")?,
                round: int("round")?,
                acked_round: int("acked_round")?,
            },
            MsgType::Error => Message::Error {
                code: text("code")?,
                message: text("message")?,
            },
            MsgType::Shutdown => Message::Shutdown {
                reason: text("reason")?,
            },
        })
    }

    /// Decodes one complete frame's bytes.
    pub fn decode(bytes: &[u8]) -> Result<Message, ProtoError> {
        let (frame, used) = decode_frame(bytes)?;
        if used != bytes.len() {
            return Err(ProtoError::MalformedPayload {
                msg: frame.msg_type,
                reason: "trailing bytes after frame".into(),
            });
        }
        Message::from_frame(&frame)
    }
}

/// `HMAC-SHA256(key = token, message = nonce || UTF-8(node_id))`.
pub fn prove(token: &[u8], nonce: &[u8], node_id: &str) -> [u8; 32] {
    let key = hmac::Key::new(hmac::HMAC_SHA256, token);
    let mut ctx = hmac::Context::with_key(&key);
    ctx.update(nonce);
    ctx.update(node_id.as_bytes());
    ctx.sign().as_ref().try_into().expect("SHA-256 tag is 32 bytes")
}

/// Constant-time check of a proof; does not track nonce state.
pub fn proof_matches(token: &[u8], nonce: &[u8], node_id: &str, proof: &[u8]) -> bool {
    let key = hmac::Key::new(hmac::HMAC_SHA256, token);
    let mut msg = Vec::with_capacity(nonce.len() + node_id.len());
    msg.extend_from_slice(nonce);
    msg.extend_from_slice(node_id.as_bytes());
    hmac::verify(&key, &msg, proof).is_ok()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthChallenge {
    pub nonce: [u8; 32],
    pub issued_at_ms: u64,
    pub consumed: bool,
}

/// Issued nonces. Each validates at most one proof attempt, successful or not.
#[derive(Debug)]
pub struct ChallengeRegistry {
    ttl_ms: u64,
    challenges: HashMap<[u8; 32], AuthChallenge>,
}

impl Default for ChallengeRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_NONCE_TTL_MS)
    }
}

impl ChallengeRegistry {
    pub fn new(ttl_ms: u64) -> Self {
        Self {
            ttl_ms,
            challenges: HashMap::new(),
        }
    }

    pub fn issue<R: RngCore>(&mut self, rng: &mut R, now_ms: u64) -> [u8; 32] {
        self.prune(now_ms);
        loop {
            let mut nonce = [0u8; 32];
            rng.fill_bytes(&mut nonce);
            if let std::collections::hash_map::Entry::Vacant(slot) = self.challenges.entry(nonce) {
                slot.insert(AuthChallenge {
                    nonce,
                    issued_at_ms: now_ms,
                    consumed: false,
                });
                return nonce;
            }
        }
    }

    /// Verifies `proof` and consumes the nonce regardless of the outcome.
    pub fn verify(
        &mut self,
        token: &[u8],
        nonce: &[u8; 32],
        node_id: &str,
        proof: &[u8],
        now_ms: u64,
    ) -> Result<(), AuthError> {
        let ttl = self.ttl_ms;
        let ch = self.challenges.get_mut(nonce).ok_or(AuthError::UnknownNonce)?;
        if ch.consumed {
            return Err(AuthError::NonceReused);
        }
        ch.consumed = true;
        if now_ms.saturating_sub(ch.issued_at_ms) > ttl {
            return Err(AuthError::NonceExpired);
        }
        if proof_matches(token, nonce, node_id, proof) {
            Ok(())
        } else {
            Err(AuthError::BadProof)
        }
    }

    /// Forgets challenges old enough that they could only fail as expired.
    /// Consumed nonces are kept for a second TTL so replays report `NonceReused`.
    fn prune(&mut self, now_ms: u64) {
        let ttl = self.ttl_ms;
        self.challenges
            .retain(|_, c| now_ms.saturating_sub(c.issued_at_ms) <= ttl.saturating_mul(2));
    }

    pub fn len(&self) -> usize {
        self.challenges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.challenges.is_empty()
    }
}

/// Node-held resume cursor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionTicket {
    pub session_id: [u8; 16],
    pub node_id: String,
    pub last_acked_round: u32,
}

impl SessionTicket {
    /// Advances the cursor; it never moves backwards.
    pub fn ack(&mut self, round: u32) {
        self.last_acked_round = self.last_acked_round.max(round);
    }

    pub fn to_text(&self) -> String {
        let mut m = TextMap::new();
        m.set("last_acked_round", self.last_acked_round)
            .set("node_id", &self.node_id)
            .set("session_id", hex::encode(self.session_id));
        String::from_utf8(m.encode()).expect("text map is UTF-8")
    }

    pub fn from_text(text: &str) -> Option<Self> {
        let m = TextMap::decode(text.as_bytes()).ok()?;
        Some(Self {
            session_id: hex::decode(m.get("session_id")?).ok()?.try_into().ok()?,
            node_id: m.get("node_id")?.to_string(),
            last_acked_round: m.get("last_acked_round")?.parse().ok()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> TensorMap {
        TensorMap::from_entries(vec![
            Tensor::new("w0", vec![2, 1], vec![0.5, -1.25]).unwrap(),
            Tensor::new("b0", vec![1], vec![0.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn heartbeat_bytes() {
        assert_eq!(Message::Heartbeat.encode().unwrap(), vec![0, 0, 0, 0, 0x08]);
        assert_eq!(encode_frame(MsgType::Heartbeat, &[]).unwrap(), vec![0, 0, 0, 0, 8]);
    }

    #[test]
    fn frame_errors() {
        assert_eq!(decode_frame(&[0, 0, 0, 3, 8, 1]), Err(ProtoError::Truncated));
        assert_eq!(decode_frame(&[0, 0]), Err(ProtoError::Truncated));
        assert_eq!(decode_frame(&[0, 0, 0, 0, 0x0D]), Err(ProtoError::UnknownType(0x0D)));
        assert_eq!(decode_frame(&[0, 0, 0, 0, 0x00]), Err(ProtoError::UnknownType(0)));
        assert!(matches!(
            decode_frame_capped(&[0, 0, 1, 0, 8], 16),
            Err(ProtoError::Oversize { len: 256, cap: 16 })
        ));
        assert!(matches!(
            encode_frame_capped(MsgType::Error, &[0; 17], 16),
            Err(ProtoError::Oversize { .. })
        ));
    }

    #[test]
    fn stream_decoder_waits_for_complete_frames() {
        let mut bytes = Message::Hello { node_id: "a".into() }.encode().unwrap();
        bytes.extend(Message::Heartbeat.encode().unwrap());
        let mut dec = FrameDecoder::default();
        for (i, b) in bytes.iter().enumerate() {
            dec.push(std::slice::from_ref(b));
            let got = dec.next_frame().unwrap();
            if i == 14 {
                assert_eq!(got.unwrap().msg_type, MsgType::Hello);
            } else if i + 1 != bytes.len() {
                assert!(got.is_none(), "byte {i}");
            } else {
                assert_eq!(got.unwrap().msg_type, MsgType::Heartbeat);
            }
        }
        assert_eq!(dec.buffered(), 0);
    }

    #[test]
    fn stream_stops_at_first_error() {
        let mut bytes = Message::Heartbeat.encode().unwrap();
        bytes.extend([0, 0, 0, 0, 0x7F]);
        bytes.extend(Message::Heartbeat.encode().unwrap());
        let (frames, err) = decode_stream(&bytes);
        assert_eq!(frames.len(), 1);
        assert_eq!(err, Some(ProtoError::UnknownType(0x7F)));

        let mut dec = FrameDecoder::default();
        dec.push(&bytes);
        assert!(dec.next_frame().unwrap().is_some());
        assert!(dec.next_frame().is_err());
        assert!(dec.next_frame().is_err());
    }

    #[test]
    fn messages_round_trip() {
        let msgs = vec![
            Message::Hello {
                node_id: "uganda".into(),
            },
            Message::Challenge { nonce: [7; 32] },
            Message::AuthProof {
                node_id: "x".into(),
                proof: [9; 32],
            },
            Message::JoinAck {
                node_id: "x".into(),
                approved: false,
            },
            Message::RoundStart(RoundStart {
                round: 3,
                total_rounds: 20,
                epochs: 10,
                acked_round: 2,
                model: model(),
            }),
            Message::RoundResult(RoundResult {
                round: 3,
                node_id: "x".into(),
                sample_count: 354,
                epochs: 10,
                train_loss: 0.25,
                val_loss: 0.3125,
                eval: Some(NodeEval {
                    counts: ConfusionCounts {
                        tp: 1,
                        fp: 2,
                        tn: 3,
                        fn_: 4,
                    },
                    roc_auc: Some(0.75),
                }),
                model: model(),
            }),
            Message::RoundResult(RoundResult {
                round: 1,
                node_id: "y".into(),
                sample_count: 1,
                epochs: 1,
                train_loss: 0.1,
                val_loss: 0.2,
                eval: None,
                model: TensorMap::new(),
            }),
            Message::RoundAck { round: 4 },
            Message::Heartbeat,
            Message::ResumeReq {
                session_id: Some([1; 16]),
                last_acked_round: 5,
            },
            Message::ResumeReq {
                session_id: None,
                last_acked_round: 0,
            },
            Message::ResumeState {
                decision: ResumeDecision::Wait,
                session_id: Some([2; 16]),
                round: 6,
                acked_round: 6,
            },
            Message::Error {
                code: "unauthenticated".into(),
                message: "say hello".into(),
            },
            Message::Shutdown {
                reason: "finished".into(),
            },
        ];
        for m in msgs {
            let bytes = m.encode().unwrap();
            assert_eq!(Message::decode(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn text_map_is_canonical() {
        assert!(TextMap::decode(b"b=1\na=2\n").is_err());
        assert!(TextMap::decode(b"a=1\na=2\n").is_err());
        assert!(TextMap::decode(b"a=1").is_err());
        let mut m = TextMap::new();
        m.set("z", 1).set("a", "x=y");
        assert_eq!(m.encode(), b"a=x=y\nz=1\n");
        assert_eq!(TextMap::decode(&m.encode()).unwrap(), m);
    }

    #[test]
    fn round_start_layout() {
        let m = Message::RoundStart(RoundStart {
            round: 1,
            total_rounds: 20,
            epochs: 10,
            acked_round: 0,
            model: TensorMap::new(),
        });
        let payload = m.payload();
        assert_eq!(
            payload,
            b"acked_round=0\nepochs=10\nround=1\ntotal_rounds=20\n\nFTM1\0\0\0\0"
        );
    }

    #[test]
    fn hmac_rfc4231_case_2() {
        let mac = prove(b"Jefe", b"what do ya want ", "for nothing?");
        assert_eq!(
            hex::encode(mac),
            "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"
        );
    }

    #[test]
    fn nonce_is_single_use() {
        let mut reg = ChallengeRegistry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nonce = reg.issue(&mut rng, 0);
        let proof = prove(b"secret", &nonce, "node");
        assert_eq!(reg.verify(b"secret", &nonce, "node", &proof, 10), Ok(()));
        assert_eq!(
            reg.verify(b"secret", &nonce, "node", &proof, 11),
            Err(AuthError::NonceReused)
        );
    }

    #[test]
    fn failed_attempt_consumes_nonce() {
        let mut reg = ChallengeRegistry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let nonce = reg.issue(&mut rng, 0);
        let mut wrong = b"secret".to_vec();
        wrong[0] ^= 1;
        let bad = prove(&wrong, &nonce, "node");
        assert_eq!(reg.verify(b"secret", &nonce, "node", &bad, 1), Err(AuthError::BadProof));
        let good = prove(b"secret", &nonce, "node");
        assert_eq!(
            reg.verify(b"secret", &nonce, "node", &good, 2),
            Err(AuthError::NonceReused)
        );
    }

    #[test]
    fn nonce_expiry_and_unknown() {
        let mut reg = ChallengeRegistry::new(30_000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nonce = reg.issue(&mut rng, 1_000);
        let proof = prove(b"t", &nonce, "n");
        assert_eq!(
            reg.verify(b"t", &nonce, "n", &proof, 31_001),
            Err(AuthError::NonceExpired)
        );
        assert_eq!(reg.verify(b"t", &[0; 32], "n", &proof, 0), Err(AuthError::UnknownNonce));
    }

    #[test]
    fn proof_binds_node_id() {
        let nonce = [5u8; 32];
        let p = prove(b"tok", &nonce, "alpha");
        assert!(proof_matches(b"tok", &nonce, "alpha", &p));
        assert!(!proof_matches(b"tok", &nonce, "alphb", &p));
    }

    #[test]
    fn ticket_cursor_is_monotone() {
        let mut t = SessionTicket {
            session_id: [3; 16],
            node_id: "n".into(),
            last_acked_round: 4,
        };
        t.ack(2);
        assert_eq!(t.last_acked_round, 4);
        t.ack(5);
        assert_eq!(t.last_acked_round, 5);
        assert_eq!(SessionTicket::from_text(&t.to_text()), Some(t));
    }
}
