//! Protocol messages, their payload encodings, and the channel abstraction.
//!
//! The federation state machines speak `Message` over a `Channel`; the TLS
//! transport carries encoded payloads inside CRC-framed records, and the
//! in-process channel (for tests) carries the same encoded payloads over
//! mpsc pairs so byte accounting and codec coverage match the wire.

use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::metrics::MetricsReport;
use crate::model::ModelConfig;

/// Wire overhead of one frame around its payload:
/// length u32 + version u8 + kind u8 + round u32 + crc32 u32.
pub const FRAME_OVERHEAD: u64 = 14;

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    JoinRequest {
        name: String,
        d_tab: u32,
        n_samples: u64,
    },
    JoinAccept {
        client_id: u32,
        model: ModelConfig,
        federation: FederationConfig,
    },
    JoinReject {
        reason: String,
    },
    RoundStart {
        round: u32,
        weights: Vec<f32>,
    },
    RoundUpdate {
        round: u32,
        weights: Vec<f32>,
        layout_hash: u64,
        n_samples: u64,
        train_loss: f32,
        validation: MetricsReport,
    },
    RoundResult {
        round: u32,
        metrics: MetricsReport,
    },
    Shutdown {
        weights_hash: u64,
    },
}

#[derive(Serialize, Deserialize)]
struct JoinRequestBody {
    name: String,
    d_tab: u32,
    n_samples: u64,
}

#[derive(Serialize, Deserialize)]
struct JoinAcceptBody {
    client_id: u32,
    model: ModelConfig,
    federation: FederationConfig,
}

#[derive(Serialize, Deserialize)]
struct JoinRejectBody {
    reason: String,
}

/// 64-bit digest of a weight vector's little-endian bytes.
pub fn hash_weights(weights: &[f32]) -> u64 {
    let mut hasher = Sha256::new();
    for &v in weights {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Little-endian f32 serialization behind an element-count header.
/// Non-finite values are a protocol error, never transferred silently.
pub fn encode_weights(weights: &[f32]) -> Result<Vec<u8>> {
    if let Some(bad) = weights.iter().position(|v| !v.is_finite()) {
        return Err(Error::Protocol(format!(
            "weight {bad} is not finite; refusing to encode"
        )));
    }
    let mut out = Vec::with_capacity(8 + weights.len() * 4);
    out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    for &v in weights {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Inverse of `encode_weights`; bit-exact on finite vectors.
pub fn decode_weights(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() < 8 {
        return Err(Error::Codec(format!(
            "weight payload has {} bytes, expected at least the 8-byte count",
            bytes.len()
        )));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let expected = 8 + count * 4;
    if bytes.len() != expected {
        return Err(Error::Codec(format!(
            "weight payload has {} bytes, count header implies {expected}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for (i, chunk) in bytes[8..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Protocol(format!("weight {i} is not finite")));
        }
        out.push(v);
    }
    Ok(out)
}

fn put_json<T: Serialize>(out: &mut Vec<u8>, value: &T) -> Result<()> {
    let json = serde_json::to_vec(value).map_err(|e| Error::Codec(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Codec(format!(
                "payload truncated: wanted {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self) -> Result<T> {
        let len = self.u32()? as usize;
        let body = self.take(len)?;
        serde_json::from_slice(body).map_err(|e| Error::Codec(format!("bad JSON body: {e}")))
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Codec(format!(
                "{} trailing bytes in payload",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

impl Message {
    /// Fixed wire codes 1..=7.
    pub fn kind(&self) -> u8 {
        match self {
            Message::JoinRequest { .. } => 1,
            Message::JoinAccept { .. } => 2,
            Message::JoinReject { .. } => 3,
            Message::RoundStart { .. } => 4,
            Message::RoundUpdate { .. } => 5,
            Message::RoundResult { .. } => 6,
            Message::Shutdown { .. } => 7,
        }
    }

    /// Round tag carried in the frame header; join traffic uses 0.
    pub fn round(&self) -> u32 {
        match self {
            Message::RoundStart { round, .. }
            | Message::RoundUpdate { round, .. }
            | Message::RoundResult { round, .. } => *round,
            _ => 0,
        }
    }

    pub fn encode_payload(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        match self {
            Message::JoinRequest {
                name,
                d_tab,
                n_samples,
            } => put_json(
                &mut out,
                &JoinRequestBody {
                    name: name.clone(),
                    d_tab: *d_tab,
                    n_samples: *n_samples,
                },
            )?,
            Message::JoinAccept {
                client_id,
                model,
                federation,
            } => put_json(
                &mut out,
                &JoinAcceptBody {
                    client_id: *client_id,
                    model: model.clone(),
                    federation: federation.clone(),
                },
            )?,
            Message::JoinReject { reason } => put_json(
                &mut out,
                &JoinRejectBody {
                    reason: reason.clone(),
                },
            )?,
            Message::RoundStart { weights, .. } => {
                out.extend_from_slice(&encode_weights(weights)?);
            }
            Message::RoundUpdate {
                weights,
                layout_hash,
                n_samples,
                train_loss,
                validation,
                ..
            } => {
                out.extend_from_slice(&layout_hash.to_le_bytes());
                out.extend_from_slice(&n_samples.to_le_bytes());
                out.extend_from_slice(&train_loss.to_le_bytes());
                put_json(&mut out, validation)?;
                out.extend_from_slice(&encode_weights(weights)?);
            }
            Message::RoundResult { metrics, .. } => put_json(&mut out, metrics)?,
            Message::Shutdown { weights_hash } => {
                out.extend_from_slice(&weights_hash.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(kind: u8, round: u32, payload: &[u8]) -> Result<Message> {
        let mut c = Cursor {
            bytes: payload,
            pos: 0,
        };
        let msg = match kind {
            1 => {
                let body: JoinRequestBody = c.json()?;
                Message::JoinRequest {
                    name: body.name,
                    d_tab: body.d_tab,
                    n_samples: body.n_samples,
                }
            }
            2 => {
                let body: JoinAcceptBody = c.json()?;
                Message::JoinAccept {
                    client_id: body.client_id,
                    model: body.model,
                    federation: body.federation,
                }
            }
            3 => {
                let body: JoinRejectBody = c.json()?;
                Message::JoinReject {
                    reason: body.reason,
                }
            }
            4 => Message::RoundStart {
                round,
                weights: decode_weights(c.rest())?,
            },
            5 => {
                let layout_hash = c.u64()?;
                let n_samples = c.u64()?;
                let train_loss = c.f32()?;
                let validation: MetricsReport = c.json()?;
                let weights = decode_weights(c.rest())?;
                Message::RoundUpdate {
                    round,
                    weights,
                    layout_hash,
                    n_samples,
                    train_loss,
                    validation,
                }
            }
            6 => Message::RoundResult {
                round,
                metrics: c.json()?,
            },
            7 => Message::Shutdown {
                weights_hash: c.u64()?,
            },
            other => {
                return Err(Error::Protocol(format!("unknown message kind {other}")));
            }
        };
        c.finish()?;
        Ok(msg)
    }

    /// Bytes this message occupies on the wire, frame included.
    pub fn wire_size(&self) -> Result<u64> {
        Ok(FRAME_OVERHEAD + self.encode_payload()?.len() as u64)
    }
}

/// Bidirectional ordered message stream with byte accounting.
pub trait Channel: Send {
    fn send(&mut self, msg: &Message) -> Result<()>;
    fn recv(&mut self) -> Result<Message>;
    /// Authenticated peer identity (TLS certificate common name, or the
    /// configured name for in-process channels).
    fn peer_name(&self) -> &str;
    fn bytes_sent(&self) -> u64;
    fn bytes_received(&self) -> u64;
}

/// In-memory channel pair carrying encoded payloads; counts the bytes the
/// TLS transport would have framed. Exists for fast federation tests.
pub struct InProcessChannel {
    peer: String,
    tx: mpsc::Sender<(u8, u32, Vec<u8>)>,
    rx: mpsc::Receiver<(u8, u32, Vec<u8>)>,
    recv_timeout: Duration,
    sent: u64,
    received: u64,
}

impl InProcessChannel {
    /// Build both ends; the server side reports the client's name as its
    /// peer and vice versa.
    pub fn pair(client_name: &str) -> (InProcessChannel, InProcessChannel) {
        let (to_client, from_server) = mpsc::channel();
        let (to_server, from_client) = mpsc::channel();
        let server_side = InProcessChannel {
            peer: client_name.to_string(),
            tx: to_client,
            rx: from_client,
            recv_timeout: Duration::from_secs(600),
            sent: 0,
            received: 0,
        };
        let client_side = InProcessChannel {
            peer: "server".to_string(),
            tx: to_server,
            rx: from_server,
            recv_timeout: Duration::from_secs(600),
            sent: 0,
            received: 0,
        };
        (server_side, client_side)
    }

    pub fn set_recv_timeout(&mut self, timeout: Duration) {
        self.recv_timeout = timeout;
    }
}

impl Channel for InProcessChannel {
    fn send(&mut self, msg: &Message) -> Result<()> {
        let payload = msg.encode_payload()?;
        self.sent += FRAME_OVERHEAD + payload.len() as u64;
        self.tx
            .send((msg.kind(), msg.round(), payload))
            .map_err(|_| Error::Protocol("peer hung up".into()))
    }

    fn recv(&mut self) -> Result<Message> {
        let (kind, round, payload) = self
            .rx
            .recv_timeout(self.recv_timeout)
            .map_err(|e| match e {
                mpsc::RecvTimeoutError::Timeout => Error::Timeout("recv timed out".into()),
                mpsc::RecvTimeoutError::Disconnected => Error::Protocol("peer hung up".into()),
            })?;
        self.received += FRAME_OVERHEAD + payload.len() as u64;
        Message::decode(kind, round, &payload)
    }

    fn peer_name(&self) -> &str {
        &self.peer
    }

    fn bytes_sent(&self) -> u64 {
        self.sent
    }

    fn bytes_received(&self) -> u64 {
        self.received
    }
}
