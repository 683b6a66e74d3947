//! Wire framing: the publish-only MQTT 3.1.1 subset the pipeline speaks,
//! plus the fixed 16-byte reading-record payload encoding.
//!
//! Supported packets: Connect, ConnAck, Publish (QoS 0 only, header byte
//! exactly 0x30), PingReq, PingResp, Disconnect. Everything else, malformed
//! framing included, is a protocol violation that costs the sender its
//! session. Subscribe does not exist here: the broker side only ingests.

use thiserror::Error;

/// Topic strings on the wire are UTF-8 and capped well below MQTT's limit.
pub const MAX_TOPIC_BYTES: usize = 255;
/// Per-publish payload cap: 16 Ki records of 16 bytes.
pub const MAX_PAYLOAD_BYTES: usize = 256 * 1024;
/// Bytes per reading record: u64 timestamp then i64 value, both big-endian.
pub const RECORD_BYTES: usize = 16;

const TYPE_CONNECT: u8 = 1;
const TYPE_CONNACK: u8 = 2;
const TYPE_PUBLISH: u8 = 3;
const TYPE_PINGREQ: u8 = 12;
const TYPE_PINGRESP: u8 = 13;
const TYPE_DISCONNECT: u8 = 14;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("topic exceeds {MAX_TOPIC_BYTES} bytes")]
    TopicTooLong,
    #[error("payload exceeds {MAX_PAYLOAD_BYTES} bytes")]
    PayloadTooLarge,
    #[error("client id exceeds 65535 bytes")]
    ClientIdTooLong,
    #[error("payload length {0} is not a multiple of {RECORD_BYTES}")]
    BadLength(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Packet {
    Connect {
        client_id: String,
        keep_alive_s: u16,
        clean_session: bool,
    },
    ConnAck {
        session_present: bool,
        return_code: u8,
    },
    Publish {
        topic: String,
        payload: Vec<u8>,
    },
    PingReq,
    PingResp,
    Disconnect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeOutcome {
    /// A complete packet and how many buffer bytes it consumed.
    Packet { packet: Packet, consumed: usize },
    /// The buffer holds a valid but incomplete frame prefix.
    NeedMoreBytes,
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn encode_remaining_length(out: &mut Vec<u8>, mut len: usize) {
    loop {
        let mut byte = (len % 128) as u8;
        len /= 128;
        if len > 0 {
            byte |= 0x80;
        }
        out.push(byte);
        if len == 0 {
            break;
        }
    }
}

/// Serializes one packet into a fresh frame.
pub fn encode_packet(packet: &Packet) -> Result<Vec<u8>, WireError> {
    let (first, body): (u8, Vec<u8>) = match packet {
        Packet::Connect { client_id, keep_alive_s, clean_session } => {
            if client_id.len() > u16::MAX as usize {
                return Err(WireError::ClientIdTooLong);
            }
            let mut b = Vec::with_capacity(12 + client_id.len());
            put_u16(&mut b, 4);
            b.extend_from_slice(b"MQTT");
            b.push(4); // protocol level 3.1.1
            b.push(if *clean_session { 0x02 } else { 0x00 });
            put_u16(&mut b, *keep_alive_s);
            put_u16(&mut b, client_id.len() as u16);
            b.extend_from_slice(client_id.as_bytes());
            (TYPE_CONNECT << 4, b)
        }
        Packet::ConnAck { session_present, return_code } => {
            (TYPE_CONNACK << 4, vec![*session_present as u8, *return_code])
        }
        Packet::Publish { topic, payload } => {
            if topic.is_empty() {
                return Err(WireError::ProtocolViolation("empty topic".into()));
            }
            if topic.len() > MAX_TOPIC_BYTES {
                return Err(WireError::TopicTooLong);
            }
            if payload.len() > MAX_PAYLOAD_BYTES {
                return Err(WireError::PayloadTooLarge);
            }
            let mut b = Vec::with_capacity(2 + topic.len() + payload.len());
            put_u16(&mut b, topic.len() as u16);
            b.extend_from_slice(topic.as_bytes());
            b.extend_from_slice(payload);
            // QoS 0: no packet identifier, flags all zero.
            (TYPE_PUBLISH << 4, b)
        }
        Packet::PingReq => (TYPE_PINGREQ << 4, Vec::new()),
        Packet::PingResp => (TYPE_PINGRESP << 4, Vec::new()),
        Packet::Disconnect => (TYPE_DISCONNECT << 4, Vec::new()),
    };
    let mut out = Vec::with_capacity(2 + body.len());
    out.push(first);
    encode_remaining_length(&mut out, body.len());
    out.extend_from_slice(&body);
    Ok(out)
}

fn violation(msg: impl Into<String>) -> WireError {
    WireError::ProtocolViolation(msg.into())
}

fn read_u16(body: &[u8], at: usize) -> Result<u16, WireError> {
    body.get(at..at + 2)
        .map(|s| u16::from_be_bytes([s[0], s[1]]))
        .ok_or_else(|| violation("truncated field"))
}

fn read_str(body: &[u8], at: usize) -> Result<(&str, usize), WireError> {
    let len = read_u16(body, at)? as usize;
    let bytes = body
        .get(at + 2..at + 2 + len)
        .ok_or_else(|| violation("truncated string"))?;
    let s = std::str::from_utf8(bytes).map_err(|_| violation("string is not UTF-8"))?;
    Ok((s, at + 2 + len))
}

/// Incremental decode from the front of `buf`.
///
/// Returns `NeedMoreBytes` while `buf` is a proper prefix of a valid frame;
/// any violation is definitive no matter how many more bytes arrive.
pub fn decode_packet(buf: &[u8]) -> Result<DecodeOutcome, WireError> {
    let first = match buf.first() {
        None => return Ok(DecodeOutcome::NeedMoreBytes),
        Some(&b) => b,
    };
    let ptype = first >> 4;
    let flags = first & 0x0f;
    match ptype {
        TYPE_CONNECT | TYPE_CONNACK | TYPE_PINGREQ | TYPE_PINGRESP | TYPE_DISCONNECT => {
            if flags != 0 {
                return Err(violation(format!("reserved flags 0x{flags:x} on type {ptype}")));
            }
        }
        TYPE_PUBLISH => {
            if flags != 0 {
                // DUP/QoS/RETAIN are all outside the supported subset.
                return Err(violation("publish flags must be zero (QoS 0 only)"));
            }
        }
        other => return Err(violation(format!("unsupported packet type {other}"))),
    }

    // Remaining-length varint: 7 bits per byte, max 4 bytes.
    let mut remaining: usize = 0;
    let mut shift = 0u32;
    let mut idx = 1usize;
    loop {
        let byte = match buf.get(idx) {
            None => return Ok(DecodeOutcome::NeedMoreBytes),
            Some(&b) => b,
        };
        remaining |= ((byte & 0x7f) as usize) << shift;
        idx += 1;
        if byte & 0x80 == 0 {
            break;
        }
        shift += 7;
        if shift > 21 {
            return Err(violation("remaining length varint exceeds 4 bytes"));
        }
    }
    if buf.len() < idx + remaining {
        return Ok(DecodeOutcome::NeedMoreBytes);
    }
    let body = &buf[idx..idx + remaining];
    let consumed = idx + remaining;

    let packet = match ptype {
        TYPE_CONNECT => {
            let (name, at) = read_str(body, 0)?;
            if name != "MQTT" {
                return Err(violation(format!("bad protocol name {name:?}")));
            }
            let level = *body.get(at).ok_or_else(|| violation("missing protocol level"))?;
            if level != 4 {
                return Err(violation(format!("unsupported protocol level {level}")));
            }
            let connect_flags = *body.get(at + 1).ok_or_else(|| violation("missing connect flags"))?;
            if connect_flags & !0x02 != 0 {
                return Err(violation("will/auth connect flags are not supported"));
            }
            let keep_alive_s = read_u16(body, at + 2)?;
            let (client_id, end) = read_str(body, at + 4)?;
            if end != body.len() {
                return Err(violation("trailing bytes after connect payload"));
            }
            Packet::Connect {
                client_id: client_id.to_owned(),
                keep_alive_s,
                clean_session: connect_flags & 0x02 != 0,
            }
        }
        TYPE_CONNACK => {
            if body.len() != 2 {
                return Err(violation("connack body must be 2 bytes"));
            }
            if body[0] > 1 {
                return Err(violation("bad session-present flag"));
            }
            Packet::ConnAck { session_present: body[0] == 1, return_code: body[1] }
        }
        TYPE_PUBLISH => {
            let (topic, at) = read_str(body, 0)?;
            if topic.is_empty() {
                return Err(violation("empty topic"));
            }
            if topic.len() > MAX_TOPIC_BYTES {
                return Err(violation("topic exceeds 255 bytes"));
            }
            let payload = body[at..].to_vec();
            if payload.len() > MAX_PAYLOAD_BYTES {
                return Err(violation("payload exceeds cap"));
            }
            Packet::Publish { topic: topic.to_owned(), payload }
        }
        TYPE_PINGREQ | TYPE_PINGRESP | TYPE_DISCONNECT => {
            if !body.is_empty() {
                return Err(violation("unexpected body on control packet"));
            }
            match ptype {
                TYPE_PINGREQ => Packet::PingReq,
                TYPE_PINGRESP => Packet::PingResp,
                _ => Packet::Disconnect,
            }
        }
        _ => unreachable!(),
    };
    Ok(DecodeOutcome::Packet { packet, consumed })
}

/// Packs reading records; 16 bytes per record, big-endian.
///
/// Callers batch per sensor in sampling order, so timestamps are expected
/// to be nondecreasing.
pub fn encode_payload(records: &[(u64, i64)]) -> Vec<u8> {
    debug_assert!(records.windows(2).all(|w| w[0].0 <= w[1].0));
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for (ts, value) in records {
        out.extend_from_slice(&ts.to_be_bytes());
        out.extend_from_slice(&value.to_be_bytes());
    }
    out
}

pub fn decode_payload(bytes: &[u8]) -> Result<Vec<(u64, i64)>, WireError> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(WireError::BadLength(bytes.len()));
    }
    let mut out = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for chunk in bytes.chunks_exact(RECORD_BYTES) {
        let ts = u64::from_be_bytes(chunk[..8].try_into().unwrap());
        let value = i64::from_be_bytes(chunk[8..].try_into().unwrap());
        out.push((ts, value));
    }
    Ok(out)
}
