//! V2X byte framing and a seeded lossy channel.
//!
//! Wire layout, all integers big-endian:
//!
//! ```text
//! "HDM1" | version: u8 = 1 | len: u32 | payload: len bytes | crc32(payload): u32
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo_map::{GeoJsonError, GeoLaneMap};

pub const MAGIC: [u8; 4] = *b"HDM1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 9;
pub const TRAILER_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("bad magic {0:02x?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("payload checksum mismatch: header {expected:#010x}, computed {actual:#010x}")]
    Corruption { expected: u32, actual: u32 },
    #[error("payload parse error: {0}")]
    Parse(#[from] GeoJsonError),
    #[error("payload of {0} bytes exceeds the 32-bit length field")]
    Oversize(usize),
    #[error("invalid channel config: {0}")]
    BadConfig(String),
}

/// Coarse class of a decode failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecodeErrorKind {
    Protocol,
    UnsupportedVersion,
    Framing,
    Corruption,
    Parse,
}

impl TransportError {
    pub fn kind(&self) -> Option<DecodeErrorKind> {
        Some(match self {
            Self::BadMagic(_) => DecodeErrorKind::Protocol,
            Self::UnsupportedVersion(_) => DecodeErrorKind::UnsupportedVersion,
            Self::Framing(_) => DecodeErrorKind::Framing,
            Self::Corruption { .. } => DecodeErrorKind::Corruption,
            Self::Parse(_) => DecodeErrorKind::Parse,
            Self::Oversize(_) | Self::BadConfig(_) => return None,
        })
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Frames raw payload bytes.
pub fn encode_payload(payload: &[u8]) -> Result<Vec<u8>, TransportError> {
    let len = u32::try_from(payload.len()).map_err(|_| TransportError::Oversize(payload.len()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32(payload).to_be_bytes());
    Ok(out)
}

pub fn encode_frame(map: &GeoLaneMap) -> Result<Vec<u8>, TransportError> {
    encode_payload(&map.to_bytes())
}

/// Checks header, length and checksum and returns the payload slice.
pub fn decode_payload(data: &[u8]) -> Result<&[u8], TransportError> {
    if data.len() < MAGIC.len() {
        return Err(TransportError::Framing(format!(
            "{} bytes is shorter than the magic",
            data.len()
        )));
    }
    if data[..4] != MAGIC {
        return Err(TransportError::BadMagic(data[..4].to_vec()));
    }
    if data.len() < HEADER_LEN {
        return Err(TransportError::Framing(format!(
            "{} bytes is shorter than the header",
            data.len()
        )));
    }
    if data[4] != VERSION {
        return Err(TransportError::UnsupportedVersion(data[4]));
    }
    let len = u32::from_be_bytes(data[5..9].try_into().unwrap()) as usize;
    let want = HEADER_LEN as u64 + len as u64 + TRAILER_LEN as u64;
    if data.len() as u64 != want {
        return Err(TransportError::Framing(format!(
            "declared payload of {len} bytes needs a {want}-byte frame, got {}",
            data.len()
        )));
    }
    let payload = &data[HEADER_LEN..HEADER_LEN + len];
    let expected = u32::from_be_bytes(data[HEADER_LEN + len..].try_into().unwrap());
    let actual = crc32(payload);
    if expected != actual {
        return Err(TransportError::Corruption { expected, actual });
    }
    Ok(payload)
}

pub fn decode_frame(data: &[u8]) -> Result<GeoLaneMap, TransportError> {
    let payload = decode_payload(data)?;
    let text = std::str::from_utf8(payload)
        .map_err(|e| GeoJsonError::Syntax(format!("payload is not UTF-8: {e}")))?;
    Ok(GeoLaneMap::from_json(text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub drop_probability: f64,
    pub latency_ms_min: u64,
    pub latency_ms_max: u64,
    pub reorder: bool,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self::lossless(0)
    }
}

impl ChannelConfig {
    /// No drops, no latency.
    pub fn lossless(seed: u64) -> Self {
        Self {
            drop_probability: 0.0,
            latency_ms_min: 0,
            latency_ms_max: 0,
            reorder: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        if !(0.0..=1.0).contains(&self.drop_probability) {
            return Err(TransportError::BadConfig(format!(
                "drop_probability {} outside [0, 1]",
                self.drop_probability
            )));
        }
        if self.latency_ms_min > self.latency_ms_max {
            return Err(TransportError::BadConfig(format!(
                "latency_ms_min {} > latency_ms_max {}",
                self.latency_ms_min, self.latency_ms_max
            )));
        }
        Ok(())
    }
}

/// A frame that survived the channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    /// Position in the submitted sequence.
    pub index: usize,
    pub deliver_time_ms: u64,
}

/// Fate of every submitted frame, in submission order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    pub deliveries: Vec<Delivery>,
    pub dropped: Vec<usize>,
}

/// Simulates the channel for `count` frames all sent at time 0.
pub fn channel_schedule(cfg: &ChannelConfig, count: usize) -> Result<Schedule, TransportError> {
    channel_schedule_at(cfg, &vec![0; count])
}

/// Simulates the channel for frames sent at the given times, in submission
/// order. Each frame draws a drop decision and then, when it survives, a
/// latency. Deliveries are returned in arrival order; ties keep submission
/// order.
pub fn channel_schedule_at(
    cfg: &ChannelConfig,
    send_times_ms: &[u64],
) -> Result<Schedule, TransportError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut deliveries = Vec::new();
    let mut dropped = Vec::new();
    let mut floor = 0u64;
    for (index, &sent) in send_times_ms.iter().enumerate() {
        let u: f64 = rng.random();
        if u < cfg.drop_probability {
            dropped.push(index);
            continue;
        }
        let latency = rng.random_range(cfg.latency_ms_min..=cfg.latency_ms_max);
        let mut t = sent.saturating_add(latency);
        if !cfg.reorder {
            t = t.max(floor);
            floor = t;
        }
        deliveries.push(Delivery {
            index,
            deliver_time_ms: t,
        });
    }
    deliveries.sort_by_key(|d| (d.deliver_time_ms, d.index));
    Ok(Schedule {
        deliveries,
        dropped,
    })
}

/// Pairs each surviving frame with its delivery time, in arrival order.
pub fn channel_transmit(
    cfg: &ChannelConfig,
    frames: &[Vec<u8>],
) -> Result<Vec<(Vec<u8>, u64)>, TransportError> {
    let schedule = channel_schedule(cfg, frames.len())?;
    Ok(schedule
        .deliveries
        .into_iter()
        .map(|d| (frames[d.index].clone(), d.deliver_time_ms))
        .collect())
}
