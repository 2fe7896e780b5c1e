//! Protocol identity types, the 32-bit header codec and stack configuration.
//!
//! Header layout, most significant bit first:
//!
//! ```text
//!  31 30 | 29 .. 25 | 24 .. 20 | 19 .. 14 | 13 .. 8 | 7 .. 0
//!  prio  |  source  |   dest   |  dport   |  sport  | flags
//! ```
//!
//! On the wire the word is big-endian.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_PRIORITY: u8 = 3;
pub const MAX_ADDRESS: u8 = 31;
pub const MAX_PORT: u8 = 63;

/// Largest payload a fragmented stream can address with an 8-bit remain
/// counter: two bytes in the BEGIN frame plus 255 full MORE frames.
pub const MAX_DATA_LEN_LIMIT: usize = 2 + 255 * 8;

/// Size of the encoded header on the wire.
pub const HEADER_LEN: usize = 4;

const PRIO_SHIFT: u32 = 30;
const SRC_SHIFT: u32 = 25;
const DST_SHIFT: u32 = 20;
const DPORT_SHIFT: u32 = 14;
const SPORT_SHIFT: u32 = 8;

pub(crate) fn check_range(field: &'static str, value: u64, max: u64) -> Result<()> {
    if value > max {
        return Err(Error::FieldRange { field, value, max });
    }
    Ok(())
}

/// Decoded packet identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CspId {
    priority: u8,
    source: u8,
    destination: u8,
    dest_port: u8,
    source_port: u8,
    flags: u8,
}

impl CspId {
    pub fn new(
        priority: u8,
        source: u8,
        destination: u8,
        dest_port: u8,
        source_port: u8,
        flags: u8,
    ) -> Result<Self> {
        check_range("priority", priority.into(), MAX_PRIORITY.into())?;
        check_range("source", source.into(), MAX_ADDRESS.into())?;
        check_range("destination", destination.into(), MAX_ADDRESS.into())?;
        check_range("dest_port", dest_port.into(), MAX_PORT.into())?;
        check_range("source_port", source_port.into(), MAX_PORT.into())?;
        Ok(Self {
            priority,
            source,
            destination,
            dest_port,
            source_port,
            flags,
        })
    }

    pub fn priority(&self) -> u8 {
        self.priority
    }

    pub fn source(&self) -> u8 {
        self.source
    }

    pub fn destination(&self) -> u8 {
        self.destination
    }

    pub fn dest_port(&self) -> u8 {
        self.dest_port
    }

    pub fn source_port(&self) -> u8 {
        self.source_port
    }

    /// Opaque flag byte. No flag is interpreted by this stack.
    pub fn flags(&self) -> u8 {
        self.flags
    }

    pub fn to_word(self) -> u32 {
        encode_csp_header(self)
    }

    pub fn from_word(word: u32) -> Self {
        decode_csp_header(word)
    }

    pub fn to_be_bytes(self) -> [u8; HEADER_LEN] {
        self.to_word().to_be_bytes()
    }

    pub fn from_be_bytes(bytes: [u8; HEADER_LEN]) -> Self {
        Self::from_word(u32::from_be_bytes(bytes))
    }
}

impl fmt::Display for CspId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} (prio {}, flags {:#04x})",
            self.source, self.source_port, self.destination, self.dest_port, self.priority, self.flags
        )
    }
}

pub fn encode_csp_header(id: CspId) -> u32 {
    u32::from(id.priority) << PRIO_SHIFT
        | u32::from(id.source) << SRC_SHIFT
        | u32::from(id.destination) << DST_SHIFT
        | u32::from(id.dest_port) << DPORT_SHIFT
        | u32::from(id.source_port) << SPORT_SHIFT
        | u32::from(id.flags)
}

/// Every 32-bit word decodes; the masks keep each field in range.
pub fn decode_csp_header(word: u32) -> CspId {
    CspId {
        priority: ((word >> PRIO_SHIFT) & 0x3) as u8,
        source: ((word >> SRC_SHIFT) & 0x1f) as u8,
        destination: ((word >> DST_SHIFT) & 0x1f) as u8,
        dest_port: ((word >> DPORT_SHIFT) & 0x3f) as u8,
        source_port: ((word >> SPORT_SHIFT) & 0x3f) as u8,
        flags: (word & 0xff) as u8,
    }
}

/// An owned packet: identity plus a length-bounded payload.
///
/// Inside the stack packets travel as [`PacketBuf`](crate::pool::PacketBuf)
/// descriptors over pooled storage; this owned form is the API edge.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CspPacket {
    pub id: CspId,
    pub length: usize,
    pub data: Vec<u8>,
}

impl CspPacket {
    pub fn new(id: CspId, data: impl Into<Vec<u8>>) -> Self {
        let data = data.into();
        Self {
            id,
            length: data.len(),
            data,
        }
    }
}

pub fn validate_packet(p: &CspPacket, cfg: &Config) -> Result<()> {
    if p.length > cfg.max_data_len {
        return Err(Error::LengthExceedsBuffer {
            len: p.length,
            max: cfg.max_data_len,
        });
    }
    if p.data.len() != p.length {
        return Err(Error::LengthMismatch {
            declared: p.length,
            actual: p.data.len(),
        });
    }
    Ok(())
}

/// Stack configuration, loadable from JSON with exactly these snake_case keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub pool_capacity: usize,
    /// Bytes of payload per buffer (`CSP_BUFFER_SIZE` in the C library).
    pub max_data_len: usize,
    pub rx_slot_count: usize,
    pub reassembly_timeout_ms: u64,
    pub queue_depth: usize,
    pub local_address: u8,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            pool_capacity: 10,
            max_data_len: 256,
            rx_slot_count: 2,
            reassembly_timeout_ms: 1000,
            queue_depth: 16,
            local_address: 1,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.pool_capacity == 0 {
            return Err(Error::InvalidConfig("pool_capacity must be at least 1".into()));
        }
        if self.max_data_len > MAX_DATA_LEN_LIMIT {
            return Err(Error::InvalidConfig(format!(
                "max_data_len {} exceeds {MAX_DATA_LEN_LIMIT}",
                self.max_data_len
            )));
        }
        if self.rx_slot_count == 0 {
            return Err(Error::InvalidConfig("rx_slot_count must be at least 1".into()));
        }
        if self.queue_depth == 0 {
            return Err(Error::InvalidConfig("queue_depth must be at least 1".into()));
        }
        if self.local_address > MAX_ADDRESS {
            return Err(Error::InvalidConfig(format!(
                "local_address {} exceeds {MAX_ADDRESS}",
                self.local_address
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

macro_rules! counters {
    ($($(#[$doc:meta])* $name:ident),* $(,)?) => {
        /// Point-in-time copy of the drop and delivery counters.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
        pub struct Stats {
            $($(#[$doc])* pub $name: u64,)*
        }

        /// Shared monotone counters. Every drop path bumps exactly one of them.
        #[derive(Debug, Default)]
        pub struct Counters {
            $(pub(crate) $name: AtomicU64,)*
        }

        impl Counters {
            pub fn snapshot(&self) -> Stats {
                Stats {
                    $($name: self.$name.load(Ordering::Relaxed),)*
                }
            }
        }
    };
}

counters! {
    rx_delivered,
    rx_dropped_no_begin,
    /// Bad dlc, over-declared length, runt or oversize serial frame.
    rx_dropped_len,
    rx_dropped_overflow,
    rx_dropped_truncated,
    /// Remain counter out of sequence.
    rx_dropped_sequence,
    rx_no_buffer,
    rx_preempted,
    rx_timeout,
    /// CFP addressing disagreed with the carried header. Not a drop.
    rx_header_mismatch,
    q_overflow,
    port_unbound,
    socket_overflow,
    not_local,
}

impl Counters {
    pub(crate) fn bump(counter: &AtomicU64) {
        counter.fetch_add(1, Ordering::Relaxed);
    }
}

macro_rules! bump {
    ($counters:expr, $name:ident) => {
        $crate::model::Counters::bump(&$counters.$name)
    };
}
pub(crate) use bump;
