use std::io;

use thiserror::Error;

/// Errors surfaced by the packet stack.
///
/// Receive paths never return these for malformed traffic; they report drops
/// through outcome values instead. These are for API misuse, configuration and
/// I/O problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{field} = {value} is out of range (max {max})")]
    FieldRange {
        field: &'static str,
        value: u64,
        max: u64,
    },

    #[error("packet length {len} exceeds buffer size {max}")]
    LengthExceedsBuffer { len: usize, max: usize },

    #[error("declared length {declared} does not match {actual} data bytes")]
    LengthMismatch { declared: usize, actual: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("buffer pool exhausted")]
    PoolExhausted,

    #[error("stale buffer handle (slot {slot}, generation {generation})")]
    StaleHandle { slot: u32, generation: u32 },

    #[error("write of {len} bytes at offset {offset} exceeds buffer capacity {capacity}")]
    OutOfBounds {
        offset: usize,
        len: usize,
        capacity: usize,
    },

    #[error("identifier {0:#x} does not fit in 29 bits")]
    InvalidId(u32),

    #[error("port {0} already bound")]
    PortInUse(u8),

    #[error("malformed frame text {line:?}: {reason}")]
    FrameSyntax { line: String, reason: &'static str },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("corrupt corpus: {0}")]
    CorruptCorpus(String),

    #[error("config parse error: {0}")]
    ConfigParse(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
