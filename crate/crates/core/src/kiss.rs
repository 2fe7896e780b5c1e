//! KISS framing for the serial (USART) interface.
//!
//! A frame is `FEND escape(header_be ++ data) FEND`; there is no command byte.
//! The decoder acquires a pool buffer when a frame opens. If the pool is
//! empty it emits a drop and discards the frame instead of writing anywhere.

use std::sync::Arc;

use crate::model::{bump, Counters, CspId, CspPacket, HEADER_LEN};
use crate::pool::{BufferStore, PacketBuf};

pub const FEND: u8 = 0xC0;
pub const FESC: u8 = 0xDB;
pub const TFEND: u8 = 0xDC;
pub const TFESC: u8 = 0xDD;

pub fn kiss_encode(p: &CspPacket) -> Vec<u8> {
    let mut out = Vec::with_capacity(p.data.len() + HEADER_LEN + 2);
    out.push(FEND);
    for &b in p.id.to_be_bytes().iter().chain(&p.data) {
        match b {
            FEND => out.extend_from_slice(&[FESC, TFEND]),
            FESC => out.extend_from_slice(&[FESC, TFESC]),
            _ => out.push(b),
        }
    }
    out.push(FEND);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KissDrop {
    /// No buffer was available when the frame opened.
    NoBuffer,
    /// Fewer than four bytes: no complete header.
    Runt,
    /// More than `max_data_len` payload bytes.
    Oversize,
    /// `FESC` followed by something other than `TFEND`/`TFESC`.
    BadEscape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KissEvent<T> {
    Delivered(PacketBuf<T>),
    Dropped(KissDrop),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KissState {
    Idle,
    InFrame,
    Escaped,
    Discard,
}

#[derive(Debug, Clone, Copy)]
struct Current<T> {
    buffer: T,
    header: [u8; HEADER_LEN],
    header_len: usize,
    fill: usize,
}

/// Incremental decoder. Holds at most one buffer, and none while discarding.
#[derive(Debug)]
pub struct KissDecoder<T> {
    state: KissState,
    current: Option<Current<T>>,
    max_data_len: usize,
    counters: Arc<Counters>,
}

impl<T: Copy> KissDecoder<T> {
    pub fn new(max_data_len: usize) -> Self {
        Self::with_counters(max_data_len, Arc::default())
    }

    pub fn with_counters(max_data_len: usize, counters: Arc<Counters>) -> Self {
        Self {
            state: KissState::Idle,
            current: None,
            max_data_len,
            counters,
        }
    }

    pub fn state(&self) -> KissState {
        self.state
    }

    pub fn holds_buffer(&self) -> bool {
        self.current.is_some()
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    pub fn push<S>(&mut self, bytes: &[u8], store: &S) -> Vec<KissEvent<T>>
    where
        S: BufferStore<Token = T> + ?Sized,
    {
        let mut events = Vec::new();
        for &b in bytes {
            if let Some(ev) = self.push_byte(b, store) {
                events.push(ev);
            }
        }
        events
    }

    pub fn push_byte<S>(&mut self, b: u8, store: &S) -> Option<KissEvent<T>>
    where
        S: BufferStore<Token = T> + ?Sized,
    {
        match (self.state, b) {
            (KissState::Idle, FEND) => match store.acquire_buffer() {
                Some(buffer) => {
                    self.current = Some(Current {
                        buffer,
                        header: [0; HEADER_LEN],
                        header_len: 0,
                        fill: 0,
                    });
                    self.state = KissState::InFrame;
                    None
                }
                None => {
                    self.state = KissState::Discard;
                    Some(self.drop_event(KissDrop::NoBuffer))
                }
            },
            // Line noise between frames.
            (KissState::Idle, _) => None,
            (KissState::Discard, FEND) => {
                self.state = KissState::Idle;
                None
            }
            (KissState::Discard, _) => None,
            (KissState::InFrame, FEND) => Some(self.finish(store)),
            (KissState::InFrame, FESC) => {
                self.state = KissState::Escaped;
                None
            }
            (KissState::InFrame, _) => self.append(b, store),
            (KissState::Escaped, TFEND) => {
                self.state = KissState::InFrame;
                self.append(FEND, store)
            }
            (KissState::Escaped, TFESC) => {
                self.state = KissState::InFrame;
                self.append(FESC, store)
            }
            (KissState::Escaped, other) => {
                self.abandon(store);
                // A delimiter here also closes the broken frame.
                self.state = if other == FEND {
                    KissState::Idle
                } else {
                    KissState::Discard
                };
                Some(self.drop_event(KissDrop::BadEscape))
            }
        }
    }

    /// Drop any partial frame and return to idle.
    pub fn reset<S>(&mut self, store: &S)
    where
        S: BufferStore<Token = T> + ?Sized,
    {
        self.abandon(store);
        self.state = KissState::Idle;
    }

    fn append<S>(&mut self, b: u8, store: &S) -> Option<KissEvent<T>>
    where
        S: BufferStore<Token = T> + ?Sized,
    {
        let cur = self.current.as_mut()?;
        if cur.header_len < HEADER_LEN {
            cur.header[cur.header_len] = b;
            cur.header_len += 1;
            return None;
        }
        if cur.fill >= self.max_data_len || store.write_at(cur.buffer, cur.fill, &[b]).is_err() {
            self.abandon(store);
            self.state = KissState::Discard;
            return Some(self.drop_event(KissDrop::Oversize));
        }
        cur.fill += 1;
        None
    }

    fn finish<S>(&mut self, store: &S) -> KissEvent<T>
    where
        S: BufferStore<Token = T> + ?Sized,
    {
        self.state = KissState::Idle;
        let Some(cur) = self.current.take() else {
            return self.drop_event(KissDrop::Runt);
        };
        if cur.header_len < HEADER_LEN {
            store.release_buffer(cur.buffer);
            return self.drop_event(KissDrop::Runt);
        }
        bump!(self.counters, rx_delivered);
        KissEvent::Delivered(PacketBuf {
            id: CspId::from_be_bytes(cur.header),
            buffer: cur.buffer,
            len: cur.fill,
        })
    }

    fn abandon<S>(&mut self, store: &S)
    where
        S: BufferStore<Token = T> + ?Sized,
    {
        if let Some(cur) = self.current.take() {
            store.release_buffer(cur.buffer);
        }
    }

    fn drop_event(&self, reason: KissDrop) -> KissEvent<T> {
        match reason {
            KissDrop::NoBuffer => bump!(self.counters, rx_no_buffer),
            KissDrop::Runt | KissDrop::Oversize | KissDrop::BadEscape => {
                bump!(self.counters, rx_dropped_len)
            }
        }
        KissEvent::Dropped(reason)
    }
}
