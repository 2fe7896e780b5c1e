//! CAN fragmentation protocol: the 29-bit fragment header, transmit-side
//! fragmentation and the bounded reassembly engine.
//!
//! Extended identifier layout, most significant bit first:
//!
//! ```text
//!  28 .. 24 | 23 .. 19 |  18  | 17 .. 10 | 9 .. 0
//!   source  |   dest   | kind |  remain  | identifier
//! ```
//!
//! A BEGIN frame carries `total_length` (u16 BE), the packet header (u32 BE)
//! and up to two payload bytes. MORE frames carry up to eight payload bytes.
//! `remain` counts the frames still to come and reaches 0 on the last one.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{bump, check_range, Counters, CspId, CspPacket, Config, MAX_ADDRESS};
use crate::pool::{BufferStore, PacketBuf};

pub const CAN_EXT_ID_MASK: u32 = (1 << 29) - 1;
pub const CAN_MAX_DLC: usize = 8;
pub const MAX_IDENTIFIER: u16 = (1 << 10) - 1;

/// Bytes of a BEGIN frame taken by the length and header prefix.
pub const BEGIN_OVERHEAD: usize = 6;
const BEGIN_DATA: usize = CAN_MAX_DLC - BEGIN_OVERHEAD;

const SRC_SHIFT: u32 = 24;
const DST_SHIFT: u32 = 19;
const KIND_SHIFT: u32 = 18;
const REMAIN_SHIFT: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum FrameKind {
    #[default]
    Begin,
    More,
}

impl FrameKind {
    pub fn bit(self) -> u32 {
        match self {
            FrameKind::Begin => 0,
            FrameKind::More => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CfpId {
    source: u8,
    destination: u8,
    kind: FrameKind,
    remain: u8,
    identifier: u16,
}

impl CfpId {
    pub fn new(
        source: u8,
        destination: u8,
        kind: FrameKind,
        remain: u8,
        identifier: u16,
    ) -> Result<Self> {
        check_range("source", source.into(), MAX_ADDRESS.into())?;
        check_range("destination", destination.into(), MAX_ADDRESS.into())?;
        check_range("identifier", identifier.into(), MAX_IDENTIFIER.into())?;
        Ok(Self {
            source,
            destination,
            kind,
            remain,
            identifier,
        })
    }

    pub fn source(&self) -> u8 {
        self.source
    }

    pub fn destination(&self) -> u8 {
        self.destination
    }

    pub fn kind(&self) -> FrameKind {
        self.kind
    }

    pub fn remain(&self) -> u8 {
        self.remain
    }

    pub fn identifier(&self) -> u16 {
        self.identifier
    }

    fn key(&self) -> StreamKey {
        StreamKey {
            source: self.source,
            destination: self.destination,
            identifier: self.identifier,
        }
    }
}

pub fn cfp_pack(id: CfpId) -> u32 {
    u32::from(id.source) << SRC_SHIFT
        | u32::from(id.destination) << DST_SHIFT
        | id.kind.bit() << KIND_SHIFT
        | u32::from(id.remain) << REMAIN_SHIFT
        | u32::from(id.identifier)
}

pub fn cfp_unpack(ext_id: u32) -> Result<CfpId> {
    if ext_id > CAN_EXT_ID_MASK {
        return Err(Error::InvalidId(ext_id));
    }
    Ok(CfpId {
        source: ((ext_id >> SRC_SHIFT) & 0x1f) as u8,
        destination: ((ext_id >> DST_SHIFT) & 0x1f) as u8,
        kind: if (ext_id >> KIND_SHIFT) & 1 == 0 {
            FrameKind::Begin
        } else {
            FrameKind::More
        },
        remain: ((ext_id >> REMAIN_SHIFT) & 0xff) as u8,
        identifier: (ext_id & u32::from(MAX_IDENTIFIER)) as u16,
    })
}

/// A raw extended-id CAN frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CanFrame {
    ext_id: u32,
    dlc: u8,
    data: [u8; CAN_MAX_DLC],
}

impl CanFrame {
    pub fn new(ext_id: u32, payload: &[u8]) -> Result<Self> {
        if ext_id > CAN_EXT_ID_MASK {
            return Err(Error::InvalidId(ext_id));
        }
        check_range("dlc", payload.len() as u64, CAN_MAX_DLC as u64)?;
        let mut data = [0; CAN_MAX_DLC];
        data[..payload.len()].copy_from_slice(payload);
        Ok(Self {
            ext_id,
            dlc: payload.len() as u8,
            data,
        })
    }

    pub fn ext_id(&self) -> u32 {
        self.ext_id
    }

    pub fn dlc(&self) -> u8 {
        self.dlc
    }

    pub fn payload(&self) -> &[u8] {
        &self.data[..usize::from(self.dlc)]
    }
}

/// `IIIIIIII#DD..DD`: eight hex digits of id, `#`, then 0 to 8 hex byte pairs.
impl fmt::Display for CanFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:08X}#", self.ext_id)?;
        for b in self.payload() {
            write!(f, "{b:02X}")?;
        }
        Ok(())
    }
}

impl FromStr for CanFrame {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let syntax = |reason| Error::FrameSyntax {
            line: line.to_string(),
            reason,
        };
        let (id, data) = line.trim().split_once('#').ok_or_else(|| syntax("missing '#'"))?;
        if id.len() != 8 {
            return Err(syntax("id must be 8 hex digits"));
        }
        let ext_id = u32::from_str_radix(id, 16).map_err(|_| syntax("bad hex in id"))?;
        if ext_id > CAN_EXT_ID_MASK {
            return Err(syntax("id exceeds 29 bits"));
        }
        let payload = hex::decode(data).map_err(|_| syntax("bad hex in payload"))?;
        if payload.len() > CAN_MAX_DLC {
            return Err(syntax("more than 8 payload bytes"));
        }
        CanFrame::new(ext_id, &payload)
    }
}

/// Parse a frames file: one frame per line, blank lines and `#` comments skipped.
pub fn parse_frames(text: &str) -> Result<Vec<CanFrame>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

pub fn frame_count(length: usize) -> usize {
    if length <= BEGIN_DATA {
        1
    } else {
        1 + (length - BEGIN_DATA).div_ceil(CAN_MAX_DLC)
    }
}

/// Split a packet into a BEGIN frame and its MORE continuations.
pub fn fragment(p: &CspPacket, identifier: u16, max_data_len: usize) -> Result<Vec<CanFrame>> {
    if p.length > max_data_len {
        return Err(Error::LengthExceedsBuffer {
            len: p.length,
            max: max_data_len,
        });
    }
    if p.data.len() != p.length {
        return Err(Error::LengthMismatch {
            declared: p.length,
            actual: p.data.len(),
        });
    }
    let count = frame_count(p.length);
    // remain is 8 bits; max_data_len is capped so that this always fits.
    let last_remain = u8::try_from(count - 1).map_err(|_| Error::LengthExceedsBuffer {
        len: p.length,
        max: crate::model::MAX_DATA_LEN_LIMIT,
    })?;
    let (src, dst) = (p.id.source(), p.id.destination());

    let mut frames = Vec::with_capacity(count);
    let head_len = p.data.len().min(BEGIN_DATA);
    let mut begin = [0u8; CAN_MAX_DLC];
    begin[..2].copy_from_slice(&(p.length as u16).to_be_bytes());
    begin[2..6].copy_from_slice(&p.id.to_be_bytes());
    begin[6..6 + head_len].copy_from_slice(&p.data[..head_len]);
    let id = CfpId::new(src, dst, FrameKind::Begin, last_remain, identifier)?;
    frames.push(CanFrame::new(cfp_pack(id), &begin[..BEGIN_OVERHEAD + head_len])?);

    for (i, chunk) in p.data[head_len..].chunks(CAN_MAX_DLC).enumerate() {
        let remain = last_remain - 1 - i as u8;
        let id = CfpId::new(src, dst, FrameKind::More, remain, identifier)?;
        frames.push(CanFrame::new(cfp_pack(id), chunk)?);
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropReason {
    BadDlc,
    LengthExceedsBuffer,
    NoBuffer,
    NoMatchingBegin,
    RemainMismatch,
    Overflow,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RxOutcome<T> {
    /// The packet is complete; its buffer now belongs to the caller.
    Delivered(PacketBuf<T>),
    Consumed,
    Dropped(DropReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub source: u8,
    pub destination: u8,
    pub identifier: u16,
}

/// Per-stream reassembly state. Holds exactly one live buffer while active.
#[derive(Debug, Clone, Copy)]
pub struct RxSlot<T> {
    pub key: StreamKey,
    pub id: CspId,
    pub buffer: T,
    pub expected_total_len: usize,
    pub received_len: usize,
    pub last_remain: u8,
    pub deadline: u64,
}

/// Reassembly engine for one CAN interface.
///
/// Calls must be serialized; the store may be shared with other engines.
/// Timestamps are caller-supplied milliseconds.
pub struct RxEngine<S: BufferStore> {
    store: S,
    slots: Box<[Option<RxSlot<S::Token>>]>,
    max_data_len: usize,
    timeout_ms: u64,
    counters: Arc<Counters>,
}

impl<S: BufferStore> RxEngine<S> {
    pub fn new(store: S, cfg: &Config) -> Result<Self> {
        Self::with_counters(store, cfg, Arc::default())
    }

    pub fn with_counters(store: S, cfg: &Config, counters: Arc<Counters>) -> Result<Self> {
        cfg.validate()?;
        if store.buffer_capacity() < cfg.max_data_len {
            return Err(Error::InvalidConfig(format!(
                "store buffers hold {} bytes, need {}",
                store.buffer_capacity(),
                cfg.max_data_len
            )));
        }
        Ok(Self {
            store,
            slots: vec![None; cfg.rx_slot_count].into_boxed_slice(),
            max_data_len: cfg.max_data_len,
            timeout_ms: cfg.reassembly_timeout_ms,
            counters,
        })
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    pub fn active_slots(&self) -> usize {
        self.slots.iter().flatten().count()
    }

    pub fn slots(&self) -> impl Iterator<Item = &RxSlot<S::Token>> {
        self.slots.iter().flatten()
    }

    pub fn can_rx(&mut self, frame: &CanFrame, now: u64) -> RxOutcome<S::Token> {
        // CanFrame construction already guarantees a 29-bit id.
        let Ok(cfp) = cfp_unpack(frame.ext_id()) else {
            bump!(self.counters, rx_dropped_len);
            return RxOutcome::Dropped(DropReason::BadDlc);
        };
        let outcome = match cfp.kind() {
            FrameKind::Begin => self.rx_begin(&cfp, frame.payload(), now),
            FrameKind::More => self.rx_more(&cfp, frame.payload(), now),
        };
        match outcome {
            RxOutcome::Delivered(_) => bump!(self.counters, rx_delivered),
            RxOutcome::Consumed => {}
            RxOutcome::Dropped(reason) => self.count_drop(reason),
        }
        outcome
    }

    fn count_drop(&self, reason: DropReason) {
        match reason {
            DropReason::BadDlc | DropReason::LengthExceedsBuffer => {
                bump!(self.counters, rx_dropped_len)
            }
            DropReason::NoBuffer => bump!(self.counters, rx_no_buffer),
            DropReason::NoMatchingBegin => bump!(self.counters, rx_dropped_no_begin),
            DropReason::RemainMismatch => bump!(self.counters, rx_dropped_sequence),
            DropReason::Overflow => bump!(self.counters, rx_dropped_overflow),
            DropReason::Truncated => bump!(self.counters, rx_dropped_truncated),
        }
    }

    fn rx_begin(&mut self, cfp: &CfpId, payload: &[u8], now: u64) -> RxOutcome<S::Token> {
        if payload.len() < BEGIN_OVERHEAD {
            return RxOutcome::Dropped(DropReason::BadDlc);
        }
        let total = usize::from(u16::from_be_bytes([payload[0], payload[1]]));
        // Checked before anything is acquired or preempted.
        if total > self.max_data_len {
            return RxOutcome::Dropped(DropReason::LengthExceedsBuffer);
        }
        let id = CspId::from_be_bytes([payload[2], payload[3], payload[4], payload[5]]);
        if id.source() != cfp.source() || id.destination() != cfp.destination() {
            bump!(self.counters, rx_header_mismatch);
        }
        let key = cfp.key();

        if let Some(index) = self.find(key) {
            self.free_slot(index);
            bump!(self.counters, rx_preempted);
        }
        let Some(index) = self.claim_slot(now) else {
            return RxOutcome::Dropped(DropReason::NoBuffer);
        };
        let Some(buffer) = self.store.acquire_buffer() else {
            return RxOutcome::Dropped(DropReason::NoBuffer);
        };

        let body = &payload[BEGIN_OVERHEAD..];
        if body.len() > total {
            self.store.release_buffer(buffer);
            return RxOutcome::Dropped(DropReason::Overflow);
        }
        if self.store.write_at(buffer, 0, body).is_err() {
            self.store.release_buffer(buffer);
            return RxOutcome::Dropped(DropReason::Overflow);
        }

        let remain = cfp.remain();
        if remain == 0 {
            if body.len() == total {
                return RxOutcome::Delivered(PacketBuf {
                    id,
                    buffer,
                    len: total,
                });
            }
            // No continuation can follow a final frame.
            self.store.release_buffer(buffer);
            return RxOutcome::Dropped(DropReason::Truncated);
        }
        self.slots[index] = Some(RxSlot {
            key,
            id,
            buffer,
            expected_total_len: total,
            received_len: body.len(),
            last_remain: remain,
            deadline: now.saturating_add(self.timeout_ms),
        });
        RxOutcome::Consumed
    }

    fn rx_more(&mut self, cfp: &CfpId, payload: &[u8], now: u64) -> RxOutcome<S::Token> {
        let Some(index) = self.find(cfp.key()) else {
            return RxOutcome::Dropped(DropReason::NoMatchingBegin);
        };
        let Some(slot) = self.slots[index] else {
            return RxOutcome::Dropped(DropReason::NoMatchingBegin);
        };

        if slot.last_remain.checked_sub(1) != Some(cfp.remain()) {
            self.free_slot(index);
            return RxOutcome::Dropped(DropReason::RemainMismatch);
        }
        // Exact fill is legal; one byte past it is not. Checked before copying.
        let end = slot.received_len + payload.len();
        if end > slot.expected_total_len {
            self.free_slot(index);
            return RxOutcome::Dropped(DropReason::Overflow);
        }
        if self
            .store
            .write_at(slot.buffer, slot.received_len, payload)
            .is_err()
        {
            self.free_slot(index);
            return RxOutcome::Dropped(DropReason::Overflow);
        }

        if cfp.remain() == 0 {
            if end == slot.expected_total_len {
                // Hand the buffer off; the slot no longer owns it.
                self.slots[index] = None;
                return RxOutcome::Delivered(PacketBuf {
                    id: slot.id,
                    buffer: slot.buffer,
                    len: end,
                });
            }
            self.free_slot(index);
            return RxOutcome::Dropped(DropReason::Truncated);
        }

        self.slots[index] = Some(RxSlot {
            received_len: end,
            last_remain: cfp.remain(),
            deadline: now.saturating_add(self.timeout_ms),
            ..slot
        });
        RxOutcome::Consumed
    }

    /// Release every slot whose deadline is strictly before `now`.
    pub fn poll_timeouts(&mut self, now: u64) -> usize {
        let mut evicted = 0;
        for index in 0..self.slots.len() {
            if matches!(self.slots[index], Some(s) if s.deadline < now) {
                self.free_slot(index);
                bump!(self.counters, rx_timeout);
                evicted += 1;
            }
        }
        evicted
    }

    /// Release every active slot regardless of deadline.
    pub fn reset(&mut self) -> usize {
        let mut freed = 0;
        for index in 0..self.slots.len() {
            if self.slots[index].is_some() {
                self.free_slot(index);
                freed += 1;
            }
        }
        freed
    }

    fn find(&self, key: StreamKey) -> Option<usize> {
        self.slots
            .iter()
            .position(|s| matches!(s, Some(s) if s.key == key))
    }

    /// A free slot, or else the first expired one (evicted).
    fn claim_slot(&mut self, now: u64) -> Option<usize> {
        if let Some(index) = self.slots.iter().position(Option::is_none) {
            return Some(index);
        }
        let index = self
            .slots
            .iter()
            .position(|s| matches!(s, Some(s) if s.deadline < now))?;
        self.free_slot(index);
        bump!(self.counters, rx_timeout);
        Some(index)
    }

    fn free_slot(&mut self, index: usize) {
        if let Some(slot) = self.slots[index].take() {
            self.store.release_buffer(slot.buffer);
        }
    }
}

impl<S: BufferStore> Drop for RxEngine<S> {
    fn drop(&mut self) {
        self.reset();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::BufferPool;
    use proptest::prelude::*;

    // Independent oracle: concatenate the fields at their stated widths.
    fn cfp_oracle(src: u32, dst: u32, kind: u32, remain: u32, ident: u32) -> u32 {
        [(src, 5), (dst, 5), (kind, 1), (remain, 8), (ident, 10)]
            .into_iter()
            .fold(0, |acc, (v, w)| (acc << w) | v)
    }

    fn packet(len: usize) -> CspPacket {
        let id = CspId::new(2, 3, 1, 10, 20, 0x5a).unwrap();
        CspPacket::new(id, (0..len).map(|i| (i * 7 + 3) as u8).collect::<Vec<_>>())
    }

    fn engine(pool: &BufferPool) -> RxEngine<&BufferPool> {
        RxEngine::new(pool, &Config::default()).unwrap()
    }

    fn begin(total: u16, remain: u8, body: &[u8]) -> CanFrame {
        let id = CfpId::new(2, 1, FrameKind::Begin, remain, 9).unwrap();
        let mut payload = total.to_be_bytes().to_vec();
        payload.extend_from_slice(&CspId::new(0, 2, 1, 5, 6, 0).unwrap().to_be_bytes());
        payload.extend_from_slice(body);
        CanFrame::new(cfp_pack(id), &payload).unwrap()
    }

    fn more(remain: u8, body: &[u8]) -> CanFrame {
        let id = CfpId::new(2, 1, FrameKind::More, remain, 9).unwrap();
        CanFrame::new(cfp_pack(id), body).unwrap()
    }

    #[test]
    fn pack_examples() {
        assert_eq!(cfp_pack(CfpId::default()), 0);
        let id = CfpId::new(1, 2, FrameKind::More, 3, 4).unwrap();
        assert_eq!(cfp_oracle(1, 2, 1, 3, 4), 0x0114_0C04);
        assert_eq!(cfp_pack(id), 0x0114_0C04);
    }

    #[test]
    fn unpack_examples() {
        assert_eq!(cfp_unpack(0).unwrap(), CfpId::default());
        let id = cfp_unpack(0x0114_0C04).unwrap();
        assert_eq!(
            (id.source(), id.destination(), id.kind(), id.remain(), id.identifier()),
            (1, 2, FrameKind::More, 3, 4)
        );
        assert!(matches!(cfp_unpack(0x2000_0000), Err(Error::InvalidId(0x2000_0000))));
    }

    #[test]
    fn frame_text_form() {
        let f: CanFrame = "01140C04#DEADbeef".parse().unwrap();
        assert_eq!(f.ext_id(), 0x0114_0C04);
        assert_eq!(f.payload(), [0xde, 0xad, 0xbe, 0xef]);
        assert_eq!(f.to_string(), "01140C04#DEADBEEF");
        assert_eq!("00000000#".parse::<CanFrame>().unwrap().dlc(), 0);
        for bad in ["0114C04#00", "20000000#", "0114_C04#", "00000000#0", "00000000#000102030405060708", "00000000"] {
            assert!(bad.parse::<CanFrame>().is_err(), "{bad}");
        }
        let frames = parse_frames("# comment\n\n00000001#01\n  00000002#  \n").unwrap();
        assert_eq!(frames.len(), 2);
    }

    #[test]
    fn frame_rejects_long_payload() {
        assert!(CanFrame::new(0, &[0; 9]).is_err());
        assert!(CanFrame::new(1 << 29, &[]).is_err());
    }

    #[test]
    fn fragment_shapes() {
        let f = fragment(&packet(0), 7, 256).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].dlc(), 6);
        assert_eq!(cfp_unpack(f[0].ext_id()).unwrap().remain(), 0);

        let f = fragment(&packet(2), 7, 256).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].dlc(), 8);

        let f = fragment(&packet(256), 7, 256).unwrap();
        assert_eq!(f.len(), 33);
        let remains: Vec<u8> = f.iter().map(|fr| cfp_unpack(fr.ext_id()).unwrap().remain()).collect();
        assert_eq!(remains, (0..=32).rev().collect::<Vec<u8>>());
        assert_eq!(f.last().unwrap().dlc(), 6);
        for fr in &f {
            let id = cfp_unpack(fr.ext_id()).unwrap();
            assert_eq!((id.source(), id.destination(), id.identifier()), (3, 1, 7));
        }
        assert_eq!(&f[0].payload()[..2], &[0x01, 0x00]);
    }

    #[test]
    fn fragment_rejects_oversize() {
        assert!(matches!(
            fragment(&packet(257), 0, 256),
            Err(Error::LengthExceedsBuffer { len: 257, max: 256 })
        ));
        assert!(fragment(&packet(1), MAX_IDENTIFIER + 1, 256).is_err());
    }

    #[test]
    fn single_frame_delivery() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        let out = rx.can_rx(&begin(2, 0, &[0xaa, 0xbb]), 0);
        let RxOutcome::Delivered(p) = out else {
            panic!("{out:?}")
        };
        assert_eq!(pool.read(p.buffer).unwrap(), [0xaa, 0xbb]);
        assert_eq!(p.len, 2);
        assert_eq!(rx.active_slots(), 0);
        pool.release(p.buffer).unwrap();
        assert_eq!(pool.in_use(), 0);
    }

    #[test]
    fn round_trip_every_length() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        for len in 0..=256 {
            let p = packet(len);
            let frames = fragment(&p, (len % 1024) as u16, 256).unwrap();
            let (last, init) = frames.split_last().unwrap();
            for f in init {
                assert_eq!(rx.can_rx(f, 0), RxOutcome::Consumed);
            }
            let RxOutcome::Delivered(d) = rx.can_rx(last, 0) else {
                panic!("length {len} not delivered")
            };
            assert_eq!(pool.to_packet(&d).unwrap(), p);
            pool.release(d.buffer).unwrap();
        }
        assert_eq!(pool.in_use(), 0);
    }

    #[test]
    fn overdeclared_length_never_acquires() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        let out = rx.can_rx(&begin(257, 3, &[1, 2]), 0);
        assert_eq!(out, RxOutcome::Dropped(DropReason::LengthExceedsBuffer));
        assert_eq!(pool.in_use(), 0);
        assert_eq!(rx.counters().snapshot().rx_dropped_len, 1);
    }

    #[test]
    fn overdeclared_begin_does_not_preempt() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        assert_eq!(rx.can_rx(&begin(10, 1, &[1, 2]), 0), RxOutcome::Consumed);
        rx.can_rx(&begin(300, 1, &[1, 2]), 0);
        assert_eq!(rx.active_slots(), 1);
        assert!(matches!(rx.can_rx(&more(0, &[0; 8]), 0), RxOutcome::Delivered(_)));
    }

    #[test]
    fn exact_fill_accepted_and_one_past_rejected() {
        let pool = BufferPool::new(2, 10).unwrap();
        let cfg = Config {
            max_data_len: 10,
            ..Config::default()
        };
        let mut rx = RxEngine::new(&pool, &cfg).unwrap();
        rx.can_rx(&begin(10, 1, &[1, 2]), 0);
        let RxOutcome::Delivered(d) = rx.can_rx(&more(0, &[3; 8]), 0) else {
            panic!()
        };
        assert_eq!(d.len, 10);
        pool.release(d.buffer).unwrap();

        rx.can_rx(&begin(9, 1, &[1, 2]), 0);
        let before = pool.in_use();
        assert_eq!(
            rx.can_rx(&more(0, &[3; 8]), 0),
            RxOutcome::Dropped(DropReason::Overflow)
        );
        assert_eq!(pool.in_use(), before - 1);
        assert_eq!(pool.in_use(), 0);
    }

    #[test]
    fn begin_body_longer_than_total() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        assert_eq!(
            rx.can_rx(&begin(1, 0, &[1, 2]), 0),
            RxOutcome::Dropped(DropReason::Overflow)
        );
        assert_eq!(pool.in_use(), 0);
        assert_eq!(rx.active_slots(), 0);
    }

    #[test]
    fn short_begin_dlc() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        let f = CanFrame::new(0, &[0, 0, 0, 0, 0]).unwrap();
        assert_eq!(rx.can_rx(&f, 0), RxOutcome::Dropped(DropReason::BadDlc));
    }

    #[test]
    fn final_begin_without_enough_data_is_truncated() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        assert_eq!(
            rx.can_rx(&begin(5, 0, &[1, 2]), 0),
            RxOutcome::Dropped(DropReason::Truncated)
        );
        assert_eq!(pool.in_use(), 0);
    }

    #[test]
    fn more_without_begin() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        assert_eq!(
            rx.can_rx(&more(0, &[1]), 0),
            RxOutcome::Dropped(DropReason::NoMatchingBegin)
        );
    }

    #[test]
    fn remain_mismatch_releases() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        rx.can_rx(&begin(20, 3, &[1, 2]), 0);
        assert_eq!(pool.in_use(), 1);
        assert_eq!(
            rx.can_rx(&more(1, &[0; 8]), 0),
            RxOutcome::Dropped(DropReason::RemainMismatch)
        );
        assert_eq!(pool.in_use(), 0);
        assert_eq!(rx.active_slots(), 0);
    }

    #[test]
    fn truncated_final_frame() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        rx.can_rx(&begin(20, 1, &[1, 2]), 0);
        assert_eq!(
            rx.can_rx(&more(0, &[0; 4]), 0),
            RxOutcome::Dropped(DropReason::Truncated)
        );
        assert_eq!(pool.in_use(), 0);
    }

    #[test]
    fn same_key_begin_preempts() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        rx.can_rx(&begin(20, 2, &[1, 2]), 0);
        rx.can_rx(&begin(4, 1, &[1, 2]), 0);
        assert_eq!(pool.in_use(), 1);
        assert_eq!(rx.counters().snapshot().rx_preempted, 1);
        let RxOutcome::Delivered(d) = rx.can_rx(&more(0, &[3, 4]), 0) else {
            panic!()
        };
        assert_eq!(pool.read(d.buffer).unwrap(), [1, 2, 3, 4]);
    }

    #[test]
    fn pool_exhaustion_then_recovery() {
        let pool = BufferPool::new(1, 256).unwrap();
        let mut rx = engine(&pool);
        let hog = pool.acquire().unwrap();
        assert_eq!(
            rx.can_rx(&begin(2, 0, &[1, 2]), 0),
            RxOutcome::Dropped(DropReason::NoBuffer)
        );
        assert_eq!(rx.active_slots(), 0);
        assert_eq!(rx.counters().snapshot().rx_no_buffer, 1);
        pool.release(hog).unwrap();
        assert!(matches!(rx.can_rx(&begin(2, 0, &[1, 2]), 0), RxOutcome::Delivered(_)));
    }

    #[test]
    fn full_slot_table_drops_new_streams() {
        let pool = BufferPool::new(4, 256).unwrap();
        let mut rx = engine(&pool);
        let key = |ident| CfpId::new(1, 1, FrameKind::Begin, 1, ident).unwrap();
        let mut payload = 20u16.to_be_bytes().to_vec();
        payload.extend_from_slice(&[0; 6]);
        for ident in 0..2 {
            let f = CanFrame::new(cfp_pack(key(ident)), &payload).unwrap();
            assert_eq!(rx.can_rx(&f, 0), RxOutcome::Consumed);
        }
        let third = CanFrame::new(cfp_pack(key(2)), &payload).unwrap();
        assert_eq!(rx.can_rx(&third, 1000), RxOutcome::Dropped(DropReason::NoBuffer));
        // Past the deadline an expired slot is evicted to make room.
        assert_eq!(rx.can_rx(&third, 1001), RxOutcome::Consumed);
        assert_eq!(rx.counters().snapshot().rx_timeout, 1);
        assert_eq!(pool.in_use(), 2);
    }

    #[test]
    fn timeouts() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        assert_eq!(rx.poll_timeouts(5000), 0);
        rx.can_rx(&begin(20, 2, &[1, 2]), 0);
        assert_eq!(rx.slots().next().unwrap().deadline, 1000);
        assert_eq!(rx.poll_timeouts(1000), 0);
        assert_eq!(rx.poll_timeouts(1001), 1);
        assert_eq!(pool.in_use(), 0);
    }

    #[test]
    fn more_refreshes_deadline() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        rx.can_rx(&begin(20, 2, &[1, 2]), 0);
        rx.can_rx(&more(1, &[0; 8]), 500);
        assert_eq!(rx.slots().next().unwrap().deadline, 1500);
    }

    #[test]
    fn header_mismatch_passes_through() {
        let pool = BufferPool::new(2, 256).unwrap();
        let mut rx = engine(&pool);
        let id = CfpId::new(9, 9, FrameKind::Begin, 0, 0).unwrap();
        let mut payload = 0u16.to_be_bytes().to_vec();
        payload.extend_from_slice(&CspId::new(0, 1, 2, 0, 0, 0).unwrap().to_be_bytes());
        let out = rx.can_rx(&CanFrame::new(cfp_pack(id), &payload).unwrap(), 0);
        assert!(matches!(out, RxOutcome::Delivered(_)));
        assert_eq!(rx.counters().snapshot().rx_header_mismatch, 1);
    }

    #[test]
    fn dropping_engine_releases_slots() {
        let pool = BufferPool::new(2, 256).unwrap();
        {
            let mut rx = engine(&pool);
            rx.can_rx(&begin(20, 2, &[1, 2]), 0);
            assert_eq!(pool.in_use(), 1);
        }
        assert_eq!(pool.in_use(), 0);
    }

    proptest! {
        #[test]
        fn cfp_round_trip(raw in 0u32..(1 << 29)) {
            let id = cfp_unpack(raw).unwrap();
            prop_assert_eq!(cfp_pack(id), raw);
        }

        #[test]
        fn cfp_matches_oracle(src in 0u8..32, dst in 0u8..32, more: bool, remain: u8, ident in 0u16..1024) {
            let kind = if more { FrameKind::More } else { FrameKind::Begin };
            let id = CfpId::new(src, dst, kind, remain, ident).unwrap();
            prop_assert_eq!(cfp_pack(id), cfp_oracle(src.into(), dst.into(), more.into(), remain.into(), ident.into()));
            prop_assert_eq!(cfp_unpack(cfp_pack(id)).unwrap(), id);
        }

        #[test]
        fn frame_text_round_trip(id in 0u32..(1 << 29), data in prop::collection::vec(any::<u8>(), 0..=8)) {
            let f = CanFrame::new(id, &data).unwrap();
            prop_assert_eq!(f.to_string().parse::<CanFrame>().unwrap(), f);
        }

        #[test]
        fn arbitrary_frames_conserve_pool(
            frames in prop::collection::vec((0u32..(1 << 29), prop::collection::vec(any::<u8>(), 0..=8)), 0..64)
        ) {
            let pool = BufferPool::new(3, 64).unwrap();
            let cfg = Config { max_data_len: 64, ..Config::default() };
            let mut rx = RxEngine::new(&pool, &cfg).unwrap();
            for (i, (id, data)) in frames.iter().enumerate() {
                let f = CanFrame::new(*id, data).unwrap();
                if let RxOutcome::Delivered(d) = rx.can_rx(&f, i as u64) {
                    prop_assert!(d.len <= 64);
                    prop_assert_eq!(pool.len(d.buffer).unwrap(), d.len);
                    pool.release(d.buffer).unwrap();
                }
                prop_assert_eq!(pool.in_use(), rx.active_slots());
            }
            rx.poll_timeouts(u64::MAX);
            prop_assert_eq!(pool.in_use(), 0);
        }
    }
}
