//! Fuzz entry points, corpus replay and a reference reassembler.
//!
//! Raw fuzzer bytes are shaped into CAN frames as 13-byte records:
//! a big-endian id (masked to 29 bits), a dlc byte (taken mod 9) and eight
//! data bytes. A trailing partial record is ignored, so every input decodes.
//!
//! [`run_fuzz_case`] drives a fresh engine and pool over those frames and
//! checks three things: nothing leaks from the pool, every acquired buffer is
//! owned by exactly one party after each frame, and (when the stream never
//! needs more streams open than the engine has room for) the delivered
//! packets match the unbounded reference reassembler.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::cfp::{fragment, CanFrame, DropReason, RxEngine, RxOutcome};
use crate::error::{Error, Result};
use crate::kiss::{KissDecoder, KissEvent};
use crate::model::{Config, CspId, CspPacket};
use crate::pool::BufferPool;

pub mod reference;

pub use reference::{reference_reassemble, reference_run, ReferenceRun};

pub const RECORD_LEN: usize = 13;
pub const CORPUS_MAGIC: &[u8; 4] = b"CSPF";

pub type FrameStream = Vec<CanFrame>;

pub fn decode_frame_stream(bytes: &[u8]) -> FrameStream {
    bytes
        .chunks_exact(RECORD_LEN)
        .map(|rec| {
            let id = u32::from_be_bytes([rec[0], rec[1], rec[2], rec[3]]) & crate::cfp::CAN_EXT_ID_MASK;
            let dlc = usize::from(rec[4] % 9);
            // Both bounds hold by construction.
            CanFrame::new(id, &rec[5..5 + dlc]).unwrap_or_default()
        })
        .collect()
}

/// Inverse of [`decode_frame_stream`]; unused payload bytes are zeroed.
pub fn encode_frame_stream(frames: &[CanFrame]) -> Vec<u8> {
    let mut out = Vec::with_capacity(frames.len() * RECORD_LEN);
    for f in frames {
        out.extend_from_slice(&f.ext_id().to_be_bytes());
        out.push(f.dlc());
        let mut data = [0u8; 8];
        data[..f.payload().len()].copy_from_slice(f.payload());
        out.extend_from_slice(&data);
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OutcomeHistogram {
    pub delivered: u64,
    pub consumed: u64,
    pub bad_dlc: u64,
    pub length_exceeds_buffer: u64,
    pub no_buffer: u64,
    pub no_matching_begin: u64,
    pub remain_mismatch: u64,
    pub overflow: u64,
    pub truncated: u64,
}

impl OutcomeHistogram {
    pub fn record<T>(&mut self, outcome: &RxOutcome<T>) {
        let bucket = match outcome {
            RxOutcome::Delivered(_) => &mut self.delivered,
            RxOutcome::Consumed => &mut self.consumed,
            RxOutcome::Dropped(reason) => match reason {
                DropReason::BadDlc => &mut self.bad_dlc,
                DropReason::LengthExceedsBuffer => &mut self.length_exceeds_buffer,
                DropReason::NoBuffer => &mut self.no_buffer,
                DropReason::NoMatchingBegin => &mut self.no_matching_begin,
                DropReason::RemainMismatch => &mut self.remain_mismatch,
                DropReason::Overflow => &mut self.overflow,
                DropReason::Truncated => &mut self.truncated,
            },
        };
        *bucket += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        self.delivered += other.delivered;
        self.consumed += other.consumed;
        self.bad_dlc += other.bad_dlc;
        self.length_exceeds_buffer += other.length_exceeds_buffer;
        self.no_buffer += other.no_buffer;
        self.no_matching_begin += other.no_matching_begin;
        self.remain_mismatch += other.remain_mismatch;
        self.overflow += other.overflow;
        self.truncated += other.truncated;
    }

    pub fn total(&self) -> u64 {
        self.delivered
            + self.consumed
            + self.bad_dlc
            + self.length_exceeds_buffer
            + self.no_buffer
            + self.no_matching_begin
            + self.remain_mismatch
            + self.overflow
            + self.truncated
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FuzzReport {
    pub frames: usize,
    pub outcomes: OutcomeHistogram,
    /// Buffers still acquired after the timeout flush. Must be 0.
    pub leaked: usize,
    /// Frames after which pool usage disagreed with engine slot ownership.
    pub ownership_violations: usize,
    /// Whether the stream fit the engine's capacity and was compared.
    pub compared: bool,
    pub divergence: bool,
}

impl FuzzReport {
    pub fn passed(&self) -> bool {
        self.leaked == 0 && self.ownership_violations == 0 && !self.divergence
    }
}

/// Run one fuzz input through a fresh engine and pool.
///
/// Only an invalid `cfg` is an error; every byte string is a valid input.
pub fn run_fuzz_case(bytes: &[u8], cfg: &Config) -> Result<FuzzReport> {
    let frames = decode_frame_stream(bytes);
    let pool = BufferPool::new(cfg.pool_capacity, cfg.max_data_len)?;
    let mut engine = RxEngine::new(&pool, cfg)?;
    let mut report = FuzzReport {
        frames: frames.len(),
        ..FuzzReport::default()
    };

    let mut delivered = Vec::new();
    for (i, frame) in frames.iter().enumerate() {
        let outcome = engine.can_rx(frame, i as u64);
        report.outcomes.record(&outcome);
        if let RxOutcome::Delivered(p) = outcome {
            match pool.to_packet(&p) {
                Ok(packet) if packet.data.len() == p.len => delivered.push(packet),
                _ => report.ownership_violations += 1,
            }
            if pool.release(p.buffer).is_err() {
                report.ownership_violations += 1;
            }
        }
        if pool.in_use() != engine.active_slots() {
            report.ownership_violations += 1;
        }
    }
    engine.poll_timeouts(u64::MAX);
    report.leaked = pool.in_use();

    let reference = reference_run(&frames, cfg);
    report.compared = reference.peak_streams <= cfg.rx_slot_count.min(cfg.pool_capacity);
    report.divergence = report.compared && delivered != reference.packets;
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct KissFuzzReport {
    pub bytes: usize,
    pub delivered: usize,
    pub dropped: usize,
    pub leaked: usize,
}

/// Feed arbitrary bytes to a KISS decoder, then reset it and count leaks.
pub fn run_kiss_fuzz_case(bytes: &[u8], cfg: &Config) -> Result<KissFuzzReport> {
    cfg.validate()?;
    let pool = BufferPool::new(cfg.pool_capacity, cfg.max_data_len)?;
    let mut dec = KissDecoder::new(cfg.max_data_len);
    let mut report = KissFuzzReport {
        bytes: bytes.len(),
        ..KissFuzzReport::default()
    };
    for event in dec.push(bytes, &pool) {
        match event {
            KissEvent::Delivered(p) => {
                report.delivered += 1;
                let _ = pool.release(p.buffer);
            }
            KissEvent::Dropped(_) => report.dropped += 1,
        }
    }
    dec.reset(&pool);
    report.leaked = pool.in_use();
    Ok(report)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AggregateReport {
    pub cases: usize,
    pub frames: usize,
    pub outcomes: OutcomeHistogram,
    pub leaked: usize,
    pub ownership_violations: usize,
    pub compared: usize,
    pub divergences: usize,
}

impl AggregateReport {
    pub fn add(&mut self, r: &FuzzReport) {
        self.cases += 1;
        self.frames += r.frames;
        self.outcomes.merge(&r.outcomes);
        self.leaked += r.leaked;
        self.ownership_violations += r.ownership_violations;
        self.compared += usize::from(r.compared);
        self.divergences += usize::from(r.divergence);
    }

    pub fn passed(&self) -> bool {
        self.leaked == 0 && self.ownership_violations == 0 && self.divergences == 0
    }
}

/// Corpus file: `CSPF` magic, then `[u32 BE length][case bytes]` records.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub cases: Vec<Vec<u8>>,
}

impl Corpus {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(CORPUS_MAGIC.as_slice())
            .ok_or_else(|| Error::CorruptCorpus("missing CSPF magic".into()))?;
        let mut cases = Vec::new();
        let mut pos = 0;
        while pos < rest.len() {
            let header = rest
                .get(pos..pos + 4)
                .ok_or_else(|| Error::CorruptCorpus(format!("truncated length prefix at byte {}", pos + 4)))?;
            let len = u32::from_be_bytes([header[0], header[1], header[2], header[3]]) as usize;
            pos += 4;
            let case = pos
                .checked_add(len)
                .and_then(|end| rest.get(pos..end))
                .ok_or_else(|| {
                    Error::CorruptCorpus(format!(
                        "record of {len} bytes at byte {} runs past end of file",
                        pos + 4
                    ))
                })?;
            cases.push(case.to_vec());
            pos += len;
        }
        Ok(Self { cases })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CORPUS_MAGIC.to_vec();
        for case in &self.cases {
            out.extend_from_slice(&(case.len() as u32).to_be_bytes());
            out.extend_from_slice(case);
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

pub fn replay_corpus(path: impl AsRef<Path>, cfg: &Config) -> Result<AggregateReport> {
    let corpus = Corpus::load(path)?;
    let mut agg = AggregateReport::default();
    for case in &corpus.cases {
        agg.add(&run_fuzz_case(case, cfg)?);
    }
    Ok(agg)
}

pub const REGRESSION_NAMES: [&str; 3] = ["boundary_fill", "overdeclared_len", "pool_exhaustion"];

fn sample_packet(src: u8, dst: u8, len: usize, seed: u8) -> CspPacket {
    let id = CspId::new(2, src, dst, 10, 20, 0).unwrap_or_default();
    let data: Vec<u8> = (0..len)
        .map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed))
        .collect();
    CspPacket::new(id, data)
}

fn set_total_len(frame: &CanFrame, total: u16) -> CanFrame {
    let mut payload = frame.payload().to_vec();
    payload[..2].copy_from_slice(&total.to_be_bytes());
    CanFrame::new(frame.ext_id(), &payload).unwrap_or(*frame)
}

/// The three named regression transcripts, sized for `cfg.max_data_len`.
///
/// - `boundary_fill`: a stream that fills a buffer exactly (delivered), then
///   the same frames declaring one byte less (dropped before the extra byte).
/// - `overdeclared_len`: a BEGIN declaring `max_data_len + 1` with its
///   continuations, then a small valid packet.
/// - `pool_exhaustion`: two interleaved streams. With a one-buffer pool the
///   second BEGIN finds no buffer; it is retransmitted after the first packet
///   completes.
pub fn regression_transcripts(cfg: &Config) -> Result<Vec<(&'static str, Vec<CanFrame>)>> {
    let max = cfg.max_data_len;

    let full = fragment(&sample_packet(3, 1, max, 0), 1, max)?;
    let mut boundary = full.clone();
    let mut over = fragment(&sample_packet(3, 1, max, 1), 2, max)?;
    if max > 0 {
        over[0] = set_total_len(&over[0], (max - 1) as u16);
    }
    boundary.extend(over);

    let bigger = sample_packet(4, 1, (max + 1).min(crate::model::MAX_DATA_LEN_LIMIT), 2);
    let mut overdeclared = fragment(&bigger, 3, crate::model::MAX_DATA_LEN_LIMIT)?;
    overdeclared[0] = set_total_len(&overdeclared[0], (max + 1) as u16);
    overdeclared.extend(fragment(&sample_packet(4, 1, max.min(2), 3), 4, max)?);

    let a = fragment(&sample_packet(5, 1, max.min(20), 4), 5, max)?;
    let b = fragment(&sample_packet(6, 1, max.min(12), 5), 6, max)?;
    let mut exhaustion = vec![a[0], b[0]];
    exhaustion.extend_from_slice(&a[1..]);
    exhaustion.extend_from_slice(&b);

    Ok(vec![
        (REGRESSION_NAMES[0], boundary),
        (REGRESSION_NAMES[1], overdeclared),
        (REGRESSION_NAMES[2], exhaustion),
    ])
}

/// The regression transcripts as fuzz-case bytes, in [`REGRESSION_NAMES`] order.
pub fn regression_corpus(cfg: &Config) -> Result<Corpus> {
    Ok(Corpus {
        cases: regression_transcripts(cfg)?
            .iter()
            .map(|(_, frames)| encode_frame_stream(frames))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_stream_decoding() {
        assert!(decode_frame_stream(&[]).is_empty());
        let one = decode_frame_stream(&[0; 13]);
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].ext_id(), one[0].dlc()), (0, 0));

        let mut two = vec![0u8; 26];
        two[13 + 4] = 0x0A;
        let frames = decode_frame_stream(&two);
        assert_eq!(frames[1].dlc(), 1);

        let mut masked = vec![0xFF; 13];
        masked[4] = 8;
        let f = decode_frame_stream(&masked)[0];
        assert_eq!(f.ext_id(), 0x1FFF_FFFF);
        assert_eq!(f.dlc(), 8);

        assert_eq!(decode_frame_stream(&[0; 25]).len(), 1);
    }

    #[test]
    fn frame_stream_round_trip() {
        let frames = fragment(&sample_packet(1, 2, 40, 9), 7, 256).unwrap();
        assert_eq!(decode_frame_stream(&encode_frame_stream(&frames)), frames);
    }

    #[test]
    fn empty_input_report() {
        let r = run_fuzz_case(&[], &Config::default()).unwrap();
        assert_eq!(
            r,
            FuzzReport {
                compared: true,
                ..FuzzReport::default()
            }
        );
    }

    #[test]
    fn valid_transcript_case() {
        let frames = fragment(&sample_packet(1, 2, 100, 9), 7, 256).unwrap();
        let r = run_fuzz_case(&encode_frame_stream(&frames), &Config::default()).unwrap();
        assert_eq!(r.outcomes.delivered, 1);
        assert!(r.compared);
        assert!(!r.divergence);
        assert_eq!(r.leaked, 0);
    }

    #[test]
    fn fuzz_case_is_deterministic() {
        let bytes: Vec<u8> = (0..2000u32).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
        let cfg = Config::default();
        assert_eq!(run_fuzz_case(&bytes, &cfg).unwrap(), run_fuzz_case(&bytes, &cfg).unwrap());
    }

    #[test]
    fn corpus_format() {
        assert!(Corpus::parse(b"CSPF").unwrap().cases.is_empty());
        let c = Corpus {
            cases: vec![vec![], vec![1, 2, 3]],
        };
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"CSPF");
        assert_eq!(Corpus::parse(&bytes).unwrap(), c);

        assert!(matches!(Corpus::parse(b""), Err(Error::CorruptCorpus(_))));
        assert!(matches!(Corpus::parse(b"XSPF"), Err(Error::CorruptCorpus(_))));
        assert!(matches!(Corpus::parse(b"CSPF\0\0"), Err(Error::CorruptCorpus(_))));
        assert!(matches!(
            Corpus::parse(b"CSPF\0\0\0\x05abc"),
            Err(Error::CorruptCorpus(_))
        ));
        assert!(matches!(
            Corpus::parse(b"CSPF\xff\xff\xff\xffabc"),
            Err(Error::CorruptCorpus(_))
        ));
    }

    #[test]
    fn regression_transcripts_pass_replay() {
        for cfg in [
            Config::default(),
            Config {
                pool_capacity: 1,
                ..Config::default()
            },
        ] {
            for case in regression_corpus(&cfg).unwrap().cases {
                let r = run_fuzz_case(&case, &cfg).unwrap();
                assert!(r.passed(), "{r:?}");
            }
        }
    }

    #[test]
    fn kiss_fuzz_case_never_leaks() {
        let bytes: Vec<u8> = (0..4000u32)
            .map(|i| match i % 17 {
                0 => 0xC0,
                5 => 0xDB,
                _ => (i.wrapping_mul(40503) >> 3) as u8,
            })
            .collect();
        let r = run_kiss_fuzz_case(&bytes, &Config::default()).unwrap();
        assert_eq!(r.leaked, 0);
        assert!(r.delivered + r.dropped > 0);
    }
}
