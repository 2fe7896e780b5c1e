//! Naive reference reassembler used as a differential oracle.
//!
//! Same stream rules as the production engine, none of its machinery: ids are
//! split with local shifts, streams live in a `HashMap` with growable `Vec`
//! storage, and there is no pool, no slot limit and no clock. Drops are silent.

use std::collections::HashMap;

use crate::cfp::CanFrame;
use crate::model::{Config, CspId, CspPacket};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReferenceRun {
    pub packets: Vec<CspPacket>,
    /// Most streams the bounded engine would have needed open at once.
    pub peak_streams: usize,
}

struct Partial {
    header: u32,
    total: usize,
    remain: u32,
    data: Vec<u8>,
}

pub fn reference_reassemble(frames: &[CanFrame], cfg: &Config) -> Vec<CspPacket> {
    reference_run(frames, cfg).packets
}

pub fn reference_run(frames: &[CanFrame], cfg: &Config) -> ReferenceRun {
    let mut open: HashMap<(u32, u32, u32), Partial> = HashMap::new();
    let mut run = ReferenceRun::default();

    for frame in frames {
        let id = frame.ext_id();
        let key = ((id >> 24) & 0x1f, (id >> 19) & 0x1f, id & 0x3ff);
        let more = (id >> 18) & 1 == 1;
        let remain = (id >> 10) & 0xff;
        let bytes = frame.payload();

        if !more {
            if bytes.len() < 6 {
                continue;
            }
            let total = usize::from(bytes[0]) << 8 | usize::from(bytes[1]);
            if total > cfg.max_data_len {
                continue;
            }
            open.remove(&key);
            // The engine holds a slot and a buffer for this BEGIN, at least
            // momentarily, alongside every other open stream.
            run.peak_streams = run.peak_streams.max(open.len() + 1);

            let header = u32::from_be_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]);
            let body = &bytes[6..];
            if body.len() > total {
                continue;
            }
            if remain == 0 {
                if body.len() == total {
                    run.packets.push(CspPacket::new(CspId::from_word(header), body.to_vec()));
                }
                continue;
            }
            open.insert(
                key,
                Partial {
                    header,
                    total,
                    remain,
                    data: body.to_vec(),
                },
            );
        } else {
            let Some(mut partial) = open.remove(&key) else {
                continue;
            };
            if remain + 1 != partial.remain {
                continue;
            }
            if partial.data.len() + bytes.len() > partial.total {
                continue;
            }
            partial.data.extend_from_slice(bytes);
            if remain == 0 {
                if partial.data.len() == partial.total {
                    run.packets
                        .push(CspPacket::new(CspId::from_word(partial.header), partial.data));
                }
                continue;
            }
            partial.remain = remain;
            open.insert(key, partial);
        }
    }
    run
}
