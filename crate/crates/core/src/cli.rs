//! `csptool`: inspect, convert, replay and demo.
//!
//! Exit codes: 0 success, 1 protocol drop or parse failure, 2 usage error.
//! Output is line-oriented `key=value` text with no timestamps, so it can be
//! diffed against golden files.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::cfp::{cfp_unpack, fragment, parse_frames, RxEngine, RxOutcome};
use crate::error::{Error, Result};
use crate::fuzz::replay_corpus;
use crate::kiss::{kiss_encode, KissDecoder, KissEvent};
use crate::model::{decode_csp_header, Config, CspId, CspPacket};
use crate::pool::{BufferPool, PacketBuf};
use crate::router::{IfaceTag, RouteOutcome, Router};

#[derive(Debug, Parser)]
#[command(name = "csptool", version, about = "CSP packet stack inspection and replay tool")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Decode a CAN fragment id or a packet header word.
    Inspect(InspectArgs),
    /// Split a packet into CAN frames in `IIIIIIII#DD..` form.
    Fragment(FragmentArgs),
    /// Reassemble packets from a frames file.
    Reassemble {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
    },
    /// Replay a fuzz corpus and report leaks and divergences.
    FuzzReplay {
        #[arg(value_name = "CORPUS")]
        corpus: PathBuf,
    },
    /// Send a packet through fragment, reassembly, router and socket.
    Loopback {
        #[arg(long, value_name = "HEX", default_value = "")]
        data_hex: String,
        #[arg(long)]
        port: u8,
    },
    /// Encode a packet as a KISS frame (whitespace-separated hex bytes).
    KissEncode(PacketArgs),
    /// Decode a whitespace-separated hex byte stream of KISS frames.
    KissDecode {
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct InspectArgs {
    /// 29-bit CAN id as 8 hex digits.
    #[arg(long, value_name = "HEX")]
    cfp: Option<String>,
    /// 32-bit header word as 8 hex digits.
    #[arg(long, value_name = "HEX")]
    header: Option<String>,
}

#[derive(Debug, Args)]
struct PacketArgs {
    #[arg(long)]
    pri: u8,
    #[arg(long)]
    src: u8,
    #[arg(long)]
    dst: u8,
    #[arg(long)]
    dport: u8,
    #[arg(long)]
    sport: u8,
    /// Flag byte, decimal or 0x-prefixed hex.
    #[arg(long, value_parser = parse_u8)]
    flags: u8,
    #[arg(long, value_name = "HEX", default_value = "")]
    data_hex: String,
}

#[derive(Debug, Args)]
struct FragmentArgs {
    #[command(flatten)]
    packet: PacketArgs,
    /// 10-bit stream identifier.
    #[arg(long, default_value_t = 0)]
    ident: u16,
}

fn parse_u8(s: &str) -> std::result::Result<u8, String> {
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u8::from_str_radix(h, 16),
        None => s.parse(),
    };
    parsed.map_err(|e| e.to_string())
}

/// Outcome of a subcommand that ran to completion.
enum Status {
    Ok,
    /// Something was dropped or failed a check; output may still be partial.
    Dropped,
}

/// Run the tool. Returns the process exit code.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(Status::Ok) => 0,
        Ok(Status::Dropped) => 1,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<Status> {
    let cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    match cli.command {
        Command::Inspect(args) => inspect(&args, out),
        Command::Fragment(args) => {
            let packet = build_packet(&args.packet)?;
            for frame in fragment(&packet, args.ident, cfg.max_data_len)? {
                writeln!(out, "{frame}")?;
            }
            Ok(Status::Ok)
        }
        Command::Reassemble { input } => reassemble(&fs::read_to_string(input)?, &cfg, out, err),
        Command::FuzzReplay { corpus } => {
            let report = replay_corpus(corpus, &cfg)?;
            let h = &report.outcomes;
            for (key, value) in [
                ("cases", report.cases as u64),
                ("frames", report.frames as u64),
                ("delivered", h.delivered),
                ("consumed", h.consumed),
                ("bad_dlc", h.bad_dlc),
                ("length_exceeds_buffer", h.length_exceeds_buffer),
                ("no_buffer", h.no_buffer),
                ("no_matching_begin", h.no_matching_begin),
                ("remain_mismatch", h.remain_mismatch),
                ("overflow", h.overflow),
                ("truncated", h.truncated),
                ("compared", report.compared as u64),
                ("divergences", report.divergences as u64),
                ("ownership_violations", report.ownership_violations as u64),
                ("leaked", report.leaked as u64),
            ] {
                writeln!(out, "{key}={value}")?;
            }
            Ok(if report.passed() { Status::Ok } else { Status::Dropped })
        }
        Command::Loopback { data_hex, port } => loopback(&data_hex, port, &cfg, out, err),
        Command::KissEncode(args) => {
            let packet = build_packet(&args)?;
            crate::model::validate_packet(&packet, &cfg)?;
            let bytes: Vec<String> = kiss_encode(&packet).iter().map(|b| format!("{b:02X}")).collect();
            writeln!(out, "{}", bytes.join(" "))?;
            Ok(Status::Ok)
        }
        Command::KissDecode { input } => kiss_decode(&fs::read_to_string(input)?, &cfg, out, err),
    }
}

fn parse_hex_word(text: &str) -> Result<u32> {
    if text.len() != 8 {
        return Err(Error::Parse(format!("expected 8 hex digits, got {text:?}")));
    }
    u32::from_str_radix(text, 16).map_err(|_| Error::Parse(format!("bad hex {text:?}")))
}

fn inspect(args: &InspectArgs, out: &mut dyn Write) -> Result<Status> {
    if let Some(text) = &args.cfp {
        let id = cfp_unpack(parse_hex_word(text)?)?;
        writeln!(out, "source={}", id.source())?;
        writeln!(out, "destination={}", id.destination())?;
        writeln!(out, "kind={}", id.kind().bit())?;
        writeln!(out, "remain={}", id.remain())?;
        writeln!(out, "identifier={}", id.identifier())?;
    }
    if let Some(text) = &args.header {
        let id = decode_csp_header(parse_hex_word(text)?);
        writeln!(out, "priority={}", id.priority())?;
        writeln!(out, "source={}", id.source())?;
        writeln!(out, "destination={}", id.destination())?;
        writeln!(out, "dest_port={}", id.dest_port())?;
        writeln!(out, "source_port={}", id.source_port())?;
        writeln!(out, "flags={}", id.flags())?;
    }
    Ok(Status::Ok)
}

fn decode_hex(text: &str) -> Result<Vec<u8>> {
    hex::decode(text.trim()).map_err(|e| Error::Parse(format!("bad --data-hex: {e}")))
}

fn build_packet(args: &PacketArgs) -> Result<CspPacket> {
    let id = CspId::new(args.pri, args.src, args.dst, args.dport, args.sport, args.flags)?;
    Ok(CspPacket::new(id, decode_hex(&args.data_hex)?))
}

fn packet_line(pool: &BufferPool, p: &PacketBuf) -> Result<String> {
    let data = pool.with_data(p.buffer, |d| hex::encode(d))?;
    Ok(format!("header={:08x} len={} data={}", p.id.to_word(), p.len, data))
}

fn reassemble(text: &str, cfg: &Config, out: &mut dyn Write, err: &mut dyn Write) -> Result<Status> {
    let frames = parse_frames(text)?;
    let pool = BufferPool::new(cfg.pool_capacity, cfg.max_data_len)?;
    let mut engine = RxEngine::new(&pool, cfg)?;
    let mut dropped = 0usize;
    for frame in &frames {
        match engine.can_rx(frame, 0) {
            RxOutcome::Delivered(p) => {
                writeln!(out, "{}", packet_line(&pool, &p)?)?;
                pool.release(p.buffer)?;
            }
            RxOutcome::Consumed => {}
            RxOutcome::Dropped(reason) => {
                dropped += 1;
                writeln!(err, "drop {frame}: {reason:?}")?;
            }
        }
    }
    let incomplete = engine.poll_timeouts(u64::MAX);
    if incomplete > 0 {
        writeln!(err, "{incomplete} incomplete stream(s) discarded")?;
    }
    Ok(if dropped + incomplete == 0 {
        Status::Ok
    } else {
        Status::Dropped
    })
}

fn loopback(data_hex: &str, port: u8, cfg: &Config, out: &mut dyn Write, err: &mut dyn Write) -> Result<Status> {
    let id = CspId::new(2, cfg.local_address, cfg.local_address, port, port, 0)?;
    let packet = CspPacket::new(id, decode_hex(data_hex)?);
    let frames = fragment(&packet, 0, cfg.max_data_len)?;

    let pool = Arc::new(BufferPool::new(cfg.pool_capacity, cfg.max_data_len)?);
    let router = Router::new(cfg, Arc::clone(&pool))?;
    let socket = router.bind(port)?;
    let mut engine = RxEngine::new(Arc::clone(&pool), cfg)?;

    for frame in &frames {
        match engine.can_rx(frame, 0) {
            RxOutcome::Delivered(p) => {
                if !router.queue().push_or_release(p, IfaceTag(0), &pool) {
                    writeln!(err, "queue full")?;
                    return Ok(Status::Dropped);
                }
            }
            RxOutcome::Consumed => {}
            RxOutcome::Dropped(reason) => {
                writeln!(err, "drop {frame}: {reason:?}")?;
                return Ok(Status::Dropped);
            }
        }
    }
    match router.route_once() {
        RouteOutcome::DeliveredToPort(_) => {}
        other => {
            writeln!(err, "route: {other:?}")?;
            return Ok(Status::Dropped);
        }
    }
    let Some(p) = socket.recv() else {
        writeln!(err, "socket empty")?;
        return Ok(Status::Dropped);
    };
    writeln!(out, "port={} {}", socket.port(), packet_line(&pool, &p)?)?;
    pool.release(p.buffer)?;
    Ok(Status::Ok)
}

fn kiss_decode(text: &str, cfg: &Config, out: &mut dyn Write, err: &mut dyn Write) -> Result<Status> {
    let bytes = text
        .split_whitespace()
        .map(|tok| u8::from_str_radix(tok, 16).map_err(|_| Error::Parse(format!("bad hex byte {tok:?}"))))
        .collect::<Result<Vec<u8>>>()?;
    let pool = BufferPool::new(cfg.pool_capacity, cfg.max_data_len)?;
    let mut dec = KissDecoder::new(cfg.max_data_len);
    let mut dropped = 0usize;
    for event in dec.push(&bytes, &pool) {
        match event {
            KissEvent::Delivered(p) => {
                writeln!(out, "{}", packet_line(&pool, &p)?)?;
                pool.release(p.buffer)?;
            }
            KissEvent::Dropped(reason) => {
                dropped += 1;
                writeln!(err, "drop: {reason:?}")?;
            }
        }
    }
    if dec.holds_buffer() {
        dropped += 1;
        writeln!(err, "unterminated frame discarded")?;
    }
    dec.reset(&pool);
    Ok(if dropped == 0 { Status::Ok } else { Status::Dropped })
}
