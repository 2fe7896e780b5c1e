//! A fixed-allocation CubeSat Space Protocol packet stack.
//!
//! - [`model`]: packet identity, the 32-bit header codec and configuration.
//! - [`pool`]: preallocated packet buffers behind generation-checked handles.
//! - [`cfp`]: CAN fragmentation and the hardened reassembly engine.
//! - [`kiss`]: serial framing with explicit buffer-exhaustion handling.
//! - [`router`]: ingress queue, port delivery and sockets.
//! - [`shim`]: the C ABI drop-in for a host library's CAN receive function.
//! - [`fuzz`]: fuzz entry points, corpus replay and a reference reassembler.
//! - [`cli`]: the `csptool` command line.

pub mod cfp;
pub mod cli;
pub mod error;
pub mod fuzz;
pub mod kiss;
pub mod model;
pub mod pool;
pub mod router;
pub mod shim;

pub use cfp::{
    cfp_pack, cfp_unpack, fragment, parse_frames, CanFrame, CfpId, DropReason, FrameKind, RxEngine,
    RxOutcome, RxSlot, StreamKey,
};
pub use error::{Error, Result};
pub use kiss::{kiss_encode, KissDecoder, KissDrop, KissEvent, KissState};
pub use model::{
    decode_csp_header, encode_csp_header, validate_packet, Config, Counters, CspId, CspPacket, Stats,
};
pub use pool::{BufferHandle, BufferPool, BufferStore, PacketBuf};
pub use router::{csp_send, GlobalQueue, IfaceTag, QueueFull, RouteOutcome, Router, Socket, SocketTable};
pub use shim::{ShimStatus, Shim};
