//! C-callable replacement for the CAN interface receive function.
//!
//! A host library built with `csp_can2_rx` declared `extern` links against
//! this crate's static library. Buffers stay owned by the host: the shim
//! borrows them through the callbacks in [`CspShimHostEnv`], writes fragment
//! data into them, and hands completed packets back with `enqueue_packet`.
//! The published declarations live in `include/csp_shim.h`.
//!
//! Nothing here unwinds into C. After `shim_init` the receive path performs
//! no allocation and no I/O.

use std::ffi::c_void;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr::NonNull;
use std::sync::Mutex;

use crate::cfp::{CanFrame, DropReason, RxEngine, RxOutcome, CAN_EXT_ID_MASK, CAN_MAX_DLC};
use crate::error::{Error, Result};
use crate::model::Config;
use crate::pool::BufferStore;

pub type AcquireBufferFn = unsafe extern "C" fn(context: *mut c_void) -> *mut u8;
pub type ReleaseBufferFn = unsafe extern "C" fn(context: *mut c_void, buffer: *mut u8);
pub type EnqueuePacketFn =
    unsafe extern "C" fn(context: *mut c_void, buffer: *mut u8, length: u16, header: u32);
pub type NowMsFn = unsafe extern "C" fn(context: *mut c_void) -> u32;

/// Host callback table. Mirrors `csp_shim_host_env_t`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CspShimHostEnv {
    pub context: *mut c_void,
    /// Returns a buffer of at least `max_data_len` bytes, or NULL when empty.
    pub acquire_buffer: Option<AcquireBufferFn>,
    pub release_buffer: Option<ReleaseBufferFn>,
    /// Takes ownership of a completed packet's buffer.
    pub enqueue_packet: Option<EnqueuePacketFn>,
    /// Optional millisecond clock; NULL freezes time at 0.
    pub now_ms: Option<NowMsFn>,
}

/// Mirrors `csp_shim_config_t`. A NULL config pointer means defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CspShimConfig {
    pub max_data_len: u16,
    pub rx_slot_count: u8,
    pub reassembly_timeout_ms: u32,
}

impl Default for CspShimConfig {
    fn default() -> Self {
        let cfg = Config::default();
        Self {
            max_data_len: cfg.max_data_len as u16,
            rx_slot_count: cfg.rx_slot_count as u8,
            reassembly_timeout_ms: cfg.reassembly_timeout_ms as u32,
        }
    }
}

impl From<CspShimConfig> for Config {
    fn from(c: CspShimConfig) -> Self {
        Config {
            max_data_len: c.max_data_len.into(),
            rx_slot_count: c.rx_slot_count.into(),
            reassembly_timeout_ms: c.reassembly_timeout_ms.into(),
            ..Config::default()
        }
    }
}

/// Return codes of `csp_can2_rx`.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShimStatus {
    Ok = 0,
    InvalidArgument = -1,
    NoBuffer = -2,
    Dropped = -3,
}

impl ShimStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// Extra return code of `shim_init` for a second initialization.
pub const SHIM_ERR_ALREADY_INITIALIZED: i32 = -4;

#[derive(Debug, Clone, Copy)]
struct Callbacks {
    context: *mut c_void,
    acquire: AcquireBufferFn,
    release: ReleaseBufferFn,
    enqueue: EnqueuePacketFn,
    now_ms: Option<NowMsFn>,
}

/// Buffers borrowed from the host through its callbacks.
#[derive(Debug)]
pub struct HostBuffers {
    callbacks: Callbacks,
    capacity: usize,
}

/// A buffer pointer lent by the host.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostBuffer(NonNull<u8>);

impl HostBuffer {
    pub fn as_ptr(self) -> *mut u8 {
        self.0.as_ptr()
    }
}

// SAFETY: the host owns `context` and the buffers; it promises to serialize
// all calls into the shim, which is the only place these pointers are used.
unsafe impl Send for HostBuffers {}
unsafe impl Send for HostBuffer {}

impl BufferStore for HostBuffers {
    type Token = HostBuffer;

    fn buffer_capacity(&self) -> usize {
        self.capacity
    }

    fn acquire_buffer(&self) -> Option<HostBuffer> {
        // SAFETY: callback validated non-null at init; the host contract.
        NonNull::new(unsafe { (self.callbacks.acquire)(self.callbacks.context) }).map(HostBuffer)
    }

    fn release_buffer(&self, token: HostBuffer) -> bool {
        // SAFETY: token came from acquire and has not been handed back yet.
        unsafe { (self.callbacks.release)(self.callbacks.context, token.as_ptr()) };
        true
    }

    fn write_at(&self, token: HostBuffer, offset: usize, bytes: &[u8]) -> Result<()> {
        let end = offset
            .checked_add(bytes.len())
            .filter(|&end| end <= self.capacity)
            .ok_or(Error::OutOfBounds {
                offset,
                len: bytes.len(),
                capacity: self.capacity,
            })?;
        debug_assert!(end <= self.capacity);
        // SAFETY: the host guarantees `capacity` writable bytes per buffer and
        // the range was checked above.
        unsafe {
            token
                .as_ptr()
                .add(offset)
                .copy_from_nonoverlapping(bytes.as_ptr(), bytes.len());
        }
        Ok(())
    }
}

/// One reassembly engine bound to a host callback table.
pub struct Shim {
    engine: RxEngine<HostBuffers>,
}

impl Shim {
    /// # Safety
    ///
    /// The callbacks and `context` in `env` must stay valid for the lifetime
    /// of the returned value, and every buffer handed out by
    /// `acquire_buffer` must have at least `cfg.max_data_len` writable bytes.
    pub unsafe fn new(env: &CspShimHostEnv, cfg: &Config) -> Result<Self> {
        let (Some(acquire), Some(release), Some(enqueue)) =
            (env.acquire_buffer, env.release_buffer, env.enqueue_packet)
        else {
            return Err(Error::InvalidConfig("host callbacks must be non-null".into()));
        };
        let store = HostBuffers {
            callbacks: Callbacks {
                context: env.context,
                acquire,
                release,
                enqueue,
                now_ms: env.now_ms,
            },
            capacity: cfg.max_data_len,
        };
        Ok(Self {
            engine: RxEngine::new(store, cfg)?,
        })
    }

    pub fn can2_rx(&mut self, ext_id: u32, data: &[u8]) -> ShimStatus {
        if data.len() > CAN_MAX_DLC {
            return ShimStatus::InvalidArgument;
        }
        let Ok(frame) = CanFrame::new(ext_id & CAN_EXT_ID_MASK, data) else {
            return ShimStatus::InvalidArgument;
        };
        let callbacks = self.engine.store().callbacks;
        let now = callbacks
            // SAFETY: host-provided clock, valid per `Shim::new` contract.
            .now_ms.map_or(0, |f| unsafe { f(callbacks.context) });
        match self.engine.can_rx(&frame, now.into()) {
            RxOutcome::Delivered(p) => {
                // SAFETY: ownership of the host buffer passes back to the host.
                unsafe {
                    (callbacks.enqueue)(callbacks.context, p.buffer.as_ptr(), p.len as u16, p.id.to_word())
                };
                ShimStatus::Ok
            }
            RxOutcome::Consumed => ShimStatus::Ok,
            RxOutcome::Dropped(DropReason::NoBuffer) => ShimStatus::NoBuffer,
            RxOutcome::Dropped(_) => ShimStatus::Dropped,
        }
    }

    pub fn engine(&self) -> &RxEngine<HostBuffers> {
        &self.engine
    }
}

static SHIM: Mutex<Option<Shim>> = Mutex::new(None);

fn with_shim<R>(f: impl FnOnce(&mut Option<Shim>) -> R) -> R {
    let mut guard = SHIM.lock().unwrap_or_else(|poisoned| poisoned.into_inner());
    f(&mut guard)
}

/// Install the host callbacks and build the single engine instance.
///
/// Returns 0, -1 for a NULL/incomplete env or invalid config, or
/// [`SHIM_ERR_ALREADY_INITIALIZED`].
///
/// # Safety
///
/// `env` must point to a valid callback table; `cfg` may be NULL. The
/// callbacks must remain callable for the rest of the process.
#[no_mangle]
pub unsafe extern "C" fn shim_init(env: *const CspShimHostEnv, cfg: *const CspShimConfig) -> i32 {
    catch_unwind(AssertUnwindSafe(|| {
        // SAFETY: caller contract; both pointers are checked for NULL.
        let Some(env) = (unsafe { env.as_ref() }) else {
            return ShimStatus::InvalidArgument.code();
        };
        let cfg: Config = unsafe { cfg.as_ref() }.copied().unwrap_or_default().into();
        with_shim(|slot| {
            if slot.is_some() {
                return SHIM_ERR_ALREADY_INITIALIZED;
            }
            // SAFETY: forwarded caller contract.
            match unsafe { Shim::new(env, &cfg) } {
                Ok(shim) => {
                    *slot = Some(shim);
                    ShimStatus::Ok.code()
                }
                Err(_) => ShimStatus::InvalidArgument.code(),
            }
        })
    }))
    .unwrap_or(ShimStatus::InvalidArgument.code())
}

/// Feed one received CAN frame into reassembly.
///
/// # Safety
///
/// `data` must be readable for `dlc` bytes when `dlc` is at most 8.
/// `task_woken` may be NULL. Calls must be serialized by the host.
#[no_mangle]
pub unsafe extern "C" fn csp_can2_rx(
    _iface: *mut c_void,
    id: u32,
    data: *const u8,
    dlc: u8,
    task_woken: *mut i32,
) -> i32 {
    catch_unwind(AssertUnwindSafe(|| {
        // SAFETY: NULL allowed; otherwise the caller provides a valid int.
        if let Some(woken) = unsafe { task_woken.as_mut() } {
            *woken = 0;
        }
        let len = usize::from(dlc);
        if len > CAN_MAX_DLC || (data.is_null() && len > 0) {
            return ShimStatus::InvalidArgument.code();
        }
        let payload: &[u8] = if len == 0 {
            &[]
        } else {
            // SAFETY: non-null and readable for dlc <= 8 bytes per contract.
            unsafe { std::slice::from_raw_parts(data, len) }
        };
        with_shim(|slot| match slot {
            Some(shim) => shim.can2_rx(id, payload).code(),
            None => ShimStatus::InvalidArgument.code(),
        })
    }))
    .unwrap_or(ShimStatus::Dropped.code())
}
