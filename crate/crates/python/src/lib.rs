//! Python bindings for `csp_core`.
//!
//! Exposes the header and CAN id codecs, fragmentation, a CAN reassembler, a
//! KISS decoder and the fuzz harness. Payloads cross the boundary as `bytes`;
//! buffers stay inside the Rust pool and are copied out only on delivery.

use std::sync::Arc;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use csp_core::cfp::{self, CanFrame, CfpId, FrameKind, RxEngine, RxOutcome};
use csp_core::fuzz;
use csp_core::kiss::{self, KissEvent};
use csp_core::model::{self, Config};
use csp_core::pool::{BufferHandle, BufferPool, PacketBuf};

create_exception!(pycsp, CspError, PyValueError, "Invalid argument or configuration.");

fn err(e: csp_core::Error) -> PyErr {
    CspError::new_err(e.to_string())
}

/// Packet header: priority, addresses, ports and flags.
#[pyclass(name = "CspId", eq, frozen, hash, from_py_object, module = "pycsp")]
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct PyCspId(model::CspId);

#[pymethods]
impl PyCspId {
    #[new]
    #[pyo3(signature = (pri, src, dst, dport, sport, flags = 0))]
    fn new(pri: u8, src: u8, dst: u8, dport: u8, sport: u8, flags: u8) -> PyResult<Self> {
        model::CspId::new(pri, src, dst, dport, sport, flags).map(Self).map_err(err)
    }

    /// Decode a 32-bit header word. Every word is valid.
    #[staticmethod]
    fn from_word(word: u32) -> Self {
        Self(model::decode_csp_header(word))
    }

    #[getter]
    fn pri(&self) -> u8 {
        self.0.priority()
    }

    #[getter]
    fn src(&self) -> u8 {
        self.0.source()
    }

    #[getter]
    fn dst(&self) -> u8 {
        self.0.destination()
    }

    #[getter]
    fn dport(&self) -> u8 {
        self.0.dest_port()
    }

    #[getter]
    fn sport(&self) -> u8 {
        self.0.source_port()
    }

    #[getter]
    fn flags(&self) -> u8 {
        self.0.flags()
    }

    #[getter]
    fn word(&self) -> u32 {
        self.0.to_word()
    }

    fn __repr__(&self) -> String {
        format!(
            "CspId(pri={}, src={}, dst={}, dport={}, sport={}, flags={:#04x})",
            self.0.priority(),
            self.0.source(),
            self.0.destination(),
            self.0.dest_port(),
            self.0.source_port(),
            self.0.flags()
        )
    }
}

/// A delivered packet with its payload copied out of the pool.
#[pyclass(name = "Packet", frozen, module = "pycsp")]
struct PyPacket {
    #[pyo3(get)]
    id: PyCspId,
    data: Vec<u8>,
}

#[pymethods]
impl PyPacket {
    #[new]
    fn new(id: PyCspId, data: Vec<u8>) -> Self {
        Self { id, data }
    }

    #[getter]
    fn data<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.data)
    }

    fn __len__(&self) -> usize {
        self.data.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.id == other.id && self.data == other.data
    }

    fn __repr__(&self) -> String {
        format!("Packet({}, {} bytes)", self.id.__repr__(), self.data.len())
    }
}

fn take_packet(pool: &BufferPool, p: &PacketBuf) -> PyResult<PyPacket> {
    let packet = pool.to_packet(p).map_err(err)?;
    pool.release(p.buffer).map_err(err)?;
    Ok(PyPacket {
        id: PyCspId(packet.id),
        data: packet.data,
    })
}

fn build_config(
    max_data_len: usize,
    pool_capacity: usize,
    rx_slot_count: usize,
    reassembly_timeout_ms: u64,
) -> PyResult<Config> {
    let cfg = Config {
        max_data_len,
        pool_capacity,
        rx_slot_count,
        reassembly_timeout_ms,
        ..Config::default()
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

#[pyfunction]
fn encode_header(id: PyCspId) -> u32 {
    model::encode_csp_header(id.0)
}

#[pyfunction]
fn decode_header(word: u32) -> PyCspId {
    PyCspId(model::decode_csp_header(word))
}

/// Pack a 29-bit CAN id. `more` selects a continuation frame.
#[pyfunction]
fn cfp_pack(src: u8, dst: u8, more: bool, remain: u8, ident: u16) -> PyResult<u32> {
    let kind = if more { FrameKind::More } else { FrameKind::Begin };
    CfpId::new(src, dst, kind, remain, ident).map(cfp::cfp_pack).map_err(err)
}

/// Unpack a 29-bit CAN id into `(src, dst, more, remain, ident)`.
#[pyfunction]
fn cfp_unpack(ext_id: u32) -> PyResult<(u8, u8, bool, u8, u16)> {
    let id = cfp::cfp_unpack(ext_id).map_err(err)?;
    Ok((
        id.source(),
        id.destination(),
        id.kind() == FrameKind::More,
        id.remain(),
        id.identifier(),
    ))
}

#[pyfunction]
fn frame_count(length: usize) -> usize {
    cfp::frame_count(length)
}

/// Split a packet into `(ext_id, payload)` CAN frames.
#[pyfunction]
#[pyo3(signature = (id, data, ident = 0, max_data_len = 256))]
fn fragment<'py>(
    py: Python<'py>,
    id: PyCspId,
    data: &[u8],
    ident: u16,
    max_data_len: usize,
) -> PyResult<Vec<(u32, Bound<'py, PyBytes>)>> {
    let packet = model::CspPacket::new(id.0, data);
    let frames = cfp::fragment(&packet, ident, max_data_len).map_err(err)?;
    Ok(frames
        .iter()
        .map(|f| (f.ext_id(), PyBytes::new(py, f.payload())))
        .collect())
}

#[pyfunction]
fn kiss_encode<'py>(py: Python<'py>, id: PyCspId, data: &[u8]) -> Bound<'py, PyBytes> {
    PyBytes::new(py, &kiss::kiss_encode(&model::CspPacket::new(id.0, data)))
}

/// CAN reassembler with its own buffer pool.
///
/// `rx` returns a `Packet` when a frame completes one, `None` when the frame
/// was consumed, and raises nothing for malformed traffic: drops are counted
/// and the most recent reason is available as `last_drop`.
#[pyclass(name = "Reassembler", module = "pycsp")]
struct PyReassembler {
    pool: Arc<BufferPool>,
    engine: RxEngine<Arc<BufferPool>>,
    last_drop: Option<String>,
}

#[pymethods]
impl PyReassembler {
    #[new]
    #[pyo3(signature = (max_data_len = 256, pool_capacity = 10, rx_slot_count = 2, reassembly_timeout_ms = 1000))]
    fn new(max_data_len: usize, pool_capacity: usize, rx_slot_count: usize, reassembly_timeout_ms: u64) -> PyResult<Self> {
        let cfg = build_config(max_data_len, pool_capacity, rx_slot_count, reassembly_timeout_ms)?;
        let pool = Arc::new(BufferPool::new(cfg.pool_capacity, cfg.max_data_len).map_err(err)?);
        let engine = RxEngine::new(Arc::clone(&pool), &cfg).map_err(err)?;
        Ok(Self {
            pool,
            engine,
            last_drop: None,
        })
    }

    #[pyo3(signature = (ext_id, data, now = 0))]
    fn rx(&mut self, ext_id: u32, data: &[u8], now: u64) -> PyResult<Option<PyPacket>> {
        let frame = CanFrame::new(ext_id & cfp::CAN_EXT_ID_MASK, data).map_err(err)?;
        match self.engine.can_rx(&frame, now) {
            RxOutcome::Delivered(p) => take_packet(&self.pool, &p).map(Some),
            RxOutcome::Consumed => Ok(None),
            RxOutcome::Dropped(reason) => {
                self.last_drop = Some(format!("{reason:?}"));
                Ok(None)
            }
        }
    }

    /// Abandon streams whose deadline is before `now`; returns how many.
    fn poll_timeouts(&mut self, now: u64) -> usize {
        self.engine.poll_timeouts(now)
    }

    #[getter]
    fn last_drop(&self) -> Option<String> {
        self.last_drop.clone()
    }

    #[getter]
    fn active_streams(&self) -> usize {
        self.engine.active_slots()
    }

    #[getter]
    fn buffers_in_use(&self) -> usize {
        self.pool.in_use()
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        stats_dict(py, &self.engine.counters().snapshot())
    }
}

fn stats_dict<'py>(py: Python<'py>, stats: &impl serde::Serialize) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new(py);
    let value = serde_json::to_value(stats).map_err(|e| CspError::new_err(e.to_string()))?;
    if let serde_json::Value::Object(map) = value {
        for (k, v) in map {
            dict.set_item(k, v.as_u64())?;
        }
    }
    Ok(dict)
}

/// Incremental KISS decoder with its own buffer pool.
#[pyclass(name = "KissDecoder", module = "pycsp")]
struct PyKissDecoder {
    pool: BufferPool,
    decoder: kiss::KissDecoder<BufferHandle>,
}

#[pymethods]
impl PyKissDecoder {
    #[new]
    #[pyo3(signature = (max_data_len = 256, pool_capacity = 2))]
    fn new(max_data_len: usize, pool_capacity: usize) -> PyResult<Self> {
        Ok(Self {
            pool: BufferPool::new(pool_capacity, max_data_len).map_err(err)?,
            decoder: kiss::KissDecoder::new(max_data_len),
        })
    }

    /// Feed bytes; returns the packets completed by them. Malformed frames
    /// are counted in `stats()`.
    fn push(&mut self, data: &[u8]) -> PyResult<Vec<PyPacket>> {
        let mut out = Vec::new();
        for event in self.decoder.push(data, &self.pool) {
            if let KissEvent::Delivered(p) = event {
                out.push(take_packet(&self.pool, &p)?);
            }
        }
        Ok(out)
    }

    fn reset(&mut self) {
        self.decoder.reset(&self.pool);
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        stats_dict(py, &self.decoder.counters().snapshot())
    }
}

/// Run one fuzz input through a fresh engine; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (data, max_data_len = 256, pool_capacity = 10, rx_slot_count = 2))]
fn run_fuzz_case<'py>(
    py: Python<'py>,
    data: &[u8],
    max_data_len: usize,
    pool_capacity: usize,
    rx_slot_count: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = build_config(max_data_len, pool_capacity, rx_slot_count, 1000)?;
    let report = fuzz::run_fuzz_case(data, &cfg).map_err(err)?;
    let dict = PyDict::new(py);
    dict.set_item("frames", report.frames)?;
    dict.set_item("delivered", report.outcomes.delivered)?;
    dict.set_item("leaked", report.leaked)?;
    dict.set_item("ownership_violations", report.ownership_violations)?;
    dict.set_item("compared", report.compared)?;
    dict.set_item("divergence", report.divergence)?;
    dict.set_item("passed", report.passed())?;
    Ok(dict)
}

#[pymodule]
fn pycsp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CspError", m.py().get_type::<CspError>())?;
    m.add_class::<PyCspId>()?;
    m.add_class::<PyPacket>()?;
    m.add_class::<PyReassembler>()?;
    m.add_class::<PyKissDecoder>()?;
    m.add_function(wrap_pyfunction!(encode_header, m)?)?;
    m.add_function(wrap_pyfunction!(decode_header, m)?)?;
    m.add_function(wrap_pyfunction!(cfp_pack, m)?)?;
    m.add_function(wrap_pyfunction!(cfp_unpack, m)?)?;
    m.add_function(wrap_pyfunction!(frame_count, m)?)?;
    m.add_function(wrap_pyfunction!(fragment, m)?)?;
    m.add_function(wrap_pyfunction!(kiss_encode, m)?)?;
    m.add_function(wrap_pyfunction!(run_fuzz_case, m)?)?;
    Ok(())
}
