//! Ingress queue, single-hop local delivery and the socket API.
//!
//! Interfaces push pooled packets into a bounded [`GlobalQueue`]; one router
//! thread pops them and hands each to the socket bound on its destination
//! port. Every packet ends up either in exactly one socket FIFO or released
//! back to the pool through a counted drop.

use std::sync::Arc;

use crossbeam_queue::ArrayQueue;
use parking_lot::Mutex;

use crate::cfp::{fragment, CanFrame};
use crate::error::{Error, Result};
use crate::model::{bump, check_range, Config, Counters, CspPacket, MAX_PORT};
use crate::pool::{BufferPool, PacketBuf};

/// Which interface a packet arrived on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct IfaceTag(pub u8);

/// Returned when the queue is full. The caller still owns the packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueFull {
    pub packet: PacketBuf,
    pub iface: IfaceTag,
}

/// Bounded multi-producer FIFO feeding the router.
#[derive(Debug)]
pub struct GlobalQueue {
    queue: ArrayQueue<(PacketBuf, IfaceTag)>,
    counters: Arc<Counters>,
}

impl GlobalQueue {
    pub fn new(depth: usize, counters: Arc<Counters>) -> Self {
        Self {
            queue: ArrayQueue::new(depth.max(1)),
            counters,
        }
    }

    pub fn push(&self, packet: PacketBuf, iface: IfaceTag) -> Result<(), QueueFull> {
        self.queue.push((packet, iface)).map_err(|(packet, iface)| {
            bump!(self.counters, q_overflow);
            QueueFull { packet, iface }
        })
    }

    /// Push, releasing the buffer if the queue is full.
    pub fn push_or_release(&self, packet: PacketBuf, iface: IfaceTag, pool: &BufferPool) -> bool {
        match self.push(packet, iface) {
            Ok(()) => true,
            Err(full) => {
                let _ = pool.release(full.packet.buffer);
                false
            }
        }
    }

    pub fn pop(&self) -> Option<(PacketBuf, IfaceTag)> {
        self.queue.pop()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.queue.capacity()
    }
}

/// A bound receive endpoint. Clones share the same FIFO.
#[derive(Debug, Clone)]
pub struct Socket {
    port: u8,
    fifo: Arc<ArrayQueue<PacketBuf>>,
}

impl Socket {
    pub fn port(&self) -> u8 {
        self.port
    }

    /// Pop the oldest packet. Ownership of its buffer moves to the caller.
    pub fn recv(&self) -> Option<PacketBuf> {
        self.fifo.pop()
    }

    pub fn pending(&self) -> usize {
        self.fifo.len()
    }
}

/// Port to socket map; at most one socket per port.
#[derive(Debug)]
pub struct SocketTable {
    ports: Mutex<[Option<Arc<ArrayQueue<PacketBuf>>>; MAX_PORT as usize + 1]>,
    depth: usize,
}

impl SocketTable {
    pub fn new(depth: usize) -> Self {
        Self {
            ports: Mutex::new(std::array::from_fn(|_| None)),
            depth: depth.max(1),
        }
    }

    pub fn bind(&self, port: u8) -> Result<Socket> {
        check_range("port", port.into(), MAX_PORT.into())?;
        let mut ports = self.ports.lock();
        let entry = &mut ports[usize::from(port)];
        if entry.is_some() {
            return Err(Error::PortInUse(port));
        }
        let fifo = Arc::new(ArrayQueue::new(self.depth));
        *entry = Some(Arc::clone(&fifo));
        Ok(Socket { port, fifo })
    }

    /// Unbind a port, releasing anything still queued on it.
    pub fn unbind(&self, port: u8, pool: &BufferPool) -> bool {
        let Some(fifo) = self.ports.lock().get_mut(usize::from(port)).and_then(Option::take) else {
            return false;
        };
        while let Some(p) = fifo.pop() {
            let _ = pool.release(p.buffer);
        }
        true
    }

    fn lookup(&self, port: u8) -> Option<Arc<ArrayQueue<PacketBuf>>> {
        self.ports.lock().get(usize::from(port)).cloned().flatten()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteOutcome {
    DeliveredToPort(u8),
    DroppedUnbound,
    /// The port is bound but its FIFO is full; the newest packet is dropped.
    DroppedSocketFull,
    DroppedNotLocal,
    Empty,
}

/// Single-hop router: queue in, sockets out.
#[derive(Debug)]
pub struct Router {
    queue: Arc<GlobalQueue>,
    table: SocketTable,
    pool: Arc<BufferPool>,
    local_address: u8,
    counters: Arc<Counters>,
}

impl Router {
    pub fn new(cfg: &Config, pool: Arc<BufferPool>) -> Result<Self> {
        Self::with_counters(cfg, pool, Arc::default())
    }

    pub fn with_counters(cfg: &Config, pool: Arc<BufferPool>, counters: Arc<Counters>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            queue: Arc::new(GlobalQueue::new(cfg.queue_depth, Arc::clone(&counters))),
            table: SocketTable::new(cfg.queue_depth),
            pool,
            local_address: cfg.local_address,
            counters,
        })
    }

    pub fn queue(&self) -> &Arc<GlobalQueue> {
        &self.queue
    }

    pub fn sockets(&self) -> &SocketTable {
        &self.table
    }

    pub fn pool(&self) -> &Arc<BufferPool> {
        &self.pool
    }

    pub fn counters(&self) -> &Arc<Counters> {
        &self.counters
    }

    pub fn bind(&self, port: u8) -> Result<Socket> {
        self.table.bind(port)
    }

    pub fn route_once(&self) -> RouteOutcome {
        let Some((packet, _iface)) = self.queue.pop() else {
            return RouteOutcome::Empty;
        };
        if packet.id.destination() != self.local_address {
            self.drop_packet(packet);
            bump!(self.counters, not_local);
            return RouteOutcome::DroppedNotLocal;
        }
        let port = packet.id.dest_port();
        let Some(fifo) = self.table.lookup(port) else {
            self.drop_packet(packet);
            bump!(self.counters, port_unbound);
            return RouteOutcome::DroppedUnbound;
        };
        match fifo.push(packet) {
            Ok(()) => RouteOutcome::DeliveredToPort(port),
            Err(packet) => {
                self.drop_packet(packet);
                bump!(self.counters, socket_overflow);
                RouteOutcome::DroppedSocketFull
            }
        }
    }

    /// Route until the queue is empty; returns how many packets were handled.
    pub fn route_all(&self) -> usize {
        let mut n = 0;
        while self.route_once() != RouteOutcome::Empty {
            n += 1;
        }
        n
    }

    fn drop_packet(&self, packet: PacketBuf) {
        let _ = self.pool.release(packet.buffer);
    }
}

/// Fragment `p` and hand each frame to `tx` in order.
pub fn csp_send(
    p: &CspPacket,
    identifier: u16,
    max_data_len: usize,
    mut tx: impl FnMut(CanFrame),
) -> Result<usize> {
    let frames = fragment(p, identifier, max_data_len)?;
    let n = frames.len();
    frames.into_iter().for_each(&mut tx);
    Ok(n)
}
