//! Fixed-capacity packet buffer pool with generation-tagged handles.
//!
//! All storage is allocated when the pool is built. A handle is a plain
//! `(slot, generation)` pair so it can cross an FFI boundary as two integers;
//! releasing bumps the slot's generation, so any copy of an old handle is
//! detected as stale instead of freeing someone else's buffer.
//!
//! Generations are 32-bit and wrap. A handle kept across 2^32 reuses of the
//! same slot would alias; that is accepted for this stack's lifetimes.

use std::fmt;

use parking_lot::Mutex;

use crate::error::{Error, Result};
use crate::model::{CspId, CspPacket};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferHandle {
    slot: u32,
    generation: u32,
}

impl BufferHandle {
    /// Rebuild a handle from its raw parts, e.g. after an FFI round trip.
    pub fn from_raw(slot: u32, generation: u32) -> Self {
        Self { slot, generation }
    }

    pub fn slot(&self) -> u32 {
        self.slot
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }
}

impl fmt::Display for BufferHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "buf#{}@{}", self.slot, self.generation)
    }
}

/// Anything that can hand out fixed-size packet buffers.
///
/// The receive engines are generic over this so the same reassembly code runs
/// over a native [`BufferPool`] and over buffers borrowed from a foreign host.
pub trait BufferStore {
    type Token: Copy + Eq + fmt::Debug;

    /// Bytes of payload each buffer holds.
    fn buffer_capacity(&self) -> usize;

    /// `None` means exhaustion; the caller must treat it as a normal outcome.
    fn acquire_buffer(&self) -> Option<Self::Token>;

    /// Returns `false` if the token was not live.
    fn release_buffer(&self, token: Self::Token) -> bool;

    fn write_at(&self, token: Self::Token, offset: usize, bytes: &[u8]) -> Result<()>;
}

/// A packet whose payload lives in a store buffer. Moving this moves
/// ownership of the buffer; the payload is never copied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketBuf<T = BufferHandle> {
    pub id: CspId,
    pub buffer: T,
    pub len: usize,
}

struct Slot {
    in_use: bool,
    generation: u32,
    len: usize,
    data: Box<[u8]>,
}

struct Slots {
    slots: Vec<Slot>,
    // LIFO so a released slot is the next one handed out.
    free: Vec<u32>,
}

pub struct BufferPool {
    max_data_len: usize,
    inner: Mutex<Slots>,
}

impl fmt::Debug for BufferPool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BufferPool")
            .field("capacity", &self.capacity())
            .field("max_data_len", &self.max_data_len)
            .field("in_use", &self.in_use())
            .finish()
    }
}

impl BufferPool {
    pub fn new(capacity: usize, max_data_len: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("pool capacity must be at least 1".into()));
        }
        let capacity_u32 = u32::try_from(capacity)
            .map_err(|_| Error::InvalidConfig(format!("pool capacity {capacity} too large")))?;
        let slots = (0..capacity)
            .map(|_| Slot {
                in_use: false,
                generation: 0,
                len: 0,
                data: vec![0; max_data_len].into_boxed_slice(),
            })
            .collect();
        Ok(Self {
            max_data_len,
            inner: Mutex::new(Slots {
                slots,
                free: (0..capacity_u32).rev().collect(),
            }),
        })
    }

    pub fn capacity(&self) -> usize {
        self.inner.lock().slots.len()
    }

    pub fn max_data_len(&self) -> usize {
        self.max_data_len
    }

    pub fn acquire(&self) -> Result<BufferHandle> {
        let mut inner = self.inner.lock();
        let slot = inner.free.pop().ok_or(Error::PoolExhausted)?;
        let entry = &mut inner.slots[slot as usize];
        entry.in_use = true;
        entry.len = 0;
        Ok(BufferHandle {
            slot,
            generation: entry.generation,
        })
    }

    pub fn release(&self, h: BufferHandle) -> Result<()> {
        let mut inner = self.inner.lock();
        let entry = live_slot_mut(&mut inner.slots, h)?;
        entry.in_use = false;
        entry.len = 0;
        entry.generation = entry.generation.wrapping_add(1);
        inner.free.push(h.slot);
        Ok(())
    }

    pub fn in_use(&self) -> usize {
        let inner = self.inner.lock();
        inner.slots.len() - inner.free.len()
    }

    /// Snapshot of every slot's current generation.
    pub fn generations(&self) -> Vec<u32> {
        self.inner.lock().slots.iter().map(|s| s.generation).collect()
    }

    pub fn is_live(&self, h: BufferHandle) -> bool {
        let mut inner = self.inner.lock();
        live_slot_mut(&mut inner.slots, h).is_ok()
    }

    /// Copy `bytes` into the buffer at `offset`, extending its fill length.
    pub fn write(&self, h: BufferHandle, offset: usize, bytes: &[u8]) -> Result<()> {
        let end = offset
            .checked_add(bytes.len())
            .filter(|&end| end <= self.max_data_len)
            .ok_or(Error::OutOfBounds {
                offset,
                len: bytes.len(),
                capacity: self.max_data_len,
            })?;
        let mut inner = self.inner.lock();
        let entry = live_slot_mut(&mut inner.slots, h)?;
        entry.data[offset..end].copy_from_slice(bytes);
        entry.len = entry.len.max(end);
        Ok(())
    }

    /// Fill length of a live buffer.
    pub fn len(&self, h: BufferHandle) -> Result<usize> {
        let mut inner = self.inner.lock();
        Ok(live_slot_mut(&mut inner.slots, h)?.len)
    }

    /// Run `f` over the filled part of a live buffer without copying it out.
    pub fn with_data<R>(&self, h: BufferHandle, f: impl FnOnce(&[u8]) -> R) -> Result<R> {
        let mut inner = self.inner.lock();
        let entry = live_slot_mut(&mut inner.slots, h)?;
        Ok(f(&entry.data[..entry.len]))
    }

    pub fn read(&self, h: BufferHandle) -> Result<Vec<u8>> {
        self.with_data(h, <[u8]>::to_vec)
    }

    /// Copy a pooled packet out into an owned one. The buffer stays acquired.
    pub fn to_packet(&self, p: &PacketBuf) -> Result<CspPacket> {
        let data = self.with_data(p.buffer, |d| d[..p.len.min(d.len())].to_vec())?;
        Ok(CspPacket::new(p.id, data))
    }

    /// Copy an owned packet into a fresh buffer.
    pub fn load(&self, p: &CspPacket) -> Result<PacketBuf> {
        if p.data.len() > self.max_data_len {
            return Err(Error::LengthExceedsBuffer {
                len: p.data.len(),
                max: self.max_data_len,
            });
        }
        let h = self.acquire()?;
        self.write(h, 0, &p.data)?;
        Ok(PacketBuf {
            id: p.id,
            buffer: h,
            len: p.data.len(),
        })
    }
}

fn live_slot_mut(slots: &mut [Slot], h: BufferHandle) -> Result<&mut Slot> {
    let stale = Error::StaleHandle {
        slot: h.slot,
        generation: h.generation,
    };
    match slots.get_mut(h.slot as usize) {
        Some(entry) if entry.in_use && entry.generation == h.generation => Ok(entry),
        _ => Err(stale),
    }
}

impl BufferStore for BufferPool {
    type Token = BufferHandle;

    fn buffer_capacity(&self) -> usize {
        self.max_data_len
    }

    fn acquire_buffer(&self) -> Option<BufferHandle> {
        BufferPool::acquire(self).ok()
    }

    fn release_buffer(&self, token: BufferHandle) -> bool {
        BufferPool::release(self, token).is_ok()
    }

    fn write_at(&self, token: BufferHandle, offset: usize, bytes: &[u8]) -> Result<()> {
        self.write(token, offset, bytes)
    }
}

impl<S: BufferStore + ?Sized> BufferStore for &S {
    type Token = S::Token;

    fn buffer_capacity(&self) -> usize {
        (**self).buffer_capacity()
    }

    fn acquire_buffer(&self) -> Option<S::Token> {
        (**self).acquire_buffer()
    }

    fn release_buffer(&self, token: S::Token) -> bool {
        (**self).release_buffer(token)
    }

    fn write_at(&self, token: S::Token, offset: usize, bytes: &[u8]) -> Result<()> {
        (**self).write_at(token, offset, bytes)
    }
}

impl<S: BufferStore + ?Sized> BufferStore for std::sync::Arc<S> {
    type Token = S::Token;

    fn buffer_capacity(&self) -> usize {
        (**self).buffer_capacity()
    }

    fn acquire_buffer(&self) -> Option<S::Token> {
        (**self).acquire_buffer()
    }

    fn release_buffer(&self, token: S::Token) -> bool {
        (**self).release_buffer(token)
    }

    fn write_at(&self, token: S::Token, offset: usize, bytes: &[u8]) -> Result<()> {
        (**self).write_at(token, offset, bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn new_pool() {
        let pool = BufferPool::new(10, 256).unwrap();
        assert_eq!(pool.in_use(), 0);
        assert_eq!(pool.capacity(), 10);
        let big = BufferPool::new(1, 2042).unwrap();
        assert_eq!(big.max_data_len(), 2042);
        assert!(matches!(BufferPool::new(0, 256), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn exhaustion_is_explicit() {
        let pool = BufferPool::new(2, 16).unwrap();
        let a = pool.acquire().unwrap();
        let b = pool.acquire().unwrap();
        assert_ne!(a, b);
        let before = pool.generations();
        assert!(matches!(pool.acquire(), Err(Error::PoolExhausted)));
        assert_eq!(pool.in_use(), 2);
        assert_eq!(pool.generations(), before);
    }

    #[test]
    fn reacquire_bumps_generation() {
        let pool = BufferPool::new(2, 16).unwrap();
        let a = pool.acquire().unwrap();
        pool.release(a).unwrap();
        let b = pool.acquire().unwrap();
        assert_eq!(a.slot(), b.slot());
        assert!(b.generation() > a.generation());
    }

    #[test]
    fn double_and_forged_release() {
        let pool = BufferPool::new(2, 16).unwrap();
        let a = pool.acquire().unwrap();
        pool.release(a).unwrap();
        assert!(matches!(pool.release(a), Err(Error::StaleHandle { .. })));

        let b = pool.acquire().unwrap();
        let forged = BufferHandle::from_raw(b.slot(), b.generation() + 1);
        assert!(matches!(pool.release(forged), Err(Error::StaleHandle { .. })));
        assert!(matches!(
            pool.release(BufferHandle::from_raw(99, 0)),
            Err(Error::StaleHandle { .. })
        ));
        assert_eq!(pool.in_use(), 1);
    }

    #[test]
    fn in_use_counts() {
        let pool = BufferPool::new(3, 16).unwrap();
        assert_eq!(pool.in_use(), 0);
        let a = pool.acquire().unwrap();
        assert_eq!(pool.in_use(), 1);
        pool.release(a).unwrap();
        assert_eq!(pool.in_use(), 0);
    }

    #[test]
    fn writes_are_bounds_checked() {
        let pool = BufferPool::new(1, 8).unwrap();
        let h = pool.acquire().unwrap();
        pool.write(h, 0, &[1, 2, 3]).unwrap();
        pool.write(h, 3, &[4, 5, 6, 7, 8]).unwrap();
        assert_eq!(pool.read(h).unwrap(), [1, 2, 3, 4, 5, 6, 7, 8]);
        assert!(matches!(pool.write(h, 8, &[9]), Err(Error::OutOfBounds { .. })));
        assert!(matches!(
            pool.write(h, usize::MAX, &[9]),
            Err(Error::OutOfBounds { .. })
        ));
        pool.release(h).unwrap();
        assert!(pool.write(h, 0, &[1]).is_err());
        assert!(pool.read(h).is_err());
    }

    #[test]
    fn fill_length_resets_on_reuse() {
        let pool = BufferPool::new(1, 8).unwrap();
        let h = pool.acquire().unwrap();
        pool.write(h, 0, &[1, 2, 3]).unwrap();
        pool.release(h).unwrap();
        let h = pool.acquire().unwrap();
        assert_eq!(pool.len(h).unwrap(), 0);
        assert!(pool.read(h).unwrap().is_empty());
    }

    #[test]
    fn concurrent_acquire_release() {
        let pool = Arc::new(BufferPool::new(8, 32).unwrap());
        let threads: Vec<_> = (0..4)
            .map(|_| {
                let pool = Arc::clone(&pool);
                std::thread::spawn(move || {
                    for _ in 0..2000 {
                        if let Ok(h) = pool.acquire() {
                            pool.write(h, 0, &[7; 32]).unwrap();
                            pool.release(h).unwrap();
                        }
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        assert_eq!(pool.in_use(), 0);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Acquire,
        Release(usize),
        ReleaseOld(usize),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            Just(Op::Acquire),
            any::<usize>().prop_map(Op::Release),
            any::<usize>().prop_map(Op::ReleaseOld),
        ]
    }

    proptest! {
        #[test]
        fn conservation(cap in 1usize..6, ops in prop::collection::vec(op(), 0..200)) {
            let pool = BufferPool::new(cap, 4).unwrap();
            let mut live = Vec::new();
            let mut dead = Vec::new();
            let (mut acquired, mut released) = (0usize, 0usize);
            for op in ops {
                match op {
                    Op::Acquire => match pool.acquire() {
                        Ok(h) => { acquired += 1; live.push(h); }
                        Err(_) => prop_assert_eq!(live.len(), cap),
                    },
                    Op::Release(i) if !live.is_empty() => {
                        let h = live.swap_remove(i % live.len());
                        prop_assert!(pool.release(h).is_ok());
                        released += 1;
                        dead.push(h);
                    }
                    Op::ReleaseOld(i) if !dead.is_empty() => {
                        prop_assert!(pool.release(dead[i % dead.len()]).is_err());
                    }
                    _ => {}
                }
                prop_assert_eq!(pool.in_use(), acquired - released);
                prop_assert!(pool.in_use() <= cap);
            }
        }
    }
}
