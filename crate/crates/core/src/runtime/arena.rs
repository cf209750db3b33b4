//! Reuse-oriented buffer allocator.
//!
//! Freed buffers are parked in free lists keyed by capacity. A request for
//! `n` bytes reuses the smallest parked buffer whose capacity lies in
//! `[n, 2n]`; otherwise a fresh buffer of exactly `n` bytes is created.
//! Buffers are never split or returned to the system while the arena lives.

use std::collections::BTreeMap;

use bytemuck::Pod;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Handle to a live arena buffer. Stale handles are detected by generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferHandle {
    index: u32,
    generation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ReusePolicy {
    /// Smallest free buffer with capacity in `[n, 2n]`.
    #[default]
    BestFitCapped,
    /// Every request gets a fresh buffer; freed buffers are retired.
    NoReuse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ArenaCounters {
    pub alloc_calls: u64,
    pub reuse_hits: u64,
    pub fresh_allocations: u64,
    /// Sum of the capacities of all freshly created buffers, i.e. the memory
    /// the arena has obtained from the system.
    pub fresh_bytes: u64,
    /// Maximum over time of the summed capacity of live buffers.
    pub peak_bytes: u64,
    pub live_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    Alloc { id: u64, bytes: usize },
    Free { id: u64 },
}

#[derive(Debug)]
struct Slot {
    storage: Vec<u64>,
    capacity: usize,
    generation: u32,
    live: bool,
    taken: bool,
    trace_id: u64,
}

#[derive(Debug, Default)]
pub struct Arena {
    slots: Vec<Slot>,
    free_lists: BTreeMap<usize, Vec<u32>>,
    policy: ReusePolicy,
    counters: ArenaCounters,
    trace: Option<Vec<TraceEvent>>,
    next_trace_id: u64,
}

impl Arena {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_policy(policy: ReusePolicy) -> Self {
        Self {
            policy,
            ..Self::default()
        }
    }

    /// Starts recording alloc/free events for later replay.
    pub fn record_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.take().unwrap_or_default()
    }

    pub fn policy(&self) -> ReusePolicy {
        self.policy
    }

    pub fn counters(&self) -> ArenaCounters {
        self.counters
    }

    /// Bytes parked in free lists.
    pub fn free_bytes(&self) -> usize {
        self.free_lists.iter().map(|(cap, v)| cap * v.len()).sum()
    }

    pub fn alloc(&mut self, bytes: usize) -> Result<BufferHandle> {
        if bytes == 0 {
            return Err(Error::InvalidSize(0));
        }
        self.counters.alloc_calls += 1;
        let reused = match self.policy {
            ReusePolicy::BestFitCapped => self.pop_free(bytes),
            ReusePolicy::NoReuse => None,
        };
        let index = match reused {
            Some(index) => {
                self.counters.reuse_hits += 1;
                index
            }
            None => {
                self.counters.fresh_allocations += 1;
                self.counters.fresh_bytes += bytes as u64;
                self.slots.push(Slot {
                    storage: vec![0u64; bytes.div_ceil(8)],
                    capacity: bytes,
                    generation: 0,
                    live: false,
                    taken: false,
                    trace_id: 0,
                });
                (self.slots.len() - 1) as u32
            }
        };
        let trace_id = self.next_trace_id;
        self.next_trace_id += 1;
        let slot = &mut self.slots[index as usize];
        debug_assert!(!slot.live, "buffer handed out twice");
        slot.live = true;
        slot.generation = slot.generation.wrapping_add(1);
        slot.trace_id = trace_id;
        let capacity = slot.capacity as u64;
        let handle = BufferHandle {
            index,
            generation: slot.generation,
        };
        self.counters.live_bytes += capacity;
        self.counters.peak_bytes = self.counters.peak_bytes.max(self.counters.live_bytes);
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEvent::Alloc { id: trace_id, bytes });
        }
        Ok(handle)
    }

    fn pop_free(&mut self, bytes: usize) -> Option<u32> {
        let cap = *self.free_lists.range(bytes..=bytes.saturating_mul(2)).next()?.0;
        let list = self.free_lists.get_mut(&cap)?;
        let index = list.pop();
        if list.is_empty() {
            self.free_lists.remove(&cap);
        }
        index
    }

    fn slot(&self, h: BufferHandle) -> Result<&Slot> {
        match self.slots.get(h.index as usize) {
            Some(s) if s.live && s.generation == h.generation => Ok(s),
            _ => Err(Error::Allocator(format!("handle {h:?} is not live"))),
        }
    }

    fn slot_mut(&mut self, h: BufferHandle) -> Result<&mut Slot> {
        match self.slots.get_mut(h.index as usize) {
            Some(s) if s.live && s.generation == h.generation => Ok(s),
            _ => Err(Error::Allocator(format!("handle {h:?} is not live"))),
        }
    }

    pub fn free(&mut self, h: BufferHandle) -> Result<()> {
        let policy = self.policy;
        let slot = self
            .slot_mut(h)
            .map_err(|_| Error::Allocator(format!("double free or stale handle {h:?}")))?;
        if slot.taken {
            return Err(Error::Allocator(format!("freeing checked-out buffer {h:?}")));
        }
        slot.live = false;
        let capacity = slot.capacity;
        let trace_id = slot.trace_id;
        if policy == ReusePolicy::NoReuse {
            slot.storage = Vec::new();
        }
        self.counters.live_bytes -= capacity as u64;
        if self.policy == ReusePolicy::BestFitCapped {
            let list = self.free_lists.entry(capacity).or_default();
            debug_assert!(!list.contains(&h.index), "buffer both live and free");
            list.push(h.index);
        }
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEvent::Free { id: trace_id });
        }
        Ok(())
    }

    pub fn capacity(&self, h: BufferHandle) -> Result<usize> {
        Ok(self.slot(h)?.capacity)
    }

    /// Typed view of the first `len` elements of a live buffer.
    pub fn view<T: Pod>(&self, h: BufferHandle, len: usize) -> Result<&[T]> {
        let slot = self.slot(h)?;
        if slot.taken {
            return Err(Error::Allocator(format!("buffer {h:?} is checked out")));
        }
        typed(&slot.storage, len, slot.capacity)
    }

    pub fn view_mut<T: Pod>(&mut self, h: BufferHandle, len: usize) -> Result<&mut [T]> {
        let slot = self.slot_mut(h)?;
        if slot.taken {
            return Err(Error::Allocator(format!("buffer {h:?} is checked out")));
        }
        let capacity = slot.capacity;
        typed_mut(&mut slot.storage, len, capacity)
    }

    /// Moves a buffer's storage out so that it can be written while other
    /// buffers of the arena are read. Must be returned with [`Arena::restore`].
    pub fn checkout(&mut self, h: BufferHandle) -> Result<CheckedOut> {
        let slot = self.slot_mut(h)?;
        if slot.taken {
            return Err(Error::Allocator(format!("buffer {h:?} already checked out")));
        }
        slot.taken = true;
        Ok(CheckedOut {
            handle: h,
            capacity: slot.capacity,
            storage: std::mem::take(&mut slot.storage),
        })
    }

    pub fn restore(&mut self, buf: CheckedOut) -> Result<()> {
        let slot = self.slot_mut(buf.handle)?;
        if !slot.taken {
            return Err(Error::Allocator("restoring a buffer that was not checked out".into()));
        }
        slot.taken = false;
        slot.storage = buf.storage;
        Ok(())
    }
}

/// Storage temporarily moved out of the arena.
#[derive(Debug)]
pub struct CheckedOut {
    handle: BufferHandle,
    capacity: usize,
    storage: Vec<u64>,
}

impl CheckedOut {
    pub fn handle(&self) -> BufferHandle {
        self.handle
    }

    pub fn as_mut<T: Pod>(&mut self, len: usize) -> Result<&mut [T]> {
        typed_mut(&mut self.storage, len, self.capacity)
    }
}

fn typed<T: Pod>(words: &[u64], len: usize, capacity: usize) -> Result<&[T]> {
    if len * std::mem::size_of::<T>() > capacity {
        return Err(Error::Allocator(format!(
            "view of {len} elements exceeds capacity {capacity}"
        )));
    }
    Ok(&bytemuck::cast_slice::<u64, T>(words)[..len])
}

fn typed_mut<T: Pod>(words: &mut [u64], len: usize, capacity: usize) -> Result<&mut [T]> {
    if len * std::mem::size_of::<T>() > capacity {
        return Err(Error::Allocator(format!(
            "view of {len} elements exceeds capacity {capacity}"
        )));
    }
    Ok(&mut bytemuck::cast_slice_mut::<u64, T>(words)[..len])
}

/// Replays a recorded trace against a fresh arena with `policy`.
pub fn replay(trace: &[TraceEvent], policy: ReusePolicy) -> Result<ArenaCounters> {
    let mut arena = Arena::with_policy(policy);
    let mut handles = std::collections::HashMap::new();
    for event in trace {
        match *event {
            TraceEvent::Alloc { id, bytes } => {
                handles.insert(id, arena.alloc(bytes)?);
            }
            TraceEvent::Free { id } => {
                let h = handles
                    .remove(&id)
                    .ok_or_else(|| Error::Allocator(format!("trace frees unknown buffer {id}")))?;
                arena.free(h)?;
            }
        }
    }
    Ok(arena.counters())
}
