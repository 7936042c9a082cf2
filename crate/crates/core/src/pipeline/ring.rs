//! Bounded ring of batch slots over one preallocated arena.
//!
//! Slot lifecycle: `Free -> Filling -> Ready -> Consuming -> Free`. Producers
//! and the consumer each walk the slots in cyclic order, so batches are
//! delivered in the order they were begun. Positions inside a `Filling` slot
//! are claimed through a packed `(generation, next)` word; the last position
//! to finish publishes the slot.

use std::ptr::NonNull;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::Instant;

use serde::Serialize;

use super::{ElemType, PipelinePlan, SampleContext, Shape, TensorRef, TransformError, Value};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SlotState {
    Free,
    Filling,
    Ready,
    Consuming,
}

/// Slot bookkeeping without any synchronization. `BatchRing` wraps it in a
/// mutex; tests drive it directly to enumerate interleavings.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RingState {
    states: Vec<SlotState>,
    produce: usize,
    consume: usize,
}

impl RingState {
    pub fn new(slots: usize) -> Self {
        assert!(slots >= 1);
        Self {
            states: vec![SlotState::Free; slots],
            produce: 0,
            consume: 0,
        }
    }

    pub fn slots(&self) -> usize {
        self.states.len()
    }

    pub fn state(&self, slot: usize) -> SlotState {
        self.states[slot]
    }

    pub fn try_begin_fill(&mut self) -> Option<usize> {
        let s = self.produce;
        if self.states[s] != SlotState::Free {
            return None;
        }
        self.states[s] = SlotState::Filling;
        self.produce = (s + 1) % self.states.len();
        Some(s)
    }

    pub fn publish(&mut self, slot: usize) {
        assert_eq!(self.states[slot], SlotState::Filling, "publish of slot {slot}");
        self.states[slot] = SlotState::Ready;
    }

    pub fn try_begin_consume(&mut self) -> Option<usize> {
        let s = self.consume;
        if self.states[s] != SlotState::Ready {
            return None;
        }
        self.states[s] = SlotState::Consuming;
        self.consume = (s + 1) % self.states.len();
        Some(s)
    }

    pub fn release(&mut self, slot: usize) {
        assert_eq!(self.states[slot], SlotState::Consuming, "release of slot {slot}");
        self.states[slot] = SlotState::Free;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum RingError {
    #[error("ring shut down")]
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleFailure {
    pub position: usize,
    pub index: u64,
    pub message: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RingStats {
    pub batches_published: u64,
    pub producer_waits: u64,
    pub producer_wait_ns: u64,
    pub consumer_waits: u64,
    pub consumer_wait_ns: u64,
}

/// Word-aligned byte buffer handed out as disjoint raw slices.
struct Arena {
    base: NonNull<u64>,
    words: usize,
    bytes: usize,
}

// The arena is only reached through leases, which partition it.
unsafe impl Send for Arena {}
unsafe impl Sync for Arena {}

impl Arena {
    fn new(bytes: usize) -> Self {
        let words = bytes.div_ceil(8);
        let boxed: Box<[u64]> = vec![0u64; words].into_boxed_slice();
        let base = NonNull::new(Box::into_raw(boxed) as *mut u64).expect("non-null box");
        Self { base, words, bytes }
    }

    /// # Safety
    /// No live `&mut` may overlap `range`.
    unsafe fn slice(&self, range: std::ops::Range<usize>) -> &[u8] {
        assert!(range.start <= range.end && range.end <= self.bytes);
        std::slice::from_raw_parts((self.base.as_ptr() as *const u8).add(range.start), range.len())
    }

    /// # Safety
    /// No other live reference may overlap `range`.
    #[allow(clippy::mut_from_ref)]
    unsafe fn slice_mut(&self, range: std::ops::Range<usize>) -> &mut [u8] {
        assert!(range.start <= range.end && range.end <= self.bytes);
        std::slice::from_raw_parts_mut((self.base.as_ptr() as *mut u8).add(range.start), range.len())
    }
}

impl Drop for Arena {
    fn drop(&mut self) {
        unsafe {
            drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(self.base.as_ptr(), self.words)));
        }
    }
}

struct SlotMeta {
    /// `generation << 32 | next unclaimed position`.
    claim: AtomicU64,
    len: AtomicUsize,
    done: AtomicUsize,
    batch: AtomicU64,
    indices: Box<[AtomicU64]>,
    labels: Box<[AtomicI64]>,
    shapes: Box<[AtomicU64]>,
    /// Per-sample generator state where the leading stage left it.
    rng_states: Box<[AtomicU64]>,
    failed: AtomicBool,
    failure: Mutex<Option<SampleFailure>>,
}

impl SlotMeta {
    fn new(batch_size: usize) -> Self {
        let atoms = |n| (0..n).map(|_| AtomicU64::new(0)).collect::<Box<[_]>>();
        Self {
            claim: AtomicU64::new(0),
            len: AtomicUsize::new(0),
            done: AtomicUsize::new(0),
            batch: AtomicU64::new(0),
            indices: atoms(batch_size),
            labels: (0..batch_size).map(|_| AtomicI64::new(0)).collect(),
            shapes: atoms(batch_size),
            rng_states: atoms(batch_size),
            failed: AtomicBool::new(false),
            failure: Mutex::new(None),
        }
    }
}

struct Shared {
    ring: RingState,
    shutdown: bool,
    stats: RingStats,
}

pub struct BatchRing {
    plan: PipelinePlan,
    arena: Arena,
    slots: Box<[SlotMeta]>,
    shared: Mutex<Shared>,
    space: Condvar,
    ready: Condvar,
}

impl std::fmt::Debug for BatchRing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchRing")
            .field("slots", &self.plan.layout.slot_count)
            .field("arena_bytes", &self.arena.bytes)
            .finish_non_exhaustive()
    }
}

/// Permission to claim positions of one slot fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FillTicket {
    pub slot: usize,
    pub generation: u32,
    pub batch: u64,
    pub len: usize,
}

fn lock(m: &Mutex<Shared>) -> MutexGuard<'_, Shared> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl BatchRing {
    pub fn new(plan: PipelinePlan) -> Self {
        let layout = &plan.layout;
        let arena = Arena::new(layout.arena_bytes());
        let slots = (0..layout.slot_count).map(|_| SlotMeta::new(layout.batch_size)).collect();
        Self {
            shared: Mutex::new(Shared {
                ring: RingState::new(layout.slot_count),
                shutdown: false,
                stats: RingStats::default(),
            }),
            plan,
            arena,
            slots,
            space: Condvar::new(),
            ready: Condvar::new(),
        }
    }

    pub fn plan(&self) -> &PipelinePlan {
        &self.plan
    }

    pub fn arena_bytes(&self) -> usize {
        self.arena.bytes
    }

    pub fn stats(&self) -> RingStats {
        lock(&self.shared).stats
    }

    pub fn is_shutdown(&self) -> bool {
        lock(&self.shared).shutdown
    }

    /// Wakes every waiter; later waits fail with `Shutdown`.
    pub fn shutdown(&self) {
        lock(&self.shared).shutdown = true;
        self.space.notify_all();
        self.ready.notify_all();
    }

    /// Returns every slot to `Free` and clears shutdown. No lease may be alive.
    pub fn reset(&self) {
        let mut g = lock(&self.shared);
        g.ring = RingState::new(self.plan.layout.slot_count);
        g.shutdown = false;
    }

    /// Waits for the next slot in order to be free and opens it for `len` positions.
    pub fn begin_fill(&self, batch: u64, len: usize) -> Result<FillTicket, RingError> {
        assert!(len >= 1 && len <= self.plan.layout.batch_size, "batch length {len}");
        let mut g = lock(&self.shared);
        let mut waited: Option<Instant> = None;
        let slot = loop {
            if g.shutdown {
                return Err(RingError::Shutdown);
            }
            if let Some(s) = g.ring.try_begin_fill() {
                break s;
            }
            waited.get_or_insert_with(Instant::now);
            g = self.space.wait(g).unwrap_or_else(|e| e.into_inner());
        };
        if let Some(t) = waited {
            g.stats.producer_waits += 1;
            g.stats.producer_wait_ns += t.elapsed().as_nanos() as u64;
        }
        drop(g);

        let meta = &self.slots[slot];
        meta.len.store(len, Ordering::Relaxed);
        meta.done.store(0, Ordering::Relaxed);
        meta.batch.store(batch, Ordering::Relaxed);
        if meta.failed.swap(false, Ordering::Relaxed) {
            *meta.failure.lock().unwrap_or_else(|e| e.into_inner()) = None;
        }
        let generation = (meta.claim.load(Ordering::Relaxed) >> 32) as u32;
        let generation = generation.wrapping_add(1);
        meta.claim.store((generation as u64) << 32, Ordering::Release);
        Ok(FillTicket {
            slot,
            generation,
            batch,
            len,
        })
    }

    /// Next unclaimed position of the fill, or `None` once all are taken.
    pub fn claim(&self, ticket: &FillTicket) -> Option<PositionLease<'_>> {
        let meta = &self.slots[ticket.slot];
        let mut word = meta.claim.load(Ordering::Acquire);
        loop {
            let (generation, next) = ((word >> 32) as u32, (word & 0xffff_ffff) as usize);
            if generation != ticket.generation || next >= ticket.len {
                return None;
            }
            match meta
                .claim
                .compare_exchange_weak(word, word + 1, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => {
                    return Some(PositionLease {
                        ring: self,
                        slot: ticket.slot,
                        position: next,
                        finished: false,
                    })
                }
                Err(w) => word = w,
            }
        }
    }

    /// Waits for the next batch in order.
    pub fn next_ready(&self) -> Result<ConsumeLease<'_>, RingError> {
        let mut g = lock(&self.shared);
        let mut waited: Option<Instant> = None;
        let slot = loop {
            if g.shutdown {
                return Err(RingError::Shutdown);
            }
            if let Some(s) = g.ring.try_begin_consume() {
                break s;
            }
            waited.get_or_insert_with(Instant::now);
            g = self.ready.wait(g).unwrap_or_else(|e| e.into_inner());
        };
        if let Some(t) = waited {
            g.stats.consumer_waits += 1;
            g.stats.consumer_wait_ns += t.elapsed().as_nanos() as u64;
        }
        Ok(ConsumeLease { ring: self, slot })
    }

    fn position_done(&self, slot: usize) {
        let meta = &self.slots[slot];
        let len = meta.len.load(Ordering::Relaxed);
        if meta.done.fetch_add(1, Ordering::AcqRel) + 1 == len {
            let mut g = lock(&self.shared);
            g.ring.publish(slot);
            g.stats.batches_published += 1;
            drop(g);
            self.ready.notify_all();
        }
    }

    fn record_failure(&self, slot: usize, position: usize, message: impl FnOnce() -> String) {
        let meta = &self.slots[slot];
        let mut f = meta.failure.lock().unwrap_or_else(|e| e.into_inner());
        if f.is_none() {
            *f = Some(SampleFailure {
                position,
                index: meta.indices[position].load(Ordering::Relaxed),
                message: message(),
            });
        }
        meta.failed.store(true, Ordering::Release);
    }
}

/// Exclusive right to one position of a filling slot. Dropping it marks the
/// position done; one dropped before `complete` counts as a failure.
pub struct PositionLease<'a> {
    ring: &'a BatchRing,
    slot: usize,
    position: usize,
    finished: bool,
}

impl PositionLease<'_> {
    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn batch(&self) -> u64 {
        self.ring.slots[self.slot].batch.load(Ordering::Relaxed)
    }

    pub fn set_sample(&mut self, index: u64, label: i64) {
        let meta = &self.ring.slots[self.slot];
        meta.indices[self.position].store(index, Ordering::Relaxed);
        meta.labels[self.position].store(label, Ordering::Relaxed);
    }

    /// Runs the leading fusible stage into this position's regions.
    pub fn run(&mut self, input: Value<'_>, ctx: SampleContext) -> Result<Shape, TransformError> {
        let plan = &self.ring.plan;
        let layout = &plan.layout;
        let mut shape = Shape::new(0, 0, 0);
        let mut rng = ctx.rng();
        for t in 0..plan.fused_end {
            let out_range = layout.region(self.slot, t, self.position);
            // SAFETY: this lease is the only holder of its position while the
            // slot is Filling, and regions of distinct transforms are disjoint.
            let out = unsafe { self.ring.arena.slice_mut(out_range) };
            let value = if t == 0 {
                input
            } else {
                let elem = plan.specs[t - 1].elem;
                let r = layout.region(self.slot, t - 1, self.position);
                let r = r.start..r.start + shape.elements() * elem.size();
                Value::Tensor(TensorRef {
                    shape,
                    elem,
                    bytes: unsafe { self.ring.arena.slice(r) },
                })
            };
            shape = plan.transforms[t].apply(value, out, &mut rng)?;
        }
        let meta = &self.ring.slots[self.slot];
        meta.shapes[self.position].store(shape.pack(), Ordering::Relaxed);
        meta.rng_states[self.position].store(rng.state(), Ordering::Relaxed);
        Ok(shape)
    }

    pub fn complete(mut self) {
        self.finished = true;
    }

    pub fn fail(mut self, message: impl FnOnce() -> String) {
        self.ring.record_failure(self.slot, self.position, message);
        self.finished = true;
    }
}

impl Drop for PositionLease<'_> {
    fn drop(&mut self) {
        if !self.finished {
            self.ring
                .record_failure(self.slot, self.position, || "sample abandoned".to_string());
        }
        self.ring.position_done(self.slot);
    }
}

/// Exclusive access to a `Ready` slot. Dropping it frees the slot.
pub struct ConsumeLease<'a> {
    ring: &'a BatchRing,
    slot: usize,
}

impl<'a> ConsumeLease<'a> {
    fn meta(&self) -> &'a SlotMeta {
        &self.ring.slots[self.slot]
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn batch(&self) -> u64 {
        self.meta().batch.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.meta().len.load(Ordering::Relaxed)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, position: usize) -> u64 {
        self.meta().indices[position].load(Ordering::Relaxed)
    }

    pub fn label(&self, position: usize) -> i64 {
        self.meta().labels[position].load(Ordering::Relaxed)
    }

    pub fn shape(&self, position: usize) -> Shape {
        Shape::unpack(self.meta().shapes[position].load(Ordering::Relaxed))
    }

    pub fn failure(&self) -> Option<SampleFailure> {
        if !self.meta().failed.load(Ordering::Acquire) {
            return None;
        }
        self.meta().failure.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Runs every transform after the leading fusible stage, one position at a time.
    pub fn run_rest(&mut self) -> Result<(), SampleFailure> {
        if let Some(f) = self.failure() {
            return Err(f);
        }
        let plan = &self.ring.plan;
        let layout = &plan.layout;
        for position in 0..self.len() {
            let mut shape = self.shape(position);
            let index = self.index(position);
            let mut rng = SplitMix64::new(self.meta().rng_states[position].load(Ordering::Relaxed));
            for t in plan.fused_end..plan.transforms.len() {
                let elem = plan.specs[t - 1].elem;
                let r = layout.region(self.slot, t - 1, position);
                // SAFETY: the slot is Consuming and this lease is its only holder.
                let bytes = unsafe { self.ring.arena.slice(r.start..r.start + shape.elements() * elem.size()) };
                let out = unsafe { self.ring.arena.slice_mut(layout.region(self.slot, t, position)) };
                shape = plan.transforms[t]
                    .apply(Value::Tensor(TensorRef { shape, elem, bytes }), out, &mut rng)
                    .map_err(|e| SampleFailure {
                        position,
                        index,
                        message: e.0,
                    })?;
            }
            self.meta().shapes[position].store(shape.pack(), Ordering::Relaxed);
        }
        Ok(())
    }

    pub fn output_elem(&self) -> ElemType {
        self.ring.plan.output_spec().elem
    }

    /// Final output of one position, trimmed to its actual shape.
    pub fn output(&self, position: usize) -> TensorRef<'_> {
        assert!(position < self.len());
        let shape = self.shape(position);
        let elem = self.output_elem();
        let r = self.ring.plan.layout.region(self.slot, self.ring.plan.transforms.len() - 1, position);
        TensorRef {
            shape,
            elem,
            bytes: unsafe { self.ring.arena.slice(r.start..r.start + shape.elements() * elem.size()) },
        }
    }

    /// Final outputs of all positions back to back, each padded to the planned maximum.
    pub fn output_bytes(&self) -> &[u8] {
        let layout = &self.ring.plan.layout;
        let last = self.ring.plan.transforms.len() - 1;
        let start = layout.region(self.slot, last, 0).start;
        unsafe { self.ring.arena.slice(start..start + layout.lens[last] * self.len()) }
    }
}

impl Drop for ConsumeLease<'_> {
    fn drop(&mut self) {
        let mut g = lock(&self.ring.shared);
        g.ring.release(self.slot);
        drop(g);
        self.ring.space.notify_all();
    }
}
