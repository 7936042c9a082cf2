//! Epoch orchestration: order, cache plan, worker pool and batch stream.
//!
//! Workers share one open batch at a time. Each claims the next free
//! position of that batch, reads the sample, and runs the leading fusible
//! stage straight into the slot's arena region. The consumer takes batches
//! in order, runs any opaque stages, and hands out a [`BatchView`] that
//! borrows the slot until the next request.

use std::marker::PhantomData;
use std::panic::AssertUnwindSafe;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Instant;

use serde::Serialize;

use crate::codecs::BlobView;
use crate::format::{Cell, FieldType};
use crate::memory::MemoryTracker;
use crate::pipeline::{
    plan, BatchRing, ConsumeLease, ElemType, FillTicket, InputSpec, PipelinePlan, PositionLease, SampleContext,
    Shape, TensorRef, Transform, Value,
};
use crate::reader::{CacheSession, Dataset};
use crate::traversal::{OrderKind, TraversalOrder};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub num_workers: usize,
    /// `None` picks [`default_slot_count`].
    pub slot_count: Option<usize>,
    pub order: TraversalOrder,
    pub pipeline: Vec<Arc<dyn Transform>>,
    pub image_field: String,
    /// Integer or float scalar copied into each batch position.
    pub label_field: Option<String>,
    pub drop_last: bool,
}

impl LoaderConfig {
    pub fn new(batch_size: usize, num_workers: usize, order: TraversalOrder, pipeline: Vec<Arc<dyn Transform>>) -> Self {
        Self {
            batch_size,
            num_workers,
            slot_count: None,
            order,
            pipeline,
            image_field: "image".into(),
            label_field: Some("label".into()),
            drop_last: false,
        }
    }

    pub fn slots(&self) -> usize {
        self.slot_count
            .unwrap_or_else(|| default_slot_count(self.num_workers, self.batch_size))
    }
}

/// `2 * ceil(workers / fill_parallelism)`, at least 3, where fill
/// parallelism is how many workers can share one batch.
pub fn default_slot_count(num_workers: usize, batch_size: usize) -> usize {
    let parallel = num_workers.min(batch_size).max(1);
    (2 * num_workers.div_ceil(parallel)).max(3)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EpochStats {
    pub epoch: u64,
    pub batches: u64,
    pub samples: u64,
    pub page_fetches: u64,
    pub page_reloads: u64,
    pub blob_reads: u64,
    pub producer_blocked_ns: u64,
    pub consumer_blocked_ns: u64,
    pub wall_ns: u64,
}

pub struct Loader {
    dataset: Option<Arc<Dataset>>,
    config: LoaderConfig,
    ring: Arc<BatchRing>,
    image_field: usize,
    label_field: Option<usize>,
    page_map: Vec<u64>,
    memory: MemoryTracker,
}

impl std::fmt::Debug for Loader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Loader")
            .field("batch_size", &self.config.batch_size)
            .field("num_workers", &self.config.num_workers)
            .field("ring", &self.ring)
            .finish_non_exhaustive()
    }
}

impl Loader {
    pub fn new(dataset: Arc<Dataset>, config: LoaderConfig) -> Result<Self> {
        Self::with_memory(dataset, config, MemoryTracker::new())
    }

    /// Like `new`, recording every buffer the loader owns in `memory`.
    pub fn with_memory(dataset: Arc<Dataset>, config: LoaderConfig, memory: MemoryTracker) -> Result<Self> {
        if config.batch_size == 0 || config.num_workers == 0 {
            return Err(Error::Config("batch_size and num_workers must be >= 1".into()));
        }
        let slots = config.slots();
        if slots < 2 {
            return Err(Error::Config("slot_count must be >= 2".into()));
        }
        let header = dataset.header();
        let image_field = header
            .field_index(&config.image_field)
            .ok_or_else(|| Error::Config(format!("no field named {:?}", config.image_field)))?;
        let FieldType::Image {
            max_height,
            max_width,
            channels,
        } = header.fields[image_field].ty
        else {
            return Err(Error::Config(format!("field {:?} is not an image", config.image_field)));
        };
        let label_field = match &config.label_field {
            None => None,
            Some(name) => {
                let f = header
                    .field_index(name)
                    .ok_or_else(|| Error::Config(format!("no field named {name:?}")))?;
                if !matches!(header.fields[f].ty, FieldType::IntScalar | FieldType::FloatScalar) {
                    return Err(Error::Config(format!("label field {name:?} is not a scalar")));
                }
                Some(f)
            }
        };
        let input = InputSpec::Encoded {
            max_height,
            max_width,
            channels,
        };
        let plan = plan(config.pipeline.clone(), input, config.batch_size, slots)?;
        let page_map = if config.order.kind == OrderKind::QuasiRandom {
            dataset.page_map()?
        } else {
            Vec::new()
        };
        let ring = Arc::new(BatchRing::new(plan));
        memory.record_alloc(ring.arena_bytes());
        Ok(Self {
            dataset: Some(dataset),
            config,
            ring,
            image_field,
            label_field,
            page_map,
            memory,
        })
    }

    pub fn config(&self) -> &LoaderConfig {
        &self.config
    }

    pub fn plan(&self) -> &PipelinePlan {
        self.ring.plan()
    }

    pub fn memory(&self) -> &MemoryTracker {
        &self.memory
    }

    pub fn slot_bytes(&self) -> usize {
        self.ring.plan().layout.slot_bytes
    }

    pub fn dataset(&self) -> Option<&Arc<Dataset>> {
        self.dataset.as_ref()
    }

    pub fn is_shut_down(&self) -> bool {
        self.dataset.is_none()
    }

    /// Releases the dataset handle. Idempotent; later epochs fail with `Shutdown`.
    pub fn shutdown(&mut self) {
        self.dataset = None;
    }

    /// Sample indices of `epoch`, after `drop_last`.
    pub fn epoch_order(&self, epoch: u64) -> Result<Vec<usize>> {
        let ds = self.dataset.as_ref().ok_or(Error::Shutdown)?;
        let n = ds.num_samples();
        let mut indices = self
            .config
            .order
            .next_epoch(epoch, n, &self.page_map, self.config.batch_size)
            .indices;
        if self.config.drop_last {
            indices.truncate(n / self.config.batch_size * self.config.batch_size);
        }
        Ok(indices)
    }

    /// Starts `epoch`. Threads run until the epoch is drained, shut down or dropped.
    pub fn epoch(&mut self, epoch: u64) -> Result<Epoch<'_>> {
        let ds = self.dataset.clone().ok_or(Error::Shutdown)?;
        let indices = self.epoch_order(epoch)?;
        let session = match ds.strategy() {
            crate::reader::ReadStrategy::ProcessCache { .. } => Some(ds.session(&indices)?),
            _ => None,
        };
        let session_bytes = session.as_ref().map_or(0, |s| s.buffer_bytes());
        self.memory.record_alloc(session_bytes);
        let batch_size = self.config.batch_size;
        let shared = Arc::new(EpochShared {
            num_batches: indices.len().div_ceil(batch_size),
            io_base: ds.io_stats(),
            ds,
            ring: self.ring.clone(),
            indices,
            batch_size,
            session,
            coord: Mutex::new(Coord {
                ticket: None,
                next_batch: 0,
            }),
            image_field: self.image_field,
            label_field: self.label_field,
            seed: self.config.order.seed,
            epoch,
            stop: AtomicBool::new(false),
            memory: self.memory.clone(),
        });
        let ring_base = self.ring.stats();
        let prefetch = shared.session.as_ref().map(|_| {
            let sh = shared.clone();
            std::thread::spawn(move || sh.session.as_ref().expect("session").run_prefetch())
        });
        let workers = (0..self.config.num_workers)
            .map(|_| {
                let sh = shared.clone();
                // Allocated here, not in the thread, which may start after the first batch.
                let scratch = vec![0u8; sh.ds.blob_scratch_len()];
                sh.memory.record_alloc(scratch.capacity());
                std::thread::spawn(move || worker(&sh, scratch))
            })
            .collect();
        Ok(Epoch {
            ring: &self.ring,
            shared,
            workers,
            prefetch,
            delivered: 0,
            samples: 0,
            started: Instant::now(),
            ring_base,
            session_bytes,
            final_stats: None,
            error: None,
        })
    }

    /// Drains one epoch through `f`.
    pub fn run_epoch(&mut self, epoch: u64, mut f: impl FnMut(&BatchView<'_>) -> Result<()>) -> Result<EpochStats> {
        let mut e = self.epoch(epoch)?;
        while let Some(batch) = e.next_batch() {
            f(&batch?)?;
        }
        e.finish()
    }
}

impl Drop for Loader {
    fn drop(&mut self) {
        self.memory.record_free(self.ring.arena_bytes());
    }
}

struct Coord {
    ticket: Option<FillTicket>,
    next_batch: usize,
}

struct EpochShared {
    ds: Arc<Dataset>,
    ring: Arc<BatchRing>,
    indices: Vec<usize>,
    batch_size: usize,
    num_batches: usize,
    session: Option<CacheSession>,
    coord: Mutex<Coord>,
    image_field: usize,
    label_field: Option<usize>,
    seed: u64,
    epoch: u64,
    stop: AtomicBool,
    memory: MemoryTracker,
    io_base: crate::reader::IoStats,
}

impl EpochShared {
    /// The open fill if it differs from `seen`, else opens the next batch.
    fn next_ticket(&self, seen: Option<FillTicket>) -> Option<FillTicket> {
        let mut c = self.coord.lock().unwrap_or_else(|e| e.into_inner());
        if c.ticket.is_some() && c.ticket != seen {
            return c.ticket;
        }
        if c.next_batch >= self.num_batches || self.stop.load(Ordering::Acquire) {
            return None;
        }
        let b = c.next_batch;
        let len = self.batch_size.min(self.indices.len() - b * self.batch_size);
        let t = self.ring.begin_fill(b as u64, len).ok()?;
        c.ticket = Some(t);
        c.next_batch += 1;
        Some(t)
    }

    fn fill_position(&self, lease: &mut PositionLease<'_>, scratch: &mut Vec<u8>) -> Result<()> {
        let step = lease.batch() as usize * self.batch_size + lease.position();
        let index = self.indices[step];
        let _step = self.session.as_ref().map(|s| s.step_guard(step));
        let label = match self.label_field.map(|f| self.ds.cell(index, f)).transpose()? {
            Some(Cell::Int(v)) => v,
            Some(Cell::Float(v)) => v as i64,
            _ => 0,
        };
        lease.set_sample(index as u64, label);
        let Cell::Image(c) = self.ds.cell(index, self.image_field)? else {
            return Err(Error::InvalidFile(format!("row {index}: image cell expected")));
        };
        let before = scratch.capacity();
        let payload: &[u8] = match self.ds.heap_ref(index, self.image_field)? {
            Some((offset, len)) => self.ds.read_blob(self.session.as_ref(), step, offset, len, scratch)?,
            None => &[],
        };
        let view = BlobView {
            height: c.height,
            width: c.width,
            channels: c.channels,
            codec: c.codec,
            payload,
        };
        let ctx = SampleContext {
            seed: self.seed,
            epoch: self.epoch,
            index: index as u64,
        };
        let result = lease.run(Value::Encoded(view), ctx);
        if scratch.capacity() > before {
            self.memory.record_alloc(scratch.capacity() - before);
        }
        result.map(|_| ()).map_err(|e| Error::SampleFailed {
            index: index as u64,
            position: lease.position(),
            message: e.0,
        })
    }
}

fn worker(sh: &EpochShared, mut scratch: Vec<u8>) {
    let mut ticket: Option<FillTicket> = None;
    while !sh.stop.load(Ordering::Acquire) {
        let Some(mut lease) = ticket.as_ref().and_then(|t| sh.ring.claim(t)) else {
            match sh.next_ticket(ticket) {
                Some(t) => {
                    ticket = Some(t);
                    continue;
                }
                None => break,
            }
        };
        let r = std::panic::catch_unwind(AssertUnwindSafe(|| sh.fill_position(&mut lease, &mut scratch)));
        match r {
            Ok(Ok(())) => lease.complete(),
            Ok(Err(e)) => lease.fail(|| e.to_string()),
            Err(_) => lease.fail(|| "transform panicked".to_string()),
        }
    }
    sh.memory.record_free(scratch.capacity());
}

/// A running epoch. Dropping it stops and joins every thread.
pub struct Epoch<'l> {
    ring: &'l BatchRing,
    shared: Arc<EpochShared>,
    workers: Vec<JoinHandle<()>>,
    prefetch: Option<JoinHandle<Result<()>>>,
    delivered: usize,
    samples: u64,
    started: Instant,
    ring_base: crate::pipeline::RingStats,
    session_bytes: usize,
    final_stats: Option<EpochStats>,
    error: Option<Error>,
}

impl<'l> Epoch<'l> {
    pub fn num_batches(&self) -> usize {
        self.shared.num_batches
    }

    pub fn order(&self) -> &[usize] {
        &self.shared.indices
    }

    /// Next batch in order, `None` once the epoch is drained or stopped.
    #[allow(clippy::should_implement_trait)]
    pub fn next_batch(&mut self) -> Option<Result<BatchView<'_>>> {
        if self.final_stats.is_some() {
            return None;
        }
        if self.delivered == self.shared.num_batches {
            if let Err(e) = self.complete() {
                return Some(Err(e));
            }
            return None;
        }
        let ring: &'l BatchRing = self.ring;
        let mut lease = match ring.next_ready() {
            Ok(l) => l,
            Err(_) => {
                self.stop();
                return Some(Err(Error::Shutdown));
            }
        };
        debug_assert_eq!(lease.batch(), self.delivered as u64);
        if let Err(f) = lease.run_rest() {
            drop(lease);
            self.stop();
            return Some(Err(Error::SampleFailed {
                index: f.index,
                position: f.position,
                message: f.message,
            }));
        }
        self.delivered += 1;
        self.samples += lease.len() as u64;
        Some(Ok(BatchView {
            lease,
            _not_send: PhantomData,
        }))
    }

    /// Counters so far, or the final ones once the epoch has ended.
    pub fn stats(&self) -> EpochStats {
        if let Some(s) = self.final_stats {
            return s;
        }
        let ring = self.ring.stats();
        let cache = self.shared.session.as_ref().map(|s| s.stats()).unwrap_or_default();
        let io = self.shared.ds.io_stats();
        EpochStats {
            epoch: self.shared.epoch,
            batches: self.delivered as u64,
            samples: self.samples,
            page_fetches: cache.fetch_count,
            page_reloads: cache.reload_count,
            blob_reads: io.blob_reads - self.shared.io_base.blob_reads,
            producer_blocked_ns: ring.producer_wait_ns - self.ring_base.producer_wait_ns,
            consumer_blocked_ns: ring.consumer_wait_ns - self.ring_base.consumer_wait_ns,
            wall_ns: self.started.elapsed().as_nanos() as u64,
        }
    }

    fn join(&mut self) {
        for h in self.workers.drain(..) {
            let _ = h.join();
        }
        if let Some(h) = self.prefetch.take() {
            match h.join() {
                Ok(Err(e)) => self.error = self.error.take().or(Some(e)),
                Err(_) => self.error = self.error.take().or(Some(Error::Config("prefetch thread panicked".into()))),
                Ok(Ok(())) => {}
            }
        }
        self.final_stats = Some(self.stats());
        self.ring.reset();
        self.shared.memory.record_free(self.session_bytes);
    }

    fn complete(&mut self) -> Result<()> {
        self.join();
        self.error.take().map_or(Ok(()), Err)
    }

    /// Stops workers and prefetching mid-epoch. Idempotent.
    pub fn stop(&mut self) {
        if self.final_stats.is_some() {
            return;
        }
        self.shared.stop.store(true, Ordering::Release);
        if let Some(s) = &self.shared.session {
            s.stop();
        }
        self.ring.shutdown();
        self.join();
    }

    /// Drains the remaining batches and returns the final counters.
    pub fn finish(mut self) -> Result<EpochStats> {
        while let Some(b) = self.next_batch() {
            b?;
        }
        Ok(self.stats())
    }
}

impl Drop for Epoch<'_> {
    fn drop(&mut self) {
        self.stop();
    }
}

/// One delivered batch. Valid until the next `next_batch` call; not `Send`.
pub struct BatchView<'a> {
    lease: ConsumeLease<'a>,
    _not_send: PhantomData<*const ()>,
}

impl BatchView<'_> {
    pub fn batch_index(&self) -> u64 {
        self.lease.batch()
    }

    pub fn len(&self) -> usize {
        self.lease.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lease.is_empty()
    }

    pub fn index(&self, position: usize) -> u64 {
        self.lease.index(position)
    }

    pub fn indices(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.len()).map(|p| self.lease.index(p))
    }

    pub fn label(&self, position: usize) -> i64 {
        self.lease.label(position)
    }

    pub fn labels(&self) -> impl Iterator<Item = i64> + '_ {
        (0..self.len()).map(|p| self.lease.label(p))
    }

    pub fn shape(&self, position: usize) -> Shape {
        self.lease.shape(position)
    }

    pub fn elem(&self) -> ElemType {
        self.lease.output_elem()
    }

    pub fn sample(&self, position: usize) -> TensorRef<'_> {
        self.lease.output(position)
    }

    /// All outputs back to back, each padded to the planned maximum size.
    /// Padding bytes past a sample's own shape are unspecified.
    pub fn data(&self) -> &[u8] {
        self.lease.output_bytes()
    }

    /// `data()` as `f32` when the pipeline ends in a float tensor.
    pub fn as_f32(&self) -> Option<&[f32]> {
        match self.elem() {
            ElemType::F32 => bytemuck::try_cast_slice(self.data()).ok(),
            ElemType::U8 => None,
        }
    }
}
