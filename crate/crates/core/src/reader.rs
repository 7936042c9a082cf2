//! Opening container files and serving rows and heap bytes.
//!
//! Three residency strategies:
//! * `OsCache` maps the file; the kernel page cache is shared by every reader.
//! * `Direct` issues one positional read per blob.
//! * `ProcessCache` keeps at most `capacity` pages in private buffers and, for
//!   a known epoch order, runs a [`PageSchedule`] on a prefetch thread
//!   through a [`CacheSession`].

use std::collections::BTreeMap;
use std::fs::File;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use memmap2::{Mmap, MmapMut, MmapOptions};
use serde::Serialize;

use crate::cache::{CacheStats, CapacityTooSmall, PageSchedule, DEFAULT_PREFETCH_WINDOW};
use crate::codecs::{decode_image, BlobView, Image};
use crate::format::{
    cell_offsets, decode_cell, decode_header, validate_bytes, AllocationTable, Cell, DatasetHeader, FieldType,
    ValidationReport, HEADER_PREFIX_LEN,
};
use crate::source::FieldValue;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ReadStrategy {
    OsCache,
    ProcessCache { capacity: usize, window: usize },
    Direct,
}

impl ReadStrategy {
    pub fn process_cache(capacity: usize) -> Self {
        ReadStrategy::ProcessCache {
            capacity,
            window: DEFAULT_PREFETCH_WINDOW,
        }
    }
}

#[derive(Debug, Default)]
struct IoCounters {
    file_opens: AtomicU64,
    page_fetches: AtomicU64,
    blob_reads: AtomicU64,
    bytes_read: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct IoStats {
    pub file_opens: u64,
    pub page_fetches: u64,
    pub blob_reads: u64,
    pub bytes_read: u64,
}

thread_local! {
    static LATENCY_DEBT: std::cell::Cell<Duration> = const { std::cell::Cell::new(Duration::ZERO) };
}

/// Blocks for `d`: sleeps the bulk and spins the tail. Waits are paced per
/// thread: time overshot by one wait (late wakeup, preemption) is taken off
/// the following ones, up to 64 waits' worth, so the total over many calls
/// stays at `count * d` even where sleeps wake late.
pub fn spin_wait(d: Duration) {
    if d.is_zero() {
        return;
    }
    let start = Instant::now();
    let owed = LATENCY_DEBT.take();
    let target = d.saturating_sub(owed);
    const SPIN: Duration = Duration::from_micros(200);
    if target > SPIN {
        std::thread::sleep(target - SPIN);
    }
    let deadline = start + target;
    while Instant::now() < deadline {
        std::hint::spin_loop();
    }
    let over = start.elapsed().saturating_sub(target);
    LATENCY_DEBT.set((owed.saturating_sub(d) + over).min(d * 64));
}

/// An open container file. Shareable across threads.
#[derive(Debug)]
pub struct Dataset {
    path: PathBuf,
    header: DatasetHeader,
    table: AllocationTable,
    file: Arc<File>,
    map: Option<Mmap>,
    rows: Box<[u8]>,
    cell_offsets: Vec<usize>,
    strategy: ReadStrategy,
    latency: Duration,
    counters: Arc<IoCounters>,
    /// Pages loaded outside a schedule run (process cache only).
    resident: Mutex<BTreeMap<u64, Box<[u8]>>>,
    max_pages_per_sample: usize,
}

pub fn validate_file(path: impl AsRef<Path>) -> Result<ValidationReport> {
    let bytes = std::fs::read(path)?;
    Ok(validate_bytes(&bytes))
}

impl Dataset {
    pub fn open(path: impl AsRef<Path>, strategy: ReadStrategy) -> Result<Self> {
        Self::open_with_latency(path, strategy, Duration::ZERO)
    }

    /// `latency` is injected once per page fetch (process cache) or blob read (direct).
    pub fn open_with_latency(path: impl AsRef<Path>, strategy: ReadStrategy, latency: Duration) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path)?;
        let counters = Arc::new(IoCounters::default());
        counters.file_opens.fetch_add(1, Ordering::Relaxed);
        let file_len = file.metadata()?.len();

        let mut prefix = [0u8; HEADER_PREFIX_LEN];
        let got = read_up_to(&file, &mut prefix, 0)?;
        if got < HEADER_PREFIX_LEN {
            // Let the decoder classify short files (bad magic vs truncation).
            decode_header(&prefix[..got])?;
        }
        if prefix[..8] != crate::format::MAGIC {
            return Err(crate::format::FormatError::BadMagic.into());
        }
        let num_fields = u16::from_le_bytes([prefix[20], prefix[21]]) as usize;
        let mut head = vec![0u8; crate::format::header_len(num_fields) as usize];
        file.read_exact_at(&mut head, 0)
            .map_err(|_| Error::InvalidFile("header truncated".into()))?;
        let header = decode_header(&head)?;
        if file_len < header.alloc_table_offset + 8 {
            return Err(Error::InvalidFile(format!(
                "file is {file_len} bytes, allocation table expected at {}",
                header.alloc_table_offset
            )));
        }
        let mut table_bytes = vec![0u8; (file_len - header.alloc_table_offset) as usize];
        file.read_exact_at(&mut table_bytes, header.alloc_table_offset)?;
        let table = AllocationTable::decode(&table_bytes)?;

        let mut rows = vec![0u8; (header.num_samples * header.row_width()) as usize].into_boxed_slice();
        file.read_exact_at(&mut rows, header.data_table_offset)?;

        let map = match strategy {
            // SAFETY: the file is opened read-only and containers are never modified in place.
            ReadStrategy::OsCache => Some(unsafe { Mmap::map(&file)? }),
            _ => None,
        };

        let mut ds = Self {
            path,
            cell_offsets: cell_offsets(&header.fields),
            header,
            table,
            file: Arc::new(file),
            map,
            rows,
            strategy,
            latency,
            counters,
            resident: Mutex::new(BTreeMap::new()),
            max_pages_per_sample: 0,
        };
        let mut pages = Vec::new();
        let mut max_pages = 0;
        for i in 0..ds.num_samples() {
            ds.sample_pages(i, &mut pages)?;
            max_pages = max_pages.max(pages.len());
        }
        ds.max_pages_per_sample = max_pages;
        if let ReadStrategy::ProcessCache { capacity, window } = strategy {
            if capacity == 0 || capacity < max_pages {
                return Err(CapacityTooSmall {
                    capacity,
                    required: max_pages.max(1),
                }
                .into());
            }
            if window == 0 {
                return Err(Error::Config("prefetch window must be >= 1".into()));
            }
        }
        Ok(ds)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn allocation_table(&self) -> &AllocationTable {
        &self.table
    }

    pub fn strategy(&self) -> ReadStrategy {
        self.strategy
    }

    pub fn num_samples(&self) -> usize {
        self.header.num_samples as usize
    }

    pub fn num_pages(&self) -> u64 {
        self.header.num_pages()
    }

    pub fn page_size(&self) -> u64 {
        self.header.page_size
    }

    pub fn max_pages_per_sample(&self) -> usize {
        self.max_pages_per_sample
    }

    pub fn io_stats(&self) -> IoStats {
        let c = &self.counters;
        IoStats {
            file_opens: c.file_opens.load(Ordering::Relaxed),
            page_fetches: c.page_fetches.load(Ordering::Relaxed),
            blob_reads: c.blob_reads.load(Ordering::Relaxed),
            bytes_read: c.bytes_read.load(Ordering::Relaxed),
        }
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.num_samples() {
            return Err(Error::IndexOutOfRange {
                index: i as u64,
                len: self.header.num_samples,
            });
        }
        Ok(())
    }

    pub fn row(&self, i: usize) -> Result<&[u8]> {
        self.check_index(i)?;
        let w = self.header.row_width() as usize;
        Ok(&self.rows[i * w..(i + 1) * w])
    }

    /// One cell of row `i`. Allocation free.
    pub fn cell(&self, i: usize, field: usize) -> Result<Cell> {
        let row = self.row(i)?;
        Ok(decode_cell(&self.header.fields[field], &row[self.cell_offsets[field]..])?)
    }

    /// Heap region of one cell, or `None` for inline or empty values.
    pub fn heap_ref(&self, i: usize, field: usize) -> Result<Option<(u64, u64)>> {
        let cell = self.cell(i, field)?;
        let r = cell.heap_ref(&self.header.fields[field].ty);
        if let Some((offset, len)) = r {
            let end = offset.checked_add(len);
            if offset < self.header.heap_offset || end.is_none_or(|e| e > self.header.alloc_table_offset) {
                return Err(Error::InvalidFile(format!("row {i} references bytes outside the heap")));
            }
        }
        Ok(r)
    }

    /// Sorted, distinct pages touched by sample `i`.
    pub fn sample_pages(&self, i: usize, out: &mut Vec<u64>) -> Result<()> {
        out.clear();
        for f in 0..self.header.fields.len() {
            if let Some((offset, len)) = self.heap_ref(i, f)? {
                out.extend(AllocationTable::pages_of(&self.header, offset, len));
            }
        }
        out.sort_unstable();
        out.dedup();
        Ok(())
    }

    /// First page of each sample's heap data, for page-aware orders.
    /// Samples with no heap data map to `u64::MAX`.
    pub fn page_map(&self) -> Result<Vec<u64>> {
        let mut pages = Vec::new();
        (0..self.num_samples())
            .map(|i| {
                self.sample_pages(i, &mut pages)?;
                Ok(pages.first().copied().unwrap_or(u64::MAX))
            })
            .collect()
    }

    /// Indices whose decoded row satisfies `pred`.
    pub fn filter(&self, mut pred: impl FnMut(&[Cell]) -> bool) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut cells = Vec::with_capacity(self.header.fields.len());
        for i in 0..self.num_samples() {
            cells.clear();
            for f in 0..self.header.fields.len() {
                cells.push(self.cell(i, f)?);
            }
            if pred(&cells) {
                out.push(i);
            }
        }
        Ok(out)
    }

    fn read_at(&self, buf: &mut [u8], offset: u64) -> Result<()> {
        spin_wait(self.latency);
        self.file.read_exact_at(buf, offset)?;
        self.counters.bytes_read.fetch_add(buf.len() as u64, Ordering::Relaxed);
        Ok(())
    }

    /// Scratch size that lets `read_blob` serve any blob without growing it.
    pub fn blob_scratch_len(&self) -> usize {
        match self.strategy {
            ReadStrategy::OsCache => 0,
            _ => self.allocation_table().regions.iter().map(|r| r.len as usize).max().unwrap_or(0),
        }
    }

    /// Heap bytes `[offset, offset + len)`. Under `ProcessCache` this requires
    /// a session; `scratch` is only written when the bytes are not contiguous
    /// in memory and is grown, never shrunk.
    pub fn read_blob<'a>(
        &'a self,
        session: Option<&'a CacheSession>,
        step: usize,
        offset: u64,
        len: u64,
        scratch: &'a mut Vec<u8>,
    ) -> Result<&'a [u8]> {
        let len_us = len as usize;
        match (self.strategy, session) {
            (ReadStrategy::OsCache, _) => {
                let map = self.map.as_ref().expect("os cache maps the file");
                Ok(&map[offset as usize..offset as usize + len_us])
            }
            (ReadStrategy::Direct, _) => {
                if scratch.len() < len_us {
                    scratch.resize(len_us, 0);
                }
                self.counters.blob_reads.fetch_add(1, Ordering::Relaxed);
                self.read_at(&mut scratch[..len_us], offset)?;
                Ok(&scratch[..len_us])
            }
            (ReadStrategy::ProcessCache { .. }, Some(s)) => s.read(&self.header, step, offset, len, scratch),
            (ReadStrategy::ProcessCache { .. }, None) => {
                let resident = self.resident.lock().unwrap_or_else(|e| e.into_inner());
                let pages = AllocationTable::pages_of(&self.header, offset, len);
                if let Some(p) = pages.clone().find(|p| !resident.contains_key(p)) {
                    return Err(Error::PageNotResident(p));
                }
                if scratch.len() < len_us {
                    scratch.resize(len_us, 0);
                }
                copy_from_pages(&self.header, offset, len, &mut scratch[..len_us], |p| &resident[&p]);
                Ok(&scratch[..len_us])
            }
        }
    }

    /// Loads pages into the standalone process-cache residency, evicting the
    /// lowest-numbered pages not requested when over capacity.
    pub fn load_pages(&self, pages: &[u64]) -> Result<()> {
        let ReadStrategy::ProcessCache { capacity, .. } = self.strategy else {
            return Err(Error::Config("load_pages requires the process cache".into()));
        };
        if pages.len() > capacity {
            return Err(CapacityTooSmall {
                capacity,
                required: pages.len(),
            }
            .into());
        }
        let mut resident = self.resident.lock().unwrap_or_else(|e| e.into_inner());
        for &p in pages {
            if p >= self.num_pages() {
                return Err(Error::Config(format!("page {p} out of range")));
            }
            if resident.contains_key(&p) {
                continue;
            }
            while resident.len() >= capacity {
                let victim = *resident.keys().find(|k| !pages.contains(k)).expect("capacity >= request");
                resident.remove(&victim);
            }
            let mut buf = vec![0u8; self.page_size() as usize].into_boxed_slice();
            self.read_at(&mut buf, self.header.heap_offset + p * self.page_size())?;
            self.counters.page_fetches.fetch_add(1, Ordering::Relaxed);
            resident.insert(p, buf);
        }
        Ok(())
    }

    pub fn resident_pages(&self) -> Vec<u64> {
        self.resident.lock().unwrap_or_else(|e| e.into_inner()).keys().copied().collect()
    }

    /// All fields of sample `i`, decoded. Under `ProcessCache` every page the
    /// sample touches must already be loaded with [`Dataset::load_pages`].
    pub fn get_sample(&self, i: usize) -> Result<Vec<FieldValue>> {
        self.check_index(i)?;
        let mut scratch = Vec::new();
        self.sample_values(None, 0, i, &mut scratch)
    }

    fn sample_values(
        &self,
        session: Option<&CacheSession>,
        step: usize,
        i: usize,
        scratch: &mut Vec<u8>,
    ) -> Result<Vec<FieldValue>> {
        let mut out = Vec::with_capacity(self.header.fields.len());
        for (f, field) in self.header.fields.iter().enumerate() {
            let cell = self.cell(i, f)?;
            let value = match (cell, &field.ty) {
                (Cell::Int(v), _) => FieldValue::Int(v),
                (Cell::Float(v), _) => FieldValue::Float(v),
                (c, FieldType::FixedArray { .. }) | (c @ Cell::Bytes { .. }, _) => {
                    let bytes = match self.heap_ref(i, f)? {
                        Some((offset, len)) => self.read_blob(session, step, offset, len, scratch)?.to_vec(),
                        None => Vec::new(),
                    };
                    if matches!(c, Cell::Array { .. }) {
                        FieldValue::Array(bytes)
                    } else {
                        FieldValue::Bytes(bytes)
                    }
                }
                (Cell::Image(c), _) => {
                    let payload: &[u8] = match self.heap_ref(i, f)? {
                        Some((offset, len)) => self.read_blob(session, step, offset, len, scratch)?,
                        None => &[],
                    };
                    let view = BlobView {
                        height: c.height,
                        width: c.width,
                        channels: c.channels,
                        codec: c.codec,
                        payload,
                    };
                    let mut pixels = vec![0u8; view.decoded_len()];
                    decode_image(view, &mut pixels)?;
                    FieldValue::Image(Image::new(c.height, c.width, c.channels, pixels)?)
                }
                (c, ty) => {
                    return Err(Error::InvalidFile(format!("row {i}: cell {c:?} does not match {ty:?}")));
                }
            };
            out.push(value);
        }
        Ok(out)
    }

    /// Pages touched by each sample of `order`, as steps for a schedule.
    pub fn order_steps(&self, order: &[usize]) -> Result<Vec<Vec<u64>>> {
        let mut pages = Vec::new();
        order
            .iter()
            .map(|&i| {
                self.sample_pages(i, &mut pages)?;
                Ok(pages.clone())
            })
            .collect()
    }

    /// Plans the process cache for `order` and allocates its buffers.
    pub fn session(&self, order: &[usize]) -> Result<CacheSession> {
        let ReadStrategy::ProcessCache { capacity, window } = self.strategy else {
            return Err(Error::Config("cache sessions require the process cache".into()));
        };
        for &i in order {
            self.check_index(i)?;
        }
        let schedule = PageSchedule::build(self.order_steps(order)?, capacity)?;
        CacheSession::new(self, schedule, window)
    }

    /// Consumes `order` sample by sample through the process cache while a
    /// prefetch thread executes the planned fetches.
    pub fn run_schedule(
        &self,
        order: &[usize],
        mut consume: impl FnMut(usize, Vec<FieldValue>) -> Result<()>,
    ) -> Result<CacheStats> {
        let session = self.session(order)?;
        let result = std::thread::scope(|s| {
            let prefetch = s.spawn(|| session.run_prefetch());
            let mut scratch = Vec::new();
            let mut run = || -> Result<()> {
                for (step, &i) in order.iter().enumerate() {
                    let _done = session.step_guard(step);
                    let values = self.sample_values(Some(&session), step, i, &mut scratch)?;
                    consume(i, values)?;
                }
                Ok(())
            };
            let r = run();
            if r.is_err() {
                session.stop();
            }
            let p = prefetch.join().expect("prefetch thread panicked");
            r.and(p)
        });
        result?;
        Ok(session.stats())
    }
}

fn read_up_to(file: &File, buf: &mut [u8], offset: u64) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match file.read_at(&mut buf[got..], offset + got as u64)? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got)
}

fn copy_from_pages<'p>(
    header: &DatasetHeader,
    offset: u64,
    len: u64,
    out: &mut [u8],
    page: impl Fn(u64) -> &'p [u8],
) {
    let mut at = 0u64;
    while at < len {
        let abs = offset + at;
        let p = header.page_of(abs);
        let in_page = abs - header.heap_offset - p * header.page_size;
        let n = (header.page_size - in_page).min(len - at);
        out[at as usize..(at + n) as usize].copy_from_slice(&page(p)[in_page as usize..(in_page + n) as usize]);
        at += n;
    }
}

/// Anonymous mapping: zero pages come from the kernel, never from a user-space memset.
struct PageBuf(std::cell::UnsafeCell<MmapMut>);

// Access is ordered by the schedule: a buffer is written only after every
// step that reads its previous content has finished.
unsafe impl Sync for PageBuf {}

#[derive(Debug)]
struct Progress {
    watermark: usize,
    /// Event the prefetcher is parked on; only its readiness triggers a wakeup.
    parked_on: Option<usize>,
}

/// One epoch of process-cache execution.
///
/// Fetch events run strictly in order on one prefetch thread. Event `k` runs
/// once every step that read its buffer's previous page has finished, and
/// while it is at most `window` events past the first event of the lowest
/// unfinished step (events of that step itself are never held back).
/// Readers wait until their buffer holds the fetch the schedule assigned them.
pub struct CacheSession {
    schedule: PageSchedule,
    window: usize,
    file: Arc<File>,
    heap_offset: u64,
    page_size: u64,
    latency: Duration,
    counters: Arc<IoCounters>,
    buffers: Box<[PageBuf]>,
    /// Per buffer: one past the last completed fetch event.
    loaded: Box<[AtomicUsize]>,
    step_done: Box<[AtomicBool]>,
    watermark: AtomicUsize,
    progress: Mutex<Progress>,
    changed: Condvar,
    stopped: AtomicBool,
    fetches: AtomicU64,
    reloads: AtomicU64,
}

impl std::fmt::Debug for CacheSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CacheSession")
            .field("steps", &self.schedule.num_steps())
            .field("buffers", &self.buffers.len())
            .finish_non_exhaustive()
    }
}

/// Marks a step finished when dropped.
pub struct StepGuard<'s> {
    session: &'s CacheSession,
    step: usize,
}

impl Drop for StepGuard<'_> {
    fn drop(&mut self) {
        self.session.finish_step(self.step);
    }
}

impl CacheSession {
    fn new(ds: &Dataset, schedule: PageSchedule, window: usize) -> Result<Self> {
        let page = ds.page_size() as usize;
        let buffers = (0..schedule.buffers_used())
            .map(|_| {
                let map = MmapOptions::new().len(page).map_anon()?;
                Ok(PageBuf(std::cell::UnsafeCell::new(map)))
            })
            .collect::<std::io::Result<_>>()?;
        Ok(Self {
            loaded: (0..schedule.buffers_used()).map(|_| AtomicUsize::new(0)).collect(),
            step_done: (0..schedule.num_steps()).map(|_| AtomicBool::new(false)).collect(),
            schedule,
            window,
            file: ds.file.clone(),
            heap_offset: ds.header.heap_offset,
            page_size: ds.header.page_size,
            latency: ds.latency,
            counters: ds.counters.clone(),
            buffers,
            watermark: AtomicUsize::new(0),
            progress: Mutex::new(Progress {
                watermark: 0,
                parked_on: None,
            }),
            changed: Condvar::new(),
            stopped: AtomicBool::new(false),
            fetches: AtomicU64::new(0),
            reloads: AtomicU64::new(0),
        })
    }

    pub fn schedule(&self) -> &PageSchedule {
        &self.schedule
    }

    pub fn buffer_bytes(&self) -> usize {
        self.buffers.len() * self.page_size as usize
    }

    /// Counts observed so far; equal to the plan's once the run completes.
    pub fn stats(&self) -> CacheStats {
        CacheStats {
            fetch_count: self.fetches.load(Ordering::Acquire),
            reload_count: self.reloads.load(Ordering::Acquire),
            peak_resident: self.schedule.stats().peak_resident,
        }
    }

    pub fn stop(&self) {
        self.stopped.store(true, Ordering::Release);
        let _g = self.progress.lock().unwrap_or_else(|e| e.into_inner());
        self.changed.notify_all();
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped.load(Ordering::Acquire)
    }

    pub fn step_guard(&self, step: usize) -> StepGuard<'_> {
        StepGuard { session: self, step }
    }

    pub fn finish_step(&self, step: usize) {
        if step >= self.step_done.len() {
            return;
        }
        self.step_done[step].store(true, Ordering::Release);
        let mut g = self.progress.lock().unwrap_or_else(|e| e.into_inner());
        let mut w = g.watermark;
        while w < self.step_done.len() && self.step_done[w].load(Ordering::Acquire) {
            w += 1;
        }
        if w != g.watermark {
            g.watermark = w;
            self.watermark.store(w, Ordering::Release);
            if g.parked_on.is_some_and(|k| self.may_fetch(k, w)) {
                drop(g);
                self.changed.notify_all();
            }
        }
    }

    fn may_fetch(&self, k: usize, watermark: usize) -> bool {
        let e = &self.schedule.events()[k];
        let reusable = e.reuse_after.is_none_or(|r| watermark > r);
        let in_window = e.step <= watermark || k < self.schedule.first_event_at_or_after(watermark) + self.window;
        reusable && in_window
    }

    /// Executes every fetch event. Returns early, successfully, when stopped.
    pub fn run_prefetch(&self) -> Result<()> {
        for k in 0..self.schedule.events().len() {
            {
                let mut g = self.progress.lock().unwrap_or_else(|e| e.into_inner());
                while !self.is_stopped() && !self.may_fetch(k, g.watermark) {
                    g.parked_on = Some(k);
                    g = self.changed.wait(g).unwrap_or_else(|e| e.into_inner());
                }
                g.parked_on = None;
            }
            if self.is_stopped() {
                return Ok(());
            }
            let e = self.schedule.events()[k];
            // SAFETY: `may_fetch` established that no step still reads this buffer
            // and no later step reads it before `loaded` advances past `k`.
            let buf = unsafe { &mut *self.buffers[e.buffer].0.get() };
            spin_wait(self.latency);
            if let Err(err) = self.file.read_exact_at(buf, self.heap_offset + e.page * self.page_size) {
                self.stop();
                return Err(err.into());
            }
            self.counters.page_fetches.fetch_add(1, Ordering::Relaxed);
            self.counters.bytes_read.fetch_add(self.page_size, Ordering::Relaxed);
            self.fetches.fetch_add(1, Ordering::Release);
            if e.reload {
                self.reloads.fetch_add(1, Ordering::Release);
            }
            self.loaded[e.buffer].store(k + 1, Ordering::Release);
            let _g = self.progress.lock().unwrap_or_else(|e| e.into_inner());
            self.changed.notify_all();
        }
        Ok(())
    }

    fn wait_loaded(&self, buffer: usize, event: usize) -> Result<()> {
        if self.loaded[buffer].load(Ordering::Acquire) > event {
            return Ok(());
        }
        let mut g = self.progress.lock().unwrap_or_else(|e| e.into_inner());
        while self.loaded[buffer].load(Ordering::Acquire) <= event {
            if self.is_stopped() {
                return Err(Error::Shutdown);
            }
            g = self.changed.wait(g).unwrap_or_else(|e| e.into_inner());
        }
        Ok(())
    }

    fn page(&self, step: usize, page: u64) -> Result<&[u8]> {
        let a = self
            .schedule
            .accesses(step)
            .iter()
            .find(|a| a.page == page)
            .ok_or(Error::PageNotResident(page))?;
        self.wait_loaded(a.buffer, a.event)?;
        // SAFETY: the buffer holds this step's page until the step finishes.
        Ok(unsafe { &**self.buffers[a.buffer].0.get() })
    }

    fn read<'a>(
        &'a self,
        header: &DatasetHeader,
        step: usize,
        offset: u64,
        len: u64,
        scratch: &'a mut Vec<u8>,
    ) -> Result<&'a [u8]> {
        let pages = AllocationTable::pages_of(header, offset, len);
        let first = *pages.start();
        if first == *pages.end() {
            let buf = self.page(step, first)?;
            let at = (offset - header.heap_offset - first * header.page_size) as usize;
            return Ok(&buf[at..at + len as usize]);
        }
        for p in pages {
            self.page(step, p)?;
        }
        let len_us = len as usize;
        if scratch.len() < len_us {
            scratch.resize(len_us, 0);
        }
        copy_from_pages(header, offset, len, &mut scratch[..len_us], |p| {
            self.page(step, p).expect("page loaded above")
        });
        Ok(&scratch[..len_us])
    }
}
