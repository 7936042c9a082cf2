//! Independent oracles and generators shared by the integration tests.
#![allow(dead_code)]

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use fastds::codecs::{BlobView, CodecId, Image};
use fastds::format::{ArrayShape, DType, FieldDescriptor, FieldType, MIN_PAGE_SIZE};
use fastds::loader::{Loader, LoaderConfig};
use fastds::pipeline::{run_unfused, InputSpec, SampleContext, Transform, Value};
use fastds::reader::{Dataset, ReadStrategy};
use fastds::rng::SplitMix64;
use fastds::source::{image_schema, FieldValue, InMemorySource};
use fastds::traversal::{OrderKind, TraversalOrder};
use fastds::writer::{write_dataset, WriterConfig};

/// Global allocator that counts allocations while armed. A test binary opts
/// in with `#[global_allocator] static A: CountingAlloc = CountingAlloc;`.
pub struct CountingAlloc;

static ALLOC_ARMED: AtomicBool = AtomicBool::new(false);
static ALLOC_COUNT: AtomicU64 = AtomicU64::new(0);

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if ALLOC_ARMED.load(Ordering::Relaxed) {
            ALLOC_COUNT.fetch_add(1, Ordering::Relaxed);
        }
        System.alloc(layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        if ALLOC_ARMED.load(Ordering::Relaxed) {
            ALLOC_COUNT.fetch_add(1, Ordering::Relaxed);
        }
        System.realloc(ptr, layout, new_size)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

/// Starts counting from zero.
pub fn arm_alloc_counter() {
    ALLOC_COUNT.store(0, Ordering::SeqCst);
    ALLOC_ARMED.store(true, Ordering::SeqCst);
}

/// Stops counting and returns the allocations since `arm_alloc_counter`.
pub fn disarm_alloc_counter() -> u64 {
    ALLOC_ARMED.store(false, Ordering::SeqCst);
    ALLOC_COUNT.load(Ordering::SeqCst)
}

/// Writes a 3000-sample synthetic dataset and counts process-wide
/// allocations between the first and the last delivered batch of one epoch.
/// Returns `(allocations, batches)`.
pub fn steady_state_allocations(dir: &Path, strategy: ReadStrategy, pipeline: &str, kind: OrderKind) -> (u64, u64) {
    let path = dir.join(format!("steady_{}.bbox", kind.name()));
    let src = fastds::source::SyntheticSource::new(3000, 16, 16, 3, 8);
    let cfg = WriterConfig {
        page_size: MIN_PAGE_SIZE,
        num_workers: 2,
        compress_probability: 0.5,
        ..WriterConfig::default()
    };
    write_dataset(&src, &src.schema(), &cfg, &path).unwrap();
    let ds = Arc::new(Dataset::open(&path, strategy).unwrap());
    let pipeline = fastds::pipeline::parse_pipeline(pipeline).unwrap();
    let mut loader = Loader::new(ds, LoaderConfig::new(3, 4, TraversalOrder::new(kind, 1), pipeline)).unwrap();
    let mut epoch = loader.epoch(0).unwrap();
    let total = epoch.num_batches() as u64;
    let (mut seen, mut checksum, mut allocs) = (0u64, 0u64, 0u64);
    while let Some(batch) = epoch.next_batch() {
        let batch = batch.unwrap();
        checksum = checksum.wrapping_add(batch.data().iter().map(|&b| b as u64).sum::<u64>());
        seen += 1;
        if seen == 1 {
            arm_alloc_counter();
        }
        if seen == total {
            allocs = disarm_alloc_counter();
        }
    }
    assert!(checksum > 0);
    (allocs, seen)
}

/// Single-threaded bump allocator written from the layout rules alone:
/// blobs never straddle a page, a blob larger than a page takes a fresh
/// contiguous run, and the open page survives an oversize request.
pub struct RefBumpAllocator {
    heap: u64,
    page: u64,
    pages_used: u64,
    open: Option<(u64, u64)>,
}

impl RefBumpAllocator {
    pub fn new(heap: u64, page: u64) -> Self {
        Self {
            heap,
            page,
            pages_used: 0,
            open: None,
        }
    }

    pub fn alloc(&mut self, len: u64) -> u64 {
        if len > self.page {
            let start = self.pages_used;
            self.pages_used += len.div_ceil(self.page);
            return self.heap + start * self.page;
        }
        if let Some((p, used)) = self.open {
            if used + len <= self.page {
                self.open = Some((p, used + len));
                return self.heap + p * self.page + used;
            }
        }
        let p = self.pages_used;
        self.pages_used += 1;
        self.open = Some((p, len));
        self.heap + p * self.page
    }

    pub fn pages(&self) -> u64 {
        self.pages_used
    }
}

/// Farthest-next-use replacement, simulated step by step with a linear scan
/// for every next use. Returns (fetches, reloads).
pub fn belady_sim(trace: &[u64], cap: usize) -> (u64, u64) {
    let mut resident: Vec<u64> = Vec::new();
    let mut seen = HashSet::new();
    let (mut fetches, mut reloads) = (0, 0);
    for (t, &p) in trace.iter().enumerate() {
        if resident.contains(&p) {
            continue;
        }
        fetches += 1;
        if !seen.insert(p) {
            reloads += 1;
        }
        if resident.len() == cap {
            let next_use = |q: u64| trace[t + 1..].iter().position(|&x| x == q).unwrap_or(usize::MAX);
            let victim = (0..resident.len()).max_by_key(|&i| next_use(resident[i])).unwrap();
            resident.swap_remove(victim);
        }
        resident.push(p);
    }
    (fetches, reloads)
}

/// Minimum fetch count over every possible eviction choice (exhaustive search).
pub fn optimal_fetches_exhaustive(trace: &[u64], cap: usize) -> u64 {
    fn go(trace: &[u64], cap: usize, resident: &mut Vec<u64>, memo: &mut HashMap<(usize, Vec<u64>), u64>) -> u64 {
        let Some((&p, rest)) = trace.split_first() else {
            return 0;
        };
        let mut key = resident.clone();
        key.sort_unstable();
        let key = (trace.len(), key);
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        let best = if resident.contains(&p) {
            go(rest, cap, resident, memo)
        } else if resident.len() < cap {
            resident.push(p);
            let v = 1 + go(rest, cap, resident, memo);
            resident.pop();
            v
        } else {
            let mut best = u64::MAX;
            for i in 0..resident.len() {
                let old = std::mem::replace(&mut resident[i], p);
                best = best.min(1 + go(rest, cap, resident, memo));
                resident[i] = old;
            }
            best
        };
        memo.insert(key, best);
        best
    }
    go(trace, cap, &mut Vec::new(), &mut HashMap::new())
}

/// Least-recently-used replacement. Returns (fetches, reloads).
pub fn lru_sim(trace: &[u64], cap: usize) -> (u64, u64) {
    let mut stack: Vec<u64> = Vec::new();
    let mut seen = HashSet::new();
    let (mut fetches, mut reloads) = (0, 0);
    for &p in trace {
        if let Some(i) = stack.iter().position(|&q| q == p) {
            stack.remove(i);
        } else {
            fetches += 1;
            if !seen.insert(p) {
                reloads += 1;
            }
            if stack.len() == cap {
                stack.remove(0);
            }
        }
        stack.push(p);
    }
    (fetches, reloads)
}

/// Run-length grouping of category flags into (flag, start, end).
pub fn group_runs(flags: &[bool]) -> Vec<(bool, usize, usize)> {
    let mut out: Vec<(bool, usize, usize)> = Vec::new();
    for (i, &f) in flags.iter().enumerate() {
        match out.last_mut() {
            Some(last) if last.0 == f => last.2 = i + 1,
            _ => out.push((f, i, i + 1)),
        }
    }
    out
}

pub fn is_permutation(v: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    v.len() == n && v.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

/// Schema exercising every field kind.
pub fn mixed_schema() -> Vec<FieldDescriptor> {
    vec![
        FieldDescriptor::new("label", FieldType::IntScalar),
        FieldDescriptor::new("weight", FieldType::FloatScalar),
        FieldDescriptor::new(
            "embedding",
            FieldType::FixedArray {
                dtype: DType::F32,
                shape: ArrayShape::new(&[2, 3]).unwrap(),
            },
        ),
        FieldDescriptor::new("caption", FieldType::VarBytes),
        FieldDescriptor::new(
            "image",
            FieldType::Image {
                max_height: 12,
                max_width: 12,
                channels: 3,
            },
        ),
    ]
}

/// Random image with long runs about half the time, noise otherwise.
pub fn random_image(rng: &mut SplitMix64, max_h: u16, max_w: u16, c: u8) -> Image {
    let h = 1 + rng.next_below(max_h as u64) as u16;
    let w = 1 + rng.next_below(max_w as u64) as u16;
    let n = h as usize * w as usize * c as usize;
    let blocky = rng.next_f64() < 0.5;
    let mut pixels = Vec::with_capacity(n);
    let mut v = rng.next_u64() as u8;
    for _ in 0..n {
        if !blocky || rng.next_below(8) == 0 {
            v = rng.next_u64() as u8;
        }
        pixels.push(v);
    }
    Image {
        height: h,
        width: w,
        channels: c,
        pixels,
    }
}

/// One random sample for `mixed_schema`. Captions are occasionally empty or
/// larger than a 64 KiB page.
pub fn mixed_sample(rng: &mut SplitMix64) -> Vec<FieldValue> {
    let caption_len = match rng.next_below(20) {
        0 => 0,
        1 => 65_536 + rng.next_below(70_000) as usize,
        _ => rng.next_below(300) as usize,
    };
    let caption: Vec<u8> = (0..caption_len).map(|_| rng.next_u64() as u8).collect();
    let embedding: Vec<f32> = (0..6).map(|_| f32::from_bits(rng.next_u64() as u32 & 0x7f7f_ffff)).collect();
    vec![
        FieldValue::Int(rng.next_u64() as i64),
        FieldValue::Float(f64::from_bits(rng.next_u64() & 0x7fef_ffff_ffff_ffff)),
        FieldValue::f32_array(&embedding),
        FieldValue::Bytes(caption),
        FieldValue::Image(random_image(rng, 12, 12, 3)),
    ]
}

/// Checks a quasi-random trace: each page loads exactly once and the buffer
/// never holds more than `limit` pages. Returns a description of the first breach.
pub fn check_quasi_trace(trace: &fastds::traversal::QuasiTrace, num_pages: usize, limit: usize) -> Result<(), String> {
    let mut loads = trace.page_loads.clone();
    loads.sort_unstable();
    loads.dedup();
    if loads.len() != trace.page_loads.len() {
        return Err("a page was loaded twice".into());
    }
    if trace.page_loads.len() != num_pages {
        return Err(format!("{} page loads for {num_pages} pages", trace.page_loads.len()));
    }
    for (step, e) in trace.emits.iter().enumerate() {
        if e.buffered.len() > limit {
            return Err(format!("step {step}: {} pages buffered > {limit}", e.buffered.len()));
        }
        if !e.buffered.contains(&e.page) {
            return Err(format!("step {step}: emitted sample's page is not buffered"));
        }
    }
    Ok(())
}

/// Outcome of exhaustively exploring the slot state machine.
#[derive(Debug, Default)]
pub struct RingModelReport {
    pub states: usize,
    pub terminal_states: usize,
}

/// Breadth-first search over every interleaving of fills, publishes (in any
/// order), in-order consumes and releases for `batches` batches on `slots`
/// slots, with at most one batch held by the consumer. Fails on any
/// out-of-order delivery, over-commitment or state without a move.
pub fn model_check_ring(slots: usize, batches: u64) -> Result<RingModelReport, String> {
    use fastds::pipeline::{RingState, SlotState};
    use std::collections::VecDeque;

    #[derive(Clone, PartialEq, Eq, Hash)]
    struct M {
        ring: RingState,
        content: Vec<Option<u64>>,
        begun: u64,
        consumed: u64,
    }
    let start = M {
        ring: RingState::new(slots),
        content: vec![None; slots],
        begun: 0,
        consumed: 0,
    };
    let mut seen = HashSet::from([start.clone()]);
    let mut queue = VecDeque::from([start]);
    let mut report = RingModelReport::default();
    while let Some(m) = queue.pop_front() {
        report.states += 1;
        let busy = (0..slots).filter(|&s| m.ring.state(s) != SlotState::Free).count() as u64;
        if busy != m.begun - m.consumed + (0..slots).filter(|&s| m.ring.state(s) == SlotState::Consuming).count() as u64 {
            return Err("busy slots disagree with batches in flight".into());
        }
        let mut next = Vec::new();
        if m.begun < batches {
            let mut n = m.clone();
            if let Some(s) = n.ring.try_begin_fill() {
                n.content[s] = Some(n.begun);
                n.begun += 1;
                next.push(n);
            }
        }
        for s in 0..slots {
            if m.ring.state(s) == SlotState::Filling {
                let mut n = m.clone();
                n.ring.publish(s);
                next.push(n);
            }
        }
        let holding = (0..slots).find(|&s| m.ring.state(s) == SlotState::Consuming);
        match holding {
            Some(s) => {
                let mut n = m.clone();
                n.ring.release(s);
                n.content[s] = None;
                next.push(n);
            }
            None => {
                let mut n = m.clone();
                if let Some(s) = n.ring.try_begin_consume() {
                    if n.content[s] != Some(n.consumed) {
                        return Err(format!("delivered {:?}, expected batch {}", n.content[s], n.consumed));
                    }
                    n.consumed += 1;
                    next.push(n);
                }
            }
        }
        if next.is_empty() {
            let idle = (0..slots).all(|s| m.ring.state(s) == SlotState::Free);
            if m.consumed != batches || !idle {
                return Err(format!("stuck after {} of {batches} batches", m.consumed));
            }
            report.terminal_states += 1;
        }
        for n in next {
            if seen.insert(n.clone()) {
                queue.push_back(n);
            }
        }
    }
    Ok(report)
}

/// Per-batch checksums and delivery counts from [`stress_ring`].
#[derive(Debug, PartialEq, Eq)]
pub struct RingStressResult {
    pub checksums: Vec<u64>,
    pub deliveries: Vec<u32>,
}

/// Pushes `batches` batches of `batch` positions through a real ring with
/// `workers` producer threads and random jitter on both sides. Every
/// position carries bytes derived from its global sample id; the consumer
/// verifies them and records an order-independent checksum per batch.
pub fn stress_ring(batches: u64, batch: usize, workers: usize, slots: usize, seed: u64) -> RingStressResult {
    use fastds::pipeline::{plan, BatchRing, CastF32, ElemType, FillTicket, InputSpec, SampleContext, Shape, TensorRef, TensorSpec, Value};
    use std::sync::atomic::{AtomicBool, Ordering};
    use std::sync::{Arc, Mutex};

    const W: usize = 8;
    let bytes_of = |id: u64| -> [u8; W] { std::array::from_fn(|k| (id.wrapping_mul(2654435761).rotate_left(k as u32 * 8) as u8) ^ k as u8) };
    let shape = Shape::new(1, W as u32, 1);
    let input = InputSpec::Tensor(TensorSpec { shape, elem: ElemType::U8 });
    let ring = BatchRing::new(plan(vec![Arc::new(CastF32)], input, batch, slots).unwrap());
    let total = batches * batch as u64;
    let coord: Mutex<(Option<FillTicket>, u64)> = Mutex::new((None, 0));
    let stop = AtomicBool::new(false);
    let jitter = |rng: &mut SplitMix64| match rng.next_u64() % 16 {
        0 => std::thread::yield_now(),
        1 => std::thread::sleep(std::time::Duration::from_micros(rng.next_u64() % 50)),
        _ => {}
    };
    let mut result = RingStressResult {
        checksums: Vec::with_capacity(batches as usize),
        deliveries: vec![0; total as usize],
    };
    std::thread::scope(|s| {
        for w in 0..workers {
            let (ring, coord, stop) = (&ring, &coord, &stop);
            s.spawn(move || {
                let mut rng = SplitMix64::for_stream(seed, w as u64, 1);
                let mut ticket: Option<FillTicket> = None;
                while !stop.load(Ordering::Acquire) {
                    let Some(mut lease) = ticket.as_ref().and_then(|t| ring.claim(t)) else {
                        let mut c = coord.lock().unwrap();
                        if c.0.is_some() && c.0 != ticket {
                            ticket = c.0;
                            continue;
                        }
                        if c.1 >= batches {
                            break;
                        }
                        match ring.begin_fill(c.1, batch) {
                            Ok(t) => {
                                c.0 = Some(t);
                                c.1 += 1;
                                ticket = Some(t);
                                continue;
                            }
                            Err(_) => break,
                        }
                    };
                    jitter(&mut rng);
                    let id = lease.batch() * batch as u64 + lease.position() as u64;
                    lease.set_sample(id, id as i64);
                    let data = bytes_of(id);
                    let value = Value::Tensor(TensorRef { shape, elem: ElemType::U8, bytes: &data });
                    lease.run(value, SampleContext { seed, epoch: 0, index: id }).unwrap();
                    lease.complete();
                }
            });
        }
        let mut rng = SplitMix64::for_stream(seed, u64::MAX, 2);
        for b in 0..batches {
            let mut lease = ring.next_ready().unwrap();
            assert_eq!(lease.batch(), b, "batches out of order");
            lease.run_rest().unwrap();
            let mut sum = 0u64;
            for p in 0..lease.len() {
                let id = lease.index(p);
                assert_eq!(id, b * batch as u64 + p as u64, "position holds a foreign sample");
                let out = lease.output(p);
                let want = bytes_of(id);
                for (k, &x) in want.iter().enumerate() {
                    assert_eq!(out.get_f32(k), x as f32, "batch {b} position {p} corrupted");
                }
                result.deliveries[id as usize] += 1;
                sum = sum.wrapping_add(u64::from_le_bytes(want).rotate_left(p as u32));
            }
            result.checksums.push(sum);
            jitter(&mut rng);
        }
        stop.store(true, Ordering::Release);
    });
    result
}

pub fn raw(img: &Image) -> Value<'_> {
    Value::Encoded(BlobView {
        height: img.height,
        width: img.width,
        channels: img.channels,
        codec: CodecId::Raw,
        payload: &img.pixels,
    })
}

pub fn random_dataset(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let mut rng = SplitMix64::new(seed);
    let samples = (0..n)
        .map(|i| {
            vec![
                FieldValue::Int(i as i64 % 7),
                FieldValue::Image(random_image(&mut rng, 12, 12, 3)),
            ]
        })
        .collect();
    let path = dir.join(format!("rand_{n}_{seed}.bbox"));
    let cfg = WriterConfig {
        page_size: MIN_PAGE_SIZE,
        num_workers: 2,
        compress_probability: 0.5,
        seed,
        ..WriterConfig::default()
    };
    write_dataset(&InMemorySource::new(samples), &image_schema(12, 12, 3), &cfg, &path).unwrap();
    path
}

/// Every delivered sample against the straight-line reference, plus the
/// concatenated outputs for cross-pipeline comparisons.
pub fn check_against_reference(path: &Path, pipeline: Vec<Arc<dyn Transform>>, batch: usize, workers: usize) -> Vec<u8> {
    let ds = Arc::new(Dataset::open(path, ReadStrategy::OsCache).unwrap());
    let input = InputSpec::Encoded {
        max_height: 12,
        max_width: 12,
        channels: 3,
    };
    let order = TraversalOrder::new(OrderKind::Random, 99);
    let mut loader = Loader::new(ds.clone(), LoaderConfig::new(batch, workers, order, pipeline.clone())).unwrap();
    let mut all = Vec::new();
    let mut seen = 0;
    loader
        .run_epoch(3, |b| {
            for p in 0..b.len() {
                let i = b.index(p) as usize;
                let FieldValue::Image(img) = &ds.get_sample(i).unwrap()[1] else {
                    panic!("image expected")
                };
                let ctx = SampleContext {
                    seed: 99,
                    epoch: 3,
                    index: i as u64,
                };
                let (shape, elem, bytes) = run_unfused(&pipeline, &input, raw(img), ctx).unwrap();
                let got = b.sample(p);
                assert_eq!((got.shape, got.elem), (shape, elem), "sample {i}");
                assert!(got.bytes == &bytes[..], "sample {i} differs from the reference");
                all.extend_from_slice(got.bytes);
                seen += 1;
            }
            Ok(())
        })
        .unwrap();
    assert_eq!(seen, ds.num_samples());
    all
}
