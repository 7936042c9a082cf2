//! Loader benchmarks: container vs one-file-per-sample, in three modes.
//!
//! * `ReadOnly` fetches every sample's bytes and nothing else.
//! * `ReadProcess` also runs the transform pipeline into batches.
//! * `FullLoop` adds a busy-wait "training step" per batch on the consumer.
//!
//! A fixed latency can be injected into every page fetch (container) or
//! file read (baseline) to emulate slow storage. Counted I/O is deterministic;
//! wall times are medians over the repetitions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::cache::DEFAULT_PREFETCH_WINDOW;
use crate::codecs::{BlobView, CodecId};
use crate::format::Cell;
use crate::loader::{Loader, LoaderConfig};
use crate::pipeline::{parse_pipeline, run_unfused, InputSpec, SampleContext, Transform, Value};
use crate::reader::{spin_wait, Dataset, ReadStrategy};
use crate::source::{decode_raster, export_directory, DirectorySource, SyntheticSource};
use crate::traversal::{OrderKind, TraversalOrder};
use crate::writer::{write_dataset, WriterConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchMode {
    ReadOnly,
    ReadProcess,
    FullLoop,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::ReadOnly, BenchMode::ReadProcess, BenchMode::FullLoop];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::ReadOnly => "read-only",
            BenchMode::ReadProcess => "read-process",
            BenchMode::FullLoop => "full-loop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoaderKind {
    Container,
    FilePerSample,
}

impl LoaderKind {
    pub fn name(self) -> &'static str {
        match self {
            LoaderKind::Container => "container",
            LoaderKind::FilePerSample => "file-per-sample",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [LoaderKind::Container, LoaderKind::FilePerSample]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone)]
pub struct BenchScenario {
    pub mode: BenchMode,
    pub loader: LoaderKind,
    pub compute_per_batch: Duration,
    pub latency: Duration,
    pub repetitions: usize,
    pub batch_size: usize,
    pub num_workers: usize,
    pub order: TraversalOrder,
    pub pipeline: String,
    /// Container read strategy; `None` uses the process cache.
    pub strategy: Option<ReadStrategy>,
    /// Process-cache capacity in pages when `strategy` is `None`; `None` picks a default.
    pub cache_pages: Option<usize>,
}

impl Default for BenchScenario {
    fn default() -> Self {
        Self {
            mode: BenchMode::ReadProcess,
            loader: LoaderKind::Container,
            compute_per_batch: Duration::ZERO,
            latency: Duration::ZERO,
            repetitions: 3,
            batch_size: 64,
            num_workers: 4,
            order: TraversalOrder::new(OrderKind::Random, 0),
            pipeline: "decode|crop:24,24|flip:0.5|normalize:127.5,64".into(),
            strategy: None,
            cache_pages: None,
        }
    }
}

/// Where the benchmark data lives. The container is built from the
/// directory when both exist, so sample indices agree.
#[derive(Debug, Clone, Default)]
pub struct BenchData {
    pub container: Option<PathBuf>,
    pub directory: Option<PathBuf>,
}

/// Deterministic counts for one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BenchCounters {
    pub batches: u64,
    pub samples: u64,
    pub file_opens: u64,
    pub file_reads: u64,
    pub page_fetches: u64,
    pub page_reloads: u64,
    /// FNV-1a over the delivered label sequence.
    pub label_digest: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub mode: BenchMode,
    pub loader: LoaderKind,
    pub order: &'static str,
    pub batch_size: usize,
    pub num_workers: usize,
    pub repetitions: usize,
    pub latency_us: u64,
    pub compute_us: u64,
    pub counters: BenchCounters,
    /// Counted reads times injected latency.
    pub read_floor_ns: u64,
    pub wall_ns: Vec<u64>,
    pub median_wall_ns: u64,
    pub samples_per_sec: f64,
    pub producer_blocked_ns: u64,
    pub consumer_blocked_ns: u64,
}

impl BenchReport {
    /// One `key value` pair per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let c = &self.counters;
        let lines = [
            ("mode", self.mode.name().to_string()),
            ("loader", self.loader.name().to_string()),
            ("order", self.order.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("num_workers", self.num_workers.to_string()),
            ("repetitions", self.repetitions.to_string()),
            ("latency_us", self.latency_us.to_string()),
            ("compute_us", self.compute_us.to_string()),
            ("batches", c.batches.to_string()),
            ("samples", c.samples.to_string()),
            ("file_opens", c.file_opens.to_string()),
            ("file_reads", c.file_reads.to_string()),
            ("page_fetches", c.page_fetches.to_string()),
            ("page_reloads", c.page_reloads.to_string()),
            ("label_digest", format!("{:016x}", c.label_digest)),
            ("read_floor_ms", format!("{:.3}", self.read_floor_ns as f64 / 1e6)),
            ("median_wall_ms", format!("{:.3}", self.median_wall_ns as f64 / 1e6)),
            ("samples_per_sec", format!("{:.1}", self.samples_per_sec)),
            ("producer_blocked_ms", format!("{:.3}", self.producer_blocked_ns as f64 / 1e6)),
            ("consumer_blocked_ms", format!("{:.3}", self.consumer_blocked_ns as f64 / 1e6)),
        ];
        lines.iter().map(|(k, v)| format!("{k} {v}\n")).collect()
    }
}

fn fnv(digest: &mut u64, v: i64) {
    for b in v.to_le_bytes() {
        *digest ^= b as u64;
        *digest = digest.wrapping_mul(0x100_0000_01b3);
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Stand-in for a training step.
pub fn busy_compute(d: Duration) {
    let end = Instant::now() + d;
    while Instant::now() < end {
        std::hint::spin_loop();
    }
}

struct RunResult {
    counters: BenchCounters,
    wall: Duration,
    producer_blocked_ns: u64,
    consumer_blocked_ns: u64,
}

pub fn run_scenario(scenario: &BenchScenario, data: &BenchData) -> Result<BenchReport> {
    if scenario.repetitions < 3 {
        return Err(Error::Config("repetitions must be >= 3".into()));
    }
    if scenario.batch_size == 0 || scenario.num_workers == 0 {
        return Err(Error::Config("batch_size and num_workers must be >= 1".into()));
    }
    let pipeline = parse_pipeline(&scenario.pipeline)?;
    let mut runs = Vec::with_capacity(scenario.repetitions);
    for _ in 0..scenario.repetitions {
        let r = match scenario.loader {
            LoaderKind::Container => {
                let path = data
                    .container
                    .as_ref()
                    .ok_or_else(|| Error::Config("container benchmark needs a container file".into()))?;
                run_container(scenario, path, &pipeline)?
            }
            LoaderKind::FilePerSample => {
                let dir = data
                    .directory
                    .as_ref()
                    .ok_or_else(|| Error::Config("file-per-sample benchmark needs a directory source".into()))?;
                run_file_per_sample(scenario, dir, &pipeline)?
            }
        };
        runs.push(r);
    }
    let counters = runs[0].counters;
    if runs.iter().any(|r| r.counters != counters) {
        return Err(Error::Config("I/O counters differ between repetitions".into()));
    }
    let median = |mut v: Vec<u64>| {
        v.sort_unstable();
        v[v.len() / 2]
    };
    let wall_ns: Vec<u64> = runs.iter().map(|r| r.wall.as_nanos() as u64).collect();
    let median_wall_ns = median(wall_ns.clone());
    let reads = match scenario.loader {
        LoaderKind::Container => counters.page_fetches,
        LoaderKind::FilePerSample => counters.file_reads,
    };
    Ok(BenchReport {
        mode: scenario.mode,
        loader: scenario.loader,
        order: scenario.order.kind.name(),
        batch_size: scenario.batch_size,
        num_workers: scenario.num_workers,
        repetitions: scenario.repetitions,
        latency_us: scenario.latency.as_micros() as u64,
        compute_us: scenario.compute_per_batch.as_micros() as u64,
        counters,
        read_floor_ns: reads * scenario.latency.as_nanos() as u64,
        samples_per_sec: counters.samples as f64 / (median_wall_ns.max(1) as f64 / 1e9),
        median_wall_ns,
        wall_ns,
        producer_blocked_ns: median(runs.iter().map(|r| r.producer_blocked_ns).collect()),
        consumer_blocked_ns: median(runs.iter().map(|r| r.consumer_blocked_ns).collect()),
    })
}

fn container_strategy(scenario: &BenchScenario, ds: &Dataset) -> ReadStrategy {
    if let Some(s) = scenario.strategy {
        return s;
    }
    let quasi = if scenario.order.kind == OrderKind::QuasiRandom {
        scenario.batch_size
    } else {
        0
    };
    let capacity = scenario
        .cache_pages
        .unwrap_or_else(|| (2 * DEFAULT_PREFETCH_WINDOW).max(quasi).max(ds.max_pages_per_sample()));
    ReadStrategy::ProcessCache {
        capacity,
        window: DEFAULT_PREFETCH_WINDOW,
    }
}

fn run_container(scenario: &BenchScenario, path: &Path, pipeline: &[Arc<dyn Transform>]) -> Result<RunResult> {
    let probe = Dataset::open(path, ReadStrategy::Direct)?;
    let strategy = container_strategy(scenario, &probe);
    drop(probe);
    let started = Instant::now();
    let ds = Arc::new(Dataset::open_with_latency(path, strategy, scenario.latency)?);
    let label_field = ds.header().field_index("label");
    let mut digest = FNV_OFFSET;

    if scenario.mode == BenchMode::ReadOnly {
        let page_map = ds.page_map()?;
        let order = scenario
            .order
            .next_epoch(0, ds.num_samples(), &page_map, scenario.batch_size)
            .indices;
        let image = ds
            .header()
            .field_index("image")
            .ok_or_else(|| Error::Config("container has no image field".into()))?;
        let session = match strategy {
            ReadStrategy::ProcessCache { .. } => Some(ds.session(&order)?),
            _ => None,
        };
        let mut touched = 0u64;
        std::thread::scope(|s| -> Result<()> {
            let prefetch = session.as_ref().map(|sess| s.spawn(|| sess.run_prefetch()));
            let mut scratch = Vec::new();
            let mut run = || -> Result<()> {
                for (step, &i) in order.iter().enumerate() {
                    let _g = session.as_ref().map(|sess| sess.step_guard(step));
                    if let Some(f) = label_field {
                        if let Cell::Int(v) = ds.cell(i, f)? {
                            fnv(&mut digest, v);
                        }
                    }
                    if let Some((offset, len)) = ds.heap_ref(i, image)? {
                        let bytes = ds.read_blob(session.as_ref(), step, offset, len, &mut scratch)?;
                        touched = touched.wrapping_add(bytes[0] as u64 + bytes[bytes.len() - 1] as u64);
                    }
                }
                Ok(())
            };
            let r = run();
            if let Some(sess) = &session {
                if r.is_err() {
                    sess.stop();
                }
            }
            if let Some(h) = prefetch {
                h.join().expect("prefetch thread panicked")?;
            }
            r
        })?;
        std::hint::black_box(touched);
        let stats = session.as_ref().map(|s| s.stats()).unwrap_or_default();
        let n = order.len() as u64;
        return Ok(RunResult {
            counters: BenchCounters {
                batches: n.div_ceil(scenario.batch_size as u64),
                samples: n,
                file_opens: ds.io_stats().file_opens,
                file_reads: 0,
                page_fetches: stats.fetch_count,
                page_reloads: stats.reload_count,
                label_digest: digest,
            },
            wall: started.elapsed(),
            producer_blocked_ns: 0,
            consumer_blocked_ns: 0,
        });
    }

    let mut cfg = LoaderConfig::new(scenario.batch_size, scenario.num_workers, scenario.order, pipeline.to_vec());
    cfg.label_field = label_field.map(|_| "label".to_string());
    let mut loader = Loader::new(ds.clone(), cfg)?;
    let stats = loader.run_epoch(0, |b| {
        for l in b.labels() {
            fnv(&mut digest, l);
        }
        std::hint::black_box(b.data().first());
        if scenario.mode == BenchMode::FullLoop {
            busy_compute(scenario.compute_per_batch);
        }
        Ok(())
    })?;
    Ok(RunResult {
        counters: BenchCounters {
            batches: stats.batches,
            samples: stats.samples,
            file_opens: ds.io_stats().file_opens,
            file_reads: 0,
            page_fetches: stats.page_fetches,
            page_reloads: stats.page_reloads,
            label_digest: digest,
        },
        wall: started.elapsed(),
        producer_blocked_ns: stats.producer_blocked_ns,
        consumer_blocked_ns: stats.consumer_blocked_ns,
    })
}

/// One batch from the file-per-sample baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineBatch {
    pub index: usize,
    pub indices: Vec<usize>,
    pub labels: Vec<i64>,
    /// Outputs back to back, each trimmed to its own shape.
    pub data: Vec<u8>,
}

/// Conventional loader over a `label/file` tree: every sample is its own file
/// (open, read, close), every transform writes a fresh buffer, and each
/// worker assembles whole batches on its own.
#[derive(Debug)]
pub struct FilePerSampleLoader {
    files: Vec<(PathBuf, i64)>,
    input: InputSpec,
    latency: Duration,
    opens: AtomicU64,
    reads: AtomicU64,
}

impl FilePerSampleLoader {
    pub fn open(root: impl AsRef<Path>, latency: Duration) -> Result<Self> {
        let src = DirectorySource::open(root)?;
        let input = InputSpec::Encoded {
            max_height: src.max_height,
            max_width: src.max_width,
            channels: src.channels,
        };
        Ok(Self {
            files: src.files,
            input,
            latency,
            opens: AtomicU64::new(0),
            reads: AtomicU64::new(0),
        })
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn file_opens(&self) -> u64 {
        self.opens.load(Ordering::Relaxed)
    }

    pub fn file_reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    fn read_file(&self, i: usize) -> Result<Vec<u8>> {
        self.opens.fetch_add(1, Ordering::Relaxed);
        let mut f = File::open(&self.files[i].0)?;
        let mut bytes = Vec::new();
        spin_wait(self.latency);
        f.read_to_end(&mut bytes)?;
        self.reads.fetch_add(1, Ordering::Relaxed);
        Ok(bytes)
    }

    fn build_batch(
        &self,
        index: usize,
        indices: &[usize],
        pipeline: Option<&[Arc<dyn Transform>]>,
        seed: u64,
        epoch: u64,
    ) -> Result<BaselineBatch> {
        let mut batch = BaselineBatch {
            index,
            indices: indices.to_vec(),
            labels: Vec::with_capacity(indices.len()),
            data: Vec::new(),
        };
        for &i in indices {
            let bytes = self.read_file(i)?;
            batch.labels.push(self.files[i].1);
            let Some(pipeline) = pipeline else {
                std::hint::black_box(bytes.last());
                continue;
            };
            let image = decode_raster(&bytes)?;
            let view = BlobView {
                height: image.height,
                width: image.width,
                channels: image.channels,
                codec: CodecId::Raw,
                payload: &image.pixels,
            };
            let ctx = SampleContext {
                seed,
                epoch,
                index: i as u64,
            };
            let (_, _, out) = run_unfused(pipeline, &self.input, Value::Encoded(view), ctx).map_err(|e| {
                Error::SampleFailed {
                    index: i as u64,
                    position: batch.labels.len() - 1,
                    message: e.0,
                }
            })?;
            batch.data.extend_from_slice(&out);
        }
        Ok(batch)
    }

    /// Streams one epoch's batches, in order, to `f`. `pipeline = None` only reads.
    pub fn run_epoch(
        &self,
        epoch: u64,
        order: TraversalOrder,
        batch_size: usize,
        num_workers: usize,
        pipeline: Option<&[Arc<dyn Transform>]>,
        mut f: impl FnMut(BaselineBatch) -> Result<()>,
    ) -> Result<()> {
        if order.kind == OrderKind::QuasiRandom {
            return Err(Error::Config("file-per-sample storage has no pages for quasi-random order".into()));
        }
        let indices = order.next_epoch(epoch, self.len(), &[], batch_size).indices;
        let batches: Vec<&[usize]> = indices.chunks(batch_size).collect();
        let (tx, rx) = mpsc::sync_channel::<Result<BaselineBatch>>(2 * num_workers);
        std::thread::scope(|s| {
            for w in 0..num_workers {
                let tx = tx.clone();
                let batches = &batches;
                s.spawn(move || {
                    for b in (w..batches.len()).step_by(num_workers) {
                        let r = self.build_batch(b, batches[b], pipeline, order.seed, epoch);
                        let failed = r.is_err();
                        if tx.send(r).is_err() || failed {
                            return;
                        }
                    }
                });
            }
            drop(tx);
            let mut pending = BTreeMap::new();
            let mut next = 0;
            for r in rx.iter() {
                let batch = r?;
                pending.insert(batch.index, batch);
                while let Some(b) = pending.remove(&next) {
                    f(b)?;
                    next += 1;
                }
            }
            if next != batches.len() {
                return Err(Error::Config("baseline workers stopped early".into()));
            }
            Ok(())
        })
    }
}

fn run_file_per_sample(scenario: &BenchScenario, dir: &Path, pipeline: &[Arc<dyn Transform>]) -> Result<RunResult> {
    let started = Instant::now();
    let loader = FilePerSampleLoader::open(dir, scenario.latency)?;
    let mut digest = FNV_OFFSET;
    let mut counters = BenchCounters::default();
    let pipeline = (scenario.mode != BenchMode::ReadOnly).then_some(pipeline);
    loader.run_epoch(
        0,
        scenario.order,
        scenario.batch_size,
        scenario.num_workers,
        pipeline,
        |b| {
            for &l in &b.labels {
                fnv(&mut digest, l);
            }
            counters.batches += 1;
            counters.samples += b.indices.len() as u64;
            if scenario.mode == BenchMode::FullLoop {
                busy_compute(scenario.compute_per_batch);
            }
            Ok(())
        },
    )?;
    counters.file_opens = loader.file_opens();
    counters.file_reads = loader.file_reads();
    counters.label_digest = digest;
    Ok(RunResult {
        counters,
        wall: started.elapsed(),
        producer_blocked_ns: 0,
        consumer_blocked_ns: 0,
    })
}

/// Writes a synthetic `NxHxWxC` dataset as a container, and also as a
/// `label/file` tree when `with_directory` is set (the container is then
/// built from that tree).
pub fn prepare_synthetic(
    spec: &str,
    seed: u64,
    root: &Path,
    page_size: u64,
    num_workers: usize,
    with_directory: bool,
) -> Result<BenchData> {
    let src = SyntheticSource::parse(spec, seed)?;
    std::fs::create_dir_all(root)?;
    let container = root.join(format!("synthetic.{}", crate::format::FILE_EXTENSION));
    let cfg = WriterConfig {
        page_size,
        num_workers,
        compress_probability: 0.5,
        seed,
        ..WriterConfig::default()
    };
    let directory = if with_directory {
        let dir = root.join("files");
        export_directory(&src, &dir)?;
        let dsrc = DirectorySource::open(&dir)?;
        write_dataset(&dsrc, &dsrc.schema(), &cfg, &container)?;
        Some(dir)
    } else {
        write_dataset(&src, &src.schema(), &cfg, &container)?;
        None
    };
    Ok(BenchData {
        container: Some(container),
        directory,
    })
}
