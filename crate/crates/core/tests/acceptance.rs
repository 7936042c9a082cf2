//! Release acceptance suite. Runs every criterion in sequence (timings are
//! taken on an otherwise idle process), prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{CountingAlloc, RefBumpAllocator};
use fastds::bench::{prepare_synthetic, run_scenario, BenchData, BenchMode, BenchScenario, LoaderKind};
use fastds::cache::{lru_stats, PageSchedule};
use fastds::codecs::CodecId;
use fastds::format::{decode_header, AllocationTable, Cell, FieldDescriptor, FieldType, MIN_PAGE_SIZE};
use fastds::loader::{Loader, LoaderConfig};
use fastds::memory::MemoryTracker;
use fastds::pipeline::{
    parse_pipeline, plan, Category, ElemType, InputSpec, OpaqueFn, Shape, TensorRef, TensorSpec, Transform, TransformError,
};
use fastds::reader::{validate_file, Dataset, ReadStrategy};
use fastds::rng::SplitMix64;
use fastds::source::{FieldValue, InMemorySource, SyntheticSource};
use fastds::traversal::{OrderKind, TraversalOrder};
use fastds::writer::{report_waste, write_dataset, WriterConfig};

#[global_allocator]
static GLOBAL: CountingAlloc = CountingAlloc;

type Check = Result<String, String>;
type Criterion = (&'static str, fn(&Path) -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let started = Instant::now();
    let criteria: [Criterion; 9] = [
        ("format round trip", format_round_trip),
        ("allocation oracle", allocation_oracle),
        ("traversal coverage", traversal_coverage),
        ("cache optimality", cache_optimality),
        ("pipeline equivalence", pipeline_equivalence),
        ("steady-state allocation freedom", allocation_freedom),
        ("ring and loader safety", ring_safety),
        ("constant memory across worker counts", constant_memory),
        ("benchmark floors and throughput", bench_floors_and_throughput),
    ];
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (name, check) in criteria {
        let dir = tempfile::tempdir().expect("temp dir");
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| check(dir.path())))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into())));
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => writeln!(out, "PASS  {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                writeln!(out, "FAIL  {name} ({secs:.1}s): {why}")
            }
        }
        .unwrap();
        out.flush().unwrap();
    }
    writeln!(out, "acceptance: {} of 9 passed in {:.1}s", 9 - failed, started.elapsed().as_secs_f64()).unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}

fn format_round_trip(dir: &Path) -> Check {
    let started = Instant::now();
    let mut rng = SplitMix64::new(2024);
    let samples: Vec<Vec<FieldValue>> = (0..10_000).map(|_| common::mixed_sample(&mut rng)).collect();
    let schema = common::mixed_schema();
    let image = schema.iter().position(|f| f.name == "image").unwrap();
    let src = InMemorySource::new(samples.clone());
    let mut pages = Vec::new();
    for page_size in [MIN_PAGE_SIZE, 8 << 20] {
        let path = dir.join(format!("rt_{page_size}.bbox"));
        let cfg = WriterConfig {
            page_size,
            num_workers: 4,
            compress_probability: 0.5,
            seed: 7,
            ..WriterConfig::default()
        };
        write_dataset(&src, &schema, &cfg, &path).map_err(|e| e.to_string())?;
        let report = validate_file(&path).map_err(|e| e.to_string())?;
        ensure!(report.is_valid(), "{page_size}-byte pages: validation failed: {report:?}");
        let ds = Dataset::open(&path, ReadStrategy::OsCache).map_err(|e| e.to_string())?;
        ensure!(ds.num_samples() == samples.len(), "sample count {}", ds.num_samples());
        let (mut raw, mut rle) = (0, 0);
        for (i, want) in samples.iter().enumerate() {
            let got = ds.get_sample(i).map_err(|e| e.to_string())?;
            ensure!(got.len() == want.len() && got.iter().zip(want).all(|(a, b)| a.bit_eq(b)), "sample {i} differs");
            match ds.cell(i, image).map_err(|e| e.to_string())? {
                Cell::Image(c) if c.codec == CodecId::Raw => raw += 1,
                Cell::Image(c) if c.codec == CodecId::Rle => rle += 1,
                other => return Err(format!("sample {i}: unexpected image cell {other:?}")),
            }
        }
        ensure!(raw > 0 && rle > 0, "both lossless codecs must occur ({raw} raw, {rle} rle)");
        pages.push(ds.num_pages());
    }
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("10000 samples bit-identical at 64 KiB ({} pages) and 8 MiB ({} pages)", pages[0], pages[1]))
}

fn allocation_oracle(dir: &Path) -> Check {
    let schema = vec![FieldDescriptor::new("blob", FieldType::VarBytes)];
    let path = dir.join("alloc.bbox");
    let mut rng = SplitMix64::new(99);
    let mut oversize = 0;
    for trace in 0..1000 {
        let n = 1 + rng.next_below(16) as usize;
        let lens: Vec<u64> = (0..n)
            .map(|_| {
                if rng.next_below(5) == 0 {
                    1 + rng.next_below(3 * MIN_PAGE_SIZE)
                } else {
                    1 + rng.next_below(20_000)
                }
            })
            .collect();
        oversize += lens.iter().filter(|&&l| l > MIN_PAGE_SIZE).count();
        let src = InMemorySource::new(lens.iter().map(|&l| vec![FieldValue::Bytes(vec![7; l as usize])]).collect());
        let cfg = WriterConfig {
            page_size: MIN_PAGE_SIZE,
            num_workers: 1,
            ..WriterConfig::default()
        };
        let written = write_dataset(&src, &schema, &cfg, &path).map_err(|e| e.to_string())?;
        let ds = Dataset::open(&path, ReadStrategy::Direct).map_err(|e| e.to_string())?;
        let mut oracle = RefBumpAllocator::new(ds.header().heap_offset, MIN_PAGE_SIZE);
        for (i, &len) in lens.iter().enumerate() {
            let got = ds.heap_ref(i, 0).map_err(|e| e.to_string())?;
            ensure!(got == Some((oracle.alloc(len), len)), "trace {trace} blob {i}: {got:?}");
        }
        ensure!(ds.num_pages() == oracle.pages(), "trace {trace}: {} pages, oracle {}", ds.num_pages(), oracle.pages());
        let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
        let h = decode_header(&bytes).map_err(|e| e.to_string())?;
        let table = AllocationTable::decode(&bytes[h.alloc_table_offset as usize..]).map_err(|e| e.to_string())?;
        let heap = h.num_pages() * h.page_size;
        let used: u64 = table.regions.iter().map(|r| r.len).sum();
        let waste = (heap - used) as f64 / heap as f64;
        ensure!(written.waste_fraction == waste, "trace {trace}: waste {} vs {waste}", written.waste_fraction);
        ensure!(report_waste(&path).map_err(|e| e.to_string())? == waste, "trace {trace}: reported waste");
    }
    Ok(format!("1000 traces match the bump oracle ({oversize} oversize blobs); waste exact"))
}

fn traversal_coverage(_: &Path) -> Check {
    let mut rng = SplitMix64::new(5);
    let mut quasi_pages = 0;
    for config in 0..1000 {
        let n = rng.next_below(2000) as usize;
        let batch = 1 + rng.next_below(64) as usize;
        let num_pages = 1 + rng.next_below(n as u64 / 4 + 1);
        let mut page_map: Vec<u64> = (0..n).map(|_| rng.next_below(num_pages)).collect();
        if rng.next_below(2) == 0 {
            page_map.sort_unstable();
        }
        let seed = rng.next_u64();
        for kind in OrderKind::ALL {
            let order = TraversalOrder::new(kind, seed);
            let epoch = rng.next_below(8);
            let indices = order.next_epoch(epoch, n, &page_map, batch).indices;
            ensure!(common::is_permutation(&indices, n), "config {config} {kind:?}: not a permutation");
        }
        let (o, trace) = TraversalOrder::new(OrderKind::QuasiRandom, seed).next_epoch_traced(0, n, &page_map, batch);
        let mut distinct = page_map.clone();
        distinct.sort_unstable();
        distinct.dedup();
        common::check_quasi_trace(&trace, distinct.len(), batch).map_err(|e| format!("config {config}: {e}"))?;
        ensure!(trace.emits.iter().map(|e| e.sample).eq(o.indices.iter().copied()), "config {config}: trace order");
        quasi_pages += distinct.len();
    }
    Ok(format!("1000 configs x 3 orders are permutations; quasi-random loaded {quasi_pages} pages once each"))
}

fn cache_optimality(dir: &Path) -> Check {
    // 64 samples, one per 64 KiB page, so a page trace is also a sample order.
    let schema = vec![FieldDescriptor::new("blob", FieldType::VarBytes)];
    let src = InMemorySource::new((0..64).map(|i| vec![FieldValue::Bytes(vec![i as u8; 40_000])]).collect());
    let path = dir.join("pages.bbox");
    let cfg = WriterConfig {
        page_size: MIN_PAGE_SIZE,
        num_workers: 1,
        ..WriterConfig::default()
    };
    write_dataset(&src, &schema, &cfg, &path).map_err(|e| e.to_string())?;
    let probe = Dataset::open(&path, ReadStrategy::Direct).map_err(|e| e.to_string())?;
    ensure!(probe.page_map().map_err(|e| e.to_string())? == (0..64).collect::<Vec<u64>>(), "sample k must sit on page k");

    let mut rng = SplitMix64::new(17);
    let (mut saved, mut strictly_better) = (0u64, 0);
    for t in 0..1000 {
        let pages = 1 + rng.next_below(64);
        let len = 1 + rng.next_below(512) as usize;
        let cap = 1 + rng.next_below(16) as usize;
        let trace: Vec<u64> = (0..len).map(|_| rng.next_below(pages)).collect();
        let plan = PageSchedule::from_trace(&trace, cap).map_err(|e| e.to_string())?.stats();
        let (fetches, reloads) = common::belady_sim(&trace, cap);
        ensure!((plan.fetch_count, plan.reload_count) == (fetches, reloads), "trace {t}: plan {plan:?} vs oracle ({fetches}, {reloads})");
        let ds = Dataset::open(&path, ReadStrategy::process_cache(cap)).map_err(|e| e.to_string())?;
        let order: Vec<usize> = trace.iter().map(|&p| p as usize).collect();
        let mut ok = true;
        let run = ds
            .run_schedule(&order, |i, v| {
                ok &= v[0] == FieldValue::Bytes(vec![i as u8; 40_000]);
                Ok(())
            })
            .map_err(|e| e.to_string())?;
        ensure!(ok, "trace {t}: wrong bytes served");
        ensure!((run.fetch_count, run.reload_count) == (fetches, reloads), "trace {t}: cache {run:?} vs oracle ({fetches}, {reloads})");
        let lru = lru_stats(&trace, cap);
        ensure!((lru.fetch_count, lru.reload_count) == common::lru_sim(&trace, cap), "trace {t}: LRU model");
        ensure!(reloads <= lru.reload_count, "trace {t}: {reloads} reloads > LRU {}", lru.reload_count);
        saved += lru.reload_count - reloads;
        strictly_better += (reloads < lru.reload_count) as usize;
    }
    Ok(format!("1000 traces equal the farthest-next-use oracle; {saved} reloads fewer than LRU ({strictly_better} traces strictly better)"))
}

fn noise_opaque() -> Arc<dyn Transform> {
    Arc::new(OpaqueFn::new(
        "noise",
        |t| Ok(TensorSpec { shape: t.shape, elem: ElemType::F32 }),
        |t: TensorRef<'_>, out: &mut [u8], rng: &mut SplitMix64| -> Result<Shape, TransformError> {
            for (i, dst) in out.chunks_exact_mut(4).take(t.shape.elements()).enumerate() {
                let v = t.get_f32(i) + rng.next_f64() as f32;
                dst.copy_from_slice(&v.to_le_bytes());
            }
            Ok(t.shape)
        },
    ))
}

fn pipeline_equivalence(dir: &Path) -> Check {
    let structural: Vec<Arc<dyn Transform>> = vec![
        parse_pipeline("decode").unwrap()[0].clone(),
        parse_pipeline("crop:8,8").unwrap()[0].clone(),
        noise_opaque(),
        parse_pipeline("flip:0.5").unwrap()[0].clone(),
    ];
    let input = InputSpec::Encoded { max_height: 12, max_width: 12, channels: 3 };
    let p = plan(structural.clone(), input, 4, 3).map_err(|e| e.to_string())?;
    let stages: Vec<_> = p.stages.iter().map(|s| (s.category, s.transforms.clone())).collect();
    ensure!(
        stages == vec![(Category::Fusible, 0..2), (Category::Opaque, 2..3), (Category::Fusible, 3..4)],
        "[F,F,O,F] planned as {stages:?}"
    );

    let path = common::random_dataset(dir, 1000, 31);
    let with = |spec: &str, at: usize, t: Arc<dyn Transform>| {
        let mut v = parse_pipeline(spec).unwrap();
        v.insert(at, t);
        v
    };
    let identity = || -> Arc<dyn Transform> { Arc::new(OpaqueFn::map_f32("identity", |x| x)) };
    let compositions: Vec<(String, Vec<Arc<dyn Transform>>)> = [
        "decode",
        "decode|cast",
        "decode|crop:8,8",
        "decode|flip:0.5",
        "decode|resize:10,7",
        "decode|normalize:127.5,64",
        "decode|normalize:120,110,100,50,60,70",
        "decode|crop:8,8|flip:0.5|normalize:127.5,64",
        "decode|resize:16,16|crop:9,9|flip:0.3|cast",
        "decode|flip:1|resize:5,5|normalize:0,1",
    ]
    .into_iter()
    .map(|s| (s.to_string(), parse_pipeline(s).unwrap()))
    .chain([
        ("decode|crop:8,8|<noise>|flip:0.5".to_string(), structural),
        ("decode|flip:0.5|<identity>|normalize".to_string(), with("decode|flip:0.5|normalize:127.5,64", 2, identity())),
        ("decode|crop:6,6|<noise>|<identity>|cast".to_string(), {
            let mut v = with("decode|crop:6,6|cast", 2, noise_opaque());
            v.insert(3, identity());
            v
        }),
        ("decode|<noise>|flip:0.5|crop:4,4|normalize".to_string(), with("decode|flip:0.5|crop:4,4|normalize:127.5,64", 1, noise_opaque())),
    ])
    .collect();
    for (name, pipeline) in &compositions {
        catch_unwind(AssertUnwindSafe(|| common::check_against_reference(&path, pipeline.clone(), 16, 3)))
            .map_err(|_| format!("{name}: fused output differs from the reference"))?;
    }
    Ok(format!("{} compositions x 1000 samples bit-exact; [F,F,O,F] gives 3 stages", compositions.len()))
}

fn allocation_freedom(dir: &Path) -> Check {
    let mut batches = 0;
    for (strategy, pipeline, kind) in [
        (ReadStrategy::OsCache, "decode|crop:12,12|flip:0.5|normalize:127.5,64", OrderKind::Random),
        (ReadStrategy::Direct, "decode|resize:8,8|cast", OrderKind::Sequential),
        (ReadStrategy::process_cache(4), "decode|flip:0.5|normalize:127.5,64", OrderKind::QuasiRandom),
    ] {
        let (allocs, n) = common::steady_state_allocations(dir, strategy, pipeline, kind);
        ensure!(n == 1000, "{n} batches");
        ensure!(allocs == 0, "{strategy:?} with {pipeline}: {allocs} allocations after batch 1");
        batches += n;
    }
    Ok(format!("0 allocations across {batches} steady-state batches (3 read strategies)"))
}

fn ring_safety(dir: &Path) -> Check {
    let mut states = 0;
    for slots in 1..=3 {
        for batches in 1..=6 {
            let r = common::model_check_ring(slots, batches).map_err(|e| format!("S={slots} B={batches}: {e}"))?;
            ensure!(r.terminal_states == 1, "S={slots}: {} terminal states", r.terminal_states);
            states += r.states;
        }
    }
    let base = common::stress_ring(100_000, 4, 1, 3, 77);
    ensure!(base.deliveries.iter().all(|&d| d == 1), "a sample was lost or duplicated");
    for workers in [2, 8] {
        let r = common::stress_ring(100_000, 4, workers, 3, 77);
        ensure!(r.deliveries.iter().all(|&d| d == 1), "{workers} workers: a sample was lost or duplicated");
        ensure!(r.checksums == base.checksums, "{workers} workers: checksums differ");
    }

    let path = common::random_dataset(dir, 500, 8);
    let pipeline = "decode|crop:8,8|flip:0.5|normalize:127.5,64";
    for kind in OrderKind::ALL {
        let run = |workers| {
            let ds = Arc::new(Dataset::open(&path, ReadStrategy::process_cache(4)).unwrap());
            let cfg = LoaderConfig::new(7, workers, TraversalOrder::new(kind, 3), parse_pipeline(pipeline).unwrap());
            let mut l = Loader::new(ds, cfg).unwrap();
            let mut out = Vec::new();
            l.run_epoch(0, |b| {
                for p in 0..b.len() {
                    let t = b.sample(p);
                    out.push((b.index(p), t.shape, t.bytes.to_vec()));
                }
                Ok(())
            })
            .unwrap();
            out
        };
        let one = run(1);
        let mut seen: Vec<u64> = one.iter().map(|s| s.0).collect();
        seen.sort_unstable();
        ensure!(seen == (0..500).collect::<Vec<_>>(), "{kind:?}: loader delivery not exactly-once");
        ensure!(run(2) == one && run(8) == one, "{kind:?}: loader output depends on worker count");
    }
    Ok(format!("{states} model states; 3 x 100000 jittered batches exactly-once, checksums equal for 1/2/8 workers; loader outputs equal"))
}

fn constant_memory(dir: &Path) -> Check {
    let src = SyntheticSource::new(3000, 32, 32, 3, 12);
    let path = dir.join("mem.bbox");
    let cfg = WriterConfig {
        page_size: MIN_PAGE_SIZE,
        num_workers: 4,
        compress_probability: 0.5,
        ..WriterConfig::default()
    };
    write_dataset(&src, &src.schema(), &cfg, &path).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    for strategy in [ReadStrategy::OsCache, ReadStrategy::Direct, ReadStrategy::process_cache(32)] {
        let peak = |workers: usize| {
            let memory = MemoryTracker::new();
            let ds = Arc::new(Dataset::open(&path, strategy).unwrap());
            let order = TraversalOrder::new(OrderKind::QuasiRandom, 2);
            let cfg = LoaderConfig::new(32, workers, order, parse_pipeline("decode|crop:24,24|flip:0.5|normalize:127.5,64").unwrap());
            let mut l = Loader::with_memory(ds, cfg, memory.clone()).unwrap();
            l.run_epoch(0, |_| Ok(())).unwrap();
            (memory.peak(), l.slot_bytes())
        };
        let (one, slot) = peak(1);
        let (eight, _) = peak(8);
        ensure!(eight.abs_diff(one) <= slot, "{strategy:?}: peak {one} B at 1 worker vs {eight} B at 8, slot {slot} B");
        lines.push(format!("{one}->{eight} B"));
    }
    Ok(format!("peak tracked bytes 1->8 workers (os-cache, direct, process-cache): {}", lines.join(", ")))
}

fn within(measured: u64, floor: u64, tol: f64) -> bool {
    (measured as f64 - floor as f64).abs() <= tol * floor as f64
}

fn bench_floors_and_throughput(dir: &Path) -> Check {
    let started = Instant::now();
    let ms = Duration::from_millis(1);
    let mut notes = Vec::new();

    // Injected latency: one worker, reads only, so wall time is the read floor.
    let data = prepare_synthetic("10000x32x32x3", 3, &dir.join("floor"), MIN_PAGE_SIZE, 4, true).map_err(|e| e.to_string())?;
    let base = BenchScenario {
        mode: BenchMode::ReadOnly,
        latency: ms,
        num_workers: 1,
        ..BenchScenario::default()
    };
    let files = run_scenario(&BenchScenario { loader: LoaderKind::FilePerSample, ..base.clone() }, &data).map_err(|e| e.to_string())?;
    ensure!(files.counters.file_reads == 10_000 && files.counters.file_opens == 10_000, "baseline counters {:?}", files.counters);
    ensure!(files.read_floor_ns == 10_000 * 1_000_000, "baseline floor {} ns", files.read_floor_ns);
    ensure!(within(files.median_wall_ns, files.read_floor_ns, 0.2), "baseline {} ms vs floor {} ms", files.median_wall_ns / 1_000_000, files.read_floor_ns / 1_000_000);
    // Quasi-random order with a batch-sized cache touches each page once.
    let base = BenchScenario {
        order: TraversalOrder::new(OrderKind::QuasiRandom, 0),
        ..base
    };
    let container = run_scenario(&base, &data).map_err(|e| e.to_string())?;
    let pages = Dataset::open(data.container.as_ref().unwrap(), ReadStrategy::Direct).map_err(|e| e.to_string())?.num_pages();
    ensure!(container.counters.page_fetches == pages && container.counters.page_reloads == 0, "container counters {:?}", container.counters);
    ensure!(container.read_floor_ns == pages * 1_000_000, "container floor {} ns", container.read_floor_ns);
    ensure!(within(container.median_wall_ns, container.read_floor_ns, 0.2), "container {} us vs floor {} us", container.median_wall_ns / 1000, container.read_floor_ns / 1000);
    notes.push(format!(
        "latency floors: files {:.2}s/{:.2}s, container {:.1}ms/{:.1}ms over {pages} pages",
        files.median_wall_ns as f64 / 1e9,
        files.read_floor_ns as f64 / 1e9,
        container.median_wall_ns as f64 / 1e6,
        container.read_floor_ns as f64 / 1e6
    ));

    // Same data on 8 MiB pages: the counted floor, wall time for reference.
    let big = prepare_synthetic("10000x32x32x3", 3, &dir.join("big"), 8 << 20, 4, false).map_err(|e| e.to_string())?;
    let big_pages = Dataset::open(big.container.as_ref().unwrap(), ReadStrategy::Direct).map_err(|e| e.to_string())?.num_pages();
    let r = run_scenario(&base, &big).map_err(|e| e.to_string())?;
    ensure!(r.counters.page_fetches == big_pages && r.read_floor_ns == big_pages * 1_000_000, "8 MiB counters {:?}", r.counters);
    notes.push(format!("8 MiB pages: {big_pages} fetches, floor {big_pages}ms, wall {:.1}ms", r.median_wall_ns as f64 / 1e6));
    drop((data, big));

    // Throughput on local storage, no injected latency.
    let data: BenchData = prepare_synthetic("100000x32x32x3", 4, &dir.join("tp"), 8 << 20, 4, true).map_err(|e| e.to_string())?;
    let tp = BenchScenario {
        mode: BenchMode::ReadProcess,
        num_workers: 4,
        strategy: Some(ReadStrategy::OsCache),
        ..BenchScenario::default()
    };
    let c = run_scenario(&tp, &data).map_err(|e| e.to_string())?;
    let f = run_scenario(&BenchScenario { loader: LoaderKind::FilePerSample, ..tp.clone() }, &data).map_err(|e| e.to_string())?;
    ensure!(c.counters.label_digest == f.counters.label_digest, "loaders disagree on the label sequence");
    ensure!(c.counters.file_opens == 1 && f.counters.file_opens == 100_000, "open counts {} vs {}", c.counters.file_opens, f.counters.file_opens);
    let ratio = c.samples_per_sec / f.samples_per_sec;
    let quasi = run_scenario(
        &BenchScenario {
            strategy: None,
            order: TraversalOrder::new(OrderKind::QuasiRandom, 0),
            ..tp.clone()
        },
        &data,
    )
    .map_err(|e| e.to_string())?;
    notes.push(format!(
        "throughput: container {:.0}/s vs files {:.0}/s = {ratio:.2}x (process cache + quasi-random {:.0}/s)",
        c.samples_per_sec, f.samples_per_sec, quasi.samples_per_sec
    ));
    ensure!(ratio >= 2.0, "container/file-per-sample throughput {ratio:.2} < 2; {}", notes.join("; "));
    let elapsed = started.elapsed();
    ensure!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(notes.join("; "))
}
