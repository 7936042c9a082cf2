//! `fastds`: create, inspect, validate, dump and benchmark containers.
//!
//! Exit codes: 0 success, 1 data or I/O error (including an invalid file),
//! 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use fastds::bench::{prepare_synthetic, run_scenario, BenchData, BenchMode, BenchScenario, LoaderKind};
use fastds::format::{validate_page_size, Cell, DType, FieldType, DEFAULT_PAGE_SIZE};
use fastds::loader::{Loader, LoaderConfig};
use fastds::pipeline::parse_pipeline;
use fastds::reader::{validate_file, Dataset, ReadStrategy};
use fastds::source::{export_directory, DirectorySource, SyntheticSource};
use fastds::traversal::{OrderKind, TraversalOrder};
use fastds::writer::{report_waste, write_dataset, WriterConfig};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "fastds", version, about = "Page-organized dataset containers and loaders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a container from a synthetic spec or a `label/file` directory.
    Create(CreateArgs),
    /// Print the header summary, or one sample's cells.
    Inspect(InspectArgs),
    /// Check every structural invariant of a container.
    Validate(ValidateArgs),
    /// Run one loader epoch and print a line per delivered sample.
    SampleDump(DumpArgs),
    /// Run a benchmark scenario.
    Bench(BenchArgs),
}

#[derive(Args)]
struct CreateArgs {
    /// `synthetic:NxHxWxC` or `dir:PATH`.
    #[arg(long)]
    from: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PAGE_SIZE, value_parser = parse_page_size)]
    page_size: u64,
    #[arg(long, env = "BBOX_WORKERS", default_value_t = default_workers())]
    workers: usize,
    /// Probability that an image is stored run-length encoded.
    #[arg(long, default_value_t = 0.0, value_parser = parse_probability)]
    compress_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also export a synthetic source as a `label/file` tree here; the
    /// container is then built from that tree so indices agree.
    #[arg(long)]
    export_dir: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ValidateArgs {
    path: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct LoaderArgs {
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, env = "BBOX_WORKERS", default_value_t = default_workers())]
    workers: usize,
    #[arg(long, default_value = "random", value_parser = parse_order)]
    order: OrderKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "decode|crop:24,24|flip:0.5|normalize:127.5,64")]
    pipeline: String,
}

#[derive(Args)]
struct DumpArgs {
    path: PathBuf,
    #[command(flatten)]
    loader: LoaderArgs,
    #[arg(long, default_value_t = 0)]
    epoch: u64,
    /// Stop after this many samples.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Container file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// `label/file` tree for the file-per-sample loader.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Build a synthetic `NxHxWxC` dataset in a temporary directory instead.
    #[arg(long, conflicts_with_all = ["data", "dir"])]
    synthetic: Option<String>,
    #[arg(long, default_value = "read-process", value_parser = parse_mode)]
    mode: BenchMode,
    #[arg(long, default_value = "container", value_parser = parse_loader)]
    loader: LoaderKind,
    #[arg(long, default_value_t = 0)]
    latency_us: u64,
    #[arg(long, default_value_t = 0)]
    compute_us: u64,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    /// `os-cache`, `direct` or `process-cache`.
    #[arg(long, default_value = "process-cache")]
    strategy: String,
    /// Process-cache capacity in pages.
    #[arg(long)]
    cache_pages: Option<usize>,
    #[command(flatten)]
    loader_args: LoaderArgs,
    /// Write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn parse_page_size(s: &str) -> Result<u64, String> {
    let v: u64 = s.parse().map_err(|e| format!("{e}"))?;
    validate_page_size(v).map_err(|e| e.to_string())?;
    Ok(v)
}

fn parse_probability(s: &str) -> Result<f64, String> {
    let p: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(format!("{p} is not in [0, 1]"));
    }
    Ok(p)
}

fn parse_order(s: &str) -> Result<OrderKind, String> {
    OrderKind::parse(s).ok_or_else(|| format!("unknown order {s:?} (sequential, random, quasi-random)"))
}

fn parse_mode(s: &str) -> Result<BenchMode, String> {
    BenchMode::parse(s).ok_or_else(|| format!("unknown mode {s:?} (read-only, read-process, full-loop)"))
}

fn parse_loader(s: &str) -> Result<LoaderKind, String> {
    LoaderKind::parse(s).ok_or_else(|| format!("unknown loader {s:?} (container, file-per-sample)"))
}

/// A usage error detected after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Create(a) => create(a),
        Command::Inspect(a) => inspect(a),
        Command::Validate(a) => validate(a),
        Command::SampleDump(a) => sample_dump(a),
        Command::Bench(a) => bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn create(a: CreateArgs) -> anyhow::Result<ExitCode> {
    if a.workers == 0 {
        return Err(usage("--workers must be >= 1"));
    }
    let cfg = WriterConfig {
        page_size: a.page_size,
        num_workers: a.workers,
        compress_probability: a.compress_prob,
        seed: a.seed,
        ..WriterConfig::default()
    };
    let report = if let Some(spec) = a.from.strip_prefix("synthetic:") {
        let src = SyntheticSource::parse(spec, a.seed).map_err(|e| usage(e.to_string()))?;
        match &a.export_dir {
            Some(dir) => {
                export_directory(&src, dir).with_context(|| format!("exporting to {}", dir.display()))?;
                write_from_dir(dir, &cfg, &a.out)?
            }
            None => write_dataset(&src, &src.schema(), &cfg, &a.out)?,
        }
    } else if let Some(dir) = a.from.strip_prefix("dir:") {
        if a.export_dir.is_some() {
            return Err(usage("--export-dir only applies to synthetic sources"));
        }
        write_from_dir(Path::new(dir), &cfg, &a.out)?
    } else {
        return Err(usage(format!("--from {:?}: expected synthetic:NxHxWxC or dir:PATH", a.from)));
    };
    if a.json {
        print_json(&serde_json::to_value(&report)?);
    } else {
        println!("wrote {}", a.out.display());
        println!("samples {}", report.num_samples);
        println!("pages {}", report.num_pages);
        println!("page_size {}", report.page_size);
        println!("bytes {}", report.bytes_written);
        println!("waste_fraction {:.6}", report.waste_fraction);
        for (codec, n) in &report.codec_counts {
            println!("images_{codec} {n}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn write_from_dir(dir: &Path, cfg: &WriterConfig, out: &Path) -> anyhow::Result<fastds::writer::WriteReport> {
    let src = DirectorySource::open(dir).with_context(|| format!("reading {}", dir.display()))?;
    Ok(write_dataset(&src, &src.schema(), cfg, out)?)
}

fn type_name(ty: &FieldType) -> String {
    match ty {
        FieldType::IntScalar => "int".into(),
        FieldType::FloatScalar => "float".into(),
        FieldType::FixedArray { dtype, shape } => {
            let dims: Vec<String> = shape.dims().iter().map(|d| d.to_string()).collect();
            let dtype = match dtype {
                DType::U8 => "u8",
                DType::I64 => "i64",
                DType::F32 => "f32",
                DType::F64 => "f64",
            };
            format!("array<{dtype}>[{}]", dims.join("x"))
        }
        FieldType::VarBytes => "bytes".into(),
        FieldType::Image {
            max_height,
            max_width,
            channels,
        } => format!("image<={max_height}x{max_width}x{channels}"),
    }
}

fn cell_json(ds: &Dataset, i: usize, field: usize) -> anyhow::Result<Value> {
    let header = ds.header();
    let ty = &header.fields[field].ty;
    let cell = ds.cell(i, field)?;
    let mut v = match cell {
        Cell::Int(x) => json!({ "value": x }),
        Cell::Float(x) => json!({ "value": x }),
        Cell::Array { offset } => json!({ "offset": offset }),
        Cell::Bytes { offset, len } => json!({ "offset": offset, "len": len }),
        Cell::Image(c) => json!({
            "offset": c.offset,
            "len": c.len,
            "height": c.height,
            "width": c.width,
            "channels": c.channels,
            "codec": c.codec.name(),
        }),
    };
    if let Some((offset, len)) = cell.heap_ref(ty) {
        let rel = offset - header.heap_offset;
        v["len"] = json!(len);
        v["pages"] = json!([rel / header.page_size, (rel + len - 1) / header.page_size]);
    }
    v["field"] = json!(header.fields[field].name);
    v["type"] = json!(type_name(ty));
    Ok(v)
}

fn inspect(a: InspectArgs) -> anyhow::Result<ExitCode> {
    let ds = Dataset::open(&a.path, ReadStrategy::Direct)?;
    let h = ds.header();
    if let Some(i) = a.sample {
        if i >= ds.num_samples() {
            bail!("sample {i} out of range for {} samples", ds.num_samples());
        }
        let cells = (0..h.fields.len()).map(|f| cell_json(&ds, i, f)).collect::<anyhow::Result<Vec<_>>>()?;
        if a.json {
            print_json(&json!({ "sample": i, "cells": cells }));
        } else {
            println!("sample {i}");
            for c in &cells {
                let mut rest = c.as_object().cloned().unwrap_or_default();
                let field = rest.remove("field").unwrap_or_default();
                let ty = rest.remove("type").unwrap_or_default();
                let parts: Vec<String> = rest.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("  {} ({}) {}", field.as_str().unwrap_or(""), ty.as_str().unwrap_or(""), parts.join(" "));
            }
        }
        return Ok(ExitCode::SUCCESS);
    }
    let fields: Vec<Value> = h
        .fields
        .iter()
        .map(|f| json!({ "name": f.name, "type": type_name(&f.ty) }))
        .collect();
    let summary = json!({
        "path": a.path.display().to_string(),
        "num_samples": h.num_samples,
        "page_size": h.page_size,
        "num_pages": ds.num_pages(),
        "data_table_offset": h.data_table_offset,
        "heap_offset": h.heap_offset,
        "alloc_table_offset": h.alloc_table_offset,
        "regions": ds.allocation_table().regions.len(),
        "waste_fraction": report_waste(&a.path)?,
        "fields": fields,
    });
    if a.json {
        print_json(&summary);
    } else {
        for key in [
            "path",
            "num_samples",
            "page_size",
            "num_pages",
            "data_table_offset",
            "heap_offset",
            "alloc_table_offset",
            "regions",
            "waste_fraction",
        ] {
            match &summary[key] {
                Value::String(s) => println!("{key} {s}"),
                v => println!("{key} {v}"),
            }
        }
        for f in &fields {
            println!("field {} {}", f["name"].as_str().unwrap_or(""), f["type"].as_str().unwrap_or(""));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn validate(a: ValidateArgs) -> anyhow::Result<ExitCode> {
    let report = validate_file(&a.path).with_context(|| format!("reading {}", a.path.display()))?;
    if a.json {
        let v: Vec<Value> = report
            .violations
            .iter()
            .map(|v| json!({ "kind": v.kind.label(), "detail": v.detail }))
            .collect();
        print_json(&json!({ "valid": report.is_valid(), "violations": v }));
    } else if report.is_valid() {
        println!("valid");
    } else {
        for v in &report.violations {
            println!("{v}");
        }
        println!("{} violation(s)", report.violations.len());
    }
    Ok(if report.is_valid() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

fn loader_config(a: &LoaderArgs) -> anyhow::Result<LoaderConfig> {
    if a.batch_size == 0 || a.workers == 0 {
        return Err(usage("--batch-size and --workers must be >= 1"));
    }
    let pipeline = parse_pipeline(&a.pipeline).map_err(|e| usage(e.to_string()))?;
    Ok(LoaderConfig::new(a.batch_size, a.workers, TraversalOrder::new(a.order, a.seed), pipeline))
}

fn sample_dump(a: DumpArgs) -> anyhow::Result<ExitCode> {
    let cfg = loader_config(&a.loader)?;
    let ds = Arc::new(Dataset::open(&a.path, ReadStrategy::OsCache)?);
    let mut loader = Loader::new(ds, cfg)?;
    let limit = a.limit.unwrap_or(usize::MAX);
    let mut rows = Vec::new();
    let mut epoch = loader.epoch(a.epoch)?;
    'outer: while let Some(batch) = epoch.next_batch() {
        let batch = batch?;
        for p in 0..batch.len() {
            if rows.len() == limit {
                break 'outer;
            }
            let t = batch.sample(p);
            rows.push(json!({
                "batch": batch.batch_index(),
                "position": p,
                "index": batch.index(p),
                "label": batch.label(p),
                "shape": [t.shape.height, t.shape.width, t.shape.channels],
                "elem": format!("{:?}", t.elem).to_lowercase(),
                "fnv1a": format!("{:016x}", fnv1a(t.bytes)),
            }));
        }
    }
    drop(epoch);
    if a.json {
        print_json(&Value::Array(rows));
    } else {
        println!("batch position index label shape elem fnv1a");
        for r in &rows {
            let s = &r["shape"];
            println!(
                "{} {} {} {} {}x{}x{} {} {}",
                r["batch"], r["position"], r["index"], r["label"], s[0], s[1], s[2],
                r["elem"].as_str().unwrap_or(""),
                r["fnv1a"].as_str().unwrap_or("")
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn bench(a: BenchArgs) -> anyhow::Result<ExitCode> {
    let strategy = match a.strategy.as_str() {
        "os-cache" => Some(ReadStrategy::OsCache),
        "direct" => Some(ReadStrategy::Direct),
        "process-cache" => None,
        other => return Err(usage(format!("unknown strategy {other:?} (os-cache, direct, process-cache)"))),
    };
    if a.repetitions < 3 {
        return Err(usage("--repetitions must be >= 3"));
    }
    loader_config(&a.loader_args)?;
    let tmp;
    let data = match &a.synthetic {
        Some(spec) => {
            tmp = tempfile::tempdir()?;
            let with_dir = a.loader == LoaderKind::FilePerSample;
            prepare_synthetic(spec, a.loader_args.seed, tmp.path(), DEFAULT_PAGE_SIZE, default_workers(), with_dir)
                .map_err(|e| usage(e.to_string()))?
        }
        None => BenchData {
            container: a.data.clone(),
            directory: a.dir.clone(),
        },
    };
    match a.loader {
        LoaderKind::FilePerSample if data.directory.is_none() => {
            return Err(usage("--loader file-per-sample needs --dir (or --synthetic)"))
        }
        LoaderKind::Container if data.container.is_none() => {
            return Err(usage("--loader container needs --data (or --synthetic)"))
        }
        LoaderKind::FilePerSample if a.loader_args.order == OrderKind::QuasiRandom => {
            return Err(usage("quasi-random order needs pages; use it with --loader container"))
        }
        _ => {}
    }
    let scenario = BenchScenario {
        mode: a.mode,
        loader: a.loader,
        compute_per_batch: Duration::from_micros(a.compute_us),
        latency: Duration::from_micros(a.latency_us),
        repetitions: a.repetitions,
        batch_size: a.loader_args.batch_size,
        num_workers: a.loader_args.workers,
        order: TraversalOrder::new(a.loader_args.order, a.loader_args.seed),
        pipeline: a.loader_args.pipeline.clone(),
        strategy,
        cache_pages: a.cache_pages,
    };
    let report = run_scenario(&scenario, &data)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&report)?;
        std::fs::write(out, text + "\n").with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}
