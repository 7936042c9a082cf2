//! Building container files from a [`SampleSource`].
//!
//! The Data Table is reserved up front (the sample count is known), heap
//! blobs are placed by per-worker page allocators and written page by page,
//! and the header and Allocation Table are written last.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::alloc::{PageAllocator, Placement, WorkerAllocator};
use crate::codecs::{encode_image, CodecId};
use crate::format::{
    decode_header, encode_header, encode_row_into, validate_page_size, AllocationTable, Cell, DatasetHeader,
    FieldDescriptor, FieldType, ImageCell, Region, DEFAULT_PAGE_SIZE,
};
use crate::rng::SplitMix64;
use crate::source::{FieldValue, SampleSource};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WriterConfig {
    pub page_size: u64,
    pub num_workers: usize,
    /// Probability that an IMAGE value is stored with `compressed_codec`.
    pub compress_probability: f64,
    pub compressed_codec: CodecId,
    pub seed: u64,
}

impl Default for WriterConfig {
    fn default() -> Self {
        Self {
            page_size: DEFAULT_PAGE_SIZE,
            num_workers: 1,
            compress_probability: 0.0,
            compressed_codec: CodecId::Rle,
            seed: 0,
        }
    }
}

impl WriterConfig {
    pub fn validate(&self) -> Result<()> {
        validate_page_size(self.page_size)?;
        if self.num_workers == 0 {
            return Err(Error::Config("num_workers must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.compress_probability) {
            return Err(Error::Config("compress_probability must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Codec for IMAGE field `field` of sample `index`. Independent of scheduling.
    pub fn codec_for(&self, index: usize, field: usize) -> CodecId {
        if SplitMix64::for_stream(self.seed, index as u64, field as u64).next_f64() < self.compress_probability {
            self.compressed_codec
        } else {
            CodecId::Raw
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct WriteReport {
    pub num_samples: u64,
    pub num_pages: u64,
    pub page_size: u64,
    pub bytes_written: u64,
    pub heap_bytes: u64,
    pub allocated_bytes: u64,
    /// IMAGE values per codec name.
    pub codec_counts: BTreeMap<String, u64>,
    pub waste_fraction: f64,
}

pub fn waste_fraction(header: &DatasetHeader, table: &AllocationTable) -> f64 {
    let heap = header.num_pages() * header.page_size;
    if heap == 0 {
        return 0.0;
    }
    (heap - table.allocated_bytes()) as f64 / heap as f64
}

/// `(heap bytes - allocated bytes) / heap bytes` of an existing file.
pub fn report_waste(path: impl AsRef<Path>) -> Result<f64> {
    let bytes = std::fs::read(path)?;
    let header = decode_header(&bytes).map_err(|e| Error::InvalidFile(e.to_string()))?;
    let start = header.alloc_table_offset as usize;
    if bytes.len() < start {
        return Err(Error::InvalidFile("allocation table missing".into()));
    }
    let table = AllocationTable::decode(&bytes[start..]).map_err(|e| Error::InvalidFile(e.to_string()))?;
    Ok(waste_fraction(&header, &table))
}

/// Worker-local page image, flushed when its page closes.
struct PageWriter<'a> {
    alloc: WorkerAllocator<'a>,
    page: Option<u64>,
    buf: Vec<u8>,
    used: usize,
}

impl<'a> PageWriter<'a> {
    fn new(alloc: WorkerAllocator<'a>) -> Self {
        Self {
            alloc,
            page: None,
            buf: Vec::new(),
            used: 0,
        }
    }

    fn flush(&mut self, file: &File, shared: &PageAllocator) -> std::io::Result<()> {
        if let Some(p) = self.page {
            file.write_all_at(&self.buf[..self.used], shared.page_start(p))?;
        }
        self.used = 0;
        Ok(())
    }

    fn put(&mut self, bytes: &[u8], file: &File, shared: &PageAllocator) -> std::io::Result<u64> {
        match self.alloc.allocate(bytes.len() as u64) {
            Placement::Oversize { offset, .. } => {
                file.write_all_at(bytes, offset)?;
                Ok(offset)
            }
            Placement::InPage {
                offset,
                page,
                page_offset,
                opened,
                ..
            } => {
                if opened {
                    self.flush(file, shared)?;
                    self.page = Some(page);
                    if self.buf.is_empty() {
                        self.buf = vec![0u8; shared.page_size() as usize];
                    }
                }
                let at = page_offset as usize;
                self.buf[at..at + bytes.len()].copy_from_slice(bytes);
                self.used = at + bytes.len();
                Ok(offset)
            }
        }
    }
}

struct WorkerOutput {
    rows: Vec<(usize, Vec<Cell>)>,
    regions: Vec<Region>,
    codec_counts: [u64; 3],
}

#[allow(clippy::too_many_arguments)]
fn encode_sample(
    index: usize,
    values: &[FieldValue],
    schema: &[FieldDescriptor],
    config: &WriterConfig,
    pw: &mut PageWriter<'_>,
    file: &File,
    shared: &PageAllocator,
    codec_counts: &mut [u64; 3],
) -> Result<Vec<Cell>> {
    if values.len() != schema.len() {
        return Err(Error::Source {
            index: index as u64,
            message: format!("{} values for {} fields", values.len(), schema.len()),
        });
    }
    let mut cells = Vec::with_capacity(schema.len());
    for (f, (value, field)) in values.iter().zip(schema).enumerate() {
        value.check(&field.ty).map_err(|message| Error::Source {
            index: index as u64,
            message: format!("field {:?}: {message}", field.name),
        })?;
        let cell = match (value, &field.ty) {
            (FieldValue::Int(v), _) => Cell::Int(*v),
            (FieldValue::Float(v), _) => Cell::Float(*v),
            (FieldValue::Array(bytes), _) => Cell::Array {
                offset: pw.put(bytes, file, shared)?,
            },
            (FieldValue::Bytes(bytes), _) if bytes.is_empty() => Cell::Bytes { offset: 0, len: 0 },
            (FieldValue::Bytes(bytes), _) => Cell::Bytes {
                offset: pw.put(bytes, file, shared)?,
                len: bytes.len() as u64,
            },
            (
                FieldValue::Image(img),
                FieldType::Image {
                    max_height,
                    max_width,
                    channels,
                },
            ) => {
                let codec = config.codec_for(index, f);
                let blob = encode_image(img, codec, *max_height, *max_width, *channels).map_err(|e| Error::Source {
                    index: index as u64,
                    message: format!("field {:?}: {e}", field.name),
                })?;
                codec_counts[codec as usize] += 1;
                let offset = if blob.payload.is_empty() {
                    0
                } else {
                    pw.put(&blob.payload, file, shared)?
                };
                Cell::Image(ImageCell {
                    offset,
                    len: blob.payload.len() as u64,
                    height: blob.height,
                    width: blob.width,
                    channels: blob.channels,
                    codec,
                })
            }
            _ => unreachable!("checked above"),
        };
        cells.push(cell);
    }
    Ok(cells)
}

/// Writes `source` to `path` under `schema`.
pub fn write_dataset(
    source: &dyn SampleSource,
    schema: &[FieldDescriptor],
    config: &WriterConfig,
    path: impl AsRef<Path>,
) -> Result<WriteReport> {
    config.validate()?;
    let n = source.len();
    let mut header = DatasetHeader::layout(n as u64, config.page_size, schema.to_vec());
    header.validate()?;
    let file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(true)
        .open(path.as_ref())?;
    let shared = PageAllocator::new(header.heap_offset, config.page_size);
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let first_error: Mutex<Option<(usize, Error)>> = Mutex::new(None);
    let workers = config.num_workers.min(n.max(1));

    let outputs: Vec<WorkerOutput> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut pw = PageWriter::new(shared.worker());
                    let mut out = WorkerOutput {
                        rows: Vec::new(),
                        regions: Vec::new(),
                        codec_counts: [0; 3],
                    };
                    let fail = |i: usize, e: Error| {
                        abort.store(true, Ordering::Release);
                        let mut g = first_error.lock().unwrap_or_else(|e| e.into_inner());
                        if g.as_ref().is_none_or(|(j, _)| i < *j) {
                            *g = Some((i, e));
                        }
                    };
                    while !abort.load(Ordering::Acquire) {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= n {
                            break;
                        }
                        let cells = source.sample(i).and_then(|values| {
                            encode_sample(i, &values, schema, config, &mut pw, &file, &shared, &mut out.codec_counts)
                        });
                        match cells {
                            Ok(c) => out.rows.push((i, c)),
                            Err(e) => fail(i, e),
                        }
                    }
                    if let Err(e) = pw.flush(&file, &shared) {
                        fail(usize::MAX, e.into());
                    }
                    out.regions = pw.alloc.finish().1;
                    out
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("encode worker panicked")).collect()
    });
    if let Some((_, e)) = first_error.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e);
    }

    let num_pages = shared.num_pages();
    header.alloc_table_offset = header.heap_offset + num_pages * config.page_size;
    let mut regions: Vec<Region> = outputs.iter().flat_map(|o| o.regions.iter().copied()).collect();
    regions.sort_unstable();
    let table = AllocationTable { regions };

    let width = header.row_width() as usize;
    let mut rows = vec![0u8; n * width];
    let mut scratch = Vec::with_capacity(width);
    let mut codec_counts = [0u64; 3];
    for o in &outputs {
        for (i, cells) in &o.rows {
            scratch.clear();
            encode_row_into(schema, cells, &mut scratch)?;
            rows[i * width..(i + 1) * width].copy_from_slice(&scratch);
        }
        for (c, k) in codec_counts.iter_mut().zip(o.codec_counts) {
            *c += k;
        }
    }

    let header_bytes = encode_header(&header)?;
    file.write_all_at(&header_bytes, 0)?;
    file.write_all_at(&rows, header.data_table_offset)?;
    let table_bytes = table.encode();
    file.set_len(header.alloc_table_offset)?;
    file.write_all_at(&table_bytes, header.alloc_table_offset)?;
    file.sync_data()?;

    let codec_counts = CodecId::ALL
        .iter()
        .map(|c| (c.name().to_string(), codec_counts[*c as usize]))
        .collect();
    Ok(WriteReport {
        num_samples: n as u64,
        num_pages,
        page_size: config.page_size,
        bytes_written: header.alloc_table_offset + table_bytes.len() as u64,
        heap_bytes: num_pages * config.page_size,
        allocated_bytes: table.allocated_bytes(),
        codec_counts,
        waste_fraction: waste_fraction(&header, &table),
    })
}
