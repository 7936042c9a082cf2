//! Browser demo bindings: traversal traces, planned vs LRU caching, and how
//! the writer's per-worker allocator fills pages.
//!
//! Every export returns flat integer arrays so the page can draw them without
//! a serialization layer.

use fastds::alloc::{PageAllocator, Placement};
use fastds::cache::{lru_stats, PageSchedule};
use fastds::rng::SplitMix64;
use fastds::traversal::{contiguous_page_map, OrderKind, TraversalOrder};
use wasm_bindgen::prelude::*;

fn order_kind(name: &str) -> Result<OrderKind, JsError> {
    OrderKind::parse(name).ok_or_else(|| JsError::new(&format!("unknown order {name:?}")))
}

fn check_shape(num_samples: u32, per_page: u32, batch_size: u32) -> Result<(), JsError> {
    if num_samples == 0 || per_page == 0 || batch_size == 0 {
        return Err(JsError::new("sizes must be positive"));
    }
    if num_samples > 200_000 {
        return Err(JsError::new("at most 200000 samples"));
    }
    Ok(())
}

/// One epoch's emitted order over a dataset of `per_page` samples per page.
#[wasm_bindgen]
pub struct Trace {
    samples: Vec<u32>,
    pages: Vec<u32>,
    buffered: Vec<u32>,
    page_loads: Vec<u32>,
    max_buffered: u32,
}

#[wasm_bindgen]
impl Trace {
    /// Sample index per emitted position.
    pub fn samples(&self) -> Vec<u32> {
        self.samples.clone()
    }

    /// Page of each emitted sample.
    pub fn pages(&self) -> Vec<u32> {
        self.pages.clone()
    }

    /// Pages held by the quasi-random buffer at each draw; empty for other orders.
    pub fn buffered(&self) -> Vec<u32> {
        self.buffered.clone()
    }

    /// Page ids in the order the quasi-random buffer admitted them.
    pub fn page_loads(&self) -> Vec<u32> {
        self.page_loads.clone()
    }

    pub fn max_buffered(&self) -> u32 {
        self.max_buffered
    }
}

#[wasm_bindgen]
pub fn traversal_trace(
    order: &str,
    num_samples: u32,
    per_page: u32,
    batch_size: u32,
    seed: u64,
    epoch: u64,
) -> Result<Trace, JsError> {
    check_shape(num_samples, per_page, batch_size)?;
    let kind = order_kind(order)?;
    let page_map = contiguous_page_map(num_samples as usize, per_page as usize);
    let (order, trace) =
        TraversalOrder::new(kind, seed).next_epoch_traced(epoch, num_samples as usize, &page_map, batch_size as usize);
    Ok(Trace {
        pages: order.indices.iter().map(|&i| page_map[i] as u32).collect(),
        samples: order.indices.iter().map(|&i| i as u32).collect(),
        buffered: trace.emits.iter().map(|e| e.buffered.len() as u32).collect(),
        page_loads: trace.page_loads.iter().map(|&p| p as u32).collect(),
        max_buffered: trace.max_buffered as u32,
    })
}

/// Page fetches under the planned (farthest next use) schedule and under LRU,
/// for every capacity `1..=max_capacity`. Returns `[capacity, planned, lru]`
/// triples.
#[wasm_bindgen]
pub fn cache_curve(
    order: &str,
    num_samples: u32,
    per_page: u32,
    batch_size: u32,
    seed: u64,
    max_capacity: u32,
) -> Result<Vec<u32>, JsError> {
    check_shape(num_samples, per_page, batch_size)?;
    let kind = order_kind(order)?;
    let page_map = contiguous_page_map(num_samples as usize, per_page as usize);
    let order = TraversalOrder::new(kind, seed).next_epoch(0, num_samples as usize, &page_map, batch_size as usize);
    let trace: Vec<u64> = order.indices.iter().map(|&i| page_map[i]).collect();
    let mut out = Vec::with_capacity(3 * max_capacity as usize);
    for cap in 1..=max_capacity.max(1) as usize {
        let planned = PageSchedule::from_trace(&trace, cap).map_err(|e| JsError::new(&e.to_string()))?;
        out.extend([cap as u32, planned.stats().fetch_count as u32, lru_stats(&trace, cap).fetch_count as u32]);
    }
    Ok(out)
}

/// Places `num_blobs` blobs of random size in `1..=max_blob` bytes with
/// `workers` encoders taking turns. Returns `[worker, first_page, page_offset,
/// len, pages]` per blob; `pages > 1` marks an oversize blob that owns its run.
#[wasm_bindgen]
pub fn allocator_fill(num_blobs: u32, page_size: u32, max_blob: u32, workers: u32, seed: u64) -> Result<Vec<u32>, JsError> {
    if num_blobs == 0 || page_size == 0 || max_blob == 0 || workers == 0 {
        return Err(JsError::new("sizes must be positive"));
    }
    if num_blobs > 100_000 || workers > 64 {
        return Err(JsError::new("at most 100000 blobs and 64 workers"));
    }
    Ok(fill(num_blobs, page_size as u64, max_blob as u64, workers, seed))
}

fn fill(num_blobs: u32, page_size: u64, max_blob: u64, workers: u32, seed: u64) -> Vec<u32> {
    let shared = PageAllocator::new(0, page_size);
    let mut encoders: Vec<_> = (0..workers).map(|_| shared.worker()).collect();
    let mut rng = SplitMix64::new(seed);
    let mut out = Vec::with_capacity(5 * num_blobs as usize);
    for n in 0..num_blobs {
        let w = n % workers;
        let len = 1 + rng.next_below(max_blob);
        let row = match encoders[w as usize].allocate(len) {
            Placement::InPage { page, page_offset, .. } => [page, page_offset, 1],
            Placement::Oversize { first_page, pages, .. } => [first_page, 0, pages],
        };
        out.extend([w, row[0] as u32, row[1] as u32, len as u32, row[2] as u32]);
    }
    out
}

/// Fraction of allocated heap bytes that hold no blob, from an
/// [`allocator_fill`] result.
#[wasm_bindgen]
pub fn fill_waste(rows: &[u32], page_size: u32) -> f64 {
    let pages: u64 = rows
        .chunks_exact(5)
        .map(|r| r[1] as u64 + r[4] as u64)
        .max()
        .unwrap_or(0);
    if pages == 0 {
        return 0.0;
    }
    let used: u64 = rows.chunks_exact(5).map(|r| r[3] as u64).sum();
    1.0 - used as f64 / (pages * page_size as u64) as f64
}
