//! Per-epoch sample orders.
//!
//! `QuasiRandom` shuffles pages instead of samples: pages are admitted into a
//! buffer of at most `batch_size` pages in a random page order, and each
//! emitted sample is drawn uniformly from the unconsumed samples of the
//! buffered pages. A page leaves the buffer once all its samples are emitted
//! and the next page is admitted right away.

use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OrderKind {
    Sequential,
    Random,
    QuasiRandom,
}

impl OrderKind {
    pub const ALL: [OrderKind; 3] = [OrderKind::Sequential, OrderKind::Random, OrderKind::QuasiRandom];

    pub fn name(self) -> &'static str {
        match self {
            OrderKind::Sequential => "sequential",
            OrderKind::Random => "random",
            OrderKind::QuasiRandom => "quasi-random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sequential" | "seq" => Some(Self::Sequential),
            "random" => Some(Self::Random),
            "quasi-random" | "quasi_random" | "quasi" => Some(Self::QuasiRandom),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraversalOrder {
    pub kind: OrderKind,
    pub seed: u64,
}

/// Emitted order for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochOrder {
    pub indices: Vec<usize>,
    pub batch_size: usize,
}

impl EpochOrder {
    pub fn batches(&self) -> std::slice::Chunks<'_, usize> {
        self.indices.chunks(self.batch_size)
    }

    pub fn num_batches(&self, drop_last: bool) -> usize {
        if drop_last {
            self.indices.len() / self.batch_size
        } else {
            self.indices.len().div_ceil(self.batch_size)
        }
    }
}

/// What the quasi-random buffer did, step by step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuasiTrace {
    /// Page ids in admission order.
    pub page_loads: Vec<u64>,
    /// For each emitted sample: the page it came from and the pages buffered
    /// at the moment it was drawn.
    pub emits: Vec<QuasiEmit>,
    pub max_buffered: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuasiEmit {
    pub sample: usize,
    pub page: u64,
    pub buffered: Vec<u64>,
}

impl TraversalOrder {
    pub fn new(kind: OrderKind, seed: u64) -> Self {
        Self { kind, seed }
    }

    fn epoch_rng(&self, epoch: u64) -> SplitMix64 {
        SplitMix64::for_stream(self.seed, epoch, 0x7472_6176 ^ self.kind as u64)
    }

    /// Order for `epoch`. `page_map[i]` is the page holding sample `i`; it is
    /// only consulted for `QuasiRandom`.
    pub fn next_epoch(&self, epoch: u64, num_samples: usize, page_map: &[u64], batch_size: usize) -> EpochOrder {
        self.generate(epoch, num_samples, page_map, batch_size, None)
    }

    pub fn next_epoch_traced(
        &self,
        epoch: u64,
        num_samples: usize,
        page_map: &[u64],
        batch_size: usize,
    ) -> (EpochOrder, QuasiTrace) {
        let mut trace = QuasiTrace::default();
        let order = self.generate(epoch, num_samples, page_map, batch_size, Some(&mut trace));
        (order, trace)
    }

    fn generate(
        &self,
        epoch: u64,
        num_samples: usize,
        page_map: &[u64],
        batch_size: usize,
        trace: Option<&mut QuasiTrace>,
    ) -> EpochOrder {
        assert!(batch_size >= 1, "batch_size must be >= 1");
        let indices = match self.kind {
            OrderKind::Sequential => (0..num_samples).collect(),
            OrderKind::Random => {
                let mut v: Vec<usize> = (0..num_samples).collect();
                self.epoch_rng(epoch).shuffle(&mut v);
                v
            }
            OrderKind::QuasiRandom => {
                assert_eq!(page_map.len(), num_samples, "page_map must cover every sample");
                quasi_random(&mut self.epoch_rng(epoch), page_map, batch_size, trace)
            }
        };
        EpochOrder { indices, batch_size }
    }
}

fn quasi_random(
    rng: &mut SplitMix64,
    page_map: &[u64],
    buffer_pages: usize,
    mut trace: Option<&mut QuasiTrace>,
) -> Vec<usize> {
    // Group samples by page, pages in ascending id.
    let mut by_page: Vec<usize> = (0..page_map.len()).collect();
    by_page.sort_by_key(|&i| page_map[i]);
    let mut groups: Vec<(u64, std::ops::Range<usize>)> = Vec::new();
    let mut start = 0;
    for end in 1..=by_page.len() {
        if end == by_page.len() || page_map[by_page[end]] != page_map[by_page[start]] {
            groups.push((page_map[by_page[start]], start..end));
            start = end;
        }
    }
    let mut permutation: Vec<usize> = (0..groups.len()).collect();
    rng.shuffle(&mut permutation);

    let mut remaining: Vec<usize> = groups.iter().map(|(_, r)| r.len()).collect();
    let mut pool: Vec<(usize, usize)> = Vec::new();
    let mut buffered: Vec<u64> = Vec::new();
    let mut next_group = 0;
    let mut out = Vec::with_capacity(page_map.len());

    while next_group < groups.len() && buffered.len() < buffer_pages {
        admit(&groups[permutation[next_group]], permutation[next_group], &by_page, &mut pool, &mut buffered, &mut trace);
        next_group += 1;
    }
    while !pool.is_empty() {
        let j = rng.next_below(pool.len() as u64) as usize;
        let (sample, g) = pool.swap_remove(j);
        if let Some(t) = trace.as_deref_mut() {
            t.emits.push(QuasiEmit {
                sample,
                page: groups[g].0,
                buffered: buffered.clone(),
            });
        }
        out.push(sample);
        remaining[g] -= 1;
        if remaining[g] == 0 {
            let page = groups[g].0;
            buffered.retain(|&p| p != page);
            if next_group < groups.len() {
                admit(&groups[permutation[next_group]], permutation[next_group], &by_page, &mut pool, &mut buffered, &mut trace);
                next_group += 1;
            }
        }
    }
    out
}

fn admit(
    (page, range): &(u64, std::ops::Range<usize>),
    group: usize,
    by_page: &[usize],
    pool: &mut Vec<(usize, usize)>,
    buffered: &mut Vec<u64>,
    trace: &mut Option<&mut QuasiTrace>,
) {
    pool.extend(by_page[range.clone()].iter().map(|&s| (s, group)));
    buffered.push(*page);
    if let Some(t) = trace.as_deref_mut() {
        t.page_loads.push(*page);
        t.max_buffered = t.max_buffered.max(buffered.len());
    }
}

/// Mean emission position of every sample over `epochs` epochs.
pub fn uniformity_probe(
    order: &TraversalOrder,
    num_samples: usize,
    page_map: &[u64],
    batch_size: usize,
    epochs: u64,
) -> Vec<f64> {
    assert!(epochs >= 1);
    let mut sums = vec![0u64; num_samples];
    for epoch in 0..epochs {
        let o = order.next_epoch(epoch, num_samples, page_map, batch_size);
        for (pos, &i) in o.indices.iter().enumerate() {
            sums[i] += pos as u64;
        }
    }
    sums.into_iter().map(|s| s as f64 / epochs as f64).collect()
}

/// `page_map` for `num_samples` samples stored `per_page` to a page.
pub fn contiguous_page_map(num_samples: usize, per_page: usize) -> Vec<u64> {
    (0..num_samples).map(|i| (i / per_page.max(1)) as u64).collect()
}
