//! Page residency planning for the process cache.
//!
//! The epoch order is known before the epoch starts, so the whole fetch and
//! eviction sequence is computed up front with farthest-next-use (Belady)
//! eviction. The runtime in `reader` only executes this plan, which keeps its
//! fetch and reload counts identical to the offline simulation.
//!
//! A *step* is one sample; it may touch several pages, all of which must be
//! resident together, so pages already touched by the current step are never
//! chosen as victims.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub const DEFAULT_PREFETCH_WINDOW: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("cache capacity {capacity} is smaller than the {required} pages needed at once")]
pub struct CapacityTooSmall {
    pub capacity: usize,
    pub required: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub fetch_count: u64,
    pub reload_count: u64,
    pub peak_resident: usize,
}

/// A page read into a buffer before `step` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FetchEvent {
    pub step: usize,
    pub page: u64,
    pub buffer: usize,
    /// Page whose buffer is reused, if it was still live.
    pub evicted: Option<u64>,
    /// Last step that read the buffer's previous content; the fetch must wait for it.
    pub reuse_after: Option<usize>,
    pub reload: bool,
}

/// One page touched by one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub page: u64,
    pub buffer: usize,
    /// Fetch event that brought the page into `buffer`.
    pub event: usize,
    /// No later step touches this page.
    pub last_use: bool,
}

#[derive(Debug, Clone)]
pub struct PageSchedule {
    capacity: usize,
    step_bounds: Vec<usize>,
    accesses: Vec<Access>,
    events: Vec<FetchEvent>,
    first_use_order: Vec<u64>,
    peak_resident: usize,
}

impl PageSchedule {
    /// Plan for a plain page trace (one page per step).
    pub fn from_trace(trace: &[u64], capacity: usize) -> Result<Self, CapacityTooSmall> {
        Self::build(trace.iter().map(|&p| std::iter::once(p)), capacity)
    }

    /// Plan for a sequence of steps, each touching a set of pages.
    pub fn build<S, P>(steps: S, capacity: usize) -> Result<Self, CapacityTooSmall>
    where
        S: IntoIterator<Item = P>,
        P: IntoIterator<Item = u64>,
    {
        let mut pages = Vec::new();
        let mut step_bounds = vec![0];
        for step in steps {
            let start = pages.len();
            for p in step {
                if !pages[start..].contains(&p) {
                    pages.push(p);
                }
            }
            step_bounds.push(pages.len());
        }
        let required = step_bounds.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0);
        if capacity == 0 || capacity < required {
            return Err(CapacityTooSmall {
                capacity,
                required: required.max(1),
            });
        }

        // next_use[k]: access index of the next touch of pages[k], or MAX.
        let mut next_use = vec![usize::MAX; pages.len()];
        let mut seen: HashMap<u64, usize> = HashMap::new();
        for k in (0..pages.len()).rev() {
            if let Some(&n) = seen.get(&pages[k]) {
                next_use[k] = n;
            }
            seen.insert(pages[k], k);
        }

        let mut accesses = Vec::with_capacity(pages.len());
        let mut events: Vec<FetchEvent> = Vec::new();
        // page -> (buffer, next use, fetch event)
        let mut resident: HashMap<u64, (usize, usize, usize)> = HashMap::new();
        let mut by_next_use: BTreeSet<(usize, u64)> = BTreeSet::new();
        let mut buffer_last_step: Vec<Option<usize>> = Vec::with_capacity(capacity);
        let mut free: Vec<usize> = Vec::new();
        let mut ever_fetched: HashSet<u64> = HashSet::new();
        let mut first_use_order = Vec::new();
        let mut dying: Vec<u64> = Vec::new();
        let mut peak_resident = 0;

        for step in 0..step_bounds.len() - 1 {
            let (lo, hi) = (step_bounds[step], step_bounds[step + 1]);
            for k in lo..hi {
                let page = pages[k];
                let (buffer, event) = match resident.get(&page).copied() {
                    Some((buffer, old_next, event)) => {
                        by_next_use.remove(&(old_next, page));
                        (buffer, event)
                    }
                    None => {
                        let reload = !ever_fetched.insert(page);
                        if !reload {
                            first_use_order.push(page);
                        }
                        let (buffer, evicted) = if let Some(b) = free.pop() {
                            (b, None)
                        } else if buffer_last_step.len() < capacity {
                            buffer_last_step.push(None);
                            (buffer_last_step.len() - 1, None)
                        } else {
                            // Farthest next use among pages not touched by this step.
                            let &(_, victim) = by_next_use
                                .iter()
                                .rev()
                                .find(|(_, p)| !pages[lo..k].contains(p))
                                .expect("capacity covers every page of a step");
                            let (b, n, _) = resident.remove(&victim).unwrap();
                            by_next_use.remove(&(n, victim));
                            (b, Some(victim))
                        };
                        events.push(FetchEvent {
                            step,
                            page,
                            buffer,
                            evicted,
                            reuse_after: buffer_last_step[buffer],
                            reload,
                        });
                        (buffer, events.len() - 1)
                    }
                };
                let last_use = next_use[k] == usize::MAX;
                resident.insert(page, (buffer, next_use[k], event));
                by_next_use.insert((next_use[k], page));
                buffer_last_step[buffer] = Some(step);
                if last_use {
                    dying.push(page);
                }
                accesses.push(Access {
                    page,
                    buffer,
                    event,
                    last_use,
                });
            }
            peak_resident = peak_resident.max(resident.len());
            // Pages with no further use are released once their step ends.
            for page in dying.drain(..) {
                let (b, n, _) = resident.remove(&page).unwrap();
                by_next_use.remove(&(n, page));
                free.push(b);
            }
        }

        Ok(Self {
            capacity,
            step_bounds,
            accesses,
            events,
            first_use_order,
            peak_resident,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_steps(&self) -> usize {
        self.step_bounds.len() - 1
    }

    pub fn accesses(&self, step: usize) -> &[Access] {
        &self.accesses[self.step_bounds[step]..self.step_bounds[step + 1]]
    }

    pub fn events(&self) -> &[FetchEvent] {
        &self.events
    }

    /// Buffers actually used (at most `capacity`).
    pub fn buffers_used(&self) -> usize {
        self.events.iter().map(|e| e.buffer + 1).max().unwrap_or(0)
    }

    /// Pages in order of first use; every touched page appears exactly once.
    pub fn first_use_order(&self) -> &[u64] {
        &self.first_use_order
    }

    /// Index of the first fetch event whose step is `>= step`.
    pub fn first_event_at_or_after(&self, step: usize) -> usize {
        self.events.partition_point(|e| e.step < step)
    }

    /// Remaining uses of each page after `step` completes.
    pub fn remaining_uses_after(&self, step: usize) -> HashMap<u64, usize> {
        let mut out = HashMap::new();
        for a in &self.accesses[self.step_bounds[step + 1]..] {
            *out.entry(a.page).or_insert(0) += 1;
        }
        out
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            fetch_count: self.events.len() as u64,
            reload_count: self.events.iter().filter(|e| e.reload).count() as u64,
            peak_resident: self.peak_resident,
        }
    }
}

/// Fetch and reload counts of an LRU cache on a plain page trace. Baseline
/// for comparing against the planned schedule.
pub fn lru_stats(trace: &[u64], capacity: usize) -> CacheStats {
    assert!(capacity >= 1);
    let mut resident: Vec<u64> = Vec::with_capacity(capacity);
    let mut ever: HashSet<u64> = HashSet::new();
    let mut stats = CacheStats::default();
    for &page in trace {
        if let Some(pos) = resident.iter().position(|&p| p == page) {
            resident.remove(pos);
        } else {
            stats.fetch_count += 1;
            if !ever.insert(page) {
                stats.reload_count += 1;
            }
            if resident.len() == capacity {
                resident.remove(0);
            }
        }
        resident.push(page);
        stats.peak_resident = stats.peak_resident.max(resident.len());
    }
    stats
}
