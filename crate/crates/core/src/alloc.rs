//! Heap page allocation for the writer.
//!
//! Each encode worker bump-allocates inside its own private page. Page ids
//! come from one shared counter, taken when a worker opens a page, so
//! `allocate` can return final file offsets immediately. A blob larger than a
//! page gets its own run of contiguous, page-aligned pages.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::format::Region;

#[derive(Debug)]
pub struct PageAllocator {
    heap_offset: u64,
    page_size: u64,
    next_page: AtomicU64,
}

/// Where a blob landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Inside the worker's current page. `closed` is the page that had to be
    /// retired to make room, if any.
    InPage {
        offset: u64,
        page: u64,
        page_offset: u64,
        opened: bool,
        closed: Option<u64>,
    },
    /// Dedicated pages `first_page..first_page + pages`.
    Oversize { offset: u64, first_page: u64, pages: u64 },
}

impl Placement {
    pub fn offset(&self) -> u64 {
        match *self {
            Placement::InPage { offset, .. } | Placement::Oversize { offset, .. } => offset,
        }
    }
}

impl PageAllocator {
    pub fn new(heap_offset: u64, page_size: u64) -> Self {
        assert!(page_size > 0);
        Self {
            heap_offset,
            page_size,
            next_page: AtomicU64::new(0),
        }
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn page_start(&self, page: u64) -> u64 {
        self.heap_offset + page * self.page_size
    }

    /// Pages handed out so far.
    pub fn num_pages(&self) -> u64 {
        self.next_page.load(Ordering::Acquire)
    }

    pub fn worker(&self) -> WorkerAllocator<'_> {
        WorkerAllocator {
            shared: self,
            page: None,
            cursor: 0,
            regions: Vec::new(),
        }
    }
}

/// Per-worker cursor. Not shared between threads.
#[derive(Debug)]
pub struct WorkerAllocator<'a> {
    shared: &'a PageAllocator,
    page: Option<u64>,
    cursor: u64,
    regions: Vec<Region>,
}

impl WorkerAllocator<'_> {
    pub fn current_page(&self) -> Option<u64> {
        self.page
    }

    /// Allocates `len >= 1` bytes.
    pub fn allocate(&mut self, len: u64) -> Placement {
        assert!(len >= 1, "zero-length allocation");
        let page_size = self.shared.page_size;
        let placement = if len > page_size {
            let pages = len.div_ceil(page_size);
            let first_page = self.shared.next_page.fetch_add(pages, Ordering::AcqRel);
            Placement::Oversize {
                offset: self.shared.page_start(first_page),
                first_page,
                pages,
            }
        } else {
            match self.page {
                Some(page) if self.cursor + len <= page_size => {
                    let page_offset = self.cursor;
                    self.cursor += len;
                    Placement::InPage {
                        offset: self.shared.page_start(page) + page_offset,
                        page,
                        page_offset,
                        opened: false,
                        closed: None,
                    }
                }
                previous => {
                    let page = self.shared.next_page.fetch_add(1, Ordering::AcqRel);
                    self.page = Some(page);
                    self.cursor = len;
                    Placement::InPage {
                        offset: self.shared.page_start(page),
                        page,
                        page_offset: 0,
                        opened: true,
                        closed: previous,
                    }
                }
            }
        };
        self.regions.push(Region {
            offset: placement.offset(),
            len,
        });
        placement
    }

    /// Regions allocated by this worker, in allocation order.
    pub fn finish(self) -> (Option<u64>, Vec<Region>) {
        (self.page, self.regions)
    }
}
