//! Shared fixtures for the benchmarks.

use facaid_core::generator::{record_at, DatasetRecord};

/// A record with at least `min_rects` rectangles, for stable workloads.
pub fn sizable_record(min_rects: usize) -> DatasetRecord {
    (0..).map(|i| record_at(2024, i)).find(|r| r.layout.len() >= min_rects).expect("generator yields large facades")
}
