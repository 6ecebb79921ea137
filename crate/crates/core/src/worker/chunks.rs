use serde::{Deserialize, Serialize};

/// A contiguous slice `[start, end)` of a dataset split's items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub start: u64,
    pub end: u64,
}

impl Chunk {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// The whole split as one chunk.
    pub fn whole(item_count: u64) -> Chunk {
        Chunk {
            index: 0,
            start: 0,
            end: item_count,
        }
    }
}

/// Splits `item_count` items into `min(parallelism, item_count)` chunks whose
/// sizes differ by at most one, larger chunks first.
pub fn plan_chunks(item_count: u64, parallelism: usize) -> Vec<Chunk> {
    let parallelism = parallelism.max(1) as u64;
    let count = parallelism.min(item_count);
    if count == 0 {
        return Vec::new();
    }
    let base = item_count / count;
    let extra = item_count % count;
    let mut start = 0;
    (0..count)
        .map(|i| {
            let size = base + u64::from(i < extra);
            let chunk = Chunk {
                index: i as usize,
                start,
                end: start + size,
            };
            start += size;
            chunk
        })
        .collect()
}
