//! Episodic memories, the coreset they form, and replay sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tasks::partition_sizes;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemoryPolicy {
    /// The last `m` examples in stream order.
    #[default]
    RingLast,
    /// A uniform sample of `m` examples (Algorithm R).
    Reservoir,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodicMemory {
    pub task_id: usize,
    pub capacity: usize,
    pub items: Batch,
}

impl EpisodicMemory {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Builds the episodic memory of one task from its training stream.
pub fn update_memory(
    task_id: usize,
    task_data: &Batch,
    capacity: usize,
    policy: MemoryPolicy,
    seed: u64,
) -> Result<EpisodicMemory> {
    if capacity == 0 {
        return Err(Error::InvalidArgument(
            "memory capacity must be >= 1".into(),
        ));
    }
    if task_data.is_empty() {
        return Err(Error::Empty("task data"));
    }
    let n = task_data.len();
    let keep: Vec<usize> = match policy {
        MemoryPolicy::RingLast => (n.saturating_sub(capacity)..n).collect(),
        MemoryPolicy::Reservoir => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut slots: Vec<usize> = (0..n.min(capacity)).collect();
            for i in capacity..n {
                let j = rng.random_range(0..=i);
                if j < capacity {
                    slots[j] = i;
                }
            }
            slots
        }
    };
    Ok(EpisodicMemory {
        task_id,
        capacity,
        items: task_data.select(&keep),
    })
}

/// Uniform draws with replacement.
pub fn sample_memory_batch<R: Rng + ?Sized>(
    mem: &EpisodicMemory,
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if mem.is_empty() {
        return Err(Error::Empty("episodic memory"));
    }
    let idx: Vec<usize> = (0..batch_size)
        .map(|_| rng.random_range(0..mem.len()))
        .collect();
    Ok(mem.items.select(&idx))
}

/// Union of all episodic memories so far, in task order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Coreset {
    memories: Vec<EpisodicMemory>,
}

impl Coreset {
    pub fn new() -> Self {
        Coreset::default()
    }

    pub fn push(&mut self, mem: EpisodicMemory) -> Result<()> {
        if let Some(last) = self.memories.last() {
            if mem.task_id <= last.task_id {
                return Err(Error::InvalidArgument(format!(
                    "memory for task {} added after task {}",
                    mem.task_id, last.task_id
                )));
            }
        }
        self.memories.push(mem);
        Ok(())
    }

    pub fn memories(&self) -> &[EpisodicMemory] {
        &self.memories
    }

    pub fn len(&self) -> usize {
        self.memories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memories.is_empty()
    }

    pub fn total_items(&self) -> usize {
        self.memories.iter().map(|m| m.len()).sum()
    }
}

/// Pools every stored example, shuffles, and deals `parts` near-equal
/// pseudo-memories (larger ones first).
pub fn split_replay_buffer<R: Rng + ?Sized>(
    coreset: &Coreset,
    parts: usize,
    rng: &mut R,
) -> Result<Vec<EpisodicMemory>> {
    let total = coreset.total_items();
    if parts == 0 || parts > total {
        return Err(Error::InvalidArgument(format!(
            "cannot split {total} stored examples into {parts} sub-buffers"
        )));
    }
    let dim = coreset.memories[0].items.dim();
    let mut pool = Batch::empty(dim);
    for m in &coreset.memories {
        pool.extend(&m.items);
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    let mut start = 0;
    Ok(partition_sizes(total, parts)
        .enumerate()
        .map(|(i, size)| {
            let items = pool.select(&order[start..start + size]);
            start += size;
            EpisodicMemory {
                task_id: i,
                capacity: size,
                items,
            }
        })
        .collect())
}
