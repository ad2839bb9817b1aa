//! Training-sample index and class-balanced batch sampling.
//!
//! Index files are JSON:
//!
//! ```json
//! { "num_keys": 88,
//!   "samples": [ { "video_id": "take1", "frame_index": 0, "active_keys": [39, 43] } ] }
//! ```
//!
//! `active_keys` lists the row indices (MIDI pitch minus 21) that are pressed at
//! that frame; all other keys are off.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::roll::PianoRoll;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub video_id: String,
    pub frame_index: usize,
    pub active_keys: Vec<u16>,
}

/// Balancing class: a sample joins the bucket of every key it has pressed, or
/// the silent bucket when none is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassBucket {
    Silent,
    Key(u16),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IndexFile", into = "IndexFile")]
pub struct DatasetIndex {
    num_keys: usize,
    samples: Vec<Sample>,
    buckets: BTreeMap<ClassBucket, Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    num_keys: usize,
    samples: Vec<Sample>,
}

impl TryFrom<IndexFile> for DatasetIndex {
    type Error = Error;

    fn try_from(f: IndexFile) -> Result<Self> {
        DatasetIndex::new(f.num_keys, f.samples)
    }
}

impl From<DatasetIndex> for IndexFile {
    fn from(d: DatasetIndex) -> Self {
        IndexFile {
            num_keys: d.num_keys,
            samples: d.samples,
        }
    }
}

impl DatasetIndex {
    pub fn new(num_keys: usize, samples: Vec<Sample>) -> Result<Self> {
        let mut index = DatasetIndex {
            num_keys,
            samples: Vec::with_capacity(samples.len()),
            buckets: BTreeMap::new(),
        };
        for s in samples {
            index.push(s)?;
        }
        Ok(index)
    }

    pub fn empty(num_keys: usize) -> Self {
        DatasetIndex {
            num_keys,
            samples: Vec::new(),
            buckets: BTreeMap::new(),
        }
    }

    fn push(&mut self, sample: Sample) -> Result<()> {
        if let Some(&k) = sample.active_keys.iter().find(|&&k| usize::from(k) >= self.num_keys) {
            return Err(Error::domain(format!(
                "sample {}:{} has key {k} outside 0..{}",
                sample.video_id, sample.frame_index, self.num_keys
            )));
        }
        let id = self.samples.len();
        if sample.active_keys.is_empty() {
            self.buckets.entry(ClassBucket::Silent).or_default().push(id);
        }
        for &k in &sample.active_keys {
            self.buckets.entry(ClassBucket::Key(k)).or_default().push(id);
        }
        self.samples.push(sample);
        Ok(())
    }

    /// Adds one sample per frame of an aligned roll.
    pub fn add_video(&mut self, video_id: &str, roll: &PianoRoll) -> Result<()> {
        if roll.num_keys() != self.num_keys {
            return Err(Error::domain(format!(
                "roll has {} keys, index expects {}",
                roll.num_keys(),
                self.num_keys
            )));
        }
        for t in 0..roll.num_frames() {
            let active_keys = (0..roll.num_keys())
                .filter(|&k| roll.is_active(k, t))
                .map(|k| k as u16)
                .collect();
            self.push(Sample {
                video_id: video_id.to_string(),
                frame_index: t,
                active_keys,
            })?;
        }
        Ok(())
    }

    pub fn num_keys(&self) -> usize {
        self.num_keys
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn buckets(&self) -> &BTreeMap<ClassBucket, Vec<usize>> {
        &self.buckets
    }

    /// Dense 0/1 label vector of sample `i`.
    pub fn label_vector(&self, i: usize) -> Vec<f32> {
        let mut v = vec![0.0; self.num_keys];
        for &k in &self.samples[i].active_keys {
            v[usize::from(k)] = 1.0;
        }
        v
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Endless stream of class-balanced batches of sample indices.
///
/// Every batch spreads its slots evenly over the class buckets. Each bucket is
/// drawn from a private shuffled queue that is reshuffled when exhausted, so
/// frequent classes are subsampled and rare ones repeat.
pub struct BalancedBatches<'a> {
    index: &'a DatasetIndex,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<ClassBucket>,
    queues: BTreeMap<ClassBucket, (Vec<usize>, usize)>,
}

pub fn balanced_batches(index: &DatasetIndex, batch_size: usize, seed: u64) -> Result<BalancedBatches<'_>> {
    if index.is_empty() {
        return Err(Error::domain("cannot sample batches from an empty dataset"));
    }
    if batch_size == 0 {
        return Err(Error::domain("batch size must be positive"));
    }
    Ok(BalancedBatches {
        index,
        batch_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
        order: index.buckets.keys().copied().collect(),
        queues: BTreeMap::new(),
    })
}

impl BalancedBatches<'_> {
    fn draw(&mut self, bucket: ClassBucket) -> usize {
        let members = &self.index.buckets[&bucket];
        let (queue, pos) = self.queues.entry(bucket).or_insert_with(|| (Vec::new(), 0));
        if *pos >= queue.len() {
            queue.clone_from(members);
            queue.shuffle(&mut self.rng);
            *pos = 0;
        }
        *pos += 1;
        queue[*pos - 1]
    }
}

impl Iterator for BalancedBatches<'_> {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let n_buckets = self.order.len();
        let mut order = self.order.clone();
        order.shuffle(&mut self.rng);
        let base = self.batch_size / n_buckets;
        let extra = self.batch_size % n_buckets;
        let mut batch = Vec::with_capacity(self.batch_size);
        for (i, &bucket) in order.iter().enumerate() {
            let count = base + usize::from(i < extra);
            for _ in 0..count {
                let s = self.draw(bucket);
                batch.push(s);
            }
        }
        Some(batch)
    }
}
