//! Mixed-dataset batch sampler: a fixed number of samples from every
//! dataset, drawn without replacement within each dataset's epoch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::protocol::DatasetId;

pub const PER_DATASET: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("dataset {0} has no samples")]
    EmptyDataset(DatasetId),
    #[error("samples per dataset must be positive")]
    ZeroPerDataset,
}

/// Indices into each dataset's sample list, grouped by dataset in
/// [`DatasetId::ALL`] order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedBatch {
    pub items: Vec<(DatasetId, usize)>,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn composition(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for (ds, _) in &self.items {
            counts[ds.index()] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone)]
struct Stream {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Stream {
    fn next(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }
}

/// Each dataset owns an independent ChaCha stream derived from the seed, so
/// changing one dataset's size does not perturb the others' order.
#[derive(Debug, Clone)]
pub struct MixedBatchSampler {
    streams: Vec<Stream>,
    per_dataset: usize,
}

impl MixedBatchSampler {
    /// `sizes` is indexed like [`DatasetId::ALL`].
    pub fn new(sizes: [usize; 4], per_dataset: usize, seed: u64) -> Result<Self, SamplerError> {
        if per_dataset == 0 {
            return Err(SamplerError::ZeroPerDataset);
        }
        let streams = DatasetId::ALL
            .iter()
            .map(|&ds| {
                let n = sizes[ds.index()];
                if n == 0 {
                    return Err(SamplerError::EmptyDataset(ds));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1 + ds.index() as u64);
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                Ok(Stream { order, cursor: 0, rng })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { streams, per_dataset })
    }

    pub fn batch_size(&self) -> usize {
        self.per_dataset * self.streams.len()
    }

    pub fn next_batch(&mut self) -> MixedBatch {
        let mut items = Vec::with_capacity(self.batch_size());
        for (ds, stream) in DatasetId::ALL.iter().zip(&mut self.streams) {
            for _ in 0..self.per_dataset {
                items.push((*ds, stream.next()));
            }
        }
        MixedBatch { items }
    }
}
