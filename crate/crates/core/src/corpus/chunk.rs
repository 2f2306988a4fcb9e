use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::partition::{Partitions, Passage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSizes {
    pub forget: usize,
    pub retain: usize,
    pub unrelated: usize,
}

impl ChunkSizes {
    pub fn validate(&self) -> Result<()> {
        if self.forget == 0 {
            return Err(Error::Config("forget batch size must be at least 1".into()));
        }
        if self.unrelated == 0 {
            return Err(Error::Config("unrelated batch size must be at least 1".into()));
        }
        if !self.retain.is_multiple_of(self.forget) || self.retain / self.forget < 2 {
            return Err(Error::Config(format!(
                "retain batch size {} must be n * forget batch size {} with n > 1",
                self.retain, self.forget
            )));
        }
        Ok(())
    }

    /// The retain-to-forget ratio n.
    pub fn ratio(&self) -> usize {
        self.retain / self.forget
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForgetMember {
    pub passage: Passage,
    pub adversarial: bool,
}

/// One optimizer step's worth of data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataChunk {
    pub chunk_index: u64,
    pub epoch: u64,
    pub forget_batch: Vec<ForgetMember>,
    pub retain_batch: Vec<Passage>,
    /// Positions of `retain_batch` members in the retain pool.
    pub retain_indices: Vec<usize>,
    pub unrelated_batch: Vec<Passage>,
}

/// Deterministic, endless stream of data chunks.
///
/// The forget pool is consumed in seeded shuffled epochs; a final short
/// slice of an epoch wraps to the start of the same epoch's order so every
/// chunk is full. Retain and unrelated pools are shuffled once and then read
/// cyclically.
#[derive(Debug, Clone)]
pub struct ChunkStream {
    pools: Partitions,
    sizes: ChunkSizes,
    rng: ChaCha8Rng,
    adversarial_per_chunk: usize,
    forget_order: Vec<usize>,
    retain_order: Vec<usize>,
    unrelated_order: Vec<usize>,
    epoch: u64,
    chunk_in_epoch: usize,
    chunk_index: u64,
    retain_cursor: usize,
    unrelated_cursor: usize,
}

impl ChunkStream {
    pub fn new(pools: Partitions, sizes: ChunkSizes, seed: u64) -> Result<Self> {
        sizes.validate()?;
        if pools.forget.is_empty() || pools.retain.is_empty() || pools.unrelated.is_empty() {
            return Err(Error::EmptyBatch("chunk stream pools must be non-empty"));
        }
        let adversarial_per_chunk =
            (pools.adversarial_fraction * sizes.forget as f64 + 1e-9).floor() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut retain_order: Vec<usize> = (0..pools.retain.len()).collect();
        retain_order.shuffle(&mut rng);
        let mut unrelated_order: Vec<usize> = (0..pools.unrelated.len()).collect();
        unrelated_order.shuffle(&mut rng);
        let mut forget_order: Vec<usize> = (0..pools.forget.len()).collect();
        forget_order.shuffle(&mut rng);
        Ok(Self {
            pools,
            sizes,
            rng,
            adversarial_per_chunk,
            forget_order,
            retain_order,
            unrelated_order,
            epoch: 0,
            chunk_in_epoch: 0,
            chunk_index: 0,
            retain_cursor: 0,
            unrelated_cursor: 0,
        })
    }

    pub fn pools(&self) -> &Partitions {
        &self.pools
    }

    pub fn sizes(&self) -> ChunkSizes {
        self.sizes
    }

    /// Post-shuffle retain order; chunk k reads positions
    /// `k * B_r .. (k + 1) * B_r` of it, modulo its length.
    pub fn retain_order(&self) -> &[usize] {
        &self.retain_order
    }

    pub fn adversarial_per_chunk(&self) -> usize {
        self.adversarial_per_chunk
    }

    fn primaries_per_chunk(&self) -> usize {
        self.sizes.forget - self.adversarial_per_chunk
    }

    pub fn chunks_per_epoch(&self) -> usize {
        self.pools.forget.len().div_ceil(self.primaries_per_chunk())
    }

    /// Number of chunks emitted so far.
    pub fn position(&self) -> u64 {
        self.chunk_index
    }

    /// Advances the stream by `n` chunks without returning them.
    pub fn skip_chunks(&mut self, n: u64) {
        for _ in 0..n {
            self.next_chunk();
        }
    }

    pub fn next_chunk(&mut self) -> DataChunk {
        if self.chunk_in_epoch == self.chunks_per_epoch() {
            self.epoch += 1;
            self.chunk_in_epoch = 0;
            self.forget_order.shuffle(&mut self.rng);
        }
        let per = self.primaries_per_chunk();
        let n_forget = self.forget_order.len();
        let start = self.chunk_in_epoch * per;
        let picks: Vec<usize> = (0..per)
            .map(|j| self.forget_order[(start + j) % n_forget])
            .collect();

        let mut forget_batch: Vec<ForgetMember> = picks
            .iter()
            .map(|&i| ForgetMember {
                passage: self.pools.forget[i].primary.clone(),
                adversarial: false,
            })
            .collect();
        if self.adversarial_per_chunk > 0 {
            let chosen = index::sample(&mut self.rng, per, self.adversarial_per_chunk);
            for j in chosen.iter() {
                forget_batch.push(ForgetMember {
                    passage: self.pools.forget[picks[j]].counterpart.clone(),
                    adversarial: true,
                });
            }
        }

        let n_retain = self.retain_order.len();
        let retain_indices: Vec<usize> = (0..self.sizes.retain)
            .map(|j| self.retain_order[(self.retain_cursor + j) % n_retain])
            .collect();
        self.retain_cursor = (self.retain_cursor + self.sizes.retain) % n_retain;
        let retain_batch = retain_indices
            .iter()
            .map(|&i| self.pools.retain[i].clone())
            .collect();

        let n_unrel = self.unrelated_order.len();
        let unrelated_batch = (0..self.sizes.unrelated)
            .map(|j| {
                let i = self.unrelated_order[(self.unrelated_cursor + j) % n_unrel];
                self.pools.unrelated[i].clone()
            })
            .collect();
        self.unrelated_cursor = (self.unrelated_cursor + self.sizes.unrelated) % n_unrel;

        let chunk = DataChunk {
            chunk_index: self.chunk_index,
            epoch: self.epoch,
            forget_batch,
            retain_batch,
            retain_indices,
            unrelated_batch,
        };
        self.chunk_index += 1;
        self.chunk_in_epoch += 1;
        chunk
    }
}

impl Iterator for ChunkStream {
    type Item = DataChunk;

    fn next(&mut self) -> Option<DataChunk> {
        Some(self.next_chunk())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::partition::{build_partitions, PartitionState, Role};
    use crate::corpus::{BiasType, StereoInstance};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn instances(n: usize) -> Vec<StereoInstance> {
        (0..n)
            .map(|i| StereoInstance {
                id: format!("i{i}"),
                bias_type: BiasType::STEREOSET[i % 4],
                context: "c".into(),
                stereotype: format!("s{i}"),
                anti_stereotype: format!("a{i}"),
                unrelated: format!("u{i}"),
            })
            .collect()
    }

    fn sizes(f: usize, r: usize, u: usize) -> ChunkSizes {
        ChunkSizes {
            forget: f,
            retain: r,
            unrelated: u,
        }
    }

    #[test]
    fn cyclic_retain_sampling() {
        let pools = build_partitions(&instances(10), &PartitionState::default(), 0.0).unwrap();
        let mut s = ChunkStream::new(pools, sizes(4, 28, 4), 3).unwrap();
        let order = s.retain_order().to_vec();
        let chunk = s.next_chunk();
        let expect: Vec<usize> = (0..10).chain(0..10).chain(0..8).map(|k| order[k]).collect();
        assert_eq!(chunk.retain_indices, expect);
        assert_eq!(chunk.retain_batch.len(), 28);
        // second chunk continues where the first stopped
        let chunk = s.next_chunk();
        assert_eq!(chunk.retain_indices[0], order[8]);
    }

    #[test]
    fn epoch_length() {
        let pools = build_partitions(&instances(8), &PartitionState::default(), 0.0).unwrap();
        let mut s = ChunkStream::new(pools, sizes(4, 8, 4), 0).unwrap();
        assert_eq!(s.chunks_per_epoch(), 2);
        let epochs: Vec<u64> = (0..5).map(|_| s.next_chunk().epoch).collect();
        assert_eq!(epochs, vec![0, 0, 1, 1, 2]);
    }

    #[test]
    fn epoch_covers_every_forget_item() {
        let pools = build_partitions(&instances(8), &PartitionState::default(), 0.0).unwrap();
        let mut s = ChunkStream::new(pools, sizes(4, 8, 4), 11).unwrap();
        let ids: HashSet<String> = (0..2)
            .flat_map(|_| s.next_chunk().forget_batch)
            .map(|m| m.passage.instance_id)
            .collect();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn seeded_determinism() {
        let pools = build_partitions(&instances(13), &PartitionState::default(), 0.25).unwrap();
        let a: Vec<DataChunk> = ChunkStream::new(pools.clone(), sizes(4, 12, 4), 7)
            .unwrap()
            .take(20)
            .collect();
        let b: Vec<DataChunk> = ChunkStream::new(pools.clone(), sizes(4, 12, 4), 7)
            .unwrap()
            .take(20)
            .collect();
        assert_eq!(a, b);
        let c: Vec<DataChunk> = ChunkStream::new(pools, sizes(4, 12, 4), 8)
            .unwrap()
            .take(20)
            .collect();
        assert_ne!(a, c);
    }

    #[test]
    fn skip_matches_consumption() {
        let pools = build_partitions(&instances(9), &PartitionState::default(), 0.25).unwrap();
        let mut a = ChunkStream::new(pools.clone(), sizes(4, 8, 2), 5).unwrap();
        let mut b = ChunkStream::new(pools, sizes(4, 8, 2), 5).unwrap();
        for _ in 0..7 {
            a.next_chunk();
        }
        b.skip_chunks(7);
        assert_eq!(a.next_chunk(), b.next_chunk());
    }

    #[test]
    fn one_adversarial_member_per_batch_of_four() {
        let pools = build_partitions(&instances(40), &PartitionState::default(), 0.25).unwrap();
        let s = ChunkStream::new(pools, sizes(4, 28, 4), 42).unwrap();
        for chunk in s.take(50) {
            assert_eq!(chunk.forget_batch.len(), 4);
            let adv: Vec<_> = chunk.forget_batch.iter().filter(|m| m.adversarial).collect();
            assert_eq!(adv.len(), 1);
            assert_eq!(adv[0].passage.role, Role::AntiStereotype);
            let anti = chunk
                .forget_batch
                .iter()
                .filter(|m| m.passage.role == Role::AntiStereotype)
                .count();
            assert_eq!(anti, 1);
        }
    }

    #[test]
    fn bad_sizes_rejected() {
        let pools = build_partitions(&instances(4), &PartitionState::default(), 0.0).unwrap();
        assert!(ChunkStream::new(pools.clone(), sizes(4, 6, 4), 0).is_err());
        assert!(ChunkStream::new(pools.clone(), sizes(4, 4, 4), 0).is_err());
        assert!(ChunkStream::new(pools.clone(), sizes(0, 4, 4), 0).is_err());
        assert!(ChunkStream::new(pools, sizes(2, 4, 0), 0).is_err());
    }

    proptest! {
        #[test]
        fn chunk_invariants(
            n in 1usize..30,
            bf in 1usize..8,
            ratio in 2usize..5,
            frac in 0.0f64..0.49,
            seed in any::<u64>(),
        ) {
            let pools = build_partitions(&instances(n), &PartitionState::default(), frac).unwrap();
            let s = ChunkStream::new(pools, sizes(bf, bf * ratio, 3), seed).unwrap();
            let per_epoch = s.chunks_per_epoch();
            let mut primaries_by_epoch: std::collections::HashMap<u64, HashSet<String>> = Default::default();
            let chunks: Vec<DataChunk> = s.take(per_epoch * 2).collect();
            for c in &chunks {
                prop_assert_eq!(c.forget_batch.len(), bf);
                prop_assert_eq!(c.retain_batch.len(), ratio * bf);
                prop_assert_eq!(c.unrelated_batch.len(), 3);
                let adv = c.forget_batch.iter().filter(|m| m.adversarial).count();
                prop_assert!((adv as f64) / (bf as f64) <= frac + 1.0 / bf as f64);
                for m in c.forget_batch.iter().filter(|m| !m.adversarial) {
                    primaries_by_epoch.entry(c.epoch).or_default().insert(m.passage.instance_id.clone());
                }
            }
            for c in &chunks {
                for m in c.forget_batch.iter().filter(|m| m.adversarial) {
                    prop_assert!(primaries_by_epoch[&c.epoch].contains(&m.passage.instance_id));
                }
            }
        }
    }
}
