//! Fixed-capacity replay memory filled by reservoir sampling.

use std::io::{self, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::binio;

const DUMP_MAGIC: &[u8; 8] = b"SDREPL01";

#[derive(Debug, Error)]
pub enum ReplayError {
    /// Nothing stored yet; callers skip the memory terms.
    #[error("replay memory is empty")]
    Empty,
    #[error("buffer dump: {0}")]
    Dump(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    /// Raw input row, before any normalization.
    pub input: Vec<f64>,
    pub label: usize,
    /// Logits at insertion time (DER only).
    pub logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<ReplayItem>,
    n_seen: u64,
    rng: ChaCha8Rng,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            n_seen: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn items(&self) -> &[ReplayItem] {
        &self.items
    }

    /// Algorithm R: keep while filling, afterwards replace a uniform slot
    /// `j ∈ [0, n_seen]` when `j < capacity`.
    pub fn reservoir_insert(&mut self, item: ReplayItem) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else if self.capacity > 0 {
            let j = self.rng.random_range(0..=self.n_seen);
            if j < self.capacity as u64 {
                self.items[j as usize] = item;
            }
        }
        self.n_seen += 1;
    }

    /// `k` indices drawn uniformly with replacement.
    pub fn sample_indices(&self, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>, ReplayError> {
        if k == 0 {
            return Ok(Vec::new());
        }
        if self.items.is_empty() {
            return Err(ReplayError::Empty);
        }
        Ok((0..k).map(|_| rng.random_range(0..self.items.len())).collect())
    }

    pub fn sample_batch(&self, k: usize, rng: &mut impl Rng) -> Result<Vec<&ReplayItem>, ReplayError> {
        Ok(self
            .sample_indices(k, rng)?
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }

    /// Serializes items, counters and the insertion RNG position so a
    /// restored buffer continues the exact same insertion sequence.
    pub fn dump(&self, w: &mut impl Write) -> Result<(), ReplayError> {
        binio::write_magic(w, DUMP_MAGIC)?;
        binio::write_u32(w, self.capacity)?;
        binio::write_u64(w, self.n_seen)?;
        w.write_all(&self.rng.get_seed())?;
        binio::write_u64(w, self.rng.get_stream())?;
        w.write_all(&self.rng.get_word_pos().to_le_bytes())?;
        binio::write_u32(w, self.items.len())?;
        for item in &self.items {
            binio::write_u32(w, item.label)?;
            binio::write_u32(w, item.input.len())?;
            binio::write_f64s(w, &item.input)?;
            match &item.logits {
                Some(l) => {
                    binio::write_u8(w, 1)?;
                    binio::write_u32(w, l.len())?;
                    binio::write_f64s(w, l)?;
                }
                None => binio::write_u8(w, 0)?,
            }
        }
        Ok(())
    }

    pub fn restore(r: &mut impl Read) -> Result<Self, ReplayError> {
        binio::read_magic(r, DUMP_MAGIC)?;
        let capacity = binio::read_u32(r)?;
        let n_seen = binio::read_u64(r)?;
        let mut seed = [0u8; 32];
        r.read_exact(&mut seed)?;
        let stream = binio::read_u64(r)?;
        let mut pos = [0u8; 16];
        r.read_exact(&mut pos)?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(u128::from_le_bytes(pos));
        let len = binio::read_u32(r)?;
        if len > capacity || len as u64 > n_seen {
            return Err(binio::invalid(format!(
                "{len} items exceed capacity {capacity} or n_seen {n_seen}"
            ))
            .into());
        }
        let mut items = Vec::with_capacity(capacity);
        for _ in 0..len {
            let label = binio::read_u32(r)?;
            let n = binio::read_u32(r)?;
            let input = binio::read_f64s(r, n)?;
            let logits = match binio::read_u8(r)? {
                0 => None,
                1 => {
                    let n = binio::read_u32(r)?;
                    Some(binio::read_f64s(r, n)?)
                }
                t => return Err(binio::invalid(format!("bad logits flag {t}")).into()),
            };
            items.push(ReplayItem {
                input,
                label,
                logits,
            });
        }
        Ok(Self {
            capacity,
            items,
            n_seen,
            rng,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(i: usize) -> ReplayItem {
        ReplayItem {
            input: vec![i as f64],
            label: i,
            logits: None,
        }
    }

    #[test]
    fn fill_phase_keeps_everything() {
        let mut buf = ReplayBuffer::new(5, 0);
        for i in 0..5 {
            buf.reservoir_insert(item(i));
        }
        let labels: Vec<usize> = buf.items().iter().map(|it| it.label).collect();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        buf.reservoir_insert(item(5));
        assert_eq!(buf.len(), 5);
        assert_eq!(buf.n_seen(), 6);
    }

    #[test]
    fn zero_capacity_discards() {
        let mut buf = ReplayBuffer::new(0, 0);
        for i in 0..10 {
            buf.reservoir_insert(item(i));
        }
        assert!(buf.is_empty());
        assert_eq!(buf.n_seen(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(buf.sample_batch(3, &mut rng), Err(ReplayError::Empty)));
    }

    #[test]
    fn single_item_is_repeated() {
        let mut buf = ReplayBuffer::new(3, 0);
        buf.reservoir_insert(item(7));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = buf.sample_batch(4, &mut rng).unwrap();
        assert_eq!(batch.len(), 4);
        assert!(batch.iter().all(|it| it.label == 7));
    }

    #[test]
    fn zero_draws_is_empty() {
        let mut buf = ReplayBuffer::new(3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(buf.sample_batch(0, &mut rng).unwrap().is_empty());
        buf.reservoir_insert(item(1));
        assert!(buf.sample_batch(0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn sampling_does_not_mutate() {
        let mut buf = ReplayBuffer::new(4, 2);
        for i in 0..9 {
            buf.reservoir_insert(item(i));
        }
        let before = buf.items().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            buf.sample_batch(6, &mut rng).unwrap();
        }
        assert_eq!(buf.items(), &before[..]);
    }

    #[test]
    fn draws_are_uniform() {
        let mut buf = ReplayBuffer::new(20, 4);
        for i in 0..20 {
            buf.reservoir_insert(item(i));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 20];
        for i in buf.sample_indices(100_000, &mut rng).unwrap() {
            counts[i] += 1;
        }
        let (n, p) = (100_000.0, 1.0 / 20.0);
        let sigma = n * p * (1.0 - p);
        for c in counts {
            assert!((c as f64 - n * p).abs() < 3.0 * sigma.sqrt(), "count {c}");
        }
    }

    #[test]
    fn dump_restore_continues_identically() {
        let mut buf = ReplayBuffer::new(6, 9);
        for i in 0..15 {
            let mut it = item(i);
            if i % 2 == 0 {
                it.logits = Some(vec![0.5, -1.0]);
            }
            buf.reservoir_insert(it);
        }
        let mut bytes = Vec::new();
        buf.dump(&mut bytes).unwrap();
        let mut back = ReplayBuffer::restore(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.items(), buf.items());
        assert_eq!(back.n_seen(), buf.n_seen());
        for i in 15..60 {
            buf.reservoir_insert(item(i));
            back.reservoir_insert(item(i));
        }
        assert_eq!(back.items(), buf.items());

        assert!(ReplayBuffer::restore(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[3] = 0;
        assert!(ReplayBuffer::restore(&mut bad.as_slice()).is_err());
    }
}
