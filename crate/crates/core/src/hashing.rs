//! Balanced hashing of entity ids onto two codebooks.
//!
//! Users occupy entity ids `[0, |U|)` and items `[|U|, |U| + |I|)`. An
//! entity `k` uses row `k mod b` of the first codebook and row
//! `k div ⌈N / b⌉` of the second. When `b ≥ ⌈N / b⌉` the pair is unique per
//! entity and no row is shared by more than `⌈N / b⌉` entities.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashSpec {
    num_entities: usize,
    bucket_size: usize,
    stride: usize,
}

/// Row pair `(k_p, k_q)` of one entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityIndex {
    pub p: usize,
    pub q: usize,
}

/// Number of entities mapped onto each row of either codebook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageHistogram {
    pub p: Vec<usize>,
    pub q: Vec<usize>,
}

impl UsageHistogram {
    pub fn max_p(&self) -> usize {
        self.p.iter().copied().max().unwrap_or(0)
    }

    pub fn max_q(&self) -> usize {
        self.q.iter().copied().max().unwrap_or(0)
    }
}

impl HashSpec {
    /// Rejects specs with `b < ⌈N / b⌉`, which would let two entities share
    /// a row pair.
    pub fn new(num_entities: usize, bucket_size: usize) -> Result<Self> {
        if num_entities == 0 {
            return Err(Error::HashSpec("no entities to index".into()));
        }
        if bucket_size == 0 {
            return Err(Error::HashSpec("bucket size must be positive".into()));
        }
        let stride = num_entities.div_ceil(bucket_size);
        if bucket_size < stride {
            return Err(Error::HashSpec(format!(
                "bucket size {bucket_size} is below ⌈{num_entities}/{bucket_size}⌉ = {stride}; \
                 row pairs would collide (smallest admissible bucket size is {})",
                Self::min_bucket_size(num_entities)
            )));
        }
        Ok(Self {
            num_entities,
            bucket_size,
            stride,
        })
    }

    /// Smallest `b` accepted by [`HashSpec::new`] for `num_entities`.
    pub fn min_bucket_size(num_entities: usize) -> usize {
        let mut b = (num_entities as f64).sqrt().floor().max(1.0) as usize;
        while b < num_entities.div_ceil(b) {
            b += 1;
        }
        b
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn bucket_size(&self) -> usize {
        self.bucket_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn hash(&self, k: usize) -> Result<EntityIndex> {
        if k >= self.num_entities {
            return Err(Error::EntityOutOfRange {
                id: k,
                num_entities: self.num_entities,
            });
        }
        Ok(self.index(k))
    }

    /// Unchecked variant of [`HashSpec::hash`] for ids already known valid.
    #[inline]
    pub fn index(&self, k: usize) -> EntityIndex {
        debug_assert!(k < self.num_entities);
        EntityIndex {
            p: k % self.bucket_size,
            q: k / self.stride,
        }
    }

    pub fn usage_histogram(&self) -> UsageHistogram {
        let mut p = vec![0; self.bucket_size];
        let mut q = vec![0; self.bucket_size];
        for k in 0..self.num_entities {
            let idx = self.index(k);
            p[idx.p] += 1;
            q[idx.q] += 1;
        }
        UsageHistogram { p, q }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn entity_zero_maps_to_origin() {
        let spec = HashSpec::new(1000, 40).unwrap();
        assert_eq!(spec.hash(0).unwrap(), EntityIndex { p: 0, q: 0 });
    }

    #[test]
    fn gowalla_sized_last_entity() {
        let spec = HashSpec::new(29_858 + 40_981, 5_000).unwrap();
        assert_eq!(spec.stride(), 15);
        assert_eq!(spec.hash(70_838).unwrap(), EntityIndex { p: 838, q: 4_722 });
    }

    #[test]
    fn small_spec_arithmetic() {
        let spec = HashSpec::new(2_625, 256).unwrap();
        assert_eq!(spec.stride(), 11);
        assert_eq!(spec.hash(300).unwrap(), EntityIndex { p: 44, q: 27 });
    }

    #[test]
    fn out_of_range_entity() {
        let spec = HashSpec::new(10, 5).unwrap();
        assert!(matches!(
            spec.hash(10),
            Err(Error::EntityOutOfRange { id: 10, .. })
        ));
    }

    #[test]
    fn rejects_colliding_specs() {
        assert!(HashSpec::new(100, 9).is_err());
        assert!(HashSpec::new(100, 10).is_ok());
        assert!(HashSpec::new(0, 10).is_err());
        assert!(HashSpec::new(10, 0).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = HashSpec::new(10, 5).unwrap().usage_histogram();
        assert!(h.p.iter().all(|&c| c == 2));

        let h = HashSpec::new(11, 5).unwrap().usage_histogram();
        assert_eq!(h.max_p(), 3);

        let h = HashSpec::new(70_839, 5_000).unwrap().usage_histogram();
        assert_eq!(h.max_p(), 15);
        assert_eq!(h.max_q(), 15);
    }

    #[test]
    fn min_bucket_size_is_tight() {
        for n in 1..3000 {
            let b = HashSpec::min_bucket_size(n);
            assert!(HashSpec::new(n, b).is_ok(), "n={n} b={b}");
            if b > 1 {
                assert!(HashSpec::new(n, b - 1).is_err(), "n={n} b={b}");
            }
        }
    }

    #[test]
    fn injective_on_small_grid() {
        for n in 1..400 {
            for b in HashSpec::min_bucket_size(n)..=n.min(60) + 1 {
                let spec = HashSpec::new(n, b).unwrap();
                let pairs: HashSet<_> = (0..n).map(|k| spec.index(k)).collect();
                assert_eq!(pairs.len(), n);
                assert!(pairs.iter().all(|i| i.p < b && i.q < b));
            }
        }
    }
}
