//! Two-level memory hierarchy with an element-granular cache of capacity `M`.
//!
//! The simulator only tracks residency and transfer counts; kernels keep the
//! actual values themselves. `load` and `store` correspond to the Input and
//! Output moves of the red-blue pebble game, `evict` to Delete, and `alloc`
//! to placing freshly computed values in cache.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Name of a live cache region, e.g. `S[2,0]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tag {
    name: Cow<'static, str>,
    index: Option<(usize, usize)>,
}

impl Tag {
    pub fn new(name: &'static str, i: usize, j: usize) -> Self {
        Self {
            name: Cow::Borrowed(name),
            index: Some((i, j)),
        }
    }

    pub fn named(name: impl Into<Cow<'static, str>>) -> Self {
        Self {
            name: name.into(),
            index: None,
        }
    }
}

impl From<&'static str> for Tag {
    fn from(name: &'static str) -> Self {
        Tag::named(name)
    }
}

impl From<String> for Tag {
    fn from(name: String) -> Self {
        Tag::named(name)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some((i, j)) => write!(f, "{}[{i},{j}]", self.name),
            None => write!(f, "{}", self.name),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("cache overflow placing {tag} ({size} elements): {resident} of {capacity} already resident")]
    CacheOverflow {
        tag: String,
        size: usize,
        resident: usize,
        capacity: usize,
    },
    #[error("region {0} is already resident")]
    DuplicateTag(String),
    #[error("region {0} is not resident")]
    UnknownTag(String),
    #[error("region {tag} holds {resident} elements, not {requested}")]
    SizeMismatch {
        tag: String,
        resident: usize,
        requested: usize,
    },
    #[error("region {0} must hold at least one element")]
    EmptyRegion(String),
}

/// Transfer counters; all three only ever grow during a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct IoCounter {
    /// Elements moved memory -> cache.
    pub reads: u64,
    /// Elements moved cache -> memory.
    pub writes: u64,
    pub peak_residency: usize,
}

impl IoCounter {
    pub fn total(&self) -> u64 {
        self.reads + self.writes
    }
}

#[derive(Debug, Clone)]
pub struct CacheSim {
    capacity: usize,
    resident: HashMap<Tag, usize>,
    used: usize,
    counter: IoCounter,
}

impl CacheSim {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            resident: HashMap::new(),
            used: 0,
            counter: IoCounter::default(),
        }
    }

    /// A cache that never overflows, for runs where only the counts matter.
    pub fn unbounded() -> Self {
        Self::new(usize::MAX)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn residency(&self) -> usize {
        self.used
    }

    pub fn is_resident(&self, tag: &Tag) -> bool {
        self.resident.contains_key(tag)
    }

    pub fn live_regions(&self) -> usize {
        self.resident.len()
    }

    fn place(&mut self, tag: Tag, size: usize) -> Result<(), SimError> {
        if size == 0 {
            return Err(SimError::EmptyRegion(tag.to_string()));
        }
        if self.resident.contains_key(&tag) {
            return Err(SimError::DuplicateTag(tag.to_string()));
        }
        if size > self.capacity - self.used {
            return Err(SimError::CacheOverflow {
                tag: tag.to_string(),
                size,
                resident: self.used,
                capacity: self.capacity,
            });
        }
        self.used += size;
        self.counter.peak_residency = self.counter.peak_residency.max(self.used);
        self.resident.insert(tag, size);
        Ok(())
    }

    /// Reads `size` elements from memory into a new region.
    pub fn load(&mut self, tag: impl Into<Tag>, size: usize) -> Result<(), SimError> {
        self.place(tag.into(), size)?;
        self.counter.reads += size as u64;
        Ok(())
    }

    /// Creates a region in cache without any transfer (initialised accumulators).
    pub fn alloc(&mut self, tag: impl Into<Tag>, size: usize) -> Result<(), SimError> {
        self.place(tag.into(), size)
    }

    /// Writes a resident region back to memory; the region stays resident.
    pub fn store(&mut self, tag: &Tag, size: usize) -> Result<(), SimError> {
        match self.resident.get(tag) {
            None => Err(SimError::UnknownTag(tag.to_string())),
            Some(&resident) if resident != size => Err(SimError::SizeMismatch {
                tag: tag.to_string(),
                resident,
                requested: size,
            }),
            Some(_) => {
                self.counter.writes += size as u64;
                Ok(())
            }
        }
    }

    pub fn evict(&mut self, tag: &Tag) -> Result<(), SimError> {
        let size = self
            .resident
            .remove(tag)
            .ok_or_else(|| SimError::UnknownTag(tag.to_string()))?;
        self.used -= size;
        Ok(())
    }

    pub fn snapshot(&self) -> IoCounter {
        self.counter
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn load_counts_reads() {
        let mut sim = CacheSim::new(16);
        sim.load("x", 4).unwrap();
        assert_eq!(sim.snapshot().reads, 4);
        assert_eq!(sim.residency(), 4);
    }

    #[test]
    fn load_over_capacity() {
        let mut sim = CacheSim::new(4);
        sim.load("a", 4).unwrap();
        assert!(matches!(sim.load("b", 1), Err(SimError::CacheOverflow { .. })));
        // a failed placement leaves the state untouched
        assert_eq!(sim.snapshot(), IoCounter { reads: 4, writes: 0, peak_residency: 4 });
    }

    #[test]
    fn rereads_are_counted() {
        let mut sim = CacheSim::new(16);
        sim.load("a", 8).unwrap();
        sim.evict(&"a".into()).unwrap();
        sim.load("a", 8).unwrap();
        assert_eq!(sim.snapshot().reads, 16);
    }

    #[test]
    fn store_after_load() {
        let mut sim = CacheSim::new(16);
        sim.load("x", 4).unwrap();
        sim.store(&"x".into(), 4).unwrap();
        let c = sim.snapshot();
        assert_eq!((c.reads, c.writes, c.peak_residency), (4, 4, 4));
        assert!(sim.is_resident(&"x".into()));
    }

    #[test]
    fn store_unknown_tag() {
        let mut sim = CacheSim::new(16);
        assert!(matches!(sim.store(&"x".into(), 4), Err(SimError::UnknownTag(_))));
        sim.alloc("y", 2).unwrap();
        assert!(matches!(sim.store(&"y".into(), 3), Err(SimError::SizeMismatch { .. })));
    }

    #[test]
    fn computed_results_cost_only_output() {
        let mut sim = CacheSim::new(16);
        sim.alloc("acc", 4).unwrap();
        sim.store(&"acc".into(), 4).unwrap();
        assert_eq!((sim.snapshot().reads, sim.snapshot().writes), (0, 4));
    }

    #[test]
    fn alloc_and_evict() {
        let mut sim = CacheSim::new(4);
        sim.alloc("s", 4).unwrap();
        assert_eq!(sim.residency(), 4);
        assert_eq!(sim.snapshot().total(), 0);
        sim.evict(&"s".into()).unwrap();
        assert_eq!(sim.residency(), 0);
        assert!(matches!(sim.alloc("s", 5), Err(SimError::CacheOverflow { .. })));
        assert!(matches!(sim.evict(&"s".into()), Err(SimError::UnknownTag(_))));
    }

    #[test]
    fn duplicate_and_empty_regions() {
        let mut sim = CacheSim::new(8);
        sim.alloc(Tag::new("S", 0, 1), 2).unwrap();
        assert!(matches!(sim.load(Tag::new("S", 0, 1), 2), Err(SimError::DuplicateTag(_))));
        assert!(matches!(sim.load("z", 0), Err(SimError::EmptyRegion(_))));
        sim.alloc(Tag::new("S", 1, 0), 2).unwrap();
        assert_eq!(sim.live_regions(), 2);
    }

    #[test]
    fn snapshot_values() {
        let mut sim = CacheSim::new(16);
        assert_eq!(sim.snapshot(), IoCounter::default());
        sim.load("x", 4).unwrap();
        sim.store(&"x".into(), 4).unwrap();
        sim.evict(&"x".into()).unwrap();
        assert_eq!(sim.snapshot(), IoCounter { reads: 4, writes: 4, peak_residency: 4 });
        assert_eq!(sim.residency(), 0);
    }

    #[test]
    fn unbounded_never_overflows() {
        let mut sim = CacheSim::unbounded();
        sim.alloc("huge", 1 << 40).unwrap();
        sim.load("more", 1 << 40).unwrap();
        assert_eq!(sim.snapshot().peak_residency, 1 << 41);
    }
}
