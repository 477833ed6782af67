use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

/// Outcome of one cache probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Hit,
    Miss,
}

/// Least-frequently-used cache. A key's frequency is the number of times it
/// has been requested over the whole trace, kept across evictions; eviction
/// takes the resident with the lowest frequency, then the oldest last access,
/// then the smallest key.
#[derive(Debug, Clone)]
pub struct LfuCache<K> {
    capacity: usize,
    tick: u64,
    /// Request count and last request tick of every key seen.
    history: HashMap<K, (u64, u64)>,
    resident: BTreeSet<(u64, u64, K)>,
    len: usize,
}

impl<K: Copy + Ord + Hash> LfuCache<K> {
    pub fn new(capacity: usize) -> Self {
        LfuCache {
            capacity,
            tick: 0,
            history: HashMap::new(),
            resident: BTreeSet::new(),
            len: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn contains(&self, key: &K) -> bool {
        self.history
            .get(key)
            .is_some_and(|&(f, t)| self.resident.contains(&(f, t, *key)))
    }

    /// Requests so far of `key`, resident or not.
    pub fn frequency(&self, key: &K) -> Option<u64> {
        self.history.get(key).map(|e| e.0)
    }

    /// Records a request for `key` and reports whether it is resident. A miss
    /// does not insert.
    pub fn access(&mut self, key: K) -> Access {
        self.tick += 1;
        let entry = self.history.entry(key).or_insert((0, 0));
        let was = (entry.0, entry.1, key);
        entry.0 += 1;
        entry.1 = self.tick;
        let now = (entry.0, entry.1, key);
        if self.resident.remove(&was) {
            self.resident.insert(now);
            Access::Hit
        } else {
            Access::Miss
        }
    }

    /// Makes `key` resident, evicting per policy when full. Returns the
    /// evicted key. A zero-capacity cache stores nothing.
    pub fn insert(&mut self, key: K) -> Option<K> {
        if self.capacity == 0 || self.contains(&key) {
            return None;
        }
        let evicted = if self.len >= self.capacity {
            self.len -= 1;
            self.resident.pop_first().map(|v| v.2)
        } else {
            None
        };
        let &mut (f, t) = self.history.entry(key).or_insert((1, self.tick));
        self.resident.insert((f, t, key));
        self.len += 1;
        evicted
    }

    /// Request then insert on miss.
    pub fn lookup(&mut self, key: K) -> Access {
        let a = self.access(key);
        if a == Access::Miss {
            self.insert(key);
        }
        a
    }
}

/// Distinct ids in first-seen order and, for each input position, the index
/// of its id in that list.
pub fn dedup(ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut index: HashMap<usize, usize> = HashMap::new();
    let mut unique = Vec::new();
    let inverse = ids
        .iter()
        .map(|&id| {
            *index.entry(id).or_insert_with(|| {
                unique.push(id);
                unique.len() - 1
            })
        })
        .collect();
    (unique, inverse)
}
