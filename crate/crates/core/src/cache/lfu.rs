use std::collections::{BTreeSet, HashMap};
use std::hash::Hash;

#[derive(Debug)]
struct Slot<V> {
    value: V,
    freq: u64,
    inserted: u64,
}

/// Least-frequently-used map.
///
/// Eviction removes the resident key with the smallest access count; among
/// equal counts the earliest inserted key goes first. Every `aging_interval`
/// operations all counts are halved (never below 1) so that the hot set can
/// drift with traffic.
#[derive(Debug)]
pub struct LfuCache<K, V> {
    capacity: usize,
    aging_interval: u64,
    ops_since_aging: u64,
    next_insert: u64,
    slots: HashMap<K, Slot<V>>,
    order: BTreeSet<(u64, u64, K)>,
}

impl<K: Hash + Eq + Ord + Clone, V> LfuCache<K, V> {
    /// Aging interval defaults to ten times the capacity.
    pub fn new(capacity: usize) -> Self {
        Self::with_aging(capacity, (capacity as u64).saturating_mul(10))
    }

    /// `aging_interval == 0` disables aging.
    pub fn with_aging(capacity: usize, aging_interval: u64) -> Self {
        Self {
            capacity,
            aging_interval,
            ops_since_aging: 0,
            next_insert: 0,
            slots: HashMap::with_capacity(capacity.min(1 << 20)),
            order: BTreeSet::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.slots.contains_key(key)
    }

    pub fn frequency(&self, key: &K) -> Option<u64> {
        self.slots.get(key).map(|s| s.freq)
    }

    /// Smallest frequency among residents.
    pub fn min_frequency(&self) -> Option<u64> {
        self.order.iter().next().map(|(f, _, _)| *f)
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() >= self.capacity
    }

    fn tick(&mut self) {
        if self.aging_interval == 0 {
            return;
        }
        self.ops_since_aging += 1;
        if self.ops_since_aging >= self.aging_interval {
            self.ops_since_aging = 0;
            self.order.clear();
            for (k, slot) in self.slots.iter_mut() {
                slot.freq = (slot.freq / 2).max(1);
                self.order.insert((slot.freq, slot.inserted, k.clone()));
            }
        }
    }

    /// Count an access to a resident key and return its value.
    pub fn touch(&mut self, key: &K) -> Option<&V> {
        let slot = self.slots.get_mut(key)?;
        self.order.remove(&(slot.freq, slot.inserted, key.clone()));
        slot.freq += 1;
        self.order.insert((slot.freq, slot.inserted, key.clone()));
        self.tick();
        self.slots.get(key).map(|s| &s.value)
    }

    /// Read without counting an access.
    pub fn peek(&self, key: &K) -> Option<&V> {
        self.slots.get(key).map(|s| &s.value)
    }

    /// Insert with an initial count of 1. See [`LfuCache::insert_with_frequency`].
    pub fn insert(&mut self, key: K, value: V) -> Option<(K, V)> {
        self.insert_with_frequency(key, value, 1)
    }

    /// Insert or replace `key`. When a new key arrives at capacity the
    /// minimum-frequency resident is evicted and returned.
    pub fn insert_with_frequency(&mut self, key: K, value: V, freq: u64) -> Option<(K, V)> {
        if self.capacity == 0 {
            return Some((key, value));
        }
        let freq = freq.max(1);
        if let Some(slot) = self.slots.get_mut(&key) {
            self.order.remove(&(slot.freq, slot.inserted, key.clone()));
            slot.value = value;
            slot.freq = slot.freq.max(freq);
            self.order.insert((slot.freq, slot.inserted, key));
            self.tick();
            return None;
        }
        let evicted = if self.slots.len() >= self.capacity {
            self.pop_min()
        } else {
            None
        };
        let inserted = self.next_insert;
        self.next_insert += 1;
        self.order.insert((freq, inserted, key.clone()));
        self.slots.insert(key, Slot { value, freq, inserted });
        self.tick();
        evicted
    }

    /// Evict the minimum-frequency key.
    pub fn pop_min(&mut self) -> Option<(K, V)> {
        let (_, _, key) = self.order.pop_first()?;
        let slot = self.slots.remove(&key)?;
        Some((key, slot.value))
    }

    pub fn remove(&mut self, key: &K) -> Option<V> {
        let slot = self.slots.remove(key)?;
        self.order.remove(&(slot.freq, slot.inserted, key.clone()));
        Some(slot.value)
    }

    pub fn keys(&self) -> impl Iterator<Item = &K> {
        self.slots.keys()
    }

    pub fn clear(&mut self) {
        self.slots.clear();
        self.order.clear();
        self.ops_since_aging = 0;
    }
}
