use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

/// Least-recently-used map with a fixed capacity.
#[derive(Debug)]
pub struct LruMap<K, V> {
    capacity: usize,
    clock: u64,
    entries: HashMap<K, (V, u64)>,
    recency: BTreeMap<u64, K>,
}

impl<K: Hash + Eq + Clone, V> LruMap<K, V> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            clock: 0,
            entries: HashMap::new(),
            recency: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    fn stamp(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Read and mark as most recently used.
    pub fn get(&mut self, key: &K) -> Option<&V> {
        let stamp = self.stamp();
        let (_, old) = self.entries.get(key)?;
        let old = *old;
        self.recency.remove(&old);
        self.recency.insert(stamp, key.clone());
        let entry = self.entries.get_mut(key)?;
        entry.1 = stamp;
        Some(&entry.0)
    }

    pub fn peek(&self, key: &K) -> Option<&V> {
        self.entries.get(key).map(|(v, _)| v)
    }

    /// Insert as most recently used; returns the evicted entry, if any.
    pub fn insert(&mut self, key: K, value: V) -> Option<(K, V)> {
        if self.capacity == 0 {
            return Some((key, value));
        }
        let stamp = self.stamp();
        if let Some((_, old)) = self.entries.get(&key) {
            self.recency.remove(&old.clone());
            self.recency.insert(stamp, key.clone());
            self.entries.insert(key, (value, stamp));
            return None;
        }
        let evicted = if self.entries.len() >= self.capacity {
            self.pop_lru()
        } else {
            None
        };
        self.recency.insert(stamp, key.clone());
        self.entries.insert(key, (value, stamp));
        evicted
    }

    pub fn pop_lru(&mut self) -> Option<(K, V)> {
        let (_, key) = self.recency.pop_first()?;
        let (value, _) = self.entries.remove(&key)?;
        Some((key, value))
    }

    pub fn remove(&mut self, key: &K) -> Option<V> {
        let (value, stamp) = self.entries.remove(key)?;
        self.recency.remove(&stamp);
        Some(value)
    }

    /// Keys from least to most recently used.
    pub fn keys_lru_order(&self) -> impl Iterator<Item = &K> {
        self.recency.values()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&K, &V) -> bool) -> Vec<K> {
        let doomed: Vec<K> = self
            .entries
            .iter()
            .filter(|(k, (v, _))| !keep(k, v))
            .map(|(k, _)| k.clone())
            .collect();
        for k in &doomed {
            self.remove(k);
        }
        doomed
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.recency.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evicts_least_recent() {
        let mut m = LruMap::new(2);
        m.insert(1, "a");
        m.insert(2, "b");
        m.get(&1);
        assert_eq!(m.insert(3, "c"), Some((2, "b")));
        assert_eq!(m.keys_lru_order().copied().collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn reinsert_refreshes() {
        let mut m = LruMap::new(2);
        m.insert(1, 1);
        m.insert(2, 2);
        m.insert(1, 10);
        assert_eq!(m.insert(3, 3), Some((2, 2)));
        assert_eq!(m.peek(&1), Some(&10));
    }
}
