use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::LruMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QueryKey {
    pub user: u64,
    pub item: u64,
    pub generation: u64,
}

#[derive(Debug, Clone, Copy)]
struct Cached {
    score: f32,
    inserted_at: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryCacheConfig {
    pub capacity: usize,
    /// Entries older than this many seconds are never returned.
    pub expire_window_s: f64,
    /// Default admission rule: only scores at or above this are cached.
    pub admission_threshold: f32,
    /// Run an expiry sweep every this many puts (0 disables the sweep).
    pub sweep_every: u64,
}

impl Default for QueryCacheConfig {
    fn default() -> Self {
        Self {
            capacity: 100_000,
            expire_window_s: 120.0,
            admission_threshold: 0.5,
            sweep_every: 4096,
        }
    }
}

#[derive(Debug, Default)]
struct Inner {
    map: Option<LruMap<QueryKey, Cached>>,
    by_user: HashMap<u64, HashSet<QueryKey>>,
    last_feedback: HashMap<u64, f64>,
    puts_since_sweep: u64,
}

impl Inner {
    fn map(&mut self) -> &mut LruMap<QueryKey, Cached> {
        self.map.as_mut().expect("initialised in new")
    }

    fn unindex(&mut self, key: &QueryKey) {
        if let Some(set) = self.by_user.get_mut(&key.user) {
            set.remove(key);
            if set.is_empty() {
                self.by_user.remove(&key.user);
            }
        }
    }
}

/// In-memory cache of final user-item scores.
///
/// Times are seconds on whatever clock the caller uses (wall clock when
/// serving, trace time when replaying), passed explicitly.
#[derive(Debug)]
pub struct QueryCache {
    config: QueryCacheConfig,
    window_bits: AtomicU64,
    inner: Mutex<Inner>,
    hits: AtomicU64,
    misses: AtomicU64,
    rejected: AtomicU64,
    invalidated: AtomicU64,
}

impl QueryCache {
    pub fn new(config: QueryCacheConfig) -> Self {
        let inner = Inner {
            map: Some(LruMap::new(config.capacity)),
            ..Inner::default()
        };
        Self {
            window_bits: AtomicU64::new(config.expire_window_s.to_bits()),
            config,
            inner: Mutex::new(inner),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            rejected: AtomicU64::new(0),
            invalidated: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &QueryCacheConfig {
        &self.config
    }

    pub fn expire_window(&self) -> f64 {
        f64::from_bits(self.window_bits.load(Ordering::Relaxed))
    }

    pub fn set_expire_window(&self, seconds: f64) {
        self.window_bits.store(seconds.to_bits(), Ordering::Relaxed);
    }

    /// Cached score iff the entry exists, is younger than the expiry window
    /// and has not been invalidated by feedback. A hit refreshes recency.
    pub fn get(&self, user: u64, item: u64, generation: u64, now: f64) -> Option<f32> {
        let key = QueryKey { user, item, generation };
        let window = self.expire_window();
        let mut inner = self.inner.lock();
        let found = inner.map().peek(&key).copied();
        let result = match found {
            Some(c) if now - c.inserted_at < window => {
                inner.map().get(&key);
                Some(c.score)
            }
            Some(_) => {
                inner.map().remove(&key);
                inner.unindex(&key);
                None
            }
            None => None,
        };
        drop(inner);
        match result {
            Some(_) => self.hits.fetch_add(1, Ordering::Relaxed),
            None => self.misses.fetch_add(1, Ordering::Relaxed),
        };
        result
    }

    /// Insert using the default admission threshold.
    pub fn put(&self, user: u64, item: u64, generation: u64, score: f32, now: f64) -> bool {
        let threshold = self.config.admission_threshold;
        self.put_with(user, item, generation, score, now, |s| s >= threshold)
    }

    /// Insert if `admit(score)` holds. `now` is the time the score was
    /// computed from; a score computed before the user's latest feedback is
    /// refused.
    pub fn put_with(
        &self,
        user: u64,
        item: u64,
        generation: u64,
        score: f32,
        now: f64,
        admit: impl Fn(f32) -> bool,
    ) -> bool {
        if !admit(score) {
            self.rejected.fetch_add(1, Ordering::Relaxed);
            return false;
        }
        let key = QueryKey { user, item, generation };
        let mut inner = self.inner.lock();
        if inner.last_feedback.get(&user).is_some_and(|&t| t >= now) {
            drop(inner);
            self.rejected.fetch_add(1, Ordering::Relaxed);
            return false;
        }
        if let Some((old, _)) = inner.map().insert(key, Cached { score, inserted_at: now }) {
            inner.unindex(&old);
        }
        inner.by_user.entry(user).or_default().insert(key);
        inner.puts_since_sweep += 1;
        if self.config.sweep_every > 0 && inner.puts_since_sweep >= self.config.sweep_every {
            inner.puts_since_sweep = 0;
            Self::sweep_locked(&mut inner, now, self.expire_window());
        }
        true
    }

    /// Drop every entry of `user`; returns how many were removed.
    pub fn feedback(&self, user: u64, _kind: &str, now: f64) -> usize {
        let mut inner = self.inner.lock();
        let prev = inner.last_feedback.entry(user).or_insert(now);
        if *prev < now {
            *prev = now;
        }
        let keys = inner.by_user.remove(&user).unwrap_or_default();
        for k in &keys {
            inner.map().remove(k);
        }
        drop(inner);
        self.invalidated.fetch_add(keys.len() as u64, Ordering::Relaxed);
        keys.len()
    }

    fn sweep_locked(inner: &mut Inner, now: f64, window: f64) -> usize {
        let removed = inner.map().retain(|_, c| now - c.inserted_at < window);
        for k in &removed {
            inner.unindex(k);
        }
        inner.last_feedback.retain(|_, t| now - *t < window);
        removed.len()
    }

    /// Remove expired entries eagerly.
    pub fn sweep(&self, now: f64) -> usize {
        let window = self.expire_window();
        Self::sweep_locked(&mut self.inner.lock(), now, window)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().map().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    pub fn invalidated(&self) -> u64 {
        self.invalidated.load(Ordering::Relaxed)
    }

    pub fn hit_ratio(&self) -> f64 {
        let h = self.hits() as f64;
        let total = h + self.misses() as f64;
        if total == 0.0 {
            0.0
        } else {
            h / total
        }
    }

    /// Keys from least to most recently used (diagnostics and tests).
    pub fn keys_lru_order(&self) -> Vec<QueryKey> {
        self.inner.lock().map().keys_lru_order().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache(capacity: usize) -> QueryCache {
        QueryCache::new(QueryCacheConfig {
            capacity,
            ..QueryCacheConfig::default()
        })
    }

    #[test]
    fn expiry_boundary_is_strict() {
        let c = cache(16);
        assert!(c.put(1, 10, 1, 0.9, 0.0));
        assert_eq!(c.get(1, 10, 1, 119.0), Some(0.9));
        assert_eq!(c.get(1, 10, 1, 120.0), None);
        assert!(c.put(1, 10, 1, 0.9, 0.0));
        assert_eq!(c.get(1, 10, 1, 121.0), None);
    }

    #[test]
    fn feedback_invalidates_user() {
        let c = cache(16);
        for item in 0..3 {
            c.put(7, item, 1, 0.8, 0.0);
        }
        c.put(8, 0, 1, 0.8, 0.0);
        assert_eq!(c.feedback(7, "click", 0.5), 3);
        for item in 0..3 {
            assert_eq!(c.get(7, item, 1, 1.0), None);
        }
        assert_eq!(c.get(8, 0, 1, 1.0), Some(0.8));
        assert_eq!(c.feedback(99, "unlike", 1.0), 0);
    }

    #[test]
    fn score_computed_before_feedback_is_refused() {
        let c = cache(16);
        c.feedback(7, "click", 10.0);
        assert!(!c.put(7, 1, 1, 0.9, 9.5));
        assert!(c.put(7, 1, 1, 0.9, 10.5));
    }

    #[test]
    fn admission_and_generation() {
        let c = cache(16);
        assert!(!c.put(1, 1, 1, 0.3, 0.0));
        assert_eq!(c.get(1, 1, 1, 1.0), None);
        assert!(c.put(1, 2, 1, 0.7, 0.0));
        assert_eq!(c.get(1, 2, 2, 1.0), None);
        assert!(c.put_with(1, 3, 1, 0.1, 0.0, |_| true));
    }

    #[test]
    fn lru_eviction_at_capacity() {
        let c = cache(2);
        c.put(1, 1, 1, 0.9, 0.0);
        c.put(1, 2, 1, 0.9, 0.0);
        c.get(1, 1, 1, 1.0);
        c.put(1, 3, 1, 0.9, 2.0);
        assert_eq!(c.get(1, 2, 1, 3.0), None);
        assert_eq!(c.get(1, 1, 1, 3.0), Some(0.9));
    }

    #[test]
    fn sweep_removes_expired() {
        let c = cache(16);
        c.put(1, 1, 1, 0.9, 0.0);
        c.put(1, 2, 1, 0.9, 100.0);
        assert_eq!(c.sweep(150.0), 1);
        assert_eq!(c.len(), 1);
    }
}
