//! Cube cache (two-level LFU) and query cache (LRU with expiry).

mod cube_cache;
mod lfu;
mod lru;
mod query_cache;

pub use cube_cache::{CacheCounters, CubeCache, CubeCacheConfig, CubeCacheError, CubeGet, HitLevel};
pub use lfu::LfuCache;
pub use lru::LruMap;
pub use query_cache::{QueryCache, QueryCacheConfig, QueryKey};
