use std::path::Path;
use std::sync::Arc;

use arc_swap::ArcSwap;
use parking_lot::Mutex;

use super::{CubeError, CubeSnapshot};

/// Something served under a monotonically increasing generation.
pub trait Generational {
    fn generation(&self) -> u64;
}

impl Generational for CubeSnapshot {
    fn generation(&self) -> u64 {
        CubeSnapshot::generation(self)
    }
}

/// Double buffer with publish-then-retire semantics.
///
/// Readers take an `Arc` to the current value and keep using it for as long
/// as they hold it; publishing swaps the pointer atomically, and the old value
/// is dropped once its last reader releases it.
pub struct DoubleBuffer<T> {
    current: ArcSwap<T>,
    writer: Mutex<()>,
}

impl<T: Generational> DoubleBuffer<T> {
    pub fn new(initial: T) -> Self {
        Self {
            current: ArcSwap::from_pointee(initial),
            writer: Mutex::new(()),
        }
    }

    pub fn current(&self) -> Arc<T> {
        self.current.load_full()
    }

    pub fn generation(&self) -> u64 {
        self.current.load().generation()
    }

    /// Publish a fully prepared value. Refused unless its generation is
    /// strictly newer than the one being served.
    pub fn publish(&self, next: T) -> Result<Arc<T>, CubeError> {
        self.publish_with(|| Ok(next))
    }

    /// Prepare and publish under the writer lock, so that concurrent reloads
    /// cannot interleave their generation checks.
    pub fn publish_with<F>(&self, prepare: F) -> Result<Arc<T>, CubeError>
    where
        F: FnOnce() -> Result<T, CubeError>,
    {
        let _guard = self.writer.lock();
        let next = prepare()?;
        let current = self.current.load().generation();
        if next.generation() <= current {
            return Err(CubeError::StaleGeneration {
                current,
                offered: next.generation(),
            });
        }
        let next = Arc::new(next);
        let old = self.current.swap(Arc::clone(&next));
        drop(old);
        Ok(next)
    }
}

/// Load, verify and publish the cube in `new_dir`.
///
/// The generation is checked from the manifest before any block is read, and
/// the old snapshot keeps serving on every error path.
pub fn hot_reload(buffer: &DoubleBuffer<CubeSnapshot>, new_dir: &Path) -> Result<Arc<CubeSnapshot>, CubeError> {
    buffer.publish_with(|| {
        let manifest = super::CubeManifest::read(new_dir)
            .map_err(|e| CubeError::VerificationFailed(format!("manifest unreadable: {e}")))?;
        let current = buffer.generation();
        if manifest.generation <= current {
            return Err(CubeError::StaleGeneration {
                current,
                offered: manifest.generation,
            });
        }
        CubeSnapshot::load(new_dir).map_err(|e| match e {
            CubeError::VerificationFailed(_) => e,
            other => CubeError::VerificationFailed(other.to_string()),
        })
    })
}
