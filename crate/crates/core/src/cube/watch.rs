use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};

use super::{CubeManifest, DONE_FILE};

/// A complete generation directory newer than the one being served.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReloadTrigger {
    pub generation: u64,
    pub dir: PathBuf,
}

/// Find the newest complete generation under `root` that is newer than
/// `current`. A subdirectory counts once it holds the `DONE` sentinel and a
/// readable manifest.
pub fn scan_latest(root: &Path, current: u64) -> io::Result<Option<ReloadTrigger>> {
    let mut best: Option<ReloadTrigger> = None;
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        let dir = entry.path();
        if !dir.is_dir() || !dir.join(DONE_FILE).is_file() {
            continue;
        }
        let manifest = match CubeManifest::read(&dir) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("skipping {}: {e}", dir.display());
                continue;
            }
        };
        if manifest.generation > current
            && best.as_ref().is_none_or(|b| manifest.generation > b.generation)
        {
            best = Some(ReloadTrigger {
                generation: manifest.generation,
                dir,
            });
        }
    }
    Ok(best)
}

/// Background poller that emits a [`ReloadTrigger`] whenever a newer
/// complete generation appears under the model root.
pub struct ModelWatcher {
    triggers: Receiver<ReloadTrigger>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl ModelWatcher {
    pub fn spawn(root: PathBuf, poll_interval: Duration, current_generation: u64) -> Self {
        let (tx, rx) = crossbeam_channel::unbounded();
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = thread::Builder::new()
            .name("model-watch".into())
            .spawn(move || watch_loop(&root, poll_interval, current_generation, &tx, &flag))
            .expect("spawn watcher thread");
        Self {
            triggers: rx,
            stop,
            handle: Some(handle),
        }
    }

    pub fn triggers(&self) -> &Receiver<ReloadTrigger> {
        &self.triggers
    }
}

fn watch_loop(root: &Path, poll: Duration, mut last: u64, tx: &Sender<ReloadTrigger>, stop: &AtomicBool) {
    while !stop.load(Ordering::Relaxed) {
        match scan_latest(root, last) {
            Ok(Some(trigger)) => {
                last = trigger.generation;
                if tx.send(trigger).is_err() {
                    return;
                }
            }
            Ok(None) => {}
            Err(e) => log::warn!("model watch on {} failed, retrying: {e}", root.display()),
        }
        // Sleep in short slices so dropping the watcher is prompt.
        let mut slept = Duration::ZERO;
        while slept < poll && !stop.load(Ordering::Relaxed) {
            let step = (poll - slept).min(Duration::from_millis(20));
            thread::sleep(step);
            slept += step;
        }
    }
}

impl Drop for ModelWatcher {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
