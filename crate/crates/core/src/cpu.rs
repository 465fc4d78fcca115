//! CPU-time accounting and synthetic work used by the desk-scale cost model.

use std::hint::black_box;
use std::time::Duration;

fn clock(id: libc::clockid_t) -> Duration {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: `ts` is a valid, writable timespec and `id` is a clock id
    // supported on every Linux kernel we target.
    let rc = unsafe { libc::clock_gettime(id, &mut ts) };
    if rc != 0 {
        return Duration::ZERO;
    }
    Duration::new(ts.tv_sec as u64, ts.tv_nsec as u32)
}

/// CPU time consumed by the calling thread.
pub fn thread_cpu_time() -> Duration {
    clock(libc::CLOCK_THREAD_CPUTIME_ID)
}

/// CPU time consumed by the whole process (all threads).
pub fn process_cpu_time() -> Duration {
    clock(libc::CLOCK_PROCESS_CPUTIME_ID)
}

/// Spend roughly `units` small units of CPU work. One unit is a handful of
/// integer mixing operations (on the order of a few nanoseconds); the result
/// is routed through `black_box` so the loop survives optimisation.
pub fn burn(units: u64) -> u64 {
    let mut acc: u64 = 0x9e37_79b9_7f4a_7c15;
    for i in 0..units {
        acc ^= i.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        acc = acc.rotate_left(27).wrapping_mul(0x94d0_49bb_1331_11eb);
    }
    black_box(acc)
}

/// Busy-wait on the calling thread until `dur` of thread CPU time has elapsed.
pub fn spin_cpu(dur: Duration) {
    if dur.is_zero() {
        return;
    }
    let start = thread_cpu_time();
    while thread_cpu_time().saturating_sub(start) < dur {
        burn(64);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spin_consumes_thread_cpu() {
        let before = thread_cpu_time();
        spin_cpu(Duration::from_millis(5));
        let used = thread_cpu_time() - before;
        assert!(used >= Duration::from_millis(5));
        assert!(process_cpu_time() >= used);
    }
}
