use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

/// Millisecond time source shared by the fence and, in simulation, by the
/// mock servers so that journal and server timestamps are comparable.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Deterministic clock that advances by one tick on every read, so any two
/// reads are strictly ordered.
#[derive(Debug, Default)]
pub struct LogicalClock {
    tick: AtomicU64,
}

impl LogicalClock {
    pub fn starting_at(tick: u64) -> Self {
        Self {
            tick: AtomicU64::new(tick),
        }
    }

    pub fn peek(&self) -> u64 {
        self.tick.load(Ordering::SeqCst)
    }
}

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.tick.fetch_add(1, Ordering::SeqCst) + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logical_clock_is_strictly_increasing() {
        let clock = LogicalClock::default();
        let a = clock.now_ms();
        let b = clock.now_ms();
        assert!(b > a);
        assert_eq!(clock.peek(), b);
    }
}
