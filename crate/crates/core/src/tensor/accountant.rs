use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::TensorError;

/// Live/peak byte counter for tensor payloads.
///
/// Cloning yields another handle onto the same counters. Each training run
/// owns one accountant, so runs executing in parallel never share counters.
#[derive(Clone)]
pub struct MemoryAccountant {
    inner: Arc<Counters>,
}

struct Counters {
    live: AtomicU64,
    peak: AtomicU64,
    allocations: AtomicU64,
    budget: Option<u64>,
}

impl MemoryAccountant {
    pub fn new() -> MemoryAccountant {
        MemoryAccountant::with_budget(None)
    }

    /// An accountant that refuses any reservation pushing `live` past `budget`.
    pub fn with_budget(budget: Option<u64>) -> MemoryAccountant {
        MemoryAccountant {
            inner: Arc::new(Counters {
                live: AtomicU64::new(0),
                peak: AtomicU64::new(0),
                allocations: AtomicU64::new(0),
                budget,
            }),
        }
    }

    pub fn live_bytes(&self) -> u64 {
        self.inner.live.load(Ordering::SeqCst)
    }

    pub fn peak_bytes(&self) -> u64 {
        self.inner.peak.load(Ordering::SeqCst)
    }

    pub fn budget_bytes(&self) -> Option<u64> {
        self.inner.budget
    }

    /// Number of reservations made so far (including released ones).
    pub fn allocation_count(&self) -> u64 {
        self.inner.allocations.load(Ordering::SeqCst)
    }

    /// Registers `bytes`; the returned guard releases them on drop.
    ///
    /// A refused reservation leaves the counters untouched.
    pub fn reserve(&self, bytes: u64) -> Result<Allocation, TensorError> {
        let counters = &*self.inner;
        let mut current = counters.live.load(Ordering::SeqCst);
        loop {
            let next = current + bytes;
            if let Some(budget) = counters.budget {
                if next > budget {
                    return Err(TensorError::OutOfMemory {
                        requested: bytes,
                        live: current,
                        budget,
                    });
                }
            }
            match counters.live.compare_exchange_weak(
                current,
                next,
                Ordering::SeqCst,
                Ordering::SeqCst,
            ) {
                Ok(_) => {
                    counters.peak.fetch_max(next, Ordering::SeqCst);
                    counters.allocations.fetch_add(1, Ordering::SeqCst);
                    return Ok(Allocation {
                        accountant: self.clone(),
                        bytes,
                    });
                }
                Err(actual) => current = actual,
            }
        }
    }

    fn release(&self, bytes: u64) {
        self.inner.live.fetch_sub(bytes, Ordering::SeqCst);
    }

    pub fn same_as(&self, other: &MemoryAccountant) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Default for MemoryAccountant {
    fn default() -> Self {
        MemoryAccountant::new()
    }
}

impl fmt::Debug for MemoryAccountant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryAccountant")
            .field("live_bytes", &self.live_bytes())
            .field("peak_bytes", &self.peak_bytes())
            .field("budget_bytes", &self.inner.budget)
            .finish()
    }
}

/// Registered bytes, released when dropped.
pub struct Allocation {
    accountant: MemoryAccountant,
    bytes: u64,
}

impl Allocation {
    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn accountant(&self) -> &MemoryAccountant {
        &self.accountant
    }
}

impl Drop for Allocation {
    fn drop(&mut self) {
        self.accountant.release(self.bytes);
    }
}

impl fmt::Debug for Allocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Allocation({} bytes)", self.bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_high_water_mark() {
        let acct = MemoryAccountant::new();
        let a = acct.reserve(100).unwrap();
        let b = acct.reserve(50).unwrap();
        assert_eq!(acct.live_bytes(), 150);
        drop(a);
        assert_eq!(acct.live_bytes(), 50);
        assert_eq!(acct.peak_bytes(), 150);
        let c = acct.reserve(60).unwrap();
        assert_eq!(acct.peak_bytes(), 150);
        drop((b, c));
        assert_eq!(acct.live_bytes(), 0);
        assert_eq!(acct.allocation_count(), 3);
    }

    #[test]
    fn budget_refusal_rolls_back() {
        let acct = MemoryAccountant::with_budget(Some(100));
        let _a = acct.reserve(80).unwrap();
        let err = acct.reserve(40).unwrap_err();
        assert!(matches!(
            err,
            TensorError::OutOfMemory { requested: 40, live: 80, budget: 100 }
        ));
        assert_eq!(acct.live_bytes(), 80);
        assert_eq!(acct.peak_bytes(), 80);
        assert!(acct.reserve(20).is_ok());
    }

    #[test]
    fn concurrent_reservations_balance() {
        let acct = MemoryAccountant::new();
        std::thread::scope(|s| {
            for _ in 0..4 {
                let acct = acct.clone();
                s.spawn(move || {
                    for i in 0..1000 {
                        let _g = acct.reserve(i % 7 + 1).unwrap();
                    }
                });
            }
        });
        assert_eq!(acct.live_bytes(), 0);
        assert!(acct.peak_bytes() >= 7);
    }
}
