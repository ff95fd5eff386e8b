use std::collections::BTreeMap;
use std::ops::Deref;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use zeroize::Zeroize;

/// Bookkeeping of secrets that are alive only for the duration of one
/// operation. Every tracked value is zeroized and removed from the set when
/// its guard drops, on success and error paths alike.
#[derive(Debug, Default, Clone)]
pub struct EphemeralSet {
    live: Arc<Mutex<BTreeMap<u64, &'static str>>>,
    next: Arc<AtomicU64>,
}

impl EphemeralSet {
    pub fn track<T: Zeroize>(&self, label: &'static str, value: T) -> Live<T> {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        self.live.lock().unwrap().insert(id, label);
        Live {
            value,
            id,
            set: self.clone(),
        }
    }

    /// Labels of the values currently alive.
    pub fn live(&self) -> Vec<&'static str> {
        self.live.lock().unwrap().values().copied().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.live.lock().unwrap().is_empty()
    }
}

/// Guard for one tracked secret.
pub struct Live<T: Zeroize> {
    value: T,
    id: u64,
    set: EphemeralSet,
}

impl<T: Zeroize> Deref for Live<T> {
    type Target = T;

    fn deref(&self) -> &T {
        &self.value
    }
}

impl<T: Zeroize> Drop for Live<T> {
    fn drop(&mut self) {
        self.value.zeroize();
        self.set.live.lock().unwrap().remove(&self.id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guards_unregister_on_drop() {
        let set = EphemeralSet::default();
        let a = set.track("a", vec![1u8, 2]);
        {
            let _b = set.track("b", vec![3u8]);
            assert_eq!(set.live(), ["a", "b"]);
        }
        assert_eq!(set.live(), ["a"]);
        drop(a);
        assert!(set.is_empty());
    }
}
