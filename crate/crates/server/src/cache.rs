use std::collections::HashMap;
use std::future::Future;
use std::hash::Hash;
use std::sync::{Arc, Mutex};

use tokio::sync::OnceCell;

type Slot<V> = Arc<OnceCell<Arc<V>>>;

struct Entries<K, V> {
    slots: HashMap<K, (Slot<V>, u64)>,
    clock: u64,
}

/// Bounded least-recently-used cache where concurrent requests for the
/// same key share one computation.
pub struct LruCache<K, V> {
    capacity: usize,
    inner: Mutex<Entries<K, V>>,
}

impl<K: Eq + Hash + Clone, V> LruCache<K, V> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        LruCache {
            capacity,
            inner: Mutex::new(Entries {
                slots: HashMap::new(),
                clock: 0,
            }),
        }
    }

    fn slot(&self, key: &K) -> Slot<V> {
        let mut e = self.inner.lock().unwrap();
        e.clock += 1;
        let now = e.clock;
        if let Some((slot, used)) = e.slots.get_mut(key) {
            *used = now;
            return slot.clone();
        }
        if e.slots.len() >= self.capacity {
            let oldest = e
                .slots
                .iter()
                .min_by_key(|(_, (_, used))| *used)
                .map(|(k, _)| k.clone());
            if let Some(k) = oldest {
                e.slots.remove(&k);
            }
        }
        let slot = Slot::default();
        e.slots.insert(key.clone(), (slot.clone(), now));
        slot
    }

    /// Returns the cached value or runs `compute`. A failed computation
    /// leaves nothing behind, so the next caller retries.
    pub async fn get_or_compute<E, F, Fut>(&self, key: &K, compute: F) -> Result<(Arc<V>, bool), E>
    where
        F: FnOnce() -> Fut,
        Fut: Future<Output = Result<V, E>>,
    {
        let slot = self.slot(key);
        let mut computed = false;
        let value = slot
            .get_or_try_init(|| async {
                computed = true;
                compute().await.map(Arc::new)
            })
            .await?;
        Ok((value.clone(), !computed))
    }

    /// A finished value, without touching recency or starting work.
    pub fn peek(&self, key: &K) -> Option<Arc<V>> {
        let e = self.inner.lock().unwrap();
        e.slots.get(key).and_then(|(slot, _)| slot.get().cloned())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[tokio::test]
    async fn evicts_least_recently_used() {
        let c = LruCache::<u32, u32>::new(2);
        for k in [1, 2] {
            c.get_or_compute(&k, || async move { Ok::<_, ()>(k * 10) })
                .await
                .unwrap();
        }
        // touch 1 so 2 is the oldest
        let (v, hit) = c
            .get_or_compute(&1, || async { Ok::<_, ()>(0) })
            .await
            .unwrap();
        assert_eq!((*v, hit), (10, true));
        c.get_or_compute(&3, || async { Ok::<_, ()>(30) })
            .await
            .unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.peek(&2).is_none());
        assert_eq!(c.peek(&1).as_deref(), Some(&10));
        assert_eq!(c.peek(&3).as_deref(), Some(&30));
    }

    #[tokio::test]
    async fn failures_are_not_cached() {
        let c = LruCache::<u32, u32>::new(4);
        assert!(c
            .get_or_compute(&1, || async { Err::<u32, _>("boom") })
            .await
            .is_err());
        assert!(c.peek(&1).is_none());
        let (v, hit) = c
            .get_or_compute(&1, || async { Ok::<_, &str>(7) })
            .await
            .unwrap();
        assert_eq!((*v, hit), (7, false));
    }

    #[tokio::test(flavor = "multi_thread", worker_threads = 4)]
    async fn one_computation_per_key() {
        let c = Arc::new(LruCache::<u32, u32>::new(4));
        let runs = Arc::new(AtomicUsize::new(0));
        let tasks: Vec<_> = (0..16)
            .map(|_| {
                let (c, runs) = (c.clone(), runs.clone());
                tokio::spawn(async move {
                    c.get_or_compute(&5, || async {
                        runs.fetch_add(1, Ordering::SeqCst);
                        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
                        Ok::<_, ()>(55)
                    })
                    .await
                    .unwrap()
                    .0
                })
            })
            .collect();
        for t in tasks {
            assert_eq!(*t.await.unwrap(), 55);
        }
        assert_eq!(runs.load(Ordering::SeqCst), 1);
    }
}
