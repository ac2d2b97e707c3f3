//! Small blocking-concurrency helpers shared by the client and servers.

use parking_lot::{Condvar, Mutex};

/// Counting semaphore bounding in-flight requests.
pub struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits.max(1)), available: Condvar::new() }
    }

    pub fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut permits = self.permits.lock();
        while *permits == 0 {
            self.available.wait(&mut permits);
        }
        *permits -= 1;
        SemaphoreGuard { semaphore: self }
    }
}

pub struct SemaphoreGuard<'a> {
    semaphore: &'a Semaphore,
}

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock();
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}

/// Applies `f` to every item on up to `max_in_flight` worker threads,
/// preserving input order in the result.
///
/// Workers block on I/O most of the time here, so thread-per-worker is
/// the right shape; items are pulled from a shared cursor.
pub fn parallel_map<T, R, F>(items: Vec<T>, max_in_flight: usize, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let total = items.len();
    if total == 0 {
        return Vec::new();
    }
    let workers = max_in_flight.max(1).min(total);
    if workers == 1 {
        return items.into_iter().map(f).collect();
    }

    let queue = Mutex::new(items.into_iter().enumerate().collect::<Vec<_>>());
    let results = Mutex::new((0..total).map(|_| None).collect::<Vec<Option<R>>>());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some((index, item)) = queue.lock().pop() else { break };
                let result = f(item);
                results.lock()[index] = Some(result);
            });
        }
    });
    results
        .into_inner()
        .into_iter()
        .map(|slot| slot.expect("worker filled every slot"))
        .collect()
}
