//! Bounded fan-out for independent evaluation work. The thread count is
//! capped by the `DIFFLID_THREADS` environment variable; results always
//! merge in input-index order, so the output is identical no matter how
//! many threads run.

use crate::error::{Error, Result};

/// Maximum worker threads: `DIFFLID_THREADS` if set to a positive integer,
/// otherwise the machine's available parallelism.
pub fn thread_cap() -> usize {
    if let Ok(v) = std::env::var("DIFFLID_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Apply `f` to every item, possibly in parallel, and return the results in
/// input order. On failures, the error with the smallest index is returned
/// (the same error a sequential run would hit first).
pub fn parallel_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync,
{
    let threads = thread_cap().min(items.len()).max(1);
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let mut slots: Vec<Option<Result<R>>> = Vec::with_capacity(items.len());
    slots.resize_with(items.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(threads);
        for w in 0..threads {
            let f = &f;
            handles.push(scope.spawn(move || {
                let mut mine = Vec::new();
                let mut i = w;
                while i < items.len() {
                    mine.push((i, f(i, &items[i])));
                    i += threads;
                }
                mine
            }));
        }
        for h in handles {
            let produced = h
                .join()
                .map_err(|_| Error::contract("parallel_map", "worker thread panicked"))?;
            for (i, r) in produced {
                slots[i] = Some(r);
            }
        }
        Ok::<(), Error>(())
    })?;
    let mut out = Vec::with_capacity(items.len());
    for (i, slot) in slots.into_iter().enumerate() {
        match slot {
            Some(Ok(r)) => out.push(r),
            Some(Err(e)) => return Err(e),
            None => {
                return Err(Error::contract(
                    "parallel_map",
                    format!("no result produced for index {i}"),
                ))
            }
        }
    }
    Ok(out)
}
