//! Data-parallel execution helpers with a sequential fallback.
//!
//! Built with the `parallel` feature (the default), these route through
//! rayon; without it they are plain loops. Every call site in the crate
//! hands each unit of work its own pre-derived random stream and reduces
//! results in index order, so the parallel and sequential paths produce
//! bit-identical output. [`set_force_sequential`] flips a runtime switch so
//! benchmarks can compare both paths inside one binary.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Tests that flip the global override hold this lock so they do not race
/// each other under the parallel test harness.
#[cfg(test)]
pub(crate) static TEST_OVERRIDE_LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());

/// Force the sequential path even when the `parallel` feature is enabled.
pub fn set_force_sequential(force: bool) {
    #[cfg(feature = "parallel")]
    FORCE_SEQUENTIAL.store(force, Ordering::SeqCst);
    #[cfg(not(feature = "parallel"))]
    let _ = force;
}

/// Whether calls will actually fan out across threads.
pub fn parallel_enabled() -> bool {
    #[cfg(feature = "parallel")]
    {
        !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
    }
    #[cfg(not(feature = "parallel"))]
    {
        false
    }
}

/// Work units (roughly multiply-adds) below which a fan-out is not worth
/// rayon's fork-join overhead and runs sequentially.
pub const MIN_GRAIN: usize = 8192;

/// Map over a slice, preserving order.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// [`map`] that stays sequential when each item is under [`MIN_GRAIN`] work
/// units. Results are identical either way.
pub fn map_grained<T, U, F>(items: &[T], per_item_work: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    if per_item_work >= MIN_GRAIN {
        map(items, f)
    } else {
        items.iter().map(f).collect()
    }
}

/// Map over `0..n`, preserving order.
pub fn map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Mutate each element in place, with its index.
pub fn for_each_indexed_mut<T, F>(items: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() {
        items
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, item)| f(i, item));
        return;
    }
    for (i, item) in items.iter_mut().enumerate() {
        f(i, item);
    }
}

/// [`for_each_indexed_mut`] gated on [`MIN_GRAIN`] work units per item.
pub fn for_each_indexed_mut_grained<T, F>(items: &mut [T], per_item_work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    if per_item_work >= MIN_GRAIN {
        for_each_indexed_mut(items, f);
    } else {
        for (i, item) in items.iter_mut().enumerate() {
            f(i, item);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<usize> = (0..1000).collect();
        let ys = map(&xs, |x| x * 2);
        assert_eq!(ys, (0..1000).map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn indexed_mut_touches_every_slot() {
        let mut xs = vec![0usize; 257];
        for_each_indexed_mut(&mut xs, |i, x| *x = i + 1);
        assert!(xs.iter().enumerate().all(|(i, &x)| x == i + 1));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn sequential_override_round_trips() {
        let _guard = TEST_OVERRIDE_LOCK.lock().unwrap();
        set_force_sequential(true);
        assert!(!parallel_enabled());
        let ys = map_indexed(64, |i| i * i);
        set_force_sequential(false);
        assert!(parallel_enabled());
        assert_eq!(ys, map_indexed(64, |i| i * i));
    }
}
