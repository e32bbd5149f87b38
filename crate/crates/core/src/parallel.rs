//! Switch between serial and batch-parallel kernels.
//!
//! Parallel kernels split work over the batch axis only and reduce partial
//! results in batch order, so results do not depend on the thread count.

use std::sync::atomic::{AtomicU8, Ordering};

const UNSET: u8 = 0;
const SERIAL: u8 = 1;
const PARALLEL: u8 = 2;

static MODE: AtomicU8 = AtomicU8::new(UNSET);

/// Environment variable that forces serial kernels when set to `1`.
pub const DETERMINISTIC_ENV: &str = "SDDPM_DETERMINISTIC";

pub fn set_serial(serial: bool) {
    MODE.store(if serial { SERIAL } else { PARALLEL }, Ordering::Relaxed);
}

pub fn is_serial() -> bool {
    match MODE.load(Ordering::Relaxed) {
        SERIAL => true,
        PARALLEL => false,
        _ => {
            let serial = std::env::var(DETERMINISTIC_ENV).map(|v| v == "1").unwrap_or(false)
                || rayon::current_num_threads() <= 1;
            set_serial(serial);
            serial
        }
    }
}

/// Maps `f` over `0..n`, in parallel unless serial mode is active. Output order is index order.
pub fn map_indices<T, Fun>(n: usize, f: Fun) -> Vec<T>
where
    T: Send,
    Fun: Fn(usize) -> T + Sync + Send,
{
    if is_serial() || n < 2 {
        (0..n).map(f).collect()
    } else {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
}
