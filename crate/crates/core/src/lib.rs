//! Quantization-aware training toolkit for comparing weight bitwidths at equal
//! model size.

pub mod arch;
pub mod calib;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod quant;
pub mod stats;

pub use error::{Error, Result};

/// Maps `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order always matches input order.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}
