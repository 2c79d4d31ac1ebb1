//! Geometry of oriented lines in space and the optics of smooth mirrors and
//! refracting interfaces acting on them.

// Negated comparisons are deliberate: a NaN must fail every acceptance check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod families;
pub mod line_space;
pub mod optics;
pub mod surfaces;
pub mod variational;

#[cfg(feature = "parallel")]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}
