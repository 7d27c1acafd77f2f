//! Brute-force reference implementations for the test suites of `vln-core`.
//!
//! Everything in this crate is written as flat loops over plain `Vec<f64>`
//! data and shares no code with the production crate it checks. The point is
//! independence: a disagreement between an oracle here and the corresponding
//! production operation fails the build.
//!
//! Size caps: exhaustive path enumeration refuses graphs above 12 nodes, and
//! finite differences are only meant for parameter vectors of a few thousand
//! entries. Callers are expected to stay tiny.

pub mod fd;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod recurrent;

/// Relative error with magnitude floored at 1, so near-zero gradients are
/// compared absolutely: `|a - b| / max(1, |a|, |b|)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Maximum [`rel_err`] over two equally long slices.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in max_rel_err");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}
