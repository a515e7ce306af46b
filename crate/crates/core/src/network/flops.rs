use serde::{Deserialize, Serialize};

use super::NetworkDims;

/// Multiply-adds of one forward pass. Only matrix products are counted;
/// bias additions, residual sums and activations are not.
pub(crate) fn count(dims: &NetworkDims, skipped: impl Fn(usize) -> bool, batch: usize) -> u64 {
    let NetworkDims {
        n,
        input_dim,
        d,
        d_ff,
        h_adapt,
        h_skip,
        classes,
    } = *dims;
    let per_row: usize = input_dim * d
        + (0..n)
            .map(|i| {
                if skipped(i) {
                    2 * d * h_skip
                } else {
                    2 * d * d_ff + 2 * d * h_adapt
                }
            })
            .sum::<usize>()
        + d * classes;
    (per_row * batch) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub full: u64,
    pub pruned: u64,
    pub saved_fraction: f64,
}

impl FlopReport {
    pub fn new(full: u64, pruned: u64) -> Self {
        FlopReport {
            full,
            pruned,
            saved_fraction: 1.0 - pruned as f64 / full as f64,
        }
    }
}
