use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DasError, Result};

/// Modules replaced by their short-cut adapter in one forward pass.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SkipMask {
    n: usize,
    skipped: BTreeSet<usize>,
}

impl SkipMask {
    pub fn new(n: usize, skipped: impl IntoIterator<Item = usize>) -> Result<Self> {
        let skipped: BTreeSet<usize> = skipped.into_iter().collect();
        if let Some(&bad) = skipped.iter().find(|&&i| i >= n) {
            return Err(DasError::usage(format!(
                "skip index {bad} out of range for {n} modules"
            )));
        }
        Ok(SkipMask { n, skipped })
    }

    pub fn empty(n: usize) -> Self {
        SkipMask {
            n,
            skipped: BTreeSet::new(),
        }
    }

    pub fn all(n: usize) -> Self {
        SkipMask {
            n,
            skipped: (0..n).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.skipped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skipped.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.skipped.contains(&i)
    }

    /// Skipped indices in ascending order.
    pub fn indices(&self) -> Vec<usize> {
        self.skipped.iter().copied().collect()
    }

    pub fn kept(&self) -> Vec<usize> {
        (0..self.n).filter(|i| !self.skipped.contains(i)).collect()
    }

    pub(crate) fn check_n(&self, n: usize) -> Result<()> {
        if self.n != n {
            return Err(DasError::usage(format!(
                "mask built for {} modules used on a network with {n}",
                self.n
            )));
        }
        Ok(())
    }

    /// Parses the [`fmt::Display`] form (`1;4` or `none`) for a network of `n` modules.
    pub fn parse(n: usize, s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(SkipMask::empty(n));
        }
        let idx = s
            .split(';')
            .map(|t| {
                usize::from_str(t.trim())
                    .map_err(|_| DasError::usage(format!("bad skip index {t:?} in {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        SkipMask::new(n, idx)
    }
}

impl fmt::Display for SkipMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.skipped.is_empty() {
            return f.write_str("none");
        }
        let parts: Vec<String> = self.skipped.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(";"))
    }
}
