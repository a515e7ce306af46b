//! Redundancy estimation as a k-armed bandit over modules.
//!
//! Each module `i` carries a redundancy degree `r_i` (all zero at start).
//! A subnetwork is sampled by drawing `s_i ~ U(0, sigmoid(r_i))` and skipping
//! the `m` modules with the largest scores. Validated candidates earn reward
//! `v = exp(-loss)`; every module skipped by candidate `h` moves by
//! `v_h - mean(v)`. Because every candidate skips exactly `m` modules, the
//! total `sum(r)` is conserved by each update.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{DasError, Result};
use crate::network::SkipMask;
use crate::tensor::sigmoid;

#[derive(Clone, Debug, PartialEq)]
pub struct RedundancyState {
    r: Vec<f64>,
    step: usize,
    trajectory: Vec<(usize, Vec<f64>)>,
}

impl RedundancyState {
    pub fn new(n: usize) -> Self {
        RedundancyState {
            r: vec![0.0; n],
            step: 0,
            trajectory: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    pub fn r(&self) -> &[f64] {
        &self.r
    }

    /// Number of updates applied so far.
    pub fn step(&self) -> usize {
        self.step
    }

    /// One `(step, r)` snapshot per update, steps strictly increasing.
    pub fn trajectory(&self) -> &[(usize, Vec<f64>)] {
        &self.trajectory
    }

    /// A state starting from the given redundancy values, with an empty trajectory.
    pub fn with_r(r: Vec<f64>) -> Self {
        RedundancyState {
            r,
            step: 0,
            trajectory: Vec::new(),
        }
    }

    /// Trajectory as CSV: `step,module_0,...,module_{n-1}`.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("step");
        for i in 0..self.n() {
            let _ = write!(out, ",module_{i}");
        }
        out.push('\n');
        for (step, r) in &self.trajectory {
            let _ = write!(out, "{step}");
            for v in r {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_trajectory(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.trajectory_csv()).map_err(|e| DasError::io(path, e))
    }

    /// Applies one batch of validated candidates.
    pub fn update(&mut self, batch: &CandidateBatch) -> Result<()> {
        let rewards = batch.rewards()?;
        let m = batch.masks.first().map_or(0, SkipMask::len);
        for mask in &batch.masks {
            mask.check_n(self.n())?;
            if mask.len() != m {
                return Err(DasError::usage(format!(
                    "candidate masks skip different counts ({} vs {m})",
                    mask.len()
                )));
            }
        }
        // Offsets from the first reward keep equal rewards exactly equal to their mean.
        let base = rewards[0];
        let mean = base + rewards.iter().map(|v| v - base).sum::<f64>() / rewards.len() as f64;
        for (mask, v) in batch.masks.iter().zip(&rewards) {
            let centered = v - mean;
            for i in mask.indices() {
                self.r[i] += centered;
            }
        }
        self.step += 1;
        self.trajectory.push((self.step, self.r.clone()));
        Ok(())
    }

    /// The `m` modules with the largest redundancy, lowest index on ties.
    pub fn final_skip_set(&self, m: usize) -> Result<SkipMask> {
        select_skip_set(&self.r, m)
    }
}

/// Candidate subnetworks awaiting (or holding) their validation rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateBatch {
    pub masks: Vec<SkipMask>,
    rewards: Vec<Option<f64>>,
}

impl CandidateBatch {
    pub fn new(masks: Vec<SkipMask>) -> Self {
        let c = masks.len();
        CandidateBatch {
            masks,
            rewards: vec![None; c],
        }
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Records the validation loss of candidate `h` as its reward.
    pub fn record_loss(&mut self, h: usize, loss: f64) -> Result<()> {
        let v = reward(loss)?;
        self.set_reward(h, v)
    }

    /// Sets a reward directly; it must lie in `(0, 1]`.
    pub fn set_reward(&mut self, h: usize, v: f64) -> Result<()> {
        if !(v > 0.0 && v <= 1.0) {
            return Err(DasError::NumericAbort {
                context: format!("candidate {h}"),
                detail: format!("reward {v} outside (0, 1]"),
            });
        }
        let bound = self.rewards.len();
        let slot = self.rewards.get_mut(h).ok_or(DasError::Index {
            what: "candidates",
            index: h,
            bound,
        })?;
        *slot = Some(v);
        Ok(())
    }

    pub fn rewards(&self) -> Result<Vec<f64>> {
        if self.rewards.is_empty() {
            return Err(DasError::usage("empty candidate batch"));
        }
        self.rewards
            .iter()
            .enumerate()
            .map(|(h, r)| r.ok_or_else(|| DasError::usage(format!("reward of candidate {h} not filled"))))
            .collect()
    }
}

/// `exp(-loss)`.
pub fn reward(loss: f64) -> Result<f64> {
    if !loss.is_finite() {
        return Err(DasError::NumericAbort {
            context: "reward".into(),
            detail: format!("validation loss is {loss}"),
        });
    }
    Ok((-loss).exp())
}

/// Scores `s_i ~ U[0, sigmoid(r_i))`, one draw per module.
pub fn sample_scores(state: &RedundancyState, rng: &mut impl Rng) -> Vec<f64> {
    state
        .r
        .iter()
        .map(|&r| rng.random::<f64>() * sigmoid(r))
        .collect()
}

/// Skips the `m` highest-scoring modules; ties go to the lower index.
pub fn select_skip_set(scores: &[f64], m: usize) -> Result<SkipMask> {
    let n = scores.len();
    if m > n {
        return Err(DasError::usage(format!("cannot skip {m} of {n} modules")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    SkipMask::new(n, order.into_iter().take(m))
}

/// One policy draw: scores, then top-`m`.
pub fn sample_mask(state: &RedundancyState, m: usize, rng: &mut impl Rng) -> Result<SkipMask> {
    select_skip_set(&sample_scores(state, rng), m)
}

/// Uniformly random `m`-subset of `n` modules, ignoring redundancy.
pub fn random_mask(n: usize, m: usize, rng: &mut impl Rng) -> Result<SkipMask> {
    if m > n {
        return Err(DasError::usage(format!("cannot skip {m} of {n} modules")));
    }
    SkipMask::new(n, rand::seq::index::sample(rng, n, m).into_iter())
}
