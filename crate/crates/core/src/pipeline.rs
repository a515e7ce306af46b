//! Warmup, bandit search and finetuning of the pruned network.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{random_mask, sample_mask, CandidateBatch, RedundancyState};
use crate::data::{BatchStream, Dataset, Splits};
use crate::error::{DasError, Result};
use crate::network::{FlopReport, Model, PrunedNetwork, SkipMask, SkippableNetwork};
use crate::tensor::{softmax_cross_entropy, AdamW, AdamWConfig, Optimizer, ParamGroup, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub interval: usize,
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub validation_batch_size: usize,
    pub lr_adapters: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Uniformly random skip sets finetuned alongside the chosen one for comparison.
    pub random_baselines: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            n: 8,
            m: 2,
            c: 4,
            interval: 10,
            warmup_epochs: 1,
            search_epochs: 2,
            finetune_epochs: 10,
            batch_size: 32,
            validation_batch_size: 64,
            lr_adapters: 1e-3,
            lr_head: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            random_baselines: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DasError::validation(msg));
        if self.interval == 0 {
            return bad("interval must be at least 1".into());
        }
        if self.m > self.n {
            return bad(format!("cannot skip m = {} of n = {} modules", self.m, self.n));
        }
        if self.c < 2 {
            return bad(format!("need at least 2 candidates per validation, got {}", self.c));
        }
        if self.batch_size == 0 || self.validation_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        for (name, lr) in [("lr_adapters", self.lr_adapters), ("lr_head", self.lr_head)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be a positive number, got {lr}"));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.lr_adapters,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
        .with_group_lr(ParamGroup::Embed, self.lr_head)
        .with_group_lr(ParamGroup::Head, self.lr_head)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

const EVAL_CHUNK: usize = 256;

/// Mean loss and top-1 accuracy of `model` along `mask`, without gradients.
pub fn evaluate<M: Model>(model: &M, data: &Dataset, mask: &SkipMask) -> Result<Metrics> {
    if data.is_empty() {
        return Err(DasError::usage("cannot evaluate on an empty dataset"));
    }
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.forward(&x, mask)?;
        loss_sum += softmax_cross_entropy(&logits, &y)? * chunk.len() as f64;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(Metrics {
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let cols = logits.shape()[1];
    logits
        .values()
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// One gradient step of `model` on `(x, y)` along `mask`. A non-finite loss
/// aborts before any parameter moves; `context` names where it happened.
pub fn train_step<M: Model>(
    model: &mut M,
    tape: &mut Tape,
    opt: &mut impl Optimizer,
    x: &Tensor,
    y: &[usize],
    mask: &SkipMask,
    context: impl FnOnce() -> String,
) -> Result<f64> {
    tape.clear();
    model.store_mut().zero_grads();
    let logits = model.forward_taped(tape, x, mask)?;
    let loss = tape.softmax_cross_entropy(logits, y)?;
    let value = tape.value(loss)?.values()[0];
    if !value.is_finite() {
        return Err(DasError::NumericAbort {
            context: context(),
            detail: format!("training loss is {value} under mask {mask}"),
        });
    }
    tape.backward_into(loss, model.store_mut())?;
    opt.step(model.store_mut());
    Ok(value)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Fresh,
    WarmedUp,
    Searched,
    Finetuned,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Fresh => "fresh",
            Phase::WarmedUp => "warmed up",
            Phase::Searched => "searched",
            Phase::Finetuned => "finetuned",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub steps: usize,
    pub mean_train_loss: Option<f64>,
}

impl PhaseSummary {
    fn from_losses(losses: &[f64]) -> Self {
        PhaseSummary {
            steps: losses.len(),
            mean_train_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
        }
    }
}

/// Seconds spent in each phase. Kept out of the report so that reports are
/// reproducible byte for byte.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub warmup_s: f64,
    pub search_s: f64,
    pub finetune_s: f64,
}

/// One line of the progress log, written at every validation.
#[derive(Clone, Debug, PartialEq)]
pub struct ProgressEntry {
    pub step: usize,
    pub mean_train_loss: f64,
    pub rewards: Vec<f64>,
    pub top: SkipMask,
}

pub fn progress_csv(entries: &[ProgressEntry], c: usize) -> String {
    let mut out = String::from("step,mean_train_loss");
    for h in 0..c {
        out += &format!(",reward_{h}");
    }
    out += ",argmax_r\n";
    for e in entries {
        out += &format!("{},{}", e.step, e.mean_train_loss);
        for v in &e.rewards {
            out += &format!(",{v}");
        }
        out += &format!(",{}\n", e.top);
    }
    out
}

/// A random skip set finetuned with the same budget as the chosen one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub mask: SkipMask,
    pub val: Metrics,
    pub test: Metrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl BaselineSummary {
    /// Mean and sample standard deviation of test accuracy.
    pub fn from_runs(runs: &[BaselineRun]) -> Option<Self> {
        let acc: Vec<f64> = runs.iter().map(|r| r.test.accuracy).collect();
        mean_std(&acc).map(|(mean_accuracy, std_accuracy)| BaselineSummary {
            runs: acc.len(),
            mean_accuracy,
            std_accuracy,
        })
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub interval: usize,
    pub seed: u64,
    pub final_mask: Vec<usize>,
    pub final_redundancy: Vec<f64>,
    pub redundancy_updates: usize,
    pub redundancy_trajectory: String,
    pub warmup: PhaseSummary,
    pub search: PhaseSummary,
    pub finetune: PhaseSummary,
    pub val: Metrics,
    pub test: Metrics,
    pub flop_full: u64,
    pub flop_pruned: u64,
    pub flop_saved_fraction: f64,
    pub trainable_param_count: usize,
    pub frozen_param_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_baseline: Option<BaselineSummary>,
}

impl SearchReport {
    pub fn flop_report(&self) -> FlopReport {
        FlopReport::new(self.flop_full, self.flop_pruned)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

pub struct FinetuneOutcome {
    pub report: SearchReport,
    pub pruned: PrunedNetwork,
    pub baselines: Vec<BaselineRun>,
}

pub const TRAJECTORY_FILE: &str = "trajectory.csv";

// Independent random streams so that changing one phase's draws leaves the others alone.
const STREAM_TRAIN: u64 = 1;
const STREAM_WARMUP: u64 = 2;
const STREAM_POLICY: u64 = 3;
const STREAM_CANDIDATES: u64 = 4;
const STREAM_VALIDATION: u64 = 5;
const STREAM_BASELINE: u64 = 6;
const STREAM_FINETUNE: u64 = 7;

pub(crate) fn seeded_stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// The three phases over one network, enforced in order.
pub struct Pipeline<'a> {
    cfg: SearchConfig,
    net: SkippableNetwork,
    data: &'a Splits,
    phase: Phase,
    tape: Tape,
    opt: AdamW,
    state: RedundancyState,
    stream: BatchStream,
    rng_train: ChaCha8Rng,
    step: usize,
    progress: Vec<ProgressEntry>,
    warmup: PhaseSummary,
    search: PhaseSummary,
    timings: PhaseTimings,
}

impl<'a> Pipeline<'a> {
    /// Checks the config against the network and data before any compute.
    pub fn new(net: SkippableNetwork, data: &'a Splits, cfg: SearchConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = net.dims();
        if cfg.n != dims.n {
            return Err(DasError::validation(format!(
                "config has n = {} but the network has {} blocks",
                cfg.n, dims.n
            )));
        }
        for (name, split) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
            if split.input_dim() != dims.input_dim || split.classes != dims.classes {
                return Err(DasError::validation(format!(
                    "{name} split has {} inputs and {} classes, network expects {} and {}",
                    split.input_dim(),
                    split.classes,
                    dims.input_dim,
                    dims.classes
                )));
            }
            if split.is_empty() {
                return Err(DasError::validation(format!("{name} split is empty")));
            }
        }
        let stream = BatchStream::new(data.train.len(), cfg.batch_size)?;
        Ok(Pipeline {
            opt: cfg.optimizer(),
            state: RedundancyState::new(cfg.n),
            rng_train: seeded_stream(cfg.seed, STREAM_TRAIN),
            cfg,
            net,
            data,
            phase: Phase::Fresh,
            tape: Tape::new(),
            stream,
            step: 0,
            progress: Vec::new(),
            warmup: PhaseSummary::default(),
            search: PhaseSummary::default(),
            timings: PhaseTimings::default(),
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn network(&self) -> &SkippableNetwork {
        &self.net
    }

    pub fn redundancy(&self) -> &RedundancyState {
        &self.state
    }

    pub fn progress(&self) -> &[ProgressEntry] {
        &self.progress
    }

    pub fn timings(&self) -> PhaseTimings {
        self.timings
    }

    fn expect_phase(&self, want: Phase, op: &str) -> Result<()> {
        if self.phase != want {
            return Err(DasError::usage(format!(
                "{op} needs a {want} pipeline, this one is {}",
                self.phase
            )));
        }
        Ok(())
    }

    fn steps_per_epoch(&self) -> usize {
        self.stream.batches_per_epoch()
    }

    fn train_on(&mut self, mask: &SkipMask, phase: &'static str) -> Result<f64> {
        self.step += 1;
        let idx = self.stream.next_indices(&mut self.rng_train).to_vec();
        let (x, y) = self.data.train.batch(&idx)?;
        let t = self.step;
        train_step(&mut self.net, &mut self.tape, &mut self.opt, &x, &y, mask, || {
            format!("{phase} step {t}")
        })
    }

    /// Trains adapters and head with a uniformly random skip set per step.
    pub fn warmup(&mut self) -> Result<()> {
        self.expect_phase(Phase::Fresh, "warmup")?;
        let start = Instant::now();
        let mut rng = seeded_stream(self.cfg.seed, STREAM_WARMUP);
        let steps = self.cfg.warmup_epochs * self.steps_per_epoch();
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let mask = random_mask(self.cfg.n, self.cfg.m, &mut rng)?;
            losses.push(self.train_on(&mask, "warmup")?);
        }
        self.warmup = PhaseSummary::from_losses(&losses);
        self.timings.warmup_s = start.elapsed().as_secs_f64();
        log::info!("warmup: {steps} steps in {:.1}s", self.timings.warmup_s);
        self.phase = Phase::WarmedUp;
        Ok(())
    }

    /// Bandit search with validation-loss rewards.
    pub fn search(&mut self) -> Result<&RedundancyState> {
        self.search_with(|net, mask, x, y| softmax_cross_entropy(&net.forward(x, mask)?, y))
    }

    /// Bandit search where `loss_of(net, mask, x, y)` scores each candidate on
    /// the shared validation batch.
    pub fn search_with<F>(&mut self, loss_of: F) -> Result<&RedundancyState>
    where
        F: Fn(&SkippableNetwork, &SkipMask, &Tensor, &[usize]) -> Result<f64> + Sync,
    {
        self.expect_phase(Phase::WarmedUp, "search")?;
        let start = Instant::now();
        let mut rng_policy = seeded_stream(self.cfg.seed, STREAM_POLICY);
        let mut rng_cand = seeded_stream(self.cfg.seed, STREAM_CANDIDATES);
        let mut rng_val = seeded_stream(self.cfg.seed, STREAM_VALIDATION);
        let steps = self.cfg.search_epochs * self.steps_per_epoch();
        let mut losses = Vec::with_capacity(steps);
        let mut since = Vec::with_capacity(self.cfg.interval);
        for t in 1..=steps {
            let mask = sample_mask(&self.state, self.cfg.m, &mut rng_policy)?;
            let loss = self.train_on(&mask, "search")?;
            losses.push(loss);
            since.push(loss);
            if t % self.cfg.interval != 0 {
                continue;
            }
            let val = &self.data.val;
            let k = self.cfg.validation_batch_size.min(val.len());
            let idx = sample(&mut rng_val, val.len(), k).into_vec();
            let (x, y) = val.batch(&idx)?;
            let masks = (0..self.cfg.c)
                .map(|_| sample_mask(&self.state, self.cfg.m, &mut rng_cand))
                .collect::<Result<Vec<_>>>()?;
            let net = &self.net;
            let cand_losses = masks
                .par_iter()
                .map(|mk| loss_of(net, mk, &x, &y))
                .collect::<Result<Vec<f64>>>()?;
            let mut batch = CandidateBatch::new(masks);
            for (h, &l) in cand_losses.iter().enumerate() {
                if !l.is_finite() {
                    return Err(DasError::NumericAbort {
                        context: format!("search step {}", self.step),
                        detail: format!("validation loss is {l} under mask {}", batch.masks[h]),
                    });
                }
                batch.record_loss(h, l)?;
            }
            self.state.update(&batch)?;
            self.progress.push(ProgressEntry {
                step: self.step,
                mean_train_loss: since.iter().sum::<f64>() / since.len() as f64,
                rewards: batch.rewards()?,
                top: self.state.final_skip_set(self.cfg.m)?,
            });
            since.clear();
        }
        self.search = PhaseSummary::from_losses(&losses);
        self.timings.search_s = start.elapsed().as_secs_f64();
        log::info!("search: {steps} steps, r = {:?}", self.state.r());
        self.phase = Phase::Searched;
        Ok(&self.state)
    }

    /// Prunes to the top-`m` redundant modules, trains what remains and
    /// evaluates it, together with any random-skip baselines.
    pub fn finetune(&mut self) -> Result<FinetuneOutcome> {
        self.expect_phase(Phase::Searched, "finetune")?;
        let start = Instant::now();
        let mask = self.state.final_skip_set(self.cfg.m)?;
        let steps = self.cfg.finetune_epochs * self.steps_per_epoch();
        let (pruned, losses) = finetune_pruned(&self.net, &mask, self.data, &self.cfg, steps)?;
        let val = evaluate(&pruned, &self.data.val, &mask)?;
        let test = evaluate(&pruned, &self.data.test, &mask)?;

        let mut rng = seeded_stream(self.cfg.seed, STREAM_BASELINE);
        // With m = 0 there is only one subset, the full network.
        let runs = if self.cfg.m == 0 { 0 } else { self.cfg.random_baselines };
        let baseline_masks = (0..runs)
            .map(|_| random_mask(self.cfg.n, self.cfg.m, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let baselines = baseline_masks
            .into_iter()
            .map(|mk| {
                let (p, _) = finetune_pruned(&self.net, &mk, self.data, &self.cfg, steps)?;
                Ok(BaselineRun {
                    val: evaluate(&p, &self.data.val, &mk)?,
                    test: evaluate(&p, &self.data.test, &mk)?,
                    mask: mk,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let full = SkipMask::empty(self.cfg.n);
        let flops = FlopReport::new(self.net.count_flops(&full, 1)?, pruned.flops(&mask, 1)?);
        let report = SearchReport {
            n: self.cfg.n,
            m: self.cfg.m,
            c: self.cfg.c,
            interval: self.cfg.interval,
            seed: self.cfg.seed,
            final_mask: mask.indices(),
            final_redundancy: self.state.r().to_vec(),
            redundancy_updates: self.state.step(),
            redundancy_trajectory: TRAJECTORY_FILE.into(),
            warmup: self.warmup,
            search: self.search,
            finetune: PhaseSummary::from_losses(&losses),
            val,
            test,
            flop_full: flops.full,
            flop_pruned: flops.pruned,
            flop_saved_fraction: flops.saved_fraction,
            trainable_param_count: pruned.store().trainable_count(),
            frozen_param_count: pruned.store().frozen_count(),
            random_baseline: BaselineSummary::from_runs(&baselines),
        };
        self.timings.finetune_s = start.elapsed().as_secs_f64();
        log::info!("finetune: mask {mask}, test accuracy {:.4}", report.test.accuracy);
        self.phase = Phase::Finetuned;
        Ok(FinetuneOutcome {
            report,
            pruned,
            baselines,
        })
    }

    /// Warmup, search and finetune in one call.
    pub fn run(&mut self) -> Result<FinetuneOutcome> {
        self.warmup()?;
        self.search()?;
        self.finetune()
    }

    pub fn write_trajectory(&self, path: &Path) -> Result<()> {
        self.state.write_trajectory(path)
    }
}

/// Prunes `net` to `mask` and trains the survivors for `steps` steps with a
/// fresh optimizer. Every call sees the same sequence of batches.
pub fn finetune_pruned(
    net: &SkippableNetwork,
    mask: &SkipMask,
    data: &Splits,
    cfg: &SearchConfig,
    steps: usize,
) -> Result<(PrunedNetwork, Vec<f64>)> {
    let mut pruned = net.prune(mask)?;
    let mut opt = cfg.optimizer();
    let mut tape = Tape::new();
    let mut stream = BatchStream::new(data.train.len(), cfg.batch_size)?;
    let mut rng = seeded_stream(cfg.seed, STREAM_FINETUNE);
    let mut losses = Vec::with_capacity(steps);
    for t in 1..=steps {
        let idx = stream.next_indices(&mut rng).to_vec();
        let (x, y) = data.train.batch(&idx)?;
        losses.push(train_step(&mut pruned, &mut tape, &mut opt, &x, &y, mask, || {
            format!("finetune step {t}")
        })?);
    }
    Ok((pruned, losses))
}
