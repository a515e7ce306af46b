//! Synthetic pretrained networks with known redundant blocks, the matching
//! classification task, and the exhaustive skip-set oracle.

use std::collections::BTreeSet;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BatchStream, Dataset, Splits};
use crate::error::{DasError, Result};
use crate::network::{Model, NetworkDims, SkipMask, SkippableNetwork};
use crate::pipeline::{argmax_rows, evaluate, finetune_pruned, seeded_stream, Metrics, SearchConfig};
use crate::tensor::{
    AdamW, AdamWConfig, Optimizer, ParamGroup, ParamStore, Parameter, Tape, Tensor,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedSpec {
    pub n: usize,
    pub redundant: BTreeSet<usize>,
    pub d: usize,
    pub d_ff: usize,
    pub h_adapt: usize,
    pub h_skip: usize,
    pub classes: usize,
    pub input_dim: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Examples drawn from the same task for pretraining only, like the
    /// large upstream corpus of a real pretrained model.
    pub pretrain_size: usize,
    /// Residual contribution of a planted block relative to the mean essential block.
    pub noise_scale: f64,
    pub seed: u64,
    /// Dimension of the Gaussian mixture before the warp.
    pub latent_dim: usize,
    /// Spread of the class means relative to the unit within-class noise.
    pub margin: f64,
    /// Frequency of the sinusoidal warp from latent space to inputs.
    pub warp: f64,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub max_pretrain_epochs: usize,
    pub target_accuracy: f64,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        PlantedSpec {
            n: 8,
            redundant: [2, 5].into(),
            d: 64,
            d_ff: 32,
            h_adapt: 8,
            h_skip: 16,
            classes: 8,
            input_dim: 16,
            train_size: 2048,
            val_size: 512,
            test_size: 1024,
            pretrain_size: 8192,
            noise_scale: 0.02,
            seed: 0,
            latent_dim: 4,
            margin: 5.0,
            warp: 2.0,
            pretrain_lr: 5e-3,
            pretrain_batch: 64,
            max_pretrain_epochs: 200,
            target_accuracy: 0.95,
        }
    }
}

/// Largest planted contribution ratio accepted after generation.
pub const MAX_PLANTED_RATIO: f64 = 0.05;

impl PlantedSpec {
    pub fn dims(&self) -> NetworkDims {
        NetworkDims {
            n: self.n,
            input_dim: self.input_dim,
            d: self.d,
            d_ff: self.d_ff,
            h_adapt: self.h_adapt,
            h_skip: self.h_skip,
            classes: self.classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        let bad = |msg: String| Err(DasError::validation(msg));
        if self.redundant.len() >= self.n {
            return bad(format!("{} planted blocks leave no essential block of {}", self.redundant.len(), self.n));
        }
        if let Some(&i) = self.redundant.iter().find(|&&i| i >= self.n) {
            return bad(format!("planted block {i} out of range for n = {}", self.n));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale <= MAX_PLANTED_RATIO) {
            return bad(format!(
                "noise_scale must lie in (0, {MAX_PLANTED_RATIO}], got {}",
                self.noise_scale
            ));
        }
        if self.pretrain_size < self.pretrain_batch || [self.train_size, self.val_size, self.test_size].contains(&0) {
            return bad("splits must be non-empty and pretrain_size at least pretrain_batch".into());
        }
        if self.latent_dim == 0 || self.classes < 2 || self.pretrain_batch == 0 {
            return bad("latent_dim, pretrain_batch must be positive and classes at least 2".into());
        }
        if !(self.margin > 0.0 && self.warp > 0.0 && self.pretrain_lr > 0.0) {
            return bad("margin, warp and pretrain_lr must be positive".into());
        }
        if !(self.target_accuracy > 0.0 && self.target_accuracy <= 1.0) {
            return bad(format!("target_accuracy {} outside (0, 1]", self.target_accuracy));
        }
        Ok(())
    }

    pub fn essential(&self) -> Vec<usize> {
        (0..self.n).filter(|i| !self.redundant.contains(i)).collect()
    }

    pub fn planted_mask(&self) -> Result<SkipMask> {
        SkipMask::new(self.n, self.redundant.iter().copied())
    }
}

const STREAM_TASK: u64 = 11;
const STREAM_SPLITS: u64 = 12;
const STREAM_INIT: u64 = 13;
const STREAM_PRETRAIN: u64 = 14;
const STREAM_ADAPTERS: u64 = 15;
const STREAM_PROBE: u64 = 16;
const STREAM_UPSTREAM: u64 = 17;

/// The fixed generative task: class means in latent space and the warp into inputs.
struct Task {
    classes: usize,
    means: Tensor,
    proj: Tensor,
    phase: Vec<f64>,
}

impl Task {
    fn new(spec: &PlantedSpec) -> Self {
        let mut rng = seeded_stream(spec.seed, STREAM_TASK);
        let l = spec.latent_dim;
        let means = Tensor::randn(&[spec.classes, l], spec.margin, &mut rng);
        let proj = Tensor::randn(&[l, spec.input_dim], spec.warp / (l as f64).sqrt(), &mut rng);
        let phase = (0..spec.input_dim)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        Task {
            classes: spec.classes,
            means,
            proj,
            phase,
        }
    }

    /// `len` examples, every class `len / classes` times give or take one.
    fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
        let l = self.means.shape()[1];
        let mut labels: Vec<usize> = (0..len).map(|i| i % self.classes).collect();
        labels.shuffle(rng);
        let mut z = Tensor::randn(&[len, l], 1.0, rng).into_values();
        for (row, &y) in labels.iter().enumerate() {
            for (k, mu) in self.means.row(y).iter().enumerate() {
                z[row * l + k] += mu;
            }
        }
        let mut x = Tensor::matrix(len, l, z)?.matmul(&self.proj)?;
        let width = self.phase.len();
        for (j, v) in x.values_mut().iter_mut().enumerate() {
            *v = (*v + self.phase[j % width]).sin();
        }
        Dataset::new(x, labels, self.classes)
    }
}

/// Gaussian mixture in a low-dimensional latent space (one cluster per
/// class), pushed through a fixed sinusoidal warp into the input space.
pub fn gen_dataset(spec: &PlantedSpec) -> Result<Splits> {
    spec.validate()?;
    let task = Task::new(spec);
    let mut rng = seeded_stream(spec.seed, STREAM_SPLITS);
    Ok(Splits {
        train: task.sample(spec.train_size, &mut rng)?,
        val: task.sample(spec.val_size, &mut rng)?,
        test: task.sample(spec.test_size, &mut rng)?,
    })
}

/// Mean over rows of `‖block_i(h_i)‖ / ‖h_i‖` along the frozen route, one value per block.
pub fn contribution_ratios(net: &SkippableNetwork, x: &Tensor) -> Result<Vec<f64>> {
    let states = net.frozen_hidden_states(x)?;
    (0..net.n())
        .map(|i| {
            let h = &states[i];
            let out = net.block_output(i, h)?;
            let ratios: Vec<f64> = out
                .row_norms()
                .iter()
                .zip(h.row_norms())
                .map(|(o, hn)| o / hn)
                .collect();
            Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
        })
        .collect()
}

/// What generation measured on the way.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedReport {
    pub pretrain_epochs: usize,
    pub recovery_epochs: usize,
    pub pretrain_accuracy: f64,
    pub test_accuracy: f64,
    pub probe_accuracy: f64,
    pub ratios: Vec<f64>,
}

pub struct Planted {
    pub net: SkippableNetwork,
    pub report: PlantedReport,
}

/// Number of validation rows used to measure contribution ratios.
pub const RATIO_ROWS: usize = 100;

/// Pretrains a network on `data`, shrinks the planted blocks to near
/// no-ops, retrains the rest to compensate, then freezes every block and
/// attaches fresh zero-initialised adapters.
pub fn gen_pretrained(spec: &PlantedSpec, data: &Splits) -> Result<Planted> {
    spec.validate()?;
    let mut rng = seeded_stream(spec.seed, STREAM_INIT);
    let mut net = SkippableNetwork::new(spec.dims(), &mut rng)?;
    net.set_blocks_frozen(false);
    net.set_adapters_frozen(true);

    let upstream = Task::new(spec).sample(spec.pretrain_size, &mut seeded_stream(spec.seed, STREAM_UPSTREAM))?;
    let mut trainer = Pretrainer::new(spec, &upstream)?;
    let (pretrain_epochs, mut train_acc) = trainer.train_until(&mut net, spec.max_pretrain_epochs, |_| Ok(()))?;
    log::info!("pretraining: {pretrain_epochs} epochs, train accuracy {train_acc:.4}");
    if train_acc < spec.target_accuracy {
        return Err(DasError::Generation(format!(
            "pretraining reached train accuracy {train_acc:.3} < {} after {pretrain_epochs} epochs; try another seed",
            spec.target_accuracy
        )));
    }

    let probe_x = data.val.head(RATIO_ROWS)?.inputs;
    let mut recovery_epochs = 0;
    if !spec.redundant.is_empty() {
        plant(&mut net, spec, &probe_x)?;
        for &i in &spec.redundant {
            for id in net.blocks()[i].params() {
                net.store_mut().get_mut(id).frozen = true;
            }
        }
        let (epochs, acc) = trainer.train_until(&mut net, spec.max_pretrain_epochs, |net| plant(net, spec, &probe_x))?;
        recovery_epochs = epochs;
        log::info!("recovery after planting: {epochs} epochs, train accuracy {acc:.4}");
        train_acc = acc;
        if train_acc < spec.target_accuracy {
            return Err(DasError::Generation(format!(
                "recovery after planting reached train accuracy {train_acc:.3} < {}; try another seed",
                spec.target_accuracy
            )));
        }
    }

    let ratios = contribution_ratios(&net, &probe_x)?;
    check_planted(spec, &ratios)?;

    net.set_blocks_frozen(true);
    net.set_adapters_frozen(false);
    net.reset_adapters(&mut seeded_stream(spec.seed, STREAM_ADAPTERS));

    let test_accuracy = frozen_accuracy(&net, &data.test)?;
    let probe_accuracy = linear_probe(spec, data)?;
    if probe_accuracy >= test_accuracy {
        return Err(DasError::Generation(format!(
            "a linear probe reaches {probe_accuracy:.3} test accuracy, the network only {test_accuracy:.3}; \
             the task does not need depth"
        )));
    }
    Ok(Planted {
        net,
        report: PlantedReport {
            pretrain_epochs,
            recovery_epochs,
            pretrain_accuracy: train_acc,
            test_accuracy,
            probe_accuracy,
            ratios,
        },
    })
}

/// Rescales each planted block so that its ratio is `noise_scale` times the
/// essential mean. Rescaling one block moves the inputs of later blocks, so
/// the pass is repeated until the targets hold.
fn plant(net: &mut SkippableNetwork, spec: &PlantedSpec, x: &Tensor) -> Result<()> {
    let essential = spec.essential();
    for _ in 0..5 {
        let ratios = contribution_ratios(net, x)?;
        let mean = essential.iter().map(|&i| ratios[i]).sum::<f64>() / essential.len() as f64;
        let target = spec.noise_scale * mean;
        if spec.redundant.iter().all(|&i| (ratios[i] / target - 1.0).abs() < 1e-3) {
            return Ok(());
        }
        for &i in &spec.redundant {
            let r = contribution_ratios(net, x)?[i];
            if r > 0.0 {
                net.scale_block_output(i, target / r)?;
            }
        }
    }
    Ok(())
}

fn check_planted(spec: &PlantedSpec, ratios: &[f64]) -> Result<()> {
    let essential = spec.essential();
    let mean = essential.iter().map(|&i| ratios[i]).sum::<f64>() / essential.len() as f64;
    for &i in &spec.redundant {
        if ratios[i] > MAX_PLANTED_RATIO * mean {
            return Err(DasError::Generation(format!(
                "planted block {i} contributes {:.4} of the essential mean, above {MAX_PLANTED_RATIO}",
                ratios[i] / mean
            )));
        }
    }
    Ok(())
}

fn frozen_accuracy(net: &SkippableNetwork, data: &Dataset) -> Result<f64> {
    let logits = net.forward_frozen(&data.inputs)?;
    let hits = argmax_rows(&logits).iter().zip(&data.labels).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Full-network training along the adapter-free route.
struct Pretrainer<'a> {
    data: &'a Dataset,
    opt: AdamW,
    tape: Tape,
    stream: BatchStream,
    rng: ChaCha8Rng,
    target: f64,
}

impl<'a> Pretrainer<'a> {
    fn new(spec: &PlantedSpec, data: &'a Dataset) -> Result<Self> {
        Ok(Pretrainer {
            data,
            opt: AdamW::new(AdamWConfig {
                lr: spec.pretrain_lr,
                ..AdamWConfig::default()
            }),
            tape: Tape::new(),
            stream: BatchStream::new(data.len(), spec.pretrain_batch)?,
            rng: seeded_stream(spec.seed, STREAM_PRETRAIN),
            target: spec.target_accuracy,
        })
    }

    /// Trains whole epochs until train accuracy reaches the target or `max`
    /// epochs pass, calling `after_epoch` between epochs.
    fn train_until(
        &mut self,
        net: &mut SkippableNetwork,
        max: usize,
        mut after_epoch: impl FnMut(&mut SkippableNetwork) -> Result<()>,
    ) -> Result<(usize, f64)> {
        let mut acc = frozen_accuracy(net, self.data)?;
        let mut epochs = 0;
        while acc < self.target && epochs < max {
            for _ in 0..self.stream.batches_per_epoch() {
                let idx = self.stream.next_indices(&mut self.rng).to_vec();
                let (x, y) = self.data.batch(&idx)?;
                self.tape.clear();
                net.store_mut().zero_grads();
                let logits = net.forward_frozen_taped(&mut self.tape, &x)?;
                let loss = self.tape.softmax_cross_entropy(logits, &y)?;
                let value = self.tape.value(loss)?.values()[0];
                if !value.is_finite() {
                    return Err(DasError::NumericAbort {
                        context: format!("pretraining epoch {}", epochs + 1),
                        detail: format!("training loss is {value}"),
                    });
                }
                self.tape.backward_into(loss, net.store_mut())?;
                self.opt.step(net.store_mut());
            }
            after_epoch(net)?;
            epochs += 1;
            acc = frozen_accuracy(net, self.data)?;
        }
        Ok((epochs, acc))
    }

}

/// Softmax regression on the raw inputs, scored on the test split.
pub fn linear_probe(spec: &PlantedSpec, data: &Splits) -> Result<f64> {
    let mut rng = seeded_stream(spec.seed, STREAM_PROBE);
    let mut store = ParamStore::new();
    let w = store.insert(
        "probe.weight".to_string(),
        ParamGroup::Head,
        Parameter::new(Tensor::zeros(&[spec.input_dim, spec.classes]), false),
    )?;
    let b = store.insert(
        "probe.bias".to_string(),
        ParamGroup::Head,
        Parameter::new(Tensor::zeros(&[1, spec.classes]), false),
    )?;
    let mut opt = AdamW::new(AdamWConfig {
        lr: 1e-2,
        ..AdamWConfig::default()
    });
    let mut tape = Tape::new();
    let mut stream = BatchStream::new(data.train.len(), spec.pretrain_batch)?;
    for _ in 0..PROBE_EPOCHS * stream.batches_per_epoch() {
        let idx = stream.next_indices(&mut rng).to_vec();
        let (x, y) = data.train.batch(&idx)?;
        tape.clear();
        store.zero_grads();
        let xv = tape.constant(x);
        let wv = tape.param(&store, w);
        let bv = tape.param(&store, b);
        let z = tape.matmul(xv, wv)?;
        let logits = tape.add_bias(z, bv)?;
        let loss = tape.softmax_cross_entropy(logits, &y)?;
        tape.backward_into(loss, &mut store)?;
        opt.step(&mut store);
    }
    let logits = data
        .test
        .inputs
        .matmul(&store.get(w).tensor)?
        .add_bias(&store.get(b).tensor)?;
    let hits = argmax_rows(&logits).iter().zip(&data.test.labels).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / data.test.len() as f64)
}

const PROBE_EPOCHS: usize = 30;

/// Briefly finetuning every candidate skip set from the same fresh adapters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub budget: usize,
    pub batch_size: usize,
    pub lr_adapters: f64,
    pub lr_head: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            budget: 200,
            batch_size: 32,
            lr_adapters: 1e-3,
            lr_head: 1e-3,
            seed: 0,
        }
    }
}

/// Largest `n` the oracle enumerates.
pub const MAX_ORACLE_N: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub mask: SkipMask,
    pub loss: f64,
    pub accuracy: f64,
}

/// Every `m`-subset ranked by validation loss after brief finetuning.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub ranking: Vec<OracleEntry>,
}

impl OracleResult {
    pub fn best(&self) -> &SkipMask {
        &self.ranking[0].mask
    }

    pub fn losses(&self) -> Vec<f64> {
        self.ranking.iter().map(|e| e.loss).collect()
    }

    /// Zero-based rank of `mask`, if it was enumerated.
    pub fn rank_of(&self, mask: &SkipMask) -> Option<usize> {
        self.ranking.iter().position(|e| &e.mask == mask)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,loss,accuracy\n");
        for e in &self.ranking {
            out += &format!("{},{},{}\n", e.mask, e.loss, e.accuracy);
        }
        out
    }
}

/// Exhaustive ground truth: for each `m`-subset, fresh zero-initialised
/// adapters, `budget` finetuning steps on the train split, then validation
/// loss. Ties keep lexicographic subset order.
pub fn oracle_best_skip_set(
    net: &SkippableNetwork,
    data: &Splits,
    m: usize,
    cfg: &OracleConfig,
) -> Result<OracleResult> {
    let n = net.n();
    if n > MAX_ORACLE_N {
        return Err(DasError::usage(format!(
            "exhaustive oracle is limited to n <= {MAX_ORACLE_N} (got {n}); \
             compare against sampled random skip sets instead (search with random_baselines)"
        )));
    }
    if m > n {
        return Err(DasError::usage(format!("cannot skip {m} of {n} modules")));
    }
    let mut fresh = net.clone();
    fresh.reset_adapters(&mut seeded_stream(cfg.seed, STREAM_ADAPTERS));
    let search_cfg = SearchConfig {
        n,
        m,
        batch_size: cfg.batch_size,
        lr_adapters: cfg.lr_adapters,
        lr_head: cfg.lr_head,
        seed: cfg.seed,
        ..SearchConfig::default()
    };
    search_cfg.validate()?;
    let subsets: Vec<SkipMask> = (0..n)
        .combinations(m)
        .map(|s| SkipMask::new(n, s))
        .collect::<Result<_>>()?;
    let mut ranking = subsets
        .into_par_iter()
        .map(|mask| {
            let (pruned, _) = finetune_pruned(&fresh, &mask, data, &search_cfg, cfg.budget)?;
            let Metrics { loss, accuracy } = evaluate(&pruned, &data.val, &mask)?;
            Ok(OracleEntry { mask, loss, accuracy })
        })
        .collect::<Result<Vec<_>>>()?;
    ranking.sort_by(|a, b| a.loss.total_cmp(&b.loss));
    Ok(OracleResult { ranking })
}
