use das::network::{Model, SkipMask, SkippableNetwork};
use das::pipeline::{Pipeline, SearchConfig};
use das::planted::{gen_dataset, PlantedSpec};
use das::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn spec() -> PlantedSpec {
    PlantedSpec {
        n: 5,
        redundant: [1, 3].into(),
        d: 16,
        d_ff: 32,
        h_adapt: 4,
        h_skip: 8,
        classes: 4,
        input_dim: 8,
        train_size: 128,
        val_size: 64,
        test_size: 64,
        pretrain_size: 64,
        latent_dim: 3,
        ..PlantedSpec::default()
    }
}

fn net() -> SkippableNetwork {
    SkippableNetwork::new(spec().dims(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
}

fn cfg(m: usize) -> SearchConfig {
    SearchConfig {
        n: 5,
        m,
        c: 3,
        interval: 4,
        batch_size: 16,
        validation_batch_size: 32,
        finetune_epochs: 2,
        random_baselines: 3,
        seed: 4,
        ..SearchConfig::default()
    }
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let data = gen_dataset(&spec()).unwrap();
    let run = || {
        let mut p = Pipeline::new(net(), &data, cfg(2)).unwrap();
        let out = p.run().unwrap();
        (out.report.to_json(), p.redundancy().trajectory_csv())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let mut other = Pipeline::new(net(), &data, SearchConfig { seed: 5, ..cfg(2) }).unwrap();
    assert_ne!(other.run().unwrap().report.to_json(), a.0);
}

/// Deterministic pseudo-noise from the candidate and the validation batch.
fn jitter(mask: &SkipMask, x: &Tensor) -> f64 {
    let mut h = mask.indices().iter().fold(17u64, |h, &i| h.wrapping_mul(31).wrapping_add(i as u64));
    h ^= x.values()[0].to_bits();
    h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

#[test]
fn search_follows_the_supplied_rewards() {
    let data = gen_dataset(&spec()).unwrap();
    let planted = SkipMask::new(5, [1, 3]).unwrap();
    let mut p = Pipeline::new(net(), &data, SearchConfig { search_epochs: 6, interval: 2, ..cfg(2) }).unwrap();
    p.warmup().unwrap();
    let state = p
        .search_with(|_, mask, x, _| {
            let v = if *mask == planted { 0.9 } else { 0.5 } + 0.1 * jitter(mask, x);
            Ok(-v.ln())
        })
        .unwrap();
    assert_eq!(state.final_skip_set(2).unwrap(), planted);
    assert_eq!(state.step(), 6 * 8 / 2);
}

#[test]
fn baselines_summarise_their_runs() {
    let data = gen_dataset(&spec()).unwrap();
    let mut p = Pipeline::new(net(), &data, cfg(2)).unwrap();
    let out = p.run().unwrap();
    assert_eq!(out.baselines.len(), 3);
    let acc: Vec<f64> = out.baselines.iter().map(|b| b.test.accuracy).collect();
    let mean = acc.iter().sum::<f64>() / 3.0;
    let var = acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0;
    let summary = out.report.random_baseline.as_ref().unwrap();
    assert!((summary.mean_accuracy - mean).abs() < 1e-12);
    assert!((summary.std_accuracy - var.sqrt()).abs() < 1e-12);
    assert!(out.baselines.iter().all(|b| b.mask.len() == 2));
}

#[test]
fn no_skipping_saves_nothing() {
    let data = gen_dataset(&spec()).unwrap();
    let mut p = Pipeline::new(net(), &data, SearchConfig { random_baselines: 0, ..cfg(0) }).unwrap();
    let out = p.run().unwrap();
    let r = &out.report;
    assert!(r.final_mask.is_empty());
    assert_eq!(r.flop_saved_fraction, 0.0);
    assert_eq!(r.flop_full, r.flop_pruned);
    assert!(r.random_baseline.is_none());
    assert_eq!(r.frozen_param_count, p.network().store().frozen_count());
}

#[test]
fn config_files_may_be_partial() {
    let c: SearchConfig = serde_json::from_str(r#"{"m": 3, "seed": 11}"#).unwrap();
    assert_eq!((c.m, c.seed, c.n), (3, 11, SearchConfig::default().n));
    assert!(serde_json::from_str::<SearchConfig>(r#"{"skips": 3}"#).is_err());
}
