use std::collections::HashMap;

use das::network::{AdapterKind, Model, SkipMask};
use das::planted::*;
use das::tensor::ParamGroup;

fn small() -> PlantedSpec {
    PlantedSpec {
        n: 4,
        redundant: [1].into(),
        d: 16,
        d_ff: 32,
        h_adapt: 4,
        h_skip: 8,
        classes: 4,
        input_dim: 8,
        train_size: 256,
        pretrain_size: 1024,
        val_size: 128,
        test_size: 128,
        latent_dim: 3,
        margin: 3.0,
        pretrain_batch: 32,
        target_accuracy: 0.9,
        ..PlantedSpec::default()
    }
}

type Mat = Vec<Vec<f64>>;

fn params(net: &das::network::SkippableNetwork) -> HashMap<String, (Vec<usize>, Vec<f64>)> {
    net.store()
        .iter()
        .map(|(_, name, _, p)| (name.to_string(), (p.tensor.shape().to_vec(), p.values().to_vec())))
        .collect()
}

fn linear(x: &Mat, w: &(Vec<usize>, Vec<f64>), b: &(Vec<usize>, Vec<f64>)) -> Mat {
    let (k, c) = (w.0[0], w.0[1]);
    x.iter()
        .map(|row| (0..c).map(|j| b.1[j] + (0..k).map(|t| row[t] * w.1[t * c + j]).sum::<f64>()).collect())
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Contribution ratios recomputed with plain loops over the raw parameters.
fn ratios_by_hand(net: &das::network::SkippableNetwork, x: &Mat) -> Vec<f64> {
    let p = params(net);
    let mut h = linear(x, &p["embed.weight"], &p["embed.bias"]);
    let mut out = Vec::new();
    for i in 0..net.n() {
        let g = |s: &str| &p[&format!("blocks.{i}.{s}")];
        let mut a = linear(&h, g("fc1.weight"), g("fc1.bias"));
        a.iter_mut().flatten().for_each(|v| *v = v.max(0.0));
        let f = linear(&a, g("fc2.weight"), g("fc2.bias"));
        let mean = h.iter().zip(&f).map(|(hr, fr)| norm(fr) / norm(hr)).sum::<f64>() / h.len() as f64;
        out.push(mean);
        for (hr, fr) in h.iter_mut().zip(&f) {
            hr.iter_mut().zip(fr).for_each(|(a, b)| *a += b);
        }
    }
    out
}

#[test]
fn planted_blocks_are_near_no_ops() {
    let spec = small();
    let data = gen_dataset(&spec).unwrap();
    let planted = gen_pretrained(&spec, &data).unwrap();
    let net = &planted.net;

    let rows = data.val.head(RATIO_ROWS).unwrap();
    let x: Mat = (0..rows.len()).map(|i| rows.inputs.row(i).to_vec()).collect();
    let ratios = ratios_by_hand(net, &x);
    let essential: f64 = spec.essential().iter().map(|&i| ratios[i]).sum::<f64>() / spec.essential().len() as f64;
    for &i in &spec.redundant {
        assert!(ratios[i] <= MAX_PLANTED_RATIO * essential, "block {i}: {ratios:?}");
    }
    for (a, b) in ratios.iter().zip(&planted.report.ratios) {
        assert!((a - b).abs() < 1e-9 * (1.0 + a));
    }
    assert!(planted.report.pretrain_accuracy >= spec.target_accuracy);
    assert!(planted.report.probe_accuracy < planted.report.test_accuracy);

    // Frozen-flag audit.
    for (_, name, group, p) in net.store().iter() {
        assert_eq!(p.frozen, group == ParamGroup::Block, "{name}");
    }
    // Fresh adapters: zero output map.
    for i in 0..spec.n {
        for kind in [AdapterKind::Parallel, AdapterKind::Shortcut] {
            let w_out = net.store().get(net.adapter(kind, i).w_out);
            assert!(w_out.values().iter().all(|&v| v == 0.0));
        }
    }

    let again = gen_pretrained(&spec, &data).unwrap();
    assert_eq!(&again.net, net);
}

#[test]
fn empty_planting_leaves_the_pretrained_network() {
    let spec = PlantedSpec { redundant: Default::default(), ..small() };
    let data = gen_dataset(&spec).unwrap();
    let planted = gen_pretrained(&spec, &data).unwrap();
    assert_eq!(planted.report.recovery_epochs, 0);
    let min = planted.report.ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(min > MAX_PLANTED_RATIO, "{:?}", planted.report.ratios);
}

#[test]
fn unreachable_accuracy_is_a_generation_error() {
    let spec = PlantedSpec { target_accuracy: 1.0, max_pretrain_epochs: 1, ..small() };
    let data = gen_dataset(&spec).unwrap();
    let err = gen_pretrained(&spec, &data).err().unwrap();
    assert!(matches!(err, das::DasError::Generation(_)), "{err}");
}

#[test]
fn oracle_csv_is_sorted_and_complete() {
    let spec = small();
    let data = gen_dataset(&spec).unwrap();
    let planted = gen_pretrained(&spec, &data).unwrap();
    let cfg = OracleConfig { budget: 20, ..OracleConfig::default() };
    let result = oracle_best_skip_set(&planted.net, &data, 2, &cfg).unwrap();
    let losses = result.losses();
    assert_eq!(losses.len(), 6);
    assert!(losses.windows(2).all(|w| w[0] <= w[1]));
    let csv = result.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("subset,loss,accuracy"));
    let mut subsets: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    subsets.sort_unstable();
    assert_eq!(subsets, ["0;1", "0;2", "0;3", "1;2", "1;3", "2;3"]);
    assert_eq!(result.best(), &result.ranking[0].mask);
    let again = oracle_best_skip_set(&planted.net, &data, 2, &cfg).unwrap();
    assert_eq!(again.to_csv(), csv);
    assert!(result.rank_of(&SkipMask::new(4, [0, 1]).unwrap()).is_some());
}
