mod common;

use common::rng;
use das::network::checkpoint::{Checkpoint, LoadedModel};
use das::network::{AdapterKind, FlopReport, Model, NetworkDims, SkipMask, SkippableNetwork};
use das::tensor::{count_macs, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn dims() -> NetworkDims {
    NetworkDims {
        n: 5,
        input_dim: 7,
        d: 12,
        d_ff: 20,
        h_adapt: 3,
        h_skip: 5,
        classes: 4,
    }
}

/// A network whose adapters are all non-zero, so every term matters.
fn perturbed(seed: u64) -> SkippableNetwork {
    let mut r = rng(seed);
    let mut net = SkippableNetwork::new(dims(), &mut r).unwrap();
    let ids: Vec<_> = net.store().ids().collect();
    for id in ids {
        if net.store().name(id).ends_with("w_out") {
            let p = net.store_mut().get_mut(id);
            for v in p.tensor.values_mut() {
                *v = r.random_range(-0.3..0.3);
            }
        }
    }
    net
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (r, k) = (a.shape()[0], a.shape()[1]);
    let c = b.shape()[1];
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[i * c + j] = (0..k).map(|t| a.values()[i * k + t] * b.values()[t * c + j]).sum();
        }
    }
    out
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs()))
}

#[test]
fn adapter_matches_hand_rolled_evaluation() {
    let net = perturbed(1);
    let x = Tensor::randn(&[6, 12], 1.0, &mut rng(2));
    for kind in [AdapterKind::Parallel, AdapterKind::Shortcut] {
        let a = net.adapter(kind, 3);
        let w_in = &net.store().get(a.w_in).tensor;
        let w_out = &net.store().get(a.w_out).tensor;
        let hidden: Vec<f64> = naive_matmul(&x, w_in).into_iter().map(|v| v.max(0.0)).collect();
        let hidden = Tensor::matrix(6, a.h, hidden).unwrap();
        let want = naive_matmul(&hidden, w_out);
        let got = net.adapter_forward(kind, 3, &x).unwrap();
        assert_eq!(got.shape(), x.shape());
        assert!(close(got.values(), &want));
    }
    let zero = Tensor::zeros(&[2, 12]);
    assert!(net.adapter_forward(AdapterKind::Parallel, 0, &zero).unwrap().values().iter().all(|&v| v == 0.0));
    assert!(net.adapter_forward(AdapterKind::Parallel, 0, &Tensor::zeros(&[2, 11])).is_err());
}

#[test]
fn adapted_layer_is_sum_of_three_terms() {
    let net = perturbed(3);
    let x = Tensor::randn(&[4, 12], 1.0, &mut rng(4));
    for i in 0..5 {
        let block = net.block_output(i, &x).unwrap();
        let adapter = net.adapter_forward(AdapterKind::Parallel, i, &x).unwrap();
        let want: Vec<f64> = (0..x.numel())
            .map(|j| x.values()[j] + block.values()[j] + adapter.values()[j])
            .collect();
        assert_eq!(net.block_forward_adapted(i, &x).unwrap().values(), &want[..]);

        let shortcut = net.adapter_forward(AdapterKind::Shortcut, i, &x).unwrap();
        let want: Vec<f64> = x.values().iter().zip(shortcut.values()).map(|(a, b)| a + b).collect();
        assert_eq!(net.block_forward_skipped(i, &x).unwrap().values(), &want[..]);
    }
}

#[test]
fn skipped_block_performs_no_multiply_adds() {
    let net = perturbed(5);
    let x = Tensor::randn(&[3, 12], 1.0, &mut rng(6));
    let (_, skipped) = count_macs(|| net.block_forward_skipped(2, &x).unwrap());
    assert_eq!(skipped, 3 * 2 * 12 * 5);
    let (_, kept) = count_macs(|| net.block_forward_adapted(2, &x).unwrap());
    assert_eq!(kept, 3 * (2 * 12 * 20 + 2 * 12 * 3));
}

/// Masked forward versus the per-layer calls composed by hand.
fn composed(net: &SkippableNetwork, x: &Tensor, mask: &SkipMask) -> Tensor {
    let mut h = net.embed_forward(x).unwrap();
    for i in 0..net.n() {
        h = if mask.contains(i) {
            net.block_forward_skipped(i, &h).unwrap()
        } else {
            net.block_forward_adapted(i, &h).unwrap()
        };
    }
    net.head_forward(&h).unwrap()
}

#[test]
fn forward_equals_composition_for_every_mask() {
    let net = perturbed(7);
    let x = Tensor::randn(&[5, 7], 1.0, &mut rng(8));
    for bits in 0u32..32 {
        let mask = SkipMask::new(5, (0..5).filter(|i| bits >> i & 1 == 1)).unwrap();
        assert_eq!(net.forward(&x, &mask).unwrap(), composed(&net, &x, &mask), "mask {mask}");
    }
    assert!(net.forward(&x, &SkipMask::empty(6)).is_err());
}

#[test]
fn zero_initialised_adapters_reproduce_the_frozen_network() {
    let net = SkippableNetwork::new(dims(), &mut rng(9)).unwrap();
    let x = Tensor::randn(&[8, 7], 1.0, &mut rng(10));
    assert_eq!(net.forward(&x, &SkipMask::empty(5)).unwrap(), net.forward_frozen(&x).unwrap());
    let h = net.embed_forward(&x).unwrap();
    let identity = net.head_forward(&h).unwrap();
    assert_eq!(net.forward(&x, &SkipMask::all(5)).unwrap(), identity);
    for i in 0..5 {
        assert_eq!(net.block_forward_skipped(i, &h).unwrap(), h);
    }
}

#[test]
fn fresh_network_freezes_exactly_the_blocks() {
    let net = SkippableNetwork::new(dims(), &mut rng(11)).unwrap();
    for (_, name, _, p) in net.store().iter() {
        assert_eq!(p.frozen, name.starts_with("blocks."), "{name}");
    }
    let d = dims();
    let block = d.d * d.d_ff + d.d_ff + d.d_ff * d.d + d.d;
    let adapters = d.n * (2 * d.d * d.h_adapt + 2 * d.d * d.h_skip);
    let trainable = d.input_dim * d.d + d.d + adapters + d.d * d.classes + d.classes;
    assert_eq!(net.store().frozen_count(), d.n * block);
    assert_eq!(net.store().trainable_count(), trainable);
    assert_eq!(net.block_param_total(), d.n * block);
}

#[test]
fn invalid_widths_are_rejected() {
    for bad in [
        NetworkDims { h_adapt: 12, ..dims() },
        NetworkDims { h_skip: 12, ..dims() },
        NetworkDims { d_ff: 5, ..dims() },
        NetworkDims { n: 0, ..dims() },
    ] {
        assert!(SkippableNetwork::new(bad, &mut rng(0)).is_err());
    }
}

#[test]
fn flop_count_matches_instrumented_forward() {
    let net = perturbed(12);
    let d = dims();
    let mut r = rng(13);
    for _ in 0..20 {
        let m = r.random_range(0..=5);
        let mask = das::bandit::random_mask(5, m, &mut r).unwrap();
        let batch = r.random_range(1..6);
        let x = Tensor::randn(&[batch, 7], 1.0, &mut r);
        let (_, counted) = count_macs(|| net.forward(&x, &mask).unwrap());
        assert_eq!(net.count_flops(&mask, batch).unwrap(), counted);
        let pruned = net.prune(&mask).unwrap();
        let (_, counted) = count_macs(|| pruned.forward(&x, &mask).unwrap());
        assert_eq!(pruned.flops(&mask, batch).unwrap(), counted);
    }
    let full = net.count_flops(&SkipMask::empty(5), 1).unwrap();
    let one = net.count_flops(&SkipMask::new(5, [0]).unwrap(), 1).unwrap();
    // The skipped layer drops its block and its parallel adapter and gains the short-cut adapter.
    assert_eq!(full - one, (2 * d.d * d.d_ff + 2 * d.d * d.h_adapt - 2 * d.d * d.h_skip) as u64);
    let all = net.count_flops(&SkipMask::all(5), 1).unwrap();
    assert_eq!(all, (d.input_dim * d.d + 5 * 2 * d.d * d.h_skip + d.d * d.classes) as u64);
}

#[test]
fn pruning_drops_the_skipped_blocks() {
    let net = perturbed(14);
    let d = dims();
    let mask = SkipMask::new(5, [1, 4]).unwrap();
    let pruned = net.prune(&mask).unwrap();
    let block = d.d * d.d_ff + d.d_ff + d.d_ff * d.d + d.d;
    assert_eq!(net.store().frozen_count() - pruned.store().frozen_count(), 2 * block);
    // Also gone: parallel adapters of skipped layers and short-cut adapters of kept ones.
    let dropped_adapters = 2 * (2 * d.d * d.h_adapt) + 3 * (2 * d.d * d.h_skip);
    assert_eq!(net.store().total_count() - pruned.store().total_count(), 2 * block + dropped_adapters);
    let none = net.prune(&SkipMask::empty(5)).unwrap();
    let x = Tensor::randn(&[9, 7], 1.0, &mut rng(15));
    assert_eq!(none.forward(&x, &SkipMask::empty(5)).unwrap(), net.forward(&x, &SkipMask::empty(5)).unwrap());
    assert!(pruned.forward(&x, &SkipMask::new(5, [0]).unwrap()).is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let net = perturbed(16);
    let json = Checkpoint::from_network(&net).to_json().unwrap();
    let back = Checkpoint::from_json(&json, "mem".as_ref()).unwrap().into_model().unwrap();
    let LoadedModel::Full(back) = back else { panic!("expected a full network") };
    assert_eq!(back, net);
    assert_eq!(Checkpoint::from_network(&back).to_json().unwrap(), json);

    let mask = SkipMask::new(5, [0, 3]).unwrap();
    let pruned = net.prune(&mask).unwrap();
    let report = FlopReport::new(net.count_flops(&SkipMask::empty(5), 1).unwrap(), pruned.flops(&mask, 1).unwrap());
    let json = Checkpoint::from_pruned(&pruned, report).to_json().unwrap();
    let LoadedModel::Pruned(back) = Checkpoint::from_json(&json, "mem".as_ref()).unwrap().into_model().unwrap() else {
        panic!("expected a pruned network")
    };
    assert_eq!(back, pruned);
    assert!(json.contains("\"final_mask\""));
    assert!(json.ends_with("}\n"));
}

#[test]
fn malformed_checkpoint_names_the_field() {
    let net = perturbed(17);
    let json = Checkpoint::from_network(&net).to_json().unwrap().replacen("\"frozen\": true", "\"frozen\": 3", 1);
    let err = Checkpoint::from_json(&json, "bad.json".as_ref()).unwrap_err().to_string();
    assert!(err.contains("bad.json") && err.contains("frozen"), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pruned_forward_is_bit_identical(seed in any::<u64>(), bits in 0u32..32, rows in 1usize..8) {
        let net = perturbed(seed);
        let mask = SkipMask::new(5, (0..5).filter(|i| bits >> i & 1 == 1)).unwrap();
        let x = Tensor::randn(&[rows, 7], 1.0, &mut rng(seed ^ 0x5eed));
        let pruned = net.prune(&mask).unwrap();
        let a = net.forward(&x, &mask).unwrap();
        let b = pruned.forward(&x, &mask).unwrap();
        prop_assert!(a.values().iter().zip(b.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
