use crate::error::{DasError, Result};
use crate::tensor::{ParamId, ParamStore};

use super::{
    adapted_layer, adapter_names, block_names, flops, skipped_layer, Adapter, AdapterKind,
    FrozenBlock, Graph, Linear, Model, NetworkDims, SkipMask, SkippableNetwork,
};

#[derive(Clone, Debug, PartialEq)]
pub enum PrunedLayer {
    Kept { block: FrozenBlock, adapter: Adapter },
    Skipped { shortcut: Adapter },
}

/// Deployable network with the skipped blocks physically removed.
///
/// Holds only kept blocks with their parallel adapters and the short-cut
/// adapters of skipped positions. Its forward pass is the masked forward of
/// the network it came from, bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedNetwork {
    dims: NetworkDims,
    store: ParamStore,
    embed: Linear,
    layers: Vec<PrunedLayer>,
    head: Linear,
    mask: SkipMask,
}

fn copy(src: &ParamStore, dst: &mut ParamStore, id: ParamId) -> Result<ParamId> {
    dst.insert(src.name(id), src.group(id), src.get(id).clone())
}

fn copy_linear(src: &ParamStore, dst: &mut ParamStore, l: &Linear) -> Result<Linear> {
    Ok(Linear {
        weight: copy(src, dst, l.weight)?,
        bias: copy(src, dst, l.bias)?,
    })
}

fn copy_adapter(src: &ParamStore, dst: &mut ParamStore, a: &Adapter) -> Result<Adapter> {
    Ok(Adapter {
        w_in: copy(src, dst, a.w_in)?,
        w_out: copy(src, dst, a.w_out)?,
        h: a.h,
    })
}

impl PrunedNetwork {
    pub(crate) fn from_network(net: &SkippableNetwork, mask: &SkipMask) -> Result<Self> {
        mask.check_n(net.n())?;
        let src = net.store();
        let mut store = ParamStore::new();
        let embed = copy_linear(src, &mut store, net.embed())?;
        let mut layers = Vec::with_capacity(net.n());
        for (i, block) in net.blocks().iter().enumerate() {
            if mask.contains(i) {
                let shortcut = copy_adapter(src, &mut store, net.adapter(AdapterKind::Shortcut, i))?;
                layers.push(PrunedLayer::Skipped { shortcut });
            } else {
                let block = FrozenBlock {
                    index: i,
                    fc1: copy_linear(src, &mut store, &block.fc1)?,
                    fc2: copy_linear(src, &mut store, &block.fc2)?,
                };
                let adapter = copy_adapter(src, &mut store, net.adapter(AdapterKind::Parallel, i))?;
                layers.push(PrunedLayer::Kept { block, adapter });
            }
        }
        let head = copy_linear(src, &mut store, net.head())?;
        Ok(PrunedNetwork {
            dims: net.dims().clone(),
            store,
            embed,
            layers,
            head,
            mask: mask.clone(),
        })
    }

    /// Rebuilds from a store whose names follow the full network's scheme,
    /// with only the entries that survive `mask`.
    pub(crate) fn from_store(dims: NetworkDims, store: ParamStore, mask: SkipMask) -> Result<Self> {
        dims.validate()?;
        mask.check_n(dims.n)?;
        let id = |name: &str| {
            store
                .id(name)
                .ok_or_else(|| DasError::validation(format!("missing parameter {name}")))
        };
        let lin = |prefix: &str| -> Result<Linear> {
            Ok(Linear {
                weight: id(&format!("{prefix}.weight"))?,
                bias: id(&format!("{prefix}.bias"))?,
            })
        };
        let embed = lin("embed")?;
        let head = lin("head")?;
        let mut layers = Vec::with_capacity(dims.n);
        for i in 0..dims.n {
            if mask.contains(i) {
                let [wi, wo] = adapter_names(AdapterKind::Shortcut, i);
                layers.push(PrunedLayer::Skipped {
                    shortcut: Adapter {
                        w_in: id(&wi)?,
                        w_out: id(&wo)?,
                        h: dims.h_skip,
                    },
                });
            } else {
                let [w1, b1, w2, b2] = block_names(i);
                let [wi, wo] = adapter_names(AdapterKind::Parallel, i);
                layers.push(PrunedLayer::Kept {
                    block: FrozenBlock {
                        index: i,
                        fc1: Linear {
                            weight: id(&w1)?,
                            bias: id(&b1)?,
                        },
                        fc2: Linear {
                            weight: id(&w2)?,
                            bias: id(&b2)?,
                        },
                    },
                    adapter: Adapter {
                        w_in: id(&wi)?,
                        w_out: id(&wo)?,
                        h: dims.h_adapt,
                    },
                });
            }
        }
        let expected = 4 + layers
            .iter()
            .map(|l| match l {
                PrunedLayer::Kept { .. } => 6,
                PrunedLayer::Skipped { .. } => 2,
            })
            .sum::<usize>();
        if store.len() != expected {
            return Err(DasError::validation(format!(
                "pruned checkpoint has {} parameters, expected {expected} for mask {mask}",
                store.len()
            )));
        }
        Ok(PrunedNetwork {
            dims,
            store,
            embed,
            layers,
            head,
            mask,
        })
    }

    /// The skip set this network was pruned to.
    pub fn mask(&self) -> &SkipMask {
        &self.mask
    }

    pub fn layers(&self) -> &[PrunedLayer] {
        &self.layers
    }

    fn route_ok(&self, mask: &SkipMask) -> Result<()> {
        if mask.is_empty() || mask == &self.mask {
            Ok(())
        } else {
            Err(DasError::usage(format!(
                "pruned network has a fixed route {}; cannot apply mask {mask}",
                self.mask
            )))
        }
    }
}

impl Model for PrunedNetwork {
    fn dims(&self) -> &NetworkDims {
        &self.dims
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// `mask` must be empty or the pruning mask; the route is fixed.
    fn logits<G: Graph>(&self, g: &mut G, x: G::Value, mask: &SkipMask) -> Result<G::Value> {
        mask.check_n(self.dims.n)?;
        self.route_ok(mask)?;
        let mut h = self.embed.forward(g, &x)?;
        for layer in &self.layers {
            h = match layer {
                PrunedLayer::Kept { block, adapter } => adapted_layer(g, block, adapter, &h)?,
                PrunedLayer::Skipped { shortcut } => skipped_layer(g, shortcut, &h)?,
            };
        }
        self.head.forward(g, &h)
    }

    fn flops(&self, mask: &SkipMask, batch: usize) -> Result<u64> {
        mask.check_n(self.dims.n)?;
        self.route_ok(mask)?;
        Ok(flops::count(&self.dims, |i| self.mask.contains(i), batch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layers_follow_the_mask() {
        let dims = NetworkDims {
            n: 4,
            input_dim: 3,
            d: 5,
            d_ff: 7,
            h_adapt: 1,
            h_skip: 2,
            classes: 2,
        };
        let net = SkippableNetwork::new(dims.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mask = SkipMask::new(4, [0, 2]).unwrap();
        let pruned = net.prune(&mask).unwrap();
        let kinds: Vec<bool> = pruned.layers().iter().map(|l| matches!(l, PrunedLayer::Skipped { .. })).collect();
        assert_eq!(kinds, [true, false, true, false]);
        assert_eq!(pruned.mask(), &mask);
        assert_eq!(pruned.store().frozen_count(), 2 * dims.block_param_count());
        assert!(pruned.flops(&SkipMask::new(4, [1]).unwrap(), 1).is_err());
        assert!(net.prune(&SkipMask::empty(3)).is_err());
    }
}
