//! A chain of frozen residual blocks, each paired with a parallel adapter and
//! a short-cut adapter that can stand in for it.
//!
//! For module `i` on input `x`:
//!
//! * kept:    `x + block_i(x) + adapter_i(x)`
//! * skipped: `x + shortcut_i(x)` (the block and its parallel adapter are not evaluated)
//!
//! where `adapter(x) = relu(x W_in) W_out`. Adapters start with `W_out = 0`,
//! so a freshly adapted network computes exactly what the frozen one does.

pub mod checkpoint;
pub mod flops;
pub mod graph;
pub mod mask;
pub mod prune;

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DasError, Result};
use crate::tensor::{ParamGroup, ParamId, ParamStore, Parameter, Tape, Tensor, Var};

pub use flops::FlopReport;
pub use graph::{Eager, Graph, Taped};
pub use mask::SkipMask;
pub use prune::{PrunedLayer, PrunedNetwork};

/// Widths of a [`SkippableNetwork`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDims {
    pub n: usize,
    pub input_dim: usize,
    pub d: usize,
    pub d_ff: usize,
    pub h_adapt: usize,
    pub h_skip: usize,
    pub classes: usize,
}

impl Default for NetworkDims {
    fn default() -> Self {
        NetworkDims {
            n: 8,
            input_dim: 16,
            d: 64,
            d_ff: 256,
            h_adapt: 8,
            h_skip: 16,
            classes: 8,
        }
    }
}

impl NetworkDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n", self.n),
            ("input_dim", self.input_dim),
            ("d", self.d),
            ("d_ff", self.d_ff),
            ("h_adapt", self.h_adapt),
            ("h_skip", self.h_skip),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(DasError::validation(format!("{name} must be positive")));
        }
        if self.h_adapt >= self.d || self.h_skip >= self.d {
            return Err(DasError::validation(format!(
                "adapter widths must be below d={} (h_adapt={}, h_skip={})",
                self.d, self.h_adapt, self.h_skip
            )));
        }
        // Skipping must save compute: 2*d*d_ff > 2*d*h_skip.
        if self.d_ff <= self.h_skip {
            return Err(DasError::validation(format!(
                "short-cut adapter (h_skip={}) is not cheaper than the block (d_ff={})",
                self.h_skip, self.d_ff
            )));
        }
        Ok(())
    }

    pub fn block_param_count(&self) -> usize {
        self.d * self.d_ff + self.d_ff + self.d_ff * self.d + self.d
    }

    pub fn adapter_param_count(&self, h: usize) -> usize {
        2 * self.d * h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub(crate) fn forward<G: Graph>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, &w)?;
        g.add_bias(&y, &b)
    }
}

/// Bottleneck `d -> h -> d` with a ReLU in between and no biases.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Adapter {
    pub w_in: ParamId,
    pub w_out: ParamId,
    pub h: usize,
}

impl Adapter {
    pub(crate) fn run<G: Graph>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let w_in = g.param(self.w_in);
        let w_out = g.param(self.w_out);
        let hidden = g.matmul(x, &w_in)?;
        let hidden = g.relu(&hidden)?;
        g.matmul(&hidden, &w_out)
    }

    /// Eager evaluation of `relu(x W_in) W_out`.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Eager::new(store);
        Ok(self.run(&mut g, &Cow::Borrowed(x))?.into_owned())
    }
}

/// Residual MLP body `relu(x W1 + b1) W2 + b2`; the residual is added by the caller.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrozenBlock {
    pub index: usize,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FrozenBlock {
    pub(crate) fn run<G: Graph>(&self, g: &mut G, x: &G::Value) -> Result<G::Value> {
        let h = self.fc1.forward(g, x)?;
        let h = g.relu(&h)?;
        self.fc2.forward(g, &h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]
    }
}

/// `x + block(x) + adapter(x)`, summed left to right.
pub(crate) fn adapted_layer<G: Graph>(
    g: &mut G,
    block: &FrozenBlock,
    adapter: &Adapter,
    x: &G::Value,
) -> Result<G::Value> {
    let body = block.run(g, x)?;
    let side = adapter.run(g, x)?;
    let y = g.add(x, &body)?;
    g.add(&y, &side)
}

/// `x + shortcut(x)`.
pub(crate) fn skipped_layer<G: Graph>(g: &mut G, shortcut: &Adapter, x: &G::Value) -> Result<G::Value> {
    let side = shortcut.run(g, x)?;
    g.add(x, &side)
}

/// Anything that maps an input batch to logits along a (possibly masked) route.
pub trait Model: Sync {
    fn dims(&self) -> &NetworkDims;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn logits<G: Graph>(&self, g: &mut G, x: G::Value, mask: &SkipMask) -> Result<G::Value>;
    /// Forward multiply-adds for `batch` rows along `mask`.
    fn flops(&self, mask: &SkipMask, batch: usize) -> Result<u64>;

    fn forward(&self, x: &Tensor, mask: &SkipMask) -> Result<Tensor> {
        check_input(self.dims(), x)?;
        let mut g = Eager::new(self.store());
        Ok(self.logits(&mut g, Cow::Borrowed(x), mask)?.into_owned())
    }

    fn forward_taped(&self, tape: &mut Tape, x: &Tensor, mask: &SkipMask) -> Result<Var> {
        check_input(self.dims(), x)?;
        let xv = tape.constant(x.clone());
        let mut g = Taped::new(tape, self.store());
        self.logits(&mut g, xv, mask)
    }
}

fn check_input(dims: &NetworkDims, x: &Tensor) -> Result<()> {
    let (_, cols) = x.dims2("forward")?;
    if cols != dims.input_dim {
        return Err(DasError::Dimension {
            op: "forward",
            left: x.shape().to_vec(),
            right: vec![dims.input_dim, dims.d],
        });
    }
    Ok(())
}

/// Which adapter of a module.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterKind {
    Parallel,
    Shortcut,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippableNetwork {
    dims: NetworkDims,
    store: ParamStore,
    embed: Linear,
    blocks: Vec<FrozenBlock>,
    adapt_adapters: Vec<Adapter>,
    skip_adapters: Vec<Adapter>,
    head: Linear,
}

pub(crate) fn block_names(i: usize) -> [String; 4] {
    [
        format!("blocks.{i}.fc1.weight"),
        format!("blocks.{i}.fc1.bias"),
        format!("blocks.{i}.fc2.weight"),
        format!("blocks.{i}.fc2.bias"),
    ]
}

pub(crate) fn adapter_names(kind: AdapterKind, i: usize) -> [String; 2] {
    let prefix = match kind {
        AdapterKind::Parallel => "adapt",
        AdapterKind::Shortcut => "skip",
    };
    [format!("{prefix}.{i}.w_in"), format!("{prefix}.{i}.w_out")]
}

impl SkippableNetwork {
    /// Randomly initialised network. Blocks start frozen; adapters start with `W_out = 0`.
    pub fn new(dims: NetworkDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let mut store = ParamStore::new();
        let NetworkDims {
            n,
            input_dim,
            d,
            d_ff,
            h_adapt,
            h_skip,
            classes,
        } = dims;

        let embed = linear(&mut store, "embed", ParamGroup::Embed, input_dim, d, rng, false)?;
        let mut blocks = Vec::with_capacity(n);
        let mut adapt_adapters = Vec::with_capacity(n);
        let mut skip_adapters = Vec::with_capacity(n);
        for i in 0..n {
            let [w1, b1, w2, b2] = block_names(i);
            let fc1 = Linear {
                weight: store.insert(
                    w1,
                    ParamGroup::Block,
                    Parameter::new(Tensor::randn(&[d, d_ff], (2.0 / d as f64).sqrt(), rng), true),
                )?,
                bias: store.insert(b1, ParamGroup::Block, Parameter::new(Tensor::zeros(&[d_ff]), true))?,
            };
            let fc2 = Linear {
                weight: store.insert(
                    w2,
                    ParamGroup::Block,
                    Parameter::new(
                        Tensor::randn(&[d_ff, d], 0.5 / (d_ff as f64).sqrt(), rng),
                        true,
                    ),
                )?,
                bias: store.insert(b2, ParamGroup::Block, Parameter::new(Tensor::zeros(&[d]), true))?,
            };
            blocks.push(FrozenBlock { index: i, fc1, fc2 });
            adapt_adapters.push(new_adapter(&mut store, AdapterKind::Parallel, i, d, h_adapt, rng)?);
            skip_adapters.push(new_adapter(&mut store, AdapterKind::Shortcut, i, d, h_skip, rng)?);
        }
        let head = linear(&mut store, "head", ParamGroup::Head, d, classes, rng, false)?;

        Ok(SkippableNetwork {
            dims,
            store,
            embed,
            blocks,
            adapt_adapters,
            skip_adapters,
            head,
        })
    }

    /// Rebuilds the structure over an existing store that uses the standard names.
    pub(crate) fn from_store(dims: NetworkDims, store: ParamStore) -> Result<Self> {
        dims.validate()?;
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
        let mut blocks = Vec::new();
        let mut adapt_adapters = Vec::new();
        let mut skip_adapters = Vec::new();
        for i in 0..dims.n {
            let [w1, b1, w2, b2] = block_names(i);
            blocks.push(FrozenBlock {
                index: i,
                fc1: Linear {
                    weight: id(&w1)?,
                    bias: id(&b1)?,
                },
                fc2: Linear {
                    weight: id(&w2)?,
                    bias: id(&b2)?,
                },
            });
            for (kind, h, list) in [
                (AdapterKind::Parallel, dims.h_adapt, &mut adapt_adapters),
                (AdapterKind::Shortcut, dims.h_skip, &mut skip_adapters),
            ] {
                let [wi, wo] = adapter_names(kind, i);
                list.push(Adapter {
                    w_in: id(&wi)?,
                    w_out: id(&wo)?,
                    h,
                });
            }
        }
        let net = SkippableNetwork {
            dims,
            store,
            embed,
            blocks,
            adapt_adapters,
            skip_adapters,
            head,
        };
        net.check_shapes()?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        let NetworkDims {
            input_dim,
            d,
            d_ff,
            h_adapt,
            h_skip,
            classes,
            ..
        } = self.dims;
        let mut expect = vec![
            (self.embed.weight, vec![input_dim, d]),
            (self.embed.bias, vec![d]),
            (self.head.weight, vec![d, classes]),
            (self.head.bias, vec![classes]),
        ];
        for i in 0..self.dims.n {
            let b = &self.blocks[i];
            expect.extend([
                (b.fc1.weight, vec![d, d_ff]),
                (b.fc1.bias, vec![d_ff]),
                (b.fc2.weight, vec![d_ff, d]),
                (b.fc2.bias, vec![d]),
                (self.adapt_adapters[i].w_in, vec![d, h_adapt]),
                (self.adapt_adapters[i].w_out, vec![h_adapt, d]),
                (self.skip_adapters[i].w_in, vec![d, h_skip]),
                (self.skip_adapters[i].w_out, vec![h_skip, d]),
            ]);
        }
        for (id, shape) in expect {
            let got = self.store.get(id).tensor.shape();
            if got != shape.as_slice() {
                return Err(DasError::Dimension {
                    op: "checkpoint",
                    left: got.to_vec(),
                    right: shape,
                });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.dims.n
    }

    pub fn blocks(&self) -> &[FrozenBlock] {
        &self.blocks
    }

    pub fn adapter(&self, kind: AdapterKind, i: usize) -> &Adapter {
        match kind {
            AdapterKind::Parallel => &self.adapt_adapters[i],
            AdapterKind::Shortcut => &self.skip_adapters[i],
        }
    }

    pub fn embed(&self) -> &Linear {
        &self.embed
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.dims.n {
            return Err(DasError::Index {
                what: "modules",
                index: i,
                bound: self.dims.n,
            });
        }
        Ok(())
    }

    fn check_hidden(&self, x: &Tensor) -> Result<()> {
        let (_, cols) = x.dims2("block")?;
        if cols != self.dims.d {
            return Err(DasError::Dimension {
                op: "block",
                left: x.shape().to_vec(),
                right: vec![self.dims.d],
            });
        }
        Ok(())
    }

    /// Embedding of raw inputs into the hidden width.
    pub fn embed_forward(&self, x: &Tensor) -> Result<Tensor> {
        check_input(&self.dims, x)?;
        let mut g = Eager::new(&self.store);
        Ok(self.embed.forward(&mut g, &Cow::Borrowed(x))?.into_owned())
    }

    pub fn head_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_hidden(x)?;
        let mut g = Eager::new(&self.store);
        Ok(self.head.forward(&mut g, &Cow::Borrowed(x))?.into_owned())
    }

    pub fn adapter_forward(&self, kind: AdapterKind, i: usize, x: &Tensor) -> Result<Tensor> {
        self.check_index(i)?;
        self.check_hidden(x)?;
        self.adapter(kind, i).forward(&self.store, x)
    }

    /// Output of frozen block `i` alone, without the residual.
    pub fn block_output(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        self.check_index(i)?;
        self.check_hidden(x)?;
        let mut g = Eager::new(&self.store);
        Ok(self.blocks[i].run(&mut g, &Cow::Borrowed(x))?.into_owned())
    }

    /// `x + block_i(x) + adapter_i(x)`.
    pub fn block_forward_adapted(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        self.check_index(i)?;
        self.check_hidden(x)?;
        let mut g = Eager::new(&self.store);
        let out = adapted_layer(&mut g, &self.blocks[i], &self.adapt_adapters[i], &Cow::Borrowed(x))?;
        Ok(out.into_owned())
    }

    /// `x + shortcut_i(x)`; block `i` is not evaluated.
    pub fn block_forward_skipped(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        self.check_index(i)?;
        self.check_hidden(x)?;
        let mut g = Eager::new(&self.store);
        let out = skipped_layer(&mut g, &self.skip_adapters[i], &Cow::Borrowed(x))?;
        Ok(out.into_owned())
    }

    /// Forward without adapters: `x + block_i(x)` at every layer. This is the
    /// function computed by the pretrained frozen network.
    pub fn forward_frozen(&self, x: &Tensor) -> Result<Tensor> {
        check_input(&self.dims, x)?;
        let mut g = Eager::new(&self.store);
        let mut h = self.embed.forward(&mut g, &Cow::Borrowed(x))?;
        for block in &self.blocks {
            let body = block.run(&mut g, &h)?;
            h = g.add(&h, &body)?;
        }
        Ok(self.head.forward(&mut g, &h)?.into_owned())
    }

    /// Taped counterpart of [`SkippableNetwork::forward_frozen`], used for pretraining.
    pub fn forward_frozen_taped(&self, tape: &mut Tape, x: &Tensor) -> Result<Var> {
        check_input(&self.dims, x)?;
        let xv = tape.constant(x.clone());
        let mut g = Taped::new(tape, &self.store);
        let mut h = self.embed.forward(&mut g, &xv)?;
        for block in &self.blocks {
            let body = block.run(&mut g, &h)?;
            h = g.add(&h, &body)?;
        }
        self.head.forward(&mut g, &h)
    }

    /// Hidden states entering each block (index `i` is the input of block `i`)
    /// plus the final hidden state, along the frozen route.
    pub fn frozen_hidden_states(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = self.embed_forward(x)?;
        let mut states = Vec::with_capacity(self.dims.n + 1);
        for i in 0..self.dims.n {
            let body = self.block_output(i, &h)?;
            let next = h.add(&body)?;
            states.push(h);
            h = next;
        }
        states.push(h);
        Ok(states)
    }

    /// Multiplies the output layer of block `i` (weights and bias) by `factor`,
    /// which scales the block's residual contribution by the same factor.
    pub fn scale_block_output(&mut self, i: usize, factor: f64) -> Result<()> {
        self.check_index(i)?;
        let fc2 = self.blocks[i].fc2;
        self.store.get_mut(fc2.weight).tensor.scale_in_place(factor);
        self.store.get_mut(fc2.bias).tensor.scale_in_place(factor);
        Ok(())
    }

    pub fn set_blocks_frozen(&mut self, frozen: bool) {
        self.store.set_frozen(ParamGroup::Block, frozen);
    }

    pub fn set_adapters_frozen(&mut self, frozen: bool) {
        self.store.set_frozen(ParamGroup::Adapter, frozen);
    }

    /// Replaces every adapter with a fresh one (`W_in` small random, `W_out = 0`).
    pub fn reset_adapters(&mut self, rng: &mut impl Rng) {
        let d = self.dims.d;
        for a in self.adapt_adapters.iter().chain(&self.skip_adapters) {
            let w_in = self.store.get_mut(a.w_in);
            *w_in = Parameter::new(Tensor::randn(&[d, a.h], 1.0 / (d as f64).sqrt(), rng), w_in.frozen);
            let w_out = self.store.get_mut(a.w_out);
            *w_out = Parameter::new(Tensor::zeros(&[a.h, d]), w_out.frozen);
        }
    }

    /// Analytic multiply-add count of one forward pass of `batch` rows along `mask`.
    pub fn count_flops(&self, mask: &SkipMask, batch: usize) -> Result<u64> {
        mask.check_n(self.dims.n)?;
        Ok(flops::count(&self.dims, |i| mask.contains(i), batch))
    }

    /// Parameters of the frozen blocks.
    pub fn block_param_total(&self) -> usize {
        self.dims.n * self.dims.block_param_count()
    }

    pub fn prune(&self, mask: &SkipMask) -> Result<PrunedNetwork> {
        PrunedNetwork::from_network(self, mask)
    }
}

impl Model for SkippableNetwork {
    fn dims(&self) -> &NetworkDims {
        &self.dims
    }

    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn logits<G: Graph>(&self, g: &mut G, x: G::Value, mask: &SkipMask) -> Result<G::Value> {
        mask.check_n(self.dims.n)?;
        let mut h = self.embed.forward(g, &x)?;
        for i in 0..self.dims.n {
            h = if mask.contains(i) {
                skipped_layer(g, &self.skip_adapters[i], &h)?
            } else {
                adapted_layer(g, &self.blocks[i], &self.adapt_adapters[i], &h)?
            };
        }
        self.head.forward(g, &h)
    }

    fn flops(&self, mask: &SkipMask, batch: usize) -> Result<u64> {
        self.count_flops(mask, batch)
    }
}

fn linear(
    store: &mut ParamStore,
    prefix: &str,
    group: ParamGroup,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
    frozen: bool,
) -> Result<Linear> {
    Ok(Linear {
        weight: store.insert(
            format!("{prefix}.weight"),
            group,
            Parameter::new(
                Tensor::randn(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
                frozen,
            ),
        )?,
        bias: store.insert(
            format!("{prefix}.bias"),
            group,
            Parameter::new(Tensor::zeros(&[fan_out]), frozen),
        )?,
    })
}

fn new_adapter(
    store: &mut ParamStore,
    kind: AdapterKind,
    i: usize,
    d: usize,
    h: usize,
    rng: &mut impl Rng,
) -> Result<Adapter> {
    let [wi, wo] = adapter_names(kind, i);
    Ok(Adapter {
        w_in: store.insert(
            wi,
            ParamGroup::Adapter,
            Parameter::new(Tensor::randn(&[d, h], 1.0 / (d as f64).sqrt(), rng), false),
        )?,
        w_out: store.insert(wo, ParamGroup::Adapter, Parameter::new(Tensor::zeros(&[h, d]), false))?,
        h,
    })
}
