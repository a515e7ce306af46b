//! One forward definition, two executors.
//!
//! Network code is written once against [`Graph`]. [`Eager`] evaluates
//! immediately with borrowed parameters; [`Taped`] records onto a [`Tape`]
//! for training. Both run the same kernels in the same order, so their
//! outputs agree bit for bit.

use std::borrow::Cow;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub trait Graph {
    type Value;

    fn param(&mut self, id: ParamId) -> Self::Value;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn add_bias(&mut self, x: &Self::Value, bias: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value>;
}

pub struct Eager<'s> {
    store: &'s ParamStore,
}

impl<'s> Eager<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Eager { store }
    }
}

impl<'s> Graph for Eager<'s> {
    type Value = Cow<'s, Tensor>;

    fn param(&mut self, id: ParamId) -> Self::Value {
        Cow::Borrowed(&self.store.get(id).tensor)
    }

    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Cow::Owned(a.matmul(b)?))
    }

    fn add_bias(&mut self, x: &Self::Value, bias: &Self::Value) -> Result<Self::Value> {
        Ok(Cow::Owned(x.add_bias(bias)?))
    }

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value> {
        Ok(Cow::Owned(a.add(b)?))
    }

    fn relu(&mut self, x: &Self::Value) -> Result<Self::Value> {
        Ok(Cow::Owned(x.relu()))
    }
}

pub struct Taped<'t, 's> {
    pub tape: &'t mut Tape,
    store: &'s ParamStore,
}

impl<'t, 's> Taped<'t, 's> {
    pub fn new(tape: &'t mut Tape, store: &'s ParamStore) -> Self {
        Taped { tape, store }
    }
}

impl Graph for Taped<'_, '_> {
    type Value = Var;

    fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.matmul(*a, *b)
    }

    fn add_bias(&mut self, x: &Var, bias: &Var) -> Result<Var> {
        self.tape.add_bias(*x, *bias)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        self.tape.relu(*x)
    }
}
