#![allow(dead_code)]

use das::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Every differentiable tape operation, plus a small composite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    MatMul,
    AddBias,
    Add,
    Mul,
    Relu,
    Sigmoid,
    Sum,
    SoftmaxCrossEntropy,
    Chain,
}

pub const ALL_OPS: [Op; 9] = [
    Op::MatMul,
    Op::AddBias,
    Op::Add,
    Op::Mul,
    Op::Relu,
    Op::Sigmoid,
    Op::Sum,
    Op::SoftmaxCrossEntropy,
    Op::Chain,
];

/// Random inputs for one op, with a fixed random projection that turns a
/// tensor output into a scalar.
pub struct Case {
    pub op: Op,
    pub inputs: Vec<Tensor>,
    weights: Tensor,
    pub labels: Vec<usize>,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero so that central differences never straddle the relu kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = randn(shape, rng);
    for v in t.values_mut() {
        if v.abs() < 0.05 {
            *v = 0.05f64.copysign(*v) + *v;
        }
    }
    t
}

impl Case {
    pub fn random(op: Op, seed: u64) -> Case {
        let mut rng = rng(seed);
        let r = rng.random_range(1..6);
        let k = rng.random_range(1..6);
        let c = rng.random_range(2..6);
        let (inputs, out_shape) = match op {
            Op::MatMul => (vec![randn(&[r, k], &mut rng), randn(&[k, c], &mut rng)], vec![r, c]),
            Op::AddBias => (vec![randn(&[r, c], &mut rng), randn(&[1, c], &mut rng)], vec![r, c]),
            Op::Add | Op::Mul => (vec![randn(&[r, c], &mut rng), randn(&[r, c], &mut rng)], vec![r, c]),
            Op::Relu => (vec![away_from_zero(&[r, c], &mut rng)], vec![r, c]),
            Op::Sigmoid => (vec![Tensor::randn(&[r, c], 3.0, &mut rng)], vec![r, c]),
            Op::Sum => (vec![randn(&[r, c], &mut rng)], vec![1]),
            Op::SoftmaxCrossEntropy => (vec![Tensor::randn(&[r, c], 2.0, &mut rng)], vec![1]),
            Op::Chain => (
                vec![
                    randn(&[r, k], &mut rng),
                    randn(&[k, c], &mut rng),
                    randn(&[1, c], &mut rng),
                    randn(&[c, c], &mut rng),
                ],
                vec![1],
            ),
        };
        let weights = randn(&out_shape, &mut rng);
        let labels = (0..r).map(|_| rng.random_range(0..c)).collect();
        Case {
            op,
            inputs,
            weights,
            labels,
        }
    }

    /// Scalar objective built on `tape` from differentiable leaves `x`.
    pub fn objective(&self, tape: &mut Tape, x: &[Var]) -> Var {
        let out = match self.op {
            Op::MatMul => tape.matmul(x[0], x[1]),
            Op::AddBias => tape.add_bias(x[0], x[1]),
            Op::Add => tape.add(x[0], x[1]),
            Op::Mul => tape.mul(x[0], x[1]),
            Op::Relu => tape.relu(x[0]),
            Op::Sigmoid => tape.sigmoid(x[0]),
            Op::Sum => return tape.sum(x[0]).unwrap(),
            Op::SoftmaxCrossEntropy => return tape.softmax_cross_entropy(x[0], &self.labels).unwrap(),
            Op::Chain => {
                // sigmoid(relu(a b + bias) w) feeding a cross-entropy, with a residual add.
                let h = tape.matmul(x[0], x[1]).unwrap();
                let h = tape.add_bias(h, x[2]).unwrap();
                let a = tape.relu(h).unwrap();
                let z = tape.matmul(a, x[3]).unwrap();
                let s = tape.sigmoid(z).unwrap();
                let g = tape.mul(s, h).unwrap();
                let logits = tape.add(g, h).unwrap();
                return tape.softmax_cross_entropy(logits, &self.labels).unwrap();
            }
        }
        .unwrap();
        let w = tape.constant(self.weights.clone());
        let p = tape.mul(out, w).unwrap();
        tape.sum(p).unwrap()
    }

    fn eval(&self, inputs: &[Tensor]) -> f64 {
        let mut tape = Tape::new();
        let x: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let f = self.objective(&mut tape, &x);
        tape.value(f).unwrap().values()[0]
    }

    pub fn analytic(&self) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let x: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let f = self.objective(&mut tape, &x);
        let grads = tape.backward(f).unwrap();
        x.iter()
            .zip(&self.inputs)
            .map(|(&v, t)| grads.wrt(v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect()
    }

    /// Central differences, one coordinate at a time.
    pub fn numeric(&self, h: f64) -> Vec<Vec<f64>> {
        (0..self.inputs.len())
            .map(|k| {
                (0..self.inputs[k].numel())
                    .map(|j| {
                        let mut plus = self.inputs.clone();
                        plus[k].values_mut()[j] += h;
                        let mut minus = self.inputs.clone();
                        minus[k].values_mut()[j] -= h;
                        (self.eval(&plus) - self.eval(&minus)) / (2.0 * h)
                    })
                    .collect()
            })
            .collect()
    }

    /// Largest `|a - n| / max(|a|, |n|, 1e-3)` over all coordinates.
    pub fn max_rel_error(&self) -> f64 {
        let a = self.analytic();
        let n = self.numeric(1e-6);
        a.iter()
            .flatten()
            .zip(n.iter().flatten())
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
            .fold(0.0, f64::max)
    }
}
