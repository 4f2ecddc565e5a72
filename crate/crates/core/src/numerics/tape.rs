//! Wengert tape: records primitive applications during the forward pass and
//! replays them in reverse to accumulate gradients.
//!
//! A tape is single-owner (`&mut` everywhere) and must not be shared between
//! concurrent computations; independent forward passes each get their own
//! tape. Nodes are appended in topological order by construction, and the
//! backward traversal visits each node exactly once.

use crate::error::{Error, Result};
use crate::numerics::element::Element;
use crate::numerics::ops::{self, Op};
use crate::numerics::tensor::Tensor;
use alloc::format;
use alloc::vec::Vec;

/// Handle onto a value stored in a tape's arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    output: usize,
}

#[derive(Debug, Default)]
pub struct Tape<E: Element> {
    values: Vec<Tensor<E>>,
    requires_grad: Vec<bool>,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            requires_grad: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push_value(&mut self, t: Tensor<E>, requires: bool) -> Var {
        self.values.push(t);
        self.requires_grad.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Register a leaf tensor. Differentiable leaves receive gradients after
    /// [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor<E>, requires_grad: bool) -> Var {
        self.push_value(t, requires_grad)
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, t: Tensor<E>) -> Var {
        self.push_value(t, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Apply a primitive to tape values. A node is recorded only when some
    /// input requires a gradient; pure inference passes leave the node list
    /// empty.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<E>> = inputs.iter().map(|v| &self.values[v.0]).collect();
        let out = ops::forward(&op, &tensors)?;
        let needs = inputs.iter().any(|v| self.requires_grad[v.0]);
        let out_var = self.push_value(out, needs);
        if needs {
            self.nodes.push(Node {
                op,
                inputs: inputs.iter().map(|v| v.0).collect(),
                output: out_var.0,
            });
        }
        Ok(out_var)
    }

    // Convenience wrappers; the model code reads like define-by-run math.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Div, &[a, b])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::AddScalar(c), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(Op::MulScalar(c), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::Reshape(shape), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn index_select(&mut self, a: Var, axis: usize, indices: Vec<usize>) -> Result<Var> {
        self.apply(Op::IndexSelect { axis, indices }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Gelu, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Softmax { axis }, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, gamma, beta])
    }

    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(Op::L2Normalize { axis, eps: 1e-12 }, &[a])
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mse, &[a, b])
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into every
    /// reachable value that requires one; repeated calls without
    /// [`Tape::zero_grads`] keep accumulating.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_t = &self.values[loss.0];
        if !loss_t.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_t.shape()
            )));
        }
        self.accumulate(loss.0, Tensor::full(loss_t.shape().to_vec(), E::ONE))?;

        for idx in (0..self.nodes.len()).rev() {
            let (op, inputs, output) = {
                let n = &self.nodes[idx];
                (n.op.clone(), n.inputs.clone(), n.output)
            };
            let Some(grad_out) = self.grads[output].clone() else {
                continue;
            };
            let input_tensors: Vec<&Tensor<E>> = inputs.iter().map(|&i| &self.values[i]).collect();
            let grads = ops::vjp(&op, &input_tensors, &self.values[output], &grad_out)?;
            if grads.len() != inputs.len() {
                return Err(Error::internal(format!(
                    "vjp arity mismatch for `{}`",
                    op.name()
                )));
            }
            for (&input, grad) in inputs.iter().zip(grads) {
                if let Some(g) = grad {
                    if self.requires_grad[input] {
                        self.accumulate(input, g)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, g: Tensor<E>) -> Result<()> {
        if g.shape() != self.values[idx].shape() {
            return Err(Error::internal(format!(
                "gradient shape {:?} vs value shape {:?}",
                g.shape(),
                self.values[idx].shape()
            )));
        }
        match &mut self.grads[idx] {
            Some(existing) => {
                let summed: Vec<E> = existing
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &b)| a + b)
                    .collect();
                *existing = Tensor::new(g.shape().to_vec(), summed)?;
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Mark an intermediate value so gradient propagation continues into it
    /// even though its own inputs may not require gradients. Used only by
    /// tests that probe interior gradients.
    pub fn retain_grad(&mut self, v: Var) {
        self.requires_grad[v.0] = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::max_abs_diff;

    #[test]
    fn square_gradient() {
        // loss = x * x at x = 3 -> d loss / d x = 6
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let loss = tape.mul(x, x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().scalar_value().unwrap(), 6.0);
    }

    #[test]
    fn softmax_sum_is_constant() {
        // loss = sum(softmax(v)) == 1 for any v, so the gradient vanishes.
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(
            Tensor::from_f64_slice(vec![4], &[0.3, -1.2, 2.0, 0.7]).unwrap(),
            true,
        );
        let sm = tape.softmax(v, 0).unwrap();
        let loss = tape.sum(sm).unwrap();
        tape.backward(loss).unwrap();
        for &g in tape.grad(v).unwrap().data() {
            assert!(g.abs() < 1e-12, "expected ~0, got {g}");
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64_slice(vec![2], &[1.0, 2.0]).unwrap(), true);
        let y = tape.mul(x, x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract { .. })));
    }

    #[test]
    fn backward_zero_backward_matches() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::from_f64_slice(vec![3], &[0.5, -1.0, 2.0]).unwrap(),
            true,
        );
        let e = tape.exp(x).unwrap();
        let s = tape.mul(e, e).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        let first = tape.grad(x).unwrap().clone();
        tape.zero_grads();
        tape.backward(loss).unwrap();
        let second = tape.grad(x).unwrap().clone();
        assert_eq!(first, second, "no accumulation leakage across zero_grads");
    }

    #[test]
    fn fanout_accumulates() {
        // loss = x*y + x -> d/dx = y + 1, d/dy = x
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.leaf(Tensor::scalar(5.0), true);
        let xy = tape.mul(x, y).unwrap();
        let loss = tape.add(xy, x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().scalar_value().unwrap(), 6.0);
        assert_eq!(tape.grad(y).unwrap().scalar_value().unwrap(), 3.0);
    }

    #[test]
    fn no_nodes_recorded_without_grad() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_f64_slice(vec![2, 2], &[1.0; 4]).unwrap());
        let y = tape.gelu(x).unwrap();
        let _ = tape.sum(y).unwrap();
        assert_eq!(tape.num_nodes(), 0);
    }

    /// Central finite differences around a two-layer MLP: the canonical
    /// smoke test that the whole chain of VJPs composes correctly.
    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        use crate::numerics::rng::{sample_gaussian, SeededRng};

        let mut rng = SeededRng::new(77, 0);
        let x: Tensor<f64> = sample_gaussian(&mut rng, &[4, 6]);
        let w1: Tensor<f64> = sample_gaussian(&mut rng, &[6, 5]).map(|v| v * 0.5);
        let w2: Tensor<f64> = sample_gaussian(&mut rng, &[5, 3]).map(|v| v * 0.5);

        let run = |w1: &Tensor<f64>, w2: &Tensor<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let xv = tape.constant(x.clone());
            let w1v = tape.leaf(w1.clone(), true);
            let w2v = tape.leaf(w2.clone(), true);
            let h = tape.matmul(xv, w1v).unwrap();
            let a = tape.gelu(h).unwrap();
            let o = tape.matmul(a, w2v).unwrap();
            let sm = tape.softmax(o, 1).unwrap();
            let sq = tape.mul(sm, sm).unwrap();
            let loss = tape.mean(sq).unwrap();
            tape.value(loss).scalar_value().unwrap()
        };

        // Analytic gradients.
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let w1v = tape.leaf(w1.clone(), true);
        let w2v = tape.leaf(w2.clone(), true);
        let h = tape.matmul(xv, w1v).unwrap();
        let a = tape.gelu(h).unwrap();
        let o = tape.matmul(a, w2v).unwrap();
        let sm = tape.softmax(o, 1).unwrap();
        let sq = tape.mul(sm, sm).unwrap();
        let loss = tape.mean(sq).unwrap();
        tape.backward(loss).unwrap();

        let eps = 1e-6;
        for (var, theta) in [(w1v, &w1), (w2v, &w2)] {
            let analytic = tape.grad(var).unwrap();
            let mut numeric = Tensor::zeros(theta.shape().to_vec());
            let mut numeric_data = numeric.data().to_vec();
            for i in 0..theta.len() {
                let mut plus = theta.data().to_vec();
                plus[i] += eps;
                let mut minus = theta.data().to_vec();
                minus[i] -= eps;
                let tp = Tensor::new(theta.shape().to_vec(), plus).unwrap();
                let tm = Tensor::new(theta.shape().to_vec(), minus).unwrap();
                let (fp, fm) = if var == w1v {
                    (run(&tp, &w2), run(&tm, &w2))
                } else {
                    (run(&w1, &tp), run(&w1, &tm))
                };
                numeric_data[i] = (fp - fm) / (2.0 * eps);
            }
            numeric = Tensor::new(theta.shape().to_vec(), numeric_data).unwrap();
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
                assert!(rel < 1e-6, "analytic {a} vs numeric {n}, rel {rel}");
            }
            let _ = max_abs_diff(analytic, &numeric);
        }
    }
}
