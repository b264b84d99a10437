//! Tape-based reverse mode over whole tensors.
//!
//! The forward pass appends one node per operation; [`Tape::backward`] walks
//! the nodes in reverse, pushing each node's gradient into its inputs and
//! accumulating parameter gradients in the [`ParamStore`].

use alloc::vec;
use alloc::vec::Vec;

use super::ops;
use super::{NetError, ParamStore, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Conv { x: Var, weight: usize, bias: usize, kernel: usize },
    Relu(Var),
    MaxPool { x: Var, argmax: Vec<u32> },
    Upsample(Var),
    Concat(Var, Var),
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

/// Gradients of the tape output with respect to every node.
#[derive(Debug, Clone)]
pub struct NodeGrads(Vec<Option<Tensor>>);

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        self.values.swap_remove(v.0)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Same-padded convolution with weight `[cout, cin, k, k]` and bias `[cout]`.
    pub fn conv(&mut self, params: &ParamStore, x: Var, weight: usize, bias: usize) -> Result<Var, NetError> {
        let w = params.get(weight);
        let [cout, cin, k, k2] = match w.shape[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(NetError::ParamLayout),
        };
        let input = &self.values[x.0];
        if k != k2 || k % 2 == 0 || params.get(bias).len() != cout {
            return Err(NetError::ParamLayout);
        }
        if input.channels() != cin {
            return Err(NetError::InputChannels { expected: cin, found: input.channels() });
        }
        let out = ops::conv_forward(input, &w.value, &params.get(bias).value, cout, k);
        Ok(self.push(out, Op::Conv { x, weight, bias, kernel: k }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu_forward(&self.values[x.0]);
        self.push(out, Op::Relu(x))
    }

    pub fn max_pool(&mut self, x: Var) -> Var {
        let (out, argmax) = ops::max_pool_forward(&self.values[x.0]);
        self.push(out, Op::MaxPool { x, argmax })
    }

    pub fn upsample(&mut self, x: Var) -> Var {
        let out = ops::upsample_forward(&self.values[x.0]);
        self.push(out, Op::Upsample(x))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NetError> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.height() != tb.height() || ta.width() != tb.width() {
            return Err(NetError::Shape { expected: ta.shape(), found: tb.shape() });
        }
        let out = ops::concat_forward(ta, tb);
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Back-propagates `upstream` (shaped like `output`) through the tape.
    /// Parameter gradients are added to the existing accumulators.
    pub fn backward(&self, params: &mut ParamStore, output: Var, upstream: &Tensor) -> Result<NodeGrads, NetError> {
        let expected = self.values[output.0].shape();
        if upstream.shape() != expected {
            return Err(NetError::Shape { expected, found: upstream.shape() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[output.0] = Some(upstream.clone());

        fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Input => {}
                Op::Conv { x, weight, bias, kernel } => {
                    let w_value = params.get(*weight).value.clone();
                    let mut d_w = core::mem::take(&mut params.get_mut(*weight).grad);
                    let mut d_b = core::mem::take(&mut params.get_mut(*bias).grad);
                    let d_x = ops::conv_backward(&self.values[x.0], &w_value, &g, &mut d_w, &mut d_b, *kernel);
                    params.get_mut(*weight).grad = d_w;
                    params.get_mut(*bias).grad = d_b;
                    accumulate(&mut grads, *x, d_x);
                }
                Op::Relu(x) => {
                    let d_x = ops::relu_backward(&self.values[i], &g);
                    accumulate(&mut grads, *x, d_x);
                }
                Op::MaxPool { x, argmax } => {
                    let d_x = ops::max_pool_backward(self.values[x.0].shape(), argmax, &g);
                    accumulate(&mut grads, *x, d_x);
                }
                Op::Upsample(x) => {
                    let d_x = ops::upsample_backward(&g);
                    accumulate(&mut grads, *x, d_x);
                }
                Op::Concat(a, b) => {
                    let (da, db) = ops::concat_backward(self.values[a.0].channels(), &g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
            }
            grads[i] = Some(g);
        }
        Ok(NodeGrads(grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_adjoint_routes_channels() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::from_vec(1, 2, 2, alloc::vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(Tensor::from_vec(2, 2, 2, alloc::vec![0.0; 8]));
        let c = tape.concat(a, b).unwrap();
        let up = Tensor::from_vec(3, 2, 2, (0..12).map(|i| i as f64).collect());
        let grads = tape.backward(&mut ParamStore::new(), c, &up).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &up.data()[..4]);
        assert_eq!(grads.get(b).unwrap().data(), &up.data()[4..]);
    }

    #[test]
    fn fan_out_accumulates() {
        // y = concat(relu(x), x): x receives both paths.
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_vec(1, 1, 2, alloc::vec![-1.0, 2.0]));
        let r = tape.relu(x);
        let y = tape.concat(r, x).unwrap();
        let up = Tensor::from_vec(2, 1, 2, alloc::vec![1.0, 1.0, 1.0, 1.0]);
        let grads = tape.backward(&mut ParamStore::new(), y, &up).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
    }
}
