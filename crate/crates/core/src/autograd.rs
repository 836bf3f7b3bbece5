//! Operation recording and reverse-mode gradients for the fixed op set.

use std::fmt::Debug;

use crate::error::{Axis, TensorError};
use crate::ops;
use crate::tensor::{Element, Tensor};

/// Weights and bias of one convolution layer. Gradients live in the
/// tensors' grad buffers and accumulate until zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Element = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> ConvLayer<T> {
    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Element>(&self) -> ConvLayer<U> {
        ConvLayer {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// Keyed access to conv layers, so a [`Tape`] can name parameters without
/// owning them.
pub trait LayerStore<T: Element> {
    type Key: Copy + Debug;

    fn layer(&self, key: Self::Key) -> Option<&ConvLayer<T>>;
    fn layer_mut(&mut self, key: Self::Key) -> Option<&mut ConvLayer<T>>;
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<K> {
    Input,
    Conv { input: Var, layer: K, stride: usize },
    Gelu { input: Var },
    Concat { inputs: Vec<Var> },
    AvgPool { input: Var },
    SpaceToDepth { input: Var, block: usize },
    Reshape { input: Var },
}

/// Records a forward computation so gradients can be propagated back.
///
/// Conv nodes reference layers by key; backward reads the weights from the
/// store passed in, which must hold the same values as during forward.
#[derive(Debug)]
pub struct Tape<K, T: Element = f32> {
    ops: Vec<Op<K>>,
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<K, T: Element> Default for Tape<K, T> {
    fn default() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }
}

impl<K: Copy + Debug, T: Element> Tape<K, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<K>, value: Tensor<T>) -> Var {
        self.ops.push(op);
        self.values.push(value);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.values[var.0]
    }

    /// Gradient accumulated for `var` by [`Tape::backward`]. Only inputs keep
    /// their gradients after the pass.
    pub fn grad(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Values fed into GeLU nodes, in recording order.
    pub fn preactivations(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.ops.iter().filter_map(|op| match op {
            Op::Gelu { input } => Some(&self.values[input.0]),
            _ => None,
        })
    }

    pub fn conv2d<S: LayerStore<T, Key = K>>(
        &mut self,
        input: Var,
        store: &S,
        layer: K,
        stride: usize,
    ) -> Result<Var, TensorError> {
        let params = store.layer(layer).ok_or_else(|| missing_layer(layer))?;
        let out = ops::conv2d(self.value(input), &params.weight, &params.bias, stride)?;
        Ok(self.push(
            Op::Conv {
                input,
                layer,
                stride,
            },
            out,
        ))
    }

    pub fn gelu(&mut self, input: Var) -> Var {
        let out = ops::gelu(self.value(input));
        self.push(Op::Gelu { input }, out)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        let refs: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = ops::concat_channels(&refs)?;
        Ok(self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            out,
        ))
    }

    pub fn avgpool2x2(&mut self, input: Var) -> Result<Var, TensorError> {
        let out = ops::avgpool2x2(self.value(input))?;
        Ok(self.push(Op::AvgPool { input }, out))
    }

    pub fn space_to_depth(&mut self, input: Var, block: usize) -> Result<Var, TensorError> {
        let out = ops::space_to_depth(self.value(input), block)?;
        Ok(self.push(Op::SpaceToDepth { input, block }, out))
    }

    pub fn reshape_tokens(&mut self, input: Var, per_position: usize) -> Result<Var, TensorError> {
        let out = ops::reshape_tokens(self.value(input).clone(), per_position)?;
        Ok(self.push(Op::Reshape { input }, out))
    }

    /// Propagates `grad_output` from `output` back through the recording.
    ///
    /// Parameter gradients accumulate (`+=`) into the store's layers; input
    /// gradients accumulate on the tape.
    pub fn backward<S: LayerStore<T, Key = K>>(
        &mut self,
        output: Var,
        grad_output: &[T],
        store: &mut S,
    ) -> Result<(), TensorError> {
        if output.0 >= self.ops.len() {
            return Err(TensorError::BackwardBeforeForward(format!(
                "output {} not recorded ({} ops on tape)",
                output.0,
                self.ops.len()
            )));
        }
        let expected = self.values[output.0].len();
        if grad_output.len() != expected {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                axis: Axis::Length,
                expected,
                actual: grad_output.len(),
            });
        }
        accumulate(&mut self.grads[output.0], grad_output);

        for idx in (0..=output.0).rev() {
            let Some(grad) = self.grads[idx].take() else {
                continue;
            };
            match &self.ops[idx] {
                Op::Input => {
                    self.grads[idx] = Some(grad);
                }
                Op::Conv {
                    input,
                    layer,
                    stride,
                } => {
                    let x = &self.values[input.0];
                    let params = store.layer_mut(*layer).ok_or_else(|| missing_layer(*layer))?;
                    let geometry = ops::conv_geometry(x, &params.weight, &params.bias, *stride)?;
                    let ConvLayer { weight, bias } = params;
                    let (w, grad_w) = weight.data_and_grad_mut();
                    let grad_in = slot(&mut self.grads[input.0], x.len());
                    ops::conv2d_backward(
                        &geometry,
                        x,
                        w,
                        &grad,
                        Some(grad_in),
                        grad_w,
                        bias.grad_mut(),
                    )?;
                }
                Op::Gelu { input } => {
                    let x = &self.values[input.0];
                    let grad_in = slot(&mut self.grads[input.0], x.len());
                    ops::gelu_backward(x, &grad, grad_in);
                }
                Op::Concat { inputs } => {
                    let total = *self.values[idx].shape().last().unwrap_or(&0);
                    let mut offset = 0;
                    for v in inputs {
                        let x = &self.values[v.0];
                        let width = *x.shape().last().unwrap_or(&0);
                        let grad_in = slot(&mut self.grads[v.0], x.len());
                        ops::concat_channels_backward(&grad, total, offset, width, grad_in);
                        offset += width;
                    }
                }
                Op::AvgPool { input } => {
                    let x = &self.values[input.0];
                    let dims = x.dims3("avgpool2x2")?;
                    let grad_in = slot(&mut self.grads[input.0], x.len());
                    ops::avgpool2x2_backward(dims, &grad, grad_in);
                }
                Op::SpaceToDepth { input, block } => {
                    let x = &self.values[input.0];
                    let dims = x.dims3("space_to_depth")?;
                    let grad_in = slot(&mut self.grads[input.0], x.len());
                    ops::space_to_depth_backward(dims, *block, &grad, grad_in);
                }
                Op::Reshape { input } => {
                    accumulate(&mut self.grads[input.0], &grad);
                }
            }
        }
        Ok(())
    }
}

fn missing_layer<K: Debug>(layer: K) -> TensorError {
    TensorError::InvalidArgument {
        op: "tape",
        reason: format!("layer {layer:?} not found in parameter store"),
    }
}

fn slot<T: Element>(grad: &mut Option<Vec<T>>, len: usize) -> &mut [T] {
    grad.get_or_insert_with(|| vec![T::ZERO; len])
}

fn accumulate<T: Element>(grad: &mut Option<Vec<T>>, delta: &[T]) {
    match grad {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b),
        None => *grad = Some(delta.to_vec()),
    }
}
