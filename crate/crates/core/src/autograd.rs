//! Reverse-mode gradient tape over the kernels in [`crate::ops`].
//!
//! Only gradients with respect to tensor inputs are tracked; convolution
//! weights and normalisation statistics enter as constants.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{invalid, Error, Result};
use crate::ops::{self, Activation, BNParams, Cbs, ConvGeometry, ConvParams};
use crate::tensor::{Shape, Tensor};

enum Op {
    Leaf,
    Conv { x: usize, weight: Tensor, geo: ConvGeometry },
    BatchNorm { x: usize, params: BNParams },
    Act { x: usize, kind: Activation },
    ConcatChannels { parts: Vec<(usize, usize)> },
    SliceChannels { x: usize, start: usize },
    Gather { x: usize, source: Vec<usize> },
    StripRows { x: usize },
    StripCols { x: usize },
    Transpose { x: usize },
    ConcatHeight { parts: Vec<(usize, usize)> },
    SliceHeight { x: usize, start: usize },
    Outer { h: usize, w: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    WeightedSum { x: usize, weights: Option<Tensor> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Records forward evaluations so that a scalar output can be
/// differentiated with respect to any earlier [`Var`].
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that evaluates values only; [`Tape::backward`] is unavailable.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, name: &'static str, value: Tensor, op: impl FnOnce() -> Op) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let op = if self.record { op() } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Gradients of the single-element `output` with respect to every node.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        if !self.record {
            return Err(invalid("backward on a no_grad tape"));
        }
        if !std::ptr::eq(output.tape, self) {
            return Err(invalid("backward: variable belongs to another tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[output.id].value.len() != 1 {
            return Err(invalid(format!(
                "backward: output must be a scalar, got shape {}",
                nodes[output.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, weight, geo } => {
                    let gx = ops::conv_backward_input(&g, val(*x).shape(), weight, *geo);
                    accumulate(&mut grads, *x, gx);
                }
                Op::BatchNorm { x, params } => {
                    accumulate(&mut grads, *x, ops::batch_norm_backward(&g, params));
                }
                Op::Act { x, kind } => {
                    accumulate(&mut grads, *x, ops::activation_backward(&g, val(*x), *kind));
                }
                Op::ConcatChannels { parts } => {
                    let sizes: Vec<usize> = parts.iter().map(|p| p.1).collect();
                    let pieces = ops::split_channels(&g, &sizes)?;
                    for ((pid, _), piece) in parts.iter().zip(pieces) {
                        accumulate(&mut grads, *pid, piece);
                    }
                }
                Op::SliceChannels { x, start } => {
                    let xs = val(*x).shape();
                    let gs = g.shape();
                    let mut full = vec![0.0; xs.numel()];
                    for b in 0..xs.b {
                        let n = gs.c * gs.plane();
                        let off = (b * xs.c + start) * xs.plane();
                        full[off..off + n].copy_from_slice(&g.data()[b * n..(b + 1) * n]);
                    }
                    accumulate(&mut grads, *x, Tensor::from_vec(xs, full)?);
                }
                Op::Gather { x, source } => {
                    accumulate(&mut grads, *x, ops::gather_channels_backward(&g, source));
                }
                Op::StripRows { x } => {
                    accumulate(&mut grads, *x, ops::strip_pools_backward(val(*x), Some(&g), None));
                }
                Op::StripCols { x } => {
                    accumulate(&mut grads, *x, ops::strip_pools_backward(val(*x), None, Some(&g)));
                }
                Op::Transpose { x } => {
                    accumulate(&mut grads, *x, ops::transpose_hw(&g));
                }
                Op::ConcatHeight { parts } => {
                    let sizes: Vec<usize> = parts.iter().map(|p| p.1).collect();
                    let pieces = ops::split_height(&g, &sizes)?;
                    for ((pid, _), piece) in parts.iter().zip(pieces) {
                        accumulate(&mut grads, *pid, piece);
                    }
                }
                Op::SliceHeight { x, start } => {
                    let xs = val(*x).shape();
                    let gs = g.shape();
                    let full = Tensor::from_fn(xs, |b, c, y, w| {
                        if y >= *start && y < start + gs.h {
                            g.at(b, c, y - start, w)
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads, *x, full);
                }
                Op::Outer { h, w } => {
                    let (gh, gw) = ops::outer_hw_backward(&g, val(*h), val(*w));
                    accumulate(&mut grads, *h, gh);
                    accumulate(&mut grads, *w, gw);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Mul { a, b } => {
                    accumulate(&mut grads, *a, ops::mul(&g, val(*b))?);
                    accumulate(&mut grads, *b, ops::mul(&g, val(*a))?);
                }
                Op::WeightedSum { x, weights } => {
                    let s = g.data()[0];
                    let gx = match weights {
                        Some(wt) => wt.map(|w| w * s),
                        None => Tensor::full(val(*x).shape(), s),
                    };
                    accumulate(&mut grads, *x, gx);
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    grads[id] = Some(match grads[id].take() {
        Some(prev) => ops::add(&prev, &g).expect("gradient shapes agree"),
        None => g,
    });
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` did not influence the output.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id]))
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Shape {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(invalid("variables belong to different tapes"))
        }
    }

    pub fn conv2d(self, params: &ConvParams) -> Result<Var<'t>> {
        let y = ops::conv2d(&self.value(), params)?;
        let x = self.id;
        self.tape.push("conv2d", y, || Op::Conv {
            x,
            weight: params.weight.clone(),
            geo: ConvGeometry {
                out_channels: params.out_channels(),
                in_per_group: params.weight.shape().c,
                kh: params.kernel().0,
                kw: params.kernel().1,
                stride: params.stride,
                padding: params.padding,
                groups: params.groups,
                shared: false,
            },
        })
    }

    /// Grouped convolution where every group reuses the same `weight`.
    pub(crate) fn shared_group_conv(
        self,
        weight: &Tensor,
        groups: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let geo = ConvGeometry::shared(weight.shape(), groups, stride, padding);
        let y = ops::conv_forward("vortex_conv", &self.value(), weight, None, geo)?;
        let x = self.id;
        self.tape.push("vortex_conv", y, || Op::Conv {
            x,
            weight: weight.clone(),
            geo,
        })
    }

    pub fn batch_norm(self, params: &BNParams) -> Result<Var<'t>> {
        let y = ops::batch_norm(&self.value(), params)?;
        let x = self.id;
        self.tape.push("batch_norm", y, || Op::BatchNorm {
            x,
            params: params.clone(),
        })
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'t>> {
        let y = ops::activation(&self.value(), kind);
        let x = self.id;
        let name = match kind {
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
        };
        self.tape.push(name, y, || Op::Act { x, kind })
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.activation(Activation::Silu)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.activation(Activation::Sigmoid)
    }

    pub fn cbs(self, block: &Cbs) -> Result<Var<'t>> {
        self.conv2d(&block.conv)?.batch_norm(&block.bn)?.silu()
    }

    pub fn concat_channels(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| invalid("concat_channels: no parts"))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let y = ops::concat_channels(&refs)?;
        let ids = parts.iter().zip(&values).map(|(p, v)| (p.id, v.shape().c)).collect();
        first.tape.push("concat_channels", y, || Op::ConcatChannels { parts: ids })
    }

    pub fn split_channels(self, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let c = self.shape().c;
        let total: usize = sizes.iter().sum();
        if total != c {
            return Err(Error::Shape {
                op: "split_channels",
                dim: "channel sizes sum",
                expected: c,
                actual: total,
            });
        }
        let value = self.value();
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            let piece = ops::slice_channels(&value, start, n);
            let s = start;
            let x = self.id;
            out.push(self.tape.push("split_channels", piece, || Op::SliceChannels { x, start: s })?);
            start += n;
        }
        Ok(out)
    }

    pub fn gather_channels(self, source: &[usize]) -> Result<Var<'t>> {
        let y = ops::gather_channels(&self.value(), source)?;
        let x = self.id;
        self.tape.push("gather_channels", y, || Op::Gather {
            x,
            source: source.to_vec(),
        })
    }

    pub fn strip_pools(self) -> Result<(Var<'t>, Var<'t>)> {
        let (vh, vw) = ops::strip_pools(&self.value())?;
        let x = self.id;
        let vh = self.tape.push("strip_pools", vh, || Op::StripRows { x })?;
        let vw = self.tape.push("strip_pools", vw, || Op::StripCols { x })?;
        Ok((vh, vw))
    }

    pub fn transpose_hw(self) -> Result<Var<'t>> {
        let y = ops::transpose_hw(&self.value());
        let x = self.id;
        self.tape.push("transpose_hw", y, || Op::Transpose { x })
    }

    pub fn concat_height(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| invalid("concat_height: no parts"))?;
        for p in parts {
            first.same_tape(p)?;
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let y = ops::concat_height(&refs)?;
        let ids = parts.iter().zip(&values).map(|(p, v)| (p.id, v.shape().h)).collect();
        first.tape.push("concat_height", y, || Op::ConcatHeight { parts: ids })
    }

    pub fn split_height(self, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let pieces = ops::split_height(&self.value(), sizes)?;
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for (piece, &n) in pieces.into_iter().zip(sizes) {
            let s = start;
            let x = self.id;
            out.push(self.tape.push("split_height", piece, || Op::SliceHeight { x, start: s })?);
            start += n;
        }
        Ok(out)
    }

    pub fn outer_hw(col_h: Var<'t>, col_w: Var<'t>) -> Result<Var<'t>> {
        col_h.same_tape(&col_w)?;
        let y = ops::outer_hw(&col_h.value(), &col_w.value())?;
        let (h, w) = (col_h.id, col_w.id);
        col_h.tape.push("outer_hw", y, || Op::Outer { h, w })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let y = ops::add(&self.value(), &other.value())?;
        let (a, b) = (self.id, other.id);
        self.tape.push("add", y, || Op::Add { a, b })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let y = ops::mul(&self.value(), &other.value())?;
        let (a, b) = (self.id, other.id);
        self.tape.push("mul", y, || Op::Mul { a, b })
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let s = self.value().sum();
        let x = self.id;
        self.tape.push("sum", Tensor::scalar(s), || Op::WeightedSum { x, weights: None })
    }

    /// `sum(self ⊙ weights)` for a constant `weights` of the same shape.
    pub fn weighted_sum(self, weights: &Tensor) -> Result<Var<'t>> {
        let v = self.value();
        ops::check_same("weighted_sum", &v, weights)?;
        let s = v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let x = self.id;
        self.tape.push("weighted_sum", Tensor::scalar(s), || Op::WeightedSum {
            x,
            weights: Some(weights.clone()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones([1, 2, 2, 2]));
        let b = tape.leaf(Tensor::ones([1, 2, 2, 2]));
        let s = a.silu().unwrap().sum().unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(b).data().iter().all(|&v| v == 0.0));
        assert!(g.wrt(a).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full([2, 3, 2, 2], 0.3));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x), Tensor::ones([2, 3, 2, 2]));
    }

    #[test]
    fn reused_variable_accumulates() {
        // d/dx sum(x * x) = 2x
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec([1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let y = x.mul(x).unwrap().sum().unwrap();
        assert_eq!(tape.backward(y).unwrap().wrt(x).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_requires_scalar_and_recording() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones([1, 1, 2, 2]));
        assert!(tape.backward(x).is_err());
        let nt = Tape::no_grad();
        let y = nt.leaf(Tensor::scalar(1.0));
        assert!(nt.backward(y).is_err());
    }

    #[test]
    fn non_finite_is_reported_with_op_name() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 1, 1, 1], 1e200));
        let err = x.mul(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "mul" }));
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::from_fn([1, 2, 3, 3], |_, c, h, w| (c + h * w) as f64 * 0.1 - 0.3));
            let (vh, vw) = x.strip_pools().unwrap();
            let s = vh.sum().unwrap().add(vw.silu().unwrap().sum().unwrap()).unwrap();
            tape.backward(s).unwrap().wrt(x)
        };
        assert_eq!(run(), run());
    }
}
