//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! The graph is dynamic: every recorded op appends a node, so creation
//! order is a topological order and backward is a single reverse sweep.
//! Complex values are carried as planar `[2, h, w]` tensors (real channel,
//! then imaginary channel); gradients are taken with respect to both parts
//! independently.
//!
//! ```
//! use mri_robust::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let loss = tape.l2_squared(x);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0]);
//! ```

mod adam;
pub mod kernels;

use std::sync::Arc;

use thiserror::Error;

use crate::tensor::{ComplexTensor2, RealTensor2, TensorError};
use kernels::ConvShape;

pub use adam::{adam_update, Adam, AdamConfig, AdamState};

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; call reset_grads first")]
    AlreadyBackpropagated,
    #[error("expected {expected} tensors, got {got}")]
    Count { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Dense row-major tensor of arbitrary rank.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(AutodiffError::Length {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// `[1, h, w]` view of a real image.
    pub fn from_real(t: &RealTensor2) -> Self {
        Self {
            shape: vec![1, t.rows(), t.cols()],
            data: t.data().to_vec(),
        }
    }

    /// Planar `[2, h, w]` view of a complex tensor.
    pub fn from_complex(t: &ComplexTensor2) -> Self {
        let mut data = Vec::with_capacity(2 * t.len());
        data.extend(t.data().iter().map(|v| v.re));
        data.extend(t.data().iter().map(|v| v.im));
        Self {
            shape: vec![2, t.rows(), t.cols()],
            data,
        }
    }

    pub fn to_real(&self) -> Result<RealTensor2, AutodiffError> {
        match self.shape[..] {
            [1, h, w] => Ok(RealTensor2::from_vec(h, w, self.data.clone())?),
            _ => Err(AutodiffError::Shape {
                op: "to_real",
                left: self.shape.clone(),
                right: vec![1, 0, 0],
            }),
        }
    }

    pub fn to_complex(&self) -> Result<ComplexTensor2, AutodiffError> {
        match self.shape[..] {
            [2, h, w] => {
                let hw = h * w;
                let data = (0..hw)
                    .map(|i| num_complex::Complex64::new(self.data[i], self.data[hw + i]))
                    .collect();
                Ok(ComplexTensor2::from_vec(h, w, data)?)
            }
            _ => Err(AutodiffError::Shape {
                op: "to_complex",
                left: self.shape.clone(),
                right: vec![2, 0, 0],
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        shape: ConvShape,
    },
    LeakyRelu(Var, f64),
    Fft2(Var),
    Ifft2(Var),
    MaskMul(Var, Arc<[f64]>),
    L2Squared(Var),
    Mse(Var, Var),
    Sum(Var),
    Complexify(Var),
    RealPart(Var),
    Concat(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::Mul(..) => "mul",
            Op::Conv2d { .. } => "conv2d",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Fft2(_) => "fft2",
            Op::Ifft2(_) => "ifft2",
            Op::MaskMul(..) => "mask_mul",
            Op::L2Squared(_) => "l2_squared",
            Op::Mse(..) => "mse",
            Op::Sum(_) => "sum",
            Op::Complexify(_) => "complexify",
            Op::RealPart(_) => "real_part",
            Op::Concat(..) => "concat",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in creation order and backpropagates through them.
///
/// Gradient policy: `backward` may run once per tape. A second call
/// returns [`AutodiffError::AlreadyBackpropagated`] until
/// [`Tape::reset_grads`] clears the stored gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backpropagated: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` for nodes that were not
    /// marked as requiring gradients.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backpropagated = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(AutodiffError::Shape {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn shape_err(&self, op: &'static str, v: Var, expected: Vec<usize>) -> AutodiffError {
        AutodiffError::Shape {
            op,
            left: self.value(v).shape().to_vec(),
            right: expected,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Stride-1 "same" convolution: `[cin, h, w] * [cout, cin, k, k] + [cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (cin, h, w) = match self.value(input).shape()[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(self.shape_err("conv2d", input, vec![0, 0, 0])),
        };
        let (cout, k) = match self.value(weight).shape()[..] {
            [co, ci, k1, k2] if ci == cin && k1 == k2 && k1 % 2 == 1 => (co, k1),
            _ => return Err(self.shape_err("conv2d", weight, vec![0, cin, 3, 3])),
        };
        if self.value(bias).shape() != [cout] {
            return Err(self.shape_err("conv2d", bias, vec![cout]));
        }
        let shape = ConvShape { cin, cout, h, w, k };
        let data = kernels::conv2d_forward(
            shape,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            Tensor {
                shape: vec![cout, h, w],
                data,
            },
            Op::Conv2d {
                input,
                weight,
                bias,
                shape,
            },
            rg,
        ))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = Tensor {
            shape: self.value(a).shape.clone(),
            data: kernels::leaky_relu(self.value(a).data(), slope),
        };
        let rg = self.rg(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), rg)
    }

    fn planar_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize), AutodiffError> {
        match self.value(a).shape()[..] {
            [2, h, w] => Ok((h, w)),
            _ => Err(self.shape_err(op, a, vec![2, 0, 0])),
        }
    }

    /// Unitary 2-D FFT of a planar complex tensor.
    pub fn fft2(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (h, w) = self.planar_dims("fft2", a)?;
        let data = kernels::planar_fft2(self.value(a).data(), h, w, false)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![2, h, w],
                data,
            },
            Op::Fft2(a),
            rg,
        ))
    }

    pub fn ifft2(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (h, w) = self.planar_dims("ifft2", a)?;
        let data = kernels::planar_fft2(self.value(a).data(), h, w, true)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![2, h, w],
                data,
            },
            Op::Ifft2(a),
            rg,
        ))
    }

    /// Multiplies every channel of `[c, h, w]` by a constant `h * w` map.
    pub fn mask_mul(&mut self, a: Var, mask: Arc<[f64]>) -> Result<Var, AutodiffError> {
        let v = self.value(a);
        let plane = match v.shape()[..] {
            [_, h, w] if h * w == mask.len() => h * w,
            _ => return Err(self.shape_err("mask_mul", a, vec![0, mask.len()])),
        };
        let mut data = v.data.clone();
        for chunk in data.chunks_exact_mut(plane) {
            for (d, m) in chunk.iter_mut().zip(mask.iter()) {
                *d *= m;
            }
        }
        let value = Tensor {
            shape: v.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MaskMul(a, mask), rg))
    }

    /// `sum(a^2)` as a scalar.
    pub fn l2_squared(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().map(|v| v * v).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::L2Squared(a), rg)
    }

    /// `mean((a - b)^2)` as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mse", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let s: f64 = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(s / va.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mse(a, b), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// `[1, h, w]` real image to planar complex with zero imaginary part.
    pub fn complexify(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (h, w) = match self.value(a).shape()[..] {
            [1, h, w] => (h, w),
            _ => return Err(self.shape_err("complexify", a, vec![1, 0, 0])),
        };
        let mut data = self.value(a).data.clone();
        data.resize(2 * h * w, 0.0);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![2, h, w],
                data,
            },
            Op::Complexify(a),
            rg,
        ))
    }

    pub fn real_part(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (h, w) = self.planar_dims("real_part", a)?;
        let data = self.value(a).data[..h * w].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![1, h, w],
                data,
            },
            Op::RealPart(a),
            rg,
        ))
    }

    /// Channel concatenation of `[c1, h, w]` and `[c2, h, w]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let shape = match (sa, sb) {
            ([c1, h1, w1], [c2, h2, w2]) if h1 == h2 && w1 == w2 => vec![c1 + c2, *h1, *w1],
            _ => {
                return Err(AutodiffError::Shape {
                    op: "concat",
                    left: sa.to_vec(),
                    right: sb.to_vec(),
                })
            }
        };
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::Concat(a, b), rg))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every leaf marked
    /// `requires_grad` that influences the loss holds its gradient; leaves
    /// with no path to the loss get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.backpropagated {
            return Err(AutodiffError::AlreadyBackpropagated);
        }
        let shape = self.value(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NotScalar(shape));
        }
        self.grads = vec![None; self.nodes.len()];
        self.backpropagated = true;
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(Tensor {
                shape,
                data: vec![1.0],
            });
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g)?;
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grad.is_none() {
                *grad = Some(Tensor::zeros(node.value.shape.clone()));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor) -> Result<(), AutodiffError> {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|v| -v));
            }
            Op::Scale(a, s) => self.accumulate(a, g.map(|v| v * s)),
            Op::Mul(a, b) => {
                let ga = g.zip(self.value(b), |x, y| x * y);
                let gb = g.zip(self.value(a), |x, y| x * y);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                shape,
            } => {
                let need_input = self.requires_grad(input);
                let need_params = self.requires_grad(weight) || self.requires_grad(bias);
                let (gi, gw, gb) = kernels::conv2d_backward(
                    shape,
                    self.value(input).data(),
                    self.value(weight).data(),
                    g.data(),
                    need_input,
                    need_params,
                );
                if let Some(d) = gi {
                    let shape = self.value(input).shape.clone();
                    self.accumulate(input, Tensor { shape, data: d });
                }
                if let Some(d) = gw {
                    let shape = self.value(weight).shape.clone();
                    self.accumulate(weight, Tensor { shape, data: d });
                }
                if let Some(d) = gb {
                    self.accumulate(
                        bias,
                        Tensor {
                            shape: vec![shape.cout],
                            data: d,
                        },
                    );
                }
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g.zip(self.value(a), |gv, x| if x > 0.0 { gv } else { slope * gv });
                self.accumulate(a, ga);
            }
            // unitary: the adjoint of the forward transform is the inverse
            Op::Fft2(a) | Op::Ifft2(a) => {
                let inverse = matches!(self.nodes[i].op, Op::Fft2(_));
                let (h, w) = (g.shape[1], g.shape[2]);
                let data = kernels::planar_fft2(g.data(), h, w, inverse)?;
                self.accumulate(
                    a,
                    Tensor {
                        shape: g.shape.clone(),
                        data,
                    },
                );
            }
            Op::MaskMul(a, mask) => {
                let plane = mask.len();
                let mut data = g.data.clone();
                for chunk in data.chunks_exact_mut(plane) {
                    for (d, m) in chunk.iter_mut().zip(mask.iter()) {
                        *d *= m;
                    }
                }
                self.accumulate(
                    a,
                    Tensor {
                        shape: g.shape.clone(),
                        data,
                    },
                );
            }
            Op::L2Squared(a) => {
                let s = g.item();
                let ga = self.value(a).map(|x| 2.0 * s * x);
                self.accumulate(a, ga);
            }
            Op::Mse(a, b) => {
                let n = self.value(a).len() as f64;
                let s = 2.0 * g.item() / n;
                let ga = self.value(a).zip(self.value(b), |x, y| s * (x - y));
                let gb = ga.map(|v| -v);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Sum(a) => {
                let s = g.item();
                let ga = self.value(a).map(|_| s);
                self.accumulate(a, ga);
            }
            Op::Complexify(a) => {
                let hw = g.len() / 2;
                let shape = self.value(a).shape.clone();
                self.accumulate(
                    a,
                    Tensor {
                        shape,
                        data: g.data[..hw].to_vec(),
                    },
                );
            }
            Op::RealPart(a) => {
                let mut data = g.data.clone();
                data.resize(2 * g.len(), 0.0);
                let shape = self.value(a).shape.clone();
                self.accumulate(a, Tensor { shape, data });
            }
            Op::Concat(a, b) => {
                let split = self.value(a).len();
                let sa = self.value(a).shape.clone();
                let sb = self.value(b).shape.clone();
                self.accumulate(
                    a,
                    Tensor {
                        shape: sa,
                        data: g.data[..split].to_vec(),
                    },
                );
                self.accumulate(
                    b,
                    Tensor {
                        shape: sb,
                        data: g.data[split..].to_vec(),
                    },
                );
            }
        }
        Ok(())
    }
}
