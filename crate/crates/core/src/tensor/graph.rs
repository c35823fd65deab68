use rand::Rng;

use super::kernels::{self, ConvDims, MatmulDims};
use super::{Real, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero padding per side, applied before a stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn new(top: usize, bottom: usize, left: usize, right: usize) -> Self {
        Padding {
            top,
            bottom,
            left,
            right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryFn {
    Sigmoid,
    Tanh,
    Elu,
    Exp,
    Log,
    Negate,
}

impl UnaryFn {
    fn name(self) -> &'static str {
        match self {
            UnaryFn::Sigmoid => "sigmoid",
            UnaryFn::Tanh => "tanh",
            UnaryFn::Elu => "elu",
            UnaryFn::Exp => "exp",
            UnaryFn::Log => "log",
            UnaryFn::Negate => "negate",
        }
    }

    pub fn eval<T: Real>(self, x: T) -> T {
        match self {
            UnaryFn::Sigmoid => sigmoid(x),
            UnaryFn::Tanh => x.tanh(),
            UnaryFn::Elu => {
                if x >= T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            UnaryFn::Exp => x.exp(),
            UnaryFn::Log => x.ln(),
            UnaryFn::Negate => -x,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            UnaryFn::Sigmoid => y * (T::one() - y),
            UnaryFn::Tanh => T::one() - y * y,
            UnaryFn::Elu => {
                if x >= T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
            UnaryFn::Exp => y,
            UnaryFn::Log => T::one() / x,
            UnaryFn::Negate => -T::one(),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// A differentiable operation implemented outside the built-in op set.
///
/// `backward` receives the input tensors, the forward output and the upstream
/// gradient, and returns one optional gradient per input (same order).
pub trait Function<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        dims: ConvDims,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Unary {
        input: Var,
        func: UnaryFn,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Shift2d {
        input: Var,
        down: usize,
        right: usize,
    },
    RasterShift {
        input: Var,
        offset: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Slice {
        input: Var,
        start: usize,
    },
    Reshape {
        input: Var,
    },
    Matmul {
        a: Var,
        b: Var,
        dims: MatmulDims,
    },
    MaskedSoftmax {
        input: Var,
    },
    Dropout {
        input: Var,
        keep: Vec<T>,
    },
    Sum {
        input: Var,
    },
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn Function<T>>,
    },
}

struct Node<T: Real> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Records executed operations in order; the tape for reverse-mode AD.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_check(
    op: &'static str,
    axis: usize,
    expected: usize,
    got: usize,
) -> Result<(), TensorError> {
    if expected == got {
        Ok(())
    } else {
        Err(TensorError::Dimension {
            op,
            axis,
            expected,
            got,
        })
    }
}

fn rank_check(op: &'static str, shape: &[usize], expected: usize) -> Result<(), TensorError> {
    if shape.len() == expected {
        Ok(())
    } else {
        Err(TensorError::Rank {
            op,
            expected,
            got: shape.len(),
        })
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn values(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.values()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    /// Clears every accumulated gradient on the tape.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.zero_grad();
        }
    }

    /// Adds an input tensor; its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Adds a trainable input.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Adds a non-trainable input.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn any_requires_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tensor.requires_grad)
    }

    fn emit(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        values: Vec<T>,
        inputs: &[Var],
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = self.any_requires_grad(inputs);
        let tensor = Tensor {
            shape,
            values,
            grad: None,
            requires_grad,
        };
        Ok(self.push(tensor, op))
    }

    /// Stride-1 cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,kH,kW]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        pad: Padding,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernel).to_vec();
        let bs = self.shape(bias).to_vec();
        rank_check(OP, &xs, 4)?;
        rank_check(OP, &ks, 4)?;
        rank_check(OP, &bs, 1)?;
        dim_check(OP, 1, ks[1], xs[1])?;
        dim_check(OP, 0, ks[0], bs[0])?;
        let (hp, wp) = (xs[2] + pad.top + pad.bottom, xs[3] + pad.left + pad.right);
        if hp < ks[2] {
            return Err(TensorError::Dimension {
                op: OP,
                axis: 2,
                expected: ks[2],
                got: hp,
            });
        }
        if wp < ks[3] {
            return Err(TensorError::Dimension {
                op: OP,
                axis: 3,
                expected: ks[3],
                got: wp,
            });
        }
        let dims = ConvDims {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            top: pad.top,
            left: pad.left,
            h_out: hp - ks[2] + 1,
            w_out: wp - ks[3] + 1,
        };
        let mut out = vec![T::zero(); dims.n * dims.c_out * dims.h_out * dims.w_out];
        kernels::conv2d_forward(
            &dims,
            self.values(input),
            self.values(kernel),
            self.values(bias),
            &mut out,
        );
        let shape = vec![dims.n, dims.c_out, dims.h_out, dims.w_out];
        self.emit(
            OP,
            shape,
            out,
            &[input, kernel, bias],
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            },
        )
    }

    /// Per-location affine map over channels: `[N,Cin,H,W] -> [N,Cout,H,W]`.
    pub fn pointwise_linear(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
    ) -> Result<Var, TensorError> {
        const OP: &str = "pointwise_linear";
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let bs = self.shape(bias).to_vec();
        rank_check(OP, &xs, 4)?;
        rank_check(OP, &ws, 2)?;
        rank_check(OP, &bs, 1)?;
        dim_check(OP, 1, ws[1], xs[1])?;
        dim_check(OP, 0, ws[0], bs[0])?;
        let plane = xs[2] * xs[3];
        let mut out = vec![T::zero(); xs[0] * ws[0] * plane];
        kernels::linear_forward(
            xs[0],
            ws[1],
            ws[0],
            plane,
            self.values(input),
            self.values(weight),
            self.values(bias),
            &mut out,
        );
        self.emit(
            OP,
            vec![xs[0], ws[0], xs[2], xs[3]],
            out,
            &[input, weight, bias],
            Op::Linear {
                input,
                weight,
                bias,
            },
        )
    }

    pub fn unary(&mut self, input: Var, func: UnaryFn) -> Result<Var, TensorError> {
        let x = self.values(input);
        if func == UnaryFn::Log {
            if let Some(bad) = x.iter().find(|&&v| v <= T::zero()) {
                return Err(TensorError::Domain {
                    op: "log",
                    msg: format!("log of non-positive value {bad}"),
                });
            }
        }
        let out = x.iter().map(|&v| func.eval(v)).collect();
        let shape = self.shape(input).to_vec();
        self.emit(func.name(), shape, out, &[input], Op::Unary { input, func })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, UnaryFn::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, UnaryFn::Tanh)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, UnaryFn::Elu)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        rank_check(op, sb, sa.len())?;
        for (axis, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            dim_check(op, axis, x, y)?;
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.emit("add", shape, out, &[a, b], Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.emit("mul", shape, out, &[a, b], Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var, TensorError> {
        let out = self.values(input).iter().map(|&x| x * factor).collect();
        let shape = self.shape(input).to_vec();
        self.emit("scale", shape, out, &[input], Op::Scale { input, factor })
    }

    /// Moves content of `[N,C,H,W]` down and right, zero-filling vacated cells.
    pub fn shift2d(&mut self, input: Var, down: usize, right: usize) -> Result<Var, TensorError> {
        const OP: &str = "shift2d";
        let s = self.shape(input).to_vec();
        rank_check(OP, &s, 4)?;
        if down >= s[2] || right >= s[3] {
            return Err(TensorError::Argument {
                op: OP,
                msg: format!(
                    "shift ({down},{right}) must be smaller than spatial extent ({},{})",
                    s[2], s[3]
                ),
            });
        }
        let out = shift_plane(self.values(input), &s, down, right, false);
        self.emit(OP, s, out, &[input], Op::Shift2d { input, down, right })
    }

    /// Delays `[N,C,H,W]` by `offset` positions along the flattened raster
    /// order of each plane; the first `offset` positions become zero.
    pub fn raster_shift(&mut self, input: Var, offset: usize) -> Result<Var, TensorError> {
        const OP: &str = "raster_shift";
        let s = self.shape(input).to_vec();
        rank_check(OP, &s, 4)?;
        let plane = s[2] * s[3];
        if offset >= plane {
            return Err(TensorError::Argument {
                op: OP,
                msg: format!("offset {offset} must be smaller than plane size {plane}"),
            });
        }
        let x = self.values(input);
        let mut out = vec![T::zero(); x.len()];
        for (o, xin) in out.chunks_mut(plane).zip(x.chunks(plane)) {
            o[offset..].copy_from_slice(&xin[..plane - offset]);
        }
        self.emit(OP, s, out, &[input], Op::RasterShift { input, offset })
    }

    /// Concatenates `[N,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var, TensorError> {
        const OP: &str = "concat_channels";
        let first = inputs.first().ok_or_else(|| TensorError::Argument {
            op: OP,
            msg: "no inputs".into(),
        })?;
        let s0 = self.shape(*first).to_vec();
        rank_check(OP, &s0, 4)?;
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            rank_check(OP, s, 4)?;
            for axis in [0, 2, 3] {
                dim_check(OP, axis, s0[axis], s[axis])?;
            }
            channels += s[1];
        }
        let plane = s0[2] * s0[3];
        let mut out = Vec::with_capacity(s0[0] * channels * plane);
        for n in 0..s0[0] {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.values(v)[n * c * plane..(n + 1) * c * plane]);
            }
        }
        self.emit(
            OP,
            vec![s0[0], channels, s0[2], s0[3]],
            out,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    /// Channels `start..start+len` of a `[N,C,H,W]` tensor.
    pub fn slice_channels(
        &mut self,
        input: Var,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "slice_channels";
        let s = self.shape(input).to_vec();
        rank_check(OP, &s, 4)?;
        if len == 0 || start + len > s[1] {
            return Err(TensorError::Argument {
                op: OP,
                msg: format!(
                    "channels {start}..{} out of range for {}",
                    start + len,
                    s[1]
                ),
            });
        }
        let plane = s[2] * s[3];
        let x = self.values(input);
        let mut out = Vec::with_capacity(s[0] * len * plane);
        for n in 0..s[0] {
            let base = (n * s[1] + start) * plane;
            out.extend_from_slice(&x[base..base + len * plane]);
        }
        self.emit(
            OP,
            vec![s[0], len, s[2], s[3]],
            out,
            &[input],
            Op::Slice { input, start },
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.tensor(input).len() || shape.contains(&0) {
            return Err(TensorError::Argument {
                op: "reshape",
                msg: format!("cannot view {:?} as {shape:?}", self.shape(input)),
            });
        }
        let out = self.values(input).to_vec();
        self.emit(
            "reshape",
            shape.to_vec(),
            out,
            &[input],
            Op::Reshape { input },
        )
    }

    /// Batched matrix product `op(a) @ op(b)` where `op` optionally transposes
    /// the trailing two axes. `a` is `[N,M,K]` (or `[N,K,M]` when transposed).
    pub fn batch_matmul(
        &mut self,
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    ) -> Result<Var, TensorError> {
        const OP: &str = "batch_matmul";
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        rank_check(OP, &sa, 3)?;
        rank_check(OP, &sb, 3)?;
        dim_check(OP, 0, sa[0], sb[0])?;
        let (m, k) = if trans_a {
            (sa[2], sa[1])
        } else {
            (sa[1], sa[2])
        };
        let (k2, p) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        dim_check(OP, if trans_b { 2 } else { 1 }, k, k2)?;
        let dims = MatmulDims {
            batch: sa[0],
            m,
            k,
            p,
            trans_a,
            trans_b,
        };
        let mut out = vec![T::zero(); sa[0] * m * p];
        kernels::matmul_forward(&dims, self.values(a), self.values(b), &mut out);
        self.emit(
            OP,
            vec![sa[0], m, p],
            out,
            &[a, b],
            Op::Matmul { a, b, dims },
        )
    }

    /// Softmax over the last axis restricted to positions where `mask` is
    /// `true`. The mask covers a whole number of rows and repeats across the
    /// remaining leading extent. Rows with no permitted position are zero.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var, TensorError> {
        const OP: &str = "masked_softmax";
        let s = self.shape(logits).to_vec();
        let l = *s.last().unwrap_or(&0);
        let total = self.tensor(logits).len();
        if mask.is_empty() || !mask.len().is_multiple_of(l) || !total.is_multiple_of(mask.len()) {
            return Err(TensorError::Dimension {
                op: OP,
                axis: s.len().saturating_sub(1),
                expected: total,
                got: mask.len(),
            });
        }
        let x = self.values(logits);
        let mut out = vec![T::zero(); total];
        for (r, (orow, xrow)) in out.chunks_mut(l).zip(x.chunks(l)).enumerate() {
            let mrow = &mask[(r * l) % mask.len()..][..l];
            let mut max = T::neg_infinity();
            for (&v, &keep) in xrow.iter().zip(mrow) {
                if keep && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for ((o, &v), &keep) in orow.iter_mut().zip(xrow).zip(mrow) {
                if keep {
                    *o = (v - max).exp();
                    total = total + *o;
                }
            }
            orow.iter_mut().for_each(|o| *o = *o / total);
        }
        self.emit(OP, s, out, &[logits], Op::MaskedSoftmax { input: logits })
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        const OP: &str = "dropout";
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Argument {
                op: OP,
                msg: format!("rate {rate} outside [0, 1)"),
            });
        }
        let n = self.tensor(input).len();
        let keep: Vec<T> = if training && rate > 0.0 {
            let scale = T::lit(1.0 / (1.0 - rate));
            (0..n)
                .map(|_| {
                    if rng.gen::<f64>() < rate {
                        T::zero()
                    } else {
                        scale
                    }
                })
                .collect()
        } else {
            vec![T::one(); n]
        };
        let out = self
            .values(input)
            .iter()
            .zip(&keep)
            .map(|(&x, &k)| x * k)
            .collect();
        let shape = self.shape(input).to_vec();
        self.emit(OP, shape, out, &[input], Op::Dropout { input, keep })
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        let total: T = self.values(input).iter().copied().sum();
        self.emit("sum", vec![1], vec![total], &[input], Op::Sum { input })
    }

    /// Records a node computed outside the graph, with its own backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        func: Box<dyn Function<T>>,
    ) -> Result<Var, TensorError> {
        let name = func.name();
        let shape = output.shape;
        self.emit(
            name,
            shape,
            output.values,
            inputs,
            Op::Custom {
                inputs: inputs.to_vec(),
                func,
            },
        )
    }

    /// Reverse pass from a scalar `loss`; gradients accumulate into every
    /// node that requires them, so repeated calls add up until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let n = self.tensor(loss).len();
        if n != 1 {
            return Err(TensorError::Argument {
                op: "backward",
                msg: format!("loss must be scalar, got {} elements", n),
            });
        }
        self.backward_from(loss, &[T::one()])
    }

    /// Vector-Jacobian product: propagates `seed` from `output` to all inputs.
    pub fn backward_from(&mut self, output: Var, seed: &[T]) -> Result<(), TensorError> {
        if seed.len() != self.tensor(output).len() {
            return Err(TensorError::Dimension {
                op: "backward",
                axis: 0,
                expected: self.tensor(output).len(),
                got: seed.len(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed.to_vec());
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].tensor.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].tensor.accumulate_grad(&g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let wants = |v: Var| self.nodes[v.0].tensor.requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            } => {
                let mut gi = wants(*input).then(|| vec![T::zero(); self.tensor(*input).len()]);
                let mut gk = wants(*kernel).then(|| vec![T::zero(); self.tensor(*kernel).len()]);
                let mut gb = wants(*bias).then(|| vec![T::zero(); self.tensor(*bias).len()]);
                kernels::conv2d_backward(
                    dims,
                    self.values(*input),
                    self.values(*kernel),
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                add_into(grads, *input, gi);
                add_into(grads, *kernel, gk);
                add_into(grads, *bias, gb);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let ws = self.shape(*weight);
                let plane = xs[2] * xs[3];
                let mut gi = wants(*input).then(|| vec![T::zero(); self.tensor(*input).len()]);
                let mut gw = wants(*weight).then(|| vec![T::zero(); self.tensor(*weight).len()]);
                let mut gb = wants(*bias).then(|| vec![T::zero(); self.tensor(*bias).len()]);
                kernels::linear_backward(
                    xs[0],
                    ws[1],
                    ws[0],
                    plane,
                    self.values(*input),
                    self.values(*weight),
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                add_into(grads, *input, gi);
                add_into(grads, *weight, gw);
                add_into(grads, *bias, gb);
            }
            Op::Unary { input, func } => {
                let x = self.values(*input);
                let y = node.tensor.values();
                let gi = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(&gv, (&xv, &yv))| gv * func.derivative(xv, yv))
                    .collect();
                add_into(grads, *input, Some(gi));
            }
            Op::Add { a, b } => {
                add_into(grads, *a, wants(*a).then(|| g.to_vec()));
                add_into(grads, *b, wants(*b).then(|| g.to_vec()));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.values(*a), self.values(*b));
                let ga = wants(*a).then(|| g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                let gb = wants(*b).then(|| g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                add_into(grads, *a, ga);
                add_into(grads, *b, gb);
            }
            Op::Scale { input, factor } => {
                add_into(
                    grads,
                    *input,
                    Some(g.iter().map(|&x| x * *factor).collect()),
                );
            }
            Op::Shift2d { input, down, right } => {
                let gi = shift_plane(g, node.tensor.shape(), *down, *right, true);
                add_into(grads, *input, Some(gi));
            }
            Op::RasterShift { input, offset } => {
                let s = node.tensor.shape();
                let plane = s[2] * s[3];
                let mut gi = vec![T::zero(); g.len()];
                for (o, gin) in gi.chunks_mut(plane).zip(g.chunks(plane)) {
                    o[..plane - offset].copy_from_slice(&gin[*offset..]);
                }
                add_into(grads, *input, Some(gi));
            }
            Op::Concat { inputs } => {
                let s = node.tensor.shape();
                let (total_c, plane) = (s[1], s[2] * s[3]);
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if wants(v) {
                        let mut gi = Vec::with_capacity(s[0] * c * plane);
                        for n in 0..s[0] {
                            let base = (n * total_c + offset) * plane;
                            gi.extend_from_slice(&g[base..base + c * plane]);
                        }
                        add_into(grads, v, Some(gi));
                    }
                    offset += c;
                }
            }
            Op::Slice { input, start } => {
                let s = self.shape(*input);
                let (c, plane) = (s[1], s[2] * s[3]);
                let len = node.tensor.shape()[1];
                let mut gi = vec![T::zero(); self.tensor(*input).len()];
                for n in 0..s[0] {
                    let base = (n * c + start) * plane;
                    gi[base..base + len * plane]
                        .copy_from_slice(&g[n * len * plane..(n + 1) * len * plane]);
                }
                add_into(grads, *input, Some(gi));
            }
            Op::Reshape { input } => add_into(grads, *input, Some(g.to_vec())),
            Op::Matmul { a, b, dims } => {
                let mut ga = wants(*a).then(|| vec![T::zero(); self.tensor(*a).len()]);
                let mut gb = wants(*b).then(|| vec![T::zero(); self.tensor(*b).len()]);
                kernels::matmul_backward(
                    dims,
                    self.values(*a),
                    self.values(*b),
                    g,
                    ga.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                add_into(grads, *a, ga);
                add_into(grads, *b, gb);
            }
            Op::MaskedSoftmax { input } => {
                let l = *node.tensor.shape().last().unwrap();
                let p = node.tensor.values();
                let mut gi = vec![T::zero(); g.len()];
                for ((o, prow), grow) in gi.chunks_mut(l).zip(p.chunks(l)).zip(g.chunks(l)) {
                    let dot: T = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for ((ov, &pv), &gv) in o.iter_mut().zip(prow).zip(grow) {
                        *ov = pv * (gv - dot);
                    }
                }
                add_into(grads, *input, Some(gi));
            }
            Op::Dropout { input, keep } => {
                add_into(
                    grads,
                    *input,
                    Some(g.iter().zip(keep).map(|(&a, &b)| a * b).collect()),
                );
            }
            Op::Sum { input } => {
                let n = self.tensor(*input).len();
                add_into(grads, *input, Some(vec![g[0]; n]));
            }
            Op::Custom { inputs, func } => {
                let tensors: Vec<&Tensor<T>> = inputs.iter().map(|v| self.tensor(*v)).collect();
                let gs = func.backward(&tensors, &node.tensor, g);
                for (&v, gi) in inputs.iter().zip(gs) {
                    if wants(v) {
                        add_into(grads, v, gi);
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

/// Shifts each `[H,W]` plane by (`down`, `right`); `reverse` applies the
/// opposite displacement, which is the adjoint used in backward.
fn shift_plane<T: Real>(
    x: &[T],
    shape: &[usize],
    down: usize,
    right: usize,
    reverse: bool,
) -> Vec<T> {
    let (h, w) = (shape[2], shape[3]);
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for (o, xin) in out.chunks_mut(plane).zip(x.chunks(plane)) {
        for i in 0..h - down {
            let len = w - right;
            if reverse {
                o[i * w..i * w + len]
                    .copy_from_slice(&xin[(i + down) * w + right..(i + down) * w + right + len]);
            } else {
                o[(i + down) * w + right..(i + down) * w + right + len]
                    .copy_from_slice(&xin[i * w..i * w + len]);
            }
        }
    }
    out
}
