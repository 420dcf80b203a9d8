//! Recording tape: forward operations and reverse-mode backward.
//!
//! A [`Tape`] is built per forward pass. Every operation appends a node
//! holding its output value; [`Tape::backward`] then walks the nodes in
//! reverse, accumulating gradients for every node that (transitively)
//! depends on a leaf with `requires_grad`. Subgraphs that do not require
//! gradients are skipped entirely, so freezing a subnetwork also skips its
//! backward cost.
//!
//! All reductions accumulate in `f64`; forward results are deterministic
//! functions of their inputs (no threading inside an op).

use super::{Activation, Tensor};
use crate::error::{Error, Result};

/// Clamp bound for predicted probabilities inside the cross-entropy losses.
pub const BCE_EPSILON: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Activate(usize, Activation),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        stride: usize,
        padding: usize,
    },
    Conv2dTranspose {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Conv3dTranspose {
        input: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    AddChannelBias {
        input: usize,
        bias: usize,
    },
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        epsilon: f64,
    },
    Dense {
        input: usize,
        weight: usize,
        bias: usize,
    },
    Reshape(usize),
    Concat(usize, usize),
    ZeroPad2d {
        input: usize,
        off_h: usize,
        off_w: usize,
    },
    SumPool1d {
        input: usize,
        window: usize,
    },
    SignedSqrt(usize),
    L2Normalize(usize),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Mse {
        pred: usize,
        target: usize,
    },
    Bce {
        pred: usize,
        target: usize,
    },
    CrossEntropyLogits {
        logits: usize,
        class: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gate weights for one convolutional LSTM layer.
///
/// Gate order is input, forget, candidate, output. `wx` kernels map the
/// step input, `wh` kernels map the previous hidden state; biases apply
/// once per gate.
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmWeightVars {
    pub wx: [Var; 4],
    pub wh: [Var; 4],
    pub bias: [Var; 4],
}

/// Hidden/cell pair as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmVars {
    pub hidden: Var,
    pub cell: Var,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Copies a tensor onto the tape as a leaf node.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(
            Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()),
            Op::Leaf,
            needs,
        )
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to node `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::dimension(format!(
                "elementwise op on shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::from_parts(shape, data), op, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| c * x).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a.0);
        self.push(Tensor::from_parts(shape, data), Op::Scale(a.0, c), needs)
    }

    pub fn activate(&mut self, a: Var, kind: Activation) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|&x| kind.apply(x)).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a.0);
        self.push(Tensor::from_parts(shape, data), Op::Activate(a.0, kind), needs)
    }

    // ---- convolutions ----

    /// 2-D cross-correlation. `input` is `[Cin, H, W]`, `kernel` is
    /// `[Cout, Cin, kh, kw]`, optional `bias` is `[Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        let g = Conv2dGeom::validate(x.shape(), k.shape(), stride, padding)?;
        if let Some(b) = bias {
            let tb = &self.nodes[b.0].value;
            if tb.numel() != g.cout {
                return Err(Error::dimension(format!(
                    "conv2d bias has {} elements, expected {}",
                    tb.numel(),
                    g.cout
                )));
            }
        }
        let mut out = vec![0.0; g.cout * g.oh * g.ow];
        conv2d_forward(
            x.data(),
            k.data(),
            bias.map(|b| self.nodes[b.0].value.data().to_vec()).as_deref(),
            &g,
            &mut out,
        );
        let needs = self.needs(input.0)
            || self.needs(kernel.0)
            || bias.map(|b| self.needs(b.0)).unwrap_or(false);
        Ok(self.push(
            Tensor::from_parts(vec![g.cout, g.oh, g.ow], out),
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                stride,
                padding,
            },
            needs,
        ))
    }

    /// 2-D transposed convolution (scatter). `input` is `[Cin, H, W]`,
    /// `kernel` is `[Cin, Cout, kh, kw]`; output extent is
    /// `(n-1)*stride + k - 2*padding` per axis.
    pub fn conv2d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        let g = TconvGeom::validate_2d(x.shape(), k.shape(), stride, padding)?;
        let out = tconv2d_forward(x.data(), k.data(), &g);
        let needs = self.needs(input.0) || self.needs(kernel.0);
        Ok(self.push(
            Tensor::from_parts(vec![g.cout, g.out[0], g.out[1]], out),
            Op::Conv2dTranspose {
                input: input.0,
                kernel: kernel.0,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// 3-D transposed convolution. `input` is `[Cin, D, H, W]`, `kernel`
    /// is `[Cin, Cout, kd, kh, kw]`; every input scalar scatters a
    /// kernel-weighted copy into the output, overlaps accumulate, and the
    /// result is cropped by `padding` on each face.
    pub fn conv3d_transpose(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[kernel.0].value;
        let g = TconvGeom::validate_3d(x.shape(), k.shape(), stride, padding)?;
        let out = tconv3d_forward(x.data(), k.data(), &g);
        let needs = self.needs(input.0) || self.needs(kernel.0);
        Ok(self.push(
            Tensor::from_parts(vec![g.cout, g.out[0], g.out[1], g.out[2]], out),
            Op::Conv3dTranspose {
                input: input.0,
                kernel: kernel.0,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// Adds a per-channel bias over axis 0 of a feature map.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let b = &self.nodes[bias.0].value;
        let channels = x.shape()[0];
        if b.numel() != channels {
            return Err(Error::dimension(format!(
                "channel bias has {} elements for {} channels",
                b.numel(),
                channels
            )));
        }
        let per = x.numel() / channels;
        let mut data = x.data().to_vec();
        for (c, chunk) in data.chunks_mut(per).enumerate() {
            let bv = b.data()[c];
            for v in chunk {
                *v += bv;
            }
        }
        let shape = x.shape().to_vec();
        let needs = self.needs(input.0) || self.needs(bias.0);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::AddChannelBias {
                input: input.0,
                bias: bias.0,
            },
            needs,
        ))
    }

    // ---- normalization, dense, shape ----

    /// Normalizes over all elements of `input` (the feature axis of one
    /// sample), then applies `gain` and `bias`. Both may be per-element
    /// (same numel as the input) or scalar.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, epsilon: f64) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let m = x.numel();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let n = self.nodes[v.0].value.numel();
            if n != m && n != 1 {
                return Err(Error::dimension(format!(
                    "layer_norm {name} has {n} elements, expected {m} or 1"
                )));
            }
        }
        let (mean, inv_std) = moments(x.data(), epsilon);
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let data: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let xh = (v - mean) * inv_std;
                pick(g, i) * xh + pick(b, i)
            })
            .collect();
        let shape = x.shape().to_vec();
        let needs = self.needs(input.0) || self.needs(gain.0) || self.needs(bias.0);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::LayerNorm {
                input: input.0,
                gain: gain.0,
                bias: bias.0,
                epsilon,
            },
            needs,
        ))
    }

    /// `y = Wx + b` with `x: [n]`, `weight: [m, n]`, `bias: [m]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        if w.shape().len() != 2 {
            return Err(Error::dimension("dense weight must be rank 2"));
        }
        let (m, n) = (w.shape()[0], w.shape()[1]);
        if x.numel() != n || b.numel() != m {
            return Err(Error::dimension(format!(
                "dense shapes disagree: x {}, W {m}x{n}, b {}",
                x.numel(),
                b.numel()
            )));
        }
        let xd = x.data();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &w.data()[i * n..(i + 1) * n];
            let mut acc = b.data()[i];
            for (wv, xv) in row.iter().zip(xd) {
                acc += wv * xv;
            }
            out.push(acc);
        }
        let needs = self.needs(input.0) || self.needs(weight.0) || self.needs(bias.0);
        Ok(self.push(
            Tensor::from_parts(vec![m], out),
            Op::Dense {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let numel: usize = shape.iter().product();
        if numel != x.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::dimension(format!(
                "cannot reshape {:?} to {:?}",
                x.shape(),
                shape
            )));
        }
        let data = x.data().to_vec();
        let needs = self.needs(input.0);
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Reshape(input.0),
            needs,
        ))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 1 || tb.shape().len() != 1 {
            return Err(Error::dimension("concat expects rank-1 tensors"));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let n = data.len();
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::Concat(a.0, b.0), needs))
    }

    /// Embeds a `[C, h, w]` map centered in a zero `[C, out_h, out_w]` map.
    pub fn zero_pad2d(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        if x.shape().len() != 3 {
            return Err(Error::dimension("zero_pad2d expects [C, H, W]"));
        }
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if out_h < h || out_w < w {
            return Err(Error::dimension(format!(
                "zero_pad2d target {out_h}x{out_w} smaller than input {h}x{w}"
            )));
        }
        let (off_h, off_w) = ((out_h - h) / 2, (out_w - w) / 2);
        let mut data = vec![0.0; c * out_h * out_w];
        for ci in 0..c {
            for y in 0..h {
                let src = &x.data()[(ci * h + y) * w..(ci * h + y) * w + w];
                let dst_base = (ci * out_h + y + off_h) * out_w + off_w;
                data[dst_base..dst_base + w].copy_from_slice(src);
            }
        }
        let needs = self.needs(input.0);
        Ok(self.push(
            Tensor::from_parts(vec![c, out_h, out_w], data),
            Op::ZeroPad2d {
                input: input.0,
                off_h,
                off_w,
            },
            needs,
        ))
    }

    /// Non-overlapping sum pooling of a rank-1 tensor: `[k*n] -> [n]`.
    pub fn sum_pool1d(&mut self, input: Var, window: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        if window == 0 || x.numel() % window != 0 {
            return Err(Error::dimension(format!(
                "sum_pool1d window {window} does not divide length {}",
                x.numel()
            )));
        }
        let out: Vec<f64> = x.data().chunks(window).map(|c| c.iter().sum()).collect();
        let n = out.len();
        let needs = self.needs(input.0);
        Ok(self.push(
            Tensor::from_parts(vec![n], out),
            Op::SumPool1d {
                input: input.0,
                window,
            },
            needs,
        ))
    }

    pub fn signed_sqrt(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let data = x
            .data()
            .iter()
            .map(|&v| v.signum() * v.abs().sqrt())
            .collect();
        let shape = x.shape().to_vec();
        let needs = self.needs(input.0);
        self.push(Tensor::from_parts(shape, data), Op::SignedSqrt(input.0), needs)
    }

    pub fn l2_normalize(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let norm = l2_norm(x.data()).max(1e-12);
        let data = x.data().iter().map(|&v| v / norm).collect();
        let shape = x.shape().to_vec();
        let needs = self.needs(input.0);
        self.push(Tensor::from_parts(shape, data), Op::L2Normalize(input.0), needs)
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        if x.shape().len() != 1 {
            return Err(Error::dimension("softmax expects a rank-1 tensor"));
        }
        let data = softmax_vec(x.data());
        let n = data.len();
        let needs = self.needs(input.0);
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::Softmax(input.0), needs))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let s: f64 = x.data().iter().sum();
        let needs = self.needs(input.0);
        self.push(Tensor::scalar(s), Op::Sum(input.0), needs)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = &self.nodes[input.0].value;
        let s: f64 = x.data().iter().sum();
        let n = x.numel() as f64;
        let needs = self.needs(input.0);
        self.push(Tensor::scalar(s / n), Op::Mean(input.0), needs)
    }

    /// Mean squared error between same-shape tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        if p.shape() != t.shape() {
            return Err(Error::dimension(format!(
                "mse shapes disagree: {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        let n = p.numel() as f64;
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let needs = self.needs(pred.0) || self.needs(target.0);
        Ok(self.push(
            Tensor::scalar(s / n),
            Op::Mse {
                pred: pred.0,
                target: target.0,
            },
            needs,
        ))
    }

    /// Mean binary cross entropy. Predictions are clamped to
    /// `[BCE_EPSILON, 1 - BCE_EPSILON]`; targets must be exactly 0 or 1.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (&self.nodes[pred.0].value, &self.nodes[target.0].value);
        if p.shape() != t.shape() {
            return Err(Error::dimension(format!(
                "bce shapes disagree: {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        if t.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::validation(
                "bce target values must be exactly 0 or 1",
            ));
        }
        let n = p.numel() as f64;
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&pv, &y)| {
                let ph = pv.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
                -(y * ph.ln() + (1.0 - y) * (1.0 - ph).ln())
            })
            .sum();
        let needs = self.needs(pred.0) || self.needs(target.0);
        Ok(self.push(
            Tensor::scalar(s / n),
            Op::Bce {
                pred: pred.0,
                target: target.0,
            },
            needs,
        ))
    }

    /// `-log softmax(logits)[class]` for a rank-1 logits vector.
    pub fn cross_entropy_logits(&mut self, logits: Var, class: usize) -> Result<Var> {
        let z = &self.nodes[logits.0].value;
        if z.shape().len() != 1 {
            return Err(Error::dimension("cross entropy expects rank-1 logits"));
        }
        if class >= z.numel() {
            return Err(Error::validation(format!(
                "class index {class} out of range for {} logits",
                z.numel()
            )));
        }
        let zd = z.data();
        let max = zd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + zd.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - zd[class];
        let needs = self.needs(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyLogits {
                logits: logits.0,
                class,
            },
            needs,
        ))
    }

    // ---- gated recurrence ----

    /// One convolutional LSTM step built from the primitive ops, so the
    /// backward pass comes from the tape. Gate kernels must be odd-sized
    /// ("same" padding); the step input must share the state's spatial dims.
    pub fn conv_lstm_step(
        &mut self,
        x: Var,
        state: ConvLstmVars,
        w: &ConvLstmWeightVars,
    ) -> Result<ConvLstmVars> {
        let xs = self.nodes[x.0].value.shape().to_vec();
        let hs = self.nodes[state.hidden.0].value.shape().to_vec();
        if xs.len() != 3 || hs.len() != 3 || xs[1..] != hs[1..] {
            return Err(Error::dimension(format!(
                "conv_lstm_step input {xs:?} and state {hs:?} spatial dims disagree"
            )));
        }
        let pad_of = |tape: &Tape, kvar: Var| -> Result<usize> {
            let k = tape.nodes[kvar.0].value.shape();
            let ksz = k[2];
            if ksz % 2 == 0 || k[2] != k[3] {
                return Err(Error::config(format!(
                    "conv_lstm gate kernels must be odd and square, got {:?}",
                    &k[2..]
                )));
            }
            Ok((ksz - 1) / 2)
        };
        let mut pre = [Var(0); 4];
        for gate in 0..4 {
            let px = pad_of(self, w.wx[gate])?;
            let ph = pad_of(self, w.wh[gate])?;
            let from_x = self.conv2d(x, w.wx[gate], Some(w.bias[gate]), 1, px)?;
            let from_h = self.conv2d(state.hidden, w.wh[gate], None, 1, ph)?;
            pre[gate] = self.add(from_x, from_h)?;
        }
        let i = self.activate(pre[0], Activation::Sigmoid);
        let f = self.activate(pre[1], Activation::Sigmoid);
        let g = self.activate(pre[2], Activation::Tanh);
        let o = self.activate(pre[3], Activation::Sigmoid);
        let fc = self.mul(f, state.cell)?;
        let ig = self.mul(i, g)?;
        let cell = self.add(fc, ig)?;
        let ct = self.activate(cell, Activation::Tanh);
        let hidden = self.mul(o, ct)?;
        Ok(ConvLstmVars { hidden, cell })
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss node. Populates gradients for every
    /// node that requires them; repeat calls recompute from scratch and
    /// give identical results.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage(
                "backward called on a node that is not on this tape",
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::usage(
                "loss does not depend on any tensor with requires_grad",
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy);
            self.grads[idx] = Some(gy);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, gy: &[f64]) {
        macro_rules! val {
            ($i:expr) => {
                self.nodes[$i].value.data()
            };
        }
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_with(a, |ga| add_assign(ga, gy));
                self.acc_with(b, |gb| add_assign(gb, gy));
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_with(a, |ga| add_assign(ga, gy));
                self.acc_with(b, |gb| {
                    for (g, &v) in gb.iter_mut().zip(gy) {
                        *g -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let va = val!(a).to_vec();
                let vb = val!(b).to_vec();
                self.acc_with(a, |ga| {
                    for ((g, &gv), &bv) in ga.iter_mut().zip(gy).zip(&vb) {
                        *g += gv * bv;
                    }
                });
                self.acc_with(b, |gb| {
                    for ((g, &gv), &av) in gb.iter_mut().zip(gy).zip(&va) {
                        *g += gv * av;
                    }
                });
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.acc_with(a, |ga| {
                    for (g, &v) in ga.iter_mut().zip(gy) {
                        *g += c * v;
                    }
                });
            }
            Op::Activate(a, kind) => {
                let (a, kind) = (*a, *kind);
                let y = self.nodes[idx].value.data().to_vec();
                self.acc_with(a, |ga| {
                    for ((g, &gv), &yv) in ga.iter_mut().zip(gy).zip(&y) {
                        *g += gv * kind.derivative_from_output(yv);
                    }
                });
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (input, kernel, bias) = (*input, *kernel, *bias);
                let (stride, padding) = (*stride, *padding);
                let g = Conv2dGeom::validate(
                    self.nodes[input].value.shape(),
                    self.nodes[kernel].value.shape(),
                    stride,
                    padding,
                )
                .expect("geometry validated at forward time");
                let x = val!(input).to_vec();
                let k = val!(kernel).to_vec();
                if self.needs(input) {
                    let mut dx = vec![0.0; x.len()];
                    conv2d_backward_input(&k, gy, &g, &mut dx);
                    self.acc_with(input, |gi| add_assign(gi, &dx));
                }
                if self.needs(kernel) {
                    let mut dk = vec![0.0; k.len()];
                    conv2d_backward_kernel(&x, gy, &g, &mut dk);
                    self.acc_with(kernel, |gk| add_assign(gk, &dk));
                }
                if let Some(b) = bias {
                    if self.needs(b) {
                        let per = g.oh * g.ow;
                        let mut db = vec![0.0; g.cout];
                        for (c, chunk) in gy.chunks(per).enumerate() {
                            db[c] = chunk.iter().sum();
                        }
                        self.acc_with(b, |gb| add_assign(gb, &db));
                    }
                }
            }
            Op::Conv2dTranspose {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (input, kernel) = (*input, *kernel);
                let (stride, padding) = (*stride, *padding);
                let g = TconvGeom::validate_2d(
                    self.nodes[input].value.shape(),
                    self.nodes[kernel].value.shape(),
                    stride,
                    padding,
                )
                .expect("geometry validated at forward time");
                let x = val!(input).to_vec();
                let k = val!(kernel).to_vec();
                let dfull = g.embed_grad(gy);
                if self.needs(input) {
                    let dx = tconv2d_backward_input(&k, &dfull, &g);
                    self.acc_with(input, |gi| add_assign(gi, &dx));
                }
                if self.needs(kernel) {
                    let dk = tconv2d_backward_kernel(&x, &dfull, &g);
                    self.acc_with(kernel, |gk| add_assign(gk, &dk));
                }
            }
            Op::Conv3dTranspose {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (input, kernel) = (*input, *kernel);
                let (stride, padding) = (*stride, *padding);
                let g = TconvGeom::validate_3d(
                    self.nodes[input].value.shape(),
                    self.nodes[kernel].value.shape(),
                    stride,
                    padding,
                )
                .expect("geometry validated at forward time");
                let x = val!(input).to_vec();
                let k = val!(kernel).to_vec();
                let dfull = g.embed_grad(gy);
                if self.needs(input) {
                    let dx = tconv3d_backward_input(&k, &dfull, &g);
                    self.acc_with(input, |gi| add_assign(gi, &dx));
                }
                if self.needs(kernel) {
                    let dk = tconv3d_backward_kernel(&x, &dfull, &g);
                    self.acc_with(kernel, |gk| add_assign(gk, &dk));
                }
            }
            Op::AddChannelBias { input, bias } => {
                let (input, bias) = (*input, *bias);
                let channels = self.nodes[bias].value.numel();
                let per = self.nodes[input].value.numel() / channels;
                self.acc_with(input, |gi| add_assign(gi, gy));
                if self.needs(bias) {
                    let mut db = vec![0.0; channels];
                    for (c, chunk) in gy.chunks(per).enumerate() {
                        db[c] = chunk.iter().sum();
                    }
                    self.acc_with(bias, |gb| add_assign(gb, &db));
                }
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                epsilon,
            } => {
                let (input, gain, bias, epsilon) = (*input, *gain, *bias, *epsilon);
                let x = val!(input).to_vec();
                let gv = val!(gain).to_vec();
                let m = x.len();
                let (mean, inv_std) = moments(&x, epsilon);
                let xh: Vec<f64> = x.iter().map(|&v| (v - mean) * inv_std).collect();
                let dxh: Vec<f64> = gy
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * pick(&gv, i))
                    .collect();
                if self.needs(input) {
                    let mean_dxh = dxh.iter().sum::<f64>() / m as f64;
                    let mean_dxh_xh =
                        dxh.iter().zip(&xh).map(|(&d, &h)| d * h).sum::<f64>() / m as f64;
                    let dx: Vec<f64> = dxh
                        .iter()
                        .zip(&xh)
                        .map(|(&d, &h)| inv_std * (d - mean_dxh - h * mean_dxh_xh))
                        .collect();
                    self.acc_with(input, |gi| add_assign(gi, &dx));
                }
                if self.needs(gain) {
                    let per_elem: Vec<f64> = gy.iter().zip(&xh).map(|(&g, &h)| g * h).collect();
                    let scalar_gain = gv.len() == 1;
                    self.acc_with(gain, |gg| {
                        if scalar_gain {
                            gg[0] += per_elem.iter().sum::<f64>();
                        } else {
                            add_assign(gg, &per_elem);
                        }
                    });
                }
                if self.needs(bias) {
                    let scalar_bias = self.nodes[bias].value.numel() == 1;
                    self.acc_with(bias, |gb| {
                        if scalar_bias {
                            gb[0] += gy.iter().sum::<f64>();
                        } else {
                            add_assign(gb, gy);
                        }
                    });
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let (input, weight, bias) = (*input, *weight, *bias);
                let x = val!(input).to_vec();
                let w = val!(weight).to_vec();
                let n = x.len();
                let m = gy.len();
                if self.needs(input) {
                    let mut dx = vec![0.0; n];
                    for i in 0..m {
                        let row = &w[i * n..(i + 1) * n];
                        let g = gy[i];
                        for (d, &wv) in dx.iter_mut().zip(row) {
                            *d += g * wv;
                        }
                    }
                    self.acc_with(input, |gi| add_assign(gi, &dx));
                }
                if self.needs(weight) {
                    let mut dw = vec![0.0; m * n];
                    for i in 0..m {
                        let g = gy[i];
                        let row = &mut dw[i * n..(i + 1) * n];
                        for (d, &xv) in row.iter_mut().zip(&x) {
                            *d += g * xv;
                        }
                    }
                    self.acc_with(weight, |gw| add_assign(gw, &dw));
                }
                self.acc_with(bias, |gb| add_assign(gb, gy));
            }
            Op::Reshape(a) => {
                let a = *a;
                self.acc_with(a, |ga| add_assign(ga, gy));
            }
            Op::Concat(a, b) => {
                let (a, b) = (*a, *b);
                let na = self.nodes[a].value.numel();
                self.acc_with(a, |ga| add_assign(ga, &gy[..na]));
                self.acc_with(b, |gb| add_assign(gb, &gy[na..]));
            }
            Op::ZeroPad2d { input, off_h, off_w } => {
                let (input, off_h, off_w) = (*input, *off_h, *off_w);
                let ishape = self.nodes[input].value.shape().to_vec();
                let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        let src = (ci * oh + y + off_h) * ow + off_w;
                        let dst = (ci * h + y) * w;
                        dx[dst..dst + w].copy_from_slice(&gy[src..src + w]);
                    }
                }
                self.acc_with(input, |gi| add_assign(gi, &dx));
            }
            Op::SumPool1d { input, window } => {
                let (input, window) = (*input, *window);
                let n = self.nodes[input].value.numel();
                let mut dx = vec![0.0; n];
                for (i, chunk) in dx.chunks_mut(window).enumerate() {
                    for d in chunk {
                        *d += gy[i];
                    }
                }
                self.acc_with(input, |gi| add_assign(gi, &dx));
            }
            Op::SignedSqrt(a) => {
                let a = *a;
                let x = val!(a).to_vec();
                self.acc_with(a, |ga| {
                    for ((g, &gv), &xv) in ga.iter_mut().zip(gy).zip(&x) {
                        let ax = xv.abs();
                        if ax > 1e-12 {
                            *g += gv * 0.5 / ax.sqrt();
                        }
                    }
                });
            }
            Op::L2Normalize(a) => {
                let a = *a;
                let x = val!(a).to_vec();
                let norm = l2_norm(&x);
                let y = self.nodes[idx].value.data().to_vec();
                self.acc_with(a, |ga| {
                    if norm > 1e-12 {
                        let dot: f64 = y.iter().zip(gy).map(|(&yv, &gv)| yv * gv).sum();
                        for ((g, &gv), &yv) in ga.iter_mut().zip(gy).zip(&y) {
                            *g += (gv - yv * dot) / norm;
                        }
                    } else {
                        for (g, &gv) in ga.iter_mut().zip(gy) {
                            *g += gv / 1e-12;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let a = *a;
                let p = self.nodes[idx].value.data().to_vec();
                let dot: f64 = p.iter().zip(gy).map(|(&pv, &gv)| pv * gv).sum();
                self.acc_with(a, |ga| {
                    for ((g, &gv), &pv) in ga.iter_mut().zip(gy).zip(&p) {
                        *g += pv * (gv - dot);
                    }
                });
            }
            Op::Sum(a) => {
                let a = *a;
                let g0 = gy[0];
                self.acc_with(a, |ga| {
                    for g in ga.iter_mut() {
                        *g += g0;
                    }
                });
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.nodes[a].value.numel() as f64;
                let g0 = gy[0] / n;
                self.acc_with(a, |ga| {
                    for g in ga.iter_mut() {
                        *g += g0;
                    }
                });
            }
            Op::Mse { pred, target } => {
                let (pred, target) = (*pred, *target);
                let p = val!(pred).to_vec();
                let t = val!(target).to_vec();
                let n = p.len() as f64;
                let g0 = gy[0];
                self.acc_with(pred, |gp| {
                    for ((g, &pv), &tv) in gp.iter_mut().zip(&p).zip(&t) {
                        *g += g0 * 2.0 * (pv - tv) / n;
                    }
                });
                self.acc_with(target, |gt| {
                    for ((g, &pv), &tv) in gt.iter_mut().zip(&p).zip(&t) {
                        *g -= g0 * 2.0 * (pv - tv) / n;
                    }
                });
            }
            Op::Bce { pred, target } => {
                let (pred, target) = (*pred, *target);
                let p = val!(pred).to_vec();
                let t = val!(target).to_vec();
                let n = p.len() as f64;
                let g0 = gy[0];
                self.acc_with(pred, |gp| {
                    for ((g, &pv), &y) in gp.iter_mut().zip(&p).zip(&t) {
                        // Clamped predictions sit on a flat region.
                        if (BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&pv) {
                            *g += g0 * (pv - y) / (pv * (1.0 - pv)) / n;
                        }
                    }
                });
                self.acc_with(target, |gt| {
                    for ((g, &pv), _) in gt.iter_mut().zip(&p).zip(&t) {
                        let ph = pv.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
                        *g += g0 * ((1.0 - ph).ln() - ph.ln()) / n;
                    }
                });
            }
            Op::CrossEntropyLogits { logits, class } => {
                let (logits, class) = (*logits, *class);
                let z = val!(logits).to_vec();
                let p = softmax_vec(&z);
                let g0 = gy[0];
                self.acc_with(logits, |gz| {
                    for (i, (g, &pv)) in gz.iter_mut().zip(&p).enumerate() {
                        let onehot = if i == class { 1.0 } else { 0.0 };
                        *g += g0 * (pv - onehot);
                    }
                });
            }
        }
    }

    /// Runs `f` over the gradient buffer of node `id` if it needs one.
    fn acc_with(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let numel = self.nodes[id].value.numel();
        let slot = &mut self.grads[id];
        let buf = slot.get_or_insert_with(|| vec![0.0; numel]);
        f(buf);
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn pick(broadcastable: &[f64], i: usize) -> f64 {
    if broadcastable.len() == 1 {
        broadcastable[0]
    } else {
        broadcastable[i]
    }
}

fn moments(x: &[f64], epsilon: f64) -> (f64, f64) {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + epsilon).sqrt())
}

fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|&v| v * v).sum::<f64>().sqrt()
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

// ---- convolution geometry and kernels ----

struct Conv2dGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Conv2dGeom {
    fn validate(xs: &[usize], ks: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if xs.len() != 3 {
            return Err(Error::dimension(format!(
                "conv2d input must be [Cin, H, W], got {xs:?}"
            )));
        }
        if ks.len() != 4 {
            return Err(Error::dimension(format!(
                "conv2d kernel must be [Cout, Cin, kh, kw], got {ks:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::dimension("conv2d stride must be positive"));
        }
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(Error::dimension(format!(
                "conv2d input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dimension(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(Conv2dGeom {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    /// Valid output range along one axis for a kernel offset `kk`.
    fn range(kk: usize, padding: usize, stride: usize, in_ext: usize, out_ext: usize) -> Option<(usize, usize)> {
        let lo = if kk >= padding {
            0
        } else {
            (padding - kk).div_ceil(stride)
        };
        if in_ext + padding <= kk {
            return None;
        }
        let hi = ((in_ext - 1 + padding - kk) / stride).min(out_ext - 1);
        if lo > hi {
            None
        } else {
            Some((lo, hi))
        }
    }
}

/// Lowers the padded input into a `[cin*kh*kw, oh*ow]` patch matrix so the
/// convolution becomes row-long axpy/dot operations, which vectorize far
/// better than the short spatial rows of the direct form.
fn im2col(x: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let (s, p) = (g.stride, g.padding);
    let cols = g.oh * g.ow;
    let mut col = vec![0.0; g.cin * g.kh * g.kw * cols];
    for ci in 0..g.cin {
        let x_ch = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let Some((oy_lo, oy_hi)) = Conv2dGeom::range(ky, p, s, g.h, g.oh) else {
                continue;
            };
            for kx in 0..g.kw {
                let Some((ox_lo, ox_hi)) = Conv2dGeom::range(kx, p, s, g.w, g.ow) else {
                    continue;
                };
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &mut col[r * cols..(r + 1) * cols];
                let n = ox_hi - ox_lo + 1;
                let ix0 = ox_lo * s + kx - p;
                for oy in oy_lo..=oy_hi {
                    let iy = oy * s + ky - p;
                    let dst = &mut row[oy * g.ow + ox_lo..oy * g.ow + ox_lo + n];
                    if s == 1 {
                        dst.copy_from_slice(&x_ch[iy * g.w + ix0..iy * g.w + ix0 + n]);
                    } else {
                        let mut ix = iy * g.w + ix0;
                        for d in dst.iter_mut() {
                            *d = x_ch[ix];
                            ix += s;
                        }
                    }
                }
            }
        }
    }
    col
}

/// Reverse of [`im2col`]: scatter-adds the patch matrix back into an input
/// gradient buffer.
fn col2im_add(col: &[f64], g: &Conv2dGeom, dx: &mut [f64]) {
    let (s, p) = (g.stride, g.padding);
    let cols = g.oh * g.ow;
    for ci in 0..g.cin {
        let dx_ch = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let Some((oy_lo, oy_hi)) = Conv2dGeom::range(ky, p, s, g.h, g.oh) else {
                continue;
            };
            for kx in 0..g.kw {
                let Some((ox_lo, ox_hi)) = Conv2dGeom::range(kx, p, s, g.w, g.ow) else {
                    continue;
                };
                let r = (ci * g.kh + ky) * g.kw + kx;
                let row = &col[r * cols..(r + 1) * cols];
                let n = ox_hi - ox_lo + 1;
                let ix0 = ox_lo * s + kx - p;
                for oy in oy_lo..=oy_hi {
                    let iy = oy * s + ky - p;
                    let src = &row[oy * g.ow + ox_lo..oy * g.ow + ox_lo + n];
                    if s == 1 {
                        let dst = &mut dx_ch[iy * g.w + ix0..iy * g.w + ix0 + n];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    } else {
                        let mut ix = iy * g.w + ix0;
                        for &v in src {
                            dx_ch[ix] += v;
                            ix += s;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, g: &Conv2dGeom, out: &mut [f64]) {
    let cols = g.oh * g.ow;
    let kdim = g.cin * g.kh * g.kw;
    let col = im2col(x, g);
    for co in 0..g.cout {
        let out_ch = &mut out[co * cols..(co + 1) * cols];
        if let Some(b) = bias {
            out_ch.fill(b[co]);
        }
        let k_row = &k[co * kdim..(co + 1) * kdim];
        for (r, &wgt) in k_row.iter().enumerate() {
            let crow = &col[r * cols..(r + 1) * cols];
            for (o, &cv) in out_ch.iter_mut().zip(crow) {
                *o += wgt * cv;
            }
        }
    }
}

fn conv2d_backward_input(k: &[f64], gy: &[f64], g: &Conv2dGeom, dx: &mut [f64]) {
    let cols = g.oh * g.ow;
    let kdim = g.cin * g.kh * g.kw;
    // dcol[r, pos] = sum_co K[co, r] * gy[co, pos]
    let mut dcol = vec![0.0; kdim * cols];
    for co in 0..g.cout {
        let gy_ch = &gy[co * cols..(co + 1) * cols];
        let k_row = &k[co * kdim..(co + 1) * kdim];
        for (r, &wgt) in k_row.iter().enumerate() {
            let drow = &mut dcol[r * cols..(r + 1) * cols];
            for (d, &gv) in drow.iter_mut().zip(gy_ch) {
                *d += wgt * gv;
            }
        }
    }
    col2im_add(&dcol, g, dx);
}

fn conv2d_backward_kernel(x: &[f64], gy: &[f64], g: &Conv2dGeom, dk: &mut [f64]) {
    let cols = g.oh * g.ow;
    let kdim = g.cin * g.kh * g.kw;
    let col = im2col(x, g);
    for co in 0..g.cout {
        let gy_ch = &gy[co * cols..(co + 1) * cols];
        let dk_row = &mut dk[co * kdim..(co + 1) * kdim];
        for (r, dkv) in dk_row.iter_mut().enumerate() {
            let crow = &col[r * cols..(r + 1) * cols];
            let mut acc = 0.0;
            for (&gv, &cv) in gy_ch.iter().zip(crow) {
                acc += gv * cv;
            }
            *dkv += acc;
        }
    }
}

/// Geometry shared by the 2-D and 3-D transposed convolutions.
/// `full` is the uncropped scatter extent `(n-1)*stride + k` per axis.
struct TconvGeom {
    cin: usize,
    cout: usize,
    input: Vec<usize>,
    kernel: Vec<usize>,
    full: Vec<usize>,
    out: Vec<usize>,
    stride: usize,
    padding: usize,
}

impl TconvGeom {
    fn validate(
        xs: &[usize],
        ks: &[usize],
        stride: usize,
        padding: usize,
        spatial: usize,
        what: &str,
    ) -> Result<Self> {
        if xs.len() != spatial + 1 {
            return Err(Error::dimension(format!(
                "{what} input must have {} dims, got {xs:?}",
                spatial + 1
            )));
        }
        if ks.len() != spatial + 2 {
            return Err(Error::dimension(format!(
                "{what} kernel must have {} dims, got {ks:?}",
                spatial + 2
            )));
        }
        if stride == 0 {
            return Err(Error::config(format!("{what} stride must be positive")));
        }
        if ks[0] != xs[0] {
            return Err(Error::dimension(format!(
                "{what} input has {} channels but kernel expects {}",
                xs[0], ks[0]
            )));
        }
        let input: Vec<usize> = xs[1..].to_vec();
        let kernel: Vec<usize> = ks[2..].to_vec();
        let full: Vec<usize> = input
            .iter()
            .zip(&kernel)
            .map(|(&n, &k)| (n - 1) * stride + k)
            .collect();
        let mut out = Vec::with_capacity(spatial);
        for &f in &full {
            if f < 2 * padding + 1 {
                return Err(Error::config(format!(
                    "{what} output extent ({f} - 2*{padding}) is not positive"
                )));
            }
            out.push(f - 2 * padding);
        }
        Ok(TconvGeom {
            cin: xs[0],
            cout: ks[1],
            input,
            kernel,
            full,
            out,
            stride,
            padding,
        })
    }

    fn validate_2d(xs: &[usize], ks: &[usize], stride: usize, padding: usize) -> Result<Self> {
        Self::validate(xs, ks, stride, padding, 2, "conv2d_transpose")
    }

    fn validate_3d(xs: &[usize], ks: &[usize], stride: usize, padding: usize) -> Result<Self> {
        Self::validate(xs, ks, stride, padding, 3, "conv3d_transpose")
    }

    fn full_numel(&self) -> usize {
        self.cout * self.full.iter().product::<usize>()
    }

    /// Zero-embeds the cropped output gradient back into full coordinates.
    fn embed_grad(&self, gy: &[f64]) -> Vec<f64> {
        let mut dfull = vec![0.0; self.full_numel()];
        let p = self.padding;
        match self.out.len() {
            2 => {
                let (fh, fw) = (self.full[0], self.full[1]);
                let (oh, ow) = (self.out[0], self.out[1]);
                for co in 0..self.cout {
                    for y in 0..oh {
                        let src = (co * oh + y) * ow;
                        let dst = (co * fh + y + p) * fw + p;
                        dfull[dst..dst + ow].copy_from_slice(&gy[src..src + ow]);
                    }
                }
            }
            3 => {
                let (fd, fh, fw) = (self.full[0], self.full[1], self.full[2]);
                let (od, oh, ow) = (self.out[0], self.out[1], self.out[2]);
                for co in 0..self.cout {
                    for z in 0..od {
                        for y in 0..oh {
                            let src = ((co * od + z) * oh + y) * ow;
                            let dst = ((co * fd + z + p) * fh + y + p) * fw + p;
                            dfull[dst..dst + ow].copy_from_slice(&gy[src..src + ow]);
                        }
                    }
                }
            }
            _ => unreachable!(),
        }
        dfull
    }
}

fn tconv2d_forward(x: &[f64], k: &[f64], g: &TconvGeom) -> Vec<f64> {
    let (h, w) = (g.input[0], g.input[1]);
    let (kh, kw) = (g.kernel[0], g.kernel[1]);
    let (fh, fw) = (g.full[0], g.full[1]);
    let s = g.stride;
    let mut full = vec![0.0; g.full_numel()];
    for co in 0..g.cout {
        let full_ch = &mut full[co * fh * fw..(co + 1) * fh * fw];
        for ci in 0..g.cin {
            let x_ch = &x[ci * h * w..(ci + 1) * h * w];
            let k_base = (ci * g.cout + co) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = k[k_base + ky * kw + kx];
                    for iy in 0..h {
                        let fy = iy * s + ky;
                        let xrow = &x_ch[iy * w..(iy + 1) * w];
                        let fbase = fy * fw + kx;
                        let mut fx = fbase;
                        for &xv in xrow {
                            full_ch[fx] += wgt * xv;
                            fx += s;
                        }
                    }
                }
            }
        }
    }
    // Crop padding.
    let (oh, ow) = (g.out[0], g.out[1]);
    let p = g.padding;
    let mut out = vec![0.0; g.cout * oh * ow];
    for co in 0..g.cout {
        for y in 0..oh {
            let src = (co * fh + y + p) * fw + p;
            let dst = (co * oh + y) * ow;
            out[dst..dst + ow].copy_from_slice(&full[src..src + ow]);
        }
    }
    out
}

fn tconv2d_backward_input(k: &[f64], dfull: &[f64], g: &TconvGeom) -> Vec<f64> {
    let (h, w) = (g.input[0], g.input[1]);
    let (kh, kw) = (g.kernel[0], g.kernel[1]);
    let (fh, fw) = (g.full[0], g.full[1]);
    let s = g.stride;
    let mut dx = vec![0.0; g.cin * h * w];
    for ci in 0..g.cin {
        let dx_ch = &mut dx[ci * h * w..(ci + 1) * h * w];
        for co in 0..g.cout {
            let df_ch = &dfull[co * fh * fw..(co + 1) * fh * fw];
            let k_base = (ci * g.cout + co) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wgt = k[k_base + ky * kw + kx];
                    for iy in 0..h {
                        let fy = iy * s + ky;
                        let mut fx = fy * fw + kx;
                        let drow = &mut dx_ch[iy * w..(iy + 1) * w];
                        for d in drow.iter_mut() {
                            *d += wgt * df_ch[fx];
                            fx += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn tconv2d_backward_kernel(x: &[f64], dfull: &[f64], g: &TconvGeom) -> Vec<f64> {
    let (h, w) = (g.input[0], g.input[1]);
    let (kh, kw) = (g.kernel[0], g.kernel[1]);
    let (fh, fw) = (g.full[0], g.full[1]);
    let s = g.stride;
    let mut dk = vec![0.0; g.cin * g.cout * kh * kw];
    for ci in 0..g.cin {
        let x_ch = &x[ci * h * w..(ci + 1) * h * w];
        for co in 0..g.cout {
            let df_ch = &dfull[co * fh * fw..(co + 1) * fh * fw];
            let k_base = (ci * g.cout + co) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let mut acc = 0.0;
                    for iy in 0..h {
                        let fy = iy * s + ky;
                        let mut fx = fy * fw + kx;
                        for &xv in &x_ch[iy * w..(iy + 1) * w] {
                            acc += xv * df_ch[fx];
                            fx += s;
                        }
                    }
                    dk[k_base + ky * kw + kx] += acc;
                }
            }
        }
    }
    dk
}

fn tconv3d_forward(x: &[f64], k: &[f64], g: &TconvGeom) -> Vec<f64> {
    let (d, h, w) = (g.input[0], g.input[1], g.input[2]);
    let (kd, kh, kw) = (g.kernel[0], g.kernel[1], g.kernel[2]);
    let (fd, fh, fw) = (g.full[0], g.full[1], g.full[2]);
    let s = g.stride;
    let mut full = vec![0.0; g.full_numel()];
    for co in 0..g.cout {
        let full_ch = &mut full[co * fd * fh * fw..(co + 1) * fd * fh * fw];
        for ci in 0..g.cin {
            let x_ch = &x[ci * d * h * w..(ci + 1) * d * h * w];
            let k_base = (ci * g.cout + co) * kd * kh * kw;
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = k[k_base + (kz * kh + ky) * kw + kx];
                        for iz in 0..d {
                            let fz = iz * s + kz;
                            for iy in 0..h {
                                let fy = iy * s + ky;
                                let xrow = &x_ch[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                                let mut fx = (fz * fh + fy) * fw + kx;
                                for &xv in xrow {
                                    full_ch[fx] += wgt * xv;
                                    fx += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let (od, oh, ow) = (g.out[0], g.out[1], g.out[2]);
    let p = g.padding;
    let mut out = vec![0.0; g.cout * od * oh * ow];
    for co in 0..g.cout {
        for z in 0..od {
            for y in 0..oh {
                let src = ((co * fd + z + p) * fh + y + p) * fw + p;
                let dst = ((co * od + z) * oh + y) * ow;
                out[dst..dst + ow].copy_from_slice(&full[src..src + ow]);
            }
        }
    }
    out
}

fn tconv3d_backward_input(k: &[f64], dfull: &[f64], g: &TconvGeom) -> Vec<f64> {
    let (d, h, w) = (g.input[0], g.input[1], g.input[2]);
    let (kd, kh, kw) = (g.kernel[0], g.kernel[1], g.kernel[2]);
    let (fd, fh, fw) = (g.full[0], g.full[1], g.full[2]);
    let s = g.stride;
    let mut dx = vec![0.0; g.cin * d * h * w];
    for ci in 0..g.cin {
        let dx_ch = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for co in 0..g.cout {
            let df_ch = &dfull[co * fd * fh * fw..(co + 1) * fd * fh * fw];
            let k_base = (ci * g.cout + co) * kd * kh * kw;
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = k[k_base + (kz * kh + ky) * kw + kx];
                        for iz in 0..d {
                            let fz = iz * s + kz;
                            for iy in 0..h {
                                let fy = iy * s + ky;
                                let mut fx = (fz * fh + fy) * fw + kx;
                                let drow = &mut dx_ch[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                                for dv in drow.iter_mut() {
                                    *dv += wgt * df_ch[fx];
                                    fx += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn tconv3d_backward_kernel(x: &[f64], dfull: &[f64], g: &TconvGeom) -> Vec<f64> {
    let (d, h, w) = (g.input[0], g.input[1], g.input[2]);
    let (kd, kh, kw) = (g.kernel[0], g.kernel[1], g.kernel[2]);
    let (fd, fh, fw) = (g.full[0], g.full[1], g.full[2]);
    let s = g.stride;
    let mut dk = vec![0.0; g.cin * g.cout * kd * kh * kw];
    for ci in 0..g.cin {
        let x_ch = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for co in 0..g.cout {
            let df_ch = &dfull[co * fd * fh * fw..(co + 1) * fd * fh * fw];
            let k_base = (ci * g.cout + co) * kd * kh * kw;
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = 0.0;
                        for iz in 0..d {
                            let fz = iz * s + kz;
                            for iy in 0..h {
                                let fy = iy * s + ky;
                                let mut fx = (fz * fh + fy) * fw + kx;
                                for &xv in &x_ch[(iz * h + iy) * w..(iz * h + iy + 1) * w] {
                                    acc += xv * df_ch[fx];
                                    fx += s;
                                }
                            }
                        }
                        dk[k_base + (kz * kh + ky) * kw + kx] += acc;
                    }
                }
            }
        }
    }
    dk
}
