//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every forward op together with the values it needs for
//! its vector-Jacobian product. [`Tape::backward`] replays the record once in
//! reverse; afterwards the tape is consumed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::conv::{self, ConvGeom};
use crate::kernels::deform::{self, DeformGeom};
use crate::kernels::norm::{self, BnSaved};
use crate::kernels::resize;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a custom op: `(inputs, output, grad_output) -> grad_inputs`.
pub type CustomBackward =
    Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>> + Send + Sync>;

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Resize {
        x: Var,
    },
    BnRelu {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved,
        training: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ChannelAffine {
        x: Var,
        scale: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    DeformConv {
        x: Var,
        offsets: Var,
        modulation: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: DeformGeom,
        samples: Vec<f64>,
    },
    GatherPixels {
        x: Var,
        pixels: Vec<usize>,
    },
    MatMul(Var, Var),
    Custom {
        inputs: Vec<Var>,
        backward: CustomBackward,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running-statistics sample produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_vars: Vec<(Var, String)>,
    batch_stats: Vec<BatchStats>,
    consumed: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by forward op");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input: no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input whose gradient can be read from [`Grads::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter. Frozen parameters enter as constants. Repeated
    /// calls with the same name return the same variable.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.require(name)?.clone();
        let v = self.push(value, Op::Leaf, !store.is_frozen(name));
        self.params.insert(name.to_string(), v);
        self.param_vars.push((v, name.to_string()));
        Ok(v)
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c_in, h, wd) = self.value(x).chw()?;
        let ws = self.value(w).shape().to_vec();
        let [c_out, kc, k, k2] = ws[..] else {
            return Err(Error::dim("conv2d", format!("kernel must be rank 4, got {ws:?}")));
        };
        if kc != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("input has {c_in} channels, kernel expects {kc}"),
            ));
        }
        if k != k2 || k % 2 == 0 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {k}x{k2}, stride {stride}, pad {pad} on {h}x{wd}"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::dim("conv2d", "bias length must equal output channels"));
            }
        }
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
        };
        let out = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(&[c_out, geom.out_h(), geom.out_w()], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("resize", "output size must be positive"));
        }
        let out = resize::resize_forward(self.value(x).data(), c, h, w, out_h, out_w);
        let value = Tensor::new(&[c, out_h, out_w], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Resize { x }, rg))
    }

    /// Batch norm followed by ReLU. In training mode the per-channel batch
    /// statistics are recorded under `name` for the caller to fold into the
    /// running estimates.
    pub fn batchnorm_relu(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        training: bool,
        name: &str,
    ) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::dim("batchnorm_relu", "gamma/beta length must equal channels"));
        }
        let running = if training { None } else { running };
        if !training && running.is_none() {
            return Err(Error::Usage("eval-mode batch norm needs running statistics".into()));
        }
        let (out, saved) = norm::bn_relu_forward(
            self.value(x).data(),
            c,
            self.value(gamma).data(),
            self.value(beta).data(),
            running,
        );
        if training {
            self.batch_stats.push(BatchStats {
                name: name.to_string(),
                mean: saved.batch_mean.clone(),
                var: saved.batch_var.clone(),
                count: h * w,
            });
        }
        let value = Tensor::new(&[c, h, w], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::BnRelu {
                x,
                gamma,
                beta,
                saved,
                training,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        same_shape(op, self.value(a), self.value(b))?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    /// `out[c] = x[c] * scale[c] + shift[c]` with constant per-channel coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::dim("channel_affine", format!("{c} channels vs {} coefficients", scale.len())));
        }
        let plane = h * w;
        let src = self.value(x).data();
        let data = (0..c * plane)
            .map(|i| src[i] * scale[i / plane] + shift[i / plane])
            .collect();
        let v = Tensor::new(&[c, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            v,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Concatenate along the leading axis (channels for feature maps).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(Error::dim(
                    "concat",
                    format!("trailing dims {:?} vs {:?}", t.shape(), tail),
                ));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let v = Tensor::new(&shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(v, Op::Concat(parts.to_vec()), rg))
    }

    /// Leading-axis slice `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::dim("slice_channels", format!("{start}+{len} of {shape:?}")));
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let v = Tensor::new(&out_shape, t.data()[start * inner..(start + len) * inner].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::SliceChannels { x, start }, rg))
    }

    pub fn deform_conv(
        &mut self,
        x: Var,
        offsets: Var,
        modulation: Var,
        kernel: Var,
        bias: Option<Var>,
    ) -> Result<Var> {
        let (c_in, h, w) = self.value(x).chw()?;
        let ks = self.value(kernel).shape().to_vec();
        let [c_out, kc, k, k2] = ks[..] else {
            return Err(Error::dim("deform_conv", format!("kernel must be rank 4, got {ks:?}")));
        };
        if kc != c_in || k != k2 || k % 2 == 0 {
            return Err(Error::dim("deform_conv", format!("kernel {ks:?} for {c_in} input channels")));
        }
        let taps = k * k;
        if self.value(offsets).shape() != [2 * taps, h, w] {
            return Err(Error::dim(
                "deform_conv",
                format!("offsets must be {:?}, got {:?}", [2 * taps, h, w], self.value(offsets).shape()),
            ));
        }
        if self.value(modulation).shape() != [taps, h, w] {
            return Err(Error::dim(
                "deform_conv",
                format!("modulation must be {:?}, got {:?}", [taps, h, w], self.value(modulation).shape()),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(Error::dim("deform_conv", "bias length must equal output channels"));
            }
        }
        let geom = DeformGeom { c_in, h, w, c_out, k };
        let (out, samples) = deform::deform_forward(
            self.value(x).data(),
            self.value(offsets).data(),
            self.value(modulation).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let v = Tensor::new(&[c_out, h, w], out)?;
        let rg = [x, offsets, modulation, kernel].iter().any(|&a| self.rg(a))
            || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            v,
            Op::DeformConv {
                x,
                offsets,
                modulation,
                kernel,
                bias,
                geom,
                samples,
            },
            rg,
        ))
    }

    /// Gather `x[:, p]` for flat pixel indices `p`, giving an `[n, C]` matrix.
    pub fn gather_pixels(&mut self, x: Var, pixels: &[usize]) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if let Some(&bad) = pixels.iter().find(|&&p| p >= h * w) {
            return Err(Error::dim("gather_pixels", format!("pixel {bad} outside {h}x{w}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(pixels.len() * c);
        for &p in pixels {
            for ch in 0..c {
                data.push(src[ch * h * w + p]);
            }
        }
        let v = Tensor::new(&[pixels.len(), c], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            v,
            Op::GatherPixels {
                x,
                pixels: pixels.to_vec(),
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ([n, k], [k2, m]) = (ta.shape(), tb.shape()) else {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        };
        let (n, k, m) = (*n, *k, *m);
        if k != *k2 {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let v = Tensor::new(&[n, m], matmul(ta.data(), tb.data(), n, k, m))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// Record an op with a caller-supplied value and vector-Jacobian product.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`. Consumes the recorded graph.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.vjp(i, &g)?;
            grads[i] = Some(g);
            for (v, gv) in contributions {
                if !self.rg(v) {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gv.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        Ok(Grads {
            grads,
            params: std::mem::take(&mut self.param_vars),
        })
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let shaped = |v: Var, data: Vec<f64>| -> Result<(Var, Tensor)> {
            Ok((v, Tensor::new(self.value(v).shape(), data)?))
        };
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                if self.rg(*x) {
                    res.push(shaped(*x, conv::conv2d_grad_input(self.value(*w).data(), g.data(), geom))?);
                }
                if self.rg(*w) {
                    res.push(shaped(*w, conv::conv2d_grad_kernel(self.value(*x).data(), g.data(), geom))?);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    res.push(shaped(b, conv::conv2d_grad_bias(g.data(), geom.c_out))?);
                }
            }
            Op::Resize { x } => {
                let (c, h, w) = self.value(*x).chw()?;
                let (_, oh, ow) = out.chw()?;
                res.push(shaped(*x, resize::resize_backward(g.data(), c, h, w, oh, ow))?);
            }
            Op::BnRelu {
                x,
                gamma,
                beta,
                saved,
                training,
            } => {
                let c = self.value(*gamma).len();
                let (gx, gg, gb) = norm::bn_relu_backward(
                    g.data(),
                    out.data(),
                    c,
                    self.value(*gamma).data(),
                    saved,
                    *training,
                );
                res.push(shaped(*x, gx)?);
                res.push(shaped(*gamma, gg)?);
                res.push(shaped(*beta, gb)?);
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| if *y > 0.0 { *g } else { 0.0 })
                    .collect();
                res.push(shaped(*x, d)?);
            }
            Op::Sigmoid(x) => {
                let d = g.data().iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                res.push(shaped(*x, d)?);
            }
            Op::Tanh(x) => {
                let d = g.data().iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                res.push(shaped(*x, d)?);
            }
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    res.push(shaped(*a, g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect())?);
                }
                if self.rg(*b) {
                    res.push(shaped(*b, g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect())?);
                }
            }
            Op::Scale(x, s) => res.push((*x, g.map(|v| v * s))),
            Op::ChannelAffine { x, scale } => {
                let plane = g.len() / scale.len();
                let d = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * scale[i / plane])
                    .collect();
                res.push(shaped(*x, d)?);
            }
            Op::Sum(x) => {
                let gv = g.item();
                res.push((*x, Tensor::full(self.value(*x).shape(), gv)));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                res.push((*x, Tensor::full(t.shape(), g.item() / t.len() as f64)));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    res.push(shaped(p, g.data()[offset..offset + n].to_vec())?);
                    offset += n;
                }
            }
            Op::SliceChannels { x, start } => {
                let t = self.value(*x);
                let inner: usize = t.shape()[1..].iter().product();
                let mut d = vec![0.0; t.len()];
                d[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                res.push(shaped(*x, d)?);
            }
            Op::DeformConv {
                x,
                offsets,
                modulation,
                kernel,
                bias,
                geom,
                samples,
            } => {
                let dg = deform::deform_backward(
                    self.value(*x).data(),
                    self.value(*offsets).data(),
                    self.value(*modulation).data(),
                    self.value(*kernel).data(),
                    samples,
                    g.data(),
                    geom,
                );
                res.push(shaped(*x, dg.x)?);
                res.push(shaped(*offsets, dg.offsets)?);
                res.push(shaped(*modulation, dg.modulation)?);
                res.push(shaped(*kernel, dg.kernel)?);
                if let Some(b) = bias {
                    res.push(shaped(*b, dg.bias)?);
                }
            }
            Op::GatherPixels { x, pixels } => {
                let (c, h, w) = self.value(*x).chw()?;
                let mut d = vec![0.0; c * h * w];
                for (i, &p) in pixels.iter().enumerate() {
                    for ch in 0..c {
                        d[ch * h * w + p] += g.data()[i * c + ch];
                    }
                }
                res.push(shaped(*x, d)?);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let bt = transpose(tb.data(), k, m);
                    res.push(shaped(*a, matmul(g.data(), &bt, n, m, k))?);
                }
                if self.rg(*b) {
                    let at = transpose(ta.data(), n, k);
                    res.push(shaped(*b, matmul(&at, g.data(), k, n, m))?);
                }
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = backward(&vals, out, g);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        same_shape("custom backward", self.value(v), &gv)?;
                        res.push((v, gv));
                    }
                }
            }
        }
        Ok(res)
    }
}

/// Gradients produced by one backward pass.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(Var, String)>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a bound parameter, if it received one.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(_, n)| n == name)
            .and_then(|(v, _)| self.wrt(*v))
    }

    /// Add every parameter gradient into `store`. Frozen parameters are skipped.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (v, name) in &self.params {
            if let Some(g) = self.wrt(*v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}
