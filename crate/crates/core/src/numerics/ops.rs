//! Layer primitives: forward passes and their exact reverse-mode gradients.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::par;

/// Guard added to norms so that normalizing a zero vector is total.
pub const NORM_EPS: f64 = 1e-8;

/// Valid (no padding), stride-1 cross-correlation plus per-channel bias.
///
/// `input` is `[C_in, H, W]`, `kernels` is `[C_out, C_in, K, K]`, and the
/// result is `[C_out, H-K+1, W-K+1]`.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (cin, h, w) = input.dims3("conv2d_forward")?;
    let (cout, k) = conv_kernel_dims(kernels, cin, bias.len(), "conv2d_forward")?;
    if k > h || k > w {
        return Err(shape_err(
            "conv2d_forward",
            format!("kernel {k} no larger than input {h}x{w}"),
            k,
        ));
    }
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut out = Tensor::zeros(vec![cout, oh, ow]);
    let x = input.data();
    let kd = kernels.data();
    par::for_each_chunk_mut(out.data_mut(), oh * ow, |co, plane| {
        plane.fill(bias[co]);
        for ci in 0..cin {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = kd[((co * cin + ci) * k + ky) * k + kx];
                    for oy in 0..oh {
                        let row = &src[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(row) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d_forward`] given the upstream gradient on its output.
///
/// Returns `(d_input, d_kernels, d_bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (cin, h, w) = input.dims3("conv2d_backward")?;
    let cout = kernels.shape().first().copied().unwrap_or(0);
    let (cout, k) = conv_kernel_dims(kernels, cin, cout, "conv2d_backward")?;
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    if upstream.shape() != [cout, oh, ow] {
        return Err(shape_err(
            "conv2d_backward",
            format!("upstream [{cout}, {oh}, {ow}]"),
            format!("{:?}", upstream.shape()),
        ));
    }
    let x = input.data();
    let g = upstream.data();
    let kd = kernels.data();

    let d_bias: Vec<f64> = (0..cout)
        .map(|co| g[co * oh * ow..(co + 1) * oh * ow].iter().sum())
        .collect();

    let mut d_kernels = Tensor::zeros(kernels.shape().to_vec());
    par::for_each_chunk_mut(d_kernels.data_mut(), cin * k * k, |co, dk| {
        let gp = &g[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let row = &src[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                        let grow = &gp[oy * ow..(oy + 1) * ow];
                        acc += row.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dk[(ci * k + ky) * k + kx] = acc;
                }
            }
        }
    });

    let mut d_input = Tensor::zeros(vec![cin, h, w]);
    par::for_each_chunk_mut(d_input.data_mut(), h * w, |ci, dplane| {
        for co in 0..cout {
            let gp = &g[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = kd[((co * cin + ci) * k + ky) * k + kx];
                    for oy in 0..oh {
                        let dst = &mut dplane[(oy + ky) * w + kx..(oy + ky) * w + kx + ow];
                        let grow = &gp[oy * ow..(oy + 1) * ow];
                        for (d, s) in dst.iter_mut().zip(grow) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    });
    Ok((d_input, d_kernels, d_bias))
}

fn conv_kernel_dims(
    kernels: &Tensor,
    cin: usize,
    bias_len: usize,
    op: &'static str,
) -> Result<(usize, usize)> {
    match kernels.shape()[..] {
        [cout, kc, k1, k2] if kc == cin && k1 == k2 && cout == bias_len && k1 > 0 => Ok((cout, k1)),
        _ => Err(shape_err(
            op,
            format!("kernels [{bias_len}, {cin}, K, K] with K > 0"),
            format!("{:?}", kernels.shape()),
        )),
    }
}

/// 2x2 stride-2 max pooling.
///
/// Returns the pooled tensor and, for every output cell, the flat index of
/// the input element that won. Ties go to the first element in row-major
/// window order.
pub fn maxpool2d(input: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (c, h, w) = input.dims3("maxpool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("maxpool2d", "even height and width", format!("{h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

/// Routes each upstream gradient to the input element that won its window.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], upstream: &Tensor) -> Result<Tensor> {
    if upstream.len() != argmax.len() {
        return Err(shape_err("maxpool2d_backward", argmax.len(), upstream.len()));
    }
    let mut d = Tensor::zeros(input_shape.to_vec());
    let dd = d.data_mut();
    for (&idx, &g) in argmax.iter().zip(upstream.data()) {
        dd[idx] += g;
    }
    Ok(d)
}

/// Pointwise nonlinearity applied after a dense or convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    /// `s * tanh(x)`, codomain `(-s, s)`. tanh is held to `1 - EPSILON` in
    /// magnitude so the bounds stay open in f64 as well.
    ScaledTanh(f64),
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::ScaledTanh(s) => {
                let lim = 1.0 - f64::EPSILON;
                s * x.tanh().clamp(-lim, lim)
            }
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::ScaledTanh(s) => {
                let t = y / s;
                s * (1.0 - t * t)
            }
        }
    }

    pub fn forward(self, input: &Tensor) -> Tensor {
        let data = input.data().iter().map(|&v| self.apply(v)).collect();
        Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn backward(self, output: &Tensor, upstream: &Tensor) -> Result<Tensor> {
        if output.shape() != upstream.shape() {
            return Err(shape_err(
                "activation backward",
                format!("{:?}", output.shape()),
                format!("{:?}", upstream.shape()),
            ));
        }
        let data = output
            .data()
            .iter()
            .zip(upstream.data())
            .map(|(&y, &g)| g * self.derivative_from_output(y))
            .collect();
        Tensor::new(output.shape().to_vec(), data)
    }
}

/// `activation(W x + b)` with `W` shaped `[m, n]`.
pub fn dense_forward(
    input: &[f64],
    weights: &Tensor,
    bias: &[f64],
    activation: Activation,
) -> Result<Vec<f64>> {
    Ok(affine(input, weights, bias)?
        .into_iter()
        .map(|z| activation.apply(z))
        .collect())
}

/// `W x + b` without activation.
pub fn affine(input: &[f64], weights: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = match weights.shape()[..] {
        [m, n] => (m, n),
        _ => return Err(shape_err("dense_forward", "2-D weights [m, n]", format!("{:?}", weights.shape()))),
    };
    if n != input.len() {
        return Err(shape_err("dense_forward", format!("input of length {n}"), input.len()));
    }
    if m != bias.len() {
        return Err(shape_err("dense_forward", format!("bias of length {m}"), bias.len()));
    }
    let w = weights.data();
    Ok((0..m)
        .map(|i| {
            let row = &w[i * n..(i + 1) * n];
            bias[i] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect())
}

/// Gradients of `W x + b` given the gradient on its pre-activation output.
///
/// Returns `(d_input, d_weights, d_bias)`.
pub fn affine_backward(input: &[f64], weights: &Tensor, upstream: &[f64]) -> Result<(Vec<f64>, Tensor, Vec<f64>)> {
    let (m, n) = match weights.shape()[..] {
        [m, n] => (m, n),
        _ => return Err(shape_err("dense backward", "2-D weights", format!("{:?}", weights.shape()))),
    };
    if input.len() != n || upstream.len() != m {
        return Err(shape_err(
            "dense backward",
            format!("input {n}, upstream {m}"),
            format!("input {}, upstream {}", input.len(), upstream.len()),
        ));
    }
    let w = weights.data();
    let mut d_in = vec![0.0; n];
    let mut d_w = Vec::with_capacity(m * n);
    for (i, &g) in upstream.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        for (d, &wv) in d_in.iter_mut().zip(row) {
            *d += g * wv;
        }
        d_w.extend(input.iter().map(|&x| g * x));
    }
    Ok((d_in, Tensor::new(vec![m, n], d_w)?, upstream.to_vec()))
}

/// `v / (||v||_1 + eps)`, treating the tensor as one flat vector.
pub fn l1_normalize(v: &Tensor) -> Tensor {
    let s: f64 = v.data().iter().map(|x| x.abs()).sum::<f64>() + NORM_EPS;
    scaled(v, 1.0 / s)
}

/// `v / (||v||_2 + eps)`, treating the tensor as one flat vector.
pub fn l2_normalize(v: &Tensor) -> Tensor {
    let s = v.data().iter().map(|x| x * x).sum::<f64>().sqrt() + NORM_EPS;
    scaled(v, 1.0 / s)
}

fn scaled(v: &Tensor, k: f64) -> Tensor {
    let data = v.data().iter().map(|x| x * k).collect();
    Tensor::new(v.shape().to_vec(), data).expect("shape preserved")
}

/// Gradient of [`l1_normalize`] at `v`. The subgradient of `|x|` at 0 is 0.
pub fn l1_normalize_backward(v: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    same_shape("l1_normalize backward", v, upstream)?;
    let s: f64 = v.data().iter().map(|x| x.abs()).sum::<f64>() + NORM_EPS;
    let gv: f64 = upstream.dot(v);
    let data = v
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| g / s - sign(x) * gv / (s * s))
        .collect();
    Tensor::new(v.shape().to_vec(), data)
}

/// Gradient of [`l2_normalize`] at `v`.
pub fn l2_normalize_backward(v: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    same_shape("l2_normalize backward", v, upstream)?;
    let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let s = norm + NORM_EPS;
    let gv = upstream.dot(v);
    // d(1/s)/dv = -v / (norm * s^2); zero at the origin.
    let coef = if norm > 0.0 { gv / (norm * s * s) } else { 0.0 };
    let data = v
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| g / s - x * coef)
        .collect();
    Tensor::new(v.shape().to_vec(), data)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
}

/// Softmax with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `p <- p - lr * g`, refusing the whole step if any gradient is non-finite.
pub fn sgd_step(params: &mut [f64], grads: &[f64], learning_rate: f64) -> Result<()> {
    check_learning_rate(learning_rate)?;
    if params.len() != grads.len() {
        return Err(shape_err("sgd_step", params.len(), grads.len()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { layer: 0 });
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= learning_rate * g;
    }
    Ok(())
}

pub(crate) fn check_learning_rate(lr: f64) -> Result<()> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    Ok(())
}
