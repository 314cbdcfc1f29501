//! Normalization, softmax and pointwise activations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Channel layer norm: per spatial position, normalize over C with the
/// biased variance estimator, then apply the per-channel affine.
/// Returns (output, mean, inv_std); the statistics feed the backward pass.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let [n, c, h, w] = x.shape();
    if c == 0 {
        return Err(Error::dim("channels", "layer_norm over zero channels".to_string()));
    }
    for (t, name) in [(gamma, "gamma"), (beta, "beta")] {
        if t.shape() != [c, 1, 1, 1] {
            return Err(Error::dim("channels", format!("{} shape {:?}, want [{},1,1,1]", name, t.shape(), c)));
        }
    }
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut mean = vec![0.0f32; n * hw];
    let mut inv_std = vec![0.0f32; n * hw];
    let xd = x.data();
    let od = out.data_mut();
    let g = gamma.data();
    let b = beta.data();
    for ni in 0..n {
        for p in 0..hw {
            let mut m = 0.0f32;
            for ci in 0..c {
                m += xd[(ni * c + ci) * hw + p];
            }
            m /= c as f32;
            let mut var = 0.0f32;
            for ci in 0..c {
                let d = xd[(ni * c + ci) * hw + p] - m;
                var += d * d;
            }
            var /= c as f32;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            mean[ni * hw + p] = m;
            inv_std[ni * hw + p] = inv;
            for ci in 0..c {
                let xhat = (xd[(ni * c + ci) * hw + p] - m) * inv;
                od[(ni * c + ci) * hw + p] = g[ci] * xhat + b[ci];
            }
        }
    }
    Ok((out, mean, inv_std))
}

/// Gradients for [`layer_norm`]; returns (dx, dgamma, dbeta).
pub fn layer_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f32],
    inv_std: &[f32],
    d_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(gamma.shape());
    let mut dbeta = Tensor::zeros(gamma.shape());
    let xd = x.data();
    let gd = gamma.data();
    let god = d_out.data();
    for ni in 0..n {
        for p in 0..hw {
            let m = mean[ni * hw + p];
            let inv = inv_std[ni * hw + p];
            let mut m1 = 0.0f32; // mean over channels of gamma*dy
            let mut m2 = 0.0f32; // mean over channels of gamma*dy*xhat
            for ci in 0..c {
                let idx = (ni * c + ci) * hw + p;
                let xhat = (xd[idx] - m) * inv;
                let gy = gd[ci] * god[idx];
                m1 += gy;
                m2 += gy * xhat;
                dgamma.data_mut()[ci] += god[idx] * xhat;
                dbeta.data_mut()[ci] += god[idx];
            }
            m1 /= c as f32;
            m2 /= c as f32;
            for ci in 0..c {
                let idx = (ni * c + ci) * hw + p;
                let xhat = (xd[idx] - m) * inv;
                dx.data_mut()[idx] = (gd[ci] * god[idx] - m1 - xhat * m2) * inv;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Visit every 1-D lane along `axis`: calls f(base_offset, stride, len).
fn for_each_lane(shape: [usize; 4], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let inner = stride;
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * stride + i, stride, len);
        }
    }
}

/// Numerically stable softmax along one axis (max-subtraction).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis > 3 {
        return Err(Error::Config(format!("softmax axis {} out of range", axis)));
    }
    let mut out = x.clone();
    let od = out.data_mut();
    for_each_lane(x.shape(), axis, |base, stride, len| {
        let mut max = f32::NEG_INFINITY;
        for k in 0..len {
            max = max.max(od[base + k * stride]);
        }
        let mut sum = 0.0f32;
        for k in 0..len {
            let e = (od[base + k * stride] - max).exp();
            od[base + k * stride] = e;
            sum += e;
        }
        for k in 0..len {
            od[base + k * stride] /= sum;
        }
    });
    Ok(out)
}

/// dx = y * (dy - sum(dy * y)) per lane.
pub fn softmax_backward(y: &Tensor, axis: usize, d_out: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(y.shape());
    let yd = y.data();
    let god = d_out.data();
    let dd = dx.data_mut();
    for_each_lane(y.shape(), axis, |base, stride, len| {
        let mut dot = 0.0f32;
        for k in 0..len {
            dot += god[base + k * stride] * yd[base + k * stride];
        }
        for k in 0..len {
            let i = base + k * stride;
            dd[i] = yd[i] * (god[i] - dot);
        }
    });
    dx
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s + x * s * (1.0 - s)
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// tanh-approximation gelu.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
