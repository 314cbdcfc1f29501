//! Direct 2D convolution kernels (forward and backward).
//!
//! Layouts: input (N, Cin, H, W), weight (Cout, Cin/groups, Kh, Kw),
//! bias (Cout, 1, 1, 1). Zero padding only. The 1x1 stride-1 case is the
//! hottest path in the model and gets its own loop.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn pointwise() -> Self {
        Conv2dSpec { stride: 1, pad: 0, groups: 1 }
    }
}

pub fn conv2d_out_shape(x: &Tensor, w: &Tensor, spec: Conv2dSpec) -> Result<[usize; 4]> {
    let [n, cin, h, wd] = x.shape();
    let [cout, cin_g, kh, kw] = w.shape();
    if spec.stride == 0 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
        return Err(Error::dim(
            "channels",
            format!("groups {} must divide Cin {} and Cout {}", spec.groups, cin, cout),
        ));
    }
    if cin_g != cin / spec.groups {
        return Err(Error::dim(
            "channels",
            format!("weight expects Cin/groups = {}, input has {}", cin_g, cin / spec.groups),
        ));
    }
    if h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw {
        return Err(Error::dim(
            "spatial",
            format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * spec.pad, wd + 2 * spec.pad),
        ));
    }
    let oh = (h + 2 * spec.pad - kh) / spec.stride + 1;
    let ow = (wd + 2 * spec.pad - kw) / spec.stride + 1;
    Ok([n, cout, oh, ow])
}

pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
    let out_shape = conv2d_out_shape(x, w, spec)?;
    let [n, cin, h, wd] = x.shape();
    let [cout, cin_g, kh, kw] = w.shape();
    if let Some(b) = b {
        if b.shape() != [cout, 1, 1, 1] {
            return Err(Error::dim("bias", format!("bias shape {:?}, want [{}, 1, 1, 1]", b.shape(), cout)));
        }
    }
    let [_, _, oh, ow] = out_shape;
    let mut out = Tensor::zeros(out_shape);

    // 1x1 stride-1 unpadded conv == per-pixel channel mix.
    if kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0 && spec.groups == 1 {
        let hw = h * wd;
        let xd = x.data();
        let wdat = w.data();
        let od = out.data_mut();
        for ni in 0..n {
            for co in 0..cout {
                let orow = &mut od[(ni * cout + co) * hw..(ni * cout + co + 1) * hw];
                if let Some(b) = b {
                    orow.fill(b.data()[co]);
                }
                for ci in 0..cin {
                    let k = wdat[co * cin + ci];
                    if k == 0.0 {
                        continue;
                    }
                    let xrow = &xd[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
                    for (o, &xv) in orow.iter_mut().zip(xrow.iter()) {
                        *o += k * xv;
                    }
                }
            }
        }
        return Ok(out);
    }

    let cout_g = cout / spec.groups;
    for ni in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            let bias = b.map_or(0.0, |b| b.data()[co]);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias;
                    for ci_l in 0..cin_g {
                        let ci = g * cin_g + ci_l;
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(ni, ci, iy as usize, ix as usize) * w.at(co, ci_l, ky, kx);
                            }
                        }
                    }
                    *out.at_mut(ni, co, oy, ox) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of conv2d w.r.t. input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    spec: Conv2dSpec,
    d_out: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let [n, cin, h, wd] = x.shape();
    let [cout, cin_g, kh, kw] = w.shape();
    let [_, _, oh, ow] = d_out.shape();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = has_bias.then(|| Tensor::zeros([cout, 1, 1, 1]));

    if kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0 && spec.groups == 1 {
        let hw = h * wd;
        let xd = x.data();
        let wdat = w.data();
        let god = d_out.data();
        for ni in 0..n {
            for co in 0..cout {
                let grow = &god[(ni * cout + co) * hw..(ni * cout + co + 1) * hw];
                if let Some(db) = db.as_mut() {
                    db.data_mut()[co] += grow.iter().sum::<f32>();
                }
                for ci in 0..cin {
                    let xrow = &xd[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
                    let k = wdat[co * cin + ci];
                    let mut wacc = 0.0f32;
                    let dxrow = &mut dx.data_mut()[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
                    for ((dxv, &g), &xv) in dxrow.iter_mut().zip(grow.iter()).zip(xrow.iter()) {
                        *dxv += k * g;
                        wacc += g * xv;
                    }
                    dw.data_mut()[co * cin + ci] += wacc;
                }
            }
        }
        return (dx, dw, db);
    }

    let cout_g = cout / spec.groups;
    for ni in 0..n {
        for co in 0..cout {
            let g = co / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = d_out.at(ni, co, oy, ox);
                    if let Some(db) = db.as_mut() {
                        db.data_mut()[co] += go;
                    }
                    for ci_l in 0..cin_g {
                        let ci = g * cin_g + ci_l;
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                *dx.at_mut(ni, ci, iy as usize, ix as usize) += go * w.at(co, ci_l, ky, kx);
                                *dw.at_mut(co, ci_l, ky, kx) += go * x.at(ni, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution. Weight layout (Cin, Cout, Kh, Kw);
/// output spatial dims are (in - 1) * stride + k - 2 * pad.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [n, cin, h, wd] = x.shape();
    let [wcin, cout, kh, kw] = w.shape();
    if wcin != cin {
        return Err(Error::dim("channels", format!("weight expects Cin {}, input has {}", wcin, cin)));
    }
    if stride == 0 {
        return Err(Error::Config("conv_transpose2d stride must be >= 1".into()));
    }
    let oh = (h - 1) * stride + kh;
    let ow = (wd - 1) * stride + kw;
    if oh < 2 * pad || ow < 2 * pad {
        return Err(Error::dim("spatial", format!("padding {} too large for output {}x{}", pad, oh, ow)));
    }
    let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
    if let Some(b) = b {
        if b.shape() != [cout, 1, 1, 1] {
            return Err(Error::dim("bias", format!("bias shape {:?}, want [{}, 1, 1, 1]", b.shape(), cout)));
        }
    }
    let mut out = Tensor::zeros([n, cout, oh, ow]);
    if let Some(b) = b {
        for ni in 0..n {
            for co in 0..cout {
                let hw = oh * ow;
                let start = (ni * cout + co) * hw;
                out.data_mut()[start..start + hw].fill(b.data()[co]);
            }
        }
    }
    for ni in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.at(ni, ci, iy, ix);
                    if xv == 0.0 {
                        continue;
                    }
                    for co in 0..cout {
                        for ky in 0..kh {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                *out.at_mut(ni, co, oy as usize, ox as usize) += xv * w.at(ci, co, ky, kx);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    stride: usize,
    pad: usize,
    d_out: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let [n, cin, h, wd] = x.shape();
    let [_, cout, kh, kw] = w.shape();
    let [_, _, oh, ow] = d_out.shape();
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = has_bias.then(|| Tensor::zeros([cout, 1, 1, 1]));

    if let Some(db) = db.as_mut() {
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        db.data_mut()[co] += d_out.at(ni, co, oy, ox);
                    }
                }
            }
        }
    }
    for ni in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.at(ni, ci, iy, ix);
                    let mut acc = 0.0f32;
                    for co in 0..cout {
                        for ky in 0..kh {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                let go = d_out.at(ni, co, oy as usize, ox as usize);
                                acc += go * w.at(ci, co, ky, kx);
                                *dw.at_mut(ci, co, ky, kx) += go * xv;
                            }
                        }
                    }
                    *dx.at_mut(ni, ci, iy, ix) += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn pointwise_identity_kernel_passes_input_through() {
        // 1x1 conv, Cin = Cout = 2, identity mixing matrix, zero bias.
        let mut rng = Rng::seed_from(1);
        let x = Tensor::rand_uniform([2, 2, 3, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::from_vec([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d(&x, &w, None, Conv2dSpec::pointwise()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn ones_kernel_counts_neighbourhood() {
        // 3x3 all-ones kernel on a 3x3 all-ones image, pad 1: center 9, corners 4, edges 6.
        let x = Tensor::full([1, 1, 3, 3], 1.0);
        let w = Tensor::full([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, None, Conv2dSpec { stride: 1, pad: 1, groups: 1 }).unwrap();
        let expect = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(y.data(), &expect);
    }

    #[test]
    fn depthwise_channels_stay_independent() {
        let mut rng = Rng::seed_from(2);
        let c = 3;
        let x0 = Tensor::rand_uniform([1, c, 5, 5], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform([c, 1, 3, 3], -1.0, 1.0, &mut rng);
        let spec = Conv2dSpec { stride: 1, pad: 1, groups: c };
        let y0 = conv2d(&x0, &w, None, spec).unwrap();
        // Perturb channel 0 only; channels 1.. must not move.
        let mut x1 = x0.clone();
        for yy in 0..5 {
            for xx in 0..5 {
                *x1.at_mut(0, 0, yy, xx) += 0.37;
            }
        }
        let y1 = conv2d(&x1, &w, None, spec).unwrap();
        for ci in 1..c {
            for yy in 0..5 {
                for xx in 0..5 {
                    assert_eq!(y0.at(0, ci, yy, xx), y1.at(0, ci, yy, xx));
                }
            }
        }
    }

    #[test]
    fn conv_linearity_in_input() {
        let mut rng = Rng::seed_from(3);
        let x = Tensor::rand_uniform([1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let y = Tensor::rand_uniform([1, 2, 6, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::rand_uniform([3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let spec = Conv2dSpec { stride: 1, pad: 1, groups: 1 };
        let (a, b) = (0.7f32, -1.3f32);
        let mixed = Tensor::from_vec(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(xv, yv)| a * xv + b * yv).collect(),
        )
        .unwrap();
        let lhs = conv2d(&mixed, &w, None, spec).unwrap();
        let cx = conv2d(&x, &w, None, spec).unwrap();
        let cy = conv2d(&y, &w, None, spec).unwrap();
        for i in 0..lhs.numel() {
            assert!((lhs[i] - (a * cx[i] + b * cy[i])).abs() < 1e-5);
        }
    }

    #[test]
    fn transpose_shape_and_corner_block() {
        // (1,1,2,2) -> (1,1,4,4) with stride 2, kernel 2.
        let mut x = Tensor::zeros([1, 1, 2, 2]);
        *x.at_mut(0, 0, 0, 0) = 1.0;
        let w = Tensor::full([1, 1, 2, 2], 1.0);
        let y = conv_transpose2d(&x, &w, None, 2, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 4, 4]);
        // A single 1 at (0,0) paints a 2x2 block of ones top-left.
        let mut expect = Tensor::zeros([1, 1, 4, 4]);
        *expect.at_mut(0, 0, 0, 0) = 1.0;
        *expect.at_mut(0, 0, 0, 1) = 1.0;
        *expect.at_mut(0, 0, 1, 0) = 1.0;
        *expect.at_mut(0, 0, 1, 1) = 1.0;
        assert_eq!(y, expect);
    }

    #[test]
    fn transpose_zero_input_broadcasts_bias() {
        let x = Tensor::zeros([1, 2, 3, 3]);
        let mut rng = Rng::seed_from(4);
        let w = Tensor::rand_uniform([2, 3, 2, 2], -1.0, 1.0, &mut rng);
        let b = Tensor::from_vec([3, 1, 1, 1], vec![0.1, -0.2, 0.3]).unwrap();
        let y = conv_transpose2d(&x, &w, Some(&b), 2, 0).unwrap();
        assert_eq!(y.shape(), [1, 3, 6, 6]);
        for co in 0..3 {
            for yy in 0..6 {
                for xx in 0..6 {
                    assert_eq!(y.at(0, co, yy, xx), b.data()[co]);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_names_axis() {
        let x = Tensor::zeros([1, 3, 4, 4]);
        let w = Tensor::zeros([2, 2, 1, 1]);
        let err = conv2d(&x, &w, None, Conv2dSpec::pointwise()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("channels"), "got {msg}");
    }
}
