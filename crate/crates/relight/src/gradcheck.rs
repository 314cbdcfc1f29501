//! Finite-difference oracles for the reverse-mode gradients.
//!
//! The checks here are what the `gradcheck` CLI subcommand and the
//! acceptance suite run: for each differentiable operation, analytic
//! gradients from the tape are compared against central finite
//! differences of a seeded scalar probe sum(seed . output), in relative
//! L2 over all inputs jointly.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;

/// Central finite difference of a scalar function, one element at a time.
/// Differences are accumulated in f64; `f` itself runs in working precision.
pub fn finite_diff_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, h: f32) -> Tensor {
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = ((fp - fm) / (2.0 * h as f64)) as f32;
    }
    grad
}

/// Graph builder: binds the given leaves and returns the output var.
pub type Build<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

pub enum FdMode {
    /// Perturb every element of every input.
    Elementwise,
    /// Central differences on a random subset of coordinates, sampled
    /// uniformly over all inputs jointly. Same conditioning per
    /// coordinate as `Elementwise`; used where full differencing does
    /// not fit the runtime budget.
    SampledElementwise { coords: usize },
    /// Central differences on the `per_tensor` strongest-gradient
    /// coordinates of every input tensor, sharpened by one Richardson
    /// step (4*fd(h/2) - fd(h))/3. Checks each backward rule where its
    /// signal is largest and cancels the h^2 truncation term, which
    /// otherwise dominates on saturated-attention weight draws.
    TensorTop { per_tensor: usize },
}

fn scalar_probe(build: Build, inputs: &[Tensor], seed: &Tensor) -> Result<f64> {
    let mut tape = Tape::with_mode(Mode::Inference);
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = build(&mut tape, &leaves)?;
    let out = tape.value(out);
    debug_assert_eq!(out.shape(), seed.shape());
    Ok(out
        .data()
        .iter()
        .zip(seed.data())
        .map(|(&o, &s)| o as f64 * s as f64)
        .sum())
}

/// One gradient check: returns the relative L2 error between the tape
/// gradients and the finite-difference oracle.
pub fn fd_check(build: Build, inputs: &[Tensor], rng: &mut Rng, h: f32, mode: FdMode) -> Result<f64> {
    // Analytic pass.
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &leaves)?;
    let out_shape = tape.shape(out);
    let seed = Tensor::rand_uniform(out_shape, -1.0, 1.0, rng);
    let mut grads = tape.backward(out, seed.clone())?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    match mode {
        FdMode::Elementwise => {
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            let mut work: Vec<Tensor> = inputs.to_vec();
            for (i, input) in inputs.iter().enumerate() {
                for e in 0..input.numel() {
                    let orig = input.data()[e];
                    work[i].data_mut()[e] = orig + h;
                    let fp = scalar_probe(build, &work, &seed)?;
                    work[i].data_mut()[e] = orig - h;
                    let fm = scalar_probe(build, &work, &seed)?;
                    work[i].data_mut()[e] = orig;
                    let fd = (fp - fm) / (2.0 * h as f64);
                    let g = analytic[i].data()[e] as f64;
                    num += (g - fd) * (g - fd);
                    den += fd * fd;
                }
            }
            Ok(num.sqrt() / den.sqrt().max(1e-12))
        }
        FdMode::SampledElementwise { coords } => {
            let sizes: Vec<usize> = inputs.iter().map(|t| t.numel()).collect();
            let total: usize = sizes.iter().sum();
            let picks = coords.min(total);
            let mut chosen = std::collections::BTreeSet::new();
            while chosen.len() < picks {
                chosen.insert(rng.below(total));
            }
            let pairs: Vec<(usize, usize)> = chosen
                .into_iter()
                .map(|flat| {
                    let mut idx = flat;
                    let mut which = 0;
                    while idx >= sizes[which] {
                        idx -= sizes[which];
                        which += 1;
                    }
                    (which, idx)
                })
                .collect();
            diff_coords(build, inputs, &seed, &analytic, &pairs, h)
        }
        FdMode::TensorTop { per_tensor } => {
            let mut pairs = Vec::new();
            for (which, g) in analytic.iter().enumerate() {
                let mut ranked: Vec<usize> = (0..g.numel()).collect();
                ranked.sort_by(|&a, &b| g.data()[b].abs().partial_cmp(&g.data()[a].abs()).unwrap());
                pairs.extend(ranked.into_iter().take(per_tensor).map(|idx| (which, idx)));
            }
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            let mut work: Vec<Tensor> = inputs.to_vec();
            for &(which, idx) in &pairs {
                let orig = inputs[which].data()[idx];
                let mut central = |step: f32| -> Result<f64> {
                    work[which].data_mut()[idx] = orig + step;
                    let fp = scalar_probe(build, &work, &seed)?;
                    work[which].data_mut()[idx] = orig - step;
                    let fm = scalar_probe(build, &work, &seed)?;
                    work[which].data_mut()[idx] = orig;
                    Ok((fp - fm) / (2.0 * step as f64))
                };
                let coarse = central(h)?;
                let fine = central(h / 2.0)?;
                let fd = (4.0 * fine - coarse) / 3.0;
                let g = analytic[which].data()[idx] as f64;
                num += (g - fd) * (g - fd);
                den += fd * fd;
            }
            Ok(num.sqrt() / den.sqrt().max(1e-12))
        }
    }
}

fn diff_coords(
    build: Build,
    inputs: &[Tensor],
    seed: &Tensor,
    analytic: &[Tensor],
    coords: &[(usize, usize)],
    h: f32,
) -> Result<f64> {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(which, idx) in coords {
        let orig = inputs[which].data()[idx];
        work[which].data_mut()[idx] = orig + h;
        let fp = scalar_probe(build, &work, seed)?;
        work[which].data_mut()[idx] = orig - h;
        let fm = scalar_probe(build, &work, seed)?;
        work[which].data_mut()[idx] = orig;
        let fd = (fp - fm) / (2.0 * h as f64);
        let g = analytic[which].data()[idx] as f64;
        num += (g - fd) * (g - fd);
        den += fd * fd;
    }
    Ok(num.sqrt() / den.sqrt().max(1e-12))
}

pub const FD_STEP: f32 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 5e-3;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub cases: usize,
    pub worst_rel_l2: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_l2 <= self.tolerance
    }
}

fn report(name: &'static str, tolerance: f64, errors: &[f64]) -> OpReport {
    OpReport {
        name,
        cases: errors.len(),
        worst_rel_l2: errors.iter().copied().fold(0.0, f64::max),
        tolerance,
    }
}

const CASES: usize = 20;

fn check_conv2d(rng: &mut Rng) -> Result<OpReport> {
    use crate::kernels::conv::Conv2dSpec;
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(case as u64);
        let n = 1 + r.below(2);
        let k = [1, 3, 5][r.below(3)];
        let stride = 1 + r.below(2);
        let pad = r.below(k.min(3));
        let depthwise = case % 3 == 2;
        let (cin, cout, groups, cin_g) = if depthwise {
            let c = 2 + r.below(3);
            (c, c, c, 1)
        } else {
            (1 + r.below(3), 1 + r.below(3), 1, 0)
        };
        let cin_g = if depthwise { cin_g } else { cin };
        let size = k + stride * (1 + r.below(3));
        let x = Tensor::rand_uniform([n, cin, size, size], -1.0, 1.0, &mut r);
        let w = Tensor::rand_uniform([cout, cin_g, k, k], -0.7, 0.7, &mut r);
        let b = Tensor::rand_uniform([cout, 1, 1, 1], -0.5, 0.5, &mut r);
        let spec = Conv2dSpec { stride, pad, groups };
        let build: Build = &move |t: &mut Tape, vars: &[Var]| t.conv2d(vars[0], vars[1], Some(vars[2]), spec);
        errs.push(fd_check(build, &[x, w, b], &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("conv2d", OP_TOLERANCE, &errs))
}

fn check_conv_transpose2d(rng: &mut Rng) -> Result<OpReport> {
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(100 + case as u64);
        let n = 1 + r.below(2);
        let cin = 1 + r.below(3);
        let cout = 1 + r.below(3);
        let (k, stride) = if case % 2 == 0 { (2, 2) } else { (3, 1 + r.below(2)) };
        let size = 2 + r.below(3);
        let x = Tensor::rand_uniform([n, cin, size, size], -1.0, 1.0, &mut r);
        let w = Tensor::rand_uniform([cin, cout, k, k], -0.7, 0.7, &mut r);
        let b = Tensor::rand_uniform([cout, 1, 1, 1], -0.5, 0.5, &mut r);
        let build: Build = &move |t: &mut Tape, vars: &[Var]| t.conv_transpose2d(vars[0], vars[1], Some(vars[2]), stride, 0);
        errs.push(fd_check(build, &[x, w, b], &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("conv_transpose2d", OP_TOLERANCE, &errs))
}

fn check_layer_norm(rng: &mut Rng) -> Result<OpReport> {
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(200 + case as u64);
        let c = 1 + r.below(6);
        let x = Tensor::rand_uniform([1 + r.below(2), c, 2 + r.below(3), 2 + r.below(3)], -2.0, 2.0, &mut r);
        let g = Tensor::rand_uniform([c, 1, 1, 1], 0.5, 1.5, &mut r);
        let b = Tensor::rand_uniform([c, 1, 1, 1], -0.5, 0.5, &mut r);
        let build: Build = &|t: &mut Tape, vars: &[Var]| t.layer_norm(vars[0], vars[1], vars[2]);
        errs.push(fd_check(build, &[x, g, b], &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("layer_norm", OP_TOLERANCE, &errs))
}

fn check_softmax(rng: &mut Rng) -> Result<OpReport> {
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(300 + case as u64);
        let axis = case % 4;
        let x = Tensor::rand_uniform(
            [1 + r.below(2), 1 + r.below(4), 1 + r.below(4), 1 + r.below(4)],
            -3.0,
            3.0,
            &mut r,
        );
        let build: Build = &move |t: &mut Tape, vars: &[Var]| t.softmax(vars[0], axis);
        errs.push(fd_check(build, &[x], &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("softmax", OP_TOLERANCE, &errs))
}

fn check_activations(rng: &mut Rng) -> Result<OpReport> {
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(400 + case as u64);
        let x = Tensor::rand_uniform([1, 1 + r.below(3), 3, 3], -3.0, 3.0, &mut r);
        let silu = case % 2 == 0;
        let build: Build = &move |t: &mut Tape, vars: &[Var]| {
            Ok(if silu { t.silu(vars[0]) } else { t.gelu(vars[0]) })
        };
        errs.push(fd_check(build, &[x], &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("activation", OP_TOLERANCE, &errs))
}

fn check_elementwise(rng: &mut Rng) -> Result<OpReport> {
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(500 + case as u64);
        let shape = [1, 1 + r.below(3), 2 + r.below(3), 2 + r.below(3)];
        let a = Tensor::rand_uniform(shape, -1.0, 1.0, &mut r);
        let b = Tensor::rand_uniform(shape, -1.0, 1.0, &mut r);
        let kind = case % 4;
        let build: Build = &move |t: &mut Tape, vars: &[Var]| match kind {
            0 => t.add(vars[0], vars[1]),
            1 => t.mul(vars[0], vars[1]),
            2 => Ok(t.mean_channels(vars[0])),
            _ => {
                let cat = t.concat_channels(vars[0], vars[1])?;
                let c = t.shape(vars[0])[1];
                t.slice_channels(cat, c / 2, c)
            }
        };
        errs.push(fd_check(build, &[a, b], &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("elementwise", OP_TOLERANCE, &errs))
}

fn check_attention_contractions(rng: &mut Rng) -> Result<OpReport> {
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(600 + case as u64);
        let heads = 1 + r.below(2);
        let dk = 1 + r.below(3);
        let c = heads * dk;
        let shape = [1 + r.below(2), c, 2 + r.below(2), 2 + r.below(2)];
        let k = Tensor::rand_uniform(shape, -1.0, 1.0, &mut r);
        let q = Tensor::rand_uniform(shape, -1.0, 1.0, &mut r);
        let v = Tensor::rand_uniform(shape, -1.0, 1.0, &mut r);
        let alpha = Tensor::rand_uniform([1, heads, 1, 1], 0.5, 1.5, &mut r);
        let build: Build = &move |t: &mut Tape, vars: &[Var]| {
            let scores = t.attn_scores(vars[0], vars[1], heads)?;
            let scaled = t.div_per_head(scores, vars[3])?;
            let attn = t.softmax(scaled, 2)?;
            t.attn_apply(vars[2], attn, heads)
        };
        errs.push(fd_check(build, &[k, q, v, alpha], &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("attention_contraction", OP_TOLERANCE, &errs))
}

fn check_selective_scan(rng: &mut Rng) -> Result<OpReport> {
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(700 + case as u64);
        let d = 2 + r.below(3);
        let s = 2 + r.below(3);
        let l = 1 + r.below(12);
        let seq = Tensor::rand_uniform([1 + r.below(2), d, 1, l], -1.0, 1.0, &mut r);
        let a_log = Tensor::rand_uniform([d, s, 1, 1], -1.0, 1.0, &mut r);
        let d_skip = Tensor::rand_uniform([d, 1, 1, 1], -1.0, 1.0, &mut r);
        let w_dt = Tensor::rand_uniform([d, d, 1, 1], -0.5, 0.5, &mut r);
        let b_dt = Tensor::rand_uniform([d, 1, 1, 1], -1.5, -0.5, &mut r);
        let w_bc = Tensor::rand_uniform([2 * s, d, 1, 1], -0.5, 0.5, &mut r);
        let build: Build = &|t: &mut Tape, v: &[Var]| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]);
        errs.push(fd_check(build, &[seq, a_log, d_skip, w_dt, b_dt, w_bc], &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("selective_scan", OP_TOLERANCE, &errs))
}

fn check_scan_geometry(rng: &mut Rng) -> Result<OpReport> {
    use crate::kernels::scan::ScanDirection;
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(800 + case as u64);
        let dir = ScanDirection::ALL[case % 4];
        let h = 1 + r.below(4);
        let w = 1 + r.below(4);
        let x = Tensor::rand_uniform([1, 1 + r.below(3), h, w], -1.0, 1.0, &mut r);
        let build: Build = &move |t: &mut Tape, vars: &[Var]| {
            let seq = t.unfold(vars[0], dir);
            let act = t.silu(seq);
            t.fold(act, dir, h, w)
        };
        errs.push(fd_check(build, &[x], &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("unfold_fold", OP_TOLERANCE, &errs))
}

fn check_l1(rng: &mut Rng) -> Result<OpReport> {
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(900 + case as u64);
        let shape = [1, 1 + r.below(3), 2 + r.below(3), 2 + r.below(3)];
        let a = Tensor::rand_uniform(shape, -1.0, 1.0, &mut r);
        // Keep |a - b| well away from the kink of |.| so the central
        // difference never straddles it.
        let b = Tensor::from_vec(
            shape,
            a.data()
                .iter()
                .map(|&v| v + if r.flip() { 1.0 } else { -1.0 } * r.uniform(0.1, 0.5))
                .collect(),
        )?;
        let build: Build = &|t: &mut Tape, vars: &[Var]| t.l1_loss(vars[0], vars[1]);
        errs.push(fd_check(build, &[a, b], &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("l1_loss", OP_TOLERANCE, &errs))
}

/// The kernel-level part of the gradcheck suite. Model-level entries
/// (attention blocks, scan block, full model) are appended by
/// [`run_suite`].
pub fn kernel_suite(seed: u64) -> Result<Vec<OpReport>> {
    let mut rng = Rng::seed_from(seed);
    Ok(vec![
        check_conv2d(&mut rng)?,
        check_conv_transpose2d(&mut rng)?,
        check_layer_norm(&mut rng)?,
        check_softmax(&mut rng)?,
        check_activations(&mut rng)?,
        check_elementwise(&mut rng)?,
        check_attention_contractions(&mut rng)?,
        check_selective_scan(&mut rng)?,
        check_scan_geometry(&mut rng)?,
        check_l1(&mut rng)?,
    ])
}

/// Full suite: kernels plus the model-level graphs.
pub fn run_suite(seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = kernel_suite(seed)?;
    reports.extend(crate::model::gradcheck::model_suite(seed)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_sum_is_ones() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.3, -0.7, 2.0]).unwrap();
        let mut f = |t: &Tensor| t.data().iter().map(|&v| v as f64).sum();
        let g = finite_diff_grad(&mut f, &x, 1e-3);
        for i in 0..3 {
            assert!((g[i] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn finite_diff_of_half_norm_sq_is_x() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap();
        let mut f = |t: &Tensor| 0.5 * t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        let g = finite_diff_grad(&mut f, &x, 1e-3);
        assert!((g[0] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn kernel_suite_is_deterministic_and_tight() {
        let a = kernel_suite(7).unwrap();
        let b = kernel_suite(7).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.worst_rel_l2, rb.worst_rel_l2, "{}", ra.name);
            assert!(ra.passed(), "{} worst {}", ra.name, ra.worst_rel_l2);
        }
    }
}
