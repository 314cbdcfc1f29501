//! Reverse-mode differentiation over a linear op tape.
//!
//! Ops execute eagerly: each builder method computes the output tensor,
//! records what backward needs, and returns a [`Var`] handle. The tape is
//! consumed by a single [`Tape::backward`] call.
//!
//! An inference-mode tape skips backward bookkeeping and supports scopes
//! that free intermediate buffers, so large images can run forward in
//! bounded memory.

use crate::error::{Error, Result};
use crate::kernels::attn;
use crate::kernels::conv::{self, Conv2dSpec};
use crate::kernels::norm;
use crate::kernels::scan::{self, S6Params, S6Saved, ScanDirection, ScanKernel};
use crate::tensor::Tensor;

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Record,
    Inference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Gelu,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation kind '{other}'"))),
        }
    }
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    ConvT2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Option<(Vec<f32>, Vec<f32>)> },
    Softmax { x: Var, axis: usize },
    Silu { x: Var },
    Gelu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MeanChannels { x: Var },
    ConcatChannels { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    DivPerHead { x: Var, alpha: Var },
    AttnScores { keys: Var, queries: Var, heads: usize },
    AttnApply { values: Var, attn: Var, heads: usize },
    Unfold { x: Var, dir: ScanDirection },
    Fold { x: Var, dir: ScanDirection },
    SelectiveScan { seq: Var, a_log: Var, d_skip: Var, w_dt: Var, b_dt: Var, w_bc: Var, saved: Option<Box<S6Saved>> },
    L1Loss { a: Var, b: Var },
}

pub struct Tape {
    values: Vec<Option<Tensor>>,
    ops: Vec<Op>,
    needs: Vec<bool>,
    mode: Mode,
    scan_kernel: ScanKernel,
    consumed: bool,
    scopes: Vec<usize>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(t) => {
            debug_assert_eq!(t.shape(), delta.shape());
            for (a, b) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
    }
}

const ALPHA_FLOOR: f32 = 1e-4;

/// Divisor clamped away from zero; sign(0) counts as positive.
fn clamp_alpha(a: f32) -> f32 {
    if a.abs() >= ALPHA_FLOOR {
        a
    } else if a < 0.0 {
        -ALPHA_FLOOR
    } else {
        ALPHA_FLOOR
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_mode(Mode::Record)
    }

    pub fn inference() -> Self {
        Tape::with_mode(Mode::Inference)
    }

    pub fn with_mode(mode: Mode) -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            mode,
            scan_kernel: ScanKernel::Sequential,
            consumed: false,
            scopes: Vec::new(),
        }
    }

    pub fn set_scan_kernel(&mut self, kernel: ScanKernel) {
        self.scan_kernel = kernel;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.values[v.0].as_ref().expect("value was freed by an inference scope")
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.value(v).shape()
    }

    /// Clone the tensor out of the tape.
    pub fn tensor(&self, v: Var) -> Tensor {
        self.value(v).clone()
    }

    fn push(&mut self, value: Tensor, op: Op, needs: bool) -> Var {
        self.values.push(Some(value));
        self.ops.push(op);
        self.needs.push(needs);
        Var(self.values.len() - 1)
    }

    fn needs_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs[v.0])
    }

    // ── Scopes (inference-mode memory control) ──────────────────────

    pub fn scope_begin(&mut self) {
        self.scopes.push(self.values.len());
    }

    /// Free every value allocated since the matching `scope_begin`, except
    /// the listed survivors. No-op on a recording tape (backward needs the
    /// values).
    pub fn scope_end(&mut self, keep: &[Var]) {
        let mark = self.scopes.pop().expect("scope_end without scope_begin");
        if self.mode != Mode::Inference {
            return;
        }
        for id in mark..self.values.len() {
            if !keep.iter().any(|v| v.0 == id) {
                self.values[id] = None;
            }
        }
    }

    // ── Graph builders ──────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let needs = self.needs_any(&ins);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, needs))
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        let needs = self.needs_any(&ins);
        Ok(self.push(out, Op::ConvT2d { x, w, b, stride, pad }, needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, mean, inv_std) = norm::layer_norm(self.value(x), self.value(gamma), self.value(beta))?;
        let needs = self.needs_any(&[x, gamma, beta]);
        let stats = (self.mode == Mode::Record).then_some((mean, inv_std));
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, stats }, needs))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = norm::softmax(self.value(x), axis)?;
        let needs = self.needs[x.0];
        Ok(self.push(out, Op::Softmax { x, axis }, needs))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(norm::silu);
        let needs = self.needs[x.0];
        self.push(out, Op::Silu { x }, needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(norm::gelu);
        let needs = self.needs[x.0];
        self.push(out, Op::Gelu { x }, needs)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        match kind {
            Activation::Silu => self.silu(x),
            Activation::Gelu => self.gelu(x),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "shape")?;
        let out = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect(),
        )?;
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "shape")?;
        let out = Tensor::from_vec(
            self.value(a).shape(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect(),
        )?;
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, needs))
    }

    /// Per-pixel mean over channels: (N,C,H,W) -> (N,1,H,W).
    pub fn mean_channels(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let hw = h * w;
        let mut out = Tensor::zeros([n, 1, h, w]);
        let xd = self.value(x).data();
        for ni in 0..n {
            for p in 0..hw {
                let mut s = 0.0f32;
                for ci in 0..c {
                    s += xd[(ni * c + ci) * hw + p];
                }
                out.data_mut()[ni * hw + p] = s / c as f32;
            }
        }
        let needs = self.needs[x.0];
        self.push(out, Op::MeanChannels { x }, needs)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.shape(a);
        let [nb, cb, hb, wb] = self.shape(b);
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::dim(
                "spatial",
                format!("concat_channels needs matching N/H/W: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let hw = ha * wa;
        let mut out = Tensor::zeros([na, ca + cb, ha, wa]);
        for ni in 0..na {
            let dst = out.data_mut();
            let off = ni * (ca + cb) * hw;
            dst[off..off + ca * hw].copy_from_slice(&self.values[a.0].as_ref().unwrap().data()[ni * ca * hw..(ni + 1) * ca * hw]);
            dst[off + ca * hw..off + (ca + cb) * hw]
                .copy_from_slice(&self.values[b.0].as_ref().unwrap().data()[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels { a, b }, needs))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if start + len > c {
            return Err(Error::dim("channels", format!("slice {}..{} out of {} channels", start, start + len, c)));
        }
        let hw = h * w;
        let mut out = Tensor::zeros([n, len, h, w]);
        for ni in 0..n {
            let src = &self.values[x.0].as_ref().unwrap().data()[(ni * c + start) * hw..(ni * c + start + len) * hw];
            out.data_mut()[ni * len * hw..(ni + 1) * len * hw].copy_from_slice(src);
        }
        let needs = self.needs[x.0];
        Ok(self.push(out, Op::SliceChannels { x, start }, needs))
    }

    /// Divide a per-head tensor (N,K,A,B) by a learnable per-head scalar
    /// (1,K,1,1). The divisor is clamped to |alpha| >= 1e-4.
    pub fn div_per_head(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let [n, k, a, b] = self.shape(x);
        if self.shape(alpha) != [1, k, 1, 1] {
            return Err(Error::dim(
                "heads",
                format!("alpha shape {:?}, want [1,{},1,1]", self.shape(alpha), k),
            ));
        }
        let mut out = Tensor::zeros([n, k, a, b]);
        let xd = self.value(x).data();
        let ad = self.value(alpha).data();
        let ab = a * b;
        for ni in 0..n {
            for ki in 0..k {
                let inv = 1.0 / clamp_alpha(ad[ki]);
                let off = (ni * k + ki) * ab;
                for i in 0..ab {
                    out.data_mut()[off + i] = xd[off + i] * inv;
                }
            }
        }
        let needs = self.needs_any(&[x, alpha]);
        Ok(self.push(out, Op::DivPerHead { x, alpha }, needs))
    }

    pub fn attn_scores(&mut self, keys: Var, queries: Var, heads: usize) -> Result<Var> {
        let out = attn::attn_scores(self.value(keys), self.value(queries), heads)?;
        let needs = self.needs_any(&[keys, queries]);
        Ok(self.push(out, Op::AttnScores { keys, queries, heads }, needs))
    }

    pub fn attn_apply(&mut self, values: Var, attn_mat: Var, heads: usize) -> Result<Var> {
        let out = attn::attn_apply(self.value(values), self.value(attn_mat), heads)?;
        let needs = self.needs_any(&[values, attn_mat]);
        Ok(self.push(out, Op::AttnApply { values, attn: attn_mat, heads }, needs))
    }

    pub fn unfold(&mut self, x: Var, dir: ScanDirection) -> Var {
        let out = scan::unfold(self.value(x), dir);
        let needs = self.needs[x.0];
        self.push(out, Op::Unfold { x, dir }, needs)
    }

    pub fn fold(&mut self, x: Var, dir: ScanDirection, h: usize, w: usize) -> Result<Var> {
        let out = scan::fold(self.value(x), dir, h, w)?;
        let needs = self.needs[x.0];
        Ok(self.push(out, Op::Fold { x, dir }, needs))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        seq: Var,
        a_log: Var,
        d_skip: Var,
        w_dt: Var,
        b_dt: Var,
        w_bc: Var,
    ) -> Result<Var> {
        let params = S6Params {
            a_log: self.value(a_log),
            d_skip: self.value(d_skip),
            w_dt: self.value(w_dt),
            b_dt: self.value(b_dt),
            w_bc: self.value(w_bc),
        };
        let save = self.mode == Mode::Record;
        let out = scan::s6_forward(self.value(seq), &params, self.scan_kernel, save)?;
        let needs = self.needs_any(&[seq, a_log, d_skip, w_dt, b_dt, w_bc]);
        Ok(self.push(
            out.y,
            Op::SelectiveScan { seq, a_log, d_skip, w_dt, b_dt, w_bc, saved: out.saved },
            needs,
        ))
    }

    /// Mean absolute error as a (1,1,1,1) scalar.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).same_shape(self.value(b), "shape")?;
        let n = self.value(a).numel() as f64;
        let sum: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum();
        let out = Tensor::from_vec([1, 1, 1, 1], vec![(sum / n) as f32])?;
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(out, Op::L1Loss { a, b }, needs))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulate d(seed . root)/d(leaf) into every reachable leaf.
    /// Consumes the tape: a second call is a usage error.
    pub fn backward(&mut self, root: Var, seed: Tensor) -> Result<Gradients> {
        if self.mode == Mode::Inference {
            return Err(Error::Usage("backward on an inference tape".into()));
        }
        if self.consumed {
            return Err(Error::Usage("backward called twice on the same tape".into()));
        }
        if seed.shape() != self.shape(root) {
            return Err(Error::dim(
                "seed",
                format!("seed shape {:?} does not match output {:?}", seed.shape(), self.shape(root)),
            ));
        }
        self.consumed = true;
        let mut slots: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        slots.resize_with(root.0 + 1, || None);
        slots[root.0] = Some(seed);

        for id in (0..=root.0).rev() {
            if !self.needs[id] {
                continue;
            }
            let Some(g) = slots[id].take() else { continue };
            self.backward_op(id, &g, &mut slots);
            slots[id] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn backward_op(&self, id: usize, g: &Tensor, slots: &mut [Option<Tensor>]) {
        let val = |v: Var| self.values[v.0].as_ref().expect("freed value in backward");
        match &self.ops[id] {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = conv::conv2d_backward(val(*x), val(*w), b.is_some(), *spec, g);
                if self.needs[x.0] {
                    accumulate(&mut slots[x.0], dx);
                }
                if self.needs[w.0] {
                    accumulate(&mut slots[w.0], dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    if self.needs[b.0] {
                        accumulate(&mut slots[b.0], db);
                    }
                }
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = conv::conv_transpose2d_backward(val(*x), val(*w), b.is_some(), *stride, *pad, g);
                if self.needs[x.0] {
                    accumulate(&mut slots[x.0], dx);
                }
                if self.needs[w.0] {
                    accumulate(&mut slots[w.0], dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    if self.needs[b.0] {
                        accumulate(&mut slots[b.0], db);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (mean, inv_std) = stats.as_ref().expect("layer_norm stats missing on a recording tape");
                let (dx, dgamma, dbeta) = norm::layer_norm_backward(val(*x), val(*gamma), mean, inv_std, g);
                if self.needs[x.0] {
                    accumulate(&mut slots[x.0], dx);
                }
                if self.needs[gamma.0] {
                    accumulate(&mut slots[gamma.0], dgamma);
                }
                if self.needs[beta.0] {
                    accumulate(&mut slots[beta.0], dbeta);
                }
            }
            Op::Softmax { x, axis } => {
                let y = self.values[id].as_ref().unwrap();
                accumulate(&mut slots[x.0], norm::softmax_backward(y, *axis, g));
            }
            Op::Silu { x } => {
                let xd = val(*x);
                let dx = Tensor::from_vec(
                    xd.shape(),
                    xd.data().iter().zip(g.data()).map(|(&v, &go)| go * norm::silu_grad(v)).collect(),
                )
                .unwrap();
                accumulate(&mut slots[x.0], dx);
            }
            Op::Gelu { x } => {
                let xd = val(*x);
                let dx = Tensor::from_vec(
                    xd.shape(),
                    xd.data().iter().zip(g.data()).map(|(&v, &go)| go * norm::gelu_grad(v)).collect(),
                )
                .unwrap();
                accumulate(&mut slots[x.0], dx);
            }
            Op::Add { a, b } => {
                if self.needs[a.0] {
                    accumulate(&mut slots[a.0], g.clone());
                }
                if self.needs[b.0] {
                    accumulate(&mut slots[b.0], g.clone());
                }
            }
            Op::Mul { a, b } => {
                if self.needs[a.0] {
                    let bv = val(*b);
                    let da = Tensor::from_vec(
                        bv.shape(),
                        g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect(),
                    )
                    .unwrap();
                    accumulate(&mut slots[a.0], da);
                }
                if self.needs[b.0] {
                    let av = val(*a);
                    let db = Tensor::from_vec(
                        av.shape(),
                        g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect(),
                    )
                    .unwrap();
                    accumulate(&mut slots[b.0], db);
                }
            }
            Op::MeanChannels { x } => {
                let [n, c, h, w] = val(*x).shape();
                let hw = h * w;
                let mut dx = Tensor::zeros([n, c, h, w]);
                for ni in 0..n {
                    for p in 0..hw {
                        let gv = g.data()[ni * hw + p] / c as f32;
                        for ci in 0..c {
                            dx.data_mut()[(ni * c + ci) * hw + p] = gv;
                        }
                    }
                }
                accumulate(&mut slots[x.0], dx);
            }
            Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = val(*a).shape();
                let cb = val(*b).shape()[1];
                let hw = h * w;
                if self.needs[a.0] {
                    let mut da = Tensor::zeros([n, ca, h, w]);
                    for ni in 0..n {
                        let src = &g.data()[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw];
                        da.data_mut()[ni * ca * hw..(ni + 1) * ca * hw].copy_from_slice(src);
                    }
                    accumulate(&mut slots[a.0], da);
                }
                if self.needs[b.0] {
                    let mut db = Tensor::zeros([n, cb, h, w]);
                    for ni in 0..n {
                        let off = ni * (ca + cb) * hw + ca * hw;
                        db.data_mut()[ni * cb * hw..(ni + 1) * cb * hw].copy_from_slice(&g.data()[off..off + cb * hw]);
                    }
                    accumulate(&mut slots[b.0], db);
                }
            }
            Op::SliceChannels { x, start } => {
                let [n, c, h, w] = val(*x).shape();
                let len = g.shape()[1];
                let hw = h * w;
                let mut dx = Tensor::zeros([n, c, h, w]);
                for ni in 0..n {
                    let dst = &mut dx.data_mut()[(ni * c + start) * hw..(ni * c + start + len) * hw];
                    dst.copy_from_slice(&g.data()[ni * len * hw..(ni + 1) * len * hw]);
                }
                accumulate(&mut slots[x.0], dx);
            }
            Op::DivPerHead { x, alpha } => {
                let [n, k, a, b] = val(*x).shape();
                let ab = a * b;
                let ad = val(*alpha).data();
                if self.needs[x.0] {
                    let mut dx = Tensor::zeros([n, k, a, b]);
                    for ni in 0..n {
                        for ki in 0..k {
                            let inv = 1.0 / clamp_alpha(ad[ki]);
                            let off = (ni * k + ki) * ab;
                            for i in 0..ab {
                                dx.data_mut()[off + i] = g.data()[off + i] * inv;
                            }
                        }
                    }
                    accumulate(&mut slots[x.0], dx);
                }
                if self.needs[alpha.0] {
                    let xd = val(*x).data();
                    let mut dalpha = Tensor::zeros([1, k, 1, 1]);
                    for ki in 0..k {
                        // Zero slope inside the clamped region.
                        if ad[ki].abs() < ALPHA_FLOOR {
                            continue;
                        }
                        let inv2 = 1.0 / (ad[ki] * ad[ki]);
                        let mut acc = 0.0f32;
                        for ni in 0..n {
                            let off = (ni * k + ki) * ab;
                            for i in 0..ab {
                                acc -= g.data()[off + i] * xd[off + i] * inv2;
                            }
                        }
                        dalpha.data_mut()[ki] = acc;
                    }
                    accumulate(&mut slots[alpha.0], dalpha);
                }
            }
            Op::AttnScores { keys, queries, heads } => {
                let (dk, dq) = attn::attn_scores_backward(val(*keys), val(*queries), *heads, g);
                if self.needs[keys.0] {
                    accumulate(&mut slots[keys.0], dk);
                }
                if self.needs[queries.0] {
                    accumulate(&mut slots[queries.0], dq);
                }
            }
            Op::AttnApply { values, attn: a, heads } => {
                let (dv, da) = attn::attn_apply_backward(val(*values), val(*a), *heads, g);
                if self.needs[values.0] {
                    accumulate(&mut slots[values.0], dv);
                }
                if self.needs[a.0] {
                    accumulate(&mut slots[a.0], da);
                }
            }
            Op::Unfold { x, dir } => {
                let [_, _, h, w] = val(*x).shape();
                accumulate(&mut slots[x.0], scan::fold(g, *dir, h, w).expect("unfold grad"));
            }
            Op::Fold { x, dir } => {
                accumulate(&mut slots[x.0], scan::unfold(g, *dir));
            }
            Op::SelectiveScan { seq, a_log, d_skip, w_dt, b_dt, w_bc, saved } => {
                let params = S6Params {
                    a_log: val(*a_log),
                    d_skip: val(*d_skip),
                    w_dt: val(*w_dt),
                    b_dt: val(*b_dt),
                    w_bc: val(*w_bc),
                };
                let saved = saved.as_ref().expect("scan state missing on a recording tape");
                let grads = scan::s6_backward(val(*seq), &params, saved, g);
                for (v, d) in [
                    (*seq, grads.dx),
                    (*a_log, grads.da_log),
                    (*d_skip, grads.dd_skip),
                    (*w_dt, grads.dw_dt),
                    (*b_dt, grads.db_dt),
                    (*w_bc, grads.dw_bc),
                ] {
                    if self.needs[v.0] {
                        accumulate(&mut slots[v.0], d);
                    }
                }
            }
            Op::L1Loss { a, b } => {
                let s = g.data()[0];
                let av = val(*a);
                let bv = val(*b);
                let n = av.numel() as f32;
                if self.needs[a.0] {
                    let da = Tensor::from_vec(
                        av.shape(),
                        av.data()
                            .iter()
                            .zip(bv.data())
                            .map(|(x, y)| s * sign0(x - y) / n)
                            .collect(),
                    )
                    .unwrap();
                    accumulate(&mut slots[a.0], da);
                }
                if self.needs[b.0] {
                    let db = Tensor::from_vec(
                        av.shape(),
                        av.data()
                            .iter()
                            .zip(bv.data())
                            .map(|(x, y)| -s * sign0(x - y) / n)
                            .collect(),
                    )
                    .unwrap();
                    accumulate(&mut slots[b.0], db);
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Sign with subgradient 0 at ties.
#[inline]
fn sign0(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn identity_graph_grad_is_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 3.0), true);
        let seed = Tensor::full([1, 1, 2, 2], 1.0);
        let mut grads = tape.backward(x, seed.clone()).unwrap();
        assert_eq!(grads.take(x).unwrap(), seed);
    }

    #[test]
    fn bilinear_rule_grad_of_w_is_x() {
        // y = w ⊙ x, seeded with ones: dL/dw = x.
        let mut tape = Tape::new();
        let mut rng = Rng::seed_from(41);
        let xv = Tensor::rand_uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let wv = Tensor::rand_uniform([1, 2, 3, 3], -1.0, 1.0, &mut rng);
        let x = tape.leaf(xv.clone(), true);
        let w = tape.leaf(wv.clone(), true);
        let y = tape.mul(w, x).unwrap();
        let mut grads = tape.backward(y, Tensor::full([1, 2, 3, 3], 1.0)).unwrap();
        assert_eq!(grads.take(w).unwrap(), xv);
        assert_eq!(grads.take(x).unwrap(), wv);
    }

    #[test]
    fn backward_twice_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 1, 1]), true);
        tape.backward(x, Tensor::zeros([1, 1, 1, 1])).unwrap();
        let err = tape.backward(x, Tensor::zeros([1, 1, 1, 1])).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn backward_on_inference_tape_is_usage_error() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::zeros([1, 1, 1, 1]), true);
        assert!(matches!(tape.backward(x, Tensor::zeros([1, 1, 1, 1])), Err(Error::Usage(_))));
    }

    #[test]
    fn seed_shape_must_match_output() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([1, 1, 2, 2]), true);
        assert!(tape.backward(x, Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn concat_slice_roundtrip_routes_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full([1, 2, 2, 2], 1.0), true);
        let b = tape.leaf(Tensor::full([1, 3, 2, 2], 2.0), true);
        let cat = tape.concat_channels(a, b).unwrap();
        let right = tape.slice_channels(cat, 2, 3).unwrap();
        let mut grads = tape.backward(right, Tensor::full([1, 3, 2, 2], 1.0)).unwrap();
        assert_eq!(grads.take(b).unwrap(), Tensor::full([1, 3, 2, 2], 1.0));
        // The unsliced side receives only zeros.
        if let Some(da) = grads.get(a) {
            assert!(da.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn l1_loss_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_vec([1, 1, 1, 2], vec![0.0, 1.0]).unwrap(), true);
        let t = tape.constant(Tensor::from_vec([1, 1, 1, 2], vec![1.0, 1.0]).unwrap());
        let l = tape.l1_loss(p, t).unwrap();
        assert!((tape.value(l)[0] - 0.5).abs() < 1e-7);

        let mut tape2 = Tape::new();
        let a = tape2.leaf(Tensor::full([1, 1, 1, 4], 0.7), true);
        let l2 = tape2.l1_loss(a, a).unwrap();
        assert_eq!(tape2.value(l2)[0], 0.0);
    }

    #[test]
    fn scope_frees_only_in_inference() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::full([1, 1, 1, 1], 2.0), false);
        tape.scope_begin();
        let y = tape.silu(x);
        let z = tape.silu(y);
        tape.scope_end(&[z]);
        let _ = tape.value(z); // kept
        let caught = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            let _ = tape.value(y);
        }));
        assert!(caught.is_err(), "freed value must not be readable");
    }

    #[test]
    fn unknown_activation_kind_is_config_error() {
        let err = "relu".parse::<Activation>().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
