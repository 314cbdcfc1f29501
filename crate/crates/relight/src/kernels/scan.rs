//! Selective-scan kernels and the four-direction image unfold.
//!
//! Sequences are rank-4 tensors shaped (N, D, 1, L) with D = d_inner and
//! L the token count. The recurrence per token t, channel d, state s is
//!
//! ```text
//! abar = exp(delta[t,d] * A[d,s])
//! h[t,d,s] = abar * h[t-1,d,s] + delta[t,d] * B[t,s] * x[t,d]
//! y[t,d]   = sum_s C[t,s] * h[t,d,s] + skip[d] * x[t,d]
//! ```
//!
//! with per-token delta = softplus(W_dt x + b_dt) and (B, C) = W_bc x.
//! `s6_sequential` is the normative reference; `s6_parallel` computes the
//! same recurrence by a chunked associative scan and must agree with the
//! reference to 1e-5 max-abs.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Traversal orders used by the 2D scan: row-major, column-major, and
/// their exact reversals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    RowFwd,
    RowBwd,
    ColFwd,
    ColBwd,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] =
        [ScanDirection::RowFwd, ScanDirection::RowBwd, ScanDirection::ColFwd, ScanDirection::ColBwd];

    /// Flat spatial index (row-major y*W+x) read at sequence position `t`.
    #[inline]
    pub fn source_index(self, t: usize, h: usize, w: usize) -> usize {
        let l = h * w;
        match self {
            ScanDirection::RowFwd => t,
            ScanDirection::RowBwd => l - 1 - t,
            ScanDirection::ColFwd => {
                let col = t / h;
                let row = t % h;
                row * w + col
            }
            ScanDirection::ColBwd => ScanDirection::ColFwd.source_index(l - 1 - t, h, w),
        }
    }
}

/// (N,C,H,W) -> (N,C,1,L) sequence in the given traversal order.
pub fn unfold(x: &Tensor, dir: ScanDirection) -> Tensor {
    let [n, c, h, w] = x.shape();
    let l = h * w;
    let mut out = Tensor::zeros([n, c, 1, l]);
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let src = &xd[nc * l..(nc + 1) * l];
        let dst = &mut od[nc * l..(nc + 1) * l];
        for (t, d) in dst.iter_mut().enumerate() {
            *d = src[dir.source_index(t, h, w)];
        }
    }
    out
}

/// Inverse of [`unfold`]: scatter a (N,C,1,L) sequence back to (N,C,H,W).
pub fn fold(seq: &Tensor, dir: ScanDirection, h: usize, w: usize) -> Result<Tensor> {
    let [n, c, one, l] = seq.shape();
    if one != 1 || l != h * w {
        return Err(Error::dim("length", format!("sequence shape {:?} does not fold to {}x{}", seq.shape(), h, w)));
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    let sd = seq.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let src = &sd[nc * l..(nc + 1) * l];
        let dst = &mut od[nc * l..(nc + 1) * l];
        for (t, s) in src.iter().enumerate() {
            dst[dir.source_index(t, h, w)] = *s;
        }
    }
    Ok(out)
}

/// Unfold along all four directions.
pub fn scan_expand(x: &Tensor) -> [Tensor; 4] {
    ScanDirection::ALL.map(|d| unfold(x, d))
}

/// Fold each sequence back to the image plane and sum the four maps.
pub fn scan_merge(seqs: &[Tensor; 4], h: usize, w: usize) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    for (seq, dir) in seqs.iter().zip(ScanDirection::ALL) {
        let img = fold(seq, dir, h, w)?;
        acc = Some(match acc {
            None => img,
            Some(mut a) => {
                a.same_shape(&img, "shape")?;
                for (av, iv) in a.data_mut().iter_mut().zip(img.data()) {
                    *av += iv;
                }
                a
            }
        });
    }
    Ok(acc.expect("four directions"))
}

/// Which scan kernel computes the recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScanKernel {
    #[default]
    Sequential,
    Parallel,
}

/// Chunk length for the blocked associative scan.
const SCAN_CHUNK: usize = 64;

/// Raw parameter views for one scan direction.
///
/// Shapes: a_log (D,S,1,1), d_skip (D,1,1,1), w_dt (D,D,1,1),
/// b_dt (D,1,1,1), w_bc (2S,D,1,1).
pub struct S6Params<'a> {
    pub a_log: &'a Tensor,
    pub d_skip: &'a Tensor,
    pub w_dt: &'a Tensor,
    pub b_dt: &'a Tensor,
    pub w_bc: &'a Tensor,
}

impl<'a> S6Params<'a> {
    pub fn dims(&self) -> (usize, usize) {
        let [d, s, _, _] = self.a_log.shape();
        (d, s)
    }
}

/// Per-token projections saved for the backward pass. All laid out per
/// batch then per channel/state row, time index contiguous.
pub struct S6Saved {
    pub delta: Vec<f32>, // (N, D, L)
    pub b_in: Vec<f32>,  // (N, S, L)
    pub c_out: Vec<f32>, // (N, S, L)
    pub h: Vec<f32>,     // (N, L, D, S)
}

pub struct S6Output {
    pub y: Tensor,
    pub saved: Option<Box<S6Saved>>,
}

#[inline]
fn softplus(z: f32) -> f32 {
    if z > 20.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn check_params(seq: &Tensor, p: &S6Params) -> Result<(usize, usize, usize, usize)> {
    let [n, d, one, l] = seq.shape();
    if one != 1 {
        return Err(Error::dim("height", format!("sequence must be (N,D,1,L), got {:?}", seq.shape())));
    }
    let (dd, s) = p.dims();
    if dd != d {
        return Err(Error::dim("channels", format!("a_log rows {} vs sequence channels {}", dd, d)));
    }
    if p.d_skip.shape() != [d, 1, 1, 1] {
        return Err(Error::dim("channels", format!("d_skip shape {:?}, want [{},1,1,1]", p.d_skip.shape(), d)));
    }
    if p.w_dt.shape() != [d, d, 1, 1] {
        return Err(Error::dim("channels", format!("w_dt shape {:?}, want [{d},{d},1,1]", p.w_dt.shape())));
    }
    if p.b_dt.shape() != [d, 1, 1, 1] {
        return Err(Error::dim("channels", format!("b_dt shape {:?}, want [{},1,1,1]", p.b_dt.shape(), d)));
    }
    if p.w_bc.shape() != [2 * s, d, 1, 1] {
        return Err(Error::dim("channels", format!("w_bc shape {:?}, want [{},{},1,1]", p.w_bc.shape(), 2 * s, d)));
    }
    Ok((n, d, s, l))
}

/// delta (softplus of the dt projection) and the per-token B/C rows for
/// one batch element. `xb` is the (D, L) slice of the input sequence.
fn project_tokens(
    xb: &[f32],
    p: &S6Params,
    d: usize,
    s: usize,
    l: usize,
    delta: &mut [f32],
    b_in: &mut [f32],
    c_out: &mut [f32],
) -> Result<()> {
    let w_dt = p.w_dt.data();
    let b_dt = p.b_dt.data();
    let w_bc = p.w_bc.data();
    for dp in 0..d {
        let row = &mut delta[dp * l..(dp + 1) * l];
        row.fill(b_dt[dp]);
        for di in 0..d {
            let k = w_dt[dp * d + di];
            if k == 0.0 {
                continue;
            }
            let xrow = &xb[di * l..(di + 1) * l];
            for (r, &xv) in row.iter_mut().zip(xrow) {
                *r += k * xv;
            }
        }
        for r in row.iter_mut() {
            *r = softplus(*r);
        }
    }
    for si in 0..2 * s {
        let row = if si < s { &mut b_in[si * l..(si + 1) * l] } else { &mut c_out[(si - s) * l..(si - s + 1) * l] };
        row.fill(0.0);
        for di in 0..d {
            let k = w_bc[si * d + di];
            if k == 0.0 {
                continue;
            }
            let xrow = &xb[di * l..(di + 1) * l];
            for (r, &xv) in row.iter_mut().zip(xrow) {
                *r += k * xv;
            }
        }
    }
    for (t, v) in delta.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite delta at token {}", t % l)));
        }
    }
    Ok(())
}

fn state_matrix(p: &S6Params) -> Vec<f32> {
    // A = -exp(a_log): strictly negative, so |exp(delta*A)| < 1 for delta > 0.
    p.a_log.data().iter().map(|&v| -v.exp()).collect()
}

pub fn s6_forward(seq: &Tensor, p: &S6Params, kernel: ScanKernel, save: bool) -> Result<S6Output> {
    let (n, d, s, l) = check_params(seq, p)?;
    let a = state_matrix(p);
    let skip = p.d_skip.data();
    let mut y = Tensor::zeros([n, d, 1, l]);
    let mut saved = save.then(|| {
        Box::new(S6Saved {
            delta: vec![0.0; n * d * l],
            b_in: vec![0.0; n * s * l],
            c_out: vec![0.0; n * s * l],
            h: vec![0.0; n * l * d * s],
        })
    });

    let mut delta_buf = vec![0.0f32; d * l];
    let mut b_buf = vec![0.0f32; s * l];
    let mut c_buf = vec![0.0f32; s * l];

    for ni in 0..n {
        let xb = &seq.data()[ni * d * l..(ni + 1) * d * l];
        project_tokens(xb, p, d, s, l, &mut delta_buf, &mut b_buf, &mut c_buf)?;
        let yb = &mut y.data_mut()[ni * d * l..(ni + 1) * d * l];
        let h_out = saved.as_mut().map(|sv| &mut sv.h[ni * l * d * s..(ni + 1) * l * d * s]);
        match kernel {
            ScanKernel::Sequential => {
                scan_sequential(xb, &delta_buf, &b_buf, &c_buf, &a, skip, d, s, l, yb, h_out)?
            }
            ScanKernel::Parallel => {
                scan_parallel(xb, &delta_buf, &b_buf, &c_buf, &a, skip, d, s, l, yb, h_out)?
            }
        }
        if let Some(sv) = saved.as_mut() {
            sv.delta[ni * d * l..(ni + 1) * d * l].copy_from_slice(&delta_buf);
            sv.b_in[ni * s * l..(ni + 1) * s * l].copy_from_slice(&b_buf);
            sv.c_out[ni * s * l..(ni + 1) * s * l].copy_from_slice(&c_buf);
        }
    }
    Ok(S6Output { y, saved })
}

#[allow(clippy::too_many_arguments)]
fn scan_sequential(
    xb: &[f32],
    delta: &[f32],
    b_in: &[f32],
    c_out: &[f32],
    a: &[f32],
    skip: &[f32],
    d: usize,
    s: usize,
    l: usize,
    y: &mut [f32],
    mut h_out: Option<&mut [f32]>,
) -> Result<()> {
    let mut h = vec![0.0f32; d * s];
    for t in 0..l {
        for di in 0..d {
            let dt = delta[di * l + t];
            let xv = xb[di * l + t];
            let dtx = dt * xv;
            let hrow = &mut h[di * s..(di + 1) * s];
            let arow = &a[di * s..(di + 1) * s];
            let mut acc = skip[di] * xv;
            for si in 0..s {
                let abar = (dt * arow[si]).exp();
                hrow[si] = abar * hrow[si] + dtx * b_in[si * l + t];
                acc += c_out[si * l + t] * hrow[si];
            }
            if !acc.is_finite() {
                return Err(Error::Numeric(format!("non-finite scan output at token {}", t)));
            }
            y[di * l + t] = acc;
            if let Some(hh) = h_out.as_deref_mut() {
                hh[(t * d + di) * s..(t * d + di + 1) * s].copy_from_slice(hrow);
            }
        }
    }
    Ok(())
}

/// Affine-map composition for the scan monoid: applying (a1,b1) then
/// (a2,b2) to a state gives h -> a2*(a1*h + b1) + b2.
#[inline]
pub fn affine_compose(first: (f32, f32), second: (f32, f32)) -> (f32, f32) {
    (second.0 * first.0, second.0 * first.1 + second.1)
}

/// Blocked work-efficient inclusive scan of h[t] = a[t]*h[t-1] + b[t].
///
/// Phase 1 scans each chunk locally from a zero state while recording the
/// running products of `a`; phase 2 carries chunk summaries sequentially;
/// phase 3 adds the carried state back into each chunk. In exact
/// arithmetic this equals the sequential recurrence.
fn affine_scan_chunked(a: &mut [f32], b: &mut [f32]) {
    let l = a.len();
    let mut t = 0;
    while t < l {
        let end = (t + SCAN_CHUNK).min(l);
        let mut run_h = 0.0f32;
        let mut run_a = 1.0f32;
        for i in t..end {
            run_h = a[i] * run_h + b[i];
            run_a *= a[i];
            b[i] = run_h; // local inclusive state
            a[i] = run_a; // prefix product within chunk
        }
        t = end;
    }
    // Carry chunk summaries, then broadcast into each chunk.
    let mut carry = 0.0f32;
    let mut t = 0;
    while t < l {
        let end = (t + SCAN_CHUNK).min(l);
        let next_carry = a[end - 1] * carry + b[end - 1];
        if carry != 0.0 {
            for i in t..end {
                b[i] += a[i] * carry;
            }
        }
        carry = next_carry;
        t = end;
    }
}

#[allow(clippy::too_many_arguments)]
fn scan_parallel(
    xb: &[f32],
    delta: &[f32],
    b_in: &[f32],
    c_out: &[f32],
    a: &[f32],
    skip: &[f32],
    d: usize,
    s: usize,
    l: usize,
    y: &mut [f32],
    mut h_out: Option<&mut [f32]>,
) -> Result<()> {
    for di in 0..d {
        let xrow = &xb[di * l..(di + 1) * l];
        let yrow = &mut y[di * l..(di + 1) * l];
        for (yv, &xv) in yrow.iter_mut().zip(xrow) {
            *yv = skip[di] * xv;
        }
    }
    let mut abuf = vec![0.0f32; l];
    let mut bbuf = vec![0.0f32; l];
    for di in 0..d {
        let drow = &delta[di * l..(di + 1) * l];
        let xrow = &xb[di * l..(di + 1) * l];
        for si in 0..s {
            let av = a[di * s + si];
            let brow = &b_in[si * l..(si + 1) * l];
            for t in 0..l {
                abuf[t] = (drow[t] * av).exp();
                // Same product order as the sequential kernel so L = 1 is
                // bitwise identical.
                bbuf[t] = (drow[t] * xrow[t]) * brow[t];
            }
            affine_scan_chunked(&mut abuf, &mut bbuf);
            let crow = &c_out[si * l..(si + 1) * l];
            let yrow = &mut y[di * l..(di + 1) * l];
            for t in 0..l {
                yrow[t] += crow[t] * bbuf[t];
            }
            if let Some(hh) = h_out.as_deref_mut() {
                for t in 0..l {
                    hh[(t * d + di) * s + si] = bbuf[t];
                }
            }
        }
        let yrow = &y[di * l..(di + 1) * l];
        for (t, v) in yrow.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite scan output at token {}", t)));
            }
        }
    }
    Ok(())
}

/// Convenience wrapper: the normative sequential recurrence.
pub fn s6_sequential(seq: &Tensor, p: &S6Params) -> Result<Tensor> {
    Ok(s6_forward(seq, p, ScanKernel::Sequential, false)?.y)
}

/// Convenience wrapper: the chunked associative-scan kernel.
pub fn s6_parallel(seq: &Tensor, p: &S6Params) -> Result<Tensor> {
    Ok(s6_forward(seq, p, ScanKernel::Parallel, false)?.y)
}

pub struct S6Grads {
    pub dx: Tensor,
    pub da_log: Tensor,
    pub dd_skip: Tensor,
    pub dw_dt: Tensor,
    pub db_dt: Tensor,
    pub dw_bc: Tensor,
}

/// Reverse-mode gradients through the selective scan.
pub fn s6_backward(seq: &Tensor, p: &S6Params, saved: &S6Saved, dy: &Tensor) -> S6Grads {
    let [n, d, _, l] = seq.shape();
    let (_, s) = p.dims();
    let a = state_matrix(p);
    let skip = p.d_skip.data();
    let w_dt = p.w_dt.data();
    let w_bc = p.w_bc.data();

    let mut dx = Tensor::zeros(seq.shape());
    let mut da = vec![0.0f32; d * s]; // dL/dA, chained to a_log at the end
    let mut dd_skip = Tensor::zeros(p.d_skip.shape());
    let mut dw_dt = Tensor::zeros(p.w_dt.shape());
    let mut db_dt = Tensor::zeros(p.b_dt.shape());
    let mut dw_bc = Tensor::zeros(p.w_bc.shape());

    let mut d_delta = vec![0.0f32; d * l];
    let mut d_bc = vec![0.0f32; 2 * s * l];

    for ni in 0..n {
        let xb = &seq.data()[ni * d * l..(ni + 1) * d * l];
        let dyb = &dy.data()[ni * d * l..(ni + 1) * d * l];
        let delta = &saved.delta[ni * d * l..(ni + 1) * d * l];
        let b_in = &saved.b_in[ni * s * l..(ni + 1) * s * l];
        let c_out = &saved.c_out[ni * s * l..(ni + 1) * s * l];
        let h = &saved.h[ni * l * d * s..(ni + 1) * l * d * s];
        d_delta.fill(0.0);
        d_bc.fill(0.0);
        let mut dh = vec![0.0f32; d * s];
        let dxb = &mut dx.data_mut()[ni * d * l..(ni + 1) * d * l];

        for t in (0..l).rev() {
            for di in 0..d {
                let g = dyb[di * l + t];
                let xv = xb[di * l + t];
                let dt = delta[di * l + t];
                let dtx = dt * xv;
                let hrow = &h[(t * d + di) * s..(t * d + di + 1) * s];
                let dhrow = &mut dh[di * s..(di + 1) * s];
                let arow = &a[di * s..(di + 1) * s];
                let darow = &mut da[di * s..(di + 1) * s];

                // y_t = sum_s C_t[s] h_t[d,s] + skip[d] x_t[d]
                let mut dxv = g * skip[di];
                dd_skip.data_mut()[di] += g * xv;
                let mut ddelta_acc = 0.0f32;
                for si in 0..s {
                    let mut dh_ds = dhrow[si] + g * c_out[si * l + t];
                    d_bc[(s + si) * l + t] += g * hrow[si];

                    // h_t = abar h_{t-1} + delta B x
                    let abar = (dt * arow[si]).exp();
                    let h_prev = if t > 0 { h[((t - 1) * d + di) * s + si] } else { 0.0 };
                    let b_ts = b_in[si * l + t];
                    darow[si] += dh_ds * abar * dt * h_prev;
                    ddelta_acc += dh_ds * (abar * arow[si] * h_prev + b_ts * xv);
                    d_bc[si * l + t] += dh_ds * dtx;
                    dxv += dh_ds * dt * b_ts;
                    dh_ds *= abar;
                    dhrow[si] = dh_ds;
                }
                d_delta[di * l + t] = ddelta_acc;
                dxb[di * l + t] += dxv;
            }
        }

        // delta = softplus(z): dz = d_delta * sigmoid(z), sigmoid(z) = 1 - exp(-delta).
        for (dd, &dv) in d_delta.iter_mut().zip(delta.iter()) {
            *dd *= 1.0 - (-dv).exp();
        }
        // z = W_dt x + b_dt
        for dp in 0..d {
            let dzrow = &d_delta[dp * l..(dp + 1) * l];
            db_dt.data_mut()[dp] += dzrow.iter().sum::<f32>();
            for di in 0..d {
                let xrow = &xb[di * l..(di + 1) * l];
                let mut wacc = 0.0f32;
                let k = w_dt[dp * d + di];
                let dxrow = &mut dxb[di * l..(di + 1) * l];
                for ((dxv, &dz), &xv) in dxrow.iter_mut().zip(dzrow).zip(xrow) {
                    *dxv += k * dz;
                    wacc += dz * xv;
                }
                dw_dt.data_mut()[dp * d + di] += wacc;
            }
        }
        // (B, C) = W_bc x
        for r in 0..2 * s {
            let drow = &d_bc[r * l..(r + 1) * l];
            for di in 0..d {
                let xrow = &xb[di * l..(di + 1) * l];
                let mut wacc = 0.0f32;
                let k = w_bc[r * d + di];
                let dxrow = &mut dxb[di * l..(di + 1) * l];
                for ((dxv, &dr), &xv) in dxrow.iter_mut().zip(drow).zip(xrow) {
                    *dxv += k * dr;
                    wacc += dr * xv;
                }
                dw_bc.data_mut()[r * d + di] += wacc;
            }
        }
    }

    // a_log chain: A = -exp(a_log) so dA/da_log = A.
    let mut da_log = Tensor::zeros(p.a_log.shape());
    for ((dl, &dav), &av) in da_log.data_mut().iter_mut().zip(da.iter()).zip(a.iter()) {
        *dl = dav * av;
    }

    S6Grads { dx, da_log, dd_skip, dw_dt, db_dt, dw_bc }
}
