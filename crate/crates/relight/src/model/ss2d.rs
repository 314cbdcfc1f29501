//! The gated four-direction scan block.

use crate::error::Result;
use crate::kernels::scan::ScanDirection;
use crate::params::{Binder, ParamStore};
use crate::tape::{Tape, Var};

use super::weights::Ss2dWeights;

/// w_in -> split signal/gate; signal -> depthwise 3x3 -> silu ->
/// four-direction scan -> merge -> layer norm -> gate -> w_out.
///
/// The caller applies the pre-branch norm (`w.ln_in`); this function is
/// the scan body itself.
pub fn ss2d_block(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    w: &Ss2dWeights,
    x: Var,
) -> Result<Var> {
    let [_, _, h, wd] = tape.shape(x);
    tape.scope_begin();
    let z = w.w_in.apply(tape, binder, store, x)?;
    let signal = tape.slice_channels(z, 0, w.d_inner)?;
    let gate = tape.slice_channels(z, w.d_inner, w.d_inner)?;
    let local = w.dw.apply(tape, binder, store, signal)?;
    let act = tape.silu(local);

    let mut merged: Option<Var> = None;
    for (dir, params) in ScanDirection::ALL.into_iter().zip(&w.dirs) {
        tape.scope_begin();
        let seq = tape.unfold(act, dir);
        let a_log = binder.bind(tape, store, params.a_log);
        let d_skip = binder.bind(tape, store, params.d_skip);
        let w_dt = binder.bind(tape, store, params.w_dt);
        let b_dt = binder.bind(tape, store, params.b_dt);
        let w_bc = binder.bind(tape, store, params.w_bc);
        let y = tape.selective_scan(seq, a_log, d_skip, w_dt, b_dt, w_bc)?;
        let img = tape.fold(y, dir, h, wd)?;
        let next = match merged {
            None => img,
            Some(prev) => tape.add(prev, img)?,
        };
        tape.scope_end(&[next]);
        merged = Some(next);
    }
    let merged = merged.expect("four directions");

    let normed = w.ln.apply(tape, binder, store, merged)?;
    let gate_act = tape.silu(gate);
    let gated = tape.mul(normed, gate_act)?;
    let out = w.w_out.apply(tape, binder, store, gated)?;
    tape.scope_end(&[out]);
    Ok(out)
}
