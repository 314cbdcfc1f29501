//! Finite-difference checks for the composed model graphs.
//!
//! Parameters are bound through a preset [`Binder`] so the harness can
//! perturb them like any other input. The full-model entry differences
//! the strongest coordinate of every tensor; differencing all ~80k
//! elements would not fit the runtime budget.

use crate::error::Result;
use crate::gradcheck::{fd_check, Build, FdMode, OpReport, FD_STEP, MODEL_TOLERANCE, OP_TOLERANCE};
use crate::params::{Binder, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::fuse::{fused_attention, guided_msa};
use super::illum::{estimator_forward, illumination_prior};
use super::net::{block_forward, model_forward_var};
use super::ss2d::ss2d_block;
use super::weights::{Init, ModelWeights};
use super::ModelConfig;

const CASES: usize = 20;

fn param_tensors(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

fn report(name: &'static str, tolerance: f64, errors: Vec<f64>) -> OpReport {
    OpReport { name, cases: errors.len(), worst_rel_l2: errors.iter().copied().fold(0.0, f64::max), tolerance }
}

fn check_fused_attention(seed: u64, guided: bool) -> Result<OpReport> {
    let mut rng = Rng::seed_from(seed);
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(case as u64);
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed.wrapping_add(1000 + case as u64));
        let w = init.attention("ifa", 4, 1)?;
        let n = store.len();
        let mut inputs = param_tensors(&store);
        inputs.push(Tensor::rand_uniform([1, 4, 3, 3], -1.0, 1.0, &mut r));
        inputs.push(Tensor::rand_uniform([1, 4, 3, 3], -1.0, 1.0, &mut r));
        let build: Build = &|tape: &mut Tape, vars: &[Var]| {
            let mut binder = Binder::preset(vars[..n].to_vec());
            if guided {
                guided_msa(tape, &mut binder, &store, &w, vars[n], vars[n + 1])
            } else {
                fused_attention(tape, &mut binder, &store, &w, vars[n], vars[n + 1])
            }
        };
        errs.push(fd_check(build, &inputs, &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report(if guided { "igmsa_forward" } else { "ifa_forward" }, OP_TOLERANCE, errs))
}

fn check_estimator(seed: u64) -> Result<OpReport> {
    let mut rng = Rng::seed_from(seed);
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(case as u64);
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed.wrapping_add(2000 + case as u64));
        let w = init.estimator("ie", 8)?;
        let n = store.len();
        let mut inputs = param_tensors(&store);
        inputs.push(Tensor::rand_uniform([1, 3, 8, 8], 0.05, 0.95, &mut r));
        let build: Build = &|tape: &mut Tape, vars: &[Var]| {
            let mut binder = Binder::preset(vars[..n].to_vec());
            let prior = illumination_prior(tape, vars[n])?;
            let out = estimator_forward(tape, &mut binder, &store, &w, vars[n], prior)?;
            Ok(out.lit)
        };
        errs.push(fd_check(build, &inputs, &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("ie_forward", OP_TOLERANCE, errs))
}

fn check_ss2d_block(seed: u64) -> Result<OpReport> {
    let mut rng = Rng::seed_from(seed);
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(case as u64);
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed.wrapping_add(3000 + case as u64));
        let w = init.ss2d("ss2d", 8, 4)?;
        let n = store.len();
        let mut inputs = param_tensors(&store);
        inputs.push(Tensor::rand_uniform([1, 8, 4, 4], -1.0, 1.0, &mut r));
        let build: Build = &|tape: &mut Tape, vars: &[Var]| {
            let mut binder = Binder::preset(vars[..n].to_vec());
            ss2d_block(tape, &mut binder, &store, &w, vars[n])
        };
        errs.push(fd_check(build, &inputs, &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("ss2d_block", OP_TOLERANCE, errs))
}

fn check_block(seed: u64) -> Result<OpReport> {
    let cfg = ModelConfig {
        n_feat: 8,
        heads_base_width: 4,
        d_state_base: 4,
        ..Default::default()
    };
    let mut rng = Rng::seed_from(seed);
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(case as u64);
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed.wrapping_add(4000 + case as u64));
        let blk = init.block("blk", &cfg, 0)?;
        let n = store.len();
        let mut inputs = param_tensors(&store);
        inputs.push(Tensor::rand_uniform([1, 8, 8, 8], -1.0, 1.0, &mut r));
        inputs.push(Tensor::rand_uniform([1, 8, 8, 8], -1.0, 1.0, &mut r));
        let build: Build = &|tape: &mut Tape, vars: &[Var]| {
            let mut binder = Binder::preset(vars[..n].to_vec());
            block_forward(tape, &mut binder, &store, &blk, cfg.fusion, vars[n], vars[n + 1])
        };
        errs.push(fd_check(build, &inputs, &mut r, FD_STEP, FdMode::Elementwise)?);
    }
    Ok(report("ifssm_forward", OP_TOLERANCE, errs))
}

fn check_model(seed: u64) -> Result<OpReport> {
    let mut rng = Rng::seed_from(seed);
    let mut errs = Vec::new();
    for case in 0..CASES {
        let mut r = rng.fork(case as u64);
        let cfg = ModelConfig {
            n_feat: 8,
            heads_base_width: 4,
            d_state_base: 4,
            seed: seed.wrapping_add(5000 + case as u64),
            ..Default::default()
        };
        let weights = ModelWeights::init(cfg)?;
        let n = weights.store.len();
        let mut inputs = param_tensors(&weights.store);
        inputs.push(Tensor::rand_uniform([1, 3, 16, 16], 0.05, 0.95, &mut r));
        let build: Build = &|tape: &mut Tape, vars: &[Var]| {
            let binder = Binder::preset(vars[..n].to_vec());
            let run = model_forward_var(tape, &weights, vars[n], binder)?;
            Ok(run.enhanced)
        };
        // Strongest coordinate of every parameter tensor: checks each
        // backward rule where its signal clears the f32 rounding floor of
        // the deep forward pass.
        errs.push(fd_check(build, &inputs, &mut r, FD_STEP, FdMode::TensorTop { per_tensor: 1 })?);
    }
    Ok(report("model_forward", MODEL_TOLERANCE, errs))
}

/// Model-level entries of the gradcheck suite.
pub fn model_suite(seed: u64) -> Result<Vec<OpReport>> {
    Ok(vec![
        check_estimator(seed)?,
        check_fused_attention(seed, false)?,
        check_fused_attention(seed, true)?,
        check_ss2d_block(seed)?,
        check_block(seed)?,
        check_model(seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    // The full suite runs in the acceptance tests; here only the cheapest
    // entry, to keep unit runs quick while still exercising the plumbing.
    #[test]
    fn attention_gradients_match_finite_differences() {
        let rep = check_fused_attention(42, false).unwrap();
        assert!(rep.passed(), "worst {}", rep.worst_rel_l2);
    }
}
