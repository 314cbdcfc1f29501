//! Block wiring and the two-level U-shaped restorer.

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::fuse::apply_fusion;
use super::illum::{estimator_forward, illumination_prior};
use super::ss2d::ss2d_block;
use super::weights::{BlockWeights, ModelWeights};
use super::FusionMode;

/// Pre-norm residual block: fusion, scan, feed-forward.
///
/// y1 = x + Fuse(ln1(x), features)
/// y2 = y1 + ss2d(ln_in(y1))          (skipped when the scan is disabled)
/// out = y2 + ffn(ln3(y2))
pub fn block_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    blk: &BlockWeights,
    fusion: FusionMode,
    x: Var,
    features: Var,
) -> Result<Var> {
    tape.value(x).same_shape(tape.value(features), "shape")?;
    tape.scope_begin();
    let n1 = blk.ln1.apply(tape, binder, store, x)?;
    let fused = apply_fusion(tape, binder, store, fusion, blk.attn.as_ref(), n1, features)?;
    let y1 = tape.add(x, fused)?;

    let y2 = match &blk.ss2d {
        Some(scan) => {
            let n2 = scan.ln_in.apply(tape, binder, store, y1)?;
            let s = ss2d_block(tape, binder, store, scan, n2)?;
            tape.add(y1, s)?
        }
        None => y1,
    };

    let n3 = blk.ln3.apply(tape, binder, store, y2)?;
    let up = blk.ffn_up.apply(tape, binder, store, n3)?;
    let mid = tape.gelu(up);
    let down = blk.ffn_down.apply(tape, binder, store, mid)?;
    let out = tape.add(y2, down)?;
    tape.scope_end(&[out]);
    Ok(out)
}

/// Downscale the illumination features to each level of the U.
pub fn build_flu_pyramid(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    w: &ModelWeights,
    features: Var,
) -> Result<[Var; 3]> {
    let [_, _, h, wd] = tape.shape(features);
    require_div4(h, wd)?;
    let f1 = w.pyramid[0].apply(tape, binder, store, features)?;
    let f2 = w.pyramid[1].apply(tape, binder, store, f1)?;
    Ok([features, f1, f2])
}

fn require_div4(h: usize, w: usize) -> Result<()> {
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::dim(
            "spatial",
            format!("height and width must be multiples of 4, got {h}x{w}"),
        ));
    }
    Ok(())
}

/// The U-shaped restorer: embed, two encoder levels, bottleneck, two
/// decoder levels with skip fusion, output conv, residual to the lit image.
pub fn restorer_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    w: &ModelWeights,
    lit: Var,
    features: Var,
) -> Result<Var> {
    let [_, _, h, wd] = tape.shape(lit);
    require_div4(h, wd)?;
    let fusion = w.cfg.fusion;
    let pyr = build_flu_pyramid(tape, binder, store, w, features)?;

    let x0 = w.embed.apply(tape, binder, store, lit)?;
    let e0 = block_forward(tape, binder, store, &w.enc[0], fusion, x0, pyr[0])?;
    let d0 = w.down[0].apply(tape, binder, store, e0)?;
    let e1 = block_forward(tape, binder, store, &w.enc[1], fusion, d0, pyr[1])?;
    let d1 = w.down[1].apply(tape, binder, store, e1)?;
    let m = block_forward(tape, binder, store, &w.mid, fusion, d1, pyr[2])?;

    let u1 = w.up[1].apply(tape, binder, store, m)?;
    let c1 = tape.concat_channels(u1, e1)?;
    let s1 = w.skip_fuse[1].apply(tape, binder, store, c1)?;
    let de1 = block_forward(tape, binder, store, &w.dec[1], fusion, s1, pyr[1])?;

    let u0 = w.up[0].apply(tape, binder, store, de1)?;
    let c0 = tape.concat_channels(u0, e0)?;
    let s0 = w.skip_fuse[0].apply(tape, binder, store, c0)?;
    let de0 = block_forward(tape, binder, store, &w.dec[0], fusion, s0, pyr[0])?;

    let o = w.out.apply(tape, binder, store, de0)?;
    tape.add(o, lit)
}

pub struct ModelRun {
    pub binder: Binder,
    pub image: Var,
    pub enhanced: Var,
    pub lit: Var,
    pub features: Var,
    pub illum_map: Var,
}

/// Full pipeline on one input batch: estimator then restorer.
pub fn model_forward(tape: &mut Tape, weights: &ModelWeights, image: Tensor) -> Result<ModelRun> {
    let image = tape.constant(image);
    model_forward_var(tape, weights, image, Binder::new())
}

/// Same as [`model_forward`] but with a caller-controlled image var and
/// binder (the gradient checks bind parameters as perturbable leaves).
pub fn model_forward_var(
    tape: &mut Tape,
    weights: &ModelWeights,
    image: Var,
    mut binder: Binder,
) -> Result<ModelRun> {
    let store = &weights.store;
    let prior = illumination_prior(tape, image)?;
    let est = estimator_forward(tape, &mut binder, store, &weights.estimator, image, prior)?;
    let enhanced = restorer_forward(tape, &mut binder, store, weights, est.lit, est.features)?;
    Ok(ModelRun { binder, image, enhanced, lit: est.lit, features: est.features, illum_map: est.illum_map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::Rng;

    fn toy_cfg() -> ModelConfig {
        ModelConfig { n_feat: 8, heads_base_width: 4, d_state_base: 4, seed: 1, ..Default::default() }
    }

    #[test]
    fn block_preserves_shape() {
        let w = ModelWeights::init(toy_cfg()).unwrap();
        let mut rng = Rng::seed_from(11);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(Tensor::rand_uniform([1, 8, 8, 8], -1.0, 1.0, &mut rng));
        let f = tape.constant(Tensor::rand_uniform([1, 8, 8, 8], -1.0, 1.0, &mut rng));
        let out = block_forward(&mut tape, &mut binder, &w.store, &w.enc[0], w.cfg.fusion, x, f).unwrap();
        assert_eq!(tape.shape(out), [1, 8, 8, 8]);
    }

    #[test]
    fn pure_residual_block_is_identity() {
        // Scan disabled, fusion and ffn zeroed: out = x exactly.
        let cfg = ModelConfig { ss2d_enabled: false, ..toy_cfg() };
        let mut w = ModelWeights::init(cfg).unwrap();
        for name in ["ifvm.enc0.ifa.proj.w", "ifvm.enc0.ifa.proj.b", "ifvm.enc0.ffn.down.w", "ifvm.enc0.ffn.down.b"] {
            let id = w.store.by_name(name).unwrap();
            let shape = w.store.value(id).shape();
            *w.store.value_mut(id) = Tensor::zeros(shape);
        }
        let mut rng = Rng::seed_from(12);
        let xv = Tensor::rand_uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(xv.clone());
        let f = tape.constant(Tensor::rand_uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng));
        let out = block_forward(&mut tape, &mut binder, &w.store, &w.enc[0], w.cfg.fusion, x, f).unwrap();
        assert_eq!(tape.value(out), &xv);
    }

    #[test]
    fn pyramid_shapes_follow_levels() {
        let cfg = ModelConfig { seed: 3, ..Default::default() };
        let w = ModelWeights::init(cfg).unwrap();
        let mut tape = Tape::inference();
        let mut binder = Binder::new();
        let f = tape.constant(Tensor::zeros([1, 40, 64, 64]));
        let pyr = build_flu_pyramid(&mut tape, &mut binder, &w.store, &w, f).unwrap();
        assert_eq!(tape.shape(pyr[0]), [1, 40, 64, 64]);
        assert_eq!(tape.shape(pyr[1]), [1, 80, 32, 32]);
        assert_eq!(tape.shape(pyr[2]), [1, 160, 16, 16]);
    }

    #[test]
    fn pyramid_rejects_unaligned_sizes() {
        let w = ModelWeights::init(toy_cfg()).unwrap();
        let mut tape = Tape::inference();
        let mut binder = Binder::new();
        let f = tape.constant(Tensor::zeros([1, 8, 6, 8]));
        let err = build_flu_pyramid(&mut tape, &mut binder, &w.store, &w, f).unwrap_err();
        assert!(err.to_string().contains("multiples of 4"));
    }

    #[test]
    fn zero_pyramid_from_zero_features_and_biases() {
        let mut w = ModelWeights::init(toy_cfg()).unwrap();
        for name in ["ifvm.pyr0.b", "ifvm.pyr1.b"] {
            let id = w.store.by_name(name).unwrap();
            let shape = w.store.value(id).shape();
            *w.store.value_mut(id) = Tensor::zeros(shape);
        }
        let mut tape = Tape::inference();
        let mut binder = Binder::new();
        let f = tape.constant(Tensor::zeros([1, 8, 8, 8]));
        let pyr = build_flu_pyramid(&mut tape, &mut binder, &w.store, &w, f).unwrap();
        for p in pyr {
            assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn model_output_shape_and_determinism() {
        let w = ModelWeights::init(toy_cfg()).unwrap();
        let mut rng = Rng::seed_from(13);
        let img = Tensor::rand_uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng);
        let mut t1 = Tape::inference();
        let r1 = model_forward(&mut t1, &w, img.clone()).unwrap();
        let mut t2 = Tape::inference();
        let r2 = model_forward(&mut t2, &w, img).unwrap();
        assert_eq!(t1.shape(r1.enhanced), [1, 3, 16, 16]);
        let a = t1.value(r1.enhanced);
        let b = t2.value(r2.enhanced);
        for i in 0..a.numel() {
            assert_eq!(a[i].to_bits(), b[i].to_bits());
        }
    }

    #[test]
    fn dead_network_reduces_to_lit_plus_bias() {
        // All weights zero except the output conv bias: the estimator map
        // is zero so lit = 0, and the restorer collapses to its bias.
        let mut w = ModelWeights::init(toy_cfg()).unwrap();
        w.zero_all();
        let mut bias = Tensor::zeros([3, 1, 1, 1]);
        bias.data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        w.set_by_name("ifvm.out.b", bias.clone()).unwrap();

        let mut rng = Rng::seed_from(14);
        let img = Tensor::rand_uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let mut tape = Tape::inference();
        let run = model_forward(&mut tape, &w, img).unwrap();
        let got = tape.value(run.enhanced);
        for c in 0..3 {
            for p in 0..64 {
                assert!((got.data()[c * 64 + p] - bias.data()[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bottleneck_runs_at_four_x_channels() {
        let cfg = ModelConfig { seed: 5, ..Default::default() };
        let w = ModelWeights::init(cfg).unwrap();
        assert_eq!(w.mid.channels, 160);
        // Also visible in the stored norm shape.
        let id = w.store.by_name("ifvm.mid.ln1.g").unwrap();
        assert_eq!(w.store.value(id).shape(), [160, 1, 1, 1]);
    }

    #[test]
    fn five_blocks_total() {
        let w = ModelWeights::init(toy_cfg()).unwrap();
        let blocks = w
            .store
            .census()
            .iter()
            .filter(|(n, _)| n.ends_with(".ln1.g"))
            .count();
        assert_eq!(blocks, 5);
    }
}
