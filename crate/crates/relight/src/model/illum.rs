//! Illumination estimator: prior, three-conv feature path, lit-up image.

use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tape::{Tape, Var};

use super::weights::EstimatorWeights;

/// Per-pixel mean over the three color channels.
pub fn illumination_prior(tape: &mut Tape, image: Var) -> Result<Var> {
    let [_, c, _, _] = tape.shape(image);
    if c != 3 {
        return Err(Error::dim("channels", format!("illumination prior expects 3 channels, got {c}")));
    }
    Ok(tape.mean_channels(image))
}

pub struct EstimatorOut {
    /// Lit-up image: input times the predicted illumination map.
    pub lit: Var,
    /// Illumination feature map at n_feat channels.
    pub features: Var,
    /// Raw 3-channel illumination map (no clamping or activation).
    pub illum_map: Var,
}

/// concat(image, prior) -> 1x1 fuse -> 5x5 depthwise = features;
/// 1x1 out = illumination map; lit = image * map.
pub fn estimator_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    w: &EstimatorWeights,
    image: Var,
    prior: Var,
) -> Result<EstimatorOut> {
    let [n, c, h, wd] = tape.shape(image);
    let [pn, pc, ph, pw] = tape.shape(prior);
    if (n, h, wd) != (pn, ph, pw) || pc != 1 {
        return Err(Error::dim(
            "spatial",
            format!("prior shape {:?} does not match image {:?}", tape.shape(prior), tape.shape(image)),
        ));
    }
    if c != 3 {
        return Err(Error::dim("channels", format!("estimator expects a 3-channel image, got {c}")));
    }
    let stacked = tape.concat_channels(image, prior)?;
    let fused = w.fuse.apply(tape, binder, store, stacked)?;
    let features = w.dw.apply(tape, binder, store, fused)?;
    let illum_map = w.out.apply(tape, binder, store, features)?;
    let lit = tape.mul(image, illum_map)?;
    Ok(EstimatorOut { lit, features, illum_map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::weights::Init;
    use crate::params::ParamStore;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn setup(n_feat: usize) -> (ParamStore, EstimatorWeights) {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 5);
        let w = init.estimator("ie", n_feat).unwrap();
        (store, w)
    }

    #[test]
    fn prior_is_channel_mean() {
        let mut tape = Tape::new();
        let mut img = Tensor::zeros([1, 3, 1, 1]);
        img.data_mut().copy_from_slice(&[0.2, 0.4, 0.6]);
        let image = tape.constant(img);
        let prior = illumination_prior(&mut tape, image).unwrap();
        assert!((tape.value(prior)[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn prior_of_black_is_zero_and_constant_is_constant() {
        let mut tape = Tape::new();
        let black = tape.constant(Tensor::zeros([1, 3, 4, 4]));
        let p = illumination_prior(&mut tape, black).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));
        let grey = tape.constant(Tensor::full([1, 3, 4, 4], 0.37));
        let p = illumination_prior(&mut tape, grey).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 0.37).abs() < 1e-7));
    }

    #[test]
    fn prior_rejects_wrong_channel_count() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 4, 2, 2]));
        assert!(illumination_prior(&mut tape, x).is_err());
    }

    #[test]
    fn unit_illumination_map_passes_image_through() {
        // Zero kernels with out-bias 1 make the map identically one.
        let (mut store, w) = setup(8);
        for i in 0..store.len() {
            let id = crate::params::ParamId(i);
            let shape = store.value(id).shape();
            *store.value_mut(id) = Tensor::zeros(shape);
        }
        let ones = Tensor::full([3, 1, 1, 1], 1.0);
        let out_b = store.by_name("ie.out.b").unwrap();
        *store.value_mut(out_b) = ones;

        let mut rng = Rng::seed_from(6);
        let img = Tensor::rand_uniform([1, 3, 6, 6], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let image = tape.constant(img.clone());
        let prior = illumination_prior(&mut tape, image).unwrap();
        let out = estimator_forward(&mut tape, &mut binder, &store, &w, image, prior).unwrap();
        assert_eq!(tape.value(out.lit), &img);
    }

    #[test]
    fn feature_map_has_n_feat_channels() {
        let (store, w) = setup(40);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let image = tape.constant(Tensor::full([1, 3, 64, 64], 0.25));
        let prior = illumination_prior(&mut tape, image).unwrap();
        let out = estimator_forward(&mut tape, &mut binder, &store, &w, image, prior).unwrap();
        assert_eq!(tape.shape(out.features), [1, 40, 64, 64]);
        assert_eq!(tape.shape(out.lit), [1, 3, 64, 64]);
    }

    #[test]
    fn zero_image_with_zero_biases_lights_to_zero() {
        let (mut store, w) = setup(8);
        for name in ["ie.fuse.b", "ie.dw.b", "ie.out.b"] {
            let id = store.by_name(name).unwrap();
            let shape = store.value(id).shape();
            *store.value_mut(id) = Tensor::zeros(shape);
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let image = tape.constant(Tensor::zeros([1, 3, 4, 4]));
        let prior = illumination_prior(&mut tape, image).unwrap();
        let out = estimator_forward(&mut tape, &mut binder, &store, &w, image, prior).unwrap();
        assert!(tape.value(out.lit).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lit_equals_image_times_map_exactly() {
        let (store, w) = setup(8);
        let mut rng = Rng::seed_from(7);
        let img = Tensor::rand_uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let image = tape.constant(img.clone());
        let prior = illumination_prior(&mut tape, image).unwrap();
        let out = estimator_forward(&mut tape, &mut binder, &store, &w, image, prior).unwrap();
        let map = tape.value(out.illum_map).clone();
        let lit = tape.value(out.lit);
        for i in 0..lit.numel() {
            assert_eq!(lit[i], img[i] * map[i]);
        }
    }
}
