//! Illumination fusion: cross attention over channels, plus the two
//! ablation variants (elementwise product, guided self-attention).

use crate::error::Result;
use crate::params::{Binder, ParamStore};
use crate::tape::{Tape, Var};

use super::weights::AttnWeights;
use super::FusionMode;

/// Transposed multi-head cross attention. Queries come from the
/// illumination features, keys and values from the signal; the softmax
/// normalizes over key channels so each output channel is a convex mix
/// of value channels.
pub fn fused_attention(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    w: &AttnWeights,
    x: Var,
    features: Var,
) -> Result<Var> {
    tape.value(x).same_shape(tape.value(features), "shape")?;
    let q = w.wq.apply(tape, binder, store, features)?;
    let k = w.wk.apply(tape, binder, store, x)?;
    let v = w.wv.apply(tape, binder, store, x)?;
    contract(tape, binder, store, w, q, k, v)
}

/// Ablation: queries and keys from the signal, values gated by the
/// illumination features before the same contraction.
pub fn guided_msa(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    w: &AttnWeights,
    x: Var,
    features: Var,
) -> Result<Var> {
    tape.value(x).same_shape(tape.value(features), "shape")?;
    let q = w.wq.apply(tape, binder, store, x)?;
    let k = w.wk.apply(tape, binder, store, x)?;
    let v = w.wv.apply(tape, binder, store, x)?;
    let v = tape.mul(v, features)?;
    contract(tape, binder, store, w, q, k, v)
}

/// Ablation: plain elementwise product.
pub fn elementwise_fuse(tape: &mut Tape, x: Var, features: Var) -> Result<Var> {
    tape.mul(x, features)
}

fn contract(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    w: &AttnWeights,
    q: Var,
    k: Var,
    v: Var,
) -> Result<Var> {
    let alpha = binder.bind(tape, store, w.alpha);
    let scores = tape.attn_scores(k, q, w.heads)?;
    let scaled = tape.div_per_head(scores, alpha)?;
    // Softmax over the key-channel axis: each column sums to one.
    let attn = tape.softmax(scaled, 2)?;
    let mixed = tape.attn_apply(v, attn, w.heads)?;
    w.proj.apply(tape, binder, store, mixed)
}

pub fn apply_fusion(
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    mode: FusionMode,
    attn: Option<&AttnWeights>,
    x: Var,
    features: Var,
) -> Result<Var> {
    match mode {
        FusionMode::Elementwise => elementwise_fuse(tape, x, features),
        FusionMode::FusedAttention => {
            fused_attention(tape, binder, store, attn.expect("attention weights"), x, features)
        }
        FusionMode::GuidedMsa => {
            guided_msa(tape, binder, store, attn.expect("attention weights"), x, features)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::weights::Init;
    use crate::params::ParamStore;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn attn_setup(c: usize, heads: usize, seed: u64) -> (ParamStore, AttnWeights) {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let w = init.attention("t.ifa", c, heads).unwrap();
        (store, w)
    }

    #[test]
    fn output_shape_matches_input() {
        let (store, w) = attn_setup(8, 2, 1);
        let mut rng = Rng::seed_from(2);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(Tensor::rand_uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng));
        let f = tape.constant(Tensor::rand_uniform([1, 8, 4, 4], -1.0, 1.0, &mut rng));
        let out = fused_attention(&mut tape, &mut binder, &store, &w, x, f).unwrap();
        assert_eq!(tape.shape(out), [1, 8, 4, 4]);
        let out2 = guided_msa(&mut tape, &mut binder, &store, &w, x, f).unwrap();
        assert_eq!(tape.shape(out2), [1, 8, 4, 4]);
    }

    #[test]
    fn zero_keys_average_value_channels() {
        // wk = 0 makes every attention column uniform 1/d_k, so the mixed
        // map (before proj) averages the value channels of each head.
        let (mut store, w) = attn_setup(4, 1, 3);
        let wk = store.by_name("t.ifa.wk.w").unwrap();
        let shape = store.value(wk).shape();
        *store.value_mut(wk) = Tensor::zeros(shape);
        // Identity wv and proj so the averaging is visible at the output.
        let eye4 = |store: &mut ParamStore, name: &str| {
            let id = store.by_name(name).unwrap();
            let mut t = Tensor::zeros([4, 4, 1, 1]);
            for i in 0..4 {
                t.data_mut()[i * 4 + i] = 1.0;
            }
            *store.value_mut(id) = t;
        };
        eye4(&mut store, "t.ifa.wv.w");
        eye4(&mut store, "t.ifa.proj.w");
        let pb = store.by_name("t.ifa.proj.b").unwrap();
        *store.value_mut(pb) = Tensor::zeros([4, 1, 1, 1]);

        let mut rng = Rng::seed_from(4);
        let xv = Tensor::rand_uniform([1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let fv = Tensor::rand_uniform([1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(xv.clone());
        let f = tape.constant(fv);
        let out = fused_attention(&mut tape, &mut binder, &store, &w, x, f).unwrap();
        let got = tape.value(out);
        for p in 0..9 {
            let mean: f32 = (0..4).map(|c| xv.data()[c * 9 + p]).sum::<f32>() / 4.0;
            for c in 0..4 {
                assert!((got.data()[c * 9 + p] - mean).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_columns_sum_to_one() {
        let (store, w) = attn_setup(8, 2, 5);
        let mut rng = Rng::seed_from(6);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(Tensor::rand_uniform([2, 8, 5, 3], -2.0, 2.0, &mut rng));
        let f = tape.constant(Tensor::rand_uniform([2, 8, 5, 3], -2.0, 2.0, &mut rng));
        // Rebuild the contraction pieces to inspect the softmax output.
        let q = w.wq.apply(&mut tape, &mut binder, &store, f).unwrap();
        let k = w.wk.apply(&mut tape, &mut binder, &store, x).unwrap();
        let alpha = binder.bind(&mut tape, &store, w.alpha);
        let scores = tape.attn_scores(k, q, w.heads).unwrap();
        let scaled = tape.div_per_head(scores, alpha).unwrap();
        let attn = tape.softmax(scaled, 2).unwrap();
        let a = tape.value(attn);
        let [n, heads, dk, _] = a.shape();
        for ni in 0..n {
            for hi in 0..heads {
                for col in 0..dk {
                    let s: f32 = (0..dk).map(|r| a.at(ni, hi, r, col)).sum();
                    assert!((s - 1.0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 2, 2, 2], 2.0));
        let ones = tape.constant(Tensor::full([1, 2, 2, 2], 1.0));
        let threes = tape.constant(Tensor::full([1, 2, 2, 2], 3.0));
        let id = elementwise_fuse(&mut tape, x, ones).unwrap();
        assert_eq!(tape.value(id), tape.value(x));
        let prod = elementwise_fuse(&mut tape, x, threes).unwrap();
        assert!(tape.value(prod).data().iter().all(|&v| v == 6.0));
        let zero = tape.constant(Tensor::zeros([1, 2, 2, 2]));
        let z = elementwise_fuse(&mut tape, zero, threes).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guided_msa_with_unit_features_is_self_attention() {
        let (store, w) = attn_setup(4, 1, 7);
        let mut rng = Rng::seed_from(8);
        let xv = Tensor::rand_uniform([1, 4, 3, 3], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(xv.clone());
        let ones = tape.constant(Tensor::full([1, 4, 3, 3], 1.0));
        let guided = guided_msa(&mut tape, &mut binder, &store, &w, x, ones).unwrap();
        // Self-attention of x: same weights, q from x.
        let q = w.wq.apply(&mut tape, &mut binder, &store, x).unwrap();
        let k = w.wk.apply(&mut tape, &mut binder, &store, x).unwrap();
        let v = w.wv.apply(&mut tape, &mut binder, &store, x).unwrap();
        let alpha = binder.bind(&mut tape, &store, w.alpha);
        let scores = tape.attn_scores(k, q, 1).unwrap();
        let scaled = tape.div_per_head(scores, alpha).unwrap();
        let attn = tape.softmax(scaled, 2).unwrap();
        let mixed = tape.attn_apply(v, attn, 1).unwrap();
        let direct = w.proj.apply(&mut tape, &mut binder, &store, mixed).unwrap();
        assert!(tape.value(guided).max_abs_diff(tape.value(direct)) < 1e-6);
    }
}
