//! Channel (transposed) attention contractions.
//!
//! Scores live per head over channel pairs: for head i with width d_k,
//! scores[n,i,r,c] = sum_p K[n, i*d_k+r, p] * Q[n, i*d_k+c, p] over all
//! spatial positions p. Applying attention mixes value channels:
//! out[n, i*d_k+c, p] = sum_r V[n, i*d_k+r, p] * A[n,i,r,c]. The score
//! matrix is d_k x d_k, so the contraction cost is linear in H*W.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn head_width(c: usize, heads: usize) -> Result<usize> {
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("channel count {} not divisible by {} heads", c, heads)));
    }
    Ok(c / heads)
}

/// K^T Q per head: (N,C,H,W) x (N,C,H,W) -> (N, heads, d_k, d_k).
pub fn attn_scores(keys: &Tensor, queries: &Tensor, heads: usize) -> Result<Tensor> {
    keys.same_shape(queries, "shape")?;
    let [n, c, h, w] = keys.shape();
    let dk = head_width(c, heads)?;
    let hw = h * w;
    let mut out = Tensor::zeros([n, heads, dk, dk]);
    let kd = keys.data();
    let qd = queries.data();
    for ni in 0..n {
        for hi in 0..heads {
            for r in 0..dk {
                let krow = &kd[(ni * c + hi * dk + r) * hw..(ni * c + hi * dk + r + 1) * hw];
                for ci in 0..dk {
                    let qrow = &qd[(ni * c + hi * dk + ci) * hw..(ni * c + hi * dk + ci + 1) * hw];
                    let mut acc = 0.0f32;
                    for (kv, qv) in krow.iter().zip(qrow) {
                        acc += kv * qv;
                    }
                    *out.at_mut(ni, hi, r, ci) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients for [`attn_scores`]; returns (d_keys, d_queries).
pub fn attn_scores_backward(
    keys: &Tensor,
    queries: &Tensor,
    heads: usize,
    d_out: &Tensor,
) -> (Tensor, Tensor) {
    let [n, c, h, w] = keys.shape();
    let dk = c / heads;
    let hw = h * w;
    let mut dkeys = Tensor::zeros(keys.shape());
    let mut dqueries = Tensor::zeros(queries.shape());
    let kd = keys.data();
    let qd = queries.data();
    for ni in 0..n {
        for hi in 0..heads {
            for r in 0..dk {
                for ci in 0..dk {
                    let g = d_out.at(ni, hi, r, ci);
                    if g == 0.0 {
                        continue;
                    }
                    let koff = (ni * c + hi * dk + r) * hw;
                    let qoff = (ni * c + hi * dk + ci) * hw;
                    for p in 0..hw {
                        dkeys.data_mut()[koff + p] += g * qd[qoff + p];
                        dqueries.data_mut()[qoff + p] += g * kd[koff + p];
                    }
                }
            }
        }
    }
    (dkeys, dqueries)
}

/// V . A per head: (N,C,H,W) x (N,heads,d_k,d_k) -> (N,C,H,W).
pub fn attn_apply(values: &Tensor, attn: &Tensor, heads: usize) -> Result<Tensor> {
    let [n, c, h, w] = values.shape();
    let dk = head_width(c, heads)?;
    if attn.shape() != [n, heads, dk, dk] {
        return Err(Error::dim(
            "heads",
            format!("attention shape {:?}, want [{},{},{},{}]", attn.shape(), n, heads, dk, dk),
        ));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(values.shape());
    let vd = values.data();
    for ni in 0..n {
        for hi in 0..heads {
            for ci in 0..dk {
                let orow_off = (ni * c + hi * dk + ci) * hw;
                for r in 0..dk {
                    let a = attn.at(ni, hi, r, ci);
                    if a == 0.0 {
                        continue;
                    }
                    let vrow = &vd[(ni * c + hi * dk + r) * hw..(ni * c + hi * dk + r + 1) * hw];
                    let orow = &mut out.data_mut()[orow_off..orow_off + hw];
                    for (o, &v) in orow.iter_mut().zip(vrow) {
                        *o += a * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients for [`attn_apply`]; returns (d_values, d_attn).
pub fn attn_apply_backward(
    values: &Tensor,
    attn: &Tensor,
    heads: usize,
    d_out: &Tensor,
) -> (Tensor, Tensor) {
    let [n, c, h, w] = values.shape();
    let dk = c / heads;
    let hw = h * w;
    let mut dvalues = Tensor::zeros(values.shape());
    let mut dattn = Tensor::zeros(attn.shape());
    let vd = values.data();
    let god = d_out.data();
    for ni in 0..n {
        for hi in 0..heads {
            for ci in 0..dk {
                let gorow = &god[(ni * c + hi * dk + ci) * hw..(ni * c + hi * dk + ci + 1) * hw];
                for r in 0..dk {
                    let a = attn.at(ni, hi, r, ci);
                    let voff = (ni * c + hi * dk + r) * hw;
                    let vrow = &vd[voff..voff + hw];
                    let mut da = 0.0f32;
                    let dvrow = &mut dvalues.data_mut()[voff..voff + hw];
                    for ((dv, &g), &v) in dvrow.iter_mut().zip(gorow).zip(vrow) {
                        *dv += a * g;
                        da += g * v;
                    }
                    *dattn.at_mut(ni, hi, r, ci) += da;
                }
            }
        }
    }
    (dvalues, dattn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn scores_match_explicit_loops() {
        let mut rng = Rng::seed_from(31);
        let k = Tensor::rand_uniform([1, 4, 2, 3], -1.0, 1.0, &mut rng);
        let q = Tensor::rand_uniform([1, 4, 2, 3], -1.0, 1.0, &mut rng);
        let s = attn_scores(&k, &q, 2).unwrap();
        assert_eq!(s.shape(), [1, 2, 2, 2]);
        for hi in 0..2 {
            for r in 0..2 {
                for ci in 0..2 {
                    let mut acc = 0.0;
                    for y in 0..2 {
                        for x in 0..3 {
                            acc += k.at(0, hi * 2 + r, y, x) * q.at(0, hi * 2 + ci, y, x);
                        }
                    }
                    assert!((s.at(0, hi, r, ci) - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn uniform_attention_averages_value_channels() {
        let mut rng = Rng::seed_from(32);
        let v = Tensor::rand_uniform([1, 4, 2, 2], -1.0, 1.0, &mut rng);
        let a = Tensor::full([1, 1, 4, 4], 0.25);
        let out = attn_apply(&v, &a, 1).unwrap();
        for p in 0..4 {
            let mean: f32 = (0..4).map(|ci| v.data()[ci * 4 + p]).sum::<f32>() / 4.0;
            for ci in 0..4 {
                assert!((out.data()[ci * 4 + p] - mean).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bad_head_count_is_config_error() {
        let t = Tensor::zeros([1, 6, 2, 2]);
        assert!(attn_scores(&t, &t, 4).is_err());
    }
}
