//! Desk-scale training: L1 objective, Adam with bias correction, cosine
//! learning-rate annealing, paired crop/flip/rotate augmentation.

use crate::error::{Error, Result};
use crate::model::net::model_forward;
use crate::model::weights::ModelWeights;
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f32,
    pub lr_min: f32,
    pub total_steps: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub hflip: bool,
    pub vflip: bool,
    pub rot90: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 2e-4,
            lr_min: 1e-6,
            total_steps: 1000,
            batch_size: 8,
            crop: 128,
            hflip: true,
            vflip: true,
            rot90: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 4 != 0 {
            return Err(Error::Config(format!("crop must be a positive multiple of 4, got {}", self.crop)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// First/second moment buffers per parameter, plus the shared step count.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState { m, v, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update over every parameter; consumes and clears
/// the accumulated gradients.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f32) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Usage("optimizer state does not match parameter store".into()));
    }
    for i in 0..store.len() {
        if !store.grad_ready(ParamId(i)) {
            return Err(Error::Usage(format!(
                "missing gradient for parameter '{}'; run backward before adam_step",
                store.name(ParamId(i))
            )));
        }
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..store.len() {
        let id = ParamId(i);
        let grad = store.grad(id).clone();
        let m = &mut state.m[i];
        let vb = &mut state.v[i];
        for ((mv, vv), &g) in m.data_mut().iter_mut().zip(vb.data_mut()).zip(grad.data()) {
            *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * g;
            *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * g * g;
        }
        let value = store.value_mut(id);
        for (p, (mv, vv)) in value.data_mut().iter_mut().zip(m.data().iter().zip(vb.data())) {
            let mhat = mv / bc1;
            let vhat = vv / bc2;
            *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            debug_assert!(p.is_finite());
        }
    }
    store.clear_grads();
    Ok(())
}

/// lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi step/total)).
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> Result<f32> {
    if step > cfg.total_steps {
        return Err(Error::Usage(format!("step {} past total_steps {}", step, cfg.total_steps)));
    }
    let phase = std::f64::consts::PI * step as f64 / cfg.total_steps as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos() as f32))
}

pub fn crop(t: &Tensor, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let [n, c, h, w] = t.shape();
    if y0 + ch > h || x0 + cw > w {
        return Err(Error::dim("spatial", format!("crop {ch}x{cw}@({y0},{x0}) exceeds {h}x{w}")));
    }
    let mut out = Tensor::zeros([n, c, ch, cw]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..ch {
                for x in 0..cw {
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, y0 + y, x0 + x);
                }
            }
        }
    }
    Ok(out)
}

pub fn hflip(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor::zeros(t.shape());
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, y, w - 1 - x);
                }
            }
        }
    }
    out
}

pub fn vflip(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor::zeros(t.shape());
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(ni, ci, y, x) = t.at(ni, ci, h - 1 - y, x);
                }
            }
        }
    }
    out
}

/// Quarter turn clockwise; requires a square image.
pub fn rot90(t: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = t.shape();
    if h != w {
        return Err(Error::dim("spatial", format!("rot90 needs a square image, got {h}x{w}")));
    }
    let mut out = Tensor::zeros(t.shape());
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(ni, ci, x, h - 1 - y) = t.at(ni, ci, y, x);
                }
            }
        }
    }
    Ok(out)
}

/// One low/gt pair, each (1,3,H,W) in [0,1].
#[derive(Clone)]
pub struct SamplePair {
    pub low: Tensor,
    pub gt: Tensor,
}

/// Identical random crop and geometric transform applied to both images.
pub fn augment(pair: &SamplePair, cfg: &TrainConfig, rng: &mut Rng) -> Result<SamplePair> {
    let [_, _, h, w] = pair.low.shape();
    pair.low.same_shape(&pair.gt, "shape")?;
    if h < cfg.crop || w < cfg.crop {
        return Err(Error::dim("spatial", format!("image {h}x{w} smaller than crop {}", cfg.crop)));
    }
    let y0 = if h == cfg.crop { 0 } else { rng.below(h - cfg.crop + 1) };
    let x0 = if w == cfg.crop { 0 } else { rng.below(w - cfg.crop + 1) };
    let mut low = crop(&pair.low, y0, x0, cfg.crop, cfg.crop)?;
    let mut gt = crop(&pair.gt, y0, x0, cfg.crop, cfg.crop)?;
    if cfg.hflip && rng.flip() {
        low = hflip(&low);
        gt = hflip(&gt);
    }
    if cfg.vflip && rng.flip() {
        low = vflip(&low);
        gt = vflip(&gt);
    }
    if cfg.rot90 {
        for _ in 0..rng.below(4) {
            low = rot90(&low)?;
            gt = rot90(&gt)?;
        }
    }
    Ok(SamplePair { low, gt })
}

#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: usize,
    pub lr: f32,
    pub l1: f32,
}

fn stack_batch(samples: &[SamplePair]) -> (Tensor, Tensor) {
    let [_, c, h, w] = samples[0].low.shape();
    let n = samples.len();
    let mut low = Tensor::zeros([n, c, h, w]);
    let mut gt = Tensor::zeros([n, c, h, w]);
    let plane = c * h * w;
    for (i, s) in samples.iter().enumerate() {
        low.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(s.low.data());
        gt.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(s.gt.data());
    }
    (low, gt)
}

/// Seeded sample-augment-forward-backward-step loop. `on_step` sees every
/// step's log line (the CLI appends them to the trace CSV).
pub fn train_loop(
    dataset: &[SamplePair],
    weights: &mut ModelWeights,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Usage("training dataset is empty".into()));
    }
    let mut rng = Rng::seed_from(cfg.seed);
    let mut state = AdamState::new(&weights.store);
    let mut logs = Vec::with_capacity(cfg.total_steps);
    let mut order: Vec<usize> = Vec::new();

    for step in 0..cfg.total_steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                rng.shuffle(&mut order);
            }
            let idx = order.pop().expect("refilled above");
            batch.push(augment(&dataset[idx], cfg, &mut rng)?);
        }
        let (low, gt) = stack_batch(&batch);

        let mut tape = Tape::new();
        let run = model_forward(&mut tape, weights, low)?;
        let gt_var = tape.constant(gt);
        let loss = tape.l1_loss(run.enhanced, gt_var)?;
        let l1 = tape.value(loss)[0];
        let mut grads = tape.backward(loss, Tensor::full([1, 1, 1, 1], 1.0))?;
        run.binder.apply_grads(&mut grads, &mut weights.store);

        let lr = cosine_lr(step, cfg)?;
        adam_step(&mut weights.store, &mut state, lr)?;

        let log = StepLog { step, lr, l1 };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let cfg = TrainConfig { lr_max: 2e-4, lr_min: 1e-6, total_steps: 100, ..Default::default() };
        assert_eq!(cosine_lr(0, &cfg).unwrap(), cfg.lr_max);
        assert!((cosine_lr(100, &cfg).unwrap() - cfg.lr_min).abs() < 1e-12);
        let mid = cosine_lr(50, &cfg).unwrap();
        assert!((mid - 0.5 * (cfg.lr_max + cfg.lr_min)).abs() < 1e-10);
        assert!(cosine_lr(101, &cfg).is_err());
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::full([1, 1, 1, 1], 0.5)).unwrap();
        let mut state = AdamState::new(&store);
        store.accumulate_grad(p, &Tensor::full([1, 1, 1, 1], 0.3));
        adam_step(&mut store, &mut state, 1e-2).unwrap();
        // Bias correction makes mhat = g, vhat = g^2: update = -lr*sign(g).
        assert!((store.value(p)[0] - (0.5 - 1e-2)).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameter() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::full([1, 1, 1, 1], 0.5)).unwrap();
        let mut state = AdamState::new(&store);
        store.accumulate_grad(p, &Tensor::zeros([1, 1, 1, 1]));
        adam_step(&mut store, &mut state, 1e-2).unwrap();
        assert_eq!(store.value(p)[0], 0.5);
    }

    #[test]
    fn adam_without_backward_is_usage_error() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::full([1, 1, 1, 1], 0.5)).unwrap();
        let mut state = AdamState::new(&store);
        let err = adam_step(&mut store, &mut state, 1e-2).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn flips_are_involutions_and_rot90_has_order_four() {
        let mut rng = Rng::seed_from(1);
        let t = Tensor::rand_uniform([1, 3, 6, 6], 0.0, 1.0, &mut rng);
        assert_eq!(hflip(&hflip(&t)), t);
        assert_eq!(vflip(&vflip(&t)), t);
        let mut r = t.clone();
        for _ in 0..4 {
            r = rot90(&r).unwrap();
        }
        assert_eq!(r, t);
    }

    #[test]
    fn augment_is_identity_when_disabled_and_exact_size() {
        let mut rng = Rng::seed_from(2);
        let low = Tensor::rand_uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let gt = Tensor::rand_uniform([1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let cfg = TrainConfig { crop: 8, hflip: false, vflip: false, rot90: false, ..Default::default() };
        let pair = SamplePair { low: low.clone(), gt: gt.clone() };
        let out = augment(&pair, &cfg, &mut rng).unwrap();
        assert_eq!(out.low, low);
        assert_eq!(out.gt, gt);
    }

    #[test]
    fn augment_moves_low_and_gt_together() {
        // Mark one pixel in both images; after augmentation the marker
        // must land at the same coordinates in low and gt.
        let mut rng = Rng::seed_from(3);
        for trial in 0..20 {
            let mut low = Tensor::zeros([1, 3, 12, 12]);
            let mut gt = Tensor::zeros([1, 3, 12, 12]);
            *low.at_mut(0, 0, 3, 7) = 1.0;
            *gt.at_mut(0, 0, 3, 7) = 1.0;
            let cfg = TrainConfig { crop: 8, ..Default::default() };
            let pair = SamplePair { low, gt };
            let mut r = rng.fork(trial);
            let out = augment(&pair, &cfg, &mut r).unwrap();
            let pos_low: Vec<usize> =
                (0..out.low.numel()).filter(|&i| out.low[i] != 0.0).collect();
            let pos_gt: Vec<usize> = (0..out.gt.numel()).filter(|&i| out.gt[i] != 0.0).collect();
            assert_eq!(pos_low, pos_gt);
        }
    }

    #[test]
    fn augment_rejects_small_images() {
        let mut rng = Rng::seed_from(4);
        let pair = SamplePair { low: Tensor::zeros([1, 3, 4, 4]), gt: Tensor::zeros([1, 3, 4, 4]) };
        let cfg = TrainConfig { crop: 8, ..Default::default() };
        assert!(augment(&pair, &cfg, &mut rng).is_err());
    }

    #[test]
    fn empty_dataset_is_usage_error() {
        let cfg = ModelConfig { n_feat: 8, heads_base_width: 8, d_state_base: 2, ..Default::default() };
        let mut weights = ModelWeights::init(cfg).unwrap();
        let tcfg = TrainConfig { total_steps: 1, crop: 8, ..Default::default() };
        let err = train_loop(&[], &mut weights, &tcfg, |_| {}).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn two_runs_same_seed_identical_trajectories() {
        let cfg = ModelConfig { n_feat: 8, heads_base_width: 8, d_state_base: 2, seed: 9, ..Default::default() };
        let mut rng = Rng::seed_from(5);
        let pair = SamplePair {
            low: Tensor::rand_uniform([1, 3, 8, 8], 0.0, 0.3, &mut rng),
            gt: Tensor::rand_uniform([1, 3, 8, 8], 0.3, 1.0, &mut rng),
        };
        let tcfg = TrainConfig { total_steps: 3, batch_size: 1, crop: 8, seed: 11, ..Default::default() };
        let mut w1 = ModelWeights::init(cfg).unwrap();
        let logs1 = train_loop(&[pair.clone()], &mut w1, &tcfg, |_| {}).unwrap();
        let mut w2 = ModelWeights::init(cfg).unwrap();
        let logs2 = train_loop(&[pair], &mut w2, &tcfg, |_| {}).unwrap();
        for (a, b) in logs1.iter().zip(&logs2) {
            assert_eq!(a.l1.to_bits(), b.l1.to_bits());
        }
        for ((_, pa), (_, pb)) in w1.store.iter().zip(w2.store.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }
}
