use relight::metrics;
use relight::model::net::model_forward;
use relight::model::weights::ModelWeights;
use relight::model::ModelConfig;
use relight::tape::Tape;
use relight::tensor::Tensor;
use relight::train::{train_loop, SamplePair, TrainConfig};

fn smoke_pair() -> SamplePair {
    let size = 64usize;
    let mut gt = Tensor::zeros([1, 3, size, size]);
    for c in 0..3usize {
        let (fx, fy, phase) = [(1.0, 2.0, 0.0), (2.0, 1.0, 1.3), (3.0, 3.0, 2.1)][c];
        for y in 0..size {
            for x in 0..size {
                let v = 0.5
                    + 0.35
                        * ((2.0 * std::f64::consts::PI * (fx * x as f64 + fy * y as f64) / size as f64)
                            + phase)
                            .sin();
                *gt.at_mut(0, c, y, x) = v as f32;
            }
        }
    }
    let low = gt.map(|v| v * 0.2);
    SamplePair { low, gt }
}

fn main() {
    for lr in [2e-4f32, 1e-3, 2e-3] {
        let t0 = std::time::Instant::now();
        let cfg = ModelConfig {
            n_feat: 16,
            heads_base_width: 16,
            d_state_base: 4,
            seed: 77,
            ..Default::default()
        };
        let mut weights = ModelWeights::init(cfg).unwrap();
        let tcfg = TrainConfig {
            lr_max: lr,
            lr_min: 1e-6,
            total_steps: 300,
            batch_size: 1,
            crop: 64,
            hflip: false,
            vflip: false,
            rot90: false,
            seed: 7,
        };
        let pair = smoke_pair();
        let logs = train_loop(&[pair.clone()], &mut weights, &tcfg, |l| {
            if l.step % 50 == 0 {
                println!("  step {:3} lr {:.2e} l1 {:.4}", l.step, l.lr, l.l1);
            }
        })
        .unwrap();
        let mut tape = Tape::inference();
        let run = model_forward(&mut tape, &weights, pair.low.clone()).unwrap();
        let out = tape.value(run.enhanced).map(|v| v.clamp(0.0, 1.0));
        let psnr = metrics::psnr(&out, &pair.gt).unwrap();
        println!(
            "lr {:.1e}: final l1 {:.4}, psnr {:.2} dB, elapsed {:.1?}",
            lr,
            logs.last().unwrap().l1,
            psnr,
            t0.elapsed()
        );
    }
}
