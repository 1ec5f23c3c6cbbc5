//! Shared helpers for the integration suites: an independent scan oracle and
//! a toy training fixture reused across criteria.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use stablemamba_core::blocks::TransformerPosition;
use stablemamba_core::data::Dataset;
use stablemamba_core::model::ModelConfig;
use stablemamba_core::synth::synth_two_class;
use stablemamba_core::tensor::Tensor;
use stablemamba_core::train::{train, TrainConfig, TrainResult};
use std::sync::OnceLock;

/// Third scan implementation for cross-checks: the recurrence unrolled into
/// an explicit O(L^2) sum, sharing no code or loop structure with the
/// library kernels.
///
/// `y[t,d] = sum_n c[t,n] * sum_{s<=t} (prod_{r=s+1..=t} abar[r,d,n]) *
/// bbar[s,d,n] * u[s,d]  +  d_skip[d] * u[t,d]`
pub fn unrolled_scan(
    abar: &Tensor<f64>,
    bbar: &Tensor<f64>,
    c: &Tensor<f64>,
    u: &Tensor<f64>,
    d_skip: &Tensor<f64>,
) -> Tensor<f64> {
    let (l, d, n) = (abar.shape()[0], abar.shape()[1], abar.shape()[2]);
    let (av, bv, cv, uv, dv) = (abar.data(), bbar.data(), c.data(), u.data(), d_skip.data());
    let mut y = vec![0.0f64; l * d];
    for t in 0..l {
        for di in 0..d {
            let mut acc = 0.0;
            for ni in 0..n {
                let mut state_sum = 0.0;
                for s in 0..=t {
                    let mut decay = 1.0;
                    for r in s + 1..=t {
                        decay *= av[(r * d + di) * n + ni];
                    }
                    state_sum += decay * bv[(s * d + di) * n + ni] * uv[s * d + di];
                }
                acc += cv[t * n + ni] * state_sum;
            }
            y[t * d + di] = acc + dv[di] * uv[t * d + di];
        }
    }
    Tensor::new(&[l, d], y)
}

/// Random scan inputs with realistic magnitudes: `abar = exp(delta * a)` for
/// negative `a`, everything else in [-1, 1].
pub fn random_scan_inputs(
    l: usize,
    d: usize,
    n: usize,
    rng: &mut ChaCha20Rng,
) -> [Tensor<f64>; 5] {
    let tensor = |shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha20Rng| {
        let count: usize = shape.iter().product();
        Tensor::new(shape, (0..count).map(|_| rng.gen_range(lo..hi)).collect())
    };
    let mut abar = vec![0.0f64; l * d * n];
    for v in &mut abar {
        let a: f64 = -rng.gen_range(0.01..5.0);
        let delta: f64 = rng.gen_range(1e-3..0.1);
        *v = (delta * a).exp();
    }
    [
        Tensor::new(&[l, d, n], abar),
        tensor(&[l, d, n], -1.0, 1.0, rng),
        tensor(&[l, n], -1.0, 1.0, rng),
        tensor(&[l, d], -1.0, 1.0, rng),
        tensor(&[d], -1.0, 1.0, rng),
    ]
}

/// A small interleaved model plus the dataset and config used to overfit it.
pub struct ToyRun {
    pub model: ModelConfig,
    pub train_cfg: TrainConfig,
    pub data: Dataset,
    pub result: TrainResult,
    /// Wall-clock seconds the training run itself took.
    pub train_secs: f64,
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        preset: None,
        embed_dim: 32,
        depth: 4,
        ratio_n: 3,
        transformer_position: TransformerPosition::Middle,
        patch_size: 8,
        tubelet_len: 1,
        image_size: 32,
        n_frames: 1,
        n_heads: 2,
        n_classes: 2,
        use_cls_token: true,
    }
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        weight_decay: 0.0,
        warmup_epochs: 2,
        total_epochs: 80,
        batch_size: 8,
        seed: 0,
        label_smoothing: 0.0,
        min_lr: 1e-5,
        log_every: 1,
        hflip: false,
        inject_inf_grad_at_step: None,
    }
}

/// Train the toy model once and share the run across tests; training the
/// same 64-image set to saturation takes a couple of minutes, not seconds.
pub fn toy_run() -> &'static ToyRun {
    static RUN: OnceLock<ToyRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let model = toy_model_config();
        let train_cfg = toy_train_config();
        let data = synth_two_class(64, model.image_size, 7).expect("synthesize toy dataset");
        let t0 = std::time::Instant::now();
        let result = train(&model, &train_cfg, &data, None).expect("toy training succeeds");
        ToyRun {
            model,
            train_cfg,
            data,
            result,
            train_secs: t0.elapsed().as_secs_f64(),
        }
    })
}

/// Print the acceptance verdict line for one criterion.
pub fn verdict(id: &str, ok: bool, detail: &str) {
    println!("{} {id}: {detail}", if ok { "PASS" } else { "FAIL" });
}
