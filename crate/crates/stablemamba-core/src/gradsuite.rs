//! Finite-difference gradient suite over every differentiable building block.
//!
//! Each entry builds a small real instance, runs one reverse-mode pass, and
//! compares every (or a sampled subset of) parameter coordinate against
//! central differences. Block losses are scaled by 1/64 so coordinates with
//! structurally zero gradients — e.g. the attention key bias, which softmax
//! shift-invariance cancels — stay inside the relative-error floor of the
//! h = 1e-4 probe.

use crate::blocks::{
    self, AttentionParams, MambaBlockParams, MlpParams, TransformerBlockParams,
    TransformerPosition, RMS_EPS,
};
use crate::check::{finite_diff_check, FiniteDiffConfig, FiniteDiffReport};
use crate::model::{model_forward, ModelConfig, ModelParams};
use crate::ssm::{bidirectional_mamba, mamba_layer, BidirMambaParams, Direction, MambaLayerParams};
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Keeps block losses near O(0.1) so finite-difference roundoff on
/// zero-gradient coordinates stays below `tol` times the error floor.
const LOSS_SCALE: f64 = 1.0 / 64.0;

/// Entries in the order `run_suite` executes them.
pub const SUITE_NAMES: [&str; 9] = [
    "attention",
    "mlp",
    "rms-norm",
    "mamba-layer",
    "bidirectional-mamba",
    "mamba-block",
    "transformer-block",
    "stack",
    "cross-entropy",
];

/// Outcome of one suite entry.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    /// Relative-error tolerance this entry was judged against.
    pub tol: f64,
    pub report: FiniteDiffReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

/// Run every entry; an `Err` means a harness failure, not a tolerance miss.
pub fn run_suite() -> Result<Vec<SuiteEntry>> {
    SUITE_NAMES.iter().map(|n| run_entry(n)).collect()
}

/// Run a single entry by name.
pub fn run_entry(name: &str) -> Result<SuiteEntry> {
    match name {
        "attention" => attention_entry(),
        "mlp" => mlp_entry(),
        "rms-norm" => rms_norm_entry(),
        "mamba-layer" => mamba_layer_entry(),
        "bidirectional-mamba" => bidirectional_mamba_entry(),
        "mamba-block" => mamba_block_entry(),
        "transformer-block" => transformer_block_entry(),
        "stack" => stack_entry(),
        "cross-entropy" => cross_entropy_entry(),
        other => Err(TensorError::Invalid {
            op: "gradsuite",
            msg: format!("unknown entry {other:?}"),
        }),
    }
}

/// Shared harness for blocks mapping `[L, d] -> [L, d]`: the loss is a fixed
/// random weighting of the output. `forward` must leaf every tensor of `ps`
/// in order, registering each in `reg` under the same name.
fn block_entry(
    name: &'static str,
    tol: f64,
    params: Vec<(String, Tensor<f64>)>,
    probe: Tensor<f64>,
    forward: impl Fn(
        &mut Tape<f64>,
        &[(String, Tensor<f64>)],
        bool,
        &mut Vec<(String, Var)>,
    ) -> Result<Var>,
) -> Result<SuiteEntry> {
    let eval = |ps: &[(String, Tensor<f64>)],
                rg: bool|
     -> Result<(f64, Option<Vec<Option<Tensor<f64>>>>)> {
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let h = forward(&mut tape, ps, rg, &mut reg)?;
        let w = tape.leaf(probe.clone(), false);
        let hw = tape.mul(h, w)?;
        let s = tape.sum_all(hw)?;
        let loss = tape.scale(s, LOSS_SCALE)?;
        let lv = tape.value(loss).data()[0];
        if !rg {
            return Ok((lv, None));
        }
        tape.backward(loss)?;
        for (slot, (rn, _)) in ps.iter().zip(&reg) {
            assert_eq!(rn, &slot.0, "{name}: bind order diverged from visit order");
        }
        let grads = reg.iter().map(|(_, v)| tape.grad(*v).cloned()).collect();
        Ok((lv, Some(grads)))
    };
    let (_, grads) = eval(&params, true)?;
    let grads = grads.expect("gradient pass returns gradients");
    let cfg = FiniteDiffConfig {
        tol,
        ..FiniteDiffConfig::default()
    };
    let report = finite_diff_check(&params, &grads, |ps| eval(ps, false).map(|(l, _)| l), &cfg)?;
    Ok(SuiteEntry { name, tol, report })
}

fn attention_entry() -> Result<SuiteEntry> {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let (l, d) = (5usize, 8usize);
    let proto = AttentionParams::<f64>::init(d, 2, &mut rng);
    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
    let probe = Tensor::randn(&[l, d], 0.5, &mut rng);
    let mut params = vec![("x".to_string(), x)];
    proto.visit("attn", &mut |n, t| params.push((n, t.clone())));
    block_entry("attention", 1e-4, params, probe, move |tape, ps, rg, reg| {
        let xv = tape.leaf(ps[0].1.clone(), rg);
        reg.push(("x".to_string(), xv));
        let mut p = proto.clone();
        let mut i = 1;
        p.visit_mut("attn", &mut |_, t| {
            *t = ps[i].1.clone();
            i += 1;
        });
        let vars = p.bind(tape, rg, "attn", reg);
        blocks::self_attention(tape, xv, &vars)
    })
}

fn mlp_entry() -> Result<SuiteEntry> {
    let mut rng = ChaCha20Rng::seed_from_u64(12);
    let (l, d) = (4usize, 6usize);
    let proto = MlpParams::<f64>::init(d, &mut rng);
    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
    let probe = Tensor::randn(&[l, d], 0.5, &mut rng);
    let mut params = vec![("x".to_string(), x)];
    proto.visit("mlp", &mut |n, t| params.push((n, t.clone())));
    block_entry("mlp", 1e-4, params, probe, move |tape, ps, rg, reg| {
        let xv = tape.leaf(ps[0].1.clone(), rg);
        reg.push(("x".to_string(), xv));
        let mut p = proto.clone();
        let mut i = 1;
        p.visit_mut("mlp", &mut |_, t| {
            *t = ps[i].1.clone();
            i += 1;
        });
        let vars = p.bind(tape, rg, "mlp", reg);
        blocks::mlp(tape, xv, &vars)
    })
}

fn rms_norm_entry() -> Result<SuiteEntry> {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let (l, d) = (4usize, 6usize);
    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
    // Move the gain off the all-ones point so its gradient is generic.
    let gain = Tensor::randn(&[d], 0.2, &mut rng).map(|v| v + 1.0);
    let probe = Tensor::randn(&[l, d], 0.5, &mut rng);
    let params = vec![("x".to_string(), x), ("gain".to_string(), gain)];
    block_entry("rms-norm", 1e-4, params, probe, |tape, ps, rg, reg| {
        let xv = tape.leaf(ps[0].1.clone(), rg);
        reg.push(("x".to_string(), xv));
        let gv = tape.leaf(ps[1].1.clone(), rg);
        reg.push(("gain".to_string(), gv));
        tape.rms_norm(xv, gv, RMS_EPS)
    })
}

fn mamba_layer_entry() -> Result<SuiteEntry> {
    let mut rng = ChaCha20Rng::seed_from_u64(14);
    let (l, d) = (6usize, 4usize);
    let proto = MambaLayerParams::<f64>::init(d, &mut rng);
    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
    let probe = Tensor::randn(&[l, d], 0.5, &mut rng);
    let mut params = vec![("x".to_string(), x)];
    proto.visit("m", &mut |n, t| params.push((n, t.clone())));
    block_entry("mamba-layer", 1e-4, params, probe, move |tape, ps, rg, reg| {
        let xv = tape.leaf(ps[0].1.clone(), rg);
        reg.push(("x".to_string(), xv));
        let mut p = proto.clone();
        let mut i = 1;
        p.visit_mut("m", &mut |_, t| {
            *t = ps[i].1.clone();
            i += 1;
        });
        let vars = p.bind(tape, rg, "m", reg);
        mamba_layer(tape, xv, &vars, Direction::Fwd)
    })
}

fn bidirectional_mamba_entry() -> Result<SuiteEntry> {
    let mut rng = ChaCha20Rng::seed_from_u64(15);
    let (l, d) = (5usize, 4usize);
    let proto = BidirMambaParams::<f64>::init(d, &mut rng);
    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
    let probe = Tensor::randn(&[l, d], 0.5, &mut rng);
    let mut params = vec![("x".to_string(), x)];
    proto.visit("bi", &mut |n, t| params.push((n, t.clone())));
    block_entry(
        "bidirectional-mamba",
        1e-4,
        params,
        probe,
        move |tape, ps, rg, reg| {
            let xv = tape.leaf(ps[0].1.clone(), rg);
            reg.push(("x".to_string(), xv));
            let mut p = proto.clone();
            let mut i = 1;
            p.visit_mut("bi", &mut |_, t| {
                *t = ps[i].1.clone();
                i += 1;
            });
            let vars = p.bind(tape, rg, "bi", reg);
            bidirectional_mamba(tape, xv, &vars)
        },
    )
}

fn mamba_block_entry() -> Result<SuiteEntry> {
    let mut rng = ChaCha20Rng::seed_from_u64(16);
    let (l, d) = (5usize, 6usize);
    let proto = MambaBlockParams::<f64>::init(d, &mut rng);
    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
    let probe = Tensor::randn(&[l, d], 0.5, &mut rng);
    let mut params = vec![("x".to_string(), x)];
    proto.visit("mb", &mut |n, t| params.push((n, t.clone())));
    block_entry("mamba-block", 1e-4, params, probe, move |tape, ps, rg, reg| {
        let xv = tape.leaf(ps[0].1.clone(), rg);
        reg.push(("x".to_string(), xv));
        let mut p = proto.clone();
        let mut i = 1;
        p.visit_mut("mb", &mut |_, t| {
            *t = ps[i].1.clone();
            i += 1;
        });
        let vars = p.bind(tape, rg, "mb", reg);
        blocks::mamba_block(tape, xv, &vars)
    })
}

fn transformer_block_entry() -> Result<SuiteEntry> {
    let mut rng = ChaCha20Rng::seed_from_u64(17);
    let (l, d) = (5usize, 8usize);
    let proto = TransformerBlockParams::<f64>::init(d, 2, &mut rng);
    let x = Tensor::randn(&[l, d], 1.0, &mut rng);
    let probe = Tensor::randn(&[l, d], 0.5, &mut rng);
    let mut params = vec![("x".to_string(), x)];
    proto.visit("tb", &mut |n, t| params.push((n, t.clone())));
    block_entry(
        "transformer-block",
        1e-4,
        params,
        probe,
        move |tape, ps, rg, reg| {
            let xv = tape.leaf(ps[0].1.clone(), rg);
            reg.push(("x".to_string(), xv));
            let mut p = proto.clone();
            let mut i = 1;
            p.visit_mut("tb", &mut |_, t| {
                *t = ps[i].1.clone();
                i += 1;
            });
            let vars = p.bind(tape, rg, "tb", reg);
            blocks::transformer_block(tape, xv, &vars)
        },
    )
}

/// Reduced full model: 16x16 image, 8x8 patches, width 24, one Mamba and one
/// Transformer block per group, cross-entropy readout. Coordinates are
/// sampled, two per tensor.
fn stack_entry() -> Result<SuiteEntry> {
    let mut rng = ChaCha20Rng::seed_from_u64(18);
    let cfg = ModelConfig {
        preset: None,
        embed_dim: 24,
        depth: 4,
        ratio_n: 1,
        transformer_position: TransformerPosition::End,
        patch_size: 8,
        tubelet_len: 1,
        image_size: 16,
        n_frames: 1,
        n_heads: 3,
        n_classes: 3,
        use_cls_token: true,
    };
    let proto = ModelParams::<f64>::init(&cfg, &mut rng)?;
    let image = Tensor::randn(&[3, 16, 16], 0.5, &mut rng);
    let labels = vec![1usize];
    let mut params = Vec::new();
    proto.visit(&mut |n, t| params.push((n, t.clone())));

    let eval = |ps: &[(String, Tensor<f64>)],
                rg: bool|
     -> Result<(f64, Option<Vec<Option<Tensor<f64>>>>)> {
        let mut tape = Tape::new();
        let mut p = proto.clone();
        let mut i = 0;
        p.visit_mut(&mut |_, t| {
            *t = ps[i].1.clone();
            i += 1;
        });
        let mut reg = Vec::new();
        let vars = p.bind(&mut tape, rg, &mut reg);
        let logits = model_forward(&mut tape, &cfg, &vars, &image)?;
        let rows = tape.reshape(logits, &[1, cfg.n_classes])?;
        let ce = tape.cross_entropy(rows, &labels, 0.0)?;
        let loss = tape.scale(ce, LOSS_SCALE)?;
        let lv = tape.value(loss).data()[0];
        if !rg {
            return Ok((lv, None));
        }
        tape.backward(loss)?;
        for (slot, (rn, _)) in ps.iter().zip(&reg) {
            assert_eq!(rn, &slot.0, "stack: bind order diverged from visit order");
        }
        let grads = reg.iter().map(|(_, v)| tape.grad(*v).cloned()).collect();
        Ok((lv, Some(grads)))
    };

    let (_, grads) = eval(&params, true)?;
    let grads = grads.expect("gradient pass returns gradients");
    let cfg_fd = FiniteDiffConfig {
        max_coords_per_tensor: Some(2),
        ..FiniteDiffConfig::default()
    };
    let report = finite_diff_check(&params, &grads, |ps| eval(ps, false).map(|(l, _)| l), &cfg_fd)?;
    Ok(SuiteEntry {
        name: "stack",
        tol: cfg_fd.tol,
        report,
    })
}

/// Cross-entropy alone is benign enough for a tighter tolerance: every logit
/// carries an O(1) gradient, so no scaling and tol = 1e-6.
fn cross_entropy_entry() -> Result<SuiteEntry> {
    let mut rng = ChaCha20Rng::seed_from_u64(19);
    let logits = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let labels = vec![2usize, 0, 4];
    let params = vec![("logits".to_string(), logits)];

    let eval = |ps: &[(String, Tensor<f64>)],
                rg: bool|
     -> Result<(f64, Option<Vec<Option<Tensor<f64>>>>)> {
        let mut tape = Tape::new();
        let lv = tape.leaf(ps[0].1.clone(), rg);
        let loss = tape.cross_entropy(lv, &labels, 0.1)?;
        let out = tape.value(loss).data()[0];
        if !rg {
            return Ok((out, None));
        }
        tape.backward(loss)?;
        Ok((out, Some(vec![tape.grad(lv).cloned()])))
    };

    let (_, grads) = eval(&params, true)?;
    let grads = grads.expect("gradient pass returns gradients");
    let cfg = FiniteDiffConfig {
        tol: 1e-6,
        ..FiniteDiffConfig::default()
    };
    let report = finite_diff_check(&params, &grads, |ps| eval(ps, false).map(|(l, _)| l), &cfg)?;
    Ok(SuiteEntry {
        name: "cross-entropy",
        tol: 1e-6,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_entry_passes() {
        for entry in run_suite().unwrap() {
            assert!(
                entry.passed(),
                "{} failed: worst {:?}",
                entry.name,
                entry.report.worst
            );
            assert!(entry.report.n_checked > 0, "{} checked nothing", entry.name);
        }
    }

    #[test]
    fn unknown_entry_is_rejected() {
        assert!(run_entry("nope").is_err());
    }

    #[test]
    fn cross_entropy_holds_tighter_tolerance() {
        let e = run_entry("cross-entropy").unwrap();
        assert_eq!(e.tol, 1e-6);
        assert!(e.passed(), "worst {:?}", e.report.worst);
    }
}
