//! Parameter and FLOP accounting derived analytically from a config.
//!
//! `param_inventory` lists every parameter tensor's name and shape in the
//! exact order `ModelParams::visit` produces, without allocating any data —
//! it is the arbiter for preset sizing and for checkpoint inventory checks.

use crate::model::{ModelConfig, N_CHANNELS};
use crate::ssm::{delta_rank, CONV_WIDTH, EXPAND, N_STATE};
use crate::blocks::{BlockKind, MLP_RATIO};
use crate::tensor::Result;

/// `(name, shape)` for every parameter tensor of a model built from `cfg`,
/// in traversal order.
pub fn param_inventory(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let di = EXPAND * d;
    let r = delta_rank(d);
    let hidden = MLP_RATIO * d;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    out.push((
        "patch_kernel".into(),
        vec![d, N_CHANNELS, cfg.tubelet_len, cfg.patch_size, cfg.patch_size],
    ));
    out.push(("patch_bias".into(), vec![d]));
    out.push(("pos_table".into(), vec![cfg.seq_len(), d]));
    if cfg.use_cls_token {
        out.push(("cls_token".into(), vec![1, d]));
    }
    let branch = |out: &mut Vec<(String, Vec<usize>)>, p: String| {
        out.push((format!("{p}.conv_w"), vec![di, CONV_WIDTH]));
        out.push((format!("{p}.conv_b"), vec![di]));
        out.push((format!("{p}.ssm.a_log"), vec![di, N_STATE]));
        out.push((format!("{p}.ssm.w_b"), vec![di, N_STATE]));
        out.push((format!("{p}.ssm.w_c"), vec![di, N_STATE]));
        out.push((format!("{p}.ssm.w_delta_down"), vec![di, r]));
        out.push((format!("{p}.ssm.w_delta_up"), vec![r, di]));
        out.push((format!("{p}.ssm.b_delta"), vec![di]));
        out.push((format!("{p}.ssm.d_skip"), vec![di]));
    };
    for (i, kind) in cfg.schedule()?.kinds().iter().enumerate() {
        let p = format!("blocks.{i}");
        match kind {
            BlockKind::Mamba => {
                out.push((format!("{p}.norm1"), vec![d]));
                out.push((format!("{p}.mixer.w_in"), vec![d, 2 * di]));
                branch(&mut out, format!("{p}.mixer.fwd"));
                branch(&mut out, format!("{p}.mixer.bwd"));
                out.push((format!("{p}.mixer.w_out"), vec![di, d]));
                out.push((format!("{p}.norm2"), vec![d]));
                out.push((format!("{p}.ffn.w1"), vec![d, hidden]));
                out.push((format!("{p}.ffn.b1"), vec![hidden]));
                out.push((format!("{p}.ffn.w2"), vec![hidden, d]));
                out.push((format!("{p}.ffn.b2"), vec![d]));
            }
            BlockKind::Transformer => {
                out.push((format!("{p}.norm1"), vec![d]));
                for w in ["w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"] {
                    let shape = if w.starts_with('w') { vec![d, d] } else { vec![d] };
                    out.push((format!("{p}.attn.{w}"), shape));
                }
                out.push((format!("{p}.norm2"), vec![d]));
                out.push((format!("{p}.mlp.w1"), vec![d, hidden]));
                out.push((format!("{p}.mlp.b1"), vec![hidden]));
                out.push((format!("{p}.mlp.w2"), vec![hidden, d]));
                out.push((format!("{p}.mlp.b2"), vec![d]));
            }
        }
    }
    out.push(("final_norm".into(), vec![d]));
    out.push(("head_w".into(), vec![d, cfg.n_classes]));
    out.push(("head_b".into(), vec![cfg.n_classes]));
    Ok(out)
}

/// Total learned parameters for `cfg`.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(param_inventory(cfg)?
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

/// Multiply-accumulate counts for one forward pass, split by kind.
///
/// `matmul_conv` covers every dense projection and the patch convolution
/// (embedding and head included) — the convention behind published footprint
/// tables, and the headline figure here. The quadratic-in-length attention
/// score/value products and the linear-in-length selective-scan work are
/// tallied separately so their different scaling with sequence length stays
/// visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopCount {
    pub matmul_conv: u64,
    pub attention_scores: u64,
    pub scan: u64,
}

impl FlopCount {
    pub fn total_macs(&self) -> u64 {
        self.matmul_conv + self.attention_scores + self.scan
    }

    /// Headline figure: projection/convolution MACs.
    pub fn headline_macs(&self) -> u64 {
        self.matmul_conv
    }

    /// All counted work at 2 floating-point operations per MAC.
    pub fn flops(&self) -> u64 {
        2 * self.total_macs()
    }
}

/// Analytic per-op multiply-accumulate counts for one forward pass at the
/// config's own input geometry.
///
/// Scan accounting, per step, channel and state: 1 MAC for the decay product
/// `Δ⊙a`, 2 for the held input `Δ·b·φ`, 2 for the recurrence multiply-add,
/// 1 for the output contraction with C — plus 1 per step and channel for the
/// skip term.
pub fn count_flops(cfg: &ModelConfig) -> Result<FlopCount> {
    cfg.validate()?;
    let l = cfg.seq_len() as u64;
    let d = cfg.embed_dim as u64;
    let di = (EXPAND * cfg.embed_dim) as u64;
    let r = delta_rank(cfg.embed_dim) as u64;
    let n = N_STATE as u64;
    let hidden = (MLP_RATIO * cfg.embed_dim) as u64;
    let k = cfg.patch_feature_len() as u64;

    let mut mm = (cfg.n_patch_tokens() as u64) * k * d; // patch embedding
    mm += d * cfg.n_classes as u64; // head on the pooled row
    let mut scores = 0u64;
    let mut scan = 0u64;
    for kind in cfg.schedule()?.kinds() {
        match kind {
            BlockKind::Transformer => {
                mm += 4 * l * d * d; // q, k, v, o projections
                mm += 2 * l * d * hidden; // mlp
                scores += 2 * l * l * d; // QK^T and weights·V across heads
            }
            BlockKind::Mamba => {
                mm += l * d * (2 * di); // shared input projection
                mm += l * di * d; // output projection
                mm += 2 * l * d * hidden; // ffn
                // per direction: causal conv + B/C/delta projections
                mm += 2 * (l * di * CONV_WIDTH as u64);
                mm += 2 * (2 * l * di * n); // w_b and w_c
                mm += 2 * (2 * l * di * r); // delta down/up
                scan += 2 * (6 * l * di * n + l * di);
            }
        }
    }
    Ok(FlopCount {
        matmul_conv: mm,
        attention_scores: scores,
        scan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{preset, ModelParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn inventory_matches_instantiated_model_exactly() {
        let mut cfg = preset("T").unwrap();
        cfg.embed_dim = 32;
        cfg.image_size = 32;
        cfg.patch_size = 8;
        cfg.depth = 8;
        cfg.n_classes = 5;
        cfg.n_heads = 4;
        for use_cls in [true, false] {
            cfg.use_cls_token = use_cls;
            let mut r = ChaCha20Rng::seed_from_u64(50);
            let p = ModelParams::<f32>::init(&cfg, &mut r).unwrap();
            let inv = param_inventory(&cfg).unwrap();
            let real: Vec<(String, Vec<usize>)> = p
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.shape().to_vec()))
                .collect();
            assert_eq!(inv, real);
            assert_eq!(count_params(&cfg).unwrap(), p.n_params());
        }
    }

    #[test]
    fn inventory_matches_video_model() {
        let mut cfg = preset("T").unwrap();
        cfg.embed_dim = 32;
        cfg.image_size = 32;
        cfg.patch_size = 8;
        cfg.depth = 8;
        cfg.n_classes = 3;
        cfg.n_heads = 4;
        cfg.n_frames = 4;
        cfg.tubelet_len = 2;
        let mut r = ChaCha20Rng::seed_from_u64(51);
        let p = ModelParams::<f32>::init(&cfg, &mut r).unwrap();
        let inv = param_inventory(&cfg).unwrap();
        let real: Vec<(String, Vec<usize>)> = p
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        assert_eq!(inv, real);
    }

    #[test]
    fn preset_counts_hit_target_budgets() {
        // Exact counts pinned by an independent enumeration; each must land
        // within ±10% of the target budgets 7M / 27M / 76M / 101M.
        let cases = [
            ("T", 6_446_056usize, 7_000_000f64),
            ("S", 27_033_448, 27_000_000.0),
            ("M", 75_988_200, 76_000_000.0),
            ("B", 101_497_960, 101_000_000.0),
        ];
        for (name, exact, target) in cases {
            let got = count_params(&preset(name).unwrap()).unwrap();
            assert_eq!(got, exact, "preset {name} count drifted");
            let rel = (got as f64 - target) / target;
            assert!(rel.abs() <= 0.10, "preset {name}: {got} vs {target} ({rel:+.3})");
        }
    }

    #[test]
    fn doubling_depth_doubles_block_share_exactly() {
        let mut cfg = preset("T").unwrap();
        cfg.embed_dim = 64;
        cfg.n_heads = 4;
        let extras = {
            let mut c0 = cfg.clone();
            c0.depth = 0;
            count_params(&c0).unwrap()
        };
        cfg.depth = 8;
        let c8 = count_params(&cfg).unwrap();
        cfg.depth = 16;
        let c16 = count_params(&cfg).unwrap();
        assert_eq!(c16 - extras, 2 * (c8 - extras));
    }

    #[test]
    fn ffn_share_of_mamba_block_is_8d2_plus_5d() {
        let mut cfg = preset("T").unwrap();
        cfg.embed_dim = 48;
        cfg.n_heads = 4;
        cfg.depth = 8;
        let d = cfg.embed_dim;
        let inv = param_inventory(&cfg).unwrap();
        let ffn: usize = inv
            .iter()
            .filter(|(n, _)| n.starts_with("blocks.0.ffn."))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        assert_eq!(ffn, 8 * d * d + 5 * d);
    }

    #[test]
    fn flops_headline_of_tiny_preset() {
        // Exact MAC counts pinned by independent arithmetic; windows are
        // ±15% of the 1.2G @224 and 4.5G @448 targets.
        let cfg = preset("T").unwrap();
        let f224 = count_flops(&cfg).unwrap();
        assert_eq!(f224.headline_macs(), 1_194_662_912);
        let rel224 = (f224.headline_macs() as f64 - 1.2e9) / 1.2e9;
        assert!(rel224.abs() <= 0.15, "224 headline off: {rel224:+.4}");

        let mut c448 = cfg.clone();
        c448.image_size = 448;
        let f448 = count_flops(&c448).unwrap();
        assert_eq!(f448.headline_macs(), 4_760_370_176);
        let rel448 = (f448.headline_macs() as f64 - 4.5e9) / 4.5e9;
        assert!(rel448.abs() <= 0.15, "448 headline off: {rel448:+.4}");

        assert_eq!(f224.flops(), 2 * f224.total_macs());
    }

    #[test]
    fn component_scaling_with_sequence_length() {
        // 224 -> 448 quadruples the token count (196 -> 784; +1 class token),
        // so attention-score work scales by (785/197)^2 ≈ 16 and scan work by
        // 785/197 ≈ 4.
        let cfg = preset("T").unwrap();
        let f224 = count_flops(&cfg).unwrap();
        let mut c448 = cfg.clone();
        c448.image_size = 448;
        let f448 = count_flops(&c448).unwrap();
        let lr = 785.0 / 197.0;
        let score_ratio = f448.attention_scores as f64 / f224.attention_scores as f64;
        let scan_ratio = f448.scan as f64 / f224.scan as f64;
        assert!((score_ratio - lr * lr).abs() < 1e-9, "score ratio {score_ratio}");
        assert!((scan_ratio - lr).abs() < 1e-9, "scan ratio {scan_ratio}");
        assert!((score_ratio - 16.0).abs() < 0.5);
        assert!((scan_ratio - 4.0).abs() < 0.1);
    }

    #[test]
    fn zero_depth_is_embed_plus_head_only() {
        let mut cfg = preset("T").unwrap();
        cfg.depth = 0;
        let f = count_flops(&cfg).unwrap();
        assert_eq!(f.attention_scores, 0);
        assert_eq!(f.scan, 0);
        let expect = 196u64 * 768 * 128 + 128 * 1000;
        assert_eq!(f.matmul_conv, expect);
        let params = count_params(&cfg).unwrap();
        // kernel + bias + pos + cls + final norm + head
        let d = 128usize;
        assert_eq!(params, 768 * d + d + 197 * d + d + d + (d * 1000 + 1000));
    }
}
