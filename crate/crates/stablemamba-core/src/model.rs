//! End-to-end classifier assembly: configuration, patch/tubelet embedding,
//! class token, positional table, interleaved stack, and head.

use crate::blocks::{
    build_interleave_schedule, stack_forward, BlockKind, BlockParams, BlockVars,
    InterleaveSchedule, MambaBlockParams, TransformerBlockParams, TransformerPosition,
};
use crate::scalar::Scalar;
use crate::ssm::linear_init;
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Input channels; all images and videos are RGB.
pub const N_CHANNELS: usize = 3;

/// Full architectural description of one classifier.
///
/// Serialized verbatim as the `model` section of config files; unknown keys
/// are rejected. A missing field falls back to the tiny preset's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Preset name this config was derived from, echo only.
    pub preset: Option<String>,
    pub embed_dim: usize,
    pub depth: usize,
    /// Mamba blocks per Transformer block in each group.
    pub ratio_n: usize,
    pub transformer_position: TransformerPosition,
    pub patch_size: usize,
    /// Temporal patch extent; 1 for images.
    pub tubelet_len: usize,
    pub image_size: usize,
    pub n_frames: usize,
    pub n_heads: usize,
    pub n_classes: usize,
    /// Readout from a learned class token when true, mean pooling otherwise.
    pub use_cls_token: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        preset("T").expect("tiny preset exists")
    }
}

/// Named preset dimensions. The depths/widths are calibrated so the exact
/// parameter counter lands on the target budgets of 7M / 27M / 76M / 101M
/// within tolerance; the counter is the arbiter.
pub fn preset(name: &str) -> Result<ModelConfig> {
    let (embed_dim, depth, n_heads) = match name {
        "T" | "t" | "tiny" => (128, 24, 4),
        "S" | "s" | "small" => (272, 24, 4),
        "M" | "m" | "middle" => (400, 32, 8),
        "B" | "b" | "base" => (536, 24, 8),
        other => {
            return Err(TensorError::Invalid {
                op: "preset",
                msg: format!("unknown preset {other:?} (expected T, S, M, or B)"),
            })
        }
    };
    Ok(ModelConfig {
        preset: Some(name.to_uppercase()),
        embed_dim,
        depth,
        ratio_n: 7,
        transformer_position: TransformerPosition::Middle,
        patch_size: 16,
        tubelet_len: 1,
        image_size: 224,
        n_frames: 1,
        n_heads,
        n_classes: 1000,
        use_cls_token: true,
    })
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| TensorError::Invalid {
            op: "ModelConfig::validate",
            msg,
        };
        if self.embed_dim == 0 || self.n_classes == 0 || self.patch_size == 0 {
            return Err(bad("embed_dim, n_classes, patch_size must be positive".into()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.tubelet_len == 0 || self.n_frames % self.tubelet_len != 0 {
            return Err(bad(format!(
                "n_frames {} not divisible by tubelet_len {}",
                self.n_frames, self.tubelet_len
            )));
        }
        if self.depth % (self.ratio_n + 1) != 0 {
            return Err(bad(format!(
                "depth {} not divisible by ratio_n + 1 = {}",
                self.depth,
                self.ratio_n + 1
            )));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(bad(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    /// Patch tokens per frame-slab.
    pub fn patches_per_frame(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Patch tokens before the class token.
    pub fn n_patch_tokens(&self) -> usize {
        (self.n_frames / self.tubelet_len) * self.patches_per_frame()
    }

    /// Full sequence length seen by the stack.
    pub fn seq_len(&self) -> usize {
        self.n_patch_tokens() + usize::from(self.use_cls_token)
    }

    /// Flattened patch feature size (channels × tubelet × patch²).
    pub fn patch_feature_len(&self) -> usize {
        N_CHANNELS * self.tubelet_len * self.patch_size * self.patch_size
    }

    pub fn schedule(&self) -> Result<InterleaveSchedule> {
        build_interleave_schedule(self.depth, self.ratio_n, self.transformer_position)
    }
}

// ---- parameters ----

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<E> {
    /// Patch/tubelet convolution kernel `[D, C, t, p, p]`.
    pub patch_kernel: Tensor<E>,
    pub patch_bias: Tensor<E>,
    /// Learned positional table `[seq_len, D]`, zero-initialized.
    pub pos_table: Tensor<E>,
    /// Learned class token `[1, D]`; absent under mean pooling.
    pub cls_token: Option<Tensor<E>>,
    pub blocks: Vec<BlockParams<E>>,
    pub final_norm: Tensor<E>,
    pub head_w: Tensor<E>,
    pub head_b: Tensor<E>,
}

pub struct ModelVars {
    pub patch_kernel: Var,
    pub patch_bias: Var,
    pub pos_table: Var,
    pub cls_token: Option<Var>,
    pub blocks: Vec<BlockVars>,
    pub final_norm: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl<E: Scalar> ModelParams<E> {
    /// Initialize with the schedule derived from the config.
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule()?;
        Self::init_with_schedule(cfg, &schedule, rng)
    }

    /// Initialize with an explicit block layout — used for degenerate stacks
    /// (e.g. attention-only) that the ratio form cannot express. Skips the
    /// depth/ratio divisibility check; geometry checks still apply.
    pub fn init_with_schedule(
        cfg: &ModelConfig,
        schedule: &InterleaveSchedule,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let d = cfg.embed_dim;
        let k = cfg.patch_feature_len();
        let blocks = schedule
            .kinds()
            .iter()
            .map(|kind| match kind {
                BlockKind::Mamba => BlockParams::Mamba(MambaBlockParams::init(d, rng)),
                BlockKind::Transformer => {
                    BlockParams::Transformer(TransformerBlockParams::init(d, cfg.n_heads, rng))
                }
            })
            .collect();
        Ok(ModelParams {
            patch_kernel: Tensor::randn(
                &[d, N_CHANNELS, cfg.tubelet_len, cfg.patch_size, cfg.patch_size],
                1.0 / (k as f64).sqrt(),
                rng,
            ),
            patch_bias: Tensor::zeros(&[d]),
            pos_table: Tensor::zeros(&[cfg.seq_len(), d]),
            cls_token: cfg
                .use_cls_token
                .then(|| Tensor::randn(&[1, d], 0.02, rng)),
            blocks,
            final_norm: Tensor::ones(&[d]),
            head_w: linear_init(d, cfg.n_classes, rng),
            head_b: Tensor::zeros(&[cfg.n_classes]),
        })
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<E>)) {
        f("patch_kernel".into(), &self.patch_kernel);
        f("patch_bias".into(), &self.patch_bias);
        f("pos_table".into(), &self.pos_table);
        if let Some(c) = &self.cls_token {
            f("cls_token".into(), c);
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        f("final_norm".into(), &self.final_norm);
        f("head_w".into(), &self.head_w);
        f("head_b".into(), &self.head_b);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut Tensor<E>)) {
        f("patch_kernel".into(), &mut self.patch_kernel);
        f("patch_bias".into(), &mut self.patch_bias);
        f("pos_table".into(), &mut self.pos_table);
        if let Some(c) = &mut self.cls_token {
            f("cls_token".into(), c);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        f("final_norm".into(), &mut self.final_norm);
        f("head_w".into(), &mut self.head_w);
        f("head_b".into(), &mut self.head_b);
    }

    /// All parameters as `(name, tensor)` pairs in traversal order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<E>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape<E>, rg: bool, reg: &mut Vec<(String, Var)>) -> ModelVars {
        let leaf = |name: String, t: &Tensor<E>, tape: &mut Tape<E>, reg: &mut Vec<(String, Var)>| {
            let v = tape.leaf(t.clone(), rg);
            reg.push((name, v));
            v
        };
        let patch_kernel = leaf("patch_kernel".into(), &self.patch_kernel, tape, reg);
        let patch_bias = leaf("patch_bias".into(), &self.patch_bias, tape, reg);
        let pos_table = leaf("pos_table".into(), &self.pos_table, tape, reg);
        let cls_token = self
            .cls_token
            .as_ref()
            .map(|c| leaf("cls_token".into(), c, tape, reg));
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.bind(tape, rg, &format!("blocks.{i}"), reg))
            .collect();
        let final_norm = leaf("final_norm".into(), &self.final_norm, tape, reg);
        let head_w = leaf("head_w".into(), &self.head_w, tape, reg);
        let head_b = leaf("head_b".into(), &self.head_b, tape, reg);
        ModelVars {
            patch_kernel,
            patch_bias,
            pos_table,
            cls_token,
            blocks,
            final_norm,
            head_w,
            head_b,
        }
    }
}

// ---- embedding ----

/// Flatten an image `[C,H,W]` or video `[C,T,H,W]` into patch rows
/// `[L, C·t·p·p]`. Token order is time-major then row-major spatial; the
/// within-row feature order matches the kernel layout `[C, t, p, p]`.
pub fn extract_patches<E: Scalar>(input: &Tensor<E>, cfg: &ModelConfig) -> Result<Tensor<E>> {
    let s = input.shape().to_vec();
    let (t_total, h, w) = match s.as_slice() {
        [c, h, w] if *c == N_CHANNELS => (1usize, *h, *w),
        [c, t, h, w] if *c == N_CHANNELS => (*t, *h, *w),
        _ => {
            return Err(TensorError::Invalid {
                op: "extract_patches",
                msg: format!("expected [3,H,W] or [3,T,H,W], got {s:?}"),
            })
        }
    };
    let p = cfg.patch_size;
    let tl = cfg.tubelet_len;
    if h != cfg.image_size || w != cfg.image_size || t_total != cfg.n_frames {
        return Err(TensorError::Invalid {
            op: "extract_patches",
            msg: format!(
                "input geometry {s:?} does not match config (image {}, frames {})",
                cfg.image_size, cfg.n_frames
            ),
        });
    }
    let hp = h / p;
    let wp = w / p;
    let tp = t_total / tl;
    let k = cfg.patch_feature_len();
    let l = tp * hp * wp;
    let data = input.data();
    let plane = h * w;
    let frame_stride = plane; // within one channel, consecutive frames
    let chan_stride = t_total * plane;
    let mut out = vec![E::ZERO; l * k];
    for ti in 0..tp {
        for py in 0..hp {
            for px in 0..wp {
                let token = ti * hp * wp + py * wp + px;
                let base = token * k;
                let mut f = 0;
                for c in 0..N_CHANNELS {
                    for dt in 0..tl {
                        let frame = ti * tl + dt;
                        for dy in 0..p {
                            let row = py * p + dy;
                            let src = c * chan_stride + frame * frame_stride + row * w + px * p;
                            for dx in 0..p {
                                out[base + f] = data[src + dx];
                                f += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[l, k], out))
}

/// Patch/tubelet embedding: im2col rows times the flattened kernel, plus bias.
pub fn embed_tokens<E: Scalar>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    vars: &ModelVars,
    input: &Tensor<E>,
) -> Result<Var> {
    let patches = extract_patches(input, cfg)?;
    let pv = tape.leaf(patches, false);
    let k = cfg.patch_feature_len();
    let kernel2d = tape.reshape(vars.patch_kernel, &[cfg.embed_dim, k])?;
    let kernel_t = tape.transpose_last2(kernel2d)?;
    let tokens = tape.matmul(pv, kernel_t)?;
    tape.add_bias(tokens, vars.patch_bias)
}

/// Full forward pass: embed, prepend the class token, add the positional
/// table, run the stack, final RMS norm, read out, project to logits
/// `[n_classes]`.
pub fn model_forward<E: Scalar>(
    tape: &mut Tape<E>,
    cfg: &ModelConfig,
    vars: &ModelVars,
    input: &Tensor<E>,
) -> Result<Var> {
    let tokens = embed_tokens(tape, cfg, vars, input)?;
    let z = match vars.cls_token {
        Some(c) => tape.concat_rows(c, tokens)?,
        None => tokens,
    };
    let z = tape.add(z, vars.pos_table)?;
    let h = stack_forward(tape, z, &vars.blocks)?;
    let h = tape.rms_norm(h, vars.final_norm, crate::blocks::RMS_EPS)?;
    let pooled = if vars.cls_token.is_some() {
        tape.slice_rows(h, 0, 1)?
    } else {
        let m = tape.mean_rows(h)?;
        tape.reshape(m, &[1, cfg.embed_dim])?
    };
    let o = tape.matmul(pooled, vars.head_w)?;
    let o = tape.add_bias(o, vars.head_b)?;
    tape.reshape(o, &[cfg.n_classes])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::{finite_diff_check, FiniteDiffConfig};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            preset: None,
            embed_dim: 16,
            depth: 0,
            ratio_n: 7,
            transformer_position: TransformerPosition::Middle,
            patch_size: 8,
            tubelet_len: 1,
            image_size: 32,
            n_frames: 1,
            n_heads: 4,
            n_classes: 5,
            use_cls_token: true,
        }
    }

    #[test]
    fn token_counts_match_geometry() {
        let mut c = preset("T").unwrap();
        assert_eq!(c.n_patch_tokens(), 196);
        assert_eq!(c.seq_len(), 197);
        c.image_size = 448;
        assert_eq!(c.n_patch_tokens(), 784);
        c.image_size = 224;
        c.n_frames = 16;
        assert_eq!(c.n_patch_tokens(), 3136);
        assert_eq!(c.seq_len(), 3137);
    }

    #[test]
    fn preset_rejects_unknown_name() {
        assert!(preset("X").is_err());
    }

    #[test]
    fn validate_catches_geometry_errors() {
        let mut c = tiny_cfg();
        c.image_size = 33;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.depth = 7; // not divisible by ratio_n + 1 = 8
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.n_frames = 3;
        c.tubelet_len = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_roundtrip_and_unknown_field_rejection() {
        let c = preset("S").unwrap();
        let j = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&j).unwrap();
        assert_eq!(back, c);
        let bad = r#"{"embed_dim": 64, "embedd_dim": 64}"#;
        assert!(serde_json::from_str::<ModelConfig>(bad).is_err());
        // Partial configs fall back to tiny-preset defaults.
        let partial: ModelConfig = serde_json::from_str(r#"{"embed_dim": 64}"#).unwrap();
        assert_eq!(partial.embed_dim, 64);
        assert_eq!(partial.depth, 24);
    }

    #[test]
    fn constant_image_with_averaging_kernel_gives_identical_tokens() {
        let cfg = tiny_cfg();
        let mut r = rng(40);
        let mut p = ModelParams::<f64>::init(&cfg, &mut r).unwrap();
        let k = cfg.patch_feature_len();
        for v in p.patch_kernel.data_mut() {
            *v = 1.0 / k as f64;
        }
        let img = Tensor::full(&[3, 32, 32], 0.37);
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let vars = p.bind(&mut tape, false, &mut reg);
        let tokens = embed_tokens(&mut tape, &cfg, &vars, &img).unwrap();
        let t = tape.value(tokens);
        assert_eq!(t.shape(), &[16, cfg.embed_dim]);
        let first = &t.data()[..cfg.embed_dim];
        for row in t.data().chunks(cfg.embed_dim) {
            for (a, b) in row.iter().zip(first) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_frame_tubelet_equals_2d_patches() {
        let cfg = tiny_cfg();
        let mut r = rng(41);
        let img = Tensor::<f64>::randn(&[3, 32, 32], 1.0, &mut r);
        let vid = img.reshaped(&[3, 1, 32, 32]).unwrap();
        let mut vcfg = cfg.clone();
        vcfg.n_frames = 1;
        let a = extract_patches(&img, &cfg).unwrap();
        let b = extract_patches(&vid, &vcfg).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn video_patch_order_is_time_major() {
        // Two frames, each constant-valued: the first patches_per_frame
        // tokens must come from frame 0.
        let mut cfg = tiny_cfg();
        cfg.n_frames = 2;
        let mut data = vec![0.0f64; 3 * 2 * 32 * 32];
        // channel-major layout [C,T,H,W]: frame 1 entries get value 1.
        for c in 0..3 {
            for i in 0..(32 * 32) {
                data[c * 2 * 32 * 32 + 32 * 32 + i] = 1.0;
            }
        }
        let vid = Tensor::new(&[3, 2, 32, 32], data);
        let p = extract_patches(&vid, &cfg).unwrap();
        let k = cfg.patch_feature_len();
        let ppf = cfg.patches_per_frame();
        for (i, row) in p.data().chunks(k).enumerate() {
            let want = if i < ppf { 0.0 } else { 1.0 };
            assert!(row.iter().all(|&v| v == want), "token {i} wrong frame");
        }
    }

    #[test]
    fn forward_logits_shape_and_sensitivity() {
        let mut cfg = tiny_cfg();
        cfg.depth = 8;
        let mut r = rng(42);
        let p = ModelParams::<f32>::init(&cfg, &mut r).unwrap();
        let img_a = Tensor::<f32>::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut r);
        let img_b = Tensor::<f32>::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let vars = p.bind(&mut tape, false, &mut reg);
        let la = model_forward(&mut tape, &cfg, &vars, &img_a).unwrap();
        let lb = model_forward(&mut tape, &cfg, &vars, &img_b).unwrap();
        assert_eq!(tape.value(la).shape(), &[cfg.n_classes]);
        let diff = tape.value(la).max_abs_diff(tape.value(lb));
        assert!(diff > 1e-6, "different images must give different logits");
    }

    #[test]
    fn mean_pool_readout_works_without_cls_token() {
        let mut cfg = tiny_cfg();
        cfg.use_cls_token = false;
        cfg.depth = 8;
        let mut r = rng(43);
        let p = ModelParams::<f32>::init(&cfg, &mut r).unwrap();
        assert!(p.cls_token.is_none());
        assert_eq!(p.pos_table.shape(), &[16, cfg.embed_dim]);
        let img = Tensor::<f32>::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let vars = p.bind(&mut tape, false, &mut reg);
        let l = model_forward(&mut tape, &cfg, &vars, &img).unwrap();
        assert_eq!(tape.value(l).shape(), &[cfg.n_classes]);
    }

    #[test]
    fn attention_only_stack_is_permutation_invariant_at_cls() {
        // With a zero positional table (its initialization) and no Mamba
        // blocks, spatially permuting the image's patches permutes token rows
        // only; attention treats them as a set, so the class-token logits are
        // unchanged.
        let mut cfg = tiny_cfg();
        cfg.depth = 2;
        cfg.ratio_n = 0;
        let schedule = InterleaveSchedule::from_kinds(vec![
            BlockKind::Transformer,
            BlockKind::Transformer,
        ]);
        let mut r = rng(44);
        let p = ModelParams::<f64>::init_with_schedule(&cfg, &schedule, &mut r).unwrap();
        let img = Tensor::<f64>::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut r);

        // Permute the 4x4 grid of 8x8 patches spatially.
        let perm: Vec<usize> = vec![5, 0, 12, 7, 9, 3, 15, 1, 14, 2, 8, 11, 4, 13, 6, 10];
        let mut permuted = vec![0.0f64; img.numel()];
        let ps = cfg.patch_size;
        for (dst_tok, &src_tok) in perm.iter().enumerate() {
            let (dy, dx) = (dst_tok / 4, dst_tok % 4);
            let (sy, sx) = (src_tok / 4, src_tok % 4);
            for c in 0..3 {
                for y in 0..ps {
                    for x in 0..ps {
                        let d = c * 32 * 32 + (dy * ps + y) * 32 + dx * ps + x;
                        let s = c * 32 * 32 + (sy * ps + y) * 32 + sx * ps + x;
                        permuted[d] = img.data()[s];
                    }
                }
            }
        }
        let img_p = Tensor::new(&[3, 32, 32], permuted);

        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let vars = p.bind(&mut tape, false, &mut reg);
        let la = model_forward(&mut tape, &cfg, &vars, &img).unwrap();
        let lb = model_forward(&mut tape, &cfg, &vars, &img_p).unwrap();
        let diff = tape.value(la).max_abs_diff(tape.value(lb));
        assert!(diff < 1e-5, "cls logits changed under patch permutation: {diff}");
    }

    #[test]
    fn reduced_model_full_gradient_check() {
        // Full classifier backward vs central differences on sampled
        // coordinates, with the real training loss (smoothed cross-entropy).
        let mut cfg = tiny_cfg();
        cfg.embed_dim = 32;
        cfg.depth = 8;
        let mut r = rng(45);
        let p0 = ModelParams::<f64>::init(&cfg, &mut r).unwrap();
        let img = Tensor::<f64>::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut r);
        let label = 3usize;

        let mut params: Vec<(String, Tensor<f64>)> = Vec::new();
        p0.visit(&mut |n, t| params.push((n, t.clone())));

        // Loss scaled toward O(0.1) so roundoff at exactly-zero-gradient
        // coordinates (attention key bias) stays below the relative floor.
        let loss_fn = |ps: &[(String, Tensor<f64>)]| -> crate::tensor::Result<f64> {
            let mut q = p0.clone();
            let mut idx = 0;
            q.visit_mut(&mut |_, t| {
                *t = ps[idx].1.clone();
                idx += 1;
            });
            let mut tape = Tape::new();
            let mut reg = Vec::new();
            let vars = q.bind(&mut tape, false, &mut reg);
            let logits = model_forward(&mut tape, &cfg, &vars, &img)?;
            let row = tape.reshape(logits, &[1, cfg.n_classes])?;
            let ce = tape.cross_entropy(row, &[label], 0.1)?;
            let s = tape.scale(ce, 1.0 / 64.0)?;
            Ok(tape.value(s).item())
        };

        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let vars = p0.bind(&mut tape, true, &mut reg);
        let logits = model_forward(&mut tape, &cfg, &vars, &img).unwrap();
        let row = tape.reshape(logits, &[1, cfg.n_classes]).unwrap();
        let ce = tape.cross_entropy(row, &[label], 0.1).unwrap();
        let s = tape.scale(ce, 1.0 / 64.0).unwrap();
        tape.backward(s).unwrap();
        let grads: Vec<Option<Tensor<f64>>> =
            reg.iter().map(|(_, v)| tape.grad(*v).cloned()).collect();

        let cfg_fd = FiniteDiffConfig {
            max_coords_per_tensor: Some(2),
            seed: 7,
            ..FiniteDiffConfig::default()
        };
        let report = finite_diff_check(&params, &grads, loss_fn, &cfg_fd).unwrap();
        assert!(
            report.passed(),
            "model gradients out of tolerance: worst {:?}",
            report.worst
        );
    }

    #[test]
    fn bind_and_visit_agree_on_names() {
        let mut cfg = tiny_cfg();
        cfg.depth = 8;
        let mut r = rng(46);
        let p = ModelParams::<f32>::init(&cfg, &mut r).unwrap();
        let mut tape = Tape::new();
        let mut reg = Vec::new();
        let _ = p.bind(&mut tape, false, &mut reg);
        let visited: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        let bound: Vec<String> = reg.into_iter().map(|(n, _)| n).collect();
        assert_eq!(visited, bound);
    }
}
