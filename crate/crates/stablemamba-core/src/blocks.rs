//! Residual blocks and the Mamba/Transformer interleaving schedule.
//!
//! Both block types are pre-norm residual: the Transformer block is
//! `x + attn(norm(x))` then `x + mlp(norm(x))`; the Mamba block swaps the
//! attention mixer for a bidirectional Mamba layer and keeps an FFN of the
//! same shape in its second half. A stack interleaves the two kinds at a
//! fixed ratio, with the Transformer slot placed per group.

use crate::scalar::Scalar;
use crate::ssm::{bidirectional_mamba, linear_init, BidirMambaParams, BidirMambaVars};
use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Epsilon inside every RMS norm's square root.
pub const RMS_EPS: f64 = 1e-6;
/// Hidden expansion of the MLP / FFN halves.
pub const MLP_RATIO: usize = 4;

// ---- parameters ----

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<E> {
    pub n_heads: usize,
    pub w_q: Tensor<E>,
    pub b_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub b_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub b_v: Tensor<E>,
    pub w_o: Tensor<E>,
    pub b_o: Tensor<E>,
}

/// Two-layer MLP with GELU, hidden width `MLP_RATIO * d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<E> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlockParams<E> {
    pub norm1: Tensor<E>,
    pub attn: AttentionParams<E>,
    pub norm2: Tensor<E>,
    pub mlp: MlpParams<E>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlockParams<E> {
    pub norm1: Tensor<E>,
    pub mixer: BidirMambaParams<E>,
    pub norm2: Tensor<E>,
    pub ffn: MlpParams<E>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockParams<E> {
    Mamba(MambaBlockParams<E>),
    Transformer(TransformerBlockParams<E>),
}

impl<E: Scalar> AttentionParams<E> {
    pub fn init(d: usize, n_heads: usize, rng: &mut ChaCha20Rng) -> Self {
        AttentionParams {
            n_heads,
            w_q: linear_init(d, d, rng),
            b_q: Tensor::zeros(&[d]),
            w_k: linear_init(d, d, rng),
            b_k: Tensor::zeros(&[d]),
            w_v: linear_init(d, d, rng),
            b_v: Tensor::zeros(&[d]),
            w_o: linear_init(d, d, rng),
            b_o: Tensor::zeros(&[d]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<E>); 8] {
        [
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<E>); 8] {
        [
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_k", &mut self.w_k),
            ("b_k", &mut self.b_k),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
        ]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<E>)) {
        for (n, t) in self.fields() {
            f(format!("{prefix}.{n}"), t);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut Tensor<E>)) {
        for (n, t) in self.fields_mut() {
            f(format!("{prefix}.{n}"), t);
        }
    }

    pub fn bind(
        &self,
        tape: &mut Tape<E>,
        rg: bool,
        prefix: &str,
        reg: &mut Vec<(String, Var)>,
    ) -> AttentionVars {
        let vars: Vec<Var> = self
            .fields()
            .iter()
            .map(|(n, t)| {
                let v = tape.leaf((*t).clone(), rg);
                reg.push((format!("{prefix}.{n}"), v));
                v
            })
            .collect();
        AttentionVars {
            n_heads: self.n_heads,
            w_q: vars[0],
            b_q: vars[1],
            w_k: vars[2],
            b_k: vars[3],
            w_v: vars[4],
            b_v: vars[5],
            w_o: vars[6],
            b_o: vars[7],
        }
    }
}

impl<E: Scalar> MlpParams<E> {
    pub fn init(d: usize, rng: &mut ChaCha20Rng) -> Self {
        let hidden = MLP_RATIO * d;
        MlpParams {
            w1: linear_init(d, hidden, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: linear_init(hidden, d, rng),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<E>); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Tensor<E>); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<E>)) {
        for (n, t) in self.fields() {
            f(format!("{prefix}.{n}"), t);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut Tensor<E>)) {
        for (n, t) in self.fields_mut() {
            f(format!("{prefix}.{n}"), t);
        }
    }

    pub fn bind(
        &self,
        tape: &mut Tape<E>,
        rg: bool,
        prefix: &str,
        reg: &mut Vec<(String, Var)>,
    ) -> MlpVars {
        let vars: Vec<Var> = self
            .fields()
            .iter()
            .map(|(n, t)| {
                let v = tape.leaf((*t).clone(), rg);
                reg.push((format!("{prefix}.{n}"), v));
                v
            })
            .collect();
        MlpVars {
            w1: vars[0],
            b1: vars[1],
            w2: vars[2],
            b2: vars[3],
        }
    }
}

impl<E: Scalar> TransformerBlockParams<E> {
    pub fn init(d: usize, n_heads: usize, rng: &mut ChaCha20Rng) -> Self {
        TransformerBlockParams {
            norm1: Tensor::ones(&[d]),
            attn: AttentionParams::init(d, n_heads, rng),
            norm2: Tensor::ones(&[d]),
            mlp: MlpParams::init(d, rng),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<E>)) {
        f(format!("{prefix}.norm1"), &self.norm1);
        self.attn.visit(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.norm2"), &self.norm2);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut Tensor<E>)) {
        f(format!("{prefix}.norm1"), &mut self.norm1);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        f(format!("{prefix}.norm2"), &mut self.norm2);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
    }

    pub fn bind(
        &self,
        tape: &mut Tape<E>,
        rg: bool,
        prefix: &str,
        reg: &mut Vec<(String, Var)>,
    ) -> TransformerBlockVars {
        let norm1 = tape.leaf(self.norm1.clone(), rg);
        reg.push((format!("{prefix}.norm1"), norm1));
        let attn = self.attn.bind(tape, rg, &format!("{prefix}.attn"), reg);
        let norm2 = tape.leaf(self.norm2.clone(), rg);
        reg.push((format!("{prefix}.norm2"), norm2));
        let mlp = self.mlp.bind(tape, rg, &format!("{prefix}.mlp"), reg);
        TransformerBlockVars {
            norm1,
            attn,
            norm2,
            mlp,
        }
    }
}

impl<E: Scalar> MambaBlockParams<E> {
    pub fn init(d: usize, rng: &mut ChaCha20Rng) -> Self {
        MambaBlockParams {
            norm1: Tensor::ones(&[d]),
            mixer: BidirMambaParams::init(d, rng),
            norm2: Tensor::ones(&[d]),
            ffn: MlpParams::init(d, rng),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<E>)) {
        f(format!("{prefix}.norm1"), &self.norm1);
        self.mixer.visit(&format!("{prefix}.mixer"), f);
        f(format!("{prefix}.norm2"), &self.norm2);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut Tensor<E>)) {
        f(format!("{prefix}.norm1"), &mut self.norm1);
        self.mixer.visit_mut(&format!("{prefix}.mixer"), f);
        f(format!("{prefix}.norm2"), &mut self.norm2);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }

    pub fn bind(
        &self,
        tape: &mut Tape<E>,
        rg: bool,
        prefix: &str,
        reg: &mut Vec<(String, Var)>,
    ) -> MambaBlockVars {
        let norm1 = tape.leaf(self.norm1.clone(), rg);
        reg.push((format!("{prefix}.norm1"), norm1));
        let mixer = self.mixer.bind(tape, rg, &format!("{prefix}.mixer"), reg);
        let norm2 = tape.leaf(self.norm2.clone(), rg);
        reg.push((format!("{prefix}.norm2"), norm2));
        let ffn = self.ffn.bind(tape, rg, &format!("{prefix}.ffn"), reg);
        MambaBlockVars {
            norm1,
            mixer,
            norm2,
            ffn,
        }
    }
}

impl<E: Scalar> BlockParams<E> {
    pub fn kind(&self) -> BlockKind {
        match self {
            BlockParams::Mamba(_) => BlockKind::Mamba,
            BlockParams::Transformer(_) => BlockKind::Transformer,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<E>)) {
        match self {
            BlockParams::Mamba(p) => p.visit(prefix, f),
            BlockParams::Transformer(p) => p.visit(prefix, f),
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut Tensor<E>)) {
        match self {
            BlockParams::Mamba(p) => p.visit_mut(prefix, f),
            BlockParams::Transformer(p) => p.visit_mut(prefix, f),
        }
    }

    pub fn bind(
        &self,
        tape: &mut Tape<E>,
        rg: bool,
        prefix: &str,
        reg: &mut Vec<(String, Var)>,
    ) -> BlockVars {
        match self {
            BlockParams::Mamba(p) => BlockVars::Mamba(p.bind(tape, rg, prefix, reg)),
            BlockParams::Transformer(p) => BlockVars::Transformer(p.bind(tape, rg, prefix, reg)),
        }
    }
}

// ---- bound views ----

#[derive(Clone, Copy)]
pub struct AttentionVars {
    pub n_heads: usize,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

#[derive(Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Copy)]
pub struct TransformerBlockVars {
    pub norm1: Var,
    pub attn: AttentionVars,
    pub norm2: Var,
    pub mlp: MlpVars,
}

#[derive(Clone, Copy)]
pub struct MambaBlockVars {
    pub norm1: Var,
    pub mixer: BidirMambaVars,
    pub norm2: Var,
    pub ffn: MlpVars,
}

#[derive(Clone, Copy)]
pub enum BlockVars {
    Mamba(MambaBlockVars),
    Transformer(TransformerBlockVars),
}

// ---- forwards ----

/// Multi-head self-attention on `[L, D]`:
/// `softmax(Q K^T / sqrt(head_dim)) V` per head, heads concatenated, then the
/// output projection. All four projections carry biases.
pub fn self_attention<E: Scalar>(tape: &mut Tape<E>, x: Var, p: &AttentionVars) -> Result<Var> {
    let d = *tape.value(x).shape().last().unwrap_or(&0);
    if p.n_heads == 0 || d % p.n_heads != 0 {
        return Err(TensorError::Invalid {
            op: "self_attention",
            msg: format!("width {d} not divisible by {} heads", p.n_heads),
        });
    }
    let head_dim = d / p.n_heads;
    let q0 = tape.matmul(x, p.w_q)?;
    let q = tape.add_bias(q0, p.b_q)?;
    let k0 = tape.matmul(x, p.w_k)?;
    let k = tape.add_bias(k0, p.b_k)?;
    let v0 = tape.matmul(x, p.w_v)?;
    let v = tape.add_bias(v0, p.b_v)?;
    let qh = tape.split_heads(q, p.n_heads)?;
    let kh = tape.split_heads(k, p.n_heads)?;
    let vh = tape.split_heads(v, p.n_heads)?;
    let kt = tape.transpose_last2(kh)?;
    let scores0 = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores0, 1.0 / (head_dim as f64).sqrt())?;
    let weights = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(weights, vh)?;
    let merged = tape.merge_heads(ctx)?;
    let o = tape.matmul(merged, p.w_o)?;
    tape.add_bias(o, p.b_o)
}

/// `gelu(x W1 + b1) W2 + b2`.
pub fn mlp<E: Scalar>(tape: &mut Tape<E>, x: Var, p: &MlpVars) -> Result<Var> {
    let h0 = tape.matmul(x, p.w1)?;
    let h1 = tape.add_bias(h0, p.b1)?;
    let h = tape.gelu(h1)?;
    let o = tape.matmul(h, p.w2)?;
    tape.add_bias(o, p.b2)
}

/// Pre-norm residual Transformer block.
pub fn transformer_block<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    p: &TransformerBlockVars,
) -> Result<Var> {
    let n1 = tape.rms_norm(x, p.norm1, RMS_EPS)?;
    let a = self_attention(tape, n1, &p.attn)?;
    let x1 = tape.add(x, a)?;
    let n2 = tape.rms_norm(x1, p.norm2, RMS_EPS)?;
    let m = mlp(tape, n2, &p.mlp)?;
    tape.add(x1, m)
}

/// Pre-norm residual Mamba block: bidirectional mixer, then an FFN half of
/// the same shape as the Transformer block's MLP.
pub fn mamba_block<E: Scalar>(tape: &mut Tape<E>, x: Var, p: &MambaBlockVars) -> Result<Var> {
    let n1 = tape.rms_norm(x, p.norm1, RMS_EPS)?;
    let m = bidirectional_mamba(tape, n1, &p.mixer)?;
    let x1 = tape.add(x, m)?;
    let n2 = tape.rms_norm(x1, p.norm2, RMS_EPS)?;
    let f = mlp(tape, n2, &p.ffn)?;
    tape.add(x1, f)
}

/// Run a full interleaved stack.
pub fn stack_forward<E: Scalar>(tape: &mut Tape<E>, x: Var, blocks: &[BlockVars]) -> Result<Var> {
    let mut h = x;
    for b in blocks {
        h = match b {
            BlockVars::Mamba(p) => mamba_block(tape, h, p)?,
            BlockVars::Transformer(p) => transformer_block(tape, h, p)?,
        };
    }
    Ok(h)
}

// ---- interleaving schedule ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Mamba,
    Transformer,
}

/// Where the single Transformer block sits inside each group of
/// `ratio_n + 1` blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformerPosition {
    Start,
    Middle,
    End,
}

impl TransformerPosition {
    /// Index of the Transformer slot within one group.
    pub fn index_in_group(self, ratio_n: usize) -> usize {
        match self {
            TransformerPosition::Start => 0,
            TransformerPosition::Middle => ratio_n / 2,
            TransformerPosition::End => ratio_n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterleaveSchedule {
    kinds: Vec<BlockKind>,
    group_len: usize,
}

/// Lay out `depth` blocks as groups of `ratio_n` Mamba blocks plus one
/// Transformer block at `position`. `depth` must be a multiple of
/// `ratio_n + 1` (zero depth gives an empty schedule).
pub fn build_interleave_schedule(
    depth: usize,
    ratio_n: usize,
    position: TransformerPosition,
) -> Result<InterleaveSchedule> {
    let group_len = ratio_n + 1;
    if depth % group_len != 0 {
        return Err(TensorError::Invalid {
            op: "build_interleave_schedule",
            msg: format!("depth {depth} is not divisible by ratio_n + 1 = {group_len}"),
        });
    }
    let t_at = position.index_in_group(ratio_n);
    let mut kinds = Vec::with_capacity(depth);
    for _ in 0..depth / group_len {
        for i in 0..group_len {
            kinds.push(if i == t_at {
                BlockKind::Transformer
            } else {
                BlockKind::Mamba
            });
        }
    }
    Ok(InterleaveSchedule { kinds, group_len })
}

impl InterleaveSchedule {
    /// Explicit layout, for degenerate stacks the ratio form cannot express
    /// (e.g. attention-only). `group_len` is taken as the whole depth.
    pub fn from_kinds(kinds: Vec<BlockKind>) -> Self {
        let group_len = kinds.len().max(1);
        InterleaveSchedule { kinds, group_len }
    }

    pub fn kinds(&self) -> &[BlockKind] {
        &self.kinds
    }

    pub fn depth(&self) -> usize {
        self.kinds.len()
    }

    pub fn n_mamba(&self) -> usize {
        self.kinds.iter().filter(|k| **k == BlockKind::Mamba).count()
    }

    pub fn n_transformer(&self) -> usize {
        self.kinds.len() - self.n_mamba()
    }

    /// Compact layout string: one letter per block in the repeating group,
    /// times the group count — e.g. `MMMTMMMM x3`.
    pub fn layout_string(&self) -> String {
        if self.kinds.is_empty() {
            return "(empty)".to_string();
        }
        let letters = |ks: &[BlockKind]| -> String {
            ks.iter()
                .map(|k| match k {
                    BlockKind::Mamba => 'M',
                    BlockKind::Transformer => 'T',
                })
                .collect()
        };
        let n_groups = self.kinds.len() / self.group_len;
        let first = &self.kinds[..self.group_len];
        let periodic = self.kinds.chunks(self.group_len).all(|g| g == first);
        if periodic && n_groups > 1 {
            format!("{} x{}", letters(first), n_groups)
        } else {
            letters(&self.kinds)
        }
    }
}
