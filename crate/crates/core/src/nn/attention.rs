use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerNorm, Linear, Mlp};
use super::mask::AttentionMask;
use super::Ctx;
use crate::autodiff::{ParamBuilder, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-block transformer dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    #[serde(default)]
    pub dropout_p: f64,
}

impl BlockConfig {
    /// From-scratch backbone block: 256 wide, 8 heads, FFN 1024, dropout 0.1.
    pub fn base() -> Self {
        BlockConfig { model_dim: 256, n_heads: 8, ffn_dim: 1024, dropout_p: 0.1 }
    }

    /// PFN backbone block: 96 wide, 4 heads, FFN 192.
    pub fn pfn() -> Self {
        BlockConfig { model_dim: 96, n_heads: 4, ffn_dim: 192, dropout_p: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::config("block", "dimensions must be positive"));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::config(
                "block.n_heads",
                format!("{} heads do not divide model_dim {}", self.n_heads, self.model_dim),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config("block.dropout_p", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Multi-head scaled dot-product attention over `[B, S, d]` inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
    pub dim: usize,
    pub dropout_p: f64,
    /// Label attached to captured attention weights.
    pub tag: &'static str,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, cfg: &BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        Ok(MultiHeadAttention {
            query: Linear::new(&mut pb.sub("query"), d, d)?,
            key: Linear::new(&mut pb.sub("key"), d, d)?,
            value: Linear::new(&mut pb.sub("value"), d, d)?,
            out: Linear::new(&mut pb.sub("out"), d, d)?,
            n_heads: cfg.n_heads,
            dim: d,
            dropout_p: cfg.dropout_p,
            tag: "attention",
        })
    }

    /// `x` is `[S, d]` or `[B, S, d]`; `mask` (if any) is `[S, S]` and shared
    /// across the batch. Disallowed pairs receive exactly zero weight.
    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let t = ctx.tape;
        let shape = t.shape(x);
        let (b, s, d) = match shape[..] {
            [s, d] => (1, s, d),
            [b, s, d] => (b, s, d),
            _ => return Err(Error::shape("attention", format!("input {shape:?}"))),
        };
        if d != self.dim {
            return Err(Error::shape("attention", format!("feature dim {d} vs model_dim {}", self.dim)));
        }
        if let Some(m) = mask {
            if m.size() != s {
                return Err(Error::shape("attention", format!("mask size {} vs sequence {s}", m.size())));
            }
        }
        let (h, dh) = (self.n_heads, d / self.n_heads);
        let split = |v: Var| -> Result<Var> {
            let v = t.reshape(v, &[b, s, h, dh])?;
            t.permute(v, &[0, 2, 1, 3])
        };
        let q = split(self.query.forward(ctx, x)?)?;
        let k = split(self.key.forward(ctx, x)?)?;
        let v = split(self.value.forward(ctx, x)?)?;
        let scores = t.batch_matmul(q, k, true)?;
        let scores = t.scale(scores, T::one() / T::from_usize_c(dh).sqrt())?;
        let probs = match mask {
            Some(m) if !m.is_full() => t.masked_softmax(scores, Some((m.as_slice(), s)))?,
            _ => t.softmax(scores)?,
        };
        if ctx.capturing() {
            ctx.record_attention(self.tag, t.tensor(probs));
        }
        let probs = ctx.dropout(probs, self.dropout_p)?;
        let mixed = t.batch_matmul(probs, v, false)?;
        let mixed = t.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = t.reshape(mixed, &shape)?;
        self.out.forward(ctx, mixed)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `+ FFN(LN(.))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
}

impl Block {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, cfg: &BlockConfig) -> Result<Self> {
        Ok(Block {
            norm1: LayerNorm::new(&mut pb.sub("norm1"), cfg.model_dim)?,
            attn: MultiHeadAttention::new(&mut pb.sub("attn"), cfg)?,
            norm2: LayerNorm::new(&mut pb.sub("norm2"), cfg.model_dim)?,
            ffn: Mlp::new(&mut pb.sub("ffn"), cfg.model_dim, cfg.ffn_dim, cfg.model_dim, cfg.dropout_p)?,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        ctx.count_block();
        let t = ctx.tape;
        let a = self.attn.forward(ctx, self.norm1.forward(ctx, x)?, mask)?;
        let x = t.add(x, a)?;
        let f = self.ffn.forward(ctx, self.norm2.forward(ctx, x)?)?;
        t.add(x, f)
    }
}

/// Depth layout of a block stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StackKind {
    /// `layers` distinct blocks.
    Plain { layers: usize },
    /// `2 * layers` distinct blocks.
    Deeper { layers: usize },
    /// `blocks` distinct blocks applied in order `loops` times.
    Looped { blocks: usize, loops: usize },
}

impl StackKind {
    pub fn effective_depth(&self) -> usize {
        match *self {
            StackKind::Plain { layers } => layers,
            StackKind::Deeper { layers } => 2 * layers,
            StackKind::Looped { blocks, loops } => blocks * loops,
        }
    }

    /// Number of distinct (owned) blocks.
    pub fn distinct_blocks(&self) -> usize {
        match *self {
            StackKind::Plain { layers } => layers,
            StackKind::Deeper { layers } => 2 * layers,
            StackKind::Looped { blocks, .. } => blocks,
        }
    }

    /// Times the distinct blocks are applied.
    pub fn loops(&self) -> usize {
        match *self {
            StackKind::Looped { loops, .. } => loops,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    #[serde(flatten)]
    pub kind: StackKind,
    pub block: BlockConfig,
}

impl StackConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.kind.distinct_blocks() == 0 || self.kind.loops() == 0 {
            return Err(Error::config("stack", "depth must be positive"));
        }
        Ok(())
    }
}

/// A stack of blocks laid out per [`StackKind`].
#[derive(Clone, Debug)]
pub struct Stack {
    pub kind: StackKind,
    pub blocks: Vec<Block>,
}

impl Stack {
    pub fn new<T: Scalar, R: Rng>(pb: &mut ParamBuilder<'_, T, R>, cfg: &StackConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.kind.distinct_blocks())
            .map(|i| Block::new(&mut pb.sub(&format!("block{i}")), &cfg.block))
            .collect::<Result<_>>()?;
        Ok(Stack { kind: cfg.kind, blocks })
    }

    pub fn forward<T: Scalar>(&self, ctx: &Ctx<'_, T>, mut x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        for _ in 0..self.kind.loops() {
            for b in &self.blocks {
                x = b.forward(ctx, x, mask)?;
            }
        }
        Ok(x)
    }
}
