//! Attention, transformer blocks and block stacks.

mod attention;
mod context;
mod layers;
mod mask;

pub use attention::{Block, BlockConfig, MultiHeadAttention, Stack, StackConfig, StackKind};
pub use context::{CapturedAttention, Ctx};
pub use layers::{LayerNorm, Linear, Mlp, EMBED_INIT};
pub use mask::{AttentionMask, GroupRule, TokenGroup};
