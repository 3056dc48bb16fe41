use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Role of a token (or table row) in an in-context sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenGroup {
    Context,
    Query,
    Feedback,
}

/// Which groups a token of each group may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupRule {
    pub context: [bool; 3],
    pub query: [bool; 3],
    pub feedback: [bool; 3],
}

fn slot(g: TokenGroup) -> usize {
    match g {
        TokenGroup::Context => 0,
        TokenGroup::Query => 1,
        TokenGroup::Feedback => 2,
    }
}

impl GroupRule {
    /// context -> {context}; query -> {context, feedback};
    /// feedback -> {context, query, feedback}.
    pub const IN_CONTEXT: GroupRule = GroupRule {
        context: [true, false, false],
        query: [true, false, true],
        feedback: [true, true, true],
    };

    pub fn allows(&self, from: TokenGroup, to: TokenGroup) -> bool {
        let row = match from {
            TokenGroup::Context => &self.context,
            TokenGroup::Query => &self.query,
            TokenGroup::Feedback => &self.feedback,
        };
        row[slot(to)]
    }
}

/// Boolean `[S, S]` attention relation; `(i, j)` true means token `i` may
/// attend to token `j`. Every row has at least one allowed entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(size: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != size * size {
            return Err(Error::shape("attention_mask", format!("{} entries for size {size}", allowed.len())));
        }
        for row in 0..size {
            if !allowed[row * size..(row + 1) * size].iter().any(|&a| a) {
                return Err(Error::DegenerateMask { row });
            }
        }
        Ok(AttentionMask { size, allowed })
    }

    pub fn full(size: usize) -> Self {
        AttentionMask { size, allowed: vec![true; size * size] }
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let allowed = (0..size * size).map(|k| f(k / size, k % size)).collect();
        Self::new(size, allowed)
    }

    pub fn from_groups(groups: &[TokenGroup], rule: &GroupRule) -> Result<Self> {
        Self::from_fn(groups.len(), |i, j| rule.allows(groups[i], groups[j]))
    }

    /// Each row attends to context rows, and query rows also to themselves.
    pub fn context_plus_self(groups: &[TokenGroup]) -> Result<Self> {
        Self::from_fn(groups.len(), |i, j| groups[j] == TokenGroup::Context || i == j)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn is_full(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }
}
