use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Vocabulary size and sequence length. The mask token is the extra symbol
/// with index `vocab_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub vocab_size: usize,
    pub len: usize,
}

impl SequenceSpec {
    pub fn new(vocab_size: usize, len: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::Config(format!("vocab_size must be >= 2, got {vocab_size}")));
        }
        if len < 1 {
            return Err(Error::Config("sequence length must be >= 1".into()));
        }
        Ok(Self { vocab_size, len })
    }

    #[inline]
    pub fn mask(&self) -> Token {
        self.vocab_size as Token
    }

    /// Number of symbols per position including the mask.
    #[inline]
    pub fn n_symbols(&self) -> usize {
        self.vocab_size + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceState {
    spec: SequenceSpec,
    tokens: Vec<Token>,
}

impl SequenceState {
    pub fn new(spec: SequenceSpec, tokens: Vec<Token>) -> Result<Self> {
        if tokens.len() != spec.len {
            return Err(Error::Shape(format!(
                "expected {} tokens, got {}",
                spec.len,
                tokens.len()
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&v| v > spec.mask()) {
            return Err(Error::InvalidInput(format!(
                "token {bad} outside vocabulary of size {}",
                spec.vocab_size
            )));
        }
        Ok(Self { spec, tokens })
    }

    pub fn all_masked(spec: SequenceSpec) -> Self {
        Self { spec, tokens: vec![spec.mask(); spec.len] }
    }

    pub fn spec(&self) -> SequenceSpec {
        self.spec
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[inline]
    pub fn get(&self, d: usize) -> Token {
        self.tokens[d]
    }

    #[inline]
    pub fn is_masked(&self, d: usize) -> bool {
        self.tokens[d] == self.spec.mask()
    }

    /// Sets position `d`; `value` may be the mask token.
    pub fn set(&mut self, d: usize, value: Token) {
        assert!(value <= self.spec.mask(), "token {value} outside vocabulary");
        self.tokens[d] = value;
    }

    /// The mask operator: a copy with position `d` replaced by the mask.
    pub fn masked_at(&self, d: usize) -> Self {
        let mut out = self.clone();
        out.tokens[d] = self.spec.mask();
        out
    }

    pub fn mask_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&d| self.is_masked(d)).collect()
    }

    pub fn unmasked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&d| !self.is_masked(d)).collect()
    }

    pub fn n_masked(&self) -> usize {
        self.tokens.iter().filter(|&&v| v == self.spec.mask()).count()
    }

    pub fn has_mask(&self) -> bool {
        self.tokens.contains(&self.spec.mask())
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.tokens.iter().zip(&other.tokens).filter(|(a, b)| a != b).count()
    }

    /// Index in the flattened `(S+1)^D` product space, first position most significant.
    pub fn dense_index(&self) -> usize {
        let base = self.spec.n_symbols();
        self.tokens.iter().fold(0, |acc, &v| acc * base + v as usize)
    }

    pub fn from_dense_index(spec: SequenceSpec, mut index: usize) -> Self {
        let base = spec.n_symbols();
        let mut tokens = vec![0; spec.len];
        for slot in tokens.iter_mut().rev() {
            *slot = (index % base) as Token;
            index /= base;
        }
        Self { spec, tokens }
    }
}

impl std::fmt::Display for SequenceState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, &v) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            if v == self.spec.mask() {
                f.write_str("_")?;
            } else {
                write!(f, "{v}")?;
            }
        }
        Ok(())
    }
}
