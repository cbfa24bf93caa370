//! Token sequences shared by the caption model, backends, and metrics.

use crate::error::{Error, Result};

/// Hard token ids for one caption, end marker excluded.
///
/// Decoders strip the end token before constructing a sequence, so an empty
/// sequence means "the model emitted the end marker immediately".
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u32) {
        self.ids.push(id);
    }

    /// Ensure every id is representable in a vocabulary of the given size.
    pub fn check_vocabulary(&self, vocab: usize) -> Result<()> {
        for &id in &self.ids {
            if id as usize >= vocab {
                return Err(Error::Vocabulary { token: id, vocab });
            }
        }
        Ok(())
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        TokenSequence::new(ids)
    }
}

impl std::fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut first = true;
        for id in &self.ids {
            if !first {
                write!(f, " ")?;
            }
            write!(f, "{id}")?;
            first = false;
        }
        Ok(())
    }
}
