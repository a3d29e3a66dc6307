use std::fmt;
use std::ops::Deref;

use crate::error::{Error, Result};

pub type TokenId = usize;

/// CTC blank.
pub const BLANK: TokenId = 0;
pub const PAD: TokenId = 1;
/// Marks a finished slot; doubles as end/start of sequence for left-to-right models.
pub const END_OF_SLOT: TokenId = 2;
pub const FIRST_CONTENT: TokenId = 3;

pub fn is_reserved(id: TokenId) -> bool {
    id < FIRST_CONTENT
}

/// Content symbols plus the reserved blank, pad and end-of-slot ids.
///
/// Ids are dense: reserved ids first, then content tokens in order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &symbols {
            if !seen.insert(s.as_str()) {
                return Err(Error::Config(format!("duplicate symbol `{s}`")));
            }
        }
        Ok(Vocabulary { symbols })
    }

    /// `count` content symbols named `t0`, `t1`, ...
    pub fn synthetic(count: usize) -> Self {
        Vocabulary {
            symbols: (0..count).map(|k| format!("t{k}")).collect(),
        }
    }

    /// Size of the full id space, reserved ids included.
    pub fn size(&self) -> usize {
        FIRST_CONTENT + self.symbols.len()
    }

    pub fn content_count(&self) -> usize {
        self.symbols.len()
    }

    pub fn content_id(&self, k: usize) -> TokenId {
        FIRST_CONTENT + k
    }

    pub fn content_ids(&self) -> std::ops::Range<TokenId> {
        FIRST_CONTENT..self.size()
    }

    pub fn is_content(&self, id: TokenId) -> bool {
        (FIRST_CONTENT..self.size()).contains(&id)
    }

    pub fn id_of(&self, symbol: &str) -> Option<TokenId> {
        self.symbols
            .iter()
            .position(|s| s == symbol)
            .map(|k| k + FIRST_CONTENT)
    }

    pub fn symbol(&self, id: TokenId) -> &str {
        match id {
            BLANK => "<blank>",
            PAD => "<pad>",
            END_OF_SLOT => "<eos>",
            _ => self.symbols.get(id - FIRST_CONTENT).map_or("<unk>", String::as_str),
        }
    }

    pub fn encode(&self, words: &[&str]) -> Result<TokenSequence> {
        let ids = words
            .iter()
            .map(|w| {
                self.id_of(w)
                    .ok_or_else(|| Error::Config(format!("unknown symbol `{w}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        TokenSequence::new(ids)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&id| self.symbol(id)).collect()
    }
}

/// Content-token ids in surface order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| is_reserved(id)) {
            return Err(Error::InvalidToken(bad));
        }
        Ok(TokenSequence(ids))
    }

    pub fn empty() -> Self {
        TokenSequence(Vec::new())
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }

    /// Number of adjacent equal pairs.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

impl Deref for TokenSequence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for id in &self.0 {
            if !first {
                f.write_str(" ")?;
            }
            write!(f, "{id}")?;
            first = false;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_dense_and_reserved_first() {
        let v = Vocabulary::new(vec!["this".into(), "is".into()]).unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id_of("this"), Some(FIRST_CONTENT));
        assert!(!v.is_content(BLANK) && !v.is_content(PAD) && !v.is_content(END_OF_SLOT));
        assert_eq!(v.symbol(END_OF_SLOT), "<eos>");
    }

    #[test]
    fn sequences_reject_reserved_ids() {
        assert!(TokenSequence::new(vec![3, 4]).is_ok());
        assert!(matches!(
            TokenSequence::new(vec![3, BLANK]),
            Err(Error::InvalidToken(BLANK))
        ));
    }

    #[test]
    fn duplicate_symbols_are_rejected() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
    }
}
