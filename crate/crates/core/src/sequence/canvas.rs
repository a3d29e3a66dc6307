use super::vocab::{is_reserved, TokenId, END_OF_SLOT};
use crate::error::{Error, Result};

/// One insertion: `token` goes into gap `slot` of the current canvas.
///
/// Slots are the `n + 1` gaps of an `n`-token canvas: 0 before the first
/// token, `n` after the last.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Insertion {
    pub slot: usize,
    pub token: TokenId,
}

impl Insertion {
    pub fn new(slot: usize, token: TokenId) -> Self {
        Insertion { slot, token }
    }
}

/// The sorted partial hypothesis and which of its slots are closed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Canvas {
    tokens: Vec<TokenId>,
    finished: Vec<bool>,
}

impl Default for Canvas {
    fn default() -> Self {
        Self::new()
    }
}

impl Canvas {
    pub fn new() -> Self {
        Canvas {
            tokens: Vec::new(),
            finished: vec![false],
        }
    }

    /// Canvas holding `tokens` with every slot open.
    pub fn from_tokens(tokens: Vec<TokenId>) -> Self {
        let finished = vec![false; tokens.len() + 1];
        Canvas { tokens, finished }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn slot_count(&self) -> usize {
        self.finished.len()
    }

    pub fn is_finished(&self, slot: usize) -> bool {
        self.finished[slot]
    }

    pub fn finished_slots(&self) -> &[bool] {
        &self.finished
    }

    pub fn all_finished(&self) -> bool {
        self.finished.iter().all(|&f| f)
    }

    pub fn open_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.finished
            .iter()
            .enumerate()
            .filter(|(_, &f)| !f)
            .map(|(i, _)| i)
    }

    /// Pure insertion: returns the grown canvas.
    pub fn insert(&self, slot: usize, token: TokenId) -> Result<Canvas> {
        let mut next = self.clone();
        next.insert_mut(slot, token)?;
        Ok(next)
    }

    /// Inserts a content token into `slot`, or closes `slot` for [`END_OF_SLOT`].
    pub fn insert_mut(&mut self, slot: usize, token: TokenId) -> Result<()> {
        if slot > self.tokens.len() {
            return Err(Error::IndexOutOfRange {
                op: "canvas_insert",
                index: slot,
                limit: self.tokens.len(),
            });
        }
        if self.finished[slot] {
            return Err(Error::SlotFinished { slot });
        }
        if token == END_OF_SLOT {
            self.finished[slot] = true;
            return Ok(());
        }
        if is_reserved(token) {
            return Err(Error::InvalidToken(token));
        }
        self.tokens.insert(slot, token);
        self.finished.insert(slot + 1, false);
        Ok(())
    }

    /// Applies insertions that all refer to slots of the current canvas.
    pub fn insert_parallel(&mut self, batch: &[Insertion]) -> Result<()> {
        let mut sorted = batch.to_vec();
        sorted.sort_by(|a, b| b.slot.cmp(&a.slot));
        if sorted.windows(2).any(|w| w[0].slot == w[1].slot) {
            return Err(Error::LengthMismatch("two insertions target one slot".into()));
        }
        for ins in sorted {
            self.insert_mut(ins.slot, ins.token)?;
        }
        Ok(())
    }

    /// Closes every slot.
    pub fn finish_all(&mut self) {
        self.finished.iter_mut().for_each(|f| *f = true);
    }
}

/// Canvas insertion, as a free function.
pub fn canvas_insert(canvas: &Canvas, slot: usize, token: TokenId) -> Result<Canvas> {
    canvas.insert(slot, token)
}

#[cfg(test)]
mod tests {
    use super::*;

    const THIS: TokenId = 3;
    const A: TokenId = 5;
    const PEN: TokenId = 6;

    #[test]
    fn insert_at_right_end() {
        let c = Canvas::from_tokens(vec![THIS, A]);
        let next = canvas_insert(&c, 2, PEN).unwrap();
        assert_eq!(next.tokens(), &[THIS, A, PEN]);
        assert_eq!(next.slot_count(), 4);
    }

    #[test]
    fn insert_into_empty_canvas() {
        let next = canvas_insert(&Canvas::new(), 0, A).unwrap();
        assert_eq!(next.tokens(), &[A]);
    }

    #[test]
    fn end_of_slot_finishes_without_inserting() {
        let c = Canvas::from_tokens(vec![A]);
        let next = canvas_insert(&c, 0, END_OF_SLOT).unwrap();
        assert_eq!(next.tokens(), &[A]);
        assert_eq!(next.finished_slots(), &[true, false]);
        assert!(matches!(
            next.insert(0, PEN),
            Err(Error::SlotFinished { slot: 0 })
        ));
    }

    #[test]
    fn out_of_range_and_reserved_tokens_fail() {
        let c = Canvas::from_tokens(vec![A]);
        assert!(c.insert(2, PEN).is_err());
        assert!(matches!(c.insert(0, 0), Err(Error::InvalidToken(0))));
    }

    #[test]
    fn finished_slots_survive_neighbouring_insertions() {
        let mut c = Canvas::from_tokens(vec![THIS, A]);
        c.insert_mut(1, END_OF_SLOT).unwrap();
        c.insert_mut(2, PEN).unwrap();
        assert_eq!(c.tokens(), &[THIS, A, PEN]);
        assert_eq!(c.finished_slots(), &[false, true, false, false]);
    }

    #[test]
    fn parallel_insertions_use_pre_insertion_slots() {
        let mut c = Canvas::from_tokens(vec![A]);
        c.insert_parallel(&[Insertion::new(0, THIS), Insertion::new(1, PEN)])
            .unwrap();
        assert_eq!(c.tokens(), &[THIS, A, PEN]);
    }
}
