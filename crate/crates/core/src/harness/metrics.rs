//! Levenshtein scoring of hypotheses against references.

use std::fmt;
use std::ops::{Add, AddAssign};

use crate::sequence::TokenId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn new(substitutions: usize, deletions: usize, insertions: usize) -> Self {
        EditCounts {
            substitutions,
            deletions,
            insertions,
        }
    }

    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Ordering key: fewer errors, then more substitutions, then more deletions.
    fn key(&self) -> (usize, std::cmp::Reverse<usize>, std::cmp::Reverse<usize>) {
        use std::cmp::Reverse;
        (self.errors(), Reverse(self.substitutions), Reverse(self.deletions))
    }

    /// Whether `self` is the preferred alignment of the two.
    pub fn preferred_over(&self, other: &EditCounts) -> bool {
        self.key() < other.key()
    }
}

impl Add for EditCounts {
    type Output = EditCounts;

    fn add(self, o: EditCounts) -> EditCounts {
        EditCounts::new(
            self.substitutions + o.substitutions,
            self.deletions + o.deletions,
            self.insertions + o.insertions,
        )
    }
}

impl AddAssign for EditCounts {
    fn add_assign(&mut self, o: EditCounts) {
        *self = *self + o;
    }
}

/// Minimum-error alignment counts. Among equally short alignments the one
/// with the most substitutions, then the most deletions, wins.
pub fn edit_distance(reference: &[TokenId], hypothesis: &[TokenId]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut best = vec![EditCounts::default(); (n + 1) * w];
    for j in 1..=m {
        best[j] = EditCounts::new(0, 0, j);
    }
    for i in 1..=n {
        best[i * w] = EditCounts::new(0, i, 0);
        for j in 1..=m {
            let same = reference[i - 1] == hypothesis[j - 1];
            let diag = best[(i - 1) * w + j - 1] + EditCounts::new(usize::from(!same), 0, 0);
            let del = best[(i - 1) * w + j] + EditCounts::new(0, 1, 0);
            let ins = best[i * w + j - 1] + EditCounts::new(0, 0, 1);
            let mut cell = diag;
            for cand in [del, ins] {
                if cand.preferred_over(&cell) {
                    cell = cand;
                }
            }
            best[i * w + j] = cell;
        }
    }
    best[n * w + m]
}

#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub counts: EditCounts,
    pub ref_len: usize,
    pub iterations: Option<usize>,
}

/// Per-utterance counts and their totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreReport {
    pub utterances: Vec<UtteranceScore>,
    pub total: EditCounts,
    pub ref_len: usize,
}

impl ScoreReport {
    pub fn push(&mut self, score: UtteranceScore) {
        self.total += score.counts;
        self.ref_len += score.ref_len;
        self.utterances.push(score);
    }

    /// `(S + D + I) / reference tokens`; zero for an empty, error-free set.
    pub fn error_rate(&self) -> f64 {
        let e = self.total.errors();
        if e == 0 {
            0.0
        } else {
            e as f64 / self.ref_len.max(1) as f64
        }
    }

    /// Mean decoder evaluations over utterances that report them.
    pub fn mean_iterations(&self) -> Option<f64> {
        let its: Vec<usize> = self.utterances.iter().filter_map(|u| u.iterations).collect();
        (!its.is_empty()).then(|| its.iter().sum::<usize>() as f64 / its.len() as f64)
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.total;
        write!(
            f,
            "utterances {} ref_tokens {} sub {} del {} ins {} error_rate {:.4}",
            self.utterances.len(),
            self.ref_len,
            t.substitutions,
            t.deletions,
            t.insertions,
            self.error_rate()
        )?;
        if let Some(m) = self.mean_iterations() {
            write!(f, " mean_iterations {m:.3}")?;
        }
        Ok(())
    }
}
