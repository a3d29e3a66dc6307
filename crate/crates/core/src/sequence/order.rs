//! Insertion orders and their priors.
//!
//! An order lists, for each generation step, the 1-based surface position
//! of the token inserted at that step. Under order `(3, 1, 4, 2)` the third
//! token is inserted first, then the first, and so on.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use super::canvas::{Canvas, Insertion};
use super::vocab::{TokenId, TokenSequence, END_OF_SLOT};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Prior {
    /// Left to right.
    L2r,
    /// Balanced binary tree: centermost tokens of every open span first.
    Bbt,
    /// Every permutation equally likely.
    Uniform,
}

impl FromStr for Prior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2r" => Ok(Prior::L2r),
            "bbt" => Ok(Prior::Bbt),
            "uniform" => Ok(Prior::Uniform),
            other => Err(Error::Config(format!("unknown prior `{other}`"))),
        }
    }
}

impl fmt::Display for Prior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Prior::L2r => "l2r",
            Prior::Bbt => "bbt",
            Prior::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InsertionOrder {
    ranks: Vec<usize>,
    prior: Prior,
}

impl InsertionOrder {
    /// Validates that `ranks` is a permutation of `1..=n`.
    pub fn new(ranks: Vec<usize>, prior: Prior) -> Result<Self> {
        let n = ranks.len();
        let mut seen = vec![false; n + 1];
        for &r in &ranks {
            if r == 0 || r > n || seen[r] {
                return Err(Error::LengthMismatch(format!(
                    "{ranks:?} is not a permutation of 1..={n}"
                )));
            }
            seen[r] = true;
        }
        Ok(InsertionOrder { ranks, prior })
    }

    pub fn ranks(&self) -> &[usize] {
        &self.ranks
    }

    pub fn prior(&self) -> Prior {
        self.prior
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    /// The permuted sequence `C^Z`: tokens in generation order.
    pub fn permute(&self, c: &[TokenId]) -> Vec<TokenId> {
        self.ranks.iter().map(|&r| c[r - 1]).collect()
    }
}

pub fn order_l2r(n: usize) -> InsertionOrder {
    InsertionOrder {
        ranks: (1..=n).collect(),
        prior: Prior::L2r,
    }
}

/// Center of the open span `lo..=hi` (1-based) in a length-`n` sequence.
///
/// Even spans have two centermost tokens; the one nearer the middle of the
/// whole sequence wins, and the left one when both are equally near.
pub fn bbt_center(lo: usize, hi: usize, n: usize) -> usize {
    debug_assert!(lo <= hi);
    let len = hi - lo + 1;
    if len % 2 == 1 {
        return lo + len / 2;
    }
    let left = lo + len / 2 - 1;
    let right = left + 1;
    let mid2 = (n + 1) as isize;
    let dl = (2 * left as isize - mid2).abs();
    let dr = (2 * right as isize - mid2).abs();
    if dr < dl {
        right
    } else {
        left
    }
}

/// Surface positions inserted in each balanced-binary-tree generation, ascending.
pub fn bbt_generations(n: usize) -> Vec<Vec<usize>> {
    let mut generations = Vec::new();
    let mut spans = vec![(1usize, n)];
    while spans.iter().any(|&(lo, hi)| lo <= hi) {
        let mut picked = Vec::new();
        let mut next = Vec::new();
        for (lo, hi) in spans {
            if lo > hi {
                continue;
            }
            let c = bbt_center(lo, hi, n);
            picked.push(c);
            next.push((lo, c - 1));
            next.push((c + 1, hi));
        }
        generations.push(picked);
        spans = next;
    }
    generations
}

pub fn order_bbt(n: usize) -> InsertionOrder {
    InsertionOrder {
        ranks: bbt_generations(n).into_iter().flatten().collect(),
        prior: Prior::Bbt,
    }
}

/// Canvas after `generation` BBT generations, and the target of each of its slots.
///
/// A slot's target is the center of the uncovered span it faces, or
/// [`END_OF_SLOT`] when that span is empty.
pub fn bbt_slot_targets(c: &[TokenId], generation: usize) -> (Vec<TokenId>, Vec<TokenId>) {
    let n = c.len();
    let mut covered: Vec<usize> = bbt_generations(n)
        .into_iter()
        .take(generation)
        .flatten()
        .collect();
    covered.sort_unstable();
    let canvas = covered.iter().map(|&p| c[p - 1]).collect();
    let mut bounds = Vec::with_capacity(covered.len() + 2);
    bounds.push(0);
    bounds.extend_from_slice(&covered);
    bounds.push(n + 1);
    let targets = bounds
        .windows(2)
        .map(|w| {
            let (lo, hi) = (w[0] + 1, w[1] - 1);
            if w[1] - w[0] > 1 {
                c[bbt_center(lo, hi, n) - 1]
            } else {
                END_OF_SLOT
            }
        })
        .collect();
    (canvas, targets)
}

/// Draws an order from `prior`. Only [`Prior::Uniform`] consumes randomness.
pub fn sample_order<R: Rng + ?Sized>(prior: Prior, n: usize, rng: &mut R) -> InsertionOrder {
    match prior {
        Prior::L2r => order_l2r(n),
        Prior::Bbt => order_bbt(n),
        Prior::Uniform => {
            let mut ranks: Vec<usize> = (1..=n).collect();
            ranks.shuffle(rng);
            InsertionOrder {
                ranks,
                prior: Prior::Uniform,
            }
        }
    }
}

/// `ln p(Z)` under `prior`; `-inf` for orders the prior never produces.
pub fn order_log_prob(prior: Prior, ranks: &[usize]) -> f64 {
    let n = ranks.len();
    match prior {
        Prior::Uniform => -(1..=n).map(|k| (k as f64).ln()).sum::<f64>(),
        Prior::L2r | Prior::Bbt => {
            let reference = if prior == Prior::L2r {
                order_l2r(n)
            } else {
                order_bbt(n)
            };
            if reference.ranks() == ranks {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

/// Every permutation of `1..=n` in lexicographic order.
pub fn all_orders(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        let n = used.len();
        if prefix.len() == n {
            out.push(prefix.clone());
            return;
        }
        for r in 0..n {
            if !used[r] {
                used[r] = true;
                prefix.push(r + 1);
                rec(prefix, used, out);
                prefix.pop();
                used[r] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(n), &mut vec![false; n], &mut out);
    out
}

/// Step-by-step insertions of a sequence under an order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InsertionTrace {
    /// `(token, slot)` per step; the slot indexes the canvas before the step.
    pub steps: Vec<Insertion>,
    /// Sorted canvas after each step.
    pub prefixes: Vec<Vec<TokenId>>,
}

impl InsertionTrace {
    pub fn replay(&self) -> Result<Vec<TokenId>> {
        let mut canvas = Canvas::new();
        for step in &self.steps {
            canvas.insert_mut(step.slot, step.token)?;
        }
        Ok(canvas.tokens().to_vec())
    }
}

pub fn apply_order(c: &TokenSequence, z: &InsertionOrder) -> Result<InsertionTrace> {
    if c.len() != z.len() {
        return Err(Error::LengthMismatch(format!(
            "sequence of {} tokens, order of {}",
            c.len(),
            z.len()
        )));
    }
    let mut inserted: Vec<usize> = Vec::with_capacity(c.len());
    let mut steps = Vec::with_capacity(c.len());
    let mut prefixes = Vec::with_capacity(c.len());
    for &pos in z.ranks() {
        let slot = inserted.iter().filter(|&&p| p < pos).count();
        inserted.insert(slot, pos);
        steps.push(Insertion::new(slot, c[pos - 1]));
        prefixes.push(inserted.iter().map(|&p| c[p - 1]).collect());
    }
    Ok(InsertionTrace { steps, prefixes })
}
