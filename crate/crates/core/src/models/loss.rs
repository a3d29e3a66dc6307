//! Training objectives: trace likelihoods under an insertion order, the
//! one-generation balanced-tree slot loss, and the CTC interpolation.

use rand::Rng;

use super::{CtcWeight, Model, Variant};
use crate::ctc::ctc_loss_graph;
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Graph, Var};
use crate::sequence::{
    bbt_generations, bbt_slot_targets, order_l2r, sample_order, InsertionOrder, Prior,
    RelativePositionMatrix, TokenId, BLANK, END_OF_SLOT,
};

/// The two halves of the joint objective, each already a negative log-likelihood.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub insertion: Option<Var>,
    pub ctc: Option<Var>,
    /// The transcript cannot be aligned to the frames, so `ctc` is absent.
    pub ctc_infeasible: bool,
}

fn picked_sum(g: &mut Graph, log_probs: Var, idx: &[usize]) -> Result<Var> {
    let picked = g.take(log_probs, idx, &[idx.len()])?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0)
}

fn ctc_term(g: &mut Graph, log_probs: Var, c: &[TokenId], terms: &mut LossTerms) -> Result<()> {
    match ctc_loss_graph(g, log_probs, c, BLANK)? {
        Some(v) => terms.ctc = Some(v),
        None => terms.ctc_infeasible = true,
    }
    Ok(())
}

/// Negative log-likelihood of generating `c` in order `z`, ending with an
/// end-of-slot at the right edge. Left-to-right models require `z = L2R`.
pub fn order_loss(
    model: &Model,
    g: &mut Graph,
    x: &DenseArray,
    c: &[TokenId],
    z: &InsertionOrder,
    alpha: CtcWeight,
) -> Result<LossTerms> {
    if z.len() != c.len() {
        return Err(Error::LengthMismatch(format!(
            "{} tokens, order over {}",
            c.len(),
            z.len()
        )));
    }
    let v = model.config().vocab_size;
    let n = c.len();
    let mut terms = LossTerms::default();
    let variant = model.config().variant;
    if variant == Variant::Kermit {
        let generated = z.permute(c);
        let positions = z.ranks();
        let mut steps = Vec::with_capacity(n + 1);
        let mut ctc_terms = Vec::new();
        for k in 0..=n {
            let mut covered: Vec<usize> = positions[..k].to_vec();
            covered.sort_unstable();
            let canvas: Vec<TokenId> = covered.iter().map(|&p| c[p - 1]).collect();
            let (slot, token) = if k < n {
                (covered.iter().filter(|&&p| p < positions[k]).count(), generated[k])
            } else {
                (n, END_OF_SLOT)
            };
            let out = model.kermit_forward(g, x, &canvas)?;
            if alpha.uses_insertion() {
                let pos = g.take(out.slots.position, &[slot], &[1])?;
                let word = g.take(out.slots.word, &[slot * v + token], &[1])?;
                let step = g.add(pos, word)?;
                steps.push(step);
            }
            if alpha.uses_ctc() {
                let mut t = LossTerms::default();
                ctc_term(g, out.ctc, c, &mut t)?;
                terms.ctc_infeasible = t.ctc_infeasible;
                ctc_terms.extend(t.ctc);
            }
        }
        if !steps.is_empty() {
            let all = g.concat(&steps, 0)?;
            let total = g.sum(all)?;
            terms.insertion = Some(g.scale(total, -1.0)?);
        }
        if let Some((&first, rest)) = ctc_terms.split_first() {
            let mut total = first;
            for &t in rest {
                total = g.add(total, t)?;
            }
            terms.ctc = Some(g.scale(total, 1.0 / ctc_terms.len() as f64)?);
        }
        return Ok(terms);
    }

    let memory = model.encode(g, x)?;
    if alpha.uses_ctc() {
        let lp = model.ctc_log_probs(g, memory)?;
        ctc_term(g, lp, c, &mut terms)?;
    }
    if !alpha.uses_insertion() || variant == Variant::Ctc {
        return Ok(terms);
    }
    terms.insertion = Some(match variant {
        Variant::At => {
            if z.ranks() != order_l2r(n).ranks() {
                return Err(Error::Config("left-to-right model trained on another order".into()));
            }
            let lp = model.at_forward(g, memory, c)?;
            let idx: Vec<usize> = (0..=n)
                .map(|i| i * v + c.get(i).copied().unwrap_or(END_OF_SLOT))
                .collect();
            picked_sum(g, lp, &idx)?
        }
        Variant::Indigo => {
            let generated = z.permute(c);
            let mut positions = Vec::with_capacity(n + 1);
            positions.push(0);
            positions.extend_from_slice(z.ranks());
            let r = RelativePositionMatrix::from_positions(&positions);
            let out = model.indigo_forward(g, memory, &generated, &r)?;
            let idx: Vec<usize> = (0..=n)
                .map(|i| i * v + generated.get(i).copied().unwrap_or(END_OF_SLOT))
                .collect();
            let word = picked_sum(g, out.word, &idx)?;
            if n == 0 {
                word
            } else {
                let queries: Vec<(usize, TokenId)> = generated.iter().copied().enumerate().collect();
                let ptr = model.indigo_pointer(g, out.states, &queries)?;
                let width = n + 1;
                // left neighbour among the start symbol and tokens generated so far
                let idx: Vec<usize> = (0..n)
                    .map(|i| {
                        let target = (0..=i)
                            .filter(|&j| positions[j] < positions[i + 1])
                            .max_by_key(|&j| positions[j])
                            .unwrap_or(0);
                        i * width + target
                    })
                    .collect();
                let pointer = picked_sum(g, ptr, &idx)?;
                g.add(word, pointer)?
            }
        }
        Variant::InsertionTransformer => {
            let generated = z.permute(c);
            let positions = z.ranks();
            let mut steps = Vec::with_capacity(n + 1);
            for k in 0..=n {
                let mut covered: Vec<usize> = positions[..k].to_vec();
                covered.sort_unstable();
                let canvas: Vec<TokenId> = covered.iter().map(|&p| c[p - 1]).collect();
                let (slot, token) = if k < n {
                    (covered.iter().filter(|&&p| p < positions[k]).count(), generated[k])
                } else {
                    (n, END_OF_SLOT)
                };
                let out = model.inst_forward(g, memory, &canvas)?;
                let pos = g.take(out.position, &[slot], &[1])?;
                let word = g.take(out.word, &[slot * v + token], &[1])?;
                steps.push(g.add(pos, word)?);
            }
            let all = g.concat(&steps, 0)?;
            let total = g.sum(all)?;
            g.scale(total, -1.0)?
        }
        Variant::Kermit | Variant::Ctc => unreachable!(),
    });
    Ok(terms)
}

/// [`order_loss`] under the left-to-right order.
pub fn l2r_loss(model: &Model, g: &mut Graph, x: &DenseArray, c: &[TokenId], alpha: CtcWeight) -> Result<LossTerms> {
    order_loss(model, g, x, c, &order_l2r(c.len()), alpha)
}

/// Mean slot cross-entropy on the canvas left after `generation` balanced-tree
/// generations, against each slot's centermost uncovered token.
pub fn bbt_slot_loss(
    model: &Model,
    g: &mut Graph,
    x: &DenseArray,
    c: &[TokenId],
    generation: usize,
    alpha: CtcWeight,
) -> Result<LossTerms> {
    let depth = bbt_generations(c.len()).len();
    if generation > depth {
        return Err(Error::IndexOutOfRange {
            op: "bbt_slot_loss",
            index: generation,
            limit: depth,
        });
    }
    let (canvas, targets) = bbt_slot_targets(c, generation);
    let v = model.config().vocab_size;
    let idx: Vec<usize> = targets.iter().enumerate().map(|(s, &t)| s * v + t).collect();
    let mut terms = LossTerms::default();
    let (word, ctc) = match model.config().variant {
        Variant::InsertionTransformer => {
            let memory = model.encode(g, x)?;
            let ctc = if alpha.uses_ctc() {
                Some(model.ctc_log_probs(g, memory)?)
            } else {
                None
            };
            let word = if alpha.uses_insertion() {
                Some(model.inst_forward(g, memory, &canvas)?.word)
            } else {
                None
            };
            (word, ctc)
        }
        Variant::Kermit => {
            let out = model.kermit_forward(g, x, &canvas)?;
            (
                alpha.uses_insertion().then_some(out.slots.word),
                alpha.uses_ctc().then_some(out.ctc),
            )
        }
        other => {
            return Err(Error::Config(format!(
                "balanced-tree training needs a slot model, not {other}"
            )))
        }
    };
    if let Some(word) = word {
        let total = picked_sum(g, word, &idx)?;
        terms.insertion = Some(g.scale(total, 1.0 / targets.len() as f64)?);
    }
    if let Some(lp) = ctc {
        ctc_term(g, lp, c, &mut terms)?;
    }
    Ok(terms)
}

/// `α · ctc + (1 - α) · insertion`; a missing term counts as zero. `None`
/// when neither term is present.
pub fn joint_loss(g: &mut Graph, terms: &LossTerms, alpha: CtcWeight) -> Result<Option<Var>> {
    let a = alpha.value();
    let ctc = match terms.ctc {
        Some(v) if a > 0.0 => Some(if a == 1.0 { v } else { g.scale(v, a)? }),
        _ => None,
    };
    let ins = match terms.insertion {
        Some(v) if a < 1.0 => Some(if a == 0.0 { v } else { g.scale(v, 1.0 - a)? }),
        _ => None,
    };
    Ok(match (ctc, ins) {
        (Some(x), Some(y)) => Some(g.add(x, y)?),
        (x, y) => x.or(y),
    })
}

/// One training sample: a balanced-tree generation drawn uniformly, or an
/// order drawn from `prior`.
pub fn sampled_loss<R: Rng + ?Sized>(
    model: &Model,
    g: &mut Graph,
    x: &DenseArray,
    c: &[TokenId],
    prior: Prior,
    alpha: CtcWeight,
    rng: &mut R,
) -> Result<LossTerms> {
    match (prior, model.config().variant) {
        (_, Variant::Ctc) | (_, Variant::At) => l2r_loss(model, g, x, c, alpha),
        (Prior::Bbt, _) => {
            let generation = rng.random_range(0..=bbt_generations(c.len()).len());
            bbt_slot_loss(model, g, x, c, generation, alpha)
        }
        (p, _) => {
            let z = sample_order(p, c.len(), rng);
            order_loss(model, g, x, c, &z, alpha)
        }
    }
}
