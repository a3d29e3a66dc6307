//! Inference loops over abstract scorers, and adapters that bind a trained
//! [`Model`] and one utterance to those scorers.

use std::fmt;
use std::str::FromStr;

use crate::ctc::{ctc_greedy_decode, AlignmentPosterior};
use crate::error::{Error, Result};
use crate::models::{Model, Variant};
use crate::numerics::{argmax, DenseArray, Graph};
use crate::sequence::{
    bbt_generations, bbt_slot_targets, is_reserved, Canvas, Insertion, Prior,
    RelativePositionMatrix, TokenId, TokenSequence, BLANK, END_OF_SLOT,
};

/// Per-slot distributions over a canvas.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotScores {
    /// `log p(l)`, one entry per slot.
    pub position: Vec<f64>,
    /// `log p(c | l)`, `[slots, |V'|]`.
    pub word: DenseArray,
}

/// Scores every slot of a sorted canvas.
pub trait SlotScorer {
    fn score_slots(&self, canvas: &Canvas) -> Result<SlotScores>;
}

/// Proposes the single next insertion given the canvas and the insertions
/// that built it, in generation order.
pub trait InsertionPolicy {
    fn next_insertion(&self, canvas: &Canvas, history: &[Insertion]) -> Result<Insertion>;
}

/// Next-token log-probabilities after a left-to-right prefix.
pub trait NextTokenScorer {
    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// CTC posteriors conditioned on a canvas.
pub trait CanvasCtc {
    fn ctc_log_probs(&self, canvas: &[TokenId]) -> Result<DenseArray>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    AllSlotsFinished,
    MaxIterations,
    MaxLength,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    pub hypothesis: TokenSequence,
    /// Model evaluations spent.
    pub iterations: usize,
    /// Insertions applied at each iteration, end-of-slot markers included.
    pub steps: Vec<Vec<Insertion>>,
    pub termination: Termination,
}

impl DecodeResult {
    /// Canvas after each iteration.
    pub fn snapshots(&self) -> Result<Vec<Canvas>> {
        let mut canvas = Canvas::new();
        let mut out = Vec::with_capacity(self.steps.len());
        for batch in &self.steps {
            canvas.insert_parallel(batch)?;
            out.push(canvas.clone());
        }
        Ok(out)
    }

    /// Tokens the trace builds.
    pub fn replay(&self) -> Result<Vec<TokenId>> {
        Ok(self
            .snapshots()?
            .last()
            .map(|c| c.tokens().to_vec())
            .unwrap_or_default())
    }
}

fn emittable(token: TokenId) -> bool {
    token == END_OF_SLOT || !is_reserved(token)
}

/// Best content-or-end token of a row; ties go to the lowest id.
fn best_token(row: &[f64]) -> TokenId {
    let mut best = END_OF_SLOT;
    for (t, &v) in row.iter().enumerate() {
        if emittable(t) && v > row[best] {
            best = t;
        }
    }
    // an earlier emittable id wins ties against end-of-slot
    (0..row.len())
        .find(|&t| emittable(t) && row[t] == row[best])
        .unwrap_or(best)
}

fn finish(canvas: Canvas, iterations: usize, steps: Vec<Vec<Insertion>>, termination: Termination) -> Result<DecodeResult> {
    Ok(DecodeResult {
        hypothesis: TokenSequence::new(canvas.tokens().to_vec())?,
        iterations,
        steps,
        termination,
    })
}

/// Joint `(token, slot)` argmax of a [`SlotScorer`] over open slots.
pub struct JointArgmax<'a>(pub &'a dyn SlotScorer);

impl InsertionPolicy for JointArgmax<'_> {
    fn next_insertion(&self, canvas: &Canvas, _history: &[Insertion]) -> Result<Insertion> {
        let scores = self.0.score_slots(canvas)?;
        let mut best: Option<(f64, Insertion)> = None;
        for slot in canvas.open_slots() {
            for (token, &w) in scores.word.row(slot).iter().enumerate() {
                if !emittable(token) {
                    continue;
                }
                let s = scores.position[slot] + w;
                let better = match best {
                    None => true,
                    Some((bs, b)) => s > bs || (s == bs && (token, slot) < (b.token, b.slot)),
                };
                if better {
                    best = Some((s, Insertion::new(slot, token)));
                }
            }
        }
        best.map(|b| b.1)
            .ok_or_else(|| Error::Config("no open slot to score".into()))
    }
}

/// One insertion per iteration until the policy emits end-of-slot or the
/// canvas holds `max_len` tokens.
pub fn greedy_insertion_decode(policy: &dyn InsertionPolicy, max_len: usize) -> Result<DecodeResult> {
    let mut canvas = Canvas::new();
    let mut history = Vec::new();
    let mut steps = Vec::new();
    loop {
        if canvas.len() >= max_len {
            return finish(canvas, steps.len(), steps, Termination::MaxLength);
        }
        let ins = policy.next_insertion(&canvas, &history)?;
        canvas.insert_mut(ins.slot, ins.token)?;
        steps.push(vec![ins]);
        if ins.token == END_OF_SLOT {
            canvas.finish_all();
            return finish(canvas, steps.len(), steps, Termination::AllSlotsFinished);
        }
        history.push(ins);
    }
}

/// Fills every open slot with its best token at once; end-of-slot closes a
/// slot for good. At most `max_len` tokens are kept, leftmost first.
pub fn parallel_decode(scorer: &dyn SlotScorer, max_iters: usize, max_len: usize) -> Result<DecodeResult> {
    let mut canvas = Canvas::new();
    let mut steps = Vec::new();
    loop {
        if canvas.all_finished() {
            return finish(canvas, steps.len(), steps, Termination::AllSlotsFinished);
        }
        if steps.len() >= max_iters {
            return finish(canvas, steps.len(), steps, Termination::MaxIterations);
        }
        let scores = scorer.score_slots(&canvas)?;
        let mut room = max_len.saturating_sub(canvas.len());
        let mut batch = Vec::new();
        let mut truncated = false;
        for slot in canvas.open_slots() {
            let token = best_token(scores.word.row(slot));
            if token != END_OF_SLOT {
                if room == 0 {
                    truncated = true;
                    continue;
                }
                room -= 1;
            }
            batch.push(Insertion::new(slot, token));
        }
        canvas.insert_parallel(&batch)?;
        steps.push(batch);
        if truncated || (canvas.len() >= max_len && !canvas.all_finished()) {
            return finish(canvas, steps.len(), steps, Termination::MaxLength);
        }
    }
}

/// Left-to-right argmax until end-of-sequence or `max_len` tokens.
pub fn at_greedy_decode(scorer: &dyn NextTokenScorer, max_len: usize) -> Result<DecodeResult> {
    let mut prefix: Vec<TokenId> = Vec::new();
    let mut steps = Vec::new();
    loop {
        if prefix.len() >= max_len {
            let canvas = Canvas::from_tokens(prefix);
            return finish(canvas, steps.len(), steps, Termination::MaxLength);
        }
        let lp = scorer.next_log_probs(&prefix)?;
        let token = best_token(&lp);
        steps.push(vec![Insertion::new(prefix.len(), token)]);
        if token == END_OF_SLOT {
            let canvas = Canvas::from_tokens(prefix);
            return finish(canvas, steps.len(), steps, Termination::AllSlotsFinished);
        }
        prefix.push(token);
    }
}

/// Greedy CTC path with reserved ids other than blank dropped.
pub fn ctc_hypothesis(log_probs: DenseArray) -> Result<TokenSequence> {
    let post = AlignmentPosterior::new(log_probs, BLANK)?;
    let ids = ctc_greedy_decode(&post)
        .into_iter()
        .filter(|&t| !is_reserved(t))
        .collect();
    TokenSequence::new(ids)
}

/// Result of [`joint_ctc_readout`]: the CTC hypothesis and the insertion
/// pass that conditioned it.
#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    pub result: DecodeResult,
    /// Final canvas of the parallel pass, which the trace replays to.
    pub canvas: TokenSequence,
}

/// Reads the hypothesis from the CTC posterior conditioned on the final
/// canvas of `canvas_pass`, at the cost of one more evaluation.
pub fn ctc_readout<S: CanvasCtc + ?Sized>(model: &S, canvas_pass: DecodeResult) -> Result<Readout> {
    let lp = model.ctc_log_probs(&canvas_pass.hypothesis)?;
    let hypothesis = ctc_hypothesis(lp)?;
    Ok(Readout {
        canvas: canvas_pass.hypothesis.clone(),
        result: DecodeResult {
            hypothesis,
            iterations: canvas_pass.iterations + 1,
            steps: canvas_pass.steps,
            termination: canvas_pass.termination,
        },
    })
}

/// Parallel decoding, then one more pass whose canvas-conditioned CTC
/// posterior is read out greedily.
pub fn joint_ctc_readout<S: SlotScorer + CanvasCtc>(model: &S, max_iters: usize, max_len: usize) -> Result<Readout> {
    ctc_readout(model, parallel_decode(model, max_iters, max_len)?)
}

/// Parallel cap for transcripts up to `max_tokens`.
pub fn parallel_iteration_cap(max_tokens: usize) -> usize {
    2 * (usize::BITS - max_tokens.leading_zeros()) as usize + 2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    GreedyInsertion,
    Parallel,
    AtGreedy,
    CtcGreedy,
    JointCtcReadout,
}

impl DecodeMode {
    /// Whether `variant` trained with CTC weight `alpha` can decode this way.
    pub fn check(self, variant: Variant, alpha: f64) -> Result<()> {
        let ok = match self {
            DecodeMode::GreedyInsertion => {
                matches!(variant, Variant::Indigo | Variant::InsertionTransformer | Variant::Kermit)
            }
            DecodeMode::Parallel => variant.scores_slots(),
            DecodeMode::AtGreedy => variant == Variant::At,
            DecodeMode::CtcGreedy => variant == Variant::Ctc || alpha > 0.0,
            DecodeMode::JointCtcReadout => variant == Variant::Kermit && alpha > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "decode mode {self} does not fit {variant} trained with ctc weight {alpha}"
            )))
        }
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "greedy-insertion" => DecodeMode::GreedyInsertion,
            "parallel" => DecodeMode::Parallel,
            "at-greedy" => DecodeMode::AtGreedy,
            "ctc-greedy" => DecodeMode::CtcGreedy,
            "joint-ctc-readout" => DecodeMode::JointCtcReadout,
            other => return Err(Error::Config(format!("unknown decode mode `{other}`"))),
        })
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::GreedyInsertion => "greedy-insertion",
            DecodeMode::Parallel => "parallel",
            DecodeMode::AtGreedy => "at-greedy",
            DecodeMode::CtcGreedy => "ctc-greedy",
            DecodeMode::JointCtcReadout => "joint-ctc-readout",
        })
    }
}

/// A model bound to one utterance, with encoder states computed once.
pub struct BoundModel<'a> {
    model: &'a Model,
    x: &'a DenseArray,
    memory: Option<DenseArray>,
}

impl<'a> BoundModel<'a> {
    pub fn new(model: &'a Model, x: &'a DenseArray) -> Result<Self> {
        let memory = if model.config().variant == Variant::Kermit {
            None
        } else {
            let mut g = Graph::inference(model.params());
            let h = model.encode(&mut g, x)?;
            Some(g.value(h).clone())
        };
        Ok(BoundModel { model, x, memory })
    }

    fn memory(&self, g: &mut Graph) -> Result<crate::numerics::Var> {
        let m = self.memory.as_ref().ok_or_else(|| {
            Error::Config(format!("{} has no separate encoder", self.model.config().variant))
        })?;
        g.constant(m.clone())
    }

    /// Like [`BoundModel::decode`], except that the joint readout builds its
    /// canvas one insertion at a time when `prior` is not slot-parallel.
    pub fn decode_for_prior(&self, mode: DecodeMode, prior: Prior) -> Result<DecodeResult> {
        if mode == DecodeMode::JointCtcReadout && prior != Prior::Bbt {
            mode.check(self.model.config().variant, self.model.config().ctc_weight.value())?;
            let canvas = greedy_insertion_decode(self, self.model.config().max_tokens)?;
            return Ok(ctc_readout(self, canvas)?.result);
        }
        self.decode(mode)
    }

    /// Decodes with `mode`, capping lengths at the model's `max_tokens`.
    pub fn decode(&self, mode: DecodeMode) -> Result<DecodeResult> {
        let cfg = self.model.config();
        mode.check(cfg.variant, cfg.ctc_weight.value())?;
        let max_len = cfg.max_tokens;
        match mode {
            DecodeMode::GreedyInsertion => greedy_insertion_decode(self, max_len),
            DecodeMode::Parallel => parallel_decode(self, parallel_iteration_cap(max_len), max_len),
            DecodeMode::AtGreedy => at_greedy_decode(self, max_len),
            DecodeMode::CtcGreedy => {
                let lp = match cfg.variant {
                    Variant::Kermit => self.ctc_log_probs(&[])?,
                    _ => {
                        let mut g = Graph::inference(self.model.params());
                        let mem = self.memory(&mut g)?;
                        let lp = self.model.ctc_log_probs(&mut g, mem)?;
                        g.value(lp).clone()
                    }
                };
                Ok(DecodeResult {
                    hypothesis: ctc_hypothesis(lp)?,
                    iterations: 1,
                    steps: Vec::new(),
                    termination: Termination::AllSlotsFinished,
                })
            }
            DecodeMode::JointCtcReadout => {
                Ok(joint_ctc_readout(self, parallel_iteration_cap(max_len), max_len)?.result)
            }
        }
    }
}

impl SlotScorer for BoundModel<'_> {
    fn score_slots(&self, canvas: &Canvas) -> Result<SlotScores> {
        let mut g = Graph::inference(self.model.params());
        let out = match self.model.config().variant {
            Variant::Kermit => self.model.kermit_forward(&mut g, self.x, canvas.tokens())?.slots,
            _ => {
                let mem = self.memory(&mut g)?;
                self.model.inst_forward(&mut g, mem, canvas.tokens())?
            }
        };
        Ok(SlotScores {
            position: g.value(out.position).data().to_vec(),
            word: g.value(out.word).clone(),
        })
    }
}

impl CanvasCtc for BoundModel<'_> {
    fn ctc_log_probs(&self, canvas: &[TokenId]) -> Result<DenseArray> {
        let mut g = Graph::inference(self.model.params());
        let out = self.model.kermit_forward(&mut g, self.x, canvas)?;
        Ok(g.value(out.ctc).clone())
    }
}

impl NextTokenScorer for BoundModel<'_> {
    fn next_log_probs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut g = Graph::inference(self.model.params());
        let mem = self.memory(&mut g)?;
        let lp = self.model.at_forward(&mut g, mem, prefix)?;
        Ok(g.value(lp).row(prefix.len()).to_vec())
    }
}

/// Surface positions (1-based) of tokens in generation order.
fn surface_positions(history: &[Insertion]) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::with_capacity(history.len());
    for (k, ins) in history.iter().enumerate() {
        order.insert(ins.slot, k);
    }
    let mut pos = vec![0; history.len()];
    for (surface, &k) in order.iter().enumerate() {
        pos[k] = surface + 1;
    }
    pos
}

impl InsertionPolicy for BoundModel<'_> {
    fn next_insertion(&self, canvas: &Canvas, history: &[Insertion]) -> Result<Insertion> {
        if self.model.config().variant != Variant::Indigo {
            return JointArgmax(self).next_insertion(canvas, history);
        }
        let generated: Vec<TokenId> = history.iter().map(|i| i.token).collect();
        let positions = surface_positions(history);
        let mut with_start = Vec::with_capacity(positions.len() + 1);
        with_start.push(0);
        with_start.extend_from_slice(&positions);
        let r = RelativePositionMatrix::from_positions(&with_start);
        let mut g = Graph::inference(self.model.params());
        let mem = self.memory(&mut g)?;
        let out = self.model.indigo_forward(&mut g, mem, &generated, &r)?;
        let m = generated.len();
        let word = best_token(g.value(out.word).row(m));
        if word == END_OF_SLOT {
            return Ok(Insertion::new(canvas.len(), END_OF_SLOT));
        }
        let ptr = self.model.indigo_pointer(&mut g, out.states, &[(m, word)])?;
        let j = argmax(g.value(ptr).row(0));
        let slot = if j == 0 { 0 } else { positions[j - 1] };
        Ok(Insertion::new(slot, word))
    }
}

/// Scores each slot of a balanced-tree prefix of `target` with its
/// centermost uncovered token, as a perfectly trained model would.
#[derive(Clone, Debug)]
pub struct BbtOracle {
    target: Vec<TokenId>,
    vocab_size: usize,
}

impl BbtOracle {
    pub fn new(target: Vec<TokenId>, vocab_size: usize) -> Self {
        BbtOracle { target, vocab_size }
    }
}

impl SlotScorer for BbtOracle {
    fn score_slots(&self, canvas: &Canvas) -> Result<SlotScores> {
        let depth = bbt_generations(self.target.len()).len();
        let targets = (0..=depth)
            .map(|g| bbt_slot_targets(&self.target, g))
            .find(|(c, _)| c == canvas.tokens())
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Config("canvas is not a balanced-tree prefix of the target".into()))?;
        let slots = targets.len();
        let v = self.vocab_size;
        let (hit, miss) = (0.9f64.ln(), (0.1 / (v - 1) as f64).ln());
        let mut word = DenseArray::full(&[slots, v], miss);
        for (s, &t) in targets.iter().enumerate() {
            word.data_mut()[s * v + t] = hit;
        }
        Ok(SlotScores {
            position: vec![-(slots as f64).ln(); slots],
            word,
        })
    }
}
