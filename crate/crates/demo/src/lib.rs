//! Three small operations exported to JavaScript. Each takes plain strings
//! or numbers and returns a JSON document.

use insctc_core::ctc::{ctc_brute_force, ctc_greedy_decode, ctc_log_likelihood, AlignmentPosterior};
use insctc_core::numerics::DenseArray;
use insctc_core::sequence::{
    apply_order, bbt_generations, order_bbt, relpos_matrix, InsertionOrder, Prior, TokenSequence,
    FIRST_CONTENT,
};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

fn error(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

/// Canvases after each balanced-tree generation for a space-separated sentence.
#[wasm_bindgen]
pub fn bbt_growth(sentence: &str) -> String {
    let w = words(sentence);
    if w.is_empty() {
        return error("enter at least one word");
    }
    let gens = bbt_generations(w.len());
    let mut covered = vec![false; w.len()];
    let steps: Vec<Value> = gens
        .iter()
        .map(|g| {
            for &i in g {
                covered[i - 1] = true;
            }
            let canvas: Vec<&str> = (0..w.len()).filter(|&i| covered[i]).map(|i| w[i]).collect();
            let added: Vec<&str> = g.iter().map(|&i| w[i - 1]).collect();
            json!({ "added": added, "canvas": canvas })
        })
        .collect();
    json!({
        "tokens": w.len(),
        "generations": gens.len(),
        "steps": steps,
    })
    .to_string()
}

/// Seeded random posterior over `frames` rows and `labels` symbols (blank
/// included); compares the lattice likelihood of `target` with enumeration.
#[wasm_bindgen]
pub fn ctc_compare(frames: usize, labels: usize, target: &str, seed: u32) -> String {
    if !(1..=8).contains(&frames) || !(2..=4).contains(&labels) {
        return error("frames must be in 1..=8 and labels in 2..=4");
    }
    let y: Result<Vec<usize>, _> = target.split_whitespace().map(str::parse::<usize>).collect();
    let Ok(y) = y else {
        return error("target must be space-separated label ids");
    };
    // xorshift keeps the demo free of extra dependencies
    let mut state = u64::from(seed).wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let logits: Vec<f64> = (0..frames * labels)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 6.0 - 3.0
        })
        .collect();
    let run = || -> insctc_core::Result<Value> {
        let post = AlignmentPosterior::from_logits(&DenseArray::matrix(frames, labels, logits)?, 0)?;
        let lattice = ctc_log_likelihood(&post, &y)?;
        let brute = ctc_brute_force(&post, &y)?;
        let probs: Vec<Vec<f64>> = (0..frames)
            .map(|t| post.log_probs().row(t).iter().map(|v| v.exp()).collect())
            .collect();
        let show = |v: f64| if v.is_finite() { json!(v) } else { json!("-inf") };
        Ok(json!({
            "posterior": probs,
            "lattice": show(lattice),
            "enumeration": show(brute),
            "difference": if lattice.is_finite() { json!((lattice - brute).abs()) } else { json!(0.0) },
            "greedy": ctc_greedy_decode(&post),
        }))
    };
    run().map_or_else(error, |v| v.to_string())
}

/// Relative-position matrix for the sentence generated in `order`: either
/// `l2r`, `bbt`, or the 1-based word positions in the order they are inserted.
#[wasm_bindgen]
pub fn relative_positions(sentence: &str, order: &str) -> String {
    let w = words(sentence);
    let n = w.len();
    let z = match order.trim() {
        "l2r" => Ok(InsertionOrder::new((1..=n).collect(), Prior::L2r).expect("identity order")),
        "bbt" => Ok(order_bbt(n)),
        ranks => ranks
            .split_whitespace()
            .map(str::parse::<usize>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| insctc_core::Error::Config(e.to_string()))
            .and_then(|r| InsertionOrder::new(r, Prior::Uniform)),
    };
    let run = || -> insctc_core::Result<Value> {
        let z = z?;
        let ids = TokenSequence::new((0..n).map(|i| i + FIRST_CONTENT).collect())?;
        let trace = apply_order(&ids, &z)?;
        let r = relpos_matrix(&z, n)?;
        let generated: Vec<&str> = trace.steps.iter().map(|s| w[s.token - FIRST_CONTENT]).collect();
        let slots: Vec<usize> = trace.steps.iter().map(|s| s.slot).collect();
        let rows: Vec<Vec<i8>> = (0..r.side()).map(|i| (0..r.side()).map(|j| r.get(i, j)).collect()).collect();
        Ok(json!({ "generated": generated, "slots": slots, "matrix": rows }))
    };
    run().map_or_else(error, |v| v.to_string())
}
