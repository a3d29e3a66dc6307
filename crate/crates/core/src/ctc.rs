//! Connectionist temporal classification: the collapse map, the forward
//! lattice in log space, a brute-force enumeration oracle, greedy decoding
//! and a loss whose gradient comes from the autodiff tape.

use crate::error::{Error, Result};
use crate::numerics::{argmax, log_sum_exp, stable_log_softmax, DenseArray, Graph, ParamStore, Var};
use crate::sequence::TokenId;

/// Stand-in for `-inf` inside the differentiable lattice.
pub const LOG_ZERO: f64 = -1e30;

const ROW_TOLERANCE: f64 = 1e-9;

/// Per-frame log-probabilities over the label set (blank included).
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentPosterior {
    log_probs: DenseArray,
    blank: TokenId,
}

impl AlignmentPosterior {
    /// Validates a `T × K` array of log-normalized rows.
    pub fn new(log_probs: DenseArray, blank: TokenId) -> Result<Self> {
        if log_probs.rank() != 2 || log_probs.rows() == 0 {
            return Err(Error::InvalidShape {
                shape: log_probs.shape().to_vec(),
                len: log_probs.len(),
            });
        }
        if blank >= log_probs.cols() {
            return Err(Error::InvalidToken(blank));
        }
        for r in 0..log_probs.rows() {
            let mass: f64 = log_probs.row(r).iter().map(|v| v.exp()).sum();
            if (mass - 1.0).abs() > ROW_TOLERANCE {
                return Err(Error::NotNormalized { row: r, mass });
            }
        }
        Ok(AlignmentPosterior { log_probs, blank })
    }

    /// Normalizes raw scores with a log-softmax over each row.
    pub fn from_logits(logits: &DenseArray, blank: TokenId) -> Result<Self> {
        Self::new(stable_log_softmax(logits, 1)?, blank)
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn labels(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn blank(&self) -> TokenId {
        self.blank
    }

    pub fn log_probs(&self) -> &DenseArray {
        &self.log_probs
    }
}

/// Merges consecutive repeats, then drops blanks.
pub fn collapse(alignment: &[TokenId], blank: TokenId) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev = None;
    for &a in alignment {
        if Some(a) != prev && a != blank {
            out.push(a);
        }
        prev = Some(a);
    }
    out
}

/// Fewest frames that can emit `y`: one per token plus a blank between repeats.
pub fn min_frames(y: &[TokenId]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extended_target(y: &[TokenId], blank: TokenId) -> Vec<TokenId> {
    let mut ext = Vec::with_capacity(2 * y.len() + 1);
    ext.push(blank);
    for &t in y {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

/// Whether lattice state `s` may be entered from `s - 2`.
fn skip_allowed(ext: &[TokenId], s: usize, blank: TokenId) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn check_labels(y: &[TokenId], labels: usize, blank: TokenId) -> Result<()> {
    match y.iter().find(|&&t| t >= labels || t == blank) {
        Some(&bad) => Err(Error::InvalidToken(bad)),
        None => Ok(()),
    }
}

/// `ln Σ_{A: F(A) = y} Π_t p(a_t)` by the forward recursion; `-inf` if infeasible.
pub fn ctc_log_likelihood(post: &AlignmentPosterior, y: &[TokenId]) -> Result<f64> {
    check_labels(y, post.labels(), post.blank)?;
    let t_len = post.frames();
    if t_len < min_frames(y) {
        return Ok(f64::NEG_INFINITY);
    }
    let ext = extended_target(y, post.blank);
    let s_len = ext.len();
    let lp = &post.log_probs;
    let mut alpha = vec![f64::NEG_INFINITY; s_len];
    alpha[0] = lp.get(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp.get(0, ext[1]);
    }
    let mut next = vec![f64::NEG_INFINITY; s_len];
    for t in 1..t_len {
        for s in 0..s_len {
            let mut terms = [alpha[s], f64::NEG_INFINITY, f64::NEG_INFINITY];
            if s >= 1 {
                terms[1] = alpha[s - 1];
            }
            if skip_allowed(&ext, s, post.blank) {
                terms[2] = alpha[s - 2];
            }
            next[s] = log_sum_exp(&terms) + lp.get(t, ext[s]);
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    let tail = if s_len > 1 {
        log_sum_exp(&alpha[s_len - 2..])
    } else {
        alpha[0]
    };
    Ok(tail)
}

/// Enumerates all `K^T` alignments. Limited to `T ≤ 8`, `K ≤ 4`.
pub fn ctc_brute_force(post: &AlignmentPosterior, y: &[TokenId]) -> Result<f64> {
    let (t_len, k) = (post.frames(), post.labels());
    if t_len > 8 || k > 4 {
        return Err(Error::EnumerationBound(format!("T = {t_len}, K = {k}")));
    }
    check_labels(y, k, post.blank)?;
    let mut matching = Vec::new();
    let mut alignment = vec![0usize; t_len];
    for code in 0..k.pow(t_len as u32) {
        let mut rest = code;
        for a in alignment.iter_mut() {
            *a = rest % k;
            rest /= k;
        }
        if collapse(&alignment, post.blank) == y {
            matching.push(
                alignment
                    .iter()
                    .enumerate()
                    .map(|(t, &a)| post.log_probs.get(t, a))
                    .sum::<f64>(),
            );
        }
    }
    Ok(log_sum_exp(&matching))
}

/// Per-frame argmax (ties to the lowest id), then collapse.
pub fn ctc_greedy_decode(post: &AlignmentPosterior) -> Vec<TokenId> {
    let path: Vec<TokenId> = (0..post.frames())
        .map(|t| post.log_probs.argmax_row(t))
        .collect();
    collapse(&path, post.blank)
}

/// Greedy path and collapse over raw `T × K` scores.
pub fn greedy_path(scores: &DenseArray, blank: TokenId) -> Vec<TokenId> {
    let path: Vec<TokenId> = (0..scores.rows()).map(|t| argmax(scores.row(t))).collect();
    collapse(&path, blank)
}

/// Negative CTC log-likelihood of `y` given unnormalized `logits: [T, K]`,
/// recorded on `g`. `None` when `y` cannot fit in `T` frames.
pub fn ctc_loss_graph(g: &mut Graph, logits: Var, y: &[TokenId], blank: TokenId) -> Result<Option<Var>> {
    let (t_len, k) = g.value(logits).dims2();
    if g.value(logits).rank() != 2 || t_len == 0 {
        return Err(Error::InvalidShape {
            shape: g.shape(logits).to_vec(),
            len: g.value(logits).len(),
        });
    }
    if blank >= k {
        return Err(Error::InvalidToken(blank));
    }
    check_labels(y, k, blank)?;
    if t_len < min_frames(y) {
        return Ok(None);
    }
    let ext = extended_target(y, blank);
    let s_len = ext.len();
    let log_probs = g.log_softmax(logits)?;
    let emit_idx: Vec<usize> = (0..t_len)
        .flat_map(|t| ext.iter().map(move |&e| t * k + e))
        .collect();
    let emissions = g.take(log_probs, &emit_idx, &[t_len, s_len])?;

    // transitions gather from [alpha..., LOG_ZERO]
    let sentinel = s_len;
    let mut trans_idx = Vec::with_capacity(3 * s_len);
    for s in 0..s_len {
        trans_idx.push(s);
        trans_idx.push(if s >= 1 { s - 1 } else { sentinel });
        trans_idx.push(if skip_allowed(&ext, s, blank) { s - 2 } else { sentinel });
    }
    let zero = g.constant(DenseArray::vector(vec![LOG_ZERO]))?;

    let first = g.slice(emissions, 0, 0, 1)?;
    let first = g.reshape(first, &[s_len])?;
    let init_mask: Vec<bool> = (0..s_len).map(|s| s > 1).collect();
    let mut alpha = g.masked_fill(first, &init_mask, LOG_ZERO)?;
    for t in 1..t_len {
        let padded = g.concat(&[alpha, zero], 0)?;
        let cands = g.take(padded, &trans_idx, &[s_len, 3])?;
        let merged = g.log_sum_exp(cands)?;
        let row = g.slice(emissions, 0, t, 1)?;
        let row = g.reshape(row, &[s_len])?;
        alpha = g.add(merged, row)?;
    }
    let tail = if s_len > 1 {
        g.slice(alpha, 0, s_len - 2, 2)?
    } else {
        alpha
    };
    let ll = g.log_sum_exp(tail)?;
    Ok(Some(g.scale(ll, -1.0)?))
}

/// Loss `-ln p(y)` and its gradient with respect to `logits`, via the tape.
pub fn ctc_loss_and_grad(logits: &DenseArray, y: &[TokenId], blank: TokenId) -> Result<(f64, DenseArray)> {
    let mut store = ParamStore::new();
    let id = store.insert("logits", logits.clone());
    let mut g = Graph::new(&store);
    let x = g.param_by_id(id);
    let loss = ctc_loss_graph(&mut g, x, y, blank)?.ok_or(Error::InfeasibleCtc {
        frames: logits.rows(),
        required: min_frames(y),
    })?;
    let grads = g.backward(loss)?;
    let grad = grads
        .get(id)
        .cloned()
        .unwrap_or_else(|| DenseArray::zeros(logits.shape()));
    Ok((g.value(loss).item(), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const B: TokenId = 0;
    const A: TokenId = 1;
    const BB: TokenId = 2;

    fn uniform(t: usize, k: usize) -> AlignmentPosterior {
        AlignmentPosterior::new(DenseArray::full(&[t, k], -(k as f64).ln()), B).unwrap()
    }

    fn random_post(rng: &mut ChaCha8Rng, t: usize, k: usize) -> AlignmentPosterior {
        let logits = DenseArray::matrix(t, k, (0..t * k).map(|_| rng.random_range(-3.0..3.0)).collect())
            .unwrap();
        AlignmentPosterior::from_logits(&logits, B).unwrap()
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse(&[A, B, A, A, B, BB], B), vec![A, A, BB]);
        assert!(collapse(&[B, B], B).is_empty());
        assert_eq!(collapse(&[A, A, BB, BB, BB, A], B), vec![A, BB, A]);
    }

    #[test]
    fn uniform_two_frames_single_label() {
        let post = uniform(2, 3);
        // (a,a), (a,-), (-,a) out of 9 equally likely alignments
        let expected = (3.0f64 / 9.0).ln();
        assert!((ctc_log_likelihood(&post, &[A]).unwrap() - expected).abs() < 1e-12);
        assert!((ctc_brute_force(&post, &[A]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn repeated_label_needs_a_blank() {
        let post = uniform(1, 3);
        assert_eq!(ctc_log_likelihood(&post, &[A, A]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(min_frames(&[A, A]), 3);
        assert_eq!(ctc_log_likelihood(&uniform(3, 3), &[A, A]).unwrap(), (1.0f64 / 27.0).ln());
    }

    #[test]
    fn empty_target_single_frame_is_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let post = random_post(&mut rng, 1, 3);
        let expected = post.log_probs().get(0, B);
        assert!((ctc_brute_force(&post, &[]).unwrap() - expected).abs() < 1e-14);
        assert!((ctc_log_likelihood(&post, &[]).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn forward_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let t = rng.random_range(1..=6);
            let k = rng.random_range(2..=4);
            let post = random_post(&mut rng, t, k);
            let u = rng.random_range(0..=3);
            let y: Vec<TokenId> = (0..u).map(|_| rng.random_range(1..k)).collect();
            let fwd = ctc_log_likelihood(&post, &y).unwrap();
            let brute = ctc_brute_force(&post, &y).unwrap();
            if brute == f64::NEG_INFINITY {
                assert_eq!(fwd, f64::NEG_INFINITY);
            } else {
                assert!((fwd - brute).abs() < 1e-10, "{fwd} vs {brute}");
            }
        }
    }

    #[test]
    fn brute_force_refuses_large_instances() {
        assert!(matches!(
            ctc_brute_force(&uniform(9, 3), &[A]),
            Err(Error::EnumerationBound(_))
        ));
    }

    #[test]
    fn unnormalized_rows_are_rejected() {
        let bad = DenseArray::full(&[2, 3], -1.0);
        assert!(matches!(
            AlignmentPosterior::new(bad, B),
            Err(Error::NotNormalized { row: 0, .. })
        ));
    }

    #[test]
    fn greedy_decode_examples() {
        let path = [A, A, B, BB];
        let mut lp = DenseArray::full(&[4, 3], (0.1f64).ln());
        for (t, &a) in path.iter().enumerate() {
            lp.data_mut()[t * 3 + a] = (0.8f64).ln();
        }
        let post = AlignmentPosterior::new(lp, B).unwrap();
        assert_eq!(ctc_greedy_decode(&post), vec![A, BB]);

        let blanks = AlignmentPosterior::from_logits(
            &DenseArray::matrix(2, 3, vec![5.0, 0.0, 0.0, 5.0, 0.0, 0.0]).unwrap(),
            B,
        )
        .unwrap();
        assert!(ctc_greedy_decode(&blanks).is_empty());
    }

    #[test]
    fn greedy_ties_break_to_lowest_id() {
        let post = uniform(3, 3);
        assert!(ctc_greedy_decode(&post).is_empty());
    }

    #[test]
    fn graph_loss_matches_forward_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let t = rng.random_range(1..=7);
            let logits = DenseArray::matrix(t, 4, (0..t * 4).map(|_| rng.random_range(-2.0..2.0)).collect())
                .unwrap();
            let u = rng.random_range(0..=3);
            let y: Vec<TokenId> = (0..u).map(|_| rng.random_range(1..4)).collect();
            let post = AlignmentPosterior::from_logits(&logits, B).unwrap();
            let ll = ctc_log_likelihood(&post, &y).unwrap();
            match ctc_loss_and_grad(&logits, &y, B) {
                Ok((loss, _)) => assert!((loss + ll).abs() < 1e-10),
                Err(Error::InfeasibleCtc { .. }) => assert_eq!(ll, f64::NEG_INFINITY),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = DenseArray::matrix(5, 4, (0..20).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        let y = [A, BB, A];
        let (_, grad) = ctc_loss_and_grad(&logits, &y, B).unwrap();
        let h = 1e-3;
        for k in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[k] += h;
            let mut minus = logits.clone();
            minus.data_mut()[k] -= h;
            let fd = (ctc_loss_and_grad(&plus, &y, B).unwrap().0
                - ctc_loss_and_grad(&minus, &y, B).unwrap().0)
                / (2.0 * h);
            let a = grad.data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "[{k}] {a} vs {fd}");
        }
    }

    #[test]
    fn loss_vanishes_for_a_certain_unique_alignment() {
        // T = 3 = |y|, so (a, b, a) is the only alignment
        let y = [A, BB, A];
        let mut last = f64::INFINITY;
        for peak in [2.0, 5.0, 10.0, 30.0] {
            let mut logits = DenseArray::zeros(&[3, 3]);
            for (t, &a) in y.iter().enumerate() {
                logits.data_mut()[t * 3 + a] = peak;
            }
            let (loss, _) = ctc_loss_and_grad(&logits, &y, B).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn loss_ignores_additive_row_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = DenseArray::matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let mut shifted = logits.clone();
        for v in &mut shifted.data_mut()[3..6] {
            *v += 17.5;
        }
        let a = ctc_loss_and_grad(&logits, &[A, BB], B).unwrap().0;
        let b = ctc_loss_and_grad(&shifted, &[A, BB], B).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn infeasible_target_is_a_distinct_error() {
        let logits = DenseArray::zeros(&[1, 3]);
        assert!(matches!(
            ctc_loss_and_grad(&logits, &[A, A], B),
            Err(Error::InfeasibleCtc {
                frames: 1,
                required: 3
            })
        ));
    }

    /// Random alignment with `F(A) = y`: each label spread over one or more
    /// frames, blanks sprinkled between and forced between repeats.
    fn sample_alignment(rng: &mut ChaCha8Rng, y: &[TokenId]) -> Vec<TokenId> {
        let mut a = Vec::new();
        for (i, &c) in y.iter().enumerate() {
            let blanks = rng.random_range(0..3) + usize::from(i > 0 && y[i - 1] == c);
            a.extend(std::iter::repeat_n(B, blanks));
            a.extend(std::iter::repeat_n(c, rng.random_range(1..4)));
        }
        a.extend(std::iter::repeat_n(B, rng.random_range(0..3)));
        a
    }

    #[test]
    fn sampled_alignments_collapse_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(0..8);
            let y: Vec<TokenId> = (0..n).map(|_| rng.random_range(1..4)).collect();
            let a = sample_alignment(&mut rng, &y);
            assert_eq!(collapse(&a, B), y, "{a:?}");
            assert!(a.len() >= min_frames(&y));
        }
    }

    #[test]
    fn appended_uniform_frame_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let t = rng.random_range(1..=5);
            let k = rng.random_range(2..=4);
            let post = random_post(&mut rng, t, k);
            let mut data = post.log_probs().data().to_vec();
            data.extend(std::iter::repeat_n(-(k as f64).ln(), k));
            let longer = AlignmentPosterior::new(DenseArray::matrix(t + 1, k, data).unwrap(), B).unwrap();
            let u = rng.random_range(0..=3);
            let y: Vec<TokenId> = (0..u).map(|_| rng.random_range(1..k)).collect();
            let fwd = ctc_log_likelihood(&longer, &y).unwrap();
            let brute = ctc_brute_force(&longer, &y).unwrap();
            if brute == f64::NEG_INFINITY {
                assert_eq!(fwd, f64::NEG_INFINITY);
            } else {
                assert!((fwd - brute).abs() < 1e-10);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn infeasible_exactly_below_min_frames(
            y in proptest::collection::vec(1usize..3, 0..5),
            t in 1usize..9,
        ) {
            let ll = ctc_log_likelihood(&uniform(t, 3), &y).unwrap();
            proptest::prop_assert_eq!(ll == f64::NEG_INFINITY, t < y.len() + adjacent_pairs(&y));
        }

        #[test]
        fn peaked_posterior_decodes_to_its_collapse(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(0..6);
            let y: Vec<TokenId> = (0..n).map(|_| rng.random_range(1..4)).collect();
            let a = sample_alignment(&mut rng, &y);
            if a.is_empty() {
                return Ok(());
            }
            let mut logits = DenseArray::zeros(&[a.len(), 4]);
            for (t, &s) in a.iter().enumerate() {
                logits.data_mut()[t * 4 + s] = 8.0;
            }
            let post = AlignmentPosterior::from_logits(&logits, B).unwrap();
            proptest::prop_assert_eq!(ctc_greedy_decode(&post), y);
        }
    }

    fn adjacent_pairs(y: &[TokenId]) -> usize {
        y.windows(2).filter(|w| w[0] == w[1]).count()
    }
}
