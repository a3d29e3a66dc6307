//! Acceptance criteria, one PASS/FAIL line each. Positional arguments
//! filter criteria by substring, e.g. `cargo test --test acceptance -- ctc`.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::{features, grad_check, toy_config, GradCheck};
use insctc_core::ctc::{ctc_brute_force, ctc_log_likelihood, AlignmentPosterior};
use insctc_core::decoding::{parallel_decode, BbtOracle, Termination};
use insctc_core::harness::{edit_distance, evaluate, train_model, EditCounts, RunConfig, ScoreReport};
use insctc_core::models::{bbt_slot_loss, joint_loss, l2r_loss, order_loss, CtcWeight, Model, Variant};
use insctc_core::numerics::{log_sum_exp, DenseArray, Graph, Var};
use insctc_core::sequence::{
    all_orders, apply_order, bbt_generations, bbt_slot_targets, order_log_prob, sample_order,
    InsertionOrder, Prior, TokenId, TokenSequence,
};
use insctc_core::synthdata::{gen_corpus, CorpusConfig};
use insctc_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CTC_ORACLE_TOL: f64 = 1e-10;
const CTC_ORACLE_SECONDS: f64 = 10.0;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_SECONDS: f64 = 120.0;
const MARGINAL_TOL: f64 = 1e-12;
const E2E_SECONDS: f64 = 3600.0;
const CTC_BASELINE_MAX_ERROR: f64 = 0.05;
const MARGIN: f64 = 0.01;
const SEEDS: [u64; 3] = [0, 1, 2];
const REQUIRED_SEEDS: usize = 2;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn ceil_log2_plus_one(n: usize) -> usize {
    (usize::BITS - n.leading_zeros()) as usize
}

fn random_posterior(rng: &mut ChaCha8Rng, t: usize, k: usize) -> AlignmentPosterior {
    let logits: Vec<f64> = (0..t * k).map(|_| rng.random_range(-3.0..3.0)).collect();
    AlignmentPosterior::from_logits(&DenseArray::matrix(t, k, logits).unwrap(), 0).unwrap()
}

fn ctc_oracle() -> Result<Outcome> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut mismatched_infinities = 0;
    for _ in 0..500 {
        let t = rng.random_range(1..=6);
        let k = rng.random_range(2..=4);
        let post = random_posterior(&mut rng, t, k);
        let len = rng.random_range(0..=3);
        let y: Vec<TokenId> = (0..len).map(|_| rng.random_range(1..k)).collect();
        let lattice = ctc_log_likelihood(&post, &y)?;
        let brute = ctc_brute_force(&post, &y)?;
        if lattice.is_finite() != brute.is_finite() {
            mismatched_infinities += 1;
        } else if brute.is_finite() {
            worst = worst.max((lattice - brute).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        worst < CTC_ORACLE_TOL && mismatched_infinities == 0 && secs < CTC_ORACLE_SECONDS,
        format!(
            "500 instances, max |lattice - enumeration| = {worst:.2e} (tol {CTC_ORACLE_TOL:e}), \
             {mismatched_infinities} feasibility mismatches, {secs:.2} s (limit {CTC_ORACLE_SECONDS} s)"
        ),
    ))
}

type LossFn = Box<dyn Fn(&Model, &mut Graph) -> Result<Var>>;

fn joint(terms: insctc_core::models::LossTerms, g: &mut Graph, alpha: CtcWeight) -> Result<Var> {
    Ok(joint_loss(g, &terms, alpha)?.expect("a feasible loss"))
}

fn gradient_suite() -> Result<Outcome> {
    let start = Instant::now();
    let c = vec![3, 5, 5, 7];
    let x = features(10, 3, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = sample_order(Prior::Uniform, c.len(), &mut rng);
    let heads: Vec<(&str, Variant, f64, LossFn)> = {
        let (c1, x1, z1) = (c.clone(), x.clone(), z.clone());
        let (c2, x2, z2) = (c.clone(), x.clone(), z.clone());
        let (c3, x3) = (c.clone(), x.clone());
        let (c4, x4) = (c.clone(), x.clone());
        let (c5, x5) = (c.clone(), x.clone());
        let (c6, x6) = (c.clone(), x.clone());
        vec![
            (
                "InDIGO word+pointer",
                Variant::Indigo,
                0.3,
                Box::new(move |m, g| {
                    let a = m.config().ctc_weight;
                    let t = order_loss(m, g, &x1, &c1, &z1, a)?;
                    joint(t, g, a)
                }),
            ),
            (
                "Insertion Transformer slots (sampled order)",
                Variant::InsertionTransformer,
                0.3,
                Box::new(move |m, g| {
                    let a = m.config().ctc_weight;
                    let t = order_loss(m, g, &x2, &c2, &z2, a)?;
                    joint(t, g, a)
                }),
            ),
            (
                "Insertion Transformer slots (balanced tree)",
                Variant::InsertionTransformer,
                0.0,
                Box::new(move |m, g| {
                    let a = m.config().ctc_weight;
                    let t = bbt_slot_loss(m, g, &x3, &c3, 1, a)?;
                    joint(t, g, a)
                }),
            ),
            (
                "KERMIT slots+CTC",
                Variant::Kermit,
                0.5,
                Box::new(move |m, g| {
                    let a = m.config().ctc_weight;
                    let t = bbt_slot_loss(m, g, &x4, &c4, 1, a)?;
                    joint(t, g, a)
                }),
            ),
            (
                "AT",
                Variant::At,
                0.3,
                Box::new(move |m, g| {
                    let a = m.config().ctc_weight;
                    let t = l2r_loss(m, g, &x5, &c5, a)?;
                    joint(t, g, a)
                }),
            ),
            (
                "CTC",
                Variant::Ctc,
                1.0,
                Box::new(move |m, g| {
                    let a = m.config().ctc_weight;
                    let t = l2r_loss(m, g, &x6, &c6, a)?;
                    joint(t, g, a)
                }),
            ),
        ]
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, variant, alpha, loss) in heads {
        let mut model = Model::new(toy_config(variant, alpha), 17)?;
        let GradCheck {
            worst,
            worst_param,
            scalars,
        } = grad_check(&mut model, loss)?;
        pass &= worst < GRAD_REL_TOL;
        parts.push(format!("{name}: {worst:.1e} over {scalars} scalars (worst {worst_param})"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < GRAD_SECONDS;
    Ok(outcome(
        pass,
        format!(
            "tol {GRAD_REL_TOL:e}, {secs:.1} s (limit {GRAD_SECONDS} s); {}",
            parts.join("; ")
        ),
    ))
}

fn order_canvas_suite() -> Result<Outcome> {
    let mut failures = Vec::new();
    let mut permutations = 0;
    for n in 1..=4 {
        let c = TokenSequence::new((0..n).map(|i| 3 + (i * 2) % 5).collect())?;
        for ranks in all_orders(n) {
            let z = InsertionOrder::new(ranks, Prior::Uniform)?;
            permutations += 1;
            if apply_order(&c, &z)?.replay()? != c.ids() {
                failures.push(format!("replay n={n}"));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    for _ in 0..300 {
        let n = rng.random_range(1..=64);
        let c = TokenSequence::new((0..n).map(|_| rng.random_range(3..8)).collect())?;
        let z = sample_order(Prior::Uniform, n, &mut rng);
        if apply_order(&c, &z)?.replay()? != c.ids() {
            failures.push(format!("random replay n={n}"));
        }
    }
    for n in 1..=1024 {
        if bbt_generations(n).len() != ceil_log2_plus_one(n) {
            failures.push(format!("generation count n={n}"));
        }
    }
    let c: Vec<TokenId> = (1..=9).collect::<Vec<_>>().iter().map(|i| i + 2).collect();
    let growth: Vec<Vec<TokenId>> = (1..=4)
        .map(|g| bbt_slot_targets(&c, g).0.iter().map(|t| t - 2).collect())
        .collect();
    let expected = vec![
        vec![5],
        vec![3, 5, 7],
        vec![2, 3, 4, 5, 6, 7, 8],
        (1..=9).collect::<Vec<TokenId>>(),
    ];
    if growth != expected {
        failures.push(format!("N=9 growth {growth:?}"));
    }
    Ok(outcome(
        failures.is_empty(),
        format!(
            "{permutations} exhaustive orders (N<=4), 300 random orders (N<=64), generation counts for N=1..1024, \
             N=9 growth {growth:?}; failures: {failures:?}"
        ),
    ))
}

/// Gradient of the CTC term alone with respect to the token embedding table.
fn ctc_embedding_gradient(variant: Variant) -> Result<(DenseArray, Vec<TokenId>)> {
    let mut cfg = toy_config(variant, 0.5);
    cfg.dim = 16;
    cfg.heads = 4;
    let model = Model::new(cfg, 23)?;
    let x = features(14, 3, 5);
    let c = vec![4, 6, 3, 6, 5];
    let alpha = model.config().ctc_weight;
    let mut g = Graph::new(model.params());
    let terms = match variant {
        Variant::Kermit | Variant::InsertionTransformer => bbt_slot_loss(&model, &mut g, &x, &c, 2, alpha)?,
        Variant::At => l2r_loss(&model, &mut g, &x, &c, alpha)?,
        _ => {
            let z = InsertionOrder::new(vec![3, 1, 5, 2, 4], Prior::Uniform)?;
            order_loss(&model, &mut g, &x, &c, &z, alpha)?
        }
    };
    let ctc = terms.ctc.expect("feasible ctc term");
    let grads = g.backward(ctc)?.by_name(model.params());
    let canvas = bbt_slot_targets(&c, 2).0;
    Ok((grads["tok.emb"].clone(), canvas))
}

fn conditioning() -> Result<Outcome> {
    let (kermit, canvas) = ctc_embedding_gradient(Variant::Kermit)?;
    let dim = kermit.cols();
    let kermit_norm: f64 = canvas
        .iter()
        .map(|&t| kermit.row(t).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    let mut pass = kermit_norm > 0.0;
    let mut parts = vec![format!("KERMIT ||dCTC/d emb(canvas)|| = {kermit_norm:.3e} over {} rows of width {dim}", canvas.len())];
    for v in [Variant::InsertionTransformer, Variant::Indigo, Variant::At] {
        let (grad, _) = ctc_embedding_gradient(v)?;
        let nonzero = grad.data().iter().filter(|&&e| e != 0.0).count();
        pass &= nonzero == 0;
        parts.push(format!("{v}: {nonzero} nonzero entries"));
    }
    Ok(outcome(pass, parts.join("; ")))
}

fn iteration_bound() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(256);
    let mut worst_slack = i64::MAX;
    let mut failures = Vec::new();
    for n in 0..=256usize {
        let target: Vec<TokenId> = (0..n).map(|_| rng.random_range(3..33)).collect();
        let r = parallel_decode(&BbtOracle::new(target.clone(), 33), 10_000, 1024)?;
        let bound = ceil_log2_plus_one(n) + 1;
        worst_slack = worst_slack.min(bound as i64 - r.iterations as i64);
        if r.iterations > bound || r.hypothesis.ids() != &target[..] || r.termination != Termination::AllSlotsFinished {
            failures.push(n);
        }
        if r.replay()? != target {
            failures.push(n);
        }
    }
    Ok(outcome(
        failures.is_empty(),
        format!("N=0..256, minimum slack to ceil(log2(N+1))+1 is {worst_slack}; failing N: {failures:?}"),
    ))
}

fn all_sequences(max_len: usize, vocab: usize) -> Vec<Vec<TokenId>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for t in 0..vocab {
                let mut e: Vec<TokenId> = s.clone();
                e.push(t);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Best alignment by trying every path of matches, substitutions, deletions
/// and insertions.
fn exhaustive_alignment(r: &[TokenId], h: &[TokenId]) -> EditCounts {
    fn go(r: &[TokenId], h: &[TokenId], acc: EditCounts, best: &mut Option<EditCounts>) {
        if r.is_empty() && h.is_empty() {
            if best.is_none_or(|b| acc.preferred_over(&b)) {
                *best = Some(acc);
            }
            return;
        }
        if !r.is_empty() && !h.is_empty() {
            let s = usize::from(r[0] != h[0]);
            go(&r[1..], &h[1..], acc + EditCounts::new(s, 0, 0), best);
        }
        if !r.is_empty() {
            go(&r[1..], h, acc + EditCounts::new(0, 1, 0), best);
        }
        if !h.is_empty() {
            go(r, &h[1..], acc + EditCounts::new(0, 0, 1), best);
        }
    }
    let mut best = None;
    go(r, h, EditCounts::default(), &mut best);
    best.expect("at least one alignment")
}

fn edit_distance_oracle() -> Result<Outcome> {
    let seqs = all_sequences(5, 3);
    let mut pairs = 0usize;
    let mut mismatches = Vec::new();
    for r in &seqs {
        for h in &seqs {
            pairs += 1;
            let fast = edit_distance(r, h);
            let slow = exhaustive_alignment(r, h);
            if fast != slow && mismatches.len() < 5 {
                mismatches.push(format!("{r:?}/{h:?}: {fast:?} vs {slow:?}"));
            }
        }
    }
    Ok(outcome(
        mismatches.is_empty(),
        format!("{pairs} pairs over {} sequences; mismatches: {mismatches:?}", seqs.len()),
    ))
}

fn marginalization() -> Result<Outcome> {
    let mut parts = Vec::new();
    let mut pass = true;
    let base = [3, 5, 3, 6];
    let x = features(12, 3, 2);
    for variant in [Variant::InsertionTransformer, Variant::Indigo, Variant::Kermit] {
        let model = Model::new(toy_config(variant, 0.0), 31)?;
        let alpha = model.config().ctc_weight;
        for n in 1..=4 {
            let c = &base[..n];
            let mut log_pz = Vec::new();
            let mut log_pc = Vec::new();
            for ranks in all_orders(n) {
                log_pz.push(order_log_prob(Prior::Uniform, &ranks));
                let z = InsertionOrder::new(ranks, Prior::Uniform)?;
                let mut g = Graph::inference(model.params());
                let terms = order_loss(&model, &mut g, &x, c, &z, alpha)?;
                log_pc.push(-g.value(terms.insertion.expect("insertion term")).item());
            }
            let mass: f64 = log_pz.iter().map(|v| v.exp()).sum();
            let bound: f64 = log_pz.iter().zip(&log_pc).map(|(a, b)| a.exp() * b).sum();
            let joint: Vec<f64> = log_pz.iter().zip(&log_pc).map(|(a, b)| a + b).collect();
            let exact = log_sum_exp(&joint);
            let spread = log_pc.iter().cloned().fold(f64::MIN, f64::max) - log_pc.iter().cloned().fold(f64::MAX, f64::min);
            let ok_mass = (mass - 1.0).abs() < MARGINAL_TOL;
            let ok_bound = if spread > 1e-9 { bound < exact } else { (bound - exact).abs() < MARGINAL_TOL };
            pass &= ok_mass && ok_bound;
            if n == 4 || !(ok_mass && ok_bound) {
                parts.push(format!(
                    "{variant} N={n}: sum p(Z)-1 = {:.1e}, bound {bound:.6} vs log-marginal {exact:.6}",
                    mass - 1.0
                ));
            }
        }
    }
    Ok(outcome(pass, parts.join("; ")))
}

struct RunResult {
    error: f64,
    iterations: f64,
    seconds: f64,
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn train_and_test(name: &str, seed: u64, corpus: &insctc_core::synthdata::Corpus) -> Result<RunResult> {
    let start = Instant::now();
    let mut cfg = RunConfig::load(&configs_dir().join(name))?;
    cfg.train.seed = seed;
    let outcome = train_model(&cfg, &corpus.train, &corpus.dev, |_| {})?;
    let report: ScoreReport = evaluate(&outcome.model, &corpus.test, cfg.decode, cfg.prior)?;
    let r = RunResult {
        error: report.error_rate(),
        iterations: report.mean_iterations().unwrap_or(f64::NAN),
        seconds: start.elapsed().as_secs_f64(),
    };
    println!(
        "    seed {seed} {name}: test error {:.4}, mean iterations {:.3}, best epoch {} of {}, {:.0} s",
        r.error,
        r.iterations,
        outcome.best_epoch,
        outcome.log.len(),
        r.seconds
    );
    Ok(r)
}

fn end_to_end() -> Result<Outcome> {
    let start = Instant::now();
    let corpus = gen_corpus(&CorpusConfig::default())?;
    let (mut a_ok, mut b_ok, mut c_ok) = (0, 0, 0);
    let mut lines = Vec::new();
    for seed in SEEDS {
        let ctc = train_and_test("ctc.conf", seed, &corpus)?;
        let kermit = train_and_test("kermit-bbt-a0.9-readout.conf", seed, &corpus)?;
        let it = train_and_test("it-l2r-a0.3.conf", seed, &corpus)?;
        let at = train_and_test("at-l2r-a0.3.conf", seed, &corpus)?;
        let a = ctc.error <= CTC_BASELINE_MAX_ERROR;
        let b = kermit.error <= ctc.error + MARGIN && kermit.iterations < at.iterations;
        let c = (it.error - at.error).abs() <= MARGIN;
        a_ok += usize::from(a);
        b_ok += usize::from(b);
        c_ok += usize::from(c);
        lines.push(format!(
            "seed {seed}: (a) ctc {:.4} {} (b) kermit {:.4} / {:.2} it vs at {:.2} it {} (c) it {:.4} vs at {:.4} {}",
            ctc.error,
            if a { "ok" } else { "MISS" },
            kermit.error,
            kermit.iterations,
            at.iterations,
            if b { "ok" } else { "MISS" },
            it.error,
            at.error,
            if c { "ok" } else { "MISS" },
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = a_ok == SEEDS.len() && b_ok >= REQUIRED_SEEDS && c_ok >= REQUIRED_SEEDS && secs <= E2E_SECONDS;
    Ok(outcome(
        pass,
        format!(
            "{}; (a) {a_ok}/3 need 3, (b) {b_ok}/3 need {REQUIRED_SEEDS}, (c) {c_ok}/3 need {REQUIRED_SEEDS}; \
             {secs:.0} s (limit {E2E_SECONDS} s)",
            lines.join("; ")
        ),
    ))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(&str, fn() -> Result<Outcome>)> = vec![
        ("ctc_oracle_equivalence", ctc_oracle),
        ("gradient_suite", gradient_suite),
        ("order_canvas_suite", order_canvas_suite),
        ("conditioning_property", conditioning),
        ("decode_iteration_bound", iteration_bound),
        ("edit_distance_oracle", edit_distance_oracle),
        ("marginalization_sanity", marginalization),
        ("end_to_end_synthetic", end_to_end),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let (pass, detail) = match run() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        failed += usize::from(!pass);
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
