//! Decoding a split, hypothesis files and scoring.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::config::RunConfig;
use super::metrics::{edit_distance, ScoreReport, UtteranceScore};
use crate::decoding::{BoundModel, DecodeMode};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::ParamStore;
use crate::sequence::{Prior, TokenId, TokenSequence};
use crate::synthdata::{read_split, Split, Utterance};

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub id: String,
    pub tokens: TokenSequence,
    pub iterations: Option<usize>,
}

/// Decodes every utterance; `prior` is the one the model trained under.
pub fn decode_utterances(model: &Model, utts: &[Utterance], mode: DecodeMode, prior: Prior) -> Result<Vec<Hypothesis>> {
    utts.iter()
        .map(|u| {
            let r = BoundModel::new(model, &u.features)?.decode_for_prior(mode, prior)?;
            Ok(Hypothesis {
                id: u.id.clone(),
                tokens: r.hypothesis,
                iterations: Some(r.iterations),
            })
        })
        .collect()
}

/// Scores hypotheses against references matched by id. Every reference
/// needs a hypothesis and vice versa.
pub fn score(references: &[(String, Vec<TokenId>)], hypotheses: &[Hypothesis]) -> Result<ScoreReport> {
    let mut by_id: HashMap<&str, &Hypothesis> = HashMap::with_capacity(hypotheses.len());
    for h in hypotheses {
        if by_id.insert(h.id.as_str(), h).is_some() {
            return Err(Error::LengthMismatch(format!("hypothesis `{}` appears twice", h.id)));
        }
    }
    if by_id.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} references but {} hypotheses",
            references.len(),
            by_id.len()
        )));
    }
    let mut report = ScoreReport::default();
    for (id, r) in references {
        let h = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::LengthMismatch(format!("no hypothesis for `{id}`")))?;
        report.push(UtteranceScore {
            id: id.clone(),
            counts: edit_distance(r, h.tokens.ids()),
            ref_len: r.len(),
            iterations: h.iterations,
        });
    }
    Ok(report)
}

pub fn references(utts: &[Utterance]) -> Vec<(String, Vec<TokenId>)> {
    utts.iter()
        .map(|u| (u.id.clone(), u.transcript.ids().to_vec()))
        .collect()
}

pub fn evaluate(model: &Model, utts: &[Utterance], mode: DecodeMode, prior: Prior) -> Result<ScoreReport> {
    score(&references(utts), &decode_utterances(model, utts, mode, prior)?)
}

/// `id<TAB>ids` per line.
pub fn format_hypotheses(hyps: &[Hypothesis]) -> String {
    let mut s = String::new();
    for h in hyps {
        let _ = writeln!(s, "{}\t{}", h.id, h.tokens);
    }
    s
}

pub fn parse_hypotheses(text: &str, origin: &str) -> Result<Vec<Hypothesis>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let err = |msg: String| Error::Parse {
                what: origin.to_string(),
                line: n + 1,
                msg,
            };
            let (id, ids) = line
                .split_once('\t')
                .ok_or_else(|| err("expected `id<TAB>token ids`".into()))?;
            let ids = ids
                .split_whitespace()
                .map(|t| t.parse::<TokenId>().map_err(|e| err(format!("token `{t}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let tokens = TokenSequence::new(ids).map_err(|e| err(e.to_string()))?;
            Ok(Hypothesis {
                id: id.to_string(),
                tokens,
                iterations: None,
            })
        })
        .collect()
}

pub fn write_hypotheses(path: &Path, hyps: &[Hypothesis]) -> Result<()> {
    std::fs::write(path, format_hypotheses(hyps)).map_err(|e| Error::io(path, e))
}

pub fn read_hypotheses(path: &Path) -> Result<Vec<Hypothesis>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_hypotheses(&text, &path.display().to_string())
}

/// Loads a checkpoint trained under `cfg`.
pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<Model> {
    let params = ParamStore::load(ckpt)?;
    Model::from_params(cfg.model.clone(), params)
}

/// Decodes `split` of the corpus in `data`, writes the hypothesis file to
/// `out` and the score report next to it with a `.score` suffix.
pub fn run_decode(cfg: &RunConfig, ckpt: &Path, data: &Path, split: Split, out: &Path) -> Result<ScoreReport> {
    let model = load_model(cfg, ckpt)?;
    let utts = read_split(data, split)?;
    let hyps = decode_utterances(&model, &utts, cfg.decode, cfg.prior)?;
    write_hypotheses(out, &hyps)?;
    let report = score(&references(&utts), &hyps)?;
    let mut path = out.as_os_str().to_owned();
    path.push(".score");
    let path = Path::new(&path);
    std::fs::write(path, format!("{report}\n")).map_err(|e| Error::io(path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyp(id: &str, ids: Vec<TokenId>) -> Hypothesis {
        Hypothesis {
            id: id.into(),
            tokens: TokenSequence::new(ids).unwrap(),
            iterations: None,
        }
    }

    #[test]
    fn hypothesis_file_round_trip() {
        let hs = vec![hyp("a", vec![3, 4, 5]), hyp("b", vec![])];
        let text = format_hypotheses(&hs);
        assert_eq!(text, "a\t3 4 5\nb\t\n");
        assert_eq!(parse_hypotheses(&text, "t").unwrap(), hs);
        assert!(parse_hypotheses("a 3 4\n", "t").is_err());
        assert!(parse_hypotheses("a\t3 0\n", "t").is_err());
    }

    #[test]
    fn score_matches_by_id() {
        let refs = vec![("a".to_string(), vec![3, 4, 5]), ("b".to_string(), vec![6])];
        let r = score(&refs, &[hyp("b", vec![6]), hyp("a", vec![3, 5])]).unwrap();
        assert_eq!(r.total.deletions, 1);
        assert_eq!(r.ref_len, 4);
        assert!(score(&refs, &[hyp("a", vec![3])]).is_err());
        assert!(score(&refs, &[hyp("a", vec![]), hyp("c", vec![])]).is_err());
    }
}
