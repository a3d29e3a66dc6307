//! Minibatch training with Adam, per-epoch dev scoring and best-dev
//! checkpoint selection.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::evaluate::evaluate;
use crate::error::{Error, Result};
use crate::models::{joint_loss, sampled_loss, Model};
use crate::numerics::{Adam, GradAccumulator, Graph, NoamSchedule, ParamStore};
use crate::synthdata::{read_split, Split, Utterance};

pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train.log";
pub const RESOLVED_CONFIG: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean joint objective.
    pub loss: f64,
    /// Mean insertion part, absent when the run trains CTC alone.
    pub insertion: Option<f64>,
    /// Mean CTC part over utterances where it is defined.
    pub ctc: Option<f64>,
    pub ctc_skipped: usize,
    pub dev_error: f64,
    pub dev_iterations: Option<f64>,
    pub seconds: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.5}"));
        write!(
            f,
            "epoch {} loss {:.5} ins {} ctc {} ctc_skipped {} dev_error {:.4} dev_iterations {} time {:.1}s",
            self.epoch,
            self.loss,
            opt(self.insertion),
            opt(self.ctc),
            self.ctc_skipped,
            self.dev_error,
            self.dev_iterations.map_or("-".to_string(), |v| format!("{v:.3}")),
            self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the best dev epoch.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_error: f64,
}

#[derive(Default)]
struct Sums {
    loss: f64,
    count: usize,
    insertion: f64,
    ins_count: usize,
    ctc: f64,
    ctc_count: usize,
    ctc_skipped: usize,
}

fn mean(sum: f64, n: usize) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

/// Trains in memory. `on_epoch` sees each log line as it is produced.
pub fn train_model(
    cfg: &RunConfig,
    train: &[Utterance],
    dev: &[Utterance],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let t = &cfg.train;
    let alpha = cfg.model.ctc_weight;
    let mut model = Model::new(cfg.model.clone(), t.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let schedule = NoamSchedule {
        lr_scale: t.lr_scale,
        warmup: t.warmup,
        model_dim: cfg.model.dim,
    };
    let mut adam = Adam::new(model.params(), t.adam, schedule);
    let mut acc = GradAccumulator::new(model.params());
    let dev = if t.dev_limit > 0 { &dev[..t.dev_limit.min(dev.len())] } else { dev };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0;
    for epoch in 1..=t.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut sums = Sums::default();
        for batch in order.chunks(t.batch_size) {
            acc.clear();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let u = &train[i];
                let mut g = Graph::new(model.params()).with_dropout(t.dropout, rng.random());
                let terms = sampled_loss(&model, &mut g, &u.features, u.transcript.ids(), cfg.prior, alpha, &mut rng)?;
                if terms.ctc_infeasible {
                    sums.ctc_skipped += 1;
                }
                if let Some(v) = terms.insertion {
                    sums.insertion += g.value(v).item();
                    sums.ins_count += 1;
                }
                if let Some(v) = terms.ctc {
                    sums.ctc += g.value(v).item();
                    sums.ctc_count += 1;
                }
                let Some(loss) = joint_loss(&mut g, &terms, alpha)? else {
                    continue;
                };
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                sums.loss += value;
                sums.count += 1;
                let grads = g.backward(loss)?;
                acc.add_all(grads.iter(), weight);
            }
            adam.update(model.params_mut(), &acc);
        }
        let report = evaluate(&model, dev, cfg.decode, cfg.prior)?;
        let entry = EpochLog {
            epoch,
            loss: mean(sums.loss, sums.count).unwrap_or(0.0),
            insertion: mean(sums.insertion, sums.ins_count),
            ctc: mean(sums.ctc, sums.ctc_count),
            ctc_skipped: sums.ctc_skipped,
            dev_error: report.error_rate(),
            dev_iterations: report.mean_iterations(),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        let improved = best.as_ref().is_none_or(|b| entry.dev_error < b.1);
        if improved {
            best = Some((epoch, entry.dev_error, model.params().clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        log.push(entry);
        if t.patience > 0 && since_best >= t.patience {
            break;
        }
    }
    let (best_epoch, best_dev_error, params) = match best {
        Some(b) => b,
        None => (0, f64::INFINITY, model.params().clone()),
    };
    Ok(TrainOutcome {
        model: Model::from_params(cfg.model.clone(), params)?,
        log,
        best_epoch,
        best_dev_error,
    })
}

/// Trains on the corpus in `data` and writes the best-dev checkpoint, the
/// epoch log and the resolved configuration into `out`.
pub fn run_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutcome> {
    let train = read_split(data, Split::Train)?;
    let dev = read_split(data, Split::Dev)?;
    check_corpus(cfg, &train)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(RESOLVED_CONFIG);
    std::fs::write(&cfg_path, cfg.to_kv().to_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = out.join(TRAIN_LOG);
    let mut lines = String::new();
    let outcome = train_model(cfg, &train, &dev, |e| {
        lines.push_str(&format!("{e}\n"));
        let _ = std::fs::write(&log_path, &lines);
    })?;
    lines.push_str(&format!(
        "best epoch {} dev_error {:.4}\n",
        outcome.best_epoch, outcome.best_dev_error
    ));
    std::fs::write(&log_path, &lines).map_err(|e| Error::io(&log_path, e))?;
    outcome.model.params().save(&out.join(CHECKPOINT))?;
    Ok(outcome)
}

fn check_corpus(cfg: &RunConfig, utts: &[Utterance]) -> Result<()> {
    for u in utts {
        if u.features.cols() != cfg.model.feat_dim {
            return Err(Error::Config(format!(
                "{} has {}-dim features, config expects {}",
                u.id,
                u.features.cols(),
                cfg.model.feat_dim
            )));
        }
        if let Some(&t) = u.transcript.iter().find(|&&t| t >= cfg.model.vocab_size) {
            return Err(Error::InvalidToken(t));
        }
    }
    Ok(())
}
