//! Seeded speech-like corpora: each token owns a random prototype frame,
//! held for a random duration and blurred by Gaussian noise.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::DenseArray;
use crate::ctc::min_frames;
use crate::sequence::{TokenId, TokenSequence, FIRST_CONTENT};

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    /// Content tokens, excluding reserved ids.
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub noise: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
    /// Utterances are padded with silence so that, after stacking this many
    /// frames, every transcript still fits a CTC alignment.
    pub frame_stack: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            vocab_size: 30,
            feat_dim: 16,
            frames_min: 2,
            frames_max: 4,
            noise: 0.1,
            len_min: 3,
            len_max: 12,
            train: 2000,
            dev: 200,
            test: 200,
            seed: 0,
            frame_stack: 2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return bad("frame range must satisfy 1 <= frames_min <= frames_max");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be a finite non-negative number");
        }
        if self.len_min > self.len_max {
            return bad("len_min exceeds len_max");
        }
        if self.vocab_size == 0 || self.feat_dim == 0 || self.frame_stack == 0 {
            return bad("vocab_size, feat_dim and frame_stack must be positive");
        }
        Ok(())
    }

    /// Output labels a model needs: content plus the reserved ids.
    pub fn model_vocab_size(&self) -> usize {
        self.vocab_size + FIRST_CONTENT
    }

    /// Most raw frames any utterance can have.
    pub fn max_frames(&self) -> usize {
        let n = self.len_max;
        let speech = n * self.frames_max + n.saturating_sub(1) * self.frames_min;
        speech.max(self.frame_stack * 2 * n).max(1)
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T × d`.
    pub features: DenseArray,
    pub transcript: TokenSequence,
}

/// Fixed per-corpus prototype frames, one row per content token.
#[derive(Clone, Debug)]
pub struct Prototypes {
    table: DenseArray,
}

impl Prototypes {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, u64::MAX, 0));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..cfg.vocab_size * cfg.feat_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Prototypes {
            table: DenseArray::matrix(cfg.vocab_size, cfg.feat_dim, data).expect("prototype shape"),
        }
    }

    /// Prototype of a content token.
    pub fn of(&self, token: TokenId) -> &[f64] {
        self.table.row(token - FIRST_CONTENT)
    }

    /// Content token whose prototype is nearest to `frame`.
    pub fn nearest(&self, frame: &[f64]) -> TokenId {
        let dist = |r: usize| -> f64 {
            self.table
                .row(r)
                .iter()
                .zip(frame)
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let best = (0..self.table.rows())
            .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
            .unwrap_or(0);
        best + FIRST_CONTENT
    }
}

/// splitmix64 over the three coordinates.
fn mix(seed: u64, split: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(split.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of utterance `index` in `split`.
pub fn utterance_seed(cfg: &CorpusConfig, split: Split, index: usize) -> u64 {
    mix(cfg.seed, split.index(), index as u64)
}

/// Frames for transcript `c`: each token's prototype held for a random
/// duration, a silent gap of `frames_min` between equal neighbours, noise on
/// every cell, and trailing silence if stacking would leave too few frames.
pub fn synth_features(c: &TokenSequence, cfg: &CorpusConfig, protos: &Prototypes, seed: u64) -> DenseArray {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.feat_dim;
    let mut rows: Vec<f64> = Vec::new();
    let silence = vec![0.0; d];
    for (i, &tok) in c.iter().enumerate() {
        if i > 0 && c[i - 1] == tok {
            for _ in 0..cfg.frames_min {
                rows.extend_from_slice(&silence);
            }
        }
        let dur = rng.random_range(cfg.frames_min..=cfg.frames_max);
        for _ in 0..dur {
            rows.extend_from_slice(protos.of(tok));
        }
    }
    let needed = (cfg.frame_stack * min_frames(c)).max(1);
    while rows.len() / d < needed {
        rows.extend_from_slice(&silence);
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).expect("validated noise");
        for v in &mut rows {
            *v += normal.sample(&mut rng);
        }
    }
    let t = rows.len() / d;
    DenseArray::matrix(t, d, rows).expect("feature shape")
}

fn sample_utterance(cfg: &CorpusConfig, protos: &Prototypes, split: Split, index: usize) -> Utterance {
    let seed = utterance_seed(cfg, split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.len_min..=cfg.len_max);
    let ids: Vec<TokenId> = (0..n)
        .map(|_| FIRST_CONTENT + rng.random_range(0..cfg.vocab_size))
        .collect();
    let transcript = TokenSequence::new(ids).expect("content ids");
    let features = synth_features(&transcript, cfg, protos, rng.random());
    Utterance {
        id: format!("{}-{index:05}", split.name()),
        features,
        transcript,
    }
}

/// One split of the corpus.
pub fn gen_split(cfg: &CorpusConfig, split: Split) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let protos = Prototypes::new(cfg);
    Ok((0..cfg.count(split))
        .map(|i| sample_utterance(cfg, &protos, split, i))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Utterance] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

pub fn gen_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    Ok(Corpus {
        train: gen_split(cfg, Split::Train)?,
        dev: gen_split(cfg, Split::Dev)?,
        test: gen_split(cfg, Split::Test)?,
    })
}

pub const MANIFEST: &str = "manifest.txt";

fn data_file(split: Split) -> String {
    format!("{}.txt", split.name())
}

/// Writes `manifest.txt` and one data file per split into `dir`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST);
    let mut manifest = String::new();
    for split in Split::ALL {
        let path = dir.join(data_file(split));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        for u in corpus.split(split) {
            let (t, d) = u.features.dims2();
            writeln!(manifest, "{} {} {} {}", u.id, split, u.transcript.len(), t).expect("string write");
            write_record(&mut w, u, t, d).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

fn write_record<W: Write>(w: &mut W, u: &Utterance, t: usize, d: usize) -> std::io::Result<()> {
    writeln!(w, "{} {} {} {}", u.id, u.transcript.len(), t, d)?;
    writeln!(w, "{}", u.transcript)?;
    let mut line = String::with_capacity(d * 25);
    for r in 0..t {
        line.clear();
        for (k, v) in u.features.row(r).iter().enumerate() {
            if k > 0 {
                line.push(' ');
            }
            write!(line, "{v:.16e}").expect("string write");
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads one split back from a corpus directory.
pub fn read_split(dir: &Path, split: Split) -> Result<Vec<Utterance>> {
    let path = dir.join(data_file(split));
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let what = path.display().to_string();
    let mut lines = BufReader::new(file).lines().enumerate();
    let mut next = |expect: &str| -> Result<Option<(usize, String)>> {
        match lines.next() {
            None => Ok(None),
            Some((i, Ok(l))) => Ok(Some((i + 1, l))),
            Some((i, Err(e))) => Err(Error::Parse {
                what: what.clone(),
                line: i + 1,
                msg: format!("{expect}: {e}"),
            }),
        }
    };
    let perr = |line: usize, msg: String| Error::Parse {
        what: what.clone(),
        line,
        msg,
    };
    let mut out = Vec::new();
    while let Some((ln, header)) = next("header")? {
        if header.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(perr(ln, "expected `id N T d`".into()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| perr(ln, format!("`{s}`: {e}")));
        let (id, n, t, d) = (parts[0].to_string(), num(parts[1])?, num(parts[2])?, num(parts[3])?);
        let (ln2, ids_line) = next("transcript")?.ok_or_else(|| perr(ln, "missing transcript".into()))?;
        let ids = ids_line
            .split_whitespace()
            .map(|s| s.parse::<TokenId>().map_err(|e| perr(ln2, format!("`{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if ids.len() != n {
            return Err(perr(ln2, format!("{} ids, header says {n}", ids.len())));
        }
        let transcript = TokenSequence::new(ids).map_err(|e| perr(ln2, e.to_string()))?;
        let mut data = Vec::with_capacity(t * d);
        for _ in 0..t {
            let (lf, row) = next("frame")?.ok_or_else(|| perr(ln, "missing frames".into()))?;
            let before = data.len();
            for s in row.split_whitespace() {
                data.push(s.parse::<f64>().map_err(|e| perr(lf, format!("`{s}`: {e}")))?);
            }
            if data.len() - before != d {
                return Err(perr(lf, format!("{} values, expected {d}", data.len() - before)));
            }
        }
        out.push(Utterance {
            id,
            features: DenseArray::matrix(t, d, data)?,
            transcript,
        });
    }
    Ok(out)
}

/// Reads all three splits.
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    Ok(Corpus {
        train: read_split(dir, Split::Train)?,
        dev: read_split(dir, Split::Dev)?,
        test: read_split(dir, Split::Test)?,
    })
}
