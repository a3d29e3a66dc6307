//! Toy transformer networks: the CTC and left-to-right baselines, InDIGO,
//! the Insertion Transformer and KERMIT, and their training losses.

mod config;
pub(crate) mod layers;
mod loss;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{CtcWeight, ModelConfig, Variant};
pub use loss::{
    bbt_slot_loss, joint_loss, l2r_loss, order_loss, sampled_loss, LossTerms,
};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Graph, ParamStore, Var};
use crate::sequence::{RelativePositionMatrix, TokenId, END_OF_SLOT};
use layers::{
    attention, causal_mask, decoder_layer, encoder_layer, ffn, linear, norm, ramp, relative_index,
    sinusoid, Builder,
};

/// Per-slot distributions over a canvas with `slots - 1` tokens.
#[derive(Clone, Copy, Debug)]
pub struct SlotOutput {
    /// `[slots, |V'|]` log-probabilities `log p(c | l)`.
    pub word: Var,
    /// `[slots]` log-probabilities `log p(l)`.
    pub position: Var,
    pub slots: usize,
}

/// Encoder states of a KERMIT pass, split into feature and token rows.
#[derive(Clone, Copy, Debug)]
pub struct KermitOutput {
    /// `[T', b]`.
    pub h_feat: Var,
    /// `[N, b]`, absent for an empty canvas.
    pub h_tok: Option<Var>,
    pub frames: usize,
    pub tokens: usize,
    pub slots: SlotOutput,
    /// `[T', |V'|]` CTC log-probabilities read from `h_feat`.
    pub ctc: Var,
}

/// InDIGO decoder states and next-word log-probabilities, one row per prefix length.
#[derive(Clone, Copy, Debug)]
pub struct IndigoOutput {
    pub states: Var,
    pub word: Var,
}

/// Network parameters together with the configuration that shapes them.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

impl Model {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let c = &config;
        let (d, ff, v) = (c.dim, c.ff_dim, c.vocab_size);
        b.linear("in", c.feat_dim * c.frame_stack, d);
        b.tensor("in.ramp", &[1, d], crate::numerics::Init::Xavier);
        for l in 0..c.encoder_layers {
            b.encoder_layer(&format!("enc.{l}"), d, ff);
        }
        b.norm("enc.out", d);
        b.linear("ctc", d, v);
        if c.variant != Variant::Ctc {
            b.tensor("tok.emb", &[v, d], crate::numerics::Init::Xavier);
        }
        if c.variant.has_decoder() {
            let rel = (c.variant == Variant::Indigo).then_some(c.head_dim());
            for l in 0..c.decoder_layers {
                b.decoder_layer(&format!("dec.{l}"), d, ff, rel);
            }
            b.norm("dec.out", d);
        }
        match c.variant {
            Variant::At => b.linear("out", d, v),
            Variant::Indigo => {
                b.linear("out", d, v);
                b.linear("ptr.q", 2 * d, d);
                b.linear("ptr.k", d, d);
            }
            Variant::InsertionTransformer | Variant::Kermit => {
                b.tensor("tok.ramp", &[1, d], crate::numerics::Init::Xavier);
                b.tensor("slot.edge", &[2, d], crate::numerics::Init::Xavier);
                b.linear("slot.pair", 2 * d, d);
                b.norm("slot.ln1", d);
                b.attention("slot.xatt", d);
                b.norm("slot.ln2", d);
                b.ffn("slot", d, ff);
                b.norm("slot.out", d);
                b.linear("slot.word", d, v);
                b.linear("slot.pos", d, 1);
                if c.variant == Variant::Kermit {
                    b.tensor("seg.emb", &[2, d], crate::numerics::Init::Xavier);
                }
            }
            Variant::Ctc => {}
        }
        Ok(Model {
            config,
            params: store,
        })
    }

    /// Wraps loaded parameters, checking they fit `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Model::new(config, 0)?;
        reference.params.check_compatible(&params)?;
        Ok(Model {
            config: reference.config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_frames(&self, x: &DenseArray) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.config.feat_dim || x.rows() == 0 {
            return Err(Error::ShapeMismatch {
                op: "features",
                lhs: x.shape().to_vec(),
                rhs: vec![self.config.max_frames, self.config.feat_dim],
            });
        }
        if x.rows() > self.config.max_frames {
            return Err(Error::TooLong {
                what: "input",
                len: x.rows(),
                max: self.config.max_frames,
            });
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.max_tokens {
            return Err(Error::TooLong {
                what: "canvas",
                len: tokens.len(),
                max: self.config.max_tokens,
            });
        }
        match tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&t) => Err(Error::InvalidToken(t)),
            None => Ok(()),
        }
    }

    /// Stacked, projected frames plus position signals: `[T', b]`.
    pub fn embed_features(&self, g: &mut Graph, x: &DenseArray) -> Result<Var> {
        self.check_frames(x)?;
        let c = &self.config;
        let t_stacked = c.stacked_len(x.rows());
        let mut data = x.data().to_vec();
        data.resize(t_stacked * c.frame_stack * c.feat_dim, 0.0);
        let stacked = DenseArray::matrix(t_stacked, c.frame_stack * c.feat_dim, data)?;
        let input = g.constant(stacked)?;
        let h = linear(g, input, "in")?;
        let pe = g.constant(sinusoid(t_stacked, c.dim))?;
        let h = g.add(h, pe)?;
        let span = t_stacked.saturating_sub(1).max(1) as f64;
        let r = g.constant(ramp(t_stacked, 0.0, span))?;
        let rv = g.param("in.ramp")?;
        let rp = g.matmul(r, rv)?;
        g.add(h, rp)
    }

    /// Scaled token embeddings, with absolute and relative-to-length
    /// positions when `positional`.
    fn embed_tokens(&self, g: &mut Graph, tokens: &[TokenId], positional: bool) -> Result<Var> {
        let d = self.config.dim;
        let table = g.param("tok.emb")?;
        let e = g.gather(table, tokens)?;
        let e = g.scale(e, (d as f64).sqrt())?;
        if !positional {
            return Ok(e);
        }
        let n = tokens.len();
        let pe = g.constant(sinusoid(n, d))?;
        let e = g.add(e, pe)?;
        if self.params.get("tok.ramp").is_none() {
            return Ok(e);
        }
        let r = g.constant(ramp(n, 1.0, (n + 1) as f64))?;
        let rv = g.param("tok.ramp")?;
        let rp = g.matmul(r, rv)?;
        g.add(e, rp)
    }

    fn encoder_stack(&self, g: &mut Graph, mut h: Var) -> Result<Var> {
        for l in 0..self.config.encoder_layers {
            h = encoder_layer(g, h, &format!("enc.{l}"), self.config.heads, None)?;
        }
        norm(g, h, "enc.out")
    }

    /// `H_enc`: one row per stacked frame.
    pub fn encode(&self, g: &mut Graph, x: &DenseArray) -> Result<Var> {
        let h = self.embed_features(g, x)?;
        self.encoder_stack(g, h)
    }

    /// CTC log-probabilities `[rows, |V'|]` from encoder rows.
    pub fn ctc_log_probs(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let logits = linear(g, h, "ctc")?;
        g.log_softmax(logits)
    }

    fn require(&self, ok: bool, what: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} is not available for {}", self.config.variant)))
        }
    }

    /// Next-token log-probabilities `[len + 1, |V'|]` for the prefixes of `prefix`.
    pub fn at_forward(&self, g: &mut Graph, memory: Var, prefix: &[TokenId]) -> Result<Var> {
        self.require(self.config.variant == Variant::At, "left-to-right decoding")?;
        self.check_tokens(prefix)?;
        let mut tokens = Vec::with_capacity(prefix.len() + 1);
        tokens.push(END_OF_SLOT);
        tokens.extend_from_slice(prefix);
        let mut h = self.embed_tokens(g, &tokens, true)?;
        let mask = causal_mask(tokens.len());
        for l in 0..self.config.decoder_layers {
            h = decoder_layer(g, h, memory, &format!("dec.{l}"), self.config.heads, Some(&mask), None)?;
        }
        let h = norm(g, h, "dec.out")?;
        let logits = linear(g, h, "out")?;
        g.log_softmax(logits)
    }

    /// InDIGO decoder over `[start, prefix...]` in generation order. `r`
    /// relates those `len + 1` entries, the start symbol leftmost.
    pub fn indigo_forward(
        &self,
        g: &mut Graph,
        memory: Var,
        prefix: &[TokenId],
        r: &RelativePositionMatrix,
    ) -> Result<IndigoOutput> {
        self.require(self.config.variant == Variant::Indigo, "the pointer decoder")?;
        self.check_tokens(prefix)?;
        let m = prefix.len() + 1;
        if r.side() != m {
            return Err(Error::LengthMismatch(format!(
                "relative positions for {} entries, prefix has {m}",
                r.side()
            )));
        }
        let mut tokens = Vec::with_capacity(m);
        tokens.push(END_OF_SLOT);
        tokens.extend_from_slice(prefix);
        let mut h = self.embed_tokens(g, &tokens, false)?;
        let mask = causal_mask(m);
        let rel = relative_index(r.entries(), m, m);
        for l in 0..self.config.decoder_layers {
            h = decoder_layer(
                g,
                h,
                memory,
                &format!("dec.{l}"),
                self.config.heads,
                Some(&mask),
                Some(&rel),
            )?;
        }
        let states = norm(g, h, "dec.out")?;
        let logits = linear(g, states, "out")?;
        let word = g.log_softmax(logits)?;
        Ok(IndigoOutput { states, word })
    }

    /// Pointer log-probabilities `[queries, len + 1]`. Query `(i, w)` asks
    /// where word `w` goes after prefix row `i`; entry `j ≤ i` means "right
    /// of decoder input `j`", and entries past `i` are masked out.
    pub fn indigo_pointer(&self, g: &mut Graph, states: Var, queries: &[(usize, TokenId)]) -> Result<Var> {
        let d = self.config.dim;
        let m = g.value(states).rows();
        if let Some(&(row, _)) = queries.iter().find(|(row, _)| *row >= m) {
            return Err(Error::IndexOutOfRange {
                op: "indigo_pointer",
                index: row,
                limit: m,
            });
        }
        let rows: Vec<usize> = queries.iter().map(|q| q.0).collect();
        let words: Vec<TokenId> = queries.iter().map(|q| q.1).collect();
        self.check_tokens(&words[..words.len().min(self.config.max_tokens)])?;
        let hq = g.gather(states, &rows)?;
        let emb = self.embed_tokens(g, &words, false)?;
        let qin = g.concat(&[hq, emb], 1)?;
        let q = linear(g, qin, "ptr.q")?;
        let k = linear(g, states, "ptr.k")?;
        let scores = g.matmul_nt(q, k)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
        let mask: Vec<bool> = rows
            .iter()
            .flat_map(|&i| (0..m).map(move |j| j > i))
            .collect();
        let scores = g.masked_fill(scores, &mask, crate::ctc::LOG_ZERO)?;
        g.log_softmax(scores)
    }

    /// Slot scores from token states (`None` for an empty canvas).
    fn slot_head(&self, g: &mut Graph, states: Option<Var>, tokens: usize, memory: Var) -> Result<SlotOutput> {
        let edge = g.param("slot.edge")?;
        let left = g.slice(edge, 0, 0, 1)?;
        let right = g.slice(edge, 0, 1, 1)?;
        let ext = match states {
            Some(s) => g.concat(&[left, s, right], 0)?,
            None => edge,
        };
        let slots = tokens + 1;
        let lhs = g.slice(ext, 0, 0, slots)?;
        let rhs = g.slice(ext, 0, 1, slots)?;
        let pair = g.concat(&[lhs, rhs], 1)?;
        let s = linear(g, pair, "slot.pair")?;
        let s = g.gelu(s)?;
        let h = norm(g, s, "slot.ln1")?;
        let a = attention(g, h, memory, "slot.xatt", self.config.heads, None, None)?;
        let s = g.add(s, a)?;
        let h = norm(g, s, "slot.ln2")?;
        let f = ffn(g, h, "slot")?;
        let s = g.add(s, f)?;
        let s = norm(g, s, "slot.out")?;
        let logits = linear(g, s, "slot.word")?;
        let word = g.log_softmax(logits)?;
        let pos = linear(g, s, "slot.pos")?;
        let pos = g.reshape(pos, &[slots])?;
        let position = g.log_softmax(pos)?;
        Ok(SlotOutput {
            word,
            position,
            slots,
        })
    }

    /// Insertion Transformer slot distributions for a sorted canvas.
    pub fn inst_forward(&self, g: &mut Graph, memory: Var, canvas: &[TokenId]) -> Result<SlotOutput> {
        self.require(
            self.config.variant == Variant::InsertionTransformer,
            "the slot decoder",
        )?;
        self.check_tokens(canvas)?;
        let states = if canvas.is_empty() {
            None
        } else {
            let mut h = self.embed_tokens(g, canvas, true)?;
            for l in 0..self.config.decoder_layers {
                h = decoder_layer(g, h, memory, &format!("dec.{l}"), self.config.heads, None, None)?;
            }
            Some(norm(g, h, "dec.out")?)
        };
        self.slot_head(g, states, canvas.len(), memory)
    }

    /// One encoder pass over `[features ∥ canvas tokens]`.
    pub fn kermit_forward(&self, g: &mut Graph, x: &DenseArray, canvas: &[TokenId]) -> Result<KermitOutput> {
        self.require(self.config.variant == Variant::Kermit, "the joint encoder")?;
        self.check_tokens(canvas)?;
        let feats = self.embed_features(g, x)?;
        let frames = g.value(feats).rows();
        let seg = g.param("seg.emb")?;
        let seg_feat = g.slice(seg, 0, 0, 1)?;
        let feats = g.add(feats, seg_feat)?;
        let n = canvas.len();
        let input = if n == 0 {
            feats
        } else {
            let toks = self.embed_tokens(g, canvas, true)?;
            let seg_tok = g.slice(seg, 0, 1, 1)?;
            let toks = g.add(toks, seg_tok)?;
            g.concat(&[feats, toks], 0)?
        };
        let h = self.encoder_stack(g, input)?;
        let (h_feat, h_tok) = if n == 0 {
            (h, None)
        } else {
            (g.slice(h, 0, 0, frames)?, Some(g.slice(h, 0, frames, n)?))
        };
        let ctc = self.ctc_log_probs(g, h_feat)?;
        let slots = self.slot_head(g, h_tok, n, h_feat)?;
        Ok(KermitOutput {
            h_feat,
            h_tok,
            frames,
            tokens: n,
            slots,
            ctc,
        })
    }
}
