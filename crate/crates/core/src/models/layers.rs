//! Pre-norm transformer pieces built on the tape. Parameters are looked up
//! by dotted name in the graph's store.

use rand::Rng;

use crate::ctc::LOG_ZERO;
use crate::error::Result;
use crate::numerics::{DenseArray, Graph, Init, ParamStore, Var};

/// Registers parameters with fresh initial values.
pub(crate) struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) {
        self.store.init(name, shape, init, self.rng);
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) {
        self.tensor(&format!("{name}.w"), &[input, output], Init::Xavier);
        self.tensor(&format!("{name}.b"), &[output], Init::Zeros);
    }

    pub fn norm(&mut self, name: &str, dim: usize) {
        self.tensor(&format!("{name}.g"), &[dim], Init::Ones);
        self.tensor(&format!("{name}.b"), &[dim], Init::Zeros);
    }

    pub fn attention(&mut self, name: &str, dim: usize) {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{part}"), dim, dim);
        }
    }

    pub fn ffn(&mut self, name: &str, dim: usize, ff: usize) {
        self.linear(&format!("{name}.ff1"), dim, ff);
        self.linear(&format!("{name}.ff2"), ff, dim);
    }

    pub fn encoder_layer(&mut self, name: &str, dim: usize, ff: usize) {
        self.norm(&format!("{name}.ln1"), dim);
        self.attention(&format!("{name}.att"), dim);
        self.norm(&format!("{name}.ln2"), dim);
        self.ffn(name, dim, ff);
    }

    /// Decoder block; `relative` adds a `[3, head_dim]` key table for relative positions.
    pub fn decoder_layer(&mut self, name: &str, dim: usize, ff: usize, relative: Option<usize>) {
        self.encoder_layer(name, dim, ff);
        self.norm(&format!("{name}.lnx"), dim);
        self.attention(&format!("{name}.xatt"), dim);
        if let Some(head_dim) = relative {
            self.tensor(&format!("{name}.rel"), &[3, head_dim], Init::Xavier);
        }
    }
}

pub(crate) fn linear(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub(crate) fn norm(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let gain = g.param(&format!("{name}.g"))?;
    let bias = g.param(&format!("{name}.b"))?;
    g.layer_norm(x, gain, bias)
}

pub(crate) fn ffn(g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let h = linear(g, x, &format!("{name}.ff1"))?;
    let h = g.gelu(h)?;
    linear(g, h, &format!("{name}.ff2"))
}

/// Relative-position key bias: a `[3, head_dim]` table indexed per query/key pair.
pub(crate) struct RelativeKeys<'a> {
    pub table: &'a str,
    /// For each `(i, j)` the flat index `i * 3 + (r_ij + 1)`.
    pub index: &'a [usize],
}

/// Flat indices into a `[rows, 3]` array for relations `r_ij ∈ {-1, 0, 1}`.
pub(crate) fn relative_index(relations: &[i8], rows: usize, cols: usize) -> Vec<usize> {
    (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| i * 3 + (relations[i * cols + j] + 1) as usize)
        .collect()
}

/// Multi-head attention of `xq` rows over `xkv` rows. `mask[i * n + j]`
/// blocks key `j` for query `i`.
pub(crate) fn attention(
    g: &mut Graph,
    xq: Var,
    xkv: Var,
    name: &str,
    heads: usize,
    mask: Option<&[bool]>,
    rel: Option<&RelativeKeys>,
) -> Result<Var> {
    let q = linear(g, xq, &format!("{name}.q"))?;
    let k = linear(g, xkv, &format!("{name}.k"))?;
    let v = linear(g, xkv, &format!("{name}.v"))?;
    let (m, dim) = g.value(q).dims2();
    let n = g.value(k).rows();
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let table = match rel {
        Some(r) => Some(g.param(r.table)?),
        None => None,
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice(q, 1, h * dh, dh)?,
                g.slice(k, 1, h * dh, dh)?,
                g.slice(v, 1, h * dh, dh)?,
            )
        };
        let mut scores = g.matmul_nt(qh, kh)?;
        if let (Some(r), Some(t)) = (rel, table) {
            let per_rel = g.matmul_nt(qh, t)?;
            let bias = g.take(per_rel, r.index, &[m, n])?;
            scores = g.add(scores, bias)?;
        }
        scores = g.scale(scores, scale)?;
        if let Some(mask) = mask {
            scores = g.masked_fill(scores, mask, LOG_ZERO)?;
        }
        let weights = g.softmax(scores)?;
        outs.push(g.matmul(weights, vh)?);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    linear(g, joined, &format!("{name}.o"))
}

pub(crate) fn encoder_layer(g: &mut Graph, x: Var, name: &str, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
    let h = norm(g, x, &format!("{name}.ln1"))?;
    let a = attention(g, h, h, &format!("{name}.att"), heads, mask, None)?;
    let a = g.dropout(a)?;
    let x = g.add(x, a)?;
    let h = norm(g, x, &format!("{name}.ln2"))?;
    let f = ffn(g, h, name)?;
    let f = g.dropout(f)?;
    g.add(x, f)
}

pub(crate) fn decoder_layer(
    g: &mut Graph,
    x: Var,
    memory: Var,
    name: &str,
    heads: usize,
    mask: Option<&[bool]>,
    rel_index: Option<&[usize]>,
) -> Result<Var> {
    let table = format!("{name}.rel");
    let rel = rel_index.map(|index| RelativeKeys {
        table: &table,
        index,
    });
    let h = norm(g, x, &format!("{name}.ln1"))?;
    let a = attention(g, h, h, &format!("{name}.att"), heads, mask, rel.as_ref())?;
    let a = g.dropout(a)?;
    let x = g.add(x, a)?;
    let h = norm(g, x, &format!("{name}.lnx"))?;
    let a = attention(g, h, memory, &format!("{name}.xatt"), heads, None, None)?;
    let a = g.dropout(a)?;
    let x = g.add(x, a)?;
    let h = norm(g, x, &format!("{name}.ln2"))?;
    let f = ffn(g, h, name)?;
    let f = g.dropout(f)?;
    g.add(x, f)
}

/// `mask[i * n + j]` is true when `j > i`.
pub(crate) fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n > k / n).collect()
}

/// Sinusoidal position signal for positions `0..len`.
pub(crate) fn sinusoid(len: usize, dim: usize) -> DenseArray {
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        for i in 0..dim / 2 {
            let freq = (-(2.0 * i as f64 / dim as f64) * 10000f64.ln()).exp();
            data[p * dim + 2 * i] = (p as f64 * freq).sin();
            data[p * dim + 2 * i + 1] = (p as f64 * freq).cos();
        }
    }
    DenseArray::matrix(len, dim, data).expect("sinusoid shape")
}

/// Column of `(i + offset) / scale` for `i in 0..len`, as `[len, 1]`.
pub(crate) fn ramp(len: usize, offset: f64, scale: f64) -> DenseArray {
    let data = (0..len).map(|i| (i as f64 + offset) / scale).collect();
    DenseArray::matrix(len, 1, data).expect("ramp shape")
}
