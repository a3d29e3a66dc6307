//! Define-by-run reverse-mode autodiff over [`DenseArray`] values.
//!
//! Every primitive is evaluated eagerly when it is recorded, so the node
//! list doubles as the tape: parents always precede children and the
//! reverse sweep is a single backwards walk.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::DenseArray;
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Transpose { a: Var },
    Reshape { a: Var },
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Exp { a: Var },
    Log { a: Var },
    Tanh { a: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LogSumExp { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    Gather { table: Var, ids: Vec<usize> },
    Take { a: Var, idx: Vec<usize> },
    MaskedFill { a: Var, mask: Vec<bool> },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Option<DenseArray>,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// A single-threaded computation graph reading parameters from a shared store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    track_params: bool,
    dropout: Option<(f64, ChaCha8Rng)>,
}

/// Gradients of a scalar loss with respect to every parameter it reaches.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&DenseArray> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &DenseArray)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Gradients keyed by parameter name; unreached parameters get zeros.
    pub fn by_name(&self, store: &ParamStore) -> HashMap<String, DenseArray> {
        store
            .ids()
            .map(|id| {
                let g = self
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| DenseArray::zeros(store.value(id).shape()));
                (store.name(id).to_string(), g)
            })
            .collect()
    }
}

fn check_finite(value: &DenseArray, op: &'static str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let total: usize = shape.iter().product();
    (if cols == 0 { 0 } else { total / cols }, cols)
}

/// `b` broadcasts onto `a` when its shape (minus leading ones) is a suffix of `a`'s.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let b: Vec<usize> = b.iter().copied().skip_while(|&e| e == 1).collect();
    b.len() <= a.len() && a[a.len() - b.len()..] == b[..]
}

struct MatView<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

/// Row/column strides of a stored row-major `[rows, cols]` matrix, optionally viewed transposed.
fn view(data: &[f64], cols: usize, transposed: bool) -> MatView<'_> {
    if transposed {
        MatView {
            data,
            rs: 1,
            cs: cols as isize,
        }
    } else {
        MatView {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }
}

/// `c = a·b + beta·c` for logical shapes `[m,k]·[k,n]`, `c` row-major.
fn gemm(m: usize, k: usize, n: usize, a: MatView, b: MatView, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of the given slices: `a` and
    // `b` were checked against their logical shapes by the caller, `c` is a
    // distinct row-major m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'s> Graph<'s> {
    /// A graph that records gradients for every parameter it touches.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; store.len()],
            track_params: true,
            dropout: None,
        }
    }

    /// A graph for forward evaluation only; [`Graph::backward`] yields no gradients.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            track_params: false,
            ..Self::new(store)
        }
    }

    /// Enables inverted dropout at `rate` for every [`Graph::dropout`] call.
    pub fn with_dropout(mut self, rate: f64, seed: u64) -> Self {
        self.dropout = (rate > 0.0).then(|| (rate, ChaCha8Rng::seed_from_u64(seed)));
        self
    }

    /// Zeroes each element with the configured probability and rescales the
    /// rest; the identity unless dropout was enabled.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        if self.dropout.is_none() {
            return Ok(x);
        }
        let shape = self.value(x).shape().to_vec();
        let len = self.value(x).len();
        let (rate, rng) = self.dropout.as_mut().expect("checked above");
        let keep = 1.0 - *rate;
        let mask: Vec<f64> = (0..len)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.constant(DenseArray::new(shape, mask)?)?;
        self.mul(x, m)
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(val), _) => val,
            (None, Op::Param(id)) => self.store.value(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Forward values of the requested nodes.
    pub fn evaluate(&self, outputs: &[Var]) -> Result<Vec<DenseArray>> {
        outputs
            .iter()
            .map(|&v| {
                if v.0 >= self.nodes.len() {
                    Err(Error::IndexOutOfRange {
                        op: "evaluate",
                        index: v.0,
                        limit: self.nodes.len(),
                    })
                } else {
                    Ok(self.value(v).clone())
                }
            })
            .collect()
    }

    fn push(&mut self, value: DenseArray, op: Op, parents: &[Var], name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant leaf that receives no gradient.
    pub fn constant(&mut self, value: DenseArray) -> Result<Var> {
        check_finite(&value, "constant")?;
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param_by_id(id))
    }

    pub fn param_by_id(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if self.value(a).rank() != 2 || self.value(b).rank() != 2 || k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            view(self.value(a).data(), ac, ta),
            view(self.value(b).data(), bc, tb),
            0.0,
            &mut out,
        );
        let value = DenseArray::new(vec![m, n], out)?;
        self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b], "matmul")
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a·bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    fn binary(&mut self, a: Var, b: Var, kind: u8) -> Result<Var> {
        let (name, f): (&'static str, fn(f64, f64) -> f64) = match kind {
            0 => ("add", |x, y| x + y),
            1 => ("sub", |x, y| x - y),
            _ => ("mul", |x, y| x * y),
        };
        let av = self.value(a);
        let bv = self.value(b);
        if !broadcastable(av.shape(), bv.shape()) || (bv.is_empty() && !av.is_empty()) {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let bl = bv.len();
        let data: Vec<f64> = if bl == av.len() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            av.data()
                .chunks(bl)
                .flat_map(|chunk| chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        let value = DenseArray::new(av.shape().to_vec(), data)?;
        let op = match kind {
            0 => Op::Add { a, b },
            1 => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        self.push(value, op, &[a, b], name)
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let av = self.value(a);
        let value = DenseArray::new(av.shape().to_vec(), av.data().iter().map(|v| v * s).collect())?;
        self.push(value, Op::Scale { a, s }, &[a], "scale")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(Error::InvalidAxis {
                axis: 1,
                rank: av.rank(),
            });
        }
        let (r, c) = av.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        let value = DenseArray::new(vec![c, r], out)?;
        self.push(value, Op::Transpose { a }, &[a], "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { a }, &[a], "reshape")
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let rank = av.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let (outer, ext, inner) = split_axis(av.shape(), axis);
        if start + len > ext {
            return Err(Error::IndexOutOfRange {
                op: "slice",
                index: start + len,
                limit: ext,
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        let value = DenseArray::new(shape, data)?;
        self.push(value, Op::Slice { a, axis, start }, &[a], "slice")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(Error::EmptyAxis("concat"))?;
        let ref_shape = self.shape(*first).to_vec();
        let rank = ref_shape.len();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == rank
                && s.iter()
                    .zip(&ref_shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: ref_shape.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&ref_shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let ext = pv.shape()[axis];
                let base = o * ext * inner;
                data.extend_from_slice(&pv.data()[base..base + ext * inner]);
            }
        }
        let mut shape = ref_shape;
        shape[axis] = total;
        let value = DenseArray::new(shape, data)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
            "concat",
        )
    }

    fn unary(&mut self, a: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let av = self.value(a);
        let value = DenseArray::new(av.shape().to_vec(), av.data().iter().map(|&v| f(v)).collect())?;
        self.push(value, op, &[a], name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "exp", f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "log", f64::ln, Op::Log { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", f64::tanh, Op::Tanh { a })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "gelu", gelu, Op::Gelu { a })
    }

    fn require_last_axis(&self, a: Var, name: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.is_empty() {
            return Err(Error::InvalidAxis { axis: 0, rank: 0 });
        }
        let (rows, cols) = last_axis(s);
        if cols == 0 {
            return Err(Error::EmptyAxis(name));
        }
        Ok((rows, cols))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.require_last_axis(a, "softmax")?;
        let ls = super::array::stable_log_softmax(self.value(a), self.value(a).rank() - 1)?;
        let shape = ls.shape().to_vec();
        let data = ls.into_data().into_iter().map(f64::exp).collect();
        self.push(DenseArray::new(shape, data)?, Op::Softmax { a }, &[a], "softmax")
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.require_last_axis(a, "log_softmax")?;
        let value = super::array::stable_log_softmax(self.value(a), self.value(a).rank() - 1)?;
        self.push(value, Op::LogSoftmax { a }, &[a], "log_softmax")
    }

    /// Log-sum-exp along the last axis, which is removed from the shape.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.require_last_axis(a, "log_sum_exp")?;
        let av = self.value(a);
        let data = (0..rows)
            .map(|r| super::array::log_sum_exp(&av.data()[r * cols..(r + 1) * cols]))
            .collect();
        let shape = av.shape()[..av.rank() - 1].to_vec();
        self.push(DenseArray::new(shape, data)?, Op::LogSumExp { a }, &[a], "log_sum_exp")
    }

    /// Layer normalization over the last axis with per-feature gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.require_last_axis(a, "layer_norm")?;
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let av = self.value(a);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; rows * cols];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &av.data()[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (x[c] - mean) * rstd * g[c] + b[c];
            }
            stats.push((mean, rstd));
        }
        let value = DenseArray::new(av.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                a,
                gain,
                bias,
                stats,
            },
            &[a, gain, bias],
            "layer_norm",
        )
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::InvalidAxis {
                axis: 1,
                rank: tv.rank(),
            });
        }
        let (rows, cols) = tv.dims2();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    limit: rows,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = DenseArray::new(vec![ids.len(), cols], data)?;
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "gather",
        )
    }

    /// Elements of `a` at flat indices `idx`, arranged in `shape`.
    pub fn take(&mut self, a: Var, idx: &[usize], shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= av.len() {
                return Err(Error::IndexOutOfRange {
                    op: "take",
                    index: i,
                    limit: av.len(),
                });
            }
            data.push(av.data()[i]);
        }
        let value = DenseArray::new(shape.to_vec(), data)?;
        self.push(value, Op::Take { a, idx: idx.to_vec() }, &[a], "take")
    }

    /// Replaces entries where `mask` is true by `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(Error::LengthMismatch(format!(
                "mask of {} for {} values",
                mask.len(),
                av.len()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let value = DenseArray::new(av.shape().to_vec(), data)?;
        self.push(
            value,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            &[a],
            "masked_fill",
        )
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(DenseArray::scalar(s), Op::Sum { a }, &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::EmptyAxis("mean"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            if let Op::Param(id) = node.op {
                if dy.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("gradient"));
                }
                let shape = self.store.value(id).shape().to_vec();
                out.grads[id.0] = Some(DenseArray::new(shape, dy)?);
                continue;
            }
            self.backprop(i, &dy, &mut grads);
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = self.value(Var(i));
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.value(*a).dims2();
                let (br, bc) = self.value(*b).dims2();
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                let dyv = || view(dy, n, false);
                let dyt = || view(dy, n, true);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.grad_buf(grads, *a) {
                    if !*ta {
                        // dA[m,k] = dY[m,n]·op(B)ᵀ
                        gemm(m, n, k, dyv(), view(bv, bc, !*tb), 1.0, da);
                    } else {
                        // dA[k,m] = op(B)[k,n]·dYᵀ
                        gemm(k, n, m, view(bv, bc, *tb), dyt(), 1.0, da);
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    if !*tb {
                        // dB[k,n] = op(A)ᵀ·dY
                        gemm(k, m, n, view(av, ac, !*ta), dyv(), 1.0, db);
                    } else {
                        // dB[n,k] = dYᵀ·op(A)
                        gemm(n, m, k, dyt(), view(av, ac, *ta), 1.0, db);
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if let Some(da) = self.grad_buf(grads, *a) {
                    da.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    let bl = db.len();
                    for chunk in dy.chunks(bl.max(1)) {
                        db.iter_mut().zip(chunk).for_each(|(g, d)| *g += sign * d);
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let bl = bv.len().max(1);
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (k, g) in da.iter_mut().enumerate() {
                        *g += dy[k] * bv[k % bl];
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for (k, d) in dy.iter().enumerate() {
                        db[k % bl] += d * av[k];
                    }
                }
            }
            Op::Scale { a, s } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    da.iter_mut().zip(dy).for_each(|(g, d)| *g += s * d);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = self.value(*a).dims2();
                if let Some(da) = self.grad_buf(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] += dy[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    da.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Slice { a, axis, start } => {
                let (outer, ext, inner) = split_axis(self.shape(*a), *axis);
                let len = y.shape()[*axis];
                if let Some(da) = self.grad_buf(grads, *a) {
                    for o in 0..outer {
                        let base = o * ext * inner + start * inner;
                        let src = &dy[o * len * inner..(o + 1) * len * inner];
                        da[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if let Some(dp) = self.grad_buf(grads, p) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            dp[o * ext * inner..(o + 1) * ext * inner]
                                .iter_mut()
                                .zip(&dy[src..src + ext * inner])
                                .for_each(|(g, d)| *g += d);
                        }
                    }
                    offset += ext;
                }
            }
            Op::Exp { a } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (k, g) in da.iter_mut().enumerate() {
                        *g += dy[k] * y.data()[k];
                    }
                }
            }
            Op::Log { a } => {
                let av = self.value(*a).data();
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (k, g) in da.iter_mut().enumerate() {
                        *g += dy[k] / av[k];
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (k, g) in da.iter_mut().enumerate() {
                        let t = y.data()[k];
                        *g += dy[k] * (1.0 - t * t);
                    }
                }
            }
            Op::Gelu { a } => {
                let av = self.value(*a).data();
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (k, g) in da.iter_mut().enumerate() {
                        *g += dy[k] * gelu_grad(av[k]);
                    }
                }
            }
            Op::Softmax { a } => {
                let (rows, cols) = last_axis(y.shape());
                if let Some(da) = self.grad_buf(grads, *a) {
                    for r in 0..rows {
                        let s = &y.data()[r * cols..(r + 1) * cols];
                        let d = &dy[r * cols..(r + 1) * cols];
                        let dot: f64 = s.iter().zip(d).map(|(x, y)| x * y).sum();
                        for c in 0..cols {
                            da[r * cols + c] += s[c] * (d[c] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let (rows, cols) = last_axis(y.shape());
                if let Some(da) = self.grad_buf(grads, *a) {
                    for r in 0..rows {
                        let ls = &y.data()[r * cols..(r + 1) * cols];
                        let d = &dy[r * cols..(r + 1) * cols];
                        let total: f64 = d.iter().sum();
                        for c in 0..cols {
                            da[r * cols + c] += d[c] - ls[c].exp() * total;
                        }
                    }
                }
            }
            Op::LogSumExp { a } => {
                let av = self.value(*a);
                let (rows, cols) = last_axis(av.shape());
                if let Some(da) = self.grad_buf(grads, *a) {
                    for r in 0..rows {
                        let lse = y.data()[r];
                        for c in 0..cols {
                            let k = r * cols + c;
                            da[k] += dy[r] * (av.data()[k] - lse).exp();
                        }
                    }
                }
            }
            Op::LayerNorm {
                a,
                gain,
                bias,
                stats,
            } => {
                let av = self.value(*a).data();
                let g = self.value(*gain).data();
                let cols = g.len();
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                let mut dgain = self.nodes[gain.0].needs_grad.then(|| vec![0.0; cols]);
                let mut dbias = self.nodes[bias.0].needs_grad.then(|| vec![0.0; cols]);
                let mut da = self.nodes[a.0].needs_grad.then(|| vec![0.0; av.len()]);
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let x = &av[r * cols..(r + 1) * cols];
                    let d = &dy[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        xhat[c] = (x[c] - mean) * rstd;
                        dxhat[c] = d[c] * g[c];
                    }
                    if let Some(dg) = dgain.as_mut() {
                        for c in 0..cols {
                            dg[c] += d[c] * xhat[c];
                        }
                    }
                    if let Some(db) = dbias.as_mut() {
                        for c in 0..cols {
                            db[c] += d[c];
                        }
                    }
                    if let Some(da) = da.as_mut() {
                        let n = cols as f64;
                        let m1 = dxhat.iter().sum::<f64>() / n;
                        let m2 = dxhat.iter().zip(&xhat).map(|(p, q)| p * q).sum::<f64>() / n;
                        for c in 0..cols {
                            da[r * cols + c] += rstd * (dxhat[c] - m1 - xhat[c] * m2);
                        }
                    }
                }
                for (v, buf) in [(*a, da), (*gain, dgain), (*bias, dbias)] {
                    if let (Some(buf), Some(dst)) = (buf, self.grad_buf(grads, v)) {
                        dst.iter_mut().zip(&buf).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let cols = self.value(*table).cols();
                if let Some(dt) = self.grad_buf(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(&dy[r * cols..(r + 1) * cols])
                            .for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Take { a, idx } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (k, &i) in idx.iter().enumerate() {
                        da[i] += dy[k];
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    for (k, g) in da.iter_mut().enumerate() {
                        if !mask[k] {
                            *g += dy[k];
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(da) = self.grad_buf(grads, *a) {
                    da.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
        }
    }
}

/// Gradient of a scalar `loss` for every parameter in the graph's store, by name.
pub fn gradients(graph: &Graph, loss: Var) -> Result<HashMap<String, DenseArray>> {
    Ok(graph.backward(loss)?.by_name(graph.store()))
}
