use crate::error::{Error, Result};

/// Row-major array of `f64` values.
///
/// A scalar has an empty shape and exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(DenseArray { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        DenseArray {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        DenseArray {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        DenseArray {
            shape: vec![values.len()],
            data: values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::LengthMismatch(format!(
                    "ragged rows: {} vs {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Rows and columns of a rank-2 array, or `(1, n)` for a vector.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap();
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.dims2().0
    }

    pub fn cols(&self) -> usize {
        self.dims2().1
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::InvalidShape {
                shape,
                len: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest value in row `r`; ties go to the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `ln Σ exp(v)`. Returns `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Stable log-softmax of a slice.
pub fn log_softmax_slice(values: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| v - lse).collect()
}

/// Stable log-softmax of `logits` along `axis`.
pub fn stable_log_softmax(logits: &DenseArray, axis: usize) -> Result<DenseArray> {
    let rank = logits.rank();
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank });
    }
    let extent = logits.shape[axis];
    if extent == 0 {
        return Err(Error::EmptyAxis("stable_log_softmax"));
    }
    let inner: usize = logits.shape[axis + 1..].iter().product();
    let outer: usize = logits.shape[..axis].iter().product();
    let mut out = logits.clone();
    let mut lane = vec![0.0; extent];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (k, slot) in lane.iter_mut().enumerate() {
                *slot = logits.data[base + k * inner];
            }
            let lse = log_sum_exp(&lane);
            for k in 0..extent {
                out.data[base + k * inner] = lane[k] - lse;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_softmax_of_equal_pair_is_minus_ln2() {
        let out = stable_log_softmax(&DenseArray::vector(vec![0.0, 0.0]), 0).unwrap();
        for v in out.data() {
            assert!((v + 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_is_shift_invariant() {
        let base = DenseArray::vector(vec![0.3, -1.2, 2.5]);
        let a = stable_log_softmax(&base, 0).unwrap();
        for c in [-50.0, 1e-3, 7.0, 1e6] {
            let shifted = DenseArray::vector(base.data().iter().map(|v| v + c).collect());
            let b = stable_log_softmax(&shifted, 0).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y} at shift {c}");
            }
        }
    }

    #[test]
    fn log_softmax_handles_huge_gap() {
        let out = stable_log_softmax(&DenseArray::vector(vec![0.0, -1e9]), 0).unwrap();
        assert!(out.is_finite());
        assert!(out.data()[0].abs() < 1e-300);
        assert!((out.data()[1] + 1e9).abs() < 1e-6);
    }

    #[test]
    fn log_softmax_normalizes_along_either_axis() {
        let a = DenseArray::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 0.5, 9.0]).unwrap();
        for axis in 0..2 {
            let out = stable_log_softmax(&a, axis).unwrap();
            let (rows, cols) = (2, 3);
            if axis == 1 {
                for r in 0..rows {
                    let s: f64 = out.row(r).iter().map(|v| v.exp()).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            } else {
                for c in 0..cols {
                    let s: f64 = (0..rows).map(|r| out.get(r, c).exp()).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_softmax_rejects_empty_axis_and_bad_axis() {
        let empty = DenseArray::zeros(&[2, 0]);
        assert!(matches!(
            stable_log_softmax(&empty, 1),
            Err(Error::EmptyAxis(_))
        ));
        assert!(matches!(
            stable_log_softmax(&empty, 2),
            Err(Error::InvalidAxis { .. })
        ));
    }

    #[test]
    fn log_sum_exp_does_not_overflow() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        // shifted by hand: 1000 + ln(e^0 + e^0)
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn shape_must_match_data() {
        assert!(DenseArray::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert_eq!(DenseArray::scalar(2.0).len(), 1);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }
}
