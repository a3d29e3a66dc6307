use super::order::InsertionOrder;
use crate::error::{Error, Result};

/// Pairwise left/right relations between inserted tokens.
///
/// `get(i, j)` is `-1` when token `j` lies right of token `i`, `+1` when it
/// lies left, and `0` on the diagonal. Indices are generation steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelativePositionMatrix {
    side: usize,
    entries: Vec<i8>,
}

impl RelativePositionMatrix {
    /// Relations among tokens at the given surface positions (any distinct values).
    pub fn from_positions(positions: &[usize]) -> Self {
        let side = positions.len();
        let mut entries = vec![0i8; side * side];
        for (i, &zi) in positions.iter().enumerate() {
            for (j, &zj) in positions.iter().enumerate() {
                entries[i * side + j] = match zj.cmp(&zi) {
                    std::cmp::Ordering::Greater => -1,
                    std::cmp::Ordering::Equal => 0,
                    std::cmp::Ordering::Less => 1,
                };
            }
        }
        RelativePositionMatrix { side, entries }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.side + j]
    }

    pub fn row_sums(&self) -> Vec<i64> {
        (0..self.side)
            .map(|i| (0..self.side).map(|j| self.get(i, j) as i64).sum())
            .collect()
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }
}

/// Relative positions among the first `n` tokens inserted under `z`.
pub fn relpos_matrix(z: &InsertionOrder, n: usize) -> Result<RelativePositionMatrix> {
    if n == 0 || n > z.len() {
        return Err(Error::IndexOutOfRange {
            op: "relpos_matrix",
            index: n,
            limit: z.len(),
        });
    }
    Ok(RelativePositionMatrix::from_positions(&z.ranks()[..n]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequence::order::{all_orders, Prior};

    #[test]
    fn two_token_l2r() {
        let z = InsertionOrder::new(vec![1, 2], Prior::L2r).unwrap();
        let r = relpos_matrix(&z, 2).unwrap();
        assert_eq!((r.get(0, 0), r.get(1, 1)), (0, 0));
        assert_eq!(r.get(0, 1), -1);
        assert_eq!(r.get(1, 0), 1);
    }

    #[test]
    fn first_step_is_a_single_zero() {
        let z = InsertionOrder::new(vec![3, 1, 2], Prior::Uniform).unwrap();
        let r = relpos_matrix(&z, 1).unwrap();
        assert_eq!(r.side(), 1);
        assert_eq!(r.get(0, 0), 0);
    }

    #[test]
    fn row_sums_rank_tokens_in_surface_order() {
        // this=1, is=2, a=3, pen=4; inserted a, this, pen, is
        let z = InsertionOrder::new(vec![3, 1, 4, 2], Prior::Uniform).unwrap();
        let r = relpos_matrix(&z, 4).unwrap();
        let sums = r.row_sums();
        let mut steps: Vec<usize> = (0..4).collect();
        steps.sort_by_key(|&i| sums[i]);
        let by_rowsum: Vec<usize> = steps.iter().map(|&i| z.ranks()[i]).collect();
        let mut sorted = z.ranks().to_vec();
        sorted.sort_unstable();
        assert_eq!(by_rowsum, sorted);
    }

    #[test]
    fn antisymmetric_with_zero_diagonal() {
        for n in 1..=5 {
            for ranks in all_orders(n) {
                let z = InsertionOrder::new(ranks, Prior::Uniform).unwrap();
                for step in 1..=n {
                    let r = relpos_matrix(&z, step).unwrap();
                    for i in 0..step {
                        assert_eq!(r.get(i, i), 0);
                        for j in 0..step {
                            assert_eq!(r.get(i, j), -r.get(j, i));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn step_out_of_range() {
        let z = InsertionOrder::new(vec![1, 2], Prior::L2r).unwrap();
        assert!(relpos_matrix(&z, 0).is_err());
        assert!(relpos_matrix(&z, 3).is_err());
    }
}
