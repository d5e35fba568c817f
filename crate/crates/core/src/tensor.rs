//! Quantized tensors and the dense <-> coordinate-sparse conversions.
//!
//! Every tensor is stored row-major. Spatial maps use `[height, width, channels]`
//! ordering, so channel is the fastest-moving index. Weights and activations are
//! signed 8-bit; dot products accumulate in `i32`.

use crate::error::{Error, Result};

/// Largest magnitude of a single int8 x int8 product (`-128 * -128`).
pub const MAX_PRODUCT_MAGNITUDE: i64 = 128 * 128;

/// Number of max-magnitude products an `i32` accumulator can absorb.
pub const MAX_ACCUMULATOR_TERMS: usize = (i32::MAX as i64 / MAX_PRODUCT_MAGNITUDE) as usize;

/// Whether a dot product of `terms` int8 x int8 products is overflow-free in `i32`.
pub fn fits_accumulator(terms: usize) -> bool {
    terms <= MAX_ACCUMULATOR_TERMS
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
}

/// Signed 8-bit tensor.
pub type QTensor = Tensor<i8>;
/// 32-bit accumulator map, the pre-requantization output of a layer.
pub type AccTensor = Tensor<i32>;

impl<T: Copy + Default> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            values: vec![T::default(); len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Option<usize> {
        flat_index(&self.shape, index)
    }

    pub fn get(&self, index: &[usize]) -> Option<T> {
        self.offset(index).map(|i| self.values[i])
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.values)
    }
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> Option<usize> {
    if shape.len() != index.len() {
        return None;
    }
    let mut flat = 0;
    for (&dim, &i) in shape.iter().zip(index) {
        if i >= dim {
            return None;
        }
        flat = flat * dim + i;
    }
    Some(flat)
}

/// One output channel's weights in coordinate form.
///
/// Positions are flat row-major offsets into `shape`, strictly increasing, and
/// every stored weight is non-zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseKernel {
    kernel_id: usize,
    shape: Vec<usize>,
    entries: Vec<(usize, i8)>,
}

impl SparseKernel {
    pub fn new(kernel_id: usize, shape: Vec<usize>, entries: Vec<(usize, i8)>) -> Result<Self> {
        let positions: usize = shape.iter().product();
        let mut prev: Option<usize> = None;
        for &(pos, w) in &entries {
            if pos >= positions {
                return Err(Error::InvalidKernel {
                    kernel_id,
                    reason: format!("position {pos} outside shape {shape:?}"),
                });
            }
            if prev.is_some_and(|p| pos <= p) {
                return Err(Error::InvalidKernel {
                    kernel_id,
                    reason: format!("position {pos} is duplicated or out of order"),
                });
            }
            if w == 0 {
                return Err(Error::InvalidKernel {
                    kernel_id,
                    reason: format!("zero weight stored at position {pos}"),
                });
            }
            prev = Some(pos);
        }
        Ok(Self {
            kernel_id,
            shape,
            entries,
        })
    }

    /// Builds a kernel from a support mask and weights aligned with it; zero
    /// weights are dropped from the support.
    pub fn from_support(
        kernel_id: usize,
        shape: Vec<usize>,
        support: &[usize],
        weights: &[i8],
    ) -> Result<Self> {
        if support.len() != weights.len() {
            return Err(Error::InvalidKernel {
                kernel_id,
                reason: format!(
                    "{} mask positions but {} weights",
                    support.len(),
                    weights.len()
                ),
            });
        }
        let mut entries: Vec<(usize, i8)> = support
            .iter()
            .copied()
            .zip(weights.iter().copied())
            .filter(|&(_, w)| w != 0)
            .collect();
        entries.sort_unstable_by_key(|&(p, _)| p);
        Self::new(kernel_id, shape, entries)
    }

    pub fn kernel_id(&self) -> usize {
        self.kernel_id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn positions(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn entries(&self) -> &[(usize, i8)] {
        &self.entries
    }

    /// Non-zero count, `N` for this kernel.
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(p, _)| p)
    }
}

pub fn sparse_to_dense(kernel: &SparseKernel) -> QTensor {
    let mut t = QTensor::zeros(kernel.shape.clone());
    for &(pos, w) in &kernel.entries {
        t.values[pos] = w;
    }
    t
}

pub fn dense_to_sparse(t: &QTensor, kernel_id: usize) -> SparseKernel {
    let entries = t
        .values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(p, &v)| (p, v))
        .collect();
    SparseKernel {
        kernel_id,
        shape: t.shape.clone(),
        entries,
    }
}

/// Power-of-two requantization back to int8: shift right with
/// round-half-away-from-zero, then saturate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Requantizer {
    right_shift: u32,
}

impl Requantizer {
    pub fn new(right_shift: u32) -> Result<Self> {
        if right_shift > 31 {
            return Err(Error::InvalidConfig(format!(
                "requantization shift {right_shift} exceeds 31"
            )));
        }
        Ok(Self { right_shift })
    }

    pub fn right_shift(&self) -> u32 {
        self.right_shift
    }

    pub fn apply(&self, acc: i32) -> i8 {
        requantize(acc, self)
    }
}

pub fn requantize(acc: i32, r: &Requantizer) -> i8 {
    let acc = acc as i64;
    let shifted = if r.right_shift == 0 {
        acc
    } else {
        let half = 1i64 << (r.right_shift - 1);
        let mag = (acc.abs() + half) >> r.right_shift;
        if acc < 0 {
            -mag
        } else {
            mag
        }
    };
    shifted.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_kernel_densifies_to_zeros() {
        let k = SparseKernel::new(0, vec![3, 3], vec![]).unwrap();
        let t = sparse_to_dense(&k);
        assert_eq!(t.shape(), &[3, 3]);
        assert!(t.values().iter().all(|&v| v == 0));
    }

    #[test]
    fn two_by_two_overlay() {
        let k = SparseKernel::new(0, vec![2, 2], vec![(0, 3), (3, -2)]).unwrap();
        assert_eq!(sparse_to_dense(&k).values(), &[3, 0, 0, -2]);
        let back = dense_to_sparse(&QTensor::new(vec![2, 2], vec![3, 0, 0, -2]).unwrap(), 0);
        assert_eq!(back.entries(), &[(0, 3), (3, -2)]);
    }

    #[test]
    fn zero_and_dense_tensors() {
        let zero = QTensor::zeros(vec![5, 5]);
        assert_eq!(dense_to_sparse(&zero, 1).nnz(), 0);
        let dense = QTensor::new(vec![1, 1, 64], (1..=64).map(|v| v as i8).collect()).unwrap();
        assert_eq!(dense_to_sparse(&dense, 0).nnz(), 64);
    }

    #[test]
    fn kernel_invariants_enforced() {
        assert!(SparseKernel::new(0, vec![2, 2], vec![(1, 1), (1, 2)]).is_err());
        assert!(SparseKernel::new(0, vec![2, 2], vec![(2, 1), (1, 2)]).is_err());
        assert!(SparseKernel::new(0, vec![2, 2], vec![(4, 1)]).is_err());
        assert!(SparseKernel::new(0, vec![2, 2], vec![(0, 0)]).is_err());
        assert!(QTensor::new(vec![2, 2], vec![0; 3]).is_err());
    }

    #[test]
    fn sparse_dense_round_trip_random_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for id in 0..100 {
            let shape = vec![rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..9)];
            let positions: usize = shape.iter().product();
            let mut entries: Vec<(usize, i8)> = Vec::new();
            for p in 0..positions {
                if rng.gen_bool(0.3) {
                    let w: i8 = rng.gen_range(1..=127);
                    entries.push((p, if rng.gen_bool(0.5) { w } else { -w }));
                }
            }
            let k = SparseKernel::new(id, shape, entries).unwrap();
            assert_eq!(dense_to_sparse(&sparse_to_dense(&k), id), k);
        }
    }

    #[test]
    fn requantize_examples() {
        assert_eq!(requantize(0, &Requantizer::new(4).unwrap()), 0);
        assert_eq!(requantize(40, &Requantizer::new(3).unwrap()), 5);
        assert_eq!(requantize(100_000, &Requantizer::new(0).unwrap()), 127);
        assert_eq!(requantize(-100_000, &Requantizer::new(0).unwrap()), -128);
        // half-way cases round away from zero
        assert_eq!(requantize(12, &Requantizer::new(3).unwrap()), 2);
        assert_eq!(requantize(-12, &Requantizer::new(3).unwrap()), -2);
        assert_eq!(requantize(11, &Requantizer::new(3).unwrap()), 1);
        assert!(Requantizer::new(32).is_err());
    }

    #[test]
    fn accumulator_headroom() {
        // 4096 * 16384 = 2^26 < 2^31
        assert!(fits_accumulator(4096));
        assert!(4096 * MAX_PRODUCT_MAGNITUDE < i32::MAX as i64);
        assert!(!fits_accumulator(MAX_ACCUMULATOR_TERMS + 1));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            (0..4096).fold(0i32, |acc, _| {
                let a: i8 = if rng.gen_bool(0.5) { -128 } else { 127 };
                let w: i8 = if rng.gen_bool(0.5) { -128 } else { 127 };
                acc.checked_add(a as i32 * w as i32).expect("overflow")
            });
        }
        let worst: i32 = (0..4096).fold(0i32, |acc, _| acc.checked_add(-128 * -128).unwrap());
        assert_eq!(worst, 4096 * 16384);
    }

    proptest! {
        #[test]
        fn requantize_is_monotone(a in any::<i32>(), b in any::<i32>(), shift in 0u32..=31) {
            let r = Requantizer::new(shift).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(r.apply(lo) <= r.apply(hi));
        }

        #[test]
        fn dense_sparse_dense_identity(values in proptest::collection::vec(any::<i8>(), 1..64)) {
            let t = QTensor::new(vec![values.len()], values).unwrap();
            prop_assert_eq!(sparse_to_dense(&dense_to_sparse(&t, 0)), t);
        }
    }
}
