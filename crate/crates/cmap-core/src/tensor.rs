//! Dense row-major `f64` tensor.
//!
//! Deliberately small: no broadcasting, no views, no lazy evaluation.
//! Every binary operation demands exactly matching shapes and returns an
//! error otherwise, and every constructor rejects NaN/Inf so non-finite
//! values cannot cross a public boundary unnoticed. Matrix products route
//! through a tuned GEMM; everything else is straightforward loops.

use crate::error::{invalid, shape_mismatch, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(data: &[f64], context: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

impl Tensor {
    /// Builds a tensor from row-major data. Rejects empty shapes with zero
    /// elements mismatching the data length and any non-finite entry.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(invalid("tensor shape must have at least one dimension"));
        }
        if element_count(&shape) != data.len() {
            return Err(shape_mismatch(
                format!("{} elements for shape {:?}", element_count(&shape), shape),
                format!("{} elements", data.len()),
            ));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let n = element_count(&shape);
        let data: Vec<f64> = (0..n).map(&mut f).collect();
        Self::from_vec(shape, data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = element_count(&shape);
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "tensor fill value".to_string(),
            });
        }
        let n = element_count(&shape);
        Ok(Self {
            shape,
            data: vec![value; n],
        })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::from_vec(vec![n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Row-major element access; `idx.len()` must equal the rank.
    pub fn at(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0usize;
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < self.shape[k], "index out of bounds");
            flat = flat * self.shape[k] + i;
        }
        self.data[flat]
    }

    /// Length-preserving reinterpretation of the shape.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        if element_count(&shape) != self.data.len() {
            return Err(shape_mismatch(
                format!("shape with {} elements", self.data.len()),
                format!("{:?}", shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data, "tensor map result")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if !self.same_shape(other) {
            return Err(shape_mismatch(
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        let data: Vec<f64> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data, "tensor zip result")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map(|v| v * c)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sum of absolute values.
    pub fn norm_l1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_linf(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Mean of absolute values; the element-mean convention used throughout
    /// the restoration losses.
    pub fn mean_abs(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.norm_l1() / self.data.len() as f64
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(shape_mismatch(
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    fn rows_cols(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(invalid(format!(
                "{what} requires a rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul lhs")?;
        let (k2, n) = rhs.rows_cols("matmul rhs")?;
        if k != k2 {
            return Err(shape_mismatch(
                format!("inner dimension {k}"),
                format!("inner dimension {k2}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                rhs.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        check_finite(&out, "matmul result")?;
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `[m,k] x [n,k]^T -> [m,n]`; avoids materializing the transpose.
    pub fn matmul_nt(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rows_cols("matmul_nt lhs")?;
        let (n, k2) = rhs.rows_cols("matmul_nt rhs")?;
        if k != k2 {
            return Err(shape_mismatch(
                format!("inner dimension {k}"),
                format!("inner dimension {k2}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                k as isize,
                1,
                rhs.data.as_ptr(),
                1,
                k2 as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        check_finite(&out, "matmul_nt result")?;
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `[k,m]^T x [k,n] -> [m,n]`.
    pub fn matmul_tn(&self, rhs: &Tensor) -> Result<Tensor> {
        let (k, m) = self.rows_cols("matmul_tn lhs")?;
        let (k2, n) = rhs.rows_cols("matmul_tn rhs")?;
        if k != k2 {
            return Err(shape_mismatch(
                format!("inner dimension {k}"),
                format!("inner dimension {k2}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.data.as_ptr(),
                1,
                m as isize,
                rhs.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        check_finite(&out, "matmul_tn result")?;
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Borrow row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row access requires rank 2");
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Copy row `i` of a rank >= 2 tensor into a tensor of the remaining shape.
    pub fn subtensor(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() < 2 {
            return Err(invalid("subtensor requires rank >= 2"));
        }
        if i >= self.shape[0] {
            return Err(invalid(format!(
                "subtensor index {i} out of bounds for leading dimension {}",
                self.shape[0]
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        })
    }

    /// Stack equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| invalid("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if !t.same_shape(first) {
                return Err(shape_mismatch(
                    format!("{:?}", first.shape),
                    format!("{:?}", t.shape),
                ));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

/// Reinterprets `x` as rows of length `d`: a single sample with `d`
/// elements becomes `[1, d]`, a batch keeps its leading dimension. Returns
/// the row view together with the original shape for restoring.
pub(crate) fn flatten_rows(x: &Tensor, d: usize) -> Result<(Tensor, Vec<usize>)> {
    let shape = x.shape().to_vec();
    let total = x.len();
    if total == d {
        Ok((x.reshape(vec![1, d])?, shape))
    } else if d > 0 && total % d == 0 && !shape.is_empty() && shape[0] == total / d {
        Ok((x.reshape(vec![total / d, d])?, shape))
    } else {
        Err(invalid(format!(
            "input shape {shape:?} incompatible with sample dimension {d}"
        )))
    }
}

mod serde_impl {
    use super::Tensor;
    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Raw {
        shape: Vec<usize>,
        data: Vec<f64>,
    }

    impl Serialize for Tensor {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            Raw {
                shape: self.shape.clone(),
                data: self.data.clone(),
            }
            .serialize(s)
        }
    }

    // Deserialization funnels through `from_vec` so a tampered file cannot
    // smuggle NaN or a shape/data disagreement past the constructor checks.
    impl<'de> Deserialize<'de> for Tensor {
        fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
            let raw = Raw::deserialize(d)?;
            Tensor::from_vec(raw.shape, raw.data).map_err(D::Error::custom)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn serde_round_trip_is_bit_exact() {
        let t = Tensor::from_vec(vec![2, 2], vec![0.1, -1.0 / 3.0, 1e-300, 6399.93]).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        let back: Tensor = serde_json::from_str(&json).unwrap();
        assert_eq!(t, back);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn serde_rejects_inconsistent_payload() {
        let bad = r#"{"shape":[3],"data":[1.0,2.0]}"#;
        assert!(serde_json::from_str::<Tensor>(bad).is_err());
    }

    #[test]
    fn from_vec_rejects_length_mismatch() {
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        let err = Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        let err = Tensor::from_vec(vec![1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn add_rejects_shape_mismatch_instead_of_broadcasting() {
        let a = Tensor::from_vec(vec![2, 2], vec![1.0; 4]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![1.0; 2]).unwrap();
        assert!(a.add(&b).is_err());
        let c = Tensor::from_vec(vec![1, 4], vec![1.0; 4]).unwrap();
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn row_major_indexing() {
        let t = Tensor::from_vec(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_matches_hand_computation() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = Tensor::from_vec(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let b = Tensor::from_vec(vec![4, 3], (0..12).map(|i| i as f64 * 0.25 - 1.0).collect())
            .unwrap();
        // a (2x3) x b^T (3x4)
        let nt = a.matmul_nt(&b).unwrap();
        let bt = Tensor::from_fn(vec![3, 4], |i| b.at(&[i % 4, i / 4])).unwrap();
        let reference = a.matmul(&bt).unwrap();
        for (x, y) in nt.data().iter().zip(reference.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        // a^T (3x2) x a (2x3) via matmul_tn
        let tn = a.matmul_tn(&a).unwrap();
        let at = Tensor::from_fn(vec![3, 2], |i| a.at(&[i % 2, i / 2])).unwrap();
        let reference = at.matmul(&a).unwrap();
        for (x, y) in tn.data().iter().zip(reference.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn norms_match_definitions() {
        let t = Tensor::from_vec(vec![4], vec![3.0, -4.0, 0.0, 1.0]).unwrap();
        assert_eq!(t.norm_l1(), 8.0);
        assert!((t.norm_l2() - 26.0_f64.sqrt()).abs() < 1e-15);
        assert_eq!(t.norm_linf(), 4.0);
        assert_eq!(t.mean_abs(), 2.0);
        assert_eq!(t.sum(), 0.0);
    }

    #[test]
    fn stack_and_subtensor_round_trip() {
        let a = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let b = Tensor::vector(vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.subtensor(0).unwrap(), a);
        assert_eq!(s.subtensor(1).unwrap(), b);
        assert!(s.subtensor(2).is_err());
    }

    proptest! {
        #[test]
        fn zip_map_preserves_shape(len in 1usize..64) {
            let a = Tensor::from_fn(vec![len], |i| i as f64).unwrap();
            let b = Tensor::from_fn(vec![len], |i| (i as f64).sin()).unwrap();
            let c = a.zip_map(&b, |x, y| x - y).unwrap();
            prop_assert_eq!(c.shape(), a.shape());
            prop_assert_eq!(c.len(), len);
        }

        #[test]
        fn clamp_bounds_hold(vals in proptest::collection::vec(-10.0f64..10.0, 1..32)) {
            let t = Tensor::vector(vals).unwrap();
            let c = t.clamp(0.0, 1.0).unwrap();
            prop_assert!(c.min() >= 0.0 && c.max() <= 1.0);
        }
    }
}
