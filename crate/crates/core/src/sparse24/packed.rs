use crate::error::{Error, Result};
use crate::matcore::DenseMatrix;

/// Packed 2:4 matrix.
///
/// Every row-group of four logical columns stores exactly two kept slots.
/// `values` holds the kept values row-major (`rows * cols / 2` entries).
/// `meta` holds one 2-bit in-group column index per kept value, four per
/// byte, lowest bits first; the two indices of a group are strictly
/// increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Sparse24Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    meta: Vec<u8>,
}

pub(crate) fn meta_len(slots: usize) -> usize {
    slots.div_ceil(4)
}

impl Sparse24Matrix {
    /// Builds from unpacked slot indices. Callers guarantee validity.
    pub(crate) fn from_slots(rows: usize, cols: usize, values: Vec<f64>, slots: &[u8]) -> Self {
        debug_assert_eq!(values.len(), slots.len());
        let mut meta = vec![0u8; meta_len(slots.len())];
        for (k, &s) in slots.iter().enumerate() {
            meta[k / 4] |= (s & 0b11) << (2 * (k % 4));
        }
        let m = Self {
            rows,
            cols,
            values,
            meta,
        };
        debug_assert!(m.validate().is_ok());
        m
    }

    /// Validating constructor over raw packed parts.
    pub fn from_parts(rows: usize, cols: usize, values: Vec<f64>, meta: Vec<u8>) -> Result<Self> {
        let m = Self {
            rows,
            cols,
            values,
            meta,
        };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if self.cols % 4 != 0 {
            return Err(Error::NotDivisible {
                what: "columns",
                value: self.cols,
                by: 4,
            });
        }
        let slots = self.rows * self.cols / 2;
        if self.values.len() != slots {
            return Err(Error::Corrupt(format!(
                "{} values for {} kept slots",
                self.values.len(),
                slots
            )));
        }
        if self.meta.len() != meta_len(slots) {
            return Err(Error::Corrupt(format!(
                "{} meta bytes for {} kept slots",
                self.meta.len(),
                slots
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Corrupt("non-finite kept value".into()));
        }
        for g in 0..slots / 2 {
            let (a, b) = (self.slot(2 * g), self.slot(2 * g + 1));
            if a >= b {
                let cols_per_row = self.cols / 4;
                return Err(Error::Corrupt(format!(
                    "meta index collision in row {}, group {}: [{a}, {b}]",
                    g / cols_per_row.max(1),
                    g % cols_per_row.max(1)
                )));
            }
        }
        if slots % 4 != 0 {
            let used = 2 * (slots % 4);
            if self.meta[self.meta.len() - 1] >> used != 0 {
                return Err(Error::Corrupt("nonzero meta padding bits".into()));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn meta(&self) -> &[u8] {
        &self.meta
    }

    /// In-group column index of kept slot `k`.
    #[inline]
    pub fn slot(&self, k: usize) -> usize {
        ((self.meta[k / 4] >> (2 * (k % 4))) & 0b11) as usize
    }

    pub fn slot_indices(&self) -> Vec<usize> {
        (0..self.values.len()).map(|k| self.slot(k)).collect()
    }

    /// Logical column of kept slot `k` within its row.
    #[inline]
    pub(crate) fn slot_col(&self, k: usize) -> usize {
        let per_row = self.cols / 2;
        4 * ((k % per_row) / 2) + self.slot(k)
    }

    pub fn decode(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        let per_row = self.cols / 2;
        let data = out.data_mut();
        for (k, &v) in self.values.iter().enumerate() {
            let r = k / per_row.max(1);
            data[r * self.cols + self.slot_col(k)] = v;
        }
        out
    }

    /// 0/1 matrix marking kept slots.
    pub fn kept_mask(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        let per_row = self.cols / 2;
        let data = out.data_mut();
        for k in 0..self.values.len() {
            let r = k / per_row.max(1);
            data[r * self.cols + self.slot_col(k)] = 1.0;
        }
        out
    }

    /// Same sparsity pattern, values read from `dense` at the kept slots.
    pub fn with_values_from(&self, dense: &DenseMatrix) -> Result<Self> {
        if dense.shape() != self.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_values_from",
                left: self.shape(),
                right: dense.shape(),
            });
        }
        let per_row = self.cols / 2;
        let values = (0..self.values.len())
            .map(|k| dense.get(k / per_row.max(1), self.slot_col(k)))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            values,
            meta: self.meta.clone(),
        })
    }

    /// Number of nonzero kept values.
    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_expansion() {
        // One group: values [5, 3] at indices [1, 3].
        let meta = vec![0b1101];
        let s = Sparse24Matrix::from_parts(1, 4, vec![5.0, 3.0], meta).unwrap();
        assert_eq!(s.decode().data(), &[0.0, 5.0, 0.0, 3.0]);
    }

    #[test]
    fn collision_rejected() {
        // 0x00 encodes indices [0, 0].
        let err = Sparse24Matrix::from_parts(1, 4, vec![1.0, 2.0], vec![0]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)));
        // Decreasing indices [3, 1].
        assert!(Sparse24Matrix::from_parts(1, 4, vec![1.0, 2.0], vec![0b0111]).is_err());
    }

    #[test]
    fn wrong_lengths_rejected() {
        assert!(Sparse24Matrix::from_parts(1, 4, vec![1.0], vec![0b0100]).is_err());
        assert!(Sparse24Matrix::from_parts(1, 4, vec![1.0, 2.0], vec![0b0100, 0]).is_err());
        assert!(Sparse24Matrix::from_parts(1, 6, vec![1.0; 3], vec![0]).is_err());
    }

    #[test]
    fn padding_bits_must_be_zero() {
        assert!(Sparse24Matrix::from_parts(1, 4, vec![1.0, 2.0], vec![0b1111_0100]).is_err());
    }

    #[test]
    fn gather_uses_pattern() {
        let s = Sparse24Matrix::from_parts(1, 4, vec![5.0, 3.0], vec![0b1101]).unwrap();
        let d = DenseMatrix::from_rows(&[&[9.0, 8.0, 7.0, 6.0]]).unwrap();
        let g = s.with_values_from(&d).unwrap();
        assert_eq!(g.values(), &[8.0, 6.0]);
        assert_eq!(s.kept_mask().data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
