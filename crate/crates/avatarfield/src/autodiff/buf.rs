//! Dense row-major f64 matrix buffer used for tape values and adjoints.

#[derive(Debug, Clone, PartialEq)]
pub struct Buf {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Buf {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Buf {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "buffer shape mismatch");
        Buf { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Buf::from_vec(1, 1, vec![v])
    }

    /// Column vector from a slice.
    pub fn col(data: &[f64]) -> Self {
        Buf::from_vec(data.len(), 1, data.to_vec())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Column `c` as an owned vec (strided read).
    pub fn col_vec(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.at(r, c)).collect()
    }

    pub fn same_shape(&self, other: &Buf) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Accumulates `other` into `self` elementwise.
    pub fn add_assign(&mut self, other: &Buf) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }
}
