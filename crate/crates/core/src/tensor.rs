//! Dense row-major matrices of `f64`. Rows index batch elements, columns
//! index features; every quantity in the graph is one of these.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]{:?}", self.rows, self.cols, self.data)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length");
        Tensor { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn row_vector(data: &[f64]) -> Self {
        Self::from_vec(1, data.len(), data.to_vec())
    }

    pub fn column(data: &[f64]) -> Self {
        Self::from_vec(data.len(), 1, data.to_vec())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise combination with numpy-style broadcasting restricted to
    /// matrices: each dimension must either match or be 1 on one side.
    pub fn zip_broadcast(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        if self.shape() == other.shape() {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect();
            return Tensor::from_vec(self.rows, self.cols, data);
        }
        let (rows, cols) = broadcast_shape(self.shape(), other.shape()).unwrap_or_else(|| {
            panic!(
                "cannot broadcast {:?} with {:?}",
                self.shape(),
                other.shape()
            )
        });
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let ai = if self.rows == 1 { 0 } else { i };
            let bi = if other.rows == 1 { 0 } else { i };
            for j in 0..cols {
                let aj = if self.cols == 1 { 0 } else { j };
                let bj = if other.cols == 1 { 0 } else { j };
                data.push(f(self.get(ai, aj), other.get(bi, bj)));
            }
        }
        Tensor::from_vec(rows, cols, data)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(
            self.cols,
            other.rows,
            "matmul {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            let arow = &self.data[i * k..(i + 1) * k];
            for (p, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::from_vec(n, m, out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.get(i, j));
            }
        }
        Tensor::from_vec(self.cols, self.rows, out)
    }

    /// Sum across columns: n×m → n×1.
    pub fn row_sum(&self) -> Tensor {
        let data = (0..self.rows).map(|i| self.row(i).iter().sum()).collect();
        Tensor::from_vec(self.rows, 1, data)
    }

    /// Sum across rows: n×m → 1×m.
    pub fn col_sum(&self) -> Tensor {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        Tensor::from_vec(1, self.cols, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Expand a broadcastable tensor to `rows × cols`.
    pub fn broadcast_to(&self, rows: usize, cols: usize) -> Tensor {
        if self.shape() == (rows, cols) {
            return self.clone();
        }
        Tensor::zeros(rows, cols).zip_broadcast(self, |_, b| b)
    }

    /// Sum out broadcast dimensions so the result has shape `(rows, cols)`.
    pub fn reduce_to(&self, rows: usize, cols: usize) -> Tensor {
        let mut t = if rows == 1 && self.rows != 1 {
            self.col_sum()
        } else {
            self.clone()
        };
        if cols == 1 && t.cols != 1 {
            t = t.row_sum();
        }
        assert_eq!(t.shape(), (rows, cols), "reduce_to");
        t
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.cols, "slice_cols out of range");
        let mut out = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            out.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Tensor::from_vec(self.rows, len, out)
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        let rows = parts.first().map_or(0, |t| t.rows);
        let cols = parts.iter().map(|t| t.cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                assert_eq!(p.rows, rows, "concat_cols row mismatch");
                out.extend_from_slice(p.row(i));
            }
        }
        Tensor::from_vec(rows, cols, out)
    }

    /// Place `self` into columns `start..start+self.cols` of a zero matrix
    /// with `total` columns.
    pub fn pad_cols(&self, start: usize, total: usize) -> Tensor {
        assert!(start + self.cols <= total, "pad_cols out of range");
        let mut out = Tensor::zeros(self.rows, total);
        for i in 0..self.rows {
            out.row_mut(i)[start..start + self.cols].copy_from_slice(self.row(i));
        }
        out
    }

    /// Stack copies of each row `times` times consecutively.
    pub fn repeat_rows(&self, times: usize) -> Tensor {
        let mut out = Vec::with_capacity(self.data.len() * times);
        for i in 0..self.rows {
            for _ in 0..times {
                out.extend_from_slice(self.row(i));
            }
        }
        Tensor::from_vec(self.rows * times, self.cols, out)
    }

    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut out = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        Tensor::from_vec(idx.len(), self.cols, out)
    }

    pub fn vstack(parts: &[Tensor]) -> Tensor {
        let cols = parts.first().map_or(0, |t| t.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Tensor::from_vec(rows, cols, data)
    }
}

pub(crate) fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]);
        assert_eq!(a.matmul(&b).data(), &[17.0, 39.0]);
    }

    #[test]
    fn broadcast_and_reduce() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let r = Tensor::row_vector(&[10.0, 20.0]);
        let c = Tensor::column(&[1.0, 2.0]);
        assert_eq!(
            a.zip_broadcast(&r, |x, y| x + y).data(),
            &[11.0, 22.0, 13.0, 24.0]
        );
        assert_eq!(
            a.zip_broadcast(&c, |x, y| x * y).data(),
            &[1.0, 2.0, 6.0, 8.0]
        );
        assert_eq!(a.reduce_to(1, 2).data(), &[4.0, 6.0]);
        assert_eq!(a.reduce_to(2, 1).data(), &[3.0, 7.0]);
        assert_eq!(a.reduce_to(1, 1).item(), 10.0);
    }

    #[test]
    fn slicing_round_trip() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let s = a.slice_cols(1, 2);
        assert_eq!(s.data(), &[2.0, 3.0, 5.0, 6.0]);
        let p = s.pad_cols(1, 3);
        assert_eq!(p.data(), &[0.0, 2.0, 3.0, 0.0, 5.0, 6.0]);
        let c = Tensor::concat_cols(&[&a.slice_cols(0, 1), &s]);
        assert_eq!(c, a);
    }
}
