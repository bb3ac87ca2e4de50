//! Row-major dense matrix of f64 with the handful of kernels the tape
//! needs. No views, no broadcasting beyond what the tape ops spell out.

use super::{DiffError, DiffResult};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> DiffResult<Self> {
        if data.len() != rows * cols {
            return Err(DiffError::Shape {
                context: "Tensor2::from_vec".into(),
                expected: format!("{} values for {}x{}", rows * cols, rows, cols),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// 1 x n row vector.
    pub fn row(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    /// n x 1 column vector.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    /// Stacks equally long rows into an n x k matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> DiffResult<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(DiffError::Shape {
                    context: "Tensor2::from_rows".into(),
                    expected: format!("row of length {cols}"),
                    got: format!("row of length {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a 1x1 tensor.
    pub fn item(&self) -> DiffResult<f64> {
        if self.rows * self.cols != 1 {
            return Err(DiffError::Shape {
                context: "Tensor2::item".into(),
                expected: "1x1".into(),
                got: format!("{}x{}", self.rows, self.cols),
            });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// self + other, elementwise; shapes must match.
    pub fn add(&self, other: &Tensor2) -> DiffResult<Tensor2> {
        self.zip(other, "Tensor2::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> DiffResult<Tensor2> {
        self.zip(other, "Tensor2::sub", |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Tensor2) -> DiffResult<Tensor2> {
        self.zip(other, "Tensor2::mul_elem", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor2 {
        self.map(|v| v * k)
    }

    fn zip(
        &self,
        other: &Tensor2,
        context: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> DiffResult<Tensor2> {
        if self.shape() != other.shape() {
            return Err(DiffError::Shape {
                context: context.into(),
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Adds `other * k` into self in place; shapes must match.
    pub fn axpy(&mut self, k: f64, other: &Tensor2) -> DiffResult<()> {
        if self.shape() != other.shape() {
            return Err(DiffError::Shape {
                context: "Tensor2::axpy".into(),
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    /// self (n x k) times other (k x m).
    pub fn matmul(&self, other: &Tensor2) -> DiffResult<Tensor2> {
        if self.cols != other.rows {
            return Err(DiffError::Shape {
                context: "Tensor2::matmul".into(),
                expected: format!("inner dim {}", self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            let orow = &mut out[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols: other.cols,
            data: out,
        })
    }

    /// self (n x k) times other^T (m x k) -> n x m. Used by backward passes.
    pub fn matmul_nt(&self, other: &Tensor2) -> DiffResult<Tensor2> {
        if self.cols != other.cols {
            return Err(DiffError::Shape {
                context: "Tensor2::matmul_nt".into(),
                expected: format!("cols {}", self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = vec![0.0; self.rows * other.rows];
        for i in 0..self.rows {
            let arow = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let brow = &other.data[j * other.cols..(j + 1) * other.cols];
                out[i * other.rows + j] = arow.iter().zip(brow).map(|(&a, &b)| a * b).sum();
            }
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols: other.rows,
            data: out,
        })
    }

    /// self^T (k x n transposed) times other (k x m) -> n x m.
    pub fn matmul_tn(&self, other: &Tensor2) -> DiffResult<Tensor2> {
        if self.rows != other.rows {
            return Err(DiffError::Shape {
                context: "Tensor2::matmul_tn".into(),
                expected: format!("rows {}", self.rows),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = vec![0.0; self.cols * other.cols];
        for k in 0..self.rows {
            let arow = &self.data[k * self.cols..(k + 1) * self.cols];
            let brow = &other.data[k * other.cols..(k + 1) * other.cols];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor2 {
            rows: self.cols,
            cols: other.cols,
            data: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_result() {
        let a = Tensor2::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor2::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = Tensor2::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let b = Tensor2::from_vec(4, 3, vec![2.0, 1.0, 0.0, -1.0, 3.0, 2.0, 0.5, 0.5, 1.0, 2.0, -2.0, 4.0]).unwrap();
        // a * b^T via explicit transpose
        let bt = {
            let mut t = Tensor2::zeros(3, 4);
            for r in 0..4 {
                for c in 0..3 {
                    t.set(c, r, b.get(r, c));
                }
            }
            t
        };
        assert_eq!(a.matmul(&bt).unwrap(), a.matmul_nt(&b).unwrap());

        let x = Tensor2::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let xt = {
            let mut t = Tensor2::zeros(2, 4);
            for r in 0..4 {
                for c in 0..2 {
                    t.set(c, r, x.get(r, c));
                }
            }
            t
        };
        assert_eq!(xt.matmul(&b).unwrap(), x.matmul_tn(&b).unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor2::zeros(2, 3);
        let b = Tensor2::zeros(2, 3);
        assert!(a.matmul(&b).is_err());
        assert!(a.add(&Tensor2::zeros(3, 2)).is_err());
    }

    #[test]
    fn item_requires_scalar() {
        assert_eq!(Tensor2::scalar(2.5).item().unwrap(), 2.5);
        assert!(Tensor2::zeros(1, 2).item().is_err());
    }
}
