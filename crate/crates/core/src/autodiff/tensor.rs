use rand::Rng;

use crate::error::{PheError, Result};

/// Dense row-major tensor of `f64`.
///
/// Storage accepts rank up to 3; the differentiable primitives operate on
/// rank-2 tensors (vectors are `n×1` or `1×n`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(PheError::Shape(format!("rank {} exceeds 3", shape.len())));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(PheError::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix payload length");
        Tensor {
            shape: vec![rows, cols],
            data,
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Tensor {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::matrix(n, 1, values)
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::matrix(1, n, values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// I.i.d. uniform entries in `[lo, hi)`.
    pub fn seeded_uniform<R: Rng + ?Sized>(
        shape: &[usize],
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if !(lo < hi) {
            return Err(PheError::Config(format!(
                "uniform bounds require lo < hi, got [{lo}, {hi}]"
            )));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Fan-balanced uniform initialization, bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn fan_balanced<R: Rng + ?Sized>(
        rows: usize,
        cols: usize,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self::matrix(rows, cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn reshaped(mut self, rows: usize, cols: usize) -> Self {
        assert_eq!(rows * cols, self.data.len(), "reshape payload length");
        self.shape = vec![rows, cols];
        self
    }

    /// Population standard deviation over all entries.
    /// Population standard deviation; exactly 0 for constant data, where
    /// the rounded mean would otherwise leave a tiny residual.
    pub fn std(&self) -> f64 {
        let Some(&first) = self.data.first() else {
            return 0.0;
        };
        if self.data.iter().all(|&x| x == first) {
            return 0.0;
        }
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        var.sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.data.len(), other.data.len());
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let n = other.cols();
        assert_eq!(k, other.rows(), "matmul inner dimension");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let n = other.rows();
        assert_eq!(k, other.cols(), "matmul_nt inner dimension");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Tensor) -> Tensor {
        let (k, m) = (self.rows(), self.cols());
        let n = other.cols();
        assert_eq!(k, other.rows(), "matmul_tn inner dimension");
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn gather_rows(&self, index: &[usize]) -> Tensor {
        let c = self.cols();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(self.row(i));
        }
        Tensor::matrix(index.len(), c, out)
    }

    pub fn scatter_add_rows(&self, index: &[usize], out_rows: usize) -> Tensor {
        let c = self.cols();
        let mut out = Tensor::zeros(out_rows, c);
        for (src, &dst) in index.iter().enumerate() {
            let s = &self.data[src * c..(src + 1) * c];
            for (o, v) in out.row_mut(dst).iter_mut().zip(s) {
                *o += v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_data_has_zero_std() {
        // 15 copies of 0.37 do not average back to exactly 0.37
        let t = Tensor::full(5, 3, 0.37);
        assert_ne!(t.sum() / 15.0, 0.37);
        assert_eq!(t.std(), 0.0);
        assert_eq!(Tensor::matrix(1, 2, vec![1.0, 3.0]).std(), 1.0);
    }

    #[test]
    fn rejects_bad_payload() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(vec![2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::seeded_uniform(&[3, 4], -1.0, 1.0, &mut rng).unwrap();
        let b = Tensor::seeded_uniform(&[4, 2], -1.0, 1.0, &mut rng).unwrap();
        let ab = a.matmul(&b);
        let ab_nt = a.matmul_nt(&b.transpose());
        let ab_tn = a.transpose().matmul_tn(&b);
        for ((x, y), z) in ab.data().iter().zip(ab_nt.data()).zip(ab_tn.data()) {
            assert!((x - y).abs() < 1e-14 && (x - z).abs() < 1e-14);
        }
    }

    #[test]
    fn uniform_rejects_empty_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Tensor::seeded_uniform(&[2, 2], 0.5, 0.5, &mut rng).is_err());
        assert!(Tensor::seeded_uniform(&[2, 2], 1.0, 0.5, &mut rng).is_err());
    }

    #[test]
    fn uniform_is_deterministic() {
        let a = Tensor::seeded_uniform(&[5, 5], -0.1, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = Tensor::seeded_uniform(&[5, 5], -0.1, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = Tensor::seeded_uniform(&[1000, 1000], -0.1, 0.1, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-3, "mean {mean}");
        let expected = 0.2f64.powi(2) / 12.0;
        assert!((var - expected).abs() / expected < 0.01, "var {var} vs {expected}");
    }

    #[test]
    fn std_of_constant_is_zero() {
        assert_eq!(Tensor::full(3, 3, 2.5).std(), 0.0);
    }
}
