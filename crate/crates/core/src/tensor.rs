//! Dense row-major tensors and the matmul kernels used by the layers.
//!
//! Every output element is accumulated by exactly one worker in a fixed
//! order, so results are bit-identical for any rayon pool size.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    data: Vec<f64>,
    shape: Vec<usize>,
}

/// Below this many multiply-adds a matmul always runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 15;

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {n} elements, got {}", data.len())));
        }
        Ok(Tensor { data, shape })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { data: vec![0.0; n], shape }
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { data: vec![v; n], shape }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { data, shape: vec![rows, cols] }
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
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

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("expected a 2-D tensor, got shape {s:?}"))),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        let (rows, cols) = (self.shape[0], self.shape[1]);
        (0..rows).map(|r| self.data[r * cols + c]).collect()
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        Ok(Tensor::from_fn(c, r, |i, j| self.data[j * c + i]))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { data: self.data.iter().map(|&v| f(v)).collect(), shape: self.shape.clone() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { data, shape: self.shape.clone() })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_mut(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    /// Add `bias` (length = cols) to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) -> Result<()> {
        let (_, c) = self.dims2()?;
        if bias.len() != c {
            return Err(Error::shape(format!("bias of length {} for {c} columns", bias.len())));
        }
        for row in self.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }

    /// Column sums of a 2-D tensor.
    pub fn sum_rows(&self) -> Result<Vec<f64>> {
        let (_, c) = self.dims2()?;
        let mut out = vec![0.0; c];
        for row in self.data.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Scale column `j` by `k[j]`.
    pub fn scale_columns(&self, k: &[f64]) -> Result<Tensor> {
        let (_, c) = self.dims2()?;
        if k.len() != c {
            return Err(Error::shape(format!("{} column factors for {c} columns", k.len())));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(c) {
            for (v, s) in row.iter_mut().zip(k) {
                *v *= s;
            }
        }
        Ok(out)
    }

    /// Scale row `i` by `k[i]`.
    pub fn scale_rows(&self, k: &[f64]) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if k.len() != r {
            return Err(Error::shape(format!("{} row factors for {r} rows", k.len())));
        }
        let mut out = self.clone();
        for (row, s) in out.data.chunks_mut(c).zip(k) {
            for v in row {
                *v *= s;
            }
        }
        Ok(out)
    }

    pub fn amax(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// `self · other` for `[m x k] · [k x n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        let a = &self.data;
        let b = &other.data;
        let row_kernel = |i: usize, out_row: &mut [f64]| {
            let a_row = &a[i * k..(i + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        };
        run_rows(&mut out, n, m * k * n, row_kernel);
        Tensor::from_vec(vec![m, n], out)
    }

    /// `selfᵀ · other` for `[t x m]ᵀ · [t x n]`, accumulated over `t` in order.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (t, m) = self.dims2()?;
        let (t2, n) = other.dims2()?;
        if t != t2 {
            return Err(Error::shape(format!("matmul_tn [{t}x{m}]ᵀ · [{t2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        let a = &self.data;
        let b = &other.data;
        let row_kernel = |i: usize, out_row: &mut [f64]| {
            for s in 0..t {
                let av = a[s * m + i];
                if av == 0.0 {
                    continue;
                }
                let b_row = &b[s * n..(s + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        };
        run_rows(&mut out, n, t * m * n, row_kernel);
        Tensor::from_vec(vec![m, n], out)
    }

    /// `self · otherᵀ` for `[m x k] · [n x k]ᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (_, k) = self.dims2()?;
        let (_, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt inner dims {k} vs {k2}")));
        }
        self.matmul(&other.transpose()?)
    }
}

fn run_rows(out: &mut [f64], n: usize, work: usize, kernel: impl Fn(usize, &mut [f64]) + Sync) {
    if n == 0 {
        return;
    }
    if rayon::current_num_threads() > 1 && work >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| kernel(i, row));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| kernel(i, row));
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(r: usize, c: usize, v: &[f64]) -> Tensor {
        Tensor::from_vec(vec![r, c], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_variants_agree() {
        let a = t(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = t(3, 2, &[7., 8., 9., 10., 11., 12.]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
        let at = a.transpose().unwrap();
        assert_eq!(at.matmul_tn(&b).unwrap(), c);
        let bt = b.transpose().unwrap();
        assert_eq!(a.matmul_nt(&bt).unwrap(), c);
    }

    #[test]
    fn shape_errors() {
        let a = t(2, 3, &[0.; 6]);
        assert!(a.matmul(&a).is_err());
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0]).is_err());
        assert!(Tensor::zeros(vec![3]).dims2().is_err());
    }

    #[test]
    fn pool_size_does_not_change_bits() {
        let a = Tensor::from_fn(64, 96, |i, j| ((i * 31 + j * 17) % 23) as f64 / 7.0 - 1.3);
        let b = Tensor::from_fn(96, 80, |i, j| ((i * 13 + j * 5) % 19) as f64 / 3.0 - 2.9);
        let single = a.matmul(&b).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let multi = pool.install(|| a.matmul(&b).unwrap());
        assert_eq!(single.data(), multi.data());
        let tn1 = a.matmul_tn(&a).unwrap();
        let tn4 = pool.install(|| a.matmul_tn(&a).unwrap());
        assert_eq!(tn1.data(), tn4.data());
    }
}
