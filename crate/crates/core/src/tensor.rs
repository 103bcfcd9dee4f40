//! Dense rank-4 (batch, channel, height, width) and rank-2 containers.
//!
//! Storage is row-major with the batch index outermost, so instance `n`
//! occupies one contiguous run of `c * h * w` values and each `(n, c)` plane
//! is a contiguous run of `h * w` values.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape4 { n, c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn instance(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape4, value: f64) -> Self {
        assert!(
            shape.n > 0 && shape.c > 0 && shape.h > 0 && shape.w > 0,
            "Tensor4 dimensions must be positive, got {shape}"
        );
        Tensor4 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> Result<Self> {
        if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
            return Err(Error::shape("Tensor4::from_vec", format!("zero dimension in {shape}")));
        }
        if data.len() != shape.len() {
            return Err(Error::shape(
                "Tensor4::from_vec",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor4 { shape, data })
    }

    /// Elements drawn i.i.d. from `N(0, std^2)`.
    pub fn randn(shape: Shape4, std: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = std * rng.normal());
        t
    }

    pub fn rand_uniform(shape: Shape4, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|v| *v = rng.uniform_range(lo, hi));
        t
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.shape.index(n, c, h, w);
        self.data[i] = v;
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn instance(&self, n: usize) -> &[f64] {
        let s = self.shape.instance();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor4, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{} vs {}", self.shape, other.shape)));
        }
        Ok(Tensor4 {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Tensor4 {
        self.map(|v| k * v)
    }

    fn check_per_channel(&self, m: &Matrix, op: &'static str) -> Result<()> {
        if m.rows() != self.shape.n || m.cols() != self.shape.c {
            return Err(Error::shape(
                op,
                format!("per-channel operand {}x{} for tensor {}", m.rows(), m.cols(), self.shape),
            ));
        }
        Ok(())
    }

    /// Multiplies every `(n, c)` plane by `factors[n, c]`.
    pub fn channel_mul(&self, factors: &Matrix) -> Result<Tensor4> {
        self.check_per_channel(factors, "channel_mul")?;
        let mut out = self.clone();
        for n in 0..self.shape.n {
            for c in 0..self.shape.c {
                let k = factors.get(n, c);
                out.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
            }
        }
        Ok(out)
    }

    /// Adds `offsets[n, c]` to every element of each `(n, c)` plane.
    pub fn channel_add(&self, offsets: &Matrix) -> Result<Tensor4> {
        self.check_per_channel(offsets, "channel_add")?;
        let mut out = self.clone();
        for n in 0..self.shape.n {
            for c in 0..self.shape.c {
                let k = offsets.get(n, c);
                out.plane_mut(n, c).iter_mut().for_each(|v| *v += k);
            }
        }
        Ok(out)
    }

    /// Reshapes to `N x (C*H*W)`; row `i` is instance `i` in storage order.
    pub fn flatten_batch(&self) -> Matrix {
        Matrix {
            rows: self.shape.n,
            cols: self.shape.instance(),
            data: self.data.clone(),
        }
    }

    /// Inverse of [`Tensor4::flatten_batch`].
    pub fn unflatten_batch(m: &Matrix, shape: Shape4) -> Result<Tensor4> {
        if m.rows() != shape.n || m.cols() != shape.instance() {
            return Err(Error::shape(
                "unflatten_batch",
                format!("{}x{} matrix into {shape}", m.rows(), m.cols()),
            ));
        }
        Tensor4::from_vec(shape, m.data().to_vec())
    }

    /// Reorders instances: output instance `i` is input instance `perm[i]`.
    pub fn permute_batch(&self, perm: &[usize]) -> Tensor4 {
        assert_eq!(perm.len(), self.shape.n, "permutation length");
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            data.extend_from_slice(self.instance(src));
        }
        Tensor4 { shape: self.shape, data }
    }

    /// Stacks single-instance tensors of equal shape along the batch axis.
    pub fn stack(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("stack", "no tensors to stack"))?
            .shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(Error::shape("stack", format!("{s} vs {first}")));
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Tensor4::from_vec(Shape4::new(n, first.c, first.h, first.w), data)
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape");
        max_abs_diff(&self.data, &other.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in d.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.iter_mut().for_each(|v| *v = std * rng.normal());
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Standard matrix product, accumulated in i-k-j order.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} by {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "Matrix::add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "Matrix::sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| k * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Output row `i` is input row `perm[i]`.
    pub fn permute_rows(&self, perm: &[usize]) -> Matrix {
        assert_eq!(perm.len(), self.rows, "permutation length");
        let mut data = Vec::with_capacity(self.data.len());
        for &src in perm {
            data.extend_from_slice(self.row(src));
        }
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "max_abs_diff shape");
        max_abs_diff(&self.data, &other.data)
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..self.cols.min(self.rows) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn flatten_small_layout() {
        let t = Tensor4::from_vec(Shape4::new(2, 1, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = t.flatten_batch();
        assert_eq!((m.rows(), m.cols()), (2, 2));
        assert_eq!(m.row(0), &[1.0, 2.0]);
        assert_eq!(m.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn flatten_single_instance_preserves_order() {
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let t = Tensor4::from_vec(Shape4::new(1, 3, 2, 2), data.clone()).unwrap();
        let m = t.flatten_batch();
        assert_eq!((m.rows(), m.cols()), (1, 12));
        assert_eq!(m.data(), &data[..]);
    }

    #[test]
    fn flatten_matches_index_loop() {
        let mut rng = Rng::new(5);
        let s = Shape4::new(4, 3, 5, 5);
        let t = Tensor4::randn(s, 1.0, &mut rng);
        let m = t.flatten_batch();
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        let col = c * s.h * s.w + h * s.w + w;
                        assert_eq!(m.get(n, col), t.get(n, c, h, w));
                    }
                }
            }
        }
    }

    #[test]
    fn flatten_round_trip_exhaustive_small() {
        let mut rng = Rng::new(9);
        for n in 1..=3 {
            for c in 1..=3 {
                for h in 1..=3 {
                    for w in 1..=3 {
                        let s = Shape4::new(n, c, h, w);
                        let t = Tensor4::randn(s, 1.0, &mut rng);
                        let back = Tensor4::unflatten_batch(&t.flatten_batch(), s).unwrap();
                        assert_eq!(back, t);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor4::from_vec(Shape4::new(0, 1, 1, 1), vec![]).is_err());
        assert!(Tensor4::from_vec(Shape4::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn matmul_identity_and_forced() {
        let mut rng = Rng::new(1);
        let m = Matrix::randn(3, 4, 1.0, &mut rng);
        assert_eq!(Matrix::identity(3).matmul(&m).unwrap(), m);

        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let p = a.matmul(&b).unwrap();
        assert_eq!(p.data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(2);
        let a = Matrix::randn(7, 5, 1.0, &mut rng);
        let b = Matrix::randn(5, 3, 1.0, &mut rng);
        let p = a.matmul(&b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..5 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((p.get(i, j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_identities() {
        let mut rng = Rng::new(4);
        let s = Shape4::new(2, 3, 4, 4);
        let x = Tensor4::randn(s, 1.0, &mut rng);
        assert_eq!(x.add(&Tensor4::zeros(s)).unwrap(), x);
        assert_eq!(x.scale(1.0), x);
        assert!(x.add(&Tensor4::zeros(Shape4::new(2, 3, 4, 5))).is_err());
    }

    #[test]
    fn channel_mul_matches_loop() {
        let mut rng = Rng::new(6);
        let s = Shape4::new(3, 4, 5, 6);
        let x = Tensor4::randn(s, 1.0, &mut rng);
        let k = Matrix::randn(3, 4, 1.0, &mut rng);
        let y = x.channel_mul(&k).unwrap();
        for n in 0..s.n {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        assert_eq!(y.get(n, c, h, w), x.get(n, c, h, w) * k.get(n, c));
                    }
                }
            }
        }
        assert!(x.channel_mul(&Matrix::zeros(4, 3)).is_err());
    }

    proptest! {
        #[test]
        fn flatten_round_trip(n in 1usize..5, c in 1usize..6, h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let s = Shape4::new(n, c, h, w);
            let t = Tensor4::randn(s, 1.0, &mut Rng::new(seed));
            prop_assert_eq!(Tensor4::unflatten_batch(&t.flatten_batch(), s).unwrap(), t);
        }

        #[test]
        fn matmul_associative(r in 1usize..6, k1 in 1usize..6, k2 in 1usize..6, c in 1usize..6, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = Matrix::randn(r, k1, 1.0, &mut rng);
            let b = Matrix::randn(k1, k2, 1.0, &mut rng);
            let d = Matrix::randn(k2, c, 1.0, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&d).unwrap();
            let right = a.matmul(&b.matmul(&d).unwrap()).unwrap();
            let scale = left.data().iter().map(|v| v.abs()).fold(1.0, f64::max);
            prop_assert!(left.max_abs_diff(&right) / scale < 1e-9);
        }
    }
}
