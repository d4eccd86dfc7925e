//! Dense matrices, seeded random streams and the closed-form probability
//! functions shared by every other module.

use std::f64::consts::PI;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, AbnnError, Result};

/// Row-major dense matrix of `f64`, batch-major when it holds activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::from_vec",
                format!("{} values", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err("Matrix::vstack", self.cols, other.cols));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                other.rows,
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_err("t_matmul", self.rows, other.rows));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = other.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err("matmul_t", self.cols, other.cols));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                let b_row = other.row(j);
                out.data[i * other.rows + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(out)
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(shape_err(
                "add_row",
                format!("(1, {})", self.cols),
                format!("{:?}", bias.shape()),
            ));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1×cols` row.
    pub fn sum_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(other, "zip_map")?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.add_scaled(other, 1.0)
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        self.same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry in each row (first wins on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded generator with explicit substreams.
///
/// Each `(seed, stream_id)` pair maps to its own ChaCha8 stream, so two
/// generators never share state. [`Rng::derive`] mixes a child index into the
/// stream id to obtain further independent substreams.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent child stream; does not advance `self`.
    pub fn derive(&self, child: u64) -> Rng {
        let mixed = splitmix64(self.stream_id ^ splitmix64(child.wrapping_add(1)));
        Rng::with_stream(self.seed, mixed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`, safe to feed to `ln`.
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; bias is negligible for the small n used here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform();
        let (z0, z1) = box_muller(u1, u2);
        self.spare_normal = Some(z1);
        z0
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Box–Muller transform of two uniforms, `u1 ∈ (0, 1]`.
pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// `n` i.i.d. standard normal draws as a `1×n` row.
pub fn gaussian_sample(rng: &mut Rng, n: usize) -> Matrix {
    assert!(n >= 1, "gaussian_sample needs n >= 1");
    Matrix::row_vector((0..n).map(|_| rng.normal()).collect())
}

/// Fills a matrix of the given shape with standard normal draws.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal()).collect();
    Matrix { rows, cols, data }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `KL(N(mu, sigma²) ‖ N(0, 1)) = ½(mu² + sigma² − ln sigma² − 1)`.
pub fn kl_gauss_std(mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(AbnnError::Domain(format!("sigma must be > 0, got {sigma}")));
    }
    let s2 = sigma * sigma;
    Ok(0.5 * (mu * mu + s2 - s2.ln() - 1.0))
}

/// Error function. Power series below |x| = 3, continued fraction above.
pub fn erf(x: f64) -> f64 {
    if x.abs() < 3.0 {
        erf_series(x)
    } else {
        x.signum() * (1.0 - erfc_cf(x.abs()))
    }
}

fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= -x2 / n;
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-17 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum * 2.0 / PI.sqrt()
}

/// erfc for z ≥ 3 via the Laplace continued fraction, evaluated bottom-up.
fn erfc_cf(z: f64) -> f64 {
    let mut f = z;
    for n in (1..=120).rev() {
        f = z + (n as f64 / 2.0) / f;
    }
    (-z * z).exp() / (PI.sqrt() * f)
}

/// Standard normal distribution function Φ.
pub fn std_normal_cdf(x: f64) -> f64 {
    let z = x / std::f64::consts::SQRT_2;
    if z.abs() < 3.0 {
        0.5 * (1.0 + erf_series(z))
    } else if z > 0.0 {
        1.0 - 0.5 * erfc_cf(z)
    } else {
        0.5 * erfc_cf(-z)
    }
}

/// Mean over rows of `−Σ_k target·ln(pred)`, with `pred` clamped to `[1e-12, 1]`.
pub fn cross_entropy(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(shape_err(
            "cross_entropy",
            format!("{:?}", pred.shape()),
            format!("{:?}", target.shape()),
        ));
    }
    if pred.rows() == 0 {
        return Err(AbnnError::Domain("cross_entropy on empty batch".into()));
    }
    for r in 0..pred.rows() {
        let ps: f64 = pred.row(r).iter().sum();
        let ts: f64 = target.row(r).iter().sum();
        if (ps - 1.0).abs() > 1e-6 || (ts - 1.0).abs() > 1e-6 {
            return Err(AbnnError::Domain(format!(
                "row {r} is not a probability vector (sums {ps}, {ts})"
            )));
        }
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| -t * p.clamp(1e-12, 1.0).ln())
        .sum();
    Ok(total / pred.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_muller_hand_values() {
        assert!(box_muller(0.5, 0.25).0.abs() < 1e-15);
        let (z, _) = box_muller(0.5, 0.5);
        assert!((z - (-1.1774100225154747)).abs() < 1e-12, "{z}");
    }

    #[test]
    fn gaussian_sample_moments() {
        let mut rng = Rng::new(7);
        let s = gaussian_sample(&mut rng, 1_000_000);
        let mean = s.mean();
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1e6;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = gaussian_sample(&mut Rng::with_stream(3, 9), 64);
        let b = gaussian_sample(&mut Rng::with_stream(3, 9), 64);
        let c = gaussian_sample(&mut Rng::with_stream(3, 10), 64);
        assert_eq!(a, b);
        assert_ne!(a, c);
        let root = Rng::new(3);
        assert_eq!(
            gaussian_sample(&mut root.derive(4), 8),
            gaussian_sample(&mut root.derive(4), 8)
        );
        assert_ne!(
            gaussian_sample(&mut root.derive(4), 8),
            gaussian_sample(&mut root.derive(5), 8)
        );
    }

    #[test]
    fn derived_streams_each_look_standard_normal() {
        let root = Rng::new(11);
        for k in 0..4 {
            let s = gaussian_sample(&mut root.derive(k), 200_000);
            let mean = s.mean();
            let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2e5;
            assert!(mean.abs() < 0.012, "stream {k} mean {mean}");
            assert!((var - 1.0).abs() < 0.02, "stream {k} var {var}");
        }
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&Matrix::row_vector(vec![0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Matrix::row_vector(vec![2f64.ln(), 0.0]));
        assert!((s.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        let s = softmax(&Matrix::row_vector(vec![1000.0, 1000.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn kl_values() {
        assert_eq!(kl_gauss_std(0.0, 1.0).unwrap(), 0.0);
        assert!((kl_gauss_std(1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((kl_gauss_std(0.0, 2.0).unwrap() - 0.8068528194400547).abs() < 1e-12);
        assert!(matches!(kl_gauss_std(0.0, 0.0), Err(AbnnError::Domain(_))));
        assert!(kl_gauss_std(0.0, -1.0).is_err());
    }

    /// Simpson integration of the normal pdf from 0 to x.
    fn cdf_oracle(x: f64) -> f64 {
        let n = 20_000;
        let h = x / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * PI).sqrt();
        let mut s = pdf(0.0) + pdf(x);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * pdf(i as f64 * h);
        }
        0.5 + s * h / 3.0
    }

    #[test]
    fn normal_cdf_against_quadrature() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        assert!((std_normal_cdf(std::f64::consts::FRAC_1_SQRT_2) - 0.7602499).abs() < 1e-7);
        for &x in &[0.1, 0.5, 1.0, 2.0, 3.5, 4.2, 5.0, 6.5] {
            let want = cdf_oracle(x);
            assert!((std_normal_cdf(x) - want).abs() < 1e-10, "x={x}");
            assert!((std_normal_cdf(-x) - (1.0 - want)).abs() < 1e-10, "x=-{x}");
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let half = Matrix::row_vector(vec![0.5, 0.5]);
        assert!((cross_entropy(&half, &half).unwrap() - 2f64.ln()).abs() < 1e-15);
        let one = Matrix::row_vector(vec![1.0, 0.0]);
        assert!(cross_entropy(&one, &one).unwrap() < 1e-11);
        let p = Matrix::row_vector(vec![0.75, 0.25]);
        assert!((cross_entropy(&p, &half).unwrap() - 0.8369882167858358).abs() < 1e-12);
        let wide = Matrix::row_vector(vec![0.2, 0.3, 0.5]);
        assert!(matches!(cross_entropy(&wide, &half), Err(AbnnError::Shape { .. })));
    }

    #[test]
    fn softplus_roundtrip_and_derivative() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus_inv(1.0) - 0.5413248546129181).abs() < 1e-12);
        for &y in &[1e-4, 0.3, 1.0, 7.0, 100.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() < 1e-9 * y.max(1.0));
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(softplus(800.0).is_finite());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 0.5], vec![-1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[-1.0, 7.5, -1.0, 18.0]);
        let bt = Matrix::from_rows(&[vec![1.0, -1.0, 0.0], vec![0.5, 2.0, 1.0]]).unwrap();
        assert_eq!(a.matmul_t(&bt).unwrap(), ab);
        let at = Matrix::from_rows(&[vec![1.0, 4.0], vec![2.0, 5.0], vec![3.0, 6.0]]).unwrap();
        assert_eq!(at.t_matmul(&b).unwrap(), ab);
    }
}
