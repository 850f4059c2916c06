//! Dense f64 matrices, seeded random streams and the handful of samplers
//! (Gaussian, chi-square, binomial) the rest of the crate is built on.
//!
//! Gaussian draws use the ziggurat sampler from `rand_distr` on top of a
//! ChaCha8 stream, so every sample is a pure function of the seed and the
//! order of calls.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Chi-square draws with at most this many degrees of freedom are summed
/// from squared normals; larger ones go through the gamma sampler.
pub const CHI_SQUARE_DIRECT_MAX_DOF: u64 = 32;

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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting wrong lengths and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "Matrix::from_vec",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!(
                "matrix entry {pos} is not finite ({})",
                data[pos]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "Matrix::from_rows",
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "matvec",
                expected: self.cols,
                found: v.len(),
            });
        }
        Ok(self.matvec_unchecked(v))
    }

    pub(crate) fn matvec_unchecked(&self, v: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols.max(1))
            .take(self.rows)
            .map(|row| dot(row, v))
            .collect()
    }

    /// `selfᵀ · v`.
    pub fn transpose_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(Error::DimensionMismatch {
                context: "transpose_matvec",
                expected: self.rows,
                found: v.len(),
            });
        }
        Ok(self.transpose_matvec_unchecked(v))
    }

    pub(crate) fn transpose_matvec_unchecked(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &s) in self.data.chunks_exact(self.cols.max(1)).zip(v) {
            if s != 0.0 {
                axpy(s, row, &mut out);
            }
        }
        out
    }

    /// `self += scale · u vᵀ`
    pub(crate) fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        for (row, &ui) in self.data.chunks_exact_mut(self.cols.max(1)).zip(u) {
            let s = scale * ui;
            if s != 0.0 {
                axpy(s, v, row);
            }
        }
    }
}

/// Four interleaved partial sums, so the loop vectorizes while the
/// summation order stays fixed.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm_sq(v: &[f64]) -> f64 {
    dot(v, v)
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    m.matvec(v)
}

/// Seeded, splittable random stream.
///
/// Children are derived from the parent's seed and a label, never from the
/// parent's current position, so `child(k)` is the same stream no matter how
/// much the parent has already produced.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn child(&self, label: u64) -> Rng {
        Rng::new(derive_seed(self.seed, label))
    }

    pub fn child_named(&self, name: &str) -> Rng {
        self.child(fnv1a(name.as_bytes()))
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::random_range(self, 0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f64> {
        (0..len).map(|_| self.standard_normal()).collect()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(seed ^ splitmix64(label).rotate_left(23))
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn gaussian_matrix(rows: usize, cols: usize, variance: f64, rng: &mut Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid(format!(
            "gaussian matrix needs positive dimensions, got {rows}x{cols}"
        )));
    }
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::invalid(format!(
            "variance must be positive, got {variance}"
        )));
    }
    let sd = variance.sqrt();
    let data = (0..rows * cols).map(|_| sd * rng.standard_normal()).collect();
    Ok(Matrix { rows, cols, data })
}

pub fn sample_chi_square(dof: u64, rng: &mut Rng) -> Result<f64> {
    if dof == 0 {
        return Err(Error::invalid("chi-square needs at least one degree of freedom"));
    }
    Ok(if dof <= CHI_SQUARE_DIRECT_MAX_DOF {
        chi_square_by_normals(dof, rng)
    } else {
        chi_square_by_gamma(dof, rng)
    })
}

pub(crate) fn chi_square_by_normals(dof: u64, rng: &mut Rng) -> f64 {
    (0..dof)
        .map(|_| {
            let x = rng.standard_normal();
            x * x
        })
        .sum()
}

pub(crate) fn chi_square_by_gamma(dof: u64, rng: &mut Rng) -> f64 {
    ChiSquared::new(dof as f64)
        .expect("positive dof")
        .sample(rng)
}

pub fn sample_binomial(n: u64, p: f64, rng: &mut Rng) -> Result<u64> {
    if n == 0 {
        return Err(Error::invalid("binomial needs n >= 1"));
    }
    let dist = Binomial::new(n, p)
        .map_err(|e| Error::invalid(format!("binomial p = {p}: {e}")))?;
    Ok(dist.sample(rng))
}

/// Running mean and variance (Welford), mergeable in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    count: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_slice(xs: &[f64]) -> Self {
        let mut m = Moments::new();
        xs.iter().for_each(|&x| m.push(x));
        m
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Chan et al. pairwise combination.
    pub fn merge(&self, other: &Moments) -> Moments {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2
            + other.m2
            + delta * delta * (self.count as f64 * other.count as f64) / count as f64;
        Moments { count, mean, m2 }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; NaN with fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            f64::NAN
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_error(&self) -> f64 {
        (self.variance() / self.count as f64).sqrt()
    }

    /// Standard error of the sample variance under a normal approximation,
    /// `s² · sqrt(2 / (n - 1))`.
    pub fn variance_std_error(&self) -> f64 {
        self.variance() * (2.0 / (self.count as f64 - 1.0)).sqrt()
    }
}

/// Merges per-block moments in index order by pairwise halving so the result
/// does not depend on how blocks were scheduled.
pub fn merge_pairwise(blocks: &[Moments]) -> Moments {
    match blocks.len() {
        0 => Moments::new(),
        1 => blocks[0],
        n => {
            let (left, right) = blocks.split_at(n / 2);
            merge_pairwise(left).merge(&merge_pairwise(right))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;
    use rand::RngCore;

    #[test]
    fn matvec_small_cases() {
        let id = Matrix::identity(3);
        assert_eq!(id.matvec(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let zero = Matrix::zeros(2, 2);
        assert_eq!(zero.matvec(&[5.0, 5.0]).unwrap(), vec![0.0, 0.0]);
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matvec(&m, &[1.0, 1.0]).unwrap(), vec![3.0, 7.0]);
        assert_eq!(m.transpose_matvec(&[1.0, 1.0]).unwrap(), vec![4.0, 6.0]);
    }

    #[test]
    fn matvec_rejects_bad_length() {
        let m = Matrix::zeros(2, 3);
        assert!(matches!(
            m.matvec(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 3, found: 2, .. })
        ));
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn gaussian_matrix_is_deterministic() {
        let a = gaussian_matrix(2, 2, 1.0, &mut Rng::new(1)).unwrap();
        let b = gaussian_matrix(2, 2, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(gaussian_matrix(0, 2, 1.0, &mut Rng::new(1)).is_err());
        assert!(gaussian_matrix(2, 2, 0.0, &mut Rng::new(1)).is_err());
    }

    #[test]
    fn gaussian_matrix_moments() {
        let mut rng = Rng::new(7);
        let mut m = Moments::new();
        for _ in 0..20_000 {
            let w = gaussian_matrix(3, 3, 1.0 / 3.0, &mut rng).unwrap();
            w.as_slice().iter().for_each(|&x| m.push(x));
        }
        assert!(m.mean().abs() < 4.0 * m.std_error());
        assert!((m.variance() - 1.0 / 3.0).abs() < 4.0 * m.variance_std_error());

        let w = gaussian_matrix(100, 100, 0.01, &mut Rng::new(3)).unwrap();
        let m = Moments::from_slice(w.as_slice());
        // SE of the sample variance of a Gaussian: σ² sqrt(2/(n-1)).
        let se = 0.01 * (2.0 / 9999.0f64).sqrt();
        assert!((m.variance() - 0.01).abs() < 3.0 * se, "{}", m.variance());
    }

    #[test]
    fn child_streams_are_reproducible_and_distinct() {
        let root = Rng::new(11);
        let mut a = root.child(3);
        let mut b = Rng::new(11).child(3);
        let mut c = root.child(4);
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);

        let mut used = Rng::new(11);
        used.next_u64();
        assert_eq!(used.child(3).next_u64(), xa[0]);
        assert_ne!(root.child_named("a").seed(), root.child_named("b").seed());
    }

    #[test]
    fn chi_square_moments() {
        let mut rng = Rng::new(5);
        for (dof, draws) in [(10u64, 200_000), (1, 200_000), (100, 100_000)] {
            let xs: Vec<f64> = (0..draws)
                .map(|_| sample_chi_square(dof, &mut rng).unwrap())
                .collect();
            assert!(xs.iter().all(|&x| x >= 0.0));
            let m = Moments::from_slice(&xs);
            let k = dof as f64;
            assert!((m.mean() - k).abs() < 4.0 * m.std_error(), "dof {dof}: {}", m.mean());
            // Var of s² for chi-square is not normal-theory; allow 5% relative.
            assert!((m.variance() - 2.0 * k).abs() < 0.05 * 2.0 * k, "dof {dof}: {}", m.variance());
        }
        assert!(sample_chi_square(0, &mut rng).is_err());
    }

    #[test]
    fn chi_square_paths_agree() {
        // Both generation routes at the switch-over point must describe the
        // same distribution.
        let dof = CHI_SQUARE_DIRECT_MAX_DOF;
        let mut r1 = Rng::new(21);
        let mut r2 = Rng::new(22);
        let n = 100_000;
        let a = Moments::from_slice(&(0..n).map(|_| chi_square_by_normals(dof, &mut r1)).collect::<Vec<_>>());
        let b = Moments::from_slice(&(0..n).map(|_| chi_square_by_gamma(dof, &mut r2)).collect::<Vec<_>>());
        let se = (a.std_error().powi(2) + b.std_error().powi(2)).sqrt();
        assert!((a.mean() - b.mean()).abs() < 4.0 * se);
        assert!((a.variance() / b.variance() - 1.0).abs() < 0.04);
        // Log moments are what the walk statistics actually consume.
        let la = Moments::from_slice(&(0..n).map(|_| chi_square_by_normals(dof, &mut r1).ln()).collect::<Vec<_>>());
        let lb = Moments::from_slice(&(0..n).map(|_| chi_square_by_gamma(dof, &mut r2).ln()).collect::<Vec<_>>());
        let se = (la.std_error().powi(2) + lb.std_error().powi(2)).sqrt();
        assert!((la.mean() - lb.mean()).abs() < 4.0 * se);
    }

    #[test]
    fn binomial_cases() {
        let mut rng = Rng::new(9);
        let m = Moments::from_slice(
            &(0..50_000)
                .map(|_| sample_binomial(100, 0.5, &mut rng).unwrap() as f64)
                .collect::<Vec<_>>(),
        );
        assert!((m.mean() - 50.0).abs() < 4.0 * m.std_error());
        for _ in 0..100 {
            assert_eq!(sample_binomial(10, 0.0, &mut rng).unwrap(), 0);
            assert_eq!(sample_binomial(10, 1.0, &mut rng).unwrap(), 10);
        }
        assert!(sample_binomial(10, 1.5, &mut rng).is_err());
    }

    #[test]
    fn gaussian_times_unit_vector() {
        // Elements of W·δ for unit δ have variance 1/N, and |Wδ|² ~ χ²_N / N.
        let n = 20;
        let mut rng = Rng::new(13);
        let mut delta = rng.normal_vec(n);
        let len = norm_sq(&delta).sqrt();
        delta.iter_mut().for_each(|x| *x /= len);
        let mut elems = Moments::new();
        let mut sq = Moments::new();
        let mut chi = Moments::new();
        for _ in 0..20_000 {
            let w = gaussian_matrix(n, n, 1.0 / n as f64, &mut rng).unwrap();
            let v = w.matvec(&delta).unwrap();
            v.iter().for_each(|&x| elems.push(x));
            sq.push(norm_sq(&v));
            chi.push(sample_chi_square(n as u64, &mut rng).unwrap() / n as f64);
        }
        assert!(elems.mean().abs() < 4.0 * elems.std_error());
        assert!((elems.variance() - 1.0 / n as f64).abs() < 4.0 * elems.variance_std_error());
        let se = (sq.std_error().powi(2) + chi.std_error().powi(2)).sqrt();
        assert!((sq.mean() - chi.mean()).abs() < 4.0 * se);
        assert!((sq.variance() / chi.variance() - 1.0).abs() < 0.06);
    }

    #[test]
    fn moments_merge_matches_sequential() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 * 0.1).collect();
        let whole = Moments::from_slice(&xs);
        let blocks: Vec<Moments> = xs.chunks(64).map(Moments::from_slice).collect();
        let merged = merge_pairwise(&blocks);
        assert_eq!(merged.count(), whole.count());
        assert!((merged.mean() - whole.mean()).abs() < 1e-12);
        assert!((merged.variance() - whole.variance()).abs() < 1e-10);
        assert!(Moments::from_slice(&[1.0]).variance().is_nan());
    }

    proptest! {
        #[test]
        fn matvec_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0,
                            rows in 1usize..6, cols in 1usize..6) {
            let mut rng = Rng::new(seed);
            let m = gaussian_matrix(rows, cols, 1.0, &mut rng).unwrap();
            let u = rng.normal_vec(cols);
            let v = rng.normal_vec(cols);
            let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
            let lhs = m.matvec(&mix).unwrap();
            let mu = m.matvec(&u).unwrap();
            let mv = m.matvec(&v).unwrap();
            for i in 0..rows {
                prop_assert!((lhs[i] - (a * mu[i] + b * mv[i])).abs() < 1e-10);
            }
        }

        #[test]
        fn sampling_is_pure_in_seed(seed in any::<u64>()) {
            let x = sample_chi_square(7, &mut Rng::new(seed)).unwrap();
            let y = sample_chi_square(7, &mut Rng::new(seed)).unwrap();
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
