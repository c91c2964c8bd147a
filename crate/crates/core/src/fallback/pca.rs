use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, IoContext, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"NLPCAMDL";
pub const PCA_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;
const CHUNK_ROWS: usize = 1024;

/// Linear projection onto the leading principal components.
///
/// `components` is row-major `out_dim x in_dim`; each row is a unit
/// eigenvector of the sample covariance, ordered by descending eigenvalue,
/// with its largest-magnitude entry positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca<T> {
    in_dim: usize,
    out_dim: usize,
    mean: Vec<T>,
    components: Vec<T>,
    explained_variance: Vec<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PcaOptions {
    /// Accept fewer than `out_dim + 1` samples. Trailing components then span
    /// directions with zero sample variance.
    pub allow_rank_deficient: bool,
}

/// Streaming covariance accumulator. Rows are shifted by the first row seen
/// and summed in `f64` chunks, so memory stays at `O(in_dim^2)`.
#[derive(Debug, Clone)]
pub struct PcaAccumulator {
    in_dim: usize,
    n: usize,
    shift: Vec<f64>,
    sum: Vec<f64>,
    scatter: DMatrix<f64>,
    pending: Vec<f64>,
    non_finite: bool,
}

impl PcaAccumulator {
    pub fn new(in_dim: usize) -> Self {
        Self {
            in_dim,
            n: 0,
            shift: Vec::new(),
            sum: vec![0.0; in_dim],
            scatter: DMatrix::zeros(in_dim, in_dim),
            pending: Vec::with_capacity(CHUNK_ROWS * in_dim),
            non_finite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn push<T: Scalar>(&mut self, row: &[T]) -> Result<()> {
        if row.len() != self.in_dim {
            return Err(Error::Input(format!("sample has {} features, expected {}", row.len(), self.in_dim)));
        }
        let row: Vec<f64> = row.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
        if row.iter().any(|x| !x.is_finite()) {
            self.non_finite = true;
        }
        if self.shift.is_empty() {
            self.shift = row.clone();
        }
        for ((p, s), x) in self.sum.iter_mut().zip(&self.shift).zip(&row) {
            *p += x - s;
        }
        self.pending.extend(row.iter().zip(&self.shift).map(|(x, s)| x - s));
        self.n += 1;
        if self.pending.len() >= CHUNK_ROWS * self.in_dim {
            self.flush();
        }
        Ok(())
    }

    fn flush(&mut self) {
        if self.pending.is_empty() {
            return;
        }
        let rows = self.pending.len() / self.in_dim;
        let chunk = DMatrix::from_row_slice(rows, self.in_dim, &self.pending);
        self.scatter.gemm_tr(1.0, &chunk, &chunk, 1.0);
        self.pending.clear();
    }

    pub fn finish<T: Scalar>(mut self, out_dim: usize, opts: PcaOptions) -> Result<Pca<T>> {
        if self.non_finite {
            return Err(Error::Input("PCA samples contain non-finite values".into()));
        }
        if out_dim == 0 || out_dim > self.in_dim {
            return Err(Error::Fit(format!("out_dim {out_dim} must be in 1..={}", self.in_dim)));
        }
        let min_samples = if opts.allow_rank_deficient { 2 } else { out_dim + 1 };
        if self.n < min_samples {
            return Err(Error::Fit(format!(
                "{} samples are too few for {out_dim} components (need at least {min_samples})",
                self.n
            )));
        }
        self.flush();
        let n = self.n as f64;
        let d = self.in_dim;
        let shifted_mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let mut cov = self.scatter;
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] = (cov[(i, j)] - n * shifted_mean[i] * shifted_mean[j]) / (n - 1.0);
            }
        }
        // The covariance is positive semi-definite, so its left singular
        // vectors are eigenvectors and its singular values eigenvalues.
        // SymmetricEigen yields NaN on some sparse low-rank inputs; SVD does not.
        let cov = (&cov + cov.transpose()) * 0.5;
        let svd = cov.svd(true, false);
        let (values, vectors) = match (svd.singular_values, svd.u) {
            (s, Some(u)) if s.iter().all(|x| x.is_finite()) && u.iter().all(|x| x.is_finite()) => (s, u),
            _ => return Err(Error::Fit("covariance decomposition did not converge".into())),
        };
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

        let mut components = Vec::with_capacity(out_dim * d);
        let mut explained = Vec::with_capacity(out_dim);
        for &col in order.iter().take(out_dim) {
            let v = vectors.column(col);
            let mut pivot = 0;
            for i in 1..d {
                if v[i].abs() > v[pivot].abs() {
                    pivot = i;
                }
            }
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            components.extend(v.iter().map(|x| T::from_f64_lossy(sign * x)));
            explained.push(T::from_f64_lossy(values[col].max(0.0)));
        }
        let mean = shifted_mean
            .iter()
            .zip(&self.shift)
            .map(|(m, s)| T::from_f64_lossy(m + s))
            .collect();
        Ok(Pca {
            in_dim: d,
            out_dim,
            mean,
            components,
            explained_variance: explained,
        })
    }
}

/// Fits on `samples`, a row-major `n x in_dim` matrix. Requires
/// `n >= out_dim + 1`.
pub fn fit_pca<T: Scalar>(samples: &[T], in_dim: usize, out_dim: usize) -> Result<Pca<T>> {
    fit_pca_with(samples, in_dim, out_dim, PcaOptions::default())
}

pub fn fit_pca_with<T: Scalar>(samples: &[T], in_dim: usize, out_dim: usize, opts: PcaOptions) -> Result<Pca<T>> {
    if in_dim == 0 || !samples.len().is_multiple_of(in_dim) {
        return Err(Error::Input(format!("{} values do not form rows of {in_dim}", samples.len())));
    }
    let mut acc = PcaAccumulator::new(in_dim);
    for row in samples.chunks_exact(in_dim) {
        acc.push(row)?;
    }
    acc.finish(out_dim, opts)
}

impl<T: Scalar> Pca<T> {
    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn component(&self, i: usize) -> &[T] {
        &self.components[i * self.in_dim..(i + 1) * self.in_dim]
    }

    pub fn explained_variance(&self) -> &[T] {
        &self.explained_variance
    }

    /// `components . (v - mean)`
    pub fn reduce(&self, v: &[T]) -> Vec<T> {
        debug_assert_eq!(v.len(), self.in_dim);
        let centered: Vec<T> = v.iter().zip(&self.mean).map(|(a, m)| *a - *m).collect();
        (0..self.out_dim)
            .map(|i| self.component(i).iter().zip(&centered).map(|(c, x)| *c * *x).sum())
            .collect()
    }

    /// `mean + components^T . z`
    pub fn reconstruct(&self, z: &[T]) -> Vec<T> {
        let mut out = self.mean.clone();
        for (i, &zi) in z.iter().enumerate().take(self.out_dim) {
            for (o, c) in out.iter_mut().zip(self.component(i)) {
                *o += zi * *c;
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Pca<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN))).collect();
        Pca {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            mean: conv(&self.mean),
            components: conv(&self.components),
            explained_variance: conv(&self.explained_variance),
        }
    }

    /// Layout, little-endian: magic `NLPCAMDL`, version `u32`, in_dim `u32`,
    /// out_dim `u32`, then mean, components (row-major) and explained
    /// variance as `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.mean.len() + self.components.len() + self.out_dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&PCA_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.in_dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.out_dim as u32).to_le_bytes());
        for x in self.mean.iter().chain(&self.components).chain(&self.explained_variance) {
            out.extend_from_slice(&x.to_f32_lossy().to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a PCA model file".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(8);
        if version != PCA_VERSION {
            return Err(Error::Format(format!(
                "PCA model version {version} is not supported (expected {PCA_VERSION})"
            )));
        }
        let (in_dim, out_dim) = (word(12) as usize, word(16) as usize);
        let floats = in_dim + out_dim * in_dim + out_dim;
        if bytes.len() != HEADER_LEN + 4 * floats || out_dim == 0 || out_dim > in_dim {
            return Err(Error::Format(format!(
                "PCA model payload does not match {in_dim}->{out_dim} header"
            )));
        }
        let mut vals = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().unwrap()) as f64));
        let mean = vals.by_ref().take(in_dim).collect();
        let components = vals.by_ref().take(out_dim * in_dim).collect();
        let explained_variance = vals.collect();
        Ok(Self {
            in_dim,
            out_dim,
            mean,
            components,
            explained_variance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).at(path)?)
    }
}
