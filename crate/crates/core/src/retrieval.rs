//! Global descriptors, PCA reduction and exact top-k retrieval.

use std::cmp::Ordering;
use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::l2_norm;

/// Projected vectors shorter than this are treated as zero.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Added to each eigenvalue before whitening.
pub const WHITEN_EPS: f64 = 1e-8;

/// Unit-norm image descriptor used for retrieval.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    values: Vec<f32>,
}

impl GlobalDescriptor {
    /// Normalizes `values` to unit length.
    pub fn from_raw(mut values: Vec<f32>) -> Result<Self> {
        let norm = l2_norm(&values);
        if values.is_empty() || !norm.is_finite() || norm < DEGENERATE_NORM {
            return Err(Error::DegenerateDescriptor);
        }
        for v in values.iter_mut() {
            *v = (*v as f64 / norm) as f32;
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &GlobalDescriptor) -> f64 {
        dot(&self.values, &other.values)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Linear projection onto the leading principal axes of a descriptor set.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    mean: DVector<f64>,
    /// `out_dim × in_dim`, orthonormal rows.
    basis: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    whiten: bool,
}

impl PcaModel {
    /// Assembles a model from stored parts, checking shapes and orthonormality.
    pub fn from_parts(mean: Vec<f64>, basis_rows: Vec<Vec<f64>>, eigenvalues: Vec<f64>, whiten: bool) -> Result<Self> {
        let in_dim = mean.len();
        let out_dim = basis_rows.len();
        if eigenvalues.len() != out_dim {
            return Err(Error::LengthMismatch {
                what: "PCA eigenvalues vs basis rows",
                left: eigenvalues.len(),
                right: out_dim,
            });
        }
        if let Some(row) = basis_rows.iter().find(|r| r.len() != in_dim) {
            return Err(Error::DimensionMismatch {
                expected: in_dim,
                found: row.len(),
            });
        }
        let basis = DMatrix::from_fn(out_dim, in_dim, |i, j| basis_rows[i][j]);
        let gram = &basis * basis.transpose();
        if (gram - DMatrix::identity(out_dim, out_dim)).abs().max() > 1e-6 {
            return Err(Error::InvalidConfig("PCA basis rows are not orthonormal".into()));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            basis,
            eigenvalues,
            whiten,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn out_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn whiten(&self) -> bool {
        self.whiten
    }

    pub fn with_whitening(mut self, whiten: bool) -> Self {
        self.whiten = whiten;
        self
    }

    /// Projects without normalizing; the result may be the zero vector.
    pub fn project(&self, desc: &[f32]) -> Result<Vec<f64>> {
        if desc.len() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.in_dim(),
                found: desc.len(),
            });
        }
        let centered = DVector::from_iterator(
            desc.len(),
            desc.iter().zip(self.mean.iter()).map(|(&d, m)| d as f64 - m),
        );
        let mut y = &self.basis * centered;
        if self.whiten {
            for (v, &ev) in y.iter_mut().zip(&self.eigenvalues) {
                *v /= (ev + WHITEN_EPS).sqrt();
            }
        }
        Ok(y.iter().copied().collect())
    }

    /// Maps a reduced vector back to the input space (ignores whitening).
    pub fn reconstruct(&self, reduced: &[f64]) -> Vec<f64> {
        let y = DVector::from_column_slice(reduced);
        (self.basis.transpose() * y + &self.mean).iter().copied().collect()
    }
}

/// Fits a PCA model with `out_dim` components on the given descriptors.
///
/// Basis rows are ordered by descending eigenvalue; each row's
/// largest-magnitude entry is made positive. Directions with (numerically)
/// zero variance are filled deterministically by orthogonalizing the
/// coordinate axes in index order.
pub fn fit_pca<D: AsRef<[f32]>>(descriptors: &[D], out_dim: usize) -> Result<PcaModel> {
    let n = descriptors.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { count: n });
    }
    let dim = descriptors[0].as_ref().len();
    if let Some(d) = descriptors.iter().find(|d| d.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: d.as_ref().len(),
        });
    }
    let max = (n - 1).min(dim);
    if out_dim > max || out_dim == 0 {
        return Err(Error::DimensionTooLarge {
            requested: out_dim,
            max,
        });
    }

    let mut x = DMatrix::from_fn(n, dim, |i, j| descriptors[i].as_ref()[j] as f64);
    let mean = x.row_mean().transpose();
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let scale = 1.0 / (n - 1) as f64;

    // Eigenpairs of the covariance, as (eigenvalue, unit eigenvector in R^dim).
    let mut pairs: Vec<(f64, DVector<f64>)> = if dim <= n {
        let cov = x.transpose() * &x * scale;
        let eig = SymmetricEigen::new(cov);
        eig.eigenvalues
            .iter()
            .zip(eig.eigenvectors.column_iter())
            .map(|(&l, v)| (l, v.into_owned()))
            .collect()
    } else {
        let gram = &x * x.transpose() * scale;
        let eig = SymmetricEigen::new(gram);
        eig.eigenvalues
            .iter()
            .zip(eig.eigenvectors.column_iter())
            .map(|(&l, v)| {
                let u = x.transpose() * v;
                let norm = u.norm();
                let u = if norm > 0.0 { u / norm } else { u };
                (l, u)
            })
            .collect()
    };

    let top = pairs.iter().map(|p| p.0).fold(0.0f64, f64::max);
    let zero_tol = 1e-12 * top.max(f64::MIN_POSITIVE);
    for p in pairs.iter_mut() {
        fix_sign(&mut p.1);
    }
    pairs.sort_by(compare_pairs);

    let mut rows: Vec<DVector<f64>> = Vec::with_capacity(out_dim);
    let mut eigenvalues = Vec::with_capacity(out_dim);
    for (l, v) in pairs {
        if rows.len() == out_dim || l <= zero_tol || v.norm() < 0.5 {
            break;
        }
        rows.push(v);
        eigenvalues.push(l.max(0.0));
    }
    let mut axis = 0;
    while rows.len() < out_dim {
        let mut e = DVector::zeros(dim);
        e[axis] = 1.0;
        axis += 1;
        // two Gram-Schmidt passes
        for _ in 0..2 {
            for r in &rows {
                let c = r.dot(&e);
                e -= r * c;
            }
        }
        let norm = e.norm();
        if norm > 1e-6 {
            let mut e = e / norm;
            fix_sign(&mut e);
            rows.push(e);
            eigenvalues.push(0.0);
        }
    }

    let basis = DMatrix::from_fn(out_dim, dim, |i, j| rows[i][j]);
    Ok(PcaModel {
        mean,
        basis,
        eigenvalues,
        whiten: false,
    })
}

fn largest_entry(v: &DVector<f64>) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    best
}

fn fix_sign(v: &mut DVector<f64>) {
    if !v.is_empty() && v[largest_entry(v)] < 0.0 {
        v.neg_mut();
    }
}

fn compare_pairs(a: &(f64, DVector<f64>), b: &(f64, DVector<f64>)) -> Ordering {
    let tol = 1e-12 * a.0.abs().max(b.0.abs()).max(1.0);
    if (a.0 - b.0).abs() <= tol {
        largest_entry(&a.1).cmp(&largest_entry(&b.1))
    } else {
        b.0.total_cmp(&a.0)
    }
}

/// Reduces and renormalizes a descriptor.
pub fn apply_pca(model: &PcaModel, desc: &[f32]) -> Result<GlobalDescriptor> {
    let y = model.project(desc)?;
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < DEGENERATE_NORM {
        return Err(Error::DegenerateDescriptor);
    }
    Ok(GlobalDescriptor {
        values: y.iter().map(|v| (v / norm) as f32).collect(),
    })
}

/// Reference ids with their global descriptors.
#[derive(Debug, Clone, Default)]
pub struct DescriptorDatabase {
    entries: Vec<(String, GlobalDescriptor)>,
}

impl DescriptorDatabase {
    pub fn new(entries: Vec<(String, GlobalDescriptor)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (id, _) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        if let Some((_, first)) = entries.first() {
            let dim = first.dim();
            if let Some((_, d)) = entries.iter().find(|(_, d)| d.dim() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: d.dim(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, GlobalDescriptor)] {
        &self.entries
    }
}

/// One retrieval hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    /// Position of the entry in the database.
    pub index: usize,
    pub id: String,
    pub score: f64,
}

/// Exact top-`k` retrieval by dot product, descending; ties go to the
/// lexicographically smaller id.
pub fn rank(query: &GlobalDescriptor, db: &DescriptorDatabase, k: usize) -> Result<Vec<Ranked>> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let dim = db.entries[0].1.dim();
    if query.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            found: query.dim(),
        });
    }
    let mut scored: Vec<(usize, f64)> = db
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, (_, d))| (i, query.dot(d)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| db.entries[a.0].0.cmp(&db.entries[b.0].0))
    });
    Ok(scored
        .into_iter()
        .take(k.min(db.len()))
        .map(|(index, score)| Ranked {
            index,
            id: db.entries[index].0.clone(),
            score,
        })
        .collect())
}
