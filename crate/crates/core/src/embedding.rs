//! Linear maps `Π: R^d → R^{d_i}` that submodels are fitted through.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Gaussian,
    Pca,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    matrix: DMatrix<f64>,
    kind: EmbeddingKind,
}

impl Embedding {
    /// The identity map on `R^d`.
    pub fn identity(d: usize) -> Result<Self> {
        if d == 0 {
            return invalid("embedding dimension must be at least 1");
        }
        Ok(Self { matrix: DMatrix::identity(d, d), kind: EmbeddingKind::Identity })
    }

    /// Arbitrary `d_i × d` matrix, tagged as Gaussian. Mostly for tests.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        check_shape(matrix.ncols(), matrix.nrows())?;
        if matrix.iter().any(|v| !v.is_finite()) {
            return invalid("embedding matrix must be finite");
        }
        Ok(Self { matrix, kind: EmbeddingKind::Gaussian })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn source_dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `Πx`.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.source_dim(), x.len())?;
        Ok(self.project_unchecked(x))
    }

    pub(crate) fn project_unchecked(&self, x: &[f64]) -> Vec<f64> {
        if self.kind == EmbeddingKind::Identity {
            return x.to_vec();
        }
        let mut out = vec![0.0; self.target_dim()];
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            for (o, m) in out.iter_mut().zip(self.matrix.column(j).iter()) {
                *o += m * xj;
            }
        }
        out
    }

    /// Spectral norm of `VᵀΠᵀΠV − I`, and whether it is within `eps`.
    ///
    /// `v` must have orthonormal columns spanning the subspace of interest.
    pub fn is_subspace_embedding(&self, v: &DMatrix<f64>, eps: f64) -> Result<(bool, f64)> {
        check_dim(self.source_dim(), v.nrows())?;
        if !(eps > 0.0 && eps < 1.0) {
            return invalid(format!("eps must lie in (0, 1), got {eps}"));
        }
        let k = v.ncols();
        let gram = v.transpose() * v;
        if (&gram - DMatrix::<f64>::identity(k, k)).amax() > 1e-8 {
            return invalid("V must have orthonormal columns");
        }
        let pv = &self.matrix * v;
        let deviation = pv.transpose() * &pv - DMatrix::<f64>::identity(k, k);
        let eig = SymmetricEigen::new(deviation);
        let distortion = eig.eigenvalues.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        Ok((distortion <= eps, distortion))
    }
}

fn check_shape(d: usize, d_i: usize) -> Result<()> {
    if d_i == 0 || d == 0 {
        return invalid(format!("embedding dimensions must be positive, got {d_i}x{d}"));
    }
    if d_i > d {
        return invalid(format!("target dimension {d_i} exceeds source dimension {d}"));
    }
    Ok(())
}

/// Entries i.i.d. `N(0, 1/d_i)`, so that `E[ΠᵀΠ] = I_d`.
pub fn gaussian_embedding<R: Rng + ?Sized>(d: usize, d_i: usize, rng: &mut R) -> Result<Embedding> {
    check_shape(d, d_i)?;
    let scale = 1.0 / (d_i as f64).sqrt();
    let matrix = DMatrix::from_fn(d_i, d, |_, _| scale * rng.sample::<f64, _>(StandardNormal));
    Ok(Embedding { matrix, kind: EmbeddingKind::Gaussian })
}

/// Top `d_i` principal directions of the column-centered rows of `x`
/// (`n × d`). Each row is signed so that its largest-magnitude entry is
/// positive.
pub fn pca_embedding(x: &DMatrix<f64>, d_i: usize) -> Result<Embedding> {
    let (n, d) = x.shape();
    check_shape(d, d_i)?;
    if n < 2 {
        return invalid("PCA embedding needs at least two points");
    }
    if d_i > n.min(d) {
        return invalid(format!("PCA target dimension {d_i} exceeds min(n, d) = {}", n.min(d)));
    }
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    // Eigen-decomposition of the d×d scatter matrix, or of the n×n Gram
    // matrix when that is smaller.
    let (values, directions) = if d <= n {
        let eig = SymmetricEigen::new(centered.transpose() * &centered);
        (eig.eigenvalues, eig.eigenvectors)
    } else {
        let eig = SymmetricEigen::new(&centered * centered.transpose());
        let mut dirs = centered.transpose() * &eig.eigenvectors;
        for (mut col, &ev) in dirs.column_iter_mut().zip(eig.eigenvalues.iter()) {
            let norm = col.norm();
            if ev > 0.0 && norm > 0.0 {
                col /= norm;
            }
        }
        (eig.eigenvalues, dirs)
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let top = values[order[0]].max(0.0);
    let tol = top * (n.max(d) as f64) * f64::EPSILON * 10.0;
    let rank = order.iter().filter(|&&i| values[i] > tol).count();
    if rank < d_i {
        return Err(Error::RankDeficient { requested: d_i, achievable: rank });
    }
    let mut matrix = DMatrix::zeros(d_i, d);
    for (r, &idx) in order.iter().take(d_i).enumerate() {
        let mut dir: DVector<f64> = directions.column(idx).into_owned();
        dir /= dir.norm();
        let lead = dir.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            dir = -dir;
        }
        matrix.set_row(r, &dir.transpose());
    }
    Ok(Embedding { matrix, kind: EmbeddingKind::Pca })
}
