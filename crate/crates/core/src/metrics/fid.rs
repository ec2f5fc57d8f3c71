use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{ensure_arg, Error, Result};

/// Diagonal jitter added when a covariance is near-singular.
pub const FID_JITTER: f64 = 1e-6;

/// Row-vector features (one row per sample) and the extractor that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    rows: Vec<Vec<f64>>,
    extractor: String,
}

impl FeatureSet {
    pub fn new(rows: Vec<Vec<f64>>, extractor: impl Into<String>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let d = first.len();
            ensure_arg!(d > 0, "features must have at least one dimension");
            if rows.iter().any(|r| r.len() != d) {
                return Err(Error::ShapeMismatch("feature rows differ in length".into()));
            }
            ensure_arg!(
                rows.iter().flatten().all(|v| v.is_finite()),
                "features must be finite"
            );
        }
        Ok(FeatureSet {
            rows,
            extractor: extractor.into(),
        })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn extractor(&self) -> &str {
        &self.extractor
    }

    fn mean_cov(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.len(), self.dim());
        let mut mean = DVector::zeros(d);
        for r in &self.rows {
            mean += DVector::from_column_slice(r);
        }
        mean /= n as f64;
        let mut centered = DMatrix::zeros(n, d);
        for (i, r) in self.rows.iter().enumerate() {
            for j in 0..d {
                centered[(i, j)] = r[j] - mean[j];
            }
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        (mean, cov)
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5)
        .eigenvalues
        .min()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(real: &FeatureSet, gen: &FeatureSet) -> Result<f64> {
    ensure_arg!(
        real.len() >= 2 && gen.len() >= 2,
        "FID needs at least 2 samples per set (got {} and {})",
        real.len(),
        gen.len()
    );
    if real.dim() != gen.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dims {} vs {}",
            real.dim(),
            gen.dim()
        )));
    }
    let (mu_r, mut cov_r) = real.mean_cov();
    let (mu_g, mut cov_g) = gen.mean_cov();
    let d = real.dim();
    if min_eigenvalue(&cov_r) < 1e-10 || min_eigenvalue(&cov_g) < 1e-10 {
        let jitter = DMatrix::identity(d, d) * FID_JITTER;
        cov_r += &jitter;
        cov_g += &jitter;
    }
    // Tr((S_r S_g)^1/2) = Tr((S_r^1/2 S_g S_r^1/2)^1/2)
    let sr = sym_sqrt(&cov_r);
    let inner = &sr * &cov_g * &sr;
    let covmean_trace = sym_sqrt(&inner).trace();
    let diff = mu_r - mu_g;
    let value = diff.dot(&diff) + cov_r.trace() + cov_g.trace() - 2.0 * covmean_trace;
    Ok(value.max(0.0))
}
