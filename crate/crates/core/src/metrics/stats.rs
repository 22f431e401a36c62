use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Per-image features and classifier logits from one extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    /// `N x d`
    pub features: DMatrix<f64>,
    /// `N x C`
    pub logits: DMatrix<f64>,
    pub extractor_identity: String,
}

impl FeatureSet {
    pub fn new(
        features: DMatrix<f64>,
        logits: DMatrix<f64>,
        extractor_identity: impl Into<String>,
    ) -> Result<Self> {
        if features.nrows() != logits.nrows() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} logit rows",
                features.nrows(),
                logits.nrows()
            )));
        }
        if features.iter().chain(logits.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "feature set contains non-finite values".into(),
            ));
        }
        Ok(Self {
            features,
            logits,
            extractor_identity: extractor_identity.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }
}

fn check_pair(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &str) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "{what}: feature widths differ ({} vs {})",
            a.ncols(),
            b.ncols()
        )));
    }
    if a.nrows() < 2 || b.nrows() < 2 {
        return Err(Error::Invalid(format!(
            "{what} needs at least two samples per set"
        )));
    }
    Ok(())
}

/// Mean vector and unbiased covariance of the rows.
pub fn mean_and_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mu = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric positive semi-definite matrix with tiny negatives set to zero.
fn psd_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(symmetrize(m));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-6 {
                return Err(Error::Invalid(format!(
                    "matrix is not positive semi-definite (eigenvalue {v})"
                )));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// Frechet distance between two Gaussians.
pub fn fid_from_stats(
    mu_r: &DVector<f64>,
    cov_r: &DMatrix<f64>,
    mu_g: &DVector<f64>,
    cov_g: &DMatrix<f64>,
) -> Result<f64> {
    if cov_r.iter().chain(cov_g.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance is not finite".into()));
    }
    // Tr((S_r S_g)^1/2) = sum of sqrt eigenvalues of S_r^1/2 S_g S_r^1/2
    let er = psd_eigen(cov_r)?;
    let sqrt_r = &er.eigenvectors
        * DMatrix::from_diagonal(&er.eigenvalues.map(f64::sqrt))
        * er.eigenvectors.transpose();
    let inner = &sqrt_r * cov_g * &sqrt_r;
    let cross: f64 = psd_eigen(&inner)?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let d = (mu_r - mu_g).norm_squared() + cov_r.trace() + cov_g.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

pub fn fid(reference: &FeatureSet, generated: &FeatureSet) -> Result<f64> {
    check_pair(&reference.features, &generated.features, "fid")?;
    let (mr, cr) = mean_and_covariance(&reference.features);
    let (mg, cg) = mean_and_covariance(&generated.features);
    fid_from_stats(&mr, &cr, &mg, &cg)
}

fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

/// `exp(mean_i KL(p_i || p_mean))` over softmaxed logits.
pub fn inception_score(logits: &DMatrix<f64>) -> Result<f64> {
    let (n, c) = logits.shape();
    if n == 0 || c == 0 {
        return Err(Error::Empty(
            "inception score needs at least one row and class".into(),
        ));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits are not finite".into()));
    }
    let p = softmax_rows(logits);
    let marginal = p.row_mean();
    let mut total = 0.0;
    for row in p.row_iter() {
        for (pi, mi) in row.iter().zip(marginal.iter()) {
            if *pi > 0.0 {
                total += pi * (pi / mi).ln();
            }
        }
    }
    // mean KL is a mutual information, bounded by [0, ln C]
    let mean_kl = (total / n as f64).clamp(0.0, (c as f64).ln());
    Ok(mean_kl.exp())
}

fn poly_kernel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let d = a.ncols() as f64;
    (a * b.transpose()).map(|v| (v / d + 1.0).powi(3))
}

fn off_diagonal_sum(k: &DMatrix<f64>) -> f64 {
    k.sum() - k.trace()
}

/// Unbiased squared MMD with the cubic polynomial kernel over all samples.
pub fn kid(reference: &FeatureSet, generated: &FeatureSet) -> Result<f64> {
    check_pair(&reference.features, &generated.features, "kid")?;
    Ok(kid_matrices(&reference.features, &generated.features))
}

fn kid_matrices(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let (m, n) = (x.nrows() as f64, y.nrows() as f64);
    let kxx = off_diagonal_sum(&poly_kernel(x, x)) / (m * (m - 1.0));
    let kyy = off_diagonal_sum(&poly_kernel(y, y)) / (n * (n - 1.0));
    // both orientations, so swapping the sets reproduces the same float exactly
    let kxy = 0.5 * (poly_kernel(x, y).sum() + poly_kernel(y, x).sum()) / (m * n);
    kxx + kyy - 2.0 * kxy
}

/// Mean of the unbiased estimate over `num_subsets` seeded random subsets of `subset_size` rows.
pub fn kid_subsets(
    reference: &FeatureSet,
    generated: &FeatureSet,
    subset_size: usize,
    num_subsets: usize,
    seed: u64,
) -> Result<f64> {
    check_pair(&reference.features, &generated.features, "kid")?;
    if subset_size < 2 || subset_size > reference.len().min(generated.len()) || num_subsets == 0 {
        return Err(Error::Invalid(format!(
            "subset size {subset_size} must lie in [2, {}] with at least one subset",
            reference.len().min(generated.len())
        )));
    }
    let mut rng = crate::rng::SeedStream::new(seed);
    let mut pick = |m: &DMatrix<f64>| {
        let mut idx: Vec<usize> = (0..m.nrows()).collect();
        rng.shuffle(&mut idx);
        m.select_rows(&idx[..subset_size])
    };
    let total: f64 = (0..num_subsets)
        .map(|_| {
            let x = pick(&reference.features);
            let y = pick(&generated.features);
            kid_matrices(&x, &y)
        })
        .sum();
    Ok(total / num_subsets as f64)
}
