//! Sample-set metrics on flattened images: Gaussian Fréchet distance and
//! k-NN precision, recall, density and coverage.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ridge added to covariances estimated from fewer than `d + 1` samples.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

fn as_matrix(x: &Tensor, what: &str) -> Result<DMatrix<f64>> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::dim(format!("{what} must be (samples, features), got {s:?}")));
    }
    if !x.is_finite() {
        return Err(Error::Numeric(format!("{what} contains non-finite values")));
    }
    Ok(DMatrix::from_row_slice(s[0], s[1], x.data()))
}

/// Sample mean and unbiased covariance.
pub fn gaussian_moments(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let m = as_matrix(x, "feature set")?;
    let (n, d) = m.shape();
    if n < 2 {
        return Err(Error::dim("need at least two samples to fit a Gaussian"));
    }
    let mean = m.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    if n < d + 1 {
        for i in 0..d {
            cov[(i, i)] += COVARIANCE_RIDGE;
        }
    }
    Ok((mean, cov))
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

/// Square root of a symmetric PSD matrix, clamping negative eigenvalues.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = sym_eigen(m);
    let roots = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
pub fn frechet_from_moments(
    mu1: &DVector<f64>,
    s1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    s2: &DMatrix<f64>,
) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::dim("Gaussian moments have mismatched dimensions"));
    }
    let root1 = psd_sqrt(s1);
    let inner = &root1 * s2 * &root1;
    let eig = sym_eigen(&inner);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if let Some(bad) = eig.eigenvalues.iter().find(|v| **v < -1e-8 * scale) {
        return Err(Error::Numeric(format!(
            "covariance product is not positive semidefinite (eigenvalue {bad})"
        )));
    }
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let mean_term = (mu1 - mu2).norm_squared();
    Ok(mean_term + s1.trace() + s2.trace() - 2.0 * tr_sqrt)
}

/// Fréchet distance between Gaussians fitted to two `(samples, features)` sets.
pub fn frechet_gaussian(real: &Tensor, fake: &Tensor) -> Result<f64> {
    let (mu1, s1) = gaussian_moments(real)?;
    let (mu2, s2) = gaussian_moments(fake)?;
    frechet_from_moments(&mu1, &s1, &mu2, &s2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prdc {
    pub precision: f64,
    pub recall: f64,
    pub density: f64,
    pub coverage: f64,
}

fn pairwise(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| (a.row(i) - b.row(j)).norm())
}

/// Distance from each point to its `k`-th nearest other point.
fn knn_radii(d: &DMatrix<f64>, k: usize) -> Vec<f64> {
    (0..d.nrows())
        .map(|i| {
            let mut row: Vec<f64> = (0..d.ncols()).filter(|j| *j != i).map(|j| d[(i, j)]).collect();
            row.sort_by(f64::total_cmp);
            row[k - 1]
        })
        .collect()
}

/// k-NN manifold metrics with strict ball membership, so a zero radius
/// (from duplicate points) gives an empty ball.
pub fn prdc(real: &Tensor, fake: &Tensor, k: usize) -> Result<Prdc> {
    let r = as_matrix(real, "real set")?;
    let f = as_matrix(fake, "fake set")?;
    if r.ncols() != f.ncols() {
        return Err(Error::dim("real and fake features have different widths"));
    }
    if k == 0 || r.nrows() < k + 1 || f.nrows() < k + 1 {
        return Err(Error::dim(format!(
            "PRDC with k={k} needs at least {} points per set",
            k + 1
        )));
    }
    let real_radii = knn_radii(&pairwise(&r, &r), k);
    let fake_radii = knn_radii(&pairwise(&f, &f), k);
    let cross = pairwise(&r, &f);
    let (n, m) = (r.nrows(), f.nrows());

    let precision = (0..m)
        .filter(|&j| (0..n).any(|i| cross[(i, j)] < real_radii[i]))
        .count() as f64
        / m as f64;
    let recall = (0..n)
        .filter(|&i| (0..m).any(|j| cross[(i, j)] < fake_radii[j]))
        .count() as f64
        / n as f64;
    let members: usize = (0..m)
        .map(|j| (0..n).filter(|&i| cross[(i, j)] < real_radii[i]).count())
        .sum();
    let density = members as f64 / (k * m) as f64;
    let coverage = (0..n)
        .filter(|&i| {
            let nearest = (0..m).map(|j| cross[(i, j)]).fold(f64::INFINITY, f64::min);
            nearest < real_radii[i]
        })
        .count() as f64
        / n as f64;
    Ok(Prdc {
        precision,
        recall,
        density,
        coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::NoiseStream;

    #[test]
    fn identical_sets() {
        let x = NoiseStream::new(0, 0).normal_tensor([40, 3]);
        assert!(frechet_gaussian(&x, &x).unwrap().abs() < 1e-8);
        let p = prdc(&x, &x, 3).unwrap();
        assert_eq!((p.precision, p.recall, p.coverage), (1.0, 1.0, 1.0));
    }

    #[test]
    fn mean_shift() {
        let x = NoiseStream::new(1, 0).normal_tensor([30, 4]);
        let shift = [1.0, -2.0, 0.5, 0.0];
        let y = Tensor::from_fn([30, 4], |i| x.data()[i] + shift[i % 4]);
        let want: f64 = shift.iter().map(|s| s * s).sum();
        assert!((frechet_gaussian(&x, &y).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn one_dimensional_closed_form() {
        let mut rng = NoiseStream::new(2, 0);
        let a = Tensor::from_fn([50, 1], |_| 1.0 + 2.0 * rng.normal());
        let b = Tensor::from_fn([70, 1], |_| -0.5 + 0.7 * rng.normal());
        let stats = |t: &Tensor| {
            let n = t.numel() as f64;
            let m = t.mean();
            let var = t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, var.sqrt())
        };
        let ((m1, s1), (m2, s2)) = (stats(&a), stats(&b));
        let want = (m1 - m2).powi(2) + (s1 - s2).powi(2);
        assert!((frechet_gaussian(&a, &b).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn frechet_is_symmetric() {
        let mut rng = NoiseStream::new(3, 0);
        let a = rng.normal_tensor([25, 5]);
        let b = rng.normal_tensor([30, 5]).map(|v| 1.5 * v + 0.2);
        let (x, y) = (frechet_gaussian(&a, &b).unwrap(), frechet_gaussian(&b, &a).unwrap());
        assert!((x - y).abs() < 1e-9);
    }

    #[test]
    fn few_samples_get_a_ridge() {
        let x = NoiseStream::new(4, 0).normal_tensor([3, 8]);
        assert!(frechet_gaussian(&x, &x).unwrap().abs() < 1e-8);
        assert!(frechet_gaussian(&Tensor::zeros([1, 2]), &Tensor::zeros([4, 2])).is_err());
    }

    #[test]
    fn separated_sets_score_zero() {
        let x = NoiseStream::new(5, 0).normal_tensor([20, 2]);
        let y = x.map(|v| v + 1000.0);
        let p = prdc(&x, &y, 3).unwrap();
        assert_eq!(p, Prdc { precision: 0.0, recall: 0.0, density: 0.0, coverage: 0.0 });
    }

    #[test]
    fn duplicates_give_empty_balls() {
        let x = Tensor::zeros([5, 2]);
        let p = prdc(&x, &x, 2).unwrap();
        assert_eq!(p.precision, 0.0);
        assert_eq!(p.coverage, 0.0);
    }

    #[test]
    fn prdc_needs_enough_points() {
        let x = Tensor::zeros([3, 2]);
        assert!(prdc(&x, &x, 3).is_err());
    }
}
