//! Spatial covariance of convolutional filter weights.
//!
//! A [`WeightCovariance`] is a `|P| x |P|` matrix over pairs of filter
//! positions. The identity gives independent weights (the locally connected
//! limit), the all-ones matrix gives fully shared weights (sum pooling), and the
//! Matérn-3/2 family interpolates between the two through its lengthscale.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::Extent;

/// Relative slack on the smallest eigenvalue, scaled by the mean eigenvalue.
pub const PSD_RELATIVE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum CovKind {
    /// `variance * delta(p, p')`.
    Independent { variance: f64 },
    /// All entries one. This is sum pooling; see [`WeightCovariance::mean_pool_normalizer`].
    MeanPool,
    /// `alpha_p * alpha_p'`.
    Rank1 { alpha: Vec<f64> },
    /// `exp(-|p - p'| / lengthscale)`.
    Exponential { lengthscale: f64 },
    /// `(1 + sqrt(3) r / lengthscale) exp(-sqrt(3) r / lengthscale)`, `r = |p - p'|`.
    Matern32 { lengthscale: f64 },
    /// Caller-supplied matrix, checked for symmetry and PSD.
    Explicit,
}

impl CovKind {
    pub fn independent() -> Self {
        CovKind::Independent { variance: 1.0 }
    }

    pub fn matern32(lengthscale: f64) -> Self {
        CovKind::Matern32 { lengthscale }
    }

    fn validate(&self, n_patch: usize) -> Result<()> {
        match self {
            CovKind::Independent { variance } if !(*variance >= 0.0 && variance.is_finite()) => {
                Err(Error::Parameter(format!("variance must be non-negative, got {variance}")))
            }
            CovKind::Exponential { lengthscale } | CovKind::Matern32 { lengthscale }
                if !(*lengthscale > 0.0 && lengthscale.is_finite()) =>
            {
                Err(Error::Parameter(format!("lengthscale must be positive, got {lengthscale}")))
            }
            CovKind::Rank1 { alpha } if alpha.len() != n_patch => Err(Error::Parameter(format!(
                "rank-1 prior needs {n_patch} coefficients, got {}",
                alpha.len()
            ))),
            _ => Ok(()),
        }
    }
}

/// Matérn-3/2 correlation at distance `r`.
pub fn matern32(r: f64, lengthscale: f64) -> f64 {
    let a = 3f64.sqrt() * r / lengthscale;
    (1.0 + a) * (-a).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightCovariance {
    patch: Extent,
    kind: CovKind,
    entries: Vec<f64>,
}

impl WeightCovariance {
    /// Builds the covariance of `kind` over filter positions in `patch`.
    pub fn build(kind: CovKind, patch: &Extent) -> Result<Self> {
        let n = patch.len();
        kind.validate(n)?;
        if matches!(kind, CovKind::Explicit) {
            return Err(Error::Parameter(
                "explicit covariances are built with from_entries".into(),
            ));
        }
        let coords = patch.all_coords();
        let dist = |a: usize, b: usize| -> f64 {
            coords[a]
                .iter()
                .zip(&coords[b])
                .map(|(&x, &y)| {
                    let d = x as f64 - y as f64;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        let mut entries = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                entries[a * n + b] = match &kind {
                    CovKind::Independent { variance } => {
                        if a == b {
                            *variance
                        } else {
                            0.0
                        }
                    }
                    CovKind::MeanPool => 1.0,
                    CovKind::Rank1 { alpha } => alpha[a] * alpha[b],
                    CovKind::Exponential { lengthscale } => (-dist(a, b) / lengthscale).exp(),
                    CovKind::Matern32 { lengthscale } => matern32(dist(a, b), *lengthscale),
                    CovKind::Explicit => unreachable!(),
                };
            }
        }
        Ok(WeightCovariance {
            patch: patch.clone(),
            kind,
            entries,
        })
    }

    /// Wraps an arbitrary row-major `|P| x |P|` matrix after checking symmetry
    /// and positive semi-definiteness.
    pub fn from_entries(patch: &Extent, entries: Vec<f64>) -> Result<Self> {
        let n = patch.len();
        if entries.len() != n * n {
            return Err(Error::Shape(format!(
                "covariance over {n} positions needs {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        for a in 0..n {
            for b in 0..a {
                if entries[a * n + b] != entries[b * n + a] {
                    return Err(Error::NotSymmetric);
                }
            }
        }
        let cov = WeightCovariance {
            patch: patch.clone(),
            kind: CovKind::Explicit,
            entries,
        };
        cov.check_psd()?;
        Ok(cov)
    }

    /// Multiplies every entry by `factor`, keeping the kind.
    pub fn scaled(&self, factor: f64) -> Self {
        WeightCovariance {
            patch: self.patch.clone(),
            kind: self.kind.clone(),
            entries: self.entries.iter().map(|v| v * factor).collect(),
        }
    }

    /// `1 / |P|^2`: turns the all-ones (sum pooling) prior into mean pooling.
    /// Only matters when absolute magnitudes are compared.
    pub fn mean_pool_normalizer(patch: &Extent) -> f64 {
        let n = patch.len() as f64;
        1.0 / (n * n)
    }

    pub fn patch(&self) -> &Extent {
        &self.patch
    }

    pub fn kind(&self) -> &CovKind {
        &self.kind
    }

    /// Number of filter positions `|P|`.
    pub fn size(&self) -> usize {
        self.patch.len()
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, p: usize, p2: usize) -> f64 {
        self.entries[p * self.size() + p2]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.size()).map(|p| self.get(p, p)).collect()
    }

    /// True when every off-diagonal entry is exactly zero.
    pub fn is_diagonal(&self) -> bool {
        let n = self.size();
        (0..n).all(|a| (0..n).all(|b| a == b || self.entries[a * n + b] == 0.0))
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    fn matrix(&self) -> DMatrix<f64> {
        let n = self.size();
        DMatrix::from_row_slice(n, n, &self.entries)
    }

    fn psd_tolerance(&self) -> f64 {
        PSD_RELATIVE_TOLERANCE * (self.trace() / self.size() as f64).abs()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.matrix())
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn check_psd(&self) -> Result<()> {
        let min = self.min_eigenvalue();
        let tolerance = self.psd_tolerance();
        if min < -tolerance {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
                tolerance,
            });
        }
        Ok(())
    }

    /// Square-root factor `R` with `R R^T = Sigma`, from a symmetric
    /// eigendecomposition with slightly negative eigenvalues clamped to zero.
    pub fn sqrt_factor(&self) -> Result<CovSqrtFactor> {
        let n = self.size();
        if self.is_diagonal() {
            let mut entries = vec![0.0; n * n];
            for p in 0..n {
                let v = self.get(p, p);
                if v < 0.0 {
                    return Err(Error::NotPsd {
                        min_eigenvalue: v,
                        tolerance: 0.0,
                    });
                }
                entries[p * n + p] = v.sqrt();
            }
            return Ok(CovSqrtFactor { size: n, entries });
        }
        let eig = SymmetricEigen::new(self.matrix());
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        let tolerance = self.psd_tolerance();
        if min < -tolerance {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
                tolerance,
            });
        }
        let mut entries = vec![0.0; n * n];
        for s in 0..n {
            let root = eig.eigenvalues[s].max(0.0).sqrt();
            for p in 0..n {
                entries[p * n + s] = eig.eigenvectors[(p, s)] * root;
            }
        }
        Ok(CovSqrtFactor { size: n, entries })
    }
}

/// `R` with `sum_s R[p, s] R[p', s] = Sigma[p, p']`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovSqrtFactor {
    size: usize,
    entries: Vec<f64>,
}

impl CovSqrtFactor {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, p: usize, s: usize) -> f64 {
        self.entries[p * self.size + s]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// `R R^T`, row-major.
    pub fn reconstruct(&self) -> Vec<f64> {
        let n = self.size;
        let mut out = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                out[a * n + b] = (0..n).map(|s| self.get(a, s) * self.get(b, s)).sum();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ext(d: &[usize]) -> Extent {
        Extent::new(d.to_vec()).unwrap()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn matern_at_unit_distance() {
        let cov = WeightCovariance::build(CovKind::matern32(1.0), &ext(&[2])).unwrap();
        assert_abs_diff_eq!(cov.get(0, 1), 0.48335, epsilon = 1e-5);
        assert_abs_diff_eq!(
            cov.get(0, 1),
            (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn independent_is_identity() {
        let cov = WeightCovariance::build(CovKind::independent(), &ext(&[3, 2])).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                assert_eq!(cov.get(a, b), if a == b { 1.0 } else { 0.0 });
            }
        }
        assert!(cov.is_diagonal());
    }

    #[test]
    fn huge_lengthscale_approaches_mean_pool() {
        let cov = WeightCovariance::build(CovKind::matern32(1e6), &ext(&[32, 32])).unwrap();
        assert!(cov.entries().iter().all(|&v| (1.0 - 1e-6..=1.0).contains(&v)));
    }

    #[test]
    fn non_positive_lengthscale_rejected() {
        for l in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                WeightCovariance::build(CovKind::matern32(l), &ext(&[3])),
                Err(Error::Parameter(_))
            ));
            assert!(WeightCovariance::build(CovKind::Exponential { lengthscale: l }, &ext(&[3])).is_err());
        }
        assert!(WeightCovariance::build(CovKind::Rank1 { alpha: vec![1.0] }, &ext(&[3])).is_err());
    }

    #[test]
    fn exponential_small_lengthscale_is_independent_off_diagonal() {
        let cov = WeightCovariance::build(CovKind::Exponential { lengthscale: 1e-3 }, &ext(&[3, 3])).unwrap();
        for a in 0..9 {
            assert_eq!(cov.get(a, a), 1.0);
            for b in 0..9 {
                if a != b {
                    assert!(cov.get(a, b) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matern_is_nonincreasing_in_distance() {
        let cov = WeightCovariance::build(CovKind::matern32(2.5), &ext(&[12])).unwrap();
        for b in 1..12 {
            assert!(cov.get(0, b) <= cov.get(0, b - 1));
        }
    }

    #[test]
    fn sqrt_factor_of_identity_and_ones() {
        let id = WeightCovariance::build(CovKind::independent(), &ext(&[4])).unwrap();
        assert!(max_abs_diff(&id.sqrt_factor().unwrap().reconstruct(), id.entries()) < 1e-10);

        let ones = WeightCovariance::build(CovKind::MeanPool, &ext(&[2])).unwrap();
        let r = ones.sqrt_factor().unwrap();
        assert!(max_abs_diff(&r.reconstruct(), &[1.0; 4]) < 1e-10);
    }

    #[test]
    fn sqrt_factor_round_trips_random_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2usize, 5, 9] {
            let g: Vec<f64> = (0..n * n).map(|_| rng.sample(StandardNormal)).collect();
            let mut sigma = vec![0.0; n * n];
            for a in 0..n {
                for b in 0..n {
                    sigma[a * n + b] = (0..n).map(|k| g[k * n + a] * g[k * n + b]).sum();
                }
            }
            // Exact symmetry for the constructor check.
            for a in 0..n {
                for b in 0..a {
                    sigma[a * n + b] = sigma[b * n + a];
                }
            }
            let cov = WeightCovariance::from_entries(&ext(&[n]), sigma.clone()).unwrap();
            let r = cov.sqrt_factor().unwrap();
            assert!(max_abs_diff(&r.reconstruct(), &sigma) < 1e-10);
        }
    }

    #[test]
    fn indefinite_matrix_rejected() {
        let err = WeightCovariance::from_entries(&ext(&[2]), vec![1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(err, Err(Error::NotPsd { .. })));
        let err = WeightCovariance::from_entries(&ext(&[2]), vec![1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(err, Err(Error::NotSymmetric)));
    }

    fn kind_strategy(n: usize) -> impl Strategy<Value = CovKind> {
        prop_oneof![
            (0.01f64..10.0).prop_map(|variance| CovKind::Independent { variance }),
            Just(CovKind::MeanPool),
            prop::collection::vec(-3.0f64..3.0, n).prop_map(|alpha| CovKind::Rank1 { alpha }),
            (0.05f64..50.0).prop_map(|lengthscale| CovKind::Exponential { lengthscale }),
            (0.05f64..1e4).prop_map(|lengthscale| CovKind::Matern32 { lengthscale }),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn every_kind_is_symmetric_psd(
            (dims, kind) in prop::collection::vec(1usize..=4, 1..=2)
                .prop_flat_map(|dims| {
                    let n = dims.iter().product();
                    (Just(dims), kind_strategy(n))
                })
        ) {
            let patch = Extent::new(dims).unwrap();
            let cov = WeightCovariance::build(kind, &patch).unwrap();
            let n = cov.size();
            for a in 0..n {
                for b in 0..n {
                    prop_assert_eq!(cov.get(a, b), cov.get(b, a));
                }
            }
            prop_assert!(cov.check_psd().is_ok());
            let r = cov.sqrt_factor().unwrap();
            prop_assert!(max_abs_diff(&r.reconstruct(), cov.entries()) < 1e-10 * cov.entries().iter().fold(1.0f64, |m, v| m.max(v.abs())));
        }
    }
}
