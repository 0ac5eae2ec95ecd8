//! Gaussian-process regression on one-hot targets, used as a classifier.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gram::GramMatrix;

/// Default shift subtracted from the one-hot targets.
pub const DEFAULT_TARGET_SHIFT: f64 = 0.1;

/// Slack below zero tolerated on kernel eigenvalues, relative to `trace / n`.
pub const EIGEN_RELATIVE_SLACK: f64 = 1e-8;

/// `n x k` row-major targets, `onehot(label) - shift`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTargets {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl RegressionTargets {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    fn subset(&self, rows: &[usize]) -> RegressionTargets {
        RegressionTargets {
            n: rows.len(),
            k: self.k,
            values: rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
        }
    }
}

pub fn encode_targets(labels: &[usize], k: usize, shift: f64) -> Result<RegressionTargets> {
    let mut values = vec![-shift; labels.len() * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Label { label: l, classes: k });
        }
        values[i * k + l] += 1.0;
    }
    Ok(RegressionTargets {
        n: labels.len(),
        k,
        values,
    })
}

/// Eigendecomposition of a training kernel, reusable across noise levels.
#[derive(Debug, Clone)]
pub struct SpectralSolver {
    n: usize,
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SpectralSolver {
    /// `k_train` is `n x n` row-major and must be symmetric.
    pub fn new(k_train: &[f64], n: usize) -> Result<Self> {
        if k_train.len() != n * n {
            return Err(Error::Shape(format!("training kernel must be {n} x {n}")));
        }
        let scale = k_train.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            for j in 0..i {
                if (k_train[i * n + j] - k_train[j * n + i]).abs() > 1e-12 * scale {
                    return Err(Error::NotSymmetric);
                }
            }
        }
        let m = DMatrix::from_row_slice(n, n, k_train);
        let eig = SymmetricEigen::new(m);
        let trace: f64 = (0..n).map(|i| k_train[i * n + i]).sum();
        let tol = EIGEN_RELATIVE_SLACK * trace.abs() / n.max(1) as f64;
        let min = eig.eigenvalues.min();
        if n > 0 && min < -tol {
            return Err(Error::NotPsd {
                min_eigenvalue: min,
                tolerance: tol,
            });
        }
        Ok(SpectralSolver {
            n,
            eigenvalues: eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect(),
            eigenvectors: eig.eigenvectors,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `k_cross (K + sigma I)^-1 Y` for each `sigma`, each `m x k` row-major.
    pub fn means(
        &self,
        k_cross: &[f64],
        targets: &RegressionTargets,
        sigma_grid: &[f64],
    ) -> Result<Vec<Vec<f64>>> {
        let n = self.n;
        if targets.n() != n {
            return Err(Error::Shape(format!(
                "{} targets for a {n}-point training kernel",
                targets.n()
            )));
        }
        if n == 0 || k_cross.len() % n != 0 {
            return Err(Error::Shape("cross kernel width does not match training set".into()));
        }
        let m = k_cross.len() / n;
        let k = targets.classes();
        let q = &self.eigenvectors;
        let y = DMatrix::from_row_slice(n, k, targets.values());
        let qty = q.transpose() * y;
        let kq = DMatrix::from_row_slice(m, n, k_cross) * q;
        sigma_grid
            .iter()
            .map(|&sigma| {
                if !(sigma >= 0.0) {
                    return Err(Error::Parameter(format!("noise variance {sigma} is negative")));
                }
                let mut scaled = qty.clone();
                for (r, &l) in self.eigenvalues.iter().enumerate() {
                    let d = l + sigma;
                    if d <= 0.0 {
                        return Err(Error::Singular(sigma));
                    }
                    scaled.row_mut(r).scale_mut(1.0 / d);
                }
                let means = &kq * scaled;
                Ok((0..m)
                    .flat_map(|i| (0..k).map(move |c| (i, c)))
                    .map(|(i, c)| means[(i, c)])
                    .collect())
            })
            .collect()
    }
}

/// Posterior means for each noise variance in `sigma_grid`, from a single
/// eigendecomposition of `k_train`.
pub fn posterior_means(
    k_train: &[f64],
    k_cross: &[f64],
    targets: &RegressionTargets,
    sigma_grid: &[f64],
) -> Result<Vec<Vec<f64>>> {
    SpectralSolver::new(k_train, targets.n())?.means(k_cross, targets, sigma_grid)
}

/// Row-wise argmax of an `m x k` matrix. Ties go to the lower class.
pub fn argmax_rows(means: &[f64], k: usize) -> Vec<usize> {
    means
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// `count` values log-uniform in `[lo, hi] * scale`.
pub fn log_grid(lo: f64, hi: f64, count: usize, scale: f64) -> Vec<f64> {
    if count == 1 {
        return vec![lo * scale];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp() * scale)
        .collect()
}

/// 21 values log-uniform in `[1e-6, 1e2] * trace(K) / n`.
pub fn default_sigma_grid(gram: &GramMatrix) -> Vec<f64> {
    let scale = if gram.n() == 0 { 1.0 } else { gram.trace() / gram.n() as f64 };
    log_grid(1e-6, 1e2, 21, scale)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    /// Absolute noise variances. `None` selects [`default_sigma_grid`].
    pub sigma_grid: Option<Vec<f64>>,
    pub seed: u64,
    pub classes: usize,
    pub shift: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 4,
            sigma_grid: None,
            seed: 0,
            classes: 10,
            shift: DEFAULT_TARGET_SHIFT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub sigma_grid: Vec<f64>,
    /// `fold_accuracy[s][f]` for noise `sigma_grid[s]` on fold `f`.
    pub fold_accuracy: Vec<Vec<f64>>,
    pub mean_accuracy: Vec<f64>,
    /// Sample standard deviation over folds divided by `sqrt(folds)`.
    pub stderr: Vec<f64>,
    pub best_index: usize,
    pub best_sigma: f64,
    pub best_accuracy: f64,
}

impl CvResult {
    pub fn folds(&self) -> usize {
        self.fold_accuracy.first().map_or(0, Vec::len)
    }
}

/// Fold index of every point: shuffle with `seed`, order by class, then deal
/// round-robin with one counter running through all classes.
pub fn assign_folds(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let n = labels.len();
    if folds < 2 || folds > n {
        return Err(Error::Folds(format!("{folds} folds for {n} points")));
    }
    if n % folds != 0 {
        return Err(Error::Folds(format!("{folds} folds do not divide {n} points")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|&i| labels[i]);
    let mut fold = vec![0; n];
    for (counter, &i) in order.iter().enumerate() {
        fold[i] = counter % folds;
    }
    Ok(fold)
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// k-fold cross-validated accuracy of the posterior-mean classifier on a
/// stored kernel, for every noise level.
pub fn cv_accuracy(gram: &GramMatrix, labels: &[usize], config: &CvConfig) -> Result<CvResult> {
    let n = gram.n();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} kernel rows", labels.len())));
    }
    let sigma_grid = match &config.sigma_grid {
        Some(g) if g.is_empty() => return Err(Error::Parameter("empty noise grid".into())),
        Some(g) => g.clone(),
        None => default_sigma_grid(gram),
    };
    let fold_of = assign_folds(labels, config.folds, config.seed)?;
    let targets = encode_targets(labels, config.classes, config.shift)?;
    let mut fold_accuracy = vec![vec![0.0; config.folds]; sigma_grid.len()];
    for f in 0..config.folds {
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let k_train = gram.block(&train, &train);
        let k_cross = gram.block(&test, &train);
        let means = posterior_means(&k_train, &k_cross, &targets.subset(&train), &sigma_grid)?;
        for (s, m) in means.iter().enumerate() {
            let pred = argmax_rows(m, config.classes);
            let hits = pred.iter().zip(&test).filter(|(&p, &i)| p == labels[i]).count();
            fold_accuracy[s][f] = hits as f64 / test.len() as f64;
        }
    }
    let (mean_accuracy, stderr): (Vec<f64>, Vec<f64>) =
        fold_accuracy.iter().map(|a| mean_and_stderr(a)).unzip();
    let best_index = mean_accuracy
        .iter()
        .enumerate()
        .fold(0, |b, (i, &a)| if a > mean_accuracy[b] { i } else { b });
    Ok(CvResult {
        best_sigma: sigma_grid[best_index],
        best_accuracy: mean_accuracy[best_index],
        best_index,
        sigma_grid,
        fold_accuracy,
        mean_accuracy,
        stderr,
    })
}

/// Predicted classes of `test` points, trained on `train` points of a stored
/// kernel at noise `sigma`.
pub fn predict_classes(
    gram: &GramMatrix,
    labels: &[usize],
    train: &[usize],
    test: &[usize],
    sigma: f64,
    classes: usize,
    shift: f64,
) -> Result<Vec<usize>> {
    if test.is_empty() {
        return Ok(Vec::new());
    }
    let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let targets = encode_targets(&train_labels, classes, shift)?;
    let means = posterior_means(
        &gram.block(train, train),
        &gram.block(test, train),
        &targets,
        &[sigma],
    )?;
    Ok(argmax_rows(&means[0], classes))
}

/// Prediction for every point from the model trained on the other folds.
pub fn out_of_fold_predictions(
    gram: &GramMatrix,
    labels: &[usize],
    config: &CvConfig,
    sigma: f64,
) -> Result<Vec<usize>> {
    let n = gram.n();
    let fold_of = assign_folds(labels, config.folds, config.seed)?;
    let mut pred = vec![0; n];
    for f in 0..config.folds {
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let p = predict_classes(gram, labels, &train, &test, sigma, config.classes, config.shift)?;
        for (&i, c) in test.iter().zip(p) {
            pred[i] = c;
        }
    }
    Ok(pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gram::GramMeta;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let g: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = (0..n).map(|r| g[r * n + i] * g[r * n + j]).sum::<f64>()
                    + if i == j { 0.1 } else { 0.0 };
            }
        }
        k
    }

    #[test]
    fn target_encoding() {
        let t = encode_targets(&[2], 10, 0.1).unwrap();
        for (c, &v) in t.row(0).iter().enumerate() {
            assert!((v - if c == 2 { 0.9 } else { -0.1 }).abs() < 1e-15);
        }
        let t = encode_targets(&[0, 3, 9], 10, 0.1).unwrap();
        for i in 0..3 {
            assert!(t.row(i).iter().sum::<f64>().abs() < 1e-14);
        }
        assert_eq!(encode_targets(&[1], 3, 0.0).unwrap().values(), &[0.0, 1.0, 0.0]);
        assert!(matches!(encode_targets(&[3], 3, 0.1), Err(Error::Label { .. })));
    }

    #[test]
    fn interpolates_training_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_spd(5, &mut rng);
        let t = encode_targets(&[0, 1, 2, 1, 0], 3, 0.1).unwrap();
        let m = posterior_means(&k, &k, &t, &[0.0]).unwrap();
        for (a, b) in m[0].iter().zip(t.values()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_kernel_halves() {
        let n = 3;
        let mut eye = vec![0.0; 9];
        (0..n).for_each(|i| eye[i * n + i] = 1.0);
        let t = encode_targets(&[0, 1, 1], 2, 0.0).unwrap();
        let cross = vec![1.0, 2.0, 3.0, 0.5, 0.0, -1.0];
        let m = posterior_means(&eye, &cross, &t, &[1.0]).unwrap();
        assert_eq!(m[0], vec![0.5, 2.5, 0.25, -0.5]);
    }

    #[test]
    fn singular_and_nonsymmetric() {
        let t = encode_targets(&[0, 1], 2, 0.0).unwrap();
        let ones = vec![1.0; 4];
        assert!(matches!(posterior_means(&ones, &ones, &t, &[0.0]), Err(Error::Singular(_))));
        assert!(posterior_means(&ones, &ones, &t, &[1e-3]).is_ok());
        let skew = vec![1.0, 0.5, 0.4, 1.0];
        assert!(matches!(posterior_means(&skew, &skew, &t, &[1.0]), Err(Error::NotSymmetric)));
        let neg = vec![-1.0, 0.0, 0.0, 1.0];
        assert!(matches!(posterior_means(&neg, &neg, &t, &[1.0]), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<usize> = (0..40).map(|i| i % 10).collect();
        let f = assign_folds(&labels, 4, 3).unwrap();
        for fold in 0..4 {
            assert_eq!(f.iter().filter(|&&x| x == fold).count(), 10);
        }
        assert_eq!(f, assign_folds(&labels, 4, 3).unwrap());
        assert!(assign_folds(&labels, 3, 0).is_err());
        assert!(assign_folds(&labels, 1, 0).is_err());
    }

    #[test]
    fn default_grid_spans_relative_range() {
        let g = GramMatrix::new(2, vec![2.0, 0.0, 0.0, 4.0], GramMeta::new("t")).unwrap();
        let grid = default_sigma_grid(&g);
        assert_eq!(grid.len(), 21);
        assert!((grid[0] - 3e-6).abs() < 1e-18);
        assert!((grid[20] - 300.0).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn argmax_is_scale_invariant(seed in any::<u64>(), c in 1e-3f64..1e3, sigma in 1e-3f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 6;
            let k = random_spd(n, &mut rng);
            let cross: Vec<f64> = (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let t = encode_targets(&labels, 4, 0.1).unwrap();
            let base = posterior_means(&k, &cross, &t, &[sigma]).unwrap();
            let ks: Vec<f64> = k.iter().map(|v| v * c).collect();
            let cs: Vec<f64> = cross.iter().map(|v| v * c).collect();
            let scaled = posterior_means(&ks, &cs, &t, &[sigma * c]).unwrap();
            for (a, b) in base[0].iter().zip(&scaled[0]) {
                prop_assert!((a - b).abs() <= 1e-8 * a.abs().max(1.0));
            }
            prop_assert_eq!(argmax_rows(&base[0], 4), argmax_rows(&scaled[0], 4));
        }

        #[test]
        fn shifting_one_class_moves_only_its_column(seed in any::<u64>(), delta in 0.01f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let k = random_spd(n, &mut rng);
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let t = encode_targets(&labels, 3, 0.1).unwrap();
            let mut moved = t.clone();
            for i in 0..n {
                if labels[i] == 1 {
                    moved.values[i * 3 + 1] += delta;
                }
            }
            let a = posterior_means(&k, &k, &t, &[0.5]).unwrap().remove(0);
            let b = posterior_means(&k, &k, &moved, &[0.5]).unwrap().remove(0);
            let mut gain = 0.0;
            for i in 0..n {
                prop_assert!((a[i * 3] - b[i * 3]).abs() < 1e-12);
                prop_assert!((a[i * 3 + 2] - b[i * 3 + 2]).abs() < 1e-12);
                if labels[i] == 1 {
                    gain += b[i * 3 + 1] - a[i * 3 + 1];
                }
            }
            // v' K (K + s)^-1 v > 0 for the class indicator v.
            prop_assert!(gain > 0.0);
        }
    }
}
