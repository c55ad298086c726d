use nalgebra::{DMatrix, DVector};

use super::features::FeatureSet;
use crate::error::{Error, Result};

/// Ridge added to both covariance matrices.
pub const COVARIANCE_EPS: f64 = 1e-6;
const SQRT_MAX_ITERS: usize = 100;
const SQRT_TOL: f64 = 1e-15;

fn mean_and_cov(set: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let f = set.dim();
    let data = DMatrix::from_fn(n, f, |i, j| set.vectors[i][j]);
    let mean = DVector::from_fn(f, |j, _| data.column(j).sum() / n as f64);
    let mut centered = data;
    for j in 0..f {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    for i in 0..f {
        cov[(i, i)] += COVARIANCE_EPS;
    }
    (mean, cov)
}

/// Square root of a symmetric positive-definite matrix by the coupled
/// Newton–Schulz iteration, after scaling into the convergence region.
pub fn spd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let scale = a.norm();
    if scale == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let ident = DMatrix::<f64>::identity(n, n);
    let mut y = a / scale;
    let mut z = ident.clone();
    let target = a / scale;
    // Iterate until the residual stops improving; quadratic convergence makes
    // the extra steps cheap and pushes the root to working precision.
    let mut best = (f64::INFINITY, y.clone());
    for _ in 0..SQRT_MAX_ITERS {
        let t = (&ident * 3.0 - &z * &y) * 0.5;
        y = &y * &t;
        z = &t * &z;
        let r = (&y * &y - &target).norm();
        if !(r < best.0) {
            break;
        }
        best = (r, y.clone());
        if r < SQRT_TOL {
            break;
        }
    }
    let (residual, y) = best;
    if !(residual < 1e-6) {
        return Err(Error::NonConvergentSqrt(residual));
    }
    let y = (&y + y.transpose()) * 0.5;
    Ok(y * scale.sqrt())
}

/// Frechet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
///
/// The trace of `(S_a S_b)^(1/2)` is evaluated as the trace of the symmetric
/// `(S_a^(1/2) S_b S_a^(1/2))^(1/2)`, which has the same eigenvalues.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.kind != b.kind || a.dim() != b.dim() {
        return Err(Error::FeatureMismatch(format!(
            "{:?}/{} vs {:?}/{}",
            a.kind,
            a.dim(),
            b.kind,
            b.dim()
        )));
    }
    for s in [a, b] {
        if s.len() < 2 {
            return Err(Error::InsufficientSamples { need: 2, got: s.len() });
        }
    }
    let (mu_a, cov_a) = mean_and_cov(a);
    let (mu_b, cov_b) = mean_and_cov(b);
    let root_a = spd_sqrt(&cov_a)?;
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = spd_sqrt(&inner)?.trace();
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Mean Euclidean distance over all unordered pairs.
pub fn diversity(set: &FeatureSet) -> Result<f64> {
    let n = set.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: n });
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += set.vectors[i]
                .iter()
                .zip(&set.vectors[j])
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::FeatureKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize, f: usize, shift: f64) -> FeatureSet {
        let v = (0..n)
            .map(|_| (0..f).map(|_| rng.random_range(-1.0..1.0) + shift).collect())
            .collect();
        FeatureSet::new(FeatureKind::Kinetic, v).unwrap()
    }

    // Independent route: eigen-decomposition of the symmetric product.
    fn frechet_by_eigen(a: &FeatureSet, b: &FeatureSet) -> f64 {
        let (ma, ca) = mean_and_cov(a);
        let (mb, cb) = mean_and_cov(b);
        let ea = ca.clone().symmetric_eigen();
        let ra = &ea.eigenvectors
            * DMatrix::from_diagonal(&ea.eigenvalues.map(|v| v.max(0.0).sqrt()))
            * ea.eigenvectors.transpose();
        let m = &ra * &cb * &ra;
        let m = (&m + m.transpose()) * 0.5;
        let cross: f64 = m.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
        (&ma - &mb).norm_squared() + ca.trace() + cb.trace() - 2.0 * cross
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_set(&mut rng, 30, 6, 0.0);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn two_delta_distributions_in_one_dimension() {
        let zeros = FeatureSet::new(FeatureKind::Kinetic, vec![vec![0.0]; 10]).unwrap();
        let ones = FeatureSet::new(FeatureKind::Kinetic, vec![vec![1.0]; 10]).unwrap();
        let d = frechet_distance(&zeros, &ones).unwrap();
        assert!((d - 1.0).abs() < 1e-4, "{d}");
    }

    #[test]
    fn symmetric_and_matches_eigen_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_set(&mut rng, 40, 5, 0.0);
        let b = random_set(&mut rng, 25, 5, 0.3);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-9, "{ab} {ba} {}", frechet_by_eigen(&a, &b));
        assert!((ab - frechet_by_eigen(&a, &b)).abs() < 1e-8);
    }

    #[test]
    fn shifting_one_set_adds_squared_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_set(&mut rng, 30, 4, 0.0);
        let b = random_set(&mut rng, 30, 4, 0.0);
        let base = frechet_distance(&a, &b).unwrap();
        let v = [0.5, -1.0, 0.25, 2.0];
        let shift = |s: &FeatureSet, k: f64| {
            FeatureSet::new(
                s.kind,
                s.vectors.iter().map(|x| x.iter().zip(v).map(|(p, d)| p + k * d).collect()).collect(),
            )
            .unwrap()
        };
        let moved = frechet_distance(&a, &shift(&b, 1.0)).unwrap();
        let vsq: f64 = v.iter().map(|d| d * d).sum();
        let (ma, _) = mean_and_cov(&a);
        let (mb, _) = mean_and_cov(&b);
        let dm = &mb - &ma;
        let expected_mean_change = vsq + 2.0 * v.iter().zip(dm.iter()).map(|(a, b)| a * b).sum::<f64>();
        assert!((moved - base - expected_mean_change).abs() < 1e-8);
        let both = frechet_distance(&shift(&a, 1.0), &shift(&b, 1.0)).unwrap();
        assert!((both - base).abs() < 1e-8);
    }

    #[test]
    fn needs_two_samples() {
        let one = FeatureSet::new(FeatureKind::Kinetic, vec![vec![0.0]]).unwrap();
        assert!(matches!(frechet_distance(&one, &one), Err(Error::InsufficientSamples { .. })));
        assert!(matches!(diversity(&one), Err(Error::InsufficientSamples { .. })));
        let g = FeatureSet::new(FeatureKind::Geometric, vec![vec![0.0]; 3]).unwrap();
        let k = FeatureSet::new(FeatureKind::Kinetic, vec![vec![0.0]; 3]).unwrap();
        assert!(frechet_distance(&g, &k).is_err());
    }

    #[test]
    fn diversity_cases() {
        let same = FeatureSet::new(FeatureKind::Kinetic, vec![vec![1.0, 2.0]; 5]).unwrap();
        assert_eq!(diversity(&same).unwrap(), 0.0);
        let pair = FeatureSet::new(FeatureKind::Kinetic, vec![vec![0.0], vec![2.0]]).unwrap();
        assert_eq!(diversity(&pair).unwrap(), 2.0);
    }

    proptest::proptest! {
        #[test]
        fn diversity_is_homogeneous_and_translation_invariant(
            pts in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..8),
            c in 0.0f64..4.0,
            shift in -3.0f64..3.0,
        ) {
            let base = diversity(&FeatureSet::new(FeatureKind::Kinetic, pts.clone()).unwrap()).unwrap();
            let scaled: Vec<Vec<f64>> = pts.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
            let moved: Vec<Vec<f64>> = pts.iter().map(|v| v.iter().map(|x| x + shift).collect()).collect();
            let mut permuted = pts.clone();
            permuted.reverse();
            let ds = diversity(&FeatureSet::new(FeatureKind::Kinetic, scaled).unwrap()).unwrap();
            let dm = diversity(&FeatureSet::new(FeatureKind::Kinetic, moved).unwrap()).unwrap();
            let dp = diversity(&FeatureSet::new(FeatureKind::Kinetic, permuted).unwrap()).unwrap();
            proptest::prop_assert!((ds - c * base).abs() < 1e-9 * (1.0 + ds));
            proptest::prop_assert!((dm - base).abs() < 1e-9 * (1.0 + base));
            proptest::prop_assert!((dp - base).abs() < 1e-9 * (1.0 + base));
        }
    }
}
