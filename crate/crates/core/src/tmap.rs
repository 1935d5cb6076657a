//! Affine translation maps between environment coordinate systems.
//!
//! Translated patching maps source-environment circuit activations into the
//! base environment's coordinates before replacement. Maps are affine,
//! fitted by ridge-regularized normal equations with a symmetric
//! positive-definite factorization, and audited: the hashes of the fit pairs
//! travel with the map so holdout evaluation can hard-fail on leakage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky, cholesky_solve, norm2, sub, LinalgError, Matrix};
use crate::scalar::Real;
use crate::seeding::fnv1a64;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("no pairs provided")]
    EmptyPairs,
    #[error("pair {index} has inconsistent dimensions")]
    RaggedPairs { index: usize },
    #[error(
        "fit is underdetermined ({got} pairs for {dim}-dimensional sources) \
         and ridge is zero; add ridge regularization"
    )]
    Underdetermined { got: usize, dim: usize },
    #[error("ridge must be nonnegative, got {0}")]
    NegativeRidge(f64),
    #[error("holdout pair {index} was used for fitting: leakage")]
    Leakage { index: usize },
    #[error("map expects source dim {expected_src} and target dim {expected_dst}, got {got_src}/{got_dst}")]
    DimensionMismatch {
        expected_src: usize,
        expected_dst: usize,
        got_src: usize,
        got_dst: usize,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// An affine map `a ↦ W a + b` from one environment's circuit activations
/// to another's, with its fit audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationMap<R> {
    pub source_env: usize,
    pub target_env: usize,
    /// Row-major, shape (target circuit dim × source circuit dim).
    pub matrix: Matrix<R>,
    pub bias: Vec<R>,
    /// Root-mean-square residual per component on the fit pairs.
    pub train_error: R,
    /// Filled by `holdout_error`; `None` until evaluated.
    pub holdout_error: Option<R>,
    /// Hashes of the fit pairs, for leakage audits.
    pub fit_pair_hashes: Vec<u64>,
    pub n_pairs: usize,
    /// Smallest Cholesky pivot of the normal equations: a conditioning
    /// diagnostic (small pivots mean a near-singular fit).
    pub min_pivot: f64,
}

impl<R: Real> TranslationMap<R> {
    /// The identity map on `dim` coordinates.
    pub fn identity(dim: usize, source_env: usize, target_env: usize) -> Self {
        Self {
            source_env,
            target_env,
            matrix: Matrix::identity(dim),
            bias: vec![R::zero(); dim],
            train_error: R::zero(),
            holdout_error: None,
            fit_pair_hashes: Vec::new(),
            n_pairs: 0,
            min_pivot: 1.0,
        }
    }

    pub fn source_dim(&self) -> usize {
        self.matrix.cols
    }

    pub fn target_dim(&self) -> usize {
        self.matrix.rows
    }

    /// Applies the map: `W a + b`.
    pub fn apply(&self, a: &[R]) -> Result<Vec<R>, MapError> {
        if a.len() != self.source_dim() {
            return Err(MapError::DimensionMismatch {
                expected_src: self.source_dim(),
                expected_dst: self.target_dim(),
                got_src: a.len(),
                got_dst: self.target_dim(),
            });
        }
        let mut y = self.matrix.matvec(a);
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v = *v + *b;
        }
        Ok(y)
    }

    /// Tags the map with the environments it translates between.
    pub fn for_envs(mut self, source_env: usize, target_env: usize) -> Self {
        self.source_env = source_env;
        self.target_env = target_env;
        self
    }
}

/// Content hash of one (source, target) activation pair.
pub fn pair_hash<R: Real>(source: &[R], target: &[R]) -> u64 {
    let mut bytes = Vec::with_capacity((source.len() + target.len()) * 8 + 1);
    for v in source {
        bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    bytes.push(0x1f);
    for v in target {
        bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Fits the affine least-squares map minimizing
/// `Σ‖W aₛ + b − a_t‖² + ridge·‖W‖²_F`.
pub fn fit_map<R: Real>(
    pairs: &[(Vec<R>, Vec<R>)],
    ridge: R,
) -> Result<TranslationMap<R>, MapError> {
    if pairs.is_empty() {
        return Err(MapError::EmptyPairs);
    }
    if ridge < R::zero() {
        return Err(MapError::NegativeRidge(ridge.to_f64_lossy()));
    }
    let d_src = pairs[0].0.len();
    let d_dst = pairs[0].1.len();
    for (i, (s, t)) in pairs.iter().enumerate() {
        if s.len() != d_src || t.len() != d_dst {
            return Err(MapError::RaggedPairs { index: i });
        }
    }

    // Normal equations on the augmented design [a; 1]; the ridge penalizes W
    // only, never the bias.
    let aug = d_src + 1;
    let mut gram = Matrix::<R>::zeros(aug, aug);
    let mut rhs = vec![vec![R::zero(); aug]; d_dst];
    for (s, t) in pairs {
        let mut u = s.clone();
        u.push(R::one());
        for i in 0..aug {
            for j in 0..=i {
                gram[(i, j)] = gram[(i, j)] + u[i] * u[j];
            }
        }
        for (dst, row) in rhs.iter_mut().enumerate() {
            for (j, &uj) in u.iter().enumerate() {
                row[j] = row[j] + uj * t[dst];
            }
        }
    }
    for i in 0..aug {
        for j in i + 1..aug {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    for i in 0..d_src {
        gram[(i, i)] = gram[(i, i)] + ridge;
    }

    let (factor, min_pivot) = cholesky(&gram).map_err(|e| match e {
        LinalgError::NotPositiveDefinite { .. } if ridge == R::zero() => {
            MapError::Underdetermined { got: pairs.len(), dim: d_src }
        }
        other => MapError::Linalg(other),
    })?;

    let mut matrix = Matrix::<R>::zeros(d_dst, d_src);
    let mut bias = vec![R::zero(); d_dst];
    for dst in 0..d_dst {
        let sol = cholesky_solve(&factor, &rhs[dst]);
        matrix.row_mut(dst).copy_from_slice(&sol[..d_src]);
        bias[dst] = sol[d_src];
    }

    let mut map = TranslationMap {
        source_env: 0,
        target_env: 0,
        matrix,
        bias,
        train_error: R::zero(),
        holdout_error: None,
        fit_pair_hashes: pairs.iter().map(|(s, t)| pair_hash(s, t)).collect(),
        n_pairs: pairs.len(),
        min_pivot: min_pivot.to_f64_lossy(),
    };
    map.train_error = rms_residual(&map, pairs)?;
    Ok(map)
}

/// Root-mean-square residual of the map on held-out pairs. Hard-fails if any
/// pair was part of the fit.
pub fn holdout_error<R: Real>(
    map: &TranslationMap<R>,
    pairs: &[(Vec<R>, Vec<R>)],
) -> Result<R, MapError> {
    if pairs.is_empty() {
        return Err(MapError::EmptyPairs);
    }
    for (i, (s, t)) in pairs.iter().enumerate() {
        if map.fit_pair_hashes.contains(&pair_hash(s, t)) {
            return Err(MapError::Leakage { index: i });
        }
    }
    rms_residual(map, pairs)
}

fn rms_residual<R: Real>(
    map: &TranslationMap<R>,
    pairs: &[(Vec<R>, Vec<R>)],
) -> Result<R, MapError> {
    let mut sq = R::zero();
    let mut count = 0usize;
    for (s, t) in pairs {
        let mapped = map.apply(s)?;
        let r = sub(&mapped, t);
        sq = sq + crate::linalg::dot(&r, &r);
        count += r.len();
    }
    Ok((sq / R::from_usize(count.max(1)).unwrap()).sqrt())
}

/// Euclidean distance between the translated source activations and a base
/// reference: `‖T(a_source) − a_base‖`. An absent map means raw patching
/// (identity translation).
pub fn on_manifold_distance<R: Real>(
    map: Option<&TranslationMap<R>>,
    a_source: &[R],
    a_base: &[R],
) -> Result<R, MapError> {
    let mapped = match map {
        Some(m) => m.apply(a_source)?,
        None => a_source.to_vec(),
    };
    if mapped.len() != a_base.len() {
        return Err(MapError::DimensionMismatch {
            expected_src: a_source.len(),
            expected_dst: a_base.len(),
            got_src: a_source.len(),
            got_dst: mapped.len(),
        });
    }
    Ok(norm2(&sub(&mapped, a_base)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::seeding::stream_rng;

    fn random_pairs(
        seed: u64,
        n: usize,
        d: usize,
        f: impl Fn(&[f64]) -> Vec<f64>,
        noise: f64,
    ) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut rng = stream_rng(seed, "tmap-test", 0);
        (0..n)
            .map(|_| {
                let s: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let mut t = f(&s);
                for v in t.iter_mut() {
                    *v += noise * rng.gen_range(-1.0..1.0);
                }
                (s, t)
            })
            .collect()
    }

    #[test]
    fn exact_identity_recovery() {
        let pairs = random_pairs(1, 12, 3, |s| s.to_vec(), 0.0);
        let map = fit_map(&pairs, 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((map.matrix[(i, j)] - expected).abs() < 1e-8);
            }
            assert!(map.bias[i].abs() < 1e-8);
        }
        assert!(map.train_error < 1e-10);
    }

    #[test]
    fn scalar_affine_recovery() {
        let pairs = random_pairs(2, 8, 1, |s| vec![2.0 * s[0] + 1.0], 0.0);
        let map = fit_map(&pairs, 0.0).unwrap();
        assert!((map.matrix[(0, 0)] - 2.0).abs() < 1e-10);
        assert!((map.bias[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn random_linear_map_recovered() {
        let w = [[0.9, -0.3, 0.2], [0.1, 1.4, -0.8], [-0.5, 0.6, 0.3]];
        let b = [0.4, -1.1, 0.05];
        let gen = |s: &[f64]| {
            (0..3)
                .map(|i| w[i].iter().zip(s).map(|(wi, si)| wi * si).sum::<f64>() + b[i])
                .collect()
        };
        let pairs = random_pairs(3, 30, 3, gen, 0.0);
        let map = fit_map(&pairs, 0.0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((map.matrix[(i, j)] - w[i][j]).abs() < 1e-6, "W[{i}][{j}]");
            }
            assert!((map.bias[i] - b[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn underdetermined_without_ridge_advises_ridge() {
        let pairs = random_pairs(4, 2, 4, |s| s.to_vec(), 0.0);
        assert!(matches!(
            fit_map(&pairs, 0.0),
            Err(MapError::Underdetermined { got: 2, dim: 4 })
        ));
        // The same fit succeeds with ridge.
        assert!(fit_map(&pairs, 1e-6).is_ok());
    }

    #[test]
    fn holdout_is_small_on_exact_data_and_rejects_leakage() {
        let pairs = random_pairs(5, 20, 2, |s| vec![s[0] + s[1], s[0] - s[1]], 0.0);
        let (fit, held) = pairs.split_at(16);
        let map = fit_map(fit, 0.0).unwrap();
        let err = holdout_error(&map, held).unwrap();
        assert!(err < 1e-9, "holdout error {err}");
        // Feeding a fit pair back in is a hard failure.
        assert!(matches!(
            holdout_error(&map, &fit[..1]),
            Err(MapError::Leakage { index: 0 })
        ));
    }

    #[test]
    fn noisy_holdout_rms_tracks_sigma() {
        let sigma = 0.1;
        let mut inside = 0;
        for seed in 0..10 {
            // Uniform noise on [-sigma, sigma] has RMS sigma/sqrt(3); the
            // [0.5σ, 2σ] band in the contract refers to the injected scale.
            let pairs = random_pairs(100 + seed, 80, 2, |s| vec![s[0], s[1]], sigma);
            let (fit, held) = pairs.split_at(60);
            let map = fit_map(fit, 1e-6).unwrap();
            let err = holdout_error(&map, held).unwrap().to_f64_lossy();
            if err >= 0.5 * sigma / 3.0_f64.sqrt() && err <= 2.0 * sigma {
                inside += 1;
            }
        }
        assert!(inside >= 9, "only {inside}/10 seeds inside the RMS band");
    }

    #[test]
    fn training_error_is_monotone_in_ridge() {
        let pairs = random_pairs(6, 12, 3, |s| vec![s[0] * 0.5, s[1] + 0.3, -s[2]], 0.05);
        let mut last = -1.0f64;
        for ridge in [0.0, 1e-4, 1e-2, 1.0, 10.0] {
            let map = fit_map(&pairs, ridge).unwrap();
            let err = map.train_error.to_f64_lossy();
            assert!(err + 1e-12 >= last, "ridge {ridge}: {err} < {last}");
            last = err;
        }
    }

    #[test]
    fn on_manifold_distance_examples() {
        let map = TranslationMap::<f64>::identity(4, 0, 1);
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(on_manifold_distance(Some(&map), &a, &a).unwrap(), 0.0);
        let b = vec![2.0, 3.0, 4.0, 5.0];
        assert!((on_manifold_distance(Some(&map), &a, &b).unwrap() - 2.0).abs() < 1e-15);
        assert!((on_manifold_distance(None, &a, &b).unwrap() - 2.0).abs() < 1e-15);
        assert!(on_manifold_distance(None, &a, &b[..2]).is_err());
    }
}
