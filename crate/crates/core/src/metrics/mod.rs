//! Generation metrics over extracted feature vectors, plus the contrastive
//! evaluator that extracts them on the toy corpus.

mod evaluator;

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use evaluator::{train_evaluator, Evaluator, EvaluatorConfig, EvaluatorReport};

pub const R_PRECISION_BATCH: usize = 32;
pub const DIVERSITY_SUBSET: usize = 100;
pub const MMODALITY_PAIRS: usize = 10;
pub const REPEATS: usize = 20;
/// Eigenvalues above `-EIGEN_CLAMP` are treated as zero in the matrix root.
pub const EIGEN_CLAMP: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("feature shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("features contain non-finite values")]
    NonFinite,
    #[error("covariance is not positive semidefinite (eigenvalue {0})")]
    SingularCovariance(f64),
    #[error("evaluator training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Motion(#[from] crate::motionrep::MotionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Real,
    Generated,
    Text,
}

/// `n × d` feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub data: DMatrix<f64>,
    pub source: Source,
}

impl FeatureSet {
    pub fn new(rows: &[Vec<f64>], source: Source) -> Result<Self, MetricError> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(MetricError::ShapeMismatch("rows have different widths".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        Ok(FeatureSet { data: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]), source })
    }

    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    pub fn select(&self, idx: &[usize]) -> FeatureSet {
        FeatureSet { data: self.data.select_rows(idx), source: self.source }
    }
}

fn dist(a: &FeatureSet, i: usize, b: &FeatureSet, j: usize) -> f64 {
    (a.data.row(i) - b.data.row(j)).norm()
}

fn cmp_rows(a: &FeatureSet, i: usize, j: usize) -> Ordering {
    for (x, y) in a.data.row(i).iter().zip(a.data.row(j).iter()) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Row indices in a content-defined order, so seeded draws do not depend on
/// the order the samples arrived in.
fn canonical_order(sets: &[&FeatureSet]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sets[0].len()).collect();
    idx.sort_by(|&i, &j| sets.iter().map(|s| cmp_rows(s, i, j)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal));
    idx
}

fn check_paired(a: &FeatureSet, b: &FeatureSet) -> Result<(), MetricError> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(MetricError::ShapeMismatch(format!("{}×{} vs {}×{}", a.len(), a.dim(), b.len(), b.dim())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RPrecision {
    /// Top-1/2/3 averaged over repeats.
    pub top: [f64; 3],
    pub per_repeat: Vec<[f64; 3]>,
}

/// Retrieval precision of each motion's paired text among `batch` candidates
/// (itself plus `batch − 1` others) by Euclidean distance. Ties are resolved
/// in favour of the true text.
pub fn r_precision(
    motion: &FeatureSet,
    text: &FeatureSet,
    batch: usize,
    repeats: usize,
    seed: u64,
) -> Result<RPrecision, MetricError> {
    check_paired(motion, text)?;
    if motion.len() < batch || batch == 0 {
        return Err(MetricError::InsufficientSamples { need: batch.max(1), got: motion.len() });
    }
    let base = canonical_order(&[motion, text]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_repeat = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let mut idx = base.clone();
        idx.shuffle(&mut rng);
        let mut hits = [0usize; 3];
        let mut count = 0usize;
        for chunk in idx.chunks_exact(batch) {
            for &i in chunk {
                let own = dist(motion, i, text, i);
                let rank = 1 + chunk.iter().filter(|&&j| j != i && dist(motion, i, text, j) < own).count();
                for (k, h) in hits.iter_mut().enumerate() {
                    if rank <= k + 1 {
                        *h += 1;
                    }
                }
                count += 1;
            }
        }
        per_repeat.push(hits.map(|h| h as f64 / count as f64));
    }
    let n = per_repeat.len() as f64;
    let top = std::array::from_fn(|k| per_repeat.iter().map(|r| r[k]).sum::<f64>() / n);
    Ok(RPrecision { top, per_repeat })
}

fn mean_and_cov(f: &FeatureSet) -> (DVector<f64>, DMatrix<f64>) {
    let n = f.len() as f64;
    let mu = f.data.row_mean().transpose();
    let mut centered = f.data.clone();
    for mut r in centered.row_iter_mut() {
        r -= mu.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0).max(1.0);
    (mu, cov)
}

/// Symmetric eigendecomposition with small negative eigenvalues clamped.
fn clamped_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricError> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e = sym.symmetric_eigen();
    for v in e.eigenvalues.iter_mut() {
        if *v < -EIGEN_CLAMP {
            return Err(MetricError::SingularCovariance(*v));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricError> {
    let e = clamped_eigen(m)?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `Tr((Σ_r Σ_g)^{1/2})` computed as `Tr((Σ_r^{1/2} Σ_g Σ_r^{1/2})^{1/2})`.
pub fn trace_sqrt_product(sigma_r: &DMatrix<f64>, sigma_g: &DMatrix<f64>) -> Result<f64, MetricError> {
    let s = sqrtm_psd(sigma_r)?;
    let inner = &s * sigma_g * &s;
    Ok(clamped_eigen(&inner)?.eigenvalues.iter().map(|v| v.sqrt()).sum())
}

fn fid_from_stats(mu_r: &DVector<f64>, s_r: &DMatrix<f64>, mu_g: &DVector<f64>, s_g: &DMatrix<f64>) -> Result<f64, MetricError> {
    let mean_term = (mu_r - mu_g).norm_squared();
    let cross = trace_sqrt_product(s_r, s_g)?;
    Ok(mean_term + s_r.trace() + s_g.trace() - 2.0 * cross)
}

/// Fréchet distance between Gaussian fits of the two feature sets. If the
/// matrix root fails, both covariances get a small ridge and it is retried
/// once.
pub fn fid(real: &FeatureSet, gen: &FeatureSet) -> Result<f64, MetricError> {
    if real.dim() != gen.dim() {
        return Err(MetricError::ShapeMismatch(format!("dimensions {} and {}", real.dim(), gen.dim())));
    }
    if real.len() < 2 || gen.len() < 2 {
        return Err(MetricError::InsufficientSamples { need: 2, got: real.len().min(gen.len()) });
    }
    if real.len() < real.dim() || gen.len() < gen.dim() {
        log::warn!("fid with fewer samples than feature dimensions ({} / {} for d = {})", real.len(), gen.len(), real.dim());
    }
    let (mu_r, s_r) = mean_and_cov(real);
    let (mu_g, s_g) = mean_and_cov(gen);
    match fid_from_stats(&mu_r, &s_r, &mu_g, &s_g) {
        Err(MetricError::SingularCovariance(_)) => {
            let d = real.dim();
            let eps = 1e-6 * (s_r.trace() + s_g.trace()).max(1e-12) / d as f64;
            let ridge = DMatrix::<f64>::identity(d, d) * eps;
            fid_from_stats(&mu_r, &(&s_r + &ridge), &mu_g, &(&s_g + &ridge))
        }
        r => r,
    }
}

/// Mean distance between paired text and motion features.
pub fn mm_dist(text: &FeatureSet, motion: &FeatureSet) -> Result<f64, MetricError> {
    check_paired(text, motion)?;
    if text.is_empty() {
        return Err(MetricError::InsufficientSamples { need: 1, got: 0 });
    }
    Ok((0..text.len()).map(|i| dist(text, i, motion, i)).sum::<f64>() / text.len() as f64)
}

/// Mean distance between the i-th members of two disjoint random subsets of
/// size `subset`.
pub fn diversity(gen: &FeatureSet, subset: usize, seed: u64) -> Result<f64, MetricError> {
    if subset == 0 || 2 * subset > gen.len() {
        return Err(MetricError::InsufficientSamples { need: 2 * subset.max(1), got: gen.len() });
    }
    let mut idx = canonical_order(&[gen]);
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..subset).map(|i| dist(gen, idx[i], gen, idx[subset + i])).sum::<f64>() / subset as f64)
}

/// For each text, draws `2·pairs` features through `generate(text, draw)`
/// and averages the distance within consecutive pairs; then averages over
/// texts.
pub fn mmodality<E>(
    texts: usize,
    pairs: usize,
    mut generate: impl FnMut(usize, usize) -> Result<Vec<f64>, E>,
) -> Result<f64, E> {
    let mut total = 0.0;
    for t in 0..texts {
        let mut acc = 0.0;
        for p in 0..pairs {
            let a = generate(t, 2 * p)?;
            let b = generate(t, 2 * p + 1)?;
            acc += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        }
        total += acc / pairs.max(1) as f64;
    }
    Ok(total / texts.max(1) as f64)
}

/// Mean with a normal-approximation 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub half_width: f64,
}

impl Interval {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Interval { mean: f64::NAN, half_width: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Interval { mean, half_width: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Interval { mean, half_width: 1.96 * (var / n).sqrt() }
    }
}

impl std::fmt::Display for Interval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.half_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub r_precision: [Interval; 3],
    pub fid: Interval,
    pub mm_dist: Interval,
    pub diversity: Interval,
    pub mmodality: Option<Interval>,
    pub repeats: usize,
}

impl MetricReport {
    pub fn table(&self) -> String {
        let mm = self.mmodality.map_or("-".to_string(), |i| i.to_string());
        format!(
            "{:<14} {:<14} {:<14} {:<14} {:<14} {:<14} {:<14}\n{:<14} {:<14} {:<14} {:<14} {:<14} {:<14} {:<14}",
            "R-Prec top-1",
            "top-2",
            "top-3",
            "FID",
            "MM-Dist",
            "Diversity",
            "MModality",
            self.r_precision[0].to_string(),
            self.r_precision[1].to_string(),
            self.r_precision[2].to_string(),
            self.fid.to_string(),
            self.mm_dist.to_string(),
            self.diversity.to_string(),
            mm
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gauss(n: usize, d: usize, shift: f64, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); z + shift }).collect::<Vec<f64>>()).collect();
        FeatureSet::new(&rows, Source::Real).unwrap()
    }

    #[test]
    fn perfect_evaluator() {
        let f = gauss(64, 4, 0.0, 1);
        let r = r_precision(&f, &f, 32, 3, 0).unwrap();
        assert_eq!(r.top, [1.0; 3]);
    }

    #[test]
    fn too_few_for_a_batch() {
        let f = gauss(31, 2, 0.0, 1);
        assert!(matches!(r_precision(&f, &f, 32, 1, 0), Err(MetricError::InsufficientSamples { .. })));
        assert!(matches!(diversity(&f, 16, 0), Err(MetricError::InsufficientSamples { .. })));
    }

    #[test]
    fn fid_identical_and_mean_shift() {
        let a = gauss(500, 3, 0.0, 2);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        let mut b = a.clone();
        let m = [0.5, -1.0, 2.0];
        for mut r in b.data.row_iter_mut() {
            for (x, s) in r.iter_mut().zip(m) {
                *x += s;
            }
        }
        let want: f64 = m.iter().map(|v| v * v).sum();
        assert!((fid(&a, &b).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn commuting_trace_matches_eigen_oracle() {
        // diagonal covariances commute: Tr((AB)^{1/2}) = Σ √(a_i b_i)
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0, 0.25]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 1.0, 4.0]));
        let want = 3.0 + 2.0 + 1.0;
        assert!((trace_sqrt_product(&a, &b).unwrap() - want).abs() < 1e-8);
        // a shared rotation keeps them commuting
        let q = nalgebra::Rotation3::from_euler_angles(0.3, -0.7, 1.1).into_inner();
        let q = DMatrix::from_fn(3, 3, |i, j| q[(i, j)]);
        let ra = &q * &a * q.transpose();
        let rb = &q * &b * q.transpose();
        assert!((trace_sqrt_product(&ra, &rb).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn rank_deficient_covariance_is_handled() {
        let rows: Vec<Vec<f64>> = (0..50).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let a = FeatureSet::new(&rows, Source::Real).unwrap();
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
    }

    #[test]
    fn mm_dist_cases() {
        let a = FeatureSet::new(&[vec![0.0, 0.0]], Source::Text).unwrap();
        let b = FeatureSet::new(&[vec![3.0, 4.0]], Source::Generated).unwrap();
        assert_eq!(mm_dist(&a, &b).unwrap(), 5.0);
        let f = gauss(10, 3, 0.0, 3);
        assert_eq!(mm_dist(&f, &f).unwrap(), 0.0);
        let mut g = f.clone();
        g.data.add_scalar_mut(2.0);
        assert!((mm_dist(&f, &g).unwrap() - (12f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn diversity_cases() {
        let same = FeatureSet::new(&vec![vec![1.0, 2.0]; 10], Source::Generated).unwrap();
        assert_eq!(diversity(&same, 5, 4).unwrap(), 0.0);
        let two = FeatureSet::new(&[vec![1.0, 1.0], vec![4.0, 5.0]], Source::Generated).unwrap();
        for seed in 0..10 {
            // the only disjoint split of two points pairs them with each other
            assert_eq!(diversity(&two, 1, seed).unwrap(), 5.0);
        }
        let f = gauss(300, 4, 0.0, 5);
        assert_eq!(diversity(&f, 100, 9).unwrap(), diversity(&f, 100, 9).unwrap());
    }

    #[test]
    fn mmodality_cases() {
        let fixed = mmodality::<()>(3, MMODALITY_PAIRS, |_, _| Ok(vec![1.0, 2.0])).unwrap();
        assert_eq!(fixed, 0.0);
        let alt = mmodality::<()>(4, MMODALITY_PAIRS, |_, k| Ok(if k % 2 == 0 { vec![0.0, 0.0] } else { vec![6.0, 8.0] }))
            .unwrap();
        assert_eq!(alt, 10.0);
    }

    #[test]
    fn interval_of_constant_samples() {
        let i = Interval::from_samples(&[2.0; 20]);
        assert_eq!((i.mean, i.half_width), (2.0, 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn fid_symmetric_and_self_zero(seed in any::<u64>(), n in 20usize..60, d in 1usize..5) {
            let a = gauss(n, d, 0.0, seed);
            let b = gauss(n + 7, d, 0.3, seed ^ 1);
            prop_assert!(fid(&a, &a).unwrap() <= 1e-6);
            prop_assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() <= 1e-6);
            prop_assert!(fid(&a, &b).unwrap() >= -1e-6);
        }

        #[test]
        fn top_k_monotone(seed in any::<u64>()) {
            let m = gauss(70, 3, 0.0, seed);
            let t = gauss(70, 3, 0.0, seed ^ 7);
            let r = r_precision(&m, &t, 32, 4, seed).unwrap();
            prop_assert!(r.top[0] <= r.top[1] && r.top[1] <= r.top[2]);
            prop_assert!(r.top.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn order_invariance(seed in any::<u64>()) {
            let m = gauss(64, 3, 0.0, seed);
            let t = gauss(64, 3, 0.0, seed ^ 3);
            let mut perm: Vec<usize> = (0..64).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (pm, pt) = (m.select(&perm), t.select(&perm));
            prop_assert_eq!(r_precision(&m, &t, 32, 3, 1).unwrap().top, r_precision(&pm, &pt, 32, 3, 1).unwrap().top);
            prop_assert_eq!(diversity(&m, 20, 2).unwrap(), diversity(&pm, 20, 2).unwrap());
            prop_assert!((mm_dist(&m, &t).unwrap() - mm_dist(&pm, &pt).unwrap()).abs() < 1e-12);
            prop_assert!((fid(&m, &t).unwrap() - fid(&pm, &pt).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn psd_root_squares_back(seed in any::<u64>(), d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = DMatrix::from_fn(d, d + 2, |_, _| rng.random_range(-1.0..1.0));
            let s = &a * a.transpose();
            let r = sqrtm_psd(&s).unwrap();
            prop_assert!((&r * &r - &s).abs().max() < 1e-9);
        }
    }
}
