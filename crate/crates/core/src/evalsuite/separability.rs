use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    pub calinski_harabasz: f64,
    pub davies_bouldin: f64,
    pub euclid_centroid_dist: f64,
    pub mahalanobis_centroid_dist: f64,
    /// The covariance was singular and a ridge was added before inversion.
    pub mahalanobis_regularized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    /// Within-class scatter pooled over both clusters.
    #[default]
    Pooled,
    /// Covariance of all samples about the global mean.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMetric {
    Euclidean,
    Mahalanobis(CovarianceKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentroidDistance {
    pub distance: f64,
    pub regularized: bool,
}

struct Clusters {
    // Member row indices per cluster, clusters ordered by label value.
    members: Vec<Vec<usize>>,
    centroids: Array2<f64>,
}

fn group(x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Clusters> {
    if x.nrows() != labels.len() {
        return Err(Error::invalid_input(format!(
            "{} embeddings vs {} labels",
            x.nrows(),
            labels.len()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid_input("embeddings must be finite"));
    }
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::invalid_input("need at least two clusters"));
    }
    let members: Vec<Vec<usize>> = distinct
        .iter()
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == *c).collect())
        .collect();
    let mut centroids = Array2::zeros((members.len(), x.ncols()));
    for (j, m) in members.iter().enumerate() {
        centroids.row_mut(j).assign(&x.select(Axis(0), m).mean_axis(Axis(0)).unwrap());
    }
    Ok(Clusters { members, centroids })
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Between-cluster over within-cluster dispersion, each scaled by its
/// degrees of freedom.
pub fn calinski_harabasz(x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let c = group(x, labels)?;
    let (n, k) = (x.nrows(), c.members.len());
    if n <= k {
        return Err(Error::invalid_input("need more samples than clusters"));
    }
    let global = x.mean_axis(Axis(0)).unwrap();
    let mut between = 0.0;
    let mut within = 0.0;
    for (j, m) in c.members.iter().enumerate() {
        let cj = c.centroids.row(j);
        between += m.len() as f64 * sq_dist(cj, global.view());
        within += m.iter().map(|&i| sq_dist(x.row(i), cj)).sum::<f64>();
    }
    if within == 0.0 {
        return Err(Error::UndefinedMetric("within-cluster dispersion is zero".into()));
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Mean over clusters of the worst `(Sᵢ + Sⱼ) / Mᵢⱼ` ratio.
pub fn davies_bouldin(x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let c = group(x, labels)?;
    let k = c.members.len();
    let scatter: Vec<f64> = c
        .members
        .iter()
        .enumerate()
        .map(|(j, m)| m.iter().map(|&i| sq_dist(x.row(i), c.centroids.row(j)).sqrt()).sum::<f64>() / m.len() as f64)
        .collect();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let m = sq_dist(c.centroids.row(i), c.centroids.row(j)).sqrt();
            if m == 0.0 {
                return Err(Error::UndefinedMetric("two clusters share a centroid".into()));
            }
            worst = worst.max((scatter[i] + scatter[j]) / m);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

fn covariance(x: ArrayView2<'_, f64>, c: &Clusters, kind: CovarianceKind) -> DMatrix<f64> {
    let (n, d) = x.dim();
    let mut cov = DMatrix::zeros(d, d);
    let mut add = |row: Array1<f64>| {
        let v = DVector::from_iterator(d, row.into_iter());
        cov += &v * v.transpose();
    };
    let dof = match kind {
        CovarianceKind::Pooled => {
            for (j, m) in c.members.iter().enumerate() {
                for &i in m {
                    add(&x.row(i) - &c.centroids.row(j));
                }
            }
            n.saturating_sub(c.members.len())
        }
        CovarianceKind::Total => {
            let mean = x.mean_axis(Axis(0)).unwrap();
            for row in x.outer_iter() {
                add(&row - &mean);
            }
            n.saturating_sub(1)
        }
    };
    cov / dof.max(1) as f64
}

/// Distance between the two cluster centroids.
///
/// A singular covariance gets a ridge of `1e-6 · trace / d` and the result
/// is flagged as regularized.
pub fn intercentroid(x: ArrayView2<'_, f64>, labels: &[usize], metric: DistanceMetric) -> Result<CentroidDistance> {
    let c = group(x, labels)?;
    if c.members.len() != 2 {
        return Err(Error::invalid_input("centroid distance needs exactly two clusters"));
    }
    let diff = &c.centroids.row(0) - &c.centroids.row(1);
    let kind = match metric {
        DistanceMetric::Euclidean => {
            return Ok(CentroidDistance {
                distance: diff.dot(&diff).sqrt(),
                regularized: false,
            })
        }
        DistanceMetric::Mahalanobis(kind) => kind,
    };
    if diff.iter().all(|v| *v == 0.0) {
        return Ok(CentroidDistance {
            distance: 0.0,
            regularized: false,
        });
    }
    let d = x.ncols();
    let mut cov = covariance(x, &c, kind);
    let eig = cov.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.max();
    let min_eig = eig.eigenvalues.min();
    let regularized = max_eig <= 0.0 || min_eig <= max_eig * 1e-12;
    if regularized {
        let ridge = 1e-6 * cov.trace() / d as f64;
        if ridge <= 0.0 {
            return Err(Error::UndefinedMetric("covariance is identically zero".into()));
        }
        log::warn!("singular covariance; adding ridge {ridge:e}");
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
    }
    let delta = DVector::from_iterator(d, diff.into_iter());
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::UndefinedMetric("covariance is not positive definite".into()))?;
    let solved = chol.solve(&delta);
    Ok(CentroidDistance {
        distance: delta.dot(&solved).max(0.0).sqrt(),
        regularized,
    })
}

/// All separability indices for a two-class embedding.
pub fn separability_report(x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<SeparabilityReport> {
    let m = intercentroid(x, labels, DistanceMetric::Mahalanobis(CovarianceKind::Pooled))?;
    Ok(SeparabilityReport {
        calinski_harabasz: calinski_harabasz(x, labels)?,
        davies_bouldin: davies_bouldin(x, labels)?,
        euclid_centroid_dist: intercentroid(x, labels, DistanceMetric::Euclidean)?.distance,
        mahalanobis_centroid_dist: m.distance,
        mahalanobis_regularized: m.regularized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Box-Muller standard normal.
    fn normal(rng: &mut impl Rng) -> f64 {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn square() -> (Array2<f64>, Vec<usize>) {
        (array![[0.0, 0.0], [0.0, 2.0], [4.0, 0.0], [4.0, 2.0]], vec![0, 0, 1, 1])
    }

    fn blobs(rng: &mut ChaCha8Rng, n: usize, d: usize, sep: f64, spread: f64) -> (Array2<f64>, Vec<usize>) {
        let mut x = Array2::zeros((2 * n, d));
        let mut labels = Vec::new();
        for i in 0..2 * n {
            let c = i / n;
            for k in 0..d {
                x[[i, k]] = spread * normal(rng) + if k == 0 { c as f64 * sep } else { 0.0 };
            }
            labels.push(c);
        }
        (x, labels)
    }

    #[test]
    fn hand_computed_indices() {
        let (x, l) = square();
        assert_eq!(calinski_harabasz(x.view(), &l).unwrap(), 8.0);
        assert_eq!(davies_bouldin(x.view(), &l).unwrap(), 0.5);
        assert_eq!(intercentroid(x.view(), &l, DistanceMetric::Euclidean).unwrap().distance, 4.0);
    }

    #[test]
    fn zero_scatter_clusters() {
        let x = array![[0.0, 1.0], [3.0, 5.0]];
        assert_eq!(davies_bouldin(x.view(), &[0, 1]).unwrap(), 0.0);
        let dup = array![[0.0, 1.0], [0.0, 1.0], [3.0, 5.0], [3.0, 5.0]];
        assert!(matches!(
            calinski_harabasz(dup.view(), &[0, 0, 1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn coincident_centroids_are_undefined_for_db_and_zero_distance() {
        let x = array![[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]];
        let l = [0, 0, 1, 1];
        assert!(matches!(davies_bouldin(x.view(), &l), Err(Error::UndefinedMetric(_))));
        for m in [DistanceMetric::Euclidean, DistanceMetric::Mahalanobis(CovarianceKind::Pooled)] {
            assert_eq!(intercentroid(x.view(), &l, m).unwrap().distance, 0.0);
        }
    }

    #[test]
    fn separated_blobs_score_better_than_overlapping() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (far, lf) = blobs(&mut rng, 100, 3, 20.0, 0.5);
        let (near, ln) = blobs(&mut rng, 100, 3, 0.5, 1.0);
        assert!(calinski_harabasz(far.view(), &lf).unwrap() > 100.0);
        assert!(davies_bouldin(near.view(), &ln).unwrap() > davies_bouldin(far.view(), &lf).unwrap());
    }

    #[test]
    fn shuffled_labels_lower_ch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, l) = blobs(&mut rng, 50, 2, 3.0, 1.0);
        let truth = calinski_harabasz(x.view(), &l).unwrap();
        let mut shuffled = l.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        assert!(calinski_harabasz(x.view(), &shuffled).unwrap() < truth);
    }

    #[test]
    fn isotropic_mahalanobis_close_to_euclidean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, l) = blobs(&mut rng, 5000, 3, 2.0, 1.0);
        let e = intercentroid(x.view(), &l, DistanceMetric::Euclidean).unwrap().distance;
        let m = intercentroid(x.view(), &l, DistanceMetric::Mahalanobis(CovarianceKind::Pooled)).unwrap();
        assert!(!m.regularized);
        assert!((m.distance / e - 1.0).abs() < 0.02, "{} vs {e}", m.distance);
    }

    #[test]
    fn mahalanobis_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, l) = blobs(&mut rng, 40, 4, 1.5, 1.0);
        for kind in [CovarianceKind::Pooled, CovarianceKind::Total] {
            let metric = DistanceMetric::Mahalanobis(kind);
            let a = intercentroid(x.view(), &l, metric).unwrap().distance;
            let b = intercentroid((&x * 10.0).view(), &l, metric).unwrap().distance;
            assert!((a - b).abs() < 1e-6);
        }
        let e1 = intercentroid(x.view(), &l, DistanceMetric::Euclidean).unwrap().distance;
        let e10 = intercentroid((&x * 10.0).view(), &l, DistanceMetric::Euclidean).unwrap().distance;
        assert!((e10 - 10.0 * e1).abs() < 1e-9);
    }

    #[test]
    fn singular_covariance_is_regularized() {
        // Third coordinate is constant, so the covariance is rank-deficient.
        let x = array![[0.0, 0.0, 1.0], [1.0, 1.0, 1.0], [0.5, 0.0, 1.0], [3.0, 2.0, 1.0], [4.0, 3.0, 1.0], [3.5, 2.0, 1.0]];
        let m = intercentroid(x.view(), &[0, 0, 0, 1, 1, 1], DistanceMetric::Mahalanobis(CovarianceKind::Pooled)).unwrap();
        assert!(m.regularized && m.distance.is_finite() && m.distance > 0.0);
    }

    #[test]
    fn misaligned_and_single_cluster_inputs_are_rejected() {
        let (x, _) = square();
        assert!(calinski_harabasz(x.view(), &[0, 0, 1]).is_err());
        assert!(davies_bouldin(x.view(), &[0, 0, 0, 0]).is_err());
        assert!(intercentroid(x.view(), &[0, 1, 2, 2], DistanceMetric::Euclidean).is_err());
    }

    fn rotate(x: &Array2<f64>, theta: f64, shift: (f64, f64), scale: f64) -> Array2<f64> {
        let (c, s) = (theta.cos(), theta.sin());
        let mut out = x.clone();
        for mut r in out.outer_iter_mut() {
            let (a, b) = (r[0], r[1]);
            r[0] = scale * (c * a - s * b) + shift.0;
            r[1] = scale * (s * a + c * b) + shift.1;
        }
        out
    }

    proptest! {
        #[test]
        fn indices_invariant_under_similarity_transforms(
            seed in 0u64..1000,
            theta in 0.0f64..6.28,
            tx in -50.0f64..50.0,
            ty in -50.0f64..50.0,
            scale in 0.1f64..10.0
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sep = rng.gen_range(0.5..5.0);
            let (x, l) = blobs(&mut rng, 15, 2, sep, 1.0);
            let y = rotate(&x, theta, (tx, ty), scale);
            let (ch0, ch1) = (calinski_harabasz(x.view(), &l).unwrap(), calinski_harabasz(y.view(), &l).unwrap());
            let (db0, db1) = (davies_bouldin(x.view(), &l).unwrap(), davies_bouldin(y.view(), &l).unwrap());
            prop_assert!((ch0 - ch1).abs() <= 1e-7 * ch0.max(1.0));
            prop_assert!((db0 - db1).abs() <= 1e-7 * db0.max(1.0));
        }
    }
}
