use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const PCA_TOL: f64 = 1e-10;
pub const PCA_MAX_ITER: usize = 10_000;

/// Principal axes of a row cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` unit-length axes of length `d`.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalues, largest first.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalue over total variance, per component.
    pub explained_ratio: Vec<f64>,
    /// `n x k` coordinates of the centered rows.
    pub projection: Vec<Vec<f64>>,
}

impl Pca {
    /// Maps projected coordinates back to the original space.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, axis) in coords.iter().zip(&self.components) {
            for (o, a) in out.iter_mut().zip(axis) {
                *o += c * a;
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Removes the components along `basis` (twice, for numerical safety).
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for b in basis {
            let c = dot(v, b);
            for (x, y) in v.iter_mut().zip(b) {
                *x -= c * y;
            }
        }
    }
}

/// Top-`k` eigenpairs of a symmetric positive semi-definite matrix by power
/// iteration, deflating by projecting out the axes already found.
fn top_eigenpairs(m: &[Vec<f64>], k: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    let n = m.len();
    let scale = m.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut rng = stream(0, Stream::Check);
    let mut found: Vec<(f64, Vec<f64>)> = Vec::with_capacity(k);
    for j in 0..k {
        let basis: Vec<Vec<f64>> = found.iter().map(|(_, v)| v.clone()).collect();
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        orthogonalize(&mut v, &basis);
        let len = norm(&v);
        for x in &mut v {
            *x /= len;
        }
        let mut converged = None;
        for iter in 0..PCA_MAX_ITER {
            let mut w = matvec(m, &v);
            orthogonalize(&mut w, &basis);
            let len = norm(&w);
            if len <= 1e-14 * scale.max(1e-300) {
                // Remaining spectrum is (numerically) zero: any unit vector
                // orthogonal to the found axes is an eigenvector.
                converged = Some((0.0, v.clone()));
                break;
            }
            for x in &mut w {
                *x /= len;
            }
            let delta = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            v = w;
            if delta < PCA_TOL {
                converged = Some((dot(&v, &matvec(m, &v)), v.clone()));
                break;
            }
            if iter + 1 == PCA_MAX_ITER {
                return Err(Error::Numeric(format!(
                    "power iteration for component {j} did not converge within {PCA_MAX_ITER} iterations \
                     (last step {delta:e})"
                )));
            }
        }
        let (lambda, mut axis) = converged.expect("loop either converges or errors");
        if let Some(first) = axis.iter().copied().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                for x in &mut axis {
                    *x = -*x;
                }
            }
        }
        found.push((lambda.max(0.0), axis));
    }
    Ok(found)
}

/// Projects mean-centered rows onto their top-`k` principal axes.
///
/// Works on the `d x d` covariance when `d <= n`, otherwise on the `n x n`
/// Gram matrix and maps its eigenvectors back to row space.
pub fn pca_project(rows: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Contract(format!("PCA needs at least 2 rows, got {n}")));
    }
    let d = rows[0].len();
    if d < 2 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Contract(format!(
            "PCA rows must share a length of at least 2 (first row has {d})"
        )));
    }
    if k == 0 || k > d {
        return Err(Error::Contract(format!("PCA component count {k} must be in 1..={d}")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Contract("PCA rows must be finite".into()));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let total: f64 = centered.iter().map(|r| dot(r, r)).sum::<f64>() / n as f64;

    let pairs = if d <= n || k > n {
        let mut cov = vec![vec![0.0; d]; d];
        for r in &centered {
            for i in 0..d {
                for j in i..d {
                    cov[i][j] += r[i] * r[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                cov[i][j] /= n as f64;
                cov[j][i] = cov[i][j];
            }
        }
        top_eigenpairs(&cov, k)?
    } else {
        let gram: Vec<Vec<f64>> = centered
            .iter()
            .map(|a| centered.iter().map(|b| dot(a, b) / n as f64).collect())
            .collect();
        let mut out = Vec::with_capacity(k);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for (lambda, u) in top_eigenpairs(&gram, k)? {
            let mut axis = vec![0.0; d];
            for (r, &c) in centered.iter().zip(&u) {
                for (a, v) in axis.iter_mut().zip(r) {
                    *a += c * v;
                }
            }
            orthogonalize(&mut axis, &basis);
            let len = norm(&axis);
            if len <= 1e-300 {
                return Err(Error::Numeric(format!(
                    "degenerate PCA axis: cloud of {n} rows spans fewer than {k} directions"
                )));
            }
            for a in &mut axis {
                *a /= len;
            }
            if let Some(first) = axis.iter().copied().find(|x| x.abs() > 1e-12) {
                if first < 0.0 {
                    axis.iter_mut().for_each(|a| *a = -*a);
                }
            }
            basis.push(axis.clone());
            out.push((lambda, axis));
        }
        out
    };
    let (eigenvalues, components): (Vec<f64>, Vec<Vec<f64>>) = pairs.into_iter().unzip();
    let explained_ratio = eigenvalues
        .iter()
        .map(|l| if total > 0.0 { l / total } else { 0.0 })
        .collect();
    let projection = centered
        .iter()
        .map(|r| components.iter().map(|c| dot(r, c)).collect())
        .collect();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        explained_ratio,
        projection,
    })
}

/// Mean pairwise L2 distance inside each label (averaged over labels) and
/// across labels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separation {
    pub within: f64,
    pub between: f64,
}

pub fn cluster_separation<L: Ord + Clone>(rows: &[Vec<f64>], labels: &[L]) -> Result<Separation> {
    if rows.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let mut groups: BTreeMap<L, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(l.clone()).or_default().push(i);
    }
    if groups.len() < 2 || groups.values().any(|g| g.len() < 2) {
        return Err(Error::Contract(format!(
            "separation needs at least 2 labels with at least 2 rows each, got group sizes {:?}",
            groups.values().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let dist = |a: usize, b: usize| {
        rows[a]
            .iter()
            .zip(&rows[b])
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut within_sum = 0.0;
    for g in groups.values() {
        let (mut s, mut c) = (0.0, 0usize);
        for (i, &a) in g.iter().enumerate() {
            for &b in &g[i + 1..] {
                s += dist(a, b);
                c += 1;
            }
        }
        within_sum += s / c as f64;
    }
    let (mut between, mut pairs) = (0.0, 0usize);
    for a in 0..rows.len() {
        for b in a + 1..rows.len() {
            if labels[a] != labels[b] {
                between += dist(a, b);
                pairs += 1;
            }
        }
    }
    Ok(Separation {
        within: within_sum / groups.len() as f64,
        between: between / pairs as f64,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn collinear_points() {
        let rows = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        let p = pca_project(&rows, 2).unwrap();
        assert_abs_diff_eq!(p.explained_ratio[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.explained_ratio[1], 0.0, epsilon = 1e-12);
        let s5 = 5f64.sqrt();
        assert_abs_diff_eq!(p.components[0][0], 1.0 / s5, epsilon = 1e-9);
        assert_abs_diff_eq!(p.components[0][1], 2.0 / s5, epsilon = 1e-9);
    }

    #[test]
    fn square_corners_split_variance() {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let p = pca_project(&rows, 2).unwrap();
        assert_abs_diff_eq!(p.explained_ratio[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p.explained_ratio[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn shift_invariant_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| vec![rng.random_range(-2.0..2.0) * 3.0, rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3)])
            .collect();
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v + 7.5).collect()).collect();
        let a = pca_project(&rows, 2).unwrap();
        let b = pca_project(&shifted, 2).unwrap();
        for (ra, rb) in a.projection.iter().zip(&b.projection) {
            for (x, y) in ra.iter().zip(rb) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn full_rank_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let scales = [8.0, 4.0, 2.0, 1.0];
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let p = pca_project(&rows, 4).unwrap();
        for (r, c) in rows.iter().zip(&p.projection) {
            for (a, b) in r.iter().zip(p.reconstruct(c)) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-8);
            }
        }
        assert_abs_diff_eq!(p.explained_ratio.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn wide_rows_use_gram_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|i| (0..40).map(|j| if j % 5 == i { 3.0 } else { 0.0 } + rng.random_range(-0.1..0.1)).collect())
            .collect();
        let wide = pca_project(&rows, 2).unwrap();
        // Same cloud through the covariance path.
        let mut cov = vec![vec![0.0; 40]; 40];
        let mean: Vec<f64> = (0..40).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 5.0).collect();
        for r in &rows {
            for i in 0..40 {
                for j in 0..40 {
                    cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / 5.0;
                }
            }
        }
        let direct = top_eigenpairs(&cov, 2).unwrap();
        for ((l, v), (lw, vw)) in direct.iter().zip(wide.eigenvalues.iter().zip(&wide.components)) {
            assert_abs_diff_eq!(l, lw, epsilon = 1e-8);
            for (a, b) in v.iter().zip(vw) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn separation_examples() {
        let rows = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![10.0, 0.0], vec![10.0, 0.0]];
        let s = cluster_separation(&rows, &["a", "a", "b", "b"]).unwrap();
        assert_eq!((s.within, s.between), (0.0, 10.0));
        let same = vec![vec![1.0, 2.0]; 4];
        let s = cluster_separation(&same, &["a", "a", "b", "b"]).unwrap();
        assert_eq!(s.within, s.between);
        assert!(matches!(cluster_separation(&rows, &["a", "a", "a", "b"]), Err(Error::Contract(_))));
        assert!(matches!(cluster_separation(&rows, &["a"; 4]), Err(Error::Contract(_))));
    }
}
