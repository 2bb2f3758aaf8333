//! Seeded k-means, cosine silhouette and PCA by power iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gateway::cosine;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

/// k-means++ seeding followed by Lloyd iterations until assignments are
/// stable. Empty clusters are re-seeded with the point farthest from its
/// centroid. Requires `1 <= k <= points.len()`.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> KMeans {
    assert!(k >= 1 && k <= points.len(), "k must lie in 1..=n");
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid; take the first
            // unused index deterministically.
            (0..n)
                .find(|&i| !centroids.iter().any(|c| c == &points[i]))
                .unwrap_or(centroids.len())
        } else {
            let mut r = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            pick
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    let nearest = |p: &[f64], cs: &[Vec<f64>]| -> usize {
        let mut best = (0, f64::INFINITY);
        for (j, c) in cs.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best.0
    };
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let dim = points[0].len();
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(&points[a], &centroids[assignments[a]])
                            .total_cmp(&sq_dist(&points[b], &centroids[assignments[b]]))
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                centroids[j] = points[far].clone();
                assignments[far] = j;
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    KMeans {
        assignments,
        centroids,
        inertia,
        iterations,
    }
}

/// Mean silhouette under cosine distance. Singleton clusters score 0.
pub fn silhouette_cosine(points: &[Vec<f64>], assignments: &[usize]) -> f64 {
    let n = points.len();
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    if n < 2 || k < 2 {
        return 0.0;
    }
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    let mut total = 0.0;
    for i in 0..n {
        let ci = assignments[i];
        if sizes[ci] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[assignments[j]] += 1.0 - cosine(&points[i], &points[j]);
            }
        }
        let a = sums[ci] / (sizes[ci] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != ci && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        if b.is_finite() {
            let m = a.max(b);
            if m > 0.0 {
                total += (b - a) / m;
            }
        }
    }
    total / n as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm principal axes, by decreasing eigenvalue.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }
}

/// Population covariance matrix.
pub fn covariance(data: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = data.len() as f64;
    let d = data[0].len();
    let mut mean = vec![0.0; d];
    for x in data {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for x in data {
        let c: Vec<f64> = x.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..d {
            if c[i] == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i][j] += c[i] * c[j] / n;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    (mean, cov)
}

fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
    }
}

/// Leading eigenpairs of a symmetric positive semi-definite matrix by power
/// iteration with deflation. Iteration stops when successive unit vectors
/// differ by less than `tol`. Signs are fixed so the largest-magnitude
/// coordinate is positive.
pub fn top_eigenpairs(m: &[Vec<f64>], count: usize, tol: f64, max_iter: usize) -> Vec<(f64, Vec<f64>)> {
    let d = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut found: Vec<Vec<f64>> = Vec::new();
    let mut out = Vec::new();
    for k in 0..count.min(d) {
        // Deterministic start with no special symmetry.
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + ((i + 1) as f64 * 0.618_033_988_75 + k as f64).fract()).collect();
        orthogonalize(&mut v, &found);
        let nv = norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        let mut lambda = 0.0;
        for _ in 0..max_iter {
            let mut w = matvec(&a, &v);
            orthogonalize(&mut w, &found);
            let nw = norm(&w);
            if nw < 1e-300 {
                lambda = 0.0;
                break;
            }
            w.iter_mut().for_each(|x| *x /= nw);
            let diff = v.iter().zip(&w).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            v = w;
            lambda = nw;
            if diff < tol {
                break;
            }
        }
        // Rayleigh quotient for the final eigenvalue estimate.
        let av = matvec(m, &v);
        let rq: f64 = v.iter().zip(&av).map(|(x, y)| x * y).sum();
        if lambda > 0.0 {
            lambda = rq;
        }
        let (imax, _) = v
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, x)| if x.abs() > acc.1 + 1e-12 { (i, x.abs()) } else { acc });
        if v[imax] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..d {
            for j in 0..d {
                a[i][j] -= lambda * v[i] * v[j];
            }
        }
        found.push(v.clone());
        out.push((lambda, v));
    }
    out
}

pub fn pca(data: &[Vec<f64>], n_components: usize) -> Pca {
    let (mean, cov) = covariance(data);
    let pairs = top_eigenpairs(&cov, n_components, 1e-9, 5_000);
    Pca {
        mean,
        eigenvalues: pairs.iter().map(|p| p.0).collect(),
        components: pairs.into_iter().map(|p| p.1).collect(),
    }
}
