//! Lloyd's algorithm with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::matrix::{squared_distance, Matrix};
use super::NumError;

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansModel {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after the initial assignment and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

/// Index of the nearest row of `centroids` to `point`; ties go to the lowest index.
pub fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = squared_distance(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn kmeans(points: &Matrix, c: usize, seed: u64) -> Result<KMeansModel, NumError> {
    if c == 0 {
        return Err(NumError::ZeroClusters);
    }
    if points.rows() < c {
        return Err(NumError::TooFewPoints {
            points: points.rows(),
            clusters: c,
        });
    }
    if !points.is_finite() {
        return Err(NumError::NonFinite("kmeans input"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, c, &mut rng);
    let (mut assignments, mut dists) = assign(points, &centroids);
    let mut history = vec![dists.iter().sum::<f64>()];
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        update(points, &assignments, &dists, &mut centroids);
        let (next, next_dists) = assign(points, &centroids);
        history.push(next_dists.iter().sum());
        let stable = next == assignments;
        assignments = next;
        dists = next_dists;
        if stable {
            break;
        }
    }

    Ok(KMeansModel {
        centroids,
        inertia: dists.iter().sum(),
        assignments,
        iterations,
        inertia_history: history,
    })
}

fn plus_plus_init(points: &Matrix, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < c {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every point coincides with a chosen centroid
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    points.gather_rows(&chosen)
}

fn assign(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    (0..points.rows())
        .map(|i| nearest(points.row(i), centroids))
        .unzip()
}

/// Moves each centroid to the mean of its members. An empty cluster is
/// re-seeded at the point farthest from its assigned centroid.
fn update(points: &Matrix, assignments: &[usize], dists: &[f64], centroids: &mut Matrix) {
    let (c, dim) = centroids.shape();
    let mut sums = Matrix::zeros(c, dim);
    let mut counts = vec![0usize; c];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, &x) in sums.row_mut(a).iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    let mut taken: Vec<usize> = Vec::new();
    for k in 0..c {
        if counts[k] > 0 {
            let inv = 1.0 / counts[k] as f64;
            for (dst, &s) in centroids.row_mut(k).iter_mut().zip(sums.row(k)) {
                *dst = s * inv;
            }
        } else {
            let mut far = None;
            let mut far_d = -1.0;
            for (i, &d) in dists.iter().enumerate() {
                if d > far_d && !taken.contains(&i) {
                    far = Some(i);
                    far_d = d;
                }
            }
            let i = far.expect("at least as many points as clusters");
            taken.push(i);
            centroids.row_mut(k).copy_from_slice(points.row(i));
        }
    }
}
