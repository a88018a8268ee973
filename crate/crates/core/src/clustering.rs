//! Lloyd's K-means with k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TataError};
use crate::exec::Execution;
use crate::numerics::{l2_normalize, mean_vector, squared_distance, Embedding, Role};

pub const MAX_ITERATIONS: usize = 300;
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Embedding>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step, in iteration order.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

impl ClusterModel {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter(move |(_, &a)| a == cluster)
            .map(|(i, _)| i)
    }
}

/// Index and squared distance of the nearest centroid, lowest index on ties.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, squared_distance(point, &centroids[0]));
    for (k, c) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

pub fn assign(point: &Embedding, centroids: &[Embedding]) -> Result<usize> {
    let first = centroids.first().ok_or(TataError::EmptyCentroids)?;
    if let Some(bad) = centroids.iter().find(|c| c.dim() != point.dim()) {
        return Err(TataError::DimensionMismatch {
            expected: point.dim(),
            actual: bad.dim(),
        });
    }
    let mut best = (0, squared_distance(point.as_slice(), first.as_slice()));
    for (k, c) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(point.as_slice(), c.as_slice());
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best.0)
}

/// Mean of the members, re-normalized to unit length.
pub fn update_centroid(members: &[&Embedding]) -> Result<Embedding> {
    let first = members.first().ok_or(TataError::EmptyMembers)?;
    let mean = mean_vector(members.iter().map(|m| m.as_slice()))?;
    l2_normalize(&mean, first.role())
}

fn plus_plus_seeds(points: &[&[f64]], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![false; points.len()];
    let first = rng.random_range(0..points.len());
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| squared_distance(p, &centroids[0]))
        .collect();
    while centroids.len() < n {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if *w > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `acc` just short of `target`
            pick.unwrap_or_else(|| d2.iter().rposition(|w| *w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..points.len()).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        centroids.push(points[next].to_vec());
        let c = centroids.last().unwrap();
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(squared_distance(p, c));
        }
    }
    centroids
}

/// Gives every empty cluster the point currently farthest from its centroid.
fn repair_empty(
    assignments: &mut [usize],
    dists: &mut [f64],
    centroids: &mut [Vec<f64>],
    points: &[&[f64]],
) {
    let n = centroids.len();
    loop {
        let mut sizes = vec![0usize; n];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut donor = None;
        for (i, &d) in dists.iter().enumerate() {
            if sizes[assignments[i]] > 1 && donor.is_none_or(|(_, best)| d > best) {
                donor = Some((i, d));
            }
        }
        let (i, _) = donor.expect("points.len() >= n guarantees a donor");
        assignments[i] = empty;
        dists[i] = 0.0;
        centroids[empty] = points[i].to_vec();
    }
}

pub fn kmeans(points: &[Embedding], n: usize, seed: u64) -> Result<ClusterModel> {
    kmeans_with(points, n, seed, Execution::default())
}

pub fn kmeans_with(
    points: &[Embedding],
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<ClusterModel> {
    if n == 0 {
        return Err(TataError::InvalidN(n));
    }
    if points.len() < n {
        return Err(TataError::TooFewPoints {
            needed: n,
            got: points.len(),
        });
    }
    let dim = points[0].dim();
    if let Some(bad) = points.iter().find(|p| p.dim() != dim) {
        return Err(TataError::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }
    let role = points[0].role();
    let rows: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(&rows, n, &mut rng);

    let mut history = Vec::new();
    let mut assignments = vec![0usize; rows.len()];
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let scan = exec.map(&rows, |p| nearest(p, &centroids));
        let mut dists: Vec<f64> = scan.iter().map(|s| s.1).collect();
        for (a, s) in assignments.iter_mut().zip(&scan) {
            *a = s.0;
        }
        repair_empty(&mut assignments, &mut dists, &mut centroids, &rows);
        history.push(dists.iter().sum());

        let mut sums = vec![vec![0.0; dim]; n];
        let mut counts = vec![0usize; n];
        for (p, &a) in rows.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(*p) {
                *s += x;
            }
        }
        let mut movement = 0.0f64;
        for ((c, s), &count) in centroids.iter_mut().zip(sums).zip(&counts) {
            let inv = 1.0 / count as f64;
            let next: Vec<f64> = s.into_iter().map(|x| x * inv).collect();
            movement = movement.max(squared_distance(c, &next).sqrt());
            *c = next;
        }
        if movement < TOLERANCE {
            break;
        }
    }

    let inertia = rows
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| squared_distance(p, &centroids[a]))
        .sum();
    Ok(ClusterModel {
        centroids: centroids
            .into_iter()
            .map(|c| Embedding::from_raw(c, role))
            .collect::<Result<_>>()?,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
    })
}

/// Adjusted Rand index between two labelings of the same points.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let c2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&n| c2(n)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Unit-normalizes raw centroids for use as prototypes.
pub fn normalized_centroids(model: &ClusterModel, role: Role) -> Result<Vec<Embedding>> {
    model
        .centroids
        .iter()
        .map(|c| l2_normalize(c.as_slice(), role))
        .collect()
}
