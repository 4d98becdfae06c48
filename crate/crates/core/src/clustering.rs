//! k-means++ seeding, Lloyd refinement and the adjusted Rand index.

use rand::Rng;

use crate::cluster_layer::cluster_means;
use crate::error::{Error, Result};
use crate::scalar::{squared_distance, Scalar};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-9;
/// Seeded k-means++ restarts per [`cluster_tasks`] call.
pub const DEFAULT_RESTARTS: usize = 10;

/// `N >= 1` points of a common dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet<T> {
    points: Vec<Vec<T>>,
}

impl<T: Scalar> PointSet<T> {
    pub fn new(points: Vec<Vec<T>>) -> Result<Self> {
        let dim = points
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::Argument("point set is empty".into()))?;
        if let Some(p) = points.iter().find(|p| p.len() != dim) {
            return Err(Error::dim("point", dim, p.len()));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vec<T>] {
        &self.points
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusteringResult<T> {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<T>>,
    /// Total squared distance of points to their assigned centers.
    pub inertia: T,
    /// Refinement rounds performed.
    pub iterations: usize,
    /// Inertia after every assignment and every center update, in order.
    pub inertia_history: Vec<T>,
}

fn check_k<T: Scalar>(points: &PointSet<T>, k: usize) -> Result<()> {
    if k == 0 || k > points.len() {
        return Err(Error::Argument(format!(
            "cluster count {k} outside [1, {}]",
            points.len()
        )));
    }
    Ok(())
}

/// k-means++ seeding: the first center uniformly at random, every further one
/// with probability proportional to its squared distance from the nearest
/// chosen center. Returns indices into `points`.
pub fn kmeans_pp_seed<T: Scalar, R: Rng + ?Sized>(points: &PointSet<T>, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_k(points, k)?;
    let first = rng.random_range(0..points.len());
    kmeans_pp_seed_from(points, k, first, rng)
}

/// k-means++ seeding with a caller-chosen first center.
///
/// When every remaining point coincides with a chosen center (all weights
/// zero), the lowest-index unchosen point is taken.
pub fn kmeans_pp_seed_from<T: Scalar, R: Rng + ?Sized>(
    points: &PointSet<T>,
    k: usize,
    first: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_k(points, k)?;
    if first >= points.len() {
        return Err(Error::Argument(format!("first center {first} out of range")));
    }
    let pts = points.points();
    let mut chosen = vec![first];
    let mut is_chosen = vec![false; pts.len()];
    is_chosen[first] = true;
    let mut d2: Vec<f64> = pts.iter().map(|p| squared_distance(p, &pts[first]).as_f64()).collect();
    while chosen.len() < k {
        let total: f64 = d2
            .iter()
            .zip(&is_chosen)
            .filter(|(_, &c)| !c)
            .map(|(&d, _)| d)
            .sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if is_chosen[i] || d <= 0.0 {
                    continue;
                }
                pick = Some(i);
                acc += d;
                if target < acc {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            is_chosen.iter().position(|&c| !c).expect("k <= n")
        };
        chosen.push(next);
        is_chosen[next] = true;
        for (d, p) in d2.iter_mut().zip(pts) {
            *d = d.min(squared_distance(p, &pts[next]).as_f64());
        }
    }
    Ok(chosen)
}

/// Nearest center per point; ties go to the lowest center index.
fn assign_nearest<T: Scalar>(points: &[Vec<T>], centers: &[Vec<T>]) -> Vec<usize> {
    points
        .iter()
        .map(|p| {
            let mut best = 0;
            let mut best_d = squared_distance(p, &centers[0]);
            for (k, c) in centers.iter().enumerate().skip(1) {
                let d = squared_distance(p, c);
                if d < best_d {
                    best = k;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

fn inertia<T: Scalar>(points: &[Vec<T>], centers: &[Vec<T>], assignments: &[usize]) -> T {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &k)| squared_distance(p, &centers[k]))
        .sum()
}

/// Gives every empty cluster a point: the one farthest from its current
/// center among clusters that have more than one member.
fn repair_empty<T: Scalar>(points: &[Vec<T>], centers: &mut [Vec<T>], assignments: &mut [usize]) {
    let k = centers.len();
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, T)> = None;
        for (i, p) in points.iter().enumerate() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let d = squared_distance(p, &centers[a]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k <= n leaves a cluster with spare members");
        counts[assignments[i]] -= 1;
        counts[empty] = 1;
        assignments[i] = empty;
        centers[empty] = points[i].clone();
    }
}

/// Lloyd's algorithm from the given initial centers.
///
/// Stops when assignments no longer change, when no center moves by `tol` or
/// more, or after `max_iter` rounds. Empty clusters are reseeded, so all `K`
/// clusters are non-empty in the result.
pub fn lloyd_iterate<T: Scalar>(
    points: &PointSet<T>,
    initial_centers: Vec<Vec<T>>,
    max_iter: usize,
    tol: T,
) -> Result<ClusteringResult<T>> {
    let k = initial_centers.len();
    check_k(points, k)?;
    if let Some(c) = initial_centers.iter().find(|c| c.len() != points.dim()) {
        return Err(Error::dim("initial center", points.dim(), c.len()));
    }
    let pts = points.points();
    let mut centers = initial_centers;
    let mut assignments = assign_nearest(pts, &centers);
    repair_empty(pts, &mut centers, &mut assignments);
    let mut history = vec![inertia(pts, &centers, &assignments)];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let means = cluster_means(pts, &assignments, k);
        let mut moved = T::zero();
        for (c, m) in centers.iter_mut().zip(means) {
            let m = m.expect("repaired clusters are non-empty");
            moved = moved.max(squared_distance(c, &m).sqrt());
            *c = m;
        }
        history.push(inertia(pts, &centers, &assignments));
        let mut next = assign_nearest(pts, &centers);
        repair_empty(pts, &mut centers, &mut next);
        history.push(inertia(pts, &centers, &next));
        let unchanged = next == assignments;
        assignments = next;
        if unchanged || moved < tol {
            break;
        }
    }
    let inertia = *history.last().expect("history is non-empty");
    Ok(ClusteringResult {
        assignments,
        centers,
        inertia,
        iterations,
        inertia_history: history,
    })
}

/// k-means++ seeding followed by Lloyd refinement, best of [`DEFAULT_RESTARTS`] runs.
pub fn cluster_tasks<T: Scalar, R: Rng + ?Sized>(
    points: &PointSet<T>,
    k: usize,
    rng: &mut R,
) -> Result<ClusteringResult<T>> {
    cluster_tasks_with_restarts(points, k, DEFAULT_RESTARTS, rng)
}

/// Runs k-means++ seeding and Lloyd refinement `restarts` times from one
/// generator and keeps the lowest inertia (the earliest run on ties).
pub fn cluster_tasks_with_restarts<T: Scalar, R: Rng + ?Sized>(
    points: &PointSet<T>,
    k: usize,
    restarts: usize,
    rng: &mut R,
) -> Result<ClusteringResult<T>> {
    if restarts == 0 {
        return Err(Error::Argument("at least one restart is required".into()));
    }
    let mut best: Option<ClusteringResult<T>> = None;
    for _ in 0..restarts {
        let seeds = kmeans_pp_seed(points, k, rng)?;
        let centers = seeds.iter().map(|&i| points.points()[i].clone()).collect();
        let run = lloyd_iterate(points, centers, DEFAULT_MAX_ITER, T::lit(DEFAULT_TOL))?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts > 0"))
}

/// Adjusted Rand index between two labelings of the same items.
///
/// Two labelings that are both trivial (all one cluster, or all singletons)
/// have a zero denominator; they score 1.0 when they describe the same
/// partition and 0.0 otherwise.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "label vectors differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    let ka = a.iter().max().map_or(0, |&m| m + 1);
    let kb = b.iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let pairs = |m: u64| (m * m.saturating_sub(1) / 2) as f64;
    let index: f64 = table.iter().flatten().map(|&m| pairs(m)).sum();
    let sum_rows: f64 = rows.iter().map(|&m| pairs(m)).sum();
    let sum_cols: f64 = cols.iter().map(|&m| pairs(m)).sum();
    let total = pairs(n as u64);
    let expected = if total > 0.0 { sum_rows * sum_cols / total } else { 0.0 };
    let max_index = 0.5 * (sum_rows + sum_cols);
    let denom = max_index - expected;
    if denom == 0.0 {
        return Ok(if index == max_index { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / denom)
}
