use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::dense::DenseMatrix;
use crate::numerics::rng::derive_rng;

#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub centers: DenseMatrix,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Within-cluster sum of squares after each assignment step of the
    /// winning restart; non-increasing by construction.
    pub inertia_trace: Vec<f64>,
}

/// Lloyd's algorithm with k-means++ seeding, restarted `n_init` times; the
/// restart with the lowest inertia wins. Empty clusters are reseeded to the
/// point currently farthest from its own center. Deterministic per seed.
pub fn kmeans(
    points: &DenseMatrix,
    k: usize,
    n_init: usize,
    max_iter: usize,
    seed: u64,
) -> Result<KmeansResult> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "kmeans needs 1 <= k <= n_points, got k={k} for {n} points"
        )));
    }
    let mut best: Option<KmeansResult> = None;
    for run in 0..n_init.max(1) {
        let mut rng = derive_rng(seed, "kmeans", run as u64);
        let result = lloyd(points, k, max_iter, &mut rng);
        if best.as_ref().map_or(true, |b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd(points: &DenseMatrix, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> KmeansResult {
    let n = points.rows();
    let d = points.cols();
    let mut centers = plus_plus_init(points, k, rng);
    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();

    for _ in 0..max_iter.max(1) {
        let (new_assignment, inertia) = assign(points, &centers);
        trace.push(inertia);
        let converged = new_assignment == assignment;
        assignment = new_assignment;
        if converged {
            break;
        }

        // means of each cluster
        let mut sums = DenseMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        let mut claimed = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                for (ctr, &s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *ctr = s / counts[c] as f64;
                }
            } else {
                // reseed to the farthest unclaimed point
                let mut far_idx = 0;
                let mut far_d = f64::NEG_INFINITY;
                for i in 0..n {
                    if claimed[i] {
                        continue;
                    }
                    let dist = sq_dist(points.row(i), centers.row(assignment[i]));
                    if dist > far_d {
                        far_d = dist;
                        far_idx = i;
                    }
                }
                claimed[far_idx] = true;
                let row = points.row(far_idx).to_vec();
                centers.row_mut(c).copy_from_slice(&row);
                assignment[far_idx] = c;
            }
        }
    }

    let (assignment, inertia) = assign(points, &centers);
    trace.push(inertia);
    KmeansResult {
        centers,
        assignment,
        inertia,
        inertia_trace: trace,
    }
}

fn assign(points: &DenseMatrix, centers: &DenseMatrix) -> (Vec<usize>, f64) {
    let mut assignment = vec![0usize; points.rows()];
    let mut inertia = 0.0;
    for i in 0..points.rows() {
        let row = points.row(i);
        let mut best_c = 0;
        let mut best_d = f64::INFINITY;
        for c in 0..centers.rows() {
            let d = sq_dist(row, centers.row(c));
            if d < best_d {
                best_d = d;
                best_c = c;
            }
        }
        assignment[i] = best_c;
        inertia += best_d;
    }
    (assignment, inertia)
}

fn plus_plus_init(points: &DenseMatrix, k: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let n = points.rows();
    let d = points.cols();
    let mut centers = DenseMatrix::zeros(k, d);
    let mut chosen = vec![false; n];

    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centers.row_mut(0).copy_from_slice(points.row(first));

    let mut dist2: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centers.row(0)))
        .collect();

    for c in 1..k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            // all remaining mass is zero (duplicate points); take the first
            // point not yet chosen
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        let row = points.row(pick).to_vec();
        centers.row_mut(c).copy_from_slice(&row);
        for i in 0..n {
            let d_new = sq_dist(points.row(i), centers.row(c));
            if d_new < dist2[i] {
                dist2[i] = d_new;
            }
        }
    }
    centers
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}
