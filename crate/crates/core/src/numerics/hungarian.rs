use crate::error::{Error, Result};
use crate::numerics::dense::DenseMatrix;

/// Minimum-cost assignment on a square cost matrix. Returns `perm` with
/// `perm[row] = column`, minimizing the total cost. O(n³) shortest
/// augmenting paths with potentials.
pub fn hungarian(cost: &DenseMatrix) -> Result<Vec<usize>> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::shape(
            "hungarian",
            format!("{n}x{n}"),
            format!("{}x{}", cost.rows(), cost.cols()),
        ));
    }
    if cost.has_non_finite() {
        return Err(Error::InvalidInput(
            "hungarian requires finite costs".into(),
        ));
    }
    if n == 0 {
        return Ok(Vec::new());
    }

    // 1-indexed potentials; p[j] = row matched to column j, 0 = unmatched.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            perm[p[j] - 1] = j - 1;
        }
    }
    Ok(perm)
}

/// Total cost of an assignment.
pub fn assignment_cost(cost: &DenseMatrix, perm: &[usize]) -> f64 {
    perm.iter()
        .enumerate()
        .map(|(i, &j)| cost.get(i, j))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all_permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for rest in all_permutations(n - 1) {
            for pos in 0..n {
                let mut p = rest.clone();
                p.insert(pos, n - 1);
                out.push(p);
            }
        }
        out
    }

    fn brute_force_cost(cost: &DenseMatrix) -> f64 {
        all_permutations(cost.rows())
            .into_iter()
            .map(|p| assignment_cost(cost, &p))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn identity_favoring_cost_yields_identity() {
        let cost = DenseMatrix::from_rows(&[
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ]);
        assert_eq!(hungarian(&cost).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn matches_brute_force_on_random_integer_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(2..=5);
            let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0..20) as f64).collect();
            let cost = DenseMatrix::from_vec(n, n, data);
            let perm = hungarian(&cost).unwrap();
            let total = assignment_cost(&cost, &perm);
            let oracle = brute_force_cost(&cost);
            assert!(
                (total - oracle).abs() < 1e-9,
                "hungarian {total}, oracle {oracle}, cost {cost:?}"
            );
        }
    }

    #[test]
    fn row_shift_leaves_optimum_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..10.0)).collect();
        let cost = DenseMatrix::from_vec(4, 4, data);
        let base = hungarian(&cost).unwrap();
        let mut shifted = cost.clone();
        for v in shifted.row_mut(2) {
            *v += 5.5;
        }
        assert_eq!(hungarian(&shifted).unwrap(), base);
    }

    #[test]
    fn non_square_is_an_error() {
        let cost = DenseMatrix::zeros(2, 3);
        assert!(hungarian(&cost).is_err());
    }
}
