//! Dual-level self-supervision for the fusion stage: percentile pseudo
//! labels with Hungarian alignment, graph-structure similarity supervision,
//! and the self-training clustering objective.
//!
//! The plain functions here produce values for inference, tests, and
//! pseudo-label generation; training builds the same quantities on the tape
//! (the similarity pipeline reuses the tape ops directly, so both paths are
//! bit-identical).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::dense::DenseMatrix;
use crate::numerics::hungarian::hungarian;
use crate::numerics::sparse::CsrMatrix;
use crate::numerics::tape::{sharpen_target, soft_assign_forward, Tape};


/// Trainable cluster centers, one row per cluster.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterCenters(pub DenseMatrix);

/// Row-stochastic soft cluster assignments.
#[derive(Clone, Debug)]
pub struct AssignmentMatrix(DenseMatrix);

impl AssignmentMatrix {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn n_clusters(&self) -> usize {
        self.0.cols()
    }

    /// Per-row argmax with ties resolved to the lowest index.
    pub fn hard_labels(&self) -> Vec<usize> {
        (0..self.0.rows()).map(|i| row_argmax(self.0.row(i))).collect()
    }

    pub fn row_maxes(&self) -> Vec<f64> {
        (0..self.0.rows())
            .map(|i| self.0.row(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

fn row_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Student-t soft assignment (one degree of freedom):
/// `q_ij ∝ (1 + ||z_i - μ_j||²)^{-1}`.
pub fn soft_assign(z: &DenseMatrix, centers: &ClusterCenters) -> AssignmentMatrix {
    AssignmentMatrix(soft_assign_forward(z, &centers.0))
}

/// High-confidence nodes with their assignment labels. `aligned_labels` is
/// empty until [`align_labels`] maps the raw labels into the reference
/// clustering's label space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub node_ids: Vec<u32>,
    pub raw_labels: Vec<u32>,
    pub aligned_labels: Vec<u32>,
    pub threshold: f64,
    pub percentile: f64,
}

/// Selects nodes whose top assignment score reaches the nearest-rank
/// `m`-th percentile of all row maxima. At least one node always survives.
pub fn select_pseudo_labels(q: &AssignmentMatrix, m: f64) -> Result<PseudoLabelSet> {
    if !(0.0 < m && m < 100.0) {
        return Err(Error::InvalidInput(format!(
            "percentile must lie in (0, 100), got {m}"
        )));
    }
    let maxes = q.row_maxes();
    let n = maxes.len();
    let mut sorted = maxes.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // nearest-rank: the ceil(m/100 * n)-th smallest value, 1-indexed
    let rank = ((m / 100.0) * n as f64).ceil() as usize;
    let threshold = sorted[rank.clamp(1, n) - 1];

    let mut node_ids = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, &mx) in maxes.iter().enumerate() {
        if mx >= threshold {
            node_ids.push(i as u32);
            raw_labels.push(row_argmax(q.matrix().row(i)) as u32);
        }
    }
    debug_assert!(!node_ids.is_empty());
    Ok(PseudoLabelSet {
        node_ids,
        raw_labels,
        aligned_labels: Vec::new(),
        threshold,
        percentile: m,
    })
}

/// Relabels the pseudo labels into the reference clustering's label space
/// by maximum-agreement matching of the co-occurrence counts on the
/// selected nodes.
pub fn align_labels(
    mut pseudo: PseudoLabelSet,
    reference: &[usize],
    n_clusters: usize,
) -> PseudoLabelSet {
    let mut counts = DenseMatrix::zeros(n_clusters, n_clusters);
    for (&i, &y) in pseudo.node_ids.iter().zip(&pseudo.raw_labels) {
        let o = reference[i as usize];
        let y = y as usize;
        counts.set(y, o, counts.get(y, o) + 1.0);
    }
    let mapping = hungarian(&counts.scale(-1.0)).expect("square by construction");
    pseudo.aligned_labels = pseudo
        .raw_labels
        .iter()
        .map(|&y| mapping[y as usize] as u32)
        .collect();
    pseudo
}

/// Cross-entropy of the fused assignment against aligned pseudo labels.
pub fn pseudo_label_loss(q_fused: &AssignmentMatrix, pseudo: &PseudoLabelSet) -> Result<f64> {
    if pseudo.node_ids.is_empty() {
        return Err(Error::InvalidInput("empty pseudo-label set".into()));
    }
    assert_eq!(
        pseudo.aligned_labels.len(),
        pseudo.node_ids.len(),
        "pseudo labels must be aligned first"
    );
    let mut tape = Tape::new();
    let q = tape.constant(q_fused.0.clone());
    let loss = tape.nll_selected(q, &pseudo.node_ids, &pseudo.aligned_labels);
    Ok(tape.value(loss).as_scalar())
}

/// Pairwise similarity scores in `[0, 1]`, symmetric, unit diagonal.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix(DenseMatrix);

impl SimilarityMatrix {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }
}

/// Min-max scales each embedding dimension into `[0, 1]` (constant
/// dimensions become 0.5), L2-normalizes rows, and takes the Gram matrix.
/// All-zero scaled rows score 0 against everything; the diagonal is exact 1.
pub fn structure_similarity(z_fused: &DenseMatrix) -> SimilarityMatrix {
    let mut tape = Tape::new();
    let z = tape.constant(z_fused.clone());
    let scaled = tape.minmax_scale_cols(z);
    let unit = tape.row_normalize(scaled);
    let gram = tape.matmul_nt(unit, unit);
    let mut s = tape.value(gram).clone();
    for i in 0..s.rows() {
        s.set(i, i, 1.0);
    }
    SimilarityMatrix(s)
}

/// Dense cross-entropy of the similarity matrix against the self-loop
/// adjacency, averaged over all N² entries; logs are clamped.
pub fn structure_loss(s: &SimilarityMatrix, self_loop: &CsrMatrix) -> f64 {
    let mut tape = Tape::new();
    let scores = tape.constant(s.0.clone());
    let loss = tape.structure_bce(scores, self_loop);
    tape.value(loss).as_scalar()
}

/// Self-training KL divergence between the sharpened target distribution
/// and the assignment, averaged per node. The target is recomputed from the
/// assignment itself and treated as constant.
pub fn clustering_loss(q_fused: &AssignmentMatrix) -> f64 {
    let p = sharpen_target(&q_fused.0);
    let mut tape = Tape::new();
    let q = tape.constant(q_fused.0.clone());
    let loss = tape.kl_fixed_target(q, p);
    tape.value(loss).as_scalar()
}

/// `L = L_nl + L_ns + λ1 L_ssl + λ2 L_pq`.
pub fn total_loss(l_nl: f64, l_ns: f64, l_ssl: f64, l_pq: f64, lambda1: f64, lambda2: f64) -> f64 {
    l_nl + l_ns + lambda1 * l_ssl + lambda2 * l_pq
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::LOG_CLAMP;

    fn assignment(rows: &[Vec<f64>]) -> AssignmentMatrix {
        AssignmentMatrix(DenseMatrix::from_rows(rows))
    }

    #[test]
    fn single_center_assigns_everything_to_it() {
        let z = DenseMatrix::from_vec(3, 2, vec![0.0, 0.0, 1.0, 1.0, -2.0, 0.5]);
        let centers = ClusterCenters(DenseMatrix::from_vec(1, 2, vec![0.3, 0.3]));
        let q = soft_assign(&z, &centers);
        for &v in q.matrix().data() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn equidistant_point_gets_uniform_row() {
        let z = DenseMatrix::from_vec(1, 2, vec![0.0, 0.0]);
        let centers = ClusterCenters(DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, -1.0, 0.0]));
        let q = soft_assign(&z, &centers);
        assert!((q.matrix().get(0, 0) - 0.5).abs() < 1e-15);
        assert!((q.matrix().get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn distance_zero_and_one_gives_two_thirds_one_third() {
        // direct formula: kernels 1 and 1/2 normalize to 2/3, 1/3
        let z = DenseMatrix::from_vec(1, 1, vec![0.0]);
        let centers = ClusterCenters(DenseMatrix::from_vec(2, 1, vec![0.0, 1.0]));
        let q = soft_assign(&z, &centers);
        assert!((q.matrix().get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((q.matrix().get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn percentile_selection_matches_sort_oracle() {
        // row maxes 0.9, 0.5, 0.7, 0.95 at m=50: nearest rank 2 of 4
        // sorted gives threshold 0.7, selecting nodes 0, 2, 3
        let q = assignment(&[
            vec![0.9, 0.1],
            vec![0.5, 0.5],
            vec![0.7, 0.3],
            vec![0.95, 0.05],
        ]);
        let pseudo = select_pseudo_labels(&q, 50.0).unwrap();
        assert_eq!(pseudo.threshold, 0.7);
        assert_eq!(pseudo.node_ids, vec![0, 2, 3]);
        assert_eq!(pseudo.raw_labels, vec![0, 0, 0]);
    }

    #[test]
    fn tiny_percentile_selects_everyone() {
        let q = assignment(&[vec![0.9, 0.1], vec![0.6, 0.4], vec![0.2, 0.8]]);
        let pseudo = select_pseudo_labels(&q, 1e-9).unwrap();
        assert_eq!(pseudo.node_ids.len(), 3);
    }

    #[test]
    fn uniform_assignment_saturates_selection() {
        let q = assignment(&vec![vec![0.5, 0.5]; 4]);
        let pseudo = select_pseudo_labels(&q, 75.0).unwrap();
        assert_eq!(pseudo.node_ids.len(), 4);
    }

    #[test]
    fn selection_size_lower_bound_and_monotone_invariance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 37;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(0.05..0.95);
                vec![a, 1.0 - a]
            })
            .collect();
        let q = assignment(&rows);
        for &m in &[10.0, 30.0, 50.0, 80.0] {
            let pseudo = select_pseudo_labels(&q, m).unwrap();
            let lower = (n as f64) * (1.0 - m / 100.0) - 1.0;
            assert!(pseudo.node_ids.len() as f64 >= lower);

            // strictly monotone transform of all scores keeps the selection
            let transformed = assignment(
                &(0..n)
                    .map(|i| q.matrix().row(i).iter().map(|&v| (3.0 * v).tanh()).collect())
                    .collect::<Vec<_>>(),
            );
            let pseudo2 = select_pseudo_labels(&transformed, m).unwrap();
            assert_eq!(pseudo.node_ids, pseudo2.node_ids);
        }
    }

    #[test]
    fn alignment_is_identity_when_labelings_agree() {
        let pseudo = PseudoLabelSet {
            node_ids: vec![0, 1, 2, 3],
            raw_labels: vec![0, 1, 2, 1],
            aligned_labels: Vec::new(),
            threshold: 0.5,
            percentile: 50.0,
        };
        let reference = vec![0usize, 1, 2, 1];
        let aligned = align_labels(pseudo, &reference, 3);
        assert_eq!(aligned.aligned_labels, vec![0, 1, 2, 1]);
    }

    #[test]
    fn alignment_recovers_a_permutation() {
        // raw labels are a fixed permutation of the reference: 0->2, 1->0, 2->1
        let reference = vec![0usize, 0, 1, 1, 2, 2];
        let raw: Vec<u32> = reference.iter().map(|&o| [2u32, 0, 1][o]).collect();
        let pseudo = PseudoLabelSet {
            node_ids: (0..6).collect(),
            raw_labels: raw,
            aligned_labels: Vec::new(),
            threshold: 0.5,
            percentile: 50.0,
        };
        let aligned = align_labels(pseudo, &reference, 3);
        let got: Vec<usize> = aligned.aligned_labels.iter().map(|&v| v as usize).collect();
        assert_eq!(got, reference);
    }

    #[test]
    fn alignment_beats_every_enumerated_permutation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let n = 20;
        let c = 3;
        let reference: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let raw: Vec<u32> = (0..n).map(|_| rng.gen_range(0..c) as u32).collect();
        let pseudo = PseudoLabelSet {
            node_ids: (0..n as u32).collect(),
            raw_labels: raw.clone(),
            aligned_labels: Vec::new(),
            threshold: 0.0,
            percentile: 50.0,
        };
        let aligned = align_labels(pseudo, &reference, c);
        let agreement = aligned
            .aligned_labels
            .iter()
            .zip(&reference)
            .filter(|(&a, &b)| a as usize == b)
            .count();

        let perms = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let best = perms
            .iter()
            .map(|p| {
                raw.iter()
                    .zip(&reference)
                    .filter(|(&y, &o)| p[y as usize] == o)
                    .count()
            })
            .max()
            .unwrap();
        assert_eq!(agreement, best);
    }

    #[test]
    fn agreeing_one_hot_assignment_has_zero_pseudo_loss() {
        let q = assignment(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let pseudo = PseudoLabelSet {
            node_ids: vec![0, 1],
            raw_labels: vec![0, 1],
            aligned_labels: vec![0, 1],
            threshold: 0.9,
            percentile: 50.0,
        };
        let loss = pseudo_label_loss(&q, &pseudo).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn uniform_assignment_pseudo_loss_is_ln_c() {
        let c = 4;
        let q = assignment(&vec![vec![1.0 / c as f64; c]; 3]);
        let pseudo = PseudoLabelSet {
            node_ids: vec![0, 1, 2],
            raw_labels: vec![0, 1, 2],
            aligned_labels: vec![0, 1, 2],
            threshold: 0.0,
            percentile: 50.0,
        };
        let loss = pseudo_label_loss(&q, &pseudo).unwrap();
        assert!((loss - (c as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn pseudo_loss_matches_scalar_summation_oracle() {
        let rows = vec![
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.3, 0.3, 0.4],
            vec![0.25, 0.5, 0.25],
            vec![0.6, 0.15, 0.25],
        ];
        let q = assignment(&rows);
        let pseudo = PseudoLabelSet {
            node_ids: vec![0, 2, 4],
            raw_labels: vec![0, 2, 0],
            aligned_labels: vec![0, 2, 0],
            threshold: 0.0,
            percentile: 50.0,
        };
        let loss = pseudo_label_loss(&q, &pseudo).unwrap();
        let oracle = -(rows[0][0].ln() + rows[2][2].ln() + rows[4][0].ln()) / 3.0;
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_have_unit_similarity() {
        let z = DenseMatrix::from_rows(&[
            vec![0.2, 0.8, 0.5],
            vec![0.2, 0.8, 0.5],
            vec![0.9, 0.1, 0.0],
        ]);
        let s = structure_similarity(&z);
        assert!((s.matrix().get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(s.matrix().get(0, 0), 1.0);
    }

    #[test]
    fn disjoint_support_rows_have_zero_similarity() {
        // both columns vary, so min-max scaling keeps the supports disjoint
        let z = DenseMatrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ]);
        let s = structure_similarity(&z);
        assert_eq!(s.matrix().get(0, 2), 0.0);
        assert_eq!(s.matrix().get(2, 0), 0.0);
        assert_eq!(s.matrix().get(0, 1), 1.0);
    }

    #[test]
    fn similarity_matches_cosine_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let z = DenseMatrix::from_vec(4, 3, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let s = structure_similarity(&z);

        // direct oracle: min-max per column, then cosine of rows
        let mut scaled = z.clone();
        for c in 0..3 {
            let col: Vec<f64> = (0..4).map(|r| z.get(r, c)).collect();
            let (mn, mx) = (
                col.iter().cloned().fold(f64::INFINITY, f64::min),
                col.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            for r in 0..4 {
                scaled.set(r, c, (z.get(r, c) - mn) / (mx - mn));
            }
        }
        for i in 0..4 {
            for j in 0..4 {
                let (ri, rj) = (scaled.row(i), scaled.row(j));
                let dot: f64 = ri.iter().zip(rj).map(|(&a, &b)| a * b).sum();
                let ni = ri.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nj = rj.iter().map(|v| v * v).sum::<f64>().sqrt();
                let expect = if i == j { 1.0 } else { dot / (ni * nj) };
                assert!((s.matrix().get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_is_symmetric_and_cosine_scale_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let scaled = DenseMatrix::from_vec(5, 3, (0..15).map(|_| rng.gen_range(0.0..1.0)).collect());

        let cosine_gram = |m: &DenseMatrix| {
            let mut tape = Tape::new();
            let v = tape.constant(m.clone());
            let u = tape.row_normalize(v);
            let g = tape.matmul_nt(u, u);
            tape.value(g).clone()
        };
        let a = cosine_gram(&scaled);
        let b = cosine_gram(&scaled.scale(3.7));
        for i in 0..5 {
            for j in 0..5 {
                assert!((a.get(i, j) - b.get(i, j)).abs() < 1e-12);
                assert!((a.get(i, j) - a.get(j, i)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn structure_loss_of_half_everywhere_is_ln_two() {
        let n = 3;
        let mut s = DenseMatrix::from_vec(n, n, vec![0.5; n * n]);
        for i in 0..n {
            s.set(i, i, 0.5);
        }
        // target: ring 0-1-2 with self-loops
        let mut triplets = vec![(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0), (0, 2, 1.0), (2, 0, 1.0)];
        for i in 0..n {
            triplets.push((i, i, 1.0));
        }
        let adj = CsrMatrix::from_triplets(n, triplets);
        // the diagonal is overridden to exactly 1, contributing
        // -ln(1 - LOG_CLAMP) each instead of ln 2
        let loss = structure_loss(&SimilarityMatrix(s), &adj);
        let n2 = (n * n) as f64;
        let expect = ((n2 - n as f64) * std::f64::consts::LN_2
            + n as f64 * -(1.0 - LOG_CLAMP).ln())
            / n2;
        assert!((loss - expect).abs() < 1e-12, "loss {loss}, expect {expect}");
    }

    #[test]
    fn structure_loss_matches_double_sum_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let n = 4;
        let z = DenseMatrix::from_vec(n, 3, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let s = structure_similarity(&z);
        let mut triplets = vec![(0, 1, 1.0), (1, 0, 1.0), (2, 3, 1.0), (3, 2, 1.0)];
        for i in 0..n {
            triplets.push((i, i, 1.0));
        }
        let adj = CsrMatrix::from_triplets(n, triplets);
        let loss = structure_loss(&s, &adj);

        let mut oracle = 0.0;
        for i in 0..n {
            for j in 0..n {
                let a = adj.get(i, j);
                let sij = s.matrix().get(i, j).clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                oracle += -a * sij.ln() - (1.0 - a) * (1.0 - sij).ln();
            }
        }
        oracle /= (n * n) as f64;
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn one_hot_assignment_is_a_clustering_loss_fixed_point() {
        let q = assignment(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert!(clustering_loss(&q).abs() < 1e-12);
    }

    #[test]
    fn uniform_assignment_is_a_clustering_loss_fixed_point() {
        let q = assignment(&vec![vec![0.25; 4]; 5]);
        assert!(clustering_loss(&q).abs() < 1e-12);
    }

    #[test]
    fn clustering_loss_matches_p_then_kl_oracle() {
        let rows = vec![
            vec![0.7, 0.3],
            vec![0.4, 0.6],
            vec![0.9, 0.1],
            vec![0.2, 0.8],
        ];
        let q = assignment(&rows);
        let loss = clustering_loss(&q);

        // oracle: compute P then KL by scalar loops
        let f: Vec<f64> = (0..2).map(|j| rows.iter().map(|r| r[j]).sum()).collect();
        let mut oracle = 0.0;
        for r in &rows {
            let w: Vec<f64> = (0..2).map(|j| r[j] * r[j] / f[j]).collect();
            let sum: f64 = w.iter().sum();
            for j in 0..2 {
                let p = w[j] / sum;
                oracle += p * (p.ln() - r[j].ln());
            }
        }
        oracle /= rows.len() as f64;
        assert!((loss - oracle).abs() < 1e-12, "loss {loss} oracle {oracle}");
    }

    #[test]
    fn clustering_loss_is_nonnegative_on_random_assignments() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..40 {
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| {
                    let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.01..1.0)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect();
            assert!(clustering_loss(&assignment(&rows)) >= -1e-12);
        }
    }

    #[test]
    fn total_loss_weighs_terms_as_documented() {
        assert_eq!(total_loss(0.3, 0.2, 1.0, 0.5, 0.1, 1.0), 1.1);
        assert_eq!(total_loss(0.4, 0.6, 123.0, 99.0, 0.0, 0.0), 1.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0, 0.5, 0.5), 0.0);
    }
}
