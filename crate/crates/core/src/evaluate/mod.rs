//! Clustering evaluation: accuracy under optimal cluster-to-class matching,
//! normalized mutual information, and macro F1.

use crate::error::{Error, Result};
use crate::numerics::dense::DenseMatrix;
use crate::numerics::hungarian::hungarian;

/// A predicted clustering paired with ground truth.
#[derive(Clone, Debug)]
pub struct ClusteringResult {
    predicted: Vec<usize>,
    truth: Vec<usize>,
    n_classes: usize,
}

impl ClusteringResult {
    pub fn new(predicted: Vec<usize>, truth: Vec<usize>) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::InvalidInput(format!(
                "predicted ({}) and truth ({}) lengths differ",
                predicted.len(),
                truth.len()
            )));
        }
        if predicted.is_empty() {
            return Err(Error::InvalidInput("empty clustering".into()));
        }
        let max_pred = predicted.iter().max().copied().unwrap_or(0);
        let max_truth = truth.iter().max().copied().unwrap_or(0);
        Ok(Self {
            predicted,
            truth,
            n_classes: (max_pred.max(max_truth)) + 1,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Confusion counts zero-padded to a square over the union of id
    /// ranges: `counts[pred][truth]`.
    fn confusion(&self) -> Vec<Vec<usize>> {
        let c = self.n_classes;
        let mut counts = vec![vec![0usize; c]; c];
        for (&p, &t) in self.predicted.iter().zip(&self.truth) {
            counts[p][t] += 1;
        }
        counts
    }

    /// Optimal cluster-to-class bijection: `mapping[pred_id] = class_id`,
    /// maximizing total agreement.
    fn optimal_mapping(&self) -> Vec<usize> {
        let counts = self.confusion();
        let c = self.n_classes;
        let mut cost = DenseMatrix::zeros(c, c);
        for (p, row) in counts.iter().enumerate() {
            for (t, &n) in row.iter().enumerate() {
                cost.set(p, t, -(n as f64));
            }
        }
        hungarian(&cost).expect("square by construction")
    }
}

/// Fraction of nodes correctly labeled under the best cluster-to-class
/// bijection.
pub fn clustering_accuracy(r: &ClusteringResult) -> f64 {
    let mapping = r.optimal_mapping();
    let hits = r
        .predicted
        .iter()
        .zip(&r.truth)
        .filter(|(&p, &t)| mapping[p] == t)
        .count();
    hits as f64 / r.predicted.len() as f64
}

/// Mutual information normalized by the arithmetic mean of the two label
/// entropies. Returns 0 when either labeling is constant.
pub fn nmi(r: &ClusteringResult) -> f64 {
    let n = r.predicted.len() as f64;
    let counts = r.confusion();
    let c = r.n_classes;

    let pred_counts: Vec<usize> = (0..c).map(|p| counts[p].iter().sum()).collect();
    let truth_counts: Vec<usize> = (0..c).map(|t| (0..c).map(|p| counts[p][t]).sum()).collect();

    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&k| k > 0)
            .map(|&k| {
                let p = k as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let h_pred = entropy(&pred_counts);
    let h_truth = entropy(&truth_counts);
    if h_pred == 0.0 || h_truth == 0.0 {
        return 0.0;
    }

    let mut mi = 0.0;
    for p in 0..c {
        for t in 0..c {
            let joint = counts[p][t] as f64;
            if joint > 0.0 {
                let pj = joint / n;
                mi += pj * ((n * joint) / (pred_counts[p] as f64 * truth_counts[t] as f64)).ln();
            }
        }
    }
    2.0 * mi / (h_pred + h_truth)
}

/// Unweighted mean of per-class F1 after the same optimal matching as
/// [`clustering_accuracy`]. Classes never predicted contribute zero.
pub fn macro_f1(r: &ClusteringResult) -> f64 {
    let mapping = r.optimal_mapping();
    let c = r.n_classes;
    let mapped: Vec<usize> = r.predicted.iter().map(|&p| mapping[p]).collect();

    let mut f1_sum = 0.0;
    for class in 0..c {
        let tp = mapped
            .iter()
            .zip(&r.truth)
            .filter(|(&m, &t)| m == class && t == class)
            .count() as f64;
        let fp = mapped
            .iter()
            .zip(&r.truth)
            .filter(|(&m, &t)| m == class && t != class)
            .count() as f64;
        let fnc = mapped
            .iter()
            .zip(&r.truth)
            .filter(|(&m, &t)| m != class && t == class)
            .count() as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fnc > 0.0 { tp / (tp + fnc) } else { 0.0 };
        if precision + recall > 0.0 {
            f1_sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    f1_sum / c as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(pred: &[usize], truth: &[usize]) -> ClusteringResult {
        ClusteringResult::new(pred.to_vec(), truth.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let r = result(&[0, 1, 2, 0, 1], &[0, 1, 2, 0, 1]);
        assert_eq!(clustering_accuracy(&r), 1.0);
        assert!((nmi(&r) - 1.0).abs() < 1e-12);
        assert_eq!(macro_f1(&r), 1.0);
    }

    #[test]
    fn label_permutation_scores_one() {
        let truth = [0, 0, 1, 1, 2, 2];
        let pred = [2, 2, 0, 0, 1, 1];
        let r = result(&pred, &truth);
        assert_eq!(clustering_accuracy(&r), 1.0);
        assert!((nmi(&r) - 1.0).abs() < 1e-12);
        assert_eq!(macro_f1(&r), 1.0);
    }

    #[test]
    fn accuracy_matches_bijection_enumeration() {
        // permutation-enumeration oracle on a 10-node, 3-class instance
        let pred = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        let truth = [0, 0, 1, 1, 1, 2, 2, 2, 0, 1];
        let r = result(&pred, &truth);

        let perms3 = [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ];
        let oracle = perms3
            .iter()
            .map(|perm| {
                pred.iter()
                    .zip(&truth)
                    .filter(|(&p, &t)| perm[p] == t)
                    .count() as f64
                    / pred.len() as f64
            })
            .fold(0.0f64, f64::max);
        assert!((clustering_accuracy(&r) - oracle).abs() < 1e-12);
    }

    #[test]
    fn constant_labeling_has_zero_nmi() {
        let r = result(&[0, 0, 0, 0], &[0, 1, 0, 1]);
        assert_eq!(nmi(&r), 0.0);
    }

    #[test]
    fn nmi_matches_hand_summed_contingency() {
        // direct MI/entropy oracle on a fixed 8-node table
        let pred = [0, 0, 0, 1, 1, 1, 1, 0];
        let truth = [0, 0, 1, 1, 1, 1, 0, 0];
        let r = result(&pred, &truth);

        let n = 8.0f64;
        // contingency: pred 0 -> truth (3, 1); pred 1 -> truth (1, 3)
        let joint: [[f64; 2]; 2] = [[3.0, 1.0], [1.0, 3.0]];
        let pred_tot = [4.0, 4.0];
        let truth_tot = [4.0, 4.0];
        let mut mi = 0.0;
        for p in 0..2 {
            for t in 0..2 {
                let pj = joint[p][t] / n;
                mi += pj * ((n * joint[p][t]) / (pred_tot[p] * truth_tot[t])).ln();
            }
        }
        let h = -(0.5f64.ln()); // both marginals are (1/2, 1/2)
        let expect = 2.0 * mi / (h + h);
        assert!((nmi(&r) - expect).abs() < 1e-10);
    }

    #[test]
    fn missing_class_contributes_zero_f1() {
        // prediction never uses one cluster id; after padding and matching,
        // the unmatched class scores zero
        let pred = [0, 0, 0, 0];
        let truth = [0, 0, 1, 1];
        let r = result(&pred, &truth);
        let f1 = macro_f1(&r);
        // class 0: precision 1/2, recall 1 -> F1 = 2/3; class 1: absent -> 0
        assert!((f1 - (2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_matches_per_class_oracle() {
        // direct precision/recall computation on a fixed 10-node instance
        let pred = [0, 1, 1, 2, 2, 2, 0, 0, 1, 2];
        let truth = [0, 1, 1, 2, 2, 1, 0, 2, 1, 2];
        let r = result(&pred, &truth);

        let mapping = [0usize, 1, 2]; // identity is optimal here: 8/10 hits
        let mut f1_sum = 0.0;
        for class in 0..3 {
            let tp = pred
                .iter()
                .zip(&truth)
                .filter(|(&p, &t)| mapping[p] == class && t == class)
                .count() as f64;
            let fp = pred
                .iter()
                .zip(&truth)
                .filter(|(&p, &t)| mapping[p] == class && t != class)
                .count() as f64;
            let fnc = pred
                .iter()
                .zip(&truth)
                .filter(|(&p, &t)| mapping[p] != class && t == class)
                .count() as f64;
            let prec = tp / (tp + fp);
            let rec = tp / (tp + fnc);
            f1_sum += 2.0 * prec * rec / (prec + rec);
        }
        assert!((macro_f1(&r) - f1_sum / 3.0).abs() < 1e-10);
    }

    #[test]
    fn relabeling_invariance() {
        let truth = [0, 1, 2, 0, 1, 2, 1, 0];
        let pred = [1, 2, 2, 1, 0, 2, 0, 1];
        let relabeled: Vec<usize> = pred.iter().map(|&p| (p + 1) % 3).collect();
        let a = result(&pred, &truth);
        let b = result(&relabeled, &truth);
        assert!((clustering_accuracy(&a) - clustering_accuracy(&b)).abs() < 1e-12);
        assert!((nmi(&a) - nmi(&b)).abs() < 1e-12);
        assert!((macro_f1(&a) - macro_f1(&b)).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(ClusteringResult::new(vec![0, 1], vec![0]).is_err());
    }
}
