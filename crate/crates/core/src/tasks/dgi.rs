//! Mutual-information pretext task: a bilinear discriminator separates
//! (node embedding, graph readout) pairs from pairs built with corrupted
//! embeddings. Corruption is a row permutation of the encoder input,
//! reseeded each epoch by the trainer, so this task has no offline
//! supervision to freeze.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::params::ParameterSet;
use crate::numerics::tape::{BoundParams, Tape, Var};
use crate::tasks::{head_name, SslTask};

pub struct DgiTask {
    ones: Vec<f64>,
    zeros: Vec<f64>,
}

impl DgiTask {
    pub fn new(n_nodes: usize) -> Self {
        Self {
            ones: vec![1.0; n_nodes],
            zeros: vec![0.0; n_nodes],
        }
    }
}

impl SslTask for DgiTask {
    fn name(&self) -> &'static str {
        "dgi"
    }

    fn needs_corruption(&self) -> bool {
        true
    }

    fn init_heads(&self, dim: usize, params: &mut ParameterSet, rng: &mut ChaCha8Rng) {
        params.add_uniform(&head_name("dgi", "bilinear"), dim, dim, rng);
    }

    fn loss<'g>(
        &'g self,
        tape: &mut Tape<'g>,
        bound: &BoundParams,
        emb: Var,
        corrupted: Option<Var>,
    ) -> Var {
        let corrupted = corrupted.expect("dgi requires a corrupted embedding source");
        let m = bound.var(&head_name("dgi", "bilinear"));

        // readout: sigmoid of the mean clean embedding
        let mean = tape.mean_rows(emb);
        let readout = tape.sigmoid(mean);

        let pos_proj = tape.matmul(emb, m);
        let pos_scores = tape.matmul_nt(pos_proj, readout);
        let neg_proj = tape.matmul(corrupted, m);
        let neg_scores = tape.matmul_nt(neg_proj, readout);

        let pos_loss = tape.bce_with_logits(pos_scores, &self.ones);
        let neg_loss = tape.bce_with_logits(neg_scores, &self.zeros);
        tape.weighted_sum(vec![(pos_loss, 0.5), (neg_loss, 0.5)])
    }

    fn write_supervision(&self, _dir: &Path) -> Result<()> {
        Ok(()) // corruption is resampled per epoch; nothing to freeze
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dense::DenseMatrix;
    use crate::numerics::params::ParameterSet;
    use crate::numerics::tape::bind_params;
    use rand::SeedableRng;

    #[test]
    fn zero_discriminator_scores_ln_two() {
        // bilinear weights of zero drive every score through sigmoid(0)
        let task = DgiTask::new(4);
        let mut params = ParameterSet::new();
        params.add(&head_name("dgi", "bilinear"), DenseMatrix::zeros(3, 3));

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let emb = tape.leaf(DenseMatrix::from_vec(
            4,
            3,
            (0..12).map(|v| v as f64 * 0.1).collect(),
        ));
        let corrupted = tape.leaf(DenseMatrix::from_vec(
            4,
            3,
            (0..12).rev().map(|v| v as f64 * 0.1).collect(),
        ));
        let loss = task.loss(&mut tape, &bound, emb, Some(corrupted));
        let expect = std::f64::consts::LN_2;
        assert!((tape.value(loss).as_scalar() - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_reaches_the_bilinear_head() {
        let task = DgiTask::new(3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut params = ParameterSet::new();
        task.init_heads(2, &mut params, &mut rng);

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let emb = tape.leaf(DenseMatrix::from_vec(3, 2, vec![0.4, -0.2, 0.9, 0.1, -0.5, 0.3]));
        let corrupted = tape.leaf(DenseMatrix::from_vec(3, 2, vec![0.1, 0.3, -0.5, 0.9, 0.4, -0.2]));
        let loss = task.loss(&mut tape, &bound, emb, Some(corrupted));
        let grads = tape.backward(loss);
        let g = grads.get(bound.var(&head_name("dgi", "bilinear"))).unwrap();
        assert!(g.frobenius_norm() > 0.0);
    }
}
