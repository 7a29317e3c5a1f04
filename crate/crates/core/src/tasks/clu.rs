//! Attribute-clustering pretext task: predict a node's k-means cluster in
//! raw feature space.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::Graph;
use crate::numerics::kmeans::kmeans;
use crate::numerics::params::ParameterSet;
use crate::numerics::tape::{BoundParams, Tape, Var};
use crate::tasks::{head_name, write_csv, SslTask};

pub struct CluTask {
    labels: Vec<u32>,
    n_clusters: usize,
}

impl CluTask {
    pub fn generate(g: &Graph, n_clusters: usize, seed: u64) -> Result<Self> {
        let labels = make_clu_labels(g, n_clusters, seed)?;
        Ok(Self { labels, n_clusters })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

/// K-means on the raw feature matrix with ten restarts; labels are frozen.
pub fn make_clu_labels(g: &Graph, n_clusters: usize, seed: u64) -> Result<Vec<u32>> {
    let result = kmeans(g.features(), n_clusters, 10, 100, seed)?;
    Ok(result.assignment.into_iter().map(|c| c as u32).collect())
}

impl SslTask for CluTask {
    fn name(&self) -> &'static str {
        "clu"
    }

    fn init_heads(&self, dim: usize, params: &mut ParameterSet, rng: &mut ChaCha8Rng) {
        params.add_uniform(&head_name("clu", "w"), dim, self.n_clusters, rng);
        params.add_uniform(&head_name("clu", "b"), 1, self.n_clusters, rng);
    }

    fn loss<'g>(
        &'g self,
        tape: &mut Tape<'g>,
        bound: &BoundParams,
        emb: Var,
        _corrupted: Option<Var>,
    ) -> Var {
        let w = bound.var(&head_name("clu", "w"));
        let b = bound.var(&head_name("clu", "b"));
        let logits = tape.matmul(emb, w);
        let logits = tape.add_row_broadcast(logits, b);
        tape.softmax_cross_entropy(logits, &self.labels)
    }

    fn write_supervision(&self, dir: &Path) -> Result<()> {
        write_csv(
            &dir.join("supervision_clu.csv"),
            "node,cluster",
            self.labels
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{i},{l}")),
        )
    }
}
