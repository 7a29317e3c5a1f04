//! Pair-similarity pretext task: binary classification of node pairs into
//! feature-space neighbors versus random non-neighbors.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::params::ParameterSet;
use crate::numerics::rng::derive_rng;
use crate::numerics::tape::{BoundParams, Tape, Var};
use crate::tasks::{head_name, write_csv, PairSample, SslTask};

pub struct PairsimTask {
    sample: PairSample,
    targets_f64: Vec<f64>,
}

impl PairsimTask {
    pub fn generate(g: &Graph, n_pairs_per_node: usize, seed: u64) -> Result<Self> {
        let sample = sample_pairsim(g, n_pairs_per_node, seed)?;
        let targets_f64 = sample.targets().iter().map(|&t| t as f64).collect();
        Ok(Self {
            sample,
            targets_f64,
        })
    }

    pub fn sample(&self) -> &PairSample {
        &self.sample
    }
}

/// For every anchor node: positives drawn from its top-3 feature-cosine
/// neighbors (ties broken by index), negatives drawn uniformly outside that
/// top set. Positives and negatives are balanced by construction.
pub fn sample_pairsim(g: &Graph, n_pairs_per_node: usize, seed: u64) -> Result<PairSample> {
    let n = g.n_nodes();
    if n < 5 {
        return Err(Error::InvalidInput(
            "pair-similarity sampling needs at least five nodes".into(),
        ));
    }
    let x = g.features();
    if x.data().iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidInput(
            "pair-similarity needs a nonzero feature matrix".into(),
        ));
    }
    let mut rng = derive_rng(seed, "pairsim", 0);

    // inverted index over nonzero feature entries; cosine scores then cost
    // only as much as the actual sparsity
    let d = x.cols();
    let mut columns: Vec<Vec<(u32, f64)>> = vec![Vec::new(); d];
    let mut norms = vec![0.0f64; n];
    for i in 0..n {
        for (k, &v) in x.row(i).iter().enumerate() {
            if v != 0.0 {
                columns[k].push((i as u32, v));
                norms[i] += v * v;
            }
        }
    }
    for v in &mut norms {
        *v = v.sqrt();
    }

    let mut pairs = Vec::new();
    let mut targets = Vec::new();
    let mut scores = vec![0.0f64; n];
    let mut touched: Vec<usize> = Vec::new();

    for anchor in 0..n {
        for (k, &v) in x.row(anchor).iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            for &(j, w) in &columns[k] {
                let j = j as usize;
                if scores[j] == 0.0 {
                    touched.push(j);
                }
                scores[j] += v * w;
            }
        }
        // top-3 by cosine, anchor excluded, ties broken by lower index
        let mut top: Vec<(f64, usize)> = Vec::with_capacity(4);
        for j in 0..n {
            if j == anchor {
                continue;
            }
            let cos = if norms[anchor] > 0.0 && norms[j] > 0.0 {
                scores[j] / (norms[anchor] * norms[j])
            } else {
                0.0
            };
            let key = (cos, std::cmp::Reverse(j));
            let pos = top
                .iter()
                .position(|&(c, i)| (c, std::cmp::Reverse(i)) < key);
            if let Some(p) = pos {
                top.insert(p, (cos, j));
                top.truncate(3);
            } else if top.len() < 3 {
                top.push((cos, j));
            }
        }
        for &t in &touched {
            scores[t] = 0.0;
        }
        touched.clear();

        let top_set: Vec<usize> = top.iter().map(|&(_, j)| j).collect();
        for _ in 0..n_pairs_per_node {
            let pos = top_set[rng.gen_range(0..top_set.len())];
            pairs.push((anchor as u32, pos as u32));
            targets.push(1);

            // uniform non-member of the top set (and not the anchor)
            let neg = loop {
                let j = rng.gen_range(0..n);
                if j != anchor && !top_set.contains(&j) {
                    break j;
                }
            };
            pairs.push((anchor as u32, neg as u32));
            targets.push(0);
        }
    }
    Ok(PairSample::new(pairs, targets))
}

impl SslTask for PairsimTask {
    fn name(&self) -> &'static str {
        "pairsim"
    }

    fn init_heads(&self, dim: usize, params: &mut ParameterSet, rng: &mut ChaCha8Rng) {
        params.add_uniform(&head_name("pairsim", "w"), dim, 1, rng);
        params.add_uniform(&head_name("pairsim", "b"), 1, 1, rng);
    }

    fn loss<'g>(
        &'g self,
        tape: &mut Tape<'g>,
        bound: &BoundParams,
        emb: Var,
        _corrupted: Option<Var>,
    ) -> Var {
        let w = bound.var(&head_name("pairsim", "w"));
        let b = bound.var(&head_name("pairsim", "b"));
        let encodings = tape.pair_mul(emb, self.sample.pairs());
        let logits = tape.matmul(encodings, w);
        let logits = tape.add_row_broadcast(logits, b);
        tape.bce_with_logits(logits, &self.targets_f64)
    }

    fn write_supervision(&self, dir: &Path) -> Result<()> {
        write_csv(
            &dir.join("supervision_pairsim.csv"),
            "i,j,label",
            self.sample
                .pairs()
                .iter()
                .zip(self.sample.targets())
                .map(|(&(i, j), &c)| format!("{i},{j},{c}")),
        )
    }
}
