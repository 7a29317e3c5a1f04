//! Graph-partition pretext task: predict a node's part in a balanced
//! structural partition grown by multi-source BFS.

use std::collections::VecDeque;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::params::ParameterSet;
use crate::numerics::tape::{BoundParams, Tape, Var};
use crate::tasks::{head_name, write_csv, SslTask};

pub struct ParTask {
    labels: Vec<u32>,
    n_parts: usize,
}

impl ParTask {
    pub fn generate(g: &Graph, n_parts: usize, seed: u64) -> Result<Self> {
        let labels = make_par_labels(g, n_parts, seed)?;
        Ok(Self { labels, n_parts })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

/// Balanced partition labels via seeded multi-source BFS growth: seeds are
/// picked by descending degree with adjacency spacing, frontiers grow one
/// node per part per round, and leftovers (other components) go to the
/// currently smallest part.
pub fn make_par_labels(g: &Graph, n_parts: usize, _seed: u64) -> Result<Vec<u32>> {
    let n = g.n_nodes();
    if n_parts < 1 || n_parts > n {
        return Err(Error::InvalidInput(format!(
            "partition count must be in 1..={n}, got {n_parts}"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(g.degree(i)), i));

    // seeds spaced apart: skip candidates adjacent to an accepted seed,
    // falling back to the plain degree order if spacing starves us
    let mut seeds: Vec<usize> = Vec::with_capacity(n_parts);
    for &cand in &order {
        if seeds.len() == n_parts {
            break;
        }
        if seeds
            .iter()
            .all(|&s| !g.neighbors(s).contains(&cand) && s != cand)
        {
            seeds.push(cand);
        }
    }
    for &cand in &order {
        if seeds.len() == n_parts {
            break;
        }
        if !seeds.contains(&cand) {
            seeds.push(cand);
        }
    }

    let mut labels = vec![u32::MAX; n];
    let mut sizes = vec![0usize; n_parts];
    let mut frontiers: Vec<VecDeque<usize>> = vec![VecDeque::new(); n_parts];
    for (p, &s) in seeds.iter().enumerate() {
        labels[s] = p as u32;
        sizes[p] += 1;
        frontiers[p].extend(g.neighbors(s).iter().copied());
    }

    // round-robin growth, one claim per part per round
    let mut active = true;
    while active {
        active = false;
        for p in 0..n_parts {
            while let Some(v) = frontiers[p].pop_front() {
                if labels[v] != u32::MAX {
                    continue;
                }
                labels[v] = p as u32;
                sizes[p] += 1;
                frontiers[p].extend(g.neighbors(v).iter().copied());
                active = true;
                break;
            }
        }
    }

    // stragglers and isolates go to the smallest part
    for v in 0..n {
        if labels[v] == u32::MAX {
            let p = (0..n_parts).min_by_key(|&p| (sizes[p], p)).unwrap();
            labels[v] = p as u32;
            sizes[p] += 1;
        }
    }
    Ok(labels)
}

impl SslTask for ParTask {
    fn name(&self) -> &'static str {
        "par"
    }

    fn init_heads(&self, dim: usize, params: &mut ParameterSet, rng: &mut ChaCha8Rng) {
        params.add_uniform(&head_name("par", "w"), dim, self.n_parts, rng);
        params.add_uniform(&head_name("par", "b"), 1, self.n_parts, rng);
    }

    fn loss<'g>(
        &'g self,
        tape: &mut Tape<'g>,
        bound: &BoundParams,
        emb: Var,
        _corrupted: Option<Var>,
    ) -> Var {
        let w = bound.var(&head_name("par", "w"));
        let b = bound.var(&head_name("par", "b"));
        let logits = tape.matmul(emb, w);
        let logits = tape.add_row_broadcast(logits, b);
        tape.softmax_cross_entropy(logits, &self.labels)
    }

    fn write_supervision(&self, dir: &Path) -> Result<()> {
        write_csv(
            &dir.join("supervision_par.csv"),
            "node,part",
            self.labels
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{i},{l}")),
        )
    }
}
