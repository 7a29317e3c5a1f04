//! Pair-distance pretext task: classify node pairs by truncated
//! shortest-path distance. Class `c` means distance `c + 1`; the last class
//! pools "at least `max_hop` hops or disconnected".

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::params::ParameterSet;
use crate::numerics::rng::derive_rng;
use crate::numerics::tape::{BoundParams, Tape, Var};
use crate::tasks::{head_name, write_csv, PairSample, SslTask};

pub struct PairdisTask {
    sample: PairSample,
    n_classes: usize,
}

impl PairdisTask {
    pub fn generate(g: &Graph, n_pairs: usize, max_hop: usize, seed: u64) -> Result<Self> {
        let sample = sample_pairdis(g, n_pairs, max_hop, seed)?;
        Ok(Self {
            sample,
            n_classes: max_hop,
        })
    }

    pub fn sample(&self) -> &PairSample {
        &self.sample
    }
}

/// Samples balanced distance-class pairs through per-class reservoirs fed
/// by BFS truncated at `max_hop - 1`. Classes are trimmed to a common size
/// afterward, so represented classes come out exactly balanced.
pub fn sample_pairdis(
    g: &Graph,
    n_pairs: usize,
    max_hop: usize,
    seed: u64,
) -> Result<PairSample> {
    if g.n_nodes() < 2 {
        return Err(Error::InvalidInput(
            "pair-distance sampling needs at least two nodes".into(),
        ));
    }
    if max_hop < 2 {
        return Err(Error::InvalidInput(format!(
            "max_hop must be at least 2, got {max_hop}"
        )));
    }
    let n = g.n_nodes();
    let n_classes = max_hop;
    let quota = (n_pairs / n_classes).max(1);
    let mut rng = derive_rng(seed, "pairdis", 0);

    let mut anchors: Vec<usize> = (0..n).collect();
    anchors.shuffle(&mut rng);

    let mut reservoirs: Vec<Reservoir> = (0..n_classes).map(|_| Reservoir::new(quota)).collect();
    let mut dist = vec![usize::MAX; n];
    let mut touched: Vec<usize> = Vec::new();
    let mut frontier: Vec<usize> = Vec::new();
    let mut next: Vec<usize> = Vec::new();

    for &anchor in &anchors {
        // BFS truncated at max_hop - 1
        dist[anchor] = 0;
        touched.push(anchor);
        frontier.clear();
        frontier.push(anchor);
        for depth in 1..max_hop {
            next.clear();
            for &u in &frontier {
                for &v in g.neighbors(u) {
                    if dist[v] == usize::MAX {
                        dist[v] = depth;
                        touched.push(v);
                        next.push(v);
                        reservoirs[depth - 1].offer((anchor as u32, v as u32), &mut rng);
                    }
                }
            }
            std::mem::swap(&mut frontier, &mut next);
        }
        // far class: nodes outside the BFS ball, found by rejection
        for _ in 0..8 {
            let j = rng.gen_range(0..n);
            if j != anchor && dist[j] == usize::MAX {
                reservoirs[n_classes - 1].offer((anchor as u32, j as u32), &mut rng);
                break;
            }
        }
        for &t in &touched {
            dist[t] = usize::MAX;
        }
        touched.clear();
    }

    // trim represented classes to a common size
    let min_count = reservoirs
        .iter()
        .map(|r| r.items.len())
        .filter(|&c| c > 0)
        .min()
        .unwrap_or(0);
    let mut pairs = Vec::new();
    let mut targets = Vec::new();
    for (class, r) in reservoirs.iter().enumerate() {
        for &p in r.items.iter().take(min_count) {
            pairs.push(p);
            targets.push(class as u32);
        }
    }
    Ok(PairSample::new(pairs, targets))
}

struct Reservoir {
    capacity: usize,
    seen: usize,
    items: Vec<(u32, u32)>,
}

impl Reservoir {
    fn new(capacity: usize) -> Self {
        Self {
            capacity,
            seen: 0,
            items: Vec::new(),
        }
    }

    fn offer(&mut self, item: (u32, u32), rng: &mut ChaCha8Rng) {
        self.seen += 1;
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let k = rng.gen_range(0..self.seen);
            if k < self.capacity {
                self.items[k] = item;
            }
        }
    }
}

impl SslTask for PairdisTask {
    fn name(&self) -> &'static str {
        "pairdis"
    }

    fn init_heads(&self, dim: usize, params: &mut ParameterSet, rng: &mut ChaCha8Rng) {
        params.add_uniform(&head_name("pairdis", "w"), dim, self.n_classes, rng);
        params.add_uniform(&head_name("pairdis", "b"), 1, self.n_classes, rng);
    }

    fn loss<'g>(
        &'g self,
        tape: &mut Tape<'g>,
        bound: &BoundParams,
        emb: Var,
        _corrupted: Option<Var>,
    ) -> Var {
        let w = bound.var(&head_name("pairdis", "w"));
        let b = bound.var(&head_name("pairdis", "b"));
        let encodings = tape.pair_abs_diff(emb, self.sample.pairs());
        let logits = tape.matmul(encodings, w);
        let logits = tape.add_row_broadcast(logits, b);
        tape.softmax_cross_entropy(logits, self.sample.targets())
    }

    fn write_supervision(&self, dir: &Path) -> Result<()> {
        write_csv(
            &dir.join("supervision_pairdis.csv"),
            "i,j,class",
            self.sample
                .pairs()
                .iter()
                .zip(self.sample.targets())
                .map(|(&(i, j), &c)| format!("{i},{j},{c}")),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::generate_sbm;
    use crate::numerics::dense::DenseMatrix;

    fn path4() -> Graph {
        Graph::new(
            DenseMatrix::zeros(4, 1),
            &[(0, 1), (1, 2), (2, 3)],
            None,
        )
        .unwrap()
    }

    fn bfs_distance(g: &Graph, a: usize, b: usize) -> Option<usize> {
        let mut dist = vec![usize::MAX; g.n_nodes()];
        dist[a] = 0;
        let mut queue = std::collections::VecDeque::from([a]);
        while let Some(u) = queue.pop_front() {
            for &v in g.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        (dist[b] != usize::MAX).then_some(dist[b])
    }

    #[test]
    fn classes_match_bfs_oracle() {
        let g = generate_sbm(2, 15, 0.15, 0.02, 4, 1.0, 3).unwrap();
        let max_hop = 4;
        let sample = sample_pairdis(&g, 4 * g.n_nodes(), max_hop, 11).unwrap();
        assert!(!sample.is_empty());
        for (&(i, j), &class) in sample.pairs().iter().zip(sample.targets()) {
            let d = bfs_distance(&g, i as usize, j as usize);
            let expect = match d {
                Some(d) if d < max_hop => (d - 1) as u32,
                _ => (max_hop - 1) as u32,
            };
            assert_eq!(class, expect, "pair ({i},{j}) distance {d:?}");
        }
    }

    #[test]
    fn path_end_to_end_pair_lands_in_distance_three_class() {
        // on 0-1-2-3 the pair (0,3) has distance 3 -> class 2
        let g = path4();
        let sample = sample_pairdis(&g, 40, 4, 0).unwrap();
        let found = sample
            .pairs()
            .iter()
            .zip(sample.targets())
            .find(|(&(i, j), _)| (i, j) == (0, 3) || (i, j) == (3, 0));
        if let Some((_, &class)) = found {
            assert_eq!(class, 2);
        }
        // adjacent pairs are always class 0
        for (&(i, j), &class) in sample.pairs().iter().zip(sample.targets()) {
            if bfs_distance(&g, i as usize, j as usize) == Some(1) {
                assert_eq!(class, 0);
            }
        }
    }

    #[test]
    fn disconnected_pairs_pool_into_far_class() {
        // two disjoint triangles: any cross pair is disconnected -> class 3
        let g = Graph::new(
            DenseMatrix::zeros(6, 1),
            &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)],
            None,
        )
        .unwrap();
        let sample = sample_pairdis(&g, 24, 4, 5).unwrap();
        for (&(i, j), &class) in sample.pairs().iter().zip(sample.targets()) {
            if bfs_distance(&g, i as usize, j as usize).is_none() {
                assert_eq!(class, 3);
            }
        }
    }

    #[test]
    fn class_frequencies_are_balanced() {
        let g = generate_sbm(3, 50, 0.08, 0.005, 4, 1.0, 2).unwrap();
        let max_hop = 4;
        let sample = sample_pairdis(&g, 4 * g.n_nodes(), max_hop, 7).unwrap();
        let mut counts = vec![0usize; max_hop];
        for &t in sample.targets() {
            counts[t as usize] += 1;
        }
        let present: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
        assert!(present.len() >= 2, "degenerate sample: {counts:?}");
        let mean = present.iter().sum::<usize>() as f64 / present.len() as f64;
        for &c in &present {
            assert!(
                (c as f64 - mean).abs() <= 0.1 * mean,
                "unbalanced classes {counts:?}"
            );
        }
    }

    #[test]
    fn tiny_graph_is_an_error() {
        let g = Graph::new(DenseMatrix::zeros(1, 1), &[], None).unwrap();
        assert!(sample_pairdis(&g, 10, 4, 0).is_err());
    }
}
