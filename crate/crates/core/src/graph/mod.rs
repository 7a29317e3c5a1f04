//! Graph data model: dense node features, sparse symmetric adjacency,
//! self-loop and symmetric normalization, CSV ingestion, and a stochastic
//! block model generator for synthetic fixtures.

mod io;
mod sbm;

pub use io::{load_graph, save_graph};
pub use sbm::generate_sbm;

use crate::error::{Error, Result};
use crate::numerics::dense::DenseMatrix;
use crate::numerics::sparse::CsrMatrix;

/// An attributed graph. Immutable after construction; adjacency is
/// symmetric, 0/1, with a zero diagonal.
#[derive(Clone, Debug)]
pub struct Graph {
    features: DenseMatrix,
    adjacency: CsrMatrix,
    labels: Option<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from features and undirected edges. Edges are
    /// symmetrized and deduplicated; self-loops are dropped.
    pub fn new(
        features: DenseMatrix,
        edges: &[(usize, usize)],
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let n = features.rows();
        if features.has_non_finite() {
            return Err(Error::InvalidInput(
                "feature matrix contains NaN or infinite values".into(),
            ));
        }
        if let Some(ref l) = labels {
            if l.len() != n {
                return Err(Error::InvalidInput(format!(
                    "labels cover {} nodes but the graph has {n}",
                    l.len()
                )));
            }
        }
        let mut triplets = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({u}, {v}) references a node outside 0..{n}"
                )));
            }
            if u == v {
                continue; // self-loops are re-added deterministically later
            }
            triplets.push((u, v, 1.0));
            triplets.push((v, u, 1.0));
        }
        let mut adjacency = CsrMatrix::from_triplets(n, triplets);
        // duplicate edges collapse to 1
        adjacency = CsrMatrix::from_triplets(
            n,
            adjacency
                .triplets()
                .into_iter()
                .map(|(i, j, _)| (i, j, 1.0))
                .collect(),
        );
        Ok(Self {
            features,
            adjacency,
            labels,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn adjacency(&self) -> &CsrMatrix {
        &self.adjacency
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Number of distinct label classes, when labels are present.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().max().map_or(0, |&m| m + 1))
    }

    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n_nodes() {
            for (j, _) in self.adjacency.row(i) {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency.row_cols(i).len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        self.adjacency.row_cols(i)
    }
}

/// Self-loop adjacency `A + I`, its degree vector, and the symmetric
/// normalization `D^{-1/2} (A + I) D^{-1/2}`.
#[derive(Clone, Debug)]
pub struct PreparedAdjacency {
    self_loop: CsrMatrix,
    degree: Vec<f64>,
    normalized: CsrMatrix,
}

impl PreparedAdjacency {
    pub fn self_loop(&self) -> &CsrMatrix {
        &self.self_loop
    }

    pub fn degree(&self) -> &[f64] {
        &self.degree
    }

    pub fn normalized(&self) -> &CsrMatrix {
        &self.normalized
    }

    pub fn n(&self) -> usize {
        self.self_loop.n()
    }
}

/// Adds self-loops and normalizes symmetrically. Every node has degree at
/// least one afterward, so the normalization never divides by zero.
pub fn normalize_adjacency(g: &Graph) -> PreparedAdjacency {
    let n = g.n_nodes();
    let mut triplets = g.adjacency().triplets();
    for i in 0..n {
        triplets.push((i, i, 1.0));
    }
    let self_loop = CsrMatrix::from_triplets(n, triplets);
    let degree: Vec<f64> = (0..n)
        .map(|i| self_loop.row(i).map(|(_, v)| v).sum())
        .collect();
    let normalized = CsrMatrix::from_triplets(
        n,
        self_loop
            .triplets()
            .into_iter()
            .map(|(i, j, v)| (i, j, v / (degree[i] * degree[j]).sqrt()))
            .collect(),
    );
    debug_assert!(normalized.is_symmetric());
    PreparedAdjacency {
        self_loop,
        degree,
        normalized,
    }
}
