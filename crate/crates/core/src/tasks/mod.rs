//! Self-supervised pretext tasks behind a common strategy trait.
//!
//! Each task generates its supervision once per run (frozen thereafter),
//! owns its head parameters, and builds its loss on a shared tape. Tasks
//! are registered by name and selected at runtime, so the set of experts in
//! the fusion stage always matches the configured task list.

mod clu;
mod dgi;
mod pairdis;
mod pairsim;
mod par;

pub use clu::{make_clu_labels, CluTask};
pub use dgi::DgiTask;
pub use pairdis::{sample_pairdis, PairdisTask};
pub use pairsim::{sample_pairsim, PairsimTask};
pub use par::{make_par_labels, ParTask};

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numerics::params::ParameterSet;
use crate::numerics::rng::derive_rng;
use crate::numerics::tape::{BoundParams, Tape, Var};

/// Frozen pair supervision: index pairs with a class id or binary label.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairSample {
    pairs: Vec<(u32, u32)>,
    targets: Vec<u32>,
}

impl PairSample {
    pub fn new(pairs: Vec<(u32, u32)>, targets: Vec<u32>) -> Self {
        assert_eq!(pairs.len(), targets.len());
        debug_assert!(pairs.iter().all(|&(i, j)| i != j));
        Self { pairs, targets }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn targets(&self) -> &[u32] {
        &self.targets
    }
}

/// One pretext task: frozen supervision plus a trainable head.
pub trait SslTask {
    fn name(&self) -> &'static str;

    /// True when the loss needs a corrupted twin of its embedding source.
    fn needs_corruption(&self) -> bool {
        false
    }

    /// Registers head parameters for embeddings of width `dim`.
    fn init_heads(&self, dim: usize, params: &mut ParameterSet, rng: &mut ChaCha8Rng);

    /// Builds the task loss on the tape. `emb` is the embedding matrix this
    /// task reads (the shared encoder output in stage one, its expert's
    /// output in stage two); `corrupted` is the same encoder applied to
    /// row-permuted inputs, present only when [`Self::needs_corruption`].
    fn loss<'g>(
        &'g self,
        tape: &mut Tape<'g>,
        bound: &BoundParams,
        emb: Var,
        corrupted: Option<Var>,
    ) -> Var;

    /// Dumps the frozen supervision as CSV next to checkpoints; tasks
    /// without offline supervision write nothing.
    fn write_supervision(&self, dir: &Path) -> Result<()>;
}

pub(crate) fn head_name(task: &str, part: &str) -> String {
    format!("head.{task}.{part}")
}

/// Knobs for supervision generation, all config-overridable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Partition count for the graph-partition task.
    pub n_parts: usize,
    /// Cluster count for the attribute-clustering task.
    pub clu_clusters: usize,
    /// Hop cutoff for pair-distance classes; the last class pools
    /// "at least max_hop or disconnected".
    pub pairdis_max_hop: usize,
    /// Total pair budget for the distance task, as a multiple of N.
    pub pairdis_pairs_per_node: usize,
    /// Positive/negative pairs per anchor for the similarity task.
    pub pairsim_per_node: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_parts: 10,
            clu_clusters: 10,
            pairdis_max_hop: 4,
            pairdis_pairs_per_node: 4,
            pairsim_per_node: 1,
        }
    }
}

type TaskBuilder = fn(&Graph, &TaskConfig, u64) -> Result<Box<dyn SslTask>>;

/// Name-to-constructor registry of every available pretext task, in the
/// canonical order used when no explicit selection is given.
pub fn registry() -> &'static [(&'static str, TaskBuilder)] {
    &[
        ("par", |g, cfg, seed| {
            Ok(Box::new(ParTask::generate(g, cfg.n_parts, seed)?))
        }),
        ("clu", |g, cfg, seed| {
            Ok(Box::new(CluTask::generate(g, cfg.clu_clusters, seed)?))
        }),
        ("pairdis", |g, cfg, seed| {
            Ok(Box::new(PairdisTask::generate(
                g,
                cfg.pairdis_pairs_per_node * g.n_nodes(),
                cfg.pairdis_max_hop,
                seed,
            )?))
        }),
        ("pairsim", |g, cfg, seed| {
            Ok(Box::new(PairsimTask::generate(
                g,
                cfg.pairsim_per_node,
                seed,
            )?))
        }),
        ("dgi", |g, _cfg, _seed| Ok(Box::new(DgiTask::new(g.n_nodes())))),
    ]
}

pub fn default_task_names() -> Vec<String> {
    registry().iter().map(|(n, _)| n.to_string()).collect()
}

/// The ordered task list; its length is the expert count of the fusion
/// network. Supervision is generated once here and never regenerated.
pub struct SslTaskSet {
    tasks: Vec<Box<dyn SslTask>>,
}

impl std::fmt::Debug for SslTaskSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SslTaskSet")
            .field("tasks", &self.names())
            .finish()
    }
}

impl SslTaskSet {
    /// Builds tasks by name through the registry. Every task derives its
    /// generation stream from the run seed and its own name, so the set is
    /// reproducible and independent of selection order.
    pub fn build(names: &[String], g: &Graph, cfg: &TaskConfig, seed: u64) -> Result<Self> {
        let mut tasks: Vec<Box<dyn SslTask>> = Vec::with_capacity(names.len());
        for name in names {
            let builder = registry()
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, b)| b)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown task '{name}'; available: {}",
                        default_task_names().join(", ")
                    ))
                })?;
            if tasks.iter().any(|t| t.name() == name) {
                return Err(Error::Config(format!("task '{name}' listed twice")));
            }
            tasks.push(builder(g, cfg, task_seed(seed, name))?);
        }
        Ok(Self { tasks })
    }

    pub fn empty() -> Self {
        Self { tasks: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &dyn SslTask> {
        self.tasks.iter().map(|t| t.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.tasks.iter().map(|t| t.name()).collect()
    }

    /// Registers every task's head parameters for embeddings of width `dim`.
    pub fn init_heads(&self, dim: usize, params: &mut ParameterSet, seed: u64) {
        for task in &self.tasks {
            let mut rng = derive_rng(seed, &format!("heads.{}", task.name()), 0);
            task.init_heads(dim, params, &mut rng);
        }
    }

    pub fn write_supervision(&self, dir: &Path) -> Result<()> {
        for task in &self.tasks {
            task.write_supervision(dir)?;
        }
        Ok(())
    }

    /// Unweighted sum of the task losses, one embedding source per task.
    pub fn total_loss<'g>(
        &'g self,
        tape: &mut Tape<'g>,
        bound: &BoundParams,
        embeddings: &[Var],
        corrupted: &[Option<Var>],
    ) -> Result<Var> {
        if embeddings.len() != self.tasks.len() || corrupted.len() != self.tasks.len() {
            return Err(Error::InvalidInput(format!(
                "expected one embedding per task ({}), got {}",
                self.tasks.len(),
                embeddings.len()
            )));
        }
        let terms: Vec<(Var, f64)> = self
            .tasks
            .iter()
            .zip(embeddings.iter().zip(corrupted))
            .map(|(task, (&emb, &cor))| (task.loss(tape, bound, emb, cor), 1.0))
            .collect();
        Ok(tape.weighted_sum(terms))
    }
}

fn task_seed(seed: u64, name: &str) -> u64 {
    use rand::Rng;
    derive_rng(seed, &format!("task.{name}"), 0).gen()
}

pub(crate) fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(w, "{row}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
