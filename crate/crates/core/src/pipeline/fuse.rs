//! Stage-two training: experts, gating, and centers against the combined
//! objective (pseudo-label, structure, pretext, and clustering terms).

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{expert_on_tape, forward_on_tape, init_fusion_params, FusionNetwork};
use crate::graph::{Graph, PreparedAdjacency};
use crate::numerics::dense::DenseMatrix;
use crate::numerics::kmeans::kmeans;
use crate::numerics::params::{adam_step, AdamConfig, ParameterSet};
use crate::numerics::rng::derive_rng;
use crate::numerics::tape::{bind_params, Tape, Var};
use crate::pipeline::config::RunConfig;
use crate::selfsup::{
    align_labels, select_pseudo_labels, soft_assign, ClusterCenters, PseudoLabelSet,
};
use crate::tasks::SslTaskSet;

pub const CENTERS_PARAM: &str = "centers";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionEpochLosses {
    pub epoch: usize,
    pub total: f64,
    pub pseudo_label: f64,
    pub structure: f64,
    pub ssl: f64,
    pub clustering: f64,
}

#[derive(Debug, Clone)]
pub struct FusionOutcome {
    /// Experts, gate, centers, and task heads.
    pub params: ParameterSet,
    pub pseudo: PseudoLabelSet,
    pub trace: Vec<FusionEpochLosses>,
    pub fused: DenseMatrix,
    pub gates: DenseMatrix,
    pub predicted: Vec<usize>,
}

/// Stage-two failure: either the setup was invalid, or a loss turned
/// non-finite mid-run — in which case the last finite state is carried so
/// the caller can retain a checkpoint.
#[derive(Debug)]
pub enum FusionError {
    Setup(Error),
    Diverged {
        term: String,
        epoch: usize,
        last_good: Box<FusionOutcome>,
    },
}

impl From<FusionError> for Error {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::Setup(e) => e,
            FusionError::Diverged { term, epoch, .. } => Error::Diverged { term, epoch },
        }
    }
}

/// Resolves the cluster count: explicit config wins, else the label class
/// count.
pub fn resolve_n_clusters(cfg: &RunConfig, g: &Graph) -> Result<usize> {
    match (cfg.n_clusters, g.n_classes()) {
        (Some(c), _) => Ok(c),
        (None, Some(c)) if c >= 2 => Ok(c),
        _ => Err(Error::Config(
            "cluster count unknown: pass n_clusters or provide labels".into(),
        )),
    }
}

/// Runs the fusion stage. `stage1_params` supplies the task-head values
/// (carried over by value; optimizer moments start fresh); the encoder
/// itself stays frozen inside `z`.
pub fn train_fusion(
    g: &Graph,
    adj: &PreparedAdjacency,
    tasks: &SslTaskSet,
    z: &DenseMatrix,
    stage1_params: &ParameterSet,
    cfg: &RunConfig,
) -> std::result::Result<FusionOutcome, Box<FusionError>> {
    let setup = |e: Error| Box::new(FusionError::Setup(e));
    if tasks.is_empty() {
        return Err(setup(Error::Config(
            "fusion stage needs at least one pretext task".into(),
        )));
    }
    let k = tasks.len();
    let dim = z.cols();
    let n_clusters = resolve_n_clusters(cfg, g).map_err(&setup)?;

    // fresh optimizer state: heads by value, then fusion weights
    let mut params = ParameterSet::new();
    for p in stage1_params.iter() {
        if p.name.starts_with("head.") {
            params.add(&p.name, p.value.clone());
        }
    }
    let mut init_rng = derive_rng(cfg.seed, "fusion-init", 0);
    init_fusion_params(k, dim, &mut params, &mut init_rng);

    // initial fused embedding, trainable centers, reference clustering O
    let net = FusionNetwork::from_params(&params, k, cfg.expert_activation);
    let (_, _, fused_init) = net.fused_embedding(z, adj).map_err(&setup)?;
    let km_fused = kmeans(
        &fused_init,
        n_clusters,
        cfg.kmeans_restarts,
        cfg.kmeans_max_iter,
        derived_seed(cfg.seed, "kmeans-fused"),
    )
    .map_err(&setup)?;
    params.add(CENTERS_PARAM, km_fused.centers.clone());

    // pseudo labels from the pretrained embeddings, aligned into O's space
    let km_z = kmeans(
        z,
        n_clusters,
        cfg.kmeans_restarts,
        cfg.kmeans_max_iter,
        derived_seed(cfg.seed, "kmeans-z"),
    )
    .map_err(&setup)?;
    let q_z = soft_assign(z, &ClusterCenters(km_z.centers));
    let raw = select_pseudo_labels(&q_z, cfg.percentile).map_err(&setup)?;
    let mut pseudo = align_labels(raw, &km_fused.assignment, n_clusters);

    let adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let mut trace: Vec<FusionEpochLosses> = Vec::with_capacity(cfg.fusion_epochs);
    let mut last_good = (params.clone(), pseudo.clone());

    for epoch in 0..cfg.fusion_epochs {
        if let Some(every) = cfg.refresh_pseudo_every {
            if epoch > 0 && epoch % every.max(1) == 0 {
                let net = FusionNetwork::from_params(&params, k, cfg.expert_activation);
                let (_, _, fused) = net.fused_embedding(z, adj).expect("consistent shapes");
                let centers = ClusterCenters(params.value(CENTERS_PARAM).clone());
                let q = soft_assign(&fused, &centers);
                let mut refreshed =
                    select_pseudo_labels(&q, cfg.percentile).expect("validated percentile");
                // already in the fused label space, no realignment needed
                refreshed.aligned_labels = refreshed.raw_labels.clone();
                pseudo = refreshed;
            }
        }

        let z_corrupt = tasks.iter().any(|t| t.needs_corruption()).then(|| {
            let mut perm: Vec<usize> = (0..g.n_nodes()).collect();
            perm.shuffle(&mut derive_rng(cfg.seed, "fusion-corrupt", epoch as u64));
            z.select_rows(&perm)
        });

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let z_var = tape.constant(z.clone());
        let fwd = forward_on_tape(&mut tape, &bound, z_var, adj, k, cfg.expert_activation);
        let centers_var = bound.var(CENTERS_PARAM);
        let q_fused = tape.soft_assign(fwd.fused, centers_var);

        let z_corrupt_var = z_corrupt.map(|m| tape.constant(m));
        let corrupted: Vec<Option<Var>> = tasks
            .iter()
            .enumerate()
            .map(|(idx, task)| {
                task.needs_corruption().then(|| {
                    let zc = z_corrupt_var.expect("corrupted input prepared");
                    expert_on_tape(&mut tape, &bound, zc, adj, idx, cfg.expert_activation)
                })
            })
            .collect();

        let mut terms: Vec<(Var, f64)> = Vec::with_capacity(4);
        let l_nl = cfg.use_pseudo_label_loss.then(|| {
            let v = tape.nll_selected(q_fused, &pseudo.node_ids, &pseudo.aligned_labels);
            terms.push((v, 1.0));
            v
        });
        let l_ns = cfg.use_structure_loss.then(|| {
            let scaled = tape.minmax_scale_cols(fwd.fused);
            let unit = tape.row_normalize(scaled);
            let gram = tape.matmul_nt(unit, unit);
            let v = tape.structure_bce(gram, adj.self_loop());
            terms.push((v, 1.0));
            v
        });
        let l_ssl = tasks
            .total_loss(&mut tape, &bound, &fwd.experts, &corrupted)
            .expect("one embedding per task");
        terms.push((l_ssl, cfg.lambda1));
        let l_pq = tape.kl_self_target(q_fused);
        terms.push((l_pq, cfg.lambda2));
        let total = tape.weighted_sum(terms);

        if let Some(dir) = &cfg.gate_dump_dir {
            if epoch % cfg.gate_dump_every.max(1) == 0 {
                dump_gates(dir, epoch, tape.value(fwd.gates)).map_err(|e| {
                    Box::new(FusionError::Setup(e))
                })?;
            }
        }

        let losses = FusionEpochLosses {
            epoch,
            total: tape.value(total).as_scalar(),
            pseudo_label: l_nl.map_or(0.0, |v| tape.value(v).as_scalar()),
            structure: l_ns.map_or(0.0, |v| tape.value(v).as_scalar()),
            ssl: tape.value(l_ssl).as_scalar(),
            clustering: tape.value(l_pq).as_scalar(),
        };
        if let Some(term) = non_finite_term(&losses) {
            let (good_params, good_pseudo) = last_good;
            return Err(Box::new(FusionError::Diverged {
                term,
                epoch,
                last_good: Box::new(snapshot(
                    &good_params,
                    &good_pseudo,
                    &trace,
                    z,
                    adj,
                    cfg,
                    k,
                )),
            }));
        }
        trace.push(losses);

        let grads = tape.backward(total);
        bound.write_grads(&grads, &mut params);
        adam_step(&mut params, &adam);
        last_good = (params.clone(), pseudo.clone());
    }

    Ok(snapshot(&params, &pseudo, &trace, z, adj, cfg, k))
}

fn derived_seed(seed: u64, label: &str) -> u64 {
    use rand::Rng;
    derive_rng(seed, label, 0).gen()
}

fn dump_gates(dir: &std::path::Path, epoch: usize, gates: &DenseMatrix) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("gates_epoch_{epoch:05}.csv"));
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for i in 0..gates.rows() {
        let row: Vec<String> = gates.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", row.join(",")).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn non_finite_term(l: &FusionEpochLosses) -> Option<String> {
    for (name, v) in [
        ("pseudo_label", l.pseudo_label),
        ("structure", l.structure),
        ("ssl", l.ssl),
        ("clustering", l.clustering),
        ("total", l.total),
    ] {
        if !v.is_finite() {
            return Some(name.to_string());
        }
    }
    None
}

/// Full evaluation pass from the given parameters; the run's final output
/// and the retained state on divergence.
fn snapshot(
    params: &ParameterSet,
    pseudo: &PseudoLabelSet,
    trace: &[FusionEpochLosses],
    z: &DenseMatrix,
    adj: &PreparedAdjacency,
    cfg: &RunConfig,
    k: usize,
) -> FusionOutcome {
    let net = FusionNetwork::from_params(params, k, cfg.expert_activation);
    let (_, gates, fused) = net.fused_embedding(z, adj).expect("consistent shapes");
    let centers = ClusterCenters(params.value(CENTERS_PARAM).clone());
    let q = soft_assign(&fused, &centers);
    FusionOutcome {
        params: params.clone(),
        pseudo: pseudo.clone(),
        trace: trace.to_vec(),
        fused,
        gates: gates.matrix().clone(),
        predicted: q.hard_labels(),
    }
}
