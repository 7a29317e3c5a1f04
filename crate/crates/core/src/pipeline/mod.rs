//! Two-stage orchestration: supervision generation, pretraining, fusion
//! training, evaluation, checkpointing, and artifact export.

pub mod checkpoint;
pub mod config;
pub mod fuse;
pub mod report;

pub use checkpoint::{Checkpoint, Stage2State, CHECKPOINT_VERSION};
pub use config::RunConfig;
pub use fuse::{train_fusion, FusionEpochLosses, FusionError, FusionOutcome};
pub use report::{GateSummary, Metrics, RunReport};

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::error::{Error, Result};
use crate::evaluate::{clustering_accuracy, macro_f1, nmi, ClusteringResult};
use crate::fusion::FusionNetwork;
use crate::graph::{generate_sbm, load_graph, normalize_adjacency, Graph};
use crate::pretrain::{encoder_forward, pretrain, PretrainConfig, PretrainOutcome, ENCODER_W1};
use crate::selfsup::{soft_assign, ClusterCenters};
use crate::tasks::SslTaskSet;

/// Where a run's graph comes from.
#[derive(Clone, Debug)]
pub enum DatasetSource {
    Files {
        nodes: PathBuf,
        edges: PathBuf,
        labels: Option<PathBuf>,
    },
    Sbm {
        blocks: usize,
        nodes_per_block: usize,
        p_in: f64,
        p_out: f64,
        feature_dim: usize,
        feature_shift: f64,
        seed: u64,
    },
}

pub fn load_dataset(source: &DatasetSource) -> Result<Graph> {
    match source {
        DatasetSource::Files {
            nodes,
            edges,
            labels,
        } => load_graph(nodes, edges, labels.as_deref()),
        DatasetSource::Sbm {
            blocks,
            nodes_per_block,
            p_in,
            p_out,
            feature_dim,
            feature_shift,
            seed,
        } => generate_sbm(
            *blocks,
            *nodes_per_block,
            *p_in,
            *p_out,
            *feature_dim,
            *feature_shift,
            *seed,
        ),
    }
}

pub struct TrainResult {
    pub report: RunReport,
    pub checkpoint: Checkpoint,
}

fn pretrain_config(cfg: &RunConfig) -> PretrainConfig {
    PretrainConfig {
        epochs: cfg.pretrain_epochs,
        lr: cfg.lr,
        ssl_weight: cfg.ssl_weight_pretrain,
        seed: cfg.seed,
        full_reconstruction: cfg.full_reconstruction,
        encoder: cfg.encoder,
    }
}

/// Stage one only: supervision generation plus encoder pretraining.
pub fn run_pretrain(g: &Graph, cfg: &RunConfig) -> Result<(Checkpoint, PretrainOutcome)> {
    cfg.validate()?;
    let adj = normalize_adjacency(g);
    let tasks = SslTaskSet::build(&cfg.tasks, g, &cfg.task_config, cfg.seed)?;
    let outcome = pretrain(g, &adj, &tasks, &pretrain_config(cfg))?;
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        encoder_params: outcome.params.clone(),
        z: outcome.z.clone(),
        pretrain_trace: outcome.trace.clone(),
        stage2: None,
    };
    Ok((ckpt, outcome))
}

/// Stage two on an existing stage-one checkpoint. Supervision is rebuilt
/// deterministically from the checkpoint's config and seed, so the task
/// heads line up exactly. On divergence the last finite state is written to
/// `retain_on_divergence` (when given) before the error is returned.
pub fn run_fusion_stage(
    g: &Graph,
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    retain_on_divergence: Option<&Path>,
) -> Result<(Checkpoint, FusionOutcome)> {
    cfg.validate()?;
    check_dataset_shapes(g, ckpt)?;
    let adj = normalize_adjacency(g);
    let tasks = SslTaskSet::build(&cfg.tasks, g, &cfg.task_config, cfg.seed)?;
    let outcome = match train_fusion(g, &adj, &tasks, &ckpt.z, &ckpt.encoder_params, cfg) {
        Ok(outcome) => outcome,
        Err(boxed) => match *boxed {
            FusionError::Setup(e) => return Err(e),
            FusionError::Diverged {
                term,
                epoch,
                last_good,
            } => {
                if let Some(path) = retain_on_divergence {
                    let retained = build_stage2_checkpoint(ckpt, cfg, &last_good, tasks.len());
                    retained.save(path)?;
                }
                return Err(Error::Diverged { term, epoch });
            }
        },
    };
    let full = build_stage2_checkpoint(ckpt, cfg, &outcome, tasks.len());
    Ok((full, outcome))
}

fn build_stage2_checkpoint(
    stage1: &Checkpoint,
    cfg: &RunConfig,
    outcome: &FusionOutcome,
    n_experts: usize,
) -> Checkpoint {
    Checkpoint {
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        encoder_params: stage1.encoder_params.clone(),
        z: stage1.z.clone(),
        pretrain_trace: stage1.pretrain_trace.clone(),
        stage2: Some(Stage2State {
            fusion_params: outcome.params.clone(),
            n_experts,
            pseudo: outcome.pseudo.clone(),
            trace: outcome.trace.clone(),
            fused: outcome.fused.clone(),
            gates: outcome.gates.clone(),
            predicted: outcome.predicted.clone(),
        }),
    }
}

/// The full two-stage run.
pub fn train(
    g: &Graph,
    cfg: &RunConfig,
    retain_on_divergence: Option<&Path>,
) -> Result<TrainResult> {
    let started = Instant::now();
    let (stage1, _) = run_pretrain(g, cfg)?;
    let (ckpt, outcome) = run_fusion_stage(g, &stage1, cfg, retain_on_divergence)?;

    let metrics = g.labels().map(|truth| {
        let r = ClusteringResult::new(outcome.predicted.clone(), truth.to_vec())
            .expect("predictions cover every node");
        Metrics {
            acc: clustering_accuracy(&r),
            nmi: nmi(&r),
            f1: macro_f1(&r),
        }
    });
    let report = RunReport {
        seed: cfg.seed,
        config: cfg.clone(),
        n_nodes: g.n_nodes(),
        n_clusters: fuse::resolve_n_clusters(cfg, g)?,
        metrics,
        pretrain_trace: ckpt.pretrain_trace.clone(),
        fusion_trace: outcome.trace.clone(),
        gate_summary: GateSummary::from_gates(&outcome.gates),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainResult {
        report,
        checkpoint: ckpt,
    })
}

fn check_dataset_shapes(g: &Graph, ckpt: &Checkpoint) -> Result<()> {
    let d_in = ckpt.encoder_params.value(ENCODER_W1).rows();
    if g.n_features() != d_in {
        return Err(Error::shape(
            "checkpoint vs dataset features",
            format!("{d_in}"),
            format!("{}", g.n_features()),
        ));
    }
    if g.n_nodes() != ckpt.z.rows() {
        return Err(Error::shape(
            "checkpoint vs dataset nodes",
            format!("{}", ckpt.z.rows()),
            format!("{}", g.n_nodes()),
        ));
    }
    Ok(())
}

/// Recomputes embeddings, assignments, and metrics from a finished
/// checkpoint without training.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, g: &Graph) -> Result<RunReport> {
    let started = Instant::now();
    check_dataset_shapes(g, ckpt)?;
    let stage2 = ckpt.stage2()?;
    let adj = normalize_adjacency(g);

    let z = encoder_forward(&ckpt.encoder_params, g.features(), &adj)?;
    let net = FusionNetwork::from_params(
        &stage2.fusion_params,
        stage2.n_experts,
        ckpt.config.expert_activation,
    );
    if net.dim() != z.cols() {
        return Err(Error::shape(
            "checkpoint embedding width",
            format!("{}", net.dim()),
            format!("{}", z.cols()),
        ));
    }
    let (_, gates, fused) = net.fused_embedding(&z, &adj)?;
    let centers = ClusterCenters(stage2.fusion_params.value(fuse::CENTERS_PARAM).clone());
    let q = soft_assign(&fused, &centers);
    let predicted = q.hard_labels();

    let metrics = g.labels().map(|truth| {
        let r = ClusteringResult::new(predicted.clone(), truth.to_vec())
            .expect("predictions cover every node");
        Metrics {
            acc: clustering_accuracy(&r),
            nmi: nmi(&r),
            f1: macro_f1(&r),
        }
    });
    Ok(RunReport {
        seed: ckpt.config.seed,
        config: ckpt.config.clone(),
        n_nodes: g.n_nodes(),
        n_clusters: q.n_clusters(),
        metrics,
        pretrain_trace: ckpt.pretrain_trace.clone(),
        fusion_trace: stage2.trace.clone(),
        gate_summary: GateSummary::from_gates(gates.matrix()),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Writes the fused embeddings, gate matrix, hard assignments, and the
/// per-epoch loss breakdown as CSV files.
pub fn export_artifacts(ckpt: &Checkpoint, out_dir: &Path) -> Result<()> {
    let stage2 = ckpt.stage2()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    write_matrix_csv(&out_dir.join("fused_embeddings.csv"), &stage2.fused)?;
    write_matrix_csv(&out_dir.join("gates.csv"), &stage2.gates)?;

    write_lines(
        &out_dir.join("assignments.csv"),
        "node,cluster",
        stage2
            .predicted
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{i},{c}")),
    )?;

    write_lines(
        &out_dir.join("losses.csv"),
        "epoch,total,pseudo_label,structure,ssl,clustering",
        stage2.trace.iter().map(|l| {
            format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                l.epoch, l.total, l.pseudo_label, l.structure, l.ssl, l.clustering
            )
        }),
    )?;

    write_lines(
        &out_dir.join("pretrain_losses.csv"),
        "epoch,total,reconstruction",
        ckpt.pretrain_trace
            .iter()
            .map(|l| format!("{},{:.17e},{:.17e}", l.epoch, l.total, l.reconstruction)),
    )?;
    Ok(())
}

fn write_matrix_csv(path: &Path, m: &crate::numerics::dense::DenseMatrix) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_lines(
    path: &Path,
    header: &str,
    rows: impl Iterator<Item = String>,
) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(w, "{row}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
