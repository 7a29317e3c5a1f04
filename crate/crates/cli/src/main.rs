use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use graphfuse_core::error::{Error, Result};
use graphfuse_core::graph::save_graph;
use graphfuse_core::pipeline::{
    evaluate_checkpoint, export_artifacts, load_dataset, run_fusion_stage, run_pretrain, train,
    Checkpoint, DatasetSource, RunConfig, RunReport,
};

#[derive(Parser)]
#[command(
    name = "graphfuse",
    about = "Attributed-graph clustering via per-node fusion of self-supervised task features",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a stochastic block model graph as CSV files.
    GenSbm(GenSbmArgs),
    /// Stage one: multi-task encoder pretraining.
    Pretrain(PretrainArgs),
    /// Stage two: fusion training from a stage-one checkpoint.
    Fuse(FuseArgs),
    /// Both stages end to end.
    Full(FullArgs),
    /// Recompute metrics from a finished checkpoint.
    Eval(EvalArgs),
    /// Export embeddings, gates, assignments, and loss traces as CSV.
    Export(ExportArgs),
}

#[derive(Args)]
struct DatasetArgs {
    /// Node feature CSV (node_id, f0, f1, ...).
    #[arg(long, requires = "edges")]
    nodes: Option<PathBuf>,
    /// Undirected edge CSV (u, v).
    #[arg(long, requires = "nodes")]
    edges: Option<PathBuf>,
    /// Optional label CSV (node_id, class).
    #[arg(long, requires = "nodes")]
    labels: Option<PathBuf>,

    /// Generate an in-memory block-model graph instead of reading files.
    #[arg(long, conflicts_with = "nodes")]
    sbm_blocks: Option<usize>,
    #[arg(long, default_value_t = 50)]
    sbm_nodes_per_block: usize,
    #[arg(long, default_value_t = 0.2)]
    sbm_p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    sbm_p_out: f64,
    #[arg(long, default_value_t = 16)]
    sbm_feature_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    sbm_feature_shift: f64,
    /// Seed for the generated graph; defaults to the run seed.
    #[arg(long)]
    sbm_seed: Option<u64>,
}

impl DatasetArgs {
    fn source(&self, run_seed: u64) -> Result<DatasetSource> {
        match (&self.nodes, &self.edges, self.sbm_blocks) {
            (Some(nodes), Some(edges), None) => Ok(DatasetSource::Files {
                nodes: nodes.clone(),
                edges: edges.clone(),
                labels: self.labels.clone(),
            }),
            (None, None, Some(blocks)) => Ok(DatasetSource::Sbm {
                blocks,
                nodes_per_block: self.sbm_nodes_per_block,
                p_in: self.sbm_p_in,
                p_out: self.sbm_p_out,
                feature_dim: self.sbm_feature_dim,
                feature_shift: self.sbm_feature_shift,
                seed: self.sbm_seed.unwrap_or(run_seed),
            }),
            _ => Err(Error::Config(
                "pass either --nodes/--edges (CSV files) or --sbm-blocks (generated graph)".into(),
            )),
        }
    }
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; command-line flags override its fields.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named defaults: cora, citeseer, photo, computers, cs.
    #[arg(long)]
    preset: Option<String>,

    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    fusion_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the summed pretext losses in the fusion objective.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Weight of the clustering alignment loss.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Pseudo-label confidence percentile.
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long)]
    n_clusters: Option<usize>,
    /// Comma-separated task list (par,clu,pairdis,pairsim,dgi).
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    ssl_weight_pretrain: Option<f64>,
    /// Score all N² adjacency entries during pretraining.
    #[arg(long)]
    full_reconstruction: bool,
    /// Use linear experts instead of ReLU.
    #[arg(long)]
    linear_experts: bool,
    /// Drop the pseudo-label loss (ablation).
    #[arg(long)]
    no_pseudo_label_loss: bool,
    /// Drop the graph-structure loss (ablation).
    #[arg(long)]
    no_structure_loss: bool,
    #[arg(long)]
    refresh_pseudo_every: Option<usize>,
    #[arg(long)]
    n_parts: Option<usize>,
    #[arg(long)]
    clu_clusters: Option<usize>,
    #[arg(long)]
    pairdis_max_hop: Option<usize>,
    #[arg(long)]
    pairdis_pairs_per_node: Option<usize>,
    #[arg(long)]
    pairsim_per_node: Option<usize>,
    /// Dump the gate matrix as CSV into this directory during training.
    #[arg(long)]
    dump_gates_dir: Option<PathBuf>,
    #[arg(long)]
    dump_gates_every: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            RunConfig::from_toml(&text)?
        } else if let Some(name) = &self.preset {
            RunConfig::preset(name)?
        } else {
            RunConfig::default()
        };
        self.apply_overrides(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_overrides(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.pretrain_epochs {
            cfg.pretrain_epochs = v;
        }
        if let Some(v) = self.fusion_epochs {
            cfg.fusion_epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.lambda2 = v;
        }
        if let Some(v) = self.percentile {
            cfg.percentile = v;
        }
        if let Some(v) = self.n_clusters {
            cfg.n_clusters = Some(v);
        }
        if let Some(v) = &self.tasks {
            cfg.tasks = v.clone();
        }
        if let Some(v) = self.hidden_dim {
            cfg.encoder.hidden = v;
        }
        if let Some(v) = self.embedding_dim {
            cfg.encoder.out = v;
        }
        if let Some(v) = self.ssl_weight_pretrain {
            cfg.ssl_weight_pretrain = v;
        }
        if self.full_reconstruction {
            cfg.full_reconstruction = true;
        }
        if self.linear_experts {
            cfg.expert_activation = graphfuse_core::fusion::ExpertActivation::Identity;
        }
        if self.no_pseudo_label_loss {
            cfg.use_pseudo_label_loss = false;
        }
        if self.no_structure_loss {
            cfg.use_structure_loss = false;
        }
        if let Some(v) = self.refresh_pseudo_every {
            cfg.refresh_pseudo_every = Some(v);
        }
        if let Some(v) = self.n_parts {
            cfg.task_config.n_parts = v;
        }
        if let Some(v) = self.clu_clusters {
            cfg.task_config.clu_clusters = v;
        }
        if let Some(v) = self.pairdis_max_hop {
            cfg.task_config.pairdis_max_hop = v;
        }
        if let Some(v) = self.pairdis_pairs_per_node {
            cfg.task_config.pairdis_pairs_per_node = v;
        }
        if let Some(v) = self.pairsim_per_node {
            cfg.task_config.pairsim_per_node = v;
        }
        if let Some(v) = &self.dump_gates_dir {
            cfg.gate_dump_dir = Some(v.clone());
        }
        if let Some(v) = self.dump_gates_every {
            cfg.gate_dump_every = v;
        }
    }
}

#[derive(Args)]
struct GenSbmArgs {
    #[arg(long)]
    blocks: usize,
    #[arg(long)]
    nodes_per_block: usize,
    #[arg(long)]
    p_in: f64,
    #[arg(long)]
    p_out: f64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    feature_shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Where to write the stage-one checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    /// Stage-one (or stage-two) checkpoint to start from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Where to write the finished checkpoint.
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Per-epoch loss breakdown CSV.
    #[arg(long)]
    metrics_csv: Option<PathBuf>,
    /// Full report as JSON.
    #[arg(long)]
    report_json: Option<PathBuf>,
}

#[derive(Args)]
struct FullArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    metrics_csv: Option<PathBuf>,
    #[arg(long)]
    report_json: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    dataset: DatasetArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    report_json: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenSbm(args) => gen_sbm(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Full(args) => cmd_full(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Export(args) => cmd_export(args),
    }
}

fn gen_sbm(args: GenSbmArgs) -> Result<()> {
    let g = graphfuse_core::graph::generate_sbm(
        args.blocks,
        args.nodes_per_block,
        args.p_in,
        args.p_out,
        args.feature_dim,
        args.feature_shift,
        args.seed,
    )?;
    save_graph(&g, &args.out_dir)?;
    println!(
        "wrote {} nodes, {} edges to {}",
        g.n_nodes(),
        g.undirected_edges().len(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_pretrain(args: PretrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let g = load_dataset(&args.dataset.source(cfg.seed)?)?;
    let (ckpt, outcome) = run_pretrain(&g, &cfg)?;
    ckpt.save(&args.checkpoint)?;
    let last = outcome.trace.last().expect("at least one epoch");
    println!(
        "pretrained {} epochs; final loss {:.6} (reconstruction {:.6}); checkpoint {}",
        outcome.trace.len(),
        last.total,
        last.reconstruction,
        args.checkpoint.display()
    );
    Ok(())
}

fn cmd_fuse(args: FuseArgs) -> Result<()> {
    let base = Checkpoint::load(&args.checkpoint)?;
    let mut cfg = base.config.clone();
    args.config.apply_overrides(&mut cfg);
    cfg.validate()?;
    check_frozen_fields(&base.config, &cfg)?;

    let g = load_dataset(&args.dataset.source(cfg.seed)?)?;
    let (ckpt, _) = run_fusion_stage(&g, &base, &cfg, Some(&args.out_checkpoint))?;
    ckpt.save(&args.out_checkpoint)?;
    let report = evaluate_checkpoint(&ckpt, &g)?;
    finish_run(&report, &ckpt, args.metrics_csv, args.report_json)
}

/// Stage-two overrides must not change anything the stage-one heads and
/// supervision were generated from.
fn check_frozen_fields(base: &RunConfig, cfg: &RunConfig) -> Result<()> {
    if cfg.tasks != base.tasks {
        let known: Vec<&String> = cfg.tasks.iter().filter(|t| !base.tasks.contains(t)).collect();
        if !known.is_empty() {
            return Err(Error::Config(format!(
                "fuse cannot add tasks missing from the pretrain checkpoint: {known:?}"
            )));
        }
    }
    if cfg.task_config != base.task_config {
        return Err(Error::Config(
            "task generation knobs are frozen by the pretrain checkpoint".into(),
        ));
    }
    if cfg.encoder.hidden != base.encoder.hidden || cfg.encoder.out != base.encoder.out {
        return Err(Error::Config(
            "encoder dimensions are frozen by the pretrain checkpoint".into(),
        ));
    }
    if cfg.seed != base.seed {
        return Err(Error::Config(
            "the seed is frozen by the pretrain checkpoint (supervision must match stage one)"
                .into(),
        ));
    }
    Ok(())
}

fn cmd_full(args: FullArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let g = load_dataset(&args.dataset.source(cfg.seed)?)?;
    let result = train(&g, &cfg, Some(&args.checkpoint))?;
    result.checkpoint.save(&args.checkpoint)?;
    finish_run(
        &result.report,
        &result.checkpoint,
        args.metrics_csv,
        args.report_json,
    )
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let g = load_dataset(&args.dataset.source(ckpt.config.seed)?)?;
    let report = evaluate_checkpoint(&ckpt, &g)?;
    if g.labels().is_none() {
        eprintln!("warning: dataset has no labels; metrics are unavailable");
    }
    print_report(&report);
    if let Some(path) = args.report_json {
        write_report_json(&report, &path)?;
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    export_artifacts(&ckpt, &args.out_dir)?;
    println!("exported artifacts to {}", args.out_dir.display());
    Ok(())
}

fn finish_run(
    report: &RunReport,
    ckpt: &Checkpoint,
    metrics_csv: Option<PathBuf>,
    report_json: Option<PathBuf>,
) -> Result<()> {
    if report.metrics.is_none() {
        eprintln!("warning: dataset has no labels; metrics are unavailable");
    }
    print_report(report);
    if let Some(path) = metrics_csv {
        write_metrics_csv(ckpt, &path)?;
    }
    if let Some(path) = report_json {
        write_report_json(report, &path)?;
    }
    Ok(())
}

fn print_report(report: &RunReport) {
    println!("{}", report.machine_line());
    print!("{}", report.human_table());
}

fn write_metrics_csv(ckpt: &Checkpoint, path: &PathBuf) -> Result<()> {
    use std::io::Write;
    let stage2 = ckpt.stage2()?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "epoch,total,pseudo_label,structure,ssl,clustering")
        .map_err(|e| Error::io(path, e))?;
    for l in &stage2.trace {
        writeln!(
            w,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            l.epoch, l.total, l.pseudo_label, l.structure, l.ssl, l.clustering
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn write_report_json(report: &RunReport, path: &PathBuf) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Checkpoint(format!("serialize report: {e}")))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
