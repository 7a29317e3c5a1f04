//! Stage-one training: a two-layer graph-convolution encoder optimized
//! against adjacency reconstruction plus the configured pretext-task losses
//! in a shared-encoder multi-task setup. Task heads attach directly to the
//! encoder output here; expert layers only exist in the fusion stage.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, PreparedAdjacency};
use crate::numerics::dense::DenseMatrix;
use crate::numerics::params::{adam_step, AdamConfig, ParameterSet};
use crate::numerics::rng::derive_rng;
use crate::numerics::sparse::spmm;
use crate::numerics::tape::{bind_params, BoundParams, Tape, Var};
use crate::tasks::SslTaskSet;

pub const ENCODER_W1: &str = "encoder.w1";
pub const ENCODER_W2: &str = "encoder.w2";

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// First-layer width (ReLU).
    pub hidden: usize,
    /// Output embedding width (linear).
    pub out: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            out: 128,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Multiplier on the summed pretext losses during this stage.
    pub ssl_weight: f64,
    pub seed: u64,
    /// Score every entry of the adjacency instead of a balanced sample;
    /// only sensible for small graphs.
    pub full_reconstruction: bool,
    pub encoder: EncoderConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            ssl_weight: 1.0,
            seed: 0,
            full_reconstruction: false,
            encoder: EncoderConfig::default(),
        }
    }
}

pub fn init_encoder_params(
    d_in: usize,
    cfg: &EncoderConfig,
    params: &mut ParameterSet,
    rng: &mut impl Rng,
) {
    params.add_uniform(ENCODER_W1, d_in, cfg.hidden, rng);
    params.add_uniform(ENCODER_W2, cfg.hidden, cfg.out, rng);
}

/// `activation(Â · z_in · w)`, eagerly.
pub fn gcn_layer(
    z_in: &DenseMatrix,
    adj: &PreparedAdjacency,
    w: &DenseMatrix,
    relu: bool,
) -> Result<DenseMatrix> {
    let az = spmm(adj.normalized(), z_in)?;
    let pre = az.matmul(w)?;
    Ok(if relu { pre.map(|v| v.max(0.0)) } else { pre })
}

/// Encoder forward on the tape. `ax` is the precomputed `Â X` constant so
/// the feature matrix never receives a gradient.
pub fn encoder_on_tape<'g>(
    tape: &mut Tape<'g>,
    bound: &BoundParams,
    ax: Var,
    adj: &'g PreparedAdjacency,
) -> Var {
    let w1 = bound.var(ENCODER_W1);
    let w2 = bound.var(ENCODER_W2);
    let pre1 = tape.matmul(ax, w1);
    let h1 = tape.relu(pre1);
    let ah1 = tape.spmm(adj.normalized(), h1);
    tape.matmul(ah1, w2)
}

/// Plain encoder forward, same operation order as the tape path.
pub fn encoder_forward(
    params: &ParameterSet,
    x: &DenseMatrix,
    adj: &PreparedAdjacency,
) -> Result<DenseMatrix> {
    let h1 = gcn_layer(x, adj, params.value(ENCODER_W1), true)?;
    gcn_layer(&h1, adj, params.value(ENCODER_W2), false)
}

/// Reconstruction targets: every positive entry of the self-loop adjacency
/// plus (for the sampled variant) an equal count of uniformly drawn zero
/// entries, reseeded per epoch.
pub struct ReconSample {
    pairs: Vec<(u32, u32)>,
    targets: Vec<f64>,
}

impl ReconSample {
    pub fn pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

pub fn sample_reconstruction(
    adj: &PreparedAdjacency,
    full: bool,
    seed: u64,
    epoch: u64,
) -> ReconSample {
    let n = adj.n();
    let a = adj.self_loop();
    let mut pairs = Vec::new();
    let mut targets = Vec::new();

    if full {
        for i in 0..n {
            for j in 0..n {
                pairs.push((i as u32, j as u32));
                targets.push(a.get(i, j));
            }
        }
        return ReconSample { pairs, targets };
    }

    for i in 0..n {
        for (j, _) in a.row(i) {
            pairs.push((i as u32, j as u32));
            targets.push(1.0);
        }
    }
    let n_pos = pairs.len();
    let mut rng = derive_rng(seed, "recon-negatives", epoch);
    let mut drawn = 0;
    while drawn < n_pos {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if a.get(i, j) == 0.0 {
            pairs.push((i as u32, j as u32));
            targets.push(0.0);
            drawn += 1;
        }
    }
    ReconSample { pairs, targets }
}

/// Mean binary cross-entropy between `sigmoid(z zᵀ)` and the sampled
/// adjacency entries.
pub fn reconstruction_loss_on_tape<'g>(
    tape: &mut Tape<'g>,
    z: Var,
    sample: &'g ReconSample,
) -> Var {
    let logits = tape.pair_dot(z, &sample.pairs);
    tape.bce_with_logits(logits, &sample.targets)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub per_task: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    /// Encoder weights plus task heads, ready for checkpointing.
    pub params: ParameterSet,
    /// Final embeddings after the last update.
    pub z: DenseMatrix,
    pub trace: Vec<EpochLosses>,
}

/// Runs the stage-one loop: encoder + heads against reconstruction plus the
/// summed task losses. Aborts with a diagnostic naming the offending term
/// if any loss turns non-finite.
pub fn pretrain(
    g: &Graph,
    adj: &PreparedAdjacency,
    tasks: &SslTaskSet,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    if cfg.epochs == 0 {
        return Err(Error::Config("pretraining needs at least one epoch".into()));
    }
    let mut params = ParameterSet::new();
    let mut rng = derive_rng(cfg.seed, "pretrain-init", 0);
    init_encoder_params(g.n_features(), &cfg.encoder, &mut params, &mut rng);
    tasks.init_heads(cfg.encoder.out, &mut params, cfg.seed);

    let adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let needs_corruption = tasks.iter().any(|t| t.needs_corruption());
    let ax = spmm(adj.normalized(), g.features())?;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let sample = sample_reconstruction(adj, cfg.full_reconstruction, cfg.seed, epoch as u64);
        let ax_corrupt = if needs_corruption {
            let mut perm: Vec<usize> = (0..g.n_nodes()).collect();
            perm.shuffle(&mut derive_rng(cfg.seed, "dgi-corrupt", epoch as u64));
            Some(spmm(adj.normalized(), &g.features().select_rows(&perm))?)
        } else {
            None
        };

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let ax_var = tape.constant(ax.clone());
        let z = encoder_on_tape(&mut tape, &bound, ax_var, adj);
        let z_corrupt = ax_corrupt.map(|axc| {
            let axc_var = tape.constant(axc);
            encoder_on_tape(&mut tape, &bound, axc_var, adj)
        });

        let recon = reconstruction_loss_on_tape(&mut tape, z, &sample);
        let mut terms = vec![(recon, 1.0)];
        let mut per_task = Vec::new();
        for task in tasks.iter() {
            let corrupted = task.needs_corruption().then(|| {
                z_corrupt.expect("corrupted embeddings prepared for tasks that need them")
            });
            let loss = task.loss(&mut tape, &bound, z, corrupted);
            per_task.push((task.name().to_string(), tape.value(loss).as_scalar()));
            terms.push((loss, cfg.ssl_weight));
        }
        let total = tape.weighted_sum(terms);

        let losses = EpochLosses {
            epoch,
            total: tape.value(total).as_scalar(),
            reconstruction: tape.value(recon).as_scalar(),
            per_task,
        };
        check_finite(&losses)?;
        trace.push(losses);

        let grads = tape.backward(total);
        bound.write_grads(&grads, &mut params);
        adam_step(&mut params, &adam);
    }

    let z = encoder_forward(&params, g.features(), adj)?;
    Ok(PretrainOutcome { params, z, trace })
}

fn check_finite(losses: &EpochLosses) -> Result<()> {
    let mut named: Vec<(&str, f64)> = vec![
        ("reconstruction", losses.reconstruction),
        ("total", losses.total),
    ];
    for (name, v) in &losses.per_task {
        named.push((name, *v));
    }
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::Diverged {
                term: name.to_string(),
                epoch: losses.epoch,
            });
        }
    }
    Ok(())
}
