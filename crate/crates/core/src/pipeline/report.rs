use serde::{Deserialize, Serialize};

use crate::numerics::dense::DenseMatrix;
use crate::pipeline::config::RunConfig;
use crate::pipeline::fuse::FusionEpochLosses;
use crate::pretrain::EpochLosses;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub nmi: f64,
    pub f1: f64,
}

/// Distribution statistics of the final gate matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateSummary {
    /// Mean weight per expert over all nodes.
    pub mean_weight: Vec<f64>,
    /// Mean of each node's largest expert weight.
    pub mean_max_weight: f64,
    /// Mean per-node entropy of the gate distribution.
    pub mean_entropy: f64,
}

impl GateSummary {
    pub fn from_gates(gates: &DenseMatrix) -> Self {
        let (n, k) = gates.shape();
        let mut mean_weight = vec![0.0; k];
        let mut mean_max = 0.0;
        let mut mean_entropy = 0.0;
        for i in 0..n {
            let row = gates.row(i);
            let mut mx: f64 = 0.0;
            let mut ent = 0.0;
            for (j, &w) in row.iter().enumerate() {
                mean_weight[j] += w;
                mx = mx.max(w);
                if w > 0.0 {
                    ent -= w * w.ln();
                }
            }
            mean_max += mx;
            mean_entropy += ent;
        }
        for w in &mut mean_weight {
            *w /= n as f64;
        }
        Self {
            mean_weight,
            mean_max_weight: mean_max / n as f64,
            mean_entropy: mean_entropy / n as f64,
        }
    }
}

/// The outcome of one run. Everything except `wall_clock_secs` is a pure
/// function of the configuration and seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config: RunConfig,
    pub n_nodes: usize,
    pub n_clusters: usize,
    /// Absent when the dataset carries no ground-truth labels.
    pub metrics: Option<Metrics>,
    pub pretrain_trace: Vec<EpochLosses>,
    pub fusion_trace: Vec<FusionEpochLosses>,
    pub gate_summary: GateSummary,
    pub wall_clock_secs: f64,
}

impl RunReport {
    /// Canonical JSON of the seed-determined content (wall clock excluded),
    /// used by determinism checks.
    pub fn deterministic_json(&self) -> String {
        let mut clone = self.clone();
        clone.wall_clock_secs = 0.0;
        serde_json::to_string(&clone).expect("report serializes")
    }

    /// One machine-readable summary line.
    pub fn machine_line(&self) -> String {
        let (acc, nmi, f1) = match self.metrics {
            Some(m) => (m.acc, m.nmi, m.f1),
            None => (f64::NAN, f64::NAN, f64::NAN),
        };
        let last = self.fusion_trace.last();
        format!(
            "RESULT seed={} n={} c={} acc={:.6} nmi={:.6} f1={:.6} loss={:.6} wall_clock_secs={:.3}",
            self.seed,
            self.n_nodes,
            self.n_clusters,
            acc,
            nmi,
            f1,
            last.map_or(f64::NAN, |l| l.total),
            self.wall_clock_secs,
        )
    }

    /// Small human-readable summary table.
    pub fn human_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>12}\n",
            "metric", "value"
        ));
        let mut push = |k: &str, v: String| out.push_str(&format!("{k:<22} {v:>12}\n"));
        push("nodes", self.n_nodes.to_string());
        push("clusters", self.n_clusters.to_string());
        push("seed", self.seed.to_string());
        match self.metrics {
            Some(m) => {
                push("accuracy", format!("{:.4}", m.acc));
                push("nmi", format!("{:.4}", m.nmi));
                push("macro-f1", format!("{:.4}", m.f1));
            }
            None => push("accuracy/nmi/f1", "n/a (no labels)".to_string()),
        }
        if let Some(l) = self.fusion_trace.last() {
            push("final total loss", format!("{:.6}", l.total));
        }
        push(
            "gate mean max weight",
            format!("{:.4}", self.gate_summary.mean_max_weight),
        );
        push("wall clock (s)", format!("{:.2}", self.wall_clock_secs));
        out
    }
}
