//! Dynamic fusion network: one graph-convolution expert per pretext task, a
//! per-node gating network, and the convex feature combination.
//!
//! Training builds the forward pass on the shared tape
//! ([`forward_on_tape`]); inference extracts a [`FusionNetwork`] view from
//! the parameter set and evaluates the same operations eagerly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PreparedAdjacency;
use crate::numerics::dense::{softmax_rows, DenseMatrix};
use crate::numerics::params::ParameterSet;
use crate::numerics::sparse::spmm;
use crate::numerics::tape::{BoundParams, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertActivation {
    Relu,
    /// Linear experts, kept for ablation runs.
    Identity,
}

impl Default for ExpertActivation {
    fn default() -> Self {
        ExpertActivation::Relu
    }
}

pub fn expert_param(k: usize) -> String {
    format!("fusion.expert.{k}")
}

pub const GATE_PARAM: &str = "fusion.gate";

/// Registers `n_experts` square expert matrices and the gate matrix.
pub fn init_fusion_params(
    n_experts: usize,
    dim: usize,
    params: &mut ParameterSet,
    rng: &mut impl Rng,
) {
    for k in 0..n_experts {
        params.add_uniform(&expert_param(k), dim, dim, rng);
    }
    params.add_uniform(GATE_PARAM, dim, n_experts, rng);
}

/// Tape handles produced by one fusion forward pass.
pub struct FusionForward {
    pub experts: Vec<Var>,
    pub gates: Var,
    pub fused: Var,
}

/// Full fusion pass on the tape: `Z_k = φ(Â Z W_k)` per expert,
/// `G = softmax(Z W_gate)` per node, fused rows `Σ_k G[i,k] Z_k[i,:]`.
pub fn forward_on_tape<'g>(
    tape: &mut Tape<'g>,
    bound: &BoundParams,
    z: Var,
    adj: &'g PreparedAdjacency,
    n_experts: usize,
    activation: ExpertActivation,
) -> FusionForward {
    let az = tape.spmm(adj.normalized(), z);
    let experts: Vec<Var> = (0..n_experts)
        .map(|k| {
            let w = bound.var(&expert_param(k));
            let pre = tape.matmul(az, w);
            match activation {
                ExpertActivation::Relu => tape.relu(pre),
                ExpertActivation::Identity => pre,
            }
        })
        .collect();
    let gate_w = bound.var(GATE_PARAM);
    let logits = tape.matmul(z, gate_w);
    let gates = tape.softmax_rows(logits);
    let fused = tape.fuse(experts.clone(), gates);
    FusionForward {
        experts,
        gates,
        fused,
    }
}

/// One expert's forward pass on the tape, used for corrupted twins.
pub fn expert_on_tape<'g>(
    tape: &mut Tape<'g>,
    bound: &BoundParams,
    z: Var,
    adj: &'g PreparedAdjacency,
    k: usize,
    activation: ExpertActivation,
) -> Var {
    let az = tape.spmm(adj.normalized(), z);
    let w = bound.var(&expert_param(k));
    let pre = tape.matmul(az, w);
    match activation {
        ExpertActivation::Relu => tape.relu(pre),
        ExpertActivation::Identity => pre,
    }
}

/// Row-stochastic per-node expert weights.
#[derive(Clone, Debug)]
pub struct GatingWeights(DenseMatrix);

impl GatingWeights {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn n_experts(&self) -> usize {
        self.0.cols()
    }
}

/// Read-only fusion weights extracted from a parameter set, for inference
/// and export.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionNetwork {
    expert_weights: Vec<DenseMatrix>,
    gate_weights: DenseMatrix,
    activation: ExpertActivation,
}

impl FusionNetwork {
    pub fn from_params(
        params: &ParameterSet,
        n_experts: usize,
        activation: ExpertActivation,
    ) -> Self {
        let expert_weights = (0..n_experts)
            .map(|k| params.value(&expert_param(k)).clone())
            .collect();
        Self {
            expert_weights,
            gate_weights: params.value(GATE_PARAM).clone(),
            activation,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.expert_weights.len()
    }

    pub fn dim(&self) -> usize {
        self.gate_weights.rows()
    }

    pub fn activation(&self) -> ExpertActivation {
        self.activation
    }

    /// `Z_k = φ(Â Z W_k)`.
    pub fn expert_forward(
        &self,
        z: &DenseMatrix,
        adj: &PreparedAdjacency,
        k: usize,
    ) -> Result<DenseMatrix> {
        let w = self.expert_weights.get(k).ok_or_else(|| {
            Error::InvalidInput(format!(
                "expert index {k} out of range (K = {})",
                self.n_experts()
            ))
        })?;
        let az = spmm(adj.normalized(), z)?;
        let pre = az.matmul(w)?;
        Ok(match self.activation {
            ExpertActivation::Relu => pre.map(|v| v.max(0.0)),
            ExpertActivation::Identity => pre,
        })
    }

    /// Per-node softmax over expert logits `Z W_gate`.
    pub fn gate(&self, z: &DenseMatrix) -> Result<GatingWeights> {
        let logits = z.matmul(&self.gate_weights)?;
        Ok(GatingWeights(softmax_rows(&logits)))
    }

    /// Convex per-node combination of expert outputs.
    pub fn fuse(outputs: &[DenseMatrix], gates: &GatingWeights) -> Result<DenseMatrix> {
        if outputs.is_empty() {
            return Err(Error::InvalidInput("fuse needs at least one expert".into()));
        }
        if outputs.len() != gates.n_experts() {
            return Err(Error::shape(
                "fuse",
                format!("{} experts", gates.n_experts()),
                format!("{} outputs", outputs.len()),
            ));
        }
        let (n, d) = outputs[0].shape();
        for o in outputs {
            if o.shape() != (n, d) {
                return Err(Error::shape(
                    "fuse",
                    format!("{n}x{d}"),
                    format!("{}x{}", o.rows(), o.cols()),
                ));
            }
        }
        if gates.matrix().rows() != n {
            return Err(Error::shape(
                "fuse",
                format!("{n} gate rows"),
                format!("{}", gates.matrix().rows()),
            ));
        }
        let mut fused = DenseMatrix::zeros(n, d);
        for i in 0..n {
            for (k, o) in outputs.iter().enumerate() {
                let w = gates.matrix().get(i, k);
                let row = o.row(i);
                for (f, &x) in fused.row_mut(i).iter_mut().zip(row) {
                    *f += w * x;
                }
            }
        }
        Ok(fused)
    }

    /// Experts, gates, and fused embedding in one pass.
    pub fn fused_embedding(
        &self,
        z: &DenseMatrix,
        adj: &PreparedAdjacency,
    ) -> Result<(Vec<DenseMatrix>, GatingWeights, DenseMatrix)> {
        let outputs: Vec<DenseMatrix> = (0..self.n_experts())
            .map(|k| self.expert_forward(z, adj, k))
            .collect::<Result<_>>()?;
        let gates = self.gate(z)?;
        let fused = Self::fuse(&outputs, &gates)?;
        Ok((outputs, gates, fused))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{normalize_adjacency, Graph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn isolated_nodes(n: usize, d: usize) -> PreparedAdjacency {
        // no edges: self-loops only, so the normalized adjacency is I
        let g = Graph::new(DenseMatrix::zeros(n, d), &[], None).unwrap();
        normalize_adjacency(&g)
    }

    fn random_net(n_experts: usize, dim: usize, seed: u64) -> (ParameterSet, FusionNetwork) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        init_fusion_params(n_experts, dim, &mut params, &mut rng);
        let net = FusionNetwork::from_params(&params, n_experts, ExpertActivation::Relu);
        (params, net)
    }

    #[test]
    fn identity_weights_pass_embeddings_through() {
        let dim = 3;
        let mut params = ParameterSet::new();
        let mut eye = DenseMatrix::zeros(dim, dim);
        for i in 0..dim {
            eye.set(i, i, 1.0);
        }
        params.add(&expert_param(0), eye);
        params.add(GATE_PARAM, DenseMatrix::zeros(dim, 1));
        let net = FusionNetwork::from_params(&params, 1, ExpertActivation::Identity);

        let adj = isolated_nodes(2, dim);
        let z = DenseMatrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]);
        let out = net.expert_forward(&z, &adj, 0).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn zero_weights_give_zero_expert_output() {
        let dim = 3;
        let mut params = ParameterSet::new();
        params.add(&expert_param(0), DenseMatrix::zeros(dim, dim));
        params.add(GATE_PARAM, DenseMatrix::zeros(dim, 1));
        let net = FusionNetwork::from_params(&params, 1, ExpertActivation::Relu);
        let adj = isolated_nodes(2, dim);
        let z = DenseMatrix::from_vec(2, 3, vec![1.0; 6]);
        let out = net.expert_forward(&z, &adj, 0).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn expert_matches_dense_triple_product() {
        // dense Â * Z * W oracle on an 8-node instance
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 8;
        let dim = 4;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen::<f64>() < 0.4 {
                    edges.push((i, j));
                }
            }
        }
        let g = Graph::new(DenseMatrix::zeros(n, 1), &edges, None).unwrap();
        let adj = normalize_adjacency(&g);
        let (params, net) = random_net(2, dim, 5);
        let z = DenseMatrix::from_vec(n, dim, (0..n * dim).map(|v| (v as f64).sin()).collect());

        let ours = net.expert_forward(&z, &adj, 1).unwrap();
        let oracle = adj
            .normalized()
            .to_dense()
            .matmul(&z)
            .unwrap()
            .matmul(params.value(&expert_param(1)))
            .unwrap()
            .map(|v| v.max(0.0));
        for (a, b) in ours.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn expert_index_out_of_range() {
        let (_, net) = random_net(2, 3, 0);
        let adj = isolated_nodes(2, 3);
        let z = DenseMatrix::zeros(2, 3);
        assert!(net.expert_forward(&z, &adj, 2).is_err());
    }

    #[test]
    fn zero_gate_weights_give_uniform_gates() {
        let dim = 3;
        let k = 4;
        let mut params = ParameterSet::new();
        for i in 0..k {
            params.add(&expert_param(i), DenseMatrix::zeros(dim, dim));
        }
        params.add(GATE_PARAM, DenseMatrix::zeros(dim, k));
        let net = FusionNetwork::from_params(&params, k, ExpertActivation::Relu);
        let z = DenseMatrix::from_vec(2, 3, vec![0.4, -1.0, 2.0, 0.0, 0.5, -0.5]);
        let gates = net.gate(&z).unwrap();
        for &v in gates.matrix().data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_rows_gate_identically() {
        let (_, net) = random_net(3, 4, 9);
        let row = vec![0.3, -0.7, 1.1, 0.2];
        let z = DenseMatrix::from_rows(&[row.clone(), row]);
        let gates = net.gate(&z).unwrap();
        assert_eq!(gates.matrix().row(0), gates.matrix().row(1));
    }

    #[test]
    fn gate_matches_softmax_composition_oracle() {
        let (params, net) = random_net(3, 4, 10);
        let z = DenseMatrix::from_vec(5, 4, (0..20).map(|v| (v as f64 * 0.37).cos()).collect());
        let gates = net.gate(&z).unwrap();
        let oracle = softmax_rows(&z.matmul(params.value(GATE_PARAM)).unwrap());
        for (a, b) in gates.matrix().data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_expert_fuses_to_itself() {
        let e = DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let gates = GatingWeights(DenseMatrix::from_vec(2, 1, vec![1.0, 1.0]));
        let fused = FusionNetwork::fuse(&[e.clone()], &gates).unwrap();
        assert_eq!(fused, e);
    }

    #[test]
    fn uniform_gates_average_experts() {
        let e1 = DenseMatrix::from_vec(2, 2, vec![0.0, 2.0, 4.0, 6.0]);
        let e2 = DenseMatrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 2.0]);
        let gates = GatingWeights(DenseMatrix::from_vec(2, 2, vec![0.5; 4]));
        let fused = FusionNetwork::fuse(&[e1, e2], &gates).unwrap();
        assert_eq!(fused.data(), &[1.0, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn fuse_matches_scalar_loop_oracle() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (n, d, k) = (6, 3, 5);
        let experts: Vec<DenseMatrix> = (0..k)
            .map(|_| {
                DenseMatrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            })
            .collect();
        let logits =
            DenseMatrix::from_vec(n, k, (0..n * k).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let gates = GatingWeights(softmax_rows(&logits));
        let fused = FusionNetwork::fuse(&experts, &gates).unwrap();

        for i in 0..n {
            for c in 0..d {
                let mut expect = 0.0;
                for (kk, e) in experts.iter().enumerate() {
                    expect += gates.matrix().get(i, kk) * e.get(i, c);
                }
                assert!((fused.get(i, c) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_rejects_count_mismatch() {
        let e = DenseMatrix::zeros(2, 2);
        let gates = GatingWeights(DenseMatrix::from_vec(2, 2, vec![0.5; 4]));
        assert!(FusionNetwork::fuse(&[e], &gates).is_err());
    }

    #[test]
    fn tape_and_eager_paths_agree() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 7;
        let dim = 4;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen::<f64>() < 0.35 {
                    edges.push((i, j));
                }
            }
        }
        let g = Graph::new(DenseMatrix::zeros(n, 1), &edges, None).unwrap();
        let adj = normalize_adjacency(&g);
        let (params, net) = random_net(3, dim, 55);
        let z = DenseMatrix::from_vec(n, dim, (0..n * dim).map(|v| (v as f64 * 0.19).sin()).collect());

        let mut tape = Tape::new();
        let bound = crate::numerics::tape::bind_params(&mut tape, &params);
        let zv = tape.constant(z.clone());
        let fwd = forward_on_tape(&mut tape, &bound, zv, &adj, 3, ExpertActivation::Relu);

        let (_, gates, fused) = net.fused_embedding(&z, &adj).unwrap();
        assert_eq!(tape.value(fwd.fused), &fused);
        assert_eq!(tape.value(fwd.gates), gates.matrix());
    }

    #[test]
    fn fused_rows_stay_in_expert_envelope() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..50 {
            let (n, d, k) = (5, 3, 4);
            let experts: Vec<DenseMatrix> = (0..k)
                .map(|_| {
                    DenseMatrix::from_vec(
                        n,
                        d,
                        (0..n * d).map(|_| rng.gen_range(-3.0..3.0)).collect(),
                    )
                })
                .collect();
            let logits = DenseMatrix::from_vec(
                n,
                k,
                (0..n * k).map(|_| rng.gen_range(-4.0..4.0)).collect(),
            );
            let gates = GatingWeights(softmax_rows(&logits));
            let fused = FusionNetwork::fuse(&experts, &gates).unwrap();
            for i in 0..n {
                for c in 0..d {
                    let lo = experts.iter().map(|e| e.get(i, c)).fold(f64::INFINITY, f64::min);
                    let hi = experts
                        .iter()
                        .map(|e| e.get(i, c))
                        .fold(f64::NEG_INFINITY, f64::max);
                    let v = fused.get(i, c);
                    assert!(lo <= v && v <= hi, "trial {trial}: {v} outside [{lo}, {hi}]");
                }
            }
        }
    }
}
