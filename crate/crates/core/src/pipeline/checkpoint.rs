use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::dense::DenseMatrix;
use crate::numerics::params::ParameterSet;
use crate::pipeline::config::RunConfig;
use crate::pipeline::fuse::FusionEpochLosses;
use crate::pretrain::EpochLosses;
use crate::selfsup::PseudoLabelSet;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON training state. Stage one always fills `encoder_params`
/// and `z`; the fusion stage adds `stage2`. JSON float round-tripping is
/// exact, so reloads are bit-identical.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    /// Encoder weights and stage-one task heads.
    pub encoder_params: ParameterSet,
    /// Pretrained embeddings (input to the fusion stage).
    pub z: DenseMatrix,
    pub pretrain_trace: Vec<EpochLosses>,
    pub stage2: Option<Stage2State>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stage2State {
    /// Experts, gate, centers, and the fusion-stage task heads.
    pub fusion_params: ParameterSet,
    pub n_experts: usize,
    pub pseudo: PseudoLabelSet,
    pub trace: Vec<FusionEpochLosses>,
    /// Final fused embeddings, gates, and hard assignments, stored so
    /// export needs no dataset.
    pub fused: DenseMatrix,
    pub gates: DenseMatrix,
    pub predicted: Vec<usize>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let writer = std::io::BufWriter::new(file);
        serde_json::to_writer(writer, self)
            .map_err(|e| Error::Checkpoint(format!("write {}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let ckpt: Checkpoint = serde_json::from_reader(reader)
            .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file has {}, this build expects {CHECKPOINT_VERSION}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn stage2(&self) -> Result<&Stage2State> {
        self.stage2.as_ref().ok_or_else(|| {
            Error::Checkpoint("checkpoint has no fusion stage; run `fuse` or `full` first".into())
        })
    }
}
