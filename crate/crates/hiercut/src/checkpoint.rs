//! Network checkpoints: `HLNET1`, a little-endian u32 header length, a JSON
//! header, then every parameter as a little-endian f32 in canonical order.

use std::path::Path;

use hiercut_core::diffnet::{MicroUNet, UNetConfig};
use hiercut_core::{ClassTree, Fingerprint};
use serde::{Deserialize, Serialize};

use crate::error::{read, write, Error, Result};

pub const MAGIC: &[u8; 6] = b"HLNET1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub arch: UNetConfig,
    /// Leaf classes; the network emits one more channel for background.
    pub leaves: usize,
    pub leaf_fingerprint: Fingerprint,
    pub step: u64,
    pub parameters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub net: MicroUNet,
}

impl Checkpoint {
    pub fn new(net: MicroUNet, tree: &ClassTree, step: u64) -> Self {
        let header = CheckpointHeader {
            arch: *net.config(),
            leaves: tree.leaf_count(),
            leaf_fingerprint: tree.leaf_fingerprint(),
            step,
            parameters: net.params().scalar_count(),
        };
        Self { header, net }
    }

    /// Fails unless the checkpoint's output channels mean `tree`'s leaves.
    pub fn check_tree(&self, tree: &ClassTree) -> Result<()> {
        if self.header.leaf_fingerprint != tree.leaf_fingerprint() || self.header.leaves != tree.leaf_count() {
            return Err(Error::data(format!(
                "checkpoint leaf fingerprint {} ({} leaves) does not match tree {} ({} leaves)",
                self.header.leaf_fingerprint,
                self.header.leaves,
                tree.leaf_fingerprint(),
                tree.leaf_count()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(10 + header.len() + 4 * self.header.parameters);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for v in self.net.params().flat_values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::data(format!("not a checkpoint: {m}"));
        if bytes.len() < 10 || &bytes[..6] != MAGIC {
            return Err(bad("missing HLNET1 magic"));
        }
        let len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(10..10 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::data(format!("malformed checkpoint header: {e}")))?;
        let raw = &bytes[10 + len..];
        if raw.len() != 4 * header.parameters {
            return Err(bad(&format!("{} parameter bytes, header declares {}", raw.len(), 4 * header.parameters)));
        }
        if header.arch.classes != header.leaves + 1 {
            return Err(bad("output channels disagree with the leaf count"));
        }
        let values: Vec<f64> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        let net = MicroUNet::from_flat(header.arch, &values).map_err(|e| Error::data(format!("checkpoint: {e}")))?;
        Ok(Self { header, net })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?).map_err(|e| e.context(path.display()))
    }
}

/// Rounds every parameter through f32, as a save/load round trip would.
pub fn quantize(net: &MicroUNet) -> MicroUNet {
    let values: Vec<f64> = net.params().flat_values().iter().map(|&v| v as f32 as f64).collect();
    MicroUNet::from_flat(*net.config(), &values).expect("same layout")
}
