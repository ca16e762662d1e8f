//! Binary checkpoint: magic, version, a JSON header and little-endian f32
//! weights.
//!
//! ```text
//! b"GLABCKPT" | u32 version | u32 header_len | header JSON | f32 weights...
//! ```
//!
//! The header carries both configs, a name/shape/offset manifest of the
//! weights, the training seed and step count.

use std::fs;
use std::path::Path;

use glab_core::denoiser::{Denoiser, DenoiserConfig, ParamLayout};
use glab_core::diffusion::DiffusionConfig;
use glab_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"GLABCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub train_seed: u64,
    pub steps: usize,
    pub null_trained: bool,
    pub manifest: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub model: Denoiser,
}

fn manifest(layout: &ParamLayout) -> Vec<ManifestEntry> {
    layout
        .entries()
        .iter()
        .map(|e| ManifestEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            offset: e.offset,
        })
        .collect()
}

impl Checkpoint {
    pub fn new(model: Denoiser, diffusion: DiffusionConfig, train_seed: u64, steps: usize) -> Self {
        let header = Header {
            denoiser: model.config().clone(),
            diffusion,
            train_seed,
            steps,
            null_trained: model.null_trained(),
            manifest: manifest(model.layout()),
        };
        Self { header, model }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.model.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for &p in self.model.params() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = 16 + hlen;
        if bytes.len() < body {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..body])
            .map_err(|e| bad(format!("bad header: {e}")))?;
        header.denoiser.validate()?;
        header.diffusion.validate()?;
        let layout = ParamLayout::new(&header.denoiser);
        if header.manifest != manifest(&layout) {
            return Err(bad("manifest does not match the model config".into()));
        }
        let count: usize = header
            .manifest
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        let weights = &bytes[body..];
        if weights.len() != 4 * count {
            return Err(bad(format!(
                "manifest describes {} weights ({} bytes) but {} bytes follow",
                count,
                4 * count,
                weights.len()
            )));
        }
        let params = weights
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let model = Denoiser::from_params(header.denoiser.clone(), params, header.null_trained)?;
        Ok(Self { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::Io {
                path: parent.to_path_buf(),
                source: e,
            })?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use glab_core::denoiser::{init_weights, InputShape};

    fn model() -> Denoiser {
        let cfg = DenoiserConfig {
            input: InputShape::Vector { dims: 2, tokens: 4 },
            patch_size: 1,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_dim: 16,
            num_classes: 3,
            time_embed_dim: 4,
        };
        init_weights(&cfg, 1).unwrap()
    }

    #[test]
    fn bytes_round_trip() {
        let ck = Checkpoint::new(model(), DiffusionConfig::default(), 7, 12);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_corruption() {
        let ck = Checkpoint::new(model(), DiffusionConfig::default(), 7, 12);
        let bytes = ck.to_bytes();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&wrong_magic),
            Err(Error::Checkpoint(_))
        ));
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong_version)
            .unwrap_err()
            .to_string()
            .contains("version"));
        let truncated = &bytes[..bytes.len() - 4];
        assert!(matches!(
            Checkpoint::from_bytes(truncated),
            Err(Error::Checkpoint(_))
        ));
    }
}
