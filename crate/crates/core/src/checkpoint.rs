//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `MDMTCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the JSON manifest, then the payload
//! of concatenated little-endian `f32` tensor blobs. The manifest records each
//! tensor's offset and shape, stage flags, the model config, the hashes of
//! frozen parameter sets and a SHA-256 digest of the payload. A SHA-256 of
//! all preceding bytes closes the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MDMTCKPT";
pub const FORMAT_VERSION: u32 = 1;
/// Trailing SHA-256 over everything before it.
const DIGEST_LEN: usize = 32;

pub const BACKBONE_HASH: &str = "backbone";
pub const BACKBONE_DISCRIMINATOR_HASH: &str = "backbone+discriminator";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub backbone: bool,
    pub discriminator: bool,
    pub experts: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tensors: Vec<TensorEntry>,
    pub stages: StageFlags,
    pub config: ModelConfig,
    pub frozen_hashes: BTreeMap<String, String>,
    pub payload_len: u64,
    pub payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub stages: StageFlags,
    pub frozen_hashes: BTreeMap<String, String>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn new<T: Scalar>(model: &Model<T>) -> Self {
        Checkpoint {
            model: model.cast(),
            stages: StageFlags::default(),
            frozen_hashes: BTreeMap::new(),
        }
    }

    /// Error naming the first incomplete stage up to and including `stage`.
    pub fn require(&self, stage: &'static str) -> Result<()> {
        let order: [(&'static str, bool); 3] = [
            ("backbone", self.stages.backbone),
            ("discriminator", self.stages.discriminator),
            ("experts", self.stages.experts),
        ];
        for (name, done) in order {
            if !done {
                return Err(Error::StageIncomplete(name));
            }
            if name == stage {
                return Ok(());
            }
        }
        Ok(())
    }

    /// Compare a recorded frozen-set hash with the model's current value.
    pub fn verify_hash(&self, key: &str) -> Result<()> {
        let Some(recorded) = self.frozen_hashes.get(key) else {
            return Ok(());
        };
        let now = match key {
            BACKBONE_HASH => self.model.backbone_hash(),
            BACKBONE_DISCRIMINATOR_HASH => self.model.backbone_and_discriminator_hash(),
            _ => return Err(Error::InvalidArgument(format!("unknown frozen set {key}"))),
        };
        if &now != recorded {
            return Err(Error::FrozenMutation(format!("{key} parameters changed")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::with_capacity(self.model.params.num_scalars() * 4);
        let mut tensors = Vec::with_capacity(self.model.params.len());
        for (name, t) in self.model.params.iter() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                dtype: f32::DTYPE.to_string(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            tensors,
            stages: self.stages,
            config: self.model.config.clone(),
            frozen_hashes: self.frozen_hashes.clone(),
            payload_len: payload.len() as u64,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let m = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + m.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        out.extend_from_slice(&m);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Integrity(msg.to_string());
        if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (bytes, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(bytes).as_slice() != digest {
            return Err(bad("file digest mismatch"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Integrity(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if mlen > body.len() {
            return Err(bad("manifest extends past end of file"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..mlen]).map_err(|e| Error::Integrity(format!("manifest: {e}")))?;
        let payload = &body[mlen..];
        if payload.len() as u64 != manifest.payload_len {
            return Err(Error::Integrity(format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_len
            )));
        }
        if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(bad("payload digest mismatch"));
        }
        let mut params = ParamStore::new();
        for e in &manifest.tensors {
            if e.dtype != f32::DTYPE {
                return Err(Error::Integrity(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > payload.len() {
                return Err(Error::Integrity(format!("{}: blob out of bounds", e.name)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
        manifest.config.validate()?;
        Ok(Checkpoint {
            model: Model {
                config: manifest.config,
                params,
            },
            stages: manifest.stages,
            frozen_hashes: manifest.frozen_hashes,
        })
    }

    /// Write through a temporary sibling and rename, so readers never see a
    /// half-written file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn model<T: Scalar>(&self) -> Model<T> {
        self.model.cast()
    }
}
