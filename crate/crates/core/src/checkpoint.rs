//! Model checkpoints stored as tensor files.
//!
//! Entries are the parameters of the audio-visual model (`visual.*`,
//! `audio.*`, `proj.*`), optionally the objectness model (`objectness.*`),
//! and `meta.config_hash` holding 8 hash bytes as floats.

use std::path::Path;

use crate::error::{Error, Result};
use crate::format::TensorFile;
use crate::models::{export_params, import_params, AvModel, ModelConfig, ObjectnessModel};
use crate::tensor::Tensor;

pub const HASH_ENTRY: &str = "meta.config_hash";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Option<AvModel>,
    pub objectness: Option<ObjectnessModel>,
    pub config_hash: [u8; 8],
}

impl Checkpoint {
    pub fn to_file(&self) -> Result<TensorFile> {
        let mut f = TensorFile::new();
        if let Some(m) = &self.model {
            export_params(m, "", &mut f)?;
        }
        if let Some(o) = &self.objectness {
            export_params(o, "objectness", &mut f)?;
        }
        let hash = self.config_hash.iter().map(|&b| b as f64).collect();
        f.push(HASH_ENTRY, Tensor::from_vec(hash))?;
        Ok(f)
    }

    /// Rebuild the models described by `config` from `file`. Sections absent
    /// from the file are `None`.
    pub fn from_file(file: &TensorFile, config: &ModelConfig) -> Result<Self> {
        let hash_t = file.require(HASH_ENTRY)?;
        if hash_t.shape() != [8] || hash_t.data().iter().any(|&v| !(0.0..=255.0).contains(&v) || v.fract() != 0.0) {
            return Err(Error::BadHeader(format!("`{HASH_ENTRY}` is not 8 bytes")));
        }
        let mut config_hash = [0u8; 8];
        for (b, v) in config_hash.iter_mut().zip(hash_t.data()) {
            *b = *v as u8;
        }
        let model = if file.names().any(|n| n.starts_with("visual.")) {
            let mut m = AvModel::init(config, 0)?;
            import_params(&mut m, "", file)?;
            Some(m)
        } else {
            None
        };
        let objectness = if file.names().any(|n| n.starts_with("objectness.")) {
            let mut o = ObjectnessModel::init(config, 0)?;
            import_params(&mut o, "objectness", file)?;
            Some(o)
        } else {
            None
        };
        let known = |n: &str| {
            n == HASH_ENTRY || ["visual.", "audio.", "proj.", "objectness."].iter().any(|p| n.starts_with(p))
        };
        if let Some(extra) = file.names().find(|n| !known(n)) {
            return Err(Error::BadHeader(format!("unexpected entry `{extra}`")));
        }
        Ok(Self {
            model,
            objectness,
            config_hash,
        })
    }

    pub fn hash_hex(&self) -> String {
        self.config_hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Write `ckpt`, creating parent directories.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ckpt.to_file()?.save(path)
}

pub fn load_checkpoint(path: &Path, config: &ModelConfig) -> Result<Checkpoint> {
    Checkpoint::from_file(&TensorFile::load(path)?, config)
}
