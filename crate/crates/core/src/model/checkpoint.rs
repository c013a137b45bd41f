use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FtModel, HeadKind, ModelConfig, TokenFeature};
use crate::error::{Error, Result};
use crate::nn::{ParamShape, ParamStore};
use crate::schema::SchemaManifest;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub head: HeadKind,
    pub features: Vec<TokenFeature>,
    pub params: Vec<ParamShape>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocessing: Option<SchemaManifest>,
}

/// Write `manifest.json` and `params.bin` (little-endian `f64`) into `dir`.
pub fn save_checkpoint(model: &FtModel, preprocessing: Option<&SchemaManifest>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: model.config,
        head: model.head,
        features: model.features.clone(),
        params: model.params.shapes(),
        preprocessing: preprocessing.cloned(),
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(PARAMS);
    fs::write(&path, model.params.to_blob()).map_err(|e| Error::io(&path, e))
}

/// Load a checkpoint, checking that the stored parameter layout is exactly
/// the one the manifest's architecture implies.
pub fn load_checkpoint(dir: &Path) -> Result<(FtModel, Option<SchemaManifest>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Checkpoint = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let skeleton = FtModel::from_features(manifest.config, manifest.head, manifest.features.clone(), 0)?;
    if skeleton.params.shapes() != manifest.params {
        return Err(Error::Checkpoint(
            "parameter layout does not match the declared architecture".into(),
        ));
    }
    let path = dir.join(PARAMS);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let params = ParamStore::from_blob(&manifest.params, &blob)?;
    if let Some(m) = &manifest.preprocessing {
        let names: Vec<&str> = manifest.features.iter().map(|f| f.name.as_str()).collect();
        if names.iter().any(|n| m.schema.get(n).is_none()) {
            return Err(Error::Checkpoint("model features missing from stored schema".into()));
        }
    }
    Ok((
        FtModel {
            config: manifest.config,
            head: manifest.head,
            features: manifest.features,
            params,
        },
        manifest.preprocessing,
    ))
}
