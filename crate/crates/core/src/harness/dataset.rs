use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{mix_seed, sha256_hex};
use crate::error::{Error, Result};
use crate::scene::{generate_scene, Scene, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub boxes: usize,
    /// Hex SHA-256 of the scene file's bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub count: usize,
    pub scene_config_hash: String,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Write `count` scenes plus a manifest into `out`. Scene `i` uses the
/// seed derived from `(seed, i)`; reruns are byte-identical.
pub fn cmd_gen(cfg: &SceneConfig, seed: u64, count: usize, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let s = mix_seed(seed, i as u64);
        let scene = generate_scene(cfg, s)?;
        let json = scene.to_json()?;
        let file = format!("scene_{i:05}.json");
        fs::write(out.join(&file), json.as_bytes())?;
        entries.push(ManifestEntry { file, seed: s, boxes: scene.boxes.len(), sha256: sha256_hex(json.as_bytes()) });
    }
    let cfg_json = serde_json::to_string(cfg)?;
    let manifest = Manifest { seed, count, scene_config_hash: sha256_hex(cfg_json.as_bytes()), entries };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Load every scene listed in a dataset's manifest, verifying hashes.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let path = dir.join(MANIFEST_FILE);
    let text =
        fs::read_to_string(&path).map_err(|e| Error::Argument(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.entries.is_empty() {
        return Err(Error::NoScenes(dir.display().to_string()));
    }
    manifest
        .entries
        .iter()
        .map(|e| {
            let bytes = fs::read(dir.join(&e.file))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::Argument(format!("hash mismatch for {}", e.file)));
            }
            let s = std::str::from_utf8(&bytes).map_err(|_| Error::Argument(format!("{} is not UTF-8", e.file)))?;
            Scene::from_json(s)
        })
        .collect()
}
