//! Scene fixture directories: one entity document per `*.json` file.

use std::path::{Path, PathBuf};

use dtds_core::model::{kinds, parse_entity, ModelError};
use dtds_core::Entity;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Malformed { path: PathBuf, source: ModelError },
}

/// Creation order: repositories, channels, representation and context
/// references, assets, scene heads, anything else.
pub fn creation_rank(entity_type: &str) -> u8 {
    match entity_type {
        kinds::ASSET_REPOSITORY => 0,
        kinds::ACM => 1,
        kinds::REPRESENTATION_REFERENCE | kinds::CONTEXT_REFERENCE => 2,
        kinds::STATIC_ASSET | kinds::DYNAMIC_ASSET => 3,
        kinds::SCENE_HEAD => 4,
        _ => 5,
    }
}

pub fn dependency_order(mut entities: Vec<Entity>) -> Vec<Entity> {
    entities.sort_by(|a, b| {
        creation_rank(&a.entity_type)
            .cmp(&creation_rank(&b.entity_type))
            .then_with(|| a.id.cmp(&b.id))
    });
    entities
}

/// Every `*.json` document of `dir`, in creation order.
pub fn load_entity_dir(dir: &Path) -> Result<Vec<Entity>, FixtureError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| FixtureError::Io { path, source }
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(io(&f))?;
        out.push(parse_entity(&text).map_err(|source| FixtureError::Malformed { path: f.clone(), source })?);
    }
    Ok(dependency_order(out))
}
