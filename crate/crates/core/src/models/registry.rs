use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Family, ModelArtifact};
use crate::error::{Error, Result};

/// Artifacts keyed by target course, then family.
pub type Registry = BTreeMap<String, BTreeMap<Family, ModelArtifact>>;

/// `<root>/<target_course>/<family>.json`
pub fn artifact_path(root: &Path, target: &str, family: Family) -> PathBuf {
    root.join(target).join(format!("{}.json", family.label()))
}

pub fn save_artifact(root: &Path, artifact: &ModelArtifact) -> Result<PathBuf> {
    let path = artifact_path(root, &artifact.target_course, artifact.family);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut json = artifact.to_json()?;
    json.push('\n');
    fs::write(&path, json)?;
    Ok(path)
}

pub fn load_artifact(path: &Path) -> Result<ModelArtifact> {
    ModelArtifact::from_json(&fs::read_to_string(path)?)
}

/// Loads every `<target>/<family>.json` under `root`. Files whose name is not
/// a family label are ignored.
pub fn load_registry(root: &Path) -> Result<Registry> {
    let mut registry = Registry::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for file in files {
            let Some(family) = file.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<Family>().ok()) else {
                continue;
            };
            let artifact = load_artifact(&file)?;
            if artifact.family != family {
                return Err(Error::InvalidConfig(format!(
                    "{} holds a {} artifact",
                    file.display(),
                    artifact.family
                )));
            }
            registry.entry(artifact.target_course.clone()).or_default().insert(family, artifact);
        }
    }
    Ok(registry)
}
