//! Operator template registry: a JSON manifest mapping operator ids to
//! template files, layered over the built-in templates.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use promptflow_core::operators::TemplateSet;
use promptflow_core::OperatorId;

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid registry manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("operator `{op}` is computed locally and takes no template")]
    NotTemplated { op: OperatorId },
    #[error("template for `{op}` lacks the {placeholder} placeholder")]
    MissingPlaceholder { op: OperatorId, placeholder: &'static str },
}

fn read(path: &Path) -> Result<String, RegistryError> {
    std::fs::read_to_string(path).map_err(|source| RegistryError::Io { path: path.to_path_buf(), source })
}

/// Placeholder every template for `op` must contain.
pub fn required_placeholder(op: OperatorId) -> &'static str {
    match op {
        OperatorId::DefineSort => "{{Sections}}",
        OperatorId::Reflect => "{{Bad_Case_Reason_List}}",
        _ => "{{Module}}",
    }
}

/// Loads the manifest at `path`. Template paths are relative to the
/// manifest's directory; unknown operator ids fail to parse.
pub fn load(path: &Path) -> Result<TemplateSet, RegistryError> {
    let text = read(path)?;
    let manifest: BTreeMap<OperatorId, PathBuf> = serde_json::from_str(&text)
        .map_err(|e| RegistryError::Manifest { path: path.to_path_buf(), message: e.to_string() })?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut set = TemplateSet::default();
    for (op, file) in manifest {
        if !op.uses_template() {
            return Err(RegistryError::NotTemplated { op });
        }
        let template = read(&base.join(file))?;
        let placeholder = required_placeholder(op);
        if !template.contains(placeholder) {
            return Err(RegistryError::MissingPlaceholder { op, placeholder });
        }
        set.set(op, template);
    }
    Ok(set)
}
