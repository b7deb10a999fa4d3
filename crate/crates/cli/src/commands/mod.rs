//! One module per subcommand plus the shared corpus/output plumbing.

pub mod eval;
pub mod infer;
pub mod stats;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use serde::Serialize;
use vidsgg_data::formats::{load_manifest, load_split};
use vidsgg_data::SceneRecord;

use crate::args::Split;
use crate::error::{io_at, CliError};

/// Loads every scene of one manifest split.
pub(crate) fn load_corpus(
    data: &Path,
    split: Split,
    with_features: bool,
) -> Result<Vec<SceneRecord>, CliError> {
    let manifest = load_manifest(&data.join("manifest.json"))?;
    let stems = match split {
        Split::Train => &manifest.train,
        Split::Val => &manifest.val,
    };
    if stems.is_empty() {
        return Err(CliError::data(format!(
            "{}: the {} split lists no scenes",
            data.join("manifest.json").display(),
            match split {
                Split::Train => "train",
                Split::Val => "val",
            }
        )));
    }
    Ok(load_split(data, stems, with_features)?)
}

/// Creates the directory a file will be written into.
pub(crate) fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_at(parent, e))?;
    }
    Ok(())
}

/// Pretty JSON plus a trailing newline, byte-stable across runs.
pub(crate) fn write_json<T: Serialize>(path: &PathBuf, value: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| io_at(path, e))
}
