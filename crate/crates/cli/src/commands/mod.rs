pub mod ablate;
pub mod eval;
pub mod histogram;
pub mod simulate;

use std::path::Path;

use crate::error::{CliError, CliResult};

/// Writes `contents` to `dir/name`.
pub(crate) fn write_file(dir: &Path, name: &str, contents: &str) -> CliResult<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::runtime(e).context(format!("writing {}", path.display())))
}
