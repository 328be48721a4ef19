//! Reader for FiWI-style directory trees.
//!
//! ```text
//! root/
//!   Pictorial/ page01.png page01.csv ...
//!   Textual/   ...
//!   Mixed/     ...
//! ```
//!
//! Each screenshot (PNG or PPM) needs a fixation CSV with the same stem.
//! Subfolders whose names are not a category are skipped.

use std::fs;
use std::path::{Path, PathBuf};

use super::{io, Category, DataError, FixationSet, Stimulus};

/// Loads every stimulus, resized to `width x height` with fixations
/// rescaled proportionally. Output is sorted by category folder, then file name.
pub fn load_fiwi(root: impl AsRef<Path>, width: usize, height: usize) -> Result<Vec<(Stimulus, FixationSet)>, DataError> {
    let root = root.as_ref();
    let mut out = Vec::new();
    for dir in sorted_entries(root)? {
        if !dir.is_dir() {
            continue;
        }
        let Some(category) = dir.file_name().and_then(|n| n.to_str()).and_then(Category::from_folder) else {
            continue;
        };
        for file in sorted_entries(&dir)? {
            let is_image = matches!(
                file.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("png" | "ppm")
            );
            if !is_image {
                continue;
            }
            let stim = io::load_stimulus(&file, category)?;
            let csv = file.with_extension("csv");
            if !csv.is_file() {
                return Err(DataError::MissingFixations {
                    stimulus: stim.id.clone(),
                    expected: csv,
                });
            }
            let fix = io::load_fixations(&csv, &stim.id)?;
            fix.check_bounds(stim.width(), stim.height()).map_err(|e| e.at(&csv))?;
            let native = (stim.width(), stim.height());
            out.push((stim.resized(width, height), fix.rescaled(native, (width, height))));
        }
    }
    Ok(out)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut v = fs::read_dir(dir)
        .map_err(|e| DataError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| DataError::io(dir, err)))
        .collect::<Result<Vec<_>, _>>()?;
    v.sort();
    Ok(v)
}
