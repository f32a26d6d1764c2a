use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use deepssm::alignment::{Exclusion, RawSample};
use deepssm::io::{read_lmk, read_manifest, read_pgm};
use deepssm::{BinaryMask, Image};

use crate::error::{CliError, CliResult};
use crate::run::Run;

pub const MASK_SUFFIX: &str = ".mask.pgm";
pub const IMAGE_SUFFIX: &str = ".pgm";
pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Sorted ids of files named `<id><suffix>` in `dir`, skipping names that end
/// in any of `exclude`.
pub fn list_ids(dir: &Path, suffix: &str, exclude: &[&str]) -> CliResult<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::data(format!("cannot list {}: {e}", dir.display())))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| !exclude.iter().any(|x| n.ends_with(x)))
        .filter_map(|n| n.strip_suffix(suffix).map(str::to_string))
        .filter(|id| !id.is_empty())
        .collect();
    ids.sort();
    Ok(ids)
}

/// Per-id spacing from `dir/manifest.tsv` when present.
pub fn manifest_spacing(run: &mut Run, dir: &Path) -> CliResult<BTreeMap<String, f64>> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = run.read_text(&path, false)?;
    let rows = read_manifest(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(rows.into_iter().map(|r| (r.id, r.spacing_mm)).collect())
}

pub fn load_mask(run: &mut Run, path: &Path, spacing: f64) -> CliResult<BinaryMask> {
    let bytes = run.read(path)?;
    read_pgm(&bytes)
        .and_then(|p| p.to_mask(spacing))
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn load_image(run: &mut Run, path: &Path) -> CliResult<Image> {
    let bytes = run.read(path)?;
    read_pgm(&bytes)
        .map(|p| p.to_image())
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Samples of a dataset directory (`<id>.pgm`, `<id>.mask.pgm`, `<id>.lmk`).
/// Unreadable samples are reported as exclusions instead of failing.
pub fn load_dataset(
    run: &mut Run,
    dir: &Path,
    spacing_flag: Option<f64>,
) -> CliResult<(Vec<RawSample>, Vec<Exclusion>)> {
    let spacing = manifest_spacing(run, dir)?;
    let ids = list_ids(dir, MASK_SUFFIX, &[])?;
    if ids.is_empty() {
        return Err(CliError::data(format!("no `*{MASK_SUFFIX}` files in {}", dir.display())));
    }
    let mut samples = Vec::new();
    let mut excluded = Vec::new();
    for id in ids {
        let sp = spacing_flag.or(spacing.get(&id).copied()).unwrap_or(1.0);
        let loaded = (|| -> CliResult<RawSample> {
            let image = load_image(run, &dir.join(format!("{id}{IMAGE_SUFFIX}")))?;
            let mask = load_mask(run, &dir.join(format!("{id}{MASK_SUFFIX}")), sp)?;
            let lpath = dir.join(format!("{id}.lmk"));
            let text = run.read_text(&lpath, false)?;
            let landmarks = read_lmk(&text).map_err(|e| CliError::data(format!("{}: {e}", lpath.display())))?;
            if image.width() != mask.width() || image.height() != mask.height() {
                return Err(CliError::data("image and mask sizes differ"));
            }
            Ok(RawSample { id: id.clone(), image, mask, landmarks })
        })();
        match loaded {
            Ok(s) => samples.push(s),
            Err(e) => excluded.push(Exclusion { image_id: id, reason: e.msg }),
        }
    }
    Ok((samples, excluded))
}
