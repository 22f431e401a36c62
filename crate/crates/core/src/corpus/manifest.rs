//! JSON-Lines manifests: one `{"id", "image", "caption"}` object per line, image paths
//! relative to the manifest's directory, images stored as 8-bit RGB PNG.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FigureRecord;
use crate::imaging::Image;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub caption: String,
}

/// Parses every line before touching any image, so syntax errors surface first.
pub fn read_entries(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if entry.caption.trim().is_empty() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty caption".into(),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Loads a manifest and its images, in file order. Every missing image is reported at once.
pub fn load_manifest(path: &Path) -> Result<Vec<FigureRecord>> {
    let entries = read_entries(path)?;
    let base = base_dir(path);
    let missing: Vec<String> = entries
        .iter()
        .filter(|e| !base.join(&e.image).is_file())
        .map(|e| e.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingImages { ids: missing });
    }
    entries
        .par_iter()
        .map(|e| {
            let image = Image::load_png(&base.join(&e.image))?;
            FigureRecord::new(e.id.clone(), image, e.caption.clone())
        })
        .collect()
}

/// Writes `images/<id>.png` for each record plus `manifest.jsonl` under `dir`.
pub fn write_manifest(dir: &Path, records: &[FigureRecord]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    records
        .par_iter()
        .map(|r| r.image.save_png(&images.join(format!("{}.png", r.id))))
        .collect::<Result<Vec<()>>>()?;
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for r in records {
        let entry = ManifestEntry {
            id: r.id.clone(),
            image: format!("images/{}.png", r.id),
            caption: r.caption.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(path)
}
