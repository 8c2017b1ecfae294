//! Dataset manifests: one feature-file path per line, plus a sidecar
//! header (`<manifest>.header`) naming the category count and list.

use std::fs;
use std::path::{Path, PathBuf};

use super::format::read_feature_file;
use super::record::VideoRecord;
use super::DataError;

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Feature-file paths, resolved against the manifest's directory.
    pub paths: Vec<PathBuf>,
    pub categories: Vec<String>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }
}

pub fn header_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".header");
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes a manifest listing `entries` (as given, typically relative to
/// the manifest's directory) and its header.
pub fn write_manifest(path: &Path, entries: &[String], categories: &[String]) -> Result<(), DataError> {
    let mut body = String::new();
    for e in entries {
        body.push_str(e);
        body.push('\n');
    }
    fs::write(path, body).map_err(io_err(path))?;
    let header = format!("num_categories={}\ncategories={}\n", categories.len(), categories.join(","));
    let hpath = header_path(path);
    fs::write(&hpath, header).map_err(io_err(&hpath))
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let paths = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| base.join(l))
        .collect();

    let hpath = header_path(path);
    let header = fs::read_to_string(&hpath).map_err(io_err(&hpath))?;
    let mut count = None;
    let mut categories = None;
    for line in header.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DataError::Manifest(format!("{}: bad header line {line:?}", hpath.display())))?;
        match k.trim() {
            "num_categories" => {
                count = Some(v.trim().parse::<usize>().map_err(|e| {
                    DataError::Manifest(format!("{}: num_categories: {e}", hpath.display()))
                })?)
            }
            "categories" => categories = Some(v.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>()),
            _ => {}
        }
    }
    let count = count.ok_or_else(|| DataError::Manifest(format!("{}: missing num_categories", hpath.display())))?;
    let categories = categories.unwrap_or_else(|| (0..count).map(|c| format!("class{c}")).collect());
    if categories.len() != count {
        return Err(DataError::Manifest(format!(
            "{}: {} category names for {} categories",
            hpath.display(),
            categories.len(),
            count
        )));
    }
    Ok(Manifest { paths, categories })
}

/// Reads a manifest and every feature file it lists, checking that all
/// records share the manifest's category count.
pub fn load_records(path: &Path) -> Result<(Manifest, Vec<VideoRecord>), DataError> {
    let manifest = read_manifest(path)?;
    let mut records = Vec::with_capacity(manifest.paths.len());
    for p in &manifest.paths {
        let bytes = fs::read(p).map_err(io_err(p))?;
        let rec = read_feature_file(&bytes).map_err(|source| DataError::Format {
            path: p.clone(),
            source,
        })?;
        if rec.num_classes() != manifest.num_classes() {
            return Err(DataError::Manifest(format!(
                "{}: {} categories, manifest has {}",
                p.display(),
                rec.num_classes(),
                manifest.num_classes()
            )));
        }
        records.push(rec);
    }
    Ok((manifest, records))
}
