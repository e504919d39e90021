use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 4] = ["path", "identity", "media_id", "detector_score"];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub image_path: PathBuf,
    pub identity: usize,
    /// Frames sharing a media id come from one image or clip.
    pub media_id: u64,
    pub detector_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.identity).collect()
    }

    /// Distinct identities, ascending.
    pub fn identities(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.identity).collect::<BTreeSet<_>>().into_iter().collect()
    }

    pub fn num_identities(&self) -> usize {
        self.identities().len()
    }

    /// Labels must cover `[0, num_identities)` without gaps and scores must lie in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        let ids = self.identities();
        if let Some((expected, &got)) = ids.iter().enumerate().find(|(i, &id)| *i != id) {
            return Err(Error::invalid(format!(
                "identity labels must be contiguous from 0; label {expected} is missing (next label is {got})"
            )));
        }
        if let Some(r) = self.records.iter().find(|r| !(0.0..=1.0).contains(&r.detector_score)) {
            return Err(Error::invalid(format!(
                "detector_score {} for {} is outside [0, 1]",
                r.detector_score,
                r.image_path.display()
            )));
        }
        Ok(())
    }
}

/// Reads a `path,identity,media_id,detector_score` CSV. Empty `media_id`
/// makes the image its own media; empty `detector_score` means 1.0.
/// Relative image paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Parse { path: path.to_path_buf(), line: 1, message: e.to_string() })?;
    let perr = |line: usize, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let header = reader.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(perr(1, format!("header must be exactly `{}`", MANIFEST_HEADER.join(","))));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| perr(line, e.to_string()))?;
        if row.len() != 4 {
            return Err(perr(line, format!("expected 4 fields, found {}", row.len())));
        }
        if row[0].is_empty() {
            return Err(perr(line, "empty path".into()));
        }
        let identity = row[1].parse::<usize>().map_err(|_| perr(line, format!("bad identity `{}`", &row[1])))?;
        let media = if row[2].is_empty() {
            None
        } else {
            Some(row[2].parse::<u64>().map_err(|_| perr(line, format!("bad media_id `{}`", &row[2])))?)
        };
        let score = if row[3].is_empty() {
            1.0
        } else {
            row[3].parse::<f64>().map_err(|_| perr(line, format!("bad detector_score `{}`", &row[3])))?
        };
        let p = PathBuf::from(&row[0]);
        let image_path = if p.is_absolute() { p } else { base.join(p) };
        rows.push((image_path, identity, media, score));
    }
    let next_media = rows.iter().filter_map(|r| r.2).max().map_or(0, |m| m + 1);
    let records = rows
        .into_iter()
        .enumerate()
        .map(|(i, (image_path, identity, media, detector_score))| ManifestRecord {
            image_path,
            identity,
            media_id: media.unwrap_or(next_media + i as u64),
            detector_score,
        })
        .collect();
    let manifest = DatasetManifest { records };
    manifest.validate().map_err(|e| perr(1, e.to_string()))?;
    Ok(manifest)
}
