use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

/// Open-set roles as indices into the manifest's records, each list ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpenSetSplit {
    /// One image per enrolled identity.
    pub gallery: Vec<usize>,
    pub known_probes: Vec<usize>,
    pub unknown_probes: Vec<usize>,
}

/// Enrols `num_gallery_ids` identities drawn by `seed`, one gallery image
/// each. The remaining images of enrolled identities become known probes.
/// Of the identities that are not enrolled, `round(unknown_fraction · n)`
/// supply every one of their images as unknown probes.
pub fn split_open_set(
    manifest: &DatasetManifest,
    num_gallery_ids: usize,
    unknown_fraction: f64,
    seed: u64,
) -> Result<OpenSetSplit> {
    if !(0.0..=1.0).contains(&unknown_fraction) {
        return Err(Error::invalid(format!("unknown_fraction must lie in [0, 1], got {unknown_fraction}")));
    }
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_id.entry(r.identity).or_default().push(i);
    }
    let total = by_id.len();
    if num_gallery_ids == 0 || num_gallery_ids > total {
        return Err(Error::invalid(format!(
            "cannot enrol {num_gallery_ids} identities from a manifest with {total}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<usize> = by_id.keys().copied().collect();
    ids.shuffle(&mut rng);
    split_open_set_enrolled(manifest, &ids[..num_gallery_ids], unknown_fraction, rng.gen())
}

/// Like [`split_open_set`] but with the enrolled identities given. Every
/// other identity is a candidate unknown.
pub fn split_open_set_enrolled(
    manifest: &DatasetManifest,
    enrolled: &[usize],
    unknown_fraction: f64,
    seed: u64,
) -> Result<OpenSetSplit> {
    if !(0.0..=1.0).contains(&unknown_fraction) {
        return Err(Error::invalid(format!("unknown_fraction must lie in [0, 1], got {unknown_fraction}")));
    }
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_id.entry(r.identity).or_default().push(i);
    }
    if enrolled.is_empty() {
        return Err(Error::invalid("no identities are enrolled"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = OpenSetSplit { gallery: Vec::new(), known_probes: Vec::new(), unknown_probes: Vec::new() };
    let mut sorted_enrolled = enrolled.to_vec();
    sorted_enrolled.sort_unstable();
    sorted_enrolled.dedup();
    for id in &sorted_enrolled {
        let images = by_id
            .get(id)
            .ok_or_else(|| Error::invalid(format!("enrolled identity {id} has no images")))?;
        if images.len() < 2 {
            return Err(Error::invalid(format!(
                "enrolled identity {id} has {} image(s); a gallery image and a probe are needed",
                images.len()
            )));
        }
        let pick = rng.gen_range(0..images.len());
        for (k, &i) in images.iter().enumerate() {
            if k == pick {
                split.gallery.push(i);
            } else {
                split.known_probes.push(i);
            }
        }
    }
    let mut rest: Vec<usize> = by_id.keys().copied().filter(|id| sorted_enrolled.binary_search(id).is_err()).collect();
    rest.shuffle(&mut rng);
    let num_unknown = (unknown_fraction * rest.len() as f64).round() as usize;
    for id in &rest[..num_unknown] {
        split.unknown_probes.extend(&by_id[id]);
    }
    split.gallery.sort_unstable();
    split.known_probes.sort_unstable();
    split.unknown_probes.sort_unstable();
    Ok(split)
}
