//! Labeled images, resolution pairs and protocol splits.

mod image;
mod manifest;
mod resample;
mod split;
mod synthetic;

pub use image::{decode_netpbm, encode_netpbm, load_image};
pub use manifest::{load_manifest, DatasetManifest, ManifestRecord, MANIFEST_HEADER};
pub use resample::{downsample, horizontal_flip};
pub use split::{split_open_set, split_open_set_enrolled, OpenSetSplit};
pub use synthetic::{generate_synthetic, SyntheticConfig, FAMILY_SIZE};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// In-memory images aligned with their manifest records.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Loads every image listed in the manifest; all must share one `[C, R, R]` shape.
    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        let images = manifest.records.iter().map(|r| load_image(&r.image_path)).collect::<Result<Vec<_>>>()?;
        let ds = Dataset { images, manifest };
        ds.base_resolution()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.labels()
    }

    pub fn channels(&self) -> usize {
        self.images.first().map_or(0, |t| t.shape()[0])
    }

    /// Common square side of all images.
    pub fn base_resolution(&self) -> Result<usize> {
        let first = self.images.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
        let shape = first.shape().to_vec();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::invalid(format!("images must be square [C, R, R], got {shape:?}")));
        }
        if let Some((i, t)) = self.images.iter().enumerate().find(|(_, t)| t.shape() != shape.as_slice()) {
            return Err(Error::invalid(format!(
                "image {} has shape {:?}, expected {shape:?}",
                self.manifest.records[i].image_path.display(),
                t.shape()
            )));
        }
        Ok(shape[1])
    }

    /// Records at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            manifest: DatasetManifest { records: indices.iter().map(|&i| self.manifest.records[i].clone()).collect() },
        }
    }

    /// Per identity, the first images (in record order) train and the last
    /// `eval_per_id` evaluate.
    pub fn split_train_eval(&self, eval_per_id: usize) -> Result<(Dataset, Dataset)> {
        let mut seen = vec![0usize; self.manifest.num_identities()];
        let mut counts = vec![0usize; seen.len()];
        for r in &self.manifest.records {
            counts[r.identity] += 1;
        }
        if let Some(id) = counts.iter().position(|&c| c <= eval_per_id) {
            return Err(Error::invalid(format!(
                "identity {id} has {} images; need more than eval_per_id = {eval_per_id}",
                counts[id]
            )));
        }
        let (mut train, mut eval) = (Vec::new(), Vec::new());
        for (i, r) in self.manifest.records.iter().enumerate() {
            let k = seen[r.identity];
            seen[r.identity] += 1;
            if k < counts[r.identity] - eval_per_id {
                train.push(i);
            } else {
                eval.push(i);
            }
        }
        Ok((self.subset(&train), self.subset(&eval)))
    }

    /// Every image downsampled to `resolution`.
    pub fn at_resolution(&self, resolution: usize) -> Result<Vec<Tensor>> {
        self.images.iter().map(|img| downsample(img, resolution)).collect()
    }
}

/// Training and evaluation data for one open-set experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    /// Images of the enrolled identities minus their evaluation images.
    pub train: Dataset,
    /// Evaluation images of enrolled identities plus every image of the
    /// held-out identities.
    pub eval: Dataset,
    /// Labels (in both datasets) of the enrolled identities: `0..train_ids`.
    pub enrolled: Vec<usize>,
}

/// Draws `train_ids` identities by `seed` to train on and enrol; the rest are
/// never trained on. Enrolled identities are relabelled `0..train_ids` and
/// held-out ones follow, each group in ascending original label order. The
/// last `eval_per_id` images (record order) of each enrolled identity are
/// kept for evaluation.
pub fn make_protocol(dataset: &Dataset, train_ids: usize, eval_per_id: usize, seed: u64) -> Result<Protocol> {
    let ids = dataset.manifest.identities();
    if train_ids < 2 || train_ids > ids.len() {
        return Err(Error::invalid(format!(
            "train_ids must lie in [2, {}] for this dataset, got {train_ids}",
            ids.len()
        )));
    }
    let mut shuffled = ids.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut enrolled: Vec<usize> = shuffled[..train_ids].to_vec();
    let mut held_out: Vec<usize> = shuffled[train_ids..].to_vec();
    enrolled.sort_unstable();
    held_out.sort_unstable();
    let mut relabel = vec![usize::MAX; ids.iter().max().map_or(0, |m| m + 1)];
    for (new, &old) in enrolled.iter().chain(&held_out).enumerate() {
        relabel[old] = new;
    }
    let mut counts = vec![0usize; relabel.len()];
    for r in &dataset.manifest.records {
        counts[r.identity] += 1;
    }
    if let Some(&id) = enrolled.iter().find(|&&id| counts[id] <= eval_per_id) {
        return Err(Error::invalid(format!(
            "identity {id} has {} images; need more than eval_per_id = {eval_per_id}",
            counts[id]
        )));
    }
    let mut seen = vec![0usize; relabel.len()];
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for (i, r) in dataset.manifest.records.iter().enumerate() {
        let k = seen[r.identity];
        seen[r.identity] += 1;
        let is_enrolled = relabel[r.identity] < train_ids;
        if is_enrolled && k < counts[r.identity] - eval_per_id {
            train.push(i);
        } else {
            eval.push(i);
        }
    }
    let remap = |d: Dataset| {
        let mut d = d;
        for r in &mut d.manifest.records {
            r.identity = relabel[r.identity];
        }
        d
    };
    Ok(Protocol {
        train: remap(dataset.subset(&train)),
        eval: remap(dataset.subset(&eval)),
        enrolled: (0..train_ids).collect(),
    })
}

/// The same source image at teacher and student resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolutionPair {
    pub x_t: Tensor,
    pub x_s: Tensor,
    pub label: usize,
}

/// One pair per image, in dataset order.
pub fn make_pairs(dataset: &Dataset, teacher_res: usize, student_res: usize) -> Result<Vec<ResolutionPair>> {
    if student_res > teacher_res {
        return Err(Error::invalid(format!(
            "student resolution {student_res} exceeds teacher resolution {teacher_res}"
        )));
    }
    dataset
        .images
        .iter()
        .zip(&dataset.manifest.records)
        .map(|(img, r)| {
            Ok(ResolutionPair { x_t: downsample(img, teacher_res)?, x_s: downsample(img, student_res)?, label: r.identity })
        })
        .collect()
}
