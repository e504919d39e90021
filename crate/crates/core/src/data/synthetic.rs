//! Procedural identity dataset.
//!
//! Identities are grouped in families of [`FAMILY_SIZE`]. A family shares a
//! few low-frequency waves; each identity adds its own mid/high-frequency
//! waves. Samples see the prototype through a random shift, a smooth warp,
//! contrast/brightness/illumination jitter and pixel noise. Downsampling
//! attenuates or aliases the identity-specific waves, so low resolutions keep
//! the family signal but lose part of what separates siblings.

use std::f64::consts::TAU;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{DatasetManifest, ManifestRecord};
use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FAMILY_SIZE: usize = 5;
const FAMILY_WAVES: usize = 4;
const IDENTITY_WAVES: usize = 8;
const FAMILY_FREQ: (f64, f64) = (1.0, 3.0);
const IDENTITY_FREQ: (f64, f64) = (10.0, 26.0);
const IDENTITY_GAIN: f64 = 0.8;
const MAX_SHIFT: f64 = 0.05;
const WARP_AMPLITUDE: f64 = 0.015;
const NOISE_STD: f64 = 0.06;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub num_ids: usize,
    pub per_id: usize,
    pub base_res: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig { num_ids: 50, per_id: 40, base_res: 64, channels: 1, seed: 0 }
    }
}

#[derive(Clone, Copy)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amplitude: f64,
}

impl Wave {
    fn random<R: Rng>(rng: &mut R, band: (f64, f64), amplitude: f64) -> Self {
        let f = rng.gen_range(band.0..band.1);
        let angle = rng.gen_range(0.0..TAU);
        Wave { fx: f * angle.cos(), fy: f * angle.sin(), phase: rng.gen_range(0.0..TAU), amplitude }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        self.amplitude * (TAU * (self.fx * u + self.fy * v) + self.phase).cos()
    }
}

struct Prototype {
    waves: Vec<Wave>,
    /// Per-channel gain on each wave.
    channel_gain: Vec<Vec<f64>>,
    norm: f64,
}

impl Prototype {
    fn field(&self, channel: usize, u: f64, v: f64) -> f64 {
        self.waves.iter().zip(&self.channel_gain[channel]).map(|(w, g)| g * w.at(u, v)).sum::<f64>() / self.norm
    }
}

struct SampleJitter {
    shift: (f64, f64),
    warp: [Wave; 2],
    contrast: f64,
    brightness: f64,
    ramp: (f64, f64),
}

fn render<R: Rng>(proto: &Prototype, jitter: &SampleJitter, cfg: &SyntheticConfig, rng: &mut R) -> Tensor {
    let res = cfg.base_res;
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut data = Vec::with_capacity(cfg.channels * res * res);
    for c in 0..cfg.channels {
        for y in 0..res {
            for x in 0..res {
                let u0 = (x as f64 + 0.5) / res as f64;
                let v0 = (y as f64 + 0.5) / res as f64;
                let u = u0 + jitter.shift.0 + jitter.warp[0].at(u0, v0);
                let v = v0 + jitter.shift.1 + jitter.warp[1].at(u0, v0);
                let z = jitter.contrast * proto.field(c, u, v)
                    + jitter.brightness
                    + jitter.ramp.0 * (u0 - 0.5)
                    + jitter.ramp.1 * (v0 - 0.5);
                let value = 1.0 / (1.0 + (-z).exp()) + noise.sample(rng);
                data.push(value.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![cfg.channels, res, res], data).expect("shape matches data")
}

/// Deterministic in `seed`; images are ordered identity-major.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.num_ids < 2 || cfg.per_id < 2 {
        return Err(Error::invalid("synthetic data needs at least 2 identities with 2 images each"));
    }
    if cfg.base_res == 0 || cfg.channels == 0 {
        return Err(Error::invalid("synthetic base_res and channels must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let families = cfg.num_ids.div_ceil(FAMILY_SIZE);
    let family_waves: Vec<Vec<Wave>> = (0..families)
        .map(|_| (0..FAMILY_WAVES).map(|_| Wave::random(&mut rng, FAMILY_FREQ, 1.0)).collect())
        .collect();
    let prototypes: Vec<Prototype> = (0..cfg.num_ids)
        .map(|id| {
            let mut waves = family_waves[id / FAMILY_SIZE].clone();
            waves.extend((0..IDENTITY_WAVES).map(|_| Wave::random(&mut rng, IDENTITY_FREQ, IDENTITY_GAIN)));
            let channel_gain = (0..cfg.channels)
                .map(|c| {
                    waves.iter().map(|_| if c == 0 { 1.0 } else { rng.gen_range(0.6..1.4) }).collect()
                })
                .collect();
            let power: f64 = waves.iter().map(|w| w.amplitude * w.amplitude / 2.0).sum();
            Prototype { waves, channel_gain, norm: power.sqrt() / 1.5 }
        })
        .collect();

    let mut images = Vec::with_capacity(cfg.num_ids * cfg.per_id);
    let mut records = Vec::with_capacity(cfg.num_ids * cfg.per_id);
    for (id, proto) in prototypes.iter().enumerate() {
        for k in 0..cfg.per_id {
            let jitter = SampleJitter {
                shift: (rng.gen_range(-MAX_SHIFT..MAX_SHIFT), rng.gen_range(-MAX_SHIFT..MAX_SHIFT)),
                warp: [
                    Wave::random(&mut rng, (0.5, 1.5), WARP_AMPLITUDE),
                    Wave::random(&mut rng, (0.5, 1.5), WARP_AMPLITUDE),
                ],
                contrast: rng.gen_range(0.8..1.2),
                brightness: rng.gen_range(-0.3..0.3),
                ramp: (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
            };
            images.push(render(proto, &jitter, cfg, &mut rng));
            records.push(ManifestRecord {
                image_path: PathBuf::from(format!("synthetic/{id:04}_{k:03}")),
                identity: id,
                media_id: records.len() as u64,
                detector_score: 1.0,
            });
        }
    }
    Ok(Dataset { images, manifest: DatasetManifest { records } })
}
