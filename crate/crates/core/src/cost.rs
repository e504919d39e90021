//! Analytic compute and memory model of the embedding network.
//!
//! MACC counts the multiplies of every convolution and of the embedding
//! projection. Batch norm, ReLU and pooling are treated as free. Activation
//! memory assumes layers run in sequence and release their input as soon as
//! their output exists.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{forward_embed, ModelConfig, ParameterSet};
use crate::tensor::{Mode, Tensor};

pub const COST_HEADER: &str = "resolution,macc,param_bytes,activation_bytes,wall_ms";
const BYTES_PER_VALUE: u64 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub resolution: usize,
    pub macc: u64,
    pub param_bytes: u64,
    /// Peak live activations for batch 1.
    pub activation_bytes: u64,
    /// Informational only; `None` unless measured.
    pub wall_ms: Option<f64>,
}

/// Per-conv-layer MACC, in network order.
pub fn layer_maccs(config: &ModelConfig, resolution: usize) -> Result<Vec<u64>> {
    config.validate()?;
    let sizes = config.spatial_sizes(resolution)?;
    let mut cin = config.in_channels as u64;
    Ok(config
        .blocks
        .iter()
        .zip(&sizes)
        .map(|(b, &side)| {
            let cout = b.out_channels as u64;
            let m = (side * side) as u64 * cout * cin * (b.kernel * b.kernel) as u64;
            cin = cout;
            m
        })
        .collect())
}

pub fn macc_count(config: &ModelConfig, resolution: usize) -> Result<u64> {
    let conv: u64 = layer_maccs(config, resolution)?.iter().sum();
    Ok(conv + (config.feature_channels() * config.embed_dim) as u64)
}

/// Bytes of every backbone tensor, running statistics included and the
/// classifier excluded. Independent of resolution.
pub fn param_bytes(config: &ModelConfig) -> Result<u64> {
    config.validate()?;
    let mut cin = config.in_channels;
    let mut values = 0usize;
    for b in &config.blocks {
        values += b.out_channels * cin * b.kernel * b.kernel + 4 * b.out_channels;
        cin = b.out_channels;
    }
    values += cin * config.embed_dim;
    Ok(values as u64 * BYTES_PER_VALUE)
}

/// Peak of input + output sizes across the layer sequence, in bytes.
pub fn activation_memory(config: &ModelConfig, resolution: usize, batch: usize) -> Result<u64> {
    if batch == 0 {
        return Err(Error::invalid("batch must be positive"));
    }
    config.validate()?;
    let sizes = config.spatial_sizes(resolution)?;
    let mut live = config.in_channels * resolution * resolution;
    let mut peak = 0usize;
    for (b, &side) in config.blocks.iter().zip(&sizes) {
        let out = b.out_channels * side * side;
        // conv, then batch norm and ReLU at the same size
        for _ in 0..3 {
            peak = peak.max(live + out);
            live = out;
        }
    }
    let pooled = config.feature_channels();
    peak = peak.max(live + pooled);
    peak = peak.max(pooled + config.embed_dim);
    Ok((peak * batch) as u64 * BYTES_PER_VALUE)
}

/// Median single-image forward time in milliseconds.
pub fn measure_wall_clock(config: &ModelConfig, params: &ParameterSet, resolution: usize, repeats: usize) -> Result<f64> {
    if repeats < 3 {
        return Err(Error::invalid(format!("wall-clock needs at least 3 repeats, got {repeats}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Tensor::uniform(&[1, config.in_channels, resolution, resolution], 0.0, 1.0, &mut rng);
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        forward_embed(config, params, &image, Mode::Eval)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(if repeats % 2 == 1 { times[repeats / 2] } else { (times[repeats / 2 - 1] + times[repeats / 2]) / 2.0 })
}

/// One report per resolution, descending. Wall-clock is measured only when
/// `timing` supplies parameters and a repeat count.
pub fn cost_table(
    config: &ModelConfig,
    resolutions: &[usize],
    timing: Option<(&ParameterSet, usize)>,
) -> Result<Vec<CostReport>> {
    let mut res = resolutions.to_vec();
    res.sort_unstable_by(|a, b| b.cmp(a));
    res.dedup();
    let bytes = param_bytes(config)?;
    res.into_iter()
        .map(|r| {
            Ok(CostReport {
                resolution: r,
                macc: macc_count(config, r)?,
                param_bytes: bytes,
                activation_bytes: activation_memory(config, r, 1)?,
                wall_ms: match timing {
                    Some((params, repeats)) => Some(measure_wall_clock(config, params, r, repeats)?),
                    None => None,
                },
            })
        })
        .collect()
}

pub fn cost_csv(reports: &[CostReport]) -> String {
    let mut out = format!("{COST_HEADER}\n");
    for r in reports {
        let wall = r.wall_ms.map(|w| format!("{w:.3}")).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{wall}", r.resolution, r.macc, r.param_bytes, r.activation_bytes);
    }
    out
}
