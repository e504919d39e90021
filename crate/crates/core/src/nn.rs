//! Resolution-agnostic convolutional embedding network shared by teacher and
//! students: a stack of conv → batch-norm → ReLU blocks, global average
//! pooling, and a bias-free projection to the embedding.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{read_tensors, write_tensors, Graph, Mode, Tensor, Var};

pub const CLASSIFIER: &str = "classifier.weight";
pub const EMBED: &str = "embed.weight";

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig { momentum: 0.9, epsilon: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub blocks: Vec<BlockConfig>,
    pub embed_dim: usize,
    pub norm: NormConfig,
}

impl Default for ModelConfig {
    /// Four stride-2 blocks of width 16/32/64/128, 3×3 kernels, 64-d embedding.
    fn default() -> Self {
        ModelConfig::uniform(1, &[16, 32, 64, 128], 3, 2, 1, 64)
    }
}

impl ModelConfig {
    /// Blocks sharing one kernel/stride/padding.
    pub fn uniform(
        in_channels: usize,
        widths: &[usize],
        kernel: usize,
        stride: usize,
        padding: usize,
        embed_dim: usize,
    ) -> Self {
        ModelConfig {
            in_channels,
            blocks: widths
                .iter()
                .map(|&out_channels| BlockConfig { out_channels, kernel, stride, padding })
                .collect(),
            embed_dim,
            norm: NormConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("model in_channels must be positive"));
        }
        if self.blocks.is_empty() {
            return Err(Error::invalid("model needs at least one block"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 {
                return Err(Error::invalid(format!("block {i}: out_channels must be positive")));
            }
            if b.kernel == 0 || b.kernel % 2 == 0 {
                return Err(Error::invalid(format!("block {i}: kernel must be odd and positive, got {}", b.kernel)));
            }
            if b.stride != 1 && b.stride != 2 {
                return Err(Error::invalid(format!("block {i}: stride must be 1 or 2, got {}", b.stride)));
            }
        }
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim must be positive"));
        }
        if !(self.norm.momentum > 0.0 && self.norm.momentum < 1.0) {
            return Err(Error::invalid("norm momentum must lie in (0, 1)"));
        }
        if self.norm.epsilon <= 0.0 {
            return Err(Error::invalid("norm epsilon must be positive"));
        }
        Ok(())
    }

    /// Smallest square input for which every block produces at least one output pixel.
    pub fn min_resolution(&self) -> usize {
        self.blocks.iter().rev().fold(1usize, |out, b| {
            ((out - 1) * b.stride + b.kernel).saturating_sub(2 * b.padding).max(1)
        })
    }

    /// Spatial side length after each block for a square input.
    pub fn spatial_sizes(&self, resolution: usize) -> Result<Vec<usize>> {
        let min = self.min_resolution();
        if resolution < min {
            return Err(Error::Resolution { resolution, min_resolution: min });
        }
        let mut side = resolution;
        Ok(self
            .blocks
            .iter()
            .map(|b| {
                side = (side + 2 * b.padding - b.kernel) / b.stride + 1;
                side
            })
            .collect())
    }

    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    /// Input channel count of each block.
    fn block_inputs(&self) -> impl Iterator<Item = (usize, &BlockConfig)> {
        let mut c = self.in_channels;
        self.blocks.iter().map(move |b| {
            let cin = c;
            c = b.out_channels;
            (cin, b)
        })
    }
}

pub fn conv_name(block: usize) -> String {
    format!("block{block}.conv.weight")
}

fn bn_name(block: usize, part: &str) -> String {
    format!("block{block}.bn.{part}")
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// Backbone tensors θ plus the classifier matrix W (`[num_classes, embed_dim]`).
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    theta: BTreeMap<String, Tensor>,
    classifier: Tensor,
}

impl ParameterSet {
    pub fn new(theta: BTreeMap<String, Tensor>, classifier: Tensor) -> Result<Self> {
        classifier.dims2("ParameterSet classifier")?;
        Ok(ParameterSet { theta, classifier })
    }

    pub fn theta(&self) -> &BTreeMap<String, Tensor> {
        &self.theta
    }

    pub fn classifier(&self) -> &Tensor {
        &self.classifier
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.shape()[0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        if name == CLASSIFIER {
            Some(&self.classifier)
        } else {
            self.theta.get(name)
        }
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if name == CLASSIFIER {
            Some(&mut self.classifier)
        } else {
            self.theta.get_mut(name)
        }
    }

    /// Every tensor, backbone first (sorted by name), classifier last.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.theta
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain(std::iter::once((CLASSIFIER, &self.classifier)))
    }

    /// Names of tensors updated by gradient descent (everything except running statistics).
    pub fn trainable_names(&self) -> Vec<String> {
        self.iter()
            .filter(|(n, _)| !is_running_stat(n))
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|(n, _)| !is_running_stat(n)).map(|(_, t)| t.len()).sum()
    }

    /// Hex SHA-256 over names, shapes and value bits.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        write_tensors(&mut out, self.iter())?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut theta = BTreeMap::new();
        let mut classifier = None;
        for (name, t) in read_tensors(BufReader::new(file))? {
            if name == CLASSIFIER {
                classifier = Some(t);
            } else {
                theta.insert(name, t);
            }
        }
        let classifier =
            classifier.ok_or_else(|| Error::Checkpoint(format!("{} has no {CLASSIFIER}", path.display())))?;
        ParameterSet::new(theta, classifier)
    }

    /// Checks key set and shapes against what `build(config, num_classes)` would produce.
    pub fn check_config(&self, config: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(config);
        for (name, shape) in &expected {
            match self.theta.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "shape mismatch for tensor {name}: checkpoint has {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = self.theta.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra} for this config")));
        }
        if self.classifier.shape()[1] != config.embed_dim {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for tensor {CLASSIFIER}: has {:?}, config expects [_, {}]",
                self.classifier.shape(),
                config.embed_dim
            )));
        }
        Ok(())
    }

    pub fn load_for_config(path: &Path, config: &ModelConfig) -> Result<Self> {
        let p = Self::load(path)?;
        p.check_config(config)?;
        Ok(p)
    }
}

fn expected_shapes(config: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
    let mut m = BTreeMap::new();
    for (i, (cin, b)) in config.block_inputs().enumerate() {
        m.insert(conv_name(i), vec![b.out_channels, cin, b.kernel, b.kernel]);
        for part in ["scale", "shift", "running_mean", "running_var"] {
            m.insert(bn_name(i, part), vec![b.out_channels]);
        }
    }
    m.insert(EMBED.to_string(), vec![config.embed_dim, config.feature_channels()]);
    m
}

/// Fresh parameters: He-normal conv kernels, unit/zero norm affine, zero/one
/// running statistics, projection and classifier with variance 1/fan_in.
pub fn build(config: &ModelConfig, num_classes: usize, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    if num_classes < 2 {
        return Err(Error::invalid(format!("num_classes must be at least 2, got {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = BTreeMap::new();
    for (i, (cin, b)) in config.block_inputs().enumerate() {
        let fan_in = (cin * b.kernel * b.kernel) as f64;
        let shape = [b.out_channels, cin, b.kernel, b.kernel];
        theta.insert(conv_name(i), Tensor::randn(&shape, (2.0 / fan_in).sqrt(), &mut rng));
        let c = [b.out_channels];
        theta.insert(bn_name(i, "scale"), Tensor::full(&c, 1.0));
        theta.insert(bn_name(i, "shift"), Tensor::zeros(&c));
        theta.insert(bn_name(i, "running_mean"), Tensor::zeros(&c));
        theta.insert(bn_name(i, "running_var"), Tensor::full(&c, 1.0));
    }
    let feat = config.feature_channels();
    theta.insert(
        EMBED.to_string(),
        Tensor::randn(&[config.embed_dim, feat], (1.0 / feat as f64).sqrt(), &mut rng),
    );
    let classifier = Tensor::randn(&[num_classes, config.embed_dim], (1.0 / config.embed_dim as f64).sqrt(), &mut rng);
    Ok(ParameterSet { theta, classifier })
}

/// Trainable-scalar count; running statistics excluded. No resolution enters.
pub fn param_count(config: &ModelConfig, num_classes: usize) -> usize {
    let backbone: usize = config
        .block_inputs()
        .map(|(cin, b)| b.out_channels * cin * b.kernel * b.kernel + 2 * b.out_channels)
        .sum();
    backbone + config.embed_dim * config.feature_channels() + num_classes * config.embed_dim
}

/// Deep copy used for knowledge transfer (θ_s ← θ_t, W_s ← W_t, running stats included).
pub fn copy_parameters(source: &ParameterSet) -> ParameterSet {
    source.clone()
}

/// Graph handles for the trainable tensors of one network.
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Wraps existing graph handles, keyed by tensor name.
    pub fn from_map(vars: BTreeMap<String, Var>) -> Self {
        ParamVars { vars }
    }

    /// Registers trainable tensors as gradient-receiving leaves (`trainable`)
    /// or as constants.
    pub fn register(graph: &mut Graph, params: &ParameterSet, trainable: bool) -> Self {
        let vars = params
            .iter()
            .filter(|(n, _)| !is_running_stat(n))
            .map(|(n, t)| {
                let v = if trainable { graph.param(t.clone()) } else { graph.constant(t.clone()) };
                (n.to_string(), v)
            })
            .collect();
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn classifier(&self) -> Var {
        self.vars[CLASSIFIER]
    }
}

pub struct EmbedOutput {
    /// Globally pooled backbone features, `[N, C_last]`.
    pub pooled: Var,
    /// Projected embedding, `[N, embed_dim]`.
    pub embedding: Var,
    /// Updated `(name, running statistic)` pairs from a train-mode pass.
    pub running: Vec<(String, Tensor)>,
    /// Normalised inputs of every ReLU, in block order.
    pub pre_activations: Vec<Var>,
}

fn check_images(config: &ModelConfig, shape: &[usize]) -> Result<()> {
    let [_, c, h, w] = match shape {
        [n, c, h, w] => [*n, *c, *h, *w],
        _ => return Err(Error::shape("forward", format!("images must be [N, C, R, R], got {shape:?}"))),
    };
    if c != config.in_channels {
        return Err(Error::shape(
            "forward",
            format!("images have {c} channels, model expects {}", config.in_channels),
        ));
    }
    let min = config.min_resolution();
    let r = h.min(w);
    if r < min {
        return Err(Error::Resolution { resolution: r, min_resolution: min });
    }
    Ok(())
}

/// Embedding network on a graph; the same code path serves every admissible resolution.
pub fn embed_on_graph(
    graph: &mut Graph,
    config: &ModelConfig,
    params: &ParameterSet,
    vars: &ParamVars,
    images: Var,
    mode: Mode,
) -> Result<EmbedOutput> {
    check_images(config, graph.value(images).shape())?;
    let mut x = images;
    let mut running = Vec::new();
    let mut pre_activations = Vec::new();
    for (i, b) in config.blocks.iter().enumerate() {
        x = graph.conv2d(x, vars.get(&conv_name(i)), None, b.stride, b.padding)?;
        let (mean_name, var_name) = (bn_name(i, "running_mean"), bn_name(i, "running_var"));
        let (y, updated) = graph.batch_norm2d(
            x,
            vars.get(&bn_name(i, "scale")),
            vars.get(&bn_name(i, "shift")),
            &params.theta[&mean_name],
            &params.theta[&var_name],
            mode,
            config.norm.momentum,
            config.norm.epsilon,
        )?;
        if let Some((m, v)) = updated {
            running.push((mean_name, m));
            running.push((var_name, v));
        }
        pre_activations.push(y);
        x = graph.relu(y)?;
    }
    let pooled = graph.global_avg_pool(x)?;
    let embedding = graph.linear(pooled, vars.get(EMBED), None)?;
    Ok(EmbedOutput { pooled, embedding, running, pre_activations })
}

/// `W · embedding` without bias.
pub fn logits_on_graph(graph: &mut Graph, vars: &ParamVars, embedding: Var) -> Result<Var> {
    graph.linear(embedding, vars.classifier(), None)
}

pub struct Features {
    pub pooled: Tensor,
    pub embedding: Tensor,
}

/// Pooled features and embeddings without taping.
pub fn forward_features(config: &ModelConfig, params: &ParameterSet, images: &Tensor, mode: Mode) -> Result<Features> {
    let mut g = Graph::inference();
    let vars = ParamVars::register(&mut g, params, false);
    let x = g.constant(images.clone());
    let out = embed_on_graph(&mut g, config, params, &vars, x, mode)?;
    Ok(Features { pooled: g.value(out.pooled).clone(), embedding: g.value(out.embedding).clone() })
}

pub fn forward_embed(config: &ModelConfig, params: &ParameterSet, images: &Tensor, mode: Mode) -> Result<Tensor> {
    forward_features(config, params, images, mode).map(|f| f.embedding)
}

pub fn forward_logits(config: &ModelConfig, params: &ParameterSet, images: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut g = Graph::inference();
    let vars = ParamVars::register(&mut g, params, false);
    let x = g.constant(images.clone());
    let out = embed_on_graph(&mut g, config, params, &vars, x, mode)?;
    let logits = logits_on_graph(&mut g, &vars, out.embedding)?;
    Ok(g.value(logits).clone())
}
