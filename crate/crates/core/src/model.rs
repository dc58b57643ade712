//! Residual CNN acoustic model with dilated convolutions.
//!
//! Layout: a bias-free 3×3 convolution lifting the `T × K` feature map to
//! `C` channels, then `R` residual blocks of two bias-free 3×3 convolutions
//! with an identity skip, global average pooling over time and frequency,
//! one dense layer to 11 classes and a softmax. Every convolution is
//! followed by batch normalization; ReLU follows the first normalization of
//! a block and the residual sum.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsp::NUM_BINS;
use crate::error::{Error, Result};
use crate::frontend::{BatchNormLayer, FrontEnd, FrontEndNodes};
use crate::graph::{ChannelLayout, Graph, NodeId};
use crate::tensor::Tensor;
use crate::dsp::PowerSpectrogram;
use crate::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "res15-like")]
    Res15Like,
    #[serde(rename = "res8-narrow-like")]
    Res8NarrowLike,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Res15Like => "res15-like",
            Variant::Res8NarrowLike => "res8-narrow-like",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "res15-like" => Ok(Variant::Res15Like),
            "res8-narrow-like" => Ok(Variant::Res8NarrowLike),
            other => Err(Error::Config(format!("unknown model variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Feature maps per convolution (`C`).
    pub channels: usize,
    /// Per-block dilation; its length is the residual block count `R`.
    pub dilations: Vec<usize>,
    pub kernel: (usize, usize),
    /// Input frames `T`.
    pub frames: usize,
    /// Filterbank channels `K`.
    pub filters: usize,
    pub classes: usize,
}

impl ModelConfig {
    /// 45 maps, 6 blocks, block `i` dilated by `2^(i / 3)`.
    pub fn res15_like(frames: usize, filters: usize) -> Self {
        ModelConfig {
            variant: Variant::Res15Like,
            channels: 45,
            dilations: (0..6).map(|i| 1 << (i / 3)).collect(),
            kernel: (3, 3),
            frames,
            filters,
            classes: NUM_CLASSES,
        }
    }

    /// 19 maps, 3 undilated blocks.
    pub fn res8_narrow_like(frames: usize, filters: usize) -> Self {
        ModelConfig {
            variant: Variant::Res8NarrowLike,
            channels: 19,
            dilations: vec![1; 3],
            kernel: (3, 3),
            frames,
            filters,
            classes: NUM_CLASSES,
        }
    }

    pub fn for_variant(variant: Variant, frames: usize, filters: usize) -> Self {
        match variant {
            Variant::Res15Like => Self::res15_like(frames, filters),
            Variant::Res8NarrowLike => Self::res8_narrow_like(frames, filters),
        }
    }

    pub fn blocks(&self) -> usize {
        self.dilations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 {
            return Err(Error::Config("channel width must be >= 1".into()));
        }
        if self.classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "class count must be {NUM_CLASSES}, got {}",
                self.classes
            )));
        }
        if self.dilations.iter().any(|&d| d < 1) {
            return Err(Error::Config(format!(
                "dilations must be >= 1, got {:?}",
                self.dilations
            )));
        }
        if self.kernel.0 % 2 == 0 || self.kernel.1 % 2 == 0 {
            return Err(Error::Config(format!(
                "same padding needs odd kernels, got {:?}",
                self.kernel
            )));
        }
        if self.frames < 1 || self.filters < 1 {
            return Err(Error::Config("input shape must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv_a: Tensor,
    pub norm_a: BatchNormLayer,
    pub conv_b: Tensor,
    pub norm_b: BatchNormLayer,
    pub dilation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel {
    pub config: ModelConfig,
    pub conv_in: Tensor,
    pub norm_in: BatchNormLayer,
    pub blocks: Vec<ResidualBlock>,
    /// `C × classes`.
    pub dense_w: Tensor,
    pub dense_b: Tensor,
}

const CLASSIFIER_INIT_STD: f64 = 0.01;

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
}

/// Graph nodes of one acoustic-model pass.
#[derive(Debug, Clone)]
pub struct ModelNodes {
    /// Parameter leaves, in [`AcousticModel::params`] order.
    pub params: Vec<NodeId>,
    /// Batch-norm outputs, in [`AcousticModel::norms`] order.
    pub norms: Vec<NodeId>,
    pub logits: NodeId,
    pub probs: NodeId,
}

impl AcousticModel {
    pub fn build(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let (kh, kw) = config.kernel;
        let conv_in = he_normal(&[c, 1, kh, kw], kh * kw, rng);
        let blocks = config
            .dilations
            .iter()
            .map(|&d| ResidualBlock {
                conv_a: he_normal(&[c, c, kh, kw], c * kh * kw, rng),
                norm_a: BatchNormLayer::new(c),
                conv_b: he_normal(&[c, c, kh, kw], c * kh * kw, rng),
                norm_b: BatchNormLayer::new(c),
                dilation: d,
            })
            .collect();
        // small classifier weights keep untrained posteriors close to uniform
        let normal = Normal::new(0.0f64, CLASSIFIER_INIT_STD).expect("positive std");
        let dense_w = Tensor::from_fn(&[c, config.classes], |_| normal.sample(rng) as f32);
        Ok(AcousticModel {
            norm_in: BatchNormLayer::new(c),
            dense_b: Tensor::zeros(&[config.classes]),
            config,
            conv_in,
            blocks,
            dense_w,
        })
    }

    /// Learnable tensors in a fixed order, with stable names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("conv_in".to_string(), &self.conv_in),
            ("norm_in.gamma".to_string(), &self.norm_in.gamma),
            ("norm_in.beta".to_string(), &self.norm_in.beta),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.conv_a"), &b.conv_a));
            out.push((format!("block{i}.norm_a.gamma"), &b.norm_a.gamma));
            out.push((format!("block{i}.norm_a.beta"), &b.norm_a.beta));
            out.push((format!("block{i}.conv_b"), &b.conv_b));
            out.push((format!("block{i}.norm_b.gamma"), &b.norm_b.gamma));
            out.push((format!("block{i}.norm_b.beta"), &b.norm_b.beta));
        }
        out.push(("dense.w".to_string(), &self.dense_w));
        out.push(("dense.b".to_string(), &self.dense_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.conv_in,
            &mut self.norm_in.gamma,
            &mut self.norm_in.beta,
        ];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.conv_a);
            out.push(&mut b.norm_a.gamma);
            out.push(&mut b.norm_a.beta);
            out.push(&mut b.conv_b);
            out.push(&mut b.norm_b.gamma);
            out.push(&mut b.norm_b.beta);
        }
        out.push(&mut self.dense_w);
        out.push(&mut self.dense_b);
        out
    }

    pub fn norms(&self) -> Vec<&BatchNormLayer> {
        let mut out = vec![&self.norm_in];
        for b in &self.blocks {
            out.push(&b.norm_a);
            out.push(&b.norm_b);
        }
        out
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNormLayer> {
        let mut out = vec![&mut self.norm_in];
        for b in self.blocks.iter_mut() {
            out.push(&mut b.norm_a);
            out.push(&mut b.norm_b);
        }
        out
    }

    /// Records the network on `graph`. `features` is a `(B·T) × K` node.
    pub fn record(
        &self,
        graph: &mut Graph,
        features: NodeId,
        batch: usize,
        training: bool,
    ) -> Result<ModelNodes> {
        let cfg = &self.config;
        let fs = graph.value(features).shape().to_vec();
        if fs.len() != 2 || fs[1] != cfg.filters || fs[0] != batch * cfg.frames {
            return Err(Error::shape(
                "acoustic model input",
                &fs,
                &[batch * cfg.frames, cfg.filters],
            ));
        }
        let mut params = Vec::new();
        let mut norms = Vec::new();
        let x = graph.reshape(features, &[batch, 1, cfg.frames, cfg.filters])?;

        let mut conv_bn = |graph: &mut Graph, x: NodeId, kernel: &Tensor, norm: &BatchNormLayer, d: usize| -> Result<NodeId> {
            let k = graph.param(kernel.clone());
            params.push(k);
            let y = graph.conv2d(x, k, (d, d))?;
            let layout = ChannelLayout::nchw(graph.value(y).shape());
            let bn = norm.record(graph, y, layout, training)?;
            params.push(bn.gamma);
            params.push(bn.beta);
            norms.push(bn.out);
            Ok(bn.out)
        };

        let y = conv_bn(graph, x, &self.conv_in, &self.norm_in, 1)?;
        let mut h = graph.relu(y)?;
        for b in &self.blocks {
            let a = conv_bn(graph, h, &b.conv_a, &b.norm_a, b.dilation)?;
            let a = graph.relu(a)?;
            let z = conv_bn(graph, a, &b.conv_b, &b.norm_b, b.dilation)?;
            let sum = graph.add(z, h)?;
            h = graph.relu(sum)?;
        }
        let pooled = graph.global_avg_pool(h)?;
        let w = graph.param(self.dense_w.clone());
        let bias = graph.param(self.dense_b.clone());
        params.push(w);
        params.push(bias);
        let logits = graph.matmul(pooled, w)?;
        let logits = graph.add_bias(logits, bias)?;
        let probs = graph.softmax(logits)?;
        Ok(ModelNodes {
            params,
            norms,
            logits,
            probs,
        })
    }
}

/// `batch × 11` class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    probs: Tensor,
}

impl Posteriors {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.rank() != 2 {
            return Err(Error::shape("posteriors", probs.shape(), &[0, NUM_CLASSES]));
        }
        Ok(Posteriors { probs })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn batch(&self) -> usize {
        self.probs.dim(0)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.probs.data().chunks(self.probs.dim(1))
    }

    pub fn decisions(&self) -> Vec<usize> {
        self.rows().map(decide).collect()
    }
}

/// Index of the largest posterior; ties go to the lowest class id.
pub fn decide(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = i;
        }
    }
    best
}

/// Front end and acoustic model trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct KwsModel {
    pub frontend: FrontEnd,
    pub acoustic: AcousticModel,
}

/// Graph nodes of a full front-end + acoustic-model pass.
#[derive(Debug, Clone)]
pub struct PipelineNodes {
    pub frontend: FrontEndNodes,
    pub model: ModelNodes,
}

impl KwsModel {
    pub fn new(frontend: FrontEnd, acoustic: AcousticModel) -> Result<Self> {
        if frontend.channels() != acoustic.config.filters {
            return Err(Error::Config(format!(
                "front end has {} channels but the model expects K = {}",
                frontend.channels(),
                acoustic.config.filters
            )));
        }
        Ok(KwsModel { frontend, acoustic })
    }

    pub fn channels(&self) -> usize {
        self.frontend.channels()
    }

    pub fn set_training(&mut self, training: bool) {
        self.frontend.filterbank.set_training(training);
    }

    pub fn training(&self) -> bool {
        self.frontend.filterbank.training()
    }

    pub fn record(
        &self,
        graph: &mut Graph,
        batch: &[&PowerSpectrogram],
        rng: &mut impl Rng,
    ) -> Result<PipelineNodes> {
        let frontend = self.frontend.record(graph, batch, rng)?;
        let model = self
            .acoustic
            .record(graph, frontend.features(), batch.len(), self.training())?;
        Ok(PipelineNodes { frontend, model })
    }

    /// Trained tensors: `W` when learnable, the front-end norm, then the
    /// acoustic model in [`AcousticModel::params`] order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let fe = &mut self.frontend;
        let mut out: Vec<&mut Tensor> = Vec::new();
        if fe.learnable {
            out.push(fe.filterbank.weights_mut());
        }
        out.push(&mut fe.norm.gamma);
        out.push(&mut fe.norm.beta);
        out.extend(self.acoustic.params_mut());
        out
    }

    /// Graph leaves matching [`KwsModel::trainable_mut`] one to one.
    pub fn trainable_nodes(&self, nodes: &PipelineNodes) -> Vec<NodeId> {
        let mut out = Vec::new();
        if self.frontend.learnable {
            out.push(nodes.frontend.weights);
        }
        out.push(nodes.frontend.norm.gamma);
        out.push(nodes.frontend.norm.beta);
        out.extend_from_slice(&nodes.model.params);
        out
    }

    /// Batch-norm output nodes, front end first, matching [`KwsModel::norms_mut`].
    pub fn norm_nodes(&self, nodes: &PipelineNodes) -> Vec<NodeId> {
        let mut out = vec![nodes.frontend.norm.out];
        out.extend_from_slice(&nodes.model.norms);
        out
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNormLayer> {
        let mut out = vec![&mut self.frontend.norm];
        out.extend(self.acoustic.norms_mut());
        out
    }

    /// Posteriors for a batch in the current mode.
    pub fn forward(&self, batch: &[&PowerSpectrogram], rng: &mut impl Rng) -> Result<Posteriors> {
        let mut graph = Graph::new();
        let nodes = self.record(&mut graph, batch, rng)?;
        Posteriors::new(graph.value(nodes.model.probs).clone())
    }
}

/// Multiplications of one layer for one second of input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub multiplications: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultReport {
    pub variant: Variant,
    pub frames: usize,
    pub filters: usize,
    pub layers: Vec<LayerCount>,
    /// Sum of `layers`: the acoustic model alone.
    pub total: u64,
    /// `T · F · K` for the filterbank product, reported but not part of `total`.
    pub filterbank: u64,
}

const CSV_HEADER: &str = "variant,K,T,layer,multiplications";

impl MultReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let mut row = |name: &str, v: u64| {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.variant, self.filters, self.frames, name, v
            ));
        };
        for l in &self.layers {
            row(&l.name, l.multiplications);
        }
        row("filterbank", self.filterbank);
        row("total", self.total);
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(CSV_HEADER) {
            return Err(Error::Parse(format!("expected header `{CSV_HEADER}`")));
        }
        let mut meta: Option<(Variant, usize, usize)> = None;
        let mut layers = Vec::new();
        let (mut total, mut filterbank) = (None, None);
        for line in lines {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 5 {
                return Err(Error::Parse(format!("bad row `{line}`")));
            }
            let num = |s: &str| -> Result<u64> {
                s.parse().map_err(|_| Error::Parse(format!("bad number `{s}`")))
            };
            let row_meta = (cols[0].parse()?, num(cols[1])? as usize, num(cols[2])? as usize);
            if *meta.get_or_insert(row_meta) != row_meta {
                return Err(Error::Parse("rows disagree on variant/K/T".into()));
            }
            let v = num(cols[4])?;
            match cols[3] {
                "total" => total = Some(v),
                "filterbank" => filterbank = Some(v),
                name => layers.push(LayerCount {
                    name: name.to_string(),
                    multiplications: v,
                }),
            }
        }
        let (variant, filters, frames) = meta.ok_or_else(|| Error::Parse("no rows".into()))?;
        let total = total.ok_or_else(|| Error::Parse("missing total row".into()))?;
        let sum: u64 = layers.iter().map(|l| l.multiplications).sum();
        if sum != total {
            return Err(Error::Parse(format!("total {total} != layer sum {sum}")));
        }
        Ok(MultReport {
            variant,
            frames,
            filters,
            layers,
            total,
            filterbank: filterbank.ok_or_else(|| Error::Parse("missing filterbank row".into()))?,
        })
    }
}

/// Multiplications per one-second input. A same-padded convolution costs
/// `T · K · C_out · kh · kw · C_in`; the dense layer `C · classes`. Batch
/// norm, pooling and softmax are not counted.
pub fn count_multiplications(config: &ModelConfig) -> Result<MultReport> {
    config.validate()?;
    let (t, k) = (config.frames as u64, config.filters as u64);
    let c = config.channels as u64;
    let taps = (config.kernel.0 * config.kernel.1) as u64;
    let conv = |c_in: u64| t * k * c * taps * c_in;
    let mut layers = vec![LayerCount {
        name: "conv_in".into(),
        multiplications: conv(1),
    }];
    for i in 0..config.blocks() {
        for part in ["a", "b"] {
            layers.push(LayerCount {
                name: format!("block{i}.conv_{part}"),
                multiplications: conv(c),
            });
        }
    }
    layers.push(LayerCount {
        name: "dense".into(),
        multiplications: c * config.classes as u64,
    });
    let total = layers.iter().map(|l| l.multiplications).sum();
    Ok(MultReport {
        variant: config.variant,
        frames: config.frames,
        filters: config.filters,
        layers,
        total,
        filterbank: t * NUM_BINS as u64 * k,
    })
}
