//! Trainable filterbank layer: `Y = X · max(W, 0)`, optional dropout on the
//! entries of `Y`, log compression with the `e^-50` floor, then per-channel
//! batch normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{mel_filterbank, AudioClip, PowerSpectrogram, Stft, NUM_BINS};
use crate::error::{Error, Result};
use crate::graph::{BatchNormMode, ChannelLayout, Graph, NodeId};
use crate::tensor::Tensor;
use crate::SAMPLE_RATE;

/// Dropout rate used by the learned-with-dropout arm.
pub const FILTERBANK_DROPOUT: f32 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutMode {
    /// Independent mask per `(frame, channel)` entry of `Y`.
    #[default]
    Element,
    /// One mask per `(utterance, channel)`, shared by all frames.
    Channel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterbankLayer {
    /// `F × K`, unconstrained; the effective filterbank is `max(W, 0)`.
    weights: Tensor,
    dropout_rate: f32,
    dropout_mode: DropoutMode,
    training: bool,
}

impl FilterbankLayer {
    /// `W` initialized to the `K`-channel Mel filterbank, dropout disabled.
    pub fn init_from_mel(channels: usize) -> Result<Self> {
        let mel = mel_filterbank(channels, NUM_BINS, SAMPLE_RATE)?;
        Self::from_weights(Tensor::new(&[NUM_BINS, channels], mel.weights().to_vec())?)
    }

    pub fn from_weights(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 || weights.dim(0) == 0 || weights.dim(1) == 0 {
            return Err(Error::shape("filterbank", weights.shape(), &[NUM_BINS, 0]));
        }
        Ok(FilterbankLayer {
            weights,
            dropout_rate: 0.0,
            dropout_mode: DropoutMode::Element,
            training: false,
        })
    }

    pub fn with_dropout(mut self, rate: f32, mode: DropoutMode) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        self.dropout_rate = rate;
        self.dropout_mode = mode;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.weights.dim(1)
    }

    pub fn bins(&self) -> usize {
        self.weights.dim(0)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    /// `g(W) = max(W, 0)`.
    pub fn effective(&self) -> Tensor {
        self.weights.map(|v| v.max(0.0))
    }

    pub fn dropout_rate(&self) -> f32 {
        self.dropout_rate
    }

    pub fn dropout_mode(&self) -> DropoutMode {
        self.dropout_mode
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    /// Inverted-dropout mask for a `batch × frames × K` output.
    fn dropout_mask(&self, batch: usize, frames: usize, rng: &mut impl Rng) -> Vec<f32> {
        let k = self.channels();
        let keep = 1.0 - self.dropout_rate;
        let scale = 1.0 / keep;
        let mut draw = || if rng.random::<f32>() < keep { scale } else { 0.0 };
        match self.dropout_mode {
            DropoutMode::Element => (0..batch * frames * k).map(|_| draw()).collect(),
            DropoutMode::Channel => {
                let mut mask = Vec::with_capacity(batch * frames * k);
                for _ in 0..batch {
                    let per_channel: Vec<f32> = (0..k).map(|_| draw()).collect();
                    for _ in 0..frames {
                        mask.extend_from_slice(&per_channel);
                    }
                }
                mask
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: 1e-5,
            momentum: 0.9,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn mode(&self, training: bool) -> BatchNormMode {
        if training {
            BatchNormMode::Train
        } else {
            BatchNormMode::Inference {
                mean: self.running_mean.clone(),
                var: self.running_var.clone(),
            }
        }
    }

    /// Adds `gamma`/`beta` leaves and a batch-norm node to `graph`.
    pub fn record(
        &self,
        graph: &mut Graph,
        x: NodeId,
        layout: ChannelLayout,
        training: bool,
    ) -> Result<BatchNormNodes> {
        let gamma = graph.param(self.gamma.clone());
        let beta = graph.param(self.beta.clone());
        let out = graph.batch_norm(x, gamma, beta, layout, self.mode(training), self.eps)?;
        Ok(BatchNormNodes { gamma, beta, out })
    }

    /// Folds batch statistics into the running estimates; `count` values
    /// contributed to each channel, and the variance is stored unbiased.
    pub fn update_running(&mut self, mean: &[f64], var: &[f64], count: usize) {
        let correction = if count > 1 {
            count as f64 / (count - 1) as f64
        } else {
            1.0
        };
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * mean[c];
            self.running_var[c] = m * self.running_var[c] + (1.0 - m) * var[c] * correction;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormNodes {
    pub gamma: NodeId,
    pub beta: NodeId,
    pub out: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Learned,
    LogMel,
}

/// `batch × frames × K` features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub values: Tensor,
    pub provenance: Provenance,
}

/// Graph nodes created by one front-end pass.
#[derive(Debug, Clone, Copy)]
pub struct FrontEndNodes {
    pub weights: NodeId,
    /// `Y` after dropout, before the logarithm; `(B·T) × K`.
    pub pre_log: NodeId,
    pub log: NodeId,
    pub norm: BatchNormNodes,
    pub batch: usize,
    pub frames: usize,
}

impl FrontEndNodes {
    pub fn features(&self) -> NodeId {
        self.norm.out
    }
}

#[derive(Debug)]
struct Tape {
    graph: Graph,
    nodes: FrontEndNodes,
}

/// Filterbank layer plus its batch normalization.
#[derive(Debug)]
pub struct FrontEnd {
    pub filterbank: FilterbankLayer,
    pub norm: BatchNormLayer,
    /// Whether `W` receives gradients.
    pub learnable: bool,
    tape: Option<Tape>,
}

impl Clone for FrontEnd {
    fn clone(&self) -> Self {
        FrontEnd {
            filterbank: self.filterbank.clone(),
            norm: self.norm.clone(),
            learnable: self.learnable,
            tape: None,
        }
    }
}

impl PartialEq for FrontEnd {
    fn eq(&self, other: &Self) -> bool {
        self.filterbank == other.filterbank
            && self.norm == other.norm
            && self.learnable == other.learnable
    }
}

impl FrontEnd {
    pub fn new(filterbank: FilterbankLayer, learnable: bool) -> Self {
        let norm = BatchNormLayer::new(filterbank.channels());
        FrontEnd {
            filterbank,
            norm,
            learnable,
            tape: None,
        }
    }

    /// Fixed Mel filterbank (the log-Mel baseline).
    pub fn logmel(channels: usize) -> Result<Self> {
        Ok(Self::new(FilterbankLayer::init_from_mel(channels)?, false))
    }

    pub fn channels(&self) -> usize {
        self.filterbank.channels()
    }

    pub fn provenance(&self) -> Provenance {
        if self.learnable {
            Provenance::Learned
        } else {
            Provenance::LogMel
        }
    }

    /// Records the front end on `graph`. The returned features are `(B·T) × K`.
    pub fn record(
        &self,
        graph: &mut Graph,
        batch: &[&PowerSpectrogram],
        rng: &mut impl Rng,
    ) -> Result<FrontEndNodes> {
        let frames = batch.first().map(|s| s.frames()).unwrap_or(0);
        if batch.is_empty() || batch.iter().any(|s| s.frames() != frames) {
            return Err(Error::Contract(
                "front end needs a nonempty batch of equal-length spectrograms".into(),
            ));
        }
        let bins = self.filterbank.bins();
        if let Some(bad) = batch.iter().find(|s| s.bins() != bins) {
            return Err(Error::shape("filterbank", &[bad.frames(), bad.bins()], &[bins, self.channels()]));
        }
        let mut x = Vec::with_capacity(batch.len() * frames * bins);
        for s in batch {
            x.extend_from_slice(s.values());
        }
        let x = graph.input(Tensor::new(&[batch.len() * frames, bins], x)?);
        let w = if self.learnable {
            graph.param(self.filterbank.weights.clone())
        } else {
            graph.input(self.filterbank.weights.clone())
        };
        let gw = graph.relu(w)?;
        let mut y = graph.matmul(x, gw)?;
        let fb = &self.filterbank;
        if fb.training && fb.dropout_rate > 0.0 {
            let mask = fb.dropout_mask(batch.len(), frames, rng);
            y = graph.mask(y, mask)?;
        }
        let log = graph.log_floor(y)?;
        let layout = ChannelLayout::columns(batch.len() * frames, self.channels());
        let norm = self.norm.record(graph, log, layout, fb.training)?;
        Ok(FrontEndNodes {
            weights: w,
            pre_log: y,
            log,
            norm,
            batch: batch.len(),
            frames,
        })
    }

    fn to_features(&self, graph: &Graph, nodes: &FrontEndNodes) -> Result<FeatureTensor> {
        let values = graph.value(nodes.features()).clone().reshape(&[
            nodes.batch,
            nodes.frames,
            self.channels(),
        ])?;
        Ok(FeatureTensor {
            values,
            provenance: self.provenance(),
        })
    }

    /// Features for a batch, without keeping the tape.
    pub fn features(&self, batch: &[&PowerSpectrogram], rng: &mut impl Rng) -> Result<FeatureTensor> {
        let mut graph = Graph::new();
        let nodes = self.record(&mut graph, batch, rng)?;
        self.to_features(&graph, &nodes)
    }

    /// Features for a batch; the tape is kept for [`FrontEnd::gradient_wrt_w`].
    pub fn forward(&mut self, batch: &[&PowerSpectrogram], rng: &mut impl Rng) -> Result<FeatureTensor> {
        let mut graph = Graph::new();
        let nodes = self.record(&mut graph, batch, rng)?;
        let out = self.to_features(&graph, &nodes)?;
        self.tape = Some(Tape { graph, nodes });
        Ok(out)
    }

    /// Pre-log filterbank output `Y` of the last [`FrontEnd::forward`] call.
    pub fn last_pre_log(&self) -> Option<&Tensor> {
        self.tape.as_ref().map(|t| t.graph.value(t.nodes.pre_log))
    }

    /// Pulls `upstream = dL/dfeatures` back to `dL/dW` through batch norm,
    /// the log floor, the dropout mask, the product and the ReLU.
    pub fn gradient_wrt_w(&self, upstream: &Tensor) -> Result<Tensor> {
        let tape = self
            .tape
            .as_ref()
            .ok_or_else(|| Error::Contract("gradient_wrt_w called before forward".into()))?;
        if !self.learnable {
            return Err(Error::Contract("filterbank is frozen".into()));
        }
        let mut graph = tape.graph.clone();
        let feats = tape.nodes.features();
        if upstream.len() != graph.value(feats).len() {
            return Err(Error::shape("gradient_wrt_w", upstream.shape(), graph.value(feats).shape()));
        }
        let weighted = graph.mask(feats, upstream.data().to_vec())?;
        let loss = graph.sum(weighted)?;
        let mut grads = graph.backward(loss)?;
        grads
            .take(tape.nodes.weights)
            .ok_or_else(|| Error::Contract("no gradient reached W".into()))
    }
}

/// Log-Mel baseline features of one clip, normalized by a fresh batch-norm
/// layer in inference mode.
pub fn logmel_features(clip: &AudioClip, channels: usize) -> Result<FeatureTensor> {
    let spec = Stft::new().clip_power(clip)?;
    let fe = FrontEnd::logmel(channels)?;
    fe.features(&[&spec], &mut ChaCha8Rng::seed_from_u64(0))
}
