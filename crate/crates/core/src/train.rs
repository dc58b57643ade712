//! Cross-entropy, Adam, early stopping and repeated training runs.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointMeta;
use crate::data::corpus::LabeledSet;
use crate::data::manifest::mix_seed;
use crate::dsp::{PowerSpectrogram, NUM_FRAMES};
use crate::error::{Error, Result};
use crate::frontend::{DropoutMode, FilterbankLayer, FrontEnd, FILTERBANK_DROPOUT};
use crate::graph::{cross_entropy_value, Graph};
use crate::model::{decide, AcousticModel, KwsModel, ModelConfig, Posteriors, Variant};
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

/// Mean of `-ln(max(p_label, e^-50))` over the batch.
pub fn cross_entropy(posteriors: &Tensor, labels: &[usize]) -> Result<f64> {
    if posteriors.rank() != 2 || posteriors.dim(0) != labels.len() {
        return Err(Error::shape("cross_entropy", posteriors.shape(), &[labels.len(), NUM_CLASSES]));
    }
    let classes = posteriors.dim(1);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("label {bad} outside [0, {classes})")));
    }
    if labels.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(cross_entropy_value(posteriors.data(), classes, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one entry per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shapes: &[&Tensor]) -> Self {
        AdamState {
            m: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len(), grads.len()],
            &[state.m.len(), state.m.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() || state.v[i].len() != p.len() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj as f64;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let update = cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Waiting,
    Stop,
}

/// Stops once the monitored loss failed to improve for `patience`
/// consecutive epochs. Epochs are numbered from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
    epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Result<Self> {
        if patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        Ok(EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
            epoch: 0,
        })
    }

    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.wait = 0;
            return StopDecision::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Waiting
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    /// Fixed Mel filterbank.
    #[serde(rename = "logmel")]
    LogMel,
    /// Filterbank trained jointly, without dropout.
    #[serde(rename = "learned")]
    Learned,
    /// Filterbank trained jointly with dropout on its output.
    #[serde(rename = "learned+dropout")]
    LearnedDropout,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::LogMel, Arm::Learned, Arm::LearnedDropout];

    pub fn name(self) -> &'static str {
        match self {
            Arm::LogMel => "logmel",
            Arm::Learned => "learned",
            Arm::LearnedDropout => "learned+dropout",
        }
    }

    pub fn trains_frontend(self) -> bool {
        self != Arm::LogMel
    }

    pub fn dropout_rate(self) -> f32 {
        match self {
            Arm::LearnedDropout => FILTERBANK_DROPOUT,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    pub arm: Arm,
    /// Filterbank channels `K`.
    pub filters: usize,
    pub variant: Variant,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dropout_mode: DropoutMode,
}

fn d_lr() -> f64 {
    AdamConfig::default().lr
}
fn d_beta1() -> f64 {
    AdamConfig::default().beta1
}
fn d_beta2() -> f64 {
    AdamConfig::default().beta2
}
fn d_eps() -> f64 {
    AdamConfig::default().eps
}
fn d_batch() -> usize {
    64
}
fn d_patience() -> usize {
    5
}
fn d_max_epochs() -> usize {
    100
}
fn d_seeds() -> Vec<u64> {
    (1..=5).collect()
}

impl TrainConfig {
    pub fn new(arm: Arm, filters: usize, variant: Variant) -> Self {
        TrainConfig {
            lr: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            batch_size: d_batch(),
            patience: d_patience(),
            max_epochs: d_max_epochs(),
            arm,
            filters,
            variant,
            seeds: d_seeds(),
            dropout_mode: DropoutMode::default(),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn frontend_trainable(&self) -> bool {
        self.arm.trains_frontend()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("Adam epsilon must be positive".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1".into());
        }
        if self.patience < 1 {
            return bad("patience must be >= 1".into());
        }
        if self.max_epochs < 1 {
            return bad("max epochs must be >= 1".into());
        }
        if self.filters < 1 {
            return bad("filter count K must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if let Some(w) = s.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("duplicate seed {}", w[0]));
        }
        Ok(())
    }

    /// A freshly initialized model for `seed`: Mel-initialized `W`, new weights.
    pub fn init_model(&self, seed: u64) -> Result<KwsModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_INIT]));
        let acoustic = AcousticModel::build(
            ModelConfig::for_variant(self.variant, NUM_FRAMES, self.filters),
            &mut rng,
        )?;
        let fb = FilterbankLayer::init_from_mel(self.filters)?
            .with_dropout(self.arm.dropout_rate(), self.dropout_mode)?;
        KwsModel::new(FrontEnd::new(fb, self.frontend_trainable()), acoustic)
    }
}

const TAG_INIT: u64 = 0x1417;
const TAG_SHUFFLE: u64 = 0x5e0f;
const TAG_DROPOUT: u64 = 0xd209;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl RunRecord {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|e| e.epoch == self.best_epoch)
    }

    /// `epoch,train_loss,train_acc,val_loss,val_acc`, one row per epoch.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.epochs {
            w.serialize(e)?;
        }
        if self.epochs.is_empty() {
            w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Rebuilds a record from its CSV; the best epoch is the first minimum
    /// of the validation loss.
    pub fn from_csv(seed: u64, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let epochs: Vec<EpochRecord> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        let mut best = (f64::INFINITY, 0);
        for e in &epochs {
            if e.val_loss < best.0 {
                best = (e.val_loss, e.epoch);
            }
        }
        Ok(RunRecord {
            seed,
            stopped_epoch: epochs.last().map_or(0, |e| e.epoch),
            epochs,
            best_epoch: best.1,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub record: RunRecord,
    /// Weights of the best validation epoch.
    pub model: KwsModel,
    pub meta: CheckpointMeta,
}

fn check_set(set: &LabeledSet, name: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Contract(format!("{name} split is empty")));
    }
    if let Some(s) = set.specs.iter().find(|s| s.frames() != NUM_FRAMES) {
        return Err(Error::Contract(format!(
            "{name} spectrogram has {} frames, expected {NUM_FRAMES}",
            s.frames()
        )));
    }
    Ok(())
}

/// Loss and accuracy of `model` in inference mode.
pub fn evaluate(model: &KwsModel, set: &LabeledSet, batch_size: usize) -> Result<(f64, f64)> {
    let mut model = model.clone();
    model.set_training(false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in (0..set.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let batch: Vec<&PowerSpectrogram> = chunk.iter().map(|&i| &set.specs[i]).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| set.labels[i]).collect();
        let post = model.forward(&batch, &mut rng)?;
        loss += cross_entropy(post.tensor(), &labels)? * chunk.len() as f64;
        correct += post.decisions().iter().zip(&labels).filter(|(d, l)| d == l).count();
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

/// Class decisions for every element of `set`, in inference mode.
pub fn predict(model: &KwsModel, set: &LabeledSet, batch_size: usize) -> Result<Vec<usize>> {
    let mut model = model.clone();
    model.set_training(false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.specs.chunks(batch_size.max(1)) {
        let batch: Vec<&PowerSpectrogram> = chunk.iter().collect();
        out.extend(model.forward(&batch, &mut rng)?.decisions());
    }
    Ok(out)
}

/// One optimization step on `batch`; returns the batch loss and the number
/// of correct training-mode decisions.
fn train_step(
    model: &mut KwsModel,
    batch: &[&PowerSpectrogram],
    labels: &[usize],
    state: &mut AdamState,
    adam: &AdamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let mut graph = Graph::new();
    let nodes = model.record(&mut graph, batch, rng)?;
    let post = Posteriors::new(graph.value(nodes.model.probs).clone())?;
    let correct = post.decisions().iter().zip(labels).filter(|(d, l)| d == l).count();
    let loss_node = graph.cross_entropy(nodes.model.probs, labels)?;
    let loss = graph.scalar(loss_node)?;
    let mut grads = graph.backward(loss_node)?;
    let params = model.trainable_nodes(&nodes);
    let norms = model.norm_nodes(&nodes);
    let grads: Vec<Tensor> = params
        .iter()
        .map(|&id| grads.take(id).unwrap_or_else(|| Tensor::zeros(graph.value(id).shape())))
        .collect();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    {
        let mut params = model.trainable_mut();
        if state.m.is_empty() {
            let shapes: Vec<&Tensor> = params.iter().map(|t| &**t).collect();
            *state = AdamState::new(&shapes);
        }
        adam_step(&mut params, &grad_refs, state, adam)?;
    }
    for (layer, &id) in model.norms_mut().into_iter().zip(&norms) {
        let shape = graph.value(id).shape().to_vec();
        let count = graph.value(id).len() / layer.channels();
        if let Some((mean, var)) = graph.batch_stats(id) {
            layer.update_running(mean, var, count);
        } else {
            return Err(Error::Contract(format!("batch norm {shape:?} lacks batch statistics")));
        }
    }
    Ok((loss, correct))
}

/// Trains one model from `seed`; `on_epoch` sees every finished epoch.
pub fn train_with(
    cfg: &TrainConfig,
    train: &LabeledSet,
    val: &LabeledSet,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedRun> {
    cfg.validate()?;
    check_set(train, "train")?;
    check_set(val, "validation")?;
    let mut model = cfg.init_model(seed)?;
    let adam = cfg.adam();
    let mut state = AdamState::default();
    let mut stopper = EarlyStopping::new(cfg.patience)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_DROPOUT]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best = model.clone();
    for epoch in 1..=cfg.max_epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_SHUFFLE, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut shuffle);
        model.set_training(true);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PowerSpectrogram> = chunk.iter().map(|&i| &train.specs[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let (l, c) = train_step(&mut model, &batch, &labels, &mut state, &adam, &mut dropout_rng)?;
            loss_sum += l * chunk.len() as f64;
            correct += c;
        }
        model.set_training(false);
        let (val_loss, val_acc) = evaluate(&model, val, cfg.batch_size)?;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss,
            val_acc,
        };
        on_epoch(&rec);
        epochs.push(rec);
        match stopper.observe(val_loss) {
            StopDecision::Improved => best = model.clone(),
            StopDecision::Waiting => {}
            StopDecision::Stop => break,
        }
    }
    let record = RunRecord {
        seed,
        stopped_epoch: epochs.len(),
        best_epoch: stopper.best_epoch(),
        epochs,
    };
    let meta = CheckpointMeta {
        arm: cfg.arm.name().to_string(),
        seed,
        epoch: record.best_epoch,
        val_loss: stopper.best(),
    };
    Ok(TrainedRun {
        record,
        model: best,
        meta,
    })
}

pub fn train(cfg: &TrainConfig, train: &LabeledSet, val: &LabeledSet, seed: u64) -> Result<TrainedRun> {
    train_with(cfg, train, val, seed, &mut |_| {})
}

/// Runs every seed of `cfg` on up to `jobs` threads. Results come back in
/// seed order and do not depend on `jobs`.
pub fn run_repetitions(
    cfg: &TrainConfig,
    train_set: &LabeledSet,
    val_set: &LabeledSet,
    jobs: usize,
) -> Result<Vec<TrainedRun>> {
    cfg.validate()?;
    run_seeds(&cfg.seeds, jobs, |seed| train(cfg, train_set, val_set, seed))
}

/// Applies `work` to each seed on a pool of `jobs` threads, keeping order.
pub fn run_seeds<T: Send>(
    seeds: &[u64],
    jobs: usize,
    work: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let jobs = jobs.clamp(1, seeds.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new(seeds.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let r = work(seeds[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect()
}

/// Decision for one posterior row; re-exported for callers of the trainer.
pub fn decision(row: &[f32]) -> usize {
    decide(row)
}
