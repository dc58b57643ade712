//! Finite-difference verification of the pipeline's analytic gradients.
//!
//! The network is only piecewise smooth: every ReLU contributes a kink. A
//! central difference whose interval crosses one measures an average of two
//! slopes, not the derivative. Each element therefore uses the largest step
//! from a ladder for which the activation pattern at both ends matches the
//! base point. Short intervals are noise-limited by f32 rounding of the
//! loss, so below `fit_below` the slope is a least-squares fit over many
//! symmetric points, which is the average of the central differences at every
//! sub-step weighted by step squared.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::PowerSpectrogram;
use crate::error::{Error, Result};
use crate::frontend::{DropoutMode, FilterbankLayer, FrontEnd};
use crate::graph::Graph;
use crate::model::{AcousticModel, KwsModel, ModelConfig};
use crate::tensor::Tensor;

/// A model, a batch and its labels.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: KwsModel,
    pub batch: Vec<PowerSpectrogram>,
    pub labels: Vec<usize>,
}

impl Instance {
    /// Learnable filterbank into a res8-narrow-like network; F=16 bins,
    /// K=3 channels, T=8 frames, batch 2.
    pub fn reduced(seed: u64) -> Result<Self> {
        let (bins, channels, frames) = (16, 3, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // positive weights with a few clearly negative entries
        let w = Tensor::from_fn(&[bins, channels], |i| {
            if i % 7 == 3 {
                -0.5
            } else {
                rng.random_range(0.2..1.0)
            }
        });
        let fb = FilterbankLayer::from_weights(w)?.with_dropout(0.0, DropoutMode::Element)?;
        let acoustic =
            AcousticModel::build(ModelConfig::res8_narrow_like(frames, channels), &mut rng)?;
        let mut model = KwsModel::new(FrontEnd::new(fb, true), acoustic)?;
        // generic affine parameters so no gradient is zero by symmetry
        for n in model.norms_mut() {
            for (i, g) in n.gamma.data_mut().iter_mut().enumerate() {
                *g = 1.0 + 0.1 * (i as f32 % 3.0);
            }
            for (i, b) in n.beta.data_mut().iter_mut().enumerate() {
                *b = 0.05 * (i as f32 % 4.0) - 0.05;
            }
        }
        model.set_training(true);
        let batch = (0..2)
            .map(|_| {
                let v = (0..frames * bins).map(|_| rng.random_range(0.01..4.0)).collect();
                PowerSpectrogram::new(v, frames, bins)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Instance {
            model,
            batch,
            labels: vec![3, 10],
        })
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Candidate half-widths, largest first.
    pub steps: Vec<f32>,
    /// Steps below this use the fitted slope.
    pub fit_below: f32,
    pub rel_tol: f64,
    /// Gradients smaller than this compare on an absolute footing.
    pub abs_floor: f64,
    /// Seed of the dropout mask stream, fixed across probe points.
    pub mask_seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            steps: vec![1e-3, 5e-4, 2e-4, 1e-4, 5e-5],
            fit_below: 1e-3,
            rel_tol: 1e-2,
            abs_floor: 1e-3,
            mask_seed: 99,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    /// Index into [`KwsModel::trainable_mut`].
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    /// Step and estimate, or `None` when every step crossed a kink.
    pub numeric: Option<(f32, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty() && self.checked > 0
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

struct Eval {
    loss: f64,
    pattern: Vec<bool>,
}

fn evaluate(inst: &Instance, model: &KwsModel, seed: u64, grads: bool) -> Result<(Eval, Vec<Tensor>)> {
    let refs: Vec<&PowerSpectrogram> = inst.batch.iter().collect();
    let mut g = Graph::new();
    let nodes = model.record(&mut g, &refs, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let l = g.cross_entropy(nodes.model.probs, &inst.labels)?;
    let mut out = Vec::new();
    if grads {
        let mut gr = g.backward(l)?;
        for id in model.trainable_nodes(&nodes) {
            out.push(
                gr.take(id)
                    .ok_or_else(|| Error::Contract("missing gradient for a trainable leaf".into()))?,
            );
        }
    }
    let eval = Eval {
        loss: g.scalar(l)?,
        pattern: g.kink_pattern(),
    };
    Ok((eval, out))
}

struct Prober<'a> {
    inst: &'a Instance,
    base: Eval,
    seed: u64,
}

impl Prober<'_> {
    /// Step actually taken after f32 rounding, and the loss if the activation
    /// pattern is unchanged.
    fn probe(&self, p: usize, i: usize, delta: f32) -> Result<(f64, Option<f64>)> {
        let mut m = self.inst.model.clone();
        let x0 = m.trainable_mut()[p].data()[i];
        m.trainable_mut()[p].data_mut()[i] = x0 + delta;
        let taken = (m.trainable_mut()[p].data()[i] - x0) as f64;
        let (e, _) = evaluate(self.inst, &m, self.seed, false)?;
        Ok((taken, (e.pattern == self.base.pattern).then_some(e.loss)))
    }

    fn central(&self, p: usize, i: usize, h: f32) -> Result<Option<f64>> {
        let (tp, a) = self.probe(p, i, h)?;
        let (tm, b) = self.probe(p, i, -h)?;
        Ok(a.zip(b).map(|(a, b)| (a - b) / (tp - tm)))
    }

    fn fitted(&self, p: usize, i: usize, h: f32) -> Result<Option<f64>> {
        let n = fit_points(h);
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for k in 1..=n {
            let d = h * k as f32 / n as f32;
            for s in [d, -d] {
                let (t, l) = self.probe(p, i, s)?;
                let Some(l) = l else { return Ok(None) };
                sxy += t * (l - self.base.loss);
                sxx += t * t;
            }
        }
        Ok(Some(sxy / sxx))
    }
}

/// Fit points per side; the fitted slope's rounding noise scales as
/// `1 / (h * sqrt(points))`, so this holds it constant.
fn fit_points(h: f32) -> usize {
    (8.0 * (2e-4 / h as f64).powi(2)).round().max(8.0) as usize
}

/// Compare every element of every trainable tensor.
pub fn check(inst: &Instance, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (base, grads) = evaluate(inst, &inst.model, cfg.mask_seed, true)?;
    let prober = Prober {
        inst,
        base,
        seed: cfg.mask_seed,
    };
    let mut report = GradCheckReport::default();
    for (p, grad) in grads.iter().enumerate() {
        for i in 0..grad.len() {
            let analytic = grad.data()[i] as f64;
            let mut numeric = None;
            for &h in &cfg.steps {
                // end points first: a kink there rules the step out cheaply
                let Some(c) = prober.central(p, i, h)? else { continue };
                let est = if h >= cfg.fit_below {
                    Some(c)
                } else {
                    prober.fitted(p, i, h)?
                };
                if let Some(est) = est {
                    numeric = Some((h, est));
                    break;
                }
            }
            report.checked += 1;
            let ok = match numeric {
                Some((_, n)) => {
                    let e = rel_err(analytic, n, cfg.abs_floor);
                    report.worst = report.worst.max(e);
                    e < cfg.rel_tol
                }
                None => false,
            };
            if !ok {
                report.mismatches.push(Mismatch {
                    param: p,
                    index: i,
                    analytic,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
