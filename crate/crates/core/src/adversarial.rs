//! `L_inf` projected gradient descent and robust accuracy.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::nets::{TappedNetwork, Until};
use crate::objectives::{cross_entropy_grad, per_sample_cross_entropy};
use crate::stitch::StitchedModel;
use crate::tensor::Tensor;

/// A model that can be attacked through its input.
pub trait Classifier {
    fn num_classes(&self) -> usize;

    fn logits(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor>;

    /// Logits and the gradient of the mean cross-entropy w.r.t. `x`.
    fn input_gradient(&mut self, x: &Tensor, labels: &[usize], mode: BnMode) -> Result<(Tensor, Tensor)>;
}

impl Classifier for TappedNetwork {
    fn num_classes(&self) -> usize {
        TappedNetwork::num_classes(self)
    }

    fn logits(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        self.forward(x, mode)
    }

    fn input_gradient(&mut self, x: &Tensor, labels: &[usize], mode: BnMode) -> Result<(Tensor, Tensor)> {
        let trace = self.trace(x, 0, Until::Logits, mode, true)?;
        let (_, g) = cross_entropy_grad(trace.logits(), labels, 1.0)?;
        let gx = self.backward(&trace, Some(&g), &[], false)?;
        Ok((trace.logits.expect("traced to logits"), gx))
    }
}

impl Classifier for StitchedModel {
    fn num_classes(&self) -> usize {
        StitchedModel::num_classes(self)
    }

    fn logits(&mut self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        self.forward(x, mode)
    }

    fn input_gradient(&mut self, x: &Tensor, labels: &[usize], mode: BnMode) -> Result<(Tensor, Tensor)> {
        let trace = self.trace(x, mode, true, true, Until::Logits)?;
        let (_, g) = cross_entropy_grad(trace.logits(), labels, 1.0)?;
        let gx = self
            .backward(&trace, Some(&g), &[], false)?
            .ok_or_else(|| Error::config("stitched trace lacks the input path"))?;
        Ok((trace.end.logits.expect("traced to logits"), gx))
    }
}

/// `L_inf` PGD settings; radii and steps are in pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default = "AttackSpec::default_epsilon")]
    pub epsilon: f32,
    #[serde(default = "AttackSpec::default_step")]
    pub step_size: f32,
    #[serde(default = "AttackSpec::default_iters")]
    pub iters: usize,
    #[serde(default = "AttackSpec::default_random_start")]
    pub random_start: bool,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            epsilon: Self::default_epsilon(),
            step_size: Self::default_step(),
            iters: Self::default_iters(),
            random_start: Self::default_random_start(),
        }
    }
}

impl AttackSpec {
    fn default_epsilon() -> f32 {
        8.0 / 255.0
    }

    fn default_step() -> f32 {
        2.0 / 255.0
    }

    fn default_iters() -> usize {
        10
    }

    fn default_random_start() -> bool {
        true
    }

    /// PGD-20 with a random start, used for robust accuracy reporting.
    pub fn evaluation() -> Self {
        AttackSpec {
            iters: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("attack epsilon must be >= 0"));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::config("attack step_size must be > 0"));
        }
        if self.iters == 0 {
            return Err(Error::config("attack iters must be >= 1"));
        }
        Ok(())
    }
}

/// Crafts `x + delta` with `||delta||_inf <= epsilon` in pixel space.
///
/// `x` lives in normalized space; radii are rescaled per channel by
/// `norm.std` and iterates are clipped to the image of the pixel range. Each
/// sample keeps the iterate (start point included) with the highest loss.
pub fn pgd_attack<M: Classifier + ?Sized, R: Rng>(
    model: &mut M,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    norm: &Normalization,
    mode: BnMode,
    rng: &mut R,
) -> Result<Tensor> {
    spec.validate()?;
    let [n, c, h, w] = x.shape();
    if c != norm.channels() {
        return Err(Error::shape(norm.channels(), c));
    }
    if labels.len() != n {
        return Err(Error::shape(n, labels.len()));
    }
    if spec.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let plane = h * w;
    // per-channel (eps, step, lo, hi) in normalized units
    let chan: Vec<(f32, f32, f32, f32)> = (0..c)
        .map(|ch| {
            let (lo, hi) = norm.bounds(ch);
            (spec.epsilon / norm.std[ch], spec.step_size / norm.std[ch], lo, hi)
        })
        .collect();
    let project = |adv: &mut Tensor| {
        for (idx, (a, &x0)) in adv.data_mut().iter_mut().zip(x.data()).enumerate() {
            let (eps, _, lo, hi) = chan[(idx / plane) % c];
            *a = a.clamp(x0 - eps, x0 + eps).clamp(lo, hi);
        }
    };
    let mut adv = x.clone();
    if spec.random_start {
        for (idx, a) in adv.data_mut().iter_mut().enumerate() {
            let eps = chan[(idx / plane) % c].0;
            *a += rng.random_range(-eps..=eps);
        }
        project(&mut adv);
    }
    let mut best = adv.clone();
    let mut best_loss = vec_neg_inf(n);
    for it in 0..=spec.iters {
        let (logits, grad) = model.input_gradient(&adv, labels, mode)?;
        let losses = per_sample_cross_entropy(&logits, labels)?;
        for s in 0..n {
            if losses[s] > best_loss[s] {
                best_loss[s] = losses[s];
                best.sample_mut(s).copy_from_slice(adv.sample(s));
            }
        }
        if it == spec.iters {
            break;
        }
        if !grad.is_finite() {
            return Err(Error::Numerics("non-finite input gradient during attack".into()));
        }
        for (idx, (a, &g)) in adv.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let step = chan[(idx / plane) % c].1;
            *a += step * sign(g);
        }
        project(&mut adv);
    }
    Ok(best)
}

fn vec_neg_inf(n: usize) -> Vec<f64> {
    alloc::vec![f64::NEG_INFINITY; n]
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fraction of `data` (pixel space) classified correctly, optionally after PGD.
pub fn accuracy<M: Classifier + ?Sized, R: Rng>(
    model: &mut M,
    data: &Dataset,
    norm: &Normalization,
    attack: Option<&AttackSpec>,
    batch: usize,
    rng: &mut R,
) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for idx in data.batches::<R>(batch, None) {
        let (pixels, labels) = data.batch(&idx);
        let mut x = norm.normalize(&pixels);
        if let Some(spec) = attack {
            x = pgd_attack(model, &x, &labels, spec, norm, BnMode::Running, rng)?;
        }
        let pred = model.logits(&x, BnMode::Running)?.argmax_rows();
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy under PGD crafted per batch against `model` in evaluation mode.
pub fn robust_accuracy<M: Classifier + ?Sized, R: Rng>(
    model: &mut M,
    data: &Dataset,
    norm: &Normalization,
    spec: &AttackSpec,
    batch: usize,
    rng: &mut R,
) -> Result<f64> {
    accuracy(model, data, norm, Some(spec), batch, rng)
}
