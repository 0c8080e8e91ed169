//! Stitching objectives: soft-label matching, task-loss matching, direct
//! matching (Hint) and functional latent alignment, plus the clean/adversarial
//! mixture used for adversarial training.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{pgd_attack, AttackSpec, Classifier};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::nets::Until;
use crate::stitch::StitchedModel;
use crate::tensor::Tensor;

/// Denominator guard for normalized Hints.
pub const NORM_EPS: f64 = 1e-8;

fn check_logits(logits: &Tensor) -> Result<()> {
    if !logits.is_finite() {
        return Err(Error::Numerics("non-finite logits".into()));
    }
    Ok(())
}

fn log_softmax_row(row: &[f32], out: &mut [f64]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let sum: f64 = row.iter().map(|&v| libm::exp(v as f64 - max)).sum();
    let lse = max + libm::log(sum);
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v as f64 - lse;
    }
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.sample_len();
    let mut lp = vec![0.0f64; k];
    let mut out = Tensor::zeros(logits.shape());
    for s in 0..logits.batch() {
        log_softmax_row(logits.row(s), &mut lp);
        for (o, &v) in out.sample_mut(s).iter_mut().zip(&lp) {
            *o = libm::exp(v) as f32;
        }
    }
    out
}

/// Mean cross-entropy of `logits` against per-row target distributions and
/// its gradient w.r.t. the logits, scaled by `weight`.
pub fn soft_cross_entropy_grad(logits: &Tensor, targets: &Tensor, weight: f32) -> Result<(f64, Tensor)> {
    check_logits(logits)?;
    if logits.shape() != targets.shape() {
        return Err(Error::shape(logits.shape(), targets.shape()));
    }
    let n = logits.batch();
    let k = logits.sample_len();
    let mut lp = vec![0.0f64; k];
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for s in 0..n {
        log_softmax_row(logits.row(s), &mut lp);
        let t = targets.row(s);
        let tsum: f64 = t.iter().map(|&v| v as f64).sum();
        loss -= t.iter().zip(&lp).map(|(&ti, &l)| ti as f64 * l).sum::<f64>();
        for ((g, &l), &ti) in grad.sample_mut(s).iter_mut().zip(&lp).zip(t) {
            *g = ((libm::exp(l) * tsum - ti as f64) * weight as f64 / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(n, labels.len()));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, num_classes: k });
    }
    Ok(())
}

/// Mean hard-label cross-entropy and its (weighted) logit gradient.
pub fn cross_entropy_grad(logits: &Tensor, labels: &[usize], weight: f32) -> Result<(f64, Tensor)> {
    check_logits(logits)?;
    let (n, k) = (logits.batch(), logits.sample_len());
    check_labels(labels, n, k)?;
    let mut lp = vec![0.0f64; k];
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for (s, &y) in labels.iter().enumerate() {
        log_softmax_row(logits.row(s), &mut lp);
        loss -= lp[y];
        for (c, (g, &l)) in grad.sample_mut(s).iter_mut().zip(&lp).enumerate() {
            let t = if c == y { 1.0 } else { 0.0 };
            *g = ((libm::exp(l) - t) * weight as f64 / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

pub fn per_sample_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let (n, k) = (logits.batch(), logits.sample_len());
    check_labels(labels, n, k)?;
    let mut lp = vec![0.0f64; k];
    Ok(labels
        .iter()
        .enumerate()
        .map(|(s, &y)| {
            log_softmax_row(logits.row(s), &mut lp);
            -lp[y]
        })
        .collect())
}

/// Cross-entropy against the end model's softmax.
pub fn slm_loss(stitched_logits: &Tensor, end_logits: &Tensor) -> Result<f64> {
    check_logits(end_logits)?;
    Ok(soft_cross_entropy_grad(stitched_logits, &softmax(end_logits), 1.0)?.0)
}

/// Cross-entropy against ground-truth labels.
pub fn tlm_loss(stitched_logits: &Tensor, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_grad(stitched_logits, labels, 1.0)?.0)
}

/// Batch-level Frobenius distance, optionally divided by `||target||_F`, and
/// its gradient w.r.t. `t_out` scaled by `weight`. The target is a constant.
pub fn hint_loss_grad(t_out: &Tensor, target: &Tensor, normalized: bool, weight: f32) -> Result<(f64, Tensor)> {
    if t_out.shape() != target.shape() {
        return Err(Error::shape(target.shape(), t_out.shape()));
    }
    let mut diff = t_out.clone();
    diff.add_scaled(target, -1.0);
    let dist = diff.norm();
    let denom = if normalized {
        let tn = target.norm();
        if tn < NORM_EPS {
            log::warn!("normalized hint against a zero-norm target; denominator clamped to {NORM_EPS}");
        }
        tn.max(NORM_EPS)
    } else {
        1.0
    };
    if dist == 0.0 {
        return Ok((0.0, Tensor::zeros(t_out.shape())));
    }
    diff.scale((weight as f64 / (dist * denom)) as f32);
    Ok((dist / denom, diff))
}

pub fn hint_loss(t_out: &Tensor, target: &Tensor, normalized: bool) -> Result<f64> {
    Ok(hint_loss_grad(t_out, target, normalized, 1.0)?.0)
}

/// How functional Hint weights are spread over taps `j..=k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FulaMode {
    Uniform,
    LastOnly,
    /// Uniform over the structural Hint and the first `n` functional Hints.
    Cutoff(usize),
}

/// Simplex weights `c[0]` for the structural Hint at tap `j` and `c[l - j]`
/// for the functional Hint at tap `l`, `j < l <= k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuLAWeights {
    pub j: usize,
    pub k: usize,
    pub c: Vec<f64>,
    pub cutoff: Option<usize>,
}

impl FuLAWeights {
    pub fn new(j: usize, k: usize, c: Vec<f64>) -> Result<Self> {
        let w = FuLAWeights { j, k, c, cutoff: None };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.j > self.k || self.c.len() != self.k + 1 - self.j {
            return Err(Error::config(format!(
                "FuLA weights for taps {}..={} need {} entries, got {}",
                self.j,
                self.k,
                (self.k + 1).saturating_sub(self.j),
                self.c.len()
            )));
        }
        let sum: f64 = self.c.iter().sum();
        if self.c.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::config("FuLA weights must be nonnegative and sum to 1"));
        }
        Ok(())
    }

    /// `(tap, weight)` for every nonzero term.
    pub fn terms(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.c.iter().enumerate().filter(|(_, &w)| w > 0.0).map(move |(o, &w)| (self.j + o, w))
    }

    /// Deepest tap with nonzero weight.
    pub fn deepest(&self) -> usize {
        self.terms().map(|(t, _)| t).max().unwrap_or(self.j)
    }
}

pub fn make_fula_weights(j: usize, k: usize, mode: FulaMode) -> Result<FuLAWeights> {
    if j > k {
        return Err(Error::config(format!("FuLA needs j <= k, got j = {j}, k = {k}")));
    }
    let len = k + 1 - j;
    let mut c = vec![0.0; len];
    let mut cutoff = None;
    match mode {
        FulaMode::Uniform => c.iter_mut().for_each(|v| *v = 1.0 / len as f64),
        FulaMode::LastOnly => c[len - 1] = 1.0,
        FulaMode::Cutoff(n) => {
            if n > k - j {
                return Err(Error::config(format!(
                    "cutoff {n} exceeds the {} functional Hints after tap {j}",
                    k - j
                )));
            }
            c[..=n].iter_mut().for_each(|v| *v = 1.0 / (n + 1) as f64);
            cutoff = Some(n);
        }
    }
    Ok(FuLAWeights { j, k, c, cutoff })
}

/// Objective as written in an experiment config, before taps are known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveSpec {
    Slm,
    Tlm,
    Hint,
    Fula(FulaMode),
}

impl ObjectiveSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            ObjectiveSpec::Slm => "SLM",
            ObjectiveSpec::Tlm => "TLM",
            ObjectiveSpec::Hint => "Hint",
            ObjectiveSpec::Fula(_) => "FuLA",
        }
    }

    /// Binds the objective to stitching tap `j` with penultimate tap `k`.
    pub fn resolve(&self, j: usize, k: usize) -> Result<ObjectiveKind> {
        Ok(match *self {
            ObjectiveSpec::Slm => ObjectiveKind::Slm,
            ObjectiveSpec::Tlm => ObjectiveKind::Tlm,
            ObjectiveSpec::Hint => ObjectiveKind::Hint,
            ObjectiveSpec::Fula(mode) => ObjectiveKind::Fula(make_fula_weights(j, k, mode)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ObjectiveKind {
    Slm,
    Tlm,
    /// Unnormalized structural Hint (direct matching).
    Hint,
    Fula(FuLAWeights),
}

impl ObjectiveKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ObjectiveKind::Slm => "SLM",
            ObjectiveKind::Tlm => "TLM",
            ObjectiveKind::Hint => "Hint",
            ObjectiveKind::Fula(_) => "FuLA",
        }
    }
}

/// Share `alpha` of the loss comes from adversarial inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ATConfig {
    pub alpha: f32,
    #[serde(default)]
    pub attack: AttackSpec,
}

impl ATConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("AT alpha must lie in [0, 1], got {}", self.alpha)));
        }
        self.attack.validate()
    }
}

/// End-model quantities an objective compares against.
#[derive(Debug, Clone)]
pub struct Targets {
    pub logits: Option<Tensor>,
    /// `(tap, g_{<=tap}(x))` pairs.
    pub taps: Vec<(usize, Tensor)>,
}

/// Targets for `kind` from the end model on `x`, without touching its
/// running statistics.
pub fn end_targets(sm: &mut StitchedModel, x: &Tensor, kind: &ObjectiveKind) -> Result<Targets> {
    let j = sm.j();
    let mode = BnMode::Batch;
    Ok(match kind {
        ObjectiveKind::Tlm => Targets { logits: None, taps: vec![] },
        ObjectiveKind::Slm => Targets {
            logits: Some(sm.end.forward(x, mode)?),
            taps: vec![],
        },
        ObjectiveKind::Hint => Targets {
            logits: None,
            taps: vec![(j, sm.end.forward_to(j, x, mode)?)],
        },
        ObjectiveKind::Fula(w) => {
            let deepest = w.deepest();
            let tr = sm.end.trace(x, 0, Until::Tap(deepest), mode, false)?;
            let taps = w
                .terms()
                .map(|(t, _)| (t, if t == 0 { x.clone() } else { tr.tap(t).clone() }))
                .collect();
            Targets { logits: None, taps }
        }
    })
}

/// Result of one objective evaluation on a batch.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss: f64,
    pub logits: Tensor,
}

/// Evaluates `kind` on one batch; with `backward`, adds `weight * dL/dtheta`
/// to the stitch layer's gradient buffers.
///
/// The stitched pass always runs to the logits so running statistics see the
/// same layers whatever the objective.
pub fn stitched_objective(
    sm: &mut StitchedModel,
    x: &Tensor,
    labels: &[usize],
    kind: &ObjectiveKind,
    mode: BnMode,
    weight: f32,
    backward: bool,
) -> Result<ObjectiveEval> {
    if let ObjectiveKind::Fula(w) = kind {
        w.validate()?;
        if w.j != sm.j() || w.k > sm.end.num_taps() {
            return Err(Error::config(format!(
                "FuLA weights for taps {}..={} do not fit stitching tap {}",
                w.j,
                w.k,
                sm.j()
            )));
        }
    }
    let targets = end_targets(sm, x, kind)?;
    let trace = sm.trace(x, mode, backward, false, Until::Logits)?;
    let logits = trace.logits().clone();
    let mut grad_logits = None;
    let mut tap_grads: Vec<(usize, Tensor)> = Vec::new();
    let loss = match kind {
        ObjectiveKind::Tlm => {
            let (l, g) = cross_entropy_grad(&logits, labels, weight)?;
            grad_logits = Some(g);
            l
        }
        ObjectiveKind::Slm => {
            let end_logits = targets.logits.as_ref().expect("SLM targets");
            check_logits(end_logits)?;
            let (l, g) = soft_cross_entropy_grad(&logits, &softmax(end_logits), weight)?;
            grad_logits = Some(g);
            l
        }
        ObjectiveKind::Hint => {
            let (t, target) = &targets.taps[0];
            let (l, g) = hint_loss_grad(trace.end_tap(*t), target, false, weight)?;
            tap_grads.push((*t, g));
            l
        }
        ObjectiveKind::Fula(w) => {
            let mut total = 0.0;
            for ((t, cw), (_, target)) in w.terms().zip(&targets.taps) {
                let (l, g) = hint_loss_grad(trace.end_tap(t), target, true, weight * cw as f32)?;
                total += cw * l;
                tap_grads.push((t, g));
            }
            total
        }
    };
    if !loss.is_finite() {
        return Err(Error::Numerics(format!("{} loss is not finite", kind.tag())));
    }
    if backward {
        let refs: Vec<(usize, &Tensor)> = tap_grads.iter().map(|(t, g)| (*t, g)).collect();
        sm.backward(&trace, grad_logits.as_ref(), &refs, true)?;
    }
    Ok(ObjectiveEval { loss, logits })
}

/// FuLA value of the stitched model on `x` (no gradients, statistics untouched).
pub fn fula_loss(sm: &mut StitchedModel, x: &Tensor, w: &FuLAWeights) -> Result<f64> {
    let kind = ObjectiveKind::Fula(w.clone());
    Ok(stitched_objective(sm, x, &[], &kind, BnMode::Batch, 1.0, false)?.loss)
}

/// Evaluation of the clean/adversarial mixture on one batch.
#[derive(Debug, Clone)]
pub struct MixtureEval {
    pub loss: f64,
    pub clean: Option<ObjectiveEval>,
    pub adversarial: Option<(Tensor, ObjectiveEval)>,
}

/// `(1 - alpha) * loss(x) + alpha * loss(x_adv)` with `x_adv` crafted against
/// `model` itself. `loss(model, x, weight)` must return the loss and may
/// accumulate `weight`-scaled gradients; zero-weight terms are skipped.
pub fn at_mixture_loss<M, R, F>(
    model: &mut M,
    x: &Tensor,
    labels: &[usize],
    cfg: &ATConfig,
    norm: &Normalization,
    rng: &mut R,
    mut loss: F,
) -> Result<MixtureEval>
where
    M: Classifier + ?Sized,
    R: Rng,
    F: FnMut(&mut M, &Tensor, f32) -> Result<ObjectiveEval>,
{
    cfg.validate()?;
    let a = cfg.alpha;
    let mut total = 0.0;
    let clean = if a < 1.0 {
        let e = loss(model, x, 1.0 - a)?;
        total += (1.0 - a) as f64 * e.loss;
        Some(e)
    } else {
        None
    };
    let adversarial = if a > 0.0 {
        let x_adv = pgd_attack(model, x, labels, &cfg.attack, norm, BnMode::Batch, rng)?;
        let e = loss(model, &x_adv, a)?;
        total += a as f64 * e.loss;
        Some((x_adv, e))
    } else {
        None
    };
    Ok(MixtureEval {
        loss: total,
        clean,
        adversarial,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_prediction_on_ten_classes_is_ln10() {
        let logits = Tensor::zeros([3, 10, 1, 1]);
        let l = tlm_loss(&logits, &[0, 4, 9]).unwrap();
        assert!((l - libm::log(10.0)).abs() < 1e-12);
        let mut onehot = Tensor::full([1, 10, 1, 1], -1e4);
        onehot.data_mut()[2] = 1e4;
        let s = slm_loss(&Tensor::zeros([1, 10, 1, 1]), &onehot).unwrap();
        assert!((s - libm::log(10.0)).abs() < 1e-9);
    }

    #[test]
    fn three_class_soft_target_by_hand() {
        // logits (1, 2, 3): log p = (-2.4076, -1.4076, -0.4076)
        let logits = Tensor::from_rows(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let t = Tensor::from_rows(1, 3, vec![0.5, 0.3, 0.2]).unwrap();
        let (l, _) = soft_cross_entropy_grad(&logits, &t, 1.0).unwrap();
        let lse = libm::log(libm::exp(1.0) + libm::exp(2.0) + libm::exp(3.0));
        let want = -(0.5 * (1.0 - lse) + 0.3 * (2.0 - lse) + 0.2 * (3.0 - lse));
        assert!((l - want).abs() < 1e-6);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let logits = Tensor::zeros([1, 3, 1, 1]);
        assert!(matches!(tlm_loss(&logits, &[3]), Err(Error::Label { label: 3, num_classes: 3 })));
    }

    #[test]
    fn normalized_hint_is_homogeneous() {
        let target = Tensor::from_vec([1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        let mut t2 = target.clone();
        t2.scale(2.0);
        let zero = Tensor::zeros([1, 2, 1, 1]);
        assert_eq!(hint_loss(&zero, &target, true).unwrap(), 1.0);
        assert_eq!(hint_loss(&zero, &t2, true).unwrap(), 1.0);
        assert_eq!(hint_loss(&target, &target, false).unwrap(), 0.0);
    }

    #[test]
    fn fula_weight_modes() {
        let u = make_fula_weights(1, 9, FulaMode::Uniform).unwrap();
        assert_eq!(u.c.len(), 9);
        assert!(u.c.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
        let e = make_fula_weights(9, 9, FulaMode::Uniform).unwrap();
        assert_eq!(e.c, vec![1.0]);
        let last = make_fula_weights(3, 9, FulaMode::LastOnly).unwrap();
        assert_eq!(last.terms().collect::<Vec<_>>(), vec![(9, 1.0)]);
        let cut = make_fula_weights(2, 9, FulaMode::Cutoff(3)).unwrap();
        assert_eq!(cut.terms().map(|(t, _)| t).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
        assert!(cut.c[4..].iter().all(|&v| v == 0.0));
        assert!(make_fula_weights(7, 9, FulaMode::Cutoff(3)).is_err());
    }

    #[test]
    fn at_config_rejects_bad_alpha() {
        let cfg = ATConfig { alpha: 1.5, attack: AttackSpec::default() };
        assert!(cfg.validate().is_err());
    }
}
