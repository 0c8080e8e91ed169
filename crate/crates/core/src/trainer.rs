//! Training loops for base networks and stitching layers.

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{accuracy, AttackSpec};
use crate::data::{augment, Dataset, Normalization, PadMode};
use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::nets::{NetConfig, TappedNetwork, Until};
use crate::objectives::{at_mixture_loss, cross_entropy_grad, stitched_objective, ATConfig, ObjectiveEval, ObjectiveSpec};
use crate::optim::{Adam, Sgd};
use crate::shortcuts::{apply_shortcut, shortcut_gap, ShortcutKind, ShortcutSpec};
use crate::stitch::{dm_init, DmInit, StitchedModel, DEFAULT_INIT_SAMPLES};
use crate::tensor::Tensor;

/// Random-crop padding: 4 pixels at 32px, scaled with the resolution.
pub fn crop_pad(resolution: usize) -> usize {
    (resolution / 8).max(1)
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_batch() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseTrainRecipe {
    pub epochs: usize,
    #[serde(default = "BaseTrainRecipe::default_lr")]
    pub lr: f32,
    #[serde(default = "BaseTrainRecipe::default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "BaseTrainRecipe::default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub pad_mode: PadMode,
    #[serde(default)]
    pub at: Option<ATConfig>,
    /// Test samples used for the per-epoch robust accuracy under AT.
    #[serde(default = "BaseTrainRecipe::default_robust_eval")]
    pub robust_eval_samples: usize,
}

impl BaseTrainRecipe {
    fn default_lr() -> f32 {
        0.1
    }

    fn default_momentum() -> f32 {
        0.9
    }

    fn default_weight_decay() -> f32 {
        1e-4
    }

    fn default_robust_eval() -> usize {
        500
    }

    pub fn new(epochs: usize) -> Self {
        BaseTrainRecipe {
            epochs,
            lr: Self::default_lr(),
            momentum: Self::default_momentum(),
            batch: default_batch(),
            weight_decay: Self::default_weight_decay(),
            augment: true,
            pad_mode: PadMode::Zero,
            at: None,
            robust_eval_samples: Self::default_robust_eval(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::config("base recipe needs epochs >= 1, lr > 0 and batch >= 1"));
        }
        if let Some(at) = &self.at {
            at.validate()?;
        }
        Ok(())
    }

    /// Step decay by 0.1 after each third of training.
    pub fn lr_at(&self, epoch: usize) -> f32 {
        let drops = (1..=2).filter(|&k| epoch >= (k * self.epochs + 1) / 3).count();
        self.lr * libm::powf(0.1, drops as f32)
    }
}

/// Shortcut markers injected into stitching-time data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShortcutConfig {
    pub kind: ShortcutKind,
    #[serde(default = "ShortcutConfig::default_marker")]
    pub marker_size: usize,
    #[serde(default)]
    pub noise_seed: u64,
}

impl ShortcutConfig {
    fn default_marker() -> usize {
        4
    }

    pub fn build(&self, num_classes: usize, resolution: usize) -> Result<ShortcutSpec> {
        ShortcutSpec::new(self.kind, num_classes, resolution, self.marker_size, self.noise_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StitchTrainRecipe {
    pub epochs: usize,
    #[serde(default = "StitchTrainRecipe::default_lr")]
    pub lr: f32,
    #[serde(default = "StitchTrainRecipe::default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "StitchTrainRecipe::default_n_init")]
    pub n_init: usize,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub at: Option<ATConfig>,
    #[serde(default)]
    pub shortcut: Option<ShortcutConfig>,
    #[serde(default)]
    pub class_subset: Option<Vec<usize>>,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub pad_mode: PadMode,
    /// Keep the frozen networks' running statistics live during training.
    #[serde(default = "default_true")]
    pub rs_update: bool,
    /// Evaluate the objective on the training data before the first update.
    #[serde(default = "default_true")]
    pub initial_eval: bool,
    /// Robust accuracy is measured on this many test samples (0 disables it).
    #[serde(default = "StitchTrainRecipe::default_robust_eval")]
    pub robust_eval_samples: usize,
    /// Robust accuracy is measured every this many epochs and after the last.
    #[serde(default = "default_one")]
    pub robust_eval_every: usize,
    #[serde(default = "StitchTrainRecipe::default_eval_attack")]
    pub eval_attack: AttackSpec,
}

impl StitchTrainRecipe {
    fn default_lr() -> f32 {
        1e-3
    }

    fn default_weight_decay() -> f32 {
        1e-4
    }

    fn default_n_init() -> usize {
        DEFAULT_INIT_SAMPLES
    }

    fn default_robust_eval() -> usize {
        500
    }

    fn default_eval_attack() -> AttackSpec {
        AttackSpec::evaluation()
    }

    pub fn new(epochs: usize, objective: ObjectiveSpec) -> Self {
        StitchTrainRecipe {
            epochs,
            lr: Self::default_lr(),
            weight_decay: Self::default_weight_decay(),
            batch: default_batch(),
            n_init: Self::default_n_init(),
            objective,
            at: None,
            shortcut: None,
            class_subset: None,
            augment: true,
            pad_mode: PadMode::Zero,
            rs_update: true,
            initial_eval: true,
            robust_eval_samples: Self::default_robust_eval(),
            robust_eval_every: 1,
            eval_attack: Self::default_eval_attack(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_init == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::config("stitch recipe needs n_init >= 1, batch >= 1 and lr > 0"));
        }
        if let Some(at) = &self.at {
            at.validate()?;
        }
        self.eval_attack.validate()
    }
}

/// One line of a training log. Epoch 0 describes the model before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch.
    pub loss: f64,
    pub train_acc: f64,
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
    pub shortcut_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<EpochRecord>,
}

impl MetricsLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Receives each record as soon as it is produced.
pub trait MetricsSink {
    fn record(&mut self, record: &EpochRecord);
}

impl MetricsSink for MetricsLog {
    fn record(&mut self, record: &EpochRecord) {
        self.records.push(record.clone());
    }
}

/// Discards records.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &EpochRecord) {}
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    logits.argmax_rows().iter().zip(labels).filter(|(p, l)| p == l).count()
}

fn check_loss(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Training {
            epoch,
            reason: "loss is not finite".to_string(),
        })
    }
}

/// Trains a network from scratch with SGD, step decay and optional AT.
pub fn train_base(
    config: &NetConfig,
    train: &Dataset,
    test: &Dataset,
    norm: &Normalization,
    recipe: &BaseTrainRecipe,
    seed: u64,
    sink: &mut dyn MetricsSink,
) -> Result<(TappedNetwork, MetricsLog)> {
    recipe.validate()?;
    if train.num_classes != config.num_classes {
        return Err(Error::config("dataset and network class counts differ"));
    }
    let mut net = TappedNetwork::build(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
    let mut opt = Sgd::new(recipe.lr, recipe.momentum, recipe.weight_decay);
    let mut log = MetricsLog::default();
    let robust_eval = test.take(recipe.robust_eval_samples);
    for epoch in 1..=recipe.epochs {
        opt.lr = recipe.lr_at(epoch - 1);
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for idx in train.batches(recipe.batch, Some(&mut rng)) {
            let (mut pixels, labels) = train.batch(&idx);
            if recipe.augment {
                augment(&mut pixels, crop_pad(train.resolution()), recipe.pad_mode, &mut rng);
            }
            let x = norm.normalize(&pixels);
            net.zero_grad();
            let mut step = |net: &mut TappedNetwork, x: &Tensor, weight: f32| -> Result<ObjectiveEval> {
                let trace = net.trace(x, 0, Until::Logits, BnMode::BatchUpdate, true)?;
                let (loss, g) = cross_entropy_grad(trace.logits(), &labels, weight)?;
                net.backward(&trace, Some(&g), &[], true)?;
                Ok(ObjectiveEval {
                    loss,
                    logits: trace.logits.expect("traced to logits"),
                })
            };
            let (loss, logits) = match &recipe.at {
                Some(at) => {
                    let mix = at_mixture_loss(&mut net, &x, &labels, at, norm, &mut rng, &mut step)?;
                    let logits = mix.clean.or(mix.adversarial.map(|(_, e)| e)).expect("one term").logits;
                    (mix.loss, logits)
                }
                None => {
                    let e = step(&mut net, &x, 1.0)?;
                    (e.loss, e.logits)
                }
            };
            check_loss(loss, epoch)?;
            opt.step(&mut net);
            loss_sum += loss * labels.len() as f64;
            hits += correct(&logits, &labels);
            seen += labels.len();
        }
        let clean_acc = accuracy(&mut net, test, norm, None, recipe.batch, &mut rng)?;
        let robust_acc = match &recipe.at {
            Some(at) if !robust_eval.is_empty() => Some(accuracy(
                &mut net,
                &robust_eval,
                norm,
                Some(&AttackSpec {
                    iters: 20,
                    ..at.attack
                }),
                recipe.batch,
                &mut rng,
            )?),
            _ => None,
        };
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            train_acc: hits as f64 / seen.max(1) as f64,
            clean_acc,
            robust_acc,
            shortcut_acc: None,
        };
        log::info!("base epoch {epoch}: loss {:.4} acc {:.4}", rec.loss, rec.clean_acc);
        sink.record(&rec);
        log.records.push(rec);
    }
    Ok((net, log))
}

/// Everything one stitching run needs.
#[derive(Debug, Clone, Copy)]
pub struct StitchTask<'a> {
    pub front: &'a TappedNetwork,
    pub end: &'a TappedNetwork,
    pub i: usize,
    pub j: usize,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub norm: &'a Normalization,
    pub recipe: &'a StitchTrainRecipe,
    pub seed: u64,
}

/// Trained stitched model, its closed-form initialization and the log.
#[derive(Debug, Clone)]
pub struct StitchRun {
    pub model: StitchedModel,
    pub init: DmInit,
    pub log: MetricsLog,
}

/// Closed-form initialization from the first `n_init` samples of a seeded
/// permutation of the (possibly class-filtered and shortcut-stamped) data.
pub fn stitch_init(
    front: &mut TappedNetwork,
    end: &mut TappedNetwork,
    i: usize,
    j: usize,
    train: &Dataset,
    norm: &Normalization,
    n_init: usize,
    shortcut: Option<&ShortcutSpec>,
    seed: u64,
) -> Result<DmInit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a17);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(n_init);
    let (mut pixels, labels) = train.batch(&order);
    if let Some(spec) = shortcut {
        pixels = apply_shortcut(&pixels, &labels, spec, &mut rng)?;
    }
    let x = norm.normalize(&pixels);
    let fa = front.forward_to(i, &x, BnMode::Running)?;
    let ea = end.forward_to(j, &x, BnMode::Running)?;
    dm_init(&fa, &ea, i, j)
}

struct StitchEval {
    clean_acc: f64,
    robust_acc: Option<f64>,
    shortcut_acc: Option<f64>,
}

fn evaluate_stitch(
    sm: &mut StitchedModel,
    task: &StitchTask,
    shortcut: Option<&ShortcutSpec>,
    robust_eval: &Dataset,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StitchEval> {
    let recipe = task.recipe;
    let every = recipe.robust_eval_every.max(1);
    let robust_due = epoch == recipe.epochs || epoch.is_multiple_of(every);
    let (clean_acc, shortcut_acc) = match shortcut {
        Some(spec) => {
            let (c, s) = shortcut_gap(sm, task.test, task.norm, spec, recipe.batch)?;
            (c, Some(s))
        }
        None => (accuracy(sm, task.test, task.norm, None, recipe.batch, rng)?, None),
    };
    let robust_acc = if recipe.at.is_some() && robust_due && !robust_eval.is_empty() {
        Some(accuracy(sm, robust_eval, task.norm, Some(&recipe.eval_attack), recipe.batch, rng)?)
    } else {
        None
    };
    Ok(StitchEval {
        clean_acc,
        robust_acc,
        shortcut_acc,
    })
}

/// Initializes the stitch layer in closed form and then optimizes the
/// configured objective with Adam. Front and end stay frozen; the stitched
/// model owns copies of their normalization statistics.
pub fn train_stitch(task: &StitchTask, sink: &mut dyn MetricsSink) -> Result<StitchRun> {
    let recipe = task.recipe;
    recipe.validate()?;
    let k = task.end.num_taps();
    let kind = recipe.objective.resolve(task.j, k)?;
    let mut front = task.front.clone();
    let mut end = task.end.clone();
    let train = match &recipe.class_subset {
        Some(classes) => task.train.filter_classes(classes)?,
        None => task.train.clone(),
    };
    if train.is_empty() {
        return Err(Error::config("stitching training set is empty"));
    }
    let shortcut = match &recipe.shortcut {
        Some(cfg) if cfg.kind != ShortcutKind::None => Some(cfg.build(task.train.num_classes, train.resolution())?),
        _ => None,
    };
    let init = stitch_init(
        &mut front,
        &mut end,
        task.i,
        task.j,
        &train,
        task.norm,
        recipe.n_init,
        shortcut.as_ref(),
        task.seed,
    )?;
    let mut sm = StitchedModel::new(front, end, init.layer.clone())?;
    sm.set_rs_update(recipe.rs_update);
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed ^ 0x57_17c4);
    let robust_eval = task.test.take(recipe.robust_eval_samples);
    let mut log = MetricsLog::default();
    let mut opt = Adam::new(recipe.lr, recipe.weight_decay);

    let prepare = |idx: &[usize], rng: &mut ChaCha8Rng| -> Result<(Tensor, Vec<usize>)> {
        let (mut pixels, labels) = train.batch(idx);
        if recipe.augment {
            augment(&mut pixels, crop_pad(train.resolution()), recipe.pad_mode, rng);
        }
        if let Some(spec) = &shortcut {
            pixels = apply_shortcut(&pixels, &labels, spec, rng)?;
        }
        Ok((task.norm.normalize(&pixels), labels))
    };

    if recipe.initial_eval || recipe.epochs == 0 {
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(task.seed ^ 0xe7a1);
        for idx in train.batches::<ChaCha8Rng>(recipe.batch, None) {
            let (x, labels) = prepare(&idx, &mut eval_rng)?;
            let e = stitched_objective(&mut sm, &x, &labels, &kind, BnMode::Batch, 1.0, false)?;
            loss_sum += e.loss * labels.len() as f64;
            hits += correct(&e.logits, &labels);
        }
        let ev = evaluate_stitch(&mut sm, task, shortcut.as_ref(), &robust_eval, 0, &mut eval_rng)?;
        let rec = EpochRecord {
            epoch: 0,
            loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            clean_acc: ev.clean_acc,
            robust_acc: ev.robust_acc,
            shortcut_acc: ev.shortcut_acc,
        };
        sink.record(&rec);
        log.records.push(rec);
    }

    for epoch in 1..=recipe.epochs {
        let (mut loss_sum, mut hits, mut seen) = (0.0, 0usize, 0usize);
        for idx in train.batches(recipe.batch, Some(&mut rng)) {
            let (x, labels) = prepare(&idx, &mut rng)?;
            sm.layer.zero_grad();
            let mut step = |sm: &mut StitchedModel, x: &Tensor, weight: f32| {
                stitched_objective(sm, x, &labels, &kind, BnMode::BatchUpdate, weight, true)
            };
            let (loss, logits) = match &recipe.at {
                Some(at) => {
                    let mix = at_mixture_loss(&mut sm, &x, &labels, at, task.norm, &mut rng, &mut step)?;
                    let logits = mix.clean.or(mix.adversarial.map(|(_, e)| e)).expect("one term").logits;
                    (mix.loss, logits)
                }
                None => {
                    let e = step(&mut sm, &x, 1.0)?;
                    (e.loss, e.logits)
                }
            };
            check_loss(loss, epoch)?;
            opt.step(&mut sm.layer);
            if sm.layer.weight().iter().chain(sm.layer.bias()).any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    reason: "stitch parameters became non-finite".to_string(),
                });
            }
            loss_sum += loss * labels.len() as f64;
            hits += correct(&logits, &labels);
            seen += labels.len();
        }
        let ev = evaluate_stitch(&mut sm, task, shortcut.as_ref(), &robust_eval, epoch, &mut rng)?;
        let rec = EpochRecord {
            epoch,
            loss: loss_sum / seen.max(1) as f64,
            train_acc: hits as f64 / seen.max(1) as f64,
            clean_acc: ev.clean_acc,
            robust_acc: ev.robust_acc,
            shortcut_acc: ev.shortcut_acc,
        };
        log::info!(
            "stitch {}->{} {} epoch {epoch}: loss {:.4} acc {:.4}",
            task.i,
            task.j,
            kind.tag(),
            rec.loss,
            rec.clean_acc
        );
        sink.record(&rec);
        log.records.push(rec);
    }
    Ok(StitchRun { model: sm, init, log })
}

/// Objective value of a stitched model over `data`, batch statistics only.
pub fn objective_value(sm: &mut StitchedModel, data: &Dataset, norm: &Normalization, objective: &ObjectiveSpec, batch: usize) -> Result<f64> {
    let kind = objective.resolve(sm.j(), sm.end.num_taps())?;
    let mut total = 0.0;
    for idx in data.batches::<ChaCha8Rng>(batch, None) {
        let (pixels, labels) = data.batch(&idx);
        let e = stitched_objective(sm, &norm.normalize(&pixels), &labels, &kind, BnMode::Batch, 1.0, false)?;
        total += e.loss * labels.len() as f64;
    }
    if data.is_empty() {
        return Err(Error::config(format!("empty dataset {}", data.name)));
    }
    Ok(total / data.len() as f64)
}
