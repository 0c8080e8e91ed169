//! Similarity artifacts built from many stitching runs: stitching plots,
//! cross-layer grids, Self-Accuracy, class-subset curves, linear CKA and the
//! penultimate-layer probe.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversarial::{accuracy, pgd_attack, AttackSpec};
use crate::data::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::layers::BnMode;
use crate::nets::{TappedNetwork, Until};
use crate::objectives::{FulaMode, ObjectiveSpec};
use crate::stitch::{StitchLayer, StitchedModel};
use crate::tensor::Tensor;
use crate::trainer::{stitch_init, train_stitch, EpochRecord, MetricsLog, MetricsSink, NullSink, StitchTask, StitchTrainRecipe};

/// Derives an independent per-job seed from a root seed and a job index.
pub fn derive_seed(root: u64, index: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = root ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One stitching run within a larger analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchJob {
    pub i: usize,
    pub j: usize,
    pub recipe: StitchTrainRecipe,
    pub seed: u64,
}

/// Shared, read-only inputs for a batch of jobs.
#[derive(Debug, Clone, Copy)]
pub struct StitchContext<'a> {
    pub front: &'a TappedNetwork,
    pub end: &'a TappedNetwork,
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub norm: &'a Normalization,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StitchOutcome {
    pub job: StitchJob,
    pub last: EpochRecord,
    pub log: MetricsLog,
    pub init_rank: usize,
    pub layer: StitchLayer,
}

pub fn run_job(ctx: &StitchContext, job: &StitchJob) -> Result<StitchOutcome> {
    run_job_with_sink(ctx, job, &mut NullSink)
}

/// Like [`run_job`], streaming each epoch record to `sink`.
pub fn run_job_with_sink(ctx: &StitchContext, job: &StitchJob, sink: &mut dyn MetricsSink) -> Result<StitchOutcome> {
    let task = StitchTask {
        front: ctx.front,
        end: ctx.end,
        i: job.i,
        j: job.j,
        train: ctx.train,
        test: ctx.test,
        norm: ctx.norm,
        recipe: &job.recipe,
        seed: job.seed,
    };
    let run = train_stitch(&task, sink)?;
    let last = run
        .log
        .last()
        .cloned()
        .ok_or_else(|| Error::config("stitch run produced no metrics"))?;
    Ok(StitchOutcome {
        job: job.clone(),
        last,
        log: run.log,
        init_rank: run.init.rank,
        layer: run.model.layer,
    })
}

/// Runs independent jobs; outcomes come back in job order.
pub trait Executor {
    fn run(&self, ctx: &StitchContext, jobs: &[StitchJob]) -> Vec<Result<StitchOutcome>>;
}

/// Runs jobs one after another on the calling thread.
pub struct Sequential;

impl Executor for Sequential {
    fn run(&self, ctx: &StitchContext, jobs: &[StitchJob]) -> Vec<Result<StitchOutcome>> {
        jobs.iter().map(|j| run_job(ctx, j)).collect()
    }
}

fn collect(results: Vec<Result<StitchOutcome>>) -> Result<Vec<StitchOutcome>> {
    results.into_iter().collect()
}

/// Baseline metrics of one network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub clean_acc: f64,
    pub robust_acc: Option<f64>,
}

pub fn measure_baseline(
    net: &TappedNetwork,
    test: &Dataset,
    norm: &Normalization,
    robust: Option<(&AttackSpec, usize)>,
    batch: usize,
    seed: u64,
) -> Result<Baseline> {
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean_acc = accuracy(&mut net, test, norm, None, batch, &mut rng)?;
    let robust_acc = match robust {
        Some((spec, n)) if n > 0 => Some(accuracy(&mut net, &test.take(n), norm, Some(spec), batch, &mut rng)?),
        _ => None,
    };
    Ok(Baseline { clean_acc, robust_acc })
}

/// Metric series over stitching depth for one objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotCurve {
    pub objective: String,
    pub clean_acc: Vec<f64>,
    pub robust_acc: Option<Vec<f64>>,
    pub shortcut_acc: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchingPlot {
    pub depths: Vec<usize>,
    pub curves: Vec<PlotCurve>,
    pub front_baseline: Baseline,
    pub end_baseline: Baseline,
}

impl StitchingPlot {
    pub fn curve(&self, objective: &str) -> Option<&PlotCurve> {
        self.curves.iter().find(|c| c.objective == objective)
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.curves {
            let lens = [Some(c.clean_acc.len()), c.robust_acc.as_ref().map(Vec::len), c.shortcut_acc.as_ref().map(Vec::len)];
            if lens.iter().flatten().any(|&l| l != self.depths.len()) {
                return Err(Error::shape(self.depths.len(), lens));
            }
        }
        Ok(())
    }
}

fn series(outcomes: &[StitchOutcome], f: impl Fn(&EpochRecord) -> Option<f64>) -> Option<Vec<f64>> {
    outcomes.iter().map(|o| f(&o.last)).collect()
}

/// Same-depth stitching (`i = j`) at every depth for every objective.
/// `recipe.objective` is replaced by each entry of `objectives`.
pub fn build_stitching_plot(
    ctx: &StitchContext,
    depths: &[usize],
    objectives: &[ObjectiveSpec],
    recipe: &StitchTrainRecipe,
    baselines: (Baseline, Baseline),
    root_seed: u64,
    exec: &dyn Executor,
) -> Result<(StitchingPlot, Vec<StitchOutcome>)> {
    let mut jobs = Vec::new();
    for obj in objectives {
        for &d in depths {
            let mut r = recipe.clone();
            r.objective = *obj;
            let seed = derive_seed(root_seed, jobs.len() as u64);
            jobs.push(StitchJob { i: d, j: d, recipe: r, seed });
        }
    }
    let outcomes = collect(exec.run(ctx, &jobs))?;
    let curves = objectives
        .iter()
        .zip(outcomes.chunks(depths.len().max(1)))
        .map(|(obj, chunk)| PlotCurve {
            objective: String::from(obj.tag()),
            clean_acc: chunk.iter().map(|o| o.last.clean_acc).collect(),
            robust_acc: series(chunk, |r| r.robust_acc),
            shortcut_acc: series(chunk, |r| r.shortcut_acc),
        })
        .collect();
    let plot = StitchingPlot {
        depths: depths.to_vec(),
        curves,
        front_baseline: baselines.0,
        end_baseline: baselines.1,
    };
    plot.validate()?;
    Ok((plot, outcomes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionMode {
    Directional,
    Averaged,
}

/// Stitched accuracy for every (front tap `rows[a]`, end tap `cols[b]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLayerGrid {
    pub objective: String,
    pub mode: DirectionMode,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl CrossLayerGrid {
    pub fn new(objective: impl Into<String>, rows: Vec<usize>, cols: Vec<usize>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != rows.len() || values.iter().any(|r| r.len() != cols.len()) {
            return Err(Error::shape((rows.len(), cols.len()), values.len()));
        }
        if values.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("grid entries must lie in [0, 1]"));
        }
        Ok(CrossLayerGrid {
            objective: objective.into(),
            mode: DirectionMode::Directional,
            rows,
            cols,
            values,
        })
    }

    /// `value[a][b] = (value[a][b] + value[b][a]) / 2`; needs a square grid.
    pub fn averaged(&self) -> Result<Self> {
        if self.rows != self.cols {
            return Err(Error::config("averaging needs the same taps on both axes"));
        }
        let n = self.rows.len();
        let values = (0..n)
            .map(|a| (0..n).map(|b| (self.values[a][b] + self.values[b][a]) / 2.0).collect())
            .collect();
        Ok(CrossLayerGrid {
            mode: DirectionMode::Averaged,
            values,
            ..self.clone()
        })
    }

    pub fn cells(&self) -> usize {
        self.rows.len() * self.cols.len()
    }
}

pub fn build_cross_layer_grid(
    ctx: &StitchContext,
    taps: &[usize],
    recipe: &StitchTrainRecipe,
    root_seed: u64,
    exec: &dyn Executor,
) -> Result<(CrossLayerGrid, Vec<StitchOutcome>)> {
    let mut jobs = Vec::with_capacity(taps.len() * taps.len());
    for &i in taps {
        for &j in taps {
            let seed = derive_seed(root_seed, jobs.len() as u64);
            jobs.push(StitchJob {
                i,
                j,
                recipe: recipe.clone(),
                seed,
            });
        }
    }
    let outcomes = collect(exec.run(ctx, &jobs))?;
    let values = outcomes
        .chunks(taps.len())
        .map(|row| row.iter().map(|o| o.last.clean_acc).collect())
        .collect();
    let grid = CrossLayerGrid::new(recipe.objective.tag(), taps.to_vec(), taps.to_vec(), values)?;
    Ok((grid, outcomes))
}

/// Fraction of rows whose largest entry sits on the diagonal; the lowest
/// column index wins ties.
pub fn self_accuracy(grid: &CrossLayerGrid) -> Result<f64> {
    if grid.rows != grid.cols || grid.rows.is_empty() {
        return Err(Error::config("Self-Accuracy needs a square grid over the same taps"));
    }
    let hits = grid
        .values
        .iter()
        .enumerate()
        .filter(|(a, row)| {
            let best = (0..row.len()).fold(0, |best, b| if row[b] > row[best] { b } else { best });
            best == *a
        })
        .count();
    Ok(hits as f64 / grid.rows.len() as f64)
}

/// Linear CKA between two activation batches flattened per sample.
///
/// Computed through centered Gram matrices, which is exact and cheap when
/// the sample count is below the feature count. Returns 0 when either side
/// has no variance.
pub fn linear_cka(a: &Tensor, b: &Tensor) -> Result<f64> {
    let n = a.batch();
    if b.batch() != n {
        return Err(Error::shape(n, b.batch()));
    }
    if n < 2 {
        return Err(Error::config("CKA needs at least two samples"));
    }
    let ka = centered_gram(a);
    let kb = centered_gram(b);
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let (aa, bb) = (dot(&ka, &ka), dot(&kb, &kb));
    if aa <= 0.0 || bb <= 0.0 {
        log::warn!("linear CKA on a zero-variance input; returning 0");
        return Ok(0.0);
    }
    Ok((dot(&ka, &kb) / (libm::sqrt(aa) * libm::sqrt(bb))).clamp(0.0, 1.0))
}

/// `X_c X_c^T` with column-centered `X`, row-major `n x n`.
fn centered_gram(t: &Tensor) -> Vec<f64> {
    let n = t.batch();
    let d = t.sample_len();
    let mut mean = vec![0.0f64; d];
    for s in 0..n {
        for (m, &v) in mean.iter_mut().zip(t.sample(s)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|s| t.sample(s).iter().zip(&mean).map(|(&v, m)| v as f64 - m).collect())
        .collect();
    let mut k = vec![0.0f64; n * n];
    for p in 0..n {
        for q in p..n {
            let v: f64 = centered[p].iter().zip(&centered[q]).map(|(x, y)| x * y).sum();
            k[p * n + q] = v;
            k[q * n + p] = v;
        }
    }
    k
}

/// Full-distribution accuracy after stitching on the first `count` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetCurve {
    pub objective: String,
    pub class_counts: Vec<usize>,
    pub clean_acc: Vec<f64>,
}

pub fn subset_class_curve(
    ctx: &StitchContext,
    i: usize,
    j: usize,
    objectives: &[ObjectiveSpec],
    class_counts: &[usize],
    recipe: &StitchTrainRecipe,
    root_seed: u64,
    exec: &dyn Executor,
) -> Result<(Vec<SubsetCurve>, Vec<StitchOutcome>)> {
    if class_counts.windows(2).any(|w| w[0] >= w[1]) || class_counts.first() == Some(&0) {
        return Err(Error::config("class counts must be positive and increasing"));
    }
    if let Some(&c) = class_counts.last() {
        if c > ctx.train.num_classes {
            return Err(Error::config(format!("{c} classes requested, dataset has {}", ctx.train.num_classes)));
        }
    }
    let mut jobs = Vec::new();
    for obj in objectives {
        for &count in class_counts {
            let mut r = recipe.clone();
            r.objective = *obj;
            r.class_subset = Some((0..count).collect());
            let seed = derive_seed(root_seed, jobs.len() as u64);
            jobs.push(StitchJob { i, j, recipe: r, seed });
        }
    }
    let outcomes = collect(exec.run(ctx, &jobs))?;
    let curves = objectives
        .iter()
        .zip(outcomes.chunks(class_counts.len().max(1)))
        .map(|(obj, chunk)| SubsetCurve {
            objective: String::from(obj.tag()),
            class_counts: class_counts.to_vec(),
            clean_acc: chunk.iter().map(|o| o.last.clean_acc).collect(),
        })
        .collect();
    Ok((curves, outcomes))
}

/// Last-only FuLA accuracy per tap and the CKA between the penultimate
/// activations of a closed-form-initialized stitched model and of the end
/// model, on inputs attacked through the stitched model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub taps: Vec<usize>,
    pub fula_clean_acc: Vec<f64>,
    pub fula_robust_acc: Option<Vec<f64>>,
    pub cka: Vec<f64>,
}

pub fn penultimate_similarity_probe(
    ctx: &StitchContext,
    taps: &[usize],
    recipe: &StitchTrainRecipe,
    probe_samples: usize,
    attack: &AttackSpec,
    root_seed: u64,
    exec: &dyn Executor,
) -> Result<(ProbeCurve, Vec<StitchOutcome>)> {
    let mut r = recipe.clone();
    r.objective = ObjectiveSpec::Fula(FulaMode::LastOnly);
    let jobs: Vec<StitchJob> = taps
        .iter()
        .enumerate()
        .map(|(n, &t)| StitchJob {
            i: t,
            j: t,
            recipe: r.clone(),
            seed: derive_seed(root_seed, n as u64),
        })
        .collect();
    let outcomes = collect(exec.run(ctx, &jobs))?;
    let probe = ctx.test.take(probe_samples);
    let mut cka = Vec::with_capacity(taps.len());
    for (n, &t) in taps.iter().enumerate() {
        let seed = derive_seed(root_seed ^ 0xc4a, n as u64);
        cka.push(penultimate_cka(ctx, t, &probe, recipe.n_init, attack, seed)?);
    }
    let curve = ProbeCurve {
        taps: taps.to_vec(),
        fula_clean_acc: outcomes.iter().map(|o| o.last.clean_acc).collect(),
        fula_robust_acc: series(&outcomes, |rec| rec.robust_acc),
        cka,
    };
    Ok((curve, outcomes))
}

/// CKA at the penultimate tap between `g(T(f(x_adv)))` and `g(x_adv)`.
pub fn penultimate_cka(
    ctx: &StitchContext,
    tap: usize,
    probe: &Dataset,
    n_init: usize,
    attack: &AttackSpec,
    seed: u64,
) -> Result<f64> {
    let mut front = ctx.front.clone();
    let mut end = ctx.end.clone();
    let init = stitch_init(&mut front, &mut end, tap, tap, ctx.train, ctx.norm, n_init, None, seed)?;
    let mut sm = StitchedModel::new(front, end, init.layer)?;
    sm.set_rs_update(false);
    let k = sm.end.num_taps();
    let (pixels, labels) = probe.batch(&(0..probe.len()).collect::<Vec<_>>());
    let x = ctx.norm.normalize(&pixels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_adv = pgd_attack(&mut sm, &x, &labels, attack, ctx.norm, BnMode::Running, &mut rng)?;
    let st = sm.trace(&x_adv, BnMode::Running, false, false, Until::Tap(k))?;
    let stitched = st.end_tap(k).clone();
    let native = sm.end.forward_to(k, &x_adv, BnMode::Running)?;
    linear_cka(&stitched, &native)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_accuracy_of_identity_and_constant_grids() {
        let taps: Vec<usize> = (1..=9).collect();
        let eye = (0..9).map(|a| (0..9).map(|b| if a == b { 1.0 } else { 0.0 }).collect()).collect();
        let g = CrossLayerGrid::new("Hint", taps.clone(), taps.clone(), eye).unwrap();
        assert_eq!(self_accuracy(&g).unwrap(), 1.0);
        let g = CrossLayerGrid::new("Hint", taps.clone(), taps, vec![vec![0.5; 9]; 9]).unwrap();
        assert!((self_accuracy(&g).unwrap() - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn averaged_grid_is_symmetric() {
        let taps = vec![1, 2, 3];
        let v = vec![vec![0.1, 0.7, 0.3], vec![0.2, 0.9, 0.4], vec![0.33, 0.01, 0.5]];
        let avg = CrossLayerGrid::new("FuLA", taps.clone(), taps, v).unwrap().averaged().unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(avg.values[a][b], avg.values[b][a]);
            }
        }
        assert_eq!(avg.mode, DirectionMode::Averaged);
    }

    #[test]
    fn cka_of_a_batch_with_itself_is_one() {
        let a = Tensor::from_rows(4, 3, vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0, 2.0, 2.0, 2.0, 0.0, -4.0, 1.0]).unwrap();
        assert!((linear_cka(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(linear_cka(&a, &Tensor::full([4, 2, 1, 1], 3.0)).unwrap(), 0.0);
    }

    #[test]
    fn seeds_differ_per_index() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
