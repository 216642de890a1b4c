//! Adam training loop, run configuration and checkpoints.
//!
//! A step draws a mini-batch from a shuffled order, optionally mirrors each
//! sample, picks ground-truth or predicted crop boxes per sample, and
//! averages the per-sample gradients. Everything is single-threaded and
//! seeded, so two runs with the same configuration are bit-identical.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BlockReport, GradCheckReport, Tape};
use crate::body_model::{BodyModel, ModelParams};
use crate::error::{Error, Result};
use crate::losses::{total_loss_op, CoordMask, LossBreakdown, Targets};
use crate::metrics::{evaluate, MetricReport};
use crate::nn::{named_rng, ParamStore};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::synth::{Sample, SynthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// First epoch trained at `0.1 * lr`.
    pub decay_epoch: Option<usize>,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub flip_augment: bool,
    /// Steps between evaluations of the monitored training-set loss.
    pub eval_every: usize,
    /// Stop once the monitored loss falls below this fraction of its initial value.
    pub early_stop_ratio: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 20,
            decay_epoch: Some(15),
            max_steps: None,
            flip_augment: true,
            eval_every: 50,
            early_stop_ratio: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_every == 0 {
            return bad("batch_size, epochs and eval_every must be positive");
        }
        if let Some(r) = self.early_stop_ratio {
            if !(r > 0.0 && r < 1.0) {
                return bad("early_stop_ratio must lie in (0, 1)");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 64,
            test_size: 16,
            train_seed: 1,
            test_seed: 2,
        }
    }
}

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Weight initialization and training-order seed.
    pub seed: u64,
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            pipeline: PipelineConfig::toy(),
            synth: SynthConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.optim.validate()?;
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.data.train_seed == self.data.test_seed {
            return Err(Error::Config("train and test seeds must differ".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    m: ParamStore,
    v: ParamStore,
    t: i32,
}

impl Adam {
    pub fn new(weights: &ParamStore) -> Self {
        Self {
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, weights: &mut ParamStore, grads: &ParamStore, lr: f64, cfg: &OptimConfig) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for ((name, w), ((_, m), (_, v))) in weights.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = grads.get(name)?;
            for (((wi, mi), vi), gi) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: usize,
    pub config: RunConfig,
    pub weights: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", c.format_version)));
        }
        Ok(c)
    }

    pub fn pipeline(&self) -> Result<Pipeline> {
        Pipeline::with_weights(self.config.pipeline.clone(), self.weights.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the step's mini-batch.
    pub batch: LossBreakdown,
    /// Training-set loss with ground-truth crop boxes and no augmentation,
    /// when evaluated.
    pub monitor: Option<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub stopped_early: bool,
    pub curve: Vec<CurvePoint>,
}

/// Loss of one sample; `crop_gt` crops with the ground-truth boxes.
/// Gradients are added into `grads` scaled by `grad_scale` when given.
pub fn sample_loss(
    pipe: &Pipeline,
    sample: &Sample,
    crop_gt: bool,
    grads: Option<(&mut ParamStore, f64)>,
) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let bound = pipe.weights.bind(&tape, grads.is_some());
    let crop = crop_gt.then_some(&sample.gt.boxes);
    let out = pipe.forward(&tape, &bound, &sample.image, crop)?;
    let loss = total_loss_op(&tape, &pipe.cfg, &out, &Targets::from(&sample.gt), CoordMask::default())?;
    let breakdown = loss.breakdown(&tape);
    if let Some((acc, scale)) = grads {
        let scaled = tape.scale(loss.total, scale)?;
        let g = tape.backward(scaled)?;
        acc.accumulate(&bound, &g)?;
    }
    Ok(breakdown)
}

/// Mean loss without augmentation; `crop_gt` crops with ground-truth boxes.
pub fn dataset_loss(pipe: &Pipeline, samples: &[Sample], crop_gt: bool) -> Result<LossBreakdown> {
    let items: Vec<LossBreakdown> = samples.iter().map(|s| sample_loss(pipe, s, crop_gt, None)).collect::<Result<_>>()?;
    Ok(LossBreakdown::mean(&items))
}

/// Vertices and regressed joints of `params`, translation included.
pub fn mesh_of(model: &BodyModel, params: &ModelParams) -> Result<(crate::autodiff::Tensor, crate::autodiff::Tensor)> {
    let mesh = model.forward(params)?;
    let joints = model.regress_joints(&mesh.vertices)?;
    Ok((mesh.vertices, joints))
}

/// Mean metrics with predicted boxes.
pub fn dataset_metrics(pipe: &Pipeline, samples: &[Sample]) -> Result<MetricReport> {
    let mut reports = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = pipe.predict(&s.image, None)?;
        let (gv, gj) = mesh_of(&pipe.model, &s.gt.params)?;
        reports.push(evaluate(&pipe.model, &pred.vertices, &pred.joints, &gv, &gj)?);
    }
    Ok(MetricReport::mean(&reports))
}

/// Compares the gradient of one sample's total loss against central
/// differences at `probes` weight elements, one per randomly chosen tensor.
pub fn weight_gradcheck(pipe: &Pipeline, sample: &Sample, crop_gt: bool, probes: usize, seed: u64, h: f64, tol: f64) -> Result<GradCheckReport> {
    let mut analytic = pipe.weights.zeros_like();
    sample_loss(pipe, sample, crop_gt, Some((&mut analytic, 1.0)))?;
    let names: Vec<&String> = pipe.weights.iter().map(|(k, _)| k).collect();
    let mut rng = named_rng(seed, "gradcheck");
    let mut work = pipe.clone();
    let mut blocks = Vec::with_capacity(probes);
    for block in 0..probes {
        // skip parameters the loss does not reach from this sample
        let mut attempts = 0;
        let (name, e, a) = loop {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Degenerate("loss gradient vanishes on every probed weight".into()));
            }
            let name = names[rng.random_range(0..names.len())].clone();
            let g = analytic.get(&name)?;
            let e = rng.random_range(0..g.numel());
            if g.data()[e] != 0.0 {
                break (name, e, g.data()[e]);
            }
        };
        let orig = pipe.weights.get(&name)?.data()[e];
        let mut eval = |x: f64| -> Result<f64> {
            work.weights.get_mut(&name)?.data_mut()[e] = x;
            Ok(sample_loss(&work, sample, crop_gt, None)?.total)
        };
        let numeric = (eval(orig + h)? - eval(orig - h)?) / (2.0 * h);
        eval(orig)?;
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        blocks.push(BlockReport {
            block,
            max_rel_error: if err.is_finite() { err } else { f64::INFINITY },
            worst_element: e,
            analytic: a,
            numeric,
            probed: 1,
        });
    }
    Ok(GradCheckReport { blocks, tol })
}

/// Trains from `weights` on `samples`. `progress` receives every curve point.
pub fn train(
    cfg: &RunConfig,
    weights: ParamStore,
    samples: &[Sample],
    mut progress: impl FnMut(&CurvePoint),
) -> Result<(Pipeline, TrainReport)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let oc = &cfg.optim;
    let mut pipe = Pipeline::with_weights(cfg.pipeline.clone(), weights)?;
    let mut adam = Adam::new(&pipe.weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00_0000);
    let mirrored: Vec<Sample> = if oc.flip_augment {
        samples.iter().map(|s| s.mirrored(&pipe.model)).collect()
    } else {
        Vec::new()
    };
    let per_epoch = samples.len().div_ceil(oc.batch_size);
    let total_steps = (per_epoch * oc.epochs).min(oc.max_steps.unwrap_or(usize::MAX));

    let initial = dataset_loss(&pipe, samples, true)?;
    let mut curve = Vec::new();
    let mut last_monitor = initial;
    let mut stopped_early = false;
    let mut step = 0;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    'outer: for epoch in 0..oc.epochs {
        let lr = match oc.decay_epoch {
            Some(d) if epoch >= d => oc.lr * 0.1,
            _ => oc.lr,
        };
        order.shuffle(&mut rng);
        for batch in order.chunks(oc.batch_size) {
            if step >= total_steps {
                break 'outer;
            }
            let mut grads = pipe.weights.zeros_like();
            let mut items = Vec::with_capacity(batch.len());
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let flip = oc.flip_augment && rng.random::<bool>();
                let crop_gt = rng.random::<f64>() < cfg.pipeline.teacher_forcing;
                let s = if flip { &mirrored[i] } else { &samples[i] };
                items.push(sample_loss(&pipe, s, crop_gt, Some((&mut grads, scale)))?);
            }
            adam.step(&mut pipe.weights, &grads, lr, oc)?;
            step += 1;
            let batch_loss = LossBreakdown::mean(&items);
            if !batch_loss.total.is_finite() {
                return Err(Error::Degenerate(format!("non-finite loss at step {step}")));
            }
            let monitor = if step % oc.eval_every == 0 || step == total_steps {
                let m = dataset_loss(&pipe, samples, true)?;
                last_monitor = m;
                Some(m)
            } else {
                None
            };
            let point = CurvePoint {
                step,
                epoch,
                lr,
                batch: batch_loss,
                monitor,
            };
            progress(&point);
            curve.push(point);
            if let (Some(m), Some(r)) = (monitor, oc.early_stop_ratio) {
                if m.total < r * initial.total {
                    stopped_early = true;
                    break 'outer;
                }
            }
        }
    }
    if curve.last().is_some_and(|p| p.monitor.is_none()) {
        last_monitor = dataset_loss(&pipe, samples, true)?;
    }
    let report = TrainReport {
        steps: step,
        initial_loss: initial.total,
        final_loss: last_monitor.total,
        stopped_early,
        curve,
    };
    Ok((pipe, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::init_weights;
    use crate::synth::make_split;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::toy();
        cfg.optim.batch_size = 2;
        cfg.optim.epochs = 1;
        cfg.optim.eval_every = 2;
        cfg
    }

    #[test]
    fn adam_matches_closed_form_first_step() {
        let mut w = ParamStore::new();
        w.insert("a", crate::autodiff::Tensor::vector(vec![1.0, -2.0]));
        let mut g = w.zeros_like();
        g.insert("a", crate::autodiff::Tensor::vector(vec![0.5, -3.0]));
        let cfg = OptimConfig::default();
        let mut adam = Adam::new(&w);
        adam.step(&mut w, &g, 0.1, &cfg).unwrap();
        // the first bias-corrected step is lr * g / (|g| + eps)
        let a = w.get("a").unwrap().data();
        assert!((a[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-12);
        assert!((a[1] - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn batch_loss_is_mean_of_sample_losses() {
        let cfg = tiny();
        let pipe = Pipeline::new(cfg.pipeline.clone(), 0).unwrap();
        let samples = make_split(&pipe.model, &cfg.pipeline, &cfg.synth, 3, 5, 1).unwrap();
        let each: Vec<f64> = samples.iter().map(|s| sample_loss(&pipe, s, false, None).unwrap().total).collect();
        let all = dataset_loss(&pipe, &samples, false).unwrap();
        assert!((all.total - each.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        let rev: Vec<Sample> = samples.iter().rev().cloned().collect();
        assert!((dataset_loss(&pipe, &rev, false).unwrap().total - all.total).abs() < 1e-12);
        assert!((all.total - (all.l_param + all.l_coord + all.l_box)).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_moves_weights() {
        let cfg = tiny();
        let w0 = init_weights(&cfg.pipeline, cfg.seed).unwrap();
        let model = crate::body_model::build_toy_model(&cfg.pipeline.model);
        let samples = make_split(&model, &cfg.pipeline, &cfg.synth, 4, 9, 1).unwrap();
        let (a, ra) = train(&cfg, w0.clone(), &samples, |_| {}).unwrap();
        let (b, rb) = train(&cfg, w0.clone(), &samples, |_| {}).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(serde_json::to_string(&a.weights).unwrap(), serde_json::to_string(&b.weights).unwrap());
        assert_eq!(ra.steps, 2);
        assert_ne!(a.weights, w0);
        assert!(ra.curve.iter().all(|p| p.batch.total.is_finite()));
    }

    #[test]
    fn checkpoint_roundtrip_and_version_check() {
        let cfg = tiny();
        let ck = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            step: 3,
            weights: init_weights(&cfg.pipeline, 1).unwrap(),
            config: cfg,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.json");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
        let mut old = ck.clone();
        old.format_version = 99;
        old.save(&p).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Format(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::toy();
        c.validate().unwrap();
        c.optim.batch_size = 0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = RunConfig::toy();
        c.data.test_seed = c.data.train_seed;
        assert!(c.validate().is_err());
        let json = RunConfig::toy().to_json();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), RunConfig::toy());
    }
}
