//! The training loop.
//!
//! Each target of a clip gets its own graph, so targets run in parallel and
//! the memory token of a target threads through the clip inside one graph.
//! The loss couples targets only through soft aggregation; it is built on a
//! small separate graph whose leaves are the per-target probabilities, and
//! its gradients seed the backward pass of every target graph.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PropagationMode;
use crate::embed::reference_pair;
use crate::error::{Error, Result};
use crate::inference::{binary_mask, segment_video, InferenceConfig};
use crate::metrics::{evaluate, EvalReport};
use crate::model::{frame_forward, ForwardOptions, Model};
use crate::objective::{
    argmax_labels, clip_loss_var, frame_loss_var, soft_aggregate, soft_aggregate_var, BackgroundRule,
};
use crate::params::ModelParams;
use crate::tensor::{Graph, Tensor, Var};

use super::optim::{bootstrap_at, clip_grad_norm, lr_at, optimizer_step, AdamState, StepConfig};
use super::sampler::{sample_clip, ClipPlan, SamplerConfig};
use super::synth::{video_seed, SyntheticVideo};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub clip_len: usize,
    pub max_objects: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub backbone_lr_factor: f64,
    /// Chance per frame that the memory row reads the references.
    pub ref_update_prob: f64,
    pub max_past_refs: usize,
    pub iterations: usize,
    pub seed: u64,
    pub mode: PropagationMode,
    /// Largest frame gap reached by the curriculum.
    pub max_gap: usize,
    /// Fraction of the run after which the rate drops tenfold.
    pub lr_drop_frac: f64,
    pub bootstrap_start: f64,
    pub bootstrap_end: f64,
    pub bootstrap_warm_frac: f64,
    pub clip_norm: f64,
    pub log_every: usize,
    /// Validation period in iterations; 0 validates only at the end.
    pub val_every: usize,
    pub background_rule: BackgroundRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clip_len: 4,
            max_objects: 3,
            lr: 5e-5,
            weight_decay: 0.05,
            backbone_lr_factor: 0.1,
            ref_update_prob: 0.6,
            max_past_refs: 2,
            iterations: 4000,
            seed: 0,
            mode: PropagationMode::D,
            max_gap: 8,
            lr_drop_frac: 0.625,
            bootstrap_start: 1.0,
            bootstrap_end: 0.15,
            bootstrap_warm_frac: 0.2,
            clip_norm: 1.0,
            log_every: 100,
            val_every: 1000,
            background_rule: BackgroundRule::OneMinusProduct,
        }
    }
}

impl TrainConfig {
    /// Rates suited to training the toy model from scratch.
    pub fn toy() -> Self {
        TrainConfig {
            lr: 1e-3,
            backbone_lr_factor: 1.0,
            background_rule: BackgroundRule::Complement,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        if self.clip_len < 2 {
            return Err(Error::Config(format!("clip_len must be >= 2, got {}", self.clip_len)));
        }
        if self.max_objects == 0 || self.max_gap == 0 {
            return Err(Error::Config("max_objects and max_gap must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config("need lr > 0 and weight_decay >= 0".into()));
        }
        if !(self.clip_norm > 0.0) || self.backbone_lr_factor < 0.0 {
            return Err(Error::Config("need clip_norm > 0 and backbone_lr_factor >= 0".into()));
        }
        unit("ref_update_prob", self.ref_update_prob)?;
        unit("lr_drop_frac", self.lr_drop_frac)?;
        unit("bootstrap_warm_frac", self.bootstrap_warm_frac)?;
        if !(self.bootstrap_start > 0.0 && self.bootstrap_start <= 1.0)
            || !(self.bootstrap_end > 0.0 && self.bootstrap_end <= 1.0)
        {
            return Err(Error::Config("bootstrap fractions must be in (0, 1]".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be >= 1".into()));
        }
        Ok(())
    }

    fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            clip_len: self.clip_len,
            max_objects: self.max_objects,
            max_past_refs: self.max_past_refs,
            max_gap: self.max_gap,
            ref_update_prob: self.ref_update_prob,
        }
    }
}

/// Loss terms of one clip, summed over the scored frames.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ClipLoss {
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
}

struct TargetRun {
    graph: Graph,
    params: ModelParams<Var>,
    memory: Option<Var>,
    /// Probability node per clip position (none at position 0).
    probs: Vec<Option<Var>>,
}

/// Runs a clip forward and backward. Returns the loss terms and the summed
/// parameter gradients.
pub fn clip_gradients(
    model: &Model,
    video: &SyntheticVideo,
    plan: &ClipPlan,
    cfg: &TrainConfig,
    bootstrap: f64,
) -> Result<(ClipLoss, ModelParams)> {
    let (h, w) = video.size();
    let k = plan.targets.len();
    let t_len = plan.frames.len();
    let frames: Vec<&Tensor> = plan.frames.iter().map(|&f| &video.frames[f]).collect();
    // class map of each clip frame: 0 background, i + 1 for the i-th target
    let gt: Vec<Vec<u8>> = plan
        .frames
        .iter()
        .map(|&f| {
            video.labels[f]
                .iter()
                .map(|l| plan.targets.iter().position(|id| id == l).map_or(0, |i| i as u8 + 1))
                .collect()
        })
        .collect();
    // reference masks per clip position and target; position 0 holds the
    // annotation, later positions the model's own detached predictions
    let mut masks: Vec<Vec<Tensor>> = vec![(1..=k as u8).map(|c| binary_mask(&gt[0], c, (h, w))).collect()];

    let mut runs: Vec<TargetRun> = (0..k)
        .map(|_| {
            let mut graph = Graph::new();
            let params = model.params.bind(&mut graph, true);
            let memory = model.cfg.memory.then_some(params.mem_init);
            TargetRun {
                graph,
                params,
                memory,
                probs: vec![None; t_len],
            }
        })
        .collect();

    for t in 1..t_len {
        let opts = ForwardOptions {
            mode: cfg.mode,
            topk: None,
            memory_sees_refs: plan.memory_reads_refs[t],
            trace: false,
        };
        let masks_ref = &masks;
        runs.par_iter_mut()
            .enumerate()
            .map(|(i, run)| {
                let pairs = plan.refs[t]
                    .iter()
                    .map(|&r| reference_pair(frames[r], &masks_ref[r][i]))
                    .collect::<Result<Vec<_>>>()?;
                let out = frame_forward(
                    &mut run.graph,
                    &model.cfg,
                    &run.params,
                    frames[t],
                    &pairs,
                    run.memory,
                    &opts,
                )?;
                run.memory = out.memory;
                run.probs[t] = Some(out.probs);
                Ok(())
            })
            .collect::<Result<Vec<()>>>()?;
        let mut stacked = Vec::with_capacity(k * h * w);
        for run in &runs {
            let v = run.probs[t].expect("set above");
            stacked.extend_from_slice(run.graph.value(v).data());
        }
        let dist = soft_aggregate(&Tensor::from_parts(vec![k, h, w], stacked), cfg.background_rule)?;
        let labels = argmax_labels(&dist);
        masks.push((1..=k as u8).map(|c| binary_mask(&labels, c, (h, w))).collect());
    }

    let mut lg = Graph::new();
    let mut leaves = vec![Vec::new(); t_len];
    let mut losses = vec![lg.constant(Tensor::scalar(0.0))];
    let (mut ce_sum, mut dice_sum) = (0.0, 0.0);
    for t in 1..t_len {
        for run in &runs {
            let v = run.probs[t].expect("forward filled every position");
            leaves[t].push(lg.leaf(run.graph.value(v).clone(), true));
        }
        let stacked = lg.concat_rows(&leaves[t])?;
        let dist = soft_aggregate_var(&mut lg, stacked, cfg.background_rule)?;
        let (total, ce, dice) = frame_loss_var(&mut lg, dist, &gt[t], bootstrap)?;
        ce_sum += lg.value(ce).data()[0];
        dice_sum += lg.value(dice).data()[0];
        losses.push(total);
    }
    let total = clip_loss_var(&mut lg, &losses)?;
    let loss = ClipLoss {
        loss: lg.value(total).data()[0],
        ce: ce_sum,
        dice: dice_sum,
    };
    if !loss.loss.is_finite() {
        return Err(Error::NonFinite { op: "clip loss" });
    }
    let lgrads = lg.backward(total)?;

    let seeds: Vec<Vec<Tensor>> = (0..k)
        .map(|i| {
            (1..t_len)
                .map(|t| lgrads.get_or_zeros(leaves[t][i], lg.shape(leaves[t][i])))
                .collect()
        })
        .collect();
    let per_target: Vec<ModelParams> = runs
        .into_par_iter()
        .zip(seeds)
        .map(|(run, seeds)| {
            let seed_refs: Vec<(Var, &Tensor)> = seeds
                .iter()
                .enumerate()
                .map(|(j, g)| (run.probs[j + 1].expect("filled"), g))
                .collect();
            let grads = run.graph.backward_from(&seed_refs)?;
            Ok(run
                .params
                .map(&mut |_, &v| grads.get_or_zeros(v, run.graph.shape(v))))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = model.params.zeros_like();
    for g in &per_target {
        let flat = g.named_tensors();
        let mut idx = 0;
        sum.visit_mut(&mut |_, acc| {
            acc.data_mut().iter_mut().zip(flat[idx].1.data()).for_each(|(a, b)| *a += b);
            idx += 1;
        });
    }
    Ok((loss, sum))
}

/// One row of the loss log, averaged over the preceding window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    /// Iterations completed.
    pub iteration: usize,
    pub loss: f64,
    pub ce: f64,
    pub dice: f64,
    pub lr: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iteration,loss,ce,dice,lr\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{:.6},{:e}\n", r.iteration, r.loss, r.ce, r.dice, r.lr));
    }
    s
}

/// Scores a model on synthetic videos, first frame excluded.
pub fn validate_model(
    model: &Model,
    videos: &[SyntheticVideo],
    cfg: &InferenceConfig,
) -> Result<EvalReport> {
    let reports = videos
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let pred = segment_video(model, &v.frames, &v.labels[0], cfg)?;
            evaluate(&format!("video_{i:03}"), &pred, &v.labels, v.size(), true)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(reports))
}

/// Everything that evolves during training; enough to resume bitwise.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamState,
    /// Iterations completed.
    pub iteration: usize,
}

/// Per-iteration record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: usize,
    pub loss: ClipLoss,
    pub grad_norm: f64,
    pub lr: f64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamState::new(&model.params);
        Ok(Trainer {
            cfg,
            model,
            opt,
            iteration: 0,
        })
    }

    /// Seed of the rng that samples the clip of `iteration`.
    pub fn clip_seed(&self, iteration: usize) -> u64 {
        video_seed(self.cfg.seed ^ 0xC11F_5EED, iteration)
    }

    pub fn plan(&self, data: &[SyntheticVideo], iteration: usize) -> Result<ClipPlan> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.clip_seed(iteration));
        sample_clip(data, iteration, self.cfg.iterations, &self.cfg.sampler(), &mut rng)
    }

    pub fn step(&mut self, data: &[SyntheticVideo]) -> Result<StepStats> {
        let it = self.iteration;
        let cfg = &self.cfg;
        let plan = self.plan(data, it)?;
        let boot = bootstrap_at(
            it,
            cfg.iterations,
            cfg.bootstrap_start,
            cfg.bootstrap_end,
            cfg.bootstrap_warm_frac,
        );
        let diverged = |reason: String| Error::Diverged {
            iteration: it,
            clip_seed: self.clip_seed(it),
            reason,
        };
        let (loss, mut grads) = match clip_gradients(&self.model, &data[plan.video], &plan, cfg, boot) {
            Ok(r) => r,
            Err(e @ Error::NonFinite { .. }) => {
                return Err(diverged(format!("{e}; video {} frames {:?}", plan.video, plan.frames)))
            }
            Err(e) => return Err(e),
        };
        let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
        if !grad_norm.is_finite() {
            return Err(diverged(format!("gradient norm {grad_norm}")));
        }
        let lr = lr_at(it, cfg.iterations, cfg.lr, cfg.lr_drop_frac);
        let step = StepConfig {
            lr,
            weight_decay: cfg.weight_decay,
            backbone_lr_factor: cfg.backbone_lr_factor,
        };
        optimizer_step(&mut self.model.params, &grads, &mut self.opt, &step)?;
        self.iteration += 1;
        Ok(StepStats {
            iteration: it,
            loss,
            grad_norm,
            lr,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub losses: Vec<ClipLoss>,
    /// `(iterations completed, mean J&F)` at each validation.
    pub validation: Vec<(usize, f64)>,
}

/// Runs the remaining iterations. `on_event` sees every log row and every
/// validation result as they happen.
pub fn train_loop(
    trainer: &mut Trainer,
    train: &[SyntheticVideo],
    val: &[SyntheticVideo],
    mut on_event: impl FnMut(&TrainEvent),
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    let mut window = ClipLoss::default();
    let mut in_window = 0usize;
    let val_cfg = InferenceConfig {
        mode: trainer.cfg.mode,
        background_rule: trainer.cfg.background_rule,
        ..InferenceConfig::default()
    };
    while trainer.iteration < trainer.cfg.iterations {
        let s = trainer.step(train)?;
        report.losses.push(s.loss);
        window.loss += s.loss.loss;
        window.ce += s.loss.ce;
        window.dice += s.loss.dice;
        in_window += 1;
        let done = trainer.iteration;
        if done % trainer.cfg.log_every == 0 || done == trainer.cfg.iterations {
            let n = in_window as f64;
            let row = LogRow {
                iteration: done,
                loss: window.loss / n,
                ce: window.ce / n,
                dice: window.dice / n,
                lr: s.lr,
            };
            on_event(&TrainEvent::Log(row));
            report.log.push(row);
            window = ClipLoss::default();
            in_window = 0;
        }
        let periodic = trainer.cfg.val_every > 0 && done % trainer.cfg.val_every == 0;
        if !val.is_empty() && (periodic || done == trainer.cfg.iterations) {
            let jf = validate_model(&trainer.model, val, &val_cfg)?.mean_jf;
            on_event(&TrainEvent::Validation { iteration: done, jf });
            report.validation.push((done, jf));
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainEvent {
    Log(LogRow),
    Validation { iteration: usize, jf: f64 },
}
