//! Finite-difference check of the whole network on a short clip.

use crate::config::{ModelConfig, PropagationMode};
use crate::embed::reference_pair;
use crate::error::Result;
use crate::inference::binary_mask;
use crate::model::{frame_forward, ForwardOptions, Model};
use crate::objective::{clip_loss_var, frame_loss_var, soft_aggregate_var, BackgroundRule};
use crate::params::ModelParams;
use crate::tensor::{grad_check, Graph, Tensor, Var};

use super::synth::{gen_synthetic_video, SynthConfig, SyntheticVideo};

/// Step of the central differences.
pub const GRADCHECK_EPS: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over all parameters.
    pub max_rel_err: f64,
    /// Per parameter tensor, in visiting order.
    pub per_param: Vec<(String, f64)>,
    pub scalars: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_param.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

fn clip_video(cfg: &ModelConfig, seed: u64) -> Result<SyntheticVideo> {
    let synth = SynthConfig {
        height: cfg.height,
        width: cfg.width,
        frames: 3,
        targets: 2,
        min_size: 3.0,
        max_size: (cfg.height.min(cfg.width) as f64 / 2.0 - 1.0).min(5.0),
        max_speed: 1.0,
        ..SynthConfig::default()
    };
    gen_synthetic_video(seed, &synth)
}

/// Loss of a three-frame clip, two targets, the first frame as the only
/// reference and the memory token carried from frame to frame. References
/// use ground truth so the loss is smooth in the parameters.
fn clip_loss(g: &mut Graph, model_cfg: &ModelConfig, p: &ModelParams<Var>, video: &SyntheticVideo, mode: PropagationMode) -> Result<Var> {
    let size = video.size();
    let opts = ForwardOptions::new(mode);
    let mut probs = vec![Vec::new(); video.frames.len()];
    for id in 1..=2u8 {
        let pair = reference_pair(&video.frames[0], &binary_mask(&video.labels[0], id, size))?;
        let mut memory = model_cfg.memory.then_some(p.mem_init);
        for (t, frame) in video.frames.iter().enumerate().skip(1) {
            let out = frame_forward(g, model_cfg, p, frame, std::slice::from_ref(&pair), memory, &opts)?;
            memory = out.memory;
            probs[t].push(out.probs);
        }
    }
    let mut losses = vec![g.constant(Tensor::scalar(0.0))];
    for (t, per_target) in probs.iter().enumerate().skip(1) {
        let stacked = g.concat_rows(per_target)?;
        let dist = soft_aggregate_var(g, stacked, BackgroundRule::OneMinusProduct)?;
        losses.push(frame_loss_var(g, dist, &video.labels[t], 1.0)?.0);
    }
    clip_loss_var(g, &losses)
}

/// Checks every parameter tensor of a freshly initialized model against
/// central finite differences.
pub fn full_model_gradcheck(cfg: &ModelConfig, seed: u64, mode: PropagationMode) -> Result<GradCheckReport> {
    let model = Model::init(cfg.clone(), seed)?;
    let video = clip_video(cfg, seed)?;
    let named: Vec<(String, Tensor)> = model
        .params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut per_param = Vec::with_capacity(named.len());
    for (k, (name, tensor)) in named.iter().enumerate() {
        let err = grad_check(
            |g, v| {
                let mut idx = 0;
                let p = model.params.map(&mut |_, t| {
                    let var = if idx == k { v[0] } else { g.constant(t.clone()) };
                    idx += 1;
                    var
                });
                clip_loss(g, cfg, &p, &video, mode)
            },
            std::slice::from_ref(tensor),
            GRADCHECK_EPS,
        )?;
        per_param.push((name.clone(), err));
    }
    Ok(GradCheckReport {
        max_rel_err: per_param.iter().map(|p| p.1).fold(0.0, f64::max),
        per_param,
        scalars: model.params.num_scalars(),
    })
}
