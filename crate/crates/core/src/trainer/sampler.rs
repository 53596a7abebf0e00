//! Curriculum clip sampling.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::inference::target_ids;

use super::synth::SyntheticVideo;

/// What one training iteration looks at.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipPlan {
    pub video: usize,
    /// Frame indices into the video, increasing.
    pub frames: Vec<usize>,
    /// Target ids of the video, all visible in the clip's first frame.
    pub targets: Vec<u8>,
    /// Per clip position, the clip positions used as references. Position 0
    /// has none; every later position starts with 0.
    pub refs: Vec<Vec<usize>>,
    /// Per clip position, whether the memory row may read the references.
    pub memory_reads_refs: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub clip_len: usize,
    pub max_objects: usize,
    pub max_past_refs: usize,
    pub max_gap: usize,
    pub ref_update_prob: f64,
}

/// Largest frame gap at `iteration` of `total`: 1 at the start, rising
/// linearly to `max_gap` at the last iteration.
pub fn curriculum_gap(iteration: usize, total: usize, max_gap: usize) -> usize {
    if total <= 1 || max_gap <= 1 {
        return max_gap.max(1);
    }
    let frac = iteration.min(total - 1) as f64 / (total - 1) as f64;
    1 + ((max_gap - 1) as f64 * frac).round() as usize
}

pub fn sample_clip<R: Rng + ?Sized>(
    dataset: &[SyntheticVideo],
    iteration: usize,
    total: usize,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<ClipPlan> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot sample from an empty dataset".into()));
    }
    let t_len = cfg.clip_len;
    if t_len < 2 {
        return Err(Error::Config(format!("clip length must be >= 2, got {t_len}")));
    }
    let gap_cap = curriculum_gap(iteration, total, cfg.max_gap);
    for _ in 0..256 {
        let video = rng.random_range(0..dataset.len());
        let v = &dataset[video];
        let n = v.labels.len();
        if n < t_len {
            continue;
        }
        let gap = gap_cap.min((n - 1) / (t_len - 1)).max(1);
        let gaps: Vec<usize> = (1..t_len).map(|_| rng.random_range(1..=gap)).collect();
        let span: usize = gaps.iter().sum();
        let start = rng.random_range(0..=n - 1 - span);
        let mut frames = vec![start];
        for g in gaps {
            frames.push(frames.last().copied().unwrap_or(0) + g);
        }
        let visible = target_ids(&v.labels[start]);
        if visible.is_empty() {
            continue;
        }
        let k = rng.random_range(1..=visible.len().min(cfg.max_objects.max(1)));
        let mut picked: Vec<usize> = sample(rng, visible.len(), k).into_vec();
        picked.sort_unstable();
        let targets = picked.into_iter().map(|i| visible[i]).collect();
        let mut refs = vec![Vec::new()];
        for t in 1..t_len {
            let extra = cfg.max_past_refs.min(t - 1);
            let mut r: Vec<usize> = sample(rng, t - 1, extra).into_iter().map(|i| i + 1).collect();
            r.sort_unstable();
            r.insert(0, 0);
            refs.push(r);
        }
        let memory_reads_refs = (0..t_len)
            .map(|t| t > 0 && rng.random_bool(cfg.ref_update_prob))
            .collect();
        return Ok(ClipPlan {
            video,
            frames,
            targets,
            refs,
            memory_reads_refs,
        });
    }
    Err(Error::Input("no video yields a clip with a visible target".into()))
}
