//! Online video segmentation: the reference memory bank, the per-frame
//! pipeline and multi-scale / mirrored test-time augmentation.

use std::collections::VecDeque;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PropagationMode;
use crate::embed::reference_pair;
use crate::error::{Error, Result};
use crate::memory::{init_state, CompressedMemoryState};
use crate::model::{frame_forward, ForwardOptions, Model};
use crate::objective::{argmax_labels, soft_aggregate, BackgroundRule};
use crate::tensor::{kernels, Graph, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MirrorAxis {
    /// flip columns
    #[default]
    Horizontal,
    /// flip rows
    Vertical,
}

impl FromStr for MirrorAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "horizontal" => Ok(Self::Horizontal),
            "vertical" => Ok(Self::Vertical),
            other => Err(Error::Config(format!("unknown mirror axis `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub mode: PropagationMode,
    /// Reference keys kept per current query; `None` disables the filter.
    pub topk: Option<usize>,
    pub mem_interval: usize,
    pub mem_cap: usize,
    pub scales: Vec<f64>,
    pub mirror: bool,
    pub mirror_axis: MirrorAxis,
    pub background_rule: BackgroundRule,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            mode: PropagationMode::D,
            topk: None,
            mem_interval: 5,
            mem_cap: 3,
            scales: vec![1.0],
            mirror: false,
            mirror_axis: MirrorAxis::Horizontal,
            background_rule: BackgroundRule::OneMinusProduct,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.topk == Some(0) {
            return Err(Error::Config("topk must be >= 1".into()));
        }
        if self.mem_interval == 0 {
            return Err(Error::Config("mem_interval must be >= 1".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Config("scales must not be empty".into()));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Config(format!("scale {s} must be a positive number")));
        }
        Ok(())
    }
}

/// One reference frame with its per-target binary masks (`1×H×W` each).
#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub index: usize,
    pub frame: Tensor,
    pub masks: Vec<Tensor>,
}

/// First frame (never evicted), a FIFO of every `interval`-th frame holding
/// at most `cap` entries, and the previous frame.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    first: BankEntry,
    fifo: VecDeque<BankEntry>,
    previous: Option<BankEntry>,
    interval: usize,
    cap: usize,
}

impl MemoryBank {
    pub fn new(first: BankEntry, interval: usize, cap: usize) -> Result<Self> {
        if interval == 0 {
            return Err(Error::Config("memory interval must be >= 1".into()));
        }
        Ok(MemoryBank {
            first,
            fifo: VecDeque::new(),
            previous: None,
            interval,
            cap,
        })
    }

    /// Entries in frame order, each frame at most once.
    pub fn references(&self) -> Vec<&BankEntry> {
        let mut out: Vec<&BankEntry> = std::iter::once(&self.first)
            .chain(self.fifo.iter())
            .chain(self.previous.iter())
            .collect();
        out.sort_by_key(|e| e.index);
        out.dedup_by_key(|e| e.index);
        out
    }

    pub fn indices(&self) -> Vec<usize> {
        self.references().iter().map(|e| e.index).collect()
    }

    /// Stored slots, counting a frame held in two slots twice.
    pub fn slots(&self) -> usize {
        1 + self.fifo.len() + usize::from(self.previous.is_some())
    }

    pub fn capacity(&self) -> usize {
        2 + self.cap
    }
}

/// Records the segmentation of frame `entry.index` (which must be ≥ 1).
pub fn memory_bank_update(bank: &mut MemoryBank, entry: BankEntry) -> Result<()> {
    let t = entry.index;
    if t == 0 {
        return Err(Error::Contract("frame 0 is installed when the bank is created".into()));
    }
    if t % bank.interval == 0 && bank.cap > 0 {
        bank.fifo.push_back(entry.clone());
        while bank.fifo.len() > bank.cap {
            bank.fifo.pop_front();
        }
    }
    bank.previous = Some(entry);
    Ok(())
}

/// Attention and gate maps of one target for one frame, averaged over heads.
#[derive(Clone, Debug, Default)]
pub struct Diagnostics {
    /// Per backbone block, `total × total`.
    pub attention: Vec<Tensor>,
    /// Per current token, `N × 1`.
    pub gate: Option<Tensor>,
}

pub struct FrameResult {
    /// Per target `1×H×W` foreground probabilities.
    pub probs: Vec<Tensor>,
    pub states: Vec<CompressedMemoryState>,
    pub diagnostics: Vec<Diagnostics>,
}

fn head_mean(g: &Graph, v: crate::tensor::Var, heads: usize) -> Option<Tensor> {
    let mut acc = g.attention_weights(v, 0)?;
    for h in 1..heads {
        let w = g.attention_weights(v, h)?;
        acc.data_mut().iter_mut().zip(w.data()).for_each(|(a, b)| *a += b);
    }
    acc.data_mut().iter_mut().for_each(|a| *a /= heads as f64);
    Some(acc)
}

/// Segments one frame for every target against the current bank.
pub fn segment_frame(
    model: &Model,
    bank: &MemoryBank,
    states: &[CompressedMemoryState],
    frame: &Tensor,
    cfg: &InferenceConfig,
    trace: bool,
) -> Result<FrameResult> {
    let refs = bank.references();
    let n_targets = bank.first.masks.len();
    if model.cfg.memory && states.len() != n_targets {
        return Err(Error::Contract(format!(
            "{} memory states for {n_targets} targets",
            states.len()
        )));
    }
    let opts = ForwardOptions {
        mode: cfg.mode,
        topk: cfg.topk,
        memory_sees_refs: true,
        trace,
    };
    let per_target: Vec<Result<(Tensor, Option<CompressedMemoryState>, Diagnostics)>> = (0
        ..n_targets)
        .into_par_iter()
        .map(|i| {
            let pairs = refs
                .iter()
                .map(|e| reference_pair(&e.frame, &e.masks[i]))
                .collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, false);
            let memory = model.cfg.memory.then(|| g.constant(states[i].token.clone()));
            let out = frame_forward(&mut g, &model.cfg, &p, frame, &pairs, memory, &opts)?;
            let mut diag = Diagnostics::default();
            if trace {
                for &a in &out.attention {
                    diag.attention.extend(head_mean(&g, a, model.cfg.heads));
                }
                diag.gate = out.gate.and_then(|v| head_mean(&g, v, model.cfg.heads));
            }
            let state = out.memory.map(|m| CompressedMemoryState {
                token: g.value(m).clone(),
            });
            Ok((g.value(out.probs).clone(), state, diag))
        })
        .collect();
    let mut result = FrameResult {
        probs: Vec::with_capacity(n_targets),
        states: Vec::new(),
        diagnostics: Vec::new(),
    };
    for r in per_target {
        let (p, s, d) = r?;
        result.probs.push(p);
        result.states.extend(s);
        result.diagnostics.push(d);
    }
    Ok(result)
}

/// Distinct non-zero ids of an annotation, ascending.
pub fn target_ids(labels: &[u8]) -> Vec<u8> {
    let mut seen = [false; 256];
    labels.iter().for_each(|&l| seen[l as usize] = true);
    (1..=255u8).filter(|&l| seen[l as usize]).collect()
}

pub fn binary_mask(labels: &[u8], id: u8, (h, w): (usize, usize)) -> Tensor {
    Tensor::from_parts(
        vec![1, h, w],
        labels.iter().map(|&l| f64::from(u8::from(l == id))).collect(),
    )
}

fn frame_hw(frame: &Tensor) -> Result<(usize, usize)> {
    match *frame.shape() {
        [3, h, w] => Ok((h, w)),
        ref s => Err(Error::Input(format!("frames must be 3×H×W, got {s:?}"))),
    }
}

/// Per-frame class distributions (`(1+k)×H×W`); frame 0 is the one-hot
/// annotation.
pub fn video_distributions(
    model: &Model,
    frames: &[Tensor],
    first_labels: &[u8],
    ids: &[u8],
    cfg: &InferenceConfig,
    mut observe: Option<&mut dyn FnMut(usize, &[Diagnostics])>,
) -> Result<Vec<Tensor>> {
    let Some(first) = frames.first() else {
        return Err(Error::Input("video has no frames".into()));
    };
    let (h, w) = frame_hw(first)?;
    if first_labels.len() != h * w {
        return Err(Error::dim("annotation", &[h, w], &[first_labels.len()]));
    }
    if ids.is_empty() {
        return Err(Error::Input("the first-frame annotation has no targets".into()));
    }
    let masks: Vec<Tensor> = ids.iter().map(|&id| binary_mask(first_labels, id, (h, w))).collect();
    let k = ids.len();
    let mut dists = Vec::with_capacity(frames.len());
    let mut onehot = vec![0.0; (k + 1) * h * w];
    for (p, &l) in first_labels.iter().enumerate() {
        let c = ids.iter().position(|&id| id == l).map_or(0, |i| i + 1);
        onehot[c * h * w + p] = 1.0;
    }
    dists.push(Tensor::from_parts(vec![k + 1, h, w], onehot));

    let mut bank = MemoryBank::new(
        BankEntry {
            index: 0,
            frame: first.clone(),
            masks,
        },
        cfg.mem_interval,
        cfg.mem_cap,
    )?;
    let mut states = if model.cfg.memory {
        init_state(k, &model.params.mem_init)?
    } else {
        Vec::new()
    };
    let trace = observe.is_some();
    for (t, frame) in frames.iter().enumerate().skip(1) {
        if frame_hw(frame)? != (h, w) {
            return Err(Error::Input(format!("frame {t} differs in size from frame 0")));
        }
        let res = segment_frame(model, &bank, &states, frame, cfg, trace)?;
        if let Some(f) = observe.as_mut() {
            f(t, &res.diagnostics);
        }
        let mut stacked = Vec::with_capacity(k * h * w);
        res.probs.iter().for_each(|p| stacked.extend_from_slice(p.data()));
        let dist = soft_aggregate(&Tensor::from_parts(vec![k, h, w], stacked), cfg.background_rule)?;
        let labels = argmax_labels(&dist);
        let masks = (1..=k as u8).map(|c| binary_mask(&labels, c, (h, w))).collect();
        memory_bank_update(
            &mut bank,
            BankEntry {
                index: t,
                frame: frame.clone(),
                masks,
            },
        )?;
        states = res.states;
        dists.push(dist);
    }
    Ok(dists)
}

/// Arg-max of a class distribution, mapped back to the annotation ids.
pub fn labels_from_dist(dist: &Tensor, ids: &[u8]) -> Vec<u8> {
    argmax_labels(dist)
        .into_iter()
        .map(|c| if c == 0 { 0 } else { ids[c as usize - 1] })
        .collect()
}

/// Label maps (with the annotation's ids) for every frame of a video.
pub fn segment_video(
    model: &Model,
    frames: &[Tensor],
    first_labels: &[u8],
    cfg: &InferenceConfig,
) -> Result<Vec<Vec<u8>>> {
    cfg.validate()?;
    let ids = target_ids(first_labels);
    let dists = video_distributions(model, frames, first_labels, &ids, cfg, None)?;
    let mut out: Vec<Vec<u8>> = dists.iter().map(|d| labels_from_dist(d, &ids)).collect();
    out[0] = first_labels.to_vec();
    Ok(out)
}

/// Frame size for a scale, rounded to whole patches.
pub fn scaled_size((h, w): (usize, usize), scale: f64, patch: usize) -> (usize, usize) {
    let r = |v: usize| (((v as f64 * scale) / patch as f64).round() as usize).max(1) * patch;
    (r(h), r(w))
}

fn flip(data: &[f64], c: usize, (h, w): (usize, usize), axis: MirrorAxis) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = match axis {
                    MirrorAxis::Horizontal => (y, w - 1 - x),
                    MirrorAxis::Vertical => (h - 1 - y, x),
                };
                out[(ch * h + y) * w + x] = data[(ch * h + sy) * w + sx];
            }
        }
    }
    out
}

fn resize_nearest(labels: &[u8], (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<u8> {
    let src = |o: usize, n: usize, on: usize| (((o as f64 + 0.5) * n as f64 / on as f64) as usize).min(n - 1);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            out.push(labels[src(y, h, oh) * w + src(x, w, ow)]);
        }
    }
    out
}

/// Test-time augmentation: every scale (and its mirror image when enabled)
/// runs as an independent pipeline; distributions are mapped back to the
/// input frame, averaged and arg-maxed.
pub fn multi_scale_infer(
    model: &Model,
    frames: &[Tensor],
    first_labels: &[u8],
    cfg: &InferenceConfig,
) -> Result<Vec<Vec<u8>>> {
    cfg.validate()?;
    let Some(first) = frames.first() else {
        return Err(Error::Input("video has no frames".into()));
    };
    let hw = frame_hw(first)?;
    let ids = target_ids(first_labels);
    let mut variants = Vec::new();
    for &s in &cfg.scales {
        variants.push((s, false));
        if cfg.mirror {
            variants.push((s, true));
        }
    }
    let mut sum: Option<Vec<Tensor>> = None;
    for &(scale, mirrored) in &variants {
        let size = scaled_size(hw, scale, model.cfg.patch);
        let map_frame = |f: &Tensor| {
            let mut d = kernels::resize_bilinear(f.data(), 3, hw, size);
            if mirrored {
                d = flip(&d, 3, size, cfg.mirror_axis);
            }
            Tensor::from_parts(vec![3, size.0, size.1], d)
        };
        let vframes: Vec<Tensor> = frames.iter().map(map_frame).collect();
        let mut vlabels = resize_nearest(first_labels, hw, size);
        if mirrored {
            let as_f: Vec<f64> = vlabels.iter().map(|&l| f64::from(l)).collect();
            vlabels = flip(&as_f, 1, size, cfg.mirror_axis).iter().map(|&v| v as u8).collect();
        }
        let dists = video_distributions(model, &vframes, &vlabels, &ids, cfg, None)?;
        let back: Vec<Tensor> = dists
            .into_iter()
            .map(|d| {
                let c = d.shape()[0];
                let mut v = d.into_data();
                if mirrored {
                    v = flip(&v, c, size, cfg.mirror_axis);
                }
                Tensor::from_parts(vec![c, hw.0, hw.1], kernels::resize_bilinear(&v, c, size, hw))
            })
            .collect();
        sum = Some(match sum {
            None => back,
            Some(mut acc) => {
                for (a, b) in acc.iter_mut().zip(&back) {
                    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                }
                acc
            }
        });
    }
    let n = variants.len() as f64;
    let mut out: Vec<Vec<u8>> = sum
        .expect("at least one variant")
        .into_iter()
        .map(|mut d| {
            d.data_mut().iter_mut().for_each(|v| *v /= n);
            labels_from_dist(&d, &ids)
        })
        .collect();
    out[0] = first_labels.to_vec();
    Ok(out)
}
