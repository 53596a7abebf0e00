//! Multi-object soft aggregation and the segmentation losses.
//!
//! A class distribution is a `(1+k)×H×W` tensor whose channel 0 is the
//! background. Ground truth is a per-pixel class index in `0..=k`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BackwardOp, Graph, Tensor, Var};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before aggregation.
pub const EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundRule {
    /// `1 - ∏ m_i`
    #[default]
    OneMinusProduct,
    /// `∏ (1 - m_i)`
    Complement,
}

impl FromStr for BackgroundRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "one-minus-product" => Ok(Self::OneMinusProduct),
            "complement" => Ok(Self::Complement),
            other => Err(Error::Config(format!("unknown background rule `{other}`"))),
        }
    }
}

fn clamp(m: f64) -> f64 {
    m.clamp(EPS, 1.0 - EPS)
}

fn background(rule: BackgroundRule, ms: impl Iterator<Item = f64>) -> f64 {
    match rule {
        BackgroundRule::OneMinusProduct => 1.0 - ms.product::<f64>(),
        BackgroundRule::Complement => ms.map(|m| 1.0 - m).product(),
    }
}

fn target_shape(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [k, h, w] if k > 0 => Ok((k, h * w)),
        ref s => Err(Error::Input(format!("expected k×H×W target probabilities, got {s:?}"))),
    }
}

/// Per pixel: clamp, prepend the background channel, normalize.
pub fn soft_aggregate(probs: &Tensor, rule: BackgroundRule) -> Result<Tensor> {
    let (k, n) = target_shape(probs.shape())?;
    let out = aggregate_forward(probs.data(), k, n, rule);
    let mut shape = probs.shape().to_vec();
    shape[0] = k + 1;
    Ok(Tensor::from_parts(shape, out))
}

fn aggregate_forward(m: &[f64], k: usize, n: usize, rule: BackgroundRule) -> Vec<f64> {
    let mut out = vec![0.0; (k + 1) * n];
    let mut x = vec![0.0; k + 1];
    for p in 0..n {
        for i in 0..k {
            x[i + 1] = clamp(m[i * n + p]);
        }
        x[0] = background(rule, x[1..].iter().copied());
        let s: f64 = x.iter().sum();
        for (c, v) in x.iter().enumerate() {
            out[c * n + p] = v / s;
        }
    }
    out
}

struct AggregateOp {
    inputs: [Var; 1],
    k: usize,
    n: usize,
    rule: BackgroundRule,
}

impl BackwardOp for AggregateOp {
    fn name(&self) -> &'static str {
        "soft_aggregate"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, g: &Graph, out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (k, n) = (self.k, self.n);
        let m = g.value(self.inputs[0]).data();
        let o = out.data();
        let mut dm = vec![0.0; k * n];
        let mut x = vec![0.0; k];
        for p in 0..n {
            for i in 0..k {
                x[i] = clamp(m[i * n + p]);
            }
            let bg = background(self.rule, x.iter().copied());
            let s = bg + x.iter().sum::<f64>();
            let dot: f64 = (0..=k).map(|c| grad[c * n + p] * o[c * n + p]).sum();
            let dx = |c: usize| (grad[c * n + p] - dot) / s;
            let dbg = dx(0);
            for i in 0..k {
                let raw = m[i * n + p];
                if raw <= EPS || raw >= 1.0 - EPS {
                    continue;
                }
                let others = |f: &dyn Fn(f64) -> f64| {
                    (0..k).filter(|&j| j != i).map(|j| f(x[j])).product::<f64>()
                };
                let dbg_dm = match self.rule {
                    BackgroundRule::OneMinusProduct => -others(&|v| v),
                    BackgroundRule::Complement => -others(&|v| 1.0 - v),
                };
                dm[i * n + p] = dx(i + 1) + dbg * dbg_dm;
            }
        }
        vec![Some(dm)]
    }
}

/// Differentiable [`soft_aggregate`].
pub fn soft_aggregate_var(g: &mut Graph, probs: Var, rule: BackgroundRule) -> Result<Var> {
    let (k, n) = target_shape(g.shape(probs))?;
    let out = aggregate_forward(g.value(probs).data(), k, n, rule);
    let mut shape = g.shape(probs).to_vec();
    shape[0] = k + 1;
    let op = AggregateOp {
        inputs: [probs],
        k,
        n,
        rule,
    };
    g.push(Tensor::from_parts(shape, out), Box::new(op))
}

fn check_labels(dist: &[usize], gt: &[u8]) -> Result<(usize, usize)> {
    let (c, n) = match *dist {
        [c, h, w] if c >= 2 => (c, h * w),
        ref s => return Err(Error::Input(format!("expected a (1+k)×H×W distribution, got {s:?}"))),
    };
    if gt.len() != n {
        return Err(Error::dim("labels", dist, &[gt.len()]));
    }
    if let Some(&bad) = gt.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Input(format!("label {bad} outside 0..{c}")));
    }
    Ok((c, n))
}

/// Number of pixels kept by the bootstrap: `⌈p·n⌉`, at least one.
pub fn bootstrap_count(p: f64, n: usize) -> usize {
    (((p * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// Indices of the `⌈p·n⌉` largest losses, ties to the lower index.
fn hardest(losses: &[f64], p: f64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    idx.truncate(bootstrap_count(p, losses.len()));
    idx
}

fn pixel_ce(d: &[f64], gt: &[u8], n: usize) -> Vec<f64> {
    gt.iter().enumerate().map(|(p, &l)| -d[l as usize * n + p].ln()).collect()
}

fn check_ratio(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("bootstrap ratio must be in (0, 1], got {p}")));
    }
    Ok(())
}

/// Mean of the hardest `⌈p·HW⌉` per-pixel cross-entropies.
pub fn bootstrapped_ce(dist: &Tensor, gt: &[u8], p: f64) -> Result<f64> {
    check_ratio(p)?;
    let (_, n) = check_labels(dist.shape(), gt)?;
    let losses = pixel_ce(dist.data(), gt, n);
    let keep = hardest(&losses, p);
    Ok(keep.iter().map(|&i| losses[i]).sum::<f64>() / keep.len() as f64)
}

struct BootCeOp {
    inputs: [Var; 1],
    gt: Vec<u8>,
    keep: Vec<usize>,
    n: usize,
}

impl BackwardOp for BootCeOp {
    fn name(&self) -> &'static str {
        "bootstrapped_ce"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, g: &Graph, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let d = g.value(self.inputs[0]).data();
        let mut dd = vec![0.0; d.len()];
        let scale = grad[0] / self.keep.len() as f64;
        for &p in &self.keep {
            let j = self.gt[p] as usize * self.n + p;
            dd[j] -= scale / d[j];
        }
        vec![Some(dd)]
    }
}

pub fn bootstrapped_ce_var(g: &mut Graph, dist: Var, gt: &[u8], p: f64) -> Result<Var> {
    check_ratio(p)?;
    let (_, n) = check_labels(g.shape(dist), gt)?;
    let losses = pixel_ce(g.value(dist).data(), gt, n);
    let keep = hardest(&losses, p);
    let value = keep.iter().map(|&i| losses[i]).sum::<f64>() / keep.len() as f64;
    let op = BootCeOp {
        inputs: [dist],
        gt: gt.to_vec(),
        keep,
        n,
    };
    g.push(Tensor::scalar(value), Box::new(op))
}

/// Per foreground channel: `(Σpq, Σp, Σq)`.
fn dice_terms(d: &[f64], gt: &[u8], c: usize, n: usize) -> Vec<(f64, f64, f64)> {
    (1..c)
        .map(|ch| {
            let plane = &d[ch * n..(ch + 1) * n];
            let mut t = (0.0, 0.0, 0.0);
            for (p, &v) in plane.iter().enumerate() {
                let q = f64::from(u8::from(gt[p] as usize == ch));
                t.0 += v * q;
                t.1 += v;
                t.2 += q;
            }
            t
        })
        .collect()
}

fn dice_value(terms: &[(f64, f64, f64)]) -> f64 {
    let s = DICE_SMOOTH;
    terms.iter().map(|&(i, sp, sq)| 1.0 - (2.0 * i + s) / (sp + sq + s)).sum::<f64>()
        / terms.len() as f64
}

/// `1 - (2Σpq + s)/(Σp + Σq + s)` averaged over foreground channels.
pub fn dice_loss(dist: &Tensor, gt: &[u8]) -> Result<f64> {
    let (c, n) = check_labels(dist.shape(), gt)?;
    Ok(dice_value(&dice_terms(dist.data(), gt, c, n)))
}

struct DiceOp {
    inputs: [Var; 1],
    gt: Vec<u8>,
    terms: Vec<(f64, f64, f64)>,
    n: usize,
}

impl BackwardOp for DiceOp {
    fn name(&self) -> &'static str {
        "dice_loss"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, g: &Graph, _out: &Tensor, grad: &[f64], _needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = self.n;
        let mut dd = vec![0.0; g.value(self.inputs[0]).len()];
        let k = self.terms.len() as f64;
        for (ci, &(i, sp, sq)) in self.terms.iter().enumerate() {
            let u = sp + sq + DICE_SMOOTH;
            let num = 2.0 * i + DICE_SMOOTH;
            let ch = ci + 1;
            for p in 0..n {
                let q = f64::from(u8::from(self.gt[p] as usize == ch));
                dd[ch * n + p] = grad[0] * (num / (u * u) - 2.0 * q / u) / k;
            }
        }
        vec![Some(dd)]
    }
}

pub fn dice_loss_var(g: &mut Graph, dist: Var, gt: &[u8]) -> Result<Var> {
    let (c, n) = check_labels(g.shape(dist), gt)?;
    let terms = dice_terms(g.value(dist).data(), gt, c, n);
    let value = dice_value(&terms);
    let op = DiceOp {
        inputs: [dist],
        gt: gt.to_vec(),
        terms,
        n,
    };
    g.push(Tensor::scalar(value), Box::new(op))
}

/// Sum of per-frame losses from the second frame on.
pub fn clip_loss(frame_losses: &[f64]) -> Result<f64> {
    if frame_losses.len() < 2 {
        return Err(Error::Config(format!(
            "a clip needs at least 2 frames, got {}",
            frame_losses.len()
        )));
    }
    Ok(frame_losses[1..].iter().sum())
}

/// Graph form of [`clip_loss`]; `frame_losses[0]` is never read.
pub fn clip_loss_var(g: &mut Graph, frame_losses: &[Var]) -> Result<Var> {
    if frame_losses.len() < 2 {
        return Err(Error::Config(format!(
            "a clip needs at least 2 frames, got {}",
            frame_losses.len()
        )));
    }
    g.add_all(&frame_losses[1..])
}

/// Bootstrapped CE plus dice for one frame.
pub fn frame_loss_var(g: &mut Graph, dist: Var, gt: &[u8], p: f64) -> Result<(Var, Var, Var)> {
    let ce = bootstrapped_ce_var(g, dist, gt, p)?;
    let dice = dice_loss_var(g, dist, gt)?;
    let total = g.add(ce, dice)?;
    Ok((total, ce, dice))
}

/// Per-pixel argmax over a class distribution. Ties go to the lower class
/// index, so background wins any tie.
pub fn argmax_labels(dist: &Tensor) -> Vec<u8> {
    let c = dist.shape()[0];
    let n = dist.len() / c;
    let d = dist.data();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for ch in 1..c {
                if d[ch * n + p] > d[best * n + p] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect()
}
