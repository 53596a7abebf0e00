//! Region similarity J, boundary F-measure and the J&F report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::inference::target_ids;

/// Default boundary tolerance as a fraction of the image diagonal.
pub const BOUNDARY_TOL: f64 = 0.008;

fn check(pred: &[bool], gt: &[bool], (h, w): (usize, usize)) -> Result<()> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(Error::dim("mask", &[pred.len()], &[gt.len()]));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn region_j(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::dim("region_j", &[pred.len()], &[gt.len()]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with at least one 4-neighbour inside the image that is
/// background.
pub fn boundary(mask: &[bool], (h, w): (usize, usize)) -> Vec<bool> {
    let at = |y: usize, x: usize| mask[y * w + x];
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !at(y, x) {
                continue;
            }
            let edge = (y > 0 && !at(y - 1, x))
                || (y + 1 < h && !at(y + 1, x))
                || (x > 0 && !at(y, x - 1))
                || (x + 1 < w && !at(y, x + 1));
            out[y * w + x] = edge;
        }
    }
    out
}

/// Dilation by the closed Euclidean disk of radius `r`.
pub fn dilate(mask: &[bool], (h, w): (usize, usize), r: usize) -> Vec<bool> {
    let ri = r as isize;
    let offsets: Vec<(isize, isize)> = (-ri..=ri)
        .flat_map(|dy| (-ri..=ri).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= ri * ri)
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

pub fn tolerance_radius((h, w): (usize, usize), tol_frac: f64) -> usize {
    (tol_frac * ((h * h + w * w) as f64).sqrt()).ceil() as usize
}

/// Boundary F-measure with matching radius `⌈tol_frac·diagonal⌉`.
pub fn boundary_f(pred: &[bool], gt: &[bool], size: (usize, usize), tol_frac: f64) -> Result<f64> {
    check(pred, gt, size)?;
    let (bp, bg) = (boundary(pred, size), boundary(gt, size));
    let (np, ng) = (bp.iter().filter(|&&b| b).count(), bg.iter().filter(|&&b| b).count());
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let r = tolerance_radius(size, tol_frac);
    let (dp, dg) = (dilate(&bp, size, r), dilate(&bg, size, r));
    let matched_p = bp.iter().zip(&dg).filter(|(&b, &d)| b && d).count();
    let matched_g = bg.iter().zip(&dp).filter(|(&b, &d)| b && d).count();
    let precision = matched_p as f64 / np as f64;
    let recall = matched_g as f64 / ng as f64;
    Ok(if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetScore {
    pub id: u8,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
    /// `(J, F)` per scored frame.
    pub per_frame: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoReport {
    pub name: String,
    pub targets: Vec<TargetScore>,
    /// Ids present in the ground truth but absent from the first frame.
    pub unscored: Vec<u8>,
}

impl VideoReport {
    pub fn mean_jf(&self) -> f64 {
        self.targets.iter().map(|t| t.jf).sum::<f64>() / self.targets.len().max(1) as f64
    }
}

/// Scores one video. Targets are the ids of the first ground-truth frame.
pub fn evaluate(
    name: &str,
    pred: &[Vec<u8>],
    gt: &[Vec<u8>],
    size: (usize, usize),
    exclude_first: bool,
) -> Result<VideoReport> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::Input(format!(
            "{name}: {} predicted frames for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    let start = usize::from(exclude_first);
    if start >= gt.len() {
        return Err(Error::Input(format!("{name}: no frames left to score")));
    }
    let ids = target_ids(&gt[0]);
    let all_ids = target_ids(&gt.concat());
    let unscored = all_ids.into_iter().filter(|id| !ids.contains(id)).collect();
    let mut targets = Vec::with_capacity(ids.len());
    for &id in &ids {
        let mut per_frame = Vec::with_capacity(gt.len() - start);
        for (p, g) in pred[start..].iter().zip(&gt[start..]) {
            if p.len() != size.0 * size.1 || g.len() != size.0 * size.1 {
                return Err(Error::Input(format!("{name}: label map size mismatch")));
            }
            let pm: Vec<bool> = p.iter().map(|&l| l == id).collect();
            let gm: Vec<bool> = g.iter().map(|&l| l == id).collect();
            per_frame.push((region_j(&pm, &gm)?, boundary_f(&pm, &gm, size, BOUNDARY_TOL)?));
        }
        let n = per_frame.len() as f64;
        let j = per_frame.iter().map(|s| s.0).sum::<f64>() / n;
        let f = per_frame.iter().map(|s| s.1).sum::<f64>() / n;
        targets.push(TargetScore {
            id,
            j,
            f,
            jf: (j + f) / 2.0,
            per_frame,
        });
    }
    Ok(VideoReport {
        name: name.to_string(),
        targets,
        unscored,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub videos: Vec<VideoReport>,
    pub mean_j: f64,
    pub mean_f: f64,
    pub mean_jf: f64,
}

impl EvalReport {
    /// Means over every scored (video, target) pair.
    pub fn new(videos: Vec<VideoReport>) -> Self {
        let scores: Vec<&TargetScore> = videos.iter().flat_map(|v| &v.targets).collect();
        let n = scores.len().max(1) as f64;
        let mean_j = scores.iter().map(|s| s.j).sum::<f64>() / n;
        let mean_f = scores.iter().map(|s| s.f).sum::<f64>() / n;
        EvalReport {
            videos,
            mean_j,
            mean_f,
            mean_jf: (mean_j + mean_f) / 2.0,
        }
    }

    /// `video,target,J,F,JF` rows followed by a `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("video,target,J,F,JF\n");
        for v in &self.videos {
            for t in &v.targets {
                let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", v.name, t.id, t.j, t.f, t.jf);
            }
        }
        let _ = writeln!(s, "MEAN,,{:.6},{:.6},{:.6}", self.mean_j, self.mean_f, self.mean_jf);
        s
    }
}
