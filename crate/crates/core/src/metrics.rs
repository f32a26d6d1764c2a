//! Segmentation metrics: Dice, boundary Hausdorff distance in millimetres
//! and 8-connected component counts.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, RasterMask};

/// Threshold applied to soft masks before component analysis.
pub const CC_THRESHOLD: f64 = 0.5;

/// Anything that can be read as a foreground/background grid.
pub trait Foreground {
    fn dims(&self) -> (usize, usize);
    fn is_fg(&self, col: usize, row: usize) -> bool;
}

impl Foreground for BinaryMask {
    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
    fn is_fg(&self, col: usize, row: usize) -> bool {
        self.get(col, row)
    }
}

impl Foreground for RasterMask {
    fn dims(&self) -> (usize, usize) {
        (self.width(), self.height())
    }
    fn is_fg(&self, col: usize, row: usize) -> bool {
        self.get(col, row) >= CC_THRESHOLD
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
            Connectivity::Eight => &[
                (1, 0),
                (-1, 0),
                (0, 1),
                (0, -1),
                (1, 1),
                (1, -1),
                (-1, 1),
                (-1, -1),
            ],
        }
    }
}

/// Labels the cells selected by `select` (row-major), returning one label per
/// pixel (`0` = unselected) and the number of components.
pub fn label_components(
    width: usize,
    height: usize,
    connectivity: Connectivity,
    select: impl Fn(usize, usize) -> bool,
) -> (Vec<u32>, usize) {
    let mut labels = vec![0u32; width * height];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for r in 0..height {
        for c in 0..width {
            if labels[r * width + c] != 0 || !select(c, r) {
                continue;
            }
            count += 1;
            labels[r * width + c] = count;
            queue.push_back((c, r));
            while let Some((x, y)) = queue.pop_front() {
                for &(dx, dy) in connectivity.offsets() {
                    let nx = x as isize + dx;
                    let ny = y as isize + dy;
                    if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                        continue;
                    }
                    let (nx, ny) = (nx as usize, ny as usize);
                    let idx = ny * width + nx;
                    if labels[idx] == 0 && select(nx, ny) {
                        labels[idx] = count;
                        queue.push_back((nx, ny));
                    }
                }
            }
        }
    }
    (labels, count as usize)
}

/// Number of 8-connected foreground components (soft masks thresholded at 0.5).
pub fn connected_components<M: Foreground + ?Sized>(mask: &M) -> usize {
    let (w, h) = mask.dims();
    label_components(w, h, Connectivity::Eight, |c, r| mask.is_fg(c, r)).1
}

/// Number of background regions enclosed by the foreground. Background is
/// 4-connected and the area outside the image counts as background.
pub fn hole_count<M: Foreground + ?Sized>(mask: &M) -> usize {
    let (w, h) = mask.dims();
    let (pw, ph) = (w + 2, h + 2);
    let bg = |c: usize, r: usize| {
        c == 0 || r == 0 || c == pw - 1 || r == ph - 1 || !mask.is_fg(c - 1, r - 1)
    };
    let (_, n) = label_components(pw, ph, Connectivity::Four, bg);
    n.saturating_sub(1)
}

/// `2|A∩B| / (|A|+|B|)`, with two empty masks scoring 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    b.same_shape(a.width(), a.height())?;
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x & y) as usize;
        sa += x as usize;
        sb += y as usize;
    }
    if sa + sb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sa + sb) as f64)
}

/// Pixel centers of foreground pixels with at least one 4-neighbour in the
/// background (outside the image counts as background).
pub fn boundary_pixels(mask: &BinaryMask) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if !mask.get(c, r) {
                continue;
            }
            let (ci, ri) = (c as isize, r as isize);
            let edge = !mask.get_signed(ci - 1, ri)
                || !mask.get_signed(ci + 1, ri)
                || !mask.get_signed(ci, ri - 1)
                || !mask.get_signed(ci, ri + 1);
            if edge {
                out.push((c as f64 + 0.5, r as f64 + 0.5));
            }
        }
    }
    out
}

fn directed_hd(from: &[(f64, f64)], to: &[(f64, f64)]) -> f64 {
    from.iter()
        .map(|&(x, y)| {
            to.iter()
                .map(|&(u, v)| (x - u) * (x - u) + (y - v) * (y - v))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance between the two boundary sets, in mm
/// (spacing taken from `a`).
pub fn hausdorff_mm(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    b.same_shape(a.width(), a.height())?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedHausdorff("empty mask"));
    }
    let ba = boundary_pixels(a);
    let bb = boundary_pixels(b);
    let hd = directed_hd(&ba, &bb).max(directed_hd(&bb, &ba));
    Ok(hd * a.spacing_mm())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMetrics {
    pub dice: f64,
    pub hd_mm: f64,
    pub cc: usize,
    pub gt_cc: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    /// Mean and sample (n-1) standard deviation; sd is 0 for a single value.
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, sd }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<SampleMetrics>,
    pub dice: Summary,
    pub hd_mm: Summary,
    pub cc: Summary,
}

impl EvalReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let col = |f: fn(&SampleMetrics) -> f64| Summary::of(&samples.iter().map(f).collect::<Vec<_>>());
        let dice = col(|s| s.dice);
        let hd_mm = col(|s| s.hd_mm);
        let cc = col(|s| s.cc as f64);
        Self {
            samples,
            dice,
            hd_mm,
            cc,
        }
    }

    /// Line-delimited per-sample records followed by `metric mean sd` rows.
    pub fn to_tsv(&self, ids: &[String]) -> String {
        let mut s = String::from("id\tdice\thd_mm\tcc\tgt_cc\n");
        for (i, m) in self.samples.iter().enumerate() {
            let id = ids.get(i).cloned().unwrap_or_else(|| format!("{i:04}"));
            s += &format!("{id}\t{:.6}\t{:.6}\t{}\t{}\n", m.dice, m.hd_mm, m.cc, m.gt_cc);
        }
        s += "metric\tmean\tsd\n";
        for (name, v) in [("dice", self.dice), ("hd_mm", self.hd_mm), ("cc", self.cc)] {
            s += &format!("{name}\t{:.6}\t{:.6}\n", v.mean, v.sd);
        }
        s
    }
}

/// Per-sample Dice/HD/CC plus mean and sample standard deviation. The
/// spacing overrides the masks' own spacing.
pub fn evaluate(pred: &[BinaryMask], gt: &[BinaryMask], spacing_mm: f64) -> Result<EvalReport> {
    Error::check_len(gt.len(), pred.len())?;
    if !(spacing_mm.is_finite() && spacing_mm > 0.0) {
        return Err(Error::param("spacing_mm", "must be positive"));
    }
    let samples = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let p = p.clone().with_spacing(spacing_mm)?;
            Ok(SampleMetrics {
                dice: dice(&p, g)?,
                hd_mm: hausdorff_mm(&p, g)?,
                cc: connected_components(&p),
                gt_cc: connected_components(g),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_samples(samples))
}
