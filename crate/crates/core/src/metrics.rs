//! Segmentation metrics: Dice, IoU, weighted coverage, boundary F-measure
//! and Hausdorff distance, plus the connected-component labelling that
//! weighted coverage needs.
//!
//! All inputs are binary masks (values > 0.5 are foreground).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fields::Grid;
use crate::maps::edt;

pub const DICE_EPS: f64 = 1e-7;

/// Boundary tolerances, in pixels, averaged by [`boundf`].
pub const BOUNDF_TOLERANCES: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

/// Hausdorff value reported when either boundary is empty.
pub const HAUSDORFF_UNDEFINED: f64 = -1.0;

#[inline]
fn fg(v: f64) -> bool {
    v > 0.5
}

pub fn dice_score(g: &Grid, y: &Grid) -> Result<f64> {
    g.same_dims(y)?;
    let (mut inter, mut sg, mut sy) = (0.0, 0.0, 0.0);
    for (&a, &b) in g.values().iter().zip(y.values()) {
        inter += a * b;
        sg += a * a;
        sy += b * b;
    }
    Ok(2.0 * inter / (sg + sy + DICE_EPS))
}

/// `|G ∩ Y| / |G ∪ Y|`; two empty masks score 1.
pub fn iou(g: &Grid, y: &Grid) -> Result<f64> {
    g.same_dims(y)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in g.values().iter().zip(y.values()) {
        inter += (fg(a) && fg(b)) as usize;
        union += (fg(a) || fg(b)) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_count(n: u8) -> Option<Self> {
        match n {
            4 => Some(Connectivity::Four),
            8 => Some(Connectivity::Eight),
            _ => None,
        }
    }
}

/// Connected components, labelled `1..=count` in raster order of each
/// region's first pixel; 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct Regions {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub count: usize,
    /// `sizes[k]` is the pixel count of label `k + 1`.
    pub sizes: Vec<usize>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Two-pass union-find labelling.
pub fn label_components(mask: &Grid, connectivity: Connectivity) -> Regions {
    let (h, w) = mask.dims();
    let mut parent: Vec<usize> = (0..h * w).collect();
    let on = |i: usize, j: usize| fg(mask.get(i, j));
    for i in 0..h {
        for j in 0..w {
            if !on(i, j) {
                continue;
            }
            let k = i * w + j;
            if j > 0 && on(i, j - 1) {
                union(&mut parent, k, k - 1);
            }
            if i > 0 {
                if on(i - 1, j) {
                    union(&mut parent, k, k - w);
                }
                if connectivity == Connectivity::Eight {
                    if j > 0 && on(i - 1, j - 1) {
                        union(&mut parent, k, k - w - 1);
                    }
                    if j + 1 < w && on(i - 1, j + 1) {
                        union(&mut parent, k, k - w + 1);
                    }
                }
            }
        }
    }
    let mut root_label = vec![0u32; h * w];
    let mut labels = vec![0u32; h * w];
    let mut sizes = Vec::new();
    for k in 0..h * w {
        if !fg(mask.values()[k]) {
            continue;
        }
        let r = find(&mut parent, k);
        if root_label[r] == 0 {
            sizes.push(0);
            root_label[r] = sizes.len() as u32;
        }
        let l = root_label[r];
        labels[k] = l;
        sizes[l as usize - 1] += 1;
    }
    Regions {
        height: h,
        width: w,
        labels,
        count: sizes.len(),
        sizes,
    }
}

/// Weighted coverage: each gt instance contributes its best IoU against any
/// predicted instance, weighted by its area. No gt instances scores 1 when
/// the prediction is empty too, else 0.
pub fn wcov(gt: &Grid, pred: &Grid, connectivity: Connectivity) -> Result<f64> {
    gt.same_dims(pred)?;
    let rg = label_components(gt, connectivity);
    let rp = label_components(pred, connectivity);
    if rg.count == 0 {
        return Ok(if rp.count == 0 { 1.0 } else { 0.0 });
    }
    // overlap[g][p] over all labelled pixel pairs
    let mut overlap = vec![vec![0usize; rp.count]; rg.count];
    for (&a, &b) in rg.labels.iter().zip(&rp.labels) {
        if a > 0 && b > 0 {
            overlap[a as usize - 1][b as usize - 1] += 1;
        }
    }
    let total: usize = rg.sizes.iter().sum();
    let mut acc = 0.0;
    for (gi, row) in overlap.iter().enumerate() {
        let best = row
            .iter()
            .enumerate()
            .map(|(pi, &inter)| inter as f64 / (rg.sizes[gi] + rp.sizes[pi] - inter) as f64)
            .fold(0.0, f64::max);
        acc += rg.sizes[gi] as f64 * best;
    }
    Ok(acc / total as f64)
}

/// Foreground pixels with at least one in-grid background 4-neighbour.
pub fn boundary(mask: &Grid) -> Grid {
    let (h, w) = mask.dims();
    Grid::from_fn(h, w, |i, j| {
        if !fg(mask.get(i, j)) {
            return 0.0;
        }
        let bg_near = (i > 0 && !fg(mask.get(i - 1, j)))
            || (i + 1 < h && !fg(mask.get(i + 1, j)))
            || (j > 0 && !fg(mask.get(i, j - 1)))
            || (j + 1 < w && !fg(mask.get(i, j + 1)));
        if bg_near {
            1.0
        } else {
            0.0
        }
    })
}

/// Distances from each boundary pixel of `from` to the boundary of `to`.
fn boundary_distances(from: &Grid, to_dist: &Grid) -> Vec<f64> {
    from.values()
        .iter()
        .zip(to_dist.values())
        .filter(|(&b, _)| b > 0.5)
        .map(|(_, &d)| d)
        .collect()
}

/// Boundary F-measure averaged over tolerances of 1 to 5 pixels.
pub fn boundf(gt: &Grid, pred: &Grid) -> Result<f64> {
    gt.same_dims(pred)?;
    let bg = boundary(gt);
    let bp = boundary(pred);
    let (ng, np) = (bg.sum(), bp.sum());
    if ng == 0.0 && np == 0.0 {
        return Ok(1.0);
    }
    if ng == 0.0 || np == 0.0 {
        return Ok(0.0);
    }
    let pred_to_gt = boundary_distances(&bp, &edt(&bg));
    let gt_to_pred = boundary_distances(&bg, &edt(&bp));
    let mut total = 0.0;
    for &d in &BOUNDF_TOLERANCES {
        let p = pred_to_gt.iter().filter(|&&x| x <= d).count() as f64 / pred_to_gt.len() as f64;
        let r = gt_to_pred.iter().filter(|&&x| x <= d).count() as f64 / gt_to_pred.len() as f64;
        total += if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
    }
    Ok(total / BOUNDF_TOLERANCES.len() as f64)
}

/// Symmetric Hausdorff distance between boundary sets, in pixels.
pub fn hausdorff(gt: &Grid, pred: &Grid) -> Result<f64> {
    gt.same_dims(pred)?;
    let bg = boundary(gt);
    let bp = boundary(pred);
    if bg.sum() == 0.0 || bp.sum() == 0.0 {
        return Ok(HAUSDORFF_UNDEFINED);
    }
    let a = boundary_distances(&bg, &edt(&bp))
        .into_iter()
        .fold(0.0, f64::max);
    let b = boundary_distances(&bp, &edt(&bg))
        .into_iter()
        .fold(0.0, f64::max);
    Ok(a.max(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub iou: f64,
    pub wcov: f64,
    pub boundf: f64,
    pub hausdorff: f64,
    pub pixel_count: usize,
}

pub fn evaluate(gt: &Grid, pred: &Grid) -> Result<MetricsReport> {
    Ok(MetricsReport {
        dice: dice_score(gt, pred)?,
        iou: iou(gt, pred)?,
        wcov: wcov(gt, pred, Connectivity::Eight)?,
        boundf: boundf(gt, pred)?,
        hausdorff: hausdorff(gt, pred)?,
        pixel_count: gt.len(),
    })
}

/// Per-field mean; Hausdorff sentinels are skipped (and reported as the
/// sentinel when nothing remains).
pub fn mean_report(reports: &[MetricsReport]) -> MetricsReport {
    let n = reports.len().max(1) as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let hd: Vec<f64> = reports
        .iter()
        .map(|r| r.hausdorff)
        .filter(|&h| h >= 0.0)
        .collect();
    MetricsReport {
        dice: avg(|r| r.dice),
        iou: avg(|r| r.iou),
        wcov: avg(|r| r.wcov),
        boundf: avg(|r| r.boundf),
        hausdorff: if hd.is_empty() {
            HAUSDORFF_UNDEFINED
        } else {
            hd.iter().sum::<f64>() / hd.len() as f64
        },
        pixel_count: reports.iter().map(|r| r.pixel_count).sum(),
    }
}

pub const CSV_HEADER: &str = "file,dice,iou,wcov,boundf,hausdorff";

/// Metrics CSV: header, one row per entry in the given order, then `MEAN`.
pub fn to_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let line = |out: &mut String, name: &str, r: &MetricsReport| {
        let _ = writeln!(
            out,
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.dice, r.iou, r.wcov, r.boundf, r.hausdorff
        );
    };
    for (name, r) in rows {
        line(&mut out, name, r);
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| r.clone()).collect();
    line(&mut out, "MEAN", &mean_report(&reports));
    out
}
