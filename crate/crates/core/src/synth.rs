//! Synthetic multi-instance scenes, and brute-force oracles that check the
//! fast implementations elsewhere in the crate.
//!
//! The oracles deliberately share nothing with the modules they check
//! beyond [`Grid`] itself: their own labelling, boundary extraction and
//! distance scans.

use std::collections::VecDeque;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::Grid;

pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rects,
    Disks,
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub size: usize,
    /// Inclusive range of instance counts.
    pub n_instances: (usize, usize),
    pub shape_kinds: Vec<ShapeKind>,
    pub fg_intensity: f64,
    pub bg_intensity: f64,
    pub noise_sigma: f64,
    /// Amplitude of a left-to-right linear shading, centred on zero.
    pub illumination_gradient: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            size: 64,
            n_instances: (1, 3),
            shape_kinds: vec![ShapeKind::Rects],
            fg_intensity: 0.8,
            bg_intensity: 0.2,
            noise_sigma: 0.05,
            illumination_gradient: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.size < 8 {
            return bad("scene size must be >= 8");
        }
        if self.n_instances.0 > self.n_instances.1 {
            return bad("n_instances range is inverted");
        }
        if self.shape_kinds.is_empty() {
            return bad("need at least one shape kind");
        }
        if self.fg_intensity == self.bg_intensity {
            return bad("foreground and background intensities must differ");
        }
        for v in [self.fg_intensity, self.bg_intensity] {
            if !(0.0..=1.0).contains(&v) {
                return bad("intensities must lie in [0, 1]");
            }
        }
        if !(self.noise_sigma >= 0.0 && self.illumination_gradient >= 0.0) {
            return bad("noise and gradient must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Grid,
    pub gt: Grid,
    pub requested: usize,
    pub placed: usize,
}

impl Scene {
    /// Set when fewer instances than requested could be placed.
    pub fn shortfall(&self) -> bool {
        self.placed < self.requested
    }
}

fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

fn draw_shape(rng: &mut ChaCha8Rng, kind: ShapeKind, size: usize) -> Vec<bool> {
    let n = size as f64;
    let mut m = vec![false; size * size];
    match kind {
        ShapeKind::Rects => {
            let lo = (size / 8).max(3);
            let hi = (size / 3).max(lo + 1);
            let h = rng.random_range(lo..=hi);
            let w = rng.random_range(lo..=hi);
            let top = rng.random_range(0..=size - h);
            let left = rng.random_range(0..=size - w);
            for i in top..top + h {
                for j in left..left + w {
                    m[i * size + j] = true;
                }
            }
        }
        ShapeKind::Disks | ShapeKind::Blobs => {
            let r0 = rng.random_range((n / 16.0).max(2.0)..=(n / 7.0).max(3.0));
            let cy = rng.random_range(r0..n - r0);
            let cx = rng.random_range(r0..n - r0);
            let (amp, lobes, phase) = if kind == ShapeKind::Blobs {
                (
                    rng.random_range(0.1..0.3),
                    rng.random_range(2..=5) as f64,
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            } else {
                (0.0, 0.0, 0.0)
            };
            for i in 0..size {
                for j in 0..size {
                    let dy = i as f64 - cy;
                    let dx = j as f64 - cx;
                    let r = r0 * (1.0 + amp * (lobes * dy.atan2(dx) + phase).sin());
                    m[i * size + j] = dx * dx + dy * dy <= r * r;
                }
            }
        }
    }
    m
}

/// Renders a scene. Deterministic in `spec.seed`: instance `k` draws from
/// its own RNG stream, and noise from a separate one.
pub fn gen_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let size = spec.size;
    let mut main = stream(spec.seed, 0);
    let requested = main.random_range(spec.n_instances.0..=spec.n_instances.1);

    let mut occupied = vec![false; size * size];
    // occupied cells grown by one pixel, so placed instances never touch
    let mut halo = vec![false; size * size];
    let mut placed = 0;
    for k in 0..requested {
        let mut rng = stream(spec.seed, 2 + k as u64);
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let kind = spec.shape_kinds[rng.random_range(0..spec.shape_kinds.len())];
            let shape = draw_shape(&mut rng, kind, size);
            if !shape.iter().any(|&b| b) || shape.iter().zip(&halo).any(|(&s, &h)| s && h) {
                continue;
            }
            for (o, &s) in occupied.iter_mut().zip(&shape) {
                *o |= s;
            }
            for i in 0..size {
                for j in 0..size {
                    if !shape[i * size + j] {
                        continue;
                    }
                    for di in -1isize..=1 {
                        for dj in -1isize..=1 {
                            let (a, b) = (i as isize + di, j as isize + dj);
                            if a >= 0 && b >= 0 && (a as usize) < size && (b as usize) < size {
                                halo[a as usize * size + b as usize] = true;
                            }
                        }
                    }
                }
            }
            placed += 1;
            break;
        }
    }

    let mut noise_rng = stream(spec.seed, 1);
    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let denom = (size - 1) as f64;
    let mut image = Grid::zeros(size, size);
    let mut gt = Grid::zeros(size, size);
    for i in 0..size {
        for j in 0..size {
            let fg = occupied[i * size + j];
            let base = if fg {
                spec.fg_intensity
            } else {
                spec.bg_intensity
            };
            let shade = spec.illumination_gradient * (j as f64 / denom - 0.5);
            let noise = if spec.noise_sigma > 0.0 {
                normal.sample(&mut noise_rng)
            } else {
                0.0
            };
            image.set(i, j, (base + shade + noise).clamp(0.0, 1.0));
            gt.set(i, j, if fg { 1.0 } else { 0.0 });
        }
    }
    Ok(Scene {
        image,
        gt,
        requested,
        placed,
    })
}

/// Seed of scene `index` in a dataset generated from `base`.
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

/// `n` scenes sharing `spec`, scene `k` seeded by [`scene_seed`]`(spec.seed, k)`.
pub fn gen_dataset(spec: &SceneSpec, n: usize) -> Result<Vec<Scene>> {
    (0..n)
        .into_par_iter()
        .map(|k| {
            gen_scene(&SceneSpec {
                seed: scene_seed(spec.seed, k as u64),
                ..spec.clone()
            })
        })
        .collect()
}

/// A single centred disk of `radius` on a `size x size` canvas, no noise.
pub fn disk_scene(size: usize, radius: f64, fg: f64, bg: f64) -> Scene {
    let c = (size as f64 - 1.0) / 2.0;
    let gt = Grid::from_fn(size, size, |i, j| {
        let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
        if r2 <= radius * radius {
            1.0
        } else {
            0.0
        }
    });
    let image = gt.map(|v| if v > 0.5 { fg } else { bg });
    Scene {
        image,
        gt,
        requested: 1,
        placed: 1,
    }
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

/// Nearest-seed distance by scanning every seed for every pixel.
pub fn oracle_edt(mask: &Grid) -> Grid {
    let (h, w) = mask.dims();
    let seeds: Vec<(usize, usize)> = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter(|&(i, j)| mask.get(i, j) > 0.5)
        .collect();
    Grid::from_fn(h, w, |i, j| {
        seeds
            .iter()
            .map(|&(a, b)| {
                let di = a as f64 - i as f64;
                let dj = b as f64 - j as f64;
                (di * di + dj * dj).sqrt()
            })
            .fold(None, |acc: Option<f64>, d| {
                Some(acc.map_or(d, |m| m.min(d)))
            })
            .unwrap_or(crate::maps::EDT_SENTINEL)
    })
}

/// Breadth-first flood fill; returns one pixel list per region.
pub fn oracle_regions(mask: &Grid, eight: bool) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dims();
    let mut seen = vec![false; h * w];
    let mut regions = Vec::new();
    for si in 0..h {
        for sj in 0..w {
            if mask.get(si, sj) <= 0.5 || seen[si * w + sj] {
                continue;
            }
            let mut region = Vec::new();
            let mut queue = VecDeque::from([(si, sj)]);
            seen[si * w + sj] = true;
            while let Some((i, j)) = queue.pop_front() {
                region.push((i, j));
                for di in -1isize..=1 {
                    for dj in -1isize..=1 {
                        if (di == 0 && dj == 0) || (!eight && di != 0 && dj != 0) {
                            continue;
                        }
                        let (a, b) = (i as isize + di, j as isize + dj);
                        if a < 0 || b < 0 || a >= h as isize || b >= w as isize {
                            continue;
                        }
                        let (a, b) = (a as usize, b as usize);
                        if mask.get(a, b) > 0.5 && !seen[a * w + b] {
                            seen[a * w + b] = true;
                            queue.push_back((a, b));
                        }
                    }
                }
            }
            regions.push(region);
        }
    }
    regions
}

/// Weighted coverage by comparing every gt region with every predicted
/// region (8-connectivity).
pub fn oracle_wcov(gt: &Grid, pred: &Grid) -> f64 {
    let g = oracle_regions(gt, true);
    let p = oracle_regions(pred, true);
    let total: usize = g.iter().map(|r| r.len()).sum();
    if total == 0 {
        return if p.is_empty() { 1.0 } else { 0.0 };
    }
    let mut acc = 0.0;
    for rg in &g {
        let mut best: f64 = 0.0;
        for rp in &p {
            let inter = rg.iter().filter(|px| rp.contains(px)).count();
            let union = rg.len() + rp.len() - inter;
            best = best.max(inter as f64 / union as f64);
        }
        acc += rg.len() as f64 * best;
    }
    acc / total as f64
}

/// Heaviside-weighted interior/exterior means by direct summation.
pub fn oracle_global_means(image: &Grid, phi: &Grid, eps: f64) -> (f64, f64) {
    let (mut s_in, mut w_in, mut s_out, mut w_out) = (0.0, 0.0, 0.0, 0.0);
    for (&i, &p) in image.values().iter().zip(phi.values()) {
        let h = 0.5 + (p / eps).atan() / std::f64::consts::PI;
        s_in += h * i;
        w_in += h;
        s_out += (1.0 - h) * i;
        w_out += 1.0 - h;
    }
    (s_in / w_in, s_out / w_out)
}

fn oracle_boundary(mask: &Grid) -> Vec<(f64, f64)> {
    let (h, w) = mask.dims();
    let mut pts = Vec::new();
    for i in 0..h {
        for j in 0..w {
            if mask.get(i, j) <= 0.5 {
                continue;
            }
            let neighbours = [(-1isize, 0isize), (1, 0), (0, -1), (0, 1)];
            let edge = neighbours.iter().any(|&(di, dj)| {
                let (a, b) = (i as isize + di, j as isize + dj);
                a >= 0
                    && b >= 0
                    && a < h as isize
                    && b < w as isize
                    && mask.get(a as usize, b as usize) <= 0.5
            });
            if edge {
                pts.push((i as f64, j as f64));
            }
        }
    }
    pts
}

fn nearest(p: (f64, f64), set: &[(f64, f64)]) -> f64 {
    set.iter()
        .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
        .fold(f64::INFINITY, f64::min)
}

/// `(boundf, hausdorff)` by scanning boundary point sets pairwise.
pub fn oracle_boundary_metrics(gt: &Grid, pred: &Grid) -> (f64, f64) {
    let bg = oracle_boundary(gt);
    let bp = oracle_boundary(pred);
    let boundf = if bg.is_empty() && bp.is_empty() {
        1.0
    } else if bg.is_empty() || bp.is_empty() {
        0.0
    } else {
        let dp: Vec<f64> = bp.iter().map(|&p| nearest(p, &bg)).collect();
        let dg: Vec<f64> = bg.iter().map(|&p| nearest(p, &bp)).collect();
        let mut s = 0.0;
        for d in 1..=5 {
            let d = d as f64;
            let prec = dp.iter().filter(|&&x| x <= d).count() as f64 / dp.len() as f64;
            let rec = dg.iter().filter(|&&x| x <= d).count() as f64 / dg.len() as f64;
            s += if prec + rec > 0.0 {
                2.0 * prec * rec / (prec + rec)
            } else {
                0.0
            };
        }
        s / 5.0
    };
    let hd = if bg.is_empty() || bp.is_empty() {
        -1.0
    } else {
        let a = bg.iter().map(|&p| nearest(p, &bp)).fold(0.0, f64::max);
        let b = bp.iter().map(|&p| nearest(p, &bg)).fold(0.0, f64::max);
        a.max(b)
    };
    (boundf, hd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_single_disk_is_two_valued() {
        let spec = SceneSpec {
            size: 48,
            n_instances: (1, 1),
            shape_kinds: vec![ShapeKind::Disks],
            noise_sigma: 0.0,
            seed: 3,
            ..SceneSpec::default()
        };
        let s = gen_scene(&spec).unwrap();
        assert_eq!(s.placed, 1);
        for (&v, &g) in s.image.values().iter().zip(s.gt.values()) {
            assert_eq!(v, if g > 0.5 { 0.8 } else { 0.2 });
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec {
            shape_kinds: vec![ShapeKind::Rects, ShapeKind::Blobs],
            seed: 11,
            ..SceneSpec::default()
        };
        let a = gen_scene(&spec).unwrap();
        let b = gen_scene(&spec).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.gt, b.gt);
    }

    #[test]
    fn image_range_and_binary_gt() {
        for seed in 0..20 {
            let spec = SceneSpec {
                shape_kinds: vec![ShapeKind::Rects, ShapeKind::Disks, ShapeKind::Blobs],
                illumination_gradient: 0.6,
                noise_sigma: 0.2,
                seed,
                ..SceneSpec::default()
            };
            let s = gen_scene(&spec).unwrap();
            assert!(s.image.values().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.gt.values().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn crowded_scene_reports_shortfall() {
        let spec = SceneSpec {
            size: 16,
            n_instances: (40, 40),
            seed: 1,
            ..SceneSpec::default()
        };
        let s = gen_scene(&spec).unwrap();
        assert!(s.shortfall());
        assert!(s.placed < 40);
    }

    #[test]
    fn invalid_specs() {
        let same = SceneSpec {
            fg_intensity: 0.5,
            bg_intensity: 0.5,
            ..SceneSpec::default()
        };
        assert!(gen_scene(&same).is_err());
        let none = SceneSpec {
            shape_kinds: vec![],
            ..SceneSpec::default()
        };
        assert!(gen_scene(&none).is_err());
    }

    #[test]
    fn oracle_means_on_disk() {
        let s = disk_scene(64, 15.0, 0.9, 0.1);
        let phi = crate::maps::mask_to_sdm(&s.gt);
        // a narrow Heaviside approaches the hard-mask means
        let (m1, m2) = oracle_global_means(&s.image, &phi, 0.1);
        assert!(
            (m1 - 0.9).abs() < 0.05 && (m2 - 0.1).abs() < 0.01,
            "{m1} {m2}"
        );
        // the arctan tails leak exterior mass into m1 at eps = 1
        let (m1, m2) = oracle_global_means(&s.image, &phi, 1.0);
        assert!(m1 > 0.7 && m1 < 0.9 && (m2 - 0.1).abs() < 0.02, "{m1} {m2}");
    }
}
