//! Conversions between probability maps, signed distance maps, parameter
//! maps and edge maps.

use crate::error::{Error, Result};
use crate::fields::{sobel_magnitude, Axis, Grid, PadMode};
use crate::ops::FieldOps;

/// Distance reported where no seed pixel exists.
pub const EDT_SENTINEL: f64 = 1e9;

/// Lower bound applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// 1D squared distance transform of a sampled function by the lower
/// envelope of parabolas. `f[p]` is infinite where `p` is not a seed.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let seeds: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if seeds.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    // v: parabola apexes on the envelope, z: boundaries between them
    let mut v = vec![0usize; seeds.len()];
    let mut z = vec![0.0f64; seeds.len() + 1];
    let mut k = 0;
    v[0] = seeds[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &seeds[1..] {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                // z[0] is -inf, so this never underflows
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Exact Euclidean distance from every pixel to the nearest pixel where
/// `mask > 0.5`. A mask with no such pixel yields [`EDT_SENTINEL`]
/// everywhere.
pub fn edt(mask: &Grid) -> Grid {
    let (h, w) = mask.dims();
    let mut sq: Vec<f64> = mask
        .values()
        .iter()
        .map(|&v| if v > 0.5 { 0.0 } else { f64::INFINITY })
        .collect();

    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for j in 0..w {
        for i in 0..h {
            col[i] = sq[i * w + j];
        }
        edt_1d(&col, &mut col_out);
        for i in 0..h {
            sq[i * w + j] = col_out[i];
        }
    }
    let mut row_out = vec![0.0; w];
    for i in 0..h {
        edt_1d(&sq[i * w..(i + 1) * w], &mut row_out);
        sq[i * w..(i + 1) * w].copy_from_slice(&row_out);
    }
    let values = sq
        .into_iter()
        .map(|d| {
            if d.is_finite() {
                d.sqrt()
            } else {
                EDT_SENTINEL
            }
        })
        .collect();
    Grid::new(h, w, values).expect("dims preserved")
}

/// Signed distance map of `{prob > threshold}`: distance to the exterior
/// inside, minus distance to the interior outside.
pub fn prob_to_sdm(prob: &Grid, threshold: f64) -> Grid {
    let interior = prob.map(|p| if p > threshold { 1.0 } else { 0.0 });
    let exterior = interior.map(|v| 1.0 - v);
    let d_to_ext = edt(&exterior);
    let d_to_int = edt(&interior);
    let values = interior
        .values()
        .iter()
        .zip(d_to_ext.values().iter().zip(d_to_int.values()))
        .map(|(&inside, (&de, &di))| if inside > 0.5 { de } else { -di })
        .collect();
    Grid::new(prob.height(), prob.width(), values).expect("dims preserved")
}

/// Signed distance map of a binary mask (threshold 0.5).
pub fn mask_to_sdm(mask: &Grid) -> Grid {
    prob_to_sdm(mask, 0.5)
}

pub fn check_prob(prob: &Grid) -> Result<()> {
    if let Some(v) = prob.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidParameter(format!(
            "probability {v} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `l1 = exp((2 - Y) / (1 + Y))`, `l2 = exp((1 + Y) / (2 - Y))`.
pub fn lambda_maps(prob: &Grid) -> (Grid, Grid) {
    let l1 = prob.map(|y| ((2.0 - y) / (1.0 + y)).exp());
    let l2 = prob.map(|y| ((1.0 + y) / (2.0 - y)).exp());
    (l1, l2)
}

/// Binary edge ground truth: pixels with nonzero Sobel response.
pub fn edge_gt(mask: &Grid) -> Result<Grid> {
    Ok(sobel_magnitude(mask, PadMode::Replicate)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

/// Central-difference gradient magnitude `sqrt(gx^2 + gy^2)`.
pub fn gradient_magnitude<T: FieldOps>(g: &T, pad: PadMode) -> Result<T> {
    let gx = g.central_diff(Axis::X, pad)?;
    let gy = g.central_diff(Axis::Y, pad)?;
    Ok(gx.square().add(&gy.square())?.sqrt())
}

/// Index of the foreground class in `class_probs`.
pub const FOREGROUND: usize = 1;

/// Differentiable boundary strength of the foreground channel of a
/// temperature-`tau` Gumbel-softmax over `class_probs`.
///
/// `noise` holds one frozen Gumbel sample per class; `None` means zero noise.
pub fn soft_boundary<T: FieldOps>(
    class_probs: &[T],
    tau: f64,
    noise: Option<&[Grid]>,
) -> Result<T> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tau must be > 0, got {tau}"
        )));
    }
    if class_probs.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 classes, got {}",
            class_probs.len()
        )));
    }
    let dims = class_probs[0].dims();
    if let Some(c) = class_probs.iter().find(|c| c.dims() != dims) {
        let d = c.dims();
        return Err(Error::DimensionMismatch(dims.0, dims.1, d.0, d.1));
    }
    if let Some(n) = noise {
        if n.len() != class_probs.len() {
            return Err(Error::InvalidParameter(format!(
                "noise has {} channels, probs have {}",
                n.len(),
                class_probs.len()
            )));
        }
    }
    let mut total = Grid::zeros(dims.0, dims.1);
    for c in class_probs {
        for (t, v) in total.values_mut().iter_mut().zip(c.to_grid().values()) {
            *t += v;
        }
    }
    if let Some(v) = total.values().iter().find(|v| (**v - 1.0).abs() > 1e-5) {
        return Err(Error::InvalidParameter(format!(
            "class probabilities sum to {v}, expected 1"
        )));
    }

    let mut logits = Vec::with_capacity(class_probs.len());
    for (c, p) in class_probs.iter().enumerate() {
        let mut z = p.clamp(PROB_CLAMP, 1.0).ln();
        if let Some(n) = noise {
            z = z.add(&z.lift(n[c].clone()))?;
        }
        logits.push(z.scale(1.0 / tau));
    }
    // per-pixel max shift; softmax is invariant to it, so it is a constant
    let mut shift = Grid::filled(dims.0, dims.1, f64::NEG_INFINITY);
    for z in &logits {
        for (s, v) in shift.values_mut().iter_mut().zip(z.to_grid().values()) {
            *s = s.max(*v);
        }
    }
    let shift = logits[0].lift(shift);
    let mut exps = Vec::with_capacity(logits.len());
    for z in &logits {
        exps.push(z.sub(&shift)?.exp());
    }
    let mut denom = exps[0].clone();
    for e in &exps[1..] {
        denom = denom.add(e)?;
    }
    let fg = exps[FOREGROUND].mul(&denom.recip())?;
    gradient_magnitude(&fg, PadMode::Replicate)
}
