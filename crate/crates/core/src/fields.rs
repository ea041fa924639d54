//! Dense 2D scalar fields and the stencil, pooling and pointwise primitives
//! the rest of the engine is built from.
//!
//! Axis convention: `x` runs along columns (index `j`), `y` along rows
//! (index `i`). Grid spacing is one pixel in both directions.

use crate::error::{Error, Result};

/// Guard added to every denominator that could vanish.
pub const DIV_GUARD: f64 = 1e-8;

/// Row-major dense 2D field of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

/// Boundary handling for stencils and pooling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-range reads return the nearest in-range pixel.
    #[default]
    Replicate,
    /// Out-of-range reads return zero.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    /// `a / (b + DIV_GUARD)`
    Div,
}

/// Pointwise scalar functions shared by the eager and taped paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Ln,
    Tanh,
    Relu,
    Sigmoid,
    Arctan,
    Sqrt,
    Abs,
    Square,
    Recip,
    Powf(f64),
    Clamp(f64, f64),
}

impl Unary {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Arctan => x.atan(),
            Unary::Sqrt => x.sqrt(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Recip => 1.0 / x,
            Unary::Powf(p) => x.powf(p),
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
        }
    }

    /// Derivative at `x`, given the already computed output `y = eval(x)`.
    /// Kinks (relu and abs at 0, clamp at its bounds, sqrt at 0) take
    /// subgradient 0.
    pub fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Arctan => 1.0 / (1.0 + x * x),
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Recip => -y * y,
            Unary::Powf(p) => p * x.powf(p - 1.0),
            Unary::Clamp(lo, hi) => {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Grid {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidGrid(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::InvalidGrid(format!(
                "expected {} values for {height}x{width}, got {}",
                height * width,
                values.len()
            )));
        }
        Ok(Grid {
            height,
            width,
            values,
        })
    }

    /// Panics on zero dimensions.
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Grid {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    /// Builds a grid from `f(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        Grid {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.width + j] = v;
    }

    pub fn is_scalar(&self) -> bool {
        self.height == 1 && self.width == 1
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_dims(&self, other: &Grid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(
                self.height,
                self.width,
                other.height,
                other.width,
            ));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.values.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn apply(&self, u: Unary) -> Grid {
        self.map(|v| u.eval(v))
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.same_dims(other)?;
        Ok(Grid {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: f64) -> Grid {
        self.map(|v| v * c)
    }

    pub fn shift(&self, c: f64) -> Grid {
        self.map(|v| v + c)
    }

    /// Rotates the grid 90 degrees counter-clockwise.
    pub fn rot90(&self) -> Grid {
        let (h, w) = self.dims();
        Grid::from_fn(w, h, |i, j| self.get(j, w - 1 - i))
    }

    /// Resolves a possibly out-of-range coordinate to a flat index under `pad`.
    /// `None` means the read yields zero.
    #[inline]
    pub(crate) fn padded_index(&self, i: isize, j: isize, pad: PadMode) -> Option<usize> {
        let (h, w) = (self.height as isize, self.width as isize);
        match pad {
            PadMode::Replicate => {
                let ii = i.clamp(0, h - 1) as usize;
                let jj = j.clamp(0, w - 1) as usize;
                Some(ii * self.width + jj)
            }
            PadMode::Zero => {
                if i < 0 || j < 0 || i >= h || j >= w {
                    None
                } else {
                    Some(i as usize * self.width + j as usize)
                }
            }
        }
    }

    #[inline]
    pub(crate) fn sample(&self, i: isize, j: isize, pad: PadMode) -> f64 {
        self.padded_index(i, j, pad).map_or(0.0, |k| self.values[k])
    }

    fn require_min(&self, min: usize) -> Result<()> {
        if self.height < min || self.width < min {
            return Err(Error::GridTooSmall {
                height: self.height,
                width: self.width,
                min,
            });
        }
        Ok(())
    }
}

pub fn elementwise(g: &Grid, h: &Grid, op: BinaryOp) -> Result<Grid> {
    match op {
        BinaryOp::Add => g.zip_map(h, |a, b| a + b),
        BinaryOp::Sub => g.zip_map(h, |a, b| a - b),
        BinaryOp::Mul => g.zip_map(h, |a, b| a * b),
        BinaryOp::Div => g.zip_map(h, |a, b| a / (b + DIV_GUARD)),
    }
}

/// Offsets `(di, dj)` read by a first-difference stencil along `axis`.
#[inline]
fn axis_step(axis: Axis) -> (isize, isize) {
    match axis {
        Axis::X => (0, 1),
        Axis::Y => (1, 0),
    }
}

/// Central first difference `(g[+1] - g[-1]) / 2` along `axis`.
pub fn central_diff(g: &Grid, axis: Axis, pad: PadMode) -> Result<Grid> {
    g.require_min(2)?;
    let (di, dj) = axis_step(axis);
    let mut out = Grid::zeros(g.height, g.width);
    for i in 0..g.height as isize {
        for j in 0..g.width as isize {
            let fwd = g.sample(i + di, j + dj, pad);
            let bwd = g.sample(i - di, j - dj, pad);
            out.values[i as usize * g.width + j as usize] = (fwd - bwd) * 0.5;
        }
    }
    Ok(out)
}

/// Three-point second difference `g[+1] - 2g + g[-1]` along `axis`.
pub fn second_diff(g: &Grid, axis: Axis, pad: PadMode) -> Result<Grid> {
    g.require_min(3)?;
    let (di, dj) = axis_step(axis);
    let mut out = Grid::zeros(g.height, g.width);
    for i in 0..g.height as isize {
        for j in 0..g.width as isize {
            let k = i as usize * g.width + j as usize;
            let fwd = g.sample(i + di, j + dj, pad);
            let bwd = g.sample(i - di, j - dj, pad);
            out.values[k] = fwd - 2.0 * g.values[k] + bwd;
        }
    }
    Ok(out)
}

/// `(gxx, gyy, gxy)`; the cross derivative is the central difference applied
/// along x then y.
pub fn second_diffs(g: &Grid, pad: PadMode) -> Result<(Grid, Grid, Grid)> {
    let gxx = second_diff(g, Axis::X, pad)?;
    let gyy = second_diff(g, Axis::Y, pad)?;
    let gxy = central_diff(&central_diff(g, Axis::X, pad)?, Axis::Y, pad)?;
    Ok((gxx, gyy, gxy))
}

fn box_pass(g: &Grid, f: usize, axis: Axis, pad: PadMode) -> Grid {
    let (di, dj) = axis_step(axis);
    let inv = 1.0 / (2 * f + 1) as f64;
    let f = f as isize;
    let mut out = Grid::zeros(g.height, g.width);
    for i in 0..g.height as isize {
        for j in 0..g.width as isize {
            let mut acc = 0.0;
            for k in -f..=f {
                acc += g.sample(i + k * di, j + k * dj, pad);
            }
            out.values[i as usize * g.width + j as usize] = acc * inv;
        }
    }
    out
}

fn box_pass_transpose(grad: &Grid, f: usize, axis: Axis, pad: PadMode) -> Grid {
    let (di, dj) = axis_step(axis);
    let inv = 1.0 / (2 * f + 1) as f64;
    let f = f as isize;
    let mut out = Grid::zeros(grad.height, grad.width);
    for i in 0..grad.height as isize {
        for j in 0..grad.width as isize {
            let gv = grad.values[i as usize * grad.width + j as usize] * inv;
            if gv == 0.0 {
                continue;
            }
            for k in -f..=f {
                if let Some(idx) = grad.padded_index(i + k * di, j + k * dj, pad) {
                    out.values[idx] += gv;
                }
            }
        }
    }
    out
}

/// Mean over the `(2f+1) x (2f+1)` window centred on each pixel. Padded
/// pixels count towards the window size under both pad modes.
pub fn box_mean(g: &Grid, f: usize, pad: PadMode) -> Grid {
    if f == 0 {
        return g.clone();
    }
    box_pass(&box_pass(g, f, Axis::X, pad), f, Axis::Y, pad)
}

/// Transpose of [`box_mean`] as a linear map.
pub(crate) fn box_mean_transpose(grad: &Grid, f: usize, pad: PadMode) -> Grid {
    if f == 0 {
        return grad.clone();
    }
    box_pass_transpose(&box_pass_transpose(grad, f, Axis::Y, pad), f, Axis::X, pad)
}

/// Transpose of the first-difference stencil along `axis`.
pub(crate) fn central_diff_transpose(grad: &Grid, axis: Axis, pad: PadMode) -> Grid {
    let (di, dj) = axis_step(axis);
    let mut out = Grid::zeros(grad.height, grad.width);
    for i in 0..grad.height as isize {
        for j in 0..grad.width as isize {
            let gv = grad.values[i as usize * grad.width + j as usize] * 0.5;
            if let Some(k) = grad.padded_index(i + di, j + dj, pad) {
                out.values[k] += gv;
            }
            if let Some(k) = grad.padded_index(i - di, j - dj, pad) {
                out.values[k] -= gv;
            }
        }
    }
    out
}

pub(crate) fn second_diff_transpose(grad: &Grid, axis: Axis, pad: PadMode) -> Grid {
    let (di, dj) = axis_step(axis);
    let mut out = Grid::zeros(grad.height, grad.width);
    for i in 0..grad.height as isize {
        for j in 0..grad.width as isize {
            let k0 = i as usize * grad.width + j as usize;
            let gv = grad.values[k0];
            out.values[k0] -= 2.0 * gv;
            if let Some(k) = grad.padded_index(i + di, j + dj, pad) {
                out.values[k] += gv;
            }
            if let Some(k) = grad.padded_index(i - di, j - dj, pad) {
                out.values[k] += gv;
            }
        }
    }
    out
}

/// 3x3 cross-correlation: `out(i,j) = sum_{a,b} k(a,b) * g(i+a-1, j+b-1)`.
pub fn conv3x3(g: &Grid, kernel: &Grid, pad: PadMode) -> Result<Grid> {
    if kernel.dims() != (3, 3) {
        return Err(Error::InvalidParameter(format!(
            "conv kernel must be 3x3, got {}x{}",
            kernel.height, kernel.width
        )));
    }
    let mut out = Grid::zeros(g.height, g.width);
    for i in 0..g.height as isize {
        for j in 0..g.width as isize {
            let mut acc = 0.0;
            for a in 0..3isize {
                for b in 0..3isize {
                    let kv = kernel.values[(a * 3 + b) as usize];
                    acc += kv * g.sample(i + a - 1, j + b - 1, pad);
                }
            }
            out.values[i as usize * g.width + j as usize] = acc;
        }
    }
    Ok(out)
}

/// Adjoints of [`conv3x3`] with respect to the input and the kernel.
pub(crate) fn conv3x3_transpose(
    grad: &Grid,
    input: &Grid,
    kernel: &Grid,
    pad: PadMode,
) -> (Grid, Grid) {
    let mut d_in = Grid::zeros(input.height, input.width);
    let mut d_k = Grid::zeros(3, 3);
    for i in 0..grad.height as isize {
        for j in 0..grad.width as isize {
            let gv = grad.values[i as usize * grad.width + j as usize];
            if gv == 0.0 {
                continue;
            }
            for a in 0..3isize {
                for b in 0..3isize {
                    let t = (a * 3 + b) as usize;
                    if let Some(k) = input.padded_index(i + a - 1, j + b - 1, pad) {
                        d_in.values[k] += gv * kernel.values[t];
                        d_k.values[t] += gv * input.values[k];
                    }
                }
            }
        }
    }
    (d_in, d_k)
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Gradient magnitude `sqrt(Sx^2 + Sy^2)` with the 3x3 Sobel kernels.
pub fn sobel_magnitude(g: &Grid, pad: PadMode) -> Result<Grid> {
    g.require_min(3)?;
    let mut out = Grid::zeros(g.height, g.width);
    for i in 0..g.height as isize {
        for j in 0..g.width as isize {
            let (mut sx, mut sy) = (0.0, 0.0);
            for a in 0..3 {
                for b in 0..3 {
                    let v = g.sample(i + a as isize - 1, j + b as isize - 1, pad);
                    sx += SOBEL_X[a][b] * v;
                    sy += SOBEL_Y[a][b] * v;
                }
            }
            out.values[i as usize * g.width + j as usize] = (sx * sx + sy * sy).sqrt();
        }
    }
    Ok(out)
}
