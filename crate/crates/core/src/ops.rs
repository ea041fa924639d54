//! The operation set shared by eager grids and tape variables.
//!
//! Engine code (level-set evolution, losses, the predictor) is written once
//! against [`FieldOps`]; running it on [`Grid`] evaluates eagerly, running
//! it on [`crate::autodiff::Var`] records the same computation for reverse
//! mode. Both paths call the same `fields` kernels, so forward values agree
//! bit for bit.

use crate::error::Result;
use crate::fields::{self, Axis, BinaryOp, Grid, PadMode, Unary};

pub trait FieldOps: Clone + Sized {
    fn dims(&self) -> (usize, usize);

    fn binary(&self, other: &Self, op: BinaryOp) -> Result<Self>;

    fn scale(&self, c: f64) -> Self;

    fn shift(&self, c: f64) -> Self;

    fn unary(&self, u: Unary) -> Self;

    fn central_diff(&self, axis: Axis, pad: PadMode) -> Result<Self>;

    fn second_diff(&self, axis: Axis, pad: PadMode) -> Result<Self>;

    fn box_mean(&self, f: usize, pad: PadMode) -> Self;

    fn conv3x3(&self, kernel: &Self, pad: PadMode) -> Result<Self>;

    /// Sum of all values as a 1x1 field.
    fn sum(&self) -> Self;

    /// Mean of all values as a 1x1 field.
    fn mean(&self) -> Self;

    /// Expands a 1x1 field to `height x width`.
    fn broadcast(&self, height: usize, width: usize) -> Result<Self>;

    /// A constant in the same evaluation context as `self`.
    fn lift(&self, g: Grid) -> Self;

    /// Copy of the current value.
    fn to_grid(&self) -> Grid;

    fn add(&self, o: &Self) -> Result<Self> {
        self.binary(o, BinaryOp::Add)
    }

    fn sub(&self, o: &Self) -> Result<Self> {
        self.binary(o, BinaryOp::Sub)
    }

    fn mul(&self, o: &Self) -> Result<Self> {
        self.binary(o, BinaryOp::Mul)
    }

    /// Guarded division `self / (o + DIV_GUARD)`.
    fn div(&self, o: &Self) -> Result<Self> {
        self.binary(o, BinaryOp::Div)
    }

    fn exp(&self) -> Self {
        self.unary(Unary::Exp)
    }

    fn ln(&self) -> Self {
        self.unary(Unary::Ln)
    }

    fn tanh(&self) -> Self {
        self.unary(Unary::Tanh)
    }

    fn relu(&self) -> Self {
        self.unary(Unary::Relu)
    }

    fn sigmoid(&self) -> Self {
        self.unary(Unary::Sigmoid)
    }

    fn arctan(&self) -> Self {
        self.unary(Unary::Arctan)
    }

    fn sqrt(&self) -> Self {
        self.unary(Unary::Sqrt)
    }

    fn abs(&self) -> Self {
        self.unary(Unary::Abs)
    }

    fn square(&self) -> Self {
        self.unary(Unary::Square)
    }

    fn recip(&self) -> Self {
        self.unary(Unary::Recip)
    }

    fn powf(&self, p: f64) -> Self {
        self.unary(Unary::Powf(p))
    }

    fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.unary(Unary::Clamp(lo, hi))
    }

    /// `1 - self`
    fn one_minus(&self) -> Self {
        self.scale(-1.0).shift(1.0)
    }

    fn mul_grid(&self, g: &Grid) -> Result<Self> {
        self.mul(&self.lift(g.clone()))
    }

    /// Broadcasts a 1x1 field to the shape of `like`.
    fn broadcast_like(&self, like: &Self) -> Result<Self> {
        let (h, w) = like.dims();
        self.broadcast(h, w)
    }

    /// Scalar value of a 1x1 field (first value otherwise).
    fn item(&self) -> f64 {
        self.to_grid().values()[0]
    }
}

impl FieldOps for Grid {
    fn dims(&self) -> (usize, usize) {
        Grid::dims(self)
    }

    fn binary(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        fields::elementwise(self, other, op)
    }

    fn scale(&self, c: f64) -> Self {
        Grid::scale(self, c)
    }

    fn shift(&self, c: f64) -> Self {
        Grid::shift(self, c)
    }

    fn unary(&self, u: Unary) -> Self {
        self.apply(u)
    }

    fn central_diff(&self, axis: Axis, pad: PadMode) -> Result<Self> {
        fields::central_diff(self, axis, pad)
    }

    fn second_diff(&self, axis: Axis, pad: PadMode) -> Result<Self> {
        fields::second_diff(self, axis, pad)
    }

    fn box_mean(&self, f: usize, pad: PadMode) -> Self {
        fields::box_mean(self, f, pad)
    }

    fn conv3x3(&self, kernel: &Self, pad: PadMode) -> Result<Self> {
        fields::conv3x3(self, kernel, pad)
    }

    fn sum(&self) -> Self {
        Grid::scalar(Grid::sum(self))
    }

    fn mean(&self) -> Self {
        Grid::scalar(Grid::mean(self))
    }

    fn broadcast(&self, height: usize, width: usize) -> Result<Self> {
        broadcast_grid(self, height, width)
    }

    fn lift(&self, g: Grid) -> Self {
        g
    }

    fn to_grid(&self) -> Grid {
        self.clone()
    }
}

pub(crate) fn broadcast_grid(g: &Grid, height: usize, width: usize) -> Result<Grid> {
    if !g.is_scalar() {
        return Err(crate::error::Error::DimensionMismatch(
            g.height(),
            g.width(),
            1,
            1,
        ));
    }
    Ok(Grid::filled(height, width, g.values()[0]))
}
