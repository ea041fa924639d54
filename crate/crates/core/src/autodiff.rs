//! Reverse-mode differentiation over whole-grid operations.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in an
//! append-only list. Node ids are therefore topologically ordered, and
//! [`Tape::backward`] walks the list once in reverse, applying the transpose
//! of each primitive's linearization.
//!
//! ```
//! use acmseg_core::autodiff::Tape;
//! use acmseg_core::fields::Grid;
//! use acmseg_core::ops::FieldOps;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Grid::filled(2, 2, 3.0));
//! let loss = x.mul(&x).unwrap().sum();
//! let grads = tape.backward(&loss).unwrap();
//! assert!(grads.get(&x).values().iter().all(|&g| g == 6.0));
//! ```

use std::cell::RefCell;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{self, Axis, BinaryOp, Grid, PadMode, Unary, DIV_GUARD};
use crate::ops::{broadcast_grid, FieldOps};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Unary(Unary, usize),
    CentralDiff(usize, Axis, PadMode),
    SecondDiff(usize, Axis, PadMode),
    BoxMean(usize, usize, PadMode),
    Conv3x3(usize, usize, PadMode),
    Sum(usize),
    Mean(usize),
    Broadcast(usize),
}

struct Node {
    op: Op,
    value: Grid,
}

/// Append-only record of grid operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    dims: (usize, usize),
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("dims", &self.dims)
            .finish()
    }
}

/// Adjoints of every node from one backward pass.
pub struct Gradients {
    adjoints: Vec<Option<Grid>>,
    dims: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` does not reach the loss.
    pub fn get(&self, v: &Var<'_>) -> Grid {
        match self.adjoints.get(v.id).and_then(|a| a.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let (h, w) = self.dims[v.id];
                Grid::zeros(h, w)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Constants are leaves whose gradient is ignored.
    pub fn leaf(&self, value: Grid) -> Var<'_> {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.leaf(Grid::scalar(value))
    }

    pub fn value(&self, v: &Var<'_>) -> Grid {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn push(&self, op: Op, value: Grid) -> Var<'_> {
        let dims = value.dims();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, value });
        Var {
            tape: self,
            id,
            dims,
        }
    }

    fn check(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn unary_node(
        &self,
        a: &Var<'_>,
        op: Op,
        f: impl FnOnce(&Grid) -> Result<Grid>,
    ) -> Result<Var<'_>> {
        self.check(a)?;
        let out = {
            let nodes = self.nodes.borrow();
            f(&nodes[a.id].value)?
        };
        Ok(self.push(op, out))
    }

    /// Runs reverse accumulation from a 1x1 `loss`.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients> {
        self.check(loss)?;
        if loss.dims != (1, 1) {
            return Err(Error::NonScalarLoss(loss.dims.0, loss.dims.1));
        }
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Grid>> = vec![None; nodes.len()];
        adj[loss.id] = Some(Grid::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            match node.op {
                Op::Leaf => {
                    adj[id] = Some(g);
                    continue;
                }
                Op::Binary(op, a, b) => {
                    let va = &nodes[a].value;
                    let vb = &nodes[b].value;
                    let (ga, gb) = match op {
                        BinaryOp::Add => (g.clone(), g),
                        BinaryOp::Sub => (g.clone(), g.scale(-1.0)),
                        BinaryOp::Mul => (
                            fields::elementwise(&g, vb, BinaryOp::Mul)?,
                            fields::elementwise(&g, va, BinaryOp::Mul)?,
                        ),
                        BinaryOp::Div => {
                            let inv = vb.map(|b| 1.0 / (b + DIV_GUARD));
                            let ga = fields::elementwise(&g, &inv, BinaryOp::Mul)?;
                            let mut gb = ga.clone();
                            for ((d, &x), &r) in gb
                                .values_mut()
                                .iter_mut()
                                .zip(va.values())
                                .zip(inv.values())
                            {
                                *d *= -x * r;
                            }
                            (ga, gb)
                        }
                    };
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut adj, a, g.scale(c)),
                Op::Shift(a) => accumulate(&mut adj, a, g),
                Op::Unary(u, a) => {
                    let x = &nodes[a].value;
                    let y = &node.value;
                    let mut ga = g;
                    for ((d, &xv), &yv) in
                        ga.values_mut().iter_mut().zip(x.values()).zip(y.values())
                    {
                        *d *= u.deriv(xv, yv);
                    }
                    accumulate(&mut adj, a, ga);
                }
                Op::CentralDiff(a, axis, pad) => {
                    accumulate(&mut adj, a, fields::central_diff_transpose(&g, axis, pad))
                }
                Op::SecondDiff(a, axis, pad) => {
                    accumulate(&mut adj, a, fields::second_diff_transpose(&g, axis, pad))
                }
                Op::BoxMean(a, f, pad) => {
                    accumulate(&mut adj, a, fields::box_mean_transpose(&g, f, pad))
                }
                Op::Conv3x3(x, k, pad) => {
                    let (gx, gk) =
                        fields::conv3x3_transpose(&g, &nodes[x].value, &nodes[k].value, pad);
                    accumulate(&mut adj, x, gx);
                    accumulate(&mut adj, k, gk);
                }
                Op::Sum(a) => {
                    let (h, w) = nodes[a].value.dims();
                    accumulate(&mut adj, a, Grid::filled(h, w, g.values()[0]));
                }
                Op::Mean(a) => {
                    let (h, w) = nodes[a].value.dims();
                    let n = (h * w) as f64;
                    accumulate(&mut adj, a, Grid::filled(h, w, g.values()[0] / n));
                }
                Op::Broadcast(a) => accumulate(&mut adj, a, Grid::scalar(g.sum())),
            }
        }
        Ok(Gradients {
            adjoints: adj,
            dims: nodes.iter().map(|n| n.value.dims()).collect(),
        })
    }
}

fn accumulate(adj: &mut [Option<Grid>], id: usize, g: Grid) {
    match &mut adj[id] {
        Some(acc) => {
            for (a, b) in acc.values_mut().iter_mut().zip(g.values()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Grid {
        self.tape.value(self)
    }

    /// Records all three second derivatives `(xx, yy, xy)`.
    pub fn second_diffs(&self, pad: PadMode) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let xx = FieldOps::second_diff(self, Axis::X, pad)?;
        let yy = FieldOps::second_diff(self, Axis::Y, pad)?;
        let xy =
            FieldOps::central_diff(&FieldOps::central_diff(self, Axis::X, pad)?, Axis::Y, pad)?;
        Ok((xx, yy, xy))
    }
}

impl<'t> FieldOps for Var<'t> {
    fn dims(&self) -> (usize, usize) {
        self.dims
    }

    fn binary(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        let tape = self.tape;
        tape.check(other)?;
        tape.check(self)?;
        let out = {
            let nodes = tape.nodes.borrow();
            fields::elementwise(&nodes[self.id].value, &nodes[other.id].value, op)?
        };
        Ok(tape.push(Op::Binary(op, self.id, other.id), out))
    }

    fn scale(&self, c: f64) -> Self {
        let v = self.tape.nodes.borrow()[self.id].value.scale(c);
        self.tape.push(Op::Scale(self.id, c), v)
    }

    fn shift(&self, c: f64) -> Self {
        let v = self.tape.nodes.borrow()[self.id].value.shift(c);
        self.tape.push(Op::Shift(self.id), v)
    }

    fn unary(&self, u: Unary) -> Self {
        let v = self.tape.nodes.borrow()[self.id].value.apply(u);
        self.tape.push(Op::Unary(u, self.id), v)
    }

    fn central_diff(&self, axis: Axis, pad: PadMode) -> Result<Self> {
        self.tape
            .unary_node(self, Op::CentralDiff(self.id, axis, pad), |g| {
                fields::central_diff(g, axis, pad)
            })
    }

    fn second_diff(&self, axis: Axis, pad: PadMode) -> Result<Self> {
        self.tape
            .unary_node(self, Op::SecondDiff(self.id, axis, pad), |g| {
                fields::second_diff(g, axis, pad)
            })
    }

    fn box_mean(&self, f: usize, pad: PadMode) -> Self {
        let v = fields::box_mean(&self.tape.nodes.borrow()[self.id].value, f, pad);
        self.tape.push(Op::BoxMean(self.id, f, pad), v)
    }

    fn conv3x3(&self, kernel: &Self, pad: PadMode) -> Result<Self> {
        let tape = self.tape;
        tape.check(kernel)?;
        let out = {
            let nodes = tape.nodes.borrow();
            fields::conv3x3(&nodes[self.id].value, &nodes[kernel.id].value, pad)?
        };
        Ok(tape.push(Op::Conv3x3(self.id, kernel.id, pad), out))
    }

    fn sum(&self) -> Self {
        let s = self.tape.nodes.borrow()[self.id].value.sum();
        self.tape.push(Op::Sum(self.id), Grid::scalar(s))
    }

    fn mean(&self) -> Self {
        let s = self.tape.nodes.borrow()[self.id].value.mean();
        self.tape.push(Op::Mean(self.id), Grid::scalar(s))
    }

    fn broadcast(&self, height: usize, width: usize) -> Result<Self> {
        self.tape.unary_node(self, Op::Broadcast(self.id), |g| {
            broadcast_grid(g, height, width)
        })
    }

    fn lift(&self, g: Grid) -> Self {
        self.tape.leaf(g)
    }

    fn to_grid(&self) -> Grid {
        self.value()
    }
}

/// Outcome of comparing tape gradients against central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(leaf index, flat coordinate, tape gradient, finite difference)` of
    /// the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Relative error used by [`grad_check`].
pub fn relative_error(tape_grad: f64, fd: f64) -> f64 {
    (tape_grad - fd).abs() / tape_grad.abs().max(fd.abs()).max(1e-6)
}

/// Compares the tape gradient of `program` with `(L(t + h e_k) - L(t - h e_k)) / 2h`
/// at up to `samples` randomly chosen leaf coordinates (all of them when
/// fewer exist). `program` must be deterministic and return a 1x1 loss.
pub fn grad_check<F>(
    program: F,
    leaves: &[Grid],
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>> + Sync,
{
    if h <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "step h must be positive, got {h}"
        )));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = leaves.iter().map(|g| tape.leaf(g.clone())).collect();
    let loss = program(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    let tape_grads: Vec<Grid> = vars.iter().map(|v| grads.get(v)).collect();

    let mut coords: Vec<(usize, usize)> = Vec::new();
    for (li, g) in leaves.iter().enumerate() {
        coords.extend((0..g.len()).map(|k| (li, k)));
    }
    let chosen: Vec<(usize, usize)> = if coords.len() <= samples {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, coords.len(), samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let eval = |li: usize, k: usize, delta: f64| -> Result<f64> {
        let mut shifted = leaves.to_vec();
        shifted[li].values_mut()[k] += delta;
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = shifted.into_iter().map(|g| tape.leaf(g)).collect();
        let loss = program(&tape, &vars)?;
        Ok(loss.item())
    };

    let results: Vec<Result<(usize, usize, f64, f64)>> = chosen
        .par_iter()
        .map(|&(li, k)| {
            let plus = eval(li, k, h)?;
            let minus = eval(li, k, -h)?;
            let fd = (plus - minus) / (2.0 * h);
            Ok((li, k, tape_grads[li].values()[k], fd))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for r in results {
        let (li, k, tg, fd) = r?;
        let e = relative_error(tg, fd);
        report.checked += 1;
        if report.worst.is_none() || e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = Some((li, k, tg, fd));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(h: usize, w: usize, s: u64) -> Grid {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        Grid::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_eager() {
        let tape = Tape::new();
        let a = pseudo(4, 5, 1);
        let b = pseudo(4, 5, 2);
        let x = tape.leaf(a.clone());
        let y = tape.leaf(b.clone());
        assert_eq!(
            x.add(&y).unwrap().value(),
            fields::elementwise(&a, &b, BinaryOp::Add).unwrap()
        );
        assert_eq!(
            x.box_mean(2, PadMode::Replicate).value(),
            fields::box_mean(&a, 2, PadMode::Replicate)
        );
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Grid::filled(3, 3, 1.5));
        let loss = x.mul(&x).unwrap().sum();
        let g = tape.backward(&loss).unwrap().get(&x);
        assert!(g.values().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn sum_and_bilinear() {
        let tape = Tape::new();
        let a = pseudo(3, 4, 3);
        let b = pseudo(3, 4, 4);
        let x = tape.leaf(a.clone());
        let y = tape.leaf(b.clone());
        let g = tape.backward(&x.sum()).unwrap();
        assert!(g.get(&x).values().iter().all(|&v| v == 1.0));
        assert!(g.get(&y).values().iter().all(|&v| v == 0.0));

        let loss = x.mul(&y).unwrap().sum();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x), b);
        assert_eq!(g.get(&y), a);
    }

    #[test]
    fn box_mean_window_membership() {
        let tape = Tape::new();
        let x = tape.leaf(Grid::zeros(7, 7));
        let loss = x.box_mean(1, PadMode::Zero).sum();
        let g = tape.backward(&loss).unwrap().get(&x);
        for i in 1..6 {
            for j in 1..6 {
                assert!((g.get(i, j) - 1.0).abs() < 1e-14);
            }
        }
        assert!((g.get(0, 0) - 4.0 / 9.0).abs() < 1e-14);
    }

    #[test]
    fn errors() {
        let tape = Tape::new();
        let other = Tape::new();
        let x = tape.leaf(Grid::zeros(2, 2));
        let y = other.leaf(Grid::zeros(2, 2));
        assert!(matches!(x.add(&y), Err(Error::ForeignVar)));
        assert!(matches!(tape.backward(&x), Err(Error::NonScalarLoss(2, 2))));
        let z = tape.leaf(Grid::zeros(3, 2));
        assert!(matches!(x.mul(&z), Err(Error::DimensionMismatch(..))));
    }

    #[test]
    fn scalar_grad_check() {
        let r = grad_check(|_, v| v[0].mul(&v[0]), &[Grid::scalar(3.0)], 1e-4, 64, 0).unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
