use acmseg_core::autodiff::{grad_check, Tape, Var};
use acmseg_core::fields::{self, BinaryOp, Unary};
use acmseg_core::ops::FieldOps;
use acmseg_core::{Axis, Grid, PadMode, Result};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const PRIMITIVE_TOL: f64 = 1e-4;

/// Values in `[lo, hi]` with a random sign, so kinks at zero are avoided.
fn signed(h: usize, w: usize, seed: u64, lo: f64, hi: f64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::from_fn(h, w, |_, _| {
        let m = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(h: usize, w: usize, seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::from_fn(h, w, |_, _| rng.random_range(0.5..2.0))
}

/// Checks `sum(weights * P(x))` for a unary program `P`.
fn check_unary<F>(name: &str, x: Grid, f: F)
where
    F: for<'t> Fn(&Var<'t>) -> Result<Var<'t>> + Sync,
{
    let r = grad_check(
        |_, v| {
            let out = f(&v[0])?;
            let (h, w) = out.dims();
            out.mul_grid(&signed(h, w, 99, 0.5, 1.5)).map(|p| p.sum())
        },
        &[x],
        H,
        usize::MAX,
        0,
    )
    .unwrap();
    assert!(
        r.max_rel_error < PRIMITIVE_TOL,
        "{name}: max relative error {:.3e} at {:?}",
        r.max_rel_error,
        r.worst
    );
}

#[test]
fn unary_primitives() {
    let s = || signed(8, 8, 1, 0.2, 1.0);
    let p = || positive(8, 8, 2);
    check_unary("exp", s(), |v| Ok(v.exp()));
    check_unary("ln", p(), |v| Ok(v.ln()));
    check_unary("tanh", s(), |v| Ok(v.tanh()));
    check_unary("relu", s(), |v| Ok(v.relu()));
    check_unary("sigmoid", s(), |v| Ok(v.sigmoid()));
    check_unary("arctan", s(), |v| Ok(v.arctan()));
    check_unary("sqrt", p(), |v| Ok(v.sqrt()));
    check_unary("abs", s(), |v| Ok(v.abs()));
    check_unary("square", s(), |v| Ok(v.square()));
    check_unary("recip", p(), |v| Ok(v.recip()));
    check_unary("powf", p(), |v| Ok(v.powf(-1.5)));
    check_unary("clamp", s(), |v| Ok(v.clamp(-0.5, 0.6)));
    check_unary("scale", s(), |v| Ok(v.scale(-2.5)));
    check_unary("shift", s(), |v| Ok(v.shift(0.75)));
}

#[test]
fn stencil_primitives() {
    for pad in [PadMode::Replicate, PadMode::Zero] {
        let x = || signed(8, 7, 3, 0.0, 1.0);
        check_unary("dx", x(), move |v| v.central_diff(Axis::X, pad));
        check_unary("dy", x(), move |v| v.central_diff(Axis::Y, pad));
        check_unary("dxx", x(), move |v| v.second_diff(Axis::X, pad));
        check_unary("dyy", x(), move |v| v.second_diff(Axis::Y, pad));
        check_unary("box", x(), move |v| Ok(v.box_mean(2, pad)));
        let k = signed(3, 3, 4, 0.1, 1.0);
        check_unary("conv image", x(), move |v| {
            let kv = v.lift(k.clone());
            v.conv3x3(&kv, pad)
        });
        let image = x();
        check_unary("conv kernel", signed(3, 3, 5, 0.1, 1.0), move |k| {
            k.lift(image.clone()).conv3x3(k, pad)
        });
    }
}

#[test]
fn reductions_and_broadcast() {
    check_unary("sum", signed(5, 6, 6, 0.1, 1.0), |v| {
        v.sum().broadcast(5, 6)
    });
    check_unary("mean", signed(5, 6, 7, 0.1, 1.0), |v| {
        v.mean().broadcast(5, 6)
    });
}

#[test]
fn binary_primitives() {
    let a = signed(6, 6, 10, 0.2, 1.0);
    let b = positive(6, 6, 11);
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        let r = grad_check(
            |_, v| Ok(v[0].binary(&v[1], op)?.square().sum()),
            &[a.clone(), b.clone()],
            H,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(r.max_rel_error < PRIMITIVE_TOL, "{op:?}: {:.3e}", r.max_rel_error);
    }
}

#[test]
fn forward_matches_eager_bitwise() {
    let a = signed(7, 9, 12, 0.0, 2.0);
    let b = positive(7, 9, 13);
    let tape = Tape::new();
    let x = tape.leaf(a.clone());
    let y = tape.leaf(b.clone());
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        assert_eq!(x.binary(&y, op).unwrap().value(), fields::elementwise(&a, &b, op).unwrap());
    }
    for u in [Unary::Exp, Unary::Tanh, Unary::Sigmoid, Unary::Arctan, Unary::Abs, Unary::Relu] {
        assert_eq!(x.unary(u).value(), a.map(|v| u.eval(v)));
    }
    for pad in [PadMode::Replicate, PadMode::Zero] {
        for axis in [Axis::X, Axis::Y] {
            assert_eq!(
                x.central_diff(axis, pad).unwrap().value(),
                fields::central_diff(&a, axis, pad).unwrap()
            );
        }
        assert_eq!(x.box_mean(3, pad).value(), fields::box_mean(&a, 3, pad));
    }
}

fn program<'t>(v: &[Var<'t>]) -> Result<Var<'t>> {
    Ok(v[0].mul(&v[1])?.tanh().box_mean(1, PadMode::Replicate).square().sum())
}

fn other<'t>(v: &[Var<'t>]) -> Result<Var<'t>> {
    Ok(v[0].sub(&v[1])?.exp().central_diff(Axis::X, PadMode::Zero)?.abs().sum())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(seed in 0u64..1000, alpha in -2.0..2.0f64, beta in -2.0..2.0f64) {
        let a = signed(5, 5, seed, 0.1, 1.0);
        let b = signed(5, 5, seed + 1, 0.1, 1.0);
        let run = |which: u8| -> Vec<Grid> {
            let tape = Tape::new();
            let v = [tape.leaf(a.clone()), tape.leaf(b.clone())];
            let loss = match which {
                0 => program(&v).unwrap(),
                1 => other(&v).unwrap(),
                _ => program(&v)
                    .unwrap()
                    .scale(alpha)
                    .add(&other(&v).unwrap().scale(beta))
                    .unwrap(),
            };
            let g = tape.backward(&loss).unwrap();
            v.iter().map(|x| g.get(x)).collect()
        };
        let (g1, g2, g) = (run(0), run(1), run(2));
        for k in 0..2 {
            for ((p, q), r) in g1[k].values().iter().zip(g2[k].values()).zip(g[k].values()) {
                let expect = alpha * p + beta * q;
                prop_assert!((r - expect).abs() <= 1e-10 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn replay_is_deterministic(seed in 0u64..1000) {
        let a = signed(6, 4, seed, 0.1, 1.0);
        let b = signed(6, 4, seed + 7, 0.1, 1.0);
        let run = || {
            let tape = Tape::new();
            let v = [tape.leaf(a.clone()), tape.leaf(b.clone())];
            let loss = program(&v).unwrap();
            let g = tape.backward(&loss).unwrap();
            (loss.item(), g.get(&v[0]), g.get(&v[1]))
        };
        prop_assert_eq!(run(), run());
    }
}
