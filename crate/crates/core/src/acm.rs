//! Level-set active contour engine.
//!
//! The contour is the zero level set of `phi`, with the interior where
//! `phi > 0`. Each explicit Euler step moves `phi` by
//!
//! ```text
//! dphi/dt = delta(phi) * [ mu * kappa(phi) - R ]
//! D       = l1 * (I - m1)^2 - l2 * (I - m2)^2
//! F       = delta(phi) * D
//! ```
//!
//! where `kappa` is the curvature of the level lines and `m1`/`m2` are the
//! Heaviside-weighted interior/exterior means. In localized mode the means
//! are taken over the `(2f+1)^2` window around each pixel and `R` sums `F`
//! over that window. In global mode the means cover the whole image and
//! `R = D` pointwise, which is the classic two-phase piecewise-constant
//! evolution. With this sign, pixels that fit the interior mean better than
//! the exterior mean are pulled inside.
//!
//! Every function here is generic over [`FieldOps`], so the same code runs
//! eagerly on [`Grid`] or on a tape for differentiation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{Axis, Grid, PadMode};
use crate::ops::FieldOps;

pub const DEFAULT_MU: f64 = 0.2;
pub const DEFAULT_EPS: f64 = 1.0;
pub const DEFAULT_DT: f64 = 0.5;
pub const DEFAULT_ITERS: usize = 60;
pub const DEFAULT_WINDOW: usize = 5;

/// Pad mode used by every stencil and pooling call of the engine.
pub const ENGINE_PAD: PadMode = PadMode::Replicate;

/// Guard on the squared gradient norm inside the curvature. It keeps the
/// derivative of the curvature bounded where the level set is nearly flat;
/// a unit-gradient level set is affected by about 1.5%.
pub const CURVATURE_GUARD: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionMode {
    Localized,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMode {
    /// Per-pixel parameter maps supplied by the caller.
    Fields,
    /// One scalar per region, the same at every pixel.
    Constants { lambda1: f64, lambda2: f64 },
}

/// Scalar knobs of the evolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AcmParamsDoc", into = "AcmParamsDoc")]
pub struct AcmParams {
    pub mu: f64,
    pub eps: f64,
    pub dt: f64,
    pub iters: usize,
    pub window: usize,
    pub region_mode: RegionMode,
    pub lambda_mode: LambdaMode,
}

impl Default for AcmParams {
    fn default() -> Self {
        AcmParams {
            mu: DEFAULT_MU,
            eps: DEFAULT_EPS,
            dt: DEFAULT_DT,
            iters: DEFAULT_ITERS,
            window: DEFAULT_WINDOW,
            region_mode: RegionMode::Localized,
            lambda_mode: LambdaMode::Fields,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum LambdaModeTag {
    Fields,
    Constants,
}

/// JSON shape of [`AcmParams`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AcmParamsDoc {
    mu: f64,
    eps: f64,
    dt: f64,
    iters: usize,
    window: usize,
    region_mode: RegionMode,
    lambda_mode: LambdaModeTag,
    #[serde(default = "one")]
    lambda1: f64,
    #[serde(default = "one")]
    lambda2: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<AcmParamsDoc> for AcmParams {
    type Error = Error;

    fn try_from(d: AcmParamsDoc) -> Result<Self> {
        let p = AcmParams {
            mu: d.mu,
            eps: d.eps,
            dt: d.dt,
            iters: d.iters,
            window: d.window,
            region_mode: d.region_mode,
            lambda_mode: match d.lambda_mode {
                LambdaModeTag::Fields => LambdaMode::Fields,
                LambdaModeTag::Constants => LambdaMode::Constants {
                    lambda1: d.lambda1,
                    lambda2: d.lambda2,
                },
            },
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<AcmParams> for AcmParamsDoc {
    fn from(p: AcmParams) -> Self {
        let (tag, lambda1, lambda2) = match p.lambda_mode {
            LambdaMode::Fields => (LambdaModeTag::Fields, 1.0, 1.0),
            LambdaMode::Constants { lambda1, lambda2 } => {
                (LambdaModeTag::Constants, lambda1, lambda2)
            }
        };
        AcmParamsDoc {
            mu: p.mu,
            eps: p.eps,
            dt: p.dt,
            iters: p.iters,
            window: p.window,
            region_mode: p.region_mode,
            lambda_mode: tag,
            lambda1,
            lambda2,
        }
    }
}

impl AcmParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.mu.is_finite() && self.mu >= 0.0) {
            return bad(format!("mu must be finite and >= 0, got {}", self.mu));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad(format!("eps must be finite and > 0, got {}", self.eps));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad(format!("dt must be finite and > 0, got {}", self.dt));
        }
        if self.window == 0 {
            return bad("window half-size must be >= 1".into());
        }
        if let LambdaMode::Constants { lambda1, lambda2 } = self.lambda_mode {
            if !(lambda1.is_finite() && lambda1 >= 0.0 && lambda2.is_finite() && lambda2 >= 0.0) {
                return bad(format!(
                    "lambdas must be finite and >= 0, got ({lambda1}, {lambda2})"
                ));
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("params serialize")
    }

    /// The `lambda1`, `lambda2` grids this configuration evolves with:
    /// constants expand to `dims`, field mode requires `maps`.
    pub fn lambda_grids(
        &self,
        dims: (usize, usize),
        maps: Option<(&Grid, &Grid)>,
    ) -> Result<(Grid, Grid)> {
        match (self.lambda_mode, maps) {
            (LambdaMode::Constants { lambda1, lambda2 }, _) => Ok((
                Grid::filled(dims.0, dims.1, lambda1),
                Grid::filled(dims.0, dims.1, lambda2),
            )),
            (LambdaMode::Fields, Some((a, b))) => Ok((a.clone(), b.clone())),
            (LambdaMode::Fields, None) => Err(Error::InvalidParameter(
                "field lambda mode needs lambda1/lambda2 maps".into(),
            )),
        }
    }
}

/// Smoothed Heaviside `1/2 + atan(phi/eps)/pi`.
pub fn heaviside<T: FieldOps>(phi: &T, eps: f64) -> T {
    phi.scale(1.0 / eps).arctan().scale(1.0 / PI).shift(0.5)
}

/// Derivative of [`heaviside`]: `eps / (pi (eps^2 + phi^2))`.
pub fn dirac<T: FieldOps>(phi: &T, eps: f64) -> T {
    phi.square().shift(eps * eps).recip().scale(eps / PI)
}

/// Curvature of the level lines, `div(grad phi / |grad phi|)`, with the
/// denominator guarded by [`CURVATURE_GUARD`].
pub fn curvature<T: FieldOps>(phi: &T, pad: PadMode) -> Result<T> {
    let gx = phi.central_diff(Axis::X, pad)?;
    let gy = phi.central_diff(Axis::Y, pad)?;
    let gxx = phi.second_diff(Axis::X, pad)?;
    let gyy = phi.second_diff(Axis::Y, pad)?;
    let gxy = gx.central_diff(Axis::Y, pad)?;

    let gx2 = gx.square();
    let gy2 = gy.square();
    let num = gxx
        .mul(&gy2)?
        .sub(&gxy.mul(&gx)?.mul(&gy)?.scale(2.0))?
        .add(&gyy.mul(&gx2)?)?;
    let den = gx2.add(&gy2)?.shift(CURVATURE_GUARD).powf(-1.5);
    num.mul(&den)
}

/// Interior and exterior means `(m1, m2)`, weighted by `H(phi)` and
/// `1 - H(phi)`.
pub fn local_means<T: FieldOps>(image: &T, phi: &T, params: &AcmParams) -> Result<(T, T)> {
    local_means_padded(image, phi, params, ENGINE_PAD)
}

pub fn local_means_padded<T: FieldOps>(
    image: &T,
    phi: &T,
    params: &AcmParams,
    pad: PadMode,
) -> Result<(T, T)> {
    check_dims(image, phi)?;
    let h_in = heaviside(phi, params.eps);
    let h_out = h_in.one_minus();
    let i_in = image.mul(&h_in)?;
    let i_out = image.mul(&h_out)?;
    match params.region_mode {
        RegionMode::Localized => {
            let f = params.window;
            let m1 = i_in.box_mean(f, pad).div(&h_in.box_mean(f, pad))?;
            let m2 = i_out.box_mean(f, pad).div(&h_out.box_mean(f, pad))?;
            Ok((m1, m2))
        }
        RegionMode::Global => {
            let m1 = i_in.sum().div(&h_in.sum())?.broadcast_like(image)?;
            let m2 = i_out.sum().div(&h_out.sum())?.broadcast_like(image)?;
            Ok((m1, m2))
        }
    }
}

/// Pointwise region force `delta(phi) * (l1 (I - m1)^2 - l2 (I - m2)^2)`.
pub fn force<T: FieldOps>(
    image: &T,
    phi: &T,
    lambda1: &T,
    lambda2: &T,
    m1: &T,
    m2: &T,
    eps: f64,
) -> Result<T> {
    dirac(phi, eps).mul(&fit_difference(image, lambda1, lambda2, m1, m2)?)
}

/// `l1 * (I - m1)^2 - l2 * (I - m2)^2`, the region term before the `delta`
/// factor.
pub fn fit_difference<T: FieldOps>(
    image: &T,
    lambda1: &T,
    lambda2: &T,
    m1: &T,
    m2: &T,
) -> Result<T> {
    let fit_in = lambda1.mul(&image.sub(m1)?.square())?;
    let fit_out = lambda2.mul(&image.sub(m2)?.square())?;
    fit_in.sub(&fit_out)
}

/// Time derivative of `phi` for one explicit step.
pub fn velocity<T: FieldOps>(
    image: &T,
    phi: &T,
    lambda1: &T,
    lambda2: &T,
    params: &AcmParams,
) -> Result<T> {
    check_dims(image, phi)?;
    check_dims(image, lambda1)?;
    check_dims(image, lambda2)?;
    let (m1, m2) = local_means(image, phi, params)?;
    let region = match params.region_mode {
        RegionMode::Localized => {
            let f = force(image, phi, lambda1, lambda2, &m1, &m2, params.eps)?;
            let side = (2 * params.window + 1) as f64;
            f.box_mean(params.window, ENGINE_PAD).scale(side * side)
        }
        RegionMode::Global => fit_difference(image, lambda1, lambda2, &m1, &m2)?,
    };
    let kappa = curvature(phi, ENGINE_PAD)?;
    let bracket = kappa.scale(params.mu).sub(&region)?;
    dirac(phi, params.eps).mul(&bracket)
}

/// `phi + dt * velocity`.
pub fn step<T: FieldOps>(
    image: &T,
    phi: &T,
    lambda1: &T,
    lambda2: &T,
    params: &AcmParams,
) -> Result<T> {
    let v = velocity(image, phi, lambda1, lambda2, params)?;
    phi.add(&v.scale(params.dt))
}

/// `params.iters` explicit steps from `phi0`.
pub fn evolve_generic<T: FieldOps>(
    image: &T,
    phi0: &T,
    lambda1: &T,
    lambda2: &T,
    params: &AcmParams,
) -> Result<T> {
    let mut phi = phi0.clone();
    for _ in 0..params.iters {
        phi = step(image, &phi, lambda1, lambda2, params)?;
    }
    Ok(phi)
}

fn check_dims<T: FieldOps>(a: &T, b: &T) -> Result<()> {
    let (da, db) = (a.dims(), b.dims());
    if da != db {
        return Err(Error::DimensionMismatch(da.0, da.1, db.0, db.1));
    }
    Ok(())
}

/// Eager evolution state.
#[derive(Clone, Debug, PartialEq)]
pub struct AcmState {
    pub phi: Grid,
    pub image: Grid,
    pub lambda1: Grid,
    pub lambda2: Grid,
    pub step_index: usize,
}

impl AcmState {
    pub fn new(image: Grid, phi: Grid, lambda1: Grid, lambda2: Grid) -> Result<Self> {
        image.same_dims(&phi)?;
        image.same_dims(&lambda1)?;
        image.same_dims(&lambda2)?;
        if lambda1
            .values()
            .iter()
            .chain(lambda2.values())
            .any(|&v| !(v >= 0.0))
        {
            return Err(Error::InvalidParameter("lambda values must be >= 0".into()));
        }
        Ok(AcmState {
            phi,
            image,
            lambda1,
            lambda2,
            step_index: 0,
        })
    }
}

pub fn evolve_step(state: &AcmState, params: &AcmParams) -> Result<AcmState> {
    let phi = step(
        &state.image,
        &state.phi,
        &state.lambda1,
        &state.lambda2,
        params,
    )?;
    Ok(AcmState {
        phi,
        step_index: state.step_index + 1,
        ..state.clone()
    })
}

/// Runs `params.iters` steps. With `history_every = k > 0`, every k-th
/// intermediate `phi` (steps k, 2k, ...) is kept.
pub fn evolve(
    image: &Grid,
    phi0: &Grid,
    lambda1: &Grid,
    lambda2: &Grid,
    params: &AcmParams,
    history_every: usize,
) -> Result<(Grid, Vec<Grid>)> {
    params.validate()?;
    let mut state = AcmState::new(
        image.clone(),
        phi0.clone(),
        lambda1.clone(),
        lambda2.clone(),
    )?;
    let mut history = Vec::new();
    for _ in 0..params.iters {
        state = evolve_step(&state, params)?;
        if history_every > 0 && state.step_index % history_every == 0 {
            history.push(state.phi.clone());
        }
    }
    Ok((state.phi, history))
}

/// Discrete energy: `sum mu delta |grad phi|` plus
/// `sum delta(phi(x)) * sum_{u in W(x)} F(u; x)`, with
/// `F(u; x) = l1(x) (I(u) - m1(x))^2 H(x) + l2(x) (I(u) - m2(x))^2 (1 - H(x))`.
pub fn energy(
    image: &Grid,
    phi: &Grid,
    lambda1: &Grid,
    lambda2: &Grid,
    params: &AcmParams,
) -> Result<f64> {
    image.same_dims(phi)?;
    image.same_dims(lambda1)?;
    image.same_dims(lambda2)?;
    let delta = dirac(phi, params.eps);
    let gx = phi.central_diff(Axis::X, ENGINE_PAD)?;
    let gy = phi.central_diff(Axis::Y, ENGINE_PAD)?;
    let mut e_length = 0.0;
    for k in 0..phi.len() {
        let g = (gx.values()[k].powi(2) + gy.values()[k].powi(2)).sqrt();
        e_length += params.mu * delta.values()[k] * g;
    }

    let (m1, m2) = local_means(image, phi, params)?;
    let h = heaviside(phi, params.eps);
    let sq = image.square();
    // window sums of I and I^2 around each pixel, and the window size
    let (sum_i, sum_sq, count): (Grid, Grid, f64) = match params.region_mode {
        RegionMode::Localized => {
            let f = params.window;
            let k = ((2 * f + 1) * (2 * f + 1)) as f64;
            (
                image.box_mean(f, ENGINE_PAD).scale(k),
                sq.box_mean(f, ENGINE_PAD).scale(k),
                k,
            )
        }
        RegionMode::Global => {
            let (rows, cols) = image.dims();
            (
                Grid::filled(rows, cols, image.sum()),
                Grid::filled(rows, cols, sq.sum()),
                image.len() as f64,
            )
        }
    };
    let mut e_image = 0.0;
    for k in 0..phi.len() {
        let (s1, s2) = (sum_i.values()[k], sum_sq.values()[k]);
        let window_sse = |m: f64| s2 - 2.0 * m * s1 + count * m * m;
        let hv = h.values()[k];
        let f = lambda1.values()[k] * window_sse(m1.values()[k]) * hv
            + lambda2.values()[k] * window_sse(m2.values()[k]) * (1.0 - hv);
        e_image += delta.values()[k] * f;
    }
    Ok(e_length + e_image)
}

/// 1 where `phi > 0`, else 0.
pub fn mask_from_phi(phi: &Grid) -> Grid {
    phi.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heaviside_points() {
        let phi = Grid::new(1, 4, vec![0.0, 1.0, 1e12, -1e12]).unwrap();
        let h = heaviside(&phi, 1.0);
        assert_eq!(h.get(0, 0), 0.5);
        assert!((h.get(0, 1) - 0.75).abs() < 1e-15);
        assert!(h.get(0, 2) > 1.0 - 1e-9 && h.get(0, 2) <= 1.0);
        assert!(h.get(0, 3) < 1e-9 && h.get(0, 3) >= 0.0);
    }

    #[test]
    fn dirac_points() {
        let eps = 0.7;
        let phi = Grid::new(1, 3, vec![0.0, 1.3, -1.3]).unwrap();
        let d = dirac(&phi, eps);
        assert!((d.get(0, 0) - 1.0 / (PI * eps)).abs() < 1e-15);
        assert_eq!(d.get(0, 1), d.get(0, 2));
    }

    #[test]
    fn dirac_integrates_to_one() {
        let eps = 1.0;
        let n = 200_000;
        let step = 200.0 * eps / n as f64;
        let phi = Grid::from_fn(1, n + 1, |_, j| -100.0 * eps + j as f64 * step);
        let total: f64 = dirac(&phi, eps).values().iter().sum::<f64>() * step;
        assert!((total - 1.0).abs() < 0.01, "{total}");
    }

    #[test]
    fn force_hand_value() {
        let one = Grid::scalar(1.0);
        let zero = Grid::scalar(0.0);
        let f = force(&one, &zero, &one, &one, &zero, &one, 1.0).unwrap();
        assert!((f.get(0, 0) - 1.0 / PI).abs() < 1e-15);

        let img = Grid::from_fn(3, 3, |i, j| (i + j) as f64 / 4.0);
        let phi = Grid::from_fn(3, 3, |i, _| i as f64 - 1.0);
        let z = Grid::zeros(3, 3);
        let f = force(&img, &phi, &z, &z, &img, &img, 1.0).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
        let l = Grid::filled(3, 3, 2.0);
        let f = force(&img, &phi, &l, &l, &img, &img, 1.0).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_trivial_cases() {
        let img = Grid::from_fn(8, 8, |i, j| ((i * j) % 3) as f64 / 3.0);
        let phi = Grid::from_fn(8, 8, |i, j| {
            3.0 - ((i as f64 - 4.0).powi(2) + (j as f64 - 3.0).powi(2)).sqrt()
        });
        let z = Grid::zeros(8, 8);
        let p = AcmParams {
            mu: 0.0,
            ..AcmParams::default()
        };
        assert_eq!(step(&img, &phi, &z, &z, &p).unwrap(), phi);
        let (out, hist) = evolve(&img, &phi, &z, &z, &AcmParams { iters: 0, ..p }, 1).unwrap();
        assert_eq!(out, phi);
        assert!(hist.is_empty());
    }

    #[test]
    fn evolve_history_every() {
        let img = Grid::from_fn(8, 8, |i, _| if i < 4 { 0.9 } else { 0.1 });
        let phi = Grid::from_fn(8, 8, |i, _| 2.5 - i as f64);
        let l = Grid::filled(8, 8, 1.0);
        let p = AcmParams {
            iters: 7,
            window: 1,
            ..AcmParams::default()
        };
        let (out, hist) = evolve(&img, &phi, &l, &l, &p, 3).unwrap();
        assert_eq!(hist.len(), 2);
        let mut s = AcmState::new(img.clone(), phi, l.clone(), l).unwrap();
        for _ in 0..6 {
            s = evolve_step(&s, &p).unwrap();
        }
        assert_eq!(hist[1], s.phi);
        s = evolve_step(&s, &p).unwrap();
        assert_eq!(out, s.phi);
        assert_eq!(s.step_index, 7);
    }

    #[test]
    fn params_json_exact_keys() {
        let p = AcmParams {
            lambda_mode: LambdaMode::Constants {
                lambda1: 1.5,
                lambda2: 0.5,
            },
            region_mode: RegionMode::Global,
            ..AcmParams::default()
        };
        let s = p.to_json();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "dt",
                "eps",
                "iters",
                "lambda1",
                "lambda2",
                "lambda_mode",
                "mu",
                "region_mode",
                "window"
            ]
        );
        assert_eq!(AcmParams::from_json(&s).unwrap(), p);
        assert!(AcmParams::from_json(&s.replacen("\"mu\"", "\"nu\"", 1)).is_err());
        let extra = s.replacen('{', "{\"extra\": 1,", 1);
        assert!(AcmParams::from_json(&extra).is_err());
        let bad_eps = s.replacen("\"eps\": 1.0", "\"eps\": 0.0", 1);
        assert!(AcmParams::from_json(&bad_eps).is_err());
    }

    #[test]
    fn lambda_grids_modes() {
        let p = AcmParams::default();
        assert!(p.lambda_grids((2, 2), None).is_err());
        let c = AcmParams {
            lambda_mode: LambdaMode::Constants {
                lambda1: 2.0,
                lambda2: 3.0,
            },
            ..p
        };
        let (a, b) = c.lambda_grids((2, 3), None).unwrap();
        assert_eq!(a, Grid::filled(2, 3, 2.0));
        assert_eq!(b, Grid::filled(2, 3, 3.0));
    }

    #[test]
    fn mask_from_phi_sign() {
        let phi = Grid::new(1, 4, vec![-1.0, 0.0, 1e-9, 3.0]).unwrap();
        assert_eq!(mask_from_phi(&phi).values(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(mask_from_phi(&phi), mask_from_phi(&phi.scale(10.0)));
        assert!(mask_from_phi(&Grid::filled(3, 3, -2.0)).sum() == 0.0);
    }
}
