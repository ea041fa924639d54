//! End-to-end training: a two-layer convolutional predictor emits the
//! lambda maps, the initial level set and a probability map; the level set
//! is evolved on the tape and the combined cross entropy is backpropagated
//! into the predictor weights.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acm::{evolve_generic, mask_from_phi, AcmParams, LambdaMode};
use crate::autodiff::{grad_check, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::fields::{Grid, PadMode};
use crate::io::{decode_fgrd_prefix, read_image, read_mask, write_fgrd_to};
use crate::losses::{dtac_total_loss, LossWeights};
use crate::metrics::dice_score;
use crate::ops::FieldOps;
use crate::synth::{gen_scene, SceneSpec};

pub const HIDDEN: usize = 8;
pub const HEADS: usize = 4;
pub const DEFAULT_PHI_SCALE: f64 = 10.0;
pub const DEFAULT_LAMBDA_SCALE: f64 = std::f64::consts::E * std::f64::consts::E;
pub const LR_POWER: f64 = 0.9;
pub const HEAD_LAMBDA1: usize = 0;
pub const HEAD_LAMBDA2: usize = 1;
pub const HEAD_PHI: usize = 2;
pub const HEAD_PROB: usize = 3;
/// Intensity levels of the initial hidden ramps; `HIDDEN / 2` of them.
pub const INIT_LEVELS: [f64; HIDDEN / 2] = [0.35, 0.45, 0.55, 0.65];
pub const INIT_NOISE: f64 = 0.3;
pub const INIT_PHI_GAIN: f64 = 5.0;
const CONV_PAD: PadMode = PadMode::Replicate;

pub const MODL_MAGIC: &[u8; 4] = b"MODL";
pub const MODL_VERSION: u8 = 0x01;

/// Predictor weights. Values are kept at single precision so that a model
/// file round-trips exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    /// `HIDDEN` 3x3 kernels on the single input channel.
    pub conv1: Vec<Grid>,
    pub bias1: Vec<f64>,
    /// `HEADS * HIDDEN` 3x3 kernels, indexed `[head * HIDDEN + hidden]`.
    /// Heads are lambda1, lambda2, phi0 and the probability map.
    pub conv2: Vec<Grid>,
    pub bias2: Vec<f64>,
    /// Pre-sigmoid values of the two scalar lambdas used in constant mode.
    pub lambda_raw: [f64; 2],
    pub phi_scale: f64,
    pub lambda_scale: f64,
    /// Replace the lambda heads by the two trainable scalars.
    pub constant_lambda: bool,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl PredictorParams {
    /// All-zero weights: lambdas sit at `lambda_scale / 2`, `phi0 = 0` and
    /// the probability map is 0.5.
    pub fn zeros() -> Self {
        PredictorParams {
            conv1: vec![Grid::zeros(3, 3); HIDDEN],
            bias1: vec![0.0; HIDDEN],
            conv2: vec![Grid::zeros(3, 3); HEADS * HIDDEN],
            bias2: vec![0.0; HEADS],
            lambda_raw: [0.0; 2],
            phi_scale: f32_round(DEFAULT_PHI_SCALE),
            lambda_scale: f32_round(DEFAULT_LAMBDA_SCALE),
            constant_lambda: false,
        }
    }

    /// Starting weights. The hidden layer is a fixed bank of rectified
    /// intensity ramps `relu(+-(I - t))` at the levels in [`INIT_LEVELS`].
    /// The phi0 head combines them into `INIT_PHI_GAIN * (I - 0.5)`, so the
    /// initial level set has a non-degenerate gradient wherever the image
    /// varies; the other heads get seeded Gaussian taps of std
    /// [`INIT_NOISE`]. Second-layer biases start at zero. In constant mode
    /// the two scalars start at the values given by `mode`.
    pub fn init(seed: u64, mode: LambdaMode) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, INIT_NOISE).expect("valid std");
        let center = |w: f64| Grid::from_fn(3, 3, |i, j| if i == 1 && j == 1 { w } else { 0.0 });
        let mut p = PredictorParams::zeros();
        for (k, &t) in INIT_LEVELS.iter().enumerate() {
            p.conv1[2 * k] = center(1.0);
            p.bias1[2 * k] = -t;
            p.conv1[2 * k + 1] = center(-1.0);
            p.bias1[2 * k + 1] = t;
        }
        for k in p.conv2.iter_mut() {
            for v in k.values_mut() {
                *v = noise.sample(&mut rng);
            }
        }
        let w = INIT_PHI_GAIN / INIT_LEVELS.len() as f64;
        for k in 0..INIT_LEVELS.len() {
            p.conv2[HEAD_PHI * HIDDEN + 2 * k] = center(w);
            p.conv2[HEAD_PHI * HIDDEN + 2 * k + 1] = center(-w);
        }
        if let LambdaMode::Constants { lambda1, lambda2 } = mode {
            let s = p.lambda_scale;
            for (raw, l) in p.lambda_raw.iter_mut().zip([lambda1, lambda2]) {
                if !(l > 0.0 && l < s) {
                    return Err(Error::InvalidParameter(format!(
                        "constant lambda must lie in (0, {s:.4}), got {l}"
                    )));
                }
                *raw = logit(l / s);
            }
            p.constant_lambda = true;
        }
        p.round_to_f32();
        Ok(p)
    }

    fn round_to_f32(&mut self) {
        let mut leaves = self.leaves();
        for g in leaves.iter_mut() {
            for v in g.values_mut() {
                *v = f32_round(*v);
            }
        }
        *self = self.with_leaves(&leaves);
    }

    /// Trainable tensors in a fixed order: conv1 kernels, conv1 biases,
    /// conv2 kernels, conv2 biases, then the two constant-lambda scalars.
    /// Biases and scalars are 1x1 grids.
    pub fn leaves(&self) -> Vec<Grid> {
        let mut out = Vec::with_capacity(self.leaf_count());
        out.extend(self.conv1.iter().cloned());
        out.extend(self.bias1.iter().map(|&b| Grid::scalar(b)));
        out.extend(self.conv2.iter().cloned());
        out.extend(self.bias2.iter().map(|&b| Grid::scalar(b)));
        out.extend(self.lambda_raw.iter().map(|&b| Grid::scalar(b)));
        out
    }

    pub fn leaf_count(&self) -> usize {
        2 * HIDDEN + HEADS * HIDDEN + HEADS + 2
    }

    /// Inverse of [`PredictorParams::leaves`]; scales and mode are kept.
    pub fn with_leaves(&self, leaves: &[Grid]) -> Self {
        let mut it = leaves.iter();
        let mut take = |n: usize| -> Vec<Grid> { (&mut it).take(n).cloned().collect() };
        let conv1 = take(HIDDEN);
        let bias1 = take(HIDDEN).iter().map(|g| g.item()).collect();
        let conv2 = take(HEADS * HIDDEN);
        let bias2 = take(HEADS).iter().map(|g| g.item()).collect();
        let raw = take(2);
        PredictorParams {
            conv1,
            bias1,
            conv2,
            bias2,
            lambda_raw: [raw[0].item(), raw[1].item()],
            ..self.clone()
        }
    }

    pub fn all_finite(&self) -> bool {
        self.leaves().iter().all(Grid::all_finite)
            && self.phi_scale.is_finite()
            && self.lambda_scale.is_finite()
    }
}

/// Predictor outputs.
#[derive(Clone, Debug)]
pub struct Heads<T> {
    pub lambda1: T,
    pub lambda2: T,
    pub phi0: T,
    pub prob: T,
}

/// The predictor on any field backend. `leaves` follows
/// [`PredictorParams::leaves`]; scales and the lambda mode come from `p`.
pub fn forward_generic<T: FieldOps>(
    image: &T,
    leaves: &[T],
    p: &PredictorParams,
) -> Result<Heads<T>> {
    if leaves.len() != p.leaf_count() {
        return Err(Error::InvalidParameter(format!(
            "expected {} parameter tensors, got {}",
            p.leaf_count(),
            leaves.len()
        )));
    }
    let (conv1, rest) = leaves.split_at(HIDDEN);
    let (bias1, rest) = rest.split_at(HIDDEN);
    let (conv2, rest) = rest.split_at(HEADS * HIDDEN);
    let (bias2, raw) = rest.split_at(HEADS);

    let mut hidden = Vec::with_capacity(HIDDEN);
    for (k, b) in conv1.iter().zip(bias1) {
        let z = image.conv3x3(k, CONV_PAD)?.add(&b.broadcast_like(image)?)?;
        hidden.push(z.relu());
    }
    let head = |c: usize| -> Result<T> {
        let mut acc = bias2[c].broadcast_like(image)?;
        for (h, k) in hidden.iter().zip(&conv2[c * HIDDEN..(c + 1) * HIDDEN]) {
            acc = acc.add(&h.conv3x3(k, CONV_PAD)?)?;
        }
        Ok(acc)
    };
    let (lambda1, lambda2) = if p.constant_lambda {
        (
            raw[0]
                .sigmoid()
                .scale(p.lambda_scale)
                .broadcast_like(image)?,
            raw[1]
                .sigmoid()
                .scale(p.lambda_scale)
                .broadcast_like(image)?,
        )
    } else {
        (
            head(HEAD_LAMBDA1)?.sigmoid().scale(p.lambda_scale),
            head(HEAD_LAMBDA2)?.sigmoid().scale(p.lambda_scale),
        )
    };
    let phi0 = head(HEAD_PHI)?.sigmoid().shift(-0.5).scale(p.phi_scale);
    let prob = head(HEAD_PROB)?.sigmoid();
    Ok(Heads {
        lambda1,
        lambda2,
        phi0,
        prob,
    })
}

pub fn predictor_forward(image: &Grid, params: &PredictorParams) -> Result<Heads<Grid>> {
    forward_generic(image, &params.leaves(), params)
}

/// Forward pass, evolution and loss for one `(image, gt)` pair. Returns the
/// loss and the evolved level set.
pub fn sample_loss<T: FieldOps>(
    image: &T,
    gt: &Grid,
    leaves: &[T],
    p: &PredictorParams,
    acm: &AcmParams,
) -> Result<(T, T)> {
    let heads = forward_generic(image, leaves, p)?;
    let phi_n = evolve_generic(image, &heads.phi0, &heads.lambda1, &heads.lambda2, acm)?;
    let loss = dtac_total_loss(&phi_n, &heads.prob, gt, acm.eps)?;
    Ok((loss, phi_n))
}

/// The evolved level set and its mask for one image.
pub fn predict(image: &Grid, params: &PredictorParams, acm: &AcmParams) -> Result<(Grid, Grid)> {
    let heads = predictor_forward(image, params)?;
    let phi = evolve_generic(image, &heads.phi0, &heads.lambda1, &heads.lambda2, acm)?;
    let mask = mask_from_phi(&phi);
    Ok((phi, mask))
}

/// `alpha0 * (1 - e / n_epochs)^0.9`.
pub fn lr_schedule(epoch: usize, n_epochs: usize, alpha0: f64) -> Result<f64> {
    if epoch > n_epochs {
        return Err(Error::InvalidParameter(format!(
            "epoch {epoch} exceeds the budget of {n_epochs}"
        )));
    }
    if n_epochs == 0 {
        return Ok(alpha0);
    }
    Ok(alpha0 * (1.0 - epoch as f64 / n_epochs as f64).powf(LR_POWER))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    PlainSgd,
    /// Classical momentum with coefficient `beta`.
    Momentum(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Base learning rate.
    pub lr: f64,
    pub acm: AcmParams,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Number of scenes, taken from the end of the sorted dataset, that are
    /// kept out of training and scored each epoch.
    pub held_out: usize,
    /// Rescale each batch gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.01,
            acm: AcmParams {
                iters: 20,
                ..AcmParams::default()
            },
            weights: LossWeights::default(),
            batch_size: 8,
            seed: 0,
            optimizer: Optimizer::Momentum(0.9),
            held_out: 0,
            clip_norm: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidParameter("learning rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidParameter("clip_norm must be > 0".into()));
            }
        }
        if let Optimizer::Momentum(b) = self.optimizer {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidParameter(
                    "momentum must lie in [0, 1)".into(),
                ));
            }
        }
        self.acm.validate()?;
        self.weights.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub name: String,
    pub image: Grid,
    pub gt: Grid,
}

/// Mean loss and gradients over `batch`, one tape per sample.
pub fn batch_gradients(
    batch: &[Sample],
    params: &PredictorParams,
    acm: &AcmParams,
) -> Result<(f64, Vec<Grid>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset("empty batch".into()));
    }
    let leaves = params.leaves();
    let per_sample: Vec<Result<(f64, Vec<Grid>)>> = batch
        .par_iter()
        .map(|s| {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = leaves.iter().map(|g| tape.leaf(g.clone())).collect();
            let image = tape.leaf(s.image.clone());
            let (loss, _) = sample_loss(&image, &s.gt, &vars, params, acm)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "sample {}: loss {value}",
                    s.name
                )));
            }
            let grads = tape.backward(&loss)?;
            Ok((value, vars.iter().map(|v| grads.get(v)).collect()))
        })
        .collect();

    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut acc: Vec<Grid> = leaves
        .iter()
        .map(|g| Grid::zeros(g.height(), g.width()))
        .collect();
    // summed in batch order so results do not depend on thread scheduling
    for r in per_sample {
        let (loss, grads) = r?;
        total += loss;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (x, y) in a.values_mut().iter_mut().zip(g.values()) {
                *x += y;
            }
        }
    }
    for a in acc.iter_mut() {
        for x in a.values_mut() {
            *x /= n;
        }
    }
    Ok((total / n, acc))
}

/// SGD state carried between steps.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    velocity: Option<Vec<Grid>>,
}

/// One update on `batch` at learning rate `lr`. Returns the updated
/// parameters and the batch loss measured before the update.
pub fn train_step(
    batch: &[Sample],
    params: &PredictorParams,
    config: &TrainConfig,
    lr: f64,
    state: &mut OptimizerState,
) -> Result<(PredictorParams, f64)> {
    let (loss, mut grads) = batch_gradients(batch, params, &config.acm)?;
    if let Some(c) = config.clip_norm {
        let norm = grads
            .iter()
            .flat_map(|g| g.values())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > c {
            for g in grads.iter_mut() {
                for v in g.values_mut() {
                    *v *= c / norm;
                }
            }
        }
    }
    let mut leaves = params.leaves();
    let steps: Vec<Grid> = match config.optimizer {
        Optimizer::PlainSgd => grads,
        Optimizer::Momentum(beta) => {
            let v = state.velocity.get_or_insert_with(|| {
                grads
                    .iter()
                    .map(|g| Grid::zeros(g.height(), g.width()))
                    .collect()
            });
            for (vi, g) in v.iter_mut().zip(&grads) {
                for (a, b) in vi.values_mut().iter_mut().zip(g.values()) {
                    *a = beta * *a + b;
                }
            }
            v.clone()
        }
    };
    for (w, s) in leaves.iter_mut().zip(&steps) {
        for (a, b) in w.values_mut().iter_mut().zip(s.values()) {
            *a = f32_round(*a - lr * b);
        }
    }
    let next = params.with_leaves(&leaves);
    if !next.all_finite() {
        return Err(Error::NonFiniteLoss(format!(
            "parameters became non-finite at loss {loss}"
        )));
    }
    Ok((next, loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean Dice of the evolved masks on the held-out scenes.
    pub held_out_dice: Option<f64>,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,held_out_dice";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let dice = r
            .held_out_dice
            .map(|d| format!("{d:.6}"))
            .unwrap_or_default();
        out += &format!("{},{:.6e},{:.6},{}\n", r.epoch, r.lr, r.train_loss, dice);
    }
    out
}

/// Mean Dice of predicted masks against the ground truth.
pub fn mean_dice(samples: &[Sample], params: &PredictorParams, acm: &AcmParams) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("nothing to score".into()));
    }
    let scores: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let (_, mask) = predict(&s.image, params, acm)?;
            dice_score(&s.gt, &mask)
        })
        .collect();
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / samples.len() as f64)
}

/// Trains on in-memory samples. The last `config.held_out` samples are
/// scored each epoch and never trained on.
pub fn fit_samples(
    samples: &[Sample],
    config: &TrainConfig,
) -> Result<(PredictorParams, Vec<EpochRecord>)> {
    config.validate()?;
    let n_train = samples.len().saturating_sub(config.held_out);
    if n_train == 0 {
        return Err(Error::EmptyDataset(format!(
            "{} samples with {} held out leaves nothing to train on",
            samples.len(),
            config.held_out
        )));
    }
    let (train, held) = samples.split_at(n_train);
    let mut params = PredictorParams::init(config.seed, config.acm.lambda_mode)?;
    let mut state = OptimizerState::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config.epochs, config.lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (next, loss) = train_step(&batch, &params, config, lr, &mut state)?;
            params = next;
            loss_sum += loss * chunk.len() as f64;
        }
        let held_out_dice = if held.is_empty() {
            None
        } else {
            Some(mean_dice(held, &params, &config.acm)?)
        };
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            held_out_dice,
        });
    }
    Ok((params, history))
}

/// Image/ground-truth pairs `<stem>.pgm` + `<stem>_gt.pgm` (or `.fgrd`) in
/// `dir`, sorted by file name.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let mut pairs: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        for ext in [".pgm", ".fgrd"] {
            if let Some(stem) = name.strip_suffix(&format!("_gt{ext}")) {
                let image = dir.join(format!("{stem}{ext}"));
                if image.exists() {
                    pairs.push((stem.to_string(), image, path.clone()));
                }
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no <name> / <name>_gt image pairs in {}",
            dir.display()
        )));
    }
    pairs.sort();
    pairs
        .into_iter()
        .map(|(name, image, gt)| {
            let image = read_image(&image)?;
            let gt = read_mask(&gt)?;
            image.same_dims(&gt)?;
            Ok(Sample { name, image, gt })
        })
        .collect()
}

/// Loads `dataset_dir`, trains, and writes the model to `model_out` when
/// given.
pub fn fit(
    dataset_dir: impl AsRef<Path>,
    config: &TrainConfig,
    model_out: Option<&Path>,
) -> Result<(PredictorParams, Vec<EpochRecord>)> {
    config.validate()?;
    let samples = load_dataset(dataset_dir)?;
    let (params, history) = if config.epochs == 0 {
        (
            PredictorParams::init(config.seed, config.acm.lambda_mode)?,
            Vec::new(),
        )
    } else {
        fit_samples(&samples, config)?
    };
    if let Some(path) = model_out {
        save_model(path, &params)?;
    }
    Ok((params, history))
}

const MODEL_TENSORS: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "lambda.raw",
    "lambda.constant",
    "phi_scale",
    "lambda_scale",
];

fn stack_kernels(ks: &[Grid]) -> Grid {
    let values = ks.iter().flat_map(|k| k.values().iter().copied()).collect();
    Grid::new(ks.len(), 9, values).expect("kernel rows")
}

fn unstack_kernels(g: &Grid) -> Vec<Grid> {
    g.values()
        .chunks(9)
        .map(|c| Grid::new(3, 3, c.to_vec()).expect("3x3"))
        .collect()
}

fn row(vals: &[f64]) -> Grid {
    Grid::new(1, vals.len(), vals.to_vec()).expect("row")
}

pub fn encode_model(p: &PredictorParams) -> Vec<u8> {
    let tensors = [
        stack_kernels(&p.conv1),
        row(&p.bias1),
        stack_kernels(&p.conv2),
        row(&p.bias2),
        row(&p.lambda_raw),
        Grid::scalar(if p.constant_lambda { 1.0 } else { 0.0 }),
        Grid::scalar(p.phi_scale),
        Grid::scalar(p.lambda_scale),
    ];
    let mut out = MODL_MAGIC.to_vec();
    out.push(MODL_VERSION);
    for (name, t) in MODEL_TENSORS.iter().zip(&tensors) {
        out.push(name.len() as u8);
        out.extend(name.as_bytes());
        write_fgrd_to(&mut out, t).expect("writing to a Vec cannot fail");
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<PredictorParams> {
    if bytes.len() < 5 || &bytes[..4] != MODL_MAGIC {
        return Err(Error::Format("missing MODL magic".into()));
    }
    if bytes[4] != MODL_VERSION {
        return Err(Error::Format(format!(
            "unsupported MODL version {}",
            bytes[4]
        )));
    }
    let mut pos = 5;
    let mut found: Vec<Option<Grid>> = vec![None; MODEL_TENSORS.len()];
    while pos < bytes.len() {
        let len = bytes[pos] as usize;
        let name = bytes
            .get(pos + 1..pos + 1 + len)
            .ok_or_else(|| Error::Format("truncated tensor name".into()))?;
        let name = std::str::from_utf8(name)
            .map_err(|_| Error::Format("tensor name is not ASCII".into()))?;
        pos += 1 + len;
        let (g, used) = decode_fgrd_prefix(&bytes[pos..])?;
        pos += used;
        let slot = MODEL_TENSORS
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::Format(format!("unknown tensor {name:?}")))?;
        found[slot] = Some(g);
    }
    let mut it = found.into_iter().zip(MODEL_TENSORS);
    let mut next = |dims: (usize, usize)| -> Result<Grid> {
        let (g, name) = it.next().expect("fixed tensor list");
        let g = g.ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if g.dims() != dims {
            return Err(Error::Format(format!(
                "tensor {name} is {}x{}, expected {}x{}",
                g.height(),
                g.width(),
                dims.0,
                dims.1
            )));
        }
        Ok(g)
    };
    let conv1 = unstack_kernels(&next((HIDDEN, 9))?);
    let bias1 = next((1, HIDDEN))?.values().to_vec();
    let conv2 = unstack_kernels(&next((HEADS * HIDDEN, 9))?);
    let bias2 = next((1, HEADS))?.values().to_vec();
    let raw = next((1, 2))?;
    let constant_lambda = next((1, 1))?.item() != 0.0;
    let phi_scale = next((1, 1))?.item();
    let lambda_scale = next((1, 1))?.item();
    let p = PredictorParams {
        conv1,
        bias1,
        conv2,
        bias2,
        lambda_raw: [raw.values()[0], raw.values()[1]],
        phi_scale,
        lambda_scale,
        constant_lambda,
    };
    if !p.all_finite() || !(phi_scale > 0.0 && lambda_scale > 0.0) {
        return Err(Error::Format("model holds invalid values".into()));
    }
    Ok(p)
}

pub fn save_model(path: impl AsRef<Path>, p: &PredictorParams) -> Result<()> {
    fs::write(path, encode_model(p))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PredictorParams> {
    decode_model(&fs::read(path)?)
}

/// Gradient check of the full training objective (predictor, `acm_iters`
/// evolution steps, loss) with respect to every predictor weight, on a
/// synthetic `size x size` scene, at `samples` randomly chosen weights.
pub fn gradcheck_pipeline(
    size: usize,
    acm_iters: usize,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let scene = gen_scene(&SceneSpec {
        size,
        seed,
        n_instances: (1, 2),
        ..SceneSpec::default()
    })?;
    let acm = AcmParams {
        iters: acm_iters,
        ..AcmParams::default()
    };
    let params = PredictorParams::init(seed, LambdaMode::Fields)?;
    grad_check(
        |tape, leaves| {
            let image = tape.leaf(scene.image.clone());
            let (loss, _) = sample_loss(&image, &scene.gt, leaves, &params, &acm)?;
            Ok(loss)
        },
        &params.leaves(),
        h,
        samples,
        seed,
    )
}
