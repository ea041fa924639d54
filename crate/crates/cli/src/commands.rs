use std::fs;
use std::path::{Path, PathBuf};

use acmseg_core::acm::{evolve, heaviside, mask_from_phi, AcmParams, LambdaMode};
use acmseg_core::io::{encode_ppm, read_fgrd, read_image, read_mask, write_fgrd, write_pgm};
use acmseg_core::maps::{check_prob, lambda_maps, prob_to_sdm};
use acmseg_core::metrics::{boundary, evaluate, to_csv, MetricsReport};
use acmseg_core::synth::{gen_dataset, ShapeKind, SceneSpec};
use acmseg_core::trainer::{
    fit, history_csv, load_model, predict, gradcheck_pipeline, Optimizer, TrainConfig,
};
use acmseg_core::{Error, Grid, Result};
use rayon::prelude::*;

use crate::{
    Command, EvalArgs, EvolveArgs, GradcheckArgs, PredictArgs, RenderArgs, SegmentDalsArgs,
    ShapeArg, SynthArgs, TrainArgs, EXIT_CHECK_FAILED, EXIT_DATA, EXIT_IO, EXIT_USAGE,
};

/// Overlay color and opacity used by `render`.
const OVERLAY_RGB: [f64; 3] = [1.0, 0.0, 0.0];
const OVERLAY_ALPHA: f64 = 0.4;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidParameter(_) | Error::Json(_) => EXIT_USAGE,
        Error::Io(_) | Error::Format(_) | Error::EmptyDataset(_) => EXIT_IO,
        Error::DimensionMismatch(..) | Error::GridTooSmall { .. } | Error::InvalidGrid(_) => {
            EXIT_DATA
        }
        Error::NonFiniteLoss(_) | Error::ForeignVar | Error::NonScalarLoss(..) => {
            EXIT_CHECK_FAILED
        }
    }
}

/// Runs one subcommand and returns the process exit code on success.
pub fn run(command: Command) -> Result<u8> {
    match command {
        Command::Evolve(a) => run_evolve(a),
        Command::SegmentDals(a) => run_segment_dals(a),
        Command::Train(a) => run_train(a),
        Command::Predict(a) => run_predict(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Synth(a) => run_synth(a),
        Command::Render(a) => run_render(a),
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn lambda_arg(map: Option<&PathBuf>, value: Option<f64>, like: &Grid) -> Result<Grid> {
    match map {
        Some(p) => read_fgrd(p),
        None => Ok(Grid::filled(like.height(), like.width(), value.unwrap_or(1.0))),
    }
}

fn run_evolve(a: EvolveArgs) -> Result<u8> {
    let params = a.acm.params(LambdaMode::Fields);
    params.validate()?;
    if a.history_dir.is_some() && a.dump_every == 0 {
        return Err(Error::InvalidParameter("--dump-every must be >= 1".into()));
    }
    let image = read_image(&a.image)?;
    let phi0 = read_fgrd(&a.phi0)?;
    let l1 = lambda_arg(a.lambda1.as_ref(), a.l1, &image)?;
    let l2 = lambda_arg(a.lambda2.as_ref(), a.l2, &image)?;
    let every = if a.history_dir.is_some() { a.dump_every } else { 0 };
    let (phi, history) = evolve(&image, &phi0, &l1, &l2, &params, every)?;
    if let Some(dir) = &a.history_dir {
        fs::create_dir_all(dir)?;
        for (k, snap) in history.iter().enumerate() {
            write_fgrd(dir.join(format!("phi_{:05}.fgrd", (k + 1) * every)), snap)?;
        }
    }
    create_parent(&a.out)?;
    write_pgm(&a.out, &mask_from_phi(&phi))?;
    Ok(0)
}

fn run_segment_dals(a: SegmentDalsArgs) -> Result<u8> {
    let params = a.acm.params(LambdaMode::Fields);
    params.validate()?;
    let image = read_image(&a.image)?;
    let prob = read_fgrd(&a.prob)?;
    image.same_dims(&prob)?;
    check_prob(&prob).map_err(|e| Error::InvalidGrid(e.to_string()))?;
    let phi0 = prob_to_sdm(&prob, 0.5);
    if prob.values().iter().all(|&p| p <= 0.5) {
        eprintln!("warning: no pixel has probability above 0.5; the initial contour is empty");
    }
    let (l1, l2) = lambda_maps(&prob);
    if let Some(dir) = &a.dump_lambdas {
        fs::create_dir_all(dir)?;
        write_fgrd(dir.join("lambda1.fgrd"), &l1)?;
        write_fgrd(dir.join("lambda2.fgrd"), &l2)?;
    }
    let (phi, _) = evolve(&image, &phi0, &l1, &l2, &params, 0)?;
    create_parent(&a.out)?;
    write_pgm(&a.out, &mask_from_phi(&phi))?;
    if let Some(p) = &a.prob_out {
        create_parent(p)?;
        write_fgrd(p, &heaviside(&phi, params.eps))?;
    }
    Ok(0)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut c = match &a.config {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.acm_iters {
        c.acm.iters = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(v) = a.held_out {
        c.held_out = v;
    }
    if let Some(m) = a.momentum {
        c.optimizer = if m == 0.0 {
            Optimizer::PlainSgd
        } else {
            Optimizer::Momentum(m)
        };
    }
    if let Some(v) = a.clip_norm {
        c.clip_norm = (v != 0.0).then_some(v);
    }
    if let Some(l) = a.constant_lambda {
        c.acm.lambda_mode = LambdaMode::Constants {
            lambda1: l,
            lambda2: l,
        };
    }
    c.validate()?;
    Ok(c)
}

fn run_train(a: TrainArgs) -> Result<u8> {
    let config = train_config(&a)?;
    create_parent(&a.out)?;
    let (_, history) = fit(&a.data, &config, Some(&a.out))?;
    let history_path = a.history.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".history.csv");
        PathBuf::from(s)
    });
    create_parent(&history_path)?;
    fs::write(&history_path, history_csv(&history))?;
    if let Some(last) = history.last() {
        match last.held_out_dice {
            Some(d) => eprintln!(
                "epoch {} loss {:.6} held-out dice {:.4}",
                last.epoch, last.train_loss, d
            ),
            None => eprintln!("epoch {} loss {:.6}", last.epoch, last.train_loss),
        }
    }
    Ok(0)
}

fn run_predict(a: PredictArgs) -> Result<u8> {
    let params = load_model(&a.model)?;
    let acm = AcmParams {
        iters: a.acm_iters,
        ..AcmParams::default()
    };
    acm.validate()?;
    let image = read_image(&a.image)?;
    let (_, mask) = predict(&image, &params, &acm)?;
    create_parent(&a.out)?;
    write_pgm(&a.out, &mask)?;
    Ok(0)
}

fn mask_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str());
        if !matches!(ext, Some("pgm") | Some("fgrd")) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.push((stem.to_string(), path.clone()));
        }
    }
    out.sort();
    Ok(out)
}

/// Pairs each prediction with the ground truth of the same stem, or of the
/// same stem followed by `_gt`.
fn match_pairs(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let gts = mask_files(gt)?;
    let find = |name: &str| {
        gts.iter()
            .find(|(s, _)| s == name)
            .or_else(|| {
                gts.iter()
                    .find(|(s, _)| s.strip_suffix("_gt") == Some(name))
            })
            .map(|(_, p)| p.clone())
    };
    let mut pairs = Vec::new();
    for (name, p) in mask_files(pred)? {
        match find(&name) {
            Some(g) => pairs.push((name, p, g)),
            None => eprintln!("warning: no ground truth for {name}, skipped"),
        }
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no prediction in {} matches a mask in {}",
            pred.display(),
            gt.display()
        )));
    }
    Ok(pairs)
}

fn run_eval(a: EvalArgs) -> Result<u8> {
    let pairs = match_pairs(&a.pred, &a.gt)?;
    let rows: Vec<(String, MetricsReport)> = pairs
        .par_iter()
        .map(|(name, p, g)| {
            let pred = read_mask(p)?;
            let gt = read_mask(g)?;
            Ok((name.clone(), evaluate(&gt, &pred)?))
        })
        .collect::<Result<_>>()?;
    create_parent(&a.csv)?;
    fs::write(&a.csv, to_csv(&rows))?;
    Ok(0)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<u8> {
    let report = gradcheck_pipeline(a.size, a.acm_iters, a.h, a.samples, a.seed)?;
    let pass = report.max_rel_error < a.tol;
    println!(
        "checked {} coordinates, max relative error {:.3e} ({})",
        report.checked,
        report.max_rel_error,
        if pass { "pass" } else { "fail" }
    );
    if let Some((leaf, idx, g, fd)) = report.worst {
        println!("worst: tensor {leaf} index {idx} backprop {g:.6e} finite difference {fd:.6e}");
    }
    Ok(if pass { 0 } else { EXIT_CHECK_FAILED })
}

fn run_synth(a: SynthArgs) -> Result<u8> {
    let spec = SceneSpec {
        size: a.size,
        n_instances: (a.min_instances, a.max_instances),
        shape_kinds: a
            .shapes
            .iter()
            .map(|s| match s {
                ShapeArg::Rects => ShapeKind::Rects,
                ShapeArg::Disks => ShapeKind::Disks,
                ShapeArg::Blobs => ShapeKind::Blobs,
            })
            .collect(),
        fg_intensity: a.fg,
        bg_intensity: a.bg,
        noise_sigma: a.noise,
        illumination_gradient: a.gradient,
        seed: a.seed,
    };
    spec.validate()?;
    let scenes = gen_dataset(&spec, a.n)?;
    fs::create_dir_all(&a.out)?;
    let mut entries = Vec::with_capacity(scenes.len());
    for (k, s) in scenes.iter().enumerate() {
        let name = format!("scene_{k:04}");
        write_pgm(a.out.join(format!("{name}.pgm")), &s.image)?;
        write_pgm(a.out.join(format!("{name}_gt.pgm")), &s.gt)?;
        if s.shortfall() {
            eprintln!(
                "warning: {name} placed {} of {} instances",
                s.placed, s.requested
            );
        }
        entries.push(serde_json::json!({
            "name": name,
            "requested": s.requested,
            "placed": s.placed,
        }));
    }
    let manifest = serde_json::json!({
        "spec": spec,
        "n": a.n,
        "scenes": entries,
    });
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(a.out.join("manifest.json"), text)?;
    Ok(0)
}

fn run_render(a: RenderArgs) -> Result<u8> {
    let image = read_image(&a.image)?;
    let mask = read_mask(&a.mask)?;
    image.same_dims(&mask)?;
    let paint = if a.contour { boundary(&mask) } else { mask };
    let alpha = if a.contour { 1.0 } else { OVERLAY_ALPHA };
    let rgb: Vec<[f64; 3]> = image
        .values()
        .iter()
        .zip(paint.values())
        .map(|(&v, &m)| {
            let gray = v.clamp(0.0, 1.0);
            if m > 0.5 {
                OVERLAY_RGB.map(|c| (1.0 - alpha) * gray + alpha * c)
            } else {
                [gray; 3]
            }
        })
        .collect();
    create_parent(&a.out)?;
    fs::write(&a.out, encode_ppm(image.height(), image.width(), &rgb))?;
    Ok(0)
}
