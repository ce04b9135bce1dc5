use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use saliencydecor::checkpoint::{self, CheckpointMeta};
use saliencydecor::data::{load_mnist_dir, make_synthetic, Dataset, SyntheticKind};
use saliencydecor::evaluation::{
    accuracy, diagnose_features, ensure_comparable, export_saliency, gradient_stats, importance_maps,
    masking_curve, write_curves_csv, write_gradient_stats_csv, EvalConfig, MaskingCurve,
};
use saliencydecor::model::{Architecture, Model};
use saliencydecor::nn::Shape;
use saliencydecor::training::fit;
use saliencydecor::whitening::WhiteningConfig;

use crate::config::{RunConfig, DATA_DIR_ENV};
use crate::CliError;

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Creates `out` and writes the resolved configuration into it.
fn prepare(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let path = out.join("config.txt");
    fs::write(&path, cfg.render()).map_err(|e| CliError::io(&path, e))
}

fn load_dataset(cfg: &RunConfig, fallback: Option<&str>) -> Result<(String, Dataset), CliError> {
    let spec = cfg
        .dataset()
        .or(fallback)
        .ok_or_else(|| CliError::config("dataset", "no dataset given (use --dataset)"))?
        .to_string();
    let (train, test) = (cfg.limit("train-samples"), cfg.limit("test-samples"));
    let ds = if spec == "mnist" {
        let dir = cfg.data_dir().ok_or_else(|| {
            CliError::new(2, format!("mnist needs --data-dir or the {DATA_DIR_ENV} environment variable"))
        })?;
        if !dir.join("train-images-idx3-ubyte").is_file() {
            return Err(CliError::new(
                2,
                format!("--data-dir {}: no train-images-idx3-ubyte found", dir.display()),
            ));
        }
        load_mnist_dir(&dir, train, test)?
    } else if let Some(kind) = spec.strip_prefix("synthetic:") {
        let kind = SyntheticKind::parse(kind).map_err(|e| CliError::config("dataset", e))?;
        make_synthetic(kind, cfg.usize("synthetic-samples"), cfg.usize("synthetic-dims"), cfg.u64("data-seed"))?
            .truncated(train, test)
    } else {
        return Err(CliError::config("dataset", format!("unknown dataset '{spec}'")));
    };
    Ok((spec, ds))
}

fn choose_arch(cfg: &RunConfig, ds: &Dataset) -> Architecture {
    cfg.arch().unwrap_or(match ds.input_shape() {
        Shape::Spatial { height, width, .. } if height >= 11 && width >= 11 => Architecture::Cnn,
        _ => Architecture::Mlp { hidden: 64 },
    })
}

fn single(cfg: &RunConfig, key: &str) -> Result<f64, CliError> {
    match cfg.list_f64(key)[..] {
        [v] => Ok(v),
        _ => Err(CliError::config(key, "takes a single value here (lists are for sweep)")),
    }
}

struct Trained {
    model: Model,
    checkpoint: PathBuf,
    accuracy: f64,
}

/// Trains into `dir`: `train_log.jsonl` and `checkpoint.sdckpt`.
fn train_into(cfg: &RunConfig, spec: &str, ds: &Dataset, rho: f64, lambda: f64, dir: &Path) -> Result<Trained, CliError> {
    let train_cfg = cfg.train_config(choose_arch(cfg, ds), rho, lambda)?;
    let log_path = dir.join("train_log.jsonl");
    let mut log = create(&log_path)?;
    let outcome = fit(ds, &train_cfg, Some(&mut log))?;
    finish(log, &log_path)?;
    let accuracy = match outcome.final_accuracy() {
        Some(a) => a,
        None => accuracy(&outcome.model, &ds.test_x, &ds.test_y)?,
    };
    let meta = CheckpointMeta { train: train_cfg, dataset: spec.to_string() };
    let checkpoint = dir.join("checkpoint.sdckpt");
    checkpoint::save(&checkpoint, &outcome.model, &meta)?;
    Ok(Trained { model: outcome.model, checkpoint, accuracy })
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    prepare(cfg, out)?;
    let (rho, lambda) = (single(cfg, "rho")?, single(cfg, "lambda")?);
    let (spec, ds) = load_dataset(cfg, None)?;
    let t = train_into(cfg, &spec, &ds, rho, lambda, out)?;
    println!("test accuracy {:.2}% checkpoint {}", t.accuracy, t.checkpoint.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta), CliError> {
    if !path.is_file() {
        return Err(CliError::new(2, format!("--checkpoint {}: no such file", path.display())));
    }
    checkpoint::load(path).map_err(|e| CliError::new(2, format!("{}: {e}", path.display())))
}

fn checkpoints(cfg: &RunConfig) -> Result<Vec<(PathBuf, Model, CheckpointMeta)>, CliError> {
    let paths = cfg.checkpoints();
    if paths.is_empty() {
        return Err(CliError::config("checkpoint", "no checkpoint given (use --checkpoint)"));
    }
    paths
        .into_iter()
        .map(|p| load_checkpoint(&p).map(|(m, meta)| (p, m, meta)))
        .collect()
}

fn ensure_fits(model: &Model, ds: &Dataset, path: &Path) -> Result<(), CliError> {
    if model.net.input_shape() != ds.input_shape() || model.net.classes() != ds.classes {
        return Err(CliError::new(
            2,
            format!(
                "{} expects input {:?} with {} classes but the dataset has {:?} with {}",
                path.display(),
                model.net.input_shape(),
                model.net.classes(),
                ds.input_shape(),
                ds.classes
            ),
        ));
    }
    Ok(())
}

fn eval_config(cfg: &RunConfig, ds: &Dataset) -> EvalConfig {
    EvalConfig {
        grid: cfg.grid(),
        policy: cfg.policy("eval-policy"),
        seed: cfg.u64("eval-seed"),
        test_samples: ds.test_y.len(),
    }
}

fn curve(model: &Model, ds: &Dataset, ecfg: &EvalConfig) -> Result<MaskingCurve, CliError> {
    Ok(masking_curve(model, &ds.test_x, &ds.test_y, &ds.stats, ecfg)?)
}

fn write_curves(path: &Path, curves: &[(String, MaskingCurve)]) -> Result<(), CliError> {
    let mut w = create(path)?;
    write_curves_csv(&mut w, curves)?;
    finish(w, path)
}

/// Labels by training mode, numbered when several checkpoints share one.
fn labels(metas: &[&CheckpointMeta]) -> Vec<String> {
    let names: Vec<&str> = metas.iter().map(|m| m.train.mode.name()).collect();
    names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if names.iter().filter(|o| *o == n).count() > 1 {
                format!("{n}#{}", names[..i].iter().filter(|o| *o == n).count() + 1)
            } else {
                n.to_string()
            }
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    prepare(cfg, out)?;
    let loaded = checkpoints(cfg)?;
    let (_, ds) = load_dataset(cfg, Some(&loaded[0].2.dataset))?;
    for (path, model, _) in &loaded {
        ensure_fits(model, &ds, path)?;
    }
    let ecfg = eval_config(cfg, &ds);
    let grad_n = cfg.usize("gradient-samples").min(ds.test_y.len());
    let grad_x = ds.test_x.select_rows(&(0..grad_n).collect::<Vec<_>>());
    let grad_y = &ds.test_y[..grad_n];

    let names = labels(&loaded.iter().map(|(_, _, meta)| meta).collect::<Vec<_>>());
    let mut curves = Vec::new();
    let mut stats = Vec::new();
    for ((_, model, _), name) in loaded.iter().zip(names) {
        let c = curve(model, &ds, &ecfg)?;
        let g = gradient_stats(model, &grad_x, grad_y)?;
        println!(
            "{name}: AUC {:.2} accuracy {:.2}% separation {:.3}",
            c.auc,
            c.accuracy.first().copied().unwrap_or(f64::NAN),
            g.separation
        );
        curves.push((name.clone(), c));
        stats.push((name, g));
    }
    ensure_comparable(curves.iter().map(|(_, c)| c))?;
    write_curves(&out.join("masking_curve.csv"), &curves)?;
    let path = out.join("gradient_stats.csv");
    let mut w = create(&path)?;
    write_gradient_stats_csv(&mut w, &stats)?;
    finish(w, &path)
}

/// `(height, width)` for image exports; channels are stacked vertically.
fn image_layout(ds: &Dataset) -> (usize, usize) {
    let (c, h, w) = ds.image_shape;
    (c * h, w)
}

pub fn explain(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    prepare(cfg, out)?;
    let path = cfg
        .checkpoints()
        .into_iter()
        .next()
        .ok_or_else(|| CliError::config("checkpoint", "no checkpoint given (use --checkpoint)"))?;
    let (model, meta) = load_checkpoint(&path)?;
    let samples = cfg.list_usize("samples");
    if samples.is_empty() {
        return Ok(());
    }
    let (_, ds) = load_dataset(cfg, Some(&meta.dataset))?;
    ensure_fits(&model, &ds, &path)?;
    if let Some(bad) = samples.iter().find(|&&i| i >= ds.test_y.len()) {
        return Err(CliError::config(
            "samples",
            format!("index {bad} is outside the {} test samples", ds.test_y.len()),
        ));
    }
    let x = ds.test_x.select_rows(&samples);
    let y: Vec<usize> = samples.iter().map(|&i| ds.test_y[i]).collect();
    let (h, w) = image_layout(&ds);
    for (imp, i) in importance_maps(&model, &x, &y)?.iter().zip(&samples) {
        export_saliency(imp, h, w, out, &format!("sample_{i:05}"))?;
    }
    println!("wrote {} saliency maps to {}", samples.len(), out.display());
    Ok(())
}

pub fn diagnose(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    prepare(cfg, out)?;
    let path = cfg
        .checkpoints()
        .into_iter()
        .next()
        .ok_or_else(|| CliError::config("checkpoint", "no checkpoint given (use --checkpoint)"))?;
    let (model, meta) = load_checkpoint(&path)?;
    let (_, ds) = load_dataset(cfg, Some(&meta.dataset))?;
    ensure_fits(&model, &ds, &path)?;
    let fallback = WhiteningConfig {
        group_size: cfg.usize("group-size"),
        eps: cfg.f64("eps"),
        ema_decay: cfg.f64("ema-decay"),
    };
    let diag = diagnose_features(&model, &ds.test_x, fallback)?;
    println!(
        "effective rank before whitening {:.3} / {}",
        diag.before.effective_rank, diag.before.nominal_dim
    );
    println!(
        "effective rank after whitening {:.3} / {}",
        diag.after.effective_rank, diag.after.nominal_dim
    );
    if let Some(inf) = &diag.inference {
        println!(
            "effective rank under running statistics {:.3} / {}",
            inf.effective_rank, inf.nominal_dim
        );
    }
    for (g, (size, rank)) in diag.groups.iter().enumerate() {
        println!("group {g}: effective rank {rank:.3} / {size}");
    }

    let spectrum = out.join("spectrum.csv");
    let mut w = create(&spectrum)?;
    let io = |e| CliError::io(&spectrum, e);
    writeln!(w, "index,before,after").map_err(io)?;
    for (i, (b, a)) in diag.before.eigenvalues.iter().zip(&diag.after.eigenvalues).enumerate() {
        writeln!(w, "{i},{b:e},{a:e}").map_err(io)?;
    }
    finish(w, &spectrum)?;

    let groups = out.join("groups.csv");
    let mut w = create(&groups)?;
    let io = |e| CliError::io(&groups, e);
    writeln!(w, "group,size,effective_rank").map_err(io)?;
    for (g, (size, rank)) in diag.groups.iter().enumerate() {
        writeln!(w, "{g},{size},{rank}").map_err(io)?;
    }
    finish(w, &groups)
}

/// One training run per value of whichever of `rho` / `lambda` holds a list,
/// each in its own subdirectory, then `sweep.csv` and `curves.csv`.
pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    prepare(cfg, out)?;
    let (rhos, lambdas) = (cfg.list_f64("rho"), cfg.list_f64("lambda"));
    let (param, values) = match (rhos.len(), lambdas.len()) {
        (1, 1) | (_, 1) => ("rho", rhos),
        (1, _) => ("lambda", lambdas),
        _ => return Err(CliError::config("lambda", "only one of rho and lambda may hold a list")),
    };
    let (spec, ds) = load_dataset(cfg, None)?;
    let ecfg = eval_config(cfg, &ds);

    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &v in &values {
        let label = format!("{param}={v}");
        let dir = out.join(&label);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let (rho, lambda) = if param == "rho" {
            (v, single(cfg, "lambda")?)
        } else {
            (single(cfg, "rho")?, v)
        };
        let t = train_into(cfg, &spec, &ds, rho, lambda, &dir)?;
        let c = curve(&t.model, &ds, &ecfg)?;
        println!("{label}: test accuracy {:.2}% AUC {:.2}", t.accuracy, c.auc);
        rows.push((v, t.accuracy, c.auc));
        curves.push((label, c));
    }

    let path = out.join("sweep.csv");
    let mut w = create(&path)?;
    let io = |e| CliError::io(&path, e);
    writeln!(w, "param,value,test_accuracy,auc").map_err(io)?;
    for (v, acc, auc) in &rows {
        writeln!(w, "{param},{v},{acc},{auc}").map_err(io)?;
    }
    finish(w, &path)?;
    write_curves(&out.join("curves.csv"), &curves)
}
