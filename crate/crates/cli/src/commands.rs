use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use serde_json::json;

use gldn_core::checks::{gradient_suite, SuiteOptions};
use gldn_core::dataset::{generate_dataset, kfold, Manifest, Split, VolumeSet, MANIFEST_FILE};
use gldn_core::model::shape_chain;
use gldn_core::training::{evaluate, fit, StopReason};
use gldn_core::{load_checkpoint, save_checkpoint, Error, Gldn, RunConfig};

use crate::{CmdResult, EvalArgs, Failure, GenDataArgs, GradcheckArgs, InspectArgs, TrainArgs};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.txt";

fn load_config(path: Option<&Path>) -> CmdResult<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .map_err(|e| Failure {
            code: crate::EXIT_USAGE,
            error: e,
        })?;
    RunConfig::from_text(&text)
        .with_context(|| format!("in {}", path.display()))
        .map_err(Failure::from)
}

fn parse_fractions(text: &str) -> CmdResult<[f64; 3]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::usage(format!("--fractions: cannot parse {text:?}")))?;
    parts
        .try_into()
        .map_err(|_| Failure::usage("--fractions needs three values"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn gen_data(a: &GenDataArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = &a.shape {
        cfg.set("shape", s)?;
    }
    if let Some(seed) = a.seed {
        cfg.phantom.seed = seed;
    }
    if let Some(n) = a.noise {
        if !(n >= 0.0) {
            return Err(Failure::usage(format!(
                "--noise must be nonnegative, got {n}"
            )));
        }
        cfg.phantom.noise_sigma = n;
    }
    if a.count == 0 {
        return Err(Failure::usage("--count must be positive"));
    }
    let [d, h, w] = cfg.phantom.shape;
    cfg.model.input_shape = cfg.phantom.shape;
    cfg.model.validate().with_context(|| {
        format!("shape {d}x{h}x{w} cannot be processed by the configured model")
    })?;
    let fractions = parse_fractions(&a.fractions)?;
    let manifest = generate_dataset(&a.out, a.count, &cfg.phantom, fractions)?;
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| manifest.split(s).len());
    println!(
        "{}",
        json!({
            "dir": a.out,
            "count": a.count,
            "train": counts[0],
            "val": counts[1],
            "test": counts[2],
        })
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    out: PathBuf,
    epochs: usize,
    best_epoch: usize,
    best_val_loss: f64,
    best_val_mae: f64,
    stop: StopReason,
    lambda_flipped_at: Option<usize>,
}

fn train_one(
    cfg: &RunConfig,
    data: &Path,
    manifest: &Manifest,
    out: &Path,
) -> CmdResult<TrainSummary> {
    let train = VolumeSet::load(data, manifest, Split::Train)?;
    let val = VolumeSet::load(data, manifest, Split::Val)?;
    let mut cfg = cfg.clone();
    if train.dims != cfg.model.input_shape {
        log::info!("input shape {:?} taken from the dataset", train.dims);
        cfg.model.input_shape = train.dims;
        cfg.phantom.shape = train.dims;
    }
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.render()).map_err(io_err(&config_path))?;

    let (model, mut store) = Gldn::build::<f32>(&cfg.model, cfg.train.seed)?;
    log::info!(
        "{} parameters, {} train / {} val volumes",
        store.num_params(),
        train.len(),
        val.len()
    );
    let metrics_path = out.join(crate::commands::METRICS_FILE);
    let ckpt = out.join(CHECKPOINT_FILE);
    let mut log = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    let result = fit(
        &model,
        &mut store,
        &train,
        &val,
        &cfg.train,
        |rec, improved, store| {
            let line = serde_json::to_string(rec).expect("records serialize");
            writeln!(log, "{line}")
                .and_then(|_| log.flush())
                .map_err(io_err(&metrics_path))?;
            if improved {
                save_checkpoint(&ckpt, &cfg.model, store)?;
            }
            Ok(())
        },
    );
    let outcome = match result {
        Ok(o) => o,
        Err(e @ Error::Numeric(_)) => {
            return Err(Failure {
                code: crate::EXIT_RUNTIME,
                error: anyhow::Error::from(e).context(format!(
                    "training diverged; {} holds the last good checkpoint",
                    ckpt.display()
                )),
            })
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&ckpt, &cfg.model, &outcome.best_store)?;
    let best = &outcome.history[outcome.best_epoch];
    Ok(TrainSummary {
        out: out.to_path_buf(),
        epochs: outcome.history.len(),
        best_epoch: outcome.best_epoch,
        best_val_loss: outcome.best_val_loss,
        best_val_mae: best.val_mae,
        stop: outcome.stop,
        lambda_flipped_at: outcome.lambda.flipped_at,
    })
}

pub(crate) fn train(a: &TrainArgs) -> CmdResult {
    let mut cfg = load_config(a.config.as_deref())?;
    let mut pairs = Vec::with_capacity(a.sets.len());
    for s in &a.sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
        pairs.push((k.trim(), v.trim()));
    }
    cfg.apply(pairs)?;
    if let Some(ab) = &a.ablation {
        cfg.set("ablation", ab)?;
    }
    if let Some(seed) = a.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(m) = a.max_epochs {
        cfg.train.max_epochs = m;
    }
    let manifest = Manifest::read(a.data.join(MANIFEST_FILE))?;
    match a.folds {
        None => {
            let summary = train_one(&cfg, &a.data, &manifest, &a.out)?;
            println!(
                "{}",
                serde_json::to_string(&summary).expect("summary serializes")
            );
        }
        Some(k) => {
            let mut maes = Vec::with_capacity(k);
            for fold in 0..k {
                let m = kfold(&manifest, k, fold, cfg.train.seed)?;
                let summary = train_one(&cfg, &a.data, &m, &a.out.join(format!("fold{fold}")))?;
                println!(
                    "{}",
                    serde_json::to_string(&summary).expect("summary serializes")
                );
                maes.push(summary.best_val_mae);
            }
            let mean = maes.iter().sum::<f64>() / k as f64;
            println!("{}", json!({ "folds": k, "mean_best_val_mae": mean }));
        }
    }
    Ok(())
}

/// Metrics of a checkpoint on one split, as printed by `gldn eval`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub pcc: Option<f64>,
    pub srcc: Option<f64>,
    pub n: usize,
}

pub fn eval_metrics(
    data: &Path,
    split: Split,
    checkpoint: &Path,
    batch_size: usize,
) -> CmdResult<EvalReport> {
    let ck = load_checkpoint(checkpoint)?;
    let manifest = Manifest::read(data.join(MANIFEST_FILE))?;
    let set = VolumeSet::load(data, &manifest, split)?;
    if set.dims != ck.config.input_shape {
        return Err(Error::Config(format!(
            "dataset extents {:?} differ from the checkpoint's input shape {:?}",
            set.dims, ck.config.input_shape
        ))
        .into());
    }
    if batch_size == 0 {
        return Err(Failure::usage("--batch-size must be positive"));
    }
    let theta = gldn_core::LossConfig::default().theta;
    let ev = evaluate(&ck.model, &ck.store, &set, batch_size, theta, 0.0)?;
    Ok(EvalReport {
        mae: ev.metrics.mae,
        rmse: ev.metrics.rmse,
        pcc: ev.metrics.pcc,
        srcc: ev.metrics.srcc,
        n: set.len(),
    })
}

pub(crate) fn eval(a: &EvalArgs) -> CmdResult {
    let split: Split = a.split.parse().map_err(Failure::usage)?;
    let report = eval_metrics(&a.data, split, &a.checkpoint, a.batch_size)?;
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    Ok(())
}

pub(crate) fn gradcheck(a: &GradcheckArgs) -> CmdResult {
    let cfg = load_config(a.config.as_deref())?;
    if !(a.tol > 0.0) || a.max_coords == 0 {
        return Err(Failure::usage("--tol and --max-coords must be positive"));
    }
    let entries = gradient_suite(&SuiteOptions {
        tol: a.tol,
        seed: cfg.train.seed,
        max_coords: a.max_coords,
        inject_fault: a.inject_fault,
    })?;
    let width = entries
        .iter()
        .map(|e| e.name.len())
        .max()
        .unwrap_or(2)
        .max(2);
    println!("{:width$}  {:>12}  result", "op", "max rel err");
    let mut failed = 0;
    for e in &entries {
        let ok = e.report.passed();
        failed += usize::from(!ok);
        let err = match &e.report.failure {
            Some(msg) => msg.clone(),
            None => format!("{:.3e}", e.report.max_rel_error()),
        };
        println!(
            "{:width$}  {err:>12}  {}",
            e.name,
            if ok { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{} of {} checks passed at tol {:e}",
        entries.len() - failed,
        entries.len(),
        a.tol
    );
    if failed > 0 {
        return Err(Failure {
            code: crate::EXIT_RUNTIME,
            error: anyhow::anyhow!("{failed} gradient checks failed"),
        });
    }
    Ok(())
}

pub(crate) fn inspect(a: &InspectArgs) -> CmdResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let c = &ck.config;
    let [d, h, w] = c.input_shape;
    println!("checkpoint   {}", a.checkpoint.display());
    println!("input        {d}x{h}x{w}");
    println!("ablation     {}", c.ablation.as_str());
    println!("blocks       {}", c.blocks.len());
    for (i, b) in c.blocks.iter().enumerate() {
        println!(
            "  block{}     llb {:?}  patches {:?}  dim {}  depth {}  heads {}  spt out {}",
            i + 1,
            b.llb_channels,
            b.patches,
            b.embed_dim,
            b.depth,
            b.heads,
            b.spt_channels
        );
    }
    println!(
        "parameters   {} (analytic {})",
        ck.store.num_params(),
        Gldn::num_params(c)?
    );
    println!("  conv       {}", ck.model.conv_params());
    println!("  attention  {}", ck.model.attention_params());
    println!("shapes");
    for (name, shape) in shape_chain(c)? {
        println!("  {name:<12} {shape:?}");
    }
    Ok(())
}
