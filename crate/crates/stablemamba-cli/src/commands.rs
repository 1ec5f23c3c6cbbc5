//! Subcommand implementations. Each returns the process exit code on
//! success; errors are mapped to exit codes by the caller.

use crate::config::RunConfig;
use crate::{config, svg};
use serde_json::json;
use stablemamba_core::blocks::{build_interleave_schedule, TransformerPosition};
use stablemamba_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use stablemamba_core::corruption::{severity_sweep, sweep_csv, CorruptionKind};
use stablemamba_core::data::{load_dataset_dir, save_dataset_dir};
use stablemamba_core::footprint::{count_flops, count_params};
use stablemamba_core::gradsuite;
use stablemamba_core::model::preset;
use stablemamba_core::synth::synth_two_class;
use stablemamba_core::tensor::{Result, TensorError};
use stablemamba_core::train::{argmax, evaluate, predict_logits, train};
use std::fs;
use std::path::{Path, PathBuf};

use crate::{
    ConfigArgs, CorruptEvalArgs, EvalArgs, FlopsArgs, GradcheckArgs, ParamsArgs, PlotArgs,
    ScheduleArgs, SynthArgs, TrainArgs,
};

fn usage_err(msg: String) -> TensorError {
    TensorError::Invalid { op: "cli", msg }
}

fn io_err(path: &Path, e: std::io::Error) -> TensorError {
    TensorError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    config::resolve(
        args.config.as_deref(),
        args.preset.as_deref(),
        args.seed,
        &args.sets,
    )
}

fn require<'a>(opt: &'a Option<PathBuf>, flag: &str, cmd: &str) -> Result<&'a Path> {
    opt.as_deref()
        .ok_or_else(|| usage_err(format!("{cmd} requires --{flag} <path>")))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Echo the settings a command actually ran with into its output directory.
fn echo_config(dir: &Path, value: &serde_json::Value) -> Result<()> {
    ensure_dir(dir)?;
    let text = serde_json::to_string_pretty(value).expect("config serializes");
    write_file(&dir.join("effective-config.json"), &format!("{text}\n"))
}

pub fn run_train(args: &TrainArgs) -> Result<i32> {
    let mut cfg = resolve_config(&args.cfg)?;
    if args.cfg.dump {
        println!(
            "{}",
            serde_json::to_string_pretty(&cfg).expect("config serializes")
        );
        return Ok(0);
    }
    let data = require(&args.data, "data", "train")?;
    let out = require(&args.out, "out", "train")?;
    let train_set = load_dataset_dir(data)?;
    let eval_set = match &args.eval_data {
        Some(p) => Some(load_dataset_dir(p)?),
        None => None,
    };
    if cfg.model.n_classes != train_set.n_classes {
        println!(
            "note: classifier head resized from {} to the dataset's {} classes",
            cfg.model.n_classes, train_set.n_classes
        );
        cfg.model.n_classes = train_set.n_classes;
    }
    echo_config(out, &serde_json::to_value(&cfg).expect("config serializes"))?;

    let result = train(&cfg.model, &cfg.train, &train_set, eval_set.as_ref())?;

    write_file(&out.join("metrics.csv"), &result.metrics_csv)?;
    let mut eval_csv = String::from("epoch,accuracy\n");
    for (epoch, acc) in &result.eval_history {
        eval_csv.push_str(&format!("{epoch},{acc}\n"));
    }
    write_file(&out.join("eval.csv"), &eval_csv)?;

    let last = Checkpoint {
        config: cfg.model.clone(),
        params: result.params.clone(),
        optimizer: Some(result.optimizer.clone()),
        epoch: result.epochs_run,
        rng_seed: cfg.train.seed,
        rng_word_pos: result.rng_word_pos,
    };
    save_checkpoint(&out.join("last.smck"), &last)?;
    let best = Checkpoint {
        config: cfg.model.clone(),
        params: result.best_params.clone(),
        optimizer: None,
        epoch: result.best_epoch,
        rng_seed: cfg.train.seed,
        rng_word_pos: result.rng_word_pos,
    };
    save_checkpoint(&out.join("best.smck"), &best)?;

    println!(
        "trained {} epochs; best top-1 {} at epoch {}",
        result.epochs_run, result.best_accuracy, result.best_epoch
    );
    println!(
        "wrote metrics.csv, eval.csv, best.smck, last.smck to {}",
        out.display()
    );
    Ok(0)
}

pub fn run_eval(args: &EvalArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let ds = load_dataset_dir(&args.data)?;
    let r = evaluate(&ckpt.config, &ckpt.params, &ds)?;
    println!("top-1 {} ({}/{})", r.accuracy, r.n_correct, r.n_total);
    if let Some(out) = &args.out {
        echo_config(
            out,
            &json!({
                "command": "eval",
                "checkpoint": args.checkpoint.display().to_string(),
                "data": args.data.display().to_string(),
                "model": ckpt.config,
            }),
        )?;
        write_file(
            &out.join("accuracy.csv"),
            &format!(
                "accuracy,n_correct,n_total\n{},{},{}\n",
                r.accuracy, r.n_correct, r.n_total
            ),
        )?;
    }
    Ok(0)
}

pub fn run_corrupt_eval(args: &CorruptEvalArgs) -> Result<i32> {
    let kind = CorruptionKind::parse(&args.kind)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let ds = load_dataset_dir(&args.data)?;
    // Surface geometry/config mismatches as a proper error before the sweep
    // fans out work.
    predict_logits(&ckpt.config, &ckpt.params, &ds.images[0])?;
    let rows = severity_sweep(&ds.images, &ds.labels, kind, |img| {
        let logits =
            predict_logits(&ckpt.config, &ckpt.params, img).expect("geometry validated above");
        argmax(logits.data())
    })?;
    let csv = sweep_csv(&rows);
    print!("{csv}");
    if let Some(out) = &args.out {
        echo_config(
            out,
            &json!({
                "command": "corrupt-eval",
                "checkpoint": args.checkpoint.display().to_string(),
                "data": args.data.display().to_string(),
                "kind": kind.name(),
                "model": ckpt.config,
            }),
        )?;
        write_file(&out.join("sweep.csv"), &csv)?;
        println!("wrote sweep.csv to {}", out.display());
    }
    Ok(0)
}

pub fn run_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let entries = match &args.block {
        Some(name) => vec![gradsuite::run_entry(name)?],
        None => gradsuite::run_suite()?,
    };
    let mut all_ok = true;
    for e in &entries {
        println!(
            "{:<20} {} max_rel_err {:.3e} over {} coords (tol {:.0e})",
            e.name,
            if e.passed() { "PASS" } else { "FAIL" },
            e.report.max_rel_err,
            e.report.n_checked,
            e.tol
        );
        all_ok &= e.passed();
    }
    Ok(if all_ok { 0 } else { 2 })
}

const PRESET_NAMES: [&str; 4] = ["T", "S", "M", "B"];

pub fn run_params(args: &ParamsArgs) -> Result<i32> {
    let names: Vec<String> = match &args.preset {
        Some(p) => vec![p.clone()],
        None => PRESET_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    println!(
        "{:<7} {:>5} {:>6} {:>6} {:>12} {:>9}",
        "preset", "dim", "depth", "heads", "params", "M"
    );
    for name in names {
        let cfg = preset(&name)?;
        let count = count_params(&cfg)?;
        println!(
            "{:<7} {:>5} {:>6} {:>6} {:>12} {:>9.2}",
            cfg.preset.as_deref().unwrap_or("-"),
            cfg.embed_dim,
            cfg.depth,
            cfg.n_heads,
            count,
            count as f64 / 1e6
        );
    }
    Ok(0)
}

pub fn run_flops(args: &FlopsArgs) -> Result<i32> {
    let names: Vec<String> = match &args.preset {
        Some(p) => vec![p.clone()],
        None => PRESET_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    println!(
        "{:<7} {:>6} {:>12} {:>12} {:>12} {:>12}",
        "preset", "input", "gmacs", "attn-gmacs", "scan-gmacs", "total"
    );
    for name in names {
        let mut cfg = preset(&name)?;
        if let Some(s) = args.image_size {
            cfg.image_size = s;
        }
        let fc = count_flops(&cfg)?;
        println!(
            "{:<7} {:>6} {:>12.3} {:>12.3} {:>12.3} {:>12.3}",
            cfg.preset.as_deref().unwrap_or("-"),
            format!("{0}x{0}", cfg.image_size),
            fc.headline_macs() as f64 / 1e9,
            fc.attention_scores as f64 / 1e9,
            fc.scan as f64 / 1e9,
            fc.total_macs() as f64 / 1e9
        );
    }
    Ok(0)
}

fn parse_position(s: &str) -> Result<TransformerPosition> {
    match s.to_ascii_lowercase().as_str() {
        "start" => Ok(TransformerPosition::Start),
        "middle" => Ok(TransformerPosition::Middle),
        "end" => Ok(TransformerPosition::End),
        other => Err(usage_err(format!(
            "unknown position {other:?} (expected start, middle, or end)"
        ))),
    }
}

pub fn run_schedule(args: &ScheduleArgs) -> Result<i32> {
    let position = parse_position(&args.position)?;
    let schedule = build_interleave_schedule(args.depth, args.ratio, position)?;
    println!("{}", schedule.layout_string());
    println!(
        "depth {}: {} Mamba + {} Transformer ({} per group of {}, transformer {})",
        schedule.depth(),
        schedule.n_mamba(),
        schedule.n_transformer(),
        args.ratio,
        args.ratio + 1,
        args.position.to_ascii_lowercase()
    );
    Ok(0)
}

pub fn run_synth(args: &SynthArgs) -> Result<i32> {
    let ds = synth_two_class(args.n, args.image_size, args.seed)?;
    ensure_dir(&args.out)?;
    save_dataset_dir(&args.out, &ds)?;
    echo_config(
        &args.out,
        &json!({
            "command": "synth",
            "n": args.n,
            "image_size": args.image_size,
            "seed": args.seed,
            "n_classes": ds.n_classes,
        }),
    )?;
    println!(
        "wrote {} images ({}x{}, {} classes) to {}",
        ds.len(),
        args.image_size,
        args.image_size,
        ds.n_classes,
        args.out.display()
    );
    Ok(0)
}

pub fn run_plot(args: &PlotArgs) -> Result<i32> {
    let text = fs::read_to_string(&args.input).map_err(|e| io_err(&args.input, e))?;
    let (header, rows) = svg::parse_csv(&text)?;
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| usage_err(format!("column {name:?} not in CSV header {header:?}")))
    };
    let x_name = match &args.x {
        Some(x) => x.clone(),
        None if header.iter().any(|h| h == "step") => "step".to_string(),
        None => header[0].clone(),
    };
    let xi = col(&x_name)?;
    let y_names: Vec<String> = if args.y.is_empty() {
        header
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != xi && rows.iter().all(|r| r[i].is_some()))
            .map(|(_, h)| h.clone())
            .collect()
    } else {
        args.y.clone()
    };
    if y_names.is_empty() {
        return Err(usage_err("no numeric columns to plot".to_string()));
    }
    let mut series = Vec::new();
    for name in &y_names {
        let yi = col(name)?;
        let points: Vec<(f64, f64)> = rows
            .iter()
            .filter_map(|r| Some((r[xi]?, r[yi]?)))
            .collect();
        if points.is_empty() {
            return Err(usage_err(format!("column {name:?} has no numeric values")));
        }
        series.push(svg::Series {
            name: name.clone(),
            points,
        });
    }
    let title = match &args.title {
        Some(t) => t.clone(),
        None => args
            .input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "chart".to_string()),
    };
    let chart = svg::render_chart(&title, &x_name, &series)?;
    write_file(&args.out, &chart)?;
    println!("wrote {}", args.out.display());
    Ok(0)
}
