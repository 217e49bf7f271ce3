//! `grace`: train, evaluate and inspect robust LoRA fine-tuning runs.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 numeric abort.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use grace_core::checkpoint::load_checkpoint;
use grace_core::config::RunConfig;
use grace_core::data::{generate_bundle, Bundle};
use grace_core::diagnostics::{diag_subset, diagnose, loss_slice};
use grace_core::model::{EncoderModel, ModelObjective};
use grace_core::trainer::{self, evaluate_bundle, EvalTable, Mode, RunSummary};
use grace_core::{Error, Result};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(
    name = "grace",
    version,
    about = "Curvature-aware robust LoRA fine-tuning on synthetic domains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch and write a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `mode` from the config.
        #[arg(long)]
        mode: Option<Mode>,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean and PGD accuracy of a checkpoint on every evaluation domain.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the attack radius.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Skip the attack (adversarial columns equal clean).
        #[arg(long)]
        clean_only: bool,
        /// Directory for eval.json and the resolved config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Curvature, alignment, LID, displacement and ledger report.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for diagnostics.json and the resolved config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Loss on a 2-D slice of LoRA parameter space around a checkpoint.
    Landscape {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Points per axis; overrides `slice_grid`.
        #[arg(long)]
        grid: Option<usize>,
        /// Half-width of the slice; overrides `slice_extent`.
        #[arg(long)]
        extent: Option<f64>,
        /// Directory for landscape.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulates the summaries of one or more run directories.
    Report {
        /// Run directories written by `train`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

/// Resolved config plus the keys the user set explicitly.
fn resolve(common: &Common) -> Result<(RunConfig, Vec<String>)> {
    let mut cfg = RunConfig::default();
    let mut explicit = Vec::new();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        cfg.apply_text(&text)?;
        explicit.extend(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .filter_map(|l| l.split_once('=').map(|(k, _)| k.trim().to_string())),
        );
    }
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
            key: o.clone(),
            reason: "override must be KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
        explicit.push(k.trim().to_string());
    }
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    cfg.validate()?;
    Ok((cfg, explicit))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join(trainer::CONFIG_FILE), &cfg.to_text())
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize")
}

/// Loads a checkpoint and the bundle it is evaluated on, checking they fit.
fn load(cfg: &RunConfig, checkpoint: &Path) -> Result<(EncoderModel, Bundle)> {
    let model = load_checkpoint(checkpoint)?;
    let bundle = generate_bundle(&cfg.data)?;
    if model.input_dim() != cfg.data.input_dim || model.num_classes() != cfg.data.num_classes {
        return Err(Error::Input(format!(
            "checkpoint expects {} inputs and {} classes, bundle has {} and {}",
            model.input_dim(),
            model.num_classes(),
            cfg.data.input_dim,
            cfg.data.num_classes
        )));
    }
    Ok((model, bundle))
}

fn print_eval(table: &EvalTable) {
    println!("{:<10} {:>8} {:>8}", "domain", "clean", "adv");
    for d in &table.domains {
        println!(
            "{:<10} {:>8.2} {:>8.2}",
            d.domain,
            100.0 * d.clean,
            100.0 * d.adversarial
        );
    }
    match table.harmonic_mean {
        Some(h) => println!("harmonic mean (id, ood, id-adv): {h:.2}"),
        None => println!("harmonic mean (id, ood, id-adv): undefined"),
    }
}

fn train(common: &Common, mode: Option<Mode>, out: &Path) -> Result<()> {
    let (mut cfg, explicit) = resolve(common)?;
    if let Some(m) = mode {
        cfg.train.mode = m;
    }
    if cfg.train.mode != Mode::Grace {
        for key in explicit.iter().filter(|k| k.starts_with("lambda_")) {
            log::warn!("{key} is ignored in {} mode", cfg.train.mode);
        }
    }
    let art = trainer::run(&cfg, Some(out))?;
    print_eval(&art.summary.eval);
    println!("run directory: {}", out.display());
    Ok(())
}

fn eval(
    common: &Common,
    checkpoint: &Path,
    epsilon: Option<f64>,
    clean_only: bool,
    out: Option<&Path>,
) -> Result<()> {
    let (mut cfg, _) = resolve(common)?;
    if let Some(e) = epsilon {
        cfg.set("attack_epsilon", &e.to_string())?;
    }
    if clean_only {
        cfg.train.attack.epsilon = 0.0;
    }
    cfg.validate()?;
    let (model, bundle) = load(&cfg, checkpoint)?;
    let table = evaluate_bundle(&model, &bundle, &cfg.train.attack, cfg.train.seed)?;
    print_eval(&table);
    if let Some(dir) = out {
        write_config(dir, &cfg)?;
        write_file(&dir.join("eval.json"), &to_json(&table))?;
    }
    Ok(())
}

fn diagnose_cmd(common: &Common, checkpoint: &Path, out: &Path) -> Result<()> {
    let (cfg, _) = resolve(common)?;
    let (model, bundle) = load(&cfg, checkpoint)?;
    let report = diagnose(
        &model,
        &bundle,
        &cfg.train.attack,
        &cfg.train.awp,
        &cfg.diag,
        cfg.train.seed,
    )?;
    write_config(out, &cfg)?;
    let path = out.join("diagnostics.json");
    write_file(&path, &to_json(&report))?;
    println!(
        "lambda_max {:.6e}  hessian frob/sqrt(d) {:.6e}",
        report.curvature.lambda_max, report.curvature.frob_normalized
    );
    for d in &report.domains {
        println!(
            "{:<10} alignment {:.4}  discrepancy {:.4}",
            d.domain, d.alignment.mean, d.discrepancy
        );
    }
    println!(
        "proximity {:.6}  sharpness {:.6}",
        report.ledger.proximity, report.ledger.sharpness
    );
    println!("report: {}", path.display());
    Ok(())
}

fn landscape(
    common: &Common,
    checkpoint: &Path,
    grid: Option<usize>,
    extent: Option<f64>,
    out: &Path,
) -> Result<()> {
    let (mut cfg, _) = resolve(common)?;
    if let Some(g) = grid {
        cfg.set("slice_grid", &g.to_string())?;
    }
    if let Some(e) = extent {
        cfg.set("slice_extent", &e.to_string())?;
    }
    cfg.validate()?;
    let (model, bundle) = load(&cfg, checkpoint)?;
    let sub = diag_subset(&bundle.id_test.batch, cfg.diag.batch, cfg.train.seed);
    let obj = ModelObjective::new(&model, &sub, cfg.diag.scope);
    let slice = loss_slice(
        &obj,
        &obj.params(),
        cfg.diag.slice_grid,
        cfg.diag.slice_extent,
        cfg.train.seed,
    )?;
    write_config(out, &cfg)?;
    let path = out.join("landscape.json");
    write_file(&path, &to_json(&slice))?;
    println!(
        "{}x{} slice, center loss {:.6}: {}",
        slice.grid(),
        slice.grid(),
        slice.center_loss,
        path.display()
    );
    Ok(())
}

fn report(runs: &[PathBuf], json: bool) -> Result<()> {
    let mut rows = Vec::with_capacity(runs.len());
    for dir in runs {
        let path = dir.join(trainer::SUMMARY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let s: RunSummary = serde_json::from_str(&text)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
        rows.push((dir.clone(), s));
    }
    if json {
        let all: Vec<&RunSummary> = rows.iter().map(|(_, s)| s).collect();
        println!("{}", to_json(&all));
        return Ok(());
    }
    println!(
        "{:<11} {:>5} {:>7} {:>7} {:>9} {:>7} {:>7} {:>10} {:>7}  run",
        "mode", "seed", "id", "ood", "nat_shift", "id-adv", "hmean", "lambda_max", "align"
    );
    for (dir, s) in &rows {
        let clean = |d: &str| s.eval.get(d).map_or(f64::NAN, |x| 100.0 * x.clean);
        let adv = s.eval.get("id").map_or(f64::NAN, |x| 100.0 * x.adversarial);
        println!(
            "{:<11} {:>5} {:>7.2} {:>7.2} {:>9.2} {:>7.2} {:>7.2} {:>10.4} {:>7.4}  {}",
            s.mode.to_string(),
            s.seed,
            clean("id"),
            clean("ood"),
            clean("nat_shift"),
            adv,
            s.eval.harmonic_mean.unwrap_or(f64::NAN),
            s.curvature.lambda_max,
            s.id_adv_alignment,
            dir.display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common, mode, out } => train(common, *mode, out),
        Command::Eval {
            common,
            checkpoint,
            epsilon,
            clean_only,
            out,
        } => eval(common, checkpoint, *epsilon, *clean_only, out.as_deref()),
        Command::Diagnose {
            common,
            checkpoint,
            out,
        } => diagnose_cmd(common, checkpoint, out),
        Command::Landscape {
            common,
            checkpoint,
            grid,
            extent,
            out,
        } => landscape(common, checkpoint, *grid, *extent, out),
        Command::Report { runs, json } => report(runs, *json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) | Error::NumericAbort { .. } => ExitCode::from(EXIT_NUMERIC),
                _ => ExitCode::from(EXIT_USAGE),
            }
        }
    }
}
