//! `mfr`: synthetic data, training, embedding extraction and evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfr_core::commands::{self, EvalInputs};
use mfr_core::config::RunConfig;
use mfr_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mfr", version, about = "Masked / standard face recognition toolkit")]
struct Cli {
    /// Configuration file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    /// Extra `key=value` configuration overrides.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic face dataset with manifests and pair lists.
    SynthData,
    /// Train the backbone and write checkpoints and a training log.
    Train,
    /// Write an embedding set for a manifest, or concatenate two sets.
    Extract(ExtractArgs),
    /// Compute verification / identification metrics.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Training run directory holding `model.mfrw` / `model_ema.mfrw` and `config.txt`.
    #[arg(long, conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    /// Explicit checkpoint file.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Use the EMA weights of `--run`.
    #[arg(long)]
    use_ema: bool,
    /// Manifest to embed (defaults to the configured test manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Concatenate two existing embedding files instead of running a model.
    #[arg(long, num_args = 2, value_names = ["A", "B"], conflicts_with_all = ["run", "checkpoint", "manifest"])]
    concat: Option<Vec<PathBuf>>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Embedding set to score.
    #[arg(long)]
    embeddings: PathBuf,
    /// Pair list (defaults to the configured pairs file).
    #[arg(long)]
    pairs: Option<PathBuf>,
    /// Gallery embeddings for top-1 identification of `--embeddings`.
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Manifest with identities for identification (defaults to the configured full manifest).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn load_config(cli: &Cli, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, fallback) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) if p.exists() => RunConfig::load(p)?,
        _ => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{o}' is not key=value")))?;
        cfg.set_override(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Validation(format!(
            "{} already exists (use --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData => {
            let cfg = load_config(&cli, None)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            let s = commands::synth_data(&cfg.synth, cfg.seed, &out, cli.force)?;
            println!(
                "wrote {} images ({} masked), {} train / {} test records and {} pairs to {}",
                s.records.len(),
                s.records.iter().filter(|r| r.masked).count(),
                s.train.len(),
                s.test.len(),
                s.pairs.len(),
                out.display()
            );
        }
        Command::Train => {
            let cfg = load_config(&cli, None)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
            let s = commands::train(&cfg, &out, cli.force)?;
            println!(
                "trained {} steps in {:.1}s; loss {:.4} -> {:.4}; outputs in {}",
                s.steps,
                s.seconds,
                s.losses.first().copied().unwrap_or(f64::NAN),
                s.losses.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Extract(args) => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs/extract"));
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let out_file = out.join("embeddings.mfre");
            refuse_existing(&out_file, cli.force)?;
            if let Some(files) = &args.concat {
                let cfg = load_config(&cli, None)?;
                let set = commands::concat_files(&files[0], &files[1], cfg.eval.normalize_parts, &out_file)?;
                println!("wrote {} x {}-d embeddings to {}", set.len(), set.dim(), out_file.display());
                return Ok(());
            }
            let (checkpoint, echoed) = match (&args.run, &args.checkpoint) {
                (Some(run), _) => {
                    let name = if args.use_ema { "model_ema.mfrw" } else { "model.mfrw" };
                    (run.join(name), Some(run.join("config.txt")))
                }
                (None, Some(c)) => {
                    if args.use_ema {
                        return Err(Error::Config("--use-ema needs --run".into()));
                    }
                    (c.clone(), None)
                }
                (None, None) => return Err(Error::Config("extract needs --run, --checkpoint or --concat".into())),
            };
            let cfg = load_config(&cli, echoed.as_deref())?;
            let manifest = args.manifest.clone().unwrap_or_else(|| cfg.data.test_manifest.clone());
            let ex = commands::extract(&cfg, &checkpoint, &manifest, &out_file)?;
            for (key, why) in &ex.failures {
                eprintln!("skipped {key}: {why}");
            }
            println!(
                "wrote {} x {}-d embeddings to {} ({} skipped)",
                ex.set.len(),
                ex.set.dim(),
                out_file.display(),
                ex.failures.len()
            );
        }
        Command::Eval(args) => {
            let cfg = load_config(&cli, None)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs/eval"));
            refuse_existing(&out.join("report.json"), cli.force)?;
            let pairs = args.pairs.clone().unwrap_or_else(|| cfg.data.pairs.clone());
            let manifest = args.manifest.clone().unwrap_or_else(|| cfg.data.manifest.clone());
            let report = commands::evaluate(
                &cfg,
                EvalInputs {
                    embeddings: &args.embeddings,
                    pairs: &pairs,
                    gallery: args.gallery.as_deref(),
                    manifest: Some(&manifest),
                },
                Some(&out),
            )?;
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
